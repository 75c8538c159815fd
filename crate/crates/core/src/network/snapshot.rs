//! Immutable weight snapshots and their bit-exact binary serialization.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1};
use sha2::{Digest, Sha256};

use super::{Head, HiddenLayer, LayerParams, Network, NodeId, NodeOrigin};
use crate::error::{Error, Result, TaskId};
use crate::real::Real;

/// Frozen copy of all parameters after finishing a task, with architecture
/// metadata (unit creation times, lineage, frozen set).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot<F> {
    task: TaskId,
    state: Network<F>,
}

impl<F: Real> WeightSnapshot<F> {
    pub(crate) fn of(net: &Network<F>, task: TaskId) -> Self {
        Self { task, state: net.clone() }
    }

    /// Task index this snapshot was taken after.
    pub fn task(&self) -> TaskId {
        self.task
    }

    pub(crate) fn state(&self) -> &Network<F> {
        &self.state
    }

    pub fn input_dim(&self) -> usize {
        self.state.input_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.state.widths()
    }

    pub fn num_hidden_layers(&self) -> usize {
        self.state.num_hidden_layers()
    }

    pub fn hidden_params(&self, layer: usize) -> Result<&LayerParams<F>> {
        self.state.hidden_params(layer)
    }

    pub fn head_params(&self, task: TaskId) -> Result<&LayerParams<F>> {
        self.state.head_params(task)
    }

    pub fn head_tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.state.head_tasks()
    }

    pub fn has_head(&self, task: TaskId) -> bool {
        self.state.has_head(task)
    }

    /// Incoming weight row of a node (bias excluded), as in
    /// [`Network::node_vector`].
    pub fn node_vector(&self, node: NodeId) -> Result<ArrayView1<'_, F>> {
        self.state.node_vector(node)
    }
}

const MAGIC: &[u8; 4] = b"DNWS";
const VERSION: u32 = 1;

impl WeightSnapshot<f32> {
    /// Serializes to the versioned binary container. Round-trips bit-exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u64::<LittleEndian>(self.task as u64).unwrap();
        out.write_u32::<LittleEndian>(self.state.input_dim as u32).unwrap();

        out.write_u32::<LittleEndian>(self.state.hidden.len() as u32).unwrap();
        for layer in &self.state.hidden {
            write_matrix(&mut out, &layer.params.weights);
            write_vector(&mut out, &layer.params.bias);
            for &t in &layer.created_at {
                out.write_u32::<LittleEndian>(t as u32).unwrap();
            }
        }

        out.write_u32::<LittleEndian>(self.state.heads.len() as u32).unwrap();
        for (&task, head) in &self.state.heads {
            out.write_u32::<LittleEndian>(task as u32).unwrap();
            out.write_u32::<LittleEndian>(head.created_at as u32).unwrap();
            write_matrix(&mut out, &head.params.weights);
            write_vector(&mut out, &head.params.bias);
        }

        out.write_u32::<LittleEndian>(self.state.frozen.len() as u32).unwrap();
        for (node, &at) in &self.state.frozen {
            out.write_u32::<LittleEndian>(node.layer as u32).unwrap();
            out.write_u32::<LittleEndian>(node.unit as u32).unwrap();
            out.write_u32::<LittleEndian>(at as u32).unwrap();
        }

        out.write_u32::<LittleEndian>(self.state.lineage.len() as u32).unwrap();
        for (node, origin) in &self.state.lineage {
            out.write_u32::<LittleEndian>(node.layer as u32).unwrap();
            out.write_u32::<LittleEndian>(node.unit as u32).unwrap();
            out.write_u32::<LittleEndian>(origin.origin.layer as u32).unwrap();
            out.write_u32::<LittleEndian>(origin.origin.unit as u32).unwrap();
            out.write_u32::<LittleEndian>(origin.created_at_task as u32).unwrap();
        }

        let checksum = Sha256::digest(&out);
        out.extend_from_slice(&checksum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 {
            return Err(Error::Length("snapshot shorter than its checksum".into()));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        if checksum != &*Sha256::digest(body) {
            return Err(Error::Format("snapshot checksum mismatch".into()));
        }
        let mut cur = body;
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a weight snapshot".into()));
        }
        let version = cur.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "snapshot version {version}, this build reads {VERSION}"
            )));
        }
        let task = cur.read_u64::<LittleEndian>()? as TaskId;
        let input_dim = cur.read_u32::<LittleEndian>()? as usize;

        let n_hidden = cur.read_u32::<LittleEndian>()? as usize;
        let mut hidden = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            let weights = read_matrix(&mut cur)?;
            let bias = read_vector(&mut cur)?;
            if bias.len() != weights.nrows() {
                return Err(Error::Consistency("bias length vs weight rows".into()));
            }
            let mut created_at = Vec::with_capacity(weights.nrows());
            for _ in 0..weights.nrows() {
                created_at.push(cur.read_u32::<LittleEndian>()? as TaskId);
            }
            hidden.push(HiddenLayer { params: LayerParams { weights, bias }, created_at });
        }

        let n_heads = cur.read_u32::<LittleEndian>()? as usize;
        let mut heads = BTreeMap::new();
        for _ in 0..n_heads {
            let t = cur.read_u32::<LittleEndian>()? as TaskId;
            let created_at = cur.read_u32::<LittleEndian>()? as TaskId;
            let weights = read_matrix(&mut cur)?;
            let bias = read_vector(&mut cur)?;
            heads.insert(t, Head { params: LayerParams { weights, bias }, created_at });
        }

        let n_frozen = cur.read_u32::<LittleEndian>()? as usize;
        let mut frozen = BTreeMap::new();
        for _ in 0..n_frozen {
            let layer = cur.read_u32::<LittleEndian>()? as usize;
            let unit = cur.read_u32::<LittleEndian>()? as usize;
            let at = cur.read_u32::<LittleEndian>()? as TaskId;
            frozen.insert(NodeId::new(layer, unit), at);
        }

        let n_lineage = cur.read_u32::<LittleEndian>()? as usize;
        let mut lineage = BTreeMap::new();
        for _ in 0..n_lineage {
            let layer = cur.read_u32::<LittleEndian>()? as usize;
            let unit = cur.read_u32::<LittleEndian>()? as usize;
            let olayer = cur.read_u32::<LittleEndian>()? as usize;
            let ounit = cur.read_u32::<LittleEndian>()? as usize;
            let created = cur.read_u32::<LittleEndian>()? as TaskId;
            lineage.insert(
                NodeId::new(layer, unit),
                NodeOrigin { origin: NodeId::new(olayer, ounit), created_at_task: created },
            );
        }
        if !cur.is_empty() {
            return Err(Error::Length(format!("{} trailing bytes in snapshot", cur.len())));
        }

        Ok(WeightSnapshot { task, state: Network { input_dim, hidden, heads, frozen, lineage } })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

impl Network<f32> {
    /// SHA-256 over the little-endian bit patterns of every parameter, in a
    /// fixed traversal order. Two networks with identical parameters (and
    /// head set) produce identical digests.
    pub fn params_digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for layer in &self.hidden {
            hash_params(&mut hasher, &layer.params);
        }
        for (t, head) in &self.heads {
            hasher.update((*t as u64).to_le_bytes());
            hash_params(&mut hasher, &head.params);
        }
        hasher.finalize().into()
    }
}

fn hash_params(hasher: &mut Sha256, p: &LayerParams<f32>) {
    for v in p.weights.iter() {
        hasher.update(v.to_le_bytes());
    }
    for v in p.bias.iter() {
        hasher.update(v.to_le_bytes());
    }
}

fn write_matrix(out: &mut Vec<u8>, m: &Array2<f32>) {
    out.write_u32::<LittleEndian>(m.nrows() as u32).unwrap();
    out.write_u32::<LittleEndian>(m.ncols() as u32).unwrap();
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_vector(out: &mut Vec<u8>, v: &Array1<f32>) {
    out.write_u32::<LittleEndian>(v.len() as u32).unwrap();
    for x in v.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_matrix(cur: &mut &[u8]) -> Result<Array2<f32>> {
    let rows = cur.read_u32::<LittleEndian>()? as usize;
    let cols = cur.read_u32::<LittleEndian>()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(f32::from_bits(cur.read_u32::<LittleEndian>()?));
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Consistency(format!("matrix shape: {e}")))
}

fn read_vector(cur: &mut &[u8]) -> Result<Array1<f32>> {
    let len = cur.read_u32::<LittleEndian>()? as usize;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(f32::from_bits(cur.read_u32::<LittleEndian>()?));
    }
    Ok(Array1::from_vec(data))
}
