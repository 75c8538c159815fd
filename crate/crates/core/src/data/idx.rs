//! IDX (MNIST distribution format) reader.
//!
//! Big-endian headers; magic 0x00000803 for 3-dimensional unsigned-byte image
//! tensors, 0x00000801 for 1-dimensional label vectors. Files may be raw or
//! gzip-compressed (sniffed from the first two bytes).

use std::fs::File;
use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use flate2::read::GzDecoder;
use ndarray::Array2;

use super::{ImageSet, IMAGE_DIM};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Loads an image/label IDX file pair into an [`ImageSet`].
///
/// Raw pixel bytes are normalized to intensities by dividing by 255; row
/// order is preserved.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageSet> {
    let image_bytes = read_maybe_gz(images_path)?;
    let label_bytes = read_maybe_gz(labels_path)?;

    let mut cur = image_bytes.as_slice();
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Length(format!("{}: truncated header", images_path.display())))?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic {magic:#010x}, expected {IMAGES_MAGIC:#010x} (3-dim unsigned byte)",
            images_path.display()
        )));
    }
    let (n, rows, cols) = (
        read_dim(&mut cur, images_path)?,
        read_dim(&mut cur, images_path)?,
        read_dim(&mut cur, images_path)?,
    );
    if rows * cols != IMAGE_DIM {
        return Err(Error::Format(format!(
            "{}: {rows}x{cols} images, expected 28x28",
            images_path.display()
        )));
    }
    if cur.len() != n * IMAGE_DIM {
        return Err(Error::Length(format!(
            "{}: payload {} bytes, header promises {}",
            images_path.display(),
            cur.len(),
            n * IMAGE_DIM
        )));
    }

    let mut lcur = label_bytes.as_slice();
    let lmagic = lcur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Length(format!("{}: truncated header", labels_path.display())))?;
    if lmagic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic {lmagic:#010x}, expected {LABELS_MAGIC:#010x} (1-dim unsigned byte)",
            labels_path.display()
        )));
    }
    let ln = read_dim(&mut lcur, labels_path)?;
    if lcur.len() != ln {
        return Err(Error::Length(format!(
            "{}: payload {} bytes, header promises {ln}",
            labels_path.display(),
            lcur.len()
        )));
    }
    if ln != n {
        return Err(Error::Consistency(format!(
            "{n} images but {ln} labels"
        )));
    }

    let mut images = Array2::zeros((n, IMAGE_DIM));
    for (mut row, chunk) in images.outer_iter_mut().zip(cur.chunks_exact(IMAGE_DIM)) {
        for (dst, &b) in row.iter_mut().zip(chunk) {
            *dst = b as f32 / 255.0;
        }
    }
    ImageSet::new(images, lcur.to_vec())
}

fn read_dim(cur: &mut &[u8], path: &Path) -> Result<usize> {
    cur.read_u32::<BigEndian>()
        .map(|v| v as usize)
        .map_err(|_| Error::Length(format!("{}: truncated header", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::{BigEndian, WriteBytesExt};
    use std::io::Write;

    pub(crate) fn write_idx_images(path: &Path, images: &[[u8; IMAGE_DIM]]) {
        let mut f = File::create(path).unwrap();
        f.write_u32::<BigEndian>(IMAGES_MAGIC).unwrap();
        f.write_u32::<BigEndian>(images.len() as u32).unwrap();
        f.write_u32::<BigEndian>(28).unwrap();
        f.write_u32::<BigEndian>(28).unwrap();
        for img in images {
            f.write_all(img).unwrap();
        }
    }

    pub(crate) fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut f = File::create(path).unwrap();
        f.write_u32::<BigEndian>(LABELS_MAGIC).unwrap();
        f.write_u32::<BigEndian>(labels.len() as u32).unwrap();
        f.write_all(labels).unwrap();
    }

    #[test]
    fn roundtrip_and_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        let mut img = [0u8; IMAGE_DIM];
        img[0] = 255;
        img[1] = 0;
        img[2] = 128;
        write_idx_images(&ip, &[img, [7; IMAGE_DIM]]);
        write_idx_labels(&lp, &[3, 9]);
        let set = load_idx(&ip, &lp).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.images()[[0, 0]], 1.0);
        assert_eq!(set.images()[[0, 1]], 0.0);
        assert_eq!(set.images()[[0, 2]], 128.0 / 255.0);
        assert_eq!(set.labels(), &[3, 9]);
    }

    #[test]
    fn label_file_with_image_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_idx_images(&ip, &[[0; IMAGE_DIM]]);
        // Pass the image file as the label file: magic 0x803 where 0x801 expected.
        let err = load_idx(&ip, &ip).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        let _ = lp;
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_idx_images(&ip, &[[1; IMAGE_DIM]]);
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 10]).unwrap();
        write_idx_labels(&lp, &[0]);
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Length(_)), "{err}");
    }

    #[test]
    fn count_mismatch_is_a_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_idx_images(&ip, &[[0; IMAGE_DIM], [0; IMAGE_DIM]]);
        write_idx_labels(&lp, &[1, 2, 3]);
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)), "{err}");
    }

    #[test]
    fn gzip_payload_loads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_idx_images(&ip, &[[42; IMAGE_DIM]]);
        write_idx_labels(&lp, &[5]);
        let plain = load_idx(&ip, &lp).unwrap();

        let gz = dir.path().join("img.gz");
        let mut enc =
            flate2::write::GzEncoder::new(File::create(&gz).unwrap(), flate2::Compression::fast());
        enc.write_all(&std::fs::read(&ip).unwrap()).unwrap();
        enc.finish().unwrap();
        let from_gz = load_idx(&gz, &lp).unwrap();
        assert_eq!(plain, from_gz);
    }
}
