//! IDX binary format: big-endian magic and dimension sizes, then unsigned
//! byte payload. Magic 0x00000801 marks a label vector, 0x00000803  an
//! image stack.

use std::path::Path;

use ndarray::Array2;

use super::dataset::Dataset;
use super::DataError;

const MAGIC_LABELS: u32 = 0x0000_0801;
const MAGIC_IMAGES: u32 = 0x0000_0803;

/// One parsed IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxPart {
    /// Class indices, one per item.
    Labels(Vec<usize>),
    /// Flattened images, one row per item, bytes scaled to [0,1] by 1/255.
    Images(Array2<f64>),
}

fn read_u32(bytes: &[u8], pos: &mut usize, what: &'static str) -> Result<u32, DataError> {
    let end = *pos + 4;
    if end > bytes.len() {
        return Err(DataError::Truncated { what });
    }
    let v = u32::from_be_bytes(bytes[*pos..end].try_into().unwrap());
    *pos = end;
    Ok(v)
}

/// Parse an IDX file from disk.
pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxPart, DataError> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0;
    let magic = read_u32(&bytes, &mut pos, "magic")?;
    match magic {
        MAGIC_LABELS => {
            let n = read_u32(&bytes, &mut pos, "item count")? as usize;
            if bytes.len() < pos + n {
                return Err(DataError::Truncated {
                    what: "label payload",
                });
            }
            let labels = bytes[pos..pos + n].iter().map(|&b| b as usize).collect();
            Ok(IdxPart::Labels(labels))
        }
        MAGIC_IMAGES => {
            let n = read_u32(&bytes, &mut pos, "item count")? as usize;
            let rows = read_u32(&bytes, &mut pos, "row count")? as usize;
            let cols = read_u32(&bytes, &mut pos, "column count")? as usize;
            let per = rows * cols;
            if bytes.len() < pos + n * per {
                return Err(DataError::Truncated {
                    what: "image payload",
                });
            }
            let data = Array2::from_shape_fn((n, per), |(i, j)| {
                bytes[pos + i * per + j] as f64 / 255.0
            });
            Ok(IdxPart::Images(data))
        }
        got => Err(DataError::BadMagic { got }),
    }
}

/// Pair an image file with a label file into a dataset.
pub fn dataset_from_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    classes: usize,
) -> Result<Dataset, DataError> {
    let images = match load_idx(images)? {
        IdxPart::Images(x) => x,
        IdxPart::Labels(_) => return Err(DataError::BadMagic { got: MAGIC_LABELS }),
    };
    let labels = match load_idx(labels)? {
        IdxPart::Labels(l) => l,
        IdxPart::Images(_) => return Err(DataError::BadMagic { got: MAGIC_IMAGES }),
    };
    if images.shape()[0] != labels.len() {
        return Err(DataError::Truncated {
            what: "matching image/label counts",
        });
    }
    for (index, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(DataError::BadLabel {
                index,
                label,
                classes,
            });
        }
    }
    Ok(Dataset::new(images, labels, classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(items: &[[u8; 4]]) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
        bytes.extend_from_slice(&(items.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        for item in items {
            bytes.extend_from_slice(item);
        }
        bytes
    }

    #[test]
    fn parses_hand_built_images_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.idx");
        std::fs::write(&path, image_file(&[[0, 51, 102, 153], [204, 255, 10, 20]])).unwrap();
        let IdxPart::Images(x) = load_idx(&path).unwrap() else {
            panic!("expected images");
        };
        assert_eq!(x.shape(), &[2, 4]);
        assert_eq!(x[[0, 0]], 0.0);
        assert_eq!(x[[0, 1]], 51.0 / 255.0);
        assert_eq!(x[[0, 3]], 0.6);
        assert_eq!(x[[1, 1]], 1.0);
    }

    #[test]
    fn parses_labels_and_pairs_into_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        std::fs::write(&img, image_file(&[[1, 2, 3, 4], [5, 6, 7, 8]])).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[7u8, 3u8]);
        std::fs::write(&lab, &bytes).unwrap();

        let data = dataset_from_idx(&img, &lab, 10).unwrap();
        assert_eq!(data.labels, vec![7, 3]);
        assert_eq!(data.classes, 10);

        // A class count that the labels exceed is rejected.
        let err = dataset_from_idx(&img, &lab, 5).unwrap_err();
        assert!(matches!(err, DataError::BadLabel { label: 7, .. }));
    }

    #[test]
    fn wrong_magic_is_a_typed_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx");
        std::fs::write(&path, 0xdeadbeefu32.to_be_bytes()).unwrap();
        let err = load_idx(&path).unwrap_err();
        assert!(matches!(err, DataError::BadMagic { got: 0xdeadbeef }));
    }

    #[test]
    fn zero_item_file_is_valid_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.idx");
        std::fs::write(&path, image_file(&[])).unwrap();
        let IdxPart::Images(x) = load_idx(&path).unwrap() else {
            panic!("expected images");
        };
        assert_eq!(x.shape()[0], 0);
    }

    #[test]
    fn truncated_payload_is_a_typed_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.idx");
        let mut bytes = image_file(&[[1, 2, 3, 4]]);
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_idx(&path).unwrap_err();
        assert!(matches!(
            err,
            DataError::Truncated {
                what: "image payload"
            }
        ));
    }
}
