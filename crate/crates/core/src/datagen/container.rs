use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, LabelSet, LabeledImageSet, OodKind, Origin};
use crate::container::{self, ContainerError};

pub const MAGIC: [u8; 4] = *b"PLOD";
pub const FORMAT_VERSION: u32 = 1;
const OOD_SENTINEL: u16 = 0xFFFF;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub n: usize,
    pub q: usize,
    pub p: f64,
    pub origin: Origin,
    pub seed: u64,
    /// `[channels, height, width]`
    pub shape: [usize; 3],
    #[serde(default)]
    pub ood_kind: Option<OodKind>,
}

impl DatasetHeader {
    fn body_len(&self) -> usize {
        let [c, h, w] = self.shape;
        self.n * (c * h * w * 8 + 2 + LabelSet::byte_len(self.q))
    }
}

impl From<ContainerError> for DataError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::BadMagic { found, .. } => DataError::BadMagic(found),
            ContainerError::Version(v) => DataError::Version(v),
            ContainerError::Truncated {
                section,
                expected,
                actual,
            } => DataError::Truncated {
                section,
                expected,
                actual,
            },
            ContainerError::Header(m) => DataError::Header(m),
            ContainerError::Io(e) => DataError::Io(e),
        }
    }
}

pub fn save_dataset(set: &LabeledImageSet, path: &Path) -> Result<(), DataError> {
    let header = DatasetHeader {
        n: set.len(),
        q: set.classes,
        p: set.partial_rate,
        origin: set.origin,
        seed: set.seed,
        shape: [1, set.side, set.side],
        ood_kind: set.ood_kind,
    };
    let mut body = Vec::with_capacity(header.body_len());
    container::push_f64s(&mut body, &set.pixels);
    for label in &set.true_labels {
        let raw = match label {
            Some(l) => u16::try_from(*l).ok().filter(|&v| v != OOD_SENTINEL).ok_or(
                DataError::Label {
                    label: *l,
                    classes: set.classes,
                },
            )?,
            None => OOD_SENTINEL,
        };
        body.extend_from_slice(&raw.to_le_bytes());
    }
    for s in &set.candidates {
        body.extend_from_slice(s.as_bytes());
    }
    Ok(container::write(path, MAGIC, FORMAT_VERSION, &header, &body)?)
}

/// Header fields only; the image body is not read.
pub fn read_header(path: &Path) -> Result<DatasetHeader, DataError> {
    Ok(container::read_header(path, MAGIC, FORMAT_VERSION)?)
}

pub fn load_dataset(path: &Path) -> Result<LabeledImageSet, DataError> {
    let (header, body): (DatasetHeader, _) =
        container::read(path, MAGIC, FORMAT_VERSION, |h: &DatasetHeader| {
            if h.shape[0] != 1 || h.shape[1] != h.shape[2] {
                return Err(ContainerError::Header(format!("unsupported shape {:?}", h.shape)));
            }
            Ok(h.body_len())
        })?;
    let [_, side, _] = header.shape;
    let n = header.n;
    let pix_bytes = n * side * side * 8;
    let pixels = container::take_f64s(&body[..pix_bytes]);
    let label_bytes = &body[pix_bytes..pix_bytes + 2 * n];
    let true_labels = label_bytes
        .chunks_exact(2)
        .map(|c| {
            let v = u16::from_le_bytes([c[0], c[1]]);
            if v == OOD_SENTINEL {
                Ok(None)
            } else if (v as usize) < header.q {
                Ok(Some(v as usize))
            } else {
                Err(DataError::Label {
                    label: v as usize,
                    classes: header.q,
                })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let width = LabelSet::byte_len(header.q);
    let candidates = body[pix_bytes + 2 * n..]
        .chunks_exact(width.max(1))
        .take(n)
        .map(|c| LabelSet::from_bytes(header.q, &c[..width]))
        .collect::<Vec<_>>();
    Ok(LabeledImageSet {
        side,
        classes: header.q,
        pixels,
        true_labels,
        candidates,
        origin: header.origin,
        seed: header.seed,
        partial_rate: header.p,
        ood_kind: header.ood_kind,
    })
}

#[cfg(test)]
mod tests {
    use std::fs;

    use super::*;
    use crate::datagen::{generate_id_dataset, generate_ood_dataset, GlyphSpec};

    #[test]
    fn round_trip_id_and_ood() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GlyphSpec::standard(6, 0.2).unwrap();
        let id = generate_id_dataset(&spec, 30, 4)
            .unwrap()
            .with_partial_labels(0.3, 4)
            .unwrap();
        let ood = generate_ood_dataset(OodKind::Blob, 7, 6, 4).unwrap();
        for (name, set) in [("id.plod", &id), ("ood.plod", &ood)] {
            let path = dir.path().join(name);
            save_dataset(set, &path).unwrap();
            assert_eq!(&load_dataset(&path).unwrap(), set);
        }
    }

    #[test]
    fn header_inspection_skips_the_body() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GlyphSpec::standard(6, 0.2).unwrap();
        let set = generate_id_dataset(&spec, 12, 1)
            .unwrap()
            .with_partial_labels(0.1, 1)
            .unwrap();
        let path = dir.path().join("s.plod");
        save_dataset(&set, &path).unwrap();

        // cut the file right after the header: inspection still works
        let bytes = fs::read(&path).unwrap();
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let cut = dir.path().join("cut.plod");
        fs::write(&cut, &bytes[..12 + header_len]).unwrap();
        let h = read_header(&cut).unwrap();
        assert_eq!((h.n, h.q, h.p), (12, 6, 0.1));
        assert!(matches!(load_dataset(&cut), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let set = generate_ood_dataset(OodKind::UniformNoise, 3, 6, 0).unwrap();
        let path = dir.path().join("s.plod");
        save_dataset(&set, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let truncated = dir.path().join("t.plod");
        fs::write(&truncated, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_dataset(&truncated), Err(DataError::Truncated { .. })));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        fs::write(&truncated, &magic).unwrap();
        assert!(matches!(load_dataset(&truncated), Err(DataError::BadMagic(_))));

        let mut version = bytes.clone();
        version[4] = 9;
        fs::write(&truncated, &version).unwrap();
        assert!(matches!(load_dataset(&truncated), Err(DataError::Version(9))));

        let mut extra = bytes;
        extra.push(0);
        fs::write(&truncated, &extra).unwrap();
        assert!(matches!(load_dataset(&truncated), Err(DataError::Truncated { .. })));
    }
}
