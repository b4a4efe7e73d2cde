//! Binary artifact files: a fixed magic, a format version and a kind tag in
//! front of a bincode payload.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{DetectionMode, NameSet};
use crate::oom::DiscriminantSelection;

pub const MAGIC: &[u8; 8] = b"OOMSCENE";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ArtifactKind {
    Bundle = 1,
    OccurrenceModel = 2,
    Selection = 3,
    Descriptors = 4,
    Topics = 5,
}

impl ArtifactKind {
    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => Self::Bundle,
            2 => Self::OccurrenceModel,
            3 => Self::Selection,
            4 => Self::Descriptors,
            5 => Self::Topics,
            _ => return None,
        })
    }
}

const HEADER_LEN: usize = MAGIC.len() + 2 + 1;

pub fn to_bytes<T: Serialize>(kind: ArtifactKind, value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind as u8);
    bincode::serialize_into(&mut out, value).map_err(|e| Error::Artifact(format!("serialization failed: {e}")))?;
    Ok(out)
}

pub fn from_bytes<T: DeserializeOwned>(kind: ArtifactKind, bytes: &[u8]) -> Result<T> {
    if bytes.len() < HEADER_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Artifact("not an artifact file (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != FORMAT_VERSION {
        return Err(Error::Artifact(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    match ArtifactKind::from_tag(bytes[10]) {
        Some(found) if found == kind => {}
        found => {
            return Err(Error::Artifact(format!(
                "expected a {kind:?} artifact, found {found:?}"
            )));
        }
    }
    bincode::deserialize(&bytes[HEADER_LEN..]).map_err(|e| Error::Artifact(format!("corrupt payload: {e}")))
}

pub fn save<T: Serialize>(path: impl AsRef<Path>, kind: ArtifactKind, value: &T) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(kind, value)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: DeserializeOwned>(path: impl AsRef<Path>, kind: ArtifactKind) -> Result<T> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(kind, &bytes)
}

/// SHA-256 over the vocabulary and the selected object indices, hex encoded.
pub fn selection_hash(vocabulary: &NameSet, sel: &DiscriminantSelection) -> String {
    let mut h = Sha256::new();
    for name in vocabulary.names() {
        h.update(name.as_bytes());
        h.update([0]);
    }
    for &o in &sel.selected {
        h.update((o as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Encoded descriptors of a manifest, one row per record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorMatrix {
    pub mode: DetectionMode,
    /// Pyramid layout (hard) or `vlad:<K>x<P>` (soft).
    pub layout: String,
    pub selection_hash: String,
    pub dim: usize,
    pub image_ids: Vec<String>,
    pub labels: Vec<Option<usize>>,
    pub rows: Vec<Vec<f64>>,
}

impl DescriptorMatrix {
    pub fn to_csv(&self, classes: &NameSet) -> String {
        let mut s = String::from("image_id,class");
        for j in 0..self.dim {
            s.push_str(&format!(",d{j}"));
        }
        s.push('\n');
        for ((id, label), row) in self.image_ids.iter().zip(&self.labels).zip(&self.rows) {
            s.push_str(id);
            s.push(',');
            s.push_str(label.map_or("?", |c| classes.name(c)));
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}
