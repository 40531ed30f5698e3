//! Parameter checkpoints: a JSON manifest of `(name, shape, byte offset)`
//! entries next to one flat little-endian `f32` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::tensor::Tensor;
use super::AutodiffError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub blob: String,
    pub total_bytes: usize,
    pub params: Vec<CheckpointEntry>,
}

pub fn encode(store: &ParamStore<f32>, blob_name: &str) -> (CheckpointManifest, Vec<u8>) {
    let mut bytes = Vec::new();
    let mut params = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        params.push(CheckpointEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset: bytes.len() });
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest { blob: blob_name.to_string(), total_bytes: bytes.len(), params };
    (manifest, bytes)
}

/// Loads values into an existing store. Every parameter in the store must be
/// present with a matching shape.
pub fn decode_into(manifest: &CheckpointManifest, bytes: &[u8], store: &mut ParamStore<f32>) -> Result<(), AutodiffError> {
    if bytes.len() != manifest.total_bytes {
        return Err(AutodiffError::Checkpoint(format!(
            "blob has {} bytes, manifest says {}",
            bytes.len(),
            manifest.total_bytes
        )));
    }
    let mut seen = 0;
    for entry in &manifest.params {
        let id = store
            .id_of(&entry.name)
            .ok_or_else(|| AutodiffError::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        let p = store.get_mut(id);
        if p.value.shape() != entry.shape.as_slice() {
            return Err(AutodiffError::Checkpoint(format!(
                "{}: checkpoint shape {:?}, network shape {:?}",
                entry.name,
                entry.shape,
                p.value.shape()
            )));
        }
        let n = p.value.len();
        let end = entry.offset + 4 * n;
        let raw = bytes
            .get(entry.offset..end)
            .ok_or_else(|| AutodiffError::Checkpoint(format!("{}: range {}..{end} out of blob", entry.name, entry.offset)))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        p.value = Tensor::new(entry.shape.clone(), data)?;
        seen += 1;
    }
    if seen != store.len() {
        return Err(AutodiffError::Checkpoint(format!("checkpoint covers {seen} of {} parameters", store.len())));
    }
    Ok(())
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`.
pub fn save(store: &ParamStore<f32>, dir: &Path, stem: &str) -> Result<(), AutodiffError> {
    let blob_name = format!("{stem}.bin");
    let (manifest, bytes) = encode(store, &blob_name);
    fs::create_dir_all(dir)?;
    fs::write(dir.join(&blob_name), bytes)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
    fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}

pub fn load_into(store: &mut ParamStore<f32>, dir: &Path, stem: &str) -> Result<(), AutodiffError> {
    let manifest_path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| AutodiffError::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| AutodiffError::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    let blob_path = dir.join(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(|e| AutodiffError::Checkpoint(format!("{}: {e}", blob_path.display())))?;
    decode_into(&manifest, &bytes, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(values in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40), split in 0usize..40) {
            let split = split.min(values.len());
            let mut store = ParamStore::<f32>::new();
            store.add("a", Tensor::new(vec![split], values[..split].to_vec()).unwrap()).unwrap();
            store.add("b", Tensor::new(vec![values.len() - split], values[split..].to_vec()).unwrap()).unwrap();
            let (manifest, bytes) = encode(&store, "x.bin");
            let mut other = store.clone();
            for p in other.iter_mut() { p.value.fill(0.0); }
            decode_into(&manifest, &bytes, &mut other).unwrap();
            for ((_, p), (_, q)) in store.iter().zip(other.iter()) {
                let a: Vec<u32> = p.value.data().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = q.value.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[2, 2])).unwrap();
        let (mut manifest, bytes) = encode(&store, "x.bin");
        manifest.params[0].shape = vec![4];
        assert!(decode_into(&manifest, &bytes, &mut store).is_err());
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::new(vec![3], vec![1.0, -2.5, 1e-20]).unwrap()).unwrap();
        save(&store, dir.path(), "member_0").unwrap();
        let mut other = store.clone();
        other.iter_mut().for_each(|p| p.value.fill(0.0));
        load_into(&mut other, dir.path(), "member_0").unwrap();
        assert_eq!(other.snapshot(), store.snapshot());
    }
}
