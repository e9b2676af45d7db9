//! Safetensors checkpoints. Parameters are stored as `param.<name>`; callers may
//! add further tensors (optimizer moments) and string metadata. The backbone
//! config travels in the metadata so a checkpoint is self-describing.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use candle_core::{Device, Tensor};
use sha2::{Digest, Sha256};

use super::{BackboneConfig, TrajectoryNet};
use crate::error::{Error, Result};

pub const FORMAT: &str = "trajrep-checkpoint-1";
const PARAM_PREFIX: &str = "param.";

pub struct Checkpoint {
    pub backbone: BackboneConfig,
    pub metadata: HashMap<String, String>,
    /// Every tensor except the parameters, keyed by full name.
    pub extra: HashMap<String, Tensor>,
    params: HashMap<String, Tensor>,
}

/// Writes `model` plus `extra` tensors atomically (temporary file, then rename),
/// so an interrupted write leaves any previous checkpoint at `path` intact.
pub fn save(
    path: &Path,
    model: &TrajectoryNet,
    extra: &[(String, Tensor)],
    metadata: HashMap<String, String>,
) -> Result<()> {
    let mut meta = metadata;
    meta.insert("format".into(), FORMAT.into());
    meta.insert("code_version".into(), env!("CARGO_PKG_VERSION").into());
    meta.insert("backbone".into(), serde_json::to_string(model.config())?);
    let mut tensors: Vec<(String, Tensor)> = model
        .named_parameters()
        .into_iter()
        .map(|(n, v)| (format!("{PARAM_PREFIX}{n}"), v.as_tensor().clone()))
        .collect();
    for (name, t) in extra {
        if name.starts_with(PARAM_PREFIX) {
            return Err(Error::Checkpoint(format!("extra tensor {name} collides with parameter names")));
        }
        tensors.push((name.clone(), t.clone()));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::from(e).at(parent))?;
    }
    let tmp = path.with_extension("safetensors.tmp");
    safetensors::serialize_to_file(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(meta), &tmp)
        .map_err(|e| Error::Checkpoint(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| Error::from(e).at(path))?;
    Ok(())
}

pub fn load(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let metadata = header.metadata().clone().unwrap_or_default();
    if metadata.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::Checkpoint(format!("{} is not a {FORMAT} file", path.display())));
    }
    let backbone: BackboneConfig = serde_json::from_str(
        metadata
            .get("backbone")
            .ok_or_else(|| Error::Checkpoint("missing backbone config".into()))?,
    )?;
    let all = candle_core::safetensors::load_buffer(&bytes, device)?;
    let mut params = HashMap::new();
    let mut extra = HashMap::new();
    for (name, t) in all {
        match name.strip_prefix(PARAM_PREFIX) {
            Some(p) => params.insert(p.to_string(), t),
            None => extra.insert(name, t),
        };
    }
    Ok(Checkpoint {
        backbone,
        metadata,
        extra,
        params,
    })
}

impl Checkpoint {
    /// Rebuilds the network. With `expected`, a differing stored config is an error.
    pub fn build_model(&self, expected: Option<&BackboneConfig>, device: &Device) -> Result<TrajectoryNet> {
        if let Some(exp) = expected {
            if exp != &self.backbone {
                return Err(Error::Checkpoint(format!(
                    "checkpoint backbone {:?} does not match configured {:?}",
                    self.backbone, exp
                )));
            }
        }
        let model = TrajectoryNet::new(self.backbone.clone(), 0, device)?;
        self.restore_into(&model)?;
        Ok(model)
    }

    /// Copies stored parameters into `model`; names and shapes must match exactly.
    pub fn restore_into(&self, model: &TrajectoryNet) -> Result<()> {
        let named = model.named_parameters();
        if named.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                named.len()
            )));
        }
        for (name, var) in named {
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// Hex SHA-256 of a file.
pub fn file_hash(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::from(e).at(path))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            stage_widths: vec![2, 2, 4, 4, 4, 2],
            image_size: (16, 16),
            scale_projection: 4,
            projector_hidden: 8,
            embed_dim: 6,
            ..BackboneConfig::reference()
        }
    }

    #[test]
    fn round_trip_restores_embeddings() {
        let dev = Device::Cpu;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let a = TrajectoryNet::new(tiny(), 3, &dev).unwrap();
        let extra = vec![("adam.m.x".to_string(), Tensor::ones(3, candle_core::DType::F32, &dev).unwrap())];
        let mut meta = HashMap::new();
        meta.insert("note".into(), "hi".into());
        save(&path, &a, &extra, meta).unwrap();
        let ck = load(&path, &dev).unwrap();
        assert_eq!(ck.metadata["note"], "hi");
        assert!(ck.extra.contains_key("adam.m.x"));
        let b = ck.build_model(Some(&tiny()), &dev).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 3, 16, 16), &dev).unwrap();
        let za = a.embed(&x).unwrap().to_vec2::<f32>().unwrap();
        let zb = b.embed(&x).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(za, zb);
        let mut other = tiny();
        other.embed_dim = 7;
        assert!(matches!(ck.build_model(Some(&other), &dev), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        let t = Tensor::zeros(2, candle_core::DType::F32, &Device::Cpu).unwrap();
        safetensors::serialize_to_file([("a", &t)], None, &path).unwrap();
        assert!(matches!(load(&path, &Device::Cpu), Err(Error::Checkpoint(_))));
    }
}
