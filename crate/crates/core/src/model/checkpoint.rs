use std::path::Path;

use super::{param_specs, ModelConfig, ModelError, RoseModel};
use crate::io;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ROSECKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

impl RoseModel<f32> {
    /// Magic, version byte, u32 length of the JSON config, the config, then
    /// every parameter as little-endian f32 in declaration order.
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let json = serde_json::to_vec(self.config())
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let len = u32::try_from(json.len())
            .map_err(|_| ModelError::Checkpoint("config too large".into()))?;
        let mut out = Vec::with_capacity(13 + json.len() + 4 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let err = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.len() < 13 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(err("bad magic"));
        }
        if bytes[8] != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {}", bytes[8])));
        }
        let len = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(13..13usize.saturating_add(len)).ok_or_else(|| err("truncated config"))?;
        let config: ModelConfig =
            serde_json::from_slice(body).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        config.validate()?;
        let mut rest = &bytes[13 + len..];
        let mut params = Vec::new();
        for (name, shape) in param_specs(&config) {
            let n: usize = shape.iter().product();
            let (chunk, tail) = rest
                .split_at_checked(4 * n)
                .ok_or_else(|| ModelError::Checkpoint(format!("truncated at {name}")))?;
            let data: Vec<f32> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Checkpoint(format!("non-finite value in {name}")));
            }
            params.push(Tensor::new(shape, data)?);
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(ModelError::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        RoseModel::from_params(config, params)
    }
}

pub fn save_checkpoint(model: &RoseModel<f32>, path: &Path) -> Result<(), ModelError> {
    io::write_atomic(path, &model.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<RoseModel<f32>, ModelError> {
    RoseModel::from_bytes(&io::read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig::micro(4, 8, 8, [2, 4, 4], 12);
        let m = RoseModel::<f32>::with_random_params(cfg, 3, 0.2).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"ROSECKPT");
        let back = RoseModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let cfg = ModelConfig::micro(4, 8, 8, [2, 4, 4], 12);
        let bytes = RoseModel::<f32>::new(cfg, 3).unwrap().to_bytes().unwrap();
        assert!(RoseModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(RoseModel::from_bytes(&extra).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(RoseModel::from_bytes(&bad).is_err());
        assert!(RoseModel::from_bytes(b"ROSE").is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(RoseModel::from_bytes(&nan).is_err());
    }
}
