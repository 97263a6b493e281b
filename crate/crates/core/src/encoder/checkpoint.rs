//! JSON checkpoint container: encoder config plus named flat tensors.
//!
//! Values are stored as `f64`, which holds every `f32` exactly, and written
//! with round-trip float formatting so save → load is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, ModelState, Real};
use crate::corpus::sha256_hex;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "vocalsim-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub config: EncoderConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_state<T: Real>(state: &ModelState<T>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dtype: T::NAME.into(),
            config: state.config.clone(),
            tensors: state
                .tensors()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    data: t.iter().map(|v| v.f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn to_state<T: Real>(&self) -> Result<ModelState<T>> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format {:?}",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let mut state = ModelState::<T>::zeros(&self.config)?;
        let slots = state.tensors_mut();
        if slots.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, config needs {}",
                self.tensors.len(),
                slots.len()
            )));
        }
        for ((name, dst), src) in slots.into_iter().zip(&self.tensors) {
            if name != src.name {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {name}, found {}",
                    src.name
                )));
            }
            if dst.len() != src.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: {} values stored, shape needs {}",
                    src.data.len(),
                    dst.len()
                )));
            }
            for (d, &s) in dst.iter_mut().zip(&src.data) {
                if !s.is_finite() {
                    return Err(Error::NonFinite("checkpoint tensor"));
                }
                *d = T::of(s);
            }
        }
        Ok(state)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = EncoderConfig {
            stage_channels: vec![4, 8],
            embed_dim: 8,
            proj_dim: 16,
        };
        let st = ModelState::<f32>::init(&cfg, &mut seeding::stream(11, &[])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        let h1 = Checkpoint::from_state(&st).save(&p).unwrap();
        let back: ModelState<f32> = Checkpoint::load(&p).unwrap().to_state().unwrap();
        for ((_, a), (_, b)) in st.tensors().into_iter().zip(back.tensors()) {
            let a: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(h1, Checkpoint::from_state(&back).hash().unwrap());

        let st64 = st.cast::<f64>();
        let back64: ModelState<f64> =
            Checkpoint::from_bytes(&Checkpoint::from_state(&st64).to_bytes().unwrap())
                .unwrap()
                .to_state()
                .unwrap();
        assert_eq!(st64, back64);
    }

    #[test]
    fn mismatched_config_rejected() {
        let st = ModelState::<f64>::init(&EncoderConfig::default(), &mut seeding::stream(1, &[]))
            .unwrap();
        let mut ck = Checkpoint::from_state(&st);
        ck.config.embed_dim = 64;
        assert!(ck.to_state::<f64>().is_err());
        let mut ck = Checkpoint::from_state(&st);
        ck.version = 99;
        assert!(ck.to_state::<f64>().is_err());
    }
}
