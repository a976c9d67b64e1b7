use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{BranchConfig, SmfModel};
use crate::meta::EmbeddingTransform;
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

/// The retained (best-validation) state of one trained branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchState {
    pub config: BranchConfig,
    pub seed: u64,
    pub params: ParamStore,
    pub transform: EmbeddingTransform,
    pub best_val_acc: f64,
    pub best_step: usize,
    pub loss_trace: Vec<f64>,
    /// Position of the episode sampler when training stopped.
    pub episode_rng_word_pos: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub feature_dim: usize,
    pub branches: Vec<BranchState>,
}

impl BranchState {
    /// Rebuilds the model and loads the stored parameters into it.
    pub fn model(&self, feature_dim: usize) -> Result<(SmfModel, ParamStore)> {
        let mut store = ParamStore::new();
        // Initial values are overwritten, only the layout matters.
        let model = SmfModel::new(&self.config, feature_dim, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        store
            .load_from(&self.params)
            .map_err(|e| Error::Checkpoint(format!("parameters do not fit the stored config: {e}")))?;
        Ok((model, store))
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        if ck.branches.is_empty() {
            return Err(Error::Checkpoint("checkpoint holds no branches".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::BranchConfig;
    use crate::gin::GinConfig;

    fn sample() -> Checkpoint {
        let gin = GinConfig {
            num_layers: 2,
            hidden_dim: 3,
            layers_used: vec![1, 2],
            ..Default::default()
        };
        let config = BranchConfig::base(gin);
        let mut params = ParamStore::new();
        SmfModel::new(&config, 4, &mut params, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: RunConfig::default(),
            feature_dim: 4,
            branches: vec![BranchState {
                config,
                seed: 9,
                params,
                transform: EmbeddingTransform::identity(6),
                best_val_acc: 0.5,
                best_step: 0,
                loss_trace: vec![1.25, 0.1 + 0.2],
                episode_rng_word_pos: 1 << 70,
            }],
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let (_, store) = back.branches[0].model(4).unwrap();
        assert_eq!(store, ck.branches[0].params);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Checkpoint::from_json("{"), Err(Error::Checkpoint(_))));
        let mut ck = sample();
        ck.format_version = 99;
        assert!(Checkpoint::from_json(&ck.to_json().unwrap()).is_err());
        assert!(sample().branches[0].model(5).is_err());
        assert!(matches!(Checkpoint::load("/nonexistent/ck.json"), Err(Error::Io { .. })));
    }
}
