//! JSON network checkpoints.
//!
//! ```json
//! {
//!   "format": "qfit-network",
//!   "version": 1,
//!   "model_kind": "adc",
//!   "hidden_activation": "elu",
//!   "output_activation": "identity",
//!   "seed": 42,
//!   "config_hash": "…",
//!   "network": { "layer_sizes": [10, 10, 10, 10, 2], "params": [ … ] }
//! }
//! ```
//!
//! Floats are written in shortest round-trip form and parsed back exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{Error, Result};
use crate::sigmodels::ModelKind;

pub const CHECKPOINT_FORMAT: &str = "qfit-network";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model_kind: ModelKind,
    pub hidden_activation: String,
    pub output_activation: String,
    pub seed: u64,
    pub config_hash: String,
    pub network: Network,
}

impl Checkpoint {
    pub fn new(network: Network, model_kind: ModelKind, seed: u64, config_hash: impl Into<String>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model_kind,
            hidden_activation: "elu".into(),
            output_activation: "identity".into(),
            seed,
            config_hash: config_hash.into(),
            network,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        if self.network.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("cannot checkpoint non-finite weights".into()));
        }
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                ck.format, ck.version
            )));
        }
        // Re-validate the parameter count against the layer sizes.
        let net = Network::from_parts(ck.network.layer_sizes().to_vec(), ck.network.params().to_vec())?;
        if net.output_width() != ck.model_kind.n_params() {
            return Err(Error::Format(format!(
                "{} checkpoint with {} outputs",
                ck.model_kind,
                net.output_width()
            )));
        }
        Ok(Checkpoint { network: net, ..ck })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn checkpoint_round_trips_exactly(seed in any::<u64>(), scale in -1e6f64..1e6) {
            let mut net = Network::for_model(10, 4, seed).unwrap();
            for p in net.params_mut() {
                *p *= scale;
            }
            let ck = Checkpoint::new(net, ModelKind::Ivim, seed, "abc");
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn rejects_wrong_format_and_shapes() {
        let ck = Checkpoint::new(Network::for_model(10, 2, 1).unwrap(), ModelKind::Adc, 1, "");
        let text = ck.to_json().unwrap().replace("qfit-network", "other");
        assert!(Checkpoint::from_json(&text).is_err());
        let ck = Checkpoint::new(Network::for_model(10, 2, 1).unwrap(), ModelKind::Ivim, 1, "");
        assert!(Checkpoint::from_json(&ck.to_json().unwrap()).is_err());
    }
}
