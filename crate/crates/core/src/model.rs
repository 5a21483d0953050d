//! The full network: lossy coder plus residual model over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::likelihood::{MixtureKind, MAX_COMPONENTS};
use crate::lossy::LossyNet;
use crate::nn::layers::FusionKind;
use crate::nn::{ParamBuilder, ParamStore};
use crate::residual::ResidualNet;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lossy_channels: usize,
    pub lossless_channels: usize,
    pub components: usize,
    pub mixture: MixtureKind,
    pub fusion: FusionKind,
    /// Split divisor used when a caller does not pick one.
    pub divisor: u32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            lossy_channels: 32,
            lossless_channels: 16,
            components: 3,
            mixture: MixtureKind::Laplace,
            fusion: FusionKind::Gated,
            divisor: 512,
            seed: 0,
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            lossy_channels: 196,
            lossless_channels: 64,
            ..Self::desk()
        }
    }

    /// Small enough for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            lossy_channels: 4,
            lossless_channels: 4,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lossy_channels == 0 || self.lossless_channels == 0 {
            return Err(Error::argument("channel counts must be positive"));
        }
        if self.components == 0 || self.components > MAX_COMPONENTS {
            return Err(Error::argument(format!(
                "mixture components must be in 1..={MAX_COMPONENTS}, got {}",
                self.components
            )));
        }
        if self.divisor < 2 {
            return Err(Error::argument(format!("split divisor {} < 2", self.divisor)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::format(format!("model config: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub lossy: LossyNet,
    pub residual: ResidualNet,
}

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;

impl<T: Scalar> Model<T> {
    /// Freshly initialized parameters, a pure function of the config.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let lossy = LossyNet::new(&mut b, config.lossy_channels);
        let residual = ResidualNet::new(&mut b, config.lossless_channels, config.components, config.fusion);
        Ok(Model {
            config,
            store,
            lossy,
            residual,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut m = Model::<U>::new(self.config.clone()).expect("config already validated");
        m.store = self.store.cast();
        m
    }

    /// SHA-256 over the config and the `f32` image of every parameter, so
    /// the same weights hash identically whatever precision they are held in.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.config.to_json().as_bytes());
        let mut buf = Vec::new();
        for id in self.store.ids() {
            let name = self.store.name(id);
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            let v = self.store.value(id);
            for d in v.shape() {
                h.update((d as u32).to_le_bytes());
            }
            buf.clear();
            for &x in v.data() {
                buf.extend_from_slice(&x.to_f32().unwrap().to_le_bytes());
            }
            h.update(&buf);
        }
        h.finalize().into()
    }
}
