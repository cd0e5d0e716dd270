//! JSON checkpoints holding the base tracker and, optionally, the latent network.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clnet::ClNet;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalbench::Sequence;
use crate::nn::Params;
use crate::siamese::RpnModel;
use crate::training::{train_base, train_clnet, LogRow, TrainConfig};

pub const FORMAT: &str = "clnet-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Model hash of the configuration that produced the weights.
    pub config_hash: String,
    pub seed: u64,
    pub model: RpnModel,
    pub clnet: Option<ClNet>,
}

impl Checkpoint {
    pub fn new(cfg: &RunConfig, model: RpnModel, clnet: Option<ClNet>) -> Result<Self> {
        Ok(Self {
            format: FORMAT.to_string(),
            version: VERSION,
            config_hash: cfg.model_hash()?,
            seed: cfg.seed,
            model,
            clnet,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let ckpt: Self =
            serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format != FORMAT || ckpt.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        if !ckpt.model.all_finite() || ckpt.clnet.as_ref().is_some_and(|n| !n.all_finite()) {
            return Err(Error::Checkpoint(format!("{}: non-finite weights", path.display())));
        }
        Ok(ckpt)
    }

    /// Fails when the checkpoint was produced under different model shapes.
    pub fn check_compatible(&self, cfg: &RunConfig) -> Result<()> {
        let want = cfg.model_hash()?;
        if self.config_hash != want {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {} does not match {}",
                short(&self.config_hash),
                short(&want)
            )));
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub base_log: Vec<LogRow>,
    pub clnet_log: Vec<LogRow>,
}

/// Section seeds are offsets from the run seed.
fn seeded(section: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed: seed.wrapping_add(section.seed), ..section.clone() }
}

/// Trains the base tracker, then the latent network with the base frozen.
pub fn train_checkpoint(cfg: &RunConfig, dataset: &[Sequence]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = RpnModel::init(cfg.model.clone(), &mut rng)?;
    let base_log = train_base(&mut model, dataset, &seeded(&cfg.training.base, cfg.seed))?;
    let k = cfg.model.anchors_per_cell;
    let mut net = ClNet::init(cfg.clnet.clone(), cfg.model.head_hidden, k, 1, &mut rng)?;
    let clnet_log = train_clnet(&model, &mut net, dataset, &seeded(&cfg.training.clnet, cfg.seed))?;
    Ok(TrainOutcome { checkpoint: Checkpoint::new(cfg, model, Some(net))?, base_log, clnet_log })
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}
