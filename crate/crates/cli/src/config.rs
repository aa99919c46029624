//! key=value configuration files for training runs.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are errors
//! (typos should not silently train the wrong model).

use ckbd::codec::{ContextKind, ModelConfig};
use ckbd::trainer::TrainConfig;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Synthetic corpus parameters.
    pub corpus_seed: u64,
    pub corpus_count: usize,
    pub corpus_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::desk_default(ModelConfig::default()),
            corpus_seed: 2024,
            corpus_count: 64,
            corpus_size: 64,
        }
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or(format!("line {}: expected key = value", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let fail = |what: &str| format!("line {}: bad {what}: {value}", lineno + 1);
        match key {
            "lambda" => cfg.train.lambda = value.parse().map_err(|_| fail("lambda"))?,
            "steps" => cfg.train.steps = value.parse().map_err(|_| fail("steps"))?,
            "batch" => cfg.train.batch = value.parse().map_err(|_| fail("batch"))?,
            "patch_size" => cfg.train.patch_size = value.parse().map_err(|_| fail("patch_size"))?,
            "learning_rate" => {
                cfg.train.learning_rate = value.parse().map_err(|_| fail("learning_rate"))?
            }
            "lr_decay_step" => {
                cfg.train.lr_decay_step = value.parse().map_err(|_| fail("lr_decay_step"))?
            }
            "seed" => cfg.train.seed = value.parse().map_err(|_| fail("seed"))?,
            "n_channels" => {
                cfg.train.model.n_channels = value.parse().map_err(|_| fail("n_channels"))?
            }
            "latent_channels" => {
                cfg.train.model.latent_channels =
                    value.parse().map_err(|_| fail("latent_channels"))?
            }
            "gmm_components" => {
                cfg.train.model.gmm_components =
                    value.parse().map_err(|_| fail("gmm_components"))?
            }
            "context_kernel" => {
                cfg.train.model.context_kernel =
                    value.parse().map_err(|_| fail("context_kernel"))?
            }
            "context_kind" => {
                cfg.train.model.context_kind = match value {
                    "none" => ContextKind::None,
                    "serial" => ContextKind::Serial,
                    "checkerboard" => ContextKind::Checkerboard,
                    _ => return Err(fail("context_kind (none|serial|checkerboard)")),
                }
            }
            "image_channels" => {
                cfg.train.model.image_channels =
                    value.parse().map_err(|_| fail("image_channels"))?
            }
            "corpus_seed" => cfg.corpus_seed = value.parse().map_err(|_| fail("corpus_seed"))?,
            "corpus_count" => cfg.corpus_count = value.parse().map_err(|_| fail("corpus_count"))?,
            "corpus_size" => cfg.corpus_size = value.parse().map_err(|_| fail("corpus_size"))?,
            other => return Err(format!("line {}: unknown key {other}", lineno + 1)),
        }
    }
    Ok(cfg)
}
