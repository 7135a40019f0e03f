//! Training configuration file: TOML by default, JSON for `.json` paths.
//!
//! ```toml
//! data = "data/"
//! out = "run/"
//!
//! [model]
//! channel_widths = [16, 32]
//! bottleneck_dim = 64
//!
//! [train]
//! epochs = 30
//! learning_rate = 2e-4
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use metadiff::denoiser::DenoiserConfig;
use metadiff::trainer::TrainConfig;

use crate::{Failure, TrainArgs};

/// Architecture fields a config may set; the quadrant side comes from the
/// dataset and the step count from `train.timesteps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub channel_widths: Vec<usize>,
    pub bottleneck_dim: usize,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    pub norm_groups: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::desk(2);
        Self {
            channel_widths: d.channel_widths,
            bottleneck_dim: d.bottleneck_dim,
            time_embed_dim: d.time_embed_dim,
            cond_embed_dim: d.cond_embed_dim,
            norm_groups: d.norm_groups,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
    }

    /// Config file (if any) with every given flag applied on top.
    pub fn resolve(args: &TrainArgs) -> Result<Self, Failure> {
        let mut c = match &args.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        if args.data.is_some() {
            c.data = args.data.clone();
        }
        if args.out.is_some() {
            c.out = args.out.clone();
        }
        set!(args.epochs, c.train.epochs);
        set!(args.batch_size, c.train.batch_size);
        set!(args.lr, c.train.learning_rate);
        set!(args.dropout, c.train.cond_dropout_prob);
        set!(args.seed, c.train.seed);
        set!(args.timesteps, c.train.timesteps);
        set!(args.val_cap, c.train.val_cap);
        set!(args.guidance, c.train.guidance_w);
        set!(args.eval_seed, c.train.eval_seed);
        set!(args.checkpoint_every, c.train.checkpoint_every);
        set!(args.widths, c.model.channel_widths);
        set!(args.bottleneck, c.model.bottleneck_dim);
        set!(args.time_embed, c.model.time_embed_dim);
        set!(args.cond_embed, c.model.cond_embed_dim);
        set!(args.norm_groups, c.model.norm_groups);
        Ok(c)
    }

    pub fn denoiser(&self, quadrant_side: usize) -> DenoiserConfig {
        DenoiserConfig {
            quadrant_side,
            channel_widths: self.model.channel_widths.clone(),
            bottleneck_dim: self.model.bottleneck_dim,
            time_embed_dim: self.model.time_embed_dim,
            cond_embed_dim: self.model.cond_embed_dim,
            condition_len: metadiff::dataset::CONDITION_LEN,
            norm_groups: self.model.norm_groups,
            timesteps: self.train.timesteps,
        }
    }
}
