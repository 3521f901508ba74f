//! Flat JSON run configuration covering the model and the optimiser.

use std::path::Path;

use serde::{Deserialize, Serialize};
use xfmamba::model::{FusionMode, ModelConfig, MvcmSubstitute, TaskKind};
use xfmamba::train::TrainConfig;

use crate::error::{CliError, Result};
use crate::fsio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Every key is optional; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub img_size: usize,
    pub c1: usize,
    pub depths: [usize; 4],
    pub state: usize,
    pub num_classes: usize,
    pub task: TaskKind,
    pub fusion_mode: FusionMode,
    pub use_cvsm: bool,
    pub use_mvcm: bool,
    pub mvcm_substitute: MvcmSubstitute,
    pub tie_views: bool,

    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub runs: usize,
    pub grad_clip: Option<f64>,

    /// Seeds both initialisation and minibatch order.
    pub seed: u64,
    pub dtype: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::micro();
        let t = TrainConfig::default();
        RunConfig {
            img_size: m.img_size,
            c1: m.c1,
            depths: m.depths,
            state: m.state,
            num_classes: m.num_classes,
            task: m.task,
            fusion_mode: m.fusion_mode,
            use_cvsm: m.use_cvsm,
            use_mvcm: m.use_mvcm,
            mvcm_substitute: m.mvcm_substitute,
            tie_views: m.tie_views,
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            runs: t.runs,
            grad_clip: t.grad_clip,
            seed: t.seed,
            dtype: Precision::F32,
        }
    }
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            img_size: self.img_size,
            c1: self.c1,
            depths: self.depths,
            state: self.state,
            num_classes: self.num_classes,
            task: self.task,
            fusion_mode: self.fusion_mode,
            use_cvsm: self.use_cvsm,
            use_mvcm: self.use_mvcm,
            mvcm_substitute: self.mvcm_substitute,
            tie_views: self.tie_views,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed: self.seed,
            runs: self.runs,
            grad_clip: self.grad_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |r: xfmamba::Result<()>| {
            r.map_err(|e| match e {
                xfmamba::Error::Config { field, detail } => CliError::Usage(format!("config key `{field}`: {detail}")),
                other => CliError::Core(other),
            })
        };
        check(self.model().validate())?;
        check(self.train().validate())
    }
}

/// Parses and validates a configuration document. Errors name the
/// offending key path.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let doc: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    if !doc.is_object() {
        return Err(CliError::Usage("config: expected a JSON object".into()));
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            CliError::Usage(format!("config: {inner}"))
        } else {
            CliError::Usage(format!("config key `{path}`: {inner}"))
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let bytes = fsio::read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::Usage(format!("{}: not UTF-8", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
        other => other,
    })
}
