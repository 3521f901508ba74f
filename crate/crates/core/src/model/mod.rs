//! The end-to-end two-view classifier: encoders, fusion and head.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::blocks::{Encoder, Init, Linear, StageDims};
use crate::error::{Error, Result};
use crate::fusion::{CvsmBlock, MvcmBlock};
use crate::params::{Graph, Initializer, ParamStore};
use crate::tensor::{softmax, FeatureMap, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// View 1 only.
    SingleViewV1,
    /// View 2 only.
    SingleViewV2,
    /// Views stacked as input channels of one encoder.
    Early,
    /// Two encoders; pooled features averaged before the head.
    Late,
    /// Two encoders, then the fusion blocks selected by the ablation flags.
    Cross,
}

/// Stand-in for the combination block when it is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MvcmSubstitute {
    None,
    Add,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Softmax over `K` classes with cross-entropy.
    SingleLabel,
    /// Independent sigmoid per class with binary cross-entropy.
    MultiLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub img_size: usize,
    pub c1: usize,
    pub depths: [usize; 4],
    pub state: usize,
    pub num_classes: usize,
    pub task: TaskKind,
    pub fusion_mode: FusionMode,
    /// Cross mode only.
    pub use_cvsm: bool,
    /// Cross mode only.
    pub use_mvcm: bool,
    /// Cross mode with `use_mvcm = false` only.
    pub mvcm_substitute: MvcmSubstitute,
    /// One parameter set for both view branches (encoders and fusion).
    pub tie_views: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// The desk-scale configuration: 32×32 input, `C1 = 16`, depths
    /// `[1, 1, 2, 1]`, `N = 8`, binary softmax head, full cross fusion.
    pub fn micro() -> Self {
        ModelConfig {
            img_size: 32,
            c1: 16,
            depths: [1, 1, 2, 1],
            state: 8,
            num_classes: 2,
            task: TaskKind::SingleLabel,
            fusion_mode: FusionMode::Cross,
            use_cvsm: true,
            use_mvcm: true,
            mvcm_substitute: MvcmSubstitute::None,
            tie_views: false,
            seed: 0,
        }
    }

    pub fn stage_dims(&self) -> StageDims {
        StageDims::doubling(self.c1, self.depths)
    }

    pub fn validate(&self) -> Result<()> {
        if self.img_size == 0 || self.img_size % 32 != 0 {
            return Err(Error::config(
                "img_size",
                format!("must be a positive multiple of 32, got {}", self.img_size),
            ));
        }
        if self.c1 == 0 {
            return Err(Error::config("c1", "must be >= 1"));
        }
        if self.state == 0 {
            return Err(Error::config("state", "must be >= 1"));
        }
        match self.task {
            TaskKind::SingleLabel if self.num_classes < 2 => {
                return Err(Error::config(
                    "num_classes",
                    "single-label tasks need at least 2 classes",
                ));
            }
            TaskKind::MultiLabel if self.num_classes < 1 => {
                return Err(Error::config("num_classes", "must be >= 1"));
            }
            _ => {}
        }
        if self.fusion_mode == FusionMode::Cross {
            match (self.use_mvcm, self.mvcm_substitute) {
                (true, MvcmSubstitute::None) | (false, MvcmSubstitute::Add | MvcmSubstitute::Concat) => {}
                (true, _) => {
                    return Err(Error::config(
                        "mvcm_substitute",
                        "must be `none` when the combination block is enabled",
                    ))
                }
                (false, MvcmSubstitute::None) => {
                    return Err(Error::config(
                        "mvcm_substitute",
                        "must be `add` or `concat` when the combination block is disabled",
                    ))
                }
            }
        }
        Ok(())
    }

    /// Whether the forward pass reads view 1 / view 2.
    pub fn uses_views(&self) -> (bool, bool) {
        match self.fusion_mode {
            FusionMode::SingleViewV1 => (true, false),
            FusionMode::SingleViewV2 => (false, true),
            _ => (true, true),
        }
    }
}

/// One row of the fusion ablation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub id: usize,
    pub name: &'static str,
    pub views: &'static str,
    pub fusion: &'static str,
    pub cvsm: bool,
    pub mvcm: bool,
    pub substitute: MvcmSubstitute,
}

impl AblationRow {
    /// `base` with this row's fusion settings applied.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.fusion_mode = match self.id {
            1 => FusionMode::SingleViewV2,
            2 => FusionMode::SingleViewV1,
            3 => FusionMode::Early,
            4 => FusionMode::Late,
            _ => FusionMode::Cross,
        };
        cfg.use_cvsm = self.cvsm;
        cfg.use_mvcm = self.mvcm;
        cfg.mvcm_substitute = self.substitute;
        cfg
    }
}

/// The eight configurations of the fusion ablation, in table order.
pub fn ablation_rows() -> Vec<AblationRow> {
    use MvcmSubstitute as S;
    let row = |id, name, views, fusion, cvsm, mvcm, substitute| AblationRow {
        id,
        name,
        views,
        fusion,
        cvsm,
        mvcm,
        substitute,
    };
    vec![
        row(1, "single_view_v2", "v2", "none", false, false, S::None),
        row(2, "single_view_v1", "v1", "none", false, false, S::None),
        row(3, "early", "v1+v2", "early", false, false, S::None),
        row(4, "late", "v1+v2", "late", false, false, S::None),
        row(5, "cross_cvsm_concat", "v1+v2", "cross", true, false, S::Concat),
        row(6, "cross_cvsm_add", "v1+v2", "cross", true, false, S::Add),
        row(7, "cross_mvcm", "v1+v2", "cross", false, true, S::None),
        row(8, "cross_full", "v1+v2", "cross", true, true, S::None),
    ]
}

/// Module layout; parameters live in the model's [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    /// The encoder for view 1, the only encoder in single-view-2 and early
    /// modes.
    pub enc1: Encoder,
    /// Second encoder in late and cross modes (same ids as `enc1` when
    /// tied).
    pub enc2: Option<Encoder>,
    pub cvsm: Option<CvsmBlock>,
    pub mvcm: Option<MvcmBlock>,
    pub head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

/// Values recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logits: Var,
    /// Stage outputs of the first encoder.
    pub stages: Vec<Var>,
    /// Fused stage-4 map entering the pool, when fusion ran.
    pub fused: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    /// `[B, K]`.
    pub logits: Tensor<T>,
    /// Softmax rows or per-class sigmoids.
    pub probs: Tensor<T>,
}

impl<T: Real> Model<T> {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(cfg.seed);
        let dims = cfg.stage_dims();
        let c4 = dims.widths[3];
        let (n, tied) = (cfg.state, cfg.tie_views);
        let in_ch = if cfg.fusion_mode == FusionMode::Early { 2 } else { 1 };
        let two = matches!(cfg.fusion_mode, FusionMode::Late | FusionMode::Cross);

        let enc1 = Encoder::new(
            &mut store,
            if two && !tied { "enc1" } else { "enc" },
            in_ch,
            dims,
            n,
            &mut init,
        );
        let enc2 = match (two, tied) {
            (false, _) => None,
            (true, true) => Some(enc1.clone()),
            (true, false) => Some(Encoder::new(&mut store, "enc2", in_ch, dims, n, &mut init)),
        };
        let cross = cfg.fusion_mode == FusionMode::Cross;
        let cvsm = if cross && cfg.use_cvsm {
            Some(CvsmBlock::new(&mut store, "cvsm", c4, n, tied, &mut init)?)
        } else {
            None
        };
        let mvcm = if cross && cfg.use_mvcm {
            Some(MvcmBlock::new(&mut store, "mvcm", c4, n, tied, &mut init)?)
        } else {
            None
        };
        let head_in = if cross && !cfg.use_mvcm && cfg.mvcm_substitute == MvcmSubstitute::Concat {
            2 * c4
        } else {
            c4
        };
        let head = Linear::new(
            &mut store,
            "head",
            head_in,
            cfg.num_classes,
            true,
            Init::Normal,
            &mut init,
        );
        Ok(Model {
            cfg: cfg.clone(),
            arch: Architecture {
                enc1,
                enc2,
                cvsm,
                mvcm,
                head,
            },
            params: store,
        })
    }

    /// Closed-form trainable scalar count from the module layout.
    pub fn count_params(&self) -> usize {
        let a = &self.arch;
        let enc2 = if self.cfg.tie_views {
            0
        } else {
            a.enc2.as_ref().map_or(0, Encoder::num_params)
        };
        a.enc1.num_params()
            + enc2
            + a.cvsm.as_ref().map_or(0, CvsmBlock::num_params)
            + a.mvcm.as_ref().map_or(0, MvcmBlock::num_params)
            + a.head.num_params()
    }

    /// Closed-form floating-point operation tally for one sample.
    pub fn estimate_flops(&self, img_size: usize) -> u64 {
        let a = &self.arch;
        let side = img_size / 32;
        let encoders = a.enc1.flops(1, img_size) + a.enc2.as_ref().map_or(0, |e| e.flops(1, img_size));
        let fusion = a.cvsm.as_ref().map_or(0, |b| b.flops(1, side, side))
            + a.mvcm.as_ref().map_or(0, |b| b.flops(1, side, side));
        encoders + fusion + a.head.flops(1)
    }

    /// Records the forward pass of `v1, v2: [B, H, W, 1]` on `g`.
    pub fn forward_graph(&self, g: &mut Graph<'_, T>, v1: Var, v2: Var) -> Result<ForwardVars> {
        if g.shape(v1) != g.shape(v2) {
            return Err(Error::dim("forward", g.shape(v1), g.shape(v2)));
        }
        let a = &self.arch;
        let (stages, fused, pooled) = match self.cfg.fusion_mode {
            FusionMode::SingleViewV1 | FusionMode::SingleViewV2 => {
                let v = if self.cfg.fusion_mode == FusionMode::SingleViewV1 {
                    v1
                } else {
                    v2
                };
                let s = a.enc1.forward(g, v)?;
                let p = g.global_avg_pool(s[3])?;
                (s, None, p)
            }
            FusionMode::Early => {
                let both = g.concat(v1, v2)?;
                let s = a.enc1.forward(g, both)?;
                let p = g.global_avg_pool(s[3])?;
                (s, None, p)
            }
            FusionMode::Late => {
                let s1 = a.enc1.forward(g, v1)?;
                let s2 = self.enc2().forward(g, v2)?;
                let p1 = g.global_avg_pool(s1[3])?;
                let p2 = g.global_avg_pool(s2[3])?;
                let sum = g.add(p1, p2)?;
                (s1, None, g.scale(sum, T::of(0.5)))
            }
            FusionMode::Cross => {
                let s1 = a.enc1.forward(g, v1)?;
                let s2 = self.enc2().forward(g, v2)?;
                let (mut x1, mut x2) = (s1[3], s2[3]);
                if let Some(c) = &a.cvsm {
                    (x1, x2) = c.forward(g, x1, x2)?;
                }
                let f = match (&a.mvcm, self.cfg.mvcm_substitute) {
                    (Some(m), _) => m.forward(g, x1, x2)?,
                    (None, MvcmSubstitute::Concat) => g.concat(x1, x2)?,
                    (None, _) => g.add(x1, x2)?,
                };
                let p = g.global_avg_pool(f)?;
                (s1, Some(f), p)
            }
        };
        let logits = a.head.forward(g, pooled)?;
        Ok(ForwardVars { logits, stages, fused })
    }

    fn enc2(&self) -> &Encoder {
        self.arch.enc2.as_ref().expect("two-encoder mode")
    }

    /// Inference on two views.
    pub fn forward(&self, v1: &FeatureMap<T>, v2: &FeatureMap<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new(&self.params);
        let a = g.input(v1.tensor().clone());
        let b = g.input(v2.tensor().clone());
        let out = self.forward_graph(&mut g, a, b)?;
        let logits = g.value(out.logits).clone();
        let probs = match self.cfg.task {
            TaskKind::SingleLabel => softmax(&logits, 1)?,
            TaskKind::MultiLabel => logits.sigmoid(),
        };
        Ok(Prediction { logits, probs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_name_the_field() {
        let mut c = ModelConfig::micro();
        c.img_size = 48;
        assert!(matches!(Model::<f32>::build(&c), Err(Error::Config { ref field, .. }) if field == "img_size"));
        let mut c = ModelConfig::micro();
        c.use_mvcm = false;
        assert!(matches!(Model::<f32>::build(&c), Err(Error::Config { ref field, .. }) if field == "mvcm_substitute"));
    }

    #[test]
    fn eight_ablation_rows() {
        let rows = ablation_rows();
        assert_eq!(rows.len(), 8);
        for r in &rows {
            r.apply(&ModelConfig::micro()).validate().unwrap();
        }
    }
}
