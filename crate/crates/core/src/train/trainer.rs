//! Minibatch training, evaluation and multi-run summaries.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{BatchLabels, Dataset};
use super::metrics::{auroc, mean_std};
use super::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, TaskKind};
use crate::params::{Graph, ParamStore};
use crate::tensor::{softmax, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub runs: usize,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 16,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            runs: 4,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.runs == 0 {
            return Err(Error::config("runs", "must be >= 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be > 0"));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::config("grad_clip", "must be > 0"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// One entry per scored class (a single entry for binary softmax).
    pub per_class_auroc: Vec<f64>,
    pub macro_auroc: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub run: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome<T: Real> {
    pub run: usize,
    pub model_seed: u64,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    pub history: Vec<EpochLog>,
    pub test: EvalReport,
    /// Parameters at the best validation epoch.
    pub params: ParamStore<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub test_auroc: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over runs.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T: Real> {
    pub runs: Vec<RunOutcome<T>>,
    pub summary: Summary,
}

/// Task loss on recorded logits.
pub fn loss_var<T: Real>(g: &mut Graph<'_, T>, logits: Var, labels: &BatchLabels<T>) -> Result<Var> {
    match labels {
        BatchLabels::Class(l) => g.cross_entropy(logits, l),
        BatchLabels::MultiHot(t) => g.bce_multilabel(logits, t),
    }
}

fn check_compatible(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    data.validate()?;
    if data.h != cfg.img_size || data.w != cfg.img_size {
        return Err(Error::config(
            "img_size",
            format!(
                "model expects {0}x{0} images, dataset has {1}x{2}",
                cfg.img_size, data.h, data.w
            ),
        ));
    }
    let multi = data.kind == super::data::LabelKind::MultiHot;
    if multi != (cfg.task == TaskKind::MultiLabel) {
        return Err(Error::config(
            "task",
            "label kind of the dataset does not match the task",
        ));
    }
    if data.kind == super::data::LabelKind::Class {
        if let Some(&l) = data.labels.iter().find(|&&l| l as usize >= cfg.num_classes) {
            return Err(Error::config("num_classes", format!("dataset contains label {l}")));
        }
    }
    Ok(())
}

/// Scores every sample and reports per-class and macro AUROC plus the
/// mean loss.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    check_compatible(&model.cfg, data)?;
    // Same float environment as training, so scores reproduce bit-exactly.
    let _ftz = FlushDenormals::new();
    let k = model.cfg.num_classes;
    let mut scores = vec![Vec::with_capacity(data.len()); k];
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (a, b, labels) = data.batch::<T>(chunk, k);
        let mut g = Graph::new(&model.params);
        let (a, b) = (g.input(a), g.input(b));
        let out = model.forward_graph(&mut g, a, b)?;
        let loss = loss_var(&mut g, out.logits, &labels)?;
        loss_sum += g.value(loss).data()[0].as_f64() * chunk.len() as f64;
        let logits = g.value(out.logits);
        let probs = match model.cfg.task {
            TaskKind::SingleLabel => softmax(logits, 1)?,
            TaskKind::MultiLabel => logits.sigmoid(),
        };
        for row in probs.data().chunks_exact(k) {
            for (c, &p) in row.iter().enumerate() {
                scores[c].push(p.as_f64());
            }
        }
    }
    let classes: Vec<usize> = if model.cfg.task == TaskKind::SingleLabel && k == 2 {
        vec![1]
    } else {
        (0..k).collect()
    };
    let per_class = classes
        .iter()
        .map(|&c| {
            let labels: Vec<bool> = (0..data.len()).map(|i| data.has_class(i, c)).collect();
            auroc(&scores[c], &labels)
        })
        .collect::<Result<Vec<f64>>>()?;
    let macro_auroc = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport {
        per_class_auroc: per_class,
        macro_auroc,
        loss: loss_sum / data.len().max(1) as f64,
    })
}

fn norms<T: Real>(p: &ParamStore<T>) -> String {
    p.iter()
        .map(|(n, t)| format!("{n}={:.4e}", t.l2_norm().as_f64()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// One training run: Adam over shuffled minibatches, validation after every
/// epoch, best-validation parameters evaluated on `test`.
pub fn train_run<T: Real>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    run: usize,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<RunOutcome<T>> {
    cfg.validate()?;
    check_compatible(model_cfg, train)?;
    let mut mc = model_cfg.clone();
    mc.seed = model_cfg.seed.wrapping_add(run as u64);
    let _ftz = FlushDenormals::new();
    let mut model = Model::<T>::build(&mc)?;
    let mut state = AdamState::new(&model.params);
    let adam = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(run as u64));
    let k = mc.num_classes;

    let mut best = (usize::MAX, f64::NEG_INFINITY, model.params.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (a, b, labels) = train.batch::<T>(chunk, k);
            let mut grads = {
                let mut g = Graph::new(&model.params);
                let (a, b) = (g.input(a), g.input(b));
                let out = model.forward_graph(&mut g, a, b)?;
                let loss = loss_var(&mut g, out.logits, &labels)?;
                let lv = g.value(loss).data()[0].as_f64();
                if !lv.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        norms: norms(&model.params),
                    });
                }
                loss_sum += lv * chunk.len() as f64;
                let mut gr = g.backward(loss)?;
                g.param_grads(&mut gr)
            };
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adam_step(&mut model.params, &grads, &mut state, &adam);
            step += 1;
        }
        let val_report = evaluate(&model, val, 64)?;
        let log = EpochLog {
            run,
            epoch,
            train_loss: loss_sum / train.len().max(1) as f64,
            val: val_report,
        };
        on_epoch(&log);
        if log.val.macro_auroc > best.1 {
            best = (epoch, log.val.macro_auroc, model.params.clone());
        }
        history.push(log);
    }
    if cfg.epochs > 0 {
        model.params = best.2;
    }
    let test_report = evaluate(&model, test, 64)?;
    Ok(RunOutcome {
        run,
        model_seed: mc.seed,
        best_epoch: if cfg.epochs > 0 { best.0 } else { 0 },
        best_val_auroc: if cfg.epochs > 0 { best.1 } else { f64::NAN },
        history,
        test: test_report,
        params: model.params,
    })
}

/// Flush-to-zero and denormals-are-zero on the current thread while alive.
/// Once the training loss saturates, gradients underflow into the subnormal
/// range, where x86 arithmetic is roughly ten times slower.
struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    #[allow(deprecated)]
    fn new() -> Self {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        const FTZ_DAZ: u32 = 0x8040;
        // SAFETY: SSE is part of the x86_64 baseline; only rounding-mode
        // independent flush bits are changed and restored on drop.
        let saved = unsafe { _mm_getcsr() };
        unsafe { _mm_setcsr(saved | FTZ_DAZ) };
        FlushDenormals { saved }
    }

    #[cfg(not(target_arch = "x86_64"))]
    fn new() -> Self {
        FlushDenormals {}
    }
}

impl Drop for FlushDenormals {
    #[allow(deprecated)]
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the control word read in `new`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        };
    }
}

/// `cfg.runs` independent runs with consecutive seeds; mean ± sample std of
/// test macro AUROC.
pub fn train_loop<T: Real>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let runs = (0..cfg.runs)
        .map(|r| train_run(model_cfg, cfg, r, train, val, test, on_epoch))
        .collect::<Result<Vec<_>>>()?;
    let test_auroc: Vec<f64> = runs.iter().map(|r| r.test.macro_auroc).collect();
    let (mean, std) = mean_std(&test_auroc);
    Ok(TrainOutcome {
        runs,
        summary: Summary { test_auroc, mean, std },
    })
}
