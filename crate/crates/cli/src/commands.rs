//! Command implementations behind the `xfmamba` binary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xfmamba::checks::{self, CheckRecord, Scope};
use xfmamba::model::{ablation_rows, AblationRow, Model, ModelConfig};
use xfmamba::train::{
    evaluate, gen_synthetic, train_loop, Dataset, EpochLog, EvalReport, LabelKind, Summary, SyntheticSpec,
};
use xfmamba::Real;

use crate::bench::{self, BenchRow, BenchSpec};
use crate::checkpoint;
use crate::config::{Precision, RunConfig};
use crate::dataset;
use crate::error::{CliError, Result};
use crate::fsio;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Evaluation batch size for `eval`; training uses the same value, so
/// scores agree bit-exactly.
const EVAL_BATCH: usize = 64;

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.xfmv"))
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub scope: Scope,
    pub threshold: f64,
    pub passed: bool,
    pub worst: Option<String>,
    pub records: Vec<CheckRecord>,
}

pub fn gradcheck(scope: Scope, model: Option<&ModelConfig>, corrupt_op: Option<&str>) -> GradcheckReport {
    let records = match (scope, model) {
        (Scope::Model, Some(cfg)) => vec![checks::model_check(cfg, corrupt_op)],
        _ => checks::run(scope, corrupt_op),
    };
    let worst = records
        .iter()
        .filter(|r| !r.passed)
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .map(|r| r.name.clone());
    GradcheckReport {
        scope,
        threshold: scope.threshold(),
        passed: worst.is_none(),
        worst,
        records,
    }
}

impl GradcheckReport {
    pub fn verdict(&self) -> Result<()> {
        match &self.worst {
            None => Ok(()),
            Some(name) => {
                let r = self
                    .records
                    .iter()
                    .find(|r| &r.name == name)
                    .expect("worst is a record");
                Err(CliError::Verification(format!(
                    "gradcheck failed: worst op `{name}` (max_rel_err {:.3e} > {:.0e}{})",
                    r.max_rel_err,
                    r.threshold,
                    r.error.as_deref().map(|e| format!(", {e}")).unwrap_or_default()
                )))
            }
        }
    }
}

// --------------------------------------------------------------- scan-bench

pub struct BenchOutput {
    pub rows: Vec<BenchRow>,
    pub table: String,
}

pub fn scan_bench(spec: &BenchSpec, csv_out: Option<&Path>) -> Result<BenchOutput> {
    let rows = bench::run(spec)?;
    if let Some(p) = csv_out {
        fsio::write_atomic(p, &bench::to_csv(&rows))?;
    }
    let table = bench::to_table(&rows);
    Ok(BenchOutput { rows, table })
}

// ----------------------------------------------------------------- gen-data

pub fn gen_data(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    let splits = gen_synthetic(spec).map_err(|e| match e {
        xfmamba::Error::Config { field, detail } => CliError::Usage(format!("--{}: {detail}", field.replace('_', "-"))),
        other => CliError::Core(other),
    })?;
    fsio::create_dir(out)?;
    for (name, d) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]) {
        dataset::save(&split_path(out, name), d)?;
    }
    fsio::write_json(&out.join("synthetic.json"), spec)
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    view1: PathBuf,
    view2: PathBuf,
    label: String,
    split: String,
}

fn load_plane(path: &Path, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| CliError::format(path, e.to_string()))?;
    let img = img.resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle);
    Ok(img.to_luma32f().into_raw())
}

fn parse_label(text: &str, multilabel: bool) -> std::result::Result<u32, String> {
    let text = text.trim();
    if !multilabel {
        return text
            .parse::<u16>()
            .map(u32::from)
            .map_err(|_| format!("label `{text}` is not a class index in 0..=65535"));
    }
    let mut mask = 0u32;
    for part in text.split('|').map(str::trim).filter(|p| !p.is_empty()) {
        let k: u32 = part
            .parse()
            .ok()
            .filter(|&k| k < 32)
            .ok_or(format!("label `{part}` is not a class in 0..32"))?;
        mask |= 1 << k;
    }
    Ok(mask)
}

/// Packs PGM (or other supported) image pairs listed in a CSV manifest with
/// columns `view1,view2,label,split`. Image paths are relative to the
/// manifest; multilabel labels are `|`-separated class indices.
pub fn import_images(manifest: &Path, size: usize, multilabel: bool, out: &Path) -> Result<[usize; 3]> {
    if size == 0 {
        return Err(CliError::Usage("--img-size must be positive".into()));
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    let text = fsio::read(manifest)?;
    let mut reader = csv::Reader::from_reader(text.as_slice());
    let kind = if multilabel {
        LabelKind::MultiHot
    } else {
        LabelKind::Class
    };
    let empty = || Dataset {
        h: size,
        w: size,
        v1: Vec::new(),
        v2: Vec::new(),
        kind,
        labels: Vec::new(),
    };
    let mut sets = [empty(), empty(), empty()];
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| CliError::format(manifest, format!("line {line}: {e}")))?;
        let slot = SPLITS
            .iter()
            .position(|s| *s == row.split.trim())
            .ok_or_else(|| CliError::format(manifest, format!("line {line}: unknown split `{}`", row.split)))?;
        let label =
            parse_label(&row.label, multilabel).map_err(|e| CliError::format(manifest, format!("line {line}: {e}")))?;
        let d = &mut sets[slot];
        d.v1.extend(load_plane(&base.join(&row.view1), size)?);
        d.v2.extend(load_plane(&base.join(&row.view2), size)?);
        d.labels.push(label);
    }
    fsio::create_dir(out)?;
    for (name, d) in SPLITS.iter().zip(&sets) {
        dataset::save(&split_path(out, name), d)?;
    }
    Ok([sets[0].len(), sets[1].len(), sets[2].len()])
}

// -------------------------------------------------------------------- train

pub struct DataSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn load_splits(dir: &Path) -> Result<DataSplits> {
    Ok(DataSplits {
        train: dataset::load(&split_path(dir, "train"))?,
        val: dataset::load(&split_path(dir, "val"))?,
        test: dataset::load(&split_path(dir, "test"))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub model_seed: u64,
    pub checkpoint: String,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    pub test: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub config: RunConfig,
    pub runs: Vec<RunMetrics>,
    pub summary: Summary,
}

fn history_csv(history: &[EpochLog]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "epoch", "train_loss", "val_loss", "val_auroc"])
        .expect("in-memory CSV");
    for l in history {
        w.write_record([
            l.run.to_string(),
            l.epoch.to_string(),
            l.train_loss.to_string(),
            l.val.loss.to_string(),
            l.val.macro_auroc.to_string(),
        ])
        .expect("in-memory CSV");
    }
    w.into_inner().expect("in-memory CSV")
}

fn train_typed<T: Real>(
    cfg: &RunConfig,
    data: &DataSplits,
    out: &Path,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainMetrics> {
    let outcome = train_loop::<T>(&cfg.model(), &cfg.train(), &data.train, &data.val, &data.test, on_epoch)?;
    fsio::create_dir(out)?;
    let mut runs = Vec::with_capacity(outcome.runs.len());
    let mut history = Vec::new();
    for r in &outcome.runs {
        let name = format!("run{}.xfck", r.run);
        checkpoint::save(&out.join(&name), &r.params)?;
        history.extend(r.history.iter().cloned());
        runs.push(RunMetrics {
            run: r.run,
            model_seed: r.model_seed,
            checkpoint: name,
            best_epoch: r.best_epoch,
            best_val_auroc: r.best_val_auroc,
            test: r.test.clone(),
        });
    }
    fsio::write_atomic(&out.join("history.csv"), &history_csv(&history))?;
    let metrics = TrainMetrics {
        config: cfg.clone(),
        runs,
        summary: outcome.summary,
    };
    fsio::write_json(&out.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// Trains `cfg.runs` models and writes `run{r}.xfck`, `history.csv` and
/// `metrics.json` under `out`.
pub fn train(
    cfg: &RunConfig,
    data: &DataSplits,
    out: &Path,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainMetrics> {
    cfg.validate()?;
    match cfg.dtype {
        Precision::F32 => train_typed::<f32>(cfg, data, out, on_epoch),
        Precision::F64 => train_typed::<f64>(cfg, data, out, on_epoch),
    }
}

// --------------------------------------------------------------------- eval

fn eval_typed<T: Real>(cfg: &ModelConfig, ckpt: &Path, data: &Dataset) -> Result<EvalReport> {
    let mut model = Model::<T>::build(cfg)?;
    checkpoint::load_into(ckpt, &mut model.params)?;
    Ok(evaluate(&model, data, EVAL_BATCH)?)
}

/// Scores `data` with the checkpointed parameters of the configured model.
pub fn eval(cfg: &RunConfig, ckpt: &Path, data: &Dataset) -> Result<EvalReport> {
    cfg.validate()?;
    match cfg.dtype {
        Precision::F32 => eval_typed::<f32>(&cfg.model(), ckpt, data),
        Precision::F64 => eval_typed::<f64>(&cfg.model(), ckpt, data),
    }
}

// ------------------------------------------------------------------- ablate

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationEntry {
    #[serde(flatten)]
    pub row: AblationRow,
    pub params: usize,
    pub test_auroc: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Trains every ablation row on the same data. Row `i` writes its artifacts
/// to `out/<id>_<name>/`; the table goes to `ablation.json` and
/// `ablation.csv`.
pub fn ablate(
    base: &RunConfig,
    data: &DataSplits,
    out: &Path,
    on_row: &mut dyn FnMut(&AblationEntry),
    on_epoch: &mut dyn FnMut(&AblationRow, &EpochLog),
) -> Result<Vec<AblationEntry>> {
    base.validate()?;
    fsio::create_dir(out)?;
    let mut entries = Vec::new();
    for row in ablation_rows() {
        let model = row.apply(&base.model());
        let cfg = RunConfig {
            fusion_mode: model.fusion_mode,
            use_cvsm: model.use_cvsm,
            use_mvcm: model.use_mvcm,
            mvcm_substitute: model.mvcm_substitute,
            ..base.clone()
        };
        let dir = out.join(format!("{}_{}", row.id, row.name));
        let m = train(&cfg, data, &dir, &mut |l| on_epoch(&row, l))?;
        let params = Model::<f32>::build(&model)?.count_params();
        let entry = AblationEntry {
            row,
            params,
            test_auroc: m.summary.test_auroc,
            mean: m.summary.mean,
            std: m.summary.std,
        };
        on_row(&entry);
        entries.push(entry);
    }
    fsio::write_json(&out.join("ablation.json"), &entries)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "id",
        "name",
        "views",
        "fusion",
        "cvsm",
        "mvcm",
        "substitute",
        "params",
        "mean",
        "std",
    ])
    .expect("in-memory CSV");
    for e in &entries {
        let substitute = serde_json::to_value(e.row.substitute).expect("enum serializes");
        w.write_record([
            e.row.id.to_string(),
            e.row.name.to_string(),
            e.row.views.to_string(),
            e.row.fusion.to_string(),
            e.row.cvsm.to_string(),
            e.row.mvcm.to_string(),
            substitute.as_str().unwrap_or_default().to_string(),
            e.params.to_string(),
            e.mean.to_string(),
            e.std.to_string(),
        ])
        .expect("in-memory CSV");
    }
    fsio::write_atomic(&out.join("ablation.csv"), &w.into_inner().expect("in-memory CSV"))?;
    Ok(entries)
}
