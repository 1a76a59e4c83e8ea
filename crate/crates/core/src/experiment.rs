//! Experiment driver: one JSON config chains corpus loading (or synthetic
//! generation), preprocessing, fold construction, one training run per
//! (fold, view) cell, hierarchical evaluation and the summary tables.
//!
//! Layout of an experiment directory:
//!
//! ```text
//! out/config.json                      resolved config, every default filled in
//! out/folds.json                       fold membership
//! out/fold_{r}/view_{v}/checkpoint.safetensors
//! out/fold_{r}/view_{v}/epochs.csv
//! out/fold_{r}/view_{v}/preds.jsonl    test-set predictions
//! out/fold_{r}/view_{v}/val_preds.jsonl
//! out/fold_{r}/view_{v}/audit.json
//! out/fold_{r}/view_{v}/cell.json      written last; marks the cell complete
//! out/fold_{r}/view_{v}/error.txt      present when the cell failed
//! out/fold_{r}/{val,test}_report.csv
//! out/summary/{val_table.csv, test_table.csv, summary.json}
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::corpus::{generate_synthetic, parse_manifest, DatasetManifest, SynthConfig, ViewLabel};
use crate::dataset::{build_samples, Sample};
use crate::error::{Error, Result};
use crate::evaluate::{
    aggregate_means, fold_report, read_predictions_jsonl, write_predictions_jsonl, write_table_csv, FoldReport,
    SamplePrediction, TieBreak,
};
use crate::folds::{check_disjoint, folds_to_json, make_folds, FoldSpec};
use crate::gradcam::{compute_gradcam, export_overlay, OverlayMeta};
use crate::model::{load_checkpoint_for, HookLayer, ModelConfig};
use crate::preprocess::PreprocessConfig;
use crate::train::{predict_samples, train_fold_view, StopReason, TrainAudit, TrainConfig, TrainJob, CHECKPOINT_FILE};

pub const CONFIG_FILE: &str = "config.json";
pub const FOLDS_FILE: &str = "folds.json";
pub const CELL_FILE: &str = "cell.json";
pub const ERROR_FILE: &str = "error.txt";
pub const AUDIT_FILE: &str = "audit.json";
pub const TEST_PREDS_FILE: &str = "preds.jsonl";
pub const VAL_PREDS_FILE: &str = "val_preds.jsonl";
pub const SUMMARY_DIR: &str = "summary";

/// Where the heartbeat videos come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// An existing manifest (frame stores resolved next to it).
    Manifest { path: PathBuf },
    /// A synthetic corpus generated into `dir` (default `out/corpus`).
    Synthetic {
        patients: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "SynthConfig::small")]
        frames: SynthConfig,
        #[serde(default)]
        dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldParams {
    pub n_folds: usize,
    pub window: usize,
}

impl Default for FoldParams {
    fn default() -> Self {
        Self { n_folds: 10, window: 4 }
    }
}

fn all_views() -> Vec<ViewLabel> {
    ViewLabel::ALL.to_vec()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("experiment")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub folds: FoldParams,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "all_views")]
    pub views: Vec<ViewLabel>,
    /// Fold indices (0-based) to run; `None` runs every fold.
    #[serde(default)]
    pub folds_to_run: Option<Vec<usize>>,
    #[serde(default)]
    pub tie_break: TieBreak,
    /// Convolution whose activations feed Grad-CAM exports.
    #[serde(default)]
    pub gradcam_layer: HookLayer,
}

impl ExperimentConfig {
    pub fn new(corpus: CorpusSource, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            corpus,
            preprocess: PreprocessConfig::default(),
            augment: AugmentConfig::default(),
            folds: FoldParams::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            output_dir: output_dir.into(),
            views: all_views(),
            folds_to_run: None,
            tie_break: TieBreak::default(),
            gradcam_layer: HookLayer::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("field `{}`: {}", e.path(), e.inner())))
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.output_dir);
        match &mut cfg.corpus {
            CorpusSource::Manifest { path } => rebase(path),
            CorpusSource::Synthetic { dir: Some(d), .. } => rebase(d),
            CorpusSource::Synthetic { dir: None, .. } => {}
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Uses `seed` for initialization, shuffling, dropout and augmentation.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.augment.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        match &self.corpus {
            CorpusSource::Manifest { path } if !path.is_file() => {
                return Err(Error::Config(format!("manifest {} does not exist", path.display())));
            }
            CorpusSource::Synthetic { patients: 0, .. } => {
                return Err(Error::Config("synthetic corpus needs at least one patient".into()));
            }
            _ => {}
        }
        if self.folds.n_folds == 0 || self.folds.window == 0 {
            return Err(Error::Config("n_folds and window must be positive".into()));
        }
        if self.views.is_empty() {
            return Err(Error::Config("no views selected".into()));
        }
        if let Some(fs) = &self.folds_to_run {
            if let Some(bad) = fs.iter().find(|f| **f >= self.folds.n_folds) {
                return Err(Error::Config(format!("fold {bad} outside 0..{}", self.folds.n_folds)));
            }
        }
        Ok(())
    }

    pub fn fold_indices(&self) -> Vec<usize> {
        let mut v = self.folds_to_run.clone().unwrap_or_else(|| (0..self.folds.n_folds).collect());
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn view_list(&self) -> Vec<ViewLabel> {
        let set: BTreeSet<ViewLabel> = self.views.iter().copied().collect();
        set.into_iter().collect()
    }

    /// Every requested `(fold, view)` cell in execution order.
    pub fn cells(&self) -> Vec<(usize, ViewLabel)> {
        let views = self.view_list();
        self.fold_indices().into_iter().flat_map(|f| views.iter().map(move |v| (f, *v))).collect()
    }
}

pub fn cell_dir(out: &Path, fold: usize, view: ViewLabel) -> PathBuf {
    out.join(format!("fold_{fold}")).join(format!("view_{view}"))
}

/// Loads (or generates) the corpus named by the config.
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    match &cfg.corpus {
        CorpusSource::Manifest { path } => parse_manifest(path),
        CorpusSource::Synthetic { patients, seed, frames, dir } => {
            let dir = dir.clone().unwrap_or_else(|| cfg.output_dir.join("corpus"));
            let stamp_path = dir.join("synthetic.json");
            let stamp = serde_json::to_string_pretty(&serde_json::json!({"patients": patients, "seed": seed, "frames": frames}))
                .expect("stamp serializes");
            let manifest = dir.join("manifest.json");
            if manifest.is_file() && fs::read_to_string(&stamp_path).ok().as_deref() == Some(stamp.as_str()) {
                return parse_manifest(&manifest);
            }
            let m = generate_synthetic(*patients, *seed, frames, &dir)?;
            fs::write(&stamp_path, stamp).map_err(|e| Error::io(&stamp_path, e))?;
            Ok(m)
        }
    }
}

/// Config, corpus and folds ready for cell execution.
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub manifest: DatasetManifest,
    pub folds: Vec<FoldSpec>,
    samples: Option<Vec<Sample>>,
}

impl Prepared {
    /// Validates the config, resolves the corpus and folds, and writes the
    /// resolved config and fold table into the output directory.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let out = &cfg.output_dir;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let manifest = load_corpus(&cfg)?;
        let ordering = manifest.ordering();
        let folds = make_folds(&ordering, cfg.folds.n_folds, cfg.folds.window)?;
        for f in &folds {
            if !check_disjoint(f, &ordering) {
                return Err(Error::Runtime(format!("fold {} is not a partition", f.fold_index)));
            }
        }
        write(&out.join(CONFIG_FILE), &cfg.to_json())?;
        write(&out.join(FOLDS_FILE), &folds_to_json(&folds))?;
        Ok(Self { cfg, manifest, folds, samples: None })
    }

    /// Preprocessed heartbeats of the requested views (built once).
    pub fn samples(&mut self) -> Result<&[Sample]> {
        if self.samples.is_none() {
            let views = self.cfg.view_list();
            let mut m = self.manifest.clone();
            for p in &mut m.patients {
                p.clips.retain(|c| views.contains(&c.view));
            }
            self.samples = Some(build_samples(&m, &self.cfg.preprocess)?);
        }
        Ok(self.samples.as_deref().unwrap_or_default())
    }

    pub fn fold(&self, index: usize) -> Result<&FoldSpec> {
        self.folds.get(index).ok_or_else(|| Error::Config(format!("fold {index} outside 0..{}", self.folds.len())))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))
}

/// Completion record of one trained cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub fold: usize,
    pub view: ViewLabel,
    pub best_epoch: usize,
    /// Sample-level validation accuracy of the kept checkpoint, percent.
    pub best_val_accuracy: f64,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    pub train_patients: usize,
    pub audit_violations: Vec<String>,
}

/// Trains and evaluates one cell, writing its artifacts. Leaves the cell
/// directory without `cell.json` on failure.
pub fn run_cell(prep: &mut Prepared, fold: usize, view: ViewLabel) -> Result<CellRecord> {
    let dir = cell_dir(&prep.cfg.output_dir, fold, view);
    let _ = fs::remove_file(dir.join(CELL_FILE));
    let _ = fs::remove_file(dir.join(ERROR_FILE));
    let spec = prep.fold(fold)?.clone();
    let cfg = prep.cfg.clone();
    let samples = prep.samples()?;
    let outcome = train_fold_view(&TrainJob {
        fold: &spec,
        view,
        samples,
        model: &cfg.model,
        train: &cfg.train,
        augment: &cfg.augment,
        out_dir: &dir,
    })?;
    write_predictions_jsonl(&dir.join(TEST_PREDS_FILE), &outcome.test_predictions)?;
    write_predictions_jsonl(&dir.join(VAL_PREDS_FILE), &outcome.val_predictions)?;
    write(&dir.join(AUDIT_FILE), &serde_json::to_string_pretty(&outcome.audit).expect("audit serializes"))?;
    let record = CellRecord {
        fold,
        view,
        best_epoch: outcome.best.epoch,
        best_val_accuracy: outcome.best.val_accuracy,
        epochs_run: outcome.epochs.len(),
        stop_reason: outcome.state.stop_reason,
        train_patients: spec.train_ids.len(),
        audit_violations: outcome.audit.violations(&spec),
    };
    write(&dir.join(CELL_FILE), &serde_json::to_string_pretty(&record).expect("cell serializes"))?;
    Ok(record)
}

pub fn cell_complete(out: &Path, fold: usize, view: ViewLabel) -> bool {
    cell_dir(out, fold, view).join(CELL_FILE).is_file()
}

/// Runs every requested cell that is not already complete, records failures
/// without aborting the others, then writes the reports.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<Summary> {
    run_experiment_with(cfg, &mut |_| {})
}

/// What [`run_experiment_with`] reports as it goes.
#[derive(Debug)]
pub enum Progress<'a> {
    Skipped { fold: usize, view: ViewLabel },
    Started { fold: usize, view: ViewLabel },
    Finished { record: &'a CellRecord },
    Failed { fold: usize, view: ViewLabel, error: &'a Error },
}

pub fn run_experiment_with(cfg: ExperimentConfig, progress: &mut dyn FnMut(Progress<'_>)) -> Result<Summary> {
    let mut prep = Prepared::new(cfg)?;
    let out = prep.cfg.output_dir.clone();
    for (fold, view) in prep.cfg.cells() {
        if cell_complete(&out, fold, view) {
            progress(Progress::Skipped { fold, view });
            continue;
        }
        progress(Progress::Started { fold, view });
        match run_cell(&mut prep, fold, view) {
            Ok(record) => progress(Progress::Finished { record: &record }),
            Err(error) => {
                write(&cell_dir(&out, fold, view).join(ERROR_FILE), &error.to_string())?;
                progress(Progress::Failed { fold, view, error: &error });
            }
        }
    }
    report(&out)
}

/// Re-predicts validation and test samples of completed cells from their
/// checkpoints (e.g. after changing the evaluation batch size) and
/// rewrites the reports.
pub fn evaluate_experiment(cfg: ExperimentConfig) -> Result<Summary> {
    let mut prep = Prepared::new(cfg)?;
    let out = prep.cfg.output_dir.clone();
    let precision = prep.cfg.train.precision();
    for (fold, view) in prep.cfg.cells() {
        if !cell_complete(&out, fold, view) {
            continue;
        }
        let dir = cell_dir(&out, fold, view);
        let spec = prep.fold(fold)?.clone();
        let (mut model, _) = load_checkpoint_for::<f32>(&dir.join(CHECKPOINT_FILE), &prep.cfg.model)?;
        let batch = prep.cfg.train.eval_batch_size;
        let samples = prep.samples()?;
        let pick = |ids: &[String]| -> Vec<&Sample> {
            samples.iter().filter(|s| s.view == view && ids.contains(&s.patient_id)).collect()
        };
        let val = predict_samples(&mut model, &pick(&spec.val_ids), batch, precision)?;
        let test = predict_samples(&mut model, &pick(&spec.test_ids), batch, precision)?;
        write_predictions_jsonl(&dir.join(VAL_PREDS_FILE), &val)?;
        write_predictions_jsonl(&dir.join(TEST_PREDS_FILE), &test)?;
    }
    report(&out)
}

/// Exports Grad-CAM animations for the first beat of every test clip of a
/// completed cell, targeting the predicted class. Returns the written files.
pub fn export_gradcams(cfg: ExperimentConfig, fold: usize, view: ViewLabel, dest: Option<&Path>, limit: Option<usize>) -> Result<Vec<PathBuf>> {
    let mut prep = Prepared::new(cfg)?;
    let out = prep.cfg.output_dir.clone();
    let dir = cell_dir(&out, fold, view);
    if !cell_complete(&out, fold, view) {
        return Err(Error::Runtime(format!("fold {fold} view {view} has not been trained")));
    }
    let dest = dest.map(Path::to_path_buf).unwrap_or_else(|| dir.join("gradcam"));
    let spec = prep.fold(fold)?.clone();
    let layer = prep.cfg.gradcam_layer;
    let (mut model, _) = load_checkpoint_for::<f32>(&dir.join(CHECKPOINT_FILE), &prep.cfg.model)?;
    let precision = prep.cfg.train.precision();
    let samples = prep.samples()?;
    let firsts: Vec<&Sample> = samples
        .iter()
        .filter(|s| s.view == view && s.beat_index == 0 && spec.test_ids.contains(&s.patient_id))
        .take(limit.unwrap_or(usize::MAX))
        .collect();
    let preds = predict_samples(&mut model, &firsts, 1, precision)?;
    let mut written = Vec::new();
    for (s, p) in firsts.iter().zip(preds) {
        let heat = compute_gradcam(&mut model, &s.video, p.predicted_pacing.id(), layer)?;
        let meta = OverlayMeta {
            patient_id: s.patient_id.clone(),
            clip_id: s.clip_id.clone(),
            true_label: s.pacing,
            predicted_label: p.predicted_pacing,
        };
        written.push(export_overlay(&s.video, &heat, &meta, &dest)?);
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellState {
    Complete,
    Failed,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub fold: usize,
    pub view: ViewLabel,
    pub state: CellState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<CellRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One evaluation table (validation or test).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSummary {
    pub rows: Vec<FoldReport>,
    /// `[TV, MV, LPV, CT, Cross-View]`; `None` where no fold has a value.
    pub mean: [Option<f64>; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Every requested cell finished.
    pub complete: bool,
    pub cells: Vec<CellStatus>,
    pub validation: Option<TableSummary>,
    pub test: Option<TableSummary>,
}

fn discover_cells(out: &Path) -> Vec<(usize, ViewLabel)> {
    let mut cells = Vec::new();
    let Ok(entries) = fs::read_dir(out) else { return cells };
    for e in entries.flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        let Some(fold) = name.strip_prefix("fold_").and_then(|f| f.parse::<usize>().ok()) else { continue };
        for v in ViewLabel::ALL {
            if cell_dir(out, fold, v).is_dir() {
                cells.push((fold, v));
            }
        }
    }
    cells.sort();
    cells
}

fn table(out: &Path, cells: &[CellStatus], file: &str, tie: TieBreak) -> Result<Option<TableSummary>> {
    let folds: BTreeSet<usize> = cells.iter().map(|c| c.fold).collect();
    let mut rows = Vec::new();
    for fold in folds {
        let mut preds: Vec<SamplePrediction> = Vec::new();
        for c in cells.iter().filter(|c| c.fold == fold && c.state == CellState::Complete) {
            preds.extend(read_predictions_jsonl(&cell_dir(out, c.fold, c.view).join(file))?);
        }
        if !preds.is_empty() {
            rows.push(fold_report(fold, &preds, tie)?);
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let mean = aggregate_means(&rows)?;
    Ok(Some(TableSummary { rows, mean }))
}

/// Builds the validation and test tables from whatever cells of `out` are
/// complete and writes `summary/`. Incomplete cells leave gaps and are
/// listed in the summary; a directory without any experiment is an error.
pub fn report(out: &Path) -> Result<Summary> {
    let config_path = out.join(CONFIG_FILE);
    let (requested, tie) = if config_path.is_file() {
        let cfg: ExperimentConfig = read_json(&config_path)?;
        (cfg.cells(), cfg.tie_break)
    } else {
        (discover_cells(out), TieBreak::default())
    };
    if requested.is_empty() {
        return Err(Error::Config(format!("{} contains no experiment", out.display())));
    }
    let mut cells = Vec::new();
    for (fold, view) in requested {
        let dir = cell_dir(out, fold, view);
        let status = if dir.join(CELL_FILE).is_file() {
            CellStatus { fold, view, state: CellState::Complete, record: Some(read_json(&dir.join(CELL_FILE))?), error: None }
        } else if let Ok(err) = fs::read_to_string(dir.join(ERROR_FILE)) {
            CellStatus { fold, view, state: CellState::Failed, record: None, error: Some(err) }
        } else {
            CellStatus { fold, view, state: CellState::Missing, record: None, error: None }
        };
        cells.push(status);
    }
    let summary = Summary {
        complete: cells.iter().all(|c| c.state == CellState::Complete),
        validation: table(out, &cells, VAL_PREDS_FILE, tie)?,
        test: table(out, &cells, TEST_PREDS_FILE, tie)?,
        cells,
    };
    let dir = out.join(SUMMARY_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (t, name) in [(&summary.validation, "val_table.csv"), (&summary.test, "test_table.csv")] {
        let path = dir.join(name);
        match t {
            Some(t) => {
                write_table_csv(&path, &t.rows)?;
                for r in &t.rows {
                    let per_fold = out.join(format!("fold_{}", r.fold_index)).join(name.replace("_table", "_report"));
                    write_table_csv(&per_fold, std::slice::from_ref(r))?;
                }
            }
            None => {
                let _ = fs::remove_file(&path);
            }
        }
    }
    write(&dir.join("summary.json"), &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"))?;
    Ok(summary)
}

/// Plain-text rendering of the summary tables, with incomplete cells listed.
pub fn render_summary(s: &Summary) -> String {
    let mut out = String::new();
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
    for (title, t) in [("Validation accuracy (%)", &s.validation), ("Test accuracy (%)", &s.test)] {
        let _ = writeln!(out, "{title}");
        let _ = writeln!(out, "{:<6}{:>8}{:>8}{:>8}{:>8}{:>12}", "Fold", "TV", "MV", "LPV", "CT", "Cross-View");
        match t {
            Some(t) => {
                for r in &t.rows {
                    let _ = write!(out, "{:<6}", r.fold_index + 1);
                    for v in r.per_view {
                        let _ = write!(out, "{:>8}", cell(v));
                    }
                    let _ = writeln!(out, "{:>12}", cell(r.cross_view));
                }
                let _ = write!(out, "{:<6}", "Mean");
                for v in &t.mean[..4] {
                    let _ = write!(out, "{:>8}", cell(*v));
                }
                let _ = writeln!(out, "{:>12}", cell(t.mean[4]));
            }
            None => {
                let _ = writeln!(out, "(no completed cells)");
            }
        }
        let _ = writeln!(out);
    }
    for c in s.cells.iter().filter(|c| c.state != CellState::Complete) {
        let state = if c.state == CellState::Failed { "failed" } else { "missing" };
        let _ = writeln!(out, "fold {} view {}: {state}{}", c.fold, c.view, c.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default());
    }
    out
}

/// Leakage audits of every completed cell.
pub fn read_audits(out: &Path) -> Result<Vec<(usize, ViewLabel, TrainAudit)>> {
    let mut v = Vec::new();
    for (fold, view) in discover_cells(out) {
        let path = cell_dir(out, fold, view).join(AUDIT_FILE);
        if path.is_file() {
            v.push((fold, view, read_json(&path)?));
        }
    }
    Ok(v)
}

/// Reads the fold table written by [`Prepared::new`].
pub fn read_folds(out: &Path) -> Result<Vec<FoldSpec>> {
    #[derive(Deserialize)]
    struct Row {
        fold: usize,
        test: Vec<String>,
        val: Vec<String>,
        train: Vec<String>,
    }
    #[derive(Deserialize)]
    struct Table {
        folds: Vec<Row>,
    }
    let t: Table = read_json(&out.join(FOLDS_FILE))?;
    Ok(t.folds
        .into_iter()
        .map(|r| FoldSpec { fold_index: r.fold, test_ids: r.test, val_ids: r.val, train_ids: r.train })
        .collect())
}
