//! JSON experiment configs, run directories, report aggregation and PCA
//! export.
//!
//! A run directory holds:
//!
//! - `config.json`: the parsed config with paths made absolute
//! - `seeds.json`: base, fold-assignment and per-fold seeds
//! - `reports/<head>_fold<i>.json`: one [`RunReport`] per head and fold
//! - `summary.csv`: `head,median,q1,q3` over all evaluation episodes
//! - `plot_data.csv`: `head,fold,median`, one row per report

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::datamodel::Dataset;
use crate::diffcore::AdamConfig;
use crate::embedio::{load_dataset, synth_dataset, SynthSpec};
use crate::episodic::{cross_validate_transfer, EpisodeConfig, Protocol, RunReport, TrainConfig};
use crate::error::{FslError, Result};
use crate::heads::{HeadKind, HeadOptions};
use crate::par::Execution;
use crate::stats::Quartiles;

/// Files in a run directory that are not reports.
const SIDECARS: [&str; 2] = ["config.json", "seeds.json"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    /// Generator seed for `synth`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Augmented copy of the dataset, used for training when `train.augment` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmented_path: Option<PathBuf>,
}

impl DatasetSection {
    pub fn load(&self) -> Result<Dataset> {
        let mut ds = match (&self.path, &self.synth) {
            (Some(path), None) => load_dataset(path)?,
            (None, Some(spec)) => synth_dataset(spec, self.seed)?,
            _ => return Err(FslError::InvalidConfig("dataset needs exactly one of `path` and `synth`".into())),
        };
        if let Some(name) = &self.name {
            ds.name = name.clone();
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub episodes: usize,
    pub lr: f64,
    pub seed: u64,
    pub adapter_dim: Option<usize>,
    pub augment: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            episodes: 500,
            lr: adam.learning_rate,
            seed: 0,
            adapter_dim: None,
            augment: false,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { episodes: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvSection {
    pub k: usize,
    pub stratify: bool,
}

impl Default for CvSection {
    fn default() -> Self {
        Self { k: 5, stratify: false }
    }
}

fn all_heads() -> Vec<HeadKind> {
    HeadKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub episode: EpisodeConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub cv: CvSection,
    #[serde(default = "all_heads")]
    pub heads: Vec<HeadKind>,
    #[serde(default)]
    pub head_options: HeadOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            episode: EpisodeConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            cv: CvSection::default(),
            heads: all_heads(),
            head_options: HeadOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative dataset paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
        if let Some(ds) = &mut cfg.dataset {
            for p in [&mut ds.path, &mut ds.augmented_path].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(FslError::InvalidConfig("`heads` is empty".into()));
        }
        if self.heads.iter().collect::<BTreeSet<_>>().len() != self.heads.len() {
            return Err(FslError::InvalidConfig("`heads` lists a head twice".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(FslError::InvalidSpec { field: "lr", reason: "must be > 0".into() });
        }
        if self.cv.k < 2 {
            return Err(FslError::InvalidSpec { field: "k", reason: "need at least 2 folds".into() });
        }
        self.episode.validate()?;
        self.protocol().train.validate()?;
        if let Some(ds) = &self.dataset {
            if ds.path.is_some() == ds.synth.is_some() {
                return Err(FslError::InvalidConfig("dataset needs exactly one of `path` and `synth`".into()));
            }
            if let Some(spec) = &ds.synth {
                spec.validate()?;
            }
            if self.train.augment && ds.augmented_path.is_none() {
                return Err(FslError::InvalidConfig("`train.augment` needs `dataset.augmented_path`".into()));
            }
        }
        Ok(())
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            episode: self.episode,
            train: TrainConfig {
                train_episodes: self.train.episodes,
                eval_episodes: self.eval.episodes,
                learning_rate: self.train.lr,
                beta1: self.train.beta1,
                beta2: self.train.beta2,
                epsilon: self.train.epsilon,
                seed: self.train.seed,
                augment: self.train.augment,
                adapter_dim: self.train.adapter_dim,
            },
            head_options: self.head_options,
            folds: self.cv.k,
            stratify: self.cv.stratify,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedsFile {
    pub base: u64,
    pub folds: u64,
    pub runs: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub head: HeadKind,
    pub quartiles: Quartiles,
}

/// Cross-validates every configured head on the config's dataset and
/// writes a run directory.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, exec: Execution) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let section =
        cfg.dataset.as_ref().ok_or_else(|| FslError::InvalidConfig("config has no `dataset` section".into()))?;
    let eval = section.load()?;
    let train = match (&section.augmented_path, cfg.train.augment) {
        (Some(path), true) => load_dataset(path)?,
        _ => eval.clone(),
    };
    run_heads(cfg, &train, &eval, out, exec)
}

/// Adapter trained on `train`, evaluated on the patients of `eval`.
pub fn run_transfer(
    cfg: &ExperimentConfig,
    train: &Dataset,
    eval: &Dataset,
    out: &Path,
    exec: Execution,
) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    run_heads(cfg, train, eval, out, exec)
}

fn run_heads(
    cfg: &ExperimentConfig,
    train: &Dataset,
    eval: &Dataset,
    out: &Path,
    exec: Execution,
) -> Result<Vec<RunReport>> {
    let protocol = cfg.protocol();
    let mut reports = Vec::new();
    for &head in &cfg.heads {
        reports.extend(cross_validate_transfer(head, train, eval, &protocol, exec)?);
    }
    let seeds = SeedsFile {
        base: protocol.train.seed,
        folds: protocol.fold_seed(),
        runs: (0..protocol.folds).map(|f| protocol.run_seed(f)).collect(),
        synth: cfg.dataset.as_ref().filter(|d| d.synth.is_some()).map(|d| d.seed),
    };
    write_run_dir(out, cfg, &seeds, &reports)?;
    Ok(reports)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn report_file_name(report: &RunReport) -> String {
    match report.fold_id {
        Some(f) => format!("{}_fold{f}.json", report.head),
        None => format!("{}.json", report.head),
    }
}

fn write_run_dir(out: &Path, cfg: &ExperimentConfig, seeds: &SeedsFile, reports: &[RunReport]) -> Result<()> {
    let report_dir = out.join("reports");
    fs::create_dir_all(&report_dir)?;
    write_json(&out.join("config.json"), cfg)?;
    write_json(&out.join("seeds.json"), seeds)?;
    for r in reports {
        write_json(&report_dir.join(report_file_name(r)), r)?;
    }
    fs::write(out.join("summary.csv"), summary_csv(&summarize(&cfg.heads, reports)))?;
    let mut plot = String::from("head,fold,median\n");
    for r in reports {
        let fold = r.fold_id.map(|f| f.to_string()).unwrap_or_default();
        plot.push_str(&format!("{},{fold},{:.6}\n", r.head, r.median));
    }
    fs::write(out.join("plot_data.csv"), plot)?;
    Ok(())
}

/// One row per head over the pooled episode accuracies of all its folds.
pub fn summarize(heads: &[HeadKind], reports: &[RunReport]) -> Vec<SummaryRow> {
    heads
        .iter()
        .filter_map(|&head| {
            let pooled: Vec<f64> =
                reports.iter().filter(|r| r.head == head).flat_map(|r| r.episode_accuracies.iter().copied()).collect();
            Quartiles::of(&pooled).map(|quartiles| SummaryRow { head, quartiles })
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("head,median,q1,q3\n");
    for r in rows {
        let q = r.quartiles;
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.head, q.median, q.q1, q.q3));
    }
    s
}

/// Reads every report JSON below `dir`, skipping run-directory sidecars.
pub fn collect_reports(dir: &Path) -> Result<Vec<(PathBuf, RunReport)>> {
    let mut files = Vec::new();
    let mut pending = vec![dir.to_path_buf()];
    while let Some(d) = pending.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if path.is_dir() {
                pending.push(path);
            } else if path.extension().is_some_and(|e| e == "json") && !SIDECARS.contains(&name) {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut reports = Vec::with_capacity(files.len());
    for path in files {
        let text = fs::read_to_string(&path)?;
        let report: RunReport = serde_json::from_str(&text)
            .map_err(|e| FslError::InvalidConfig(format!("malformed report {}: {e}", path.display())))?;
        if !report.is_consistent() {
            return Err(FslError::InvalidConfig(format!(
                "malformed report {}: aggregates disagree with episode accuracies",
                path.display()
            )));
        }
        reports.push((path, report));
    }
    if reports.is_empty() {
        return Err(FslError::InvalidConfig(format!("no reports found in {}", dir.display())));
    }
    Ok(reports)
}

/// Fold medians of one (head, train dataset, eval dataset) group.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub head: HeadKind,
    pub train_dataset: String,
    pub eval_dataset: String,
    pub medians: Vec<f64>,
    pub quartiles: Quartiles,
}

pub fn aggregate(reports: &[RunReport]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(HeadKind, &str, &str), Vec<f64>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.head, &r.train_dataset, &r.eval_dataset)).or_default().push(r.median);
    }
    groups
        .into_iter()
        .map(|((head, train, eval), medians)| AggregateRow {
            head,
            train_dataset: train.to_string(),
            eval_dataset: eval.to_string(),
            quartiles: Quartiles::of(&medians).expect("groups are non-empty"),
            medians,
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["head", "train_dataset", "eval_dataset", "folds", "median", "q1", "q3"])?;
    for r in rows {
        let q = r.quartiles;
        w.write_record([
            r.head.to_string(),
            r.train_dataset.clone(),
            r.eval_dataset.clone(),
            r.medians.len().to_string(),
            format!("{:.6}", q.median),
            format!("{:.6}", q.q1),
            format!("{:.6}", q.q3),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| FslError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Projection of every record onto the two leading principal components.
/// Each component's largest-magnitude loading is made positive.
pub fn pca_2d(dataset: &Dataset) -> Result<Vec<[f64; 2]>> {
    if dataset.is_empty() {
        return Err(FslError::DatasetEmpty);
    }
    let (n, d) = (dataset.len(), dataset.dim);
    let x = DMatrix::from_fn(n, d, |i, j| dataset.records[i].vector[j] as f64);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            v.into_iter().map(|x| if lead < 0.0 { -x } else { x }).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let mut p = [0.0; 2];
            for (c, axis) in axes.iter().enumerate() {
                p[c] = (0..d).map(|j| centered[(i, j)] * axis[j]).sum();
            }
            p
        })
        .collect())
}

pub fn pca_csv(dataset: &Dataset) -> Result<String> {
    let points = pca_2d(dataset)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "y", "patient_id", "label"])?;
    for (p, r) in points.iter().zip(&dataset.records) {
        w.write_record([p[0].to_string(), p[1].to_string(), r.patient_id.clone(), r.label.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| FslError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Writes the aggregate table to `table`, plus `pca_<name>.csv` next to it
/// for each dataset.
pub fn write_report(runs: &Path, table: &Path, datasets: &[Dataset]) -> Result<Vec<AggregateRow>> {
    let reports: Vec<RunReport> = collect_reports(runs)?.into_iter().map(|(_, r)| r).collect();
    let rows = aggregate(&reports);
    let text = aggregate_csv(&rows)?;
    if let Some(parent) = table.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(table)?.write_all(text.as_bytes())?;
    let dir = table.parent().unwrap_or(Path::new(""));
    for ds in datasets {
        fs::write(dir.join(format!("pca_{}.csv", ds.name)), pca_csv(ds)?)?;
    }
    Ok(rows)
}
