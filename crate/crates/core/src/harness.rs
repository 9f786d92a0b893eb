//! Experiment driver: degree sweeps, cross-validation and reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::data::{
    gen_multioutput, gen_sshape, load_csv, split, SShapeParams, SplitKind, SplitSpec, GENERATOR_ID,
};
use crate::error::{Error, Result};
use crate::kernels::{Dataset, KernelFamily, KernelParams};
use crate::learner::{learn_transforms, LearnedTransforms};
use crate::optimize::OptimizerOpts;
use crate::tgp::{predict_many, tgp_fit, Criterion, TgpOptions};

/// Relative MAE improvement below which cross-validation stops adding degree levels.
pub const SATURATION_TOL: f64 = 0.01;

/// Mean absolute error over every entry.
pub fn mae(predictions: &DMatrix<f64>, truths: &DMatrix<f64>) -> Result<f64> {
    if predictions.shape() != truths.shape() {
        return Err(Error::Shape(format!(
            "predictions are {:?} but truths are {:?}",
            predictions.shape(),
            truths.shape()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Shape("MAE needs at least one entry".into()));
    }
    let total: f64 = predictions
        .iter()
        .zip(truths.iter())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(total / predictions.len() as f64)
}

/// `(1 - mae_map / mae_nomap) * 100`; negative when the mapping hurts.
pub fn gain_percent(mae_map: f64, mae_nomap: f64) -> Result<f64> {
    if !(mae_nomap > 0.0) {
        return Err(Error::DivisionByZero(format!(
            "baseline error must be positive, got {mae_nomap}"
        )));
    }
    Ok((1.0 - mae_map / mae_nomap) * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// S-shape data; the seed defaults to the experiment seed.
    Sshape {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_sigma")]
        noise_sigma: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Synthetic multi-output data from [`gen_multioutput`].
    Multioutput {
        n: usize,
        p: usize,
        q: usize,
        #[serde(default = "default_sigma")]
        noise_sigma: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// CSV files; without a test file the training file is split.
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

fn default_n() -> usize {
    500
}

fn default_sigma() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelGrid {
    #[serde(default = "default_family")]
    pub family: KernelFamily,
    pub bandwidths: Vec<f64>,
}

fn default_family() -> KernelFamily {
    KernelFamily::Rbf
}

impl KernelGrid {
    pub fn rbf(bandwidths: Vec<f64>) -> Self {
        Self {
            family: KernelFamily::Rbf,
            bandwidths,
        }
    }

    fn params(&self) -> Result<Vec<KernelParams>> {
        self.bandwidths
            .iter()
            .map(|&b| KernelParams::new(self.family, b))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub kernel_x: KernelGrid,
    pub kernel_y: KernelGrid,
    pub basis: BasisSpec,
    /// The sweep covers every `(d1, d2)` pair drawn from this set.
    pub degrees: Vec<usize>,
    /// Explicit cells; overrides the square grid over `degrees` when present.
    #[serde(default)]
    pub cells: Option<Vec<(usize, usize)>>,
    pub criterion: Criterion,
    #[serde(default = "default_split")]
    pub split: SplitKind,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    #[serde(default)]
    pub optimizer: OptimizerOpts,
    #[serde(default)]
    pub tgp: TgpOptions,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_split() -> SplitKind {
    SplitKind::Holdout(0.5)
}

fn default_folds() -> usize {
    5
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_x.bandwidths.is_empty() || self.kernel_y.bandwidths.is_empty() {
            return Err(Error::Config("bandwidth grids must be non-empty".into()));
        }
        self.kernel_x
            .params()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.kernel_y
            .params()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.basis
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let cells = self.grid_cells();
        if cells.is_empty() {
            return Err(Error::Config("degree grid must be non-empty".into()));
        }
        if let Some(&(d1, d2)) = cells
            .iter()
            .find(|&&(d1, d2)| d1 < 1 || d2 < 1 || d1.max(d2) > crate::basis::MAX_DEGREE)
        {
            return Err(Error::Config(format!("invalid degree cell ({d1}, {d2})")));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be at least 2".into()));
        }
        if !matches!(self.split, SplitKind::Holdout(_)) {
            return Err(Error::Config(
                "experiment split must be a holdout fraction".into(),
            ));
        }
        SplitSpec {
            kind: self.split,
            seed: self.seed,
        }
        .validate()?;
        self.optimizer.validate()?;
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        if let DatasetSource::Csv { train, test } = &self.dataset {
            for p in std::iter::once(train).chain(test.iter()) {
                if !p.is_file() {
                    return Err(Error::Config(format!(
                        "dataset file {} not found",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Cells of the sweep, sorted and deduplicated.
    pub fn grid_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = match &self.cells {
            Some(c) => c.clone(),
            None => self
                .degrees
                .iter()
                .flat_map(|&a| self.degrees.iter().map(move |&b| (a, b)))
                .collect(),
        };
        cells.sort_unstable();
        cells.dedup();
        cells
    }

    fn sorted_degrees(&self) -> Vec<usize> {
        let mut d: Vec<usize> = match &self.cells {
            Some(c) => c.iter().flat_map(|&(a, b)| [a, b]).collect(),
            None => self.degrees.clone(),
        };
        d.sort_unstable();
        d.dedup();
        d
    }

    /// Train and test datasets for this configuration.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let whole = match &self.dataset {
            DatasetSource::Sshape {
                n,
                noise_sigma,
                seed,
            } => gen_sshape(&SShapeParams {
                n: *n,
                noise_sigma: *noise_sigma,
                seed: seed.unwrap_or(self.seed),
            })?,
            DatasetSource::Multioutput {
                n,
                p,
                q,
                noise_sigma,
                seed,
            } => gen_multioutput(*n, *p, *q, *noise_sigma, seed.unwrap_or(self.seed))?,
            DatasetSource::Csv {
                train,
                test: Some(test),
            } => {
                return Ok((load_csv(train)?, load_csv(test)?));
            }
            DatasetSource::Csv { train, test: None } => load_csv(train)?,
        };
        let mut parts = split(
            &whole,
            &SplitSpec {
                kind: self.split,
                seed: self.seed,
            },
        )?;
        let part = parts.swap_remove(0);
        Ok((part.train, part.test))
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(w) = self.workers {
            builder = builder.num_threads(w);
        }
        builder
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
    }
}

/// Test MAE of one model configuration and the transforms it used.
struct CellEval {
    mae: f64,
    transforms: LearnedTransforms,
    objective: f64,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cell(
    train: &Dataset,
    test: &Dataset,
    kernel_x: &KernelParams,
    kernel_y: &KernelParams,
    basis: &BasisSpec,
    (d1, d2): (usize, usize),
    criterion: Criterion,
    opts: &OptimizerOpts,
    tgp: TgpOptions,
) -> Result<CellEval> {
    let transforms = learn_transforms(train, kernel_x, kernel_y, basis, d1, d2)?;
    let model = tgp_fit(train, kernel_x, kernel_y, Some(&transforms), criterion, tgp)?;
    let predictions = predict_many(&model, test.inputs(), opts)?;
    let q = test.output_dim();
    let pred = DMatrix::from_fn(test.len(), q, |i, j| predictions[i].output[j]);
    Ok(CellEval {
        mae: mae(&pred, test.outputs())?,
        objective: transforms.objective_value,
        transforms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub d1: usize,
    pub d2: usize,
    pub status: CellStatus,
    pub mae_with_map: Option<f64>,
    pub mae_without_map: Option<f64>,
    pub gain_percent: Option<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub objective: Option<f64>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenCell {
    pub d1: usize,
    pub d2: usize,
    pub gain_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub algorithm: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Timing {
    pub total_seconds: f64,
    pub baseline_seconds: f64,
    /// Keyed by `"d1,d2"`.
    pub cell_seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub generator: GeneratorInfo,
    pub config: ExperimentConfig,
    pub gamma_x: f64,
    pub gamma_y: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub baseline_mae: Option<f64>,
    pub baseline_error: Option<String>,
    pub cells: Vec<CellResult>,
    pub chosen: Option<ChosenCell>,
    pub timing: Timing,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The report with timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: Timing::default(),
            ..self.clone()
        }
    }

    pub fn cell(&self, d1: usize, d2: usize) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.d1 == d1 && c.d2 == d2)
    }

    /// Plot-ready gain surface: `d1`, `d2`, `gain_percent` columns.
    pub fn gain_surface_tsv(&self) -> String {
        let mut out = String::from("d1\td2\tgain_percent\n");
        for c in &self.cells {
            let gain = c
                .gain_percent
                .map_or_else(|| "nan".to_string(), |g| format!("{g}"));
            out.push_str(&format!("{}\t{}\t{}\n", c.d1, c.d2, gain));
        }
        out
    }

    /// Writes `report.json` and `gain_surface.tsv` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()? + "\n")?;
        std::fs::write(dir.join("gain_surface.tsv"), self.gain_surface_tsv())?;
        Ok(())
    }
}

/// Degree sweep on a holdout split, reporting MAE and %Gain per cell.
///
/// The no-mapping baseline is the `(1, 1)` model, fitted once; its transforms
/// are first-order, i.e. the base kernels up to a positive scale, which leaves
/// both TGP criteria's optimizers unchanged. When the bandwidth grids hold more
/// than one value they are chosen first by k-fold cross-validation of that
/// baseline on the training split.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let start = Instant::now();
    let pool = config.pool()?;
    pool.install(|| run_in_pool(config, start))
}

fn run_in_pool(config: &ExperimentConfig, start: Instant) -> Result<Report> {
    let (train, test) = config.load_data()?;
    let (kernel_x, kernel_y) = choose_bandwidths(config, &train)?;
    info!(
        "experiment: {} train / {} test rows, gamma_x={}, gamma_y={}",
        train.len(),
        test.len(),
        kernel_x.bandwidth,
        kernel_y.bandwidth
    );
    let run = |cell: (usize, usize)| {
        evaluate_cell(
            &train,
            &test,
            &kernel_x,
            &kernel_y,
            &config.basis,
            cell,
            config.criterion,
            &config.optimizer,
            config.tgp,
        )
    };

    let mut timing = Timing::default();
    let t0 = Instant::now();
    let baseline = run((1, 1));
    timing.baseline_seconds = t0.elapsed().as_secs_f64();

    let cells = config.grid_cells();
    let evaluated: Vec<(CellResult, f64)> = cells
        .par_iter()
        .map(|&(d1, d2)| {
            let t = Instant::now();
            let outcome = if (d1, d2) == (1, 1) {
                match &baseline {
                    Ok(b) => Ok(CellEval {
                        mae: b.mae,
                        transforms: b.transforms.clone(),
                        objective: b.objective,
                    }),
                    Err(e) => Err(Error::OptimizationFailure(e.to_string())),
                }
            } else {
                run((d1, d2))
            };
            let result = cell_result(d1, d2, outcome, baseline.as_ref().ok().map(|b| b.mae));
            (result, t.elapsed().as_secs_f64())
        })
        .collect();

    let mut results = Vec::with_capacity(evaluated.len());
    for (r, secs) in evaluated {
        timing
            .cell_seconds
            .insert(format!("{},{}", r.d1, r.d2), secs);
        results.push(r);
    }
    let chosen = results
        .iter()
        .filter_map(|c| c.gain_percent.map(|g| (c, g)))
        .max_by(|(a, ga), (b, gb)| {
            ga.total_cmp(gb)
                .then((b.d1 + b.d2).cmp(&(a.d1 + a.d2)))
                .then(b.d1.cmp(&a.d1))
        })
        .map(|(c, g)| ChosenCell {
            d1: c.d1,
            d2: c.d2,
            gain_percent: g,
        });
    timing.total_seconds = start.elapsed().as_secs_f64();
    Ok(Report {
        generator: GeneratorInfo {
            algorithm: GENERATOR_ID.to_string(),
            seed: config.seed,
        },
        config: config.clone(),
        gamma_x: kernel_x.bandwidth,
        gamma_y: kernel_y.bandwidth,
        n_train: train.len(),
        n_test: test.len(),
        baseline_mae: baseline.as_ref().ok().map(|b| b.mae),
        baseline_error: baseline.as_ref().err().map(|e| e.to_string()),
        cells: results,
        chosen,
        timing,
    })
}

fn cell_result(
    d1: usize,
    d2: usize,
    outcome: Result<CellEval>,
    baseline: Option<f64>,
) -> CellResult {
    let mut result = CellResult {
        d1,
        d2,
        status: CellStatus::Failed,
        mae_with_map: None,
        mae_without_map: baseline,
        gain_percent: None,
        alpha: Vec::new(),
        beta: Vec::new(),
        objective: None,
        warnings: Vec::new(),
        error: None,
    };
    match outcome {
        Ok(eval) => {
            result.mae_with_map = Some(eval.mae);
            result.alpha = eval.transforms.input.coefficients().to_vec();
            result.beta = eval.transforms.output.coefficients().to_vec();
            result.objective = Some(eval.objective);
            result.warnings = eval.transforms.warnings.clone();
            match baseline.map(|b| gain_percent(eval.mae, b)) {
                Some(Ok(g)) => {
                    result.gain_percent = Some(g);
                    result.status = CellStatus::Ok;
                }
                Some(Err(e)) => result.error = Some(e.to_string()),
                None => result.error = Some("baseline failed".into()),
            }
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    result
}

fn choose_bandwidths(
    config: &ExperimentConfig,
    train: &Dataset,
) -> Result<(KernelParams, KernelParams)> {
    let xs = config.kernel_x.params()?;
    let ys = config.kernel_y.params()?;
    if xs.len() == 1 && ys.len() == 1 {
        return Ok((xs[0], ys[0]));
    }
    let folds = kfold(config, train)?;
    let outcome = select_by_cv(
        &config.kernel_x.bandwidths,
        &config.kernel_y.bandwidths,
        &[1],
        |cell| fold_mean_mae(config, &folds, cell),
    )?;
    Ok((
        KernelParams::new(config.kernel_x.family, outcome.best.gamma_x)?,
        KernelParams::new(config.kernel_y.family, outcome.best.gamma_y)?,
    ))
}

fn kfold(config: &ExperimentConfig, train: &Dataset) -> Result<Vec<(Dataset, Dataset)>> {
    Ok(split(
        train,
        &SplitSpec {
            kind: SplitKind::KFold(config.cv_folds),
            seed: config.seed,
        },
    )?
    .into_iter()
    .map(|p| (p.train, p.test))
    .collect())
}

fn fold_mean_mae(
    config: &ExperimentConfig,
    folds: &[(Dataset, Dataset)],
    cell: CvCell,
) -> Result<f64> {
    let kx = KernelParams::new(config.kernel_x.family, cell.gamma_x)?;
    let ky = KernelParams::new(config.kernel_y.family, cell.gamma_y)?;
    let maes = folds
        .iter()
        .map(|(tr, va)| {
            evaluate_cell(
                tr,
                va,
                &kx,
                &ky,
                &config.basis,
                (cell.d1, cell.d2),
                config.criterion,
                &config.optimizer,
                config.tgp,
            )
            .map(|e| e.mae)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(maes.iter().sum::<f64>() / maes.len() as f64)
}

/// One point of the cross-validation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub gamma_x: f64,
    pub gamma_y: f64,
    pub d1: usize,
    pub d2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvEntry {
    pub cell: CvCell,
    /// Mean validation MAE; absent when the cell failed.
    pub mean_mae: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub best: CvCell,
    pub best_mae: f64,
    pub evaluated: Vec<CvEntry>,
}

/// Orders cells by MAE, then smaller `d1 + d2`, smaller `gamma_x`, smaller
/// `gamma_y`, and finally smaller `d1`.
fn cv_order(a: &(CvCell, f64), b: &(CvCell, f64)) -> std::cmp::Ordering {
    a.1.total_cmp(&b.1)
        .then((a.0.d1 + a.0.d2).cmp(&(b.0.d1 + b.0.d2)))
        .then(a.0.gamma_x.total_cmp(&b.0.gamma_x))
        .then(a.0.gamma_y.total_cmp(&b.0.gamma_y))
        .then(a.0.d1.cmp(&b.0.d1))
}

/// Grid search with degree saturation.
///
/// For each bandwidth pair the degree grid is grown one level at a time (a
/// level adds every cell whose larger degree equals the next value in
/// `degrees`); growth stops once the best MAE improves by less than
/// [`SATURATION_TOL`] relative to the previous level. Failed cells are
/// recorded and ignored.
pub fn select_by_cv<F>(
    gammas_x: &[f64],
    gammas_y: &[f64],
    degrees: &[usize],
    eval: F,
) -> Result<CvOutcome>
where
    F: Fn(CvCell) -> Result<f64> + Sync,
{
    if gammas_x.is_empty() || gammas_y.is_empty() || degrees.is_empty() {
        return Err(Error::Config(
            "cross-validation grids must be non-empty".into(),
        ));
    }
    let mut levels = degrees.to_vec();
    levels.sort_unstable();
    levels.dedup();

    let mut evaluated = Vec::new();
    for &gamma_x in gammas_x {
        for &gamma_y in gammas_y {
            let mut best: Option<f64> = None;
            for (li, &level) in levels.iter().enumerate() {
                let cells: Vec<CvCell> = levels[..=li]
                    .iter()
                    .flat_map(|&a| levels[..=li].iter().map(move |&b| (a, b)))
                    .filter(|&(a, b)| a.max(b) == level)
                    .map(|(d1, d2)| CvCell {
                        gamma_x,
                        gamma_y,
                        d1,
                        d2,
                    })
                    .collect();
                let entries: Vec<CvEntry> = cells
                    .par_iter()
                    .map(|&cell| match eval(cell) {
                        Ok(v) if v.is_finite() => CvEntry {
                            cell,
                            mean_mae: Some(v),
                            error: None,
                        },
                        Ok(v) => CvEntry {
                            cell,
                            mean_mae: None,
                            error: Some(format!("non-finite MAE {v}")),
                        },
                        Err(e) => CvEntry {
                            cell,
                            mean_mae: None,
                            error: Some(e.to_string()),
                        },
                    })
                    .collect();
                let level_best = entries
                    .iter()
                    .filter_map(|e| e.mean_mae)
                    .fold(f64::INFINITY, f64::min);
                evaluated.extend(entries);
                let previous = best;
                best = Some(best.map_or(level_best, |b| b.min(level_best)));
                if let (Some(prev), Some(now)) = (previous, best) {
                    if prev.is_finite() && (prev - now) / prev < SATURATION_TOL {
                        break;
                    }
                }
            }
        }
    }
    let winner = evaluated
        .iter()
        .filter_map(|e| e.mean_mae.map(|m| (e.cell, m)))
        .min_by(cv_order)
        .ok_or_else(|| Error::OptimizationFailure("every cross-validation cell failed".into()))?;
    Ok(CvOutcome {
        best: winner.0,
        best_mae: winner.1,
        evaluated,
    })
}

/// Selects `(gamma_x, gamma_y, d1, d2)` by k-fold cross-validation on the
/// training split of `config`.
pub fn cross_validate(config: &ExperimentConfig) -> Result<CvOutcome> {
    config.validate()?;
    let pool = config.pool()?;
    pool.install(|| {
        let (train, _) = config.load_data()?;
        let folds = kfold(config, &train)?;
        select_by_cv(
            &config.kernel_x.bandwidths,
            &config.kernel_y.bandwidths,
            &config.sorted_degrees(),
            |cell| fold_mean_mae(config, &folds, cell),
        )
    })
}
