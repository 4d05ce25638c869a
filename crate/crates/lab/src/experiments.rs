//! The four experiment recipes: training history, landscape around a trained
//! point, trajectory on such a landscape, and the shared-landscape race.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pugd_core::data::{load_mnist_idx_prefix, mnist_paths, Dataset};
use pugd_core::landscape::{
    evaluate_grid, linspace, pca_directions, random_directions, slice_params, DirectionPair, LandscapeGrid, Plane,
    Trajectory, TrajectoryPoint,
};
use pugd_core::{Batch, BatchObjective, Mlp, Optimizer, OptimizerKind, RaggedTensor, Schedule, StepRecord};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, DirectionMode, ExperimentConfig, ExperimentKind, Granularity};
use crate::error::{LabError, Result};
use crate::render;
use crate::runlog::{self, EpochRecord, RunLog, RunMetadata};

/// Train and test subsets with their full-data batches.
#[derive(Clone, Debug)]
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
    pub train_batch: Batch,
    pub test_batch: Batch,
}

impl Data {
    pub fn new(train: Dataset, test: Dataset) -> Result<Self> {
        let train_batch = train.to_batch()?;
        let test_batch = test.to_batch()?;
        Ok(Self {
            train,
            test,
            train_batch,
            test_batch,
        })
    }

    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let root = cfg.data_root();
        let load = |train: bool, n: usize| -> Result<Dataset> {
            let (img, lbl) = mnist_paths(&root, train);
            let ds = load_mnist_idx_prefix(&img, &lbl, n)?;
            if ds.len() < n {
                return Err(LabError::config(format!(
                    "requested {n} samples but {} holds only {}",
                    img.display(),
                    ds.len()
                )));
            }
            Ok(ds)
        };
        Self::new(load(true, cfg.dataset.train_subset)?, load(false, cfg.dataset.test_subset)?)
    }

    fn check_model(&self, cfg: &ExperimentConfig) -> Result<()> {
        let dims = &cfg.model.layer_dims;
        let (d_in, d_out) = (dims[0], *dims.last().expect("validated"));
        if d_in != self.train.dim() || d_out != self.train_batch.targets().ncols() {
            return Err(LabError::config(format!(
                "model.layer_dims {dims:?} do not fit data with {} inputs and {} classes",
                self.train.dim(),
                self.train_batch.targets().ncols()
            )));
        }
        Ok(())
    }
}

fn template(cfg: &ExperimentConfig) -> Result<Mlp> {
    Ok(Mlp::zeros(cfg.model.layer_dims.clone(), cfg.model.activation)?)
}

fn init_params(cfg: &ExperimentConfig, seed: u64) -> Result<RaggedTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Mlp::init(cfg.model.layer_dims.clone(), cfg.model.activation, &mut rng)?.into_params())
}

/// Everything one optimizer run produces.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub log: RunLog,
    pub final_params: RaggedTensor,
    /// Parameters before step `t` for every `t` divisible by the sample stride.
    pub snapshots: Vec<(u64, RaggedTensor)>,
    /// Adagrad multipliers `1 / (sqrt(accum) + eps)` after the first and last step.
    pub adagrad_steps: Option<(Vec<f64>, Vec<f64>)>,
}

struct TrainOptions {
    evaluate_epochs: bool,
}

fn train(
    cfg: &ExperimentConfig,
    kind: OptimizerKind,
    data: &Data,
    start: RaggedTensor,
    opts: TrainOptions,
) -> Result<TrainedRun> {
    let clock = Instant::now();
    let model = template(cfg)?;
    let n_steps = cfg.iterations_for(kind);
    let n = data.train.len();
    let per_epoch = (n / cfg.batch_size) as u64;
    let full_batch = cfg.batch_size == n;

    let schedule = match cfg.schedule.granularity {
        Granularity::Step => Schedule::new(cfg.schedule.kind, cfg.optimizer.lr_max, cfg.schedule.lr_min, n_steps)?,
        Granularity::Epoch => Schedule::new(
            cfg.schedule.kind,
            cfg.optimizer.lr_max,
            cfg.schedule.lr_min,
            n_steps.div_ceil(per_epoch),
        )?,
    };
    let lr_at = |t: u64| match cfg.schedule.granularity {
        Granularity::Step => schedule.lr_at(t),
        Granularity::Epoch => schedule.lr_at(t / per_epoch),
    };

    let mut opt = Optimizer::new(cfg.optimizer_config(kind))?;
    let mut params = start;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batch"));
    let mut order: Vec<usize> = (0..n).collect();
    let mut steps = Vec::with_capacity(n_steps as usize);
    let mut epochs = Vec::new();
    let mut snapshots = Vec::new();
    let mut first_adagrad = None;

    let evaluate = |params: &RaggedTensor, epoch: u64, step: u64| -> Result<EpochRecord> {
        Ok(EpochRecord {
            epoch,
            step,
            train_loss: model.loss_at(params, &data.train_batch, cfg.loss)?,
            train_accuracy: model.accuracy_at(params, &data.train_batch)?,
            test_loss: model.loss_at(params, &data.test_batch, cfg.loss)?,
            test_accuracy: model.accuracy_at(params, &data.test_batch)?,
        })
    };
    if opts.evaluate_epochs {
        epochs.push(evaluate(&params, 0, 0)?);
    }

    for t in 0..n_steps {
        if t % cfg.sample_stride == 0 {
            snapshots.push((t, params.clone()));
        }
        let pos = (t % per_epoch) as usize;
        if pos == 0 && !full_batch {
            order.shuffle(&mut batch_rng);
        }
        let minibatch;
        let batch = if full_batch {
            &data.train_batch
        } else {
            minibatch = data
                .train
                .batch_of(&order[pos * cfg.batch_size..(pos + 1) * cfg.batch_size])?;
            &minibatch
        };
        let oracle = BatchObjective {
            model: &model,
            batch,
            loss: cfg.loss,
        };
        let record = opt.step(&mut params, &oracle, lr_at(t)?)?;
        runlog::check_step(kind, &record)?;
        steps.push(record);
        if t == 0 && kind == OptimizerKind::Adagrad {
            first_adagrad = opt.state().adagrad_effective_steps(opt.config().eps);
        }
        let done = t + 1 == n_steps;
        if opts.evaluate_epochs && ((t + 1) % per_epoch == 0 || done) {
            epochs.push(evaluate(&params, (t + 1).div_ceil(per_epoch), t + 1)?);
        }
    }

    let adagrad_steps = first_adagrad.map(|first| {
        let last = opt
            .state()
            .adagrad_effective_steps(opt.config().eps)
            .expect("accumulator exists after a step");
        (first, last)
    });
    Ok(TrainedRun {
        log: RunLog {
            kind,
            steps,
            epochs,
            metadata: RunMetadata {
                optimizer: kind.name().to_string(),
                config_hash: cfg.hash()?,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                iterations: n_steps,
                wall_time_secs: clock.elapsed().as_secs_f64(),
            },
        },
        final_params: params,
        snapshots,
        adagrad_steps,
    })
}

fn ensure_kind(cfg: &ExperimentConfig, kinds: &[ExperimentKind]) -> Result<()> {
    if kinds.contains(&cfg.experiment) {
        Ok(())
    } else {
        Err(LabError::config(format!("config is for {}, not {kinds:?}", cfg.experiment)))
    }
}

pub struct HistoryOutput {
    pub config: ExperimentConfig,
    pub runs: Vec<TrainedRun>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    step: u64,
    params: RaggedTensor,
}

pub fn run_train_history(cfg: &ExperimentConfig, data: &Data) -> Result<HistoryOutput> {
    ensure_kind(cfg, &[ExperimentKind::TrainHistory])?;
    data.check_model(cfg)?;
    let start = init_params(cfg, derive_seed(cfg.seed, "init"))?;
    let runs = cfg
        .optimizers
        .par_iter()
        .map(|&k| train(cfg, k, data, start.clone(), TrainOptions { evaluate_epochs: true }))
        .collect::<Result<Vec<_>>>()?;
    Ok(HistoryOutput {
        config: cfg.clone(),
        runs,
    })
}

impl HistoryOutput {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_config(&self.config, dir)?;
        for run in &self.runs {
            let sub = dir.join(run.log.kind.name());
            runlog::write(&sub.join("steps.csv"), &runlog::steps_csv(run.log.kind, &run.log.steps)?)?;
            runlog::write(&sub.join("epochs.csv"), &runlog::epochs_csv(&run.log.epochs))?;
            runlog::write(&sub.join("metadata.json"), &runlog::to_json(&run.log.metadata)?)?;
            runlog::write(&sub.join("final_params.json"), &compact_json(&run.final_params)?)?;
            let snaps: Vec<Snapshot> = run
                .snapshots
                .iter()
                .map(|(step, params)| Snapshot {
                    step: *step,
                    params: params.clone(),
                })
                .collect();
            runlog::write(&sub.join("snapshots.json"), &compact_json(&snaps)?)?;
        }
        let logs: Vec<&RunLog> = self.runs.iter().map(|r| &r.log).collect();
        runlog::write(&dir.join("history.svg"), &render::history_svg(&logs))
    }
}

fn compact_json<T: Serialize + ?Sized>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| LabError::config(format!("json encoding failed: {e}")))
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    runlog::write(&dir.join("resolved_config.toml"), &cfg.to_toml()?)
}

fn grid_axes(cfg: &ExperimentConfig) -> (Vec<f64>, Vec<f64>) {
    let l = &cfg.landscape;
    (
        linspace(l.alpha_min, l.alpha_max, l.resolution),
        linspace(l.beta_min, l.beta_max, l.resolution),
    )
}

fn shared_grid(
    cfg: &ExperimentConfig,
    data: &Data,
    anchor: &RaggedTensor,
    pair: &DirectionPair,
    mut meta: BTreeMap<String, String>,
) -> Result<LandscapeGrid> {
    let model = template(cfg)?;
    let (alphas, betas) = grid_axes(cfg);
    let train = |p: &RaggedTensor| model.loss_at(p, &data.train_batch, cfg.loss);
    let test = |p: &RaggedTensor| model.loss_at(p, &data.test_batch, cfg.loss);
    let mut grid = evaluate_grid(anchor, pair, &alphas, &betas, train, Some(test), cfg.landscape.clip)?;
    meta.insert("model.layer_dims".into(), format!("{:?}", cfg.model.layer_dims));
    meta.insert("model.activation".into(), format!("{:?}", cfg.model.activation).to_lowercase());
    meta.insert("loss".into(), format!("{:?}", cfg.loss).to_lowercase());
    meta.insert("train_data".into(), format!("{} ({} samples)", data.train.name(), data.train.len()));
    meta.insert("test_data".into(), format!("{} ({} samples)", data.test.name(), data.test.len()));
    meta.insert("anchor_dual_norm".into(), anchor.dual_norm().to_string());
    meta.insert("normalization".into(), format!("{:?}", pair.normalization).to_lowercase());
    grid.anchor_meta = meta;
    Ok(grid)
}

pub struct LandscapeRun {
    pub kind: OptimizerKind,
    pub anchor: RaggedTensor,
    pub anchor_train_loss: f64,
    pub pair: DirectionPair,
    pub grid: LandscapeGrid,
    pub trajectory: Option<Trajectory>,
    pub pca_eigenvalues: Option<[f64; 2]>,
}

pub struct LandscapeOutput {
    pub config: ExperimentConfig,
    pub runs: Vec<LandscapeRun>,
}

fn load_artifact<T: for<'de> Deserialize<'de>>(path: PathBuf, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(&path).map_err(|_| LabError::MissingArtifact {
        path: path.clone(),
        what: what.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| LabError::MissingArtifact {
        path,
        what: format!("{what} is unreadable: {e}"),
    })
}

/// Anchor and snapshot path for one optimizer, from disk or trained here.
fn anchor_and_path(
    cfg: &ExperimentConfig,
    data: &Data,
    kind: OptimizerKind,
    need_path: bool,
) -> Result<(RaggedTensor, Vec<(u64, RaggedTensor)>)> {
    match &cfg.landscape.anchor_run {
        Some(dir) => {
            let sub = dir.join(kind.name());
            let anchor: RaggedTensor = load_artifact(sub.join("final_params.json"), "final parameters")?;
            let snaps = if need_path {
                let s: Vec<Snapshot> = load_artifact(sub.join("snapshots.json"), "weight snapshots")?;
                s.into_iter().map(|s| (s.step, s.params)).collect()
            } else {
                Vec::new()
            };
            if !template(cfg)?.params().is_congruent(&anchor) {
                return Err(LabError::config(format!(
                    "{} does not match model.layer_dims",
                    sub.join("final_params.json").display()
                )));
            }
            Ok((anchor, snaps))
        }
        None => {
            let start = init_params(cfg, cfg.anchor_seed())?;
            let run = train(cfg, kind, data, start, TrainOptions { evaluate_epochs: false })?;
            Ok((run.final_params, run.snapshots))
        }
    }
}

pub fn run_landscape(cfg: &ExperimentConfig, data: &Data) -> Result<LandscapeOutput> {
    ensure_kind(cfg, &[ExperimentKind::Landscape3d, ExperimentKind::Trajectory2d])?;
    data.check_model(cfg)?;
    let with_path = cfg.experiment == ExperimentKind::Trajectory2d;
    let runs = cfg
        .optimizers
        .par_iter()
        .map(|&kind| -> Result<LandscapeRun> {
            let need_path = with_path || cfg.landscape.direction_mode == DirectionMode::Pca;
            let (anchor, snaps) = anchor_and_path(cfg, data, kind, need_path)?;
            if need_path && snaps.is_empty() {
                return Err(LabError::MissingArtifact {
                    path: cfg.landscape.anchor_run.clone().unwrap_or_default(),
                    what: "no weight snapshots recorded".into(),
                });
            }
            let (pair, eig) = match cfg.landscape.direction_mode {
                DirectionMode::Random => (
                    random_directions(&anchor, cfg.landscape.normalization, cfg.direction_seed())?,
                    None,
                ),
                DirectionMode::Pca => {
                    let path: Vec<RaggedTensor> = snaps.iter().map(|(_, p)| p.clone()).collect();
                    let pca = pca_directions(&path, &anchor)?;
                    (pca.pair, Some(pca.eigenvalues))
                }
            };
            let mut meta = BTreeMap::new();
            meta.insert("optimizer".into(), kind.name().to_string());
            meta.insert("direction_mode".into(), format!("{:?}", cfg.landscape.direction_mode).to_lowercase());
            meta.insert("direction_seed".into(), cfg.direction_seed().to_string());
            meta.insert(
                "anchor_source".into(),
                match &cfg.landscape.anchor_run {
                    Some(d) => d.display().to_string(),
                    None => format!("trained from anchor seed {}", cfg.anchor_seed()),
                },
            );
            let grid = shared_grid(cfg, data, &anchor, &pair, meta)?;
            let model = template(cfg)?;
            let trajectory = if with_path {
                Some(project_path(cfg, &model, data, kind, &anchor, &pair, &snaps)?)
            } else {
                None
            };
            Ok(LandscapeRun {
                kind,
                anchor_train_loss: model.loss_at(&anchor, &data.train_batch, cfg.loss)?,
                anchor,
                pair,
                grid,
                trajectory,
                pca_eigenvalues: eig,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LandscapeOutput {
        config: cfg.clone(),
        runs,
    })
}

fn project_path(
    cfg: &ExperimentConfig,
    model: &Mlp,
    data: &Data,
    kind: OptimizerKind,
    anchor: &RaggedTensor,
    pair: &DirectionPair,
    snaps: &[(u64, RaggedTensor)],
) -> Result<Trajectory> {
    let plane = Plane::new(anchor, pair)?;
    let mut traj = Trajectory::new(kind.name(), cfg.sample_stride)?;
    for (step, w) in snaps {
        let (alpha, beta) = plane.project(w)?;
        traj.push(TrajectoryPoint {
            step: *step,
            alpha,
            beta,
            train_loss: model.loss_at(w, &data.train_batch, cfg.loss)?,
            test_loss: Some(model.loss_at(w, &data.test_batch, cfg.loss)?),
        })?;
    }
    Ok(traj)
}

impl LandscapeOutput {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_config(&self.config, dir)?;
        for run in &self.runs {
            let sub = dir.join(run.kind.name());
            runlog::write(&sub.join("grid.csv"), &runlog::grid_csv(&run.grid))?;
            runlog::write(&sub.join("grid.json"), &runlog::grid_json(&run.grid)?)?;
            let trajs: Vec<Trajectory> = run.trajectory.iter().cloned().collect();
            if let Some(t) = &run.trajectory {
                runlog::write(&sub.join("trajectory.csv"), &runlog::trajectory_csv(t))?;
            }
            let title = format!("{} {} (train loss)", self.config.experiment, run.kind);
            runlog::write(&sub.join("landscape.svg"), &render::landscape_svg(&run.grid, false, &trajs, &title))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RaceRun {
    pub kind: OptimizerKind,
    pub trajectory: Trajectory,
    pub steps: Vec<StepRecord>,
    pub final_params: RaggedTensor,
    pub final_alpha_beta: (f64, f64),
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    /// Population variance of the train loss on a small ring around the
    /// endpoint inside the slice plane; lower means flatter.
    pub endpoint_flatness: f64,
    pub adagrad_steps: Option<(Vec<f64>, Vec<f64>)>,
    pub metadata: RunMetadata,
}

impl RaceRun {
    /// Largest raw gradient dual-norm over the last tenth of the steps.
    pub fn final_decile_max_grad(&self) -> f64 {
        let n = self.steps.len();
        let from = n - n.div_ceil(10);
        self.steps[from..]
            .iter()
            .map(|r| r.grad_dual_norm)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub struct RaceOutput {
    pub config: ExperimentConfig,
    pub anchor: RaggedTensor,
    pub pair: DirectionPair,
    pub grid: LandscapeGrid,
    pub runs: Vec<RaceRun>,
}

impl RaceOutput {
    pub fn run(&self, kind: OptimizerKind) -> Option<&RaceRun> {
        self.runs.iter().find(|r| r.kind == kind)
    }
}

const FLATNESS_ANGLES: usize = 8;

fn endpoint_flatness(
    model: &Mlp,
    cfg: &ExperimentConfig,
    data: &Data,
    w: &RaggedTensor,
    pair: &DirectionPair,
) -> Result<f64> {
    let r = cfg.landscape.flatness_radius;
    let mut losses = vec![model.loss_at(w, &data.train_batch, cfg.loss)?];
    for k in 0..FLATNESS_ANGLES {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / FLATNESS_ANGLES as f64;
        let p = slice_params(w, pair, r * theta.cos(), r * theta.sin())?;
        losses.push(model.loss_at(&p, &data.train_batch, cfg.loss)?);
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / losses.len() as f64)
}

pub fn run_shared_landscape_race(cfg: &ExperimentConfig, data: &Data) -> Result<RaceOutput> {
    ensure_kind(cfg, &[ExperimentKind::SharedLandscapeRace])?;
    data.check_model(cfg)?;
    let anchor = init_params(cfg, cfg.anchor_seed())?;
    let pair = random_directions(&anchor, cfg.landscape.normalization, cfg.direction_seed())?;
    let start = slice_params(&anchor, &pair, cfg.landscape.start_alpha, cfg.landscape.start_beta)?;
    let model = template(cfg)?;

    let runs = cfg
        .optimizers
        .par_iter()
        .map(|&kind| -> Result<RaceRun> {
            let run = train(cfg, kind, data, start.clone(), TrainOptions { evaluate_epochs: false })?;
            let trajectory = project_path(cfg, &model, data, kind, &anchor, &pair, &run.snapshots)?;
            let w = &run.final_params;
            Ok(RaceRun {
                kind,
                trajectory,
                final_alpha_beta: Plane::new(&anchor, &pair)?.project(w)?,
                final_train_loss: model.loss_at(w, &data.train_batch, cfg.loss)?,
                final_test_loss: model.loss_at(w, &data.test_batch, cfg.loss)?,
                endpoint_flatness: endpoint_flatness(&model, cfg, data, w, &pair)?,
                adagrad_steps: run.adagrad_steps,
                steps: run.log.steps,
                metadata: run.log.metadata,
                final_params: run.final_params,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut meta = BTreeMap::new();
    meta.insert("anchor_seed".into(), cfg.anchor_seed().to_string());
    meta.insert("direction_seed".into(), cfg.direction_seed().to_string());
    meta.insert(
        "start".into(),
        format!("({}, {})", cfg.landscape.start_alpha, cfg.landscape.start_beta),
    );
    let grid = shared_grid(cfg, data, &anchor, &pair, meta)?;
    Ok(RaceOutput {
        config: cfg.clone(),
        anchor,
        pair,
        grid,
        runs,
    })
}

#[derive(Serialize)]
struct RaceSummaryRow {
    optimizer: String,
    iterations: usize,
    samples: usize,
    final_alpha: f64,
    final_beta: f64,
    final_train_loss: f64,
    final_test_loss: f64,
    final_decile_max_grad_norm: f64,
    endpoint_flatness: f64,
    flagged_steps: usize,
}

impl RaceOutput {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_config(&self.config, dir)?;
        runlog::write(&dir.join("grid.csv"), &runlog::grid_csv(&self.grid))?;
        runlog::write(&dir.join("grid.json"), &runlog::grid_json(&self.grid)?)?;
        let mut summary = Vec::new();
        for run in &self.runs {
            let sub = dir.join(run.kind.name());
            runlog::write(&sub.join("trajectory.csv"), &runlog::trajectory_csv(&run.trajectory))?;
            runlog::write(&sub.join("steps.csv"), &runlog::steps_csv(run.kind, &run.steps)?)?;
            runlog::write(&sub.join("metadata.json"), &runlog::to_json(&run.metadata)?)?;
            summary.push(RaceSummaryRow {
                optimizer: run.kind.name().into(),
                iterations: run.steps.len(),
                samples: run.trajectory.len(),
                final_alpha: run.final_alpha_beta.0,
                final_beta: run.final_alpha_beta.1,
                final_train_loss: run.final_train_loss,
                final_test_loss: run.final_test_loss,
                final_decile_max_grad_norm: run.final_decile_max_grad(),
                endpoint_flatness: run.endpoint_flatness,
                flagged_steps: run.steps.iter().filter(|r| r.flags.any()).count(),
            });
        }
        runlog::write(&dir.join("summary.json"), &runlog::to_json(&summary)?)?;
        let trajs: Vec<Trajectory> = self.runs.iter().map(|r| r.trajectory.clone()).collect();
        runlog::write(
            &dir.join("race_train.svg"),
            &render::landscape_svg(&self.grid, false, &trajs, "shared landscape race (train loss)"),
        )?;
        runlog::write(
            &dir.join("race_test.svg"),
            &render::landscape_svg(&self.grid, true, &trajs, "shared landscape race (test loss)"),
        )
    }
}

