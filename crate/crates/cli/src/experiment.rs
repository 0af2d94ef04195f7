//! Sweep execution: one training per (coefficient, seed) cell, aggregated
//! into one row per coefficient.

use std::time::Instant;

use ace_core::data::{
    batch_iter, load_mnist_idx, synth_blobs, synth_regression, BatchPlan, Dataset,
};
use ace_core::ensemble::{EnsembleState, RegressorEnsembleState};
use ace_core::losses::weighted_batch_mean;
use ace_core::metrics::{bias_var_cov, mse, BvcReport, EvalReport};
use ace_core::models::MlpSpec;
use ace_core::smoc::SmocState;
use ace_core::{SeededRng, Stream};
use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, EvalSplit, ExperimentConfig, Mode};
use crate::error::{CliError, Result};

/// Training and evaluation sets of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => {
            let dir = &cfg.mnist_dir;
            let train = load_mnist_idx(
                dir.join("train-images-idx3-ubyte"),
                dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_mnist_idx(
                dir.join("t10k-images-idx3-ubyte"),
                dir.join("t10k-labels-idx1-ubyte"),
            )?;
            (train, test)
        }
        DatasetKind::Blobs => {
            let mut rng = SeededRng::derive(cfg.data_seed, Stream::Data, 0);
            let all = synth_blobs(
                cfg.synth_train + cfg.synth_test,
                cfg.synth_classes,
                cfg.synth_dim,
                cfg.synth_spread,
                &mut rng,
            )?;
            all.split_tail(cfg.synth_test)?
        }
        DatasetKind::Regression => {
            let mut rng = SeededRng::derive(cfg.data_seed, Stream::Data, 0);
            let all =
                synth_regression(cfg.synth_train + cfg.synth_test, cfg.synth_noise, &mut rng)?;
            all.split_tail(cfg.synth_test)?
        }
    };
    let train = match cfg.train_limit {
        Some(n) => train.head(n),
        None => train,
    };
    let (train, eval) = match cfg.eval_split {
        EvalSplit::Test => (train, test),
        EvalSplit::Validation => train.split_tail(cfg.validation_holdout)?,
    };
    let eval = match cfg.eval_limit {
        Some(n) => eval.head(n),
        None => eval,
    };
    if train.len() < cfg.batch_size {
        return Err(CliError::validation(
            "batch_size",
            format!(
                "{} exceeds the {} training samples",
                cfg.batch_size,
                train.len()
            ),
        ));
    }
    Ok(ExperimentData { train, eval })
}

/// Scores of one trained ensemble. In `ncl` mode the `*_ce` fields hold mean
/// squared errors and the accuracies are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub ens_acc: Option<f64>,
    pub ens_ce: f64,
    pub single_acc: Option<f64>,
    pub single_ce: f64,
    pub model_accs: Vec<f64>,
    pub model_ces: Vec<f64>,
    /// Optimizer steps taken per member.
    pub steps: u64,
    /// Shared-trunk passes during training (`smoc` only).
    pub trunk_forward: Option<u64>,
    pub trunk_backward: Option<u64>,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub ens_acc: Option<f64>,
    pub ens_ce: f64,
    pub single_acc: Option<f64>,
    pub single_ce: f64,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedResult>,
    /// Summed over seeds.
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub mode: Mode,
    /// Every resolved configuration value.
    pub config: std::collections::BTreeMap<String, String>,
    pub rows: Vec<SweepRow>,
}

fn shared_plan(cfg: &ExperimentConfig, seed: u64, epoch: usize) -> BatchPlan {
    BatchPlan {
        batch_size: cfg.batch_size,
        shuffle_seed: SeededRng::sub_seed(seed, Stream::Shuffle, epoch as u64),
        drop_last: false,
    }
}

fn check_finite(losses: &[f64], lambda: f64, seed: u64, epoch: usize) -> Result<()> {
    if losses.iter().all(|l| l.is_finite()) {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "non-finite training loss at lambda {lambda}, seed {seed}, epoch {epoch}: {losses:?}"
        )))
    }
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

fn classes(data: &ExperimentData) -> Result<usize> {
    data.train
        .num_classes()
        .ok_or_else(|| CliError::validation("dataset", "expected class labels"))
}

fn classification_result(
    seed: u64,
    members: &[ace_core::Matrix],
    ensemble: &ace_core::Matrix,
    eval: &Dataset,
) -> Result<SeedResult> {
    let labels = eval
        .labels()
        .ok_or_else(|| CliError::validation("dataset", "expected class labels"))?;
    let r = EvalReport::evaluate(members, ensemble, labels)?;
    Ok(SeedResult {
        seed,
        ens_acc: Some(r.ensemble_accuracy),
        ens_ce: r.ensemble_ce,
        single_acc: Some(r.mean_model_accuracy),
        single_ce: r.mean_model_ce,
        model_accs: r.model_accuracies,
        model_ces: r.model_ces,
        steps: 0,
        trunk_forward: None,
        trunk_backward: None,
        wall_s: 0.0,
    })
}

fn run_ace(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    lambda: f64,
    seed: u64,
) -> Result<SeedResult> {
    let spec = MlpSpec::new(layer_sizes(data.train.dim(), &cfg.hidden, classes(data)?))?;
    let coeff = cfg.ace_coefficients(lambda)?;
    let mut ens = EnsembleState::init(&spec, cfg.optimizer_config(), coeff, seed)?;
    let independent = lambda == 0.0 && cfg.independent_batches_at_zero && cfg.k > 1;
    for epoch in 0..cfg.epochs {
        let plan = shared_plan(cfg, seed, epoch);
        let losses = if independent {
            let plans: Vec<BatchPlan> = (0..cfg.k)
                .map(|m| BatchPlan {
                    shuffle_seed: SeededRng::sub_seed(
                        plan.shuffle_seed,
                        Stream::Shuffle,
                        m as u64 + 1,
                    ),
                    ..plan
                })
                .collect();
            ens.train_epoch_independent(&data.train, &plans)?
        } else {
            ens.train_epoch(&data.train, &plan)?
        };
        check_finite(&losses, lambda, seed, epoch)?;
    }
    let x = data.eval.features().view();
    let members = ens.member_predictions(x)?;
    let ensemble = weighted_batch_mean(&members, ens.coeff());
    let mut r = classification_result(seed, &members, &ensemble, &data.eval)?;
    r.steps = (cfg.epochs * data.train.len().div_ceil(cfg.batch_size)) as u64;
    Ok(r)
}

fn run_smoc(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    lambda: f64,
    seed: u64,
) -> Result<SeedResult> {
    let mut trunk = vec![data.train.dim()];
    trunk.extend_from_slice(&cfg.hidden);
    let coeff = cfg.ace_coefficients(lambda)?;
    let mut state = SmocState::init(trunk, classes(data)?, cfg.optimizer_config(), coeff, seed)?;
    for epoch in 0..cfg.epochs {
        let plan = shared_plan(cfg, seed, epoch);
        for batch in batch_iter(&data.train, &plan)? {
            let p = batch
                .labels()
                .ok_or_else(|| CliError::validation("dataset", "expected class labels"))?;
            let losses = state.smoc_train_step(batch.features().view(), p.view())?;
            check_finite(&losses, lambda, seed, epoch)?;
        }
    }
    let (forward, backward) = (state.trunk_forward_calls(), state.trunk_backward_calls());
    let fwd = state.smoc_forward(data.eval.features().view())?;
    let ensemble = weighted_batch_mean(&fwd.q, state.coeff());
    let mut r = classification_result(seed, &fwd.q, &ensemble, &data.eval)?;
    r.steps = state.step();
    r.trunk_forward = Some(forward);
    r.trunk_backward = Some(backward);
    Ok(r)
}

fn train_ncl(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    gamma: f64,
    seed: u64,
) -> Result<RegressorEnsembleState> {
    let spec = MlpSpec::new(layer_sizes(data.train.dim(), &cfg.hidden, 1))?;
    let coeff = cfg.ncl_coefficients(gamma)?;
    let mut ens = RegressorEnsembleState::init(&spec, cfg.optimizer_config(), coeff, seed)?;
    for epoch in 0..cfg.epochs {
        let losses = ens.train_epoch(&data.train, &shared_plan(cfg, seed, epoch))?;
        check_finite(&losses, gamma, seed, epoch)?;
    }
    Ok(ens)
}

fn eval_targets(data: &ExperimentData) -> Result<&[f64]> {
    data.eval
        .values()
        .and_then(|v| v.as_slice())
        .ok_or_else(|| CliError::validation("dataset", "expected scalar targets"))
}

fn run_ncl(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    gamma: f64,
    seed: u64,
) -> Result<SeedResult> {
    let ens = train_ncl(cfg, data, gamma, seed)?;
    let y = eval_targets(data)?;
    let x = data.eval.features().view();
    let model_ces = ens
        .member_predictions(x)?
        .iter()
        .map(|f| mse(f.as_slice().expect("contiguous predictions"), y))
        .collect::<ace_core::Result<Vec<_>>>()?;
    let ens_ce = mse(
        ens.predict(x)?.as_slice().expect("contiguous predictions"),
        y,
    )?;
    Ok(SeedResult {
        seed,
        ens_acc: None,
        ens_ce,
        single_acc: None,
        single_ce: model_ces.iter().sum::<f64>() / model_ces.len() as f64,
        model_accs: Vec::new(),
        model_ces,
        steps: ens.step(),
        trunk_forward: None,
        trunk_backward: None,
        wall_s: 0.0,
    })
}

/// Train and evaluate one (coefficient, seed) cell.
pub fn run_cell(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    lambda: f64,
    seed: u64,
) -> Result<SeedResult> {
    let start = Instant::now();
    let mut r = match cfg.mode {
        Mode::AceEnsemble => run_ace(cfg, data, lambda, seed),
        Mode::Smoc => run_smoc(cfg, data, lambda, seed),
        Mode::Ncl => run_ncl(cfg, data, lambda, seed),
    }?;
    r.wall_s = start.elapsed().as_secs_f64();
    Ok(r)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn aggregate(lambda: f64, per_seed: Vec<SeedResult>) -> SweepRow {
    let opt_mean = |f: fn(&SeedResult) -> Option<f64>| {
        per_seed
            .iter()
            .map(f)
            .collect::<Option<Vec<_>>>()
            .map(|v| mean(v.into_iter()))
    };
    SweepRow {
        lambda,
        ens_acc: opt_mean(|r| r.ens_acc),
        ens_ce: mean(per_seed.iter().map(|r| r.ens_ce)),
        single_acc: opt_mean(|r| r.single_acc),
        single_ce: mean(per_seed.iter().map(|r| r.single_ce)),
        seeds: per_seed.iter().map(|r| r.seed).collect(),
        wall_s: per_seed.iter().map(|r| r.wall_s).sum(),
        per_seed,
    }
}

/// Run every cell of a validated configuration on preloaded data.
/// `progress` sees each cell as it finishes.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    progress: &(dyn Fn(f64, &SeedResult) + Sync),
) -> Result<SweepReport> {
    cfg.validate()?;
    let cells: Vec<(f64, u64)> = cfg
        .lambdas
        .iter()
        .flat_map(|&l| cfg.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let run = |&(lambda, seed): &(f64, u64)| {
        let r = run_cell(cfg, data, lambda, seed)?;
        progress(lambda, &r);
        Ok(r)
    };
    let results: Vec<SeedResult> = if cfg.deterministic || cfg.workers == 1 {
        cells.iter().map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| CliError::validation("workers", e.to_string()))?;
        pool.install(|| cells.par_iter().map(run).collect::<Result<_>>())?
    };
    let per_lambda = cfg.seeds.len();
    let mut results = results.into_iter();
    let rows = cfg
        .lambdas
        .iter()
        .map(|&l| aggregate(l, results.by_ref().take(per_lambda).collect()))
        .collect();
    Ok(SweepReport {
        mode: cfg.mode,
        config: cfg.resolved(),
        rows,
    })
}

/// Validate, load the data, and run the sweep.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    run_sweep(cfg, &data, &|_, _| {})
}

/// Bias–variance–covariance split of the NCL ensemble at one `γ`, treating
/// the configured seeds as the repeated trainings.
pub fn ncl_decomposition(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    gamma: f64,
) -> Result<BvcReport> {
    let y = eval_targets(data)?;
    let x = data.eval.features().view();
    let mut preds = Array3::zeros((cfg.seeds.len(), cfg.k, y.len()));
    for (r, &seed) in cfg.seeds.iter().enumerate() {
        let ens = train_ncl(cfg, data, gamma, seed)?;
        for (k, f) in ens.member_predictions(x)?.iter().enumerate() {
            preds.slice_mut(ndarray::s![r, k, ..]).assign(f);
        }
    }
    Ok(bias_var_cov(&preds, y)?)
}
