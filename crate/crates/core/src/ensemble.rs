//! Simultaneous training of `K` independently parameterised members under
//! ACE, the NCL regression counterpart, and ensemble prediction.
//!
//! Every step runs in two phases. Phase one computes all members' outputs on
//! the shared batch; phase two updates each member from gradients that only
//! read those frozen outputs, so the update order cannot matter.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};

use crate::data::{batch_iter, BatchPlan, Dataset};
use crate::error::{AceError, Result};
use crate::losses::{
    ace_grad_logits_batch, ace_loss_batch, ncl_grad, ncl_loss, weighted_batch_mean,
    AceCoefficients, NclCoefficients,
};
use crate::models::{init_mlp, ForwardCache, MlpParams, MlpSpec, Optimizer, OptimizerConfig};
use crate::numerics::{softmax_rows, Matrix, ProbVector, SeededRng, Stream, Vector};

/// Initialise one member per spec, member `k` from the derived seed
/// `(seed, Init, k)`.
pub fn init_members(specs: &[MlpSpec], seed: u64) -> Vec<MlpParams> {
    specs
        .iter()
        .enumerate()
        .map(|(k, spec)| init_mlp(spec, &mut SeededRng::derive(seed, Stream::Init, k as u64)))
        .collect()
}

fn check_batch_rows(x: ArrayView2<'_, f64>, rows: usize) -> Result<()> {
    if x.nrows() != rows {
        return Err(AceError::dim(format!(
            "{} feature rows but {rows} targets",
            x.nrows()
        )));
    }
    if rows == 0 {
        return Err(AceError::InvalidInput("empty batch".into()));
    }
    Ok(())
}

fn check_order(order: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    for &i in order {
        if i >= k || std::mem::replace(&mut seen[i], true) {
            return Err(AceError::InvalidInput(format!(
                "update order {order:?} is not a permutation of 0..{k}"
            )));
        }
    }
    if order.len() != k {
        return Err(AceError::InvalidInput(format!(
            "update order {order:?} is not a permutation of 0..{k}"
        )));
    }
    Ok(())
}

/// Per-member outcome of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// Batch-mean loss of each member, evaluated before its update.
    pub losses: Vec<f64>,
}

/// `K` classifiers trained jointly under ACE.
#[derive(Debug, Clone)]
pub struct EnsembleState {
    models: Vec<MlpParams>,
    optimizers: Vec<Optimizer>,
    coeff: AceCoefficients,
    step: u64,
}

impl EnsembleState {
    /// Members may differ in architecture but must share input and output
    /// widths.
    pub fn new(
        models: Vec<MlpParams>,
        optimizer: OptimizerConfig,
        coeff: AceCoefficients,
    ) -> Result<Self> {
        if models.is_empty() {
            return Err(AceError::config(
                "k",
                "an ensemble needs at least one member",
            ));
        }
        if coeff.k() != models.len() {
            return Err(AceError::config(
                "k",
                format!(
                    "coefficients are for {} members but {} were given",
                    coeff.k(),
                    models.len()
                ),
            ));
        }
        let first = models[0].spec();
        if let Some(m) = models.iter().find(|m| {
            m.spec().output_width() != first.output_width()
                || m.spec().input_width() != first.input_width()
        }) {
            return Err(AceError::config(
                "hidden",
                format!(
                    "member widths {}->{} differ from {}->{}",
                    m.spec().input_width(),
                    m.spec().output_width(),
                    first.input_width(),
                    first.output_width()
                ),
            ));
        }
        let optimizers = models
            .iter()
            .map(|m| Optimizer::new(optimizer, m))
            .collect::<Result<_>>()?;
        Ok(EnsembleState {
            models,
            optimizers,
            coeff,
            step: 0,
        })
    }

    /// `coeff.k()` members of architecture `spec`, seeded by [`init_members`].
    pub fn init(
        spec: &MlpSpec,
        optimizer: OptimizerConfig,
        coeff: AceCoefficients,
        seed: u64,
    ) -> Result<Self> {
        let specs = vec![spec.clone(); coeff.k()];
        Self::new(init_members(&specs, seed), optimizer, coeff)
    }

    pub fn k(&self) -> usize {
        self.models.len()
    }

    pub fn models(&self) -> &[MlpParams] {
        &self.models
    }

    pub fn coeff(&self) -> &AceCoefficients {
        &self.coeff
    }

    /// Number of joint ACE steps taken.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Softmax outputs of every member, one matrix per member.
    pub fn member_predictions(&self, x: ArrayView2<'_, f64>) -> Result<Vec<Matrix>> {
        self.models
            .iter()
            .map(|m| softmax_rows(m.predict(x)?.view()))
            .collect()
    }

    /// Row-wise ensemble distribution: the uniform mean of member outputs,
    /// or the α-weighted mean when the coefficients carry weights.
    pub fn ensemble_predict(&self, x: ArrayView2<'_, f64>) -> Result<Matrix> {
        Ok(weighted_batch_mean(
            &self.member_predictions(x)?,
            &self.coeff,
        ))
    }

    /// [`EnsembleState::ensemble_predict`] for one input.
    pub fn ensemble_predict_one(&self, x: ArrayView1<'_, f64>) -> Result<ProbVector> {
        let x = x.insert_axis(Axis(0));
        let row = self.ensemble_predict(x)?.row(0).to_owned();
        ProbVector::new(row)
    }

    /// One ACE step on a shared batch, updating members in index order.
    pub fn ace_train_step(
        &mut self,
        x: ArrayView2<'_, f64>,
        p: ArrayView2<'_, f64>,
    ) -> Result<StepStats> {
        let order: Vec<usize> = (0..self.k()).collect();
        self.ace_train_step_ordered(x, p, &order)
    }

    /// One ACE step with an explicit phase-two update order.
    pub fn ace_train_step_ordered(
        &mut self,
        x: ArrayView2<'_, f64>,
        p: ArrayView2<'_, f64>,
        order: &[usize],
    ) -> Result<StepStats> {
        check_order(order, self.k())?;
        check_batch_rows(x, p.nrows())?;

        let mut caches: Vec<ForwardCache> = Vec::with_capacity(self.k());
        let mut q_all: Vec<Matrix> = Vec::with_capacity(self.k());
        for m in &self.models {
            let (z, cache) = m.forward(x)?;
            q_all.push(softmax_rows(z.view())?);
            caches.push(cache);
        }

        let mut losses = vec![0.0; self.k()];
        for &k in order {
            losses[k] = ace_loss_batch(p, &q_all, k, &self.coeff)?;
            let g = ace_grad_logits_batch(p, &q_all, k, &self.coeff)?;
            let grads = self.models[k].backward_params(&caches[k], g.view())?;
            self.optimizers[k].step(&mut self.models[k], &grads)?;
        }
        self.step += 1;
        Ok(StepStats { losses })
    }

    /// Plain cross-entropy step on member `k` alone.
    pub fn ce_train_member(
        &mut self,
        k: usize,
        x: ArrayView2<'_, f64>,
        p: ArrayView2<'_, f64>,
    ) -> Result<f64> {
        if k >= self.k() {
            return Err(AceError::IndexOutOfRange {
                index: k,
                len: self.k(),
            });
        }
        check_batch_rows(x, p.nrows())?;
        let (z, cache) = self.models[k].forward(x)?;
        let q = softmax_rows(z.view())?;
        if q.dim() != p.dim() {
            return Err(AceError::dim(format!(
                "labels {:?} vs outputs {:?}",
                p.dim(),
                q.dim()
            )));
        }
        let single = AceCoefficients::new(1, 0.0)?;
        let q_all = [q];
        let loss = ace_loss_batch(p, &q_all, 0, &single)?;
        let g = &q_all[0] - &p;
        let grads = self.models[k].backward_params(&cache, g.view())?;
        self.optimizers[k].step(&mut self.models[k], &grads)?;
        Ok(loss)
    }

    /// One pass over `data` with every member on the same batches.
    /// Returns the per-member mean of batch losses.
    pub fn train_epoch(&mut self, data: &Dataset, plan: &BatchPlan) -> Result<Vec<f64>> {
        let mut sums = vec![0.0; self.k()];
        let mut batches = 0usize;
        for batch in batch_iter(data, plan)? {
            let p = batch
                .labels()
                .ok_or_else(|| AceError::InvalidInput("ACE training needs class labels".into()))?;
            let stats = self.ace_train_step(batch.features().view(), p.view())?;
            for (s, l) in sums.iter_mut().zip(stats.losses) {
                *s += l;
            }
            batches += 1;
        }
        Ok(sums.into_iter().map(|s| s / batches as f64).collect())
    }

    /// One pass in which member `k` draws its own batch order from
    /// `plans[k]`. Only defined without coupling (λ = 0), where members never
    /// read each other's predictions.
    pub fn train_epoch_independent(
        &mut self,
        data: &Dataset,
        plans: &[BatchPlan],
    ) -> Result<Vec<f64>> {
        if self.coeff.lambda() != 0.0 {
            return Err(AceError::config(
                "independent_batches_at_zero",
                format!(
                    "independent batches need lambda = 0, got {}",
                    self.coeff.lambda()
                ),
            ));
        }
        if plans.len() != self.k() {
            return Err(AceError::dim(format!(
                "{} batch plans for {} members",
                plans.len(),
                self.k()
            )));
        }
        let mut means = Vec::with_capacity(self.k());
        for (k, plan) in plans.iter().enumerate() {
            let (mut sum, mut batches) = (0.0, 0usize);
            for batch in batch_iter(data, plan)? {
                let p = batch.labels().ok_or_else(|| {
                    AceError::InvalidInput("ACE training needs class labels".into())
                })?;
                sum += self.ce_train_member(k, batch.features().view(), p.view())?;
                batches += 1;
            }
            means.push(sum / batches as f64);
        }
        Ok(means)
    }
}

/// `K ≥ 2` scalar regressors trained jointly under NCL.
#[derive(Debug, Clone)]
pub struct RegressorEnsembleState {
    models: Vec<MlpParams>,
    optimizers: Vec<Optimizer>,
    coeff: NclCoefficients,
    step: u64,
}

impl RegressorEnsembleState {
    pub fn new(
        models: Vec<MlpParams>,
        optimizer: OptimizerConfig,
        coeff: NclCoefficients,
    ) -> Result<Self> {
        if models.len() < 2 || coeff.k() != models.len() {
            return Err(AceError::config(
                "k",
                format!(
                    "NCL needs at least 2 members matching the coefficients (K = {}), got {}",
                    coeff.k(),
                    models.len()
                ),
            ));
        }
        let input = models[0].spec().input_width();
        if let Some(m) = models
            .iter()
            .find(|m| m.spec().output_width() != 1 || m.spec().input_width() != input)
        {
            return Err(AceError::config(
                "hidden",
                format!(
                    "regressors must map {input} inputs to 1 output, found {:?}",
                    m.spec().layer_sizes()
                ),
            ));
        }
        let optimizers = models
            .iter()
            .map(|m| Optimizer::new(optimizer, m))
            .collect::<Result<_>>()?;
        Ok(RegressorEnsembleState {
            models,
            optimizers,
            coeff,
            step: 0,
        })
    }

    pub fn init(
        spec: &MlpSpec,
        optimizer: OptimizerConfig,
        coeff: NclCoefficients,
        seed: u64,
    ) -> Result<Self> {
        let specs = vec![spec.clone(); coeff.k()];
        Self::new(init_members(&specs, seed), optimizer, coeff)
    }

    pub fn k(&self) -> usize {
        self.models.len()
    }

    pub fn models(&self) -> &[MlpParams] {
        &self.models
    }

    pub fn coeff(&self) -> &NclCoefficients {
        &self.coeff
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Each member's scalar predictions.
    pub fn member_predictions(&self, x: ArrayView2<'_, f64>) -> Result<Vec<Vector>> {
        self.models
            .iter()
            .map(|m| Ok(m.predict(x)?.column(0).to_owned()))
            .collect()
    }

    /// `F̄`, the uniform mean of member outputs.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vector> {
        let members = self.member_predictions(x)?;
        let mut acc = Array1::zeros(x.nrows());
        for f in &members {
            acc += f;
        }
        Ok(acc / self.k() as f64)
    }

    /// One NCL step, updating members in index order.
    pub fn ncl_train_step(
        &mut self,
        x: ArrayView2<'_, f64>,
        y: ArrayView1<'_, f64>,
    ) -> Result<StepStats> {
        let order: Vec<usize> = (0..self.k()).collect();
        self.ncl_train_step_ordered(x, y, &order)
    }

    pub fn ncl_train_step_ordered(
        &mut self,
        x: ArrayView2<'_, f64>,
        y: ArrayView1<'_, f64>,
        order: &[usize],
    ) -> Result<StepStats> {
        check_order(order, self.k())?;
        check_batch_rows(x, y.len())?;

        let mut caches = Vec::with_capacity(self.k());
        let mut outputs: Vec<Vector> = Vec::with_capacity(self.k());
        for m in &self.models {
            let (f, cache) = m.forward(x)?;
            outputs.push(f.column(0).to_owned());
            caches.push(cache);
        }
        let mut f_bar = Array1::zeros(y.len());
        for f in &outputs {
            f_bar += f;
        }
        f_bar /= self.k() as f64;

        let n = y.len() as f64;
        let mut losses = vec![0.0; self.k()];
        for &k in order {
            let fk = &outputs[k];
            losses[k] = (0..y.len())
                .map(|i| ncl_loss(fk[i], y[i], f_bar[i], &self.coeff))
                .sum::<f64>()
                / n;
            let g = Matrix::from_shape_fn((y.len(), 1), |(i, _)| {
                ncl_grad(fk[i], y[i], f_bar[i], &self.coeff)
            });
            let grads = self.models[k].backward_params(&caches[k], g.view())?;
            self.optimizers[k].step(&mut self.models[k], &grads)?;
        }
        self.step += 1;
        Ok(StepStats { losses })
    }

    /// One pass over a regression dataset on shared batches.
    pub fn train_epoch(&mut self, data: &Dataset, plan: &BatchPlan) -> Result<Vec<f64>> {
        let mut sums = vec![0.0; self.k()];
        let mut batches = 0usize;
        for batch in batch_iter(data, plan)? {
            let y = batch.values().ok_or_else(|| {
                AceError::InvalidInput("NCL training needs scalar targets".into())
            })?;
            let stats = self.ncl_train_step(batch.features().view(), y.view())?;
            for (s, l) in sums.iter_mut().zip(stats.losses) {
                *s += l;
            }
            batches += 1;
        }
        Ok(sums.into_iter().map(|s| s / batches as f64).collect())
    }
}
