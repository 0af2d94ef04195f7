//! Stacked mixture of classifiers: `K` single-layer softmax heads on one
//! shared trunk, trained with ACE.
//!
//! Each head's logit gradient is backpropagated to the trunk output `Z`. The
//! trunk receives the mean of those `K` gradients and is backpropagated once,
//! which by linearity equals averaging `K` separate full backward passes.

use std::cell::Cell;
use std::io::{Read, Write};

use ndarray::{ArrayView1, ArrayView2, Axis};

use crate::error::{AceError, Result};
use crate::losses::{ace_grad_logits_batch, ace_loss_batch, weighted_batch_mean, AceCoefficients};
use crate::models::{
    init_mlp, ForwardCache, MlpGrads, MlpParams, MlpSpec, Optimizer, OptimizerConfig,
};
use crate::numerics::{softmax_rows, Matrix, ProbVector, SeededRng, Stream};

/// Running sum of per-head gradients with respect to the trunk output.
#[derive(Debug, Clone)]
pub struct TrunkGradAccumulator {
    sum: Option<Matrix>,
    count: usize,
    heads: usize,
}

impl TrunkGradAccumulator {
    pub fn new(heads: usize) -> Self {
        TrunkGradAccumulator {
            sum: None,
            count: 0,
            heads,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, grad: &Matrix) -> Result<()> {
        if self.count == self.heads {
            return Err(AceError::InvalidState(format!(
                "more than {} head contributions",
                self.heads
            )));
        }
        match &mut self.sum {
            None => self.sum = Some(grad.clone()),
            Some(s) if s.dim() == grad.dim() => *s += grad,
            Some(s) => {
                return Err(AceError::dim(format!(
                    "head gradient {:?} vs {:?}",
                    grad.dim(),
                    s.dim()
                )))
            }
        }
        self.count += 1;
        Ok(())
    }

    /// The arithmetic mean, available once exactly `heads` contributions
    /// were added.
    pub fn finalize(self) -> Result<Matrix> {
        match self.sum {
            Some(s) if self.count == self.heads => Ok(s / self.heads as f64),
            _ => Err(AceError::InvalidState(format!(
                "expected {} head contributions, got {}",
                self.heads, self.count
            ))),
        }
    }
}

/// Mean of exactly `heads` trunk-output gradients.
pub fn aggregate_trunk_grad(per_head: &[Matrix], heads: usize) -> Result<Matrix> {
    let mut acc = TrunkGradAccumulator::new(heads);
    for g in per_head {
        acc.add(g)?;
    }
    acc.finalize()
}

/// Outputs of one shared forward pass.
#[derive(Debug, Clone)]
pub struct SmocForward {
    /// Trunk output `Z`, one row per sample.
    pub z: Matrix,
    /// Softmax output of every head.
    pub q: Vec<Matrix>,
    trunk_cache: ForwardCache,
    head_caches: Vec<ForwardCache>,
}

/// Gradients of one step before they are applied.
#[derive(Debug, Clone)]
pub struct SmocGrads {
    pub trunk: MlpGrads,
    pub heads: Vec<MlpGrads>,
    /// Per-sample `∂e^k/∂Z` of every head, before averaging.
    pub z_grads: Vec<Matrix>,
    /// Batch-mean loss of every head.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SmocState {
    trunk: MlpParams,
    heads: Vec<MlpParams>,
    trunk_opt: Optimizer,
    head_opts: Vec<Optimizer>,
    coeff: AceCoefficients,
    step: u64,
    trunk_forward_calls: Cell<u64>,
    trunk_backward_calls: Cell<u64>,
}

impl SmocState {
    /// Heads must be single affine layers from the trunk's output width to a
    /// shared label width.
    pub fn new(
        trunk: MlpParams,
        heads: Vec<MlpParams>,
        optimizer: OptimizerConfig,
        coeff: AceCoefficients,
    ) -> Result<Self> {
        if heads.is_empty() || coeff.k() != heads.len() {
            return Err(AceError::config(
                "k",
                format!(
                    "coefficients are for {} heads but {} were given",
                    coeff.k(),
                    heads.len()
                ),
            ));
        }
        let width = trunk.spec().output_width();
        let labels = heads[0].spec().output_width();
        if let Some(h) = heads
            .iter()
            .find(|h| h.spec().layer_sizes() != [width, labels])
        {
            return Err(AceError::config(
                "heads",
                format!(
                    "each head must be a single {width}->{labels} layer, found {:?}",
                    h.spec().layer_sizes()
                ),
            ));
        }
        let trunk_opt = Optimizer::new(optimizer, &trunk)?;
        let head_opts = heads
            .iter()
            .map(|h| Optimizer::new(optimizer, h))
            .collect::<Result<_>>()?;
        Ok(SmocState {
            trunk,
            heads,
            trunk_opt,
            head_opts,
            coeff,
            step: 0,
            trunk_forward_calls: Cell::new(0),
            trunk_backward_calls: Cell::new(0),
        })
    }

    /// A ReLU-output trunk with the given layer sizes and `coeff.k()` heads
    /// onto `classes` labels. The trunk is seeded from `(seed, Init, 0)` and
    /// head `k` from `(seed, Init, k + 1)`.
    pub fn init(
        trunk_sizes: Vec<usize>,
        classes: usize,
        optimizer: OptimizerConfig,
        coeff: AceCoefficients,
        seed: u64,
    ) -> Result<Self> {
        let trunk_spec = MlpSpec::trunk(trunk_sizes)?;
        let head_spec = MlpSpec::new(vec![trunk_spec.output_width(), classes])?;
        let trunk = init_mlp(&trunk_spec, &mut SeededRng::derive(seed, Stream::Init, 0));
        let heads = (0..coeff.k())
            .map(|k| {
                init_mlp(
                    &head_spec,
                    &mut SeededRng::derive(seed, Stream::Init, k as u64 + 1),
                )
            })
            .collect();
        Self::new(trunk, heads, optimizer, coeff)
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn trunk(&self) -> &MlpParams {
        &self.trunk
    }

    pub fn heads(&self) -> &[MlpParams] {
        &self.heads
    }

    pub fn coeff(&self) -> &AceCoefficients {
        &self.coeff
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn trunk_forward_calls(&self) -> u64 {
        self.trunk_forward_calls.get()
    }

    pub fn trunk_backward_calls(&self) -> u64 {
        self.trunk_backward_calls.get()
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.heads.iter().map(MlpParams::param_count).sum::<usize>()
    }

    /// Parameters added over a single-head network: `|θ_head| (K - 1)`.
    pub fn head_param_overhead(&self) -> usize {
        self.heads[0].param_count() * (self.k() - 1)
    }

    /// One trunk pass shared by all heads.
    pub fn smoc_forward(&self, x: ArrayView2<'_, f64>) -> Result<SmocForward> {
        let (z, trunk_cache) = self.trunk.forward(x)?;
        self.trunk_forward_calls
            .set(self.trunk_forward_calls.get() + 1);
        let mut q = Vec::with_capacity(self.k());
        let mut head_caches = Vec::with_capacity(self.k());
        for h in &self.heads {
            let (logits, cache) = h.forward(z.view())?;
            q.push(softmax_rows(logits.view())?);
            head_caches.push(cache);
        }
        Ok(SmocForward {
            z,
            q,
            trunk_cache,
            head_caches,
        })
    }

    /// Gradients of every head's loss and of the trunk under the mean of
    /// head losses, with one trunk forward and one trunk backward.
    pub fn smoc_gradients(
        &self,
        x: ArrayView2<'_, f64>,
        p: ArrayView2<'_, f64>,
    ) -> Result<SmocGrads> {
        if x.nrows() != p.nrows() || x.nrows() == 0 {
            return Err(AceError::dim(format!(
                "{} feature rows but {} labels",
                x.nrows(),
                p.nrows()
            )));
        }
        let fwd = self.smoc_forward(x)?;
        let mut acc = TrunkGradAccumulator::new(self.k());
        let mut heads = Vec::with_capacity(self.k());
        let mut z_grads = Vec::with_capacity(self.k());
        let mut losses = Vec::with_capacity(self.k());
        for (k, h) in self.heads.iter().enumerate() {
            losses.push(ace_loss_batch(p, &fwd.q, k, &self.coeff)?);
            let g = ace_grad_logits_batch(p, &fwd.q, k, &self.coeff)?;
            let (hg, dz) = h.backward(&fwd.head_caches[k], g.view())?;
            acc.add(&dz)?;
            heads.push(hg);
            z_grads.push(dz);
        }
        let dz = acc.finalize()?;
        let trunk = self.trunk.backward_params(&fwd.trunk_cache, dz.view())?;
        self.trunk_backward_calls
            .set(self.trunk_backward_calls.get() + 1);
        Ok(SmocGrads {
            trunk,
            heads,
            z_grads,
            losses,
        })
    }

    /// Compute [`SmocState::smoc_gradients`] and apply them to the trunk and
    /// every head. Returns the per-head batch losses.
    pub fn smoc_train_step(
        &mut self,
        x: ArrayView2<'_, f64>,
        p: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>> {
        let grads = self.smoc_gradients(x, p)?;
        for ((h, opt), g) in self
            .heads
            .iter_mut()
            .zip(&mut self.head_opts)
            .zip(&grads.heads)
        {
            opt.step(h, g)?;
        }
        self.trunk_opt.step(&mut self.trunk, &grads.trunk)?;
        self.step += 1;
        Ok(grads.losses)
    }

    /// Mean (or α-weighted mean) of the head distributions.
    pub fn smoc_predict(&self, x: ArrayView2<'_, f64>) -> Result<Matrix> {
        let fwd = self.smoc_forward(x)?;
        Ok(weighted_batch_mean(&fwd.q, &self.coeff))
    }

    pub fn smoc_predict_one(&self, x: ArrayView1<'_, f64>) -> Result<ProbVector> {
        let row = self.smoc_predict(x.insert_axis(Axis(0)))?.row(0).to_owned();
        ProbVector::new(row)
    }

    const MAGIC: &'static [u8; 8] = b"ACESMOC1";

    /// `b"ACESMOC1"`, u32 LE head count, the trunk checkpoint, then one
    /// checkpoint per head (see [`MlpParams::write_checkpoint`]).
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.k() as u32).to_le_bytes())?;
        self.trunk.write_checkpoint(&mut w)?;
        for h in &self.heads {
            h.write_checkpoint(&mut w)?;
        }
        Ok(())
    }

    /// Read back `(trunk, heads)` written by [`SmocState::write_checkpoint`].
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(MlpParams, Vec<MlpParams>)> {
        let bad = |what: &str| AceError::InvalidInput(format!("checkpoint: {what}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("missing header"))?;
        if &magic != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let mut count = [0u8; 4];
        r.read_exact(&mut count)
            .map_err(|_| bad("truncated header"))?;
        let k = u32::from_le_bytes(count) as usize;
        if k == 0 || k > 1 << 16 {
            return Err(bad("implausible head count"));
        }
        let trunk = MlpParams::read_checkpoint(&mut r)?;
        let heads = (0..k)
            .map(|_| MlpParams::read_checkpoint(&mut r))
            .collect::<Result<_>>()?;
        Ok((trunk, heads))
    }
}
