//! Batch objectives over the fusion pipeline and their reverse pass.
//!
//! A [`LossGraph`] records one forward pass together with the gradient seeds
//! each loss term injects: at the classifier logits (entropy terms,
//! cross-entropy) and at the raw attention scores (bootstrapping term).
//! [`backward`] replays the pipeline in reverse and writes parameter
//! gradients into the grad buffers of [`FusionParams`].

use serde::{Deserialize, Serialize};

use crate::bootstrap::{self, Anchors, AttentionStats};
use crate::error::{Error, Result};
use crate::model::{self, backward_sample, FusionParams, ParamGrads, SampleTrace, TokenBatch};
use crate::pem;
use crate::tensor::Tensor;

/// Which loss terms an adaptation run optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// No adaptation.
    Raw,
    /// Full-entropy minimisation (Tent-style baseline).
    Em,
    /// `λ·L_AB + L_PEM`.
    Abpem,
    AbOnly,
    PemOnly,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Raw, Mode::Em, Mode::Abpem, Mode::AbOnly, Mode::PemOnly];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Raw => "raw",
            Mode::Em => "em",
            Mode::Abpem => "abpem",
            Mode::AbOnly => "ab_only",
            Mode::PemOnly => "pem_only",
        }
    }

    pub fn uses_ab(self) -> bool {
        matches!(self, Mode::Abpem | Mode::AbOnly)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Parameter(format!("unknown mode '{s}'")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss weights and selection for one objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub mode: Mode,
    pub k: usize,
    pub lambda: f64,
    pub class_balance_weight: f64,
}

/// Quantities held constant within a step: the anchor statistics of each
/// sample and its reliable class set.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTargets {
    pub anchors: Vec<Anchors>,
    pub masks: Vec<Vec<bool>>,
}

impl FrozenTargets {
    /// Targets as seen from the current parameters.
    pub fn capture(batch: &TokenBatch, params: &FusionParams, k: usize) -> Result<Self> {
        let traces = model::forward(batch, params)?;
        Self::from_traces(&traces, params, k)
    }

    fn from_traces(traces: &[SampleTrace], params: &FusionParams, k: usize) -> Result<Self> {
        let dims = params.dims();
        let mut anchors = Vec::with_capacity(traces.len());
        let mut masks = Vec::with_capacity(traces.len());
        for t in traces {
            anchors.push(bootstrap::block_stats(&t.scores, dims.t_a, dims.t_v)?.anchors());
            masks.push(pem::reliable_mask(&t.probs, k)?);
        }
        Ok(Self { anchors, masks })
    }
}

/// Per-batch diagnostics reported alongside a loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub loss_total: f64,
    /// Bootstrapping term before weighting.
    pub loss_ab: f64,
    /// Entropy term: principal entropy, or full entropy in `em` mode.
    pub loss_pem: f64,
    pub loss_class_balance: f64,
    pub gap_v: f64,
    pub gap_a: f64,
    pub mean_max_prob: f64,
}

/// One forward pass plus the gradient seeds of a scalar loss.
#[derive(Clone, Debug)]
pub struct LossGraph {
    /// `1 × 1` loss value.
    pub output: Tensor,
    pub traces: Vec<SampleTrace>,
    d_logits: Vec<Vec<f64>>,
    d_scores: Vec<Option<Tensor>>,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.output.data[0]
    }

    pub fn probs(&self) -> Vec<Vec<f64>> {
        self.traces.iter().map(|t| t.probs.clone()).collect()
    }

    /// Per-sample gradient seeds on the raw score matrices; `None` when the
    /// objective has no bootstrapping term.
    pub fn score_grads(&self) -> &[Option<Tensor>] {
        &self.d_scores
    }
}

/// Reverse pass: fills the grad buffer of every tunable group with
/// `∂loss/∂param`; frozen groups end with zero grad. Samples are reduced in
/// batch order.
pub fn backward(graph: &LossGraph, params: &mut FusionParams) -> Result<()> {
    if graph.output.shape() != (1, 1) {
        return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", graph.output.shape())));
    }
    let mut grads = ParamGrads::zeros(params.dims());
    for ((trace, dl), ds) in graph.traces.iter().zip(&graph.d_logits).zip(&graph.d_scores) {
        backward_sample(trace, params, dl, ds.as_ref(), &mut grads)?;
    }
    params.store_grads(&grads);
    Ok(())
}

fn batch_stats(traces: &[SampleTrace], params: &FusionParams) -> Result<Vec<AttentionStats>> {
    let dims = params.dims();
    traces.iter().map(|t| bootstrap::block_stats(&t.scores, dims.t_a, dims.t_v)).collect()
}

/// Builds the loss graph of `objective` on `batch`.
///
/// With `frozen = None` the anchors and reliable sets come from this forward
/// pass, which is the training-time behaviour. Passing targets captured at
/// another parameter point evaluates the same surrogate there; the
/// finite-difference oracle relies on this.
pub fn build(
    batch: &TokenBatch,
    params: &FusionParams,
    objective: &Objective,
    frozen: Option<&FrozenTargets>,
) -> Result<(LossGraph, Diagnostics)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if objective.mode == Mode::Raw {
        return Err(Error::Contract("raw mode defines no loss".into()));
    }
    let dims = *params.dims();
    let traces = model::forward(batch, params)?;
    let n = traces.len() as f64;
    let owned;
    let frozen = match frozen {
        Some(f) => f,
        None => {
            owned = FrozenTargets::from_traces(&traces, params, objective.k)?;
            &owned
        }
    };
    if frozen.anchors.len() != traces.len() {
        return Err(Error::Contract("frozen targets do not match batch".into()));
    }
    let stats = batch_stats(&traces, params)?;
    let probs: Vec<Vec<f64>> = traces.iter().map(|t| t.probs.clone()).collect();
    let mut d_probs = vec![vec![0.0; dims.n_classes]; traces.len()];
    let mut d_scores: Vec<Option<Tensor>> = vec![None; traces.len()];
    let mut diag = Diagnostics::default();

    // attention bootstrapping
    let mut ab = 0.0;
    for (s, a) in stats.iter().zip(&frozen.anchors) {
        ab += bootstrap::ab_loss_against(s, a)?;
    }
    ab /= n;
    diag.loss_ab = ab;
    let ab_weight = match objective.mode {
        Mode::Abpem | Mode::AbOnly => objective.lambda,
        _ => 0.0,
    };
    if ab_weight != 0.0 {
        for (i, (s, a)) in stats.iter().zip(&frozen.anchors).enumerate() {
            let g = bootstrap::ab_loss_grad(s, a);
            d_scores[i] = Some(bootstrap::scores_grad(&traces[i].scores, dims.t_a, dims.t_v, &g, ab_weight / n)?);
        }
    }

    // entropy term
    let entropy_term = match objective.mode {
        Mode::Em => {
            for (dp, p) in d_probs.iter_mut().zip(&probs) {
                let g = pem::masked_entropy_grad(p, &vec![true; p.len()]);
                dp.iter_mut().zip(g).for_each(|(a, b)| *a += b / n);
            }
            Some(pem::em_loss(&probs)?)
        }
        Mode::Abpem | Mode::PemOnly => {
            let mut total = 0.0;
            for ((dp, p), mask) in d_probs.iter_mut().zip(&probs).zip(&frozen.masks) {
                total += pem::masked_entropy(p, mask);
                let g = pem::masked_entropy_grad(p, mask);
                dp.iter_mut().zip(g).for_each(|(a, b)| *a += b / n);
            }
            Some(total / n)
        }
        Mode::AbOnly | Mode::Raw => None,
    };
    diag.loss_pem = match entropy_term {
        Some(v) => v,
        None => pem::pem_loss(&probs, objective.k)?,
    };

    let mut total = ab_weight * ab + entropy_term.unwrap_or(0.0);
    if objective.class_balance_weight != 0.0 {
        let cb = pem::class_balance_loss(&probs)?;
        diag.loss_class_balance = cb;
        total += objective.class_balance_weight * cb;
        for (dp, g) in d_probs.iter_mut().zip(pem::class_balance_grad(&probs)) {
            dp.iter_mut().zip(g).for_each(|(a, b)| *a += objective.class_balance_weight * b);
        }
    }
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {total}")));
    }

    diag.loss_total = total;
    (diag.gap_v, diag.gap_a) = bootstrap::mean_attention_gap(&stats);
    diag.mean_max_prob = probs.iter().map(|p| p.iter().copied().fold(0.0, f64::max)).sum::<f64>() / n;

    let d_logits = probs.iter().zip(&d_probs).map(|(p, g)| model::probs_to_logits_grad(p, g)).collect();
    let graph = LossGraph { output: Tensor::scalar(total), traces, d_logits, d_scores };
    Ok((graph, diag))
}

/// Scalar value of the surrogate at `params` with the given targets held
/// fixed. This is the function whose gradient [`backward`] computes.
pub fn value_with_targets(
    batch: &TokenBatch,
    params: &FusionParams,
    objective: &Objective,
    frozen: &FrozenTargets,
) -> Result<f64> {
    Ok(build(batch, params, objective, Some(frozen))?.0.value())
}

/// Mean cross-entropy against the batch labels.
pub fn cross_entropy(batch: &TokenBatch, params: &FusionParams) -> Result<LossGraph> {
    let labels = batch.labels.as_ref().ok_or_else(|| Error::Contract("cross-entropy needs labels".into()))?;
    batch.check_labels(params.dims().n_classes)?;
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let traces = model::forward(batch, params)?;
    let n = traces.len() as f64;
    let mut total = 0.0;
    let mut d_logits = Vec::with_capacity(traces.len());
    for (t, &y) in traces.iter().zip(labels) {
        // log-softmax from the logits keeps tiny probabilities exact
        let max = t.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - t.logits[y];
        let mut g: Vec<f64> = t.probs.iter().map(|p| p / n).collect();
        g[y] -= 1.0 / n;
        d_logits.push(g);
    }
    let total = total / n;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("cross-entropy evaluated to {total}")));
    }
    let d_scores = vec![None; traces.len()];
    Ok(LossGraph { output: Tensor::scalar(total), traces, d_logits, d_scores })
}

impl LossGraph {
    /// The same graph with every seed multiplied by `factor`.
    pub fn scaled(mut self, factor: f64) -> LossGraph {
        self.output.data[0] *= factor;
        for g in &mut self.d_logits {
            g.iter_mut().for_each(|x| *x *= factor);
        }
        for s in self.d_scores.iter_mut().flatten() {
            *s = s.scale(factor);
        }
        self
    }
}
