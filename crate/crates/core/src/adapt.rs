//! Online test-time adaptation: predict a batch, score it with the selected
//! objective, back-propagate, take one Adam step on the tunable groups, move
//! on. One pass over the stream.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batch_order, Split};
use crate::error::{Error, Result};
use crate::model::{FusionParams, Model, ParamGroup, TokenBatch};
use crate::objective::{self, Diagnostics, Mode, Objective};
use crate::pem;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub mode: Mode,
    /// Size of the reliable class set.
    pub k: usize,
    /// Weight of the bootstrapping term.
    pub lambda: f64,
    pub lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub class_balance_weight: f64,
    /// Global-norm clip on the tunable gradient; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Abpem,
            k: 2,
            lambda: 1.0,
            lr: 1e-4,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            batch_size: 32,
            seed: 0,
            class_balance_weight: 0.0,
            grad_clip: None,
        }
    }
}

impl AdaptConfig {
    /// Rule of thumb for the reliable-set size: 8 from 50 classes, 30 from
    /// 300, otherwise a fifth of the classes but never fewer than two.
    pub fn default_k(n_classes: usize) -> usize {
        match n_classes {
            c if c >= 300 => 30,
            c if c >= 50 => 8,
            c => (c / 5).max(2).min(c),
        }
    }

    /// Step size and batch size used on the built-in synthetic benchmarks,
    /// whose streams are a few hundred batches long.
    pub fn synthetic_bench(mode: Mode, seed: u64) -> Self {
        Self { mode, lr: 3e-3, batch_size: 8, seed, ..Self::default() }
    }

    pub fn objective(&self) -> Objective {
        Objective { mode: self.mode, k: self.k, lambda: self.lambda, class_balance_weight: self.class_balance_weight }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.k == 0 || self.k > n_classes {
            return Err(Error::Parameter(format!("k = {} outside [1, {n_classes}]", self.k)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Parameter(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.lr > 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::Parameter("lr and adam_eps must be positive".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Parameter(format!("betas {:?} outside [0, 1)", self.betas)));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moment buffers, one per parameter group (empty for frozen groups).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &FusionParams) -> Self {
        let buffers = || {
            ParamGroup::ALL
                .iter()
                .map(|&g| if params.is_tunable(g) { vec![0.0; params.get(g).len()] } else { Vec::new() })
                .collect::<Vec<_>>()
        };
        Self { m: buffers(), v: buffers(), step: 0 }
    }
}

/// One Adam update of `theta` in place, `t` being the 1-based step.
pub fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    (b1, b2): (f64, f64),
    eps: f64,
) {
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one Adam step to every tunable group using the grad buffers
/// filled by [`objective::backward`]. Frozen groups are untouched.
pub fn adam_step(params: &mut FusionParams, state: &mut AdamState, config: &AdaptConfig) -> Result<()> {
    if state.m.len() != ParamGroup::ALL.len() {
        return Err(Error::Contract("optimizer state has wrong group count".into()));
    }
    for g in params.tunable_groups() {
        if state.m[g.index()].len() != params.get(g).len() || state.v[g.index()].len() != params.get(g).len() {
            return Err(Error::Contract(format!(
                "optimizer buffers for {} do not match parameter shape {:?}",
                g.name(),
                params.get(g).shape()
            )));
        }
    }
    let scale = match config.grad_clip {
        Some(max_norm) => {
            let norm = params.flat_tunable_grad().iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    for g in params.tunable_groups() {
        let t = params.get_mut(g);
        let grad: Vec<f64> = t.grad.iter().map(|x| x * scale).collect();
        adam_update(
            &mut t.data,
            &grad,
            &mut state.m[g.index()],
            &mut state.v[g.index()],
            state.step,
            config.lr,
            config.betas,
            config.adam_eps,
        );
    }
    Ok(())
}

/// Loss value and diagnostics of `config`'s objective on one batch.
pub fn total_loss(batch: &TokenBatch, params: &FusionParams, config: &AdaptConfig) -> Result<(f64, Diagnostics)> {
    let (graph, diag) = objective::build(batch, params, &config.objective(), None)?;
    Ok((graph.value(), diag))
}

/// One line of the metrics trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub mode: Mode,
    pub n: usize,
    pub loss_total: Option<f64>,
    pub loss_ab: Option<f64>,
    pub loss_pem: Option<f64>,
    pub gap_v: f64,
    pub gap_a: f64,
    pub acc: Option<f64>,
    pub mean_max_prob: f64,
    pub wall_ms: f64,
}

impl BatchRecord {
    /// The record with its wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> BatchRecord {
        BatchRecord { wall_ms: 0.0, ..self.clone() }
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    /// `(sample index in the split, probabilities)` in stream order, logged
    /// before the update of the batch they belong to.
    pub predictions: Vec<(usize, Vec<f64>)>,
    pub records: Vec<BatchRecord>,
    pub model: Model,
}

impl AdaptOutcome {
    /// Fraction of logged predictions whose argmax matches the split label.
    pub fn accuracy(&self, split: &Split) -> Option<f64> {
        let mut correct = 0usize;
        for (i, p) in &self.predictions {
            let y = split.samples[*i].label?;
            correct += usize::from(pem::argmax(p) == y);
        }
        Some(correct as f64 / self.predictions.len().max(1) as f64)
    }
}

fn batch_accuracy(probs: &[Vec<f64>], labels: Option<&Vec<usize>>) -> Option<f64> {
    let labels = labels?;
    let correct = probs.iter().zip(labels).filter(|(p, &y)| pem::argmax(p) == y).count();
    Some(correct as f64 / probs.len() as f64)
}

/// Runs one adaptation pass over `stream`, starting from `model`.
///
/// Batch order comes from the `order` substream of `config.seed`. Labels are
/// read only to fill the `acc` field of the trace.
pub fn adapt_stream(stream: &Split, model: &Model, config: &AdaptConfig) -> Result<AdaptOutcome> {
    if stream.is_empty() {
        return Err(Error::Contract("empty test stream".into()));
    }
    let dims = *model.dims();
    config.validate(dims.n_classes)?;
    let mut model = model.clone();
    let mut state = AdamState::new(&model.fusion);
    let objective = config.objective();
    let mut predictions = Vec::with_capacity(stream.len());
    let mut records = Vec::new();

    for (b, indices) in batch_order(stream.len(), config.batch_size, config.seed)?.into_iter().enumerate() {
        let start = Instant::now();
        let batch = stream.encode(&model, &indices)?;
        let (probs, record) = if config.mode == Mode::Raw {
            let traces = crate::model::forward(&batch, &model.fusion)?;
            let stats: Vec<_> = traces
                .iter()
                .map(|t| crate::bootstrap::block_stats(&t.scores, dims.t_a, dims.t_v))
                .collect::<Result<_>>()?;
            let (gap_v, gap_a) = crate::bootstrap::mean_attention_gap(&stats);
            let probs: Vec<Vec<f64>> = traces.into_iter().map(|t| t.probs).collect();
            let mean_max_prob =
                probs.iter().map(|p| p.iter().copied().fold(0.0, f64::max)).sum::<f64>() / probs.len() as f64;
            let record = BatchRecord {
                batch: b,
                mode: config.mode,
                n: indices.len(),
                loss_total: None,
                loss_ab: None,
                loss_pem: None,
                gap_v,
                gap_a,
                acc: batch_accuracy(&probs, batch.labels.as_ref()),
                mean_max_prob,
                wall_ms: 0.0,
            };
            (probs, record)
        } else {
            let (graph, diag) = match objective::build(&batch, &model.fusion, &objective, None) {
                Err(e) if e.is_numeric() => return Err(Error::NonFiniteLoss { batch: b }),
                other => other?,
            };
            let probs = graph.probs();
            objective::backward(&graph, &mut model.fusion)?;
            adam_step(&mut model.fusion, &mut state, config)?;
            if !model.fusion.is_finite() {
                return Err(Error::NonFiniteLoss { batch: b });
            }
            let record = BatchRecord {
                batch: b,
                mode: config.mode,
                n: indices.len(),
                loss_total: Some(diag.loss_total),
                loss_ab: Some(diag.loss_ab),
                loss_pem: Some(diag.loss_pem),
                gap_v: diag.gap_v,
                gap_a: diag.gap_a,
                acc: batch_accuracy(&probs, batch.labels.as_ref()),
                mean_max_prob: diag.mean_max_prob,
                wall_ms: 0.0,
            };
            (probs, record)
        };
        predictions.extend(indices.iter().copied().zip(probs));
        records.push(BatchRecord { wall_ms: start.elapsed().as_secs_f64() * 1e3, ..record });
    }
    model.fusion.zero_grad();
    Ok(AdaptOutcome { predictions, records, model })
}

/// Cosine similarity of two gradient vectors.
pub fn cosine(a: &[f64], b: &[f64], name: &'static str) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 {
        return Err(Error::ZeroNorm("reference"));
    }
    if nb == 0.0 {
        return Err(Error::ZeroNorm(name));
    }
    Ok(crate::tensor::dot(a, b) / (na * nb))
}

/// Flattened tunable gradient of a graph at the given parameters.
pub fn flat_gradient(graph: &objective::LossGraph, params: &FusionParams) -> Result<Vec<f64>> {
    let mut p = params.clone();
    objective::backward(graph, &mut p)?;
    Ok(p.flat_tunable_grad())
}

/// Cosine similarity between the supervised cross-entropy gradient and the
/// gradients of principal entropy (`k` from `config`) and full entropy, all
/// at `params` and w.r.t. the tunable groups. Nothing is updated.
pub fn grad_alignment(batch: &TokenBatch, params: &FusionParams, config: &AdaptConfig) -> Result<(f64, f64)> {
    let ce = flat_gradient(&objective::cross_entropy(batch, params)?, params)?;
    let objective_for = |mode| Objective { mode, k: config.k, lambda: 0.0, class_balance_weight: 0.0 };
    let (pem_graph, _) = objective::build(batch, params, &objective_for(Mode::PemOnly), None)?;
    let (em_graph, _) = objective::build(batch, params, &objective_for(Mode::Em), None)?;
    let cos_pem = cosine(&ce, &flat_gradient(&pem_graph, params)?, "principal entropy")?;
    let cos_em = cosine(&ce, &flat_gradient(&em_graph, params)?, "entropy")?;
    Ok((cos_pem, cos_em))
}
