//! The two-modality model: frozen linear encoder stubs feeding a single-head
//! attention fusion block, followed by layer norm, a GELU feed-forward
//! network, mean pooling and a linear classifier.
//!
//! ```text
//! Z = [z_A; z_V]            (T_A + T_V) × d
//! Q, K, V = Z·W + B
//! S = Q·Kᵀ                  raw attention, not scaled
//! A = softmax(S / √d),  Z' = A·V
//! L1 = LN(Z + Z'),  L2 = LN(L1 + FFN(L1))
//! p = softmax(mean_rows(L2)·W_c + b_c)
//! ```

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    self, add_row, gelu, gelu_backward, layer_norm, layer_norm_backward, matmul, matmul_backward, matmul_nt, matmul_tn,
    row_softmax, row_softmax_backward, LayerNormCache, Tensor,
};

/// Shape of a model instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Columns of a raw per-token input.
    pub raw_dim: usize,
    pub d: usize,
    pub d_ff: usize,
    pub t_a: usize,
    pub t_v: usize,
    pub n_classes: usize,
}

impl ModelDims {
    /// Dimensions with the conventional `d_ff = 4d`.
    pub fn new(raw_dim: usize, d: usize, t_a: usize, t_v: usize, n_classes: usize) -> Self {
        Self { raw_dim, d, d_ff: 4 * d, t_a, t_v, n_classes }
    }

    pub fn tokens(&self) -> usize {
        self.t_a + self.t_v
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_a == 0 || self.t_v == 0 {
            return Err(Error::DegenerateModality { t_a: self.t_a, t_v: self.t_v });
        }
        if self.d == 0 || self.d_ff == 0 || self.raw_dim == 0 {
            return Err(Error::Parameter(format!("zero-width dimension in {self:?}")));
        }
        if self.n_classes < 2 {
            return Err(Error::Parameter(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        Ok(())
    }
}

/// Parameter groups of the fusion module, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    WQ,
    WK,
    WV,
    BQ,
    BK,
    BV,
    Ln1Gamma,
    Ln1Beta,
    Ln2Gamma,
    Ln2Beta,
    FfnW1,
    FfnB1,
    FfnW2,
    FfnB2,
    ClfW,
    ClfB,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 16] = [
        ParamGroup::WQ,
        ParamGroup::WK,
        ParamGroup::WV,
        ParamGroup::BQ,
        ParamGroup::BK,
        ParamGroup::BV,
        ParamGroup::Ln1Gamma,
        ParamGroup::Ln1Beta,
        ParamGroup::Ln2Gamma,
        ParamGroup::Ln2Beta,
        ParamGroup::FfnW1,
        ParamGroup::FfnB1,
        ParamGroup::FfnW2,
        ParamGroup::FfnB2,
        ParamGroup::ClfW,
        ParamGroup::ClfB,
    ];

    /// The groups adapted at test time.
    pub const ATTENTION: [ParamGroup; 6] =
        [ParamGroup::WQ, ParamGroup::WK, ParamGroup::WV, ParamGroup::BQ, ParamGroup::BK, ParamGroup::BV];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::WQ => "w_q",
            ParamGroup::WK => "w_k",
            ParamGroup::WV => "w_v",
            ParamGroup::BQ => "b_q",
            ParamGroup::BK => "b_k",
            ParamGroup::BV => "b_v",
            ParamGroup::Ln1Gamma => "ln1_gamma",
            ParamGroup::Ln1Beta => "ln1_beta",
            ParamGroup::Ln2Gamma => "ln2_gamma",
            ParamGroup::Ln2Beta => "ln2_beta",
            ParamGroup::FfnW1 => "ffn_w1",
            ParamGroup::FfnB1 => "ffn_b1",
            ParamGroup::FfnW2 => "ffn_w2",
            ParamGroup::FfnB2 => "ffn_b2",
            ParamGroup::ClfW => "clf_w",
            ParamGroup::ClfB => "clf_b",
        }
    }

    pub fn from_name(name: &str) -> Option<ParamGroup> {
        ParamGroup::ALL.into_iter().find(|g| g.name() == name)
    }

    pub fn shape(self, dims: &ModelDims) -> (usize, usize) {
        let ModelDims { d, d_ff, n_classes: c, .. } = *dims;
        match self {
            ParamGroup::WQ | ParamGroup::WK | ParamGroup::WV => (d, d),
            ParamGroup::BQ | ParamGroup::BK | ParamGroup::BV => (1, d),
            ParamGroup::Ln1Gamma | ParamGroup::Ln1Beta | ParamGroup::Ln2Gamma | ParamGroup::Ln2Beta => (1, d),
            ParamGroup::FfnW1 => (d, d_ff),
            ParamGroup::FfnB1 => (1, d_ff),
            ParamGroup::FfnW2 => (d_ff, d),
            ParamGroup::FfnB2 => (1, d),
            ParamGroup::ClfW => (d, c),
            ParamGroup::ClfB => (1, c),
        }
    }
}

/// All fusion parameters plus the mask of groups that may change.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    dims: ModelDims,
    groups: Vec<Tensor>,
    tunable: [bool; 16],
}

impl FusionParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let groups = ParamGroup::ALL
            .iter()
            .map(|g| {
                let (r, c) = g.shape(&dims);
                Tensor::zeros(r, c)
            })
            .collect();
        let mut params = Self { dims, groups, tunable: [false; 16] };
        params.set_tunable(&ParamGroup::ATTENTION);
        params
    }

    /// Random initialisation: Q/K/V and FFN weights scaled by `1/√fan_in`,
    /// layer-norm gains one, biases zero. Only the attention groups are
    /// marked tunable.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let mut params = Self::zeros(dims);
        for g in
            [ParamGroup::WQ, ParamGroup::WK, ParamGroup::WV, ParamGroup::FfnW1, ParamGroup::FfnW2, ParamGroup::ClfW]
        {
            let t = params.get_mut(g);
            let std = 1.0 / (t.rows() as f64).sqrt();
            for v in t.data.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = z * std;
            }
        }
        for g in [ParamGroup::Ln1Gamma, ParamGroup::Ln2Gamma] {
            params.get_mut(g).data.fill(1.0);
        }
        params
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    #[inline]
    pub fn get(&self, g: ParamGroup) -> &Tensor {
        &self.groups[g.index()]
    }

    #[inline]
    pub fn get_mut(&mut self, g: ParamGroup) -> &mut Tensor {
        &mut self.groups[g.index()]
    }

    pub fn is_tunable(&self, g: ParamGroup) -> bool {
        self.tunable[g.index()]
    }

    /// Replaces the tunable mask with exactly `groups`.
    pub fn set_tunable(&mut self, groups: &[ParamGroup]) {
        self.tunable = [false; 16];
        for g in groups {
            self.tunable[g.index()] = true;
        }
    }

    pub fn set_all_tunable(&mut self) {
        self.tunable = [true; 16];
    }

    pub fn tunable_groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL.into_iter().filter(|g| self.is_tunable(*g)).collect()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.groups {
            t.zero_grad();
        }
    }

    /// Overwrites the grad buffers; frozen groups get zeros.
    pub fn store_grads(&mut self, grads: &ParamGrads) {
        for g in ParamGroup::ALL {
            let tunable = self.is_tunable(g);
            let t = self.get_mut(g);
            if tunable {
                t.grad.copy_from_slice(&grads.groups[g.index()]);
            } else {
                t.grad.fill(0.0);
            }
        }
    }

    /// Flattened grads of the tunable groups in storage order.
    pub fn flat_tunable_grad(&self) -> Vec<f64> {
        self.tunable_groups().into_iter().flat_map(|g| self.get(g).grad.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().all(Tensor::is_finite)
    }

    /// True when every value (not grad) matches bitwise.
    pub fn values_bitwise_eq(&self, other: &FusionParams) -> bool {
        self.dims == other.dims
            && self.groups.iter().zip(&other.groups).all(|(a, b)| {
                a.data.len() == b.data.len() && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Per-group gradient accumulator, aligned with [`ParamGroup::ALL`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub groups: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros(dims: &ModelDims) -> Self {
        let groups = ParamGroup::ALL
            .iter()
            .map(|g| {
                let (r, c) = g.shape(dims);
                vec![0.0; r * c]
            })
            .collect();
        Self { groups }
    }

    pub fn get(&self, g: ParamGroup) -> &[f64] {
        &self.groups[g.index()]
    }

    fn accumulate(&mut self, g: ParamGroup, t: &Tensor) {
        for (a, b) in self.groups[g.index()].iter_mut().zip(&t.data) {
            *a += b;
        }
    }
}

/// Frozen linear map from raw per-token inputs to token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStub {
    pub proj: Tensor,
}

impl EncoderStub {
    pub fn new(proj: Tensor) -> Self {
        Self { proj }
    }

    /// Gaussian projection with entries `N(0, 1/raw_dim)`.
    pub fn random<R: Rng + ?Sized>(raw_dim: usize, d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (raw_dim as f64).sqrt();
        let data = (0..raw_dim * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::new(Tensor::from_vec(raw_dim, d, data).expect("shape"))
    }

    pub fn encode(&self, raw: &Tensor) -> Result<Tensor> {
        if raw.cols() != self.proj.rows() {
            return Err(Error::dim("encode", raw.shape(), self.proj.shape()));
        }
        matmul(raw, &self.proj)
    }
}

/// Encoded tokens for a batch of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub tokens_a: Vec<Tensor>,
    pub tokens_v: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
}

impl TokenBatch {
    pub fn new(tokens_a: Vec<Tensor>, tokens_v: Vec<Tensor>, labels: Option<Vec<usize>>) -> Result<Self> {
        if tokens_a.len() != tokens_v.len() {
            return Err(Error::Contract(format!(
                "{} audio samples but {} video samples",
                tokens_a.len(),
                tokens_v.len()
            )));
        }
        if let (Some(a0), Some(v0)) = (tokens_a.first(), tokens_v.first()) {
            if a0.cols() != v0.cols() {
                return Err(Error::dim("token batch", a0.shape(), v0.shape()));
            }
            for (a, v) in tokens_a.iter().zip(&tokens_v) {
                if a.shape() != a0.shape() {
                    return Err(Error::dim("token batch (A)", a0.shape(), a.shape()));
                }
                if v.shape() != v0.shape() {
                    return Err(Error::dim("token batch (V)", v0.shape(), v.shape()));
                }
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != tokens_a.len() {
                return Err(Error::Contract(format!("{} labels for {} samples", labels.len(), tokens_a.len())));
            }
        }
        Ok(Self { tokens_a, tokens_v, labels })
    }

    pub fn len(&self) -> usize {
        self.tokens_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens_a.is_empty()
    }

    pub fn check_labels(&self, n_classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
                return Err(Error::Contract(format!("label {bad} outside [0, {n_classes})")));
            }
        }
        Ok(())
    }
}

/// Encoders plus fusion module.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder_a: EncoderStub,
    pub encoder_v: EncoderStub,
    pub fusion: FusionParams,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let encoder_a = EncoderStub::random(dims.raw_dim, dims.d, rng);
        let encoder_v = EncoderStub::random(dims.raw_dim, dims.d, rng);
        let fusion = FusionParams::init(dims, rng);
        Ok(Self { encoder_a, encoder_v, fusion })
    }

    pub fn dims(&self) -> &ModelDims {
        self.fusion.dims()
    }

    /// Runs both encoders over raw per-sample matrices.
    pub fn encode(&self, raw_a: &[Tensor], raw_v: &[Tensor], labels: Option<Vec<usize>>) -> Result<TokenBatch> {
        let tokens_a = raw_a.iter().map(|x| self.encoder_a.encode(x)).collect::<Result<_>>()?;
        let tokens_v = raw_v.iter().map(|x| self.encoder_v.encode(x)).collect::<Result<_>>()?;
        TokenBatch::new(tokens_a, tokens_v, labels)
    }
}

/// Concatenates modality tokens and applies the three affine maps.
pub fn qkv_sample(
    tokens_a: &Tensor,
    tokens_v: &Tensor,
    params: &FusionParams,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let d = params.dims().d;
    if tokens_a.cols() != d {
        return Err(Error::dim("qkv", tokens_a.shape(), params.get(ParamGroup::WQ).shape()));
    }
    let z = tokens_a.vstack(tokens_v)?;
    let q = add_row(&matmul(&z, params.get(ParamGroup::WQ))?, params.get(ParamGroup::BQ))?;
    let k = add_row(&matmul(&z, params.get(ParamGroup::WK))?, params.get(ParamGroup::BK))?;
    let v = add_row(&matmul(&z, params.get(ParamGroup::WV))?, params.get(ParamGroup::BV))?;
    Ok((z, q, k, v))
}

/// `(Q, K, V)` for every sample in the batch.
pub fn qkv(batch: &TokenBatch, params: &FusionParams) -> Result<Vec<(Tensor, Tensor, Tensor)>> {
    batch
        .tokens_a
        .iter()
        .zip(&batch.tokens_v)
        .map(|(a, v)| qkv_sample(a, v, params).map(|(_, q, k, v)| (q, k, v)))
        .collect()
}

/// Unscaled score matrix `Q·Kᵀ`.
pub fn raw_attention(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    if q.shape() != k.shape() {
        return Err(Error::dim("raw_attention", q.shape(), k.shape()));
    }
    matmul_nt(q, k)
}

/// Returns the normalised attention `A = softmax(S/√d)` and `Z' = A·V`.
pub fn attend(scores: &Tensor, v: &Tensor, d: usize) -> Result<(Tensor, Tensor)> {
    if d == 0 {
        return Err(Error::Parameter("attention dimension must be positive".into()));
    }
    let attn = row_softmax(scores, (d as f64).sqrt())?;
    let out = matmul(&attn, v)?;
    Ok((attn, out))
}

/// Everything the backward pass needs from one sample's forward pass.
#[derive(Clone, Debug)]
pub struct SampleTrace {
    pub z: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub scores: Tensor,
    pub attn: Tensor,
    ln1: LayerNormCache,
    l1: Tensor,
    ffn_pre: Tensor,
    ffn_act: Tensor,
    ln2: LayerNormCache,
    pub pooled: Tensor,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Full forward pass for one sample.
pub fn forward_sample(tokens_a: &Tensor, tokens_v: &Tensor, params: &FusionParams) -> Result<SampleTrace> {
    let dims = params.dims();
    let (z, q, k, v) = qkv_sample(tokens_a, tokens_v, params)?;
    let scores = raw_attention(&q, &k)?;
    let (attn, attended) = attend(&scores, &v, dims.d)?;
    let h1 = z.add(&attended)?;
    let (l1, ln1) =
        layer_norm(&h1, params.get(ParamGroup::Ln1Gamma), params.get(ParamGroup::Ln1Beta), tensor::LAYER_NORM_EPS)?;
    let ffn_pre = add_row(&matmul(&l1, params.get(ParamGroup::FfnW1))?, params.get(ParamGroup::FfnB1))?;
    let ffn_act = gelu(&ffn_pre);
    let ffn_out = add_row(&matmul(&ffn_act, params.get(ParamGroup::FfnW2))?, params.get(ParamGroup::FfnB2))?;
    let h2 = l1.add(&ffn_out)?;
    let (l2, ln2) =
        layer_norm(&h2, params.get(ParamGroup::Ln2Gamma), params.get(ParamGroup::Ln2Beta), tensor::LAYER_NORM_EPS)?;
    let pooled = l2.mean_rows();
    let logits_t = add_row(&matmul(&pooled, params.get(ParamGroup::ClfW))?, params.get(ParamGroup::ClfB))?;
    let probs = row_softmax(&logits_t, 1.0)?.data;
    Ok(SampleTrace { z, q, k, v, scores, attn, ln1, l1, ffn_pre, ffn_act, ln2, pooled, logits: logits_t.data, probs })
}

/// Forward pass over every sample of a batch.
pub fn forward(batch: &TokenBatch, params: &FusionParams) -> Result<Vec<SampleTrace>> {
    batch.tokens_a.iter().zip(&batch.tokens_v).map(|(a, v)| forward_sample(a, v, params)).collect()
}

/// Class probabilities and raw attention of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub probs: Vec<f64>,
    pub scores: Tensor,
}

pub fn predict(batch: &TokenBatch, params: &FusionParams) -> Result<Vec<SampleOutput>> {
    Ok(forward(batch, params)?.into_iter().map(|t| SampleOutput { probs: t.probs, scores: t.scores }).collect())
}

/// Maps a gradient w.r.t. the probabilities to one w.r.t. the logits.
pub fn probs_to_logits_grad(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let inner = tensor::dot(probs, d_probs);
    probs.iter().zip(d_probs).map(|(p, g)| p * (g - inner)).collect()
}

/// Reverse pass for one sample.
///
/// `d_logits` is the loss gradient at the classifier output and `d_scores`,
/// when present, an extra gradient injected directly at the raw attention
/// scores (the attention-statistics loss). Only tunable groups accumulate.
pub fn backward_sample(
    trace: &SampleTrace,
    params: &FusionParams,
    d_logits: &[f64],
    d_scores: Option<&Tensor>,
    grads: &mut ParamGrads,
) -> Result<()> {
    let dims = *params.dims();
    let n_tok = trace.z.rows() as f64;
    let tune = |g| params.is_tunable(g);
    let d_logits = Tensor::from_vec(1, dims.n_classes, d_logits.to_vec())?;

    // classifier
    if tune(ParamGroup::ClfB) {
        grads.accumulate(ParamGroup::ClfB, &d_logits);
    }
    let (d_pooled, d_clf_w) = matmul_backward(&trace.pooled, params.get(ParamGroup::ClfW), &d_logits)?;
    if tune(ParamGroup::ClfW) {
        grads.accumulate(ParamGroup::ClfW, &d_clf_w);
    }

    // mean pool
    let mut d_l2 = Tensor::zeros(trace.z.rows(), dims.d);
    for r in 0..d_l2.rows() {
        for (o, g) in d_l2.row_mut(r).iter_mut().zip(&d_pooled.data) {
            *o = g / n_tok;
        }
    }

    // second norm + FFN residual
    let (d_h2, d_g2, d_b2) = layer_norm_backward(&trace.ln2, params.get(ParamGroup::Ln2Gamma), &d_l2);
    if tune(ParamGroup::Ln2Gamma) {
        grads.accumulate(ParamGroup::Ln2Gamma, &d_g2);
    }
    if tune(ParamGroup::Ln2Beta) {
        grads.accumulate(ParamGroup::Ln2Beta, &d_b2);
    }
    if tune(ParamGroup::FfnB2) {
        grads.accumulate(ParamGroup::FfnB2, &d_h2.col_sums());
    }
    let (d_act, d_w2) = matmul_backward(&trace.ffn_act, params.get(ParamGroup::FfnW2), &d_h2)?;
    if tune(ParamGroup::FfnW2) {
        grads.accumulate(ParamGroup::FfnW2, &d_w2);
    }
    let d_pre = gelu_backward(&trace.ffn_pre, &d_act);
    if tune(ParamGroup::FfnB1) {
        grads.accumulate(ParamGroup::FfnB1, &d_pre.col_sums());
    }
    let (d_l1_ffn, d_w1) = matmul_backward(&trace.l1, params.get(ParamGroup::FfnW1), &d_pre)?;
    if tune(ParamGroup::FfnW1) {
        grads.accumulate(ParamGroup::FfnW1, &d_w1);
    }
    let mut d_l1 = d_h2;
    d_l1.add_assign(&d_l1_ffn);

    // first norm + attention residual; Z itself is a frozen input
    let (d_h1, d_g1, d_b1) = layer_norm_backward(&trace.ln1, params.get(ParamGroup::Ln1Gamma), &d_l1);
    if tune(ParamGroup::Ln1Gamma) {
        grads.accumulate(ParamGroup::Ln1Gamma, &d_g1);
    }
    if tune(ParamGroup::Ln1Beta) {
        grads.accumulate(ParamGroup::Ln1Beta, &d_b1);
    }

    // attention
    let (d_attn, d_v) = matmul_backward(&trace.attn, &trace.v, &d_h1)?;
    let mut d_s = row_softmax_backward(&trace.attn, &d_attn, (dims.d as f64).sqrt());
    if let Some(extra) = d_scores {
        if extra.shape() != d_s.shape() {
            return Err(Error::dim("backward d_scores", d_s.shape(), extra.shape()));
        }
        d_s.add_assign(extra);
    }
    let d_q = matmul(&d_s, &trace.k)?;
    let d_k = matmul_tn(&d_s, &trace.q)?;

    for (w, b, dx) in [
        (ParamGroup::WQ, ParamGroup::BQ, &d_q),
        (ParamGroup::WK, ParamGroup::BK, &d_k),
        (ParamGroup::WV, ParamGroup::BV, &d_v),
    ] {
        if tune(w) {
            grads.accumulate(w, &matmul_tn(&trace.z, dx)?);
        }
        if tune(b) {
            grads.accumulate(b, &dx.col_sums());
        }
    }
    Ok(())
}
