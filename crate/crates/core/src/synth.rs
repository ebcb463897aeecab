//! Synthetic two-modality benchmark: latent class centroids routed into
//! audio-like and video-like token matrices, test-time corruptions with five
//! severity levels, supervised pretraining, and accuracy.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapt::{adam_update, AdaptConfig};
use crate::data::{RawSample, Split};
use crate::error::{Error, Result};
use crate::model::{self, Model, ModelDims, ParamGroup};
use crate::objective;
use crate::pem::argmax;
use crate::rng;
use crate::tensor::Tensor;

/// Corruption magnitude per unit of severity, by kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeverityScale {
    /// Noise std as a multiple of the modality's input std.
    pub gaussian_noise: f64,
    /// Offset length as a multiple of the input std.
    pub shift: f64,
    /// Relative gain change.
    pub scale: f64,
    /// Probability of zeroing a token.
    pub dropout_tokens: f64,
    /// Mixing weight toward the token mean.
    pub blur_smooth: f64,
}

impl Default for SeverityScale {
    fn default() -> Self {
        Self { gaussian_noise: 0.3, shift: 0.3, scale: 0.25, dropout_tokens: 0.15, blur_smooth: 0.18 }
    }
}

/// Everything needed to regenerate a benchmark from a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub name: String,
    pub n_classes: usize,
    pub latent_dim: usize,
    pub t_a: usize,
    pub t_v: usize,
    /// Width of raw per-token inputs and of token embeddings.
    pub d: usize,
    /// Std of per-token jitter.
    pub token_jitter: f64,
    /// Std of the per-sample latent perturbation around its centroid.
    pub latent_noise: f64,
    /// Scale of the class centroids.
    pub centroid_scale: f64,
    /// Std of the fixed per-position token offsets.
    pub position_scale: f64,
    /// Share of the class signal routed to the video modality.
    pub rho: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub severity: SeverityScale,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self::preset("kin-like").expect("built-in preset")
    }
}

impl BenchConfig {
    pub const PRESETS: [&'static str; 3] = ["kin-like", "vgg-like", "toy"];

    /// Built-in presets: `kin-like` (video carries more signal), `vgg-like`
    /// (audio carries more) and `toy` (five balanced classes).
    pub fn preset(name: &str) -> Result<Self> {
        let base = BenchConfig {
            name: name.to_string(),
            n_classes: 10,
            latent_dim: 8,
            t_a: 4,
            t_v: 4,
            d: 8,
            token_jitter: 0.3,
            latent_noise: 0.3,
            centroid_scale: 1.5,
            position_scale: 0.5,
            rho: 0.5,
            n_train: 2000,
            n_test: 2000,
            severity: SeverityScale::default(),
        };
        match name {
            "kin-like" => Ok(BenchConfig { rho: 0.7, ..base }),
            "vgg-like" => Ok(BenchConfig { rho: 0.3, ..base }),
            "toy" => Ok(BenchConfig { n_classes: 5, rho: 0.5, ..base }),
            other => Err(Error::Parameter(format!("unknown preset '{other}' (expected one of {:?})", Self::PRESETS))),
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims::new(self.d, self.d, self.t_a, self.t_v, self.n_classes)
    }

    fn validate(&self) -> Result<()> {
        if self.t_a == 0 || self.t_v == 0 {
            return Err(Error::Parameter(format!("zero tokens: t_a = {}, t_v = {}", self.t_a, self.t_v)));
        }
        if self.d == 0 || self.latent_dim == 0 || self.n_classes < 2 {
            return Err(Error::Parameter("degenerate benchmark dimensions".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Parameter(format!("rho = {} outside [0, 1]", self.rho)));
        }
        Ok(())
    }
}

/// Benchmark config plus the random structure drawn from its seed.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSpec {
    pub config: BenchConfig,
    pub seed: u64,
    pub centroids: Tensor,
    pub map_a: Tensor,
    pub map_v: Tensor,
    pub positions_a: Tensor,
    pub positions_v: Tensor,
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

impl LatentSpec {
    pub fn new(config: BenchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::substream(seed, "spec");
        let c = &config;
        let centroids = gaussian(c.n_classes, c.latent_dim, c.centroid_scale, &mut rng);
        let map_std = 1.0 / (c.latent_dim as f64).sqrt();
        let map_a = gaussian(c.latent_dim, c.d, map_std, &mut rng);
        let map_v = gaussian(c.latent_dim, c.d, map_std, &mut rng);
        let positions_a = gaussian(c.t_a, c.d, c.position_scale, &mut rng);
        let positions_v = gaussian(c.t_v, c.d, c.position_scale, &mut rng);
        Ok(Self { config, seed, centroids, map_a, map_v, positions_a, positions_v })
    }

    pub fn min_centroid_distance(&self) -> f64 {
        let c = self.centroids.rows();
        let mut best = f64::INFINITY;
        for i in 0..c {
            for j in i + 1..c {
                let d: f64 =
                    self.centroids.row(i).iter().zip(self.centroids.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                best = best.min(d.sqrt());
            }
        }
        best
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RawSample> {
        let c = &self.config;
        let label = rng.random_range(0..c.n_classes);
        let mut h = Tensor::from_vec(1, c.latent_dim, self.centroids.row(label).to_vec())?;
        h.add_assign(&gaussian(1, c.latent_dim, c.latent_noise, rng));
        let tokens = |weight: f64, map: &Tensor, pos: &Tensor, rng: &mut R| -> Result<Tensor> {
            let signal = model_row(&h.scale(weight), map)?;
            let mut out = pos.clone();
            for r in 0..out.rows() {
                for (o, s) in out.row_mut(r).iter_mut().zip(&signal) {
                    *o += s;
                }
            }
            out.add_assign(&gaussian(pos.rows(), pos.cols(), c.token_jitter, rng));
            Ok(out)
        };
        let a = tokens(1.0 - c.rho, &self.map_a, &self.positions_a, rng)?;
        let v = tokens(c.rho, &self.map_v, &self.positions_v, rng)?;
        Ok(RawSample { a, v, label: Some(label) })
    }
}

fn model_row(h: &Tensor, map: &Tensor) -> Result<Vec<f64>> {
    Ok(crate::tensor::matmul(h, map)?.data)
}

/// Labelled train and test splits. Deterministic in `spec.seed`.
pub fn generate_dataset(spec: &LatentSpec, n_train: usize, n_test: usize) -> Result<(Split, Split)> {
    let c = spec.config.n_classes;
    if n_train < c || n_test < c {
        return Err(Error::Parameter(format!("need at least {c} samples per split, got {n_train}/{n_test}")));
    }
    let mut rng = rng::substream(spec.seed, rng::DATA);
    let train = (0..n_train).map(|_| spec.sample(&mut rng)).collect::<Result<_>>()?;
    let test = (0..n_test).map(|_| spec.sample(&mut rng)).collect::<Result<_>>()?;
    Ok((Split::new(train), Split::new(test)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    A,
    V,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Shift,
    Scale,
    DropoutTokens,
    BlurSmooth,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::Shift,
        CorruptionKind::Scale,
        CorruptionKind::DropoutTokens,
        CorruptionKind::BlurSmooth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Shift => "shift",
            CorruptionKind::Scale => "scale",
            CorruptionKind::DropoutTokens => "dropout_tokens",
            CorruptionKind::BlurSmooth => "blur_smooth",
        }
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown corruption kind '{s}'")))
    }
}

pub const MAX_SEVERITY: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Corruption {
    pub target: Modality,
    pub kind: CorruptionKind,
    /// 0 is the identity, 1..=5 increasing magnitude.
    pub severity: u8,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, target: Modality, severity: u8) -> Result<Self> {
        if severity > MAX_SEVERITY {
            return Err(Error::Parameter(format!("severity {severity} outside [0, {MAX_SEVERITY}]")));
        }
        Ok(Self { target, kind, severity })
    }
}

impl std::str::FromStr for Corruption {
    type Err = Error;

    /// Parses `KIND:MODALITY:SEVERITY`, e.g. `gaussian_noise:V:5`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let [kind, target, severity] = parts[..] else {
            return Err(Error::Parameter(format!("corruption '{s}' is not KIND:MODALITY:SEVERITY")));
        };
        let target = match target {
            "A" | "a" => Modality::A,
            "V" | "v" => Modality::V,
            other => return Err(Error::Parameter(format!("unknown modality '{other}'"))),
        };
        let severity = severity.parse().map_err(|_| Error::Parameter(format!("bad severity '{severity}'")))?;
        Corruption::new(kind.parse()?, target, severity)
    }
}

impl std::fmt::Display for Corruption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let m = match self.target {
            Modality::A => "A",
            Modality::V => "V",
        };
        write!(f, "{}:{}:{}", self.kind.name(), m, self.severity)
    }
}

fn input_std(split: &Split, target: Modality) -> f64 {
    let values = split.samples.iter().flat_map(|s| match target {
        Modality::A => s.a.data.iter(),
        Modality::V => s.v.data.iter(),
    });
    let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
    for &x in values {
        n += 1.0;
        sum += x;
        sq += x * x;
    }
    if n == 0.0 {
        return 0.0;
    }
    let mean = sum / n;
    (sq / n - mean * mean).max(0.0).sqrt()
}

/// Applies `c` to the target modality of every sample. The other modality
/// is returned bitwise unchanged.
pub fn corrupt(split: &Split, c: &Corruption, scales: &SeverityScale, seed: u64) -> Result<Split> {
    if c.severity > MAX_SEVERITY {
        return Err(Error::Parameter(format!("severity {} outside [0, {MAX_SEVERITY}]", c.severity)));
    }
    let mut out = split.clone();
    if c.severity == 0 || split.is_empty() {
        return Ok(out);
    }
    let s = c.severity as f64;
    let std = input_std(split, c.target);
    let mut rng = rng::substream(seed, rng::CORRUPT);
    let width = split.samples[0].a.cols();
    let offset: Vec<f64> = (0..width)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z / (width as f64).sqrt()
        })
        .collect();
    for sample in &mut out.samples {
        let x = match c.target {
            Modality::A => &mut sample.a,
            Modality::V => &mut sample.v,
        };
        match c.kind {
            CorruptionKind::GaussianNoise => {
                let sigma = scales.gaussian_noise * s * std;
                for v in x.data.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += sigma * z;
                }
            }
            CorruptionKind::Shift => {
                let len = scales.shift * s * std * (width as f64).sqrt();
                for r in 0..x.rows() {
                    for (v, o) in x.row_mut(r).iter_mut().zip(&offset) {
                        *v += len * o;
                    }
                }
            }
            CorruptionKind::Scale => {
                let gain = 1.0 + scales.scale * s;
                x.data.iter_mut().for_each(|v| *v *= gain);
            }
            CorruptionKind::DropoutTokens => {
                let p = (scales.dropout_tokens * s).min(0.95);
                for r in 0..x.rows() {
                    if rng.random::<f64>() < p {
                        x.row_mut(r).fill(0.0);
                    }
                }
            }
            CorruptionKind::BlurSmooth => {
                let alpha = (scales.blur_smooth * s).min(1.0);
                let mean = x.mean_rows();
                for r in 0..x.rows() {
                    for (v, m) in x.row_mut(r).iter_mut().zip(&mean.data) {
                        *v = (1.0 - alpha) * *v + alpha * m;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Fraction of argmax-correct predictions.
pub fn evaluate(predictions: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if predictions.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty set".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Frozen-model predictions for every sample of a split, in split order.
pub fn predict_split(split: &Split, model: &Model) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(split.len());
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(256) {
        let batch = split.encode(model, chunk)?;
        out.extend(model::predict(&batch, &model.fusion)?.into_iter().map(|o| o.probs));
    }
    Ok(out)
}

pub fn split_accuracy(split: &Split, model: &Model) -> Result<f64> {
    let labels = split.labels().ok_or_else(|| Error::Contract("split has unlabeled samples".into()))?;
    evaluate(&predict_split(split, model)?, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 3e-3, batch_size: 32, seed: 0 }
    }
}

/// Supervised cross-entropy training of every fusion group with Adam. The
/// encoders are never touched. The returned model keeps the default
/// test-time mask (attention groups tunable).
pub fn pretrain_fusion(train: &Split, model: &Model, cfg: &PretrainConfig) -> Result<Model> {
    if train.labels().is_none() {
        return Err(Error::Contract("pretraining needs a labelled split".into()));
    }
    let mut model = model.clone();
    let mut fusion = model.fusion.clone();
    fusion.set_all_tunable();
    let mut m: Vec<Vec<f64>> = ParamGroup::ALL.iter().map(|&g| vec![0.0; fusion.get(g).len()]).collect();
    let mut v = m.clone();
    let opt = AdaptConfig::default();
    let mut step = 0u64;
    let mut order_rng = rng::substream(cfg.seed, rng::ORDER);
    let mut indices: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut order_rng);
        for chunk in indices.chunks(cfg.batch_size.max(1)) {
            let batch = train.encode(&model, chunk)?;
            let graph = objective::cross_entropy(&batch, &fusion)?;
            if !graph.value().is_finite() {
                return Err(Error::Numeric(format!("pretraining diverged in epoch {epoch}")));
            }
            objective::backward(&graph, &mut fusion)?;
            step += 1;
            for g in ParamGroup::ALL {
                let t = fusion.get_mut(g);
                let grad = t.grad.clone();
                adam_update(
                    &mut t.data,
                    &grad,
                    &mut m[g.index()],
                    &mut v[g.index()],
                    step,
                    cfg.lr,
                    opt.betas,
                    opt.adam_eps,
                );
            }
        }
        if !fusion.is_finite() {
            return Err(Error::Numeric(format!("pretraining diverged in epoch {epoch}")));
        }
    }
    fusion.zero_grad();
    fusion.set_tunable(&ParamGroup::ATTENTION);
    model.fusion = fusion;
    Ok(model)
}

/// Random model for a benchmark. The key projection starts equal to the
/// query projection, so raw self-attention scores start out favouring each
/// token's own modality.
pub fn init_model(config: &BenchConfig, seed: u64) -> Result<Model> {
    let mut model = Model::init(config.model_dims(), &mut rng::substream(seed, rng::INIT))?;
    let w_q = model.fusion.get(ParamGroup::WQ).clone();
    *model.fusion.get_mut(ParamGroup::WK) = w_q;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(name: &str) -> BenchConfig {
        BenchConfig { n_train: 50, n_test: 50, ..BenchConfig::preset(name).unwrap() }
    }

    #[test]
    fn noiseless_samples_of_a_class_coincide() {
        let cfg = BenchConfig { token_jitter: 0.0, latent_noise: 0.0, ..small("toy") };
        let spec = LatentSpec::new(cfg, 3).unwrap();
        let (train, _) = generate_dataset(&spec, 60, 10).unwrap();
        for c in 0..5 {
            let members: Vec<_> = train.samples.iter().filter(|s| s.label == Some(c)).collect();
            for s in &members[1..] {
                assert_eq!(s.a, members[0].a);
                assert_eq!(s.v, members[0].v);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = LatentSpec::new(small("kin-like"), 11).unwrap();
        let (a, b) = generate_dataset(&spec, 20, 20).unwrap();
        let (c, d) = generate_dataset(&LatentSpec::new(small("kin-like"), 11).unwrap(), 20, 20).unwrap();
        assert!(a.bitwise_eq(&c) && b.bitwise_eq(&d));
        assert!(spec.min_centroid_distance() > 0.0);
    }

    #[test]
    fn too_few_samples_rejected() {
        let spec = LatentSpec::new(small("kin-like"), 1).unwrap();
        assert!(generate_dataset(&spec, 5, 50).is_err());
    }

    #[test]
    fn zero_tokens_rejected() {
        let cfg = BenchConfig { t_a: 0, ..small("toy") };
        assert!(matches!(LatentSpec::new(cfg, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn corruption_parsing() {
        let c: Corruption = "gaussian_noise:V:5".parse().unwrap();
        assert_eq!(c, Corruption::new(CorruptionKind::GaussianNoise, Modality::V, 5).unwrap());
        assert_eq!(c.to_string(), "gaussian_noise:V:5");
        assert!("fog:V:3".parse::<Corruption>().is_err());
        assert!("shift:X:3".parse::<Corruption>().is_err());
        assert!("shift:V:6".parse::<Corruption>().is_err());
        assert!("shift:V".parse::<Corruption>().is_err());
    }

    #[test]
    fn severity_zero_is_identity_and_other_modality_untouched() {
        let spec = LatentSpec::new(small("kin-like"), 2).unwrap();
        let (_, test) = generate_dataset(&spec, 20, 20).unwrap();
        let scales = SeverityScale::default();
        for kind in CorruptionKind::ALL {
            let id = corrupt(&test, &Corruption::new(kind, Modality::V, 0).unwrap(), &scales, 1).unwrap();
            assert!(id.bitwise_eq(&test));
            let c = corrupt(&test, &Corruption::new(kind, Modality::V, 4).unwrap(), &scales, 1).unwrap();
            for (x, y) in c.samples.iter().zip(&test.samples) {
                assert!(x.a.data.iter().zip(&y.a.data).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
            assert!(!c.bitwise_eq(&test), "{kind:?} changed nothing");
        }
    }

    #[test]
    fn evaluate_cases() {
        let preds = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.5, 0.5]];
        assert_eq!(evaluate(&preds, &[0, 1, 0]).unwrap(), 1.0);
        assert!((evaluate(&preds, &[1, 1, 1]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(evaluate(&preds, &[0, 1]).is_err());
        assert!(evaluate(&[], &[]).is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = small("toy");
        let spec = LatentSpec::new(cfg.clone(), 0).unwrap();
        let (train, _) = generate_dataset(&spec, 20, 20).unwrap();
        let model = init_model(&cfg, 0).unwrap();
        let out = pretrain_fusion(&train, &model, &PretrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(out, model);
    }

    #[test]
    fn key_projection_starts_tied_to_query() {
        let model = init_model(&small("kin-like"), 4).unwrap();
        assert_eq!(model.fusion.get(ParamGroup::WK), model.fusion.get(ParamGroup::WQ));
        assert!(model.fusion.get(ParamGroup::WQ).data.iter().any(|&x| x != 0.0));
    }
}
