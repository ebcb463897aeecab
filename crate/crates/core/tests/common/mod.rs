#![allow(dead_code)]

use abpem::model::{FusionParams, Model, ModelDims, ParamGroup, TokenBatch};
use abpem::rng::substream;
use abpem::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    substream(seed, "test")
}

pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Random model whose biases and layer-norm affines are also perturbed, so
/// no parameter sits at a special point.
pub fn toy_model(dims: ModelDims, seed: u64) -> Model {
    let mut rng = rng(seed);
    let mut model = Model::init(dims, &mut rng).unwrap();
    for g in ParamGroup::ALL {
        let t = model.fusion.get_mut(g);
        let jitter = normal(t.rows(), t.cols(), 0.1, &mut rng);
        t.add_assign(&jitter);
    }
    model
}

pub fn toy_batch(model: &Model, n: usize, seed: u64) -> TokenBatch {
    let dims = *model.dims();
    let mut rng = rng(seed ^ 0x9e37_79b9);
    let a: Vec<Tensor> = (0..n).map(|_| normal(dims.t_a, dims.raw_dim, 1.0, &mut rng)).collect();
    let v: Vec<Tensor> = (0..n).map(|_| normal(dims.t_v, dims.raw_dim, 1.0, &mut rng)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..dims.n_classes)).collect();
    model.encode(&a, &v, Some(labels)).unwrap()
}

pub fn toy_dims() -> ModelDims {
    ModelDims::new(8, 8, 4, 4, 5)
}

pub fn params_with(model: &Model, all: bool) -> FusionParams {
    let mut p = model.fusion.clone();
    if all {
        p.set_all_tunable();
    }
    p
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data[i];
            probe.data[i] = orig + h;
            let plus = f(&probe);
            probe.data[i] = orig - h;
            let minus = f(&probe);
            probe.data[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| abpem::gradcheck::relative_error(x, y)).fold(0.0, f64::max)
}

pub fn weighted_sum(x: &Tensor, w: &Tensor) -> f64 {
    x.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
}
