mod common;

use abpem::bootstrap::{
    ab_loss_against, ab_loss_grad, block_stats, gaussian_kl, gaussian_kl_grad, scores_grad, BlockId, BlockStats,
};
use abpem::gradcheck::{check_objective, finite_diff_grad, relative_error, DEFAULT_STEP};
use abpem::model::{attend, qkv_sample, ModelDims, ParamGroup};
use abpem::objective::{self, Mode, Objective};
use abpem::pem::{class_balance_grad, class_balance_loss, principal_entropy, principal_entropy_grad};
use abpem::tensor::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, matmul, matmul_backward, row_softmax, row_softmax_backward,
    Tensor, LAYER_NORM_EPS,
};
use common::*;
use rand::Rng;

const SEEDS: u64 = 100;
const TOL: f64 = 1e-5;
const H: f64 = 1e-5;

#[test]
fn matmul_backward_over_seeds() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let (n, k, m) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
        let a = normal(n, k, 1.0, &mut r);
        let b = normal(k, m, 1.0, &mut r);
        let w = normal(n, m, 1.0, &mut r);
        let (da, db) = matmul_backward(&a, &b, &w).unwrap();
        let na = numeric_grad(&a, H, |x| weighted_sum(&matmul(x, &b).unwrap(), &w));
        let nb = numeric_grad(&b, H, |x| weighted_sum(&matmul(&a, x).unwrap(), &w));
        assert!(max_rel_err(&da.data, &na) < TOL, "seed {seed}");
        assert!(max_rel_err(&db.data, &nb) < TOL, "seed {seed}");
    }
}

#[test]
fn sum_loss_gives_unit_gradient() {
    let w = normal(3, 4, 1.0, &mut rng(1));
    let ones = Tensor::filled(3, 4, 1.0);
    let (_, dw) = matmul_backward(&Tensor::identity(3), &w, &ones).unwrap();
    assert!(dw.data.iter().all(|&g| g == 1.0));
}

#[test]
fn softmax_backward_over_seeds() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let (n, m) = (r.random_range(1..5), r.random_range(2..7));
        let scale = r.random_range(0.5..3.0);
        let x = normal(n, m, 2.0, &mut r);
        let w = normal(n, m, 1.0, &mut r);
        let y = row_softmax(&x, scale).unwrap();
        let analytic = row_softmax_backward(&y, &w, scale);
        let numeric = numeric_grad(&x, H, |x| weighted_sum(&row_softmax(x, scale).unwrap(), &w));
        assert!(max_rel_err(&analytic.data, &numeric) < TOL, "seed {seed}");
    }
}

#[test]
fn layer_norm_backward_over_seeds() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let (n, m) = (r.random_range(1..5), r.random_range(2..9));
        let x = normal(n, m, 1.5, &mut r);
        let gamma = normal(1, m, 1.0, &mut r);
        let beta = normal(1, m, 1.0, &mut r);
        let w = normal(n, m, 1.0, &mut r);
        let (_, cache) = layer_norm(&x, &gamma, &beta, LAYER_NORM_EPS).unwrap();
        let (dx, dgamma, dbeta) = layer_norm_backward(&cache, &gamma, &w);
        let f = |x: &Tensor, g: &Tensor, b: &Tensor| weighted_sum(&layer_norm(x, g, b, LAYER_NORM_EPS).unwrap().0, &w);
        assert!(max_rel_err(&dx.data, &numeric_grad(&x, H, |p| f(p, &gamma, &beta))) < TOL, "seed {seed}");
        assert!(max_rel_err(&dgamma.data, &numeric_grad(&gamma, H, |p| f(&x, p, &beta))) < TOL, "seed {seed}");
        assert!(max_rel_err(&dbeta.data, &numeric_grad(&beta, H, |p| f(&x, &gamma, p))) < TOL, "seed {seed}");
    }
}

#[test]
fn gelu_backward_over_seeds() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let x = normal(3, 5, 2.0, &mut r);
        let w = normal(3, 5, 1.0, &mut r);
        let analytic = gelu_backward(&x, &w);
        let numeric = numeric_grad(&x, H, |x| weighted_sum(&gelu(x), &w));
        assert!(max_rel_err(&analytic.data, &numeric) < TOL, "seed {seed}");
    }
}

#[test]
fn query_projection_gradient() {
    for seed in 0..SEEDS {
        let model = toy_model(toy_dims(), seed);
        let batch = toy_batch(&model, 1, seed);
        let (z, _, _, _) = qkv_sample(&batch.tokens_a[0], &batch.tokens_v[0], &model.fusion).unwrap();
        let ones = Tensor::filled(z.rows(), model.dims().d, 1.0);
        let (_, analytic) = matmul_backward(&z, model.fusion.get(ParamGroup::WQ), &ones).unwrap();
        let numeric = numeric_grad(model.fusion.get(ParamGroup::WQ), H, |w| {
            let mut p = model.fusion.clone();
            *p.get_mut(ParamGroup::WQ) = w.clone();
            qkv_sample(&batch.tokens_a[0], &batch.tokens_v[0], &p).unwrap().1.sum()
        });
        assert!(max_rel_err(&analytic.data, &numeric) < TOL, "seed {seed}");
    }
}

#[test]
fn attention_output_gradient_wrt_scores() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let (t, d) = (r.random_range(2..7), r.random_range(1..6));
        let scores = normal(t, t, 2.0, &mut r);
        let v = normal(t, d, 1.0, &mut r);
        let (attn, _) = attend(&scores, &v, d).unwrap();
        let ones = Tensor::filled(t, d, 1.0);
        let (d_attn, _) = matmul_backward(&attn, &v, &ones).unwrap();
        let analytic = row_softmax_backward(&attn, &d_attn, (d as f64).sqrt());
        let numeric = numeric_grad(&scores, H, |s| attend(s, &v, d).unwrap().1.sum());
        assert!(max_rel_err(&analytic.data, &numeric) < TOL, "seed {seed}");
    }
}

#[test]
fn gaussian_kl_gradient_over_seeds() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let p = BlockStats::new(BlockId::A2V, r.random_range(-3.0..3.0), r.random_range(0.1..4.0));
        let q = BlockStats::new(BlockId::V2V, r.random_range(-3.0..3.0), r.random_range(0.1..4.0));
        let (dmu, dvar) = gaussian_kl_grad(&p, &q);
        let f = |mu: f64, var: f64| gaussian_kl(&BlockStats::new(p.block, mu, var), &q).unwrap();
        let nmu = (f(p.mu + H, p.sigma2) - f(p.mu - H, p.sigma2)) / (2.0 * H);
        let nvar = (f(p.mu, p.sigma2 + H) - f(p.mu, p.sigma2 - H)) / (2.0 * H);
        assert!(relative_error(dmu, nmu) < TOL, "seed {seed}");
        assert!(relative_error(dvar, nvar) < TOL, "seed {seed}");
    }
}

#[test]
fn ab_loss_gradient_wrt_scores_over_seeds() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let (t_a, t_v) = (r.random_range(1..5), r.random_range(1..5));
        if t_a * t_a < 2 || t_v * t_v < 2 {
            continue;
        }
        let scores = normal(t_a + t_v, t_a + t_v, 1.5, &mut r);
        let stats = block_stats(&scores, t_a, t_v).unwrap();
        let anchors = stats.anchors();
        let analytic = scores_grad(&scores, t_a, t_v, &ab_loss_grad(&stats, &anchors), 1.0).unwrap();
        let numeric =
            numeric_grad(&scores, H, |s| ab_loss_against(&block_stats(s, t_a, t_v).unwrap(), &anchors).unwrap());
        assert!(max_rel_err(&analytic.data, &numeric) < TOL, "seed {seed}");
    }
}

#[test]
fn principal_entropy_gradient_over_seeds() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let c = r.random_range(2..10);
        let k = r.random_range(1..=c);
        let raw: Vec<f64> = (0..c).map(|_| r.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let analytic = principal_entropy_grad(&p, k).unwrap();
        let mask = abpem::pem::reliable_mask(&p, k).unwrap();
        let x = Tensor::from_vec(1, c, p.clone()).unwrap();
        let numeric = numeric_grad(&x, H, |q| abpem::pem::masked_entropy(&q.data, &mask));
        assert!(max_rel_err(&analytic, &numeric) < TOL, "seed {seed}");
        assert!((principal_entropy(&p, k).unwrap() - abpem::pem::masked_entropy(&p, &mask)).abs() == 0.0);
    }
}

#[test]
fn class_balance_gradient_over_seeds() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let (n, c) = (r.random_range(1..5), r.random_range(2..6));
        let batch: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| r.random_range(0.05..1.0)).collect();
                let t: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / t).collect()
            })
            .collect();
        let analytic: Vec<f64> = class_balance_grad(&batch).into_iter().flatten().collect();
        let flat = Tensor::from_vec(n, c, batch.concat()).unwrap();
        let numeric = numeric_grad(&flat, H, |x| {
            let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
            class_balance_loss(&rows).unwrap()
        });
        assert!(max_rel_err(&analytic, &numeric) < TOL, "seed {seed}");
    }
}

fn check(dims: ModelDims, mode: Mode, k: usize, all_groups: bool, seed: u64) -> f64 {
    let model = toy_model(dims, seed);
    let batch = toy_batch(&model, 4, seed);
    let params = params_with(&model, all_groups);
    let objective = Objective { mode, k, lambda: 1.0, class_balance_weight: 0.0 };
    check_objective(&batch, &params, &objective, DEFAULT_STEP).unwrap().max_rel_err()
}

#[test]
fn full_objective_over_seeds() {
    for seed in 0..SEEDS {
        for mode in [Mode::AbOnly, Mode::PemOnly, Mode::Abpem, Mode::Em] {
            let err = check(toy_dims(), mode, 2, false, seed);
            assert!(err < TOL, "seed {seed} {mode}: {err:e}");
        }
    }
}

#[test]
fn every_fusion_group_when_all_are_tunable() {
    for seed in 0..20 {
        let err = check(toy_dims(), Mode::Abpem, 2, true, seed);
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn two_class_full_loss() {
    for seed in 0..20 {
        let err = check(ModelDims::new(6, 6, 3, 3, 2), Mode::Abpem, 1, false, seed);
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn three_class_pem_loss_through_the_oracle() {
    let dims = ModelDims::new(6, 6, 3, 2, 3);
    let model = toy_model(dims, 11);
    let batch = toy_batch(&model, 3, 11);
    let params = model.fusion.clone();
    let objective = Objective { mode: Mode::PemOnly, k: 2, lambda: 1.0, class_balance_weight: 0.0 };
    let frozen = objective::FrozenTargets::capture(&batch, &params, 2).unwrap();
    let numeric =
        finite_diff_grad(|p| objective::value_with_targets(&batch, p, &objective, &frozen), &params, 1e-5).unwrap();
    let (graph, _) = objective::build(&batch, &params, &objective, Some(&frozen)).unwrap();
    let mut analytic = params.clone();
    objective::backward(&graph, &mut analytic).unwrap();
    for g in params.tunable_groups() {
        assert!(max_rel_err(&analytic.get(g).grad, numeric.get(g)) < TOL, "{}", g.name());
    }
}

#[test]
fn class_balance_term_through_the_oracle() {
    for seed in 0..10 {
        let model = toy_model(toy_dims(), seed);
        let batch = toy_batch(&model, 4, seed);
        let objective = Objective { mode: Mode::Abpem, k: 2, lambda: 1.0, class_balance_weight: 0.7 };
        let err = check_objective(&batch, &model.fusion, &objective, DEFAULT_STEP).unwrap().max_rel_err();
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}
