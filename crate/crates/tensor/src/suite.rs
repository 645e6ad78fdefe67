//! Finite-difference coverage of every differentiable primitive, plus randomly
//! composed graphs. Shared by the test suite and the `gradcheck` command.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::float::Float;
use crate::gradcheck::{check_gradients_with, weighted_sum, Stencil};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: String,
    pub seeds: usize,
    pub max_rel_err: f64,
}

type Build<F> = for<'t> fn(&'t Tape<F>, &[Var<'t, F>], u64) -> Result<Var<'t, F>>;

struct Case<F: Float> {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    /// Inputs are pushed at least this far from zero (kinks, division).
    min_abs: f64,
    build: Build<F>,
}

fn cases<F: Float>() -> Vec<Case<F>> {
    vec![
        Case { name: "matmul", shapes: &[&[3, 4], &[4, 2]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].matmul(v[1])?, s) },
        Case { name: "bmm", shapes: &[&[2, 3, 4], &[2, 4, 5]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].bmm(v[1])?, s) },
        Case { name: "bmm_nt", shapes: &[&[2, 3, 4], &[2, 5, 4]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].bmm_nt(v[1])?, s) },
        Case { name: "add", shapes: &[&[2, 3, 4], &[3, 4]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].add(v[1])?, s) },
        Case { name: "sub", shapes: &[&[3, 4], &[3, 4]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].sub(v[1])?, s) },
        Case { name: "mul", shapes: &[&[2, 3, 4], &[4]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].mul(v[1])?, s) },
        Case { name: "scale", shapes: &[&[3, 4]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].scale(-1.7)?, s) },
        Case { name: "one_minus", shapes: &[&[3, 4]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].one_minus()?, s) },
        Case { name: "softmax", shapes: &[&[2, 5]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].softmax(1)?, s) },
        Case { name: "softmax_axis0", shapes: &[&[4, 3]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].softmax(0)?, s) },
        Case {
            name: "layer_norm",
            shapes: &[&[3, 6], &[6], &[6]],
            min_abs: 0.0,
            build: |_, v, s| weighted_sum(v[0].layer_norm(v[1], v[2], 1e-5)?, s),
        },
        Case { name: "relu", shapes: &[&[3, 5]], min_abs: 0.05, build: |_, v, s| weighted_sum(v[0].relu()?, s) },
        Case { name: "gelu", shapes: &[&[3, 5]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].gelu()?, s) },
        Case { name: "sigmoid", shapes: &[&[3, 5]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].sigmoid()?, s) },
        Case {
            name: "concat",
            shapes: &[&[2, 3, 2], &[2, 1, 2]],
            min_abs: 0.0,
            build: |t, v, s| weighted_sum(t.concat(&[v[0], v[1]], 1)?, s),
        },
        Case { name: "narrow", shapes: &[&[3, 5]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].narrow(1, 1, 3)?, s) },
        Case { name: "transpose", shapes: &[&[2, 3, 4]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].transpose(0, 2)?, s) },
        Case {
            name: "permute",
            shapes: &[&[2, 3, 4, 2]],
            min_abs: 0.0,
            build: |_, v, s| weighted_sum(v[0].permute(&[0, 2, 1, 3])?, s),
        },
        Case { name: "reshape", shapes: &[&[2, 6]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].reshape(&[3, 4])?, s) },
        Case { name: "expand_batch", shapes: &[&[2, 3]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].expand_batch(3)?, s) },
        Case {
            name: "embedding_lookup",
            shapes: &[&[5, 3]],
            min_abs: 0.0,
            build: |_, v, s| weighted_sum(v[0].embedding(&[4, 0, 4, 2])?, s),
        },
        Case { name: "sum", shapes: &[&[3, 4]], min_abs: 0.0, build: |_, v, _| v[0].sum() },
        Case { name: "mean", shapes: &[&[3, 4]], min_abs: 0.0, build: |_, v, _| v[0].mean() },
        Case {
            name: "cross_entropy",
            shapes: &[&[5, 7]],
            min_abs: 0.0,
            build: |_, v, _| v[0].cross_entropy(&[0, 6, 3, 3, 1], None),
        },
        Case {
            name: "conv2d",
            shapes: &[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]],
            min_abs: 0.0,
            build: |_, v, s| weighted_sum(v[0].conv2d(v[1], Some(v[2]), 1, 1)?, s),
        },
        Case {
            name: "conv2d_stride2",
            shapes: &[&[2, 2, 5, 6], &[3, 2, 3, 3]],
            min_abs: 0.0,
            build: |_, v, s| weighted_sum(v[0].conv2d(v[1], None, 2, 0)?, s),
        },
        Case { name: "upsample2x", shapes: &[&[1, 2, 2, 3]], min_abs: 0.0, build: |_, v, s| weighted_sum(v[0].upsample2x()?, s) },
        Case {
            name: "replace_rows",
            shapes: &[&[4, 3], &[3]],
            min_abs: 0.0,
            build: |_, v, s| weighted_sum(v[0].replace_rows(v[1], &[false, true, false, true])?, s),
        },
    ]
}

fn inputs<F: Float>(shapes: &[&[usize]], min_abs: f64, seed: u64) -> Vec<Tensor<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| {
            let mut t = Tensor::<F>::uniform(s, -1.0, 1.0, &mut rng);
            for v in t.data_mut() {
                if v.to_f64_lossy().abs() < min_abs {
                    *v = F::from_f64_lossy(min_abs + rng.random_range(0.0..0.5));
                }
            }
            t
        })
        .collect()
}

/// Shape-preserving unary stages for random composition on `[3, 4]` tensors.
const STAGES: &[&str] = &["sigmoid", "gelu", "softmax", "layer_norm", "mul_other", "matmul_square", "scale", "add_other"];

fn composed<'t, F: Float>(v: &[Var<'t, F>], graph: u64, seed: u64) -> Result<Var<'t, F>> {
    let mut x = v[0];
    for stage in composed_stages(graph) {
        x = match stage {
            "sigmoid" => x.sigmoid()?,
            "gelu" => x.gelu()?,
            "softmax" => x.softmax(1)?,
            "layer_norm" => x.layer_norm(v[3], v[4], 1e-5)?,
            "mul_other" => x.mul(v[1])?,
            "matmul_square" => x.matmul(v[2])?,
            "scale" => x.scale(0.5)?,
            _ => x.add(v[1])?,
        };
    }
    weighted_sum(x, seed)
}

/// The four stages of composed graph `graph`. The graph is fixed; seeds only vary inputs.
pub fn composed_stages(graph: u64) -> Vec<&'static str> {
    let mut rng = ChaCha8Rng::seed_from_u64(graph.wrapping_mul(31).wrapping_add(7));
    STAGES.choose_multiple(&mut rng, 4).copied().collect()
}

/// Runs every primitive case and three composed graphs over `seeds` seeds each, using
/// the four-point stencil.
pub fn run_suite<F: Float>(seeds: u64, step: f64) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    for case in cases::<F>() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let xs = inputs::<F>(case.shapes, case.min_abs, seed);
            let build = case.build;
            let res = check_gradients_with(&xs, step, Stencil::FourPoint, |t, v| build(t, v, seed))?;
            worst = worst.max(res.max_rel_err);
        }
        reports.push(OpReport { name: case.name.to_string(), seeds: seeds as usize, max_rel_err: worst });
    }
    for graph in 0..3u64 {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let shapes: &[&[usize]] = &[&[3, 4], &[3, 4], &[4, 4], &[4], &[4]];
            let xs = inputs::<F>(shapes, 0.0, graph * 1000 + seed);
            let res = check_gradients_with(&xs, step, Stencil::FourPoint, |_, v| composed(v, graph, seed))?;
            worst = worst.max(res.max_rel_err);
        }
        reports.push(OpReport { name: format!("composed_graph_{graph}"), seeds: seeds as usize, max_rel_err: worst });
    }
    Ok(reports)
}
