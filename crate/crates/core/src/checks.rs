//! Finite-difference gradient checks over every graph primitive and the
//! full CARE loss, packaged for reporting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{forward_unseen, CareConfig, CareParams};
use crate::tensor::{grad_check_many, Elementwise, Graph, ReduceOp, Tensor, Var};

/// Central-difference step for the primitive checks.
pub const PRIMITIVE_STEP: f64 = 1e-5;
/// Step for the full model, whose smallest gradients sit near 1e-8.
pub const MODEL_STEP: f64 = 1e-4;
/// Largest relative error a check may report.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub max_relative_error: f64,
    pub passed: bool,
}

impl CheckRow {
    fn new(name: &str, err: f64) -> Self {
        Self {
            name: name.to_string(),
            max_relative_error: err,
            passed: err < TOLERANCE,
        }
    }
}

type Op = fn(&mut Graph, &[Var]) -> Result<Var>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Contracts an output of any shape with fixed random weights, so a single
/// scalar check covers the whole Jacobian.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

/// Every differentiable operation of [`Graph`], with input shapes.
pub fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Op)> {
    vec![
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1])),
        ("add_broadcast", vec![vec![3, 2, 2], vec![2, 2]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![3]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1])),
        ("mul_broadcast", vec![vec![3, 2, 2], vec![2, 2]], |g, v| g.mul(v[0], v[1])),
        ("mul_scalar", vec![vec![3, 2], vec![]], |g, v| g.mul(v[0], v[1])),
        ("affine", vec![vec![5]], |g, v| Ok(g.affine(v[0], 1.5, -0.5))),
        ("scale", vec![vec![7]], |g, v| Ok(g.scale(v[0], -2.5))),
        ("div_scalar", vec![vec![7]], |g, v| Ok(g.div_scalar(v[0], 3.0))),
        ("relu", vec![vec![7]], |g, v| Ok(g.relu(v[0]))),
        ("sigmoid", vec![vec![7]], |g, v| Ok(g.sigmoid(v[0]))),
        ("elementwise", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let s = g.elementwise(Elementwise::Mul, &[v[0], v[1]])?;
            g.elementwise(Elementwise::Sigmoid, &[s])
        }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("transpose", vec![vec![2, 5]], |g, v| g.transpose(v[0])),
        ("conv2d", vec![vec![2, 5, 5], vec![2, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], 2, 1)),
        ("softmax_axis0", vec![vec![3, 4]], |g, v| g.softmax(v[0], 0)),
        ("softmax_axis1", vec![vec![3, 4]], |g, v| g.softmax(v[0], 1)),
        ("cross_entropy", vec![vec![5]], |g, v| g.cross_entropy_logits(v[0], 2)),
        ("sum", vec![vec![2, 3, 4]], |g, v| g.reduce(ReduceOp::Sum, v[0], &[0, 2])),
        ("mean", vec![vec![2, 3, 4]], |g, v| g.reduce(ReduceOp::Mean, v[0], &[1])),
        ("max", vec![vec![2, 3, 4]], |g, v| g.reduce(ReduceOp::Max, v[0], &[2])),
        ("sum_all", vec![vec![2, 3]], |g, v| Ok(g.sum_all(v[0]))),
        ("mean_all", vec![vec![2, 3]], |g, v| Ok(g.mean_all(v[0]))),
        ("expand", vec![vec![3, 1]], |g, v| g.expand_to(v[0], &[2, 3, 4])),
        ("permute", vec![vec![2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        ("narrow", vec![vec![4, 3]], |g, v| g.narrow(v[0], 0, 1, 2)),
        ("select", vec![vec![3, 4]], |g, v| g.select(v[0], 2)),
        ("reshape", vec![vec![2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        ("flatten", vec![vec![2, 3]], |g, v| g.flatten(v[0])),
        ("concat", vec![vec![2, 3], vec![2, 5]], |g, v| g.concat(&[v[0], v[1]], 1)),
    ]
}

/// Worst error of each primitive over `trials` random inputs.
pub fn primitive_checks(trials: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitive_cases()
        .into_iter()
        .map(|(name, shapes, op)| {
            let mut worst: f64 = 0.0;
            for trial in 0..trials {
                let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
                let err = grad_check_many(
                    |g, v| {
                        let y = op(g, v)?;
                        project(g, y, seed.wrapping_add(100 + trial as u64))
                    },
                    &inputs,
                    PRIMITIVE_STEP,
                )?;
                worst = worst.max(err);
            }
            Ok(CheckRow::new(name, worst))
        })
        .collect()
}

/// Cross-entropy of the unseen-domain path with respect to every parameter.
pub fn full_model_check(cfg: &CareConfig, seed: u64) -> Result<CheckRow> {
    let p = CareParams::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let x = random(&cfg.input_shape, &mut rng);
    let label = rng.random_range(0..cfg.classes);
    let f = |g: &mut Graph, vars: &[Var]| {
        let b = p.attach(g, vars.to_vec())?;
        let xv = g.constant(x.clone());
        let logits = forward_unseen(g, &b, xv)?;
        g.cross_entropy_logits(logits, label)
    };
    let err = grad_check_many(f, p.tensors(), MODEL_STEP)?;
    Ok(CheckRow::new("care_full_model", err))
}
