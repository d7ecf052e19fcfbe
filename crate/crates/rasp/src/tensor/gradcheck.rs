//! Finite-difference verification of the backward rules.
//!
//! `gradcheck` compares analytic gradients against central differences for
//! every coordinate of every input. The op registry provides a random
//! instance generator per differentiable op so that the whole op set can
//! be swept by the CLI and by the acceptance suite.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{Graph, NodeId, Tensor};
use crate::Result;

/// One coordinate's analytic-vs-numeric comparison.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)`; infinite when
    /// probing produced a non-finite value.
    pub rel_err: f64,
}

/// Result of a gradcheck run over one function instance.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub non_finite: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradcheckReport {
    /// The worst coordinate, if any were checked.
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compare the analytic gradient of a scalar-valued tensor function against
/// central finite differences with step `step`, at every coordinate of every
/// input. Passes iff all relative errors are finite and below `tol`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let analytic = analytic_grads(&f, inputs)?;
    compare_with_numeric(&f, inputs, &analytic, step, tol)
}

/// Analytic gradients of `f` at `inputs`, one vector per input (zeros for
/// inputs the output does not depend on).
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_grad()))
        .collect();
    let y = f(&mut g, &ids)?;
    g.backward(y)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            g.grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect())
}

/// Core comparison: central differences of `f` against a supplied analytic
/// gradient. Split out so a deliberately corrupted gradient can be shown to
/// fail the check.
pub fn compare_with_numeric<F>(
    f: &F,
    inputs: &[Tensor],
    analytic: &[Vec<f64>],
    step: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    assert!(step > 0.0, "gradcheck step must be positive");
    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = probe.iter().map(|t| g.leaf(t.clone())).collect();
        let y = f(&mut g, &ids)?;
        g.item(y)
    };

    let mut coords = Vec::new();
    let mut non_finite = 0usize;
    let mut max_rel = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for t in &mut probe {
        t.requires_grad = false;
    }
    for (i, input) in inputs.iter().enumerate() {
        for c in 0..input.numel() {
            let orig = input.data()[c];
            probe[i].data_mut()[c] = orig + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[c] = orig - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i][c];
            let rel = if numeric.is_finite() && a.is_finite() {
                (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs())
            } else {
                non_finite += 1;
                f64::INFINITY
            };
            max_rel = max_rel.max(rel);
            coords.push(CoordCheck {
                input: i,
                coord: c,
                analytic: a,
                numeric,
                rel_err: rel,
            });
        }
    }
    let passed = non_finite == 0 && max_rel < tol;
    Ok(GradcheckReport {
        coords,
        max_rel_err: max_rel,
        non_finite,
        tol,
        passed,
    })
}

/// A randomly sampled check instance: concrete inputs plus a builder that
/// applies the op under test and scalarizes its output through a fixed
/// random projection.
pub struct OpInstance {
    pub inputs: Vec<Tensor>,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + Send + Sync>,
}

/// A differentiable op together with its instance sampler.
pub struct OpSpec {
    pub name: &'static str,
    pub sample: fn(&mut ChaCha12Rng) -> OpInstance,
}

fn rand_tensor(rng: &mut ChaCha12Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

fn rand_dims(rng: &mut ChaCha12Rng) -> (usize, usize) {
    (rng.random_range(2..5), rng.random_range(2..6))
}

/// Scalarize `out` as `sum(out ⊙ R)` for a fixed random projection `R`.
fn project(g: &mut Graph, out: NodeId, proj: &Tensor) -> Result<NodeId> {
    let r = g.constant(proj.clone());
    let prod = g.mul(out, r)?;
    Ok(g.sum_all(prod))
}

macro_rules! proj_instance {
    ($rng:expr, $inputs:expr, $proj_shape:expr, |$g:ident, $ids:ident| $body:expr) => {{
        let proj = rand_tensor($rng, $proj_shape, -1.0, 1.0);
        OpInstance {
            inputs: $inputs,
            build: Box::new(move |$g: &mut Graph, $ids: &[NodeId]| {
                let out = $body;
                project($g, out, &proj)
            }),
        }
    }};
}

/// Every differentiable op in the engine, with a domain-appropriate random
/// instance sampler for gradient checking.
pub fn registered_ops() -> Vec<OpSpec> {
    vec![
        OpSpec {
            name: "matmul",
            sample: |rng| {
                let (m, k) = rand_dims(rng);
                let n = rng.random_range(2..5);
                let a = rand_tensor(rng, vec![m, k], -2.0, 2.0);
                let b = rand_tensor(rng, vec![k, n], -2.0, 2.0);
                proj_instance!(rng, vec![a, b], vec![m, n], |g, ids| g
                    .matmul(ids[0], ids[1])?)
            },
        },
        OpSpec {
            name: "add",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let a = rand_tensor(rng, vec![d, t], -2.0, 2.0);
                let b = rand_tensor(rng, vec![d, 1], -2.0, 2.0);
                proj_instance!(rng, vec![a, b], vec![d, t], |g, ids| g
                    .add(ids[0], ids[1])?)
            },
        },
        OpSpec {
            name: "sub",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let a = rand_tensor(rng, vec![d, t], -2.0, 2.0);
                let b = rand_tensor(rng, vec![d, t], -2.0, 2.0);
                proj_instance!(rng, vec![a, b], vec![d, t], |g, ids| g
                    .sub(ids[0], ids[1])?)
            },
        },
        OpSpec {
            name: "mul",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let a = rand_tensor(rng, vec![d, t], -2.0, 2.0);
                let b = rand_tensor(rng, vec![1, t], -2.0, 2.0);
                proj_instance!(rng, vec![a, b], vec![d, t], |g, ids| g
                    .mul(ids[0], ids[1])?)
            },
        },
        OpSpec {
            name: "div",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let a = rand_tensor(rng, vec![d, t], -2.0, 2.0);
                // denominators bounded away from zero
                let mut b = rand_tensor(rng, vec![d, t], 0.5, 2.0);
                for v in b.data_mut() {
                    if rng.random_range(0..2) == 0 {
                        *v = -*v;
                    }
                }
                proj_instance!(rng, vec![a, b], vec![d, t], |g, ids| g
                    .div(ids[0], ids[1])?)
            },
        },
        OpSpec {
            name: "relu",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                // keep values away from the kink at 0
                let mut a = rand_tensor(rng, vec![d, t], 0.05, 2.0);
                for v in a.data_mut() {
                    if rng.random_range(0..2) == 0 {
                        *v = -*v;
                    }
                }
                proj_instance!(rng, vec![a], vec![d, t], |g, ids| g.relu(ids[0]))
            },
        },
        OpSpec {
            name: "sqrt_clamped",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let a = rand_tensor(rng, vec![d, t], 0.1, 4.0);
                proj_instance!(rng, vec![a], vec![d, t], |g, ids| g.sqrt_clamped(ids[0]))
            },
        },
        OpSpec {
            name: "sigmoid",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let a = rand_tensor(rng, vec![d, t], -3.0, 3.0);
                proj_instance!(rng, vec![a], vec![d, t], |g, ids| g.sigmoid(ids[0]))
            },
        },
        OpSpec {
            name: "exp",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let a = rand_tensor(rng, vec![d, t], -2.0, 2.0);
                proj_instance!(rng, vec![a], vec![d, t], |g, ids| g.exp(ids[0]))
            },
        },
        OpSpec {
            name: "ln",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let a = rand_tensor(rng, vec![d, t], 0.1, 4.0);
                proj_instance!(rng, vec![a], vec![d, t], |g, ids| g.ln(ids[0]))
            },
        },
        OpSpec {
            name: "cos",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let a = rand_tensor(rng, vec![d, t], -3.0, 3.0);
                proj_instance!(rng, vec![a], vec![d, t], |g, ids| g.cos(ids[0]))
            },
        },
        OpSpec {
            name: "acos_clamped",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let a = rand_tensor(rng, vec![d, t], -0.9, 0.9);
                proj_instance!(rng, vec![a], vec![d, t], |g, ids| g.acos_clamped(ids[0]))
            },
        },
        OpSpec {
            name: "softmax_rows",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let a = rand_tensor(rng, vec![d, t], -3.0, 3.0);
                proj_instance!(rng, vec![a], vec![d, t], |g, ids| g
                    .softmax_rows(ids[0])?)
            },
        },
        OpSpec {
            name: "mean_last",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let a = rand_tensor(rng, vec![d, t], -2.0, 2.0);
                proj_instance!(rng, vec![a], vec![d], |g, ids| g.mean_last(ids[0])?)
            },
        },
        OpSpec {
            name: "sum_last",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let a = rand_tensor(rng, vec![d, t], -2.0, 2.0);
                proj_instance!(rng, vec![a], vec![d], |g, ids| g.sum_last(ids[0])?)
            },
        },
        OpSpec {
            name: "sum_all",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let a = rand_tensor(rng, vec![d, t], -2.0, 2.0);
                OpInstance {
                    inputs: vec![a],
                    build: Box::new(|g, ids| Ok(g.sum_all(ids[0]))),
                }
            },
        },
        OpSpec {
            name: "concat_rows",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let d2 = rng.random_range(1..4);
                let a = rand_tensor(rng, vec![d, t], -2.0, 2.0);
                let b = rand_tensor(rng, vec![d2, t], -2.0, 2.0);
                proj_instance!(rng, vec![a, b], vec![d + d2, t], |g, ids| g
                    .concat_rows(ids[0], ids[1])?)
            },
        },
        OpSpec {
            name: "tile_cols",
            sample: |rng| {
                let d = rng.random_range(2..5);
                let cols = rng.random_range(2..6);
                let a = rand_tensor(rng, vec![d], -2.0, 2.0);
                proj_instance!(rng, vec![a], vec![d, cols], |g, ids| g
                    .tile_cols(ids[0], cols)?)
            },
        },
        OpSpec {
            name: "shift_cols",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let offset = rng.random_range(-2i64..3) as isize;
                let a = rand_tensor(rng, vec![d, t], -2.0, 2.0);
                proj_instance!(rng, vec![a], vec![d, t], |g, ids| g
                    .shift_cols(ids[0], offset)?)
            },
        },
        OpSpec {
            name: "reshape",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let a = rand_tensor(rng, vec![d, t], -2.0, 2.0);
                proj_instance!(rng, vec![a], vec![d * t], |g, ids| g
                    .reshape(ids[0], vec![d * t])?)
            },
        },
        OpSpec {
            name: "scale",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let factor = rng.random_range(-2.0..2.0);
                let a = rand_tensor(rng, vec![d, t], -2.0, 2.0);
                proj_instance!(rng, vec![a], vec![d, t], |g, ids| g.scale(ids[0], factor))
            },
        },
        OpSpec {
            name: "add_scalar",
            sample: |rng| {
                let (d, t) = rand_dims(rng);
                let offset = rng.random_range(-2.0..2.0);
                let a = rand_tensor(rng, vec![d, t], -2.0, 2.0);
                proj_instance!(rng, vec![a], vec![d, t], |g, ids| g
                    .add_scalar(ids[0], offset))
            },
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gradcheck_of_sum_has_zero_error() {
        let x = rand_tensor(&mut ChaCha12Rng::seed_from_u64(1), vec![3, 4], -2.0, 2.0);
        let report = gradcheck(
            |g, ids| Ok(g.sum_all(ids[0])),
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed);
        // d(sum)/dx = 1 exactly; central differences of a linear map are exact
        assert!(report.max_rel_err < 1e-10, "{}", report.max_rel_err);
    }

    #[test]
    fn every_registered_op_passes_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for spec in registered_ops() {
            for i in 0..5 {
                let inst = (spec.sample)(&mut rng);
                let report = gradcheck(&inst.build, &inst.inputs, 1e-5, 1e-4).unwrap();
                assert!(
                    report.passed,
                    "op {} instance {} failed: max rel err {:.3e} (non-finite: {})",
                    spec.name, i, report.max_rel_err, report.non_finite
                );
            }
        }
    }

    #[test]
    fn corrupted_gradient_rule_fails_the_check() {
        let f = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
            let sq = g.mul(ids[0], ids[0])?;
            Ok(g.sum_all(sq))
        };
        let x = rand_tensor(&mut ChaCha12Rng::seed_from_u64(3), vec![2, 3], -2.0, 2.0);
        let mut grads = analytic_grads(&f, std::slice::from_ref(&x)).unwrap();
        grads[0][2] += 0.25; // corrupt one coordinate
        let report = compare_with_numeric(&f, &[x], &grads, 1e-5, 1e-4).unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst().unwrap().coord, 2);
    }

    #[test]
    fn non_finite_probe_is_reported_per_coordinate() {
        // ln probes a negative value when stepped below zero
        let f = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
            let l = g.ln(ids[0]);
            Ok(g.sum_all(l))
        };
        let x = Tensor::new(vec![2], vec![0.000001, 1.0]).unwrap();
        let report = gradcheck(&f, &[x], 1e-5, 1e-4).unwrap();
        assert!(!report.passed);
        assert!(report.non_finite >= 1);
        assert!(report.coords[0].rel_err.is_infinite());
    }
}
