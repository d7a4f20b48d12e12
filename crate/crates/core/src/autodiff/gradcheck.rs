//! Central finite-difference checks of tape gradients.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{OpKind, Segments, Tape, Var};
use crate::error::Result;
use crate::seeding::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;

/// Step used by every finite-difference check.
pub const FD_STEP: f64 = 1e-5;
/// Acceptance threshold on the relative error.
pub const REL_TOL: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Result of checking one recorded operation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: OpKind,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Every differentiable operation with a checkable gradient rule.
pub const CHECKED_OPS: &[OpKind] = &[
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::MatMul,
    OpKind::Log2OnePlus,
    OpKind::Exp,
    OpKind::Sigmoid,
    OpKind::LeakyRelu,
    OpKind::RowSoftmax,
    OpKind::ColSoftmax,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::ConcatCols,
    OpKind::ConcatRows,
    OpKind::RowGather,
    OpKind::SegmentMean,
    OpKind::SegmentSoftmax,
    OpKind::AddRowBroadcast,
    OpKind::MulColBroadcast,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::ClampMin,
    OpKind::Reshape,
    OpKind::Transpose,
    OpKind::SliceCols,
    OpKind::SliceRows,
    OpKind::ColSum,
    OpKind::RowSum,
];

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Random inputs for `kind`, inside the op's domain.
fn sample_inputs(kind: OpKind, rng: &mut impl Rng) -> Vec<Tensor> {
    let mut u = |r, c| uniform(rng, r, c, -1.0, 1.0);
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => vec![u(3, 4), u(3, 4)],
        OpKind::Div => {
            let a = u(3, 4);
            let b = uniform(rng, 3, 4, 0.5, 1.5);
            vec![a, b]
        }
        OpKind::MatMul => vec![u(3, 4), u(4, 2)],
        OpKind::Log2OnePlus => vec![uniform(rng, 3, 4, -0.5, 2.0)],
        OpKind::ConcatCols => vec![u(3, 2), u(3, 4)],
        OpKind::ConcatRows => vec![u(2, 3), u(4, 3)],
        OpKind::RowGather => vec![u(4, 3)],
        OpKind::SegmentMean => vec![u(6, 3)],
        OpKind::SegmentSoftmax => vec![u(6, 1)],
        OpKind::AddRowBroadcast => vec![u(3, 4), u(1, 4)],
        OpKind::MulColBroadcast => vec![u(3, 4), u(3, 1)],
        _ => vec![u(3, 4)],
    }
}

fn apply(kind: OpKind, tape: &mut Tape, v: &[Var]) -> Result<Var> {
    let segments = || Arc::new(Segments::new(vec![0, 2, 1, 0, 2, 0], 4).expect("valid ids"));
    match kind {
        OpKind::Add => tape.add(v[0], v[1]),
        OpKind::Sub => tape.sub(v[0], v[1]),
        OpKind::Mul => tape.mul(v[0], v[1]),
        OpKind::Div => tape.div(v[0], v[1]),
        OpKind::MatMul => tape.matmul(v[0], v[1]),
        OpKind::Log2OnePlus => tape.log2_one_plus(v[0]),
        OpKind::Exp => tape.exp(v[0]),
        OpKind::Sigmoid => tape.sigmoid(v[0]),
        OpKind::LeakyRelu => tape.leaky_relu(v[0], 0.01),
        OpKind::RowSoftmax => tape.row_softmax(v[0]),
        OpKind::ColSoftmax => tape.col_softmax(v[0]),
        OpKind::Sum => tape.sum(v[0]),
        OpKind::Mean => tape.mean(v[0]),
        OpKind::ConcatCols => tape.concat_cols(v),
        OpKind::ConcatRows => tape.concat_rows(v),
        OpKind::RowGather => tape.row_gather(v[0], Arc::new(vec![3, 0, 0, 2, 1])),
        OpKind::SegmentMean => tape.segment_mean(v[0], segments()),
        OpKind::SegmentSoftmax => tape.segment_softmax(v[0], segments()),
        OpKind::AddRowBroadcast => tape.add_row_broadcast(v[0], v[1]),
        OpKind::MulColBroadcast => tape.mul_col_broadcast(v[0], v[1]),
        OpKind::Scale => tape.scale(v[0], -1.7),
        OpKind::AddScalar => tape.add_scalar(v[0], 0.3),
        OpKind::ClampMin => tape.clamp_min(v[0], 0.0),
        OpKind::Reshape => tape.reshape(v[0], 2, 6),
        OpKind::Transpose => tape.transpose(v[0]),
        OpKind::SliceCols => tape.slice_cols(v[0], 1, 2),
        OpKind::SliceRows => tape.slice_rows(v[0], 1, 2),
        OpKind::ColSum => tape.col_sum(v[0]),
        OpKind::RowSum => tape.row_sum(v[0]),
        OpKind::Leaf => Ok(v[0]),
    }
}

/// Scalar probe `sum(op(inputs) * weights)` and, optionally, its gradients.
fn probe(
    kind: OpKind,
    inputs: &[Tensor],
    weights_seed: u64,
    fault: Option<OpKind>,
    want_grads: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_fault(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = apply(kind, &mut tape, &vars)?;
    let (r, c) = tape.shape(out);
    let mut rng = rng_from_seed(weights_seed);
    let w = tape.constant(uniform(&mut rng, r, c, -1.0, 1.0));
    let weighted = tape.mul(out, w)?;
    let root = tape.sum(weighted)?;
    let value = tape.scalar(root);
    if !want_grads {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(root)?;
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    Ok((value, g))
}

/// Directional central-difference check of one op at `points` random inputs.
pub fn check_op(kind: OpKind, seed: u64, points: usize, fault: Option<OpKind>) -> Result<OpCheck> {
    let mut worst: f64 = 0.0;
    for point in 0..points {
        let mut rng = rng_from_seed(derive_seed(seed, &[kind as u64, point as u64]));
        let inputs = sample_inputs(kind, &mut rng);
        let weights_seed = rng.random();
        let (_, grads) = probe(kind, &inputs, weights_seed, fault, true)?;
        let dirs: Vec<Tensor> = inputs
            .iter()
            .map(|t| uniform(&mut rng, t.rows(), t.cols(), -1.0, 1.0))
            .collect();
        let shifted = |sign: f64| -> Vec<Tensor> {
            inputs
                .iter()
                .zip(&dirs)
                .map(|(x, d)| {
                    let data = x
                        .data()
                        .iter()
                        .zip(d.data())
                        .map(|(a, b)| a + sign * FD_STEP * b)
                        .collect();
                    Tensor::from_vec(x.rows(), x.cols(), data).expect("same shape")
                })
                .collect()
        };
        let (plus, _) = probe(kind, &shifted(1.0), weights_seed, None, false)?;
        let (minus, _) = probe(kind, &shifted(-1.0), weights_seed, None, false)?;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let analytic: f64 = grads
            .iter()
            .zip(&dirs)
            .map(|(g, d)| {
                g.data()
                    .iter()
                    .zip(d.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum();
        worst = worst.max(relative_error(analytic, numeric, 1e-8));
    }
    Ok(OpCheck {
        op: kind,
        max_rel_error: worst,
        passed: worst < REL_TOL,
    })
}

/// Runs [`check_op`] for every entry of [`CHECKED_OPS`].
pub fn check_all_ops(seed: u64, points: usize, fault: Option<OpKind>) -> Result<Vec<OpCheck>> {
    CHECKED_OPS
        .iter()
        .map(|&k| check_op(k, seed, points, fault))
        .collect()
}

/// One loss evaluation for [`check_parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    /// Identifies the smooth piece of the loss, see [`Tape::kink_pattern`].
    pub piece: Vec<bool>,
}

/// Worst entry found by [`check_parameters`].
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamCheck {
    pub n_checked: usize,
    pub n_failed: usize,
    /// Entries whose central stencil crossed a kink and were compared with
    /// a one-sided difference instead.
    #[serde(default)]
    pub n_one_sided: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl ParamCheck {
    pub fn passed(&self) -> bool {
        self.n_failed == 0 && self.max_rel_error < REL_TOL
    }

    pub fn merge(&mut self, other: ParamCheck) {
        self.n_checked += other.n_checked;
        self.n_failed += other.n_failed;
        self.n_one_sided += other.n_one_sided;
        if other.max_rel_error > self.max_rel_error {
            let n_checked = self.n_checked;
            let n_failed = self.n_failed;
            let n_one_sided = self.n_one_sided;
            *self = ParamCheck {
                n_checked,
                n_failed,
                n_one_sided,
                ..other
            };
        }
    }
}

/// Compares `analytic` gradients of `loss` against central differences for
/// every scalar entry of every parameter tensor.
///
/// `floor` bounds the denominator of the relative error from below, so that
/// entries whose true gradient is at the round-off level of the loss are
/// compared in absolute terms.
///
/// A central difference whose stencil crosses a kink of a piecewise-smooth
/// loss does not approximate the derivative at the point. When exactly one
/// side leaves the smooth piece of the unperturbed point, the one-sided
/// difference on the other side is used instead.
pub fn check_parameters<F>(
    names: &[String],
    params: &[Tensor],
    analytic: &[Tensor],
    floor: f64,
    mut loss: F,
) -> Result<ParamCheck>
where
    F: FnMut(&mut [Tensor]) -> Result<Probe>,
{
    let mut report = ParamCheck::default();
    let mut work = params.to_vec();
    let base = loss(&mut work)?;
    for (k, p) in params.iter().enumerate() {
        for e in 0..p.len() {
            let original = p.data()[e];
            work[k].data_mut()[e] = original + FD_STEP;
            let plus = loss(&mut work)?;
            work[k].data_mut()[e] = original - FD_STEP;
            let minus = loss(&mut work)?;
            work[k].data_mut()[e] = original;
            let numeric = match (plus.piece == base.piece, minus.piece == base.piece) {
                (false, true) => {
                    report.n_one_sided += 1;
                    (base.value - minus.value) / FD_STEP
                }
                (true, false) => {
                    report.n_one_sided += 1;
                    (plus.value - base.value) / FD_STEP
                }
                _ => (plus.value - minus.value) / (2.0 * FD_STEP),
            };
            let a = analytic[k].data()[e];
            let err = relative_error(a, numeric, floor);
            report.n_checked += 1;
            if err >= REL_TOL {
                report.n_failed += 1;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = names[k].clone();
                report.worst_index = e;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for check in check_all_ops(11, 5, None).unwrap() {
            assert!(check.passed, "{:?}", check);
        }
    }

    #[test]
    fn corrupted_rule_is_named() {
        let checks = check_all_ops(11, 5, Some(OpKind::Sigmoid)).unwrap();
        let failed: Vec<OpKind> = checks.iter().filter(|c| !c.passed).map(|c| c.op).collect();
        assert_eq!(failed, vec![OpKind::Sigmoid]);
    }

    #[test]
    fn softmax_gradients_sum_to_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(3, 5, |r, c| {
            (r * 5 + c) as f64 * 0.13 - 0.9
        }));
        let s = tape.row_softmax(x).unwrap();
        for r in 0..3 {
            let sum: f64 = tape.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let w = tape.constant(Tensor::from_fn(3, 5, |r, c| ((r + 2 * c) % 3) as f64 - 1.0));
        let ws = tape.mul(s, w).unwrap();
        let root = tape.sum(ws).unwrap();
        let g = tape.backward(root).unwrap();
        for r in 0..3 {
            let sum: f64 = g.get(x).unwrap().row(r).iter().sum();
            assert!(sum.abs() < 1e-10);
        }
    }

    #[test]
    fn parameter_check_on_quadratic() {
        let params = vec![Tensor::row_vector(&[0.3, -1.2])];
        let loss = |p: &mut [Tensor]| -> Result<Probe> {
            Ok(Probe {
                value: p[0].data().iter().map(|v| v * v).sum(),
                piece: vec![],
            })
        };
        let analytic = vec![Tensor::row_vector(&[0.6, -2.4])];
        let r = check_parameters(&["w".into()], &params, &analytic, 1e-8, loss).unwrap();
        assert!(r.passed(), "{r:?}");
        let wrong = vec![Tensor::row_vector(&[0.6, -2.0])];
        let r = check_parameters(&["w".into()], &params, &wrong, 1e-8, loss).unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn kink_inside_the_stencil_uses_the_smooth_side() {
        // 3 max(w, 0) + w, evaluated just left of the kink
        let params = vec![Tensor::scalar(-0.4 * FD_STEP)];
        let loss = |p: &mut [Tensor]| -> Result<Probe> {
            let w = p[0].data()[0];
            Ok(Probe {
                value: 3.0 * w.max(0.0) + w,
                piece: vec![w > 0.0],
            })
        };
        let r =
            check_parameters(&["w".into()], &params, &[Tensor::scalar(1.0)], 1e-8, loss).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.n_one_sided, 1);
        let r =
            check_parameters(&["w".into()], &params, &[Tensor::scalar(4.0)], 1e-8, loss).unwrap();
        assert!(!r.passed());
    }
}
