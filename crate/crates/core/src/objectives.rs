//! Source segmentation cross-entropy, the bias-rectification loss over target
//! pixels, and their weighted sum. Both losses are per-pixel means.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Mask value for pixels excluded from the cross-entropy.
pub const IGNORE: u16 = u16::MAX;

/// Lower clamp on the unseen-class mass before taking its logarithm.
pub const MASS_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub pixel_count: usize,
}

/// A loss node on a tape together with its forward value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Loss {
    pub var: Var,
    pub value: LossValue,
}

fn pixels(tape: &Tape, probs: Var) -> usize {
    let p = tape.value(probs);
    p.len() / p.last_dim()
}

/// Mean of `-ln p[true class]` over pixels whose label is not `ignore_index`.
pub fn seg_cross_entropy(
    tape: &mut Tape,
    probs: Var,
    mask: &[u16],
    ignore_index: Option<u16>,
) -> Result<Loss> {
    let var = tape.mean_nll(probs, mask, ignore_index)?;
    let pixel_count = mask.iter().filter(|&&l| Some(l) != ignore_index).count();
    Ok(Loss {
        var,
        value: LossValue {
            value: tape.value(var).data()[0],
            pixel_count,
        },
    })
}

/// Mean over pixels of `-ln max(sum_{k in unseen} p[k], 1e-12)`.
pub fn bias_rectification(tape: &mut Tape, probs: Var, unseen: &[usize]) -> Result<Loss> {
    if unseen.is_empty() {
        return Err(Error::invalid(
            "bias rectification needs at least one unseen class",
        ));
    }
    let var = tape.mean_neg_log_mass(probs, unseen, MASS_FLOOR)?;
    Ok(Loss {
        var,
        value: LossValue {
            value: tape.value(var).data()[0],
            pixel_count: pixels(tape, probs),
        },
    })
}

/// `l_r + lambda * l_b`.
pub fn total_objective(tape: &mut Tape, l_r: &Loss, l_b: &Loss, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let weighted = tape.scale(l_b.var, lambda);
    tape.add(l_r.var, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;

    fn probs(tape: &mut Tape, rows: &[&[f64]]) -> Var {
        let n = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        tape.param("p", Tensor::new(vec![rows.len(), n], data).unwrap())
    }

    #[test]
    fn perfect_prediction_has_zero_ce() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
        let l = seg_cross_entropy(&mut tape, p, &[1, 0], None).unwrap();
        assert_eq!(l.value.value, 0.0);
        assert_eq!(l.value.pixel_count, 2);
    }

    #[test]
    fn half_probability_costs_ln2() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[&[0.5, 0.25, 0.25]]);
        let l = seg_cross_entropy(&mut tape, p, &[0], None).unwrap();
        assert!((l.value.value - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn fully_ignored_mask_is_empty() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[&[0.5, 0.5], &[0.1, 0.9]]);
        let l = seg_cross_entropy(&mut tape, p, &[IGNORE, IGNORE], Some(IGNORE)).unwrap();
        assert_eq!(
            l.value,
            LossValue {
                value: 0.0,
                pixel_count: 0
            }
        );
        let g = tape.backward(l.var).unwrap();
        assert!(g.all_zero());
    }

    #[test]
    fn invalid_label_rejected() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[&[0.5, 0.5]]);
        assert!(seg_cross_entropy(&mut tape, p, &[2], None).is_err());
    }

    #[test]
    fn bias_loss_uniform_five_classes() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[&[0.2; 5]]);
        let l = bias_rectification(&mut tape, p, &[3, 4]).unwrap();
        assert!((l.value.value - (-(0.4f64).ln())).abs() < 1e-15);
        assert!((l.value.value - 0.9163).abs() < 1e-4);
    }

    #[test]
    fn bias_loss_zero_when_mass_is_unseen() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[&[0.0, 0.0, 0.3, 0.7]]);
        let l = bias_rectification(&mut tape, p, &[2, 3]).unwrap();
        assert_eq!(l.value.value, 0.0);
        assert!(bias_rectification(&mut tape, p, &[]).is_err());
    }

    #[test]
    fn bias_loss_is_clamped() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[&[1.0, 0.0, 0.0]]);
        let l = bias_rectification(&mut tape, p, &[1, 2]).unwrap();
        assert!((l.value.value - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!(tape.backward(l.var).unwrap().get("p").unwrap().all_finite());
    }

    #[test]
    fn total_objective_arithmetic() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[&[0.5, 0.25, 0.25]]);
        let lr = seg_cross_entropy(&mut tape, p, &[0], None).unwrap();
        let lb = bias_rectification(&mut tape, p, &[2]).unwrap();
        let t = total_objective(&mut tape, &lr, &lb, 0.0).unwrap();
        assert_eq!(tape.value(t).item(), Some(lr.value.value));
        let t = total_objective(&mut tape, &lr, &lb, 0.6).unwrap();
        let want = lr.value.value + 0.6 * lb.value.value;
        assert!((tape.value(t).item().unwrap() - want).abs() < 1e-15);
        assert!(total_objective(&mut tape, &lr, &lb, -0.1).is_err());

        let mut tape = Tape::new();
        let a = tape.param("a", Tensor::scalar(1.0));
        let b = tape.param("b", Tensor::scalar(0.5));
        let la = Loss {
            var: a,
            value: LossValue {
                value: 1.0,
                pixel_count: 1,
            },
        };
        let lb = Loss {
            var: b,
            value: LossValue {
                value: 0.5,
                pixel_count: 1,
            },
        };
        let t = total_objective(&mut tape, &la, &lb, 0.6).unwrap();
        assert!((tape.value(t).item().unwrap() - 1.3).abs() < 1e-15);
    }

    fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    fn lb_of(row: &[f64], unseen: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let p = tape.input(Tensor::new(vec![1, row.len()], row.to_vec()).unwrap());
        bias_rectification(&mut tape, p, unseen)
            .unwrap()
            .value
            .value
    }

    proptest! {
        #[test]
        fn bias_loss_nonnegative_and_monotone(row in distribution(6), shift in 0.01f64..0.9) {
            let unseen = [3, 5];
            let lb = lb_of(&row, &unseen);
            prop_assert!(lb >= 0.0);
            // Move a fraction of unseen mass onto a seen class.
            let mut less = row.clone();
            let moved = shift * (less[3] + less[5]);
            less[3] *= 1.0 - shift;
            less[5] *= 1.0 - shift;
            less[0] += moved;
            prop_assert!(lb_of(&less, &unseen) > lb);
        }

        #[test]
        fn bias_loss_depends_only_on_unseen_total(row in distribution(5), t in 0.0f64..1.0) {
            let unseen = [1, 2];
            let mass = row[1] + row[2];
            let mut other = row.clone();
            other[1] = t * mass;
            other[2] = (1.0 - t) * mass;
            prop_assert!((lb_of(&row, &unseen) - lb_of(&other, &unseen)).abs() < 1e-12);
        }

        #[test]
        fn ce_decreases_toward_true_class(row in distribution(4), shift in 0.01f64..0.9) {
            let ce = |r: &[f64]| {
                let mut tape = Tape::new();
                let p = tape.input(Tensor::new(vec![1, 4], r.to_vec()).unwrap());
                seg_cross_entropy(&mut tape, p, &[2], None).unwrap().value.value
            };
            let mut better = row.clone();
            let moved = shift * (1.0 - better[2]);
            for (k, v) in better.iter_mut().enumerate() {
                if k != 2 { *v *= 1.0 - shift; }
            }
            better[2] += moved;
            prop_assert!(ce(&better) < ce(&row));
        }
    }
}
