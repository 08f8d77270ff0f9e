use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

/// Tape handles of a bound [`ParamSet`], keyed by parameter name.
pub type ParamVars = BTreeMap<String, Var>;

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar components across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Records every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        self.tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(name, t.clone())))
            .collect()
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| {
                    na == nb
                        && a.shape() == b.shape()
                        && a.data()
                            .iter()
                            .zip(b.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    tensors: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Gradients { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn all_zero(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}

/// Classical heavy-ball momentum: `v <- mu * v + g; theta <- theta - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdMomentum {
    momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl SgdMomentum {
    /// Creates zeroed velocity buffers shaped like `params`.
    pub fn new(params: &ParamSet, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        let velocity = params
            .iter()
            .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape())))
            .collect();
        Ok(SgdMomentum { momentum, velocity })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }

    /// Applies one update. Nothing is modified if any gradient is missing or misshapen.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be finite and >= 0, got {lr}"
            )));
        }
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !self.velocity.contains_key(name) {
                return Err(Error::invalid(format!("no momentum buffer for `{name}`")));
            }
        }
        let mu = self.momentum;
        for (name, p) in params.tensors.iter_mut() {
            let g = &grads.tensors[name];
            let v = self.velocity.get_mut(name).expect("checked above");
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Polynomial decay: `base_lr * (1 - step / total_steps) ^ power`.
pub fn poly_lr(step: usize, total_steps: usize, base_lr: f64, power: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("total_steps must be positive"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!(
            "step {step} exceeds total_steps {total_steps}"
        )));
    }
    if !(base_lr > 0.0 && power > 0.0) {
        return Err(Error::invalid("base_lr and power must be positive"));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64).powf(power))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(theta: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::scalar(theta));
        p
    }

    fn grad(g: f64) -> Gradients {
        Gradients::from_map([("theta".to_string(), Tensor::scalar(g))].into())
    }

    #[test]
    fn momentum_two_steps_by_hand() {
        let mut p = single(1.0);
        let mut opt = SgdMomentum::new(&p, 0.9).unwrap();
        opt.step(&mut p, &grad(0.5), 0.1).unwrap();
        assert!((opt.velocity("theta").unwrap().item().unwrap() - 0.5).abs() < 1e-15);
        assert!((p.get("theta").unwrap().item().unwrap() - 0.95).abs() < 1e-15);
        opt.step(&mut p, &grad(0.5), 0.1).unwrap();
        assert!((opt.velocity("theta").unwrap().item().unwrap() - 0.95).abs() < 1e-15);
        assert!((p.get("theta").unwrap().item().unwrap() - 0.855).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_zero_velocity_is_fixed_point() {
        let mut p = single(-2.0);
        let before = p.clone();
        let mut opt = SgdMomentum::new(&p, 0.9).unwrap();
        opt.step(&mut p, &grad(0.0), 0.1).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn missing_gradient_rejected_without_mutation() {
        let mut p = single(1.0);
        p.insert("other", Tensor::zeros(&[2]));
        let before = p.clone();
        let mut opt = SgdMomentum::new(&p, 0.9).unwrap();
        let err = opt.step(&mut p, &grad(1.0), 0.1);
        assert!(matches!(err, Err(Error::MissingGradient(n)) if n == "other"));
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn buffers_start_at_zero_with_param_shapes() {
        let mut p = ParamSet::new();
        p.insert("k", Tensor::full(&[3, 3, 2, 4], 1.0));
        let opt = SgdMomentum::new(&p, 0.5).unwrap();
        let v = opt.velocity("k").unwrap();
        assert_eq!(v.shape(), &[3, 3, 2, 4]);
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert!(SgdMomentum::new(&p, 1.0).is_err());
    }

    #[test]
    fn poly_lr_boundaries() {
        assert_eq!(poly_lr(0, 100, 1e-4, 0.9).unwrap(), 1e-4);
        assert_eq!(poly_lr(100, 100, 1e-4, 0.9).unwrap(), 0.0);
        // 1e-4 * 0.5^0.9
        let mid = poly_lr(50, 100, 1e-4, 0.9).unwrap();
        assert!((mid - 5.358867312681466e-5).abs() < 1e-18);
        assert!(poly_lr(101, 100, 1e-4, 0.9).is_err());
    }
}
