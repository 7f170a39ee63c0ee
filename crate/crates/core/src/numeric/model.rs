use rand::Rng;

use super::arch::ArchSpec;
use super::params::{GradientVector, ParamVector};
use crate::error::{AtmError, Result};
use crate::seed::rng_from_seed;
use crate::Scalar;

/// An architecture together with one point in its parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T: Scalar> {
    arch: ArchSpec,
    params: ParamVector<T>,
    pub label: String,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(arch: ArchSpec, params: ParamVector<T>, label: impl Into<String>) -> Result<Self> {
        arch.validate()?;
        params.check_len(arch.param_count())?;
        Ok(ModelState {
            arch,
            params,
            label: label.into(),
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector<T> {
        &mut self.params
    }

    pub fn into_parts(self) -> (ArchSpec, ParamVector<T>, String) {
        (self.arch, self.params, self.label)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn ensure_same_arch(&self, other: &ArchSpec) -> Result<()> {
        if &self.arch != other {
            return Err(AtmError::ArchMismatch(format!(
                "{:?} vs {:?}",
                self.arch.layer_widths, other.layer_widths
            )));
        }
        Ok(())
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero biases.
///
/// Weights are drawn layer by layer in storage order from
/// [`rng_from_seed(seed)`](crate::seed::rng_from_seed), one `f64` per weight.
pub fn init_model<T: Scalar>(arch: &ArchSpec, seed: u64) -> Result<ModelState<T>> {
    arch.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut values = vec![T::zero(); arch.param_count()];
    for slot in arch.layers() {
        let bound = 1.0 / (slot.fan_in as f64).sqrt();
        for w in &mut values[slot.offset..slot.bias_offset()] {
            let u: f64 = rng.random();
            *w = T::from_f64_lossy((2.0 * u - 1.0) * bound);
        }
    }
    ModelState::new(arch.clone(), ParamVector::from_vec(values), format!("init@seed={seed}"))
}

/// `params - eta * grad`, element-wise, reusing the model's buffer.
pub fn gd_step<T: Scalar>(mut model: ModelState<T>, grad: &GradientVector<T>, eta: T) -> Result<ModelState<T>> {
    if eta < T::zero() || !eta.is_finite() {
        return Err(AtmError::config(format!("learning rate must be finite and >= 0, got {eta}")));
    }
    model.params.check_len(grad.len())?;
    for (p, &g) in model.params.iter_mut().zip(&grad.values) {
        *p -= eta * g;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Activation;

    #[test]
    fn init_is_deterministic_and_sized() {
        let arch = ArchSpec::new(vec![2, 3, 2], Activation::Relu).unwrap();
        let a: ModelState<f64> = init_model(&arch, 7).unwrap();
        let b: ModelState<f64> = init_model(&arch, 7).unwrap();
        assert_eq!(a.params().as_slice(), b.params().as_slice());
        assert_eq!(a.params().len(), 17);
        let c: ModelState<f64> = init_model(&arch, 8).unwrap();
        assert_ne!(a.params().as_slice(), c.params().as_slice());
    }

    #[test]
    fn init_biases_zero_and_weights_bounded() {
        let arch = ArchSpec::new(vec![4, 8, 8, 3], Activation::Tanh).unwrap();
        let m: ModelState<f64> = init_model(&arch, 1).unwrap();
        for slot in arch.layers() {
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            let p = m.params();
            assert!(p[slot.offset..slot.bias_offset()].iter().all(|w| w.abs() <= bound));
            assert!(p[slot.bias_offset()..slot.range().end].iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn gd_step_arithmetic() {
        let arch = ArchSpec::new(vec![1, 1], Activation::Relu).unwrap();
        let m = ModelState::new(arch, ParamVector::from_vec(vec![1.0, 2.0]), "m").unwrap();
        let g = GradientVector {
            values: vec![0.5, -1.0],
        };
        let out = gd_step(m.clone(), &g, 0.1).unwrap();
        assert_eq!(out.params().as_slice(), &[0.95, 2.1]);
        assert_eq!(out.label, "m");

        let same = gd_step(m.clone(), &g, 0.0).unwrap();
        assert_eq!(same.params().as_slice(), m.params().as_slice());
        let zero = gd_step(m.clone(), &GradientVector::zeros(2), 0.3).unwrap();
        assert_eq!(zero.params().as_slice(), m.params().as_slice());
    }

    #[test]
    fn gd_step_rejects_bad_input() {
        let arch = ArchSpec::new(vec![1, 1], Activation::Relu).unwrap();
        let m = ModelState::new(arch, ParamVector::from_vec(vec![1.0, 2.0]), "m").unwrap();
        assert!(gd_step(m.clone(), &GradientVector::zeros(3), 0.1).is_err());
        assert!(gd_step(m, &GradientVector::zeros(2), -0.1).is_err());
    }
}
