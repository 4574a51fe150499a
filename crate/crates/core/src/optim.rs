//! Update rules composed by the crafting loop: normalized-gradient descent on
//! parameters, ℓ2-projected descent on inputs and Adam on the perturbation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{norm_l2, Tensor};

/// Gradients with an ℓ2 norm below this are treated as zero and the step is skipped.
pub const ZERO_GRAD_THRESHOLD: f64 = 1e-12;

fn check_step_args<F: Real>(x: &Tensor<F>, grad: &Tensor<F>, alpha: f64, what: &str) -> Result<()> {
    x.ensure_same_shape(grad, what)?;
    grad.check_finite(&format!("{what} gradient"))?;
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("{what}: step size {alpha} must be >= 0")));
    }
    Ok(())
}

/// `θ - α·g/‖g‖₂`, or `θ` unchanged when `‖g‖₂ < 1e-12`.
pub fn normalized_descent_step<F: Real>(theta: &Tensor<F>, grad: &Tensor<F>, alpha: f64) -> Result<Tensor<F>> {
    check_step_args(theta, grad, alpha, "normalized descent")?;
    let norm = grad.norm_l2();
    if norm < ZERO_GRAD_THRESHOLD || alpha == 0.0 {
        return Ok(theta.clone());
    }
    let k = F::of(alpha / norm);
    theta.zip_map(grad, |t, g| t - k * g)
}

/// Euclidean ball used by the data update.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSpec<F> {
    pub center: Tensor<F>,
    pub radius: f64,
}

impl<F: Real> ProjectionSpec<F> {
    pub fn new(center: Tensor<F>, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::InvalidArgument(format!("projection radius {radius} must be >= 0")));
        }
        Ok(ProjectionSpec { center, radius })
    }
}

/// Projects `v` onto the ball. Points already inside are returned unchanged;
/// points outside are pulled radially onto the sphere, with the scale nudged
/// down until the rounded result lies inside, so projecting twice is a no-op.
pub fn l2_project<F: Real>(v: &Tensor<F>, spec: &ProjectionSpec<F>) -> Result<Tensor<F>> {
    v.ensure_same_shape(&spec.center, "l2 projection")?;
    v.check_finite("l2 projection input")?;
    let c = spec.center.data();
    let disp: Vec<F> = v.data().iter().zip(c).map(|(&a, &b)| a - b).collect();
    let norm = norm_l2(&disp);
    if norm <= spec.radius {
        return Ok(v.clone());
    }
    if spec.radius == 0.0 {
        return Ok(spec.center.clone());
    }
    let mut scale = spec.radius / norm;
    loop {
        let k = F::of(scale);
        let out: Vec<F> = disp.iter().zip(c).map(|(&d, &b)| b + d * k).collect();
        let moved = out.iter().zip(c).map(|(&a, &b)| a - b).collect::<Vec<F>>();
        if norm_l2(&moved) <= spec.radius {
            return Ok(Tensor::from_parts(v.shape().to_vec(), out));
        }
        scale *= 1.0 - 4.0 * F::epsilon().as_f64();
    }
}

/// One projected step `Π(x - α·g/‖g‖₂)` that descends the loss, optionally
/// clamped to the `[0, 1]` pixel box afterwards.
pub fn l2_pgd_step<F: Real>(
    x: &Tensor<F>,
    grad: &Tensor<F>,
    alpha: f64,
    spec: &ProjectionSpec<F>,
    clamp_box: bool,
) -> Result<Tensor<F>> {
    check_step_args(x, grad, alpha, "l2 PGD")?;
    let stepped = normalized_descent_step(x, grad, alpha)?;
    let projected = l2_project(&stepped, spec)?;
    Ok(if clamp_box {
        projected.map(|v| v.max(F::zero()).min(F::one()))
    } else {
        projected
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment state for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    m: Tensor<F>,
    v: Tensor<F>,
    step_count: u64,
    config: AdamConfig,
}

impl<F: Real> AdamState<F> {
    pub fn new(shape: &[usize], config: AdamConfig) -> Result<Self> {
        let AdamConfig { beta1, beta2, eps } = config;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid Adam constants {config:?}")));
        }
        Ok(AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step_count: 0,
            config,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &Tensor<F> {
        &self.m
    }

    pub fn second_moment(&self) -> &Tensor<F> {
        &self.v
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Bias-corrected Adam update `-γ·m̂/(√v̂ + ε̂)` for gradient `grad`.
    /// The caller adds the returned update; to ascend a loss, pass its negated gradient.
    pub fn step(&mut self, grad: &Tensor<F>, gamma: f64) -> Result<Tensor<F>> {
        self.m.ensure_same_shape(grad, "adam step")?;
        grad.check_finite("adam gradient")?;
        if !(gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {gamma} must be > 0")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let c1 = F::of(1.0 - beta1.powi(t));
        let c2 = F::of(1.0 - beta2.powi(t));
        let (lr, eps) = (F::of(gamma), F::of(eps));
        let mut update = Vec::with_capacity(grad.len());
        for ((m, v), &g) in self
            .m
            .data_mut()
            .iter_mut()
            .zip(self.v.data_mut().iter_mut())
            .zip(grad.data())
        {
            *m = b1 * *m + (F::one() - b1) * g;
            *v = b2 * *v + (F::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            update.push(-(lr * (m_hat / (v_hat.sqrt() + eps))));
        }
        Ok(Tensor::from_parts(grad.shape().to_vec(), update))
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step<F: Real>(mut state: AdamState<F>, grad: &Tensor<F>, gamma: f64) -> Result<(Tensor<F>, AdamState<F>)> {
    let update = state.step(grad, gamma)?;
    Ok((update, state))
}
