//! Dynamic maximin UAP crafting.
//!
//! Each mini-batch runs a two-stage inner minimization before one ascent step
//! on the shared perturbation δ:
//!
//! 1. θ* ← θ, then `K_m` normalized-gradient steps of length `ρ_t/K_m` that
//!    lower the clean-batch loss (θ* stays inside the `ρ_t` ball around θ);
//! 2. X* ← X, then `K_d` ℓ2-projected steps of length `1.25·r_t/K_d` per
//!    sample against θ* (each x* stays inside the `r_t` ball around x);
//! 3. one Adam step that raises the mean loss of `f_θ*(X* + δ)`, followed by
//!    clamping δ to `[-ε, ε]`.
//!
//! With the curriculum on, `ρ_t = t·ρ/T` and `r_t = t·r/T`. Setting ρ and/or r
//! to zero (or `Order::None`) recovers the plain averaged-loss objective and
//! the single-neighborhood variants.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Reduction;
use crate::data::{minibatches, Dataset};
use crate::error::{Error, Result};
use crate::model::{backward, ensemble_backward, ensemble_predict, param_distance, ModelState, Wrt};
use crate::optim::{l2_pgd_step, normalized_descent_step, AdamConfig, AdamState, ProjectionSpec};
use crate::real::Real;
use crate::sub_seed;
use crate::tensor::{norm_l2, Tensor};

/// Input dimensionality (3·224·224) at which the default data radius applies unscaled.
pub const REFERENCE_INPUT_DIM: usize = 3 * 224 * 224;
pub const DEFAULT_RADIUS: f64 = 32.0;
pub const BUDGET_TOLERANCE: f64 = 1e-6;

/// Default data radius for inputs of `input_dim` values: `32·√(D/D₀)`.
pub fn default_radius(input_dim: usize) -> f64 {
    DEFAULT_RADIUS * (input_dim as f64 / REFERENCE_INPUT_DIM as f64).sqrt()
}

/// Sequencing of the two inner minimizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    ModelFirst,
    DataFirst,
    Alternating,
    None,
}

impl Order {
    pub const ALL: [Order; 4] = [Order::ModelFirst, Order::DataFirst, Order::Alternating, Order::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Order::ModelFirst => "model_first",
            Order::DataFirst => "data_first",
            Order::Alternating => "alternating",
            Order::None => "none",
        }
    }
}

impl std::str::FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Order::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::config("attack.order", format!("unknown order `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// ℓ∞ budget of δ in [0, 1] pixel units.
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub model_steps: usize,
    pub data_steps: usize,
    /// Maximum ℓ2 radius of θ* around θ.
    pub rho: f64,
    /// Maximum per-sample ℓ2 radius of x* around x.
    pub radius: f64,
    /// Adam learning rate for δ.
    pub gamma: f64,
    pub order: Order,
    pub curriculum: bool,
    pub clamp_data_box: bool,
    pub seed: u64,
    pub variant: String,
    pub adam: AdamConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 10.0 / 255.0,
            epochs: 20,
            batch_size: 125,
            model_steps: 10,
            data_steps: 10,
            rho: 1.0,
            radius: DEFAULT_RADIUS,
            gamma: 0.01,
            order: Order::ModelFirst,
            curriculum: true,
            clamp_data_box: false,
            seed: 0,
            variant: "dm-uap".into(),
            adam: AdamConfig::default(),
        }
    }
}

impl AttackConfig {
    /// Defaults with the data radius rescaled for `input_dim`-sized inputs.
    pub fn for_input_dim(input_dim: usize) -> Self {
        AttackConfig {
            radius: default_radius(input_dim),
            ..Default::default()
        }
    }

    /// Applies one of the named objective presets:
    /// `dm-uap` (both neighborhoods), `spgd` (neither), `data` (inputs only),
    /// `model` (parameters only). Other fields are kept.
    pub fn with_variant(mut self, variant: &str) -> Result<Self> {
        match variant {
            "dm-uap" => {}
            "spgd" => {
                self.rho = 0.0;
                self.radius = 0.0;
                self.order = Order::None;
            }
            "data" => self.rho = 0.0,
            "model" => self.radius = 0.0,
            other => {
                return Err(Error::config(
                    "attack.variant",
                    format!("unknown variant `{other}` (expected dm-uap, spgd, data or model)"),
                ))
            }
        }
        self.variant = variant.to_string();
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |key: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be a finite value >= 0, got {v}")))
            }
        };
        nonneg("attack.epsilon", self.epsilon)?;
        nonneg("attack.rho", self.rho)?;
        nonneg("attack.radius", self.radius)?;
        for (key, v) in [
            ("attack.epochs", self.epochs),
            ("attack.batch_size", self.batch_size),
            ("attack.model_steps", self.model_steps),
            ("attack.data_steps", self.data_steps),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::config("attack.gamma", "must be > 0"));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) {
            return Err(Error::config("adam.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&beta2) {
            return Err(Error::config("adam.beta2", "must lie in [0, 1)"));
        }
        if !(eps > 0.0) {
            return Err(Error::config("adam.eps", "must be > 0"));
        }
        Ok(())
    }
}

/// Neighborhood sizes and step lengths for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSchedule {
    pub epoch: usize,
    pub rho_t: f64,
    pub r_t: f64,
    pub alpha_m: f64,
    pub alpha_d: f64,
}

/// Schedule for epoch `t` (1-based).
pub fn schedule(config: &AttackConfig, t: usize) -> Result<EpochSchedule> {
    if t == 0 || t > config.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {t} outside 1..={}",
            config.epochs
        )));
    }
    let (rho_t, r_t) = if config.curriculum {
        let (t, total) = (t as f64, config.epochs as f64);
        (t * config.rho / total, t * config.radius / total)
    } else {
        (config.rho, config.radius)
    };
    Ok(EpochSchedule {
        epoch: t,
        rho_t,
        r_t,
        alpha_m: rho_t / config.model_steps as f64,
        alpha_d: 1.25 * r_t / config.data_steps as f64,
    })
}

/// The whole curriculum, epochs `1..=T`.
pub fn curriculum(config: &AttackConfig) -> Result<Vec<EpochSchedule>> {
    (1..=config.epochs).map(|t| schedule(config, t)).collect()
}

/// One normalized descent step on the clean-batch loss of `theta_star`.
pub fn model_step<F: Real>(theta_star: &ModelState<F>, x: &Tensor<F>, labels: &[usize], alpha_m: f64) -> Result<ModelState<F>> {
    if alpha_m == 0.0 {
        return Ok(theta_star.clone());
    }
    let g = backward(theta_star, x, labels, Wrt::Parameters)?;
    let next = normalized_descent_step(theta_star.params(), &g.grad, alpha_m)?;
    theta_star.with_params(next)
}

/// `K_m` model steps of length `ρ_t/K_m` starting from θ. The input model is untouched.
pub fn inner_model_opt<F: Real>(
    model: &ModelState<F>,
    x: &Tensor<F>,
    labels: &[usize],
    rho_t: f64,
    model_steps: usize,
) -> Result<ModelState<F>> {
    if model_steps == 0 {
        return Err(Error::InvalidArgument("model_steps must be >= 1".into()));
    }
    let alpha = rho_t / model_steps as f64;
    let mut theta_star = model.clone();
    for _ in 0..model_steps {
        theta_star = model_step(&theta_star, x, labels, alpha)?;
    }
    Ok(theta_star)
}

/// One projected descent step for every sample of `x_star`, each against its
/// own clean sample `x` as ball center. Samples are processed independently.
pub fn data_step<F: Real>(
    models: &[&ModelState<F>],
    x_star: &Tensor<F>,
    x: &Tensor<F>,
    labels: &[usize],
    alpha_d: f64,
    r_t: f64,
    clamp_box: bool,
) -> Result<Tensor<F>> {
    x_star.ensure_same_shape(x, "data step")?;
    if alpha_d == 0.0 && !clamp_box {
        return Ok(x_star.clone());
    }
    let g = ensemble_backward(models, x_star, labels, Wrt::Input, Reduction::Sum)?;
    let sample_shape = &x.shape()[1..];
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.shape()[0] {
        let xi = Tensor::from_parts(sample_shape.to_vec(), x_star.outer_slice(i).to_vec());
        let gi = Tensor::from_parts(sample_shape.to_vec(), g.grad.outer_slice(i).to_vec());
        let ci = Tensor::from_parts(sample_shape.to_vec(), x.outer_slice(i).to_vec());
        let spec = ProjectionSpec::new(ci, r_t)?;
        out.extend(l2_pgd_step(&xi, &gi, alpha_d, &spec, clamp_box)?.into_data());
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `K_d` projected steps of length `1.25·r_t/K_d` per sample against a fixed model.
pub fn inner_data_opt<F: Real>(
    model: &ModelState<F>,
    x: &Tensor<F>,
    labels: &[usize],
    r_t: f64,
    data_steps: usize,
    clamp_box: bool,
) -> Result<Tensor<F>> {
    if data_steps == 0 {
        return Err(Error::InvalidArgument("data_steps must be >= 1".into()));
    }
    if r_t == 0.0 {
        return Ok(x.clone());
    }
    let alpha = 1.25 * r_t / data_steps as f64;
    let mut x_star = x.clone();
    for _ in 0..data_steps {
        x_star = data_step(&[model], &x_star, x, labels, alpha, r_t, clamp_box)?;
    }
    Ok(x_star)
}

/// Largest `F` value not exceeding `bound`.
fn floor_to<F: Real>(bound: f64) -> F {
    let mut v = F::of(bound);
    while v.as_f64() > bound {
        v = v * (F::one() - F::epsilon() - F::epsilon());
    }
    v
}

/// The perturbation under construction and its optimizer state.
#[derive(Debug, Clone)]
pub struct UapState<F> {
    delta: Tensor<F>,
    adam: AdamState<F>,
    epsilon: f64,
    bound: F,
}

impl<F: Real> UapState<F> {
    /// δ ~ U(-ε, ε) from `seed`.
    pub fn init(shape: &[usize], epsilon: f64, seed: u64, adam: AdamConfig) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be >= 0")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = floor_to::<F>(epsilon);
        let delta = Tensor::from_fn(shape, |_| {
            if epsilon > 0.0 {
                F::of(rng.random_range(-epsilon..epsilon)).max(-bound).min(bound)
            } else {
                F::zero()
            }
        });
        Ok(UapState {
            delta,
            adam: AdamState::new(shape, adam)?,
            epsilon,
            bound,
        })
    }

    pub fn from_delta(delta: Tensor<F>, epsilon: f64, adam: AdamConfig) -> Result<Self> {
        let adam = AdamState::new(delta.shape(), adam)?;
        let mut s = UapState {
            delta: Tensor::zeros(adam.first_moment().shape()),
            adam,
            epsilon,
            bound: floor_to::<F>(epsilon),
        };
        s.apply_update(&delta)?;
        Ok(s)
    }

    pub fn delta(&self) -> &Tensor<F> {
        &self.delta
    }

    pub fn into_delta(self) -> Tensor<F> {
        self.delta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn adam(&self) -> &AdamState<F> {
        &self.adam
    }

    /// δ ← clamp(δ + update, -ε, ε).
    pub fn apply_update(&mut self, update: &Tensor<F>) -> Result<()> {
        self.delta.ensure_same_shape(update, "uap update")?;
        let b = self.bound;
        for (d, &u) in self.delta.data_mut().iter_mut().zip(update.data()) {
            *d = (*d + u).max(-b).min(b);
        }
        self.delta.check_finite("perturbation")
    }

    /// One Adam ascent step on the mean loss of `models` at `x_star + δ`.
    /// Returns the loss evaluated before the step.
    pub fn update(&mut self, models: &[&ModelState<F>], x_star: &Tensor<F>, labels: &[usize], gamma: f64) -> Result<F> {
        let g = ensemble_backward(models, x_star, labels, Wrt::Perturbation(&self.delta), Reduction::Mean)?;
        let ascent = g.grad.map(|v| -v);
        let step = self.adam.step(&ascent, gamma)?;
        self.apply_update(&step)?;
        Ok(g.loss)
    }
}

/// Free-function form of [`UapState::update`] for a single model.
pub fn uap_update<F: Real>(
    uap: &mut UapState<F>,
    theta_star: &ModelState<F>,
    x_star: &Tensor<F>,
    labels: &[usize],
    gamma: f64,
) -> Result<F> {
    uap.update(&[theta_star], x_star, labels, gamma)
}

/// Everything an observer can inspect after a mini-batch's δ update.
pub struct StepEvent<'a, F> {
    pub epoch: usize,
    pub batch: usize,
    pub schedule: &'a EpochSchedule,
    pub clean_models: &'a [ModelState<F>],
    pub theta_star: &'a [ModelState<F>],
    pub clean_x: &'a Tensor<F>,
    pub x_star: &'a Tensor<F>,
    pub labels: &'a [usize],
    pub delta: &'a Tensor<F>,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub rho_t: f64,
    pub r_t: f64,
    pub alpha_m: f64,
    pub alpha_d: f64,
    /// Mean of `L(f_θ*(X* + δ))` over the epoch's samples, before each update.
    pub mean_loss: f64,
    pub theta_shift_mean: f64,
    pub theta_shift_max: f64,
    pub data_shift_mean: f64,
    pub data_shift_max: f64,
    pub delta_linf: f64,
    pub elapsed_ms: u128,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
    pub budget_violations: usize,
    pub batches: usize,
}

impl RunLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_to(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CraftOutput<F> {
    pub delta: Tensor<F>,
    pub log: RunLog,
    pub pseudo_labels: Vec<usize>,
}

/// Runs the inner minimizations for one mini-batch in the configured order.
pub fn inner_minimize<F: Real>(
    order: Order,
    models: &[ModelState<F>],
    x: &Tensor<F>,
    labels: &[usize],
    sched: &EpochSchedule,
    model_steps: usize,
    data_steps: usize,
    clamp_box: bool,
) -> Result<(Vec<ModelState<F>>, Tensor<F>)> {
    let mut thetas: Vec<ModelState<F>> = models.to_vec();
    let mut x_star = x.clone();
    let model_active = sched.alpha_m > 0.0;
    let data_active = sched.alpha_d > 0.0;

    let model_pass = |thetas: &mut Vec<ModelState<F>>, xs: &Tensor<F>| -> Result<()> {
        for t in thetas.iter_mut() {
            *t = model_step(t, xs, labels, sched.alpha_m)?;
        }
        Ok(())
    };
    let data_pass = |thetas: &[ModelState<F>], xs: &Tensor<F>| -> Result<Tensor<F>> {
        let refs: Vec<&ModelState<F>> = thetas.iter().collect();
        data_step(&refs, xs, x, labels, sched.alpha_d, sched.r_t, clamp_box)
    };

    match order {
        Order::None => {}
        Order::ModelFirst => {
            if model_active {
                for _ in 0..model_steps {
                    model_pass(&mut thetas, x)?;
                }
            }
            if data_active {
                for _ in 0..data_steps {
                    x_star = data_pass(&thetas, &x_star)?;
                }
            }
        }
        Order::DataFirst => {
            if data_active {
                for _ in 0..data_steps {
                    x_star = data_pass(&thetas, &x_star)?;
                }
            }
            if model_active {
                for _ in 0..model_steps {
                    model_pass(&mut thetas, &x_star)?;
                }
            }
        }
        Order::Alternating => {
            for k in 0..model_steps.max(data_steps) {
                if model_active && k < model_steps {
                    model_pass(&mut thetas, &x_star)?;
                }
                if data_active && k < data_steps {
                    x_star = data_pass(&thetas, &x_star)?;
                }
            }
        }
    }
    Ok((thetas, x_star))
}

/// Crafts a UAP against `models` (one model, or an ensemble whose losses are averaged).
pub fn craft<F: Real>(config: &AttackConfig, models: &[ModelState<F>], dataset: &Dataset<F>) -> Result<CraftOutput<F>> {
    craft_observed(config, models, dataset, |_| {})
}

/// [`craft`] with a callback invoked after every mini-batch update.
pub fn craft_observed<F: Real>(
    config: &AttackConfig,
    models: &[ModelState<F>],
    dataset: &Dataset<F>,
    mut observer: impl FnMut(&StepEvent<'_, F>),
) -> Result<CraftOutput<F>> {
    config.validate()?;
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("craft needs at least one model".into()))?;
    if dataset.sample_shape() != first.input_shape() {
        return Err(Error::Shape(format!(
            "dataset samples {:?} do not match model input {:?}",
            dataset.sample_shape(),
            first.input_shape()
        )));
    }
    let clean: Vec<&ModelState<F>> = models.iter().collect();
    let pseudo = ensemble_predict(&clean, dataset.images())?;
    let labeled = dataset.with_labels(pseudo.clone())?;

    let mut uap = UapState::<F>::init(
        first.input_shape(),
        config.epsilon,
        sub_seed(config.seed, "init-delta"),
        config.adam,
    )?;
    let shuffle_seed = sub_seed(config.seed, "shuffle");
    let mut log = RunLog::default();

    for t in 1..=config.epochs {
        let started = Instant::now();
        let sched = schedule(config, t)?;
        let mut loss_sum = 0.0;
        let mut theta_shift = (0.0f64, 0.0f64, 0usize);
        let mut data_shift = (0.0f64, 0.0f64, 0usize);
        let batches = minibatches(&labeled, config.batch_size, shuffle_seed ^ t as u64)?;
        for (b, batch) in batches.iter().enumerate() {
            let wrap = |e: Error| Error::Craft {
                epoch: t,
                batch: b,
                source: Box::new(e),
            };
            let (thetas, x_star) = inner_minimize(
                config.order,
                models,
                &batch.images,
                &batch.labels,
                &sched,
                config.model_steps,
                config.data_steps,
                config.clamp_data_box,
            )
            .map_err(wrap)?;

            let refs: Vec<&ModelState<F>> = thetas.iter().collect();
            let loss = uap
                .update(&refs, &x_star, &batch.labels, config.gamma)
                .map_err(wrap)?;
            loss_sum += loss.as_f64() * batch.len() as f64;

            let mut violations = 0;
            for (clean, star) in models.iter().zip(&thetas) {
                let d = param_distance(clean, star).map_err(wrap)?;
                theta_shift.0 += d;
                theta_shift.1 = theta_shift.1.max(d);
                theta_shift.2 += 1;
                if d > sched.rho_t + BUDGET_TOLERANCE {
                    violations += 1;
                }
            }
            for i in 0..batch.len() {
                let d: Vec<F> = x_star
                    .outer_slice(i)
                    .iter()
                    .zip(batch.images.outer_slice(i))
                    .map(|(&a, &c)| a - c)
                    .collect();
                let d = norm_l2(&d);
                data_shift.0 += d;
                data_shift.1 = data_shift.1.max(d);
                data_shift.2 += 1;
                if d > sched.r_t + BUDGET_TOLERANCE {
                    violations += 1;
                }
            }
            if uap.delta().norm_linf() > config.epsilon {
                violations += 1;
            }
            debug_assert_eq!(violations, 0, "budget violated at epoch {t}, batch {b}");
            log.budget_violations += violations;
            log.batches += 1;

            observer(&StepEvent {
                epoch: t,
                batch: b,
                schedule: &sched,
                clean_models: models,
                theta_star: &thetas,
                clean_x: &batch.images,
                x_star: &x_star,
                labels: &batch.labels,
                delta: uap.delta(),
                epsilon: config.epsilon,
            });
        }
        log.epochs.push(EpochLog {
            epoch: t,
            rho_t: sched.rho_t,
            r_t: sched.r_t,
            alpha_m: sched.alpha_m,
            alpha_d: sched.alpha_d,
            mean_loss: loss_sum / labeled.len() as f64,
            theta_shift_mean: theta_shift.0 / theta_shift.2.max(1) as f64,
            theta_shift_max: theta_shift.1,
            data_shift_mean: data_shift.0 / data_shift.2.max(1) as f64,
            data_shift_max: data_shift.1,
            delta_linf: uap.delta().norm_linf(),
            elapsed_ms: started.elapsed().as_millis(),
        });
    }
    Ok(CraftOutput {
        delta: uap.into_delta(),
        log,
        pseudo_labels: pseudo,
    })
}
