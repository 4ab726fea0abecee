//! ℓ∞ projected sign-gradient attacks.
//!
//! Every iterate is `Π(x + dir · α · sign(∇ℓ))`, where `Π` clamps the
//! perturbation to the ε-ball around the natural input and then clamps the
//! result to `[0, 1]`. `dir = +1` is the usual PGD ascent; `dir = -1` gives
//! the loss-decreasing perturbation used to inject easier training naturals.

use crate::array::{project_linf_in_place, DenseArray};
use crate::error::{Error, Result};
use crate::models::{cross_entropy, cross_entropy_values, forward, kl_div, predict, ModelParams, ModelSpec};
use crate::rng::Rng;
use crate::tape::Tape;

pub const PIXEL_MIN: f32 = 0.0;
pub const PIXEL_MAX: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    /// ℓ∞ budget in `[0, 1]` pixel units.
    pub eps: f32,
    pub alpha: f32,
    pub steps: usize,
    /// Start from `U(-eps, eps)` noise instead of the natural input.
    pub rand_init: bool,
}

impl AttackConfig {
    /// ε = 8/255, α = 2/255, 10 steps, random start.
    pub fn standard() -> Self {
        Self {
            eps: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            rand_init: true,
        }
    }

    /// PGD-20 at the standard budget.
    pub fn pgd20() -> Self {
        Self {
            steps: 20,
            ..Self::standard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::contract("AttackConfig", format!("eps = {}", self.eps)));
        }
        if self.steps > 0 && !(self.alpha > 0.0) {
            return Err(Error::contract(
                "AttackConfig",
                format!("alpha = {} with {} steps", self.alpha, self.steps),
            ));
        }
        Ok(())
    }
}

/// Natural batch with its perturbed counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvBatch {
    pub x: DenseArray,
    pub x_adv: DenseArray,
    pub y: Vec<usize>,
    /// Cross-entropy at `x_adv`.
    pub loss_per_example: Vec<f32>,
    /// Dataset index of every row.
    pub ids: Vec<usize>,
}

impl AdvBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Keeps only `rows`, in the given order.
    pub fn select(&self, rows: &[usize]) -> AdvBatch {
        AdvBatch {
            x: self.x.select_rows(rows),
            x_adv: self.x_adv.select_rows(rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            loss_per_example: rows.iter().map(|&r| self.loss_per_example[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
        }
    }

    /// Fails unless every row is inside `[0, 1]` and within `budget(row)` of
    /// its natural input, up to one ulp of the pixel range.
    pub fn check_feasible(&self, budget: impl Fn(usize) -> f32) -> Result<()> {
        let dists = self.x_adv.row_linf_distances(&self.x)?;
        for (i, d) in dists.into_iter().enumerate() {
            let b = budget(i);
            if d > b + f32::EPSILON * PIXEL_MAX {
                return Err(Error::contract(
                    "AdvBatch",
                    format!("row {i}: |x_adv - x|_inf = {d} exceeds {b}"),
                ));
            }
            if self
                .x_adv
                .row(i)
                .iter()
                .any(|v| !(PIXEL_MIN..=PIXEL_MAX).contains(v))
            {
                return Err(Error::contract("AdvBatch", format!("row {i} leaves [0, 1]")));
            }
        }
        Ok(())
    }
}

/// What the sign steps differentiate.
#[derive(Clone, Copy)]
pub(crate) enum Objective<'a> {
    CrossEntropy(&'a [usize]),
    /// `KL(softmax(natural) || softmax(f(x')))` against fixed natural logits.
    KlFromNatural(&'a DenseArray),
}

/// `steps` projected sign-gradient iterations from `start` around `center`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sign_steps(
    spec: &ModelSpec,
    params: &ModelParams,
    center: &DenseArray,
    start: DenseArray,
    objective: Objective<'_>,
    eps: f32,
    alpha: f32,
    steps: usize,
    ascend: bool,
) -> Result<DenseArray> {
    let step = if ascend { alpha } else { -alpha };
    let mut current = start;
    for k in 0..steps {
        let mut tape = Tape::new();
        let pnodes = params.bind(&mut tape, false);
        let xi = tape.leaf(current.clone());
        let logits = forward(spec, &mut tape, &pnodes, xi)?;
        let loss = match objective {
            Objective::CrossEntropy(y) => cross_entropy(&mut tape, logits, y)?.1,
            Objective::KlFromNatural(nat) => {
                let p = tape.constant(nat.clone());
                kl_div(&mut tape, p, logits)?
            }
        };
        let grad = tape.backward(loss, &[xi]).map_err(|e| e.at_step(k))?;
        let Some(grad) = grad.get(xi) else {
            // Loss independent of the input: nothing moves.
            continue;
        };
        for (v, &g) in current.data_mut().iter_mut().zip(grad.data()) {
            *v += step * crate::array::sign_scalar(g);
        }
        project_linf_in_place(current.data_mut(), center.data(), eps, PIXEL_MIN, PIXEL_MAX);
    }
    Ok(current)
}

/// `x + U(-eps, eps)` clamped to the pixel range.
pub(crate) fn uniform_start(x: &DenseArray, eps: f32, rng: &mut Rng) -> DenseArray {
    x.map(|v| (v + rng.uniform_range(-eps, eps)).clamp(PIXEL_MIN, PIXEL_MAX))
}

pub(crate) fn clamp_pixels(x: &DenseArray) -> DenseArray {
    x.map(|v| v.clamp(PIXEL_MIN, PIXEL_MAX))
}

/// Per-example cross-entropy at `x` without gradients.
pub fn example_losses(spec: &ModelSpec, params: &ModelParams, x: &DenseArray, y: &[usize]) -> Result<Vec<f32>> {
    let logits = predict(spec, params, x)?;
    cross_entropy_values(&logits, y)
}

/// ℓ∞ PGD on the cross-entropy loss.
pub fn pgd_attack(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &DenseArray,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<AdvBatch> {
    Ok(pgd_with_logits(spec, params, x, y, cfg, rng)?.0)
}

/// [`pgd_attack`] that also returns the logits at `x_adv`.
pub(crate) fn pgd_with_logits(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &DenseArray,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<(AdvBatch, DenseArray)> {
    cfg.validate()?;
    if x.rows() != y.len() {
        return Err(Error::contract(
            "pgd_attack",
            format!("{} inputs for {} labels", x.rows(), y.len()),
        ));
    }
    let start = if cfg.rand_init {
        uniform_start(x, cfg.eps, rng)
    } else {
        clamp_pixels(x)
    };
    let x_adv = sign_steps(
        spec,
        params,
        x,
        start,
        Objective::CrossEntropy(y),
        cfg.eps,
        cfg.alpha,
        cfg.steps,
        true,
    )?;
    let logits = predict(spec, params, &x_adv)?;
    let loss_per_example = cross_entropy_values(&logits, y)?;
    let batch = AdvBatch {
        x: x.clone(),
        x_adv,
        y: y.to_vec(),
        loss_per_example,
        ids: (0..y.len()).collect(),
    };
    #[cfg(debug_assertions)]
    if x.data().iter().all(|v| (PIXEL_MIN..=PIXEL_MAX).contains(v)) {
        batch.check_feasible(|_| cfg.eps)?;
    }
    Ok((batch, logits))
}

/// Settings of the loss-decreasing perturbation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OppositeConfig {
    pub eps: f32,
    pub steps: usize,
    pub alpha: f32,
}

impl OppositeConfig {
    /// Five steps of `eps / 4`.
    pub fn with_budget(eps: f32) -> Self {
        Self {
            eps,
            steps: 5,
            alpha: eps / 4.0,
        }
    }
}

/// Moves `x` down the cross-entropy within an `eps`-ball (no random start).
pub fn opposite_perturb(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &DenseArray,
    y: &[usize],
    cfg: &OppositeConfig,
) -> Result<DenseArray> {
    if !(cfg.eps >= 0.0) {
        return Err(Error::contract("opposite_perturb", format!("eps = {}", cfg.eps)));
    }
    if cfg.eps == 0.0 || cfg.steps == 0 {
        return Ok(x.clone());
    }
    sign_steps(
        spec,
        params,
        x,
        clamp_pixels(x),
        Objective::CrossEntropy(y),
        cfg.eps,
        cfg.alpha,
        cfg.steps,
        false,
    )
}

/// Budget ramp: 0 before `e_start`, linear up to `eps_max` at `e_end`, flat after.
pub fn linear_budget(epoch: usize, e_start: usize, e_end: usize, eps_max: f32) -> f32 {
    assert!(e_start < e_end, "empty budget window [{e_start}, {e_end}]");
    if epoch <= e_start {
        0.0
    } else if epoch >= e_end {
        eps_max
    } else {
        let frac = (epoch - e_start) as f32 / (e_end - e_start) as f32;
        (eps_max * frac).clamp(0.0, eps_max)
    }
}

/// Step count that grows linearly with the budget: `round(steps · eps_a / eps)`.
pub fn scaled_steps(eps_a: f32, eps: f32, steps: usize) -> usize {
    if eps <= 0.0 {
        return steps;
    }
    // Budgets arrive as f32 fractions like 14/255; snap the ratio so exact
    // halves round up instead of drifting below .5.
    let ratio = steps as f64 * eps_a as f64 / eps as f64;
    ((ratio * 1e4).round() / 1e4).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::init_params;

    fn toy() -> (ModelSpec, ModelParams, DenseArray, Vec<usize>) {
        let spec = ModelSpec::mlp(&[6, 8, 3]);
        let params = init_params(&spec, &mut Rng::new(11)).unwrap();
        let mut r = Rng::new(12);
        let x = DenseArray::new(vec![5, 6], (0..30).map(|_| r.uniform()).collect()).unwrap();
        (spec, params, x, vec![0, 1, 2, 0, 1])
    }

    #[test]
    fn zero_budget_returns_natural() {
        let (spec, params, x, y) = toy();
        let cfg = AttackConfig {
            eps: 0.0,
            ..AttackConfig::standard()
        };
        let adv = pgd_attack(&spec, &params, &x, &y, &cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(adv.x_adv, x);
        assert_eq!(adv.loss_per_example, example_losses(&spec, &params, &x, &y).unwrap());
    }

    #[test]
    fn standard_attack_is_feasible_and_hurts() {
        let (spec, params, x, y) = toy();
        let adv = pgd_attack(&spec, &params, &x, &y, &AttackConfig::standard(), &mut Rng::new(2)).unwrap();
        adv.check_feasible(|_| 8.0 / 255.0).unwrap();
        let nat: f32 = example_losses(&spec, &params, &x, &y).unwrap().iter().sum();
        let rob: f32 = adv.loss_per_example.iter().sum();
        assert!(rob >= nat);
    }

    #[test]
    fn rejects_bad_config() {
        let (spec, params, x, y) = toy();
        let cfg = AttackConfig {
            alpha: 0.0,
            ..AttackConfig::standard()
        };
        assert!(pgd_attack(&spec, &params, &x, &y, &cfg, &mut Rng::new(1)).is_err());
        let cfg = AttackConfig {
            eps: -0.1,
            ..AttackConfig::standard()
        };
        assert!(pgd_attack(&spec, &params, &x, &y, &cfg, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn opposite_zero_budget_is_identity() {
        let (spec, params, x, y) = toy();
        let out = opposite_perturb(&spec, &params, &x, &y, &OppositeConfig::with_budget(0.0)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn opposite_lowers_loss() {
        let (spec, params, x, y) = toy();
        let cfg = OppositeConfig::with_budget(4.0 / 255.0);
        let out = opposite_perturb(&spec, &params, &x, &y, &cfg).unwrap();
        assert!(out.linf_distance(&x).unwrap() <= cfg.eps + f32::EPSILON);
        let before = example_losses(&spec, &params, &x, &y).unwrap();
        let after = example_losses(&spec, &params, &out, &y).unwrap();
        for (a, b) in after.iter().zip(&before) {
            assert!(a <= b);
        }
    }

    #[test]
    fn linear_budget_examples() {
        let e = 8.0 / 255.0;
        assert_eq!(linear_budget(50, 50, 100, e), 0.0);
        assert_eq!(linear_budget(10, 50, 100, e), 0.0);
        assert_eq!(linear_budget(75, 50, 100, e), 4.0 / 255.0);
        assert_eq!(linear_budget(110, 50, 100, e), e);
        assert_eq!(linear_budget(100, 50, 100, e), e);
    }

    #[test]
    fn step_scaling() {
        assert_eq!(scaled_steps(8.0 / 255.0, 8.0 / 255.0, 10), 10);
        assert_eq!(scaled_steps(16.0 / 255.0, 8.0 / 255.0, 10), 20);
        assert_eq!(scaled_steps(14.0 / 255.0, 8.0 / 255.0, 10), 18);
        assert_eq!(scaled_steps(0.0, 8.0 / 255.0, 10), 0);
    }
}
