//! Small-loss partitioning and the batch hooks built on it: factor
//! ablation, opposite-direction injection into training naturals, and the
//! two mitigations that act on small-loss rows (a stronger attack, or
//! augmentation until enough rows leave the small-loss set).
//!
//! Hooks draw randomness only from `(tag, epoch, batch)` sub-streams and
//! only when they actually touch a row, so a hook that selects nothing is
//! bitwise invisible.

use std::collections::BTreeSet;

use crate::array::DenseArray;
use crate::attacks::{linear_budget, opposite_perturb, pgd_attack, scaled_steps, AdvBatch, AttackConfig, OppositeConfig};
use crate::augment::Augmenter;
use crate::error::{Error, Result};
use crate::models::{ModelParams, ModelSpec};
use crate::rng::{stream, Rng};
use crate::trainers::{BatchContext, BatchHook, BatchStats};

/// Rows of a batch split by recorded adversarial loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SmallLossSplit {
    /// Rows with loss `<= threshold`.
    pub small: Vec<usize>,
    pub rest: Vec<usize>,
    pub threshold: f32,
}

pub fn split_small_loss(adv: &AdvBatch, t: f32) -> SmallLossSplit {
    let (small, rest) = (0..adv.len()).partition(|&i| adv.loss_per_example[i] <= t);
    SmallLossSplit {
        small,
        rest,
        threshold: t,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    Baseline,
    /// Small-loss rows leave the batch.
    DataAndPerturbation,
    /// Small-loss rows train on their natural input.
    PerturbationOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationMode {
    pub variant: AblationVariant,
    pub trigger_epoch: usize,
    /// Fix the removed set to the rows flagged during the trigger epoch
    /// instead of re-splitting every batch.
    pub one_shot: bool,
}

/// Applies one ablation variant to explicit rows. Rows switched to their
/// natural input get their loss recomputed there.
fn ablate_rows(
    variant: AblationVariant,
    adv: AdvBatch,
    rows: &[usize],
    model: (&ModelSpec, &ModelParams),
    stats: &mut BatchStats,
) -> Result<AdvBatch> {
    if rows.is_empty() {
        return Ok(adv);
    }
    match variant {
        AblationVariant::Baseline => Ok(adv),
        AblationVariant::DataAndPerturbation => {
            let drop: BTreeSet<usize> = rows.iter().copied().collect();
            let keep: Vec<usize> = (0..adv.len()).filter(|i| !drop.contains(i)).collect();
            stats.dropped += rows.len();
            Ok(adv.select(&keep))
        }
        AblationVariant::PerturbationOnly => {
            let mut adv = adv;
            let natural = adv.x.select_rows(rows);
            let labels: Vec<usize> = rows.iter().map(|&r| adv.y[r]).collect();
            let losses = crate::attacks::example_losses(model.0, model.1, &natural, &labels)?;
            adv.x_adv.scatter_rows(rows, &natural)?;
            for (&r, l) in rows.iter().zip(losses) {
                adv.loss_per_example[r] = l;
            }
            stats.replaced += rows.len();
            Ok(adv)
        }
    }
}

/// Factor ablation with the split re-evaluated on every batch from
/// `trigger_epoch` on.
pub fn ablation_hook(
    mode: &AblationMode,
    epoch: usize,
    adv: AdvBatch,
    t: f32,
    spec: &ModelSpec,
    params: &ModelParams,
    stats: &mut BatchStats,
) -> Result<AdvBatch> {
    if epoch < mode.trigger_epoch || mode.variant == AblationVariant::Baseline {
        return Ok(adv);
    }
    let split = split_small_loss(&adv, t);
    ablate_rows(mode.variant, adv, &split.small, (spec, params), stats)
}

/// [`ablation_hook`] as a pipeline stage, including the one-shot variant.
pub struct AblationHook {
    pub mode: AblationMode,
    pub t: f32,
    flagged: BTreeSet<usize>,
}

impl AblationHook {
    pub fn new(mode: AblationMode, t: f32) -> Self {
        Self {
            mode,
            t,
            flagged: BTreeSet::new(),
        }
    }
}

impl BatchHook for AblationHook {
    fn after_attack(&mut self, ctx: &BatchContext<'_>, adv: AdvBatch, stats: &mut BatchStats) -> Result<AdvBatch> {
        if !self.mode.one_shot {
            return ablation_hook(&self.mode, ctx.epoch, adv, self.t, ctx.spec, ctx.params, stats);
        }
        if ctx.epoch < self.mode.trigger_epoch {
            return Ok(adv);
        }
        if ctx.epoch == self.mode.trigger_epoch {
            let split = split_small_loss(&adv, self.t);
            self.flagged.extend(split.small.iter().map(|&r| adv.ids[r]));
        }
        let rows: Vec<usize> = (0..adv.len()).filter(|&r| self.flagged.contains(&adv.ids[r])).collect();
        ablate_rows(self.mode.variant, adv, &rows, (ctx.spec, ctx.params), stats)
    }
}

/// Stronger perturbations for small-loss rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RofgAsConfig {
    pub t: f32,
    pub eps_a: f32,
    pub steps_a: usize,
    pub alpha_a: f32,
    /// First epoch at which the hook acts.
    pub start_epoch: usize,
}

impl RofgAsConfig {
    /// Keeps the base step size and scales the step count with the budget.
    pub fn scaled(t: f32, eps_a: f32, base: &AttackConfig) -> Self {
        Self {
            t,
            eps_a,
            steps_a: scaled_steps(eps_a, base.eps, base.steps),
            alpha_a: base.alpha,
            start_epoch: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_a >= 0.0) || (self.steps_a > 0 && !(self.alpha_a > 0.0)) {
            return Err(Error::Config(format!(
                "rofg_as: eps_a = {}, alpha_a = {} with {} steps",
                self.eps_a, self.alpha_a, self.steps_a
            )));
        }
        Ok(())
    }
}

/// Re-attacks the small-loss rows at budget `eps_a` from a fresh uniform
/// start and replaces their perturbations and losses. Returns the batch and
/// the number of replaced rows.
pub fn rofg_as_hook(
    cfg: &RofgAsConfig,
    spec: &ModelSpec,
    params: &ModelParams,
    adv: AdvBatch,
    rng: &mut Rng,
) -> Result<(AdvBatch, usize)> {
    cfg.validate()?;
    let split = split_small_loss(&adv, cfg.t);
    if split.small.is_empty() {
        return Ok((adv, 0));
    }
    let mut adv = adv;
    let x_small = adv.x.select_rows(&split.small);
    let y_small: Vec<usize> = split.small.iter().map(|&r| adv.y[r]).collect();
    let adjusted = AttackConfig {
        eps: cfg.eps_a,
        alpha: cfg.alpha_a,
        steps: cfg.steps_a,
        rand_init: true,
    };
    let re = pgd_attack(spec, params, &x_small, &y_small, &adjusted, rng)?;
    adv.x_adv.scatter_rows(&split.small, &re.x_adv)?;
    for (&r, l) in split.small.iter().zip(re.loss_per_example) {
        adv.loss_per_example[r] = l;
    }
    Ok((adv, split.small.len()))
}

pub struct RofgAsHook(pub RofgAsConfig);

impl BatchHook for RofgAsHook {
    fn after_attack(&mut self, ctx: &BatchContext<'_>, adv: AdvBatch, stats: &mut BatchStats) -> Result<AdvBatch> {
        if ctx.epoch < self.0.start_epoch {
            return Ok(adv);
        }
        let (adv, replaced) = rofg_as_hook(&self.0, ctx.spec, ctx.params, adv, &mut ctx.stream(stream::HOOK_AS))?;
        stats.replaced += replaced;
        Ok(adv)
    }
}

/// Augmentation of small-loss naturals until their share is at most `p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RofgDaConfig {
    pub t: f32,
    pub p: f32,
    pub max_rounds: usize,
    pub start_epoch: usize,
}

impl RofgDaConfig {
    pub fn new(t: f32, p: f32) -> Self {
        Self {
            t,
            p,
            max_rounds: 5,
            start_epoch: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) || self.max_rounds == 0 {
            return Err(Error::Config(format!(
                "rofg_da: p = {}, max_rounds = {}",
                self.p, self.max_rounds
            )));
        }
        Ok(())
    }
}

/// Outcome of one [`rofg_da_hook`] invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct DaReport {
    pub rounds: usize,
    /// The round cap was hit with the small-loss share still above `p`.
    pub saturated: bool,
    /// Rows committed, over all rounds.
    pub committed: usize,
    /// Small-loss row count before the first round and after each round.
    pub small_counts: Vec<usize>,
}

/// While more than a fraction `p` of rows is small-loss: augment those
/// rows' naturals, re-attack them with the base attack, and commit every row
/// whose new loss exceeds `t`.
#[allow(clippy::too_many_arguments)]
pub fn rofg_da_hook(
    cfg: &RofgDaConfig,
    spec: &ModelSpec,
    params: &ModelParams,
    adv: AdvBatch,
    atk: &AttackConfig,
    augment: &dyn Augmenter,
    rng: &mut Rng,
) -> Result<(AdvBatch, DaReport)> {
    cfg.validate()?;
    let n = adv.len();
    let too_many = |count: usize| count as f64 > cfg.p as f64 * n as f64;
    let mut adv = adv;
    let mut small = split_small_loss(&adv, cfg.t).small;
    let mut report = DaReport {
        rounds: 0,
        saturated: false,
        committed: 0,
        small_counts: vec![small.len()],
    };
    while too_many(small.len()) && report.rounds < cfg.max_rounds {
        report.rounds += 1;
        let x_small = adv.x.select_rows(&small);
        let y_small: Vec<usize> = small.iter().map(|&r| adv.y[r]).collect();
        let augmented = augment.augment(&x_small, rng)?;
        if augmented.shape() != x_small.shape() {
            return Err(Error::contract("rofg_da_hook", "augmenter changed the batch shape"));
        }
        let re = pgd_attack(spec, params, &augmented, &y_small, atk, rng)?;
        for (k, &r) in small.iter().enumerate() {
            if re.loss_per_example[k] > cfg.t {
                adv.x.row_mut(r).copy_from_slice(augmented.row(k));
                adv.x_adv.row_mut(r).copy_from_slice(re.x_adv.row(k));
                adv.loss_per_example[r] = re.loss_per_example[k];
                report.committed += 1;
            }
        }
        small = split_small_loss(&adv, cfg.t).small;
        report.small_counts.push(small.len());
    }
    report.saturated = too_many(small.len());
    Ok((adv, report))
}

pub struct RofgDaHook<A: Augmenter> {
    pub cfg: RofgDaConfig,
    pub augmenter: A,
}

impl<A: Augmenter> BatchHook for RofgDaHook<A> {
    fn after_attack(&mut self, ctx: &BatchContext<'_>, adv: AdvBatch, stats: &mut BatchStats) -> Result<AdvBatch> {
        if ctx.epoch < self.cfg.start_epoch {
            return Ok(adv);
        }
        let (adv, report) = rofg_da_hook(
            &self.cfg,
            ctx.spec,
            ctx.params,
            adv,
            ctx.attack,
            &self.augmenter,
            &mut ctx.stream(stream::HOOK_DA),
        )?;
        stats.aug_rounds += report.rounds;
        stats.saturated |= report.saturated;
        stats.replaced += report.committed;
        Ok(adv)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VerificationMode {
    Fixed { eps_add: f32 },
    /// Budget ramps from 0 at `e_start` to `eps_max` at `e_end`.
    Linear { eps_max: f32 },
}

/// Loss-decreasing perturbation of training naturals inside an inclusive
/// epoch window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerificationConfig {
    pub mode: VerificationMode,
    pub e_start: usize,
    pub e_end: usize,
    pub steps: usize,
    /// Step size as a fraction of the current budget.
    pub alpha_frac: f32,
}

impl VerificationConfig {
    pub fn new(mode: VerificationMode, e_start: usize, e_end: usize) -> Self {
        Self {
            mode,
            e_start,
            e_end,
            steps: 5,
            alpha_frac: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.e_start > self.e_end || (matches!(self.mode, VerificationMode::Linear { .. }) && self.e_start == self.e_end) {
            return Err(Error::Config(format!(
                "verification: empty window [{}, {}]",
                self.e_start, self.e_end
            )));
        }
        Ok(())
    }

    /// Budget applied at `epoch`, or `None` outside the window.
    pub fn budget(&self, epoch: usize) -> Option<f32> {
        if epoch < self.e_start || epoch > self.e_end {
            return None;
        }
        Some(match self.mode {
            VerificationMode::Fixed { eps_add } => eps_add,
            VerificationMode::Linear { eps_max } => linear_budget(epoch, self.e_start, self.e_end, eps_max),
        })
    }
}

pub fn verification_hook(
    cfg: &VerificationConfig,
    spec: &ModelSpec,
    params: &ModelParams,
    x: DenseArray,
    y: &[usize],
    epoch: usize,
) -> Result<DenseArray> {
    cfg.validate()?;
    let Some(eps) = cfg.budget(epoch) else {
        return Ok(x);
    };
    let opp = OppositeConfig {
        eps,
        steps: cfg.steps,
        alpha: eps * cfg.alpha_frac,
    };
    opposite_perturb(spec, params, &x, y, &opp)
}

pub struct VerificationHook(pub VerificationConfig);

impl BatchHook for VerificationHook {
    fn before_attack(&mut self, ctx: &BatchContext<'_>, x: DenseArray, y: &[usize]) -> Result<DenseArray> {
        verification_hook(&self.0, ctx.spec, ctx.params, x, y, ctx.epoch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch_with_losses(losses: &[f32]) -> AdvBatch {
        let n = losses.len();
        let x = DenseArray::new(vec![n, 2], (0..2 * n).map(|i| i as f32 / 10.0).collect()).unwrap();
        AdvBatch {
            x_adv: x.map(|v| v + 0.01),
            x,
            y: vec![0; n],
            loss_per_example: losses.to_vec(),
            ids: (0..n).collect(),
        }
    }

    #[test]
    fn split_boundary_inclusive() {
        let adv = batch_with_losses(&[0.5, 1.7, 3.0]);
        let s = split_small_loss(&adv, 1.7);
        assert_eq!(s.small, vec![0, 1]);
        assert_eq!(s.rest, vec![2]);
        assert!(split_small_loss(&adv, -1.0).small.is_empty());
        assert_eq!(split_small_loss(&adv, f32::INFINITY).small.len(), 3);
    }

    #[test]
    fn verification_window() {
        let cfg = VerificationConfig::new(VerificationMode::Linear { eps_max: 8.0 / 255.0 }, 50, 100);
        assert_eq!(cfg.budget(49), None);
        assert_eq!(cfg.budget(50), Some(0.0));
        assert!((cfg.budget(75).unwrap() - 4.0 / 255.0).abs() < 1e-7);
        assert_eq!(cfg.budget(100), Some(8.0 / 255.0));
        assert_eq!(cfg.budget(101), None);
    }
}
