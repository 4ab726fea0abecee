//! Outer minimization: SGD with momentum and weight decay, the milestone
//! learning-rate schedule, and the natural, adversarial and TRADES epochs.
//!
//! Every epoch shuffles with the `(SHUFFLE, epoch)` stream before drawing
//! anything else, and every attack draws from `(ATTACK, epoch, batch)`, so
//! runs that differ only in their hooks see identical batch orders and
//! identical base attacks.

use crate::array::DenseArray;
use crate::attacks::{pgd_with_logits, sign_steps, AdvBatch, AttackConfig, Objective, PIXEL_MAX, PIXEL_MIN};
use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::models::{correct_count, cross_entropy, forward, kl_div, predict, ModelParams, ModelSpec};
use crate::rng::{stream, Rng};
use crate::tape::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs (0-based) from which the next decay applies.
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// 80 epochs, lr 0.1 decayed 10x at epochs 40 and 60, batch 128,
    /// momentum 0.9, weight decay 5e-4.
    pub fn desk() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 80,
            batch_size: 128,
            lr_milestones: vec![40, 60],
            lr_factor: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::Config(format!("train: {d}")));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr = {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum = {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay = {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size = 0".into());
        }
        if self.lr_milestones.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("milestones {:?} not strictly increasing", self.lr_milestones));
        }
        if !(self.lr_factor > 0.0) {
            return bad(format!("lr_factor = {}", self.lr_factor));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TradesConfig {
    pub beta: f32,
}

impl Default for TradesConfig {
    fn default() -> Self {
        Self { beta: 6.0 }
    }
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    velocity: ModelParams,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let entries = params
            .iter()
            .map(|(n, a)| (n.to_string(), DenseArray::zeros(a.shape())))
            .collect();
        Self {
            velocity: ModelParams::from_entries(entries),
        }
    }

    /// Restores a saved state; shapes are checked on the next step.
    pub fn from_velocity(velocity: ModelParams) -> Self {
        Self { velocity }
    }

    pub fn velocity(&self) -> &ModelParams {
        &self.velocity
    }
}

/// `g' = g + wd·p`, `v <- m·v + g'`, `p <- p - lr·v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f32,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::contract(
            "sgd_step",
            format!(
                "{} params, {} grads, {} velocities",
                params.len(),
                grads.len(),
                state.velocity.len()
            ),
        ));
    }
    for ((p, g), v) in params.arrays().zip(grads.arrays()).zip(state.velocity.arrays()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::contract(
                "sgd_step",
                format!("shapes {:?} / {:?} / {:?}", p.shape(), g.shape(), v.shape()),
            ));
        }
        g.ensure_finite("sgd_step")?;
    }
    let (m, wd) = (cfg.momentum, cfg.weight_decay);
    for ((p, g), v) in params
        .arrays_mut()
        .zip(grads.arrays())
        .zip(state.velocity.arrays_mut())
    {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = m * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// `lr · factor^(milestones <= epoch)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let passed = cfg.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr * cfg.lr_factor.powi(passed as i32)
}

/// Where a batch sits in the run, handed to every hook.
pub struct BatchContext<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub spec: &'a ModelSpec,
    /// Parameters before this batch's update.
    pub params: &'a ModelParams,
    /// The trainer's base attack.
    pub attack: &'a AttackConfig,
    /// Run root stream; hooks derive their own keyed sub-streams from it.
    pub rng: &'a Rng,
}

impl BatchContext<'_> {
    /// Stream `(tag, epoch, batch)` under the run root.
    pub fn stream(&self, tag: u64) -> Rng {
        self.rng.derive(&[tag, self.epoch as u64, self.batch as u64])
    }
}

/// What the hooks did to one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub aug_rounds: usize,
    /// Augmentation stopped at its round cap.
    pub saturated: bool,
    /// Rows whose training example was replaced or regenerated.
    pub replaced: usize,
    /// Rows removed from the update.
    pub dropped: usize,
}

/// A batch transformer between the base attack and the parameter update.
/// Both methods default to the identity.
pub trait BatchHook {
    /// Rewrites the natural batch before it is attacked.
    fn before_attack(&mut self, _ctx: &BatchContext<'_>, x: DenseArray, _y: &[usize]) -> Result<DenseArray> {
        Ok(x)
    }

    /// Rewrites the attacked batch before the update.
    fn after_attack(&mut self, _ctx: &BatchContext<'_>, adv: AdvBatch, _stats: &mut BatchStats) -> Result<AdvBatch> {
        Ok(adv)
    }
}

/// Per-epoch training statistics. Accuracies and losses are measured on each
/// batch before its update; `adv_losses` are the base attack's per-example
/// losses before any hook ran, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_nat_acc: f64,
    pub train_rob_acc: f64,
    pub train_adv_loss: f64,
    /// Mean objective of the applied updates.
    pub train_loss: f64,
    pub adv_losses: Vec<f32>,
    pub aug_rounds_mean: f64,
    pub saturated_batches: usize,
    pub skipped_batches: usize,
    pub replaced_rows: usize,
    pub dropped_rows: usize,
    pub batches: usize,
}

impl EpochStats {
    /// Fraction of base-attack losses at or below `t`.
    pub fn small_loss_frac(&self, t: f32) -> f64 {
        if self.adv_losses.is_empty() {
            return 0.0;
        }
        self.adv_losses.iter().filter(|&&l| l <= t).count() as f64 / self.adv_losses.len() as f64
    }
}

#[derive(Default)]
struct Tally {
    examples: usize,
    nat_correct: usize,
    rob_correct: usize,
    adv_loss_sum: f64,
    update_loss_sum: f64,
    updates: usize,
    aug_rounds: usize,
    saturated: usize,
    skipped: usize,
    replaced: usize,
    dropped: usize,
    batches: usize,
}

impl Tally {
    fn finish(self, epoch: usize, lr: f64, adv_losses: Vec<f32>) -> EpochStats {
        let n = self.examples.max(1) as f64;
        let b = self.batches.max(1) as f64;
        EpochStats {
            epoch,
            lr,
            train_nat_acc: self.nat_correct as f64 / n,
            train_rob_acc: self.rob_correct as f64 / n,
            train_adv_loss: self.adv_loss_sum / n,
            train_loss: self.update_loss_sum / self.updates.max(1) as f64,
            adv_losses,
            aug_rounds_mean: self.aug_rounds as f64 / b,
            saturated_batches: self.saturated,
            skipped_batches: self.skipped,
            replaced_rows: self.replaced,
            dropped_rows: self.dropped,
            batches: self.batches,
        }
    }
}

/// Pairs tape gradients with parameter names. Parameters the loss does not
/// reach get zero gradients.
fn collect_grads(
    params: &ModelParams,
    nodes: &[crate::tape::NodeId],
    mut grads: crate::tape::Gradients<f32>,
) -> ModelParams {
    let entries = params
        .iter()
        .zip(nodes)
        .map(|((name, p), &id)| {
            let g = grads.remove(id).unwrap_or_else(|| DenseArray::zeros(p.shape()));
            (name.to_string(), g)
        })
        .collect();
    ModelParams::from_entries(entries)
}

/// Mean cross-entropy at `x` and its parameter gradients, plus the logits.
pub fn ce_gradients(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &DenseArray,
    y: &[usize],
) -> Result<(f32, ModelParams, DenseArray)> {
    let mut tape = Tape::new();
    let nodes = params.bind(&mut tape, true);
    let xi = tape.constant(x.clone());
    let logits = forward(spec, &mut tape, &nodes, xi)?;
    let (_, mean) = cross_entropy(&mut tape, logits, y)?;
    let grads = tape.backward(mean, &nodes)?;
    let loss = tape.value(mean).data()[0];
    let logits = tape.value(logits).clone();
    Ok((loss, collect_grads(params, &nodes, grads), logits))
}

/// TRADES outer objective `CE(f(x), y) + beta · KL(f(x) || f(x_adv))` and its
/// gradients. Returns `(total, ce, grads)`.
pub fn trades_gradients(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &DenseArray,
    x_adv: &DenseArray,
    y: &[usize],
    beta: f32,
) -> Result<(f32, f32, ModelParams)> {
    let mut tape = Tape::new();
    let nodes = params.bind(&mut tape, true);
    let xn = tape.constant(x.clone());
    let xa = tape.constant(x_adv.clone());
    let nat = forward(spec, &mut tape, &nodes, xn)?;
    let adv = forward(spec, &mut tape, &nodes, xa)?;
    let (_, ce) = cross_entropy(&mut tape, nat, y)?;
    let kl = kl_div(&mut tape, nat, adv)?;
    let weighted = tape.scale(kl, beta);
    let total = tape.add(ce, weighted)?;
    let grads = tape.backward(total, &nodes)?;
    Ok((
        tape.value(total).data()[0],
        tape.value(ce).data()[0],
        collect_grads(params, &nodes, grads),
    ))
}

/// Shuffled batch index lists for `epoch`.
pub fn epoch_batches(n: usize, batch_size: usize, epoch: usize, rng: &Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.derive(&[stream::SHUFFLE, epoch as u64]).shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

fn wrap(epoch: usize, batch: usize, context: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| Error::Training {
        epoch,
        batch,
        context,
        source: Box::new(e),
    }
}

/// One epoch of natural training (cross-entropy on clean inputs). Only the
/// hooks' `before_attack` stage runs, since nothing is attacked.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch_natural(
    spec: &ModelSpec,
    params: &mut ModelParams,
    state: &mut OptimizerState,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &Rng,
    hooks: &mut [Box<dyn BatchHook>],
) -> Result<EpochStats> {
    cfg.validate()?;
    let lr = lr_at_epoch(cfg, epoch);
    let mut tally = Tally::default();
    let mut losses = vec![0.0f32; data.len()];
    let atk = AttackConfig {
        eps: 0.0,
        alpha: 0.0,
        steps: 0,
        rand_init: false,
    };
    for (b, rows) in epoch_batches(data.len(), cfg.batch_size, epoch, rng).into_iter().enumerate() {
        let (x, y) = data.batch(&rows);
        let x = if hooks.is_empty() {
            x
        } else {
            let snapshot = params.clone();
            let ctx = BatchContext {
                epoch,
                batch: b,
                spec,
                params: &snapshot,
                attack: &atk,
                rng,
            };
            run_hooks_before(hooks, &ctx, x, &y).map_err(wrap(epoch, b, "pre-attack hook"))?
        };
        let (loss, grads, logits) = ce_gradients(spec, params, &x, &y).map_err(wrap(epoch, b, "natural step"))?;
        // Clean inputs are the zero-budget attack, so both accuracies coincide.
        let correct = correct_count(&logits, &y);
        let per = crate::models::cross_entropy_values(&logits, &y)?;
        for (&r, &l) in rows.iter().zip(&per) {
            losses[r] = l;
        }
        tally.examples += rows.len();
        tally.nat_correct += correct;
        tally.rob_correct += correct;
        tally.adv_loss_sum += per.iter().map(|&l| l as f64).sum::<f64>();
        tally.update_loss_sum += loss as f64;
        tally.updates += 1;
        tally.batches += 1;
        sgd_step(params, &grads, state, lr as f32, cfg).map_err(wrap(epoch, b, "sgd step"))?;
    }
    Ok(tally.finish(epoch, lr, losses))
}

fn run_hooks_before(hooks: &mut [Box<dyn BatchHook>], ctx: &BatchContext<'_>, mut x: DenseArray, y: &[usize]) -> Result<DenseArray> {
    for h in hooks.iter_mut() {
        x = h.before_attack(ctx, x, y)?;
    }
    Ok(x)
}

fn run_hooks_after(hooks: &mut [Box<dyn BatchHook>], ctx: &BatchContext<'_>, mut adv: AdvBatch, stats: &mut BatchStats) -> Result<AdvBatch> {
    for h in hooks.iter_mut() {
        adv = h.after_attack(ctx, adv, stats)?;
    }
    Ok(adv)
}

/// Which outer objective an adversarial epoch minimizes.
enum Outer<'a> {
    CrossEntropy,
    Trades(&'a TradesConfig),
}

/// One epoch of PGD adversarial training with `hooks` between attack and
/// update.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch_at(
    spec: &ModelSpec,
    params: &mut ModelParams,
    state: &mut OptimizerState,
    data: &Dataset,
    cfg: &TrainConfig,
    atk: &AttackConfig,
    epoch: usize,
    rng: &Rng,
    hooks: &mut [Box<dyn BatchHook>],
) -> Result<EpochStats> {
    adversarial_epoch(spec, params, state, data, cfg, atk, Outer::CrossEntropy, epoch, rng, hooks)
}

/// One epoch of TRADES: the inner maximization ascends the KL divergence from
/// the natural prediction, the outer step minimizes natural cross-entropy
/// plus `beta` times that divergence.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch_trades(
    spec: &ModelSpec,
    params: &mut ModelParams,
    state: &mut OptimizerState,
    data: &Dataset,
    cfg: &TrainConfig,
    atk: &AttackConfig,
    tcfg: &TradesConfig,
    epoch: usize,
    rng: &Rng,
    hooks: &mut [Box<dyn BatchHook>],
) -> Result<EpochStats> {
    if !(tcfg.beta >= 0.0) {
        return Err(Error::Config(format!("trades: beta = {}", tcfg.beta)));
    }
    adversarial_epoch(spec, params, state, data, cfg, atk, Outer::Trades(tcfg), epoch, rng, hooks)
}

/// Standard deviation of the TRADES inner-maximization start.
pub const TRADES_INIT_STD: f32 = 0.001;

/// TRADES inner maximization: `x + N(0, 0.001²)` projected, then sign steps
/// on `KL(f(x) || f(x'))`. Returns the batch with cross-entropy losses at
/// `x_adv` and the logits there.
pub fn trades_attack(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &DenseArray,
    y: &[usize],
    atk: &AttackConfig,
    rng: &mut Rng,
) -> Result<(AdvBatch, DenseArray)> {
    atk.validate()?;
    let natural = predict(spec, params, x)?;
    let mut start = x.map(|v| v + TRADES_INIT_STD * rng.normal());
    crate::array::project_linf_in_place(start.data_mut(), x.data(), atk.eps, PIXEL_MIN, PIXEL_MAX);
    let x_adv = sign_steps(
        spec,
        params,
        x,
        start,
        Objective::KlFromNatural(&natural),
        atk.eps,
        atk.alpha,
        atk.steps,
        true,
    )?;
    let logits = predict(spec, params, &x_adv)?;
    let loss_per_example = crate::models::cross_entropy_values(&logits, y)?;
    Ok((
        AdvBatch {
            x: x.clone(),
            x_adv,
            y: y.to_vec(),
            loss_per_example,
            ids: (0..y.len()).collect(),
        },
        logits,
    ))
}

#[allow(clippy::too_many_arguments)]
fn adversarial_epoch(
    spec: &ModelSpec,
    params: &mut ModelParams,
    state: &mut OptimizerState,
    data: &Dataset,
    cfg: &TrainConfig,
    atk: &AttackConfig,
    outer: Outer<'_>,
    epoch: usize,
    rng: &Rng,
    hooks: &mut [Box<dyn BatchHook>],
) -> Result<EpochStats> {
    cfg.validate()?;
    atk.validate()?;
    let lr = lr_at_epoch(cfg, epoch);
    let mut tally = Tally::default();
    let mut losses = vec![0.0f32; data.len()];
    for (b, rows) in epoch_batches(data.len(), cfg.batch_size, epoch, rng).into_iter().enumerate() {
        let (x, y) = data.batch(&rows);
        let snapshot = params.clone();
        let ctx = BatchContext {
            epoch,
            batch: b,
            spec,
            params: &snapshot,
            attack: atk,
            rng,
        };
        let x = run_hooks_before(hooks, &ctx, x, &y).map_err(wrap(epoch, b, "pre-attack hook"))?;
        let mut attack_rng = ctx.stream(stream::ATTACK);
        let (mut adv, adv_logits) = match outer {
            Outer::CrossEntropy => pgd_with_logits(spec, &snapshot, &x, &y, atk, &mut attack_rng),
            Outer::Trades(_) => trades_attack(spec, &snapshot, &x, &y, atk, &mut attack_rng),
        }
        .map_err(wrap(epoch, b, "attack"))?;
        adv.ids = rows.clone();

        let nat_logits = predict(spec, &snapshot, &x)?;
        tally.examples += rows.len();
        tally.nat_correct += correct_count(&nat_logits, &y);
        tally.rob_correct += correct_count(&adv_logits, &y);
        for (&r, &l) in rows.iter().zip(&adv.loss_per_example) {
            losses[r] = l;
            tally.adv_loss_sum += l as f64;
        }

        let mut bstats = BatchStats::default();
        let adv = run_hooks_after(hooks, &ctx, adv, &mut bstats).map_err(wrap(epoch, b, "post-attack hook"))?;
        tally.batches += 1;
        tally.aug_rounds += bstats.aug_rounds;
        tally.saturated += bstats.saturated as usize;
        tally.replaced += bstats.replaced;
        tally.dropped += bstats.dropped;
        if adv.is_empty() {
            tally.skipped += 1;
            continue;
        }
        let (loss, grads) = match outer {
            Outer::CrossEntropy => {
                let (l, g, _) = ce_gradients(spec, params, &adv.x_adv, &adv.y)?;
                (l, g)
            }
            Outer::Trades(t) => {
                let (l, _, g) = trades_gradients(spec, params, &adv.x, &adv.x_adv, &adv.y, t.beta)?;
                (l, g)
            }
        };
        tally.update_loss_sum += loss as f64;
        tally.updates += 1;
        sgd_step(params, &grads, state, lr as f32, cfg).map_err(wrap(epoch, b, "sgd step"))?;
    }
    Ok(tally.finish(epoch, lr, losses))
}
