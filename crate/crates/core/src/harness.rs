//! Experiment orchestration: configuration, evaluation, training sessions
//! with best/last tracking, and the files a run leaves behind.
//!
//! A run directory holds `curves.csv`, `best.ckpt`, `last.ckpt`,
//! `summary.txt` and `config.cfg` (the fully resolved configuration).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attacks::{pgd_attack, AttackConfig};
use crate::augment::{AugmentHook, MixAugment, StandardAugment};
use crate::data_io::{
    gen_synthetic, load_dataset, save_checkpoint, write_curves, Checkpoint, CheckpointKind, CurveRecord, Dataset,
    Render, Split, SyntheticKind, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::models::{correct_count, cross_entropy_values, init_params, predict, ConvBlock, CnnSpec, ModelParams, ModelSpec};
use crate::rng::{stream, Rng};
use crate::rofg::{
    AblationHook, AblationMode, AblationVariant, RofgAsConfig, RofgAsHook, RofgDaConfig, RofgDaHook, VerificationConfig,
    VerificationHook, VerificationMode,
};
use crate::trainers::{
    train_epoch_at, train_epoch_natural, train_epoch_trades, BatchHook, OptimizerState, TradesConfig, TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Natural,
    At,
    Trades,
    AtAblation,
    AtVerification,
    AtRofgAs,
    AtRofgDa,
    TradesRofgAs,
    TradesRofgDa,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Natural,
        Method::At,
        Method::Trades,
        Method::AtAblation,
        Method::AtVerification,
        Method::AtRofgAs,
        Method::AtRofgDa,
        Method::TradesRofgAs,
        Method::TradesRofgDa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Natural => "natural",
            Method::At => "at",
            Method::Trades => "trades",
            Method::AtAblation => "at+ablation",
            Method::AtVerification => "at+verification",
            Method::AtRofgAs => "at+rofg_as",
            Method::AtRofgDa => "at+rofg_da",
            Method::TradesRofgAs => "trades+rofg_as",
            Method::TradesRofgDa => "trades+rofg_da",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }

    fn trades_base(self) -> bool {
        matches!(self, Method::Trades | Method::TradesRofgAs | Method::TradesRofgDa)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { spec: SyntheticSpec, seed: u64 },
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Cnn,
    Mlp,
}

/// Architecture choice; input geometry and class count come from the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn build(&self, (c, h, w): (usize, usize, usize), classes: usize) -> Result<ModelSpec> {
        let spec = match self.kind {
            ModelKind::Mlp => {
                let mut widths = vec![c * h * w];
                widths.extend(&self.hidden);
                widths.push(classes);
                ModelSpec::Mlp { widths }
            }
            ModelKind::Cnn => ModelSpec::Cnn(CnnSpec {
                in_channels: c,
                height: h,
                width: w,
                blocks: self
                    .channels
                    .iter()
                    .map(|&out_channels| ConvBlock {
                        out_channels,
                        kernel: self.kernel,
                    })
                    .collect(),
                hidden: self.hidden.clone(),
                classes,
            }),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Everything a run needs. Parsed from flat `section.key=value` text with
/// strict unknown-key rejection.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: Method,
    pub seed: u64,
    pub data: DataSource,
    pub augment: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub eval: AttackConfig,
    pub trades: TradesConfig,
    /// Small-loss threshold shared by every hook and by the curves column.
    pub t: f32,
    /// First epoch of the small-loss mitigations.
    pub rofg_start: usize,
    pub eps_a: f32,
    pub steps_a: Option<usize>,
    pub alpha_a: Option<f32>,
    pub da_p: f32,
    pub da_max_rounds: usize,
    pub ablation: AblationMode,
    pub verification: VerificationConfig,
}

impl Default for ExperimentConfig {
    /// Desk-scale AT on synthetic 16x16 images.
    fn default() -> Self {
        let mut synth = SyntheticSpec::new(SyntheticKind::Blobs, Render::Image { side: 16 }, 2000, 1000, 10);
        synth.noise = 0.04;
        synth.pixel_noise = 0.05;
        synth.clutter = 6;
        let train = TrainConfig::desk();
        Self {
            name: String::new(),
            method: Method::At,
            seed: 0,
            data: DataSource::Synthetic { spec: synth, seed: 0 },
            augment: false,
            model: ModelConfig {
                kind: ModelKind::Cnn,
                channels: vec![8, 16],
                kernel: 3,
                hidden: vec![256],
            },
            train,
            attack: AttackConfig::standard(),
            eval: AttackConfig::pgd20(),
            trades: TradesConfig::default(),
            t: 1.7,
            rofg_start: 0,
            eps_a: 16.0 / 255.0,
            steps_a: None,
            alpha_a: None,
            da_p: 0.6,
            da_max_rounds: 5,
            ablation: AblationMode {
                variant: AblationVariant::Baseline,
                trigger_epoch: 10,
                one_shot: false,
            },
            verification: VerificationConfig::new(VerificationMode::Fixed { eps_add: 0.0 }, 20, 40),
        }
    }
}

/// Parses `"0.5"`, `"8/255"` or `"-inf"`.
pub fn parse_number(s: &str) -> Result<f64> {
    let bad = || Error::Config(format!("not a number: {s:?}"));
    match s.split_once('/') {
        Some((a, b)) => {
            let (a, b) = (a.trim().parse::<f64>().map_err(|_| bad())?, b.trim().parse::<f64>().map_err(|_| bad())?);
            if b == 0.0 {
                return Err(bad());
            }
            Ok(a / b)
        }
        None => s.trim().parse::<f64>().map_err(|_| bad()),
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad list {s:?}"))))
        .collect()
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("not a boolean: {s:?}"))),
    }
}

fn parse_int<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse::<T>().map_err(|_| Error::Config(format!("not an integer: {s:?}")))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {key}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn synthetic(&mut self) -> Result<(&mut SyntheticSpec, &mut u64)> {
        match &mut self.data {
            DataSource::Synthetic { spec, seed } => Ok((spec, seed)),
            DataSource::Files { .. } => Err(Error::Config("synthetic key with file-backed data".into())),
        }
    }

    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let num = || parse_number(v);
        match key {
            "name" => self.name = v.to_string(),
            "method" => self.method = Method::parse(v)?,
            "seed" => self.seed = parse_int(v)?,
            "data.kind" => {
                self.synthetic()?.0.kind = match v {
                    "blobs" => SyntheticKind::Blobs,
                    "rings" => SyntheticKind::Rings,
                    _ => return Err(Error::Config(format!("unknown data kind {v:?}"))),
                }
            }
            "data.render" => {
                let s = self.synthetic()?.0;
                s.render = match (v, s.render) {
                    ("features", _) => Render::Features,
                    ("image", Render::Image { side }) => Render::Image { side },
                    ("image", Render::Features) => Render::Image { side: 16 },
                    _ => return Err(Error::Config(format!("unknown render {v:?}"))),
                }
            }
            "data.side" => self.synthetic()?.0.render = Render::Image { side: parse_int(v)? },
            "data.n_train" => self.synthetic()?.0.n_train = parse_int(v)?,
            "data.n_test" => self.synthetic()?.0.n_test = parse_int(v)?,
            "data.classes" => self.synthetic()?.0.class_count = parse_int(v)?,
            "data.noise" => self.synthetic()?.0.noise = num()? as f32,
            "data.pixel_noise" => self.synthetic()?.0.pixel_noise = num()? as f32,
            "data.spot_width" => self.synthetic()?.0.spot_width = num()? as f32,
            "data.label_noise" => self.synthetic()?.0.label_noise = num()? as f32,
            "data.clutter" => self.synthetic()?.0.clutter = parse_int(v)?,
            "data.seed" => *self.synthetic()?.1 = parse_int(v)?,
            "data.train_path" | "data.test_path" => {
                let p = PathBuf::from(v);
                let (mut train, mut test) = match &self.data {
                    DataSource::Files { train, test } => (train.clone(), test.clone()),
                    DataSource::Synthetic { .. } => (PathBuf::new(), PathBuf::new()),
                };
                if key == "data.train_path" {
                    train = p;
                } else {
                    test = p;
                }
                self.data = DataSource::Files { train, test };
            }
            "data.augment" => {
                self.augment = match v {
                    "none" => false,
                    "standard" => true,
                    _ => return Err(Error::Config(format!("unknown augmentation {v:?}"))),
                }
            }
            "model.kind" => {
                self.model.kind = match v {
                    "cnn" => ModelKind::Cnn,
                    "mlp" => ModelKind::Mlp,
                    _ => return Err(Error::Config(format!("unknown model kind {v:?}"))),
                }
            }
            "model.channels" => self.model.channels = parse_list(v)?,
            "model.kernel" => self.model.kernel = parse_int(v)?,
            "model.hidden" => self.model.hidden = parse_list(v)?,
            "train.lr" => self.train.lr = num()?,
            "train.momentum" => self.train.momentum = num()? as f32,
            "train.weight_decay" => self.train.weight_decay = num()? as f32,
            "train.epochs" => self.train.epochs = parse_int(v)?,
            "train.batch_size" => self.train.batch_size = parse_int(v)?,
            "train.milestones" => self.train.lr_milestones = parse_list(v)?,
            "train.lr_factor" => self.train.lr_factor = num()?,
            "attack.eps" => self.attack.eps = num()? as f32,
            "attack.alpha" => self.attack.alpha = num()? as f32,
            "attack.steps" => self.attack.steps = parse_int(v)?,
            "attack.rand_init" => self.attack.rand_init = parse_bool(v)?,
            "eval.eps" => self.eval.eps = num()? as f32,
            "eval.alpha" => self.eval.alpha = num()? as f32,
            "eval.steps" => self.eval.steps = parse_int(v)?,
            "eval.rand_init" => self.eval.rand_init = parse_bool(v)?,
            "trades.beta" => self.trades.beta = num()? as f32,
            "rofg.t" => self.t = num()? as f32,
            "rofg.start_epoch" => self.rofg_start = parse_int(v)?,
            "rofg_as.eps_a" => self.eps_a = num()? as f32,
            "rofg_as.steps_a" => self.steps_a = Some(parse_int(v)?),
            "rofg_as.alpha_a" => self.alpha_a = Some(num()? as f32),
            "rofg_da.p" => self.da_p = num()? as f32,
            "rofg_da.max_rounds" => self.da_max_rounds = parse_int(v)?,
            "ablation.variant" => {
                self.ablation.variant = match v {
                    "baseline" => AblationVariant::Baseline,
                    "data_and_perturbation" => AblationVariant::DataAndPerturbation,
                    "perturbation_only" => AblationVariant::PerturbationOnly,
                    _ => return Err(Error::Config(format!("unknown ablation variant {v:?}"))),
                }
            }
            "ablation.trigger_epoch" => self.ablation.trigger_epoch = parse_int(v)?,
            "ablation.one_shot" => self.ablation.one_shot = parse_bool(v)?,
            "verification.mode" => {
                let budget = match self.verification.mode {
                    VerificationMode::Fixed { eps_add } => eps_add,
                    VerificationMode::Linear { eps_max } => eps_max,
                };
                self.verification.mode = match v {
                    "fixed" => VerificationMode::Fixed { eps_add: budget },
                    "linear" => VerificationMode::Linear { eps_max: budget },
                    _ => return Err(Error::Config(format!("unknown verification mode {v:?}"))),
                }
            }
            "verification.eps_add" | "verification.eps_max" => {
                let b = num()? as f32;
                self.verification.mode = match self.verification.mode {
                    VerificationMode::Fixed { .. } => VerificationMode::Fixed { eps_add: b },
                    VerificationMode::Linear { .. } => VerificationMode::Linear { eps_max: b },
                }
            }
            "verification.e_start" => self.verification.e_start = parse_int(v)?,
            "verification.e_end" => self.verification.e_end = parse_int(v)?,
            "verification.steps" => self.verification.steps = parse_int(v)?,
            "verification.alpha_frac" => self.verification.alpha_frac = num()? as f32,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.attack.validate()?;
        self.eval.validate()?;
        if let DataSource::Files { train, test } = &self.data {
            if train.as_os_str().is_empty() || test.as_os_str().is_empty() {
                return Err(Error::Config("data.train_path and data.test_path go together".into()));
            }
        }
        if !(self.trades.beta >= 0.0) {
            return Err(Error::Config(format!("trades.beta = {}", self.trades.beta)));
        }
        self.rofg_as().validate()?;
        self.rofg_da().validate()?;
        self.verification.validate()?;
        Ok(())
    }

    pub fn rofg_as(&self) -> RofgAsConfig {
        let mut c = RofgAsConfig::scaled(self.t, self.eps_a, &self.attack);
        if let Some(s) = self.steps_a {
            c.steps_a = s;
        }
        if let Some(a) = self.alpha_a {
            c.alpha_a = a;
        }
        c.start_epoch = self.rofg_start;
        c
    }

    pub fn rofg_da(&self) -> RofgDaConfig {
        RofgDaConfig {
            t: self.t,
            p: self.da_p,
            max_rounds: self.da_max_rounds,
            start_epoch: self.rofg_start,
        }
    }

    /// Display label: `name`, or the method when unnamed.
    pub fn label(&self) -> String {
        if self.name.is_empty() {
            self.method.name().to_string()
        } else {
            self.name.clone()
        }
    }

    /// Fully resolved configuration, parseable by [`ExperimentConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        if !self.name.is_empty() {
            kv("name", self.name.clone());
        }
        kv("method", self.method.name().into());
        kv("seed", self.seed.to_string());
        match &self.data {
            DataSource::Synthetic { spec, seed } => {
                kv(
                    "data.kind",
                    match spec.kind {
                        SyntheticKind::Blobs => "blobs",
                        SyntheticKind::Rings => "rings",
                    }
                    .into(),
                );
                match spec.render {
                    Render::Features => kv("data.render", "features".into()),
                    Render::Image { side } => kv("data.side", side.to_string()),
                }
                kv("data.n_train", spec.n_train.to_string());
                kv("data.n_test", spec.n_test.to_string());
                kv("data.classes", spec.class_count.to_string());
                kv("data.noise", spec.noise.to_string());
                kv("data.pixel_noise", spec.pixel_noise.to_string());
                kv("data.spot_width", spec.spot_width.to_string());
                kv("data.label_noise", spec.label_noise.to_string());
                kv("data.clutter", spec.clutter.to_string());
                kv("data.seed", seed.to_string());
            }
            DataSource::Files { train, test } => {
                kv("data.train_path", train.display().to_string());
                kv("data.test_path", test.display().to_string());
            }
        }
        kv("data.augment", if self.augment { "standard" } else { "none" }.into());
        kv(
            "model.kind",
            match self.model.kind {
                ModelKind::Cnn => "cnn",
                ModelKind::Mlp => "mlp",
            }
            .into(),
        );
        kv("model.channels", join(&self.model.channels));
        kv("model.kernel", self.model.kernel.to_string());
        kv("model.hidden", join(&self.model.hidden));
        kv("train.lr", self.train.lr.to_string());
        kv("train.momentum", self.train.momentum.to_string());
        kv("train.weight_decay", self.train.weight_decay.to_string());
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.milestones", join(&self.train.lr_milestones));
        kv("train.lr_factor", self.train.lr_factor.to_string());
        for (sec, a) in [("attack", &self.attack), ("eval", &self.eval)] {
            kv(&format!("{sec}.eps"), a.eps.to_string());
            kv(&format!("{sec}.alpha"), a.alpha.to_string());
            kv(&format!("{sec}.steps"), a.steps.to_string());
            kv(&format!("{sec}.rand_init"), a.rand_init.to_string());
        }
        kv("trades.beta", self.trades.beta.to_string());
        kv("rofg.t", self.t.to_string());
        kv("rofg.start_epoch", self.rofg_start.to_string());
        kv("rofg_as.eps_a", self.eps_a.to_string());
        if let Some(s) = self.steps_a {
            kv("rofg_as.steps_a", s.to_string());
        }
        if let Some(a) = self.alpha_a {
            kv("rofg_as.alpha_a", a.to_string());
        }
        kv("rofg_da.p", self.da_p.to_string());
        kv("rofg_da.max_rounds", self.da_max_rounds.to_string());
        kv(
            "ablation.variant",
            match self.ablation.variant {
                AblationVariant::Baseline => "baseline",
                AblationVariant::DataAndPerturbation => "data_and_perturbation",
                AblationVariant::PerturbationOnly => "perturbation_only",
            }
            .into(),
        );
        kv("ablation.trigger_epoch", self.ablation.trigger_epoch.to_string());
        kv("ablation.one_shot", self.ablation.one_shot.to_string());
        match self.verification.mode {
            VerificationMode::Fixed { eps_add } => {
                kv("verification.mode", "fixed".into());
                kv("verification.eps_add", eps_add.to_string());
            }
            VerificationMode::Linear { eps_max } => {
                kv("verification.mode", "linear".into());
                kv("verification.eps_max", eps_max.to_string());
            }
        }
        kv("verification.e_start", self.verification.e_start.to_string());
        kv("verification.e_end", self.verification.e_end.to_string());
        kv("verification.steps", self.verification.steps.to_string());
        kv("verification.alpha_frac", self.verification.alpha_frac.to_string());
        out
    }

    /// Number of leading epochs during which this run trains exactly like its
    /// base method (plain AT or TRADES), so it may be forked from one.
    pub fn shared_prefix(&self) -> usize {
        let e = self.train.epochs;
        match self.method {
            Method::Natural | Method::At | Method::Trades => e,
            Method::AtAblation => match self.ablation.variant {
                AblationVariant::Baseline => e,
                _ => self.ablation.trigger_epoch.min(e),
            },
            Method::AtVerification => self.verification.e_start.min(e),
            Method::AtRofgAs | Method::AtRofgDa | Method::TradesRofgAs | Method::TradesRofgDa => self.rofg_start.min(e),
        }
    }

    fn hooks(&self) -> Vec<Box<dyn BatchHook>> {
        let mut hooks: Vec<Box<dyn BatchHook>> = Vec::new();
        if self.augment {
            hooks.push(Box::new(AugmentHook(StandardAugment::default())));
        }
        match self.method {
            Method::Natural | Method::At | Method::Trades => {}
            Method::AtAblation => hooks.push(Box::new(AblationHook::new(self.ablation, self.t))),
            Method::AtVerification => hooks.push(Box::new(VerificationHook(self.verification))),
            Method::AtRofgAs | Method::TradesRofgAs => hooks.push(Box::new(RofgAsHook(self.rofg_as()))),
            Method::AtRofgDa | Method::TradesRofgDa => hooks.push(Box::new(RofgDaHook {
                cfg: self.rofg_da(),
                augmenter: MixAugment,
            })),
        }
        hooks
    }
}

/// Natural accuracy, robust accuracy and mean adversarial loss on a test set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub nat_acc: f64,
    pub rob_acc: f64,
    pub adv_loss: f64,
}

/// Rows per evaluation shard. Shard boundaries and streams are fixed, so the
/// result does not depend on the worker count.
pub const EVAL_SHARD: usize = 250;

struct ShardTally {
    nat: usize,
    rob: usize,
    loss: f64,
}

fn eval_shard(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &Dataset,
    atk: &AttackConfig,
    rows: &[usize],
    mut rng: Rng,
) -> Result<ShardTally> {
    let (x, y) = data.batch(rows);
    let nat = correct_count(&predict(spec, params, &x)?, &y);
    let adv = pgd_attack(spec, params, &x, &y, atk, &mut rng)?;
    let logits = predict(spec, params, &adv.x_adv)?;
    let loss: f64 = cross_entropy_values(&logits, &y)?.iter().map(|&l| l as f64).sum();
    Ok(ShardTally {
        nat,
        rob: correct_count(&logits, &y),
        loss,
    })
}

/// Evaluates on `data` with shard `s` attacked from stream `rng.derive([s])`,
/// spread over `threads` workers and reduced in shard order.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &Dataset,
    atk: &AttackConfig,
    rng: &Rng,
    threads: usize,
) -> Result<EvalResult> {
    atk.validate()?;
    let shards: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(EVAL_SHARD)
        .map(|c| c.to_vec())
        .collect();
    let run = |s: usize| eval_shard(spec, params, data, atk, &shards[s], rng.derive(&[s as u64]));
    let threads = threads.clamp(1, shards.len().max(1));
    let tallies: Vec<Result<ShardTally>> = if threads == 1 {
        (0..shards.len()).map(run).collect()
    } else {
        let mut slots: Vec<Option<Result<ShardTally>>> = (0..shards.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let run = &run;
                    let n = shards.len();
                    scope.spawn(move || (w..n).step_by(threads).map(|s| (s, run(s))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (s, r) in h.join().expect("evaluation worker panicked") {
                    slots[s] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every shard evaluated")).collect()
    };
    let (mut nat, mut rob, mut loss) = (0usize, 0usize, 0.0f64);
    for t in tallies {
        let t = t?;
        nat += t.nat;
        rob += t.rob;
        loss += t.loss;
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        nat_acc: nat as f64 / n,
        rob_acc: rob as f64 / n,
        adv_loss: loss / n,
    })
}

/// Best and last test robust accuracy of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapReport {
    pub best_epoch: usize,
    pub best_rob: f64,
    pub last_rob: f64,
    /// `best_rob - last_rob`, never negative.
    pub gap: f64,
}

/// Best = highest test robust accuracy, earliest epoch on ties.
pub fn robustness_gap(curves: &[CurveRecord]) -> Result<GapReport> {
    let last = curves
        .last()
        .ok_or_else(|| Error::contract("robustness_gap", "empty curves"))?;
    let best = curves
        .iter()
        .fold(&curves[0], |b, r| if r.test_rob_acc > b.test_rob_acc { r } else { b });
    Ok(GapReport {
        best_epoch: best.epoch,
        best_rob: best.test_rob_acc,
        last_rob: last.test_rob_acc,
        gap: best.test_rob_acc - last.test_rob_acc,
    })
}

/// Loads or generates the train/test pair described by `source`.
pub fn load_data(source: &DataSource) -> Result<(Dataset, Dataset)> {
    match source {
        DataSource::Synthetic { spec, seed } => gen_synthetic(spec, &Rng::new(*seed)),
        DataSource::Files { train, test } => Ok((load_dataset(train, Split::Train)?, load_dataset(test, Split::Test)?)),
    }
}

/// A training run in progress. Cloning the state at an epoch boundary and
/// continuing under another method ([`Session::fork`]) is equivalent to
/// running that method from scratch, as long as the epochs already done lie
/// inside its [`ExperimentConfig::shared_prefix`].
pub struct Session {
    cfg: ExperimentConfig,
    spec: ModelSpec,
    train: Dataset,
    test: Dataset,
    params: ModelParams,
    state: OptimizerState,
    records: Vec<CurveRecord>,
    best: Option<Checkpoint>,
    hooks: Vec<Box<dyn BatchHook>>,
    root: Rng,
    threads: usize,
}

impl Session {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let (train, test) = load_data(&cfg.data)?;
        Self::with_data(cfg, train, test)
    }

    pub fn with_data(cfg: ExperimentConfig, train: Dataset, test: Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.geometry() != test.geometry() || train.class_count() != test.class_count() {
            return Err(Error::Config("train and test sets disagree on geometry or classes".into()));
        }
        let spec = cfg.model.build(train.geometry(), train.class_count())?;
        let root = Rng::new(cfg.seed);
        let params = init_params(&spec, &mut root.derive(&[stream::INIT]))?;
        let state = OptimizerState::new(&params);
        let hooks = cfg.hooks();
        Ok(Self {
            cfg,
            spec,
            train,
            test,
            params,
            state,
            records: Vec::new(),
            best: None,
            hooks,
            root,
            threads: 1,
        })
    }

    /// Evaluation workers (training is always single-threaded).
    pub fn set_threads(&mut self, threads: usize) {
        self.threads = threads.max(1);
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn records(&self) -> &[CurveRecord] {
        &self.records
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.records.len()
    }

    pub fn is_done(&self) -> bool {
        self.epoch() >= self.cfg.train.epochs
    }

    /// Continues this run's state under `cfg`. Fails unless everything but
    /// the method and its hook settings matches, or if `cfg` would already
    /// have diverged during the epochs done so far.
    pub fn fork(&self, cfg: ExperimentConfig) -> Result<Session> {
        cfg.validate()?;
        let same = cfg.seed == self.cfg.seed
            && cfg.data == self.cfg.data
            && cfg.augment == self.cfg.augment
            && cfg.model == self.cfg.model
            && cfg.train == self.cfg.train
            && cfg.attack == self.cfg.attack
            && cfg.eval == self.cfg.eval
            && cfg.t == self.cfg.t
            && cfg.method.trades_base() == self.cfg.method.trades_base()
            && (!cfg.method.trades_base() || cfg.trades == self.cfg.trades);
        if !same {
            return Err(Error::Config("fork target differs outside method settings".into()));
        }
        if self.epoch() > cfg.shared_prefix() || self.epoch() > self.cfg.shared_prefix() {
            return Err(Error::Config(format!(
                "cannot fork at epoch {}: target diverges at epoch {}",
                self.epoch(),
                cfg.shared_prefix().min(self.cfg.shared_prefix())
            )));
        }
        let hooks = cfg.hooks();
        Ok(Session {
            cfg,
            spec: self.spec.clone(),
            train: self.train.clone(),
            test: self.test.clone(),
            params: self.params.clone(),
            state: self.state.clone(),
            records: self.records.clone(),
            best: self.best.clone(),
            hooks,
            root: self.root.clone(),
            threads: self.threads,
        })
    }

    /// Trains and evaluates one epoch and returns its curve record.
    pub fn step(&mut self) -> Result<CurveRecord> {
        let epoch = self.epoch();
        let (cfg, spec) = (&self.cfg, &self.spec);
        let stats = match cfg.method {
            Method::Natural => train_epoch_natural(
                spec,
                &mut self.params,
                &mut self.state,
                &self.train,
                &cfg.train,
                epoch,
                &self.root,
                &mut self.hooks,
            )?,
            m if m.trades_base() => train_epoch_trades(
                spec,
                &mut self.params,
                &mut self.state,
                &self.train,
                &cfg.train,
                &cfg.attack,
                &cfg.trades,
                epoch,
                &self.root,
                &mut self.hooks,
            )?,
            _ => train_epoch_at(
                spec,
                &mut self.params,
                &mut self.state,
                &self.train,
                &cfg.train,
                &cfg.attack,
                epoch,
                &self.root,
                &mut self.hooks,
            )?,
        };
        let eval_rng = self.root.derive(&[stream::EVAL, epoch as u64]);
        let ev = evaluate(spec, &self.params, &self.test, &cfg.eval, &eval_rng, self.threads).map_err(|e| {
            Error::Training {
                epoch,
                batch: 0,
                context: "evaluation",
                source: Box::new(e),
            }
        })?;
        let record = CurveRecord {
            epoch,
            lr: stats.lr,
            train_nat_acc: stats.train_nat_acc,
            train_rob_acc: stats.train_rob_acc,
            test_nat_acc: ev.nat_acc,
            test_rob_acc: ev.rob_acc,
            train_adv_loss: stats.train_adv_loss,
            test_adv_loss: ev.adv_loss,
            aug_rounds_mean: stats.aug_rounds_mean,
            small_loss_frac: stats.small_loss_frac(cfg.t),
        }
        .quantized();
        let improved = self.best.as_ref().is_none_or(|b| record.test_rob_acc > b.metric);
        if improved {
            self.best = Some(self.checkpoint(CheckpointKind::BestRobust, record.test_rob_acc, epoch));
        }
        self.records.push(record);
        Ok(record)
    }

    /// Runs until `epoch` epochs are complete (or the configured total).
    pub fn run_until(&mut self, epoch: usize) -> Result<()> {
        while self.epoch() < epoch.min(self.cfg.train.epochs) {
            self.step()?;
        }
        Ok(())
    }

    fn checkpoint(&self, kind: CheckpointKind, metric: f64, epoch: usize) -> Checkpoint {
        Checkpoint {
            epoch,
            kind,
            metric,
            params: self.params.clone(),
            velocity: self.state.velocity().clone(),
        }
    }

    pub fn best(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    pub fn last(&self) -> Option<Checkpoint> {
        let r = self.records.last()?;
        Some(self.checkpoint(CheckpointKind::Last, r.test_rob_acc, r.epoch))
    }

    pub fn summary(&self) -> Result<RunSummary> {
        let gap = robustness_gap(&self.records)?;
        let best = &self.records[gap.best_epoch - self.records[0].epoch];
        let last = self.records.last().expect("non-empty");
        Ok(RunSummary {
            label: self.cfg.label(),
            method: self.cfg.method.name().to_string(),
            seed: self.cfg.seed,
            epochs: self.records.len(),
            best_epoch: gap.best_epoch,
            best_nat_acc: best.test_nat_acc,
            best_rob_acc: gap.best_rob,
            last_nat_acc: last.test_nat_acc,
            last_rob_acc: gap.last_rob,
            gap: gap.gap,
        })
    }

    /// Writes curves, checkpoints, summary and resolved config into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<RunSummary> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_curves(&self.records, &dir.join("curves.csv"))?;
        let summary = self.summary()?;
        if let Some(b) = &self.best {
            save_checkpoint(b, &dir.join("best.ckpt"))?;
        }
        if let Some(l) = self.last() {
            save_checkpoint(&l, &dir.join("last.ckpt"))?;
        }
        let path = dir.join("summary.txt");
        std::fs::write(&path, summary.to_text()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("config.cfg");
        std::fs::write(&path, self.cfg.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(summary)
    }
}

/// Headline numbers of a finished run, stored as `summary.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub method: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_nat_acc: f64,
    pub best_rob_acc: f64,
    pub last_nat_acc: f64,
    pub last_rob_acc: f64,
    pub gap: f64,
}

impl RunSummary {
    pub fn to_text(&self) -> String {
        format!(
            "label={}\nmethod={}\nseed={}\nepochs={}\nbest_epoch={}\nbest_nat_acc={:.6}\nbest_rob_acc={:.6}\n\
last_nat_acc={:.6}\nlast_rob_acc={:.6}\ngap={:.6}\n",
            self.label,
            self.method,
            self.seed,
            self.epochs,
            self.best_epoch,
            self.best_nat_acc,
            self.best_rob_acc,
            self.last_nat_acc,
            self.last_rob_acc,
            self.gap
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("summary line {line:?}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| map.get(k).cloned().ok_or_else(|| Error::Config(format!("summary lacks {k}")));
        let num = |k: &str| -> Result<f64> { parse_number(&get(k)?) };
        Ok(Self {
            label: get("label")?,
            method: get("method")?,
            seed: parse_int(&get("seed")?)?,
            epochs: parse_int(&get("epochs")?)?,
            best_epoch: parse_int(&get("best_epoch")?)?,
            best_nat_acc: num("best_nat_acc")?,
            best_rob_acc: num("best_rob_acc")?,
            last_nat_acc: num("last_nat_acc")?,
            last_rob_acc: num("last_rob_acc")?,
            gap: num("gap")?,
        })
    }
}

/// Trains `cfg` to completion and writes its outputs under `out`. The curves
/// file is rewritten after every epoch so partial runs can be inspected.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<RunSummary> {
    let mut session = Session::new(cfg.clone())?;
    session.set_threads(threads);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    while !session.is_done() {
        session.step()?;
        write_curves(session.records(), &out.join("curves.csv"))?;
    }
    session.write_outputs(out)
}

/// Parameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    EpsA,
    T,
    P,
    EpsAdd,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "eps_a" => Ok(SweepAxis::EpsA),
            "t" => Ok(SweepAxis::T),
            "p" => Ok(SweepAxis::P),
            "eps_add" => Ok(SweepAxis::EpsAdd),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?} (eps_a, t, p, eps_add)"))),
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::EpsA => "rofg_as.eps_a",
            SweepAxis::T => "rofg.t",
            SweepAxis::P => "rofg_da.p",
            SweepAxis::EpsAdd => "verification.eps_add",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::EpsA => "eps_a",
            SweepAxis::T => "t",
            SweepAxis::P => "p",
            SweepAxis::EpsAdd => "eps_add",
        }
    }
}

/// One point of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub summary: RunSummary,
    /// Test robust accuracy at the final epoch.
    pub final_rob: f64,
}

/// Runs `base` once per value of `axis`. Configs that share a training prefix
/// with `base`'s method run that prefix once and fork from it. With `out`,
/// each point is written to `out/<axis>_<index>`.
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    out: Option<&Path>,
    threads: usize,
) -> Result<Vec<SweepPoint>> {
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            c.set(axis.key(), &v.to_string())?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let prefix = configs.iter().map(|c| c.shared_prefix()).min().unwrap_or(0);
    let mut trunk = Session::new(configs.first().cloned().unwrap_or_else(|| base.clone()))?;
    trunk.set_threads(threads);
    trunk.run_until(prefix)?;
    let mut points = Vec::new();
    for (i, (cfg, &value)) in configs.into_iter().zip(values).enumerate() {
        let mut s = trunk.fork(cfg)?;
        s.run_until(usize::MAX)?;
        let summary = match out {
            Some(dir) => s.write_outputs(&dir.join(format!("{}_{i}", axis.name())))?,
            None => s.summary()?,
        };
        let final_rob = s.records().last().map(|r| r.test_rob_acc).unwrap_or(0.0);
        points.push(SweepPoint {
            value,
            summary,
            final_rob,
        });
    }
    Ok(points)
}

/// Counts adjacent increases in `values` and the largest one.
pub fn inversions(values: &[f64]) -> (usize, f64) {
    values
        .windows(2)
        .filter(|w| w[1] > w[0])
        .fold((0, 0.0), |(n, m), w| (n + 1, f64::max(m, w[1] - w[0])))
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups run summaries by label and renders a mean±std table in
/// percentage points.
pub fn report(summaries: &[RunSummary]) -> String {
    let mut groups: BTreeMap<&str, Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        groups.entry(&s.label).or_default().push(s);
    }
    let mut out = String::from("| run | seeds | best nat | best rob | last nat | last rob | gap |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for (label, runs) in groups {
        let cell = |f: fn(&RunSummary) -> f64| {
            let (m, s) = mean_std(&runs.iter().map(|r| 100.0 * f(r)).collect::<Vec<_>>());
            format!("{m:.2}±{s:.2}")
        };
        let _ = writeln!(
            out,
            "| {label} | {} | {} | {} | {} | {} | {} |",
            runs.len(),
            cell(|r| r.best_nat_acc),
            cell(|r| r.best_rob_acc),
            cell(|r| r.last_nat_acc),
            cell(|r| r.last_rob_acc),
            cell(|r| r.gap),
        );
    }
    out
}

/// Reads `summary.txt` from each run directory.
pub fn read_summaries(dirs: &[PathBuf]) -> Result<Vec<RunSummary>> {
    dirs.iter()
        .map(|d| {
            let path = d.join("summary.txt");
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            RunSummary::parse(&text)
        })
        .collect()
}
