//! Five-stage training recipe: stage ordering, freeze contract, optimizer,
//! checkpointing and seeded replay.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{attach, derive_rank, Adapter};
use crate::autodiff::{Graph, Tensor};
use crate::ckpt::Container;
use crate::data::{MonoRecord, ParallelPair};
use crate::error::{Error, Result};
use crate::groups::GroupId;
use crate::losses::{
    self, batch_mean, encode_triple, pair_losses, score_pair, EncodedTriple, LossConfig, Method,
    PreferenceTriple,
};
use crate::model::{PolicyModel, Scope};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Base model on sampled monolingual text.
    #[serde(rename = "pt1", alias = "PT1_mono_base")]
    Pt1MonoBase = 1,
    /// One group's adapter on monolingual text.
    #[serde(rename = "pt2", alias = "PT2_mono_adapters")]
    Pt2MonoAdapters = 2,
    /// One group's adapter on pseudo-monolingual text.
    #[serde(rename = "pt3", alias = "PT3_pseudo_mono")]
    Pt3PseudoMono = 3,
    /// Supervised translation.
    #[serde(rename = "post1", alias = "POST1_sft")]
    Post1Sft = 4,
    /// Preference optimization.
    #[serde(rename = "post2", alias = "POST2_preference")]
    Post2Preference = 5,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Pt1MonoBase,
        Stage::Pt2MonoAdapters,
        Stage::Pt3PseudoMono,
        Stage::Post1Sft,
        Stage::Post2Preference,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.index() == i)
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pt1MonoBase => "pt1",
            Stage::Pt2MonoAdapters => "pt2",
            Stage::Pt3PseudoMono => "pt3",
            Stage::Post1Sft => "post1",
            Stage::Post2Preference => "post2",
        }
    }

    /// Stages after the first train a group's adapter over a frozen base.
    pub fn is_adapter_stage(self) -> bool {
        self != Stage::Pt1MonoBase
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of the stage spent linearly warming up the learning rate.
    pub warmup_frac: f64,
    /// Rescales all gradients of a step so their joint L2 norm is at most this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.01,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..=1.0).contains(&self.warmup_frac)
            && !matches!(self.clip_norm, Some(c) if !(c > 0.0));
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }

    /// Learning rate for 0-based step `k` of a `total`-step stage.
    pub fn lr_at(&self, k: usize, total: usize) -> f64 {
        let warm = (self.warmup_frac * total as f64).ceil() as usize;
        if warm == 0 || k >= warm {
            self.lr
        } else {
            self.lr * (k + 1) as f64 / warm as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Moment {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adaptive-moment optimizer with per-tensor moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Adam {
    moments: BTreeMap<String, Moment>,
}

impl Adam {
    pub fn tensors(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// Drops moments of tensors outside `keep`.
    pub fn retain(&mut self, keep: &[String]) {
        self.moments.retain(|k, _| keep.contains(k));
    }

    /// Applies one update. Every gradient must match its tensor's size.
    pub fn step(
        &mut self,
        model: &mut PolicyModel,
        grads: &[(String, Vec<f64>)],
        cfg: &AdamConfig,
        lr: f64,
    ) -> Result<()> {
        let scale = match cfg.clip_norm {
            Some(c) => {
                let norm = grads
                    .iter()
                    .flat_map(|(_, g)| g)
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (name, g) in grads {
            let t = model.trainable_mut(name)?;
            if t.numel() != g.len() {
                return Err(Error::Contract(format!(
                    "gradient for {name} has {} values, tensor has {}",
                    g.len(),
                    t.numel()
                )));
            }
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moment {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            mo.t += 1;
            let c1 = 1.0 - cfg.beta1.powi(mo.t as i32);
            let c2 = 1.0 - cfg.beta2.powi(mo.t as i32);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                let gi = g[i] * scale;
                mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * gi;
                mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = mo.m[i] / c1;
                let vh = mo.v[i] / c2;
                *w -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    /// Record files feeding the stage.
    #[serde(default)]
    pub data: Vec<PathBuf>,
    #[serde(default)]
    pub steps: Option<usize>,
    /// Token budget, converted to steps from the data's mean example length.
    #[serde(default)]
    pub tokens: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub loss: Option<LossConfig>,
    #[serde(default)]
    pub group: Option<GroupId>,
    /// Rank of a newly created adapter; derived from the budget when absent.
    #[serde(default)]
    pub adapter_rank: Option<usize>,
    #[serde(default)]
    pub adapter_alpha: Option<f64>,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Train on both directions of each parallel pair.
    #[serde(default = "default_true")]
    pub bidirectional: bool,
    /// Permits skipping stages or running them out of order.
    #[serde(default)]
    pub allow_out_of_order: bool,
}

fn default_batch() -> usize {
    16
}

fn default_true() -> bool {
    true
}

impl StageConfig {
    pub fn new(stage: Stage, steps: usize, seed: u64) -> Self {
        Self {
            stage,
            data: Vec::new(),
            steps: Some(steps),
            tokens: None,
            batch_size: default_batch(),
            loss: None,
            group: None,
            adapter_rank: None,
            adapter_alpha: None,
            optimizer: AdamConfig::default(),
            seed,
            bidirectional: true,
            allow_out_of_order: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, with `seed` overriding (or supplying) the file's
    /// seed. Not validated, so callers can apply further overrides first.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(seed) = seed {
            let seed = i64::try_from(seed)
                .map_err(|_| Error::Config(format!("seed {seed} exceeds the config range")))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        let mut cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
        // data paths are relative to the config file
        if let Some(dir) = path.parent() {
            for p in cfg.data.iter_mut() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_some() == self.tokens.is_some() {
            return Err(Error::Config(
                "exactly one of steps or tokens must be set".into(),
            ));
        }
        if self.steps == Some(0) || self.tokens == Some(0) {
            return Err(Error::Config("stage budget must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.optimizer.validate()?;
        if self.stage.is_adapter_stage() && self.group.is_none() {
            return Err(Error::Config(format!(
                "stage {} needs a group",
                self.stage.name()
            )));
        }
        if !self.stage.is_adapter_stage() && self.group.is_some() {
            return Err(Error::Config(
                "pt1 trains the base model and takes no group".into(),
            ));
        }
        match (self.stage, &self.loss) {
            (Stage::Post2Preference, None) => {
                return Err(Error::Config("post2 needs a preference loss".into()))
            }
            (Stage::Post2Preference, Some(l)) if l.method == Method::Sft => {
                return Err(Error::Config("post2 needs a preference loss".into()))
            }
            (Stage::Post2Preference, Some(l)) => l.validate()?,
            (_, Some(l)) if l.method != Method::Sft => {
                return Err(Error::Config(format!(
                    "stage {} trains with sft, not {}",
                    self.stage.name(),
                    l.method.name()
                )))
            }
            _ => {}
        }
        Ok(())
    }

    /// Step budget; a token budget is divided by tokens per batch.
    pub fn resolve_steps(&self, mean_tokens_per_example: f64) -> Result<usize> {
        match (self.steps, self.tokens) {
            (Some(s), _) => Ok(s),
            (None, Some(t)) => {
                if !(mean_tokens_per_example > 0.0) {
                    return Err(Error::Config(
                        "cannot convert tokens to steps without data".into(),
                    ));
                }
                let per_step = mean_tokens_per_example * self.batch_size as f64;
                Ok(((t as f64 / per_step).ceil() as usize).max(1))
            }
            (None, None) => Err(Error::Config("no step or token budget".into())),
        }
    }
}

/// In-memory inputs of a stage.
#[derive(Debug, Clone)]
pub enum StageData {
    Mono(Vec<MonoRecord>),
    Parallel(Vec<ParallelPair>),
    Preference(Vec<PreferenceTriple>),
}

impl StageData {
    fn kind(&self) -> &'static str {
        match self {
            StageData::Mono(_) => "monolingual",
            StageData::Parallel(_) => "parallel",
            StageData::Preference(_) => "preference",
        }
    }

    fn expected(stage: Stage) -> &'static str {
        match stage {
            Stage::Pt1MonoBase | Stage::Pt2MonoAdapters | Stage::Pt3PseudoMono => "monolingual",
            Stage::Post1Sft => "parallel",
            Stage::Post2Preference => "preference",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            StageData::Mono(v) => v.len(),
            StageData::Parallel(v) => v.len(),
            StageData::Preference(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean characters per example, used for token budgets.
    pub fn mean_tokens(&self) -> f64 {
        let (sum, n) = match self {
            StageData::Mono(v) => (v.iter().map(|r| r.tokens() + 1).sum::<usize>(), v.len()),
            StageData::Parallel(v) => (
                v.iter()
                    .map(|p| p.src.chars().count() + p.tgt.chars().count() + 1)
                    .sum(),
                v.len(),
            ),
            StageData::Preference(v) => (
                v.iter()
                    .map(|t| {
                        t.x.chars().count() + t.y_w.chars().count() + t.y_l.chars().count() + 2
                    })
                    .sum(),
                v.len(),
            ),
        };
        if n == 0 {
            0.0
        } else {
            sum as f64 / n as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: u64,
    pub loss: f64,
    /// Batch mean of `log π(y_w|x)/|y_w|` (preference stages).
    pub chosen_avg_logprob: Option<f64>,
    /// Batch mean of τ (ARPO).
    pub tau_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub base_checksum_before: String,
    pub base_checksum_after: String,
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: PolicyModel,
    pub optimizer: Adam,
    /// Global optimizer step counter.
    pub step: u64,
    pub last_stage: Option<Stage>,
    /// Steps taken in the current stage.
    pub stage_step: usize,
    /// Cached reference log-probabilities `(y_w, y_l)` of the current stage.
    pub reference_cache: Option<Vec<(f64, f64)>>,
    rng: ChaCha8Rng,
    pub log: Vec<StepRecord>,
}

impl PartialEq for TrainState {
    fn eq(&self, other: &Self) -> bool {
        self.model == other.model
            && self.optimizer == other.optimizer
            && self.step == other.step
            && self.last_stage == other.last_stage
            && self.stage_step == other.stage_step
            && self.reference_cache == other.reference_cache
            && self.rng == other.rng
            && self.log.len() == other.log.len()
            && self.log.iter().zip(&other.log).all(|(a, b)| {
                a.loss.to_bits() == b.loss.to_bits() && a.step == b.step && a.stage == b.stage
            })
    }
}

enum Examples {
    Sft(Vec<(Vec<TokenId>, Vec<TokenId>)>),
    Pref(Vec<EncodedTriple>),
}

impl Examples {
    fn len(&self) -> usize {
        match self {
            Examples::Sft(v) => v.len(),
            Examples::Pref(v) => v.len(),
        }
    }
}

/// A stage in progress. Created by [`TrainState::begin_stage`] or
/// [`TrainState::resume_stage`].
pub struct StageRun {
    cfg: StageConfig,
    examples: Examples,
    loss: LossConfig,
    total_steps: usize,
    scope: Scope,
    route: Option<GroupId>,
    checksum: String,
}

impl TrainState {
    pub fn new(model: PolicyModel, seed: u64) -> Self {
        Self {
            model,
            optimizer: Adam::default(),
            step: 0,
            last_stage: None,
            stage_step: 0,
            reference_cache: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            log: Vec::new(),
        }
    }

    fn check_order(&self, cfg: &StageConfig) -> Result<()> {
        if cfg.allow_out_of_order {
            return Ok(());
        }
        let next = cfg.stage.index();
        let ok = match self.last_stage {
            None => next == 1,
            Some(last) => next == last.index() || next == last.index() + 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Sequencing(format!(
                "stage {} cannot follow {}; set allow_out_of_order for ablations",
                cfg.stage.name(),
                self.last_stage.map_or("a fresh model", Stage::name)
            )))
        }
    }

    /// Validates order and inputs, freezes the base for adapter stages,
    /// creates the group's adapter when missing and reseeds the sampler.
    pub fn begin_stage(&mut self, cfg: &StageConfig, data: &StageData) -> Result<StageRun> {
        cfg.validate()?;
        self.check_order(cfg)?;
        if cfg.stage == Stage::Pt1MonoBase && !self.model.adapters().is_empty() {
            return Err(Error::State(
                "pt1 trains the base model; detach adapters first".into(),
            ));
        }
        if cfg.stage.is_adapter_stage() {
            let g = cfg.group.expect("validated");
            self.model.set_frozen(true);
            if self.model.adapter(g).is_none() {
                let mc = *self.model.config();
                let rank = match cfg.adapter_rank {
                    Some(r) => r,
                    None => derive_rank(&mc, self.model.vocab().len())?,
                };
                let a = Adapter::init(
                    &mc,
                    g,
                    &mc.injection_points(),
                    rank,
                    cfg.adapter_alpha,
                    cfg.seed,
                )?;
                attach(&mut self.model, a)?;
            }
        }
        self.rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        self.stage_step = 0;
        self.reference_cache = None;
        self.last_stage = Some(cfg.stage);
        let mut run = self.prepare(cfg, data)?;
        if run.loss.method.needs_reference() {
            self.reference_cache = Some(self.compute_reference(&run)?);
        }
        let keep = self.model.trainable(run.scope)?;
        self.optimizer.retain(&keep);
        run.checksum = self.model.base_checksum();
        Ok(run)
    }

    /// Continues a stage from a restored checkpoint with the same config and
    /// data.
    pub fn resume_stage(&mut self, cfg: &StageConfig, data: &StageData) -> Result<StageRun> {
        cfg.validate()?;
        if self.last_stage != Some(cfg.stage) {
            return Err(Error::Sequencing(format!(
                "checkpoint is not inside stage {}",
                cfg.stage.name()
            )));
        }
        let run = self.prepare(cfg, data)?;
        if run.loss.method.needs_reference() && self.reference_cache.is_none() {
            return Err(Error::State(
                "checkpoint lacks reference log-probabilities".into(),
            ));
        }
        Ok(run)
    }

    fn prepare(&self, cfg: &StageConfig, data: &StageData) -> Result<StageRun> {
        if data.kind() != StageData::expected(cfg.stage) {
            return Err(Error::Config(format!(
                "stage {} needs {} data, got {}",
                cfg.stage.name(),
                StageData::expected(cfg.stage),
                data.kind()
            )));
        }
        if data.is_empty() {
            return Err(Error::Data(format!(
                "stage {} has no examples",
                cfg.stage.name()
            )));
        }
        let v = self.model.vocab();
        let examples = match data {
            StageData::Mono(recs) => Examples::Sft(
                recs.iter()
                    .map(|r| Ok((Vec::new(), v.encode_target(&r.text)?)))
                    .collect::<Result<_>>()?,
            ),
            StageData::Parallel(pairs) => {
                let mut out = Vec::new();
                for p in pairs {
                    p.validate()?;
                    out.push((v.encode(&p.prompt())?, v.encode_target(&p.tgt)?));
                    if cfg.bidirectional {
                        let r = p.reversed();
                        out.push((v.encode(&r.prompt())?, v.encode_target(&r.tgt)?));
                    }
                }
                Examples::Sft(out)
            }
            StageData::Preference(ts) => Examples::Pref(
                ts.iter()
                    .map(|t| encode_triple(&self.model, t))
                    .collect::<Result<_>>()?,
            ),
        };
        let scope = match cfg.group {
            Some(g) => Scope::Adapter(g),
            None => Scope::Base,
        };
        let loss = cfg
            .loss
            .clone()
            .unwrap_or_else(|| LossConfig::new(Method::Sft));
        Ok(StageRun {
            total_steps: cfg.resolve_steps(data.mean_tokens())?,
            cfg: cfg.clone(),
            examples,
            loss,
            scope,
            route: cfg.group,
            checksum: self.model.base_checksum(),
        })
    }

    fn compute_reference(&self, run: &StageRun) -> Result<Vec<(f64, f64)>> {
        let Examples::Pref(ts) = &run.examples else {
            return Ok(Vec::new());
        };
        let cfg = match &run.loss.reference {
            Some(_) => run.loss.clone(),
            // the policy at stage start serves as reference
            None => run.loss.clone().with_reference(self.model.clone()),
        };
        ts.iter()
            .map(|t| losses::reference_logprobs(&cfg, t, run.route))
            .collect()
    }

    /// Runs a whole stage.
    pub fn run_stage(&mut self, cfg: &StageConfig, data: &StageData) -> Result<StageReport> {
        let mut run = self.begin_stage(cfg, data)?;
        while !run.done(self) {
            run.step(self)?;
        }
        run.finish(self)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.set("kind", "train");
        self.model.write_into(&mut c);
        c.set("train.step", self.step);
        c.set("train.stage_step", self.stage_step);
        c.set("train.last_stage", self.last_stage.map_or(0, Stage::index));
        c.set("rng.seed", hex::encode(self.rng.get_seed()));
        c.set("rng.stream", self.rng.get_stream());
        c.set("rng.word_pos", self.rng.get_word_pos());
        let names: Vec<&str> = self.optimizer.tensors().collect();
        c.set("adam.tensors", names.join(","));
        for (name, mo) in &self.optimizer.moments {
            c.set(&format!("adam.t.{name}"), mo.t);
            c.tensors
                .push((format!("adam.m.{name}"), Tensor::vector(mo.m.clone())));
            c.tensors
                .push((format!("adam.v.{name}"), Tensor::vector(mo.v.clone())));
        }
        if let Some(cache) = &self.reference_cache {
            let flat = cache.iter().flat_map(|&(w, l)| [w, l]).collect();
            c.tensors.push((
                "train.reference".into(),
                Tensor::new(vec![cache.len(), 2], flat).expect("pairs"),
            ));
        }
        let log_rows: Vec<f64> = self
            .log
            .iter()
            .flat_map(|r| {
                [
                    r.stage.index() as f64,
                    r.step as f64,
                    r.loss,
                    r.chosen_avg_logprob.unwrap_or(f64::NAN),
                    r.tau_mean.unwrap_or(f64::NAN),
                ]
            })
            .collect();
        c.tensors.push((
            "train.log".into(),
            Tensor::new(vec![self.log.len(), 5], log_rows).expect("rows"),
        ));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.get("kind")? != "train" {
            return Err(Error::Config("not a training checkpoint".into()));
        }
        let model = PolicyModel::read_from(c)?;
        let mut optimizer = Adam::default();
        for name in c.get("adam.tensors")?.split(',').filter(|s| !s.is_empty()) {
            optimizer.moments.insert(
                name.to_string(),
                Moment {
                    m: c.tensor(&format!("adam.m.{name}"))?.data().to_vec(),
                    v: c.tensor(&format!("adam.v.{name}"))?.data().to_vec(),
                    t: c.parse(&format!("adam.t.{name}"))?,
                },
            );
        }
        let seed: [u8; 32] = hex::decode(c.get("rng.seed")?)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Integrity("bad rng seed".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(c.parse("rng.stream")?);
        rng.set_word_pos(c.parse("rng.word_pos")?);
        let last: u8 = c.parse("train.last_stage")?;
        let reference_cache = c
            .tensor("train.reference")
            .ok()
            .map(|t| t.data().chunks(2).map(|p| (p[0], p[1])).collect());
        let opt = |v: f64| (!v.is_nan()).then_some(v);
        let log = c
            .tensor("train.log")?
            .data()
            .chunks(5)
            .map(|r| {
                Ok(StepRecord {
                    stage: Stage::from_index(r[0] as u8)
                        .ok_or_else(|| Error::Integrity("bad log stage".into()))?,
                    step: r[1] as u64,
                    loss: r[2],
                    chosen_avg_logprob: opt(r[3]),
                    tau_mean: opt(r[4]),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            model,
            optimizer,
            step: c.parse("train.step")?,
            last_stage: Stage::from_index(last),
            stage_step: c.parse("train.stage_step")?,
            reference_cache,
            rng,
            log,
        })
    }

    pub fn checkpoint(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn restore(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    /// Draws `n` example indices with replacement.
    fn sample(&mut self, n: usize, len: usize) -> Vec<usize> {
        (0..n).map(|_| self.rng.random_range(0..len)).collect()
    }
}

impl StageRun {
    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn done(&self, state: &TrainState) -> bool {
        state.stage_step >= self.total_steps
    }

    /// One optimizer step on a sampled batch.
    pub fn step(&mut self, state: &mut TrainState) -> Result<StepRecord> {
        let idx = state.sample(self.cfg.batch_size, self.examples.len());
        let model = &state.model;
        let mut g = Graph::new();
        let mut bound = model.bind(&mut g, self.scope)?;
        let (loss, chosen, tau) = match &self.examples {
            Examples::Sft(ex) => {
                let batch: Vec<_> = idx.iter().map(|&i| ex[i].clone()).collect();
                (
                    losses::sft_nll_in(&mut g, &mut bound, model, self.route, &batch)?,
                    None,
                    None,
                )
            }
            Examples::Pref(ts) => {
                let mut pairs = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let reference = state.reference_cache.as_ref().map(|c| c[i]);
                    pairs.push(score_pair(
                        &mut g, &mut bound, model, &self.loss, self.route, &ts[i], reference,
                    )?);
                }
                let parts = pair_losses(&mut g, &self.loss, &pairs)?;
                let n = pairs.len() as f64;
                let chosen = pairs
                    .iter()
                    .map(|p| g.item(p.w) / p.w_len as f64)
                    .sum::<f64>()
                    / n;
                let tau = parts
                    .iter()
                    .map(|p| p.tau.map(|t| g.item(t)))
                    .sum::<Option<f64>>()
                    .map(|s| s / n);
                (batch_mean(&mut g, &parts)?, Some(chosen), tau)
            }
        };
        let value = g.item(loss);
        if !value.is_finite() {
            return Err(Error::Domain {
                op: "loss",
                detail: format!("non-finite training loss {value} at step {}", state.step),
            });
        }
        g.backward(loss)?;
        let names = model.trainable(self.scope)?;
        let grads: Vec<(String, Vec<f64>)> = names
            .into_iter()
            .zip(&bound.trainable)
            .map(|(n, v)| (n, g.grad(*v).map(<[f64]>::to_vec).unwrap_or_default()))
            .collect();
        let lr = self.cfg.optimizer.lr_at(state.stage_step, self.total_steps);
        state
            .optimizer
            .step(&mut state.model, &grads, &self.cfg.optimizer, lr)?;
        state.step += 1;
        state.stage_step += 1;
        let rec = StepRecord {
            stage: self.cfg.stage,
            step: state.step,
            loss: value,
            chosen_avg_logprob: chosen,
            tau_mean: tau,
        };
        state.log.push(rec);
        log::debug!(
            "{} step {} loss {value:.6}",
            self.cfg.stage.name(),
            state.step
        );
        Ok(rec)
    }

    /// Verifies the freeze contract and summarizes the stage.
    pub fn finish(self, state: &TrainState) -> Result<StageReport> {
        let after = state.model.base_checksum();
        if self.cfg.stage.is_adapter_stage() && after != self.checksum {
            return Err(Error::Contract(format!(
                "base weights changed during frozen stage {}",
                self.cfg.stage.name()
            )));
        }
        let stage_log = &state.log[state.log.len() - state.stage_step.min(state.log.len())..];
        Ok(StageReport {
            stage: self.cfg.stage,
            steps: state.stage_step,
            first_loss: stage_log.first().map_or(f64::NAN, |r| r.loss),
            last_loss: stage_log.last().map_or(f64::NAN, |r| r.loss),
            base_checksum_before: self.checksum,
            base_checksum_after: after,
        })
    }
}
