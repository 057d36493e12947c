//! Desk-scale comparison of preference methods on a synthetic cipher
//! translation task, reporting lexical collapse and the chosen-likelihood
//! trajectory of each method.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{build_preference, synthetic, ParallelPair, PreferenceOptions};
use crate::error::{Error, Result};
use crate::eval::{evaluate, over_rejection_report, EvalOptions, EvalResult, OverRejectionReport};
use crate::groups::{GroupId, ENGLISH};
use crate::losses::{LossConfig, Method};
use crate::model::{DecodeMode, ModelConfig, PolicyModel};
use crate::train::{AdamConfig, Stage, StageConfig, StageData, TrainState};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub seed: u64,
    /// Synthetic target language (`qc` or `qr`).
    pub lang: String,
    pub model: ModelConfig,
    /// Characters per source sentence.
    pub text_len: usize,
    pub mono_records: usize,
    pub mono_len: usize,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    /// Sources decoded by the SFT model to build preference triples.
    pub pool_pairs: usize,
    /// Disjoint pairs training the held-out scorer.
    pub scorer_pairs: usize,
    pub pt1_steps: usize,
    /// SFT stops at the first dev evaluation reaching `sft_target_bleu`.
    pub sft_max_steps: usize,
    pub sft_eval_every: usize,
    pub sft_target_bleu: f64,
    /// The scorer stops the same way, at `scorer_target_bleu`.
    pub scorer_max_steps: usize,
    pub scorer_target_bleu: f64,
    pub pref_steps: usize,
    pub adapter_rank: usize,
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub sft_lr: f64,
    /// Global gradient-norm bound for the SFT and scorer stages.
    pub sft_clip_norm: Option<f64>,
    pub pref_lr: f64,
    /// Sampling temperature for preference generation; greedy when absent.
    pub temperature: Option<f64>,
    pub methods: Vec<Method>,
    pub group: GroupId,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lang: "qc".into(),
            model: ModelConfig::default(),
            text_len: 6,
            mono_records: 1000,
            mono_len: 40,
            train_pairs: 200,
            dev_pairs: 50,
            test_pairs: 50,
            pool_pairs: 2000,
            scorer_pairs: 200,
            pt1_steps: 500,
            sft_max_steps: 4000,
            sft_eval_every: 25,
            sft_target_bleu: 0.95,
            scorer_max_steps: 4000,
            scorer_target_bleu: 0.95,
            pref_steps: 300,
            adapter_rank: 8,
            batch_size: 16,
            pretrain_lr: 3e-3,
            // unclipped adapter SFT collapses at this rate
            sft_lr: 3e-3,
            sft_clip_norm: Some(1.0),
            pref_lr: 1e-3,
            temperature: None,
            methods: vec![Method::Dpo, Method::Cpo, Method::Arpo],
            group: 1,
        }
    }
}

impl CompareConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        synthetic::encipher(&self.lang, "a").map_err(|e| Error::Config(e.to_string()))?;
        let counts = [
            self.text_len,
            self.mono_records,
            self.mono_len,
            self.train_pairs,
            self.dev_pairs,
            self.test_pairs,
            self.pool_pairs,
            self.scorer_pairs,
            self.pt1_steps,
            self.sft_max_steps,
            self.sft_eval_every,
            self.scorer_max_steps,
            self.pref_steps,
            self.adapter_rank,
            self.batch_size,
        ];
        if counts.contains(&0) {
            return Err(Error::Config(
                "every size and step count must be positive".into(),
            ));
        }
        if self.methods.is_empty() || self.methods.contains(&Method::Sft) {
            return Err(Error::Config(
                "methods must list preference losses only".into(),
            ));
        }
        if ![self.sft_target_bleu, self.scorer_target_bleu]
            .iter()
            .all(|b| (0.0..=1.0).contains(b))
        {
            return Err(Error::Config(
                "target BLEU values must lie in [0, 1]".into(),
            ));
        }
        if matches!(self.temperature, Some(t) if !(t > 0.0)) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        // prompt + source + target + EOS must fit the position table
        let prompt = crate::prompt::render(ENGLISH, &self.lang, &"a".repeat(self.text_len));
        let need = 1 + prompt.chars().count() + self.text_len + 1;
        if need > self.model.max_len || self.mono_len + 2 > self.model.max_len {
            return Err(Error::Config(format!(
                "sequences need {need} positions, model has {}",
                self.model.max_len
            )));
        }
        for lr in [self.pretrain_lr, self.sft_lr, self.pref_lr] {
            AdamConfig {
                lr,
                ..AdamConfig::default()
            }
            .validate()?;
        }
        AdamConfig {
            clip_norm: self.sft_clip_norm,
            ..AdamConfig::default()
        }
        .validate()?;
        Ok(())
    }

    fn stage(&self, stage: Stage, steps: usize, seed: u64, lr: f64) -> StageConfig {
        StageConfig {
            batch_size: self.batch_size,
            optimizer: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            group: stage.is_adapter_stage().then_some(self.group),
            adapter_rank: Some(self.adapter_rank),
            bidirectional: false,
            ..StageConfig::new(stage, steps, seed)
        }
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            max_len: self.text_len + 2,
            ..EvalOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub method: Method,
    pub eval: EvalResult,
    pub report: OverRejectionReport,
    pub final_loss: f64,
    /// Checkpoint bytes of the trained state.
    pub checkpoint: Vec<u8>,
}

impl MethodOutcome {
    /// Mean of the last tenth of the chosen-likelihood track minus the mean of
    /// the first tenth.
    pub fn likelihood_trend(&self) -> f64 {
        trend(&self.report.likelihood_track)
    }
}

pub fn trend(track: &[f64]) -> f64 {
    if track.is_empty() {
        return 0.0;
    }
    let k = (track.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    mean(&track[track.len() - k..]) - mean(&track[..k])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub config: CompareConfig,
    pub sft_steps: usize,
    pub sft: EvalResult,
    pub scorer: EvalResult,
    pub preference_pairs: usize,
    pub dropped_pairs: usize,
    pub sft_checkpoint: Vec<u8>,
    pub methods: Vec<MethodOutcome>,
}

impl Comparison {
    pub fn outcome(&self, method: Method) -> Option<&MethodOutcome> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// Relative change of the method's lexical BLEU against SFT.
    pub fn relative_bleu_change(&self, method: Method) -> Option<f64> {
        let sft = self.sft.mean.lexical_bleu;
        self.outcome(method)
            .map(|o| (o.eval.mean.lexical_bleu - sft) / sft)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        let _ = writeln!(
            out,
            "task: en-{} cipher, {} chars, seed {}",
            c.lang, c.text_len, c.seed
        );
        let _ = writeln!(
            out,
            "model: d_model={} d_hidden={} blocks={} max_len={} adapter_rank={}",
            c.model.d_model, c.model.d_hidden, c.model.n_blocks, c.model.max_len, c.adapter_rank
        );
        let _ = writeln!(out, "sft_steps: {}", self.sft_steps);
        let _ = writeln!(
            out,
            "preference_pairs: {} (dropped {})",
            self.preference_pairs, self.dropped_pairs
        );
        let _ = writeln!(
            out,
            "scorer_test_bleu: {:.6}",
            self.scorer.mean.lexical_bleu
        );
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<8} {:>12} {:>12} {:>16} {:>14} {:>12} {:>12}",
            "method",
            "lexical_bleu",
            "exact_match",
            "avg_ref_logprob",
            "proxy_reward",
            "rel_bleu",
            "ll_trend"
        );
        let row = |out: &mut String, name: &str, s: &crate::eval::Scores, rel: f64, trend: f64| {
            let _ = writeln!(
                out,
                "{:<8} {:>12.6} {:>12.6} {:>16.6} {:>14.6} {:>12.6} {:>12.6}",
                name,
                s.lexical_bleu,
                s.exact_match,
                s.avg_ref_logprob,
                s.proxy_reward.unwrap_or(f64::NAN),
                rel,
                trend
            );
        };
        row(&mut out, "sft", &self.sft.mean, 0.0, 0.0);
        for m in &self.methods {
            let rel = self.relative_bleu_change(m.method).unwrap_or(f64::NAN);
            row(
                &mut out,
                m.method.name(),
                &m.eval.mean,
                rel,
                m.likelihood_trend(),
            );
        }
        for m in &self.methods {
            let _ = writeln!(out);
            let _ = writeln!(out, "[{}] final_loss: {:.6}", m.method.name(), m.final_loss);
            out.push_str(&m.report.render());
        }
        out
    }
}

/// Adapter SFT from a pretrained base, evaluated on `target.1` every
/// `sft_eval_every` steps and stopped once its BLEU reaches `target.0`.
/// Returns the steps taken.
fn sft_to_target(
    cfg: &CompareConfig,
    state: &mut TrainState,
    stage: &StageConfig,
    train: Vec<ParallelPair>,
    target: (f64, &[ParallelPair]),
    name: &str,
) -> Result<usize> {
    // the comparison starts from a pretrained base; PT2/PT3 are not part of it
    let stage = StageConfig {
        allow_out_of_order: true,
        ..stage.clone()
    };
    let opts = cfg.eval_options();
    let data = StageData::Parallel(train);
    let mut run = state.begin_stage(&stage, &data)?;
    while !run.done(state) {
        run.step(state)?;
        if state.stage_step % cfg.sft_eval_every == 0 {
            let dev = evaluate(&state.model, Some(cfg.group), target.1, None, &opts)?;
            log::info!(
                "{name} step {}: dev bleu {:.4}",
                state.stage_step,
                dev.mean.lexical_bleu
            );
            if dev.mean.lexical_bleu >= target.0 {
                break;
            }
        }
    }
    run.finish(state)?;
    Ok(state.stage_step)
}

struct Splits {
    train: Vec<ParallelPair>,
    dev: Vec<ParallelPair>,
    test: Vec<ParallelPair>,
    pool: Vec<ParallelPair>,
    scorer: Vec<ParallelPair>,
}

fn splits(cfg: &CompareConfig) -> Result<Splits> {
    let sizes = [
        cfg.train_pairs,
        cfg.dev_pairs,
        cfg.test_pairs,
        cfg.pool_pairs,
        cfg.scorer_pairs,
    ];
    let mut all =
        synthetic::parallel(&cfg.lang, sizes.iter().sum(), cfg.text_len, cfg.seed)?.into_iter();
    let mut take = |n: usize| all.by_ref().take(n).collect::<Vec<_>>();
    Ok(Splits {
        train: take(sizes[0]),
        dev: take(sizes[1]),
        test: take(sizes[2]),
        pool: take(sizes[3]),
        scorer: take(sizes[4]),
    })
}

/// PT1 on monolingual text of both languages, adapter SFT until the dev set
/// reaches the target BLEU, preference triples from the SFT model's own
/// outputs, then one POST2 run per method from the same SFT state.
pub fn run_comparison(cfg: &CompareConfig) -> Result<Comparison> {
    cfg.validate()?;
    let data = splits(cfg)?;
    let seed = cfg.seed;
    let model = PolicyModel::new(Vocab::toy(), cfg.model, seed)?;
    let mut state = TrainState::new(model, seed);

    let mut mono =
        synthetic::monolingual(ENGLISH, cfg.mono_records, cfg.mono_len, seed ^ 0x6d6f6e6f)?;
    mono.extend(synthetic::monolingual(
        &cfg.lang,
        cfg.mono_records,
        cfg.mono_len,
        seed ^ 0x6d6f6e70,
    )?);
    let pt1 = cfg.stage(Stage::Pt1MonoBase, cfg.pt1_steps, seed, cfg.pretrain_lr);
    state.run_stage(&pt1, &StageData::Mono(mono))?;
    log::info!("pt1 done");
    let pretrained = state.clone();

    let opts = cfg.eval_options();
    let route = Some(cfg.group);
    let sft_steps = {
        let mut sft_cfg = cfg.stage(Stage::Post1Sft, cfg.sft_max_steps, seed + 1, cfg.sft_lr);
        sft_cfg.optimizer.clip_norm = cfg.sft_clip_norm;
        let target = (cfg.sft_target_bleu, &data.dev[..]);
        sft_to_target(cfg, &mut state, &sft_cfg, data.train, target, "sft")?
    };

    let mut scorer_state = pretrained;
    let mut scorer_cfg = cfg.stage(Stage::Post1Sft, cfg.scorer_max_steps, seed + 2, cfg.sft_lr);
    scorer_cfg.optimizer.clip_norm = cfg.sft_clip_norm;
    let target = (cfg.scorer_target_bleu, &data.dev[..]);
    sft_to_target(
        cfg,
        &mut scorer_state,
        &scorer_cfg,
        data.scorer,
        target,
        "scorer",
    )?;
    let scorer = scorer_state.model;
    let scorer_eval = evaluate(&scorer, route, &data.test, None, &opts)?;
    log::info!("scorer test bleu {:.4}", scorer_eval.mean.lexical_bleu);

    let sft_eval = evaluate(
        &state.model,
        route,
        &data.test,
        Some((&scorer, route)),
        &opts,
    )?;
    let popts = PreferenceOptions {
        decode: match cfg.temperature {
            Some(temperature) => DecodeMode::Temperature { temperature, seed },
            None => DecodeMode::Greedy,
        },
        max_len: cfg.text_len + 2,
        ..PreferenceOptions::default()
    };
    let prefs = build_preference(&data.pool, &state.model, None, &popts, seed)?;
    if prefs.records.is_empty() {
        return Err(Error::Data(
            "the SFT model reproduced every pool reference; no preference triples".into(),
        ));
    }
    log::info!("{} preference triples", prefs.records.len());
    let pref_data = StageData::Preference(prefs.records.clone());

    let mut methods = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let mut s = state.clone();
        let mut pc = cfg.stage(
            Stage::Post2Preference,
            cfg.pref_steps,
            seed + 3,
            cfg.pref_lr,
        );
        pc.loss = Some(LossConfig::new(method));
        let rep = s.run_stage(&pc, &pref_data)?;
        let eval = evaluate(&s.model, route, &data.test, Some((&scorer, route)), &opts)?;
        let track: Vec<f64> = s
            .log
            .iter()
            .filter(|r| r.stage == Stage::Post2Preference)
            .filter_map(|r| r.chosen_avg_logprob)
            .collect();
        let report = over_rejection_report(&sft_eval, &eval, &track)?;
        log::info!("{}: test bleu {:.4}", method.name(), eval.mean.lexical_bleu);
        methods.push(MethodOutcome {
            method,
            eval,
            report,
            final_loss: rep.last_loss,
            checkpoint: s.to_container().to_bytes(),
        });
    }

    Ok(Comparison {
        config: cfg.clone(),
        sft_steps,
        sft: sft_eval,
        scorer: scorer_eval,
        preference_pairs: prefs.records.len(),
        dropped_pairs: prefs.dropped,
        sft_checkpoint: state.to_container().to_bytes(),
        methods,
    })
}
