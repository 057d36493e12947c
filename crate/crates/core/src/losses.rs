//! Supervised and preference objectives.
//!
//! Every preference loss is built from graph nodes for `log π(y_w|x)` and
//! `log π(y_l|x)`, so the same code serves scalar evaluation, model-backed
//! scoring and training.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{stable_log_sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::groups::GroupId;
use crate::model::{Bound, PolicyModel, Scope};
use crate::prompt;
use crate::vocab::TokenId;

/// Guard on `η·z` before exponentiation; τ saturates long before this.
pub const ETA_Z_CAP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sft,
    Dpo,
    Cpo,
    Arpo,
    Simpo,
    Kto,
    Orpo,
}

impl Method {
    pub const PREFERENCE: [Method; 6] = [
        Method::Dpo,
        Method::Cpo,
        Method::Arpo,
        Method::Simpo,
        Method::Kto,
        Method::Orpo,
    ];

    pub fn needs_reference(self) -> bool {
        matches!(self, Method::Dpo | Method::Kto)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Dpo => "dpo",
            Method::Cpo => "cpo",
            Method::Arpo => "arpo",
            Method::Simpo => "simpo",
            Method::Kto => "kto",
            Method::Orpo => "orpo",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Sft]
            .into_iter()
            .chain(Method::PREFERENCE)
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown loss method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauGrad {
    #[default]
    Detached,
    Through,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    #[default]
    Reference,
    Postedit,
}

/// A source with a preferred and a dis-preferred translation. Targets are
/// plain text; EOS is appended when scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub src_lang: String,
    pub tgt_lang: String,
    pub x: String,
    pub y_w: String,
    pub y_l: String,
    #[serde(default)]
    pub origin: Origin,
}

impl PreferenceTriple {
    pub fn validate(&self) -> Result<()> {
        if self.y_w.is_empty() || self.y_l.is_empty() {
            return Err(Error::Validation(
                "preference responses must be non-empty".into(),
            ));
        }
        if self.y_w == self.y_l {
            return Err(Error::Validation(
                "preferred and dis-preferred responses are identical".into(),
            ));
        }
        Ok(())
    }

    pub fn prompt(&self) -> String {
        prompt::render(&self.src_lang, &self.tgt_lang, &self.x)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub method: Method,
    pub beta: f64,
    pub eta: f64,
    /// Adds `−log π(y_w|x)` to the baselines; CPO and ARPO always include it.
    pub bc: bool,
    pub tau_grad: TauGrad,
    /// SimPO target margin.
    pub gamma: f64,
    /// ORPO odds-ratio weight.
    pub lambda: f64,
    /// Frozen reference policy for DPO and KTO.
    #[serde(skip)]
    pub reference: Option<Arc<PolicyModel>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            method: Method::Arpo,
            beta: 0.1,
            eta: 1.5,
            bc: false,
            tau_grad: TauGrad::Detached,
            gamma: 0.0,
            lambda: 1.0,
            reference: None,
        }
    }
}

impl LossConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !self.gamma.is_finite() || !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("gamma must be finite and lambda >= 0".into()));
        }
        Ok(())
    }

    pub fn with_reference(mut self, reference: PolicyModel) -> Self {
        self.reference = Some(Arc::new(reference));
        self
    }
}

/// `β·(log π − log π_ref)`.
pub fn dpo_reward(config: &LossConfig, logp_policy: f64, logp_ref: f64) -> Result<f64> {
    config.validate()?;
    Ok(config.beta * (logp_policy - logp_ref))
}

/// Default link `f(t) = −log σ(t)`.
pub fn neg_log_sigmoid(t: f64) -> f64 {
    -stable_log_sigmoid(t)
}

/// `f(r_w − r_l)`.
pub fn preference_frame(f: impl Fn(f64) -> f64, r_w: f64, r_l: f64) -> f64 {
    f(r_w - r_l)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tau {
    pub tau: f64,
    pub z: f64,
}

/// Adaptive rejection weight from average log-likelihoods.
pub fn arpo_tau(
    config: &LossConfig,
    logp_w: f64,
    len_w: usize,
    logp_l: f64,
    len_l: usize,
) -> Result<Tau> {
    if len_w == 0 || len_l == 0 {
        return Err(Error::Contract("response lengths must be >= 1".into()));
    }
    config.validate()?;
    let z = (logp_w / len_w as f64 - logp_l / len_l as f64).abs();
    let tau = ((config.eta * z).min(ETA_Z_CAP).exp() - 1.0).min(1.0);
    Ok(Tau { tau, z })
}

/// Graph handles for one scored pair.
#[derive(Debug, Clone, Copy)]
pub struct PairScores {
    pub w: Var,
    pub w_len: usize,
    pub l: Var,
    pub l_len: usize,
    /// Reference log-probabilities `(y_w, y_l)`, required by DPO and KTO.
    pub reference: Option<(f64, f64)>,
}

/// Per-pair loss nodes.
#[derive(Debug, Clone, Copy)]
pub struct PartVars {
    pub loss: Var,
    pub pref: Var,
    pub bc: Option<Var>,
    pub tau: Option<Var>,
    pub z: Option<Var>,
}

/// Evaluated loss components of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Parts {
    pub loss: f64,
    pub pref: f64,
    pub bc: f64,
    pub tau: Option<f64>,
    pub z: Option<f64>,
}

impl PartVars {
    pub fn eval(&self, g: &Graph) -> Parts {
        Parts {
            loss: g.item(self.loss),
            pref: g.item(self.pref),
            bc: self.bc.map_or(0.0, |v| g.item(v)),
            tau: self.tau.map(|v| g.item(v)),
            z: self.z.map(|v| g.item(v)),
        }
    }
}

/// Plain-number inputs for evaluating a pair without a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairInputs {
    pub logp_w: f64,
    pub len_w: usize,
    pub logp_l: f64,
    pub len_l: usize,
    pub reference: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
enum TauMode<'a> {
    Adaptive,
    Fixed(&'a [f64]),
}

fn tau_node(g: &mut Graph, config: &LossConfig, p: &PairScores) -> Result<(Var, Var)> {
    let (w, l) = match config.tau_grad {
        TauGrad::Detached => (g.detach(p.w)?, g.detach(p.l)?),
        TauGrad::Through => (p.w, p.l),
    };
    let avg_w = g.scale(w, 1.0 / p.w_len as f64)?;
    let avg_l = g.scale(l, 1.0 / p.l_len as f64)?;
    let diff = g.sub(avg_w, avg_l)?;
    let z = g.abs(diff)?;
    let ez = g.scale(z, config.eta)?;
    let ez = g.clamp_max(ez, ETA_Z_CAP)?;
    let e = g.exp(ez)?;
    let t = g.add_scalar(e, -1.0)?;
    Ok((g.clamp_max(t, 1.0)?, z))
}

/// `−log σ(β·logπ_w − τ·β·logπ_l)`.
fn rejection_term(g: &mut Graph, beta: f64, w: Var, l: Var, tau: Var) -> Result<Var> {
    let bw = g.scale(w, beta)?;
    let bl = g.scale(l, beta)?;
    let tbl = g.mul(bl, tau)?;
    let margin = g.sub(bw, tbl)?;
    let ls = g.log_sigmoid(margin)?;
    g.neg(ls)
}

/// `log(p / (1 − p))` with `p = exp(avg)`.
fn log_odds(g: &mut Graph, total: Var, len: usize) -> Result<Var> {
    let avg = g.scale(total, 1.0 / len as f64)?;
    // keeps 1 − p strictly positive
    let avg = g.clamp_max(avg, -1e-9)?;
    let p = g.exp(avg)?;
    let neg_p = g.neg(p)?;
    let one_minus = g.add_scalar(neg_p, 1.0)?;
    let log_one_minus = g.log(one_minus)?;
    g.sub(avg, log_one_minus)
}

fn reference_of(config: &LossConfig, p: &PairScores) -> Result<(f64, f64)> {
    p.reference.ok_or_else(|| {
        Error::Config(format!(
            "{} requires a reference model",
            config.method.name()
        ))
    })
}

fn pair_losses_with(
    g: &mut Graph,
    config: &LossConfig,
    pairs: &[PairScores],
    mode: TauMode<'_>,
) -> Result<Vec<PartVars>> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Contract("empty preference batch".into()));
    }
    let beta = config.beta;
    // KTO reference point: detached batch mean of the pair log-ratios, floored at 0
    let kto_z0 = if config.method == Method::Kto {
        let mut acc = 0.0;
        for p in pairs {
            let (rw, rl) = reference_of(config, p)?;
            acc += ((g.item(p.w) - rw) + (g.item(p.l) - rl)) / 2.0;
        }
        (acc / pairs.len() as f64).max(0.0)
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(pairs.len());
    for (k, p) in pairs.iter().enumerate() {
        if p.w_len == 0 || p.l_len == 0 {
            return Err(Error::Contract("response lengths must be >= 1".into()));
        }
        let (mut tau, mut z) = (None, None);
        let (pref, builtin_bc) = match config.method {
            Method::Sft => return Err(Error::Contract("sft is not a preference objective".into())),
            Method::Cpo | Method::Arpo => {
                let t = match (config.method, mode) {
                    (_, TauMode::Fixed(v)) => g.scalar(v[k]),
                    (Method::Cpo, TauMode::Adaptive) => g.scalar(1.0),
                    (_, TauMode::Adaptive) => {
                        let (t, zz) = tau_node(g, config, p)?;
                        z = Some(zz);
                        t
                    }
                };
                tau = Some(t);
                (rejection_term(g, beta, p.w, p.l, t)?, true)
            }
            Method::Dpo => {
                let (rw, rl) = reference_of(config, p)?;
                let diff = g.sub(p.w, p.l)?;
                let margin = g.add_scalar(diff, -(rw - rl))?;
                let margin = g.scale(margin, beta)?;
                let ls = g.log_sigmoid(margin)?;
                (g.neg(ls)?, false)
            }
            Method::Simpo => {
                let aw = g.scale(p.w, beta / p.w_len as f64)?;
                let al = g.scale(p.l, beta / p.l_len as f64)?;
                let diff = g.sub(aw, al)?;
                let margin = g.add_scalar(diff, -config.gamma)?;
                let ls = g.log_sigmoid(margin)?;
                (g.neg(ls)?, false)
            }
            Method::Kto => {
                let (rw, rl) = reference_of(config, p)?;
                let uw = g.add_scalar(p.w, -rw - kto_z0)?;
                let uw = g.scale(uw, beta)?;
                let sw = g.sigmoid(uw)?;
                let ul = g.add_scalar(p.l, -rl - kto_z0)?;
                let ul = g.scale(ul, -beta)?;
                let sl = g.sigmoid(ul)?;
                let s = g.add(sw, sl)?;
                let s = g.neg(s)?;
                (g.add_scalar(s, 2.0)?, false)
            }
            Method::Orpo => {
                let ow = log_odds(g, p.w, p.w_len)?;
                let ol = log_odds(g, p.l, p.l_len)?;
                let diff = g.sub(ow, ol)?;
                let ls = g.log_sigmoid(diff)?;
                let or = g.scale(ls, -config.lambda)?;
                let nll = g.neg(p.w)?;
                (g.add(nll, or)?, false)
            }
        };
        let bc = if builtin_bc || config.bc {
            Some(g.neg(p.w)?)
        } else {
            None
        };
        let loss = match bc {
            Some(b) => g.add(pref, b)?,
            None => pref,
        };
        out.push(PartVars {
            loss,
            pref,
            bc,
            tau,
            z,
        });
    }
    Ok(out)
}

/// Per-pair losses for the configured method.
pub fn pair_losses(
    g: &mut Graph,
    config: &LossConfig,
    pairs: &[PairScores],
) -> Result<Vec<PartVars>> {
    pair_losses_with(g, config, pairs, TauMode::Adaptive)
}

/// ARPO-frame losses with one fixed τ per pair; 1 recovers CPO, 0 drops the
/// rejection term.
pub fn fixed_tau_losses(
    g: &mut Graph,
    config: &LossConfig,
    pairs: &[PairScores],
    taus: &[f64],
) -> Result<Vec<PartVars>> {
    if !matches!(config.method, Method::Arpo | Method::Cpo) {
        return Err(Error::Contract(
            "a fixed tau applies to cpo/arpo only".into(),
        ));
    }
    if taus.len() != pairs.len() {
        return Err(Error::Contract(format!(
            "{} taus for {} pairs",
            taus.len(),
            pairs.len()
        )));
    }
    pair_losses_with(g, config, pairs, TauMode::Fixed(taus))
}

/// Mean of the per-pair losses.
pub fn batch_mean(g: &mut Graph, parts: &[PartVars]) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::Contract("empty preference batch".into()));
    }
    let terms: Vec<Var> = parts.iter().map(|p| p.loss).collect();
    let total = g.add_all(&terms)?;
    g.scale(total, 1.0 / parts.len() as f64)
}

/// Evaluates losses from plain log-probabilities.
pub fn evaluate(config: &LossConfig, inputs: &[PairInputs]) -> Result<Vec<Parts>> {
    let mut g = Graph::new();
    let pairs: Vec<PairScores> = inputs
        .iter()
        .map(|i| PairScores {
            w: g.scalar(i.logp_w),
            w_len: i.len_w,
            l: g.scalar(i.logp_l),
            l_len: i.len_l,
            reference: i.reference,
        })
        .collect();
    let parts = pair_losses(&mut g, config, &pairs)?;
    Ok(parts.iter().map(|p| p.eval(&g)).collect())
}

/// Encoded prompt and targets of a triple.
#[derive(Debug, Clone)]
pub struct EncodedTriple {
    pub prompt: Vec<TokenId>,
    pub y_w: Vec<TokenId>,
    pub y_l: Vec<TokenId>,
}

pub fn encode_triple(model: &PolicyModel, t: &PreferenceTriple) -> Result<EncodedTriple> {
    t.validate()?;
    let v = model.vocab();
    Ok(EncodedTriple {
        prompt: v.encode(&t.prompt())?,
        y_w: v.encode_target(&t.y_w)?,
        y_l: v.encode_target(&t.y_l)?,
    })
}

/// `(log π_ref(y_w|x), log π_ref(y_l|x))` under the configured reference.
pub fn reference_logprobs(
    config: &LossConfig,
    t: &EncodedTriple,
    route: Option<GroupId>,
) -> Result<(f64, f64)> {
    let reference = config.reference.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "{} requires a reference model",
            config.method.name()
        ))
    })?;
    let mut g = Graph::new();
    let mut b = reference.bind(&mut g, Scope::None)?;
    let w = reference.score_ids(&mut g, &mut b, route, &t.prompt, &t.y_w)?;
    let l = reference.score_ids(&mut g, &mut b, route, &t.prompt, &t.y_l)?;
    Ok((g.item(w.total), g.item(l.total)))
}

/// Scores a triple under a bound model. `reference` overrides the
/// configured reference model (used with cached values).
pub fn score_pair(
    g: &mut Graph,
    bound: &mut Bound,
    model: &PolicyModel,
    config: &LossConfig,
    route: Option<GroupId>,
    t: &EncodedTriple,
    reference: Option<(f64, f64)>,
) -> Result<PairScores> {
    let w = model.score_ids(g, bound, route, &t.prompt, &t.y_w)?;
    let l = model.score_ids(g, bound, route, &t.prompt, &t.y_l)?;
    let reference = match reference {
        Some(r) => Some(r),
        None if config.method.needs_reference() => Some(reference_logprobs(config, t, route)?),
        None => None,
    };
    Ok(PairScores {
        w: w.total,
        w_len: w.len,
        l: l.total,
        l_len: l.len,
        reference,
    })
}

fn model_loss(
    config: &LossConfig,
    model: &PolicyModel,
    triple: &PreferenceTriple,
    route: Option<GroupId>,
) -> Result<Parts> {
    let enc = encode_triple(model, triple)?;
    let mut g = Graph::new();
    let mut b = model.bind(&mut g, Scope::None)?;
    let p = score_pair(&mut g, &mut b, model, config, route, &enc, None)?;
    let parts = pair_losses(&mut g, config, &[p])?;
    Ok(parts[0].eval(&g))
}

pub fn cpo_loss(
    config: &LossConfig,
    model: &PolicyModel,
    triple: &PreferenceTriple,
    route: Option<GroupId>,
) -> Result<Parts> {
    if config.method != Method::Cpo {
        return Err(Error::Contract("cpo_loss needs method = cpo".into()));
    }
    model_loss(config, model, triple, route)
}

pub fn arpo_loss(
    config: &LossConfig,
    model: &PolicyModel,
    triple: &PreferenceTriple,
    route: Option<GroupId>,
) -> Result<Parts> {
    if config.method != Method::Arpo {
        return Err(Error::Contract("arpo_loss needs method = arpo".into()));
    }
    model_loss(config, model, triple, route)
}

pub fn baseline_loss(
    config: &LossConfig,
    model: &PolicyModel,
    triple: &PreferenceTriple,
    route: Option<GroupId>,
) -> Result<f64> {
    if !matches!(
        config.method,
        Method::Dpo | Method::Simpo | Method::Kto | Method::Orpo
    ) {
        return Err(Error::Contract(format!(
            "{} is not a baseline",
            config.method.name()
        )));
    }
    Ok(model_loss(config, model, triple, route)?.loss)
}

/// `−mean_b log π(target_b | prompt_b)` as a graph node.
pub fn sft_nll_in(
    g: &mut Graph,
    bound: &mut Bound,
    model: &PolicyModel,
    route: Option<GroupId>,
    batch: &[(Vec<TokenId>, Vec<TokenId>)],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty sft batch".into()));
    }
    let mut totals = Vec::with_capacity(batch.len());
    for (p, y) in batch {
        totals.push(model.score_ids(g, bound, route, p, y)?.total);
    }
    let s = g.add_all(&totals)?;
    g.scale(s, -1.0 / batch.len() as f64)
}

/// Supervised loss over `(prompt, target)` text pairs.
pub fn sft_nll(
    model: &PolicyModel,
    batch: &[(String, String)],
    route: Option<GroupId>,
) -> Result<f64> {
    let v = model.vocab();
    let enc = batch
        .iter()
        .map(|(p, y)| Ok((v.encode(p)?, v.encode_target(y)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let mut b = model.bind(&mut g, Scope::None)?;
    let l = sft_nll_in(&mut g, &mut b, model, route, &enc)?;
    Ok(g.item(l))
}

/// `|r(y_w) − r(y_l)|` per triple, with rewards measured against `reference`.
/// `route_ref` routes the reference model.
pub fn reward_differences(
    config: &LossConfig,
    policy: &PolicyModel,
    route: Option<GroupId>,
    reference: &PolicyModel,
    route_ref: Option<GroupId>,
    triples: &[PreferenceTriple],
) -> Result<Vec<f64>> {
    triples
        .iter()
        .map(|t| {
            let enc = encode_triple(policy, t)?;
            let lp = |m: &PolicyModel, r: Option<GroupId>, y: &[TokenId]| -> Result<f64> {
                let mut g = Graph::new();
                let mut b = m.bind(&mut g, Scope::None)?;
                let s = m.score_ids(&mut g, &mut b, r, &enc.prompt, y)?;
                Ok(g.item(s.total))
            };
            let r_w = dpo_reward(
                config,
                lp(policy, route, &enc.y_w)?,
                lp(reference, route_ref, &enc.y_w)?,
            )?;
            let r_l = dpo_reward(
                config,
                lp(policy, route, &enc.y_l)?,
                lp(reference, route_ref, &enc.y_l)?,
            )?;
            Ok((r_w - r_l).abs())
        })
        .collect()
}

/// Empirical CDF: ascending values with cumulative probability `(k+1)/N`.
pub fn reward_diff_cdf(diffs: &[f64]) -> Result<Vec<(f64, f64)>> {
    if diffs.is_empty() {
        return Err(Error::Contract(
            "reward_diff_cdf needs at least one value".into(),
        ));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Contract("reward differences must be finite".into()));
    }
    let mut sorted = diffs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(k, v)| (v, (k + 1) as f64 / n))
        .collect())
}

/// Value at cumulative probability `q` of an empirical CDF.
pub fn cdf_quantile(cdf: &[(f64, f64)], q: f64) -> f64 {
    cdf.iter()
        .find(|(_, p)| *p >= q)
        .or(cdf.last())
        .map_or(f64::NAN, |(v, _)| *v)
}
