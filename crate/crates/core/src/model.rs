//! Tiny decoder-only language model.
//!
//! Single-head causal attention and a tanh MLP per block, residual
//! connections without normalization, learned absolute positions and a
//! zero-initialized output head (so a fresh model predicts the uniform
//! distribution). Linear weights are stored input-major (`[in, out]`) and
//! applied as `x · W`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::Adapter;
use crate::autodiff::{Graph, Tensor, Var};
use crate::ckpt::Container;
use crate::error::{Error, Result};
use crate::groups::GroupId;
use crate::vocab::{TokenId, Vocab, BOS, EOS, PAD};

/// Linear layers of each block, in canonical order.
pub const LINEARS: [&str; 6] = ["wq", "wk", "wv", "wo", "w1", "w2"];

const EMBED_STD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_blocks: usize,
    /// Position-table size `P`; bounds `|prompt| + |target|`.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_hidden: 64,
            n_blocks: 2,
            max_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_hidden == 0 || self.n_blocks == 0 || self.max_len == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }

    /// Names of every adapter injection point.
    pub fn injection_points(&self) -> Vec<String> {
        (0..self.n_blocks)
            .flat_map(|b| LINEARS.iter().map(move |l| format!("blocks.{b}.{l}")))
            .collect()
    }

    /// `(in, out)` of an injection point.
    pub fn linear_shape(&self, name: &str) -> Option<(usize, usize)> {
        let rest = name.strip_prefix("blocks.")?;
        let (block, lin) = rest.split_once('.')?;
        if block.parse::<usize>().ok()? >= self.n_blocks {
            return None;
        }
        let (d, h) = (self.d_model, self.d_hidden);
        match lin {
            "wq" | "wk" | "wv" | "wo" => Some((d, d)),
            "w1" => Some((d, h)),
            "w2" => Some((h, d)),
            _ => None,
        }
    }

    /// Closed-form base parameter count for a vocabulary of `v` symbols.
    pub fn base_param_count(&self, v: usize) -> usize {
        let (d, h) = (self.d_model, self.d_hidden);
        v * d + self.max_len * d + self.n_blocks * (4 * d * d + 2 * d * h) + d * v
    }
}

/// Which tensors a graph binding differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Nothing trainable (scoring and generation).
    None,
    Base,
    Adapter(GroupId),
}

/// Log-likelihood of a target continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqLogProb {
    pub total: f64,
    pub per_token: Vec<f64>,
    /// `total / |target|`, EOS included in the count.
    pub avg: f64,
}

/// Graph nodes for one scored sequence.
#[derive(Debug, Clone, Copy)]
pub struct SeqVars {
    pub total: Var,
    pub per_token: Var,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

/// Model parameters bound into a particular [`Graph`].
#[derive(Debug)]
pub struct Bound {
    base: Vec<Var>,
    adapters: BTreeMap<GroupId, BTreeMap<String, (Var, Var)>>,
    effective: BTreeMap<Option<GroupId>, Vec<Var>>,
    /// The trainable leaves, in [`PolicyModel::trainable`] order.
    pub trainable: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    config: ModelConfig,
    vocab: Vocab,
    /// Base tensors in canonical order: embed, pos, block linears, head.
    params: Vec<(String, Tensor)>,
    adapters: BTreeMap<GroupId, Adapter>,
    frozen: bool,
}

fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape product")
}

impl PolicyModel {
    pub fn new(vocab: Vocab, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d) = (vocab.len(), config.d_model);
        let mut params = vec![
            ("embed".to_string(), gaussian(&[v, d], EMBED_STD, &mut rng)),
            (
                "pos".to_string(),
                gaussian(&[config.max_len, d], EMBED_STD, &mut rng),
            ),
        ];
        for name in config.injection_points() {
            let (i, o) = config.linear_shape(&name).expect("injection point");
            params.push((name, gaussian(&[i, o], 1.0 / (i as f64).sqrt(), &mut rng)));
        }
        params.push(("head".to_string(), Tensor::zeros(&[d, v])));
        Ok(Self {
            config,
            vocab,
            params,
            adapters: BTreeMap::new(),
            frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn base_params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Replaces a base tensor, keeping its shape.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Config(format!("no tensor named {name:?}")))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::shape(
                "set_tensor",
                format!("{name}: {:?} vs {:?}", slot.1.shape(), value.shape()),
            ));
        }
        slot.1 = value;
        Ok(())
    }

    pub fn adapters(&self) -> &BTreeMap<GroupId, Adapter> {
        &self.adapters
    }

    pub fn adapter(&self, group: GroupId) -> Option<&Adapter> {
        self.adapters.get(&group)
    }

    pub(crate) fn insert_adapter(&mut self, adapter: Adapter) {
        self.adapters.insert(adapter.group_id, adapter);
    }

    pub(crate) fn remove_adapter(&mut self, group: GroupId) -> Option<Adapter> {
        self.adapters.remove(&group)
    }

    /// Drops every attached adapter, returning a plain base model.
    pub fn without_adapters(&self) -> Self {
        let mut m = self.clone();
        m.adapters.clear();
        m
    }

    /// Exact count of scalar parameters.
    pub fn param_count(&self, include_adapters: bool) -> usize {
        let base: usize = self.params.iter().map(|(_, t)| t.numel()).sum();
        if include_adapters {
            base + self
                .adapters
                .values()
                .map(Adapter::param_count)
                .sum::<usize>()
        } else {
            base
        }
    }

    /// SHA-256 over names, shapes and bytes of every base tensor.
    pub fn base_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Names of the tensors a scope trains, in binding order.
    pub fn trainable(&self, scope: Scope) -> Result<Vec<String>> {
        match scope {
            Scope::None => Ok(Vec::new()),
            Scope::Base => {
                if self.frozen {
                    return Err(Error::Contract("base model is frozen".into()));
                }
                Ok(self.params.iter().map(|(n, _)| n.clone()).collect())
            }
            Scope::Adapter(g) => {
                let a = self.adapters.get(&g).ok_or_else(|| {
                    Error::State(format!("adapter for group {g} is not attached"))
                })?;
                Ok(a.tensor_names())
            }
        }
    }

    /// Current values of the tensors a scope trains.
    pub fn trainable_tensors(&self, scope: Scope) -> Result<Vec<Tensor>> {
        self.trainable(scope)?
            .iter()
            .map(|n| self.lookup(n).cloned())
            .collect()
    }

    /// Any tensor by its full name (`embed`, `blocks.0.wq`, `adapter.6.blocks.0.wq.A`, ...).
    pub fn lookup(&self, name: &str) -> Result<&Tensor> {
        if let Some(rest) = name.strip_prefix("adapter.") {
            let (g, local) = rest
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("bad adapter tensor name {name:?}")))?;
            let g: GroupId = g
                .parse()
                .map_err(|_| Error::Config(format!("bad adapter tensor name {name:?}")))?;
            return self
                .adapters
                .get(&g)
                .and_then(|a| a.local_tensor(local))
                .ok_or_else(|| Error::Config(format!("no tensor named {name:?}")));
        }
        self.tensor(name)
            .ok_or_else(|| Error::Config(format!("no tensor named {name:?}")))
    }

    /// Mutable access for optimizer updates. Base tensors of a frozen model
    /// are refused.
    pub fn trainable_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        if let Some(rest) = name.strip_prefix("adapter.") {
            let (g, local) = rest
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("bad adapter tensor name {name:?}")))?;
            let g: GroupId = g
                .parse()
                .map_err(|_| Error::Config(format!("bad adapter tensor name {name:?}")))?;
            return self
                .adapters
                .get_mut(&g)
                .and_then(|a| a.local_tensor_mut(local))
                .ok_or_else(|| Error::Config(format!("no tensor named {name:?}")));
        }
        if self.frozen {
            return Err(Error::Contract(format!(
                "attempted to update frozen base tensor {name:?}"
            )));
        }
        self.params
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("no tensor named {name:?}")))
    }

    /// Binds all parameters as leaves; those in `scope` require gradients.
    pub fn bind(&self, g: &mut Graph, scope: Scope) -> Result<Bound> {
        self.bind_inner(g, scope, None)
    }

    /// Like [`bind`](Self::bind) but uses caller-provided leaves for the
    /// trainable tensors (used by gradient checks).
    pub fn bind_with(&self, g: &mut Graph, scope: Scope, trainable: &[Var]) -> Result<Bound> {
        self.bind_inner(g, scope, Some(trainable))
    }

    fn bind_inner(&self, g: &mut Graph, scope: Scope, given: Option<&[Var]>) -> Result<Bound> {
        let names = self.trainable(scope)?;
        if let Some(vars) = given {
            if vars.len() != names.len() {
                return Err(Error::Contract(format!(
                    "expected {} trainable leaves, got {}",
                    names.len(),
                    vars.len()
                )));
            }
        }
        let mut order: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            order.insert(n.as_str(), i);
        }
        let mut trainable = vec![None; names.len()];
        let mut make = |g: &mut Graph, name: &str, t: &Tensor| -> Var {
            match order.get(name) {
                Some(&i) => {
                    let v = match given {
                        Some(vars) => vars[i],
                        None => g.param(t.clone()),
                    };
                    trainable[i] = Some(v);
                    v
                }
                None => g.constant(t.clone()),
            }
        };
        let base = self
            .params
            .iter()
            .map(|(n, t)| make(g, n, t))
            .collect::<Vec<_>>();
        let mut adapters = BTreeMap::new();
        for (&gid, a) in &self.adapters {
            let mut m = BTreeMap::new();
            for (target, lr) in a.targets() {
                let va = make(g, &format!("adapter.{gid}.{target}.A"), &lr.a);
                let vb = make(g, &format!("adapter.{gid}.{target}.B"), &lr.b);
                m.insert(target.clone(), (va, vb));
            }
            adapters.insert(gid, m);
        }
        Ok(Bound {
            base,
            adapters,
            effective: BTreeMap::new(),
            trainable: trainable.into_iter().map(|v| v.expect("bound")).collect(),
        })
    }

    /// Resolves which adapter handles an input. With no adapters attached the
    /// base runs alone; with exactly one, it serves every input; with several,
    /// the caller must name the group.
    pub fn active_group(&self, route: Option<GroupId>) -> Result<Option<GroupId>> {
        match (route, self.adapters.len()) {
            (_, 0) => Ok(None),
            (Some(g), _) => {
                if self.adapters.contains_key(&g) {
                    Ok(Some(g))
                } else {
                    Err(Error::State(format!("no adapter attached for group {g}")))
                }
            }
            (None, 1) => Ok(self.adapters.keys().next().copied()),
            (None, _) => Err(Error::Contract(
                "several modules are loaded; inputs must carry a group id".into(),
            )),
        }
    }

    fn effective_linears(
        &self,
        g: &mut Graph,
        bound: &mut Bound,
        group: Option<GroupId>,
    ) -> Result<Vec<Var>> {
        if let Some(w) = bound.effective.get(&group) {
            return Ok(w.clone());
        }
        let nlin = self.config.n_blocks * LINEARS.len();
        let mut out = Vec::with_capacity(nlin);
        for (k, name) in self.config.injection_points().iter().enumerate() {
            let w = bound.base[2 + k];
            let lr = group.and_then(|gid| {
                let a = &self.adapters[&gid];
                bound.adapters[&gid]
                    .get(name)
                    .map(|&vars| (a.scale(), vars))
            });
            out.push(match lr {
                Some((scale, (va, vb))) => {
                    // delta = scale * B·A is [out, in]; weights are [in, out]
                    let ba = g.matmul(vb, va)?;
                    let delta = g.transpose(ba)?;
                    let delta = g.scale(delta, scale)?;
                    g.add(w, delta)?
                }
                None => w,
            });
        }
        bound.effective.insert(group, out.clone());
        Ok(out)
    }

    /// Forward pass over `input` ids; returns next-token log-probabilities
    /// `[rows.len(), V]` for the requested positions.
    fn forward_rows(
        &self,
        g: &mut Graph,
        bound: &mut Bound,
        group: Option<GroupId>,
        input: &[TokenId],
        rows: &[usize],
    ) -> Result<Var> {
        let t = input.len();
        if t > self.config.max_len {
            return Err(Error::Capacity {
                len: t,
                max: self.config.max_len,
            });
        }
        self.vocab.check_ids(input)?;
        let d = self.config.d_model;
        let linears = self.effective_linears(g, bound, group)?;

        let emb_idx = input
            .iter()
            .flat_map(|&id| (id * d)..(id * d + d))
            .collect();
        let emb = g.gather(bound.base[0], emb_idx)?;
        let emb = g.reshape(emb, vec![t, d])?;
        let pos = g.gather(bound.base[1], (0..t * d).collect())?;
        let pos = g.reshape(pos, vec![t, d])?;
        let mut x = g.add(emb, pos)?;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();

        for block in linears.chunks(LINEARS.len()) {
            let (wq, wk, wv, wo, w1, w2) =
                (block[0], block[1], block[2], block[3], block[4], block[5]);
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, inv_sqrt_d)?;
            let scores = g.causal_mask(scores)?;
            let attn = g.log_softmax(scores, 1)?;
            let attn = g.exp(attn)?;
            let ctx = g.matmul(attn, v)?;
            let o = g.matmul(ctx, wo)?;
            x = g.add(x, o)?;
            let h = g.matmul(x, w1)?;
            let h = g.tanh(h)?;
            let m = g.matmul(h, w2)?;
            x = g.add(x, m)?;
        }

        let sel = rows.iter().flat_map(|&r| (r * d)..(r * d + d)).collect();
        let sel = g.gather(x, sel)?;
        let sel = g.reshape(sel, vec![rows.len(), d])?;
        let head = *bound.base.last().expect("head");
        let logits = g.matmul(sel, head)?;
        g.log_softmax(logits, 1)
    }

    /// Scores `target` after `prompt_ids` inside an existing graph.
    pub fn score_ids(
        &self,
        g: &mut Graph,
        bound: &mut Bound,
        route: Option<GroupId>,
        prompt_ids: &[TokenId],
        target: &[TokenId],
    ) -> Result<SeqVars> {
        if target.is_empty() || *target.last().expect("non-empty") != EOS {
            return Err(Error::Contract(
                "target must be non-empty and EOS-terminated".into(),
            ));
        }
        self.vocab.check_ids(target)?;
        let group = self.active_group(route)?;
        let n = target.len();
        let mut input = Vec::with_capacity(1 + prompt_ids.len() + n - 1);
        input.push(BOS);
        input.extend_from_slice(prompt_ids);
        input.extend_from_slice(&target[..n - 1]);
        let first = prompt_ids.len();
        let rows: Vec<usize> = (first..first + n).collect();
        if input.len() > self.config.max_len {
            return Err(Error::Capacity {
                len: input.len(),
                max: self.config.max_len,
            });
        }
        let lp = self.forward_rows(g, bound, group, &input, &rows)?;
        let v = self.vocab.len();
        let per_token = g.gather(
            lp,
            target.iter().enumerate().map(|(i, &t)| i * v + t).collect(),
        )?;
        let total = g.sum(per_token)?;
        Ok(SeqVars {
            total,
            per_token,
            len: n,
        })
    }

    /// Scores a rendered prompt and a token target inside an existing graph.
    pub fn score_in(
        &self,
        g: &mut Graph,
        bound: &mut Bound,
        route: Option<GroupId>,
        prompt: &str,
        target: &[TokenId],
    ) -> Result<SeqVars> {
        let prompt_ids = self.vocab.encode(prompt)?;
        self.score_ids(g, bound, route, &prompt_ids, target)
    }

    /// `log π(target | prompt)` with per-token breakdown.
    pub fn sequence_logprob(
        &self,
        prompt: &str,
        target: &[TokenId],
        route: Option<GroupId>,
    ) -> Result<SeqLogProb> {
        let mut g = Graph::new();
        let mut bound = self.bind(&mut g, Scope::None)?;
        let sv = self.score_in(&mut g, &mut bound, route, prompt, target)?;
        let total = g.item(sv.total);
        Ok(SeqLogProb {
            total,
            per_token: g.value(sv.per_token).data().to_vec(),
            avg: total / sv.len as f64,
        })
    }

    /// Next-token log-probabilities after `BOS + context`.
    pub fn next_token_logprobs(
        &self,
        context: &[TokenId],
        route: Option<GroupId>,
    ) -> Result<Vec<f64>> {
        let group = self.active_group(route)?;
        let mut g = Graph::new();
        let mut bound = self.bind(&mut g, Scope::None)?;
        let mut input = Vec::with_capacity(context.len() + 1);
        input.push(BOS);
        input.extend_from_slice(context);
        let lp = self.forward_rows(&mut g, &mut bound, group, &input, &[input.len() - 1])?;
        Ok(g.value(lp).data().to_vec())
    }

    /// Decodes a continuation of `prompt`. The result excludes the prompt and
    /// the terminating EOS; decoding stops at EOS, after `max_len` tokens or
    /// when the position table is full. PAD and BOS are never produced.
    pub fn generate(
        &self,
        prompt: &str,
        mode: DecodeMode,
        max_len: usize,
        route: Option<GroupId>,
    ) -> Result<Vec<TokenId>> {
        if max_len == 0 {
            return Err(Error::Contract("max_len must be at least 1".into()));
        }
        let mut rng = match mode {
            DecodeMode::Temperature { temperature, seed } => {
                if !(temperature > 0.0) {
                    return Err(Error::Contract(format!(
                        "temperature must be > 0, got {temperature}"
                    )));
                }
                Some(ChaCha8Rng::seed_from_u64(seed))
            }
            DecodeMode::Greedy => None,
        };
        let mut context = self.vocab.encode(prompt)?;
        let start = context.len();
        // BOS + prompt must leave room for at least one step
        if start + 1 > self.config.max_len {
            return Err(Error::Capacity {
                len: start + 1,
                max: self.config.max_len,
            });
        }
        let steps = max_len.min(self.config.max_len - start);
        for _ in 0..steps {
            let mut lp = self.next_token_logprobs(&context, route)?;
            // never emit padding or a second BOS
            lp[PAD] = f64::NEG_INFINITY;
            lp[BOS] = f64::NEG_INFINITY;
            let next = match (mode, rng.as_mut()) {
                (DecodeMode::Temperature { temperature, .. }, Some(rng)) => {
                    let max = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = lp.iter().map(|l| ((l - max) / temperature).exp()).collect();
                    let total: f64 = w.iter().sum();
                    let mut u = rng.random::<f64>() * total;
                    let mut pick = w.len() - 1;
                    for (i, wi) in w.iter().enumerate() {
                        if u < *wi {
                            pick = i;
                            break;
                        }
                        u -= wi;
                    }
                    pick
                }
                _ => argmax(&lp),
            };
            if next == EOS {
                break;
            }
            context.push(next);
        }
        Ok(context.split_off(start))
    }

    pub(crate) fn write_into(&self, c: &mut Container) {
        c.set("model.d_model", self.config.d_model);
        c.set("model.d_hidden", self.config.d_hidden);
        c.set("model.n_blocks", self.config.n_blocks);
        c.set("model.max_len", self.config.max_len);
        c.set("model.vocab", hex::encode(self.vocab.symbols().as_bytes()));
        c.set("model.frozen", self.frozen);
        for (n, t) in &self.params {
            c.tensors.push((format!("model.{n}"), t.clone()));
        }
        c.set(
            "model.adapters",
            self.adapters
                .keys()
                .map(|g| g.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        for a in self.adapters.values() {
            a.write_into(c, &format!("adapter.{}.", a.group_id));
        }
    }

    pub(crate) fn read_from(c: &Container) -> Result<Self> {
        let config = ModelConfig {
            d_model: c.parse("model.d_model")?,
            d_hidden: c.parse("model.d_hidden")?,
            n_blocks: c.parse("model.n_blocks")?,
            max_len: c.parse("model.max_len")?,
        };
        let symbols = hex::decode(c.get("model.vocab")?)
            .ok()
            .and_then(|b| String::from_utf8(b).ok())
            .ok_or_else(|| Error::Integrity("bad vocabulary field".into()))?;
        let vocab = Vocab::new(&symbols)?;
        let mut model = PolicyModel::new(vocab, config, 0)?;
        for (name, slot) in model.params.iter_mut() {
            let t = c.tensor(&format!("model.{name}"))?;
            if t.shape() != slot.shape() {
                return Err(Error::Integrity(format!(
                    "tensor {name} has shape {:?}",
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        model.frozen = c.parse("model.frozen")?;
        let groups = c.get("model.adapters")?;
        for g in groups.split(',').filter(|s| !s.is_empty()) {
            let a = Adapter::read_from(c, &format!("adapter.{g}."), &model.config)?;
            model.adapters.insert(a.group_id, a);
        }
        Ok(model)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.set("kind", "model");
        self.write_into(&mut c);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        Self::read_from(c)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
