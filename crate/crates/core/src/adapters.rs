//! Language-specific low-rank adapters with hard-gated routing.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::ckpt::Container;
use crate::error::{Error, Result};
use crate::groups::GroupId;
use crate::model::{ModelConfig, PolicyModel};

pub use crate::groups::{Direction, GroupMap};

pub const INIT_STD: f64 = 0.02;

/// Parameter-budget window for an adapter relative to the base model.
pub const BUDGET_RATIO: (f64, f64) = (0.13, 0.17);

/// Factors of one targeted layer: `A: [r, in]`, `B: [out, r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub group_id: GroupId,
    pub rank: usize,
    pub alpha: f64,
    targets: BTreeMap<String, LowRank>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "group")]
pub enum LoadingStrategy {
    SingleModule(GroupId),
    MergedModel(GroupId),
    AllModules,
}

impl Adapter {
    /// Fresh adapter: `A ~ N(0, 0.02)`, `B = 0`. `alpha` defaults to `2r`.
    pub fn init(
        config: &ModelConfig,
        group_id: GroupId,
        targets: &[String],
        rank: usize,
        alpha: Option<f64>,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if targets.is_empty() {
            return Err(Error::Config("adapter needs at least one target".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, INIT_STD).expect("positive std");
        let mut map = BTreeMap::new();
        let mut sorted = targets.to_vec();
        sorted.sort();
        sorted.dedup();
        for name in sorted {
            let (i, o) = config
                .linear_shape(&name)
                .ok_or_else(|| Error::Config(format!("unknown injection point {name:?}")))?;
            let a = Tensor::new(
                vec![rank, i],
                (0..rank * i).map(|_| dist.sample(&mut rng)).collect(),
            )?;
            let b = Tensor::zeros(&[o, rank]);
            map.insert(name, LowRank { a, b });
        }
        Ok(Self {
            group_id,
            rank,
            alpha: alpha.unwrap_or(2.0 * rank as f64),
            targets: map,
        })
    }

    /// Builds an adapter from explicit factors.
    pub fn from_factors(
        group_id: GroupId,
        alpha: f64,
        targets: BTreeMap<String, LowRank>,
    ) -> Result<Self> {
        let rank = targets
            .values()
            .next()
            .map(|lr| lr.a.shape()[0])
            .ok_or_else(|| Error::Config("adapter needs at least one target".into()))?;
        for (name, lr) in &targets {
            let (sa, sb) = (lr.a.shape(), lr.b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[0] != rank || sb[1] != rank {
                return Err(Error::Config(format!(
                    "{name}: factor shapes {sa:?} / {sb:?} disagree on rank {rank}"
                )));
            }
        }
        Ok(Self {
            group_id,
            rank,
            alpha,
            targets,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn targets(&self) -> &BTreeMap<String, LowRank> {
        &self.targets
    }

    /// `Σ r·(in + out)` over targets.
    pub fn param_count(&self) -> usize {
        self.targets
            .values()
            .map(|lr| lr.a.numel() + lr.b.numel())
            .sum()
    }

    /// Full tensor names (`adapter.{g}.{target}.{A|B}`) in binding order.
    pub fn tensor_names(&self) -> Vec<String> {
        self.targets
            .keys()
            .flat_map(|t| {
                [
                    format!("adapter.{}.{t}.A", self.group_id),
                    format!("adapter.{}.{t}.B", self.group_id),
                ]
            })
            .collect()
    }

    pub(crate) fn local_tensor(&self, local: &str) -> Option<&Tensor> {
        let (target, which) = local.rsplit_once('.')?;
        let lr = self.targets.get(target)?;
        match which {
            "A" => Some(&lr.a),
            "B" => Some(&lr.b),
            _ => None,
        }
    }

    pub(crate) fn local_tensor_mut(&mut self, local: &str) -> Option<&mut Tensor> {
        let (target, which) = local.rsplit_once('.')?;
        let lr = self.targets.get_mut(target)?;
        match which {
            "A" => Some(&mut lr.a),
            "B" => Some(&mut lr.b),
            _ => None,
        }
    }

    /// `(α/r)·B·A`, shape `[out, in]`.
    pub fn delta(&self, target: &str) -> Option<Tensor> {
        let lr = self.targets.get(target)?;
        let (r, i) = (lr.a.shape()[0], lr.a.shape()[1]);
        let o = lr.b.shape()[0];
        let s = self.scale();
        let mut out = vec![0.0; o * i];
        for row in 0..o {
            for col in 0..i {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += lr.b.data()[row * r + k] * lr.a.data()[k * i + col];
                }
                out[row * i + col] = s * acc;
            }
        }
        Some(Tensor::new(vec![o, i], out).expect("shape product"))
    }

    pub(crate) fn write_into(&self, c: &mut Container, prefix: &str) {
        c.set(&format!("{prefix}group_id"), self.group_id);
        c.set(&format!("{prefix}rank"), self.rank);
        c.set(&format!("{prefix}alpha"), self.alpha);
        c.set(
            &format!("{prefix}targets"),
            self.targets.keys().cloned().collect::<Vec<_>>().join(","),
        );
        for (t, lr) in &self.targets {
            c.tensors.push((format!("{prefix}{t}.A"), lr.a.clone()));
            c.tensors.push((format!("{prefix}{t}.B"), lr.b.clone()));
        }
    }

    pub(crate) fn read_from(c: &Container, prefix: &str, config: &ModelConfig) -> Result<Self> {
        let group_id = c.parse(&format!("{prefix}group_id"))?;
        let rank: usize = c.parse(&format!("{prefix}rank"))?;
        let alpha = c.parse(&format!("{prefix}alpha"))?;
        let mut targets = BTreeMap::new();
        for t in c
            .get(&format!("{prefix}targets"))?
            .split(',')
            .filter(|s| !s.is_empty())
        {
            let (i, o) = config
                .linear_shape(t)
                .ok_or_else(|| Error::Config(format!("unknown injection point {t:?}")))?;
            let a = c.tensor(&format!("{prefix}{t}.A"))?.clone();
            let b = c.tensor(&format!("{prefix}{t}.B"))?.clone();
            if a.shape() != [rank, i] || b.shape() != [o, rank] {
                return Err(Error::Config(format!(
                    "adapter target {t} has mismatched shapes"
                )));
            }
            targets.insert(t.to_string(), LowRank { a, b });
        }
        Ok(Self {
            group_id,
            rank,
            alpha,
            targets,
        })
    }

    pub fn to_container(&self, config: &ModelConfig) -> Container {
        let mut c = Container::default();
        c.set("kind", "adapter");
        c.set("model.d_model", config.d_model);
        c.set("model.d_hidden", config.d_hidden);
        c.set("model.n_blocks", config.n_blocks);
        c.set("model.max_len", config.max_len);
        self.write_into(&mut c, "");
        c
    }

    pub fn from_container(c: &Container, config: &ModelConfig) -> Result<Self> {
        if c.get("kind")? != "adapter" {
            return Err(Error::Config("not an adapter checkpoint".into()));
        }
        Self::read_from(c, "", config)
    }

    pub fn save(&self, config: &ModelConfig, path: &std::path::Path) -> Result<()> {
        self.to_container(config).write(path)
    }

    pub fn load(config: &ModelConfig, path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?, config)
    }
}

fn check_targets(model: &PolicyModel, adapter: &Adapter) -> Result<()> {
    let cfg = model.config();
    for (t, lr) in adapter.targets() {
        let (i, o) = cfg
            .linear_shape(t)
            .ok_or_else(|| Error::Config(format!("unknown injection point {t:?}")))?;
        if lr.a.shape() != [adapter.rank, i] || lr.b.shape() != [o, adapter.rank] {
            return Err(Error::Config(format!(
                "adapter target {t}: A {:?}, B {:?} do not fit a [{i}, {o}] layer",
                lr.a.shape(),
                lr.b.shape()
            )));
        }
    }
    Ok(())
}

pub fn attach(model: &mut PolicyModel, adapter: Adapter) -> Result<()> {
    if model.adapter(adapter.group_id).is_some() {
        return Err(Error::State(format!(
            "group {} is already attached",
            adapter.group_id
        )));
    }
    check_targets(model, &adapter)?;
    model.insert_adapter(adapter);
    Ok(())
}

pub fn detach(model: &mut PolicyModel, group_id: GroupId) -> Result<Adapter> {
    model
        .remove_adapter(group_id)
        .ok_or_else(|| Error::State(format!("group {group_id} is not attached")))
}

/// Folds the adapter into the base weights. The result carries no adapters.
pub fn merge(model: &PolicyModel, adapter: &Adapter) -> Result<PolicyModel> {
    check_targets(model, adapter)?;
    let mut merged = model.without_adapters();
    for t in adapter.targets().keys() {
        let delta = adapter.delta(t).expect("target present");
        let w = merged.tensor(t).expect("checked target").clone();
        let (i, o) = (w.shape()[0], w.shape()[1]);
        let mut data = w.into_data();
        for r in 0..i {
            for c in 0..o {
                data[r * o + c] += delta.data()[c * i + r];
            }
        }
        merged.set_tensor(t, Tensor::new(vec![i, o], data)?)?;
    }
    Ok(merged)
}

/// Prepares a model for inference under a loading strategy. `adapters` must
/// contain the needed groups.
pub fn load_strategy(
    base: &PolicyModel,
    adapters: &[Adapter],
    strategy: LoadingStrategy,
) -> Result<PolicyModel> {
    let find = |g: GroupId| {
        adapters
            .iter()
            .find(|a| a.group_id == g)
            .ok_or_else(|| Error::State(format!("no adapter for group {g}")))
    };
    let mut model = base.without_adapters();
    match strategy {
        LoadingStrategy::SingleModule(g) => attach(&mut model, find(g)?.clone())?,
        LoadingStrategy::MergedModel(g) => model = merge(&model, find(g)?)?,
        LoadingStrategy::AllModules => {
            for a in adapters {
                attach(&mut model, a.clone())?;
            }
        }
    }
    Ok(model)
}

/// Adapter-to-base parameter ratio for a rank-`r` adapter on every injection point.
pub fn budget_ratio(config: &ModelConfig, vocab_size: usize, rank: usize) -> f64 {
    let per_rank: usize = config
        .injection_points()
        .iter()
        .map(|n| {
            let (i, o) = config.linear_shape(n).expect("injection point");
            i + o
        })
        .sum();
    (rank * per_rank) as f64 / config.base_param_count(vocab_size) as f64
}

/// Smallest rank within the budget window, preferring the one nearest its
/// midpoint.
pub fn derive_rank(config: &ModelConfig, vocab_size: usize) -> Result<usize> {
    let mid = (BUDGET_RATIO.0 + BUDGET_RATIO.1) / 2.0;
    let max_rank = config.d_model.min(config.d_hidden);
    (1..=max_rank)
        .filter(|&r| {
            let q = budget_ratio(config, vocab_size, r);
            q >= BUDGET_RATIO.0 && q <= BUDGET_RATIO.1
        })
        .min_by(|&a, &b| {
            let da = (budget_ratio(config, vocab_size, a) - mid).abs();
            let db = (budget_ratio(config, vocab_size, b) - mid).abs();
            da.total_cmp(&db)
        })
        .ok_or_else(|| Error::Config(format!("no rank fits the adapter budget for {config:?}")))
}
