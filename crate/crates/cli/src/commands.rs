use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use xlab_core::adapters::{merge, Adapter};
use xlab_core::ckpt::Container;
use xlab_core::data::{
    build_preference, build_pseudo_mono, read_records, write_records, LookupEditor, MonoRecord,
    ParallelPair, PostEditor, PreferenceOptions, PSEUDO_SEP,
};
use xlab_core::eval::{emit_plot, evaluate, EvalOptions, Unit};
use xlab_core::experiment::{run_comparison, CompareConfig};
use xlab_core::losses::{
    cdf_quantile, reward_diff_cdf, reward_differences, LossConfig, Method, PreferenceTriple,
};
use xlab_core::model::{DecodeMode, ModelConfig, PolicyModel};
use xlab_core::train::{Stage, StageConfig, StageData, TrainState};
use xlab_core::vocab::Vocab;
use xlab_core::{Error, Result};

use crate::{
    Cli, Command, CompareArgs, EvalArgs, MergeArgs, PlotArgs, PrefArgs, PseudoArgs, TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let root = Root(cli.data_dir);
    match cli.command {
        Command::Train(a) => train(&root, a),
        Command::BuildPrefdata(a) => build_prefdata(&root, a),
        Command::BuildPseudomono(a) => build_pseudomono(&root, a),
        Command::Eval(a) => eval(&root, a),
        Command::MergeAdapter(a) => merge_adapter(&root, a),
        Command::PlotCdf(a) => plot_cdf(&root, a),
        Command::CompareLosses(a) => compare_losses(&root, a),
    }
}

/// Resolves relative input paths against the data directory.
struct Root(Option<PathBuf>);

impl Root {
    fn input(&self, p: &Path) -> PathBuf {
        match &self.0 {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }
}

/// Loads a model from a model or training-state checkpoint.
fn load_model(path: &Path) -> Result<PolicyModel> {
    let c = Container::read(path)?;
    match c.get("kind")? {
        "model" | "train" => PolicyModel::from_container(&c),
        other => Err(Error::Config(format!(
            "{} holds a {other} checkpoint, not a model",
            path.display()
        ))),
    }
}

fn train(root: &Root, a: TrainArgs) -> Result<()> {
    let stage =
        Stage::from_index(a.stage).ok_or_else(|| Error::Config(format!("no stage {}", a.stage)))?;
    let mut cfg = match &a.config {
        Some(p) => StageConfig::load(&root.input(p), Some(a.seed))?,
        None => StageConfig {
            steps: None,
            ..StageConfig::new(stage, 0, a.seed)
        },
    };
    cfg.stage = stage;
    if a.steps.is_some() {
        cfg.steps = a.steps;
        cfg.tokens = None;
    }
    if a.group.is_some() {
        cfg.group = a.group;
    }
    if !a.data.is_empty() {
        cfg.data = a.data.iter().map(|p| root.input(p)).collect();
    }
    cfg.allow_out_of_order |= a.allow_out_of_order;
    cfg.validate()?;
    if cfg.data.is_empty() {
        return Err(Error::Config("no data files given".into()));
    }

    let data = match stage {
        Stage::Pt1MonoBase | Stage::Pt2MonoAdapters | Stage::Pt3PseudoMono => {
            StageData::Mono(read_all::<MonoRecord>(&cfg.data)?)
        }
        Stage::Post1Sft => StageData::Parallel(read_all::<ParallelPair>(&cfg.data)?),
        Stage::Post2Preference => StageData::Preference(read_all::<PreferenceTriple>(&cfg.data)?),
    };
    let mut state = match &a.state {
        Some(p) => TrainState::restore(&root.input(p))?,
        None => TrainState::new(
            PolicyModel::new(Vocab::toy(), ModelConfig::default(), a.seed)?,
            a.seed,
        ),
    };
    let report = state.run_stage(&cfg, &data)?;
    state.checkpoint(&a.out)?;
    println!(
        "stage {}: {} steps, loss {:.6} -> {:.6}",
        stage.name(),
        report.steps,
        report.first_loss,
        report.last_loss
    );
    println!(
        "base checksum {}: {}",
        if report.base_checksum_before == report.base_checksum_after {
            "unchanged"
        } else {
            "changed"
        },
        report.base_checksum_after
    );
    Ok(())
}

fn read_all<T: serde::de::DeserializeOwned>(paths: &[PathBuf]) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_records::<T>(p)?);
    }
    Ok(out)
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct EditRecord {
    x: String,
    y_edit: String,
}

fn build_prefdata(root: &Root, a: PrefArgs) -> Result<()> {
    if matches!(a.temperature, Some(t) if !(t > 0.0)) {
        return Err(Error::Config("temperature must be > 0".into()));
    }
    if a.max_len == 0 {
        return Err(Error::Config("max_len must be >= 1".into()));
    }
    let pairs: Vec<ParallelPair> = read_records(&root.input(&a.input))?;
    let mut model = load_model(&root.input(&a.model))?;
    model.set_frozen(true);
    let editor = match &a.edits {
        Some(p) => {
            let table: BTreeMap<String, String> = read_records::<EditRecord>(&root.input(p))?
                .into_iter()
                .map(|r| (r.x, r.y_edit))
                .collect();
            Some(LookupEditor { table })
        }
        None => None,
    };
    let opts = PreferenceOptions {
        decode: match a.temperature {
            Some(temperature) => DecodeMode::Temperature {
                temperature,
                seed: a.seed,
            },
            None => DecodeMode::Greedy,
        },
        max_len: a.max_len,
        route: a.group,
        ..PreferenceOptions::default()
    };
    let ds = build_preference(
        &pairs,
        &model,
        editor.as_ref().map(|e| e as &dyn PostEditor),
        &opts,
        a.seed,
    )?;
    write_records(&a.out, &ds.records)?;
    println!(
        "triples {} (d1 {}, d2 {}), dropped {}, failed {}",
        ds.records.len(),
        ds.d1,
        ds.d2,
        ds.dropped,
        ds.failed
    );
    Ok(())
}

fn build_pseudomono(root: &Root, a: PseudoArgs) -> Result<()> {
    let pairs: Vec<ParallelPair> = read_records(&root.input(&a.input))?;
    let records = build_pseudo_mono(&pairs, a.seed, PSEUDO_SEP)?;
    write_records(&a.out, &records)?;
    println!("records {}", records.len());
    Ok(())
}

fn eval(root: &Root, a: EvalArgs) -> Result<()> {
    let unit = match a.unit.as_str() {
        "char" => Unit::Char,
        "word" => Unit::Word,
        other => {
            return Err(Error::Config(format!(
                "unknown unit {other:?}; use char or word"
            )))
        }
    };
    if a.max_len == 0 {
        return Err(Error::Config("max_len must be >= 1".into()));
    }
    let model = load_model(&root.input(&a.model))?;
    let pairs: Vec<ParallelPair> = read_records(&root.input(&a.input))?;
    let scorer = a
        .scorer
        .as_ref()
        .map(|p| load_model(&root.input(p)))
        .transpose()?;
    let opts = EvalOptions {
        max_len: a.max_len,
        unit,
        ..EvalOptions::default()
    };
    let result = evaluate(
        &model,
        a.group,
        &pairs,
        scorer.as_ref().map(|s| (s, a.scorer_group)),
        &opts,
    )?;
    for (dir, s) in result
        .directions
        .iter()
        .map(|(d, s)| (d.as_str(), s))
        .chain([("mean", &result.mean)])
    {
        print!(
            "{dir}: lexical_bleu={:.6} exact_match={:.6} avg_ref_logprob={:.6}",
            s.lexical_bleu, s.exact_match, s.avg_ref_logprob
        );
        match s.proxy_reward {
            Some(p) => println!(" proxy_reward={p:.6}"),
            None => println!(),
        }
    }
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&result).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(out, json + "\n")?;
    }
    Ok(())
}

fn merge_adapter(root: &Root, a: MergeArgs) -> Result<()> {
    let model = load_model(&root.input(&a.input))?;
    let c = Container::read(&root.input(&a.adapter))?;
    let adapter = if c.get("kind")? == "adapter" {
        Adapter::from_container(&c, model.config())?
    } else {
        PolicyModel::from_container(&c)?
            .adapter(a.group)
            .cloned()
            .ok_or_else(|| {
                Error::State(format!(
                    "{} carries no adapter for group {}",
                    a.adapter.display(),
                    a.group
                ))
            })?
    };
    if adapter.group_id != a.group {
        return Err(Error::Config(format!(
            "adapter belongs to group {}, not {}",
            adapter.group_id, a.group
        )));
    }
    let merged = merge(&model, &adapter)?;
    merged.save(&a.out)?;
    println!("merged group {} into {}", a.group, a.out.display());
    Ok(())
}

fn plot_cdf(root: &Root, a: PlotArgs) -> Result<()> {
    let model = load_model(&root.input(&a.model))?;
    let reference = model.without_adapters();
    let cfg = LossConfig::new(Method::Dpo);
    let mut series = Vec::new();
    for p in &a.inputs {
        let triples: Vec<PreferenceTriple> = read_records(&root.input(p))?;
        let diffs = reward_differences(&cfg, &model, a.group, &reference, None, &triples)?;
        let cdf = reward_diff_cdf(&diffs)?;
        let name = p.file_stem().map_or_else(
            || p.display().to_string(),
            |s| s.to_string_lossy().into_owned(),
        );
        println!(
            "{name}: n={} p50={:.6} p80={:.6}",
            cdf.len(),
            cdf_quantile(&cdf, 0.5),
            cdf_quantile(&cdf, 0.8)
        );
        series.push((name, cdf));
    }
    std::fs::create_dir_all(&a.out)?;
    let (csv, svg) = emit_plot(&series, &a.out.join("cdf"))?;
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}

fn compare_losses(root: &Root, a: CompareArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => CompareConfig::from_toml(&std::fs::read_to_string(root.input(p))?)?,
        None => CompareConfig::default(),
    };
    cfg.seed = a.seed;
    if !a.methods.is_empty() {
        cfg.methods = a
            .methods
            .iter()
            .map(|m| m.trim().parse())
            .collect::<Result<_>>()?;
    }
    cfg.validate()?;
    let cmp = run_comparison(&cfg)?;
    let report = cmp.render();
    print!("{report}");
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), &report)?;
        std::fs::write(dir.join("sft.ckpt"), &cmp.sft_checkpoint)?;
        for m in &cmp.methods {
            std::fs::write(dir.join(format!("{}.ckpt", m.method.name())), &m.checkpoint)?;
        }
    }
    Ok(())
}
