//! Lexical-match scoring, over-rejection diagnostics and plot emission.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ParallelPair;
use crate::error::{Error, Result};
use crate::groups::GroupId;
use crate::model::{DecodeMode, PolicyModel};

/// Relative BLEU drop above which a run is flagged.
pub const OVER_REJECTION_DROP: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    #[default]
    Word,
    /// One token per character; used for the cipher tasks.
    Char,
}

impl Unit {
    pub fn split(self, text: &str) -> Vec<String> {
        match self {
            Unit::Word => text.split_whitespace().map(str::to_owned).collect(),
            Unit::Char => text
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
        }
    }
}

/// Corpus-level BLEU over whitespace tokens.
pub fn lexical_bleu<S: AsRef<str>>(
    hypotheses: &[S],
    references: &[S],
    max_n: usize,
) -> Result<f64> {
    lexical_bleu_with(hypotheses, references, max_n, Unit::Word)
}

/// Corpus-level BLEU: clipped n-gram counts summed over the corpus, geometric
/// mean of the precisions up to `max_n`, brevity penalty when the hypotheses
/// are shorter.
pub fn lexical_bleu_with<S: AsRef<str>>(
    hypotheses: &[S],
    references: &[S],
    max_n: usize,
    unit: Unit,
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Contract(
            "lexical_bleu needs at least one reference".into(),
        ));
    }
    if max_n == 0 {
        return Err(Error::Contract("max_n must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let h = unit.split(h.as_ref());
        let r = unit.split(r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            total[n - 1] += h.len().saturating_sub(n - 1);
            matched[n - 1] += hc
                .iter()
                .map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    // orders no hypothesis is long enough to form carry no evidence and are skipped
    let orders: Vec<(usize, usize)> = matched
        .into_iter()
        .zip(total)
        .filter(|&(_, t)| t > 0)
        .collect();
    if hyp_len == 0 || orders.iter().any(|&(m, _)| m == 0) {
        return Ok(0.0);
    }
    let log_p = orders
        .iter()
        .map(|&(m, t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / orders.len() as f64;
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok((bp * log_p.exp()).min(1.0))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Fraction of hypotheses equal to their reference token-wise.
pub fn exact_match<S: AsRef<str>>(hypotheses: &[S], references: &[S], unit: Unit) -> Result<f64> {
    if hypotheses.len() != references.len() || references.is_empty() {
        return Err(Error::Contract(format!(
            "exact_match needs equal non-empty lists, got {} and {}",
            hypotheses.len(),
            references.len()
        )));
    }
    let hits = hypotheses
        .iter()
        .zip(references)
        .filter(|(h, r)| unit.split(h.as_ref()) == unit.split(r.as_ref()))
        .count();
    Ok(hits as f64 / references.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub lexical_bleu: f64,
    pub exact_match: f64,
    /// Mean per-token log-probability of the references under the evaluated policy.
    pub avg_ref_logprob: f64,
    /// Mean per-token log-probability of the policy's outputs under a held-out
    /// frozen scorer. A toy stand-in for a learned quality metric.
    pub proxy_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Keyed by `src-tgt`.
    pub directions: BTreeMap<String, Scores>,
    pub mean: Scores,
}

impl EvalResult {
    /// Aggregates are the arithmetic means of the per-direction values.
    pub fn from_directions(directions: BTreeMap<String, Scores>) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::Contract("evaluation covers no directions".into()));
        }
        let n = directions.len() as f64;
        let mean_of = |f: fn(&Scores) -> f64| directions.values().map(f).sum::<f64>() / n;
        let proxy = if directions.values().all(|s| s.proxy_reward.is_some()) {
            Some(
                directions
                    .values()
                    .filter_map(|s| s.proxy_reward)
                    .sum::<f64>()
                    / n,
            )
        } else {
            None
        };
        let mean = Scores {
            lexical_bleu: mean_of(|s| s.lexical_bleu),
            exact_match: mean_of(|s| s.exact_match),
            avg_ref_logprob: mean_of(|s| s.avg_ref_logprob),
            proxy_reward: proxy,
        };
        Ok(Self { directions, mean })
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub decode: DecodeMode,
    pub max_len: usize,
    pub unit: Unit,
    pub max_n: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            decode: DecodeMode::Greedy,
            max_len: 32,
            unit: Unit::Char,
            max_n: 4,
        }
    }
}

/// Hypotheses produced by the policy for each pair, in input order.
pub fn translate(
    model: &PolicyModel,
    pairs: &[ParallelPair],
    route: Option<GroupId>,
    opts: &EvalOptions,
) -> Result<Vec<String>> {
    pairs
        .iter()
        .map(|p| {
            let ids = model.generate(&p.prompt(), opts.decode, opts.max_len, route)?;
            model.vocab().decode(&ids)
        })
        .collect()
}

/// Scores `model` on `pairs`, grouped by direction.
pub fn evaluate(
    model: &PolicyModel,
    route: Option<GroupId>,
    pairs: &[ParallelPair],
    scorer: Option<(&PolicyModel, Option<GroupId>)>,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    if pairs.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let hyps = translate(model, pairs, route, opts)?;
    let mut by_dir: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        by_dir
            .entry(format!("{}-{}", p.src_lang, p.tgt_lang))
            .or_default()
            .push(i);
    }
    let vocab = model.vocab();
    let mut directions = BTreeMap::new();
    for (dir, idx) in by_dir {
        let h: Vec<&str> = idx.iter().map(|&i| hyps[i].as_str()).collect();
        let r: Vec<&str> = idx.iter().map(|&i| pairs[i].tgt.as_str()).collect();
        let mut ref_lp = 0.0;
        let mut proxy = 0.0;
        for &i in &idx {
            let prompt = pairs[i].prompt();
            ref_lp += model
                .sequence_logprob(&prompt, &vocab.encode_target(&pairs[i].tgt)?, route)?
                .avg;
            if let Some((s, s_route)) = scorer {
                proxy += s
                    .sequence_logprob(&prompt, &s.vocab().encode_target(&hyps[i])?, s_route)?
                    .avg;
            }
        }
        let n = idx.len() as f64;
        directions.insert(
            dir,
            Scores {
                lexical_bleu: lexical_bleu_with(&h, &r, opts.max_n, opts.unit)?,
                exact_match: exact_match(&h, &r, opts.unit)?,
                avg_ref_logprob: ref_lp / n,
                proxy_reward: scorer.map(|_| proxy / n),
            },
        );
    }
    EvalResult::from_directions(directions)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub lexical_bleu: f64,
    pub exact_match: f64,
    pub avg_ref_logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverRejectionReport {
    pub deltas: BTreeMap<String, Delta>,
    /// Average log-likelihood of the preferred responses over training.
    pub likelihood_track: Vec<f64>,
    /// Directions whose BLEU fell by more than the threshold while the
    /// reference likelihood also fell.
    pub flagged: Vec<String>,
}

impl OverRejectionReport {
    pub fn suspected(&self) -> bool {
        !self.flagged.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "over_rejection_suspected: {}", self.suspected());
        for (dir, d) in &self.deltas {
            let _ = writeln!(
                out,
                "direction {dir}: d_lexical_bleu={:.6} d_exact_match={:.6} d_avg_ref_logprob={:.6}{}",
                d.lexical_bleu,
                d.exact_match,
                d.avg_ref_logprob,
                if self.flagged.contains(dir) { " FLAG" } else { "" }
            );
        }
        let track: Vec<String> = self
            .likelihood_track
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect();
        let _ = writeln!(out, "chosen_likelihood_track: [{}]", track.join(", "));
        out
    }
}

pub fn over_rejection_report(
    before: &EvalResult,
    after: &EvalResult,
    likelihood_track: &[f64],
) -> Result<OverRejectionReport> {
    if !before.directions.keys().eq(after.directions.keys()) {
        return Err(Error::Contract(
            "before/after evaluations cover different directions".into(),
        ));
    }
    let mut deltas = BTreeMap::new();
    let mut flagged = Vec::new();
    for (dir, b) in &before.directions {
        let a = &after.directions[dir];
        let d = Delta {
            lexical_bleu: a.lexical_bleu - b.lexical_bleu,
            exact_match: a.exact_match - b.exact_match,
            avg_ref_logprob: a.avg_ref_logprob - b.avg_ref_logprob,
        };
        let rel_drop = if b.lexical_bleu > 0.0 {
            -d.lexical_bleu / b.lexical_bleu
        } else {
            0.0
        };
        if rel_drop > OVER_REJECTION_DROP && d.avg_ref_logprob < 0.0 {
            flagged.push(dir.clone());
        }
        deltas.insert(dir.clone(), d);
    }
    Ok(OverRejectionReport {
        deltas,
        likelihood_track: likelihood_track.to_vec(),
        flagged,
    })
}

pub type Series = (String, Vec<(f64, f64)>);

/// Writes `<stem>.csv` and `<stem>.svg`, returning both paths.
pub fn emit_plot(series: &[Series], stem: &Path) -> Result<(PathBuf, PathBuf)> {
    if series.is_empty() || series.iter().any(|(_, pts)| pts.is_empty()) {
        return Err(Error::Contract("emit_plot needs non-empty series".into()));
    }
    if series
        .iter()
        .flat_map(|(_, p)| p)
        .any(|(x, y)| !x.is_finite() || !y.is_finite())
    {
        return Err(Error::Contract("plot points must be finite".into()));
    }
    let csv_path = stem.with_extension("csv");
    let svg_path = stem.with_extension("svg");
    let mut csv = String::from("series,x,y\n");
    for (name, pts) in series {
        for (x, y) in pts {
            let _ = writeln!(csv, "{name},{x},{y}");
        }
    }
    std::fs::write(&csv_path, csv)?;
    std::fs::write(&svg_path, render_svg(series))?;
    Ok((csv_path, svg_path))
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn render_svg(series: &[Series]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let pts = series.iter().flat_map(|(_, p)| p);
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    y0 = y0.min(0.0);
    let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * pad);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="10">"#
    );
    let _ = writeln!(
        out,
        r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#
    );
    let _ = writeln!(
        out,
        r#"<path d="M{pad} {t} V{b} H{r}" stroke="black" fill="none"/>"#,
        t = pad,
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(
        out,
        r#"<text x="{pad}" y="{:.1}">{x0:.3}</text>"#,
        h - pad + 14.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{x1:.3}</text>"#,
        w - pad,
        h - pad + 14.0
    );
    let _ = writeln!(out, r#"<text x="4" y="{:.1}">{y1:.3}</text>"#, pad + 4.0);
    let _ = writeln!(out, r#"<text x="4" y="{:.1}">{y0:.3}</text>"#, h - pad);
    for (i, (name, p)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = p
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" stroke="{colour}" fill="none" stroke-width="1.5"/>"#,
            coords.join(" ")
        );
        let ly = pad + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{colour}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            w - pad - 110.0,
            w - pad - 95.0,
            w - pad - 90.0,
            ly + 3.0,
            xml_escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
