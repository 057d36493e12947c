//! Corpora, pseudo-monolingual construction, proportional sampling and
//! preference-dataset construction.
//!
//! Record files hold one JSON object per line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{GroupId, GroupMap, Resource, ENGLISH};
use crate::losses::{Origin, PreferenceTriple};
use crate::model::{DecodeMode, PolicyModel};
use crate::prompt;
use crate::vocab::SEP_GLYPH;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelPair {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: String,
    pub tgt: String,
}

impl ParallelPair {
    pub fn new(src_lang: &str, tgt_lang: &str, src: &str, tgt: &str) -> Self {
        Self {
            src_lang: src_lang.into(),
            tgt_lang: tgt_lang.into(),
            src: src.into(),
            tgt: tgt.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.src.is_empty() || self.tgt.is_empty() {
            return Err(Error::Validation("parallel texts must be non-empty".into()));
        }
        if self.src_lang == self.tgt_lang {
            return Err(Error::Validation(format!(
                "source and target language are both {}",
                self.src_lang
            )));
        }
        Ok(())
    }

    /// The non-English side, or the target when neither side is English.
    pub fn pivot_lang(&self) -> &str {
        if self.tgt_lang == ENGLISH {
            &self.src_lang
        } else {
            &self.tgt_lang
        }
    }

    pub fn prompt(&self) -> String {
        prompt::render(&self.src_lang, &self.tgt_lang, &self.src)
    }

    pub fn reversed(&self) -> Self {
        Self::new(&self.tgt_lang, &self.src_lang, &self.tgt, &self.src)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonoRecord {
    pub lang: String,
    pub text: String,
}

impl MonoRecord {
    pub fn new(lang: &str, text: &str) -> Self {
        Self {
            lang: lang.into(),
            text: text.into(),
        }
    }

    /// Character-token count.
    pub fn tokens(&self) -> usize {
        self.text.chars().count()
    }
}

pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one record per line; blank lines are skipped.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

/// `a⟨sep⟩b` with the pair order chosen by the caller.
pub fn pseudo_mono_record(pair: &ParallelPair, src_first: bool, sep: char) -> MonoRecord {
    let (a, b) = if src_first {
        (&pair.src, &pair.tgt)
    } else {
        (&pair.tgt, &pair.src)
    };
    MonoRecord {
        lang: pair.pivot_lang().to_string(),
        text: format!("{a}{sep}{b}"),
    }
}

/// Concatenates each pair into one record, order decided by a seeded coin.
pub fn build_pseudo_mono(pairs: &[ParallelPair], seed: u64, sep: char) -> Result<Vec<MonoRecord>> {
    if pairs.is_empty() {
        return Err(Error::Data("no parallel pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pairs
        .iter()
        .map(|p| pseudo_mono_record(p, rng.random_bool(0.5), sep))
        .collect())
}

/// Default separator for pseudo-monolingual records.
pub const PSEUDO_SEP: char = SEP_GLYPH;

/// Draws records uniformly from the pooled corpora until the token budget is
/// met, so each language's expected token share matches its corpus share.
pub fn sample_monolingual(
    corpora: &BTreeMap<String, Vec<MonoRecord>>,
    budget: usize,
    seed: u64,
) -> Result<Vec<MonoRecord>> {
    if budget == 0 {
        return Err(Error::Contract("token budget must be >= 1".into()));
    }
    let pool: Vec<&MonoRecord> = corpora
        .values()
        .flatten()
        .filter(|r| r.tokens() > 0)
        .collect();
    if pool.is_empty() {
        return Err(Error::Data("all monolingual corpora are empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut total = 0;
    while total < budget {
        let r = pool[rng.random_range(0..pool.len())];
        total += r.tokens();
        out.push(r.clone());
    }
    Ok(out)
}

/// Token count per language.
pub fn token_shares(records: &[MonoRecord]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r.lang.clone()).or_insert(0) += r.tokens();
    }
    m
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub x: String,
    pub y_model: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditResponse {
    pub y_edit: String,
}

/// Produces an improved translation of a model output.
pub trait PostEditor {
    fn edit(&self, request: &EditRequest) -> Result<EditResponse>;
}

/// Moves serialized requests to an editing service.
pub trait Transport {
    fn send(&self, request: &str) -> Result<String>;
}

/// Post-editor speaking the JSON wire format over a transport.
pub struct RemoteEditor<T: Transport> {
    pub transport: T,
}

impl<T: Transport> PostEditor for RemoteEditor<T> {
    fn edit(&self, request: &EditRequest) -> Result<EditResponse> {
        let body = serde_json::to_string(request).map_err(|e| Error::Data(e.to_string()))?;
        let reply = self.transport.send(&body)?;
        serde_json::from_str(&reply).map_err(|e| Error::Data(format!("bad editor response: {e}")))
    }
}

/// Returns the model output unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEditor;

impl PostEditor for IdentityEditor {
    fn edit(&self, request: &EditRequest) -> Result<EditResponse> {
        Ok(EditResponse {
            y_edit: request.y_model.clone(),
        })
    }
}

/// Answers from a fixed source-to-edit table; unknown sources are an error.
#[derive(Debug, Clone, Default)]
pub struct LookupEditor {
    pub table: BTreeMap<String, String>,
}

impl PostEditor for LookupEditor {
    fn edit(&self, request: &EditRequest) -> Result<EditResponse> {
        self.table
            .get(&request.x)
            .map(|e| EditResponse { y_edit: e.clone() })
            .ok_or_else(|| Error::Data(format!("no edit for {:?}", request.x)))
    }
}

/// Editor that applies a pure function of the source.
pub struct FnEditor<F: Fn(&str) -> String>(pub F);

impl<F: Fn(&str) -> String> PostEditor for FnEditor<F> {
    fn edit(&self, request: &EditRequest) -> Result<EditResponse> {
        Ok(EditResponse {
            y_edit: (self.0)(&request.x),
        })
    }
}

/// Languages whose pairs receive post-edited triples.
pub fn high_resource_langs(groups: &GroupMap) -> BTreeSet<String> {
    groups
        .languages()
        .into_iter()
        .filter(|l| groups.info(l).and_then(|i| i.resource) == Some(Resource::High))
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone)]
pub struct PreferenceOptions {
    pub decode: DecodeMode,
    pub max_len: usize,
    /// Routes generation through the group of each pair.
    pub groups: Option<GroupMap>,
    /// Fixed route used when `groups` is absent; `None` lets the model
    /// resolve the active module.
    pub route: Option<GroupId>,
    /// Pivot languages eligible for post-edited triples; `None` admits all.
    pub edit_langs: Option<BTreeSet<String>>,
}

impl Default for PreferenceOptions {
    fn default() -> Self {
        Self {
            decode: DecodeMode::Greedy,
            max_len: 32,
            groups: None,
            route: None,
            edit_langs: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreferenceDataset {
    pub records: Vec<PreferenceTriple>,
    pub d1: usize,
    pub d2: usize,
    /// Candidates dropped because `y_w == y_l`.
    pub dropped: usize,
    /// Pairs skipped because generation or editing failed.
    pub failed: usize,
}

fn triple(pair: &ParallelPair, y_w: String, y_l: String, origin: Origin) -> PreferenceTriple {
    PreferenceTriple {
        src_lang: pair.src_lang.clone(),
        tgt_lang: pair.tgt_lang.clone(),
        x: pair.src.clone(),
        y_w,
        y_l,
        origin,
    }
}

/// Reference-preferred triples first, then post-edit triples. The model must
/// be frozen.
pub fn build_preference(
    parallel: &[ParallelPair],
    model: &PolicyModel,
    editor: Option<&dyn PostEditor>,
    options: &PreferenceOptions,
    seed: u64,
) -> Result<PreferenceDataset> {
    if parallel.is_empty() {
        return Err(Error::Data("no parallel pairs".into()));
    }
    if !model.is_frozen() {
        return Err(Error::Contract(
            "preference generation needs a frozen model".into(),
        ));
    }
    let mut ds = PreferenceDataset::default();
    let mut outputs: Vec<Option<String>> = Vec::with_capacity(parallel.len());
    for (i, pair) in parallel.iter().enumerate() {
        let generated = (|| {
            pair.validate()?;
            let route = match &options.groups {
                Some(g) => Some(g.route_pair(&pair.src_lang, &pair.tgt_lang)?),
                None => options.route,
            };
            let mode = match options.decode {
                DecodeMode::Temperature {
                    temperature,
                    seed: s,
                } => DecodeMode::Temperature {
                    temperature,
                    seed: s ^ seed.wrapping_add(i as u64),
                },
                m => m,
            };
            let ids = model.generate(&pair.prompt(), mode, options.max_len, route)?;
            model.vocab().decode(&ids)
        })();
        match generated {
            Ok(y) if y.is_empty() => {
                log::warn!("record {i}: empty model output, skipped");
                ds.failed += 1;
                outputs.push(None);
            }
            Ok(y) => {
                if y == pair.tgt {
                    ds.dropped += 1;
                } else {
                    ds.records
                        .push(triple(pair, pair.tgt.clone(), y.clone(), Origin::Reference));
                    ds.d1 += 1;
                }
                outputs.push(Some(y));
            }
            Err(e) => {
                log::warn!("record {i}: generation failed, skipped: {e}");
                ds.failed += 1;
                outputs.push(None);
            }
        }
    }
    if let Some(editor) = editor {
        for (i, (pair, y)) in parallel.iter().zip(&outputs).enumerate() {
            let Some(y_model) = y else { continue };
            if let Some(langs) = &options.edit_langs {
                if !langs.contains(pair.pivot_lang()) {
                    continue;
                }
            }
            let req = EditRequest {
                x: pair.src.clone(),
                y_model: y_model.clone(),
            };
            match editor.edit(&req) {
                Ok(resp) if resp.y_edit.is_empty() => {
                    log::warn!("record {i}: empty post-edit, skipped");
                    ds.failed += 1;
                }
                Ok(resp) if resp.y_edit == *y_model => ds.dropped += 1,
                Ok(resp) => {
                    ds.records
                        .push(triple(pair, resp.y_edit, y_model.clone(), Origin::Postedit));
                    ds.d2 += 1;
                }
                Err(e) => {
                    log::warn!("record {i}: post-edit failed, skipped: {e}");
                    ds.failed += 1;
                }
            }
        }
    }
    debug_assert_eq!(ds.records.len(), ds.d1 + ds.d2);
    Ok(ds)
}

/// Synthetic cipher languages for desk-scale runs.
pub mod synthetic {
    use super::*;

    pub const LETTERS: &str = "abcdefghijklmnopqrstuvwxyz";

    /// Maps English text into a toy language (`qc` shifts letters by one,
    /// `qr` reverses each word).
    pub fn encipher(lang: &str, text: &str) -> Result<String> {
        match lang {
            "qc" => Ok(text
                .chars()
                .map(|c| match c {
                    'z' => 'a',
                    'a'..='y' => (c as u8 + 1) as char,
                    other => other,
                })
                .collect()),
            "qr" => Ok(text
                .split(' ')
                .map(|w| w.chars().rev().collect::<String>())
                .collect::<Vec<_>>()
                .join(" ")),
            other => Err(Error::Data(format!("no synthetic cipher for {other:?}"))),
        }
    }

    /// Random lowercase words joined by single spaces, `len` characters total
    /// (approximately, never longer).
    pub fn random_text(rng: &mut ChaCha8Rng, len: usize) -> String {
        let letters: Vec<char> = LETTERS.chars().collect();
        let mut s = String::with_capacity(len);
        while s.len() < len {
            if !s.is_empty() && s.len() + 2 <= len && rng.random_bool(0.2) && !s.ends_with(' ') {
                s.push(' ');
            }
            s.push(letters[rng.random_range(0..letters.len())]);
        }
        s
    }

    /// `n` distinct English sources of `len` characters paired with their
    /// enciphered translations, English first.
    pub fn parallel(lang: &str, n: usize, len: usize, seed: u64) -> Result<Vec<ParallelPair>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return Err(Error::Data(format!(
                    "cannot draw {n} distinct sources of length {len}"
                )));
            }
            let en = random_text(&mut rng, len);
            if !seen.insert(en.clone()) {
                continue;
            }
            let tgt = encipher(lang, &en)?;
            out.push(ParallelPair::new(ENGLISH, lang, &en, &tgt));
        }
        Ok(out)
    }

    pub fn monolingual(lang: &str, n: usize, len: usize, seed: u64) -> Result<Vec<MonoRecord>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let en = random_text(&mut rng, len);
                let text = if lang == ENGLISH {
                    en
                } else {
                    encipher(lang, &en)?
                };
                Ok(MonoRecord::new(lang, &text))
            })
            .collect()
    }
}
