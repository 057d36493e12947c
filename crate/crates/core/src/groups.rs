//! Language-group registry driving hard-gated module routing.
//!
//! Config grammar (line oriented, `#` starts a comment):
//!
//! ```text
//! group 6: et, fi, ja, ka, ko, zh, en
//! lang az: name=Azerbaijani; script=Arabic/Latin; resource=low
//! ```
//!
//! A `group <id>:` line opens a section; codes are comma separated and may
//! continue on following lines until the next directive. `lang` lines attach
//! informational metadata to a code that appears in some group.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENGLISH: &str = "en";

/// The shipped grouping of 50 languages into 8 groups.
pub const DEFAULT_CONFIG: &str = include_str!("../data/groups.conf");

/// Synthetic cipher languages used by the toy experiments.
pub const TOY_CONFIG: &str = include_str!("../data/toy_groups.conf");

pub type GroupId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resource {
    Low,
    Mid,
    High,
}

impl Resource {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "low" => Some(Resource::Low),
            "mid" => Some(Resource::Mid),
            "high" => Some(Resource::High),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Resource::Low => "low",
            Resource::Mid => "mid",
            Resource::High => "high",
        }
    }
}

/// Informational per-language metadata. Never consulted for routing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LangInfo {
    pub name: Option<String>,
    pub script: Option<String>,
    pub resource: Option<Resource>,
}

/// Which side of an English-centric pair English sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    IntoEn,
    FromEn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMap {
    groups: BTreeMap<GroupId, Vec<String>>,
    info: BTreeMap<String, LangInfo>,
}

fn valid_code(code: &str) -> bool {
    (2..=3).contains(&code.len()) && code.bytes().all(|b| b.is_ascii_lowercase())
}

impl GroupMap {
    pub fn default_map() -> Self {
        Self::load(DEFAULT_CONFIG).expect("shipped group config is valid")
    }

    pub fn toy() -> Self {
        Self::load(TOY_CONFIG).expect("shipped toy config is valid")
    }

    /// Parses and validates a group config.
    pub fn load(text: &str) -> Result<Self> {
        let mut groups: BTreeMap<GroupId, Vec<String>> = BTreeMap::new();
        let mut info: BTreeMap<String, LangInfo> = BTreeMap::new();
        let mut current: Option<GroupId> = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Validation(format!("line {}: {msg}", lineno + 1));
            let codes_part = if let Some(rest) = line.strip_prefix("group ") {
                let (id, codes) = rest
                    .split_once(':')
                    .ok_or_else(|| bad("expected 'group <id>:'".into()))?;
                let id: GroupId = id
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("invalid group id {:?}", id.trim())))?;
                if groups.insert(id, Vec::new()).is_some() {
                    return Err(bad(format!("group {id} declared twice")));
                }
                current = Some(id);
                codes
            } else if let Some(rest) = line.strip_prefix("lang ") {
                let (code, fields) = rest
                    .split_once(':')
                    .ok_or_else(|| bad("expected 'lang <code>: key=value; ...'".into()))?;
                let code = code.trim().to_string();
                let entry = info.entry(code.clone()).or_default();
                for field in fields.split(';').map(str::trim).filter(|f| !f.is_empty()) {
                    let (k, v) = field
                        .split_once('=')
                        .ok_or_else(|| bad(format!("expected key=value, got {field:?}")))?;
                    let v = v.trim().to_string();
                    match k.trim() {
                        "name" => entry.name = Some(v),
                        "script" => entry.script = Some(v),
                        "resource" => {
                            entry.resource = Some(
                                Resource::parse(&v)
                                    .ok_or_else(|| bad(format!("unknown resource level {v:?}")))?,
                            )
                        }
                        other => return Err(bad(format!("unknown lang field {other:?}"))),
                    }
                }
                current = None;
                continue;
            } else {
                line
            };
            let Some(id) = current else {
                return Err(bad(format!("codes outside a group section: {line:?}")));
            };
            let members = groups.get_mut(&id).expect("section registered");
            for code in codes_part
                .split(',')
                .map(str::trim)
                .filter(|c| !c.is_empty())
            {
                if !valid_code(code) {
                    return Err(bad(format!("invalid language code {code:?}")));
                }
                if members.iter().any(|c| c == code) {
                    return Err(bad(format!("code {code:?} listed twice in group {id}")));
                }
                members.push(code.to_string());
            }
        }
        let map = GroupMap { groups, info };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Validation("no groups defined".into()));
        }
        let mut owner: BTreeMap<&str, GroupId> = BTreeMap::new();
        for (&id, codes) in &self.groups {
            if !codes.iter().any(|c| c == ENGLISH) {
                return Err(Error::Validation(format!(
                    "group {id} does not include \"en\""
                )));
            }
            if codes.iter().all(|c| c == ENGLISH) {
                return Err(Error::Validation(format!(
                    "group {id} has no non-English language"
                )));
            }
            for code in codes.iter().filter(|c| *c != ENGLISH) {
                if let Some(prev) = owner.insert(code, id) {
                    return Err(Error::Validation(format!(
                        "language {code:?} appears in groups {prev} and {id}"
                    )));
                }
            }
        }
        if let Some(code) = self
            .info
            .keys()
            .find(|c| *c != ENGLISH && !owner.contains_key(c.as_str()))
        {
            return Err(Error::Validation(format!(
                "metadata for unregistered language {code:?}"
            )));
        }
        Ok(())
    }

    /// Canonical config text; `load(serialize(m)) == m`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (id, codes) in &self.groups {
            let _ = writeln!(out, "group {id}: {}", codes.join(", "));
        }
        if !self.info.is_empty() {
            out.push('\n');
        }
        for (code, info) in &self.info {
            let mut fields = Vec::new();
            if let Some(n) = &info.name {
                fields.push(format!("name={n}"));
            }
            if let Some(s) = &info.script {
                fields.push(format!("script={s}"));
            }
            if let Some(r) = info.resource {
                fields.push(format!("resource={}", r.as_str()));
            }
            let _ = writeln!(out, "lang {code}: {}", fields.join("; "));
        }
        out
    }

    pub fn group_ids(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.groups.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Members of a group in config order, English included.
    pub fn members(&self, id: GroupId) -> Option<&[String]> {
        self.groups.get(&id).map(Vec::as_slice)
    }

    /// All distinct non-English codes.
    pub fn languages(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self
            .groups
            .values()
            .flatten()
            .map(String::as_str)
            .filter(|c| *c != ENGLISH)
            .collect();
        v.sort_unstable();
        v
    }

    pub fn contains(&self, lang: &str) -> bool {
        lang == ENGLISH || self.groups.values().any(|g| g.iter().any(|c| c == lang))
    }

    pub fn info(&self, lang: &str) -> Option<&LangInfo> {
        self.info.get(lang)
    }

    /// The unique group of a non-English language.
    pub fn group_of(&self, lang: &str) -> Result<GroupId> {
        if lang == ENGLISH {
            return Err(Error::Lookup(
                "\"en\" belongs to every group; use route() with the pair's other language".into(),
            ));
        }
        self.groups
            .iter()
            .find(|(_, codes)| codes.iter().any(|c| c == lang))
            .map(|(&id, _)| id)
            .ok_or_else(|| Error::Lookup(format!("unknown language {lang:?}")))
    }

    /// Hard-gated routing for an English-centric direction. `lang` is the
    /// non-English side; English itself carries no group of its own.
    pub fn route(&self, lang: &str, _direction: Direction) -> Result<GroupId> {
        if lang == ENGLISH {
            return Err(Error::Routing(
                "English is routed by the non-English side of the pair".into(),
            ));
        }
        self.group_of(lang)
            .map_err(|_| Error::Routing(format!("unknown language {lang:?}")))
    }

    /// Routes a translation pair. Non-English pairs route only when both sides
    /// share a group.
    pub fn route_pair(&self, src: &str, tgt: &str) -> Result<GroupId> {
        match (src == ENGLISH, tgt == ENGLISH) {
            (true, true) => Err(Error::Routing(
                "en->en has no language-specific module".into(),
            )),
            (true, false) => self.route(tgt, Direction::FromEn),
            (false, true) => self.route(src, Direction::IntoEn),
            (false, false) => {
                let a = self.route(src, Direction::IntoEn)?;
                let b = self.route(tgt, Direction::FromEn)?;
                if a == b {
                    Ok(a)
                } else {
                    Err(Error::Routing(format!(
                        "{src}->{tgt} spans groups {a} and {b}"
                    )))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_config_shape() {
        let m = GroupMap::default_map();
        assert_eq!(m.len(), 8);
        for id in m.group_ids() {
            assert!(m.members(id).unwrap().iter().any(|c| c == "en"));
        }
        assert_eq!(m.languages().len(), 49);
        let g8: Vec<&str> = m.members(8).unwrap().iter().map(String::as_str).collect();
        assert_eq!(g8, ["ar", "az", "fa", "he", "kk", "ky", "tr", "uz", "en"]);
    }

    #[test]
    fn lookups() {
        let m = GroupMap::default_map();
        assert_eq!(m.group_of("gu").unwrap(), 7);
        assert_eq!(m.group_of("fr").unwrap(), 4);
        assert!(matches!(m.group_of("en"), Err(Error::Lookup(msg)) if msg.contains("route")));
        assert!(matches!(m.group_of("xx"), Err(Error::Lookup(_))));
        assert_eq!(m.route("ja", Direction::IntoEn).unwrap(), 6);
        assert_eq!(m.route_pair("en", "de").unwrap(), 1);
        assert_eq!(m.route_pair("de", "en").unwrap(), 1);
        assert!(matches!(
            m.route("xx", Direction::FromEn),
            Err(Error::Routing(_))
        ));
        assert!(matches!(m.route_pair("de", "ja"), Err(Error::Routing(_))));
        assert_eq!(
            m.info("az").unwrap().script.as_deref(),
            Some("Arabic/Latin")
        );
    }

    #[test]
    fn validation_errors() {
        let dup = "group 1: de, en\ngroup 2: de, fr, en\n";
        match GroupMap::load(dup) {
            Err(Error::Validation(msg)) => {
                assert!(
                    msg.contains("\"de\"") && msg.contains('1') && msg.contains('2'),
                    "{msg}"
                )
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            GroupMap::load("group 1: de, fr\n"),
            Err(Error::Validation(msg)) if msg.contains("\"en\"")
        ));
        assert!(GroupMap::load("group 1:\n").is_err());
        assert!(GroupMap::load("group 1: en\n").is_err());
        assert!(GroupMap::load("de, en\n").is_err());
        assert!(GroupMap::load("group x: de, en\n").is_err());
        assert!(GroupMap::load("group 1: de, en\nlang fr: script=Latin\n").is_err());
    }

    #[test]
    fn minimal_and_continuation_lines() {
        let m = GroupMap::load("group 1: en, de\n").unwrap();
        assert_eq!(m.len(), 1);
        let m = GroupMap::load("group 3: ru,\n  uk, en\n").unwrap();
        assert_eq!(m.members(3).unwrap(), ["ru", "uk", "en"]);
    }

    #[test]
    fn default_round_trips() {
        let m = GroupMap::default_map();
        assert_eq!(GroupMap::load(&m.serialize()).unwrap(), m);
        let t = GroupMap::toy();
        assert_eq!(GroupMap::load(&t.serialize()).unwrap(), t);
    }

    fn code_strategy() -> impl Strategy<Value = String> {
        "[a-df-z][a-z]".prop_map(String::from)
    }

    proptest! {
        #[test]
        fn random_maps_round_trip(codes in prop::collection::btree_set(code_strategy(), 1..30), ngroups in 1usize..6) {
            let codes: Vec<String> = codes.into_iter().collect();
            let mut text = String::new();
            let chunk = codes.len().div_ceil(ngroups);
            for (i, part) in codes.chunks(chunk).enumerate() {
                text.push_str(&format!("group {}: {}, en\n", i + 1, part.join(", ")));
            }
            let m = GroupMap::load(&text).unwrap();
            prop_assert_eq!(GroupMap::load(&m.serialize()).unwrap(), m);
        }
    }
}
