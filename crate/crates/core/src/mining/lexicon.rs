use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};

const BUNDLED: &str = include_str!("../../data/lexicon.txt");

/// Word lists driving the rule-based noun extractor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    pub stopwords: BTreeSet<String>,
    pub verbs: BTreeSet<String>,
    pub adjectives: BTreeSet<String>,
    /// Generic words describing the picture itself.
    pub scene: BTreeSet<String>,
    /// Singular words that end in `s`.
    pub invariant: BTreeSet<String>,
    /// Plural to singular.
    pub irregular: BTreeMap<String, String>,
}

impl Lexicon {
    pub fn bundled() -> &'static Lexicon {
        static LEX: OnceLock<Lexicon> = OnceLock::new();
        LEX.get_or_init(|| Lexicon::parse(BUNDLED).expect("bundled lexicon parses"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Lexicon::default();
        let mut section = None::<String>;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.to_string());
                continue;
            }
            let word = line.to_lowercase();
            let set = match section.as_deref() {
                Some("stopwords") => &mut lex.stopwords,
                Some("verbs") => &mut lex.verbs,
                Some("adjectives") => &mut lex.adjectives,
                Some("scene") => &mut lex.scene,
                Some("invariant") => &mut lex.invariant,
                Some("irregular") => {
                    let mut parts = word.split_whitespace();
                    match (parts.next(), parts.next(), parts.next()) {
                        (Some(p), Some(s), None) => {
                            lex.irregular.insert(p.to_string(), s.to_string());
                            continue;
                        }
                        _ => {
                            return Err(Error::InvalidArgument(format!(
                                "lexicon line {}: expected 'plural singular'",
                                no + 1
                            )))
                        }
                    }
                }
                Some(other) => {
                    return Err(Error::InvalidArgument(format!(
                        "lexicon line {}: unknown section [{other}]",
                        no + 1
                    )))
                }
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "lexicon line {}: word before any section",
                        no + 1
                    )))
                }
            };
            set.insert(word);
        }
        Ok(lex)
    }

    /// Adds every entry of `other`.
    pub fn extend(&mut self, other: &Lexicon) {
        self.stopwords.extend(other.stopwords.iter().cloned());
        self.verbs.extend(other.verbs.iter().cloned());
        self.adjectives.extend(other.adjectives.iter().cloned());
        self.scene.extend(other.scene.iter().cloned());
        self.invariant.extend(other.invariant.iter().cloned());
        self.irregular.extend(other.irregular.iter().map(|(k, v)| (k.clone(), v.clone())));
    }

    fn is_function_word(&self, w: &str) -> bool {
        self.stopwords.contains(w) || self.verbs.contains(w) || self.adjectives.contains(w)
    }

    /// Singular form of a lowercase word.
    pub fn singularize(&self, w: &str) -> String {
        if let Some(s) = self.irregular.get(w) {
            return s.clone();
        }
        if self.invariant.contains(w) || w.len() <= 3 {
            return w.to_string();
        }
        if let Some(stem) = w.strip_suffix("ies") {
            if stem.len() >= 2 {
                return format!("{stem}y");
            }
        }
        for suffix in ["sses", "xes", "ches", "shes", "zzes", "oes"] {
            if w.ends_with(suffix) {
                return w[..w.len() - 2].to_string();
            }
        }
        if w.ends_with("ss") || w.ends_with("us") || w.ends_with("is") {
            return w.to_string();
        }
        match w.strip_suffix('s') {
            Some(stem) => stem.to_string(),
            None => w.to_string(),
        }
    }

    /// Nouns of `text`: lowercase alphabetic tokens surviving the word
    /// lists, singularized, deduplicated in first-seen order.
    pub fn extract_nouns(&self, text: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for token in text.split(|c: char| !c.is_alphanumeric() && c != '\'') {
            let lower = token.trim_matches('\'').to_lowercase();
            let word = lower.strip_suffix("'s").unwrap_or(&lower);
            if word.len() < 2 || !word.chars().all(|c| c.is_alphabetic()) {
                continue;
            }
            if self.is_function_word(word) {
                continue;
            }
            let noun = self.singularize(word);
            if self.is_function_word(&noun) || self.scene.contains(&noun) {
                continue;
            }
            if !out.contains(&noun) {
                out.push(noun);
            }
        }
        out
    }
}

/// Nouns of `text` under the bundled lexicon.
pub fn extract_nouns(text: &str) -> Vec<String> {
    Lexicon::bundled().extract_nouns(text)
}
