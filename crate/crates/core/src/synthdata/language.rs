//! Synthetic languages: a concept inventory, per-language lexicons with a
//! controlled overlap with the source, and a word-order transform.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use xvqa_nn::rng::stream;

use super::{answers, Attr, Filter, LogicalForm, QType};
use crate::{CoreError, Result};

pub const SOURCE: &str = "src";

const FUNCTION_WORDS: [&str; 16] = [
    "is", "there", "a", "the", "what", "which", "or", "and", "larger", "smaller", "than", "thing", "of", "?", ",", ".",
];

/// Every concept that a lexicon maps to a surface token: attribute values
/// (size, color, material, shape order), attribute names, function words.
pub static CONCEPTS: std::sync::LazyLock<Vec<&'static str>> = std::sync::LazyLock::new(|| {
    let mut v: Vec<&'static str> = Vec::new();
    for a in Attr::ALL {
        v.extend_from_slice(a.values());
    }
    v.extend(Attr::ALL.iter().map(|a| a.name()));
    v.extend_from_slice(&FUNCTION_WORDS);
    v
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Concept(pub u16);

impl Concept {
    pub fn value(attr: Attr, v: u8) -> Concept {
        let base: usize = Attr::ALL[..attr.index()].iter().map(|a| a.cardinality()).sum();
        Concept((base + v as usize) as u16)
    }

    pub fn attr_name(attr: Attr) -> Concept {
        let values: usize = Attr::ALL.iter().map(|a| a.cardinality()).sum();
        Concept((values + attr.index()) as u16)
    }

    pub fn word(w: &str) -> Concept {
        let i = FUNCTION_WORDS.iter().position(|x| *x == w).expect("known function word");
        Concept((CONCEPTS.len() - FUNCTION_WORDS.len() + i) as u16)
    }

    pub fn text(self) -> &'static str {
        CONCEPTS[self.0 as usize]
    }
}

/// Order transform: permutation of the four noun-phrase slots
/// (size, color, material, noun) and optional reversal of the clause
/// chunks (final punctuation stays last).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordOrder {
    pub np_order: [u8; 4],
    pub reverse_clauses: bool,
}

impl WordOrder {
    pub const IDENTITY: WordOrder = WordOrder { np_order: [0, 1, 2, 3], reverse_clauses: false };

    fn validate(&self) -> Result<()> {
        let mut s = self.np_order;
        s.sort_unstable();
        if s != [0, 1, 2, 3] {
            return Err(CoreError::Config(format!("np_order {:?} is not a permutation", self.np_order)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageConfig {
    pub name: String,
    pub rho: f64,
    /// Fixed order transform; sampled from the dataset seed when absent.
    #[serde(default)]
    pub order: Option<WordOrder>,
}

pub fn default_target_languages() -> Vec<LanguageConfig> {
    [0.25, 0.25, 0.1, 0.1, 0.1, 0.0, 0.0]
        .iter()
        .enumerate()
        .map(|(i, &rho)| LanguageConfig { name: format!("t{}", i + 1), rho, order: None })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub name: String,
    pub rho: f64,
    /// Concept index → token id.
    pub lexicon: Vec<u32>,
    pub order: WordOrder,
}

/// Surface structure of a sentence before lexicalization.
#[derive(Debug, Clone, PartialEq)]
pub enum Chunk {
    Word(Concept),
    Np { det: Concept, slots: [Option<Concept>; 4] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub chunks: Vec<Chunk>,
    pub end: Concept,
}

fn np(det: &str, f: &Filter) -> Chunk {
    let slot = |a: Attr| f.get(a).map(|v| Concept::value(a, v));
    Chunk::Np {
        det: Concept::word(det),
        slots: [
            slot(Attr::Size),
            slot(Attr::Color),
            slot(Attr::Material),
            Some(slot(Attr::Shape).unwrap_or(Concept::word("thing"))),
        ],
    }
}

fn w(s: &str) -> Chunk {
    Chunk::Word(Concept::word(s))
}

fn val(a: Attr, v: u8) -> Chunk {
    Chunk::Word(Concept::value(a, v))
}

/// Question surface structure for a logical form.
pub fn question_concepts(form: &LogicalForm) -> Rendered {
    let chunks = match form {
        LogicalForm::Exist { filter } => vec![w("is"), w("there"), np("a", filter)],
        LogicalForm::VerifyAttr { target, attr, value } => vec![w("is"), np("the", target), val(*attr, *value)],
        LogicalForm::Or { a, b } => vec![w("is"), w("there"), np("a", a), w("or"), np("a", b)],
        LogicalForm::And { a, b } => vec![w("is"), w("there"), np("a", a), w("and"), np("a", b)],
        LogicalForm::Compare { a, b, larger } => vec![
            w("which"),
            w("is"),
            w(if *larger { "larger" } else { "smaller" }),
            w(","),
            np("the", a),
            w("or"),
            np("the", b),
        ],
        LogicalForm::Query { target, attr } => {
            vec![w("what"), Chunk::Word(Concept::attr_name(*attr)), w("is"), np("the", target)]
        }
        LogicalForm::Choose { target, attr, options } => {
            vec![w("is"), np("the", target), val(*attr, options[0]), w("or"), val(*attr, options[1])]
        }
    };
    Rendered { chunks, end: Concept::word("?") }
}

/// Declarative caption structures. `kind` selects the template.
pub fn caption_concepts(kind: CaptionKind) -> Rendered {
    let chunks = match kind {
        CaptionKind::ThereIs(f) => vec![w("there"), w("is"), np("a", &f)],
        CaptionKind::HasValue { target, attr, value } => vec![np("the", &target), w("is"), val(attr, value)],
        CaptionKind::AttrOf { target, attr, value } => {
            vec![
                w("the"),
                Chunk::Word(Concept::attr_name(attr)),
                w("of"),
                np("the", &target),
                w("is"),
                val(attr, value),
            ]
        }
        CaptionKind::Relative { a, b, larger } => {
            vec![np("the", &a), w("is"), w(if larger { "larger" } else { "smaller" }), w("than"), np("the", &b)]
        }
        CaptionKind::Pair { a, b, conj_and } => {
            vec![w("there"), w("is"), np("a", &a), w(if conj_and { "and" } else { "or" }), np("a", &b)]
        }
    };
    Rendered { chunks, end: Concept::word(".") }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CaptionKind {
    ThereIs(Filter),
    HasValue { target: Filter, attr: Attr, value: u8 },
    AttrOf { target: Filter, attr: Attr, value: u8 },
    Relative { a: Filter, b: Filter, larger: bool },
    Pair { a: Filter, b: Filter, conj_and: bool },
}

impl LanguageSpec {
    /// Applies the order transform and the lexicon.
    pub fn realize(&self, r: &Rendered) -> Result<Vec<u32>> {
        let lookup = |c: Concept| {
            self.lexicon
                .get(c.0 as usize)
                .copied()
                .ok_or_else(|| CoreError::Render(format!("{}: no lexicon entry for '{}'", self.name, c.text())))
        };
        let mut chunks: Vec<&Chunk> = r.chunks.iter().collect();
        if self.order.reverse_clauses {
            chunks.reverse();
        }
        let mut out = Vec::new();
        for ch in chunks {
            match ch {
                Chunk::Word(c) => out.push(lookup(*c)?),
                Chunk::Np { det, slots } => {
                    out.push(lookup(*det)?);
                    for &k in &self.order.np_order {
                        if let Some(c) = slots[k as usize] {
                            out.push(lookup(c)?);
                        }
                    }
                }
            }
        }
        out.push(lookup(r.end)?);
        Ok(out)
    }
}

/// Token layout: special tokens, qtype tokens, cue tokens, the source
/// lexicon, then each target language's private tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Index 0 is the source language.
    pub languages: Vec<LanguageSpec>,
    pub size: usize,
}

impl Vocabulary {
    pub const PAD: u32 = 0;
    pub const CLS: u32 = 1;
    pub const SEP: u32 = 2;
    pub const MASK: u32 = 3;
    pub const COLON: u32 = 4;
    const QTYPE_BASE: u32 = 5;
    const CUE_BASE: u32 = Self::QTYPE_BASE + 5;
    const CONCEPT_BASE: u32 = Self::CUE_BASE + answers::NUM_CLASSES as u32;

    pub fn qtype_token(q: QType) -> u32 {
        Self::QTYPE_BASE + q.index() as u32
    }

    pub fn cue_token(class: usize) -> u32 {
        Self::CUE_BASE + class as u32
    }

    pub fn cue_class(token: u32) -> Option<usize> {
        (Self::CUE_BASE..Self::CONCEPT_BASE).contains(&token).then(|| (token - Self::CUE_BASE) as usize)
    }

    /// First token id that belongs to a language lexicon.
    pub fn first_lexical_token() -> u32 {
        Self::CONCEPT_BASE
    }

    /// The source-language question mark, used as the sole text token in
    /// visual-only inputs.
    pub fn question_mark() -> u32 {
        Self::CONCEPT_BASE + Concept::word("?").0 as u32
    }

    pub fn build(targets: &[LanguageConfig], seed: u64) -> Result<Vocabulary> {
        let n = CONCEPTS.len();
        let source = LanguageSpec {
            name: SOURCE.into(),
            rho: 1.0,
            lexicon: (0..n as u32).map(|i| Self::CONCEPT_BASE + i).collect(),
            order: WordOrder::IDENTITY,
        };
        let mut next = Self::CONCEPT_BASE + n as u32;
        let mut languages = vec![source];
        for (i, cfg) in targets.iter().enumerate() {
            if !(0.0..=1.0).contains(&cfg.rho) {
                return Err(CoreError::Config(format!("{}: rho {} outside [0, 1]", cfg.name, cfg.rho)));
            }
            if cfg.name.is_empty() || languages.iter().any(|l| l.name == cfg.name) {
                return Err(CoreError::Config(format!("language name '{}' empty or duplicated", cfg.name)));
            }
            let mut rng = stream(seed, "lexicon", i as u64);
            let mut concepts: Vec<usize> = (0..n).collect();
            concepts.shuffle(&mut rng);
            let shared = (cfg.rho * n as f64).round() as usize;
            let mut lexicon = vec![0u32; n];
            for (rank, &c) in concepts.iter().enumerate() {
                lexicon[c] = if rank < shared {
                    languages[0].lexicon[c]
                } else {
                    next += 1;
                    next - 1
                };
            }
            let order = match cfg.order {
                Some(o) => {
                    o.validate()?;
                    o
                }
                None => {
                    let mut rng = stream(seed, "order", i as u64);
                    let mut np_order = [0u8, 1, 2, 3];
                    np_order.shuffle(&mut rng);
                    WordOrder { np_order, reverse_clauses: rng.random_bool(0.5) }
                }
            };
            languages.push(LanguageSpec { name: cfg.name.clone(), rho: cfg.rho, lexicon, order });
        }
        Ok(Vocabulary { languages, size: next as usize })
    }

    pub fn language(&self, name: &str) -> Result<&LanguageSpec> {
        self.languages
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| CoreError::Render(format!("unknown language '{name}'")))
    }

    pub fn language_names(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.name.clone()).collect()
    }

    /// Question body in `lang`, with the cue token appended when present.
    pub fn render_body(&self, form: &LogicalForm, cue: Option<usize>, lang: &str) -> Result<Vec<u32>> {
        let mut out = self.language(lang)?.realize(&question_concepts(form))?;
        out.extend(cue.map(Self::cue_token));
        Ok(out)
    }

    /// Full text for a question: optional "[qtype] :" prefix, always in the
    /// shared source form, then the body.
    pub fn render(&self, q: &super::Question, lang: &str, with_qtype: bool) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        if with_qtype {
            out.extend([Self::qtype_token(q.qtype), Self::COLON]);
        }
        out.extend(self.render_body(&q.form, q.cue, lang)?);
        Ok(out)
    }

    /// Human-readable form of a token id.
    pub fn token_text(&self, id: u32) -> String {
        match id {
            Self::PAD => "[PAD]".into(),
            Self::CLS => "[CLS]".into(),
            Self::SEP => "[SEP]".into(),
            Self::MASK => "[MASK]".into(),
            Self::COLON => ":".into(),
            _ if id < Self::CUE_BASE => QType::ALL[(id - Self::QTYPE_BASE) as usize].name().into(),
            _ if id < Self::CONCEPT_BASE => {
                format!("<cue:{}>", answers::name((id - Self::CUE_BASE) as usize))
            }
            _ => {
                for l in &self.languages {
                    if let Some(c) = l.lexicon.iter().position(|&t| t == id) {
                        return if l.name == SOURCE {
                            CONCEPTS[c].to_string()
                        } else {
                            format!("{}:{}", l.name, CONCEPTS[c])
                        };
                    }
                }
                format!("<unk:{id}>")
            }
        }
    }
}
