//! Seeded synthetic scenes, questions, languages and dataset splits.

mod bias;
mod dataset;
mod features;
mod language;
mod logic;
mod question;
mod scene;

pub use bias::{cue_rule_accuracy, inject_text_bias, BiasSpec};
pub use dataset::{
    build_corpus_and_splits, Caption, DataConfig, Dataset, DatasetSplits, ItmPair, ManifestRecord, PretrainCorpus,
    QtypeMix, SceneRecord, Split, MIN_FEWSHOT_SCENES,
};
pub use features::{featurize_scene, AttributeEmbeddings, VisualFeatures, SPATIAL_DIM};
pub use language::{
    caption_concepts, default_target_languages, question_concepts, CaptionKind, Chunk, Concept, LanguageConfig,
    LanguageSpec, Rendered, Vocabulary, WordOrder, CONCEPTS, SOURCE,
};
pub use logic::{derive_answer, AnswerError, Filter, LogicalForm};
pub use question::{generate_question, AttrWeights, Inadmissible, Question};
pub use scene::{generate_scene, Object, Scene, SceneConfig};

use serde::{Deserialize, Serialize};

pub const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "purple", "cyan", "gray", "brown"];
pub const SHAPES: [&str; 6] = ["cube", "sphere", "cylinder", "cone", "torus", "pyramid"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const MATERIALS: [&str; 2] = ["matte", "shiny"];

/// Object attribute slots, in the canonical noun-phrase order
/// (size, color, material, then the shape noun).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attr {
    Size,
    Color,
    Material,
    Shape,
}

impl Attr {
    pub const ALL: [Attr; 4] = [Attr::Size, Attr::Color, Attr::Material, Attr::Shape];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn cardinality(self) -> usize {
        self.values().len()
    }

    pub fn values(self) -> &'static [&'static str] {
        match self {
            Attr::Size => &SIZES,
            Attr::Color => &COLORS,
            Attr::Material => &MATERIALS,
            Attr::Shape => &SHAPES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attr::Size => "size",
            Attr::Color => "color",
            Attr::Material => "material",
            Attr::Shape => "shape",
        }
    }
}

/// The five structural question types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QType {
    Verify,
    Logical,
    Compare,
    Query,
    Choose,
}

impl QType {
    pub const ALL: [QType; 5] = [QType::Verify, QType::Logical, QType::Compare, QType::Query, QType::Choose];

    pub fn name(self) -> &'static str {
        match self {
            QType::Verify => "verify",
            QType::Logical => "logical",
            QType::Compare => "compare",
            QType::Query => "query",
            QType::Choose => "choose",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<QType> {
        QType::ALL.into_iter().find(|q| q.name() == s)
    }

    /// Answer classes a question of this type can have.
    pub fn answer_set(self) -> Vec<usize> {
        match self {
            QType::Verify | QType::Logical => vec![answers::YES, answers::NO],
            QType::Compare => (0..SHAPES.len()).map(|v| answers::class_of(Attr::Shape, v as u8)).collect(),
            QType::Query | QType::Choose => (2..answers::NUM_CLASSES).collect(),
        }
    }
}

impl std::fmt::Display for QType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Closed answer space: yes, no, then every attribute value.
pub mod answers {
    use super::{Attr, COLORS, MATERIALS, SHAPES, SIZES};

    pub const YES: usize = 0;
    pub const NO: usize = 1;
    pub const NUM_CLASSES: usize = 2 + COLORS.len() + SHAPES.len() + SIZES.len() + MATERIALS.len();

    fn offset(attr: Attr) -> usize {
        match attr {
            Attr::Color => 2,
            Attr::Shape => 2 + COLORS.len(),
            Attr::Size => 2 + COLORS.len() + SHAPES.len(),
            Attr::Material => 2 + COLORS.len() + SHAPES.len() + SIZES.len(),
        }
    }

    pub fn class_of(attr: Attr, value: u8) -> usize {
        offset(attr) + value as usize
    }

    pub fn yes_no(b: bool) -> usize {
        if b {
            YES
        } else {
            NO
        }
    }

    /// Inverse of [`class_of`]; `None` for yes/no.
    pub fn attr_value(class: usize) -> Option<(Attr, u8)> {
        Attr::ALL.into_iter().find_map(|a| {
            let o = offset(a);
            (class >= o && class < o + a.cardinality()).then(|| (a, (class - o) as u8))
        })
    }

    pub fn name(class: usize) -> &'static str {
        match class {
            YES => "yes",
            NO => "no",
            c => match attr_value(c) {
                Some((a, v)) => a.values()[v as usize],
                None => "?",
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_space_round_trips() {
        assert_eq!(answers::NUM_CLASSES, 20);
        let mut seen = std::collections::BTreeSet::new();
        for a in Attr::ALL {
            for v in 0..a.cardinality() as u8 {
                let c = answers::class_of(a, v);
                assert_eq!(answers::attr_value(c), Some((a, v)));
                assert_eq!(answers::name(c), a.values()[v as usize]);
                assert!(seen.insert(c));
            }
        }
        assert_eq!(seen.len(), 18);
        assert!(!seen.contains(&answers::YES) && !seen.contains(&answers::NO));
    }

    #[test]
    fn qtype_names_are_lowercase_tokens() {
        let names: Vec<_> = QType::ALL.iter().map(|q| q.name()).collect();
        assert_eq!(names, ["verify", "logical", "compare", "query", "choose"]);
        for q in QType::ALL {
            assert_eq!(QType::parse(q.name()), Some(q));
        }
    }
}
