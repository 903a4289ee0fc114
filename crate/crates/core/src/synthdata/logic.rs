use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::answers::{class_of, yes_no};
use super::{Attr, Object, QType, Scene};

/// Conjunction of attribute constraints; unset slots match anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Filter(pub [Option<u8>; 4]);

impl Filter {
    pub fn get(&self, attr: Attr) -> Option<u8> {
        self.0[attr.index()]
    }

    pub fn with(mut self, attr: Attr, value: u8) -> Self {
        self.0[attr.index()] = Some(value);
        self
    }

    /// Restricts `obj` to the given attributes.
    pub fn of_object(obj: &Object, attrs: &[Attr]) -> Self {
        attrs.iter().fold(Filter::default(), |f, &a| f.with(a, obj.get(a)))
    }

    pub fn matches(&self, obj: &Object) -> bool {
        Attr::ALL.iter().all(|&a| self.get(a).is_none_or(|v| obj.get(a) == v))
    }

    pub fn set_attrs(&self) -> impl Iterator<Item = Attr> + '_ {
        Attr::ALL.into_iter().filter(|&a| self.get(a).is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LogicalForm {
    /// Is there an object matching `filter`?
    Exist {
        filter: Filter,
    },
    /// Does the unique `target` have `attr == value`?
    VerifyAttr {
        target: Filter,
        attr: Attr,
        value: u8,
    },
    Or {
        a: Filter,
        b: Filter,
    },
    And {
        a: Filter,
        b: Filter,
    },
    /// Which of the two unique referents is larger (or smaller)? Answered by shape.
    Compare {
        a: Filter,
        b: Filter,
        larger: bool,
    },
    /// What is `attr` of the unique `target`?
    Query {
        target: Filter,
        attr: Attr,
    },
    /// Which of the two offered values does `target` have for `attr`?
    Choose {
        target: Filter,
        attr: Attr,
        options: [u8; 2],
    },
}

impl LogicalForm {
    pub fn qtype(&self) -> QType {
        match self {
            LogicalForm::Exist { .. } | LogicalForm::VerifyAttr { .. } => QType::Verify,
            LogicalForm::Or { .. } | LogicalForm::And { .. } => QType::Logical,
            LogicalForm::Compare { .. } => QType::Compare,
            LogicalForm::Query { .. } => QType::Query,
            LogicalForm::Choose { .. } => QType::Choose,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnswerError {
    #[error("referent matches {0} objects, expected exactly one")]
    NotUnique(usize),
    #[error("comparison tie")]
    Tie,
    #[error("malformed logical form: {0}")]
    Malformed(&'static str),
}

fn exists(scene: &Scene, f: &Filter) -> bool {
    scene.objects.iter().any(|o| f.matches(o))
}

fn unique<'s>(scene: &'s Scene, f: &Filter) -> Result<&'s Object, AnswerError> {
    let mut it = scene.objects.iter().filter(|o| f.matches(o));
    match (it.next(), it.count()) {
        (Some(o), 0) => Ok(o),
        (None, _) => Err(AnswerError::NotUnique(0)),
        (Some(_), rest) => Err(AnswerError::NotUnique(rest + 1)),
    }
}

/// Gold answer class of `form` on `scene`.
pub fn derive_answer(scene: &Scene, form: &LogicalForm) -> Result<usize, AnswerError> {
    Ok(match form {
        LogicalForm::Exist { filter } => yes_no(exists(scene, filter)),
        LogicalForm::VerifyAttr { target, attr, value } => yes_no(unique(scene, target)?.get(*attr) == *value),
        LogicalForm::Or { a, b } => yes_no(exists(scene, a) || exists(scene, b)),
        LogicalForm::And { a, b } => yes_no(exists(scene, a) && exists(scene, b)),
        LogicalForm::Compare { a, b, larger } => {
            let (oa, ob) = (unique(scene, a)?, unique(scene, b)?);
            if oa.size == ob.size {
                return Err(AnswerError::Tie);
            }
            let a_wins = (oa.size > ob.size) == *larger;
            class_of(Attr::Shape, if a_wins { oa.shape } else { ob.shape })
        }
        LogicalForm::Query { target, attr } => class_of(*attr, unique(scene, target)?.get(*attr)),
        LogicalForm::Choose { target, attr, options } => {
            if options[0] == options[1] {
                return Err(AnswerError::Malformed("choose options coincide"));
            }
            let v = unique(scene, target)?.get(*attr);
            if !options.contains(&v) {
                return Err(AnswerError::Malformed("choose options exclude the true value"));
            }
            class_of(*attr, v)
        }
    })
}
