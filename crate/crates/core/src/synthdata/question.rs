use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xvqa_nn::rng::{stream, StreamRng};

use super::answers::yes_no;
use super::{derive_answer, Attr, Filter, LogicalForm, QType, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub qid: String,
    pub scene_id: u64,
    pub qtype: QType,
    pub form: LogicalForm,
    pub answer: usize,
    /// Answer class encoded by the appended cue token, if any.
    pub cue: Option<usize>,
    /// Language name → question body token ids (cue included, qtype prefix not).
    pub renderings: BTreeMap<String, Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("scene {scene_id} is inadmissible for {qtype}: {reason}")]
pub struct Inadmissible {
    pub scene_id: u64,
    pub qtype: QType,
    pub reason: &'static str,
}

/// Sampling weights over attributes, indexed by `Attr::index()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttrWeights {
    pub verify: [f64; 4],
    pub query: [f64; 4],
    pub choose: [f64; 4],
}

impl Default for AttrWeights {
    fn default() -> Self {
        // order: size, color, material, shape
        Self { verify: [1.0, 1.0, 1.0, 1.0], query: [0.0, 0.5, 0.0, 0.5], choose: [1.0, 1.0, 1.0, 1.0] }
    }
}

impl AttrWeights {
    pub fn validate(&self) -> crate::Result<()> {
        for w in [&self.verify, &self.query, &self.choose] {
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(crate::CoreError::Config(format!("bad attribute weights {w:?}")));
            }
        }
        Ok(())
    }
}

fn pick_attr(rng: &mut StreamRng, w: &[f64; 4]) -> Attr {
    let d = WeightedIndex::new(w).expect("validated weights");
    Attr::ALL[d.sample(rng)]
}

/// Attribute subsets that single out object `idx`, restricted to
/// attributes other than `exclude`. A descriptor always names the shape
/// unless the shape is excluded (then the noun is "thing").
pub(super) fn unique_descriptors(scene: &Scene, idx: usize, exclude: Option<Attr>) -> Vec<Filter> {
    let obj = &scene.objects[idx];
    let shape_allowed = exclude != Some(Attr::Shape);
    let mut out = Vec::new();
    for mask in 1u8..16 {
        let attrs: Vec<Attr> = Attr::ALL.into_iter().filter(|a| mask & (1 << a.index()) != 0).collect();
        if attrs.iter().any(|&a| Some(a) == exclude) || (shape_allowed && !attrs.contains(&Attr::Shape)) {
            continue;
        }
        let f = Filter::of_object(obj, &attrs);
        if scene.objects.iter().filter(|o| f.matches(o)).count() == 1 {
            out.push(f);
        }
    }
    out
}

/// Prefers the shortest descriptor, occasionally a longer one.
pub(super) fn choose_descriptor(rng: &mut StreamRng, mut cands: Vec<Filter>) -> Option<Filter> {
    let len = |f: &Filter| f.set_attrs().count();
    cands.sort_by_key(len);
    let shortest = len(cands.first()?);
    let split = cands.iter().position(|f| len(f) > shortest).unwrap_or(cands.len());
    if split < cands.len() && rng.random_bool(0.3) {
        cands[split..].choose(rng).copied()
    } else {
        cands[..split].choose(rng).copied()
    }
}

pub(super) fn referable(scene: &Scene, rng: &mut StreamRng, exclude: Option<Attr>) -> Option<(usize, Filter)> {
    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    order.shuffle(rng);
    order.into_iter().find_map(|i| choose_descriptor(rng, unique_descriptors(scene, i, exclude)).map(|f| (i, f)))
}

pub(super) fn present_filter(scene: &Scene, rng: &mut StreamRng) -> Filter {
    let obj = scene.objects.choose(rng).expect("scene has objects");
    let mut f = Filter::default().with(Attr::Shape, obj.shape);
    for a in [Attr::Size, Attr::Color, Attr::Material] {
        if rng.random_bool(0.4) {
            f = f.with(a, obj.get(a));
        }
    }
    f
}

pub(super) fn absent_filter(scene: &Scene, rng: &mut StreamRng) -> Option<Filter> {
    for _ in 0..200 {
        let mut f = Filter::default().with(Attr::Shape, rng.random_range(0..Attr::Shape.cardinality()) as u8);
        for a in [Attr::Size, Attr::Color, Attr::Material] {
            if rng.random_bool(0.5) {
                f = f.with(a, rng.random_range(0..a.cardinality()) as u8);
            }
        }
        if !scene.objects.iter().any(|o| f.matches(o)) {
            return Some(f);
        }
    }
    None
}

fn exist_filter(scene: &Scene, rng: &mut StreamRng, want: bool) -> Option<Filter> {
    if want {
        Some(present_filter(scene, rng))
    } else {
        absent_filter(scene, rng)
    }
}

fn other_value(rng: &mut StreamRng, attr: Attr, v: u8) -> u8 {
    let d = rng.random_range(1..attr.cardinality()) as u8;
    (v + d) % attr.cardinality() as u8
}

fn gen_form(scene: &Scene, qtype: QType, rng: &mut StreamRng, w: &AttrWeights) -> Result<LogicalForm, &'static str> {
    match qtype {
        QType::Verify => {
            let want = rng.random_bool(0.5);
            if rng.random_bool(0.5) {
                let attr = pick_attr(rng, &w.verify);
                if let Some((i, target)) = referable(scene, rng, Some(attr)) {
                    let actual = scene.objects[i].get(attr);
                    let value = if want { actual } else { other_value(rng, attr, actual) };
                    return Ok(LogicalForm::VerifyAttr { target, attr, value });
                }
            }
            let filter = exist_filter(scene, rng, want).ok_or("no absent filter found")?;
            Ok(LogicalForm::Exist { filter })
        }
        QType::Logical => {
            let is_or = rng.random_bool(0.5);
            let want = rng.random_bool(0.5);
            // which of the two operands exist, consistent with the target answer
            let combos: &[(bool, bool)] = match (is_or, want) {
                (true, true) => &[(true, false), (false, true), (true, true)],
                (true, false) => &[(false, false)],
                (false, true) => &[(true, true)],
                (false, false) => &[(true, false), (false, true), (false, false)],
            };
            let &(ea, eb) = combos.choose(rng).expect("non-empty");
            for _ in 0..20 {
                let a = exist_filter(scene, rng, ea).ok_or("no absent filter found")?;
                let b = exist_filter(scene, rng, eb).ok_or("no absent filter found")?;
                if a != b {
                    return Ok(if is_or { LogicalForm::Or { a, b } } else { LogicalForm::And { a, b } });
                }
            }
            Err("could not find two distinct filters")
        }
        QType::Compare => {
            let n = scene.objects.len();
            let mut pairs = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    let (oi, oj) = (&scene.objects[i], &scene.objects[j]);
                    if i != j && oi.size != oj.size && oi.shape != oj.shape {
                        pairs.push((i, j));
                    }
                }
            }
            pairs.shuffle(rng);
            for (i, j) in pairs {
                let a = choose_descriptor(rng, unique_descriptors(scene, i, None));
                let b = choose_descriptor(rng, unique_descriptors(scene, j, None));
                if let (Some(a), Some(b)) = (a, b) {
                    return Ok(LogicalForm::Compare { a, b, larger: rng.random_bool(0.5) });
                }
            }
            Err("no referable size-distinct pair")
        }
        QType::Query => {
            let attr = pick_attr(rng, &w.query);
            let (_, target) = referable(scene, rng, Some(attr)).ok_or("no referable object")?;
            Ok(LogicalForm::Query { target, attr })
        }
        QType::Choose => {
            let attr = pick_attr(rng, &w.choose);
            let (i, target) = referable(scene, rng, Some(attr)).ok_or("no referable object")?;
            let actual = scene.objects[i].get(attr);
            let mut options = [actual, other_value(rng, attr, actual)];
            options.shuffle(rng);
            Ok(LogicalForm::Choose { target, attr, options })
        }
    }
}

/// Samples a question of `qtype` about `scene`. Deterministic in
/// `(scene, qtype, seed)`; the qid and renderings are left for the caller.
pub fn generate_question(
    scene: &Scene,
    qtype: QType,
    seed: u64,
    weights: &AttrWeights,
) -> Result<Question, Inadmissible> {
    let mut rng = stream(seed, &format!("question/{qtype}"), scene.scene_id);
    let inadmissible = |reason| Inadmissible { scene_id: scene.scene_id, qtype, reason };
    let form = gen_form(scene, qtype, &mut rng, weights).map_err(inadmissible)?;
    let answer = derive_answer(scene, &form).map_err(|_| inadmissible("generated form has no answer"))?;
    debug_assert_eq!(form.qtype(), qtype);
    if qtype == QType::Verify || qtype == QType::Logical {
        debug_assert!(answer == yes_no(true) || answer == yes_no(false));
    }
    Ok(Question {
        qid: String::new(),
        scene_id: scene.scene_id,
        qtype,
        form,
        answer,
        cue: None,
        renderings: BTreeMap::new(),
    })
}
