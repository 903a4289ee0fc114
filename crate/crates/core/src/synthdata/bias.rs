use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use xvqa_nn::rng::stream;

use super::{QType, Question, Vocabulary};
use crate::{CoreError, Result};

/// Every question of a listed type carries a cue token. With probability
/// `beta` the cue names the gold answer; otherwise it names an answer drawn
/// uniformly from the type's answer set, independently of the gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSpec {
    pub beta: f64,
    pub qtypes: Vec<QType>,
}

impl BiasSpec {
    pub fn validate(specs: &[BiasSpec]) -> Result<()> {
        let mut seen = Vec::new();
        for s in specs {
            if !(0.0..=1.0).contains(&s.beta) {
                return Err(CoreError::Config(format!("bias beta {} outside [0, 1]", s.beta)));
            }
            for q in &s.qtypes {
                if seen.contains(q) {
                    return Err(CoreError::Config(format!("qtype {q} listed in two bias specs")));
                }
                seen.push(*q);
            }
        }
        Ok(())
    }
}

/// Sets the cue of every targeted question and re-renders its existing
/// renderings so the cue appears in all of them.
pub fn inject_text_bias(questions: &mut [Question], vocab: &Vocabulary, specs: &[BiasSpec], seed: u64) -> Result<()> {
    BiasSpec::validate(specs)?;
    for q in questions.iter_mut() {
        let Some(spec) = specs.iter().find(|s| s.qtypes.contains(&q.qtype)) else {
            continue;
        };
        let mut rng = stream(seed, &format!("cue/{}", q.qid), 0);
        q.cue = Some(if rng.random_bool(spec.beta) {
            q.answer
        } else {
            *q.qtype.answer_set().choose(&mut rng).expect("non-empty answer set")
        });
        let langs: Vec<String> = q.renderings.keys().cloned().collect();
        for lang in langs {
            let body = vocab.render_body(&q.form, q.cue, &lang)?;
            q.renderings.insert(lang, body);
        }
    }
    Ok(())
}

/// Accuracy of the best rule that maps the cue alone to an answer, over
/// cue-carrying questions of `qtype`. `None` if there are none.
pub fn cue_rule_accuracy(questions: &[Question], qtype: QType) -> Option<f64> {
    let mut table: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut total = 0usize;
    for q in questions.iter().filter(|q| q.qtype == qtype) {
        if let Some(c) = q.cue {
            *table.entry(c).or_default().entry(q.answer).or_default() += 1;
            total += 1;
        }
    }
    if total == 0 {
        return None;
    }
    let best: usize = table.values().map(|by_answer| by_answer.values().max().copied().unwrap_or(0)).sum();
    Some(best as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_question, generate_scene, AttrWeights, SceneConfig};
    use super::*;

    fn questions(n: u64, qtype: QType) -> Vec<Question> {
        let w = AttrWeights::default();
        (0..n)
            .filter_map(|id| {
                let s = generate_scene(4, id, &SceneConfig::default()).unwrap();
                let mut q = generate_question(&s, qtype, id, &w).ok()?;
                q.qid = format!("q{id}");
                q.renderings.insert("src".into(), Vec::new());
                Some(q)
            })
            .collect()
    }

    #[test]
    fn full_bias_is_perfectly_predictive() {
        let v = Vocabulary::build(&[], 0).unwrap();
        let mut qs = questions(500, QType::Verify);
        inject_text_bias(&mut qs, &v, &[BiasSpec { beta: 1.0, qtypes: vec![QType::Verify] }], 1).unwrap();
        assert!(qs.iter().all(|q| q.cue == Some(q.answer)));
        assert_eq!(cue_rule_accuracy(&qs, QType::Verify), Some(1.0));
        let body = &qs[0].renderings["src"];
        assert_eq!(*body.last().unwrap(), Vocabulary::cue_token(qs[0].answer));
    }

    #[test]
    fn partial_bias_matches_counting_oracle() {
        let v = Vocabulary::build(&[], 0).unwrap();
        let mut qs = questions(4000, QType::Logical);
        inject_text_bias(&mut qs, &v, &[BiasSpec { beta: 0.5, qtypes: vec![QType::Logical] }], 2).unwrap();
        let acc = cue_rule_accuracy(&qs, QType::Logical).unwrap();
        assert!((acc - (0.5 + 0.5 * 0.5)).abs() < 0.02, "cue rule accuracy {acc}");
    }

    #[test]
    fn zero_bias_carries_no_information() {
        let v = Vocabulary::build(&[], 0).unwrap();
        let mut qs = questions(4000, QType::Verify);
        inject_text_bias(&mut qs, &v, &[BiasSpec { beta: 0.0, qtypes: vec![QType::Verify] }], 3).unwrap();
        // empirical mutual information between cue and answer, in nats
        let n = qs.len() as f64;
        let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut pc: BTreeMap<usize, f64> = BTreeMap::new();
        let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
        for q in &qs {
            let c = q.cue.unwrap();
            *joint.entry((c, q.answer)).or_default() += 1.0 / n;
            *pc.entry(c).or_default() += 1.0 / n;
            *pa.entry(q.answer).or_default() += 1.0 / n;
        }
        let mi: f64 = joint.iter().map(|(&(c, a), &p)| p * (p / (pc[&c] * pa[&a])).ln()).sum();
        assert!(mi < 0.005, "mutual information {mi}");
    }

    #[test]
    fn untargeted_questions_have_no_cue() {
        let v = Vocabulary::build(&[], 0).unwrap();
        let mut qs = questions(50, QType::Query);
        inject_text_bias(&mut qs, &v, &[BiasSpec { beta: 1.0, qtypes: vec![QType::Verify] }], 1).unwrap();
        assert!(qs.iter().all(|q| q.cue.is_none()));
        let twice =
            [BiasSpec { beta: 1.0, qtypes: vec![QType::Verify] }, BiasSpec { beta: 0.0, qtypes: vec![QType::Verify] }];
        assert!(BiasSpec::validate(&twice).is_err());
    }
}
