use xvqa_nn::Tensor;

use super::ModelConfig;
use crate::synthdata::{QType, Question, VisualFeatures, Vocabulary, SPATIAL_DIM};
use crate::{CoreError, Result};

/// How an example's visual input has been rewritten, if at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VisualMode {
    Original,
    Zeroed,
    Gaussian,
}

/// One question in one language, paired with its scene's visual input.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub qid: String,
    pub language: String,
    pub qtype: QType,
    /// Question body (cue included, no qtype prefix).
    pub tokens: Vec<u32>,
    pub features: Tensor,
    pub spatial: Tensor,
    pub count: usize,
    pub answer: usize,
    /// Text region replaced by the single source '?'.
    pub text_removed: bool,
    pub visual_mode: VisualMode,
}

impl Example {
    pub fn from_question(q: &Question, language: &str, visual: &VisualFeatures) -> Result<Example> {
        let tokens = q
            .renderings
            .get(language)
            .ok_or_else(|| CoreError::Evaluation(format!("question {} has no '{language}' rendering", q.qid)))?;
        Ok(Example {
            qid: q.qid.clone(),
            language: language.to_string(),
            qtype: q.qtype,
            tokens: tokens.clone(),
            features: visual.features.clone(),
            spatial: visual.spatial.clone(),
            count: visual.count,
            answer: q.answer,
            text_removed: false,
            visual_mode: VisualMode::Original,
        })
    }

    /// Keeps only a single '?' as text.
    pub fn remove_text(&mut self) {
        self.tokens = vec![Vocabulary::question_mark()];
        self.text_removed = true;
    }

    /// Zeroes object features and spatial vectors; the count is kept.
    pub fn zero_visual(&mut self) {
        self.features.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self.spatial.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self.visual_mode = VisualMode::Zeroed;
    }
}

/// Input rewrite applied while encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputAblation {
    None,
    /// Text region becomes the single source '?'.
    TextOnlyQuestionMark,
    /// Object feature and spatial vectors become exact zeros.
    ZeroVisual,
}

/// Padded, batched model input.
///
/// Each sequence is `[CLS] text [SEP]` padded to `text_len`, then one count
/// token, then `n_obj` object slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs {
    pub batch: usize,
    pub text_len: usize,
    pub n_obj: usize,
    /// `[batch · text_len]` token ids.
    pub tokens: Vec<usize>,
    pub text_valid: Vec<bool>,
    /// `[batch · n_obj · d_v]`
    pub features: Vec<f64>,
    /// `[batch · n_obj · SPATIAL_DIM]`
    pub spatial: Vec<f64>,
    pub obj_valid: Vec<bool>,
    pub counts: Vec<usize>,
}

impl ModelInputs {
    pub fn seq_len(&self) -> usize {
        self.text_len + 1 + self.n_obj
    }

    /// Row of sequence `b`'s [CLS] in the flattened `[batch · seq_len]` layout.
    pub fn cls_row(&self, b: usize) -> usize {
        b * self.seq_len()
    }

    pub fn key_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.batch * self.seq_len());
        for b in 0..self.batch {
            m.extend_from_slice(&self.text_valid[b * self.text_len..(b + 1) * self.text_len]);
            m.push(true);
            m.extend_from_slice(&self.obj_valid[b * self.n_obj..(b + 1) * self.n_obj]);
        }
        m
    }

    /// Builds inputs from raw text regions and visual tensors.
    pub fn from_parts(
        texts: &[&[u32]],
        visuals: &[(&Tensor, &Tensor, usize)],
        cfg: &ModelConfig,
    ) -> Result<ModelInputs> {
        if texts.is_empty() || texts.len() != visuals.len() {
            return Err(CoreError::Input(format!("{} texts for {} visual inputs", texts.len(), visuals.len())));
        }
        let batch = texts.len();
        let longest = texts.iter().map(|t| t.len()).max().unwrap_or(0);
        if longest > cfg.max_text_len {
            return Err(CoreError::Input(format!(
                "text of {longest} tokens exceeds max_text_len {}",
                cfg.max_text_len
            )));
        }
        let n_obj = visuals.iter().map(|v| v.0.rows()).max().unwrap_or(0);
        if n_obj > cfg.max_objects {
            return Err(CoreError::Input(format!("{n_obj} objects exceed max_objects {}", cfg.max_objects)));
        }
        let text_len = longest + 2;
        let mut inp = ModelInputs {
            batch,
            text_len,
            n_obj,
            tokens: vec![Vocabulary::PAD as usize; batch * text_len],
            text_valid: vec![false; batch * text_len],
            features: vec![0.0; batch * n_obj * cfg.d_v],
            spatial: vec![0.0; batch * n_obj * SPATIAL_DIM],
            obj_valid: vec![false; batch * n_obj],
            counts: Vec::with_capacity(batch),
        };
        for (b, (text, &(feat, spat, count))) in texts.iter().zip(visuals).enumerate() {
            if let Some(&bad) = text.iter().find(|&&t| t as usize >= cfg.vocab_size) {
                return Err(CoreError::Input(format!("token {bad} outside vocabulary of {}", cfg.vocab_size)));
            }
            let row = &mut inp.tokens[b * text_len..(b + 1) * text_len];
            row[0] = Vocabulary::CLS as usize;
            for (i, &t) in text.iter().enumerate() {
                row[i + 1] = t as usize;
            }
            row[text.len() + 1] = Vocabulary::SEP as usize;
            inp.text_valid[b * text_len..b * text_len + text.len() + 2].fill(true);
            let n = feat.rows();
            if feat.cols() != cfg.d_v || spat.cols() != SPATIAL_DIM || spat.rows() != n {
                return Err(CoreError::Input(format!(
                    "visual tensors {:?} / {:?} do not match d_v={}",
                    feat.shape(),
                    spat.shape(),
                    cfg.d_v
                )));
            }
            if count > cfg.max_objects {
                return Err(CoreError::Input(format!("object count {count} exceeds max_objects {}", cfg.max_objects)));
            }
            let fo = b * n_obj * cfg.d_v;
            inp.features[fo..fo + n * cfg.d_v].copy_from_slice(feat.data());
            let so = b * n_obj * SPATIAL_DIM;
            inp.spatial[so..so + n * SPATIAL_DIM].copy_from_slice(spat.data());
            inp.obj_valid[b * n_obj..b * n_obj + n].fill(true);
            inp.counts.push(count);
        }
        Ok(inp)
    }
}

/// Text region for one example: optional "[qtype] :" prefix, then the body.
/// Text-removed examples carry only the '?' and never a prefix.
fn text_region(ex: &Example, with_qtype: bool, ablation: InputAblation) -> Vec<u32> {
    if ex.text_removed || ablation == InputAblation::TextOnlyQuestionMark {
        return vec![Vocabulary::question_mark()];
    }
    let mut t = Vec::with_capacity(ex.tokens.len() + 2);
    if with_qtype {
        t.extend([Vocabulary::qtype_token(ex.qtype), Vocabulary::COLON]);
    }
    t.extend_from_slice(&ex.tokens);
    t
}

pub fn encode_batch(
    examples: &[&Example],
    cfg: &ModelConfig,
    with_qtype: bool,
    ablation: InputAblation,
) -> Result<ModelInputs> {
    let texts: Vec<Vec<u32>> = examples.iter().map(|e| text_region(e, with_qtype, ablation)).collect();
    let text_refs: Vec<&[u32]> = texts.iter().map(Vec::as_slice).collect();
    let zeroed: Vec<(Tensor, Tensor)> = if ablation == InputAblation::ZeroVisual {
        examples.iter().map(|e| (Tensor::zeros(e.features.shape()), Tensor::zeros(e.spatial.shape()))).collect()
    } else {
        Vec::new()
    };
    let visuals: Vec<(&Tensor, &Tensor, usize)> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| match zeroed.get(i) {
            Some((f, s)) => (f, s, e.count),
            None => (&e.features, &e.spatial, e.count),
        })
        .collect();
    ModelInputs::from_parts(&text_refs, &visuals, cfg)
}
