use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xvqa_nn::init::normal;
use xvqa_nn::ops::argmax;
use xvqa_nn::rng::{stream, StreamRng};
use xvqa_nn::{clip_global_norm, AdamW, AdamWConfig, Graph, NodeId, ParamSet, Tensor, TensorArchive};

use super::{linear_decay, FreezeMask};
use crate::model::{build_model, encoder, HeadKind, ModelConfig, ModelInputs, ParamGroup};
use crate::synthdata::{Dataset, Vocabulary};
use crate::{io_err, CoreError, Result};

const AUX_GROUP: &str = "pretrain_heads";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// When false the snapshot is the untouched initialization.
    pub enabled: bool,
    /// One epoch is one pass over the training image–text pairs.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub mask_prob: f64,
    /// Weight of the masked-token loss; the translation-pair loss shares it.
    pub mlm_weight: f64,
    pub itm_weight: f64,
    /// Masked-token objective on two renderings of the same caption joined
    /// into one sequence.
    pub translation: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            enabled: true,
            epochs: 8,
            lr: 1e-3,
            batch_size: 32,
            weight_decay: 0.01,
            clip_norm: 1.0,
            mask_prob: 0.15,
            mlm_weight: 1.0,
            itm_weight: 1.0,
            translation: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0
            && self.mask_prob > 0.0
            && self.mask_prob < 1.0
            && self.mlm_weight >= 0.0
            && self.itm_weight >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(CoreError::Config(format!("invalid pretraining config {self:?}")))
        }
    }
}

/// Encoder weights after pretraining. Holds every non-head model group plus
/// the auxiliary masked-token and matching heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedSnapshot {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub aux: ParamSet,
    pub corpus_fingerprint: String,
    pub seed: u64,
    pub pretrained: bool,
    /// Per-epoch losses; empty when loaded from disk or untrained.
    pub log: Vec<PretrainLogRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogRecord {
    pub epoch: usize,
    pub steps: u64,
    pub mlm_loss: f64,
    pub itm_loss: f64,
    /// Zero when the translation objective is off.
    pub tlm_loss: f64,
    pub grad_norm: f64,
}

#[derive(Serialize, Deserialize)]
struct SnapshotMeta {
    config: ModelConfig,
    corpus_fingerprint: String,
    seed: u64,
    pretrained: bool,
}

impl PretrainedSnapshot {
    /// Freshly initialized encoder, as used when pretraining is disabled.
    pub fn untrained(cfg: &ModelConfig, ds: &Dataset, seed: u64) -> Result<PretrainedSnapshot> {
        let full = build_model(cfg, HeadKind::Linear, seed)?;
        let mut params = ParamSet::new();
        for p in full.iter().filter(|p| ParamGroup::parse(&p.group).is_some_and(|g| !g.is_head())) {
            params.insert(p.name.clone(), p.group.clone(), p.tensor.clone())?;
        }
        Ok(PretrainedSnapshot {
            config: cfg.clone(),
            params,
            aux: aux_heads(cfg, seed)?,
            corpus_fingerprint: corpus_fingerprint(ds)?,
            seed,
            pretrained: false,
            log: Vec::new(),
        })
    }

    /// Writes `snapshot.json`, `snapshot.bin` and `snapshot_aux.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir.display()))?;
        let meta = SnapshotMeta {
            config: self.config.clone(),
            corpus_fingerprint: self.corpus_fingerprint.clone(),
            seed: self.seed,
            pretrained: self.pretrained,
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| CoreError::Serde(e.to_string()))?;
        fs::write(dir.join("snapshot.json"), text).map_err(io_err("snapshot.json"))?;
        TensorArchive::from_params(&self.params).save(&dir.join("snapshot.bin"))?;
        TensorArchive::from_params(&self.aux).save(&dir.join("snapshot_aux.bin"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<PretrainedSnapshot> {
        let path = dir.join("snapshot.json");
        let text = fs::read_to_string(&path).map_err(|_| CoreError::MissingArtifact(path.display().to_string()))?;
        let meta: SnapshotMeta = serde_json::from_str(&text).map_err(|e| CoreError::Serde(e.to_string()))?;
        Ok(PretrainedSnapshot {
            config: meta.config,
            params: TensorArchive::load(&dir.join("snapshot.bin"))?.into_params()?,
            aux: TensorArchive::load(&dir.join("snapshot_aux.bin"))?.into_params()?,
            corpus_fingerprint: meta.corpus_fingerprint,
            seed: meta.seed,
            pretrained: meta.pretrained,
            log: Vec::new(),
        })
    }
}

/// SHA-256 over the serialized pretraining corpus.
pub(crate) fn corpus_fingerprint(ds: &Dataset) -> Result<String> {
    let bytes = serde_json::to_vec(&ds.corpus).map_err(|e| CoreError::Serde(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn aux_heads(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    let d = cfg.d_model;
    let init =
        |name: &str, shape: &[usize], std: f64| normal(shape, std, &mut stream(seed, &format!("init/{name}"), 0));
    let mut ps = ParamSet::new();
    ps.insert("mlm.transform.w", AUX_GROUP, init("mlm.transform.w", &[d, d], 1.0 / (d as f64).sqrt()))?;
    ps.insert("mlm.transform.b", AUX_GROUP, Tensor::zeros(&[d]))?;
    ps.insert("mlm.ln.gain", AUX_GROUP, Tensor::full(&[d], 1.0))?;
    ps.insert("mlm.ln.bias", AUX_GROUP, Tensor::zeros(&[d]))?;
    ps.insert("mlm.bias", AUX_GROUP, Tensor::zeros(&[cfg.vocab_size]))?;
    ps.insert("itm.w", AUX_GROUP, init("itm.w", &[d, 1], 1.0 / (d as f64).sqrt()))?;
    ps.insert("itm.b", AUX_GROUP, Tensor::zeros(&[1]))?;
    Ok(ps)
}

fn merge(a: &ParamSet, b: &ParamSet) -> Result<ParamSet> {
    let mut out = a.clone();
    for p in b.iter() {
        out.insert(p.name.clone(), p.group.clone(), p.tensor.clone())?;
    }
    Ok(out)
}

fn split_aux(all: &ParamSet) -> Result<(ParamSet, ParamSet)> {
    let (mut model, mut aux) = (ParamSet::new(), ParamSet::new());
    for p in all.iter() {
        let dst = if p.group == AUX_GROUP { &mut aux } else { &mut model };
        dst.insert(p.name.clone(), p.group.clone(), p.tensor.clone())?;
    }
    Ok((model, aux))
}

/// A text sequence over one image, with masked positions relative to the
/// start of the text region.
struct Item {
    text: Vec<u32>,
    scene: u64,
    masked: Vec<(usize, usize)>,
}

/// Picks roughly `prob` of the non-[SEP] positions (at least one) and
/// corrupts them: 80% [MASK], 10% random lexical token, 10% unchanged.
fn mask_tokens(text: &[u32], prob: f64, vocab_size: usize, rng: &mut StreamRng) -> (Vec<u32>, Vec<(usize, usize)>) {
    let eligible: Vec<usize> = (0..text.len()).filter(|&i| text[i] != Vocabulary::SEP).collect();
    let mut chosen: Vec<usize> = eligible.iter().copied().filter(|_| rng.random_bool(prob)).collect();
    if chosen.is_empty() && !eligible.is_empty() {
        chosen.push(eligible[rng.random_range(0..eligible.len())]);
    }
    let mut out = text.to_vec();
    let lexical = Vocabulary::first_lexical_token()..vocab_size as u32;
    for &i in &chosen {
        let r: f64 = rng.random();
        if r < 0.8 {
            out[i] = Vocabulary::MASK;
        } else if r < 0.9 {
            out[i] = rng.random_range(lexical.clone());
        }
    }
    (out, chosen.into_iter().map(|i| (i, text[i] as usize)).collect())
}

fn inputs_for(items: &[&[u32]], scenes: &[u64], ds: &Dataset, cfg: &ModelConfig) -> Result<ModelInputs> {
    let visuals =
        scenes.iter().map(|&s| ds.visual(s).map(|v| (&v.features, &v.spatial, v.count))).collect::<Result<Vec<_>>>()?;
    ModelInputs::from_parts(items, &visuals, cfg)
}

/// Masked-token logits `[n_masked, vocab]` and their targets.
fn mlm_logits(g: &mut Graph<'_>, cfg: &ModelConfig, items: &[Item], ds: &Dataset) -> Result<(NodeId, Vec<usize>)> {
    let texts: Vec<&[u32]> = items.iter().map(|i| i.text.as_slice()).collect();
    let scenes: Vec<u64> = items.iter().map(|i| i.scene).collect();
    let inp = inputs_for(&texts, &scenes, ds, cfg)?;
    let hidden = encoder(g, cfg, &inp)?;
    let l = inp.seq_len();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, it) in items.iter().enumerate() {
        for &(pos, tgt) in &it.masked {
            rows.push(b * l + 1 + pos);
            targets.push(tgt);
        }
    }
    let h = g.gather_rows(hidden, &rows)?;
    let (w, b) = (g.param("mlm.transform.w")?, g.param("mlm.transform.b")?);
    let h = g.linear(h, w, b)?;
    let h = g.gelu(h)?;
    let (gain, bias) = (g.param("mlm.ln.gain")?, g.param("mlm.ln.bias")?);
    let h = g.layer_norm(h, gain, bias)?;
    let table = g.param("text.token")?;
    let logits = g.matmul_bt(h, table)?;
    let out_b = g.param("mlm.bias")?;
    Ok((g.add_bias(logits, out_b)?, targets))
}

/// Matching logits `[batch, 1]` read from [CLS].
fn itm_logits(g: &mut Graph<'_>, cfg: &ModelConfig, texts: &[&[u32]], scenes: &[u64], ds: &Dataset) -> Result<NodeId> {
    let inp = inputs_for(texts, scenes, ds, cfg)?;
    let hidden = encoder(g, cfg, &inp)?;
    let cls: Vec<usize> = (0..inp.batch).map(|b| inp.cls_row(b)).collect();
    let pooled = g.gather_rows(hidden, &cls)?;
    let (w, b) = (g.param("itm.w")?, g.param("itm.b")?);
    Ok(g.linear(pooled, w, b)?)
}

/// Joint masked-token + image–text matching pretraining on the dataset's
/// parallel caption corpus, with an optional translation-pair objective.
pub fn pretrain(cfg: &ModelConfig, ds: &Dataset, pcfg: &PretrainConfig, seed: u64) -> Result<PretrainedSnapshot> {
    pcfg.validate()?;
    let mut snap = PretrainedSnapshot::untrained(cfg, ds, seed)?;
    if !pcfg.enabled || pcfg.epochs == 0 {
        return Ok(snap);
    }
    let corpus = &ds.corpus;
    if corpus.train_pairs.is_empty() {
        return Err(CoreError::Training("pretraining corpus has no image–text pairs".into()));
    }
    let langs = ds.vocab.language_names();
    let heldout: std::collections::BTreeSet<usize> = corpus.heldout_captions.iter().copied().collect();
    let mlm_pool: Vec<usize> = (0..corpus.captions.len()).filter(|i| !heldout.contains(i)).collect();
    let tlm_pool: Vec<usize> = mlm_pool.iter().copied().filter(|&i| corpus.captions[i].statement).collect();

    let mut params = merge(&snap.params, &snap.aux)?;
    let trainable = FreezeMask::default().trainable(&params);
    let mut opt =
        AdamW::new(AdamWConfig { lr: pcfg.lr, weight_decay: pcfg.weight_decay, ..Default::default() }, &params);
    let bs = pcfg.batch_size;
    let steps_per_epoch = corpus.train_pairs.len().div_ceil(bs);
    let total = (steps_per_epoch * pcfg.epochs) as u64;
    let mut mlm_order: Vec<usize> = Vec::new();
    let mut tlm_order: Vec<usize> = Vec::new();
    let mut step = 0u64;
    for epoch in 0..pcfg.epochs {
        let mut pair_order: Vec<usize> = (0..corpus.train_pairs.len()).collect();
        pair_order.shuffle(&mut stream(seed, "pretrain/shuffle", epoch as u64));
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for chunk in pair_order.chunks(bs) {
            let mut rng = stream(seed, "pretrain/step", step);
            let rendering = |cap: usize, lang: &str| corpus.captions[cap].renderings.get(lang).cloned();

            // image–text matching
            let mut itm_texts = Vec::with_capacity(chunk.len());
            let mut itm_scenes = Vec::with_capacity(chunk.len());
            let mut itm_labels = Vec::with_capacity(chunk.len());
            for &pi in chunk {
                let pair = corpus.train_pairs[pi];
                let lang = &langs[rng.random_range(0..langs.len())];
                let text = rendering(pair.caption, lang)
                    .ok_or_else(|| CoreError::Training(format!("caption {} lacks '{lang}'", pair.caption)))?;
                itm_texts.push(text);
                itm_scenes.push(pair.image);
                itm_labels.push(if pair.matched { 1.0 } else { 0.0 });
            }

            // masked tokens in a single language
            let mut mlm = Vec::with_capacity(bs);
            for _ in 0..bs {
                if mlm_order.is_empty() {
                    mlm_order = mlm_pool.clone();
                    mlm_order.shuffle(&mut rng);
                }
                let cap = mlm_order.pop().expect("non-empty");
                let lang = &langs[rng.random_range(0..langs.len())];
                let text = rendering(cap, lang).unwrap_or_default();
                let (text, masked) = mask_tokens(&text, pcfg.mask_prob, cfg.vocab_size, &mut rng);
                mlm.push(Item { text, scene: corpus.captions[cap].scene_id, masked });
            }

            // masked tokens over a caption joined with its translation
            let mut tlm = Vec::new();
            if pcfg.translation && langs.len() > 1 && !tlm_pool.is_empty() {
                for _ in 0..bs {
                    if tlm_order.is_empty() {
                        tlm_order = tlm_pool.clone();
                        tlm_order.shuffle(&mut rng);
                    }
                    let cap = tlm_order.pop().expect("non-empty");
                    let a = rng.random_range(0..langs.len());
                    let b = (a + rng.random_range(1..langs.len())) % langs.len();
                    let (Some(ta), Some(tb)) = (rendering(cap, &langs[a]), rendering(cap, &langs[b])) else {
                        continue;
                    };
                    if ta.len() + tb.len() + 1 > cfg.max_text_len {
                        continue;
                    }
                    let mut joined = ta;
                    joined.push(Vocabulary::SEP);
                    joined.extend(tb);
                    let (text, masked) = mask_tokens(&joined, pcfg.mask_prob, cfg.vocab_size, &mut rng);
                    tlm.push(Item { text, scene: corpus.captions[cap].scene_id, masked });
                }
            }

            let mut g = Graph::new(&params);
            let texts: Vec<&[u32]> = itm_texts.iter().map(Vec::as_slice).collect();
            let itm = itm_logits(&mut g, cfg, &texts, &itm_scenes, ds)?;
            let itm_loss = g.bce_with_logits(itm, &itm_labels)?;
            let (mlm_out, mlm_targets) = mlm_logits(&mut g, cfg, &mlm, ds)?;
            let mlm_loss = g.softmax_cross_entropy(mlm_out, &mlm_targets)?;
            let mut parts = vec![(mlm_loss, pcfg.mlm_weight), (itm_loss, pcfg.itm_weight)];
            if !tlm.is_empty() {
                let (tlm_out, tlm_targets) = mlm_logits(&mut g, cfg, &tlm, ds)?;
                let tlm_loss = g.softmax_cross_entropy(tlm_out, &tlm_targets)?;
                sums[2] += g.value(tlm_loss).data()[0];
                parts.push((tlm_loss, pcfg.mlm_weight));
            }
            sums[0] += g.value(mlm_loss).data()[0];
            sums[1] += g.value(itm_loss).data()[0];
            let loss = g.weighted_sum(&parts)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(CoreError::Training(format!("pretraining diverged at step {step} (loss {value})")));
            }
            let mut grads = g.backward(loss)?;
            drop(g);
            sums[3] += clip_global_norm(&mut grads, pcfg.clip_norm);
            opt.step(&mut params, &grads, &trainable, linear_decay(pcfg.lr, step, total))?;
            step += 1;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        snap.log.push(PretrainLogRecord {
            epoch,
            steps: step,
            mlm_loss: sums[0] / n,
            itm_loss: sums[1] / n,
            tlm_loss: sums[2] / n,
            grad_norm: sums[3] / n,
        });
    }
    let (model, aux) = split_aux(&params)?;
    snap.params = model;
    snap.aux = aux;
    snap.pretrained = true;
    Ok(snap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    /// Area under the ROC curve of the matching head on held-out pairs,
    /// every pair scored in every language.
    pub itm_auc: f64,
    pub mlm_accuracy: f64,
    /// Uniform guess over the vocabulary.
    pub mlm_chance: f64,
    pub mlm_predictions: usize,
}

/// Mann–Whitney AUC with ties counted as one half.
pub(crate) fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return 0.5;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

/// Held-out matching AUC and masked-token accuracy. Evaluation masks use
/// [MASK] only and are drawn from `seed`.
pub fn evaluate_pretraining(snap: &PretrainedSnapshot, ds: &Dataset, seed: u64) -> Result<PretrainMetrics> {
    let cfg = &snap.config;
    let params = merge(&snap.params, &snap.aux)?;
    let corpus = &ds.corpus;
    let langs = ds.vocab.language_names();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for chunk in corpus.heldout_pairs.chunks(64) {
        for lang in &langs {
            let texts: Vec<&[u32]> =
                chunk.iter().map(|p| corpus.captions[p.caption].renderings[lang].as_slice()).collect();
            let scenes: Vec<u64> = chunk.iter().map(|p| p.image).collect();
            let mut g = Graph::new(&params);
            let out = itm_logits(&mut g, cfg, &texts, &scenes, ds)?;
            scores.extend_from_slice(g.value(out).data());
            labels.extend(chunk.iter().map(|p| p.matched));
        }
    }
    let mut correct = 0;
    let mut total = 0;
    for chunk in corpus.heldout_captions.chunks(64) {
        for lang in &langs {
            let items: Vec<Item> = chunk
                .iter()
                .map(|&c| {
                    let text = &corpus.captions[c].renderings[lang];
                    let mut rng = stream(seed, "pretrain/eval_mask", c as u64);
                    let mut masked_text = text.clone();
                    let (_, masked) = mask_tokens(text, 0.15, cfg.vocab_size, &mut rng);
                    for &(p, _) in &masked {
                        masked_text[p] = Vocabulary::MASK;
                    }
                    Item { text: masked_text, scene: corpus.captions[c].scene_id, masked }
                })
                .collect();
            let mut g = Graph::new(&params);
            let (out, targets) = mlm_logits(&mut g, cfg, &items, ds)?;
            let logits = g.value(out);
            for (r, &t) in targets.iter().enumerate() {
                correct += usize::from(argmax(logits.row(r)) == t);
                total += 1;
            }
        }
    }
    Ok(PretrainMetrics {
        itm_auc: auc(&scores, &labels),
        mlm_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        mlm_chance: 1.0 / cfg.vocab_size as f64,
        mlm_predictions: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Pairwise definition of the AUC.
    fn auc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        num / den
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_definition(
            v in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = v.iter().map(|x| x.0 as f64).collect();
            let labels: Vec<bool> = v.iter().map(|x| x.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            prop_assert!((auc(&scores, &labels) - auc_pairwise(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn masking_hits_at_least_one_token_and_keeps_sep() {
        let text = vec![40, 41, Vocabulary::SEP, 42];
        for i in 0..200 {
            let (out, masked) = mask_tokens(&text, 0.15, 100, &mut stream(i, "m", 0));
            assert!(!masked.is_empty());
            assert_eq!(out[2], Vocabulary::SEP);
            assert!(masked.iter().all(|&(p, t)| p != 2 && t == text[p] as usize));
        }
    }
}
