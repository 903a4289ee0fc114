use xvqa_nn::ops::argmax;
use xvqa_nn::rng::StreamRng;
use xvqa_nn::{Graph, NodeId, ParamSet, Tensor};

use super::{HeadKind, ModelConfig, ModelInputs};
use crate::synthdata::SPATIAL_DIM;
use crate::Result;

/// Embeds and encodes a batch. Returns the `[batch · seq_len, d_model]`
/// hidden states.
pub fn encoder(g: &mut Graph<'_>, cfg: &ModelConfig, inp: &ModelInputs) -> Result<NodeId> {
    let d = cfg.d_model;
    let (b, t, o, l) = (inp.batch, inp.text_len, inp.n_obj, inp.seq_len());

    let tok_table = g.param("text.token")?;
    let pos_table = g.param("text.position")?;
    let seg_table = g.param("segment")?;
    let tok = g.gather_rows(tok_table, &inp.tokens)?;
    let positions: Vec<usize> = (0..b * t).map(|i| i % t).collect();
    let pos = g.gather_rows(pos_table, &positions)?;
    let seg0 = g.gather_rows(seg_table, &vec![0; b * t])?;
    let text = g.add(tok, pos)?;
    let text = g.add(text, seg0)?;
    let text_rows: Vec<usize> = (0..b * t).map(|i| (i / t) * l + i % t).collect();

    let count_table = g.param("visual.count")?;
    let count = g.gather_rows(count_table, &inp.counts)?;
    let seg1 = g.gather_rows(seg_table, &vec![1; b])?;
    let count = g.add(count, seg1)?;
    let count_rows: Vec<usize> = (0..b).map(|i| i * l + t).collect();

    let mut parts = vec![(text, text_rows), (count, count_rows)];
    if o > 0 {
        let feats = g.constant(Tensor::new(vec![b * o, cfg.d_v], inp.features.clone())?)?;
        let spat = g.constant(Tensor::new(vec![b * o, SPATIAL_DIM], inp.spatial.clone())?)?;
        let (fw, fb) = (g.param("visual.feature.w")?, g.param("visual.feature.b")?);
        let (sw, sb) = (g.param("visual.spatial.w")?, g.param("visual.spatial.b")?);
        let f = g.linear(feats, fw, fb)?;
        let s = g.linear(spat, sw, sb)?;
        let seg1 = g.gather_rows(seg_table, &vec![1; b * o])?;
        let obj = g.add(f, s)?;
        let obj = g.add(obj, seg1)?;
        let obj_rows: Vec<usize> = (0..b * o).map(|i| (i / o) * l + t + 1 + i % o).collect();
        parts.push((obj, obj_rows));
    }
    let x = g.assemble(b * l, d, parts)?;
    let mut x = norm(g, x, "emb_ln")?;

    let mask = inp.key_mask();
    for layer in 0..cfg.layers {
        let p = |s: &str| format!("layer{layer}.{s}");
        let q = dense(g, x, &p("attn.wq"), &p("attn.bq"))?;
        let k = dense(g, x, &p("attn.wk"), &p("attn.bk"))?;
        let v = dense(g, x, &p("attn.wv"), &p("attn.bv"))?;
        let a = g.attention(q, k, v, cfg.heads, l, &mask)?;
        let a = dense(g, a, &p("attn.wo"), &p("attn.bo"))?;
        let r = g.add(x, a)?;
        x = norm(g, r, &p("ln1"))?;
        let h = dense(g, x, &p("ffn.w1"), &p("ffn.b1"))?;
        let h = g.gelu(h)?;
        let h = dense(g, h, &p("ffn.w2"), &p("ffn.b2"))?;
        let r = g.add(x, h)?;
        x = norm(g, r, &p("ln2"))?;
    }
    Ok(x)
}

fn dense(g: &mut Graph<'_>, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
    let (w, b) = (g.param(w)?, g.param(b)?);
    Ok(g.linear(x, w, b)?)
}

fn norm(g: &mut Graph<'_>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let gain = g.param(&format!("{prefix}.gain"))?;
    let bias = g.param(&format!("{prefix}.bias"))?;
    Ok(g.layer_norm(x, gain, bias)?)
}

/// Maps pooled `[batch, d_model]` features to `[batch, num_classes]` logits.
/// Dropout is active only when an RNG is supplied.
pub fn head_logits(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    head: HeadKind,
    pooled: NodeId,
    dropout: Option<&mut StreamRng>,
) -> Result<NodeId> {
    let mut h = pooled;
    if head != HeadKind::Linear {
        h = dense(g, h, "head.trans.w", "head.trans.b")?;
        h = g.gelu(h)?;
        if let Some(rng) = dropout {
            if cfg.head_dropout > 0.0 {
                h = g.dropout(h, cfg.head_dropout, rng)?;
            }
        }
        if head == HeadKind::Deep {
            h = norm(g, h, "head.trans.ln")?;
        }
    }
    dense(g, h, "head.out.w", "head.out.b")
}

/// Logits node for a batch, pooled from each sequence's [CLS] state.
pub fn classify(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    head: HeadKind,
    inp: &ModelInputs,
    dropout: Option<&mut StreamRng>,
) -> Result<NodeId> {
    let hidden = encoder(g, cfg, inp)?;
    let cls: Vec<usize> = (0..inp.batch).map(|b| inp.cls_row(b)).collect();
    let pooled = g.gather_rows(hidden, &cls)?;
    head_logits(g, cfg, head, pooled, dropout)
}

pub fn forward(
    params: &ParamSet,
    cfg: &ModelConfig,
    head: HeadKind,
    inp: &ModelInputs,
    dropout: Option<&mut StreamRng>,
) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let logits = classify(&mut g, cfg, head, inp, dropout)?;
    Ok(g.value(logits).clone())
}

/// Eval-mode argmax predictions; ties go to the lowest class index.
pub fn predict(params: &ParamSet, cfg: &ModelConfig, head: HeadKind, inp: &ModelInputs) -> Result<Vec<usize>> {
    let logits = forward(params, cfg, head, inp, None)?;
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}

#[cfg(test)]
mod tests {
    use super::super::{build_model, encode_batch, Example, InputAblation, VisualMode};
    use super::*;
    use crate::synthdata::QType;
    use xvqa_nn::init::normal;
    use xvqa_nn::rng::stream;
    use xvqa_nn::{grad_check, GradCheckOptions, NnError};

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            ffn_dim: 24,
            head_hidden: 12,
            ..ModelConfig::preset("small", 60, 6, 20).unwrap()
        }
    }

    fn example(seed: u64, len: usize, n_obj: usize) -> Example {
        let mut rng = stream(seed, "test/example", 0);
        Example {
            qid: format!("q{seed}"),
            language: "src".into(),
            qtype: QType::Query,
            tokens: (0..len as u32).map(|i| 30 + (i * 7 + seed as u32) % 30).collect(),
            features: normal(&[n_obj, 6], 1.0, &mut rng),
            spatial: normal(&[n_obj, SPATIAL_DIM], 0.3, &mut rng),
            count: n_obj,
            answer: (seed as usize) % 20,
            text_removed: false,
            visual_mode: VisualMode::Original,
        }
    }

    fn inputs(exs: &[Example]) -> ModelInputs {
        let refs: Vec<&Example> = exs.iter().collect();
        encode_batch(&refs, &cfg(), true, InputAblation::None).unwrap()
    }

    #[test]
    fn logits_shape_and_eval_determinism() {
        for head in [HeadKind::Linear, HeadKind::Deep, HeadKind::DeepNoLn] {
            let ps = build_model(&cfg(), head, 1).unwrap();
            let inp = inputs(&[example(1, 5, 3), example(2, 8, 6)]);
            let a = forward(&ps, &cfg(), head, &inp, None).unwrap();
            assert_eq!(a.shape(), &[2, 20]);
            assert!(a.bit_eq(&forward(&ps, &cfg(), head, &inp, None).unwrap()));
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let ps = build_model(&cfg(), HeadKind::Deep, 1).unwrap();
        let inp = inputs(&[example(1, 5, 3)]);
        let eval = forward(&ps, &cfg(), HeadKind::Deep, &inp, None).unwrap();
        let train = forward(&ps, &cfg(), HeadKind::Deep, &inp, Some(&mut stream(0, "d", 0))).unwrap();
        assert!(eval.max_abs_diff(&train) > 1e-9);
    }

    #[test]
    fn object_order_does_not_matter() {
        let ps = build_model(&cfg(), HeadKind::Deep, 2).unwrap();
        let ex = example(3, 6, 5);
        let mut perm = ex.clone();
        let order = [3, 0, 4, 1, 2];
        let shuffle =
            |t: &Tensor| Tensor::from_rows(&order.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        perm.features = shuffle(&ex.features);
        perm.spatial = shuffle(&ex.spatial);
        let a = forward(&ps, &cfg(), HeadKind::Deep, &inputs(&[ex]), None).unwrap();
        let b = forward(&ps, &cfg(), HeadKind::Deep, &inputs(&[perm]), None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn padding_is_inert() {
        let ps = build_model(&cfg(), HeadKind::Deep, 4).unwrap();
        let short = example(5, 3, 3);
        let alone = forward(&ps, &cfg(), HeadKind::Deep, &inputs(std::slice::from_ref(&short)), None).unwrap();
        let mut inp = inputs(&[short, example(6, 10, 7)]);
        let batched = forward(&ps, &cfg(), HeadKind::Deep, &inp, None).unwrap();
        assert!(Tensor::new(vec![1, 20], batched.row(0).to_vec()).unwrap().max_abs_diff(&alone) < 1e-7);
        // Garbage in padded slots of the first sequence ([CLS] qtype : 3 tokens [SEP]).
        let d_v = cfg().d_v;
        for v in &mut inp.features[3 * d_v..inp.n_obj * d_v] {
            *v = 1e3;
        }
        for t in 7..inp.text_len {
            inp.tokens[t] = 59;
        }
        let perturbed = forward(&ps, &cfg(), HeadKind::Deep, &inp, None).unwrap();
        assert!(perturbed.max_abs_diff(&batched) < 1e-7);
    }

    #[test]
    fn argmax_ignores_positive_rescaling_of_the_output_layer() {
        let mut ps = build_model(&cfg(), HeadKind::Linear, 7).unwrap();
        let inp = inputs(&[example(7, 4, 4), example(8, 9, 3), example(9, 2, 8)]);
        let before = predict(&ps, &cfg(), HeadKind::Linear, &inp).unwrap();
        for name in ["head.out.w", "head.out.b"] {
            let i = ps.index_of(name).unwrap();
            ps.tensor_mut(i).data_mut().iter_mut().for_each(|v| *v *= 3.5);
        }
        assert_eq!(predict(&ps, &cfg(), HeadKind::Linear, &inp).unwrap(), before);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = ModelConfig { layers: 1, ..cfg() };
        for head in [HeadKind::Deep, HeadKind::DeepNoLn] {
            let mut ps = build_model(&c, head, 11).unwrap();
            // Larger embeddings keep the check away from the flat region near zero.
            for name in ["text.token", "text.position", "segment", "visual.count"] {
                let i = ps.index_of(name).unwrap();
                ps.tensor_mut(i).data_mut().iter_mut().for_each(|v| *v *= 20.0);
            }
            let exs = [example(1, 4, 3), example(2, 6, 5)];
            let refs: Vec<&Example> = exs.iter().collect();
            let inp = encode_batch(&refs, &c, true, InputAblation::None).unwrap();
            let targets: Vec<usize> = exs.iter().map(|e| e.answer).collect();
            let report = grad_check(
                |p| {
                    let mut g = Graph::new(p);
                    let logits = classify(&mut g, &c, head, &inp, None).map_err(|e| NnError::Invalid(e.to_string()))?;
                    let loss = g.softmax_cross_entropy(logits, &targets)?;
                    Ok((g.value(loss).data()[0], g.backward(loss)?))
                },
                &ps,
                &GradCheckOptions { max_entries_per_tensor: Some(6), ..Default::default() },
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{head:?}: {:?} {}", report.worst, report.max_rel_error);
        }
    }
}
