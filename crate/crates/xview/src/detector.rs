//! Temporal pyramid encoder, query decoder, and task heads.
//!
//! The fused sequence is downsampled into a small temporal pyramid
//! (1x1 projection at full resolution, then strided 3x3 convolutions), the
//! levels are flattened and encoded with dense self-attention, and a fixed
//! set of learnable queries decodes candidate events. Every decoder layer
//! carries its own prediction heads so the set-prediction loss can supervise
//! all of them; spans are parameterized around each query's iteratively
//! refined reference point.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{positional_encoding, Ffn, Linear, Mha};
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::sve::{multi_level_inject, ViewEmbedder};
use crate::types::{EventPrediction, Span};
use crate::warn;

/// Minimum normalized span length enforced by the span head.
pub const SPAN_EPS: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub d_model: usize,
    pub levels: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_queries: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub gn_groups: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            d_model: 64,
            levels: 3,
            enc_layers: 2,
            dec_layers: 2,
            n_queries: 10,
            heads: 4,
            ffn_hidden: 64,
            gn_groups: 8,
        }
    }
}

// ── base encoder: temporal pyramid ───────────────────────────────────

pub struct BaseEncoder {
    proj0: Linear,
    gn0: (ParamId, ParamId),
    convs: Vec<Linear>,
    gns: Vec<(ParamId, ParamId)>,
    pub levels: usize,
    groups: usize,
}

impl BaseEncoder {
    /// `in_dim` is the raw feature width; the 1x1 projection maps it onto
    /// the model width `d` used by every subsequent level.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_dim: usize,
        d: usize,
        levels: usize,
        groups: usize,
    ) -> Self {
        let gn = |store: &mut ParamStore, rng: &mut ChaCha12Rng, n: &str| {
            (
                store.register(&format!("{n}.gn_gamma"), &[d], Init::Ones, rng),
                store.register(&format!("{n}.gn_beta"), &[d], Init::Zeros, rng),
            )
        };
        let proj0 = Linear::new(store, rng, &format!("{name}.proj0"), in_dim, d, true);
        let gn0 = gn(store, rng, &format!("{name}.l0"));
        let mut convs = Vec::new();
        let mut gns = Vec::new();
        for l in 1..levels {
            convs.push(Linear::new(store, rng, &format!("{name}.conv{l}"), 3 * d, d, true));
            gns.push(gn(store, rng, &format!("{name}.l{l}")));
        }
        BaseEncoder { proj0, gn0, convs, gns, levels, groups }
    }

    /// Convolution + group-norm stack only (no positions, no view
    /// embeddings). Level lengths are K, ceil(K/2), ceil(K/4), ...
    pub fn conv_levels(&self, s: &Session, z: Var) -> Result<Vec<Var>> {
        let k = s.g.shape_of(z)[0];
        if k == 0 {
            return Err(Error::Input("base encoder: empty sequence".into()));
        }
        let mut levels = self.levels;
        while levels > 1 && k < (1 << (levels - 1)) {
            levels -= 1;
        }
        if levels < self.levels {
            warn(&format!(
                "base encoder: sequence of length {k} supports only {levels} pyramid levels"
            ));
        }
        let mut out = Vec::with_capacity(levels);
        let l0 = self.proj0.forward(s, z)?;
        let l0 = s.g.group_norm(l0, self.groups, s.p(self.gn0.0)?, s.p(self.gn0.1)?, 1e-5)?;
        out.push(l0);
        for l in 1..levels {
            let unfolded = s.g.unfold_k3s2(out[l - 1])?;
            let conv = self.convs[l - 1].forward(s, unfolded)?;
            let (g, b) = self.gns[l - 1];
            out.push(s.g.group_norm(conv, self.groups, s.p(g)?, s.p(b)?, 1e-5)?);
        }
        Ok(out)
    }

    /// Full base-encoder pass: conv stack, sinusoidal positions per level,
    /// and (when enabled) a view-embedding injection per level. Returns the
    /// levels and any dictionary attention rows produced.
    pub fn forward(
        &self,
        s: &Session,
        z: Var,
        sve: Option<(&ViewEmbedder, f64)>,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let d = self.proj0.out_dim;
        let mut levels = self.conv_levels(s, z)?;
        for level in levels.iter_mut() {
            let len = s.g.shape_of(*level)[0];
            let pe = s.g.constant(positional_encoding(len, d)?)?;
            *level = s.g.add(*level, pe)?;
        }
        let alphas = match sve {
            Some((embedder, tau)) => {
                let (injected, alphas) = multi_level_inject(embedder, s, &levels, tau)?;
                levels = injected;
                alphas
            }
            None => Vec::new(),
        };
        Ok((levels, alphas))
    }
}

// ── dense transformer encoder over the flattened pyramid ─────────────

struct EncoderLayer {
    ln1: (ParamId, ParamId),
    attn: Mha,
    ln2: (ParamId, ParamId),
    ffn: Ffn,
}

pub struct Encoder {
    layers: Vec<EncoderLayer>,
    level_embed: ParamId,
    max_levels: usize,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cfg: &DetectorConfig,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let level_embed = store.register(
            &format!("{name}.level_embed"),
            &[cfg.levels, d],
            Init::UniformFanIn,
            rng,
        );
        let mut layers = Vec::new();
        for l in 0..cfg.enc_layers {
            let p = format!("{name}.layer{l}");
            layers.push(EncoderLayer {
                ln1: (
                    store.register(&format!("{p}.ln1_g"), &[d], Init::Ones, rng),
                    store.register(&format!("{p}.ln1_b"), &[d], Init::Zeros, rng),
                ),
                attn: Mha::new(store, rng, &format!("{p}.attn"), d, cfg.heads)?,
                ln2: (
                    store.register(&format!("{p}.ln2_g"), &[d], Init::Ones, rng),
                    store.register(&format!("{p}.ln2_b"), &[d], Init::Zeros, rng),
                ),
                ffn: Ffn::new(store, rng, &format!("{p}.ffn"), d, cfg.ffn_hidden, d),
            });
        }
        Ok(Encoder { layers, level_embed, max_levels: cfg.levels })
    }

    /// Flatten pyramid levels into one sequence and run the layer stack.
    /// With zero layers the memory is exactly the flattened input.
    /// `key_mask[i] == false` marks position i of the flattened sequence as
    /// padding: it receives no attention from any query.
    pub fn forward(&self, s: &Session, levels: &[Var], key_mask: Option<&[bool]>) -> Result<Var> {
        if levels.is_empty() {
            return Err(Error::Input("encoder: no pyramid levels".into()));
        }
        let flat = if levels.len() == 1 {
            levels[0]
        } else {
            s.g.concat_rows(levels)?
        };
        if self.layers.is_empty() {
            return Ok(flat);
        }
        if levels.len() > self.max_levels {
            return Err(Error::Config(format!(
                "encoder: {} levels exceeds the configured maximum {}",
                levels.len(),
                self.max_levels
            )));
        }
        let mut idx = Vec::new();
        for (l, level) in levels.iter().enumerate() {
            idx.extend(std::iter::repeat(l).take(s.g.shape_of(*level)[0]));
        }
        if let Some(m) = key_mask {
            if m.len() != idx.len() {
                return Err(Error::Shape("encoder: mask length mismatch".into()));
            }
        }
        let lvl = s.g.gather_rows(s.p(self.level_embed)?, &idx)?;
        let mut x = s.g.add(flat, lvl)?;
        for layer in &self.layers {
            let normed = s.g.layer_norm(x, s.p(layer.ln1.0)?, s.p(layer.ln1.1)?, 1e-5)?;
            let att = layer.attn.forward(s, normed, normed, key_mask)?;
            x = s.g.add(x, att.out)?;
            let normed = s.g.layer_norm(x, s.p(layer.ln2.0)?, s.p(layer.ln2.1)?, 1e-5)?;
            x = s.g.add(x, layer.ffn.forward(s, normed)?)?;
        }
        Ok(x)
    }
}

// ── query decoder with reference refinement ──────────────────────────

struct DecoderLayer {
    ln_q: (ParamId, ParamId),
    self_attn: Mha,
    ln_x: (ParamId, ParamId),
    cross_attn: Mha,
    ln_f: (ParamId, ParamId),
    ffn: Ffn,
    ref_mlp: Ffn,
}

pub struct Decoder {
    query_embed: ParamId,
    ref_init: ParamId,
    layers: Vec<DecoderLayer>,
    pub n_queries: usize,
}

pub struct DecoderLayerOut {
    /// `[N, d]` query features after this layer.
    pub feats: Var,
    /// `[N]` reference logits after this layer's refinement.
    pub ref_logits: Var,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cfg: &DetectorConfig,
    ) -> Result<Self> {
        if cfg.n_queries == 0 {
            return Err(Error::Config("decoder needs at least one query".into()));
        }
        let d = cfg.d_model;
        let query_embed = store.register(
            &format!("{name}.query_embed"),
            &[cfg.n_queries, d],
            Init::UniformFanIn,
            rng,
        );
        let ref_init = store.register(&format!("{name}.ref_init"), &[cfg.n_queries], Init::Zeros, rng);
        let mut layers = Vec::new();
        for l in 0..cfg.dec_layers {
            let p = format!("{name}.layer{l}");
            layers.push(DecoderLayer {
                ln_q: (
                    store.register(&format!("{p}.ln_q_g"), &[d], Init::Ones, rng),
                    store.register(&format!("{p}.ln_q_b"), &[d], Init::Zeros, rng),
                ),
                self_attn: Mha::new(store, rng, &format!("{p}.self_attn"), d, cfg.heads)?,
                ln_x: (
                    store.register(&format!("{p}.ln_x_g"), &[d], Init::Ones, rng),
                    store.register(&format!("{p}.ln_x_b"), &[d], Init::Zeros, rng),
                ),
                cross_attn: Mha::new(store, rng, &format!("{p}.cross_attn"), d, cfg.heads)?,
                ln_f: (
                    store.register(&format!("{p}.ln_f_g"), &[d], Init::Ones, rng),
                    store.register(&format!("{p}.ln_f_b"), &[d], Init::Zeros, rng),
                ),
                ffn: Ffn::new(store, rng, &format!("{p}.ffn"), d, cfg.ffn_hidden, d),
                ref_mlp: Ffn::new(store, rng, &format!("{p}.ref_mlp"), d, d / 2, 1),
            });
        }
        Ok(Decoder { query_embed, ref_init, layers, n_queries: cfg.n_queries })
    }

    /// Per-layer query features and refined reference logits. References
    /// live in logit space and are squashed through a sigmoid wherever a
    /// position in [0,1] is needed, so refinement can never leave the unit
    /// interval.
    pub fn forward(
        &self,
        s: &Session,
        memory: Var,
        memory_mask: Option<&[bool]>,
    ) -> Result<Vec<DecoderLayerOut>> {
        let n = self.n_queries;
        let mut x = s.p(self.query_embed)?;
        let mut ref_logits = s.p(self.ref_init)?;
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let normed = s.g.layer_norm(x, s.p(layer.ln_q.0)?, s.p(layer.ln_q.1)?, 1e-5)?;
            let sa = layer.self_attn.forward(s, normed, normed, None)?;
            x = s.g.add(x, sa.out)?;
            let normed = s.g.layer_norm(x, s.p(layer.ln_x.0)?, s.p(layer.ln_x.1)?, 1e-5)?;
            let ca = layer.cross_attn.forward(s, normed, memory, memory_mask)?;
            x = s.g.add(x, ca.out)?;
            let normed = s.g.layer_norm(x, s.p(layer.ln_f.0)?, s.p(layer.ln_f.1)?, 1e-5)?;
            x = s.g.add(x, layer.ffn.forward(s, normed)?)?;
            let delta = s.g.reshape(layer.ref_mlp.forward(s, x)?, &[n])?;
            ref_logits = s.g.add(ref_logits, delta)?;
            outs.push(DecoderLayerOut { feats: x, ref_logits });
        }
        Ok(outs)
    }
}

// ── task heads ───────────────────────────────────────────────────────

pub struct Heads {
    fg: Linear,
    span: Ffn,
    err: Linear,
    count: Linear,
    overall: Linear,
    pub n_queries: usize,
}

/// Differentiable per-layer predictions (graph nodes, not extracted values).
pub struct LayerPredictions {
    pub fg_logits: Var,
    /// `[N, 2]` normalized (t_st, t_ed), valid by construction.
    pub spans: Var,
    pub error_logits: Var,
    /// `[N]` logits over event counts {1..N}.
    pub count_logits: Var,
    pub count_probs: Var,
    pub overall_logit: Var,
}

impl Heads {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cfg: &DetectorConfig,
    ) -> Self {
        let d = cfg.d_model;
        Heads {
            fg: Linear::new(store, rng, &format!("{name}.fg"), d, 1, true),
            span: Ffn::new(store, rng, &format!("{name}.span"), d, d, 2),
            err: Linear::new(store, rng, &format!("{name}.err"), d, 1, true),
            count: Linear::new(store, rng, &format!("{name}.count"), d, cfg.n_queries, true),
            overall: Linear::new(store, rng, &format!("{name}.overall"), d, 1, true),
            n_queries: cfg.n_queries,
        }
    }

    /// Apply every head to one decoder layer's outputs.
    ///
    /// Span construction: the span head predicts a center offset (logit
    /// space, relative to the reference) and a length logit; with
    /// c = sigmoid(ref + dc) and w = SPAN_EPS + (1 - SPAN_EPS) sigmoid(dw),
    /// t_st = c (1 - w) and t_ed = t_st + w always satisfy
    /// 0 <= t_st < t_ed <= 1 with length at least SPAN_EPS.
    pub fn forward(&self, s: &Session, layer: &DecoderLayerOut) -> Result<LayerPredictions> {
        let n = self.n_queries;
        let feats = layer.feats;
        let fg_logits = s.g.reshape(self.fg.forward(s, feats)?, &[n])?;
        let span_raw = self.span.forward(s, feats)?;
        let dc = s.g.reshape(s.g.slice_cols(span_raw, 0, 1)?, &[n])?;
        let dw = s.g.reshape(s.g.slice_cols(span_raw, 1, 2)?, &[n])?;
        let center = s.g.sigmoid(s.g.add(layer.ref_logits, dc)?)?;
        let width = s.g.add_scalar(
            s.g.scale(s.g.sigmoid(dw)?, 1.0 - SPAN_EPS)?,
            SPAN_EPS,
        )?;
        let one_minus_w = s.g.add_scalar(s.g.neg(width)?, 1.0)?;
        let t_st = s.g.mul(center, one_minus_w)?;
        let t_ed = s.g.add(t_st, width)?;
        let spans = s.g.concat_cols(&[
            s.g.reshape(t_st, &[n, 1])?,
            s.g.reshape(t_ed, &[n, 1])?,
        ])?;
        let error_logits = s.g.reshape(self.err.forward(s, feats)?, &[n])?;
        let pooled = s.g.reshape(s.g.mean_axis(feats, 0)?, &[1, s.g.shape_of(feats)[1]])?;
        let count_logits = s.g.reshape(self.count.forward(s, pooled)?, &[n])?;
        let count_probs = s.g.softmax(count_logits, 0)?;
        let overall_logit = s.g.reshape(self.overall.forward(s, pooled)?, &[1])?;
        Ok(LayerPredictions {
            fg_logits,
            spans,
            error_logits,
            count_logits,
            count_probs,
            overall_logit,
        })
    }
}

// ── assembled detector ───────────────────────────────────────────────

pub struct Detector {
    pub base: BaseEncoder,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub heads: Heads,
}

impl Detector {
    /// Raw feature width equals the model width unless overridden via
    /// [`Detector::with_input_dim`].
    pub fn with_input_dim(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_dim: usize,
        cfg: &DetectorConfig,
    ) -> Result<Self> {
        Ok(Detector {
            base: BaseEncoder::new(store, rng, &format!("{name}.base"), in_dim, cfg.d_model, cfg.levels, cfg.gn_groups),
            encoder: Encoder::new(store, rng, &format!("{name}.enc"), cfg)?,
            decoder: Decoder::new(store, rng, &format!("{name}.dec"), cfg)?,
            heads: Heads::new(store, rng, &format!("{name}.heads"), cfg),
        })
    }
}

pub struct DetectorOutput {
    /// One prediction set per decoder layer, in layer order; the last entry
    /// is the final prediction.
    pub per_layer: Vec<LayerPredictions>,
    /// Dictionary attention rows from multi-level injection (empty when the
    /// view embedder is disabled).
    pub sve_alphas: Vec<Var>,
}

impl Detector {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cfg: &DetectorConfig,
    ) -> Result<Self> {
        Detector::with_input_dim(store, rng, name, cfg.d_model, cfg)
    }

    pub fn forward(
        &self,
        s: &Session,
        z_fused: Var,
        sve: Option<(&ViewEmbedder, f64)>,
    ) -> Result<DetectorOutput> {
        let (levels, sve_alphas) = self.base.forward(s, z_fused, sve)?;
        let memory = self.encoder.forward(s, &levels, None)?;
        let layers = self.decoder.forward(s, memory, None)?;
        let per_layer = layers
            .iter()
            .map(|l| self.heads.forward(s, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(DetectorOutput { per_layer, sve_alphas })
    }
}

/// Extract plain predictions from the final layer of a forward pass.
pub fn extract_predictions(s: &Session, preds: &LayerPredictions) -> Vec<EventPrediction> {
    let fg = s.g.value(s.g.sigmoid(preds.fg_logits).expect("sigmoid"));
    let err = s.g.value(s.g.sigmoid(preds.error_logits).expect("sigmoid"));
    let spans = s.g.value(preds.spans);
    (0..fg.numel())
        .map(|i| EventPrediction {
            span: Span::new(spans.at(i, 0), spans.at(i, 1)),
            fg_score: fg.data()[i],
            error_prob: err.data()[i],
            query_index: i,
            caption: None,
        })
        .collect()
}

/// Keep the `argmax(count)` highest-confidence predictions. Ties in
/// fg_score break toward the lower query index; ties in the count
/// distribution break toward the smaller count.
pub fn inference_select(
    predictions: &[EventPrediction],
    count_probs: &[f64],
) -> Vec<EventPrediction> {
    if predictions.is_empty() || count_probs.is_empty() {
        return Vec::new();
    }
    let mut best = 0;
    for (i, &p) in count_probs.iter().enumerate() {
        if p > count_probs[best] {
            best = i;
        }
    }
    let k_count = (best + 1).min(predictions.len());
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .fg_score
            .partial_cmp(&predictions[a].fg_score)
            .expect("finite scores")
            .then(predictions[a].query_index.cmp(&predictions[b].query_index))
    });
    let mut kept: Vec<EventPrediction> = order[..k_count]
        .iter()
        .map(|&i| predictions[i].clone())
        .collect();
    kept.sort_by(|a, b| {
        b.fg_score
            .partial_cmp(&a.fg_score)
            .expect("finite scores")
            .then(a.query_index.cmp(&b.query_index))
    });
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_model, FD_STEP};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn mk(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    fn small_cfg() -> DetectorConfig {
        DetectorConfig {
            d_model: 8,
            levels: 3,
            enc_layers: 1,
            dec_layers: 2,
            n_queries: 4,
            heads: 2,
            ffn_hidden: 12,
            gn_groups: 2,
        }
    }

    fn fixture(cfg: &DetectorConfig) -> (ParamStore, Detector) {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let det = Detector::new(&mut store, &mut rng, "det", cfg).unwrap();
        (store, det)
    }

    #[test]
    fn pyramid_lengths_halve() {
        let cfg = small_cfg();
        let (store, det) = fixture(&cfg);
        let s = Session::frozen(&store);
        let z = s.g.constant(mk(16, 8, 1)).unwrap();
        let levels = det.base.conv_levels(&s, z).unwrap();
        let lens: Vec<usize> = levels.iter().map(|&l| s.g.shape_of(l)[0]).collect();
        assert_eq!(lens, vec![16, 8, 4]);
    }

    #[test]
    fn short_sequences_drop_levels() {
        let cfg = small_cfg();
        let (store, det) = fixture(&cfg);
        let s = Session::frozen(&store);
        let z = s.g.constant(mk(2, 8, 2)).unwrap();
        let levels = det.base.conv_levels(&s, z).unwrap();
        assert_eq!(levels.len(), 2, "K=2 supports only 2 levels");
    }

    #[test]
    fn constant_input_stays_constant_through_convs() {
        let cfg = small_cfg();
        let (store, det) = fixture(&cfg);
        let s = Session::frozen(&store);
        let z = s.g.constant(Tensor::full(&[12, 8], 0.37)).unwrap();
        let levels = det.base.conv_levels(&s, z).unwrap();
        for &level in &levels {
            let v = s.g.value(level);
            for i in 1..v.rows() {
                for j in 0..v.cols() {
                    assert!(
                        (v.at(i, j) - v.at(0, j)).abs() < 1e-10,
                        "level must be constant along time"
                    );
                }
            }
        }
    }

    #[test]
    fn base_encoder_gradcheck() {
        let cfg = DetectorConfig { d_model: 6, levels: 2, gn_groups: 2, ..small_cfg() };
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let mut store = ParamStore::new();
        let base = BaseEncoder::new(&mut store, &mut rng, "base", 6, 6, 2, 2);
        let z = mk(5, 6, 3);
        let report = grad_check_model(&store, &[z], FD_STEP, 1e-5, true, |s, vars| {
            let levels = base.forward(s, vars[0], None)?.0;
            let cat = s.g.concat_rows(&levels)?;
            s.g.sum_all(s.g.mul(cat, cat)?)
        })
        .unwrap();
        assert!(report.passed(), "{report}");
        let _ = cfg;
    }

    #[test]
    fn zero_encoder_layers_is_flatten() {
        let cfg = DetectorConfig { enc_layers: 0, ..small_cfg() };
        let (store, det) = fixture(&cfg);
        let s = Session::frozen(&store);
        let l0 = s.g.constant(mk(6, 8, 4)).unwrap();
        let l1 = s.g.constant(mk(3, 8, 5)).unwrap();
        let memory = det.encoder.forward(&s, &[l0, l1], None).unwrap();
        let flat = s.g.concat_rows(&[l0, l1]).unwrap();
        assert_eq!(s.g.value(memory), s.g.value(flat));
    }

    #[test]
    fn memory_length_is_sum_of_level_lengths() {
        let cfg = small_cfg();
        let (store, det) = fixture(&cfg);
        let s = Session::frozen(&store);
        let z = s.g.constant(mk(16, 8, 6)).unwrap();
        let (levels, _) = det.base.forward(&s, z, None).unwrap();
        let memory = det.encoder.forward(&s, &levels, None).unwrap();
        assert_eq!(s.g.shape_of(memory), vec![16 + 8 + 4, 8]);
    }

    #[test]
    fn masked_positions_cannot_influence_unmasked_outputs() {
        let cfg = small_cfg();
        let (store, det) = fixture(&cfg);
        let run = |garbage: f64| {
            let s = Session::frozen(&store);
            let mut data = mk(6, 8, 7);
            for j in 0..8 {
                data.set(2, j, garbage);
                data.set(5, j, garbage);
            }
            let level = s.g.constant(data).unwrap();
            let mask = [true, true, false, true, true, false];
            let memory = det.encoder.forward(&s, &[level], Some(&mask)).unwrap();
            s.g.value(memory)
        };
        let a = run(1000.0);
        let b = run(-999.0);
        for i in [0usize, 1, 3, 4] {
            for j in 0..8 {
                assert!(
                    (a.at(i, j) - b.at(i, j)).abs() < 1e-9,
                    "unmasked position {i} leaked masked content"
                );
            }
        }
    }

    #[test]
    fn decoder_shapes_and_aux_count() {
        let cfg = small_cfg();
        let (store, det) = fixture(&cfg);
        let s = Session::frozen(&store);
        let memory = s.g.constant(mk(10, 8, 8)).unwrap();
        let outs = det.decoder.forward(&s, memory, None).unwrap();
        assert_eq!(outs.len(), 2, "one output per decoder layer");
        for out in &outs {
            assert_eq!(s.g.shape_of(out.feats), vec![4, 8]);
            assert_eq!(s.g.shape_of(out.ref_logits), vec![4]);
        }
    }

    #[test]
    fn single_query_single_layer() {
        let cfg = DetectorConfig { dec_layers: 1, n_queries: 1, ..small_cfg() };
        let (store, det) = fixture(&cfg);
        let s = Session::frozen(&store);
        let memory = s.g.constant(mk(5, 8, 9)).unwrap();
        let outs = det.decoder.forward(&s, memory, None).unwrap();
        assert_eq!(outs.len(), 1);
        assert_eq!(s.g.shape_of(outs[0].feats), vec![1, 8]);
    }

    #[test]
    fn references_survive_extreme_logits() {
        let cfg = small_cfg();
        let (mut store, det) = fixture(&cfg);
        let ref_id = store.lookup("det.dec.ref_init").unwrap();
        store
            .set(ref_id, Tensor::vector(vec![1e3, -1e3, 999.0, -999.0]))
            .unwrap();
        let s = Session::frozen(&store);
        let memory = s.g.constant(mk(5, 8, 10)).unwrap();
        let outs = det.decoder.forward(&s, memory, None).unwrap();
        for out in &outs {
            let preds = det.heads.forward(&s, out).unwrap();
            let spans = s.g.value(preds.spans);
            for i in 0..4 {
                let (st, ed) = (spans.at(i, 0), spans.at(i, 1));
                assert!((0.0..=1.0).contains(&st) && (0.0..=1.0).contains(&ed));
                assert!(ed - st >= SPAN_EPS * 0.999, "span [{st}, {ed}] too short");
            }
        }
    }

    #[test]
    fn head_outputs_are_calibrated() {
        let cfg = small_cfg();
        let (store, det) = fixture(&cfg);
        let s = Session::frozen(&store);
        let z = s.g.constant(mk(16, 8, 11)).unwrap();
        let out = det.forward(&s, z, None).unwrap();
        assert_eq!(out.per_layer.len(), 2);
        let last = out.per_layer.last().unwrap();
        let probs = s.g.value(last.count_probs);
        let sum: f64 = probs.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "count distribution sums to 1");
        // zero features give a zero error logit and probability 1/2
        let zero_feats = DecoderLayerOut {
            feats: s.g.constant(Tensor::zeros(&[4, 8])).unwrap(),
            ref_logits: s.g.constant(Tensor::zeros(&[4])).unwrap(),
        };
        let preds = det.heads.forward(&s, &zero_feats).unwrap();
        let err = s.g.value(s.g.sigmoid(preds.error_logits).unwrap());
        for &p in err.data() {
            assert!((p - 0.5).abs() < 1e-12);
        }
        // spans are valid for ordinary features too
        let spans = s.g.value(last.spans);
        for i in 0..4 {
            assert!(spans.at(i, 0) < spans.at(i, 1));
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = small_cfg();
        let (store, det) = fixture(&cfg);
        let run = || {
            let s = Session::frozen(&store);
            let z = s.g.constant(mk(16, 8, 12)).unwrap();
            let out = det.forward(&s, z, None).unwrap();
            let last = out.per_layer.last().unwrap();
            (
                s.g.value(last.spans).into_data(),
                s.g.value(last.fg_logits).into_data(),
                s.g.value(last.count_probs).into_data(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn selection_rules() {
        let mk_pred = |i: usize, fg: f64| EventPrediction {
            span: Span::new(0.1, 0.2),
            fg_score: fg,
            error_prob: 0.3,
            query_index: i,
            caption: None,
        };
        let preds: Vec<_> = vec![mk_pred(0, 0.5), mk_pred(1, 0.9), mk_pred(2, 0.5), mk_pred(3, 0.1)];

        // count argmax = N keeps everything
        let all = inference_select(&preds, &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(all.len(), 4);

        // ties in fg_score break toward the lower query index
        let two = inference_select(&preds, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(two.len(), 2);
        assert_eq!(two[0].query_index, 1);
        assert_eq!(two[1].query_index, 0, "tie at 0.5 keeps query 0 over query 2");

        // keeps exactly min(K_count, N)
        let k3 = inference_select(&preds[..2], &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(k3.len(), 2);
    }
}
