//! Gated adaptive sampling.
//!
//! Each stream is scored per frame, hard Top-K indices pick the frames that
//! flow downstream, and a straight-through relaxation produces soft inclusion
//! scores that (i) gate the gathered features so the scorer keeps receiving
//! gradients and (ii) feed the selection-entropy and variance/covariance
//! regularizers. The demonstration stream is scored from itself; the
//! imitation stream is scored conditioned on the already-sampled
//! demonstration frames.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Ffn, Linear, Mha};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;
use crate::warn;

pub const NORM_EPS: f64 = 1e-8;
pub const ENTROPY_EPS: f64 = 1e-8;
/// Guard inside the variance sqrt. Kept far below the regular epsilon so the
/// variance hinge matches its closed form to ~1e-9 even at zero variance.
pub const VAR_EPS: f64 = 1e-20;

/// Saliency scorer for the demonstration stream: self-attention, FFN, and a
/// per-frame linear head.
pub struct ExoScorer {
    attn: Mha,
    ffn: Ffn,
    head: Linear,
}

impl ExoScorer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(ExoScorer {
            attn: Mha::new(store, rng, &format!("{name}.attn"), d, heads)?,
            ffn: Ffn::new(store, rng, &format!("{name}.ffn"), d, hidden, d),
            head: Linear::new(store, rng, &format!("{name}.head"), d, 1, true),
        })
    }

    /// Scores `[T]` for a `[T, d]` feature sequence.
    pub fn forward(&self, s: &Session, z: Var) -> Result<Var> {
        let t = s.g.shape_of(z)[0];
        if t == 0 {
            return Err(Error::Input("scorer: empty sequence".into()));
        }
        let att = self.attn.forward(s, z, z, None)?;
        let h = self.ffn.forward(s, att.out)?;
        let r = self.head.forward(s, h)?;
        s.g.reshape(r, &[t])
    }
}

/// Saliency scorer for the imitation stream, conditioned on sampled
/// demonstration frames (queries = imitation, keys/values = demonstration).
pub struct EgoScorer {
    attn: Mha,
    ffn: Ffn,
    head: Linear,
}

impl EgoScorer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(EgoScorer {
            attn: Mha::new(store, rng, &format!("{name}.attn"), d, heads)?,
            ffn: Ffn::new(store, rng, &format!("{name}.ffn"), d, hidden, d),
            head: Linear::new(store, rng, &format!("{name}.head"), d, 1, true),
        })
    }

    pub fn forward(&self, s: &Session, z_ego: Var, sampled_exo: Var) -> Result<Var> {
        let t = s.g.shape_of(z_ego)[0];
        if t == 0 {
            return Err(Error::Input("scorer: empty sequence".into()));
        }
        if s.g.shape_of(sampled_exo)[0] == 0 {
            return Err(Error::Input("ego scorer: empty demonstration selection".into()));
        }
        let att = self.attn.forward(s, z_ego, sampled_exo, None)?;
        let h = self.ffn.forward(s, att.out)?;
        let r = self.head.forward(s, h)?;
        s.g.reshape(r, &[t])
    }
}

/// Hard Top-K selection with a relaxed soft-inclusion companion.
///
/// Training mode perturbs the scores with Gumbel(0,1) noise scaled by
/// `gumbel_temp` before taking the Top-K; evaluation mode is the noiseless
/// Top-K of the raw scores. Soft scores come from K rounds of
/// softmax-without-replacement over the (perturbed) scores: round j
/// renormalizes over everything except the j-1 already-selected positions,
/// and each position accumulates its probability mass across rounds. The
/// hard indices are returned in ascending temporal order; gradients reach
/// the scorer only through the soft scores.
pub fn gumbel_topk(
    g: &Graph,
    r: Var,
    k: usize,
    gumbel_temp: f64,
    training: bool,
    rng: Option<&mut ChaCha12Rng>,
) -> Result<(Vec<usize>, Var)> {
    let t = g.shape_of(r);
    if t.len() != 1 {
        return Err(Error::Shape("gumbel_topk: scores must be a vector".into()));
    }
    let t = t[0];
    if k == 0 || k > t {
        return Err(Error::Config(format!(
            "gumbel_topk: K={k} outside [1, {t}]"
        )));
    }
    let z = if training {
        let rng = rng.ok_or_else(|| {
            Error::Config("gumbel_topk: training mode needs an RNG".into())
        })?;
        let noise: Vec<f64> = (0..t)
            .map(|_| {
                let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
                gumbel_temp * -(-u.ln()).ln()
            })
            .collect();
        let n = g.constant(Tensor::vector(noise))?;
        g.add(r, n)?
    } else {
        r
    };

    // selection order: descending perturbed score, ties by lower index
    let zv = g.value(z);
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| {
        zv.data()[b]
            .partial_cmp(&zv.data()[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let chosen = &order[..k];

    let mut soft: Option<Var> = None;
    let mut mask = vec![true; t];
    for (round, &pick) in chosen.iter().enumerate() {
        let p = if round == 0 {
            g.softmax(z, 0)?
        } else {
            g.softmax_masked(z, 0, Some(&mask))?
        };
        soft = Some(match soft {
            Some(acc) => g.add(acc, p)?,
            None => p,
        });
        mask[pick] = false;
    }
    let mut hard: Vec<usize> = chosen.to_vec();
    hard.sort_unstable();
    Ok((hard, soft.expect("k >= 1")))
}

/// Output of sampling one stream.
pub struct Selection {
    /// Ascending original frame indices of the kept frames.
    pub hard_indices: Vec<usize>,
    /// `[T]` soft inclusion scores (sum to K).
    pub soft_scores: Var,
    /// `[T]` residual gate g = 1 + alpha (Norm(s) - 1).
    pub gate: Var,
    /// `[K, d]` gated features gathered at the hard indices.
    pub gathered: Var,
}

/// Apply the residual gate and gather the kept frames in temporal order.
pub fn residual_gate_and_gather(
    g: &Graph,
    z: Var,
    soft: Var,
    hard: &[usize],
    alpha: f64,
) -> Result<Selection> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("gating strength alpha={alpha} outside (0, 1]")));
    }
    let t = g.shape_of(soft)[0];
    let sv = g.value(soft);
    if sv.data().iter().all(|&v| v.abs() < NORM_EPS) {
        warn("sampler: all-zero soft scores; normalization falls back to the epsilon floor");
    }
    // Norm(s) = s / (mean(s) + eps), so mean(Norm(s)) ~= 1
    let mean = g.mean_all(soft)?;
    let denom = g.add_scalar(mean, NORM_EPS)?;
    let denom_b = g.broadcast_scalar(denom, t)?;
    let normed = g.div(soft, denom_b)?;
    let gate = g.add_scalar(g.scale(g.add_scalar(normed, -1.0)?, alpha)?, 1.0)?;
    let gated = g.scale_rows(z, gate)?;
    let mut sorted = hard.to_vec();
    sorted.sort_unstable();
    let gathered = g.gather_rows(gated, &sorted)?;
    Ok(Selection { hard_indices: sorted, soft_scores: soft, gate, gathered })
}

/// Selection-entropy regularizer over both streams.
///
/// Soft scores are renormalized to probability distributions; each stream
/// contributes (1/log T) sum_t p_t log(p_t + eps), which is 0 for a one-hot
/// selection and -1 for a uniform one. Streams of length 1 contribute 0.
pub fn selection_entropy_loss(g: &Graph, soft_x: Var, soft_y: Var) -> Result<Var> {
    let term = |soft: Var| -> Result<Var> {
        let t = g.shape_of(soft)[0];
        if t <= 1 {
            return g.scalar(0.0);
        }
        let total = g.sum_all(soft)?;
        let denom = g.broadcast_scalar(g.add_scalar(total, NORM_EPS)?, t)?;
        let p = g.div(soft, denom)?;
        let logp = g.ln(g.add_scalar(p, ENTROPY_EPS)?)?;
        let ent = g.sum_all(g.mul(p, logp)?)?;
        g.scale(ent, 1.0 / (t as f64).ln())
    };
    let tx = term(soft_x)?;
    let ty = term(soft_y)?;
    g.add(tx, ty)
}

/// Variance-floor and off-diagonal-covariance penalties over the gated
/// tokens of both streams: per stream, tokens are centered, each feature
/// dimension pays (gamma - std)+ squared, and squared off-diagonal entries
/// of the sample covariance penalize collinearity. Streams with fewer than
/// two tokens contribute zero.
pub fn vicreg_loss(g: &Graph, tokens_exo: Var, tokens_ego: Var, gamma: f64) -> Result<Var> {
    let stream = |tokens: Var| -> Result<Var> {
        let shape = g.shape_of(tokens);
        let (k, d) = (shape[0], shape[1]);
        if k < 2 {
            warn("vicreg: stream with fewer than 2 tokens contributes 0");
            return g.scalar(0.0);
        }
        let mu = g.mean_axis(tokens, 0)?;
        let centered = g.add_row_bias(tokens, g.neg(mu)?)?;
        let sq = g.mul(centered, centered)?;
        let var = g.scale(g.sum_axis(sq, 0)?, 1.0 / (k as f64 - 1.0))?;
        let std = g.sqrt(g.add_scalar(var, VAR_EPS)?)?;
        let deficit = g.relu(g.neg(g.add_scalar(std, -gamma)?)?)?;
        let var_term = g.scale(g.sum_all(g.mul(deficit, deficit)?)?, 1.0 / d as f64)?;

        let cov = g.scale(
            g.matmul(g.transpose(centered)?, centered)?,
            1.0 / (k as f64 - 1.0),
        )?;
        let mut mask = Tensor::full(&[d, d], 1.0);
        for i in 0..d {
            mask.set(i, i, 0.0);
        }
        let off = g.mul(cov, g.constant(mask)?)?;
        let cov_term = g.scale(g.sum_all(g.mul(off, off)?)?, 1.0 / d as f64)?;
        g.add(var_term, cov_term)
    };
    let exo_term = stream(tokens_exo)?;
    let ego_term = stream(tokens_ego)?;
    g.add(exo_term, ego_term)
}

/// Both scorers plus the shared sampling pipeline.
pub struct AdaptiveSampler {
    pub exo: ExoScorer,
    pub ego: EgoScorer,
}

pub struct SamplerSettings {
    pub k: usize,
    pub alpha: f64,
    pub gumbel_temp: f64,
    pub training: bool,
}

impl AdaptiveSampler {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(AdaptiveSampler {
            exo: ExoScorer::new(store, rng, &format!("{name}.exo"), d, heads, hidden)?,
            ego: EgoScorer::new(store, rng, &format!("{name}.ego"), d, heads, hidden)?,
        })
    }

    /// Score and sample both streams; the demonstration is sampled first and
    /// conditions the imitation scorer.
    pub fn sample_pair(
        &self,
        s: &Session,
        z_exo: Var,
        z_ego: Var,
        settings: &SamplerSettings,
        mut rng: Option<&mut ChaCha12Rng>,
    ) -> Result<(Selection, Selection)> {
        let r_exo = self.exo.forward(s, z_exo)?;
        let (l_x, s_x) = gumbel_topk(
            &s.g,
            r_exo,
            settings.k,
            settings.gumbel_temp,
            settings.training,
            rng.as_deref_mut(),
        )?;
        let sel_exo = residual_gate_and_gather(&s.g, z_exo, s_x, &l_x, settings.alpha)?;

        let r_ego = self.ego.forward(s, z_ego, sel_exo.gathered)?;
        let (l_y, s_y) = gumbel_topk(
            &s.g,
            r_ego,
            settings.k,
            settings.gumbel_temp,
            settings.training,
            rng.as_deref_mut(),
        )?;
        let sel_ego = residual_gate_and_gather(&s.g, z_ego, s_y, &l_y, settings.alpha)?;
        Ok((sel_exo, sel_ego))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_model, FD_STEP};
    use rand::SeedableRng;

    fn mk(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    fn scorer_fixture(d: usize) -> (ParamStore, ExoScorer, EgoScorer) {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let exo = ExoScorer::new(&mut store, &mut rng, "exo", d, 2, 12).unwrap();
        let ego = EgoScorer::new(&mut store, &mut rng, "ego", d, 2, 12).unwrap();
        (store, exo, ego)
    }

    #[test]
    fn exo_scorer_single_frame() {
        let (store, exo, _) = scorer_fixture(8);
        let s = Session::frozen(&store);
        let z = s.g.constant(mk(1, 8, 5)).unwrap();
        let r = exo.forward(&s, z).unwrap();
        let v = s.g.value(r);
        assert_eq!(v.numel(), 1);
        assert!(v.data()[0].is_finite());
    }

    #[test]
    fn exo_scorer_rejects_empty() {
        let (store, exo, _) = scorer_fixture(8);
        let s = Session::frozen(&store);
        let z = s.g.constant(Tensor::zeros(&[0, 8])).unwrap();
        assert!(exo.forward(&s, z).is_err());
    }

    #[test]
    fn exo_scorer_is_permutation_equivariant() {
        // no positional information in the scorer, so permuting frames
        // permutes scores identically
        let (store, exo, _) = scorer_fixture(8);
        let z = mk(5, 8, 7);
        let perm = [3usize, 0, 4, 1, 2];
        let mut zp = Tensor::zeros(&[5, 8]);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                zp.set(dst, j, z.at(src, j));
            }
        }
        let s = Session::frozen(&store);
        let r = s.g.value(exo.forward(&s, s.g.constant(z).unwrap()).unwrap());
        let rp = s.g.value(exo.forward(&s, s.g.constant(zp).unwrap()).unwrap());
        for (dst, &src) in perm.iter().enumerate() {
            assert!((rp.data()[dst] - r.data()[src]).abs() < 1e-12);
        }
    }

    #[test]
    fn exo_scorer_gradcheck() {
        let (store, exo, _) = scorer_fixture(6);
        let z = mk(4, 6, 13);
        let report = grad_check_model(&store, &[z], FD_STEP, 1e-5, true, |s, vars| {
            let r = exo.forward(s, vars[0])?;
            s.g.sum_all(s.g.mul(r, r)?)
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn ego_scorer_duplicate_keys_are_a_noop() {
        let (store, _, ego) = scorer_fixture(8);
        let z_ego = mk(4, 8, 17);
        let exo1 = mk(3, 8, 19);
        let mut doubled = exo1.data().to_vec();
        doubled.extend_from_slice(exo1.data());
        let exo2 = Tensor::matrix(6, 8, doubled).unwrap();
        let s = Session::frozen(&store);
        let a = s.g.value(
            ego.forward(&s, s.g.constant(z_ego.clone()).unwrap(), s.g.constant(exo1).unwrap())
                .unwrap(),
        );
        let b = s.g.value(
            ego.forward(&s, s.g.constant(z_ego).unwrap(), s.g.constant(exo2).unwrap())
                .unwrap(),
        );
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ego_scorer_rejects_empty_selection() {
        let (store, _, ego) = scorer_fixture(8);
        let s = Session::frozen(&store);
        let z = s.g.constant(mk(4, 8, 23)).unwrap();
        let empty = s.g.constant(Tensor::zeros(&[0, 8])).unwrap();
        assert!(ego.forward(&s, z, empty).is_err());
    }

    #[test]
    fn ego_scorer_gradcheck() {
        let (store, _, ego) = scorer_fixture(6);
        let z = mk(3, 6, 29);
        let exo = mk(2, 6, 31);
        let report = grad_check_model(&store, &[z, exo], FD_STEP, 1e-5, true, |s, vars| {
            let r = ego.forward(s, vars[0], vars[1])?;
            s.g.sum_all(s.g.mul(r, r)?)
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn eval_topk_takes_largest_scores() {
        let store = ParamStore::new();
        let s = Session::frozen(&store);
        let r = s.g.constant(Tensor::vector(vec![0.9, 0.1, 0.5])).unwrap();
        let (l, soft) = gumbel_topk(&s.g, r, 2, 1.0, false, None).unwrap();
        assert_eq!(l, vec![0, 2]);
        let sv = s.g.value(soft);
        assert!((sv.data().iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn topk_with_k_equal_t_keeps_everything() {
        let store = ParamStore::new();
        let s = Session::frozen(&store);
        let r = s.g.constant(Tensor::vector(vec![0.2, -0.4, 0.9, 0.0])).unwrap();
        let (l, soft) = gumbel_topk(&s.g, r, 4, 1.0, false, None).unwrap();
        assert_eq!(l, vec![0, 1, 2, 3]);
        assert!(s.g.value(soft).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn topk_rejects_bad_k() {
        let store = ParamStore::new();
        let s = Session::frozen(&store);
        let r = s.g.constant(Tensor::vector(vec![0.1, 0.2])).unwrap();
        assert!(gumbel_topk(&s.g, r, 0, 1.0, false, None).is_err());
        assert!(gumbel_topk(&s.g, r, 3, 1.0, false, None).is_err());
    }

    #[test]
    fn training_topk_is_seed_deterministic() {
        let run = || {
            let store = ParamStore::new();
            let s = Session::frozen(&store);
            let r = s.g.constant(Tensor::vector(vec![0.3, 0.8, -0.1, 0.4, 0.0])).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            let (l, soft) = gumbel_topk(&s.g, r, 3, 1.0, true, Some(&mut rng)).unwrap();
            (l, s.g.value(soft).into_data())
        };
        let (l1, s1) = run();
        let (l2, s2) = run();
        assert_eq!(l1, l2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn constant_soft_scores_give_unit_gate() {
        let store = ParamStore::new();
        let s = Session::frozen(&store);
        let z = s.g.constant(mk(4, 3, 37)).unwrap();
        let soft = s.g.constant(Tensor::full(&[4], 0.7)).unwrap();
        let sel = residual_gate_and_gather(&s.g, z, soft, &[1, 3], 0.5).unwrap();
        let gate = s.g.value(sel.gate);
        for &v in gate.data() {
            assert!((v - 1.0).abs() < 1e-7);
        }
        let gathered = s.g.value(sel.gathered);
        let zv = s.g.value(z);
        for j in 0..3 {
            assert!((gathered.at(0, j) - zv.at(1, j)).abs() < 1e-7);
            assert!((gathered.at(1, j) - zv.at(3, j)).abs() < 1e-7);
        }
    }

    #[test]
    fn gate_formula_hand_case() {
        // s = [2, 0] has mean 1, so alpha=0.5 gives g = [1.5, 0.5]
        let store = ParamStore::new();
        let s = Session::frozen(&store);
        let z = s.g.constant(mk(2, 3, 41)).unwrap();
        let soft = s.g.constant(Tensor::vector(vec![2.0, 0.0])).unwrap();
        let sel = residual_gate_and_gather(&s.g, z, soft, &[0, 1], 0.5).unwrap();
        let gate = s.g.value(sel.gate);
        assert!((gate.data()[0] - 1.5).abs() < 1e-6);
        assert!((gate.data()[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn tiny_alpha_approaches_plain_gather() {
        let store = ParamStore::new();
        let s = Session::frozen(&store);
        let z = s.g.constant(mk(5, 4, 43)).unwrap();
        let soft = s.g.constant(Tensor::vector(vec![0.1, 2.0, 0.4, 1.4, 1.1])).unwrap();
        let sel = residual_gate_and_gather(&s.g, z, soft, &[0, 2, 4], 1e-9).unwrap();
        let gathered = s.g.value(sel.gathered);
        let zv = s.g.value(z);
        for (row, &src) in [0usize, 2, 4].iter().enumerate() {
            for j in 0..4 {
                assert!((gathered.at(row, j) - zv.at(src, j)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gather_order_is_temporal_regardless_of_scores() {
        let store = ParamStore::new();
        let s = Session::frozen(&store);
        let z = s.g.constant(mk(6, 2, 47)).unwrap();
        let soft = s.g.constant(Tensor::full(&[6], 1.0)).unwrap();
        // indices arrive unsorted (as if picked by descending score)
        let sel = residual_gate_and_gather(&s.g, z, soft, &[5, 0, 3], 0.5).unwrap();
        assert_eq!(sel.hard_indices, vec![0, 3, 5]);
    }

    #[test]
    fn selection_entropy_hand_values() {
        let store = ParamStore::new();
        let s = Session::frozen(&store);
        let one_hot = s.g.constant(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        let uniform = s.g.constant(Tensor::full(&[4], 0.25)).unwrap();
        let loss = selection_entropy_loss(&s.g, one_hot, one_hot).unwrap();
        assert!(s.g.value(loss).item().abs() < 1e-3);
        let loss = selection_entropy_loss(&s.g, uniform, uniform).unwrap();
        assert!((s.g.value(loss).item() + 2.0).abs() < 1e-3); // -1 per stream

        // T=2, s=[0.75, 0.25]: (0.75 ln 0.75 + 0.25 ln 0.25)/ln 2 = -0.8113
        let mixed = s.g.constant(Tensor::vector(vec![0.75, 0.25])).unwrap();
        let single = s.g.constant(Tensor::vector(vec![1.0])).unwrap(); // T=1 contributes 0
        let loss = selection_entropy_loss(&s.g, mixed, single).unwrap();
        assert!((s.g.value(loss).item() - (-0.811278)).abs() < 1e-3);
    }

    #[test]
    fn selection_entropy_decreases_when_mass_spreads() {
        let store = ParamStore::new();
        let s = Session::frozen(&store);
        let single = s.g.constant(Tensor::vector(vec![1.0])).unwrap();
        let concentrated = s.g.constant(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        let spread = s.g.constant(Tensor::vector(vec![0.5, 0.5, 0.0, 0.0])).unwrap();
        let lc = s.g.value(selection_entropy_loss(&s.g, concentrated, single).unwrap()).item();
        let ls = s.g.value(selection_entropy_loss(&s.g, spread, single).unwrap()).item();
        assert!(ls < lc, "spreading mass must lower the loss: {ls} vs {lc}");
    }

    #[test]
    fn vicreg_constant_tokens_pay_gamma_squared() {
        let store = ParamStore::new();
        let s = Session::frozen(&store);
        let tokens = s.g.constant(Tensor::matrix(3, 4, vec![0.3; 12]).unwrap()).unwrap();
        let loss = vicreg_loss(&s.g, tokens, tokens, 0.7).unwrap();
        // variance term gamma^2 per stream, covariance 0
        assert!((s.g.value(loss).item() - 2.0 * 0.49).abs() < 1e-9);
    }

    #[test]
    fn vicreg_anticorrelated_hand_case() {
        let store = ParamStore::new();
        let s = Session::frozen(&store);
        let tokens = s
            .g
            .constant(Tensor::matrix(2, 2, vec![1.0, -1.0, -1.0, 1.0]).unwrap())
            .unwrap();
        let loss = vicreg_loss(&s.g, tokens, tokens, 1.0).unwrap();
        // per stream: std = sqrt(2) >= 1 so var term 0; C = [[2,-2],[-2,2]],
        // off-diagonal squares sum 8, /d = 4
        assert!((s.g.value(loss).item() - 8.0).abs() < 1e-9);
    }

    #[test]
    fn vicreg_vanishes_for_decorrelated_gaussians() {
        let mut rng = ChaCha12Rng::seed_from_u64(53);
        let gauss = |rng: &mut ChaCha12Rng| {
            // Box-Muller
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let data_a: Vec<f64> = (0..512 * 8).map(|_| gauss(&mut rng)).collect();
        let data_b: Vec<f64> = (0..512 * 8).map(|_| gauss(&mut rng)).collect();
        let store = ParamStore::new();
        let s = Session::frozen(&store);
        let a = s.g.constant(Tensor::matrix(512, 8, data_a).unwrap()).unwrap();
        let b = s.g.constant(Tensor::matrix(512, 8, data_b).unwrap()).unwrap();
        let loss = vicreg_loss(&s.g, a, b, 1.0).unwrap();
        assert!(s.g.value(loss).item() < 0.2, "loss {}", s.g.value(loss).item());
    }

    #[test]
    fn vicreg_covariance_is_permutation_invariant() {
        let tokens = mk(6, 4, 59);
        let mut permuted_data = Vec::new();
        for &i in &[4usize, 1, 5, 0, 3, 2] {
            permuted_data.extend_from_slice(tokens.row(i));
        }
        let permuted = Tensor::matrix(6, 4, permuted_data).unwrap();
        let store = ParamStore::new();
        let s = Session::frozen(&store);
        let a = s.g.constant(tokens).unwrap();
        let b = s.g.constant(permuted).unwrap();
        let la = s.g.value(vicreg_loss(&s.g, a, a, 1.0).unwrap()).item();
        let lb = s.g.value(vicreg_loss(&s.g, b, b, 1.0).unwrap()).item();
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn eval_selection_is_pure() {
        let (store, exo, ego) = scorer_fixture(8);
        let sampler = AdaptiveSampler { exo, ego };
        let z_exo = mk(7, 8, 61);
        let z_ego = mk(9, 8, 67);
        let settings = SamplerSettings { k: 3, alpha: 0.5, gumbel_temp: 1.0, training: false };
        let run = || {
            let s = Session::frozen(&store);
            let ze = s.g.constant(z_exo.clone()).unwrap();
            let zg = s.g.constant(z_ego.clone()).unwrap();
            let (se, sg) = sampler.sample_pair(&s, ze, zg, &settings, None).unwrap();
            (
                se.hard_indices.clone(),
                sg.hard_indices.clone(),
                s.g.value(se.gathered).into_data(),
                s.g.value(sg.gathered).into_data(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn straight_through_path_reaches_scorer_params() {
        let (store, exo, ego) = scorer_fixture(8);
        let sampler = AdaptiveSampler { exo, ego };
        let s = Session::new(&store);
        let ze = s.g.leaf(mk(6, 8, 71), false).unwrap();
        let zg = s.g.leaf(mk(6, 8, 73), false).unwrap();
        let settings = SamplerSettings { k: 3, alpha: 0.5, gumbel_temp: 1.0, training: true };
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let (sel_e, sel_g) = sampler.sample_pair(&s, ze, zg, &settings, Some(&mut rng)).unwrap();
        let cat = s.g.concat_rows(&[sel_e.gathered, sel_g.gathered]).unwrap();
        let loss = s.g.sum_all(s.g.mul(cat, cat).unwrap()).unwrap();
        let grads = s.grads(loss).unwrap();
        let total: f64 = grads.iter().map(|g| g.max_abs()).sum();
        assert!(total > 0.0, "scorer gradients must be live through the gates");
    }
}
