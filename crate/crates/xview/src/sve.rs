//! Scene-adaptive view embeddings from a shared prototype dictionary.
//!
//! Each frame queries an M×d dictionary through temperature-scaled
//! cross-attention, producing a per-frame view condition that is added to the
//! features together with the temporal position rows. The same dictionary
//! serves both views and every encoder level. Two regularizers keep it
//! honest: attention rows are pulled toward uniform (normalized KL) and
//! dictionary rows toward orthogonality (Frobenius deviation of the Gram
//! matrix from identity).

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Mha;
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::tensor::Tensor;
use crate::warn;

/// Epsilon inside the entropy log. Much smaller than the generic guard so
/// the uniform/one-hot anchors hold to 1e-9.
pub const ENT_EPS: f64 = 1e-12;
const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewSide {
    Exo,
    Ego,
}

pub struct ViewEmbedder {
    /// Prototype dictionary, `[M, d]`.
    pub dict: ParamId,
    pub attn: Mha,
    /// Learnable per-view tokens for the fixed-embedding ablation, `[1, d]`.
    pub fixed_exo: ParamId,
    pub fixed_ego: ParamId,
    pub m: usize,
    pub d: usize,
}

impl ViewEmbedder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        m: usize,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if m < 2 {
            return Err(Error::Config(format!("dictionary needs M >= 2 prototypes, got {m}")));
        }
        Ok(ViewEmbedder {
            dict: store.register(&format!("{name}.dict"), &[m, d], Init::UniformFanIn, rng),
            attn: Mha::new(store, rng, &format!("{name}.attn"), d, heads)?,
            fixed_exo: store.register(&format!("{name}.fixed_exo"), &[1, d], Init::UniformFanIn, rng),
            fixed_ego: store.register(&format!("{name}.fixed_ego"), &[1, d], Init::UniformFanIn, rng),
            m,
            d,
        })
    }

    /// Adaptive view embedding for a `[K, d]` sequence: queries are scaled by
    /// 1/tau and attend over the dictionary. Returns the embedding and the
    /// `[K, M]` attention rows for regularization.
    pub fn compute(&self, s: &Session, zhat: Var, tau: f64) -> Result<(Var, Var)> {
        if tau <= 0.0 {
            return Err(Error::Config(format!("dictionary temperature tau={tau} must be > 0")));
        }
        let q = s.g.scale(zhat, 1.0 / tau)?;
        let out = self.attn.forward(s, q, s.p(self.dict)?, None)?;
        Ok((out.out, out.attn))
    }

    /// Fixed-token ablation: one learnable embedding per view, broadcast
    /// over the sequence.
    pub fn fixed(&self, s: &Session, k: usize, side: ViewSide) -> Result<Var> {
        let token = match side {
            ViewSide::Exo => self.fixed_exo,
            ViewSide::Ego => self.fixed_ego,
        };
        s.g.gather_rows(s.p(token)?, &vec![0; k])
    }
}

/// Z-tilde = Z-hat + PE + VE. `pe_rows` must already be gathered at the
/// frames' original (pre-sampling) positions.
pub fn inject(g: &Graph, zhat: Var, pe_rows: Var, ve: Var) -> Result<Var> {
    let shape = g.shape_of(zhat);
    if g.shape_of(pe_rows) != shape || g.shape_of(ve) != shape {
        return Err(Error::Shape(format!(
            "inject: shapes {:?} / {:?} / {:?} must match",
            shape,
            g.shape_of(pe_rows),
            g.shape_of(ve)
        )));
    }
    g.add(g.add(zhat, pe_rows)?, ve)
}

/// Add a freshly computed view embedding to every pyramid level (attention
/// recomputed per level against the shared dictionary). Returns the modified
/// levels and each level's attention rows.
pub fn multi_level_inject(
    embedder: &ViewEmbedder,
    s: &Session,
    levels: &[Var],
    tau: f64,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut injected = Vec::with_capacity(levels.len());
    let mut alphas = Vec::with_capacity(levels.len());
    for &level in levels {
        let (ve, alpha) = embedder.compute(s, level, tau)?;
        injected.push(s.g.add(level, ve)?);
        alphas.push(alpha);
    }
    Ok((injected, alphas))
}

/// Normalized KL of attention rows to uniform: 0 when every row is uniform,
/// 1 when every row is one-hot. Rows from multiple sources are averaged
/// together.
pub fn view_entropy_loss(g: &Graph, alphas: &[Var], m: usize) -> Result<Var> {
    if m < 2 {
        return Err(Error::Config("view entropy needs M >= 2".into()));
    }
    let rows = if alphas.len() == 1 {
        alphas[0]
    } else {
        g.concat_rows(alphas)?
    };
    let shape = g.shape_of(rows);
    if shape.len() != 2 || shape[1] != m {
        return Err(Error::Shape(format!(
            "view entropy: expected [*, {m}] attention rows, got {shape:?}"
        )));
    }
    let t = shape[0];
    // KL(alpha || U_M) = sum alpha ln alpha + ln M, per row
    let logp = g.ln(g.add_scalar(rows, ENT_EPS)?)?;
    let neg_ent = g.sum_all(g.mul(rows, logp)?)?;
    let mean_neg_ent = g.scale(neg_ent, 1.0 / t as f64)?;
    let kl = g.add_scalar(mean_neg_ent, (m as f64).ln())?;
    g.scale(kl, 1.0 / (m as f64).ln())
}

/// Frobenius deviation of the row-normalized dictionary Gram matrix from
/// identity; zero iff rows are orthonormal after normalization.
pub fn dict_diversity_loss(g: &Graph, dict: Var) -> Result<Var> {
    let shape = g.shape_of(dict);
    if shape.len() != 2 {
        return Err(Error::Shape("dictionary must be a matrix".into()));
    }
    let m = shape[0];
    let dv = g.value(dict);
    for i in 0..m {
        let norm_sq: f64 = dv.row(i).iter().map(|v| v * v).sum();
        if norm_sq.sqrt() < NORM_EPS {
            warn("dictionary row with near-zero norm; normalization uses the epsilon floor");
            break;
        }
    }
    let sq = g.mul(dict, dict)?;
    let norms = g.sqrt(g.sum_axis(sq, 1)?)?; // [M]
    let ones = g.constant(Tensor::full(&[m], 1.0))?;
    let inv = g.div(ones, g.add_scalar(norms, NORM_EPS)?)?;
    let normalized = g.scale_rows(dict, inv)?;
    let gram = g.matmul(normalized, g.transpose(normalized)?)?;
    let mut eye = Tensor::zeros(&[m, m]);
    for i in 0..m {
        eye.set(i, i, 1.0);
    }
    let diff = g.sub(gram, g.constant(eye)?)?;
    g.sum_all(g.mul(diff, diff)?)
}
