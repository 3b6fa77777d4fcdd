//! Neural building blocks: linear maps, feed-forward networks, multi-head
//! attention, and sinusoidal temporal position encodings.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// y = x W + b, with W stored as `[in, out]`.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), &[in_dim, out_dim], Init::UniformFanIn, rng);
        let b = bias.then(|| store.register(&format!("{name}.b"), &[out_dim], Init::Zeros, rng));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let y = s.g.matmul(x, s.p(self.w)?)?;
        match self.b {
            Some(b) => s.g.add_row_bias(y, s.p(b)?),
            None => Ok(y),
        }
    }
}

/// Two-layer position-wise feed-forward network with GELU.
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
}

impl Ffn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d: usize,
        hidden: usize,
        out: usize,
    ) -> Self {
        Ffn {
            l1: Linear::new(store, rng, &format!("{name}.l1"), d, hidden, true),
            l2: Linear::new(store, rng, &format!("{name}.l2"), hidden, out, true),
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let h = self.l1.forward(s, x)?;
        let h = s.g.gelu(h)?;
        self.l2.forward(s, h)
    }
}

pub struct MhaOutput {
    pub out: Var,
    /// Attention probabilities averaged over heads, `[Tq, Tk]`; rows sum to 1.
    pub attn: Var,
}

/// Multi-head scaled dot-product attention. Projections carry no biases so
/// that zero queries attend uniformly (the temperature-limit behaviour the
/// dictionary module relies on).
pub struct Mha {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub d: usize,
    pub heads: usize,
}

impl Mha {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention: model dim {d} not divisible by {heads} heads"
            )));
        }
        Ok(Mha {
            wq: store.register(&format!("{name}.wq"), &[d, d], Init::UniformFanIn, rng),
            wk: store.register(&format!("{name}.wk"), &[d, d], Init::UniformFanIn, rng),
            wv: store.register(&format!("{name}.wv"), &[d, d], Init::UniformFanIn, rng),
            wo: store.register(&format!("{name}.wo"), &[d, d], Init::UniformFanIn, rng),
            d,
            heads,
        })
    }

    /// Cross-attention of `q` over `kv`; self-attention is `q == kv`.
    /// `key_mask[j] == false` excludes key j from every query's softmax.
    pub fn forward(&self, s: &Session, q: Var, kv: Var, key_mask: Option<&[bool]>) -> Result<MhaOutput> {
        let tq = s.g.shape_of(q)[0];
        let tk = s.g.shape_of(kv)[0];
        if tk == 0 {
            return Err(Error::Input("attention: empty key/value sequence".into()));
        }
        let qp = s.g.matmul(q, s.p(self.wq)?)?;
        let kp = s.g.matmul(kv, s.p(self.wk)?)?;
        let vp = s.g.matmul(kv, s.p(self.wv)?)?;
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut attn_sum: Option<Var> = None;
        for h in 0..self.heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = s.g.slice_cols(qp, c0, c1)?;
            let kh = s.g.slice_cols(kp, c0, c1)?;
            let vh = s.g.slice_cols(vp, c0, c1)?;
            let logits = s.g.scale(s.g.matmul(qh, s.g.transpose(kh)?)?, scale)?;
            let probs = s.g.softmax_masked(logits, 1, key_mask)?;
            head_outs.push(s.g.matmul(probs, vh)?);
            attn_sum = Some(match attn_sum {
                Some(acc) => s.g.add(acc, probs)?,
                None => probs,
            });
        }
        let concat = s.g.concat_cols(&head_outs)?;
        let out = s.g.matmul(concat, s.p(self.wo)?)?;
        let attn = s.g.scale(attn_sum.expect("at least one head"), 1.0 / self.heads as f64)?;
        debug_assert_eq!(s.g.shape_of(attn), vec![tq, tk]);
        Ok(MhaOutput { out, attn })
    }
}

/// Sinusoidal temporal encoding for a length-T sequence.
///
/// Positions are normalized by the sequence length before entering the usual
/// sin/cos ladder, so row t encodes *where in the video* frame t sits. This
/// is what lets span regression (which works in normalized time) read
/// positions off the features regardless of the raw video length.
pub fn positional_encoding(t_len: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even dimension, got {d}"
        )));
    }
    const SPAN: f64 = 128.0; // normalized positions are stretched over [0, SPAN)
    let mut data = vec![0.0; t_len * d];
    for t in 0..t_len {
        let pos = (t as f64) / (t_len as f64) * SPAN;
        for i in 0..d / 2 {
            let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[t * d + 2 * i] = (pos * omega).sin();
            data[t * d + 2 * i + 1] = (pos * omega).cos();
        }
    }
    Tensor::matrix(t_len, d, data)
}
