//! Bidirectional cross-attention fusion with learnable gated residual mixing.
//!
//! Each view retrieves evidence from the other through its own attention
//! parameters; a sigmoid gate decides per position (or per channel) how much
//! retrieved evidence replaces the native features, and the two gated streams
//! are averaged into one fused sequence. The simpler fusion baselines
//! (channel concat, time concat, single-direction gating) live behind the
//! same interface so ablations are a config switch.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Linear, Mha};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Bidirectional cross-attention with gated residual mixing.
    Bix,
    /// Only the demonstration->imitation direction retrieves (the reverse
    /// gate is frozen at 0).
    ExoToEgo,
    /// Only the imitation->demonstration direction retrieves.
    EgoToExo,
    /// Channel concatenation followed by a linear projection back to d.
    ConcatChannel,
    /// Temporal concatenation (sequence length doubles).
    ConcatTime,
    /// No cross-view exchange at all: streams pass through and are averaged.
    Passthrough,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bix" => Ok(FusionMode::Bix),
            "exo2ego" => Ok(FusionMode::ExoToEgo),
            "ego2exo" => Ok(FusionMode::EgoToExo),
            "concat_channel" => Ok(FusionMode::ConcatChannel),
            "concat_time" => Ok(FusionMode::ConcatTime),
            "passthrough" => Ok(FusionMode::Passthrough),
            "bix_deformable" => Err(Error::Config(
                "fusion.mode=bix_deformable is reserved but not implemented; use bix".into(),
            )),
            other => Err(Error::Config(format!("unknown fusion.mode '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Bix => "bix",
            FusionMode::ExoToEgo => "exo2ego",
            FusionMode::EgoToExo => "ego2exo",
            FusionMode::ConcatChannel => "concat_channel",
            FusionMode::ConcatTime => "concat_time",
            FusionMode::Passthrough => "passthrough",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateGranularity {
    /// One scalar gate per time step.
    Position,
    /// One gate per time step and channel.
    Channel,
}

impl GateGranularity {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "position" => Ok(GateGranularity::Position),
            "channel" => Ok(GateGranularity::Channel),
            other => Err(Error::Config(format!("unknown fusion.gate_granularity '{other}'"))),
        }
    }
}

pub struct FusionOutput {
    /// Fused sequence fed to the detector.
    pub fused: Var,
    /// Gate values actually applied, for inspection (None for the concat
    /// and passthrough baselines).
    pub gamma_ego: Option<Var>,
    pub gamma_exo: Option<Var>,
}

pub struct Fusion {
    attn_exo_to_ego: Mha, // imitation queries retrieve from demonstration
    attn_ego_to_exo: Mha,
    gate_ego: Linear, // gamma^e = sigmoid(W_e [Z~ego ; E*])
    gate_exo: Linear,
    concat_proj: Linear,
    pub granularity: GateGranularity,
    pub d: usize,
}

impl Fusion {
    /// Registers every fusion parameter regardless of the mode that will run,
    /// so configs that differ only in `FusionMode` share identical parameter
    /// layouts and seeded initializations.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d: usize,
        heads: usize,
        granularity: GateGranularity,
    ) -> Result<Self> {
        let gate_out = match granularity {
            GateGranularity::Position => 1,
            GateGranularity::Channel => d,
        };
        Ok(Fusion {
            attn_exo_to_ego: Mha::new(store, rng, &format!("{name}.exo2ego"), d, heads)?,
            attn_ego_to_exo: Mha::new(store, rng, &format!("{name}.ego2exo"), d, heads)?,
            gate_ego: Linear::new(store, rng, &format!("{name}.gate_ego"), 2 * d, gate_out, false),
            gate_exo: Linear::new(store, rng, &format!("{name}.gate_exo"), 2 * d, gate_out, false),
            concat_proj: Linear::new(store, rng, &format!("{name}.concat_proj"), 2 * d, d, true),
            granularity,
            d,
        })
    }

    /// E* = CrossAttn(Z~ego, Z~exo), X* = CrossAttn(Z~exo, Z~ego), computed
    /// with independent parameter sets.
    pub fn bidirectional(&self, s: &Session, z_ego: Var, z_exo: Var) -> Result<(Var, Var)> {
        if s.g.shape_of(z_ego)[0] == 0 || s.g.shape_of(z_exo)[0] == 0 {
            return Err(Error::Input("fusion: empty stream".into()));
        }
        let e_star = self.attn_exo_to_ego.forward(s, z_ego, z_exo, None)?.out;
        let x_star = self.attn_ego_to_exo.forward(s, z_exo, z_ego, None)?.out;
        Ok((e_star, x_star))
    }

    /// F = (1 - gamma) Z~ + gamma retrieved, gamma = sigmoid(W [Z~ ; retrieved]).
    /// `forced_gate` bypasses the learned gate with a constant (ablations and
    /// the no-fusion identity).
    pub fn gated_mix(
        &self,
        s: &Session,
        z: Var,
        retrieved: Var,
        gate: &Linear,
        forced_gate: Option<f64>,
    ) -> Result<(Var, Var)> {
        let shape = s.g.shape_of(z);
        if s.g.shape_of(retrieved) != shape {
            return Err(Error::Shape("gated_mix: stream/retrieved shape mismatch".into()));
        }
        let k = shape[0];
        let gamma = match forced_gate {
            Some(v) => {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!("forced gate {v} outside [0, 1]")));
                }
                match self.granularity {
                    GateGranularity::Position => s.g.constant(Tensor::full(&[k], v))?,
                    GateGranularity::Channel => s.g.constant(Tensor::full(&[k, self.d], v))?,
                }
            }
            None => {
                let cat = s.g.concat_cols(&[z, retrieved])?;
                let logits = gate.forward(s, cat)?;
                match self.granularity {
                    GateGranularity::Position => s.g.sigmoid(s.g.reshape(logits, &[k])?)?,
                    GateGranularity::Channel => s.g.sigmoid(logits)?,
                }
            }
        };
        let f = match self.granularity {
            GateGranularity::Position => {
                let keep = s.g.add_scalar(s.g.neg(gamma)?, 1.0)?;
                s.g.add(s.g.scale_rows(z, keep)?, s.g.scale_rows(retrieved, gamma)?)?
            }
            GateGranularity::Channel => {
                let keep = s.g.add_scalar(s.g.neg(gamma)?, 1.0)?;
                s.g.add(s.g.mul(z, keep)?, s.g.mul(retrieved, gamma)?)?
            }
        };
        Ok((f, gamma))
    }

    /// Full fusion dispatch. Gate overrides apply to the BiX family; the
    /// single-direction modes are BiX with one gate frozen at zero.
    pub fn forward(
        &self,
        s: &Session,
        z_ego: Var,
        z_exo: Var,
        mode: FusionMode,
        force_gate: Option<f64>,
    ) -> Result<FusionOutput> {
        let k_ego = s.g.shape_of(z_ego)[0];
        let k_exo = s.g.shape_of(z_exo)[0];
        if mode != FusionMode::ConcatTime && k_ego != k_exo {
            return Err(Error::Input(format!(
                "fusion: stream lengths {k_ego} vs {k_exo} must match; \
                 set sampler k_ratio equal for both streams"
            )));
        }
        match mode {
            FusionMode::Passthrough => Ok(FusionOutput {
                fused: fuse(s, z_ego, z_exo)?,
                gamma_ego: None,
                gamma_exo: None,
            }),
            FusionMode::ConcatChannel => {
                let cat = s.g.concat_cols(&[z_exo, z_ego])?;
                Ok(FusionOutput {
                    fused: self.concat_proj.forward(s, cat)?,
                    gamma_ego: None,
                    gamma_exo: None,
                })
            }
            FusionMode::ConcatTime => Ok(FusionOutput {
                fused: s.g.concat_rows(&[z_exo, z_ego])?,
                gamma_ego: None,
                gamma_exo: None,
            }),
            FusionMode::Bix | FusionMode::ExoToEgo | FusionMode::EgoToExo => {
                let (e_star, x_star) = self.bidirectional(s, z_ego, z_exo)?;
                let ego_force = match mode {
                    FusionMode::EgoToExo => Some(0.0),
                    _ => force_gate,
                };
                let exo_force = match mode {
                    FusionMode::ExoToEgo => Some(0.0),
                    _ => force_gate,
                };
                let (f_ego, gamma_e) = self.gated_mix(s, z_ego, e_star, &self.gate_ego, ego_force)?;
                let (f_exo, gamma_x) = self.gated_mix(s, z_exo, x_star, &self.gate_exo, exo_force)?;
                Ok(FusionOutput {
                    fused: fuse(s, f_ego, f_exo)?,
                    gamma_ego: Some(gamma_e),
                    gamma_exo: Some(gamma_x),
                })
            }
        }
    }
}

/// Elementwise mean of the two gated streams.
pub fn fuse(s: &Session, f_ego: Var, f_exo: Var) -> Result<Var> {
    if s.g.shape_of(f_ego) != s.g.shape_of(f_exo) {
        return Err(Error::Input(
            "fuse: stream lengths must match; set sampler k_ratio equal for both streams".into(),
        ));
    }
    s.g.scale(s.g.add(f_ego, f_exo)?, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_model, FD_STEP};
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

    fn fixture(d: usize) -> (ParamStore, Fusion) {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, &mut rng, "fusion", d, 2, GateGranularity::Position).unwrap();
        (store, f)
    }

    #[test]
    fn single_exo_token_retrieval_is_constant() {
        let (store, fusion) = fixture(8);
        let s = Session::frozen(&store);
        let z_ego = s.g.constant(mk(4, 8, 1)).unwrap();
        let z_exo = s.g.constant(mk(1, 8, 2)).unwrap();
        let (e_star, _) = fusion.bidirectional(&s, z_ego, z_exo).unwrap();
        let e = s.g.value(e_star);
        for i in 1..4 {
            for j in 0..8 {
                assert!((e.at(i, j) - e.at(0, j)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn directions_use_independent_parameters() {
        let (store, fusion) = fixture(8);
        let s = Session::frozen(&store);
        let a = s.g.constant(mk(3, 8, 3)).unwrap();
        let b = s.g.constant(mk(3, 8, 4)).unwrap();
        let (e1, x1) = fusion.bidirectional(&s, a, b).unwrap();
        let (e2, x2) = fusion.bidirectional(&s, b, a).unwrap();
        // swapping inputs swaps which parameter set sees which stream:
        // the e-direction on (b, a) is NOT the x-direction on (a, b)
        let e2v = s.g.value(e2);
        let x1v = s.g.value(x1);
        let diff = e2v
            .data()
            .iter()
            .zip(x1v.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-6, "direction parameters must be independent");
        let _ = (e1, x2);
    }

    #[test]
    fn bidirectional_gradcheck() {
        let (store, fusion) = fixture(6);
        let ego = mk(3, 6, 5);
        let exo = mk(2, 6, 6);
        let report = grad_check_model(&store, &[ego, exo], FD_STEP, 1e-5, true, |s, vars| {
            let (e_star, x_star) = fusion.bidirectional(s, vars[0], vars[1])?;
            let se = s.g.sum_all(s.g.mul(e_star, e_star)?)?;
            let sx = s.g.sum_all(s.g.mul(x_star, x_star)?)?;
            s.g.add(se, sx)
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn forced_gate_limits() {
        let (store, fusion) = fixture(8);
        let s = Session::frozen(&store);
        let z = s.g.constant(mk(4, 8, 7)).unwrap();
        let r = s.g.constant(mk(4, 8, 8)).unwrap();
        let (f0, _) = fusion.gated_mix(&s, z, r, &fusion.gate_ego, Some(0.0)).unwrap();
        assert_eq!(s.g.value(f0), s.g.value(z), "gate 0 must be the identity");
        let (f1, _) = fusion.gated_mix(&s, z, r, &fusion.gate_ego, Some(1.0)).unwrap();
        assert_eq!(s.g.value(f1), s.g.value(r), "gate 1 must pass retrieved through");
    }

    #[test]
    fn half_gate_arithmetic() {
        // gamma = 0.5 and Z~ = 2 * retrieved gives F = 1.5 * retrieved
        let (store, fusion) = fixture(8);
        let s = Session::frozen(&store);
        let r = s.g.constant(mk(3, 8, 9)).unwrap();
        let z = s.g.scale(r, 2.0).unwrap();
        let (f, _) = fusion.gated_mix(&s, z, r, &fusion.gate_ego, Some(0.5)).unwrap();
        let fv = s.g.value(f);
        let rv = s.g.value(r);
        for (a, b) in fv.data().iter().zip(rv.data()) {
            assert!((a - 1.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn learned_gates_stay_in_open_unit_interval() {
        let (store, fusion) = fixture(8);
        let s = Session::frozen(&store);
        let z = s.g.constant(mk(5, 8, 10)).unwrap();
        let r = s.g.constant(mk(5, 8, 11)).unwrap();
        let (_, gamma) = fusion.gated_mix(&s, z, r, &fusion.gate_ego, None).unwrap();
        for &v in s.g.value(gamma).data() {
            assert!(v.is_finite() && v > 0.0 && v < 1.0, "gate {v}");
        }
    }

    #[test]
    fn fuse_identity_cancellation_and_symmetry() {
        let store = ParamStore::new();
        let s = Session::frozen(&store);
        let f = s.g.constant(mk(3, 4, 12)).unwrap();
        assert_eq!(s.g.value(fuse(&s, f, f).unwrap()), s.g.value(f));

        let neg = s.g.neg(f).unwrap();
        let zero = s.g.value(fuse(&s, f, neg).unwrap());
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let a = s.g.constant(mk(3, 4, 13)).unwrap();
        let b = s.g.constant(mk(3, 4, 14)).unwrap();
        assert_eq!(
            s.g.value(fuse(&s, a, b).unwrap()),
            s.g.value(fuse(&s, b, a).unwrap())
        );
    }

    #[test]
    fn fuse_length_mismatch_names_the_remedy() {
        let store = ParamStore::new();
        let s = Session::frozen(&store);
        let a = s.g.constant(mk(3, 4, 15)).unwrap();
        let b = s.g.constant(mk(4, 4, 16)).unwrap();
        let err = fuse(&s, a, b).unwrap_err();
        assert!(format!("{err}").contains("k_ratio"));
    }

    #[test]
    fn concat_baselines_have_expected_shapes() {
        let (store, fusion) = fixture(8);
        let s = Session::frozen(&store);
        let ego = s.g.constant(mk(4, 8, 17)).unwrap();
        let exo = s.g.constant(mk(4, 8, 18)).unwrap();
        let ch = fusion.forward(&s, ego, exo, FusionMode::ConcatChannel, None).unwrap();
        assert_eq!(s.g.shape_of(ch.fused), vec![4, 8]);
        let tm = fusion.forward(&s, ego, exo, FusionMode::ConcatTime, None).unwrap();
        assert_eq!(s.g.shape_of(tm.fused), vec![8, 8]);
    }

    #[test]
    fn single_direction_modes_freeze_the_opposite_gate() {
        let (store, fusion) = fixture(8);
        let s = Session::frozen(&store);
        let ego = s.g.constant(mk(4, 8, 19)).unwrap();
        let exo = s.g.constant(mk(4, 8, 20)).unwrap();
        let out = fusion.forward(&s, ego, exo, FusionMode::ExoToEgo, None).unwrap();
        let gx = s.g.value(out.gamma_exo.unwrap());
        assert!(gx.data().iter().all(|&v| v == 0.0));
        let ge = s.g.value(out.gamma_ego.unwrap());
        assert!(ge.data().iter().all(|&v| v > 0.0 && v < 1.0));

        let out = fusion.forward(&s, ego, exo, FusionMode::EgoToExo, None).unwrap();
        let ge = s.g.value(out.gamma_ego.unwrap());
        assert!(ge.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_granularity_gates_have_full_shape() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let mut store = ParamStore::new();
        let fusion =
            Fusion::new(&mut store, &mut rng, "fusion", 8, 2, GateGranularity::Channel).unwrap();
        let s = Session::frozen(&store);
        let ego = s.g.constant(mk(4, 8, 24)).unwrap();
        let exo = s.g.constant(mk(4, 8, 25)).unwrap();
        let out = fusion.forward(&s, ego, exo, FusionMode::Bix, None).unwrap();
        assert_eq!(s.g.shape_of(out.gamma_ego.unwrap()), vec![4, 8]);
    }
}
