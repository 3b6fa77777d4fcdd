//! The full align-fuse-detect pipeline.
//!
//! One forward pass takes a raw feature pair, samples both streams down to a
//! common length K (adaptively or by uniform stride when adaptive sampling
//! is disabled), injects temporal positions and view conditions, fuses the
//! streams, and decodes candidate events. Module toggles only change the
//! forward computation; every parameter is registered regardless, so configs
//! that differ in toggles still share identical seeded initializations.

use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;

use crate::config::{derive_seed, Config};
use crate::detector::{
    extract_predictions, inference_select, Detector, DetectorConfig, DetectorOutput,
};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionMode, GateGranularity};
use crate::graph::Var;
use crate::nn::positional_encoding;
use crate::objective::{LossWeights, Regularizers};
use crate::params::{ParamStore, Session};
use crate::sampler::{
    selection_entropy_loss, vicreg_loss, AdaptiveSampler, SamplerSettings, Selection,
};
use crate::sve::{dict_diversity_loss, inject, view_entropy_loss, ViewEmbedder, ViewSide};
use crate::synth::VideoPair;
use crate::tensor::Tensor;
use crate::types::EventPrediction;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub feature_dim: usize,
    pub detector: DetectorConfig,
    // sampling
    pub sampler_enabled: bool,
    pub k_ratio: f64,
    pub alpha: f64,
    pub gumbel_temp: f64,
    pub gamma_var: f64,
    pub sampler_heads: usize,
    pub sampler_hidden: usize,
    // view embeddings
    pub sve_enabled: bool,
    pub dict_size: usize,
    pub tau: f64,
    pub multi_level: bool,
    pub fixed_tokens: bool,
    pub sve_heads: usize,
    // fusion
    pub fusion_mode: FusionMode,
    pub gate_granularity: GateGranularity,
    pub force_gate: Option<f64>,
    // input ablation
    pub ego_only: bool,
    pub weights: LossWeights,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let detector = DetectorConfig {
            d_model: cfg.get_usize("det.d_model")?,
            levels: cfg.get_usize("det.levels")?,
            enc_layers: cfg.get_usize("det.enc_layers")?,
            dec_layers: cfg.get_usize("det.dec_layers")?,
            n_queries: cfg.get_usize("det.n_queries")?,
            heads: cfg.get_usize("det.heads")?,
            ffn_hidden: cfg.get_usize("det.ffn_hidden")?,
            gn_groups: cfg.get_usize("det.gn_groups")?,
        };
        let weights = LossWeights {
            alpha_giou: cfg.get_f64("loss.alpha_giou")?,
            alpha_cls: cfg.get_f64("loss.alpha_cls")?,
            beta_giou: cfg.get_f64("loss.beta_giou")?,
            beta_cls: cfg.get_f64("loss.beta_cls")?,
            beta_ec: cfg.get_f64("loss.beta_ec")?,
            beta_cap: cfg.get_f64("loss.beta_cap")?,
            focal_alpha: cfg.get_f64("loss.focal_alpha")?,
            focal_gamma: cfg.get_f64("loss.focal_gamma")?,
            lambda_imit: cfg.get_f64("loss.lambda_imit")?,
            lambda_sel: cfg.get_f64("sampler.lambda_sel")?,
            lambda_vic: cfg.get_f64("sampler.lambda_vic")?,
            lambda_view_ent: cfg.get_f64("sve.lambda_ent")?,
            lambda_dict_div: cfg.get_f64("sve.lambda_div")?,
        };
        let pc = PipelineConfig {
            feature_dim: cfg.get_usize("synth.d")?,
            detector,
            sampler_enabled: cfg.get_bool("sampler.enabled")?,
            k_ratio: cfg.get_f64("sampler.k_ratio")?,
            alpha: cfg.get_f64("sampler.alpha")?,
            gumbel_temp: cfg.get_f64("sampler.gumbel_temp")?,
            gamma_var: cfg.get_f64("sampler.gamma_var")?,
            sampler_heads: cfg.get_usize("sampler.heads")?,
            sampler_hidden: cfg.get_usize("sampler.ffn_hidden")?,
            sve_enabled: cfg.get_bool("sve.enabled")?,
            dict_size: cfg.get_usize("sve.M")?,
            tau: cfg.get_f64("sve.tau")?,
            multi_level: cfg.get_bool("sve.multi_level")?,
            fixed_tokens: cfg.get_bool("sve.fixed_tokens")?,
            sve_heads: cfg.get_usize("sve.heads")?,
            fusion_mode: FusionMode::parse(cfg.get("fusion.mode")?)?,
            gate_granularity: GateGranularity::parse(cfg.get("fusion.gate_granularity")?)?,
            force_gate: cfg.get_opt_f64("fusion.force_gate")?,
            ego_only: cfg.get_bool("model.ego_only")?,
            weights,
            seed: cfg.get_u64("train.seed")?,
        };
        pc.validate()?;
        Ok(pc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.feature_dim % 2 != 0 {
            return Err(Error::Config("feature dimension must be positive and even".into()));
        }
        if !(self.k_ratio > 0.0 && self.k_ratio <= 1.0) {
            return Err(Error::Config("sampler.k_ratio must be in (0, 1]".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config("sampler.alpha must be in (0, 1]".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("sve.tau must be positive".into()));
        }
        if self.dict_size < 2 {
            return Err(Error::Config("sve.M must be at least 2".into()));
        }
        if self.sve_enabled
            && self.multi_level
            && !self.fixed_tokens
            && self.feature_dim != self.detector.d_model
        {
            return Err(Error::Config(format!(
                "multi-level view-embedding injection shares one dictionary across the \
                 feature streams (width {}) and the encoder pyramid (width {}); set \
                 det.d_model = synth.d or disable sve.multi_level",
                self.feature_dim, self.detector.d_model
            )));
        }
        Ok(())
    }
}

/// Time-pooled column means, for the domain-gap probe.
fn pool_rows(t: &Tensor) -> Vec<f64> {
    let (r, c) = (t.rows(), t.cols());
    (0..c)
        .map(|j| (0..r).map(|i| t.at(i, j)).sum::<f64>() / r.max(1) as f64)
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub struct Model {
    pub cfg: PipelineConfig,
    pub store: ParamStore,
    pub sampler: AdaptiveSampler,
    pub sve: ViewEmbedder,
    pub fusion: Fusion,
    pub detector: Detector,
}

/// Everything one forward pass produces.
pub struct ForwardPass<'a> {
    pub session: Session<'a>,
    pub det_out: DetectorOutput,
    pub regs: Regularizers,
    /// Time-pooled (ego, exo) features before position/view injection.
    pub pre_inject_pooled: (Vec<f64>, Vec<f64>),
    /// Time-pooled (ego, exo) features after position/view injection.
    pub post_inject_pooled: (Vec<f64>, Vec<f64>),
}

impl Model {
    /// Registration order is fixed (sampler, dictionary, fusion, detector)
    /// and independent of the toggles.
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 0x1417));
        let d = cfg.feature_dim;
        let sampler = AdaptiveSampler::new(
            &mut store,
            &mut rng,
            "sampler",
            d,
            cfg.sampler_heads,
            cfg.sampler_hidden,
        )?;
        let sve = ViewEmbedder::new(&mut store, &mut rng, "sve", cfg.dict_size, d, cfg.sve_heads)?;
        let fusion = Fusion::new(&mut store, &mut rng, "fusion", d, cfg.sampler_heads, cfg.gate_granularity)?;
        let detector = Detector::with_input_dim(&mut store, &mut rng, "det", d, &cfg.detector)?;
        Ok(Model { cfg, store, sampler, sve, fusion, detector })
    }

    /// Shared number of kept frames per stream.
    pub fn kept_frames(&self, t_exo: usize, t_ego: usize) -> usize {
        let t_min = t_exo.min(t_ego);
        (((self.cfg.k_ratio * t_min as f64).round() as usize).max(1)).min(t_min)
    }

    pub fn forward<'a>(
        &'a self,
        pair: &VideoPair,
        training: bool,
        mut noise_rng: Option<&mut ChaCha12Rng>,
    ) -> Result<ForwardPass<'a>> {
        let s = if training {
            Session::new(&self.store)
        } else {
            Session::frozen(&self.store)
        };
        let d = self.cfg.feature_dim;
        if pair.z_exo.cols() != d || pair.z_ego.cols() != d {
            return Err(Error::Input(format!(
                "feature width {} / {} does not match the model's {d}",
                pair.z_exo.cols(),
                pair.z_ego.cols()
            )));
        }
        let exo_tensor = if self.cfg.ego_only {
            Tensor::zeros(&[pair.z_exo.rows(), d])
        } else {
            pair.z_exo.clone()
        };
        let (t_x, t_y) = (exo_tensor.rows(), pair.z_ego.rows());
        let z_exo = s.g.constant(exo_tensor)?;
        let z_ego = s.g.constant(pair.z_ego.clone())?;
        let k = self.kept_frames(t_x, t_y);

        // ── sample both streams down to K frames ─────────────────────
        let (sel_exo, sel_ego, sel_regs): (Selection, Selection, Option<(Var, Var)>) =
            if self.cfg.sampler_enabled {
                let settings = SamplerSettings {
                    k,
                    alpha: self.cfg.alpha,
                    gumbel_temp: self.cfg.gumbel_temp,
                    training,
                };
                let (se, sg) =
                    self.sampler
                        .sample_pair(&s, z_exo, z_ego, &settings, noise_rng.as_deref_mut())?;
                let sel = selection_entropy_loss(&s.g, se.soft_scores, sg.soft_scores)?;
                let vic = vicreg_loss(&s.g, se.gathered, sg.gathered, self.cfg.gamma_var)?;
                (se, sg, Some((sel, vic)))
            } else {
                let uniform = |t: usize| -> Vec<usize> {
                    (0..k).map(|i| i * t / k).collect()
                };
                let (ix, iy) = (uniform(t_x), uniform(t_y));
                let ge = s.g.gather_rows(z_exo, &ix)?;
                let gg = s.g.gather_rows(z_ego, &iy)?;
                let unit = s.g.constant(Tensor::full(&[1], 1.0))?;
                let mk = |gathered: Var, idx: Vec<usize>| Selection {
                    hard_indices: idx,
                    soft_scores: unit,
                    gate: unit,
                    gathered,
                };
                (mk(ge, ix), mk(gg, iy), None)
            };

        let pre_inject_pooled = (
            pool_rows(&s.g.value(sel_ego.gathered)),
            pool_rows(&s.g.value(sel_exo.gathered)),
        );

        // ── positions (original indices) + view conditions ───────────
        let pe_exo_table = s.g.constant(positional_encoding(t_x, d)?)?;
        let pe_ego_table = s.g.constant(positional_encoding(t_y, d)?)?;
        let pe_exo = s.g.gather_rows(pe_exo_table, &sel_exo.hard_indices)?;
        let pe_ego = s.g.gather_rows(pe_ego_table, &sel_ego.hard_indices)?;

        let mut alphas: Vec<Var> = Vec::new();
        let (ve_exo, ve_ego) = if self.cfg.sve_enabled {
            if self.cfg.fixed_tokens {
                (
                    self.sve.fixed(&s, k, ViewSide::Exo)?,
                    self.sve.fixed(&s, k, ViewSide::Ego)?,
                )
            } else {
                let (ve_x, a_x) = self.sve.compute(&s, sel_exo.gathered, self.cfg.tau)?;
                let (ve_e, a_e) = self.sve.compute(&s, sel_ego.gathered, self.cfg.tau)?;
                alphas.push(a_x);
                alphas.push(a_e);
                (ve_x, ve_e)
            }
        } else {
            let zx = s.g.constant(Tensor::zeros(&[k, d]))?;
            let ze = s.g.constant(Tensor::zeros(&[k, d]))?;
            (zx, ze)
        };
        let z_tilde_exo = inject(&s.g, sel_exo.gathered, pe_exo, ve_exo)?;
        let z_tilde_ego = inject(&s.g, sel_ego.gathered, pe_ego, ve_ego)?;

        let post_inject_pooled = (
            pool_rows(&s.g.value(z_tilde_ego)),
            pool_rows(&s.g.value(z_tilde_exo)),
        );

        // ── fuse and detect ──────────────────────────────────────────
        let fused = self
            .fusion
            .forward(&s, z_tilde_ego, z_tilde_exo, self.cfg.fusion_mode, self.cfg.force_gate)?;
        let sve_for_detector = (self.cfg.sve_enabled && self.cfg.multi_level && !self.cfg.fixed_tokens)
            .then_some((&self.sve, self.cfg.tau));
        let det_out = self.detector.forward(&s, fused.fused, sve_for_detector)?;
        alphas.extend(det_out.sve_alphas.iter().copied());

        let regs = Regularizers {
            sel: sel_regs.as_ref().map(|(sel, _)| *sel),
            vic: sel_regs.as_ref().map(|(_, vic)| *vic),
            view_ent: if alphas.is_empty() {
                None
            } else {
                Some(view_entropy_loss(&s.g, &alphas, self.cfg.dict_size)?)
            },
            dict_div: if self.cfg.sve_enabled && !self.cfg.fixed_tokens {
                Some(dict_diversity_loss(&s.g, s.p(self.sve.dict)?)?)
            } else {
                None
            },
        };
        Ok(ForwardPass {
            session: s,
            det_out,
            regs,
            pre_inject_pooled,
            post_inject_pooled,
        })
    }

    /// Deterministic inference: final-layer predictions filtered by the
    /// count head.
    pub fn infer(&self, pair: &VideoPair) -> Result<Vec<EventPrediction>> {
        let fwd = self.forward(pair, false, None)?;
        let last = fwd.det_out.per_layer.last().expect("decoder layers");
        let all = extract_predictions(&fwd.session, last);
        let count_probs = fwd.session.g.value(last.count_probs).into_data();
        Ok(inference_select(&all, &count_probs))
    }
}
