//! Synthetic paired-sequence benchmark.
//!
//! Each pair shares a set of random unit-vector step prototypes. The
//! demonstration lays the steps out in order with low-norm filler frames
//! interleaved (redundancy); the imitation replays the same steps with
//! independently warped durations, a constant view-offset vector, and a
//! per-step chance of corruption (the prototype rotated toward a random
//! direction). Ground-truth spans live on the imitation timeline; a
//! corrupted step is an error event. Everything is a pure function of the
//! seed.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;

use crate::config::{derive_seed, Config};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{GroundTruthEvent, Span};

#[derive(Debug, Clone)]
pub struct SynthSettings {
    pub d: usize,
    pub exo_len: (usize, usize),
    pub ego_len: (usize, usize),
    pub steps: usize,
    pub error_rate: f64,
    pub redundancy: f64,
    pub view_offset: f64,
    pub warp: (f64, f64),
    pub noise: f64,
    pub corruption_angle: f64,
    pub seed: u64,
}

impl SynthSettings {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let s = SynthSettings {
            d: cfg.get_usize("synth.d")?,
            exo_len: (cfg.get_usize("synth.exo_len_min")?, cfg.get_usize("synth.exo_len_max")?),
            ego_len: (cfg.get_usize("synth.ego_len_min")?, cfg.get_usize("synth.ego_len_max")?),
            steps: cfg.get_usize("synth.steps")?,
            error_rate: cfg.get_f64("synth.error_rate")?,
            redundancy: cfg.get_f64("synth.redundancy")?,
            view_offset: cfg.get_f64("synth.view_offset")?,
            warp: (cfg.get_f64("synth.warp_min")?, cfg.get_f64("synth.warp_max")?),
            noise: cfg.get_f64("synth.noise")?,
            corruption_angle: cfg.get_f64("synth.corruption_angle_deg")?.to_radians(),
            seed: cfg.get_u64("synth.seed")?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("synth.d must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("synth.steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.error_rate) {
            return Err(Error::Config("synth.error_rate must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.redundancy) {
            return Err(Error::Config("synth.redundancy must be in [0, 1)".into()));
        }
        for (name, (lo, hi)) in [("exo", self.exo_len), ("ego", self.ego_len)] {
            if lo == 0 || hi < lo {
                return Err(Error::Config(format!("synth.{name}_len range is empty")));
            }
            let informative = ((1.0 - self.redundancy) * lo as f64).round() as usize;
            if informative < self.steps {
                return Err(Error::Config(format!(
                    "infeasible layout: {} steps need at least one frame each but only \
                     {informative} informative {name} frames are available",
                    self.steps
                )));
            }
        }
        if self.warp.0 <= 0.0 || self.warp.1 < self.warp.0 {
            return Err(Error::Config("synth.warp range must be positive and ordered".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoPair {
    pub id: String,
    pub z_exo: Tensor,
    pub z_ego: Tensor,
    pub gt: Vec<GroundTruthEvent>,
    pub overall_error: bool,
}

fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn unit_vector(rng: &mut ChaCha12Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Split `total` into `parts` nonneg integers proportional to `weights`
/// (each part at least `min_per_part`), preserving the exact total.
fn proportional_split(total: usize, weights: &[f64], min_per_part: usize) -> Vec<usize> {
    let parts = weights.len();
    let base = min_per_part * parts;
    assert!(total >= base, "split infeasible");
    let free = total - base;
    let wsum: f64 = weights.iter().sum();
    let mut out = vec![min_per_part; parts];
    let mut acc = 0.0;
    let mut assigned = 0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        let target = if wsum > 0.0 {
            ((acc / wsum) * free as f64).round() as usize
        } else {
            (free * (i + 1)) / parts
        };
        let take = target.saturating_sub(assigned);
        out[i] += take;
        assigned += take;
    }
    out[parts - 1] += free - assigned;
    out
}

/// The dataset-level view-offset vector (a constant direction per master
/// seed, scaled by the configured magnitude).
pub fn view_offset_vector(cfg: &SynthSettings) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 0x0ff5e7));
    unit_vector(&mut rng, cfg.d)
        .into_iter()
        .map(|v| v * cfg.view_offset)
        .collect()
}

pub fn generate_pair(cfg: &SynthSettings, seed: u64, id: String) -> Result<VideoPair> {
    cfg.validate()?;
    let d = cfg.d;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let offset = view_offset_vector(cfg);

    let t_x = rng.gen_range(cfg.exo_len.0..=cfg.exo_len.1);
    let t_y = rng.gen_range(cfg.ego_len.0..=cfg.ego_len.1);
    let s = cfg.steps;

    let prototypes: Vec<Vec<f64>> = (0..s).map(|_| unit_vector(&mut rng, d)).collect();

    // demonstration layout
    let info_x = (((1.0 - cfg.redundancy) * t_x as f64).round() as usize).max(s);
    let step_weights: Vec<f64> = (0..s).map(|_| rng.gen_range(0.7..1.3)).collect();
    let exo_step_lens = proportional_split(info_x, &step_weights, 1);
    let gap_weights: Vec<f64> = (0..=s).map(|_| rng.gen::<f64>()).collect();
    let exo_gaps = proportional_split(t_x - info_x, &gap_weights, 0);

    let mut z_exo = vec![0.0; t_x * d];
    let mut t = 0usize;
    let frame = |buf: &mut Vec<f64>, t: &mut usize, row: &[f64]| {
        buf[*t * d..(*t + 1) * d].copy_from_slice(row);
        *t += 1;
    };
    let noise_row = |rng: &mut ChaCha12Rng, scale: f64| -> Vec<f64> {
        (0..d).map(|_| gaussian(rng) * scale / (d as f64).sqrt()).collect()
    };
    for step in 0..s {
        for _ in 0..exo_gaps[step] {
            let row = noise_row(&mut rng, cfg.noise.max(1e-3));
            frame(&mut z_exo, &mut t, &row);
        }
        for _ in 0..exo_step_lens[step] {
            let n = noise_row(&mut rng, cfg.noise);
            let row: Vec<f64> = prototypes[step].iter().zip(&n).map(|(p, e)| p + e).collect();
            frame(&mut z_exo, &mut t, &row);
        }
    }
    for _ in 0..exo_gaps[s] {
        let row = noise_row(&mut rng, cfg.noise.max(1e-3));
        frame(&mut z_exo, &mut t, &row);
    }
    debug_assert_eq!(t, t_x);

    // imitation layout: demonstration step lengths, independently warped
    let info_y = (((1.0 - cfg.redundancy) * t_y as f64).round() as usize).max(s);
    let warp_weights: Vec<f64> = exo_step_lens
        .iter()
        .map(|&l| l as f64 * rng.gen_range(cfg.warp.0..=cfg.warp.1))
        .collect();
    let ego_step_lens = proportional_split(info_y, &warp_weights, 1);
    let ego_gap_weights: Vec<f64> = (0..=s).map(|_| rng.gen::<f64>()).collect();
    let ego_gaps = proportional_split(t_y - info_y, &ego_gap_weights, 0);

    // per-step corruption
    let corrupted: Vec<bool> = (0..s).map(|_| rng.gen::<f64>() < cfg.error_rate).collect();
    let ego_protos: Vec<Vec<f64>> = (0..s)
        .map(|step| {
            if corrupted[step] {
                let r = unit_vector(&mut rng, d);
                let p = &prototypes[step];
                let dot: f64 = r.iter().zip(p).map(|(a, b)| a * b).sum();
                let mut orth: Vec<f64> = r.iter().zip(p).map(|(a, b)| a - dot * b).collect();
                let norm = orth.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                orth.iter_mut().for_each(|x| *x /= norm);
                let (c, sn) = (cfg.corruption_angle.cos(), cfg.corruption_angle.sin());
                p.iter().zip(&orth).map(|(pv, ov)| c * pv + sn * ov).collect()
            } else {
                prototypes[step].clone()
            }
        })
        .collect();

    let mut z_ego = vec![0.0; t_y * d];
    let mut gt = Vec::with_capacity(s);
    t = 0;
    for step in 0..s {
        for _ in 0..ego_gaps[step] {
            let mut row = noise_row(&mut rng, cfg.noise.max(1e-3));
            for (v, o) in row.iter_mut().zip(&offset) {
                *v += o;
            }
            frame(&mut z_ego, &mut t, &row);
        }
        let start = t;
        for _ in 0..ego_step_lens[step] {
            let n = noise_row(&mut rng, cfg.noise);
            let row: Vec<f64> = ego_protos[step]
                .iter()
                .zip(&n)
                .zip(&offset)
                .map(|((p, e), o)| p + e + o)
                .collect();
            frame(&mut z_ego, &mut t, &row);
        }
        gt.push(GroundTruthEvent {
            span: Span::new(start as f64 / t_y as f64, t as f64 / t_y as f64),
            error: corrupted[step],
        });
    }
    for _ in 0..ego_gaps[s] {
        let mut row = noise_row(&mut rng, cfg.noise.max(1e-3));
        for (v, o) in row.iter_mut().zip(&offset) {
            *v += o;
        }
        frame(&mut z_ego, &mut t, &row);
    }
    debug_assert_eq!(t, t_y);

    let overall_error = corrupted.iter().any(|&c| c);
    Ok(VideoPair {
        id,
        z_exo: Tensor::matrix(t_x, d, z_exo)?,
        z_ego: Tensor::matrix(t_y, d, z_ego)?,
        gt,
        overall_error,
    })
}

/// Deterministic dataset: pair i uses seed derive_seed(master, stream_base + i).
pub fn generate_dataset(
    cfg: &SynthSettings,
    count: usize,
    stream_base: u64,
    id_prefix: &str,
) -> Result<Vec<VideoPair>> {
    (0..count)
        .map(|i| {
            let seed = derive_seed(cfg.seed, stream_base + i as u64);
            generate_pair(cfg, seed, format!("{id_prefix}{i:04}"))
        })
        .collect()
}

/// Stream offsets keeping train and eval pairs disjoint.
pub const TRAIN_STREAM: u64 = 1_000_000;
pub const EVAL_STREAM: u64 = 2_000_000;
