//! Training loop: AdamW over the full pipeline with per-component loss
//! logging, deterministic batching, and resumable checkpoints.
//!
//! Per step, the batch pairs are drawn from one RNG stream, each pair gets a
//! derived noise seed, and the per-pair forward/backward passes may run in
//! parallel; gradients are collected in batch order and reduced
//! sequentially, so the result is independent of the thread count.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::config::{derive_seed, Config};
use crate::error::{Error, Result};
use crate::io::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::model::{Model, PipelineConfig};
use crate::objective::{total_loss, LossReport};
use crate::params::AdamW;
use crate::synth::VideoPair;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub grad_clip: f64,
    pub log_every: u64,
}

impl TrainSettings {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let s = TrainSettings {
            lr: cfg.get_f64("train.lr")?,
            weight_decay: cfg.get_f64("train.weight_decay")?,
            batch_size: cfg.get_usize("train.batch_size")?,
            steps: cfg.get_u64("train.steps")?,
            seed: cfg.get_u64("train.seed")?,
            grad_clip: cfg.get_f64("train.grad_clip")?,
            log_every: cfg.get_u64("train.log_every")?,
        };
        if s.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(s)
    }
}

pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub settings: TrainSettings,
    pub config_hash: u64,
    rng: ChaCha12Rng,
    pub reports: Vec<LossReport>,
}

impl Trainer {
    pub fn new(pipeline: PipelineConfig, settings: TrainSettings, config_hash: u64) -> Result<Self> {
        let model = Model::new(pipeline)?;
        let opt = AdamW::new(&model.store, settings.lr, settings.weight_decay, settings.grad_clip);
        let rng = ChaCha12Rng::seed_from_u64(derive_seed(settings.seed, 0x7ea1_0000));
        Ok(Trainer { model, opt, settings, config_hash, rng, reports: Vec::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step_count()
    }

    /// One optimization step over a sampled batch. Returns the mean report.
    pub fn step(&mut self, dataset: &[VideoPair]) -> Result<LossReport> {
        if dataset.is_empty() {
            return Err(Error::Input("training needs a nonempty dataset".into()));
        }
        let b = self.settings.batch_size;
        let picks: Vec<usize> = (0..b).map(|_| self.rng.gen_range(0..dataset.len())).collect();
        let noise_seeds: Vec<u64> = (0..b).map(|_| self.rng.next_u64()).collect();

        let results: Vec<Result<(Vec<Tensor>, LossReport)>> = picks
            .par_iter()
            .zip(noise_seeds.par_iter())
            .map(|(&idx, &noise_seed)| {
                let pair = &dataset[idx];
                let mut noise_rng = ChaCha12Rng::seed_from_u64(noise_seed);
                let fwd = self.model.forward(pair, true, Some(&mut noise_rng))?;
                let (loss, report) = total_loss(
                    &fwd.session.g,
                    &fwd.det_out.per_layer,
                    &pair.gt,
                    &fwd.regs,
                    &self.model.cfg.weights,
                )?;
                check_report_finite(&report)?;
                let grads = fwd.session.grads(loss)?;
                Ok((grads, report))
            })
            .collect();

        let mut grad_sum: Option<Vec<Tensor>> = None;
        let mut mean = LossReport::default();
        for r in results {
            let (grads, report) = r?;
            match &mut grad_sum {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.add_assign(g);
                    }
                }
                None => grad_sum = Some(grads),
            }
            accumulate(&mut mean, &report, 1.0 / b as f64);
        }
        let mut grads = grad_sum.expect("nonempty batch");
        for g in &mut grads {
            for v in g.data_mut() {
                *v /= b as f64;
            }
        }
        self.opt.update(&mut self.model.store, &grads)?;
        self.reports.push(mean.clone());
        Ok(mean)
    }

    /// Run up to `settings.steps`, logging periodically. On a non-finite
    /// loss the last good parameter state is saved to `abort_path` (when
    /// given) and the error names the step and offending component.
    pub fn run(&mut self, dataset: &[VideoPair], abort_path: Option<&Path>) -> Result<()> {
        while self.step_count() < self.settings.steps {
            let at = self.step_count();
            match self.step(dataset) {
                Ok(report) => {
                    if self.settings.log_every > 0 && (at + 1) % self.settings.log_every == 0 {
                        eprintln!("{}", report.format_line(at + 1));
                    }
                }
                Err(e) => {
                    if let Some(path) = abort_path {
                        let ckpt = self.to_checkpoint();
                        let _ = write_checkpoint(path, &ckpt);
                        return Err(Error::Runtime(format!(
                            "training aborted at step {at}: {e}; last good checkpoint written to {}",
                            path.display()
                        )));
                    }
                    return Err(Error::Runtime(format!("training aborted at step {at}: {e}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .store
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let (step, m, v) = self.opt.state();
        for (i, (name, _)) in self.model.store.iter().enumerate().collect::<Vec<_>>() {
            tensors.push((format!("adam.m.{name}"), m[i].clone()));
            tensors.push((format!("adam.v.{name}"), v[i].clone()));
        }
        Checkpoint {
            config_hash: self.config_hash,
            step,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
            tensors,
        }
    }

    /// Restore parameters, optimizer moments, step counter, and the batch
    /// RNG position; the next step reproduces what an uninterrupted run
    /// would have done.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.config_hash != self.config_hash {
            return Err(Error::Config(format!(
                "checkpoint config hash {:016x} does not match the current config {:016x}",
                ckpt.config_hash, self.config_hash
            )));
        }
        let n = self.model.store.len();
        let mut m = vec![Tensor::scalar(0.0); n];
        let mut v = vec![Tensor::scalar(0.0); n];
        let mut seen_params = 0;
        for (name, tensor) in &ckpt.tensors {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                let id = self
                    .model
                    .store
                    .lookup(rest)
                    .ok_or_else(|| Error::Parse(format!("checkpoint moment for unknown '{rest}'")))?;
                m[index_of(&self.model.store, id)] = tensor.clone();
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                let id = self
                    .model
                    .store
                    .lookup(rest)
                    .ok_or_else(|| Error::Parse(format!("checkpoint moment for unknown '{rest}'")))?;
                v[index_of(&self.model.store, id)] = tensor.clone();
            } else {
                let id = self.model.store.lookup(name).ok_or_else(|| {
                    Error::Parse(format!("checkpoint parameter '{name}' not in this model"))
                })?;
                self.model.store.set(id, tensor.clone())?;
                seen_params += 1;
            }
        }
        if seen_params != n {
            return Err(Error::Parse(format!(
                "checkpoint covers {seen_params} of {n} parameters"
            )));
        }
        self.opt.restore_state(ckpt.step, m, v);
        self.rng = ChaCha12Rng::from_seed(ckpt.rng_seed);
        self.rng.set_word_pos(ckpt.rng_word_pos);
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let ckpt = read_checkpoint(path)?;
        self.restore(&ckpt)
    }
}

fn index_of(store: &crate::params::ParamStore, id: crate::params::ParamId) -> usize {
    (0..store.len())
        .find(|&i| store.id_at(i) == id)
        .expect("id in store")
}

fn accumulate(into: &mut LossReport, from: &LossReport, w: f64) {
    into.giou += w * from.giou;
    into.cls += w * from.cls;
    into.ec += w * from.ec;
    into.imit_fine += w * from.imit_fine;
    into.imit_overall += w * from.imit_overall;
    into.sel += w * from.sel;
    into.vic += w * from.vic;
    into.view_ent += w * from.view_ent;
    into.dict_div += w * from.dict_div;
    into.total += w * from.total;
}

fn check_report_finite(r: &LossReport) -> Result<()> {
    for (name, v) in [
        ("giou", r.giou),
        ("cls", r.cls),
        ("ec", r.ec),
        ("imit_fine", r.imit_fine),
        ("imit_overall", r.imit_overall),
        ("sel", r.sel),
        ("vic", r.vic),
        ("view_ent", r.view_ent),
        ("dict_div", r.dict_div),
        ("total", r.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component '{name}'")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::fusion::{FusionMode, GateGranularity};
    use crate::objective::LossWeights;
    use crate::synth::{generate_dataset, SynthSettings, TRAIN_STREAM};

    fn tiny_pipeline() -> PipelineConfig {
        PipelineConfig {
            feature_dim: 16,
            detector: DetectorConfig {
                d_model: 16,
                levels: 2,
                enc_layers: 1,
                dec_layers: 2,
                n_queries: 6,
                heads: 2,
                ffn_hidden: 16,
                gn_groups: 4,
            },
            sampler_enabled: true,
            k_ratio: 0.6,
            alpha: 0.5,
            gumbel_temp: 1.0,
            gamma_var: 1.0,
            sampler_heads: 2,
            sampler_hidden: 16,
            sve_enabled: true,
            dict_size: 4,
            tau: 1.0,
            multi_level: true,
            fixed_tokens: false,
            sve_heads: 2,
            fusion_mode: FusionMode::Bix,
            gate_granularity: GateGranularity::Position,
            force_gate: None,
            ego_only: false,
            weights: LossWeights::default(),
            seed: 11,
        }
    }

    fn tiny_synth() -> SynthSettings {
        SynthSettings {
            d: 16,
            exo_len: (28, 36),
            ego_len: (28, 36),
            steps: 3,
            error_rate: 0.4,
            redundancy: 0.3,
            view_offset: 0.5,
            warp: (0.9, 1.1),
            noise: 0.05,
            corruption_angle: 75f64.to_radians(),
            seed: 5,
        }
    }

    fn tiny_train(steps: u64) -> TrainSettings {
        TrainSettings {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 4,
            steps,
            seed: 3,
            grad_clip: 1.0,
            log_every: 0,
        }
    }

    #[test]
    fn loss_decreases_over_fifty_steps() {
        let dataset = generate_dataset(&tiny_synth(), 6, TRAIN_STREAM, "p").unwrap();
        let mut trainer = Trainer::new(tiny_pipeline(), tiny_train(50), 1).unwrap();
        trainer.run(&dataset, None).unwrap();
        let first = trainer.reports.first().unwrap().total;
        let last = trainer.reports.last().unwrap().total;
        assert!(
            last < first,
            "optimization must make progress: {first} -> {last}"
        );
    }

    #[test]
    fn training_is_run_to_run_deterministic() {
        let dataset = generate_dataset(&tiny_synth(), 4, TRAIN_STREAM, "p").unwrap();
        let run = || {
            let mut trainer = Trainer::new(tiny_pipeline(), tiny_train(5), 1).unwrap();
            trainer.run(&dataset, None).unwrap();
            crate::io::checkpoint_bytes(&trainer.to_checkpoint())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run_bitwise() {
        let dataset = generate_dataset(&tiny_synth(), 4, TRAIN_STREAM, "p").unwrap();
        // uninterrupted: 6 steps
        let mut full = Trainer::new(tiny_pipeline(), tiny_train(6), 1).unwrap();
        full.run(&dataset, None).unwrap();
        let full_bytes = crate::io::checkpoint_bytes(&full.to_checkpoint());

        // interrupted at 4, resumed for 2 more
        let mut first = Trainer::new(tiny_pipeline(), tiny_train(4), 1).unwrap();
        first.run(&dataset, None).unwrap();
        let ckpt = first.to_checkpoint();
        let mut resumed = Trainer::new(tiny_pipeline(), tiny_train(6), 1).unwrap();
        resumed.restore(&ckpt).unwrap();
        resumed.run(&dataset, None).unwrap();
        let resumed_bytes = crate::io::checkpoint_bytes(&resumed.to_checkpoint());
        assert_eq!(full_bytes, resumed_bytes);
    }

    #[test]
    fn config_hash_mismatch_is_rejected() {
        let mut trainer = Trainer::new(tiny_pipeline(), tiny_train(1), 1).unwrap();
        let mut ckpt = trainer.to_checkpoint();
        ckpt.config_hash = 2;
        assert!(matches!(trainer.restore(&ckpt), Err(Error::Config(_))));
    }

    #[test]
    fn zeroed_regularizers_recover_the_bare_objective() {
        // with every regularizer weight at zero the parameter trajectory
        // equals one where the regularizer terms are merely logged
        let dataset = generate_dataset(&tiny_synth(), 4, TRAIN_STREAM, "p").unwrap();
        let mut cfg = tiny_pipeline();
        cfg.weights.lambda_sel = 0.0;
        cfg.weights.lambda_vic = 0.0;
        cfg.weights.lambda_view_ent = 0.0;
        cfg.weights.lambda_dict_div = 0.0;
        let mut a = Trainer::new(cfg.clone(), tiny_train(3), 1).unwrap();
        a.run(&dataset, None).unwrap();
        for r in &a.reports {
            let recomputed = r.weighted_sum(&cfg.weights);
            assert!((recomputed - r.total).abs() < 1e-9);
        }
    }
}
