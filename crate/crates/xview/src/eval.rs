//! Model evaluation, the domain-gap probe, and ablation sweeps.
//!
//! Evaluation is parallel across video pairs (capped by `XVIEW_THREADS`)
//! with per-pair results collected in input order, so reports are identical
//! for every thread count.

use rayon::prelude::*;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, EvalReport};
use crate::model::{cosine, Model, PipelineConfig};
use crate::synth::{generate_dataset, SynthSettings, VideoPair, EVAL_STREAM, TRAIN_STREAM};
use crate::train::{TrainSettings, Trainer};
use crate::types::{EventPrediction, GroundTruthEvent};

/// Thread pool for evaluation; `XVIEW_THREADS` caps the worker count.
pub fn eval_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("XVIEW_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map_err(|_| Error::Config("XVIEW_THREADS must be a positive integer".into()))?,
        Err(_) => 0, // rayon default
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Runtime(format!("thread pool: {e}")))
}

/// Run inference over a dataset and score it.
pub fn evaluate_model(
    model: &Model,
    dataset: &[VideoPair],
) -> Result<(EvalReport, Vec<(String, Vec<EventPrediction>)>)> {
    let pool = eval_pool()?;
    let results: Vec<Result<Vec<EventPrediction>>> = pool.install(|| {
        dataset
            .par_iter()
            .map(|pair| model.infer(pair))
            .collect()
    });
    let mut per_video: Vec<(Vec<EventPrediction>, Vec<GroundTruthEvent>)> = Vec::new();
    let mut named = Vec::new();
    for (pair, preds) in dataset.iter().zip(results) {
        let preds = preds?;
        per_video.push((preds.clone(), pair.gt.clone()));
        named.push((pair.id.clone(), preds));
    }
    Ok((evaluate_dataset(&per_video), named))
}

/// Paired cosine similarities of time-pooled features before and after
/// position/view injection.
#[derive(Debug, Clone)]
pub struct CosineProbe {
    pub per_pair: Vec<(f64, f64)>,
    pub mean_pre: f64,
    pub mean_post: f64,
    pub std_pre: f64,
    pub std_post: f64,
}

impl CosineProbe {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair,pre_cosine,post_cosine\n");
        for (i, (pre, post)) in self.per_pair.iter().enumerate() {
            out.push_str(&format!("{i},{pre:.6},{post:.6}\n"));
        }
        out.push_str(&format!("mean,{:.6},{:.6}\n", self.mean_pre, self.mean_post));
        out.push_str(&format!("std,{:.6},{:.6}\n", self.std_pre, self.std_post));
        out
    }
}

pub fn cosine_probe(model: &Model, dataset: &[VideoPair]) -> Result<CosineProbe> {
    let pool = eval_pool()?;
    let per_pair: Vec<Result<(f64, f64)>> = pool.install(|| {
        dataset
            .par_iter()
            .map(|pair| {
                let fwd = model.forward(pair, false, None)?;
                let (pre_e, pre_x) = &fwd.pre_inject_pooled;
                let (post_e, post_x) = &fwd.post_inject_pooled;
                Ok((cosine(pre_e, pre_x), cosine(post_e, post_x)))
            })
            .collect()
    });
    let per_pair: Vec<(f64, f64)> = per_pair.into_iter().collect::<Result<_>>()?;
    let stats = |sel: &dyn Fn(&(f64, f64)) -> f64| -> (f64, f64) {
        let n = per_pair.len().max(1) as f64;
        let mean = per_pair.iter().map(|p| sel(p)).sum::<f64>() / n;
        let var = per_pair.iter().map(|p| (sel(p) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (mean_pre, std_pre) = stats(&|p| p.0);
    let (mean_post, std_post) = stats(&|p| p.1);
    Ok(CosineProbe { per_pair, mean_pre, mean_post, std_pre, std_post })
}

/// Generate data, train a model, and evaluate it, all from one config.
pub struct Experiment {
    pub trainer: Trainer,
    pub train_set: Vec<VideoPair>,
    pub eval_set: Vec<VideoPair>,
}

pub fn prepare(cfg: &Config) -> Result<Experiment> {
    let synth = SynthSettings::from_config(cfg)?;
    let train_set = generate_dataset(&synth, cfg.get_usize("synth.train_pairs")?, TRAIN_STREAM, "train_")?;
    let eval_set = generate_dataset(&synth, cfg.get_usize("synth.eval_pairs")?, EVAL_STREAM, "eval_")?;
    let pipeline = PipelineConfig::from_config(cfg)?;
    let settings = TrainSettings::from_config(cfg)?;
    let trainer = Trainer::new(pipeline, settings, cfg.hash())?;
    Ok(Experiment { trainer, train_set, eval_set })
}

pub fn train_and_evaluate(cfg: &Config) -> Result<(EvalReport, Experiment)> {
    let mut exp = prepare(cfg)?;
    exp.trainer.run(&exp.train_set, None)?;
    let (report, _) = evaluate_model(&exp.trainer.model, &exp.eval_set)?;
    Ok((report, exp))
}

// ── ablation sweeps ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// The 2^3 grid over sampling, view embeddings, and fusion.
    Modules,
    /// Kept-frame ratio sweep.
    KRatio,
    /// Dictionary-size sweep plus the fixed-token baseline.
    DictSize,
    /// Fusion-mode comparison.
    Fusion,
    /// Dual-view vs imitation-only input.
    EgoOnly,
    /// Pre/post-injection cosine histogram of the full model.
    Cosine,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "modules" => Ok(AblationAxis::Modules),
            "kratio" => Ok(AblationAxis::KRatio),
            "dictsize" => Ok(AblationAxis::DictSize),
            "fusion" => Ok(AblationAxis::Fusion),
            "egoonly" => Ok(AblationAxis::EgoOnly),
            "cosine" => Ok(AblationAxis::Cosine),
            other => Err(Error::Config(format!("unknown ablation axis '{other}'"))),
        }
    }
}

fn metrics_cols(report: &EvalReport) -> String {
    format!(
        "{:.6},{:.6},{:.6},{:.6},{}",
        report.error.auprc_by_threshold[0],
        report.error.auprc_by_threshold[1],
        report.error.auprc_by_threshold[2],
        report.error.mean_auprc,
        report
            .avg_tiou
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "null".into()),
    )
}

/// Run one ablation axis. Every row is a full train+eval cycle on a config
/// derived from `base`; `seeds` vary `train.seed` and rows carry per-seed
/// results followed by a per-variant mean.
pub fn ablate(base: &Config, axis: AblationAxis, seeds: &[u64]) -> Result<String> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let run = |cfg: &Config| -> Result<EvalReport> { Ok(train_and_evaluate(cfg)?.0) };
    let header = "auprc_0.3,auprc_0.5,auprc_0.7,mean_auprc,avg_tiou";
    let mut out = String::new();
    match axis {
        AblationAxis::Modules => {
            out.push_str(&format!("as,sve,bix,seed,{header}\n"));
            for &(as_on, sve_on, bix_on) in &[
                (false, false, false),
                (true, false, false),
                (false, true, false),
                (false, false, true),
                (true, true, false),
                (true, false, true),
                (false, true, true),
                (true, true, true),
            ] {
                let mut mean = [0.0; 4];
                let mut mean_tiou = 0.0;
                for &seed in seeds {
                    let mut cfg = base.clone();
                    cfg.set("sampler.enabled", if as_on { "true" } else { "false" })?;
                    cfg.set("sve.enabled", if sve_on { "true" } else { "false" })?;
                    cfg.set("fusion.mode", if bix_on { "bix" } else { "concat_channel" })?;
                    cfg.set("train.seed", &seed.to_string())?;
                    let report = run(&cfg)?;
                    for i in 0..3 {
                        mean[i] += report.error.auprc_by_threshold[i] / seeds.len() as f64;
                    }
                    mean[3] += report.error.mean_auprc / seeds.len() as f64;
                    mean_tiou += report.avg_tiou.unwrap_or(0.0) / seeds.len() as f64;
                    out.push_str(&format!(
                        "{},{},{},{seed},{}\n",
                        as_on as u8,
                        sve_on as u8,
                        bix_on as u8,
                        metrics_cols(&report)
                    ));
                }
                out.push_str(&format!(
                    "{},{},{},mean,{:.6},{:.6},{:.6},{:.6},{mean_tiou:.6}\n",
                    as_on as u8, sve_on as u8, bix_on as u8, mean[0], mean[1], mean[2], mean[3]
                ));
            }
        }
        AblationAxis::KRatio => {
            out.push_str(&format!("k_ratio,seed,{header}\n"));
            for ratio in ["0.1", "0.25", "0.5", "0.65", "0.8", "1.0"] {
                for &seed in seeds {
                    let mut cfg = base.clone();
                    cfg.set("sampler.k_ratio", ratio)?;
                    cfg.set("train.seed", &seed.to_string())?;
                    let report = run(&cfg)?;
                    out.push_str(&format!("{ratio},{seed},{}\n", metrics_cols(&report)));
                }
            }
        }
        AblationAxis::DictSize => {
            out.push_str(&format!("dict,seed,{header}\n"));
            for m in ["2", "4", "8", "16", "32"] {
                for &seed in seeds {
                    let mut cfg = base.clone();
                    cfg.set("sve.M", m)?;
                    cfg.set("train.seed", &seed.to_string())?;
                    let report = run(&cfg)?;
                    out.push_str(&format!("{m},{seed},{}\n", metrics_cols(&report)));
                }
            }
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.set("sve.fixed_tokens", "true")?;
                cfg.set("train.seed", &seed.to_string())?;
                let report = run(&cfg)?;
                out.push_str(&format!("fixed,{seed},{}\n", metrics_cols(&report)));
            }
        }
        AblationAxis::Fusion => {
            out.push_str(&format!("mode,seed,{header}\n"));
            for mode in ["bix", "exo2ego", "ego2exo", "concat_channel", "concat_time"] {
                for &seed in seeds {
                    let mut cfg = base.clone();
                    cfg.set("fusion.mode", mode)?;
                    cfg.set("train.seed", &seed.to_string())?;
                    let report = run(&cfg)?;
                    out.push_str(&format!("{mode},{seed},{}\n", metrics_cols(&report)));
                }
            }
        }
        AblationAxis::EgoOnly => {
            out.push_str(&format!("input,seed,{header}\n"));
            for (label, ego_only) in [("dual", "false"), ("ego_only", "true")] {
                for &seed in seeds {
                    let mut cfg = base.clone();
                    cfg.set("model.ego_only", ego_only)?;
                    cfg.set("train.seed", &seed.to_string())?;
                    let report = run(&cfg)?;
                    out.push_str(&format!("{label},{seed},{}\n", metrics_cols(&report)));
                }
            }
        }
        AblationAxis::Cosine => {
            let mut cfg = base.clone();
            cfg.set("train.seed", &seeds[0].to_string())?;
            let (_, exp) = train_and_evaluate(&cfg)?;
            let probe = cosine_probe(&exp.trainer.model, &exp.eval_set)?;
            out.push_str(&probe.to_csv());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> Config {
        let mut cfg = Config::default();
        for (k, v) in [
            ("synth.d", "16"),
            ("synth.exo_len_min", "28"),
            ("synth.exo_len_max", "36"),
            ("synth.ego_len_min", "28"),
            ("synth.ego_len_max", "36"),
            ("synth.steps", "3"),
            ("synth.train_pairs", "4"),
            ("synth.eval_pairs", "3"),
            ("det.d_model", "16"),
            ("det.levels", "2"),
            ("det.enc_layers", "1"),
            ("det.dec_layers", "1"),
            ("det.n_queries", "6"),
            ("det.gn_groups", "4"),
            ("det.ffn_hidden", "16"),
            ("sampler.ffn_hidden", "16"),
            ("sve.M", "4"),
            ("train.steps", "3"),
            ("train.batch_size", "2"),
            ("train.log_every", "0"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn evaluation_is_reproducible_and_thread_invariant() {
        let cfg = quick_config();
        let (report_a, exp) = train_and_evaluate(&cfg).unwrap();
        let (report_b, _) = evaluate_model(&exp.trainer.model, &exp.eval_set).unwrap();
        assert_eq!(report_a.to_text(), report_b.to_text());

        std::env::set_var("XVIEW_THREADS", "1");
        let (report_c, _) = evaluate_model(&exp.trainer.model, &exp.eval_set).unwrap();
        std::env::remove_var("XVIEW_THREADS");
        assert_eq!(report_a.to_text(), report_c.to_text());
    }

    #[test]
    fn cosine_probe_has_one_row_per_pair() {
        let cfg = quick_config();
        let exp = prepare(&cfg).unwrap();
        let probe = cosine_probe(&exp.trainer.model, &exp.eval_set).unwrap();
        assert_eq!(probe.per_pair.len(), 3);
        for (pre, post) in &probe.per_pair {
            assert!(pre.is_finite() && post.is_finite());
        }
        let csv = probe.to_csv();
        assert!(csv.starts_with("pair,pre_cosine,post_cosine\n"));
        assert!(csv.contains("mean,"));
    }

    #[test]
    fn module_grid_has_eight_variants() {
        let mut cfg = quick_config();
        cfg.set("train.steps", "1").unwrap();
        let csv = ablate(&cfg, AblationAxis::Modules, &[1]).unwrap();
        let mean_rows = csv.lines().filter(|l| l.contains(",mean,")).count();
        assert_eq!(mean_rows, 8, "2^3 module combinations:\n{csv}");
    }

    #[test]
    fn ego_only_axis_emits_both_rows() {
        let mut cfg = quick_config();
        cfg.set("train.steps", "1").unwrap();
        let csv = ablate(&cfg, AblationAxis::EgoOnly, &[1]).unwrap();
        assert!(csv.contains("dual,1,"));
        assert!(csv.contains("ego_only,1,"));
    }
}
