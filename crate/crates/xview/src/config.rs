//! Flat `section.key = value` configuration.
//!
//! Every knob has a default; a config file and CLI `--set key=value`
//! overrides replace them. Unknown keys are rejected so typos fail loudly.
//! The canonical rendering (sorted keys) feeds a 64-bit FNV-1a hash that
//! ties checkpoints to the exact configuration that produced them.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Config {
    map: BTreeMap<String, String>,
}

pub const DEFAULTS: &[(&str, &str)] = &[
    // detector
    ("det.d_model", "64"),
    ("det.levels", "3"),
    ("det.enc_layers", "2"),
    ("det.dec_layers", "2"),
    ("det.n_queries", "10"),
    ("det.heads", "4"),
    ("det.ffn_hidden", "64"),
    ("det.gn_groups", "8"),
    // adaptive sampling
    ("sampler.enabled", "true"),
    ("sampler.k_ratio", "0.5"),
    ("sampler.alpha", "0.5"),
    ("sampler.gumbel_temp", "1.0"),
    ("sampler.lambda_sel", "0.02"),
    ("sampler.lambda_vic", "0.02"),
    ("sampler.gamma_var", "1.0"),
    ("sampler.heads", "4"),
    ("sampler.ffn_hidden", "64"),
    // dictionary view embeddings
    ("sve.enabled", "true"),
    ("sve.M", "16"),
    ("sve.tau", "1.0"),
    ("sve.lambda_ent", "0.02"),
    ("sve.lambda_div", "0.02"),
    ("sve.multi_level", "true"),
    ("sve.fixed_tokens", "false"),
    ("sve.heads", "4"),
    // fusion
    ("fusion.mode", "bix"),
    ("fusion.gate_granularity", "position"),
    ("fusion.force_gate", "none"),
    // input handling
    ("model.ego_only", "false"),
    // loss weights
    ("loss.alpha_giou", "2.0"),
    ("loss.alpha_cls", "1.0"),
    ("loss.beta_giou", "2.0"),
    ("loss.beta_cls", "1.0"),
    ("loss.beta_ec", "0.5"),
    ("loss.beta_cap", "0.0"),
    ("loss.focal_alpha", "0.25"),
    ("loss.focal_gamma", "2.0"),
    ("loss.lambda_imit", "0.5"),
    // training
    ("train.lr", "0.001"),
    ("train.weight_decay", "0.0001"),
    ("train.batch_size", "8"),
    ("train.steps", "500"),
    ("train.seed", "7"),
    ("train.grad_clip", "1.0"),
    ("train.log_every", "25"),
    // synthetic benchmark
    ("synth.d", "64"),
    ("synth.exo_len_min", "80"),
    ("synth.exo_len_max", "112"),
    ("synth.ego_len_min", "80"),
    ("synth.ego_len_max", "112"),
    ("synth.steps", "6"),
    ("synth.error_rate", "0.3"),
    ("synth.redundancy", "0.5"),
    ("synth.view_offset", "0.8"),
    ("synth.warp_min", "0.8"),
    ("synth.warp_max", "1.25"),
    ("synth.noise", "0.05"),
    ("synth.corruption_angle_deg", "75"),
    ("synth.seed", "1234"),
    ("synth.train_pairs", "40"),
    ("synth.eval_pairs", "20"),
    // evaluation
    ("eval.tiou_pred_side", "false"),
];

impl Default for Config {
    fn default() -> Self {
        let map = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Config { map }
    }
}

impl Config {
    /// Defaults overlaid with a config file (if any).
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = Config::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)?;
            cfg.merge_text(&text)?;
        }
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("config line {}: expected key = value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.map.contains_key(key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Parse(format!("config key '{key}': expected a number")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Parse(format!("config key '{key}': expected an integer")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Parse(format!("config key '{key}': expected an integer")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            other => Err(Error::Parse(format!(
                "config key '{key}': expected true/false, got '{other}'"
            ))),
        }
    }

    /// Optional float: the literal `none` means absent.
    pub fn get_opt_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key)? {
            "none" => Ok(None),
            v => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Parse(format!("config key '{key}': expected a number or 'none'"))),
        }
    }

    /// Canonical text rendering: sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// FNV-1a over the canonical rendering.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stable per-pair seed derivation (splitmix64 over master seed and index).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e3779b97f4a7c15_u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
