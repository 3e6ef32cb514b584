//! Flat `key = value` run configuration.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use crate::cell::{QrnConfig, ScanMode};
use crate::error::{QrnError, Result};
use crate::tensor::Precision;
use crate::trainer::TrainConfig;

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub qrn: QrnConfig,
    pub train: TrainConfig,
    pub precision: Precision,
    pub use_match: bool,
    pub reconstruction: bool,
    pub reconstruction_weight: f64,
    /// Dialog response slots; 0 means the longest candidate.
    pub slots: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            qrn: QrnConfig::default(),
            train: TrainConfig::default(),
            precision: Precision::F32,
            use_match: false,
            reconstruction: false,
            reconstruction_weight: 1.0,
            slots: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "layers",
    "hidden_size",
    "use_reset_gate",
    "vector_gates",
    "bidirectional",
    "forget_bias",
    "tie_weights_across_layers",
    "batch_size",
    "learning_rate",
    "l2_decay",
    "max_epochs",
    "patience_epochs",
    "restarts",
    "seed",
    "decay_biases",
    "scan",
    "dev_fraction",
    "context_cap",
    "initial_accumulator",
    "precision",
    "use_match",
    "reconstruction",
    "reconstruction_weight",
    "slots",
];

fn value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse()
        .map_err(|_| QrnError::Config(format!("line {line}: `{raw}` is not a valid value for `{key}`")))
}

impl RunConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        self.set_at(key, raw, 0)
    }

    fn set_at(&mut self, key: &str, raw: &str, line: usize) -> Result<()> {
        let (q, t) = (&mut self.qrn, &mut self.train);
        match key {
            "layers" => q.layers = value(key, raw, line)?,
            "hidden_size" => q.hidden_size = value(key, raw, line)?,
            "use_reset_gate" => q.use_reset_gate = value(key, raw, line)?,
            "vector_gates" => q.vector_gates = value(key, raw, line)?,
            "bidirectional" => q.bidirectional = value(key, raw, line)?,
            "forget_bias" => q.forget_bias = value(key, raw, line)?,
            "tie_weights_across_layers" => q.tie_weights_across_layers = value(key, raw, line)?,
            "batch_size" => t.batch_size = value(key, raw, line)?,
            "learning_rate" => t.learning_rate = value(key, raw, line)?,
            "l2_decay" => t.l2_decay = value(key, raw, line)?,
            "max_epochs" => t.max_epochs = value(key, raw, line)?,
            "patience_epochs" => t.patience_epochs = value(key, raw, line)?,
            "restarts" => t.restarts = value(key, raw, line)?,
            "seed" => t.seed = value(key, raw, line)?,
            "decay_biases" => t.decay_biases = value(key, raw, line)?,
            "scan" => {
                t.scan = ScanMode::from_str(raw)
                    .map_err(|_| QrnError::Config(format!("line {line}: unknown scan mode `{raw}`")))?
            }
            "dev_fraction" => t.dev_fraction = value(key, raw, line)?,
            "context_cap" => t.context_cap = value(key, raw, line)?,
            "initial_accumulator" => t.initial_accumulator = value(key, raw, line)?,
            "precision" => {
                self.precision = Precision::from_str(raw)
                    .map_err(|_| QrnError::Config(format!("line {line}: unknown precision `{raw}`")))?
            }
            "use_match" => self.use_match = value(key, raw, line)?,
            "reconstruction" => self.reconstruction = value(key, raw, line)?,
            "reconstruction_weight" => self.reconstruction_weight = value(key, raw, line)?,
            "slots" => self.slots = value(key, raw, line)?,
            _ => return Err(QrnError::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| QrnError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(QrnError::Config(format!("duplicate configuration key `{key}`")));
            }
            cfg.set_at(key, val.trim(), i + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QrnError::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.qrn.validate()?;
        self.train.validate()?;
        if !(self.reconstruction_weight.is_finite() && self.reconstruction_weight >= 0.0) {
            return Err(QrnError::Config("reconstruction_weight must be a non-negative number".into()));
        }
        Ok(())
    }

    /// Renders the configuration in the format `parse` reads.
    pub fn render(&self) -> String {
        let (q, t) = (&self.qrn, &self.train);
        let scan = match t.scan {
            ScanMode::Sequential => "sequential",
            ScanMode::Parallel => "parallel",
        };
        let precision = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let values: Vec<String> = vec![
            q.layers.to_string(),
            q.hidden_size.to_string(),
            q.use_reset_gate.to_string(),
            q.vector_gates.to_string(),
            q.bidirectional.to_string(),
            q.forget_bias.to_string(),
            q.tie_weights_across_layers.to_string(),
            t.batch_size.to_string(),
            t.learning_rate.to_string(),
            t.l2_decay.to_string(),
            t.max_epochs.to_string(),
            t.patience_epochs.to_string(),
            t.restarts.to_string(),
            t.seed.to_string(),
            t.decay_biases.to_string(),
            scan.to_string(),
            t.dev_fraction.to_string(),
            t.context_cap.to_string(),
            t.initial_accumulator.to_string(),
            precision.to_string(),
            self.use_match.to_string(),
            self.reconstruction.to_string(),
            self.reconstruction_weight.to_string(),
            self.slots.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse("# d\nhidden_size = 100\nscan=parallel # fast\n").unwrap();
        assert_eq!(cfg.qrn.hidden_size, 100);
        assert_eq!(cfg.train.scan, ScanMode::Parallel);
        assert_eq!(cfg.train.batch_size, 32);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("hiden_size = 3").unwrap_err();
        assert!(matches!(&err, QrnError::Config(m) if m.contains("hiden_size")));
        let err = RunConfig::parse("seed = 1\nseed = 2").unwrap_err();
        assert!(matches!(&err, QrnError::Config(m) if m.contains("seed")));
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("precision", "f64").unwrap();
        cfg.set("learning_rate", "0.1").unwrap();
        cfg.set("use_match", "true").unwrap();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }
}
