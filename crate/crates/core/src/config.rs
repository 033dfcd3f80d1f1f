//! Run configuration: one TOML file with a table per concern, plus dotted
//! command-line overrides (`--train.learning_rate=0.1`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::contrastive::{default_boundary, CandidateStrategy};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::probe::{FusionRule, SweepOptions};
use crate::tasks::TaskSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub lambda: f64,
    pub delta: f64,
    pub delta_rev: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_plateau: Option<usize>,
    pub latency_repeats: usize,
    pub latency_batch: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let sweep = SweepOptions::default();
        let rule = FusionRule::default();
        ProbeConfig {
            lambda: sweep.lambda,
            delta: rule.delta,
            delta_rev: rule.delta_rev,
            min_plateau: rule.min_plateau,
            latency_repeats: sweep.latency_repeats,
            latency_batch: sweep.latency_batch,
        }
    }
}

impl ProbeConfig {
    pub fn sweep_options(&self) -> SweepOptions {
        SweepOptions {
            lambda: self.lambda,
            latency_repeats: self.latency_repeats,
            latency_batch: self.latency_batch,
        }
    }

    pub fn rule(&self) -> FusionRule {
        FusionRule {
            delta: self.delta,
            delta_rev: self.delta_rev,
            min_plateau: self.min_plateau,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    All,
    Shallow,
    Deep,
    Fusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastSection {
    pub strategy: StrategyKind,
    /// Shallow/deep boundary; defaults to `floor(n_layers / 2)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<usize>,
    pub rho: f64,
    pub lambda: f64,
    /// Also write per-sample diagnostics as JSON lines.
    pub diagnostics: bool,
}

impl Default for ContrastSection {
    fn default() -> Self {
        ContrastSection {
            strategy: StrategyKind::Fusion,
            boundary: None,
            rho: 0.2,
            lambda: 0.1,
            diagnostics: false,
        }
    }
}

impl ContrastSection {
    pub fn strategy(&self, n_layers: usize, fusion_set: &[usize]) -> CandidateStrategy {
        let boundary = self.boundary.unwrap_or_else(|| default_boundary(n_layers));
        match self.strategy {
            StrategyKind::All => CandidateStrategy::All,
            StrategyKind::Shallow => CandidateStrategy::Shallow { boundary },
            StrategyKind::Deep => CandidateStrategy::Deep { boundary },
            StrategyKind::Fusion => CandidateStrategy::Fusion {
                set: fusion_set.to_vec(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioSweepSection {
    pub rhos: Vec<f64>,
    pub lambda: f64,
}

impl Default for RatioSweepSection {
    fn default() -> Self {
        RatioSweepSection {
            rhos: vec![0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0],
            lambda: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub contrast: ContrastSection,
    pub sweep: RatioSweepSection,
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Strict parse: every key present in the default config must be given.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: Value = toml::from_str(text).map_err(|e| Error::usage(format!("config: {e}")))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let defaults = Value::try_from(RunConfig::default()).expect("config serializes");
        if let Some(key) = first_missing_key(&defaults, &value, "") {
            return Err(Error::usage(format!("missing config key `{key}`")));
        }
        value
            .try_into()
            .map_err(|e: toml::de::Error| Error::usage(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Applies `key=value` overrides (keys dotted, e.g. `train.n_steps`).
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = Value::try_from(self).expect("config serializes");
        for (key, raw) in overrides {
            set_dotted(&mut value, key, parse_scalar(raw))?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.task.check_fits(self.model.vocab_size, self.model.max_seq_len)?;
        self.train.validate()?;
        if self.sweep.rhos.is_empty() {
            return Err(Error::usage("sweep.rhos must be non-empty"));
        }
        if let Some(r) = self.sweep.rhos.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::usage(format!("sweep.rhos entry {r} outside [0, 1]")));
        }
        Ok(())
    }
}

fn first_missing_key(expected: &Value, given: &Value, prefix: &str) -> Option<String> {
    let (Value::Table(exp), Value::Table(got)) = (expected, given) else {
        return None;
    };
    for (k, v) in exp {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match got.get(k) {
            None => return Some(path),
            Some(g) => {
                if let Some(m) = first_missing_key(v, g, &path) {
                    return Some(m);
                }
            }
        }
    }
    None
}

fn parse_scalar(raw: &str) -> Value {
    // reuse the TOML grammar for numbers, booleans, arrays and quoted strings
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_dotted(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::usage(format!("malformed override key `{key}`")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .as_table_mut()
            .and_then(|t| t.get_mut(*p))
            .ok_or_else(|| Error::usage(format!("unknown config key `{key}`")))?;
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::usage(format!("unknown config key `{key}`")))?;
    table.insert(parts[parts.len() - 1].to_string(), v);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn missing_key_is_named() {
        let text = RunConfig::default().to_toml().replace("learning_rate = 0.1\n", "");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert!(err.to_string().contains("train.learning_rate"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let text = RunConfig::default().to_toml().replace("[train]\n", "[train]\nwarmup = 3\n");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn dotted_overrides() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                ("train.n_steps".into(), "12".into()),
                ("contrast.strategy".into(), "shallow".into()),
                ("contrast.boundary".into(), "2".into()),
                ("sweep.rhos".into(), "[0.0, 0.5]".into()),
                ("probe.min_plateau".into(), "3".into()),
            ])
            .unwrap();
        assert_eq!(cfg.train.n_steps, 12);
        assert_eq!(cfg.contrast.strategy, StrategyKind::Shallow);
        assert_eq!(cfg.contrast.boundary, Some(2));
        assert_eq!(cfg.sweep.rhos, vec![0.0, 0.5]);
        assert_eq!(cfg.probe.min_plateau, Some(3));
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);

        assert!(RunConfig::default()
            .with_overrides(&[("train.nope".into(), "1".into())])
            .is_err());
        assert!(RunConfig::default()
            .with_overrides(&[("nope.x".into(), "1".into())])
            .is_err());
        assert!(RunConfig::default()
            .with_overrides(&[("train.n_steps".into(), "many".into())])
            .is_err());
    }

    #[test]
    fn validation_catches_task_overflow() {
        let mut cfg = RunConfig::default();
        cfg.model.vocab_size = 10;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.sweep.rhos = vec![1.5];
        assert!(cfg.validate().is_err());
    }
}
