//! Run configuration, stored as a flat JSON object with dotted keys
//! (`"scheduler.patience": 3`, `"model.tcn_groups": 4`, ...).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::optim::{AdamConfig, SchedulerConfig};
use super::split::SplitSpec;
use super::{Result, TrainError};
use crate::model::WiFlowConfig;
use crate::objectives::LossConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Ticks between consecutive window starts.
    pub stride: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub scheduler: SchedulerConfig,
    pub split: SplitSpec,
    pub loss: LossConfig,
    pub model: WiFlowConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            eval_batch_size: 64,
            lr: 1e-4,
            weight_decay: 5e-5,
            max_steps: None,
            stride: 20,
            seed: 0,
            optimizer: AdamConfig::default(),
            scheduler: SchedulerConfig::default(),
            split: SplitSpec::default(),
            loss: LossConfig::default(),
            model: WiFlowConfig::default(),
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> TrainError {
    TrainError::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() || prefix.is_empty() => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &Map<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("prefix keys are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

impl TrainConfig {
    /// Small profile for CI and desk checks against synthetic data.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 16,
            eval_batch_size: 32,
            lr: 1e-3,
            // small synthetic sets have few sessions per LOSO pool
            split: SplitSpec {
                pool_ratio: [0.75, 0.25],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        flatten_into(
            "",
            &serde_json::to_value(self).expect("config serializes"),
            &mut out,
        );
        out
    }

    pub fn to_flat_json(&self) -> String {
        serde_json::to_string_pretty(&Value::Object(self.to_flat())).expect("config serializes")
    }

    /// Overlays `flat` onto this config. Keys must name leaves of the
    /// config tree; nested objects are accepted and flattened first.
    pub fn merged(&self, flat: &Map<String, Value>) -> Result<Self> {
        let mut incoming = Map::new();
        flatten_into("", &Value::Object(flat.clone()), &mut incoming);
        let mut base = self.to_flat();
        for (k, v) in incoming {
            if !base.contains_key(&k) {
                return Err(bad(&k, "unknown key"));
            }
            base.insert(k, v);
        }
        let cfg: TrainConfig =
            serde_json::from_value(unflatten(&base)).map_err(|e| bad("<config>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a flat (or nested) JSON object on top of the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let Value::Object(m) = v else {
            return Err(bad("<config>", "expected a JSON object"));
        };
        TrainConfig::default().merged(&m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Sets one dotted key from its textual value, which is read as JSON
    /// when it parses and as a string otherwise.
    pub fn set(&self, key: &str, value: &str) -> Result<Self> {
        let v = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        self.set_value(key, v)
    }

    pub fn set_value(&self, key: &str, value: Value) -> Result<Self> {
        self.merged(&Map::from_iter([(key.to_string(), value)]))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("scheduler.factor", self.scheduler.factor),
            ("scheduler.min_lr", self.scheduler.min_lr),
            ("optimizer.eps", self.optimizer.eps),
        ];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(bad(k, "must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be >= 0"));
        }
        if !(self.scheduler.factor < 1.0) {
            return Err(bad("scheduler.factor", "must be below 1"));
        }
        for (k, b) in [
            ("optimizer.beta1", self.optimizer.beta1),
            ("optimizer.beta2", self.optimizer.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(bad(k, "must lie in [0, 1)"));
            }
        }
        if self.scheduler.patience == 0 {
            return Err(bad("scheduler.patience", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be >= 1"));
        }
        if self.eval_batch_size == 0 {
            return Err(bad("eval_batch_size", "must be >= 1"));
        }
        if self.stride == 0 {
            return Err(bad("stride", "must be >= 1"));
        }
        self.split.validate()?;
        self.loss
            .validate()
            .map_err(|e| bad("loss", e.to_string()))?;
        self.model
            .validate()
            .map_err(|e| bad("model", e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_echo_round_trips() {
        let cfg = TrainConfig::desk().set("scheduler.patience", "5").unwrap();
        let text = cfg.to_flat_json();
        assert!(text.contains("\"scheduler.patience\": 5"));
        assert!(text.contains("\"model.tcn_channel_schedule\""));
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        assert!(TrainConfig::default().set("epoch", "3").is_err());
        assert!(TrainConfig::default()
            .set("scheduler.patience", "0")
            .is_err());
        assert!(TrainConfig::default().set("lr", "-1").is_err());
        assert!(TrainConfig::default()
            .set("model.attention_groups", "7")
            .is_err());
    }

    #[test]
    fn nested_input_is_accepted() {
        let cfg =
            TrainConfig::from_json(r#"{"split": {"mode": "loso", "test_subject": "s3"}}"#).unwrap();
        assert_eq!(cfg.split.test_subject.as_deref(), Some("s3"));
    }

    #[test]
    fn string_values_fall_back_to_text() {
        let cfg = TrainConfig::default()
            .set("split.test_subject", "s1")
            .and_then(|c| c.set("split.mode", "loso"))
            .unwrap();
        assert_eq!(cfg.split.test_subject.as_deref(), Some("s1"));
        assert!(TrainConfig::default().set("split.mode", "loso").is_err());
    }
}
