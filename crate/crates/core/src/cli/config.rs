//! Lab configuration: one JSON document, dotted-key overrides, and seed
//! derivation from the single run seed.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, Result};
use crate::evalreport::{EvalOptions, DEFAULT_BINS};
use crate::losses::LossSpec;
use crate::model::{Decoding, ModelConfig};
use crate::rft::RftConfig;
use crate::seed::derive_seed;
use crate::tasks::{TaskKind, TaskSpec};
use crate::training::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval_in: usize,
    pub n_eval_ood: usize,
}

/// Brief SFT run that produces the shared starting model for comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmStart {
    /// 0 starts from a fresh initialization.
    pub steps: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Prompts per split scored at each learning-curve point.
    pub curve_prompts: usize,
    /// Draws per prompt at learning-curve points.
    pub curve_k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramConfig {
    pub bins: usize,
    /// Training items scanned; `None` scans all.
    #[serde(default)]
    pub max_items: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

/// Everything a workflow needs. Nested `seed` fields are not user settings:
/// [`LabConfig::resolve`] overwrites them with sub-seeds of `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub data: DataConfig,
    pub warm_start: WarmStart,
    pub train: RunConfig,
    pub eval: EvalConfig,
    pub rft: RftConfig,
    pub histogram: HistogramConfig,
    pub sweep: SweepConfig,
}

impl Default for LabConfig {
    /// Desk-scale addition setup: train on 2–3 digit operands, evaluate
    /// out of distribution on 4 digits. A 300-step SFT warm start stands in
    /// for a pretrained base; fine-tuning is one epoch over 5k items.
    fn default() -> Self {
        let task = TaskSpec::new(TaskKind::Addition, 0);
        let model = ModelConfig {
            vocab_size: task.vocabulary().size(),
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            context_length: 64,
            seed: 0,
        };
        let mut train = RunConfig::new(model, LossSpec::sft());
        train.eval_every = 20;
        let mut cfg = Self {
            seed: 0,
            task,
            data: DataConfig {
                n_train: 5000,
                n_eval_in: 200,
                n_eval_ood: 200,
            },
            warm_start: WarmStart {
                steps: 300,
                learning_rate: 2e-3,
            },
            train,
            eval: EvalConfig {
                k: 16,
                temperature: 1.0,
                max_new_tokens: 64,
                curve_prompts: 100,
                curve_k: 4,
            },
            rft: RftConfig {
                prompt_count: Some(1000),
                ..RftConfig::default()
            },
            histogram: HistogramConfig {
                bins: DEFAULT_BINS,
                max_items: None,
            },
            sweep: SweepConfig {
                learning_rates: vec![2e-4, 1e-4, 5e-5, 1e-5],
                batch_sizes: vec![64],
            },
        };
        cfg.resolve();
        cfg
    }
}

impl LabConfig {
    /// Reads a JSON file (or the defaults when `path` is `None`), applies
    /// `key=value` overrides, derives nested seeds and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| LabError::file(p, e))?;
                let user: Value = serde_json::from_str(&text)
                    .map_err(|e| LabError::InvalidConfig(format!("{}: {e}", p.display())))?;
                let mut base = serde_json::to_value(Self::default())?;
                merge(&mut base, user);
                base
            }
            None => serde_json::to_value(Self::default())?,
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: Self =
            serde_json::from_value(doc).map_err(|e| LabError::InvalidConfig(e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overwrites every nested seed with a sub-seed of `self.seed`.
    pub fn resolve(&mut self) {
        self.task.seed = derive_seed(self.seed, "tasks");
        self.train.model.seed = derive_seed(self.seed, "model-init");
        self.train.seed = derive_seed(self.seed, "train");
        self.rft.seed = derive_seed(self.seed, "rft");
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        self.rft.validate()?;
        let vocab = self.task.vocabulary().size();
        if self.train.model.vocab_size < vocab {
            return Err(LabError::InvalidConfig(format!(
                "model vocab_size {} is smaller than the {} task vocabulary ({vocab})",
                self.train.model.vocab_size, self.task.kind
            )));
        }
        if self.data.n_train == 0 {
            return Err(LabError::InvalidConfig("data.n_train must be >= 1".into()));
        }
        if self.eval.k == 0 || self.eval.curve_k == 0 {
            return Err(LabError::InvalidConfig("eval.k and eval.curve_k must be >= 1".into()));
        }
        Decoding::from_temperature(self.eval.temperature)?;
        if self.warm_start.steps > 0 && !(self.warm_start.learning_rate > 0.0) {
            return Err(LabError::InvalidConfig("warm_start.learning_rate must be > 0".into()));
        }
        if self.histogram.bins == 0 {
            return Err(LabError::InvalidConfig("histogram.bins must be >= 1".into()));
        }
        Ok(())
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            k: self.eval.k,
            decoding: Decoding::from_temperature(self.eval.temperature).unwrap_or(Decoding::Greedy),
            max_new_tokens: self.eval.max_new_tokens,
            seed: derive_seed(self.seed, "eval"),
        }
    }

    /// Run configuration of the warm-start stage.
    pub fn warm_start_run(&self) -> RunConfig {
        let mut rc = self.train.clone();
        rc.loss = LossSpec::sft();
        rc.max_steps = Some(self.warm_start.steps);
        rc.learning_rate = self.warm_start.learning_rate;
        rc.seed = derive_seed(self.seed, "warm-start");
        rc.eval_every = 0;
        rc.output_dir = None;
        rc
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, anything else
/// replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON when possible and
/// taken as a string otherwise. Unknown keys are rejected when the document
/// is deserialized.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| LabError::InvalidConfig(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| LabError::InvalidConfig(format!("{key}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| LabError::InvalidConfig(format!("unknown config key {key}")))?;
    }
    unreachable!("split always yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = LabConfig::default();
        cfg.validate().unwrap();
        let back: LabConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_after_load() {
        let cfg = LabConfig::load(
            None,
            &["train.learning_rate=0.5".into(), "train.loss.kind=DFT_TOKEN".into(), "seed=7".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.learning_rate, 0.5);
        assert_eq!(cfg.train.loss, LossSpec::dft());
        assert_eq!(cfg.train.seed, derive_seed(7, "train"));
    }

    #[test]
    fn bad_overrides_are_validation_errors() {
        for o in ["train.nope=1", "train.learning_rate", "seed.x=1", "train.learning_rate=-1"] {
            let err = LabConfig::load(None, &[o.to_string()]).unwrap_err();
            assert!(err.is_validation(), "{o}: {err}");
        }
    }

    #[test]
    fn partial_file_merges_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"batch_size": 8}, "warm_start": {"steps": 0}}"#).unwrap();
        let cfg = LabConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.warm_start.steps, 0);
        assert_eq!(cfg.data, LabConfig::default().data);
    }
}
