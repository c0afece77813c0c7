//! Offline rejection-sampling fine-tuning: sample from a model, keep the
//! completions the verifier accepts, retrain on them.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::losses::LossSpec;
use crate::model::{sample_batch, Decoding, Model, SampleRequest, EOS_ID};
use crate::seed::derive_indexed;
use crate::tasks::{self, Demonstration};
use crate::training::{train_from, EvalHook, RunConfig, TrainOutcome};

const SAMPLE_CHUNK: usize = 512;

pub const FILTERED_FILE: &str = "filtered.jsonl";
pub const STATS_FILE: &str = "filter_stats.json";

fn default_n() -> usize {
    4
}
fn default_temperature() -> f64 {
    1.0
}
fn default_max_new() -> usize {
    64
}
fn default_dedupe() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RftConfig {
    #[serde(default = "default_n")]
    pub n_responses_per_prompt: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    /// Number of prompts drawn from the training split; `None` uses all.
    #[serde(default)]
    pub prompt_count: Option<usize>,
    #[serde(default = "default_dedupe")]
    pub dedupe: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RftConfig {
    fn default() -> Self {
        Self {
            n_responses_per_prompt: default_n(),
            temperature: default_temperature(),
            max_new_tokens: default_max_new(),
            prompt_count: None,
            dedupe: default_dedupe(),
            seed: 0,
        }
    }
}

impl RftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_responses_per_prompt == 0 {
            return Err(LabError::InvalidConfig("n_responses_per_prompt must be >= 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(LabError::InvalidConfig(format!(
                "sampling temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(LabError::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub prompts: usize,
    pub samples_per_prompt: usize,
    /// Completions the verifier accepted, before dedupe.
    pub verified: usize,
    pub duplicates_removed: usize,
    pub retained: usize,
    /// `verified / (samples_per_prompt * prompts)`.
    pub keep_rate: f64,
    /// Verified completions per prompt, before dedupe.
    pub per_prompt_kept: Vec<usize>,
    /// `kept_histogram[c]` counts prompts with exactly `c` verified completions.
    pub kept_histogram: Vec<usize>,
}

/// Draws `n_responses_per_prompt` completions per prompt and keeps those
/// `verify(prompt, completion)` accepts. Completions cut off before EOS are
/// kept with EOS appended when they verify. Prompt `i` samples from a seed
/// derived from `(seed, i)`, so the result does not depend on batching.
pub fn sample_and_filter<F>(
    model: &Model,
    prompts: &[Demonstration],
    verify: F,
    config: &RftConfig,
) -> Result<(Vec<Demonstration>, FilterStats)>
where
    F: Fn(&Demonstration, &[usize]) -> bool,
{
    config.validate()?;
    if prompts.is_empty() {
        return Err(LabError::InvalidInput("no prompts to sample from".into()));
    }
    let n = config.n_responses_per_prompt;
    let decoding = Decoding::Temperature(config.temperature);
    let mut requests = Vec::with_capacity(prompts.len() * n);
    for (i, p) in prompts.iter().enumerate() {
        let prompt_seed = derive_indexed(config.seed, "rft-prompt", i as u64);
        for j in 0..n {
            requests.push(SampleRequest {
                prompt: p.prompt_ids.clone(),
                seed: derive_indexed(prompt_seed, "rft-draw", j as u64),
            });
        }
    }
    let mut completions = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(SAMPLE_CHUNK) {
        completions.extend(sample_batch(model, chunk, config.max_new_tokens, decoding)?);
    }

    let mut kept = Vec::new();
    let mut seen: HashSet<(Vec<usize>, Vec<usize>)> = HashSet::new();
    let mut per_prompt_kept = vec![0; prompts.len()];
    let mut duplicates_removed = 0;
    for (idx, mut completion) in completions.into_iter().enumerate() {
        let p = &prompts[idx / n];
        if !verify(p, &completion) {
            continue;
        }
        per_prompt_kept[idx / n] += 1;
        if completion.last() != Some(&EOS_ID) {
            completion.push(EOS_ID);
        }
        if config.dedupe && !seen.insert((p.prompt_ids.clone(), completion.clone())) {
            duplicates_removed += 1;
            continue;
        }
        kept.push(Demonstration {
            prompt_ids: p.prompt_ids.clone(),
            response_ids: completion,
            task: p.task,
            difficulty: p.difficulty,
        });
    }
    let verified: usize = per_prompt_kept.iter().sum();
    let mut kept_histogram = vec![0; n + 1];
    for &c in &per_prompt_kept {
        kept_histogram[c] += 1;
    }
    let stats = FilterStats {
        prompts: prompts.len(),
        samples_per_prompt: n,
        verified,
        duplicates_removed,
        retained: kept.len(),
        keep_rate: verified as f64 / (n * prompts.len()) as f64,
        per_prompt_kept,
        kept_histogram,
    };
    Ok((kept, stats))
}

/// The task's own verifier, for use with [`sample_and_filter`].
pub fn task_verifier(prompt: &Demonstration, completion: &[usize]) -> bool {
    tasks::verify(prompt.task, &prompt.prompt_ids, completion)
}

/// Fine-tunes `base` on the filtered set with `loss`; the rest of the run
/// comes from `run_config`.
pub fn rft_train(
    base: &Model,
    filtered: &[Demonstration],
    loss: &LossSpec,
    run_config: &RunConfig,
    hooks: &mut [EvalHook<'_>],
) -> Result<TrainOutcome> {
    if filtered.is_empty() {
        return Err(LabError::EmptyFilteredSet);
    }
    let mut config = run_config.clone();
    config.loss = loss.clone();
    train_from(base.clone(), &config, filtered, hooks)
}

pub fn write_outputs(dir: &Path, kept: &[Demonstration], stats: &FilterStats) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::file(dir, e))?;
    tasks::write_jsonl(&dir.join(FILTERED_FILE), kept)?;
    let path = dir.join(STATS_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(stats)?).map_err(|e| LabError::file(&path, e))
}

/// Reads back a filtered set written by [`write_outputs`].
pub fn read_filtered(dir: &Path) -> Result<Vec<Demonstration>> {
    tasks::read_jsonl(&dir.join(FILTERED_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tasks::{generate_dataset, TaskKind, TaskSpec};

    fn setup() -> (Model, Vec<Demonstration>) {
        let model = Model::new(ModelConfig {
            vocab_size: TaskKind::Reversal.vocabulary().size(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            context_length: 32,
            seed: 3,
        })
        .unwrap();
        let prompts = generate_dataset(&TaskSpec::new(TaskKind::Reversal, 1), 6, 1, 1).unwrap().train;
        (model, prompts)
    }

    fn cfg(dedupe: bool) -> RftConfig {
        RftConfig {
            max_new_tokens: 6,
            dedupe,
            ..RftConfig::default()
        }
    }

    #[test]
    fn reject_all_gives_empty_set() {
        let (m, p) = setup();
        let (kept, stats) = sample_and_filter(&m, &p, |_, _| false, &cfg(true)).unwrap();
        assert!(kept.is_empty());
        assert_eq!(stats.keep_rate, 0.0);
        assert_eq!(stats.kept_histogram[0], p.len());
    }

    #[test]
    fn accept_all_keeps_every_draw() {
        let (m, p) = setup();
        let (kept, stats) = sample_and_filter(&m, &p, |_, _| true, &cfg(false)).unwrap();
        assert_eq!(kept.len(), 4 * p.len());
        assert_eq!(stats.keep_rate, 1.0);
        assert!(kept.iter().all(|d| d.response_ids.last() == Some(&EOS_ID)));
    }

    #[test]
    fn per_prompt_counts_follow_the_filter() {
        let (m, p) = setup();
        let count = std::cell::Cell::new(0);
        let every_other = |_: &Demonstration, _: &[usize]| {
            count.set(count.get() + 1);
            count.get() % 2 == 0
        };
        let (kept, stats) = sample_and_filter(&m, &p, every_other, &cfg(false)).unwrap();
        assert!(stats.per_prompt_kept.iter().all(|&c| c == 2));
        assert_eq!(kept.len(), 2 * p.len());
        assert_eq!(stats.keep_rate, 0.5);
    }

    #[test]
    fn dedupe_removes_repeats() {
        let (m, p) = setup();
        let prompts = vec![p[0].clone(); 3];
        let c = RftConfig {
            temperature: 1e-3,
            ..cfg(true)
        };
        let (kept, stats) = sample_and_filter(&m, &prompts, |_, _| true, &c).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(stats.duplicates_removed, 11);
        assert_eq!(stats.keep_rate, 1.0);
    }

    #[test]
    fn empty_filtered_set_is_rejected() {
        let (m, _) = setup();
        let rc = RunConfig::new(m.config().clone(), LossSpec::sft());
        let err = rft_train(&m, &[], &LossSpec::dft(), &rc, &mut []).unwrap_err();
        assert!(matches!(err, LabError::EmptyFilteredSet));
    }
}
