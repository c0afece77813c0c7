//! Synthetic demonstration tasks with exact answer verifiers.

mod generators;
mod vocab;

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::EOS_ID;
use crate::seed;

pub use generators::{addition_scratchpad, Item};
pub use vocab::{Vocabulary, SPECIAL_TOKENS};

const ADDITION_VOCAB: Vocabulary = Vocabulary::new("0123456789+=,;c");
const REVERSAL_VOCAB: Vocabulary = Vocabulary::new("abcdefghijklmnopqrstuvwxyz|");
const MODULAR_VOCAB: Vocabulary = Vocabulary::new("0123456789+-*() mod=;");

// Generation gives up after this many draws per requested item.
const MAX_ATTEMPTS_PER_ITEM: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "addition-scratchpad")]
    Addition,
    #[serde(rename = "sequence-reversal")]
    Reversal,
    #[serde(rename = "modular-arithmetic")]
    Modular,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [Self::Addition, Self::Reversal, Self::Modular];

    pub fn name(self) -> &'static str {
        match self {
            Self::Addition => "addition-scratchpad",
            Self::Reversal => "sequence-reversal",
            Self::Modular => "modular-arithmetic",
        }
    }

    pub fn vocabulary(self) -> Vocabulary {
        match self {
            Self::Addition => ADDITION_VOCAB,
            Self::Reversal => REVERSAL_VOCAB,
            Self::Modular => MODULAR_VOCAB,
        }
    }

    /// Default `(train, ood)` inclusive difficulty ranges.
    pub fn default_ranges(self) -> ((u32, u32), (u32, u32)) {
        match self {
            Self::Addition => ((2, 3), (4, 4)),
            Self::Reversal => ((3, 8), (9, 12)),
            Self::Modular => ((1, 2), (3, 3)),
        }
    }

    /// Ground-truth final answer recomputed from the prompt text.
    pub fn answer(self, prompt: &str) -> Result<String> {
        match self {
            Self::Addition => generators::addition_answer(prompt),
            Self::Reversal => generators::reversal_answer(prompt),
            Self::Modular => generators::modular_answer(prompt),
        }
    }

    pub fn generate(self, rng: &mut impl Rng, difficulty: u32) -> Item {
        match self {
            Self::Addition => generators::addition(rng, difficulty),
            Self::Reversal => generators::reversal(rng, difficulty),
            Self::Modular => generators::modular(rng, difficulty),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LabError::InvalidConfig(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub train_difficulty: (u32, u32),
    pub ood_difficulty: (u32, u32),
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        let (train, ood) = kind.default_ranges();
        Self {
            kind,
            train_difficulty: train,
            ood_difficulty: ood,
            seed,
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.kind.vocabulary()
    }

    pub fn validate(&self) -> Result<()> {
        let check = |(lo, hi): (u32, u32), what: &str| {
            if lo == 0 || lo > hi {
                Err(LabError::InvalidConfig(format!("{what} difficulty range {lo}..={hi} is invalid")))
            } else {
                Ok(())
            }
        };
        check(self.train_difficulty, "train")?;
        check(self.ood_difficulty, "ood")?;
        let (a, b) = (self.train_difficulty, self.ood_difficulty);
        if a.0 <= b.1 && b.0 <= a.1 {
            return Err(LabError::InvalidConfig(format!(
                "train range {}..={} overlaps ood range {}..={}",
                a.0, a.1, b.0, b.1
            )));
        }
        if self.kind == TaskKind::Addition && a.1.max(b.1) > 18 {
            return Err(LabError::InvalidConfig("addition supports at most 18 digits".into()));
        }
        Ok(())
    }
}

/// Tokenized prompt/response pair; `response_ids` ends with EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Demonstration {
    pub prompt_ids: Vec<usize>,
    pub response_ids: Vec<usize>,
    pub task: TaskKind,
    pub difficulty: u32,
}

impl Demonstration {
    pub fn from_text(task: TaskKind, prompt: &str, response: &str, difficulty: u32) -> Result<Self> {
        let v = task.vocabulary();
        let mut response_ids = v.tokenize(response)?;
        response_ids.push(EOS_ID);
        Ok(Self {
            prompt_ids: v.tokenize(prompt)?,
            response_ids,
            task,
            difficulty,
        })
    }

    pub fn prompt_text(&self) -> Result<String> {
        self.task.vocabulary().detokenize(&self.prompt_ids)
    }

    /// Response text without the trailing EOS.
    pub fn response_text(&self) -> Result<String> {
        self.task.vocabulary().detokenize(&self.response_ids)
    }

    pub fn to_record(&self) -> Result<Record> {
        Ok(Record {
            prompt: self.prompt_text()?,
            response: self.response_text()?,
            task: self.task,
            difficulty: self.difficulty,
        })
    }

    pub fn pairs(demos: &[Demonstration]) -> Vec<(&[usize], &[usize])> {
        demos
            .iter()
            .map(|d| (d.prompt_ids.as_slice(), d.response_ids.as_slice()))
            .collect()
    }
}

/// One JSON-lines dataset row. The response excludes the EOS token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub prompt: String,
    pub response: String,
    pub task: TaskKind,
    pub difficulty: u32,
}

impl Record {
    pub fn to_demonstration(&self) -> Result<Demonstration> {
        Demonstration::from_text(self.task, &self.prompt, &self.response, self.difficulty)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Demonstration>,
    pub eval_in: Vec<Demonstration>,
    pub eval_ood: Vec<Demonstration>,
}

pub fn tokenize(task: TaskKind, text: &str) -> Result<Vec<usize>> {
    task.vocabulary().tokenize(text)
}

pub fn detokenize(task: TaskKind, ids: &[usize]) -> Result<String> {
    task.vocabulary().detokenize(ids)
}

/// Answer-only check: the completion (up to its first EOS) must end in the
/// ground-truth answer. For addition and modular arithmetic the answer is
/// the text after the last `=`; for reversal it is the whole completion.
/// Any decoding or parsing failure yields `false`.
pub fn verify(task: TaskKind, prompt_ids: &[usize], completion_ids: &[usize]) -> bool {
    let v = task.vocabulary();
    let (Ok(prompt), Ok(completion)) = (v.detokenize(prompt_ids), v.detokenize(completion_ids)) else {
        return false;
    };
    verify_text(task, &prompt, &completion)
}

pub fn verify_text(task: TaskKind, prompt: &str, completion: &str) -> bool {
    let Ok(answer) = task.answer(prompt) else {
        return false;
    };
    match task {
        TaskKind::Reversal => completion == answer,
        TaskKind::Addition | TaskKind::Modular => completion
            .rsplit_once('=')
            .is_some_and(|(_, tail)| tail == answer),
    }
}

fn draw_split(
    spec: &TaskSpec,
    n: usize,
    range: (u32, u32),
    component: &str,
    seen: &mut HashSet<String>,
) -> Result<Vec<Demonstration>> {
    let mut rng = seed::rng_for(spec.seed, component);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > n * MAX_ATTEMPTS_PER_ITEM {
            return Err(LabError::InvalidConfig(format!(
                "could only generate {} distinct {component} items of {n} requested",
                out.len()
            )));
        }
        let difficulty = rng.random_range(range.0..=range.1);
        let item = spec.kind.generate(&mut rng, difficulty);
        if seen.contains(&item.prompt) {
            continue;
        }
        let demo = Demonstration::from_text(spec.kind, &item.prompt, &item.response, difficulty)?;
        seen.insert(item.prompt);
        out.push(demo);
    }
    Ok(out)
}

/// Train, in-distribution eval and OOD eval splits. Prompts are distinct
/// across and within splits. Deterministic in `spec.seed`.
pub fn generate_dataset(spec: &TaskSpec, n_train: usize, n_eval_in: usize, n_eval_ood: usize) -> Result<Splits> {
    spec.validate()?;
    if n_train == 0 || n_eval_in == 0 || n_eval_ood == 0 {
        return Err(LabError::InvalidConfig("split sizes must be >= 1".into()));
    }
    let mut seen = HashSet::new();
    let train = draw_split(spec, n_train, spec.train_difficulty, "tasks-train", &mut seen)?;
    let eval_in = draw_split(spec, n_eval_in, spec.train_difficulty, "tasks-eval-in", &mut seen)?;
    let eval_ood = draw_split(spec, n_eval_ood, spec.ood_difficulty, "tasks-eval-ood", &mut seen)?;
    Ok(Splits {
        train,
        eval_in,
        eval_ood,
    })
}

pub fn write_jsonl(path: &Path, demos: &[Demonstration]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LabError::file(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for d in demos {
        serde_json::to_writer(&mut w, &d.to_record()?)?;
        w.write_all(b"\n")?;
    }
    w.flush().map_err(|e| LabError::file(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Demonstration>> {
    let file = std::fs::File::open(path).map_err(|e| LabError::file(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LabError::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| {
            LabError::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(rec.to_demonstration()?);
    }
    Ok(out)
}
