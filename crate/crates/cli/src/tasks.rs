//! Synthetic token tasks.
//!
//! Every task is a deterministic cyclic successor language over its own
//! vocabulary slice: given the current token, the next token is fixed by the
//! task's cycle. That makes each task learnable by the reference model
//! (which has no positional encoding) while distinct slices and cycles keep
//! tasks pairwise distinguishable.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mergeforge_core::model::{TokenBatch, TransformerConfig};
use mergeforge_core::rng::{derive_seed, Rng};
use mergeforge_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// A fixed pattern of `seq_len/2` distinct tokens, repeated: each record
    /// is a sequence followed by its exact repetition.
    Copy,
    /// The task cycle walked backward.
    ReversePattern,
    /// Arithmetic progression modulo the slice span with a fixed step.
    ModularArithmeticSequence,
    /// A seeded random successor permutation over the whole slice.
    ConstantGrammar,
}

impl TaskKind {
    pub fn label(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::ReversePattern => "reverse-pattern",
            TaskKind::ModularArithmeticSequence => "modular-arithmetic-sequence",
            TaskKind::ConstantGrammar => "constant-grammar",
        }
    }
}

fn default_samples() -> usize {
    240
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Report column name; defaults to the kind label.
    #[serde(default)]
    pub name: Option<String>,
    pub vocab_lo: usize,
    pub vocab_hi: usize,
    pub seq_len: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.label().to_string())
    }

    pub fn validate(&self, model: &TransformerConfig) -> Result<()> {
        if self.vocab_hi > model.vocab_size {
            return Err(Error::Config(format!(
                "task `{}`: vocab slice [{}, {}) overflows vocab size {}",
                self.name(),
                self.vocab_lo,
                self.vocab_hi,
                model.vocab_size
            )));
        }
        let span = self.span()?;
        if self.seq_len < 2 || self.seq_len > model.max_seq_len {
            return Err(Error::Config(format!(
                "task `{}`: seq_len {} outside [2, {}]",
                self.name(),
                self.seq_len,
                model.max_seq_len
            )));
        }
        if self.samples == 0 {
            return Err(Error::Config(format!("task `{}`: zero samples", self.name())));
        }
        if self.kind == TaskKind::Copy {
            if self.seq_len % 2 != 0 {
                return Err(Error::Config(format!(
                    "copy task `{}` needs an even seq_len",
                    self.name()
                )));
            }
            if span < self.seq_len / 2 {
                return Err(Error::Config(format!(
                    "copy task `{}`: slice span {span} smaller than pattern length {}",
                    self.name(),
                    self.seq_len / 2
                )));
            }
        }
        Ok(())
    }

    fn span(&self) -> Result<usize> {
        if self.vocab_lo + 2 > self.vocab_hi {
            return Err(Error::Config(format!(
                "task `{}`: vocab slice [{}, {}) needs at least 2 tokens",
                self.name(),
                self.vocab_lo,
                self.vocab_hi
            )));
        }
        Ok(self.vocab_hi - self.vocab_lo)
    }

    /// The task's token cycle: following it from any offset generates valid
    /// records.
    fn cycle(&self, seed: u64) -> Result<Vec<usize>> {
        let span = self.span()?;
        let mut rng = Rng::new(derive_seed(seed, "task.cycle", self.seed));
        let mut tokens: Vec<usize> = (self.vocab_lo..self.vocab_hi).collect();
        match self.kind {
            TaskKind::Copy => {
                rng.shuffle(&mut tokens);
                tokens.truncate(self.seq_len / 2);
                Ok(tokens)
            }
            TaskKind::ReversePattern => {
                rng.shuffle(&mut tokens);
                tokens.reverse();
                Ok(tokens)
            }
            TaskKind::ConstantGrammar => {
                rng.shuffle(&mut tokens);
                Ok(tokens)
            }
            TaskKind::ModularArithmeticSequence => {
                let mut step = 1 + rng.next_index(span - 1);
                while gcd(step, span) != 1 {
                    step = 1 + rng.next_index(span - 1);
                }
                Ok((0..span).map(|k| self.vocab_lo + (k * step) % span).collect())
            }
        }
    }

    /// Generate the task's records deterministically.
    pub fn generate(&self, model: &TransformerConfig, seed: u64) -> Result<Vec<Record>> {
        self.validate(model)?;
        let cycle = self.cycle(seed)?;
        let mut rng = Rng::new(derive_seed(seed, &format!("task.samples.{}", self.name()), self.seed));
        let records = (0..self.samples)
            .map(|_| {
                let start = rng.next_index(cycle.len());
                let ids = (0..self.seq_len)
                    .map(|k| cycle[(start + k) % cycle.len()])
                    .collect();
                Record { ids, affinity: 0 }
            })
            .collect();
        Ok(records)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// One dataset line: a token sequence and the index of the expert/dataset
/// it belongs to.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Record {
    pub ids: Vec<usize>,
    pub affinity: usize,
}

#[derive(Debug, Clone)]
pub struct TaskFiles {
    pub name: String,
    pub train: PathBuf,
    pub eval: PathBuf,
}

/// Generate all task datasets under `dir` as JSON-lines files with a
/// deterministic 90/10 train/eval split (first 90% train, rest eval).
pub fn gen_tasks(
    specs: &[TaskSpec],
    model: &TransformerConfig,
    seed: u64,
    dir: &Path,
) -> Result<Vec<TaskFiles>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::with_capacity(specs.len());
    for (affinity, spec) in specs.iter().enumerate() {
        let mut records = spec.generate(model, seed)?;
        for r in &mut records {
            r.affinity = affinity;
        }
        let eval_count = (records.len() / 10).max(1);
        let train_count = records.len() - eval_count;
        let name = spec.name();
        let train = dir.join(format!("{name}.train.jsonl"));
        let eval = dir.join(format!("{name}.eval.jsonl"));
        write_records(&train, &records[..train_count])?;
        write_records(&eval, &records[train_count..])?;
        out.push(TaskFiles { name, train, eval });
    }
    Ok(out)
}

fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for record in records {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a JSON-lines dataset back as records.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| serde_json::from_str(line).map_err(Error::from))
        .collect()
}

/// Chunk records into equal-affinity batches of at most `batch_size`
/// sequences.
pub fn batch_records(records: &[Record], batch_size: usize) -> Result<Vec<TokenBatch>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("dataset holds no records".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let affinity = records[0].affinity;
    if records.iter().any(|r| r.affinity != affinity) {
        return Err(Error::InvalidArgument(
            "records in one dataset must share an affinity".into(),
        ));
    }
    Ok(records
        .chunks(batch_size)
        .map(|chunk| TokenBatch {
            sequences: chunk.iter().map(|r| r.ids.clone()).collect(),
            affinity,
        })
        .collect())
}

/// Load a JSON-lines dataset as batches.
pub fn load_batches(path: &Path, batch_size: usize) -> Result<Vec<TokenBatch>> {
    batch_records(&read_records(path)?, batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TransformerConfig {
        TransformerConfig::default()
    }

    fn spec(kind: TaskKind, lo: usize, hi: usize) -> TaskSpec {
        TaskSpec {
            kind,
            name: None,
            vocab_lo: lo,
            vocab_hi: hi,
            seq_len: 16,
            samples: 40,
            seed: 0,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(TaskKind::ConstantGrammar, 2, 20);
        let a = s.generate(&model(), 7).unwrap();
        let b = s.generate(&model(), 7).unwrap();
        assert_eq!(a, b);
        let c = s.generate(&model(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn copy_records_repeat_their_first_half() {
        let s = spec(TaskKind::Copy, 2, 10);
        for record in s.generate(&model(), 3).unwrap() {
            let (first, second) = record.ids.split_at(8);
            assert_eq!(first, second);
        }
    }

    #[test]
    fn records_stay_in_slice_and_follow_a_successor_function() {
        for kind in [
            TaskKind::Copy,
            TaskKind::ReversePattern,
            TaskKind::ModularArithmeticSequence,
            TaskKind::ConstantGrammar,
        ] {
            let s = spec(kind, 4, 12);
            let records = s.generate(&model(), 1).unwrap();
            let mut successor = std::collections::BTreeMap::new();
            for record in &records {
                for &id in &record.ids {
                    assert!((4..12).contains(&id), "{kind:?}: token {id} out of slice");
                }
                for pair in record.ids.windows(2) {
                    let prev = successor.insert(pair[0], pair[1]);
                    if let Some(p) = prev {
                        assert_eq!(p, pair[1], "{kind:?}: inconsistent successor");
                    }
                }
            }
        }
    }

    #[test]
    fn vocab_overflow_rejected() {
        let s = spec(TaskKind::ConstantGrammar, 60, 70);
        assert!(matches!(s.generate(&model(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn split_files_are_disjoint_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let specs = vec![
            spec(TaskKind::Copy, 2, 10),
            spec(TaskKind::ModularArithmeticSequence, 12, 28),
        ];
        let files = gen_tasks(&specs, &model(), 5, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let again = gen_tasks(&specs, &model(), 5, dir.path()).unwrap();
        for (a, b) in files.iter().zip(&again) {
            assert_eq!(
                std::fs::read(&a.train).unwrap(),
                std::fs::read(&b.train).unwrap()
            );
        }
        let train = read_records(&files[0].train).unwrap();
        let eval = read_records(&files[0].eval).unwrap();
        assert_eq!(train.len() + eval.len(), 40);
        assert_eq!(eval.len(), 4);
        for r in &train {
            assert_eq!(r.affinity, 0);
        }
        let eval1 = read_records(&files[1].eval).unwrap();
        for r in &eval1 {
            assert_eq!(r.affinity, 1);
        }
    }

    #[test]
    fn batching_respects_affinity() {
        let records = vec![
            Record { ids: vec![1, 2], affinity: 0 },
            Record { ids: vec![3, 4], affinity: 0 },
            Record { ids: vec![5, 6], affinity: 0 },
        ];
        let batches = batch_records(&records, 2).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].sequences.len(), 2);
        assert_eq!(batches[1].sequences.len(), 1);

        let mixed = vec![
            Record { ids: vec![1, 2], affinity: 0 },
            Record { ids: vec![3, 4], affinity: 1 },
        ];
        assert!(batch_records(&mixed, 2).is_err());
    }
}
