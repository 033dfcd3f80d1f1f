//! Synthetic grid-VQA task: a `G x G` grid of colour tokens followed by a
//! separator and a query naming one cell; the answer is that cell's colour.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InterventionSpec, Model, TokenSequence, argmax};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub grid_side: usize,
    pub n_colors: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            grid_side: 4,
            n_colors: 8,
            n_train: 5000,
            n_eval: 1000,
            seed: 1234,
        }
    }
}

/// Token-id layout: colours first, then one position token per cell, then
/// the separator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub n_colors: usize,
    pub n_cells: usize,
}

impl Vocab {
    pub fn color(&self, c: usize) -> usize {
        c
    }

    pub fn position(&self, cell: usize) -> usize {
        self.n_colors + cell
    }

    pub fn separator(&self) -> usize {
        self.n_colors + self.n_cells
    }

    /// Number of token ids the task uses.
    pub fn size(&self) -> usize {
        self.n_colors + self.n_cells + 1
    }

    /// Sequence length: image, separator, query.
    pub fn seq_len(&self) -> usize {
        self.n_cells + 2
    }

    pub fn sequence(&self, sample: &SyntheticSample) -> Result<TokenSequence> {
        let mut tokens = sample.image_tokens.clone();
        tokens.push(self.separator());
        tokens.push(sample.query);
        TokenSequence::new(tokens, 0..sample.image_tokens.len())
    }
}

impl TaskSpec {
    pub fn n_cells(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_colors: self.n_colors,
            n_cells: self.n_cells(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_side < 2 {
            return Err(Error::usage("task.grid_side must be >= 2"));
        }
        if self.n_colors < 2 {
            return Err(Error::usage("task.n_colors must be >= 2"));
        }
        Ok(())
    }

    /// Checks that a model with this vocabulary and context can hold the task.
    pub fn check_fits(&self, vocab_size: usize, max_seq_len: usize) -> Result<()> {
        let v = self.vocab();
        if v.size() > vocab_size {
            return Err(Error::usage(format!(
                "task needs {} token ids ({} colours + {} positions + separator) but vocab_size is {vocab_size}",
                v.size(),
                self.n_colors,
                self.n_cells()
            )));
        }
        if v.seq_len() > max_seq_len {
            return Err(Error::usage(format!(
                "task sequences have {} tokens but max_seq_len is {max_seq_len}",
                v.seq_len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSample {
    /// Row-major colour tokens, one per cell.
    pub image_tokens: Vec<usize>,
    /// Position token naming the queried cell.
    pub query: usize,
    pub answer: usize,
    /// True only at the queried cell.
    pub relevance: Vec<bool>,
}

impl SyntheticSample {
    pub fn query_cell(&self) -> usize {
        self.relevance
            .iter()
            .position(|&r| r)
            .expect("sample has one relevant cell")
    }
}

fn draw(spec: &TaskSpec, rng: &mut ChaCha8Rng, n: usize) -> Vec<SyntheticSample> {
    let vocab = spec.vocab();
    let d = spec.n_cells();
    (0..n)
        .map(|_| {
            let image_tokens: Vec<usize> = (0..d)
                .map(|_| vocab.color(rng.gen_range(0..spec.n_colors)))
                .collect();
            let cell = rng.gen_range(0..d);
            let mut relevance = vec![false; d];
            relevance[cell] = true;
            SyntheticSample {
                answer: image_tokens[cell],
                image_tokens,
                query: vocab.position(cell),
                relevance,
            }
        })
        .collect()
}

/// Generates `(train, eval)`. The two splits come from separate ChaCha streams
/// of the same seed, so changing `n_train` never perturbs the eval set.
pub fn generate_dataset(
    spec: &TaskSpec,
    vocab_size: usize,
) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    spec.validate()?;
    if spec.vocab().size() > vocab_size {
        return Err(Error::usage(format!(
            "task needs {} token ids but vocab_size is {vocab_size}",
            spec.vocab().size()
        )));
    }
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    train_rng.set_stream(0);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    eval_rng.set_stream(1);
    Ok((
        draw(spec, &mut train_rng, spec.n_train),
        draw(spec, &mut eval_rng, spec.n_eval),
    ))
}

/// Fraction of samples for which `predict` returns the answer token.
pub fn accuracy_of<F>(samples: &[SyntheticSample], mut predict: F) -> Result<f64>
where
    F: FnMut(&SyntheticSample) -> Result<usize>,
{
    if samples.is_empty() {
        return Err(Error::usage("accuracy over an empty sample list"));
    }
    let mut hits = 0usize;
    for s in samples {
        if predict(s)? == s.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Model accuracy with `interventions` applied to every forward.
pub fn accuracy(
    model: &Model,
    vocab: &Vocab,
    samples: &[SyntheticSample],
    interventions: &[InterventionSpec],
) -> Result<f64> {
    accuracy_of(samples, |s| {
        let seq = vocab.sequence(s)?;
        Ok(argmax(&model.forward(&seq, interventions, false)?.logits))
    })
}

/// Share of attention mass that falls on relevant cells.
pub fn localization_score(ia: &[f64], relevance: &[bool]) -> Result<f64> {
    if ia.len() != relevance.len() {
        return Err(Error::usage(format!(
            "localization length mismatch: {} scores vs {} cells",
            ia.len(),
            relevance.len()
        )));
    }
    if ia.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::usage("localization scores must be finite and >= 0"));
    }
    let total: f64 = ia.iter().sum();
    if total <= 0.0 {
        return Err(Error::degenerate("attention vector has zero mass"));
    }
    let hit: f64 = ia
        .iter()
        .zip(relevance)
        .filter(|(_, &r)| r)
        .map(|(v, _)| v)
        .sum();
    Ok(hit / total)
}

/// Writes one JSON object per line.
pub fn write_dataset(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s).expect("sample serializes");
        buf.push(b'\n');
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<SyntheticSample>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SyntheticSample = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        check_sample(&s).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(s);
    }
    Ok(out)
}

fn check_sample(s: &SyntheticSample) -> Result<()> {
    if s.relevance.len() != s.image_tokens.len() {
        return Err(Error::usage("relevance length differs from image length"));
    }
    if s.relevance.iter().filter(|&&r| r).count() != 1 {
        return Err(Error::usage("relevance must mark exactly one cell"));
    }
    if s.image_tokens[s.query_cell()] != s.answer {
        return Err(Error::usage("answer is not the colour of the queried cell"));
    }
    Ok(())
}
