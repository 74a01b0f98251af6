//! Documents, single-language batches and truncated-BPTT windows.

use std::fs;
use std::path::Path;

use crate::bpe::{Tokenizer, PAD};
use crate::error::{Error, Result};
use crate::numerics::RngState;

pub const DEFAULT_BUCKET_WIDTH: usize = 16;

/// One line of a corpus: BOS, pieces, EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub language: usize,
    pub tokens: Vec<u32>,
}

/// Rows padded with PAD to a common width and sorted by length, longest
/// first. Every row holds at least one real token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub language: usize,
    pub rows: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn from_docs(language: usize, docs: &[&Document]) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::Empty("batch without documents".into()));
        }
        let mut seqs: Vec<&Vec<u32>> = docs.iter().map(|d| &d.tokens).collect();
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty("document without tokens".into()));
        }
        seqs.sort_by(|a, b| b.len().cmp(&a.len()));
        let width = seqs[0].len();
        let lengths = seqs.iter().map(|s| s.len()).collect();
        let rows = seqs
            .iter()
            .map(|s| {
                let mut r = (*s).clone();
                r.resize(width, PAD);
                r
            })
            .collect();
        Ok(Batch { language, rows, lengths })
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Number of predicted positions (each row contributes `len - 1`).
    pub fn target_count(&self) -> usize {
        self.lengths.iter().map(|l| l.saturating_sub(1)).sum()
    }
}

/// Tokenizes every non-empty line of `path`.
pub fn load(path: &Path, language: usize, tokenizer: &Tokenizer) -> Result<Vec<Document>> {
    let text = fs::read_to_string(path)?;
    let docs = from_lines(text.lines(), language, tokenizer);
    if docs.is_empty() {
        return Err(Error::Empty(format!("corpus {}", path.display())));
    }
    Ok(docs)
}

pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>, language: usize, tokenizer: &Tokenizer) -> Vec<Document> {
    lines
        .into_iter()
        .filter(|l| !l.is_empty())
        .map(|l| Document { language, tokens: tokenizer.encode(l) })
        .collect()
}

/// Buckets each language's documents by length, cuts buckets into batches,
/// shuffles per language and interleaves languages round-robin.
pub fn make_batches(
    docs_per_lang: &[Vec<Document>],
    batch_size: usize,
    bucket_width: usize,
    rng: &mut RngState,
) -> Result<Vec<Batch>> {
    if batch_size == 0 || bucket_width == 0 {
        return Err(Error::Invalid("batch size and bucket width must be positive".into()));
    }
    let mut per_lang: Vec<Vec<Batch>> = Vec::with_capacity(docs_per_lang.len());
    for (slot, docs) in docs_per_lang.iter().enumerate() {
        if docs.is_empty() {
            return Err(Error::Empty(format!("no documents in language slot {slot}")));
        }
        let lang = docs[0].language;
        let mut buckets: std::collections::BTreeMap<usize, Vec<&Document>> = Default::default();
        for d in docs {
            if d.language != lang {
                return Err(Error::Invalid(format!("languages {} and {} mixed in one slot", d.language, lang)));
            }
            buckets.entry(d.tokens.len() / bucket_width).or_default().push(d);
        }
        let mut batches = Vec::new();
        for (_, mut bucket) in buckets {
            rng.shuffle(&mut bucket);
            for chunk in bucket.chunks(batch_size) {
                batches.push(Batch::from_docs(lang, chunk)?);
            }
        }
        rng.shuffle(&mut batches);
        per_lang.push(batches);
    }
    let rounds = per_lang.iter().map(Vec::len).max().unwrap_or(0);
    let mut iters: Vec<_> = per_lang.into_iter().map(Vec::into_iter).collect();
    let mut out = Vec::new();
    for _ in 0..rounds {
        for it in iters.iter_mut() {
            if let Some(b) = it.next() {
                out.push(b);
            }
        }
    }
    Ok(out)
}

/// Truncation length that grows linearly from `start` to `end` over
/// `total_steps` and stays at `end` afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TruncationSchedule {
    pub start: usize,
    pub end: usize,
    pub total_steps: u64,
}

impl Default for TruncationSchedule {
    fn default() -> Self {
        TruncationSchedule { start: 15, end: 50, total_steps: 10_000 }
    }
}

impl TruncationSchedule {
    pub fn at(&self, step: u64) -> usize {
        if self.total_steps == 0 || step >= self.total_steps {
            return self.end.max(1);
        }
        let span = self.end as i128 - self.start as i128;
        let v = self.start as i128 + (span * step as i128).div_euclid(self.total_steps as i128);
        v.max(1) as usize
    }
}

/// Inputs and next-token targets for one truncation window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    /// `[rows][len]` input ids, PAD past a row's end.
    pub inputs: Vec<Vec<u32>>,
    /// `[rows][len]` targets; `None` where the row has ended.
    pub targets: Vec<Vec<Option<u32>>>,
    /// Number of real targets per row in this window.
    pub valid: Vec<usize>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits the prediction positions of `batch` into consecutive windows of
/// the scheduled length. The last window may be shorter.
pub fn bptt_slices(batch: &Batch, step: u64, schedule: &TruncationSchedule) -> Vec<Window> {
    let positions = batch.width().saturating_sub(1);
    let w = schedule.at(step);
    let mut out = Vec::new();
    let mut start = 0;
    while start < positions {
        let end = (start + w).min(positions);
        let mut inputs = Vec::with_capacity(batch.size());
        let mut targets = Vec::with_capacity(batch.size());
        let mut valid = Vec::with_capacity(batch.size());
        for (row, &len) in batch.rows.iter().zip(&batch.lengths) {
            let preds = len.saturating_sub(1);
            inputs.push(row[start..end].iter().enumerate().map(|(i, &t)| if start + i < preds { t } else { PAD }).collect());
            targets.push((start..end).map(|p| (p < preds).then(|| row[p + 1])).collect());
            valid.push(preds.clamp(start, end) - start);
        }
        out.push(Window { inputs, targets, valid });
        start = end;
    }
    out
}
