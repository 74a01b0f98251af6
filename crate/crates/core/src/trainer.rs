//! Joint training: summed per-language NLL plus `λ/m²` times the summed
//! off-diagonal critic estimates, with several critic updates before every
//! LM update. Also checkpoints, metrics and the λ / language-count sweeps.
//!
//! Randomness is split into independent streams of the run seed: model
//! init, critic init, LM batches and dropout, critic batches and dropout.
//! The critic never draws from the LM stream, so with `λ = 0` the LM
//! trajectory does not depend on whether a critic exists.

use std::collections::VecDeque;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bpe::{self, MergeTable, Tokenizer, Vocab};
use crate::corpus::{self, bptt_slices, make_batches, Batch, Document, TruncationSchedule, Window};
use crate::critic::{Critic, Sequences, WassersteinEstimate};
use crate::error::{Error, Result};
use crate::model::{LanguageModel, ModelConfig};
use crate::numerics::{Adam, Optimizer, RmsProp, RngSnapshot, RngState, Scalar, Tape, Tensor, Var};
use crate::synthlang::SynthGrammar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub critic_steps: usize,
    pub clip: f64,
    pub lm_lr: f64,
    pub critic_lr: f64,
    pub steps: u64,
    pub truncation: TruncationSchedule,
    pub batch_size: usize,
    pub bucket_width: usize,
    pub seed: u64,
    pub preset: String,
    pub d: usize,
    pub hidden: usize,
    pub f: usize,
    pub universal_depth: usize,
    pub dropout: f64,
    pub init_range: f64,
    pub eval_every: u64,
    /// Held-out sequences per language fed to the critic when logging.
    pub eval_samples: usize,
    /// `false` trains the language model alone.
    pub use_critic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            lambda: 0.1,
            critic_steps: 10,
            clip: crate::critic::DEFAULT_CLIP,
            lm_lr: 1e-3,
            critic_lr: crate::critic::DEFAULT_LR,
            steps: 5000,
            truncation: TruncationSchedule { start: 15, end: 50, total_steps: 5000 },
            batch_size: 32,
            bucket_width: corpus::DEFAULT_BUCKET_WIDTH,
            seed: 0,
            preset: "desk".into(),
            d: 64,
            hidden: 64,
            f: 32,
            universal_depth: 2,
            dropout: 0.1,
            init_range: crate::model::INIT_RANGE,
            eval_every: 500,
            eval_samples: 256,
            use_critic: true,
        }
    }

    pub fn paper() -> Self {
        TrainConfig { preset: "paper".into(), d: 300, hidden: 512, ..Self::desk() }
    }

    /// Sets `steps` and stretches the truncation schedule to match.
    pub fn with_steps(mut self, steps: u64) -> Self {
        self.steps = steps;
        self.truncation.total_steps = steps;
        self
    }

    pub fn validate(&self, languages: usize) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be a non-negative number, got {}", self.lambda)));
        }
        if self.lambda > 0.0 && languages < 2 {
            return Err(Error::Config("constraint requires ≥2 languages".into()));
        }
        if self.lambda > 0.0 && !self.use_critic {
            return Err(Error::Config("lambda > 0 needs the critic".into()));
        }
        if self.critic_steps == 0 {
            return Err(Error::Config("critic_steps must be at least 1".into()));
        }
        if !(self.clip > 0.0) || !(self.lm_lr > 0.0) || !(self.critic_lr > 0.0) {
            return Err(Error::Config("clip and learning rates must be positive".into()));
        }
        if self.steps == 0 || self.batch_size == 0 || self.bucket_width == 0 || self.eval_every == 0 || self.eval_samples == 0 {
            return Err(Error::Config("steps, batch size, bucket width and eval settings must be positive".into()));
        }
        if self.truncation.start == 0 || self.truncation.end == 0 {
            return Err(Error::Config("truncation lengths must be positive".into()));
        }
        if self.use_critic && languages < 2 {
            return Err(Error::Config("the critic needs at least 2 languages".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, languages: Vec<String>, vocab_sizes: Vec<usize>) -> ModelConfig {
        ModelConfig {
            languages,
            vocab_sizes,
            d: self.d,
            hidden: self.hidden,
            f: self.f,
            universal_depth: self.universal_depth,
            dropout: self.dropout,
            init_range: self.init_range,
        }
    }
}

/// Tokenized corpora for every language of a run.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub languages: Vec<String>,
    pub tokenizers: Vec<Tokenizer>,
    pub train: Vec<Vec<Document>>,
    pub heldout: Vec<Vec<Document>>,
}

impl TrainData {
    pub fn new(languages: Vec<String>, tokenizers: Vec<Tokenizer>, train: &[Vec<String>], heldout: &[Vec<String>]) -> Result<Self> {
        let m = languages.len();
        if tokenizers.len() != m || train.len() != m || heldout.len() != m {
            return Err(Error::Invalid("need tokenizer, train and held-out text for every language".into()));
        }
        let docs = |sets: &[Vec<String>]| -> Result<Vec<Vec<Document>>> {
            sets.iter()
                .enumerate()
                .map(|(j, lines)| {
                    let d = corpus::from_lines(lines.iter().map(String::as_str), j, &tokenizers[j]);
                    if d.is_empty() {
                        return Err(Error::Empty(format!("no documents for language {}", languages[j])));
                    }
                    Ok(d)
                })
                .collect()
        };
        let (train, heldout) = (docs(train)?, docs(heldout)?);
        Ok(TrainData { languages, tokenizers, train, heldout })
    }

    /// Non-parallel synthetic corpora (a separate stream per language and
    /// split) with a BPE vocabulary of at most `vocab_size` per language.
    pub fn synthetic(
        grammar: &SynthGrammar,
        languages: &[String],
        n_train: usize,
        n_heldout: usize,
        vocab_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut tokenizers = Vec::new();
        let mut train = Vec::new();
        let mut heldout = Vec::new();
        for lang in languages {
            let lang_no = grammar.languages.iter().position(|l| &l.name == lang).ok_or_else(|| Error::UnknownLanguage(lang.clone()))?;
            let tr = grammar.generate_corpus(lang, n_train, &mut RngState::with_stream(seed, 1000 + lang_no as u64))?;
            let ho = grammar.generate_corpus(lang, n_heldout, &mut RngState::with_stream(seed, 2000 + lang_no as u64))?;
            let (merges, vocab) = bpe::learn(tr.iter().map(String::as_str), vocab_size, lang)?;
            tokenizers.push(Tokenizer::new(vocab, merges)?);
            train.push(tr);
            heldout.push(ho);
        }
        Self::new(languages.to_vec(), tokenizers, &train, &heldout)
    }

    /// The named languages, re-indexed in the given order.
    pub fn subset(&self, names: &[String]) -> Result<Self> {
        let mut out = TrainData { languages: Vec::new(), tokenizers: Vec::new(), train: Vec::new(), heldout: Vec::new() };
        for (j, name) in names.iter().enumerate() {
            let i = self.languages.iter().position(|l| l == name).ok_or_else(|| Error::UnknownLanguage(name.clone()))?;
            let relabel = |docs: &Vec<Document>| docs.iter().map(|d| Document { language: j, tokens: d.tokens.clone() }).collect();
            out.languages.push(name.clone());
            out.tokenizers.push(self.tokenizers[i].clone());
            out.train.push(relabel(&self.train[i]));
            out.heldout.push(relabel(&self.heldout[i]));
        }
        Ok(out)
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.tokenizers.iter().map(Tokenizer::vocab_size).collect()
    }

    pub fn assets(&self) -> Vec<LanguageAssets> {
        self.languages
            .iter()
            .zip(&self.tokenizers)
            .map(|(name, t)| LanguageAssets {
                name: name.clone(),
                vocab: t.vocab().to_file_string(),
                merges: t.merges().to_file_string(),
            })
            .collect()
    }
}

/// Per-language batch streams that reshuffle a language when it runs dry.
#[derive(Clone, Debug)]
struct BatchQueue {
    pending: Vec<VecDeque<Batch>>,
}

impl BatchQueue {
    fn new(m: usize) -> Self {
        BatchQueue { pending: vec![VecDeque::new(); m] }
    }

    fn next(&mut self, docs: &[Vec<Document>], lang: usize, cfg: &TrainConfig, rng: &mut RngState) -> Result<Batch> {
        if self.pending[lang].is_empty() {
            self.pending[lang] = make_batches(std::slice::from_ref(&docs[lang]), cfg.batch_size, cfg.bucket_width, rng)?.into();
        }
        self.pending[lang].pop_front().ok_or_else(|| Error::Empty("no batches".into()))
    }
}

pub struct LossParts<T: Scalar> {
    pub loss: Var,
    /// Mean NLL per language.
    pub nll: Vec<f64>,
    pub tokens: Vec<usize>,
    /// In-batch estimate when the penalty was computed.
    pub estimate: Option<WassersteinEstimate>,
    pub penalty: Option<Var>,
    _marker: std::marker::PhantomData<T>,
}

/// `Σ_j NLL_j + (λ/m²) Σ_{α≠β} W_αβ` on one batch per language (in language
/// order). The penalty uses the batches' own universal states and a frozen,
/// eval-mode critic; with `λ = 0` it is not built at all.
pub fn total_loss<T: Scalar>(
    model: &LanguageModel<T>,
    critic: Option<&Critic<T>>,
    tape: &mut Tape<T>,
    batches: &[Batch],
    windows: &[Vec<Window>],
    lambda: f64,
    mut rng: Option<&mut RngState>,
) -> Result<LossParts<T>> {
    let m = model.num_languages();
    if batches.len() != m || windows.len() != m {
        return Err(Error::Invalid(format!("need one batch per language ({m}), got {}", batches.len())));
    }
    let mut loss: Option<Var> = None;
    let mut nll = Vec::with_capacity(m);
    let mut tokens = Vec::with_capacity(m);
    let mut samples = Vec::with_capacity(m);
    for (j, (b, ws)) in batches.iter().zip(windows).enumerate() {
        if b.language != j {
            return Err(Error::Invalid(format!("batch {j} belongs to language {}", b.language)));
        }
        let f = model.forward_batch(tape, b, ws, true, rng.as_deref_mut())?;
        nll.push(tape.value(f.nll).item().as_f64());
        tokens.push(f.tokens);
        loss = Some(match loss {
            None => f.nll,
            Some(l) => tape.add(l, f.nll)?,
        });
        samples.push((f.latents, b.lengths.iter().map(|l| l - 1).collect::<Vec<_>>()));
    }
    let mut loss = loss.ok_or_else(|| Error::Empty("no languages".into()))?;
    let (mut estimate, mut penalty) = (None, None);
    if lambda > 0.0 {
        let critic = critic.ok_or_else(|| Error::Config("lambda > 0 needs a critic".into()))?;
        let (sum, est) = critic.penalty(tape, &samples)?;
        let scaled = tape.scale(sum, T::lit(lambda / (m * m) as f64));
        loss = tape.add(loss, scaled)?;
        estimate = Some(est);
        penalty = Some(scaled);
    }
    Ok(LossParts { loss, nll, tokens, estimate, penalty, _marker: std::marker::PhantomData })
}

/// One line of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lang: String,
    pub ppl_train: f64,
    pub ppl_heldout: f64,
    pub heldout_nll: f64,
    /// Mean off-diagonal held-out estimate; NaN without a critic.
    pub w_estimate: f64,
    pub lambda: f64,
}

pub const METRICS_HEADER: &str = "step,lang,ppl_train,ppl_heldout,w_estimate,lambda";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.step, r.lang, r.ppl_train, r.ppl_heldout, r.w_estimate, r.lambda));
    }
    s
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    Ok(fs::write(path, metrics_csv(rows))?)
}

/// What one `train_step` did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub nll: Vec<f64>,
    pub critic_objective: Option<f64>,
    pub estimate: Option<WassersteinEstimate>,
}

pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub model: LanguageModel<T>,
    pub critic: Option<Critic<T>>,
    pub data: TrainData,
    pub lm_rng: RngState,
    pub critic_rng: RngState,
    pub step: u64,
    pub lm_updates: u64,
    pub critic_updates: u64,
    lm_opt: Adam<T>,
    critic_opt: RmsProp<T>,
    lm_queue: BatchQueue,
    critic_queue: BatchQueue,
    train_acc: Vec<(f64, usize)>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, data: TrainData) -> Result<Self> {
        let m = data.languages.len();
        config.validate(m)?;
        let mcfg = config.model_config(data.languages.clone(), data.vocab_sizes());
        let model = LanguageModel::new(mcfg, &mut RngState::with_stream(config.seed, 1))?;
        let critic = if config.use_critic {
            Some(Critic::new(config.hidden, m, config.clip, &mut RngState::with_stream(config.seed, 2))?)
        } else {
            None
        };
        Ok(Trainer {
            lm_rng: RngState::with_stream(config.seed, 3),
            critic_rng: RngState::with_stream(config.seed, 4),
            lm_opt: Adam::new(config.lm_lr),
            critic_opt: RmsProp::new(config.critic_lr),
            lm_queue: BatchQueue::new(m),
            critic_queue: BatchQueue::new(m),
            train_acc: vec![(0.0, 0); m],
            step: 0,
            lm_updates: 0,
            critic_updates: 0,
            config,
            model,
            critic,
            data,
        })
    }

    pub fn num_languages(&self) -> usize {
        self.data.languages.len()
    }

    /// Fresh per-language universal states for the critic, from the critic's
    /// own batch stream with LM parameters held constant.
    fn critic_samples(&mut self) -> Result<Vec<Sequences<T>>> {
        let mut out = Vec::with_capacity(self.num_languages());
        for j in 0..self.num_languages() {
            let b = self.critic_queue.next(&self.data.train, j, &self.config, &mut self.critic_rng)?;
            let mut tape = Tape::new();
            let zs = self.model.latent_steps(&mut tape, &b, false, Some(&mut self.critic_rng))?;
            let steps = zs.iter().map(|&v| tape.value(v).clone()).collect();
            out.push(Sequences::new(steps, b.lengths.iter().map(|l| l - 1).collect())?);
        }
        Ok(out)
    }

    /// `critic_steps` critic updates with the LM frozen, then one LM update
    /// with the critic frozen.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let mut critic_objective = None;
        if self.critic.is_some() {
            for _ in 0..self.config.critic_steps {
                let samples = self.critic_samples()?;
                let critic = self.critic.as_mut().expect("critic present");
                let obj = critic.critic_update(&samples, &mut self.critic_opt).map_err(|e| self.diverged(e))?;
                critic_objective = Some(obj);
                self.critic_updates += 1;
            }
        }
        let m = self.num_languages();
        let mut batches = Vec::with_capacity(m);
        for j in 0..m {
            batches.push(self.lm_queue.next(&self.data.train, j, &self.config, &mut self.lm_rng)?);
        }
        let windows: Vec<Vec<Window>> = batches.iter().map(|b| bptt_slices(b, self.step, &self.config.truncation)).collect();
        let mut tape = Tape::new();
        let parts = total_loss(
            &self.model,
            self.critic.as_ref(),
            &mut tape,
            &batches,
            &windows,
            self.config.lambda,
            Some(&mut self.lm_rng),
        )?;
        let value = tape.value(parts.loss).item().as_f64();
        if !value.is_finite() {
            return Err(self.diverged(Error::NonFinite(format!("loss {value}"))));
        }
        self.model.store.zero_grads();
        tape.backward_into(parts.loss, &mut [&mut self.model.store]).map_err(|e| self.diverged(e))?;
        self.lm_opt.step(&mut self.model.store);
        if !self.model.store.iter().all(|(_, p)| p.value.is_finite()) {
            return Err(self.diverged(Error::NonFinite("parameters".into())));
        }
        for (j, (&n, &t)) in parts.nll.iter().zip(&parts.tokens).enumerate() {
            self.train_acc[j].0 += n * t as f64;
            self.train_acc[j].1 += t;
        }
        self.step += 1;
        self.lm_updates += 1;
        Ok(StepReport { step: self.step, nll: parts.nll, critic_objective, estimate: parts.estimate })
    }

    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::NonFinite(detail) => Error::Divergence { step: self.step, detail },
            other => other,
        }
    }

    /// Token-weighted held-out NLL per language, eval mode.
    pub fn heldout_nll(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_languages());
        for docs in &self.data.heldout {
            let (mut sum, mut n) = (0.0, 0usize);
            for b in eval_batches(docs, self.config.batch_size)? {
                let t = b.target_count();
                sum += self.model.lm_nll(&b)? * t as f64;
                n += t;
            }
            out.push(sum / n as f64);
        }
        Ok(out)
    }

    /// Eval-mode universal states of up to `limit` held-out documents per
    /// language.
    pub fn heldout_latents(&self, limit: usize) -> Result<Vec<Sequences<T>>> {
        self.data.heldout.iter().map(|docs| latent_sequences(&self.model, &docs[..docs.len().min(limit)], self.config.batch_size)).collect()
    }

    pub fn heldout_estimate(&self) -> Result<Option<WassersteinEstimate>> {
        match &self.critic {
            None => Ok(None),
            Some(c) => Ok(Some(c.wasserstein_estimate(&self.heldout_latents(self.config.eval_samples)?)?)),
        }
    }

    /// Metrics rows for the current step; resets the train-perplexity window.
    pub fn evaluate(&mut self) -> Result<Vec<MetricsRow>> {
        let ho = self.heldout_nll()?;
        let w = self.heldout_estimate()?.map_or(f64::NAN, |e| e.off_diagonal_mean());
        let rows = (0..self.num_languages())
            .map(|j| {
                let (s, n) = self.train_acc[j];
                MetricsRow {
                    step: self.step,
                    lang: self.data.languages[j].clone(),
                    ppl_train: if n > 0 { (s / n as f64).exp() } else { f64::NAN },
                    ppl_heldout: ho[j].exp(),
                    heldout_nll: ho[j],
                    w_estimate: w,
                    lambda: self.config.lambda,
                }
            })
            .collect();
        self.train_acc.iter_mut().for_each(|a| *a = (0.0, 0));
        Ok(rows)
    }

    /// Trains to `config.steps`, evaluating every `eval_every` steps and at
    /// the end.
    pub fn run(&mut self, mut on_eval: impl FnMut(&[MetricsRow])) -> Result<Vec<MetricsRow>> {
        let mut all = Vec::new();
        while self.step < self.config.steps {
            self.train_step()?;
            if self.step % self.config.eval_every == 0 || self.step == self.config.steps {
                let rows = self.evaluate()?;
                on_eval(&rows);
                all.extend(rows);
            }
        }
        Ok(all)
    }

    pub fn checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut blocks: Vec<Block> = self.model.store.iter().map(|(_, p)| Block::from_tensor(&p.name, &p.value)).collect();
        if let Some(c) = &self.critic {
            blocks.extend(c.store.iter().map(|(_, p)| Block::from_tensor(&p.name, &p.value)));
            blocks.push(Block::from_slice(RUNNING_MEAN, &c.running_mean));
            blocks.push(Block::from_slice(RUNNING_VAR, &c.running_var));
        }
        Checkpoint {
            meta: CheckpointMeta {
                train: self.config.clone(),
                model: self.model.config.clone(),
                step: self.step,
                lm_updates: self.lm_updates,
                critic_updates: self.critic_updates,
                lm_rng: self.lm_rng.snapshot(),
                critic_rng: self.critic_rng.snapshot(),
                languages: self.data.assets(),
                extra,
            },
            blocks,
        }
    }
}

/// Deterministic batches in corpus order.
pub fn eval_batches(docs: &[Document], batch_size: usize) -> Result<Vec<Batch>> {
    docs.chunks(batch_size.max(1))
        .map(|c| {
            let refs: Vec<&Document> = c.iter().collect();
            Batch::from_docs(c[0].language, &refs)
        })
        .collect()
}

/// Eval-mode universal states of `docs`, one row per document.
pub fn latent_sequences<T: Scalar>(model: &LanguageModel<T>, docs: &[Document], batch_size: usize) -> Result<Sequences<T>> {
    let mut seqs = Vec::with_capacity(docs.len());
    for b in eval_batches(docs, batch_size)? {
        let steps = model.latent_batch(&b)?;
        let dim = steps[0].cols();
        for (r, &len) in b.lengths.iter().enumerate() {
            let n = len - 1;
            seqs.push(Tensor::from_fn(&[n, dim], |i| steps[i / dim].at(r, i % dim)));
        }
    }
    Sequences::from_sequences(&seqs)
}

pub const MAGIC: &[u8; 8] = b"UGWGANCK";
pub const VERSION: u32 = 1;
const RUNNING_MEAN: &str = "critic.bn.running_mean";
const RUNNING_VAR: &str = "critic.bn.running_var";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageAssets {
    pub name: String,
    pub vocab: String,
    pub merges: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub step: u64,
    pub lm_updates: u64,
    pub critic_updates: u64,
    pub lm_rng: RngSnapshot,
    pub critic_rng: RngSnapshot,
    pub languages: Vec<LanguageAssets>,
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Block {
    fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        Block { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().iter().map(|x| x.as_f64() as f32).collect() }
    }

    fn from_slice<T: Scalar>(name: &str, v: &[T]) -> Self {
        Block { name: name.to_string(), shape: vec![v.len()], data: v.iter().map(|x| x.as_f64() as f32).collect() }
    }

    fn tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&x| T::lit(x as f64)).collect())
    }
}

/// Container layout, all integers little-endian:
/// magic (8 bytes), version (u32), metadata length (u64), metadata JSON,
/// block count (u32), then per block name length (u32), name, rank (u32),
/// dims (u64 each), values (f32 each); finally SHA-256 of all prior bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub blocks: Vec<Block>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &b.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        if bytes.len() >= 12 {
            let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
            if version != VERSION {
                return Err(Error::Checkpoint(format!("version {version} not supported (expected {VERSION})")));
            }
        }
        if bytes.len() < 12 + 32 || Sha256::digest(&bytes[..bytes.len() - 32]).as_slice() != &bytes[bytes.len() - 32..] {
            return Err(Error::Checkpoint("checksum mismatch (truncated or corrupt)".into()));
        }
        let mut r = Reader { buf: &bytes[..bytes.len() - 32], pos: 12 };
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let n = r.u32()?;
        let mut blocks = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            blocks.push(Block { name, shape, data });
        }
        if r.pos != r.buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { meta, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn block(&self, name: &str) -> Result<&Block> {
        self.blocks.iter().find(|b| b.name == name).ok_or_else(|| Error::Checkpoint(format!("missing block {name}")))
    }

    pub fn model<T: Scalar>(&self) -> Result<LanguageModel<T>> {
        let mut model = LanguageModel::new(self.meta.model.clone(), &mut RngState::new(0))?;
        let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            model.store.set_value(&name, self.block(&name)?.tensor()?)?;
        }
        Ok(model)
    }

    pub fn critic<T: Scalar>(&self) -> Result<Option<Critic<T>>> {
        if !self.blocks.iter().any(|b| b.name.starts_with("critic.")) {
            return Ok(None);
        }
        let m = self.meta.model.languages.len();
        let mut c = Critic::new(self.meta.model.hidden, m, self.meta.train.clip, &mut RngState::new(0))?;
        let names: Vec<String> = c.store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            c.store.set_value(&name, self.block(&name)?.tensor()?)?;
        }
        c.running_mean = self.block(RUNNING_MEAN)?.tensor::<T>()?.into_data();
        c.running_var = self.block(RUNNING_VAR)?.tensor::<T>()?.into_data();
        c.updates = self.meta.critic_updates;
        Ok(Some(c))
    }

    pub fn tokenizers(&self) -> Result<Vec<Tokenizer>> {
        self.meta
            .languages
            .iter()
            .map(|a| Tokenizer::new(Vocab::parse(&a.vocab)?, MergeTable::parse(&a.name, &a.merges)?))
            .collect()
    }

    pub fn language_index(&self, name: &str) -> Result<usize> {
        self.meta.model.language_index(name)
    }
}

/// Final metrics of one run in a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub lambda: f64,
    pub languages: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

impl RunResult {
    /// Mean held-out perplexity over languages at the last evaluation.
    pub fn final_ppl(&self) -> f64 {
        let last = self.rows.last().map_or(0, |r| r.step);
        let fin: Vec<f64> = self.rows.iter().filter(|r| r.step == last).map(|r| r.ppl_heldout).collect();
        fin.iter().sum::<f64>() / fin.len().max(1) as f64
    }
}

/// Full training per λ with identical seeds and data.
pub fn ablate_lambda(grid: &[f64], config: &TrainConfig, data: &TrainData) -> Result<Vec<RunResult>> {
    if grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    grid.iter()
        .map(|&lambda| {
            let mut t = Trainer::<f32>::new(TrainConfig { lambda, ..config.clone() }, data.clone())?;
            let rows = t.run(|_| {})?;
            Ok(RunResult { lambda, languages: data.languages.clone(), rows })
        })
        .collect()
}

pub const DEFAULT_GRID: [f64; 4] = [0.0, 0.1, 1.0, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub runs: Vec<RunResult>,
    /// `(language count, ppl(λ_last) − ppl(λ_first))` per set.
    pub gaps: Vec<(usize, f64)>,
}

/// Trains every (set, λ) pair; sets must be nested, each extending the
/// previous one.
pub fn scaling_experiment(sets: &[Vec<String>], lambdas: &[f64], config: &TrainConfig, data: &TrainData) -> Result<ScalingReport> {
    if sets.is_empty() || lambdas.len() < 2 {
        return Err(Error::Config("need at least one language set and two lambdas".into()));
    }
    for w in sets.windows(2) {
        if w[1].len() <= w[0].len() || w[1][..w[0].len()] != w[0][..] {
            return Err(Error::Config("language sets must be nested".into()));
        }
    }
    let mut runs = Vec::new();
    let mut gaps = Vec::new();
    for set in sets {
        let sub = data.subset(set)?;
        let mut ppl = Vec::new();
        for &lambda in lambdas {
            let mut t = Trainer::<f32>::new(TrainConfig { lambda, ..config.clone() }, sub.clone())?;
            let rows = t.run(|_| {})?;
            let r = RunResult { lambda, languages: set.clone(), rows };
            ppl.push(r.final_ppl());
            runs.push(r);
        }
        gaps.push((set.len(), ppl[ppl.len() - 1] - ppl[0]));
    }
    Ok(ScalingReport { runs, gaps })
}
