//! Frozen-feature tasks: a BiLSTM classifier trained in one language and
//! evaluated in others, a linear language-ID probe, and a 2-D PCA export.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bpe::Tokenizer;
use crate::corpus::{Batch, Document};
use crate::error::{Error, Result};
use crate::model::{Lstm, LanguageModel, Pair};
use crate::numerics::{dropout, Adam, Optimizer, ParamId, ParamStore, RngState, Scalar, SgdMomentum, Tape, Tensor, Var};

/// Universal states of one sentence's pieces, `[time x d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<T> {
    pub features: Tensor<T>,
    pub language: usize,
    pub label: Option<u8>,
}

/// Eval-mode features for one sentence: one row per BPE piece, BOS and EOS
/// excluded.
pub fn extract<T: Scalar>(model: &LanguageModel<T>, tokenizer: &Tokenizer, lang: usize, text: &str) -> Result<FeatureSequence<T>> {
    extract_batch(model, tokenizer, lang, &[text], 1).map(|mut v| v.remove(0))
}

/// [`extract`] over many sentences, batched, in input order.
pub fn extract_batch<T: Scalar>(
    model: &LanguageModel<T>,
    tokenizer: &Tokenizer,
    lang: usize,
    texts: &[&str],
    batch_size: usize,
) -> Result<Vec<FeatureSequence<T>>> {
    if lang >= model.num_languages() {
        return Err(Error::UnknownLanguage(format!("index {lang}")));
    }
    let docs: Vec<Document> = texts.iter().map(|t| Document { language: lang, tokens: tokenizer.encode(t) }).collect();
    if let Some(i) = docs.iter().position(|d| d.tokens.len() < 3) {
        return Err(Error::Empty(format!("sentence {i} has no tokens")));
    }
    let mut out: Vec<Option<FeatureSequence<T>>> = vec![None; docs.len()];
    let idx: Vec<usize> = (0..docs.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let mut order = chunk.to_vec();
        order.sort_by(|&a, &b| docs[b].tokens.len().cmp(&docs[a].tokens.len()));
        let refs: Vec<&Document> = order.iter().map(|&i| &docs[i]).collect();
        let batch = Batch::from_docs(lang, &refs)?;
        let steps = model.latent_batch(&batch)?;
        let dim = steps[0].cols();
        for (r, &i) in order.iter().enumerate() {
            let n = batch.lengths[r] - 2;
            let features = Tensor::from_fn(&[n, dim], |k| steps[1 + k / dim].at(r, k % dim));
            out[i] = Some(FeatureSequence { features, language: lang, label: None });
        }
    }
    Ok(out.into_iter().map(|f| f.expect("every sentence extracted")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { hidden: 32, lr: 0.1, momentum: 0.9, epochs: 400, batch_size: 16, dropout: 0.1, seed: 0 }
    }
}

/// Forward and backward LSTMs, concatenated final states, affine, sigmoid.
#[derive(Clone, Debug)]
pub struct Classifier<T: Scalar> {
    pub store: ParamStore<T>,
    pub fwd: Lstm,
    pub bwd: Lstm,
    pub w: ParamId,
    pub b: ParamId,
    pub language: usize,
    pub config: ClassifierConfig,
    /// Per-dimension shift and scale fitted on the training features.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl<T: Scalar> Classifier<T> {
    fn new(dim: usize, language: usize, config: ClassifierConfig, norm: (Vec<f64>, Vec<f64>), rng: &mut RngState) -> Self {
        let mut store = ParamStore::new();
        let fwd = Lstm::new(&mut store, "cls.fwd", dim, config.hidden, crate::model::INIT_RANGE, rng);
        let bwd = Lstm::new(&mut store, "cls.bwd", dim, config.hidden, crate::model::INIT_RANGE, rng);
        let w = store.add_uniform("cls.w", &[2 * config.hidden, 1], crate::model::INIT_RANGE, rng);
        let b = store.add("cls.b", Tensor::zeros(&[1]), true);
        Classifier { store, fwd, bwd, w, b, language, config, mean: norm.0, scale: norm.1 }
    }

    /// Logits `[rows x 1]` for equal-length sequences.
    fn logits(&self, tape: &mut Tape<T>, group: &[&FeatureSequence<T>], track: bool, rng: Option<&mut RngState>) -> Result<Var> {
        let (len, dim, rows) = (group[0].features.rows(), group[0].features.cols(), group.len());
        let xs: Vec<Var> = (0..len)
            .map(|t| {
                tape.constant(Tensor::from_fn(&[rows, dim], |i| {
                    let k = i % dim;
                    T::lit((group[i / dim].features.at(t, k).as_f64() - self.mean[k]) * self.scale[k])
                }))
            })
            .collect();
        let zero = |tape: &mut Tape<T>, h: usize| -> Pair {
            (tape.constant(Tensor::zeros(&[rows, h])), tape.constant(Tensor::zeros(&[rows, h])))
        };
        let h = self.config.hidden;
        let s = zero(tape, h);
        let (_, f) = self.fwd.run(tape, &self.store, track, &xs, s)?;
        let rev: Vec<Var> = xs.iter().rev().copied().collect();
        let s = zero(tape, h);
        let (_, b) = self.bwd.run(tape, &self.store, track, &rev, s)?;
        let mut joined = tape.concat_cols(&[f.0, b.0])?;
        if let Some(r) = rng {
            joined = dropout(tape, &[joined], self.config.dropout, r, false)?[0];
        }
        let w = tape.leaf(&self.store, self.w, track);
        let bias = tape.leaf(&self.store, self.b, track);
        let z = tape.matmul(joined, w)?;
        tape.add_row(z, bias)
    }

    /// Probability of label 1 for each sequence, in input order.
    pub fn predict(&self, xs: &[FeatureSequence<T>]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; xs.len()];
        for idx in length_groups(xs, 64) {
            let group: Vec<&FeatureSequence<T>> = idx.iter().map(|&i| &xs[i]).collect();
            let mut tape = Tape::new();
            let z = self.logits(&mut tape, &group, false, None)?;
            for (r, &i) in idx.iter().enumerate() {
                out[i] = 1.0 / (1.0 + (-tape.value(z).data()[r].as_f64()).exp());
            }
        }
        Ok(out)
    }

    pub fn error_rate(&self, xs: &[FeatureSequence<T>]) -> Result<f64> {
        if xs.is_empty() {
            return Err(Error::Empty("empty test set".into()));
        }
        let p = self.predict(xs)?;
        let mut wrong = 0;
        for (x, &q) in xs.iter().zip(&p) {
            let label = x.label.ok_or_else(|| Error::Invalid("unlabeled test example".into()))?;
            if u8::from(q >= 0.5) != label {
                wrong += 1;
            }
        }
        Ok(wrong as f64 / xs.len() as f64)
    }
}

/// Indices grouped by sequence length, each group split into chunks.
fn length_groups<T: Scalar>(xs: &[FeatureSequence<T>], chunk: usize) -> Vec<Vec<usize>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, x) in xs.iter().enumerate() {
        by_len.entry(x.features.rows()).or_default().push(i);
    }
    by_len.into_values().flat_map(|v| v.chunks(chunk.max(1)).map(<[usize]>::to_vec).collect::<Vec<_>>()).collect()
}

/// Trains on labeled features of a single language with SGD plus momentum.
/// Inputs are standardized per dimension with training-set statistics.
pub fn train_classifier<T: Scalar>(examples: &[FeatureSequence<T>], config: &ClassifierConfig) -> Result<Classifier<T>> {
    let first = examples.first().ok_or_else(|| Error::Empty("no training examples".into()))?;
    if examples.iter().any(|x| x.language != first.language) {
        return Err(Error::Invalid("training data mixes languages".into()));
    }
    let mut labels = [0usize; 2];
    for x in examples {
        match x.label {
            Some(l @ (0 | 1)) => labels[l as usize] += 1,
            _ => return Err(Error::Invalid("training examples need 0/1 labels".into())),
        }
    }
    if labels[0] == 0 || labels[1] == 0 {
        return Err(Error::Invalid("training data has a single class".into()));
    }
    let mut rng = RngState::with_stream(config.seed, 7);
    let norm = standardizer(examples.iter(), first.features.cols());
    let mut clf = Classifier::new(first.features.cols(), first.language, config.clone(), norm, &mut rng);
    let mut opt = SgdMomentum::new(config.lr, config.momentum);
    for _ in 0..config.epochs {
        let mut groups = length_groups(examples, config.batch_size);
        rng.shuffle(&mut groups);
        for idx in groups {
            let group: Vec<&FeatureSequence<T>> = idx.iter().map(|&i| &examples[i]).collect();
            let y: Vec<T> = group.iter().map(|x| T::lit(f64::from(x.label.unwrap_or(0)))).collect();
            let mut tape = Tape::new();
            let z = clf.logits(&mut tape, &group, true, Some(&mut rng))?;
            let loss = tape.bce_logits(z, &y)?;
            clf.store.zero_grads();
            tape.backward_into(loss, &mut [&mut clf.store])?;
            opt.step(&mut clf.store);
        }
    }
    Ok(clf)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub train_language: String,
    pub errors: BTreeMap<String, f64>,
    /// Largest `error(other) − error(train)`; signed, 0 with no other language.
    pub gap: f64,
}

/// Per-language error rates of a classifier and the generalization gap.
pub fn zero_shot_eval<T: Scalar>(
    classifier: &Classifier<T>,
    train_language: &str,
    test_sets: &[(String, Vec<FeatureSequence<T>>)],
) -> Result<TransferReport> {
    let mut errors = BTreeMap::new();
    for (lang, xs) in test_sets {
        errors.insert(lang.clone(), classifier.error_rate(xs)?);
    }
    let own = *errors.get(train_language).ok_or_else(|| Error::Invalid(format!("no test set for training language {train_language}")))?;
    let gap = errors.iter().filter(|(l, _)| l.as_str() != train_language).map(|(_, &e)| e - own).fold(None, |m: Option<f64>, g| {
        Some(m.map_or(g, |m| m.max(g)))
    });
    Ok(TransferReport { train_language: train_language.to_string(), errors, gap: gap.unwrap_or(0.0) })
}

/// Mean of a sequence's rows (attention pooling with uniform weights).
pub fn mean_pool<T: Scalar>(x: &FeatureSequence<T>) -> Vec<f64> {
    let (n, d) = (x.features.rows(), x.features.cols());
    let mut v = vec![0.0; d];
    for t in 0..n {
        for (k, s) in v.iter_mut().enumerate() {
            *s += x.features.at(t, k).as_f64();
        }
    }
    v.iter_mut().for_each(|s| *s /= n as f64);
    v
}

pub const PROBE_ITERATIONS: usize = 300;

/// Held-out accuracy of a linear classifier predicting the language from
/// attention-pooled features. The attention vector is learned with the
/// classifier; features are standardized per dimension on the training
/// split. Languages are truncated to a common count and every fourth
/// example of each language is held out.
pub fn language_id_probe<T: Scalar>(features: &[Vec<FeatureSequence<T>>], seed: u64) -> Result<f64> {
    let m = features.len();
    if m < 2 {
        return Err(Error::Invalid("probe needs at least 2 languages".into()));
    }
    let n = features.iter().map(Vec::len).min().unwrap_or(0);
    if n < 4 {
        return Err(Error::Empty("probe needs at least 4 examples per language".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (lang, xs) in features.iter().enumerate() {
        for (i, x) in xs.iter().take(n).enumerate() {
            if x.features.rows() == 0 {
                return Err(Error::Empty("feature sequence without rows".into()));
            }
            if i % 4 == 3 { test.push((x, lang)) } else { train.push((x, lang)) }
        }
    }
    let d = train[0].0.features.cols();
    let (mean, scale) = standardizer(train.iter().map(|(x, _)| *x), d);
    let prep = |set: &[(&FeatureSequence<T>, usize)]| -> (Vec<Tensor<f64>>, Vec<usize>, Vec<Option<usize>>) {
        let t_max = set.iter().map(|(x, _)| x.features.rows()).max().unwrap_or(0);
        let steps = (0..t_max)
            .map(|t| {
                Tensor::from_fn(&[set.len(), d], |k| {
                    let (r, j) = (k / d, k % d);
                    let f = &set[r].0.features;
                    if t < f.rows() { (f.at(t, j).as_f64() - mean[j]) * scale[j] } else { 0.0 }
                })
            })
            .collect();
        (steps, set.iter().map(|(x, _)| x.features.rows()).collect(), set.iter().map(|(_, y)| Some(*y)).collect())
    };
    let (xs, lens, ys) = prep(&train);
    let mut rng = RngState::new(seed);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("attn", Tensor::zeros(&[d]), true);
    let w = store.add_uniform("w", &[d, m], 0.01, &mut rng);
    let b = store.add("b", Tensor::zeros(&[m]), true);
    let logits = |tape: &mut Tape<f64>, store: &ParamStore<f64>, xs: &[Tensor<f64>], lens: &[usize]| -> Result<Var> {
        let states: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let av = tape.param(store, a);
        let pooled = tape.attention_pool(&states, av, lens)?;
        let wv = tape.param(store, w);
        let z = tape.matmul(pooled, wv)?;
        let bv = tape.param(store, b);
        tape.add_row(z, bv)
    };
    let mut opt = Adam::new(0.05);
    for _ in 0..PROBE_ITERATIONS {
        let mut tape = Tape::new();
        let z = logits(&mut tape, &store, &xs, &lens)?;
        let loss = tape.softmax_xent(z, &ys)?;
        store.zero_grads();
        tape.backward_into(loss, &mut [&mut store])?;
        opt.step(&mut store);
    }
    if store.iter().any(|(_, p)| !p.value.is_finite()) {
        return Err(Error::NonFinite("probe weights".into()));
    }
    let (xs, lens, ys) = prep(&test);
    let mut tape = Tape::new();
    let z = logits(&mut tape, &store, &xs, &lens)?;
    let z = tape.value(z);
    let correct = (0..ys.len()).filter(|&r| Some(argmax(&z.row(r).to_vec())) == ys[r]).count();
    Ok(correct as f64 / ys.len() as f64)
}

/// Per-dimension mean and inverse standard deviation over every row of
/// every sequence. Constant dimensions get scale 0.
fn standardizer<'a, T: Scalar + 'a>(seqs: impl Iterator<Item = &'a FeatureSequence<T>>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut count = 0.0;
    for x in seqs {
        for t in 0..x.features.rows() {
            for j in 0..d {
                let v = x.features.at(t, j).as_f64();
                sum[j] += v;
                sq[j] += v * v;
            }
            count += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let scale = (0..d)
        .map(|j| {
            let sd = (sq[j] / count - mean[j] * mean[j]).max(0.0).sqrt();
            if sd > 1e-6 * (1.0 + mean[j].abs()) { 1.0 / sd } else { 0.0 }
        })
        .collect();
    (mean, scale)
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

/// First two principal components of the rows of `points`, by power
/// iteration with deflation. Returns one `[x, y]` per point.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::Empty("no points".into()));
    }
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for k in 0..d {
            mean[k] += p[k] / n as f64;
        }
    }
    let c: Vec<Vec<f64>> = points.iter().map(|p| (0..d).map(|k| p[k] - mean[k]).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for p in &c {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += p[i] * p[j] / n as f64;
            }
        }
    }
    let mut comps: Vec<Vec<f64>> = Vec::new();
    for k in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i + k) as f64 * 0.01).collect();
        for _ in 0..500 {
            let mut nv: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i][j] * v[j]).sum()).collect();
            for u in &comps {
                let dot: f64 = nv.iter().zip(u).map(|(a, b)| a * b).sum();
                nv.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            v = nv.iter().map(|x| x / norm).collect();
        }
        comps.push(v);
    }
    Ok(c.iter().map(|p| [0, 1].map(|k: usize| p.iter().zip(&comps[k]).map(|(a, b)| a * b).sum())).collect())
}

/// CSV `lang,dim0,dim1` of the 2-D projection of mean-pooled features.
pub fn pca_csv<T: Scalar>(languages: &[String], features: &[Vec<FeatureSequence<T>>]) -> Result<String> {
    let pooled: Vec<(usize, Vec<f64>)> =
        features.iter().enumerate().flat_map(|(j, xs)| xs.iter().map(move |x| (j, mean_pool(x)))).collect();
    let proj = pca_2d(&pooled.iter().map(|p| p.1.clone()).collect::<Vec<_>>())?;
    let mut s = String::from("lang,dim0,dim1\n");
    for ((j, _), p) in pooled.iter().zip(proj) {
        s.push_str(&format!("{},{},{}\n", languages[*j], p[0], p[1]));
    }
    Ok(s)
}

/// JSON body written by the zero-shot subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamReport {
    pub transfer: Option<TransferReport>,
    pub probe_accuracy: Option<f64>,
}
