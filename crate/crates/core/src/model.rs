//! The factorized multilingual language model.
//!
//! `p_j(w) = e_j⁻¹(h(u(e_j(w)), k_j))`: a per-language embedding + LSTM
//! encoder, a shared stacked-LSTM universal encoder `u`, a shared decoder LSTM
//! `h` fed the language vector `k_j` at every step, and a per-language output
//! LSTM whose states are multiplied by the transposed embedding table.

use serde::{Deserialize, Serialize};

use crate::bpe::{BOS, EOS};
use crate::corpus::{bptt_slices, Batch, TruncationSchedule, Window};
use crate::error::{Error, Result};
use crate::numerics::{dropout, ParamId, ParamStore, RngState, Scalar, Tape, Tensor, Var};

pub const INIT_RANGE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub languages: Vec<String>,
    pub vocab_sizes: Vec<usize>,
    /// Embedding size; also the output LSTM's hidden size because of tying.
    pub d: usize,
    /// Hidden size of the encoder, universal and decoder LSTMs.
    pub hidden: usize,
    /// Language-embedding size.
    pub f: usize,
    pub universal_depth: usize,
    pub dropout: f64,
    /// Half-width of the uniform initialization.
    pub init_range: f64,
}

impl ModelConfig {
    pub fn desk(languages: Vec<String>, vocab_sizes: Vec<usize>) -> Self {
        ModelConfig { languages, vocab_sizes, d: 64, hidden: 64, f: 32, universal_depth: 2, dropout: 0.1, init_range: INIT_RANGE }
    }

    pub fn paper(languages: Vec<String>, vocab_sizes: Vec<usize>) -> Self {
        ModelConfig { languages, vocab_sizes, d: 300, hidden: 512, f: 32, universal_depth: 2, dropout: 0.1, init_range: INIT_RANGE }
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() || self.languages.len() != self.vocab_sizes.len() {
            return Err(Error::Config("need one vocab size per language and at least one language".into()));
        }
        if self.d == 0 || self.hidden == 0 || self.f == 0 || self.universal_depth == 0 {
            return Err(Error::Config("d, hidden, f and universal depth must be positive".into()));
        }
        if self.vocab_sizes.iter().any(|&v| v <= EOS as usize) {
            return Err(Error::Config("every vocabulary must extend past the reserved ids".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.init_range > 0.0 && self.init_range.is_finite()) {
            return Err(Error::Config(format!("init range {} must be positive", self.init_range)));
        }
        let mut names = self.languages.clone();
        names.sort();
        names.dedup();
        if names.len() != self.languages.len() {
            return Err(Error::Config("duplicate language names".into()));
        }
        Ok(())
    }

    pub fn language_index(&self, name: &str) -> Result<usize> {
        self.languages.iter().position(|l| l == name).ok_or_else(|| Error::UnknownLanguage(name.to_string()))
    }
}

/// One LSTM layer; `w` is `[(input + hidden) x 4 hidden]`, gates i, f, g, o.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

pub type Pair = (Var, Var);

impl Lstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        range: f64,
        rng: &mut RngState,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[input + hidden, 4 * hidden], range, rng);
        let b = store.add_uniform(format!("{name}.b"), &[4 * hidden], range, rng);
        Lstm { w, b, input, hidden }
    }

    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, track: bool, x: Var, s: Pair) -> Result<Pair> {
        let w = tape.leaf(store, self.w, track);
        let b = tape.leaf(store, self.b, track);
        let hc = tape.lstm_step(x, s.0, s.1, w, b)?;
        Ok((tape.slice_cols(hc, 0, self.hidden)?, tape.slice_cols(hc, self.hidden, self.hidden)?))
    }

    pub fn run<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        track: bool,
        xs: &[Var],
        mut s: Pair,
    ) -> Result<(Vec<Var>, Pair)> {
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            s = self.step(tape, store, track, x, s)?;
            out.push(s.0);
        }
        Ok((out, s))
    }

    pub fn zero_state<T: Scalar>(&self, rows: usize) -> State<T> {
        State { h: Tensor::zeros(&[rows, self.hidden]), c: Tensor::zeros(&[rows, self.hidden]) }
    }
}

/// Detached recurrent state.
#[derive(Clone, Debug, PartialEq)]
pub struct State<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> State<T> {
    fn on(&self, tape: &mut Tape<T>) -> Pair {
        (tape.constant(self.h.clone()), tape.constant(self.c.clone()))
    }

    fn read(tape: &Tape<T>, p: Pair) -> Self {
        State { h: tape.value(p.0).clone(), c: tape.value(p.1).clone() }
    }
}

/// Recurrent state of every layer for one batch, carried across windows.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState<T> {
    pub enc: State<T>,
    pub uni: Vec<State<T>>,
    pub dec: State<T>,
    pub out: State<T>,
}

/// `E_j` followed by one LSTM.
#[derive(Clone, Debug)]
pub struct LanguageEncoder {
    pub embedding: ParamId,
    pub lstm: Lstm,
}

#[derive(Clone, Debug)]
pub struct UniversalEncoder {
    pub layers: Vec<Lstm>,
}

/// Shared `h`, the language-vector table `k` (one row per language), the
/// per-language output LSTMs and per-language logit biases.
#[derive(Clone, Debug)]
pub struct LanguageDecoder {
    pub h: Lstm,
    pub lang_embed: ParamId,
    pub outputs: Vec<Lstm>,
    pub output_bias: Vec<ParamId>,
}

/// Outcome of a forward pass over one window or one batch.
pub struct Forward<T> {
    /// Mean NLL over predicted tokens.
    pub nll: Var,
    pub tokens: usize,
    /// Universal states per timestep, `[rows x hidden]` each.
    pub latents: Vec<Var>,
    pub state: LmState<T>,
}

#[derive(Clone, Debug)]
pub struct LanguageModel<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoders: Vec<LanguageEncoder>,
    pub universal: UniversalEncoder,
    pub decoder: LanguageDecoder,
}

impl<T: Scalar> LanguageModel<T> {
    pub fn new(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (d, hid, r) = (config.d, config.hidden, config.init_range);
        let mut encoders = Vec::new();
        for (lang, &v) in config.languages.iter().zip(&config.vocab_sizes) {
            let embedding = store.add_uniform(format!("emb.{lang}"), &[v, d], r, rng);
            let lstm = Lstm::new(&mut store, &format!("enc.{lang}"), d, hid, r, rng);
            encoders.push(LanguageEncoder { embedding, lstm });
        }
        let layers = (0..config.universal_depth).map(|l| Lstm::new(&mut store, &format!("uni.{l}"), hid, hid, r, rng)).collect();
        let lang_embed = store.add_uniform("lang_embed", &[config.languages.len(), config.f], r, rng);
        let h = Lstm::new(&mut store, "dec", hid + config.f, hid, r, rng);
        let outputs =
            config.languages.iter().map(|lang| Lstm::new(&mut store, &format!("out.{lang}"), hid, d, r, rng)).collect();
        let output_bias = config
            .languages
            .iter()
            .zip(&config.vocab_sizes)
            .map(|(lang, &v)| store.add(format!("out_bias.{lang}"), Tensor::zeros(&[v]), true))
            .collect();
        Ok(LanguageModel {
            config,
            store,
            encoders,
            universal: UniversalEncoder { layers },
            decoder: LanguageDecoder { h, lang_embed, outputs, output_bias },
        })
    }

    pub fn num_languages(&self) -> usize {
        self.config.languages.len()
    }

    fn check_lang(&self, lang: usize) -> Result<()> {
        if lang >= self.num_languages() {
            return Err(Error::UnknownLanguage(format!("index {lang}")));
        }
        Ok(())
    }

    pub fn zero_state(&self, rows: usize) -> LmState<T> {
        LmState {
            enc: self.encoders[0].lstm.zero_state(rows),
            uni: self.universal.layers.iter().map(|l| l.zero_state(rows)).collect(),
            dec: self.decoder.h.zero_state(rows),
            out: self.decoder.outputs[0].zero_state(rows),
        }
    }

    /// Embedding lookup plus the language LSTM over time-major ids.
    pub fn encode_steps(
        &self,
        tape: &mut Tape<T>,
        lang: usize,
        ids: &[Vec<usize>],
        s: Pair,
        track: bool,
    ) -> Result<(Vec<Var>, Pair)> {
        self.check_lang(lang)?;
        let enc = &self.encoders[lang];
        let table = tape.leaf(&self.store, enc.embedding, track);
        let mut xs = Vec::with_capacity(ids.len());
        for step in ids {
            xs.push(tape.gather(table, step)?);
        }
        enc.lstm.run(tape, &self.store, track, &xs, s)
    }

    /// Stacked universal LSTMs with locked dropout between layers when `rng`
    /// is given.
    pub fn universal_steps(
        &self,
        tape: &mut Tape<T>,
        xs: &[Var],
        states: Vec<Pair>,
        track: bool,
        mut rng: Option<&mut RngState>,
    ) -> Result<(Vec<Var>, Vec<Pair>)> {
        let mut cur = xs.to_vec();
        let mut finals = Vec::with_capacity(states.len());
        for (l, (layer, s)) in self.universal.layers.iter().zip(states).enumerate() {
            if l > 0 {
                if let Some(r) = rng.as_deref_mut() {
                    cur = dropout(tape, &cur, self.config.dropout, r, true)?;
                }
            }
            let (out, fin) = layer.run(tape, &self.store, track, &cur, s)?;
            cur = out;
            finals.push(fin);
        }
        Ok((cur, finals))
    }

    /// Decoder over universal states. Returns output-LSTM states per step;
    /// logits are `state · E_langᵀ`.
    pub fn decode_steps(
        &self,
        tape: &mut Tape<T>,
        lang: usize,
        zs: &[Var],
        dec: Pair,
        out: Pair,
        track: bool,
    ) -> Result<(Vec<Var>, Pair, Pair)> {
        self.check_lang(lang)?;
        if zs.is_empty() {
            return Ok((Vec::new(), dec, out));
        }
        let rows = tape.value(zs[0]).rows();
        let k_table = tape.leaf(&self.store, self.decoder.lang_embed, track);
        let k = tape.gather(k_table, &vec![lang; rows])?;
        let mut inputs = Vec::with_capacity(zs.len());
        for &z in zs {
            inputs.push(tape.concat_cols(&[z, k])?);
        }
        let (hs, dec) = self.decoder.h.run(tape, &self.store, track, &inputs, dec)?;
        let (os, out) = self.decoder.outputs[lang].run(tape, &self.store, track, &hs, out)?;
        Ok((os, dec, out))
    }

    /// Tied projection of stacked states onto the language's vocabulary,
    /// plus the language's logit bias.
    pub fn project(&self, tape: &mut Tape<T>, lang: usize, states: &[Var], track: bool) -> Result<Var> {
        self.check_lang(lang)?;
        let stacked = if states.len() == 1 { states[0] } else { tape.concat_rows(states)? };
        let table = tape.leaf(&self.store, self.encoders[lang].embedding, track);
        let logits = tape.matmul_bt(stacked, table)?;
        let bias = tape.leaf(&self.store, self.decoder.output_bias[lang], track);
        tape.add_row(logits, bias)
    }

    fn check_ids(&self, lang: usize, ids: &[Vec<u32>]) -> Result<()> {
        let v = self.config.vocab_sizes[lang];
        if let Some(&bad) = ids.iter().flatten().find(|&&t| t as usize >= v) {
            return Err(Error::UnknownId(bad));
        }
        Ok(())
    }

    /// Full pipeline over one truncation window.
    pub fn forward_window(
        &self,
        tape: &mut Tape<T>,
        lang: usize,
        window: &Window,
        state: &LmState<T>,
        track: bool,
        rng: Option<&mut RngState>,
    ) -> Result<Forward<T>> {
        self.check_lang(lang)?;
        self.check_ids(lang, &window.inputs)?;
        let (rows, len) = (window.inputs.len(), window.len());
        if len == 0 {
            return Err(Error::Empty("window without positions".into()));
        }
        let ids: Vec<Vec<usize>> = (0..len).map(|t| window.inputs.iter().map(|r| r[t] as usize).collect()).collect();
        let enc0 = state.enc.on(tape);
        let (xs, enc) = self.encode_steps(tape, lang, &ids, enc0, track)?;
        let uni0: Vec<Pair> = state.uni.iter().map(|s| s.on(tape)).collect();
        let (zs, uni) = self.universal_steps(tape, &xs, uni0, track, rng)?;
        let (dec0, out0) = (state.dec.on(tape), state.out.on(tape));
        let (os, dec, out) = self.decode_steps(tape, lang, &zs, dec0, out0, track)?;
        let logits = self.project(tape, lang, &os, track)?;
        let mut targets = Vec::with_capacity(rows * len);
        for t in 0..len {
            targets.extend(window.targets.iter().map(|r| r[t].map(|x| x as usize)));
        }
        let tokens = targets.iter().filter(|t| t.is_some()).count();
        let nll = tape.softmax_xent(logits, &targets)?;
        let state = LmState {
            enc: State::read(tape, enc),
            uni: uni.into_iter().map(|p| State::read(tape, p)).collect(),
            dec: State::read(tape, dec),
            out: State::read(tape, out),
        };
        Ok(Forward { nll, tokens, latents: zs, state })
    }

    /// Forward over a whole batch in truncation windows, detaching the state
    /// between windows. The returned NLL is the mean over all predicted
    /// tokens of the batch and `latents` spans the full width.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        windows: &[Window],
        track: bool,
        mut rng: Option<&mut RngState>,
    ) -> Result<Forward<T>> {
        if windows.is_empty() {
            return Err(Error::Empty("batch has nothing to predict".into()));
        }
        let mut state = self.zero_state(batch.size());
        let total: usize = windows.iter().map(|w| w.valid.iter().sum::<usize>()).sum();
        let mut parts = Vec::with_capacity(windows.len());
        let mut latents = Vec::new();
        for w in windows {
            let f = self.forward_window(tape, batch.language, w, &state, track, rng.as_deref_mut())?;
            let weighted = tape.scale(f.nll, T::lit(f.tokens as f64 / total as f64));
            parts.push(weighted);
            latents.extend(f.latents);
            state = f.state;
        }
        let nll = if parts.len() == 1 {
            parts[0]
        } else {
            let stacked = tape.concat_rows(&parts)?;
            tape.sum(stacked)
        };
        Ok(Forward { nll, tokens: total, latents, state })
    }

    /// Universal states for every prediction position of `batch` without the
    /// decoder. Dropout applies when `rng` is given.
    pub fn latent_steps(&self, tape: &mut Tape<T>, batch: &Batch, track: bool, rng: Option<&mut RngState>) -> Result<Vec<Var>> {
        let len = batch.width().saturating_sub(1);
        if len == 0 {
            return Err(Error::Empty("batch has nothing to predict".into()));
        }
        self.check_ids(batch.language, &batch.rows)?;
        let ids: Vec<Vec<usize>> = (0..len).map(|t| batch.rows.iter().map(|r| r[t] as usize).collect()).collect();
        let state = self.zero_state(batch.size());
        let enc0 = state.enc.on(tape);
        let (xs, _) = self.encode_steps(tape, batch.language, &ids, enc0, track)?;
        let uni0: Vec<Pair> = state.uni.iter().map(|s| s.on(tape)).collect();
        Ok(self.universal_steps(tape, &xs, uni0, track, rng)?.0)
    }

    /// Mean NLL per predicted token of `batch` in eval mode, no truncation.
    pub fn lm_nll(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let windows = whole_windows(batch);
        let f = self.forward_batch(&mut tape, batch, &windows, false, None)?;
        Ok(tape.value(f.nll).item().as_f64())
    }

    /// Eval-mode universal states for every prediction position of `batch`
    /// (BOS through the last token before EOS), time-major.
    pub fn latent_batch(&self, batch: &Batch) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let zs = self.latent_steps(&mut tape, batch, false, None)?;
        Ok(zs.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// `[time x d]` encoder states of one sequence in eval mode.
    pub fn encode(&self, ids: &[u32], lang: usize) -> Result<Tensor<T>> {
        if ids.is_empty() {
            return Err(Error::Empty("empty sequence".into()));
        }
        self.check_lang(lang)?;
        self.check_ids(lang, &[ids.to_vec()])?;
        let mut tape = Tape::new();
        let s = self.encoders[lang].lstm.zero_state::<T>(1).on(&mut tape);
        let steps: Vec<Vec<usize>> = ids.iter().map(|&t| vec![t as usize]).collect();
        let (xs, _) = self.encode_steps(&mut tape, lang, &steps, s, false)?;
        stack_rows(&tape, &xs)
    }

    /// `[time x hidden]` universal states for encoder states, eval mode.
    pub fn universal(&self, states: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xs = split_rows(&mut tape, states);
        let s0 = self.universal.layers.iter().map(|l| l.zero_state::<T>(1).on(&mut tape)).collect();
        let (zs, _) = self.universal_steps(&mut tape, &xs, s0, false, None)?;
        stack_rows(&tape, &zs)
    }

    /// `[time x V_lang]` logits for universal states, eval mode.
    pub fn decode(&self, b: &Tensor<T>, lang: usize) -> Result<Tensor<T>> {
        self.check_lang(lang)?;
        let mut tape = Tape::new();
        let zs = split_rows(&mut tape, b);
        let dec = self.decoder.h.zero_state::<T>(1).on(&mut tape);
        let out = self.decoder.outputs[lang].zero_state::<T>(1).on(&mut tape);
        let (os, _, _) = self.decode_steps(&mut tape, lang, &zs, dec, out, false)?;
        let logits = self.project(&mut tape, lang, &os, false)?;
        Ok(tape.value(logits).clone())
    }

    /// Autoregressive continuation of `prefix` (BOS is prepended when the
    /// prefix does not start with it). Temperature 0 picks the argmax.
    pub fn sample(&self, lang: usize, prefix: &[u32], max_len: usize, temperature: f64, rng: &mut RngState) -> Result<Vec<u32>> {
        self.check_lang(lang)?;
        if !(temperature >= 0.0) {
            return Err(Error::Invalid(format!("temperature {temperature} must be non-negative")));
        }
        let mut seq: Vec<u32> = if prefix.first() == Some(&BOS) { prefix.to_vec() } else { [&[BOS], prefix].concat() };
        self.check_ids(lang, &[seq.clone()])?;
        let mut state = self.zero_state(1);
        let mut fed = 0;
        let mut generated = 0;
        while generated < max_len {
            let logits = {
                let mut tape = Tape::new();
                let window = Window {
                    inputs: vec![seq[fed..].to_vec()],
                    targets: vec![vec![None; seq.len() - fed]],
                    valid: vec![0],
                };
                let (row, st) = self.step_logits(&mut tape, lang, &window, &state)?;
                state = st;
                row
            };
            fed = seq.len();
            let next = pick(&logits, temperature, rng);
            seq.push(next as u32);
            generated += 1;
            if next as u32 == EOS {
                break;
            }
        }
        Ok(seq)
    }

    fn step_logits(&self, tape: &mut Tape<T>, lang: usize, window: &Window, state: &LmState<T>) -> Result<(Vec<f64>, LmState<T>)> {
        let len = window.len();
        let ids: Vec<Vec<usize>> = (0..len).map(|t| vec![window.inputs[0][t] as usize]).collect();
        let enc0 = state.enc.on(tape);
        let (xs, enc) = self.encode_steps(tape, lang, &ids, enc0, false)?;
        let uni0: Vec<Pair> = state.uni.iter().map(|s| s.on(tape)).collect();
        let (zs, uni) = self.universal_steps(tape, &xs, uni0, false, None)?;
        let (dec0, out0) = (state.dec.on(tape), state.out.on(tape));
        let (os, dec, out) = self.decode_steps(tape, lang, &zs, dec0, out0, false)?;
        let logits = self.project(tape, lang, &os[len - 1..], false)?;
        let row = tape.value(logits).data().iter().map(|x| x.as_f64()).collect();
        let state = LmState {
            enc: State::read(tape, enc),
            uni: uni.into_iter().map(|p| State::read(tape, p)).collect(),
            dec: State::read(tape, dec),
            out: State::read(tape, out),
        };
        Ok((row, state))
    }
}

fn pick(logits: &[f64], temperature: f64, rng: &mut RngState) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &x) in logits.iter().enumerate() {
            if x > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&x| ((x - mx) / temperature).exp()).collect();
    rng.weighted(&w)
}

/// One window spanning the whole batch.
pub fn whole_windows(batch: &Batch) -> Vec<Window> {
    let sched = TruncationSchedule { start: batch.width().max(1), end: batch.width().max(1), total_steps: 0 };
    bptt_slices(batch, 0, &sched)
}

fn stack_rows<T: Scalar>(tape: &Tape<T>, xs: &[Var]) -> Result<Tensor<T>> {
    let cols = tape.value(xs[0]).cols();
    let data: Vec<T> = xs.iter().flat_map(|&x| tape.value(x).data().to_vec()).collect();
    Tensor::new(vec![xs.len(), cols], data)
}

fn split_rows<T: Scalar>(tape: &mut Tape<T>, t: &Tensor<T>) -> Vec<Var> {
    (0..t.rows()).map(|r| tape.constant(Tensor::from_fn(&[1, t.cols()], |c| t.at(r, c)))).collect()
}
