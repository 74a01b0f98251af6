//! Clamped Wasserstein critic over universal states.
//!
//! Each sequence goes through a stacked LSTM and linear attention pooling,
//! then an affine map to `m²` outputs and batch normalization. Output column
//! `α·m + β` is the potential `f_{α,β}`. In training mode the batch statistics
//! are taken over the samples of all languages together; normalizing each
//! language separately would make every estimate zero.

use crate::error::{Error, Result};
use crate::model::{Lstm, Pair, INIT_RANGE};
use crate::numerics::{Optimizer, ParamId, ParamStore, RngState, Scalar, Tape, Tensor, Var, BN_EPS, BN_MOMENTUM};

pub const DEFAULT_CLIP: f64 = 0.01;
pub const DEFAULT_LR: f64 = 5e-5;

/// A language's samples: time-major `[rows x dim]` steps and the number of
/// valid steps of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequences<T> {
    pub steps: Vec<Tensor<T>>,
    pub lens: Vec<usize>,
}

impl<T: Scalar> Sequences<T> {
    pub fn new(steps: Vec<Tensor<T>>, lens: Vec<usize>) -> Result<Self> {
        if steps.is_empty() || lens.is_empty() {
            return Err(Error::Empty("sample set without sequences".into()));
        }
        if steps.iter().any(|s| s.rows() != lens.len() || s.cols() != steps[0].cols()) {
            return Err(Error::Shape("sample steps disagree on rows or width".into()));
        }
        if lens.iter().any(|&l| l == 0 || l > steps.len()) {
            return Err(Error::Invalid(format!("sample lengths must be in 1..={}", steps.len())));
        }
        Ok(Sequences { steps, lens })
    }

    /// Packs `[time x dim]` sequences of possibly different lengths.
    pub fn from_sequences(seqs: &[Tensor<T>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("sample set without sequences".into()));
        }
        let dim = seqs[0].cols();
        let t_max = seqs.iter().map(Tensor::rows).max().unwrap_or(0);
        let steps = (0..t_max)
            .map(|t| {
                Tensor::from_fn(&[seqs.len(), dim], |i| {
                    let (r, c) = (i / dim, i % dim);
                    if t < seqs[r].rows() { seqs[r].at(t, c) } else { T::zero() }
                })
            })
            .collect();
        Self::new(steps, seqs.iter().map(Tensor::rows).collect())
    }

    pub fn rows(&self) -> usize {
        self.lens.len()
    }
}

/// Pairwise estimates; entry `[α][β]` estimates the distance from language
/// α to language β. The diagonal is 0.
#[derive(Clone, Debug, PartialEq)]
pub struct WassersteinEstimate {
    pub matrix: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl WassersteinEstimate {
    pub fn off_diagonal_sum(&self) -> f64 {
        let m = self.matrix.len();
        (0..m).flat_map(|a| (0..m).filter(move |&b| b != a).map(move |b| (a, b))).map(|(a, b)| self.matrix[a][b]).sum()
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let m = self.matrix.len();
        if m < 2 {
            return 0.0;
        }
        self.off_diagonal_sum() / (m * (m - 1)) as f64
    }
}

#[derive(Clone, Debug)]
pub struct Critic<T: Scalar> {
    pub store: ParamStore<T>,
    pub layers: Vec<Lstm>,
    pub attn: ParamId,
    pub w: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub m: usize,
    pub clip: f64,
    pub updates: u64,
}

impl<T: Scalar> Critic<T> {
    /// A depth-2 critic over `dim`-wide states for `m` languages, clipped
    /// from the start.
    pub fn new(dim: usize, m: usize, clip: f64, rng: &mut RngState) -> Result<Self> {
        if dim == 0 || m == 0 {
            return Err(Error::Config("critic needs a positive width and language count".into()));
        }
        let mut store = ParamStore::new();
        let layers = (0..2).map(|l| Lstm::new(&mut store, &format!("critic.lstm{l}"), dim, dim, INIT_RANGE, rng)).collect();
        let attn = store.add_uniform("critic.attn", &[dim], INIT_RANGE, rng);
        let w = store.add_uniform("critic.w", &[dim, m * m], INIT_RANGE, rng);
        let bias = store.add("critic.bias", Tensor::zeros(&[m * m]), true);
        let gamma = store.add("critic.bn.gamma", Tensor::full(&[m * m], T::one()), true);
        let beta = store.add("critic.bn.beta", Tensor::zeros(&[m * m]), true);
        let mut c = Critic {
            store,
            layers,
            attn,
            w,
            bias,
            gamma,
            beta,
            running_mean: vec![T::zero(); m * m],
            running_var: vec![T::one(); m * m],
            m,
            clip,
            updates: 0,
        };
        c.clip_params(clip)?;
        Ok(c)
    }

    /// Clamps every trainable parameter into `[-c, c]`.
    pub fn clip_params(&mut self, c: f64) -> Result<()> {
        if !(c > 0.0) {
            return Err(Error::Invalid(format!("clip bound {c} must be positive")));
        }
        let (lo, hi) = (T::lit(-c), T::lit(c));
        for p in self.store.iter_mut().filter(|p| p.trainable) {
            for v in p.value.data_mut() {
                *v = v.max(lo).min(hi);
            }
        }
        Ok(())
    }

    pub fn max_abs_param(&self) -> f64 {
        self.store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.max_abs().as_f64()).fold(0.0, f64::max)
    }

    /// Linear sequence attention with the critic's vector over raw states.
    pub fn attention_pool(&self, states: &Tensor<T>) -> Result<Tensor<T>> {
        if states.rows() == 0 {
            return Err(Error::Empty("attention over zero timesteps".into()));
        }
        let mut tape = Tape::new();
        let xs: Vec<Var> =
            (0..states.rows()).map(|r| tape.constant(Tensor::from_fn(&[1, states.cols()], |c| states.at(r, c)))).collect();
        let a = tape.frozen(&self.store, self.attn);
        let out = tape.attention_pool(&xs, a, &[states.rows()])?;
        Ok(tape.value(out).clone().reshape(&[states.cols()])?)
    }

    /// Pooled `[rows x dim]` representation of one language's samples.
    fn pool(&self, tape: &mut Tape<T>, steps: &[Var], lens: &[usize], track: bool) -> Result<Var> {
        let rows = lens.len();
        let mut cur = steps.to_vec();
        for layer in &self.layers {
            let s0: Pair = (
                tape.constant(Tensor::zeros(&[rows, layer.hidden])),
                tape.constant(Tensor::zeros(&[rows, layer.hidden])),
            );
            cur = layer.run(tape, &self.store, track, &cur, s0)?.0;
        }
        let a = tape.leaf(&self.store, self.attn, track);
        tape.attention_pool(&cur, a, lens)
    }

    /// Raw potentials `[N x m²]` for the languages' samples stacked in
    /// order. In training mode returns the batch mean and variance too.
    pub fn potentials(
        &self,
        tape: &mut Tape<T>,
        samples: &[(Vec<Var>, Vec<usize>)],
        track: bool,
        train: bool,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        if samples.len() != self.m {
            return Err(Error::Invalid(format!("critic built for {} languages got {}", self.m, samples.len())));
        }
        let mut pooled = Vec::with_capacity(samples.len());
        for (steps, lens) in samples {
            if lens.is_empty() {
                return Err(Error::Empty("a language has zero samples".into()));
            }
            pooled.push(self.pool(tape, steps, lens, track)?);
        }
        let x = if pooled.len() == 1 { pooled[0] } else { tape.concat_rows(&pooled)? };
        let w = tape.leaf(&self.store, self.w, track);
        let b = tape.leaf(&self.store, self.bias, track);
        let lin = tape.matmul(x, w)?;
        let lin = tape.add_row(lin, b)?;
        let g = tape.leaf(&self.store, self.gamma, track);
        let be = tape.leaf(&self.store, self.beta, track);
        if train {
            let (out, mean, var) = tape.batch_norm_train(lin, g, be, BN_EPS)?;
            Ok((out, Some((mean, var))))
        } else {
            Ok((tape.batch_norm_eval(lin, g, be, &self.running_mean, &self.running_var, BN_EPS)?, None))
        }
    }

    /// Weights turning stacked potentials into `Σ_{α≠β} W_αβ`.
    pub fn objective_weights(&self, counts: &[usize]) -> Vec<T> {
        let m = self.m;
        let n: usize = counts.iter().sum();
        let mut w = vec![T::zero(); n * m * m];
        let mut row = 0;
        for (lang, &cnt) in counts.iter().enumerate() {
            for _ in 0..cnt {
                for a in 0..m {
                    for b in 0..m {
                        if a == b {
                            continue;
                        }
                        let mut v = 0.0;
                        if lang == a {
                            v += 1.0 / counts[a] as f64;
                        }
                        if lang == b {
                            v -= 1.0 / counts[b] as f64;
                        }
                        w[row * m * m + a * m + b] = T::lit(v);
                    }
                }
                row += 1;
            }
        }
        w
    }

    /// Estimate matrix from stacked potentials, computed as a difference of
    /// two means so that duplicated collections give exactly zero.
    pub fn estimate_from(&self, f: &Tensor<T>, counts: &[usize]) -> WassersteinEstimate {
        let m = self.m;
        let mut means = vec![vec![0.0f64; m * m]; m];
        let mut row = 0;
        for (lang, &cnt) in counts.iter().enumerate() {
            for _ in 0..cnt {
                for (k, v) in f.row(row).iter().enumerate() {
                    means[lang][k] += v.as_f64();
                }
                row += 1;
            }
            means[lang].iter_mut().for_each(|v| *v /= cnt as f64);
        }
        let mut matrix = vec![vec![0.0; m]; m];
        for a in 0..m {
            for b in 0..m {
                if a != b {
                    matrix[a][b] = means[a][a * m + b] - means[b][a * m + b];
                }
            }
        }
        WassersteinEstimate { matrix, counts: counts.to_vec() }
    }

    /// `m x m` potentials of one sequence in eval mode.
    pub fn scores(&self, seq: &Tensor<T>) -> Result<Tensor<T>> {
        let samples = Sequences::from_sequences(std::slice::from_ref(seq))?;
        let mut tape = Tape::new();
        let steps: Vec<Var> = samples.steps.iter().map(|s| tape.constant(s.clone())).collect();
        let x = self.pool(&mut tape, &steps, &samples.lens, false)?;
        let w = tape.frozen(&self.store, self.w);
        let b = tape.frozen(&self.store, self.bias);
        let lin = tape.matmul(x, w)?;
        let lin = tape.add_row(lin, b)?;
        let g = tape.frozen(&self.store, self.gamma);
        let be = tape.frozen(&self.store, self.beta);
        let out = tape.batch_norm_eval(lin, g, be, &self.running_mean, &self.running_var, BN_EPS)?;
        Ok(tape.value(out).clone().reshape(&[self.m, self.m])?)
    }

    fn constants(tape: &mut Tape<T>, samples: &[Sequences<T>]) -> Vec<(Vec<Var>, Vec<usize>)> {
        samples.iter().map(|s| (s.steps.iter().map(|t| tape.constant(t.clone())).collect(), s.lens.clone())).collect()
    }

    /// Eval-mode estimate over per-language samples.
    pub fn wasserstein_estimate(&self, samples: &[Sequences<T>]) -> Result<WassersteinEstimate> {
        let mut tape = Tape::new();
        let vars = Self::constants(&mut tape, samples);
        let (f, _) = self.potentials(&mut tape, &vars, false, false)?;
        let counts: Vec<usize> = samples.iter().map(Sequences::rows).collect();
        Ok(self.estimate_from(tape.value(f), &counts))
    }

    /// One ascent step on the summed off-diagonal estimates in training
    /// mode, then clipping. The samples are constants, so nothing outside the
    /// critic can change. Returns the objective before the step.
    pub fn critic_update(&mut self, samples: &[Sequences<T>], opt: &mut impl Optimizer<T>) -> Result<f64> {
        if samples.len() < 2 {
            return Err(Error::Invalid("critic update needs at least 2 languages".into()));
        }
        let mut tape = Tape::new();
        let vars = Self::constants(&mut tape, samples);
        let (f, stats) = self.potentials(&mut tape, &vars, true, true)?;
        let counts: Vec<usize> = samples.iter().map(Sequences::rows).collect();
        let objective = tape.weighted_sum(f, self.objective_weights(&counts))?;
        let loss = tape.scale(objective, -T::one());
        let value = tape.value(objective).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("critic objective {value}")));
        }
        self.store.zero_grads();
        tape.backward_into(loss, &mut [&mut self.store])?;
        opt.step(&mut self.store);
        self.clip_params(self.clip)?;
        if let Some((mean, var)) = stats {
            let mo = T::lit(BN_MOMENTUM);
            for k in 0..mean.len() {
                self.running_mean[k] = mo * self.running_mean[k] + (T::one() - mo) * mean[k];
                self.running_var[k] = mo * self.running_var[k] + (T::one() - mo) * var[k];
            }
        }
        self.updates += 1;
        Ok(value)
    }

    /// Differentiable `Σ_{α≠β} W_αβ` for the LM step: eval-mode statistics,
    /// frozen critic, gradient flowing into the given states.
    pub fn penalty(&self, tape: &mut Tape<T>, samples: &[(Vec<Var>, Vec<usize>)]) -> Result<(Var, WassersteinEstimate)> {
        let (f, _) = self.potentials(tape, samples, false, false)?;
        let counts: Vec<usize> = samples.iter().map(|s| s.1.len()).collect();
        let est = self.estimate_from(tape.value(f), &counts);
        let sum = tape.weighted_sum(f, self.objective_weights(&counts))?;
        Ok((sum, est))
    }
}
