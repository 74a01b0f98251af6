//! Central-difference gradient oracle and the per-layer cases it checks.

use ugwgan::critic::Critic;
use ugwgan::model::{LanguageModel, ModelConfig};
use ugwgan::corpus::{bptt_slices, Batch, Document, TruncationSchedule};
use ugwgan::numerics::{ParamId, ParamStore, RngState, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
pub const SEEDS: u64 = 20;

/// Builds the loss from the current parameter values.
pub type LossFn<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var + 'a;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Largest relative error between backprop and central differences over
/// every trainable entry (or `limit` evenly spaced entries per parameter).
pub fn max_error(store: &mut ParamStore<f64>, loss: &LossFn, limit: usize) -> f64 {
    let mut tape = Tape::new();
    let l = loss(&mut tape, store);
    let grads = tape.backward(l).expect("backward");
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for id in ids {
        let analytic = grads.get(store, id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let n = store.value(id).numel();
        let stride = (n / limit.max(1)).max(1);
        for k in (0..n).step_by(stride) {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + STEP;
            let up = eval(store, loss);
            store.value_mut(id).data_mut()[k] = orig - STEP;
            let down = eval(store, loss);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[k], numeric));
        }
    }
    worst
}

fn eval(store: &ParamStore<f64>, loss: &LossFn) -> f64 {
    let mut tape = Tape::new();
    let l = loss(&mut tape, store);
    tape.value(l).item()
}

fn normal(rng: &mut RngState, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal() * scale)
}

/// Random linear readout so every output entry carries gradient.
fn readout(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let mut rng = RngState::with_stream(seed, 99);
    let w: Vec<f64> = (0..tape.value(x).numel()).map(|_| rng.normal()).collect();
    tape.weighted_sum(x, w).expect("readout")
}

pub fn lstm_cell(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let (n, inp, hid) = (3, 4, 5);
    let mut s = ParamStore::new();
    let x = s.add("x", normal(&mut rng, &[n, inp], 1.0), true);
    let h = s.add("h", normal(&mut rng, &[n, hid], 0.5), true);
    let c = s.add("c", normal(&mut rng, &[n, hid], 0.5), true);
    let w = s.add("w", normal(&mut rng, &[inp + hid, 4 * hid], 0.5), true);
    let b = s.add("b", normal(&mut rng, &[4 * hid], 0.5), true);
    max_error(
        &mut s,
        &|t, s| {
            let (x, h, c, w, b) = (t.param(s, x), t.param(s, h), t.param(s, c), t.param(s, w), t.param(s, b));
            let out = t.lstm_step(x, h, c, w, b).unwrap();
            readout(t, out, seed)
        },
        usize::MAX,
    )
}

pub fn lstm_unrolled(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let (n, inp, hid, steps) = (2, 3, 4, 5);
    let mut s = ParamStore::new();
    let xs: Vec<ParamId> = (0..steps).map(|i| s.add(format!("x{i}"), normal(&mut rng, &[n, inp], 1.0), true)).collect();
    let w = s.add("w", normal(&mut rng, &[inp + hid, 4 * hid], 0.4), true);
    let b = s.add("b", normal(&mut rng, &[4 * hid], 0.4), true);
    max_error(
        &mut s,
        &|t, s| {
            let (w, b) = (t.param(s, w), t.param(s, b));
            let mut h = t.constant(Tensor::zeros(&[n, hid]));
            let mut c = t.constant(Tensor::zeros(&[n, hid]));
            for &x in &xs {
                let xv = t.param(s, x);
                let hc = t.lstm_step(xv, h, c, w, b).unwrap();
                h = t.slice_cols(hc, 0, hid).unwrap();
                c = t.slice_cols(hc, hid, hid).unwrap();
            }
            readout(t, h, seed)
        },
        usize::MAX,
    )
}

pub fn attention_pool(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let (n, d, steps) = (3, 4, 5);
    let lens = [5, 2, 1];
    let mut s = ParamStore::new();
    let xs: Vec<ParamId> = (0..steps).map(|i| s.add(format!("s{i}"), normal(&mut rng, &[n, d], 1.0), true)).collect();
    let a = s.add("a", normal(&mut rng, &[d], 1.0), true);
    max_error(
        &mut s,
        &|t, s| {
            let states: Vec<Var> = xs.iter().map(|&x| t.param(s, x)).collect();
            let a = t.param(s, a);
            let out = t.attention_pool(&states, a, &lens).unwrap();
            readout(t, out, seed)
        },
        usize::MAX,
    )
}

pub fn batch_norm_train(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let (n, k) = (6, 4);
    let mut s = ParamStore::new();
    let x = s.add("x", normal(&mut rng, &[n, k], 1.0), true);
    let g = s.add("g", normal(&mut rng, &[k], 1.0), true);
    let b = s.add("b", normal(&mut rng, &[k], 1.0), true);
    max_error(
        &mut s,
        &|t, s| {
            let (x, g, b) = (t.param(s, x), t.param(s, g), t.param(s, b));
            let (out, _, _) = t.batch_norm_train(x, g, b, 1e-5).unwrap();
            readout(t, out, seed)
        },
        usize::MAX,
    )
}

pub fn batch_norm_eval(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let (n, k) = (3, 4);
    let mut s = ParamStore::new();
    let x = s.add("x", normal(&mut rng, &[n, k], 1.0), true);
    let g = s.add("g", normal(&mut rng, &[k], 1.0), true);
    let b = s.add("b", normal(&mut rng, &[k], 1.0), true);
    let mean: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
    let var: Vec<f64> = (0..k).map(|_| 0.5 + rng.uniform()).collect();
    max_error(
        &mut s,
        &|t, s| {
            let (x, g, b) = (t.param(s, x), t.param(s, g), t.param(s, b));
            let out = t.batch_norm_eval(x, g, b, &mean, &var, 1e-5).unwrap();
            readout(t, out, seed)
        },
        usize::MAX,
    )
}

pub fn embedding(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let mut s = ParamStore::new();
    let table = s.add("e", normal(&mut rng, &[7, 3], 1.0), true);
    let ids: Vec<usize> = (0..6).map(|_| rng.below(7)).collect();
    max_error(
        &mut s,
        &|t, s| {
            let e = t.param(s, table);
            let out = t.gather(e, &ids).unwrap();
            let sq = t.mul(out, out).unwrap();
            readout(t, sq, seed)
        },
        usize::MAX,
    )
}

/// Embedding lookup and transposed-table projection on one parameter,
/// through softmax cross-entropy.
pub fn tied_projection(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let (v, d, n) = (6, 4, 5);
    let mut s = ParamStore::new();
    let table = s.add("e", normal(&mut rng, &[v, d], 1.0), true);
    let ids: Vec<usize> = (0..n).map(|_| rng.below(v)).collect();
    let targets: Vec<Option<usize>> = (0..n).map(|i| if i == 2 { None } else { Some(rng.below(v)) }).collect();
    max_error(
        &mut s,
        &|t, s| {
            let e = t.param(s, table);
            let x = t.gather(e, &ids).unwrap();
            let x = t.tanh(x);
            let logits = t.matmul_bt(x, e).unwrap();
            t.softmax_xent(logits, &targets).unwrap()
        },
        usize::MAX,
    )
}

pub fn dense_ops(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let mut s = ParamStore::new();
    let a = s.add("a", normal(&mut rng, &[3, 4], 1.0), true);
    let b = s.add("b", normal(&mut rng, &[4, 2], 1.0), true);
    let bias = s.add("bias", normal(&mut rng, &[2], 1.0), true);
    let labels: Vec<f64> = (0..3).map(|_| f64::from(u8::from(rng.uniform() < 0.5))).collect();
    max_error(
        &mut s,
        &|t, s| {
            let (a, b, bias) = (t.param(s, a), t.param(s, b), t.param(s, bias));
            let z = t.matmul(a, b).unwrap();
            let z = t.add_row(z, bias).unwrap();
            let sg = t.sigmoid(z);
            let both = t.concat_cols(&[z, sg]).unwrap();
            let left = t.slice_cols(both, 1, 2).unwrap();
            let stacked = t.concat_rows(&[left, z]).unwrap();
            let sc = t.scale(stacked, 0.7);
            let first = t.slice_cols(sc, 0, 1).unwrap();
            let bce = t.bce_logits(first, &[labels.clone(), labels.clone()].concat()).unwrap();
            let sum = t.sum(sc);
            t.add(bce, sum).unwrap()
        },
        usize::MAX,
    )
}

/// Whole language model over one window (truncation detaches the carried
/// state, which central differences would still see).
pub fn language_model(seed: u64) -> f64 {
    let cfg = ModelConfig { d: 3, hidden: 4, f: 2, dropout: 0.0, ..ModelConfig::desk(vec!["a".into(), "b".into()], vec![9, 8]) };
    let mut m = LanguageModel::<f64>::new(cfg, &mut RngState::new(seed)).unwrap();
    for (_, p) in m.store.iter_mut().enumerate() {
        let mut rng = RngState::with_stream(seed, p.value.numel() as u64);
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.normal() * 0.5);
    }
    let docs = [
        Document { language: 1, tokens: vec![2, 4, 5, 6, 7, 3] },
        Document { language: 1, tokens: vec![2, 6, 3] },
    ];
    let batch = Batch::from_docs(1, &[&docs[0], &docs[1]]).unwrap();
    let windows = bptt_slices(&batch, 0, &TruncationSchedule { start: 8, end: 8, total_steps: 0 });
    let model = m.clone();
    let mut store = std::mem::take(&mut m.store);
    max_error(
        &mut store,
        &|t, s| {
            let mm = LanguageModel { store: s.clone(), ..model.clone() };
            let f = mm.forward_batch(t, &batch, &windows, true, None).unwrap();
            f.nll
        },
        12,
    )
}

/// Critic potentials in training mode through the summed objective.
pub fn critic(seed: u64) -> f64 {
    let mut c = Critic::<f64>::new(3, 2, 10.0, &mut RngState::new(seed)).unwrap();
    for (_, p) in c.store.iter_mut().enumerate() {
        let mut rng = RngState::with_stream(seed, 7 + p.value.numel() as u64);
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.normal() * 0.5);
    }
    let mut rng = RngState::with_stream(seed, 1);
    let samples: Vec<(Vec<Tensor<f64>>, Vec<usize>)> = vec![
        ((0..3).map(|_| normal(&mut rng, &[2, 3], 1.0)).collect(), vec![3, 2]),
        ((0..2).map(|_| normal(&mut rng, &[3, 3], 1.0)).collect(), vec![2, 1, 2]),
    ];
    let critic = c.clone();
    let mut store = std::mem::take(&mut c.store);
    max_error(
        &mut store,
        &|t, s| {
            let cc = Critic { store: s.clone(), ..critic.clone() };
            let vars: Vec<(Vec<Var>, Vec<usize>)> =
                samples.iter().map(|(st, l)| (st.iter().map(|x| t.constant(x.clone())).collect(), l.clone())).collect();
            let (f, _) = cc.potentials(t, &vars, true, true).unwrap();
            t.weighted_sum(f, cc.objective_weights(&[2, 3])).unwrap()
        },
        12,
    )
}

pub fn cases() -> Vec<(&'static str, fn(u64) -> f64)> {
    vec![
        ("lstm cell", lstm_cell),
        ("lstm unrolled", lstm_unrolled),
        ("attention pool", attention_pool),
        ("batch norm (train)", batch_norm_train),
        ("batch norm (eval)", batch_norm_eval),
        ("embedding", embedding),
        ("tied projection", tied_projection),
        ("dense ops", dense_ops),
        ("language model", language_model),
        ("critic", critic),
    ]
}
