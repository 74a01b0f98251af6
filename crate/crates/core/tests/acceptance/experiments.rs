//! Training-based criteria. Runs are cached so checkpoints are shared: the
//! two-language λ∈{0, 0.1} runs over three seeds feed mixing, transfer, the
//! λ trend and the count-2 noise band of the scaling check.

use std::collections::BTreeMap;
use std::time::Instant;

use ugwgan::downstream::{extract_batch, language_id_probe, train_classifier, ClassifierConfig, FeatureSequence};
use ugwgan::model::LanguageModel;
use ugwgan::synthlang::SynthGrammar;
use ugwgan::trainer::{MetricsRow, RunResult, TrainConfig, TrainData, Trainer};
use ugwgan::RngState;

use super::Outcome;

const GRAMMAR_SEED: u64 = 11;
const STEPS: u64 = 10_000;
const SEEDS: [u64; 3] = [0, 1, 2];
const GRID: [f64; 4] = [0.0, 0.1, 1.0, 10.0];
const PROBE_SENTENCES: usize = 300;
const TASK_SENTENCES: usize = 600;
const TASK_TRAIN: usize = 400;

/// Settings at which the small model actually learns the synthetic
/// languages within the budget; see the README.
fn config(lambda: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        lambda,
        seed,
        d: 16,
        hidden: 16,
        f: 8,
        batch_size: 8,
        init_range: 0.5,
        lm_lr: 3e-3,
        eval_every: 2500,
        eval_samples: 128,
        ..TrainConfig::desk()
    }
    .with_steps(STEPS)
}

struct Run {
    model: LanguageModel<f32>,
    result: RunResult,
}

pub struct Lab {
    grammar: SynthGrammar,
    data: TrainData,
    runs: BTreeMap<(usize, u64, u64), Run>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn mean_ppl_at(rows: &[MetricsRow], step: u64) -> f64 {
    let p: Vec<f64> = rows.iter().filter(|r| r.step == step).map(|r| r.ppl_heldout).collect();
    p.iter().sum::<f64>() / p.len() as f64
}

impl Lab {
    pub fn new() -> Self {
        let grammar = SynthGrammar::new(4, GRAMMAR_SEED).expect("grammar");
        let data = TrainData::synthetic(&grammar, &grammar.language_names(), 4000, 300, 500, 0).expect("data");
        Lab { grammar, data, runs: BTreeMap::new() }
    }

    fn run(&mut self, langs: usize, lambda: f64, seed: u64) -> Result<&Run, String> {
        let key = (langs, lambda.to_bits(), seed);
        if !self.runs.contains_key(&key) {
            let names = self.data.languages[..langs].to_vec();
            let sub = self.data.subset(&names).map_err(|e| e.to_string())?;
            let t0 = Instant::now();
            let mut t = Trainer::<f32>::new(config(lambda, seed), sub).map_err(|e| e.to_string())?;
            let rows = t.run(|_| {}).map_err(|e| format!("{langs} languages, λ={lambda}, seed {seed}: {e}"))?;
            let result = RunResult { lambda, languages: names, rows };
            eprintln!("  trained {langs} languages λ={lambda} seed {seed}: ppl {:.3} ({:.0}s)", result.final_ppl(), t0.elapsed().as_secs_f64());
            self.runs.insert(key, Run { model: t.model, result });
        }
        Ok(&self.runs[&key])
    }

    fn features(&self, model: &LanguageModel<f32>, lang: usize, texts: &[&str], labels: Option<&[u8]>) -> Vec<FeatureSequence<f32>> {
        let mut fs = extract_batch(model, &self.data.tokenizers[lang], lang, texts, 64).expect("features");
        if let Some(ls) = labels {
            for (f, &l) in fs.iter_mut().zip(ls) {
                f.label = Some(l);
            }
        }
        fs
    }

    fn probe(&mut self, lambda: f64, seed: u64) -> Result<f64, String> {
        self.run(2, lambda, seed)?;
        let run = &self.runs[&(2, lambda.to_bits(), seed)];
        let mut feats = Vec::new();
        for j in 0..2 {
            let lang = &self.data.languages[j];
            let s = self.grammar.generate_corpus(lang, PROBE_SENTENCES, &mut RngState::with_stream(0, 5000 + j as u64)).expect("corpus");
            let refs: Vec<&str> = s.iter().map(String::as_str).collect();
            feats.push(self.features(&run.model, j, &refs, None));
        }
        language_id_probe(&feats, 1).map_err(|e| e.to_string())
    }

    /// (in-language test error, transfer error) of a classifier trained on
    /// language a and applied to language b.
    fn transfer(&mut self, lambda: f64, seed: u64) -> Result<(f64, f64), String> {
        self.run(2, lambda, seed)?;
        let run = &self.runs[&(2, lambda.to_bits(), seed)];
        let mut sets = Vec::new();
        for j in 0..2 {
            let lang = &self.data.languages[j];
            let ex = self.grammar.generate_task(lang, TASK_SENTENCES, &mut RngState::with_stream(0, 7000 + j as u64)).expect("task");
            let refs: Vec<&str> = ex.iter().map(|e| e.sentence.as_str()).collect();
            let labels: Vec<u8> = ex.iter().map(|e| e.label).collect();
            sets.push(self.features(&run.model, j, &refs, Some(&labels)));
        }
        let clf = train_classifier(&sets[0][..TASK_TRAIN], &ClassifierConfig { seed, ..ClassifierConfig::default() })
            .map_err(|e| e.to_string())?;
        let own = clf.error_rate(&sets[0][TASK_TRAIN..]).map_err(|e| e.to_string())?;
        let other = clf.error_rate(&sets[1]).map_err(|e| e.to_string())?;
        Ok((own, other))
    }

    pub fn latent_mixing(&mut self) -> Outcome {
        let mut acc = BTreeMap::new();
        for lambda in [0.0, 0.1] {
            let mut v = Vec::new();
            for seed in SEEDS {
                match self.probe(lambda, seed) {
                    Ok(a) => v.push(a),
                    Err(e) => return Outcome::new(false, e),
                }
            }
            acc.insert(lambda.to_bits(), v);
        }
        let (a0, a1) = (&acc[&0.0f64.to_bits()], &acc[&0.1f64.to_bits()]);
        let (m0, m1) = (median(a0.clone()), median(a1.clone()));
        Outcome::new(
            m0 >= 0.90 && m1 <= 0.65,
            format!("probe accuracy median λ=0 {m0:.3} (need ≥0.90) {a0:.3?}; λ=0.1 {m1:.3} (need ≤0.65) {a1:.3?}"),
        )
    }

    pub fn zero_shot(&mut self) -> Outcome {
        let mut errs = BTreeMap::new();
        for lambda in [0.0, 0.1] {
            let mut v = Vec::new();
            for seed in SEEDS {
                match self.transfer(lambda, seed) {
                    Ok(e) => v.push(e),
                    Err(e) => return Outcome::new(false, e),
                }
            }
            errs.insert(lambda.to_bits(), v);
        }
        let med = |l: f64, k: usize| median(errs[&l.to_bits()].iter().map(|e| if k == 0 { e.0 } else { e.1 }).collect());
        let (t0, t1) = (med(0.0, 1), med(0.1, 1));
        let (o0, o1) = (med(0.0, 0), med(0.1, 0));
        Outcome::new(
            t1 <= 0.5 * t0 && (t0 - 0.5).abs() <= 0.1,
            format!(
                "median transfer error λ=0 {t0:.3}, λ=0.1 {t1:.3} (need ≤ {:.3} and λ=0 within 0.5±0.1); in-language error λ=0 {o0:.3}, λ=0.1 {o1:.3}",
                0.5 * t0
            ),
        )
    }

    pub fn lambda_trend(&mut self) -> Outcome {
        let mut curves = Vec::new();
        for lambda in GRID {
            match self.run(2, lambda, SEEDS[0]) {
                Ok(r) => curves.push(r.result.rows.clone()),
                Err(e) => return Outcome::new(false, e),
            }
        }
        let mut steps: Vec<u64> = curves[0].iter().map(|r| r.step).collect();
        steps.dedup();
        let mut worst: f64 = 0.0;
        let mut inversions = 0;
        let mut table = Vec::new();
        for &s in &steps {
            let p: Vec<f64> = curves.iter().map(|rows| mean_ppl_at(rows, s)).collect();
            for w in p.windows(2) {
                let drop = (w[0] - w[1]) / w[0];
                worst = worst.max(drop);
                if drop > 0.02 {
                    inversions += 1;
                }
            }
            table.push(format!("{s}:{p:.2?}"));
        }
        Outcome::new(
            inversions == 0,
            format!("λ={GRID:?}; {inversions} adjacent drops beyond 2%, worst {:.1}%; ppl by step {}", 100.0 * worst, table.join(" ")),
        )
    }

    pub fn scaling(&mut self) -> Outcome {
        let gap = |lab: &mut Lab, langs: usize, seed: u64| -> Result<f64, String> {
            let hi = lab.run(langs, 0.1, seed)?.result.final_ppl();
            let lo = lab.run(langs, 0.0, seed)?.result.final_ppl();
            Ok(hi - lo)
        };
        let mut band = Vec::new();
        for seed in SEEDS {
            match gap(self, 2, seed) {
                Ok(g) => band.push(g),
                Err(e) => return Outcome::new(false, e),
            }
        }
        let m = band.iter().sum::<f64>() / band.len() as f64;
        let tol = (band.iter().map(|g| (g - m).powi(2)).sum::<f64>() / (band.len() - 1) as f64).sqrt();
        let mut gaps = vec![band[0]];
        for langs in [3, 4] {
            match gap(self, langs, SEEDS[0]) {
                Ok(g) => gaps.push(g),
                Err(e) => return Outcome::new(false, e),
            }
        }
        let ok = gaps.windows(2).all(|w| w[1] <= w[0] + tol);
        Outcome::new(ok, format!("gap ppl(λ=0.1) − ppl(λ=0) at 2→3→4 languages {gaps:.3?}, tolerance {tol:.3} from count-2 seeds {band:.3?}"))
    }
}
