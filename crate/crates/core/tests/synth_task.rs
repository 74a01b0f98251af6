//! The synthetic task is learnable from surface words alone, independently of
//! the language model.

use std::collections::HashMap;

use ugwgan::synthlang::{LabeledExample, SynthGrammar};
use ugwgan::RngState;

/// Bag-of-words logistic regression trained by full-batch gradient descent.
fn bow_error(train: &[LabeledExample], test: &[LabeledExample]) -> f64 {
    let mut index: HashMap<&str, usize> = HashMap::new();
    for e in train {
        for w in e.sentence.split_whitespace() {
            let n = index.len();
            index.entry(w).or_insert(n);
        }
    }
    let featurize = |e: &LabeledExample| -> Vec<usize> { e.sentence.split_whitespace().filter_map(|w| index.get(w).copied()).collect() };
    let xs: Vec<Vec<usize>> = train.iter().map(featurize).collect();
    let mut w = vec![0.0; index.len()];
    let mut b = 0.0;
    let score = |w: &[f64], b: f64, x: &[usize]| b + x.iter().map(|&i| w[i]).sum::<f64>();
    for _ in 0..400 {
        let mut gw = vec![0.0; w.len()];
        let mut gb = 0.0;
        for (x, e) in xs.iter().zip(train) {
            let p = 1.0 / (1.0 + (-score(&w, b, x)).exp());
            let g = p - f64::from(e.label);
            gb += g;
            for &i in x {
                gw[i] += g;
            }
        }
        let n = train.len() as f64;
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= 0.5 * gi / n;
        }
        b -= 0.5 * gb / n;
    }
    let wrong = test.iter().filter(|e| (score(&w, b, &featurize(e)) > 0.0) != (e.label == 1)).count();
    wrong as f64 / test.len() as f64
}

#[test]
fn bag_of_words_classifier_reaches_five_percent() {
    let g = SynthGrammar::new(2, 11).unwrap();
    for lang in g.language_names() {
        let train = g.generate_task(&lang, 1000, &mut RngState::new(1)).unwrap();
        let test = g.generate_task(&lang, 500, &mut RngState::new(2)).unwrap();
        let err = bow_error(&train, &test);
        assert!(err <= 0.05, "language {lang}: bag-of-words error {err}");
    }
}

#[test]
fn parallel_examples_share_labels() {
    let g = SynthGrammar::new(3, 5).unwrap();
    let names = g.language_names();
    let sets: Vec<Vec<LabeledExample>> = names.iter().map(|l| g.generate_task(l, 50, &mut RngState::new(9)).unwrap()).collect();
    for k in 0..50 {
        assert_eq!(sets[0][k].label, sets[1][k].label);
        assert_eq!(sets[0][k].label, sets[2][k].label);
        assert_ne!(sets[0][k].sentence, sets[1][k].sentence);
    }
}
