//! Synthetic languages that share semantics but differ in lexicon and word
//! order.
//!
//! A sentence is first sampled as a *semantic* object (a template plus one
//! concept per slot) and only then rendered through a language's lexicon and
//! order parameter. Sampling never looks at the language, so two languages
//! driven by the same seed produce sentence-aligned parallel text.
//!
//! Every meaning carries a polarity. Adjectives, verbs and adverbs are split
//! into two halves and draws favour the half matching the polarity, so the
//! polarity shapes the whole sentence (much like sentiment does). A positive
//! sentence holds at least one concept of the designated
//! [`ConceptClass::Marker`] class and a negative one holds none, so the task
//! label is "a marker is present" and equals the polarity.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConceptClass {
    Det,
    Noun,
    Adj,
    Verb,
    Adv,
    Prep,
    /// The designated class that decides task labels.
    Marker,
}

const CLASS_SIZES: [(ConceptClass, usize); 7] = [
    (ConceptClass::Det, 3),
    (ConceptClass::Noun, 16),
    (ConceptClass::Adj, 8),
    (ConceptClass::Verb, 10),
    (ConceptClass::Adv, 6),
    (ConceptClass::Prep, 4),
    (ConceptClass::Marker, 4),
];

/// What a slot may hold. `Mod` slots take an adverb or a marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Det,
    Noun,
    Adj,
    Verb,
    Prep,
    Mod,
}

/// A head with its modifiers in head-first order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrase {
    pub head: Slot,
    pub modifiers: Vec<Slot>,
}

impl Phrase {
    fn new(head: Slot, modifiers: &[Slot]) -> Self {
        Phrase { head, modifiers: modifiers.to_vec() }
    }

    fn slots(&self) -> impl Iterator<Item = Slot> + '_ {
        std::iter::once(self.head).chain(self.modifiers.iter().copied())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub phrases: Vec<Phrase>,
}

impl Template {
    pub fn slot_count(&self) -> usize {
        self.phrases.iter().map(|p| 1 + p.modifiers.len()).sum()
    }

    fn has_mod(&self) -> bool {
        self.phrases.iter().flat_map(Phrase::slots).any(|s| s == Slot::Mod)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WordOrder {
    HeadFirst,
    /// Each phrase is rendered in reverse: modifiers (reversed) then head.
    HeadFinal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthLanguage {
    pub name: String,
    pub order: WordOrder,
    /// Surface word of each concept id.
    pub lexicon: Vec<String>,
}

/// A sampled sentence before rendering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Meaning {
    pub template: usize,
    pub polarity: u8,
    /// Concept id per slot, phrase by phrase in head-first order.
    pub concepts: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthGrammar {
    pub seed: u64,
    pub templates: Vec<Template>,
    /// Class of each concept id.
    pub concept_class: Vec<ConceptClass>,
    pub languages: Vec<SynthLanguage>,
    /// Probability that a further `Mod` slot of a positive sentence draws a
    /// marker.
    pub marker_rate: f64,
    /// Probability that a polar draw comes from the half matching the
    /// sentence polarity.
    pub polarity_bias: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub sentence: String,
    pub label: u8,
    pub language: String,
}

pub const PUNCT: &str = ".";

fn default_templates() -> Vec<Template> {
    use Slot::*;
    let np = |mods: &[Slot]| Phrase::new(Noun, mods);
    let vp = |mods: &[Slot]| Phrase::new(Verb, mods);
    let pp = || Phrase::new(Prep, &[Noun]);
    let t = |ps: Vec<Phrase>| Template { phrases: ps };
    vec![
        t(vec![np(&[Det]), vp(&[])]),
        t(vec![np(&[]), vp(&[Mod])]),
        t(vec![np(&[Det]), vp(&[Mod])]),
        t(vec![np(&[Det, Adj]), vp(&[Mod])]),
        t(vec![np(&[Det]), vp(&[]), np(&[Adj])]),
        t(vec![np(&[Det]), vp(&[Mod]), np(&[Det])]),
        t(vec![np(&[Adj]), vp(&[Mod]), pp()]),
        t(vec![np(&[Det, Adj]), vp(&[]), np(&[Det, Adj])]),
        t(vec![vp(&[Mod]), np(&[Det])]),
        t(vec![np(&[Det]), vp(&[Mod]), np(&[Adj]), pp()]),
        t(vec![np(&[]), vp(&[Mod, Mod]), np(&[Det])]),
        t(vec![np(&[Det, Adj]), vp(&[Mod]), pp()]),
    ]
}

const CONSONANTS: [&str; 4] = ["ptkmnslrv", "bdgzhfwjy", "ptksrnlmd", "gbvzfhwjc"];
const VOWELS: [&str; 4] = ["aeiou", "aeiou", "aeiouy", "aeio"];

impl SynthGrammar {
    /// `num_languages` languages named `a`, `b`, ...; even-indexed ones are
    /// head-first, odd-indexed head-final.
    pub fn new(num_languages: usize, seed: u64) -> Result<Self> {
        if num_languages == 0 || num_languages > 26 {
            return Err(Error::Invalid(format!("language count {num_languages} outside 1..=26")));
        }
        let orders = (0..num_languages)
            .map(|i| if i % 2 == 0 { WordOrder::HeadFirst } else { WordOrder::HeadFinal })
            .collect::<Vec<_>>();
        Self::with_orders(&orders, seed)
    }

    pub fn with_orders(orders: &[WordOrder], seed: u64) -> Result<Self> {
        let concept_class: Vec<ConceptClass> =
            CLASS_SIZES.iter().flat_map(|&(c, n)| std::iter::repeat(c).take(n)).collect();
        let mut rng = RngState::with_stream(seed, 0x1e1c);
        let mut taken: HashSet<String> = HashSet::new();
        taken.insert(PUNCT.to_string());
        let mut languages = Vec::with_capacity(orders.len());
        for (li, &order) in orders.iter().enumerate() {
            let cons: Vec<char> = CONSONANTS[li % 4].chars().collect();
            let vows: Vec<char> = VOWELS[li % 4].chars().collect();
            let mut lexicon = Vec::with_capacity(concept_class.len());
            while lexicon.len() < concept_class.len() {
                let syllables = 2 + rng.below(2);
                let mut w = String::new();
                for _ in 0..syllables {
                    w.push(cons[rng.below(cons.len())]);
                    w.push(vows[rng.below(vows.len())]);
                }
                if li >= 4 {
                    w.push(char::from(b'a' + (li % 26) as u8));
                }
                if taken.insert(w.clone()) {
                    lexicon.push(w);
                }
            }
            languages.push(SynthLanguage { name: language_name(li), order, lexicon });
        }
        Ok(SynthGrammar { seed, templates: default_templates(), concept_class, languages, marker_rate: 0.25, polarity_bias: 0.9 })
    }

    pub fn language_names(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.name.clone()).collect()
    }

    pub fn language(&self, name: &str) -> Result<&SynthLanguage> {
        self.languages
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLanguage(name.to_string()))
    }

    fn concepts_of(&self, class: ConceptClass) -> Vec<usize> {
        (0..self.concept_class.len()).filter(|&i| self.concept_class[i] == class).collect()
    }

    /// Zipf-weighted draw within a class; frequency rank is the concept
    /// order. Adjectives, verbs and adverbs draw from the half given by
    /// `polarity` with probability `polarity_bias`.
    fn draw(&self, class: ConceptClass, polarity: u8, rng: &mut RngState) -> usize {
        let mut ids = self.concepts_of(class);
        if matches!(class, ConceptClass::Adj | ConceptClass::Verb | ConceptClass::Adv) {
            let half = ids.len() / 2;
            let side = if rng.uniform() < self.polarity_bias { polarity } else { 1 - polarity };
            ids = if side == 0 { ids[..half].to_vec() } else { ids[half..].to_vec() };
        }
        let weights: Vec<f64> = (0..ids.len()).map(|r| 1.0 / (r as f64 + 1.0)).collect();
        ids[rng.weighted(&weights)]
    }

    fn fill(&self, slot: Slot, marker: bool, polarity: u8, rng: &mut RngState) -> usize {
        let class = match slot {
            Slot::Det => ConceptClass::Det,
            Slot::Noun => ConceptClass::Noun,
            Slot::Adj => ConceptClass::Adj,
            Slot::Verb => ConceptClass::Verb,
            Slot::Prep => ConceptClass::Prep,
            Slot::Mod if marker => ConceptClass::Marker,
            Slot::Mod => ConceptClass::Adv,
        };
        self.draw(class, polarity, rng)
    }

    /// Samples a meaning with the given polarity, or a fair coin for `None`.
    /// Positive meanings use a template with a `Mod` slot and put a marker in
    /// one of them (further `Mod` slots take markers at `marker_rate`).
    pub fn sample_meaning(&self, label: Option<u8>, rng: &mut RngState) -> Meaning {
        let polarity = match label {
            Some(l) => u8::from(l != 0),
            None => rng.below(2) as u8,
        };
        let candidates: Vec<usize> = if polarity == 1 {
            (0..self.templates.len()).filter(|&t| self.templates[t].has_mod()).collect()
        } else {
            (0..self.templates.len()).collect()
        };
        let template = candidates[rng.below(candidates.len())];
        let tpl = &self.templates[template];
        let mod_count = tpl.phrases.iter().flat_map(Phrase::slots).filter(|&s| s == Slot::Mod).count();
        let forced = (polarity == 1).then(|| rng.below(mod_count));
        let mut mod_index = 0;
        let mut concepts = Vec::with_capacity(tpl.phrases.len());
        for phrase in &tpl.phrases {
            let mut filled = Vec::with_capacity(1 + phrase.modifiers.len());
            for slot in phrase.slots() {
                let marker = slot == Slot::Mod
                    && polarity == 1
                    && (forced == Some(mod_index) || rng.uniform() < self.marker_rate);
                if slot == Slot::Mod {
                    mod_index += 1;
                }
                filled.push(self.fill(slot, marker, polarity, rng));
            }
            concepts.push(filled);
        }
        Meaning { template, polarity, concepts }
    }

    /// 1 iff any slot holds a marker concept.
    pub fn label_of(&self, meaning: &Meaning) -> u8 {
        u8::from(meaning.concepts.iter().flatten().any(|&c| self.concept_class[c] == ConceptClass::Marker))
    }

    pub fn render(&self, meaning: &Meaning, lang: &str) -> Result<String> {
        let l = self.language(lang)?;
        let mut words: Vec<&str> = Vec::new();
        for phrase in &meaning.concepts {
            match l.order {
                WordOrder::HeadFirst => words.extend(phrase.iter().map(|&c| l.lexicon[c].as_str())),
                WordOrder::HeadFinal => words.extend(phrase.iter().rev().map(|&c| l.lexicon[c].as_str())),
            }
        }
        words.push(PUNCT);
        Ok(words.join(" "))
    }

    /// `n` sentences in `lang`. The draws do not depend on `lang`.
    pub fn generate_corpus(&self, lang: &str, n: usize, rng: &mut RngState) -> Result<Vec<String>> {
        self.language(lang)?;
        if n == 0 {
            return Err(Error::Invalid("corpus size must be at least 1".into()));
        }
        (0..n).map(|_| self.render(&self.sample_meaning(None, rng), lang)).collect()
    }

    /// `n` labeled sentences with labels alternating 0, 1, 0, ... after a
    /// random start, so the classes differ in size by at most one.
    pub fn generate_task(&self, lang: &str, n: usize, rng: &mut RngState) -> Result<Vec<LabeledExample>> {
        self.language(lang)?;
        if n < 2 {
            return Err(Error::Invalid("task size must be at least 2".into()));
        }
        let first = rng.below(2) as u8;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let want = (first + (i % 2) as u8) % 2;
            let meaning = self.sample_meaning(Some(want), rng);
            debug_assert_eq!(self.label_of(&meaning), want);
            out.push(LabeledExample { sentence: self.render(&meaning, lang)?, label: want, language: lang.to_string() });
        }
        Ok(out)
    }

    /// Surface words of a language, punctuation excluded.
    pub fn surface_vocabulary(&self, lang: &str) -> Result<HashSet<String>> {
        Ok(self.language(lang)?.lexicon.iter().cloned().collect())
    }
}

pub fn language_name(index: usize) -> String {
    char::from(b'a' + (index % 26) as u8).to_string()
}

pub fn write_corpus(path: &Path, sentences: &[String]) -> Result<()> {
    let mut s = sentences.join("\n");
    s.push('\n');
    Ok(fs::write(path, s)?)
}

/// Task file: `label<TAB>text` per line.
pub fn write_task(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let s: String = examples.iter().map(|e| format!("{}\t{}\n", e.label, e.sentence)).collect();
    Ok(fs::write(path, s)?)
}

pub fn read_task(path: &Path, lang: &str) -> Result<Vec<LabeledExample>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (label, sentence) =
            line.split_once('\t').ok_or_else(|| Error::Invalid(format!("{}:{}: expected label<TAB>text", path.display(), i + 1)))?;
        let label = match label {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::Invalid(format!("{}:{}: label {other:?} is not 0/1", path.display(), i + 1))),
        };
        out.push(LabeledExample { sentence: sentence.to_string(), label, language: lang.to_string() });
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("task file {}", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_span_two_to_eight_slots() {
        let g = SynthGrammar::new(2, 1).unwrap();
        assert!(g.templates.iter().all(|t| (2..=8).contains(&t.slot_count())));
    }

    #[test]
    fn shared_seed_gives_parallel_corpora() {
        let g = SynthGrammar::new(2, 3).unwrap();
        let a = g.generate_corpus("a", 50, &mut RngState::new(11)).unwrap();
        let b = g.generate_corpus("b", 50, &mut RngState::new(11)).unwrap();
        assert_eq!(a.len(), 50);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.split(' ').count(), y.split(' ').count());
        }
        assert_eq!(g.generate_corpus("a", 1000, &mut RngState::new(2)).unwrap().len(), 1000);
    }

    #[test]
    fn head_final_reverses_each_phrase() {
        let g = SynthGrammar::with_orders(&[WordOrder::HeadFirst, WordOrder::HeadFirst, WordOrder::HeadFinal], 5).unwrap();
        let mut rng = RngState::new(4);
        for _ in 0..20 {
            let m = g.sample_meaning(None, &mut rng);
            let first = g.render(&m, "b").unwrap();
            let last = g.render(&m, "c").unwrap();
            let lex_b = &g.languages[1].lexicon;
            let lex_c = &g.languages[2].lexicon;
            // map c's words back through the lexicons onto b's and compare per phrase
            let mut expect = Vec::new();
            for phrase in &m.concepts {
                expect.extend(phrase.iter().rev().map(|&c| lex_c[c].clone()));
            }
            expect.push(PUNCT.to_string());
            assert_eq!(last, expect.join(" "));
            let fw: Vec<String> = m.concepts.iter().flatten().map(|&c| lex_b[c].clone()).collect();
            assert_eq!(first, format!("{} {PUNCT}", fw.join(" ")));
        }
    }

    #[test]
    fn task_labels_balanced_and_language_invariant() {
        let g = SynthGrammar::new(2, 9).unwrap();
        for n in [2, 3, 101, 400] {
            let a = g.generate_task("a", n, &mut RngState::new(n as u64)).unwrap();
            let b = g.generate_task("b", n, &mut RngState::new(n as u64)).unwrap();
            let pos = a.iter().filter(|e| e.label == 1).count() as i64;
            assert!((pos - (n as i64 - pos)).abs() <= 1);
            let la: Vec<u8> = a.iter().map(|e| e.label).collect();
            let lb: Vec<u8> = b.iter().map(|e| e.label).collect();
            assert_eq!(la, lb);
        }
        assert!(g.generate_task("a", 1, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn label_is_polarity_and_marker_presence() {
        let g = SynthGrammar::new(2, 4).unwrap();
        let mut rng = RngState::new(8);
        let mut positive = 0;
        for _ in 0..500 {
            let m = g.sample_meaning(None, &mut rng);
            assert_eq!(g.label_of(&m), m.polarity);
            positive += usize::from(m.polarity);
        }
        assert!((200..300).contains(&positive), "{positive}");
        for want in [0, 1] {
            for _ in 0..50 {
                assert_eq!(g.label_of(&g.sample_meaning(Some(want), &mut rng)), want);
            }
        }
    }

    #[test]
    fn lexicons_are_disjoint_bijections() {
        let g = SynthGrammar::new(6, 21).unwrap();
        let mut all = HashSet::new();
        for l in &g.languages {
            let set: HashSet<_> = l.lexicon.iter().collect();
            assert_eq!(set.len(), l.lexicon.len());
            for w in &l.lexicon {
                assert!(all.insert(w.clone()), "{w} shared");
            }
        }
    }

    #[test]
    fn task_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = SynthGrammar::new(2, 2).unwrap();
        let ex = g.generate_task("b", 10, &mut RngState::new(1)).unwrap();
        let p = dir.path().join("b.task.tsv");
        write_task(&p, &ex).unwrap();
        assert_eq!(read_task(&p, "b").unwrap(), ex);
    }
}
