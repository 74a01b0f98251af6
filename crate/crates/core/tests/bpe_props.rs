use proptest::prelude::*;
use ugwgan::bpe::{self, Tokenizer, BOS, EOS};

fn tokenizer() -> Tokenizer {
    let corpus = ["the cat sat on the mat", "a dog ate the hat", "ünïcödé wörds stay whole", "tab\tand  spaces"];
    let (merges, vocab) = bpe::learn(corpus.iter().copied(), 320, "x").unwrap();
    Tokenizer::new(vocab, merges).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 2000, ..ProptestConfig::default() })]

    #[test]
    fn round_trip_on_arbitrary_text(s in "\\PC{0,40}") {
        let t = tokenizer();
        let ids = t.encode(&s);
        prop_assert_eq!(ids.first(), Some(&BOS));
        prop_assert_eq!(ids.last(), Some(&EOS));
        prop_assert_eq!(t.decode(&ids).unwrap(), s);
    }

    #[test]
    fn fewer_merges_never_give_fewer_tokens(s in "[a-z ]{0,30}", k in 0usize..40) {
        let t = tokenizer();
        let short = Tokenizer::new(t.vocab().clone(), t.merges().prefix(k)).unwrap();
        prop_assert!(short.encode(&s).len() >= t.encode(&s).len());
    }
}
