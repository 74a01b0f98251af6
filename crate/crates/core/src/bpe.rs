//! Per-language byte-pair encoding.
//!
//! Text is split into pieces (runs of non-whitespace, with a single preceding
//! space attached, and leftover whitespace runs). Merges never cross piece
//! boundaries. Characters never seen during learning fall back to their UTF-8
//! bytes, so encoding is total and `decode(encode(s)) == s` for every string.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
const BYTE_BASE: u32 = 4;
const FIRST_TEXT: u32 = BYTE_BASE + 256;

pub const DEFAULT_VOCAB_SIZE: usize = 16_000;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Special(&'static str),
    Byte(u8),
    Text(String),
}

const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token string <-> id bijection. Ids 0..4 are PAD, UNK, BOS, EOS; the next
/// 256 ids are raw bytes; learned text tokens follow.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<Token>,
    text_ids: HashMap<String, u32>,
}

impl Vocab {
    fn base(chars: impl IntoIterator<Item = char>) -> Self {
        let mut v = Vocab { tokens: Vec::new(), text_ids: HashMap::new() };
        v.tokens.extend(SPECIALS.iter().map(|s| Token::Special(s)));
        v.tokens.extend((0..=255u8).map(Token::Byte));
        for c in chars {
            v.push_text(c.to_string());
        }
        v
    }

    fn push_text(&mut self, s: String) -> u32 {
        if let Some(&id) = self.text_ids.get(&s) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.text_ids.insert(s.clone(), id);
        self.tokens.push(Token::Text(s));
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&Token> {
        self.tokens.get(id as usize)
    }

    pub fn text_id(&self, s: &str) -> Option<u32> {
        self.text_ids.get(s).copied()
    }

    /// One token per line, line number = id. Text tokens are escaped so that
    /// whitespace and a leading `<` survive the line format.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            match t {
                Token::Special(s) => out.push_str(s),
                Token::Byte(b) => out.push_str(&format!("<0x{b:02X}>")),
                Token::Text(s) => out.push_str(&escape(s)),
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut v = Vocab { tokens: Vec::new(), text_ids: HashMap::new() };
        for (i, line) in text.lines().enumerate() {
            let id = i as u32;
            let tok = if (id as usize) < SPECIALS.len() {
                if line != SPECIALS[i] {
                    return Err(Error::Invalid(format!("vocab line {i}: expected {}", SPECIALS[i])));
                }
                Token::Special(SPECIALS[i])
            } else if id < FIRST_TEXT {
                let want = format!("<0x{:02X}>", id - BYTE_BASE);
                if line != want {
                    return Err(Error::Invalid(format!("vocab line {i}: expected {want}")));
                }
                Token::Byte((id - BYTE_BASE) as u8)
            } else {
                let s = unescape(line)?;
                if v.text_ids.insert(s.clone(), id).is_some() {
                    return Err(Error::Invalid(format!("vocab line {i}: duplicate token")));
                }
                Token::Text(s)
            };
            v.tokens.push(tok);
        }
        if v.tokens.len() < FIRST_TEXT as usize {
            return Err(Error::Invalid("vocab file truncated".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_file_string())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Ordered merges in learning order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergeTable {
    pub language: String,
    merges: Vec<(String, String)>,
}

impl MergeTable {
    pub fn new(language: impl Into<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for m in &merges {
            if !seen.insert(m) {
                return Err(Error::Invalid(format!("duplicate merge {m:?}")));
            }
        }
        Ok(MergeTable { language: language.into(), merges })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    /// The first `k` merges.
    pub fn prefix(&self, k: usize) -> MergeTable {
        MergeTable { language: self.language.clone(), merges: self.merges[..k.min(self.merges.len())].to_vec() }
    }

    pub fn to_file_string(&self) -> String {
        self.merges.iter().map(|(l, r)| format!("{} {}\n", escape(l), escape(r))).collect()
    }

    pub fn parse(language: &str, text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| Error::Invalid(format!("merge line {i}: expected 'left right'")))?;
            merges.push((unescape(l)?, unescape(r)?));
        }
        MergeTable::new(language, merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_file_string())?)
    }

    pub fn load(language: &str, path: &Path) -> Result<Self> {
        Self::parse(language, &fs::read_to_string(path)?)
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for (i, c) in s.chars().enumerate() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            ' ' => out.push_str("\\s"),
            '<' if i == 0 => out.push_str("\\<"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            Some('s') => out.push(' '),
            Some('<') => out.push('<'),
            other => return Err(Error::Invalid(format!("bad escape \\{other:?} in {s:?}"))),
        }
    }
    Ok(out)
}

/// Splits text into merge domains. Concatenating the pieces gives back the
/// input exactly.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut runs: Vec<(usize, usize, bool)> = Vec::new();
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        match runs.last_mut() {
            Some((_, end, w)) if *w == ws => *end = i + c.len_utf8(),
            _ => runs.push((i, i + c.len_utf8(), ws)),
        }
    }
    let mut pieces = Vec::with_capacity(runs.len());
    for k in 0..runs.len() {
        let (start, end, ws) = runs[k];
        if ws {
            // hand a trailing plain space to the following word
            let give = k + 1 < runs.len() && text[..end].ends_with(' ');
            let stop = if give { end - 1 } else { end };
            if stop > start {
                pieces.push(&text[start..stop]);
            }
        } else {
            let lead = k > 0 && runs[k - 1].2 && text[..start].ends_with(' ');
            pieces.push(&text[if lead { start - 1 } else { start }..end]);
        }
    }
    pieces
}

/// Learns a vocabulary of at most `target_size` entries by greedily merging
/// the most frequent adjacent pair; ties go to the lexicographically smallest
/// pair. Stops early when no pair occurs at least twice.
pub fn learn<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    target_size: usize,
    language: &str,
) -> Result<(MergeTable, Vocab)> {
    let mut word_counts: HashMap<&str, u64> = HashMap::new();
    for line in lines {
        for p in pretokenize(line) {
            *word_counts.entry(p).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::Empty("BPE corpus has no text".into()));
    }
    let chars: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    let mut vocab = Vocab::base(chars);
    if target_size < vocab.len() {
        return Err(Error::Invalid(format!(
            "target size {target_size} below the {} base symbols",
            vocab.len()
        )));
    }

    let mut words: Vec<(Vec<u32>, u64)> = {
        let mut ws: Vec<_> = word_counts.into_iter().collect();
        ws.sort();
        ws.into_iter()
            .map(|(w, n)| (w.chars().map(|c| vocab.text_ids[&c.to_string()]).collect(), n))
            .collect()
    };
    let mut merges = Vec::new();
    while vocab.len() < target_size {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, n) in &words {
            for pair in syms.windows(2) {
                *counts.entry((pair[0], pair[1])).or_default() += n;
            }
        }
        let text = |id: u32| match &vocab.tokens[id as usize] {
            Token::Text(s) => s.as_str(),
            _ => unreachable!("learning only sees text tokens"),
        };
        let best = counts
            .iter()
            .filter(|(_, &n)| n >= 2)
            .min_by(|(a, na), (b, nb)| nb.cmp(na).then_with(|| (text(a.0), text(a.1)).cmp(&(text(b.0), text(b.1)))));
        let Some((&(l, r), _)) = best else { break };
        let (ls, rs) = (text(l).to_string(), text(r).to_string());
        let merged = vocab.push_text(format!("{ls}{rs}"));
        merges.push((ls, rs));
        for (syms, _) in &mut words {
            merge_pair(syms, l, r, merged);
        }
    }
    Ok((MergeTable::new(language, merges)?, vocab))
}

fn merge_pair(syms: &mut Vec<u32>, l: u32, r: u32, merged: u32) {
    let mut i = 0;
    let mut out = Vec::with_capacity(syms.len());
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
            out.push(merged);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    *syms = out;
}

/// Vocab plus merge ranks, ready to encode.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vocab,
    merges: MergeTable,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl Tokenizer {
    pub fn new(vocab: Vocab, merges: MergeTable) -> Result<Self> {
        let mut ranks = HashMap::new();
        for (rank, (l, r)) in merges.merges().iter().enumerate() {
            let find = |s: &str| vocab.text_id(s).ok_or_else(|| Error::Invalid(format!("merge token {s:?} not in vocab")));
            let (li, ri, mi) = (find(l)?, find(r)?, find(&format!("{l}{r}"))?);
            ranks.insert((li, ri), (rank, mi));
        }
        Ok(Tokenizer { vocab, merges, ranks })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn language(&self) -> &str {
        &self.merges.language
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Token ids of `text` with BOS/EOS around them.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        for piece in pretokenize(text) {
            self.encode_piece(piece, &mut ids);
        }
        ids.push(EOS);
        ids
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = Vec::with_capacity(piece.len());
        let mut buf = [0u8; 4];
        for c in piece.chars() {
            match self.vocab.text_id(c.encode_utf8(&mut buf)) {
                Some(id) => syms.push(id),
                None => syms.extend(c.encode_utf8(&mut buf).bytes().map(|b| BYTE_BASE + b as u32)),
            }
        }
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|&(rank, id)| (rank, i, id)))
                .min();
            let Some((_, i, id)) = best else { break };
            let (l, r) = (syms[i], syms[i + 1]);
            merge_pair(&mut syms, l, r, id);
        }
        out.extend(syms);
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        decode(ids, &self.vocab)
    }

    /// Like [`decode`](Self::decode) but replaces invalid UTF-8, which
    /// sampled byte tokens can produce.
    pub fn decode_lossy(&self, ids: &[u32]) -> Result<String> {
        match decode(ids, &self.vocab) {
            Err(Error::Invalid(_)) => Ok(String::from_utf8_lossy(&decode_bytes(ids, &self.vocab)?).into_owned()),
            r => r,
        }
    }
}

/// Inverse of encoding: specials other than UNK vanish, bytes are
/// reassembled into UTF-8.
pub fn decode(ids: &[u32], vocab: &Vocab) -> Result<String> {
    String::from_utf8(decode_bytes(ids, vocab)?).map_err(|e| Error::Invalid(format!("decoded bytes are not UTF-8: {e}")))
}

fn decode_bytes(ids: &[u32], vocab: &Vocab) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    for &id in ids {
        match vocab.token(id) {
            None => return Err(Error::UnknownId(id)),
            Some(Token::Special(_)) if id == UNK => bytes.extend("\u{FFFD}".as_bytes()),
            Some(Token::Special(_)) => {}
            Some(Token::Byte(b)) => bytes.push(*b),
            Some(Token::Text(s)) => bytes.extend(s.as_bytes()),
        }
    }
    Ok(bytes)
}

/// Encodes with an explicit vocab and merge table.
pub fn encode(text: &str, vocab: &Vocab, merges: &MergeTable) -> Result<Vec<u32>> {
    Ok(Tokenizer::new(vocab.clone(), merges.clone())?.encode(text))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute force: count every adjacent character pair in the raw string.
    fn pair_counts(s: &str) -> HashMap<(char, char), usize> {
        let cs: Vec<char> = s.chars().collect();
        let mut m = HashMap::new();
        for w in cs.windows(2) {
            *m.entry((w[0], w[1])).or_default() += 1;
        }
        m
    }

    #[test]
    fn first_merge_matches_pair_count_oracle() {
        let corpus = "aaabdaaabac";
        let counts = pair_counts(corpus);
        let best = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).unwrap().0;
        assert_eq!(*best, ('a', 'a'));
        let (m, _) = learn([corpus], 1000, "x").unwrap();
        assert_eq!(m.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn zero_budget_learns_nothing() {
        let (_, v0) = learn(["abc abc"], 10_000, "x").unwrap();
        let base = FIRST_TEXT as usize + 4; // a, b, c, space
        assert!(v0.len() > base);
        let (m, v) = learn(["abc abc"], base, "x").unwrap();
        assert!(m.is_empty());
        assert_eq!(v.len(), base);
        assert!(learn(["abc"], base - 2, "x").is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(learn(Vec::<&str>::new(), 500, "x"), Err(Error::Empty(_))));
        assert!(matches!(learn([""], 500, "x"), Err(Error::Empty(_))));
    }

    #[test]
    fn encode_boundaries_and_fallback() {
        let (m, v) = learn(["the cat sat", "the cat ran"], 400, "en").unwrap();
        let tok = Tokenizer::new(v.clone(), m.clone()).unwrap();
        assert_eq!(tok.encode(""), vec![BOS, EOS]);
        assert_eq!(tok.decode(&[BOS, EOS]).unwrap(), "");
        let held_out = "the dog ate ü🙂";
        let ids = tok.encode(held_out);
        assert!(!ids.contains(&UNK));
        assert!(ids.iter().any(|&i| (BYTE_BASE..FIRST_TEXT).contains(&i)));
        assert_eq!(tok.decode(&ids).unwrap(), held_out);
        assert!(matches!(decode(&[99_999], &v), Err(Error::UnknownId(99_999))));
        let stray = [BYTE_BASE + 0xC3, BYTE_BASE + u32::from(b'a')];
        assert!(tok.decode(&stray).is_err());
        assert_eq!(tok.decode_lossy(&stray).unwrap(), "\u{FFFD}a");
        assert_eq!(encode("the cat", &v, &m).unwrap(), tok.encode("the cat"));
    }

    #[test]
    fn pretokenize_is_lossless() {
        for s in ["a b", "  lead", "trail  ", "a\t b\n\nc", "", " ", "x  y"] {
            assert_eq!(pretokenize(s).concat(), s);
        }
        assert_eq!(pretokenize("a b  c"), vec!["a", " b", " ", " c"]);
    }

    #[test]
    fn files_round_trip() {
        let corpus = ["<tag> a\\b", "tab\there  two", "<tag> again"];
        let (m, v) = learn(corpus, 600, "zz").unwrap();
        let v2 = Vocab::parse(&v.to_file_string()).unwrap();
        let m2 = MergeTable::parse("zz", &m.to_file_string()).unwrap();
        assert_eq!(v, v2);
        assert_eq!(m, m2);
        assert_eq!(v2.to_file_string().lines().count(), v.len());
    }

    #[test]
    fn learning_is_deterministic() {
        let corpus: Vec<String> = (0..50).map(|i| format!("w{} x{} w{}", i % 7, i % 3, i % 5)).collect();
        let a = learn(corpus.iter().map(String::as_str), 500, "d").unwrap();
        let b = learn(corpus.iter().map(String::as_str), 500, "d").unwrap();
        assert_eq!(a, b);
    }
}
