//! Caption text handling: word-level tokenizer over a closed vocabulary,
//! sentence splitting, the four token-reduction strategies, single-sentence
//! sampling and fixed-length padding.
//!
//! Every random choice takes an explicit generator so results depend only on
//! `(input, seed)`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ClipsError, Result};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const BOS_ID: TokenId = 2;
pub const EOS_ID: TokenId = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Punctuation split off the end of a word into its own token.
const TRAILING_PUNCT: [char; 2] = ['.', ','];

/// A word-level vocabulary. Line `i` of a vocabulary file is token `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary whose first four entries must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(ClipsError::invalid(format!("vocabulary entry {i} must be {r}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(ClipsError::invalid(format!("vocabulary entry {i} is not a single word: {t:?}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(ClipsError::invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved tokens followed by `words`, in order, skipping duplicates.
    pub fn with_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        for w in words {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Self::from_tokens(tokens).expect("reserved prefix is present")
    }

    /// The closed vocabulary of the toy scene grammar.
    pub fn toy() -> Self {
        Self::with_words(crate::toy_data::GRAMMAR_WORDS.iter().copied())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    /// Lower-cases, splits on whitespace and peels trailing `.`/`,` into
    /// separate tokens. Unknown words map to [`UNK_ID`].
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let lower = raw.to_lowercase();
            let mut word = lower.as_str();
            let mut trailing = Vec::new();
            while let Some(c) = word.chars().last().filter(|c| TRAILING_PUNCT.contains(c)) {
                trailing.push(c);
                word = &word[..word.len() - c.len_utf8()];
            }
            if !word.is_empty() {
                out.push(self.id(word));
            }
            for c in trailing.iter().rev() {
                out.push(self.id(&c.to_string()));
            }
        }
        out
    }

    /// Inverse of [`tokenize`](Self::tokenize) up to whitespace normalisation.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut s = String::new();
        for &id in ids {
            let w = self.word(id);
            let attach = w.len() == 1 && w.chars().all(|c| TRAILING_PUNCT.contains(&c));
            if !s.is_empty() && !attach {
                s.push(' ');
            }
            s.push_str(w);
        }
        s
    }

    /// Splits a caption into sentences and tokenizes each.
    ///
    /// A sentence ends at a `.` followed by whitespace or the end of the text;
    /// the period belongs to the sentence it closes.
    pub fn split_sentences(&self, text: &str) -> SentenceSplit {
        let mut segments = Vec::new();
        let mut start = 0;
        let mut chars = text.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            let boundary = c == '.' && chars.peek().map_or(true, |(_, n)| n.is_whitespace());
            if boundary {
                let end = i + c.len_utf8();
                let seg = self.tokenize(&text[start..end]);
                if !seg.is_empty() {
                    segments.push(seg);
                }
                start = end;
            }
        }
        let tail = self.tokenize(&text[start..]);
        if !tail.is_empty() {
            segments.push(tail);
        }
        SentenceSplit::new(segments)
    }
}

/// Token ids of a sentence-split caption, one list per sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceSplit {
    segments: Vec<Vec<TokenId>>,
    source_len: usize,
}

impl SentenceSplit {
    /// Empty segments are dropped.
    pub fn new(segments: Vec<Vec<TokenId>>) -> Self {
        let segments: Vec<_> = segments.into_iter().filter(|s| !s.is_empty()).collect();
        let source_len = segments.iter().map(Vec::len).sum();
        Self { segments, source_len }
    }

    pub fn segments(&self) -> &[Vec<TokenId>] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn concat(&self) -> Vec<TokenId> {
        self.segments.concat()
    }
}

/// A fixed-capacity token sequence; positions at or after `valid_len` hold [`PAD_ID`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    valid_len: usize,
}

impl TokenSequence {
    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn valid(&self) -> &[TokenId] {
        &self.ids[..self.valid_len]
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Checks the id range against a vocabulary size.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            Some(id) => Err(ClipsError::invalid(format!("token id {id} outside vocabulary of {vocab_size}"))),
            None => Ok(()),
        }
    }

    /// Replaces the id at a position. Intended for probes and tests.
    pub fn with_id(mut self, pos: usize, id: TokenId) -> Self {
        self.ids[pos] = id;
        self
    }
}

/// Truncates to `max_len` or right-pads with `pad_id`.
pub fn pad_to_length(seq: &[TokenId], max_len: usize, pad_id: TokenId) -> TokenSequence {
    let valid_len = seq.len().min(max_len);
    let mut ids = seq[..valid_len].to_vec();
    ids.resize(max_len, pad_id);
    TokenSequence { ids, valid_len }
}

/// The first `min(l, K)` tokens.
pub fn truncate(seq: &[TokenId], l: usize) -> Vec<TokenId> {
    seq[..l.min(seq.len())].to_vec()
}

/// Sorted positions of a uniform size-`min(l, k)` subset of `0..k`.
pub fn random_mask_positions<R: Rng + ?Sized>(k: usize, l: usize, rng: &mut R) -> Vec<usize> {
    let m = l.min(k);
    let mut pos = index::sample(rng, k, m).into_vec();
    pos.sort_unstable();
    pos
}

/// `min(l, K)` tokens sampled without replacement, kept in source order.
pub fn random_mask<R: Rng + ?Sized>(seq: &[TokenId], l: usize, rng: &mut R) -> Vec<TokenId> {
    random_mask_positions(seq.len(), l, rng).into_iter().map(|p| seq[p]).collect()
}

/// Uniform start offset in `[0, k - min(l, k)]`.
pub fn block_mask_start<R: Rng + ?Sized>(k: usize, l: usize, rng: &mut R) -> usize {
    let m = l.min(k);
    rng.gen_range(0..=k - m)
}

/// A contiguous run of `min(l, K)` tokens at a uniform start.
pub fn block_mask<R: Rng + ?Sized>(seq: &[TokenId], l: usize, rng: &mut R) -> Vec<TokenId> {
    let m = l.min(seq.len());
    let s = block_mask_start(seq.len(), l, rng);
    seq[s..s + m].to_vec()
}

/// Result of a sub-caption draw: the tokens and the order sentences were drawn in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubcaptionTrace {
    pub tokens: Vec<TokenId>,
    pub drawn: Vec<usize>,
}

/// Sentence-level reduction to at most `l` tokens.
///
/// Sentences are drawn without replacement and appended until the running
/// length reaches `l` (the result is then cut to exactly `l`) or every
/// sentence has been used.
pub fn subcaption_mask_trace<R: Rng + ?Sized>(split: &SentenceSplit, l: usize, rng: &mut R) -> SubcaptionTrace {
    let mut remaining: Vec<usize> = (0..split.len()).collect();
    let mut tokens = Vec::new();
    let mut drawn = Vec::new();
    if l == 0 {
        return SubcaptionTrace { tokens, drawn };
    }
    while !remaining.is_empty() {
        let pick = remaining.remove(rng.gen_range(0..remaining.len()));
        drawn.push(pick);
        tokens.extend_from_slice(&split.segments[pick]);
        if tokens.len() >= l {
            tokens.truncate(l);
            break;
        }
    }
    SubcaptionTrace { tokens, drawn }
}

pub fn subcaption_mask<R: Rng + ?Sized>(split: &SentenceSplit, l: usize, rng: &mut R) -> Vec<TokenId> {
    subcaption_mask_trace(split, l, rng).tokens
}

/// Index of one uniformly drawn sentence.
pub fn sample_single_index<R: Rng + ?Sized>(split: &SentenceSplit, rng: &mut R) -> usize {
    assert!(!split.is_empty(), "cannot sample from an empty split");
    rng.gen_range(0..split.len())
}

/// The tokens of one uniformly drawn sentence.
pub fn sample_single_subcaption<R: Rng + ?Sized>(split: &SentenceSplit, rng: &mut R) -> Vec<TokenId> {
    split.segments[sample_single_index(split, rng)].clone()
}

/// How the synthetic caption is shortened before it reaches the text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "length")]
pub enum Reduction {
    /// The whole caption (cut only by the encoder capacity).
    Full,
    /// One uniformly drawn sentence.
    SingleSentence,
    Truncate(usize),
    RandomMask(usize),
    BlockMask(usize),
    SubCaption(usize),
}

impl Reduction {
    pub fn apply<R: Rng + ?Sized>(&self, split: &SentenceSplit, rng: &mut R) -> Vec<TokenId> {
        match *self {
            Reduction::Full => split.concat(),
            Reduction::SingleSentence => sample_single_subcaption(split, rng),
            Reduction::Truncate(l) => truncate(&split.concat(), l),
            Reduction::RandomMask(l) => random_mask(&split.concat(), l, rng),
            Reduction::BlockMask(l) => block_mask(&split.concat(), l, rng),
            Reduction::SubCaption(l) => subcaption_mask(split, l, rng),
        }
    }

    /// Parses `full`, `single_sentence`, or `<strategy>:<length>`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, len) = match s.split_once(':') {
            Some((n, l)) => {
                let l = l
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| ClipsError::config(format!("bad reduction length in {s:?}")))?;
                (n.trim(), Some(l))
            }
            None => (s.trim(), None),
        };
        Self::from_parts(name, len)
    }

    pub fn from_parts(name: &str, len: Option<usize>) -> Result<Self> {
        let need = |len: Option<usize>| len.ok_or_else(|| ClipsError::config(format!("strategy {name} needs a length")));
        Ok(match name {
            "full" | "none" => Reduction::Full,
            "single_sentence" | "single" => Reduction::SingleSentence,
            "truncate" | "truncation" => Reduction::Truncate(need(len)?),
            "random_mask" | "random" => Reduction::RandomMask(need(len)?),
            "block_mask" | "block" => Reduction::BlockMask(need(len)?),
            "subcaption" | "sub_caption" | "subcaption_mask" => Reduction::SubCaption(need(len)?),
            other => return Err(ClipsError::config(format!("unknown reduction strategy {other:?}"))),
        })
    }

    /// Strategy name without the length.
    pub fn name(&self) -> &'static str {
        match self {
            Reduction::Full => "full",
            Reduction::SingleSentence => "single_sentence",
            Reduction::Truncate(_) => "truncate",
            Reduction::RandomMask(_) => "random_mask",
            Reduction::BlockMask(_) => "block_mask",
            Reduction::SubCaption(_) => "subcaption",
        }
    }

    pub fn length(&self) -> Option<usize> {
        match *self {
            Reduction::Truncate(l) | Reduction::RandomMask(l) | Reduction::BlockMask(l) | Reduction::SubCaption(l) => {
                Some(l)
            }
            Reduction::Full | Reduction::SingleSentence => None,
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.length() {
            Some(l) => write!(f, "{}:{l}", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn tokenize_basics() {
        let v = Vocab::toy();
        assert!(v.tokenize("").is_empty());
        let ids = v.tokenize("a dog runs");
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&i| (i as usize) < v.len()));
        // "dog" and "runs" are outside the closed vocabulary
        assert_eq!(&ids[1..], &[UNK_ID, UNK_ID]);
        assert_eq!(v.tokenize("A Red circle."), vec![v.id("a"), v.id("red"), v.id("circle"), v.id(".")]);
    }

    #[test]
    fn detokenize_attaches_punctuation() {
        let v = Vocab::toy();
        let ids = v.tokenize("the background is  gray .   a red circle.");
        assert_eq!(v.detokenize(&ids), "the background is gray. a red circle.");
        assert_eq!(v.tokenize(&v.detokenize(&ids)), ids);
    }

    #[test]
    fn vocabulary_requires_reserved_prefix() {
        assert!(Vocab::from_tokens(vec!["a".into()]).is_err());
        let mut t: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        t.push("x".into());
        t.push("x".into());
        assert!(Vocab::from_tokens(t).is_err());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocab::toy();
        v.save(&p).unwrap();
        let back = Vocab::load(&p).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.id("circle"), v.id("circle"));
        assert_eq!(back.word(0), "<pad>");
        assert_eq!(back.word(3), "<eos>");
    }

    #[test]
    fn split_sentences_cases() {
        let v = Vocab::toy();
        let s = v.split_sentences("A dog. A cat.");
        assert_eq!(s.len(), 2);
        let s = v.split_sentences("no period here");
        assert_eq!(s.len(), 1);
        assert_eq!(s.segments()[0], v.tokenize("no period here"));
        let text = "X. Y. Z.";
        let s = v.split_sentences(text);
        assert_eq!(s.len(), 3);
        assert_eq!(s.concat(), v.tokenize(text));
        assert_eq!(s.source_len(), v.tokenize(text).len());
        // no boundary inside a word
        let s = v.split_sentences("3.5 red.");
        assert_eq!(s.len(), 1);
        assert!(v.split_sentences("").is_empty());
    }

    #[test]
    fn truncate_examples() {
        assert_eq!(truncate(&[5, 9, 2, 7], 2), vec![5, 9]);
        assert_eq!(truncate(&[5, 9], 8), vec![5, 9]);
        let seq: Vec<TokenId> = (0..128).map(|i| (i * 7 % 50) as TokenId).collect();
        assert_eq!(truncate(&seq, 32), seq[..32].to_vec());
    }

    #[test]
    fn random_mask_examples() {
        assert_eq!(random_mask(&[4, 5, 6, 7], 4, &mut rng(1)), vec![4, 5, 6, 7]);
        let seq: Vec<TokenId> = (1..=128).collect();
        let out = random_mask(&seq, 32, &mut rng(3));
        assert_eq!(out.len(), 32);
        assert!(out.windows(2).all(|w| w[0] < w[1]));
        let differ = (0..10u64).any(|s| random_mask(&seq, 32, &mut rng(2 * s)) != random_mask(&seq, 32, &mut rng(2 * s + 1)));
        assert!(differ);
    }

    #[test]
    fn block_mask_examples() {
        assert_eq!(block_mask(&[1, 2, 3, 4], 4, &mut rng(0)), vec![1, 2, 3, 4]);
        assert_eq!(block_mask(&[1, 2], 8, &mut rng(0)), vec![1, 2]);
        let seq: Vec<TokenId> = (0..128).collect();
        for s in 0..100 {
            let out = block_mask(&seq, 32, &mut rng(s));
            let start = out[0] as usize;
            assert!(start <= 96);
            assert_eq!(out, seq[start..start + 32].to_vec());
        }
    }

    #[test]
    fn subcaption_examples() {
        let one = SentenceSplit::new(vec![(0..40).collect()]);
        assert_eq!(subcaption_mask(&one, 32, &mut rng(0)), (0..32).collect::<Vec<_>>());
        let three = SentenceSplit::new(vec![(0..10).collect(), (10..20).collect(), (20..30).collect()]);
        let t = subcaption_mask_trace(&three, 32, &mut rng(5));
        assert_eq!(t.tokens.len(), 30);
        let mut sorted = t.drawn.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
        let expect: Vec<TokenId> = t.drawn.iter().flat_map(|&i| three.segments()[i].clone()).collect();
        assert_eq!(t.tokens, expect);
        let small = SentenceSplit::new(vec![vec![1, 2, 3, 4, 5]]);
        assert_eq!(subcaption_mask(&small, 32, &mut rng(9)), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn subcaption_exact_length_takes_truncation_branch() {
        // |S_i| == L stops after one sentence
        let split = SentenceSplit::new(vec![vec![1; 8], vec![2; 8]]);
        let t = subcaption_mask_trace(&split, 8, &mut rng(4));
        assert_eq!(t.drawn.len(), 1);
        assert_eq!(t.tokens.len(), 8);
    }

    #[test]
    fn single_subcaption_examples() {
        let one = SentenceSplit::new(vec![vec![7, 8, 9]]);
        assert_eq!(sample_single_subcaption(&one, &mut rng(0)), vec![7, 8, 9]);
        let three = SentenceSplit::new(vec![vec![1], vec![2, 2], vec![3, 3, 3]]);
        let mut counts = [0usize; 3];
        let mut r = rng(11);
        for _ in 0..300 {
            let s = sample_single_subcaption(&three, &mut r);
            let i = three.segments().iter().position(|seg| *seg == s).expect("whole segment");
            counts[i] += 1;
        }
        for c in counts {
            let f = c as f64 / 300.0;
            assert!((f - 1.0 / 3.0).abs() <= 0.1, "frequency {f}");
        }
    }

    #[test]
    fn pad_examples() {
        let p = pad_to_length(&[5, 6, 7, 8, 9], 8, PAD_ID);
        assert_eq!(p.valid_len(), 5);
        assert_eq!(&p.ids()[5..], &[PAD_ID; 3]);
        let eighty: Vec<TokenId> = (0..80).map(|i| 4 + i % 40).collect();
        let p = pad_to_length(&eighty, 80, PAD_ID);
        assert_eq!(p.valid_len(), 80);
        assert_eq!(p.ids(), &eighty[..]);
        let hundred: Vec<TokenId> = (0..100).map(|i| 4 + i % 40).collect();
        let p = pad_to_length(&hundred, 80, PAD_ID);
        assert_eq!(p.ids(), &hundred[..80]);
        assert!(p.check_vocab(44).is_ok());
        assert!(p.check_vocab(10).is_err());
    }

    #[test]
    fn reduction_parse_and_display() {
        for s in ["full", "single_sentence", "truncate:32", "random_mask:16", "block_mask:8", "subcaption:64"] {
            assert_eq!(Reduction::parse(s).unwrap().to_string(), s);
        }
        assert!(Reduction::parse("truncate").is_err());
        assert!(Reduction::parse("syntax:32").is_err());
    }
}
