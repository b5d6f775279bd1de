//! Byte-pair-encoding subword tokenizer.
//!
//! Words are whitespace-split and each word is followed by a standalone
//! end-of-word symbol `</w>`. Merges only ever join symbols inside a word,
//! so `</w>` survives as its own token and decoding is a plain
//! concatenation with `</w>` turned back into a space.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
pub const END_OF_WORD: &str = "</w>";

const MAGIC: &str = "BPEV1";
const MERGES_SENTINEL: &str = "#MERGES";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot train a vocabulary on an empty corpus")]
    EmptyCorpus,
    #[error("target vocabulary size {target} too small for {chars} characters (need more than {})", chars + 4)]
    TargetTooSmall { target: usize, chars: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("malformed vocabulary file: {0}")]
    Format(String),
    #[error("vocabulary i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    index: HashMap<String, u32>,
    /// (left id, right id) -> (rank, merged id)
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
}

/// Fixed-length encoded sequence. `mask[i] == 1` marks a real token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

impl TokenSequence {
    /// Number of unmasked positions, [CLS] and [SEP] included.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Unmasked ids that are not one of the four specials.
    pub fn content_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.ids
            .iter()
            .zip(&self.mask)
            .filter(|&(&id, &m)| m == 1 && id >= SPECIALS.len() as u32)
            .map(|(&id, _)| id)
    }
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    left: String,
    right: String,
    pair: (u32, u32),
}

impl Ord for Candidate {
    // Max-heap: higher count first, then the lexicographically smaller pair.
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| (&other.left, &other.right).cmp(&(&self.left, &self.right)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn pairs_of(symbols: &[u32]) -> impl Iterator<Item = (u32, u32)> + '_ {
    symbols.windows(2).map(|w| (w[0], w[1]))
}

fn merge_pair(symbols: &[u32], pair: (u32, u32), merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

/// Greedy BPE: merge the most frequent adjacent pair (ties to the
/// lexicographically smaller `(left, right)`) until the vocabulary reaches
/// `target_vocab_size` or no pair occurs at least twice.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_vocab_size: usize) -> Result<SubwordVocab> {
    let mut word_freq: BTreeMap<&str, i64> = BTreeMap::new();
    for text in corpus {
        for w in text.as_ref().split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let chars: BTreeSet<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
    if target_vocab_size <= chars.len() + SPECIALS.len() {
        return Err(TokenizerError::TargetTooSmall {
            target: target_vocab_size,
            chars: chars.len(),
        });
    }

    let mut vocab = SubwordVocab::with_base(chars.iter().map(|c| c.to_string()));
    let mut words: Vec<(Vec<u32>, i64)> = word_freq
        .iter()
        .map(|(w, &f)| (w.chars().map(|c| vocab.index[&c.to_string()]).collect(), f))
        .collect();

    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut occurs_in: HashMap<(u32, u32), BTreeSet<usize>> = HashMap::new();
    for (wi, (syms, f)) in words.iter().enumerate() {
        for p in pairs_of(syms) {
            *counts.entry(p).or_default() += f;
            occurs_in.entry(p).or_default().insert(wi);
        }
    }
    let mut heap: BinaryHeap<Candidate> = counts
        .iter()
        .map(|(&pair, &count)| vocab.candidate(pair, count))
        .collect();

    while vocab.tokens.len() < target_vocab_size {
        let Some(best) = heap.pop() else { break };
        let current = counts.get(&best.pair).copied().unwrap_or(0);
        if current != best.count {
            continue; // stale entry
        }
        if current < 2 {
            break;
        }
        let merged_str = format!("{}{}", best.left, best.right);
        let merged = vocab.intern(&merged_str);
        let rank = vocab.merges.len();
        vocab.merges.push((best.left, best.right));
        vocab.merge_rank.insert(best.pair, (rank, merged));

        let mut touched = BTreeSet::new();
        let affected = occurs_in.remove(&best.pair).unwrap_or_default();
        for wi in affected {
            let (syms, f) = &words[wi];
            if !pairs_of(syms).any(|p| p == best.pair) {
                continue;
            }
            let f = *f;
            for p in pairs_of(syms) {
                *counts.get_mut(&p).unwrap() -= f;
                touched.insert(p);
            }
            let new_syms = merge_pair(syms, best.pair, merged);
            for p in pairs_of(&new_syms) {
                *counts.entry(p).or_default() += f;
                occurs_in.entry(p).or_default().insert(wi);
                touched.insert(p);
            }
            words[wi].0 = new_syms;
        }
        for p in touched {
            let c = counts[&p];
            if c > 0 {
                heap.push(vocab.candidate(p, c));
            }
        }
    }
    Ok(vocab)
}

impl SubwordVocab {
    fn with_base(chars: impl Iterator<Item = String>) -> Self {
        let mut vocab = SubwordVocab {
            tokens: Vec::new(),
            merges: Vec::new(),
            index: HashMap::new(),
            merge_rank: HashMap::new(),
        };
        for s in SPECIALS {
            vocab.intern(s);
        }
        vocab.intern(END_OF_WORD);
        for c in chars {
            vocab.intern(&c);
        }
        vocab
    }

    fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    fn candidate(&self, pair: (u32, u32), count: i64) -> Candidate {
        Candidate {
            count,
            left: self.tokens[pair.0 as usize].clone(),
            right: self.tokens[pair.1 as usize].clone(),
            pair,
        }
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

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn end_of_word(&self) -> u32 {
        self.index[END_OF_WORD]
    }

    /// Subword ids for one word, without the end-of-word symbol.
    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = word
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.index.get(c.encode_utf8(&mut buf) as &str).copied().unwrap_or(UNK)
            })
            .collect();
        loop {
            let best = pairs_of(&syms)
                .enumerate()
                .filter_map(|(pos, p)| self.merge_rank.get(&p).map(|&(rank, id)| (rank, pos, id)))
                .min();
            let Some((_, pos, id)) = best else { break };
            syms[pos] = id;
            syms.remove(pos + 1);
        }
        out.extend(syms);
    }

    /// Subword ids for a whole text, with `</w>` after every word, no specials.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let eow = self.end_of_word();
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            self.encode_word(w, &mut out);
            out.push(eow);
        }
        out
    }

    pub fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 2, "max_len must be at least 2");
        let mut body = self.tokenize(text);
        body.truncate(max_len - 2);
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(body);
        ids.push(SEP);
        let used = ids.len();
        ids.resize(max_len, PAD);
        let mut mask = vec![1u8; used];
        mask.resize(max_len, 0);
        TokenSequence { ids, mask }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.len(),
            })?;
            if (id as usize) < SPECIALS.len() {
                continue;
            }
            if tok == END_OF_WORD {
                out.push(' ');
            } else {
                out.push_str(tok);
            }
        }
        Ok(out.trim_end().to_string())
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = String::from(MAGIC);
        s.push('\n');
        for t in &self.tokens {
            if t == MERGES_SENTINEL {
                return Err(TokenizerError::Format(format!(
                    "token `{t}` collides with the merge sentinel"
                )));
            }
            s.push_str(t);
            s.push('\n');
        }
        s.push_str(MERGES_SENTINEL);
        s.push('\n');
        for (l, r) in &self.merges {
            s.push_str(l);
            s.push(' ');
            s.push_str(r);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(TokenizerError::Format("missing BPEV1 magic line".into()));
        }
        let mut vocab = SubwordVocab {
            tokens: Vec::new(),
            merges: Vec::new(),
            index: HashMap::new(),
            merge_rank: HashMap::new(),
        };
        let mut saw_sentinel = false;
        for line in lines.by_ref() {
            if line == MERGES_SENTINEL {
                saw_sentinel = true;
                break;
            }
            if vocab.index.contains_key(line) {
                return Err(TokenizerError::Format(format!("duplicate token `{line}`")));
            }
            vocab.intern(line);
        }
        if !saw_sentinel {
            return Err(TokenizerError::Format("missing #MERGES sentinel".into()));
        }
        if vocab.tokens.len() < SPECIALS.len() + 1
            || vocab.tokens[..SPECIALS.len()] != SPECIALS
            || !vocab.index.contains_key(END_OF_WORD)
        {
            return Err(TokenizerError::Format("special tokens missing or out of order".into()));
        }
        for line in lines {
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| TokenizerError::Format(format!("bad merge line `{line}`")))?;
            let lookup = |t: &str| {
                vocab
                    .id(t)
                    .ok_or_else(|| TokenizerError::Format(format!("merge uses unknown token `{t}`")))
            };
            let (li, ri) = (lookup(l)?, lookup(r)?);
            let mi = lookup(&format!("{l}{r}"))?;
            let rank = vocab.merges.len();
            vocab.merge_rank.insert((li, ri), (rank, mi));
            vocab.merges.push((l.to_string(), r.to_string()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_merge_prefers_most_frequent_pair() {
        let v = train_bpe(&["aa ab aa"], 10).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "a".to_string()));
        // ("a","b") occurs once, so training stops after one merge
        assert_eq!(v.merges().len(), 1);
    }

    #[test]
    fn single_character_word() {
        let v = train_bpe(&["x"], 10).unwrap();
        assert_eq!(v.tokens(), &["[PAD]", "[UNK]", "[CLS]", "[SEP]", "</w>", "x"]);
        assert!(v.merges().is_empty());
    }

    #[test]
    fn ties_break_lexicographically() {
        // (b,c) and (a,b) both occur twice
        let v = train_bpe(&["bc ab bc ab"], 20).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "b".to_string()));
        assert_eq!(v.merges()[1], ("b".to_string(), "c".to_string()));
    }

    #[test]
    fn target_size_respected() {
        let corpus = ["the cat sat on the mat with the other cat"];
        let v = train_bpe(&corpus, 22).unwrap();
        assert!(v.len() <= 22 && v.len() > 17);
        assert!(matches!(train_bpe(&corpus, 5), Err(TokenizerError::TargetTooSmall { .. })));
        assert!(matches!(train_bpe::<&str>(&[], 50), Err(TokenizerError::EmptyCorpus)));
        assert!(matches!(train_bpe(&["   "], 50), Err(TokenizerError::EmptyCorpus)));
    }

    #[test]
    fn merged_tokens_are_in_vocab() {
        let v = train_bpe(&["low lower lowest newer wider new"], 40).unwrap();
        for (l, r) in v.merges() {
            assert!(v.id(&format!("{l}{r}")).is_some());
        }
    }

    #[test]
    fn encode_empty_text() {
        let v = train_bpe(&["aa ab aa"], 10).unwrap();
        let s = v.encode("", 8);
        assert_eq!(s.ids, vec![CLS, SEP, PAD, PAD, PAD, PAD, PAD, PAD]);
        assert_eq!(s.mask, vec![1, 1, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn encode_uses_merges() {
        let v = train_bpe(&["aa ab aa"], 10).unwrap();
        let aa = v.id("aa").unwrap();
        let s = v.encode("aa", 6);
        assert_eq!(s.ids, vec![CLS, aa, v.end_of_word(), SEP, PAD, PAD]);
        let ab = v.encode("ab", 6);
        assert_eq!(&ab.ids[1..3], &[v.id("a").unwrap(), v.id("b").unwrap()]);
    }

    #[test]
    fn encode_truncates() {
        let v = train_bpe(&["ab cd ef"], 12).unwrap();
        let s = v.encode("ab cd ef ab cd ef", 5);
        assert_eq!(s.ids.len(), 5);
        assert_eq!(s.ids[0], CLS);
        assert_eq!(s.ids[4], SEP);
        assert!(s.mask.iter().all(|&m| m == 1));
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let v = train_bpe(&["aa ab aa"], 10).unwrap();
        let s = v.encode("z", 5);
        assert_eq!(s.ids[1], UNK);
    }

    #[test]
    fn decode_rules() {
        let v = train_bpe(&["aa ab aa"], 10).unwrap();
        assert_eq!(v.decode(&[CLS, SEP]).unwrap(), "");
        assert_eq!(v.decode(&v.encode("ab aa", 16).ids).unwrap(), "ab aa");
        assert!(matches!(v.decode(&[99]), Err(TokenizerError::IdOutOfRange { id: 99, .. })));
    }

    #[test]
    fn file_round_trip() {
        let v = train_bpe(&["hello world hello there world wide"], 30).unwrap();
        let text = v.to_text().unwrap();
        assert!(text.starts_with("BPEV1\n[PAD]\n[UNK]\n[CLS]\n[SEP]\n"));
        let back = SubwordVocab::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert!(SubwordVocab::from_text("nope\n").is_err());
        assert!(SubwordVocab::from_text("BPEV1\n[PAD]\n").is_err());
    }
}
