//! Corpora, vocabularies, synthetic tasks and padded batches.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Mask;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// Vocabulary holding only the reserved entries.
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for tok in RESERVED {
            v.insert(tok);
        }
        v
    }

    fn insert(&mut self, tok: &str) -> usize {
        if let Some(&id) = self.index.get(tok) {
            return id;
        }
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    /// Content tokens in order of first appearance.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new();
        for t in tokens {
            v.insert(t);
        }
        v
    }

    /// Shared source/target vocabulary over a corpus.
    pub fn from_corpus(corpus: &ParallelCorpus) -> Self {
        Self::from_tokens(
            corpus
                .pairs
                .iter()
                .flat_map(|(s, t)| s.iter().chain(t.iter()))
                .map(String::as_str),
        )
    }

    /// Vocabulary of the synthetic tasks: content id `i` is spelled `"i"`.
    pub fn synthetic(vocab_size: usize) -> Self {
        let mut v = Self::new();
        for id in RESERVED.len()..vocab_size {
            v.insert(&id.to_string());
        }
        v
    }

    /// Reads a vocabulary file: one content token per line, ids offset by the
    /// reserved count.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut v = Self::new();
        for (n, line) in text.lines().enumerate() {
            let tok = line.trim();
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Input(format!("vocab line {}: invalid token {line:?}", n + 1)));
            }
            if v.index.contains_key(tok) {
                return Err(Error::Input(format!("vocab line {}: duplicate token {tok:?}", n + 1)));
            }
            v.insert(tok);
        }
        Ok(v)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for tok in &self.tokens[RESERVED.len()..] {
            s.push_str(tok);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens, dropping reserved ids other than UNK.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).to_string())
            .collect()
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
    pub split: Split,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Splits off the last `n` pairs.
    pub fn split_off(&mut self, n: usize, split: Split) -> ParallelCorpus {
        let at = self.pairs.len().saturating_sub(n);
        ParallelCorpus {
            pairs: self.pairs.split_off(at),
            split,
        }
    }
}

pub fn parse_parallel_tsv(text: &str, split: Split) -> Result<ParallelCorpus> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Input(format!(
                "line {}: expected exactly one TAB, found {}",
                n + 1,
                fields.len() - 1
            )));
        }
        let (src, tgt) = (tokenize(fields[0]), tokenize(fields[1]));
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Input(format!("line {}: empty source or target", n + 1)));
        }
        pairs.push((src, tgt));
    }
    Ok(ParallelCorpus { pairs, split })
}

pub fn load_parallel_tsv(path: &Path, split: Split) -> Result<ParallelCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corpus = parse_parallel_tsv(&text, split)?;
    if corpus.is_empty() {
        log::warn!("{}: no sentence pairs", path.display());
    }
    Ok(corpus)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    DigitMap,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "digit_map" | "digit-map" => Ok(TaskKind::DigitMap),
            other => Err(Error::Config(format!(
                "unknown synthetic task `{other}` (expected copy, reverse or digit_map)"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::DigitMap => "digit_map",
        })
    }
}

/// Permutation over content ids used by the `digit_map` task; entries at
/// reserved ids map to themselves.
pub fn digit_map_bijection(vocab_size: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5167_6d61_7000_0000);
    let mut content: Vec<usize> = (RESERVED.len()..vocab_size).collect();
    content.shuffle(&mut rng);
    (0..RESERVED.len()).chain(content).collect()
}

fn check_synth(min_len: usize, max_len: usize, vocab_size: usize) -> Result<()> {
    if vocab_size < 5 {
        return Err(Error::Config(format!("synthetic vocab_size must be >= 5, got {vocab_size}")));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::Config(format!(
            "synthetic lengths need 1 <= min_len <= max_len, got {min_len}..{max_len}"
        )));
    }
    Ok(())
}

/// Generates a deterministic synthetic parallel corpus.
pub fn synth_task(
    kind: TaskKind,
    n_pairs: usize,
    min_len: usize,
    max_len: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    check_synth(min_len, max_len, vocab_size)?;
    let sigma = digit_map_bijection(vocab_size, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n_pairs)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            let src: Vec<usize> = (0..len)
                .map(|_| rng.random_range(RESERVED.len()..vocab_size))
                .collect();
            let tgt: Vec<usize> = match kind {
                TaskKind::Copy => src.clone(),
                TaskKind::Reverse => src.iter().rev().copied().collect(),
                TaskKind::DigitMap => src.iter().map(|&t| sigma[t]).collect(),
            };
            let spell = |v: Vec<usize>| v.into_iter().map(|t| t.to_string()).collect();
            (spell(src), spell(tgt))
        })
        .collect();
    Ok(ParallelCorpus {
        pairs,
        split: Split::Train,
    })
}

/// Train/valid/test splits drawn from one synthetic stream.
pub fn synth_splits(
    kind: TaskKind,
    sizes: [usize; 3],
    min_len: usize,
    max_len: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<[ParallelCorpus; 3]> {
    let mut train = synth_task(kind, sizes.iter().sum(), min_len, max_len, vocab_size, seed)?;
    let test = train.split_off(sizes[2], Split::Test);
    let valid = train.split_off(sizes[1], Split::Valid);
    Ok([train, valid, test])
}

/// Padded batch. Id matrices are row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src_ids: Vec<usize>,
    pub tgt_in_ids: Vec<usize>,
    pub tgt_out_ids: Vec<usize>,
    pub src_mask: Mask,
    pub tgt_mask: Mask,
    /// Corpus index of each row.
    pub pair_indices: Vec<usize>,
}

impl Batch {
    /// Builds a batch from already encoded `(source, target)` id sequences.
    pub fn from_ids(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<Batch> {
        if pairs.is_empty() {
            return Err(Error::Input("cannot build an empty batch".into()));
        }
        let size = pairs.len();
        let src_len = pairs.iter().map(|p| p.0.len()).max().unwrap_or(0);
        let tgt_len = pairs.iter().map(|p| p.1.len() + 1).max().unwrap_or(1);
        let mut src_ids = vec![PAD; size * src_len];
        let mut tgt_in_ids = vec![PAD; size * tgt_len];
        let mut tgt_out_ids = vec![PAD; size * tgt_len];
        for (r, (src, tgt)) in pairs.iter().enumerate() {
            src_ids[r * src_len..r * src_len + src.len()].copy_from_slice(src);
            tgt_in_ids[r * tgt_len] = BOS;
            tgt_in_ids[r * tgt_len + 1..r * tgt_len + 1 + tgt.len()].copy_from_slice(tgt);
            tgt_out_ids[r * tgt_len..r * tgt_len + tgt.len()].copy_from_slice(tgt);
            tgt_out_ids[r * tgt_len + tgt.len()] = EOS;
        }
        let src_mask = Mask::new(&[size, src_len], src_ids.iter().map(|&t| t != PAD).collect())?;
        let tgt_mask = Mask::new(&[size, tgt_len], tgt_in_ids.iter().map(|&t| t != PAD).collect())?;
        Ok(Batch {
            size,
            src_len,
            tgt_len,
            src_ids,
            tgt_in_ids,
            tgt_out_ids,
            src_mask,
            tgt_mask,
            pair_indices: (0..size).collect(),
        })
    }
}

/// Splits `corpus` into padded batches. With a shuffle seed the pair order is
/// a seeded permutation; otherwise corpus order is kept.
pub fn batchify(
    corpus: &ParallelCorpus,
    batch_size: usize,
    vocab: &Vocab,
    shuffle_seed: Option<u64>,
    max_len: usize,
) -> Result<Vec<Batch>> {
    if corpus.is_empty() {
        return Err(Error::Input("cannot batch an empty corpus".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let encoded: Vec<(Vec<usize>, Vec<usize>)> = corpus
        .pairs
        .iter()
        .enumerate()
        .map(|(i, (s, t))| {
            if s.len() > max_len || t.len() + 1 > max_len {
                return Err(Error::Input(format!(
                    "pair {i} (source {} / target {} tokens) exceeds max_len {max_len}",
                    s.len(),
                    t.len()
                )));
            }
            Ok((vocab.encode(s), vocab.encode(t)))
        })
        .collect::<Result<_>>()?;
    order
        .chunks(batch_size)
        .map(|chunk| {
            let rows: Vec<_> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            let mut b = Batch::from_ids(&rows)?;
            b.pair_indices = chunk.to_vec();
            Ok(b)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(pairs: &[(&str, &str)]) -> ParallelCorpus {
        ParallelCorpus {
            pairs: pairs.iter().map(|(s, t)| (tokenize(s), tokenize(t))).collect(),
            split: Split::Train,
        }
    }

    #[test]
    fn tsv_single_pair() {
        let c = parse_parallel_tsv("a b\tc d\n", Split::Train).unwrap();
        assert_eq!(c.pairs, vec![(tokenize("a b"), tokenize("c d"))]);
    }

    #[test]
    fn tsv_two_tabs_names_line() {
        let err = parse_parallel_tsv("a\tb\nx\ty\tz\n", Split::Train).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn tsv_missing_side_rejected() {
        let err = parse_parallel_tsv("a\t \n", Split::Train).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn tsv_empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tsv");
        fs::write(&path, "").unwrap();
        assert!(load_parallel_tsv(&path, Split::Test).unwrap().is_empty());
        assert!(matches!(
            load_parallel_tsv(&dir.path().join("missing.tsv"), Split::Test),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn synth_kinds() {
        let c = synth_task(TaskKind::Copy, 20, 2, 5, 10, 3).unwrap();
        assert!(c.pairs.iter().all(|(s, t)| s == t));
        let r = synth_task(TaskKind::Reverse, 20, 2, 5, 10, 3).unwrap();
        for (s, t) in &r.pairs {
            let rev: Vec<_> = s.iter().rev().cloned().collect();
            assert_eq!(&rev, t);
        }
        // Same seed, same sources across kinds.
        assert_eq!(c.pairs[0].0, r.pairs[0].0);
    }

    #[test]
    fn digit_map_is_invertible() {
        let sigma = digit_map_bijection(12, 9);
        let mut inv = [usize::MAX; 12];
        for (i, &s) in sigma.iter().enumerate() {
            inv[s] = i;
        }
        assert!(inv.iter().all(|&i| i != usize::MAX));
        assert_eq!(&sigma[..4], &[0, 1, 2, 3]);
        let c = synth_task(TaskKind::DigitMap, 30, 1, 4, 12, 9).unwrap();
        for (s, t) in &c.pairs {
            let back: Vec<String> = t
                .iter()
                .map(|tok| inv[tok.parse::<usize>().unwrap()].to_string())
                .collect();
            assert_eq!(&back, s);
        }
    }

    #[test]
    fn synth_rejects_bad_config() {
        assert!(synth_task(TaskKind::Copy, 1, 1, 2, 4, 0).is_err());
        assert!(synth_task(TaskKind::Copy, 1, 3, 2, 8, 0).is_err());
    }

    #[test]
    fn synth_vocab_never_emits_reserved() {
        let c = synth_task(TaskKind::DigitMap, 200, 1, 6, 8, 1).unwrap();
        let v = Vocab::synthetic(8);
        for (s, t) in &c.pairs {
            for id in v.encode(s).into_iter().chain(v.encode(t)) {
                assert!(id >= RESERVED.len() && id < 8);
            }
        }
    }

    #[test]
    fn batch_padding_and_shift() {
        let c = corpus(&[("a b c", "x y"), ("a b c d e", "x")]);
        let v = Vocab::from_corpus(&c);
        let batches = batchify(&c, 8, &v, None, 16).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.src_len, 5);
        assert_eq!(&b.src_mask.data()[..5], &[true, true, true, false, false]);
        let (x, y) = (v.id("x"), v.id("y"));
        assert_eq!(&b.tgt_in_ids[..3], &[BOS, x, y]);
        assert_eq!(&b.tgt_out_ids[..3], &[x, y, EOS]);
        for (m, id) in b.src_mask.data().iter().zip(&b.src_ids) {
            assert_eq!(*m, *id != PAD);
        }
    }

    #[test]
    fn batch_over_max_len_names_pair() {
        let c = corpus(&[("a", "b"), ("a b c d", "b")]);
        let v = Vocab::from_corpus(&c);
        let err = batchify(&c, 2, &v, None, 3).unwrap_err();
        assert!(err.to_string().contains("pair 1"), "{err}");
    }

    #[test]
    fn vocab_file_roundtrip() {
        let c = corpus(&[("a b", "c a")]);
        let v = Vocab::from_corpus(&c);
        assert_eq!(v.id("a"), 4);
        let back = Vocab::parse(&v.to_file_string()).unwrap();
        assert_eq!(back, v);
        assert_eq!(v.id("zzz"), UNK);
    }
}
