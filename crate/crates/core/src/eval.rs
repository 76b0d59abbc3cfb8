//! Corpus BLEU and token accuracy.
//!
//! BLEU uses corpus-level clipped n-gram counts up to 4-grams, uniform
//! weights and the standard brevity penalty. A precision whose match count
//! is zero is smoothed to `1 / (total + 1)`, so scores are only comparable
//! with other scores from this crate.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

use crate::data::{batchify, ParallelCorpus, Vocab, PAD};
use crate::error::{Error, Result};
use crate::numerics::Tape;
use crate::transformer::{argmax, ForwardOptions, Model};

pub const MAX_NGRAM: usize = 4;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level clipped n-gram matches and hypothesis n-gram total.
pub fn modified_precision<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], n: usize) -> (usize, usize) {
    let mut matches = 0;
    let mut total = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let rc = ngram_counts(r, n);
        for (gram, count) in ngram_counts(h, n) {
            matches += count.min(rc.get(gram).copied().unwrap_or(0));
            total += count;
        }
    }
    (matches, total)
}

/// `exp(1 − r/c)` when the hypothesis length `c` is below the reference
/// length `r`, otherwise 1.
pub fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Corpus BLEU-4 on a 0–100 scale.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Input("BLEU over an empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_NGRAM {
        let (m, t) = modified_precision(hyps, refs, n);
        let p = if m == 0 { 1.0 / (t + 1) as f64 } else { m as f64 / t as f64 };
        log_sum += p.ln();
    }
    Ok(100.0 * brevity_penalty(c, r) * (log_sum / MAX_NGRAM as f64).exp())
}

/// Fraction of non-pad target positions predicted correctly.
pub fn token_accuracy(predictions: &[usize], targets: &[usize], pad_id: usize) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (&p, &t) in predictions.iter().zip(targets) {
        if t != pad_id {
            total += 1;
            correct += usize::from(p == t);
        }
    }
    if total == 0 {
        log::warn!("token accuracy over zero non-pad positions; reporting 0");
        return 0.0;
    }
    correct as f64 / total as f64
}

/// Row-wise argmax of flat `[rows, vocab]` logits.
pub fn argmax_rows(logits: &[f64], vocab: usize) -> Vec<usize> {
    logits.chunks(vocab).map(argmax).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub token_accuracy: f64,
    pub sentences: usize,
}

/// Teacher-forced token accuracy over a corpus.
pub fn teacher_forced_accuracy(model: &Model, corpus: &ParallelCorpus, vocab: &Vocab, batch_size: usize) -> Result<f64> {
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for batch in batchify(corpus, batch_size, vocab, None, model.config().max_len)? {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, &mut ForwardOptions::eval())?;
        preds.extend(argmax_rows(tape.value(out.logits), model.config().vocab_size));
        targets.extend_from_slice(&batch.tgt_out_ids);
    }
    Ok(token_accuracy(&preds, &targets, PAD))
}

/// Greedy-decodes every source sentence and scores it against its reference.
pub fn greedy_bleu(model: &Model, corpus: &ParallelCorpus, vocab: &Vocab, batch_size: usize) -> Result<f64> {
    let srcs: Vec<Vec<usize>> = corpus.pairs.iter().map(|(s, _)| vocab.encode(s)).collect();
    let refs: Vec<Vec<usize>> = corpus.pairs.iter().map(|(_, t)| vocab.encode(t)).collect();
    let mut hyps = Vec::with_capacity(srcs.len());
    for chunk in srcs.chunks(batch_size.max(1)) {
        hyps.extend(model.greedy_decode_batch(chunk, model.config().max_len)?);
    }
    corpus_bleu(&hyps, &refs)
}

pub fn evaluate(model: &Model, corpus: &ParallelCorpus, vocab: &Vocab, batch_size: usize) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Input("evaluation corpus is empty".into()));
    }
    Ok(EvalReport {
        bleu: greedy_bleu(model, corpus, vocab, batch_size)?,
        token_accuracy: teacher_forced_accuracy(model, corpus, vocab, batch_size)?,
        sentences: corpus.len(),
    })
}
