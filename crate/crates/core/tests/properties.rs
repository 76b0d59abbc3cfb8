mod common;

use a2d_core::data::{batchify, detokenize, synth_task, tokenize, Batch, TaskKind, Vocab, PAD};
use a2d_core::distill::{aam_forward, attention_transfer_loss, vanilla_kd_loss};
use a2d_core::eval::corpus_bleu;
use a2d_core::numerics::{Mask, Tape, Tensor, Var};
use a2d_core::transformer::{positional_encoding, ForwardOptions, Model, ModelConfig};
use common::{matmul_ref, random_distribution, random_tensor, rng, softmax_ref};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn small_cfg(heads: usize) -> ModelConfig {
    ModelConfig {
        n_enc_layers: 2,
        n_dec_layers: 2,
        n_heads: heads,
        d_model: 8,
        d_ffn: 16,
        vocab_size: 12,
        max_len: 10,
        dropout_rate: 0.1,
    }
}

fn two_row_batch() -> Batch {
    Batch::from_ids(&[(vec![4, 5, 6, 7], vec![8, 9, 10]), (vec![6, 4], vec![5])]).unwrap()
}

/// Explicit weighted sum `Σ_k w[c,k]·S_k + b_c`, one element at a time.
fn aam_oracle(maps: &[Tensor], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (c_out, k_in) = (w.shape()[0], w.shape()[1]);
    let n = maps[0].numel();
    (0..c_out)
        .map(|c| {
            (0..n)
                .map(|e| {
                    let mut acc = b.data()[c];
                    for k in 0..k_in {
                        acc += w.data()[c * k_in + k] * maps[k].data()[e];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

#[test]
fn aam_matches_weighted_sum_oracle() {
    let mut r = rng(11);
    for case in 0..50 {
        let k = r.random_range(1..7);
        let c = r.random_range(1..7);
        let shape = [r.random_range(1..3), r.random_range(1..5), r.random_range(1..5)];
        let maps: Vec<Tensor> = (0..k).map(|_| random_distribution(&mut r, &shape)).collect();
        let w = random_tensor(&mut r, &[c, k], 1.0);
        let b = random_tensor(&mut r, &[c], 0.1);
        let mut tape = Tape::new();
        let vars: Vec<Var> = maps.iter().map(|m| tape.constant(m)).collect();
        let (wv, bv) = (tape.constant(&w), tape.constant(&b));
        let out = aam_forward(&mut tape, &vars, wv, bv).unwrap();
        let oracle = aam_oracle(&maps, &w, &b);
        assert_eq!(out.len(), c);
        for (o, expect) in out.iter().zip(&oracle) {
            assert_eq!(tape.shape(*o), &shape);
            for (x, y) in tape.value(*o).iter().zip(expect) {
                assert!((x - y).abs() <= 1e-12, "case {case}: {x} vs {y}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aam_is_linear_without_bias(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let mut r = rng(seed);
        let (k, c) = (r.random_range(1..5), r.random_range(1..5));
        let a: Vec<Tensor> = (0..k).map(|_| random_tensor(&mut r, &[2, 3, 3], 1.0)).collect();
        let bm: Vec<Tensor> = (0..k).map(|_| random_tensor(&mut r, &[2, 3, 3], 1.0)).collect();
        let w = random_tensor(&mut r, &[c, k], 1.0);
        let zero = Tensor::zeros(&[c]);
        let run = |maps: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = maps.iter().map(|m| tape.constant(m)).collect();
            let (wv, bv) = (tape.constant(&w), tape.constant(&zero));
            let out = aam_forward(&mut tape, &vars, wv, bv).unwrap();
            out.iter().map(|v| tape.value(*v).to_vec()).collect::<Vec<_>>()
        };
        let mixed: Vec<Tensor> = a
            .iter()
            .zip(&bm)
            .map(|(x, y)| {
                let data = x.data().iter().zip(y.data()).map(|(p, q)| alpha * p + beta * q).collect();
                Tensor::new(x.shape(), data).unwrap()
            })
            .collect();
        let (lhs, fa, fb) = (run(&mixed), run(&a), run(&bm));
        for c in 0..lhs.len() {
            for e in 0..lhs[c].len() {
                let rhs = alpha * fa[c][e] + beta * fb[c][e];
                prop_assert!((lhs[c][e] - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_is_nonnegative(seed in any::<u64>(), n in 1usize..8) {
        let mut r = rng(seed);
        let p = random_distribution(&mut r, &[4, n]);
        let q = random_distribution(&mut r, &[4, n]);
        let mut tape = Tape::new();
        let (pv, qv) = (tape.constant(&p), tape.constant(&q));
        let kl = tape.kl_rows(pv, qv, None).unwrap();
        prop_assert!(tape.item(kl) >= 0.0);
        let same = tape.kl_rows(pv, pv, None).unwrap();
        prop_assert!(tape.item(same).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(seed in any::<u64>(), n in 1usize..8, shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[3, n], 5.0);
        let shifted = Tensor::new(x.shape(), x.data().iter().map(|v| v + shift).collect()).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(&x), tape.constant(&shifted));
        let (sa, sb) = (tape.softmax_rows(a, None).unwrap(), tape.softmax_rows(b, None).unwrap());
        for (row, reference) in tape.value(sa).chunks(n).zip(x.data().chunks(n)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            for (v, o) in row.iter().zip(softmax_ref(reference)) {
                prop_assert!((v - o).abs() < 1e-12);
            }
        }
        for (u, v) in tape.value(sa).iter().zip(tape.value(sb)) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_ignores_corpus_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(1..8);
        let refs: Vec<Vec<usize>> = (0..n).map(|_| (0..r.random_range(1..9)).map(|_| r.random_range(0..6)).collect()).collect();
        let hyps: Vec<Vec<usize>> = (0..n).map(|_| (0..r.random_range(1..9)).map(|_| r.random_range(0..6)).collect()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let ph: Vec<_> = order.iter().map(|&i| hyps[i].clone()).collect();
        let pr: Vec<_> = order.iter().map(|&i| refs[i].clone()).collect();
        prop_assert_eq!(corpus_bleu(&hyps, &refs).unwrap(), corpus_bleu(&ph, &pr).unwrap());
        prop_assert_eq!(corpus_bleu(&refs, &refs).unwrap(), 100.0);
    }

    #[test]
    fn batches_keep_mask_pad_duality_and_all_pairs(seed in any::<u64>(), bs in 1usize..9) {
        let corpus = synth_task(TaskKind::Reverse, 20, 1, 6, 12, seed).unwrap();
        let vocab = Vocab::synthetic(12);
        let batches = batchify(&corpus, bs, &vocab, Some(seed), 10).unwrap();
        let mut seen: Vec<usize> = Vec::new();
        for b in &batches {
            for (id, m) in b.src_ids.iter().zip(b.src_mask.data()) {
                prop_assert_eq!(*m, *id != PAD);
            }
            for (id, m) in b.tgt_in_ids.iter().zip(b.tgt_mask.data()) {
                prop_assert_eq!(*m, *id != PAD);
            }
            seen.extend(&b.pair_indices);
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn tokenize_detokenize_round_trip(words in proptest::collection::vec("[a-z0-9]{1,5}", 1..8), pad in "[ \t]{0,3}") {
        let text = format!("{pad}{}{pad}", words.join("  "));
        prop_assert_eq!(tokenize(&detokenize(&tokenize(&text))), words.clone());
        prop_assert_eq!(detokenize(&tokenize(&text)), words.join(" "));
    }
}

#[test]
fn bleu_rarely_rises_when_a_token_is_corrupted() {
    let mut r = rng(5);
    let mut not_increased = 0;
    let trials = 400;
    for _ in 0..trials {
        let n = r.random_range(2..6);
        let refs: Vec<Vec<usize>> = (0..n).map(|_| (0..r.random_range(4..10)).map(|_| r.random_range(0..20)).collect()).collect();
        let mut hyps = refs.clone();
        for h in hyps.iter_mut() {
            for t in h.iter_mut() {
                if r.random_bool(0.3) {
                    *t = r.random_range(0..20);
                }
            }
        }
        let before = corpus_bleu(&hyps, &refs).unwrap();
        let s = r.random_range(0..n);
        let pos = r.random_range(0..hyps[s].len());
        hyps[s][pos] = 1000;
        let after = corpus_bleu(&hyps, &refs).unwrap();
        if after <= before {
            not_increased += 1;
        }
    }
    assert!(not_increased as f64 >= 0.95 * trials as f64, "{not_increased}/{trials}");
}

#[test]
fn attention_transfer_matches_triple_loop() {
    let mut r = rng(3);
    for _ in 0..20 {
        let c = r.random_range(1..5);
        let (b, rows, cols) = (2, 4, 5);
        let teacher: Vec<Tensor> = (0..c).map(|_| random_distribution(&mut r, &[b, rows, cols])).collect();
        let inter: Vec<Tensor> = (0..c)
            .map(|_| Tensor::from_fn(&[b, rows, cols], |_| r.random_range(-0.1..0.6)))
            .collect();
        let active = Mask::from_fn(&[b, rows], |i| i % rows < 3 || i < rows);
        let mut expect = 0.0;
        for ci in 0..c {
            let mut sum = 0.0;
            let mut count = 0;
            for row in 0..b * rows {
                if !active.data()[row] {
                    continue;
                }
                count += 1;
                for j in 0..cols {
                    let p = teacher[ci].data()[row * cols + j];
                    let q = inter[ci].data()[row * cols + j].max(1e-9);
                    if p > 0.0 {
                        sum += p * (p.ln() - q.ln());
                    }
                }
            }
            expect += sum / count as f64;
        }
        let mut tape = Tape::new();
        let tv: Vec<Var> = teacher.iter().map(|t| tape.constant(t)).collect();
        let iv: Vec<Var> = inter.iter().map(|t| tape.constant(t)).collect();
        let loss = attention_transfer_loss(&mut tape, &tv, &iv, &active).unwrap();
        assert!((tape.item(loss) - expect).abs() < 1e-10, "{} vs {expect}", tape.item(loss));
    }
}

#[test]
fn kd_matches_scalar_loop() {
    let mut r = rng(4);
    for &temp in &[1.0, 2.0, 0.5] {
        let (rows, v) = (6, 7);
        let zs = random_tensor(&mut r, &[2, 3, v], 3.0);
        let zt = random_tensor(&mut r, &[2, 3, v], 3.0);
        let mask = Mask::new(&[2, 3], vec![true, true, false, true, false, false]).unwrap();
        let mut sum = 0.0;
        let mut count = 0;
        for row in 0..rows {
            if !mask.data()[row] {
                continue;
            }
            count += 1;
            let s: Vec<f64> = zs.data()[row * v..(row + 1) * v].iter().map(|x| x / temp).collect();
            let t: Vec<f64> = zt.data()[row * v..(row + 1) * v].iter().map(|x| x / temp).collect();
            let (ps, pt) = (softmax_ref(&s), softmax_ref(&t));
            sum -= (0..v).map(|j| pt[j] * ps[j].ln()).sum::<f64>();
        }
        let expect = temp * temp * sum / count as f64;
        let mut tape = Tape::new();
        let (s, t) = (tape.constant(&zs), tape.constant(&zt));
        let kd = vanilla_kd_loss(&mut tape, s, t, &mask, temp).unwrap();
        assert!((tape.item(kd) - expect).abs() < 1e-10);
    }
}

/// First-layer encoder maps rebuilt head by head from the raw parameters.
#[test]
fn first_encoder_layer_maps_match_head_loop() {
    let cfg = small_cfg(2);
    let model = Model::new(cfg.clone(), 21).unwrap();
    let batch = two_row_batch();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch, &mut ForwardOptions::eval()).unwrap();

    let p = |name: &str| model.params().get(model.params().find(name).unwrap()).data().to_vec();
    let (d, dh, len) = (cfg.d_model, cfg.d_head(), batch.src_len);
    let embed = p("embed");
    let pe = positional_encoding(len, d);
    for bi in 0..batch.size {
        let x: Vec<f64> = (0..len * d)
            .map(|i| {
                let (pos, j) = (i / d, i % d);
                let id = batch.src_ids[bi * len + pos];
                embed[id * d + j] * (d as f64).sqrt() + pe.data()[i]
            })
            .collect();
        for h in 0..cfg.n_heads {
            let q = matmul_ref(&x, &p(&format!("enc.0.self.wq.{h}")), len, d, dh);
            let k = matmul_ref(&x, &p(&format!("enc.0.self.wk.{h}")), len, d, dh);
            let map = tape.value(out.maps.enc_self[h]);
            for qi in 0..len {
                let scores: Vec<f64> = (0..len)
                    .filter(|&kj| batch.src_mask.data()[bi * len + kj])
                    .map(|kj| (0..dh).map(|e| q[qi * dh + e] * k[kj * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let probs = softmax_ref(&scores);
                let mut pi = probs.iter();
                for kj in 0..len {
                    let got = map[(bi * len + qi) * len + kj];
                    let expect = if batch.src_mask.data()[bi * len + kj] { *pi.next().unwrap() } else { 0.0 };
                    assert!((got - expect).abs() < 1e-10, "b{bi} h{h} q{qi} k{kj}: {got} vs {expect}");
                }
            }
        }
    }
}

#[test]
fn padded_keys_get_exactly_zero_weight() {
    let model = Model::new(small_cfg(4), 2).unwrap();
    let batch = two_row_batch();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch, &mut ForwardOptions::eval()).unwrap();
    let (ls, lt) = (batch.src_len, batch.tgt_len);
    for &m in out.maps.enc_self.iter().chain(&out.maps.dec_cross) {
        let lq = tape.shape(m)[1];
        for (i, &v) in tape.value(m).iter().enumerate() {
            let bi = i / (lq * ls);
            if !batch.src_mask.data()[bi * ls + i % ls] {
                assert_eq!(v, 0.0);
            }
        }
    }
    for &m in &out.maps.dec_self {
        for (i, &v) in tape.value(m).iter().enumerate() {
            let bi = i / (lt * lt);
            if !batch.tgt_mask.data()[bi * lt + i % lt] {
                assert_eq!(v, 0.0);
            }
        }
    }
}

#[test]
fn decoder_prefix_ignores_later_targets() {
    let model = Model::new(small_cfg(2), 8).unwrap();
    let a = Batch::from_ids(&[(vec![4, 5, 6], vec![7, 8, 9, 10])]).unwrap();
    let b = Batch::from_ids(&[(vec![4, 5, 6], vec![7, 8, 11, 4])]).unwrap();
    let run = |batch: &Batch| {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, batch, &mut ForwardOptions::eval()).unwrap();
        let maps: Vec<Vec<f64>> = out.maps.dec_self.iter().map(|m| tape.value(*m).to_vec()).collect();
        (tape.value(out.logits).to_vec(), maps)
    };
    let ((la, ma), (lb, mb)) = (run(&a), run(&b));
    let v = model.config().vocab_size;
    // tgt_in is [BOS, 7, 8, ...]; positions 0..=2 only see identical inputs.
    for pos in 0..3 {
        for j in 0..v {
            assert_eq!(la[pos * v + j], lb[pos * v + j]);
        }
    }
    assert_ne!(la[3 * v..4 * v], lb[3 * v..4 * v]);
    let lt = a.tgt_len;
    for (x, y) in ma.iter().zip(&mb) {
        assert_eq!(x[..3 * lt], y[..3 * lt]);
    }
}
