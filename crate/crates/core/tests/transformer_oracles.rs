mod common;

use apvit::tensor::{layer_norm, matmul, LN_EPS};
use apvit::transformer::*;
use apvit::Tensor64;
use common::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_block(r: &mut rand_chacha::ChaCha8Rng, d: usize) -> BlockParams<f64> {
    let mut p = BlockParams::zeros(d);
    for (name, t) in p.named_mut() {
        let noise = random(r, t.shape()).scale(0.5);
        *t = if name.ends_with("gamma") { noise.map(|v| 1.0 + 0.2 * v) } else { noise };
    }
    p
}

fn seq_of(tokens: Tensor64) -> TokenSeq<f64> {
    let t = tokens.rows() - 1;
    TokenSeq::new(tokens, (0..t).collect()).unwrap()
}

#[test]
fn single_token_attention_is_value_path() {
    let mut r = rng(1);
    let p = random_block(&mut r, 4);
    let h = random(&mut r, &[1, 4]);
    let (out, rec, _) = msa_forward(&h, &p, 2).unwrap();
    let expect = matmul(&matmul(&h, &p.wv).unwrap(), &p.wo).unwrap();
    assert_eq!(out, expect);
    assert_eq!(rec.class_logits_per_head.shape(), &[2, 0]);
}

#[test]
fn zero_queries_give_uniform_attention() {
    let mut r = rng(2);
    let mut p = random_block(&mut r, 4);
    p.wq = Tensor64::zeros(&[4, 4]);
    let h = random(&mut r, &[5, 4]);
    let (out, rec, _) = msa_forward(&h, &p, 2).unwrap();
    assert!(rec.class_logits_per_head.data().iter().all(|&v| v == 0.0));
    let v = matmul(&h, &p.wv).unwrap();
    let mean = v.sum_rows().scale(1.0 / 5.0).reshape(&[1, 4]).unwrap();
    let row = matmul(&mean, &p.wo).unwrap();
    for i in 0..5 {
        for (a, b) in out.row(i).iter().zip(row.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn msa_matches_per_head_loop_oracle() {
    let mut r = rng(3);
    let (n, d, heads) = (4, 4, 2);
    let p = random_block(&mut r, d);
    let h = random(&mut r, &[n, d]);
    let (out, rec, _) = msa_forward(&h, &p, heads).unwrap();
    let proj = |w: &Tensor64, i: usize, j: usize| (0..d).map(|t| h.at(&[i, t]) * w.at(&[t, j])).sum::<f64>();
    let hd = d / heads;
    let mut concat = vec![vec![0.0; d]; n];
    for head in 0..heads {
        let cols = head * hd..(head + 1) * hd;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    cols.clone().map(|c| proj(&p.wq, i, c) * proj(&p.wk, j, c)).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            if i == 0 {
                for j in 1..n {
                    assert!((rec.class_logits_per_head.at(&[head, j - 1]) - logits[j]).abs() < 1e-10);
                }
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for c in cols.clone() {
                concat[i][c] = (0..n).map(|j| (logits[j] - m).exp() / z * proj(&p.wv, j, c)).sum();
            }
        }
    }
    for i in 0..n {
        for j in 0..d {
            let expect: f64 = (0..d).map(|c| concat[i][c] * p.wo.at(&[c, j])).sum();
            assert!((out.at(&[i, j]) - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn zero_block_is_residual_identity() {
    let x = random(&mut rng(4), &[5, 8]);
    let (out, _, _) = block_forward(&seq_of(x.clone()), &BlockParams::zeros(8), 2).unwrap();
    assert_eq!(out.tokens, x);
}

#[test]
fn block_backward_matches_finite_differences() {
    for seed in 0..5 {
        let mut r = rng(10 + seed);
        let p = random_block(&mut r, 8);
        let x = random(&mut r, &[5, 8]);
        let w = random(&mut r, &[5, 8]);
        let loss = |x: &Tensor64, p: &BlockParams<f64>| {
            weighted(&block_forward(&seq_of(x.clone()), p, 2).unwrap().0.tokens, &w)
        };
        let (_, _, cache) = block_forward(&seq_of(x.clone()), &p, 2).unwrap();
        let (dx, grads) = block_backward(&cache, &p, &w);
        assert!(fd_max_err(|t| loss(t, &p), &x, &dx, 1e-5) < 1e-4);
        for ((name, g), (_, t)) in grads.named().into_iter().zip(p.named()) {
            let e = fd_max_err(
                |v| {
                    let mut q = p.clone();
                    for (n2, slot) in q.named_mut() {
                        if n2 == name {
                            *slot = v.clone();
                        }
                    }
                    loss(&x, &q)
                },
                t,
                g,
                1e-5,
            );
            assert!(e < 1e-4, "seed {seed} {name}: {e}");
        }
    }
}

#[test]
fn stacked_blocks_without_mlp_are_attention_residuals() {
    let mut r = rng(5);
    let mut blocks = [random_block(&mut r, 8), random_block(&mut r, 8)];
    for b in &mut blocks {
        b.w1 = Tensor64::zeros(b.w1.shape());
        b.b1 = Tensor64::zeros(b.b1.shape());
        b.w2 = Tensor64::zeros(b.w2.shape());
        b.b2 = Tensor64::zeros(b.b2.shape());
    }
    let x = random(&mut r, &[4, 8]);
    let mut via_blocks = seq_of(x.clone());
    let mut manual = x;
    for b in &blocks {
        via_blocks = block_forward(&via_blocks, b, 2).unwrap().0;
        let (h, _) = layer_norm(&manual, &b.ln1_gamma, &b.ln1_beta, LN_EPS).unwrap();
        manual = manual.add(&msa_forward(&h, b, 2).unwrap().0);
    }
    assert_eq!(via_blocks.tokens, manual);
}

fn random_record(r: &mut rand_chacha::ChaCha8Rng, heads: usize, t: usize) -> AttnRecord<f64> {
    AttnRecord {
        class_logits_per_head: random(r, &[heads, t]),
    }
}

#[test]
fn atp_scores_match_loop_oracle_exactly() {
    let mut r = rng(6);
    for _ in 0..50 {
        let rec = random_record(&mut r, 3, 7);
        let l = &rec.class_logits_per_head;
        for (variant, f) in [
            (AtpVariant::Sum, Box::new(|a: f64, b: f64| a + b) as Box<dyn Fn(f64, f64) -> f64>),
            (AtpVariant::Abs, Box::new(|a: f64, b: f64| a + b.abs())),
            (AtpVariant::Max, Box::new(f64::max)),
        ] {
            let init = if variant == AtpVariant::Max { f64::NEG_INFINITY } else { 0.0 };
            let expect: Vec<f64> = (0..7).map(|t| (0..3).fold(init, |acc, h| f(acc, l.at(&[h, t])))).collect();
            assert_eq!(atp_scores(&rec, variant).data(), expect.as_slice());
        }
    }
}

#[test]
fn sum_scores_ignore_head_order() {
    let mut r = rng(7);
    let rec = random_record(&mut r, 4, 9);
    let mut order = [0, 1, 2, 3];
    order.shuffle(&mut r);
    let rows: Vec<Vec<f64>> = order.iter().map(|&h| rec.class_logits_per_head.row(h).to_vec()).collect();
    let permuted = AttnRecord {
        class_logits_per_head: Tensor64::from_rows(&rows).unwrap(),
    };
    let a = atp_scores(&rec, AtpVariant::Sum);
    let b = atp_scores(&permuted, AtpVariant::Sum);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn atp_select_matches_sort_oracle_on_1000_vectors() {
    let mut r = rng(8);
    for trial in 0..1000 {
        let t = r.random_range(1..20);
        let scores = Tensor64::from_fn(&[t], |_| {
            if trial % 2 == 0 {
                r.random_range(0..3) as f64
            } else {
                r.random_range(-1.0..1.0)
            }
        });
        let keep = r.random_range(1..=t);
        let ids: Vec<usize> = (0..t).map(|i| 3 * i + 1).collect();
        let seq = TokenSeq::new(random(&mut r, &[t + 1, 2]), ids.clone()).unwrap();
        let out = atp_select(&seq, &scores, keep).unwrap();
        let expect = sort_top_k(scores.data(), keep);
        assert_eq!(out.kept_patch_ids, expect.iter().map(|&p| ids[p]).collect::<Vec<_>>());
        assert_eq!(out.tokens.row(0), seq.tokens.row(0));
        for (row, &p) in expect.iter().enumerate() {
            assert_eq!(out.tokens.row(row + 1), seq.tokens.row(p + 1));
        }
        let shifted = scores.map(|v| v + 7.5);
        assert_eq!(atp_select(&seq, &shifted, keep).unwrap().kept_patch_ids, out.kept_patch_ids);
    }
}

#[test]
fn atp_select_examples() {
    let seq = seq_of(random(&mut rng(9), &[5, 3]));
    let scores = Tensor64::new(vec![4], vec![0.3, 0.9, 0.9, 0.1]).unwrap();
    assert_eq!(atp_select(&seq, &scores, 2).unwrap().kept_patch_ids, vec![1, 2]);
    let all = atp_select(&seq, &scores, 4).unwrap();
    assert_eq!(all.tokens, seq.tokens);
    assert!(matches!(atp_select(&seq, &scores, 0), Err(apvit::ApvitError::Config(_))));
}

fn random_encoder(r: &mut rand_chacha::ChaCha8Rng, m: usize, d: usize) -> Vec<BlockParams<f64>> {
    (0..m).map(|_| random_block(r, d)).collect()
}

#[test]
fn unit_keep_rate_equals_plain_stack() {
    let mut r = rng(11);
    let blocks = random_encoder(&mut r, 4, 8);
    let x = random(&mut r, &[7, 8]);
    let sched = keep_schedule(6, 1.0, 4).unwrap();
    let out = encoder_forward(seq_of(x.clone()), &blocks, &sched, 2, AtpVariant::Sum, None).unwrap();
    let mut plain = seq_of(x);
    for b in &blocks {
        plain = block_forward(&plain, b, 2).unwrap().0;
    }
    assert_eq!(out.seq.tokens, plain.tokens);
    assert!(out.selections.iter().all(Option::is_none));
}

#[test]
fn trail_follows_schedule_and_class_token_survives() {
    let mut r = rng(12);
    for _ in 0..10 {
        let k = r.random_range(2..12);
        let rate = [0.5, 0.6, 0.8, 0.9][r.random_range(0..4)];
        let blocks = random_encoder(&mut r, 4, 8);
        let sched = keep_schedule(k, rate, 4).unwrap();
        let x = random(&mut r, &[k + 1, 8]);
        let out = encoder_forward(seq_of(x), &blocks, &sched, 2, AtpVariant::Sum, None).unwrap();
        for (i, ids) in out.trail.iter().enumerate() {
            assert_eq!(ids.len(), sched.per_block_patch_counts[i]);
            assert!(ids.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(out.seq.tokens.rows(), sched.final_patch_count() + 1);
    }
}

#[test]
fn joint_patch_permutation_leaves_class_embedding_unchanged() {
    let mut r = rng(13);
    let blocks = random_encoder(&mut r, 4, 8);
    let sched = keep_schedule(8, 0.6, 4).unwrap();
    let x = random(&mut r, &[9, 8]);
    let base = encoder_forward(seq_of(x.clone()), &blocks, &sched, 2, AtpVariant::Sum, None).unwrap();
    assert!(base.margins.iter().flatten().all(|&m| m > 1e-6));
    let mut perm: Vec<usize> = (0..8).collect();
    perm.shuffle(&mut r);
    let rows: Vec<Vec<f64>> = std::iter::once(x.row(0).to_vec())
        .chain(perm.iter().map(|&p| x.row(p + 1).to_vec()))
        .collect();
    let permuted = TokenSeq {
        tokens: Tensor64::from_rows(&rows).unwrap(),
        kept_patch_ids: perm.clone(),
    };
    let out = encoder_forward(permuted, &blocks, &sched, 2, AtpVariant::Sum, None).unwrap();
    for (a, b) in base.class_embedding().data().iter().zip(out.class_embedding().data()) {
        assert!((a - b).abs() < 1e-9);
    }
    let mut survivors = out.seq.kept_patch_ids.clone();
    survivors.sort_unstable();
    assert_eq!(survivors, base.seq.kept_patch_ids);
}

#[test]
fn encoder_backward_matches_finite_differences_with_fixed_selection() {
    let mut r = rng(14);
    let blocks = random_encoder(&mut r, 4, 8);
    let sched = keep_schedule(6, 0.5, 4).unwrap();
    let x = random(&mut r, &[7, 8]);
    let out = encoder_forward(seq_of(x.clone()), &blocks, &sched, 2, AtpVariant::Sum, None).unwrap();
    let forced = out.selections.clone();
    let w = random(&mut r, &[out.seq.tokens.rows(), 8]);
    let loss = |x: &Tensor64, blocks: &[BlockParams<f64>]| {
        let o = encoder_forward(seq_of(x.clone()), blocks, &sched, 2, AtpVariant::Sum, Some(&forced)).unwrap();
        weighted(&o.seq.tokens, &w)
    };
    let (dx, grads) = encoder_backward(&out, &blocks, &w);
    assert!(fd_max_err(|t| loss(t, &blocks), &x, &dx, 1e-5) < 1e-4);
    for i in [0, 3] {
        let e = fd_max_err(
            |t| {
                let mut b = blocks.clone();
                b[i].wv = t.clone();
                loss(&x, &b)
            },
            &blocks[i].wv,
            &grads[i].wv,
            1e-5,
        );
        assert!(e < 1e-4, "block {i}: {e}");
    }
}
