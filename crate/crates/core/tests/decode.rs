mod common;

use mtl_core::decode::{attach_lm_scores, beam_search, rescore, Hypothesis, RescoreWeights};
use mtl_core::models::{SeqBatch, SeqModel, Split, TransducerStepper};
use mtl_core::autodiff::Tape;
use mtl_core::rng::stream;
use mtl_core::vocab::{word_count, BEGIN, END, SPACE};
use mtl_core::Error;
use proptest::prelude::*;
use common::*;


#[test]
fn width_one_is_greedy_decoding() {
    let v = 9;
    let t = decode_transducer(v);
    let voc = vocab(v as u32);
    for model_seed in 0..4 {
        let p = t.init_params(&mut stream(model_seed, "init")).unwrap();
        for u in 0..25 {
            let f = features(model_seed * 100 + u, 9 + (u as usize % 7));
            let mut s = TransducerStepper::new(&t, &p, &f).unwrap();
            let hyps = beam_search(&mut s, 1, 300, &candidates(v), &voc).unwrap();
            assert_eq!(hyps.len(), 1);
            assert_eq!(hyps[0].tokens, greedy(&t, &p, &f, &candidates(v), 9));
        }
    }
}


#[test]
fn exhaustive_width_matches_brute_force() {
    let cands = [END, 4, 5];
    for seed in 0..50 {
        let mut s = RandomScorer { v: 6, seed, calls: 0 };
        let truth = enumerate(&s, &cands, 3);
        assert_eq!(truth.len(), 15);
        let hyps = beam_search(&mut s, 64, 3, &cands, &vocab(6)).unwrap();
        assert_eq!(hyps.len(), truth.len());
        for (h, (toks, sc)) in hyps.iter().zip(&truth) {
            assert_eq!(&h.tokens, toks);
            assert!((h.dec_logp - sc).abs() < 1e-12);
        }
    }
}

#[test]
fn scores_match_teacher_forcing() {
    let v = 9;
    let t = decode_transducer(v);
    let p = t.init_params(&mut stream(3, "init")).unwrap();
    for u in 0..10 {
        let f = features(300 + u, 12);
        let mut s = TransducerStepper::new(&t, &p, &f).unwrap();
        for h in beam_search(&mut s, 4, 300, &candidates(v), &vocab(v as u32)).unwrap() {
            assert!(h.dec_logp.is_finite() && h.dec_logp <= 0.0);
            let b = SeqBatch::new(&[h.tokens.clone()], Some(&[f.clone()]), Split::Val).unwrap();
            let tape = Tape::new();
            let nll = t.nll_sum(&tape, &p.to_constants(&tape), &b).unwrap().0.value().item();
            assert!((h.dec_logp + nll).abs() < 1e-9, "{} vs {}", h.dec_logp, -nll);
        }
    }
}

#[test]
fn wider_beams_never_find_worse_best_scores() {
    let v = 9;
    let t = decode_transducer(v);
    let voc = vocab(v as u32);
    for model_seed in 0..3 {
        let p = t.init_params(&mut stream(model_seed, "init")).unwrap();
        for u in 0..8 {
            let f = features(1000 + 10 * model_seed + u, 11);
            let mut prev = f64::NEG_INFINITY;
            for w in 1..=8 {
                let mut s = TransducerStepper::new(&t, &p, &f).unwrap();
                let best = beam_search(&mut s, w, 300, &candidates(v), &voc).unwrap()[0].dec_logp;
                assert!(best >= prev - 1e-12, "model {model_seed} utt {u} width {w}: {best} < {prev}");
                prev = best;
            }
        }
    }
}

#[test]
fn length_cap_is_respected() {
    let mut s = RandomScorer { v: 8, seed: 4, calls: 0 };
    for h in beam_search(&mut s, 3, 4, &[4, 5, 6], &vocab(8)).unwrap() {
        assert_eq!(h.tokens.len(), 5);
        assert!(!h.finished());
    }
    assert_eq!(s.calls, 4);
    assert!(matches!(
        beam_search(&mut s, 0, 4, &[4], &vocab(8)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn unit_weights_keep_beam_order() {
    let mut s = RandomScorer { v: 8, seed: 5, calls: 0 };
    let hyps = beam_search(&mut s, 5, 6, &[END, 4, 5, SPACE], &vocab(8)).unwrap();
    let w = RescoreWeights {
        w_dec: 1.0,
        w_lm: 0.0,
        w_wc: 0.0,
    };
    let (best, scored) = rescore(&hyps, &w).unwrap();
    assert_eq!(best, 0);
    for (h, sc) in hyps.iter().zip(&scored) {
        assert_eq!(sc.score, h.dec_logp);
    }
    assert!(scored.windows(2).all(|p| p[0].score >= p[1].score));
}

fn hyp(tokens: Vec<u32>, dec: f64, lm: f64, wc: usize) -> Hypothesis {
    Hypothesis {
        tokens,
        dec_logp: dec,
        lm_logp: Some(lm),
        word_count: wc,
    }
}

#[test]
fn hand_scored_rescoring() {
    let hyps = [hyp(vec![BEGIN, 4, END], -1.0, -2.0, 1), hyp(vec![BEGIN, 5, END], -1.2, -0.5, 1)];
    let (best, scored) = rescore(&hyps, &RescoreWeights::default()).unwrap();
    assert_eq!(best, 0);
    assert!((scored[0].score - (-1.1)).abs() < 1e-12);
    assert!((scored[1].score - (-1.15)).abs() < 1e-12);
}

#[test]
fn lm_scores_cover_content_and_end() {
    let mut hyps = vec![hyp(vec![BEGIN, 4, 5, END], -1.0, 0.0, 1), hyp(vec![BEGIN, 6], -2.0, 0.0, 1)];
    let mut seen = vec![];
    attach_lm_scores(&mut hyps, |s| {
        seen.push(s.to_vec());
        Ok(-(s.len() as f64))
    })
    .unwrap();
    assert_eq!(seen, vec![vec![4, 5, END], vec![6, END]]);
    assert_eq!(hyps[0].lm_logp, Some(-3.0));
    let mut bare = hyps.clone();
    bare[1].lm_logp = None;
    assert!(matches!(rescore(&bare, &RescoreWeights::default()), Err(Error::Contract(_))));
}

#[test]
fn word_counts_by_hand() {
    let v = vocab(10);
    let wc = |t: &[u32]| word_count(t, |x| v.detokenize(x));
    assert_eq!(wc(&[BEGIN, END]), 0);
    assert_eq!(wc(&[BEGIN, 4, SPACE, 5, SPACE, 6, END]), 3);
    assert_eq!(wc(&[BEGIN, 4, SPACE, SPACE, 5, END]), 2);
    assert_eq!(wc(&[SPACE, 4, 5, SPACE]), 1);
}

fn arb_hyps() -> impl Strategy<Value = Vec<Hypothesis>> {
    prop::collection::vec((-20.0f64..0.0, -30.0f64..0.0, 0usize..12), 1..10).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (d, l, w))| hyp(vec![BEGIN, 4 + i as u32, END], d, l, w))
            .collect()
    })
}

proptest! {
    #[test]
    fn positive_weight_scaling_keeps_the_winner(hyps in arb_hyps(), c in 0.01f64..100.0, wl in 0.0f64..1.0, ww in 0.0f64..1.0) {
        let w = RescoreWeights { w_dec: 1.0, w_lm: wl, w_wc: ww };
        let s = RescoreWeights { w_dec: c, w_lm: c * wl, w_wc: c * ww };
        let (a, sa) = rescore(&hyps, &w).unwrap();
        let (b, _) = rescore(&hyps, &s).unwrap();
        let margin = sa.iter().enumerate().filter(|(i, _)| *i != a).map(|(_, x)| sa[a].score - x.score).fold(f64::INFINITY, f64::min);
        prop_assume!(margin > 1e-9);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn rescoring_ignores_list_order(hyps in arb_hyps(), seed in 0u64..1000) {
        let w = RescoreWeights::default();
        let (a, sa) = rescore(&hyps, &w).unwrap();
        let ties = sa.iter().filter(|x| x.score == sa[a].score).count();
        prop_assume!(ties == 1);
        let mut perm = hyps.clone();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut stream(seed, "perm"));
        let (b, _) = rescore(&perm, &w).unwrap();
        prop_assert_eq!(&perm[b].tokens, &hyps[a].tokens);
    }
}
