mod common;

use mtl_core::autodiff::nn::log_softmax;
use mtl_core::autodiff::{grad_check, grad_check_sampled, Tape};
use mtl_core::models::{LmConfig, LstmLm, SeqBatch, SeqModel, Split, TransducerStepper};
use mtl_core::params::{adam_step, AdamConfig, AdamState};
use mtl_core::rng::stream;
use mtl_core::vocab::{BEGIN, END};
use mtl_core::Error;
use rand::Rng;
use common::*;


#[test]
fn zero_output_layer_gives_ln_vocab() {
    let ex = examples(1, &[3, 5, 2]);
    let t = small_transducer();
    let mut p = t.init_params(&mut stream(1, "init")).unwrap();
    zero_output(&mut p, "out.w", "out.b");
    assert!((t.loss_value(&p, &batch(&ex, true)).unwrap() - (V as f64).ln()).abs() < 1e-12);

    let lm = small_lm();
    let mut p = lm.init_params(&mut stream(1, "init")).unwrap();
    zero_output(&mut p, "lm.out.w", "lm.out.b");
    assert!((lm.loss_value(&p, &batch(&ex, false)).unwrap() - (V as f64).ln()).abs() < 1e-12);
}

#[test]
fn transducer_gradients_match_finite_differences() {
    let ex = examples(2, &[3, 1]);
    let t = small_transducer();
    let b = batch(&ex, true);
    for seed in 0..3 {
        let p = t.init_params(&mut stream(seed, "init")).unwrap();
        let err = grad_check_sampled(
            |tape, v| t.loss(tape, v, &b),
            &p,
            1e-5,
            200,
            &mut stream(seed, "coords"),
        )
        .unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn lm_gradients_match_finite_differences() {
    let ex = examples(3, &[4, 2]);
    let lm = small_lm();
    let b = batch(&ex, false);
    let p = lm.init_params(&mut stream(3, "init")).unwrap();
    let err = grad_check(|tape, v| lm.loss(tape, v, &b), &p, 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");
}

/// Padding contributes nothing: the batch nll is the sum of the per-example
/// nlls, in any order.
#[test]
fn padding_and_order_do_not_change_loss() {
    let ex = examples(4, &[1, 6, 3, 4]);
    let models: [(&dyn SeqModel, bool); 2] = [(&small_transducer(), true), (&small_lm(), false)];
    for (m, feats) in models {
        let p = m.init_params(&mut stream(4, "init")).unwrap();
        let nll = |e: &Example| {
            let tape = Tape::new();
            let v = p.to_constants(&tape);
            m.nll_sum(&tape, &v, &batch(e, feats)).unwrap().0.value().item()
        };
        let whole = nll(&ex);
        let singles: f64 = (0..4)
            .map(|i| {
                nll(&Example {
                    seqs: vec![ex.seqs[i].clone()],
                    feats: vec![ex.feats[i].clone()],
                })
            })
            .sum();
        let order = [2, 0, 3, 1];
        let permuted = nll(&Example {
            seqs: order.iter().map(|&i| ex.seqs[i].clone()).collect(),
            feats: order.iter().map(|&i| ex.feats[i].clone()).collect(),
        });
        assert!((whole - singles).abs() < 1e-9, "{whole} vs {singles}");
        assert!((whole - permuted).abs() < 1e-9, "{whole} vs {permuted}");
    }
}

#[test]
fn lm_score_under_uniform_model_is_minus_n_ln_v() {
    let lm = small_lm();
    let mut p = lm.init_params(&mut stream(5, "init")).unwrap();
    zero_output(&mut p, "lm.out.w", "lm.out.b");
    let toks = [5, 6, 7, 3, 8];
    let s = lm.score(&p, &toks).unwrap();
    assert!((s + 5.0 * (V as f64).ln()).abs() < 1e-12);
}

#[test]
fn lm_score_is_monotone_and_matches_loss() {
    let lm = small_lm();
    let p = lm.init_params(&mut stream(6, "init")).unwrap();
    let mut rng = stream(6, "toks");
    let toks: Vec<u32> = (0..8).map(|_| rng.random_range(3..V as u32)).collect();
    let mut prev = 0.0;
    for n in 1..=toks.len() {
        let s = lm.score(&p, &toks[..n]).unwrap();
        assert!(s <= prev + 1e-12);
        prev = s;
        let loss = lm.loss_value(&p, &LstmLm::single_batch(&toks[..n]).unwrap()).unwrap();
        assert!((loss * n as f64 + s).abs() < 1e-9);
    }
}

#[test]
fn step_decode_is_a_distribution_matching_teacher_forcing() {
    let ex = examples(7, &[6]);
    let t = small_transducer();
    let p = t.init_params(&mut stream(7, "init")).unwrap();
    let b = batch(&ex, true);
    let tape = Tape::new();
    let vars = p.to_constants(&tape);
    let l = b.max_len - 1;
    let tf = log_softmax(t.logits(&tape, &vars, &b).unwrap().reshape(&[l, V]).unwrap())
        .unwrap()
        .value();
    let seq = &ex.seqs[0];
    for k in 1..seq.len() {
        let lp = t.step_decode(&p, &ex.feats[0], &seq[..k]).unwrap();
        let total: f64 = lp.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (a, b) in lp.iter().zip(&tf.data()[(k - 1) * V..k * V]) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn batched_steps_match_single_steps() {
    let ex = examples(8, &[4]);
    let t = small_transducer();
    let p = t.init_params(&mut stream(8, "init")).unwrap();
    let mut rng = stream(8, "prefixes");
    let prefixes: Vec<Vec<u32>> = (0..5)
        .map(|_| {
            let mut s = sequence(3, &mut rng);
            s.pop();
            s
        })
        .collect();
    let mut stepper = TransducerStepper::new(&t, &p, &ex.feats[0]).unwrap();
    let batched = stepper.step(&prefixes).unwrap();
    for (pre, row) in prefixes.iter().zip(&batched) {
        let one = stepper.step(std::slice::from_ref(pre)).unwrap().remove(0);
        for (a, b) in one.iter().zip(row) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn changing_a_later_token_leaves_earlier_logits_alone() {
    let ex = examples(9, &[7]);
    let t = small_transducer();
    let lm = small_lm();
    let pt = t.init_params(&mut stream(9, "init")).unwrap();
    let pl = lm.init_params(&mut stream(9, "init")).unwrap();
    let logits = |seq: &[u32]| {
        let e = Example {
            seqs: vec![seq.to_vec()],
            feats: ex.feats.clone(),
        };
        let tape = Tape::new();
        let a = t.logits(&tape, &pt.to_constants(&tape), &batch(&e, true)).unwrap().value();
        let (inputs, _, _) = batch(&e, false).shifted();
        let b = lm
            .logits(&tape, &pl.to_constants(&tape), &inputs, 1, seq.len() - 1)
            .unwrap()
            .value();
        (a, b)
    };
    let seq = ex.seqs[0].clone();
    let (a0, b0) = logits(&seq);
    for k in 1..seq.len() - 1 {
        let mut s = seq.clone();
        s[k] = if s[k] == 4 { 5 } else { 4 };
        let (a1, b1) = logits(&s);
        // Input position k feeds logits at positions >= k only.
        for (x, y) in [(&a0, &a1), (&b0, &b1)] {
            assert_eq!(&x.data()[..k * V], &y.data()[..k * V], "position {k}");
            assert_ne!(&x.data()[k * V..(k + 1) * V], &y.data()[k * V..(k + 1) * V]);
        }
    }
}

fn adam_train(m: &dyn SeqModel, b: &SeqBatch, steps: usize, lr: f64, seed: u64) -> (f64, f64) {
    let mut p = m.init_params(&mut stream(seed, "init")).unwrap();
    let mut st = AdamState::new(&p, AdamConfig::default());
    let first = m.loss_value(&p, b).unwrap();
    for _ in 0..steps {
        let (_, g) = m.loss_and_grad(&p, b).unwrap();
        (p, st) = adam_step(&st, &p, &g, lr).unwrap();
    }
    (first, m.loss_value(&p, b).unwrap())
}

#[test]
fn adam_reduces_transducer_loss() {
    let ex = examples(10, &[4, 3, 5, 2]);
    let (first, last) = adam_train(&small_transducer(), &batch(&ex, true), 200, 1e-2, 10);
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn lm_memorizes_a_sequence() {
    // One sequence: with several, the token after BEGIN would be ambiguous.
    let ex = examples(11, &[10]);
    let lm = LstmLm::new(LmConfig {
        layers: 1,
        hidden: 24,
        vocab_size: V,
    })
    .unwrap();
    let (_, last) = adam_train(&lm, &batch(&ex, false), 500, 2e-2, 11);
    assert!(last < 0.1, "{last}");
}

#[test]
fn over_long_inputs_are_length_errors() {
    let t = small_transducer();
    let p = t.init_params(&mut stream(12, "init")).unwrap();
    let mut rng = stream(12, "long");
    let long = sequence(12, &mut rng);
    let f = frames(long.len(), 3, &mut rng);
    let b = SeqBatch::new(&[long.clone()], Some(&[f.clone()]), Split::Train).unwrap();
    assert!(matches!(t.loss_value(&p, &b), Err(Error::Length { .. })));
    let mut stepper = TransducerStepper::new(&t, &p, &f).unwrap();
    assert_eq!(stepper.max_prefix_len(), 11);
    assert!(stepper.step(&[long[..11].to_vec()]).is_ok());
    assert!(matches!(stepper.step(&[long[..12].to_vec()]), Err(Error::Length { .. })));
}

#[test]
fn out_of_vocabulary_ids_are_rejected() {
    let t = small_transducer();
    let p = t.init_params(&mut stream(13, "init")).unwrap();
    let mut rng = stream(13, "oov");
    let f = frames(4, 3, &mut rng);
    let b = SeqBatch::new(&[vec![BEGIN, V as u32, END]], Some(&[f]), Split::Train).unwrap();
    assert!(matches!(t.loss_value(&p, &b), Err(Error::Vocabulary { .. })));
    let lm = small_lm();
    let pl = lm.init_params(&mut stream(13, "init")).unwrap();
    assert!(matches!(lm.score(&pl, &[V as u32]), Err(Error::Vocabulary { .. })));
}
