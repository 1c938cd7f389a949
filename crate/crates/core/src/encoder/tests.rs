use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ndkernel::gradcheck::{agree, central_diff, DEFAULT_H};
use crate::ndkernel::{Tape, Tensor};

use super::*;

fn toy_cfg() -> EncoderConfig {
    let mut cfg = EncoderConfig::toy(24, 8);
    cfg.layers_ctx = 1;
    cfg.layers_den = 1;
    cfg.layers_lex = 1;
    cfg.heads = 2;
    cfg.max_seq_len = 16;
    cfg
}

#[test]
fn config_validation() {
    let mut cfg = EncoderConfig::toy(32, 8);
    cfg.validate().unwrap();
    cfg.heads = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = EncoderConfig::toy(32, 8);
    cfg.sep_id = cfg.cls_id;
    assert!(cfg.validate().is_err());
    let mut cfg = EncoderConfig::toy(32, 8);
    cfg.cls_id = 40;
    assert!(cfg.validate().is_err());
}

#[test]
fn contextualize_shape_contract() {
    let cfg = toy_cfg();
    let params = EncoderParams::init(&cfg, 42).unwrap();
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, &params, false).unwrap();
    let h = contextualize(&mut tape, &bound, &cfg, &[5, 6, 7]).unwrap();
    assert_eq!(tape.value(h).shape(), (5, cfg.embed_dim));

    let too_long = vec![2u32; cfg.max_seq_len - 1];
    assert!(matches!(
        contextualize(&mut tape, &bound, &cfg, &too_long),
        Err(EncoderError::Overlength { .. })
    ));
    assert!(matches!(
        contextualize(&mut tape, &bound, &cfg, &[99]),
        Err(EncoderError::TokenOutOfRange { .. })
    ));
}

#[test]
fn dense_head_shape_and_determinism() {
    let cfg = toy_cfg();
    let params = EncoderParams::init(&cfg, 42).unwrap();
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, &params, false).unwrap();
    let h = contextualize(&mut tape, &bound, &cfg, &[5, 6, 7]).unwrap();
    let u = dense_head(&mut tape, &bound, &cfg, h).unwrap();
    assert_eq!(tape.value(u).shape(), (1, cfg.embed_dim));

    let a = encode(&params, &cfg, &[5, 6, 7]).unwrap();
    let b = encode(&params, &cfg, &[5, 6, 7]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn lexicon_weights_nonnegative_for_random_params() {
    let cfg = toy_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..4u64 {
        let params = EncoderParams::init(&cfg, seed).unwrap();
        let len = rng.gen_range(1..8);
        let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(2..cfg.vocab_size)).collect();
        let repr = encode(&params, &cfg, &tokens).unwrap();
        assert!(repr.lex.entries().iter().all(|&(_, w)| w > 0.0));
        assert!(repr.lex.nnz() <= cfg.vocab_size as usize);
        assert_eq!(repr.dense.dim(), cfg.embed_dim);
    }
}

#[test]
fn saturation_formula_and_monotonicity() {
    // A pooled post-relu activation of exactly 1.0 gives weight ln 2.
    let mut tape = Tape::new();
    let logits = tape
        .constant(Tensor::new(2, 3, vec![1.0, -2.0, 0.2, 0.5, -1.0, 0.1]).unwrap())
        .unwrap();
    let w = saturate(&mut tape, logits).unwrap();
    let got = tape.value(w).data().to_vec();
    assert!((got[0] - 2.0f64.ln()).abs() < 1e-15);
    assert_eq!(got[1], 0.0);
    assert!((got[2] - 1.2f64.ln()).abs() < 1e-15);

    // Raising any single logit never decreases that term's weight.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for idx in 0..12 {
        let eval = |bump: f64| {
            let mut data = base.clone();
            data[idx] += bump;
            let mut tape = Tape::new();
            let logits = tape.constant(Tensor::new(4, 3, data).unwrap()).unwrap();
            let w = saturate(&mut tape, logits).unwrap();
            tape.value(w).data()[idx % 3]
        };
        assert!(eval(0.75) >= eval(0.0));
    }
}

#[test]
fn swapping_equal_tokens_is_identity() {
    let cfg = toy_cfg();
    let params = EncoderParams::init(&cfg, 42).unwrap();
    // Same multiset with the two 6s swapped: identical input, identical output.
    let a = encode(&params, &cfg, &[5, 6, 7, 6]).unwrap();
    let b = encode(&params, &cfg, &[5, 6, 7, 6]).unwrap();
    assert_eq!(a, b);
    // Swapping two distinct tokens moves them to other positions and does
    // change the output.
    let c = encode(&params, &cfg, &[7, 6, 5, 6]).unwrap();
    assert_ne!(a.dense, c.dense);
}

#[test]
fn share_global_changes_lexicon_output() {
    let cfg = toy_cfg();
    let params = EncoderParams::init(&cfg, 42).unwrap();
    let with = encode(&params, &cfg, &[5, 6, 7]).unwrap();
    let mut ablated_cfg = cfg.clone();
    ablated_cfg.share_global = false;
    let without = encode(&params, &ablated_cfg, &[5, 6, 7]).unwrap();
    assert_ne!(with.lex, without.lex);
    // Dense path is untouched by the ablation.
    assert_eq!(with.dense, without.dense);
}

#[test]
fn stop_gradient_contract_on_lexicon_loss() {
    let cfg = toy_cfg();
    let params = EncoderParams::init(&cfg, 42).unwrap();
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, &params, true).unwrap();
    let global = bind_global(&mut tape, &bound, &GlobalMode::Barrier).unwrap();
    let enc = encode_on_tape(&mut tape, &bound, &cfg, &[5, 6, 7], &global).unwrap();

    // A loss purely on the lexicon activations.
    let loss = tape.sum(enc.lex).unwrap();
    tape.backward(loss).unwrap();

    // theta_den must receive exactly no gradient.
    for (name, &var) in &bound.den {
        assert!(
            tape.grad(var).is_none(),
            "theta_den param {name} received lexicon gradient"
        );
    }
    // theta_ctx still receives gradient through the manipulated input.
    let ctx_nonzero = bound.ctx.values().any(|&v| {
        tape.grad(v)
            .map(|g| g.data().iter().any(|&x| x != 0.0))
            .unwrap_or(false)
    });
    assert!(ctx_nonzero, "theta_ctx received no gradient from the lexicon loss");
    // The tied word embedding (lex group) is updated too.
    let we = bound.lex[WORD_EMBEDDING];
    assert!(tape.grad(we).is_some());
}

#[test]
fn dense_loss_reaches_theta_den() {
    let cfg = toy_cfg();
    let params = EncoderParams::init(&cfg, 42).unwrap();
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, &params, true).unwrap();
    let global = bind_global(&mut tape, &bound, &GlobalMode::Barrier).unwrap();
    let enc = encode_on_tape(&mut tape, &bound, &cfg, &[5, 6, 7], &global).unwrap();
    let sq = tape.mul(enc.dense, enc.dense).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    let den_nonzero = bound.den.values().any(|&v| {
        tape.grad(v)
            .map(|g| g.data().iter().any(|&x| x != 0.0))
            .unwrap_or(false)
    });
    assert!(den_nonzero);
}

// Finite-difference check of a combined loss over both heads, sampling
// parameters from every group. The barrier is pinned to the unperturbed
// snapshot so the finite differences honor the stop-gradient semantics.
#[test]
fn full_model_gradient_check() {
    let cfg = toy_cfg();
    let params = EncoderParams::init(&cfg, 42).unwrap();
    let tokens = [5u32, 6, 7];

    let loss_of = |p: &EncoderParams, barrier: &ParamSet| -> f64 {
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, p, true).unwrap();
        let global = bind_global(&mut tape, &bound, &GlobalMode::Pinned(barrier)).unwrap();
        let enc = encode_on_tape(&mut tape, &bound, &cfg, &tokens, &global).unwrap();
        let dsq = tape.mul(enc.dense, enc.dense).unwrap();
        let d = tape.sum(dsq).unwrap();
        let l = tape.sum(enc.lex).unwrap();
        let total = tape.add(d, l).unwrap();
        tape.value(total).item().unwrap()
    };

    // Analytic gradients with the barrier pinned to the same values.
    let snapshot = params.theta_den.clone();
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, &params, true).unwrap();
    let global = bind_global(&mut tape, &bound, &GlobalMode::Pinned(&snapshot)).unwrap();
    let enc = encode_on_tape(&mut tape, &bound, &cfg, &tokens, &global).unwrap();
    let dsq = tape.mul(enc.dense, enc.dense).unwrap();
    let d = tape.sum(dsq).unwrap();
    let l = tape.sum(enc.lex).unwrap();
    let total = tape.add(d, l).unwrap();
    tape.backward(total).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for group in ParamGroup::ALL {
        let names: Vec<String> = params.group(group).iter().map(|(n, _)| n.to_string()).collect();
        for _ in 0..6 {
            let name = &names[rng.gen_range(0..names.len())];
            let tensor = params.group(group).get(name).unwrap();
            let k = rng.gen_range(0..tensor.len());
            let var = bound.group(group)[name.as_str()];
            let analytic = tape.grad(var).map(|g| g.data()[k]).unwrap_or(0.0);
            let numeric = central_diff(
                |delta| {
                    let mut perturbed = params.clone();
                    perturbed.group_mut(group).get_mut(name).unwrap().data_mut()[k] += delta;
                    loss_of(&perturbed, &snapshot)
                },
                DEFAULT_H,
            );
            assert!(
                agree(analytic, numeric, 1e-4),
                "{}.{name}[{k}]: analytic {analytic} vs fd {numeric}",
                group.as_str()
            );
        }
    }
}
