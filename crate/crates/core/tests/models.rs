//! Model variants: decoder wiring, act conditioning, joint links, losses.

mod common;

use common::*;
use htenc::autograd::Tape;
use htenc::corpus::{batch_examples, ContextBatch, EncodedExample, CLS, EOS, PAD, SOS};
use htenc::equiv::{tiny_config, toy_batch};
use htenc::models::*;
use htenc::params::AdamConfig;
use htenc::tensor::Tensor;
use htenc::Error;

const V: usize = 20;

fn model(variant: ModelVariant, seed: u64) -> Model {
    build_model(tiny_config(variant, V), seed, false).unwrap()
}

fn context(variant: ModelVariant) -> ModelContext {
    let utts: Vec<Vec<usize>> = vec![vec![5, 6, 7], vec![8, 9], vec![10, 11, 12, 13]];
    let utts: Vec<Vec<usize>> = if variant.uses_cls() {
        utts.into_iter().map(|u| [vec![CLS], u].concat()).collect()
    } else {
        utts
    };
    ModelContext::from_utterances(&utts).unwrap()
}

fn act(dim: usize) -> ActVector {
    ActVector::from_indices(dim, &[1, 4]).unwrap()
}

/// Logits of every decoder the variant has, for the same prefix.
fn all_logits(m: &Model, ctx: &ModelContext, prefix: &[usize]) -> Vec<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    if m.config.variant.joint() {
        let o = m.forward_joint(&mut tape, ctx, prefix, prefix, prefix).unwrap();
        [o.belief_logits, o.act_logits, o.response_logits]
            .iter()
            .map(|&v| rows_of(tape.value(v)))
            .collect()
    } else {
        let a = m.config.variant.act_conditioning().then(|| act(m.config.act_dim));
        let v = m.forward_response(&mut tape, ctx, prefix, a.as_ref()).unwrap();
        vec![rows_of(tape.value(v))]
    }
}

#[test]
fn decoders_are_causal_for_every_variant() {
    for v in ModelVariant::ALL {
        let m = model(v, 1);
        let ctx = context(v);
        let prefix = [SOS, 7, 8, 9, 10];
        let base = all_logits(&m, &ctx, &prefix);
        for k in 1..prefix.len() {
            let mut p = prefix;
            p[k] = 15;
            let moved = all_logits(&m, &ctx, &p);
            if v.joint() {
                // The act and response inputs also see the belief/act means,
                // so only the belief decoder is position-local in every row.
                assert_eq!(base[0][..k], moved[0][..k], "{v} belief k={k}");
            } else {
                assert_eq!(base[0][..k], moved[0][..k], "{v} k={k}");
                assert_ne!(base[0][k], moved[0][k], "{v} k={k}");
            }
        }
    }
}

#[test]
fn joint_decoders_are_causal_in_their_own_prefix() {
    let m = model(ModelVariant::HierJoint, 2);
    let ctx = context(ModelVariant::HierJoint);
    let (b, a, r) = ([SOS, 5, 6, 7], [SOS, 8, 9], [SOS, 10, 11, 12, 13]);
    let run = |r: &[usize]| {
        let mut tape = Tape::new();
        let o = m.forward_joint(&mut tape, &ctx, &b, &a, r).unwrap();
        rows_of(tape.value(o.response_logits))
    };
    let base = run(&r);
    for k in 1..r.len() {
        let mut p = r;
        p[k] = 16;
        assert_eq!(base[..k], run(&p)[..k]);
    }
}

#[test]
fn logit_shapes() {
    for v in ModelVariant::ALL {
        let m = model(v, 3);
        for l in all_logits(&m, &context(v), &[SOS]) {
            assert_eq!((l.len(), l[0].len()), (1, V), "{v}");
        }
    }
}

#[test]
fn zero_act_vector_matches_unconditioned_decoder() {
    for v in [ModelVariant::SetPP, ModelVariant::HierPP, ModelVariant::HierCls] {
        let m = model(v, 4);
        let ctx = context(v);
        let prefix = [SOS, 6, 7];
        let mut tape = Tape::new();
        let zero = m.forward_response(&mut tape, &ctx, &prefix, Some(&ActVector::zeros(m.config.act_dim))).unwrap();
        let none = m.forward_response(&mut tape, &ctx, &prefix, None).unwrap();
        assert_eq!(tape.value(zero), tape.value(none));
        let some = m.forward_response(&mut tape, &ctx, &prefix, Some(&act(m.config.act_dim))).unwrap();
        assert!(tape.value(some).max_abs_diff(tape.value(none)) > 1e-6);
    }
}

#[test]
fn act_embedding_is_linear() {
    let mut m = model(ModelVariant::HierPP, 5);
    let dim = m.config.act_dim;
    let bias: Vec<f64> = (0..m.config.embed()).map(|i| 0.01 * i as f64).collect();
    m.params
        .set_value(&format!("{ACT_EMBED}.b"), Tensor::new(vec![bias.len()], bias.clone()).unwrap())
        .unwrap();
    let w = rows_of(m.params.value(&format!("{ACT_EMBED}.w")).unwrap());
    let embed = |idx: &[usize]| {
        let mut tape = Tape::new();
        let e = m.embed_act(&mut tape, &ActVector::from_indices(dim, idx).unwrap()).unwrap();
        tape.value(e).row(0).to_vec()
    };
    let one: Vec<f64> = w[2].iter().zip(&bias).map(|(a, b)| a + b).collect();
    assert!(max_diff(&[embed(&[2])], &[one]) < 1e-15);
    let two: Vec<f64> = (0..bias.len()).map(|i| w[2][i] + w[5][i] + bias[i]).collect();
    assert!(max_diff(&[embed(&[2, 5])], &[two]) < 1e-15);
    let mut tape = Tape::new();
    assert!(matches!(m.embed_act(&mut tape, &ActVector::zeros(dim + 1)), Err(Error::Shape { .. })));
}

#[test]
fn zeroed_belief_link_gives_an_independent_act_decoder() {
    let mut m = model(ModelVariant::HierJoint, 6);
    let e = m.config.embed();
    m.params.set_value(LINK_BELIEF_TO_ACT, Tensor::zeros(&[e, e])).unwrap();
    let ctx = context(ModelVariant::HierJoint);
    let (b, a, r) = ([SOS, 5, 6], [SOS, 9], [SOS, 11, 12]);
    let mut tape = Tape::new();
    let joint = m.forward_joint(&mut tape, &ctx, &b, &a, &r).unwrap();
    let memory = m.encode(&mut tape, &ctx, false).unwrap();
    let alone = m.decode(&mut tape, "dec.act", &memory, &a, None).unwrap();
    assert_eq!(tape.value(joint.act_logits), tape.value(alone));
    // The response link is still live.
    let resp_alone = m.decode(&mut tape, "dec.resp", &memory, &r, None).unwrap();
    assert!(tape.value(joint.response_logits).max_abs_diff(tape.value(resp_alone)) > 1e-6);
}

#[test]
fn mean_token_embedding_cases() {
    let m = model(ModelVariant::HierJoint, 7);
    let table = rows_of(m.params.value(TOKEN_TABLE).unwrap());
    let mean = |ids: &[usize]| {
        let mut tape = Tape::new();
        let v = m.mean_token_embedding(&mut tape, ids).unwrap();
        tape.value(v).row(0).to_vec()
    };
    assert_eq!(mean(&[9]), table[9]);
    assert!(max_diff(&[mean(&[9, 9])], &[table[9].clone()]) < 1e-15);
    let avg: Vec<f64> = table[5].iter().zip(&table[8]).map(|(a, b)| (a + b) / 2.0).collect();
    assert!(max_diff(&[mean(&[5, 8])], &[avg]) < 1e-15);
    let mut tape = Tape::new();
    assert!(matches!(m.mean_token_embedding(&mut tape, &[]), Err(Error::EmptyMean)));
}

#[test]
fn joint_loss_is_the_sum_of_the_three_cross_entropies() {
    let m = model(ModelVariant::HierJoint, 8);
    let batch = toy_batch(ModelVariant::HierJoint, V, m.config.act_dim).unwrap();
    let mut tape = Tape::new();
    let (_, loss) = m.batch_loss(&mut tape, &batch).unwrap();

    // Token-pooled CE per sequence kind, from the logits and the loop oracle.
    let mut sums = [(0.0, 0usize); 3];
    for item in &batch.items {
        let seqs = [item.belief.clone().unwrap(), item.act_seq.clone().unwrap(), item.response.clone()];
        let mut tape = Tape::new();
        let inp = |s: &Vec<usize>| s[..s.len() - 1].to_vec();
        let o = m.forward_joint(&mut tape, &item.context, &inp(&seqs[0]), &inp(&seqs[1]), &inp(&seqs[2])).unwrap();
        for (k, (logits, seq)) in [o.belief_logits, o.act_logits, o.response_logits].iter().zip(&seqs).enumerate() {
            let tgt = &seq[1..];
            let n = tgt.iter().filter(|&&t| t != PAD).count();
            sums[k].0 += cross_entropy(&rows_of(tape.value(*logits)), tgt, PAD) * n as f64;
            sums[k].1 += n;
        }
    }
    let parts: Vec<f64> = sums.iter().map(|(s, n)| s / *n as f64).collect();
    assert!((loss.belief.unwrap() - parts[0]).abs() < 1e-12);
    assert!((loss.act.unwrap() - parts[1]).abs() < 1e-12);
    assert!((loss.response - parts[2]).abs() < 1e-12);
    assert!((loss.total - parts.iter().sum::<f64>()).abs() < 1e-12);
}

#[test]
fn zeroed_output_layer_gives_ln_v() {
    for v in ModelVariant::ALL {
        let mut m = model(v, 9);
        let h = m.config.hidden();
        for dec in m.config.decoders() {
            m.params.set_value(&format!("{dec}.out.w"), Tensor::zeros(&[h, V])).unwrap();
        }
        let batch = toy_batch(v, V, m.config.act_dim).unwrap();
        let loss = m.evaluate_loss(&batch).unwrap();
        let per_decoder = m.config.decoders().len() as f64;
        assert!((loss.total - per_decoder * (V as f64).ln()).abs() < 1e-12, "{v}");
    }
}

#[test]
fn initial_loss_is_near_ln_v() {
    let m = model(ModelVariant::Hier, 10);
    let loss = m.evaluate_loss(&toy_batch(ModelVariant::Hier, V, 6).unwrap()).unwrap();
    assert!((loss.total - (V as f64).ln()).abs() < 0.5, "{}", loss.total);
}

fn four_example_batch(act_dim: usize) -> ContextBatch {
    let mut items = Vec::new();
    for k in 0..4usize {
        let utts: Vec<Vec<usize>> = (0..=k % 3).map(|u| vec![5 + (u + k) % 7, 6 + k, 12]).collect();
        items.push(EncodedExample {
            dialog_id: format!("d{k}"),
            turn: utts.len(),
            context: ModelContext::from_utterances(&utts).unwrap(),
            response: wrap_sequence(&[7 + k, 13, 14 + k % 2]),
            belief: Some(wrap_sequence(&[15, 5 + k])),
            act_seq: Some(wrap_sequence(&[16])),
            act: Some(ActVector::from_indices(act_dim, &[k % act_dim]).unwrap()),
        });
    }
    batch_examples(&items, 4).unwrap().remove(0)
}

#[test]
fn loss_decreases_over_the_first_twenty_steps() {
    for v in ModelVariant::ALL {
        let mut m = model(v, 11);
        let batch = four_example_batch(m.config.act_dim);
        let adam = AdamConfig::default();
        let mut prev = f64::INFINITY;
        for step in 0..20 {
            let l = m.training_step(&batch, &adam, step).unwrap().total;
            assert!(l < prev, "{v} step {step}: {l} >= {prev}");
            prev = l;
        }
    }
}

#[test]
fn memorizes_a_single_pair() {
    let mut m = model(ModelVariant::Hier, 12);
    let mut batch = four_example_batch(6);
    batch.items.truncate(1);
    let adam = AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    };
    for step in 0..100 {
        m.training_step(&batch, &adam, step).unwrap();
    }
    let loss = m.evaluate_loss(&batch).unwrap().total;
    assert!(loss < 0.1, "{loss}");
}

fn encoder_output(m: &Model, ctx: &ModelContext) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let e = m.encode(&mut tape, ctx, false).unwrap();
    rows_of(tape.value(e.hidden))
}

#[test]
fn hier_without_context_layers_is_set() {
    let set = model(ModelVariant::Set, 13);
    let mut cfg = set.config.clone();
    cfg.variant = ModelVariant::Hier;
    let hier = Model {
        config: cfg,
        params: set.params.clone(),
    };
    let ctx = context(ModelVariant::Set);
    assert_eq!(encoder_output(&set, &ctx), encoder_output(&hier, &ctx));
}

#[test]
fn hier_without_shared_layers_is_mat() {
    let mat = model(ModelVariant::Mat, 14);
    assert_eq!(mat.config.encoder.m_shared, 0);
    let mut cfg = mat.config.clone();
    cfg.variant = ModelVariant::Hier;
    let hier = Model {
        config: cfg,
        params: mat.params.clone(),
    };
    let ctx = context(ModelVariant::Mat);
    assert_eq!(encoder_output(&mat, &ctx), encoder_output(&hier, &ctx));
}

#[test]
fn set_encodes_utterances_independently() {
    let m = model(ModelVariant::Set, 15);
    let utts = vec![vec![5, 6, 7], vec![8, 9], vec![10, 11, 12, 13]];
    let together = encoder_output(&m, &ModelContext::from_utterances(&utts).unwrap());
    let mut start = 0;
    for u in &utts {
        let alone = encoder_output(&m, &ModelContext::from_utterances(std::slice::from_ref(u)).unwrap());
        assert!(max_diff(&together[start..start + u.len()], &alone) < 1e-9);
        start += u.len();
    }
}

#[test]
fn response_loss_reaches_the_joint_links() {
    let m = model(ModelVariant::HierJoint, 16);
    let mut params = m.params.clone();
    let ctx = context(ModelVariant::HierJoint);
    let mut tape = Tape::new();
    let o = m.forward_joint(&mut tape, &ctx, &[SOS, 5, 6], &[SOS, 9], &[SOS, 11, 12]).unwrap();
    let loss = tape.cross_entropy(o.response_logits, &[11, 12, EOS], PAD).unwrap();
    params.zero_grad();
    tape.backward(loss, &mut params).unwrap();
    for link in [LINK_BELIEF_TO_RESP, LINK_ACT_TO_RESP] {
        let g = params.grad(link).expect("link gradient");
        assert!(g.data().iter().any(|x| x.abs() > 1e-8), "{link}");
    }
    // Teacher forcing feeds gold belief tokens, so the belief decoder's
    // own layers get nothing from the response loss.
    let belief_grad: f64 = params
        .iter()
        .filter(|(n, _)| n.starts_with("dec.belief."))
        .filter_map(|(n, _)| params.grad(n))
        .flat_map(|g| g.data().to_vec())
        .map(f64::abs)
        .sum();
    assert_eq!(belief_grad, 0.0);
}

#[test]
fn prefixes_and_context_length_are_checked() {
    let mut m = model(ModelVariant::Hier, 17);
    let ctx = context(ModelVariant::Hier);
    let mut tape = Tape::new();
    assert!(matches!(m.forward_response(&mut tape, &ctx, &[5, 6], None), Err(Error::Config(_))));
    assert!(matches!(m.forward_response(&mut tape, &ctx, &[], None), Err(Error::Config(_))));
    m.config.max_context_len = 5;
    assert!(matches!(
        m.forward_response(&mut tape, &ctx, &[SOS], None),
        Err(Error::ContextTooLong { len: 9, max: 5 })
    ));
    let j = model(ModelVariant::HierJoint, 17);
    assert!(j.forward_joint(&mut tape, &ctx, &[SOS], &[], &[SOS]).is_err());
}

#[test]
fn training_is_bit_reproducible() {
    let run = || {
        let mut cfg = tiny_config(ModelVariant::HierPP, V);
        cfg.encoder.dropout = 0.1;
        let mut m = build_model(cfg, 18, false).unwrap();
        let batch = four_example_batch(m.config.act_dim);
        for step in 0..5 {
            m.training_step(&batch, &AdamConfig::default(), step).unwrap();
        }
        m.params.flat_values()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn variant_configuration_rules() {
    let mut cfg = ModelConfig::preset(ModelVariant::Mat, 100);
    cfg.encoder.m_shared = 1;
    assert!(build_model(cfg, 0, false).is_err());
    let mut cfg = ModelConfig::preset(ModelVariant::Set, 100);
    cfg.encoder.n_context = 2;
    assert!(build_model(cfg, 0, false).is_err());
    let p = ModelConfig::preset(ModelVariant::HierPP, 100);
    assert_eq!(p.encoder.hidden / p.encoder.heads, 13);
    assert_eq!((p.encoder.m_shared, p.encoder.n_context, p.decoder_layers), (4, 6, 3));
    let s = ModelConfig::preset(ModelVariant::SetPP, 100);
    assert_eq!((s.encoder.m_shared, s.encoder.n_context, s.encoder.hidden, s.encoder.heads, s.encoder.embed), (4, 0, 91, 7, 175));
    let mat = ModelConfig::preset(ModelVariant::Mat, 100);
    assert_eq!((mat.encoder.n_context, mat.decoder_layers, mat.encoder.hidden, mat.encoder.heads), (4, 6, 200, 5));
}
