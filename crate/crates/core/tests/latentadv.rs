use ganpo::diffcore::{sigmoid, Tape};
use ganpo::latentadv::{DiscConfig, DiscriminatorPair, QuadLatents};
use ganpo::nanolm::{LmConfig, NanoLm};
use ganpo::nn::Bound;
use ganpo::prefdata::{CharTokenizer, PreferenceBatch, PreferenceRecord};
use ganpo::trainer::sgd_step;

fn lm() -> NanoLm {
    NanoLm::init(&LmConfig { d_model: 16, n_layers: 1, n_heads: 2, max_seq_len: 24, seed: 3, ..LmConfig::default() }).unwrap()
}

fn batch() -> PreferenceBatch {
    let recs: Vec<PreferenceRecord> = [("Sa", "abcd", "dcba"), ("Sc", "cde", "edc"), ("Sb", "bbh", "hbb")]
        .iter()
        .map(|(p, c, r)| PreferenceRecord { prompt: p.to_string(), chosen: c.to_string(), rejected: r.to_string(), scores: (1.0, 0.5) })
        .collect();
    PreferenceBatch::encode(&recs.iter().collect::<Vec<_>>(), &CharTokenizer::default()).unwrap()
}

fn pair() -> DiscriminatorPair {
    DiscriminatorPair::new(&DiscConfig { d_in: 16, hidden: 8, n_layers: 1, n_heads: 2, seed: 9, ..DiscConfig::default() }).unwrap()
}

/// Mean of σ(C_pos(h_θ+) − μ_pos) for the policy's chosen latents.
fn pos_acceptance(policy: &NanoLm, d: &DiscriminatorPair, b: &PreferenceBatch) -> f64 {
    let h = policy.forward(&b.chosen).unwrap().last_hidden;
    let s = d.pos.score(&h, &b.chosen.attn_mask, None).unwrap();
    s.iter().map(|x| sigmoid(x - d.mu_pos)).sum::<f64>() / s.len() as f64
}

struct GenPass {
    tape: Tape,
    policy_params: Bound,
    ref_params: Bound,
    disc_params: Vec<Bound>,
    latents: [ganpo::diffcore::Var; 4],
}

fn gen_pass(policy: &NanoLm, reference: &NanoLm, d: &DiscriminatorPair, b: &PreferenceBatch) -> GenPass {
    let mut tape = Tape::new();
    let pp = policy.bind(&mut tape);
    let rp = reference.bind(&mut tape);
    let (_, hc) = policy.forward_on(&mut tape, &pp, &b.chosen).unwrap();
    let (_, hr) = policy.forward_on(&mut tape, &pp, &b.rejected).unwrap();
    let (_, rc) = reference.forward_on(&mut tape, &rp, &b.chosen).unwrap();
    let (_, rr) = reference.forward_on(&mut tape, &rp, &b.rejected).unwrap();
    let masks = (&b.chosen.attn_mask, &b.rejected.attn_mask);
    let c = ganpo::diffcore::Tensor::zeros(&[16]);
    let g = d.gen_adv_loss(&mut tape, rc, hc, rr, hr, masks, (&c, &c)).unwrap();
    tape.backward(g.l_adv).unwrap();
    GenPass { tape, policy_params: pp, ref_params: rp, disc_params: vec![g.pos_params, g.neg_params], latents: [rc, rr, hc, hr] }
}

#[test]
fn one_generator_step_raises_policy_acceptance() {
    let b = batch();
    let d = pair();
    for seed in 0..3u64 {
        let mut policy = NanoLm::init(&LmConfig { seed, ..lm().config().clone() }).unwrap();
        let reference = policy.frozen_copy();
        let before = pos_acceptance(&policy, &d, &b);
        let pass = gen_pass(&policy, &reference, &d, &b);
        let grads = pass.policy_params.grads(&pass.tape);
        sgd_step(policy.params_mut().unwrap(), &grads, 1e-2);
        let after = pos_acceptance(&policy, &d, &b);
        assert!(after > before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn adversarial_loss_only_reaches_the_policy() {
    let b = batch();
    let policy = lm();
    let reference = policy.frozen_copy();
    let pass = gen_pass(&policy, &reference, &pair(), &b);
    for bound in pass.disc_params.iter().chain([&pass.ref_params]) {
        for &v in bound.vars() {
            assert!(pass.tape.grad(v).is_none());
        }
    }
    assert!(pass.tape.grad(pass.latents[0]).is_none() && pass.tape.grad(pass.latents[1]).is_none());
    let total: f64 = pass.policy_params.grads(&pass.tape).iter().map(|g| g.sq_norm()).sum();
    assert!(total > 0.0);
}

#[test]
fn discriminator_losses_never_reach_the_policy() {
    let b = batch();
    let policy = lm();
    let reference = policy.frozen_copy();
    let mut d = pair();
    let mut tape = Tape::new();
    let pp = policy.bind(&mut tape);
    let (_, hc) = policy.forward_on(&mut tape, &pp, &b.chosen).unwrap();
    let (_, hr) = policy.forward_on(&mut tape, &pp, &b.rejected).unwrap();
    let quad = QuadLatents {
        ref_pos: reference.forward(&b.chosen).unwrap().last_hidden,
        ref_neg: reference.forward(&b.rejected).unwrap().last_hidden,
        theta_pos: tape.value(hc).clone(),
        theta_neg: tape.value(hr).clone(),
        mask_pos: b.chosen.attn_mask.clone(),
        mask_neg: b.rejected.attn_mask.clone(),
    };
    let (mu_before, _) = (d.mu_pos, d.mu_neg);
    let (lp, ln, s) = d.disc_losses(&mut tape, &quad, 0.9).unwrap();
    let total = tape.add(lp, ln).unwrap();
    tape.backward(total).unwrap();
    assert!(pp.vars().iter().all(|&v| tape.grad(v).is_none()));
    assert!(tape.grad(hc).is_none() && tape.grad(hr).is_none());
    let disc_norm: f64 = s.pos_params.grads(&tape).iter().map(|g| g.sq_norm()).sum();
    assert!(disc_norm > 0.0);
    assert_ne!(d.mu_pos, mu_before);
}
