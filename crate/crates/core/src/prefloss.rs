//! Sequence log-probabilities and offline preference losses (DPO, SimPO),
//! plus the implicit reward margin.

use serde::{Deserialize, Serialize};

use crate::diffcore::{log_sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Dpo,
    Simpo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefLossConfig {
    pub beta: f64,
    pub gamma: f64,
    pub objective: Objective,
}

impl PrefLossConfig {
    pub fn dpo(beta: f64) -> Self {
        PrefLossConfig {
            beta,
            gamma: 0.0,
            objective: Objective::Dpo,
        }
    }

    pub fn simpo() -> Self {
        PrefLossConfig {
            beta: 2.0,
            gamma: 0.5,
            objective: Objective::Simpo,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "need beta > 0 and gamma >= 0, got beta={} gamma={}",
                self.beta, self.gamma
            )));
        }
        Ok(())
    }
}

/// Summed response log-probability per sequence, `[B]`.
///
/// `logits: [B, T, V]`; position `t` predicts `targets[t + 1]`. The
/// response mask `[B, T]` marks target positions to count.
pub fn sequence_logprob(tape: &mut Tape, logits: Var, targets: &[usize], response_mask: &Tensor) -> Result<Var> {
    let &[b, t, v] = tape.shape(logits) else {
        return Err(Error::Shape("logits must be [B, T, V]".into()));
    };
    if targets.len() != b * t || response_mask.shape() != [b, t] {
        return Err(Error::Shape("targets and response mask must be [B, T]".into()));
    }
    let mut ids = vec![0usize; b * t];
    let mut weight = vec![0.0; b * t];
    for bi in 0..b {
        let mut count = 0.0;
        for ti in 0..t.saturating_sub(1) {
            let m = response_mask.data()[bi * t + ti + 1];
            if m != 0.0 {
                ids[bi * t + ti] = targets[bi * t + ti + 1];
                weight[bi * t + ti] = m;
                count += m;
            }
        }
        if count == 0.0 {
            return Err(Error::Contract(format!("response mask selects no positions in row {bi}")));
        }
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(Error::Domain(format!("target {bad} outside vocabulary of {v}")));
    }
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick(lp, &ids)?;
    let w = tape.constant(Tensor::new(&[b, t], weight)?);
    let masked = tape.mul(picked, w)?;
    tape.sum_axis(masked, 1)
}

/// The four per-sequence log-probabilities of a preference batch, each `[B]`,
/// and the response lengths.
#[derive(Clone, Debug)]
pub struct LogProbQuad {
    pub policy_chosen: Var,
    pub policy_rejected: Var,
    pub ref_chosen: Var,
    pub ref_rejected: Var,
    pub len_chosen: Vec<f64>,
    pub len_rejected: Vec<f64>,
}

/// `β[(lp_θw − lp_refw) − (lp_θl − lp_refl)]` per example.
fn dpo_arg(tape: &mut Tape, q: &LogProbQuad, beta: f64) -> Result<Var> {
    let w = tape.sub(q.policy_chosen, q.ref_chosen)?;
    let l = tape.sub(q.policy_rejected, q.ref_rejected)?;
    let d = tape.sub(w, l)?;
    Ok(tape.scale(d, beta))
}

fn neg_log_sigmoid_mean(tape: &mut Tape, arg: Var) -> Var {
    let ls = tape.log_sigmoid(arg);
    let m = tape.mean(ls);
    tape.neg(m)
}

pub fn dpo_loss(tape: &mut Tape, q: &LogProbQuad, beta: f64) -> Result<Var> {
    let arg = dpo_arg(tape, q, beta)?;
    Ok(neg_log_sigmoid_mean(tape, arg))
}

pub fn simpo_loss(tape: &mut Tape, q: &LogProbQuad, beta: f64, gamma: f64) -> Result<Var> {
    let lw = tape.constant(Tensor::from_vec(q.len_chosen.clone()));
    let ll = tape.constant(Tensor::from_vec(q.len_rejected.clone()));
    let w = tape.div(q.policy_chosen, lw)?;
    let l = tape.div(q.policy_rejected, ll)?;
    let d = tape.sub(w, l)?;
    let d = tape.scale(d, beta);
    let arg = tape.add_scalar(d, -gamma);
    Ok(neg_log_sigmoid_mean(tape, arg))
}

pub fn preference_loss(tape: &mut Tape, q: &LogProbQuad, cfg: &PrefLossConfig) -> Result<Var> {
    match cfg.objective {
        Objective::Dpo => dpo_loss(tape, q, cfg.beta),
        Objective::Simpo => simpo_loss(tape, q, cfg.beta, cfg.gamma),
    }
}

/// Batch-mean implicit reward margin.
pub fn reward_margin(tape: &Tape, q: &LogProbQuad, beta: f64) -> f64 {
    QuadValues::from_tape(tape, q).reward_margins(beta).iter().sum::<f64>() / q.len_chosen.len() as f64
}

/// Plain-number version of [`LogProbQuad`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadValues {
    pub policy_chosen: Vec<f64>,
    pub policy_rejected: Vec<f64>,
    pub ref_chosen: Vec<f64>,
    pub ref_rejected: Vec<f64>,
    pub len_chosen: Vec<f64>,
    pub len_rejected: Vec<f64>,
}

impl QuadValues {
    pub fn from_tape(tape: &Tape, q: &LogProbQuad) -> Self {
        QuadValues {
            policy_chosen: tape.value(q.policy_chosen).data().to_vec(),
            policy_rejected: tape.value(q.policy_rejected).data().to_vec(),
            ref_chosen: tape.value(q.ref_chosen).data().to_vec(),
            ref_rejected: tape.value(q.ref_rejected).data().to_vec(),
            len_chosen: q.len_chosen.clone(),
            len_rejected: q.len_rejected.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.policy_chosen.len();
        let cols = [
            &self.policy_rejected,
            &self.ref_chosen,
            &self.ref_rejected,
            &self.len_chosen,
            &self.len_rejected,
        ];
        if n == 0 || cols.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("all quad columns must share a non-zero length".into()));
        }
        let lps = [&self.policy_chosen, &self.policy_rejected, &self.ref_chosen, &self.ref_rejected];
        if lps.iter().any(|c| c.iter().any(|&x| !(x <= 0.0))) {
            return Err(Error::Contract("log-probabilities must be <= 0".into()));
        }
        if [&self.len_chosen, &self.len_rejected].iter().any(|c| c.iter().any(|&x| !(x >= 1.0))) {
            return Err(Error::Contract("response lengths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn reward_margins(&self, beta: f64) -> Vec<f64> {
        (0..self.policy_chosen.len())
            .map(|i| {
                beta * ((self.policy_chosen[i] - self.ref_chosen[i]) - (self.policy_rejected[i] - self.ref_rejected[i]))
            })
            .collect()
    }

    /// SimPO's length-normalized margin, `β·lp_w/len_w − β·lp_l/len_l`.
    pub fn normalized_margins(&self, beta: f64) -> Vec<f64> {
        (0..self.policy_chosen.len())
            .map(|i| beta * (self.policy_chosen[i] / self.len_chosen[i] - self.policy_rejected[i] / self.len_rejected[i]))
            .collect()
    }

    pub fn reward_margin(&self, beta: f64) -> f64 {
        mean(&self.reward_margins(beta))
    }

    pub fn dpo_loss(&self, beta: f64) -> f64 {
        mean(&self.reward_margins(beta).iter().map(|&m| -log_sigmoid(m)).collect::<Vec<_>>())
    }

    pub fn simpo_loss(&self, beta: f64, gamma: f64) -> f64 {
        mean(&self.normalized_margins(beta).iter().map(|&m| -log_sigmoid(m - gamma)).collect::<Vec<_>>())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn on_tape(tape: &mut Tape, v: &QuadValues) -> LogProbQuad {
        let mut c = |x: &Vec<f64>, grad: bool| tape.leaf(Tensor::from_vec(x.clone()), grad);
        LogProbQuad {
            policy_chosen: c(&v.policy_chosen, true),
            policy_rejected: c(&v.policy_rejected, true),
            ref_chosen: c(&v.ref_chosen, false),
            ref_rejected: c(&v.ref_rejected, false),
            len_chosen: v.len_chosen.clone(),
            len_rejected: v.len_rejected.clone(),
        }
    }

    fn quad(pc: &[f64], pr: &[f64], rc: &[f64], rr: &[f64]) -> QuadValues {
        QuadValues {
            policy_chosen: pc.to_vec(),
            policy_rejected: pr.to_vec(),
            ref_chosen: rc.to_vec(),
            ref_rejected: rr.to_vec(),
            len_chosen: vec![4.0; pc.len()],
            len_rejected: vec![5.0; pc.len()],
        }
    }

    fn random_quad(rng: &mut impl Rng, n: usize) -> QuadValues {
        let mut col = || (0..n).map(|_| -rng.random_range(0.1..30.0)).collect::<Vec<f64>>();
        let (pc, pr, rc, rr) = (col(), col(), col(), col());
        let mut q = quad(&pc, &pr, &rc, &rr);
        q.len_chosen = (0..n).map(|_| rng.random_range(1..12) as f64).collect();
        q.len_rejected = (0..n).map(|_| rng.random_range(1..12) as f64).collect();
        q
    }

    fn tape_dpo(v: &QuadValues, beta: f64) -> f64 {
        let mut tape = Tape::new();
        let q = on_tape(&mut tape, v);
        let l = dpo_loss(&mut tape, &q, beta).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn uniform_logits_give_minus_l_ln_v() {
        let (v, t) = (7, 6);
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, t, v]));
        let mask = Tensor::new(&[1, t], vec![0., 0., 1., 1., 1., 0.]).unwrap();
        let lp = sequence_logprob(&mut tape, logits, &[1, 2, 3, 4, 5, 6], &mask).unwrap();
        assert!((tape.value(lp).data()[0] + 3.0 * (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero() {
        let (v, t) = (5, 4);
        let targets = [0, 3, 1, 4];
        let mut data = vec![0.0; t * v];
        for ti in 0..t - 1 {
            data[ti * v + targets[ti + 1]] = 50.0;
        }
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(&[1, t, v], data).unwrap());
        let mask = Tensor::new(&[1, t], vec![0., 1., 1., 1.]).unwrap();
        let lp = sequence_logprob(&mut tape, logits, &targets, &mask).unwrap();
        assert!(tape.value(lp).data()[0].abs() < 1e-18_f64.max(4.0 * (-50.0f64).exp() * v as f64));
    }

    #[test]
    fn logprob_matches_per_token_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (b, t, v) = (2, 6, 9);
        let logits = Tensor::randn(&[b, t, v], 2.0, &mut rng);
        let targets: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..v)).collect();
        let mask = Tensor::new(&[b, t], vec![0., 0., 1., 1., 1., 0., 0., 1., 1., 1., 1., 1.]).unwrap();
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let lp = sequence_logprob(&mut tape, lv, &targets, &mask).unwrap();
        for bi in 0..b {
            let mut want = 0.0;
            for ti in 1..t {
                if mask.data()[bi * t + ti] == 1.0 {
                    let row = &logits.data()[(bi * t + ti - 1) * v..][..v];
                    let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
                    want += row[targets[bi * t + ti]] - lse;
                }
            }
            assert!((tape.value(lp).data()[bi] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mask_is_a_contract_error() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 3, 4]));
        let mask = Tensor::new(&[1, 3], vec![1., 0., 0.]).unwrap();
        assert!(matches!(
            sequence_logprob(&mut tape, logits, &[0, 1, 2], &mask),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dpo_reference_values() {
        let same = quad(&[-3.0], &[-4.0], &[-3.0], &[-4.0]);
        assert!((tape_dpo(&same, 0.1) - LN_2).abs() < 1e-15);
        assert_eq!(same.reward_margin(0.1), 0.0);
        let shifted = quad(&[-2.0], &[-10.0], &[-5.0], &[-3.0]);
        assert!((tape_dpo(&shifted, 0.1) - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn dpo_batch_is_mean_of_examples() {
        let q = quad(&[-2.0, -7.0], &[-10.0, -1.0], &[-5.0, -3.0], &[-3.0, -2.5]);
        let a = tape_dpo(&quad(&[-2.0], &[-10.0], &[-5.0], &[-3.0]), 0.1);
        let b = tape_dpo(&quad(&[-7.0], &[-1.0], &[-3.0], &[-2.5]), 0.1);
        assert!((tape_dpo(&q, 0.1) - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn simpo_reference_values() {
        let mut q = quad(&[-4.0], &[-5.0], &[-1.0], &[-1.0]);
        let run = |q: &QuadValues, g: f64| {
            let mut tape = Tape::new();
            let lq = on_tape(&mut tape, q);
            let l = simpo_loss(&mut tape, &lq, 2.0, g).unwrap();
            tape.value(l).item().unwrap()
        };
        assert!((run(&q, 0.0) - LN_2).abs() < 1e-15);
        let g = run(&q, 0.5);
        assert!((g + log_sigmoid(-0.5)).abs() < 1e-15 && g > LN_2);
        q.ref_chosen = vec![-100.0];
        assert_eq!(run(&q, 0.5), g);
    }

    #[test]
    fn tape_losses_match_scalar_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = random_quad(&mut rng, 4);
            let mut tape = Tape::new();
            let lq = on_tape(&mut tape, &q);
            let s = simpo_loss(&mut tape, &lq, 2.0, 0.5).unwrap();
            let d = dpo_loss(&mut tape, &lq, 0.1).unwrap();
            let direct_simpo = (0..4)
                .map(|i| {
                    let z = 2.0 * q.policy_chosen[i] / q.len_chosen[i] - 2.0 * q.policy_rejected[i] / q.len_rejected[i] - 0.5;
                    (1.0 + (-z).exp()).ln()
                })
                .sum::<f64>()
                / 4.0;
            assert!((tape.value(s).item().unwrap() - direct_simpo).abs() < 1e-12);
            assert!((tape.value(d).item().unwrap() - q.dpo_loss(0.1)).abs() < 1e-12);
            assert!((reward_margin(&tape, &lq, 0.1) - q.reward_margin(0.1)).abs() < 1e-15);
        }
    }

    #[test]
    fn reference_logprobs_receive_no_gradient() {
        let q = quad(&[-2.0], &[-10.0], &[-5.0], &[-3.0]);
        let mut tape = Tape::new();
        let lq = on_tape(&mut tape, &q);
        let l = dpo_loss(&mut tape, &lq, 0.1).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(lq.ref_chosen).is_none() && tape.grad(lq.ref_rejected).is_none());
        assert!(tape.grad(lq.policy_chosen).unwrap().data()[0] < 0.0);
    }

    #[test]
    fn dpo_decreases_along_a_gap_sweep() {
        let mut prev = f64::INFINITY;
        for k in -40..=40 {
            let gap = k as f64 * 0.5;
            let l = tape_dpo(&quad(&[-5.0 + gap / 2.0], &[-5.0 - gap / 2.0], &[-5.0], &[-5.0]), 0.1);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn invalid_quads_and_configs_are_rejected() {
        assert!(quad(&[0.5], &[-1.0], &[-1.0], &[-1.0]).validate().is_err());
        let mut q = quad(&[-0.5], &[-1.0], &[-1.0], &[-1.0]);
        assert!(q.validate().is_ok());
        q.len_chosen = vec![0.0];
        assert!(q.validate().is_err());
        assert!(PrefLossConfig::dpo(0.0).validate().is_err());
        assert!(PrefLossConfig::simpo().validate().is_ok());
    }

    proptest! {
        #[test]
        fn single_example_loss_is_minus_log_sigmoid_of_margin(
            pc in -50.0..0.0f64, pr in -50.0..0.0f64, rc in -50.0..0.0f64, rr in -50.0..0.0f64, beta in 0.01..2.0f64,
        ) {
            let q = quad(&[pc], &[pr], &[rc], &[rr]);
            let loss = tape_dpo(&q, beta);
            prop_assert!(loss >= 0.0);
            prop_assert_eq!(loss, -log_sigmoid(q.reward_margin(beta)));
            let swapped = quad(&[pr], &[pc], &[rr], &[rc]);
            prop_assert_eq!(swapped.reward_margin(beta), -q.reward_margin(beta));
        }
    }
}
