//! Exact divergence computations on small discrete distributions.
//!
//! The relativistic divergence of two distributions on a shared finite
//! support is a supremum over critic vectors `C`:
//!
//! `D(p, q) = sup_C Σ p_i f(C_i − m_q) + Σ q_j f(m_p − C_j)`
//!
//! with `m_p = Σ p·C`, `m_q = Σ q·C` and `f(x) = log σ(x) + ln 2`. The
//! objective is concave in `C`, so projected gradient ascent inside a box
//! finds the supremum up to the box slack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::Serialize;

use crate::diffcore::{log_sigmoid, sigmoid};
use crate::error::{Error, Result};

pub const MAX_SUPPORT: usize = 16;
const LN_2: f64 = std::f64::consts::LN_2;

/// `log σ(x) + ln 2`.
pub fn f_transform(x: f64) -> f64 {
    log_sigmoid(x) + LN_2
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiscreteDist {
    pub support: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DiscreteDist {
    /// Distribution over the points `0, 1, …, k−1`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let support = (0..probs.len()).map(|i| i as f64).collect();
        Self::with_support(support, probs)
    }

    pub fn with_support(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.len() > MAX_SUPPORT || support.len() != probs.len() {
            return Err(Error::Shape(format!(
                "support size must be 1..={MAX_SUPPORT} and match the probabilities"
            )));
        }
        if probs.iter().any(|&x| !(x >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Domain("probabilities must be nonnegative and sum to 1".into()));
        }
        Ok(DiscreteDist { support, probs })
    }

    /// A random distribution on `k` points (uniform on the simplex).
    pub fn random(k: usize, rng: &mut impl Rng) -> Result<Self> {
        let w: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = w.iter().sum();
        let mut probs: Vec<f64> = w.iter().map(|x| x / total).collect();
        // Put the rounding residue on the largest entry.
        let resid = 1.0 - probs.iter().sum::<f64>();
        let imax = (0..k).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
        probs[imax] += resid;
        Self::new(probs)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn check_common(p: &DiscreteDist, q: &DiscreteDist) -> Result<()> {
    if p.support != q.support {
        return Err(Error::Shape("distributions must share a support".into()));
    }
    Ok(())
}

/// An increasing concave link `f` with `f(0) = 0`.
pub trait CriticLink {
    fn f(&self, x: f64) -> f64;
    fn df(&self, x: f64) -> f64;
    fn sup(&self) -> f64;
}

/// `f(x) = log σ(x) + ln 2`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LogSigmoidLink;

impl CriticLink for LogSigmoidLink {
    fn f(&self, x: f64) -> f64 {
        f_transform(x)
    }
    fn df(&self, x: f64) -> f64 {
        sigmoid(-x)
    }
    fn sup(&self) -> f64 {
        LN_2
    }
}

/// `f(x) = 1 − e^{−x}`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExpLink;

impl CriticLink for ExpLink {
    fn f(&self, x: f64) -> f64 {
        -(-x).exp_m1()
    }
    fn df(&self, x: f64) -> f64 {
        (-x).exp()
    }
    fn sup(&self) -> f64 {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AscentConfig {
    pub starts: usize,
    pub iters: usize,
    /// Critic values are confined to `[−bound, bound]`.
    pub bound: f64,
    /// Projected-gradient norm above which a result is flagged.
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        AscentConfig {
            starts: 8,
            iters: 2000,
            bound: 50.0,
            grad_tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleResult {
    pub value: f64,
    pub critic: Vec<f64>,
    /// Projected-gradient norm at the best start's final iterate.
    pub grad_norm: f64,
    pub converged: bool,
}

fn project(x: &mut [f64], bound: f64) {
    x.iter_mut().for_each(|v| *v = v.clamp(-bound, bound));
}

fn projected_grad_norm(x: &[f64], g: &[f64], bound: f64) -> f64 {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| {
            let blocked = (xi >= bound && gi > 0.0) || (xi <= -bound && gi < 0.0);
            if blocked {
                0.0
            } else {
                gi * gi
            }
        })
        .sum::<f64>()
        .sqrt()
}

/// Maximize a concave function over the box by multi-start projected
/// gradient ascent with backtracking. `obj` returns value and gradient.
pub fn maximize_concave<F>(obj: F, dim: usize, cfg: &AscentConfig) -> OracleResult
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<OracleResult> = None;
    for s in 0..cfg.starts.max(1) {
        let mut x: Vec<f64> = if s == 0 {
            vec![0.0; dim]
        } else {
            (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect()
        };
        project(&mut x, cfg.bound);
        let (mut val, mut g) = obj(&x);
        let mut step = 1.0;
        for _ in 0..cfg.iters {
            if projected_grad_norm(&x, &g, cfg.bound) < 1e-14 {
                break;
            }
            let mut accepted = false;
            for _ in 0..60 {
                let mut cand: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + step * b).collect();
                project(&mut cand, cfg.bound);
                let moved: f64 = cand.iter().zip(&x).zip(&g).map(|((c, a), b)| (c - a) * b).sum();
                let (cv, cg) = obj(&cand);
                if cv >= val + 1e-4 * moved && cv.is_finite() {
                    x = cand;
                    val = cv;
                    g = cg;
                    accepted = true;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        let gn = projected_grad_norm(&x, &g, cfg.bound);
        let r = OracleResult {
            value: val,
            critic: x,
            grad_norm: gn,
            converged: gn <= cfg.grad_tol,
        };
        if best.as_ref().is_none_or(|b| r.value > b.value) {
            best = Some(r);
        }
    }
    best.expect("at least one start")
}

/// Objective and gradient of the relativistic divergence for critic `c`.
pub fn dra_objective(p: &[f64], q: &[f64], c: &[f64], link: &dyn CriticLink) -> (f64, Vec<f64>) {
    let mp: f64 = p.iter().zip(c).map(|(a, b)| a * b).sum();
    let mq: f64 = q.iter().zip(c).map(|(a, b)| a * b).sum();
    let k = c.len();
    let mut val = 0.0;
    let mut sum_p_df = 0.0;
    let mut sum_q_df = 0.0;
    let mut dfp = vec![0.0; k];
    let mut dfq = vec![0.0; k];
    for i in 0..k {
        val += p[i] * link.f(c[i] - mq) + q[i] * link.f(mp - c[i]);
        dfp[i] = link.df(c[i] - mq);
        dfq[i] = link.df(mp - c[i]);
        sum_p_df += p[i] * dfp[i];
        sum_q_df += q[i] * dfq[i];
    }
    let grad = (0..k)
        .map(|i| p[i] * dfp[i] - q[i] * sum_p_df + p[i] * sum_q_df - q[i] * dfq[i])
        .collect();
    (val, grad)
}

/// Brute-force relativistic divergence with the log-sigmoid link.
pub fn dra_bruteforce(p: &DiscreteDist, q: &DiscreteDist) -> Result<OracleResult> {
    dra_bruteforce_with(p, q, &LogSigmoidLink, &AscentConfig::default())
}

pub fn dra_bruteforce_with(
    p: &DiscreteDist,
    q: &DiscreteDist,
    link: &dyn CriticLink,
    cfg: &AscentConfig,
) -> Result<OracleResult> {
    check_common(p, q)?;
    Ok(maximize_concave(|c| dra_objective(&p.probs, &q.probs, c, link), p.len(), cfg))
}

/// `sup_C Σ p_i log σ(C_i) + q_i log σ(−C_i)`, by the same ascent.
pub fn gan_dual_bruteforce(p: &DiscreteDist, q: &DiscreteDist, cfg: &AscentConfig) -> Result<OracleResult> {
    check_common(p, q)?;
    let (pp, qq) = (&p.probs, &q.probs);
    Ok(maximize_concave(
        |c| {
            let val = (0..c.len())
                .map(|i| pp[i] * log_sigmoid(c[i]) + qq[i] * log_sigmoid(-c[i]))
                .sum();
            let grad = (0..c.len())
                .map(|i| pp[i] * sigmoid(-c[i]) - qq[i] * sigmoid(c[i]))
                .collect();
            (val, grad)
        },
        p.len(),
        cfg,
    ))
}

/// `½ KL(p‖m) + ½ KL(q‖m)` with `m = ½(p + q)` and `0·log 0 = 0`.
pub fn jsd_exact(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    check_common(p, q)?;
    let kl_half = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * kl_half(a, m) + 0.5 * kl_half(b, m)
        })
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Run the divergence property checks on random distributions of the
/// given support size: non-negativity, identity of indiscernibles, the
/// `ln 4` upper bound, and agreement of the GAN dual with the exact JSD.
pub fn verify_properties(support: usize, trials: usize, seed: u64) -> Result<Vec<PropertyCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AscentConfig {
        seed,
        ..AscentConfig::default()
    };
    let ln4 = 2.0 * LN_2;
    let (mut min_val, mut max_val, mut max_same, mut worst_dual, mut flagged) =
        (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, 0.0f64, 0usize);
    for _ in 0..trials {
        let p = DiscreteDist::random(support, &mut rng)?;
        let q = DiscreteDist::random(support, &mut rng)?;
        let d = dra_bruteforce_with(&p, &q, &LogSigmoidLink, &cfg)?;
        flagged += usize::from(!d.converged);
        min_val = min_val.min(d.value);
        max_val = max_val.max(d.value);
        let same = dra_bruteforce_with(&p, &p, &LogSigmoidLink, &cfg)?;
        max_same = max_same.max(same.value.abs());
        let dual = gan_dual_bruteforce(&p, &q, &cfg)?;
        worst_dual = worst_dual.max((dual.value + ln4 - 2.0 * jsd_exact(&p, &q)?).abs());
    }
    let f0 = f_transform(0.0);
    let df0 = LogSigmoidLink.df(0.0);
    let fbig = f_transform(50.0);
    Ok(vec![
        PropertyCheck {
            name: "link_identities".into(),
            passed: f0.abs() < 1e-15 && (df0 - 0.5).abs() < 1e-15 && (fbig - LN_2).abs() < 1e-12,
            detail: format!("f(0)={f0:e} f'(0)={df0} f(50)={fbig}"),
        },
        PropertyCheck {
            name: "non_negative".into(),
            passed: min_val >= -1e-4,
            detail: format!("min over {trials} pairs = {min_val:e}"),
        },
        PropertyCheck {
            name: "zero_on_identical".into(),
            passed: max_same <= 1e-3,
            detail: format!("max |D(p,p)| = {max_same:e}"),
        },
        PropertyCheck {
            name: "upper_bound_ln4".into(),
            passed: max_val <= ln4 + 1e-3,
            detail: format!("max = {max_val} (ln 4 = {ln4})"),
        },
        PropertyCheck {
            name: "gan_dual_matches_jsd".into(),
            passed: worst_dual <= 1e-3,
            detail: format!("max |dual + ln 4 − 2·JSD| = {worst_dual:e}"),
        },
        PropertyCheck {
            name: "ascent_converged".into(),
            passed: flagged == 0,
            detail: format!("{flagged} of {trials} optimizations flagged"),
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_4: f64 = 2.0 * LN_2;

    #[test]
    fn link_values() {
        assert_eq!(f_transform(0.0), 0.0);
        assert!((f_transform(60.0) - LN_2).abs() < 1e-15);
        let h = 1e-6;
        assert!(((f_transform(h) - f_transform(-h)) / (2.0 * h) - 0.5).abs() < 1e-9);
        for link in [&LogSigmoidLink as &dyn CriticLink, &ExpLink] {
            assert!(link.f(0.0).abs() < 1e-15);
            let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.25).collect();
            for w in xs.windows(3) {
                let (a, b, c) = (link.f(w[0]), link.f(w[1]), link.f(w[2]));
                assert!(a < b && b < c || (c - a).abs() < 1e-15);
                assert!(b >= 0.5 * (a + c) - 1e-15);
                assert!(b <= link.sup());
            }
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let p = [0.1, 0.5, 0.4];
        let q = [0.3, 0.3, 0.4];
        let c = [0.7, -1.3, 2.0];
        for link in [&LogSigmoidLink as &dyn CriticLink, &ExpLink] {
            let (_, g) = dra_objective(&p, &q, &c, link);
            for i in 0..3 {
                let h = 1e-6;
                let mut up = c;
                up[i] += h;
                let mut dn = c;
                dn[i] -= h;
                let fd = (dra_objective(&p, &q, &up, link).0 - dra_objective(&p, &q, &dn, link).0) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn identical_distributions_give_zero() {
        let p = DiscreteDist::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(dra_bruteforce(&p, &p).unwrap().value.abs() < 1e-3);
        assert_eq!(jsd_exact(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_distributions_reach_ln4() {
        let p = DiscreteDist::new(vec![1.0, 0.0]).unwrap();
        let q = DiscreteDist::new(vec![0.0, 1.0]).unwrap();
        assert!((dra_bruteforce(&p, &q).unwrap().value - LN_4).abs() < 1e-3);
        assert!((jsd_exact(&p, &q).unwrap() - LN_2).abs() < 1e-15);
        // Independent grid search over the critic gap.
        let grid_best = (0..=4000)
            .map(|i| {
                let gap = -20.0 + i as f64 * 0.01;
                dra_objective(&p.probs, &q.probs, &[gap, 0.0], &LogSigmoidLink).0
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((grid_best - LN_4).abs() < 1e-3);
    }

    #[test]
    fn random_pairs_are_strictly_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in 2..=6 {
            let p = DiscreteDist::random(k, &mut rng).unwrap();
            let q = DiscreteDist::random(k, &mut rng).unwrap();
            let r = dra_bruteforce(&p, &q).unwrap();
            assert!(r.value > 1e-4 && r.value <= LN_4 + 1e-3, "{r:?}");
            assert!(r.converged);
        }
    }

    #[test]
    fn gan_dual_matches_jsd_and_closed_form_critic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let p = DiscreteDist::random(5, &mut rng).unwrap();
            let q = DiscreteDist::random(5, &mut rng).unwrap();
            let dual = gan_dual_bruteforce(&p, &q, &AscentConfig::default()).unwrap();
            assert!((dual.value + LN_4 - 2.0 * jsd_exact(&p, &q).unwrap()).abs() < 1e-3);
            // Where both masses are not tiny the optimal critic is log(p/q).
            for i in (0..5).filter(|&i| p.probs[i].min(q.probs[i]) > 0.01) {
                assert!((dual.critic[i] - (p.probs[i] / q.probs[i]).ln()).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn alternative_link_is_also_a_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cfg = AscentConfig::default();
        for _ in 0..10 {
            let p = DiscreteDist::random(4, &mut rng).unwrap();
            let q = DiscreteDist::random(4, &mut rng).unwrap();
            let d = dra_bruteforce_with(&p, &q, &ExpLink, &cfg).unwrap();
            assert!(d.value > 1e-4 && d.value <= 2.0 * ExpLink.sup() + 1e-3);
            assert!(dra_bruteforce_with(&p, &p, &ExpLink, &cfg).unwrap().value.abs() < 1e-3);
        }
    }

    #[test]
    fn invalid_distributions_are_rejected() {
        assert!(DiscreteDist::new(vec![0.5, 0.6]).is_err());
        assert!(DiscreteDist::new(vec![-0.1, 1.1]).is_err());
        assert!(DiscreteDist::new(vec![1.0 / 17.0; 17]).is_err());
        let p = DiscreteDist::new(vec![0.5, 0.5]).unwrap();
        let q = DiscreteDist::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(jsd_exact(&p, &q).is_err());
    }

    #[test]
    fn property_runner_passes() {
        let checks = verify_properties(4, 10, 1).unwrap();
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
    }
}
