//! Hidden-state adversarial training: discriminators over last-layer
//! hidden states, the relativistic-average BCE, the dual discriminator
//! losses and the generator's adversarial loss.
//!
//! Baselines are plain `f64` values, so they never carry gradient. Reference
//! baselines come from the pair's running means; policy and cross-term
//! baselines are per-batch means of the current scores.

use std::f64::consts::LN_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diffcore::{log_sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{attention_mask, Block, Bound, Init, Linear, ParamId, ParamSet, SpectralLinear};

pub const LN_4: f64 = 2.0 * LN_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscArch {
    MseFixed,
    Mlp,
    Transformer,
}

impl DiscArch {
    pub const ALL: [DiscArch; 3] = [DiscArch::MseFixed, DiscArch::Mlp, DiscArch::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            DiscArch::MseFixed => "mse_fixed",
            DiscArch::Mlp => "mlp",
            DiscArch::Transformer => "transformer",
        }
    }
}

impl std::fmt::Display for DiscArch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DiscArch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse_fixed" | "mse-fixed" => Ok(DiscArch::MseFixed),
            "mlp" => Ok(DiscArch::Mlp),
            "transformer" => Ok(DiscArch::Transformer),
            _ => Err(Error::Config(format!("unknown discriminator architecture {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscConfig {
    pub arch: DiscArch,
    /// Latent width (the language model's `d_model`).
    pub d_in: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Length of the learned positional table.
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            arch: DiscArch::Transformer,
            d_in: 32,
            hidden: 16,
            n_layers: 2,
            n_heads: 4,
            max_positions: 64,
            seed: 0,
        }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 {
            return Err(Error::Config("discriminator d_in must be positive".into()));
        }
        if self.arch != DiscArch::MseFixed && self.hidden == 0 {
            return Err(Error::Config("discriminator hidden size must be positive".into()));
        }
        if self.arch == DiscArch::Transformer
            && (self.n_heads == 0 || self.hidden % self.n_heads != 0 || self.max_positions == 0)
        {
            return Err(Error::Config(format!(
                "transformer discriminator needs hidden ({}) divisible by n_heads ({}) and a positional table",
                self.hidden, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Body {
    Transformer {
        project_in: SpectralLinear,
        pos: ParamId,
        layers: Vec<Block>,
        head1: SpectralLinear,
        head2: SpectralLinear,
    },
    Mlp {
        fc1: Linear,
        fc2: Linear,
    },
    MseFixed,
}

/// A scalar critic over a batch of latent sequences `[B, T, d]`.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscConfig,
    params: ParamSet,
    body: Body,
}

/// Masked mean over positions: `[B, T, d]` → `[B, d]`.
pub fn pool(tape: &mut Tape, h: Var, mask: &Tensor) -> Result<Var> {
    tape.masked_mean(h, mask, 1)
}

/// Batch mean of pooled latents, the center used by the fixed critic.
pub fn pooled_center(h: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(h.clone());
    let p = pool(&mut tape, v, mask)?;
    let c = tape.mean_axis(p, 0)?;
    Ok(tape.value(c).clone())
}

impl Discriminator {
    pub fn new(config: &DiscConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let (d, h) = (config.d_in, config.hidden);
        let body = match config.arch {
            DiscArch::Transformer => {
                let project_in = SpectralLinear::new(&mut ps, "project_in", d, h, &mut rng);
                let pos = ps.push("pos_emb", Tensor::randn(&[config.max_positions, h], 0.02, &mut rng));
                let layers = (0..config.n_layers)
                    .map(|i| Block::new(&mut ps, &format!("layers.{i}"), h, config.n_heads, Init::XavierUniform, &mut rng))
                    .collect();
                let head1 = SpectralLinear::new(&mut ps, "head.0", h, h, &mut rng);
                let head2 = SpectralLinear::new(&mut ps, "head.2", h, 1, &mut rng);
                Body::Transformer {
                    project_in,
                    pos,
                    layers,
                    head1,
                    head2,
                }
            }
            DiscArch::Mlp => Body::Mlp {
                fc1: Linear::new(&mut ps, "fc1", d, h, Init::XavierUniform, &mut rng),
                fc2: Linear::new(&mut ps, "fc2", h, 1, Init::XavierUniform, &mut rng),
            },
            DiscArch::MseFixed => Body::MseFixed,
        };
        Ok(Discriminator {
            config: config.clone(),
            params: ps,
            body,
        })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn is_learned(&self) -> bool {
        !matches!(self.body, Body::MseFixed)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    fn spectral_layers(&self) -> Vec<(&'static str, &SpectralLinear)> {
        match &self.body {
            Body::Transformer {
                project_in,
                head1,
                head2,
                ..
            } => vec![("project_in", project_in), ("head.0", head1), ("head.2", head2)],
            _ => Vec::new(),
        }
    }

    fn spectral_layers_mut(&mut self) -> Vec<&mut SpectralLinear> {
        match &mut self.body {
            Body::Transformer {
                project_in,
                head1,
                head2,
                ..
            } => vec![project_in, head1, head2],
            _ => Vec::new(),
        }
    }

    /// Advance every spectral-norm estimate by `iters` power iterations.
    pub fn power_iterate(&mut self, iters: usize) {
        let params = std::mem::take(&mut self.params);
        for sl in self.spectral_layers_mut() {
            sl.power_iterate(&params, iters);
        }
        self.params = params;
    }

    /// Spectrally normalized weights `W / sigma` of every SN layer.
    pub fn normalized_weights(&self) -> Vec<(String, Tensor)> {
        self.spectral_layers()
            .into_iter()
            .map(|(n, sl)| (n.to_string(), sl.normalized_weight(&self.params)))
            .collect()
    }

    /// Scores `[B]` for latents `h: [B, T, d]` with 0/1 mask `[B, T]`.
    /// `center` is required by the fixed critic and ignored otherwise.
    pub fn score_on(&self, tape: &mut Tape, p: &Bound, h: Var, mask: &Tensor, center: Option<&Tensor>) -> Result<Var> {
        let &[b, t, d] = tape.shape(h) else {
            return Err(Error::Shape(format!("latents must be [B, T, d], got {:?}", tape.shape(h))));
        };
        if d != self.config.d_in {
            return Err(Error::Shape(format!("latent width {d}, discriminator expects {}", self.config.d_in)));
        }
        match &self.body {
            Body::Transformer {
                project_in,
                pos,
                layers,
                head1,
                head2,
            } => {
                let hd = self.config.hidden;
                let mut x = project_in.forward(tape, p, h)?;
                let used = t.min(self.config.max_positions);
                let mut pe = tape.narrow(p.var(*pos), 0, 0, used)?;
                if used < t {
                    let zeros = tape.constant(Tensor::zeros(&[t - used, hd]));
                    pe = tape.concat(&[pe, zeros])?;
                }
                x = tape.add(x, pe)?;
                let m = tape.constant(attention_mask(mask, self.config.n_heads, false)?);
                for layer in layers {
                    x = layer.forward(tape, p, x, m)?;
                }
                let pooled = pool(tape, x, mask)?;
                let z = head1.forward(tape, p, pooled)?;
                let z = tape.gelu(z);
                let z = head2.forward(tape, p, z)?;
                tape.reshape(z, &[b])
            }
            Body::Mlp { fc1, fc2 } => {
                let pooled = pool(tape, h, mask)?;
                let z = fc1.forward(tape, p, pooled)?;
                let z = tape.gelu(z);
                let z = fc2.forward(tape, p, z)?;
                tape.reshape(z, &[b])
            }
            Body::MseFixed => {
                let center = center.ok_or_else(|| Error::Contract("fixed critic needs a reference center".into()))?;
                if center.shape() != [d] {
                    return Err(Error::Shape(format!("center must be [{d}]")));
                }
                let pooled = pool(tape, h, mask)?;
                let c = tape.constant(center.clone());
                let diff = tape.sub(pooled, c)?;
                let sq = tape.square(diff);
                let s = tape.sum_axis(sq, 1)?;
                Ok(tape.neg(s))
            }
        }
    }

    /// Gradient-free scores.
    pub fn score(&self, h: &Tensor, mask: &Tensor, center: Option<&Tensor>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let hv = tape.constant(h.clone());
        let s = self.score_on(&mut tape, &p, hv, mask, center)?;
        Ok(tape.value(s).data().to_vec())
    }

    fn push_into(&self, ck: &mut Checkpoint, prefix: &str) {
        for (n, t) in self.params.iter() {
            ck.push(format!("{prefix}{n}"), t.clone());
        }
        for (n, sl) in self.spectral_layers() {
            ck.push(format!("{prefix}{n}.sn_u"), Tensor::from_vec(sl.u.clone()));
            ck.push(format!("{prefix}{n}.sn_v"), Tensor::from_vec(sl.v.clone()));
        }
    }

    fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        let all = ck.with_prefix(prefix);
        let (buffers, params): (Vec<_>, Vec<_>) = all
            .into_iter()
            .partition(|(n, _)| n.ends_with(".sn_u") || n.ends_with(".sn_v"));
        self.params.load(&params)?;
        let names: Vec<&str> = self.spectral_layers().iter().map(|(n, _)| *n).collect();
        for (name, sl) in names.into_iter().zip(self.spectral_layers_mut()) {
            let get = |suffix: &str| {
                buffers
                    .iter()
                    .find(|(n, _)| *n == format!("{name}.{suffix}"))
                    .map(|(_, t)| t.data().to_vec())
                    .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}{name}.{suffix}")))
            };
            let (u, v) = (get("sn_u")?, get("sn_v")?);
            if u.len() != sl.u.len() || v.len() != sl.v.len() {
                return Err(Error::Checkpoint(format!("bad power-iteration vectors for {name}")));
            }
            sl.u = u;
            sl.v = v;
        }
        Ok(())
    }
}

/// `−mean log σ(l1 − b1) − mean log σ(−(l2 − b2))` with constant baselines.
pub fn relativistic_bce(tape: &mut Tape, l1: Var, l2: Var, b1: f64, b2: f64) -> Result<Var> {
    let a = tape.add_scalar(l1, -b1);
    let a = tape.log_sigmoid(a);
    let a = tape.mean(a);
    let c = tape.add_scalar(l2, -b2);
    let c = tape.neg(c);
    let c = tape.log_sigmoid(c);
    let c = tape.mean(c);
    let s = tape.add(a, c)?;
    Ok(tape.neg(s))
}

/// [`relativistic_bce`] on plain numbers.
pub fn relativistic_bce_values(l1: &[f64], l2: &[f64], b1: f64, b2: f64) -> f64 {
    let m1 = l1.iter().map(|x| log_sigmoid(x - b1)).sum::<f64>() / l1.len() as f64;
    let m2 = l2.iter().map(|x| log_sigmoid(-(x - b2))).sum::<f64>() / l2.len() as f64;
    -(m1 + m2)
}

/// Relativistic BCE where each class is measured against the other's live
/// batch mean, so the baselines carry gradient.
pub fn relativistic_bce_live(tape: &mut Tape, l1: Var, l2: Var) -> Result<Var> {
    let m1 = tape.mean(l1);
    let m2 = tape.mean(l2);
    let a = tape.sub(l1, m2)?;
    let a = tape.log_sigmoid(a);
    let a = tape.mean(a);
    let c = tape.sub(m1, l2)?;
    let c = tape.log_sigmoid(c);
    let c = tape.mean(c);
    let s = tape.add(a, c)?;
    Ok(tape.neg(s))
}

pub fn running_mean_update(mu: f64, batch_mean: f64, alpha: f64) -> f64 {
    alpha * mu + (1.0 - alpha) * batch_mean
}

/// The four last-layer latent sets of a preference batch with their masks.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadLatents {
    pub ref_pos: Tensor,
    pub ref_neg: Tensor,
    pub theta_pos: Tensor,
    pub theta_neg: Tensor,
    /// Mask for the chosen sequences (`ref_pos`, `theta_pos`).
    pub mask_pos: Tensor,
    /// Mask for the rejected sequences (`ref_neg`, `theta_neg`).
    pub mask_neg: Tensor,
}

/// Quad latents placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct QuadVars {
    pub ref_pos: Var,
    pub ref_neg: Var,
    pub theta_pos: Var,
    pub theta_neg: Var,
}

impl QuadLatents {
    /// Everything as constants: the discriminator-side view.
    pub fn constants(&self, tape: &mut Tape) -> QuadVars {
        QuadVars {
            ref_pos: tape.constant(self.ref_pos.clone()),
            ref_neg: tape.constant(self.ref_neg.clone()),
            theta_pos: tape.constant(self.theta_pos.clone()),
            theta_neg: tape.constant(self.theta_neg.clone()),
        }
    }

    pub fn centers(&self) -> Result<(Tensor, Tensor)> {
        Ok((
            pooled_center(&self.ref_pos, &self.mask_pos)?,
            pooled_center(&self.ref_neg, &self.mask_neg)?,
        ))
    }
}

/// The six discriminator scores used by the discriminator losses.
#[derive(Clone, Debug)]
pub struct DiscScores {
    /// `C_pos` on reference-chosen, policy-chosen and reference-rejected.
    pub pos_ref_pos: Var,
    pub pos_theta_pos: Var,
    pub pos_ref_neg: Var,
    /// `C_neg` on reference-rejected, policy-rejected and reference-chosen.
    pub neg_ref_neg: Var,
    pub neg_theta_neg: Var,
    pub neg_ref_pos: Var,
    pub pos_params: Bound,
    pub neg_params: Bound,
}

/// Scalar baselines for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Baselines {
    pub mu_pos: f64,
    pub mu_neg: f64,
    pub m_theta_pos: f64,
    pub m_theta_neg: f64,
    /// Batch mean of `C_pos` on reference-rejected latents.
    pub m_ref_neg: f64,
    /// Batch mean of `C_neg` on reference-chosen latents.
    pub m_ref_pos: f64,
}

fn var_mean(tape: &Tape, v: Var) -> f64 {
    tape.value(v).mean()
}

impl Baselines {
    pub fn shifted(&self, c: f64) -> Self {
        Baselines {
            mu_pos: self.mu_pos + c,
            mu_neg: self.mu_neg + c,
            m_theta_pos: self.m_theta_pos + c,
            m_theta_neg: self.m_theta_neg + c,
            m_ref_neg: self.m_ref_neg + c,
            m_ref_pos: self.m_ref_pos + c,
        }
    }
}

/// Both discriminator losses from precomputed scores.
pub fn disc_losses_from_scores(tape: &mut Tape, s: &DiscScores, b: &Baselines) -> Result<(Var, Var)> {
    let p1 = relativistic_bce(tape, s.pos_ref_pos, s.pos_theta_pos, b.m_theta_pos, b.mu_pos)?;
    let p2 = relativistic_bce(tape, s.pos_theta_pos, s.pos_ref_neg, b.m_ref_neg, b.m_theta_pos)?;
    let n1 = relativistic_bce(tape, s.neg_ref_neg, s.neg_theta_neg, b.m_theta_neg, b.mu_neg)?;
    let n2 = relativistic_bce(tape, s.neg_theta_neg, s.neg_ref_pos, b.m_ref_pos, b.m_theta_neg)?;
    Ok((tape.add(p1, p2)?, tape.add(n1, n2)?))
}

/// Generator loss from the scores of the two discriminators on their own
/// class: `−bce(C_pos(ref+), C_pos(θ+)) − bce(C_neg(ref−), C_neg(θ−))`.
pub fn gen_adv_from_scores(
    tape: &mut Tape,
    pos_ref: Var,
    pos_theta: Var,
    neg_ref: Var,
    neg_theta: Var,
    b: &Baselines,
) -> Result<Var> {
    let p = relativistic_bce(tape, pos_ref, pos_theta, b.m_theta_pos, b.mu_pos)?;
    let n = relativistic_bce(tape, neg_ref, neg_theta, b.m_theta_neg, b.mu_neg)?;
    let s = tape.add(p, n)?;
    Ok(tape.neg(s))
}

/// Generator-side loss and the batch means it was built with.
#[derive(Clone, Debug)]
pub struct GenForward {
    pub l_adv: Var,
    pub baselines: Baselines,
    pub pos_params: Bound,
    pub neg_params: Bound,
}

/// Loss values of one adversarial step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvLossBundle {
    pub l_phi_pos: f64,
    pub l_phi_neg: f64,
    pub l_adv: f64,
    pub m_theta_pos: f64,
    pub m_theta_neg: f64,
}

/// Positive and negative discriminators with their running reference means.
#[derive(Clone, Debug)]
pub struct DiscriminatorPair {
    pub pos: Discriminator,
    pub neg: Discriminator,
    pub mu_pos: f64,
    pub mu_neg: f64,
}

/// Score two latent sets that share a mask, in one pass when their shapes
/// agree.
fn score_pair(
    disc: &Discriminator,
    tape: &mut Tape,
    p: &Bound,
    a: Var,
    b: Var,
    mask: &Tensor,
    center: &Tensor,
) -> Result<(Var, Var)> {
    if tape.shape(a) != tape.shape(b) {
        return Ok((
            disc.score_on(tape, p, a, mask, Some(center))?,
            disc.score_on(tape, p, b, mask, Some(center))?,
        ));
    }
    let n = tape.shape(a)[0];
    let h = tape.concat(&[a, b])?;
    let m = Tensor::new(&[2 * n, mask.shape()[1]], [mask.data(), mask.data()].concat())?;
    let z = disc.score_on(tape, p, h, &m, Some(center))?;
    Ok((tape.narrow(z, 0, 0, n)?, tape.narrow(z, 0, n, n)?))
}

/// Score several constant latent sets in one forward pass by zero-padding
/// them to a common length and stacking along the batch axis.
fn score_stacked(
    disc: &Discriminator,
    tape: &mut Tape,
    p: &Bound,
    sets: &[(&Tensor, &Tensor)],
    center: &Tensor,
) -> Result<Vec<Var>> {
    let t_max = sets.iter().map(|(h, _)| h.shape()[1]).max().unwrap_or(0);
    let d = sets.first().map_or(0, |(h, _)| h.shape()[2]);
    let (mut hs, mut ms, mut sizes) = (Vec::new(), Vec::new(), Vec::new());
    for (h, m) in sets {
        let &[b, t, dd] = h.shape() else {
            return Err(Error::Shape(format!("latents must be [B, T, d], got {:?}", h.shape())));
        };
        if dd != d || m.shape() != [b, t] {
            return Err(Error::Shape("latent sets and masks disagree in shape".into()));
        }
        for r in 0..b {
            hs.extend_from_slice(&h.data()[r * t * d..(r + 1) * t * d]);
            hs.resize(hs.len() + (t_max - t) * d, 0.0);
            ms.extend_from_slice(&m.data()[r * t..(r + 1) * t]);
            ms.resize(ms.len() + t_max - t, 0.0);
        }
        sizes.push(b);
    }
    let total: usize = sizes.iter().sum();
    let h = tape.constant(Tensor::new(&[total, t_max, d], hs)?);
    let mask = Tensor::new(&[total, t_max], ms)?;
    let z = disc.score_on(tape, p, h, &mask, Some(center))?;
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for b in sizes {
        out.push(tape.narrow(z, 0, start, b)?);
        start += b;
    }
    Ok(out)
}

impl DiscriminatorPair {
    /// The two discriminators get seeds `seed` and `seed + 1`.
    pub fn new(config: &DiscConfig) -> Result<Self> {
        let neg_cfg = DiscConfig {
            seed: config.seed.wrapping_add(1),
            ..config.clone()
        };
        Ok(DiscriminatorPair {
            pos: Discriminator::new(config)?,
            neg: Discriminator::new(&neg_cfg)?,
            mu_pos: 0.0,
            mu_neg: 0.0,
        })
    }

    pub fn power_iterate(&mut self, iters: usize) {
        self.pos.power_iterate(iters);
        self.neg.power_iterate(iters);
    }

    /// Score all four latent sets with trainable discriminator parameters.
    /// The latents enter as constants.
    pub fn score_for_disc(&self, tape: &mut Tape, quad: &QuadLatents) -> Result<DiscScores> {
        let (cp, cn) = quad.centers()?;
        let pp = self.pos.bind(tape, true);
        let np = self.neg.bind(tape, true);
        let (mp, mn) = (&quad.mask_pos, &quad.mask_neg);
        let pos = score_stacked(
            &self.pos,
            tape,
            &pp,
            &[(&quad.ref_pos, mp), (&quad.theta_pos, mp), (&quad.ref_neg, mn)],
            &cp,
        )?;
        let neg = score_stacked(
            &self.neg,
            tape,
            &np,
            &[(&quad.ref_neg, mn), (&quad.theta_neg, mn), (&quad.ref_pos, mp)],
            &cn,
        )?;
        Ok(DiscScores {
            pos_ref_pos: pos[0],
            pos_theta_pos: pos[1],
            pos_ref_neg: pos[2],
            neg_ref_neg: neg[0],
            neg_theta_neg: neg[1],
            neg_ref_pos: neg[2],
            pos_params: pp,
            neg_params: np,
        })
    }

    /// Fold the batch means of the reference scores into the running means.
    pub fn update_running_means(&mut self, tape: &Tape, s: &DiscScores, alpha: f64) {
        self.mu_pos = running_mean_update(self.mu_pos, var_mean(tape, s.pos_ref_pos), alpha);
        self.mu_neg = running_mean_update(self.mu_neg, var_mean(tape, s.neg_ref_neg), alpha);
    }

    /// Baselines for the discriminator losses: current running means plus
    /// batch means of `s`.
    pub fn disc_baselines(&self, tape: &Tape, s: &DiscScores) -> Baselines {
        Baselines {
            mu_pos: self.mu_pos,
            mu_neg: self.mu_neg,
            m_theta_pos: var_mean(tape, s.pos_theta_pos),
            m_theta_neg: var_mean(tape, s.neg_theta_neg),
            m_ref_neg: var_mean(tape, s.pos_ref_neg),
            m_ref_pos: var_mean(tape, s.neg_ref_pos),
        }
    }

    /// Score, update the running means, then build `(l_phi_pos, l_phi_neg)`.
    pub fn disc_losses(&mut self, tape: &mut Tape, quad: &QuadLatents, alpha: f64) -> Result<(Var, Var, DiscScores)> {
        let s = self.score_for_disc(tape, quad)?;
        self.update_running_means(tape, &s, alpha);
        let b = self.disc_baselines(tape, &s);
        let (lp, ln) = disc_losses_from_scores(tape, &s, &b)?;
        Ok((lp, ln, s))
    }

    /// Generator adversarial loss on the policy's tape. Discriminator
    /// parameters and the reference latents enter as constants; only
    /// `theta_pos` / `theta_neg` can carry gradient.
    pub fn gen_adv_loss(&self, tape: &mut Tape, ref_pos: Var, theta_pos: Var, ref_neg: Var, theta_neg: Var, quad_masks: (&Tensor, &Tensor), centers: (&Tensor, &Tensor)) -> Result<GenForward> {
        let (mp, mn) = quad_masks;
        let pp = self.pos.bind(tape, false);
        let np = self.neg.bind(tape, false);
        let (pr, pt) = score_pair(&self.pos, tape, &pp, ref_pos, theta_pos, mp, centers.0)?;
        let (nr, nt) = score_pair(&self.neg, tape, &np, ref_neg, theta_neg, mn, centers.1)?;
        let b = Baselines {
            mu_pos: self.mu_pos,
            mu_neg: self.mu_neg,
            m_theta_pos: var_mean(tape, pt),
            m_theta_neg: var_mean(tape, nt),
            m_ref_neg: f64::NAN,
            m_ref_pos: f64::NAN,
        };
        let l_adv = gen_adv_from_scores(tape, pr, pt, nr, nt, &b)?;
        Ok(GenForward {
            l_adv,
            baselines: b,
            pos_params: pp,
            neg_params: np,
        })
    }

    /// [`Self::gen_adv_loss`] on plain latents, returning the loss value.
    pub fn gen_adv_value(&self, quad: &QuadLatents) -> Result<f64> {
        let mut tape = Tape::new();
        let q = quad.constants(&mut tape);
        let (cp, cn) = quad.centers()?;
        let g = self.gen_adv_loss(
            &mut tape,
            q.ref_pos,
            q.theta_pos,
            q.ref_neg,
            q.theta_neg,
            (&quad.mask_pos, &quad.mask_neg),
            (&cp, &cn),
        )?;
        tape.value(g.l_adv).item()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "pos_config": self.pos.config,
            "neg_config": self.neg.config,
            "mu_pos": self.mu_pos,
            "mu_neg": self.mu_neg,
        });
        let mut ck = Checkpoint::new("disc_pair", meta);
        self.push_into(&mut ck);
        ck
    }

    pub(crate) fn push_into(&self, ck: &mut Checkpoint) {
        self.pos.push_into(ck, "disc_pos.");
        self.neg.push_into(ck, "disc_neg.");
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("disc_pair")?;
        Self::from_meta_and_tensors(&ck.meta, ck)
    }

    pub(crate) fn from_meta_and_tensors(meta: &serde_json::Value, ck: &Checkpoint) -> Result<Self> {
        let field = |k: &str| -> Result<serde_json::Value> {
            meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing {k}")))
        };
        let cfg = |k: &str| -> Result<DiscConfig> {
            serde_json::from_value(field(k)?).map_err(|e| Error::Checkpoint(format!("bad {k}: {e}")))
        };
        let num = |k: &str| -> Result<f64> {
            field(k)?.as_f64().ok_or_else(|| Error::Checkpoint(format!("bad {k}")))
        };
        let mut pos = Discriminator::new(&cfg("pos_config")?)?;
        let mut neg = Discriminator::new(&cfg("neg_config")?)?;
        pos.load_from(ck, "disc_pos.")?;
        neg.load_from(ck, "disc_neg.")?;
        Ok(DiscriminatorPair {
            pos,
            neg,
            mu_pos: num("mu_pos")?,
            mu_neg: num("mu_neg")?,
        })
    }
}

/// Settings for [`estimate_dra`].
#[derive(Clone, Debug, PartialEq)]
pub struct DraEstimateConfig {
    pub disc: DiscConfig,
    pub train_steps: usize,
    pub lr: f64,
}

/// Plug-in estimate of the relativistic divergence between two sample sets
/// `[N, d]`: train a fresh discriminator on the live-baseline BCE and return
/// `ln 4 − final BCE`.
pub fn estimate_dra(samples_ref: &Tensor, samples_theta: &Tensor, cfg: &DraEstimateConfig) -> Result<f64> {
    let as_seq = |s: &Tensor| -> Result<(Tensor, Tensor)> {
        let &[n, d] = s.shape() else {
            return Err(Error::Shape("samples must be [N, d]".into()));
        };
        Ok((s.reshape(&[n, 1, d])?, Tensor::ones(&[n, 1])))
    };
    let (hr, mr) = as_seq(samples_ref)?;
    let (ht, mt) = as_seq(samples_theta)?;
    let disc_cfg = DiscConfig {
        d_in: hr.shape()[2],
        ..cfg.disc.clone()
    };
    let mut disc = Discriminator::new(&disc_cfg)?;
    let center = pooled_center(&hr, &mr)?;
    let mut opt = crate::trainer::Adam::new(disc.params(), crate::trainer::AdamConfig::default());
    let eval = |disc: &Discriminator, train: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let p = disc.bind(&mut tape, train);
        let a = tape.constant(hr.clone());
        let b = tape.constant(ht.clone());
        let sa = disc.score_on(&mut tape, &p, a, &mr, Some(&center))?;
        let sb = disc.score_on(&mut tape, &p, b, &mt, Some(&center))?;
        let loss = relativistic_bce_live(&mut tape, sa, sb)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged(format!("discriminator loss became {value}")));
        }
        if train {
            tape.backward(loss)?;
            return Ok((value, p.grads(&tape)));
        }
        Ok((value, Vec::new()))
    };
    if disc.is_learned() {
        for _ in 0..cfg.train_steps {
            disc.power_iterate(1);
            let (_, grads) = eval(&disc, true)?;
            opt.step(disc.params_mut(), &grads, cfg.lr);
        }
    }
    let (final_bce, _) = eval(&disc, false)?;
    Ok(LN_4 - final_bce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check_many;
    use rand::Rng;

    fn cfg(arch: DiscArch) -> DiscConfig {
        DiscConfig {
            arch,
            d_in: 6,
            hidden: 8,
            n_layers: 2,
            n_heads: 2,
            max_positions: 8,
            seed: 4,
        }
    }

    fn zero_output(d: &mut Discriminator) {
        let n = d.params().len();
        // Final MLP layer weight and bias are the last two tensors.
        for t in &mut d.params_mut().tensors_mut()[n - 2..] {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn random_quad(rng: &mut impl Rng, b: usize, t: usize, d: usize) -> QuadLatents {
        let mask = |rng: &mut dyn rand::RngCore| {
            let mut m = vec![0.0; b * t];
            for bi in 0..b {
                let len = 1 + (rng.next_u32() as usize) % t;
                m[bi * t..bi * t + len].iter_mut().for_each(|x| *x = 1.0);
            }
            Tensor::new(&[b, t], m).unwrap()
        };
        QuadLatents {
            ref_pos: Tensor::randn(&[b, t, d], 1.0, rng),
            ref_neg: Tensor::randn(&[b, t, d], 1.0, rng),
            theta_pos: Tensor::randn(&[b, t, d], 1.0, rng),
            theta_neg: Tensor::randn(&[b, t, d], 1.0, rng),
            mask_pos: mask(rng),
            mask_neg: mask(rng),
        }
    }

    #[test]
    fn bce_reference_values() {
        let v = relativistic_bce_values(&[2.0], &[-1.0], 0.0, 0.0);
        assert!((v - 0.440190).abs() < 1e-6);
        let chance = relativistic_bce_values(&[0.4, 0.4], &[-1.0, -1.0], 0.4, -1.0);
        assert!((chance - LN_4).abs() < 1e-15);
        assert!(relativistic_bce_values(&[60.0], &[-60.0], 0.0, 0.0) < 1e-25);
    }

    #[test]
    fn tape_bce_matches_values_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l1 = Tensor::randn(&[5], 2.0, &mut rng);
        let l2 = Tensor::randn(&[3], 2.0, &mut rng);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(l1.clone()), tape.constant(l2.clone()));
        let v = relativistic_bce(&mut tape, a, b, 0.3, -0.2).unwrap();
        assert!((tape.value(v).item().unwrap() - relativistic_bce_values(l1.data(), l2.data(), 0.3, -0.2)).abs() < 1e-14);
        let r = grad_check_many(|t, v| relativistic_bce(t, v[0], v[1], 0.3, -0.2), &[l1.clone(), l2.clone()], 1e-6, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
        let r = grad_check_many(|t, v| relativistic_bce_live(t, v[0], v[1]), &[l1, l2], 1e-6, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn running_mean_closed_form() {
        assert!((running_mean_update(0.0, 1.0, 0.9) - 0.1).abs() < 1e-15);
        let (c, mu0) = (2.5, -1.0);
        let mut mu = mu0;
        for t in 1..=60 {
            mu = running_mean_update(mu, c, 0.9);
            let expect = 0.9f64.powi(t) * (mu0 - c as f64).abs();
            assert!(((mu - c).abs() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_norm_matches_svd() {
        let mut d = Discriminator::new(&cfg(DiscArch::Transformer)).unwrap();
        // Give the projection singular values (3, 1) in a 2-D subspace.
        let w = d.params().names().iter().position(|n| n == "project_in.weight").unwrap();
        let rot = |th: f64| [[th.cos(), -th.sin()], [th.sin(), th.cos()]];
        let (u, v) = (rot(0.4), rot(1.1));
        let t = &mut d.params_mut().tensors_mut()[w];
        let hd = t.shape()[1];
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        for i in 0..2 {
            for j in 0..2 {
                t.data_mut()[i * hd + j] = 3.0 * u[i][0] * v[j][0] + 1.0 * u[i][1] * v[j][1];
            }
        }
        d.power_iterate(20);
        for (name, wn) in d.normalized_weights() {
            let (r, c) = (wn.shape()[0], wn.shape()[1]);
            let m = nalgebra::DMatrix::from_row_slice(r, c, wn.data());
            let top = m.singular_values().max();
            assert!(top <= 1.0 + 1e-3, "{name}: {top}");
            if name == "project_in" {
                assert!((top - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn scores_ignore_padding_extension() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for arch in [DiscArch::Transformer, DiscArch::Mlp, DiscArch::MseFixed] {
            let d = Discriminator::new(&cfg(arch)).unwrap();
            let h = Tensor::randn(&[2, 3, 6], 1.0, &mut rng);
            let mask = Tensor::new(&[2, 3], vec![1., 1., 1., 1., 1., 0.]).unwrap();
            let center = Tensor::randn(&[6], 1.0, &mut rng);
            let base = d.score(&h, &mask, Some(&center)).unwrap();
            let mut ext = Vec::new();
            for b in 0..2 {
                ext.extend_from_slice(&h.data()[b * 18..(b + 1) * 18]);
                ext.extend((0..12).map(|_| 1e3 * rng.random::<f64>()));
            }
            let h2 = Tensor::new(&[2, 5, 6], ext).unwrap();
            let m2 = Tensor::new(&[2, 5], vec![1., 1., 1., 0., 0., 1., 1., 0., 0., 0.]).unwrap();
            let ext_scores = d.score(&h2, &m2, Some(&center)).unwrap();
            for (a, b) in base.iter().zip(&ext_scores) {
                assert!((a - b).abs() <= 1e-6, "{arch:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn long_sequences_truncate_positional_table() {
        let d = Discriminator::new(&cfg(DiscArch::Transformer)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Tensor::randn(&[1, 12, 6], 1.0, &mut rng);
        let s = d.score(&h, &Tensor::ones(&[1, 12]), None).unwrap();
        assert!(s[0].is_finite());
    }

    #[test]
    fn fixed_critic_peaks_at_center() {
        let d = Discriminator::new(&cfg(DiscArch::MseFixed)).unwrap();
        let c = Tensor::new(&[6], vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0]).unwrap();
        let mut rows = c.data().repeat(2);
        rows.extend(c.data().iter().map(|x| x + 1.0));
        let h = Tensor::new(&[1, 3, 6], rows).unwrap();
        let s = d.score(&h, &Tensor::new(&[1, 3], vec![1., 1., 0.]).unwrap(), Some(&c)).unwrap();
        assert_eq!(s[0], 0.0);
        assert!(d.score(&h, &Tensor::ones(&[1, 3]), Some(&c)).unwrap()[0] < 0.0);
        assert!(d.score(&h, &Tensor::ones(&[1, 3]), None).is_err());
    }

    #[test]
    fn chance_level_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let quad = random_quad(&mut rng, 3, 4, 6);
        let mut pair = DiscriminatorPair::new(&cfg(DiscArch::Mlp)).unwrap();
        zero_output(&mut pair.pos);
        zero_output(&mut pair.neg);
        let mut tape = Tape::new();
        let (lp, ln, _) = pair.disc_losses(&mut tape, &quad, 0.9).unwrap();
        assert!((tape.value(lp).item().unwrap() - 2.0 * LN_4).abs() < 1e-12);
        assert!((tape.value(ln).item().unwrap() - 2.0 * LN_4).abs() < 1e-12);
        assert!((pair.gen_adv_value(&quad).unwrap() + 2.0 * LN_4).abs() < 1e-12);
    }

    #[test]
    fn swapping_classes_at_chance_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let quad = random_quad(&mut rng, 3, 4, 6);
        let mut swapped = quad.clone();
        std::mem::swap(&mut swapped.ref_pos, &mut swapped.theta_pos);
        let mut pair = DiscriminatorPair::new(&cfg(DiscArch::Mlp)).unwrap();
        zero_output(&mut pair.pos);
        zero_output(&mut pair.neg);
        let mut p2 = pair.clone();
        let mut t1 = Tape::new();
        let (a, _, _) = pair.disc_losses(&mut t1, &quad, 0.9).unwrap();
        let mut t2 = Tape::new();
        let (b, _, _) = p2.disc_losses(&mut t2, &swapped, 0.9).unwrap();
        assert_eq!(t1.value(a).item().unwrap(), t2.value(b).item().unwrap());
    }

    #[test]
    fn bce_values_are_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut pair = DiscriminatorPair::new(&cfg(DiscArch::Mlp)).unwrap();
        pair.mu_pos = 0.3;
        pair.mu_neg = -0.7;
        let quad = random_quad(&mut rng, 4, 3, 6);
        for c in [-25.0, -1.0, 3.5, 40.0] {
            let mut tape = Tape::new();
            let s = pair.score_for_disc(&mut tape, &quad).unwrap();
            let b = pair.disc_baselines(&tape, &s);
            let (lp, ln) = disc_losses_from_scores(&mut tape, &s, &b).unwrap();
            let shift = |tape: &mut Tape, v: Var| tape.add_scalar(v, c);
            let s2 = DiscScores {
                pos_ref_pos: shift(&mut tape, s.pos_ref_pos),
                pos_theta_pos: shift(&mut tape, s.pos_theta_pos),
                pos_ref_neg: shift(&mut tape, s.pos_ref_neg),
                neg_ref_neg: shift(&mut tape, s.neg_ref_neg),
                neg_theta_neg: shift(&mut tape, s.neg_theta_neg),
                neg_ref_pos: shift(&mut tape, s.neg_ref_pos),
                ..s.clone()
            };
            let (lp2, ln2) = disc_losses_from_scores(&mut tape, &s2, &b.shifted(c)).unwrap();
            let g1 = gen_adv_from_scores(&mut tape, s.pos_ref_pos, s.pos_theta_pos, s.neg_ref_neg, s.neg_theta_neg, &b).unwrap();
            let g2 = gen_adv_from_scores(&mut tape, s2.pos_ref_pos, s2.pos_theta_pos, s2.neg_ref_neg, s2.neg_theta_neg, &b.shifted(c)).unwrap();
            for (x, y) in [(lp, lp2), (ln, ln2), (g1, g2)] {
                let (x, y) = (tape.value(x).item().unwrap(), tape.value(y).item().unwrap());
                assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn disc_step_sends_no_gradient_to_latents_or_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let quad = random_quad(&mut rng, 2, 3, 6);
        let mut pair = DiscriminatorPair::new(&cfg(DiscArch::Transformer)).unwrap();
        let mut tape = Tape::new();
        let (lp, ln, s) = pair.disc_losses(&mut tape, &quad, 0.9).unwrap();
        let total = tape.add(lp, ln).unwrap();
        tape.backward(total).unwrap();
        let params: Vec<usize> = s.pos_params.vars().iter().chain(s.neg_params.vars()).map(|v| v.index()).collect();
        for v in tape.leaves_with_grad() {
            assert!(params.contains(&v.index()));
        }
        assert!(s.pos_params.grads(&tape).iter().any(|g| g.sq_norm() > 0.0));
    }

    #[test]
    fn separable_latents_train_below_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (b, t, d) = (16, 3, 6);
        let around = |shift: f64, rng: &mut ChaCha8Rng| Tensor::randn(&[b, t, d], 0.5, rng).map(|x| x + shift);
        let quad = QuadLatents {
            ref_pos: around(4.0, &mut rng),
            theta_pos: around(0.0, &mut rng),
            ref_neg: around(-4.0, &mut rng),
            theta_neg: around(-8.0, &mut rng),
            mask_pos: Tensor::ones(&[b, t]),
            mask_neg: Tensor::ones(&[b, t]),
        };
        for arch in [DiscArch::Mlp, DiscArch::Transformer] {
            let mut pair = DiscriminatorPair::new(&cfg(arch)).unwrap();
            let ac = crate::trainer::AdamConfig::default();
            let mut opt_p = crate::trainer::Adam::new(pair.pos.params(), ac);
            let mut opt_n = crate::trainer::Adam::new(pair.neg.params(), ac);
            let mut last = f64::NAN;
            for _ in 0..200 {
                pair.power_iterate(1);
                let mut tape = Tape::new();
                let (lp, ln, s) = pair.disc_losses(&mut tape, &quad, 0.9).unwrap();
                last = tape.value(lp).item().unwrap();
                let total = tape.add(lp, ln).unwrap();
                tape.backward(total).unwrap();
                opt_p.step(pair.pos.params_mut(), &s.pos_params.grads(&tape), 1e-2);
                opt_n.step(pair.neg.params_mut(), &s.neg_params.grads(&tape), 1e-2);
            }
            assert!(last < LN_2, "{arch:?}: {last}");
        }
    }

    #[test]
    fn pair_checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pair = DiscriminatorPair::new(&cfg(DiscArch::Transformer)).unwrap();
        pair.mu_pos = 0.25;
        pair.mu_neg = -1.5;
        pair.power_iterate(3);
        let ck = Checkpoint::from_bytes(&pair.to_checkpoint().to_bytes()).unwrap();
        let back = DiscriminatorPair::from_checkpoint(&ck).unwrap();
        let quad = random_quad(&mut rng, 2, 3, 6);
        assert_eq!(back.gen_adv_value(&quad).unwrap(), pair.gen_adv_value(&quad).unwrap());
        assert_eq!(back.to_checkpoint().to_bytes(), pair.to_checkpoint().to_bytes());
    }

    fn gaussians(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Tensor {
        Tensor::randn(&[n, d], 1.0, rng).map(|x| x + shift)
    }

    #[test]
    fn dra_estimates_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let est = DraEstimateConfig {
            disc: DiscConfig {
                arch: DiscArch::Mlp,
                ..cfg(DiscArch::Mlp)
            },
            train_steps: 300,
            lr: 1e-2,
        };
        let a = gaussians(&mut rng, 64, 1, 0.0);
        let same = estimate_dra(&a, &a, &est).unwrap();
        assert!(same <= 0.05, "{same}");
        let far = gaussians(&mut rng, 64, 1, 10.0);
        let apart = estimate_dra(&a, &far, &est).unwrap();
        assert!(apart >= 1.0 && apart <= LN_4 + 0.05, "{apart}");
    }
}
