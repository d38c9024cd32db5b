//! The alternating training loop: discriminator updates followed by a
//! policy update on the preference loss plus the weighted adversarial loss.

mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_global_norm, lr_at, sgd_step, Adam, AdamConfig, Optimizer, OptimizerKind};

use crate::checkpoint::Checkpoint;
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::latentadv::{disc_losses_from_scores, DiscArch, DiscConfig, DiscriminatorPair, QuadLatents};
use crate::nanolm::{LmConfig, NanoLm, TokenBatch};
use crate::prefdata::{make_batches, CharTokenizer, PreferenceBatch, PreferenceRecord};
use crate::prefloss::{preference_loss, sequence_logprob, LogProbQuad, PrefLossConfig, QuadValues};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainObjective {
    Dpo,
    Simpo,
    GanpoDpo,
    GanpoSimpo,
}

impl TrainObjective {
    pub fn is_adversarial(self) -> bool {
        matches!(self, TrainObjective::GanpoDpo | TrainObjective::GanpoSimpo)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainObjective::Dpo => "dpo",
            TrainObjective::Simpo => "simpo",
            TrainObjective::GanpoDpo => "ganpo-dpo",
            TrainObjective::GanpoSimpo => "ganpo-simpo",
        }
    }
}

impl std::str::FromStr for TrainObjective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            TrainObjective::Dpo,
            TrainObjective::Simpo,
            TrainObjective::GanpoDpo,
            TrainObjective::GanpoSimpo,
        ]
        .into_iter()
        .find(|o| o.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown objective {s:?}")))
    }
}

/// Which positions of the hidden states the discriminators see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentPositions {
    /// Every non-padding position (prompt and response).
    All,
    Response,
}

/// Which discriminator weights score the policy latents in the generator loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenScoring {
    PostUpdate,
    PreUpdate,
}

/// Parse a unit enum from its serialized name.
fn parse_name<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| Error::Config(format!("unknown {what} {s:?}")))
}

impl std::str::FromStr for LatentPositions {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_name("latent positions", s)
    }
}

impl std::str::FromStr for GenScoring {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_name("generator scoring", s)
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_name("optimizer", s)
    }
}

/// Every hyperparameter of a training run. Flat, so that each field maps to
/// one command-line flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: TrainObjective,
    pub eta: f64,
    pub lambda_adv: f64,
    pub alpha: f64,
    pub beta_dpo: f64,
    pub simpo_beta: f64,
    pub simpo_gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many steps (0 = no limit).
    pub max_steps: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub disc_lr_ratio: f64,
    pub disc_arch: DiscArch,
    pub disc_hidden: usize,
    pub disc_layers: usize,
    pub disc_heads: usize,
    pub disc_max_positions: usize,
    pub sn_power_iters: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Global gradient-norm clip (0 disables).
    pub clip_norm: f64,
    pub latent_positions: LatentPositions,
    pub gen_scoring: GenScoring,
    pub lm_d_model: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_max_seq_len: usize,
    /// Extra checkpoint interval in steps (0 = epoch boundaries only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: TrainObjective::GanpoDpo,
            eta: 1e-4,
            lambda_adv: 1.0,
            alpha: 0.9,
            beta_dpo: 0.1,
            simpo_beta: 2.0,
            simpo_gamma: 0.5,
            batch_size: 8,
            epochs: 20,
            max_steps: 0,
            warmup_fraction: 0.1,
            seed: 0,
            disc_lr_ratio: 0.5,
            disc_arch: DiscArch::Transformer,
            disc_hidden: 16,
            disc_layers: 2,
            disc_heads: 4,
            disc_max_positions: 64,
            sn_power_iters: 1,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.0,
            clip_norm: 1.0,
            latent_positions: LatentPositions::All,
            gen_scoring: GenScoring::PostUpdate,
            lm_d_model: 64,
            lm_layers: 4,
            lm_heads: 4,
            lm_max_seq_len: 32,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad("eta must be a finite non-negative number");
        }
        if !(self.lambda_adv >= 0.0) {
            return bad("lambda_adv must be >= 0");
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.disc_lr_ratio >= 0.0) || !(self.clip_norm >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("disc_lr_ratio, clip_norm and weight_decay must be >= 0");
        }
        self.pref_loss().validate()?;
        self.lm_config().validate()?;
        self.disc_config().validate()
    }

    pub fn pref_loss(&self) -> PrefLossConfig {
        match self.objective {
            TrainObjective::Dpo | TrainObjective::GanpoDpo => PrefLossConfig::dpo(self.beta_dpo),
            TrainObjective::Simpo | TrainObjective::GanpoSimpo => PrefLossConfig {
                beta: self.simpo_beta,
                gamma: self.simpo_gamma,
                objective: crate::prefloss::Objective::Simpo,
            },
        }
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            vocab_size: CharTokenizer::default().vocab_size(),
            d_model: self.lm_d_model,
            n_layers: self.lm_layers,
            n_heads: self.lm_heads,
            max_seq_len: self.lm_max_seq_len,
            seed: self.seed,
        }
    }

    /// Positive-discriminator config; the negative one uses `seed + 1`.
    pub fn disc_config(&self) -> DiscConfig {
        DiscConfig {
            arch: self.disc_arch,
            d_in: self.lm_d_model,
            hidden: self.disc_hidden,
            n_layers: self.disc_layers,
            n_heads: self.disc_heads,
            max_positions: self.disc_max_positions,
            seed: self.seed.wrapping_mul(2).wrapping_add(1_000),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Per-step log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_opo: f64,
    pub l_adv: f64,
    pub l_phi_pos: f64,
    pub l_phi_neg: f64,
    pub reward_margin: f64,
    pub mu_pos: f64,
    pub mu_neg: f64,
    pub lr: f64,
    /// Policy gradient norm before clipping.
    pub grad_norm: f64,
    /// Wall-clock time of the step. Not part of the deterministic log.
    #[serde(skip)]
    pub wall_clock_ms: f64,
}

impl StepMetrics {
    pub fn is_finite(&self) -> bool {
        [
            self.l_opo,
            self.l_adv,
            self.l_phi_pos,
            self.l_phi_neg,
            self.reward_margin,
            self.mu_pos,
            self.mu_neg,
            self.lr,
            self.grad_norm,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

/// Phases of one step, in the order they ran.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum StepEvent {
    PolicyForward,
    ReferenceForward,
    ScoreLatents,
    UpdateMeans,
    DiscUpdate,
    Rescore,
    GenUpdate,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub policy: NanoLm,
    pub reference: NanoLm,
    pub disc: DiscriminatorPair,
    pub opt_policy: Optimizer,
    pub opt_pos: Optimizer,
    pub opt_neg: Optimizer,
    /// Steps completed.
    pub step: usize,
    pub total_steps: usize,
    pub trace: Option<Vec<StepEvent>>,
}

fn steps_per_epoch(n_records: usize, batch_size: usize) -> usize {
    n_records.div_ceil(batch_size)
}

/// Planned step count for a corpus of `n_records`.
pub fn total_steps(config: &TrainConfig, n_records: usize) -> usize {
    let all = config.epochs * steps_per_epoch(n_records, config.batch_size);
    if config.max_steps > 0 {
        all.min(config.max_steps)
    } else {
        all
    }
}

/// Shuffle seed of one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5eed);
    rng.set_word_pos(epoch as u128 * 16);
    rng.random()
}

fn positions_mask(config: &TrainConfig, tokens: &TokenBatch, response: &Tensor) -> Tensor {
    match config.latent_positions {
        LatentPositions::All => tokens.attn_mask.clone(),
        LatentPositions::Response => response.clone(),
    }
}

impl TrainState {
    pub fn new(config: &TrainConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        let policy = NanoLm::init(&config.lm_config())?;
        let reference = policy.frozen_copy();
        let disc = DiscriminatorPair::new(&config.disc_config())?;
        Ok(TrainState {
            opt_policy: Optimizer::new(config.optimizer, policy.params(), config.weight_decay),
            opt_pos: Optimizer::new(config.optimizer, disc.pos.params(), config.weight_decay),
            opt_neg: Optimizer::new(config.optimizer, disc.neg.params(), config.weight_decay),
            config: config.clone(),
            policy,
            reference,
            disc,
            step: 0,
            total_steps,
            trace: None,
        })
    }

    fn event(&mut self, e: StepEvent) {
        if let Some(t) = &mut self.trace {
            t.push(e);
        }
    }

    /// Hidden states and summed response log-probabilities of the frozen
    /// reference on both sides of a batch.
    fn reference_pass(&self, batch: &PreferenceBatch) -> Result<(Tensor, Tensor, Vec<f64>, Vec<f64>)> {
        let side = |tokens: &TokenBatch, resp: &Tensor| -> Result<(Tensor, Vec<f64>)> {
            let out = self.reference.forward(tokens)?;
            let mut tape = Tape::new();
            let l = tape.constant(out.logits);
            let lp = sequence_logprob(&mut tape, l, &tokens.ids, resp)?;
            Ok((out.last_hidden, tape.value(lp).data().to_vec()))
        };
        let (hc, lpc) = side(&batch.chosen, &batch.chosen_response_mask)?;
        let (hr, lpr) = side(&batch.rejected, &batch.rejected_response_mask)?;
        Ok((hc, hr, lpc, lpr))
    }

    /// One full training step on `batch`.
    pub fn train_step(&mut self, batch: &PreferenceBatch) -> Result<StepMetrics> {
        let started = Instant::now();
        let cfg = self.config.clone();
        let lr = lr_at(self.step, self.total_steps, cfg.eta, cfg.warmup_fraction);
        let disc_lr = lr * cfg.disc_lr_ratio;

        let mut tape = Tape::new();
        let pp = self.policy.bind(&mut tape);
        let (logits_c, hid_c) = self.policy.forward_on(&mut tape, &pp, &batch.chosen)?;
        let (logits_r, hid_r) = self.policy.forward_on(&mut tape, &pp, &batch.rejected)?;
        self.event(StepEvent::PolicyForward);
        let (ref_hc, ref_hr, ref_lpc, ref_lpr) = self.reference_pass(batch)?;
        self.event(StepEvent::ReferenceForward);

        let mut l_phi = (0.0, 0.0);
        let mut l_adv_term = None;
        if cfg.objective.is_adversarial() {
            let quad = QuadLatents {
                ref_pos: ref_hc.clone(),
                ref_neg: ref_hr.clone(),
                theta_pos: tape.value(hid_c).clone(),
                theta_neg: tape.value(hid_r).clone(),
                mask_pos: positions_mask(&cfg, &batch.chosen, &batch.chosen_response_mask),
                mask_neg: positions_mask(&cfg, &batch.rejected, &batch.rejected_response_mask),
            };
            let snapshot = (cfg.gen_scoring == GenScoring::PreUpdate).then(|| self.disc.clone());

            self.disc.power_iterate(cfg.sn_power_iters);
            let mut dtape = Tape::new();
            let scores = self.disc.score_for_disc(&mut dtape, &quad)?;
            self.event(StepEvent::ScoreLatents);
            self.disc.update_running_means(&dtape, &scores, cfg.alpha);
            self.event(StepEvent::UpdateMeans);
            let b = self.disc.disc_baselines(&dtape, &scores);
            let (lp, ln) = disc_losses_from_scores(&mut dtape, &scores, &b)?;
            l_phi = (dtape.value(lp).item()?, dtape.value(ln).item()?);
            if !(l_phi.0.is_finite() && l_phi.1.is_finite()) {
                return Err(Error::Diverged(format!(
                    "step {}: l_phi_pos={} l_phi_neg={}",
                    self.step, l_phi.0, l_phi.1
                )));
            }
            if self.disc.pos.is_learned() {
                let total = dtape.add(lp, ln)?;
                dtape.backward(total)?;
                let mut gp = scores.pos_params.grads(&dtape);
                let mut gn = scores.neg_params.grads(&dtape);
                if cfg.clip_norm > 0.0 {
                    clip_global_norm(&mut gp, cfg.clip_norm);
                    clip_global_norm(&mut gn, cfg.clip_norm);
                }
                self.opt_pos.step(self.disc.pos.params_mut(), &gp, disc_lr);
                self.opt_neg.step(self.disc.neg.params_mut(), &gn, disc_lr);
            }
            self.event(StepEvent::DiscUpdate);

            let scorer = snapshot.as_ref().unwrap_or(&self.disc);
            let (cp, cn) = quad.centers()?;
            let rp = tape.constant(ref_hc);
            let rn = tape.constant(ref_hr);
            let g = scorer.gen_adv_loss(&mut tape, rp, hid_c, rn, hid_r, (&quad.mask_pos, &quad.mask_neg), (&cp, &cn))?;
            l_adv_term = Some(g.l_adv);
            self.event(StepEvent::Rescore);
        }

        let lpc = sequence_logprob(&mut tape, logits_c, &batch.chosen.ids, &batch.chosen_response_mask)?;
        let lpr = sequence_logprob(&mut tape, logits_r, &batch.rejected.ids, &batch.rejected_response_mask)?;
        let quad_lp = LogProbQuad {
            policy_chosen: lpc,
            policy_rejected: lpr,
            ref_chosen: tape.constant(Tensor::from_vec(ref_lpc)),
            ref_rejected: tape.constant(Tensor::from_vec(ref_lpr)),
            len_chosen: batch.len_chosen.clone(),
            len_rejected: batch.len_rejected.clone(),
        };
        let l_opo = preference_loss(&mut tape, &quad_lp, &cfg.pref_loss())?;
        let (total, l_adv) = match l_adv_term {
            Some(adv) => {
                let weighted = tape.scale(adv, cfg.lambda_adv);
                (tape.add(l_opo, weighted)?, tape.value(adv).item()?)
            }
            None => (l_opo, 0.0),
        };
        let total_value = tape.value(total).item()?;
        let l_opo_value = tape.value(l_opo).item()?;
        if !total_value.is_finite() {
            return Err(Error::Diverged(format!(
                "step {}: total={total_value} l_opo={l_opo_value} l_adv={l_adv} l_phi_pos={} l_phi_neg={} mu_pos={} mu_neg={}",
                self.step, l_phi.0, l_phi.1, self.disc.mu_pos, self.disc.mu_neg
            )));
        }
        tape.backward(total)?;
        let mut grads = pp.grads(&tape);
        let grad_norm = if cfg.clip_norm > 0.0 {
            clip_global_norm(&mut grads, cfg.clip_norm)
        } else {
            grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
        };
        self.opt_policy.step(self.policy.params_mut()?, &grads, lr);
        self.event(StepEvent::GenUpdate);

        let margin = QuadValues::from_tape(&tape, &quad_lp).reward_margin(cfg.beta_dpo);
        let metrics = StepMetrics {
            step: self.step,
            l_opo: l_opo_value,
            l_adv,
            l_phi_pos: l_phi.0,
            l_phi_neg: l_phi.1,
            reward_margin: margin,
            mu_pos: self.disc.mu_pos,
            mu_neg: self.disc.mu_neg,
            lr,
            grad_norm,
            wall_clock_ms: (started.elapsed().as_secs_f64() * 1e3).max(f64::MIN_POSITIVE),
        };
        self.step += 1;
        Ok(metrics)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let opt_meta = |o: &Optimizer| {
            let (_, _, t, skipped) = o.state();
            serde_json::json!({ "t": t, "skipped": skipped })
        };
        let meta = serde_json::json!({
            "config": self.config,
            "step": self.step,
            "total_steps": self.total_steps,
            "pos_config": self.disc.pos.config(),
            "neg_config": self.disc.neg.config(),
            "mu_pos": self.disc.mu_pos,
            "mu_neg": self.disc.mu_neg,
            "opt_policy": opt_meta(&self.opt_policy),
            "opt_pos": opt_meta(&self.opt_pos),
            "opt_neg": opt_meta(&self.opt_neg),
        });
        let mut ck = Checkpoint::new("train_state", meta);
        for (n, t) in self.policy.params().iter() {
            ck.push(format!("policy.{n}"), t.clone());
        }
        for (n, t) in self.reference.params().iter() {
            ck.push(format!("reference.{n}"), t.clone());
        }
        self.disc.push_into(&mut ck);
        for (name, o) in [("opt_policy", &self.opt_policy), ("opt_pos", &self.opt_pos), ("opt_neg", &self.opt_neg)] {
            let (m, v, _, _) = o.state();
            for (i, t) in m.into_iter().enumerate() {
                ck.push(format!("{name}.m.{i}"), t);
            }
            for (i, t) in v.into_iter().enumerate() {
                ck.push(format!("{name}.v.{i}"), t);
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("train_state")?;
        let meta = &ck.meta;
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing {k}")));
        let config: TrainConfig =
            serde_json::from_value(get("config")?).map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
        let as_usize = |k: &str| -> Result<usize> {
            get(k)?.as_u64().map(|x| x as usize).ok_or_else(|| Error::Checkpoint(format!("bad {k}")))
        };
        let mut state = TrainState::new(&config, as_usize("total_steps")?)?;
        state.step = as_usize("step")?;
        let lm_cfg = config.lm_config();
        state.policy = NanoLm::from_config_and_tensors(&lm_cfg, &ck.with_prefix("policy."))?;
        state.reference = NanoLm::from_config_and_tensors(&lm_cfg, &ck.with_prefix("reference."))?.frozen_copy();
        state.disc = DiscriminatorPair::from_meta_and_tensors(meta, ck)?;
        for (name, opt) in [
            ("opt_policy", &mut state.opt_policy),
            ("opt_pos", &mut state.opt_pos),
            ("opt_neg", &mut state.opt_neg),
        ] {
            let om = get(name)?;
            let num = |k: &str| om.get(k).and_then(|v| v.as_u64()).ok_or_else(|| Error::Checkpoint(format!("bad {name}.{k}")));
            let (t, skipped) = (num("t")?, num("skipped")?);
            let collect = |kind: &str| -> Vec<Tensor> {
                let mut v: Vec<(usize, Tensor)> = ck
                    .with_prefix(&format!("{name}.{kind}."))
                    .into_iter()
                    .filter_map(|(i, t)| i.parse().ok().map(|i| (i, t)))
                    .collect();
                v.sort_by_key(|(i, _)| *i);
                v.into_iter().map(|(_, t)| t).collect()
            };
            opt.restore(collect("m"), collect("v"), t, skipped)?;
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Files written by [`run`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub metrics_path: PathBuf,
    pub timing_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub reference_hash: String,
    pub skipped_updates: u64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

/// Keep the first `n` lines of a log file (creating it if missing).
fn truncate_lines(path: &Path, n: usize) -> Result<()> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let kept: String = text.lines().take(n).map(|l| format!("{l}\n")).collect();
    if kept.lines().count() != n {
        return Err(Error::Checkpoint(format!(
            "{} has fewer than {n} lines; cannot resume",
            path.display()
        )));
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Train on `records`, writing metrics, timing and checkpoints to
/// `out_dir`. With `resume`, the state is restored from that checkpoint and
/// the logs are cut back to its step before continuing.
pub fn run(
    config: &TrainConfig,
    records: &[PreferenceRecord],
    out_dir: &Path,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&StepMetrics),
) -> Result<RunSummary> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let timing_path = out_dir.join(TIMING_FILE);
    let planned = total_steps(config, records.len());
    let mut state = match resume {
        Some(p) => {
            let s = TrainState::load(p)?;
            if &s.config != config || s.total_steps != planned {
                return Err(Error::Config("resume checkpoint was written with a different configuration".into()));
            }
            truncate_lines(&metrics_path, s.step)?;
            truncate_lines(&timing_path, s.step)?;
            s
        }
        None => {
            for p in [&metrics_path, &timing_path] {
                std::fs::write(p, "").map_err(|e| Error::io(p, e))?;
            }
            TrainState::new(config, planned)?
        }
    };
    let ref_hash = state.reference.content_hash();
    let open = |p: &Path| {
        std::fs::OpenOptions::new()
            .append(true)
            .open(p)
            .map_err(|e| Error::io(p, e))
    };
    let (mut mlog, mut tlog) = (open(&metrics_path)?, open(&timing_path)?);
    let tok = CharTokenizer::default();
    let spe = steps_per_epoch(records.len(), config.batch_size);
    let mut checkpoints = Vec::new();
    while state.step < planned {
        let epoch = state.step / spe;
        let batches = make_batches(records, config.batch_size, epoch_seed(config.seed, epoch), &tok)?;
        for batch in &batches[state.step % spe..] {
            if state.step >= planned {
                break;
            }
            let m = state.train_step(batch)?;
            let line = serde_json::to_string(&m).expect("metrics serialize");
            writeln!(mlog, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            writeln!(tlog, "{{\"step\":{},\"wall_clock_ms\":{}}}", m.step, m.wall_clock_ms)
                .map_err(|e| Error::io(&timing_path, e))?;
            progress(&m);
            let at_epoch_end = state.step % spe == 0;
            let periodic = config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0;
            if (at_epoch_end || periodic) && state.step < planned {
                let p = checkpoint_path(out_dir, state.step);
                state.save(&p)?;
                checkpoints.push(p);
            }
        }
    }
    if state.reference.content_hash() != ref_hash {
        return Err(Error::Contract("reference parameters changed during training".into()));
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    state.save(&final_checkpoint)?;
    Ok(RunSummary {
        steps: state.step,
        metrics_path,
        timing_path,
        final_checkpoint,
        checkpoints,
        reference_hash: ref_hash,
        skipped_updates: state.opt_policy.skipped() + state.opt_pos.skipped() + state.opt_neg.skipped(),
    })
}

/// Parse a metrics log written by [`run`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefdata::{oracle_reward, Task};
    use std::f64::consts::LN_2;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            lm_d_model: 16,
            lm_layers: 1,
            lm_heads: 2,
            lm_max_seq_len: 24,
            disc_hidden: 8,
            disc_layers: 1,
            disc_heads: 2,
            batch_size: 4,
            epochs: 2,
            ..TrainConfig::default()
        }
    }

    pub(crate) fn toy_records(n: usize) -> Vec<PreferenceRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let letters: Vec<char> = "abcdefgh".chars().collect();
        (0..n)
            .map(|i| {
                let len = 2 + i % 4;
                let mut s: Vec<char> = (0..len).map(|_| letters[rng.random_range(0..8)]).collect();
                let rejected: String = s.iter().rev().collect();
                s.sort();
                let chosen: String = s.iter().collect();
                let prompt: String = format!("S{}", &chosen[..1]);
                let (c, r) = (oracle_reward(Task::SortedRun, &chosen), oracle_reward(Task::SortedRun, &rejected));
                if c > r {
                    PreferenceRecord { prompt, chosen, rejected, scores: (c, r) }
                } else {
                    PreferenceRecord { prompt, chosen: "abc".into(), rejected: "cba".into(), scores: (1.0, 1.0 / 3.0) }
                }
            })
            .collect()
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        assert!(TrainConfig::from_toml_str("bogus = 1").is_err());
        let partial = TrainConfig::from_toml_str("lambda_adv = 0.5\nobjective = \"dpo\"").unwrap();
        assert_eq!(partial.lambda_adv, 0.5);
        assert_eq!(partial.objective, TrainObjective::Dpo);
        assert_eq!((partial.alpha, partial.beta_dpo, partial.warmup_fraction, partial.disc_lr_ratio), (0.9, 0.1, 0.1, 0.5));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig { lambda_adv: -1.0, ..TrainConfig::default() },
            TrainConfig { alpha: 1.0, ..TrainConfig::default() },
            TrainConfig { warmup_fraction: 1.0, ..TrainConfig::default() },
            TrainConfig { lm_heads: 5, ..TrainConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn first_step_at_identity_has_zero_margin() {
        let records = toy_records(8);
        let cfg = tiny_config();
        let batches = make_batches(&records, 4, 0, &CharTokenizer::default()).unwrap();
        let mut st = TrainState::new(&cfg, 10).unwrap();
        let m = st.train_step(&batches[0]).unwrap();
        assert!((m.l_opo - LN_2).abs() < 1e-9);
        assert!(m.reward_margin.abs() < 1e-9);
        assert_eq!(m.lr, 0.0);
    }

    #[test]
    fn step_order_follows_the_algorithm() {
        let records = toy_records(8);
        let batches = make_batches(&records, 4, 0, &CharTokenizer::default()).unwrap();
        let mut st = TrainState::new(&tiny_config(), 10).unwrap();
        st.trace = Some(Vec::new());
        st.train_step(&batches[0]).unwrap();
        use StepEvent::*;
        assert_eq!(
            st.trace.unwrap(),
            vec![PolicyForward, ReferenceForward, ScoreLatents, UpdateMeans, DiscUpdate, Rescore, GenUpdate]
        );
    }

    #[test]
    fn training_never_touches_the_reference() {
        let records = toy_records(8);
        let batches = make_batches(&records, 4, 0, &CharTokenizer::default()).unwrap();
        let mut st = TrainState::new(&tiny_config(), 6).unwrap();
        let before = st.reference.content_hash();
        let policy_before = st.policy.content_hash();
        for b in batches.iter().cycle().take(4) {
            assert!(st.train_step(b).unwrap().is_finite());
        }
        assert_eq!(st.reference.content_hash(), before);
        assert_ne!(st.policy.content_hash(), policy_before);
    }

    #[test]
    fn train_state_checkpoint_round_trip() {
        let records = toy_records(8);
        let batches = make_batches(&records, 4, 0, &CharTokenizer::default()).unwrap();
        let mut st = TrainState::new(&tiny_config(), 6).unwrap();
        st.train_step(&batches[0]).unwrap();
        let bytes = st.to_checkpoint().to_bytes();
        let mut back = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
        let a = st.train_step(&batches[1]).unwrap();
        let b = back.train_step(&batches[1]).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
