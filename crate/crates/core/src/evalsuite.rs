//! Evaluation against the analytic oracle: temperature sweeps, discriminator
//! versus oracle correlation, reward-margin curves, length-bucketed win
//! rates and a discriminator-architecture ablation.
//!
//! Every comparison here is relative to the task oracle, so results are
//! directional only.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latentadv::{pooled_center, DiscArch, Discriminator};
use crate::nanolm::NanoLm;
use crate::prefdata::{derive_seed, encode_sequences, oracle_reward, random_prompt, sample_responses, CharTokenizer, PreferenceRecord, Task};
use crate::trainer::{read_metrics, run, LatentPositions, TrainConfig};

pub const DEFAULT_TEMPERATURES: [f64; 7] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5];

/// Header line attached to every report.
pub const REPORT_NOTE: &str = "scores come from the analytic task oracle; compare directions, not absolute values";

/// `n` evaluation prompts for `task`, reproducible from `seed`.
pub fn eval_prompts(task: Task, n: usize, seed: u64) -> Vec<String> {
    (0..n)
        .map(|i| random_prompt(task, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 7))))
        .collect()
}

/// 1 if `a` beats `b`, 0.5 on a tie, else 0.
pub fn win_score(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub temperature: f64,
    /// Fraction of prompts where A beats B, ties counting one half.
    pub win_rate: f64,
    pub mean_reward_a: f64,
    pub mean_reward_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub task: Task,
    pub temperatures: Vec<f64>,
    pub points: Vec<SweepPoint>,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub task: Task,
    pub temperatures: Vec<f64>,
    pub seed_a: u64,
    pub seed_b: u64,
    pub max_response_len: usize,
}

impl SweepConfig {
    pub fn new(task: Task, seed: u64) -> Self {
        SweepConfig {
            task,
            temperatures: DEFAULT_TEMPERATURES.to_vec(),
            seed_a: seed,
            seed_b: seed,
            max_response_len: 10,
        }
    }
}

fn prompt_seeds(seed: u64, temp_index: usize, n: usize) -> Vec<u64> {
    (0..n).map(|i| derive_seed(seed, i as u64, 100 + temp_index as u64)).collect()
}

fn sample_both(a: &NanoLm, b: &NanoLm, prompts: &[String], t: f64, k: usize, cfg: &SweepConfig) -> Result<(Vec<String>, Vec<String>)> {
    let ra = sample_responses(a, prompts, t, cfg.max_response_len, &prompt_seeds(cfg.seed_a, k, prompts.len()))?;
    let rb = sample_responses(b, prompts, t, cfg.max_response_len, &prompt_seeds(cfg.seed_b, k, prompts.len()))?;
    Ok((ra, rb))
}

/// One response per prompt from each model at `temperature`, drawn from a
/// seed stream separate from the sweep's.
pub fn paired_responses(a: &NanoLm, b: &NanoLm, prompts: &[String], temperature: f64, cfg: &SweepConfig) -> Result<(Vec<String>, Vec<String>)> {
    sample_both(a, b, prompts, temperature, 1000, cfg)
}

/// Sample one response per prompt from each model at every temperature and
/// compare them under the oracle.
pub fn temperature_sweep(a: &NanoLm, b: &NanoLm, prompts: &[String], cfg: &SweepConfig) -> Result<SweepResult> {
    if prompts.is_empty() {
        return Err(Error::Config("temperature sweep needs at least one prompt".into()));
    }
    let n = prompts.len() as f64;
    let mut points = Vec::with_capacity(cfg.temperatures.len());
    for (k, &t) in cfg.temperatures.iter().enumerate() {
        let (ra, rb) = sample_both(a, b, prompts, t, k, cfg)?;
        let (mut wins, mut sa, mut sb) = (0.0, 0.0, 0.0);
        for (x, y) in ra.iter().zip(&rb) {
            let (ox, oy) = (oracle_reward(cfg.task, x), oracle_reward(cfg.task, y));
            wins += win_score(ox, oy);
            sa += ox;
            sb += oy;
        }
        points.push(SweepPoint {
            temperature: t,
            win_rate: wins / n,
            mean_reward_a: sa / n,
            mean_reward_b: sb / n,
        });
    }
    Ok(SweepResult {
        task: cfg.task,
        temperatures: cfg.temperatures.clone(),
        points,
        n_samples: prompts.len(),
    })
}

/// Pearson correlation, `None` when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// `None` when scores or rewards are constant.
    pub r: Option<f64>,
    pub degenerate: bool,
    pub n: usize,
    pub temperature: f64,
    pub scores: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl CorrelationReport {
    pub fn from_pairs(scores: Vec<f64>, rewards: Vec<f64>, temperature: f64) -> Self {
        let r = pearson(&scores, &rewards);
        CorrelationReport {
            r,
            degenerate: r.is_none(),
            n: scores.len(),
            temperature,
            scores,
            rewards,
        }
    }
}

/// Which model encodes the sampled responses into latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentSource {
    Policy,
    Reference,
}

impl std::str::FromStr for LatentSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "policy" => Ok(LatentSource::Policy),
            "reference" => Ok(LatentSource::Reference),
            _ => Err(Error::Config(format!("unknown latent source {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationConfig {
    pub task: Task,
    pub temperature: f64,
    pub seed: u64,
    pub max_response_len: usize,
    pub positions: LatentPositions,
    pub latents: LatentSource,
}

/// Sample responses from `policy`, encode them with the model chosen by
/// `cfg.latents`, score the latents with `disc` and correlate the scores
/// with the oracle reward. `reference` also supplies the center for the
/// fixed critic.
pub fn disc_oracle_correlation(
    disc: &Discriminator,
    policy: &NanoLm,
    reference: &NanoLm,
    prompts: &[String],
    cfg: &CorrelationConfig,
) -> Result<CorrelationReport> {
    let seeds = prompt_seeds(cfg.seed, 0, prompts.len());
    let responses = sample_responses(policy, prompts, cfg.temperature, cfg.max_response_len, &seeds)?;
    let pairs: Vec<(&str, &str)> = prompts.iter().map(String::as_str).zip(responses.iter().map(String::as_str)).collect();
    let (tokens, _, response_mask, _) = encode_sequences(&CharTokenizer::default(), &pairs)?;
    let mask = match cfg.positions {
        LatentPositions::All => tokens.attn_mask.clone(),
        LatentPositions::Response => response_mask,
    };
    let encoder = match cfg.latents {
        LatentSource::Policy => policy,
        LatentSource::Reference => reference,
    };
    let h = encoder.forward(&tokens)?.last_hidden;
    let center = match disc.config().arch {
        DiscArch::MseFixed => Some(pooled_center(&reference.forward(&tokens)?.last_hidden, &mask)?),
        _ => None,
    };
    let scores = disc.score(&h, &mask, center.as_ref())?;
    let rewards = responses.iter().map(|r| oracle_reward(cfg.task, r)).collect();
    Ok(CorrelationReport::from_pairs(scores, rewards, cfg.temperature))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginCurve {
    pub steps: Vec<usize>,
    pub margins: Vec<f64>,
    pub start_mean: f64,
    pub end_mean: f64,
    pub delta: f64,
}

impl MarginCurve {
    /// Summaries over the first and last tenth of the steps (at least one).
    pub fn from_series(steps: Vec<usize>, margins: Vec<f64>) -> Result<Self> {
        if margins.is_empty() || steps.len() != margins.len() {
            return Err(Error::Contract("margin curve needs a non-empty, aligned series".into()));
        }
        let w = margins.len().div_ceil(10);
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let start_mean = mean(&margins[..w]);
        let end_mean = mean(&margins[margins.len() - w..]);
        Ok(MarginCurve {
            steps,
            margins,
            start_mean,
            end_mean,
            delta: end_mean - start_mean,
        })
    }
}

/// Reward-margin series of a metrics log.
pub fn margin_curve(metrics_log: &Path) -> Result<MarginCurve> {
    let m = read_metrics(metrics_log)?;
    if m.is_empty() {
        return Err(Error::Parse {
            path: metrics_log.to_path_buf(),
            line: 0,
            msg: "metrics log is empty".into(),
        });
    }
    MarginCurve::from_series(m.iter().map(|x| x.step).collect(), m.iter().map(|x| x.reward_margin).collect())
}

/// One row per step with both runs' margins, for overlaying curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginRow {
    pub series: String,
    pub step: usize,
    pub reward_margin: f64,
}

pub fn margin_rows(named: &[(&str, &MarginCurve)]) -> Vec<MarginRow> {
    named
        .iter()
        .flat_map(|(name, c)| {
            c.steps.iter().zip(&c.margins).map(move |(&step, &m)| MarginRow {
                series: name.to_string(),
                step,
                reward_margin: m,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub lo: usize,
    /// Exclusive upper edge; `None` for the open last bucket.
    pub hi: Option<usize>,
    pub n: usize,
    pub win_rate: f64,
    pub low_confidence: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketTable {
    pub rows: Vec<BucketRow>,
    pub notes: Vec<String>,
}

pub const MIN_CONFIDENT_BUCKET: usize = 10;

/// Win rate of A over B grouped by the character length of A's response.
/// Buckets are `[e_i, e_{i+1})` plus a final open bucket `[e_last, ∞)`.
pub fn length_bucket_winrate(responses_a: &[String], responses_b: &[String], task: Task, edges: &[usize]) -> Result<BucketTable> {
    if responses_a.len() != responses_b.len() {
        return Err(Error::Contract("response sets must be paired".into()));
    }
    if edges.first() != Some(&0) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("bucket edges must start at 0 and increase strictly, got {edges:?}")));
    }
    let mut counts = vec![(0usize, 0.0f64); edges.len()];
    for (a, b) in responses_a.iter().zip(responses_b) {
        let len = a.chars().count();
        let k = edges.partition_point(|&e| e <= len) - 1;
        counts[k].0 += 1;
        counts[k].1 += win_score(oracle_reward(task, a), oracle_reward(task, b));
    }
    let mut table = BucketTable::default();
    for (k, &(n, wins)) in counts.iter().enumerate() {
        let (lo, hi) = (edges[k], edges.get(k + 1).copied());
        let range = hi.map_or(format!("[{lo}, inf)"), |h| format!("[{lo}, {h})"));
        if n == 0 {
            table.notes.push(format!("bucket {range} is empty"));
            continue;
        }
        table.rows.push(BucketRow {
            lo,
            hi,
            n,
            win_rate: wins / n as f64,
            low_confidence: n < MIN_CONFIDENT_BUCKET,
        });
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arch: DiscArch,
    pub margin_delta: f64,
    pub end_margin: f64,
    /// Mean oracle reward of policy samples at temperature 1.
    pub mean_reward: f64,
    /// Win rate of the trained policy over the reference at temperature 1.
    pub win_rate_vs_reference: f64,
}

/// Train one run per discriminator architecture under `out_dir/<arch>` and
/// compare the resulting policies.
pub fn arch_ablation(
    base: &TrainConfig,
    records: &[PreferenceRecord],
    archs: &[DiscArch],
    task: Task,
    prompts: &[String],
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(archs.len());
    for &arch in archs {
        let cfg = TrainConfig { disc_arch: arch, ..base.clone() };
        let dir = out_dir.join(arch.to_string());
        let summary = run(&cfg, records, &dir, None, &mut |_| {})?;
        let state = crate::trainer::TrainState::load(&summary.final_checkpoint)?;
        let curve = margin_curve(&summary.metrics_path)?;
        let sweep = temperature_sweep(
            &state.policy,
            &state.reference,
            prompts,
            &SweepConfig {
                temperatures: vec![1.0],
                ..SweepConfig::new(task, base.seed)
            },
        )?;
        rows.push(AblationRow {
            arch,
            margin_delta: curve.delta,
            end_margin: curve.end_mean,
            mean_reward: sweep.points[0].mean_reward_a,
            win_rate_vs_reference: sweep.points[0].win_rate,
        });
    }
    Ok(rows)
}

/// Serialize rows as JSON Lines.
pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("rows serialize") + "\n")
        .collect()
}
