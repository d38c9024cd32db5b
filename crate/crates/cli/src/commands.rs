//! Subcommand handlers.

use std::path::{Path, PathBuf};

use ganpo::checkpoint::Checkpoint;
use ganpo::divoracle::verify_properties;
use ganpo::evalsuite::{
    disc_oracle_correlation, eval_prompts, length_bucket_winrate, margin_curve, margin_rows, paired_responses,
    temperature_sweep, to_jsonl, CorrelationConfig, MarginCurve, SweepConfig, REPORT_NOTE,
};
use ganpo::nanolm::NanoLm;
use ganpo::prefdata::{gen_corpus, read_records, write_records, CorpusConfig};
use ganpo::trainer::{run, TrainConfig, TrainState};
use serde::Serialize;

use crate::{
    CliError, Command, DiscSide, EvalCorrArgs, EvalMarginsArgs, EvalSweepArgs, GenDataArgs, TrainArgs,
    VerifyArgs, OUT_DIR_ENV,
};

type Result<T> = std::result::Result<T, CliError>;

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::EvalSweep(a) => eval_sweep(&a),
        Command::EvalMargins(a) => eval_margins(&a),
        Command::EvalCorr(a) => eval_corr(&a),
        Command::VerifyDivergence(a) => verify_divergence(&a),
        Command::Plot(a) => crate::plot::run(&a, &out_or_default(&a.out, &format!("plots/{}.svg", a.kind.name()))),
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("ganpo-out"), PathBuf::from)
}

fn out_or_default(out: &Option<PathBuf>, rel: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| out_root().join(rel))
}

/// `dir/stem.jsonl` -> `dir/stem_<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}_{suffix}"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ganpo::Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| ganpo::Error::io(path, e).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value).expect("report serializes") + "\n"))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ganpo::Error::io(p, e))?;
            Ok(TrainConfig::from_toml_str(&text)?)
        }
        None => Ok(TrainConfig::default()),
    }
}

/// A model checkpoint: a bare language model, or a train state (whose
/// policy is taken, and whose reference is kept alongside).
struct LoadedModel {
    model: NanoLm,
    reference: Option<NanoLm>,
}

fn load_model(path: &Path) -> Result<LoadedModel> {
    let ck = Checkpoint::load(path)?;
    match ck.kind.as_str() {
        "nanolm" => Ok(LoadedModel {
            model: NanoLm::from_checkpoint(&ck)?,
            reference: None,
        }),
        "train_state" => {
            let st = TrainState::from_checkpoint(&ck)?;
            Ok(LoadedModel {
                model: st.policy,
                reference: Some(st.reference),
            })
        }
        other => Err(CliError::Runtime(format!(
            "{}: expected a nanolm or train_state checkpoint, found {other}",
            path.display()
        ))),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let lm = match &a.seed_model {
        Some(p) => {
            let loaded = load_model(p)?;
            loaded.reference.unwrap_or(loaded.model)
        }
        None => {
            let mut cfg = load_config(a.config.as_deref())?;
            if let Some(s) = a.model_seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            NanoLm::init(&cfg.lm_config())?
        }
    };
    let cc = CorpusConfig {
        task: a.task,
        n_records: a.n_records,
        temperature: a.temperature,
        seed: a.seed,
        max_response_len: a.max_response_len,
        max_resamples: a.max_resamples,
    };
    let (records, stats) = gen_corpus(&lm, &cc)?;
    let out = out_or_default(&a.out, &format!("data/{}.jsonl", a.task.name()));
    write_records(&out, &records)?;
    let stats_path = out.with_extension("stats.json");
    write_json(&stats_path, &serde_json::json!({ "corpus": cc, "stats": stats, "seed_model": lm.content_hash() }))?;
    eprintln!(
        "wrote {} records to {} ({} prompts tried, {} tie resamples, {} skipped)",
        stats.records,
        out.display(),
        stats.prompts_tried,
        stats.tie_resamples,
        stats.tie_skips
    );
    Ok(())
}

/// Merge defaults, the optional config file and flag overrides.
pub fn merged_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = load_config(a.config.as_deref())?;
    a.flags.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = merged_config(a)?;
    if a.dump_config {
        print!("{}", cfg.to_toml_string());
        return Ok(());
    }
    let data = a.data.as_ref().ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let records = read_records(data)?;
    let out = out_or_default(&a.out, "train");
    write_file(&out.join("config.toml"), &cfg.to_toml_string())?;
    let every = a.log_every;
    let summary = run(&cfg, &records, &out, a.resume.as_deref(), &mut |m| {
        if every > 0 && m.step % every == 0 {
            eprintln!(
                "step {:>5}  l_opo {:.4}  l_adv {:.4}  l_phi+ {:.4}  l_phi- {:.4}  margin {:.4}  lr {:.2e}",
                m.step, m.l_opo, m.l_adv, m.l_phi_pos, m.l_phi_neg, m.reward_margin, m.lr
            );
        }
    })?;
    write_json(&out.join("summary.json"), &summary)?;
    eprintln!("trained {} steps; final checkpoint {}", summary.steps, summary.final_checkpoint.display());
    Ok(())
}

#[derive(Serialize)]
struct SweepRow<'a> {
    series: &'a str,
    temperature: f64,
    win_rate: f64,
    mean_reward: f64,
}

#[derive(Serialize)]
struct BucketOut<'a> {
    series: &'a str,
    lo: usize,
    hi: Option<usize>,
    n: usize,
    win_rate: f64,
    low_confidence: bool,
}

fn eval_sweep(a: &EvalSweepArgs) -> Result<()> {
    if a.label_a == a.label_b {
        return Err(CliError::Usage("--label-a and --label-b must differ".into()));
    }
    let model_a = load_model(&a.model_a)?;
    let model_b = match &a.model_b {
        Some(p) => load_model(p)?.model,
        None => model_a.reference.clone().ok_or_else(|| {
            CliError::Usage("--model-b is required unless --model-a is a train-state checkpoint".into())
        })?,
    };
    let prompts = eval_prompts(a.task, a.n_prompts, a.prompt_seed);
    let cfg = SweepConfig {
        temperatures: a.temperatures.clone(),
        seed_b: a.seed_b.unwrap_or(a.seed),
        max_response_len: a.max_response_len,
        ..SweepConfig::new(a.task, a.seed)
    };
    let sweep = temperature_sweep(&model_a.model, &model_b, &prompts, &cfg)?;
    let mut rows = Vec::new();
    for p in &sweep.points {
        rows.push(SweepRow { series: &a.label_a, temperature: p.temperature, win_rate: p.win_rate, mean_reward: p.mean_reward_a });
        rows.push(SweepRow { series: &a.label_b, temperature: p.temperature, win_rate: 1.0 - p.win_rate, mean_reward: p.mean_reward_b });
    }
    let (ra, rb) = paired_responses(&model_a.model, &model_b, &prompts, a.bucket_temperature, &cfg)?;
    let buckets = length_bucket_winrate(&ra, &rb, a.task, &a.bucket_edges)?;
    let bucket_rows: Vec<BucketOut> = buckets
        .rows
        .iter()
        .map(|r| BucketOut { series: &a.label_a, lo: r.lo, hi: r.hi, n: r.n, win_rate: r.win_rate, low_confidence: r.low_confidence })
        .collect();

    let out = out_or_default(&a.out, "eval/sweep.jsonl");
    write_file(&out, &to_jsonl(&rows))?;
    let bucket_path = sibling(&out, "buckets.jsonl");
    write_file(&bucket_path, &to_jsonl(&bucket_rows))?;
    write_json(
        &sibling(&out, "summary.json"),
        &serde_json::json!({
            "note": REPORT_NOTE,
            "series": [a.label_a, a.label_b],
            "sweep": sweep,
            "bucket_temperature": a.bucket_temperature,
            "buckets": buckets,
        }),
    )?;
    eprintln!("note: {REPORT_NOTE}");
    for p in &sweep.points {
        eprintln!(
            "T={:<5} win({}) {:.3}  reward {} {:.3}  {} {:.3}",
            p.temperature, a.label_a, p.win_rate, a.label_a, p.mean_reward_a, a.label_b, p.mean_reward_b
        );
    }
    for n in &buckets.notes {
        eprintln!("note: {n}");
    }
    eprintln!("wrote {} and {}", out.display(), bucket_path.display());
    Ok(())
}

fn eval_margins(a: &EvalMarginsArgs) -> Result<()> {
    for (i, (name, _)) in a.runs.iter().enumerate() {
        if a.runs[..i].iter().any(|(n, _)| n == name) {
            return Err(CliError::Usage(format!("run name {name:?} given twice")));
        }
    }
    let mut curves: Vec<(&str, MarginCurve)> = Vec::new();
    for (name, path) in &a.runs {
        curves.push((name, margin_curve(path)?));
    }
    let named: Vec<(&str, &MarginCurve)> = curves.iter().map(|(n, c)| (*n, c)).collect();
    let out = out_or_default(&a.out, "eval/margins.jsonl");
    write_file(&out, &to_jsonl(&margin_rows(&named)))?;
    let summary: Vec<serde_json::Value> = curves
        .iter()
        .map(|(n, c)| {
            serde_json::json!({ "series": n, "steps": c.steps.len(), "start_mean": c.start_mean, "end_mean": c.end_mean, "delta": c.delta })
        })
        .collect();
    write_json(&sibling(&out, "summary.json"), &serde_json::json!({ "note": REPORT_NOTE, "runs": summary }))?;
    for (n, c) in &curves {
        eprintln!("{n}: margin {:.4} -> {:.4} (delta {:+.4})", c.start_mean, c.end_mean, c.delta);
    }
    Ok(())
}

#[derive(Serialize)]
struct CorrRow {
    score: f64,
    reward: f64,
}

fn eval_corr(a: &EvalCorrArgs) -> Result<()> {
    let state = TrainState::load(&a.checkpoint)?;
    let disc = match a.disc {
        DiscSide::Pos => &state.disc.pos,
        DiscSide::Neg => &state.disc.neg,
    };
    let prompts = eval_prompts(a.task, a.n, a.prompt_seed);
    let cfg = CorrelationConfig {
        task: a.task,
        temperature: a.temperature,
        seed: a.seed,
        max_response_len: a.max_response_len,
        positions: state.config.latent_positions,
        latents: a.latents,
    };
    let report = disc_oracle_correlation(disc, &state.policy, &state.reference, &prompts, &cfg)?;
    let rows: Vec<CorrRow> = report.scores.iter().zip(&report.rewards).map(|(&score, &reward)| CorrRow { score, reward }).collect();
    let out = out_or_default(&a.out, "eval/corr.jsonl");
    write_file(&out, &to_jsonl(&rows))?;
    write_json(
        &sibling(&out, "summary.json"),
        &serde_json::json!({
            "note": REPORT_NOTE,
            "r": report.r,
            "degenerate": report.degenerate,
            "n": report.n,
            "temperature": report.temperature,
            "disc": format!("{:?}", a.disc).to_lowercase(),
            "latents": a.latents,
        }),
    )?;
    match report.r {
        Some(r) => eprintln!("pearson r = {r:.4} over {} samples at T={}", report.n, report.temperature),
        None => eprintln!("correlation undefined: scores or rewards are constant over {} samples", report.n),
    }
    Ok(())
}

fn verify_divergence(a: &VerifyArgs) -> Result<()> {
    let checks = verify_properties(a.support, a.trials, a.seed)?;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(p) = &a.out {
        write_json(p, &checks)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} divergence checks failed", checks.len())));
    }
    Ok(())
}
