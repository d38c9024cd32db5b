use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "lm_d_model = 16\nlm_layers = 1\nlm_heads = 2\nlm_max_seq_len = 24\n\
disc_hidden = 8\ndisc_layers = 1\ndisc_heads = 2\nbatch_size = 4\nepochs = 2\neta = 0.01\n";

fn ganpo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ganpo"))
        .args(args)
        .current_dir(dir)
        .env("GANPO_OUT_DIR", dir.join("out"))
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = ganpo(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn help_and_usage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["train", "--help"], &["plot", "--help"], &["--version"]] {
        assert_eq!(ganpo(dir.path(), args).status.code(), Some(0), "{args:?}");
    }
    let help = stdout(&ganpo(dir.path(), &["--help"]));
    for sub in ["gen-data", "train", "eval-sweep", "eval-margins", "eval-corr", "verify-divergence", "plot"] {
        assert!(help.contains(sub), "help lists {sub}");
    }
    for args in [&[][..], &["nope"], &["train", "--bogus"], &["train"], &["train", "--dump-config", "--eta", "x"]] {
        assert_eq!(ganpo(dir.path(), args).status.code(), Some(1), "{args:?}");
    }
    let missing = ganpo(dir.path(), &["train", "--data", "absent.jsonl"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.jsonl"));
}

#[test]
fn dump_config_round_trips_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.toml"), "lambda_adv = 0.25\nbeta_dpo = 0.3\nseed = 7\n").unwrap();
    let dumped = stdout(&ok(dir.path(), &["train", "--dump-config", "--config", "a.toml", "--beta", "0.5", "--disc-arch", "mlp"]));
    let cfg = ganpo::trainer::TrainConfig::from_toml_str(&dumped).unwrap();
    assert_eq!(cfg.lambda_adv, 0.25, "file beats default");
    assert_eq!(cfg.beta_dpo, 0.5, "flag beats file");
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.disc_arch, ganpo::latentadv::DiscArch::Mlp);
    assert_eq!(cfg.eta, ganpo::trainer::TrainConfig::default().eta);

    std::fs::write(dir.path().join("b.toml"), &dumped).unwrap();
    let again = stdout(&ok(dir.path(), &["train", "--dump-config", "--config", "b.toml"]));
    assert_eq!(dumped, again);

    std::fs::write(dir.path().join("bad.toml"), "lambda = 1.0\n").unwrap();
    assert_eq!(ganpo(dir.path(), &["train", "--dump-config", "--config", "bad.toml"]).status.code(), Some(2));
    assert_eq!(ganpo(dir.path(), &["train", "--dump-config", "--alpha", "1.5"]).status.code(), Some(2));
}

#[test]
fn verify_divergence_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(dir.path(), &["verify-divergence", "--support", "3", "--trials", "8", "--out", "checks.json"]);
    let text = stdout(&o);
    assert!(text.lines().count() >= 4 && text.lines().all(|l| l.starts_with("PASS")), "{text}");
    let checks: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("checks.json")).unwrap()).unwrap();
    assert!(checks.as_array().unwrap().iter().all(|c| c["passed"] == true));
}

#[test]
fn pipeline_writes_every_artifact_and_plots_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    ok(d, &["gen-data", "--n-records", "16", "--max-response-len", "6", "--config", "small.toml"]);
    let data = d.join("out/data/sorted-run.jsonl");
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 16);
    assert!(d.join("out/data/sorted-run.stats.json").exists());

    ok(d, &["train", "--config", "small.toml", "--data", "out/data/sorted-run.jsonl", "--objective", "ganpo-simpo"]);
    let metrics = ganpo::trainer::read_metrics(&d.join("out/train/metrics.jsonl")).unwrap();
    assert_eq!(metrics.len(), 8);
    let ck = "out/train/final.ckpt";
    assert_eq!(ganpo::trainer::TrainState::load(&d.join(ck)).unwrap().config.objective, ganpo::trainer::TrainObjective::GanpoSimpo);

    ok(d, &["eval-sweep", "--model-a", ck, "--n-prompts", "12", "--temperatures", "0,1", "--max-response-len", "6"]);
    let sweep = std::fs::read_to_string(d.join("out/eval/sweep.jsonl")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
    let summary = std::fs::read_to_string(d.join("out/eval/sweep_summary.json")).unwrap();
    assert!(summary.contains(ganpo::evalsuite::REPORT_NOTE));

    ok(d, &["eval-margins", "--run", "a=out/train/metrics.jsonl", "--run", "b=out/train/metrics.jsonl"]);
    assert_eq!(std::fs::read_to_string(d.join("out/eval/margins.jsonl")).unwrap().lines().count(), 16);
    assert_eq!(ganpo(d, &["eval-margins", "--run", "a=x", "--run", "a=y"]).status.code(), Some(1));

    ok(d, &["eval-corr", "--checkpoint", ck, "--n", "20", "--max-response-len", "6", "--disc", "neg"]);
    assert_eq!(std::fs::read_to_string(d.join("out/eval/corr.jsonl")).unwrap().lines().count(), 20);

    for (kind, input) in [
        ("margins", "out/eval/margins.jsonl"),
        ("sweep", "out/eval/sweep.jsonl"),
        ("corr", "out/eval/corr.jsonl"),
        ("buckets", "out/eval/sweep_buckets.jsonl"),
    ] {
        ok(d, &["plot", "--kind", kind, "--input", input, "--out", "p1.svg"]);
        ok(d, &["plot", "--kind", kind, "--input", input, "--out", "p2.svg"]);
        let (a, b) = (std::fs::read(d.join("p1.svg")).unwrap(), std::fs::read(d.join("p2.svg")).unwrap());
        assert_eq!(a, b, "{kind} plot is deterministic");
        assert!(String::from_utf8(a).unwrap().starts_with("<svg"));
    }

    let bad = ganpo(d, &["plot", "--kind", "corr", "--input", "out/eval/margins.jsonl"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("\"score\""));
}
