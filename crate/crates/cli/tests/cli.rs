use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY: [&str; 6] = [
    "--set",
    "data.samples=8",
    "--set",
    "train.epochs_stage1=1",
    "--set",
    "train.epochs_stage2=1",
];

fn disac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disac"))
        .args(args)
        .env_remove("DISAC_SEED")
        .output()
        .expect("spawn disac")
}

fn tiny(args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend_from_slice(&TINY);
    disac(&all)
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset plus four multimodal device checkpoints and one centre checkpoint, built once.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    ckpts: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let ckpts = dir.path().join("ckpts");
        ok(&tiny(&["gen", "--out", s(&data)]));
        let mut locals = Vec::new();
        for k in 0..4 {
            let out = ckpts.join(format!("local_mm_{k}.ckpt"));
            let d = data.join(format!("device_{k}"));
            ok(&tiny(&["train-local", "--data", s(&d), "--device", &k.to_string(), "--out", s(&out)]));
            locals.push(out.to_str().unwrap().to_string());
        }
        let agg = ckpts.join("agg_mm_1.ckpt");
        let list = locals.join(",");
        ok(&tiny(&["train-agg", "--data", s(&data.join("agg")), "--ckpts", &list, "--center", "1", "--out", s(&agg)]));
        Fixture { _dir: dir, data, ckpts }
    })
}

#[test]
fn help_documents_every_flag() {
    let top = String::from_utf8(disac(&["--help"]).stdout).unwrap();
    for f in ["gen", "train-local", "train-agg", "eval", "--config", "--set", "--seed"] {
        assert!(top.contains(f), "top-level help lacks {f}");
    }
    let cases: [(&str, &[&str]); 4] = [
        ("gen", &["--out", "--samples", "--config", "--seed"]),
        ("train-local", &["--data", "--device", "--out", "--lora-only", "--modality"]),
        ("train-agg", &["--data", "--ckpts", "--out", "--center"]),
        ("eval", &["--data", "--ckpts", "--modes", "--snrs", "--report", "--plots", "--centers", "--threads"]),
    ];
    for (cmd, flags) in cases {
        let o = disac(&[cmd, "--help"]);
        ok(&o);
        let h = String::from_utf8(o.stdout).unwrap();
        for f in flags {
            assert!(h.contains(f), "{cmd} help lacks {f}");
        }
    }
}

#[test]
fn unknown_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = disac(&["gen", "--out", s(dir.path()), "--fast"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--fast"));
}

#[test]
fn bad_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = disac(&["gen", "--out", s(dir.path()), "--set", "scene.num_targets=oops"]);
    assert_eq!(code(&o), 2);
    let o = disac(&["gen", "--out", s(dir.path()), "--set", "model.tram.d_sd=48"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));
}

#[test]
fn gen_writes_devices_and_agg_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&tiny(&["gen", "--out", s(&a), "--seed", "3"]));
    ok(&tiny(&["gen", "--out", s(&b), "--seed", "3"]));
    for k in 0..4 {
        assert!(a.join(format!("device_{k}/manifest.json")).is_file());
    }
    assert!(a.join("agg/manifest.json").is_file());
    let ma = std::fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("manifest.json")).unwrap());
    let c = dir.path().join("c");
    ok(&tiny(&["gen", "--out", s(&c), "--seed", "4"]));
    assert_ne!(ma, std::fs::read(c.join("manifest.json")).unwrap());
}

#[test]
fn samples_flag_sets_records_per_stream() {
    let dir = tempfile::tempdir().unwrap();
    ok(&disac(&["gen", "--out", s(dir.path()), "--samples", "5"]));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["spec"]["samples"], 5);
    let recs = m["records_per_device"].as_array().unwrap();
    assert_eq!(recs.len(), 4);
    // 3 targets per frame, minus any rejected by label normalisation
    assert!(recs.iter().all(|r| r.as_u64().unwrap() <= 15 && r.as_u64().unwrap() >= 12));
}

#[test]
fn env_seed_is_overridden_by_flag() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_disac"));
        cmd.args(["gen", "--out", s(&out), "--samples", "2"]);
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        match env {
            Some(e) => cmd.env("DISAC_SEED", e),
            None => cmd.env_remove("DISAC_SEED"),
        };
        ok(&cmd.output().unwrap());
        std::fs::read(out.join("manifest.json")).unwrap()
    };
    let env7 = run("e", Some("7"), None);
    let flag7 = run("f", None, Some("7"));
    let both = run("b", Some("1"), Some("7"));
    assert_eq!(env7, flag7);
    assert_eq!(flag7, both);
    assert_ne!(env7, run("d", None, None));
}

#[test]
fn train_local_missing_data_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = disac(&[
        "train-local",
        "--data",
        s(&dir.path().join("nope")),
        "--device",
        "0",
        "--out",
        s(&dir.path().join("x.ckpt")),
    ]);
    assert_eq!(code(&o), 4);
}

#[test]
fn train_local_writes_checkpoint_and_log() {
    let f = fixture();
    let ck = f.ckpts.join("local_mm_0.ckpt");
    assert!(ck.is_file());
    let log = std::fs::read_to_string(ck.with_extension("log.csv")).unwrap();
    assert!(log.starts_with("epoch,split,loss_d,loss_a,loss_p,loss_v,loss_class,total"));
    assert_eq!(log.lines().count(), 1 + 3);
}

#[test]
fn train_local_is_idempotent() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("again.ckpt");
    let d = f.data.join("device_0");
    ok(&tiny(&["train-local", "--data", s(&d), "--device", "0", "--out", s(&out)]));
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(f.ckpts.join("local_mm_0.ckpt")).unwrap());
}

#[test]
fn divergence_exits_3() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let d = f.data.join("device_2");
    let o = tiny(&[
        "train-local",
        "--data",
        s(&d),
        "--device",
        "2",
        "--modality",
        "rf",
        "--out",
        s(&dir.path().join("x.ckpt")),
        "--set",
        "train.lr=1e300",
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_full_two_snrs_gives_two_rows_per_position() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.csv");
    let plots = dir.path().join("plots");
    ok(&tiny(&[
        "eval",
        "--data",
        s(&f.data),
        "--ckpts",
        s(&f.ckpts),
        "--modes",
        "full",
        "--snrs",
        "0,25",
        "--report",
        s(&report),
        "--plots",
        s(&plots),
    ]));
    let text = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "mode,center_position,snr_db,nmse_d,nmse_a,nmse_p,nmse_v,rmse_d,rmse_a,rmse_p,rmse_v,accuracy,compression_ratio,t_exe_s"
    );
    assert_eq!(lines.len() - 1, 2);
    assert!(lines[1].starts_with("full,1,0.0"));
    let svgs = std::fs::read_dir(&plots).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg")).count();
    assert_eq!(svgs, 11);
}

#[test]
fn eval_invalid_mode_lists_valid_modes() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = disac(&["eval", "--data", s(&f.data), "--ckpts", s(&f.ckpts), "--modes", "best", "--report", s(&dir.path().join("r.csv"))]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    for m in ["sm-sd-rf", "sm-sd-cv", "mm-sd", "sm-md-rf", "sm-md-cv", "full", "no-sc-loss"] {
        assert!(err.contains(m), "missing {m} in: {err}");
    }
}

#[test]
fn eval_missing_checkpoint_exits_4() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let report = s(&dir.path().join("r.csv")).to_string();
    let o = disac(&["eval", "--data", s(&f.data), "--ckpts", s(&f.ckpts), "--modes", "sm-sd-rf", "--report", &report]);
    assert_eq!(code(&o), 4);
    let o = disac(&["eval", "--data", s(&f.data), "--ckpts", s(&dir.path().join("gone.ckpt")), "--report", &report]);
    assert_eq!(code(&o), 4);
    let o = disac(&["eval", "--data", s(&f.data), "--ckpts", s(&f.ckpts), "--modes", "sm-md-cv", "--report", &report]);
    assert_eq!(code(&o), 4);
}

#[test]
fn train_agg_rejects_incomplete_family() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let one = f.ckpts.join("local_mm_0.ckpt");
    let o = tiny(&["train-agg", "--data", s(&f.data), "--ckpts", s(&one), "--out", s(&dir.path().join("a.ckpt"))]);
    assert_eq!(code(&o), 4);
}
