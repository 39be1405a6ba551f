use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "
[corpus]
baseline_utts = 60
adapt_utts = 12
eval_utts = 6
[model]
num_layers = 2
hidden = 6
[baseline]
epochs = 1
[adapt]
epochs = 1
[astg]
n_layers = 2
[mtl]
lambda_grid = 0.1, 0.5
[experiment]
seeds = 4
methods = baseline, fine-tune:all, accent-specific, astg, mtlg
";

fn amag(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("small.ini");
    if !cfg.exists() {
        fs::write(&cfg, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_amag"))
        .args(args)
        .args(["--config", cfg.to_str().unwrap()])
        .env("AMAG_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_and_train_baseline_are_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&amag(tmp.path(), &["gen-data", "--out", dir.to_str().unwrap()]));
        ok(&amag(tmp.path(), &["train-baseline", "--seed", "3", "--out", dir.to_str().unwrap()]));
    }
    let (ca, cb) = (files(&a.join("corpus")), files(&b.join("corpus")));
    assert_eq!(ca.len(), 5, "four splits and a manifest");
    assert_eq!(ca, cb);
    assert_eq!(fs::read(a.join("baseline.ckpt")).unwrap(), fs::read(b.join("baseline.ckpt")).unwrap());

    let c = tmp.path().join("c");
    ok(&amag(tmp.path(), &["gen-data", "--seed", "99", "--out", c.to_str().unwrap()]));
    assert_ne!(files(&c.join("corpus")), ca);
}

#[test]
fn adapt_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let out_s = out.to_str().unwrap();
    ok(&amag(tmp.path(), &["gen-data", "--out", out_s]));
    ok(&amag(tmp.path(), &["train-baseline", "--out", out_s]));

    for method in ["fine-tune:1", "lhn:1", "gate:III:2", "astg", "mtlg"] {
        let text = ok(&amag(tmp.path(), &["adapt", "--method", method, "--out", out_s]));
        let ckpt = out.join(format!("{}.ckpt", method.replace(':', "-")));
        assert!(ckpt.exists(), "{method}: {text}");
    }
    ok(&amag(tmp.path(), &["adapt", "--method", "fine-tune:all", "--accent", "2", "--out", out_s]));
    assert!(out.join("fine-tune-all-accent-2.ckpt").exists());

    let ckpt = out.join("mtlg.ckpt");
    let text = ok(&amag(tmp.path(), &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--split", "unseen", "--out", out_s]));
    let names: Vec<&str> = text.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(names, ["GZ", "SC", "ZJ", "AVE"]);
    let text = ok(&amag(tmp.path(), &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--split", "eval", "--out", out_s]));
    assert!(text.contains("accent accuracy"));

    // Gates on hard labels cannot score accents they have no column for.
    let astg = out.join("astg.ckpt");
    let bad = amag(tmp.path(), &["eval", "--checkpoint", astg.to_str().unwrap(), "--split", "unseen", "--out", out_s]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn report_writes_tables_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rep");
    let first = ok(&amag(tmp.path(), &["report", "--out", out.to_str().unwrap()]));
    for f in ["results.csv", "seen.md", "unseen.md", "seed-4/baseline.ckpt", "seed-4/astg.ckpt", "seed-4/accent-specific-0.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(first.starts_with("| Method | AH | BJ | SX | YN | AVE |"));
    let csv = fs::read(out.join("results.csv")).unwrap();
    let second = amag(tmp.path(), &["report", "--out", out.to_str().unwrap()]);
    assert_eq!(ok(&second), first);
    assert!(String::from_utf8_lossy(&second.stderr).contains("baseline loaded"));
    assert_eq!(fs::read(out.join("results.csv")).unwrap(), csv);
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let out_s = out.to_str().unwrap();

    let bad = tmp.path().join("bad.ini");
    fs::write(&bad, "[model]\nhiden = 4\n").unwrap();
    let run = Command::new(env!("CARGO_BIN_EXE_amag")).args(["gen-data", "--config", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(code(&run), 2);
    assert!(String::from_utf8_lossy(&run.stderr).contains("[model] hiden"));

    assert_eq!(code(&amag(tmp.path(), &["train-baseline", "--out", out_s])), 2, "missing corpus");
    ok(&amag(tmp.path(), &["gen-data", "--out", out_s]));
    ok(&amag(tmp.path(), &["train-baseline", "--out", out_s]));
    assert_eq!(code(&amag(tmp.path(), &["adapt", "--method", "gate:VI:1", "--out", out_s])), 2);
    assert_eq!(code(&amag(tmp.path(), &["adapt", "--method", "fine-tune:all", "--accent", "5", "--out", out_s])), 2);
    assert_eq!(code(&amag(tmp.path(), &["adapt", "--method", "astg", "--accent", "1", "--out", out_s])), 2);
    assert_eq!(code(&amag(tmp.path(), &["adapt", "--out", out_s])), 2, "clap usage error");
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("hot.ini");
    fs::write(&cfg, SMALL.replace("[baseline]\nepochs = 1\n", "[baseline]\nepochs = 1\nlr = 1e307\nclip_norm = none\n")).unwrap();
    let out = tmp.path().join("o");
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_amag"))
            .args(args)
            .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .output()
            .unwrap()
    };
    ok(&run(&["gen-data"]));
    let r = run(&["train-baseline"]);
    assert_eq!(code(&r), 3, "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&amag(tmp.path(), &["gradcheck"]));
    assert!(text.lines().filter(|l| l.starts_with("ok")).count() >= 20);
    assert!(!text.contains("FAIL"));
}
