use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn csou(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csou"))
        .args(args)
        .env("CSOU_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = csou(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    csou(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `(method, delta, ap)` rows of a report CSV.
fn report_rows(path: &Path) -> Vec<(String, f64, f64)> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,delta,ap,tp,fp,fn,cso_map"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (
                f[0].to_string(),
                f[1].parse().unwrap(),
                f[2].parse().unwrap(),
            )
        })
        .collect()
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "gen",
        "--out",
        s(dir),
        "--count",
        "12",
        "--test-count",
        "6",
        "--seed",
        "4",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_is_deterministic_and_announces_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen(a.path(), &[]);
    let stdout = ok(&[
        "gen",
        "--out",
        s(b.path()),
        "--count",
        "12",
        "--test-count",
        "6",
        "--seed",
        "4",
    ]);
    for name in [
        "train.bin",
        "train_targets.csv",
        "train_manifest.txt",
        "test.bin",
        "test_targets.csv",
    ] {
        assert!(stdout.contains(name), "{name} not announced");
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap()
        );
    }
}

#[test]
fn invalid_arguments_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["gen", "--out", s(dir.path()), "--k-max", "0"]), 2);
    assert_eq!(code(&["gen", "--count", "nope"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    gen(dir.path(), &[]);
    let data = dir.path().join("test.bin");
    assert_eq!(code(&["solve", "--data", s(&data), "--method", "bogus"]), 2);
    assert_eq!(
        code(&["solve", "--data", s(&data), "--method", "dscsnet"]),
        2
    );
    assert_eq!(code(&["solve", "--method", "admm"]), 2);
    assert_eq!(code(&["eval", "--data", s(&data)]), 2);
    assert_eq!(code(&["train", "--data", s(&data), "--lr", "-1"]), 2);
    let missing = dir.path().join("missing.bin");
    assert_eq!(
        code(&["solve", "--data", s(&missing), "--out", s(dir.path())]),
        2
    );
    fs::write(&missing, b"garbage").unwrap();
    assert_eq!(
        code(&["solve", "--data", s(&missing), "--out", s(dir.path())]),
        1
    );
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn one_iteration_logs_one_line_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), &[]);
    let out = dir.path().join("out");
    let stdout = ok(&[
        "solve",
        "--data",
        s(&dir.path().join("test.bin")),
        "--method",
        "ista",
        "--iters",
        "1",
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("ista.recon.bin"));
    let log = fs::read_to_string(out.join("ista.iterations.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "sample,iter,rel_change,objective");
    assert_eq!(lines.len(), 1 + 6);
    assert!(lines[1..].iter().all(|l| l.split(',').nth(1) == Some("1")));
    assert_eq!(report_rows(&out.join("ista.report.csv")).len(), 5);
}

#[test]
fn noiseless_single_targets_are_recovered_by_admm() {
    let dir = tempfile::tempdir().unwrap();
    gen(
        dir.path(),
        &["--noise", "0", "--k-min", "1", "--k-max", "1"],
    );
    let out = dir.path().join("out");
    ok(&[
        "solve",
        "--data",
        s(&dir.path().join("test.bin")),
        "--method",
        "admm",
        "--lambda",
        "0.03",
        "--iters",
        "2000",
        "--out",
        s(&out),
    ]);
    let rows = report_rows(&out.join("admm.report.csv"));
    let ap25 = rows.iter().find(|r| r.1 == 0.25).unwrap().2;
    assert_eq!(ap25, 1.0);
}

#[test]
fn zero_learning_rate_gives_a_flat_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), &[]);
    let out = dir.path().join("out");
    let stdout = ok(&[
        "train",
        "--data",
        s(&dir.path().join("train.bin")),
        "--lr",
        "0",
        "--epochs",
        "3",
        "--batch-size",
        "4",
        "--checkpoint-every",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("checkpoint.txt"));
    assert!(out.join("epoch002.txt").exists());
    assert!(!out.join("epoch001.txt").exists());
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    let losses: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap())
        .collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.iter().all(|l| *l == losses[0]));

    let solved = dir.path().join("solved");
    ok(&[
        "solve",
        "--data",
        s(&dir.path().join("test.bin")),
        "--method",
        "dscsnet",
        "--checkpoint",
        s(&out.join("checkpoint.txt")),
        "--out",
        s(&solved),
    ]);
    assert!(solved.join("dscsnet.recon.bin").exists());
}

#[test]
fn exact_reconstructions_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), &["--snap"]);
    let data = dir.path().join("test.bin");
    let (_, records) = csou::dataset::read_all(&data).unwrap();
    let scene = csou::scene::SceneConfig::default();
    let grids: Vec<_> = records.iter().map(|r| r.truth(&scene).unwrap()).collect();
    let recons = dir.path().join("recons");
    fs::create_dir(&recons).unwrap();
    csou::recon::write_recons(&recons.join("perfect.recon.bin"), &grids).unwrap();
    let out = dir.path().join("out");
    let stdout = ok(&[
        "eval",
        "--data",
        s(&data),
        "--recon",
        s(&recons),
        "--extended",
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("perfect"));
    let rows = report_rows(&out.join("report.csv"));
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.0 == "perfect" && r.2 == 1.0));
    assert!(out.join("report.json").exists());
}

#[test]
fn bench_reports_every_method_in_order() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), &[]);
    let out = dir.path().join("out");
    let stdout = ok(&[
        "bench",
        "--train",
        s(&dir.path().join("train.bin")),
        "--test",
        s(&dir.path().join("test.bin")),
        "--epochs",
        "1",
        "--batch-size",
        "4",
        "--iters",
        "20",
        "--out",
        s(&out),
    ]);
    let rows = report_rows(&out.join("bench.csv"));
    let methods: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    let mut expected = vec!["ista"; 5];
    expected.extend(["admm"; 5]);
    expected.extend(["dscsnet"; 5]);
    assert_eq!(methods, expected);
    for m in ["ista", "admm", "dscsnet"] {
        assert!(out.join(format!("{m}.recon.bin")).exists());
        assert!(stdout.contains(m));
    }
    assert!(out.join("bench.json").exists());

    // a checkpoint skips training
    let again = dir.path().join("again");
    ok(&[
        "bench",
        "--test",
        s(&dir.path().join("test.bin")),
        "--checkpoint",
        s(&out.join("checkpoint.txt")),
        "--iters",
        "20",
        "--out",
        s(&again),
    ]);
    assert_eq!(
        fs::read(out.join("dscsnet.recon.bin")).unwrap(),
        fs::read(again.join("dscsnet.recon.bin")).unwrap()
    );
    assert!(!again.join("loss.csv").exists());
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.conf");
    fs::write(
        &cfg,
        format!(
            "out = {}\ncount = 7\ntest_count = 0\nseed = 4\n",
            s(&dir.path().join("a"))
        ),
    )
    .unwrap();
    ok(&["gen", "--config", s(&cfg)]);
    let (h, _) = csou::dataset::read_all(&dir.path().join("a/train.bin")).unwrap();
    assert_eq!(h.count, 7);
    assert!(!dir.path().join("a/test.bin").exists());

    ok(&["gen", "--config", s(&cfg), "--count", "3"]);
    let (h, _) = csou::dataset::read_all(&dir.path().join("a/train.bin")).unwrap();
    assert_eq!(h.count, 3);

    fs::write(&cfg, "count = 7\ncolour = blue\n").unwrap();
    let out = csou(&["gen", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    let missing = dir.path().join("none.conf");
    assert_eq!(code(&["gen", "--config", s(&missing)]), 2);
}

#[test]
fn thread_count_must_be_a_positive_integer() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_csou"))
        .args(["gen", "--count", "1", "--out", s(dir.path())])
        .env("CSOU_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("train.bin").exists());
}
