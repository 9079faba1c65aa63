mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use csou::dataset::{generate_dataset, read_all, DatasetConfig, DatasetRecord, Header};
use csou::eval::{
    cso_map, extended_deltas, report_csv, report_json, report_table, ApReport, DELTAS,
};
use csou::grid::HighResGrid;
use csou::net::{load_checkpoint, save_checkpoint, NetConfig, Network};
use csou::pipeline::{self, Method};
use csou::recon::{read_recons, write_recons};
use csou::scene::SceneConfig;
use csou::solvers::SolverConfig;
use csou::train::{train, write_loss_csv, TrainConfig};

use config::Layer;

/// Invalid invocation; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Maps validation failures of user-supplied settings to usage errors.
fn check(r: csou::Result<()>) -> Result<()> {
    r.map_err(|e| usage(e.to_string()))
}

#[derive(Parser)]
#[command(
    name = "csou",
    version,
    about = "Compressed-sensing unmixing of closely spaced point sources"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test dataset.
    Gen(GenArgs),
    /// Reconstruct a dataset with ISTA, ADMM or a trained network and score it.
    Solve(SolveArgs),
    /// Train a DSCS network.
    Train(TrainArgs),
    /// Score reconstruction files against a dataset.
    Eval(EvalArgs),
    /// Compare ISTA, ADMM and DSCSNet on one test set.
    Bench(BenchArgs),
}

#[derive(Args)]
struct Common {
    /// Settings file with one `key = value` per line.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Training samples (default 2000).
    #[arg(long)]
    count: Option<usize>,
    /// Test samples; 0 skips the test split (default 500).
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Place targets at sub-pixel cell centers.
    #[arg(long)]
    snap: bool,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    /// Measurement noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// Minimum target separation in observed pixels.
    #[arg(long)]
    min_separation: Option<f64>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file produced by `gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// ista, admm or dscsnet.
    #[arg(long)]
    method: Option<String>,
    /// Checkpoint manifest, required for dscsnet.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args, Clone)]
struct NetArgs {
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    history: Option<usize>,
    #[arg(long)]
    dir_pos: Option<usize>,
    #[arg(long)]
    dyn_weight: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training dataset file.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
    /// Save a checkpoint every N epochs; 0 keeps only the final one.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset holding the ground truth.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Reconstruction file or directory of `*.recon.bin` files; repeatable.
    #[arg(long)]
    recon: Vec<PathBuf>,
    /// Score tolerances 0.05 to 0.50 instead of 0.05 to 0.25.
    #[arg(long)]
    extended: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Training dataset, used when no checkpoint is given.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Test dataset.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Trained network; skips training.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("CSOU_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        usage(format!(
            "CSOU_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker threads")
}

fn announce(path: &Path) {
    println!("wrote {}", path.display());
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    announce(path);
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    value.ok_or_else(|| usage(format!("--{flag} is required")))
}

fn load_records(path: &Path) -> Result<(SceneConfig, Vec<DatasetRecord>)> {
    if !path.exists() {
        return Err(usage(format!("dataset {} does not exist", path.display())));
    }
    let (header, records): (Header, _) = read_all(path)?;
    Ok((header.scene_config(), records))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut l = Layer::load(a.common.config.as_deref())?;
    let base = DatasetConfig::default();
    let out = l.pick("out", a.common.out, PathBuf::from("data"))?;
    let count = l.pick("count", a.count, 2000)?;
    let test_count = l.pick("test-count", a.test_count, 500)?;
    let seed = l.pick("seed", a.seed, base.seed)?;
    let snap = l.switch("snap", a.snap)?;
    let k_min = l.pick("k-min", a.k_min, base.k_min)?;
    let k_max = l.pick("k-max", a.k_max, base.k_max)?;
    let noise = l.pick("noise", a.noise, base.scene.noise_sigma)?;
    let min_separation = l.pick("min-separation", a.min_separation, base.min_separation)?;
    l.finish()?;

    let mut cfg = DatasetConfig {
        count,
        seed,
        snap_to_grid: snap,
        k_min,
        k_max,
        min_separation,
        scene: SceneConfig {
            noise_sigma: noise,
            ..base.scene.clone()
        },
        ..base
    };
    check(cfg.validate())?;
    let mut splits = vec![("train", count)];
    if test_count > 0 {
        splits.push(("test", test_count));
    }
    for (split, n) in splits {
        cfg.split = split.into();
        cfg.count = n;
        let files = generate_dataset(&cfg, &out)?;
        println!(
            "{split}: {n} samples, K {}..{}, {}x{} patch, ratio {}, seed {}",
            cfg.k_min, cfg.k_max, cfg.scene.rows, cfg.scene.cols, cfg.scene.ratio, cfg.seed
        );
        announce(&files.data);
        announce(&files.targets_csv);
        announce(&files.manifest);
    }
    Ok(())
}

fn solver_config(
    l: &mut Layer,
    iters: Option<usize>,
    lambda: Option<f64>,
    rho: Option<f64>,
    tol: Option<f64>,
) -> Result<SolverConfig> {
    let d = SolverConfig::default();
    let cfg = SolverConfig {
        max_iters: l.pick("iters", iters, d.max_iters)?,
        lambda: l.pick("lambda", lambda, d.lambda)?,
        rho: l.pick("rho", rho, d.rho)?,
        tol: l.pick("tol", tol, d.tol)?,
        step: None,
    };
    check(cfg.validate())?;
    Ok(cfg)
}

fn write_report(out: &Path, stem: &str, reports: &[(String, ApReport)]) -> Result<()> {
    write_text(&out.join(format!("{stem}.csv")), &report_csv(reports))?;
    write_text(&out.join(format!("{stem}.json")), &report_json(reports))?;
    print!("{}", report_table(reports));
    Ok(())
}

fn write_recon_file(out: &Path, method: &str, grids: &[HighResGrid]) -> Result<()> {
    let path = out.join(format!("{method}.recon.bin"));
    write_recons(&path, grids)?;
    announce(&path);
    Ok(())
}

fn cmd_solve(a: SolveArgs) -> Result<()> {
    let mut l = Layer::load(a.common.config.as_deref())?;
    let out = l.pick("out", a.common.out, PathBuf::from("out"))?;
    let data = l.pick_opt("data", a.data)?;
    let method = l.pick("method", a.method, "admm".to_string())?;
    let checkpoint = l.pick_opt("checkpoint", a.checkpoint)?;
    let cfg = solver_config(&mut l, a.iters, a.lambda, a.rho, a.tol)?;
    l.finish()?;

    let classic = match method.as_str() {
        "dscsnet" => None,
        m => Some(m.parse::<Method>().map_err(|e| usage(e.to_string()))?),
    };
    let checkpoint = match classic {
        None => Some(required(checkpoint, "checkpoint")?),
        Some(_) => None,
    };
    let (scene, records) = load_records(&required(data, "data")?)?;
    create_dir(&out)?;

    let grids = match (classic, checkpoint) {
        (Some(m), _) => {
            let op = pipeline::system_operator(&scene)?;
            let reports = pipeline::solve_records(m, &op, &records, &cfg)?;
            let mut log = String::from("sample,iter,rel_change,objective\n");
            for (i, r) in reports.iter().enumerate() {
                for t in &r.trace {
                    log.push_str(&format!(
                        "{i},{},{},{}\n",
                        t.iter, t.rel_change, t.objective
                    ));
                }
            }
            write_text(&out.join(format!("{m}.iterations.csv")), &log)?;
            pipeline::reports_to_grids(&reports, &scene)?
        }
        (None, Some(ckpt)) => {
            let net = load_network(&ckpt, &scene)?;
            pipeline::predict_records(&net, &records)?
        }
        (None, None) => unreachable!("dscsnet requires a checkpoint"),
    };
    write_recon_file(&out, &method, &grids)?;
    let report = cso_map(&grids, &pipeline::truths(&records), &scene, &DELTAS)?;
    write_report(
        &out,
        &format!("{method}.report"),
        &[(method.clone(), report)],
    )
}

fn load_network(path: &Path, scene: &SceneConfig) -> Result<Network> {
    if !path.exists() {
        return Err(usage(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let net = load_checkpoint(path)?;
    let c = net.config();
    if (c.rows, c.cols, c.ratio) != (scene.rows, scene.cols, scene.ratio) {
        anyhow::bail!(
            "checkpoint expects {}x{} patches at ratio {}, dataset has {}x{} at ratio {}",
            c.rows,
            c.cols,
            c.ratio,
            scene.rows,
            scene.cols,
            scene.ratio
        );
    }
    Ok(net)
}

struct NetSettings {
    net: NetConfig,
    train: TrainConfig,
}

fn net_settings(l: &mut Layer, a: NetArgs, scene: &SceneConfig) -> Result<NetSettings> {
    let dn = NetConfig::for_scene(scene);
    let dt = TrainConfig::default();
    let net = NetConfig {
        stages: l.pick("stages", a.stages, dn.stages)?,
        history: l.pick("history", a.history, dn.history)?,
        dir_pos: l.pick("dir-pos", a.dir_pos, dn.dir_pos)?,
        dyn_weight: l.pick("dyn-weight", a.dyn_weight, dn.dyn_weight)?,
        ..dn
    };
    let train = TrainConfig {
        lr: l.pick("lr", a.lr, dt.lr)?,
        epochs: l.pick("epochs", a.epochs, dt.epochs)?,
        batch_size: l.pick("batch-size", a.batch_size, dt.batch_size)?,
        seed: l.pick("seed", a.seed, dt.seed)?,
        ..dt
    };
    check(net.validate())?;
    check(train.validate())?;
    Ok(NetSettings { net, train })
}

/// Trains a fresh network, saving `checkpoint.txt` and optional per-epoch snapshots.
fn train_network(
    records: &[DatasetRecord],
    scene: &SceneConfig,
    s: &NetSettings,
    out: &Path,
    every: usize,
) -> Result<Network> {
    let data = pipeline::examples(records, scene)?;
    let mut net = Network::new(s.net.clone(), s.train.seed)?;
    let start = Instant::now();
    let rows = train(&mut net, &data, &s.train, |row, net| {
        println!(
            "epoch {} step {} loss {:.6} ({:.1}s)",
            row.epoch,
            row.step,
            row.loss,
            start.elapsed().as_secs_f64()
        );
        if every > 0 && row.epoch % every == 0 {
            let files = save_checkpoint(net, &out.join(format!("epoch{:03}.txt", row.epoch)))?;
            announce(&files.manifest);
            announce(&files.blob);
        }
        Ok(())
    })?;
    let loss = out.join("loss.csv");
    write_loss_csv(&loss, &rows)?;
    announce(&loss);
    let files = save_checkpoint(&net, &out.join("checkpoint.txt"))?;
    announce(&files.manifest);
    announce(&files.blob);
    Ok(net)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut l = Layer::load(a.common.config.as_deref())?;
    let out = l.pick("out", a.common.out, PathBuf::from("out"))?;
    let data = l.pick_opt("data", a.data)?;
    let every = l.pick("checkpoint-every", a.checkpoint_every, 0)?;
    // Network shape depends on the dataset, so settings are resolved against it.
    let data = required(data, "data")?;
    let (scene, records) = load_records(&data)?;
    let s = net_settings(&mut l, a.net, &scene)?;
    l.finish()?;
    if records.is_empty() {
        return Err(usage("training dataset is empty"));
    }
    create_dir(&out)?;
    train_network(&records, &scene, &s, &out, every)?;
    Ok(())
}

fn recon_files(paths: &[PathBuf]) -> Result<Vec<(String, PathBuf)>> {
    let mut found = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.to_string_lossy().ends_with(".recon.bin"))
                .collect();
            inner.sort();
            if inner.is_empty() {
                return Err(usage(format!("no *.recon.bin files in {}", p.display())));
            }
            found.extend(inner);
        } else if p.exists() {
            found.push(p.clone());
        } else {
            return Err(usage(format!(
                "reconstruction {} does not exist",
                p.display()
            )));
        }
    }
    Ok(found
        .into_iter()
        .map(|f| {
            let name = f
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let method = name.strip_suffix(".recon.bin").unwrap_or(&name).to_string();
            (method, f)
        })
        .collect())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut l = Layer::load(a.common.config.as_deref())?;
    let out = l.pick("out", a.common.out, PathBuf::from("out"))?;
    let data = l.pick_opt("data", a.data)?;
    let extended = l.switch("extended", a.extended)?;
    let mut recon = a.recon;
    if let Some(p) = l.pick_opt::<PathBuf>("recon", None)? {
        if recon.is_empty() {
            recon.push(p);
        }
    }
    l.finish()?;
    if recon.is_empty() {
        return Err(usage("--recon is required"));
    }
    let (scene, records) = load_records(&required(data, "data")?)?;
    let truths = pipeline::truths(&records);
    let deltas = if extended {
        extended_deltas()
    } else {
        DELTAS.to_vec()
    };
    let mut reports = Vec::new();
    for (method, path) in recon_files(&recon)? {
        let grids = read_recons(&path)?;
        reports.push((method, cso_map(&grids, &truths, &scene, &deltas)?));
    }
    create_dir(&out)?;
    write_report(&out, "report", &reports)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut l = Layer::load(a.common.config.as_deref())?;
    let out = l.pick("out", a.common.out, PathBuf::from("out"))?;
    let train_path = l.pick_opt("train", a.train)?;
    let test_path = l.pick_opt("test", a.test)?;
    let checkpoint = l.pick_opt("checkpoint", a.checkpoint)?;
    let solver = solver_config(&mut l, a.iters, a.lambda, a.rho, None)?;
    let (scene, test) = load_records(&required(test_path, "test")?)?;
    let settings = net_settings(&mut l, a.net, &scene)?;
    l.finish()?;
    if checkpoint.is_none() && train_path.is_none() {
        return Err(usage("either --checkpoint or --train is required"));
    }
    create_dir(&out)?;

    let truths = pipeline::truths(&test);
    let op = pipeline::system_operator(&scene)?;
    let mut reports = Vec::new();
    for m in [Method::Ista, Method::Admm] {
        let start = Instant::now();
        let solved = pipeline::solve_records(m, &op, &test, &solver)?;
        let grids = pipeline::reports_to_grids(&solved, &scene)?;
        println!(
            "{m}: {} samples in {:.1}s",
            test.len(),
            start.elapsed().as_secs_f64()
        );
        write_recon_file(&out, m.name(), &grids)?;
        reports.push((
            m.name().to_string(),
            cso_map(&grids, &truths, &scene, &DELTAS)?,
        ));
    }
    let net = match (checkpoint, train_path) {
        (Some(ckpt), _) => load_network(&ckpt, &scene)?,
        (None, Some(path)) => {
            let (train_scene, records) = load_records(&path)?;
            if train_scene != scene {
                return Err(usage(
                    "train and test datasets use different scene settings",
                ));
            }
            train_network(&records, &scene, &settings, &out, 0)?
        }
        (None, None) => unreachable!("checked above"),
    };
    let grids = pipeline::predict_records(&net, &test)?;
    write_recon_file(&out, "dscsnet", &grids)?;
    reports.push(("dscsnet".into(), cso_map(&grids, &truths, &scene, &DELTAS)?));
    write_report(&out, "bench", &reports)
}
