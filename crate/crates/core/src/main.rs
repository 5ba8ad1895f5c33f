use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use grace_core::causal::MechanismKind;
use grace_core::diffcore::{op_suite, Tensor};
use grace_core::encoder::GnnKind;
use grace_core::evalsuite::{
    evaluate, export_dag, export_samples, pearson, write_metrics_csv, write_oracle_json, DagFormat, EvalOptions,
    EvalReport, SampleBlock, DEFAULT_N_DEG, DEFAULT_TAU,
};
use grace_core::hetnet::EdgeMask;
use grace_core::model::composite_gradcheck;
use grace_core::scmsynth::{generate_benchmark, read_bundle, write_bundle, BenchmarkSpec, Bundle, MixingKind};
use grace_core::trainer::{
    final_temperature, load_checkpoint, save_checkpoint, standard_splits, train_until, write_train_log, TrainConfig,
    TrainState, KEYS,
};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] grace_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => e.exit_code() as u8,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Causal disentanglement of soft interventions with a graph-aware encoder.
#[derive(Parser)]
#[command(name = "grace", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark bundle.
    Synth(SynthArgs),
    /// Train on a bundle and write a run directory.
    Train(TrainArgs),
    /// Score a trained run on the held-out split.
    Eval(EvalArgs),
    /// Train and score an ablation grid.
    Ablate(AblateArgs),
    /// Render the learned latent DAG.
    ExportDag(ExportArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Config file; only its `seed` is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long = "n_obs", alias = "n-obs")]
    n_obs: Option<usize>,
    #[arg(long = "n_per_intervention", alias = "n-per-intervention")]
    n_per_intervention: Option<usize>,
    #[arg(long = "edge_prob", alias = "edge-prob")]
    edge_prob: Option<f64>,
    #[arg(long = "shift_scale", alias = "shift-scale")]
    shift_scale: Option<f64>,
    #[arg(long)]
    mixing: Option<String>,
    #[arg(long)]
    informativeness: Option<f64>,
    /// Number of two-target regimes.
    #[arg(long)]
    doubles: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Config file plus overrides. Precedence: file, `GRACE_SEED`, `--set`, flags.
#[derive(Args, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long = "latent_dim", alias = "latent-dim")]
    latent_dim: Option<String>,
    #[arg(long)]
    gnn: Option<String>,
    #[arg(long = "gnn_layers", alias = "gnn-layers")]
    gnn_layers: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    embed: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long = "batch_size", alias = "batch-size")]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long = "alpha_max", alias = "alpha-max")]
    alpha_max: Option<String>,
    #[arg(long = "beta_max", alias = "beta-max")]
    beta_max: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long = "temp_max", alias = "temp-max")]
    temp_max: Option<String>,
    #[arg(long = "mmd_sigma", alias = "mmd-sigma")]
    mmd_sigma: Option<String>,
    #[arg(long = "kernel_num", alias = "kernel-num")]
    kernel_num: Option<String>,
    #[arg(long)]
    mechanism: Option<String>,
    #[arg(long = "edge_mask", alias = "edge-mask")]
    edge_mask: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    split: Option<String>,
}

impl ConfigArgs {
    fn flags(&self) -> [(&'static str, &Option<String>); 18] {
        [
            ("latent_dim", &self.latent_dim),
            ("gnn", &self.gnn),
            ("gnn_layers", &self.gnn_layers),
            ("hidden", &self.hidden),
            ("embed", &self.embed),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("alpha_max", &self.alpha_max),
            ("beta_max", &self.beta_max),
            ("lambda", &self.lambda),
            ("temp_max", &self.temp_max),
            ("mmd_sigma", &self.mmd_sigma),
            ("kernel_num", &self.kernel_num),
            ("mechanism", &self.mechanism),
            ("edge_mask", &self.edge_mask),
            ("seed", &self.seed),
            ("split", &self.split),
        ]
    }

    fn any_override(&self) -> bool {
        self.config.is_some() || !self.set.is_empty() || self.flags().iter().any(|(_, v)| v.is_some())
    }

    fn resolve(&self) -> CliResult<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::read(p)?,
            None => TrainConfig::default(),
        };
        cfg.apply_env()?;
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{kv}'")))?;
            if !KEYS.contains(&k.trim()) {
                return Err(CliError::Usage(format!("--set: unknown config key '{}'", k.trim())));
            }
            cfg.set(k.trim(), v)?;
        }
        for (k, v) in self.flags() {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue the run in this directory; its config is reused.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many epochs are complete.
    #[arg(long = "stop_after", alias = "stop-after")]
    stop_after: Option<usize>,
    /// Print one line per epoch to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    /// Write reports here instead of into the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "n_deg", alias = "n-deg", default_value_t = DEFAULT_N_DEG)]
    n_deg: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Also write real and generated test samples to samples.csv.
    #[arg(long)]
    samples: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Axis {
    /// edge_mask in GG, GG+PG, GG+PG+PP.
    Context,
    /// {sage, gcn, gat} x {1, 3} layers.
    Gnn,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    axis: Axis,
    #[command(flatten)]
    config: ConfigArgs,
    /// Run cells on separate threads.
    #[arg(long)]
    parallel: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Dot,
    Json,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value = "dot")]
    format: FormatArg,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Label each latent with its most correlated feature from this bundle.
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

/// A sibling temporary directory renamed into place on success.
struct Staging {
    tmp: PathBuf,
    out: PathBuf,
    done: bool,
}

impl Staging {
    fn new(out: &Path) -> CliResult<Self> {
        if out.exists() {
            return Err(CliError::Usage(format!("output {} already exists", out.display())));
        }
        let name = out
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("bad output path {}", out.display())))?;
        let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent).map_err(|e| grace_core::Error::io(parent, e))?;
        let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| grace_core::Error::io(&tmp, e))?;
        }
        std::fs::create_dir(&tmp).map_err(|e| grace_core::Error::io(&tmp, e))?;
        Ok(Self {
            tmp,
            out: out.to_path_buf(),
            done: false,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    fn commit(mut self) -> CliResult<()> {
        std::fs::rename(&self.tmp, &self.out).map_err(|e| grace_core::Error::io(&self.out, e))?;
        self.done = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.done {
            let _ = std::fs::remove_dir_all(&self.tmp);
        }
    }
}

fn synth(a: &SynthArgs) -> CliResult<()> {
    let mut spec = BenchmarkSpec::default();
    if let Some(c) = &a.config {
        let mut cfg = TrainConfig::read(c)?;
        cfg.apply_env()?;
        spec.seed = cfg.seed;
    }
    if let Some(m) = &a.mixing {
        spec.mixing = m.parse::<MixingKind>().map_err(CliError::Usage)?;
    }
    macro_rules! take {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { spec.$f = v; } )* };
    }
    take!(p, d, n_obs, n_per_intervention, edge_prob, shift_scale, informativeness, doubles, seed);
    let b = generate_benchmark(&spec)?;
    let stage = Staging::new(&a.out)?;
    write_bundle(&b, &stage.tmp)?;
    stage.commit()?;
    println!(
        "wrote {}: p={} d={} regimes={} edges={}",
        a.out.display(),
        spec.p,
        spec.d,
        b.data.interventional.len(),
        b.truth.graph.edges().len()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let (cfg, resume) = match &a.resume {
        Some(run) => {
            if a.config.any_override() {
                return Err(CliError::Usage("--resume reuses the run's config; drop config flags".into()));
            }
            let cfg = TrainConfig::read(&run.join("config.cfg"))?;
            let ck = load_checkpoint(&run.join("checkpoint.bin"), Some(&cfg.hash()))?;
            (cfg, Some(ck))
        }
        None => (a.config.resolve()?, None),
    };
    let bundle = read_bundle(&a.bundle)?;
    let splits = standard_splits(&cfg, &bundle.data)?;
    let mut state = match resume {
        Some(ck) => TrainState::from_checkpoint(ck, &cfg, &splits.train, &bundle.context)?,
        None => TrainState::new(&cfg, &splits.train, &bundle.context)?,
    };
    let stage = Staging::new(&a.out)?;
    let until = a.stop_after.unwrap_or(cfg.epochs);
    train_until(&mut state, &splits.train, &cfg, until, |row| {
        if a.verbose {
            eprintln!("{}", row.csv_row());
        }
    })?;
    cfg.write(&stage.path("config.cfg"))?;
    save_checkpoint(&state.to_checkpoint(&cfg), &stage.path("checkpoint.bin"))?;
    write_train_log(&stage.path("train_log.csv"), &state.log)?;
    stage.commit()?;
    let last = state.log.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs of {} into {} (final loss {last:.4})",
        state.epoch,
        cfg.epochs,
        a.out.display()
    );
    Ok(())
}

fn load_run(run: &Path, bundle: &Bundle) -> CliResult<(TrainConfig, TrainState)> {
    let cfg = TrainConfig::read(&run.join("config.cfg"))?;
    let ck = load_checkpoint(&run.join("checkpoint.bin"), Some(&cfg.hash()))?;
    let splits = standard_splits(&cfg, &bundle.data)?;
    let state = TrainState::from_checkpoint(ck, &cfg, &splits.train, &bundle.context)?;
    Ok((cfg, state))
}

fn run_eval(cfg: &TrainConfig, state: &TrainState, bundle: &Bundle, opts: &EvalOptions) -> CliResult<EvalReport> {
    let splits = standard_splits(cfg, &bundle.data)?;
    Ok(evaluate(
        &state.model,
        &splits.test,
        bundle.truth.as_ref(),
        final_temperature(cfg),
        &cfg.mmd()?,
        opts,
    )?)
}

/// Writes `name` next to its final location and renames it in.
fn write_atomic(dir: &Path, name: &str, f: impl FnOnce(&Path) -> grace_core::Result<()>) -> CliResult<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    f(&tmp)?;
    let dst = dir.join(name);
    std::fs::rename(&tmp, &dst).map_err(|e| grace_core::Error::io(dst, e))?;
    Ok(())
}

fn sample_blocks(cfg: &TrainConfig, bundle: &Bundle, report: &EvalReport) -> CliResult<Vec<SampleBlock>> {
    let test = standard_splits(cfg, &bundle.data)?.test;
    let mut blocks = vec![SampleBlock {
        source: "ctrl".into(),
        intervention: "ctrl".into(),
        values: test.obs.x.clone(),
    }];
    for (r, gen) in test.interventional.iter().zip(&report.generated) {
        blocks.push(SampleBlock {
            source: "actual".into(),
            intervention: r.label.clone(),
            values: r.x.clone(),
        });
        blocks.push(SampleBlock {
            source: "generated".into(),
            intervention: r.label.clone(),
            values: gen.clone(),
        });
    }
    Ok(blocks)
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let opts = EvalOptions {
        n_deg: a.n_deg,
        tau: a.tau,
        ..EvalOptions::default()
    };
    let bundle = read_bundle(&a.bundle)?;
    let (cfg, state) = load_run(&a.run, &bundle)?;
    let report = run_eval(&cfg, &state, &bundle, &opts)?;
    let blocks = if a.samples { Some(sample_blocks(&cfg, &bundle, &report)?) } else { None };
    let write = |dir: &Path| -> CliResult<()> {
        write_atomic(dir, "metrics.csv", |p| write_metrics_csv(&report.rows, p))?;
        if let Some(o) = &report.oracle {
            write_atomic(dir, "oracle.json", |p| write_oracle_json(o, p))?;
        }
        if let Some(b) = &blocks {
            write_atomic(dir, "samples.csv", |p| export_samples(b, &bundle.data.features, p))?;
        }
        Ok(())
    };
    let dest = match &a.out {
        Some(out) => {
            let stage = Staging::new(out)?;
            write(&stage.tmp)?;
            stage.commit()?;
            out.clone()
        }
        None => {
            write(&a.run)?;
            a.run.clone()
        }
    };
    for r in &report.rows {
        let r2 = r.r2.map_or("NA".to_string(), |v| format!("{v:.4}"));
        println!("{}: r2 {r2} rmse {:.4} mmd {:.3e}", r.intervention, r.rmse, r.mmd);
    }
    if let Some(o) = &report.oracle {
        println!(
            "latent |corr| {:.4}, target accuracy {:.3}, shd {} at tau {} (best {} at {})",
            o.mean_abs_corr, o.target_accuracy, o.shd, opts.tau, o.best_shd, o.best_tau
        );
    }
    if let Some(why) = &report.oracle_skipped {
        println!("oracle scoring skipped: {why}");
    }
    println!("reports in {}", dest.display());
    Ok(())
}

struct Cell {
    name: String,
    cfg: TrainConfig,
}

fn ablation_cells(base: &TrainConfig, axis: Axis) -> Vec<Cell> {
    match axis {
        Axis::Context => ["GG", "GG+PG", "GG+PG+PP"]
            .into_iter()
            .map(|m| Cell {
                name: m.to_string(),
                cfg: TrainConfig {
                    edge_mask: m.parse::<EdgeMask>().expect("fixed mask names parse"),
                    ..base.clone()
                },
            })
            .collect(),
        Axis::Gnn => [GnnKind::Sage, GnnKind::Gcn, GnnKind::Gat]
            .into_iter()
            .flat_map(|k| [1, 3].map(|l| (k, l)))
            .map(|(k, l)| Cell {
                name: format!("{k}-{l}"),
                cfg: TrainConfig {
                    gnn: k,
                    gnn_layers: l,
                    ..base.clone()
                },
            })
            .collect(),
    }
}

const ABLATION_HEADER: &str =
    "cell,gnn,gnn_layers,edge_mask,config_hash,mean_r2,mean_rmse,mean_mmd,mean_abs_corr,target_accuracy,shd";

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn run_cell(cell: &Cell, bundle: &Bundle, dir: &Path) -> CliResult<String> {
    let cfg = &cell.cfg;
    let splits = standard_splits(cfg, &bundle.data)?;
    let mut state = TrainState::new(cfg, &splits.train, &bundle.context)?;
    train_until(&mut state, &splits.train, cfg, cfg.epochs, |_| {})?;
    let report = run_eval(cfg, &state, bundle, &EvalOptions::default())?;
    std::fs::create_dir(dir).map_err(|e| grace_core::Error::io(dir, e))?;
    cfg.write(&dir.join("config.cfg"))?;
    write_train_log(&dir.join("train_log.csv"), &state.log)?;
    write_metrics_csv(&report.rows, &dir.join("metrics.csv"))?;
    let (corr, acc, shd) = match &report.oracle {
        Some(o) => {
            write_oracle_json(o, &dir.join("oracle.json"))?;
            (format!("{:?}", o.mean_abs_corr), format!("{:?}", o.target_accuracy), o.shd.to_string())
        }
        None => ("NA".into(), "NA".into(), "NA".into()),
    };
    Ok(format!(
        "{},{},{},{},{},{:?},{:?},{:?},{corr},{acc},{shd}",
        cell.name,
        cfg.gnn,
        cfg.gnn_layers,
        cfg.edge_mask,
        cfg.hash(),
        mean(report.rows.iter().filter_map(|r| r.r2)),
        mean(report.rows.iter().map(|r| r.rmse)),
        mean(report.rows.iter().map(|r| r.mmd)),
    ))
}

fn ablate(a: &AblateArgs) -> CliResult<()> {
    let base = a.config.resolve()?;
    let bundle = read_bundle(&a.bundle)?;
    let cells = ablation_cells(&base, a.axis);
    let stage = Staging::new(&a.out)?;
    let dir = |c: &Cell| stage.tmp.join(c.name.replace('+', "_"));
    let rows: Vec<CliResult<String>> = if a.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cells
                .iter()
                .map(|c| {
                    let (bundle, d) = (&bundle, dir(c));
                    s.spawn(move || run_cell(c, bundle, &d))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation cell panicked"))
                .collect()
        })
    } else {
        cells.iter().map(|c| run_cell(c, &bundle, &dir(c))).collect()
    };
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let r = r?;
        println!("{r}");
        let _ = writeln!(text, "{r}");
    }
    let path = stage.path("ablation.csv");
    std::fs::write(&path, text).map_err(|e| grace_core::Error::io(&path, e))?;
    stage.commit()?;
    println!("wrote {}", a.out.join("ablation.csv").display());
    Ok(())
}

/// `z<i>`, or `z<i>:<feature>` naming the feature most correlated with the latent.
fn latent_labels(state: &TrainState, bundle: Option<&Bundle>) -> CliResult<Vec<String>> {
    let p = state.model.cfg.p;
    let Some(b) = bundle else {
        return Ok((0..p).map(|i| format!("z{i}")).collect());
    };
    let x = &b.data.obs.x;
    let u = state.model.latents(x)?;
    let col = |t: &Tensor, c: usize| (0..t.rows()).map(|r| t.get(r, c)).collect::<Vec<_>>();
    Ok((0..p)
        .map(|i| {
            let ui = col(&u, i);
            let best = (0..x.cols())
                .map(|f| (f, pearson(&ui, &col(x, f)).map_or(0.0, f64::abs)))
                .fold((0, -1.0), |acc, (f, c)| if c > acc.1 { (f, c) } else { acc });
            format!("z{i}:{}", b.data.features[best.0])
        })
        .collect())
}

fn export(a: &ExportArgs) -> CliResult<()> {
    let cfg = TrainConfig::read(&a.run.join("config.cfg"))?;
    let ck = load_checkpoint(&a.run.join("checkpoint.bin"), Some(&cfg.hash()))?;
    let bundle = a.bundle.as_deref().map(read_bundle).transpose()?;
    let params: std::collections::HashMap<&str, &Tensor> = ck.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let state = match &bundle {
        Some(b) => {
            let splits = standard_splits(&cfg, &b.data)?;
            Some(TrainState::from_checkpoint(ck.clone(), &cfg, &splits.train, &b.context)?)
        }
        None => None,
    };
    let m = match &state {
        Some(s) => s.model.dag_matrix(),
        None => dag_from_entries(params.get("scm.entries").copied(), &ck)?,
    };
    let labels = match &state {
        Some(s) => latent_labels(s, bundle.as_ref())?,
        None => (0..m.rows()).map(|i| format!("z{i}")).collect(),
    };
    let format = match a.format {
        FormatArg::Dot => DagFormat::Dot,
        FormatArg::Json => DagFormat::Json,
    };
    let text = export_dag(&m, a.tau, &labels, format)?;
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| grace_core::Error::io(p, e))?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Rebuilds the dense adjacency from the stored strictly upper-triangular entries.
fn dag_from_entries(entries: Option<&Tensor>, ck: &grace_core::trainer::Checkpoint) -> CliResult<Tensor> {
    let p = ck
        .params
        .iter()
        .find(|(n, _)| n == "intervention.logits")
        .map(|(_, t)| t.cols())
        .ok_or_else(|| grace_core::Error::Data("checkpoint lacks intervention logits".into()))?;
    let mut m = Tensor::zeros(&[p, p]);
    if let Some(e) = entries {
        let mut it = e.data().iter();
        for i in 0..p {
            for j in i + 1..p {
                m.set(i, j, *it.next().ok_or_else(|| grace_core::Error::Data("DAG entries are short".into()))?);
            }
        }
    }
    Ok(m)
}

fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let mut worst: f64 = 0.0;
    for (name, err) in op_suite(a.seed, 1e-5)? {
        println!("op {name:<24} {err:.3e}");
        worst = worst.max(err);
    }
    for mech in [MechanismKind::Linear, MechanismKind::Mlp] {
        for kind in [GnnKind::Sage, GnnKind::Gcn, GnnKind::Gat] {
            let err = composite_gradcheck(mech, kind, a.eps, a.seed)?;
            println!("loss {mech}/{kind:<17} {err:.3e}");
            worst = worst.max(err);
        }
    }
    if worst >= a.tolerance {
        return Err(grace_core::Error::Numeric(format!(
            "max relative gradient error {worst:.3e} exceeds {:.1e}",
            a.tolerance
        ))
        .into());
    }
    println!("max relative error {worst:.3e}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::ExportDag(a) => export(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
