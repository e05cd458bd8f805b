//! Command-line front end: simulation runs, synthetic data generation,
//! the standalone training service, reporting and offline outlier repair.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use heliofarm::anomaly::{self, FitConfig, RepairMethod};
use heliofarm::devs::{Coordinator, Mode};
use heliofarm::farm::{
    self, build_model, command, load_sensor_configs, save_sensor_configs, synth, BuildConfig,
    FarmSetup,
};
use heliofarm::store::Datastore;
use heliofarm::trainsvc;

#[derive(Parser)]
#[command(name = "heliofarm", version, about = "Sensor-farm simulation platform")]
struct Cli {
    /// TOML config file supplying defaults (flags and env take precedence).
    #[arg(long, global = true, env = "HELIOFARM_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a simulation script against a datastore.
    Run(RunArgs),
    /// Generate a synthetic dataset and sensor layout for a farm.
    GenData(GenDataArgs),
    /// Serve training requests over TCP.
    ServeTrain(ServeArgs),
    /// Render HTML/CSV reports from a datastore.
    Report(ReportArgs),
    /// Detect and repair outliers for one sensor series.
    FitOutliers(FitOutliersArgs),
}

#[derive(Args)]
struct StoreArgs {
    /// Fog-side datastore root.
    #[arg(long, env = "HELIOFARM_STORE")]
    store: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Simulation script (DATETIME;COMMAND;ARGUMENTS lines).
    #[arg(long, env = "HELIOFARM_SIM_FILE")]
    sim_file: PathBuf,
    /// Comma-separated farm names; defaults to the farms the script mentions.
    #[arg(long, env = "HELIOFARM_FARMS", value_delimiter = ',')]
    farms: Vec<String>,
    #[command(flatten)]
    store: StoreArgs,
    /// Cloud-side datastore root; defaults to `<store>/../cloud`.
    #[arg(long, env = "HELIOFARM_CLOUD_STORE")]
    cloud_store: Option<PathBuf>,
    #[arg(long, env = "HELIOFARM_SEED")]
    seed: Option<u64>,
    /// Coordinator mode: `sequential` or `parallel`.
    #[arg(long, env = "HELIOFARM_MODE")]
    mode: Option<String>,
    /// Worker threads in parallel mode.
    #[arg(long, env = "HELIOFARM_WORKERS")]
    workers: Option<usize>,
    /// Farm-level MAE (W/m²) above which the cloud retrains automatically.
    #[arg(long, env = "HELIOFARM_RETRAIN_THRESHOLD")]
    retrain_threshold: Option<f64>,
    /// Print the kernel message log after the run.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    store: StoreArgs,
    #[arg(long)]
    farm: String,
    #[arg(long, default_value = "synth")]
    dataset_id: String,
    #[arg(long, default_value_t = 18)]
    sensors: usize,
    #[arg(long)]
    start: NaiveDate,
    #[arg(long, default_value_t = 1)]
    days: u32,
    #[arg(long, env = "HELIOFARM_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878", env = "HELIOFARM_LISTEN")]
    listen: String,
    /// Maximum concurrent training jobs; extra requests queue FIFO.
    #[arg(long, default_value_t = 2)]
    cap: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    store: StoreArgs,
    #[arg(long)]
    farm: String,
    #[arg(long)]
    start: NaiveDate,
    #[arg(long)]
    end: NaiveDate,
    #[arg(long, env = "HELIOFARM_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitOutliersArgs {
    /// Input CSV with an `at,sensor,ghi` header (empty ghi = null).
    input: PathBuf,
    /// Sensor to process; defaults to the only sensor in the file.
    #[arg(long)]
    sensor: Option<String>,
    #[arg(long, default_value = "spline")]
    method: String,
    #[arg(long, default_value_t = 0.99)]
    band_level: f64,
    /// Output CSV path; defaults to `<input stem>_outliers.csv`.
    #[arg(long, env = "HELIOFARM_OUT")]
    out: Option<PathBuf>,
}

/// Defaults loaded from the optional TOML config file. Precedence is
/// flags > environment > config file > built-ins.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    store: Option<PathBuf>,
    cloud_store: Option<PathBuf>,
    seed: Option<u64>,
    mode: Option<String>,
    workers: Option<usize>,
    retrain_threshold: Option<f64>,
    out: Option<PathBuf>,
}

/// Marker for configuration/validation failures that should exit 2
/// rather than 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl std::fmt::Display) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.to_string()))
}

fn load_file_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?;
            Ok(toml::from_str(&text)?)
        }
        None => Ok(FileConfig::default()),
    }
}

fn resolve_store(args: &StoreArgs, file: &FileConfig) -> anyhow::Result<PathBuf> {
    args.store
        .clone()
        .or_else(|| file.store.clone())
        .ok_or_else(|| usage("no datastore given (use --store or HELIOFARM_STORE)"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let file = match load_file_config(cli.config.as_deref()) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.cmd {
        Cmd::Run(a) => run(a, &file),
        Cmd::GenData(a) => gen_data(a, &file),
        Cmd::ServeTrain(a) => serve_train(a),
        Cmd::Report(a) => report(a, &file),
        Cmd::FitOutliers(a) => fit_outliers(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e
                .chain()
                .any(|c| c.is::<UsageError>() || c.is::<command::ScriptError>());
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

fn run(a: RunArgs, file: &FileConfig) -> anyhow::Result<()> {
    let fog_root = resolve_store(&a.store, file)?;
    let cloud_root = a
        .cloud_store
        .clone()
        .or_else(|| file.cloud_store.clone())
        .unwrap_or_else(|| fog_root.join("..").join("cloud"));
    std::fs::create_dir_all(&fog_root)?;
    std::fs::create_dir_all(&cloud_root)?;

    let text = std::fs::read_to_string(&a.sim_file)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", a.sim_file.display()))?;
    let commands = command::parse_simulation_file(&text)?;
    if commands.is_empty() {
        return Err(usage("simulation script has no commands"));
    }

    let referenced: BTreeSet<String> = commands
        .iter()
        .filter_map(|c| c.farm().map(str::to_string))
        .collect();
    let farms: Vec<String> = if a.farms.is_empty() {
        referenced.iter().cloned().collect()
    } else {
        if let Some(unknown) = referenced.iter().find(|f| !a.farms.contains(f)) {
            return Err(usage(format!(
                "script references farm '{unknown}' not listed in --farms"
            )));
        }
        a.farms.clone()
    };
    if farms.is_empty() {
        return Err(usage("no farms in script or --farms"));
    }

    let store = Datastore::open(&fog_root);
    let mut setups = Vec::new();
    for name in &farms {
        let sensors = load_sensor_configs(&fog_root, name).map_err(usage)?;
        // Mirror the layout to the cloud root so reports can rasterize.
        save_sensor_configs(&cloud_root, name, &sensors)?;
        let mut datasets = std::collections::HashMap::new();
        for c in &commands {
            if c.kind == command::CommandKind::ActivateSensors && c.args[0] == *name {
                let dsid = c.args[1].clone();
                if !datasets.contains_key(&dsid) {
                    let rows = store.read_dataset(name, &dsid).map_err(usage)?;
                    datasets.insert(dsid, rows);
                }
            }
        }
        setups.push(FarmSetup {
            name: name.clone(),
            sensors,
            datasets,
        });
    }

    let cfg = BuildConfig {
        fog_root: fog_root.clone(),
        cloud_root,
        seed: a.seed.or(file.seed).unwrap_or(42),
        retrain_threshold: a
            .retrain_threshold
            .or(file.retrain_threshold)
            .unwrap_or(farm::cloud::DEFAULT_RETRAIN_THRESHOLD),
        model_config: Default::default(),
    };
    let (model, epoch) = build_model(commands, &setups, &cfg);
    let mut coord = Coordinator::initialize(model, epoch)?;
    let mode = a.mode.clone().or_else(|| file.mode.clone());
    match mode.as_deref() {
        None | Some("sequential") => {}
        Some("parallel") => {
            let workers = a
                .workers
                .or(file.workers)
                .unwrap_or_else(num_cpus_fallback);
            coord.set_mode(Mode::Parallel(workers));
        }
        Some(other) => return Err(usage(format!("unknown mode {other:?} (sequential|parallel)"))),
    }
    coord.record_log(a.verbose);

    let stats = coord.simulate_until(f64::INFINITY)?;
    if a.verbose {
        for line in coord.log() {
            println!("{line}");
        }
    }
    let virt = coord.time();
    let wall = stats.wall.as_secs_f64().max(1e-9);
    println!(
        "simulated {virt:.0} virtual seconds in {:.3} wall seconds ({:.0}x)",
        stats.wall.as_secs_f64(),
        virt / wall
    );
    println!(
        "cycles {} | transitions {} | messages {} | {:.0} values/wall-second",
        stats.cycles,
        stats.transitions,
        stats.messages,
        stats.messages as f64 / wall
    );
    Ok(())
}

fn num_cpus_fallback() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4)
}

fn gen_data(a: GenDataArgs, file: &FileConfig) -> anyhow::Result<()> {
    let root = resolve_store(&a.store, file)?;
    let spec = synth::SynthSpec {
        farm: a.farm.clone(),
        sensors: a.sensors,
        ..synth::SynthSpec::default()
    };
    let seed = a.seed.or(file.seed).unwrap_or(42);
    let (cfgs, rows) = synth::synth_generate(&spec, a.start, a.days, seed)?;
    save_sensor_configs(&root, &a.farm, &cfgs)?;
    let store = Datastore::open(&root);
    let path = store.write_dataset(&a.farm, &a.dataset_id, &rows)?;
    println!(
        "wrote {} rows for {} sensors to {}",
        rows.len(),
        cfgs.len(),
        path.display()
    );
    Ok(())
}

fn serve_train(a: ServeArgs) -> anyhow::Result<()> {
    let server = trainsvc::Server::start(&a.listen, a.cap)?;
    println!("training service listening on {} (cap {})", server.addr(), a.cap);
    loop {
        std::thread::park();
    }
}

fn report(a: ReportArgs, file: &FileConfig) -> anyhow::Result<()> {
    let root = resolve_store(&a.store, file)?;
    let out = a
        .out
        .clone()
        .or_else(|| file.out.clone())
        .unwrap_or_else(|| root.join("reports"));
    let files = heliofarm::report::render_reports(&root, &a.farm, a.start, a.end, &out)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn fit_outliers(a: FitOutliersArgs) -> anyhow::Result<()> {
    let method = RepairMethod::parse(&a.method)?;
    let text = std::fs::read_to_string(&a.input)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", a.input.display()))?;
    let mut series: std::collections::BTreeMap<
        String,
        Vec<(chrono::DateTime<chrono::Utc>, Option<f64>)>,
    > = Default::default();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            anyhow::ensure!(
                line.trim() == "at,sensor,ghi",
                "expected 'at,sensor,ghi' header"
            );
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.splitn(3, ',').collect();
        anyhow::ensure!(f.len() == 3, "line {}: expected 3 fields", i + 1);
        let at = heliofarm::store::parse_ts(f[0])
            .ok_or_else(|| anyhow::anyhow!("line {}: bad timestamp '{}'", i + 1, f[0]))?;
        let ghi = if f[2].is_empty() {
            None
        } else {
            Some(f[2].parse::<f64>()?)
        };
        series.entry(f[1].to_string()).or_default().push((at, ghi));
    }
    let sensor = match &a.sensor {
        Some(s) => s.clone(),
        None => {
            anyhow::ensure!(
                series.len() == 1,
                "file has {} sensors; pick one with --sensor",
                series.len()
            );
            series.keys().next().unwrap().clone()
        }
    };
    let rows = series
        .remove(&sensor)
        .ok_or_else(|| anyhow::anyhow!("no rows for sensor {sensor}"))?;
    let (timestamps, values): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let cfg = FitConfig {
        band_level: a.band_level,
        ..FitConfig::default()
    };
    let (_, rep) = anomaly::fix_outliers(&timestamps, &values, &cfg, method)?;
    let out = a.out.clone().unwrap_or_else(|| {
        let stem = a.input.file_stem().unwrap_or_default().to_string_lossy();
        a.input.with_file_name(format!("{stem}_outliers.csv"))
    });
    std::fs::write(&out, rep.to_csv())?;
    println!(
        "{} flagged, {} repaired of {} points -> {}",
        rep.flagged_count,
        rep.points.iter().filter(|p| p.repaired.is_some()).count(),
        rep.points.len(),
        out.display()
    );
    Ok(())
}
