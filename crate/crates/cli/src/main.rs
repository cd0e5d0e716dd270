use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clnet_core::analysis::{sequence_report, write_report_csv};
use clnet_core::checkpoint::{train_checkpoint, Checkpoint};
use clnet_core::clnet::{param_report, ParamReport};
use clnet_core::config::RunConfig;
use clnet_core::evalbench::{load_sequence, run_benchmark, synth_generate, write_bundle, write_sequence, SynthSpec};
use clnet_core::tracker::{TrackMode, Tracker};
use clnet_core::training::write_log;
use clnet_core::{ClNet, ClNetConfig, Error, Params};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "clnet", version, about = "Siamese trackers with latent-network adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CheckpointArg {
    /// Overrides `paths.checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base tracker and the latent network, then write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Write the training losses as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Track one OTB-layout sequence and emit one JSON record per frame.
    Track {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long)]
        sequence: PathBuf,
        /// base, clnet or clnet_star; overrides `tracking.mode`.
        #[arg(long)]
        mode: Option<String>,
        /// Overrides `tracking.tau_m`.
        #[arg(long, allow_hyphen_values = true)]
        tau_m: Option<f64>,
        /// Include every anchor's box and score in the records.
        #[arg(long)]
        dump_candidates: bool,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One-pass evaluation over the test split; writes a results bundle.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long)]
        mode: Option<String>,
        /// Results root; overrides the environment and `paths.results`.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Overrides `eval.workers`.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Decisive-box diagnostics of one tracked sequence as CSV.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        /// Output CSV; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        include_first: bool,
    },
    /// Write synthetic sequences in OTB layout.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Frame at which the appearance changes.
        #[arg(long)]
        shift_frame: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
    },
    /// Closed-form parameter counts of the latent network.
    Params {
        #[command(flatten)]
        common: Common,
        /// Full-size dimensions: 256-channel maps, c_bar 128, 256 hidden units, k 5.
        #[arg(long)]
        full: bool,
        /// Overrides the level count.
        #[arg(long)]
        levels: Option<usize>,
        /// Also instantiate the network and compare counts.
        #[arg(long)]
        verify: bool,
        #[arg(long)]
        json: bool,
    },
}

enum Failure {
    User(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(_) => Failure::Internal(e.to_string()),
            _ => Failure::User(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::User(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_mode(cfg: &mut RunConfig, mode: &Option<String>) -> Result<(), Failure> {
    if let Some(m) = mode {
        cfg.tracking.mode = m.parse::<TrackMode>()?;
    }
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, arg: &CheckpointArg) -> PathBuf {
    arg.checkpoint.clone().unwrap_or_else(|| cfg.paths.checkpoint.clone())
}

fn load_checkpoint(cfg: &RunConfig, arg: &CheckpointArg) -> Result<Checkpoint, Failure> {
    let ckpt = Checkpoint::load(&checkpoint_path(cfg, arg))?;
    ckpt.check_compatible(cfg)?;
    Ok(ckpt)
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => {
            if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(d)?;
            }
            Box::new(BufWriter::new(fs::File::create(p)?))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_train(common: &Common, ckpt: &CheckpointArg, log: &Option<PathBuf>) -> CliResult {
    let cfg = load_config(common)?;
    let data = cfg.train_set()?;
    eprintln!("training on {} sequences (seed {})", data.len(), cfg.seed);
    let out = train_checkpoint(&cfg, &data)?;
    let path = checkpoint_path(&cfg, ckpt);
    out.checkpoint.save(&path)?;
    if let Some(p) = log {
        let rows: Vec<_> = out.base_log.iter().chain(&out.clnet_log).copied().collect();
        write_log(&rows, p)?;
    }
    println!("{}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_track(
    common: &Common,
    ckpt: &CheckpointArg,
    sequence: &Path,
    mode: &Option<String>,
    tau_m: Option<f64>,
    dump: bool,
    out: &Option<PathBuf>,
) -> CliResult {
    let mut cfg = load_config(common)?;
    apply_mode(&mut cfg, mode)?;
    if let Some(t) = tau_m {
        cfg.tracking.tau_m = t;
    }
    cfg.tracking.dump_candidates |= dump;
    let ck = load_checkpoint(&cfg, ckpt)?;
    let seq = load_sequence(sequence, cfg.data.allow_whitespace)?;
    let tracker = Tracker::new(&ck.model, ck.clnet.as_ref(), cfg.tracking.clone())?;
    let records = tracker.track_sequence(&seq)?;
    let mut w = output(out)?;
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_eval(
    common: &Common,
    ckpt: &CheckpointArg,
    mode: &Option<String>,
    results: &Option<PathBuf>,
    workers: Option<usize>,
) -> CliResult {
    let mut cfg = load_config(common)?;
    apply_mode(&mut cfg, mode)?;
    if let Some(w) = workers {
        cfg.eval.workers = w;
    }
    cfg.validate()?;
    let ck = load_checkpoint(&cfg, ckpt)?;
    let data = cfg.test_set()?;
    let hash = cfg.hash()?;
    let run_id = format!("{}-{}", cfg.tracking.mode, &hash[..12]);
    let run = run_benchmark(&ck.model, ck.clnet.as_ref(), &data, &cfg.tracking, &run_id, cfg.eval.workers)?;
    let root = results.clone().unwrap_or_else(|| cfg.results_root());
    let dir = write_bundle(&run, &root)?;
    println!("{}", serde_json::to_string(&run.summary)?);
    eprintln!("results written to {}", dir.display());
    Ok(())
}

fn cmd_analyze(
    common: &Common,
    ckpt: &CheckpointArg,
    sequence: &Path,
    mode: &Option<String>,
    out: &Option<PathBuf>,
    include_first: bool,
) -> CliResult {
    let mut cfg = load_config(common)?;
    apply_mode(&mut cfg, mode)?;
    cfg.tracking.dump_candidates = true;
    let ck = load_checkpoint(&cfg, ckpt)?;
    let seq = load_sequence(sequence, cfg.data.allow_whitespace)?;
    let tracker = Tracker::new(&ck.model, ck.clnet.as_ref(), cfg.tracking.clone())?;
    let records = tracker.track_sequence(&seq)?;
    let report = sequence_report(&records, &seq.gt, include_first || cfg.eval.include_first)?;
    match out {
        Some(p) => write_report_csv(&report, p)?,
        None => {
            let mut w = output(&None)?;
            writeln!(w, "frame,p_c,n_c,d,overlap")?;
            for r in &report.rows {
                writeln!(w, "{},{},{},{},{}", r.frame, r.p_c, r.n_c, r.d, r.overlap)?;
            }
            w.flush()?;
        }
    }
    eprintln!("mean D {:.4}, frames with D < 0: {}", report.mean_d, report.faults);
    Ok(())
}

fn cmd_synth(
    common: &Common,
    out: &Path,
    count: usize,
    shift_frame: Option<usize>,
    length: Option<usize>,
) -> CliResult {
    let cfg = load_config(common)?;
    let mut spec = SynthSpec { seed: cfg.seed, ..cfg.data.synth.clone() };
    if shift_frame.is_some() {
        spec.shift_frame = shift_frame;
    }
    if let Some(l) = length {
        spec.length = l;
    }
    spec.validate()?;
    for i in 0..count as u64 {
        let seq = synth_generate(&SynthSpec { seed: spec.seed + i, ..spec.clone() })?;
        let dir = out.join(&seq.id);
        write_sequence(&seq, &dir)?;
        println!("{}", dir.display());
    }
    Ok(())
}

fn print_params(report: &ParamReport, json: bool) -> CliResult {
    let mut w = output(&None)?;
    if json {
        serde_json::to_writer_pretty(&mut w, report)?;
        writeln!(w)?;
    } else {
        writeln!(w, "level branch adjuster fc1 fc2 fc3 total")?;
        for r in &report.rows {
            let c = &r.counts;
            let branch = format!("{:?}", r.branch).to_lowercase();
            writeln!(w, "{} {branch} {} {} {} {} {}", r.level, c.adjuster, c.fc1, c.fc2, c.fc3, c.total())?;
        }
        writeln!(w, "total {}", report.total)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_params(common: &Common, full: bool, levels: Option<usize>, verify: bool, json: bool) -> CliResult {
    let cfg = load_config(common)?;
    let (net_cfg, hidden, k, default_levels) = if full {
        (ClNetConfig { augmentation: cfg.clnet.augmentation, ..ClNetConfig::default() }, 256, 5, 3)
    } else {
        (cfg.clnet.clone(), cfg.model.head_hidden, cfg.model.anchors_per_cell, cfg.model.levels)
    };
    let levels = levels.unwrap_or(default_levels);
    let report = param_report(&net_cfg, hidden, k, levels)?;
    print_params(&report, json)?;
    if verify {
        let net = ClNet::init(net_cfg, hidden, k, levels, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        let counted = net.num_params();
        if counted != report.total {
            return Err(Failure::Internal(format!("instantiated {counted} parameters, analytic {}", report.total)));
        }
        eprintln!("instantiated network has {counted} parameters");
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Train { common, ckpt, log } => cmd_train(common, ckpt, log),
        Command::Track { common, ckpt, sequence, mode, tau_m, dump_candidates, out } => {
            cmd_track(common, ckpt, sequence, mode, *tau_m, *dump_candidates, out)
        }
        Command::Eval { common, ckpt, mode, results, workers } => cmd_eval(common, ckpt, mode, results, *workers),
        Command::Analyze { common, ckpt, sequence, mode, out, include_first } => {
            cmd_analyze(common, ckpt, sequence, mode, out, *include_first)
        }
        Command::Synth { common, out, count, shift_frame, length } => {
            cmd_synth(common, out, *count, *shift_frame, *length)
        }
        Command::Params { common, full, levels, verify, json } => cmd_params(common, *full, *levels, *verify, *json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failure::User(m))) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Ok(Err(Failure::Internal(m))) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
        Err(_) => ExitCode::from(2),
    }
}
