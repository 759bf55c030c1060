use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shmstate::arena::ArenaAllocator;
use shmstate::bench::{self, BenchConfig, BenchPolicy};
use shmstate::checkpoint::{self, CheckpointError};
use shmstate::driver::{self, DriverError, RunConfig};
use shmstate::sim_kernel::{self, InitSpec, SimError, SimParams};
use shmstate::slab_buffer::{RamdiskConfig, SlabBuffer};

const EXIT_USAGE: u8 = 2;
const EXIT_STATE: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;

#[derive(Parser)]
#[command(name = "shmstate", version, about = "Ramdisk-resident simulation state, checkpointing and unmap benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write an initial state into <state-root>/read.
    Init(InitArgs),
    /// Step, checkpoint and retire in a loop.
    Run(RunArgs),
    /// Advance one step from a read state into a write directory.
    Step(StepArgs),
    /// Copy <state-root>/read to a new checkpoint and apply retention.
    Checkpoint(CheckpointArgs),
    /// Replace the state under <state-root> with a verified checkpoint.
    Restore(RestoreArgs),
    /// Check a checkpoint against its manifest, or print a state digest.
    Verify(VerifyArgs),
    /// Time map/touch/unlink/unmap across sizes and release policies.
    Bench(BenchArgs),
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    state_root: PathBuf,
    #[arg(long)]
    particles: u64,
    #[arg(long, default_value_t = 8)]
    slabs: u32,
    #[arg(long, default_value_t = 16)]
    cells_per_slab: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    box_size: f64,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` file; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    state_root: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dest: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    checkpoint_every_steps: Option<u64>,
    #[arg(long)]
    checkpoint_every_seconds: Option<f64>,
    #[arg(long)]
    conditional_on_analysis: bool,
    #[arg(long)]
    copy_deadline_seconds: Option<f64>,
    #[arg(long)]
    copy_workers: Option<usize>,
    #[arg(long)]
    keep_k: Option<usize>,
    /// Run each step as a child `shmstate step` process.
    #[arg(long)]
    child_process: bool,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    g: Option<f64>,
    #[arg(long)]
    softening: Option<f64>,
    #[arg(long)]
    cutoff_cells: Option<u32>,
    #[arg(long)]
    analysis_every: Option<u64>,
}

#[derive(Args)]
struct StepArgs {
    #[arg(long)]
    read: PathBuf,
    #[arg(long)]
    write: PathBuf,
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    state_root: PathBuf,
    #[arg(long)]
    dest: PathBuf,
    #[arg(long, default_value_t = 600.0)]
    deadline_seconds: f64,
    #[arg(long, default_value_t = 2)]
    keep_k: usize,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct RestoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    state_root: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Checkpoint directory to verify.
    checkpoint: Option<PathBuf>,
    /// Print the digest of a state directory instead.
    #[arg(long, conflicts_with = "checkpoint")]
    state: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Directory for shared arenas.
    #[arg(long, default_value = "/dev/shm")]
    dir: PathBuf,
    /// Comma-separated sizes, with optional K/M/G suffix (binary units).
    #[arg(long, value_delimiter = ',', value_parser = parse_size)]
    sizes: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "UnlinkThenUnmap,UnmapThenUnlink,PrivateFree")]
    policies: Vec<BenchPolicy>,
    #[arg(long, default_value_t = 5)]
    reps: u32,
    #[arg(long)]
    pin: bool,
    /// Release through the background worker.
    #[arg(long)]
    background: bool,
    /// Also run the deferred-release comparison: TOTAL:N arenas.
    #[arg(long)]
    deferred: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (digits, mult) = match s.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() => {
            let m = match c.to_ascii_uppercase() {
                'K' => 1 << 10,
                'M' => 1 << 20,
                'G' => 1 << 30,
                _ => return Err(format!("unknown size suffix in {s:?}")),
            };
            (&s[..i], m)
        }
        _ => (s, 1),
    };
    let n: u64 = digits.parse().map_err(|e| format!("{s:?}: {e}"))?;
    n.checked_mul(mult).ok_or_else(|| format!("{s:?}: too large"))
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn new(code: u8, kind: &'static str, message: impl Display) -> Self {
        Self {
            code,
            kind,
            message: message.to_string(),
        }
    }
}

impl From<DriverError> for Failure {
    fn from(e: DriverError) -> Self {
        match e {
            DriverError::Config(_) | DriverError::ConfigSyntax(_) => Failure::new(EXIT_USAGE, "usage", e),
            DriverError::Checkpoint(_) | DriverError::CorruptCheckpoint { .. } => {
                Failure::new(EXIT_CHECKPOINT, "checkpoint", e)
            }
            _ => Failure::new(EXIT_STATE, "state", e),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidParams(_) | SimError::Params(_) => Failure::new(EXIT_USAGE, "usage", e),
            _ => Failure::new(EXIT_STATE, "state", e),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::new(EXIT_CHECKPOINT, "checkpoint", e)
    }
}

fn buffer() -> SlabBuffer {
    SlabBuffer::new(ArenaAllocator::new(), RamdiskConfig::from_env())
}

fn init(a: InitArgs) -> Result<(), Failure> {
    driver::create_layout(&a.state_root)?;
    let spec = InitSpec {
        box_size: a.box_size,
        ..InitSpec::new(a.particles, a.slabs, a.cells_per_slab, a.seed)
    };
    let read = driver::read_dir(&a.state_root);
    let meta = sim_kernel::init_state(&buffer(), &read, &spec)?;
    let digest = sim_kernel::checksum_state(&read)?;
    println!("step={} n_particles={} digest={digest}", meta.step, meta.n_particles);
    Ok(())
}

fn run_config(a: RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::new(EXIT_USAGE, "usage", format!("{}: {e}", path.display())))?;
            RunConfig::from_text(&text)?
        }
        None => {
            let missing = |flag: &str| Failure::new(EXIT_USAGE, "usage", format!("--{flag} is required without --config"));
            RunConfig::new(
                a.state_root.clone().ok_or_else(|| missing("state-root"))?,
                a.checkpoint_dest.clone().ok_or_else(|| missing("checkpoint-dest"))?,
            )
        }
    };
    if let Some(v) = a.state_root {
        cfg.state_root = v;
    }
    if let Some(v) = a.checkpoint_dest {
        cfg.checkpoint_dest = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.checkpoint_every_steps {
        cfg.checkpoint_every_steps = v;
    }
    if let Some(v) = a.checkpoint_every_seconds {
        cfg.checkpoint_every_seconds = v;
    }
    if a.conditional_on_analysis {
        cfg.conditional_on_analysis = true;
    }
    if let Some(v) = a.copy_deadline_seconds {
        cfg.copy_deadline_seconds = v;
    }
    if let Some(v) = a.copy_workers {
        cfg.copy_workers = v;
    }
    if let Some(v) = a.keep_k {
        cfg.keep_k = v;
    }
    if a.child_process {
        cfg.in_process = false;
    }
    let p: &mut SimParams = &mut cfg.params;
    if let Some(v) = a.dt {
        p.dt = v;
    }
    if let Some(v) = a.g {
        p.g = v;
    }
    if let Some(v) = a.softening {
        p.softening = v;
    }
    if let Some(v) = a.cutoff_cells {
        p.cutoff_cells = v;
    }
    if let Some(v) = a.analysis_every {
        p.analysis_every = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(a: RunArgs) -> Result<(), Failure> {
    let cfg = run_config(a)?;
    let report = driver::run(&cfg)?;
    for c in &report.checkpoints {
        println!(
            "checkpoint before_step={} decision={:?} complete={} throughput_bytes_per_s={:.6e} dir={}",
            c.before_step,
            c.decision,
            c.complete,
            c.throughput,
            c.dir.as_deref().map(|d| d.display().to_string()).unwrap_or_default()
        );
    }
    let digest = sim_kernel::checksum_state(&driver::read_dir(&cfg.state_root))?;
    println!(
        "steps_done={} final_step={} digest={digest}",
        report.steps_done, report.final_step
    );
    Ok(())
}

fn step(a: StepArgs) -> Result<(), Failure> {
    let params = match &a.params {
        Some(p) => SimParams::read_file(p)?,
        None => SimParams::default(),
    };
    std::fs::create_dir_all(&a.write)
        .map_err(|e| Failure::new(EXIT_STATE, "state", format!("{}: {e}", a.write.display())))?;
    let meta = sim_kernel::step(&buffer(), &a.read, &a.write, &params)?;
    println!("step={}", meta.step);
    Ok(())
}

fn checkpoint_cmd(a: CheckpointArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::new(&a.state_root, &a.dest);
    cfg.copy_deadline_seconds = a.deadline_seconds;
    cfg.keep_k = a.keep_k;
    if let Some(w) = a.workers {
        cfg.copy_workers = w;
    }
    cfg.validate()?;
    let out = driver::checkpoint_now(&cfg)?;
    if let Some(reason) = out.failure {
        return Err(Failure::new(
            EXIT_CHECKPOINT,
            "checkpoint",
            format!("partial checkpoint {}: {reason}", out.dir.display()),
        ));
    }
    println!(
        "dir={} total_bytes={} copy_seconds={:?} throughput_bytes_per_s={:.6e}",
        out.dir.display(),
        out.manifest.total_bytes,
        out.manifest.copy_seconds,
        out.manifest.throughput()
    );
    Ok(())
}

fn restore(a: RestoreArgs) -> Result<(), Failure> {
    let meta = driver::restore(&a.checkpoint, &a.state_root)?;
    let digest = sim_kernel::checksum_state(&driver::read_dir(&a.state_root))?;
    println!("step={} digest={digest}", meta.step);
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<(), Failure> {
    if let Some(state) = a.state {
        println!("digest={}", sim_kernel::checksum_state(&state)?);
        return Ok(());
    }
    let Some(dir) = a.checkpoint else {
        return Err(Failure::new(EXIT_USAGE, "usage", "give a checkpoint directory or --state"));
    };
    let report = checkpoint::verify(&dir);
    if report.ok {
        println!("ok {}", dir.display());
        return Ok(());
    }
    let detail: Vec<String> = report
        .mismatches
        .iter()
        .map(|m| format!("{}: {}", m.rel_path, m.reason))
        .collect();
    Err(Failure::new(
        EXIT_CHECKPOINT,
        "checkpoint",
        format!("{} failed verification: {}", dir.display(), detail.join("; ")),
    ))
}

fn bench_cmd(a: BenchArgs) -> Result<(), Failure> {
    let bench_err = |e: bench::BenchError| Failure::new(EXIT_STATE, "bench", e);
    let sizes = if a.sizes.is_empty() {
        bench::default_sizes(&a.dir)
    } else {
        a.sizes
    };
    let mut cfg = BenchConfig::new(&a.dir, sizes, a.policies, a.reps);
    cfg.pinned = a.pin;
    cfg.background = a.background;
    let report = bench::run_bench(&cfg).map_err(bench_err)?;
    for note in &report.notes {
        eprintln!("note: {note}");
    }
    bench::emit_csv(&report.rows, &a.out).map_err(bench_err)?;
    println!("rows={} pinned={} out={}", report.rows.len(), report.pinned, a.out.display());
    if let Some(spec) = a.deferred {
        let (total, n) = spec
            .split_once(':')
            .ok_or_else(|| Failure::new(EXIT_USAGE, "usage", "--deferred expects TOTAL:N"))?;
        let total = parse_size(total).map_err(|e| Failure::new(EXIT_USAGE, "usage", e))?;
        let n: usize = n.parse().map_err(|e| Failure::new(EXIT_USAGE, "usage", e))?;
        let d = bench::bench_deferred(&a.dir, total, n).map_err(bench_err)?;
        let max_release = d.per_release_seconds.iter().copied().fold(0.0, f64::max);
        println!(
            "deferred arena_bytes={} max_release_s={max_release:?} drain_s={:?} eager_s={:?}",
            d.arena_bytes, d.drain_seconds, d.eager_seconds
        );
    }
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Init(a) => init(a),
        Cmd::Run(a) => run(a),
        Cmd::Step(a) => step(a),
        Cmd::Checkpoint(a) => checkpoint_cmd(a),
        Cmd::Restore(a) => restore(a),
        Cmd::Verify(a) => verify(a),
        Cmd::Bench(a) => bench_cmd(a),
    }
}

fn one_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error kind={} code={} msg={}", f.kind, f.code, one_line(&f.message));
            ExitCode::from(f.code)
        }
    }
}
