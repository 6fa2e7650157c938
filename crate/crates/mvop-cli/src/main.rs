mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvop::blockmat::dump_blocks;
use mvop::mvopr::{PolynomialSystem, SystemBuilder};
use mvop::suites::{convergence_table, loglog_slope, run_suites, SuiteContext};
use mvop::MvopError;
use serde::Serialize;

use config::{ConfigError, Loader, Overrides, RunConfig};

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "mvop", version, about = "Multivariate orthogonal polynomials: factor data and identity checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write H, β, S and Jacobi blocks plus a JSON index.
    Compute(Common),
    /// Run identity suites and write a JSON report.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Comma-separated suite names.
        #[arg(long, value_delimiter = ',')]
        suite: Option<Vec<String>>,
        /// Record wall-clock milliseconds per identity.
        #[arg(long)]
        timing: bool,
        /// Multiply every tolerance by this factor.
        #[arg(long)]
        tolerance_scale: Option<f64>,
    },
    /// Sweep finite-difference steps and write (h, residual) tables as CSV.
    Convergence {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        suite: Option<Vec<String>>,
        /// Comma-separated step sizes.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        steps: Option<Vec<f64>>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Gauss–Legendre points per axis.
    #[arg(long)]
    quad_order: Option<usize>,
    /// Usable truncation level L.
    #[arg(long)]
    level: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Numerical(MvopError),
    #[error("{0}")]
    Library(MvopError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl From<MvopError> for AppError {
    fn from(e: MvopError) -> Self {
        if e.is_numerical() {
            AppError::Numerical(e)
        } else {
            AppError::Library(e)
        }
    }
}

impl AppError {
    fn exit_code(&self) -> u8 {
        match self {
            AppError::Numerical(_) => EXIT_NUMERICAL,
            AppError::Io { .. } => EXIT_FAIL,
            _ => EXIT_CONFIG,
        }
    }
}

fn load(common: &Common, mut ov: Overrides) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(&common.config)
        .map_err(|source| ConfigError::Io { path: common.config.clone(), source })?;
    ov.out = common.out.clone();
    ov.seed = common.seed;
    ov.quad_order = common.quad_order;
    ov.levels = common.level;
    Loader::new(&common.config, &text).load(&ov)
}

fn write(path: &Path, contents: &str) -> Result<(), AppError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| AppError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, contents).map_err(|source| AppError::Io { path: path.to_path_buf(), source })
}

fn builder(cfg: &RunConfig) -> Result<SystemBuilder, AppError> {
    Ok(SystemBuilder::new(cfg.spec.clone(), cfg.quad_order, cfg.levels, cfg.buffer)?)
}

fn context(cfg: &RunConfig, timing: bool) -> Result<SuiteContext, AppError> {
    let mut ctx = SuiteContext::new(builder(cfg)?, cfg.quad_order, cfg.state.clone());
    ctx.seed = cfg.seed;
    ctx.samples = cfg.samples;
    ctx.fd = cfg.fd;
    ctx.miwa_ratio = cfg.miwa_ratio;
    ctx.miwa_kmax = cfg.miwa_kmax;
    ctx.tolerance_scale = cfg.tolerance_scale;
    ctx.timing = timing;
    Ok(ctx)
}

#[derive(Serialize)]
struct ArtifactIndex {
    schema_version: u32,
    measure: String,
    dim: usize,
    levels: usize,
    buffer: usize,
    quad_order: usize,
    level_sizes: Vec<usize>,
    files: Vec<ArtifactFile>,
}

#[derive(Serialize)]
struct ArtifactFile {
    name: String,
    content: String,
}

fn compute(cfg: &RunConfig) -> Result<(), AppError> {
    let sys = builder(cfg)?.system(&cfg.state)?;
    let l = cfg.levels;
    let d = sys.dim();
    let mut files = Vec::new();
    let mut emit = |name: String, content: String, blocks: Vec<(usize, usize, nalgebra::DMatrix<f64>)>| {
        let path = cfg.out_dir.join(&name);
        write(&path, &dump_blocks(d, l, &blocks))?;
        files.push(ArtifactFile { name, content });
        Ok::<_, AppError>(())
    };
    emit("h.dump".into(), "quasi-tau blocks H_[k]".into(), (0..l).map(|k| (k, k, sys.h(k).clone())).collect())?;
    emit("beta.dump".into(), "subdiagonal blocks β_[k] of S".into(), (1..l).map(|k| (k, k - 1, sys.beta(k))).collect())?;
    emit("s.dump".into(), "polynomial coefficients: blocks S_[k],[j], j ≤ k".into(), s_blocks(&sys, l))?;
    for a in 0..d {
        let mut n = vec![0.0; d];
        n[a] = 1.0;
        let j = sys.jacobi_matrix(&n)?.j;
        let lv = j.levels().min(l);
        let blocks = (0..lv)
            .flat_map(|k| (k.saturating_sub(1)..(k + 2).min(lv)).map(move |m| (k, m)))
            .map(|(k, m)| (k, m, j.block(k, m)))
            .collect();
        emit(format!("jacobi_{a}.dump"), format!("Jacobi matrix J_{a}, tridiagonal blocks"), blocks)?;
    }
    let index = ArtifactIndex {
        schema_version: mvop::suites::SCHEMA_VERSION,
        measure: cfg.spec.description.clone(),
        dim: d,
        levels: l,
        buffer: cfg.buffer,
        quad_order: cfg.quad_order,
        level_sizes: (0..l).map(|k| sys.size(k)).collect(),
        files,
    };
    write(&cfg.out_dir.join("index.json"), &(serde_json::to_string_pretty(&index).expect("serializable") + "\n"))?;
    println!("{:<6} {:>6}  H_[k] diagonal", "level", "size");
    for k in 0..l {
        let diag: Vec<String> = sys.h(k).diagonal().iter().map(|v| format!("{v:.10e}")).collect();
        println!("{:<6} {:>6}  {}", k, sys.size(k), diag.join(" "));
    }
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

fn s_blocks(sys: &PolynomialSystem, l: usize) -> Vec<(usize, usize, nalgebra::DMatrix<f64>)> {
    (0..l).flat_map(|k| (0..=k).map(move |j| (k, j, sys.factors.s.block(k, j)))).collect()
}

fn verify(cfg: &RunConfig, timing: bool) -> Result<u8, AppError> {
    let ctx = context(cfg, timing)?;
    let report = run_suites(&ctx, &cfg.suites)?;
    let json = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
    write(&cfg.out_dir.join("report.json"), &json)?;
    print!("{}", report.summary_table());
    Ok(if report.numerical_breakdown() {
        EXIT_NUMERICAL
    } else if report.all_pass() {
        0
    } else {
        EXIT_FAIL
    })
}

fn convergence(cfg: &RunConfig) -> Result<(), AppError> {
    let ctx = context(cfg, false)?;
    let rows = convergence_table(&ctx, &cfg.suites, &cfg.steps)?;
    let mut csv = String::from("suite,identity,h,residual\n");
    for r in &rows {
        csv += &format!("{},{},{:e},{:e}\n", r.suite, r.identity, r.h, r.residual);
    }
    write(&cfg.out_dir.join("convergence.csv"), &csv)?;
    println!("{:<14} {:<36} {:>10}", "suite", "identity", "slope");
    for chunk in rows.chunk_by(|a, b| a.suite == b.suite && a.identity == b.identity) {
        let h: Vec<f64> = chunk.iter().map(|r| r.h).collect();
        let res: Vec<f64> = chunk.iter().map(|r| r.residual).collect();
        let slope = if res.iter().all(|v| *v > 0.0) && h.len() > 1 {
            format!("{:.3}", loglog_slope(&h, &res))
        } else {
            "-".into()
        };
        println!("{:<14} {:<36} {:>10}", chunk[0].suite, chunk[0].identity, slope);
    }
    println!("wrote {}", cfg.out_dir.join("convergence.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<u8, AppError> {
    match cli.command {
        Command::Compute(common) => {
            let cfg = load(&common, Overrides::default())?;
            compute(&cfg)?;
            Ok(0)
        }
        Command::Verify { common, suite, timing, tolerance_scale } => {
            let cfg = load(&common, Overrides { suites: suite, tolerance_scale, ..Default::default() })?;
            verify(&cfg, timing)
        }
        Command::Convergence { common, suite, steps } => {
            if steps.as_ref().is_some_and(|s| s.is_empty()) {
                return Err(ConfigError::Usage("--steps needs at least one step size".into()).into());
            }
            let cfg = load(&common, Overrides { suites: suite, steps, ..Default::default() })?;
            if cfg.steps.is_empty() {
                return Err(ConfigError::Usage("convergence.steps needs at least one step size".into()).into());
            }
            convergence(&cfg)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
