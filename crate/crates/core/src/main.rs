use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use flecs_cgd::harness::{self, selftest, RunConfig, Variant};
use flecs_cgd::objective::BatchSpec;
use flecs_cgd::oracles::{finite_diff_gradient, finite_diff_hvp, relative_error};
use flecs_cgd::{DenseMatrix, DenseVector, Error, Result};

#[derive(Parser)]
#[command(name = "flecs-cgd", version, about = "Compressed second-order federated optimization simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Overrides {
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override `global_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `rounds`.
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and emit its trace.
    Run {
        config: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Run several variants on the same data and seed.
    Compare {
        config: PathBuf,
        #[arg(long, default_value = "cgd,flecs")]
        variants: String,
        #[command(flatten)]
        o: Overrides,
    },
    /// Check analytic gradients and Hessian-vector products against finite differences.
    Gradcheck {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the per-round bit budget.
    Bits { config: PathBuf },
    /// Run the statistical invariant suites.
    Selftest {
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(path: &Path, o: Option<&Overrides>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(o) = o {
        if let Some(seed) = o.seed {
            cfg.global_seed = seed;
        }
        if let Some(k) = o.rounds {
            cfg.rounds = k;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::Io {
            path: p.display().to_string(),
            source: e,
        })?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn flush(mut out: Box<dyn Write>) -> Result<()> {
    out.flush().map_err(|e| Error::Io {
        path: "<csv output>".into(),
        source: e,
    })
}

const GRAD_TOL: f64 = 1e-6;
const HVP_TOL: f64 = 1e-5;

fn gradcheck(cfg: &RunConfig, seed: u64) -> Result<()> {
    let shards = harness::load_shards(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = shards[0].dim();
    let points = [
        DenseVector::zeros(d),
        DenseVector::from_fn(d, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal)),
    ];
    let mut worst = (0.0f64, 0.0f64);
    for (i, shard) in shards.iter().enumerate() {
        for w in &points {
            let g = shard.full_gradient(w)?;
            let eg = relative_error(&g, &finite_diff_gradient(shard, w, 1e-6)?, 1e-8);
            let dir = DenseVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
            let s = DenseMatrix::from_column_slice(d, 1, dir.as_slice());
            let hv = shard.hessian_sketch(w, &s, BatchSpec::Full, &mut rng)?.column(0).into_owned();
            let eh = relative_error(&hv, &finite_diff_hvp(shard, w, &dir, 1e-5)?, 1e-8);
            println!("shard {i}: gradient rel err {eg:.3e}, hvp rel err {eh:.3e}");
            worst = (worst.0.max(eg), worst.1.max(eh));
        }
    }
    println!("worst: gradient {:.3e} (tol {GRAD_TOL:e}), hvp {:.3e} (tol {HVP_TOL:e})", worst.0, worst.1);
    if worst.0 > GRAD_TOL || worst.1 > HVP_TOL {
        return Err(Error::Numeric("derivative check exceeded tolerance".into()));
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, o } => {
            let cfg = load(&config, Some(&o))?;
            let rows = harness::run(&cfg)?;
            let mut out = output(o.out.as_deref())?;
            harness::write_trace_csv(&mut out, &rows)?;
            flush(out)
        }
        Command::Compare { config, variants, o } => {
            let cfg = load(&config, Some(&o))?;
            let runs = harness::compare(&cfg, &Variant::parse_list(&variants)?)?;
            let mut out = output(o.out.as_deref())?;
            harness::write_compare_csv(&mut out, &runs)?;
            flush(out)
        }
        Command::Gradcheck { config, seed } => {
            let cfg = load(&config, None)?;
            gradcheck(&cfg, seed.unwrap_or(cfg.global_seed))
        }
        Command::Bits { config } => {
            let cfg = load(&config, None)?;
            print!("{}", harness::bits_report(&cfg)?);
            Ok(())
        }
        Command::Selftest { draws, seed } => {
            let results = selftest::run_all(draws, seed.unwrap_or(0))?;
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.pass).count();
            println!("{} suites, {failed} failed", results.len());
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} statistical checks failed")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // usage errors are configuration errors
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
