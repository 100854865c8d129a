use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};

use simpop::error::Error;
use simpop::fixture::{emit_fixture, make_fixture, FixtureSpec};
use simpop::knn::{build_index, query_knn};
use simpop::pipeline::{run_pipeline_upto, sensitivity_sweep, RunConfig, StageName};

#[derive(Parser)]
#[command(name = "simpop", version, about = "Artificial populations and design-based small area estimation studies")]
struct Cli {
    #[command(subcommand)]
    command: Commands,

    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Commands {
    /// Write a synthetic auxiliary/survey/truth fixture to a directory
    Fixture {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Small layout (4k units, 100 clusters) instead of the standard
        /// 100k-unit one
        #[arg(long)]
        desk: bool,
    },
    /// Run the pipeline through population generation only
    Generate(StageArgs),
    /// Run the pipeline through replicate sampling
    Sample(StageArgs),
    /// Run the pipeline through estimation
    Estimate(StageArgs),
    /// Run the pipeline through metric evaluation
    Evaluate(StageArgs),
    /// Run the pipeline through population diagnostics
    Diagnose(StageArgs),
    /// Run every stage and print the summary
    Pipeline(StageArgs),
    /// Compare imputation methods and pool sizes on the SD-agreement
    /// diagnostic
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Uniform-kNN pool sizes, comma separated
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,50,100")]
        ks: Vec<usize>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Time exact kNN queries against a random donor cloud
    BenchKnn {
        #[arg(long, default_value_t = 100_000)]
        donors: usize,
        #[arg(long, default_value_t = 100_000)]
        queries: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        dims: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replace every seed in the config (fixture, imputation, design)
    #[arg(long)]
    seed_override: Option<u64>,
    /// Keep per-recipient donor pools for usage diagnostics
    #[arg(long)]
    retain_neighbor_lists: bool,
}

fn load_config(args: &StageArgs) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed_override {
        cfg.imputation.master_seed = seed;
        cfg.design.master_seed = seed.wrapping_add(1);
        if let Some(f) = cfg.fixture.as_mut() {
            f.seed = seed.wrapping_add(2);
        }
    }
    if args.retain_neighbor_lists {
        cfg.imputation.retain_neighbor_pools = true;
    }
    Ok(cfg)
}

fn run_stage(args: &StageArgs, upto: StageName) -> Result<(), Error> {
    let cfg = load_config(args)?;
    let summary = run_pipeline_upto(&cfg, &args.out, upto)?;
    if let Some(summary) = summary {
        println!(
            "{}",
            serde_json::to_string_pretty(&summary).expect("serializable summary")
        );
    } else {
        println!("ok: wrote stages through {upto:?} into {}", args.out.display());
    }
    Ok(())
}

fn bench_knn(donors: usize, queries: usize, k: usize, dims: usize, seed: u64) -> Result<(), Error> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<f64> = (0..donors * dims).map(|_| rng.gen::<f64>()).collect();
    let ids: Vec<i64> = (1..=donors as i64).collect();
    let probes: Vec<f64> = (0..queries * dims).map(|_| rng.gen::<f64>()).collect();

    let t0 = Instant::now();
    let index = build_index(points, dims, ids, k)?;
    let build_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let mut sink = 0usize;
    for q in probes.chunks_exact(dims) {
        sink += query_knn(&index, q, k)?.ranked.len();
    }
    let query_s = t0.elapsed().as_secs_f64();
    assert_eq!(sink, queries * k);

    println!("donors={donors} queries={queries} k={k} dims={dims}");
    println!("build: {build_s:.3}s");
    println!(
        "query: {query_s:.3}s  ({:.0} queries/s)",
        queries as f64 / query_s
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Commands::Fixture { seed, out, desk } => {
            let spec = if desk {
                FixtureSpec::desk(seed)
            } else {
                FixtureSpec::standard(seed)
            };
            let fix = make_fixture(&spec)?;
            emit_fixture(&fix, &out)?;
            println!(
                "ok: {} units, {} survey rows -> {}",
                fix.aux.n_rows(),
                fix.survey.n_rows(),
                out.display()
            );
            Ok(())
        }
        Commands::Generate(args) => run_stage(&args, StageName::Generate),
        Commands::Sample(args) => run_stage(&args, StageName::Sample),
        Commands::Estimate(args) => run_stage(&args, StageName::Estimate),
        Commands::Evaluate(args) => run_stage(&args, StageName::Evaluate),
        Commands::Diagnose(args) | Commands::Pipeline(args) => {
            run_stage(&args, StageName::Diagnose)
        }
        Commands::Sweep {
            config,
            out,
            ks,
            seed_override,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed_override {
                cfg.imputation.master_seed = seed;
                if let Some(f) = cfg.fixture.as_mut() {
                    f.seed = seed.wrapping_add(2);
                }
            }
            let rows = sensitivity_sweep(&cfg, &ks, &out)?;
            for r in &rows {
                println!(
                    "{:<12} k={:<4} sd_correlation={}",
                    r.method,
                    r.k,
                    r.sd_correlation
                        .map(|c| format!("{c:.4}"))
                        .unwrap_or_else(|| "NA".into())
                );
            }
            Ok(())
        }
        Commands::BenchKnn {
            donors,
            queries,
            k,
            dims,
            seed,
        } => bench_knn(donors, queries, k, dims, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::SchemaRejected(..) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
