//! Batch front door for the sddejr toolkit: seeded, reproducible runs of
//! the simulation, Picard, duality, oracle and calculus-check pipelines,
//! with machine-readable outputs that embed the config digest and tool
//! version.
//!
//! Exit codes: 0 success, 2 validation failure, 3 numerical failure,
//! 4 resource limit.

mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use config::{load_config, ScenarioConfig};
use sddejr::checks::{
    ito_residual_ensemble, product_rule_residual_ensemble, write_residual_csv, ResidualStats,
    TestFunction,
};
use sddejr::duality::evaluate_duality;
use sddejr::fixedpoint::picard_solve;
use sddejr::noise::{NoiseBundle, TimeGrid};
use sddejr::oracle::{build_tree, duality_gap};
use sddejr::sdde::{simulate_sdde, validate_assumptions, write_path_csv};
use sddejr::{Error, Result};

#[derive(Parser)]
#[command(name = "sddejr", version, about = "Regime-switching jump-diffusion toolkit")]
struct Cli {
    /// Scenario configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Override the config's path count.
    #[arg(long, global = true)]
    paths: Option<u64>,
    /// Override the config's grid step count.
    #[arg(long = "grid-k", global = true)]
    grid_k: Option<usize>,
    /// Worker thread count (default: one per CPU).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate forward paths and write them as CSV.
    Simulate,
    /// Run Picard iteration and write convergence diagnostics.
    Picard,
    /// Monte Carlo evaluation of the duality formula.
    Duality,
    /// Exhaustive-tree forward/backward duality gap.
    OracleGap,
    /// Ito-formula residual convergence table.
    CheckIto,
    /// Product-rule residual convergence table.
    CheckProduct,
    /// Validate the configuration and model assumptions.
    Validate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
            eprintln!("error: cannot configure {workers} workers: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidSpec(_) | Error::InvalidArgument(_) | Error::DtTooLarge(_) => 2,
        Error::NumericalBlowup { .. } => 3,
        Error::ResourceLimit(_) => 4,
    }
}

/// Everything shared by the subcommands: validated config, overrides
/// applied, and traceability metadata.
struct Context {
    config: ScenarioConfig,
    digest: String,
    seed: u64,
    n_paths: u64,
    grid: TimeGrid,
    out: PathBuf,
}

fn build_context(cli: &Cli) -> Result<Context> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidSpec("--config <path> is required".into()))?;
    let (mut config, raw) = load_config(path)?;
    let digest = format!("{:x}", Sha256::digest(&raw));
    if let Some(k) = cli.grid_k {
        config.grid.steps = k;
    }
    let seed = cli.seed.unwrap_or(config.run.seed);
    let n_paths = cli.paths.unwrap_or(config.run.n_paths);
    let grid = config.grid()?;
    config.chain_spec()?;
    config.jump_spec()?;
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| Error::InvalidSpec(format!("cannot create {}: {e}", cli.out.display())))?;
    Ok(Context { config, digest, seed, n_paths, grid, out: cli.out.clone() })
}

impl Context {
    fn preamble(&self) -> Vec<String> {
        vec![
            format!("config_digest: {}", self.digest),
            format!("version: {}", sddejr::VERSION),
            format!("seed: {}", self.seed),
        ]
    }

    fn out_file(&self, suffix: &str) -> PathBuf {
        self.out.join(format!("{}-{suffix}", self.config.output.prefix))
    }

    /// Serializes a result with the traceability fields merged in, using
    /// sorted keys so byte output is deterministic.
    fn write_json<T: serde::Serialize>(&self, suffix: &str, value: &T) -> Result<()> {
        let mut v = serde_json::to_value(value)
            .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument("expected a JSON object".into()))?;
        obj.insert("config_digest".into(), self.digest.clone().into());
        obj.insert("version".into(), sddejr::VERSION.into());
        let path = self.out_file(suffix);
        let text = serde_json::to_string_pretty(&v)
            .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
        std::fs::write(&path, text + "\n")
            .map_err(|e| Error::InvalidSpec(format!("cannot write {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = build_context(cli)?;
    match cli.command {
        Command::Validate => cmd_validate(&ctx),
        Command::Simulate => cmd_simulate(&ctx),
        Command::Picard => cmd_picard(&ctx),
        Command::Duality => cmd_duality(&ctx),
        Command::OracleGap => cmd_oracle_gap(&ctx),
        Command::CheckIto => cmd_residuals(&ctx, false),
        Command::CheckProduct => cmd_residuals(&ctx, true),
    }
}

fn cmd_validate(ctx: &Context) -> Result<()> {
    let chain = ctx.config.chain_spec()?;
    let jumps = ctx.config.jump_spec()?;
    let grid = ctx.grid;
    let delays = ctx.config.delays()?;
    let assumptions = validate_assumptions(&delays, &grid)?;

    if let Some(model) = &ctx.config.model {
        let coeffs = model.coefficients(chain.num_states())?;
        coeffs.spot_check_origin(&chain, &jumps, &grid)?;
        coeffs.spot_check_lipschitz(&chain, &jumps, &grid, 200, ctx.seed)?;
        ctx.config.initial_path()?;
    }
    if let Some(duality) = &ctx.config.duality {
        let data = duality.linear_data(chain.num_states())?;
        data.spot_check_bound(&chain, &jumps, &grid)?;
        duality.terminal(chain.num_states())?;
    }

    #[derive(serde::Serialize)]
    struct ValidateReport {
        status: &'static str,
        assumptions: sddejr::sdde::AssumptionReport,
        seed: u64,
    }
    ctx.write_json(
        "validate.json",
        &ValidateReport { status: "ok", assumptions, seed: ctx.seed },
    )
}

fn cmd_simulate(ctx: &Context) -> Result<()> {
    let chain = ctx.config.chain_spec()?;
    let jumps = ctx.config.jump_spec()?;
    let grid = ctx.grid;
    let delays = ctx.config.delays()?;
    let model = ctx.config.model()?;
    let coeffs = model.coefficients(chain.num_states())?;
    let x0 = ctx.config.initial_path()?;
    let initial = ctx.config.chain.initial_state;

    for i in 0..ctx.n_paths {
        let noise = NoiseBundle::sample(&chain, &jumps, &grid, initial, ctx.seed, i)?;
        let path = simulate_sdde(&coeffs, &x0, &delays, &grid, &jumps, &chain, &noise)?;
        let file = ctx.out_file(&format!("path-{i:04}.csv"));
        let mut preamble = ctx.preamble();
        preamble.push(format!("path_index: {i}"));
        let mut out = Vec::new();
        write_path_csv(&path, &noise.chain, &preamble, &mut out)
            .map_err(|e| Error::InvalidSpec(format!("cannot serialize path: {e}")))?;
        std::fs::write(&file, out)
            .map_err(|e| Error::InvalidSpec(format!("cannot write {}: {e}", file.display())))?;
    }
    println!("wrote {} path files under {}", ctx.n_paths, ctx.out.display());
    Ok(())
}

fn cmd_picard(ctx: &Context) -> Result<()> {
    let chain = ctx.config.chain_spec()?;
    let jumps = ctx.config.jump_spec()?;
    let grid = ctx.grid;
    let delays = ctx.config.delays()?;
    let model = ctx.config.model()?;
    let coeffs = model.coefficients(chain.num_states())?;
    let x0 = ctx.config.initial_path()?;
    let initial = ctx.config.chain.initial_state;

    let noise: Vec<NoiseBundle> = (0..ctx.n_paths)
        .map(|i| NoiseBundle::sample(&chain, &jumps, &grid, initial, ctx.seed, i))
        .collect::<Result<_>>()?;
    let (_, diagnostics) = picard_solve(
        &coeffs,
        &x0,
        &delays,
        &grid,
        &jumps,
        &chain,
        &noise,
        ctx.config.tol(),
        ctx.config.max_iter(),
    )?;
    ctx.write_json("picard.json", &diagnostics)
}

fn cmd_duality(ctx: &Context) -> Result<()> {
    let chain = ctx.config.chain_spec()?;
    let jumps = ctx.config.jump_spec()?;
    let duality = ctx.config.duality()?;
    let data = duality.linear_data(chain.num_states())?;
    data.spot_check_bound(&chain, &jumps, &ctx.grid)?;
    let terminal = duality.terminal(chain.num_states())?;
    let estimate = evaluate_duality(
        &data,
        &terminal,
        &chain,
        &jumps,
        &ctx.grid,
        ctx.config.chain.initial_state,
        ctx.n_paths,
        ctx.seed,
    )?;
    ctx.write_json("duality.json", &estimate)
}

fn cmd_oracle_gap(ctx: &Context) -> Result<()> {
    let chain = ctx.config.chain_spec()?;
    let jumps = ctx.config.jump_spec()?;
    let duality = ctx.config.duality()?;
    let data = duality.linear_data(chain.num_states())?;
    let terminal = duality.terminal(chain.num_states())?;
    let tree = build_tree(&chain, &jumps, &ctx.grid, ctx.config.chain.initial_state)?;
    let report = duality_gap(&tree, &data, &terminal)?;
    ctx.write_json("gap.json", &report)
}

/// Residual convergence study over the configured grid and two dyadic
/// refinements.
fn cmd_residuals(ctx: &Context, product: bool) -> Result<()> {
    let chain = ctx.config.chain_spec()?;
    let jumps = ctx.config.jump_spec()?;
    let delays = ctx.config.delays()?;
    let model = ctx.config.model()?;
    let coeffs = model.coefficients(chain.num_states())?;
    let initial = ctx.config.chain.initial_state;
    let phi = TestFunction::square();

    let mut stats: Vec<ResidualStats> = Vec::new();
    for level in 0..3u32 {
        let refine = 1usize << level;
        let grid = TimeGrid::new(
            ctx.grid.t0(),
            ctx.grid.t_end(),
            ctx.grid.steps() * refine,
            ctx.grid.delay_steps() * refine,
        )?;
        let x0 = sddejr::sdde::InitialPath::constant(&grid, model.x0)?;
        let s = if product {
            product_rule_residual_ensemble(
                &coeffs, &x0, &coeffs, &x0, &delays, &grid, &jumps, &chain, initial, ctx.n_paths,
                ctx.seed,
            )?
        } else {
            ito_residual_ensemble(
                &phi, &coeffs, &x0, &delays, &grid, &jumps, &chain, initial, ctx.n_paths, ctx.seed,
            )?
        };
        stats.push(s);
    }
    let file = ctx.out_file(if product { "product.csv" } else { "ito.csv" });
    let mut buf = Vec::new();
    write_residual_csv(&stats, &ctx.preamble(), &mut buf)
        .map_err(|e| Error::InvalidSpec(format!("cannot serialize residuals: {e}")))?;
    let mut f = std::fs::File::create(&file)
        .map_err(|e| Error::InvalidSpec(format!("cannot create {}: {e}", file.display())))?;
    f.write_all(&buf)
        .map_err(|e| Error::InvalidSpec(format!("cannot write {}: {e}", file.display())))?;
    println!("wrote {}", file.display());
    Ok(())
}
