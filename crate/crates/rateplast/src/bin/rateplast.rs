//! Command-line front end: `run` drives a configured scenario, `mp` the
//! single material point, `converge` the nested refinement study.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rateplast::constitutive::{RegularizationConfig, RegularizationVariant};
use rateplast::material_point::{ideal_elastoplastic_oracle, integrate_rate_law, StrainPath};
use rateplast::scenario::{bump, convergence_study, run, ConvergenceConfig, ScenarioConfig, Scheme};

#[derive(Parser)]
#[command(name = "rateplast", version, about = "Rate-type elastoplasticity simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (1D bar or 2D plate with an elliptical hole).
    Run(RunArgs),
    /// Integrate a single material point through a bump strain cycle and
    /// compare it against the closed-form elastic/perfectly-plastic oracle.
    Mp(MpArgs),
    /// Nested space-time refinement study on the 1D bar.
    Converge(ConvergeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Sqrt,
    Tanh,
    Atan,
}

impl From<VariantArg> for RegularizationVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Sqrt => RegularizationVariant::Sqrt,
            VariantArg::Tanh => RegularizationVariant::Tanh,
            VariantArg::Atan => RegularizationVariant::Atan,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Implicit,
    Semi,
}

#[derive(Args)]
struct RunArgs {
    /// TOML scenario configuration.
    #[arg(long)]
    config: PathBuf,
    /// Abort when tau/h violates the admissibility bound.
    #[arg(long)]
    strict: bool,
    /// Override the configured time-stepping scheme.
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    /// Override the configured Heaviside regularization variant.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Override the configured gate width epsilon.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MpArgs {
    #[arg(long, value_enum, default_value = "sqrt")]
    variant: VariantArg,
    /// Gate width (squared-stress units).
    #[arg(long, default_value_t = 10.0)]
    epsilon: f64,
    /// Loading-gate width; 0 keeps the sharp loading Heaviside.
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long, default_value_t = 1e4)]
    e_modulus: f64,
    /// Yield stress.
    #[arg(long, default_value_t = 80.0)]
    kappa: f64,
    /// Peak strain of the bump cycle.
    #[arg(long, default_value_t = 0.2)]
    amplitude: f64,
    /// Number of time steps over the unit cycle.
    #[arg(long, default_value_t = 10_000)]
    n_steps: usize,
    /// Directory for material_point.csv; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvergeArgs {
    /// TOML study configuration; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_run(args: RunArgs) -> rateplast::Result<()> {
    let mut cfg = ScenarioConfig::load(&args.config)?;
    if args.strict {
        cfg.strict = true;
    }
    if let Some(scheme) = args.scheme {
        cfg.scheme = match scheme {
            SchemeArg::Implicit => Scheme::Implicit,
            SchemeArg::Semi => Scheme::SemiImplicit,
        };
    }
    if let Some(variant) = args.variant {
        cfg.regularization.variant = variant.into();
    }
    if let Some(epsilon) = args.epsilon {
        cfg.regularization.epsilon = epsilon;
    }
    if let Some(out) = args.out {
        cfg.output.dir = Some(out.to_string_lossy().into_owned());
    }
    cfg.validate()?;
    let summary = run(&cfg)?;
    for w in &summary.mesh_warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{} on {} cells / {} vertices ({} mechanical dofs), {} steps of tau = {}",
        summary.scenario, summary.n_cells, summary.n_vertices, summary.mech_dofs,
        summary.n_steps, summary.tau
    );
    println!(
        "tau/h = {:.3e} against bound {:.3e} ({})",
        summary.tau_h.ratio,
        summary.tau_h.bound,
        if summary.tau_h.admissible { "admissible" } else { "violated" }
    );
    println!(
        "peak stress measure {:.6} at t = {}, final {:.6}",
        summary.peak_max_abs_stress, summary.t_at_peak, summary.final_max_abs_stress
    );
    println!(
        "energy balance: max residual ratio {:.3e}; stability lhs/rhs = {:.6e}/{:.6e}",
        summary.max_balance_ratio, summary.stability.lhs, summary.stability.rhs
    );
    println!(
        "temperature range [{:.3e}, {:.3e}], newton iterations {} (max {} per step)",
        summary.min_temperature, summary.max_temperature,
        summary.total_newton_iterations, summary.max_step_iterations
    );
    if let Some(dir) = &cfg.output.dir {
        println!("artifacts written to {dir}");
    }
    Ok(())
}

fn cmd_mp(args: MpArgs) -> rateplast::Result<()> {
    let cfg = RegularizationConfig {
        variant: args.variant.into(),
        epsilon: args.epsilon,
        eta: args.eta,
    };
    cfg.validate()?;
    let path = StrainPath::sample(|t| bump(t, args.amplitude), 0.0, 1.0, args.n_steps)?;
    let stress = integrate_rate_law(&path, args.e_modulus, args.kappa, &cfg, 0.0)?;
    let oracle = ideal_elastoplastic_oracle(&path, args.e_modulus, args.kappa, 0.0)?;
    let mut csv = String::from("t,strain,stress,oracle\n");
    let mut sup = 0.0_f64;
    for i in 0..path.len() {
        sup = sup.max((stress[i] - oracle[i]).abs());
        csv.push_str(&format!(
            "{},{},{},{}\n",
            path.times[i], path.strains[i], stress[i], oracle[i]
        ));
    }
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("material_point.csv"), csv)?;
            println!(
                "material_point.csv written to {} ({} samples)",
                dir.display(),
                path.len()
            );
        }
        None => print!("{csv}"),
    }
    eprintln!(
        "sup |stress - oracle| = {:.6} ({:.3}% of kappa = {})",
        sup,
        100.0 * sup / args.kappa,
        args.kappa
    );
    Ok(())
}

fn cmd_converge(args: ConvergeArgs) -> rateplast::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => ConvergenceConfig::load(path)?,
        None => ConvergenceConfig::default(),
    };
    if let Some(out) = args.out {
        cfg.out_dir = Some(out.to_string_lossy().into_owned());
    }
    let table = convergence_study(&cfg)?;
    print!("{}", table.csv());
    if let Some(dir) = &cfg.out_dir {
        println!("errors.csv and convergence_log.json written to {dir}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Mp(args) => cmd_mp(args),
        Command::Converge(args) => cmd_converge(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
