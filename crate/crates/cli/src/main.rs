use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use certiquad_core::bounds::check_capability;
use certiquad_core::heat::{global_verify, local_verify, IterationRecord};
use certiquad_core::quadrature::{certify_streaming, NetworkDerivative};
use certiquad_core::{Error, MultiIndex, Network, NormCertificate, ProblemConfig, UniformGrid, Verdict, VerificationOutcome};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tempfile::NamedTempFile;

#[derive(Parser)]
#[command(name = "certiquad", version, about = "Certified norm bounds and heat-equation verification for MLPs")]
struct Cli {
    /// Worker threads for box evaluation.
    #[arg(long, env = "CERTIQUAD_WORKERS", global = true)]
    workers: Option<usize>,

    /// Report `wall_time_ms` as 0 so reports are byte-identical across runs.
    #[arg(long, global = true)]
    no_timing: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certified estimate of |d^alpha f|_p^p on a box grid.
    Norm(NormArgs),
    /// Local verification of one network against a heat problem.
    HeatVerify(HeatArgs),
    /// Global verification: first certifying network among several.
    HeatCertify(HeatArgs),
    /// Describe a network and, optionally, a problem file.
    Info(InfoArgs),
}

#[derive(Args)]
struct NormArgs {
    #[arg(long, required = true, num_args = 1)]
    weights: PathBuf,
    #[arg(long, default_value_t = 2)]
    p: u32,
    /// Comma-separated exponents; defaults to the zero multi-index.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<u32>>,
    #[arg(long)]
    eps: f64,
    /// Comma-separated lower corner; defaults to 0 on every axis.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    lower: Option<Vec<f64>>,
    /// Comma-separated upper corner; defaults to 1 on every axis.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    upper: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-box CSV: center coordinates, local I, local R.
    #[arg(long)]
    boxes_csv: Option<PathBuf>,
}

#[derive(Args)]
struct HeatArgs {
    #[arg(long, required = true, num_args = 1..)]
    weights: Vec<PathBuf>,
    #[arg(long)]
    problem: PathBuf,
    /// Overrides `eps0` from the problem file.
    #[arg(long)]
    eps0: Option<f64>,
    /// Initial grid spacing; overrides `eps_init` from the problem file.
    #[arg(long)]
    eps: Option<f64>,
    /// Overrides `max_refinements` from the problem file.
    #[arg(long)]
    max_refine: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long, required = true, num_args = 1..)]
    weights: Vec<PathBuf>,
    #[arg(long)]
    problem: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_capability() => 3,
            _ => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Usage(s) => f.write_str(s),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("certiquad: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<u8> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure::Usage("--workers must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Failure::Usage(e.to_string()))?;
    let timing = !cli.no_timing;
    pool.install(|| match cli.command {
        Command::Norm(a) => cmd_norm(a, timing),
        Command::HeatVerify(a) => cmd_heat_verify(a, timing),
        Command::HeatCertify(a) => cmd_heat_certify(a, timing),
        Command::Info(a) => cmd_info(a),
    })
}

fn load_net(path: &Path) -> CliResult<Network> {
    Network::from_path(path).map_err(|e| match e {
        Error::Io(io) => Failure::Usage(format!("{}: {io}", path.display())),
        other => Failure::Core(other),
    })
}

/// Writes `contents` next to `path` and renames it into place.
fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn to_json(value: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("json values serialize");
    s.push('\n');
    s.into_bytes()
}

fn corner(values: Option<Vec<f64>>, dim: usize, default: f64, flag: &str) -> CliResult<Vec<f64>> {
    match values {
        None => Ok(vec![default; dim]),
        Some(v) if v.len() == dim => Ok(v),
        Some(v) => Err(Failure::Usage(format!("{flag} has {} entries, network input_dim is {dim}", v.len()))),
    }
}

fn cmd_norm(a: NormArgs, timing: bool) -> CliResult<u8> {
    let net = load_net(&a.weights)?;
    let d = net.input_dim();
    let alpha = match a.alpha {
        None => MultiIndex::zero(d),
        Some(v) if v.len() == d => MultiIndex::new(v),
        Some(v) => {
            return Err(Failure::Usage(format!("--alpha has {} entries, network input_dim is {d}", v.len())));
        }
    };
    let lower = corner(a.lower, d, 0.0, "--lower")?;
    let upper = corner(a.upper, d, 1.0, "--upper")?;
    let grid = UniformGrid::new(&lower, &upper, a.eps)?;
    let integrand = NetworkDerivative::new(&net, alpha.clone())?;

    let mut csv = match &a.boxes_csv {
        Some(path) => {
            let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let tmp = NamedTempFile::new_in(dir)?;
            let mut w = BufWriter::new(tmp);
            let mut header: Vec<String> = (0..d).map(|i| format!("y{i}")).collect();
            header.push("I".into());
            header.push("R".into());
            writeln!(w, "{}", header.join(","))?;
            Some((w, path.clone()))
        }
        None => None,
    };
    let mut csv_error: Option<std::io::Error> = None;
    let mut cert = certify_streaming(&integrand, &grid, a.p, alpha, |cell, _, contrib| {
        if let (Some((w, _)), None) = (csv.as_mut(), csv_error.as_ref()) {
            let mut line = String::new();
            for c in &cell.center {
                line.push_str(&format!("{c:.17e},"));
            }
            line.push_str(&format!("{:.17e},{:.17e}", contrib.estimate, contrib.error));
            if let Err(e) = writeln!(w, "{line}") {
                csv_error = Some(e);
            }
        }
    })?;
    if let Some(e) = csv_error {
        return Err(e.into());
    }
    if !timing {
        cert.wall_time_ms = 0;
    }
    if let Some((w, path)) = csv {
        let tmp = w.into_inner().map_err(|e| e.into_error())?;
        tmp.as_file().sync_all()?;
        tmp.persist(&path).map_err(|e| e.error)?;
    }
    if let Some(out) = &a.out {
        write_atomic(out, &to_json(&serde_json::to_value(&cert).map_err(Error::from)?))?;
    }
    println!("{}", norm_header());
    println!("{}", norm_row(&cert));
    Ok(0)
}

fn norm_header() -> String {
    format!(
        "{:>3} {:>12} {:>14} {:>14} {:>14} {:>14}",
        "p", "eps", "I_p", "R_p", "lower", "upper"
    )
}

fn norm_row(c: &NormCertificate) -> String {
    format!(
        "{:>3} {:>12.4e} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e}",
        c.p, c.eps, c.estimate, c.error_bound, c.lower, c.upper
    )
}

fn history_table(history: &[IterationRecord]) -> String {
    let mut s = format!(
        "{:>12} {:>14} {:>14} {:>14} {:>14} {:>14}\n",
        "eps", "I_pde", "R_pde", "I_0", "R_0", "bound"
    );
    for r in history {
        s.push_str(&format!(
            "{:>12.4e} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e}\n",
            r.eps, r.i_pde, r.r_pde, r.i_0, r.r_0, r.bound
        ));
    }
    s
}

struct HeatSetup {
    nets: Vec<Network>,
    problem: certiquad_core::HeatProblem,
    eps0: f64,
    eps_init: f64,
    max_refine: usize,
}

fn heat_setup(a: &HeatArgs) -> CliResult<HeatSetup> {
    let mut config = ProblemConfig::from_path(&a.problem).map_err(|e| match e {
        Error::Io(io) => Failure::Usage(format!("{}: {io}", a.problem.display())),
        other => Failure::Core(other),
    })?;
    if let Some(eps0) = a.eps0 {
        config.eps0 = eps0;
    }
    if let Some(eps) = a.eps {
        config.eps_init = Some(eps);
    }
    if let Some(m) = a.max_refine {
        config.max_refinements = m;
    }
    let problem = config.problem()?;
    let eps_init = config.resolved_eps_init()?;
    let nets = a.weights.iter().map(|p| load_net(p)).collect::<CliResult<Vec<_>>>()?;
    Ok(HeatSetup { nets, problem, eps0: config.eps0, eps_init, max_refine: config.max_refinements })
}

fn strip_timing(outcome: &mut VerificationOutcome) {
    outcome.certificates.pde.wall_time_ms = 0;
    outcome.certificates.init.wall_time_ms = 0;
}

fn verdict_code(v: Verdict) -> u8 {
    match v {
        Verdict::Certified => 0,
        Verdict::NotCertified | Verdict::BudgetExhausted => 1,
    }
}

fn cmd_heat_verify(a: HeatArgs, timing: bool) -> CliResult<u8> {
    if a.weights.len() != 1 {
        return Err(Failure::Usage("heat-verify takes exactly one --weights file".into()));
    }
    let s = heat_setup(&a)?;
    let mut outcome = local_verify(&s.nets[0], &s.problem, s.eps0, s.eps_init, s.max_refine)?;
    if !timing {
        strip_timing(&mut outcome);
    }
    if let Some(out) = &a.out {
        write_atomic(out, &to_json(&serde_json::to_value(&outcome).map_err(Error::from)?))?;
    }
    print!("{}", history_table(&outcome.history));
    println!("verdict {:?}  bound {:.6e}  eps0 {:.4e}", outcome.verdict, outcome.certified_bound, s.eps0);
    Ok(verdict_code(outcome.verdict))
}

fn cmd_heat_certify(a: HeatArgs, timing: bool) -> CliResult<u8> {
    let s = heat_setup(&a)?;
    let (index, mut outcome) = global_verify(&s.nets, &s.problem, s.eps0, s.eps_init, s.max_refine)?;
    if !timing {
        strip_timing(&mut outcome);
    }
    if let Some(out) = &a.out {
        let report = json!({
            "index": index,
            "weights": a.weights[index].display().to_string(),
            "outcome": outcome,
        });
        write_atomic(out, &to_json(&report))?;
    }
    print!("{}", history_table(&outcome.history));
    println!(
        "index {index}  verdict {:?}  bound {:.6e}  eps0 {:.4e}",
        outcome.verdict, outcome.certified_bound, s.eps0
    );
    Ok(verdict_code(outcome.verdict))
}

fn cmd_info(a: InfoArgs) -> CliResult<u8> {
    for path in &a.weights {
        let net = load_net(path)?;
        let widths: Vec<String> = net.hidden_widths().iter().map(|w| w.to_string()).collect();
        let params: usize = net.layers().iter().map(|l| l.in_dim() * l.out_dim() + l.out_dim()).sum();
        let max_order = (1..=3).take_while(|&m| check_capability(&net, m).is_ok()).last().unwrap_or(0);
        println!("{}", path.display());
        println!("  input_dim        {}", net.input_dim());
        println!("  activation       {:?}", net.activation());
        println!("  hidden widths    [{}]", widths.join(", "));
        println!("  parameters       {params}");
        println!("  bounded orders   0..={max_order}");
    }
    if let Some(path) = &a.problem {
        let config = ProblemConfig::from_path(path)?;
        let problem = config.problem()?;
        println!("{}", path.display());
        println!("  d                {}", problem.d);
        println!("  kappa            {:.6e}", problem.kappa);
        println!("  T                {}", problem.t_final);
        println!("  initial          {:?}", problem.initial);
        println!("  eps0             {:.4e}", config.eps0);
        println!("  eps_init         {:.4e}", config.resolved_eps_init()?);
        println!("  max_refinements  {}", config.max_refinements);
        println!("  energy constant  {:.6e}", problem.energy_constant());
    }
    Ok(0)
}
