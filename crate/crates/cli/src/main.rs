use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use tfqkd_core::link::{connect_socket, AbortCode, LinkError, SocketListener};
use tfqkd_core::rates::{calibrate, expected_rates, sweep_gate_width, Anchors};
use tfqkd_core::rng::RNG_ALGORITHM;
use tfqkd_core::session::{run_alice, run_bob, run_inprocess, SessionError, SessionReport};
use tfqkd_core::SystemConfig;

const CSV_HEADER: &str = "gate_width_ns,sifted_rate_bps,qber,secret_rate_bps";
const MIN_MC_PULSES: u64 = 10_000;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_WRITE: u8 = 3;
const EXIT_CONFIRMATION: u8 = 4;
const EXIT_DIGEST: u8 = 5;
const EXIT_LINK_DOWN: u8 = 6;
const EXIT_QBER_ABORT: u8 = 7;

/// Time-frequency QKD link simulator.
///
/// Exit codes: 0 success, 1 other session failure, 2 invalid configuration
/// or arguments, 3 output write failure, 4 key confirmation failure, 5
/// configuration digest mismatch, 6 link down, 7 QBER above the abort
/// threshold.
#[derive(Parser)]
#[command(name = "tfqkd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expected rates over a gate-width grid, as CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Gate widths in ns as start:stop:step.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full Monte Carlo session with both parties in this process.
    Mc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pulses: u64,
        /// Report file; the final key is included as hex.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run Alice, waiting for one Bob on the given address.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        listen: String,
    },
    /// Run Bob against a serving Alice.
    Connect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        peer: String,
        /// Seconds to keep retrying a refused connection.
        #[arg(long, default_value_t = 10.0)]
        timeout: f64,
    },
    /// Fit detector efficiency and noise rate to the reference anchors.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Also write the calibrated configuration here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Sweep { config, grid, out } => sweep(&config, &grid, &out),
        Command::Mc { config, pulses, out } => montecarlo(&config, pulses, &out),
        Command::Serve { config, listen } => serve(&config, &listen),
        Command::Connect { config, peer, timeout } => connect(&config, &peer, timeout),
        Command::Calibrate { config, out } => run_calibration(&config, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("tfqkd: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: &Path) -> Result<SystemConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot read config {}: {e}", path.display())))?;
    SystemConfig::parse(&text).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

fn write_output(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::new(EXIT_WRITE, format!("cannot write {}: {e}", path.display())))
}

/// Parses `start:stop:step` (ns) into grid points in ns.
fn parse_grid(text: &str) -> Result<Vec<f64>, Failure> {
    let bad = |why: &str| Failure::new(EXIT_CONFIG, format!("invalid grid `{text}`: {why}"));
    let parts: Vec<&str> = text.split(':').collect();
    let [start, stop, step] = parts[..] else {
        return Err(bad("expected start:stop:step"));
    };
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("not a number"));
    let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
    if !(start > 0.0 && start.is_finite() && stop.is_finite()) {
        return Err(bad("start must be a positive gate width"));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(bad("step must be positive"));
    }
    if stop < start {
        return Err(bad("stop lies below start"));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    if n > 10_000_000 {
        return Err(bad("too many points"));
    }
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

/// C-style `%.{digits}g`.
fn format_g(v: f64, digits: usize) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let strip = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= digits as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip(mantissa), exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        strip(&format!("{v:.decimals$}"))
    }
}

fn sweep(config: &Path, grid: &str, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let points = parse_grid(grid)?;
    let widths: Vec<f64> = points.iter().map(|ns| ns * 1e-9).collect();
    let reports = sweep_gate_width(&cfg, &widths).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for (ns, (_, r)) in points.iter().zip(&reports) {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            format_g(*ns, 9),
            format_g(r.sifted_rate, 9),
            format_g(r.qber, 9),
            format_g(r.secret_rate, 9)
        );
    }
    write_output(out, &csv)?;
    println!("wrote {} rows to {}", reports.len(), out.display());
    Ok(())
}

fn session_failure(e: &SessionError) -> Failure {
    let code = match e {
        SessionError::Link(LinkError::LinkDown(_)) => EXIT_LINK_DOWN,
        _ => match e.abort_code() {
            Some(AbortCode::ConfirmationFailed) => EXIT_CONFIRMATION,
            Some(AbortCode::DigestMismatch) => EXIT_DIGEST,
            Some(AbortCode::QberTooHigh) => EXIT_QBER_ABORT,
            _ => EXIT_FAILURE,
        },
    };
    Failure::new(code, format!("session failed: {e}"))
}

fn report_text(mode: &str, cfg: &SystemConfig, r: &SessionReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode = {mode}");
    let _ = writeln!(s, "role = {:?}", r.role);
    let _ = writeln!(s, "rng = {}", r.rng_algorithm);
    let _ = writeln!(s, "seed = {}", r.seed);
    let _ = writeln!(s, "pulses = {}", r.pulses);
    let _ = writeln!(s, "detections = {}", r.detections);
    let _ = writeln!(s, "sifted_bits = {}", r.sifted_bits);
    if let Some(errors) = r.sifted_errors {
        let _ = writeln!(s, "sifted_errors = {errors}");
    }
    if let Some(q) = r.true_qber() {
        let _ = writeln!(s, "qber_true = {}", format_g(q, 9));
    }
    if let Ok(model) = expected_rates(cfg) {
        let _ = writeln!(s, "qber_model = {}", format_g(model.qber, 9));
    }
    let _ = writeln!(s, "qber_sampled_bits = {}", r.qber.sampled);
    let _ = writeln!(s, "qber_mismatches = {}", r.qber.mismatches);
    let _ = writeln!(s, "qber_estimate = {}", format_g(r.qber.estimate, 9));
    let _ = writeln!(s, "reconciled_bits = {}", r.reconciled_bits);
    let _ = writeln!(s, "ec_leakage_bits = {}", r.ec_leakage);
    let _ = writeln!(s, "final_key_bits = {}", r.final_key.len());
    let _ = writeln!(s, "confirmed = {}", r.confirmed);
    let _ = writeln!(s, "final_key_hex = {}", r.final_key.to_hex());
    s
}

fn montecarlo(config: &Path, pulses: u64, out: &Path) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if pulses < MIN_MC_PULSES {
        return Err(Failure::new(EXIT_CONFIG, format!("--pulses must be at least {MIN_MC_PULSES}")));
    }
    cfg.session.pulses = pulses;
    let run = run_inprocess(&cfg);
    match (&run.alice, &run.bob) {
        (Ok(_), Ok(bob)) => {
            let text = report_text("montecarlo", &cfg, bob);
            write_output(out, &text)?;
            print!("{text}");
            Ok(())
        }
        (Err(e), _) | (_, Err(e)) => {
            let f = session_failure(e);
            let text = format!(
                "mode = montecarlo\nrng = {RNG_ALGORITHM}\nseed = {}\npulses = {pulses}\nconfirmed = false\nerror = {e}\n",
                cfg.seed
            );
            write_output(out, &text)?;
            Err(f)
        }
    }
}

fn serve(config: &Path, listen: &str) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let listener = SocketListener::bind(listen).map_err(|e| Failure::new(EXIT_LINK_DOWN, e.to_string()))?;
    let addr = listener.local_addr().map_err(|e| Failure::new(EXIT_LINK_DOWN, e.to_string()))?;
    println!("listening on {addr}");
    let _ = std::io::stdout().flush();
    let mut link = listener.accept().map_err(|e| Failure::new(EXIT_LINK_DOWN, e.to_string()))?;
    let report = run_alice(&cfg, &mut link).map_err(|e| session_failure(&e))?;
    print!("{}", report_text("serve", &cfg, &report));
    Ok(())
}

fn connect(config: &Path, peer: &str, timeout: f64) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    if !(timeout >= 0.0 && timeout.is_finite()) {
        return Err(Failure::new(EXIT_CONFIG, "--timeout must be a non-negative number of seconds"));
    }
    let mut link = connect_socket(peer, Duration::from_secs_f64(timeout))
        .map_err(|e| Failure::new(EXIT_LINK_DOWN, format!("cannot reach {peer}: {e}")))?;
    let report = run_bob(&cfg, &mut link).map_err(|e| session_failure(&e))?;
    print!("{}", report_text("connect", &cfg, &report));
    Ok(())
}

fn run_calibration(config: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let anchors = Anchors::reference();
    let fit = calibrate(&cfg, &anchors).map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    println!("efficiency = {}", format_g(fit.efficiency, 9));
    println!("noise_rate_cps = {}", format_g(fit.noise_rate, 9));
    println!("residual = {}", format_g(fit.residual, 9));
    println!(
        "secret_rate_bps_at_{}ns = {}",
        format_g(anchors.gate_width * 1e9, 9),
        format_g(fit.achieved.secret_rate, 9)
    );
    println!("qber_at_anchor = {}", format_g(fit.achieved.qber, 9));
    println!("min_qber = {}", format_g(fit.achieved.min_qber, 9));
    if let Some(path) = out {
        write_output(path, &fit.config.to_config_string())?;
    }
    Ok(())
}
