//! Command-line access to the loss library: evaluate losses described in
//! JSON, run the structural probes, and drive the end-to-end training
//! demo. Every subcommand prints one JSON envelope (schema-versioned,
//! full-precision floats) to stdout or `--out`, and exits with
//!
//! * `0` — ran and, where the command checks something, the check passed;
//! * `2` — ran, but the check failed;
//! * `1` — usage or runtime error.
//!
//! Given the same `--seed`, reports are byte-for-byte reproducible.

use clap::{Parser, Subcommand, ValueEnum};
use permloss::calculus::{self, ProbVector};
use permloss::calibration::{cc_inequality_probe, CcProbeConfig};
use permloss::fenchel_young::{fy_template_eval, FySpec, Negentropy};
use permloss::label_code::{rho_apply, LabelCode};
use permloss::link::{inverse_link, kkt_residual, link, SolverConfig};
use permloss::loss_spec::template_from_file;
use permloss::regularity::{
    gamma_phi_regular_check, regularity_probe, totally_regular_probe, ProbeConfig,
};
use permloss::report;
use permloss::template::{GammaPhiSpec, PermLoss, Template};
use permloss::train::train_demo;
use permloss::truncation::iterated_truncate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "permloss",
    version,
    about = "Relative-margin multiclass losses: evaluation, probes, demos"
)]
struct Cli {
    /// Write the JSON report to this file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeKind {
    /// Sampled regularity check of the template itself.
    Regular,
    /// Regularity of the template and every class-removal iterate.
    TotallyRegular,
    /// Sufficient scalar conditions for a γ(Σφ) pair.
    GammaPhi,
}

#[derive(Subcommand)]
enum Command {
    /// Run the exact label-code identity suite at one class count.
    VerifyIdentities {
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a loss at a score vector.
    Eval {
        /// Loss description (JSON file).
        #[arg(long)]
        loss: PathBuf,
        /// True class, 1-based.
        #[arg(long)]
        y: usize,
        /// Scores, comma-separated.
        #[arg(long)]
        v: String,
    },
    /// Compare closed-form gradients against central differences.
    GradCheck {
        #[arg(long)]
        loss: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the M-matrix structure of A(z) at random margin points.
    MmatrixProbe {
        #[arg(long)]
        loss: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Half-width of the sampling box.
        #[arg(long = "box", default_value_t = 5.0)]
        box_half_width: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Margin point minimizing the conditional risk at p.
    Link {
        #[arg(long)]
        loss: PathBuf,
        /// Probability vector, comma-separated.
        #[arg(long)]
        p: String,
    },
    /// Distribution whose conditional risk the margin point minimizes.
    InverseLink {
        #[arg(long)]
        loss: PathBuf,
        /// Margin point, comma-separated, length k−1.
        #[arg(long)]
        z: String,
    },
    /// Evaluate the loss with m classes removed by truncation.
    Truncate {
        #[arg(long)]
        loss: PathBuf,
        /// Number of classes to remove.
        #[arg(long, default_value_t = 1)]
        m: usize,
        /// Point to evaluate the truncated template at, comma-separated.
        #[arg(long)]
        eval: String,
    },
    /// Run a structural probe against a loss.
    Probe {
        #[arg(long)]
        loss: PathBuf,
        #[arg(long, value_enum)]
        kind: ProbeKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample count (solver-backed templates are capped at 300).
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Evaluate a Fenchel-Young template with its duality certificate.
    FyEval {
        /// shannon | sq_shannon
        #[arg(long)]
        negentropy: String,
        #[arg(long, default_value_t = 0.0)]
        mu: f64,
        #[arg(long)]
        k: usize,
        /// Point, comma-separated, length k−1.
        #[arg(long)]
        z: String,
    },
    /// Probe the conditional-risk inequality behind calibration.
    CalibrationProbe {
        #[arg(long)]
        loss: PathBuf,
        /// Probability vector, comma-separated.
        #[arg(long)]
        p: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a linear model on the triangle mixture and compare to Bayes.
    TrainDemo {
        #[arg(long)]
        loss: PathBuf,
        /// Examples per split (train and test each get this many).
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
    },
}

fn parse_numbers(s: &str, what: &str) -> permloss::Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>().map_err(|_| {
                permloss::Error::InvalidLossSpec(format!(
                    "{what} must be comma-separated numbers; could not read '{t}'"
                ))
            })
        })
        .collect()
}

struct Outcome {
    json: String,
    pass: bool,
}

fn ok<T: Serialize>(command: &str, body: &T, pass: bool) -> permloss::Result<Outcome> {
    Ok(Outcome {
        json: report::envelope(command, body)?,
        pass,
    })
}

#[derive(Serialize)]
struct EvalReport {
    loss: String,
    y: usize,
    v: Vec<f64>,
    value: f64,
}

#[derive(Serialize)]
struct GradCheckReport {
    template: String,
    k: usize,
    samples: usize,
    seed: u64,
    band: f64,
    max_rel_err: f64,
    tol: f64,
    pass: bool,
}

#[derive(Serialize)]
struct LinkReport {
    template: String,
    p: Vec<f64>,
    z: Vec<f64>,
    kkt_residual: f64,
}

#[derive(Serialize)]
struct InverseLinkReport {
    template: String,
    z: Vec<f64>,
    p: Vec<f64>,
}

#[derive(Serialize)]
struct TruncateReport {
    loss: String,
    truncated: String,
    removed: usize,
    w: Vec<f64>,
    value: f64,
}

#[derive(Serialize)]
struct FyEvalReport {
    negentropy: String,
    mu: f64,
    k: usize,
    z: Vec<f64>,
    value: f64,
    maximizer: Vec<f64>,
    duality_gap: f64,
    iterations: usize,
    exact: bool,
}

fn run_grad_check(
    loss: &PathBuf,
    samples: usize,
    seed: u64,
) -> permloss::Result<Outcome> {
    let t = template_from_file(loss)?;
    let k = t.arity();
    let band = 3.0;
    let tol = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0_f64;
    for i in 0..samples {
        let y = i % k + 1;
        let z: Vec<f64> = (0..t.dim()).map(|_| rng.gen_range(-band..band)).collect();
        let analytic = calculus::reduced_grad(&t, y, &z)?;
        let fd = calculus::fd_gradient(
            |w| t.eval(&rho_apply(y, w)),
            &z,
            calculus::fd_step(&z),
        )?;
        let scale = analytic
            .iter()
            .fold(1.0_f64, |a, &g| a.max(g.abs()));
        for (a, b) in analytic.iter().zip(fd.iter()) {
            max_rel = max_rel.max((a - b).abs() / scale);
        }
    }
    let body = GradCheckReport {
        template: t.name(),
        k,
        samples,
        seed,
        band,
        max_rel_err: max_rel,
        tol,
        pass: max_rel <= tol,
    };
    let pass = body.pass;
    ok("grad-check", &body, pass)
}

fn run_probe(
    loss: &PathBuf,
    kind: ProbeKind,
    seed: u64,
    samples: usize,
) -> permloss::Result<Outcome> {
    let t = template_from_file(loss)?;
    match kind {
        ProbeKind::Regular => {
            let cfg = probe_config(&t, samples, seed);
            let rep = regularity_probe(&t, &cfg)?;
            let pass = rep.pass;
            ok("probe", &rep, pass)
        }
        ProbeKind::TotallyRegular => {
            let cfg = probe_config(&t, samples, seed);
            let rep = totally_regular_probe(&t, &cfg)?;
            let pass = rep.pass;
            ok("probe", &rep, pass)
        }
        ProbeKind::GammaPhi => {
            let rep = match &t {
                Template::GammaPhi { spec, .. } => gamma_phi_regular_check(spec),
                // The closed-form path is the same function as the
                // log(1 + Σe^(−z)) pair; check that pair's scalars.
                Template::CrossEntropy { .. } => {
                    gamma_phi_regular_check(&GammaPhiSpec::cross_entropy_pair())
                }
                _ => {
                    return Err(permloss::Error::InvalidLossSpec(
                        "the gamma-phi condition check needs a loss of the \
                         γ(Σφ) form"
                            .into(),
                    ))
                }
            };
            let pass = rep.pass;
            ok("probe", &rep, pass)
        }
    }
}

fn probe_config(t: &Template, samples: usize, seed: u64) -> ProbeConfig {
    if t.eval_is_exact() {
        let mut cfg = ProbeConfig::default().with_seed(seed);
        cfg.samples = samples;
        cfg
    } else {
        ProbeConfig::solver_backed(samples.min(300), seed)
    }
}

fn run(cli: &Cli) -> permloss::Result<Outcome> {
    match &cli.command {
        Command::VerifyIdentities { k, trials, seed } => {
            let code = LabelCode::build(*k)?;
            let rep = code.verify_identities(*trials, *seed);
            let pass = rep.all_pass;
            ok("verify-identities", &rep, pass)
        }
        Command::Eval { loss, y, v } => {
            let t = template_from_file(loss)?;
            let v = parse_numbers(v, "--v")?;
            let pl = PermLoss::new(t)?;
            let value = pl.eval(*y, &v)?;
            let body = EvalReport {
                loss: pl.template().name(),
                y: *y,
                v,
                value,
            };
            ok("eval", &body, true)
        }
        Command::GradCheck { loss, samples, seed } => {
            run_grad_check(loss, *samples, *seed)
        }
        Command::MmatrixProbe { loss, samples, box_half_width, seed } => {
            let t = template_from_file(loss)?;
            let rep = calculus::mmatrix_probe(&t, *samples, *box_half_width, *seed, 1e-12)?;
            let pass = rep.pass;
            ok("mmatrix-probe", &rep, pass)
        }
        Command::Link { loss, p } => {
            let t = template_from_file(loss)?;
            let p = ProbVector::from_slice(&parse_numbers(p, "--p")?)?;
            let z = link(&t, &p, &SolverConfig::default())?;
            let body = LinkReport {
                template: t.name(),
                p: p.as_slice().to_vec(),
                kkt_residual: kkt_residual(&t, &p, &z)?,
                z,
            };
            ok("link", &body, true)
        }
        Command::InverseLink { loss, z } => {
            let t = template_from_file(loss)?;
            let z = parse_numbers(z, "--z")?;
            let p = inverse_link(&t, &z)?;
            let body = InverseLinkReport {
                template: t.name(),
                z,
                p: p.as_slice().to_vec(),
            };
            ok("inverse-link", &body, true)
        }
        Command::Truncate { loss, m, eval } => {
            let t = template_from_file(loss)?;
            let w = parse_numbers(eval, "--eval")?;
            let cut = iterated_truncate(&t, *m)?;
            let value = cut.eval(&w)?;
            let body = TruncateReport {
                loss: t.name(),
                truncated: cut.name(),
                removed: *m,
                w,
                value,
            };
            ok("truncate", &body, true)
        }
        Command::Probe { loss, kind, seed, samples } => {
            run_probe(loss, *kind, *seed, *samples)
        }
        Command::FyEval { negentropy, mu, k, z } => {
            let omega = match negentropy.as_str() {
                "shannon" => Negentropy::shannon(*k)?,
                "sq_shannon" => Negentropy::squared_shannon(*k)?,
                other => {
                    return Err(permloss::Error::InvalidLossSpec(format!(
                        "unknown negentropy '{other}' (expected shannon or sq_shannon)"
                    )))
                }
            };
            let name = omega.name();
            let spec = FySpec::new(omega, *mu)?;
            let z = parse_numbers(z, "--z")?;
            let sol = fy_template_eval(&spec, &z)?;
            let body = FyEvalReport {
                negentropy: name,
                mu: *mu,
                k: *k,
                z,
                value: sol.value,
                maximizer: sol.maximizer,
                duality_gap: sol.gap,
                iterations: sol.iterations,
                exact: sol.exact,
            };
            ok("fy-eval", &body, true)
        }
        Command::CalibrationProbe { loss, p, seed } => {
            let t = template_from_file(loss)?;
            let p = ProbVector::from_slice(&parse_numbers(p, "--p")?)?;
            let rep = cc_inequality_probe(&t, &p, &CcProbeConfig::with_seed(*seed))?;
            let pass = rep.pass;
            ok("calibration-probe", &rep, pass)
        }
        Command::TrainDemo { loss, n, seed, epochs } => {
            let t = template_from_file(loss)?;
            let rep = train_demo(&t, *n, *seed, *epochs)?;
            let pass = rep.test_01 <= rep.bayes_estimate + 0.03;
            ok("train-demo", &rep, pass)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests arrive here too; they are not errors.
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(outcome) => {
            if let Some(path) = &cli.out {
                let mut text = outcome.json;
                text.push('\n');
                if let Err(e) = std::fs::write(path, text) {
                    eprintln!("error: could not write {}: {e}", path.display());
                    return ExitCode::from(1);
                }
            } else {
                println!("{}", outcome.json);
            }
            if outcome.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
