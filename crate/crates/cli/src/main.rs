//! `lnfold`: analyze, fold and verify LayerNorm-to-RMSNorm rewrites.
//!
//! Exit status: 0 success, 1 operational error, 2 verification failed.

mod json;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lnfold_core::apply::{apply_fold, dry_run, FoldOptions, FoldStyle};
use lnfold_core::detect::{analyze, FoldReport, Mode};
use lnfold_core::fixtures::{fixture, FIXTURES};
use lnfold_core::graph::{load_model, save_model, Graph, WeightStore};
use lnfold_core::verify::{
    check_gradients_fd, compare_flops, default_tol, model_speedup_estimate, verify_forward, verify_gradients,
    FdCheck, FlopVariant, GradLoss,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "lnfold", version, about = "Fold LayerNorms into RMSNorms by centering upstream weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect foldable normalizations and write a fold report.
    Analyze(AnalyzeArgs),
    /// Apply a fold report and write the folded model.
    Fold(FoldArgs),
    /// Compare an original and a folded model on random inputs.
    Verify(VerifyArgs),
    /// Operation counts for LayerNorm and RMSNorm.
    Flops(FlopsArgs),
    /// analyze, fold and verify in one go.
    Pipeline(PipelineArgs),
    /// Write one of the built-in example models.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Topology JSON.
    model: PathBuf,
    /// Weights blob; defaults to the topology path with a `.bin` extension.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Plan auxiliary centering for normalizations that fail strict detection.
    #[arg(long)]
    practical: bool,
    /// Do not treat an unsafe report as an error.
    #[arg(long)]
    no_strict_safety: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Oneshot,
    Proxy,
}

#[derive(Args)]
struct FoldArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Report from `analyze`; computed on the fly when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Allow auxiliary centering insertions.
    #[arg(long)]
    practical: bool,
    #[arg(long)]
    no_strict_safety: bool,
    /// Print the changes without writing anything.
    #[arg(long)]
    dry_run: bool,
    #[arg(long, value_enum, default_value = "oneshot")]
    style: StyleArg,
    /// Folded topology path; weights go next to it as `.bin`.
    #[arg(long, required_unless_present = "dry_run")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    original: PathBuf,
    folded: PathBuf,
    #[arg(long)]
    original_weights: Option<PathBuf>,
    #[arg(long)]
    folded_weights: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, env = "LNFOLD_SEED", default_value_t = 0)]
    seed: u64,
    /// Also compare parameter gradients.
    #[arg(long)]
    grad: bool,
    /// Also check both models' gradients against finite differences.
    #[arg(long)]
    fd: bool,
    /// Absolute tolerance; 1e-9, or 1e-5 when any weight is f32.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Naive,
    Welford,
}

#[derive(Args)]
struct FlopsArgs {
    /// Normalized width.
    #[arg(long)]
    d: u64,
    #[arg(long, value_enum, default_value = "naive")]
    variant: VariantArg,
    /// Welford partition count.
    #[arg(long)]
    groups: Option<u64>,
    /// Share of inference time spent in normalization, for an end-to-end
    /// estimate.
    #[arg(long)]
    ln_fraction: Option<f64>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    practical: bool,
    #[arg(long)]
    no_strict_safety: bool,
    #[arg(long, value_enum, default_value = "oneshot")]
    style: StyleArg,
    #[arg(long)]
    out: PathBuf,
    /// Also write the fold report.
    #[arg(long)]
    report_out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, env = "LNFOLD_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    grad: bool,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct FixtureArgs {
    /// Fixture name; see --list.
    #[arg(required_unless_present = "list")]
    name: Option<String>,
    #[arg(long)]
    list: bool,
    #[arg(long, required_unless_present = "list")]
    out: Option<PathBuf>,
    #[arg(long, env = "LNFOLD_SEED", default_value_t = 0)]
    seed: u64,
}

enum Outcome {
    Ok,
    VerificationFailed,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Fold(a) => cmd_fold(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Fixture(a) => cmd_fixture(a),
    }
}

fn weights_path(model: &Path, weights: Option<&PathBuf>) -> PathBuf {
    weights.cloned().unwrap_or_else(|| model.with_extension("bin"))
}

fn load(m: &ModelArgs) -> Result<(Graph, WeightStore)> {
    load_pair(&m.model, m.weights.as_ref())
}

fn load_pair(model: &Path, weights: Option<&PathBuf>) -> Result<(Graph, WeightStore)> {
    let wp = weights_path(model, weights);
    load_model(model, &wp).with_context(|| format!("loading {}", model.display()))
}

fn emit<T: Serialize>(value: &T, out: Option<&PathBuf>) -> Result<()> {
    let text = json::to_string(value)?;
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn mode(practical: bool) -> Mode {
    if practical {
        Mode::Practical
    } else {
        Mode::Strict
    }
}

fn summarize(rep: &FoldReport) {
    let s = rep.summary();
    let foldable = rep.foldable.len();
    let all = if foldable == s.norms && foldable > 0 { " (all)" } else { "" };
    eprintln!(
        "LN={} foldable={foldable}{all} strict={} practical={} insertions={} safe={}",
        s.norms, s.strict_foldable, s.practical_foldable, s.insertions, rep.safety.safe
    );
    if !rep.safety.safe {
        let names: Vec<&str> = rep.safety.affected.iter().map(|n| n.as_str()).collect();
        eprintln!("centering would also change: {}", names.join(", "));
    }
    for w in &rep.warnings {
        log::warn!("{w}");
    }
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<Outcome> {
    let (g, w) = load(&a.model)?;
    let rep = analyze(&g, &w, mode(a.practical))?;
    summarize(&rep);
    emit(&rep, a.out.as_ref())?;
    if !rep.safety.safe && !a.no_strict_safety {
        bail!("report is unsafe; folding it requires --no-strict-safety");
    }
    Ok(Outcome::Ok)
}

fn fold_options(practical: bool, no_strict_safety: bool, style: StyleArg) -> FoldOptions {
    FoldOptions {
        allow_practical: practical,
        strict_safety: !no_strict_safety,
        style: match style {
            StyleArg::Oneshot => FoldStyle::OneShot,
            StyleArg::Proxy => FoldStyle::Proxy,
        },
    }
}

fn save(g: &Graph, w: &WeightStore, out: &Path) -> Result<()> {
    let wp = out.with_extension("bin");
    save_model(g, w, out, &wp).with_context(|| format!("writing {}", out.display()))?;
    log::info!("wrote {} and {}", out.display(), wp.display());
    Ok(())
}

fn cmd_fold(a: FoldArgs) -> Result<Outcome> {
    let (g, w) = load(&a.model)?;
    let rep: FoldReport = match &a.report {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => analyze(&g, &w, mode(a.practical))?,
    };
    if a.dry_run {
        print!("{}", dry_run(&g, &rep));
        return Ok(Outcome::Ok);
    }
    let (fg, fw) = apply_fold(&g, &w, &rep, fold_options(a.practical, a.no_strict_safety, a.style))?;
    save(&fg, &fw, a.out.as_ref().expect("clap requires --out"))?;
    summarize(&rep);
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct VerifyOutput {
    equivalence: lnfold_core::verify::EquivalenceReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    fd_original: Option<FdCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fd_folded: Option<FdCheck>,
    pass: bool,
}

struct VerifyPlan {
    trials: usize,
    seed: u64,
    grad: bool,
    fd: bool,
    tol: Option<f64>,
}

fn verify_models(a: (&Graph, &WeightStore), b: (&Graph, &WeightStore), p: VerifyPlan) -> Result<VerifyOutput> {
    let tol = p.tol.unwrap_or_else(|| default_tol(a.1).max(default_tol(b.1)));
    let equivalence = if p.grad {
        verify_gradients(a.0, a.1, b.0, b.1, p.trials, p.seed, tol, GradLoss::SumOfOutputs)?
    } else {
        verify_forward(a.0, a.1, b.0, b.1, p.trials, p.seed, tol)?
    };
    let (fd_original, fd_folded) = if p.fd {
        let trials = p.trials.min(3);
        (
            Some(check_gradients_fd(a.0, a.1, trials, p.seed, 1e-6, 1e-5)?),
            Some(check_gradients_fd(b.0, b.1, trials, p.seed, 1e-6, 1e-5)?),
        )
    } else {
        (None, None)
    };
    let pass = equivalence.pass
        && fd_original.as_ref().is_none_or(|c| c.pass)
        && fd_folded.as_ref().is_none_or(|c| c.pass);
    Ok(VerifyOutput {
        equivalence,
        fd_original,
        fd_folded,
        pass,
    })
}

fn report_verification(out: &VerifyOutput) -> Result<Outcome> {
    emit(out, None)?;
    let e = &out.equivalence;
    eprintln!(
        "{}: max forward diff {:.3e}{} (tol {:.1e}, {} trials, seed {})",
        if out.pass { "PASS" } else { "FAIL" },
        e.max_abs_forward_diff,
        e.max_abs_grad_diff
            .map(|g| format!(", max gradient diff {g:.3e}"))
            .unwrap_or_default(),
        e.tol,
        e.trials,
        e.seed
    );
    Ok(if out.pass {
        Outcome::Ok
    } else {
        Outcome::VerificationFailed
    })
}

fn cmd_verify(a: VerifyArgs) -> Result<Outcome> {
    let (ga, wa) = load_pair(&a.original, a.original_weights.as_ref())?;
    let (gb, wb) = load_pair(&a.folded, a.folded_weights.as_ref())?;
    let out = verify_models(
        (&ga, &wa),
        (&gb, &wb),
        VerifyPlan {
            trials: a.trials,
            seed: a.seed,
            grad: a.grad,
            fd: a.fd,
            tol: a.tol,
        },
    )?;
    report_verification(&out)
}

#[derive(Serialize)]
struct FlopsOutput {
    #[serde(flatten)]
    comparison: lnfold_core::verify::FlopComparison,
    #[serde(skip_serializing_if = "Option::is_none")]
    model_saving: Option<f64>,
}

fn cmd_flops(a: FlopsArgs) -> Result<Outcome> {
    let variant = match a.variant {
        VariantArg::Naive => FlopVariant::Naive,
        VariantArg::Welford => FlopVariant::Welford,
    };
    let comparison = compare_flops(variant, a.d, a.groups)?;
    let model_saving = match a.ln_fraction {
        Some(f) if !(0.0..=1.0).contains(&f) => bail!("--ln-fraction must be in [0, 1]"),
        Some(f) => Some(model_speedup_estimate(f, comparison.saving)),
        None => None,
    };
    eprintln!(
        "LN ({}, {}, {}) vs RMS ({}, {}, {}): saving {:.1}%",
        comparison.ln.adds,
        comparison.ln.muls,
        comparison.ln.divs,
        comparison.rms.adds,
        comparison.rms.muls,
        comparison.rms.divs,
        100.0 * comparison.saving
    );
    emit(
        &FlopsOutput {
            comparison,
            model_saving,
        },
        None,
    )?;
    Ok(Outcome::Ok)
}

fn cmd_pipeline(a: PipelineArgs) -> Result<Outcome> {
    let (g, w) = load(&a.model)?;
    let rep = analyze(&g, &w, mode(a.practical))?;
    summarize(&rep);
    if let Some(p) = &a.report_out {
        emit(&rep, Some(p))?;
    }
    let (fg, fw) = apply_fold(&g, &w, &rep, fold_options(a.practical, a.no_strict_safety, a.style))?;
    save(&fg, &fw, &a.out)?;
    let out = verify_models(
        (&g, &w),
        (&fg, &fw),
        VerifyPlan {
            trials: a.trials,
            seed: a.seed,
            grad: a.grad,
            fd: false,
            tol: a.tol,
        },
    )?;
    report_verification(&out)
}

fn cmd_fixture(a: FixtureArgs) -> Result<Outcome> {
    if a.list {
        for name in FIXTURES {
            println!("{name}");
        }
        return Ok(Outcome::Ok);
    }
    let name = a.name.expect("clap requires a name");
    let Some((g, w)) = fixture(&name, a.seed) else {
        bail!("unknown fixture {name:?}; known: {}", FIXTURES.join(", "));
    };
    save(&g, &w, a.out.as_ref().expect("clap requires --out"))?;
    Ok(Outcome::Ok)
}
