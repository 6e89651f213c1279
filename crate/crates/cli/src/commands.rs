use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use caplab::discrete::{discrete_capacity, DiscreteOptions, GridProblem, PlateRule, StepRule};
use caplab::operator::{Condenser, GridSpec};
use caplab::radial::{
    capacity_scan, fit_log_slope, frak_c_scan, log_spaced, model_capacity_exponent,
    model_frak_c_exponent_closed, radial_capacity, Method, SlopeFit,
};
use caplab::regime::{
    classify_capacity, classify_model, default_nu, radial_evidence, Outcome, RegimeVerdict,
};
use caplab::verifier::{
    certify, CertifyOptions, ExampleConfig, RESIDUAL_GRID_MAX, RESIDUAL_GRID_POINTS,
};
use caplab::{CapacitySequence, WeightField, WeightSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{
    load, missing, weight_spec, CapConfig, ClassifyConfig, CliError, Format, MaskConfig,
    OutputConfig, Quantity, ScanConfig, TruthTableConfig, VerifyConfig, WeightFlag,
};
use crate::output::{csv, emit, json, num, tag};
use crate::svg::LogLogPlot;

/// Probes used to validate weight fields.
const WEIGHT_PROBES: usize = 256;
/// Radii of the capacity evidence behind `classify --from-capacity`.
const EVIDENCE_RADII: (f64, f64, usize) = (10.0, 1e4, 31);

#[derive(Debug, Parser)]
#[command(
    name = "caplab",
    version,
    about = "Weighted condenser capacities and Liouville-type regime checks"
)]
pub struct Cli {
    /// TOML (or JSON) file with the command's parameters; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Output file, written atomically; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for randomized probes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Capacity of a concentric-ball or grid-mask condenser.
    Cap(CapArgs),
    /// Capacity (or ℭ) sweep over R with a log-log slope fit.
    Scan(ScanArgs),
    /// ℭ sweep; shorthand for `scan --quantity frakc`.
    Frakc(ScanArgs),
    /// Certify a candidate pair (u, v).
    Verify(VerifyArgs),
    /// Regime verdict for the model operator.
    Classify(ClassifyArgs),
    /// Model and capacity verdicts over a table of (n, q, σ).
    Truthtable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodFlag {
    Radial,
    Discrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PlateFlag {
    Nodal,
    HalfCell,
    Conforming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StepFlag {
    Auto,
    Lbfgs,
    ProjectedGradient,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct CapArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    rin: Option<f64>,
    #[arg(long)]
    rout: Option<f64>,
    #[arg(long, value_enum)]
    weight: Option<WeightFlag>,
    /// Multiplier of the radial-power weight, or the value of a constant weight.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, value_enum)]
    method: Option<MethodFlag>,
    /// Grid spacing of the discrete engine (default r_in / 32).
    #[arg(long)]
    h: Option<f64>,
    /// Solve on the positive orthant of a reflection-invariant problem.
    #[arg(long)]
    reflect: bool,
    #[arg(long, value_enum)]
    plate_rule: Option<PlateFlag>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, value_enum)]
    step_rule: Option<StepFlag>,
    /// CSV of `inner|outer,i,j[,k]` rows; needs --grid-origin, --grid-spacing, --grid-shape.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    grid_origin: Option<Vec<f64>>,
    #[arg(long)]
    grid_spacing: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    grid_shape: Option<Vec<usize>>,
    /// Also write the discrete minimizer as CSV here.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct ScanArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_enum)]
    weight: Option<WeightFlag>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, value_enum)]
    quantity: Option<Quantity>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    /// r_in / r_out of every condenser in a capacity sweep (default 0.5).
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    rmin: Option<f64>,
    #[arg(long)]
    rmax: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
    /// Explicit comma-separated R list; overrides rmin/rmax/count.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    radii: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct VerifyArgs {
    /// 2, 4, 5, 7 or custom.
    #[arg(long)]
    example: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// Fixed α; searched when absent.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    r_max: Option<f64>,
    #[arg(long)]
    grid_points: Option<usize>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct ClassifyArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    /// Decide from engine-computed capacity sequences instead of the model table.
    #[arg(long)]
    from_capacity: bool,
}

pub enum Status {
    Success,
    CertificationFailed,
    NotConverged,
}

struct Sink {
    format: Format,
    path: Option<PathBuf>,
}

impl Sink {
    fn new(cli: &Cli, configured: Option<OutputConfig>, default: Format) -> Self {
        let configured = configured.unwrap_or_default();
        Self {
            format: cli.format.or(configured.format).unwrap_or(default),
            path: cli.out.clone().or(configured.path),
        }
    }

    fn write(&self, text: &str) -> Result<(), CliError> {
        emit(text, self.path.as_deref())
    }

    fn no_svg(&self, command: &str) -> Result<(), CliError> {
        if self.format == Format::Svg {
            return Err(CliError::Config(format!(
                "`{command}` has no SVG output; use json or csv"
            )));
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<Status, CliError> {
    let config = cli.config.as_deref();
    match &cli.command {
        Command::Cap(args) => cap(&cli, args, load(config)?),
        Command::Scan(args) => scan(&cli, args, load(config)?, None),
        Command::Frakc(args) => scan(&cli, args, load(config)?, Some(Quantity::Frakc)),
        Command::Verify(args) => verify(&cli, args, load(config)?),
        Command::Classify(args) => classify(&cli, args, load(config)?),
        Command::Truthtable => truthtable(&cli, load(config)?),
    }
}

fn cap(cli: &Cli, a: &CapArgs, c: CapConfig) -> Result<Status, CliError> {
    let sink = Sink::new(cli, c.output.clone(), Format::Json);
    sink.no_svg("cap")?;
    let spec = weight_spec(
        a.weight,
        c.weight.clone(),
        a.n.or(c.n),
        a.sigma.or(c.sigma),
        a.scale,
    )?;
    let w = spec.build()?;
    let p = a.p.or(c.p).ok_or_else(|| missing("p"))?;

    let mask = match (&a.mask, &c.mask) {
        (Some(file), _) => Some(MaskConfig {
            file: file.clone(),
            origin: a
                .grid_origin
                .clone()
                .ok_or_else(|| missing("grid-origin"))?,
            spacing: a.grid_spacing.ok_or_else(|| missing("grid-spacing"))?,
            shape: a.grid_shape.clone().ok_or_else(|| missing("grid-shape"))?,
        }),
        (None, m) => m.clone(),
    };
    let method = match a.method {
        Some(MethodFlag::Radial) => Method::RadialExact,
        Some(MethodFlag::Discrete) => Method::Discrete,
        None => c.method.unwrap_or(if mask.is_none() && w.is_radial() {
            Method::RadialExact
        } else {
            Method::Discrete
        }),
    };

    if method == Method::RadialExact {
        let r_in = a.rin.or(c.r_in).ok_or_else(|| missing("rin"))?;
        let r_out = a.rout.or(c.r_out).ok_or_else(|| missing("rout"))?;
        w.validate(WEIGHT_PROBES, r_out, cli.seed)?;
        let result = radial_capacity(p, &w, r_in, r_out)?;
        let text = match sink.format {
            Format::Csv => csv(
                &["r", "phi"],
                result.profile.iter().map(|(r, v)| vec![num(*r), num(*v)]),
            ),
            _ => json(&result)?,
        };
        sink.write(&text)?;
        return Ok(Status::Success);
    }

    let opts = DiscreteOptions {
        max_iters: a
            .max_iters
            .or(c.max_iters)
            .unwrap_or(DiscreteOptions::default().max_iters),
        tolerance: a
            .tolerance
            .or(c.tolerance)
            .unwrap_or(DiscreteOptions::default().tolerance),
        step_rule: a
            .step_rule
            .map(step_rule)
            .or(c.step_rule)
            .unwrap_or(StepRule::Auto),
    };
    let problem = if let Some(m) = mask {
        let (inner, outer) = read_mask(&m.file, m.shape.len())?;
        let grid = GridSpec {
            origin: m.origin,
            spacing: m.spacing,
            shape: m.shape,
        };
        let extent = grid
            .shape
            .iter()
            .map(|s| *s as f64 * grid.spacing)
            .fold(0.0, f64::max);
        w.validate(WEIGHT_PROBES, extent, cli.seed)?;
        let condenser = Condenser::grid_mask(grid, inner, outer)?;
        GridProblem::from_condenser(&condenser, w, p)?
    } else {
        let r_in = a.rin.or(c.r_in).ok_or_else(|| missing("rin"))?;
        let r_out = a.rout.or(c.r_out).ok_or_else(|| missing("rout"))?;
        w.validate(WEIGHT_PROBES, r_out, cli.seed)?;
        let h = a.h.or(c.spacing).unwrap_or(r_in / 32.0);
        let rule = a
            .plate_rule
            .map(plate_rule)
            .or(c.plate_rule)
            .unwrap_or_default();
        GridProblem::annulus_with_rule(
            w,
            p,
            r_in,
            r_out,
            h,
            a.reflect || c.reflect.unwrap_or(false),
            rule,
        )?
    };
    let solution = discrete_capacity(&problem, &opts)?;
    if let Some(dump) = a.dump.as_deref().or(c.dump.as_deref()) {
        emit(&solution.to_csv(), Some(dump))?;
    }
    let text = match sink.format {
        Format::Csv => solution.to_csv(),
        _ => json(&solution.result)?,
    };
    sink.write(&text)?;
    Ok(if solution.result.diagnostics.converged {
        Status::Success
    } else {
        Status::NotConverged
    })
}

fn step_rule(f: StepFlag) -> StepRule {
    match f {
        StepFlag::Auto => StepRule::Auto,
        StepFlag::Lbfgs => StepRule::Lbfgs,
        StepFlag::ProjectedGradient => StepRule::ProjectedGradient,
    }
}

fn plate_rule(f: PlateFlag) -> PlateRule {
    match f {
        PlateFlag::Nodal => PlateRule::Nodal,
        PlateFlag::HalfCell => PlateRule::HalfCell,
        PlateFlag::Conforming => PlateRule::Conforming,
    }
}

type Mask = (BTreeSet<Vec<usize>>, BTreeSet<Vec<usize>>);

fn read_mask(path: &Path, n: usize) -> Result<Mask, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut inner = BTreeSet::new();
    let mut outer = BTreeSet::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad =
            |why: &str| CliError::Config(format!("{}:{}: {why}", path.display(), line_no + 1));
        let mut fields = line.split(',').map(str::trim);
        let role = fields.next().unwrap_or_default();
        let index: Vec<usize> = fields
            .map(|f| {
                f.parse()
                    .map_err(|_| bad(&format!("`{f}` is not a cell index")))
            })
            .collect::<Result<_, _>>()?;
        if index.len() != n {
            return Err(bad(&format!("expected {n} indices, got {}", index.len())));
        }
        match role {
            "inner" => inner.insert(index),
            "outer" => outer.insert(index),
            other => return Err(bad(&format!("role must be inner or outer, got `{other}`"))),
        };
    }
    Ok((inner, outer))
}

/// JSON form of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub sequence: CapacitySequence,
    pub fit: SlopeFit,
    /// Exponent of the model weight, when the sweep uses it.
    pub predicted_slope: Option<f64>,
}

fn scan(
    cli: &Cli,
    a: &ScanArgs,
    c: ScanConfig,
    forced: Option<Quantity>,
) -> Result<Status, CliError> {
    let sink = Sink::new(cli, c.output.clone(), Format::Csv);
    let spec = weight_spec(
        a.weight,
        c.weight.clone(),
        a.n.or(c.n),
        a.sigma.or(c.sigma),
        a.scale,
    )?;
    let w = spec.build()?;
    let radii = match a.radii.clone().or(c.radii.clone()) {
        Some(r) => r,
        None => {
            let lo = a.rmin.or(c.r_min).unwrap_or(10.0);
            let hi = a.rmax.or(c.r_max).unwrap_or(1e4);
            let count = a.count.or(c.count).unwrap_or(31);
            if count == 0 || !(lo > 0.0 && hi > lo) {
                return Err(CliError::Config(format!(
                    "empty R range: rmin {lo}, rmax {hi}, count {count}"
                )));
            }
            log_spaced(lo, hi, count)
        }
    };
    if radii.is_empty() {
        return Err(CliError::Config("the R list is empty".into()));
    }
    let r_max = radii.iter().copied().fold(0.0, f64::max);
    w.validate(WEIGHT_PROBES, r_max, cli.seed)?;
    let model = match spec {
        WeightSpec::RadialPower { n, sigma, .. } => Some((n, sigma)),
        _ => None,
    };
    let quantity = forced.or(a.quantity).or(c.quantity).unwrap_or_default();
    let (sequence, predicted, label) = match quantity {
        Quantity::Capacity => {
            let p = a.p.or(c.p).ok_or_else(|| missing("p"))?;
            let ratio = a.ratio.or(c.ratio).unwrap_or(0.5);
            let seq = capacity_scan(p, &w, &radii, ratio)?;
            (
                seq,
                model.map(|(n, s)| model_capacity_exponent(n, p, s)),
                format!("cap_{p}"),
            )
        }
        Quantity::Frakc => {
            let q = a.q.or(c.q).ok_or_else(|| missing("q"))?;
            let nu = a.nu.or(c.nu).unwrap_or_else(|| default_nu(q));
            let seq = frak_c_scan(&w, q, nu, &radii)?;
            (
                seq,
                model.map(|(n, s)| model_frak_c_exponent_closed(n, s, q, nu)),
                "frak_C".to_string(),
            )
        }
    };
    let fit = fit_log_slope(&sequence, c.window)?;
    match predicted {
        Some(pr) => eprintln!("slope {:.6} (model exponent {:.6})", fit.slope, pr),
        None => eprintln!("slope {:.6}", fit.slope),
    }
    let report = ScanReport {
        sequence,
        fit,
        predicted_slope: predicted,
    };
    let text = match sink.format {
        Format::Json => json(&report)?,
        Format::Csv => csv(
            &["R", "value"],
            report
                .sequence
                .entries
                .iter()
                .map(|e| vec![num(e.r), num(e.value)]),
        ),
        Format::Svg => {
            let points: Vec<(f64, f64)> = report
                .sequence
                .entries
                .iter()
                .map(|e| (e.r, e.value))
                .collect();
            let annotation = match predicted {
                Some(pr) => format!("fitted slope {:.4} (model {:.4})", fit.slope, pr),
                None => format!("fitted slope {:.4}", fit.slope),
            };
            LogLogPlot {
                title: &format!("{label} versus R"),
                x_label: "R",
                y_label: &label,
                points: &points,
                fit: Some((fit.slope, fit.intercept)),
                annotation,
            }
            .render()
        }
    };
    sink.write(&text)?;
    Ok(Status::Success)
}

fn verify(cli: &Cli, a: &VerifyArgs, c: VerifyConfig) -> Result<Status, CliError> {
    let sink = Sink::new(cli, c.output.clone(), Format::Json);
    sink.no_svg("verify")?;
    let example = ExampleConfig {
        example: a
            .example
            .clone()
            .or(c.example)
            .ok_or_else(|| missing("example"))?,
        n: a.n.or(c.n).ok_or_else(|| missing("n"))?,
        q: a.q.or(c.q),
        sigma: a.sigma.or(c.sigma).ok_or_else(|| missing("sigma"))?,
        mu: a.mu.or(c.mu),
        alpha: a.alpha.or(c.alpha),
        u: c.u,
        v: c.v,
    };
    let pair = example.build()?;
    let opts = CertifyOptions {
        r_max: a.r_max.or(c.r_max).unwrap_or(RESIDUAL_GRID_MAX),
        grid_points: a
            .grid_points
            .or(c.grid_points)
            .unwrap_or(RESIDUAL_GRID_POINTS),
        ..CertifyOptions::default()
    };
    let calibrate = example.alpha.is_none();
    let report = certify(&pair, calibrate, &opts)?;
    let text = match sink.format {
        Format::Csv => csv(
            &["rho_inner", "rho_outer", "gap", "magnitude", "passed"],
            report.bumps.iter().map(|b| {
                vec![
                    num(b.rho_inner),
                    num(b.rho_outer),
                    num(b.gap),
                    num(b.magnitude),
                    b.passed.to_string(),
                ]
            }),
        ),
        _ => json(&report)?,
    };
    sink.write(&text)?;
    Ok(if report.passed {
        Status::Success
    } else {
        Status::CertificationFailed
    })
}

fn verdict_row(v: &RegimeVerdict) -> Vec<String> {
    vec![
        tag(&v.outcome),
        v.authority.map(|a| a.to_string()).unwrap_or_default(),
        v.boundary.to_string(),
    ]
}

fn capacity_verdict(
    n: usize,
    q: f64,
    sigma: f64,
    nu: Option<f64>,
) -> Result<RegimeVerdict, CliError> {
    let w = WeightField::radial_power(n, sigma)?;
    let (lo, hi, count) = EVIDENCE_RADII;
    let evidence = radial_evidence(&w, q, nu, &log_spaced(lo, hi, count))?;
    Ok(classify_capacity(&evidence, q, nu)?)
}

fn classify(cli: &Cli, a: &ClassifyArgs, c: ClassifyConfig) -> Result<Status, CliError> {
    let sink = Sink::new(cli, c.output.clone(), Format::Json);
    sink.no_svg("classify")?;
    let n = a.n.or(c.n).ok_or_else(|| missing("n"))?;
    let q = a.q.or(c.q).ok_or_else(|| missing("q"))?;
    let sigma = a.sigma.or(c.sigma).ok_or_else(|| missing("sigma"))?;
    let verdict = if a.from_capacity || c.from_capacity.unwrap_or(false) {
        capacity_verdict(n, q, sigma, a.nu.or(c.nu))?
    } else {
        classify_model(n, q, sigma)?
    };
    let text = match sink.format {
        Format::Csv => csv(
            &["outcome", "authority", "boundary"],
            [verdict_row(&verdict)],
        ),
        _ => json(&verdict)?,
    };
    sink.write(&text)?;
    Ok(Status::Success)
}

/// One line of the truth table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub n: usize,
    pub q: f64,
    pub sigma: f64,
    pub model: RegimeVerdict,
    pub capacity: RegimeVerdict,
    /// The capacity verdict is out of scope or has the model's outcome.
    pub agree: bool,
}

const DEFAULT_POINTS: [(usize, f64, f64); 12] = [
    (3, 0.5, 0.0),
    (3, 0.5, 1.0),
    (2, 0.5, 0.0),
    (3, 1.0, 0.0),
    (3, 1.0, -3.0),
    (2, 1.0, -2.0),
    (3, 2.0, 0.0),
    (3, 3.0, 0.0),
    (3, 4.0, 0.0),
    (3, 2.0, -3.0),
    (3, 2.0, 1.0),
    (4, 1.5, -1.0),
];

fn truthtable(cli: &Cli, c: TruthTableConfig) -> Result<Status, CliError> {
    let sink = Sink::new(cli, c.output.clone(), Format::Csv);
    sink.no_svg("truthtable")?;
    let points = c.points.unwrap_or_else(|| DEFAULT_POINTS.to_vec());
    let rows = points
        .into_iter()
        .map(|(n, q, sigma)| {
            let model = classify_model(n, q, sigma)?;
            let capacity = capacity_verdict(n, q, sigma, None)?;
            let agree =
                capacity.outcome == Outcome::OutsideScope || capacity.outcome == model.outcome;
            Ok(TruthRow {
                n,
                q,
                sigma,
                model,
                capacity,
                agree,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let text = match sink.format {
        Format::Json => json(&rows)?,
        _ => csv(
            &[
                "n",
                "q",
                "sigma",
                "model_outcome",
                "model_authority",
                "boundary",
                "capacity_outcome",
                "capacity_authority",
                "capacity_boundary",
                "agree",
            ],
            rows.iter().map(|r| {
                let mut row = vec![r.n.to_string(), num(r.q), num(r.sigma)];
                row.extend(verdict_row(&r.model));
                row.extend(verdict_row(&r.capacity));
                row.push(r.agree.to_string());
                row
            }),
        ),
    };
    sink.write(&text)?;
    Ok(if rows.iter().all(|r| r.agree) {
        Status::Success
    } else {
        Status::CertificationFailed
    })
}
