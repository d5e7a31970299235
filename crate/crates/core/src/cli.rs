//! The `gad` command line: `run`, `scan`, `verify` and `list`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dynamics::{GadVariant, VariantKind};
use crate::integrate::{run_gad, RunConfig};
use crate::model::{SaddleReport, TrajectoryRecord, Vector};
use crate::problems::{problem_by_id, BuiltinProblem, PROBLEM_IDS};
use crate::verify::{
    basin_scan, deflation_case, newton_basin_scan, spectrum_battery, stability_equivalence_violations, NewtonConfig,
    ScanGrid,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gad", version, about = "Saddle point search with gentlest ascent dynamics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one GAD search; writes trajectory.csv and report.json.
    Run { config: PathBuf },
    /// Scan a 2D grid of starting points; writes basin.csv.
    Scan { config: PathBuf },
    /// Run the self-check battery; writes verify.json.
    Verify {
        #[arg(long, default_value_t = 100)]
        n_random: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
    },
    /// List problem ids and variants.
    List,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemRef {
    pub id: String,
    #[serde(default)]
    pub params: Value,
}

/// Either `"index1-general"` or `{"kind": "index1-general", "tau": 0.5}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VariantSpec {
    Kind(VariantKind),
    Full(GadVariant),
}

impl VariantSpec {
    pub fn variant(&self) -> GadVariant {
        match self {
            VariantSpec::Kind(k) => GadVariant::new(*k),
            VariantSpec::Full(v) => *v,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from(".")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub problem: ProblemRef,
    pub variant: VariantSpec,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMethod {
    #[default]
    Gad,
    Newton,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanFile {
    pub problem: ProblemRef,
    #[serde(default)]
    pub variant: Option<VariantSpec>,
    #[serde(default)]
    pub method: ScanMethod,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub newton: NewtonConfig,
    pub grid: ScanGrid,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub problem_id: String,
    pub report: SaddleReport,
    pub note: Option<String>,
    pub config: RunFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifySummary {
    pub n_random: usize,
    pub seed: u64,
    pub all_pass: bool,
    pub properties: Vec<PropertyResult>,
}

/// Parses a JSON config, naming the file and the line/column on failure.
pub fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| {
        anyhow::anyhow!("{}:{}:{}: {}", path.display(), e.line(), e.column(), e)
    })
}

fn build_problem(r: &ProblemRef) -> anyhow::Result<BuiltinProblem> {
    Ok(problem_by_id(&r.id, &r.params)?)
}

/// Sizes the global rayon pool from `GAD_THREADS` when set.
pub fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("GAD_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("GAD_THREADS must be a positive integer, got '{v}'"))?;
        if n == 0 {
            bail!("GAD_THREADS must be a positive integer, got 0");
        }
        // A second initialization in the same process is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<i32> {
    configure_threads()?;
    match command {
        Command::Run { config } => cmd_run(&config),
        Command::Scan { config } => cmd_scan(&config),
        Command::Verify {
            n_random,
            seed,
            output_dir,
        } => cmd_verify(n_random, seed, &output_dir),
        Command::List => {
            print!("{}", list_text());
            Ok(EXIT_OK)
        }
    }
}

pub fn list_text() -> String {
    let mut s = String::from("problems:\n");
    for id in PROBLEM_IDS {
        let _ = writeln!(s, "  {id}");
    }
    s.push_str("variants:\n");
    for k in VariantKind::ALL {
        let _ = writeln!(s, "  {}", k.name());
    }
    s
}

pub fn cmd_run(path: &Path) -> anyhow::Result<i32> {
    let cfg: RunFile = read_config(path)?;
    let builtin = build_problem(&cfg.problem)?;
    let problem = &builtin.spec;
    let x0 = match &cfg.x0 {
        Some(x) => Vector::from_column_slice(x),
        None => builtin.default_x0.clone(),
    };
    let variant = cfg.variant.variant();
    let out = run_gad(problem, &x0, &variant, &cfg.run)?;
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("cannot create {}", cfg.output_dir.display()))?;
    fs::write(cfg.output_dir.join("trajectory.csv"), trajectory_csv(&out.trajectory, problem.dim()))?;
    let converged = out.report.converged;
    if let Some(note) = &out.note {
        eprintln!("{note}");
    }
    let report = RunReport {
        problem_id: problem.id().to_string(),
        report: out.report,
        note: out.note,
        config: cfg.clone(),
    };
    fs::write(cfg.output_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(if converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

/// `t, x_*, v1_*, w1_*, ..., force_norm, alpha, beta, drift`; `w` columns only
/// for pairs that store `w` separately.
pub fn trajectory_csv(traj: &TrajectoryRecord, n: usize) -> String {
    let mut s = String::new();
    let Some(first) = traj.samples().first() else {
        return "t,force_norm,alpha,beta,drift\n".into();
    };
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    for (k, p) in first.state.pairs.iter().enumerate() {
        header.extend((0..n).map(|i| format!("v{}_{i}", k + 1)));
        if !p.is_aliased() {
            header.extend((0..n).map(|i| format!("w{}_{i}", k + 1)));
        }
    }
    header.extend(["force_norm", "alpha", "beta", "drift"].map(String::from));
    s.push_str(&header.join(","));
    s.push('\n');
    for sample in traj.samples() {
        let mut row: Vec<f64> = vec![sample.t];
        row.extend(sample.state.x.iter());
        for p in &sample.state.pairs {
            row.extend(p.v.iter());
            if let Some(w) = &p.w {
                row.extend(w.iter());
            }
        }
        row.extend([sample.force_norm, sample.alpha, sample.beta, sample.drift]);
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn cmd_scan(path: &Path) -> anyhow::Result<i32> {
    let cfg: ScanFile = read_config(path)?;
    let builtin = build_problem(&cfg.problem)?;
    let scan = match cfg.method {
        ScanMethod::Gad => {
            let Some(variant) = &cfg.variant else {
                bail!("{}: a GAD scan needs a \"variant\"", path.display());
            };
            basin_scan(&builtin.spec, &variant.variant(), &cfg.grid, &cfg.run)?
        }
        ScanMethod::Newton => newton_basin_scan(&builtin.spec, &cfg.grid, &cfg.newton)?,
    };
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("cannot create {}", cfg.output_dir.display()))?;
    fs::write(cfg.output_dir.join("basin.csv"), scan.to_csv())?;
    for (label, count) in scan.label_counts() {
        let target = usize::try_from(label)
            .ok()
            .map(|l| format!("{:?}", scan.limit_points[l]))
            .unwrap_or_else(|| if label == -1 { "diverged".into() } else { "unconverged".into() });
        println!("label {label:>3}: {count:>7} cells -> {target}");
    }
    Ok(EXIT_OK)
}

fn timed<F: FnOnce() -> anyhow::Result<(bool, String)>>(name: &str, f: F) -> PropertyResult {
    let start = Instant::now();
    let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e:#}")));
    PropertyResult {
        name: name.into(),
        pass,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// The self-check battery behind `gad verify`.
pub fn verify_battery(n_random: usize, seed: u64) -> VerifySummary {
    let properties = vec![
        timed("spectrum_theorem", || {
            let cases = spectrum_battery(n_random, seed, &[2, 3, 4, 5, 6, 7, 8])?;
            let worst = cases.iter().map(|c| c.max_error).fold(0.0, f64::max);
            Ok((worst <= 1e-4, format!("{} systems, worst matched-pair error {worst:.3e}", cases.len())))
        }),
        timed("stability_iff_index1", || {
            let v = stability_equivalence_violations(n_random.max(1) * 10, seed)?;
            Ok((v == 0, format!("{v} violations")))
        }),
        timed("deflation_spectrum", || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst: f64 = 0.0;
            for k in 0..n_random.clamp(1, 50) {
                worst = worst.max(deflation_case(&mut rng, 2 + k % 7)?);
            }
            Ok((worst <= 1e-8, format!("worst error {worst:.3e}")))
        }),
        timed("alpha_equals_beta_at_fixed_points", || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let variant = GadVariant::new(VariantKind::Index1General);
            let cfg = crate::jacobian::JvpConfig::default();
            let mut worst: f64 = 0.0;
            for k in 0..n_random.clamp(1, 50) {
                let n = 2 + k % 7;
                let sys = crate::verify::random_system(&mut rng, n, k % 2 == 1);
                for i in 0..n {
                    let e = crate::dynamics::evaluate(&sys.problem, &sys.fixed_point_state(i)?, &variant, &cfg)?;
                    worst = worst.max((e.alpha - e.beta).abs()).max(crate::model::inf_norm(&e.dx));
                }
            }
            Ok((worst <= 1e-10, format!("worst |alpha - beta| or |dx| {worst:.3e}")))
        }),
    ];
    VerifySummary {
        n_random,
        seed,
        all_pass: properties.iter().all(|p| p.pass),
        properties,
    }
}

pub fn cmd_verify(n_random: usize, seed: u64, output_dir: &Path) -> anyhow::Result<i32> {
    let summary = verify_battery(n_random, seed);
    for p in &summary.properties {
        println!("{} {:<36} {} ({:.2}s)", if p.pass { "PASS" } else { "FAIL" }, p.name, p.detail, p.seconds);
    }
    fs::create_dir_all(output_dir).with_context(|| format!("cannot create {}", output_dir.display()))?;
    fs::write(output_dir.join("verify.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(if summary.all_pass { EXIT_OK } else { EXIT_ERROR })
}
