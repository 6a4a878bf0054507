use std::fmt;
use std::path::{Path, PathBuf};

use ghive::io::{atomic_write, load_dataset, read_csv, read_vector, write_matrix_csv, Preprocessing};
use ghive::linalg::serde_matrix;
use ghive::simgen::fstar_oracle as run_fstar;
use ghive::{
    confidence_interval_scaled, ghive_fit, make_truth, metrics, rep_seed, run_experiment, sample_dataset, Contrast,
    Dataset, ExperimentKind, ExperimentSpec, FitControl, FitMode, GhiveError, GhiveFit, GlmFamily, InferenceResult,
    SimConfig, SimTruth,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{ExperimentArg, FitArgs, FstarArgs, InferArgs, ReproduceArgs, SimulateArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(GhiveError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<GhiveError> for CliError {
    fn from(e: GhiveError) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = Result<T, CliError>;

/// On-disk form of a fit: the estimate plus what is needed to rebuild the
/// design matrix.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitFile {
    pub format: String,
    pub x: PathBuf,
    pub y: PathBuf,
    pub preprocessing: Option<Preprocessing>,
    #[serde(flatten)]
    pub fit: GhiveFit,
}

const FIT_FORMAT: &str = "ghive-fit/1";

#[derive(Debug, Serialize)]
struct InferenceFile<'a> {
    fit: &'a Path,
    /// The supplied `u` or `v` did not have unit norm.
    renormalized: bool,
    #[serde(flatten)]
    result: InferenceResult,
}

#[derive(Debug, Serialize)]
struct FstarFile<'a> {
    config: &'a SimConfig,
    n_mc: usize,
    #[serde(with = "serde_matrix")]
    f_star: DMatrix<f64>,
    /// `P_B^perp F*`
    #[serde(with = "serde_matrix")]
    projected: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    theta: DMatrix<f64>,
    bias1: f64,
    bias2: f64,
    converged: Vec<bool>,
    grad_norm: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct TruthFile<'a> {
    config: &'a SimConfig,
    #[serde(flatten)]
    truth: &'a SimTruth,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(GhiveError::from)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|source| {
        CliError::Core(GhiveError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn read_config(path: &Path) -> CliResult<SimConfig> {
    let text = read_text(path)?;
    let cfg: SimConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|source| {
        CliError::Core(GhiveError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn parse_mode(k: &str, projector: Option<&Path>) -> CliResult<FitMode> {
    let k = k.trim();
    let count = if k.eq_ignore_ascii_case("auto") {
        None
    } else {
        Some(
            k.parse::<usize>()
                .map_err(|_| CliError::Usage(format!("--k must be `auto` or a non-negative integer, got {k:?}")))?,
        )
    };
    match (count, projector) {
        (None | Some(0), Some(path)) => Ok(FitMode::OracleP(read_csv(path)?.rows)),
        (Some(_), Some(_)) => Err(CliError::Usage(
            "--projector cannot be combined with a positive --k".into(),
        )),
        (Some(0), None) => Err(CliError::Usage("--k 0 requires --projector".into())),
        (Some(k), None) => Ok(FitMode::OracleK(k)),
        (None, None) => Ok(FitMode::DataDriven),
    }
}

pub fn fit(args: FitArgs) -> CliResult<()> {
    let mode = parse_mode(&args.k, args.projector.as_deref())?;
    let family = GlmFamily::from(args.family);
    let (data, preprocessing) = load_dataset(&args.x, &args.y, family, args.center)?;
    let fit = ghive_fit(&data, family, args.seed, &mode, FitControl::default())?;
    let file = FitFile {
        format: FIT_FORMAT.into(),
        x: args.x,
        y: args.y,
        preprocessing,
        fit,
    };
    write_json(&args.out, &file)
}

/// `e<i>` with a 1-based index, or a vector file.
fn parse_direction(spec: &str, dim: usize, flag: &str) -> CliResult<DVector<f64>> {
    if let Some(idx) = spec.strip_prefix('e').and_then(|s| s.parse::<usize>().ok()) {
        if idx == 0 || idx > dim {
            return Err(CliError::Usage(format!("{flag} {spec}: index must lie in 1..={dim}")));
        }
        let mut v = DVector::zeros(dim);
        v[idx - 1] = 1.0;
        return Ok(v);
    }
    Ok(read_vector(Path::new(spec))?)
}

fn load_for_fit(file: &FitFile, x: &Path, y: &Path) -> CliResult<Dataset> {
    let (data, prep) = load_dataset(x, y, file.fit.family, file.preprocessing.is_some())?;
    if data.n() != file.fit.split.n() || data.p() != file.fit.p() || data.m() != file.fit.m() {
        return Err(CliError::Core(GhiveError::Dimension(format!(
            "data are {}x{} with {} responses but the fit was made on {}x{} with {}",
            data.n(),
            data.p(),
            data.m(),
            file.fit.split.n(),
            file.fit.p(),
            file.fit.m()
        ))));
    }
    if prep != file.preprocessing {
        return Err(CliError::Usage(
            "the covariates differ from those the fit was made on (column means or scales changed)".into(),
        ));
    }
    Ok(data)
}

pub fn infer(args: InferArgs) -> CliResult<()> {
    let text = read_text(&args.fit)?;
    let file: FitFile =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", args.fit.display())))?;
    if file.format != FIT_FORMAT {
        return Err(CliError::Usage(format!(
            "{}: unsupported format {:?}",
            args.fit.display(),
            file.format
        )));
    }
    let data = load_for_fit(&file, &args.x, &args.y)?;
    let u = parse_direction(&args.u, file.fit.m(), "--u")?;
    let v = parse_direction(&args.v, file.fit.p(), "--v")?;
    let (contrast, renormalized) = Contrast::new(u, v)?;
    if renormalized {
        log::warn!("u and v were rescaled to unit norm");
    }
    let result = confidence_interval_scaled(&file.fit, &data, &contrast, args.alpha, args.se_scale.into())?;
    let out = InferenceFile {
        fit: &args.fit,
        renormalized,
        result,
    };
    match &args.out {
        Some(path) => write_json(path, &out),
        None => {
            let text = serde_json::to_string_pretty(&out).map_err(GhiveError::from)?;
            println!("{text}");
            Ok(())
        }
    }
}

fn headers(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|j| format!("{prefix}{j}")).collect()
}

pub fn simulate(args: SimulateArgs) -> CliResult<()> {
    let cfg = read_config(&args.config)?;
    let truth = make_truth(&cfg)?;
    create_dir(&args.out)?;
    let hx = headers("x", cfg.p);
    let hy = headers("y", cfg.m_dim);
    for rep in 0..cfg.reps {
        let data = sample_dataset(&truth, &cfg, rep_seed(cfg.seed, rep as u64))?;
        let suffix = if cfg.reps == 1 {
            String::new()
        } else {
            format!("_{rep}")
        };
        write_matrix_csv(&args.out.join(format!("x{suffix}.csv")), data.x(), Some(&hx))?;
        write_matrix_csv(&args.out.join(format!("y{suffix}.csv")), data.y(), Some(&hy))?;
    }
    write_json(
        &args.out.join("truth.json"),
        &TruthFile {
            config: &cfg,
            truth: &truth,
        },
    )
}

pub fn reproduce(args: ReproduceArgs) -> CliResult<()> {
    let kind = match args.experiment {
        ExperimentArg::Fig1Bias => ExperimentKind::Fig1Bias,
        ExperimentArg::Fig1Eta => ExperimentKind::Fig1Eta,
        ExperimentArg::Fig2N => ExperimentKind::Fig2N,
        ExperimentArg::Fig2M => ExperimentKind::Fig2M,
        ExperimentArg::Table1 => ExperimentKind::Table1Coverage,
    };
    let mut spec = ExperimentSpec::preset(kind, args.full_scale, args.seed);
    if let Some(reps) = args.reps {
        spec.reps = reps;
    }
    if let Some(n_mc) = args.n_mc {
        spec.n_mc = n_mc;
    }
    spec.validate()?;
    let result = run_experiment(&spec)?;
    if result.failures() > 0 {
        log::warn!("{} replications failed; see the long CSV", result.failures());
    }
    let (long, summary) = result.write_csv(&args.out)?;
    println!("{}", long.display());
    println!("{}", summary.display());
    Ok(())
}

pub fn fstar_oracle(args: FstarArgs) -> CliResult<()> {
    let cfg = read_config(&args.config)?;
    let truth = make_truth(&cfg)?;
    let f = run_fstar(&truth, &cfg, args.n_mc, FitControl::default())?;
    if f.converged.iter().any(|c| !c) {
        log::warn!("the F* fit did not converge for every response");
    }
    let m = metrics(&truth.theta, &truth, Some(&f.values), None)?;
    let out = FstarFile {
        config: &cfg,
        n_mc: args.n_mc,
        projected: &truth.p_b_perp * &f.values,
        f_star: f.values,
        theta: truth.theta.clone(),
        bias1: m.bias1.unwrap_or(f64::NAN),
        bias2: m.bias2.unwrap_or(f64::NAN),
        converged: f.converged,
        grad_norm: f.grad_norm,
    };
    write_json(&args.out, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_flags() {
        assert_eq!(parse_mode("auto", None).unwrap(), FitMode::DataDriven);
        assert_eq!(parse_mode("3", None).unwrap(), FitMode::OracleK(3));
        assert_eq!(parse_mode("0", None).unwrap_err().exit_code(), 2);
        assert!(parse_mode("two", None).is_err());
        assert!(parse_mode("2", Some(Path::new("p.csv"))).is_err());
    }

    #[test]
    fn direction_shorthand() {
        assert_eq!(
            parse_direction("e2", 3, "--u").unwrap(),
            DVector::from_vec(vec![0.0, 1.0, 0.0])
        );
        assert!(parse_direction("e0", 3, "--u").is_err());
        assert!(parse_direction("e4", 3, "--u").is_err());
        assert_eq!(parse_direction("nofile.csv", 3, "--u").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn numerical_errors_map_to_one() {
        assert_eq!(CliError::Core(GhiveError::Numerical("x".into())).exit_code(), 1);
        assert_eq!(CliError::Core(GhiveError::Dimension("x".into())).exit_code(), 2);
    }
}
