//! Run configuration: line-based `key = value` text with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! repeated keys are errors. Relative paths are taken relative to the
//! directory holding the config file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::discretize::{DomainSpec, GridSpec, PotentialSpec};
use crate::error::{Error, Result};
use crate::greens::{Method, Preconditioner, DEFAULT_CG_TOL};
use crate::scheme::{BoundsPolicy, InitMode, SchemeConfig, DEFAULT_EPS, DEFAULT_MAX_STEPS};

pub const DEFAULT_REFERENCE_TOL: f64 = 1e-10;
pub const DEFAULT_REFERENCE_MAX_ITER: usize = 20_000;
/// Shift used for soft-Coulomb problems when `problem.sigma` is absent.
pub const COULOMB_DEFAULT_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PotentialChoice {
    Zero,
    Harmonic { coeff: f64 },
    /// `softening = None` resolves to half the smallest grid spacing.
    SoftCoulomb { charge: f64, softening: Option<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: Vec<usize>,
    pub potential: PotentialChoice,
    pub c_lap: f64,
    pub sigma: f64,
}

impl ProblemConfig {
    pub fn domain(&self) -> Result<DomainSpec> {
        DomainSpec::new(self.lower.clone(), self.upper.clone())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::new(self.points.clone())
    }

    pub fn potential_spec(&self) -> Result<PotentialSpec> {
        Ok(match self.potential {
            PotentialChoice::Zero => PotentialSpec::Zero,
            PotentialChoice::Harmonic { coeff } => PotentialSpec::Harmonic { coeff },
            PotentialChoice::SoftCoulomb { charge, softening } => {
                let softening = match softening {
                    Some(s) => s,
                    None => {
                        let h = self.grid().spacing(&self.domain()?);
                        0.5 * h.iter().cloned().fold(f64::INFINITY, f64::min)
                    }
                };
                PotentialSpec::SoftCoulomb { charge, softening }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodChoice {
    Auto,
    Direct,
    ConjugateGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub method: MethodChoice,
    pub inner_tol: f64,
    pub max_iter: Option<usize>,
    pub preconditioner: Preconditioner,
}

impl SolverConfig {
    pub fn resolve(&self, d: &crate::discretize::Discretization) -> Method {
        let cg = || {
            let Method::ConjugateGradient { max_iter, .. } = Method::cg_default(d.ng()) else {
                unreachable!()
            };
            Method::ConjugateGradient {
                tol: self.inner_tol,
                max_iter: self.max_iter.unwrap_or(max_iter),
                preconditioner: self.preconditioner,
            }
        };
        match self.method {
            MethodChoice::Direct => Method::DirectFactorization,
            MethodChoice::ConjugateGradient => cg(),
            MethodChoice::Auto => match Method::auto(d) {
                Method::DirectFactorization => Method::DirectFactorization,
                Method::ConjugateGradient { .. } => cg(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub history_csv: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Final block (solve) or reference block (reference), QSEV1 format.
    pub state: Option<PathBuf>,
    /// Combined table written by `tau-sweep`.
    pub sweep_csv: Option<PathBuf>,
    pub emit_summary: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceChoice {
    Oracle { tol: f64, max_iter: usize },
    None,
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub solver: SolverConfig,
    pub scheme: SchemeConfig,
    pub n_eig: usize,
    pub outputs: OutputConfig,
    pub reference: ReferenceChoice,
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = {value}: expected {what}"))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>().map_err(|_| bad(key, v, "a number"))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn parse_list<T>(key: &str, v: &str, f: fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(|s| f(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn join<T: std::fmt::Debug>(xs: &[T]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

const KNOWN_KEYS: &[&str] = &[
    "problem.dim",
    "problem.lower",
    "problem.upper",
    "problem.points",
    "problem.potential",
    "problem.harmonic_coeff",
    "problem.charge",
    "problem.softening",
    "problem.c_lap",
    "problem.sigma",
    "solver.method",
    "solver.inner_tol",
    "solver.max_iter",
    "solver.preconditioner",
    "scheme.tau",
    "scheme.eps",
    "scheme.max_steps",
    "scheme.init",
    "scheme.seed",
    "scheme.init_path",
    "scheme.enforce_bounds",
    "n_eig",
    "outputs.history_csv",
    "outputs.report",
    "outputs.state",
    "outputs.sweep_csv",
    "outputs.emit_summary",
    "reference.kind",
    "reference.tol",
    "reference.max_iter",
    "reference.path",
];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// Parses config text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: missing '='", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KNOWN_KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key '{k}'", lineno + 1)));
            }
            if kv.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", lineno + 1)));
            }
        }
        let get = |k: &str| kv.get(k).map(String::as_str);
        let path_of = |k: &str| get(k).map(|v| base.join(v));

        let dim = get("problem.dim").map(|v| parse_usize("problem.dim", v)).transpose()?;
        let lower = parse_list("problem.lower", get("problem.lower").unwrap_or("-5.5"), parse_f64)?;
        let upper = parse_list("problem.upper", get("problem.upper").unwrap_or("5.5"), parse_f64)?;
        let points = parse_list("problem.points", get("problem.points").unwrap_or("79"), parse_usize)?;
        // Single values broadcast; with no explicit lists the default is 2D.
        let longest = lower.len().max(upper.len()).max(points.len());
        let d = dim.unwrap_or(if longest == 1 { 2 } else { longest });
        let lower = if lower.len() == 1 { vec![lower[0]; d] } else { lower };
        let upper = if upper.len() == 1 { vec![upper[0]; d] } else { upper };
        let points = if points.len() == 1 { vec![points[0]; d] } else { points };
        if lower.len() != d || upper.len() != d || points.len() != d {
            return Err(Error::Config(format!(
                "problem dimensions disagree: dim {d}, lower {}, upper {}, points {}",
                lower.len(),
                upper.len(),
                points.len()
            )));
        }

        let potential_name = get("problem.potential").unwrap_or("harmonic");
        let potential = match potential_name {
            "zero" => PotentialChoice::Zero,
            "harmonic" => PotentialChoice::Harmonic {
                coeff: get("problem.harmonic_coeff")
                    .map(|v| parse_f64("problem.harmonic_coeff", v))
                    .transpose()?
                    .unwrap_or(0.5),
            },
            "soft_coulomb" => PotentialChoice::SoftCoulomb {
                charge: get("problem.charge")
                    .map(|v| parse_f64("problem.charge", v))
                    .transpose()?
                    .unwrap_or(1.0),
                softening: get("problem.softening")
                    .map(|v| parse_f64("problem.softening", v))
                    .transpose()?,
            },
            other => return Err(bad("problem.potential", other, "zero, harmonic or soft_coulomb")),
        };
        let stray = match potential {
            PotentialChoice::Harmonic { .. } => ["problem.charge", "problem.softening"].as_slice(),
            PotentialChoice::SoftCoulomb { .. } => ["problem.harmonic_coeff"].as_slice(),
            PotentialChoice::Zero => ["problem.charge", "problem.softening", "problem.harmonic_coeff"].as_slice(),
        };
        if let Some(k) = stray.iter().find(|k| kv.contains_key(**k)) {
            return Err(Error::Config(format!("{k} does not apply to potential {potential_name}")));
        }
        let default_sigma = match potential {
            PotentialChoice::SoftCoulomb { .. } => COULOMB_DEFAULT_SIGMA,
            _ => 0.0,
        };
        let problem = ProblemConfig {
            lower,
            upper,
            points,
            potential,
            c_lap: get("problem.c_lap").map(|v| parse_f64("problem.c_lap", v)).transpose()?.unwrap_or(0.5),
            sigma: get("problem.sigma")
                .map(|v| parse_f64("problem.sigma", v))
                .transpose()?
                .unwrap_or(default_sigma),
        };

        let solver = SolverConfig {
            method: match get("solver.method").unwrap_or("auto") {
                "auto" => MethodChoice::Auto,
                "direct" => MethodChoice::Direct,
                "cg" => MethodChoice::ConjugateGradient,
                other => return Err(bad("solver.method", other, "auto, direct or cg")),
            },
            inner_tol: get("solver.inner_tol")
                .map(|v| parse_f64("solver.inner_tol", v))
                .transpose()?
                .unwrap_or(DEFAULT_CG_TOL),
            max_iter: get("solver.max_iter").map(|v| parse_usize("solver.max_iter", v)).transpose()?,
            preconditioner: match get("solver.preconditioner").unwrap_or("jacobi") {
                "jacobi" => Preconditioner::Jacobi,
                "none" => Preconditioner::None,
                other => return Err(bad("solver.preconditioner", other, "jacobi or none")),
            },
        };

        let seed = get("scheme.seed")
            .map(|v| v.parse::<u64>().map_err(|_| bad("scheme.seed", v, "an unsigned 64-bit integer")))
            .transpose()?
            .unwrap_or(42);
        let init_mode = match get("scheme.init").unwrap_or("quasi_stiefel") {
            "raw" => InitMode::RawRandom { seed },
            "quasi_stiefel" => InitMode::QuasiStiefelScaled { seed },
            "orthonormal" => InitMode::Orthonormal { seed },
            "file" => InitMode::FromState(
                path_of("scheme.init_path")
                    .ok_or_else(|| Error::Config("scheme.init = file needs scheme.init_path".into()))?,
            ),
            other => return Err(bad("scheme.init", other, "raw, quasi_stiefel, orthonormal or file")),
        };
        if kv.contains_key("scheme.init_path") && !matches!(init_mode, InitMode::FromState(_)) {
            return Err(Error::Config("scheme.init_path requires scheme.init = file".into()));
        }
        let mut scheme = SchemeConfig::new(
            get("scheme.tau").map(|v| parse_f64("scheme.tau", v)).transpose()?.unwrap_or(0.1),
        );
        scheme.eps = get("scheme.eps").map(|v| parse_f64("scheme.eps", v)).transpose()?.unwrap_or(DEFAULT_EPS);
        scheme.max_steps = get("scheme.max_steps")
            .map(|v| parse_usize("scheme.max_steps", v))
            .transpose()?
            .unwrap_or(DEFAULT_MAX_STEPS);
        scheme.init_mode = init_mode;
        scheme.enforce_bounds = match get("scheme.enforce_bounds").unwrap_or("warn") {
            "warn" => BoundsPolicy::Warn,
            "reject" => BoundsPolicy::Reject,
            other => return Err(bad("scheme.enforce_bounds", other, "warn or reject")),
        };

        let n_eig = get("n_eig").map(|v| parse_usize("n_eig", v)).transpose()?.unwrap_or(8);

        let outputs = OutputConfig {
            history_csv: path_of("outputs.history_csv"),
            report: path_of("outputs.report"),
            state: path_of("outputs.state"),
            sweep_csv: path_of("outputs.sweep_csv"),
            emit_summary: get("outputs.emit_summary")
                .map(|v| parse_bool("outputs.emit_summary", v))
                .transpose()?
                .unwrap_or(true),
        };

        let reference = match get("reference.kind").unwrap_or("oracle") {
            "oracle" => ReferenceChoice::Oracle {
                tol: get("reference.tol")
                    .map(|v| parse_f64("reference.tol", v))
                    .transpose()?
                    .unwrap_or(DEFAULT_REFERENCE_TOL),
                max_iter: get("reference.max_iter")
                    .map(|v| parse_usize("reference.max_iter", v))
                    .transpose()?
                    .unwrap_or(DEFAULT_REFERENCE_MAX_ITER),
            },
            "none" => ReferenceChoice::None,
            "file" => ReferenceChoice::File {
                path: path_of("reference.path")
                    .ok_or_else(|| Error::Config("reference.kind = file needs reference.path".into()))?,
            },
            other => return Err(bad("reference.kind", other, "oracle, none or file")),
        };

        let cfg = RunConfig {
            problem,
            solver,
            scheme,
            n_eig,
            outputs,
            reference,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_eig == 0 {
            return Err(Error::Config("n_eig must be at least 1".into()));
        }
        self.problem.domain()?;
        if self.problem.points.iter().any(|&n| n < 2) {
            return Err(Error::Config("problem.points must be at least 2 per axis".into()));
        }
        if self.n_eig > self.problem.points.iter().product::<usize>() {
            return Err(Error::Config("n_eig exceeds the number of grid nodes".into()));
        }
        if !(self.problem.sigma >= 0.0 && self.problem.sigma.is_finite()) {
            return Err(Error::Config(format!("problem.sigma must be >= 0, got {}", self.problem.sigma)));
        }
        if !(self.solver.inner_tol > 0.0) {
            return Err(Error::Config("solver.inner_tol must be positive".into()));
        }
        self.scheme.validate().map_err(|e| Error::Config(e.to_string()))?;
        for p in self.output_paths() {
            let parent = match p.parent() {
                Some(q) if !q.as_os_str().is_empty() => q,
                _ => Path::new("."),
            };
            if !parent.is_dir() {
                return Err(Error::Config(format!(
                    "output directory {} does not exist",
                    parent.display()
                )));
            }
            if p.is_dir() {
                return Err(Error::Config(format!("output path {} is a directory", p.display())));
            }
        }
        Ok(())
    }

    pub fn output_paths(&self) -> Vec<&Path> {
        [
            &self.outputs.history_csv,
            &self.outputs.report,
            &self.outputs.state,
            &self.outputs.sweep_csv,
        ]
        .into_iter()
        .flatten()
        .map(PathBuf::as_path)
        .collect()
    }

    /// Writes every field explicitly. Paths are written as stored, so
    /// parsing the output with an empty base reproduces `self`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let p = &self.problem;
        let _ = writeln!(s, "problem.dim = {}", p.lower.len());
        let _ = writeln!(s, "problem.lower = {}", join(&p.lower));
        let _ = writeln!(s, "problem.upper = {}", join(&p.upper));
        let _ = writeln!(s, "problem.points = {}", join(&p.points));
        match p.potential {
            PotentialChoice::Zero => {
                let _ = writeln!(s, "problem.potential = zero");
            }
            PotentialChoice::Harmonic { coeff } => {
                let _ = writeln!(s, "problem.potential = harmonic");
                let _ = writeln!(s, "problem.harmonic_coeff = {coeff:?}");
            }
            PotentialChoice::SoftCoulomb { charge, softening } => {
                let _ = writeln!(s, "problem.potential = soft_coulomb");
                let _ = writeln!(s, "problem.charge = {charge:?}");
                if let Some(e) = softening {
                    let _ = writeln!(s, "problem.softening = {e:?}");
                }
            }
        }
        let _ = writeln!(s, "problem.c_lap = {:?}", p.c_lap);
        let _ = writeln!(s, "problem.sigma = {:?}", p.sigma);

        let method = match self.solver.method {
            MethodChoice::Auto => "auto",
            MethodChoice::Direct => "direct",
            MethodChoice::ConjugateGradient => "cg",
        };
        let _ = writeln!(s, "solver.method = {method}");
        let _ = writeln!(s, "solver.inner_tol = {:?}", self.solver.inner_tol);
        if let Some(m) = self.solver.max_iter {
            let _ = writeln!(s, "solver.max_iter = {m}");
        }
        let pre = match self.solver.preconditioner {
            Preconditioner::Jacobi => "jacobi",
            Preconditioner::None => "none",
        };
        let _ = writeln!(s, "solver.preconditioner = {pre}");

        let sc = &self.scheme;
        let _ = writeln!(s, "scheme.tau = {:?}", sc.tau);
        let _ = writeln!(s, "scheme.eps = {:?}", sc.eps);
        let _ = writeln!(s, "scheme.max_steps = {}", sc.max_steps);
        match &sc.init_mode {
            InitMode::RawRandom { seed } => {
                let _ = writeln!(s, "scheme.init = raw\nscheme.seed = {seed}");
            }
            InitMode::QuasiStiefelScaled { seed } => {
                let _ = writeln!(s, "scheme.init = quasi_stiefel\nscheme.seed = {seed}");
            }
            InitMode::Orthonormal { seed } => {
                let _ = writeln!(s, "scheme.init = orthonormal\nscheme.seed = {seed}");
            }
            InitMode::FromState(path) => {
                let _ = writeln!(s, "scheme.init = file\nscheme.init_path = {}", path.display());
            }
        }
        let policy = match sc.enforce_bounds {
            BoundsPolicy::Warn => "warn",
            BoundsPolicy::Reject => "reject",
        };
        let _ = writeln!(s, "scheme.enforce_bounds = {policy}");
        let _ = writeln!(s, "n_eig = {}", self.n_eig);

        let o = &self.outputs;
        for (key, path) in [
            ("outputs.history_csv", &o.history_csv),
            ("outputs.report", &o.report),
            ("outputs.state", &o.state),
            ("outputs.sweep_csv", &o.sweep_csv),
        ] {
            if let Some(path) = path {
                let _ = writeln!(s, "{key} = {}", path.display());
            }
        }
        let _ = writeln!(s, "outputs.emit_summary = {}", o.emit_summary);
        match &self.reference {
            ReferenceChoice::Oracle { tol, max_iter } => {
                let _ = writeln!(s, "reference.kind = oracle\nreference.tol = {tol:?}\nreference.max_iter = {max_iter}");
            }
            ReferenceChoice::None => {
                let _ = writeln!(s, "reference.kind = none");
            }
            ReferenceChoice::File { path } => {
                let _ = writeln!(s, "reference.kind = file\nreference.path = {}", path.display());
            }
        }
        s
    }
}
