//! Run configuration: a TOML tree with defaults, validated into library types.

use std::path::PathBuf;

use mvop::measure::{FlowState, MeasureSpec};
use mvop::mindex::MultiIndex;
use mvop::suites::{FdSettings, SUITES};
use mvop::toda::FlowDerivativeConfig;
use nalgebra::DMatrix;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: line {line}, column {column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },

    #[error("{path}{}: field `{field}`: {message}", line.map_or_else(String::new, |l| format!(":{l}")))]
    Invalid { path: PathBuf, field: String, line: Option<usize>, message: String },

    #[error("usage: {0}")]
    Usage(String),
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub levels: Option<usize>,
    pub buffer: Option<usize>,
    pub quad_order: Option<usize>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub tolerance_scale: Option<f64>,
    pub suites: Option<Vec<String>>,
    pub measure: Option<RawMeasure>,
    pub flow: Option<RawFlow>,
    pub fd: Option<RawFd>,
    pub miwa: Option<RawMiwa>,
    pub output: Option<RawOutput>,
    pub convergence: Option<RawConvergence>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RawMeasure {
    pub dim: Option<usize>,
    pub weight: Option<String>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub domain: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RawFlow {
    pub n: Option<Vec<Vec<f64>>>,
    pub q: Option<Vec<f64>>,
    pub m: Option<Vec<i32>>,
    pub times: Option<Vec<RawTime>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTime {
    pub index: Vec<u32>,
    pub value: f64,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RawFd {
    pub h: Option<f64>,
    pub h_higher: Option<f64>,
    pub h_fourth: Option<f64>,
    pub richardson: Option<bool>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RawMiwa {
    pub ratio: Option<f64>,
    pub kmax: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RawOutput {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RawConvergence {
    pub steps: Option<Vec<f64>>,
}

/// Validated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub spec: MeasureSpec,
    pub levels: usize,
    pub buffer: usize,
    pub quad_order: usize,
    pub seed: u64,
    pub samples: usize,
    pub tolerance_scale: f64,
    pub suites: Vec<String>,
    pub state: FlowState,
    pub fd: FdSettings,
    pub miwa_ratio: f64,
    pub miwa_kmax: usize,
    pub out_dir: PathBuf,
    pub steps: Vec<f64>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub suites: Option<Vec<String>>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub quad_order: Option<usize>,
    pub levels: Option<usize>,
    pub tolerance_scale: Option<f64>,
    pub steps: Option<Vec<f64>>,
}

/// Line of `key` inside table `table` (empty for the root), 1-based.
fn find_line(text: &str, table: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[') {
            current = h.trim_start_matches('[').trim_end_matches(']').trim().to_string();
            if current == table && key.is_empty() {
                return Some(i + 1);
            }
            continue;
        }
        if current == table {
            if let Some(rest) = line.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, column)
}

/// Default direction matrix: identity with `0.3` above and `−0.2` below the diagonal.
pub fn default_directions(dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |a, b| {
        if a == b {
            1.0
        } else if b == a + 1 {
            0.3
        } else if a == b + 1 {
            -0.2
        } else {
            0.0
        }
    })
}

pub fn default_offsets(dim: usize) -> Vec<f64> {
    (0..dim).map(|a| if a % 2 == 0 { -2.5 - 0.05 * a as f64 } else { 2.4 }).collect()
}

pub const DEFAULT_STEPS: [f64; 3] = mvop::suites::CONVERGENCE_STEPS;

pub struct Loader<'a> {
    path: PathBuf,
    text: &'a str,
}

impl<'a> Loader<'a> {
    pub fn new(path: impl Into<PathBuf>, text: &'a str) -> Self {
        Self { path: path.into(), text }
    }

    fn invalid(&self, table: &str, key: &str, message: impl Into<String>) -> ConfigError {
        let field = if table.is_empty() { key.to_string() } else { format!("{table}.{key}") };
        ConfigError::Invalid {
            path: self.path.clone(),
            field,
            line: find_line(self.text, table, key).or_else(|| find_line(self.text, table, "")),
            message: message.into(),
        }
    }

    pub fn parse(&self) -> Result<RawConfig, ConfigError> {
        toml::from_str(self.text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(self.text, s.start));
            ConfigError::Parse { path: self.path.clone(), line, column, message: e.message().to_string() }
        })
    }

    pub fn load(&self, ov: &Overrides) -> Result<RunConfig, ConfigError> {
        let raw = self.parse()?;
        self.validate(raw, ov)
    }

    fn validate(&self, raw: RawConfig, ov: &Overrides) -> Result<RunConfig, ConfigError> {
        let m = raw.measure.unwrap_or_default();
        let dim = m.dim.unwrap_or(2);
        if !(1..=4).contains(&dim) {
            return Err(self.invalid("measure", "dim", "dimension must be between 1 and 4"));
        }
        let domain: Vec<(f64, f64)> = match m.domain {
            Some(d) => d.into_iter().map(|[a, b]| (a, b)).collect(),
            None => vec![(-1.0, 1.0); dim],
        };
        if domain.len() != dim {
            return Err(self.invalid("measure", "domain", format!("expected {dim} intervals, got {}", domain.len())));
        }
        if domain.iter().any(|&(a, b)| !(a.is_finite() && b.is_finite() && a < b)) {
            return Err(self.invalid("measure", "domain", "each interval needs finite bounds a < b"));
        }
        let weight = m.weight.unwrap_or_else(|| "lebesgue".into());
        let mut spec = match weight.as_str() {
            "lebesgue" => {
                if m.alpha.is_some() || m.beta.is_some() {
                    return Err(self.invalid("measure", "alpha", "lebesgue weight takes no exponents"));
                }
                MeasureSpec::lebesgue(dim)
            }
            "jacobi" => {
                let (a, b) = (m.alpha.unwrap_or(0.5), m.beta.unwrap_or(0.5));
                if a <= -1.0 || b <= -1.0 {
                    return Err(self.invalid("measure", "alpha", "jacobi exponents must exceed -1"));
                }
                MeasureSpec::jacobi(dim, a, b)
            }
            other => return Err(self.invalid("measure", "weight", format!("unknown weight '{other}' (lebesgue, jacobi)"))),
        };
        spec.domain = domain;
        if spec.domain.iter().any(|&(a, b)| (a, b) != (-1.0, 1.0)) {
            spec.description = format!("{} on {:?}", spec.description, spec.domain);
        }

        let levels = ov.levels.or(raw.levels).unwrap_or(5);
        if levels < 2 {
            return Err(self.invalid("", "levels", "truncation needs at least 2 levels"));
        }
        let buffer = raw.buffer.unwrap_or(3);
        if buffer < 1 {
            return Err(self.invalid("", "buffer", "buffer needs at least 1 level"));
        }
        let quad_order = ov.quad_order.or(raw.quad_order).unwrap_or(if dim <= 2 { 64 } else { 32 });
        if quad_order < 1 {
            return Err(self.invalid("", "quad_order", "quadrature order must be positive"));
        }
        let samples = raw.samples.unwrap_or(20);
        if samples < 1 {
            return Err(self.invalid("", "samples", "need at least one sample point"));
        }
        let tolerance_scale = ov.tolerance_scale.or(raw.tolerance_scale).unwrap_or(1.0);
        if !(tolerance_scale > 0.0 && tolerance_scale.is_finite()) {
            return Err(self.invalid("", "tolerance_scale", "must be positive"));
        }
        let suites = ov
            .suites
            .clone()
            .or(raw.suites)
            .unwrap_or_else(|| SUITES.iter().map(|s| s.to_string()).collect());
        if let Some(bad) = suites.iter().find(|s| !SUITES.contains(&s.as_str())) {
            return Err(self.invalid("", "suites", format!("unknown suite '{bad}' (known: {})", SUITES.join(", "))));
        }

        let f = raw.flow.unwrap_or_default();
        let n = match f.n {
            Some(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(self.invalid("flow", "n", format!("N must be {dim}×{dim}")));
                }
                DMatrix::from_fn(dim, dim, |a, b| rows[a][b])
            }
            None => default_directions(dim),
        };
        if n.determinant().abs() < 1e-12 {
            return Err(self.invalid("flow", "n", "direction matrix N must be invertible"));
        }
        let q = f.q.unwrap_or_else(|| default_offsets(dim));
        if q.len() != dim {
            return Err(self.invalid("flow", "q", format!("expected {dim} offsets")));
        }
        if let Some(a) = q.iter().position(|v| *v == 0.0 || !v.is_finite()) {
            return Err(self.invalid(
                "flow",
                "q",
                format!("offset q[{a}] must be nonzero: every discrete flow factor n_a·x − q_a needs q_a ≠ 0"),
            ));
        }
        let mvec = f.m.unwrap_or_else(|| vec![0; dim]);
        if mvec.len() != dim {
            return Err(self.invalid("flow", "m", format!("expected {dim} integers")));
        }
        let times = match f.times {
            Some(t) => t,
            None => vec![
                RawTime { index: MultiIndex::unit(dim, 0).exps().to_vec(), value: 0.2 },
                RawTime { index: MultiIndex::unit(dim, dim - 1).add_axis(dim - 1).exps().to_vec(), value: -0.1 },
            ],
        };
        let mut state = FlowState::new(n, q).with_m(mvec);
        for t in &times {
            if t.index.len() != dim {
                return Err(self.invalid("flow", "times", format!("time index {:?} needs {dim} entries", t.index)));
            }
            let mi = MultiIndex::new(t.index.clone());
            if mi.is_empty() {
                return Err(self.invalid("flow", "times", "the level-0 time is a trivial rescaling and is not allowed"));
            }
            if !t.value.is_finite() {
                return Err(self.invalid("flow", "times", "time values must be finite"));
            }
            state = state.with_time(&mi, t.value);
        }
        state.validate(&spec).map_err(|e| self.invalid("flow", "m", e.to_string()))?;

        let fd_raw = raw.fd.unwrap_or_default();
        let defaults = FdSettings::default();
        let richardson = fd_raw.richardson.unwrap_or(true);
        let step = |key: &str, v: Option<f64>, d: f64| -> Result<FlowDerivativeConfig, ConfigError> {
            FlowDerivativeConfig::new(v.unwrap_or(d), richardson).map_err(|e| self.invalid("fd", key, e.to_string()))
        };
        let fd = FdSettings {
            first: step("h", fd_raw.h, defaults.first.h)?,
            higher: step("h_higher", fd_raw.h_higher, defaults.higher.h)?,
            fourth: step("h_fourth", fd_raw.h_fourth, defaults.fourth.h)?,
        };

        let miwa = raw.miwa.unwrap_or_default();
        let miwa_ratio = miwa.ratio.unwrap_or(1.0 / 3.0);
        if !(miwa_ratio > 0.0 && miwa_ratio < 1.0) {
            return Err(self.invalid("miwa", "ratio", "ratio r/|q| must lie in (0, 1)"));
        }
        let miwa_kmax = miwa.kmax.unwrap_or(11);
        if miwa_kmax < 8 {
            return Err(self.invalid("miwa", "kmax", "kmax must be at least 8"));
        }

        let out_dir = ov
            .out
            .clone()
            .or_else(|| raw.output.and_then(|o| o.dir))
            .unwrap_or_else(|| PathBuf::from("mvop-out"));
        let steps = ov
            .steps
            .clone()
            .or_else(|| raw.convergence.and_then(|c| c.steps))
            .unwrap_or_else(|| DEFAULT_STEPS.to_vec());
        if steps.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(self.invalid("convergence", "steps", "step sizes must be positive"));
        }

        Ok(RunConfig {
            spec,
            levels,
            buffer,
            quad_order,
            seed: ov.seed.or(raw.seed).unwrap_or(0),
            samples,
            tolerance_scale,
            suites,
            state,
            fd,
            miwa_ratio,
            miwa_kmax,
            out_dir,
            steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<RunConfig, ConfigError> {
        Loader::new("test.toml", text).load(&Overrides::default())
    }

    #[test]
    fn defaults() {
        let c = load("").unwrap();
        assert_eq!(c.spec.dim, 2);
        assert_eq!((c.levels, c.buffer, c.quad_order), (5, 3, 64));
        assert_eq!(c.suites.len(), SUITES.len());
        assert_eq!(c.state.q, vec![-2.5, 2.4]);
    }

    #[test]
    fn zero_offset_is_rejected_with_line() {
        let err = load("[measure]\ndim = 2\n\n[flow]\nq = [-2.5, 0.0]\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("test.toml:5"), "{msg}");
        assert!(msg.contains("flow.q") && msg.contains("nonzero"), "{msg}");
    }

    #[test]
    fn unknown_field_reports_position() {
        let err = load("levels = 4\nlevles = 3\n").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_suite() {
        let err = load("suites = [\"orthogonality\", \"nope\"]\n").unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn explicit_flow() {
        let c = load(
            "[measure]\ndim = 1\nweight = \"jacobi\"\nalpha = 0.5\nbeta = 0.5\n[flow]\nn = [[1.0]]\nq = [3.0]\n[[flow.times]]\nindex = [2]\nvalue = -0.3\n",
        )
        .unwrap();
        assert_eq!(c.state.time_level(2)[0], -0.3);
        assert_eq!(c.quad_order, 64);
    }
}
