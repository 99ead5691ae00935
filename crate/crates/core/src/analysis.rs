//! Finite-depth divergence certificates, density checks over all cells of
//! the first levels, Monte-Carlo convergence experiments, and report output.

use std::fmt;
use std::io::Write;

use num::{One, Signed, Zero};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filtration::{CellId, KPoint};
use crate::martingale::Martingale;
use crate::rational::{self, Rational};

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    LimsupAtLeast(Rational),
    LiminfAtMost(Rational),
    OscAtLeast(Rational),
    Approach { value: Rational, within: Rational },
}

impl Target {
    /// `limsup>=M`, `liminf<=M`, `osc>=c`, or `approach=v+-eps`.
    pub fn parse(text: &str) -> Result<Self> {
        let t: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        if let Some(rest) = t.strip_prefix("limsup>=") {
            return Ok(Target::LimsupAtLeast(rational::parse(rest)?));
        }
        if let Some(rest) = t.strip_prefix("liminf<=") {
            return Ok(Target::LiminfAtMost(rational::parse(rest)?));
        }
        if let Some(rest) = t.strip_prefix("osc>=") {
            return Ok(Target::OscAtLeast(rational::parse(rest)?));
        }
        if let Some(rest) = t.strip_prefix("approach=") {
            if let Some((v, e)) = rest.split_once("+-") {
                let within = rational::parse(e)?;
                if within.is_negative() {
                    return Err(Error::Parse("approach radius must be non-negative".into()));
                }
                return Ok(Target::Approach { value: rational::parse(v)?, within });
            }
        }
        Err(Error::Parse(format!(
            "target {text:?}: expected limsup>=M, liminf<=M, osc>=c or approach=v+-eps"
        )))
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::LimsupAtLeast(m) => write!(f, "limsup>={}", rational::format(m)),
            Target::LiminfAtMost(m) => write!(f, "liminf<={}", rational::format(m)),
            Target::OscAtLeast(c) => write!(f, "osc>={}", rational::format(c)),
            Target::Approach { value, within } => {
                write!(f, "approach={}+-{}", rational::format(value), rational::format(within))
            }
        }
    }
}

/// Truncation of the limit conditions: every `n <= n_bound` and every
/// tolerance `1/k`, `k <= k_bound`, must be met by some level in
/// `[n, horizon]`.
#[derive(Clone, Debug)]
pub struct Truncation {
    pub horizon: usize,
    pub n_bound: usize,
    pub k_bound: usize,
}

impl Truncation {
    /// `n_bound = horizon`, `k_bound = 8`.
    pub fn at(horizon: usize) -> Self {
        Truncation { horizon, n_bound: horizon, k_bound: 8 }
    }
}

#[derive(Clone, Debug)]
pub struct Certificate {
    pub target: Target,
    pub truncation: Truncation,
    /// `(i, f_i(x))` for `1 <= i <= horizon`.
    pub evidence: Vec<(usize, Rational)>,
    /// Label of the level-`horizon` cell of `x`.
    pub endpoint: String,
    /// First unmet `(k, n)`.
    pub failure: Option<(usize, usize)>,
    point: KPoint,
}

impl Certificate {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }

    /// Recomputes the evidence from `m`; true iff every value matches.
    pub fn replay(&self, m: &Martingale) -> Result<bool> {
        let mut x = self.point.clone();
        let values = m.eval_along(&mut x, self.truncation.horizon)?;
        Ok(values.iter().zip(&self.evidence).all(|(v, (_, e))| v == e)
            && values.len() == self.evidence.len())
    }
}

/// Suffix extrema of the values, and of the distance to an approach value.
struct Suffix {
    max: Vec<Rational>,
    min: Vec<Rational>,
}

impl Suffix {
    fn new(values: &[Rational]) -> Self {
        let mut max = values.to_vec();
        let mut min = values.to_vec();
        for i in (0..values.len().saturating_sub(1)).rev() {
            if max[i + 1] > max[i] {
                max[i] = max[i + 1].clone();
            }
            if min[i + 1] < min[i] {
                min[i] = min[i + 1].clone();
            }
        }
        Suffix { max, min }
    }
}

/// Whether some level in the suffix starting at `i` meets `target`
/// up to `tol`. `dist` holds suffix minima of `|f - v|` for approach targets.
fn met(target: &Target, s: &Suffix, dist: &[Rational], i: usize, tol: &Rational) -> bool {
    match target {
        Target::LimsupAtLeast(m) => s.max[i] > m - tol,
        Target::LiminfAtMost(m) => s.min[i] < m + tol,
        Target::OscAtLeast(c) => &s.max[i] - &s.min[i] > c - tol,
        // the radius is the tolerance; `k` plays no role
        Target::Approach { within, .. } => &dist[i] <= within,
    }
}

pub fn divergence_certificate(
    m: &Martingale,
    x: &KPoint,
    target: Target,
    truncation: Truncation,
) -> Result<Certificate> {
    let filt = m.filtration().clone();
    let mut point = x.clone();
    let horizon = truncation.horizon;
    if truncation.n_bound > horizon || truncation.n_bound == 0 || truncation.k_bound == 0 {
        return Err(Error::param("need 1 <= n_bound <= horizon and k_bound >= 1"));
    }
    let values = m.eval_along(&mut point, horizon)?;
    let endpoint = filt.label(point.cell_at(&filt, horizon)?);
    let suffix = Suffix::new(&values);
    let dist = match &target {
        Target::Approach { value, .. } => {
            let d: Vec<Rational> = values.iter().map(|v| (v - value).abs()).collect();
            Suffix::new(&d).min
        }
        _ => Vec::new(),
    };
    let mut failure = None;
    'outer: for k in 1..=truncation.k_bound {
        let tol = Rational::new(One::one(), (k as i64).into());
        for n in 1..=truncation.n_bound {
            if !met(&target, &suffix, &dist, n - 1, &tol) {
                failure = Some((k, n));
                break 'outer;
            }
        }
    }
    let evidence = values.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect();
    Ok(Certificate { target, truncation, evidence, endpoint, failure, point })
}

/// One witness produced for a cell by a builder.
pub struct WitnessCase {
    pub point: KPoint,
    pub horizon: usize,
    pub target: Target,
    /// Whether the construction's own exact identity held along the path.
    pub exact: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DensityFailure {
    pub cell: String,
    pub target: String,
    pub exact: bool,
    pub k: Option<usize>,
    pub n: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DensityReport {
    pub depth: usize,
    pub cells: usize,
    pub witnesses: usize,
    pub failures: Vec<DensityFailure>,
}

impl DensityReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs `builder` on every cell of levels `1..=depth` and certifies each
/// witness it returns.
pub fn density_check(
    m: &Martingale,
    depth: usize,
    mut builder: impl FnMut(CellId) -> Result<Vec<WitnessCase>>,
) -> Result<DensityReport> {
    let filt = m.filtration().clone();
    let mut report = DensityReport { depth, cells: 0, witnesses: 0, failures: Vec::new() };
    for level in 1..=depth {
        for &c in filt.level_cells(level)?.iter() {
            report.cells += 1;
            for case in builder(c)? {
                report.witnesses += 1;
                let cert = divergence_certificate(m, &case.point, case.target.clone(), Truncation::at(case.horizon))?;
                let through = {
                    let mut p = case.point.clone();
                    p.cell_at(&filt, level)? == c
                };
                if !case.exact || !cert.passed() || !through {
                    report.failures.push(DensityFailure {
                        cell: filt.label(c),
                        target: case.target.to_string(),
                        exact: case.exact && through,
                        k: cert.failure.map(|f| f.0),
                        n: cert.failure.map(|f| f.1),
                    });
                }
            }
        }
    }
    Ok(report)
}

// ------------------------------------------------------------ sampling

#[derive(Clone, Debug)]
pub struct SampleReport {
    pub trials: usize,
    pub depth: usize,
    pub seed: u64,
    /// Inclusive level window for the oscillation.
    pub window: (usize, usize),
    /// `max - min` of `f_i(x)` over the window, per trial.
    pub oscillations: Vec<Rational>,
    /// Trials with `f_depth(x) != 0`.
    pub nonzero_at_depth: usize,
}

impl SampleReport {
    pub fn divergent(&self) -> usize {
        self.oscillations.iter().filter(|o| !o.is_zero()).count()
    }

    pub fn divergent_fraction(&self) -> Rational {
        Rational::new((self.divergent() as i64).into(), (self.trials as i64).into())
    }

    /// Compares the fraction of trials with nonzero oscillation to
    /// `bound + 3σ`, `σ = sqrt(bound (1 - bound) / trials)`.
    pub fn against_bound(&self, bound: &Rational) -> BoundCheck {
        let p = rational::to_f64(bound).clamp(0.0, 1.0);
        let sigma = (p * (1.0 - p) / self.trials as f64).sqrt();
        let fraction = self.divergent_fraction();
        let passed = rational::to_f64(&fraction) <= p + 3.0 * sigma;
        BoundCheck { fraction, bound: bound.clone(), sigma, passed }
    }
}

#[derive(Clone, Debug)]
pub struct BoundCheck {
    pub fraction: Rational,
    pub bound: Rational,
    pub sigma: f64,
    pub passed: bool,
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed ^ (trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Samples `trials` points of depth `depth` under the path measure with
/// per-trial seeds derived from `seed`.
pub fn monte_carlo_convergence(
    m: &Martingale,
    trials: usize,
    depth: usize,
    window: (usize, usize),
    seed: u64,
) -> Result<SampleReport> {
    let (lo, hi) = window;
    if lo == 0 || lo > hi || hi > depth {
        return Err(Error::param(format!("window {lo}..={hi} must lie in 1..={depth}")));
    }
    if trials == 0 {
        return Err(Error::param("trials must be positive"));
    }
    let filt = m.filtration().clone();
    let mut oscillations = Vec::with_capacity(trials);
    let mut nonzero = 0;
    for t in 0..trials {
        let mut x = filt.sample_point(depth, trial_seed(seed, t))?;
        let values = m.eval_along(&mut x, depth)?;
        let w = &values[lo - 1..hi];
        let max = w.iter().max().expect("nonempty window");
        let min = w.iter().min().expect("nonempty window");
        oscillations.push(max - min);
        if !values[depth - 1].is_zero() {
            nonzero += 1;
        }
    }
    Ok(SampleReport { trials, depth, seed, window, oscillations, nonzero_at_depth: nonzero })
}

// ------------------------------------------------------------ reports

/// Decimal approximation with its precision.
#[derive(Clone, Debug, Serialize)]
pub struct Approx {
    pub decimal: String,
    pub digits: usize,
}

pub const REPORT_DIGITS: usize = 6;

pub fn approx(value: &Rational) -> Approx {
    Approx { decimal: rational::to_decimal(value, REPORT_DIGITS), digits: REPORT_DIGITS }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvidenceRow {
    pub level: usize,
    pub value: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct CertificateJson {
    pub target: String,
    pub horizon: usize,
    pub n_bound: usize,
    pub k_bound: usize,
    pub endpoint: String,
    pub passed: bool,
    pub failure: Option<(usize, usize)>,
    pub evidence: Vec<EvidenceRow>,
}

impl From<&Certificate> for CertificateJson {
    fn from(c: &Certificate) -> Self {
        CertificateJson {
            target: c.target.to_string(),
            horizon: c.truncation.horizon,
            n_bound: c.truncation.n_bound,
            k_bound: c.truncation.k_bound,
            endpoint: c.endpoint.clone(),
            passed: c.passed(),
            failure: c.failure,
            evidence: c
                .evidence
                .iter()
                .map(|(l, v)| EvidenceRow { level: *l, value: rational::format(v) })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleJson {
    pub trials: usize,
    pub depth: usize,
    pub seed: u64,
    pub window: (usize, usize),
    pub divergent: usize,
    pub divergent_fraction: String,
    pub divergent_fraction_approx: Approx,
    pub nonzero_at_depth: usize,
    pub max_oscillation: String,
    pub bound: Option<String>,
    pub bound_sigma: Option<Approx>,
    pub bound_passed: Option<bool>,
}

impl SampleJson {
    pub fn new(r: &SampleReport, check: Option<&BoundCheck>) -> Self {
        let fraction = r.divergent_fraction();
        SampleJson {
            trials: r.trials,
            depth: r.depth,
            seed: r.seed,
            window: r.window,
            divergent: r.divergent(),
            divergent_fraction: rational::format(&fraction),
            divergent_fraction_approx: approx(&fraction),
            nonzero_at_depth: r.nonzero_at_depth,
            max_oscillation: rational::format(&r.oscillations.iter().max().cloned().unwrap_or_default()),
            bound: check.map(|c| rational::format(&c.bound)),
            bound_sigma: check.map(|c| Approx {
                decimal: format!("{:.*}", REPORT_DIGITS, c.sigma),
                digits: REPORT_DIGITS,
            }),
            bound_passed: check.map(|c| c.passed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl Format {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Parse(format!("format must be json or csv, got {other:?}"))),
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize, W: Write>(data: &T, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, data)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// `trial,osc_num,osc_den`, one row per trial.
pub fn write_sample_csv<W: Write>(report: &SampleReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trial", "osc_num", "osc_den"])?;
    for (t, o) in report.oscillations.iter().enumerate() {
        w.write_record([t.to_string(), o.numer().to_string(), o.denom().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtration::{Extension, Filtration};
    use crate::rational::int;

    #[test]
    fn zero_fails_oscillation_at_first_pair() {
        let f = Filtration::dyadic();
        let z = Martingale::zero(f.clone());
        let x = KPoint::from_chain(&f, vec![f.root()], Extension::Canonical).unwrap();
        let c = divergence_certificate(&z, &x, Target::OscAtLeast(int(1)), Truncation::at(5)).unwrap();
        assert_eq!(c.failure, Some((1, 1)));
        assert!(c.replay(&z).unwrap());
    }

    #[test]
    fn targets_round_trip() {
        for t in ["limsup>=3", "liminf<=-1", "osc>=1/2", "approach=1+-1/32"] {
            assert_eq!(Target::parse(t).unwrap().to_string(), t);
        }
        assert!(Target::parse("limsup>3").is_err());
    }

    #[test]
    fn zero_sample_is_flat_and_csv_is_stable() {
        let f = Filtration::dyadic();
        let z = Martingale::zero(f);
        let r = monte_carlo_convergence(&z, 20, 10, (3, 10), 1).unwrap();
        assert_eq!(r.divergent(), 0);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_sample_csv(&r, &mut a).unwrap();
        write_sample_csv(&monte_carlo_convergence(&z, 20, 10, (3, 10), 1).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        assert!(String::from_utf8(a).unwrap().starts_with("trial,osc_num,osc_den\n0,0,1\n"));
    }

    #[test]
    fn vacuous_density() {
        let f = Filtration::dyadic();
        let z = Martingale::zero(f);
        let r = density_check(&z, 0, |_| unreachable!()).unwrap();
        assert!(r.passed());
        assert_eq!(r.cells, 0);
    }
}
