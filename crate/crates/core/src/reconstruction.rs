//! Direct reconstruction of `(A, γ)` from singles and twofold rates taken
//! with the coherent beam blocked and with its phase scanned.
//!
//! Conventions: `γ` is made real and non-negative by the choice of output
//! phases, the scan origin of the first coherent input defines `φ = 0`, and
//! the second input's response `μ` has `arg μ_r = 0` on its first usable
//! mode `r`. Rates are ratios to the vacuum rate of the same phase bin.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hafnian::DetectionPattern;
use crate::io::fmt_f64;
use crate::linalg::{c, cis, CMatrix};
use crate::metrics::tvd_slices;
use crate::probability::{collision_free_patterns, distribution_from_kernel, ModelSpec, Prepared, DEFAULT_BUDGET};
use crate::state::{gauge_fix, state_from_a, AMatrix, GammaVector, GaussianState};

/// Which beam illuminates the circuit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Blocked,
    Input1,
    Input2,
}

impl Setting {
    pub fn label(&self) -> &'static str {
        match self {
            Setting::Blocked => "blocked",
            Setting::Input1 => "input1",
            Setting::Input2 => "input2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "blocked" => Ok(Setting::Blocked),
            "input1" => Ok(Setting::Input1),
            "input2" => Ok(Setting::Input2),
            other => Err(Error::invalid(format!("unknown setting '{other}'"))),
        }
    }
}

/// Index of the pair `j < k` in a packed upper triangle.
pub fn pair_index(d: usize, j: usize, k: usize) -> usize {
    let (j, k) = if j < k { (j, k) } else { (k, j) };
    j * (2 * d - j - 1) / 2 + (k - j - 1)
}

pub fn pair_count(d: usize) -> usize {
    d * d.saturating_sub(1) / 2
}

fn pairs(d: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..d).flat_map(move |j| (j + 1..d).map(move |k| (j, k)))
}

/// Wraps to `[−π, π)`.
pub fn wrap_phase(x: f64) -> f64 {
    let y = x - 2.0 * PI * ((x + PI) / (2.0 * PI)).floor();
    if y >= PI {
        y - 2.0 * PI
    } else {
        y
    }
}

/// Counts collected in one phase bin, or in the whole blocked run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseBin {
    pub phi: f64,
    pub pulses: f64,
    /// Vacuum counts. Rates are taken relative to them when present and per
    /// pulse otherwise.
    pub vacuum: Option<f64>,
    pub singles: Vec<f64>,
    /// Packed upper triangle `j < k`.
    pub pairs: Vec<f64>,
    /// Two photons in one mode; photon-number resolving detection only.
    pub collisions: Option<Vec<f64>>,
    /// Collision-free threefolds in `collision_free_patterns(d, 3)` order.
    pub threefolds: Option<Vec<f64>>,
}

impl PhaseBin {
    pub fn empty(d: usize, phi: f64, pulses: f64) -> Self {
        Self {
            phi,
            pulses,
            vacuum: None,
            singles: vec![0.0; d],
            pairs: vec![0.0; pair_count(d)],
            collisions: None,
            threefolds: None,
        }
    }

    pub fn denominator(&self) -> f64 {
        self.vacuum.unwrap_or(self.pulses)
    }

    pub fn rate(&self, counts: f64) -> f64 {
        counts / self.denominator()
    }

    /// Poisson error of a rate, with a one-count floor so empty bins keep a
    /// finite weight in fits.
    fn weight_sigma(&self, counts: f64) -> f64 {
        counts.max(1.0).sqrt() / self.denominator()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub setting: Setting,
    pub d: usize,
    pub bins: Vec<PhaseBin>,
}

impl MeasurementRecord {
    pub fn new(setting: Setting, d: usize, bins: Vec<PhaseBin>) -> Result<Self> {
        if bins.is_empty() {
            return Err(Error::invalid(format!("{} record has no bins", setting.label())));
        }
        let n3 = crate::probability::pattern_count(d, 3, true) as usize;
        for b in &bins {
            if !(b.pulses > 0.0) || !b.phi.is_finite() {
                return Err(Error::invalid("bins need positive pulse totals and finite phases"));
            }
            if b.singles.len() != d
                || b.pairs.len() != pair_count(d)
                || b.collisions.as_ref().is_some_and(|v| v.len() != d)
                || b.threefolds.as_ref().is_some_and(|v| v.len() != n3)
            {
                return Err(Error::dim(format!("bin at phi = {} does not match d = {d}", b.phi)));
            }
            let all = b
                .singles
                .iter()
                .chain(&b.pairs)
                .chain(b.collisions.iter().flatten())
                .chain(b.threefolds.iter().flatten())
                .chain(b.vacuum.iter());
            for &x in all {
                if !(x >= 0.0) || x > b.pulses {
                    return Err(Error::invalid(format!(
                        "count {x} outside [0, pulses] at phi = {}",
                        b.phi
                    )));
                }
            }
            if b.vacuum == Some(0.0) {
                return Err(Error::invalid("vacuum counts must be positive when given"));
            }
        }
        Ok(Self { setting, d, bins })
    }

    pub fn total_pulses(&self) -> f64 {
        self.bins.iter().map(|b| b.pulses).sum()
    }

    fn aggregate(&self, counts: impl Fn(&PhaseBin) -> f64) -> (f64, f64) {
        let n: f64 = self.bins.iter().map(&counts).sum();
        let den: f64 = self.bins.iter().map(|b| b.denominator()).sum();
        (n / den, n.sqrt() / den)
    }

    /// Phase-averaged single rate and its Poisson error.
    pub fn single_rate(&self, j: usize) -> (f64, f64) {
        self.aggregate(|b| b.singles[j])
    }

    pub fn pair_rate(&self, j: usize, k: usize) -> (f64, f64) {
        let i = pair_index(self.d, j, k);
        self.aggregate(|b| b.pairs[i])
    }

    pub fn has_collisions(&self) -> bool {
        self.bins.iter().all(|b| b.collisions.is_some())
    }

    pub fn collision_rate(&self, j: usize) -> Option<(f64, f64)> {
        self.has_collisions()
            .then(|| self.aggregate(|b| b.collisions.as_ref().unwrap()[j]))
    }

    fn series(&self, counts: impl Fn(&PhaseBin) -> f64) -> Series {
        let mut s = Series::default();
        for b in &self.bins {
            let n = counts(b);
            s.phi.push(b.phi);
            s.values.push(b.rate(n));
            s.sigmas.push(b.weight_sigma(n));
            s.denominators.push(b.denominator());
        }
        s
    }

    pub fn pair_series(&self, j: usize, k: usize) -> Series {
        let i = pair_index(self.d, j, k);
        self.series(|b| b.pairs[i])
    }

    pub fn collision_series(&self, j: usize) -> Option<Series> {
        self.has_collisions()
            .then(|| self.series(|b| b.collisions.as_ref().unwrap()[j]))
    }
}

/// Rates against the scanned phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Series {
    pub phi: Vec<f64>,
    pub values: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Vacuum counts (or pulses) each rate is relative to.
    pub denominators: Vec<f64>,
}

fn modes_field(modes: &[usize]) -> String {
    modes.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(" ")
}

/// One row per pattern and bin: `setting,phi,modes,counts,pulses`. Modes are
/// space separated; an empty field is the vacuum and a repeated mode a
/// two-photon collision.
pub fn write_records_csv<W: Write>(records: &[MeasurementRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["setting", "phi", "modes", "counts", "pulses"])?;
    for r in records {
        let triples = collision_free_patterns(r.d, 3);
        for b in &r.bins {
            let phi = fmt_f64(b.phi);
            let pulses = fmt_f64(b.pulses);
            let mut row = |modes: &[usize], n: f64| {
                out.write_record([r.setting.label(), &phi, &modes_field(modes), &fmt_f64(n), &pulses])
            };
            if let Some(v) = b.vacuum {
                row(&[], v)?;
            }
            for (j, &n) in b.singles.iter().enumerate() {
                row(&[j], n)?;
            }
            for (j, k) in pairs(r.d) {
                row(&[j, k], b.pairs[pair_index(r.d, j, k)])?;
            }
            if let Some(col) = &b.collisions {
                for (j, &n) in col.iter().enumerate() {
                    row(&[j, j], n)?;
                }
            }
            if let Some(t) = &b.threefolds {
                for (p, &n) in triples.iter().zip(t) {
                    row(&p.occupied(), n)?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_records_csv(records: &[MeasurementRecord], path: &Path) -> Result<()> {
    write_records_csv(records, std::fs::File::create(path)?)
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    setting: String,
    phi: String,
    modes: String,
    counts: f64,
    pulses: f64,
}

/// Inverse of [`write_records_csv`]. The mode count is the largest mode
/// index plus one; bins are keyed by `(setting, phi)` in order of first
/// appearance.
pub fn read_records_csv<R: Read>(r: R) -> Result<Vec<MeasurementRecord>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let mut rows = Vec::new();
    let mut d = 0usize;
    for (line, row) in reader.deserialize::<CsvRow>().enumerate() {
        let row = row?;
        let setting = Setting::parse(&row.setting)?;
        let phi = if row.phi.trim().is_empty() {
            0.0
        } else {
            row.phi
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("row {}: bad phi: {e}", line + 2)))?
        };
        let mut modes = row
            .modes
            .split_whitespace()
            .map(|m| m.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::invalid(format!("row {}: bad modes: {e}", line + 2)))?;
        modes.sort_unstable();
        if modes.len() > 3 || (modes.len() == 3 && (modes[0] == modes[1] || modes[1] == modes[2])) {
            return Err(Error::invalid(format!(
                "row {}: only vacuum, singles, pairs, collisions and distinct threefolds are recorded",
                line + 2
            )));
        }
        if let Some(&m) = modes.last() {
            d = d.max(m + 1);
        }
        rows.push((setting, phi, modes, row.counts, row.pulses));
    }
    let triples: HashMap<Vec<usize>, usize> = collision_free_patterns(d, 3)
        .into_iter()
        .enumerate()
        .map(|(i, p)| (p.occupied(), i))
        .collect();
    let mut order: Vec<(Setting, u64)> = Vec::new();
    let mut bins: HashMap<(Setting, u64), PhaseBin> = HashMap::new();
    for (setting, phi, modes, counts, pulses) in rows {
        let key = (setting, phi.to_bits());
        let bin = bins.entry(key).or_insert_with(|| {
            order.push(key);
            PhaseBin::empty(d, phi, pulses)
        });
        if bin.pulses != pulses {
            return Err(Error::invalid(format!(
                "inconsistent pulse totals in {} bin at phi = {phi}",
                setting.label()
            )));
        }
        match modes.as_slice() {
            [] => bin.vacuum = Some(counts),
            [j] => bin.singles[*j] = counts,
            [j, k] if j == k => bin.collisions.get_or_insert_with(|| vec![0.0; d])[*j] = counts,
            [j, k] => bin.pairs[pair_index(d, *j, *k)] = counts,
            triple => {
                let n = triples.len();
                bin.threefolds.get_or_insert_with(|| vec![0.0; n])[triples[triple]] = counts
            }
        }
    }
    let mut records: Vec<MeasurementRecord> = Vec::new();
    for key in order {
        let bin = bins.remove(&key).expect("bin recorded");
        match records.iter_mut().find(|r| r.setting == key.0) {
            Some(r) => r.bins.push(bin),
            None => records.push(MeasurementRecord {
                setting: key.0,
                d,
                bins: vec![bin],
            }),
        }
    }
    records
        .into_iter()
        .map(|r| MeasurementRecord::new(r.setting, r.d, r.bins))
        .collect()
}

pub fn load_records_csv(path: &Path) -> Result<Vec<MeasurementRecord>> {
    read_records_csv(std::fs::File::open(path)?)
}

/// `a + b cos(2φ + c)` fitted by linear least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FringeFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// χ² per degree of freedom (residual variance when unweighted).
    pub residual: f64,
    /// Covariance of `(a, b, c)`.
    pub covariance: [[f64; 3]; 3],
    /// Number of 2π windows averaged.
    pub windows: usize,
}

impl FringeFit {
    pub fn eval(&self, phi: f64) -> f64 {
        self.a + self.b * (2.0 * phi + self.c).cos()
    }

    pub fn sigma_a(&self) -> f64 {
        self.covariance[0][0].sqrt()
    }

    pub fn sigma_b(&self) -> f64 {
        self.covariance[1][1].sqrt()
    }

    pub fn sigma_c(&self) -> f64 {
        self.covariance[2][2].sqrt()
    }
}

/// Linear parameters `(a, p, q)` of `a + p cos 2φ + q sin 2φ`.
#[derive(Debug, Clone, Copy)]
struct LinearFit {
    theta: Vector3<f64>,
    cov: Matrix3<f64>,
    residual: f64,
}

fn fit_linear(phi: &[f64], values: &[f64], sigmas: Option<&[f64]>) -> Result<LinearFit> {
    let n = phi.len();
    if values.len() != n || sigmas.is_some_and(|s| s.len() != n) {
        return Err(Error::dim("phi, values and uncertainties differ in length"));
    }
    if n < 3 {
        return Err(Error::invalid(format!("a fringe fit needs at least 3 samples, got {n}")));
    }
    let mut normal = Matrix3::<f64>::zeros();
    let mut rhs = Vector3::<f64>::zeros();
    for i in 0..n {
        let w = match sigmas {
            Some(s) if !(s[i] > 0.0) => {
                return Err(Error::invalid("fit uncertainties must be positive"));
            }
            Some(s) => 1.0 / (s[i] * s[i]),
            None => 1.0,
        };
        let x = Vector3::new(1.0, (2.0 * phi[i]).cos(), (2.0 * phi[i]).sin());
        normal += x * x.transpose() * w;
        rhs += x * (w * values[i]);
    }
    let eig = normal.symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 1e-10 * hi) {
        return Err(Error::IllConditioned {
            message: "fringe design matrix is rank deficient (degenerate phase grid)".into(),
            condition: if lo > 0.0 { hi / lo } else { f64::INFINITY },
        });
    }
    let inv = normal.try_inverse().ok_or_else(|| Error::IllConditioned {
        message: "fringe normal equations are singular".into(),
        condition: f64::INFINITY,
    })?;
    let theta = inv * rhs;
    let mut chi2 = crate::sum::NeumaierSum::new();
    for i in 0..n {
        let x = Vector3::new(1.0, (2.0 * phi[i]).cos(), (2.0 * phi[i]).sin());
        let r = values[i] - x.dot(&theta);
        let w = sigmas.map_or(1.0, |s| 1.0 / (s[i] * s[i]));
        chi2.add(w * r * r);
    }
    let dof = n.saturating_sub(3);
    let residual = if dof > 0 { chi2.value() / dof as f64 } else { 0.0 };
    let cov = match sigmas {
        Some(_) => inv,
        None => inv * residual,
    };
    Ok(LinearFit { theta, cov, residual })
}

fn to_fringe(fit: &LinearFit, windows: usize) -> FringeFit {
    let (a, p, q) = (fit.theta[0], fit.theta[1], fit.theta[2]);
    let b = p.hypot(q);
    let c = if b > 0.0 { wrap_phase((-q).atan2(p)) } else { 0.0 };
    // Jacobian of (a, b, c) with respect to (a, p, q).
    let j = if b > 0.0 {
        Matrix3::new(1.0, 0.0, 0.0, 0.0, p / b, q / b, 0.0, q / (b * b), -p / (b * b))
    } else {
        Matrix3::new(1.0, 0.0, 0.0, 0.0, std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2, 0.0, 0.0, 0.0)
    };
    let cov = j * fit.cov * j.transpose();
    let mut covariance = [[0.0; 3]; 3];
    for (r, row) in covariance.iter_mut().enumerate() {
        for (s, x) in row.iter_mut().enumerate() {
            *x = cov[(r, s)];
        }
    }
    FringeFit {
        a,
        b,
        c,
        residual: fit.residual,
        covariance,
        windows,
    }
}

/// Weighted (or unweighted when `sigmas` is `None`) fit of one fringe on the
/// basis `{1, cos 2φ, sin 2φ}`.
pub fn fit_fringe(phi: &[f64], values: &[f64], sigmas: Option<&[f64]>) -> Result<FringeFit> {
    Ok(to_fringe(&fit_linear(phi, values, sigmas)?, 1))
}

/// Minimum samples for a window to be fitted on its own.
pub const MIN_WINDOW_SAMPLES: usize = 6;

/// Splits the scan into consecutive 2π windows, fits each and averages the
/// `regions` windows with the smallest residual. Scans shorter than two full
/// windows are fitted in one piece.
pub fn fit_fringe_regions(
    phi: &[f64],
    values: &[f64],
    sigmas: Option<&[f64]>,
    regions: usize,
) -> Result<FringeFit> {
    if phi.is_empty() {
        return Err(Error::invalid("empty phase scan"));
    }
    let lo = phi.iter().copied().fold(f64::INFINITY, f64::min);
    let mut windows: Vec<Vec<usize>> = Vec::new();
    for (i, &p) in phi.iter().enumerate() {
        let w = ((p - lo) / (2.0 * PI) + 1e-9).floor() as usize;
        if windows.len() <= w {
            windows.resize_with(w + 1, Vec::new);
        }
        windows[w].push(i);
    }
    windows.retain(|w| w.len() >= MIN_WINDOW_SAMPLES);
    if windows.len() < 2 {
        return fit_fringe(phi, values, sigmas);
    }
    let mut fits: Vec<LinearFit> = Vec::new();
    for w in &windows {
        let p: Vec<f64> = w.iter().map(|&i| phi[i]).collect();
        let v: Vec<f64> = w.iter().map(|&i| values[i]).collect();
        let s: Option<Vec<f64>> = sigmas.map(|s| w.iter().map(|&i| s[i]).collect());
        if let Ok(f) = fit_linear(&p, &v, s.as_deref()) {
            fits.push(f);
        }
    }
    if fits.is_empty() {
        return fit_fringe(phi, values, sigmas);
    }
    fits.sort_by(|x, y| x.residual.total_cmp(&y.residual));
    fits.truncate(regions.max(1));
    let n = fits.len() as f64;
    let theta = fits.iter().map(|f| f.theta).sum::<Vector3<f64>>() / n;
    let cov = fits.iter().map(|f| f.cov).sum::<Matrix3<f64>>() / (n * n);
    let residual = fits.iter().map(|f| f.residual).sum::<f64>() / n;
    Ok(to_fringe(&LinearFit { theta, cov, residual }, fits.len()))
}

/// Fringe fits for every pair (and every collision outcome when recorded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFringes {
    pub d: usize,
    /// Packed upper triangle; `None` when the fit failed.
    pub pairs: Vec<Option<FringeFit>>,
    pub collisions: Option<Vec<Option<FringeFit>>>,
}

impl PairFringes {
    pub fn pair(&self, j: usize, k: usize) -> Option<&FringeFit> {
        self.pairs[pair_index(self.d, j, k)].as_ref()
    }
}

/// Floor on the expected counts behind a fit weight.
pub const MIN_EXPECTED_COUNTS: f64 = 0.5;

pub fn fit_pair_fringes(record: &MeasurementRecord, opts: &ReconstructionOptions) -> PairFringes {
    let d = record.d;
    let fit = |s: Series| {
        let first = fit_fringe_regions(&s.phi, &s.values, None, opts.regions).ok()?;
        if !opts.weighted {
            return Some(first);
        }
        // Poisson weights from the first-pass model: weights taken from the
        // observed counts favour downward fluctuations at low counts.
        let sig: Vec<f64> = s
            .phi
            .iter()
            .zip(&s.denominators)
            .map(|(&p, &den)| (first.eval(p) * den).max(MIN_EXPECTED_COUNTS).sqrt() / den)
            .collect();
        fit_fringe_regions(&s.phi, &s.values, Some(&sig), opts.regions).ok()
    };
    let all: Vec<(usize, usize)> = pairs(d).collect();
    let fits = all.par_iter().map(|&(j, k)| fit(record.pair_series(j, k))).collect();
    let collisions = record
        .has_collisions()
        .then(|| (0..d).into_par_iter().map(|j| fit(record.collision_series(j).unwrap())).collect());
    PairFringes {
        d,
        pairs: fits,
        collisions,
    }
}

/// Per-mode magnitudes with errors and the modes whose radicand was clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Amplitudes {
    pub values: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub clamped: Vec<usize>,
}

fn sqrt_sigma(value: f64, var: f64) -> f64 {
    if value > 0.0 {
        var.sqrt() / (2.0 * value)
    } else {
        var.sqrt().sqrt()
    }
}

fn record_for(records: &[MeasurementRecord], setting: Setting) -> Option<&MeasurementRecord> {
    records.iter().find(|r| r.setting == setting)
}

/// `C_jj = p_j` from the blocked singles, with `√counts / pulses` errors.
pub fn recover_c_diag(blocked: &MeasurementRecord) -> Result<(Vec<f64>, Vec<f64>)> {
    if blocked.setting != Setting::Blocked {
        return Err(Error::invalid("C diagonal needs the blocked record"));
    }
    Ok((0..blocked.d).map(|j| blocked.single_rate(j)).unzip())
}

/// `|γ_j| = √(p'_j − C_jj)`; a negative radicand is clamped to 0 and
/// reported.
pub fn recover_gamma(record: &MeasurementRecord, c_diag: &[f64], c_sigma: &[f64]) -> Result<Amplitudes> {
    if c_diag.len() != record.d || c_sigma.len() != record.d {
        return Err(Error::dim("C diagonal does not match the record"));
    }
    let mut out = Amplitudes {
        values: Vec::with_capacity(record.d),
        sigmas: Vec::with_capacity(record.d),
        clamped: Vec::new(),
    };
    for j in 0..record.d {
        let (p, s) = record.single_rate(j);
        let x = p - c_diag[j];
        if x < 0.0 {
            out.clamped.push(j);
        }
        let g = x.max(0.0).sqrt();
        out.values.push(g);
        out.sigmas.push(sqrt_sigma(g, s * s + c_sigma[j] * c_sigma[j]));
    }
    Ok(out)
}

/// Products of response amplitudes below this are treated as zero.
pub const AMPLITUDE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BEstimate {
    #[serde(with = "crate::io::matrix")]
    pub b: CMatrix,
    pub sigma_abs: Vec<Vec<f64>>,
    pub sigma_arg: Vec<Vec<f64>>,
    /// Pairs with no amplitude information (`γ_jγ_k ≈ 0`).
    pub undetermined: Vec<(usize, usize)>,
    /// Pairs whose magnitude is known but whose fringe is too weak for a phase.
    pub phase_undetermined: Vec<(usize, usize)>,
    pub diagonal_determined: Vec<bool>,
}

/// Fringe amplitude, optionally corrected for the upward bias of
/// `√(p² + q²)` under noise: `b² − tr cov(p, q)`.
fn amplitude(fit: &FringeFit, opts: &ReconstructionOptions) -> f64 {
    if !opts.debias_amplitudes {
        return fit.b;
    }
    let noise = fit.covariance[1][1] + fit.b * fit.b * fit.covariance[2][2];
    (fit.b * fit.b - noise).max(0.0).sqrt()
}

fn significant(fit: &FringeFit, opts: &ReconstructionOptions) -> bool {
    let s = fit.sigma_b();
    !(opts.min_fringe_significance > 0.0 && s > 0.0 && fit.b < opts.min_fringe_significance * s)
}

/// `|B_jk| = b / (2γ_jγ_k)` and `arg B_jk = −c` from the first-input
/// fringes. Diagonal entries use the collision fringes `b = |B_jj| γ_j²`
/// when available, or the blocked collision rate `|B_jj|² = 2(p_jj − C_jj²)`
/// for the magnitude alone.
pub fn recover_b(
    fringes: &PairFringes,
    gamma: &Amplitudes,
    blocked: &MeasurementRecord,
    c_diag: &[f64],
    opts: &ReconstructionOptions,
) -> BEstimate {
    let d = fringes.d;
    let g = &gamma.values;
    let mut est = BEstimate {
        b: CMatrix::zeros(d, d),
        sigma_abs: vec![vec![0.0; d]; d],
        sigma_arg: vec![vec![0.0; d]; d],
        undetermined: Vec::new(),
        phase_undetermined: Vec::new(),
        diagonal_determined: vec![false; d],
    };
    let set = |est: &mut BEstimate, j: usize, k: usize, abs: f64, arg: f64, sa: f64, sp: f64| {
        est.b[(j, k)] = cis(arg) * abs;
        est.b[(k, j)] = est.b[(j, k)];
        est.sigma_abs[j][k] = sa;
        est.sigma_abs[k][j] = sa;
        est.sigma_arg[j][k] = sp;
        est.sigma_arg[k][j] = sp;
    };
    for (j, k) in pairs(d) {
        let gg = g[j] * g[k];
        let Some(fit) = fringes.pair(j, k).filter(|_| gg > AMPLITUDE_FLOOR) else {
            est.undetermined.push((j, k));
            continue;
        };
        let abs = amplitude(fit, opts) / (2.0 * gg);
        let rel = |s: f64, v: f64| if v > 0.0 { s / v } else { 0.0 };
        let sa = if fit.b > 0.0 {
            abs * (rel(fit.sigma_b(), fit.b).powi(2) + rel(gamma.sigmas[j], g[j]).powi(2) + rel(gamma.sigmas[k], g[k]).powi(2)).sqrt()
        } else {
            fit.sigma_b() / (2.0 * gg)
        };
        set(&mut est, j, k, abs, -fit.c, sa, fit.sigma_c());
        if !significant(fit, opts) {
            est.phase_undetermined.push((j, k));
        }
    }
    for j in 0..d {
        let fit = fringes
            .collisions
            .as_ref()
            .and_then(|v| v[j].as_ref())
            .filter(|_| g[j] * g[j] > AMPLITUDE_FLOOR);
        if let Some(fit) = fit {
            let g2 = g[j] * g[j];
            set(&mut est, j, j, amplitude(fit, opts) / g2, -fit.c, fit.sigma_b() / g2, fit.sigma_c());
            est.diagonal_determined[j] = significant(fit, opts);
        } else if let Some((p, s)) = blocked.collision_rate(j) {
            let x = 2.0 * (p - c_diag[j] * c_diag[j]);
            let abs = x.max(0.0).sqrt();
            set(&mut est, j, j, abs, 0.0, sqrt_sigma(abs, 4.0 * s * s), 0.0);
        }
    }
    est
}

/// Off-diagonal `C` before its imaginary signs are known.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub abs: f64,
    pub re: f64,
    /// `|Im C_jk|`, meaningful when `re_valid`.
    pub im_abs: f64,
    pub sigma_abs: f64,
    pub sigma_re: f64,
    pub sigma_im: f64,
    /// Whether `Re C_jk` was determined and lies within `[−|C|, |C|]`.
    pub re_valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialC {
    pub d: usize,
    pub diag: Vec<f64>,
    pub pairs: Vec<PairEstimate>,
    pub abs_clamped: Vec<(usize, usize)>,
    /// `Re C` missing or outside `[−|C|, |C|]` beyond tolerance.
    pub invalid: Vec<(usize, usize)>,
}

impl PartialC {
    pub fn pair(&self, j: usize, k: usize) -> &PairEstimate {
        &self.pairs[pair_index(self.d, j, k)]
    }
}

/// `|C_jk|² = p_jk − p_j p_k − |B_jk|²` and
/// `Re C_jk = (a − p'_j p'_k − (p_jk − p_j p_k)) / (2γ_jγ_k)`.
pub fn recover_c_offdiag(
    blocked: &MeasurementRecord,
    input1: &MeasurementRecord,
    c_diag: &[f64],
    c_sigma: &[f64],
    gamma: &Amplitudes,
    b: &BEstimate,
    fringes: &PairFringes,
    opts: &ReconstructionOptions,
) -> PartialC {
    let d = blocked.d;
    let g = &gamma.values;
    let singles1: Vec<(f64, f64)> = (0..d).map(|j| input1.single_rate(j)).collect();
    let mut out = PartialC {
        d,
        diag: c_diag.to_vec(),
        pairs: vec![PairEstimate::default(); pair_count(d)],
        abs_clamped: Vec::new(),
        invalid: Vec::new(),
    };
    for (j, k) in pairs(d) {
        let (pjk, sjk) = blocked.pair_rate(j, k);
        let connected = pjk - c_diag[j] * c_diag[k];
        let b_abs = b.b[(j, k)].norm();
        let sb = b.sigma_abs[j][k];
        let x = connected - b_abs * b_abs;
        if x < 0.0 {
            out.abs_clamped.push((j, k));
        }
        let var_x = sjk * sjk
            + (c_diag[k] * c_sigma[j]).powi(2)
            + (c_diag[j] * c_sigma[k]).powi(2)
            + (2.0 * b_abs * sb).powi(2);
        let abs = x.max(0.0).sqrt();
        let mut e = PairEstimate {
            abs,
            sigma_abs: sqrt_sigma(abs, var_x),
            ..Default::default()
        };
        let gg = g[j] * g[k];
        match fringes.pair(j, k).filter(|_| gg > AMPLITUDE_FLOOR) {
            Some(fit) => {
                let (pj, sj) = singles1[j];
                let (pk, sk) = singles1[k];
                let re = (fit.a - pj * pk - connected) / (2.0 * gg);
                let var_re =
                    (fit.covariance[0][0] + (pk * sj).powi(2) + (pj * sk).powi(2) + sjk * sjk) / (4.0 * gg * gg);
                e.sigma_re = var_re.sqrt();
                let tol = opts.consistency_sigmas * (e.sigma_re + e.sigma_abs) + ROUNDING * abs.max(re.abs());
                if re.abs() <= abs {
                    e.re = re;
                    e.re_valid = true;
                } else if re.abs() - abs <= tol {
                    e.re = abs.copysign(re);
                    e.re_valid = true;
                } else {
                    e.re = re;
                    out.invalid.push((j, k));
                }
                if e.re_valid {
                    e.im_abs = (abs * abs - e.re * e.re).max(0.0).sqrt();
                    e.sigma_im = sqrt_sigma(e.im_abs, var_x + (2.0 * e.re * e.sigma_re).powi(2));
                }
            }
            None => {
                out.invalid.push((j, k));
            }
        }
        out.pairs[pair_index(d, j, k)] = e;
    }
    out
}

/// Relative size below which an imaginary part counts as zero.
pub const ROUNDING: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuEstimate {
    pub mu: Vec<Complex64>,
    pub abs: Amplitudes,
    /// Gauge mode with `arg μ = 0`.
    pub reference: Option<usize>,
    /// Modes with `|μ| > 0` whose phase could not be linked to the reference.
    pub phase_undetermined: Vec<usize>,
    /// Phase `θ` of the reference mode at the second input's scan origin:
    /// the response at scan phase `φ` is `μ e^{i(φ + θ)}`.
    pub scan_offset: Option<f64>,
}

/// Magnitudes from `p''_j` and phases from the second-input fringes, whose
/// phase is `arg μ_j + arg μ_k − arg B_jk` up to a common scan offset.
pub fn recover_mu(
    input2: &MeasurementRecord,
    c_diag: &[f64],
    c_sigma: &[f64],
    b: &BEstimate,
    fringes: &PairFringes,
    opts: &ReconstructionOptions,
) -> Result<MuEstimate> {
    let d = input2.d;
    let abs = recover_gamma(input2, c_diag, c_sigma)?;
    let m = &abs.values;
    let blocked_b: std::collections::HashSet<(usize, usize)> =
        b.undetermined.iter().chain(&b.phase_undetermined).copied().collect();
    // S_jk = θ_j + θ_k with its weight.
    let mut sums: HashMap<(usize, usize), (f64, f64)> = HashMap::new();
    for (j, k) in pairs(d) {
        if m[j] * m[k] <= AMPLITUDE_FLOOR || blocked_b.contains(&(j, k)) || b.b[(j, k)].norm() == 0.0 {
            continue;
        }
        if let Some(fit) = fringes.pair(j, k).filter(|f| f.b > 0.0 && significant(f, opts)) {
            let var = fit.covariance[2][2] + b.sigma_arg[j][k].powi(2);
            sums.insert((j, k), (fit.c + b.b[(j, k)].arg(), 1.0 / (var + 1e-30)));
        }
    }
    let s = |j: usize, k: usize| sums.get(&(j.min(k), j.max(k))).copied();
    let reference = (0..d).find(|&r| m[r] > 0.0 && (0..d).any(|j| j != r && s(r, j).is_some()));
    let mut out = MuEstimate {
        mu: m.iter().map(|&x| c(x, 0.0)).collect(),
        abs: abs.clone(),
        reference,
        phase_undetermined: Vec::new(),
        scan_offset: None,
    };
    let Some(r) = reference else {
        out.phase_undetermined = (0..d).filter(|&j| m[j] > 0.0).collect();
        return Ok(out);
    };
    // 2θ_r = S_rj + S_rk − S_jk over all triangles through r.
    let mut w = Complex64::new(0.0, 0.0);
    for (j, k) in pairs(d) {
        if j == r || k == r {
            continue;
        }
        if let (Some(a), Some(bb), Some(cc)) = (s(r, j), s(r, k), s(j, k)) {
            let weight = 1.0 / (1.0 / a.1 + 1.0 / bb.1 + 1.0 / cc.1);
            w += cis(a.0 + bb.0 - cc.0) * weight;
        }
    }
    if w.norm() == 0.0 {
        out.phase_undetermined = (0..d).filter(|&j| j != r && m[j] > 0.0).collect();
        return Ok(out);
    }
    let mut theta: Vec<Option<f64>> = vec![None; d];
    theta[r] = Some(w.arg() / 2.0);
    loop {
        let mut progress = false;
        for k in 0..d {
            if theta[k].is_some() || m[k] <= 0.0 {
                continue;
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..d {
                if let (Some(tj), Some(sjk)) = (theta[j], s(j, k)) {
                    acc += cis(sjk.0 - tj) * sjk.1;
                }
            }
            if acc.norm() > 0.0 {
                theta[k] = Some(acc.arg());
                progress = true;
            }
        }
        if !progress {
            break;
        }
    }
    let tr = theta[r].unwrap();
    for k in 0..d {
        match theta[k] {
            Some(t) => out.mu[k] = cis(wrap_phase(t - tr)) * m[k],
            None if m[k] > 0.0 => out.phase_undetermined.push(k),
            None => {}
        }
    }
    out.mu[r] = c(m[r], 0.0);
    out.scan_offset = Some(tr);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignResolution {
    /// Hermitian `C` with the resolved signs (provisionally `+` elsewhere).
    #[serde(with = "crate::io::matrix")]
    pub c: CMatrix,
    /// Pairs whose sign is still open (no usable second-input data).
    pub unresolved: Vec<(usize, usize)>,
    /// `μ_j`, `μ_k` nearly parallel.
    pub degenerate: Vec<(usize, usize)>,
    /// Second-input magnitude disagrees with `|Im C|` from the first input.
    pub inconsistent: Vec<(usize, usize)>,
    /// Estimates of `Im C_jk` from the second input, where available.
    pub im_estimates: Vec<Option<f64>>,
}

fn assemble_c(partial: &PartialC, sign: impl Fn(usize, usize) -> f64) -> CMatrix {
    let d = partial.d;
    let mut cm = CMatrix::zeros(d, d);
    for j in 0..d {
        cm[(j, j)] = c(partial.diag[j], 0.0);
    }
    for (j, k) in pairs(d) {
        let e = partial.pair(j, k);
        let v = c(e.re, sign(j, k) * e.im_abs);
        cm[(j, k)] = v;
        cm[(k, j)] = v.conj();
    }
    cm
}

/// `Im C_jk = (Re C_jk · Re(μ_j*μ_k) − X) / Im(μ_j*μ_k)` with
/// `X = Re(C_jk μ_j* μ_k)` read from the second-input fringe offset. The
/// sign of this estimate fixes the sign of `|Im C_jk|`.
pub fn resolve_im_sign(
    mu: &MuEstimate,
    partial: &PartialC,
    blocked: &MeasurementRecord,
    input2: &MeasurementRecord,
    fringes: &PairFringes,
    opts: &ReconstructionOptions,
) -> SignResolution {
    let d = partial.d;
    let singles2: Vec<(f64, f64)> = (0..d).map(|j| input2.single_rate(j)).collect();
    let undetermined: std::collections::HashSet<usize> = mu.phase_undetermined.iter().copied().collect();
    let mut signs = vec![1.0; pair_count(d)];
    let mut res = SignResolution {
        c: CMatrix::zeros(d, d),
        unresolved: Vec::new(),
        degenerate: Vec::new(),
        inconsistent: Vec::new(),
        im_estimates: vec![None; pair_count(d)],
    };
    for (j, k) in pairs(d) {
        let e = partial.pair(j, k);
        let needs_sign = e.re_valid && e.im_abs > ROUNDING * e.abs;
        let fit = fringes.pair(j, k);
        let usable = mu.reference.is_some() && !undetermined.contains(&j) && !undetermined.contains(&k);
        let (Some(fit), true) = (fit, usable) else {
            if needs_sign {
                res.unresolved.push((j, k));
            }
            continue;
        };
        let prod = mu.mu[j].conj() * mu.mu[k];
        let (p, q) = (prod.re, prod.im);
        let scale = mu.mu[j].norm() * mu.mu[k].norm();
        if !(scale > AMPLITUDE_FLOOR) || q.abs() < opts.degenerate_threshold * scale {
            if needs_sign {
                res.degenerate.push((j, k));
                // Keep the sign of the estimate as a provisional guess.
                if scale > AMPLITUDE_FLOOR && q != 0.0 {
                    let (pjk, _) = blocked.pair_rate(j, k);
                    let x = (fit.a - singles2[j].0 * singles2[k].0 - (pjk - partial.diag[j] * partial.diag[k])) / 2.0;
                    let im = (e.re * p - x) / q;
                    signs[pair_index(d, j, k)] = if im < 0.0 { -1.0 } else { 1.0 };
                }
            }
            continue;
        }
        let (pjk, sjk) = blocked.pair_rate(j, k);
        let connected = pjk - partial.diag[j] * partial.diag[k];
        let x = (fit.a - singles2[j].0 * singles2[k].0 - connected) / 2.0;
        let im = (e.re * p - x) / q;
        res.im_estimates[pair_index(d, j, k)] = Some(im);
        if !needs_sign {
            continue;
        }
        signs[pair_index(d, j, k)] = if im < 0.0 { -1.0 } else { 1.0 };
        let sx = (fit.covariance[0][0] + sjk * sjk).sqrt() / 2.0;
        let s_im = ((p * e.sigma_re).powi(2) + sx * sx).sqrt() / q.abs();
        let tol = opts.consistency_sigmas * (s_im * s_im + e.sigma_im * e.sigma_im).sqrt() + 1e-6 * e.abs;
        if (im.abs() - e.im_abs).abs() > tol {
            res.inconsistent.push((j, k));
        }
    }
    res.c = assemble_c(partial, |j, k| signs[pair_index(d, j, k)]);
    res
}

/// An entry of `A` whose phase is left to the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "block", rename_all = "lowercase")]
pub enum PhaseEntry {
    B { j: usize, k: usize },
    C { j: usize, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlaggedPhase {
    pub entry: PhaseEntry,
    /// Direct estimate, when the data gave one.
    pub estimate: Option<f64>,
    pub sigma: Option<f64>,
}

/// Measured threefold counts of one setting and phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreefoldData {
    pub setting: Setting,
    pub phi: f64,
    pub counts: Vec<f64>,
}

pub fn threefold_data(records: &[MeasurementRecord]) -> Vec<ThreefoldData> {
    records
        .iter()
        .flat_map(|r| {
            r.bins.iter().filter_map(move |b| {
                b.threefolds.as_ref().map(|t| ThreefoldData {
                    setting: r.setting,
                    phi: b.phi,
                    counts: t.clone(),
                })
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerOptions {
    pub restarts: usize,
    pub max_iters: u64,
    pub seed: u64,
    /// Spread of the starting phases around a direct estimate without its
    /// own error.
    pub default_spread: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iters: 400,
            seed: 0,
            default_spread: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizedPhase {
    pub entry: PhaseEntry,
    pub value: f64,
    /// Circular standard deviation over restarts.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub objective_before: f64,
    pub objective_after: f64,
    pub phases: Vec<OptimizedPhase>,
    /// Pairs whose imaginary sign was flipped.
    pub sign_flips: Vec<(usize, usize)>,
    pub restart_objectives: Vec<f64>,
    /// False when the best restart hit the iteration limit.
    pub converged: bool,
}

/// Open signs up to this count are searched exhaustively, more greedily.
pub const EXHAUSTIVE_SIGNS: usize = 10;

/// Displacement responses used to predict threefolds of each setting.
#[derive(Debug, Clone)]
pub struct Responses {
    pub input1: GammaVector,
    /// Second-input response at its scan origin.
    pub input2: Option<GammaVector>,
}

struct Objective<'a> {
    base: &'a AMatrix,
    phases: &'a [FlaggedPhase],
    signs: &'a [(usize, usize)],
    responses: &'a Responses,
    data: &'a [(ThreefoldData, Vec<f64>, f64)],
    budget: u64,
}

impl Objective<'_> {
    fn matrix(&self, x: &[f64], flips: &[bool]) -> AMatrix {
        let mut b = self.base.b().clone();
        let mut cm = self.base.c().clone();
        for (p, &t) in self.phases.iter().zip(x) {
            match p.entry {
                PhaseEntry::B { j, k } => {
                    let v = cis(t) * b[(j, k)].norm();
                    b[(j, k)] = v;
                    b[(k, j)] = v;
                }
                PhaseEntry::C { j, k } => {
                    let v = cis(t) * cm[(j, k)].norm();
                    cm[(j, k)] = v;
                    cm[(k, j)] = v.conj();
                }
            }
        }
        for (&(j, k), &f) in self.signs.iter().zip(flips) {
            if f {
                let v = cm[(j, k)].conj();
                cm[(j, k)] = v;
                cm[(k, j)] = v.conj();
            }
        }
        AMatrix::from_blocks(b, cm).expect("structure preserved")
    }

    fn value(&self, x: &[f64], flips: &[bool]) -> f64 {
        let a = self.matrix(x, flips);
        let mut total = 0.0;
        let mut weight = 0.0;
        for (d, measured, w) in self.data {
            let gamma = match d.setting {
                Setting::Blocked => GammaVector::zeros(a.modes()),
                Setting::Input1 => self.responses.input1.rotated(d.phi),
                Setting::Input2 => match &self.responses.input2 {
                    Some(m) => m.rotated(d.phi),
                    None => continue,
                },
            };
            let Ok(pred) = distribution_from_kernel(&a, &gamma, 3, ModelSpec::full(), self.budget) else {
                return 2.0;
            };
            let t = tvd_slices(measured, &pred.probabilities).unwrap_or(1.0);
            total += w * t;
            weight += w;
        }
        let tvd = if weight > 0.0 { total / weight } else { 0.0 };
        let penalty = if state_from_a(&a, &self.responses.input1).is_ok() { 0.0 } else { 1.0 };
        tvd + penalty
    }
}

struct Restart<'a, 'b> {
    obj: &'a Objective<'b>,
    flips: &'a [bool],
}

impl CostFunction for Restart<'_, '_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.obj.value(x, self.flips))
    }
}

fn circular_spread(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m: Complex64 = values.iter().map(|&t| cis(t)).sum::<Complex64>() / values.len() as f64;
    let r = m.norm().min(1.0);
    if r <= 0.0 {
        PI
    } else {
        (-2.0 * r.ln()).max(0.0).sqrt()
    }
}

/// Completes flagged phases (and open `Im C` signs) by minimising the
/// count-weighted TVD between measured and predicted threefold
/// distributions. Each restart runs Nelder–Mead from a randomised start;
/// the first restart starts at the direct estimates, and the start point is
/// kept if no restart improves on it.
pub fn optimize_undetermined_phases(
    a: &AMatrix,
    responses: &Responses,
    phases: &[FlaggedPhase],
    signs: &[(usize, usize)],
    data: &[ThreefoldData],
    opts: &OptimizerOptions,
    budget: u64,
) -> Result<(AMatrix, OptimizationReport)> {
    let n3 = crate::probability::pattern_count(a.modes(), 3, true) as usize;
    let prepared: Vec<(ThreefoldData, Vec<f64>, f64)> = data
        .iter()
        .filter(|t| t.counts.len() == n3)
        .filter_map(|t| {
            let total: f64 = t.counts.iter().sum();
            (total > 0.0).then(|| (t.clone(), t.counts.iter().map(|x| x / total).collect(), total))
        })
        .collect();
    if prepared.is_empty() && !(phases.is_empty() && signs.is_empty()) {
        return Err(Error::invalid("phase completion needs threefold counts"));
    }
    let obj = Objective {
        base: a,
        phases,
        signs,
        responses,
        data: &prepared,
        budget,
    };
    let mut x: Vec<f64> = phases.iter().map(|p| p.estimate.unwrap_or(0.0)).collect();
    let mut flips = vec![false; signs.len()];
    let before = obj.value(&x, &flips);
    let mut best = before;
    let sweep = |x: &[f64], flips: &mut Vec<bool>, best: &mut f64| {
        if flips.len() <= EXHAUSTIVE_SIGNS {
            let start = flips.clone();
            for mask in 0u32..(1 << flips.len()) {
                let trial: Vec<bool> = (0..flips.len()).map(|i| start[i] ^ (mask >> i & 1 == 1)).collect();
                let v = obj.value(x, &trial);
                if v < *best {
                    *best = v;
                    *flips = trial;
                }
            }
            return;
        }
        loop {
            let mut improved = false;
            for i in 0..flips.len() {
                flips[i] = !flips[i];
                let v = obj.value(x, flips);
                if v < *best {
                    *best = v;
                    improved = true;
                } else {
                    flips[i] = !flips[i];
                }
            }
            if !improved {
                break;
            }
        }
    };
    sweep(&x, &mut flips, &mut best);
    let mut restart_objectives = Vec::new();
    let mut spreads = vec![0.0; phases.len()];
    let mut converged = true;
    if !phases.is_empty() {
        let runs: Vec<(Vec<f64>, f64, bool)> = (0..opts.restarts.max(1))
            .into_par_iter()
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(r as u64 + 1);
                let start: Vec<f64> = phases
                    .iter()
                    .zip(&x)
                    .map(|(p, &x0)| match p.estimate {
                        Some(e) if r == 0 => e,
                        Some(e) => {
                            let s = p.sigma.filter(|s| *s > 0.0).unwrap_or(opts.default_spread);
                            e + Normal::new(0.0, s).unwrap().sample(&mut rng)
                        }
                        None if r == 0 => x0,
                        None => rng.random_range(-PI..PI),
                    })
                    .collect();
                let mut simplex = vec![start.clone()];
                for i in 0..start.len() {
                    let mut v = start.clone();
                    v[i] += 0.5;
                    simplex.push(v);
                }
                let problem = Restart { obj: &obj, flips: &flips };
                let solver = NelderMead::new(simplex).with_sd_tolerance(1e-12).expect("valid tolerance");
                match Executor::new(problem, solver)
                    .configure(|s| s.max_iters(opts.max_iters))
                    .timer(false)
                    .run()
                {
                    Ok(res) => {
                        let st = res.state();
                        let p = st.best_param.clone().unwrap_or(start);
                        let hit_limit = st.iter >= opts.max_iters;
                        (p.iter().map(|&t| wrap_phase(t)).collect(), st.best_cost, !hit_limit)
                    }
                    Err(_) => {
                        let v = obj.value(&start, &flips);
                        (start, v, false)
                    }
                }
            })
            .collect();
        restart_objectives = runs.iter().map(|r| r.1).collect();
        for (i, s) in spreads.iter_mut().enumerate() {
            *s = circular_spread(&runs.iter().map(|r| r.0[i]).collect::<Vec<_>>());
        }
        let (bx, bv, bc) = runs
            .iter()
            .min_by(|p, q| p.1.total_cmp(&q.1))
            .cloned()
            .expect("at least one restart");
        if bv < best {
            x = bx;
            best = bv;
            converged = bc;
        }
        sweep(&x, &mut flips, &mut best);
    }
    let out = obj.matrix(&x, &flips);
    let report = OptimizationReport {
        objective_before: before,
        objective_after: best,
        phases: phases
            .iter()
            .zip(&x)
            .zip(&spreads)
            .map(|((p, &v), &s)| OptimizedPhase {
                entry: p.entry,
                value: wrap_phase(v),
                spread: s,
            })
            .collect(),
        sign_flips: signs.iter().zip(&flips).filter(|(_, &f)| f).map(|(&p, _)| p).collect(),
        restart_objectives,
        converged,
    };
    Ok((out, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionOptions {
    /// Weight fringe points by their Poisson errors.
    pub weighted: bool,
    /// Number of lowest-residual 2π windows averaged per fringe.
    pub regions: usize,
    /// Fringes with `b < threshold · σ_b` leave the phase undetermined;
    /// 0 disables the test.
    pub min_fringe_significance: f64,
    /// `|sin(arg μ_k − arg μ_j)|` below this leaves `Im C_jk` to the optimizer.
    pub degenerate_threshold: f64,
    pub consistency_sigmas: f64,
    /// Subtract the noise contribution from fitted fringe amplitudes.
    pub debias_amplitudes: bool,
    pub optimizer: OptimizerOptions,
    pub budget: u64,
}

impl Default for ReconstructionOptions {
    fn default() -> Self {
        Self {
            weighted: true,
            regions: 5,
            min_fringe_significance: 2.0,
            degenerate_threshold: 0.02,
            consistency_sigmas: 3.0,
            debias_amplitudes: false,
            optimizer: OptimizerOptions::default(),
            budget: DEFAULT_BUDGET,
        }
    }
}

/// Why an entry was not taken straight from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "flag", rename_all = "snake_case")]
pub enum Flag {
    GammaClamped { mode: usize },
    MuClamped { mode: usize },
    BUndetermined { j: usize, k: usize },
    BPhaseUndetermined { j: usize, k: usize },
    DiagonalUndetermined { mode: usize },
    CAbsClamped { j: usize, k: usize },
    ReCInvalid { j: usize, k: usize },
    ImSignUnresolved { j: usize, k: usize },
    MuPhaseUndetermined { mode: usize },
    EpsilonDegenerate { j: usize, k: usize },
    ImInconsistent { j: usize, k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryUncertainties {
    pub c_diag: Vec<f64>,
    pub gamma: Vec<f64>,
    pub mu_abs: Option<Vec<f64>>,
    pub b_abs: Vec<Vec<f64>>,
    pub b_arg: Vec<Vec<f64>>,
    pub c_abs: Vec<Vec<f64>>,
    pub c_re: Vec<Vec<f64>>,
    pub c_im: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub d: usize,
    pub a: AMatrix,
    /// Real, non-negative first-input response.
    pub gamma: Vec<f64>,
    pub mu: Option<Vec<Complex64>>,
    pub mu_scan_offset: Option<f64>,
    pub diagonal_determined: Vec<bool>,
    pub uncertainties: EntryUncertainties,
    pub flags: Vec<Flag>,
    /// Entries left undetermined because no threefold data was available.
    pub unresolved: Vec<PhaseEntry>,
    pub optimization: Option<OptimizationReport>,
    pub physical: bool,
    pub physicality_error: Option<String>,
}

impl ReconstructionResult {
    pub fn gamma_vector(&self) -> GammaVector {
        GammaVector::from_real(&self.gamma)
    }

    /// The state at the first input's scan origin.
    pub fn state(&self) -> Result<GaussianState> {
        state_from_a(&self.a, &self.gamma_vector())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }
}

/// Full pipeline: C diagonal, γ, B, C up to signs, μ and signs from the
/// second input, then phase completion against threefold counts.
pub fn reconstruct(records: &[MeasurementRecord], opts: &ReconstructionOptions) -> Result<ReconstructionResult> {
    let blocked =
        record_for(records, Setting::Blocked).ok_or_else(|| Error::Config("reconstruction needs a blocked record".into()))?;
    let input1 =
        record_for(records, Setting::Input1).ok_or_else(|| Error::Config("reconstruction needs an input1 record".into()))?;
    let input2 = record_for(records, Setting::Input2);
    let d = blocked.d;
    if input1.d != d || input2.is_some_and(|r| r.d != d) {
        return Err(Error::dim("records disagree on the mode count"));
    }
    let mut flags = Vec::new();
    let (c_diag, c_sigma) = recover_c_diag(blocked)?;
    let gamma = recover_gamma(input1, &c_diag, &c_sigma)?;
    flags.extend(gamma.clamped.iter().map(|&mode| Flag::GammaClamped { mode }));
    let fr1 = fit_pair_fringes(input1, opts);
    let b = recover_b(&fr1, &gamma, blocked, &c_diag, opts);
    flags.extend(b.undetermined.iter().map(|&(j, k)| Flag::BUndetermined { j, k }));
    flags.extend(b.phase_undetermined.iter().map(|&(j, k)| Flag::BPhaseUndetermined { j, k }));
    flags.extend((0..d).filter(|&j| !b.diagonal_determined[j]).map(|mode| Flag::DiagonalUndetermined { mode }));
    let partial = recover_c_offdiag(blocked, input1, &c_diag, &c_sigma, &gamma, &b, &fr1, opts);
    flags.extend(partial.abs_clamped.iter().map(|&(j, k)| Flag::CAbsClamped { j, k }));
    flags.extend(partial.invalid.iter().map(|&(j, k)| Flag::ReCInvalid { j, k }));

    let mut mu_est = None;
    let signs = match input2 {
        Some(rec) => {
            let fr2 = fit_pair_fringes(rec, opts);
            let mu = recover_mu(rec, &c_diag, &c_sigma, &b, &fr2, opts)?;
            flags.extend(mu.abs.clamped.iter().map(|&mode| Flag::MuClamped { mode }));
            flags.extend(mu.phase_undetermined.iter().map(|&mode| Flag::MuPhaseUndetermined { mode }));
            let s = resolve_im_sign(&mu, &partial, blocked, rec, &fr2, opts);
            mu_est = Some(mu);
            s
        }
        None => {
            let mut s = SignResolution {
                c: assemble_c(&partial, |_, _| 1.0),
                unresolved: Vec::new(),
                degenerate: Vec::new(),
                inconsistent: Vec::new(),
                im_estimates: vec![None; pair_count(d)],
            };
            s.unresolved = pairs(d)
                .filter(|&(j, k)| {
                    let e = partial.pair(j, k);
                    e.re_valid && e.im_abs > ROUNDING * e.abs
                })
                .collect();
            s
        }
    };
    flags.extend(signs.unresolved.iter().map(|&(j, k)| Flag::ImSignUnresolved { j, k }));
    flags.extend(signs.degenerate.iter().map(|&(j, k)| Flag::EpsilonDegenerate { j, k }));
    flags.extend(signs.inconsistent.iter().map(|&(j, k)| Flag::ImInconsistent { j, k }));

    let mut c_full = signs.c.clone();
    // Entries without a valid Re C take their phase from the second input
    // when possible, else from nothing.
    let mut phases: Vec<FlaggedPhase> = Vec::new();
    for &(j, k) in &partial.invalid {
        let e = partial.pair(j, k);
        if e.abs <= 0.0 {
            continue;
        }
        let im = signs.im_estimates[pair_index(d, j, k)];
        let estimate = match im {
            Some(im) if e.re.is_finite() && e.re != 0.0 => Some(im.atan2(e.re)),
            _ => None,
        };
        let v = cis(estimate.unwrap_or(0.0)) * e.abs;
        c_full[(j, k)] = v;
        c_full[(k, j)] = v.conj();
        phases.push(FlaggedPhase {
            entry: PhaseEntry::C { j, k },
            estimate,
            sigma: None,
        });
    }
    for &(j, k) in &b.phase_undetermined {
        phases.push(FlaggedPhase {
            entry: PhaseEntry::B { j, k },
            estimate: Some(b.b[(j, k)].arg()),
            sigma: Some(b.sigma_arg[j][k]),
        });
    }
    for &(j, k) in &b.undetermined {
        phases.push(FlaggedPhase {
            entry: PhaseEntry::B { j, k },
            estimate: None,
            sigma: None,
        });
    }
    let sign_entries: Vec<(usize, usize)> = signs
        .unresolved
        .iter()
        .chain(&signs.degenerate)
        .chain(&signs.inconsistent)
        .copied()
        .collect();
    let a0 = AMatrix::from_blocks(b.b.clone(), c_full)?;
    let gamma_vec = GammaVector::from_real(&gamma.values);
    let responses = Responses {
        input1: gamma_vec.clone(),
        input2: mu_est.as_ref().and_then(|m| {
            m.scan_offset.map(|t| GammaVector::from_top(&m.mu).rotated(t))
        }),
    };
    let data = threefold_data(records);
    let mut unresolved = Vec::new();
    let (a, optimization) = if phases.is_empty() && sign_entries.is_empty() {
        (a0, None)
    } else if data.is_empty() {
        unresolved.extend(phases.iter().map(|p| p.entry));
        unresolved.extend(sign_entries.iter().map(|&(j, k)| PhaseEntry::C { j, k }));
        (a0, None)
    } else {
        let (a, report) =
            optimize_undetermined_phases(&a0, &responses, &phases, &sign_entries, &data, &opts.optimizer, opts.budget)?;
        (a, Some(report))
    };
    let physicality_error = state_from_a(&a, &gamma_vec).err().map(|e| e.to_string());
    let grid = |f: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
        (0..d).map(|j| (0..d).map(|k| f(j, k)).collect()).collect()
    };
    let pe = |j: usize, k: usize| (j != k).then(|| *partial.pair(j, k));
    let uncertainties = EntryUncertainties {
        c_diag: c_sigma.clone(),
        gamma: gamma.sigmas.clone(),
        mu_abs: mu_est.as_ref().map(|m| m.abs.sigmas.clone()),
        b_abs: b.sigma_abs.clone(),
        b_arg: b.sigma_arg.clone(),
        c_abs: grid(&|j, k| pe(j, k).map_or(c_sigma[j], |e| e.sigma_abs)),
        c_re: grid(&|j, k| pe(j, k).map_or(c_sigma[j], |e| e.sigma_re)),
        c_im: grid(&|j, k| pe(j, k).map_or(0.0, |e| e.sigma_im)),
    };
    flags.sort();
    flags.dedup();
    Ok(ReconstructionResult {
        d,
        a,
        gamma: gamma.values,
        mu: mu_est.as_ref().map(|m| m.mu.clone()),
        mu_scan_offset: mu_est.as_ref().and_then(|m| m.scan_offset),
        diagonal_determined: b.diagonal_determined,
        uncertainties,
        flags,
        unresolved,
        optimization,
        physical: physicality_error.is_none(),
        physicality_error,
    })
}

/// Phase grid and pulse budget of a simulated scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanPlan {
    pub phis: Vec<f64>,
    /// Pulses per setting, split evenly over the phase bins.
    pub pulses: f64,
    pub collisions: bool,
    /// Record threefolds in the blocked run and in these first-input bins.
    pub threefold_bins: Vec<usize>,
    pub threefolds: bool,
}

impl Default for ScanPlan {
    fn default() -> Self {
        Self::uniform(5, 20, 1e7)
    }
}

impl ScanPlan {
    /// `windows` consecutive 2π windows with `per_window` points each.
    pub fn uniform(windows: usize, per_window: usize, pulses: f64) -> Self {
        let n = windows * per_window;
        Self {
            phis: (0..n).map(|i| 2.0 * PI * i as f64 / per_window as f64).collect(),
            pulses,
            collisions: false,
            threefold_bins: vec![0],
            threefolds: true,
        }
    }
}

fn expected_bin(state: &GaussianState, phi: f64, pulses: f64, collisions: bool, threefolds: bool) -> Result<PhaseBin> {
    let d = state.modes();
    let p = Prepared::from_state(state, ModelSpec::full());
    let mut bin = PhaseBin::empty(d, phi, pulses);
    bin.vacuum = Some(pulses * state.vacuum_probability());
    for j in 0..d {
        bin.singles[j] = pulses * p.probability(&DetectionPattern::from_modes(d, &[j])?)?;
    }
    for (j, k) in pairs(d) {
        bin.pairs[pair_index(d, j, k)] = pulses * p.probability(&DetectionPattern::from_modes(d, &[j, k])?)?;
    }
    if collisions {
        let mut v = vec![0.0; d];
        for (j, x) in v.iter_mut().enumerate() {
            let mut counts = vec![0u32; d];
            counts[j] = 2;
            *x = pulses * p.probability(&DetectionPattern::new(counts))?;
        }
        bin.collisions = Some(v);
    }
    if threefolds {
        let patterns = collision_free_patterns(d, 3);
        bin.threefolds = Some(
            patterns
                .iter()
                .map(|n| p.probability(n).map(|x| x * pulses))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(bin)
}

/// Expected (noiseless) counts for the blocked run and the scanned inputs.
/// `input1` and `input2` must share their covariance; scanning the phase by
/// `φ` rotates each displacement response by `e^{iφ}`.
pub fn expected_records(
    input1: &GaussianState,
    input2: Option<&GaussianState>,
    plan: &ScanPlan,
) -> Result<Vec<MeasurementRecord>> {
    let d = input1.modes();
    if plan.phis.is_empty() {
        return Err(Error::invalid("scan plan has no phases"));
    }
    if let Some(s2) = input2 {
        if s2.modes() != d || crate::linalg::max_abs(&(s2.sigma() - input1.sigma())) > 1e-12 {
            return Err(Error::invalid("both inputs must act on the same squeezed state"));
        }
    }
    let per_bin = plan.pulses / plan.phis.len() as f64;
    let blocked = expected_bin(&input1.without_displacement(), 0.0, plan.pulses, plan.collisions, plan.threefolds)?;
    let mut records = vec![MeasurementRecord::new(Setting::Blocked, d, vec![blocked])?];
    let scanned = |s: &GaussianState, setting: Setting| -> Result<MeasurementRecord> {
        let bins = plan
            .phis
            .par_iter()
            .enumerate()
            .map(|(i, &phi)| {
                let three = plan.threefolds && setting == Setting::Input1 && plan.threefold_bins.contains(&i);
                expected_bin(&s.with_displacement_phase(phi), phi, per_bin, plan.collisions, three)
            })
            .collect::<Result<Vec<_>>>()?;
        MeasurementRecord::new(setting, d, bins)
    };
    records.push(scanned(input1, Setting::Input1)?);
    if let Some(s2) = input2 {
        records.push(scanned(s2, Setting::Input2)?);
    }
    Ok(records)
}

/// Draws independent Poisson counts around the expected ones.
pub fn sample_records<R: Rng + ?Sized>(expected: &[MeasurementRecord], rng: &mut R) -> Result<Vec<MeasurementRecord>> {
    let mut draw = |mean: f64| -> f64 {
        if mean > 0.0 {
            Poisson::new(mean).map(|p| p.sample(rng)).unwrap_or(mean.round())
        } else {
            0.0
        }
    };
    let mut out = Vec::with_capacity(expected.len());
    for r in expected {
        let mut bins = Vec::with_capacity(r.bins.len());
        for b in &r.bins {
            let mut nb = b.clone();
            if let Some(v) = nb.vacuum.as_mut() {
                *v = draw(*v).max(1.0);
            }
            let lists = [Some(&mut nb.singles), Some(&mut nb.pairs), nb.collisions.as_mut(), nb.threefolds.as_mut()];
            for v in lists.into_iter().flatten() {
                v.iter_mut().for_each(|x| *x = draw(*x).min(b.pulses));
            }
            bins.push(nb);
        }
        out.push(MeasurementRecord::new(r.setting, r.d, bins)?);
    }
    Ok(out)
}

/// Ground truth in the reconstruction gauge: `γ` real, `arg μ_r = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugedTruth {
    pub a: AMatrix,
    pub gamma: Vec<f64>,
    pub mu: Option<Vec<Complex64>>,
}

pub fn gauged_truth(input1: &GaussianState, input2: Option<&GaussianState>, reference: Option<usize>) -> GaugedTruth {
    let (a, g, psi) = gauge_fix(&input1.a_matrix(), &input1.gamma_vector());
    let mu = input2.map(|s| {
        let m = s.gamma_vector().rephased(&psi).top();
        let r = reference.or_else(|| m.iter().position(|z| z.norm() > 0.0));
        let rot = r.map_or(Complex64::new(1.0, 0.0), |r| {
            if m[r].norm() > 0.0 {
                (m[r] / m[r].norm()).conj()
            } else {
                Complex64::new(1.0, 0.0)
            }
        });
        m.iter().map(|z| z * rot).collect()
    });
    GaugedTruth {
        a,
        gamma: g.top().iter().map(|z| z.re).collect(),
        mu,
    }
}

/// Largest entrywise deviation of `(B, C, γ)`; diagonal `B` entries count
/// only where determined.
pub fn max_entry_error(result: &ReconstructionResult, truth: &GaugedTruth) -> f64 {
    let d = result.d;
    let mut e: f64 = 0.0;
    for j in 0..d {
        for k in 0..d {
            if j != k || result.diagonal_determined[j] {
                e = e.max((result.a.b()[(j, k)] - truth.a.b()[(j, k)]).norm());
            }
            e = e.max((result.a.c()[(j, k)] - truth.a.c()[(j, k)]).norm());
        }
        e = e.max((result.gamma[j] - truth.gamma[j]).abs());
    }
    e
}

/// Threefold TVD between two kernels at the scan origin of the first input.
pub fn threefold_tvd(a: &AMatrix, g: &GammaVector, b: &AMatrix, h: &GammaVector, budget: u64) -> Result<f64> {
    let p = distribution_from_kernel(a, g, 3, ModelSpec::full(), budget)?;
    let q = distribution_from_kernel(b, h, 3, ModelSpec::full(), budget)?;
    crate::metrics::tvd(&p, &q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::physical_state;
    use crate::state::{build_input_state, propagate, SourceConfig, TransferMatrix};
    use proptest::prelude::*;
    use rand::Rng;

    fn noiseless() -> ReconstructionOptions {
        ReconstructionOptions {
            min_fringe_significance: 0.0,
            ..Default::default()
        }
    }

    /// Two inputs on the same squeezed state: a random mixed state with two
    /// different displacements.
    fn two_inputs(d: usize, seed: u64) -> (GaussianState, GaussianState) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s1 = physical_state(d, &mut rng);
        let alpha: Vec<Complex64> = (0..d)
            .map(|_| c(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect();
        let shift = GaussianState::coherent(&alpha);
        let delta2 = s1.delta() + shift.delta();
        let s2 = GaussianState::new(s1.sigma().clone(), delta2).unwrap();
        (s1, s2)
    }

    #[test]
    fn pair_index_is_dense() {
        let d = 6;
        let idx: Vec<usize> = pairs(d).map(|(j, k)| pair_index(d, j, k)).collect();
        assert_eq!(idx, (0..15).collect::<Vec<_>>());
        assert_eq!(pair_index(d, 4, 2), pair_index(d, 2, 4));
    }

    #[test]
    fn fringe_exact_recovery() {
        let phi: Vec<f64> = (0..12).map(|i| i as f64 * PI / 6.0).collect();
        let v: Vec<f64> = phi.iter().map(|&p| 1.0 + 0.3 * (2.0 * p + PI / 3.0).cos()).collect();
        let f = fit_fringe(&phi, &v, None).unwrap();
        assert!((f.a - 1.0).abs() < 1e-10 && (f.b - 0.3).abs() < 1e-10 && (f.c - PI / 3.0).abs() < 1e-10);
        let flat = fit_fringe(&phi, &vec![0.7; 12], None).unwrap();
        assert!(flat.b < 1e-12 && flat.residual.is_finite());
        let same = fit_fringe(&[0.1; 8], &[1.0; 8], None);
        assert!(matches!(same, Err(Error::IllConditioned { .. })));
        let pi_apart: Vec<f64> = (0..8).map(|i| (i % 2) as f64 * PI).collect();
        assert!(fit_fringe(&pi_apart, &[1.0; 8], None).is_err());
    }

    proptest! {
        #[test]
        fn fringe_fit_recovers_generators(a in 0.0f64..2.0, b in 0.0f64..1.0, cc in -3.1f64..3.1, n in 6usize..30) {
            let phi: Vec<f64> = (0..n).map(|i| 2.0 * PI * i as f64 / n as f64 + 0.1).collect();
            let v: Vec<f64> = phi.iter().map(|&p| a + b * (2.0 * p + cc).cos()).collect();
            let s = vec![0.01; n];
            let f = fit_fringe(&phi, &v, Some(&s)).unwrap();
            prop_assert!((f.a - a).abs() < 1e-10);
            prop_assert!((f.b - b).abs() < 1e-10);
            prop_assert!(f.b >= 0.0 && (-PI..PI).contains(&f.c));
            if b > 1e-3 {
                prop_assert!(wrap_phase(f.c - cc).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn region_average_uses_best_windows() {
        let phi: Vec<f64> = (0..60).map(|i| 2.0 * PI * i as f64 / 10.0).collect();
        let mut v: Vec<f64> = phi.iter().map(|&p| 2.0 + 0.5 * (2.0 * p - 1.0).cos()).collect();
        // Spoil the first window.
        for (i, x) in v.iter_mut().enumerate().take(10) {
            *x += if i % 2 == 0 { 0.3 } else { -0.2 };
        }
        let f = fit_fringe_regions(&phi, &v, None, 5).unwrap();
        assert_eq!(f.windows, 5);
        assert!((f.a - 2.0).abs() < 1e-10 && (f.b - 0.5).abs() < 1e-10 && (f.c + 1.0).abs() < 1e-10);
    }

    #[test]
    fn weighted_covariance_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let phi: Vec<f64> = (0..40).map(|i| 2.0 * PI * i as f64 / 20.0).collect();
        let (a, b, cc) = (750.0, 200.0, 0.4);
        let mut fits = Vec::new();
        for _ in 0..500 {
            let counts: Vec<f64> = phi
                .iter()
                .map(|&p| Poisson::new(a + b * (2.0 * p + cc).cos()).unwrap().sample(&mut rng))
                .collect();
            let s: Vec<f64> = counts.iter().map(|x: &f64| x.max(1.0).sqrt()).collect();
            fits.push(fit_fringe_regions(&phi, &counts, Some(&s), 1).unwrap());
        }
        let n = fits.len() as f64;
        for (i, get) in [|f: &FringeFit| f.a, |f: &FringeFit| f.b, |f: &FringeFit| f.c].iter().enumerate() {
            let mean = fits.iter().map(get).sum::<f64>() / n;
            let emp = (fits.iter().map(|f| (get(f) - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let est = fits.iter().map(|f| f.covariance[i][i].sqrt()).sum::<f64>() / n;
            assert!((emp / est - 1.0).abs() < 0.2, "parameter {i}: empirical {emp}, estimated {est}");
        }
    }

    #[test]
    fn direct_read_offs() {
        let d = 3;
        let mut bin = PhaseBin::empty(d, 0.0, 1e6);
        bin.singles = vec![1e4, 0.0, 400.0];
        let rec = MeasurementRecord::new(Setting::Blocked, d, vec![bin]).unwrap();
        let (cd, cs) = recover_c_diag(&rec).unwrap();
        assert_eq!(cd, vec![0.01, 0.0, 4e-4]);
        assert_eq!(cs, vec![100.0 / 1e6, 0.0, 20.0 / 1e6]);
        let mut b1 = PhaseBin::empty(d, 0.0, 1e6);
        b1.singles = vec![5e4, 0.0, 300.0];
        let r1 = MeasurementRecord::new(Setting::Input1, d, vec![b1]).unwrap();
        let g = recover_gamma(&r1, &cd, &cs).unwrap();
        assert!((g.values[0] - 0.2).abs() < 1e-12);
        assert_eq!(g.values[1], 0.0);
        assert_eq!(g.values[2], 0.0);
        assert_eq!(g.clamped, vec![2]);
    }

    #[test]
    fn csv_round_trip() {
        let (s1, s2) = two_inputs(3, 3);
        let mut plan = ScanPlan::uniform(1, 8, 1e6);
        plan.collisions = true;
        let recs = expected_records(&s1, Some(&s2), &plan).unwrap();
        let mut buf = Vec::new();
        write_records_csv(&recs, &mut buf).unwrap();
        let back = read_records_csv(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("setting,phi,modes,counts,pulses\nblocked,0.0,,"));
        assert!(read_records_csv("setting,phi,modes,counts,pulses\nnowhere,0,1,1,10\n".as_bytes()).is_err());
    }

    #[test]
    fn noiseless_round_trip_d6() {
        for seed in 0..3 {
            let (s1, s2) = two_inputs(6, 100 + seed);
            let mut plan = ScanPlan::uniform(1, 12, 1e7);
            plan.collisions = true;
            let recs = expected_records(&s1, Some(&s2), &plan).unwrap();
            let res = reconstruct(&recs, &noiseless()).unwrap();
            let truth = gauged_truth(&s1, Some(&s2), res.mu.as_ref().and(Some(0)));
            let err = max_entry_error(&res, &truth);
            assert!(err < 1e-8, "seed {seed}: error {err}, flags {:?}", res.flags);
            assert!(res.diagonal_determined.iter().all(|&x| x));
            let mu = res.mu.as_ref().unwrap();
            assert_eq!(mu[0].im, 0.0);
            for (x, y) in mu.iter().zip(truth.mu.as_ref().unwrap()) {
                assert!((x - y).norm() < 1e-8);
            }
            let t = threefold_tvd(&res.a, &res.gamma_vector(), &truth.a, &GammaVector::from_real(&truth.gamma), DEFAULT_BUDGET)
                .unwrap();
            assert!(t < 1e-8);
            assert!(res.physical);
        }
    }

    #[test]
    fn without_collisions_diagonal_is_flagged() {
        let (s1, s2) = two_inputs(4, 7);
        let recs = expected_records(&s1, Some(&s2), &ScanPlan::uniform(1, 12, 1e7)).unwrap();
        let res = reconstruct(&recs, &noiseless()).unwrap();
        assert!(res.diagonal_determined.iter().all(|&x| !x));
        assert!(res.flags.contains(&Flag::DiagonalUndetermined { mode: 0 }));
        assert!((0..4).all(|j| res.a.b()[(j, j)].norm() == 0.0));
        let truth = gauged_truth(&s1, Some(&s2), None);
        assert!(max_entry_error(&res, &truth) < 1e-8);
    }

    #[test]
    fn real_mu_is_degenerate() {
        let d = 3;
        let mu = MuEstimate {
            mu: vec![c(0.3, 0.0), c(0.2, 0.0), c(0.1, 0.0)],
            abs: Amplitudes {
                values: vec![0.3, 0.2, 0.1],
                sigmas: vec![0.0; 3],
                clamped: vec![],
            },
            reference: Some(0),
            phase_undetermined: vec![],
            scan_offset: Some(0.0),
        };
        let mut partial = PartialC {
            d,
            diag: vec![0.1; 3],
            pairs: vec![PairEstimate::default(); 3],
            abs_clamped: vec![],
            invalid: vec![],
        };
        partial.pairs[0] = PairEstimate {
            abs: 0.05,
            re: 0.03,
            im_abs: 0.04,
            re_valid: true,
            ..Default::default()
        };
        let mut bins = vec![];
        for i in 0..8 {
            bins.push(PhaseBin::empty(d, i as f64, 1e6));
        }
        let blocked = MeasurementRecord::new(Setting::Blocked, d, vec![PhaseBin::empty(d, 0.0, 1e6)]).unwrap();
        let rec = MeasurementRecord::new(Setting::Input2, d, bins).unwrap();
        let fr = fit_pair_fringes(&rec, &noiseless());
        let s = resolve_im_sign(&mu, &partial, &blocked, &rec, &fr, &noiseless());
        assert_eq!(s.degenerate, vec![(0, 1)]);
    }

    #[test]
    fn corrupted_second_input_is_inconsistent() {
        let (s1, s2) = two_inputs(4, 11);
        let mut recs = expected_records(&s1, Some(&s2), &ScanPlan::uniform(1, 12, 1e13)).unwrap();
        for k in 1..4 {
            let i = pair_index(4, 0, k);
            for b in &mut recs[2].bins {
                b.pairs[i] *= 1.3;
            }
        }
        let res = reconstruct(&recs, &ReconstructionOptions {
            optimizer: OptimizerOptions { restarts: 2, max_iters: 50, ..Default::default() },
            ..noiseless()
        })
        .unwrap();
        assert!(
            res.flags.iter().any(|f| matches!(f, Flag::ImInconsistent { .. } | Flag::MuPhaseUndetermined { .. })),
            "{:?}",
            res.flags
        );
    }

    #[test]
    fn without_second_input_signs_go_to_optimizer() {
        let (s1, _) = two_inputs(4, 21);
        let recs = expected_records(&s1, None, &ScanPlan::uniform(1, 12, 1e7)).unwrap();
        let opts = ReconstructionOptions {
            optimizer: OptimizerOptions { restarts: 2, ..Default::default() },
            ..noiseless()
        };
        let res = reconstruct(&recs, &opts).unwrap();
        assert!(res.flags.iter().any(|f| matches!(f, Flag::ImSignUnresolved { .. })));
        let rep = res.optimization.as_ref().unwrap();
        assert!(rep.objective_after <= rep.objective_before);
        assert!(rep.objective_after < 1e-8, "{}", rep.objective_after);
        let truth = gauged_truth(&s1, None, None);
        let t = threefold_tvd(&res.a, &res.gamma_vector(), &truth.a, &GammaVector::from_real(&truth.gamma), DEFAULT_BUDGET).unwrap();
        assert!(t < 1e-8);
    }

    #[test]
    fn single_flagged_phase_is_recovered() {
        let (s1, _) = two_inputs(5, 31);
        let truth = gauged_truth(&s1, None, None);
        let g = GammaVector::from_real(&truth.gamma);
        let exact = truth.a.b()[(1, 3)];
        let mut b = truth.a.b().clone();
        b[(1, 3)] = c(exact.norm(), 0.0);
        b[(3, 1)] = b[(1, 3)];
        let partial = AMatrix::from_blocks(b, truth.a.c().clone()).unwrap();
        let recs = expected_records(&state_from_a(&truth.a, &g).unwrap(), None, &ScanPlan::uniform(1, 8, 1e9)).unwrap();
        let data = threefold_data(&recs);
        let phases = [FlaggedPhase {
            entry: PhaseEntry::B { j: 1, k: 3 },
            estimate: None,
            sigma: None,
        }];
        let resp = Responses { input1: g, input2: None };
        let (a, rep) =
            optimize_undetermined_phases(&partial, &resp, &phases, &[], &data, &OptimizerOptions::default(), DEFAULT_BUDGET)
                .unwrap();
        assert!(wrap_phase(a.b()[(1, 3)].arg() - exact.arg()).abs() < 0.05, "{:?}", rep);
        assert!(rep.objective_after <= rep.objective_before);
        // Nothing flagged: pass-through.
        let (same, rep) =
            optimize_undetermined_phases(&truth.a, &resp, &[], &[], &data, &OptimizerOptions::default(), DEFAULT_BUDGET)
                .unwrap();
        assert_eq!(same, truth.a);
        assert!(rep.phases.is_empty());
    }

    #[test]
    fn missing_settings_are_config_errors() {
        let (s1, _) = two_inputs(3, 1);
        let recs = expected_records(&s1, None, &ScanPlan::uniform(1, 8, 1e6)).unwrap();
        assert!(matches!(reconstruct(&recs[..1], &noiseless()), Err(Error::Config(_))));
        assert!(matches!(reconstruct(&recs[1..], &noiseless()), Err(Error::Config(_))));
    }

    #[test]
    fn lab_setup_inputs_share_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = TransferMatrix::new(crate::random::haar_unitary(6, &mut rng).scale(0.5)).unwrap();
        let cfg = SourceConfig {
            r: 0.3,
            alpha_mag: 0.4,
            phi: 0.0,
            squeezer_ports: Some([0, 1]),
            coherent_port: Some(2),
            efficiencies: Default::default(),
        };
        let s1 = propagate(&build_input_state(&cfg, 6).unwrap(), &t).unwrap();
        let s2 = propagate(&build_input_state(&cfg.with_coherent_port(Some(3)), 6).unwrap(), &t).unwrap();
        let recs = expected_records(&s1, Some(&s2), &ScanPlan::uniform(1, 12, 1e7)).unwrap();
        let res = reconstruct(&recs, &noiseless()).unwrap();
        assert!(max_entry_error(&res, &gauged_truth(&s1, Some(&s2), None)) < 1e-8, "{:?}", res.flags);
    }
}
