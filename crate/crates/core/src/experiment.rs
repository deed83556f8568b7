//! Synthetic experiments: click sampling, phase drift with a PID lock, and
//! transfer-matrix amplitudes from coherent-probe singles.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hafnian::DetectionPattern;
use crate::io::fmt_f64;
use crate::probability::{self, collision_free_patterns, Fringe, ModelSpec, Prepared};
use crate::state::GaussianState;

/// One detected pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub pulse: u64,
    /// Bit `j` set when mode `j` clicked.
    pub pattern: u64,
    /// Coherent phase at emission.
    pub phi: f64,
}

impl ClickRecord {
    pub fn to_pattern(&self, d: usize) -> DetectionPattern {
        DetectionPattern::new((0..d).map(|j| (self.pattern >> j & 1) as u32).collect())
    }

    pub fn photons(&self) -> usize {
        self.pattern.count_ones() as usize
    }
}

pub fn bitmask(n: &DetectionPattern) -> u64 {
    n.occupied().iter().fold(0u64, |m, &j| m | 1 << j)
}

/// Largest mode count a bitmask holds.
pub const MAX_SAMPLER_MODES: usize = 64;

/// Cumulative table over every collision-free pattern with `N ≤ n_max`;
/// the remaining mass is the discard bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerTable {
    pub d: usize,
    pub patterns: Vec<DetectionPattern>,
    pub probabilities: Vec<f64>,
    cumulative: Vec<f64>,
    /// Mass of collisions and of patterns above `n_max`.
    pub overflow: f64,
}

impl SamplerTable {
    pub fn new(state: &GaussianState, model: ModelSpec, n_max: usize, budget: u64) -> Result<Self> {
        let d = state.modes();
        if d > MAX_SAMPLER_MODES {
            return Err(Error::invalid(format!("sampler supports at most {MAX_SAMPLER_MODES} modes")));
        }
        let needed: u64 = (0..=n_max.min(d)).map(|n| probability::pattern_count(d, n, true)).sum();
        if needed > budget {
            return Err(Error::Budget {
                what: "sampler patterns".into(),
                needed,
                budget,
            });
        }
        let prepared = Prepared::from_state(state, model);
        let mut patterns = Vec::with_capacity(needed as usize);
        for n in 0..=n_max.min(d) {
            patterns.extend(collision_free_patterns(d, n));
        }
        let probabilities = patterns
            .par_iter()
            .map(|p| prepared.probability(p))
            .collect::<Result<Vec<f64>>>()?;
        Ok(Self::from_probabilities(d, patterns, probabilities))
    }

    /// Truncated models can overshoot unit mass; the table is then rescaled
    /// and has no overflow.
    pub fn from_probabilities(d: usize, patterns: Vec<DetectionPattern>, mut probabilities: Vec<f64>) -> Self {
        for p in &mut probabilities {
            *p = p.max(0.0);
        }
        let total = crate::sum::sum_f64(probabilities.iter().copied());
        if total > 1.0 {
            for p in &mut probabilities {
                *p /= total;
            }
        }
        let mut cumulative = Vec::with_capacity(probabilities.len());
        let mut acc = crate::sum::NeumaierSum::new();
        for &p in &probabilities {
            acc.add(p);
            cumulative.push(acc.value());
        }
        let overflow = (1.0 - cumulative.last().copied().unwrap_or(0.0)).max(0.0);
        Self {
            d,
            patterns,
            probabilities,
            cumulative,
            overflow,
        }
    }

    /// Index of the drawn pattern, `None` for a discard.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        let u: f64 = rng.random();
        let i = self.cumulative.partition_point(|&c| c <= u);
        (i < self.cumulative.len()).then_some(i)
    }
}

/// Pulses per independently seeded chunk.
pub const CHUNK: u64 = 1 << 16;

fn chunk_rng(seed: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    rng
}

/// Counts per table pattern plus discards. Chunks of [`CHUNK`] pulses use
/// their own ChaCha stream, so results do not depend on the worker count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub pulses: u64,
    pub counts: Vec<u64>,
    pub discarded: u64,
}

pub fn sample_counts(table: &SamplerTable, pulses: u64, seed: u64) -> SampleCounts {
    let chunks = pulses.div_ceil(CHUNK);
    let partial: Vec<(Vec<u64>, u64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c);
            let n = CHUNK.min(pulses - c * CHUNK);
            let mut counts = vec![0u64; table.patterns.len()];
            let mut discarded = 0;
            for _ in 0..n {
                match table.draw(&mut rng) {
                    Some(i) => counts[i] += 1,
                    None => discarded += 1,
                }
            }
            (counts, discarded)
        })
        .collect();
    let mut counts = vec![0u64; table.patterns.len()];
    let mut discarded = 0;
    for (c, d) in partial {
        for (a, b) in counts.iter_mut().zip(c) {
            *a += b;
        }
        discarded += d;
    }
    SampleCounts {
        pulses,
        counts,
        discarded,
    }
}

/// Non-vacuum, non-discarded pulses in emission order, each tagged with
/// `phi`.
pub fn sample_table(table: &SamplerTable, pulses: u64, seed: u64, phi: f64, first_pulse: u64) -> Vec<ClickRecord> {
    let chunks = pulses.div_ceil(CHUNK);
    let masks: Vec<u64> = table.patterns.iter().map(bitmask).collect();
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c);
            let n = CHUNK.min(pulses - c * CHUNK);
            let mut out = Vec::new();
            for i in 0..n {
                if let Some(k) = table.draw(&mut rng) {
                    if masks[k] != 0 {
                        out.push(ClickRecord {
                            pulse: first_pulse + c * CHUNK + i,
                            pattern: masks[k],
                            phi,
                        });
                    }
                }
            }
            out
        })
        .flatten()
        .collect()
}

/// I.i.d. clicks from `state` under `model`.
pub fn sample_patterns(
    state: &GaussianState,
    model: ModelSpec,
    pulses: u64,
    n_max: usize,
    seed: u64,
    budget: u64,
) -> Result<Vec<ClickRecord>> {
    let table = SamplerTable::new(state, model, n_max, budget)?;
    Ok(sample_table(&table, pulses, seed, 0.0, 0))
}

/// Clicks while the coherent phase follows a lock trace: each controller
/// interval uses the state rotated to that interval's mean phase.
pub fn sample_along_trace(
    state: &GaussianState,
    model: ModelSpec,
    trace: &LockTrace,
    pulses: u64,
    n_max: usize,
    seed: u64,
    budget: u64,
) -> Result<Vec<ClickRecord>> {
    let intervals = trace.interval_means();
    if intervals.is_empty() {
        return Err(Error::invalid("lock trace is empty"));
    }
    let per = pulses / intervals.len() as u64;
    let mut out = Vec::new();
    for (i, &phi) in intervals.iter().enumerate() {
        let n = if i + 1 == intervals.len() { pulses - per * i as u64 } else { per };
        let table = SamplerTable::new(&state.with_displacement_phase(phi), model, n_max, budget)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX - i as u64);
        let sub = rng.random::<u64>();
        out.extend(sample_table(&table, n, sub, phi, per * i as u64));
    }
    Ok(out)
}

pub fn write_clicks_csv<W: Write>(clicks: &[ClickRecord], d: usize, w: W) -> Result<()> {
    let width = d.div_ceil(4).max(1);
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["pulse", "pattern", "phi"])?;
    for c in clicks {
        out.write_record([c.pulse.to_string(), format!("{:0width$x}", c.pattern), fmt_f64(c.phi)])?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_clicks_csv(clicks: &[ClickRecord], d: usize, path: &Path) -> Result<()> {
    write_clicks_csv(clicks, d, std::fs::File::create(path)?)
}

#[derive(Deserialize)]
struct ClickRow {
    pulse: u64,
    pattern: String,
    phi: f64,
}

/// Reads clicks and checks every mask fits in `d` modes.
pub fn read_clicks_csv<R: Read>(r: R, d: usize) -> Result<Vec<ClickRecord>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let mut out = Vec::new();
    for row in reader.deserialize::<ClickRow>() {
        let row = row?;
        let pattern = u64::from_str_radix(row.pattern.trim(), 16)
            .map_err(|e| Error::invalid(format!("pulse {}: bad pattern '{}': {e}", row.pulse, row.pattern)))?;
        if d < 64 && pattern >> d != 0 {
            return Err(Error::dim(format!("pulse {}: pattern wider than {d} modes", row.pulse)));
        }
        out.push(ClickRecord {
            pulse: row.pulse,
            pattern,
            phi: row.phi,
        });
    }
    Ok(out)
}

/// `count` collision-free patterns drawn from `state` conditioned on
/// `min_photons ≤ N ≤ max_photons`. Equivalent to keeping only those events
/// from a long run, without simulating the discarded pulses.
pub fn sample_conditioned(
    state: &GaussianState,
    model: ModelSpec,
    min_photons: usize,
    max_photons: usize,
    count: usize,
    seed: u64,
    budget: u64,
) -> Result<Vec<DetectionPattern>> {
    let d = state.modes();
    if min_photons > max_photons || max_photons > d {
        return Err(Error::invalid(format!(
            "photon range {min_photons}..={max_photons} is empty or exceeds {d} modes"
        )));
    }
    let needed: u64 = (min_photons..=max_photons).map(|n| probability::pattern_count(d, n, true)).sum();
    if needed > budget {
        return Err(Error::Budget {
            what: "conditioned sampler patterns".into(),
            needed,
            budget,
        });
    }
    let prepared = Prepared::from_state(state, model);
    let patterns: Vec<DetectionPattern> =
        (min_photons..=max_photons).flat_map(|n| collision_free_patterns(d, n)).collect();
    let mut probabilities = patterns
        .par_iter()
        .map(|p| prepared.probability(p).map(|x| x.max(0.0)))
        .collect::<Result<Vec<f64>>>()?;
    let total = crate::sum::sum_f64(probabilities.iter().copied());
    if !(total > 0.0) {
        return Err(Error::invalid("no probability mass in the requested photon range"));
    }
    probabilities.iter_mut().for_each(|p| *p /= total);
    let table = SamplerTable::from_probabilities(d, patterns, probabilities);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        // Rounding can leave a sliver above the last cumulative entry.
        if let Some(i) = table.draw(&mut rng) {
            out.push(table.patterns[i].clone());
        }
    }
    Ok(out)
}

/// Patterns with exactly `photons` clicks.
pub fn clicks_with_photons(clicks: &[ClickRecord], d: usize, photons: usize) -> Vec<DetectionPattern> {
    clicks
        .iter()
        .filter(|c| c.photons() == photons)
        .map(|c| c.to_pattern(d))
        .collect()
}

/// Empirical distribution over `collision_free_patterns(d, photons)`.
pub fn empirical_distribution(clicks: &[ClickRecord], d: usize, photons: usize) -> Vec<f64> {
    let patterns = collision_free_patterns(d, photons);
    let index: std::collections::HashMap<u64, usize> =
        patterns.iter().enumerate().map(|(i, p)| (bitmask(p), i)).collect();
    let mut counts = vec![0.0; patterns.len()];
    for c in clicks.iter().filter(|c| c.photons() == photons) {
        counts[index[&c.pattern]] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter_mut().for_each(|x| *x /= total);
    }
    counts
}

/// One component of the phase drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftComponent {
    /// Gaussian increment of standard deviation `sigma` per step.
    RandomWalk { sigma: f64 },
    Sinusoidal {
        amplitude: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
}

/// Sum of drift components sampled every `step` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftModel {
    pub components: Vec<DriftComponent>,
    pub step: f64,
}

impl Default for DriftModel {
    /// A slow swing of ±2 rad over 20 s plus a random walk with diffusion
    /// constant 0.002 rad²/s.
    fn default() -> Self {
        let step = 0.01;
        Self {
            components: vec![
                DriftComponent::Sinusoidal {
                    amplitude: 2.0,
                    period: 20.0,
                    phase: 0.0,
                },
                DriftComponent::RandomWalk {
                    sigma: (2.0 * 0.002 * step as f64).sqrt(),
                },
            ],
            step,
        }
    }
}

impl DriftModel {
    pub fn none(step: f64) -> Self {
        Self {
            components: Vec::new(),
            step,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::Config("drift step must be positive".into()));
        }
        for c in &self.components {
            match *c {
                DriftComponent::RandomWalk { sigma } if !(sigma >= 0.0) => {
                    return Err(Error::Config("random-walk sigma must be non-negative".into()));
                }
                DriftComponent::Sinusoidal { period, .. } if !(period > 0.0) => {
                    return Err(Error::Config("drift period must be positive".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Drift at `steps` consecutive steps starting from 0 at `t = 0`.
    pub fn sample<R: Rng + ?Sized>(&self, steps: usize, rng: &mut R) -> Vec<f64> {
        let mut walk = 0.0;
        let mut out = Vec::with_capacity(steps);
        for n in 0..steps {
            let t = n as f64 * self.step;
            let mut v = 0.0;
            for c in &self.components {
                match *c {
                    DriftComponent::RandomWalk { sigma } => {
                        if n > 0 && sigma > 0.0 {
                            walk += Normal::new(0.0, sigma).unwrap().sample(rng);
                        }
                        v += walk;
                    }
                    DriftComponent::Sinusoidal { amplitude, period, phase } => {
                        v += amplitude * ((2.0 * PI * t / period + phase).sin() - phase.sin());
                    }
                }
            }
            out.push(v);
        }
        out
    }
}

fn default_setpoint() -> f64 {
    PI / 4.0
}

fn default_interval() -> f64 {
    0.1
}

fn default_limits() -> [f64; 2] {
    [-20.0 * PI, 20.0 * PI]
}

/// Gains act on the phase error in radians; the controller output is the
/// increment of the actuator phase at each update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidConfig {
    pub kp: f64,
    #[serde(default)]
    pub ki: f64,
    #[serde(default)]
    pub kd: f64,
    #[serde(default = "default_setpoint")]
    pub setpoint: f64,
    #[serde(default = "default_interval")]
    pub interval: f64,
    #[serde(default = "default_limits")]
    pub limits: [f64; 2],
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            kp: 0.6,
            ki: 2.0,
            kd: 0.0,
            setpoint: default_setpoint(),
            interval: default_interval(),
            limits: default_limits(),
        }
    }
}

impl PidConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.interval > 0.0) {
            return Err(Error::Config("PID update interval must be positive".into()));
        }
        if !(self.limits[0] < self.limits[1]) {
            return Err(Error::Config("PID actuator limits must be increasing".into()));
        }
        Ok(())
    }
}

/// `sign · p'_jk(φ)` for one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorTerm {
    pub j: usize,
    pub k: usize,
    pub sign: f64,
    pub fringe: Fringe,
}

/// `S(φ) = Σ sign_jk p'_jk(φ)`, with rates relative to vacuum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSignal {
    pub terms: Vec<ErrorTerm>,
    /// Converts ratios to per-pulse probabilities for shot noise.
    pub p_vac: f64,
}

impl ErrorSignal {
    pub fn eval(&self, phi: f64) -> f64 {
        crate::sum::sum_f64(self.terms.iter().map(|t| t.sign * t.fringe.eval(phi)))
    }

    pub fn slope(&self, phi: f64) -> f64 {
        crate::sum::sum_f64(
            self.terms
                .iter()
                .map(|t| -2.0 * t.sign * t.fringe.b * (2.0 * phi + t.fringe.c).sin()),
        )
    }

    pub fn negated(&self) -> Self {
        let mut s = self.clone();
        for t in &mut s.terms {
            t.sign = -t.sign;
        }
        s
    }

    /// Poisson-noisy measurement of `S` averaged over `pulses` pulses at the
    /// phases in `phis`.
    fn measure<R: Rng + ?Sized>(&self, phis: &[f64], pulses: Option<f64>, rng: &mut R) -> f64 {
        let n = phis.len() as f64;
        let mean = |t: &ErrorTerm| phis.iter().map(|&p| t.fringe.eval(p)).sum::<f64>() / n;
        match pulses {
            None => self.terms.iter().map(|t| t.sign * mean(t)).sum(),
            Some(pulses) => {
                let scale = self.p_vac * pulses;
                self.terms
                    .iter()
                    .map(|t| {
                        let lam = (mean(t) * scale).max(0.0);
                        let k = if lam > 0.0 { Poisson::new(lam).unwrap().sample(rng) } else { 0.0 };
                        t.sign * k / scale
                    })
                    .sum()
            }
        }
    }
}

/// Error signal from the chosen pairs and signs.
pub fn build_error_signal(state: &GaussianState, pairs: &[(usize, usize, f64)]) -> Result<ErrorSignal> {
    if pairs.is_empty() {
        return Err(Error::invalid("error signal needs at least one pair"));
    }
    let terms = pairs
        .iter()
        .map(|&(j, k, sign)| {
            let p = probability::predict_twofold(state, j, k, 0.0)?;
            Ok(ErrorTerm { j, k, sign, fringe: p.fringe })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ErrorSignal {
        terms,
        p_vac: state.vacuum_probability(),
    })
}

/// Pairs used by the automatic error signal unless configured otherwise.
pub const DEFAULT_AUTO_PAIRS: usize = 10;

/// Automatic stand-in for the hand-picked pairs: the `count` pairs with the
/// largest slope-to-noise ratio `|dp'/dφ| / √p'` at the setpoint, signed so
/// every slope is positive there.
pub fn auto_error_pairs(state: &GaussianState, setpoint: f64, count: usize) -> Result<Vec<(usize, usize, f64)>> {
    let d = state.modes();
    let mut scored = Vec::new();
    for j in 0..d {
        for k in j + 1..d {
            let f = probability::predict_twofold(state, j, k, setpoint)?.fringe;
            let slope = -2.0 * f.b * (2.0 * setpoint + f.c).sin();
            let noise = f.eval(setpoint).max(1e-300).sqrt();
            if slope != 0.0 {
                scored.push((slope.abs() / noise, j, k, slope.signum()));
            }
        }
    }
    if scored.is_empty() {
        return Err(Error::invalid("no pair has a phase-dependent twofold rate"));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    Ok(scored.into_iter().take(count.max(1)).map(|(_, j, k, s)| (j, k, s)).collect())
}

/// Lock-run parameters that are not part of the controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LockOptions {
    pub duration: f64,
    /// Excluded from the residual statistics.
    pub settle: f64,
    /// Phase offset from the setpoint at `t = 0`.
    pub initial_offset: f64,
    /// Pulses per controller update for shot noise on the error signal;
    /// `None` measures the exact signal.
    pub pulses_per_update: Option<f64>,
    /// Time outside the capture range (|residual| > π/4) before the loop is
    /// declared diverged.
    pub divergence_time: f64,
}

impl Default for LockOptions {
    fn default() -> Self {
        Self {
            duration: 60.0,
            settle: 2.0,
            initial_offset: 0.0,
            pulses_per_update: Some(1e6),
            divergence_time: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockTrace {
    pub times: Vec<f64>,
    pub phi: Vec<f64>,
    /// The phase the drift alone would produce.
    pub unlocked: Vec<f64>,
    pub control: Vec<f64>,
    pub setpoint: f64,
    pub interval: f64,
    /// Standard deviation of the residual `φ − setpoint` (modulo π) after
    /// the settle time.
    pub residual_std: f64,
    pub residual_mean: f64,
    /// `max − min` of the unlocked phase.
    pub unlocked_span: f64,
    pub diverged: bool,
    pub diverged_at: Option<f64>,
}

impl LockTrace {
    /// Mean phase over each controller interval.
    pub fn interval_means(&self) -> Vec<f64> {
        if self.times.is_empty() {
            return Vec::new();
        }
        let step = if self.times.len() > 1 { self.times[1] - self.times[0] } else { self.interval };
        let per = ((self.interval / step).round() as usize).max(1);
        self.phi.chunks(per).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "phi", "unlocked", "control"])?;
        for i in 0..self.times.len() {
            out.write_record([
                fmt_f64(self.times[i]),
                fmt_f64(self.phi[i]),
                fmt_f64(self.unlocked[i]),
                fmt_f64(self.control[i]),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Residual modulo the π period of every twofold fringe, in `[−π/2, π/2)`.
pub fn residual(phi: f64, setpoint: f64) -> f64 {
    let x = phi - setpoint;
    x - PI * ((x + PI / 2.0) / PI).floor()
}

/// Closed-loop simulation. Between updates the actuator holds; at each
/// update the measured error `(S − S(setpoint)) / |S'(setpoint)|` drives the
/// increment `kp e + ki Σe Δt + kd Δe / Δt`, which is subtracted from the
/// actuator phase.
pub fn pid_lock(
    drift: &DriftModel,
    pid: &PidConfig,
    signal: &ErrorSignal,
    opts: &LockOptions,
    seed: u64,
) -> Result<LockTrace> {
    drift.validate()?;
    pid.validate()?;
    if signal.terms.is_empty() {
        return Err(Error::invalid("error signal has no terms"));
    }
    let target = signal.eval(pid.setpoint);
    let gain = signal.slope(pid.setpoint).abs();
    if !(gain > 0.0) {
        return Err(Error::invalid("error signal is flat at the setpoint"));
    }
    let steps = (opts.duration / drift.step).round() as usize;
    let per = ((pid.interval / drift.step).round() as usize).max(1);
    let mut drift_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let unlocked: Vec<f64> = drift
        .sample(steps, &mut drift_rng)
        .into_iter()
        .map(|v| pid.setpoint + opts.initial_offset + v)
        .collect();
    let mut trace = LockTrace {
        times: Vec::with_capacity(steps),
        phi: Vec::with_capacity(steps),
        unlocked: unlocked.clone(),
        control: Vec::with_capacity(steps),
        setpoint: pid.setpoint,
        interval: pid.interval,
        residual_std: 0.0,
        residual_mean: 0.0,
        unlocked_span: 0.0,
        diverged: false,
        diverged_at: None,
    };
    let (mut u, mut integral, mut prev) = (0.0, 0.0, None::<f64>);
    let mut outside = 0.0;
    let mut window = Vec::with_capacity(per);
    for (n, &free) in unlocked.iter().enumerate() {
        let t = n as f64 * drift.step;
        let phi = free + u;
        trace.times.push(t);
        trace.phi.push(phi);
        trace.control.push(u);
        window.push(phi);
        if residual(phi, pid.setpoint).abs() > PI / 4.0 {
            outside += drift.step;
        } else {
            outside = 0.0;
        }
        if !trace.diverged && (outside > opts.divergence_time || u <= pid.limits[0] || u >= pid.limits[1]) {
            trace.diverged = true;
            trace.diverged_at = Some(t);
        }
        if window.len() == per {
            let pulses = opts.pulses_per_update;
            let e = (signal.measure(&window, pulses, &mut noise_rng) - target) / gain;
            integral += e * pid.interval;
            let de = prev.map_or(0.0, |p| e - p);
            u -= pid.kp * e + pid.ki * integral + pid.kd * de / pid.interval;
            u = u.clamp(pid.limits[0], pid.limits[1]);
            prev = Some(e);
            window.clear();
        }
    }
    let kept: Vec<f64> = trace
        .times
        .iter()
        .zip(&trace.phi)
        .filter(|(t, _)| **t >= opts.settle)
        .map(|(_, &p)| residual(p, pid.setpoint))
        .collect();
    if !kept.is_empty() {
        let n = kept.len() as f64;
        let mean = kept.iter().sum::<f64>() / n;
        trace.residual_mean = mean;
        trace.residual_std = (kept.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    }
    let (lo, hi) = unlocked
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    trace.unlocked_span = if unlocked.is_empty() { 0.0 } else { hi - lo };
    Ok(trace)
}

/// Grid search of `(kp, ki)` minimising the locked residual std over
/// `seeds`; diverging candidates are discarded.
pub fn tune_pid(
    drift: &DriftModel,
    base: &PidConfig,
    signal: &ErrorSignal,
    opts: &LockOptions,
    seeds: &[u64],
    kp_grid: &[f64],
    ki_grid: &[f64],
) -> Result<(PidConfig, f64)> {
    let candidates: Vec<PidConfig> = kp_grid
        .iter()
        .flat_map(|&kp| ki_grid.iter().map(move |&ki| PidConfig { kp, ki, ..*base }))
        .collect();
    let scored: Vec<(usize, f64)> = candidates
        .par_iter()
        .enumerate()
        .filter_map(|(i, pid)| {
            let mut worst: f64 = 0.0;
            for &s in seeds {
                let t = pid_lock(drift, pid, signal, opts, s).ok()?;
                if t.diverged {
                    return None;
                }
                worst = worst.max(t.residual_std);
            }
            Some((i, worst))
        })
        .collect();
    let (i, std) = scored
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .ok_or_else(|| Error::invalid("every gain on the grid diverged"))?;
    Ok((candidates[i], std))
}

/// Default tuning grid.
pub fn default_gain_grid() -> (Vec<f64>, Vec<f64>) {
    (
        vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0, 1.2],
        vec![0.0, 0.25, 0.5, 1.0, 2.0, 3.0, 4.0],
    )
}

/// `|T_ij|² = η_tot R_ij / Σ_j R_ij` from singles rates `R` (row `i` probes
/// input `i`).
pub fn transfer_from_singles(rates: &[Vec<f64>], eta_tot: f64) -> Result<Vec<Vec<f64>>> {
    if !(0.0..=1.0).contains(&eta_tot) {
        return Err(Error::invalid(format!("eta_tot = {eta_tot} outside [0, 1]")));
    }
    rates
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if row.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::invalid(format!("row {i} has a negative or non-finite rate")));
            }
            let s = crate::sum::sum_f64(row.iter().copied());
            if !(s > 0.0) {
                return Err(Error::invalid(format!("row {i} has no counts")));
            }
            Ok(row.iter().map(|x| eta_tot * x / s).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::c;
    use crate::state::{output_state, SourceConfig, TransferMatrix};

    #[test]
    fn vacuum_samples_only_vacuum() {
        let s = GaussianState::vacuum(4);
        let clicks = sample_patterns(&s, ModelSpec::full(), 100_000, 3, 1, 1_000_000).unwrap();
        assert!(clicks.is_empty());
        let t = SamplerTable::new(&s, ModelSpec::full(), 3, 1_000_000).unwrap();
        assert_eq!(sample_counts(&t, 1000, 1).counts[0], 1000);
    }

    #[test]
    fn coherent_singles_are_poisson() {
        let alpha = [c(0.1, 0.0), c(0.0, 0.2), c(0.05, 0.05)];
        let s = GaussianState::coherent(&alpha);
        let table = SamplerTable::new(&s, ModelSpec::full(), 3, 1_000_000).unwrap();
        let pulses = 1_000_000u64;
        let counts = sample_counts(&table, pulses, 7);
        for (j, a) in alpha.iter().enumerate() {
            let n = a.norm_sqr();
            let p_click = 1.0 - (-n).exp();
            let observed: u64 = table
                .patterns
                .iter()
                .zip(&counts.counts)
                .filter(|(p, _)| p.counts()[j] == 1)
                .map(|(_, &k)| k)
                .sum();
            // Collisions land in the discard bucket.
            let collision = (-n).exp() * (n * n / 2.0 + n.powi(3) / 6.0);
            let expected = (p_click - collision) * pulses as f64;
            let sigma = (expected * (1.0 - expected / pulses as f64)).sqrt();
            assert!((observed as f64 - expected).abs() < 3.0 * sigma + 1.0, "mode {j}: {observed} vs {expected}");
        }
    }

    #[test]
    fn sampling_is_reproducible_and_thread_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = crate::random::physical_state(5, &mut rng);
        let a = sample_patterns(&s, ModelSpec::full(), 200_000, 3, 11, 1_000_000).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| sample_patterns(&s, ModelSpec::full(), 200_000, 3, 11, 1_000_000).unwrap());
        assert_eq!(a, b);
        let c = sample_patterns(&s, ModelSpec::full(), 200_000, 3, 12, 1_000_000).unwrap();
        assert_ne!(a, c);
        assert!(a.windows(2).all(|w| w[0].pulse < w[1].pulse));
    }

    #[test]
    fn empirical_matches_exact_within_sampling_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = crate::random::physical_state(5, &mut rng);
        let clicks = sample_patterns(&s, ModelSpec::full(), 2_000_000, 2, 5, 1_000_000).unwrap();
        let emp = empirical_distribution(&clicks, 5, 2);
        let exact = probability::enumerate_distribution(&s, 2, true, ModelSpec::full(), 1_000_000).unwrap();
        let k = exact.len() as f64;
        let p = clicks.iter().filter(|c| c.photons() == 2).count() as f64;
        let tvd = crate::metrics::tvd_slices(&emp, &exact.probabilities).unwrap();
        assert!(tvd < (k / p).sqrt(), "tvd {tvd}, bound {}", (k / p).sqrt());
    }

    #[test]
    fn budget_is_enforced() {
        let s = GaussianState::vacuum(12);
        assert!(matches!(SamplerTable::new(&s, ModelSpec::full(), 6, 100), Err(Error::Budget { .. })));
    }

    #[test]
    fn clicks_csv_round_trip() {
        let clicks = vec![
            ClickRecord { pulse: 3, pattern: 0b101, phi: 0.25 },
            ClickRecord { pulse: 9, pattern: 0x4001, phi: -1.0 },
        ];
        let mut buf = Vec::new();
        write_clicks_csv(&clicks, 15, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "pulse,pattern,phi\n3,0005,0.25\n9,4001,-1.0\n");
        assert_eq!(read_clicks_csv(buf.as_slice(), 15).unwrap(), clicks);
        assert!(read_clicks_csv(buf.as_slice(), 4).is_err());
    }

    fn lock_state() -> GaussianState {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let (cfg, t) = crate::random::lab_scale_setup(&mut rng);
        output_state(&cfg, &t).unwrap()
    }

    #[test]
    fn error_signal_basics() {
        let s = lock_state();
        let one = build_error_signal(&s, &[(0, 1, 1.0)]).unwrap();
        let f = probability::predict_twofold(&s, 0, 1, 0.0).unwrap().fringe;
        for phi in [0.0, 0.3, 1.1] {
            assert!((one.eval(phi) - f.eval(phi)).abs() < 1e-15);
        }
        let zero = build_error_signal(&s, &[(0, 1, 1.0), (0, 1, -1.0)]).unwrap();
        assert_eq!(zero.eval(0.7), 0.0);
        assert!(build_error_signal(&s, &[]).is_err());
        let pairs = auto_error_pairs(&s, PI / 4.0, 6).unwrap();
        let sig = build_error_signal(&s, &pairs).unwrap();
        assert!(sig.slope(PI / 4.0) > 0.0);
        for phi in [0.1, 0.9, 2.0] {
            assert!((sig.eval(phi) - sig.eval(phi + PI)).abs() < 1e-15);
        }
    }

    #[test]
    fn trivial_locks() {
        let s = lock_state();
        let sig = build_error_signal(&s, &auto_error_pairs(&s, PI / 4.0, 6).unwrap()).unwrap();
        let quiet = DriftModel::none(0.01);
        let opts = LockOptions {
            duration: 5.0,
            settle: 0.0,
            initial_offset: 0.3,
            pulses_per_update: None,
            ..Default::default()
        };
        let idle = PidConfig { kp: 0.0, ki: 0.0, ..Default::default() };
        let t = pid_lock(&quiet, &idle, &sig, &opts, 1).unwrap();
        assert!(t.phi.iter().all(|&p| p == PI / 4.0 + 0.3));
        let p_only = PidConfig { kp: 0.3, ki: 0.0, ..Default::default() };
        let t = pid_lock(&quiet, &p_only, &sig, &opts, 1).unwrap();
        let end = residual(*t.phi.last().unwrap(), PI / 4.0);
        assert!(end.abs() < 1e-6, "{end}");
        let r1 = residual(t.phi[10], PI / 4.0).abs();
        let r2 = residual(t.phi[20], PI / 4.0).abs();
        assert!(r2 < r1 && r1 < 0.3);
        let flat = LockOptions { initial_offset: 0.0, ..opts };
        let t = pid_lock(&quiet, &PidConfig::default(), &sig, &flat, 1).unwrap();
        assert!(t.phi.iter().all(|&p| (p - PI / 4.0).abs() < 1e-12));
    }

    #[test]
    fn negated_signal_is_unstable() {
        let s = lock_state();
        let sig = build_error_signal(&s, &auto_error_pairs(&s, PI / 4.0, 6).unwrap()).unwrap();
        let opts = LockOptions {
            duration: 20.0,
            initial_offset: 0.05,
            ..Default::default()
        };
        let good = pid_lock(&DriftModel::default(), &PidConfig::default(), &sig, &opts, 2).unwrap();
        assert!(!good.diverged);
        let bad = pid_lock(&DriftModel::default(), &PidConfig::default(), &sig.negated(), &opts, 2).unwrap();
        assert!(bad.diverged);
    }

    #[test]
    fn conditioned_sampling_matches_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = crate::random::physical_state(4, &mut rng);
        let draws = sample_conditioned(&s, ModelSpec::full(), 2, 2, 40_000, 3, 1_000_000).unwrap();
        assert!(draws.iter().all(|p| p.total() == 2 && p.is_collision_free()));
        let exact = probability::enumerate_distribution(&s, 2, true, ModelSpec::full(), 1_000_000).unwrap();
        for (pat, &q) in exact.patterns.iter().zip(&exact.probabilities) {
            let f = draws.iter().filter(|p| *p == pat).count() as f64 / draws.len() as f64;
            let sigma = (q * (1.0 - q) / draws.len() as f64).sqrt();
            assert!((f - q).abs() < 4.0 * sigma + 1e-4, "{pat}: {f} vs {q}");
        }
        assert!(sample_conditioned(&s, ModelSpec::full(), 3, 2, 1, 0, 1_000_000).is_err());
    }

    #[test]
    fn transfer_amplitudes() {
        let t = transfer_from_singles(&[vec![1.0; 5]], 0.1).unwrap();
        assert!(t[0].iter().all(|&x| (x - 0.02).abs() < 1e-15));
        assert!(transfer_from_singles(&[vec![0.0, 0.0]], 0.5).is_err());
        let id = transfer_from_singles(&[vec![3.0, 0.0], vec![0.0, 2.0]], 1.0).unwrap();
        assert_eq!(id, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn coherent_probe_recovers_transfer() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let eta = 0.3;
        let tm = crate::random::lossy_haar_transfer(4, eta, &mut rng);
        let pulses = 2_000_000u64;
        let mut rates = Vec::new();
        for i in 0..4 {
            let cfg = SourceConfig {
                r: 0.0,
                alpha_mag: 0.1,
                phi: 0.0,
                squeezer_ports: None,
                coherent_port: Some(i),
                efficiencies: crate::state::Efficiencies::lumped(eta),
            };
            let s = output_state(&cfg, &tm).unwrap();
            let table = SamplerTable::new(&s, ModelSpec::full(), 1, 1_000_000).unwrap();
            let counts = sample_counts(&table, pulses, 100 + i as u64);
            rates.push((1..=4).map(|k| counts.counts[k] as f64 / pulses as f64).collect::<Vec<_>>());
        }
        let est = transfer_from_singles(&rates, eta).unwrap();
        for i in 0..4 {
            let total: f64 = rates[i].iter().sum::<f64>() * pulses as f64;
            for j in 0..4 {
                let truth = tm.matrix()[(i, j)].norm_sqr();
                let sigma = eta * (truth / eta * (1.0 - truth / eta) / total).sqrt();
                assert!((est[i][j] - truth).abs() < 3.0 * sigma + 1e-4, "{i}{j}: {} vs {truth}", est[i][j]);
            }
        }
        let _ = TransferMatrix::identity(2);
    }
}
