//! Pattern probabilities and fixed-N distributions.
//!
//! `pr(n) = p_vac · lhaf(Ã_n) / ∏ n_i!`. Everything that only needs ratios
//! (normalised fixed-N tables, singles and twofold rates relative to vacuum)
//! works from `(A, γ)` alone; `p_vac` is attached when a state is available.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hafnian::{self, DetectionPattern, Method, PairDecomposition};
use crate::io::fmt_f64;
use crate::state::{self, AMatrix, GammaVector, GaussianState, SourceConfig, TransferMatrix};
use crate::sum::NeumaierSum;

/// Which terms of the probability formula are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Full,
    /// At most `k` photons from the squeezer.
    Korder { k: usize },
    /// Displacement removed.
    SqueezerOnly,
    /// Full formula on the closest classical state.
    Classical,
}

impl ModelKind {
    pub fn parse(s: &str, k: Option<usize>) -> Result<Self> {
        match s {
            "full" => Ok(ModelKind::Full),
            "korder" | "k-order" => k
                .map(|k| ModelKind::Korder { k })
                .ok_or_else(|| Error::Config("model `korder` needs --k".into())),
            "squeezer_only" | "squeezer-only" => Ok(ModelKind::SqueezerOnly),
            "classical" => Ok(ModelKind::Classical),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected full, korder, squeezer_only, classical)"
            ))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ModelKind::Full => "full".into(),
            ModelKind::Korder { k } => format!("korder({k})"),
            ModelKind::SqueezerOnly => "squeezer_only".into(),
            ModelKind::Classical => "classical".into(),
        }
    }
}

/// A model together with the hafnian evaluator used for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default)]
    pub method: Method,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            method: Method::Auto,
        }
    }

    pub fn full() -> Self {
        Self::new(ModelKind::Full)
    }

    pub fn korder(k: usize) -> Self {
        Self::new(ModelKind::Korder { k })
    }
}

/// Source and circuit: the state builder behind every model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setup {
    pub source: SourceConfig,
    pub transfer: TransferMatrix,
}

impl Setup {
    pub fn modes(&self) -> usize {
        self.transfer.outputs()
    }

    /// Output state the model is evaluated on: the classical surrogate for
    /// [`ModelKind::Classical`], the propagated source otherwise.
    pub fn state_for(&self, kind: ModelKind) -> Result<GaussianState> {
        match kind {
            ModelKind::Classical => state::classical_surrogate(&self.source, &self.transfer),
            _ => state::output_state(&self.source, &self.transfer),
        }
    }

    pub fn pattern_probability(&self, n: &DetectionPattern, model: ModelSpec) -> Result<f64> {
        pattern_probability(&self.state_for(model.kind)?, n, model)
    }

    pub fn enumerate_distribution(
        &self,
        photons: usize,
        collision_free: bool,
        model: ModelSpec,
        budget: u64,
    ) -> Result<PatternDistribution> {
        enumerate_distribution(&self.state_for(model.kind)?, photons, collision_free, model, budget)
    }
}

/// `(A, γ)` and `ln p_vac` of a state prepared for one model.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub a: AMatrix,
    pub gamma: GammaVector,
    pub ln_p_vac: Option<f64>,
    pub kind: ModelKind,
    pub method: Method,
    pub state_hash: Option<String>,
}

impl Prepared {
    /// Only the displacement matters for the model choice here: the
    /// squeezer-only model drops it, every other model keeps it (the
    /// classical model expects the surrogate state to be passed in).
    pub fn from_state(state: &GaussianState, model: ModelSpec) -> Self {
        let s = match model.kind {
            ModelKind::SqueezerOnly => state.without_displacement(),
            _ => state.clone(),
        };
        Self {
            a: s.a_matrix(),
            gamma: s.gamma_vector(),
            ln_p_vac: Some(s.ln_vacuum_probability()),
            kind: model.kind,
            method: model.method,
            state_hash: Some(crate::io::content_hash(state)),
        }
    }

    /// From a kernel alone; only ratios to `p_vac` are available.
    pub fn from_kernel(a: AMatrix, gamma: GammaVector, model: ModelSpec) -> Result<Self> {
        if a.modes() != gamma.modes() {
            return Err(Error::dim("A and gamma disagree on the mode count"));
        }
        let gamma = match model.kind {
            ModelKind::SqueezerOnly => GammaVector::zeros(a.modes()),
            _ => gamma,
        };
        Ok(Self {
            a,
            gamma,
            ln_p_vac: None,
            kind: model.kind,
            method: model.method,
            state_hash: None,
        })
    }

    pub fn modes(&self) -> usize {
        self.a.modes()
    }

    /// Pair-count decomposition of `lhaf(Ã_n) / ∏ n_i!`.
    pub fn decomposition(&self, n: &DetectionPattern) -> Result<PairDecomposition> {
        let k = hafnian::reduce_by_pattern(&self.a, &self.gamma, n)?;
        let mut dec = hafnian::pair_decomposition(&k, self.method)?;
        let f = n.factorial_product();
        for t in &mut dec.terms {
            *t /= f;
        }
        Ok(dec)
    }

    /// `pr(n) / p_vac`.
    pub fn ratio(&self, n: &DetectionPattern) -> Result<f64> {
        Ok(ratio_from(&self.decomposition(n)?, self.kind))
    }

    pub fn probability(&self, n: &DetectionPattern) -> Result<f64> {
        let ln_p_vac = self
            .ln_p_vac
            .ok_or_else(|| Error::invalid("absolute probabilities need p_vac"))?;
        Ok(scale_by_vacuum(self.ratio(n)?, ln_p_vac))
    }
}

/// Real part of the kept terms, negative values clamped to zero.
pub fn ratio_from(dec: &PairDecomposition, kind: ModelKind) -> f64 {
    let v = match kind {
        ModelKind::Korder { k } => dec.truncated(k),
        _ => dec.full(),
    };
    v.re.max(0.0)
}

fn scale_by_vacuum(ratio: f64, ln_p_vac: f64) -> f64 {
    if ratio <= 0.0 {
        0.0
    } else {
        (ratio.ln() + ln_p_vac).exp()
    }
}

/// Probability of one detection pattern. For [`ModelKind::Classical`] the
/// caller passes the classical surrogate state (see [`Setup::state_for`]).
pub fn pattern_probability(state: &GaussianState, n: &DetectionPattern, model: ModelSpec) -> Result<f64> {
    if n.modes() != state.modes() {
        return Err(Error::dim(format!(
            "pattern has {} modes, state has {}",
            n.modes(),
            state.modes()
        )));
    }
    Prepared::from_state(state, model).probability(n)
}

/// Collision-free patterns with `photons` clicks, ordered lexicographically by
/// the list of clicked modes.
pub fn collision_free_patterns(d: usize, photons: usize) -> Vec<DetectionPattern> {
    let mut out = Vec::new();
    if photons > d {
        return out;
    }
    let mut modes: Vec<usize> = (0..photons).collect();
    loop {
        out.push(DetectionPattern::from_modes(d, &modes).expect("modes in range"));
        let Some(i) = (0..photons).rev().find(|&i| modes[i] < d - photons + i) else {
            return out;
        };
        modes[i] += 1;
        for j in (i + 1)..photons {
            modes[j] = modes[j - 1] + 1;
        }
    }
}

/// All patterns with `photons` photons, ordered lexicographically by the
/// non-decreasing list of clicked modes.
pub fn all_patterns(d: usize, photons: usize) -> Vec<DetectionPattern> {
    let mut out = Vec::new();
    if d == 0 {
        if photons == 0 {
            out.push(DetectionPattern::vacuum(0));
        }
        return out;
    }
    let mut modes = vec![0usize; photons];
    loop {
        out.push(DetectionPattern::from_modes(d, &modes).expect("modes in range"));
        let Some(i) = (0..photons).rev().find(|&i| modes[i] < d - 1) else {
            return out;
        };
        modes[i] += 1;
        for j in (i + 1)..photons {
            modes[j] = modes[i];
        }
    }
}

pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    u64::try_from(acc).unwrap_or(u64::MAX)
}

pub fn pattern_count(d: usize, photons: usize, collision_free: bool) -> u64 {
    if collision_free {
        binomial(d as u64, photons as u64)
    } else {
        binomial((d + photons).saturating_sub(1) as u64, photons as u64)
    }
}

pub const DEFAULT_BUDGET: u64 = 2_000_000;

/// Normalised distribution over all patterns with a fixed photon number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternDistribution {
    pub d: usize,
    pub photons: usize,
    pub collision_free: bool,
    pub model: ModelSpec,
    pub patterns: Vec<DetectionPattern>,
    pub probabilities: Vec<f64>,
    /// Sum of the unnormalised probabilities (or ratios to `p_vac` when the
    /// vacuum probability is unknown).
    pub unnormalized_total: f64,
    pub p_vac: Option<f64>,
    pub state_hash: Option<String>,
}

impl PatternDistribution {
    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn probability_of(&self, n: &DetectionPattern) -> Option<f64> {
        self.patterns
            .binary_search_by(|p| pattern_order(p, n))
            .ok()
            .map(|i| self.probabilities[i])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["pattern", "probability"])?;
        for (p, x) in self.patterns.iter().zip(&self.probabilities) {
            out.write_record([p.to_string(), fmt_f64(*x)])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }
}

/// Order used by the enumerators: lexicographic on the clicked-mode list.
pub fn pattern_order(a: &DetectionPattern, b: &DetectionPattern) -> std::cmp::Ordering {
    a.occupied().cmp(&b.occupied())
}

fn patterns_for(d: usize, photons: usize, collision_free: bool, budget: u64) -> Result<Vec<DetectionPattern>> {
    let needed = pattern_count(d, photons, collision_free);
    if needed > budget {
        return Err(Error::Budget {
            what: format!("{photons}-photon pattern enumeration over {d} modes"),
            needed,
            budget,
        });
    }
    Ok(if collision_free {
        collision_free_patterns(d, photons)
    } else {
        all_patterns(d, photons)
    })
}

/// Per-pattern decompositions for a fixed photon number, computed in
/// parallel and returned in enumeration order.
pub fn enumerate_decompositions(
    prepared: &Prepared,
    photons: usize,
    collision_free: bool,
    budget: u64,
) -> Result<(Vec<DetectionPattern>, Vec<PairDecomposition>)> {
    let patterns = patterns_for(prepared.modes(), photons, collision_free, budget)?;
    let decs = patterns
        .par_iter()
        .map(|n| prepared.decomposition(n))
        .collect::<Result<Vec<_>>>()?;
    Ok((patterns, decs))
}

/// Builds a normalised distribution from per-pattern decompositions.
pub fn distribution_from_decompositions(
    prepared: &Prepared,
    patterns: Vec<DetectionPattern>,
    decs: &[PairDecomposition],
    kind: ModelKind,
    photons: usize,
    collision_free: bool,
) -> Result<PatternDistribution> {
    let ratios: Vec<f64> = decs.iter().map(|d| ratio_from(d, kind)).collect();
    let total: f64 = ratios.iter().copied().collect::<NeumaierSum>().value();
    if !(total > 0.0) {
        return Err(Error::invalid(format!(
            "{} model assigns zero probability to every {photons}-photon pattern",
            kind.label()
        )));
    }
    let probabilities = ratios.iter().map(|r| r / total).collect();
    let p_vac = prepared.ln_p_vac.map(f64::exp);
    Ok(PatternDistribution {
        d: prepared.modes(),
        photons,
        collision_free,
        model: ModelSpec {
            kind,
            method: prepared.method,
        },
        patterns,
        probabilities,
        unnormalized_total: match prepared.ln_p_vac {
            Some(l) => scale_by_vacuum(total, l),
            None => total,
        },
        p_vac,
        state_hash: prepared.state_hash.clone(),
    })
}

pub fn distribution_from_prepared(
    prepared: &Prepared,
    photons: usize,
    collision_free: bool,
    budget: u64,
) -> Result<PatternDistribution> {
    let (patterns, decs) = enumerate_decompositions(prepared, photons, collision_free, budget)?;
    distribution_from_decompositions(prepared, patterns, &decs, prepared.kind, photons, collision_free)
}

/// For [`ModelKind::Classical`] pass the classical surrogate state.
pub fn enumerate_distribution(
    state: &GaussianState,
    photons: usize,
    collision_free: bool,
    model: ModelSpec,
    budget: u64,
) -> Result<PatternDistribution> {
    distribution_from_prepared(&Prepared::from_state(state, model), photons, collision_free, budget)
}

/// Normalised distribution straight from a kernel.
pub fn distribution_from_kernel(
    a: &AMatrix,
    gamma: &GammaVector,
    photons: usize,
    model: ModelSpec,
    budget: u64,
) -> Result<PatternDistribution> {
    let prepared = Prepared::from_kernel(a.clone(), gamma.clone(), model)?;
    distribution_from_prepared(&prepared, photons, true, budget)
}

/// `(p_j, p'_j)`: singles rates relative to vacuum with the coherent beam
/// blocked and unblocked.
pub fn predict_single(state: &GaussianState, j: usize) -> Result<(f64, f64)> {
    let d = state.modes();
    if j >= d {
        return Err(Error::dim(format!("mode {j} out of range for d = {d}")));
    }
    let a = state.a_matrix();
    let g = state.gamma_vector();
    Ok(single_from_kernel(&a, &g, j))
}

pub fn single_from_kernel(a: &AMatrix, gamma: &GammaVector, j: usize) -> (f64, f64) {
    let c = a.c()[(j, j)].re;
    (c, c + gamma.top()[j].norm_sqr())
}

/// `a + b cos(2φ + c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fringe {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Fringe {
    pub fn eval(&self, phi: f64) -> f64 {
        self.a + self.b * (2.0 * phi + self.c).cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwofoldPrediction {
    /// Coherent beam blocked.
    pub p_jk: f64,
    /// Coherent beam on, at the requested phase.
    pub p_prime: f64,
    /// Phase dependence of `p_prime`.
    pub fringe: Fringe,
}

/// Twofold rates relative to vacuum for modes `j ≠ k`. Scanning the coherent
/// phase by `φ` rotates the annihilation half of `γ` by `e^{iφ}`.
pub fn predict_twofold(state: &GaussianState, j: usize, k: usize, phi: f64) -> Result<TwofoldPrediction> {
    let d = state.modes();
    if j >= d || k >= d {
        return Err(Error::dim(format!("modes ({j}, {k}) out of range for d = {d}")));
    }
    if j == k {
        return Err(Error::invalid("twofold prediction needs two distinct modes"));
    }
    Ok(twofold_from_kernel(&state.a_matrix(), &state.gamma_vector(), j, k, phi))
}

pub fn twofold_from_kernel(a: &AMatrix, gamma: &GammaVector, j: usize, k: usize, phi: f64) -> TwofoldPrediction {
    let g = gamma.top();
    let (b, c) = (a.b()[(j, k)], a.c()[(j, k)]);
    let (cj, ck) = (a.c()[(j, j)].re, a.c()[(k, k)].re);
    let pj = cj + g[j].norm_sqr();
    let pk = ck + g[k].norm_sqr();
    let blocked = cj * ck + b.norm_sqr() + c.norm_sqr();
    let cross = b.conj() * g[j] * g[k];
    let a0 = pj * pk + b.norm_sqr() + c.norm_sqr() + 2.0 * (c * g[j].conj() * g[k]).re;
    let fringe = Fringe {
        a: a0,
        b: 2.0 * cross.norm(),
        c: if cross.norm() > 0.0 { cross.arg() } else { 0.0 },
    };
    TwofoldPrediction {
        p_jk: blocked,
        p_prime: fringe.eval(phi),
        fringe,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::c;
    use crate::random;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vacuum_pattern_is_p_vac() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random::physical_state(3, &mut rng);
        let p = pattern_probability(&s, &DetectionPattern::vacuum(3), ModelSpec::full()).unwrap();
        assert_abs_diff_eq!(p, s.vacuum_probability(), epsilon = 1e-15);
    }

    #[test]
    fn coherent_poisson() {
        let alpha = [c(0.5, 0.2), c(-0.3, 0.7)];
        let s = GaussianState::coherent(&alpha);
        let n = DetectionPattern::new(vec![2, 1]);
        let p = pattern_probability(&s, &n, ModelSpec::full()).unwrap();
        let expect: f64 = alpha
            .iter()
            .zip([2u32, 1])
            .map(|(a, k)| {
                let m = a.norm_sqr();
                (-m).exp() * m.powi(k as i32) / (1..=k).map(f64::from).product::<f64>()
            })
            .product();
        assert_abs_diff_eq!(p, expect, epsilon = 1e-15);
    }

    #[test]
    fn squeezed_vacuum_two_photons() {
        let r = 0.5;
        let s = GaussianState::squeezed_vacuum(r);
        let p = pattern_probability(&s, &DetectionPattern::new(vec![2]), ModelSpec::full()).unwrap();
        assert_abs_diff_eq!(p, r.tanh().powi(2) / (2.0 * r.cosh()), epsilon = 1e-14);
        let odd = pattern_probability(&s, &DetectionPattern::new(vec![1]), ModelSpec::full()).unwrap();
        assert_eq!(odd, 0.0);
    }

    #[test]
    fn pattern_counts() {
        assert_eq!(collision_free_patterns(15, 3).len(), 455);
        assert_eq!(collision_free_patterns(15, 4).len(), 1365);
        assert_eq!(pattern_count(15, 4, true), 1365);
        assert_eq!(all_patterns(3, 2).len() as u64, pattern_count(3, 2, false));
        assert_eq!(collision_free_patterns(3, 0), vec![DetectionPattern::vacuum(3)]);
        let ps = collision_free_patterns(5, 2);
        assert!(ps.windows(2).all(|w| pattern_order(&w[0], &w[1]).is_lt()));
        let ps = all_patterns(4, 3);
        assert!(ps.windows(2).all(|w| pattern_order(&w[0], &w[1]).is_lt()));
        assert_eq!(ps.len(), 20);
    }

    #[test]
    fn budget_enforced() {
        let s = GaussianState::vacuum(15);
        let err = enumerate_distribution(&s, 4, true, ModelSpec::full(), 100).unwrap_err();
        assert!(matches!(err, Error::Budget { needed: 1365, .. }));
    }

    #[test]
    fn two_mode_singles_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random::physical_state(2, &mut rng);
        let dist = enumerate_distribution(&s, 1, true, ModelSpec::full(), DEFAULT_BUDGET).unwrap();
        assert_eq!(dist.len(), 2);
        let (_, p0) = predict_single(&s, 0).unwrap();
        let (_, p1) = predict_single(&s, 1).unwrap();
        assert_abs_diff_eq!(dist.probabilities[0], p0 / (p0 + p1), epsilon = 1e-12);
    }

    #[test]
    fn predictions_match_loop_hafnian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let s = random::physical_state(4, &mut rng);
            let pv = s.vacuum_probability();
            for j in 0..4 {
                let (_, pp) = predict_single(&s, j).unwrap();
                let n = DetectionPattern::from_modes(4, &[j]).unwrap();
                let direct = pattern_probability(&s, &n, ModelSpec::full()).unwrap() / pv;
                assert!((pp - direct).abs() <= 1e-10 * direct.max(1e-12));
                let (p, _) = predict_single(&s.without_displacement(), j).unwrap();
                let blocked = pattern_probability(&s, &n, ModelSpec::new(ModelKind::SqueezerOnly)).unwrap()
                    / s.without_displacement().vacuum_probability();
                assert!((p - blocked).abs() <= 1e-10 * blocked.max(1e-12));
            }
            for i in 0..8 {
                let phi = i as f64 * 0.7 - 2.0;
                let t = predict_twofold(&s, 1, 3, phi).unwrap();
                let rotated = s.with_displacement_phase(phi);
                let n = DetectionPattern::from_modes(4, &[1, 3]).unwrap();
                let direct = Prepared::from_state(&rotated, ModelSpec::full()).ratio(&n).unwrap();
                assert!((t.p_prime - direct).abs() <= 1e-10 * direct.max(1e-12));
                let blocked = Prepared::from_state(&s, ModelSpec::new(ModelKind::SqueezerOnly))
                    .ratio(&n)
                    .unwrap();
                assert!((t.p_jk - blocked).abs() <= 1e-10 * blocked.max(1e-12));
            }
        }
    }

    #[test]
    fn twofold_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random::physical_state(3, &mut rng).without_displacement();
        let t0 = predict_twofold(&s, 0, 2, 0.0).unwrap();
        let t1 = predict_twofold(&s, 0, 2, 1.3).unwrap();
        assert_abs_diff_eq!(t0.p_prime, t0.p_jk, epsilon = 1e-15);
        assert_eq!(t0.p_prime, t1.p_prime);
        assert_eq!(t0.fringe.b, 0.0);
        assert!(predict_twofold(&s, 1, 1, 0.0).is_err());
    }

    #[test]
    fn squeezer_only_equals_full_without_displacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random::physical_state(4, &mut rng).without_displacement();
        for n in all_patterns(4, 2) {
            let a = pattern_probability(&s, &n, ModelSpec::full()).unwrap();
            let b = pattern_probability(&s, &n, ModelSpec::new(ModelKind::SqueezerOnly)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn korder_at_n_equals_full_and_zero_order_is_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random::physical_state(4, &mut rng);
        let g = s.gamma_vector();
        for n in collision_free_patterns(4, 3) {
            let full = pattern_probability(&s, &n, ModelSpec::full()).unwrap();
            let k3 = pattern_probability(&s, &n, ModelSpec::korder(3)).unwrap();
            assert_eq!(full, k3);
            let k0 = Prepared::from_state(&s, ModelSpec::korder(0)).ratio(&n).unwrap();
            let loops: f64 = n.occupied().iter().map(|&j| g.top()[j].norm_sqr()).product();
            assert_abs_diff_eq!(k0, loops, epsilon = 1e-15);
        }
    }

    #[test]
    fn distribution_is_normalised_and_csv_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random::physical_state(5, &mut rng);
        let dist = enumerate_distribution(&s, 2, true, ModelSpec::full(), DEFAULT_BUDGET).unwrap();
        let total: f64 = dist.probabilities.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mut buf = Vec::new();
        dist.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("pattern,probability\n11000,"));
        assert_eq!(text.lines().count(), 11);
    }
}
