//! Hafnians, loop hafnians and their pair-count truncations.
//!
//! Two evaluators are provided. [`Method::Enumerate`] walks every (loop)
//! matching in lexicographic order and is the reference. [`Method::PowerTrace`]
//! uses the inclusion-exclusion power-trace formula with an extra variable
//! that tracks how many loops a cycle cover uses, so it also yields the
//! per-pair-count decomposition needed for truncated sums.

use std::fmt;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, CVector, ONE, ZERO};
use crate::state::{AMatrix, GammaVector};
use crate::sum::ComplexSum;

/// Photon counts per output mode.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct DetectionPattern {
    counts: Vec<u32>,
    total: usize,
}

impl TryFrom<Vec<u32>> for DetectionPattern {
    type Error = Error;
    fn try_from(counts: Vec<u32>) -> Result<Self> {
        Ok(Self::new(counts))
    }
}

impl From<DetectionPattern> for Vec<u32> {
    fn from(p: DetectionPattern) -> Self {
        p.counts
    }
}

impl DetectionPattern {
    pub fn new(counts: Vec<u32>) -> Self {
        let total = counts.iter().map(|&n| n as usize).sum();
        Self { counts, total }
    }

    pub fn vacuum(d: usize) -> Self {
        Self::new(vec![0; d])
    }

    /// Collision-free pattern with one photon in each listed mode.
    pub fn from_modes(d: usize, modes: &[usize]) -> Result<Self> {
        let mut counts = vec![0u32; d];
        for &m in modes {
            if m >= d {
                return Err(Error::dim(format!("mode {m} out of range for d = {d}")));
            }
            counts[m] += 1;
        }
        Ok(Self::new(counts))
    }

    /// Parses a string of digits, one per mode (`"0101"`).
    pub fn parse(s: &str) -> Result<Self> {
        let counts = s
            .chars()
            .map(|ch| {
                ch.to_digit(10)
                    .ok_or_else(|| Error::invalid(format!("bad pattern character {ch:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(counts))
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn modes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn is_collision_free(&self) -> bool {
        self.counts.iter().all(|&n| n <= 1)
    }

    /// Modes that clicked, in increasing order, repeated per count.
    pub fn occupied(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(j, &n)| std::iter::repeat_n(j, n as usize))
            .collect()
    }

    /// `∏ n_i!`
    pub fn factorial_product(&self) -> f64 {
        self.counts
            .iter()
            .map(|&n| (1..=n).map(f64::from).product::<f64>())
            .product()
    }

    /// Applies a mode relabelling: output mode `perm[j]` receives the count
    /// of mode `j`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut counts = vec![0; self.modes()];
        for (j, &n) in self.counts.iter().enumerate() {
            counts[perm[j]] = n;
        }
        Self::new(counts)
    }
}

impl fmt::Display for DetectionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.counts.iter().all(|&n| n <= 9) {
            for n in &self.counts {
                write!(f, "{n}")?;
            }
            Ok(())
        } else {
            let parts: Vec<String> = self.counts.iter().map(u32::to_string).collect();
            write!(f, "{}", parts.join("-"))
        }
    }
}

/// Pattern-reduced kernel `A_n` with its loop weights `γ̃`.
///
/// Row order: annihilation indices of the clicked modes (each repeated per
/// count, modes increasing), then the matching creation indices. Row `i` and
/// row `i + N` therefore belong to the same photon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedKernel {
    #[serde(with = "crate::io::matrix")]
    pub a_n: CMatrix,
    #[serde(with = "crate::io::vector")]
    pub gamma_tilde: CVector,
}

impl ReducedKernel {
    pub fn new(a_n: CMatrix, gamma_tilde: CVector) -> Result<Self> {
        let n = a_n.nrows();
        if a_n.ncols() != n || gamma_tilde.len() != n {
            return Err(Error::dim("kernel must be square with a matching loop vector"));
        }
        Ok(Self { a_n, gamma_tilde })
    }

    /// Number of photons `N`; the kernel is `2N x 2N`.
    pub fn photons(&self) -> usize {
        self.a_n.nrows() / 2
    }

    pub fn size(&self) -> usize {
        self.a_n.nrows()
    }

    /// `Ã_n`: the kernel with `γ̃` on the diagonal.
    pub fn with_loops(&self) -> CMatrix {
        let mut m = self.a_n.clone();
        for i in 0..m.nrows() {
            m[(i, i)] = self.gamma_tilde[i];
        }
        m
    }

    pub fn without_loops(&self) -> Self {
        Self {
            a_n: self.a_n.clone(),
            gamma_tilde: CVector::zeros(self.size()),
        }
    }
}

pub fn reduce_by_pattern(a: &AMatrix, gamma: &GammaVector, n: &DetectionPattern) -> Result<ReducedKernel> {
    let d = a.modes();
    if n.modes() != d || gamma.modes() != d {
        return Err(Error::dim(format!(
            "pattern has {} modes, kernel has {d}",
            n.modes()
        )));
    }
    let occ = n.occupied();
    let idx: Vec<usize> = occ.iter().copied().chain(occ.iter().map(|&j| j + d)).collect();
    let m = idx.len();
    let a_n = CMatrix::from_fn(m, m, |r, s| a.entry(idx[r], idx[s]));
    let g = gamma.as_vector();
    let gamma_tilde = CVector::from_fn(m, |r, _| g[idx[r]]);
    Ok(ReducedKernel { a_n, gamma_tilde })
}

/// Evaluation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Enumerate,
    PowerTrace,
    /// Enumeration up to [`AUTO_ENUMERATION_LIMIT`] rows, power trace above.
    #[default]
    Auto,
}

pub const AUTO_ENUMERATION_LIMIT: usize = 10;
/// Largest kernel accepted by the enumerator (bitmask width).
pub const MAX_SIZE: usize = 64;
const SYMMETRY_TOL: f64 = 1e-10;

impl Method {
    fn resolve(self, size: usize) -> Method {
        match self {
            Method::Auto if size <= AUTO_ENUMERATION_LIMIT => Method::Enumerate,
            Method::Auto => Method::PowerTrace,
            m => m,
        }
    }
}

/// Loop-hafnian terms grouped by the number of matched pairs: `terms[p]` is
/// the sum over matchings with exactly `p` pairs and `2N − 2p` loops.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDecomposition {
    pub terms: Vec<Complex64>,
}

impl PairDecomposition {
    pub fn full(&self) -> Complex64 {
        self.truncated(usize::MAX)
    }

    /// Sum over matchings with at most `k` pairs.
    pub fn truncated(&self, k: usize) -> Complex64 {
        self.terms
            .iter()
            .take(k.saturating_add(1))
            .copied()
            .collect::<ComplexSum>()
            .value()
    }
}

fn check_square(m: &CMatrix) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim("hafnian needs a square matrix"));
    }
    if m.nrows() % 2 != 0 {
        return Err(Error::invalid(format!(
            "hafnian needs an even dimension, got {}",
            m.nrows()
        )));
    }
    if m.nrows() > MAX_SIZE {
        return Err(Error::invalid(format!("matrix of size {} is too large", m.nrows())));
    }
    Ok(())
}

fn check_symmetric(m: &CMatrix) -> Result<()> {
    let scale = crate::linalg::max_abs(m).max(1.0);
    let defect = crate::linalg::symmetric_defect(m);
    if defect > SYMMETRY_TOL * scale {
        return Err(Error::invalid(format!("matrix is not symmetric (defect {defect:.3e})")));
    }
    Ok(())
}

/// Hafnian of a symmetric matrix of even size; the diagonal is ignored.
pub fn hafnian(m: &CMatrix) -> Result<Complex64> {
    hafnian_with(m, Method::Auto)
}

pub fn hafnian_with(m: &CMatrix, method: Method) -> Result<Complex64> {
    check_square(m)?;
    check_symmetric(m)?;
    let zero = CVector::zeros(m.nrows());
    let dec = decompose(m, &zero, method, false);
    Ok(dec.terms.last().copied().unwrap_or(ONE))
}

/// Loop hafnian of `Ã_n`: every matching with fixed points, fixed point `i`
/// weighted by `γ̃_i`.
pub fn loop_hafnian(k: &ReducedKernel) -> Result<Complex64> {
    loop_hafnian_with(k, Method::Auto)
}

pub fn loop_hafnian_with(k: &ReducedKernel, method: Method) -> Result<Complex64> {
    Ok(pair_decomposition(k, method)?.full())
}

/// Truncated loop hafnian keeping matchings with at most `k_max` pairs.
pub fn loop_hafnian_korder(k: &ReducedKernel, k_max: usize) -> Result<Complex64> {
    if k_max >= k.photons() {
        return loop_hafnian(k);
    }
    Ok(pair_decomposition(k, Method::Auto)?.truncated(k_max))
}

pub fn pair_decomposition(k: &ReducedKernel, method: Method) -> Result<PairDecomposition> {
    check_square(&k.a_n)?;
    check_symmetric(&k.a_n)?;
    Ok(decompose(&k.a_n, &k.gamma_tilde, method, true))
}

fn decompose(m: &CMatrix, loops: &CVector, method: Method, with_loops: bool) -> PairDecomposition {
    let n = m.nrows();
    if n == 0 {
        return PairDecomposition { terms: vec![ONE] };
    }
    match method.resolve(n) {
        Method::PowerTrace => power_trace(m, loops, with_loops),
        _ => enumerate(m, loops, with_loops).0,
    }
}

/// Number of loop matchings of `2n` vertices with exactly `p` pairs:
/// `C(2n, 2p) (2p − 1)!!`.
pub fn matching_count(vertices: usize, pairs: usize) -> u128 {
    if 2 * pairs > vertices {
        return 0;
    }
    let mut binom: u128 = 1;
    for i in 0..(2 * pairs) {
        binom = binom * (vertices - i) as u128 / (i + 1) as u128;
    }
    let dfact: u128 = (1..=pairs).map(|i| (2 * i - 1) as u128).product();
    binom * dfact
}

struct Enumerator<'a> {
    m: &'a CMatrix,
    loops: &'a CVector,
    with_loops: bool,
    sums: Vec<ComplexSum>,
    counts: Vec<u64>,
}

impl Enumerator<'_> {
    fn walk(&mut self, used: u64, pairs: usize, prod: Complex64) {
        let n = self.m.nrows();
        let free = !used & mask(n);
        if free == 0 {
            self.sums[pairs].add(prod);
            self.counts[pairs] += 1;
            return;
        }
        let i = free.trailing_zeros() as usize;
        let used_i = used | (1 << i);
        if self.with_loops {
            self.walk(used_i, pairs, prod * self.loops[i]);
        }
        let mut rest = free & !(1 << i);
        while rest != 0 {
            let j = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            self.walk(used_i | (1 << j), pairs + 1, prod * self.m[(i, j)]);
        }
    }
}

fn mask(n: usize) -> u64 {
    if n >= 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

/// Reference evaluator. Returns the decomposition and the number of terms
/// visited per pair count.
pub fn enumerate(m: &CMatrix, loops: &CVector, with_loops: bool) -> (PairDecomposition, Vec<u64>) {
    let half = m.nrows() / 2;
    let mut e = Enumerator {
        m,
        loops,
        with_loops,
        sums: vec![ComplexSum::new(); half + 1],
        counts: vec![0; half + 1],
    };
    e.walk(0, 0, ONE);
    let terms = e.sums.iter().map(ComplexSum::value).collect();
    (PairDecomposition { terms }, e.counts)
}

/// Power-trace evaluator. Vertex `i` is paired with `i + N`; for each subset
/// `Z` of those pairs, cycle covers of the induced graph are counted via
/// traces of `(A_Z X)^k`, and paths ending in two loops via
/// `γ_Z X (A_Z X)^{k-1} γ_Zᵀ`. A second variable marks the paths; a cover
/// with `q` paths corresponds to matchings with `N − q` pairs.
fn power_trace(m: &CMatrix, loops: &CVector, with_loops: bool) -> PairDecomposition {
    let n = m.nrows() / 2;
    let subsets: Vec<u64> = (1..(1u64 << n)).collect();
    let per_subset: Vec<Vec<Complex64>> = subsets
        .par_iter()
        .map(|&z| subset_term(m, loops, with_loops, n, z))
        .collect();
    let mut sums = vec![ComplexSum::new(); n + 1];
    for (z, coeffs) in subsets.iter().zip(&per_subset) {
        let sign = if (n - z.count_ones() as usize) % 2 == 0 { 1.0 } else { -1.0 };
        for (q, c) in coeffs.iter().enumerate() {
            sums[n - q].add(c * sign);
        }
    }
    PairDecomposition {
        terms: sums.iter().map(ComplexSum::value).collect(),
    }
}

/// Coefficient of `λ^N` in `exp(Σ_k (P_k + w Q_k) λ^k)` as a polynomial in `w`.
fn subset_term(m: &CMatrix, loops: &CVector, with_loops: bool, n: usize, z: u64) -> Vec<Complex64> {
    let pairs: Vec<usize> = (0..n).filter(|&i| z >> i & 1 == 1).collect();
    let s = pairs.len();
    let idx: Vec<usize> = pairs.iter().copied().chain(pairs.iter().map(|&i| i + n)).collect();
    // AX with X the block swap: (AX)_{ab} = A_{a, partner(b)}.
    let ax = CMatrix::from_fn(2 * s, 2 * s, |a, b| {
        let pb = if b < s { b + s } else { b - s };
        if a == pb {
            ZERO
        } else {
            m[(idx[a], idx[pb])]
        }
    });
    let g = CVector::from_fn(2 * s, |a, _| if with_loops { loops[idx[a]] } else { ZERO });
    // gX: (gX)_b = g_{partner(b)}
    let gx = CVector::from_fn(2 * s, |b, _| {
        let pb = if b < s { b + s } else { b - s };
        g[pb]
    });

    let mut p = vec![ZERO; n + 1];
    let mut q = vec![ZERO; n + 1];
    let mut power = CMatrix::identity(2 * s, 2 * s);
    // row vector gX (AX)^{k-1}
    let mut row = gx.transpose();
    for k in 1..=n {
        let loop_term = (&row * &g)[(0, 0)];
        q[k] = loop_term * 0.5;
        power = &power * &ax;
        p[k] = power.trace() / (2.0 * k as f64);
        row = &row * &ax;
    }

    // f_j(w) polynomials of degree <= j, f_0 = 1.
    let mut f: Vec<Vec<Complex64>> = Vec::with_capacity(n + 1);
    f.push(vec![ONE]);
    for j in 1..=n {
        let mut acc = vec![ComplexSum::new(); j + 1];
        for k in 1..=j {
            let prev = &f[j - k];
            let kk = k as f64;
            for (deg, c) in prev.iter().enumerate() {
                acc[deg].add(c * p[k] * kk);
                acc[deg + 1].add(c * q[k] * kk);
            }
        }
        f.push(acc.iter().map(|s| s.value() / j as f64).collect());
    }
    f.swap_remove(n)
}
