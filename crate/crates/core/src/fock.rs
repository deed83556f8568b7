//! Truncated Fock-space reference for small circuits.
//!
//! States are kept as polynomials in creation operators: the ket
//! `Σ c_n |n⟩` is stored as amplitudes `c_n`, and a passive circuit is
//! applied by substituting `a_i† → Σ_j u_ji b_j†` into
//! `∏ (a_i†)^{n_i} / √(n_i!)`. Loss is handled by a unitary dilation with
//! vacuum ancillas that are traced out at the end.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hafnian::DetectionPattern;
use crate::linalg::{self, c, CMatrix, ONE, ZERO};
use crate::state::{SourceConfig, TransferMatrix};
use crate::sum::NeumaierSum;

/// Occupations are packed eight bits per mode into a `u64`.
pub const MAX_MODES: usize = 8;
const BITS: u32 = 8;
const SLOT: u64 = 0xff;

pub fn pack(occ: &[u32]) -> u64 {
    occ.iter()
        .enumerate()
        .fold(0, |k, (i, &n)| k | (u64::from(n) << (BITS * i as u32)))
}

pub fn unpack(key: u64, modes: usize) -> Vec<u32> {
    (0..modes)
        .map(|i| ((key >> (BITS * i as u32)) & SLOT) as u32)
        .collect()
}

#[inline]
fn slot(key: u64, i: usize) -> u32 {
    ((key >> (BITS * i as u32)) & SLOT) as u32
}

fn key_total(key: u64, modes: usize) -> u32 {
    (0..modes).map(|i| slot(key, i)).sum()
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

fn factorial_product(key: u64, modes: usize) -> f64 {
    (0..modes).map(|i| factorial(slot(key, i))).product()
}

/// Sparse ket over at most [`MAX_MODES`] modes with a total-photon cutoff.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FockVector {
    pub modes: usize,
    pub cutoff: usize,
    pub amplitudes: BTreeMap<u64, Complex64>,
    /// `1 − ‖ψ‖²` of the truncated input expansion.
    pub truncation_loss: f64,
}

impl FockVector {
    pub fn vacuum(modes: usize, cutoff: usize) -> Self {
        Self::basis(&vec![0; modes], cutoff)
    }

    pub fn basis(occ: &[u32], cutoff: usize) -> Self {
        let mut amplitudes = BTreeMap::new();
        amplitudes.insert(pack(occ), ONE);
        Self {
            modes: occ.len(),
            cutoff,
            amplitudes,
            truncation_loss: 0.0,
        }
    }

    pub fn amplitude(&self, occ: &[u32]) -> Complex64 {
        self.amplitudes.get(&pack(occ)).copied().unwrap_or(ZERO)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.values().map(|z| z.norm_sqr()).collect::<NeumaierSum>().value()
    }

    /// Tensor product truncated to the larger of the two cutoffs.
    pub fn tensor(&self, other: &FockVector) -> Result<FockVector> {
        let modes = self.modes + other.modes;
        if modes > MAX_MODES {
            return Err(Error::invalid(format!("Fock oracle supports at most {MAX_MODES} modes")));
        }
        let cutoff = self.cutoff.max(other.cutoff);
        let mut amplitudes = BTreeMap::new();
        for (&ka, &va) in &self.amplitudes {
            let na = key_total(ka, self.modes);
            for (&kb, &vb) in &other.amplitudes {
                if (na + key_total(kb, other.modes)) as usize <= cutoff {
                    amplitudes.insert(ka | (kb << (BITS * self.modes as u32)), va * vb);
                }
            }
        }
        let mut out = FockVector {
            modes,
            cutoff,
            amplitudes,
            truncation_loss: 0.0,
        };
        out.truncation_loss = (1.0 - out.norm_sqr()).max(0.0);
        Ok(out)
    }
}

/// `Σ_n tanhⁿr / cosh r |n, n⟩` up to `2n ≤ cutoff`.
pub fn two_mode_squeezed(r: f64, cutoff: usize) -> FockVector {
    let mut amplitudes = BTreeMap::new();
    let (t, ch) = (r.tanh(), r.cosh());
    for n in 0..=(cutoff / 2) as u32 {
        amplitudes.insert(pack(&[n, n]), c(t.powi(n as i32) / ch, 0.0));
    }
    let mut v = FockVector {
        modes: 2,
        cutoff,
        amplitudes,
        truncation_loss: 0.0,
    };
    v.truncation_loss = (1.0 - v.norm_sqr()).max(0.0);
    v
}

/// `e^{−|α|²/2} Σ αⁿ/√n! |n⟩` up to `n ≤ cutoff`.
pub fn coherent(alpha: Complex64, cutoff: usize) -> FockVector {
    let mut amplitudes = BTreeMap::new();
    let pre = (-alpha.norm_sqr() / 2.0).exp();
    let mut term = c(pre, 0.0);
    for n in 0..=cutoff as u32 {
        if n > 0 {
            term = term * alpha / f64::from(n).sqrt();
        }
        amplitudes.insert(pack(&[n]), term);
    }
    let mut v = FockVector {
        modes: 1,
        cutoff,
        amplitudes,
        truncation_loss: 0.0,
    };
    v.truncation_loss = (1.0 - v.norm_sqr()).max(0.0);
    v
}

/// Input ket on `total_modes` modes for a source configuration.
pub fn expand_inputs(config: &SourceConfig, total_modes: usize, cutoff: usize) -> Result<FockVector> {
    config.validate(total_modes)?;
    if total_modes > MAX_MODES {
        return Err(Error::invalid(format!("Fock oracle supports at most {MAX_MODES} modes")));
    }
    // Build in a scratch order (squeezer pair, coherent, rest) and relabel.
    let mut order: Vec<usize> = Vec::new();
    let mut psi = FockVector::vacuum(0, cutoff);
    if let Some([p, q]) = config.squeezer_ports {
        psi = psi.tensor(&two_mode_squeezed(config.r, cutoff))?;
        order.extend([p, q]);
    }
    if let Some(p) = config.coherent_port {
        psi = psi.tensor(&coherent(config.alpha(), cutoff))?;
        order.push(p);
    }
    let rest: Vec<usize> = (0..total_modes).filter(|m| !order.contains(m)).collect();
    psi = psi.tensor(&FockVector::vacuum(rest.len(), cutoff))?;
    order.extend(rest);
    let loss = psi.truncation_loss;
    let mut amplitudes = BTreeMap::new();
    for (&k, &v) in &psi.amplitudes {
        let scratch = unpack(k, total_modes);
        let mut occ = vec![0; total_modes];
        for (s, &m) in order.iter().enumerate() {
            occ[m] = scratch[s];
        }
        amplitudes.insert(pack(&occ), v);
    }
    Ok(FockVector {
        modes: total_modes,
        cutoff,
        amplitudes,
        truncation_loss: loss,
    })
}

/// Polynomial in output creation operators, keyed by packed exponents.
type Poly = BTreeMap<u64, Complex64>;

fn poly_mul(a: &Poly, b: &Poly, keep: &dyn Fn(u64) -> bool) -> Poly {
    let mut out = Poly::new();
    for (&ka, &va) in a {
        for (&kb, &vb) in b {
            // Slots never overflow: exponents are bounded by the cutoff.
            let k = ka + kb;
            if keep(k) {
                *out.entry(k).or_insert(ZERO) += va * vb;
            }
        }
    }
    out
}

/// Powers `L^0 .. L^max` of the linear form `L = Σ_j row_j b_j†`.
fn linear_powers(row: &[Complex64], max: usize, keep: &dyn Fn(u64) -> bool) -> Vec<Poly> {
    let mut lin = Poly::new();
    for (j, &u) in row.iter().enumerate() {
        if u != ZERO {
            lin.insert(1u64 << (BITS * j as u32), u);
        }
    }
    let mut pows = vec![Poly::from([(0u64, ONE)])];
    for k in 1..=max {
        let next = poly_mul(&pows[k - 1], &lin, keep);
        pows.push(next);
    }
    pows
}

/// Substitutes `a_i† → Σ_j rows[i][j] b_j†` for every input ket, grouping
/// kets that share leading exponents so partial products are reused.
fn substitute(psi: &FockVector, rows: &[Vec<Complex64>], out_modes: usize, keep: &dyn Fn(u64) -> bool) -> Poly {
    let m = psi.modes;
    let max_exp: Vec<usize> = (0..m)
        .map(|i| psi.amplitudes.keys().map(|&k| slot(k, i) as usize).max().unwrap_or(0))
        .collect();
    let powers: Vec<Vec<Poly>> = (0..m).map(|i| linear_powers(&rows[i], max_exp[i], keep)).collect();
    // Polynomial coefficient of each input ket: c_n / √(∏ n_i!).
    let kets: Vec<(Vec<u32>, Complex64)> = psi
        .amplitudes
        .iter()
        .map(|(&k, &v)| (unpack(k, m), v / factorial_product(k, m).sqrt()))
        .collect();
    let mut out = Poly::new();
    let start = Poly::from([(0u64, ONE)]);
    expand(&kets, 0, &start, &powers, keep, &mut out);
    debug_assert!(out_modes <= MAX_MODES);
    out
}

fn expand(kets: &[(Vec<u32>, Complex64)], mode: usize, acc: &Poly, powers: &[Vec<Poly>], keep: &dyn Fn(u64) -> bool, out: &mut Poly) {
    if acc.is_empty() || kets.is_empty() {
        return;
    }
    if mode == powers.len() {
        for (_, coeff) in kets {
            for (&k, &v) in acc {
                *out.entry(k).or_insert(ZERO) += v * coeff;
            }
        }
        return;
    }
    // kets are sorted by packed key, i.e. not by this mode; group explicitly.
    let mut groups: BTreeMap<u32, Vec<(Vec<u32>, Complex64)>> = BTreeMap::new();
    for ket in kets {
        groups.entry(ket.0[mode]).or_default().push(ket.clone());
    }
    for (e, group) in groups {
        let next = poly_mul(acc, &powers[mode][e as usize], keep);
        expand(&group, mode + 1, &next, powers, keep, out);
    }
}

/// Applies a passive unitary in mode-map form (`b = u a`), i.e.
/// `a_i† → Σ_j u_ji b_j†`.
pub fn apply_interferometer(psi: &FockVector, u: &CMatrix) -> Result<FockVector> {
    let n = u.nrows();
    if u.ncols() != psi.modes || n > MAX_MODES {
        return Err(Error::dim("unitary does not match the ket's modes"));
    }
    let rows: Vec<Vec<Complex64>> = (0..psi.modes).map(|i| (0..n).map(|j| u[(j, i)]).collect()).collect();
    let poly = substitute(psi, &rows, n, &|_| true);
    let amplitudes = poly
        .into_iter()
        .map(|(k, v)| (k, v * factorial_product(k, n).sqrt()))
        .collect();
    Ok(FockVector {
        modes: n,
        cutoff: psi.cutoff,
        amplitudes,
        truncation_loss: psi.truncation_loss,
    })
}

/// Unitary `V` of size `2n`, `n = max(inputs, outputs)`, whose top-left block
/// is the (zero-padded) transfer matrix `T`. Uses
/// `[[T, √(I − TT†)], [−P√(I − T†T), P T†]]` with `P` the unitary polar factor
/// of `T`, so a unitary `T` gives `T ⊕ I` and `√η I` gives beam splitters.
pub fn dilate_lossy(t: &TransferMatrix) -> CMatrix {
    let n = t.inputs().max(t.outputs());
    let mut sq = CMatrix::zeros(n, n);
    sq.view_mut((0, 0), t.matrix().shape()).copy_from(t.matrix());
    let id = CMatrix::identity(n, n);
    let top_right = linalg::psd_sqrt(&(&id - &sq * sq.adjoint()));
    let bottom = linalg::psd_sqrt(&(&id - sq.adjoint() * &sq));
    let svd = sq.clone().svd(true, true);
    let polar = svd.u.expect("u") * svd.v_t.expect("v_t");
    let mut v = CMatrix::zeros(2 * n, 2 * n);
    v.view_mut((0, 0), (n, n)).copy_from(&sq);
    v.view_mut((0, n), (n, n)).copy_from(&top_right);
    v.view_mut((n, 0), (n, n)).copy_from(&(-(&polar * bottom)));
    v.view_mut((n, n), (n, n)).copy_from(&(&polar * sq.adjoint()));
    v
}

/// Outcome of an oracle evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleResult {
    pub probability: f64,
    /// Upper bound on `true − probability` (the result is a lower bound).
    pub truncation_loss: f64,
    pub cutoff: usize,
}

pub const DEFAULT_TOLERANCE: f64 = 1e-6;

/// Probability of `pattern` on the detected outputs with every ancilla
/// marginalised. With `cutoff = None` the default `N + 3` is tried first and
/// doubled once if the truncation loss exceeds `tolerance`.
pub fn oracle_probability(
    config: &SourceConfig,
    t: &TransferMatrix,
    pattern: &DetectionPattern,
    cutoff: Option<usize>,
    tolerance: f64,
) -> Result<OracleResult> {
    let d = t.outputs();
    if pattern.modes() != d {
        return Err(Error::dim(format!("pattern has {} modes, circuit has {d} outputs", pattern.modes())));
    }
    let n = t.inputs().max(d);
    if 2 * n > MAX_MODES {
        return Err(Error::invalid(format!(
            "Fock oracle handles at most {} inputs/outputs",
            MAX_MODES / 2
        )));
    }
    let tries: Vec<usize> = match cutoff {
        Some(c) => vec![c],
        None => {
            let base = pattern.total() + 3;
            vec![base, 2 * base]
        }
    };
    let v = dilate_lossy(t);
    let mut last = None;
    for cut in tries {
        let psi = expand_inputs(config, t.inputs(), cut)?;
        let result = project(&psi, &v, d, pattern, cut);
        if psi.truncation_loss <= tolerance {
            return Ok(result);
        }
        last = Some(result);
    }
    let r = last.expect("at least one cutoff tried");
    Err(Error::Truncation {
        loss: r.truncation_loss,
        tolerance,
        cutoff: r.cutoff,
    })
}

fn project(psi: &FockVector, v: &CMatrix, d: usize, pattern: &DetectionPattern, cutoff: usize) -> OracleResult {
    let out_modes = v.nrows();
    let target = pattern.counts().to_vec();
    let keep = |k: u64| (0..d).all(|j| slot(k, j) <= target[j]);
    // V is in transfer form: a_i† → Σ_j V_ij b_j†.
    let rows: Vec<Vec<Complex64>> = (0..psi.modes).map(|i| (0..out_modes).map(|j| v[(i, j)]).collect()).collect();
    let poly = substitute(psi, &rows, out_modes, &keep);
    let prob: f64 = poly
        .iter()
        .filter(|(&k, _)| (0..d).all(|j| slot(k, j) == target[j]))
        .map(|(&k, z)| z.norm_sqr() * factorial_product(k, out_modes))
        .collect::<NeumaierSum>()
        .value();
    OracleResult {
        probability: prob,
        truncation_loss: psi.truncation_loss,
        cutoff,
    }
}

/// [`oracle_probability`] for many patterns at one cutoff: the input state is
/// expanded and pushed through the circuit once.
pub fn oracle_probabilities(
    config: &SourceConfig,
    t: &TransferMatrix,
    patterns: &[DetectionPattern],
    cutoff: usize,
    tolerance: f64,
) -> Result<Vec<OracleResult>> {
    let d = t.outputs();
    if let Some(p) = patterns.iter().find(|p| p.modes() != d) {
        return Err(Error::dim(format!("pattern has {} modes, circuit has {d} outputs", p.modes())));
    }
    if 2 * t.inputs().max(d) > MAX_MODES {
        return Err(Error::invalid(format!(
            "Fock oracle handles at most {} inputs/outputs",
            MAX_MODES / 2
        )));
    }
    let psi = expand_inputs(config, t.inputs(), cutoff)?;
    if psi.truncation_loss > tolerance {
        return Err(Error::Truncation {
            loss: psi.truncation_loss,
            tolerance,
            cutoff,
        });
    }
    let v = dilate_lossy(t);
    let out_modes = v.nrows();
    let max_total = patterns.iter().map(|p| p.total() as u32).max().unwrap_or(0);
    let keep = |k: u64| (0..d).map(|j| slot(k, j)).sum::<u32>() <= max_total;
    let rows: Vec<Vec<Complex64>> = (0..psi.modes).map(|i| (0..out_modes).map(|j| v[(i, j)]).collect()).collect();
    let poly = substitute(&psi, &rows, out_modes, &keep);
    // Detected part of each key, i.e. the ancilla slots cleared.
    let detected_mask: u64 = (0..d).map(|j| SLOT << (BITS * j as u32)).fold(0, |a, b| a | b);
    let mut marginal: BTreeMap<u64, NeumaierSum> = BTreeMap::new();
    for (&k, z) in &poly {
        marginal
            .entry(k & detected_mask)
            .or_default()
            .add(z.norm_sqr() * factorial_product(k, out_modes));
    }
    Ok(patterns
        .iter()
        .map(|p| OracleResult {
            probability: marginal.get(&pack(p.counts())).map_or(0.0, |s| s.value()),
            truncation_loss: psi.truncation_loss,
            cutoff,
        })
        .collect())
}

/// Smallest total-photon cutoff whose input truncation loss is at most `target`.
pub fn cutoff_for_loss(config: &SourceConfig, total_modes: usize, target: f64, max_cutoff: usize) -> Result<usize> {
    for cut in 0..=max_cutoff {
        if expand_inputs(config, total_modes, cut)?.truncation_loss <= target {
            return Ok(cut);
        }
    }
    Err(Error::Truncation {
        loss: expand_inputs(config, total_modes, max_cutoff)?.truncation_loss,
        tolerance: target,
        cutoff: max_cutoff,
    })
}
