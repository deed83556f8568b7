//! Multimode Gaussian states in the doubled annihilation/creation ordering.
//!
//! The operator vector is `(a_1 .. a_d, a_1† .. a_d†)`. With that ordering
//! the covariance matrix is
//!
//! ```text
//! Σ_jk = ½⟨a_j a_k† + a_k† a_j⟩ − δ_j δ_k*,     δ_j = ⟨a_j⟩
//! ```
//!
//! so the vacuum has `Σ = I/2` and `Σ_Q = Σ + I/2 = I`. Every state carries a
//! Cholesky factorisation of `Σ_Q`, built once at construction; all derived
//! quantities (`A`, `γ`, `p_vac`) reuse it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use num_complex::Complex64;

use crate::linalg::{self, c, cis, CMatrix, CVector, HermitianFactor, ZERO};

/// Entrywise tolerance for the block-structure invariants.
pub const STRUCTURE_TOL: f64 = 1e-10;
/// Slack allowed on the largest singular value of a transfer matrix.
pub const SUBUNITARY_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct GaussianState {
    d: usize,
    sigma: CMatrix,
    delta: CVector,
    factor: HermitianFactor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawState {
    d: usize,
    #[serde(with = "crate::io::matrix")]
    sigma: CMatrix,
    #[serde(with = "crate::io::vector")]
    delta: CVector,
}

impl Serialize for GaussianState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RawState {
            d: self.d,
            sigma: self.sigma.clone(),
            delta: self.delta.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GaussianState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawState::deserialize(d)?;
        if raw.sigma.nrows() != 2 * raw.d {
            return Err(serde::de::Error::custom(format!(
                "sigma must be {0}x{0} for d = {1}",
                2 * raw.d,
                raw.d
            )));
        }
        GaussianState::new(raw.sigma, raw.delta).map_err(serde::de::Error::custom)
    }
}

fn scale_tol(m: &CMatrix) -> f64 {
    STRUCTURE_TOL * linalg::max_abs(m).max(1.0)
}

impl GaussianState {
    /// Validates the block structure of `sigma`, the conjugate-pair structure
    /// of `delta`, and positive definiteness of `Σ_Q`.
    pub fn new(sigma: CMatrix, delta: CVector) -> Result<Self> {
        let n = sigma.nrows();
        if n % 2 != 0 || sigma.ncols() != n {
            return Err(Error::dim(format!(
                "covariance must be square with even size, got {}x{}",
                n,
                sigma.ncols()
            )));
        }
        if delta.len() != n {
            return Err(Error::dim(format!(
                "displacement has length {}, expected {n}",
                delta.len()
            )));
        }
        let d = n / 2;
        let tol = scale_tol(&sigma);
        for j in 0..d {
            for k in 0..d {
                let g = sigma[(j, k)];
                let m = sigma[(j, k + d)];
                if (sigma[(j + d, k + d)] - g.conj()).norm() > tol
                    || (sigma[(j + d, k)] - m.conj()).norm() > tol
                    || (g - sigma[(k, j)].conj()).norm() > tol
                    || (m - sigma[(k, j + d)]).norm() > tol
                {
                    return Err(Error::unphysical(format!(
                        "covariance block structure violated at ({j}, {k})"
                    )));
                }
            }
        }
        let dtol = STRUCTURE_TOL * delta.iter().fold(1.0f64, |a, z| a.max(z.norm()));
        for j in 0..d {
            if (delta[j + d] - delta[j].conj()).norm() > dtol {
                return Err(Error::unphysical(format!(
                    "displacement entry {} is not the conjugate of entry {j}",
                    j + d
                )));
            }
        }
        let sigma = linalg::hermitian_part(&sigma);
        let mut delta = delta;
        for j in 0..d {
            delta[j + d] = delta[j].conj();
        }
        let q = &sigma + CMatrix::identity(n, n).scale(0.5);
        let factor = HermitianFactor::new(&q, "Σ_Q", scale_tol(&q))?;
        Ok(Self {
            d,
            sigma,
            delta,
            factor,
        })
    }

    pub fn vacuum(d: usize) -> Self {
        Self::new(
            CMatrix::identity(2 * d, 2 * d).scale(0.5),
            CVector::zeros(2 * d),
        )
        .expect("vacuum is physical")
    }

    /// Builds a state from the normal-ordered moments `N_jk = ⟨a_k† a_j⟩`,
    /// `M_jk = ⟨a_j a_k⟩` (both connected, i.e. with the mean removed) and
    /// the mode amplitudes.
    pub fn from_moments(n: &CMatrix, m: &CMatrix, alpha: &[Complex64]) -> Result<Self> {
        let d = alpha.len();
        if n.shape() != (d, d) || m.shape() != (d, d) {
            return Err(Error::dim("moment matrices must be d x d"));
        }
        let mut sigma = CMatrix::zeros(2 * d, 2 * d);
        for j in 0..d {
            for k in 0..d {
                let g = n[(j, k)] + if j == k { c(0.5, 0.0) } else { ZERO };
                sigma[(j, k)] = g;
                sigma[(j + d, k + d)] = g.conj();
                sigma[(j, k + d)] = m[(j, k)];
                sigma[(j + d, k)] = m[(j, k)].conj();
            }
        }
        Self::new(sigma, doubled(alpha))
    }

    /// Coherent states with amplitudes `alpha` on each mode.
    pub fn coherent(alpha: &[Complex64]) -> Self {
        let d = alpha.len();
        Self::new(CMatrix::identity(2 * d, 2 * d).scale(0.5), doubled(alpha))
            .expect("coherent state is physical")
    }

    /// Single-mode squeezed vacuum with real squeezing `r`.
    pub fn squeezed_vacuum(r: f64) -> Self {
        let n = CMatrix::from_element(1, 1, c(r.sinh().powi(2), 0.0));
        let m = CMatrix::from_element(1, 1, c(r.sinh() * r.cosh(), 0.0));
        Self::from_moments(&n, &m, &[ZERO]).expect("squeezed vacuum is physical")
    }

    /// Independent thermal modes with the given mean occupations.
    pub fn thermal(occupations: &[f64]) -> Result<Self> {
        if occupations.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::invalid("thermal occupations must be >= 0"));
        }
        let d = occupations.len();
        let n = CMatrix::from_fn(d, d, |i, j| if i == j { c(occupations[i], 0.0) } else { ZERO });
        Self::from_moments(&n, &CMatrix::zeros(d, d), &vec![ZERO; d])
    }

    pub fn modes(&self) -> usize {
        self.d
    }

    pub fn sigma(&self) -> &CMatrix {
        &self.sigma
    }

    pub fn delta(&self) -> &CVector {
        &self.delta
    }

    /// Mode amplitudes `⟨a_j⟩`.
    pub fn amplitudes(&self) -> Vec<Complex64> {
        self.delta.iter().take(self.d).copied().collect()
    }

    /// `Γ` block (top-left `d x d` of Σ).
    pub fn gamma_block(&self) -> CMatrix {
        self.sigma.view((0, 0), (self.d, self.d)).into_owned()
    }

    /// `M` block (top-right `d x d` of Σ).
    pub fn m_block(&self) -> CMatrix {
        self.sigma.view((0, self.d), (self.d, self.d)).into_owned()
    }

    /// Normal-ordered excess `Γ − I/2`; zero for any coherent state.
    pub fn excess_gamma(&self) -> CMatrix {
        self.gamma_block() - CMatrix::identity(self.d, self.d).scale(0.5)
    }

    pub fn mean_photon_numbers(&self) -> Vec<f64> {
        (0..self.d)
            .map(|j| self.sigma[(j, j)].re - 0.5 + self.delta[j].norm_sqr())
            .collect()
    }

    pub fn total_mean_photons(&self) -> f64 {
        crate::sum::sum_f64(self.mean_photon_numbers())
    }

    /// Quadrature variances `2(Γ_jj ± |M_jj|)` of mode `j` along its principal
    /// axes, in units where the vacuum has variance 1.
    pub fn quadrature_variances(&self, j: usize) -> (f64, f64) {
        let g = self.sigma[(j, j)].re;
        let m = self.sigma[(j, j + self.d)].norm();
        (2.0 * (g + m), 2.0 * (g - m))
    }

    /// `Σ_Q = Σ + I/2`.
    pub fn q_covariance(&self) -> CMatrix {
        let n = 2 * self.d;
        &self.sigma + CMatrix::identity(n, n).scale(0.5)
    }

    pub fn q_covariance_inverse(&self) -> CMatrix {
        self.factor.inverse()
    }

    pub fn q_condition(&self) -> f64 {
        self.factor.condition()
    }

    /// Smallest eigenvalue of `Σ + Z/2`, `Z = diag(I, −I)`. Non-negative
    /// (up to round-off) exactly when the covariance obeys the uncertainty
    /// principle.
    pub fn uncertainty_margin(&self) -> f64 {
        let mut m = self.sigma.clone();
        for j in 0..self.d {
            m[(j, j)] += c(0.5, 0.0);
            m[(j + self.d, j + self.d)] -= c(0.5, 0.0);
        }
        linalg::hermitian_eigenvalues(&m)[0]
    }

    pub fn is_physical(&self, tol: f64) -> bool {
        self.uncertainty_margin() >= -tol
    }

    /// Smallest eigenvalue of `Σ_Q`; at least 1 for states with a
    /// non-negative Glauber P function.
    pub fn q_min_eigenvalue(&self) -> f64 {
        self.factor.min_eigenvalue()
    }

    pub fn a_matrix(&self) -> AMatrix {
        let n = 2 * self.d;
        let inv = self.factor.inverse();
        let a = linalg::swap_rows(&(CMatrix::identity(n, n) - inv));
        AMatrix::from_full_unchecked(&a)
    }

    pub fn gamma_vector(&self) -> GammaVector {
        let inv = self.factor.inverse();
        let n = 2 * self.d;
        let g = CVector::from_fn(n, |j, _| {
            crate::sum::sum_complex((0..n).map(|k| self.delta[k].conj() * inv[(k, j)]))
        });
        GammaVector::from_vector_unchecked(g)
    }

    /// `ln p_vac = −½ δ†Σ_Q⁻¹δ − ½ ln det Σ_Q`.
    pub fn ln_vacuum_probability(&self) -> f64 {
        let x = self.factor.solve(&self.delta);
        let quad = self.delta.dotc(&x).re;
        -0.5 * quad - 0.5 * self.factor.ln_det()
    }

    pub fn vacuum_probability(&self) -> f64 {
        self.ln_vacuum_probability().exp()
    }

    /// The state with the same covariance whose displacement response `γ`
    /// is rotated by the coherent phase `phi`: `γ_j → e^{iφ}γ_j` on the
    /// annihilation half. This is how a scan of the injected coherent phase
    /// acts on the output kernel.
    pub fn with_displacement_phase(&self, phi: f64) -> Self {
        let gamma = self.gamma_vector().rotated(phi);
        let q = self.q_covariance();
        let n = 2 * self.d;
        let delta = CVector::from_fn(n, |j, _| {
            crate::sum::sum_complex((0..n).map(|k| gamma.as_vector()[k] * q[(k, j)])).conj()
        });
        Self {
            d: self.d,
            sigma: self.sigma.clone(),
            delta,
            factor: self.factor.clone(),
        }
    }

    /// Drops the displacement.
    pub fn without_displacement(&self) -> Self {
        Self {
            d: self.d,
            sigma: self.sigma.clone(),
            delta: CVector::zeros(2 * self.d),
            factor: self.factor.clone(),
        }
    }

    /// Applies a `d x d` passive unitary (or sub-unitary) mode map `w`
    /// (`a_out = w a_in`).
    pub fn apply_mode_map(&self, w: &CMatrix) -> Result<Self> {
        if w.ncols() != self.d {
            return Err(Error::dim(format!(
                "mode map has {} columns, state has {} modes",
                w.ncols(),
                self.d
            )));
        }
        let out = w.nrows();
        let mut s = CMatrix::zeros(2 * out, 2 * self.d);
        for i in 0..out {
            for j in 0..self.d {
                s[(i, j)] = w[(i, j)];
                s[(i + out, j + self.d)] = w[(i, j)].conj();
            }
        }
        let ssd = &s * s.adjoint();
        let noise = (CMatrix::identity(2 * out, 2 * out) - ssd).scale(0.5);
        let sigma = &s * &self.sigma * s.adjoint() + noise;
        let delta = &s * &self.delta;
        Self::new(sigma, delta)
    }
}

fn doubled(alpha: &[Complex64]) -> CVector {
    let d = alpha.len();
    CVector::from_fn(2 * d, |i, _| if i < d { alpha[i] } else { alpha[i - d].conj() })
}

/// Amplitudes `T_ij` for a photon entering input `i` to leave through output `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransferRaw", into = "TransferRaw")]
pub struct TransferMatrix {
    t: CMatrix,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransferRaw {
    #[serde(with = "crate::io::matrix")]
    t: CMatrix,
}

impl TryFrom<TransferRaw> for TransferMatrix {
    type Error = Error;
    fn try_from(raw: TransferRaw) -> Result<Self> {
        TransferMatrix::new(raw.t)
    }
}

impl From<TransferMatrix> for TransferRaw {
    fn from(t: TransferMatrix) -> Self {
        TransferRaw { t: t.t }
    }
}

impl TransferMatrix {
    /// `t` is `m x d` (inputs by outputs); its largest singular value must not
    /// exceed one.
    pub fn new(t: CMatrix) -> Result<Self> {
        let norm = linalg::spectral_norm(&t);
        if norm > 1.0 + SUBUNITARY_TOL {
            return Err(Error::unphysical(format!(
                "transfer matrix is not sub-unitary (largest singular value {norm:.15})"
            )));
        }
        Ok(Self { t })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            t: CMatrix::identity(d, d),
        }
    }

    /// Uniform loss `√η · I`.
    pub fn uniform_loss(d: usize, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("efficiency {eta} outside [0, 1]")));
        }
        Ok(Self {
            t: CMatrix::identity(d, d).scale(eta.sqrt()),
        })
    }

    /// From moduli `|T_ij|` and phases `θ_ij`.
    pub fn from_polar(modulus: &[Vec<f64>], phase: &[Vec<f64>]) -> Result<Self> {
        let m = modulus.len();
        let d = modulus.first().map_or(0, Vec::len);
        if phase.len() != m || modulus.iter().chain(phase).any(|r| r.len() != d) {
            return Err(Error::dim("modulus and phase tables must share one shape"));
        }
        Self::new(CMatrix::from_fn(m, d, |i, j| {
            Complex64::from_polar(modulus[i][j], phase[i][j])
        }))
    }

    pub fn inputs(&self) -> usize {
        self.t.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.t.ncols()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.t
    }

    /// Mode map `W = Tᵀ` acting on amplitude vectors: `a_out = W a_in`.
    pub fn mode_matrix(&self) -> CMatrix {
        self.t.transpose()
    }

    pub fn largest_singular_value(&self) -> f64 {
        linalg::spectral_norm(&self.t)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.t.scale(factor))
    }

    /// Adds zero rows so that the matrix accepts `inputs` input modes.
    pub fn padded(&self, inputs: usize) -> Result<Self> {
        if inputs < self.inputs() {
            return Err(Error::dim("cannot pad to fewer inputs"));
        }
        let mut t = CMatrix::zeros(inputs, self.outputs());
        t.view_mut((0, 0), self.t.shape()).copy_from(&self.t);
        Ok(Self { t })
    }
}

/// Efficiencies of the stages between source and detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Efficiencies {
    /// Fibre coupling.
    pub coupling: f64,
    /// Grating coupler, traversed twice.
    pub grating: f64,
    /// On-chip propagation.
    pub propagation: f64,
    pub detection: f64,
}

impl Default for Efficiencies {
    fn default() -> Self {
        Self {
            coupling: 1.0,
            grating: 1.0,
            propagation: 1.0,
            detection: 1.0,
        }
    }
}

impl Efficiencies {
    /// Single lumped efficiency.
    pub fn lumped(eta: f64) -> Self {
        Self {
            coupling: eta,
            ..Self::default()
        }
    }

    /// `η_tot = η_c η_g² η_p η_d`.
    pub fn total(&self) -> f64 {
        self.coupling * self.grating * self.grating * self.propagation * self.detection
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("coupling", self.coupling),
            ("grating", self.grating),
            ("propagation", self.propagation),
            ("detection", self.detection),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("efficiency `{name}` = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Whether a measured squeezer photon number counts one mode of the pair or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhotonNumberConvention {
    #[default]
    PerMode,
    Total,
}

/// A two-mode squeezer and a coherent beam feeding the interferometer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    /// Two-mode squeezing parameter.
    pub r: f64,
    /// Coherent amplitude `|α|` at the interferometer input.
    pub alpha_mag: f64,
    /// Coherent phase relative to the squeezer.
    #[serde(default)]
    pub phi: f64,
    /// Input ports of the two squeezed modes; `None` disables the squeezer.
    pub squeezer_ports: Option<[usize; 2]>,
    /// Input port of the coherent beam; `None` blocks it.
    pub coherent_port: Option<usize>,
    #[serde(default)]
    pub efficiencies: Efficiencies,
}

impl SourceConfig {
    /// Infers `r` and `|α|` from detected squeezer photons per pulse and the
    /// coherent intensity: `r = arcsinh(√(⟨n_PDC⟩/η_tot))`, `|α|² = ⟨n_α⟩`.
    pub fn from_photon_numbers(
        n_pdc: f64,
        n_alpha: f64,
        efficiencies: Efficiencies,
        convention: PhotonNumberConvention,
    ) -> Result<Self> {
        efficiencies.validate()?;
        let eta = efficiencies.total();
        if eta <= 0.0 {
            return Err(Error::Config("total efficiency must be positive".into()));
        }
        if n_pdc < 0.0 || n_alpha < 0.0 {
            return Err(Error::Config("photon numbers must be >= 0".into()));
        }
        let per_mode = match convention {
            PhotonNumberConvention::PerMode => n_pdc,
            PhotonNumberConvention::Total => n_pdc / 2.0,
        };
        Ok(Self {
            r: (per_mode / eta).sqrt().asinh(),
            alpha_mag: n_alpha.sqrt(),
            phi: 0.0,
            squeezer_ports: Some([0, 1]),
            coherent_port: Some(2),
            efficiencies,
        })
    }

    pub fn eta_tot(&self) -> f64 {
        self.efficiencies.total()
    }

    /// Detected squeezer photons per pulse and mode, `η_tot sinh² r`.
    pub fn n_pdc(&self) -> f64 {
        self.eta_tot() * self.r.sinh().powi(2)
    }

    /// `⟨n_α⟩ = |α|²`.
    pub fn n_alpha(&self) -> f64 {
        self.alpha_mag * self.alpha_mag
    }

    pub fn alpha(&self) -> Complex64 {
        Complex64::from_polar(self.alpha_mag, self.phi)
    }

    pub fn with_phi(&self, phi: f64) -> Self {
        Self { phi, ..self.clone() }
    }

    pub fn with_alpha_mag(&self, alpha_mag: f64) -> Self {
        Self {
            alpha_mag,
            ..self.clone()
        }
    }

    pub fn with_coherent_port(&self, port: Option<usize>) -> Self {
        Self {
            coherent_port: port,
            ..self.clone()
        }
    }

    pub fn validate(&self, total_modes: usize) -> Result<()> {
        self.efficiencies.validate()?;
        if !(self.r >= 0.0) || !self.r.is_finite() {
            return Err(Error::Config(format!("squeezing r = {} must be >= 0", self.r)));
        }
        if !(self.alpha_mag >= 0.0) || !self.alpha_mag.is_finite() {
            return Err(Error::Config(format!(
                "alpha_mag = {} must be >= 0",
                self.alpha_mag
            )));
        }
        let mut ports: Vec<usize> = Vec::new();
        if let Some(p) = self.squeezer_ports {
            ports.extend(p);
        }
        if let Some(p) = self.coherent_port {
            ports.push(p);
        }
        if let Some(&p) = ports.iter().find(|&&p| p >= total_modes) {
            return Err(Error::Config(format!(
                "port {p} out of range for {total_modes} modes"
            )));
        }
        let mut sorted = ports.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != ports.len() {
            return Err(Error::Config(format!("overlapping port assignment {ports:?}")));
        }
        Ok(())
    }
}

/// Pre-interferometer state: two-mode squeezed vacuum on the squeezer ports,
/// `α e^{iφ}` on the coherent port, vacuum elsewhere.
pub fn build_input_state(config: &SourceConfig, total_modes: usize) -> Result<GaussianState> {
    config.validate(total_modes)?;
    let d = total_modes;
    let mut n = CMatrix::zeros(d, d);
    let mut m = CMatrix::zeros(d, d);
    if let Some([p, q]) = config.squeezer_ports {
        let (sh, ch) = (config.r.sinh(), config.r.cosh());
        n[(p, p)] = c(sh * sh, 0.0);
        n[(q, q)] = c(sh * sh, 0.0);
        m[(p, q)] = c(sh * ch, 0.0);
        m[(q, p)] = c(sh * ch, 0.0);
    }
    let mut alpha = vec![ZERO; d];
    if let Some(p) = config.coherent_port {
        alpha[p] = config.alpha();
    }
    GaussianState::from_moments(&n, &m, &alpha)
}

/// Output state `Σ' = SΣS† + (I − SS†)/2`, `δ' = Sδ` with `S = W ⊕ W*` and
/// `W = Tᵀ`. The state must live on the transfer matrix's input modes.
pub fn propagate(state: &GaussianState, t: &TransferMatrix) -> Result<GaussianState> {
    if state.modes() != t.inputs() {
        return Err(Error::dim(format!(
            "state has {} modes but the transfer matrix has {} inputs",
            state.modes(),
            t.inputs()
        )));
    }
    state.apply_mode_map(&t.mode_matrix())
}

/// Kernel matrix `A = X (I − Σ_Q⁻¹) = [[B, C], [Cᵀ, B*]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AMatrix {
    #[serde(with = "crate::io::matrix")]
    b: CMatrix,
    #[serde(with = "crate::io::matrix")]
    c: CMatrix,
}

impl AMatrix {
    /// Builds `A` from its blocks; `b` must be symmetric and `c` Hermitian.
    pub fn from_blocks(b: CMatrix, c: CMatrix) -> Result<Self> {
        let d = b.nrows();
        if b.shape() != (d, d) || c.shape() != (d, d) {
            return Err(Error::dim("B and C must be square and of equal size"));
        }
        let tol = STRUCTURE_TOL * linalg::max_abs(&b).max(linalg::max_abs(&c)).max(1.0);
        if linalg::symmetric_defect(&b) > tol {
            return Err(Error::invalid("B block is not symmetric"));
        }
        if linalg::hermitian_defect(&c) > tol {
            return Err(Error::invalid("C block is not Hermitian"));
        }
        Ok(Self {
            b: (&b + b.transpose()).scale(0.5),
            c: linalg::hermitian_part(&c),
        })
    }

    fn from_full_unchecked(a: &CMatrix) -> Self {
        let d = a.nrows() / 2;
        let b = a.view((0, 0), (d, d)).into_owned();
        let c = a.view((0, d), (d, d)).into_owned();
        Self {
            b: (&b + b.transpose()).scale(0.5),
            c: linalg::hermitian_part(&c),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            b: CMatrix::zeros(d, d),
            c: CMatrix::zeros(d, d),
        }
    }

    pub fn modes(&self) -> usize {
        self.b.nrows()
    }

    pub fn b(&self) -> &CMatrix {
        &self.b
    }

    pub fn c(&self) -> &CMatrix {
        &self.c
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        let d = self.modes();
        match (i < d, j < d) {
            (true, true) => self.b[(i, j)],
            (true, false) => self.c[(i, j - d)],
            (false, true) => self.c[(j, i - d)],
            (false, false) => self.b[(i - d, j - d)].conj(),
        }
    }

    /// The full `2d x 2d` matrix.
    pub fn full(&self) -> CMatrix {
        let n = 2 * self.modes();
        CMatrix::from_fn(n, n, |i, j| self.entry(i, j))
    }

    /// `Σ_Q⁻¹ = I − X A`.
    pub fn sigma_q_inverse(&self) -> CMatrix {
        let n = 2 * self.modes();
        CMatrix::identity(n, n) - linalg::swap_rows(&self.full())
    }

    /// Output-mode phase change `a_j → e^{iψ_j} a_j`. Photon statistics are
    /// invariant when `γ` is transformed with the same phases.
    pub fn rephased(&self, psi: &[f64]) -> Self {
        let d = self.modes();
        let b = CMatrix::from_fn(d, d, |i, j| self.b[(i, j)] * cis(psi[i] + psi[j]));
        let c = CMatrix::from_fn(d, d, |i, j| self.c[(i, j)] * cis(psi[i] - psi[j]));
        Self { b, c }
    }
}

/// `γ = δ† Σ_Q⁻¹` as a length-`2d` vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaVector {
    #[serde(with = "crate::io::vector")]
    gamma: CVector,
}

impl GammaVector {
    pub fn zeros(d: usize) -> Self {
        Self {
            gamma: CVector::zeros(2 * d),
        }
    }

    fn from_vector_unchecked(gamma: CVector) -> Self {
        Self { gamma }
    }

    /// Validates the conjugate-pair structure.
    pub fn from_vector(gamma: CVector) -> Result<Self> {
        if gamma.len() % 2 != 0 {
            return Err(Error::dim("gamma must have even length"));
        }
        let d = gamma.len() / 2;
        let tol = STRUCTURE_TOL * gamma.iter().fold(1.0f64, |a, z| a.max(z.norm()));
        if (0..d).any(|j| (gamma[j + d] - gamma[j].conj()).norm() > tol) {
            return Err(Error::invalid("gamma lacks conjugate-pair structure"));
        }
        Ok(Self { gamma })
    }

    /// From the annihilation half `g`; the creation half is `g*`.
    pub fn from_top(g: &[Complex64]) -> Self {
        Self {
            gamma: doubled(g),
        }
    }

    /// Real non-negative convention used by the reconstruction.
    pub fn from_real(g: &[f64]) -> Self {
        let v: Vec<_> = g.iter().map(|&x| c(x, 0.0)).collect();
        Self::from_top(&v)
    }

    pub fn modes(&self) -> usize {
        self.gamma.len() / 2
    }

    pub fn as_vector(&self) -> &CVector {
        &self.gamma
    }

    pub fn top(&self) -> Vec<Complex64> {
        self.gamma.iter().take(self.modes()).copied().collect()
    }

    pub fn is_zero(&self) -> bool {
        self.gamma.iter().all(|z| *z == ZERO)
    }

    /// `(e^{iφ} g, e^{−iφ} g*)`.
    pub fn rotated(&self, phi: f64) -> Self {
        let d = self.modes();
        let u = cis(phi);
        Self {
            gamma: CVector::from_fn(2 * d, |i, _| {
                if i < d {
                    self.gamma[i] * u
                } else {
                    self.gamma[i] * u.conj()
                }
            }),
        }
    }

    /// Companion of [`AMatrix::rephased`].
    pub fn rephased(&self, psi: &[f64]) -> Self {
        let g: Vec<_> = self.top().iter().zip(psi).map(|(z, &p)| z * cis(p)).collect();
        Self::from_top(&g)
    }
}

/// Fixes the output-mode phases so that `γ` is real and non-negative.
/// Modes with `γ_j = 0` keep their phase.
pub fn gauge_fix(a: &AMatrix, gamma: &GammaVector) -> (AMatrix, GammaVector, Vec<f64>) {
    let psi: Vec<f64> = gamma
        .top()
        .iter()
        .map(|z| if z.norm() > 0.0 { -z.arg() } else { 0.0 })
        .collect();
    let fixed_gamma = GammaVector::from_real(
        &gamma.top().iter().map(|z| z.norm()).collect::<Vec<_>>(),
    );
    (a.rephased(&psi), fixed_gamma, psi)
}

/// Inverse of the `(A, γ)` map: `Σ_Q = (I − XA)⁻¹`, `δ† = γ Σ_Q`.
pub fn state_from_a(a: &AMatrix, gamma: &GammaVector) -> Result<GaussianState> {
    if a.modes() != gamma.modes() {
        return Err(Error::dim("A and gamma disagree on the mode count"));
    }
    let n = 2 * a.modes();
    let q = linalg::hermitian_part(&linalg::inverse(&a.sigma_q_inverse(), "I − XA")?);
    let delta = CVector::from_fn(n, |j, _| {
        crate::sum::sum_complex((0..n).map(|k| gamma.gamma[k] * q[(k, j)])).conj()
    });
    let sigma = q - CMatrix::identity(n, n).scale(0.5);
    GaussianState::new(sigma, delta).map_err(|e| match e {
        Error::Unphysical(m) => Error::unphysical(format!("(A, γ) does not describe a state: {m}")),
        other => other,
    })
}

/// Squeezed-thermal approximant with a classical P function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalStateParams {
    /// Quadrature variances of the lossy squeezed vacuum (vacuum = 1).
    pub a_plus: f64,
    pub a_minus: f64,
    /// `ln √(a₊a₋)`.
    pub s_c: f64,
    /// Thermal occupation.
    pub n_th: f64,
    /// Squeezing of the classical state.
    pub s: f64,
}

/// Closest classical squeezed thermal state to a squeezed vacuum `r` after
/// transmission `eta`.
pub fn closest_classical_state(r: f64, eta: f64) -> Result<ClassicalStateParams> {
    if !(r >= 0.0) || !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!(
            "need r >= 0 and eta in [0, 1], got r = {r}, eta = {eta}"
        )));
    }
    let a_plus = eta * (2.0 * r).exp() + (1.0 - eta);
    let a_minus = eta * (-2.0 * r).exp() + (1.0 - eta);
    let s_c = (a_plus * a_minus).sqrt().ln();
    let n_th = -0.5 + 0.5 * (1.0 + 2.0 * (2.0 * s_c).sinh() * (a_plus / a_minus).sqrt()).sqrt();
    let s = 0.5 * (2.0 * n_th + 1.0).ln();
    Ok(ClassicalStateParams {
        a_plus,
        a_minus,
        s_c,
        n_th,
        s,
    })
}

/// Input state for the classical model: two squeezed thermal states with
/// parameters from [`closest_classical_state`] (squeezed along opposite
/// axes) combined on a balanced beam splitter at the squeezer ports, plus the
/// coherent beam.
///
/// The squeezed thermal modes already include the source-to-detector loss
/// `η_tot`; see [`classical_surrogate`] for the matching propagation.
pub fn build_classical_input(config: &SourceConfig, total_modes: usize) -> Result<GaussianState> {
    config.validate(total_modes)?;
    let d = total_modes;
    let mut n = CMatrix::zeros(d, d);
    let mut m = CMatrix::zeros(d, d);
    let mut bs = CMatrix::identity(d, d);
    if let Some([p, q]) = config.squeezer_ports {
        let params = closest_classical_state(config.r, config.eta_tot())?;
        let half = params.n_th + 0.5;
        let g = half * (2.0 * params.s).cosh() - 0.5;
        let mm = half * (2.0 * params.s).sinh();
        n[(p, p)] = c(g, 0.0);
        n[(q, q)] = c(g, 0.0);
        m[(p, p)] = c(mm, 0.0);
        m[(q, q)] = c(-mm, 0.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        bs[(p, p)] = c(h, 0.0);
        bs[(p, q)] = c(h, 0.0);
        bs[(q, p)] = c(h, 0.0);
        bs[(q, q)] = c(-h, 0.0);
    }
    let mut alpha = vec![ZERO; d];
    if let Some(p) = config.coherent_port {
        alpha[p] = config.alpha();
    }
    // The beam splitter acts on the squeezer pair only; the coherent port is
    // disjoint, so applying it after the displacement is harmless.
    GaussianState::from_moments(&n, &m, &alpha)?.apply_mode_map(&bs)
}

/// Classical-model output state. The squeezer part is propagated through the
/// unit-efficiency transfer `T/√η_tot` (its loss is already inside the
/// classical parameters) and the coherent beam through `T` itself.
pub fn classical_surrogate(config: &SourceConfig, t: &TransferMatrix) -> Result<GaussianState> {
    let eta = config.eta_tot();
    if eta <= 0.0 {
        return Err(Error::Config("classical model needs eta_tot > 0".into()));
    }
    let attenuated = config.with_alpha_mag(config.alpha_mag * eta.sqrt());
    let input = build_classical_input(&attenuated, t.inputs())?;
    let unit = t.scaled(1.0 / eta.sqrt()).map_err(|_| {
        Error::unphysical(format!(
            "transfer matrix has more than eta_tot = {eta} transmission; cannot remove the loss"
        ))
    })?;
    propagate(&input, &unit)
}

/// Convenience: the full quantum output state.
pub fn output_state(config: &SourceConfig, t: &TransferMatrix) -> Result<GaussianState> {
    propagate(&build_input_state(config, t.inputs())?, t)
}
