//! Random circuits and states for tests, examples and the simulator.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{c, CMatrix};
use crate::state::{Efficiencies, GaussianState, SourceConfig, TransferMatrix};

/// Haar-random `d x d` unitary (QR of a complex Ginibre matrix with the
/// phases of `R`'s diagonal removed).
pub fn haar_unitary<R: Rng + ?Sized>(d: usize, rng: &mut R) -> CMatrix {
    let z = CMatrix::from_fn(d, d, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        c(re, im) * std::f64::consts::FRAC_1_SQRT_2
    });
    let qr = z.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut u = q;
    for j in 0..d {
        let rjj = r[(j, j)];
        let ph = if rjj.norm() > 0.0 { rjj / rjj.norm() } else { c(1.0, 0.0) };
        for i in 0..d {
            u[(i, j)] *= ph;
        }
    }
    u
}

/// `√η · U` with `U` Haar random.
pub fn lossy_haar_transfer<R: Rng + ?Sized>(d: usize, eta: f64, rng: &mut R) -> TransferMatrix {
    TransferMatrix::new(haar_unitary(d, rng).scale(eta.sqrt())).expect("scaled unitary is sub-unitary")
}

/// `U diag(s) V` with singular values `s` uniform in `[0, 1]`.
pub fn subunitary<R: Rng + ?Sized>(m: usize, d: usize, rng: &mut R) -> TransferMatrix {
    let u = haar_unitary(m, rng);
    let v = haar_unitary(d, rng);
    let s = CMatrix::from_fn(m, d, |i, j| if i == j { c(rng.random_range(0.0..1.0), 0.0) } else { c(0.0, 0.0) });
    TransferMatrix::new(u * s * v).expect("contraction")
}

/// Random mixed, squeezed, displaced state on `d` modes: product of squeezed
/// thermal modes with random amplitudes, mixed by a random sub-unitary
/// circuit.
pub fn physical_state<R: Rng + ?Sized>(d: usize, rng: &mut R) -> GaussianState {
    let mut n = CMatrix::zeros(d, d);
    let mut m = CMatrix::zeros(d, d);
    let mut alpha = Vec::with_capacity(d);
    for j in 0..d {
        let r: f64 = rng.random_range(0.0..0.6);
        let nth: f64 = rng.random_range(0.0..0.3);
        let theta: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let half = nth + 0.5;
        n[(j, j)] = c(half * (2.0 * r).cosh() - 0.5, 0.0);
        m[(j, j)] = c(half * (2.0 * r).sinh(), 0.0) * crate::linalg::cis(theta);
        alpha.push(c(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)));
    }
    let input = GaussianState::from_moments(&n, &m, &alpha).expect("squeezed thermal product");
    let t = subunitary(d, d, rng);
    crate::state::propagate(&input, &t).expect("sub-unitary propagation")
}

/// Desk-scale copy of the experiment: 15 modes, two-mode squeezer on ports
/// 0 and 1 with `r = 0.3`, coherent beam with `|α|² = 0.2` on port 2 and the
/// total loss `0.5 · 0.7² · 0.7 · 0.8` folded into a Haar-random circuit.
pub fn lab_scale_setup<R: Rng + ?Sized>(rng: &mut R) -> (SourceConfig, TransferMatrix) {
    let efficiencies = Efficiencies {
        coupling: 0.5,
        grating: 0.7,
        propagation: 0.7,
        detection: 0.8,
    };
    let config = SourceConfig {
        r: 0.3,
        alpha_mag: 0.2f64.sqrt(),
        phi: 0.0,
        squeezer_ports: Some([0, 1]),
        coherent_port: Some(2),
        efficiencies,
    };
    (config, lossy_haar_transfer(15, efficiencies.total(), rng))
}
