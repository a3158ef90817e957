//! Seeded random states for the probes and property tests.

use ndarray::Array2;
use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::basis::{CoefficientState, SpectralBasis};

/// I.i.d. complex Gaussian coefficients rescaled to L² norm `norm`.
pub fn random_state<R: Rng>(rng: &mut R, modes: usize, particles: usize, norm: f64) -> CoefficientState {
    let data = Array2::from_shape_simple_fn((modes, particles), || {
        C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    rescale(CoefficientState::new(data), norm)
}

/// Gaussian coefficients damped by `(1 + λ_k)^{-1}` so that the H¹ norm stays
/// comparable to the L² norm as the basis grows, rescaled to L² norm `norm`.
pub fn random_smooth_state<R: Rng>(rng: &mut R, basis: &SpectralBasis, norm: f64) -> CoefficientState {
    let mut d = random_state(rng, basis.mode_count(), basis.particles(), 1.0);
    for (mut row, &lam) in d.as_array_mut().rows_mut().into_iter().zip(basis.eigenvalues().iter()) {
        let damp = 1.0 / (1.0 + lam);
        row.mapv_inplace(|z| z * damp);
    }
    rescale(d, norm)
}

fn rescale(d: CoefficientState, norm: f64) -> CoefficientState {
    let current = d.norm();
    if current == 0.0 {
        return d;
    }
    &d * (norm / current)
}
