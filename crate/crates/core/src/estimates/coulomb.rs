//! Integrability of `|x|^{-p}` over balls: adaptive Cartesian quadrature
//! against the closed form, or a divergence diagnosis when `n ≤ p`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EstimateReport;
use crate::error::{Error, Result};

/// Cells closer to the origin than this many cell sizes are always refined.
const GRADING: f64 = 4.0;

/// `∫_{B_R} |x|^{-p} dx = n π^{n/2} / Γ(n/2 + 1) · R^{n−p} / (n − p)` for `n > p`.
pub fn closed_form(n: usize, p: f64, radius: f64) -> Option<f64> {
    if (n as f64) <= p {
        return None;
    }
    let surface = match n {
        1 => 2.0,
        2 => 2.0 * PI,
        _ => 4.0 * PI,
    };
    Some(surface * radius.powf(n as f64 - p) / (n as f64 - p))
}

/// Midpoint quadrature on `[−R, R]^n` with cells refined down to `depth`
/// halvings near the origin and along the sphere; a cell counts when its
/// centre lies inside the ball.
pub fn ball_quadrature(n: usize, p: f64, radius: f64, depth: usize) -> f64 {
    let mut total = 0.0;
    // Start from the 2^n cells touching the origin so no midpoint sits on it.
    for corner in 0..(1usize << n) {
        let centre: Vec<f64> = (0..n)
            .map(|i| if corner >> i & 1 == 1 { radius / 2.0 } else { -radius / 2.0 })
            .collect();
        total += cell(n, p, radius, &centre, radius / 2.0, 1, depth);
    }
    total
}

fn cell(n: usize, p: f64, radius: f64, centre: &[f64], half: f64, level: usize, depth: usize) -> f64 {
    let size = 2.0 * half;
    let near: f64 = centre
        .iter()
        .map(|c| (c.abs() - half).max(0.0).powi(2))
        .sum::<f64>()
        .sqrt();
    let far: f64 = centre.iter().map(|c| (c.abs() + half).powi(2)).sum::<f64>().sqrt();
    let on_sphere = near <= radius && far >= radius;
    let near_origin = near < GRADING * size;
    if level < depth && (on_sphere || near_origin) {
        let mut s = 0.0;
        let mut child = vec![0.0; n];
        for corner in 0..(1usize << n) {
            for i in 0..n {
                let sign = if corner >> i & 1 == 1 { 0.5 } else { -0.5 };
                child[i] = centre[i] + sign * half;
            }
            s += cell(n, p, radius, &child, half / 2.0, level + 1, depth);
        }
        return s;
    }
    if norm(centre) < radius {
        size.powi(n as i32) * norm(centre).powf(-p)
    } else {
        0.0
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Plain Monte-Carlo estimate over the enclosing cube; only meaningful when
/// the integrand has finite variance (`2p < n`).
pub fn monte_carlo(n: usize, p: f64, radius: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    let mut x = vec![0.0; n];
    for _ in 0..samples {
        for v in x.iter_mut() {
            *v = rng.gen_range(-radius..radius);
        }
        let r = norm(&x);
        if r < radius && r > 0.0 {
            acc += r.powf(-p);
        }
    }
    acc / samples as f64 * (2.0 * radius).powi(n as i32)
}

/// Quadrature over depths `resolution − 4 ..= resolution`. For `n > p` the
/// finest value is compared with the closed form (1% tolerance); otherwise
/// the check passes when the values grow monotonically and the increments do
/// not decay geometrically.
pub fn check_coulomb_lp(n: usize, p: f64, radius: f64, resolution: usize) -> Result<EstimateReport> {
    if !(1..=3).contains(&n) {
        return Err(Error::Check(format!("dimension {n} not supported")));
    }
    if !(radius > 0.0) || !(p >= 0.0) {
        return Err(Error::Check(format!("need R > 0 and p >= 0, got R = {radius}, p = {p}")));
    }
    if resolution < 5 {
        return Err(Error::Check("resolution must be at least 5 (four refinements)".into()));
    }
    let depths: Vec<usize> = (resolution - 4..=resolution).collect();
    let values: Vec<f64> = depths.iter().map(|&d| ball_quadrature(n, p, radius, d)).collect();
    let increments: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    let name = format!("coulomb_lp_n{n}_p{p}");
    let mut report = match closed_form(n, p, radius) {
        Some(exact) => {
            let finest = *values.last().expect("five depths");
            let rel = (finest - exact).abs() / exact;
            let mut r = EstimateReport::bounded(
                &name,
                "|Q(∫_{B_R}|x|^{-p}) − closed form| / closed form ≤ 1%",
                rel,
                0.01,
                0.0,
            )
            .constant("n π^{n/2}/Γ(n/2+1) · R^{n−p}/(n−p)")
            .ingredient("closed_form", exact)
            .ingredient("quadrature", finest);
            if 2.0 * p < n as f64 {
                r = r.ingredient("monte_carlo", monte_carlo(n, p, radius, 1_000_000, 7));
            }
            r
        }
        None => {
            let non_monotone = increments.iter().filter(|&&d| d <= 0.0).count();
            // A convergent integrand would shrink the increments by 2^{p−n} < 1
            // per level; divergent ones keep them constant (p = n) or growing.
            let decay = increments.windows(2).map(|w| w[1] / w[0]).fold(f64::INFINITY, f64::min);
            EstimateReport::bounded(
                &name,
                "divergent: monotone growth under refinement, increments never shrink below 3/4 of the previous one",
                1.0 / decay,
                4.0 / 3.0,
                0.0,
            )
            .constant("n ≤ p: the integral is infinite")
            .ingredient("increment_decay", decay)
            .ingredient("growth", values[values.len() - 1] / values[0])
            .violations(non_monotone)
            .note("divergent")
        }
    };
    for (d, v) in depths.iter().zip(&values) {
        report = report.ingredient(&format!("quadrature_depth_{d:02}"), *v);
    }
    Ok(report.samples(values.len()))
}
