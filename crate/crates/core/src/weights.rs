//! The robust aggregation weight solver: `q* = argmin_{q in H} q' G q` over
//! prior sets `H` inside the simplex.
//!
//! `H` is one of the full simplex, a Euclidean ball around a center
//! intersected with the simplex, or a single point. Projection onto the
//! simplex uses sort-and-threshold; ball-with-simplex uses Dykstra
//! alternating projections. The solver is projected gradient descent with an
//! exact closed form for `L = 2` on the full simplex.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::MixtureSpec;
use crate::error::{Error, Result};
use crate::gamma::GammaMatrix;

const PGD_MAX_ITER: usize = 100_000;
const PGD_TOL: f64 = 1e-10;
const DYKSTRA_MAX_SWEEPS: usize = 10_000;
const DYKSTRA_TOL: f64 = 1e-13;

/// Prior set for the aggregation weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UncertaintySet {
    FullSimplex,
    /// Euclidean ball around `center` intersected with the simplex. With
    /// `scaled` the effective radius is `rho * sqrt(L)`, otherwise `rho`.
    L2Ball {
        center: MixtureSpec,
        rho: f64,
        scaled: bool,
    },
    Singleton {
        q: MixtureSpec,
    },
}

impl UncertaintySet {
    /// Ball with the scaled radius parameterization (`rho * sqrt(L)`).
    pub fn ball(center: MixtureSpec, rho: f64) -> Self {
        UncertaintySet::L2Ball {
            center,
            rho,
            scaled: true,
        }
    }

    pub fn effective_radius(&self) -> Option<f64> {
        match self {
            UncertaintySet::L2Ball {
                center,
                rho,
                scaled,
            } => Some(if *scaled {
                rho * (center.len() as f64).sqrt()
            } else {
                *rho
            }),
            _ => None,
        }
    }

    /// Number of groups the set constrains, when it pins one.
    pub fn len(&self) -> Option<usize> {
        match self {
            UncertaintySet::FullSimplex => None,
            UncertaintySet::L2Ball { center, .. } => Some(center.len()),
            UncertaintySet::Singleton { q } => Some(q.len()),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, q: &[f64], tol: f64) -> bool {
        let sum: f64 = q.iter().sum();
        if (sum - 1.0).abs() > tol || q.iter().any(|&v| v < -tol) {
            return false;
        }
        match self {
            UncertaintySet::FullSimplex => true,
            UncertaintySet::L2Ball { center, .. } => {
                let r = self.effective_radius().unwrap();
                let d: f64 = q
                    .iter()
                    .zip(center.weights())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                d <= r + tol
            }
            UncertaintySet::Singleton { q: point } => {
                q.iter()
                    .zip(point.weights())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
                    <= tol
            }
        }
    }

    /// Diameter `rho_H = max_{q,q' in H} ||q - q'||_2`. Exact for the full
    /// simplex (`sqrt(2)`) and singletons (0); for balls, `min(2 r, sqrt 2)`,
    /// which is exact whenever the ball's slice through the simplex's affine
    /// hull lies inside the simplex.
    pub fn diameter(&self, l: usize) -> f64 {
        match self {
            UncertaintySet::FullSimplex => {
                if l <= 1 {
                    0.0
                } else {
                    2.0f64.sqrt()
                }
            }
            UncertaintySet::L2Ball { .. } => {
                (2.0 * self.effective_radius().unwrap()).min(2.0f64.sqrt())
            }
            UncertaintySet::Singleton { .. } => 0.0,
        }
    }

    fn validate(&self, l: usize) -> Result<()> {
        match self {
            UncertaintySet::FullSimplex => Ok(()),
            UncertaintySet::L2Ball { center, rho, .. } => {
                if center.len() != l {
                    return Err(Error::Shape(format!(
                        "ball center has length {}, expected {l}",
                        center.len()
                    )));
                }
                if !rho.is_finite() || *rho < 0.0 {
                    return Err(Error::Invariant(format!("ball radius must be >= 0, got {rho}")));
                }
                Ok(())
            }
            UncertaintySet::Singleton { q } => {
                if q.len() != l {
                    return Err(Error::Shape(format!(
                        "singleton has length {}, expected {l}",
                        q.len()
                    )));
                }
                Ok(())
            }
        }
    }
}

/// A solved weight vector with solver metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSolution {
    pub q: MixtureSpec,
    /// `q' G q`, recomputed at the returned point.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Indices (0-based) with weight above 1e-9.
    pub active_set: Vec<usize>,
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
pub fn project_simplex(v: &[f64]) -> MixtureSpec {
    let l = v.len();
    assert!(l >= 1, "cannot project an empty vector");
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    let mut found = false;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        } else {
            found = true;
            break;
        }
    }
    let _ = found;
    let mut w: Vec<f64> = v.iter().map(|&x| (x - tau).max(0.0)).collect();
    // Guard against rounding drift in the sum.
    let s: f64 = w.iter().sum();
    if s > 0.0 && (s - 1.0).abs() > 1e-15 {
        for x in &mut w {
            *x /= s;
        }
    }
    MixtureSpec::new(w).expect("simplex projection produced an invalid point")
}

fn project_ball(v: &[f64], center: &[f64], radius: f64) -> Vec<f64> {
    let d: f64 = v
        .iter()
        .zip(center)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if d <= radius || d == 0.0 {
        v.to_vec()
    } else {
        let scale = radius / d;
        v.iter()
            .zip(center)
            .map(|(a, b)| b + (a - b) * scale)
            .collect()
    }
}

/// Euclidean projection onto `H`. Full simplex delegates to
/// [`project_simplex`], singletons return their point, and ball-with-simplex
/// runs Dykstra alternating projections between the two sets.
pub fn project_h(v: &[f64], h: &UncertaintySet) -> Result<MixtureSpec> {
    h.validate(v.len())?;
    match h {
        UncertaintySet::FullSimplex => Ok(project_simplex(v)),
        UncertaintySet::Singleton { q } => Ok(q.clone()),
        UncertaintySet::L2Ball { center, .. } => {
            let radius = h.effective_radius().unwrap();
            if radius == 0.0 {
                return Ok(center.clone());
            }
            let c = center.weights();
            let mut x = v.to_vec();
            let mut p_inc = vec![0.0; v.len()];
            let mut q_inc = vec![0.0; v.len()];
            for _ in 0..DYKSTRA_MAX_SWEEPS {
                let prev = x.clone();
                // Simplex step with its correction.
                let y_in: Vec<f64> = x.iter().zip(&p_inc).map(|(a, b)| a + b).collect();
                let y = project_simplex(&y_in);
                for i in 0..x.len() {
                    p_inc[i] = y_in[i] - y.weights()[i];
                }
                // Ball step with its correction.
                let z_in: Vec<f64> = y.weights().iter().zip(&q_inc).map(|(a, b)| a + b).collect();
                let z = project_ball(&z_in, c, radius);
                for i in 0..x.len() {
                    q_inc[i] = z_in[i] - z[i];
                }
                x = z;
                let change = x
                    .iter()
                    .zip(&prev)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if change < DYKSTRA_TOL {
                    // Final polish: land exactly on the simplex.
                    let out = project_simplex(&x);
                    return Ok(out);
                }
            }
            Err(Error::Convergence(format!(
                "Dykstra projection did not converge in {DYKSTRA_MAX_SWEEPS} sweeps"
            )))
        }
    }
}

fn active_set(q: &[f64]) -> Vec<usize> {
    q.iter()
        .enumerate()
        .filter(|(_, &w)| w > 1e-9)
        .map(|(i, _)| i)
        .collect()
}

fn quad_form(g: &DMatrix<f64>, q: &[f64]) -> f64 {
    let qv = DVector::from_column_slice(q);
    (qv.transpose() * g * &qv)[(0, 0)]
}

/// Solve `argmin_{q in H} q' G q` for a PSD (possibly repaired) `G`.
///
/// Rejects indefinite inputs with an instruction to run PSD repair first.
/// For `L = 2` on the full simplex the exact closed form is used:
/// `q1 = clip((G22 - G12) / (G11 + G22 - 2 G12), 0, 1)` with a degenerate
/// denominator (<= 1e-14) resolved to 1/2.
pub fn solve_weights(gamma: &GammaMatrix, h: &UncertaintySet) -> Result<WeightSolution> {
    let l = gamma.l();
    h.validate(l)?;
    let g = gamma.values();
    let (lam_min, lam_max) = gamma.eigen_range();
    if lam_min < -1e-10 * lam_max.abs().max(1.0) {
        return Err(Error::Estimation(format!(
            "Gamma is indefinite (lambda_min = {lam_min:.3e}); call psd_repair before solving"
        )));
    }

    if let UncertaintySet::Singleton { q } = h {
        let obj = quad_form(g, q.weights());
        return Ok(WeightSolution {
            q: q.clone(),
            objective: obj,
            iterations: 0,
            converged: true,
            active_set: active_set(q.weights()),
        });
    }

    if l == 2 && *h == UncertaintySet::FullSimplex {
        let denom = g[(0, 0)] + g[(1, 1)] - 2.0 * g[(0, 1)];
        let q1 = if denom.abs() <= 1e-14 {
            0.5
        } else {
            ((g[(1, 1)] - g[(0, 1)]) / denom).clamp(0.0, 1.0)
        };
        let q = MixtureSpec::new(vec![q1, 1.0 - q1])?;
        let obj = quad_form(g, q.weights());
        return Ok(WeightSolution {
            active_set: active_set(q.weights()),
            objective: obj,
            iterations: 0,
            converged: true,
            q,
        });
    }

    solve_weights_pgd(gamma, h)
}

/// The general projected-gradient path (also used directly by tests to
/// cross-check the L = 2 closed form). Starts from the H-projection of the
/// uniform vector with step `1 / (lambda_max + ridge)` along `G q`, and stops
/// when the iterate moves less than 1e-10.
pub fn solve_weights_pgd(gamma: &GammaMatrix, h: &UncertaintySet) -> Result<WeightSolution> {
    let l = gamma.l();
    h.validate(l)?;
    let g = gamma.values();
    let (_, lam_max) = gamma.eigen_range();
    let step = 1.0 / (lam_max.max(0.0) + 1e-10);

    let uniform = vec![1.0 / l as f64; l];
    let mut q = project_h(&uniform, h)?.weights().to_vec();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < PGD_MAX_ITER {
        iterations += 1;
        let qv = DVector::from_column_slice(&q);
        let grad = g * qv;
        let moved: Vec<f64> = q
            .iter()
            .zip(grad.iter())
            .map(|(x, d)| x - step * d)
            .collect();
        let next = project_h(&moved, h)?;
        let change = next
            .weights()
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        q = next.weights().to_vec();
        if change < PGD_TOL {
            converged = true;
            break;
        }
    }

    let spec = MixtureSpec::new(q)?;
    let objective = quad_form(g, spec.weights());
    Ok(WeightSolution {
        active_set: active_set(spec.weights()),
        objective,
        iterations,
        converged,
        q: spec,
    })
}

/// Fixed-point optimality residual: distance between `q` and the
/// H-projection of one gradient step from `q`. Near zero at a constrained
/// minimizer.
pub fn kkt_residual(gamma: &GammaMatrix, q: &MixtureSpec, h: &UncertaintySet) -> Result<f64> {
    let g = gamma.values();
    let (_, lam_max) = gamma.eigen_range();
    let step = 1.0 / (lam_max.max(0.0) + 1e-10);
    let qv = DVector::from_column_slice(q.weights());
    let grad = g * qv;
    let moved: Vec<f64> = q
        .weights()
        .iter()
        .zip(grad.iter())
        .map(|(x, d)| x - step * d)
        .collect();
    let proj = project_h(&moved, h)?;
    Ok(q.l2_distance(&proj))
}

/// Brute-force max-min reward oracle for small instances (`L <= 3`).
///
/// Models are exact functions evaluated on a finite target support with
/// masses. For each mesh point `q` in `H`, the reward of the aggregate
/// `f_q = sum_l q_l f_l` is minimized over the vertex mixtures (the minimum
/// of a linear-in-mixture reward is attained at a vertex); the mesh point
/// maximizing that worst-case reward is returned. Used as an independent
/// test oracle for the solver.
pub fn minimax_oracle(
    models: &[&dyn Fn(&[f64]) -> f64],
    support: &DMatrix<f64>,
    masses: &[f64],
    h: &UncertaintySet,
    mesh: f64,
) -> Result<MixtureSpec> {
    let l = models.len();
    if l == 0 || l > 3 {
        return Err(Error::Invariant(format!(
            "minimax oracle supports 1..=3 models, got {l}"
        )));
    }
    if support.nrows() != masses.len() {
        return Err(Error::Shape(format!(
            "{} support points but {} masses",
            support.nrows(),
            masses.len()
        )));
    }
    if !(mesh.is_finite() && mesh > 0.0) {
        return Err(Error::Invariant(format!("mesh must be positive, got {mesh}")));
    }
    if mesh > 0.1 {
        log::warn!("minimax oracle mesh {mesh} is coarse; results are low-resolution");
    }
    h.validate(l)?;

    // Normalized masses and the value table V[i][l].
    let mass_sum: f64 = masses.iter().sum();
    let w: Vec<f64> = masses.iter().map(|m| m / mass_sum).collect();
    let n = support.nrows();
    let mut values = vec![vec![0.0; l]; n];
    let mut row = vec![0.0; support.ncols()];
    for i in 0..n {
        for c in 0..support.ncols() {
            row[c] = support[(i, c)];
        }
        for (k, f) in models.iter().enumerate() {
            values[i][k] = f(&row);
        }
    }

    // Worst-vertex reward of the aggregate with weights q.
    let worst_reward = |q: &[f64]| -> f64 {
        let mut worst = f64::INFINITY;
        for vertex in 0..l {
            let mut r = 0.0;
            for i in 0..n {
                let fq: f64 = (0..l).map(|k| q[k] * values[i][k]).sum();
                r += w[i] * (2.0 * values[i][vertex] * fq - fq * fq);
            }
            worst = worst.min(r);
        }
        worst
    };

    let steps = (1.0 / mesh).round() as usize;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut consider = |q: Vec<f64>| {
        if !h.contains(&q, 1e-9) {
            return;
        }
        let r = worst_reward(&q);
        if best.as_ref().map_or(true, |(b, _)| r > *b) {
            best = Some((r, q));
        }
    };

    match l {
        1 => consider(vec![1.0]),
        2 => {
            for i in 0..=steps {
                let q1 = i as f64 * mesh;
                consider(vec![q1.min(1.0), (1.0 - q1).max(0.0)]);
            }
        }
        _ => {
            for i in 0..=steps {
                for j in 0..=(steps - i) {
                    let q1 = i as f64 * mesh;
                    let q2 = j as f64 * mesh;
                    let q3 = (1.0 - q1 - q2).max(0.0);
                    consider(vec![q1, q2, q3]);
                }
            }
        }
    }
    // The constrained sets may miss every mesh point; their anchor points
    // are always feasible.
    match h {
        UncertaintySet::L2Ball { center, .. } => consider(center.weights().to_vec()),
        UncertaintySet::Singleton { q } => consider(q.weights().to_vec()),
        UncertaintySet::FullSimplex => {}
    }

    let (_, q) = best.ok_or_else(|| {
        Error::Estimation("no feasible mesh point found for the oracle".into())
    })?;
    MixtureSpec::new(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gamma::Provenance;
    use crate::seeds::{rng_for, standard_normal};
    use proptest::prelude::*;

    fn gm(vals: &[f64], l: usize) -> GammaMatrix {
        GammaMatrix::from_upper(DMatrix::from_row_slice(l, l, vals), Provenance::Plugin).unwrap()
    }

    #[test]
    fn project_simplex_feasible_point_unchanged() {
        let p = project_simplex(&[0.3, 0.7]);
        assert!((p.weights()[0] - 0.3).abs() < 1e-15);
        assert!((p.weights()[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn project_simplex_symmetric_point() {
        let p = project_simplex(&[2.0, 2.0]);
        assert!((p.weights()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn project_simplex_clips_to_vertex() {
        // KKT: threshold tau = 0.2, so (1.2, -0.2) -> (1, 0).
        let p = project_simplex(&[1.2, -0.2]);
        assert!((p.weights()[0] - 1.0).abs() < 1e-15);
        assert_eq!(p.weights()[1], 0.0);
    }

    #[test]
    fn project_h_full_simplex_matches_project_simplex() {
        let v = [0.9, -0.4, 0.8];
        let a = project_h(&v, &UncertaintySet::FullSimplex).unwrap();
        let b = project_simplex(&v);
        assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn project_h_singleton_returns_point() {
        let h = UncertaintySet::Singleton {
            q: MixtureSpec::new(vec![0.5, 0.5]).unwrap(),
        };
        let p = project_h(&[1.0, 0.0], &h).unwrap();
        assert_eq!(p.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn project_h_ball_boundary_along_simplex_direction() {
        let h = UncertaintySet::L2Ball {
            center: MixtureSpec::new(vec![0.5, 0.5]).unwrap(),
            rho: 0.1,
            scaled: false,
        };
        let p = project_h(&[1.0, 0.0], &h).unwrap();
        let expected = [0.5 + 0.1 / 2f64.sqrt(), 0.5 - 0.1 / 2f64.sqrt()];
        assert!((p.weights()[0] - expected[0]).abs() < 1e-9, "{p:?}");
        assert!((p.weights()[1] - expected[1]).abs() < 1e-9);
    }

    #[test]
    fn project_h_ball_validated_against_grid_search() {
        let h = UncertaintySet::L2Ball {
            center: MixtureSpec::new(vec![0.6, 0.2, 0.2]).unwrap(),
            rho: 0.15,
            scaled: false,
        };
        let v = [0.1, 0.8, 0.1];
        let p = project_h(&v, &h).unwrap();
        assert!(h.contains(p.weights(), 1e-8));
        // Grid search over the simplex at resolution 1e-3.
        let mut best = f64::INFINITY;
        let steps = 1000;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let q = [
                    i as f64 / steps as f64,
                    j as f64 / steps as f64,
                    (steps - i - j) as f64 / steps as f64,
                ];
                if h.contains(&q, 1e-9) {
                    let d: f64 = q
                        .iter()
                        .zip(&v)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    best = best.min(d);
                }
            }
        }
        let got: f64 = p
            .weights()
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(got <= best + 2e-3, "projection distance {got} vs grid {best}");
    }

    #[test]
    fn solve_identity_gives_uniform() {
        let g = gm(&[1.0, 0.0, 0.0, 1.0], 2);
        let s = solve_weights(&g, &UncertaintySet::FullSimplex).unwrap();
        assert!((s.q.weights()[0] - 0.5).abs() < 1e-12);
        assert!((s.objective - 0.5).abs() < 1e-12);
    }

    #[test]
    fn solve_diagonal_weighting() {
        // diag(1,4): stationarity 2q - 8(1-q) = 0 => q = 0.8.
        let g = gm(&[1.0, 0.0, 0.0, 4.0], 2);
        let s = solve_weights(&g, &UncertaintySet::FullSimplex).unwrap();
        assert!((s.q.weights()[0] - 0.8).abs() < 1e-10, "{:?}", s.q);
        assert!((s.objective - 0.8).abs() < 1e-10);
        // Grid-search verification at resolution 1e-3.
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=1000 {
            let q1 = i as f64 / 1000.0;
            let obj = q1 * q1 + 4.0 * (1.0 - q1) * (1.0 - q1);
            if obj < best.0 {
                best = (obj, q1);
            }
        }
        assert!((best.1 - s.q.weights()[0]).abs() < 1e-3);
    }

    #[test]
    fn solve_boundary_solution() {
        // [[1,2],[2,5]]: unconstrained line minimizer at q1 = 1.5 -> clipped to 1.
        let g = gm(&[1.0, 2.0, 2.0, 5.0], 2);
        let s = solve_weights(&g, &UncertaintySet::FullSimplex).unwrap();
        assert!((s.q.weights()[0] - 1.0).abs() < 1e-12);
        assert_eq!(s.active_set, vec![0]);
    }

    #[test]
    fn pgd_matches_closed_form_on_l2() {
        let mut rng = rng_for(21, "weights-test", 0);
        for _ in 0..200 {
            let b = DMatrix::from_fn(2, 2, |_, _| standard_normal(&mut rng));
            let mut m = b.transpose() * &b;
            m[(0, 0)] += 0.05;
            m[(1, 1)] += 0.05;
            let g = GammaMatrix::from_upper(m.clone(), Provenance::Plugin).unwrap();
            let closed = solve_weights(&g, &UncertaintySet::FullSimplex).unwrap();
            let pgd = solve_weights_pgd(&g, &UncertaintySet::FullSimplex).unwrap();
            // Keep only instances with non-negligible curvature along the line.
            let c = m[(0, 0)] + m[(1, 1)] - 2.0 * m[(0, 1)];
            if c > 1e-3 {
                assert!(
                    (closed.q.weights()[0] - pgd.q.weights()[0]).abs() < 1e-6,
                    "closed {:?} vs pgd {:?} (curvature {c})",
                    closed.q,
                    pgd.q
                );
            }
        }
    }

    #[test]
    fn degenerate_denominator_resolves_to_half() {
        let g = gm(&[1.0, 1.0, 1.0, 1.0], 2);
        let s = solve_weights(&g, &UncertaintySet::FullSimplex).unwrap();
        assert_eq!(s.q.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn indefinite_gamma_rejected_with_repair_hint() {
        let g = gm(&[1.0, 2.0, 2.0, 1.0], 2);
        let err = solve_weights(&g, &UncertaintySet::FullSimplex).unwrap_err();
        assert!(err.to_string().contains("psd_repair"), "{err}");
        let repaired = crate::gamma::psd_repair(&g, 0.0);
        assert!(solve_weights(&repaired, &UncertaintySet::FullSimplex).is_ok());
    }

    #[test]
    fn singleton_returns_its_point() {
        let g = gm(&[5.0, 0.0, 0.0, 1.0], 2);
        let h = UncertaintySet::Singleton {
            q: MixtureSpec::new(vec![0.25, 0.75]).unwrap(),
        };
        let s = solve_weights(&g, &h).unwrap();
        assert_eq!(s.q.weights(), &[0.25, 0.75]);
    }

    #[test]
    fn kkt_holds_at_solutions() {
        let mut rng = rng_for(33, "weights-test", 1);
        for l in [2usize, 3, 5] {
            for _ in 0..30 {
                let b = DMatrix::from_fn(l, l, |_, _| standard_normal(&mut rng));
                let mut m = b.transpose() * &b;
                for i in 0..l {
                    m[(i, i)] += 0.1;
                }
                let g = GammaMatrix::from_upper(m, Provenance::Plugin).unwrap();
                let s = solve_weights_pgd(&g, &UncertaintySet::FullSimplex).unwrap();
                let r = kkt_residual(&g, &s.q, &UncertaintySet::FullSimplex).unwrap();
                assert!(r < 1e-7, "KKT residual {r} at L={l}");
                // Equal gradient components on the active support.
                let grad = g.values() * DVector::from_column_slice(s.q.weights());
                let active: Vec<f64> = s.active_set.iter().map(|&i| grad[i]).collect();
                let (mn, mx) = active
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                        (a.min(v), b.max(v))
                    });
                assert!(mx - mn < 1e-6, "active gradient spread {}", mx - mn);
            }
        }
    }

    #[test]
    fn scale_equivariance_of_argmin() {
        let mut rng = rng_for(44, "weights-test", 2);
        for _ in 0..20 {
            let b = DMatrix::from_fn(3, 3, |_, _| standard_normal(&mut rng));
            let mut m = b.transpose() * &b;
            for i in 0..3 {
                m[(i, i)] += 0.1;
            }
            let g1 = GammaMatrix::from_upper(m.clone(), Provenance::Plugin).unwrap();
            let g2 = GammaMatrix::from_upper(m * 37.5, Provenance::Plugin).unwrap();
            let s1 = solve_weights(&g1, &UncertaintySet::FullSimplex).unwrap();
            let s2 = solve_weights(&g2, &UncertaintySet::FullSimplex).unwrap();
            assert!(s1.q.l2_distance(&s2.q) < 1e-8);
        }
    }

    #[test]
    fn weight_stability_bound_holds() {
        // ||qhat - q*|| <= min(L ||Ghat - G||_inf / lambda_min(G), rho_H) on
        // random PSD pairs, for the full simplex and for centered balls.
        let mut rng = rng_for(55, "weights-test", 3);
        for trial in 0..200 {
            let l = 2 + (trial % 2);
            let b = DMatrix::from_fn(l, l, |_, _| standard_normal(&mut rng));
            let mut m = b.transpose() * &b;
            for i in 0..l {
                m[(i, i)] += 0.3;
            }
            let mut pert = m.clone();
            for i in 0..l {
                for j in i..l {
                    let e = 0.05 * standard_normal(&mut rng);
                    pert[(i, j)] += e;
                    pert[(j, i)] = pert[(i, j)];
                }
            }
            let g = GammaMatrix::from_upper(m.clone(), Provenance::Plugin).unwrap();
            let (lam_min, _) = g.eigen_range();
            if lam_min < 0.05 {
                continue;
            }
            let gp = crate::gamma::psd_repair(
                &GammaMatrix::from_upper(pert.clone(), Provenance::Plugin).unwrap(),
                0.0,
            );
            // Inradius-bounded ball so the diameter 2r is exact.
            let inradius = 1.0 / ((l * (l - 1)) as f64).sqrt();
            let h_sets = [
                UncertaintySet::FullSimplex,
                UncertaintySet::L2Ball {
                    center: MixtureSpec::uniform(l),
                    rho: 0.8 * inradius,
                    scaled: false,
                },
            ];
            for h in &h_sets {
                let q_star = solve_weights(&g, h).unwrap().q;
                let q_hat = solve_weights(&gp, h).unwrap().q;
                let diff = (&pert - &m).amax();
                let bound = (l as f64 * diff / lam_min).min(h.diameter(l));
                let dist = q_star.l2_distance(&q_hat);
                assert!(
                    dist <= bound + 1e-7,
                    "||qhat-q*|| = {dist} > bound {bound} (h = {h:?})"
                );
            }
        }
    }

    #[test]
    fn oracle_flat_for_identical_models() {
        let support = DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let masses = [1.0, 1.0, 1.0];
        let f = |row: &[f64]| row[0] * 2.0;
        let models: Vec<&dyn Fn(&[f64]) -> f64> = vec![&f, &f];
        let q = minimax_oracle(&models, &support, &masses, &UncertaintySet::FullSimplex, 0.05)
            .unwrap();
        // Any q is optimal; the oracle must still return a simplex point.
        assert!((q.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_orthogonal_equal_norm_models_balance() {
        // Two orthogonal equal-norm models on a two-point support.
        let support = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let masses = [0.5, 0.5];
        let f1 = |row: &[f64]| row[0];
        let f2 = |row: &[f64]| row[1];
        let models: Vec<&dyn Fn(&[f64]) -> f64> = vec![&f1, &f2];
        let q = minimax_oracle(&models, &support, &masses, &UncertaintySet::FullSimplex, 0.01)
            .unwrap();
        assert!((q.weights()[0] - 0.5).abs() <= 0.01 + 1e-12, "{q:?}");
    }

    #[test]
    fn oracle_agrees_with_solver_on_diagonal_instance() {
        // Realize Gamma = diag(1, 4) on a discrete support: orthogonal models
        // with norms 1 and 2.
        let support = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let masses = [0.5, 0.5];
        let f1 = |row: &[f64]| row[0] * 2f64.sqrt();
        let f2 = |row: &[f64]| row[1] * 8f64.sqrt();
        let models: Vec<&dyn Fn(&[f64]) -> f64> = vec![&f1, &f2];
        let q = minimax_oracle(&models, &support, &masses, &UncertaintySet::FullSimplex, 0.01)
            .unwrap();
        let g = gm(&[1.0, 0.0, 0.0, 4.0], 2);
        let s = solve_weights(&g, &UncertaintySet::FullSimplex).unwrap();
        assert!(
            (q.weights()[0] - s.q.weights()[0]).abs() <= 0.01 + 1e-9,
            "oracle {:?} vs solver {:?}",
            q,
            s.q
        );
    }

    proptest! {
        #[test]
        fn projection_always_lands_on_simplex(v in proptest::collection::vec(-10.0f64..10.0, 1..8)) {
            let p = project_simplex(&v);
            let sum: f64 = p.weights().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(p.weights().iter().all(|&w| w >= 0.0));
        }

        #[test]
        fn projection_is_idempotent(v in proptest::collection::vec(-5.0f64..5.0, 2..6)) {
            let p1 = project_simplex(&v);
            let p2 = project_simplex(p1.weights());
            for (a, b) in p1.weights().iter().zip(p2.weights()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
