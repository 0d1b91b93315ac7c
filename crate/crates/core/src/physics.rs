//! Per-particle SPH right-hand sides.
//!
//! Evaluation order per step: density -> equation of state -> grad-h factor
//! and IAD coefficients -> momentum and energy rates. Each pass is
//! data-parallel over the particle index and reads neighbor data only, so
//! passes are separated by barriers and results do not depend on the worker
//! count.
//!
//! The gradient coefficient of a pair `(a, b)` seen from `a` is
//! `A_ab(h_a) = C(a) (x_b - x_a) W_ab(h_a)` with `C` the inverse of the
//! particle's second-moment matrix; it takes the place of the plain kernel
//! gradient and reproduces linear fields exactly. Particles whose moment
//! matrix is too ill-conditioned to invert fall back to the plain kernel
//! gradient, which has the same orientation.
//!
//! The pair loops hoist every per-particle reciprocal out of the loop and
//! index through the neighbor lists unchecked; list entries are produced by
//! the neighbor search over these same arrays.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{Kernel, ShapeEval};
use crate::octree::PeriodicZ;
use crate::particles::ParticleSystem;

/// Linear weakly-compressible equation of state.
#[derive(Debug, Clone, Copy)]
pub struct EosConfig {
    /// Reference density [g/cm^3].
    pub rho0: f64,
    /// Constant sound speed [cm/s].
    pub c0: f64,
}

impl EosConfig {
    pub fn new(rho0: f64, c0: f64) -> Result<Self> {
        if !(rho0 > 0.0) || !(c0 > 0.0) {
            return Err(Error::Config(format!(
                "EOS needs rho0 > 0 and c0 > 0, got {rho0}, {c0}"
            )));
        }
        Ok(Self { rho0, c0 })
    }

    /// `P = c0^2 (rho - rho0)`; negative pressure is physical here.
    #[inline]
    pub fn pressure(&self, rho: f64) -> f64 {
        self.c0 * self.c0 * (rho - self.rho0)
    }
}

/// Artificial-viscosity strength.
#[derive(Debug, Clone, Copy)]
pub struct AvConfig {
    pub alpha: f64,
}

impl Default for AvConfig {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

/// Counters reported by the physics passes.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassStats {
    /// Grad-h factors clamped at the lower bound.
    pub omega_clamped: u64,
    /// Particles whose moment matrix fell back to plain kernel gradients.
    pub iad_fallbacks: u64,
    /// Coincident pairs skipped in the momentum/energy pass.
    pub skipped_pairs: u64,
}

/// Grad-h factors below this are clamped (guards the `1/Omega` divisions).
pub const OMEGA_FLOOR: f64 = 0.1;

/// Moment matrices with a Frobenius condition estimate above this fall back
/// to plain kernel gradients.
pub const IAD_CONDITION_LIMIT: f64 = 1e12;

/// Harmonic-mean pair density, `rho_ab^-1 = 2 (rho_a + rho_b)^-1`. Not
/// referenced by the force or energy terms; kept as a helper for alternative
/// viscosity forms.
#[inline]
pub fn rho_ab_harmonic(rho_a: f64, rho_b: f64) -> f64 {
    0.5 * (rho_a + rho_b)
}

/// Pairwise signal-velocity estimate `v_sig = c_a + c_b - 3 w_ab`.
#[inline]
pub fn signal_velocity(c_a: f64, c_b: f64, w_ab: f64) -> f64 {
    c_a + c_b - 3.0 * w_ab
}

/// Viscous dissipation factor: `-alpha/2 * v_sig * w_ab` for approaching
/// pairs (`w_ab < 0`), zero otherwise. Non-negative by construction.
#[inline]
pub fn av_dissipation(alpha: f64, v_sig: f64, w_ab: f64) -> f64 {
    if w_ab < 0.0 {
        -0.5 * alpha * v_sig * w_ab
    } else {
        0.0
    }
}

#[inline]
fn min_image_dz(dz: f64, pz: Option<PeriodicZ>) -> f64 {
    match pz {
        Some(p) => p.min_image(dz),
        None => dz,
    }
}

#[inline]
unsafe fn at(s: &[f64], i: usize) -> f64 {
    debug_assert!(i < s.len());
    *s.get_unchecked(i)
}

/// Density summation `rho_a = sum_b m_b W_ab(h_a)` with `b` ranging over the
/// neighbors plus the particle itself.
pub fn compute_density(
    sys: &mut ParticleSystem,
    kern: &Kernel,
    pz: Option<PeriodicZ>,
    owned: usize,
) -> Result<()> {
    let rho = match kern.table() {
        Some(t) => density_impl(sys, kern.b_n(), t, pz, owned),
        None => density_impl(sys, kern.b_n(), kern.sinc(), pz, owned),
    };
    for (i, r) in rho.iter().enumerate() {
        if !(*r > 0.0) || !r.is_finite() {
            return Err(Error::NonPositiveDensity { index: i, rho: *r });
        }
    }
    sys.rho[..owned].copy_from_slice(&rho);
    Ok(())
}

fn density_impl<S: ShapeEval>(
    sys: &ParticleSystem,
    b_n: f64,
    shape: &S,
    pz: Option<PeriodicZ>,
    owned: usize,
) -> Vec<f64> {
    let (x, y, z, h, m) = (&sys.x[..], &sys.y[..], &sys.z[..], &sys.h[..], &sys.m[..]);
    (0..owned)
        .into_par_iter()
        .map(|i| {
            let h_i = h[i];
            let inv_h = 1.0 / h_i;
            let scale = b_n / (h_i * h_i * h_i);
            let (xi, yi, zi) = (x[i], y[i], z[i]);
            // Self contribution: shape(0) = 1.
            let mut acc = m[i];
            for &j in sys.neighbors.of(i) {
                let j = j as usize;
                // SAFETY: neighbor indices are built over these arrays.
                unsafe {
                    let dx = at(x, j) - xi;
                    let dy = at(y, j) - yi;
                    let dz = min_image_dz(at(z, j) - zi, pz);
                    let r = (dx * dx + dy * dy + dz * dz).sqrt();
                    acc += at(m, j) * shape.shape(r * inv_h);
                }
            }
            acc * scale
        })
        .collect()
}

/// Equation of state: fills `p` and `c` from `rho`.
pub fn apply_eos(sys: &mut ParticleSystem, eos: &EosConfig, owned: usize) {
    let (p, c, rho) = (&mut sys.p, &mut sys.c, &sys.rho);
    p[..owned]
        .par_iter_mut()
        .zip(c[..owned].par_iter_mut())
        .zip(rho[..owned].par_iter())
        .for_each(|((p_i, c_i), &rho_i)| {
            *p_i = eos.c0 * eos.c0 * (rho_i - eos.rho0);
            *c_i = eos.c0;
        });
}

/// Grad-h correction `Omega_a = 1 + h_a/(3 rho_a) sum_b m_b dW_ab(h_a)/dh`
/// (self term included). Values at or below [`OMEGA_FLOOR`] are clamped and
/// counted.
pub fn compute_omega(
    sys: &mut ParticleSystem,
    kern: &Kernel,
    pz: Option<PeriodicZ>,
    owned: usize,
) -> PassStats {
    compute_omega_iad_inner(sys, kern, pz, owned, true, false)
}

/// Per-particle IAD coefficients: invert the second-moment matrix
/// `tau_ij = sum_b (m_b / rho_b) dx_i dx_j W_ab(h_a)` and store the six
/// unique entries of `C = tau^-1`. Ill-conditioned matrices (Frobenius
/// condition estimate beyond [`IAD_CONDITION_LIMIT`]) are flagged for the
/// plain-gradient fallback.
pub fn compute_iad(
    sys: &mut ParticleSystem,
    kern: &Kernel,
    pz: Option<PeriodicZ>,
    owned: usize,
) -> PassStats {
    compute_omega_iad_inner(sys, kern, pz, owned, false, true)
}

/// Fused grad-h + IAD pass; one sweep over the pair lists serves both.
pub fn compute_omega_iad(
    sys: &mut ParticleSystem,
    kern: &Kernel,
    pz: Option<PeriodicZ>,
    owned: usize,
) -> PassStats {
    compute_omega_iad_inner(sys, kern, pz, owned, true, true)
}

struct OmegaIadRow {
    omega: f64,
    c: [f64; 6],
    fallback: bool,
}

fn compute_omega_iad_inner(
    sys: &mut ParticleSystem,
    kern: &Kernel,
    pz: Option<PeriodicZ>,
    owned: usize,
    do_omega: bool,
    do_iad: bool,
) -> PassStats {
    let rows = match kern.table() {
        Some(t) => omega_iad_impl(sys, kern.b_n(), t, pz, owned),
        None => omega_iad_impl(sys, kern.b_n(), kern.sinc(), pz, owned),
    };
    let mut stats = PassStats::default();
    for (i, row) in rows.iter().enumerate() {
        if do_omega {
            if row.omega <= OMEGA_FLOOR {
                sys.omega[i] = OMEGA_FLOOR;
                stats.omega_clamped += 1;
            } else {
                sys.omega[i] = row.omega;
            }
        }
        if do_iad {
            sys.c11[i] = row.c[0];
            sys.c12[i] = row.c[1];
            sys.c13[i] = row.c[2];
            sys.c22[i] = row.c[3];
            sys.c23[i] = row.c[4];
            sys.c33[i] = row.c[5];
            sys.iad_fallback[i] = row.fallback as u8;
            if row.fallback {
                stats.iad_fallbacks += 1;
            }
        }
    }
    stats
}

fn omega_iad_impl<S: ShapeEval>(
    sys: &ParticleSystem,
    b_n: f64,
    shape: &S,
    pz: Option<PeriodicZ>,
    owned: usize,
) -> Vec<OmegaIadRow> {
    let n_local = sys.len();
    // Neighbor volumes, hoisted so the pair loop divides nothing.
    let vol: Vec<f64> = (0..n_local).map(|j| sys.m[j] / sys.rho[j]).collect();
    let (x, y, z, h, m) = (&sys.x[..], &sys.y[..], &sys.z[..], &sys.h[..], &sys.m[..]);
    (0..owned)
        .into_par_iter()
        .map(|i| {
            let h_i = h[i];
            let inv_h = 1.0 / h_i;
            let wscale = b_n / (h_i * h_i * h_i);
            let (xi, yi, zi) = (x[i], y[i], z[i]);
            // Self term of the dW/dh sum: -(3 W(0))/h = -wscale/h * 3 m_i.
            let mut s_om = 3.0 * m[i];
            let (mut t11, mut t12, mut t13, mut t22, mut t23, mut t33) =
                (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for &j in sys.neighbors.of(i) {
                let j = j as usize;
                // SAFETY: neighbor indices are built over these arrays.
                unsafe {
                    let dx = at(x, j) - xi;
                    let dy = at(y, j) - yi;
                    let dz = min_image_dz(at(z, j) - zi, pz);
                    let r = (dx * dx + dy * dy + dz * dz).sqrt();
                    let v = r * inv_h;
                    let s = shape.shape(v);
                    let ds = shape.shape_deriv(v);
                    s_om += at(m, j) * (3.0 * s + v * ds);
                    let wv = at(&vol, j) * s;
                    t11 += wv * dx * dx;
                    t12 += wv * dx * dy;
                    t13 += wv * dx * dz;
                    t22 += wv * dy * dy;
                    t23 += wv * dy * dz;
                    t33 += wv * dz * dz;
                }
            }
            // Omega = 1 + h/(3 rho) * sum m dW/dh, with
            // dW/dh = -(3 W + v dW/dv)/h = -(wscale/h)(3 s + v ds).
            let omega = 1.0 + h_i / (3.0 * sys.rho[i]) * (-wscale * inv_h * s_om);
            let inv = invert_sym3([
                t11 * wscale,
                t12 * wscale,
                t13 * wscale,
                t22 * wscale,
                t23 * wscale,
                t33 * wscale,
            ]);
            OmegaIadRow {
                omega,
                c: inv.0,
                fallback: inv.1,
            }
        })
        .collect()
}

/// Inverse of a symmetric 3x3 matrix `[t11 t12 t13 t22 t23 t33]` via the
/// adjugate, with a Frobenius condition estimate as the singularity gate.
fn invert_sym3(t: [f64; 6]) -> ([f64; 6], bool) {
    let [t11, t12, t13, t22, t23, t33] = t;
    let det = t11 * (t22 * t33 - t23 * t23) - t12 * (t12 * t33 - t23 * t13)
        + t13 * (t12 * t23 - t22 * t13);
    if det == 0.0 || !det.is_finite() {
        return ([0.0; 6], true);
    }
    let inv_det = 1.0 / det;
    let c11 = (t22 * t33 - t23 * t23) * inv_det;
    let c12 = (t13 * t23 - t12 * t33) * inv_det;
    let c13 = (t12 * t23 - t13 * t22) * inv_det;
    let c22 = (t11 * t33 - t13 * t13) * inv_det;
    let c23 = (t12 * t13 - t11 * t23) * inv_det;
    let c33 = (t11 * t22 - t12 * t12) * inv_det;
    let norm = |m: [f64; 6]| {
        // Off-diagonal entries appear twice in the full matrix.
        (m[0] * m[0] + m[3] * m[3] + m[5] * m[5] + 2.0 * (m[1] * m[1] + m[2] * m[2] + m[4] * m[4]))
            .sqrt()
    };
    let cond = norm(t) * norm([c11, c12, c13, c22, c23, c33]);
    if !cond.is_finite() || cond > IAD_CONDITION_LIMIT {
        return ([0.0; 6], true);
    }
    ([c11, c12, c13, c22, c23, c33], false)
}

struct MomentumRow {
    ax: f64,
    ay: f64,
    az: f64,
    dudt: f64,
    vsig: f64,
    skipped: u64,
}

/// Momentum and energy rates with artificial viscosity.
///
/// For every pair, `i`'s acceleration receives the symmetrized pressure
/// term and the viscous term; the energy rate receives the matching
/// compression work plus half the pairwise viscous dissipation, so that the
/// total of `m (du/dt + v . dv/dt)` cancels pairwise. Coincident pairs are
/// skipped and counted. The previous accelerations are saved for the
/// integrator before being overwritten.
pub fn compute_momentum_energy(
    sys: &mut ParticleSystem,
    kern: &Kernel,
    av: &AvConfig,
    pz: Option<PeriodicZ>,
    owned: usize,
) -> PassStats {
    sys.ax_prev.copy_from_slice(&sys.ax);
    sys.ay_prev.copy_from_slice(&sys.ay);
    sys.az_prev.copy_from_slice(&sys.az);

    let rows = match kern.table() {
        Some(t) => momentum_impl(sys, kern.b_n(), t, av.alpha, pz, owned),
        None => momentum_impl(sys, kern.b_n(), kern.sinc(), av.alpha, pz, owned),
    };
    let mut stats = PassStats::default();
    for (i, row) in rows.iter().enumerate() {
        sys.ax[i] = row.ax;
        sys.ay[i] = row.ay;
        sys.az[i] = row.az;
        sys.dudt[i] = row.dudt;
        sys.vsig_max[i] = row.vsig;
        stats.skipped_pairs += row.skipped;
    }
    stats
}

fn momentum_impl<S: ShapeEval>(
    sys: &ParticleSystem,
    b_n: f64,
    shape: &S,
    alpha: f64,
    pz: Option<PeriodicZ>,
    owned: usize,
) -> Vec<MomentumRow> {
    let n_local = sys.len();
    // Per-particle coefficients hoisted out of the pair loop.
    let mut inv_h = vec![0.0; n_local];
    let mut wscale = vec![0.0; n_local];
    let mut pcoef = vec![0.0; n_local];
    let mut inv_rho = vec![0.0; n_local];
    for j in 0..n_local {
        let h_j = sys.h[j];
        inv_h[j] = 1.0 / h_j;
        wscale[j] = b_n / (h_j * h_j * h_j);
        pcoef[j] = sys.p[j] / (sys.omega[j] * sys.rho[j] * sys.rho[j]);
        inv_rho[j] = 1.0 / sys.rho[j];
    }
    let (x, y, z) = (&sys.x[..], &sys.y[..], &sys.z[..]);
    let (vx, vy, vz) = (&sys.vx[..], &sys.vy[..], &sys.vz[..]);
    let (m, c) = (&sys.m[..], &sys.c[..]);
    let (c11, c12, c13) = (&sys.c11[..], &sys.c12[..], &sys.c13[..]);
    let (c22, c23, c33) = (&sys.c22[..], &sys.c23[..], &sys.c33[..]);
    let fb = &sys.iad_fallback[..];
    let half_alpha = 0.5 * alpha;

    (0..owned)
        .into_par_iter()
        .map(|i| {
            let (xi, yi, zi) = (x[i], y[i], z[i]);
            let (vxi, vyi, vzi) = (vx[i], vy[i], vz[i]);
            let (ih_i, ws_i, pc_i, ir_i, c_i) = (inv_h[i], wscale[i], pcoef[i], inv_rho[i], c[i]);
            let (m11, m12, m13, m22, m23, m33) = (c11[i], c12[i], c13[i], c22[i], c23[i], c33[i]);
            let fb_i = fb[i] != 0;
            let (mut ax, mut ay, mut az, mut dudt) = (0.0, 0.0, 0.0, 0.0);
            // Degenerate signal velocity of an isolated particle.
            let mut vsig_max = 2.0 * c_i;
            let mut skipped = 0u64;
            for &j in sys.neighbors.of(i) {
                let j = j as usize;
                // SAFETY: neighbor indices are built over these arrays.
                unsafe {
                    let dx = at(x, j) - xi;
                    let dy = at(y, j) - yi;
                    let dz = min_image_dz(at(z, j) - zi, pz);
                    let r2 = dx * dx + dy * dy + dz * dz;
                    if r2 == 0.0 {
                        skipped += 1;
                        continue;
                    }
                    let r = r2.sqrt();
                    let inv_r = 1.0 / r;

                    // Side a: coefficient with h_i and i's matrix mode.
                    let v_i = r * ih_i;
                    let (a_ax, a_ay, a_az) = if !fb_i {
                        let w_i = shape.shape(v_i) * ws_i;
                        (
                            (m11 * dx + m12 * dy + m13 * dz) * w_i,
                            (m12 * dx + m22 * dy + m23 * dz) * w_i,
                            (m13 * dx + m23 * dy + m33 * dz) * w_i,
                        )
                    } else {
                        let g = -shape.shape_deriv(v_i) * ws_i * ih_i * inv_r;
                        (dx * g, dy * g, dz * g)
                    };

                    // Side b: coefficient with h_j and j's matrix mode.
                    let ih_j = at(&inv_h, j);
                    let v_j = r * ih_j;
                    let (b_ax, b_ay, b_az) = if *fb.get_unchecked(j) == 0 {
                        let w_j = shape.shape(v_j) * at(&wscale, j);
                        (
                            (at(c11, j) * dx + at(c12, j) * dy + at(c13, j) * dz) * w_j,
                            (at(c12, j) * dx + at(c22, j) * dy + at(c23, j) * dz) * w_j,
                            (at(c13, j) * dx + at(c23, j) * dy + at(c33, j) * dz) * w_j,
                        )
                    } else {
                        let g = -shape.shape_deriv(v_j) * at(&wscale, j) * ih_j * inv_r;
                        (dx * g, dy * g, dz * g)
                    };

                    let dvx = vxi - at(vx, j);
                    let dvy = vyi - at(vy, j);
                    let dvz = vzi - at(vz, j);
                    // x_ab = x_i - x_j = -(dx, dy, dz).
                    let w_ab = -(dvx * dx + dvy * dy + dvz * dz) * inv_r;
                    let v_sig = c_i + at(c, j) - 3.0 * w_ab;
                    if v_sig > vsig_max {
                        vsig_max = v_sig;
                    }
                    let pi_ab = if w_ab < 0.0 {
                        -half_alpha * v_sig * w_ab
                    } else {
                        0.0
                    };

                    let ir_j = at(&inv_rho, j);
                    let sx = a_ax * ir_i + b_ax * ir_j;
                    let sy = a_ay * ir_i + b_ay * ir_j;
                    let sz = a_az * ir_i + b_az * ir_j;

                    let m_j = at(m, j);
                    let pc_j = at(&pcoef, j);
                    ax -= m_j * (pc_i * a_ax + pc_j * b_ax + 0.5 * pi_ab * sx);
                    ay -= m_j * (pc_i * a_ay + pc_j * b_ay + 0.5 * pi_ab * sy);
                    az -= m_j * (pc_i * a_az + pc_j * b_az + 0.5 * pi_ab * sz);

                    let vdot_a = dvx * a_ax + dvy * a_ay + dvz * a_az;
                    let vdot_s = dvx * sx + dvy * sy + dvz * sz;
                    dudt += m_j * (pc_i * vdot_a + 0.25 * pi_ab * vdot_s);
                }
            }
            MomentumRow {
                ax,
                ay,
                az,
                dudt,
                vsig: vsig_max,
                skipped,
            }
        })
        .collect()
}

/// Default Courant factor.
pub const COURANT_DEFAULT: f64 = 0.3;

/// Steps may grow by at most this factor over the previous one.
pub const DT_GROWTH_CAP: f64 = 1.1;

/// Rank-local part of the time-step bound: `min_a C h_a / vsig_max_a`.
pub fn raw_timestep_bound(sys: &ParticleSystem, owned: usize, courant: f64) -> f64 {
    let mut dt = f64::INFINITY;
    for i in 0..owned {
        dt = dt.min(courant * sys.h[i] / sys.vsig_max[i]);
    }
    dt
}

/// Apply the growth cap against the previous step and validate.
pub fn finalize_timestep(raw_min: f64, prev: Option<f64>) -> Result<f64> {
    let dt = match prev {
        Some(p) if p > 0.0 => raw_min.min(DT_GROWTH_CAP * p),
        _ => raw_min,
    };
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::NonFiniteTimestep { dt });
    }
    Ok(dt)
}

/// Single-system convenience: time-step bound with cap and validation.
pub fn compute_timestep(
    sys: &ParticleSystem,
    owned: usize,
    courant: f64,
    prev: Option<f64>,
) -> Result<f64> {
    finalize_timestep(raw_timestep_bound(sys, owned, courant), prev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Kernel;
    use crate::particles::ParticleSystem;

    fn kern() -> Kernel {
        Kernel::new(6.0, false).unwrap()
    }

    fn pair_delta(
        sys: &ParticleSystem,
        i: usize,
        j: usize,
        pz: Option<PeriodicZ>,
    ) -> (f64, f64, f64) {
        let dx = sys.x[j] - sys.x[i];
        let dy = sys.y[j] - sys.y[i];
        let dz = min_image_dz(sys.z[j] - sys.z[i], pz);
        (dx, dy, dz)
    }

    /// Brute-force symmetric neighbor lists (radius 2 h_i per particle).
    fn fill_neighbors(sys: &mut ParticleSystem, pz: Option<PeriodicZ>) {
        let n = sys.len();
        for i in 0..n {
            let mut list = Vec::new();
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (dx, dy, dz) = pair_delta(sys, i, j, pz);
                if (dx * dx + dy * dy + dz * dz).sqrt() < 2.0 * sys.h[i] {
                    list.push(j as u32);
                }
            }
            sys.neighbors.set(i, &list);
        }
    }

    /// Uniform lattice block, spacing 1, given h.
    fn block(side: usize, h: f64) -> ParticleSystem {
        let n = side * side * side;
        let mut s = ParticleSystem::with_len(n, 1024);
        let mut k = 0;
        for i in 0..side {
            for j in 0..side {
                for l in 0..side {
                    s.x[k] = i as f64;
                    s.y[k] = j as f64;
                    s.z[k] = l as f64;
                    s.h[k] = h;
                    s.m[k] = 1.0;
                    k += 1;
                }
            }
        }
        s
    }

    #[test]
    fn density_of_isolated_particle_is_self_term() {
        let k = kern();
        let mut s = ParticleSystem::with_len(1, 8);
        s.m[0] = 2.5;
        s.h[0] = 0.7;
        compute_density(&mut s, &k, None, 1).unwrap();
        let expect = 2.5 * k.b_n() / (0.7f64 * 0.7 * 0.7);
        assert!((s.rho[0] - expect).abs() < 1e-14 * expect);
    }

    #[test]
    fn density_of_identical_pair() {
        let k = kern();
        let mut s = ParticleSystem::with_len(2, 8);
        let (m, h, d) = (1.3, 1.0, 1.1);
        for i in 0..2 {
            s.m[i] = m;
            s.h[i] = h;
        }
        s.x[1] = d;
        fill_neighbors(&mut s, None);
        compute_density(&mut s, &k, None, 2).unwrap();
        let expect = m * (k.w(0.0, h) + k.w(d / h, h));
        for i in 0..2 {
            assert!((s.rho[i] - expect).abs() < 1e-14 * expect);
        }
    }

    #[test]
    fn eos_examples() {
        let eos = EosConfig::new(1.0, 20.0).unwrap();
        assert_eq!(eos.pressure(1.0), 0.0);
        let p = eos.pressure(1.01);
        assert!((p - 0.01 * 400.0).abs() < 1e-12);
        // Affine in rho across a sweep.
        let p1 = eos.pressure(1.1);
        let p2 = eos.pressure(1.2);
        let p3 = eos.pressure(1.3);
        assert!((p3 - p2 - (p2 - p1)).abs() < 1e-12);
    }

    #[test]
    fn omega_isolated_particle_clamps_to_floor() {
        // Closed form: Omega = 1 + (h / 3 rho) m dW(0,h)/dh = 1 - 1 = 0.
        let k = kern();
        let mut s = ParticleSystem::with_len(1, 8);
        s.m[0] = 1.0;
        s.h[0] = 1.0;
        compute_density(&mut s, &k, None, 1).unwrap();
        let stats = compute_omega(&mut s, &k, None, 1);
        assert_eq!(s.omega[0], OMEGA_FLOOR);
        assert_eq!(stats.omega_clamped, 1);
    }

    #[test]
    fn omega_near_one_inside_uniform_block() {
        let k = kern();
        let side = 11;
        let mut s = block(side, 1.6);
        fill_neighbors(&mut s, None);
        let n = s.len();
        compute_density(&mut s, &k, None, n).unwrap();
        compute_omega(&mut s, &k, None, n);
        // Center particle of the block.
        let c = side / 2;
        let center = (c * side + c) * side + c;
        assert!(
            (s.omega[center] - 1.0).abs() < 0.05,
            "Omega = {} at block center",
            s.omega[center]
        );
    }

    #[test]
    fn omega_invariant_under_mass_scaling() {
        let k = kern();
        let mut s = block(5, 1.4);
        fill_neighbors(&mut s, None);
        let n = s.len();
        compute_density(&mut s, &k, None, n).unwrap();
        compute_omega(&mut s, &k, None, n);
        let before = s.omega.clone();

        for m in s.m.iter_mut() {
            *m *= 2.0;
        }
        compute_density(&mut s, &k, None, n).unwrap();
        compute_omega(&mut s, &k, None, n);
        for i in 0..n {
            assert!((s.omega[i] - before[i]).abs() < 1e-12, "particle {i}");
        }
    }

    #[test]
    fn fused_pass_matches_separate_passes() {
        let k = kern();
        let mut s = block(6, 1.5);
        fill_neighbors(&mut s, None);
        let n = s.len();
        compute_density(&mut s, &k, None, n).unwrap();
        compute_omega(&mut s, &k, None, n);
        compute_iad(&mut s, &k, None, n);
        let omega = s.omega.clone();
        let c11 = s.c11.clone();
        compute_omega_iad(&mut s, &k, None, n);
        for i in 0..n {
            assert_eq!(s.omega[i].to_bits(), omega[i].to_bits());
            assert_eq!(s.c11[i].to_bits(), c11[i].to_bits());
        }
    }

    #[test]
    fn iad_inverse_times_moment_matrix_is_identity() {
        let k = kern();
        let mut s = block(5, 1.4);
        fill_neighbors(&mut s, None);
        let n = s.len();
        compute_density(&mut s, &k, None, n).unwrap();
        compute_iad(&mut s, &k, None, n);

        let i = (2 * 5 + 2) * 5 + 2; // center
        assert_eq!(s.iad_fallback[i], 0);
        // Recompute tau and check C tau = I.
        let (mut t11, mut t12, mut t13, mut t22, mut t23, mut t33) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for &j in s.neighbors.of(i) {
            let j = j as usize;
            let (dx, dy, dz) = pair_delta(&s, i, j, None);
            let r = (dx * dx + dy * dy + dz * dz).sqrt();
            let wv = k.w(r / s.h[i], s.h[i]) * s.m[j] / s.rho[j];
            t11 += wv * dx * dx;
            t12 += wv * dx * dy;
            t13 += wv * dx * dz;
            t22 += wv * dy * dy;
            t23 += wv * dy * dz;
            t33 += wv * dz * dz;
        }
        let c = [
            [s.c11[i], s.c12[i], s.c13[i]],
            [s.c12[i], s.c22[i], s.c23[i]],
            [s.c13[i], s.c23[i], s.c33[i]],
        ];
        let t = [[t11, t12, t13], [t12, t22, t23], [t13, t23, t33]];
        for r in 0..3 {
            for cc in 0..3 {
                let mut v = 0.0;
                for q in 0..3 {
                    v += c[r][q] * t[q][cc];
                }
                let expect = if r == cc { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-10, "({r},{cc}) = {v}");
            }
        }
    }

    #[test]
    fn iad_reproduces_linear_gradients() {
        let k = kern();
        let side = 9;
        let mut s = block(side, 1.6);
        fill_neighbors(&mut s, None);
        let n = s.len();
        compute_density(&mut s, &k, None, n).unwrap();
        compute_iad(&mut s, &k, None, n);

        let grad = [0.7, -1.3, 0.4];
        let f = |x: f64, y: f64, z: f64| grad[0] * x + grad[1] * y + grad[2] * z;
        let c = side / 2;
        let i = (c * side + c) * side + c;
        let mut est = [0.0f64; 3];
        for &j in s.neighbors.of(i) {
            let j = j as usize;
            let (dx, dy, dz) = pair_delta(&s, i, j, None);
            let r = (dx * dx + dy * dy + dz * dz).sqrt();
            let df = f(s.x[j], s.y[j], s.z[j]) - f(s.x[i], s.y[i], s.z[i]);
            let w_i = k.w(r / s.h[i], s.h[i]);
            let ax = (s.c11[i] * dx + s.c12[i] * dy + s.c13[i] * dz) * w_i;
            let ay = (s.c12[i] * dx + s.c22[i] * dy + s.c23[i] * dz) * w_i;
            let az = (s.c13[i] * dx + s.c23[i] * dy + s.c33[i] * dz) * w_i;
            let vb = s.m[j] / s.rho[j];
            est[0] += vb * df * ax;
            est[1] += vb * df * ay;
            est[2] += vb * df * az;
        }
        for a in 0..3 {
            assert!(
                (est[a] - grad[a]).abs() < 1e-3,
                "gradient component {a}: {} vs {}",
                est[a],
                grad[a]
            );
        }
    }

    #[test]
    fn coplanar_neighbors_trigger_fallback() {
        let k = kern();
        // A flat 5x5 sheet in the z = 0 plane.
        let mut s = ParticleSystem::with_len(25, 64);
        let mut idx = 0;
        for i in 0..5 {
            for j in 0..5 {
                s.x[idx] = i as f64;
                s.y[idx] = j as f64;
                s.h[idx] = 2.0;
                s.m[idx] = 1.0;
                idx += 1;
            }
        }
        fill_neighbors(&mut s, None);
        compute_density(&mut s, &k, None, 25).unwrap();
        let stats = compute_iad(&mut s, &k, None, 25);
        assert_eq!(stats.iad_fallbacks, 25);
        assert_eq!(s.iad_fallback[12], 1);
    }

    fn prep_forces(s: &mut ParticleSystem, uniform_p: f64) {
        let k = kern();
        fill_neighbors(s, None);
        let n = s.len();
        compute_density(s, &k, None, n).unwrap();
        compute_omega_iad(s, &k, None, n);
        for i in 0..n {
            s.p[i] = uniform_p;
            s.c[i] = 10.0;
        }
    }

    #[test]
    fn uniform_lattice_at_rest_is_in_equilibrium() {
        let k = kern();
        let mut s = block(9, 1.6);
        prep_forces(&mut s, 3.5);
        let n = s.len();
        compute_momentum_energy(&mut s, &k, &AvConfig::default(), None, n);
        // Interior particle: symmetric stencil, uniform pressure.
        let c = 4;
        let i = (c * 9 + c) * 9 + c;
        let scale = 3.5 / s.rho[i] / s.h[i]; // P / (rho h): typical term size
        for (a, name) in [(s.ax[i], "ax"), (s.ay[i], "ay"), (s.az[i], "az")] {
            assert!(a.abs() < 1e-10 * scale, "{name} = {a}");
        }
        assert!(
            s.dudt[i].abs() < 1e-10 * scale * 10.0,
            "dudt = {}",
            s.dudt[i]
        );
    }

    #[test]
    fn receding_pair_has_no_viscosity() {
        let k = kern();
        let mut s = ParticleSystem::with_len(2, 8);
        for i in 0..2 {
            s.m[i] = 1.0;
            s.h[i] = 1.0;
        }
        s.x[1] = 1.0;
        s.vx[0] = -1.0; // moving apart
        s.vx[1] = 1.0;
        prep_forces(&mut s, 0.0);
        compute_momentum_energy(&mut s, &k, &AvConfig { alpha: 1.0 }, None, 2);
        // Zero pressure and zero viscosity: nothing accelerates.
        assert_eq!(s.ax[0], 0.0);
        assert_eq!(s.ax[1], 0.0);
        assert_eq!(s.dudt[0], 0.0);
    }

    #[test]
    fn approaching_pair_signal_velocity_and_dissipation() {
        // Head-on speed s: w_ab = -s, v_sig = 2c + 3s, Pi' = (alpha/2) v_sig s.
        let (c, speed, alpha) = (10.0, 2.0, 1.0);
        let w_ab = -speed;
        let v_sig = signal_velocity(c, c, w_ab);
        assert_eq!(v_sig, 2.0 * c + 3.0 * speed);
        let pi = av_dissipation(alpha, v_sig, w_ab);
        assert_eq!(pi, 0.5 * alpha * v_sig * speed);
        assert_eq!(av_dissipation(alpha, v_sig, speed), 0.0);
    }

    #[test]
    fn approaching_pair_decelerates_and_heats() {
        let k = kern();
        let mut s = block(7, 1.6);
        let n = s.len();
        // Uniform compression towards the block center.
        let c = 3.0;
        for i in 0..n {
            s.vx[i] = -(s.x[i] - c) * 0.1;
            s.vy[i] = -(s.y[i] - c) * 0.1;
            s.vz[i] = -(s.z[i] - c) * 0.1;
        }
        prep_forces(&mut s, 0.0);
        compute_momentum_energy(&mut s, &k, &AvConfig::default(), None, n);
        let i = (3 * 7 + 3) * 7 + 3;
        // Pure viscosity: interior particle heats, total AV heating positive.
        assert!(s.dudt[i] > 0.0);
        let total: f64 = (0..n).map(|q| s.m[q] * s.dudt[q]).sum();
        assert!(total > 0.0);
    }

    #[test]
    fn av_heating_is_nonnegative_on_random_states() {
        use rand::Rng;
        use rand::SeedableRng;
        let k = kern();
        for seed in [1u64, 2, 3, 4, 5] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 216;
            let mut s = ParticleSystem::with_len(n, 512);
            for i in 0..n {
                s.x[i] = rng.gen::<f64>() * 6.0;
                s.y[i] = rng.gen::<f64>() * 6.0;
                s.z[i] = rng.gen::<f64>() * 6.0;
                s.vx[i] = rng.gen::<f64>() - 0.5;
                s.vy[i] = rng.gen::<f64>() - 0.5;
                s.vz[i] = rng.gen::<f64>() - 0.5;
                s.m[i] = 1.0;
                s.h[i] = 1.1;
            }
            fill_neighbors(&mut s, None);
            compute_density(&mut s, &k, None, n).unwrap();
            compute_omega_iad(&mut s, &k, None, n);
            // Zero pressure isolates the viscous contribution.
            for i in 0..n {
                s.p[i] = 0.0;
                s.c[i] = 5.0;
            }
            compute_momentum_energy(&mut s, &k, &AvConfig::default(), None, n);
            let total: f64 = (0..n).map(|i| s.m[i] * s.dudt[i]).sum();
            assert!(total >= 0.0, "seed {seed}: viscous heating {total}");
        }
    }

    #[test]
    fn momentum_is_conserved_pairwise_with_uniform_h() {
        let k = kern();
        let mut s = block(6, 1.5);
        let n = s.len();
        // A messy but symmetric-h state: random-ish velocities and pressures.
        for i in 0..n {
            s.vx[i] = ((i * 37 % 11) as f64 - 5.0) * 0.1;
            s.vy[i] = ((i * 53 % 13) as f64 - 6.0) * 0.1;
            s.vz[i] = ((i * 71 % 7) as f64 - 3.0) * 0.1;
        }
        fill_neighbors(&mut s, None);
        compute_density(&mut s, &k, None, n).unwrap();
        compute_omega_iad(&mut s, &k, None, n);
        let eos = EosConfig::new(1.0, 10.0).unwrap();
        apply_eos(&mut s, &eos, n);
        compute_momentum_energy(&mut s, &k, &AvConfig::default(), None, n);

        let scale: f64 = (0..n)
            .map(|i| s.m[i] * (s.ax[i].abs() + s.ay[i].abs() + s.az[i].abs()))
            .sum();
        let px: f64 = (0..n).map(|i| s.m[i] * s.ax[i]).sum();
        let py: f64 = (0..n).map(|i| s.m[i] * s.ay[i]).sum();
        let pz: f64 = (0..n).map(|i| s.m[i] * s.az[i]).sum();
        assert!(px.abs() < 1e-10 * scale, "sum m ax = {px}, scale {scale}");
        assert!(py.abs() < 1e-10 * scale);
        assert!(pz.abs() < 1e-10 * scale);

        // Energy consistency: sum m (du/dt + v . a) = 0.
        let e: f64 = (0..n)
            .map(|i| {
                s.m[i] * (s.dudt[i] + s.vx[i] * s.ax[i] + s.vy[i] * s.ay[i] + s.vz[i] * s.az[i])
            })
            .sum();
        let e_scale: f64 = (0..n)
            .map(|i| s.m[i] * s.dudt[i].abs())
            .sum::<f64>()
            .max(1e-300);
        assert!(
            e.abs() < 1e-8 * e_scale.max(scale),
            "energy residual {e} vs {e_scale}"
        );
    }

    #[test]
    fn coincident_pair_is_skipped_and_counted() {
        let k = kern();
        let mut s = ParticleSystem::with_len(2, 8);
        for i in 0..2 {
            s.m[i] = 1.0;
            s.h[i] = 1.0;
            s.rho[i] = 1.0;
            s.omega[i] = 1.0;
            s.c[i] = 1.0;
        }
        s.neighbors.set(0, &[1]);
        s.neighbors.set(1, &[0]);
        let stats = compute_momentum_energy(&mut s, &k, &AvConfig::default(), None, 2);
        assert_eq!(stats.skipped_pairs, 2);
        assert_eq!(s.ax[0], 0.0);
    }

    #[test]
    fn timestep_of_static_uniform_system() {
        let k = kern();
        let mut s = block(5, 1.5);
        prep_forces(&mut s, 0.0);
        let n = s.len();
        compute_momentum_energy(&mut s, &k, &AvConfig::default(), None, n);
        let dt = compute_timestep(&s, n, 0.3, None).unwrap();
        // All pairs static: v_sig = 2c everywhere.
        let expect = 0.3 * 1.5 / (2.0 * 10.0);
        assert!((dt - expect).abs() < 1e-14, "dt = {dt}");

        // Halving h halves dt.
        for h in s.h.iter_mut() {
            *h *= 0.5;
        }
        fill_neighbors(&mut s, None);
        compute_density(&mut s, &k, None, n).unwrap();
        compute_omega_iad(&mut s, &k, None, n);
        for i in 0..n {
            s.p[i] = 0.0;
            s.c[i] = 10.0;
        }
        compute_momentum_energy(&mut s, &k, &AvConfig::default(), None, n);
        let dt2 = compute_timestep(&s, n, 0.3, None).unwrap();
        assert!((dt2 - 0.5 * expect).abs() < 1e-14, "dt2 = {dt2}");
    }

    #[test]
    fn timestep_shrinks_with_stronger_convergence() {
        let k = kern();
        let mut prev_dt = f64::INFINITY;
        for speed in [0.0, 1.0, 2.0, 4.0] {
            let mut s = block(5, 1.5);
            let n = s.len();
            let c = 2.0;
            for i in 0..n {
                s.vx[i] = -(s.x[i] - c) * speed;
                s.vy[i] = -(s.y[i] - c) * speed;
                s.vz[i] = -(s.z[i] - c) * speed;
            }
            prep_forces(&mut s, 0.0);
            compute_momentum_energy(&mut s, &k, &AvConfig::default(), None, n);
            let dt = compute_timestep(&s, n, 0.3, None).unwrap();
            assert!(dt <= prev_dt, "dt not monotone: {dt} after {prev_dt}");
            prev_dt = dt;
        }
    }

    #[test]
    fn timestep_growth_is_capped() {
        assert_eq!(finalize_timestep(10.0, Some(1.0)).unwrap(), 1.1);
        assert_eq!(finalize_timestep(0.5, Some(1.0)).unwrap(), 0.5);
        assert!(finalize_timestep(f64::INFINITY, None).is_err());
    }
}
