//! Time integration.
//!
//! Positions and velocities advance with a two-level second-order scheme:
//! the velocity kick extrapolates the acceleration with the previous step's
//! value (variable-step Adams-Bashforth weights) and the drift uses the
//! trapezoid of the old and new velocities. For constant acceleration the
//! trajectory is exact for any step sequence; the first step, having no
//! history, degenerates to an Euler kick. Internal energy advances with the
//! matching variable-step Adams-Bashforth-2 update.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::octree::PeriodicZ;
use crate::particles::ParticleSystem;

/// Variable-step AB2 weights for step ratio `r = dt / dt_prev`; `r = 0`
/// (no history) gives the Euler weights.
#[inline]
fn ab2_weights(dt: f64, dt_prev: Option<f64>) -> (f64, f64) {
    match dt_prev {
        Some(p) if p > 0.0 => {
            let r = dt / p;
            (1.0 + 0.5 * r, 0.5 * r)
        }
        _ => (1.0, 0.0),
    }
}

/// Kick-and-drift update of velocity and position; z is wrapped into the
/// periodic box. Aborts with the particle index on a non-finite update.
pub fn advance_positions(
    sys: &mut ParticleSystem,
    dt: f64,
    dt_prev: Option<f64>,
    pz: Option<PeriodicZ>,
    owned: usize,
) -> Result<()> {
    let (c_new, c_old) = ab2_weights(dt, dt_prev);
    let bad: Vec<usize> = (0..owned)
        .into_par_iter()
        .filter_map(|i| {
            let sane = sys.x[i].is_finite()
                && sys.vx[i].is_finite()
                && sys.ax[i].is_finite()
                && sys.ax_prev[i].is_finite();
            if sane {
                None
            } else {
                Some(i)
            }
        })
        .collect();
    // The arithmetic below cannot create non-finite values from finite
    // inputs at finite dt, so validating inputs up front is enough.
    if let Some(&i) = bad.first() {
        return Err(Error::NonFiniteState {
            index: i,
            what: "position update",
        });
    }
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::NonFiniteTimestep { dt });
    }

    let n = owned;
    let (x, y, z) = (&mut sys.x, &mut sys.y, &mut sys.z);
    let (vx, vy, vz) = (&mut sys.vx, &mut sys.vy, &mut sys.vz);
    let (ax, ay, az) = (&sys.ax, &sys.ay, &sys.az);
    let (axp, ayp, azp) = (&sys.ax_prev, &sys.ay_prev, &sys.az_prev);

    let kick_drift = |p: &mut [f64], v: &mut [f64], a: &[f64], ap: &[f64]| {
        p.par_iter_mut()
            .zip(v.par_iter_mut())
            .enumerate()
            .for_each(|(i, (p_i, v_i))| {
                let v_old = *v_i;
                let v_new = v_old + dt * (c_new * a[i] - c_old * ap[i]);
                *v_i = v_new;
                *p_i += 0.5 * dt * (v_old + v_new);
            });
    };
    kick_drift(&mut x[..n], &mut vx[..n], ax, axp);
    kick_drift(&mut y[..n], &mut vy[..n], ay, ayp);
    kick_drift(&mut z[..n], &mut vz[..n], az, azp);

    if let Some(p) = pz {
        for z_i in z[..n].iter_mut() {
            *z_i = p.wrap(*z_i);
        }
    }
    Ok(())
}

/// Variable-step AB2 energy update
/// `u += dt [(1 + r/2) du - (r/2) du_prev]`, then `du_prev <- du`.
/// Values under `floor` are clamped and counted.
pub fn advance_energy(
    sys: &mut ParticleSystem,
    dt: f64,
    dt_prev: Option<f64>,
    floor: f64,
    owned: usize,
) -> u64 {
    let (c_new, c_old) = ab2_weights(dt, dt_prev);
    let mut clamped = 0u64;
    for i in 0..owned {
        let u = sys.u[i] + dt * (c_new * sys.dudt[i] - c_old * sys.dudt_prev[i]);
        if u < floor {
            sys.u[i] = floor;
            clamped += 1;
        } else {
            sys.u[i] = u;
        }
        sys.dudt_prev[i] = sys.dudt[i];
    }
    clamped
}

/// Nudge each smoothing length toward the target neighbor count:
/// `h <- h/2 (1 + (n_target / n_actual)^(1/3))`, clamped to `[h_min, h_max]`.
pub fn update_smoothing_length(
    sys: &mut ParticleSystem,
    target_neighbors: usize,
    h_min: f64,
    h_max: f64,
    owned: usize,
) {
    let target = target_neighbors as f64;
    for i in 0..owned {
        let actual = sys.neighbors.neighbor_count(i).max(1) as f64;
        let factor = 0.5 * (1.0 + (target / actual).cbrt());
        sys.h[i] = (sys.h[i] * factor).clamp(h_min, h_max);
    }
}
