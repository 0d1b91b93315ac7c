//! Rotating square patch initial conditions.
//!
//! A `side x side` lattice of particles spans `[-L/2, L/2]^2` in x and y,
//! copied `layers` times along z with the same spacing and periodic boundary
//! conditions in z. The velocity field is a rigid rotation and the initial
//! pressure solves the matching incompressible Poisson problem, expressed as
//! a double sine series over odd wavenumbers. Density is set so the linear
//! weakly compressible EOS reproduces that pressure.
//!
//! Coordinates are built as `integer * (spacing / 2)` so that mirrored
//! lattice sites have bitwise-negated coordinates and the initial momentum
//! cancels cleanly.

use crate::error::{Error, Result};
use crate::octree::PeriodicZ;
use crate::particles::ParticleSystem;
use crate::physics::EosConfig;

#[derive(Debug, Clone)]
pub struct SquarePatchConfig {
    /// Particles per edge of the x-y lattice.
    pub side: usize,
    /// Number of z planes.
    pub layers: usize,
    /// Physical side length [cm].
    pub l: f64,
    /// Angular velocity [rad/s].
    pub omega: f64,
    /// Odd wavenumber cutoff of the pressure series (inclusive).
    pub series_terms: usize,
    /// Reference density [g/cm^3].
    pub rho0: f64,
    /// Sound speed [cm/s]; defaults to 10x the rim speed `omega L / sqrt(2)`.
    pub c0: Option<f64>,
    /// Uniform initial internal energy [erg/g].
    pub u0: f64,
    /// Desired neighbor count inside the 2h sphere.
    pub target_neighbors: usize,
}

impl Default for SquarePatchConfig {
    fn default() -> Self {
        Self {
            side: 100,
            layers: 100,
            l: 1.0,
            omega: 5.0,
            series_terms: 39,
            rho0: 1.0,
            c0: None,
            u0: 1000.0,
            target_neighbors: 300,
        }
    }
}

impl SquarePatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side < 4 {
            return Err(Error::Config(format!(
                "side must be >= 4, got {}",
                self.side
            )));
        }
        if self.layers < 1 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if !(self.l > 0.0) || !(self.omega > 0.0) {
            return Err(Error::Config("L and omega must be positive".into()));
        }
        if self.series_terms < 5 || self.series_terms % 2 == 0 {
            return Err(Error::Config(format!(
                "series_terms must be an odd cutoff >= 5, got {}",
                self.series_terms
            )));
        }
        if !(self.rho0 > 0.0) || !(self.u0 > 0.0) {
            return Err(Error::Config("rho0 and u0 must be positive".into()));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        self.l / self.side as f64
    }

    pub fn particle_count(&self) -> usize {
        self.side * self.side * self.layers
    }

    pub fn sound_speed(&self) -> f64 {
        self.c0
            .unwrap_or(10.0 * self.omega * self.l / std::f64::consts::SQRT_2)
    }

    pub fn eos(&self) -> Result<EosConfig> {
        EosConfig::new(self.rho0, self.sound_speed())
    }

    pub fn periodic_z(&self) -> PeriodicZ {
        let len = self.layers as f64 * self.spacing();
        PeriodicZ {
            min: -0.5 * len,
            len,
        }
    }

    /// Smoothing length for which a uniform lattice of this spacing holds
    /// about `target_neighbors` particles in the 2h sphere:
    /// `(4 pi / 3)(2h)^3 = n_target dx^3`.
    pub fn smoothing_length(&self) -> f64 {
        lattice_smoothing_length(self.spacing(), self.target_neighbors)
    }

    pub fn particle_mass(&self) -> f64 {
        let dx = self.spacing();
        self.rho0 * dx * dx * dx
    }
}

pub fn lattice_smoothing_length(spacing: f64, target_neighbors: usize) -> f64 {
    0.5 * spacing * (3.0 * target_neighbors as f64 / (4.0 * std::f64::consts::PI)).cbrt()
}

/// Cell-centered lattice coordinates. Exposed separately so degenerate
/// lattices (side 2) stay testable below the full config's `side >= 4` rule.
pub fn lattice_positions(side: usize, layers: usize, l: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = side * side * layers;
    let half_dx = 0.5 * l / side as f64;
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for i in 0..side {
        let xi = (2 * i as i64 + 1 - side as i64) as f64 * half_dx;
        for j in 0..side {
            let yj = (2 * j as i64 + 1 - side as i64) as f64 * half_dx;
            for k in 0..layers {
                let zk = (2 * k as i64 + 1 - layers as i64) as f64 * half_dx;
                x.push(xi);
                y.push(yj);
                z.push(zk);
            }
        }
    }
    (x, y, z)
}

/// Rigid rotation: `v_x = omega y`, `v_y = -omega x`, `v_z = 0`.
pub fn rigid_rotation_velocity(omega: f64, x: f64, y: f64) -> (f64, f64, f64) {
    (omega * y, -omega * x, 0.0)
}

/// Initial pressure at corner-origin coordinates `(xp, yp)` in `[0, L]^2`:
/// a double sine series over odd wavenumbers up to `m_max` with coefficients
/// `-32 omega^2 rho / (m n pi^2 [(m pi / L)^2 + (n pi / L)^2])`.
/// Even wavenumbers carry no weight for this source and are skipped.
pub fn pressure_series(xp: f64, yp: f64, l: f64, omega: f64, rho: f64, m_max: usize) -> f64 {
    let pi = std::f64::consts::PI;
    let mut sum = 0.0;
    let mut m = 1usize;
    while m <= m_max {
        let mf = m as f64;
        let mut n = 1usize;
        while n <= m_max {
            let nf = n as f64;
            let k2 = (mf * pi / l).powi(2) + (nf * pi / l).powi(2);
            let coef = -32.0 * omega * omega / (mf * nf * pi * pi * k2);
            sum += coef * (mf * pi * xp / l).sin() * (nf * pi * yp / l).sin();
            n += 2;
        }
        m += 2;
    }
    rho * sum
}

/// Series health check: the largest coefficient magnitude per diagonal shell
/// `m + n` must not increase. Violations only arise from invalid parameters.
fn check_series_convergence(l: f64, omega: f64, m_max: usize) -> Result<()> {
    let pi = std::f64::consts::PI;
    let mut prev_shell_max = f64::INFINITY;
    let mut s = 2usize;
    while s <= 2 * m_max {
        let mut shell_max: f64 = 0.0;
        let mut m = 1usize;
        while m < s && m <= m_max {
            let n = s - m;
            if n % 2 == 1 && n <= m_max {
                let (mf, nf) = (m as f64, n as f64);
                let k2 = (mf * pi / l).powi(2) + (nf * pi / l).powi(2);
                let coef = 32.0 * omega * omega / (mf * nf * pi * pi * k2);
                shell_max = shell_max.max(coef.abs());
            }
            m += 2;
        }
        if shell_max > 0.0 {
            if !shell_max.is_finite() || shell_max > prev_shell_max {
                return Err(Error::Config(format!(
                    "pressure series does not converge (shell {s} grows)"
                )));
            }
            prev_shell_max = shell_max;
        }
        s += 2;
    }
    Ok(())
}

/// Generate the full initial state: positions, velocities, pressure-consistent
/// density, masses and smoothing lengths, plus the periodic z box.
pub fn generate(config: &SquarePatchConfig) -> Result<(ParticleSystem, PeriodicZ)> {
    generate_with_capacity(config, 512)
}

pub fn generate_with_capacity(
    config: &SquarePatchConfig,
    max_neighbors: usize,
) -> Result<(ParticleSystem, PeriodicZ)> {
    config.validate()?;
    check_series_convergence(config.l, config.omega, config.series_terms)?;

    let n = config.particle_count();
    let mut sys = ParticleSystem::with_len(n, max_neighbors);
    let (x, y, z) = lattice_positions(config.side, config.layers, config.l);
    sys.x = x;
    sys.y = y;
    sys.z = z;

    let eos = config.eos()?;
    let c0 = eos.c0;
    let h = config.smoothing_length();
    let m = config.particle_mass();
    let half_l = 0.5 * config.l;
    for i in 0..n {
        let (vx, vy, vz) = rigid_rotation_velocity(config.omega, sys.x[i], sys.y[i]);
        sys.vx[i] = vx;
        sys.vy[i] = vy;
        sys.vz[i] = vz;
        let p0 = pressure_series(
            sys.x[i] + half_l,
            sys.y[i] + half_l,
            config.l,
            config.omega,
            config.rho0,
            config.series_terms,
        );
        sys.p[i] = p0;
        sys.rho[i] = config.rho0 + p0 / (c0 * c0);
        sys.u[i] = config.u0;
        sys.h[i] = h;
        sys.m[i] = m;
        sys.c[i] = c0;
        sys.omega[i] = 1.0;
    }
    Ok((sys, config.periodic_z()))
}
