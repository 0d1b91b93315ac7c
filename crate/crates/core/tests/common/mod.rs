//! Independent naive reference implementations used as oracles.
//!
//! Everything here is deliberately written from scratch: direct kernel
//! evaluation through `sin`/`powf`, composite-Simpson normalization, O(n^2)
//! neighbor scans, Gauss-Jordan matrix inversion and plain index-ordered
//! summation. None of it shares code with the solver's tree or pass
//! implementations it is used to check.

#![allow(dead_code)]

use sphmini_core::octree::PeriodicZ;
use sphmini_core::particles::ParticleSystem;

pub const PI: f64 = std::f64::consts::PI;

/// sinc(pi v / 2)^n, straight from the definition.
pub fn shape_ref(v: f64, n: f64) -> f64 {
    if v >= 2.0 {
        return 0.0;
    }
    if v == 0.0 {
        return 1.0;
    }
    let x = 0.5 * PI * v;
    (x.sin() / x).powf(n)
}

/// Normalization over the support by composite Simpson on a fixed fine grid.
pub fn b_n_ref(n: f64) -> f64 {
    let m = 20_000; // even
    let dv = 2.0 / m as f64;
    let f = |v: f64| shape_ref(v, n) * v * v;
    let mut s = f(0.0) + f(2.0);
    for k in 1..m {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(k as f64 * dv);
    }
    let integral = s * dv / 3.0;
    1.0 / (4.0 * PI * integral)
}

pub fn w_ref(r: f64, h: f64, n: f64, b_n: f64) -> f64 {
    b_n * shape_ref(r / h, n) / (h * h * h)
}

/// d/dv of sinc(pi v/2)^n, from the closed form.
pub fn dshape_ref(v: f64, n: f64) -> f64 {
    if v <= 0.0 || v >= 2.0 {
        return 0.0;
    }
    let x = 0.5 * PI * v;
    let s = x.sin() / x;
    n * s.powf(n - 1.0) * (0.5 * PI) * ((x * x.cos() - x.sin()) / (x * x))
}

pub fn dz_min_image(dz: f64, pz: Option<PeriodicZ>) -> f64 {
    match pz {
        Some(p) => {
            if dz > 0.5 * p.len {
                dz - p.len
            } else if dz < -0.5 * p.len {
                dz + p.len
            } else {
                dz
            }
        }
        None => dz,
    }
}

pub fn dist(
    sys: &ParticleSystem,
    i: usize,
    j: usize,
    pz: Option<PeriodicZ>,
) -> (f64, f64, f64, f64) {
    let dx = sys.x[j] - sys.x[i];
    let dy = sys.y[j] - sys.y[i];
    let dz = dz_min_image(sys.z[j] - sys.z[i], pz);
    (dx, dy, dz, (dx * dx + dy * dy + dz * dz).sqrt())
}

/// Brute-force neighbor sets: all `j != i` with distance < 2 h_i, ascending.
pub fn neighbors_ref(sys: &ParticleSystem, pz: Option<PeriodicZ>) -> Vec<Vec<u32>> {
    let n = sys.len();
    (0..n)
        .map(|i| {
            let mut list = Vec::new();
            for j in 0..n {
                if j == i {
                    continue;
                }
                let (.., r) = dist(sys, i, j, pz);
                if r < 2.0 * sys.h[i] {
                    list.push(j as u32);
                }
            }
            list
        })
        .collect()
}

pub fn density_ref(
    sys: &ParticleSystem,
    nbrs: &[Vec<u32>],
    n_exp: f64,
    b_n: f64,
    pz: Option<PeriodicZ>,
) -> Vec<f64> {
    (0..sys.len())
        .map(|i| {
            let mut rho = sys.m[i] * w_ref(0.0, sys.h[i], n_exp, b_n);
            for &j in &nbrs[i] {
                let (.., r) = dist(sys, i, j as usize, pz);
                rho += sys.m[j as usize] * w_ref(r, sys.h[i], n_exp, b_n);
            }
            rho
        })
        .collect()
}

/// Grad-h factor from `dW/dh = -(3 W + v dW/dv)/h`, clamped at 0.1.
pub fn omega_ref(
    sys: &ParticleSystem,
    nbrs: &[Vec<u32>],
    rho: &[f64],
    n_exp: f64,
    b_n: f64,
    pz: Option<PeriodicZ>,
) -> Vec<f64> {
    (0..sys.len())
        .map(|i| {
            let h = sys.h[i];
            let dwdh = |r: f64| {
                let v = r / h;
                let w = w_ref(r, h, n_exp, b_n);
                let dwdv = b_n * dshape_ref(v, n_exp) / (h * h * h);
                -(3.0 * w + v * dwdv) / h
            };
            let mut s = sys.m[i] * dwdh(0.0);
            for &j in &nbrs[i] {
                let (.., r) = dist(sys, i, j as usize, pz);
                s += sys.m[j as usize] * dwdh(r);
            }
            let omega = 1.0 + h / (3.0 * rho[i]) * s;
            if omega <= 0.1 {
                0.1
            } else {
                omega
            }
        })
        .collect()
}

/// Gauss-Jordan inverse of a full 3x3 with partial pivoting.
pub fn invert3_ref(a: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let mut m = [[0.0f64; 6]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = a[r][c];
        }
        m[r][3 + r] = 1.0;
    }
    for col in 0..3 {
        let mut piv = col;
        for r in col + 1..3 {
            if m[r][col].abs() > m[piv][col].abs() {
                piv = r;
            }
        }
        if m[piv][col] == 0.0 {
            return None;
        }
        m.swap(col, piv);
        let d = m[col][col];
        for c in 0..6 {
            m[col][c] /= d;
        }
        for r in 0..3 {
            if r != col {
                let f = m[r][col];
                for c in 0..6 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let mut inv = [[0.0f64; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            inv[r][c] = m[r][3 + c];
        }
    }
    Some(inv)
}

pub struct IadRef {
    pub c: Vec<[f64; 6]>,
    pub fallback: Vec<bool>,
}

pub fn iad_ref(
    sys: &ParticleSystem,
    nbrs: &[Vec<u32>],
    rho: &[f64],
    n_exp: f64,
    b_n: f64,
    pz: Option<PeriodicZ>,
) -> IadRef {
    let n = sys.len();
    let mut out = IadRef {
        c: vec![[0.0; 6]; n],
        fallback: vec![false; n],
    };
    for i in 0..n {
        let mut tau = [[0.0f64; 3]; 3];
        for &j in &nbrs[i] {
            let ju = j as usize;
            let (dx, dy, dz, r) = dist(sys, i, ju, pz);
            let wv = sys.m[ju] / rho[ju] * w_ref(r, sys.h[i], n_exp, b_n);
            let d = [dx, dy, dz];
            for a in 0..3 {
                for b in 0..3 {
                    tau[a][b] += wv * d[a] * d[b];
                }
            }
        }
        let frob = |m: &[[f64; 3]; 3]| {
            let mut s = 0.0;
            for r in m {
                for v in r {
                    s += v * v;
                }
            }
            s.sqrt()
        };
        match invert3_ref(tau) {
            Some(inv)
                if (frob(&tau) * frob(&inv)).is_finite() && frob(&tau) * frob(&inv) <= 1e12 =>
            {
                out.c[i] = [
                    inv[0][0], inv[0][1], inv[0][2], inv[1][1], inv[1][2], inv[2][2],
                ];
            }
            _ => out.fallback[i] = true,
        }
    }
    out
}

pub struct RatesRef {
    pub ax: Vec<f64>,
    pub ay: Vec<f64>,
    pub az: Vec<f64>,
    pub dudt: Vec<f64>,
}

/// Momentum and energy rates, straight nested loops in index order.
#[allow(clippy::too_many_arguments)]
pub fn momentum_energy_ref(
    sys: &ParticleSystem,
    nbrs: &[Vec<u32>],
    rho: &[f64],
    p: &[f64],
    c: &[f64],
    omega: &[f64],
    iad: &IadRef,
    alpha: f64,
    n_exp: f64,
    b_n: f64,
    pz: Option<PeriodicZ>,
) -> RatesRef {
    let n = sys.len();
    let mut out = RatesRef {
        ax: vec![0.0; n],
        ay: vec![0.0; n],
        az: vec![0.0; n],
        dudt: vec![0.0; n],
    };
    let coeff = |side: usize, d: [f64; 3], r: f64, h: f64| -> [f64; 3] {
        if iad.fallback[side] {
            let g = -b_n * dshape_ref(r / h, n_exp) / (h * h * h) / (r * h);
            [d[0] * g, d[1] * g, d[2] * g]
        } else {
            let w = w_ref(r, h, n_exp, b_n);
            let m = iad.c[side];
            [
                (m[0] * d[0] + m[1] * d[1] + m[2] * d[2]) * w,
                (m[1] * d[0] + m[3] * d[1] + m[4] * d[2]) * w,
                (m[2] * d[0] + m[4] * d[1] + m[5] * d[2]) * w,
            ]
        }
    };
    for i in 0..n {
        let pa = p[i] / (omega[i] * rho[i] * rho[i]);
        for &j in &nbrs[i] {
            let ju = j as usize;
            let (dx, dy, dz, r) = dist(sys, i, ju, pz);
            if r == 0.0 {
                continue;
            }
            let d = [dx, dy, dz];
            let a_c = coeff(i, d, r, sys.h[i]);
            let b_c = coeff(ju, d, r, sys.h[ju]);
            let pb = p[ju] / (omega[ju] * rho[ju] * rho[ju]);
            let dv = [
                sys.vx[i] - sys.vx[ju],
                sys.vy[i] - sys.vy[ju],
                sys.vz[i] - sys.vz[ju],
            ];
            let w_ab = -(dv[0] * dx + dv[1] * dy + dv[2] * dz) / r;
            let v_sig = c[i] + c[ju] - 3.0 * w_ab;
            let pi_ab = if w_ab < 0.0 {
                -0.5 * alpha * v_sig * w_ab
            } else {
                0.0
            };
            let s = [
                a_c[0] / rho[i] + b_c[0] / rho[ju],
                a_c[1] / rho[i] + b_c[1] / rho[ju],
                a_c[2] / rho[i] + b_c[2] / rho[ju],
            ];
            let mj = sys.m[ju];
            out.ax[i] -= mj * (pa * a_c[0] + pb * b_c[0] + 0.5 * pi_ab * s[0]);
            out.ay[i] -= mj * (pa * a_c[1] + pb * b_c[1] + 0.5 * pi_ab * s[1]);
            out.az[i] -= mj * (pa * a_c[2] + pb * b_c[2] + 0.5 * pi_ab * s[2]);
            let vdot_a = dv[0] * a_c[0] + dv[1] * a_c[1] + dv[2] * a_c[2];
            let vdot_s = dv[0] * s[0] + dv[1] * s[1] + dv[2] * s[2];
            out.dudt[i] += mj * (pa * vdot_a + 0.25 * pi_ab * vdot_s);
        }
    }
    out
}

/// Largest |a-b| over the arrays, normalized by the largest |b| (field scale).
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-300);
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
        / scale
}

/// A reproducible random cloud in the unit box with mild mass scatter.
pub fn random_cloud_system(n: usize, h: f64, seed: u64, max_neighbors: usize) -> ParticleSystem {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut sys = ParticleSystem::with_len(n, max_neighbors);
    for i in 0..n {
        sys.x[i] = rng.gen::<f64>();
        sys.y[i] = rng.gen::<f64>();
        sys.z[i] = rng.gen::<f64>();
        sys.vx[i] = rng.gen::<f64>() - 0.5;
        sys.vy[i] = rng.gen::<f64>() - 0.5;
        sys.vz[i] = rng.gen::<f64>() - 0.5;
        sys.m[i] = 0.8 + 0.4 * rng.gen::<f64>();
        sys.h[i] = h;
        sys.u[i] = 1.0;
    }
    sys
}
