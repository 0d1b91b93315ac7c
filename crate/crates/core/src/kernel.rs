//! Sinc-family interpolation kernels.
//!
//! The kernel is `W(v, h) = (B_n / h^3) * [sinc(pi v / 2)]^n` on the compact
//! support `0 <= v <= 2` (with `v = r / h`) and exactly zero beyond it. `B_n`
//! normalizes the kernel to unit volume integral in 3D and is computed once by
//! adaptive quadrature.
//!
//! Two evaluation paths exist: direct evaluation of the closed form, and a
//! lookup table of precomputed samples of `S_n = sinc^n` and its radial
//! derivative with linear interpolation between the two bracketing samples.
//! The table stores the h-independent shape only, so one table serves every
//! smoothing length.

use crate::error::{Error, Result};

/// Number of table samples on `v in [0, 2]`.
pub const DEFAULT_TABLE_SIZE: usize = 20_000;

/// Integer powers up to this exponent are unrolled multiplications.
pub const INT_POW_MAX: u32 = 9;

/// `x^k` by repeated multiplication for `0 <= k <= 9`; falls back to the
/// generic `powi` for larger exponents.
#[inline]
pub fn int_pow(x: f64, k: u32) -> f64 {
    if k > INT_POW_MAX {
        return x.powi(k as i32);
    }
    let mut acc = 1.0;
    for _ in 0..k {
        acc *= x;
    }
    acc
}

/// `sin(x) / x` with the removable singularity filled in at `x = 0`.
#[inline]
fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// `d/dx [sin(x)/x]`, series-expanded near zero where the closed form cancels.
#[inline]
fn sinc_deriv(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        // (x cos x - sin x) / x^2 = -x/3 + x^3/30 - ...
        -x / 3.0 + x * x * x / 30.0
    } else {
        (x * x.cos() - x.sin()) / (x * x)
    }
}

/// Sinc kernel of real exponent `n` in three dimensions.
#[derive(Debug, Clone)]
pub struct SincKernel {
    n: f64,
    /// Fast path: exponent is a small integer.
    n_int: Option<u32>,
    b_n: f64,
}

impl SincKernel {
    /// Build a kernel with exponent `n >= 3`, computing the normalization
    /// constant by adaptive quadrature to 1e-10.
    pub fn new(n: f64) -> Result<Self> {
        if !n.is_finite() || n < 3.0 {
            return Err(Error::Config(format!(
                "kernel exponent must be >= 3, got {n}"
            )));
        }
        let b_n = normalization(n)?;
        let n_int = if n.fract() == 0.0 && n <= INT_POW_MAX as f64 {
            Some(n as u32)
        } else {
            None
        };
        Ok(Self { n, n_int, b_n })
    }

    pub fn exponent(&self) -> f64 {
        self.n
    }

    /// Normalization constant `B_n` (unit kernel volume integral at h = 1).
    pub fn b_n(&self) -> f64 {
        self.b_n
    }

    /// Kernel shape `S_n(v) = [sinc(pi v / 2)]^n`, without normalization.
    #[inline]
    pub fn shape(&self, v: f64) -> f64 {
        if v >= 2.0 {
            return 0.0;
        }
        let s = sinc(0.5 * std::f64::consts::PI * v);
        match self.n_int {
            Some(k) => int_pow(s, k),
            None => s.powf(self.n),
        }
    }

    /// Radial derivative of the shape, `d S_n / d v`. Zero at `v = 0` (smooth
    /// maximum) and outside the support.
    #[inline]
    pub fn shape_deriv(&self, v: f64) -> f64 {
        if v <= 0.0 || v >= 2.0 {
            return 0.0;
        }
        let x = 0.5 * std::f64::consts::PI * v;
        let s = sinc(x);
        let sp = match self.n_int {
            Some(k) => int_pow(s, k - 1),
            None => s.powf(self.n - 1.0),
        };
        self.n * sp * sinc_deriv(x) * 0.5 * std::f64::consts::PI
    }

    fn check_args(v: f64, h: f64) -> Result<()> {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::KernelArgument(format!("v = {v}")));
        }
        if !h.is_finite() || h <= 0.0 {
            return Err(Error::KernelArgument(format!("h = {h}")));
        }
        Ok(())
    }

    /// Direct kernel evaluation `W(v, h)`.
    pub fn w_direct(&self, v: f64, h: f64) -> Result<f64> {
        Self::check_args(v, h)?;
        Ok(self.b_n * self.shape(v) / (h * h * h))
    }

    /// Direct radial derivative `dW/dv (v, h)`.
    pub fn dw_dv_direct(&self, v: f64, h: f64) -> Result<f64> {
        Self::check_args(v, h)?;
        Ok(self.b_n * self.shape_deriv(v) / (h * h * h))
    }
}

/// Sampled kernel shape for the lookup-table fast path.
#[derive(Debug, Clone)]
pub struct KernelTable {
    w: Vec<f64>,
    dw: Vec<f64>,
    inv_step: f64,
}

impl KernelTable {
    pub fn new(kernel: &SincKernel, size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!(
                "kernel table needs >= 2 samples, got {size}"
            )));
        }
        let step = 2.0 / (size - 1) as f64;
        let mut w = Vec::with_capacity(size);
        let mut dw = Vec::with_capacity(size);
        for i in 0..size {
            let v = i as f64 * step;
            w.push(kernel.shape(v));
            dw.push(kernel.shape_deriv(v));
        }
        // Compact support: the last sample sits exactly on v = 2.
        w[size - 1] = 0.0;
        dw[size - 1] = 0.0;
        Ok(Self {
            w,
            dw,
            inv_step: 1.0 / step,
        })
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn samples(&self) -> (&[f64], &[f64]) {
        (&self.w, &self.dw)
    }

    /// Interpolated shape `S_n(v)`.
    #[inline]
    pub fn shape(&self, v: f64) -> f64 {
        if v >= 2.0 {
            return 0.0;
        }
        let t = v * self.inv_step;
        let i = t as usize;
        let frac = t - i as f64;
        let w0 = self.w[i];
        w0 + (self.w[i + 1] - w0) * frac
    }

    /// Interpolated shape derivative `dS_n/dv`.
    #[inline]
    pub fn shape_deriv(&self, v: f64) -> f64 {
        if v >= 2.0 {
            return 0.0;
        }
        let t = v * self.inv_step;
        let i = t as usize;
        let frac = t - i as f64;
        let d0 = self.dw[i];
        d0 + (self.dw[i + 1] - d0) * frac
    }
}

/// A kernel plus its optional table; the single evaluation handle the solver
/// passes around. Immutable after construction, safe to share across threads.
#[derive(Debug, Clone)]
pub struct Kernel {
    sinc: SincKernel,
    table: Option<KernelTable>,
}

impl Kernel {
    pub fn new(n: f64, use_table: bool) -> Result<Self> {
        let sinc = SincKernel::new(n)?;
        let table = if use_table {
            Some(KernelTable::new(&sinc, DEFAULT_TABLE_SIZE)?)
        } else {
            None
        };
        Ok(Self { sinc, table })
    }

    pub fn sinc(&self) -> &SincKernel {
        &self.sinc
    }

    pub fn table(&self) -> Option<&KernelTable> {
        self.table.as_ref()
    }

    pub fn b_n(&self) -> f64 {
        self.sinc.b_n
    }

    /// Kernel value `W(v, h)`; table-interpolated when a table is present.
    ///
    /// Hot-path variant without argument validation; callers guarantee
    /// `v >= 0` and `h > 0`.
    #[inline]
    pub fn w(&self, v: f64, h: f64) -> f64 {
        let shape = match &self.table {
            Some(t) => t.shape(v),
            None => self.sinc.shape(v),
        };
        self.sinc.b_n * shape / (h * h * h)
    }

    /// Radial derivative `dW/dv (v, h)`.
    #[inline]
    pub fn dw_dv(&self, v: f64, h: f64) -> f64 {
        let d = match &self.table {
            Some(t) => t.shape_deriv(v),
            None => self.sinc.shape_deriv(v),
        };
        self.sinc.b_n * d / (h * h * h)
    }

    /// Smoothing-length derivative `dW/dh = -(3 W + v dW/dv) / h`.
    #[inline]
    pub fn dw_dh(&self, v: f64, h: f64) -> f64 {
        -(3.0 * self.w(v, h) + v * self.dw_dv(v, h)) / h
    }

    /// Checked table evaluation (same contract as `w_direct`).
    pub fn w_table(&self, v: f64, h: f64) -> Result<f64> {
        SincKernel::check_args(v, h)?;
        Ok(self.w(v, h))
    }
}

/// Kernel shape access used by the inner particle loops.
pub trait ShapeEval: Sync {
    fn shape(&self, v: f64) -> f64;
    fn shape_deriv(&self, v: f64) -> f64;
}

impl ShapeEval for SincKernel {
    #[inline]
    fn shape(&self, v: f64) -> f64 {
        SincKernel::shape(self, v)
    }
    #[inline]
    fn shape_deriv(&self, v: f64) -> f64 {
        SincKernel::shape_deriv(self, v)
    }
}

impl ShapeEval for KernelTable {
    #[inline]
    fn shape(&self, v: f64) -> f64 {
        KernelTable::shape(self, v)
    }
    #[inline]
    fn shape_deriv(&self, v: f64) -> f64 {
        KernelTable::shape_deriv(self, v)
    }
}

/// Normalization constant `B_n` so that `4 pi int_0^2 W v^2 dv = 1` at h = 1.
pub fn normalization(n: f64) -> Result<f64> {
    let f = |v: f64| {
        let s = sinc(0.5 * std::f64::consts::PI * v);
        s.powf(n) * v * v
    };
    let integral =
        adaptive_simpson(&f, 0.0, 2.0, 1e-11, 40).ok_or(Error::QuadratureNonConvergence { n })?;
    Ok(1.0 / (4.0 * std::f64::consts::PI * integral))
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
    max_depth: u32,
) -> Option<f64> {
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> Option<f64> {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(a, m, fa, flm, fm);
        let right = simpson(m, b, fm, frm, fb);
        let err = left + right - whole;
        if err.abs() <= 15.0 * tol {
            return Some(left + right + err / 15.0);
        }
        if depth == 0 {
            return None;
        }
        let l = recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?;
        let r = recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?;
        Some(l + r)
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(a, b, fa, fm, fb);
    recurse(f, a, b, fa, fm, fb, whole, tol, max_depth)
}
