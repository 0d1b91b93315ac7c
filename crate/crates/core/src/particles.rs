//! Structure-of-arrays particle state.
//!
//! Every per-particle field is its own `Vec<f64>` so the per-particle loops
//! stream one field at a time. All arrays always have identical length, and
//! `permute` reorders every one of them consistently.

use crate::error::{Error, Result};

/// Per-particle neighbor lists with fixed capacity per particle.
///
/// Lists are stored flat: particle `i` owns `idx[i*cap .. i*cap + count[i]]`.
/// Entries beyond the capacity are dropped and counted in `truncated`.
#[derive(Debug, Clone, Default)]
pub struct NeighborLists {
    cap: usize,
    idx: Vec<u32>,
    count: Vec<u32>,
    truncated: u64,
}

impl NeighborLists {
    pub fn new(n: usize, cap: usize) -> Self {
        Self {
            cap,
            idx: vec![0; n * cap],
            count: vec![0; n],
            truncated: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }

    /// Neighbors of particle `i`.
    #[inline]
    pub fn of(&self, i: usize) -> &[u32] {
        &self.idx[i * self.cap..i * self.cap + self.count[i] as usize]
    }

    /// Mutable view of particle `i`'s list (for in-place canonical sorting).
    #[inline]
    pub fn of_mut(&mut self, i: usize) -> &mut [u32] {
        &mut self.idx[i * self.cap..i * self.cap + self.count[i] as usize]
    }

    /// Replace the list of particle `i`; excess entries are truncated.
    pub fn set(&mut self, i: usize, neighbors: &[u32]) {
        let kept = neighbors.len().min(self.cap);
        self.truncated += (neighbors.len() - kept) as u64;
        self.idx[i * self.cap..i * self.cap + kept].copy_from_slice(&neighbors[..kept]);
        self.count[i] = kept as u32;
    }

    pub fn neighbor_count(&self, i: usize) -> usize {
        self.count[i] as usize
    }

    /// Total entries truncated since the last `reset`.
    pub fn truncated(&self) -> u64 {
        self.truncated
    }

    pub fn add_truncated(&mut self, n: u64) {
        self.truncated += n;
    }

    /// Raw storage for parallel filling: (capacity, flat indices, counts).
    /// Row `i` is `indices[i*cap..(i+1)*cap]` with `counts[i]` valid entries.
    pub fn raw_parts_mut(&mut self) -> (usize, &mut [u32], &mut [u32]) {
        (self.cap, &mut self.idx, &mut self.count)
    }

    /// Invalidate all lists (e.g. after a permutation) and resize to `n`.
    pub fn reset(&mut self, n: usize) {
        self.count.clear();
        self.count.resize(n, 0);
        self.idx.resize(n * self.cap, 0);
        self.truncated = 0;
    }

    pub fn mean_count(&self, upto: usize) -> f64 {
        if upto == 0 {
            return 0.0;
        }
        let total: u64 = self.count[..upto].iter().map(|&c| c as u64).sum();
        total as f64 / upto as f64
    }
}

/// All per-particle state of one (sub)domain.
///
/// The first `owned` entries of a rank-local system are the particles the
/// rank is responsible for; halo copies of remote particles are appended
/// after them and refreshed every step.
#[derive(Debug, Clone, Default)]
pub struct ParticleSystem {
    // Persistent physical state (checkpointed).
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
    pub vz: Vec<f64>,
    pub u: Vec<f64>,
    pub h: Vec<f64>,
    pub m: Vec<f64>,
    pub rho: Vec<f64>,
    pub p: Vec<f64>,
    pub c: Vec<f64>,
    pub ax: Vec<f64>,
    pub ay: Vec<f64>,
    pub az: Vec<f64>,
    pub dudt: Vec<f64>,
    pub dudt_prev: Vec<f64>,
    pub omega: Vec<f64>,
    /// Symmetric IAD coefficient matrix, six unique entries per particle.
    pub c11: Vec<f64>,
    pub c12: Vec<f64>,
    pub c13: Vec<f64>,
    pub c22: Vec<f64>,
    pub c23: Vec<f64>,
    pub c33: Vec<f64>,

    // Derived per-step state (rebuilt every step, never checkpointed).
    /// Persistent particle identity, used for cross-rank bookkeeping.
    pub id: Vec<u64>,
    /// Previous-step acceleration for the two-level position scheme.
    pub ax_prev: Vec<f64>,
    pub ay_prev: Vec<f64>,
    pub az_prev: Vec<f64>,
    /// Largest pairwise signal velocity seen this step.
    pub vsig_max: Vec<f64>,
    /// Set where the IAD moment matrix was too ill-conditioned to invert.
    pub iad_fallback: Vec<u8>,
    /// Geometric sort key (Morton code in the global box); canonicalizes
    /// neighbor iteration order independently of array layout.
    pub sort_key: Vec<u64>,
    pub neighbors: NeighborLists,
}

macro_rules! for_each_f64_field {
    ($self:ident, $f:expr) => {
        $f(&mut $self.x);
        $f(&mut $self.y);
        $f(&mut $self.z);
        $f(&mut $self.vx);
        $f(&mut $self.vy);
        $f(&mut $self.vz);
        $f(&mut $self.u);
        $f(&mut $self.h);
        $f(&mut $self.m);
        $f(&mut $self.rho);
        $f(&mut $self.p);
        $f(&mut $self.c);
        $f(&mut $self.ax);
        $f(&mut $self.ay);
        $f(&mut $self.az);
        $f(&mut $self.dudt);
        $f(&mut $self.dudt_prev);
        $f(&mut $self.omega);
        $f(&mut $self.c11);
        $f(&mut $self.c12);
        $f(&mut $self.c13);
        $f(&mut $self.c22);
        $f(&mut $self.c23);
        $f(&mut $self.c33);
        $f(&mut $self.ax_prev);
        $f(&mut $self.ay_prev);
        $f(&mut $self.az_prev);
        $f(&mut $self.vsig_max);
    };
}

impl ParticleSystem {
    /// Allocate `n` zeroed particles with `max_neighbors` list capacity.
    pub fn with_len(n: usize, max_neighbors: usize) -> Self {
        let mut s = Self::default();
        for_each_f64_field!(s, |v: &mut Vec<f64>| v.resize(n, 0.0));
        s.id = (0..n as u64).collect();
        s.iad_fallback = vec![0; n];
        s.sort_key = vec![0; n];
        s.neighbors = NeighborLists::new(n, max_neighbors);
        s
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Reorder every per-particle array so that new slot `k` holds what used
    /// to be at `order[k]`. Neighbor lists are invalidated and must be
    /// rebuilt. Rejects anything that is not a permutation of `0..n`.
    pub fn permute(&mut self, order: &[usize]) -> Result<()> {
        let n = self.len();
        if order.len() != n {
            return Err(Error::InvalidPermutation(format!(
                "length {} does not match particle count {n}",
                order.len()
            )));
        }
        let mut seen = vec![false; n];
        for &o in order {
            if o >= n {
                return Err(Error::InvalidPermutation(format!(
                    "index {o} out of range 0..{n}"
                )));
            }
            if seen[o] {
                return Err(Error::InvalidPermutation(format!("duplicate index {o}")));
            }
            seen[o] = true;
        }

        let mut scratch: Vec<f64> = Vec::with_capacity(n);
        for_each_f64_field!(self, |v: &mut Vec<f64>| apply_gather(
            v,
            order,
            &mut scratch
        ));

        let mut scratch_u64: Vec<u64> = Vec::with_capacity(n);
        apply_gather(&mut self.id, order, &mut scratch_u64);
        apply_gather(&mut self.sort_key, order, &mut scratch_u64);
        let mut scratch_u8: Vec<u8> = Vec::with_capacity(n);
        apply_gather(&mut self.iad_fallback, order, &mut scratch_u8);

        self.neighbors.reset(n);
        Ok(())
    }

    /// Append a copy of particle `src` from `other` (used for halo storage
    /// and migration). Neighbor lists are not resized here; callers rebuild
    /// them once per step via `neighbors.reset`.
    pub fn push_from(&mut self, other: &ParticleSystem, src: usize) {
        self.x.push(other.x[src]);
        self.y.push(other.y[src]);
        self.z.push(other.z[src]);
        self.vx.push(other.vx[src]);
        self.vy.push(other.vy[src]);
        self.vz.push(other.vz[src]);
        self.u.push(other.u[src]);
        self.h.push(other.h[src]);
        self.m.push(other.m[src]);
        self.rho.push(other.rho[src]);
        self.p.push(other.p[src]);
        self.c.push(other.c[src]);
        self.ax.push(other.ax[src]);
        self.ay.push(other.ay[src]);
        self.az.push(other.az[src]);
        self.dudt.push(other.dudt[src]);
        self.dudt_prev.push(other.dudt_prev[src]);
        self.omega.push(other.omega[src]);
        self.c11.push(other.c11[src]);
        self.c12.push(other.c12[src]);
        self.c13.push(other.c13[src]);
        self.c22.push(other.c22[src]);
        self.c23.push(other.c23[src]);
        self.c33.push(other.c33[src]);
        self.ax_prev.push(other.ax_prev[src]);
        self.ay_prev.push(other.ay_prev[src]);
        self.az_prev.push(other.az_prev[src]);
        self.vsig_max.push(other.vsig_max[src]);
        self.id.push(other.id[src]);
        self.sort_key.push(other.sort_key[src]);
        self.iad_fallback.push(other.iad_fallback[src]);
    }

    /// Drop everything from index `keep` onward (removes halo storage).
    pub fn truncate(&mut self, keep: usize) {
        for_each_f64_field!(self, |v: &mut Vec<f64>| v.truncate(keep));
        self.id.truncate(keep);
        self.sort_key.truncate(keep);
        self.iad_fallback.truncate(keep);
    }
}

fn apply_gather<T: Copy + Default>(v: &mut Vec<T>, order: &[usize], scratch: &mut Vec<T>) {
    scratch.clear();
    scratch.extend(order.iter().map(|&o| v[o]));
    std::mem::swap(v, scratch);
}
