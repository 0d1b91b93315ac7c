//! Time-step orchestration over simulated ranks.
//!
//! A single orchestration thread drives the phases of every step in a fixed
//! order; each phase fans data-parallel work out over a dedicated thread
//! pool and joins before the next phase begins. Per step there are exactly
//! three halo-exchange phases (positions/velocities, then densities and
//! pressures, then grad-h and IAD coefficients) and at most three global
//! synchronizations: the fused domain reduction, the time-step minimum, and
//! the optional conserved-quantity sums.
//!
//! Results are independent of both the worker and the rank count: neighbor
//! contributions are consumed in a geometry-keyed canonical order and all
//! conserved-quantity sums run through fixed-order pairwise reductions.

use std::collections::HashSet;
use std::io::Write as IoWrite;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use crate::checkpoint::{self, CheckpointMeta};
use crate::domain::{
    assign_cells, domain_sync_reduce, find_halos, global_reduce, owner_per_particle, Channels,
    CommLog, DomainLayout, ReduceOp,
};
use crate::error::{Error, Result};
use crate::integrator;
use crate::kernel::Kernel;
use crate::octree::{morton_key, Aabb, Octree, OctreeParams, PeriodicZ};
use crate::particles::ParticleSystem;
use crate::physics::{self, AvConfig, EosConfig};
use crate::reduce::{pairwise_sum, pairwise_sum_by};
use crate::sqpatch::{self, SquarePatchConfig};

/// Slots of one particle in a migration buffer: 24 state fields plus the id.
const MIGRATION_SLOTS: u64 = 25;
/// Halo exchange 1: id, position, velocity, h, m.
const X1_SLOTS: u64 = 9;
/// Halo exchange 2: rho, p, c.
const X2_SLOTS: u64 = 3;
/// Halo exchange 3: omega, six IAD entries, fallback flag.
const X3_SLOTS: u64 = 8;

/// A fresh run's first step has no previous step for the growth cap to
/// reference; it starts at this fraction of the CFL bound and the
/// 10%-per-step growth recovers the full step within ~25 steps. Start-up
/// transients (the initial particle distribution is never exactly
/// force-consistent at the free surface) are then integrated at resolved
/// step sizes instead of injecting spurious kick energy.
const FIRST_STEP_SAFETY: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub patch: SquarePatchConfig,
    pub steps: usize,
    /// Checkpoint cadence in steps; 0 writes only the initial checkpoint.
    pub checkpoint_every: usize,
    pub ranks: usize,
    /// Worker threads; 0 picks the library default.
    pub threads: usize,
    pub kernel_n: f64,
    pub use_table: bool,
    pub track_energy: bool,
    pub out_dir: Option<PathBuf>,
    /// Keep smoothing lengths fixed (no per-step adaptation).
    pub uniform_h: bool,
    pub alpha: f64,
    pub max_neighbors: usize,
    pub courant: f64,
    /// Local tree bucket.
    pub bucket_size: usize,
    /// Global (shared top tree) bucket; bounds the assignment imbalance.
    pub global_bucket_size: usize,
    pub bbox_slack: f64,
    /// Resume from a checkpoint instead of generating initial conditions.
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            patch: SquarePatchConfig::default(),
            steps: 10,
            checkpoint_every: 0,
            ranks: 1,
            threads: 0,
            kernel_n: 6.0,
            use_table: true,
            track_energy: false,
            out_dir: None,
            uniform_h: false,
            alpha: 1.0,
            max_neighbors: 512,
            courant: physics::COURANT_DEFAULT,
            bucket_size: 64,
            global_bucket_size: 128,
            bbox_slack: 0.005,
            resume: None,
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.ranks == 0 {
            return Err(Error::Config("ranks must be >= 1".into()));
        }
        if self.max_neighbors == 0 || self.bucket_size == 0 || self.global_bucket_size == 0 {
            return Err(Error::Config(
                "bucket sizes and neighbor capacity must be positive".into(),
            ));
        }
        if !(self.courant > 0.0) {
            return Err(Error::Config("courant factor must be positive".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("viscosity alpha must be >= 0".into()));
        }
        if self.resume.is_none() {
            self.patch.validate()?;
        }
        Ok(())
    }
}

/// Step phases, in execution order (the timing report follows this order).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Phase {
    DomainSync = 0,
    Migration,
    BuildTree,
    HaloDiscovery,
    HaloExchange,
    FindNeighbors,
    Density,
    Eos,
    OmegaIad,
    MomentumEnergy,
    Timestep,
    UpdateQuantities,
    Diagnostics,
    Checkpoint,
}

pub const PHASE_COUNT: usize = 14;

pub const PHASE_NAMES: [&str; PHASE_COUNT] = [
    "domain sync",
    "migration",
    "build tree",
    "halo discovery",
    "halo exchange",
    "find neighbors",
    "density",
    "eos",
    "omega+iad",
    "momentum+energy",
    "timestep",
    "update quantities",
    "diagnostics",
    "checkpoint",
];

#[derive(Debug, Clone, Default)]
pub struct Timings {
    pub per_phase: [Duration; PHASE_COUNT],
    pub total: Duration,
    pub steps: usize,
}

impl Timings {
    pub fn accounted(&self) -> Duration {
        self.per_phase.iter().sum()
    }

    pub fn report(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "phase breakdown (totals over {} steps):\n",
            self.steps
        ));
        let total_s = self.total.as_secs_f64();
        for (name, d) in PHASE_NAMES.iter().zip(self.per_phase.iter()) {
            let s = d.as_secs_f64();
            out.push_str(&format!(
                "  {name:<18} {s:>10.4} s  {:>5.1}%\n",
                if total_s > 0.0 {
                    100.0 * s / total_s
                } else {
                    0.0
                }
            ));
        }
        out.push_str(&format!("  {:<18} {total_s:>10.4} s\n", "total"));
        out
    }
}

/// One row of the diagnostics log. Conserved quantities are NaN when energy
/// tracking (and with it the third reduction) is disabled.
#[derive(Debug, Clone, Copy)]
pub struct DiagRow {
    pub iter: u64,
    pub t: f64,
    pub dt: f64,
    pub etot: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
    pub neigh_mean: f64,
    pub halo_ratio_mean: f64,
    pub halo_ratio_max: f64,
}

pub const DIAG_HEADER: &str =
    "iter,t,dt,Etot,px,py,pz,Lx,Ly,Lz,neigh_mean,halo_ratio_mean,halo_ratio_max";

impl DiagRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.t,
            self.dt,
            self.etot,
            self.px,
            self.py,
            self.pz,
            self.lx,
            self.ly,
            self.lz,
            self.neigh_mean,
            self.halo_ratio_mean,
            self.halo_ratio_max
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepReport {
    pub dt: f64,
    pub neigh_mean: f64,
    pub truncated_neighbors: u64,
    pub omega_clamped: u64,
    pub iad_fallbacks: u64,
    pub skipped_pairs: u64,
    pub energy_clamped: u64,
    pub halo_ratio_mean: f64,
    pub halo_ratio_max: f64,
    pub migrated: u64,
}

/// One simulated rank: its particle storage (owned first, halos appended).
struct RankState {
    sys: ParticleSystem,
    owned: usize,
}

struct PairPlan {
    from: usize,
    to: usize,
    /// Sender-local indices, in the order they are serialized.
    send_idx: Vec<u32>,
    /// Receiver-local halo slots, aligned with `send_idx`.
    recv_slots: Vec<u32>,
}

pub struct Simulation {
    cfg: RunConfig,
    kernel: Kernel,
    eos: EosConfig,
    av: AvConfig,
    pz: PeriodicZ,
    pool: rayon::ThreadPool,
    ranks: Vec<RankState>,
    channels: Channels,
    log: CommLog,
    bbox: Aabb,
    layout: Option<DomainLayout>,
    plan: Vec<PairPlan>,
    iter: u64,
    time: f64,
    dt_prev: Option<f64>,
    u_floor: f64,
    timings: Timings,
    diag: Vec<DiagRow>,
    // Gather scratch: positions/h of all owned particles in rank order, with
    // (rank, local index) back references.
    gx: Vec<f64>,
    gy: Vec<f64>,
    gz: Vec<f64>,
    gh: Vec<f64>,
    gowner: Vec<u32>,
    gback: Vec<(u32, u32)>,
}

impl Simulation {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let kernel = Kernel::new(cfg.kernel_n, cfg.use_table)?;
        let eos = cfg.patch.eos()?;
        let pz = cfg.patch.periodic_z();

        let (sys, meta) = match &cfg.resume {
            Some(path) => checkpoint::read_file(path, cfg.max_neighbors)?,
            None => {
                let (sys, _) = sqpatch::generate_with_capacity(&cfg.patch, cfg.max_neighbors)?;
                (
                    sys,
                    CheckpointMeta {
                        iteration: 0,
                        time: 0.0,
                        dt_prev: 0.0,
                    },
                )
            }
        };
        if sys.is_empty() {
            return Err(Error::EmptySystem);
        }
        // Floor on internal energy, 1e-12 of the configured initial mean.
        // Derived from the config (not the loaded state) so a resumed run
        // clamps at exactly the same threshold.
        let u_floor = 1e-12 * cfg.patch.u0;

        let mut sim = Self {
            channels: Channels::new(cfg.ranks),
            log: CommLog::new(),
            pool,
            kernel,
            eos,
            av: AvConfig { alpha: cfg.alpha },
            pz,
            ranks: Vec::new(),
            bbox: Aabb {
                min: [0.0; 3],
                max: [1.0; 3],
            },
            layout: None,
            plan: Vec::new(),
            iter: meta.iteration,
            time: meta.time,
            dt_prev: if meta.dt_prev > 0.0 {
                Some(meta.dt_prev)
            } else {
                None
            },
            u_floor,
            timings: Timings::default(),
            diag: Vec::new(),
            gx: Vec::new(),
            gy: Vec::new(),
            gz: Vec::new(),
            gh: Vec::new(),
            gowner: Vec::new(),
            gback: Vec::new(),
            cfg,
        };
        sim.distribute_initial(sys)?;
        Ok(sim)
    }

    /// Initial distribution: build the global tree once and hand every rank
    /// its slice. Logged under step 0 (initialization).
    fn distribute_initial(&mut self, sys: ParticleSystem) -> Result<()> {
        let parts = [bbox_partial(&sys.x, &sys.y, &sys.z)];
        let counts = vec![vec![sys.len() as f64]];
        let (folded, _) = domain_sync_reduce(&mut self.log, &parts, &counts);
        self.bbox = pad_bbox(folded, self.cfg.bbox_slack, self.pz)?;
        let params = OctreeParams {
            bucket_size: self.cfg.global_bucket_size,
            periodic_z: Some(self.pz),
            ..Default::default()
        };
        let tree = Octree::build(&sys.x, &sys.y, &sys.z, self.bbox, params)?;
        let layout = assign_cells(&tree, self.cfg.ranks, self.cfg.global_bucket_size)?;
        let order = tree.dfs_order();
        self.ranks = layout
            .owned_ranges
            .iter()
            .map(|range| {
                let mut local = ParticleSystem::with_len(0, self.cfg.max_neighbors);
                for slot in range.clone() {
                    local.push_from(&sys, order[slot] as usize);
                }
                let owned = local.len();
                RankState { sys: local, owned }
            })
            .collect();
        self.layout = Some(layout);
        Ok(())
    }

    pub fn particle_count(&self) -> usize {
        self.ranks.iter().map(|r| r.owned).sum()
    }

    pub fn rank_count(&self) -> usize {
        self.cfg.ranks
    }

    pub fn commlog(&self) -> &CommLog {
        &self.log
    }

    pub fn layout(&self) -> Option<&DomainLayout> {
        self.layout.as_ref()
    }

    pub fn timings(&self) -> &Timings {
        &self.timings
    }

    pub fn diagnostics_rows(&self) -> &[DiagRow] {
        &self.diag
    }

    pub fn iteration(&self) -> u64 {
        self.iter
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn dt_prev(&self) -> Option<f64> {
        self.dt_prev
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    /// Owned particles of every rank, concatenated (checkpoint/test view).
    pub fn gather_state(&self) -> ParticleSystem {
        let mut out = ParticleSystem::with_len(0, self.cfg.max_neighbors);
        for rank in &self.ranks {
            for i in 0..rank.owned {
                out.push_from(&rank.sys, i);
            }
        }
        out
    }

    /// Per-rank halo-to-owned ratios for the current step.
    pub fn halo_ratios(&self) -> Vec<f64> {
        self.ranks
            .iter()
            .map(|r| (r.sys.len() - r.owned) as f64 / r.owned.max(1) as f64)
            .collect()
    }

    fn gather_positions(&mut self) {
        self.gx.clear();
        self.gy.clear();
        self.gz.clear();
        self.gh.clear();
        self.gowner.clear();
        self.gback.clear();
        for (r, rank) in self.ranks.iter().enumerate() {
            for i in 0..rank.owned {
                self.gx.push(rank.sys.x[i]);
                self.gy.push(rank.sys.y[i]);
                self.gz.push(rank.sys.z[i]);
                self.gh.push(rank.sys.h[i]);
                self.gowner.push(r as u32);
                self.gback.push((r as u32, i as u32));
            }
        }
    }

    /// Advance one full time-step.
    pub fn step(&mut self) -> Result<StepReport> {
        let step_start = Instant::now();
        self.log.begin_step();
        let mut report = StepReport::default();

        // Domain sync: one fused global reduction folds the domain extent
        // and the particle census; the shared top tree is then refreshed.
        let t0 = Instant::now();
        self.gather_positions();
        let parts: Vec<[f64; 6]> = self
            .ranks
            .iter()
            .map(|r| {
                bbox_partial(
                    &r.sys.x[..r.owned],
                    &r.sys.y[..r.owned],
                    &r.sys.z[..r.owned],
                )
            })
            .collect();
        let counts: Vec<Vec<f64>> = self.ranks.iter().map(|r| vec![r.owned as f64]).collect();
        let (folded, _) = domain_sync_reduce(&mut self.log, &parts, &counts);
        self.bbox = pad_bbox(folded, self.cfg.bbox_slack, self.pz)?;
        let gparams = OctreeParams {
            bucket_size: self.cfg.global_bucket_size,
            periodic_z: Some(self.pz),
            ..Default::default()
        };
        let gtree = Octree::build(&self.gx, &self.gy, &self.gz, self.bbox, gparams)?;
        let layout = assign_cells(&gtree, self.cfg.ranks, self.cfg.global_bucket_size)?;
        let owner_new = owner_per_particle(&gtree, &layout);
        self.record(Phase::DomainSync, t0);

        // Migration: transfer ownership of particles whose cell moved rank,
        // then rebuild each rank's owned storage in depth-first slot order.
        let t0 = Instant::now();
        report.migrated = self.migrate(&gtree, &layout, &owner_new);
        self.layout = Some(layout);
        self.record(Phase::Migration, t0);

        // Local trees: depth-first sort of each rank's owned particles.
        let t0 = Instant::now();
        let lparams = OctreeParams {
            bucket_size: self.cfg.bucket_size,
            periodic_z: Some(self.pz),
            ..Default::default()
        };
        let mut local_trees = Vec::with_capacity(self.ranks.len());
        for rank in self.ranks.iter_mut() {
            let tree = Octree::build(&rank.sys.x, &rank.sys.y, &rank.sys.z, self.bbox, lparams)?;
            rank.sys.permute(&tree.dfs_order_usize())?;
            // Rebuild so leaf ranges index the sorted arrays directly.
            let tree = Octree::build(&rank.sys.x, &rank.sys.y, &rank.sys.z, self.bbox, lparams)?;
            local_trees.push(tree);
        }
        self.record(Phase::BuildTree, t0);

        // Halo discovery on the freshly sorted global view.
        let t0 = Instant::now();
        let halos = if self.cfg.ranks > 1 {
            self.gather_positions();
            let stree = Octree::build(&self.gx, &self.gy, &self.gz, self.bbox, lparams)?;
            let (gx, gy, gz, gh, gowner) = (&self.gx, &self.gy, &self.gz, &self.gh, &self.gowner);
            let ranks = self.cfg.ranks;
            self.pool
                .install(|| find_halos(&stree, gx, gy, gz, gh, gowner, ranks))
        } else {
            vec![Vec::new()]
        };
        self.plan = self.build_exchange_plan(&halos);
        self.record(Phase::HaloDiscovery, t0);

        // Halo exchange 1: identities, positions, velocities, h, m.
        let t0 = Instant::now();
        self.exchange_x1();
        self.record(Phase::HaloExchange, t0);
        let halo_counts: Vec<usize> = self.ranks.iter().map(|r| r.sys.len() - r.owned).collect();

        // Neighbor search over owned+halo storage, canonically ordered.
        let t0 = Instant::now();
        let mut search_trees = Vec::with_capacity(self.ranks.len());
        for (r, rank) in self.ranks.iter().enumerate() {
            if rank.sys.len() > rank.owned {
                search_trees.push(Octree::build(
                    &rank.sys.x,
                    &rank.sys.y,
                    &rank.sys.z,
                    self.bbox,
                    lparams,
                )?);
            } else {
                search_trees.push(local_trees[r].clone());
            }
        }
        let bbox = self.bbox;
        let mut owned_total = 0usize;
        let mut neigh_total = 0.0f64;
        for (rank, tree) in self.ranks.iter_mut().zip(search_trees.iter()) {
            let sys = &mut rank.sys;
            let n_local = sys.len();
            for i in 0..n_local {
                sys.sort_key[i] = morton_key(sys.x[i], sys.y[i], sys.z[i], &bbox);
            }
            let owned = rank.owned;
            sys.neighbors.reset(n_local);
            let (x, y, z, h, keys) = (&sys.x, &sys.y, &sys.z, &sys.h, &sys.sort_key);
            let (cap, idx_flat, counts) = sys.neighbors.raw_parts_mut();
            let truncated: u64 = self.pool.install(|| {
                use rayon::prelude::*;
                idx_flat
                    .par_chunks_mut(cap)
                    .zip(counts.par_iter_mut())
                    .enumerate()
                    .take(owned)
                    .map_init(
                        || (Vec::new(), Vec::new()),
                        |(scratch, keyed): &mut (Vec<u32>, Vec<([u64; 4], u32)>),
                         (i, (row, cnt))| {
                            tree.find_neighbors(x, y, z, i, 2.0 * h[i], scratch);
                            // Canonical, layout-independent consumption order:
                            // geometric keys only, gathered once per candidate.
                            keyed.clear();
                            keyed.extend(scratch.iter().map(|&j| {
                                let ju = j as usize;
                                (
                                    [keys[ju], x[ju].to_bits(), y[ju].to_bits(), z[ju].to_bits()],
                                    j,
                                )
                            }));
                            keyed.sort_unstable();
                            let kept = keyed.len().min(cap);
                            for (slot, (_, j)) in row.iter_mut().zip(keyed.iter()) {
                                *slot = *j;
                            }
                            *cnt = kept as u32;
                            (keyed.len() - kept) as u64
                        },
                    )
                    .sum()
            });
            sys.neighbors.add_truncated(truncated);
            report.truncated_neighbors += truncated;
            neigh_total += sys.neighbors.mean_count(owned) * owned as f64;
            owned_total += owned;
        }
        report.neigh_mean = neigh_total / owned_total as f64;
        self.record(Phase::FindNeighbors, t0);

        // Density.
        let t0 = Instant::now();
        for rank in self.ranks.iter_mut() {
            let owned = rank.owned;
            let (sys, kernel, pz) = (&mut rank.sys, &self.kernel, self.pz);
            self.pool
                .install(|| physics::compute_density(sys, kernel, Some(pz), owned))?;
        }
        self.record(Phase::Density, t0);

        // Equation of state.
        let t0 = Instant::now();
        for rank in self.ranks.iter_mut() {
            let owned = rank.owned;
            let (sys, eos) = (&mut rank.sys, &self.eos);
            self.pool.install(|| physics::apply_eos(sys, eos, owned));
        }
        self.record(Phase::Eos, t0);

        // Halo exchange 2: densities, pressures, sound speeds.
        let t0 = Instant::now();
        self.exchange_fields::<3>(
            X2_SLOTS,
            |sys, i| [sys.rho[i], sys.p[i], sys.c[i]],
            |sys, s, v| {
                sys.rho[s] = v[0];
                sys.p[s] = v[1];
                sys.c[s] = v[2];
            },
        );
        self.record(Phase::HaloExchange, t0);

        // Grad-h factors and IAD coefficients.
        let t0 = Instant::now();
        for rank in self.ranks.iter_mut() {
            let owned = rank.owned;
            let (sys, kernel, pz) = (&mut rank.sys, &self.kernel, self.pz);
            let st = self
                .pool
                .install(|| physics::compute_omega_iad(sys, kernel, Some(pz), owned));
            report.omega_clamped += st.omega_clamped;
            report.iad_fallbacks += st.iad_fallbacks;
        }
        self.record(Phase::OmegaIad, t0);

        // Halo exchange 3: grad-h factors and IAD coefficients.
        let t0 = Instant::now();
        self.exchange_fields::<8>(
            X3_SLOTS,
            |sys, i| {
                [
                    sys.omega[i],
                    sys.c11[i],
                    sys.c12[i],
                    sys.c13[i],
                    sys.c22[i],
                    sys.c23[i],
                    sys.c33[i],
                    sys.iad_fallback[i] as f64,
                ]
            },
            |sys, s, v| {
                sys.omega[s] = v[0];
                sys.c11[s] = v[1];
                sys.c12[s] = v[2];
                sys.c13[s] = v[3];
                sys.c22[s] = v[4];
                sys.c23[s] = v[5];
                sys.c33[s] = v[6];
                sys.iad_fallback[s] = v[7] as u8;
            },
        );
        self.record(Phase::HaloExchange, t0);

        // Momentum and energy rates.
        let t0 = Instant::now();
        for rank in self.ranks.iter_mut() {
            let owned = rank.owned;
            let (sys, kernel, av, pz) = (&mut rank.sys, &self.kernel, &self.av, self.pz);
            let s = self
                .pool
                .install(|| physics::compute_momentum_energy(sys, kernel, av, Some(pz), owned));
            report.skipped_pairs += s.skipped_pairs;
        }
        self.record(Phase::MomentumEnergy, t0);

        // Global time-step reduction.
        let t0 = Instant::now();
        let bounds: Vec<f64> = self
            .ranks
            .iter()
            .map(|r| physics::raw_timestep_bound(&r.sys, r.owned, self.cfg.courant))
            .collect();
        let raw = global_reduce(&mut self.log, ReduceOp::Min, &bounds);
        let mut dt = physics::finalize_timestep(raw, self.dt_prev)?;
        if self.dt_prev.is_none() {
            dt *= FIRST_STEP_SAFETY;
        }
        report.dt = dt;
        self.record(Phase::Timestep, t0);

        // Advance positions, velocities, energy and smoothing lengths.
        let t0 = Instant::now();
        let h_max = self.bbox.diagonal();
        for rank in self.ranks.iter_mut() {
            let owned = rank.owned;
            {
                let (sys, pz, dt_prev) = (&mut rank.sys, self.pz, self.dt_prev);
                self.pool
                    .install(|| integrator::advance_positions(sys, dt, dt_prev, Some(pz), owned))?;
            }
            report.energy_clamped +=
                integrator::advance_energy(&mut rank.sys, dt, self.dt_prev, self.u_floor, owned);
            if !self.cfg.uniform_h {
                integrator::update_smoothing_length(
                    &mut rank.sys,
                    self.cfg.patch.target_neighbors,
                    1e-6,
                    h_max,
                    owned,
                );
            }
        }
        self.record(Phase::UpdateQuantities, t0);

        // Diagnostics and the optional conserved-quantity reduction.
        let t0 = Instant::now();
        let ratios: Vec<f64> = halo_counts
            .iter()
            .zip(self.ranks.iter())
            .map(|(&hc, r)| hc as f64 / r.owned.max(1) as f64)
            .collect();
        report.halo_ratio_mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        report.halo_ratio_max = ratios.iter().cloned().fold(0.0, f64::max);
        self.dt_prev = Some(dt);
        self.time += dt;
        self.iter += 1;
        let row = self.diagnostics(dt, &report);
        self.diag.push(row);
        self.record(Phase::Diagnostics, t0);

        self.timings.total += step_start.elapsed();
        self.timings.steps += 1;
        Ok(report)
    }

    fn record(&mut self, phase: Phase, start: Instant) {
        self.timings.per_phase[phase as usize] += start.elapsed();
    }

    /// Conserved-quantity record. The sums cost one global reduction and are
    /// only computed when energy tracking is enabled.
    fn diagnostics(&mut self, dt: f64, report: &StepReport) -> DiagRow {
        let mut row = DiagRow {
            iter: self.iter,
            t: self.time,
            dt,
            etot: f64::NAN,
            px: f64::NAN,
            py: f64::NAN,
            pz: f64::NAN,
            lx: f64::NAN,
            ly: f64::NAN,
            lz: f64::NAN,
            neigh_mean: report.neigh_mean,
            halo_ratio_mean: report.halo_ratio_mean,
            halo_ratio_max: report.halo_ratio_max,
        };
        if !self.cfg.track_energy {
            return row;
        }
        let per_rank: Vec<[f64; 7]> = self
            .ranks
            .iter()
            .map(|r| {
                let s = &r.sys;
                let n = r.owned;
                [
                    pairwise_sum_by(n, &|i| s.m[i] * s.vx[i]),
                    pairwise_sum_by(n, &|i| s.m[i] * s.vy[i]),
                    pairwise_sum_by(n, &|i| s.m[i] * s.vz[i]),
                    pairwise_sum_by(n, &|i| s.m[i] * (s.y[i] * s.vz[i] - s.z[i] * s.vy[i])),
                    pairwise_sum_by(n, &|i| s.m[i] * (s.z[i] * s.vx[i] - s.x[i] * s.vz[i])),
                    pairwise_sum_by(n, &|i| s.m[i] * (s.x[i] * s.vy[i] - s.y[i] * s.vx[i])),
                    pairwise_sum_by(n, &|i| {
                        s.m[i]
                            * (s.u[i]
                                + 0.5 * (s.vx[i] * s.vx[i] + s.vy[i] * s.vy[i] + s.vz[i] * s.vz[i]))
                    }),
                ]
            })
            .collect();
        // One vector reduction across ranks.
        self.log.count_reduction();
        let mut sums = [0.0f64; 7];
        for (k, sum) in sums.iter_mut().enumerate() {
            let vals: Vec<f64> = per_rank.iter().map(|v| v[k]).collect();
            *sum = pairwise_sum(&vals);
        }
        row.px = sums[0];
        row.py = sums[1];
        row.pz = sums[2];
        row.lx = sums[3];
        row.ly = sums[4];
        row.lz = sums[5];
        row.etot = sums[6];
        row
    }

    /// Rebuild every rank's owned storage in global depth-first slot order
    /// and log a migration message for each (old, new) owner pair.
    fn migrate(&mut self, gtree: &Octree, layout: &DomainLayout, owner_new: &[u32]) -> u64 {
        // Last step's halo storage is stale either way.
        for rank in self.ranks.iter_mut() {
            rank.sys.truncate(rank.owned);
        }
        let mut moved_pairs: std::collections::HashMap<(u32, u32), u64> =
            std::collections::HashMap::new();
        let mut migrated = 0u64;
        for (g, &new_owner) in owner_new.iter().enumerate() {
            let old_owner = self.gowner[g];
            if old_owner != new_owner {
                *moved_pairs.entry((old_owner, new_owner)).or_insert(0) += 1;
                migrated += 1;
            }
        }
        if migrated == 0 {
            return 0;
        }
        for (&(from, to), &count) in moved_pairs.iter() {
            self.log
                .log_message(from as usize, to as usize, count * MIGRATION_SLOTS * 8);
        }
        let order = gtree.dfs_order();
        let new_ranks: Vec<RankState> = layout
            .owned_ranges
            .iter()
            .map(|range| {
                let mut local = ParticleSystem::with_len(0, self.cfg.max_neighbors);
                for slot in range.clone() {
                    let g = order[slot] as usize;
                    let (r, i) = self.gback[g];
                    local.push_from(&self.ranks[r as usize].sys, i as usize);
                }
                let owned = local.len();
                RankState { sys: local, owned }
            })
            .collect();
        self.ranks = new_ranks;
        migrated
    }

    /// Turn per-rank halo sets (global indices) into per-pair send/recv
    /// plans. Halo slots are appended in (sender rank, global index) order.
    fn build_exchange_plan(&self, halos: &[Vec<u32>]) -> Vec<PairPlan> {
        let offsets: Vec<usize> = {
            let mut acc = 0;
            let mut v = Vec::with_capacity(self.ranks.len() + 1);
            v.push(0);
            for r in &self.ranks {
                acc += r.owned;
                v.push(acc);
            }
            v
        };
        let owner_of = |g: u32| -> usize {
            match offsets.binary_search(&(g as usize + 1)) {
                Ok(r) => r - 1,
                Err(r) => r - 1,
            }
        };
        let mut plan = Vec::new();
        for (to, set) in halos.iter().enumerate() {
            let mut slot = self.ranks[to].owned as u32;
            let mut k = 0usize;
            while k < set.len() {
                let from = owner_of(set[k]);
                let mut send_idx = Vec::new();
                let mut recv_slots = Vec::new();
                while k < set.len() && owner_of(set[k]) == from {
                    send_idx.push(set[k] - offsets[from] as u32);
                    recv_slots.push(slot);
                    slot += 1;
                    k += 1;
                }
                plan.push(PairPlan {
                    from,
                    to,
                    send_idx,
                    recv_slots,
                });
            }
        }
        plan
    }

    fn allowed_pairs(&self) -> HashSet<(u32, u32)> {
        self.plan
            .iter()
            .map(|p| (p.from as u32, p.to as u32))
            .collect()
    }

    /// First halo exchange: create the halo slots with identity, position,
    /// velocity, smoothing length and mass.
    fn exchange_x1(&mut self) {
        self.log.count_halo_phase();
        self.channels.set_allowed_pairs(Some(self.allowed_pairs()));
        for p in &self.plan {
            let src = &self.ranks[p.from].sys;
            let mut buf = Vec::with_capacity(p.send_idx.len() * X1_SLOTS as usize);
            for &i in &p.send_idx {
                let i = i as usize;
                buf.extend_from_slice(&[
                    f64::from_bits(src.id[i]),
                    src.x[i],
                    src.y[i],
                    src.z[i],
                    src.vx[i],
                    src.vy[i],
                    src.vz[i],
                    src.h[i],
                    src.m[i],
                ]);
            }
            self.channels.send(p.from, p.to, buf);
            self.log
                .log_message(p.from, p.to, p.send_idx.len() as u64 * X1_SLOTS * 8);
        }
        let mut halo = ParticleSystem::with_len(1, 1);
        for p in &self.plan {
            let msg = self.channels.recv(p.to).expect("missing halo message");
            debug_assert_eq!(msg.from, p.from);
            let dst = &mut self.ranks[p.to].sys;
            for chunk in msg.payload.chunks_exact(X1_SLOTS as usize) {
                halo.id[0] = chunk[0].to_bits();
                halo.x[0] = chunk[1];
                halo.y[0] = chunk[2];
                halo.z[0] = chunk[3];
                halo.vx[0] = chunk[4];
                halo.vy[0] = chunk[5];
                halo.vz[0] = chunk[6];
                halo.h[0] = chunk[7];
                halo.m[0] = chunk[8];
                dst.push_from(&halo, 0);
            }
        }
    }

    /// Later halo exchanges: refresh per-phase fields of existing halo slots.
    fn exchange_fields<const K: usize>(
        &mut self,
        slots: u64,
        pack: impl Fn(&ParticleSystem, usize) -> [f64; K],
        unpack: impl Fn(&mut ParticleSystem, usize, [f64; K]),
    ) {
        debug_assert_eq!(slots as usize, K);
        self.log.count_halo_phase();
        if self.plan.is_empty() {
            return;
        }
        self.channels.set_allowed_pairs(Some(self.allowed_pairs()));
        for p in &self.plan {
            let src = &self.ranks[p.from].sys;
            let mut buf = Vec::with_capacity(p.send_idx.len() * K);
            for &i in &p.send_idx {
                buf.extend_from_slice(&pack(src, i as usize));
            }
            self.channels.send(p.from, p.to, buf);
            self.log
                .log_message(p.from, p.to, p.send_idx.len() as u64 * slots * 8);
        }
        for p in &self.plan {
            let msg = self.channels.recv(p.to).expect("missing halo message");
            let dst = &mut self.ranks[p.to].sys;
            for (chunk, &slot) in msg.payload.chunks_exact(K).zip(p.recv_slots.iter()) {
                let mut arr = [0.0; K];
                arr.copy_from_slice(chunk);
                unpack(dst, slot as usize, arr);
            }
        }
    }

    /// Write a checkpoint of the gathered state.
    pub fn write_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let sys = self.gather_state();
        let meta = CheckpointMeta {
            iteration: self.iter,
            time: self.time,
            dt_prev: self.dt_prev.unwrap_or(0.0),
        };
        checkpoint::write_file(path, &sys, &meta)
    }
}

fn bbox_partial(x: &[f64], y: &[f64], z: &[f64]) -> [f64; 6] {
    let mut part = [f64::NEG_INFINITY; 6];
    for i in 0..x.len() {
        part[0] = part[0].max(-x[i]);
        part[1] = part[1].max(-y[i]);
        part[2] = part[2].max(-z[i]);
        part[3] = part[3].max(x[i]);
        part[4] = part[4].max(y[i]);
        part[5] = part[5].max(z[i]);
    }
    part
}

fn pad_bbox(folded: [f64; 6], slack: f64, pz: PeriodicZ) -> Result<Aabb> {
    if folded.iter().any(|v| !v.is_finite()) {
        return Err(Error::EmptySystem);
    }
    let mut min = [-folded[0], -folded[1], -folded[2]];
    let mut max = [folded[3], folded[4], folded[5]];
    for a in 0..2 {
        let ext = max[a] - min[a];
        let pad = if ext > 0.0 { slack * ext } else { slack };
        min[a] -= pad;
        max[a] += pad;
    }
    min[2] = pz.min;
    max[2] = pz.min + pz.len;
    Ok(Aabb { min, max })
}

/// Summary of a completed run.
#[derive(Debug)]
pub struct RunSummary {
    pub steps_done: usize,
    pub final_time: f64,
    pub timings: Timings,
    pub diag: Vec<DiagRow>,
    pub timing_report: String,
}

/// Run a configured simulation to completion, writing diagnostics, the
/// communication log and checkpoints under the output directory.
pub fn run(cfg: RunConfig) -> Result<RunSummary> {
    let out_dir = cfg.out_dir.clone();
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let steps = cfg.steps;
    let checkpoint_every = cfg.checkpoint_every;
    let mut sim = Simulation::new(cfg)?;

    if let Some(dir) = &out_dir {
        sim.write_checkpoint(&dir.join(format!("ckpt_{:06}.bin", sim.iteration())))?;
    }
    for _ in 0..steps {
        sim.step()?;
        if let Some(dir) = &out_dir {
            if checkpoint_every > 0 && sim.iteration() % checkpoint_every as u64 == 0 {
                sim.write_checkpoint(&dir.join(format!("ckpt_{:06}.bin", sim.iteration())))?;
            }
        }
    }
    if let Some(dir) = &out_dir {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("diagnostics.csv"))?);
        writeln!(f, "{DIAG_HEADER}")?;
        for row in sim.diagnostics_rows() {
            writeln!(f, "{}", row.csv())?;
        }
        sim.commlog().write_csv_file(dir.join("commlog.csv"))?;
        let mut rf = std::io::BufWriter::new(std::fs::File::create(dir.join("reductions.csv"))?);
        sim.commlog().write_reductions_csv(&mut rf)?;
    }
    let timing_report = sim.timings().report();
    Ok(RunSummary {
        steps_done: steps,
        final_time: sim.time(),
        timings: sim.timings().clone(),
        diag: sim.diagnostics_rows().to_vec(),
        timing_report,
    })
}
