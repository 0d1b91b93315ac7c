//! Simulated multi-rank domain decomposition.
//!
//! Ranks are isolated in-process states that share nothing except messages
//! and reductions. The global tree (an octree whose bucket is the global
//! bucket size) provides the cells; consecutive cells in depth-first order
//! are packed greedily onto ranks, which keeps each rank's particles
//! spatially contiguous and bounds the per-rank count imbalance by one
//! bucket. Halo particles — remote particles within interaction range of a
//! rank's owned set — are re-identified every step and exchanged through
//! explicit `Vec<f64>` buffers over [`Channels`].
//!
//! The halo-set computation itself runs centrally in this harness; it stands
//! in for the tree-walk negotiation a networked transport would perform, and
//! its outcome (who sends what to whom) is what the communication log
//! records.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::octree::Octree;
use crate::reduce::pairwise_sum;

/// Assignment of global-tree cells to simulated ranks.
#[derive(Debug, Clone)]
pub struct DomainLayout {
    pub rank_count: usize,
    pub global_bucket_size: usize,
    /// Rank of each cell, indexed like the tree's leaf list.
    pub cell_rank: Vec<u32>,
    /// Owned range per rank in the tree's depth-first slot space.
    pub owned_ranges: Vec<Range<usize>>,
    pub total_particles: usize,
}

impl DomainLayout {
    pub fn owned_count(&self, rank: usize) -> usize {
        self.owned_ranges[rank].len()
    }

    /// Largest deviation of any rank's owned count from the ideal share.
    pub fn max_imbalance(&self) -> f64 {
        let ideal = self.total_particles as f64 / self.rank_count as f64;
        self.owned_ranges
            .iter()
            .map(|r| (r.len() as f64 - ideal).abs())
            .fold(0.0, f64::max)
    }

    /// The guaranteed bound on relative imbalance, in percent:
    /// `global_bucket_size / particles_per_rank * 100`.
    pub fn imbalance_bound_percent(&self) -> f64 {
        let per_rank = self.total_particles as f64 / self.rank_count as f64;
        self.global_bucket_size as f64 / per_rank * 100.0
    }
}

/// Pack consecutive depth-first cells onto ranks, targeting `n / rank_count`
/// particles each. Ranks advance once their cumulative count passes their
/// share boundary, so no rank deviates from the ideal by more than one cell
/// (at most `global_bucket_size` particles).
pub fn assign_cells(
    tree: &Octree,
    rank_count: usize,
    global_bucket_size: usize,
) -> Result<DomainLayout> {
    if rank_count == 0 {
        return Err(Error::Config("rank_count must be >= 1".into()));
    }
    let cells = tree.leaves();
    if rank_count > cells.len() {
        return Err(Error::TooManyRanks {
            ranks: rank_count,
            cells: cells.len(),
        });
    }
    let n: usize = cells.iter().map(|&c| tree.node(c as usize).count).sum();
    let mut cell_rank = vec![0u32; cells.len()];
    let mut boundaries = vec![0usize; rank_count + 1];
    let mut rank = 0usize;
    let mut cum = 0usize;
    for (ci, &cell) in cells.iter().enumerate() {
        cell_rank[ci] = rank as u32;
        cum += tree.node(cell as usize).count;
        while rank < rank_count - 1
            && cum as f64 >= (rank + 1) as f64 * n as f64 / rank_count as f64
        {
            rank += 1;
            boundaries[rank] = cum;
        }
    }
    for r in rank + 1..=rank_count {
        boundaries[r] = n;
    }
    let owned_ranges = (0..rank_count)
        .map(|r| boundaries[r]..boundaries[r + 1])
        .collect();
    Ok(DomainLayout {
        rank_count,
        global_bucket_size,
        cell_rank,
        owned_ranges,
        total_particles: n,
    })
}

/// Owner rank per particle (original index space of the arrays the tree was
/// built over).
pub fn owner_per_particle(tree: &Octree, layout: &DomainLayout) -> Vec<u32> {
    let mut owner = vec![0u32; tree.dfs_order().len()];
    for (ci, &cell) in tree.leaves().iter().enumerate() {
        let (s, e) = tree.node(cell as usize).range;
        for slot in s..e {
            owner[tree.dfs_order()[slot as usize] as usize] = layout.cell_rank[ci];
        }
    }
    owner
}

/// For every rank, the remote particles within `2 h_i` (min-image in z) of
/// any particle `i` the rank owns. Sorted by global index; the sender-side
/// bookkeeping is derived from the same sets.
pub fn find_halos(
    tree: &Octree,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    h: &[f64],
    owner: &[u32],
    rank_count: usize,
) -> Vec<Vec<u32>> {
    if rank_count <= 1 {
        return vec![Vec::new(); rank_count];
    }
    let n = x.len();
    let pairs: Vec<Vec<(u32, u32)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut found = Vec::new();
            let mut out = Vec::new();
            tree.find_neighbors(x, y, z, i, 2.0 * h[i], &mut out);
            let r = owner[i];
            for &j in &out {
                if owner[j as usize] != r {
                    found.push((r, j));
                }
            }
            found
        })
        .collect();
    let mut halos = vec![Vec::new(); rank_count];
    for chunk in pairs {
        for (r, j) in chunk {
            halos[r as usize].push(j);
        }
    }
    for set in halos.iter_mut() {
        set.sort_unstable();
        set.dedup();
    }
    halos
}

/// One in-flight message: explicit flat buffer of f64 slots.
#[derive(Debug, Clone)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    pub payload: Vec<f64>,
}

/// Point-to-point channels between simulated ranks.
///
/// During a halo phase only rank pairs with a shared interaction boundary
/// may talk; sending outside the allowed set is a contract violation and
/// asserts.
#[derive(Debug)]
pub struct Channels {
    queues: Vec<VecDeque<Message>>,
    allowed: Option<HashSet<(u32, u32)>>,
}

impl Channels {
    pub fn new(rank_count: usize) -> Self {
        Self {
            queues: vec![VecDeque::new(); rank_count],
            allowed: None,
        }
    }

    /// Restrict senders/receivers for the current phase (`None` = no
    /// restriction, used for migration).
    pub fn set_allowed_pairs(&mut self, pairs: Option<HashSet<(u32, u32)>>) {
        self.allowed = pairs;
    }

    pub fn send(&mut self, from: usize, to: usize, payload: Vec<f64>) {
        if let Some(allowed) = &self.allowed {
            assert!(
                allowed.contains(&(from as u32, to as u32)),
                "rank {from} sent to rank {to} without a shared halo boundary"
            );
        }
        self.queues[to].push_back(Message { from, to, payload });
    }

    pub fn recv(&mut self, to: usize) -> Option<Message> {
        self.queues[to].pop_front()
    }

    pub fn pending(&self, to: usize) -> usize {
        self.queues[to].len()
    }
}

/// Reduction operator of the simulated collectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Min,
    Sum,
}

/// Per-step communication record: point-to-point matrix plus counters for
/// global synchronizations and halo-exchange phases.
#[derive(Debug, Default, Clone)]
pub struct CommLog {
    /// step -> (sender, receiver) -> (bytes, messages). Step 0 is reserved
    /// for initialization traffic.
    steps: Vec<HashMap<(u32, u32), (u64, u64)>>,
    reductions: Vec<u32>,
    halo_phases: Vec<u32>,
}

impl CommLog {
    pub fn new() -> Self {
        let mut log = Self::default();
        log.begin_step(); // step 0: init bucket
        log
    }

    pub fn begin_step(&mut self) {
        self.steps.push(HashMap::new());
        self.reductions.push(0);
        self.halo_phases.push(0);
    }

    pub fn current_step(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn log_message(&mut self, sender: usize, receiver: usize, bytes: u64) {
        let e = self
            .steps
            .last_mut()
            .unwrap()
            .entry((sender as u32, receiver as u32))
            .or_insert((0, 0));
        e.0 += bytes;
        e.1 += 1;
    }

    pub fn count_reduction(&mut self) {
        *self.reductions.last_mut().unwrap() += 1;
    }

    pub fn count_halo_phase(&mut self) {
        *self.halo_phases.last_mut().unwrap() += 1;
    }

    pub fn reductions_in_step(&self, step: usize) -> u32 {
        self.reductions[step]
    }

    pub fn halo_phases_in_step(&self, step: usize) -> u32 {
        self.halo_phases[step]
    }

    pub fn total_reductions(&self) -> u64 {
        self.reductions.iter().map(|&r| r as u64).sum()
    }

    /// Communicating (sender, receiver) pairs of a step.
    pub fn matrix(&self, step: usize) -> &HashMap<(u32, u32), (u64, u64)> {
        &self.steps[step]
    }

    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    /// CSV export: `step,sender,receiver,bytes,messages`, rows sorted.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "step,sender,receiver,bytes,messages")?;
        for (step, matrix) in self.steps.iter().enumerate() {
            let mut rows: Vec<_> = matrix.iter().collect();
            rows.sort_unstable_by_key(|(k, _)| **k);
            for (&(s, r), &(bytes, msgs)) in rows {
                writeln!(w, "{step},{s},{r},{bytes},{msgs}")?;
            }
        }
        Ok(())
    }

    pub fn write_csv_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        Ok(())
    }

    /// CSV export of per-step reduction counts: `step,reductions`.
    pub fn write_reductions_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "step,reductions")?;
        for (step, r) in self.reductions.iter().enumerate() {
            writeln!(w, "{step},{r}")?;
        }
        Ok(())
    }
}

/// Deterministic reduction of per-rank contributions; increments the
/// reduction counter once.
pub fn global_reduce(log: &mut CommLog, op: ReduceOp, per_rank: &[f64]) -> f64 {
    log.count_reduction();
    match op {
        ReduceOp::Min => per_rank.iter().cloned().fold(f64::INFINITY, f64::min),
        ReduceOp::Sum => pairwise_sum(per_rank),
    }
}

/// Fused vector reduction for the domain synchronization: every rank
/// contributes `[-xmin, -ymin, -zmin, xmax, ymax, zmax]` (combined by max)
/// and its per-cell particle counts (combined by sum). One collective with a
/// custom pairwise operator, hence a single synchronization point.
pub fn domain_sync_reduce(
    log: &mut CommLog,
    bbox_parts: &[[f64; 6]],
    counts_per_rank: &[Vec<f64>],
) -> ([f64; 6], Vec<f64>) {
    log.count_reduction();
    let mut bbox = [f64::NEG_INFINITY; 6];
    for part in bbox_parts {
        for a in 0..6 {
            bbox[a] = bbox[a].max(part[a]);
        }
    }
    let cells = counts_per_rank.first().map_or(0, |c| c.len());
    let mut counts = vec![0.0; cells];
    for (slot, c) in counts.iter_mut().enumerate() {
        let per_rank: Vec<f64> = counts_per_rank.iter().map(|v| v[slot]).collect();
        *c = pairwise_sum(&per_rank);
    }
    (bbox, counts)
}
