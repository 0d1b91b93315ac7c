//! Octree over the 3D bounding box.
//!
//! The tree serves three roles: computing the domain bounds, producing the
//! depth-first particle ordering that keeps spatial neighbors close in
//! memory, and fixed-radius neighbor search. The z axis can be periodic, in
//! which case distances use the minimum-image convention in z; no image
//! particles are materialized.

use crate::error::{Error, Result};

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn center(&self, axis: usize) -> f64 {
        0.5 * (self.min[axis] + self.max[axis])
    }

    pub fn diagonal(&self) -> f64 {
        let dx = self.extent(0);
        let dy = self.extent(1);
        let dz = self.extent(2);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        x >= self.min[0]
            && x <= self.max[0]
            && y >= self.min[1]
            && y <= self.max[1]
            && z >= self.min[2]
            && z <= self.max[2]
    }
}

/// Periodic box in z: positions live in `[min, min + len)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodicZ {
    pub min: f64,
    pub len: f64,
}

impl PeriodicZ {
    /// Minimum-image separation `z_a - z_b` (positions assumed in-box).
    #[inline]
    pub fn min_image(&self, dz: f64) -> f64 {
        if dz > 0.5 * self.len {
            dz - self.len
        } else if dz < -0.5 * self.len {
            dz + self.len
        } else {
            dz
        }
    }

    /// Wrap a coordinate into the box.
    #[inline]
    pub fn wrap(&self, z: f64) -> f64 {
        let mut t = (z - self.min) % self.len;
        if t < 0.0 {
            t += self.len;
        }
        self.min + t
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OctreeParams {
    /// Maximum particles per leaf.
    pub bucket_size: usize,
    pub max_depth: u32,
    pub periodic_z: Option<PeriodicZ>,
}

impl Default for OctreeParams {
    fn default() -> Self {
        Self {
            bucket_size: 64,
            max_depth: 32,
            periodic_z: None,
        }
    }
}

const NO_CHILD: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct Node {
    pub bounds: Aabb,
    pub count: usize,
    pub depth: u32,
    /// Index of the first of eight consecutive children, or `NO_CHILD`.
    first_child: u32,
    /// Range into the depth-first `order` array (valid for leaves).
    pub range: (u32, u32),
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.first_child == NO_CHILD
    }

    pub fn children(&self) -> Option<std::ops::Range<usize>> {
        if self.is_leaf() {
            None
        } else {
            Some(self.first_child as usize..self.first_child as usize + 8)
        }
    }
}

/// Result of [`Octree::update`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeUpdate {
    /// Structure kept; counts, ranges and ordering refreshed.
    Refreshed,
    /// A leaf overflowed past twice the bucket size; tree rebuilt.
    Rebuilt,
}

#[derive(Debug, Clone)]
pub struct Octree {
    params: OctreeParams,
    bounds: Aabb,
    nodes: Vec<Node>,
    /// Leaf node ids in depth-first order.
    leaves: Vec<u32>,
    /// Depth-first permutation: `order[k]` is the original index of the
    /// particle in depth-first slot `k`.
    order: Vec<u32>,
}

/// Compute the bounding box of a particle cloud, expanded by `slack`
/// (fraction of the extent) per side. With periodic z the z bounds are pinned
/// to the periodic box and get no slack.
pub fn compute_bbox(
    x: &[f64],
    y: &[f64],
    z: &[f64],
    slack: f64,
    periodic_z: Option<PeriodicZ>,
) -> Result<Aabb> {
    if x.is_empty() {
        return Err(Error::EmptySystem);
    }
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for i in 0..x.len() {
        let p = [x[i], y[i], z[i]];
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    for a in 0..3 {
        let ext = max[a] - min[a];
        let pad = if ext > 0.0 { slack * ext } else { slack };
        min[a] -= pad;
        max[a] += pad;
    }
    if let Some(pz) = periodic_z {
        min[2] = pz.min;
        max[2] = pz.min + pz.len;
    }
    Ok(Aabb { min, max })
}

/// Child octant for a position given the parent's center. Points exactly on
/// a split plane go to the upper half; migration uses the same rule.
#[inline]
fn octant(cx: f64, cy: f64, cz: f64, x: f64, y: f64, z: f64) -> usize {
    ((x >= cx) as usize) | (((y >= cy) as usize) << 1) | (((z >= cz) as usize) << 2)
}

fn child_bounds(b: &Aabb, oct: usize) -> Aabb {
    let c = [b.center(0), b.center(1), b.center(2)];
    let mut min = b.min;
    let mut max = c;
    for a in 0..3 {
        if (oct >> a) & 1 == 1 {
            min[a] = c[a];
            max[a] = b.max[a];
        }
    }
    Aabb { min, max }
}

impl Octree {
    /// Build a tree over the given positions. Returns an error for particles
    /// outside the box on the non-periodic axes (x, y — and z when z is not
    /// periodic).
    pub fn build(
        x: &[f64],
        y: &[f64],
        z: &[f64],
        bounds: Aabb,
        params: OctreeParams,
    ) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::EmptySystem);
        }
        for i in 0..x.len() {
            let in_xy = x[i] >= bounds.min[0]
                && x[i] <= bounds.max[0]
                && y[i] >= bounds.min[1]
                && y[i] <= bounds.max[1];
            let in_z = match params.periodic_z {
                Some(pz) => z[i] >= pz.min && z[i] < pz.min + pz.len,
                None => z[i] >= bounds.min[2] && z[i] <= bounds.max[2],
            };
            if !in_xy || !in_z {
                return Err(Error::ParticleOutsideBox { index: i });
            }
        }
        let mut tree = Self {
            params,
            bounds,
            nodes: Vec::new(),
            leaves: Vec::new(),
            order: Vec::with_capacity(x.len()),
        };
        let all: Vec<u32> = (0..x.len() as u32).collect();
        tree.nodes.push(Node {
            bounds,
            count: all.len(),
            depth: 0,
            first_child: NO_CHILD,
            range: (0, 0),
        });
        tree.split(0, all, x, y, z);
        Ok(tree)
    }

    fn split(&mut self, node: usize, indices: Vec<u32>, x: &[f64], y: &[f64], z: &[f64]) {
        self.nodes[node].count = indices.len();
        if indices.len() <= self.params.bucket_size
            || self.nodes[node].depth >= self.params.max_depth
        {
            let start = self.order.len() as u32;
            self.order.extend_from_slice(&indices);
            self.nodes[node].range = (start, self.order.len() as u32);
            self.nodes[node].first_child = NO_CHILD;
            self.leaves.push(node as u32);
            return;
        }
        let b = self.nodes[node].bounds;
        let (cx, cy, cz) = (b.center(0), b.center(1), b.center(2));
        let mut buckets: [Vec<u32>; 8] = Default::default();
        for &i in &indices {
            let ii = i as usize;
            buckets[octant(cx, cy, cz, x[ii], y[ii], z[ii])].push(i);
        }
        let first = self.nodes.len() as u32;
        self.nodes[node].first_child = first;
        let depth = self.nodes[node].depth + 1;
        for oct in 0..8 {
            self.nodes.push(Node {
                bounds: child_bounds(&b, oct),
                count: 0,
                depth,
                first_child: NO_CHILD,
                range: (0, 0),
            });
        }
        for (oct, bucket) in buckets.into_iter().enumerate() {
            self.split(first as usize + oct, bucket, x, y, z);
        }
    }

    /// Refresh the tree for moved particles: particles are re-binned into the
    /// existing leaves and counts/ordering recomputed. If any leaf ends up
    /// holding more than twice the bucket size, the tree is rebuilt from
    /// scratch instead.
    pub fn update(&mut self, x: &[f64], y: &[f64], z: &[f64]) -> Result<TreeUpdate> {
        let n = x.len();
        let mut leaf_of = vec![0u32; n];
        let mut leaf_members: Vec<Vec<u32>> = vec![Vec::new(); self.nodes.len()];
        let mut overflow = false;
        for i in 0..n {
            match self.try_locate(x[i], y[i], z[i]) {
                Some(leaf) => {
                    leaf_of[i] = leaf as u32;
                    leaf_members[leaf].push(i as u32);
                    if leaf_members[leaf].len() > 2 * self.params.bucket_size {
                        overflow = true;
                        break;
                    }
                }
                None => {
                    overflow = true;
                    break;
                }
            }
        }
        if overflow {
            *self = Self::build(
                x,
                y,
                z,
                compute_bbox(x, y, z, 0.005, self.params.periodic_z)?,
                self.params,
            )?;
            return Ok(TreeUpdate::Rebuilt);
        }
        self.order.clear();
        for li in 0..self.leaves.len() {
            let leaf = self.leaves[li] as usize;
            let start = self.order.len() as u32;
            self.order.extend_from_slice(&leaf_members[leaf]);
            let node = &mut self.nodes[leaf];
            node.range = (start, start + leaf_members[leaf].len() as u32);
            node.count = leaf_members[leaf].len();
        }
        // Propagate counts bottom-up; children always follow their parent.
        for i in (0..self.nodes.len()).rev() {
            if let Some(ch) = self.nodes[i].children() {
                self.nodes[i].count = ch.map(|c| self.nodes[c].count).sum();
            }
        }
        Ok(TreeUpdate::Refreshed)
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn params(&self) -> &OctreeParams {
        &self.params
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Leaf node ids in depth-first order.
    pub fn leaves(&self) -> &[u32] {
        &self.leaves
    }

    /// Depth-first permutation over the particles the tree was built from.
    pub fn dfs_order(&self) -> &[u32] {
        &self.order
    }

    pub fn dfs_order_usize(&self) -> Vec<usize> {
        self.order.iter().map(|&i| i as usize).collect()
    }

    /// Leaf containing a position, or `None` outside the root box.
    pub fn try_locate(&self, x: f64, y: f64, z: f64) -> Option<usize> {
        if !self.bounds.contains(x, y, z) {
            return None;
        }
        let mut node = 0usize;
        loop {
            let nd = &self.nodes[node];
            match nd.children() {
                None => return Some(node),
                Some(_) => {
                    let b = &nd.bounds;
                    let oct = octant(b.center(0), b.center(1), b.center(2), x, y, z);
                    node = nd.first_child as usize + oct;
                }
            }
        }
    }

    /// Squared distance from a query point to a node box, min-image in z.
    #[inline]
    fn node_dist2(&self, b: &Aabb, qx: f64, qy: f64, qz: f64) -> f64 {
        let dx = (b.min[0] - qx).max(0.0).max(qx - b.max[0]);
        let dy = (b.min[1] - qy).max(0.0).max(qy - b.max[1]);
        let dz = match self.params.periodic_z {
            None => (b.min[2] - qz).max(0.0).max(qz - b.max[2]),
            Some(pz) => {
                let direct = (b.min[2] - qz).max(0.0).max(qz - b.max[2]);
                let up = (b.min[2] - (qz + pz.len))
                    .max(0.0)
                    .max(qz + pz.len - b.max[2]);
                let down = (b.min[2] - (qz - pz.len))
                    .max(0.0)
                    .max(qz - pz.len - b.max[2]);
                direct.min(up).min(down)
            }
        };
        dx * dx + dy * dy + dz * dz
    }

    /// All particles strictly within `radius` of particle `i` (excluding `i`
    /// itself), collected into `out` in traversal order. Callers needing a
    /// canonical order sort afterwards. Positions must be the arrays the
    /// tree was built over.
    pub fn find_neighbors(
        &self,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        i: usize,
        radius: f64,
        out: &mut Vec<u32>,
    ) {
        out.clear();
        let (qx, qy, qz) = (x[i], y[i], z[i]);
        let r2 = radius * radius;
        // Worst case: 7 deferred siblings per level plus the active path.
        let mut stack = [0u32; 8 * 32 + 8];
        let mut sp = 1usize;
        while sp > 0 {
            sp -= 1;
            // SAFETY: stack entries are node indices created below; particle
            // indices in `order` address the arrays the tree was built over.
            unsafe {
                let node = self.nodes.get_unchecked(stack[sp] as usize);
                if node.count == 0 || self.node_dist2(&node.bounds, qx, qy, qz) >= r2 {
                    continue;
                }
                if node.first_child != NO_CHILD {
                    for c in node.first_child..node.first_child + 8 {
                        *stack.get_unchecked_mut(sp) = c;
                        sp += 1;
                    }
                    continue;
                }
                let (s, e) = node.range;
                for k in s..e {
                    let j = *self.order.get_unchecked(k as usize);
                    let ju = j as usize;
                    if ju == i {
                        continue;
                    }
                    let dx = *x.get_unchecked(ju) - qx;
                    let dy = *y.get_unchecked(ju) - qy;
                    let dz = match self.params.periodic_z {
                        Some(pz) => pz.min_image(*z.get_unchecked(ju) - qz),
                        None => *z.get_unchecked(ju) - qz,
                    };
                    if dx * dx + dy * dy + dz * dz < r2 {
                        out.push(j);
                    }
                }
            }
        }
    }
}

/// 63-bit Morton code of a position quantized to 21 bits per axis inside
/// `bounds`. Used as a geometry-only canonical sort key.
pub fn morton_key(x: f64, y: f64, z: f64, bounds: &Aabb) -> u64 {
    #[inline]
    fn spread(mut v: u64) -> u64 {
        v &= 0x1f_ffff;
        v = (v | v << 32) & 0x1f00000000ffff;
        v = (v | v << 16) & 0x1f0000ff0000ff;
        v = (v | v << 8) & 0x100f00f00f00f00f;
        v = (v | v << 4) & 0x10c30c30c30c30c3;
        (v | v << 2) & 0x1249249249249249
    }
    #[inline]
    fn quantize(p: f64, min: f64, max: f64) -> u64 {
        let ext = max - min;
        let t = if ext > 0.0 {
            ((p - min) / ext).clamp(0.0, 1.0)
        } else {
            0.0
        };
        ((t * 2_097_152.0) as u64).min((1 << 21) - 1)
    }
    let qx = quantize(x, bounds.min[0], bounds.max[0]);
    let qy = quantize(y, bounds.min[1], bounds.max[1]);
    let qz = quantize(z, bounds.min[2], bounds.max[2]);
    spread(qx) | (spread(qy) << 1) | (spread(qz) << 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn cloud(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let gen = |rng: &mut rand_chacha::ChaCha8Rng| (0..n).map(|_| rng.gen::<f64>()).collect();
        (gen(&mut rng), gen(&mut rng), gen(&mut rng))
    }

    #[test]
    fn bbox_of_single_particle_is_inflated() {
        let b = compute_bbox(&[0.0], &[0.0], &[0.0], 0.005, None).unwrap();
        for a in 0..3 {
            assert!(b.extent(a) > 0.0);
            assert_eq!(b.min[a], -b.max[a]);
        }
    }

    #[test]
    fn bbox_of_unit_cube_corners() {
        let x = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let y = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0];
        let z = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let b = compute_bbox(&x, &y, &z, 0.005, None).unwrap();
        for a in 0..3 {
            assert!((b.min[a] + 0.005).abs() < 1e-15);
            assert!((b.max[a] - 1.005).abs() < 1e-15);
        }
    }

    #[test]
    fn bbox_matches_brute_force_scan() {
        let (x, y, z) = cloud(500, 7);
        let b = compute_bbox(&x, &y, &z, 0.0, None).unwrap();
        let xmin = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let xmax = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(b.min[0], xmin);
        assert_eq!(b.max[0], xmax);
    }

    #[test]
    fn bbox_rejects_empty() {
        assert!(matches!(
            compute_bbox(&[], &[], &[], 0.005, None),
            Err(Error::EmptySystem)
        ));
    }

    #[test]
    fn small_system_is_single_leaf() {
        let (x, y, z) = cloud(50, 1);
        let b = compute_bbox(&x, &y, &z, 0.005, None).unwrap();
        let t = Octree::build(&x, &y, &z, b, OctreeParams::default()).unwrap();
        assert_eq!(t.leaves().len(), 1);
        let mut order = t.dfs_order_usize();
        order.sort_unstable();
        assert_eq!(order, (0..50).collect::<Vec<_>>());
    }

    fn lattice(side: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut z = Vec::new();
        for i in 0..side {
            for j in 0..side {
                for k in 0..side {
                    x.push((i as f64 + 0.5) / side as f64);
                    y.push((j as f64 + 0.5) / side as f64);
                    z.push((k as f64 + 0.5) / side as f64);
                }
            }
        }
        (x, y, z)
    }

    #[test]
    fn uniform_lattice_splits_evenly_at_depth_two() {
        let (x, y, z) = lattice(16);
        let b = compute_bbox(&x, &y, &z, 0.005, None).unwrap();
        let params = OctreeParams {
            bucket_size: 64,
            ..Default::default()
        };
        let t = Octree::build(&x, &y, &z, b, params).unwrap();
        assert_eq!(t.leaves().len(), 64);
        for &l in t.leaves() {
            let node = t.node(l as usize);
            assert_eq!(node.count, 64, "leaf count");
            assert_eq!(node.depth, 2, "leaf depth");
        }
    }

    #[test]
    fn rebuild_after_permute_gives_same_leaf_structure() {
        let (x, y, z) = cloud(300, 3);
        let b = compute_bbox(&x, &y, &z, 0.005, None).unwrap();
        let params = OctreeParams {
            bucket_size: 16,
            ..Default::default()
        };
        let t1 = Octree::build(&x, &y, &z, b, params).unwrap();
        let order = t1.dfs_order_usize();
        let xp: Vec<f64> = order.iter().map(|&i| x[i]).collect();
        let yp: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        let zp: Vec<f64> = order.iter().map(|&i| z[i]).collect();
        let t2 = Octree::build(&xp, &yp, &zp, b, params).unwrap();
        assert_eq!(t1.node_count(), t2.node_count());
        for i in 0..t1.node_count() {
            assert_eq!(t1.node(i).count, t2.node(i).count);
            assert_eq!(t1.node(i).bounds, t2.node(i).bounds);
        }
        // After reordering, leaves index contiguous ranges in sorted order.
        let ord2 = t2.dfs_order_usize();
        assert_eq!(ord2, (0..300).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_particles_outside_box() {
        let b = Aabb {
            min: [0.0; 3],
            max: [1.0; 3],
        };
        let err = Octree::build(
            &[0.5, 2.0],
            &[0.5, 0.5],
            &[0.5, 0.5],
            b,
            OctreeParams::default(),
        );
        assert!(matches!(err, Err(Error::ParticleOutsideBox { index: 1 })));
    }

    fn brute_neighbors(
        x: &[f64],
        y: &[f64],
        z: &[f64],
        i: usize,
        radius: f64,
        pz: Option<PeriodicZ>,
    ) -> Vec<u32> {
        let mut out = Vec::new();
        for j in 0..x.len() {
            if j == i {
                continue;
            }
            let dx = x[j] - x[i];
            let dy = y[j] - y[i];
            let dz = match pz {
                Some(p) => p.min_image(z[j] - z[i]),
                None => z[j] - z[i],
            };
            if dx * dx + dy * dy + dz * dz < radius * radius {
                out.push(j as u32);
            }
        }
        out
    }

    #[test]
    fn isolated_particle_has_no_neighbors() {
        let x = [0.0, 10.0];
        let y = [0.0, 0.0];
        let z = [0.0, 0.0];
        let b = compute_bbox(&x, &y, &z, 0.005, None).unwrap();
        let t = Octree::build(&x, &y, &z, b, OctreeParams::default()).unwrap();
        let mut out = Vec::new();
        t.find_neighbors(&x, &y, &z, 0, 2.0, &mut out);
        assert!(out.is_empty());
    }

    #[test]
    fn threshold_is_strict_at_two_h() {
        let h = 0.5;
        for (d, expect) in [(1.9 * h, true), (2.1 * h, false), (2.0 * h, false)] {
            let x = [0.0, d];
            let y = [0.0, 0.0];
            let z = [0.0, 0.0];
            let b = compute_bbox(&x, &y, &z, 0.005, None).unwrap();
            let t = Octree::build(&x, &y, &z, b, OctreeParams::default()).unwrap();
            let mut out = Vec::new();
            t.find_neighbors(&x, &y, &z, 0, 2.0 * h, &mut out);
            assert_eq!(!out.is_empty(), expect, "distance {d}");
            t.find_neighbors(&x, &y, &z, 1, 2.0 * h, &mut out);
            assert_eq!(!out.is_empty(), expect, "distance {d} (mutual)");
        }
    }

    #[test]
    fn matches_brute_force_with_periodic_z() {
        let pz = PeriodicZ { min: 0.0, len: 1.0 };
        let (x, y, z) = cloud(400, 11);
        let b = compute_bbox(&x, &y, &z, 0.005, Some(pz)).unwrap();
        let params = OctreeParams {
            bucket_size: 16,
            periodic_z: Some(pz),
            ..Default::default()
        };
        let t = Octree::build(&x, &y, &z, b, params).unwrap();
        let mut out = Vec::new();
        for i in 0..x.len() {
            t.find_neighbors(&x, &y, &z, i, 0.22, &mut out);
            let mut got = out.clone();
            got.sort_unstable();
            let mut want = brute_neighbors(&x, &y, &z, i, 0.22, Some(pz));
            want.sort_unstable();
            assert_eq!(got, want, "particle {i}");
        }
    }

    #[test]
    fn periodic_closure_under_z_translation() {
        let pz = PeriodicZ { min: 0.0, len: 1.0 };
        let (x, y, z) = cloud(200, 13);
        let b = compute_bbox(&x, &y, &z, 0.005, Some(pz)).unwrap();
        let params = OctreeParams {
            bucket_size: 16,
            periodic_z: Some(pz),
            ..Default::default()
        };
        let t = Octree::build(&x, &y, &z, b, params).unwrap();

        let zs: Vec<f64> = z.iter().map(|&v| pz.wrap(v + 0.37 * pz.len)).collect();
        let bs = compute_bbox(&x, &y, &zs, 0.005, Some(pz)).unwrap();
        let ts = Octree::build(&x, &y, &zs, bs, params).unwrap();

        let mut a = Vec::new();
        let mut c = Vec::new();
        for i in 0..x.len() {
            t.find_neighbors(&x, &y, &z, i, 0.2, &mut a);
            ts.find_neighbors(&x, &y, &zs, i, 0.2, &mut c);
            a.sort_unstable();
            c.sort_unstable();
            assert_eq!(a, c, "particle {i}");
        }
    }

    #[test]
    fn update_refreshes_until_leaf_overflow() {
        let (mut x, y, z) = cloud(512, 17);
        let b = compute_bbox(&x, &y, &z, 0.2, None).unwrap();
        let params = OctreeParams {
            bucket_size: 16,
            ..Default::default()
        };
        let mut t = Octree::build(&x, &y, &z, b, params).unwrap();
        let nodes_before = t.node_count();

        // Tiny jitter: same structure expected.
        for v in x.iter_mut() {
            *v += 1e-6;
        }
        assert_eq!(t.update(&x, &y, &z).unwrap(), TreeUpdate::Refreshed);
        assert_eq!(t.node_count(), nodes_before);
        let total: usize = t.leaves().iter().map(|&l| t.node(l as usize).count).sum();
        assert_eq!(total, 512);

        // Collapse everything into one corner: leaves overflow, tree rebuilt.
        for v in x.iter_mut() {
            *v = 0.01 + *v * 1e-6;
        }
        assert_eq!(t.update(&x, &y, &z).unwrap(), TreeUpdate::Rebuilt);
    }

    #[test]
    fn dfs_reordering_improves_index_locality() {
        // Shuffled uniform cloud: after depth-first reordering, neighbor
        // pairs should be closer in index space on average.
        use rand::seq::SliceRandom;
        let (x0, y0, z0) = lattice(12);
        let mut idx: Vec<usize> = (0..x0.len()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        idx.shuffle(&mut rng);
        let x: Vec<f64> = idx.iter().map(|&i| x0[i]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| y0[i]).collect();
        let z: Vec<f64> = idx.iter().map(|&i| z0[i]).collect();

        let b = compute_bbox(&x, &y, &z, 0.005, None).unwrap();
        let params = OctreeParams {
            bucket_size: 16,
            ..Default::default()
        };
        let t = Octree::build(&x, &y, &z, b, params).unwrap();

        let mean_gap = |xs: &[f64], ys: &[f64], zs: &[f64], tree: &Octree| {
            let mut total = 0f64;
            let mut pairs = 0f64;
            let mut out = Vec::new();
            for i in 0..xs.len() {
                tree.find_neighbors(xs, ys, zs, i, 0.2, &mut out);
                for &j in &out {
                    total += (j as f64 - i as f64).abs();
                    pairs += 1.0;
                }
            }
            total / pairs
        };
        let before = mean_gap(&x, &y, &z, &t);

        let order = t.dfs_order_usize();
        let xp: Vec<f64> = order.iter().map(|&i| x[i]).collect();
        let yp: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        let zp: Vec<f64> = order.iter().map(|&i| z[i]).collect();
        let tp = Octree::build(&xp, &yp, &zp, b, params).unwrap();
        let after = mean_gap(&xp, &yp, &zp, &tp);
        assert!(after < before, "mean index gap {after} !< {before}");
    }

    #[test]
    fn morton_keys_order_like_positions() {
        let b = Aabb {
            min: [0.0; 3],
            max: [1.0; 3],
        };
        let k0 = morton_key(0.1, 0.1, 0.1, &b);
        let k1 = morton_key(0.9, 0.9, 0.9, &b);
        assert!(k0 < k1);
        assert_eq!(morton_key(0.5, 0.5, 0.5, &b), morton_key(0.5, 0.5, 0.5, &b));
    }
}
