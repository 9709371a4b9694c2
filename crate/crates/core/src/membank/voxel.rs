//! Voxel-grid downsampling and an octree range index.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::geometry::PointCloud;

pub type VoxelKey = [i64; 3];

#[inline]
pub fn voxel_key(p: &Vector3<f64>, voxel: f64) -> VoxelKey {
    [
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    ]
}

/// One confidence-weighted centroid per occupied voxel, sorted by voxel key.
/// Voxels whose total confidence is zero use the plain mean. The output
/// confidence is the mean input confidence of the voxel.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> PointCloud {
    assert!(voxel > 0.0, "voxel size must be positive");
    struct Acc {
        wp: Vector3<f64>,
        w: f64,
        p: Vector3<f64>,
        n: usize,
    }
    let mut cells: BTreeMap<VoxelKey, Acc> = BTreeMap::new();
    for (p, &c) in cloud.points.iter().zip(&cloud.confidence) {
        let a = cells.entry(voxel_key(p, voxel)).or_insert(Acc {
            wp: Vector3::zeros(),
            w: 0.0,
            p: Vector3::zeros(),
            n: 0,
        });
        a.wp += p * c;
        a.w += c;
        a.p += p;
        a.n += 1;
    }
    let mut out = PointCloud::default();
    for a in cells.values() {
        let rep = if a.w > 0.0 { a.wp / a.w } else { a.p / a.n as f64 };
        out.push(rep, a.w / a.n as f64);
    }
    out
}

/// Occupied voxel keys of a point set.
pub fn occupied_voxels(points: &[Vector3<f64>], voxel: f64) -> std::collections::BTreeSet<VoxelKey> {
    points.iter().map(|p| voxel_key(p, voxel)).collect()
}

pub const DEFAULT_LEAF_CAPACITY: usize = 64;
const MAX_DEPTH: usize = 16;

#[derive(Clone, Debug)]
struct Node {
    center: Vector3<f64>,
    half: f64,
    children: Option<Box<[Node; 8]>>,
    items: Vec<u32>,
}

impl Node {
    fn leaf(center: Vector3<f64>, half: f64) -> Self {
        Self {
            center,
            half,
            children: None,
            items: Vec::new(),
        }
    }

    fn octant(&self, p: &Vector3<f64>) -> usize {
        (p.x >= self.center.x) as usize | ((p.y >= self.center.y) as usize) << 1 | ((p.z >= self.center.z) as usize) << 2
    }

    fn insert(&mut self, points: &[Vector3<f64>], i: u32, cap: usize, depth: usize) {
        let o = self.octant(&points[i as usize]);
        if let Some(kids) = &mut self.children {
            kids[o].insert(points, i, cap, depth + 1);
            return;
        }
        self.items.push(i);
        if self.items.len() > cap && depth < MAX_DEPTH {
            let h = self.half * 0.5;
            let center = self.center;
            self.children = Some(Box::new(std::array::from_fn(|o| {
                let s = |bit: usize| if o & bit != 0 { h } else { -h };
                Node::leaf(center + Vector3::new(s(1), s(2), s(4)), h)
            })));
            for j in std::mem::take(&mut self.items) {
                self.insert(points, j, cap, depth);
            }
        }
    }

    fn query(&self, points: &[Vector3<f64>], lo: &Vector3<f64>, hi: &Vector3<f64>, out: &mut Vec<usize>) {
        let nlo = self.center.add_scalar(-self.half);
        let nhi = self.center.add_scalar(self.half);
        if (0..3).any(|a| hi[a] < nlo[a] || lo[a] > nhi[a]) {
            return;
        }
        match &self.children {
            Some(kids) => kids.iter().for_each(|k| k.query(points, lo, hi, out)),
            None => out.extend(
                self.items
                    .iter()
                    .map(|&i| i as usize)
                    .filter(|&i| (0..3).all(|a| points[i][a] >= lo[a] && points[i][a] <= hi[a])),
            ),
        }
    }

    fn stats(&self, leaves: &mut usize, depth: usize, max_depth: &mut usize) {
        *max_depth = (*max_depth).max(depth);
        match &self.children {
            Some(kids) => kids.iter().for_each(|k| k.stats(leaves, depth + 1, max_depth)),
            None => *leaves += 1,
        }
    }
}

/// Octree with an axis-aligned cubic root enclosing every point. Leaves
/// split once they exceed `leaf_capacity` points (down to a depth of 16).
#[derive(Clone, Debug)]
pub struct Octree {
    points: Vec<Vector3<f64>>,
    root: Option<Node>,
}

pub fn build_octree(points: &[Vector3<f64>], leaf_capacity: usize) -> Octree {
    let cap = leaf_capacity.max(1);
    if points.is_empty() {
        return Octree {
            points: Vec::new(),
            root: None,
        };
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let center = (lo + hi) * 0.5;
    let half = ((hi - lo).max() * 0.5).max(1e-9) * (1.0 + 1e-9);
    let mut root = Node::leaf(center, half);
    for i in 0..points.len() as u32 {
        root.insert(points, i, cap, 0);
    }
    Octree {
        points: points.to_vec(),
        root: Some(root),
    }
}

impl Octree {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Root cube as `(center, half_extent)`.
    pub fn bounds(&self) -> Option<(Vector3<f64>, f64)> {
        self.root.as_ref().map(|r| (r.center, r.half))
    }

    /// Indices of points inside the closed box `[lo, hi]`, ascending.
    pub fn range_query(&self, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(r) = &self.root {
            r.query(&self.points, lo, hi, &mut out);
        }
        out.sort_unstable();
        out
    }

    pub fn leaf_count(&self) -> usize {
        let mut leaves = 0;
        let mut depth = 0;
        if let Some(r) = &self.root {
            r.stats(&mut leaves, 0, &mut depth);
        }
        leaves
    }

    pub fn depth(&self) -> usize {
        let mut leaves = 0;
        let mut depth = 0;
        if let Some(r) = &self.root {
            r.stats(&mut leaves, 0, &mut depth);
        }
        depth
    }
}
