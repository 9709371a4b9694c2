//! Persistent memory of static scenes.
//!
//! Each map stores a voxel-downsampled static point cloud, the visual
//! features of its keyframes and one geometric descriptor. Recall is a
//! two-tier process: keyframe features vote for maps through the global
//! [`FeatureTable`], and the winning map is verified geometrically with ICP.

mod store;
mod table;
mod voxel;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PointCloud, Pose};
use crate::icp::{bbox_diagonal, centroid, icp, IcpParams, IcpResult, KdTree};

pub use store::{load, persist, persist_until, Manifest, MapRecord, PersistStage, MANIFEST_VERSION};
pub use table::{
    select_keyframes, FeatureKind, FeatureTable, FeatureVec, TableEntry, TableHit, GEOMETRIC_DIM, HASH_BITS,
    VISUAL_DIM,
};
pub use voxel::{build_octree, occupied_voxels, voxel_downsample, voxel_key, Octree, VoxelKey, DEFAULT_LEAF_CAPACITY};

pub type MapId = u64;
pub type AlignmentResult = IcpResult;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("static cloud is empty; no map created")]
    EmptyScene,
    #[error("invalid feature: {0}")]
    InvalidFeature(String),
    #[error("unknown map id {0}")]
    UnknownMap(MapId),
    #[error("alignment was not accepted; refusing to merge")]
    RejectedAlignment,
    #[error("recall needs at least one query feature")]
    EmptyQuery,
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {reason}", file.display())]
    Corrupt { file: PathBuf, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryMap {
    pub map_id: MapId,
    /// Map-frame static points, one per voxel, stored at f32 precision.
    pub cloud: PointCloud,
    pub keyframe_feats: Vec<(u64, FeatureVec)>,
    pub geo_feat: FeatureVec,
    pub voxel_size: f64,
    /// 1 after creation, incremented by every update.
    pub visits: u32,
}

impl MemoryMap {
    pub fn occupied_voxels(&self) -> BTreeSet<VoxelKey> {
        occupied_voxels(&self.cloud.points, self.voxel_size)
    }

    pub fn diameter(&self) -> f64 {
        bbox_diagonal(&self.cloud.points)
    }
}

/// Recall thresholds. Fractions are relative to the query (keyframe count,
/// cloud size) or to the candidate map's diameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallParams {
    /// `d_match = d_match_factor × median pairwise stored-feature distance`.
    pub d_match_factor: f64,
    pub v_min_abs: usize,
    pub v_min_frac: f64,
    pub n_inlier_abs: usize,
    pub n_inlier_frac: f64,
    pub r_max_frac: f64,
    pub icp: IcpParams,
}

impl Default for RecallParams {
    fn default() -> Self {
        Self {
            d_match_factor: 0.7,
            v_min_abs: 2,
            v_min_frac: 0.3,
            n_inlier_abs: 100,
            n_inlier_frac: 0.1,
            r_max_frac: 0.03,
            icp: IcpParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallResult {
    /// Set only when the vote winner also passed geometric verification.
    pub candidate: Option<MapId>,
    pub votes: BTreeMap<MapId, usize>,
    /// Strict vote winner with at least `v_min` votes, verified or not.
    pub voted: Option<MapId>,
    pub alignment: Option<AlignmentResult>,
}

#[derive(Clone, Debug, Default)]
pub struct MemoryBank {
    maps: BTreeMap<MapId, MemoryMap>,
    table: FeatureTable,
    next_id: MapId,
    pub params: RecallParams,
}

impl PartialEq for MemoryBank {
    fn eq(&self, other: &Self) -> bool {
        self.maps == other.maps
            && self.table.entries() == other.table.entries()
            && self.next_id == other.next_id
            && self.params == other.params
    }
}

/// Rounds to f32 precision, the precision of the on-disk format.
fn quantize(c: &PointCloud) -> PointCloud {
    PointCloud::new(
        c.points.iter().map(|p| p.map(|v| v as f32 as f64)).collect(),
        c.confidence.iter().map(|&v| v as f32 as f64).collect(),
    )
}

/// 8×8×8 occupancy histogram of the cloud scaled into the unit cube about
/// its centroid, L1-normalised.
pub fn geo_feature(cloud: &PointCloud) -> FeatureVec {
    let mut h = vec![0f32; GEOMETRIC_DIM];
    if !cloud.is_empty() {
        let c = centroid(&cloud.points);
        let s = cloud.points.iter().map(|p| (p - c).amax()).fold(0.0, f64::max);
        let bin = |v: f64| {
            let q = if s > 0.0 { v / (2.0 * s) + 0.5 } else { 0.5 };
            ((q * 8.0).floor().max(0.0) as usize).min(7)
        };
        for p in &cloud.points {
            let d = p - c;
            h[bin(d.x) + 8 * bin(d.y) + 64 * bin(d.z)] += 1.0;
        }
        let n = cloud.len() as f32;
        h.iter_mut().for_each(|v| *v /= n);
    }
    FeatureVec::geometric(h).expect("histogram is finite")
}

impl MemoryBank {
    pub fn new() -> Self {
        Self {
            next_id: 1,
            ..Default::default()
        }
    }

    pub fn with_params(params: RecallParams) -> Self {
        Self { params, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn map(&self, id: MapId) -> Option<&MemoryMap> {
        self.maps.get(&id)
    }

    pub fn maps(&self) -> impl Iterator<Item = &MemoryMap> {
        self.maps.values()
    }

    pub fn table(&self) -> &FeatureTable {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut FeatureTable {
        &mut self.table
    }

    pub fn next_id(&self) -> MapId {
        self.next_id
    }

    /// Stores a new map. Never deduplicates against existing maps.
    pub fn create_map(
        &mut self,
        static_cloud: &PointCloud,
        kf_feats: Vec<(u64, FeatureVec)>,
        geo_feat: Option<FeatureVec>,
        voxel: f64,
    ) -> Result<MapId, BankError> {
        if static_cloud.is_empty() {
            return Err(BankError::EmptyScene);
        }
        if let Some((_, f)) = kf_feats.iter().find(|(_, f)| f.kind() != FeatureKind::Visual2d) {
            return Err(BankError::InvalidFeature(format!("keyframe feature of kind {:?}", f.kind())));
        }
        let ds = quantize(&voxel_downsample(static_cloud, voxel));
        let mut seen = BTreeSet::new();
        let mut cloud = PointCloud::default();
        for (p, &c) in ds.points.iter().zip(&ds.confidence) {
            if seen.insert(voxel_key(p, voxel)) {
                cloud.push(*p, c);
            }
        }
        let geo_feat = match geo_feat {
            Some(g) if g.kind() == FeatureKind::Geometric3d => g,
            Some(_) => return Err(BankError::InvalidFeature("geo_feat must be geometric".into())),
            None => geo_feature(&cloud),
        };
        let id = self.next_id;
        self.next_id += 1;
        for (frame, f) in &kf_feats {
            self.table.insert(f.clone(), id, *frame)?;
        }
        self.maps.insert(
            id,
            MemoryMap {
                map_id: id,
                cloud,
                keyframe_feats: kf_feats,
                geo_feat,
                voxel_size: voxel,
                visits: 1,
            },
        );
        Ok(id)
    }

    pub fn table_query(&self, q: &FeatureVec, n: usize) -> Vec<TableHit> {
        self.table.query(q, n)
    }

    pub fn d_match(&self) -> f64 {
        self.table
            .median_pairwise_distance()
            .map_or(f64::INFINITY, |m| self.params.d_match_factor * m)
    }

    pub fn v_min(&self, n_query: usize) -> usize {
        self.params
            .v_min_abs
            .max((self.params.v_min_frac * n_query as f64).ceil() as usize)
    }

    /// Feature voting followed by ICP verification of the winner.
    pub fn recall(&self, query_feats: &[FeatureVec], query_static: &PointCloud, init_align: &Pose) -> Result<RecallResult, BankError> {
        if query_feats.is_empty() {
            return Err(BankError::EmptyQuery);
        }
        let mut out = RecallResult {
            candidate: None,
            votes: BTreeMap::new(),
            voted: None,
            alignment: None,
        };
        if self.table.is_empty() {
            return Ok(out);
        }
        let d_match = self.d_match();
        for q in query_feats {
            if let Some(hit) = self.table.query(q, 1).first() {
                if hit.distance < d_match {
                    *out.votes.entry(hit.map_id).or_insert(0) += 1;
                }
            }
        }
        let v_min = self.v_min(query_feats.len());
        let max = out.votes.values().copied().max().unwrap_or(0);
        let winners: Vec<MapId> = out.votes.iter().filter(|(_, &v)| v == max).map(|(&k, _)| k).collect();
        if max < v_min || winners.len() != 1 {
            return Ok(out);
        }
        let id = winners[0];
        out.voted = Some(id);
        let map = &self.maps[&id];
        if query_static.is_empty() {
            return Ok(out);
        }
        let alignment = self.verify(map, query_static, init_align);
        if alignment.accepted {
            out.candidate = Some(id);
        }
        out.alignment = Some(alignment);
        Ok(out)
    }

    /// ICP of the query cloud against a stored map, started from the
    /// supplied alignment and, when that is rejected, from a
    /// centroid-to-centroid translation. Returns the better result under
    /// this bank's acceptance thresholds.
    pub fn verify(&self, map: &MemoryMap, query_static: &PointCloud, init_align: &Pose) -> AlignmentResult {
        let tree = KdTree::new(&map.cloud.points);
        let n_inlier = self
            .params
            .n_inlier_abs
            .max((self.params.n_inlier_frac * query_static.len() as f64).ceil() as usize);
        let params = IcpParams {
            min_inliers: n_inlier,
            max_rmse_frac: self.params.r_max_frac,
            ..self.params.icp
        };
        let centroid_init = Pose::from_translation(centroid(&map.cloud.points) - centroid(&query_static.points));
        let mut best: Option<IcpResult> = None;
        for init in [*init_align, centroid_init] {
            if best.as_ref().is_some_and(|b| b.accepted) {
                break;
            }
            let r = icp(&query_static.points, &tree, &init, &params);
            let better = match &best {
                None => true,
                Some(b) => (r.accepted, r.inlier_count, -r.rmse) > (b.accepted, b.inlier_count, -b.rmse),
            };
            if better {
                best = Some(r);
            }
        }
        best.expect("at least one attempt")
    }

    /// Merges an aligned static cloud into a stored map. Voxels that are
    /// already occupied keep their stored point; new points only fill empty
    /// voxels.
    pub fn update_map(
        &mut self,
        map_id: MapId,
        aligned_static: &PointCloud,
        new_kf_feats: Vec<(u64, FeatureVec)>,
        alignment: &AlignmentResult,
    ) -> Result<&MemoryMap, BankError> {
        if !alignment.accepted {
            return Err(BankError::RejectedAlignment);
        }
        if let Some((_, f)) = new_kf_feats.iter().find(|(_, f)| f.kind() != FeatureKind::Visual2d) {
            return Err(BankError::InvalidFeature(format!("keyframe feature of kind {:?}", f.kind())));
        }
        let map = self.maps.get_mut(&map_id).ok_or(BankError::UnknownMap(map_id))?;
        let v = map.voxel_size;
        let incoming = quantize(&voxel_downsample(&aligned_static.transformed(&alignment.transform), v));
        let tree = build_octree(&map.cloud.points, DEFAULT_LEAF_CAPACITY);
        let mut added = BTreeSet::new();
        for (p, &c) in incoming.points.iter().zip(&incoming.confidence) {
            let key = voxel_key(p, v);
            let lo = Vector3::new(key[0] as f64, key[1] as f64, key[2] as f64) * v;
            let hi = lo.add_scalar(v);
            let occupied = tree
                .range_query(&lo, &hi)
                .into_iter()
                .any(|i| voxel_key(&map.cloud.points[i], v) == key);
            if !occupied && added.insert(key) {
                map.cloud.push(*p, c);
            }
        }
        for (frame, f) in &new_kf_feats {
            self.table.insert(f.clone(), map_id, *frame)?;
        }
        map.keyframe_feats.extend(new_kf_feats);
        map.visits += 1;
        map.geo_feat = geo_feature(&map.cloud);
        Ok(map)
    }

    pub(crate) fn from_parts(maps: BTreeMap<MapId, MemoryMap>, table: FeatureTable, next_id: MapId, params: RecallParams) -> Self {
        Self {
            maps,
            table,
            next_id,
            params,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn slab(seed: u64, n: usize, x0: f64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::uniform(
            (0..n)
                .map(|_| Vector3::new(x0 + rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>() * 0.2))
                .collect(),
        )
    }

    fn feat(seed: u64) -> FeatureVec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureVec::visual((0..VISUAL_DIM).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn accepted() -> AlignmentResult {
        IcpResult {
            transform: Pose::identity(),
            inlier_count: 1000,
            rmse: 0.0,
            iterations: 1,
            converged: true,
            accepted: true,
        }
    }

    fn assert_voxel_bound(m: &MemoryMap) {
        let keys = m.occupied_voxels();
        assert_eq!(keys.len(), m.cloud.len());
    }

    #[test]
    fn geo_feature_examples() {
        let one = geo_feature(&PointCloud::uniform(vec![Vector3::new(3.0, -1.0, 2.0)]));
        assert_eq!(one.values().iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(one.values().iter().sum::<f32>(), 1.0);
        let c = slab(11, 500, 0.0);
        let mut rev = c.clone();
        rev.points.reverse();
        assert_eq!(geo_feature(&c), geo_feature(&rev));
    }

    #[test]
    fn create_assigns_fresh_ids() {
        let mut b = MemoryBank::new();
        let c = slab(1, 2000, 0.0);
        let a = b.create_map(&c, vec![(0, feat(1)), (5, feat(2))], None, 0.05).unwrap();
        assert_eq!(a, 1);
        assert_eq!(b.table().len(), 2);
        let d = b.create_map(&c, vec![], None, 0.05).unwrap();
        assert_ne!(a, d);
        assert_eq!(b.len(), 2);
        assert!(matches!(b.create_map(&PointCloud::default(), vec![], None, 0.05), Err(BankError::EmptyScene)));
        assert_voxel_bound(b.map(a).unwrap());
    }

    #[test]
    fn update_with_own_cloud_is_idempotent() {
        let mut b = MemoryBank::new();
        let id = b.create_map(&slab(2, 3000, 0.0), vec![], None, 0.05).unwrap();
        let own = b.map(id).unwrap().cloud.clone();
        b.update_map(id, &own, vec![], &accepted()).unwrap();
        assert_eq!(b.map(id).unwrap().cloud, own);
        b.update_map(id, &slab(2, 3000, 0.0), vec![], &accepted()).unwrap();
        assert_eq!(b.map(id).unwrap().cloud, own);
        assert_eq!(b.map(id).unwrap().visits, 3);
    }

    #[test]
    fn update_with_disjoint_region_adds_its_voxels() {
        let mut b = MemoryBank::new();
        let id = b.create_map(&slab(3, 3000, 0.0), vec![], None, 0.05).unwrap();
        let before = b.map(id).unwrap().occupied_voxels();
        let extra = slab(4, 3000, 1.5);
        let extra_voxels = occupied_voxels(&extra.points, 0.05);
        b.update_map(id, &extra, vec![(9, feat(3))], &accepted()).unwrap();
        let m = b.map(id).unwrap();
        assert!(before.is_subset(&m.occupied_voxels()));
        let grown = m.cloud.len() - before.len();
        assert!((grown as i64 - extra_voxels.len() as i64).abs() <= 2, "{grown} vs {}", extra_voxels.len());
        assert_voxel_bound(m);
        assert_eq!(b.table().len(), 1);
    }

    #[test]
    fn rejected_alignment_is_refused() {
        let mut b = MemoryBank::new();
        let id = b.create_map(&slab(5, 100, 0.0), vec![], None, 0.05).unwrap();
        let mut a = accepted();
        a.accepted = false;
        assert!(matches!(b.update_map(id, &slab(6, 10, 0.0), vec![], &a), Err(BankError::RejectedAlignment)));
        assert!(matches!(b.update_map(99, &slab(6, 10, 0.0), vec![], &accepted()), Err(BankError::UnknownMap(99))));
    }

    #[test]
    fn recall_on_empty_bank_and_ties() {
        let b = MemoryBank::new();
        let r = b.recall(&[feat(1)], &slab(1, 10, 0.0), &Pose::identity()).unwrap();
        assert!(r.candidate.is_none() && r.votes.is_empty());

        let mut b = MemoryBank::new();
        let c = slab(7, 2000, 0.0);
        b.create_map(&c, vec![(0, feat(10)), (1, feat(11))], None, 0.05).unwrap();
        b.create_map(&c, vec![(0, feat(20)), (1, feat(21))], None, 0.05).unwrap();
        b.params.d_match_factor = 1e6;
        let r = b.recall(&[feat(10), feat(11), feat(20), feat(21)], &c, &Pose::identity()).unwrap();
        assert_eq!(r.votes.values().copied().collect::<Vec<_>>(), vec![2, 2]);
        assert!(r.voted.is_none() && r.candidate.is_none());
    }

    #[test]
    fn recall_identifies_and_aligns_map() {
        let mut b = MemoryBank::new();
        let c = slab(8, 5000, 0.0);
        b.create_map(&slab(9, 4000, 3.0), vec![(0, feat(30)), (1, feat(31)), (2, feat(32))], None, 0.02).unwrap();
        let id = b.create_map(&c, vec![(0, feat(40)), (1, feat(41)), (2, feat(42))], None, 0.02).unwrap();
        let shift = Pose::from_translation(Vector3::new(0.01, -0.005, 0.0));
        let q = c.transformed(&shift.inverse());
        let r = b.recall(&[feat(40), feat(41), feat(30)], &q, &Pose::identity()).unwrap();
        assert_eq!(r.candidate, Some(id));
        let t = r.alignment.unwrap().transform;
        assert!((t.translation - shift.translation).norm() < 0.005);
    }
}
