//! Global visual feature table with a random-hyperplane hash index.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::BankError;

pub const VISUAL_DIM: usize = 1024;
pub const GEOMETRIC_DIM: usize = 512;
pub const HASH_BITS: usize = 16;
const HASH_SEED: u64 = 0x5eed_f00d;
/// Entries used to estimate the median pairwise distance.
const CALIBRATION_SAMPLE: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Visual2d,
    Geometric3d,
}

impl FeatureKind {
    pub fn dim(self) -> usize {
        match self {
            FeatureKind::Visual2d => VISUAL_DIM,
            FeatureKind::Geometric3d => GEOMETRIC_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVec {
    kind: FeatureKind,
    values: Vec<f32>,
}

impl FeatureVec {
    pub fn new(kind: FeatureKind, values: Vec<f32>) -> Result<Self, BankError> {
        if values.len() != kind.dim() {
            return Err(BankError::InvalidFeature(format!(
                "{kind:?} feature needs {} values, got {}",
                kind.dim(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(BankError::InvalidFeature(format!("non-finite value at index {i}")));
        }
        Ok(Self { kind, values })
    }

    pub fn visual(values: Vec<f32>) -> Result<Self, BankError> {
        Self::new(FeatureKind::Visual2d, values)
    }

    pub fn geometric(values: Vec<f32>) -> Result<Self, BankError> {
        Self::new(FeatureKind::Geometric3d, values)
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn distance(&self, other: &FeatureVec) -> f64 {
        l2(&self.values, &other.values)
    }
}

pub(crate) fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableEntry {
    pub feature: FeatureVec,
    pub map_id: u64,
    pub frame_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableHit {
    pub entry: usize,
    pub map_id: u64,
    pub frame_id: u64,
    pub distance: f64,
}

/// Visual feature entries plus sign-of-projection buckets over
/// [`HASH_BITS`] seeded random hyperplanes.
#[derive(Debug)]
pub struct FeatureTable {
    entries: Vec<TableEntry>,
    planes: Vec<Vec<f32>>,
    buckets: BTreeMap<u16, Vec<u32>>,
    /// Tables smaller than this are always searched exhaustively.
    pub exact_below: usize,
    median_cache: OnceLock<f64>,
}

impl Clone for FeatureTable {
    fn clone(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            planes: self.planes.clone(),
            buckets: self.buckets.clone(),
            exact_below: self.exact_below,
            median_cache: self.median_cache.clone(),
        }
    }
}

impl Default for FeatureTable {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureTable {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(HASH_SEED);
        let planes = (0..HASH_BITS)
            .map(|_| (0..VISUAL_DIM).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        Self {
            entries: Vec::new(),
            planes,
            buckets: BTreeMap::new(),
            exact_below: 10_000,
            median_cache: OnceLock::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TableEntry] {
        &self.entries
    }

    pub fn code(&self, f: &FeatureVec) -> u16 {
        let mut c = 0u16;
        for (b, plane) in self.planes.iter().enumerate() {
            let dot: f64 = plane.iter().zip(f.values()).map(|(p, v)| *p as f64 * *v as f64).sum();
            if dot >= 0.0 {
                c |= 1 << b;
            }
        }
        c
    }

    pub fn insert(&mut self, feature: FeatureVec, map_id: u64, frame_id: u64) -> Result<(), BankError> {
        if feature.kind() != FeatureKind::Visual2d {
            return Err(BankError::InvalidFeature("table only holds visual features".into()));
        }
        let code = self.code(&feature);
        self.buckets.entry(code).or_default().push(self.entries.len() as u32);
        self.entries.push(TableEntry {
            feature,
            map_id,
            frame_id,
        });
        self.median_cache = OnceLock::new();
        Ok(())
    }

    /// The `n` nearest entries by L2 distance, ascending (ties by entry
    /// order). Probes the query bucket and its Hamming-1 neighbours, and
    /// scans every entry when the table is small or the probe yields fewer
    /// than `n` candidates.
    pub fn query(&self, q: &FeatureVec, n: usize) -> Vec<TableHit> {
        if self.entries.is_empty() || n == 0 {
            return Vec::new();
        }
        let mut cand: Vec<usize> = Vec::new();
        if self.entries.len() >= self.exact_below {
            let code = self.code(q);
            for probe in std::iter::once(code).chain((0..HASH_BITS).map(|b| code ^ (1 << b))) {
                if let Some(ids) = self.buckets.get(&probe) {
                    cand.extend(ids.iter().map(|&i| i as usize));
                }
            }
        }
        if cand.len() < n {
            cand = (0..self.entries.len()).collect();
        }
        let mut hits: Vec<TableHit> = crate::par::map_slice(&cand, |&i| {
            let e = &self.entries[i];
            TableHit {
                entry: i,
                map_id: e.map_id,
                frame_id: e.frame_id,
                distance: e.feature.distance(q),
            }
        });
        hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.entry.cmp(&b.entry)));
        hits.truncate(n);
        hits
    }

    /// Exhaustive top-`n`, for reference.
    pub fn query_exact(&self, q: &FeatureVec, n: usize) -> Vec<TableHit> {
        let mut hits: Vec<TableHit> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| TableHit {
                entry: i,
                map_id: e.map_id,
                frame_id: e.frame_id,
                distance: e.feature.distance(q),
            })
            .collect();
        hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.entry.cmp(&b.entry)));
        hits.truncate(n);
        hits
    }

    /// Median pairwise distance between stored features. Large tables use
    /// a sample chosen by content hash, so the value does not depend on
    /// insertion order.
    pub fn median_pairwise_distance(&self) -> Option<f64> {
        if self.entries.len() < 2 {
            return None;
        }
        Some(*self.median_cache.get_or_init(|| {
            let mut idx: Vec<(u64, usize)> = self
                .entries
                .iter()
                .enumerate()
                .map(|(i, e)| (content_hash(e), i))
                .collect();
            idx.sort_unstable();
            idx.truncate(CALIBRATION_SAMPLE);
            let sample: Vec<&FeatureVec> = idx.iter().map(|&(_, i)| &self.entries[i].feature).collect();
            let mut d: Vec<f64> = crate::par::map_range(sample.len(), |i| {
                (i + 1..sample.len()).map(|j| sample[i].distance(sample[j])).collect::<Vec<_>>()
            })
            .into_iter()
            .flatten()
            .collect();
            d.sort_by(f64::total_cmp);
            let m = d.len();
            if m % 2 == 1 {
                d[m / 2]
            } else {
                0.5 * (d[m / 2 - 1] + d[m / 2])
            }
        }))
    }

    /// Drops every entry of `map_id`, rebuilding the index.
    pub fn remove_map(&mut self, map_id: u64) {
        let entries = std::mem::take(&mut self.entries);
        self.buckets.clear();
        self.median_cache = OnceLock::new();
        for e in entries.into_iter().filter(|e| e.map_id != map_id) {
            self.insert(e.feature, e.map_id, e.frame_id).expect("entry was valid");
        }
    }
}

fn content_hash(e: &TableEntry) -> u64 {
    // FNV-1a over the value bits.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    };
    for v in e.feature.values() {
        v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
    }
    h
}

/// Greedy keyframe selection: frame 0, then every frame at least `d_target`
/// away from the last kept one.
pub fn select_keyframes(features: &[FeatureVec], d_target: f64) -> Vec<usize> {
    let mut kept = Vec::new();
    for (i, f) in features.iter().enumerate() {
        match kept.last() {
            None => kept.push(i),
            Some(&last) => {
                if f.distance(&features[last]) >= d_target {
                    kept.push(i);
                }
            }
        }
    }
    kept
}
