//! On-disk bank layout: `manifest.json`, `features.bin`, `map_<id>.ply`.
//!
//! Writes go to a sibling `<root>.new` directory which is then swapped in
//! by renames, so an interrupted persist leaves either the previous or the
//! new bank loadable.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{BankError, FeatureTable, FeatureVec, MapId, MemoryBank, MemoryMap, RecallParams, VISUAL_DIM};
use crate::geometry::PointCloud;

pub const MANIFEST_VERSION: u32 = 1;
const FEATURE_MAGIC: &[u8; 4] = b"CMFT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub map_id: MapId,
    pub file: String,
    pub points: usize,
    pub voxel_size: f64,
    pub visits: u32,
    pub geo_feat: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub next_id: MapId,
    pub feature_dim: usize,
    pub feature_entries: usize,
    pub exact_scan_below: usize,
    pub thresholds: RecallParams,
    pub maps: Vec<MapRecord>,
}

/// Point at which [`persist_until`] stops, simulating a crash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PersistStage {
    /// Staging directory fully written, nothing renamed yet.
    Staged,
    /// Previous bank moved aside, staging directory not yet in place.
    OldMovedAside,
    /// New bank in place, previous one not yet deleted.
    Swapped,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BankError + '_ {
    move |source| BankError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(file: &Path, reason: impl Into<String>) -> BankError {
    BankError::Corrupt {
        file: file.to_path_buf(),
        reason: reason.into(),
    }
}

fn sibling(root: &Path, suffix: &str) -> PathBuf {
    let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "bank".into());
    root.with_file_name(format!("{name}.{suffix}"))
}

pub fn persist(bank: &MemoryBank, root: &Path) -> Result<Manifest, BankError> {
    persist_until(bank, root, None)
}

#[doc(hidden)]
pub fn persist_until(bank: &MemoryBank, root: &Path, stop: Option<PersistStage>) -> Result<Manifest, BankError> {
    let staging = sibling(root, "new");
    let old = sibling(root, "old");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    fs::create_dir_all(&staging).map_err(io_err(&staging))?;
    let manifest = write_dir(bank, &staging)?;
    if stop == Some(PersistStage::Staged) {
        return Ok(manifest);
    }
    if old.exists() {
        fs::remove_dir_all(&old).map_err(io_err(&old))?;
    }
    if root.exists() {
        fs::rename(root, &old).map_err(io_err(root))?;
    }
    if stop == Some(PersistStage::OldMovedAside) {
        return Ok(manifest);
    }
    fs::rename(&staging, root).map_err(io_err(&staging))?;
    if stop == Some(PersistStage::Swapped) {
        return Ok(manifest);
    }
    if old.exists() {
        fs::remove_dir_all(&old).map_err(io_err(&old))?;
    }
    Ok(manifest)
}

fn write_dir(bank: &MemoryBank, dir: &Path) -> Result<Manifest, BankError> {
    let mut records = Vec::new();
    for m in bank.maps() {
        let file = format!("map_{}.ply", m.map_id);
        write_ply(&dir.join(&file), &m.cloud)?;
        records.push(MapRecord {
            map_id: m.map_id,
            file,
            points: m.cloud.len(),
            voxel_size: m.voxel_size,
            visits: m.visits,
            geo_feat: m.geo_feat.values().to_vec(),
        });
    }
    write_features(&dir.join("features.bin"), bank.table())?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        next_id: bank.next_id(),
        feature_dim: VISUAL_DIM,
        feature_entries: bank.table().len(),
        exact_scan_below: bank.table().exact_below,
        thresholds: bank.params,
        maps: records,
    };
    // The manifest is written last; its presence marks a complete directory.
    let path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    write_synced(&path, &json)?;
    Ok(manifest)
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<(), BankError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

fn write_ply(path: &Path, cloud: &PointCloud) -> Result<(), BankError> {
    let mut buf = Vec::with_capacity(200 + cloud.len() * 16);
    write!(
        buf,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float confidence\nend_header\n",
        cloud.len()
    )
    .unwrap();
    for (p, c) in cloud.points.iter().zip(&cloud.confidence) {
        for v in [p.x as f32, p.y as f32, p.z as f32, *c as f32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_synced(path, &buf)
}

fn write_features(path: &Path, table: &FeatureTable) -> Result<(), BankError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let mut put = |b: &[u8]| w.write_all(b).map_err(io_err(path));
    put(FEATURE_MAGIC)?;
    put(&(table.len() as u64).to_le_bytes())?;
    put(&(VISUAL_DIM as u32).to_le_bytes())?;
    for e in table.entries() {
        put(&e.map_id.to_le_bytes())?;
        put(&e.frame_id.to_le_bytes())?;
        for v in e.feature.values() {
            put(&v.to_le_bytes())?;
        }
    }
    let f = w.into_inner().map_err(|e| io_err(path)(e.into_error()))?;
    f.sync_all().map_err(io_err(path))
}

/// Loads a bank, recovering from an interrupted [`persist`] when `root`
/// itself is missing.
pub fn load(root: &Path) -> Result<MemoryBank, BankError> {
    let old = sibling(root, "old");
    let staging = sibling(root, "new");
    let dir = if root.join("manifest.json").exists() {
        root.to_path_buf()
    } else if root.exists() {
        return Err(corrupt(&root.join("manifest.json"), "missing manifest"));
    } else if old.join("manifest.json").exists() {
        old
    } else if staging.join("manifest.json").exists() {
        staging
    } else {
        return Err(BankError::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no bank directory"),
        });
    };
    read_dir(&dir)
}

fn read_dir(dir: &Path) -> Result<MemoryBank, BankError> {
    let mpath = dir.join("manifest.json");
    let bytes = fs::read(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| corrupt(&mpath, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(corrupt(&mpath, format!("unsupported version {}", manifest.version)));
    }
    let fpath = dir.join("features.bin");
    let entries = read_features(&fpath)?;
    if entries.len() != manifest.feature_entries {
        return Err(corrupt(&fpath, format!("{} entries, manifest says {}", entries.len(), manifest.feature_entries)));
    }
    let mut table = FeatureTable::new();
    table.exact_below = manifest.exact_scan_below;
    let mut kf: BTreeMap<MapId, Vec<(u64, FeatureVec)>> = BTreeMap::new();
    for (map_id, frame_id, f) in entries {
        if !manifest.maps.iter().any(|r| r.map_id == map_id) {
            return Err(corrupt(&fpath, format!("entry refers to unknown map {map_id}")));
        }
        kf.entry(map_id).or_default().push((frame_id, f.clone()));
        table.insert(f, map_id, frame_id)?;
    }
    let mut maps = BTreeMap::new();
    for r in &manifest.maps {
        let ppath = dir.join(&r.file);
        let cloud = read_ply(&ppath)?;
        if cloud.len() != r.points {
            return Err(corrupt(&ppath, format!("{} points, manifest says {}", cloud.len(), r.points)));
        }
        let geo_feat = FeatureVec::geometric(r.geo_feat.clone()).map_err(|e| corrupt(&mpath, e.to_string()))?;
        maps.insert(
            r.map_id,
            MemoryMap {
                map_id: r.map_id,
                cloud,
                keyframe_feats: kf.remove(&r.map_id).unwrap_or_default(),
                geo_feat,
                voxel_size: r.voxel_size,
                visits: r.visits,
            },
        );
    }
    Ok(MemoryBank::from_parts(maps, table, manifest.next_id, manifest.thresholds))
}

fn read_features(path: &Path) -> Result<Vec<(MapId, u64, FeatureVec)>, BankError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(corrupt(path, "bad header"));
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if dim != VISUAL_DIM {
        return Err(corrupt(path, format!("feature dim {dim}, expected {VISUAL_DIM}")));
    }
    let stride = 16 + 4 * dim;
    if bytes.len() != 16 + count * stride {
        return Err(corrupt(path, format!("expected {} bytes, found {}", 16 + count * stride, bytes.len())));
    }
    (0..count)
        .map(|i| {
            let e = &bytes[16 + i * stride..16 + (i + 1) * stride];
            let map_id = u64::from_le_bytes(e[0..8].try_into().unwrap());
            let frame_id = u64::from_le_bytes(e[8..16].try_into().unwrap());
            let values = e[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let f = FeatureVec::visual(values).map_err(|err| corrupt(path, format!("entry {i}: {err}")))?;
            Ok((map_id, frame_id, f))
        })
        .collect()
}

fn read_ply(path: &Path) -> Result<PointCloud, BankError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    const END: &[u8] = b"end_header\n";
    let hend = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| corrupt(path, "missing end_header"))?
        + END.len();
    let header = std::str::from_utf8(&bytes[..hend]).map_err(|_| corrupt(path, "header is not utf-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") || lines.next() != Some("format binary_little_endian 1.0") {
        return Err(corrupt(path, "not a binary little-endian PLY"));
    }
    let mut n = None;
    let mut props = Vec::new();
    for l in lines {
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["element", "vertex", c] => n = c.parse::<usize>().ok(),
            ["property", "float", name] => props.push(*name),
            ["end_header"] => {}
            _ => return Err(corrupt(path, format!("unexpected header line {l:?}"))),
        }
    }
    let n = n.ok_or_else(|| corrupt(path, "missing vertex count"))?;
    if props != ["x", "y", "z", "confidence"] {
        return Err(corrupt(path, "expected float properties x y z confidence"));
    }
    let body = &bytes[hend..];
    if body.len() != n * 16 {
        return Err(corrupt(path, format!("truncated: {} of {} data bytes", body.len(), n * 16)));
    }
    let mut cloud = PointCloud::default();
    for rec in body.chunks_exact(16) {
        let v: Vec<f64> = rec.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(corrupt(path, "non-finite vertex"));
        }
        cloud.push(Vector3::new(v[0], v[1], v[2]), v[3]);
    }
    Ok(cloud)
}
