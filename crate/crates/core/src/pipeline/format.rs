//! On-disk sequence layout.
//!
//! ```text
//! <root>/intrinsics.txt          fx fy cx cy w h
//! <root>/NNNNNN.depth.f32        grid, 1 channel
//! <root>/NNNNNN.conf.f32         grid, 1 channel
//! <root>/NNNNNN.flow.f32         grid, 2 channels (to the previous frame)
//! <root>/NNNNNN.pose.txt         4×4 row-major world→camera
//! <root>/NNNNNN.feat.f32         grid 1024×1×1 (optional)
//! <root>/NNNNNN.matches.txt      x1 y1 x2 y2 score (optional)
//! ```
//!
//! Grids start with a 16-byte header (`CMGR`, u32 width, u32 height, u32
//! channels) followed by little-endian `f32` values, row-major with
//! interleaved channels.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector2};

use super::{FrameBundle, PipelineError};
use crate::geometry::{Intrinsics, Pose};
use crate::grid::{Grid, Mask};
use crate::membank::FeatureVec;
use crate::motioncue::KeypointMatch;
use crate::posegraph::{read_tum, write_tum};

pub const GRID_MAGIC: &[u8; 4] = b"CMGR";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(file: &Path, field: &str, detail: impl Into<String>) -> PipelineError {
    PipelineError::Format {
        file: file.to_path_buf(),
        field: field.into(),
        detail: detail.into(),
    }
}

/// Raw contents of a grid file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn write_grid(path: &Path, g: &RawGrid) -> Result<(), PipelineError> {
    assert_eq!(g.data.len(), g.width * g.height * g.channels);
    let mut bytes = Vec::with_capacity(16 + 4 * g.data.len());
    bytes.extend_from_slice(GRID_MAGIC);
    for v in [g.width, g.height, g.channels] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &g.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_grid(path: &Path) -> Result<RawGrid, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 16 || &bytes[..4] != GRID_MAGIC {
        return Err(format_err(path, "header", "missing CMGR magic"));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (width, height, channels) = (u(4), u(8), u(12));
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| format_err(path, "header", "dimensions overflow"))?;
    if bytes.len() != 16 + 4 * n {
        return Err(format_err(
            path,
            "data",
            format!("{width}×{height}×{channels} needs {} bytes, file has {}", 16 + 4 * n, bytes.len()),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawGrid {
        width,
        height,
        channels,
        data,
    })
}

fn expect_dims(path: &Path, g: &RawGrid, k: &Intrinsics, channels: usize) -> Result<(), PipelineError> {
    if (g.width, g.height, g.channels) != (k.width, k.height, channels) {
        return Err(format_err(
            path,
            "dimensions",
            format!(
                "got {}×{}×{}, expected {}×{}×{channels}",
                g.width, g.height, g.channels, k.width, k.height
            ),
        ));
    }
    Ok(())
}

fn first_nonfinite(path: &Path, g: &RawGrid, field: &str) -> Result<(), PipelineError> {
    if let Some(i) = g.data.iter().position(|v| !v.is_finite()) {
        let p = i / g.channels;
        return Err(format_err(
            path,
            field,
            format!("non-finite value at pixel ({}, {})", p % g.width, p / g.width),
        ));
    }
    Ok(())
}

pub fn read_depth(path: &Path, k: &Intrinsics) -> Result<Grid<f64>, PipelineError> {
    let g = read_grid(path)?;
    expect_dims(path, &g, k, 1)?;
    first_nonfinite(path, &g, "depth")?;
    Ok(Grid::from_vec(g.width, g.height, g.data.iter().map(|&v| v as f64).collect()).expect("dims checked"))
}

pub fn read_confidence(path: &Path, k: &Intrinsics) -> Result<Grid<f64>, PipelineError> {
    let g = read_grid(path)?;
    expect_dims(path, &g, k, 1)?;
    first_nonfinite(path, &g, "confidence")?;
    if let Some(i) = g.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(format_err(
            path,
            "confidence",
            format!("value {} outside [0, 1] at pixel ({}, {})", g.data[i], i % g.width, i / g.width),
        ));
    }
    Ok(Grid::from_vec(g.width, g.height, g.data.iter().map(|&v| v as f64).collect()).expect("dims checked"))
}

pub fn read_flow(path: &Path, k: &Intrinsics) -> Result<Grid<Vector2<f64>>, PipelineError> {
    let g = read_grid(path)?;
    expect_dims(path, &g, k, 2)?;
    first_nonfinite(path, &g, "flow")?;
    let v = g.data.chunks_exact(2).map(|c| Vector2::new(c[0] as f64, c[1] as f64)).collect();
    Ok(Grid::from_vec(g.width, g.height, v).expect("dims checked"))
}

pub fn read_feature(path: &Path) -> Result<FeatureVec, PipelineError> {
    let g = read_grid(path)?;
    FeatureVec::visual(g.data).map_err(|e| format_err(path, "feature", e.to_string()))
}

fn scalar_grid(g: &Grid<f64>) -> RawGrid {
    RawGrid {
        width: g.width(),
        height: g.height(),
        channels: 1,
        data: g.as_slice().iter().map(|&v| v as f32).collect(),
    }
}

fn numbers(path: &Path, field: &str, text: &str) -> Result<Vec<f64>, PipelineError> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format_err(path, field, format!("`{t}` is not a finite number")))
        })
        .collect()
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let v = numbers(path, "intrinsics", &text)?;
    if v.len() != 6 {
        return Err(format_err(path, "intrinsics", format!("expected 6 numbers (fx fy cx cy w h), got {}", v.len())));
    }
    let dim = |x: f64, name: &str| {
        (x >= 1.0 && x.fract() == 0.0)
            .then_some(x as usize)
            .ok_or_else(|| format_err(path, name, format!("{x} is not a positive integer")))
    };
    let (w, h) = (dim(v[4], "width")?, dim(v[5], "height")?);
    Intrinsics::new(v[0], v[1], v[2], v[3], w, h).map_err(|e| format_err(path, "intrinsics", e.to_string()))
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<(), PipelineError> {
    let text = format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_pose(path: &Path) -> Result<Pose, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let v = numbers(path, "pose", &text)?;
    if v.len() != 16 {
        return Err(format_err(path, "pose", format!("expected 16 numbers, got {}", v.len())));
    }
    let m = Matrix4::from_row_slice(&v);
    if m.row(3).iter().zip([0.0, 0.0, 0.0, 1.0]).any(|(a, b)| (a - b).abs() > 1e-9) {
        return Err(format_err(path, "pose", "last row must be 0 0 0 1"));
    }
    let p = Pose::from_matrix(&m);
    if !p.is_valid(1e-6) {
        return Err(format_err(path, "pose", "rotation block is not orthonormal"));
    }
    Ok(p)
}

pub fn write_pose(path: &Path, p: &Pose) -> Result<(), PipelineError> {
    let m = p.to_matrix();
    let mut text = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| m[(r, c)].to_string()).collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_matches(path: &Path) -> Result<Vec<KeypointMatch>, PipelineError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let field = format!("line {}", n + 1);
        let v = numbers(path, &field, line)?;
        if v.len() != 5 {
            return Err(format_err(path, &field, "expected x1 y1 x2 y2 score"));
        }
        out.push(KeypointMatch {
            pixel_t: Vector2::new(v[0], v[1]),
            pixel_t2: Vector2::new(v[2], v[3]),
            score: v[4],
        });
    }
    Ok(out)
}

pub fn write_matches(path: &Path, m: &[KeypointMatch]) -> Result<(), PipelineError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for k in m {
        writeln!(w, "{} {} {} {} {}", k.pixel_t.x, k.pixel_t.y, k.pixel_t2.x, k.pixel_t2.y, k.score).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Binary PGM (P5), 255 for set pixels.
pub fn write_pgm(path: &Path, m: &Mask) -> Result<(), PipelineError> {
    let mut bytes = format!("P5\n{} {}\n255\n", m.width(), m.height()).into_bytes();
    bytes.extend(m.as_slice().iter().map(|&b| if b { 255u8 } else { 0 }));
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads a P5 mask; any non-zero value is set.
pub fn read_pgm(path: &Path) -> Result<Mask, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "header", "truncated PGM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "P5" {
        return Err(format_err(path, "header", "not a binary PGM (P5)"));
    }
    let parse = |t: &str| t.parse::<usize>().map_err(|_| format_err(path, "header", format!("bad number `{t}`")));
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, "header", "only 8-bit PGM is supported"));
    }
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != w * h {
        return Err(format_err(path, "data", format!("expected {} pixels, got {}", w * h, data.len())));
    }
    Ok(Grid::from_vec(w, h, data.iter().map(|&v| v != 0).collect()).expect("length checked"))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<Pose>, PipelineError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    read_tum(BufReader::new(f)).map_err(|e| format_err(path, "trajectory", e))
}

/// Writes camera→world poses in TUM format.
pub fn write_trajectory(path: &Path, poses: &[Pose]) -> Result<(), PipelineError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    write_tum(&mut w, poses).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn frame_file(root: &Path, id: u64, suffix: &str) -> PathBuf {
    root.join(format!("{id:06}.{suffix}"))
}

/// Frame ids present in a sequence directory (those with a pose file), in
/// increasing order.
pub fn frame_ids(root: &Path) -> Result<Vec<u64>, PipelineError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".pose.txt") {
            if stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit()) {
                ids.push(stem.parse().expect("digits"));
            }
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Lazily reads and validates the frames of a sequence directory.
pub struct SequenceReader {
    root: PathBuf,
    intrinsics: Intrinsics,
    ids: Vec<u64>,
    next: usize,
}

impl SequenceReader {
    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn read_frame(&self, id: u64) -> Result<FrameBundle, PipelineError> {
        let k = self.intrinsics;
        let file = |s: &str| frame_file(&self.root, id, s);
        let optional = |s: &str| Some(file(s)).filter(|p| p.exists());
        let depth = read_depth(&file("depth.f32"), &k)?;
        let confidence = read_confidence(&file("conf.f32"), &k)?;
        let init_pose = read_pose(&file("pose.txt"))?;
        let flow_prev = optional("flow.f32").map(|p| read_flow(&p, &k)).transpose()?;
        let visual_feat = optional("feat.f32").map(|p| read_feature(&p)).transpose()?;
        let matches_prev = optional("matches.txt").map(|p| read_matches(&p)).transpose()?;
        Ok(FrameBundle {
            frame_id: id,
            intrinsics: k,
            init_pose,
            depth,
            confidence,
            flow_prev,
            visual_feat,
            matches_prev,
        })
    }
}

impl Iterator for SequenceReader {
    type Item = Result<FrameBundle, PipelineError>;

    fn next(&mut self) -> Option<Self::Item> {
        let id = *self.ids.get(self.next)?;
        self.next += 1;
        Some(self.read_frame(id))
    }
}

/// Opens a sequence directory. Frames are decoded on iteration.
pub fn ingest(root: &Path) -> Result<SequenceReader, PipelineError> {
    let intrinsics = read_intrinsics(&root.join("intrinsics.txt"))?;
    let ids = frame_ids(root)?;
    if ids.is_empty() {
        return Err(format_err(root, "frames", "no NNNNNN.pose.txt files"));
    }
    Ok(SequenceReader {
        root: root.to_path_buf(),
        intrinsics,
        ids,
        next: 0,
    })
}

pub fn ingest_all(root: &Path) -> Result<Vec<FrameBundle>, PipelineError> {
    ingest(root)?.collect()
}

/// Writes bundles in the sequence layout. Grid values are stored as `f32`.
pub fn write_sequence(root: &Path, frames: &[FrameBundle]) -> Result<(), PipelineError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let Some(first) = frames.first() else {
        return Err(format_err(root, "frames", "empty sequence"));
    };
    write_intrinsics(&root.join("intrinsics.txt"), &first.intrinsics)?;
    for f in frames {
        let file = |s: &str| frame_file(root, f.frame_id, s);
        write_grid(&file("depth.f32"), &scalar_grid(&f.depth))?;
        write_grid(&file("conf.f32"), &scalar_grid(&f.confidence))?;
        write_pose(&file("pose.txt"), &f.init_pose)?;
        if let Some(flow) = &f.flow_prev {
            let data = flow.as_slice().iter().flat_map(|v| [v.x as f32, v.y as f32]).collect();
            write_grid(
                &file("flow.f32"),
                &RawGrid {
                    width: flow.width(),
                    height: flow.height(),
                    channels: 2,
                    data,
                },
            )?;
        }
        if let Some(feat) = &f.visual_feat {
            let data = feat.values().to_vec();
            write_grid(
                &file("feat.f32"),
                &RawGrid {
                    width: data.len(),
                    height: 1,
                    channels: 1,
                    data,
                },
            )?;
        }
        if let Some(m) = &f.matches_prev {
            write_matches(&file("matches.txt"), m)?;
        }
    }
    Ok(())
}
