//! Binary blob formats for tensors shared between tools.
//!
//! Every format is little-endian with an 8-byte ASCII magic, 32-bit unsigned
//! dimensions, then IEEE-754 32-bit float payloads:
//!
//! * `RIDHMAP1` — heatmap stack: channels, height, width, then
//!   channel-major row-major values.
//! * `RIDDIST1` — distance matrix: rows, cols, then row-major values.
//! * `RIDEMBD1` — embeddings: count, dim, has_likelihood flag, then
//!   row-major feature vectors and, when flagged, count 8-float likelihoods.
//! * `RIDKPTS1` — key-point annotations: count, keypoints per image, then
//!   per key-point x, y, visible (0.0 or 1.0).
//! * `RIDFUSE1` — fusion checkpoint: global dim, local dim, hidden layer
//!   count and widths, class count, then layer tensors in declaration order
//!   and the trailing alpha scalar.
//!
//! In-memory values are f64 and are widened on load; a write/read/write
//! cycle reproduces the file byte for byte.

use crate::error::{Error, Result};
use crate::fusion::{AffineLayer, FusionHead};
use crate::heatmaps::{Heatmap, HeatmapStack};
use crate::losses::L2SoftmaxParams;
use crate::matrix::Matrix;
use crate::orientation::{OrientationLikelihood, NUM_ORIENTATIONS};
use crate::retrieval::{DistanceMatrix, DistanceMetric};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const HEATMAP_MAGIC: &[u8; 8] = b"RIDHMAP1";
pub const DISTANCE_MAGIC: &[u8; 8] = b"RIDDIST1";
pub const EMBEDDING_MAGIC: &[u8; 8] = b"RIDEMBD1";
pub const KEYPOINT_MAGIC: &[u8; 8] = b"RIDKPTS1";
pub const FUSION_MAGIC: &[u8; 8] = b"RIDFUSE1";

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, buf: &'a [u8]) -> Self {
        Reader { path, buf, pos: 0 }
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::format(self.path, reason)
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        if self.buf.len() < 8 {
            return Err(self.fail("file shorter than magic"));
        }
        if &self.buf[..8] != expected {
            return Err(self.fail(format!(
                "bad magic: expected {:?}",
                String::from_utf8_lossy(expected)
            )));
        }
        self.pos = 8;
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        if self.pos + 4 > self.buf.len() {
            return Err(self.fail("truncated header"));
        }
        let v = u32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn f32_values(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| self.fail("payload size overflow"))?;
        if self.pos + bytes > self.buf.len() {
            return Err(self.fail(format!(
                "truncated payload: need {} bytes past offset {}, have {}",
                bytes,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let values = self.buf[self.pos..self.pos + bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        self.pos += bytes;
        Ok(values)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 8]) -> Self {
        Writer {
            buf: magic.to_vec(),
        }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32_values(&mut self, values: &[f64]) {
        for &v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn save(self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(&self.buf)?;
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(buf) => Ok(buf),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::MissingBlob(path.to_path_buf()))
        }
        Err(e) => Err(e.into()),
    }
}

fn dim_to_usize(path: &Path, what: &str, v: u32) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::format(path, format!("{what} does not fit in usize")))
}

// ---------------------------------------------------------------------------
// Heatmap stacks

pub fn write_heatmap_stack(path: &Path, stack: &HeatmapStack) -> Result<()> {
    let mut w = Writer::new(HEATMAP_MAGIC);
    w.u32(stack.num_channels() as u32);
    w.u32(stack.height() as u32);
    w.u32(stack.width() as u32);
    for ch in stack.channels() {
        w.f32_values(ch.values());
    }
    w.save(path)
}

pub fn read_heatmap_stack(path: &Path) -> Result<HeatmapStack> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf);
    r.magic(HEATMAP_MAGIC)?;
    let channels = dim_to_usize(path, "channels", r.u32()?)?;
    let height = dim_to_usize(path, "height", r.u32()?)?;
    let width = dim_to_usize(path, "width", r.u32()?)?;
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::format(
            path,
            format!("empty heatmap geometry {channels}x{height}x{width}"),
        ));
    }
    let mut maps = Vec::with_capacity(channels);
    for _ in 0..channels {
        maps.push(Heatmap::new(height, width, r.f32_values(height * width)?)?);
    }
    r.finish()?;
    HeatmapStack::new(maps)
}

/// Heatmap stack geometry, read without loading the payload. Also checks the
/// file length against the declared dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeatmapHeader {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

pub fn read_heatmap_header(path: &Path) -> Result<HeatmapHeader> {
    let (buf, file_len) = read_header_bytes(path, 20)?;
    let mut r = Reader::new(path, &buf);
    r.magic(HEATMAP_MAGIC)?;
    let channels = dim_to_usize(path, "channels", r.u32()?)?;
    let height = dim_to_usize(path, "height", r.u32()?)?;
    let width = dim_to_usize(path, "width", r.u32()?)?;
    expect_file_len(path, file_len, 20, &[channels, height, width])?;
    Ok(HeatmapHeader {
        channels,
        height,
        width,
    })
}

fn read_header_bytes(path: &Path, n: usize) -> Result<(Vec<u8>, u64)> {
    use std::io::Read;
    let mut file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingBlob(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let len = file.metadata()?.len();
    let mut buf = vec![0u8; n.min(len as usize)];
    file.read_exact(&mut buf)?;
    Ok((buf, len))
}

fn expect_file_len(path: &Path, actual: u64, header: u64, dims: &[usize]) -> Result<()> {
    let mut payload: u64 = 4;
    for &d in dims {
        payload = payload
            .checked_mul(d as u64)
            .ok_or_else(|| Error::format(path, "payload size overflow"))?;
    }
    let expected = header + payload;
    if actual != expected {
        return Err(Error::format(
            path,
            format!("file length {actual} does not match declared size {expected}"),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Distance matrices

pub fn write_distance_matrix(path: &Path, matrix: &DistanceMatrix) -> Result<()> {
    let mut w = Writer::new(DISTANCE_MAGIC);
    w.u32(matrix.rows() as u32);
    w.u32(matrix.cols() as u32);
    w.f32_values(matrix.data());
    w.save(path)
}

pub fn read_distance_matrix(path: &Path, metric: DistanceMetric) -> Result<DistanceMatrix> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf);
    r.magic(DISTANCE_MAGIC)?;
    let rows = dim_to_usize(path, "rows", r.u32()?)?;
    let cols = dim_to_usize(path, "cols", r.u32()?)?;
    let data = r.f32_values(
        rows.checked_mul(cols)
            .ok_or_else(|| Error::format(path, "matrix size overflow"))?,
    )?;
    r.finish()?;
    DistanceMatrix::new(rows, cols, data, metric)
}

// ---------------------------------------------------------------------------
// Embeddings

/// Feature vectors plus optional per-row orientation likelihoods.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlob {
    pub features: Vec<Vec<f64>>,
    pub likelihoods: Option<Vec<[f64; NUM_ORIENTATIONS]>>,
}

impl EmbeddingBlob {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn likelihood(&self, row: usize) -> Result<Option<OrientationLikelihood>> {
        match &self.likelihoods {
            Some(rows) => Ok(Some(OrientationLikelihood::from_probabilities(rows[row])?)),
            None => Ok(None),
        }
    }
}

pub fn write_embeddings(
    path: &Path,
    features: &[Vec<f64>],
    likelihoods: Option<&[[f64; NUM_ORIENTATIONS]]>,
) -> Result<()> {
    let dim = features.first().map_or(0, Vec::len);
    if features.is_empty() || dim == 0 {
        return Err(Error::DegenerateInput(
            "embedding blob needs at least one non-empty feature".into(),
        ));
    }
    for (i, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(Error::dim(format!("feature row {i}"), dim, f.len()));
        }
    }
    if let Some(liks) = likelihoods {
        if liks.len() != features.len() {
            return Err(Error::dim("likelihood rows", features.len(), liks.len()));
        }
    }
    let mut w = Writer::new(EMBEDDING_MAGIC);
    w.u32(features.len() as u32);
    w.u32(dim as u32);
    w.u32(u32::from(likelihoods.is_some()));
    for f in features {
        w.f32_values(f);
    }
    if let Some(liks) = likelihoods {
        for l in liks {
            w.f32_values(l);
        }
    }
    w.save(path)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingBlob> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf);
    r.magic(EMBEDDING_MAGIC)?;
    let count = dim_to_usize(path, "count", r.u32()?)?;
    let dim = dim_to_usize(path, "dim", r.u32()?)?;
    let has_lik = match r.u32()? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::format(
                path,
                format!("has_likelihood flag must be 0 or 1, got {other}"),
            ))
        }
    };
    if count == 0 || dim == 0 {
        return Err(Error::format(path, "empty embedding blob"));
    }
    let mut features = Vec::with_capacity(count);
    for _ in 0..count {
        features.push(r.f32_values(dim)?);
    }
    let likelihoods = if has_lik {
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            let v = r.f32_values(NUM_ORIENTATIONS)?;
            let mut arr = [0.0; NUM_ORIENTATIONS];
            arr.copy_from_slice(&v);
            rows.push(arr);
        }
        Some(rows)
    } else {
        None
    };
    r.finish()?;
    Ok(EmbeddingBlob {
        features,
        likelihoods,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingHeader {
    pub count: usize,
    pub dim: usize,
    pub has_likelihood: bool,
}

pub fn read_embedding_header(path: &Path) -> Result<EmbeddingHeader> {
    let (buf, file_len) = read_header_bytes(path, 20)?;
    let mut r = Reader::new(path, &buf);
    r.magic(EMBEDDING_MAGIC)?;
    let count = dim_to_usize(path, "count", r.u32()?)?;
    let dim = dim_to_usize(path, "dim", r.u32()?)?;
    let has_likelihood = r.u32()? != 0;
    let lik_values = if has_likelihood {
        count * NUM_ORIENTATIONS
    } else {
        0
    };
    expect_file_len(path, file_len, 20 + lik_values as u64 * 4, &[count, dim])?;
    Ok(EmbeddingHeader {
        count,
        dim,
        has_likelihood,
    })
}

// ---------------------------------------------------------------------------
// Key-point annotations

/// One image's annotated key-points on the native grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointAnnotation {
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

pub fn write_keypoints(path: &Path, annotations: &[KeypointAnnotation]) -> Result<()> {
    let per_image = annotations.first().map_or(0, |a| a.points.len());
    if annotations.is_empty() || per_image == 0 {
        return Err(Error::DegenerateInput(
            "key-point blob needs at least one annotated image".into(),
        ));
    }
    let mut w = Writer::new(KEYPOINT_MAGIC);
    w.u32(annotations.len() as u32);
    w.u32(per_image as u32);
    for (i, a) in annotations.iter().enumerate() {
        if a.points.len() != per_image || a.visible.len() != per_image {
            return Err(Error::dim(
                format!("annotation {i}"),
                per_image,
                a.points.len().min(a.visible.len()),
            ));
        }
        for (p, &vis) in a.points.iter().zip(&a.visible) {
            w.f32_values(&[p[0], p[1], f64::from(u8::from(vis))]);
        }
    }
    w.save(path)
}

pub fn read_keypoints(path: &Path) -> Result<Vec<KeypointAnnotation>> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf);
    r.magic(KEYPOINT_MAGIC)?;
    let count = dim_to_usize(path, "count", r.u32()?)?;
    let per_image = dim_to_usize(path, "keypoints per image", r.u32()?)?;
    if count == 0 || per_image == 0 {
        return Err(Error::format(path, "empty key-point blob"));
    }
    let mut annotations = Vec::with_capacity(count);
    for _ in 0..count {
        let raw = r.f32_values(per_image * 3)?;
        let mut points = Vec::with_capacity(per_image);
        let mut visible = Vec::with_capacity(per_image);
        for chunk in raw.chunks_exact(3) {
            points.push([chunk[0], chunk[1]]);
            visible.push(chunk[2] != 0.0);
        }
        annotations.push(KeypointAnnotation { points, visible });
    }
    r.finish()?;
    Ok(annotations)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeypointHeader {
    pub count: usize,
    pub keypoints_per_image: usize,
}

pub fn read_keypoint_header(path: &Path) -> Result<KeypointHeader> {
    let (buf, file_len) = read_header_bytes(path, 16)?;
    let mut r = Reader::new(path, &buf);
    r.magic(KEYPOINT_MAGIC)?;
    let count = dim_to_usize(path, "count", r.u32()?)?;
    let keypoints_per_image = dim_to_usize(path, "keypoints per image", r.u32()?)?;
    expect_file_len(path, file_len, 16, &[count, keypoints_per_image, 3])?;
    Ok(KeypointHeader {
        count,
        keypoints_per_image,
    })
}

// ---------------------------------------------------------------------------
// Fusion checkpoints

pub fn write_fusion_head(path: &Path, head: &FusionHead) -> Result<()> {
    let mut w = Writer::new(FUSION_MAGIC);
    w.u32(head.global_dim as u32);
    w.u32(head.local_dim as u32);
    w.u32(head.layers.len() as u32);
    for layer in &head.layers {
        w.u32(layer.weights.rows() as u32);
    }
    w.u32(head.classifier.num_classes() as u32);
    for layer in &head.layers {
        w.f32_values(layer.weights.data());
        w.f32_values(&layer.biases);
    }
    w.f32_values(head.classifier.weights.data());
    w.f32_values(&head.classifier.biases);
    w.f32_values(&[head.classifier.alpha]);
    w.save(path)
}

pub fn read_fusion_head(path: &Path) -> Result<FusionHead> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf);
    r.magic(FUSION_MAGIC)?;
    let global_dim = dim_to_usize(path, "global dim", r.u32()?)?;
    let local_dim = dim_to_usize(path, "local dim", r.u32()?)?;
    let num_hidden = dim_to_usize(path, "hidden layer count", r.u32()?)?;
    let mut widths = Vec::with_capacity(num_hidden);
    for _ in 0..num_hidden {
        widths.push(dim_to_usize(path, "hidden width", r.u32()?)?);
    }
    let classes = dim_to_usize(path, "class count", r.u32()?)?;
    if global_dim == 0 || local_dim == 0 || num_hidden == 0 || classes < 2 {
        return Err(Error::format(path, "invalid checkpoint geometry"));
    }

    let mut layers = Vec::with_capacity(num_hidden);
    let mut fan_in = global_dim + local_dim;
    for &width in &widths {
        if width == 0 {
            return Err(Error::format(path, "zero-width hidden layer"));
        }
        let weights = Matrix::from_vec(width, fan_in, r.f32_values(width * fan_in)?)?;
        let biases = r.f32_values(width)?;
        layers.push(AffineLayer { weights, biases });
        fan_in = width;
    }
    let cls_weights = Matrix::from_vec(classes, fan_in, r.f32_values(classes * fan_in)?)?;
    let cls_biases = r.f32_values(classes)?;
    let alpha = r.f32_values(1)?[0];
    r.finish()?;
    let classifier = L2SoftmaxParams::new(cls_weights, cls_biases, alpha)
        .map_err(|e| Error::format(path, format!("invalid classifier: {e}")))?;
    Ok(FusionHead {
        global_dim,
        local_dim,
        layers,
        classifier,
    })
}
