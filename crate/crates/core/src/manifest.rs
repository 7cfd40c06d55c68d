//! Line-oriented dataset manifests.
//!
//! A manifest is UTF-8 text. The first line is `reidmanifest <version>`;
//! each following non-empty, non-`#` line is one record of
//! whitespace-separated `key=value` fields:
//!
//! ```text
//! reidmanifest 1
//! id=0002_c001 identity=2 camera=1 orientation=front features=emb.bin features_row=1 heatmaps=maps/0002.hmap keypoints=kp.bin keypoints_row=1
//! ```
//!
//! `id`, `identity` and `camera` are required. `features`/`keypoints` point
//! into shared blobs with a 0-based `*_row`; `heatmaps` names one stack blob
//! per record. Paths are relative to the manifest's directory and must not
//! contain whitespace. Loading validates everything eagerly: the schema
//! version, id uniqueness, that referenced blobs exist, that rows are in
//! range, and that dimensions agree across the whole dataset.

use crate::blob::{
    read_embedding_header, read_embeddings, read_heatmap_header, read_heatmap_stack,
    read_keypoint_header, read_keypoints, EmbeddingBlob, KeypointAnnotation,
};
use crate::error::{Error, Result};
use crate::heatmaps::HeatmapStack;
use crate::orientation::Orientation;
use crate::retrieval::EmbeddingRecord;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_HEADER: &str = "reidmanifest";

/// A row index into a shared blob file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlobRef {
    pub path: String,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub image_id: String,
    pub identity: i64,
    pub camera: i64,
    pub orientation: Option<Orientation>,
    pub features: Option<BlobRef>,
    pub heatmaps: Option<String>,
    pub keypoints: Option<BlobRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    version: u32,
    records: Vec<ManifestRecord>,
    base_dir: PathBuf,
}

impl DatasetManifest {
    /// Builds an in-memory manifest rooted at `base_dir`. Ids must be unique;
    /// blob references are validated on [`save_manifest`]/[`load_manifest`]
    /// round trips, not here.
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::DuplicateId(r.image_id.clone()));
            }
        }
        Ok(DatasetManifest {
            version: MANIFEST_VERSION,
            records,
            base_dir: base_dir.into(),
        })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base_dir.join(relative)
    }
}

fn field_value(token: &str) -> Option<(&str, &str)> {
    token.split_once('=')
}

fn parse_record(line: &str, line_no: usize) -> Result<ManifestRecord> {
    let mut image_id = None;
    let mut identity = None;
    let mut camera = None;
    let mut orientation = None;
    let mut features_path = None;
    let mut features_row = None;
    let mut heatmaps = None;
    let mut keypoints_path = None;
    let mut keypoints_row = None;

    let bad = |what: &str| Error::Manifest(format!("line {line_no}: {what}"));

    for token in line.split_whitespace() {
        let (key, value) =
            field_value(token).ok_or_else(|| bad(&format!("field `{token}` is not key=value")))?;
        if value.is_empty() {
            return Err(bad(&format!("field `{key}` has an empty value")));
        }
        match key {
            "id" => image_id = Some(value.to_string()),
            "identity" => {
                identity = Some(value.parse::<i64>().map_err(|_| {
                    bad(&format!("identity `{value}` is not an integer"))
                })?)
            }
            "camera" => {
                camera = Some(
                    value
                        .parse::<i64>()
                        .map_err(|_| bad(&format!("camera `{value}` is not an integer")))?,
                )
            }
            "orientation" => {
                orientation = Some(value.parse::<Orientation>().map_err(|e| {
                    bad(&format!("bad orientation: {e}"))
                })?)
            }
            "features" => features_path = Some(value.to_string()),
            "features_row" => {
                features_row = Some(value.parse::<usize>().map_err(|_| {
                    bad(&format!("features_row `{value}` is not an index"))
                })?)
            }
            "heatmaps" => heatmaps = Some(value.to_string()),
            "keypoints" => keypoints_path = Some(value.to_string()),
            "keypoints_row" => {
                keypoints_row = Some(value.parse::<usize>().map_err(|_| {
                    bad(&format!("keypoints_row `{value}` is not an index"))
                })?)
            }
            other => return Err(bad(&format!("unknown field `{other}`"))),
        }
    }

    let features = match (features_path, features_row) {
        (Some(path), row) => Some(BlobRef {
            path,
            row: row.unwrap_or(0),
        }),
        (None, Some(_)) => return Err(bad("features_row given without features")),
        (None, None) => None,
    };
    let keypoints = match (keypoints_path, keypoints_row) {
        (Some(path), row) => Some(BlobRef {
            path,
            row: row.unwrap_or(0),
        }),
        (None, Some(_)) => return Err(bad("keypoints_row given without keypoints")),
        (None, None) => None,
    };

    Ok(ManifestRecord {
        image_id: image_id.ok_or_else(|| bad("missing required field `id`"))?,
        identity: identity.ok_or_else(|| bad("missing required field `identity`"))?,
        camera: camera.ok_or_else(|| bad("missing required field `camera`"))?,
        orientation,
        features,
        heatmaps,
        keypoints,
    })
}

/// Parses and validates a manifest. Blob existence, row ranges and
/// cross-record dimension agreement are all checked before returning.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingBlob(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();

    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() || l.trim_start().starts_with('#') => continue,
            Some((_, l)) => break l.trim(),
            None => return Err(Error::Manifest("empty manifest".into())),
        }
    };
    let version = header
        .strip_prefix(MANIFEST_HEADER)
        .map(str::trim)
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| {
            Error::Manifest(format!(
                "bad header `{header}` (expected `{MANIFEST_HEADER} <version>`)"
            ))
        })?;
    if version != MANIFEST_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported schema version {version} (supported: {MANIFEST_VERSION})"
        )));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in lines {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record = parse_record(trimmed, idx + 1)?;
        if !seen.insert(record.image_id.clone()) {
            return Err(Error::DuplicateId(record.image_id));
        }
        records.push(record);
    }

    let manifest = DatasetManifest {
        version,
        records,
        base_dir,
    };
    validate_blob_references(&manifest)?;
    Ok(manifest)
}

fn validate_blob_references(manifest: &DatasetManifest) -> Result<()> {
    let mut embedding_headers = HashMap::new();
    let mut heatmap_headers = HashMap::new();
    let mut keypoint_headers = HashMap::new();

    let mut feature_dim: Option<usize> = None;
    let mut heatmap_geometry: Option<(usize, usize, usize)> = None;
    let mut keypoints_per_image: Option<usize> = None;

    for record in &manifest.records {
        if let Some(feat) = &record.features {
            let header = match embedding_headers.get(&feat.path) {
                Some(h) => *h,
                None => {
                    let h = read_embedding_header(&manifest.resolve(&feat.path))?;
                    embedding_headers.insert(feat.path.clone(), h);
                    h
                }
            };
            if feat.row >= header.count {
                return Err(Error::Manifest(format!(
                    "record `{}`: features_row {} out of 0..{} in {}",
                    record.image_id, feat.row, header.count, feat.path
                )));
            }
            match feature_dim {
                Some(dim) if dim != header.dim => {
                    return Err(Error::dim(
                        format!("record `{}` feature blob {}", record.image_id, feat.path),
                        dim,
                        header.dim,
                    ));
                }
                _ => feature_dim = Some(header.dim),
            }
        }
        if let Some(hm) = &record.heatmaps {
            let header = match heatmap_headers.get(hm) {
                Some(h) => *h,
                None => {
                    let h = read_heatmap_header(&manifest.resolve(hm))?;
                    heatmap_headers.insert(hm.clone(), h);
                    h
                }
            };
            let geom = (header.channels, header.height, header.width);
            match heatmap_geometry {
                Some(expected) if expected != geom => {
                    return Err(Error::dim(
                        format!("record `{}` heatmap blob {hm}", record.image_id),
                        format!("{}x{}x{}", expected.0, expected.1, expected.2),
                        format!("{}x{}x{}", geom.0, geom.1, geom.2),
                    ));
                }
                _ => heatmap_geometry = Some(geom),
            }
        }
        if let Some(kp) = &record.keypoints {
            let header = match keypoint_headers.get(&kp.path) {
                Some(h) => *h,
                None => {
                    let h = read_keypoint_header(&manifest.resolve(&kp.path))?;
                    keypoint_headers.insert(kp.path.clone(), h);
                    h
                }
            };
            if kp.row >= header.count {
                return Err(Error::Manifest(format!(
                    "record `{}`: keypoints_row {} out of 0..{} in {}",
                    record.image_id, kp.row, header.count, kp.path
                )));
            }
            match keypoints_per_image {
                Some(n) if n != header.keypoints_per_image => {
                    return Err(Error::dim(
                        format!("record `{}` key-point blob {}", record.image_id, kp.path),
                        n,
                        header.keypoints_per_image,
                    ));
                }
                _ => keypoints_per_image = Some(header.keypoints_per_image),
            }
        }
    }
    Ok(())
}

fn check_no_whitespace(what: &str, value: &str) -> Result<()> {
    if value.is_empty() || value.chars().any(char::is_whitespace) {
        return Err(Error::Manifest(format!(
            "{what} `{value}` must be non-empty and contain no whitespace"
        )));
    }
    Ok(())
}

/// Serializes the manifest in canonical field order. Saving then loading
/// then saving again yields identical bytes.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = format!("{MANIFEST_HEADER} {}\n", manifest.version);
    for r in &manifest.records {
        check_no_whitespace("image id", &r.image_id)?;
        write!(out, "id={} identity={} camera={}", r.image_id, r.identity, r.camera).unwrap();
        if let Some(o) = r.orientation {
            write!(out, " orientation={o}").unwrap();
        }
        if let Some(f) = &r.features {
            check_no_whitespace("features path", &f.path)?;
            write!(out, " features={} features_row={}", f.path, f.row).unwrap();
        }
        if let Some(h) = &r.heatmaps {
            check_no_whitespace("heatmaps path", h)?;
            write!(out, " heatmaps={h}").unwrap();
        }
        if let Some(k) = &r.keypoints {
            check_no_whitespace("keypoints path", &k.path)?;
            write!(out, " keypoints={} keypoints_row={}", k.path, k.row).unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Materializes retrieval records: every manifest record must reference a
/// feature row. Blobs are opened once per distinct path.
pub fn load_embedding_records(manifest: &DatasetManifest) -> Result<Vec<EmbeddingRecord>> {
    let mut blobs: HashMap<&str, EmbeddingBlob> = HashMap::new();
    let mut records = Vec::with_capacity(manifest.records().len());
    for r in manifest.records() {
        let feat = r.features.as_ref().ok_or_else(|| {
            Error::Manifest(format!("record `{}` has no feature reference", r.image_id))
        })?;
        if !blobs.contains_key(feat.path.as_str()) {
            let blob = read_embeddings(&manifest.resolve(&feat.path))?;
            blobs.insert(feat.path.as_str(), blob);
        }
        let blob = &blobs[feat.path.as_str()];
        records.push(EmbeddingRecord {
            image_id: r.image_id.clone(),
            identity: r.identity,
            camera: r.camera,
            feature: blob.features[feat.row].clone(),
            orientation_likelihood: blob.likelihood(feat.row)?,
        });
    }
    Ok(records)
}

/// Loads one record's heatmap stack.
pub fn load_heatmaps(manifest: &DatasetManifest, record: &ManifestRecord) -> Result<HeatmapStack> {
    let path = record.heatmaps.as_ref().ok_or_else(|| {
        Error::Manifest(format!(
            "record `{}` has no heatmap reference",
            record.image_id
        ))
    })?;
    read_heatmap_stack(&manifest.resolve(path))
}

/// Loads one record's ground-truth key-point annotation.
pub fn load_keypoint_annotation(
    manifest: &DatasetManifest,
    record: &ManifestRecord,
) -> Result<KeypointAnnotation> {
    let kp = record.keypoints.as_ref().ok_or_else(|| {
        Error::Manifest(format!(
            "record `{}` has no key-point reference",
            record.image_id
        ))
    })?;
    let annotations = read_keypoints(&manifest.resolve(&kp.path))?;
    Ok(annotations[kp.row].clone())
}
