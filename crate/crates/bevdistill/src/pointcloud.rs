//! Point clouds, label files and label remapping.
//!
//! Scans use the SemanticKITTI on-disk layout: `.bin` files hold
//! little-endian `f32` quadruples `(x, y, z, intensity)`, `.label` files one
//! little-endian `u32` per point whose low 16 bits are the semantic id (the
//! high 16 bits carry an instance id and are discarded). Raw semantic ids
//! are remapped to contiguous train ids through a user-supplied
//! [`LabelRemap`]; the repo ships the 19-class SemanticKITTI table as a
//! fixture.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One LiDAR return: Cartesian position in meters plus reflectance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

/// A scan of `N` points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-point class ids with a reserved ignore id that losses and metrics
/// skip.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub labels: Vec<u32>,
    pub ignore_id: u32,
}

impl LabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mapping from raw 16-bit semantic ids to train ids in
/// `{0..num_classes-1} ∪ {ignore_id}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRemap {
    map: BTreeMap<u16, u32>,
    pub num_classes: usize,
    pub ignore_id: u32,
}

impl LabelRemap {
    pub fn new(map: BTreeMap<u16, u32>, num_classes: usize, ignore_id: u32) -> Result<Self> {
        if (ignore_id as usize) < num_classes {
            return Err(Error::Config(format!(
                "ignore_id {ignore_id} collides with train ids 0..{num_classes}"
            )));
        }
        for (&raw, &train) in &map {
            if (train as usize) >= num_classes && train != ignore_id {
                return Err(Error::Config(format!(
                    "remap entry {raw} -> {train} is neither a train id nor the ignore id"
                )));
            }
        }
        Ok(LabelRemap {
            map,
            num_classes,
            ignore_id,
        })
    }

    /// Identity mapping over `num_classes` train ids.
    pub fn identity(num_classes: usize, ignore_id: u32) -> Self {
        let map = (0..num_classes as u16).map(|i| (i, i as u32)).collect();
        LabelRemap::new(map, num_classes, ignore_id).expect("identity remap is valid")
    }

    pub fn get(&self, raw: u16) -> Option<u32> {
        self.map.get(&raw).copied()
    }

    /// Parses the remap config: a JSON object whose numeric-string keys are
    /// raw semantic ids mapped to train ids, alongside the reserved fields
    /// `"num_classes"` and `"ignore_id"`.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("remap config must be a JSON object".into()))?;
        let field_u64 = |name: &str| -> Result<u64> {
            obj.get(name)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Config(format!("remap config missing field {name:?}")))
        };
        let num_classes = field_u64("num_classes")? as usize;
        let ignore_id = field_u64("ignore_id")? as u32;
        let mut map = BTreeMap::new();
        for (key, val) in obj {
            if key == "num_classes" || key == "ignore_id" {
                continue;
            }
            let raw: u16 = key
                .parse()
                .map_err(|_| Error::Config(format!("remap key {key:?} is not a raw label id")))?;
            let train = val
                .as_u64()
                .ok_or_else(|| Error::Config(format!("remap value for {key:?} must be an id")))?;
            map.insert(raw, train as u32);
        }
        LabelRemap::new(map, num_classes, ignore_id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

const POINT_STRIDE: u64 = 16;
const LABEL_STRIDE: u64 = 4;

/// Reads a SemanticKITTI `.bin` scan: little-endian `f32 ×4` per point,
/// widened to `f64`.
pub fn read_point_cloud_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() as u64 % POINT_STRIDE != 0 {
        return Err(Error::MisalignedFile {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            stride: POINT_STRIDE,
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / POINT_STRIDE as usize);
    for chunk in bytes.chunks_exact(POINT_STRIDE as usize) {
        let f = |o: usize| f32::from_le_bytes(chunk[o..o + 4].try_into().unwrap()) as f64;
        points.push(Point {
            x: f(0),
            y: f(4),
            z: f(8),
            intensity: f(12),
        });
    }
    Ok(PointCloud { points })
}

/// Writes a scan in the `.bin` layout, narrowing coordinates to `f32`.
pub fn write_point_cloud_bin(path: &Path, pc: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(pc.len() * POINT_STRIDE as usize);
    for p in &pc.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a `.label` file; the semantic id is the low 16 bits of each
/// little-endian `u32` (the instance id in the high bits is discarded).
pub fn read_labels(path: &Path, ignore_id: u32) -> Result<LabelSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() as u64 % LABEL_STRIDE != 0 {
        return Err(Error::MisalignedFile {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            stride: LABEL_STRIDE,
        });
    }
    let labels = bytes
        .chunks_exact(LABEL_STRIDE as usize)
        .map(|chunk| u32::from_le_bytes(chunk.try_into().unwrap()) & 0xFFFF)
        .collect();
    Ok(LabelSet { labels, ignore_id })
}

/// Writes a `.label` file (instance bits zero).
pub fn write_labels(path: &Path, labels: &LabelSet) -> Result<()> {
    let mut bytes = Vec::with_capacity(labels.len() * LABEL_STRIDE as usize);
    for &l in &labels.labels {
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Applies a [`LabelRemap`] to every label. Ids missing from the table are
/// an error naming the offending id.
pub fn remap_labels(raw: &LabelSet, remap: &LabelRemap) -> Result<LabelSet> {
    let mut labels = Vec::with_capacity(raw.len());
    for &l in &raw.labels {
        let id = (l & 0xFFFF) as u16;
        match remap.get(id) {
            Some(train) => labels.push(train),
            None => return Err(Error::UnmappedLabel { id }),
        }
    }
    Ok(LabelSet {
        labels,
        ignore_id: remap.ignore_id,
    })
}

/// Class weights proportional to the reciprocal class frequency over a
/// training split. Classes that never occur get weight zero; the ignore id
/// never counts. Weights are left unnormalized (the weighted cross-entropy
/// normalizes per batch).
pub fn compute_class_weights(label_sets: &[&LabelSet], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; num_classes];
    let mut total = 0u64;
    for set in label_sets {
        for &l in &set.labels {
            if l == set.ignore_id {
                continue;
            }
            counts[l as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Numeric(
            "class weights: every point carries the ignore label".into(),
        ));
    }
    Ok(counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { total as f64 / c as f64 })
        .collect())
}
