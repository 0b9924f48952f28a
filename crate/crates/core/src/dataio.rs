//! Ingestion, validation, splitting and persistence.
//!
//! All documents are UTF-8 JSON with a top-level `schema_version`. Boxes are
//! corner-form `[x_min, y_min, x_max, y_max]` arrays; COCO `[x, y, w, h]`
//! files are accepted through [`InputFormat::Coco`]. Infinite reals are
//! written as the string `"inf"`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::ImageRecord;
use crate::matching::Detection;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    #[default]
    Native,
    Coco,
}

impl std::str::FromStr for InputFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "native" => Ok(InputFormat::Native),
            "coco" => Ok(InputFormat::Coco),
            other => Err(format!("unknown input format {other:?}")),
        }
    }
}

/// Resolved configuration and input hashes embedded in every output file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub config: serde_json::Value,
    /// Input role (e.g. `"manifest"`) to SHA-256 of the file bytes.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    pub ground_truths: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub images: Vec<ImageEntry>,
}

impl DatasetManifest {
    pub fn new(images: Vec<ImageEntry>) -> Self {
        DatasetManifest {
            schema_version: SCHEMA_VERSION,
            images,
        }
    }

    pub fn box_count(&self) -> usize {
        self.images.iter().map(|i| i.ground_truths.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub schema_version: u32,
    pub detector: String,
    pub detections: BTreeMap<String, Vec<Detection>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Per-image detection lists keyed by image id.
pub type DetectionSet = BTreeMap<String, Vec<Detection>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub schema_version: u32,
    pub seed: u64,
    pub calibration: Vec<String>,
    pub test: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

fn validation(path: &Path, message: impl Into<String>) -> Error {
    Error::Validation {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Parses a versioned native document, checking `schema_version` first.
pub fn parse_versioned<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_error(path, e))?;
    let found = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64);
    if found != Some(u64::from(SCHEMA_VERSION)) {
        return Err(Error::SchemaVersion {
            path: path.to_path_buf(),
            found,
            expected: SCHEMA_VERSION,
        });
    }
    serde_json::from_str(text).map_err(|e| parse_error(path, e))
}

pub fn load_versioned<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_versioned(path, &read(path)?)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    fs::read(path)
        .map(|b| sha256_hex(&b))
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Content digest of a calibration set.
pub fn fingerprint_records(images: &[ImageRecord]) -> String {
    let mut h = Sha256::new();
    for img in images {
        h.update(img.image_id.as_bytes());
        h.update([0u8]);
        for b in &img.ground_truths {
            for v in b.to_array() {
                h.update(v.to_le_bytes());
            }
        }
        h.update([1u8]);
        for d in &img.detections {
            for v in d.bbox.to_array() {
                h.update(v.to_le_bytes());
            }
            h.update(d.objectness.to_le_bytes());
            h.update(d.class_id.to_le_bytes());
        }
        h.update([2u8]);
    }
    hex::encode(&h.finalize()[..16])
}

fn validate_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut seen = HashSet::new();
    for img in &manifest.images {
        if !seen.insert(img.image_id.as_str()) {
            return Err(validation(
                path,
                format!("duplicate image_id {:?}", img.image_id),
            ));
        }
        if !(img.width.is_finite() && img.height.is_finite() && img.width > 0.0 && img.height > 0.0)
        {
            return Err(validation(
                path,
                format!(
                    "image {:?}: width and height must be positive",
                    img.image_id
                ),
            ));
        }
        for gt in &img.ground_truths {
            gt.bbox
                .validate()
                .map_err(|m| validation(path, format!("image {:?}: {m}", img.image_id)))?;
            let b = gt.bbox;
            if b.x_min < -img.width
                || b.y_min < -img.height
                || b.x_max > 2.0 * img.width
                || b.y_max > 2.0 * img.height
            {
                log::warn!(
                    "image {:?}: ground truth {:?} lies outside the frame",
                    img.image_id,
                    b.to_array()
                );
            }
            if b.area() == 0.0 {
                log::warn!(
                    "image {:?}: zero-area ground truth {:?}",
                    img.image_id,
                    b.to_array()
                );
            }
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: serde_json::Value,
    width: f64,
    height: f64,
    #[serde(default)]
    file_name: Option<String>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: serde_json::Value,
    bbox: [f64; 4],
    #[serde(default)]
    category_id: Option<u32>,
}

#[derive(Deserialize)]
struct CocoResult {
    image_id: serde_json::Value,
    bbox: [f64; 4],
    score: f64,
    #[serde(default)]
    category_id: u32,
}

fn coco_id(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn manifest_from_coco(path: &Path, coco: CocoFile) -> Result<DatasetManifest> {
    let mut images: Vec<ImageEntry> = coco
        .images
        .into_iter()
        .map(|i| ImageEntry {
            image_id: coco_id(&i.id),
            width: i.width,
            height: i.height,
            file: i.file_name,
            ground_truths: Vec::new(),
        })
        .collect();
    let index: BTreeMap<String, usize> = images
        .iter()
        .enumerate()
        .map(|(k, i)| (i.image_id.clone(), k))
        .collect();
    for ann in coco.annotations {
        let id = coco_id(&ann.image_id);
        let &k = index.get(&id).ok_or_else(|| {
            validation(path, format!("annotation refers to unknown image {id:?}"))
        })?;
        let [x, y, w, h] = ann.bbox;
        images[k].ground_truths.push(GroundTruth {
            bbox: BBox::from_xywh(x, y, w, h),
            class_id: ann.category_id,
        });
    }
    Ok(DatasetManifest::new(images))
}

pub fn parse_ground_truth(path: &Path, text: &str, format: InputFormat) -> Result<DatasetManifest> {
    let manifest = match format {
        InputFormat::Native => parse_versioned(path, text)?,
        InputFormat::Coco => {
            let coco: CocoFile = serde_json::from_str(text).map_err(|e| parse_error(path, e))?;
            manifest_from_coco(path, coco)?
        }
    };
    validate_manifest(path, &manifest)?;
    Ok(manifest)
}

/// Reads and validates a ground-truth manifest.
pub fn load_ground_truth(path: &Path, format: InputFormat) -> Result<DatasetManifest> {
    parse_ground_truth(path, &read(path)?, format)
}

/// Parses a detection file; returns the detector name and detections.
pub fn parse_detections(
    path: &Path,
    text: &str,
    format: InputFormat,
    manifest: &DatasetManifest,
) -> Result<(String, DetectionSet)> {
    let (detector, set) = match format {
        InputFormat::Native => {
            let f: DetectionFile = parse_versioned(path, text)?;
            (f.detector, f.detections)
        }
        InputFormat::Coco => {
            let results: Vec<CocoResult> =
                serde_json::from_str(text).map_err(|e| parse_error(path, e))?;
            let mut set = DetectionSet::new();
            for r in results {
                let [x, y, w, h] = r.bbox;
                set.entry(coco_id(&r.image_id))
                    .or_default()
                    .push(Detection {
                        bbox: BBox::from_xywh(x, y, w, h),
                        objectness: r.score,
                        class_id: r.category_id,
                    });
            }
            ("coco-results".to_string(), set)
        }
    };
    let known: HashSet<&str> = manifest
        .images
        .iter()
        .map(|i| i.image_id.as_str())
        .collect();
    for (id, dets) in &set {
        if !known.contains(id.as_str()) {
            return Err(validation(
                path,
                format!("detections for unknown image {id:?}"),
            ));
        }
        for d in dets {
            d.bbox
                .validate()
                .map_err(|m| validation(path, format!("image {id:?}: {m}")))?;
            if !(0.0..=1.0).contains(&d.objectness) {
                return Err(validation(
                    path,
                    format!("image {id:?}: objectness {} outside [0, 1]", d.objectness),
                ));
            }
        }
    }
    Ok((detector, set))
}

/// Reads detections and checks them against `manifest`. Images without an
/// entry have no detections.
pub fn load_detections(
    path: &Path,
    format: InputFormat,
    manifest: &DatasetManifest,
) -> Result<(String, DetectionSet)> {
    parse_detections(path, &read(path)?, format, manifest)
}

/// Joins ground truth and detections into records for `ids` (all images, in
/// manifest order, when `None`). Ground truths of other classes are dropped
/// when `class_id` is given.
pub fn build_records(
    manifest: &DatasetManifest,
    detections: &DetectionSet,
    ids: Option<&[String]>,
    class_id: Option<u32>,
) -> Result<Vec<ImageRecord>> {
    let by_id: BTreeMap<&str, &ImageEntry> = manifest
        .images
        .iter()
        .map(|i| (i.image_id.as_str(), i))
        .collect();
    let entries: Vec<&ImageEntry> = match ids {
        None => manifest.images.iter().collect(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Validation {
                        path: PathBuf::from("<split>"),
                        message: format!("image {id:?} is not in the manifest"),
                    })
            })
            .collect::<Result<_>>()?,
    };
    Ok(entries
        .into_iter()
        .map(|e| ImageRecord {
            image_id: e.image_id.clone(),
            width: e.width,
            height: e.height,
            ground_truths: e
                .ground_truths
                .iter()
                .filter(|g| match (class_id, g.class_id) {
                    (Some(want), Some(have)) => want == have,
                    _ => true,
                })
                .map(|g| g.bbox)
                .collect(),
            detections: detections.get(&e.image_id).cloned().unwrap_or_default(),
        })
        .collect())
}

/// Seeded shuffle of the image ids followed by a prefix split.
pub fn split_dataset(
    manifest: &DatasetManifest,
    n_cal: usize,
    n_test: usize,
    seed: u64,
) -> Result<Split> {
    let available = manifest.images.len();
    let requested = n_cal.saturating_add(n_test);
    if requested > available {
        return Err(Error::Size {
            requested,
            available,
        });
    }
    let mut ids: Vec<String> = manifest.images.iter().map(|i| i.image_id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ids[n_cal..n_cal + n_test].to_vec();
    ids.truncate(n_cal);
    Ok(Split {
        schema_version: SCHEMA_VERSION,
        seed,
        calibration: ids,
        test,
        provenance: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifact::{CalibrationArtifact, CalibrationConfig, Margins, Method};
    use proptest::prelude::*;

    fn p() -> PathBuf {
        PathBuf::from("mem.json")
    }

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest::new(
            (0..n)
                .map(|i| ImageEntry {
                    image_id: format!("img{i:05}"),
                    width: 1280.0,
                    height: 720.0,
                    file: None,
                    ground_truths: vec![],
                })
                .collect(),
        )
    }

    const MINIMAL: &str = r#"{"schema_version": 1, "images": [
        {"image_id": "a", "width": 1280, "height": 720,
         "ground_truths": [{"bbox": [10, 10, 20, 30]}]}]}"#;

    #[test]
    fn loads_minimal_manifest() {
        let m = parse_ground_truth(&p(), MINIMAL, InputFormat::Native).unwrap();
        assert_eq!((m.images.len(), m.box_count()), (1, 1));
        assert_eq!(
            m.images[0].ground_truths[0].bbox,
            BBox::new(10.0, 10.0, 20.0, 30.0)
        );
    }

    #[test]
    fn rejects_inverted_box_naming_image() {
        let text = MINIMAL.replace("[10, 10, 20, 30]", "[20, 20, 10, 10]");
        let err = parse_ground_truth(&p(), &text, InputFormat::Native).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
        assert!(err.to_string().contains("\"a\""), "{err}");
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = parse_ground_truth(
            &p(),
            "{\"schema_version\": 1,\n \"images\": [,]}",
            InputFormat::Native,
        )
        .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_version_is_checked() {
        let text = MINIMAL.replace("\"schema_version\": 1", "\"schema_version\": 0");
        assert!(matches!(
            parse_ground_truth(&p(), &text, InputFormat::Native),
            Err(Error::SchemaVersion { found: Some(0), .. })
        ));
    }

    #[test]
    fn converts_coco_boxes() {
        let text = r#"{"images": [{"id": 7, "width": 1280, "height": 720, "file_name": "f.jpg"}],
                       "annotations": [{"image_id": 7, "bbox": [10, 20, 5, 8], "category_id": 3}]}"#;
        let m = parse_ground_truth(&p(), text, InputFormat::Coco).unwrap();
        assert_eq!(m.images[0].image_id, "7");
        assert_eq!(
            m.images[0].ground_truths[0].bbox,
            BBox::new(10.0, 20.0, 15.0, 28.0)
        );
        let dets = r#"[{"image_id": 7, "bbox": [1, 2, 3, 4], "score": 0.5, "category_id": 3}]"#;
        let (_, set) = parse_detections(&p(), dets, InputFormat::Coco, &m).unwrap();
        assert_eq!(set["7"][0].bbox, BBox::new(1.0, 2.0, 4.0, 6.0));
    }

    #[test]
    fn detection_validation() {
        let m = parse_ground_truth(&p(), MINIMAL, InputFormat::Native).unwrap();
        let ok = r#"{"schema_version": 1, "detector": "d", "detections": {"a": []}}"#;
        let (name, set) = parse_detections(&p(), ok, InputFormat::Native, &m).unwrap();
        assert_eq!(name, "d");
        assert!(set["a"].is_empty());
        let bad = r#"{"schema_version": 1, "detector": "d", "detections": {"a": [{"bbox": [0,0,1,1], "objectness": 1.2}]}}"#;
        assert!(matches!(
            parse_detections(&p(), bad, InputFormat::Native, &m),
            Err(Error::Validation { .. })
        ));
        let unknown = r#"{"schema_version": 1, "detector": "d", "detections": {"zz": []}}"#;
        assert!(matches!(
            parse_detections(&p(), unknown, InputFormat::Native, &m),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn split_3414_into_1914_and_1500() {
        let m = manifest(3414);
        let s = split_dataset(&m, 1914, 1500, 42).unwrap();
        assert_eq!((s.calibration.len(), s.test.len()), (1914, 1500));
        let all: HashSet<&String> = s.calibration.iter().chain(&s.test).collect();
        assert_eq!(all.len(), 3414);
        assert_eq!(split_dataset(&m, 1914, 1500, 42).unwrap(), s);
        assert!(matches!(
            split_dataset(&m, 2000, 1500, 1),
            Err(Error::Size {
                requested: 3500,
                available: 3414
            })
        ));
    }

    #[test]
    fn artifact_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let cfg = CalibrationConfig::with_method(Method::Additive);
        let mut a = CalibrationArtifact::new(
            &cfg,
            Margins::PerCoordinate([0.1 + 0.2, -1.0 / 3.0, 7.0, f64::INFINITY]),
            12,
            "fp".into(),
        );
        a.seed = Some(u64::MAX);
        a.provenance = Some(Provenance {
            config: serde_json::json!({"alpha": 0.1}),
            inputs: BTreeMap::from([("manifest".into(), "abc".into())]),
        });
        save_json(&path, &a).unwrap();
        let back: CalibrationArtifact = load_versioned(&path).unwrap();
        assert_eq!(back, a);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 0");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            load_versioned::<CalibrationArtifact>(&path),
            Err(Error::SchemaVersion { .. })
        ));
    }

    proptest! {
        #[test]
        fn split_is_disjoint_and_deterministic(n in 0usize..300, a in 0usize..300, b in 0usize..300, seed in any::<u64>()) {
            let m = manifest(n);
            match split_dataset(&m, a, b, seed) {
                Ok(s) => {
                    prop_assert!(a + b <= n);
                    let cal: HashSet<&String> = s.calibration.iter().collect();
                    prop_assert_eq!(cal.len(), a);
                    prop_assert!(s.test.iter().all(|t| !cal.contains(t)));
                    prop_assert_eq!(s.test.len(), b);
                    prop_assert_eq!(split_dataset(&m, a, b, seed).unwrap(), s);
                }
                Err(e) => {
                    prop_assert!(a + b > n);
                    prop_assert!(matches!(e, Error::Size { .. }), "unexpected error variant");
                }
            }
        }
    }
}
