//! Dataset directory layout:
//!
//! ```text
//! root/<split>.csv               id,boneage_months,male
//! root/<split>_annotations.json  {"<id>": {"bbox": [x0,y0,w,h], "keypoints": [[x,y], ...]}}
//! root/<split>/<id>.png          8-bit grayscale
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::read_png;
use super::sample::{pad_keypoints, BBox, HandRadiograph, Keypoint, MAX_BONE_AGE, NUM_KEYPOINTS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: [f64; 4],
    #[serde(default)]
    pub keypoints: Vec<Option<[f64; 2]>>,
}

pub type Annotations = BTreeMap<String, Annotation>;

pub fn csv_path(root: &Path, split: &str) -> PathBuf {
    root.join(format!("{split}.csv"))
}

pub fn annotations_path(root: &Path, split: &str) -> PathBuf {
    root.join(format!("{split}_annotations.json"))
}

pub fn image_path(root: &Path, split: &str, id: &str) -> PathBuf {
    root.join(split).join(format!("{id}.png"))
}

/// One parsed CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub id: String,
    pub bone_age: f64,
    pub gender: u8,
}

fn parse_male(s: &str) -> Option<u8> {
    match s.trim().to_ascii_lowercase().as_str() {
        "0" | "false" => Some(0),
        "1" | "true" => Some(1),
        _ => None,
    }
}

/// Rows are numbered as in a text editor: the header is row 1.
pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("bad header: {e}"),
        })?
        .clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("missing column {name}"),
        })
    };
    let (ci, ca, cm) = (col("id")?, col("boneage_months")?, col("male")?);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let bad = |reason: String| Error::Row {
            path: path.to_path_buf(),
            row,
            reason,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |c: usize| rec.get(c).ok_or_else(|| bad("too few fields".into()));
        let id = field(ci)?.to_string();
        if id.is_empty() {
            return Err(bad("empty id".into()));
        }
        let age_s = field(ca)?;
        let bone_age: f64 = age_s
            .parse()
            .map_err(|_| bad(format!("boneage_months {age_s:?} is not a number")))?;
        if !(0.0..=MAX_BONE_AGE).contains(&bone_age) {
            return Err(bad(format!("boneage_months {bone_age} is outside [0, {MAX_BONE_AGE}]")));
        }
        let male_s = field(cm)?;
        let gender = parse_male(male_s).ok_or_else(|| bad(format!("male {male_s:?} is not 0 or 1")))?;
        rows.push(LabelRow { id, bone_age, gender });
    }
    Ok(rows)
}

pub fn read_annotations(path: &Path) -> Result<Annotations> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("bad annotations: {e}"),
    })
}

/// Attach an annotation (or the full-image fallback) to a decoded image.
pub fn build_sample(row: &LabelRow, image: super::image::Image, ann: Option<&Annotation>) -> Result<HandRadiograph> {
    let (bbox, keypoints) = match ann {
        Some(a) => {
            if a.keypoints.len() > NUM_KEYPOINTS {
                return Err(Error::Sample {
                    sample_id: row.id.clone(),
                    reason: format!("{} keypoints given, at most {NUM_KEYPOINTS} allowed", a.keypoints.len()),
                });
            }
            let [x0, y0, w, h] = a.bbox;
            let kps: Vec<Keypoint> = a.keypoints.iter().map(|k| k.map(|[x, y]| (x, y))).collect();
            (BBox { x0, y0, w, h }, pad_keypoints(kps))
        }
        None => {
            log::warn!("sample {}: no annotation, using the full image and no keypoints", row.id);
            (BBox::full(&image), pad_keypoints(Vec::new()))
        }
    };
    let sample = HandRadiograph {
        sample_id: row.id.clone(),
        image,
        bbox,
        keypoints,
        gender: row.gender,
        bone_age: row.bone_age,
    };
    sample.validate()?;
    Ok(sample)
}

/// Load every sample of `split` in CSV order. A missing annotations file is
/// treated like a file without entries.
pub fn load_dataset(root: &Path, split: &str) -> Result<Vec<HandRadiograph>> {
    let rows = read_labels(&csv_path(root, split))?;
    let ann_path = annotations_path(root, split);
    let anns = if ann_path.exists() {
        read_annotations(&ann_path)?
    } else {
        log::warn!("{} not found; all samples fall back to full-image boxes", ann_path.display());
        Annotations::new()
    };
    rows.iter()
        .map(|row| {
            let image = read_png(&image_path(root, split, &row.id))?;
            build_sample(row, image, anns.get(&row.id))
        })
        .collect()
}
