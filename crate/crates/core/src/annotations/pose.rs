use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{check_id, data_lines, fixed, json_str, utf8, Collector, Fixed3, Mode, Parsed};
use crate::error::{Error, Result};

/// Canonical keypoint order of every pose record.
pub const KEYPOINT_NAMES: [&str; 23] = [
    "head",
    "eye_left",
    "eye_right",
    "mouth_1",
    "mouth_2",
    "mouth_3",
    "mouth_4",
    "shoulder_left",
    "shoulder_right",
    "elbow_left",
    "elbow_right",
    "wrist_left",
    "wrist_right",
    "mid_torso",
    "hip_left",
    "hip_right",
    "knee_left",
    "knee_right",
    "ankle_left",
    "ankle_right",
    "tail_1",
    "tail_2",
    "tail_3",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnimalClass {
    Mammal,
    Amphibian,
    Reptile,
    Bird,
    Fish,
}

impl AnimalClass {
    pub const ALL: [AnimalClass; 5] = [Self::Mammal, Self::Amphibian, Self::Reptile, Self::Bird, Self::Fish];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mammal => "mammal",
            Self::Amphibian => "amphibian",
            Self::Reptile => "reptile",
            Self::Bird => "bird",
            Self::Fish => "fish",
        }
    }
}

impl fmt::Display for AnimalClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AnimalClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown animal class {s:?} (mammal|amphibian|reptile|bird|fish)")))
    }
}

/// Pixel box `(x, y)` with its height and width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: Fixed3,
    pub y: Fixed3,
    pub height: Fixed3,
    pub width: Fixed3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: Fixed3,
    pub y: Fixed3,
    pub visible: bool,
}

/// Image extent in pixels, used to bound visible keypoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub height: f64,
    pub width: f64,
}

/// One annotated animal; `keypoints[i]` is [`KEYPOINT_NAMES`]`[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub image_id: String,
    pub animal_class: AnimalClass,
    pub bbox: BBox,
    pub keypoints: Vec<Keypoint>,
}

impl PoseRecord {
    pub fn validate(&self, size: Option<ImageSize>) -> std::result::Result<(), String> {
        check_id(&self.image_id, "image_id")?;
        let zero = Fixed3::default();
        if self.bbox.height <= zero || self.bbox.width <= zero {
            return Err(format!("bbox extents must be positive, got {}x{}", self.bbox.height, self.bbox.width));
        }
        if self.keypoints.len() != KEYPOINT_NAMES.len() {
            return Err(format!("expected {} keypoints, found {}", KEYPOINT_NAMES.len(), self.keypoints.len()));
        }
        if let Some(s) = size {
            for (k, name) in self.keypoints.iter().zip(KEYPOINT_NAMES) {
                let (x, y) = (k.x.to_f64(), k.y.to_f64());
                if k.visible && !((0.0..=s.width).contains(&x) && (0.0..=s.height).contains(&y)) {
                    return Err(format!("visible keypoint {name} at ({x}, {y}) outside the {}x{} image", s.height, s.width));
                }
            }
        }
        Ok(())
    }

    /// Keypoints as `(x, y)` pairs with their visibility flags.
    pub fn points(&self) -> (Vec<(f64, f64)>, Vec<bool>) {
        self.keypoints.iter().map(|k| ((k.x.to_f64(), k.y.to_f64()), k.visible)).unzip()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKeypoint {
    name: String,
    x: f64,
    y: f64,
    visible: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    image_id: String,
    animal_class: String,
    bbox: Vec<f64>,
    keypoints: Vec<RawKeypoint>,
}

/// Names the first departure from the canonical keypoint list.
fn keypoint_order_problem(names: &[&str]) -> Option<String> {
    let missing: Vec<&str> = KEYPOINT_NAMES.iter().copied().filter(|n| !names.contains(n)).collect();
    if !missing.is_empty() {
        return Some(format!("missing keypoint {}", missing.join(", ")));
    }
    if let Some(extra) = names.iter().find(|n| !KEYPOINT_NAMES.contains(n)) {
        return Some(format!("unknown keypoint {extra:?}"));
    }
    if names.len() != KEYPOINT_NAMES.len() {
        return Some(format!("{} keypoints listed, {} expected (duplicates)", names.len(), KEYPOINT_NAMES.len()));
    }
    let at = names.iter().zip(KEYPOINT_NAMES).position(|(a, b)| *a != b)?;
    Some(format!("keypoint {} found where {} belongs", names[at], KEYPOINT_NAMES[at]))
}

fn parse_line(line: &str, sizes: Option<&BTreeMap<String, ImageSize>>) -> std::result::Result<PoseRecord, String> {
    let raw: Raw = serde_json::from_str(line).map_err(|e| format!("bad JSON record: {e}"))?;
    let animal_class = raw.animal_class.parse::<AnimalClass>().map_err(|e| e.to_string())?;
    let [x, y, h, w] = raw.bbox[..] else {
        return Err(format!("bbox needs [x, y, height, width], found {} numbers", raw.bbox.len()));
    };
    let names: Vec<&str> = raw.keypoints.iter().map(|k| k.name.as_str()).collect();
    if let Some(problem) = keypoint_order_problem(&names) {
        return Err(problem);
    }
    let keypoints = raw
        .keypoints
        .iter()
        .map(|k| {
            Ok(Keypoint {
                x: fixed(k.x, &format!("{}.x", k.name))?,
                y: fixed(k.y, &format!("{}.y", k.name))?,
                visible: k.visible,
            })
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    let rec = PoseRecord {
        image_id: raw.image_id,
        animal_class,
        bbox: BBox {
            x: fixed(x, "bbox.x")?,
            y: fixed(y, "bbox.y")?,
            height: fixed(h, "bbox.height")?,
            width: fixed(w, "bbox.width")?,
        },
        keypoints,
    };
    let size = match sizes {
        Some(map) => Some(*map.get(&rec.image_id).ok_or_else(|| format!("no image size for {}", rec.image_id))?),
        None => None,
    };
    rec.validate(size)?;
    Ok(rec)
}

/// Parses JSON Lines with keys `image_id, animal_class, bbox, keypoints`.
/// With `sizes`, every image must be listed and visible keypoints must lie
/// inside it.
pub fn parse_pose(bytes: &[u8], sizes: Option<&BTreeMap<String, ImageSize>>, mode: Mode) -> Result<Parsed<PoseRecord>> {
    let mut out = Collector::new(mode);
    for (n, line) in data_lines(utf8(bytes)?) {
        out.push(n, parse_line(line, sizes))?;
    }
    Ok(out.parsed)
}

pub fn serialize_pose(records: &[PoseRecord]) -> Result<Vec<u8>> {
    for (i, r) in records.iter().enumerate() {
        r.validate(None).map_err(|e| Error::Input(format!("record {i}: {e}")))?;
    }
    let mut out = String::new();
    for r in records {
        let b = &r.bbox;
        let kps: Vec<String> = r
            .keypoints
            .iter()
            .zip(KEYPOINT_NAMES)
            .map(|(k, name)| format!("{{\"name\":\"{name}\",\"x\":{},\"y\":{},\"visible\":{}}}", k.x, k.y, k.visible))
            .collect();
        out.push_str(&format!(
            "{{\"image_id\":{},\"animal_class\":\"{}\",\"bbox\":[{},{},{},{}],\"keypoints\":[{}]}}\n",
            json_str(&r.image_id),
            r.animal_class,
            b.x,
            b.y,
            b.height,
            b.width,
            kps.join(",")
        ));
    }
    Ok(out.into_bytes())
}
