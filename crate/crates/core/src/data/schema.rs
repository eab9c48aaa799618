use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use super::DataError;
use crate::localization::PixelPoint;
use crate::tensor::Tensor;

pub const CATEGORIES: [&str; 2] = ["predictable", "unpredictable"];

const KEYS: [&str; 4] = ["image", "hazard", "caption", "category"];

/// One annotated frame: a `C×S×S` image in `[0, 1]`, one hazard point and a caption.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub image: Tensor,
    pub hazard: PixelPoint,
    pub caption: String,
    pub category: Option<String>,
}

impl AnnotatedSample {
    pub fn new(
        image: Tensor,
        hazard: PixelPoint,
        caption: impl Into<String>,
    ) -> Result<Self, RejectKind> {
        let s = Self {
            image,
            hazard,
            caption: caption.into(),
            category: None,
        };
        s.validate().map_err(|(k, _)| k)?;
        Ok(s)
    }

    pub fn image_size(&self) -> usize {
        self.image.shape()[2]
    }

    fn validate(&self) -> Result<(), (RejectKind, String)> {
        check_image(&self.image)?;
        if !self.hazard.in_bounds(self.image_size()) {
            return Err((
                RejectKind::OutOfBounds,
                format!(
                    "hazard ({}, {}) outside a {}-pixel image",
                    self.hazard.x,
                    self.hazard.y,
                    self.image_size()
                ),
            ));
        }
        if self.caption.trim().is_empty() {
            return Err((RejectKind::EmptyCaption, "caption is empty".into()));
        }
        if let Some(c) = &self.category {
            if !CATEGORIES.contains(&c.as_str()) {
                return Err((RejectKind::BadCategory, format!("unknown category {c:?}")));
            }
        }
        Ok(())
    }

    /// One JSONL record with the image inline as a nested array.
    pub fn to_json_line(&self) -> String {
        let [c, s] = [self.image.shape()[0], self.image.shape()[1]];
        let d = self.image.data();
        let img: Vec<Vec<Vec<f32>>> = (0..c)
            .map(|ch| {
                (0..s)
                    .map(|r| d[(ch * s + r) * s..(ch * s + r + 1) * s].to_vec())
                    .collect()
            })
            .collect();
        let mut m = Map::new();
        m.insert(
            "image".into(),
            serde_json::to_value(img).expect("finite floats serialize"),
        );
        m.insert(
            "hazard".into(),
            serde_json::json!([self.hazard.x, self.hazard.y]),
        );
        m.insert("caption".into(), Value::String(self.caption.clone()));
        if let Some(cat) = &self.category {
            m.insert("category".into(), Value::String(cat.clone()));
        }
        Value::Object(m).to_string()
    }
}

fn check_image(t: &Tensor) -> Result<(), (RejectKind, String)> {
    match *t.shape() {
        [c, h, w] if c >= 1 && h == w && h >= 1 => {}
        ref s => {
            return Err((
                RejectKind::BadImage,
                format!("image shape {s:?} is not C×S×S"),
            ))
        }
    }
    if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err((
            RejectKind::BadImage,
            format!("pixel value {v} outside [0, 1]"),
        ));
    }
    Ok(())
}

/// Why a record was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RejectKind {
    /// Not JSON, not an object, missing or unknown keys, wrong value types.
    Malformed,
    /// More than one hazard point in the record.
    MultipleHazards,
    OutOfBounds,
    /// Referenced image file absent.
    MissingImage,
    /// Image unreadable, not square, wrong shape or values outside `[0, 1]`.
    BadImage,
    EmptyCaption,
    BadCategory,
}

impl fmt::Display for RejectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectKind::Malformed => "malformed",
            RejectKind::MultipleHazards => "multiple hazards",
            RejectKind::OutOfBounds => "out of bounds",
            RejectKind::MissingImage => "missing image",
            RejectKind::BadImage => "bad image",
            RejectKind::EmptyCaption => "empty caption",
            RejectKind::BadCategory => "bad category",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    /// 1-based line number in the source file.
    pub line: usize,
    pub kind: RejectKind,
    pub message: String,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}: {}", self.line, self.kind, self.message)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub samples: Vec<AnnotatedSample>,
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Base directory for relative image paths.
    pub image_root: PathBuf,
    /// Required `[C, S, S]`; any shape is accepted when `None`.
    pub shape: Option<[usize; 3]>,
}

type Check<T> = Result<T, (RejectKind, String)>;

fn malformed<T>(msg: impl Into<String>) -> Check<T> {
    Err((RejectKind::Malformed, msg.into()))
}

fn array_image(v: &Value) -> Check<Tensor> {
    fn rows(v: &Value) -> Check<Vec<Vec<f32>>> {
        let Value::Array(rows) = v else {
            return Err((RejectKind::BadImage, "image plane is not an array".into()));
        };
        rows.iter()
            .map(|r| match r {
                Value::Array(px) => px
                    .iter()
                    .map(|p| {
                        p.as_f64()
                            .map(|x| x as f32)
                            .ok_or((RejectKind::BadImage, "pixel is not a number".into()))
                    })
                    .collect(),
                _ => Err((RejectKind::BadImage, "image row is not an array".into())),
            })
            .collect()
    }
    let Value::Array(outer) = v else {
        return Err((RejectKind::BadImage, "image is not an array".into()));
    };
    let nested3 = outer
        .first()
        .and_then(|r| r.as_array())
        .and_then(|r| r.first())
        .is_some_and(Value::is_array);
    let planes = if nested3 {
        outer.iter().map(rows).collect::<Check<Vec<_>>>()?
    } else {
        vec![rows(v)?]
    };
    let c = planes.len();
    let h = planes.first().map_or(0, Vec::len);
    let w = planes.first().and_then(|p| p.first()).map_or(0, Vec::len);
    if h == 0
        || w == 0
        || planes
            .iter()
            .any(|p| p.len() != h || p.iter().any(|r| r.len() != w))
    {
        return Err((
            RejectKind::BadImage,
            "image array is empty or ragged".into(),
        ));
    }
    let data: Vec<f32> = planes.into_iter().flatten().flatten().collect();
    Tensor::new(&[c, h, w], data).map_err(|e| (RejectKind::BadImage, e.to_string()))
}

fn file_image(path: &Path) -> Check<Tensor> {
    if !path.exists() {
        return Err((
            RejectKind::MissingImage,
            format!("{} not found", path.display()),
        ));
    }
    let bad = |e: &dyn fmt::Display| (RejectKind::BadImage, format!("{}: {e}", path.display()));
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
    {
        let text = std::fs::read_to_string(path).map_err(|e| bad(&e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
        return array_image(&v);
    }
    let img = image::open(path).map_err(|e| bad(&e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = match img.color().channel_count() {
        1 | 2 => (1, img.to_luma8().into_raw()),
        _ => (3, img.to_rgb8().into_raw()),
    };
    // Interleaved HWC bytes → planar CHW floats.
    let mut data = vec![0f32; c * h * w];
    for (i, &b) in raw.iter().enumerate() {
        let (px, ch) = (i / c, i % c);
        data[ch * h * w + px] = b as f32 / 255.0;
    }
    Tensor::new(&[c, h, w], data).map_err(|e| bad(&e))
}

fn parse_record(line: &str, opts: &LoadOptions) -> Check<AnnotatedSample> {
    let v: Value =
        serde_json::from_str(line).or_else(|e| malformed(format!("invalid JSON: {e}")))?;
    let Value::Object(obj) = v else {
        return malformed("record is not a JSON object");
    };
    if let Some(k) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return malformed(format!("unknown key {k:?}"));
    }
    let get = |k: &str| {
        obj.get(k)
            .ok_or((RejectKind::Malformed, format!("missing key {k:?}")))
    };

    let hazard = match get("hazard")? {
        Value::Array(items) if items.first().is_some_and(Value::is_array) => {
            if items.len() > 1 {
                return Err((
                    RejectKind::MultipleHazards,
                    format!("{} hazard points, expected one", items.len()),
                ));
            }
            return malformed("hazard must be a flat [x, y] pair");
        }
        Value::Array(items) if items.len() == 2 => match (items[0].as_f64(), items[1].as_f64()) {
            (Some(x), Some(y)) => PixelPoint::new(x, y),
            _ => return malformed("hazard coordinates must be numbers"),
        },
        _ => return malformed("hazard must be [x, y]"),
    };
    let caption = match get("caption")? {
        Value::String(s) => s.clone(),
        _ => return malformed("caption must be a string"),
    };
    let category = match obj.get("category") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return malformed("category must be a string"),
    };
    let image = match get("image")? {
        Value::String(p) => file_image(&opts.image_root.join(p))?,
        arr @ Value::Array(_) => array_image(arr)?,
        _ => return malformed("image must be a path or a nested array"),
    };
    if let Some(shape) = opts.shape {
        if image.shape() != shape {
            return Err((
                RejectKind::BadImage,
                format!("image shape {:?}, expected {shape:?}", image.shape()),
            ));
        }
    }
    let sample = AnnotatedSample {
        image,
        hazard,
        caption,
        category,
    };
    sample.validate()?;
    Ok(sample)
}

/// Parses JSONL text. Blank lines are skipped; every bad record becomes a
/// [`Rejection`] carrying its line number.
pub fn parse_jsonl(reader: impl BufRead, opts: &LoadOptions) -> Result<LoadReport, DataError> {
    let mut report = LoadReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Io {
            path: PathBuf::from("<reader>"),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line, opts) {
            Ok(s) => report.samples.push(s),
            Err((kind, message)) => report.rejections.push(Rejection {
                line: i + 1,
                kind,
                message,
            }),
        }
    }
    Ok(report)
}

/// Reads a PNG or `.json` nested-array image from disk.
pub fn read_image(path: &Path) -> Result<Tensor, DataError> {
    let t = file_image(path).map_err(|(kind, msg)| DataError::Image(format!("{kind}: {msg}")))?;
    check_image(&t).map_err(|(kind, msg)| DataError::Image(format!("{kind}: {msg}")))?;
    Ok(t)
}

pub fn load_dataset(path: &Path, opts: &LoadOptions) -> Result<LoadReport, DataError> {
    let f = File::open(path).map_err(|e| DataError::io(path, e))?;
    parse_jsonl(BufReader::new(f), opts)
}

pub fn write_jsonl(path: &Path, samples: &[AnnotatedSample]) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(File::create(path).map_err(|e| DataError::io(path, e))?);
    for s in samples {
        writeln!(f, "{}", s.to_json_line()).map_err(|e| DataError::io(path, e))?;
    }
    f.flush().map_err(|e| DataError::io(path, e))
}
