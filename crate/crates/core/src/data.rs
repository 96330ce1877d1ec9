//! Detection and ground-truth records, IoU matching, train/test splitting and
//! the JSON-lines sample format.
//!
//! Boxes are always stored in relative center-size encoding `(cx, cy, w, h)`
//! with every coordinate in `[0, 1]`. Files may carry absolute pixel boxes if
//! they also carry `img_w`/`img_h`; those are normalized on ingestion.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// One scalar input of the calibration feature space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Confidence,
    Cx,
    Cy,
    W,
    H,
}

impl Feature {
    pub fn name(self) -> &'static str {
        match self {
            Feature::Confidence => "confidence",
            Feature::Cx => "cx",
            Feature::Cy => "cy",
            Feature::W => "w",
            Feature::H => "h",
        }
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "confidence" | "score" | "p" => Ok(Feature::Confidence),
            "cx" => Ok(Feature::Cx),
            "cy" => Ok(Feature::Cy),
            "w" => Ok(Feature::W),
            "h" => Ok(Feature::H),
            other => Err(Error::invalid(format!("unknown feature `{other}`"))),
        }
    }
}

/// Which inputs a calibrator (and its evaluation binning) sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSubset {
    ConfOnly,
    ConfPos,
    ConfShape,
    Full,
}

impl FeatureSubset {
    pub const ALL: [FeatureSubset; 4] = [
        FeatureSubset::ConfOnly,
        FeatureSubset::ConfPos,
        FeatureSubset::ConfShape,
        FeatureSubset::Full,
    ];

    /// Selected inputs, confidence first.
    pub fn features(self) -> &'static [Feature] {
        use Feature::*;
        match self {
            FeatureSubset::ConfOnly => &[Confidence],
            FeatureSubset::ConfPos => &[Confidence, Cx, Cy],
            FeatureSubset::ConfShape => &[Confidence, W, H],
            FeatureSubset::Full => &[Confidence, Cx, Cy, W, H],
        }
    }

    pub fn box_features(self) -> &'static [Feature] {
        &self.features()[1..]
    }

    pub fn dim(self) -> usize {
        self.features().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureSubset::ConfOnly => "conf_only",
            FeatureSubset::ConfPos => "conf_pos",
            FeatureSubset::ConfShape => "conf_shape",
            FeatureSubset::Full => "full",
        }
    }
}

impl fmt::Display for FeatureSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "conf_only" | "p" => Ok(FeatureSubset::ConfOnly),
            "conf_pos" | "p_cx_cy" => Ok(FeatureSubset::ConfPos),
            "conf_shape" | "p_w_h" => Ok(FeatureSubset::ConfShape),
            "full" => Ok(FeatureSubset::Full),
            other => Err(Error::invalid(format!("unknown feature subset `{other}`"))),
        }
    }
}

/// Axis-aligned box in relative center-size encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCoords {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCoords {
    /// Validated constructor: every coordinate in `[0, 1]`, positive extent.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        for (field, value) in [("cx", cx), ("cy", cy), ("w", w), ("h", h)] {
            check_unit(field, value, None)?;
        }
        for (field, value) in [("w", w), ("h", h)] {
            if value <= 0.0 {
                return Err(Error::OutOfRange {
                    line: None,
                    field: field.into(),
                    value,
                });
            }
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn x_range(&self) -> (f64, f64) {
        (self.cx - 0.5 * self.w, self.cx + 0.5 * self.w)
    }

    fn y_range(&self) -> (f64, f64) {
        (self.cy - 0.5 * self.h, self.cy + 0.5 * self.h)
    }
}

fn check_unit(field: &str, value: f64, line: Option<usize>) -> Result<()> {
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::OutOfRange {
            line,
            field: field.into(),
            value,
        });
    }
    Ok(())
}

/// Intersection over union of two center-size boxes.
pub fn iou(a: &BoxCoords, b: &BoxCoords) -> Result<f64> {
    if a.w <= 0.0 || a.h <= 0.0 || b.w <= 0.0 || b.h <= 0.0 {
        return Err(Error::invalid("iou requires boxes with positive width and height"));
    }
    let (ax0, ax1) = a.x_range();
    let (ay0, ay1) = a.y_range();
    let (bx0, bx1) = b.x_range();
    let (by0, by1) = b.y_range();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_id: String,
    pub score: f64,
    pub bbox: BoxCoords,
    pub category_id: Option<i64>,
}

impl DetectionRecord {
    pub fn new(image_id: impl Into<String>, score: f64, bbox: BoxCoords) -> Result<Self> {
        check_unit("score", score, None)?;
        Ok(Self {
            image_id: image_id.into(),
            score,
            bbox,
            category_id: None,
        })
    }

    pub fn with_category(mut self, category_id: i64) -> Self {
        self.category_id = Some(category_id);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub bbox: BoxCoords,
    pub category_id: Option<i64>,
}

impl GroundTruthBox {
    pub fn new(image_id: impl Into<String>, bbox: BoxCoords) -> Self {
        Self {
            image_id: image_id.into(),
            bbox,
            category_id: None,
        }
    }

    pub fn with_category(mut self, category_id: i64) -> Self {
        self.category_id = Some(category_id);
        self
    }
}

/// One detection with its correctness label. Fields are read-only once built.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSample {
    image_id: String,
    score: f64,
    bbox: BoxCoords,
    category_id: Option<i64>,
    matched: bool,
}

impl MatchedSample {
    pub fn new(score: f64, bbox: BoxCoords, matched: bool) -> Result<Self> {
        check_unit("score", score, None)?;
        Ok(Self {
            image_id: String::new(),
            score,
            bbox,
            category_id: None,
            matched,
        })
    }

    pub fn with_image_id(mut self, image_id: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self
    }

    pub fn with_category(mut self, category_id: Option<i64>) -> Self {
        self.category_id = category_id;
        self
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn bbox(&self) -> &BoxCoords {
        &self.bbox
    }

    pub fn category_id(&self) -> Option<i64> {
        self.category_id
    }

    pub fn matched(&self) -> bool {
        self.matched
    }

    pub fn label(&self) -> f64 {
        if self.matched {
            1.0
        } else {
            0.0
        }
    }

    pub fn feature(&self, feature: Feature) -> f64 {
        match feature {
            Feature::Confidence => self.score,
            Feature::Cx => self.bbox.cx,
            Feature::Cy => self.bbox.cy,
            Feature::W => self.bbox.w,
            Feature::H => self.bbox.h,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<MatchedSample>,
    pub iou_threshold: f64,
    pub provenance: String,
}

impl SampleSet {
    pub fn new(samples: Vec<MatchedSample>) -> Self {
        Self {
            samples,
            iou_threshold: 0.5,
            provenance: String::new(),
        }
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_matched(&self) -> usize {
        self.samples.iter().filter(|s| s.matched).count()
    }

    pub fn precision(&self) -> f64 {
        self.n_matched() as f64 / self.len() as f64
    }

    /// Keep only samples of one category (samples without a category are kept).
    pub fn filter_category(&self, category_id: i64) -> SampleSet {
        SampleSet {
            samples: self
                .samples
                .iter()
                .filter(|s| s.category_id.map_or(true, |c| c == category_id))
                .cloned()
                .collect(),
            iou_threshold: self.iou_threshold,
            provenance: self.provenance.clone(),
        }
    }
}

/// Greedy one-to-one matching of detections to ground truth.
///
/// Per image, detections are visited by descending score (stable on ties) and
/// take the unmatched ground-truth box with the highest IoU at or above the
/// threshold; equal IoU goes to the earlier ground-truth box. Output keeps the
/// input order of `dets`.
pub fn match_detections(
    dets: &[DetectionRecord],
    gts: &[GroundTruthBox],
    iou_threshold: f64,
) -> Result<SampleSet> {
    if dets.is_empty() {
        return Err(Error::NoSamples);
    }
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "iou threshold must lie in (0, 1], got {iou_threshold}"
        )));
    }

    let mut gts_by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, gt) in gts.iter().enumerate() {
        gts_by_image.entry(gt.image_id.as_str()).or_default().push(j);
    }
    let mut dets_by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut image_order: Vec<&str> = Vec::new();
    for (i, det) in dets.iter().enumerate() {
        let entry = dets_by_image.entry(det.image_id.as_str()).or_default();
        if entry.is_empty() {
            image_order.push(det.image_id.as_str());
        }
        entry.push(i);
    }

    let mut matched = vec![false; dets.len()];
    for image in image_order {
        let mut order = dets_by_image[image].clone();
        // stable sort keeps input order among equal scores
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
        let candidates = gts_by_image.get(image).map(Vec::as_slice).unwrap_or(&[]);
        let mut taken = vec![false; candidates.len()];
        for i in order {
            let det = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (k, &j) in candidates.iter().enumerate() {
                if taken[k] {
                    continue;
                }
                let gt = &gts[j];
                if let (Some(a), Some(b)) = (det.category_id, gt.category_id) {
                    if a != b {
                        continue;
                    }
                }
                let overlap = iou(&det.bbox, &gt.bbox)?;
                if overlap >= iou_threshold && best.map_or(true, |(_, o)| overlap > o) {
                    best = Some((k, overlap));
                }
            }
            if let Some((k, _)) = best {
                taken[k] = true;
                matched[i] = true;
            }
        }
    }

    let samples = dets
        .iter()
        .zip(matched)
        .map(|(d, m)| MatchedSample {
            image_id: d.image_id.clone(),
            score: d.score,
            bbox: d.bbox,
            category_id: d.category_id,
            matched: m,
        })
        .collect();
    Ok(SampleSet {
        samples,
        iou_threshold,
        provenance: format!("matched at IoU {iou_threshold}"),
    })
}

/// Seeded random partition into `(train, test)`, each kept in input order.
pub fn split_train_test(
    set: &SampleSet,
    train_fraction: f64,
    seed: u64,
) -> Result<(SampleSet, SampleSet)> {
    if set.is_empty() {
        return Err(Error::NoSamples);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = set.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!(
            "split of {n} samples at fraction {train_fraction} leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let (train_idx, test_idx) = idx.split_at_mut(n_train);
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let pick = |ids: &[usize], tag: &str| SampleSet {
        samples: ids.iter().map(|&i| set.samples[i].clone()).collect(),
        iou_threshold: set.iou_threshold,
        provenance: format!("{} [{tag} seed={seed}]", set.provenance),
    };
    Ok((pick(train_idx, "train"), pick(test_idx, "test")))
}

// ---------------------------------------------------------------------------
// JSON lines

#[derive(Serialize)]
struct SampleLine<'a> {
    image_id: &'a str,
    score: f64,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    matched: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    category_id: Option<i64>,
}

/// Raw object of one line plus its 1-based line number, for field-naming errors.
struct Line<'a> {
    number: usize,
    obj: &'a Map<String, Value>,
}

impl Line<'_> {
    fn parse_err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.number,
            field: field.into(),
            message: message.into(),
        }
    }

    fn f64_field(&self, field: &str) -> Result<f64> {
        let v = self
            .obj
            .get(field)
            .ok_or_else(|| self.parse_err(field, "missing"))?;
        let x = v
            .as_f64()
            .ok_or_else(|| self.parse_err(field, format!("expected number, got {v}")))?;
        if !x.is_finite() {
            return Err(self.parse_err(field, "not finite"));
        }
        Ok(x)
    }

    fn opt_f64_field(&self, field: &str) -> Result<Option<f64>> {
        match self.obj.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(_) => self.f64_field(field).map(Some),
        }
    }

    fn image_id(&self) -> Result<String> {
        match self.obj.get("image_id") {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Number(n)) => Ok(n.to_string()),
            Some(v) => Err(self.parse_err("image_id", format!("expected string, got {v}"))),
            None => Err(self.parse_err("image_id", "missing")),
        }
    }

    fn category_id(&self) -> Result<Option<i64>> {
        match self.obj.get("category_id") {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v
                .as_i64()
                .map(Some)
                .ok_or_else(|| self.parse_err("category_id", format!("expected integer, got {v}"))),
        }
    }

    fn matched(&self) -> Result<bool> {
        match self.obj.get("matched") {
            Some(Value::Bool(b)) => Ok(*b),
            Some(Value::Number(n)) if n.as_u64() == Some(0) => Ok(false),
            Some(Value::Number(n)) if n.as_u64() == Some(1) => Ok(true),
            Some(v) => Err(self.parse_err("matched", format!("expected 0 or 1, got {v}"))),
            None => Err(self.parse_err("matched", "missing")),
        }
    }

    /// Box in relative coordinates; absolute boxes are normalized by `img_w`/`img_h`.
    fn bbox(&self) -> Result<BoxCoords> {
        let (mut cx, mut cy, mut w, mut h) = (
            self.f64_field("cx")?,
            self.f64_field("cy")?,
            self.f64_field("w")?,
            self.f64_field("h")?,
        );
        match (self.opt_f64_field("img_w")?, self.opt_f64_field("img_h")?) {
            (Some(iw), Some(ih)) => {
                if iw <= 0.0 {
                    return Err(self.parse_err("img_w", "must be positive"));
                }
                if ih <= 0.0 {
                    return Err(self.parse_err("img_h", "must be positive"));
                }
                cx /= iw;
                w /= iw;
                cy /= ih;
                h /= ih;
            }
            (None, None) => {}
            (Some(_), None) => return Err(self.parse_err("img_h", "missing while img_w is set")),
            (None, Some(_)) => return Err(self.parse_err("img_w", "missing while img_h is set")),
        }
        for (field, value) in [("cx", cx), ("cy", cy), ("w", w), ("h", h)] {
            check_unit(field, value, Some(self.number))?;
        }
        for (field, value) in [("w", w), ("h", h)] {
            if value <= 0.0 {
                return Err(Error::OutOfRange {
                    line: Some(self.number),
                    field: field.into(),
                    value,
                });
            }
        }
        Ok(BoxCoords { cx, cy, w, h })
    }

    fn score(&self) -> Result<f64> {
        let score = self.f64_field("score")?;
        check_unit("score", score, Some(self.number))?;
        Ok(score)
    }
}

fn read_lines<T>(path: &Path, mut f: impl FnMut(&Line<'_>) -> Result<T>) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let number = i + 1;
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: number,
            field: "<line>".into(),
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            line: number,
            field: "<line>".into(),
            message: "expected a JSON object".into(),
        })?;
        out.push(f(&Line { number, obj })?);
    }
    if out.is_empty() {
        return Err(Error::NoSamples);
    }
    Ok(out)
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<SampleSet> {
    let path = path.as_ref();
    let samples = read_lines(path, |line| {
        Ok(MatchedSample {
            image_id: line.image_id()?,
            score: line.score()?,
            bbox: line.bbox()?,
            category_id: line.category_id()?,
            matched: line.matched()?,
        })
    })?;
    Ok(SampleSet::new(samples).with_provenance(path.display().to_string()))
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    read_lines(path.as_ref(), |line| {
        Ok(DetectionRecord {
            image_id: line.image_id()?,
            score: line.score()?,
            bbox: line.bbox()?,
            category_id: line.category_id()?,
        })
    })
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruthBox>> {
    read_lines(path.as_ref(), |line| {
        Ok(GroundTruthBox {
            image_id: line.image_id()?,
            bbox: line.bbox()?,
            category_id: line.category_id()?,
        })
    })
}

pub fn write_samples<W: Write>(set: &SampleSet, mut out: W) -> Result<()> {
    for s in &set.samples {
        let line = SampleLine {
            image_id: &s.image_id,
            score: s.score,
            cx: s.bbox.cx,
            cy: s.bbox.cy,
            w: s.bbox.w,
            h: s.bbox.h,
            matched: s.matched as u8,
            category_id: s.category_id,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_samples(set: &SampleSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_samples(set, &mut out)?;
    out.flush()?;
    Ok(())
}
