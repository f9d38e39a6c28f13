//! Annotation records for generated-image distortion datasets: the category
//! taxonomy, the JSON-lines file format, region rasterization, multi-annotator
//! reconciliation and summary statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::FixationSet;
use crate::saliency::{BinaryGrid, SaliencyMap};

/// Twelve fine-grained distortion categories.
///
/// Declaration order is the fixed tie-break order used by reconciliation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DistortionCategory {
    HandLimb,
    Face,
    BodyProportion,
    AttributeMismatch,
    TextureColor,
    SpatialRelation,
    Perspective,
    ObjectDeformation,
    ObjectRedundancy,
    Interaction,
    TextAnomaly,
    Other,
}

/// The six top-level dimensions the categories are grouped under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DistortionDimension {
    HumanAnatomy,
    AttributeInconsistency,
    Spatial,
    ObjectDeformationOrRedundancy,
    ActionInteraction,
    Miscellaneous,
}

impl DistortionCategory {
    pub const ALL: [DistortionCategory; 12] = [
        Self::HandLimb,
        Self::Face,
        Self::BodyProportion,
        Self::AttributeMismatch,
        Self::TextureColor,
        Self::SpatialRelation,
        Self::Perspective,
        Self::ObjectDeformation,
        Self::ObjectRedundancy,
        Self::Interaction,
        Self::TextAnomaly,
        Self::Other,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Self::HandLimb => "hand",
            Self::Face => "face",
            Self::BodyProportion => "body",
            Self::AttributeMismatch => "attribute",
            Self::TextureColor => "texture",
            Self::SpatialRelation => "spatial",
            Self::Perspective => "perspective",
            Self::ObjectDeformation => "object_deformation",
            Self::ObjectRedundancy => "object_redundancy",
            Self::Interaction => "interaction",
            Self::TextAnomaly => "text",
            Self::Other => "other",
        }
    }

    pub fn dimension(self) -> DistortionDimension {
        use DistortionDimension::*;
        match self {
            Self::HandLimb | Self::Face | Self::BodyProportion => HumanAnatomy,
            Self::AttributeMismatch | Self::TextureColor => AttributeInconsistency,
            Self::SpatialRelation | Self::Perspective => Spatial,
            Self::ObjectDeformation | Self::ObjectRedundancy => ObjectDeformationOrRedundancy,
            Self::Interaction => ActionInteraction,
            Self::TextAnomaly | Self::Other => Miscellaneous,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for DistortionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown distortion category code {0:?}")]
pub struct UnknownCategory(pub String);

impl FromStr for DistortionCategory {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.code() == s)
            .ok_or_else(|| UnknownCategory(s.to_string()))
    }
}

impl Serialize for DistortionCategory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for DistortionCategory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let code = String::deserialize(d)?;
        code.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub x: usize,
    pub y: usize,
    pub category: DistortionCategory,
    pub description: String,
    pub annotator: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    #[serde(rename = "image")]
    pub image_ref: String,
    pub prompt: String,
    pub width: usize,
    pub height: usize,
    pub regions: Vec<RegionAnnotation>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: malformed JSON: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: unknown category {code:?}")]
    UnknownCategory { line: usize, code: String },
    #[error("line {line}: region center ({x}, {y}) outside {width}x{height} image")]
    OutOfBounds {
        line: usize,
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("empty dataset")]
    Empty,
    #[error("reconciliation needs at least two annotators, got {0}")]
    TooFewAnnotators(usize),
}

/// Parse JSON-lines records. Blank lines are skipped; unknown fields are
/// ignored and not preserved.
pub fn parse_dataset(bytes: &[u8]) -> Result<Vec<AnnotationRecord>, DatasetError> {
    let text = String::from_utf8_lossy(bytes);
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(raw).map_err(|source| {
            match unknown_category_code(raw, &source) {
                Some(code) => DatasetError::UnknownCategory { line, code },
                None => DatasetError::Json { line, source },
            }
        })?;
        validate_record(&record, line)?;
        records.push(record);
    }
    Ok(records)
}

fn unknown_category_code(raw: &str, err: &serde_json::Error) -> Option<String> {
    if !err.is_data() {
        return None;
    }
    let msg = err.to_string();
    msg.contains("unknown distortion category")
        .then(|| msg.split('"').nth(1).unwrap_or(raw).to_string())
}

fn validate_record(r: &AnnotationRecord, line: usize) -> Result<(), DatasetError> {
    if r.width == 0 || r.height == 0 {
        return Err(DatasetError::Invalid {
            line,
            message: format!("image dimensions {}x{} must be positive", r.width, r.height),
        });
    }
    for region in &r.regions {
        if region.x >= r.width || region.y >= r.height {
            return Err(DatasetError::OutOfBounds {
                line,
                x: region.x,
                y: region.y,
                width: r.width,
                height: r.height,
            });
        }
        if region.description.trim().is_empty() {
            return Err(DatasetError::Invalid {
                line,
                message: format!("empty description at ({}, {})", region.x, region.y),
            });
        }
    }
    Ok(())
}

pub fn serialize_dataset(records: &[AnnotationRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.extend(serde_json::to_vec(r).expect("records always serialize"));
        out.push(b'\n');
    }
    out
}

/// Region radius for an image of the given height.
pub fn region_radius(image_height: usize) -> f64 {
    image_height as f64 / 20.0
}

/// Disc of radius `height / 20` around `(cx, cy)`, clipped to the image.
pub fn rasterize_region(
    center: (usize, usize),
    image_height: usize,
    image_width: usize,
) -> BinaryGrid {
    let mut mask = BinaryGrid::empty(image_width, image_height);
    paint_disc(&mut mask, center, region_radius(image_height));
    mask
}

fn paint_disc(mask: &mut BinaryGrid, (cx, cy): (usize, usize), radius: f64) {
    let r2 = radius * radius;
    let reach = radius.floor() as usize;
    let y_range = cy.saturating_sub(reach)..=(cy + reach).min(mask.height() - 1);
    for y in y_range {
        for x in cx.saturating_sub(reach)..=(cx + reach).min(mask.width() - 1) {
            let dx = x.abs_diff(cx) as f64;
            let dy = y.abs_diff(cy) as f64;
            if dx * dx + dy * dy <= r2 {
                mask.set(x, y, true);
            }
        }
    }
}

/// Majority-vote reconciliation of independent per-annotator region lists.
///
/// Regions from different annotators within `match_radius` are linked and
/// clusters are the connected components of that graph. A cluster survives
/// when more than half of the annotators contributed to it. Each surviving
/// cluster yields one region: modal category (ties go to the earlier
/// category), coordinate-wise lower median center, and the longest
/// description (ties go to the lexicographically smallest). Output is sorted
/// by `(y, x, category)` so annotator order never matters.
pub fn reconcile_majority(
    per_annotator: &[Vec<RegionAnnotation>],
    match_radius: f64,
) -> Result<Vec<RegionAnnotation>, DatasetError> {
    let annotators = per_annotator.len();
    if annotators < 2 {
        return Err(DatasetError::TooFewAnnotators(annotators));
    }
    let items: Vec<(usize, &RegionAnnotation)> = per_annotator
        .iter()
        .enumerate()
        .flat_map(|(a, list)| list.iter().map(move |r| (a, r)))
        .collect();

    let mut parent: Vec<usize> = (0..items.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let r2 = match_radius * match_radius;
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let (ai, ri) = items[i];
            let (aj, rj) = items[j];
            if ai == aj {
                continue;
            }
            let dx = ri.x.abs_diff(rj.x) as f64;
            let dy = ri.y.abs_diff(rj.y) as f64;
            if dx * dx + dy * dy <= r2 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..items.len() {
        let root = find(&mut parent, i);
        clusters.entry(root).or_default().push(i);
    }

    let mut out = Vec::new();
    for members in clusters.values() {
        let mut contributors: Vec<usize> = members.iter().map(|&i| items[i].0).collect();
        contributors.sort_unstable();
        contributors.dedup();
        if contributors.len() * 2 <= annotators {
            continue;
        }
        let mut votes = [0usize; 12];
        for &i in members {
            votes[items[i].1.category.index()] += 1;
        }
        let best = *votes.iter().max().unwrap();
        let category = DistortionCategory::ALL[votes.iter().position(|&v| v == best).unwrap()];

        let lower_median = |mut v: Vec<usize>| {
            v.sort_unstable();
            v[(v.len() - 1) / 2]
        };
        let x = lower_median(members.iter().map(|&i| items[i].1.x).collect());
        let y = lower_median(members.iter().map(|&i| items[i].1.y).collect());
        let description = members
            .iter()
            .map(|&i| items[i].1.description.as_str())
            .max_by(|a, b| a.chars().count().cmp(&b.chars().count()).then(b.cmp(a)))
            .unwrap()
            .to_string();
        out.push(RegionAnnotation {
            x,
            y,
            category,
            description,
            annotator: "majority".to_string(),
        });
    }
    out.sort_by_key(|r| (r.y, r.x, r.category));
    Ok(out)
}

/// Split a raw record's regions by annotator and reconcile them, using the
/// default match radius of one region radius.
pub fn reconcile_record(
    record: &AnnotationRecord,
    min_annotators: usize,
) -> Result<AnnotationRecord, DatasetError> {
    let mut by_annotator: BTreeMap<&str, Vec<RegionAnnotation>> = BTreeMap::new();
    for r in &record.regions {
        by_annotator.entry(&r.annotator).or_default().push(r.clone());
    }
    let mut lists: Vec<Vec<RegionAnnotation>> = by_annotator.into_values().collect();
    while lists.len() < min_annotators {
        lists.push(Vec::new());
    }
    let regions = reconcile_majority(&lists, region_radius(record.height))?;
    Ok(AnnotationRecord {
        regions,
        ..record.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub image_count: usize,
    pub region_count: usize,
    pub regions_per_image: f64,
    pub mean_description_words: f64,
    pub category_histogram: BTreeMap<String, f64>,
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Exact means and category shares over the supplied records.
pub fn compute_stats(records: &[AnnotationRecord]) -> Result<DatasetStats, DatasetError> {
    if records.is_empty() {
        return Err(DatasetError::Empty);
    }
    let region_count: usize = records.iter().map(|r| r.regions.len()).sum();
    let mut words = 0usize;
    let mut counts: BTreeMap<DistortionCategory, usize> = BTreeMap::new();
    for region in records.iter().flat_map(|r| &r.regions) {
        words += word_count(&region.description);
        *counts.entry(region.category).or_default() += 1;
    }
    let (mean_words, histogram) = if region_count == 0 {
        (0.0, BTreeMap::new())
    } else {
        (
            words as f64 / region_count as f64,
            counts
                .into_iter()
                .map(|(c, n)| (c.code().to_string(), n as f64 / region_count as f64))
                .collect(),
        )
    };
    Ok(DatasetStats {
        image_count: records.len(),
        region_count,
        regions_per_image: region_count as f64 / records.len() as f64,
        mean_description_words: mean_words,
        category_histogram: histogram,
    })
}

impl DatasetStats {
    /// Aligned `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "image_count:            {}\nregion_count:           {}\nregions_per_image:      {:.4}\nmean_description_words: {:.4}\n",
            self.image_count, self.region_count, self.regions_per_image, self.mean_description_words
        );
        for (cat, share) in &self.category_histogram {
            out.push_str(&format!("share.{cat:<18} {share:.4}\n"));
        }
        out
    }
}

/// Ground-truth density and fixations for one reconciled record: the union of
/// region discs as a `{0,1}` map, optionally Gaussian-blurred, plus the
/// region centers.
pub fn ground_truth_map(record: &AnnotationRecord, blur_sigma: f64) -> (SaliencyMap, FixationSet) {
    let mut mask = BinaryGrid::empty(record.width, record.height);
    let radius = region_radius(record.height);
    for r in &record.regions {
        paint_disc(&mut mask, (r.x, r.y), radius);
    }
    let values: Vec<f64> = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let values = if blur_sigma > 0.0 {
        gaussian_blur(&values, record.width, record.height, blur_sigma)
    } else {
        values
    };
    let map = SaliencyMap::new(record.width, record.height, values).expect("values within [0, 1]");
    let fix = FixationSet::new(record.regions.iter().map(|r| (r.x, r.y)).collect());
    (map, fix)
}

/// Separable Gaussian blur, kernel truncated at 3σ, borders renormalized.
fn gaussian_blur(values: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let reach = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-reach..=reach)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, d) in (-reach..=reach).enumerate() {
                    let (sx, sy) = if horizontal { (x + d, y) } else { (x, y + d) };
                    if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                        continue;
                    }
                    acc += kernel[k] * src[sy as usize * w + sx as usize];
                    norm += kernel[k];
                }
                dst[y as usize * w + x as usize] = (acc / norm).clamp(0.0, 1.0);
            }
        }
        dst
    };
    pass(&pass(values, true), false)
}
