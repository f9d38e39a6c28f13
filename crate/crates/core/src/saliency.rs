//! Distortion-saliency maps, the hybrid MSE/KLD training loss, and the
//! binarize → dilate → connected-components pipeline that turns a map into
//! region proposals.

use std::collections::VecDeque;

use thiserror::Error;

use crate::media::{FloatGrid, MediaError};

/// Stabilizer used by KL divergence unless configured otherwise.
pub const DEFAULT_KLD_EPSILON: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SaliencyError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("{0} map sums to zero; KL divergence is undefined")]
    ZeroSum(&'static str),
    #[error("value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Media(#[from] MediaError),
}

/// H×W map with every value in `[0, 1]`.
///
/// Values are held in `f64` for metric and gradient work; persistence goes
/// through the `f32` [`FloatGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, SaliencyError> {
        if width == 0 || height == 0 || width.checked_mul(height) != Some(values.len()) {
            return Err(SaliencyError::Media(MediaError::SizeMismatch {
                expected: width.saturating_mul(height),
                found: values.len(),
            }));
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(SaliencyError::OutOfRange { index, value });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "saliency map needs non-zero dimensions");
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_grid(grid: &FloatGrid) -> Result<Self, SaliencyError> {
        Self::new(
            grid.width(),
            grid.height(),
            grid.data().iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn to_grid(&self) -> FloatGrid {
        FloatGrid::new(
            self.width,
            self.height,
            self.values.iter().map(|&v| v as f32).collect(),
        )
        .expect("saliency values are finite")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    fn same_dims(&self, other: &SaliencyMap) -> Result<(), SaliencyError> {
        if self.width != other.width || self.height != other.height {
            return Err(SaliencyError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }
}

/// Row-major boolean mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryGrid {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryGrid {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(width * height, bits.len(), "mask size does not match dimensions");
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryGrid) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridLossConfig {
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for HybridLossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            epsilon: DEFAULT_KLD_EPSILON,
        }
    }
}

impl HybridLossConfig {
    pub fn validate(&self) -> Result<(), SaliencyError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SaliencyError::InvalidConfig(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(SaliencyError::InvalidConfig(format!(
                "epsilon {} must be positive",
                self.epsilon
            )));
        }
        Ok(())
    }
}

fn sum_normalized(values: &[f64], which: &'static str) -> Result<(f64, Vec<f64>), SaliencyError> {
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(SaliencyError::ZeroSum(which));
    }
    Ok((total, values.iter().map(|v| v / total).collect()))
}

/// KL(truth ‖ pred) after sum-normalizing both maps:
/// `Σ gᵢ · ln(gᵢ / (sᵢ + ε) + ε)`.
///
/// This is the single implementation shared by the training loss and the
/// evaluation metric.
pub fn kl_divergence(
    pred: &SaliencyMap,
    truth: &SaliencyMap,
    epsilon: f64,
) -> Result<f64, SaliencyError> {
    pred.same_dims(truth)?;
    let (_, g) = sum_normalized(&truth.values, "truth")?;
    let (_, s) = sum_normalized(&pred.values, "prediction")?;
    Ok(g
        .iter()
        .zip(&s)
        .map(|(&gi, &si)| gi * (gi / (si + epsilon) + epsilon).ln())
        .sum())
}

fn kl_divergence_gradient(
    pred: &SaliencyMap,
    truth: &SaliencyMap,
    epsilon: f64,
) -> Result<Vec<f64>, SaliencyError> {
    let (_, g) = sum_normalized(&truth.values, "truth")?;
    let (total, s) = sum_normalized(&pred.values, "prediction")?;
    // d/ds_i of g_i ln(g_i/(s_i+ε) + ε), then chain through s = p / Σp.
    let ds: Vec<f64> = g
        .iter()
        .zip(&s)
        .map(|(&gi, &si)| {
            let d = si + epsilon;
            let u = gi / d + epsilon;
            -gi * gi / (d * d * u)
        })
        .collect();
    let weighted: f64 = ds.iter().zip(&s).map(|(c, si)| c * si).sum();
    Ok(ds.iter().map(|c| (c - weighted) / total).collect())
}

fn mse(pred: &SaliencyMap, truth: &SaliencyMap) -> f64 {
    let n = pred.values.len() as f64;
    pred.values
        .iter()
        .zip(&truth.values)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

/// `α·MSE(pred, truth) + (1−α)·KL(truth ‖ pred)`.
///
/// The KL term is skipped when `α = 1`, so an all-zero truth map is only an
/// error when the KL term actually contributes.
pub fn hybrid_loss(
    pred: &SaliencyMap,
    truth: &SaliencyMap,
    cfg: &HybridLossConfig,
) -> Result<f64, SaliencyError> {
    cfg.validate()?;
    pred.same_dims(truth)?;
    let mut loss = cfg.alpha * mse(pred, truth);
    if cfg.alpha < 1.0 {
        loss += (1.0 - cfg.alpha) * kl_divergence(pred, truth, cfg.epsilon)?;
    }
    Ok(loss)
}

/// Analytic ∂hybrid_loss/∂pred for every pixel.
pub fn hybrid_loss_gradient(
    pred: &SaliencyMap,
    truth: &SaliencyMap,
    cfg: &HybridLossConfig,
) -> Result<Vec<f64>, SaliencyError> {
    cfg.validate()?;
    pred.same_dims(truth)?;
    let n = pred.values.len() as f64;
    let mut grad: Vec<f64> = pred
        .values
        .iter()
        .zip(&truth.values)
        .map(|(p, t)| cfg.alpha * 2.0 * (p - t) / n)
        .collect();
    if cfg.alpha < 1.0 {
        let kl = kl_divergence_gradient(pred, truth, cfg.epsilon)?;
        for (g, k) in grad.iter_mut().zip(kl) {
            *g += (1.0 - cfg.alpha) * k;
        }
    }
    Ok(grad)
}

/// Pixel set iff `value >= tau`.
pub fn binarize(map: &SaliencyMap, tau: f64) -> BinaryGrid {
    BinaryGrid::new(
        map.width,
        map.height,
        map.values.iter().map(|&v| v >= tau).collect(),
    )
}

/// Dilation by a `(2r+1)×(2r+1)` square, clipped at the borders.
///
/// The square element is separable, so this runs a horizontal then a
/// vertical sliding-window OR using prefix counts.
pub fn dilate(mask: &BinaryGrid, radius: usize) -> BinaryGrid {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let window = |line: &[bool], out: &mut Vec<bool>| {
        let mut prefix = Vec::with_capacity(line.len() + 1);
        prefix.push(0usize);
        for &b in line {
            prefix.push(prefix.last().unwrap() + usize::from(b));
        }
        out.clear();
        for i in 0..line.len() {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius + 1).min(line.len());
            out.push(prefix[hi] > prefix[lo]);
        }
    };
    let mut horizontal = vec![false; w * h];
    let mut buf = Vec::new();
    for y in 0..h {
        window(&mask.bits[y * w..(y + 1) * w], &mut buf);
        horizontal[y * w..(y + 1) * w].copy_from_slice(&buf);
    }
    let mut out = vec![false; w * h];
    let mut column = Vec::with_capacity(h);
    for x in 0..w {
        column.clear();
        column.extend((0..h).map(|y| horizontal[y * w + x]));
        window(&column, &mut buf);
        for (y, &b) in buf.iter().enumerate() {
            out[y * w + x] = b;
        }
    }
    BinaryGrid::new(w, h, out)
}

/// Inclusive pixel bounds `(x0, y0, x1, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// One connected distortion candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionProposal {
    pub mask: BinaryGrid,
    pub bbox: BoundingBox,
    pub peak_saliency: f64,
    pub area: usize,
}

const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// One proposal per 8-connected component with `area >= min_area`, sorted by
/// peak saliency (descending), then `(y0, x0)`.
pub fn extract_regions(
    mask: &BinaryGrid,
    source: &SaliencyMap,
    min_area: usize,
) -> Result<Vec<RegionProposal>, SaliencyError> {
    if mask.width != source.width || mask.height != source.height {
        return Err(SaliencyError::DimensionMismatch(
            mask.width,
            mask.height,
            source.width,
            source.height,
        ));
    }
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    let mut regions = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            pixels.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for (dx, dy) in NEIGHBOURS {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask.bits[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if pixels.len() < min_area.max(1) {
            continue;
        }
        let mut region_mask = BinaryGrid::empty(w, h);
        let mut bbox = BoundingBox {
            x0: usize::MAX,
            y0: usize::MAX,
            x1: 0,
            y1: 0,
        };
        let mut peak = 0.0f64;
        for &i in &pixels {
            let (x, y) = (i % w, i / w);
            region_mask.bits[i] = true;
            bbox.x0 = bbox.x0.min(x);
            bbox.y0 = bbox.y0.min(y);
            bbox.x1 = bbox.x1.max(x);
            bbox.y1 = bbox.y1.max(y);
            peak = peak.max(source.values[i]);
        }
        regions.push(RegionProposal {
            mask: region_mask,
            bbox,
            peak_saliency: peak,
            area: pixels.len(),
        });
    }
    regions.sort_by(|a, b| {
        b.peak_saliency
            .total_cmp(&a.peak_saliency)
            .then(a.bbox.y0.cmp(&b.bbox.y0))
            .then(a.bbox.x0.cmp(&b.bbox.x0))
    });
    Ok(regions)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    pub tau: f64,
    pub dilation_radius: usize,
    pub min_area: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            dilation_radius: 1,
            min_area: 4,
        }
    }
}

/// binarize → dilate → extract_regions.
pub fn propose_masks(
    map: &SaliencyMap,
    cfg: &ProposalConfig,
) -> Result<Vec<RegionProposal>, SaliencyError> {
    if !(0.0..=1.0).contains(&cfg.tau) {
        return Err(SaliencyError::InvalidConfig(format!(
            "tau {} outside [0, 1]",
            cfg.tau
        )));
    }
    let mask = dilate(&binarize(map, cfg.tau), cfg.dilation_radius);
    extract_regions(&mask, map, cfg.min_area)
}
