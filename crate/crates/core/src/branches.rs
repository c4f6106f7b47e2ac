//! The three probability-emitting branches and their input features.
//!
//! * `Image` (I): gradient-boosted trees over 31 raster statistics of the
//!   100 × 100 RGB tile (channel moments, channel histograms, mean gradient
//!   magnitude). Stands in for a convolutional image classifier.
//! * `Temporal` (T): gradient-boosted trees over a 199-value summary of the
//!   week × weekday × hour visit tensor. Stands in for a sequence network.
//! * `Multi` (M): gradient-boosted trees over the concatenated statistical,
//!   user activity and region graph features.
//!
//! Anything implementing [`ProbabilityBranch`] can feed the fusion head.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MULTI_DIM;
use crate::gbdt::{self, GbdtModel, GbdtParams};
use crate::model::{Category, TemporalTensor, DAYS_PER_WEEK, HOURS_PER_DAY, N_CATEGORIES};

pub const IMAGE_SIZE: u32 = 100;
pub const IMAGE_DIM: usize = 31;
pub const TEMPORAL_DIM: usize = DAYS_PER_WEEK * HOURS_PER_DAY + HOURS_PER_DAY + DAYS_PER_WEEK;
const HIST_BINS: usize = 8;

pub const BRANCH_FORMAT: &str = "urfc-branch";
pub const BRANCH_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchKind {
    #[serde(rename = "I")]
    Image,
    #[serde(rename = "T")]
    Temporal,
    #[serde(rename = "M")]
    Multi,
}

impl BranchKind {
    /// Fusion input order.
    pub const ALL: [BranchKind; 3] = [BranchKind::Image, BranchKind::Temporal, BranchKind::Multi];

    pub fn feature_dim(self) -> usize {
        match self {
            BranchKind::Image => IMAGE_DIM,
            BranchKind::Temporal => TEMPORAL_DIM,
            BranchKind::Multi => MULTI_DIM,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            BranchKind::Image => "I",
            BranchKind::Temporal => "T",
            BranchKind::Multi => "M",
        }
    }

    pub fn position(self) -> usize {
        self as usize
    }
}

impl fmt::Display for BranchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for BranchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "image" => Ok(BranchKind::Image),
            "T" | "temporal" => Ok(BranchKind::Temporal),
            "M" | "multi" => Ok(BranchKind::Multi),
            other => Err(Error::Invalid(format!("unknown branch {other:?}"))),
        }
    }
}

/// Grayscale (Rec. 601 luma).
pub fn luma(r: u8, g: u8, b: u8) -> f64 {
    0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)
}

/// Raster statistics, in order: channel means (R, G, B), channel population
/// standard deviations, three normalized 8-bin channel histograms, and the
/// mean grayscale gradient magnitude from central differences with
/// replicated borders.
pub fn extract_image_feature(img: &RgbImage) -> Result<Vec<f64>> {
    let (w, h) = img.dimensions();
    if (w, h) != (IMAGE_SIZE, IMAGE_SIZE) {
        return Err(Error::Invalid(format!("expected {IMAGE_SIZE}x{IMAGE_SIZE} image, got {w}x{h}")));
    }
    let n = f64::from(w * h);
    let mut sum = [0.0; 3];
    let mut hist = [[0u32; HIST_BINS]; 3];
    for p in img.pixels() {
        for c in 0..3 {
            sum[c] += f64::from(p[c]);
            hist[c][usize::from(p[c]) / (256 / HIST_BINS)] += 1;
        }
    }
    let mean = sum.map(|s| s / n);
    let mut sq = [0.0; 3];
    for p in img.pixels() {
        for c in 0..3 {
            let d = f64::from(p[c]) - mean[c];
            sq[c] += d * d;
        }
    }
    let std = sq.map(|s| (s / n).sqrt());

    let gray: Vec<f64> = img.pixels().map(|p| luma(p[0], p[1], p[2])).collect();
    let (wi, hi) = (w as usize, h as usize);
    let at = |x: usize, y: usize| gray[y * wi + x];
    let mut grad = 0.0;
    for y in 0..hi {
        for x in 0..wi {
            let gx = (at((x + 1).min(wi - 1), y) - at(x.saturating_sub(1), y)) / 2.0;
            let gy = (at(x, (y + 1).min(hi - 1)) - at(x, y.saturating_sub(1))) / 2.0;
            grad += (gx * gx + gy * gy).sqrt();
        }
    }

    let mut out = Vec::with_capacity(IMAGE_DIM);
    out.extend_from_slice(&mean);
    out.extend_from_slice(&std);
    for channel in &hist {
        out.extend(channel.iter().map(|&c| f64::from(c) / n));
    }
    out.push(grad / n);
    Ok(out)
}

pub fn load_image_feature(path: &Path) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| Error::file(path, e))?.to_rgb8();
    extract_image_feature(&img).map_err(|e| Error::file(path, e))
}

/// Week-averaged weekday × hour matrix (168, row-major), normalized hour
/// marginal (24) and normalized weekday marginal (7).
pub fn extract_temporal_feature(tensor: &TemporalTensor) -> Vec<f64> {
    let mut out = vec![0.0; TEMPORAL_DIM];
    let total = tensor.total();
    if total == 0 {
        return out;
    }
    let weeks = tensor.weeks();
    let cell = DAYS_PER_WEEK * HOURS_PER_DAY;
    let mut day_hour = vec![0u64; cell];
    for (i, &c) in tensor.as_slice().iter().enumerate() {
        day_hour[i % cell] += u64::from(c);
    }
    for (o, &c) in out.iter_mut().zip(&day_hour) {
        *o = c as f64 / weeks as f64;
    }
    let total = total as f64;
    for k in 0..DAYS_PER_WEEK {
        for h in 0..HOURS_PER_DAY {
            let c = day_hour[k * HOURS_PER_DAY + h] as f64;
            out[cell + h] += c / total;
            out[cell + HOURS_PER_DAY + k] += c / total;
        }
    }
    out
}

/// Maps one feature vector to a class-probability vector of length 9.
pub trait ProbabilityBranch: Send + Sync {
    fn kind(&self) -> BranchKind;
    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Builds a branch from training rows.
pub trait BranchTrainer: Sync {
    type Branch: ProbabilityBranch;

    fn train(&self, kind: BranchKind, x: &[Vec<f64>], y: &[Category]) -> Result<Self::Branch>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchModel {
    pub kind: BranchKind,
    pub feature_dim: usize,
    pub model: GbdtModel,
}

fn check_dim(kind: BranchKind, actual: usize) -> Result<()> {
    let expected = kind.feature_dim();
    if actual != expected {
        return Err(Error::Dimension { expected, actual });
    }
    Ok(())
}

pub fn train_branch(kind: BranchKind, x: &[Vec<f64>], y: &[Category], params: &GbdtParams) -> Result<BranchModel> {
    for row in x {
        check_dim(kind, row.len())?;
    }
    let labels: Vec<usize> = y.iter().map(|c| c.index()).collect();
    let model = gbdt::fit(x, &labels, N_CATEGORIES, params)?;
    Ok(BranchModel { kind, feature_dim: kind.feature_dim(), model })
}

pub fn predict_branch(model: &BranchModel, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(model.kind, x.len())?;
    model.model.predict_proba(x)
}

impl ProbabilityBranch for BranchModel {
    fn kind(&self) -> BranchKind {
        self.kind
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        predict_branch(self, x)
    }
}

#[derive(Serialize, Deserialize)]
struct BranchFile<T> {
    format: String,
    version: u32,
    branch: T,
}

impl BranchModel {
    pub fn to_json(&self) -> Result<String> {
        let file = BranchFile { format: BRANCH_FORMAT.into(), version: BRANCH_VERSION, branch: self };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let header: Header =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("not a branch file: {e}")))?;
        if header.format != BRANCH_FORMAT || header.version != BRANCH_VERSION {
            return Err(Error::Format(format!(
                "expected {BRANCH_FORMAT} v{BRANCH_VERSION}, found {} v{}",
                header.format, header.version
            )));
        }
        let BranchModel { kind, feature_dim, model } = serde_json::from_str::<BranchFile<BranchModel>>(text)?.branch;
        model.validate()?;
        check_dim(kind, feature_dim)?;
        check_dim(kind, model.n_features())?;
        if model.n_classes() != N_CATEGORIES {
            return Err(Error::Format(format!("branch model has {} classes", model.n_classes())));
        }
        Ok(BranchModel { kind, feature_dim, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        BranchModel::from_json(&text).map_err(|e| Error::file(path, e))
    }
}

/// Trains every branch as gradient-boosted trees, one parameter set per kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GbdtBranchTrainer {
    pub image: GbdtParams,
    pub temporal: GbdtParams,
    pub multi: GbdtParams,
}

impl GbdtBranchTrainer {
    pub fn uniform(params: GbdtParams) -> Self {
        GbdtBranchTrainer { image: params.clone(), temporal: params.clone(), multi: params }
    }

    pub fn params(&self, kind: BranchKind) -> &GbdtParams {
        match kind {
            BranchKind::Image => &self.image,
            BranchKind::Temporal => &self.temporal,
            BranchKind::Multi => &self.multi,
        }
    }
}

impl BranchTrainer for GbdtBranchTrainer {
    type Branch = BranchModel;

    fn train(&self, kind: BranchKind, x: &[Vec<f64>], y: &[Category]) -> Result<BranchModel> {
        train_branch(kind, x, y, self.params(kind))
    }
}
