//! Stacked decision fusion.
//!
//! For each fold `f`, every branch is trained on the other folds and
//! predicts fold `f`, giving an out-of-fold matrix of `3 × 9` probabilities
//! per training region (order I, T, M). A gradient-boosted head is trained on
//! that matrix, and the branches are then retrained on all training data to
//! serve inference.
//!
//! Branch inputs are requested per fold through [`BranchInputs`] together
//! with the set of rows whose labels may be used, so label-dependent
//! features (the user index behind the activity and region graph features)
//! are rebuilt without the held-out fold.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::branches::{BranchKind, BranchModel, BranchTrainer, ProbabilityBranch};
use crate::error::{Error, Result};
use crate::gbdt::{self, argmax, GbdtModel, GbdtParams};
use crate::model::{Category, N_CATEGORIES};

pub const FUSION_DIM: usize = 3 * N_CATEGORIES;
pub const FEATURE_LAYOUT_VERSION: u32 = 1;
pub const FUSED_FORMAT: &str = "urfc-fused";
pub const FUSED_VERSION: u32 = 1;

/// Source of branch feature rows for training regions `0..n`.
pub trait BranchInputs: Sync {
    /// Rows of `kind` features for training regions `rows`, computed using
    /// the labels of `visible` regions only.
    fn features(&self, kind: BranchKind, visible: &[usize], rows: &[usize]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub k_folds: usize,
    pub head: GbdtParams,
    /// Fail instead of warning when a training split lacks a category.
    pub strict: bool,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { k_folds: 5, head: GbdtParams::default(), strict: false, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionMeta {
    pub k_folds: usize,
    pub seed: u64,
    pub feature_layout_version: u32,
}

#[derive(Debug, Clone)]
pub struct FusedModel<B> {
    /// Order I, T, M.
    pub branches: Vec<B>,
    pub head: GbdtModel,
    pub meta: FusionMeta,
}

#[derive(Debug, Clone)]
pub struct FusedTraining<B> {
    pub model: FusedModel<B>,
    /// Out-of-fold probability rows, one per training region.
    pub oof: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub label: Category,
    pub proba: Vec<f64>,
    /// Per-branch probabilities, order I, T, M.
    pub branch_proba: Vec<Vec<f64>>,
}

fn check_missing_classes(labels: &[Category], rows: &[usize], fold: usize, strict: bool) -> Result<()> {
    let mut seen = [false; N_CATEGORIES];
    rows.iter().for_each(|&i| seen[labels[i].index()] = true);
    let missing: Vec<&str> = (0..N_CATEGORIES).filter(|&c| !seen[c]).map(|c| Category::ALL[c].name()).collect();
    if missing.is_empty() {
        return Ok(());
    }
    let message = format!("training split for fold {fold} has no {}", missing.join(", "));
    if strict {
        return Err(Error::Invalid(message));
    }
    log::warn!("{message}");
    Ok(())
}

fn train_branches<T: BranchTrainer>(
    inputs: &dyn BranchInputs,
    trainer: &T,
    labels: &[Category],
    visible: &[usize],
) -> Result<Vec<T::Branch>> {
    let y: Vec<Category> = visible.iter().map(|&i| labels[i]).collect();
    BranchKind::ALL
        .par_iter()
        .map(|&kind| {
            let x = inputs.features(kind, visible, visible)?;
            trainer.train(kind, &x, &y)
        })
        .collect()
}

/// Out-of-fold probabilities for the rows of fold `fold`.
fn fold_predictions<T: BranchTrainer>(
    inputs: &dyn BranchInputs,
    trainer: &T,
    labels: &[Category],
    folds: &[usize],
    fold: usize,
    strict: bool,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let held: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] == fold).collect();
    if held.is_empty() {
        return Ok(Vec::new());
    }
    let visible: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] != fold).collect();
    if visible.is_empty() {
        return Err(Error::Invalid(format!("fold {fold} leaves no training rows")));
    }
    check_missing_classes(labels, &visible, fold, strict)?;
    let y: Vec<Category> = visible.iter().map(|&i| labels[i]).collect();
    let per_kind: Vec<Vec<Vec<f64>>> = BranchKind::ALL
        .par_iter()
        .map(|&kind| {
            let mut rows = visible.clone();
            rows.extend_from_slice(&held);
            let x = inputs.features(kind, &visible, &rows)?;
            let (train_x, held_x) = x.split_at(visible.len());
            let branch = trainer.train(kind, train_x, &y)?;
            held_x.iter().map(|row| branch.predict_proba(row)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(held
        .iter()
        .enumerate()
        .map(|(j, &i)| (i, per_kind.iter().flat_map(|p| p[j].iter().copied()).collect()))
        .collect())
}

/// Out-of-fold probability matrix for the training regions.
pub fn out_of_fold<T: BranchTrainer>(
    inputs: &dyn BranchInputs,
    trainer: &T,
    labels: &[Category],
    folds: &[usize],
    config: &FusionConfig,
) -> Result<Vec<Vec<f64>>> {
    if config.k_folds < 2 {
        return Err(Error::Invalid(format!("k_folds must be at least 2, got {}", config.k_folds)));
    }
    if labels.is_empty() || labels.len() != folds.len() {
        return Err(Error::Invalid("labels and folds must be non-empty and equally long".into()));
    }
    if let Some(&f) = folds.iter().find(|&&f| f >= config.k_folds) {
        return Err(Error::Invalid(format!("fold id {f} >= k_folds {}", config.k_folds)));
    }
    let per_fold: Vec<Vec<(usize, Vec<f64>)>> = (0..config.k_folds)
        .into_par_iter()
        .map(|f| fold_predictions(inputs, trainer, labels, folds, f, config.strict))
        .collect::<Result<_>>()?;
    let mut oof = vec![Vec::new(); labels.len()];
    for (i, row) in per_fold.into_iter().flatten() {
        oof[i] = row;
    }
    Ok(oof)
}

pub fn train_fused<T: BranchTrainer>(
    inputs: &dyn BranchInputs,
    trainer: &T,
    labels: &[Category],
    folds: &[usize],
    config: &FusionConfig,
) -> Result<FusedTraining<T::Branch>> {
    let oof = out_of_fold(inputs, trainer, labels, folds, config)?;
    let y: Vec<usize> = labels.iter().map(|c| c.index()).collect();
    let all: Vec<usize> = (0..labels.len()).collect();
    let (head, branches) = rayon::join(
        || gbdt::fit(&oof, &y, N_CATEGORIES, &config.head),
        || train_branches(inputs, trainer, labels, &all),
    );
    let model = FusedModel {
        branches: branches?,
        head: head?,
        meta: FusionMeta { k_folds: config.k_folds, seed: config.seed, feature_layout_version: FEATURE_LAYOUT_VERSION },
    };
    Ok(FusedTraining { model, oof })
}

impl<B: ProbabilityBranch> FusedModel<B> {
    /// Fuses the branch outputs for one region; `inputs` are ordered I, T, M.
    pub fn predict(&self, inputs: &[Vec<f64>]) -> Result<FusedPrediction> {
        if inputs.len() != self.branches.len() {
            return Err(Error::Dimension { expected: self.branches.len(), actual: inputs.len() });
        }
        let branch_proba: Vec<Vec<f64>> =
            self.branches.iter().zip(inputs).map(|(b, x)| b.predict_proba(x)).collect::<Result<_>>()?;
        let stacked: Vec<f64> = branch_proba.iter().flatten().copied().collect();
        let proba = self.head.predict_proba(&stacked)?;
        let label = Category::from_index(argmax(&proba))?;
        Ok(FusedPrediction { label, proba, branch_proba })
    }
}

pub fn predict_fused<B: ProbabilityBranch>(model: &FusedModel<B>, inputs: &[Vec<f64>]) -> Result<FusedPrediction> {
    model.predict(inputs)
}

#[derive(Serialize, Deserialize)]
struct FusedManifest {
    format: String,
    version: u32,
    meta: FusionMeta,
    branch_files: Vec<(BranchKind, String)>,
    fusion_file: String,
}

fn branch_file_name(kind: BranchKind) -> String {
    format!("branch_{}.json", kind.short_name())
}

impl FusedModel<BranchModel> {
    /// Writes `model.json` (manifest), one file per branch and `fusion.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let mut branch_files = Vec::new();
        for b in &self.branches {
            let name = branch_file_name(b.kind);
            b.save(&dir.join(&name))?;
            branch_files.push((b.kind, name));
        }
        self.head.save(&dir.join("fusion.json"))?;
        let manifest = FusedManifest {
            format: FUSED_FORMAT.into(),
            version: FUSED_VERSION,
            meta: self.meta.clone(),
            branch_files,
            fusion_file: "fusion.json".into(),
        };
        let path = dir.join("model.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::file(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        let manifest: FusedManifest = serde_json::from_str(&text).map_err(|e| Error::file(&path, e))?;
        if manifest.format != FUSED_FORMAT || manifest.version != FUSED_VERSION {
            return Err(Error::file(&path, format!("unsupported model {} v{}", manifest.format, manifest.version)));
        }
        if manifest.meta.feature_layout_version != FEATURE_LAYOUT_VERSION {
            return Err(Error::file(&path, "feature layout version mismatch"));
        }
        let order: Vec<BranchKind> = manifest.branch_files.iter().map(|(k, _)| *k).collect();
        if order != BranchKind::ALL {
            return Err(Error::file(&path, "branches must be ordered I, T, M"));
        }
        let branches = manifest
            .branch_files
            .iter()
            .map(|(kind, name)| {
                let b = BranchModel::load(&dir.join(name))?;
                if b.kind != *kind {
                    return Err(Error::file(dir.join(name), format!("expected branch {kind}, found {}", b.kind)));
                }
                Ok(b)
            })
            .collect::<Result<_>>()?;
        let head = GbdtModel::load(&dir.join(&manifest.fusion_file))?;
        if head.n_features() != FUSION_DIM || head.n_classes() != N_CATEGORIES {
            return Err(Error::file(dir.join(&manifest.fusion_file), "fusion head has wrong shape"));
        }
        Ok(FusedModel { branches, head, meta: manifest.meta })
    }
}
