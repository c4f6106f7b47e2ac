//! End-to-end glue: load a dataset into memory, compute branch inputs,
//! train the fused model, predict and evaluate.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::branches::{
    extract_temporal_feature, load_image_feature, BranchKind, BranchModel, GbdtBranchTrainer, ProbabilityBranch,
};
use crate::error::{Error, Result};
use crate::export::FeatureMatrix;
use crate::features::{
    concat_multidim, extract_region_graph, extract_statistical, extract_user_activity, StatFeature, UserIndex,
    ACTIVITY_DIM, GRAPH_DIM, N_STAT,
};
use crate::fusion::{train_fused, BranchInputs, FusedModel, FusedPrediction, FusedTraining, FusionConfig};
use crate::gbdt::argmax;
use crate::ingest::{build_temporal_tensor, read_manifest, DatasetIndex};
use crate::metrics::{evaluate_with_scope, Evaluation, F1Scope};
use crate::model::{Category, VisitLog, N_CATEGORIES};

/// A dataset with every region's log and label-free features in memory.
pub struct Corpus {
    pub dataset: DatasetIndex,
    logs: Vec<VisitLog>,
    stats: Vec<StatFeature>,
    stat_store: HashMap<String, StatFeature>,
    temporal: Vec<Vec<f64>>,
    images: Vec<Option<Vec<f64>>>,
    /// Record indices of labeled regions; training row `i` is record `training[i]`.
    training: Vec<usize>,
    index_cache: Mutex<HashMap<Vec<usize>, Arc<UserIndex>>>,
}

impl Corpus {
    pub fn load(dataset: DatasetIndex) -> Result<Self> {
        let loaded: Vec<(VisitLog, Option<Vec<f64>>)> = (0..dataset.records.len())
            .into_par_iter()
            .map(|i| {
                let log = dataset.load_visit_log(i)?;
                let image = dataset.image_path(i).map(|p| load_image_feature(&p)).transpose()?;
                Ok((log, image))
            })
            .collect::<Result<_>>()?;
        let (logs, images): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
        let stats: Vec<StatFeature> = logs.par_iter().map(extract_statistical).collect();
        let temporal: Vec<Vec<f64>> =
            logs.par_iter().map(|l| extract_temporal_feature(&build_temporal_tensor(l))).collect();
        let stat_store = dataset.records.iter().map(|r| r.region_id.clone()).zip(stats.iter().copied()).collect();
        let training = dataset.training_indices();
        Ok(Corpus {
            dataset,
            logs,
            stats,
            stat_store,
            temporal,
            images,
            training,
            index_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn num_training(&self) -> usize {
        self.training.len()
    }

    pub fn training_records(&self) -> &[usize] {
        &self.training
    }

    pub fn training_labels(&self) -> Vec<Category> {
        self.training.iter().map(|&r| self.dataset.records[r].label.expect("labeled")).collect()
    }

    pub fn training_folds(&self) -> Vec<usize> {
        self.training.iter().map(|&r| self.dataset.folds[r].expect("labeled")).collect()
    }

    /// Replaces the label of training row `row`, keeping fold assignment.
    pub fn relabel(&mut self, row: usize, label: Category) {
        let r = self.training[row];
        self.dataset.records[r].label = Some(label);
        self.index_cache.lock().expect("cache lock").clear();
    }

    pub fn log(&self, record: usize) -> &VisitLog {
        &self.logs[record]
    }

    /// User index over the given training rows, memoized per row set.
    pub fn user_index(&self, visible: &[usize]) -> Result<Arc<UserIndex>> {
        if let Some(idx) = self.index_cache.lock().expect("cache lock").get(visible) {
            return Ok(Arc::clone(idx));
        }
        let index = Arc::new(UserIndex::build(visible.iter().map(|&row| {
            let r = self.training[row];
            (&self.logs[r], self.dataset.records[r].label.expect("labeled"))
        }))?);
        self.index_cache.lock().expect("cache lock").insert(visible.to_vec(), Arc::clone(&index));
        Ok(index)
    }

    pub fn full_user_index(&self) -> Result<Arc<UserIndex>> {
        let all: Vec<usize> = (0..self.training.len()).collect();
        self.user_index(&all)
    }

    pub fn stat_feature(&self, record: usize) -> &StatFeature {
        &self.stats[record]
    }

    pub fn activity_feature(&self, record: usize, index: &UserIndex) -> Vec<f64> {
        let log = &self.logs[record];
        extract_user_activity(log, index, &log.region_id)
    }

    pub fn graph_feature(&self, record: usize, index: &UserIndex) -> Result<Vec<f64>> {
        let log = &self.logs[record];
        extract_region_graph(log, index, &self.stat_store, &log.region_id)
    }

    pub fn multi_feature(&self, record: usize, index: &UserIndex) -> Result<Vec<f64>> {
        concat_multidim(
            self.stats[record].as_slice(),
            &self.activity_feature(record, index),
            &self.graph_feature(record, index)?,
        )
    }

    pub fn temporal_feature(&self, record: usize) -> &[f64] {
        &self.temporal[record]
    }

    pub fn image_feature(&self, record: usize) -> Result<&[f64]> {
        self.images[record].as_deref().ok_or_else(|| Error::MissingModality {
            region: self.dataset.records[record].region_id.clone(),
            modality: "image",
        })
    }

    /// Branch input for one record given a user index.
    pub fn branch_feature(&self, kind: BranchKind, record: usize, index: &UserIndex) -> Result<Vec<f64>> {
        match kind {
            BranchKind::Image => Ok(self.image_feature(record)?.to_vec()),
            BranchKind::Temporal => Ok(self.temporal[record].clone()),
            BranchKind::Multi => self.multi_feature(record, index),
        }
    }

    /// Inputs (I, T, M) for one record, using the full training index.
    pub fn inference_inputs(&self, record: usize, index: &UserIndex) -> Result<Vec<Vec<f64>>> {
        BranchKind::ALL.iter().map(|&k| self.branch_feature(k, record, index)).collect()
    }
}

impl BranchInputs for Corpus {
    fn features(&self, kind: BranchKind, visible: &[usize], rows: &[usize]) -> Result<Vec<Vec<f64>>> {
        let index = match kind {
            BranchKind::Multi => self.user_index(visible)?,
            _ => Arc::new(UserIndex::default()),
        };
        rows.par_iter().map(|&row| self.branch_feature(kind, self.training[row], &index)).collect()
    }
}

/// Which feature block `features` exports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureBlock {
    Stat,
    Activity,
    Graph,
    Multi,
    Temporal,
    Image,
}

impl FeatureBlock {
    pub fn dims(self) -> usize {
        match self {
            FeatureBlock::Stat => N_STAT,
            FeatureBlock::Activity => ACTIVITY_DIM,
            FeatureBlock::Graph => GRAPH_DIM,
            FeatureBlock::Multi => BranchKind::Multi.feature_dim(),
            FeatureBlock::Temporal => BranchKind::Temporal.feature_dim(),
            FeatureBlock::Image => BranchKind::Image.feature_dim(),
        }
    }
}

impl std::str::FromStr for FeatureBlock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "stat" => FeatureBlock::Stat,
            "activity" => FeatureBlock::Activity,
            "graph" => FeatureBlock::Graph,
            "multi" => FeatureBlock::Multi,
            "temporal" => FeatureBlock::Temporal,
            "image" => FeatureBlock::Image,
            other => return Err(Error::Invalid(format!("unknown feature block {other:?}"))),
        })
    }
}

/// Feature matrix over every record, with the user index built from all
/// labeled records (each region excluded from its own features).
pub fn feature_matrix(corpus: &Corpus, block: FeatureBlock) -> Result<FeatureMatrix> {
    let index = corpus.full_user_index()?;
    let rows: Vec<Vec<f64>> = (0..corpus.dataset.records.len())
        .into_par_iter()
        .map(|r| match block {
            FeatureBlock::Stat => Ok(corpus.stat_feature(r).as_slice().to_vec()),
            FeatureBlock::Activity => Ok(corpus.activity_feature(r, &index)),
            FeatureBlock::Graph => corpus.graph_feature(r, &index),
            FeatureBlock::Multi => corpus.multi_feature(r, &index),
            FeatureBlock::Temporal => Ok(corpus.temporal_feature(r).to_vec()),
            FeatureBlock::Image => Ok(corpus.image_feature(r)?.to_vec()),
        })
        .collect::<Result<_>>()?;
    let mut m = FeatureMatrix::new(block.dims());
    for (rec, row) in corpus.dataset.records.iter().zip(rows) {
        m.push(rec.region_id.clone(), row)?;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub branches: GbdtBranchTrainer,
    pub fusion: FusionConfig,
}

pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<FusedTraining<BranchModel>> {
    train_fused(corpus, &config.branches, &corpus.training_labels(), &corpus.training_folds(), &config.fusion)
}

/// Predictions for the given records.
pub fn predict_records<B: ProbabilityBranch>(
    corpus: &Corpus,
    model: &FusedModel<B>,
    records: &[usize],
) -> Result<Vec<(String, FusedPrediction)>> {
    let index = corpus.full_user_index()?;
    records
        .par_iter()
        .map(|&r| {
            let inputs = corpus.inference_inputs(r, &index)?;
            Ok((corpus.dataset.records[r].region_id.clone(), model.predict(&inputs)?))
        })
        .collect()
}

fn prediction_header() -> Vec<String> {
    let mut h = vec!["region_id".to_owned(), "label".to_owned()];
    h.extend(Category::ALL.iter().map(|c| format!("p_{c}")));
    for kind in BranchKind::ALL {
        h.extend(Category::ALL.iter().map(|c| format!("{kind}_{c}")));
    }
    h
}

/// CSV: `region_id,label,p_<cat>×9,I_<cat>×9,T_<cat>×9,M_<cat>×9`.
pub fn write_predictions<W: Write>(out: W, predictions: &[(String, FusedPrediction)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(prediction_header())?;
    for (id, p) in predictions {
        let mut rec = vec![id.clone(), p.label.name().to_owned()];
        rec.extend(p.proba.iter().map(f64::to_string));
        rec.extend(p.branch_proba.iter().flatten().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_predictions(path: &Path, predictions: &[(String, FusedPrediction)]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    write_predictions(BufWriter::new(f), predictions)
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, FusedPrediction)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::file(path, e))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != prediction_header() {
        return Err(Error::file(path, "unexpected predictions header"));
    }
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let bad = |e: &dyn std::fmt::Display| Error::file(path, format!("line {}: {e}", i + 2));
        let label: Category = row[1].parse().map_err(|e| bad(&e))?;
        let values: Vec<f64> =
            row.iter().skip(2).map(|v| v.parse::<f64>().map_err(|e| bad(&e))).collect::<Result<_>>()?;
        let proba = values[..N_CATEGORIES].to_vec();
        let branch_proba = values[N_CATEGORIES..].chunks(N_CATEGORIES).map(<[f64]>::to_vec).collect();
        out.push((row[0].to_owned(), FusedPrediction { label, proba, branch_proba }));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fused: Evaluation,
    /// Per-branch evaluation of each branch's own argmax, order I, T, M.
    pub branches: Vec<(BranchKind, Evaluation)>,
}

/// Scores predictions against a truth manifest. Both must cover exactly the
/// same regions.
pub fn evaluate_predictions(
    predictions: &[(String, FusedPrediction)],
    truth: &[(String, Category)],
    scope: F1Scope,
) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "{} predictions but {} labeled regions in truth",
            predictions.len(),
            truth.len()
        )));
    }
    let by_id: HashMap<&str, &FusedPrediction> = predictions.iter().map(|(id, p)| (id.as_str(), p)).collect();
    if by_id.len() != predictions.len() {
        return Err(Error::Invalid("duplicate region in predictions".into()));
    }
    let mut y_true = Vec::new();
    let mut matched = Vec::new();
    for (id, label) in truth {
        let p = by_id.get(id.as_str()).ok_or_else(|| Error::Invalid(format!("no prediction for region {id}")))?;
        y_true.push(*label);
        matched.push(*p);
    }
    let fused_pred: Vec<Category> = matched.iter().map(|p| p.label).collect();
    let fused = evaluate_with_scope(&y_true, &fused_pred, scope)?;
    let mut branches = Vec::new();
    for kind in BranchKind::ALL {
        let pred: Vec<Category> = matched
            .iter()
            .map(|p| {
                p.branch_proba
                    .get(kind.position())
                    .ok_or_else(|| Error::Invalid(format!("missing {kind} probabilities")))
                    .and_then(|v| Category::from_index(argmax(v)))
            })
            .collect::<Result<_>>()?;
        branches.push((kind, evaluate_with_scope(&y_true, &pred, scope)?));
    }
    Ok(EvalReport { fused, branches })
}

/// Labeled `(region_id, label)` pairs from a manifest-format file.
pub fn read_truth(path: &Path) -> Result<Vec<(String, Category)>> {
    Ok(read_manifest(path)?.into_iter().filter_map(|r| r.label.map(|l| (r.region_id, l))).collect())
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let line = |name: &str, e: &Evaluation| {
            format!("{name:<6} acc {:.4}  kappa {:.4}  macro-F1 {:.4}\n", e.accuracy, e.kappa, e.macro_f1)
        };
        s.push_str(&line("fused", &self.fused));
        for (kind, e) in &self.branches {
            s.push_str(&line(kind.short_name(), e));
        }
        s.push('\n');
        s.push_str(&self.fused.confusion.to_table());
        s
    }
}

/// Trains on a dataset's labeled regions and scores the held-out regions
/// listed in `truth`.
pub fn run_holdout(
    dataset: DatasetIndex,
    truth: &[(String, Category)],
    config: &TrainConfig,
    scope: F1Scope,
) -> Result<(FusedTraining<BranchModel>, EvalReport)> {
    let corpus = Corpus::load(dataset)?;
    let trained = train(&corpus, config)?;
    let held = corpus.dataset.unlabeled_indices();
    let predictions = predict_records(&corpus, &trained.model, &held)?;
    let report = evaluate_predictions(&predictions, truth, scope)?;
    Ok((trained, report))
}
