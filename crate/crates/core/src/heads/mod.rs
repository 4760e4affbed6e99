//! The four classification strategies compared by the benchmark: K-nearest
//! neighbours, random forest and RBF SVM over embeddings, plus end-to-end
//! fine-tuning. Fitting is deterministic given (spec, data, seed); trained
//! heads are immutable and safe to share across parallel predict calls.

pub mod finetune;
mod forest;
mod knn;
mod scaler;
mod svm;

pub use finetune::gather4;
pub use forest::ForestModel;
pub use knn::KnnModel;
pub use scaler::StandardScaler;
pub use svm::{rbf_kernel, GammaRule, SvmModel};

use ndarray::{Array4, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::nn::{ClassifierNet, LocalHeadNet, MicroResNet};
use crate::{Error, Result};

/// What a fine-tune head consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneInput {
    /// Full backbone over raw images (the classical baseline).
    RawImage,
    /// Residual head over frozen local feature grids.
    LocalRepresentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneSpec {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub input: FineTuneInput,
    /// Epochs without loss improvement before stopping early.
    pub plateau_patience: usize,
}

impl FineTuneSpec {
    pub fn defaults(input: FineTuneInput) -> Self {
        FineTuneSpec {
            epochs: 50,
            learning_rate: 1e-4,
            batch_size: 32,
            input,
            plateau_patience: 8,
        }
    }
}

/// One classification strategy with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadSpec {
    Knn { k: usize },
    RandomForest { n_trees: usize, max_depth: Option<usize> },
    RbfSvm { c: f64, gamma: GammaRule },
    FineTune(FineTuneSpec),
}

impl HeadSpec {
    pub fn knn_default() -> Self {
        HeadSpec::Knn { k: 5 }
    }

    pub fn random_forest_default() -> Self {
        HeadSpec::RandomForest {
            n_trees: 100,
            max_depth: None,
        }
    }

    pub fn rbf_svm_default() -> Self {
        HeadSpec::RbfSvm {
            c: 1.0,
            gamma: GammaRule::Scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            HeadSpec::Knn { k } if *k == 0 => Err(Error::Head("knn k must be >= 1".into())),
            HeadSpec::RandomForest { n_trees, .. } if *n_trees == 0 => {
                Err(Error::Head("random forest n_trees must be >= 1".into()))
            }
            HeadSpec::RbfSvm { c, .. } if *c <= 0.0 => {
                Err(Error::Head(format!("svm C must be > 0, got {c}")))
            }
            HeadSpec::FineTune(ft) => {
                if ft.learning_rate <= 0.0 {
                    return Err(Error::Head("fine-tune learning rate must be > 0".into()));
                }
                if ft.batch_size < 2 {
                    return Err(Error::Head("fine-tune batch size must be >= 2".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            HeadSpec::Knn { .. } => "knn",
            HeadSpec::RandomForest { .. } => "random_forest",
            HeadSpec::RbfSvm { .. } => "rbf_svm",
            HeadSpec::FineTune(_) => "fine_tune",
        }
    }
}

enum HeadModel {
    Knn(KnnModel),
    Forest(ForestModel),
    Svm(SvmModel),
    FineTuneImage { net: ClassifierNet, seen: Vec<usize> },
    FineTuneLocal { net: LocalHeadNet, seen: Vec<usize> },
}

/// A fitted head. Predictions only ever come from classes seen during fit.
pub struct TrainedHead {
    pub spec: HeadSpec,
    pub class_names: Vec<String>,
    model: HeadModel,
}

fn check_fit_labels(spec: &HeadSpec, n: usize, y: &[usize]) -> Result<Vec<usize>> {
    if n != y.len() {
        return Err(Error::Head(format!(
            "got {n} feature rows but {} labels",
            y.len()
        )));
    }
    if n == 0 {
        return Err(Error::Head("cannot fit on an empty training set".into()));
    }
    let mut seen: Vec<usize> = y.to_vec();
    seen.sort_unstable();
    seen.dedup();
    let needs_two = matches!(spec, HeadSpec::RbfSvm { .. } | HeadSpec::FineTune(_));
    if needs_two && seen.len() < 2 {
        return Err(Error::Head(format!(
            "{} requires at least two classes in the training labels",
            spec.short_name()
        )));
    }
    Ok(seen)
}

/// Fit a classical head (knn / random forest / rbf svm) on embeddings.
pub fn fit_embeddings<'a>(
    spec: &HeadSpec,
    x: ArrayView2<'a, f32>,
    y: &'a [usize],
    class_names: &[String],
    seed: u64,
) -> Result<TrainedHead> {
    spec.validate()?;
    check_fit_labels(spec, x.nrows(), y)?;
    let model = match spec {
        HeadSpec::Knn { k } => HeadModel::Knn(KnnModel::fit(*k, x, y)?),
        HeadSpec::RandomForest { n_trees, max_depth } => {
            HeadModel::Forest(ForestModel::fit(*n_trees, *max_depth, x, y, seed)?)
        }
        HeadSpec::RbfSvm { c, gamma } => HeadModel::Svm(SvmModel::fit(*c, *gamma, x, y)?),
        HeadSpec::FineTune(_) => {
            return Err(Error::Head(
                "fine-tune heads train on images or local maps, not embeddings".into(),
            ))
        }
    };
    Ok(TrainedHead {
        spec: spec.clone(),
        class_names: class_names.to_vec(),
        model,
    })
}

/// Fine-tune a backbone on raw image batches (N, H, W, 3).
pub fn fit_finetune_images(
    spec: &FineTuneSpec,
    init: &MicroResNet,
    x: &Array4<f32>,
    y: &[usize],
    class_names: &[String],
    seed: u64,
) -> Result<TrainedHead> {
    let full = HeadSpec::FineTune(spec.clone());
    full.validate()?;
    let seen = check_fit_labels(&full, x.dim().0, y)?;
    let (net, _losses) =
        finetune::train_image_classifier(spec, init, x, y, class_names.len(), seed)?;
    Ok(TrainedHead {
        spec: full,
        class_names: class_names.to_vec(),
        model: HeadModel::FineTuneImage { net, seen },
    })
}

/// Train a residual head on frozen local feature grids (N, h, w, D).
pub fn fit_finetune_local(
    spec: &FineTuneSpec,
    x: &Array4<f32>,
    y: &[usize],
    class_names: &[String],
    seed: u64,
) -> Result<TrainedHead> {
    let full = HeadSpec::FineTune(spec.clone());
    full.validate()?;
    let seen = check_fit_labels(&full, x.dim().0, y)?;
    let (net, _losses) = finetune::train_local_classifier(spec, x, y, class_names.len(), seed)?;
    Ok(TrainedHead {
        spec: full,
        class_names: class_names.to_vec(),
        model: HeadModel::FineTuneLocal { net, seen },
    })
}

impl TrainedHead {
    /// Predict from embeddings (classical heads only).
    pub fn predict_embeddings(&self, x: ArrayView2<'_, f32>) -> Result<Vec<usize>> {
        match &self.model {
            HeadModel::Knn(m) => m.predict(x),
            HeadModel::Forest(m) => m.predict(x),
            HeadModel::Svm(m) => m.predict(x),
            _ => Err(Error::Head(
                "fine-tune heads predict from images or local maps, not embeddings".into(),
            )),
        }
    }

    /// Predict from batched rasters or local grids (fine-tune heads only).
    pub fn predict_batch(&self, x: &Array4<f32>) -> Result<Vec<usize>> {
        match &self.model {
            HeadModel::FineTuneImage { net, seen } => {
                Ok(finetune::predict_masked(net, x, seen))
            }
            HeadModel::FineTuneLocal { net, seen } => {
                Ok(finetune::predict_masked(net, x, seen))
            }
            _ => Err(Error::Head(
                "classical heads predict from embeddings, not batches".into(),
            )),
        }
    }

    /// Serialize a classical head (with its preprocessing statistics) to JSON.
    /// Fine-tuned networks are persisted as checkpoints instead.
    pub fn to_json(&self) -> Result<String> {
        let model = match &self.model {
            HeadModel::Knn(m) => PortableModel::Knn(m.clone()),
            HeadModel::Forest(m) => PortableModel::Forest(m.clone()),
            HeadModel::Svm(m) => PortableModel::Svm(m.clone()),
            _ => {
                return Err(Error::Head(
                    "fine-tune heads are not JSON-serializable; save a checkpoint".into(),
                ))
            }
        };
        let portable = PortableHead {
            spec: self.spec.clone(),
            class_names: self.class_names.clone(),
            model,
        };
        serde_json::to_string(&portable).map_err(|e| Error::Head(e.to_string()))
    }

    pub fn from_json(json: &str) -> Result<TrainedHead> {
        let portable: PortableHead =
            serde_json::from_str(json).map_err(|e| Error::Head(e.to_string()))?;
        let model = match portable.model {
            PortableModel::Knn(m) => HeadModel::Knn(m),
            PortableModel::Forest(m) => HeadModel::Forest(m),
            PortableModel::Svm(m) => HeadModel::Svm(m),
        };
        Ok(TrainedHead {
            spec: portable.spec,
            class_names: portable.class_names,
            model,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PortableHead {
    spec: HeadSpec,
    class_names: Vec<String>,
    model: PortableModel,
}

#[derive(Serialize, Deserialize)]
enum PortableModel {
    Knn(KnnModel),
    Forest(ForestModel),
    Svm(SvmModel),
}

/// Fraction of positions where the labels agree.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Head(format!(
            "accuracy length mismatch: {} predictions vs {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Head("accuracy needs at least one sample".into()));
    }
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / pred.len() as f64)
}
