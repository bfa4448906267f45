//! Evaluation of explanations: faithfulness, stability, sparsity, parsimony
//! and the multi-level descriptor, plus 2×2 patch aggregation.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PaceError, Result};
use crate::inference::{infer_factored, Inference};
use crate::model::{ConceptBank, Dataset, HeadParams, Split, TrainConfig};
use crate::numkit::softmax;

pub const LR_EPOCHS: usize = 500;
pub const LR_RATE: f64 = 0.1;
pub const LR_L2: f64 = 1e-4;

/// Multinomial logistic regression with a bias column, trained by full-batch gradient descent.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    /// C × (F + 1); the last column is the bias.
    pub weights: Array2<f64>,
}

impl LogisticRegression {
    pub fn fit(x: ArrayView2<f64>, y: &[usize], num_classes: usize) -> Result<Self> {
        let (n, f) = x.dim();
        if n != y.len() || n == 0 {
            return Err(PaceError::Shape(format!("{n} feature rows but {} labels", y.len())));
        }
        if let Some(bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(PaceError::Shape(format!("label {bad} out of range for {num_classes} classes")));
        }
        let mut design = Array2::ones((n, f + 1));
        design.slice_mut(ndarray::s![.., ..f]).assign(&x);
        let mut w = Array2::<f64>::zeros((num_classes, f + 1));
        let mut onehot = Array2::<f64>::zeros((n, num_classes));
        for (i, &c) in y.iter().enumerate() {
            onehot[[i, c]] = 1.0;
        }
        for _ in 0..LR_EPOCHS {
            let mut probs = design.dot(&w.t());
            for mut row in probs.rows_mut() {
                let p = softmax(row.as_slice().expect("row-major"))?;
                row.assign(&Array1::from(p));
            }
            let resid = probs - &onehot;
            let mut grad = resid.t().dot(&design) / n as f64;
            let mut penalty = w.clone();
            penalty.column_mut(f).fill(0.0);
            grad.scaled_add(LR_L2, &penalty);
            w.scaled_add(-LR_RATE, &grad);
        }
        Ok(LogisticRegression { weights: w })
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, x: ArrayView1<f64>) -> usize {
        let f = self.weights.ncols() - 1;
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (c, row) in self.weights.rows().into_iter().enumerate() {
            let score = row.slice(ndarray::s![..f]).dot(&x) + row[f];
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, x: ArrayView2<f64>, y: &[usize]) -> f64 {
        let hits = x
            .rows()
            .into_iter()
            .zip(y)
            .filter(|(row, &label)| self.predict(*row) == label)
            .count();
        hits as f64 / y.len() as f64
    }
}

/// Test accuracy of a logistic regression from θ to label fitted on the training pairs.
pub fn faithfulness(
    train_x: ArrayView2<f64>,
    train_y: &[usize],
    test_x: ArrayView2<f64>,
    test_y: &[usize],
) -> Result<f64> {
    let first = *train_y
        .first()
        .ok_or_else(|| PaceError::Domain("faithfulness needs training data".into()))?;
    if train_y.iter().all(|&y| y == first) {
        return Err(PaceError::DegenerateLabels(first));
    }
    if test_y.is_empty() {
        return Err(PaceError::Domain("faithfulness needs test data".into()));
    }
    let classes = train_y.iter().chain(test_y).max().map_or(0, |m| m + 1);
    let lr = LogisticRegression::fit(train_x, train_y, classes)?;
    Ok(lr.accuracy(test_x, test_y))
}

/// ‖θ − θ'‖₂ / ‖θ‖₂.
pub fn stability(theta: ArrayView1<f64>, perturbed: ArrayView1<f64>) -> Result<f64> {
    if theta.len() != perturbed.len() {
        return Err(PaceError::Shape("θ and θ' differ in length".into()));
    }
    let norm = theta.dot(&theta).sqrt();
    if !(norm > 0.0) {
        return Err(PaceError::Domain("stability is undefined for a zero anchor".into()));
    }
    let diff = &theta - &perturbed;
    Ok(diff.dot(&diff).sqrt() / norm)
}

/// Fraction of entries below 0.1/K after normalizing θ onto the simplex.
pub fn sparsity(theta: ArrayView1<f64>) -> Result<f64> {
    let k = theta.len();
    if k == 0 {
        return Err(PaceError::Domain("sparsity of an empty vector".into()));
    }
    let total: f64 = theta.sum();
    let scale = if (total - 1.0).abs() <= 1e-12 {
        1.0
    } else if total.abs() > 0.0 {
        total
    } else {
        return Err(PaceError::Domain("cannot normalize θ that sums to zero".into()));
    };
    let eps = 0.1 / k as f64;
    let below = theta.iter().filter(|t| (*t / scale).abs() < eps).count();
    Ok(below as f64 / k as f64)
}

/// Average φ over 2×2 blocks of an S×S patch grid.
pub fn aggregate_patches(phi: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (j, k) = phi.dim();
    let s = (j as f64).sqrt().round() as usize;
    if s * s != j || s % 2 != 0 || s == 0 {
        return Err(PaceError::Shape(format!("{j} patches do not form an even square grid")));
    }
    let half = s / 2;
    let mut out = Array2::zeros((half * half, k));
    for u in 0..half {
        for v in 0..half {
            let mut row = out.row_mut(u * half + v);
            for idx in [2 * u * s + 2 * v, 2 * u * s + 2 * v + 1, (2 * u + 1) * s + 2 * v, (2 * u + 1) * s + 2 * v + 1] {
                row += &phi.row(idx);
            }
            row /= 4.0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub faithfulness: f64,
    /// Absent when some test image has no perturbed twin.
    pub stability: Option<f64>,
    pub sparsity: f64,
    pub parsimony: usize,
    pub multilevel: Vec<String>,
}

/// θ and φ for every record (and twin, where present) of a dataset.
#[derive(Debug, Clone)]
pub struct DatasetInference {
    pub originals: Vec<Inference>,
    pub twins: Vec<Option<Inference>>,
}

pub fn infer_dataset(
    dataset: &Dataset,
    bank: &ConceptBank,
    head: &HeadParams,
    config: &TrainConfig,
) -> Result<DatasetInference> {
    check_compatible(dataset, bank, head)?;
    let factored = bank.factorize()?;
    let pairs = dataset
        .records
        .par_iter()
        .map(|r| -> Result<(Inference, Option<Inference>)> {
            let original = infer_factored(r, &factored, head, config, None)?;
            let twin = match &r.perturbed {
                Some(p) => Some(infer_factored(p, &factored, head, config, None)?),
                None => None,
            };
            Ok((original, twin))
        })
        .collect::<Result<Vec<_>>>()?;
    let (originals, twins) = pairs.into_iter().unzip();
    Ok(DatasetInference { originals, twins })
}

fn check_compatible(dataset: &Dataset, bank: &ConceptBank, head: &HeadParams) -> Result<()> {
    if let Some(d) = dataset.dim() {
        if d != bank.dim() {
            return Err(PaceError::Shape(format!("data has d = {d}, model has d = {}", bank.dim())));
        }
    }
    if head.num_concepts() != bank.num_concepts() {
        return Err(PaceError::Shape("heads and bank disagree on K".into()));
    }
    if dataset.num_classes > head.num_classes() {
        return Err(PaceError::Shape(format!(
            "data has {} classes, model has {}",
            dataset.num_classes,
            head.num_classes()
        )));
    }
    Ok(())
}

fn stack(rows: &[ArrayView1<f64>], k: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), k));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}

/// Infer every image and compute the metrics report.
pub fn evaluate(
    dataset: &Dataset,
    bank: &ConceptBank,
    head: &HeadParams,
    config: &TrainConfig,
) -> Result<MetricsReport> {
    let inferred = infer_dataset(dataset, bank, head, config)?;
    report_from_inference(dataset, &inferred, bank.num_concepts())
}

pub fn report_from_inference(dataset: &Dataset, inferred: &DatasetInference, k: usize) -> Result<MetricsReport> {
    let mut train_x = Vec::new();
    let mut train_y = Vec::new();
    let mut test_x = Vec::new();
    let mut test_y = Vec::new();
    let mut test_idx = Vec::new();
    for (m, (r, split)) in dataset.records.iter().zip(&dataset.splits).enumerate() {
        let theta = inferred.originals[m].theta.view();
        match split {
            Split::Train => {
                train_x.push(theta);
                train_y.push(r.predicted_label);
            }
            Split::Test => {
                test_x.push(theta);
                test_y.push(r.predicted_label);
                test_idx.push(m);
            }
        }
    }
    let faith = faithfulness(stack(&train_x, k).view(), &train_y, stack(&test_x, k).view(), &test_y)?;

    let mut sparsities = Vec::with_capacity(test_idx.len());
    for &m in &test_idx {
        sparsities.push(sparsity(inferred.originals[m].theta.view())?);
    }
    let sparsity_mean = sparsities.iter().sum::<f64>() / sparsities.len() as f64;

    let stability_mean = if test_idx.iter().all(|&m| inferred.twins[m].is_some()) {
        let mut total = 0.0;
        for &m in &test_idx {
            let twin = inferred.twins[m].as_ref().expect("checked above");
            total += stability(inferred.originals[m].theta.view(), twin.theta.view())?;
        }
        Some(total / test_idx.len() as f64)
    } else {
        warn!("some test images have no perturbed twin; stability not reported");
        None
    };

    Ok(MetricsReport {
        faithfulness: faith,
        stability: stability_mean,
        sparsity: sparsity_mean,
        parsimony: k,
        multilevel: vec!["dataset".into(), "image".into(), "patch".into()],
    })
}

/// Per-concept mass Σ_m Σ_j φ_mjk over a set of inferences.
pub fn concept_usage(inferred: &[Inference]) -> Array1<f64> {
    let k = inferred.first().map_or(0, |i| i.state.phi.ncols());
    let mut usage = Array1::zeros(k);
    for i in inferred {
        usage += &i.state.phi.sum_axis(Axis(0));
    }
    usage
}
