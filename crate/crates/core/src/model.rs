//! Domain types shared by inference, learning, evaluation and persistence.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{PaceError, Result};
use crate::numkit::{factor_regularized, ordered_sum, CholeskyFactor, SpdMatrix};

/// The dataset-level concepts: K Gaussians over embedding space plus the Dirichlet prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    /// K × d concept means.
    pub means: Array2<f64>,
    pub covs: Vec<SpdMatrix>,
    /// Dirichlet prior over image-level concept proportions.
    pub alpha: Array1<f64>,
}

impl ConceptBank {
    pub fn new(means: Array2<f64>, covs: Vec<SpdMatrix>, alpha: Array1<f64>) -> Result<Self> {
        let (k, d) = means.dim();
        if k == 0 || d == 0 {
            return Err(PaceError::Shape("concept bank needs K >= 1 and d >= 1".into()));
        }
        if covs.len() != k || alpha.len() != k {
            return Err(PaceError::Shape(format!(
                "concept bank has {k} means, {} covariances, {} prior weights",
                covs.len(),
                alpha.len()
            )));
        }
        if let Some((i, c)) = covs.iter().enumerate().find(|(_, c)| c.dim() != d) {
            return Err(PaceError::Shape(format!(
                "covariance {i} is {0}x{0}, expected {d}x{d}",
                c.dim()
            )));
        }
        if alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(PaceError::Domain("Dirichlet prior entries must be positive".into()));
        }
        if means.iter().any(|x| !x.is_finite()) {
            return Err(PaceError::Domain("concept means must be finite".into()));
        }
        Ok(ConceptBank { means, covs, alpha })
    }

    pub fn num_concepts(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Factor every covariance (with default jitter when needed).
    pub fn factorize(&self) -> Result<FactoredBank<'_>> {
        let factors = self
            .covs
            .iter()
            .enumerate()
            .map(|(k, c)| factor_regularized(c).map_err(|e| e.with_concept(k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(FactoredBank {
            bank: self,
            factors,
        })
    }

    /// Reorder concepts so that new concept `i` is old concept `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> ConceptBank {
        ConceptBank {
            means: self.means.select(Axis(0), perm),
            covs: perm.iter().map(|&p| self.covs[p].clone()).collect(),
            alpha: self.alpha.select(Axis(0), perm),
        }
    }
}

/// A concept bank together with the Cholesky factors of its covariances.
#[derive(Debug, Clone)]
pub struct FactoredBank<'a> {
    pub bank: &'a ConceptBank,
    pub factors: Vec<CholeskyFactor>,
}

impl FactoredBank<'_> {
    pub fn num_concepts(&self) -> usize {
        self.bank.num_concepts()
    }

    pub fn dim(&self) -> usize {
        self.bank.dim()
    }

    pub fn mean(&self, k: usize) -> ArrayView1<'_, f64> {
        self.bank.means.row(k)
    }
}

/// One image as seen by the explainer: patch embeddings, attention and the
/// classifier's predicted label.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// J × d patch embeddings.
    pub embeddings: Array2<f64>,
    /// Length-J CLS attention weights.
    pub attentions: Array1<f64>,
    pub predicted_label: usize,
    /// Perturbed twin of this image; carries the same predicted label.
    pub perturbed: Option<Box<ImageRecord>>,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        embeddings: Array2<f64>,
        attentions: Array1<f64>,
        predicted_label: usize,
    ) -> Result<Self> {
        let id = id.into();
        let (j, d) = embeddings.dim();
        if j == 0 || d == 0 {
            return Err(PaceError::Shape(format!(
                "record `{id}` needs at least one patch and one embedding dimension"
            )));
        }
        if attentions.len() != j {
            return Err(PaceError::Shape(format!(
                "record `{id}` has {j} patches but {} attention weights",
                attentions.len()
            )));
        }
        if embeddings.iter().any(|x| !x.is_finite()) {
            return Err(PaceError::Domain(format!("record `{id}` has non-finite embeddings")));
        }
        if attentions.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(PaceError::Domain(format!(
                "record `{id}` has negative or non-finite attention"
            )));
        }
        Ok(ImageRecord {
            id,
            embeddings,
            attentions,
            predicted_label,
            perturbed: None,
        })
    }

    /// Attach a perturbed twin. The twin must match in shape and label.
    pub fn with_perturbed(mut self, twin: ImageRecord) -> Result<Self> {
        if twin.embeddings.dim() != self.embeddings.dim() {
            return Err(PaceError::Shape(format!(
                "perturbed twin of `{}` differs in shape",
                self.id
            )));
        }
        if twin.predicted_label != self.predicted_label {
            return Err(PaceError::Domain(format!(
                "perturbed twin of `{}` has a different predicted label",
                self.id
            )));
        }
        self.perturbed = Some(Box::new(twin));
        Ok(self)
    }

    pub fn num_patches(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test")]
    Test,
}

/// A collection of records with a train/test split and a class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub splits: Vec<Split>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(records: Vec<ImageRecord>, splits: Vec<Split>, num_classes: usize) -> Result<Self> {
        if records.len() != splits.len() {
            return Err(PaceError::Shape(format!(
                "{} records but {} split flags",
                records.len(),
                splits.len()
            )));
        }
        if num_classes == 0 {
            return Err(PaceError::Domain("dataset needs at least one class".into()));
        }
        if let Some(first) = records.first() {
            let (j, d) = first.embeddings.dim();
            for r in &records {
                if r.embeddings.dim() != (j, d) {
                    return Err(PaceError::Shape(format!(
                        "record `{}` is {:?}, expected {:?}",
                        r.id,
                        r.embeddings.dim(),
                        (j, d)
                    )));
                }
                if r.predicted_label >= num_classes {
                    return Err(PaceError::Domain(format!(
                        "record `{}` has label {} but N = {num_classes}",
                        r.id, r.predicted_label
                    )));
                }
            }
        }
        Ok(Dataset {
            records,
            splits,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(ImageRecord::dim)
    }

    pub fn num_patches(&self) -> Option<usize> {
        self.records.first().map(ImageRecord::num_patches)
    }

    pub fn has_perturbed(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.perturbed.is_some())
    }

    pub fn split_records(&self, split: Split) -> Vec<&ImageRecord> {
        self.records
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(r, _)| r)
            .collect()
    }
}

/// Per-image variational parameters: Dirichlet γ and patch responsibilities φ.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub gamma: Array1<f64>,
    /// J × K, each row on the simplex.
    pub phi: Array2<f64>,
}

impl VariationalState {
    /// φ uniform, γ = α + (Σ counts)/K.
    pub fn initial(alpha: ArrayView1<f64>, counts: ArrayView1<f64>) -> Self {
        let k = alpha.len();
        let mass = counts.sum() / k as f64;
        VariationalState {
            gamma: alpha.mapv(|a| a + mass),
            phi: Array2::from_elem((counts.len(), k), 1.0 / k as f64),
        }
    }

    /// φ̄ = (1/J) Σ_j φ_j.
    pub fn phi_bar(&self) -> Array1<f64> {
        self.phi
            .mean_axis(Axis(0))
            .expect("variational state has at least one patch")
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.len() != self.phi.ncols() {
            return Err(PaceError::Shape("gamma and phi disagree on K".into()));
        }
        if self.gamma.iter().any(|g| !(*g > 0.0)) {
            return Err(PaceError::Domain("gamma entries must be positive".into()));
        }
        for (j, row) in self.phi.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < 0.0) {
                return Err(PaceError::Domain(format!("phi row {j} is not on the simplex")));
            }
        }
        Ok(())
    }
}

/// Classifier head H (one weight vector per class) and the stability vector β.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// N × K; row n is η_n.
    pub eta: Array2<f64>,
    pub beta: Array1<f64>,
}

impl HeadParams {
    pub fn zeros(num_classes: usize, num_concepts: usize) -> Self {
        HeadParams {
            eta: Array2::zeros((num_classes, num_concepts)),
            beta: Array1::zeros(num_concepts),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.eta.nrows()
    }

    pub fn num_concepts(&self) -> usize {
        self.beta.len()
    }

    pub fn is_finite(&self) -> bool {
        self.eta.iter().chain(self.beta.iter()).all(|x| x.is_finite())
    }

    /// Project onto −1 ≤ η ≤ 1, 0 ≤ β ≤ 1.
    pub fn clip_to_bounds(&mut self) {
        self.eta.mapv_inplace(|x| x.clamp(-1.0, 1.0));
        self.beta.mapv_inplace(|x| x.clamp(0.0, 1.0));
    }

    pub fn permuted(&self, perm: &[usize]) -> HeadParams {
        HeadParams {
            eta: self.eta.select(Axis(1), perm),
            beta: self.beta.select(Axis(0), perm),
        }
    }
}

/// How attention weights become per-patch evidence counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Rescale so the counts sum to J.
    #[default]
    SumToJ,
    Raw,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceKind {
    #[default]
    Full,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub epochs: usize,
    pub attention: AttentionMode,
    pub head_learning_rate: f64,
    /// Adam steps on the heads per epoch.
    pub head_steps_per_epoch: usize,
    pub negatives_per_image: usize,
    pub inference_max_iters: usize,
    pub inference_rel_tol: f64,
    /// Alternating φ/γ sweeps per image per training epoch.
    pub sweeps_per_epoch: usize,
    pub constraint_mode: bool,
    /// Whether the classifier and stability heads take part in the E-step and are trained.
    pub use_heads: bool,
    /// Include perturbed twins in the μ/Σ updates.
    pub mstep_includes_perturbed: bool,
    pub covariance: CovarianceKind,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 8,
            epochs: 30,
            attention: AttentionMode::SumToJ,
            head_learning_rate: 0.01,
            head_steps_per_epoch: 5,
            negatives_per_image: 32,
            inference_max_iters: 100,
            inference_rel_tol: 1e-5,
            sweeps_per_epoch: 1,
            constraint_mode: false,
            use_heads: true,
            mstep_includes_perturbed: false,
            covariance: CovarianceKind::Full,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(PaceError::Config("K must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(PaceError::Config("epochs must be at least 1".into()));
        }
        if !(self.head_learning_rate > 0.0) {
            return Err(PaceError::Config("head learning rate must be positive".into()));
        }
        if !(self.inference_rel_tol > 0.0) {
            return Err(PaceError::Config("inference tolerance must be positive".into()));
        }
        if self.inference_max_iters == 0 || self.sweeps_per_epoch == 0 {
            return Err(PaceError::Config(
                "inference iterations and sweeps per epoch must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Image-level explanation: the Dirichlet mean γ / Σγ.
pub fn theta_from_gamma(gamma: ArrayView1<f64>) -> Result<Array1<f64>> {
    if gamma.is_empty() {
        return Err(PaceError::Domain("gamma is empty".into()));
    }
    if gamma.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
        return Err(PaceError::Domain("gamma entries must be positive".into()));
    }
    let total = ordered_sum(gamma.iter().copied());
    Ok(gamma.mapv(|g| g / total))
}

/// Per-patch evidence counts derived from attention.
pub fn effective_counts(record: &ImageRecord, mode: AttentionMode) -> Result<Array1<f64>> {
    let j = record.num_patches();
    match mode {
        AttentionMode::Raw => Ok(record.attentions.clone()),
        AttentionMode::Uniform => Ok(Array1::ones(j)),
        AttentionMode::SumToJ => {
            let total = record.attentions.sum();
            if !(total > 0.0) {
                return Err(PaceError::DegenerateAttention {
                    record: record.id.clone(),
                });
            }
            let scale = j as f64 / total;
            Ok(record.attentions.mapv(|a| a * scale))
        }
    }
}
