//! Synthetic data with known latent structure: an exact sampler of the
//! generative model and a Color-style dataset of flat-colored 2×2 images.
//!
//! Perturbed twins are produced in embedding space (Gaussian noise on every
//! patch plus attention jitter). No image augmentation takes place.

use ndarray::{Array1, Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PaceError, Result};
use crate::model::{ConceptBank, Dataset, HeadParams, ImageRecord, Split};
use crate::numkit::{softmax, SpdMatrix};

/// How perturbed twins are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbOptions {
    pub noise_sigma: f64,
    /// Relative attention jitter; each weight is scaled by U(1 − j, 1 + j).
    pub attention_jitter: f64,
}

impl Default for PerturbOptions {
    fn default() -> Self {
        PerturbOptions {
            noise_sigma: 0.0,
            attention_jitter: 0.1,
        }
    }
}

/// Latent variables behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub bank: Option<ConceptBank>,
    pub head: Option<HeadParams>,
    /// Per-image concept proportions.
    pub theta: Vec<Array1<f64>>,
    /// Per-patch concept (or palette color) index.
    pub z: Vec<Vec<usize>>,
    pub encoder: Option<Array2<f64>>,
}

/// Add isotropic noise to every embedding and jitter the attention weights.
///
/// The jittered weights are rescaled to the original total.
pub fn perturb(record: &ImageRecord, opts: PerturbOptions, rng: &mut impl Rng) -> Result<ImageRecord> {
    if !(opts.noise_sigma >= 0.0) || !(0.0..1.0).contains(&opts.attention_jitter) {
        return Err(PaceError::Domain("perturbation needs noise >= 0 and jitter in [0, 1)".into()));
    }
    let mut embeddings = record.embeddings.clone();
    if opts.noise_sigma > 0.0 {
        embeddings.mapv_inplace(|x| x + opts.noise_sigma * rng.sample::<f64, _>(StandardNormal));
    }
    let mut attentions = record.attentions.clone();
    if opts.attention_jitter > 0.0 {
        let total = attentions.sum();
        let j = opts.attention_jitter;
        attentions.mapv_inplace(|a| a * rng.random_range(1.0 - j..=1.0 + j));
        let new_total = attentions.sum();
        if new_total > 0.0 {
            attentions *= total / new_total;
        }
    }
    ImageRecord::new(format!("{}~p", record.id), embeddings, attentions, record.predicted_label)
}

/// θ ~ Dirichlet(α) by normalized Gamma draws.
pub fn sample_dirichlet(alpha: ArrayView1<f64>, rng: &mut impl Rng) -> Result<Array1<f64>> {
    let mut draws = Array1::zeros(alpha.len());
    for (d, &a) in draws.iter_mut().zip(alpha.iter()) {
        let g = Gamma::new(a, 1.0).map_err(|e| PaceError::Domain(format!("Gamma({a}, 1): {e}")))?;
        *d = g.sample(rng);
    }
    let total = draws.sum();
    if total > 0.0 {
        Ok(draws / total)
    } else {
        // every draw underflowed; fall back to a vertex chosen in proportion to α
        let pick = WeightedIndex::new(alpha.iter())
            .map_err(|e| PaceError::Domain(e.to_string()))?
            .sample(rng);
        let mut out = Array1::zeros(alpha.len());
        out[pick] = 1.0;
        Ok(out)
    }
}

/// Draw a label from softmax(H z̄).
pub fn sample_label(head: &HeadParams, zbar: ArrayView1<f64>, rng: &mut impl Rng) -> Result<usize> {
    let logits: Vec<f64> = head.eta.rows().into_iter().map(|eta| eta.dot(&zbar)).collect();
    let probs = softmax(&logits)?;
    Ok(WeightedIndex::new(&probs)
        .map_err(|e| PaceError::Domain(e.to_string()))?
        .sample(rng))
}

/// Number of training images under the 8:2 split.
pub fn train_count(m: usize) -> usize {
    (m * 4).div_ceil(5)
}

fn split_flags(m: usize) -> Vec<Split> {
    let t = train_count(m);
    (0..m).map(|i| if i < t { Split::Train } else { Split::Test }).collect()
}

/// Sample `m` images of `j` patches from the generative model defined by `bank` and `head`.
pub fn sample_generative(
    bank: &ConceptBank,
    head: &HeadParams,
    m: usize,
    j: usize,
    perturbation: Option<PerturbOptions>,
    rng: &mut impl Rng,
) -> Result<(Dataset, GroundTruth)> {
    let k = bank.num_concepts();
    let d = bank.dim();
    if head.num_concepts() != k {
        return Err(PaceError::Shape("heads and bank disagree on K".into()));
    }
    if j == 0 {
        return Err(PaceError::Domain("images need at least one patch".into()));
    }
    let factored = bank.factorize()?;
    let mut records = Vec::with_capacity(m);
    let mut thetas = Vec::with_capacity(m);
    let mut zs = Vec::with_capacity(m);
    for i in 0..m {
        let theta = sample_dirichlet(bank.alpha.view(), rng)?;
        let pick = WeightedIndex::new(theta.iter()).map_err(|e| PaceError::Domain(e.to_string()))?;
        let mut e = Array2::zeros((j, d));
        let mut z = Vec::with_capacity(j);
        let mut zbar = Array1::<f64>::zeros(k);
        for jj in 0..j {
            let kk = pick.sample(rng);
            let eps = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
            let draw = &bank.means.row(kk) + &factored.factors[kk].lower().dot(&eps);
            e.row_mut(jj).assign(&draw);
            z.push(kk);
            zbar[kk] += 1.0 / j as f64;
        }
        let label = sample_label(head, zbar.view(), rng)?;
        let mut record = ImageRecord::new(format!("img{i:05}"), e, Array1::from_elem(j, 1.0 / j as f64), label)?;
        if let Some(opts) = perturbation {
            let twin = perturb(&record, opts, rng)?;
            record = record.with_perturbed(twin)?;
        }
        records.push(record);
        thetas.push(theta);
        zs.push(z);
    }
    let dataset = Dataset::new(records, split_flags(m), head.num_classes())?;
    Ok((
        dataset,
        GroundTruth {
            bank: Some(bank.clone()),
            head: Some(head.clone()),
            theta: thetas,
            z: zs,
            encoder: None,
        },
    ))
}

/// A bank of `k` concepts in `d` dimensions whose means are pairwise at least
/// `separation · sigma` apart.
///
/// Each covariance is σ²((1 − s)·I + s·GGᵀ/d) with G standard normal, so its
/// mean eigenvalue is σ² in expectation; `shape_mix = s` controls anisotropy.
pub fn separated_bank(
    k: usize,
    d: usize,
    sigma: f64,
    separation: f64,
    shape_mix: f64,
    rng: &mut impl Rng,
) -> Result<ConceptBank> {
    if k == 0 || d == 0 || !(sigma > 0.0) || !(0.0..=1.0).contains(&shape_mix) {
        return Err(PaceError::Domain("separated_bank needs K, d >= 1, σ > 0, shape_mix in [0, 1]".into()));
    }
    let gap = separation * sigma;
    let mut means = Array2::zeros((k, d));
    if k <= d {
        // scaled basis vectors: every pair is exactly `gap` apart
        let c = gap / 2f64.sqrt();
        for kk in 0..k {
            means[[kk, kk]] = c;
        }
    } else {
        let spread = gap * k as f64;
        let mut placed = 0;
        while placed < k {
            let cand = Array1::from_shape_fn(d, |_| spread * rng.sample::<f64, _>(StandardNormal));
            let ok = (0..placed).all(|p| {
                let diff = &cand - &means.row(p);
                diff.dot(&diff).sqrt() >= gap
            });
            if ok {
                means.row_mut(placed).assign(&cand);
                placed += 1;
            }
        }
    }
    let mut covs = Vec::with_capacity(k);
    for _ in 0..k {
        let g = Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal));
        let mut c = g.dot(&g.t()) * (shape_mix / d as f64);
        for a in 0..d {
            c[[a, a]] += 1.0 - shape_mix;
        }
        c *= sigma * sigma;
        // exact symmetry for the SPD check
        let c = (&c + &c.t()) * 0.5;
        covs.push(SpdMatrix::new(c)?);
    }
    ConceptBank::new(means, covs, Array1::ones(k))
}

/// The five flat colors of the Color dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Palette {
    Red,
    Yellow,
    Green,
    Blue,
    Black,
}

impl Palette {
    pub const ALL: [Palette; 5] = [Palette::Red, Palette::Yellow, Palette::Green, Palette::Blue, Palette::Black];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Palette::Red => [1.0, 0.0, 0.0],
            Palette::Yellow => [1.0, 1.0, 0.0],
            Palette::Green => [0.0, 1.0, 0.0],
            Palette::Blue => [0.0, 0.0, 1.0],
            Palette::Black => [0.0, 0.0, 0.0],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Palette::Red => "red",
            Palette::Yellow => "yellow",
            Palette::Green => "green",
            Palette::Blue => "blue",
            Palette::Black => "black",
        }
    }

    /// Colors an image of `class` may contain.
    pub fn for_class(class: usize) -> [Palette; 3] {
        if class == 0 {
            [Palette::Red, Palette::Yellow, Palette::Black]
        } else {
            [Palette::Green, Palette::Blue, Palette::Black]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorOptions {
    /// Patches per image; must be S² with S even.
    pub j: usize,
    pub d: usize,
    /// Embedding noise σ around each encoded color.
    pub noise: f64,
    pub encoder_seed: u64,
    pub perturbation: PerturbOptions,
}

impl Default for ColorOptions {
    fn default() -> Self {
        ColorOptions {
            j: 16,
            d: 16,
            noise: 0.1,
            encoder_seed: 7,
            perturbation: PerturbOptions {
                noise_sigma: 0.01,
                attention_jitter: 0.1,
            },
        }
    }
}

/// The fixed linear map from RGB to embedding space (d × 3).
pub fn color_encoder(d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((d, 3), |_| rng.sample(StandardNormal))
}

pub fn encode_color(encoder: &Array2<f64>, color: Palette) -> Array1<f64> {
    encoder.dot(&Array1::from(color.rgb().to_vec()))
}

/// Palette color whose encoding is nearest to `embedding`.
pub fn decode_color(encoder: &Array2<f64>, embedding: ArrayView1<f64>) -> Palette {
    let mut best = Palette::Black;
    let mut best_dist = f64::INFINITY;
    for c in Palette::ALL {
        let diff = &encode_color(encoder, c) - &embedding;
        let dist = diff.dot(&diff);
        if dist < best_dist {
            best_dist = dist;
            best = c;
        }
    }
    best
}

/// `m` images, alternating classes, each a 2×2 grid of palette cells with at
/// least one colored cell; every cell covers J/4 patches.
pub fn make_color_dataset(m: usize, opts: ColorOptions, rng: &mut impl Rng) -> Result<(Dataset, GroundTruth)> {
    if m % 2 != 0 {
        return Err(PaceError::Domain(format!("Color dataset needs an even M, got {m}")));
    }
    let s = (opts.j as f64).sqrt().round() as usize;
    if s * s != opts.j || s % 2 != 0 || s == 0 {
        return Err(PaceError::Domain(format!("J = {} is not an even square", opts.j)));
    }
    if opts.d == 0 || !(opts.noise >= 0.0) {
        return Err(PaceError::Domain("Color dataset needs d >= 1 and noise >= 0".into()));
    }
    let encoder = color_encoder(opts.d, opts.encoder_seed);
    let codes: Vec<Array1<f64>> = Palette::ALL.iter().map(|c| encode_color(&encoder, *c)).collect();
    let half = s / 2;
    let mut records = Vec::with_capacity(m);
    let mut thetas = Vec::with_capacity(m);
    let mut zs = Vec::with_capacity(m);
    for i in 0..m {
        let class = i % 2;
        let choices = Palette::for_class(class);
        let cells = loop {
            let cells: [Palette; 4] = std::array::from_fn(|_| choices[rng.random_range(0..3)]);
            if cells.iter().any(|c| *c != Palette::Black) {
                break cells;
            }
        };
        let mut e = Array2::zeros((opts.j, opts.d));
        let mut z = Vec::with_capacity(opts.j);
        let mut theta = Array1::<f64>::zeros(Palette::ALL.len());
        for p in 0..opts.j {
            let (row, col) = (p / s, p % s);
            let color = cells[(row / half) * 2 + col / half];
            let noise = Array1::from_shape_fn(opts.d, |_| opts.noise * rng.sample::<f64, _>(StandardNormal));
            e.row_mut(p).assign(&(&codes[color.index()] + &noise));
            z.push(color.index());
            theta[color.index()] += 1.0 / opts.j as f64;
        }
        let mut record = ImageRecord::new(format!("color{i:05}"), e, Array1::from_elem(opts.j, 1.0 / opts.j as f64), class)?;
        let twin = perturb(&record, opts.perturbation, rng)?;
        record = record.with_perturbed(twin)?;
        records.push(record);
        thetas.push(theta);
        zs.push(z);
    }
    let dataset = Dataset::new(records, split_flags(m), 2)?;
    Ok((
        dataset,
        GroundTruth {
            bank: None,
            head: None,
            theta: thetas,
            z: zs,
            encoder: Some(encoder),
        },
    ))
}
