//! Dataset-level learning: weighted-moment updates for the concept bank,
//! Adam on the classifier/stability heads, and the epoch loop tying them to
//! the per-image E-step.

use log::{info, warn};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{PaceError, Result};
use crate::inference::{elbo_e_from_loglik, elbo_f, elbo_s, log_likelihoods, sweep, HeadTerms};
use crate::model::{
    effective_counts, ConceptBank, CovarianceKind, Dataset, HeadParams, ImageRecord, Split,
    TrainConfig, VariationalState,
};
use crate::numkit::{ordered_dot, regularize, softmax, SpdMatrix};

/// Responsibility mass below which a concept is treated as dead.
pub const DEAD_MASS: f64 = 1e-8;

const KMEANS_SUBSAMPLE: usize = 10_000;
const LLOYD_ITERS: usize = 10;
const KMEANS_RESTARTS: usize = 4;

/// One image's contribution to the M-step.
#[derive(Debug, Clone, Copy)]
pub struct Evidence<'a> {
    pub embeddings: ArrayView2<'a, f64>,
    pub phi: ArrayView2<'a, f64>,
    pub counts: ArrayView1<'a, f64>,
}

/// Σ_{m,j} φ_mjk c_mj.
pub fn concept_mass(evidence: &[Evidence], k: usize) -> f64 {
    let mut mass = 0.0;
    for ev in evidence {
        for (j, c) in ev.counts.iter().enumerate() {
            mass += ev.phi[[j, k]] * c;
        }
    }
    mass
}

/// Responsibility-weighted mean of the embeddings for concept `k`.
pub fn update_mu(evidence: &[Evidence], k: usize) -> Result<Array1<f64>> {
    let d = evidence
        .first()
        .map(|e| e.embeddings.ncols())
        .ok_or_else(|| PaceError::Domain("M-step needs at least one image".into()))?;
    let mass = concept_mass(evidence, k);
    if !(mass > DEAD_MASS) {
        return Err(PaceError::DeadConcept(k));
    }
    let mut mu = Array1::zeros(d);
    for ev in evidence {
        for (j, e) in ev.embeddings.rows().into_iter().enumerate() {
            mu.scaled_add(ev.phi[[j, k]] * ev.counts[j], &e);
        }
    }
    Ok(mu / mass)
}

/// Responsibility-weighted scatter about `mu`, jitter-regularized when singular.
pub fn update_sigma(
    evidence: &[Evidence],
    mu: ArrayView1<f64>,
    k: usize,
    kind: CovarianceKind,
) -> Result<SpdMatrix> {
    let d = mu.len();
    let mass = concept_mass(evidence, k);
    if !(mass > DEAD_MASS) {
        return Err(PaceError::DeadConcept(k));
    }
    let mut scatter = Array2::<f64>::zeros((d, d));
    let mut diff = Array1::<f64>::zeros(d);
    for ev in evidence {
        for (j, e) in ev.embeddings.rows().into_iter().enumerate() {
            let w = ev.phi[[j, k]] * ev.counts[j];
            if w == 0.0 {
                continue;
            }
            diff.assign(&e);
            diff -= &mu;
            for a in 0..d {
                let wa = w * diff[a];
                for b in 0..=a {
                    scatter[[a, b]] += wa * diff[b];
                }
            }
        }
    }
    symmetric_from_lower(&mut scatter);
    scatter /= mass;
    finish_covariance(scatter, kind).map_err(|e| e.with_concept(k))
}

fn symmetric_from_lower(m: &mut Array2<f64>) {
    let d = m.nrows();
    for a in 0..d {
        for b in 0..a {
            m[[b, a]] = m[[a, b]];
        }
    }
}

fn finish_covariance(mut cov: Array2<f64>, kind: CovarianceKind) -> Result<SpdMatrix> {
    if kind == CovarianceKind::Diagonal {
        let diag = cov.diag().to_owned();
        cov.fill(0.0);
        cov.diag_mut().assign(&diag);
    }
    Ok(regularize(SpdMatrix::new(cov)?)?.0)
}

/// Unweighted covariance of every patch in `records`.
pub fn pooled_covariance(records: &[&ImageRecord], kind: CovarianceKind) -> Result<SpdMatrix> {
    let d = records
        .first()
        .map(|r| r.dim())
        .ok_or_else(|| PaceError::Domain("no records to pool".into()))?;
    let n: usize = records.iter().map(|r| r.num_patches()).sum();
    let mut mean = Array1::<f64>::zeros(d);
    for r in records {
        mean += &r.embeddings.sum_axis(Axis(0));
    }
    mean /= n as f64;
    let mut scatter = Array2::<f64>::zeros((d, d));
    for r in records {
        let centered = &r.embeddings - &mean;
        scatter += &centered.t().dot(&centered);
    }
    scatter /= n as f64;
    finish_covariance(scatter, kind)
}

/// What the head objective sees of one image: φ̄, its label, its twin's φ̄ and the negatives.
#[derive(Debug, Clone)]
pub struct HeadSample {
    pub phi_bar: Array1<f64>,
    pub label: usize,
    pub perturbed_phi_bar: Option<Array1<f64>>,
    pub negatives: Vec<Array1<f64>>,
}

/// Σ_m (L_f + L_s) at fixed φ̄ values.
pub fn head_objective(samples: &[HeadSample], head: &HeadParams) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += elbo_f(s.phi_bar.view(), s.label, head)?;
        if let (Some(twin), false) = (&s.perturbed_phi_bar, s.negatives.is_empty()) {
            total += elbo_s(s.phi_bar.view(), twin.view(), &s.negatives, head.beta.view())?;
        }
    }
    Ok(total)
}

/// Analytic gradients of [`head_objective`] with respect to η and β, packed as a `HeadParams`.
pub fn head_gradients(samples: &[HeadSample], head: &HeadParams) -> Result<HeadParams> {
    let n = head.num_classes();
    let k = head.num_concepts();
    let mut grad = HeadParams::zeros(n, k);
    for s in samples {
        if s.label >= n {
            return Err(PaceError::Shape(format!("label {} out of range for {n} classes", s.label)));
        }
        let logits: Vec<f64> = head
            .eta
            .rows()
            .into_iter()
            .map(|eta| ordered_dot(eta, s.phi_bar.view()))
            .collect();
        let probs = softmax(&logits)?;
        for (class, p) in probs.iter().enumerate() {
            let target = if class == s.label { 1.0 } else { 0.0 };
            grad.eta.row_mut(class).scaled_add(target - p, &s.phi_bar);
        }

        if let (Some(twin), false) = (&s.perturbed_phi_bar, s.negatives.is_empty()) {
            let logits: Vec<f64> = s
                .negatives
                .iter()
                .map(|f| ordered_sum_product(head.beta.view(), s.phi_bar.view(), f.view()))
                .collect();
            let weights = softmax(&logits)?;
            for kk in 0..k {
                let expected: f64 = weights.iter().zip(&s.negatives).map(|(w, f)| w * f[kk]).sum();
                grad.beta[kk] += s.phi_bar[kk] * (twin[kk] - expected);
            }
        }
    }
    Ok(grad)
}

fn ordered_sum_product(a: ArrayView1<f64>, b: ArrayView1<f64>, c: ArrayView1<f64>) -> f64 {
    crate::numkit::ordered_sum((0..a.len()).map(|i| a[i] * b[i] * c[i]))
}

/// Adam moment estimates for the heads.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: HeadParams,
    v: HeadParams,
    t: i32,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(num_classes: usize, num_concepts: usize) -> Self {
        AdamState {
            m: HeadParams::zeros(num_classes, num_concepts),
            v: HeadParams::zeros(num_classes, num_concepts),
            t: 0,
        }
    }
}

/// One Adam ascent step on the heads; clips to the bounded region in constraint mode.
pub fn step_heads(
    head: &mut HeadParams,
    grad: &HeadParams,
    adam: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if !grad.is_finite() {
        return Err(PaceError::Numerical {
            iteration: adam.t as usize,
            detail: "non-finite head gradient".into(),
        });
    }
    adam.t += 1;
    let c1 = 1.0 - ADAM_B1.powi(adam.t);
    let c2 = 1.0 - ADAM_B2.powi(adam.t);
    let lr = config.head_learning_rate;
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * g;
        *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * g * g;
        *p += lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    };
    ndarray::Zip::from(&mut head.eta)
        .and(&grad.eta)
        .and(&mut adam.m.eta)
        .and(&mut adam.v.eta)
        .for_each(|p, &g, m, v| update(p, g, m, v));
    ndarray::Zip::from(&mut head.beta)
        .and(&grad.beta)
        .and(&mut adam.m.beta)
        .and(&mut adam.v.beta)
        .for_each(|p, &g, m, v| update(p, g, m, v));
    if config.constraint_mode {
        head.clip_to_bounds();
    }
    if !head.is_finite() {
        return Err(PaceError::Numerical {
            iteration: adam.t as usize,
            detail: "head parameters became non-finite".into(),
        });
    }
    Ok(())
}

/// Greedy k-means++ seeding followed by Lloyd iterations on the rows of `points`.
///
/// Each new center is the best of `2 + ln K` candidates drawn by D² sampling.
/// Returns the centers and their final inertia (sum of squared distances).
pub fn kmeans_pp(
    points: ArrayView2<f64>,
    k: usize,
    iters: usize,
    rng: &mut impl Rng,
) -> Result<(Array2<f64>, f64)> {
    let (n, d) = points.dim();
    if n == 0 || k == 0 {
        return Err(PaceError::Domain("k-means needs points and K >= 1".into()));
    }
    let sq = |a: ArrayView1<f64>, b: ArrayView1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let trials = 2 + (k as f64).ln() as usize;
    let mut centers = Array2::zeros((k, d));
    centers.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq(points.row(i), centers.row(0))).collect();
    for c in 1..k {
        let dist = WeightedIndex::new(&nearest).ok();
        let mut best: Option<(f64, Vec<f64>, usize)> = None;
        for _ in 0..trials {
            let cand = match &dist {
                Some(dist) => dist.sample(rng),
                // every point already coincides with a center
                None => rng.random_range(0..n),
            };
            let updated: Vec<f64> = (0..n)
                .map(|i| nearest[i].min(sq(points.row(i), points.row(cand))))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, updated, cand));
            }
        }
        let (_, updated, pick) = best.expect("at least one trial");
        centers.row_mut(c).assign(&points.row(pick));
        nearest = updated;
    }

    let mut assign = vec![0usize; n];
    let mut inertia = 0.0;
    for iter in 0..=iters {
        inertia = 0.0;
        for (i, a) in assign.iter_mut().enumerate() {
            let p = points.row(i);
            let mut best = f64::INFINITY;
            for c in 0..k {
                let dist = sq(p, centers.row(c));
                if dist < best {
                    best = dist;
                    *a = c;
                }
            }
            inertia += best;
        }
        if iter == iters {
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut sizes = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            sums.row_mut(a).scaled_add(1.0, &points.row(i));
            sizes[a] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / sizes[c] as f64));
            }
        }
    }
    Ok((centers, inertia))
}

/// Initial bank: best of several k-means++ runs for the means, pooled covariance, α = 1/K.
pub fn initial_bank(records: &[&ImageRecord], config: &TrainConfig) -> Result<ConceptBank> {
    let d = records
        .first()
        .map(|r| r.dim())
        .ok_or_else(|| PaceError::Domain("cannot initialize from an empty dataset".into()))?;
    let total: usize = records.iter().map(|r| r.num_patches()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let picks: Vec<usize> = if total > KMEANS_SUBSAMPLE {
        let mut v = index::sample(&mut rng, total, KMEANS_SUBSAMPLE).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..total).collect()
    };
    let mut pool = Array2::zeros((picks.len(), d));
    let mut cursor = 0;
    let mut offset = 0;
    for r in records {
        let j = r.num_patches();
        while cursor < picks.len() && picks[cursor] < offset + j {
            pool.row_mut(cursor).assign(&r.embeddings.row(picks[cursor] - offset));
            cursor += 1;
        }
        offset += j;
    }
    let mut best: Option<(Array2<f64>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = kmeans_pp(pool.view(), config.k, LLOYD_ITERS, &mut rng)?;
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    let means = best.expect("at least one restart").0;
    let cov = pooled_covariance(records, config.covariance)?;
    ConceptBank::new(
        means,
        vec![cov; config.k],
        Array1::from_elem(config.k, 1.0 / config.k as f64),
    )
}

/// Per-epoch ELBO terms summed over the training images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub elbo_e: f64,
    pub elbo_f: f64,
    pub elbo_s: f64,
}

impl EpochStats {
    pub fn elbo(&self) -> f64 {
        self.elbo_e + self.elbo_f + self.elbo_s
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub bank: ConceptBank,
    pub head: HeadParams,
    pub trace: Vec<EpochStats>,
    /// Final variational state of each training image, in input order.
    pub states: Vec<VariationalState>,
}

/// Train on the training split of `dataset`.
pub fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<FitResult> {
    let records = dataset.split_records(Split::Train);
    fit_records(&records, dataset.num_classes, config)
}

/// Train on `records` with the default initialization.
pub fn fit_records(records: &[&ImageRecord], num_classes: usize, config: &TrainConfig) -> Result<FitResult> {
    config.validate()?;
    let bank = initial_bank(records, config)?;
    let head = HeadParams::zeros(num_classes, config.k);
    fit_from(records, bank, head, config)
}

/// Per-image working set carried across epochs.
struct ImageSlot {
    counts: Array1<f64>,
    loglik: Array2<f64>,
    state: VariationalState,
    twin: Option<TwinSlot>,
}

struct TwinSlot {
    counts: Array1<f64>,
    loglik: Array2<f64>,
    state: VariationalState,
}

/// Train starting from an explicit bank and heads.
pub fn fit_from(
    records: &[&ImageRecord],
    mut bank: ConceptBank,
    mut head: HeadParams,
    config: &TrainConfig,
) -> Result<FitResult> {
    config.validate()?;
    if records.is_empty() {
        return Err(PaceError::Domain("training set is empty".into()));
    }
    let k = bank.num_concepts();
    if head.num_concepts() != k {
        return Err(PaceError::Shape("heads and bank disagree on K".into()));
    }
    let d = bank.dim();
    if let Some(r) = records.iter().find(|r| r.dim() != d) {
        return Err(PaceError::Shape(format!("record `{}` has d = {}, bank has {d}", r.id, r.dim())));
    }
    let twins_in_mstep = config.mstep_includes_perturbed;
    let fallback_cov = pooled_covariance(records, config.covariance)?;

    let mut slots = {
        let factored = bank.factorize()?;
        records
            .par_iter()
            .map(|r| -> Result<ImageSlot> {
                let counts = effective_counts(r, config.attention)?;
                let loglik = log_likelihoods(r, &factored)?;
                let state = VariationalState::initial(bank.alpha.view(), counts.view());
                let twin = match &r.perturbed {
                    Some(p) => {
                        let counts = effective_counts(p, config.attention)?;
                        let loglik = log_likelihoods(p, &factored)?;
                        let state = VariationalState::initial(bank.alpha.view(), counts.view());
                        Some(TwinSlot { counts, loglik, state })
                    }
                    None => None,
                };
                Ok(ImageSlot { counts, loglik, state, twin })
            })
            .collect::<Result<Vec<_>>>()?
    };

    let mut adam = AdamState::new(head.num_classes(), k);
    let mut trace = Vec::with_capacity(config.epochs);
    let m_total = records.len();

    for epoch in 0..config.epochs {
        // snapshots read by every image during this pass
        let anchors: Vec<Array1<f64>> = slots.iter().map(|s| s.state.phi_bar()).collect();
        let twin_anchors: Vec<Option<Array1<f64>>> = slots
            .iter()
            .map(|s| s.twin.as_ref().map(|t| t.state.phi_bar()))
            .collect();
        let negatives: Vec<Vec<usize>> = (0..m_total)
            .map(|m| sample_negatives(config, epoch, m, m_total))
            .collect();

        let alpha = bank.alpha.view();
        let head_ref = &head;
        slots
            .par_iter_mut()
            .enumerate()
            .map(|(m, slot)| -> Result<()> {
                let label = records[m].predicted_label;
                let neg: Vec<Array1<f64>> = match twin_anchors[m] {
                    Some(_) => negatives[m].iter().map(|&f| anchors[f].clone()).collect(),
                    None => Vec::new(),
                };
                let terms = HeadTerms {
                    head: head_ref,
                    perturbed_phi_bar: twin_anchors[m].as_ref().map(|t| t.view()),
                    negatives: &neg,
                };
                let twin_terms = HeadTerms {
                    head: head_ref,
                    perturbed_phi_bar: None,
                    negatives: &[],
                };
                for _ in 0..config.sweeps_per_epoch {
                    let heads = config.use_heads.then_some(&terms);
                    sweep(slot.loglik.view(), &mut slot.state, alpha, slot.counts.view(), label, heads)?;
                    if let Some(t) = slot.twin.as_mut() {
                        let heads = config.use_heads.then_some(&twin_terms);
                        sweep(t.loglik.view(), &mut t.state, alpha, t.counts.view(), label, heads)?;
                    }
                }
                Ok(())
            })
            .collect::<Result<Vec<()>>>()?;

        // M-step in a fixed order so results do not depend on scheduling
        let mut evidence: Vec<Evidence> = Vec::with_capacity(m_total * 2);
        for (r, s) in records.iter().zip(&slots) {
            evidence.push(Evidence {
                embeddings: r.embeddings.view(),
                phi: s.state.phi.view(),
                counts: s.counts.view(),
            });
            if twins_in_mstep {
                if let (Some(p), Some(t)) = (&r.perturbed, &s.twin) {
                    evidence.push(Evidence {
                        embeddings: p.embeddings.view(),
                        phi: t.state.phi.view(),
                        counts: t.counts.view(),
                    });
                }
            }
        }
        let mut means = bank.means.clone();
        let mut covs = bank.covs.clone();
        let mut reseeded: Vec<usize> = Vec::new();
        for kk in 0..k {
            match update_mu(&evidence, kk) {
                Ok(mu) => {
                    covs[kk] = update_sigma(&evidence, mu.view(), kk, config.covariance)?;
                    means.row_mut(kk).assign(&mu);
                }
                Err(PaceError::DeadConcept(_)) => {
                    let (m, j) = worst_explained_patch(&slots, &reseeded);
                    warn!("epoch {epoch}: concept {kk} lost all responsibility, re-seeding at patch {j} of `{}`", records[m].id);
                    means.row_mut(kk).assign(&records[m].embeddings.row(j));
                    covs[kk] = fallback_cov.clone();
                    reseeded.push(m * records[m].num_patches() + j);
                }
                Err(e) => return Err(e),
            }
        }
        drop(evidence);
        bank = ConceptBank::new(means, covs, bank.alpha.clone())?;

        {
            let factored = bank.factorize()?;
            slots
                .par_iter_mut()
                .enumerate()
                .map(|(m, slot)| -> Result<()> {
                    slot.loglik = log_likelihoods(records[m], &factored)?;
                    if let (Some(p), Some(t)) = (&records[m].perturbed, slot.twin.as_mut()) {
                        t.loglik = log_likelihoods(p, &factored)?;
                    }
                    Ok(())
                })
                .collect::<Result<Vec<()>>>()?;
        }

        let samples: Vec<HeadSample> = slots
            .iter()
            .enumerate()
            .map(|(m, s)| {
                let twin = s.twin.as_ref().map(|t| t.state.phi_bar());
                let negs = match twin {
                    Some(_) => negatives[m].iter().map(|&f| slots[f].state.phi_bar()).collect(),
                    None => Vec::new(),
                };
                HeadSample {
                    phi_bar: s.state.phi_bar(),
                    label: records[m].predicted_label,
                    perturbed_phi_bar: twin,
                    negatives: negs,
                }
            })
            .collect();
        if config.use_heads {
            for _ in 0..config.head_steps_per_epoch {
                let grad = head_gradients(&samples, &head)?;
                step_heads(&mut head, &grad, &mut adam, config)?;
            }
        }

        let mut stats = EpochStats {
            epoch,
            elbo_e: 0.0,
            elbo_f: 0.0,
            elbo_s: 0.0,
        };
        for (slot, sample) in slots.iter().zip(&samples) {
            stats.elbo_e += elbo_e_from_loglik(slot.loglik.view(), &slot.state, bank.alpha.view(), slot.counts.view())?;
            if config.use_heads {
                stats.elbo_f += elbo_f(sample.phi_bar.view(), sample.label, &head)?;
                if let (Some(twin), false) = (&sample.perturbed_phi_bar, sample.negatives.is_empty()) {
                    stats.elbo_s += elbo_s(sample.phi_bar.view(), twin.view(), &sample.negatives, head.beta.view())?;
                }
            }
        }
        if !stats.elbo().is_finite() {
            return Err(PaceError::Numerical {
                iteration: epoch,
                detail: format!("training ELBO is {}", stats.elbo()),
            });
        }
        info!(
            "epoch {epoch}: elbo {:.6} (L_e {:.6}, L_f {:.6}, L_s {:.6})",
            stats.elbo(),
            stats.elbo_e,
            stats.elbo_f,
            stats.elbo_s
        );
        trace.push(stats);
    }

    Ok(FitResult {
        bank,
        head,
        trace,
        states: slots.into_iter().map(|s| s.state).collect(),
    })
}

/// Up to `negatives_per_image` distinct other images, reproducible from (seed, epoch, m).
fn sample_negatives(config: &TrainConfig, epoch: usize, m: usize, total: usize) -> Vec<usize> {
    let others = total - 1;
    let amount = config.negatives_per_image.min(others);
    if amount == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(((epoch as u64) << 32) | m as u64);
    index::sample(&mut rng, others, amount)
        .into_iter()
        .map(|i| if i >= m { i + 1 } else { i })
        .collect()
}

/// Patch whose best concept explains it least, skipping ones already used for re-seeding.
fn worst_explained_patch(slots: &[ImageSlot], used: &[usize]) -> (usize, usize) {
    let mut worst = (0, 0);
    let mut worst_score = f64::INFINITY;
    for (m, s) in slots.iter().enumerate() {
        let j_total = s.loglik.nrows();
        for (j, row) in s.loglik.rows().into_iter().enumerate() {
            if used.contains(&(m * j_total + j)) {
                continue;
            }
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if best < worst_score {
                worst_score = best;
                worst = (m, j);
            }
        }
    }
    worst
}
