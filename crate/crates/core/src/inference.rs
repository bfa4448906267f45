//! Per-image variational E-step: the three ELBO terms and the closed-form
//! coordinate updates for the patch responsibilities φ and Dirichlet parameters γ.
//!
//! Attention enters as a per-patch evidence count `c_j`. A patch with count
//! `c_j` behaves like `c_j` copies sharing one responsibility row, so both the
//! concept-assignment prior and the Gaussian likelihood of that patch are
//! weighted by `c_j`, while its categorical entropy is counted once. The φ and
//! γ updates below are the exact coordinate maximizers of that objective; with
//! unit counts they reduce to the textbook mean-field updates.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{PaceError, Result};
use crate::model::{
    effective_counts, theta_from_gamma, ConceptBank, FactoredBank, HeadParams, ImageRecord,
    TrainConfig, VariationalState,
};
use crate::numkit::{digamma, ln_gamma, log_gaussian, log_sum_exp, ordered_dot, ordered_sum, softmax};

/// `log N(e_j | μ_k, Σ_k)` for every patch and concept (J × K).
pub fn log_likelihoods(record: &ImageRecord, bank: &FactoredBank) -> Result<Array2<f64>> {
    if record.dim() != bank.dim() {
        return Err(PaceError::Shape(format!(
            "record `{}` has d = {}, concept bank has d = {}",
            record.id,
            record.dim(),
            bank.dim()
        )));
    }
    let j = record.num_patches();
    let k = bank.num_concepts();
    let mut out = Array2::zeros((j, k));
    for (jj, e) in record.embeddings.rows().into_iter().enumerate() {
        for kk in 0..k {
            out[[jj, kk]] = log_gaussian(e, bank.mean(kk), &bank.factors[kk])?;
        }
    }
    Ok(out)
}

/// E_q[log θ_k] = Ψ(γ_k) − Ψ(Σγ).
fn expected_log_theta(gamma: ArrayView1<f64>) -> Result<Array1<f64>> {
    let total = digamma(ordered_sum(gamma.iter().copied()))?;
    gamma.iter().map(|g| Ok(digamma(*g)? - total)).collect()
}

fn check_state(state: &VariationalState, j: usize, k: usize) -> Result<()> {
    if state.phi.dim() != (j, k) || state.gamma.len() != k {
        return Err(PaceError::Shape(format!(
            "variational state is {:?} / {}, expected ({j}, {k}) / {k}",
            state.phi.dim(),
            state.gamma.len()
        )));
    }
    Ok(())
}

/// The embedding term L_e of the ELBO for one image.
pub fn elbo_e(
    record: &ImageRecord,
    state: &VariationalState,
    bank: &FactoredBank,
    counts: ArrayView1<f64>,
) -> Result<f64> {
    let loglik = log_likelihoods(record, bank)?;
    elbo_e_from_loglik(loglik.view(), state, bank.bank.alpha.view(), counts)
}

/// L_e given precomputed patch log-likelihoods.
pub fn elbo_e_from_loglik(
    loglik: ArrayView2<f64>,
    state: &VariationalState,
    alpha: ArrayView1<f64>,
    counts: ArrayView1<f64>,
) -> Result<f64> {
    let (j, k) = loglik.dim();
    check_state(state, j, k)?;
    if alpha.len() != k || counts.len() != j {
        return Err(PaceError::Shape("alpha or counts length mismatch".into()));
    }
    let gamma = state.gamma.view();
    let elog = expected_log_theta(gamma)?;

    // E[log p(θ | α)]
    let alpha_sum = ordered_sum(alpha.iter().copied());
    let mut prior_terms = Vec::with_capacity(k);
    for kk in 0..k {
        prior_terms.push((alpha[kk] - 1.0) * elog[kk] - ln_gamma(alpha[kk])?);
    }
    let prior = ln_gamma(alpha_sum)? + ordered_sum(prior_terms);

    // −E[log q(θ | γ)]
    let gamma_sum = ordered_sum(gamma.iter().copied());
    let mut ent_terms = Vec::with_capacity(k);
    for kk in 0..k {
        ent_terms.push(ln_gamma(gamma[kk])? - (gamma[kk] - 1.0) * elog[kk]);
    }
    let theta_entropy = ordered_sum(ent_terms) - ln_gamma(gamma_sum)?;

    let mut patches = 0.0;
    for jj in 0..j {
        let c = counts[jj];
        let row = state.phi.row(jj);
        let weighted = ordered_sum((0..k).map(|kk| row[kk] * (elog[kk] + loglik[[jj, kk]])));
        let entropy = -ordered_sum(
            row.iter()
                .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }),
        );
        patches += c * weighted + entropy;
    }
    Ok(prior + theta_entropy + patches)
}

/// The faithfulness term L_f: log-softmax likelihood of the predicted label given φ̄.
pub fn elbo_f(phi_bar: ArrayView1<f64>, label: usize, head: &HeadParams) -> Result<f64> {
    if label >= head.num_classes() {
        return Err(PaceError::Shape(format!(
            "label {label} out of range for {} classes",
            head.num_classes()
        )));
    }
    if phi_bar.len() != head.num_concepts() {
        return Err(PaceError::Shape("phi_bar and head disagree on K".into()));
    }
    let logits: Vec<f64> = head
        .eta
        .rows()
        .into_iter()
        .map(|eta| ordered_dot(eta, phi_bar))
        .collect();
    Ok(logits[label] - log_sum_exp(&logits)?)
}

fn stability_logit(beta: ArrayView1<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    ordered_sum((0..beta.len()).map(|k| beta[k] * a[k] * b[k]))
}

/// The stability term L_s: contrastive log-likelihood that the perturbed twin
/// scores higher than the negatives.
pub fn elbo_s(
    anchor: ArrayView1<f64>,
    perturbed: ArrayView1<f64>,
    negatives: &[Array1<f64>],
    beta: ArrayView1<f64>,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(PaceError::Domain("stability term needs at least one negative".into()));
    }
    let k = beta.len();
    if anchor.len() != k || perturbed.len() != k || negatives.iter().any(|n| n.len() != k) {
        return Err(PaceError::Shape("stability term inputs disagree on K".into()));
    }
    let positive = stability_logit(beta, anchor, perturbed);
    let logits: Vec<f64> = negatives
        .iter()
        .map(|f| stability_logit(beta, anchor, f.view()))
        .collect();
    Ok(positive - log_sum_exp(&logits)?)
}

/// Inputs for the classifier/stability contributions to the φ update.
#[derive(Debug, Clone, Copy)]
pub struct HeadTerms<'a> {
    pub head: &'a HeadParams,
    /// φ̄ of the perturbed twin; without it the stability term is dropped.
    pub perturbed_phi_bar: Option<ArrayView1<'a, f64>>,
    pub negatives: &'a [Array1<f64>],
}

/// ∂(L_f + L_s)/∂φ̄ linearized at `anchor` (the φ̄ of the previous iteration).
pub fn head_gradient_at(
    anchor: ArrayView1<f64>,
    label: usize,
    terms: &HeadTerms,
) -> Result<Array1<f64>> {
    let head = terms.head;
    let k = anchor.len();
    if head.num_concepts() != k {
        return Err(PaceError::Shape("head and state disagree on K".into()));
    }
    if label >= head.num_classes() {
        return Err(PaceError::Shape(format!(
            "label {label} out of range for {} classes",
            head.num_classes()
        )));
    }
    let logits: Vec<f64> = head
        .eta
        .rows()
        .into_iter()
        .map(|eta| ordered_dot(eta, anchor))
        .collect();
    let probs = softmax(&logits)?;
    let mut grad = head.eta.row(label).to_owned();
    for (n, p) in probs.iter().enumerate() {
        grad.scaled_add(-p, &head.eta.row(n));
    }

    if let Some(twin) = terms.perturbed_phi_bar {
        if !terms.negatives.is_empty() {
            let beta = head.beta.view();
            let logits: Vec<f64> = terms
                .negatives
                .iter()
                .map(|f| stability_logit(beta, anchor, f.view()))
                .collect();
            let weights = softmax(&logits)?;
            for kk in 0..k {
                let expected: f64 = weights
                    .iter()
                    .zip(terms.negatives)
                    .map(|(w, f)| w * f[kk])
                    .sum();
                grad[kk] += beta[kk] * (twin[kk] - expected);
            }
        }
    }
    Ok(grad)
}

/// Closed-form φ update from precomputed log-likelihoods.
pub fn update_phi_from_loglik(
    loglik: ArrayView2<f64>,
    state: &VariationalState,
    counts: ArrayView1<f64>,
    head_bias: Option<ArrayView1<f64>>,
) -> Result<Array2<f64>> {
    let (j, k) = loglik.dim();
    check_state(state, j, k)?;
    let elog = expected_log_theta(state.gamma.view())?;
    let scale = 1.0 / j as f64;
    let mut phi = Array2::zeros((j, k));
    let mut scores = vec![0.0; k];
    for jj in 0..j {
        let c = counts[jj];
        for kk in 0..k {
            let mut s = c * (elog[kk] + loglik[[jj, kk]]);
            if let Some(bias) = head_bias {
                s += scale * bias[kk];
            }
            scores[kk] = s;
        }
        let norm = log_sum_exp(&scores)?;
        for kk in 0..k {
            phi[[jj, kk]] = (scores[kk] - norm).exp();
        }
    }
    Ok(phi)
}

/// Closed-form φ update for one image. `heads = None` switches the head terms off.
pub fn update_phi(
    record: &ImageRecord,
    state: &VariationalState,
    bank: &FactoredBank,
    counts: ArrayView1<f64>,
    heads: Option<&HeadTerms>,
) -> Result<Array2<f64>> {
    let loglik = log_likelihoods(record, bank)?;
    let bias = match heads {
        Some(t) => Some(head_gradient_at(state.phi_bar().view(), record.predicted_label, t)?),
        None => None,
    };
    update_phi_from_loglik(loglik.view(), state, counts, bias.as_ref().map(|b| b.view()))
}

/// γ_k = α_k + Σ_j φ_jk c_j.
pub fn update_gamma(alpha: ArrayView1<f64>, phi: ArrayView2<f64>, counts: ArrayView1<f64>) -> Array1<f64> {
    let mut gamma = alpha.to_owned();
    for (row, c) in phi.rows().into_iter().zip(counts.iter()) {
        gamma.scaled_add(*c, &row);
    }
    gamma
}

/// Perturbed-twin summary and negatives used for the stability term.
#[derive(Debug, Clone)]
pub struct StabilityContext {
    pub perturbed_phi_bar: Array1<f64>,
    pub negatives: Vec<Array1<f64>>,
}

/// Result of running the E-step for one image to convergence.
#[derive(Debug, Clone)]
pub struct Inference {
    pub theta: Array1<f64>,
    pub state: VariationalState,
    /// ELBO after each φ/γ alternation.
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
}

/// Run the φ/γ alternation for one image until the relative ELBO change drops
/// below `config.inference_rel_tol` or `config.inference_max_iters` is reached.
pub fn infer(
    record: &ImageRecord,
    bank: &ConceptBank,
    head: &HeadParams,
    config: &TrainConfig,
) -> Result<Inference> {
    let factored = bank.factorize()?;
    infer_factored(record, &factored, head, config, None)
}

pub fn infer_factored(
    record: &ImageRecord,
    bank: &FactoredBank,
    head: &HeadParams,
    config: &TrainConfig,
    stability: Option<&StabilityContext>,
) -> Result<Inference> {
    if record.num_patches() == 0 {
        return Err(PaceError::Shape(format!("record `{}` has no patches", record.id)));
    }
    let counts = effective_counts(record, config.attention)?;
    let loglik = log_likelihoods(record, bank)?;
    let alpha = bank.bank.alpha.view();
    let mut state = VariationalState::initial(alpha, counts.view());
    let mut trace = Vec::new();
    let mut converged = false;
    let terms = config.use_heads.then(|| HeadTerms {
        head,
        perturbed_phi_bar: stability.map(|s| s.perturbed_phi_bar.view()),
        negatives: stability.map(|s| s.negatives.as_slice()).unwrap_or(&[]),
    });

    for iteration in 0..config.inference_max_iters {
        sweep(loglik.view(), &mut state, alpha, counts.view(), record.predicted_label, terms.as_ref())?;
        let mut elbo = elbo_e_from_loglik(loglik.view(), &state, alpha, counts.view())?;
        if let Some(t) = &terms {
            let phi_bar = state.phi_bar();
            elbo += elbo_f(phi_bar.view(), record.predicted_label, t.head)?;
            if let (Some(twin), false) = (t.perturbed_phi_bar, t.negatives.is_empty()) {
                elbo += elbo_s(phi_bar.view(), twin, t.negatives, t.head.beta.view())?;
            }
        }
        if !elbo.is_finite() {
            return Err(PaceError::Numerical {
                iteration,
                detail: format!("ELBO of record `{}` is {elbo}", record.id),
            });
        }
        let prev = trace.last().copied();
        trace.push(elbo);
        if let Some(prev) = prev {
            let rel = (elbo - prev).abs() / f64::max(prev.abs(), f64::MIN_POSITIVE);
            if rel < config.inference_rel_tol {
                converged = true;
                break;
            }
        }
    }
    Ok(Inference {
        theta: theta_from_gamma(state.gamma.view())?,
        state,
        elbo_trace: trace,
        converged,
    })
}

/// One φ update followed by one γ update.
pub fn sweep(
    loglik: ArrayView2<f64>,
    state: &mut VariationalState,
    alpha: ArrayView1<f64>,
    counts: ArrayView1<f64>,
    label: usize,
    heads: Option<&HeadTerms>,
) -> Result<()> {
    let bias = match heads {
        Some(t) => Some(head_gradient_at(state.phi_bar().view(), label, t)?),
        None => None,
    };
    state.phi = update_phi_from_loglik(loglik, state, counts, bias.as_ref().map(|b| b.view()))?;
    state.gamma = update_gamma(alpha, state.phi.view(), counts);
    Ok(())
}

/// Infer every record independently and in parallel; output order matches input.
pub fn infer_batch(
    records: &[&ImageRecord],
    bank: &ConceptBank,
    head: &HeadParams,
    config: &TrainConfig,
) -> Result<Vec<Inference>> {
    let factored = bank.factorize()?;
    records
        .par_iter()
        .map(|r| infer_factored(r, &factored, head, config, None))
        .collect()
}
