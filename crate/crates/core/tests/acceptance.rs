//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p pace-core --test acceptance -- 3 7`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use pace_core::inference::{elbo_e, infer, update_gamma, update_phi};
use pace_core::io::{load_dataset, load_model, save_dataset, save_model, SavedModel};
use pace_core::learning::{fit, head_gradients, head_objective, update_mu, update_sigma, Evidence, HeadSample};
use pace_core::matching::hungarian;
use pace_core::metrics::{aggregate_patches, concept_usage, evaluate, infer_dataset, sparsity, stability};
use pace_core::numkit::{digamma, SpdMatrix};
use pace_core::synth::{
    decode_color, make_color_dataset, sample_dirichlet, sample_generative, separated_bank, ColorOptions, Palette,
    PerturbOptions,
};
use pace_core::{
    AttentionMode, ConceptBank, CovarianceKind, HeadParams, ImageRecord, Split, TrainConfig, VariationalState,
};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(f)
}

fn random_simplex_rows(rng: &mut ChaCha8Rng, j: usize, k: usize) -> Array2<f64> {
    let mut phi = Array2::zeros((j, k));
    for mut row in phi.rows_mut() {
        let draw = sample_dirichlet(Array1::ones(k).view(), rng).unwrap();
        row.assign(&draw);
    }
    phi
}

fn random_bank(rng: &mut ChaCha8Rng, k: usize, d: usize) -> ConceptBank {
    let means = Array2::from_shape_fn((k, d), |_| rng.random_range(-2.0..2.0));
    let covs = (0..k)
        .map(|_| {
            let g = Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal));
            let mut c = g.dot(&g.t()) / d as f64;
            for a in 0..d {
                c[[a, a]] += 0.5;
            }
            let c = (&c + &c.t()) * 0.5;
            SpdMatrix::new(c).unwrap()
        })
        .collect();
    let alpha = Array1::from_shape_fn(k, |_| rng.random_range(0.2..2.0));
    ConceptBank::new(means, covs, alpha).unwrap()
}

fn random_record(rng: &mut ChaCha8Rng, j: usize, d: usize) -> ImageRecord {
    let e = Array2::from_shape_fn((j, d), |_| 2.0 * rng.sample::<f64, _>(StandardNormal));
    let a = Array1::from_shape_fn(j, |_| rng.random_range(0.05..1.0));
    ImageRecord::new("r", e, a, 0).unwrap()
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// 1. Concept recovery on data from the generative model.
fn concept_recovery() -> Outcome {
    let (k, d, j, m) = (4, 8, 32, 400);
    let sigma = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let bank = separated_bank(k, d, sigma, 6.0, 0.5, &mut rng).unwrap();
    let head = HeadParams {
        eta: Array2::from_shape_fn((2, k), |_| rng.random_range(-3.0..3.0)),
        beta: Array1::zeros(k),
    };
    let perturb = PerturbOptions {
        noise_sigma: 0.1 * sigma,
        attention_jitter: 0.1,
    };
    let (data, _) = sample_generative(&bank, &head, m, j, Some(perturb), &mut rng).unwrap();
    let config = TrainConfig {
        k,
        epochs: 30,
        rng_seed: 1,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let fitted = single_threaded(|| fit(&data, &config)).unwrap();
    let elapsed = start.elapsed();

    let cost = Array2::from_shape_fn((k, k), |(a, b)| {
        let diff = &bank.means.row(a) - &fitted.bank.means.row(b);
        diff.dot(&diff).sqrt()
    });
    let assign = hungarian(cost.view()).unwrap();
    let mean_err = (0..k).map(|a| cost[[a, assign[a]]]).fold(0.0, f64::max);
    let cov_err = (0..k)
        .map(|a| {
            let truth = bank.covs[a].as_array();
            frobenius(&(fitted.bank.covs[assign[a]].as_array() - truth)) / frobenius(truth)
        })
        .fold(0.0, f64::max);
    // σ is the root mean eigenvalue of the true covariances
    let sigma_hat = (bank.covs.iter().map(|c| c.trace() / d as f64).sum::<f64>() / k as f64).sqrt();
    let pass = mean_err <= 0.5 * sigma_hat && cov_err <= 0.25 && elapsed <= Duration::from_secs(60);
    Outcome::new(
        pass,
        format!(
            "max mean error {mean_err:.4} (limit {:.4}), max relative covariance error {:.1}% (limit 25%), {:.1}s single-threaded (limit 60s)",
            0.5 * sigma_hat,
            100.0 * cov_err,
            elapsed.as_secs_f64()
        ),
    )
}

/// 2. Color pipeline: faithfulness, stability, sparsity and the four palette concepts.
fn color_pipeline() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let opts = ColorOptions::default();
    let (data, truth) = make_color_dataset(2000, opts, &mut rng).unwrap();
    let config = TrainConfig {
        k: 8,
        rng_seed: 3,
        ..TrainConfig::default()
    };
    let fitted = fit(&data, &config).unwrap();
    let report = evaluate(&data, &fitted.bank, &fitted.head, &config).unwrap();
    let encoder = truth.encoder.as_ref().unwrap();

    let inferred = infer_dataset(&data, &fitted.bank, &fitted.head, &config).unwrap();
    let usage = concept_usage(&inferred.originals);
    let mut order: Vec<usize> = (0..config.k).collect();
    order.sort_by(|&a, &b| usage[b].total_cmp(&usage[a]).then(a.cmp(&b)));
    let dominant: Vec<Palette> = order
        .iter()
        .map(|&c| decode_color(encoder, fitted.bank.means.row(c)))
        .filter(|c| *c != Palette::Black)
        .take(4)
        .collect();
    let colors: BTreeSet<Palette> = dominant.iter().copied().collect();
    let want: BTreeSet<Palette> = [Palette::Red, Palette::Yellow, Palette::Green, Palette::Blue].into();
    let elapsed = start.elapsed();
    let stab = report.stability.unwrap_or(f64::INFINITY);
    let pass = report.faithfulness >= 0.95
        && stab <= 0.25
        && report.sparsity >= 0.5
        && colors == want
        && dominant.len() == 4
        && elapsed <= Duration::from_secs(300);
    Outcome::new(
        pass,
        format!(
            "faithfulness {:.3}, stability {:.3}, sparsity {:.3}, dominant colors {:?}, {:.1}s",
            report.faithfulness,
            stab,
            report.sparsity,
            dominant.iter().map(|c| c.name()).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ),
    )
}

/// 3. Closed-form updates against finite differences, grid search and a moment oracle.
fn update_rules() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);

    // (a) ∂L_e/∂γ vanishes at the γ update
    let mut worst_grad: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.random_range(2..=3);
        let d = rng.random_range(1..=2);
        let j = rng.random_range(2..=4);
        let bank = random_bank(&mut rng, k, d);
        let fb = bank.factorize().unwrap();
        let rec = random_record(&mut rng, j, d);
        let counts = Array1::from_shape_fn(j, |_| rng.random_range(0.2..2.0));
        let phi = random_simplex_rows(&mut rng, j, k);
        let gamma = update_gamma(bank.alpha.view(), phi.view(), counts.view());
        let h = 1e-5;
        for kk in 0..k {
            let mut plus = VariationalState {
                gamma: gamma.clone(),
                phi: phi.clone(),
            };
            plus.gamma[kk] += h;
            let mut minus = plus.clone();
            minus.gamma[kk] -= 2.0 * h;
            let fd = (elbo_e(&rec, &plus, &fb, counts.view()).unwrap()
                - elbo_e(&rec, &minus, &fb, counts.view()).unwrap())
                / (2.0 * h);
            worst_grad = worst_grad.max(fd.abs());
        }
    }

    // (b) φ row is the maximizer of L_e along that row
    let mut worst_phi: f64 = 0.0;
    for _ in 0..50 {
        let d = rng.random_range(1..=2);
        let j = rng.random_range(1..=3);
        let bank = random_bank(&mut rng, 2, d);
        let fb = bank.factorize().unwrap();
        let rec = random_record(&mut rng, j, d);
        let counts = Array1::from_shape_fn(j, |_| rng.random_range(0.2..2.0));
        let mut state = VariationalState {
            gamma: Array1::from_shape_fn(2, |_| rng.random_range(0.3..5.0)),
            phi: random_simplex_rows(&mut rng, j, 2),
        };
        let closed = update_phi(&rec, &state, &fb, counts.view(), None).unwrap();
        let row = rng.random_range(0..j);
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..2000 {
            let p = i as f64 / 1999.0;
            state.phi[[row, 0]] = p;
            state.phi[[row, 1]] = 1.0 - p;
            let v = elbo_e(&rec, &state, &fb, counts.view()).unwrap();
            if v > best.0 {
                best = (v, p);
            }
        }
        worst_phi = worst_phi.max((closed[[row, 0]] - best.1).abs());
    }

    // (c) μ/Σ updates against a naive weighted-moment loop
    let mut worst_moment: f64 = 0.0;
    for _ in 0..50 {
        let m = rng.random_range(1..=10);
        let j = rng.random_range(1..=5);
        let k = rng.random_range(1..=3);
        let d = rng.random_range(1..=3);
        let es: Vec<Array2<f64>> = (0..m)
            .map(|_| Array2::from_shape_fn((j, d), |_| rng.sample(StandardNormal)))
            .collect();
        let phis: Vec<Array2<f64>> = (0..m).map(|_| random_simplex_rows(&mut rng, j, k)).collect();
        let cs: Vec<Array1<f64>> = (0..m)
            .map(|_| Array1::from_shape_fn(j, |_| rng.random_range(0.1..2.0)))
            .collect();
        let evidence: Vec<Evidence> = (0..m)
            .map(|i| Evidence {
                embeddings: es[i].view(),
                phi: phis[i].view(),
                counts: cs[i].view(),
            })
            .collect();
        for kk in 0..k {
            let mut w_sum = 0.0;
            let mut mu = vec![0.0; d];
            for i in 0..m {
                for jj in 0..j {
                    let w = phis[i][[jj, kk]] * cs[i][jj];
                    w_sum += w;
                    for a in 0..d {
                        mu[a] += w * es[i][[jj, a]];
                    }
                }
            }
            mu.iter_mut().for_each(|x| *x /= w_sum);
            let mut sig = vec![vec![0.0; d]; d];
            for i in 0..m {
                for jj in 0..j {
                    let w = phis[i][[jj, kk]] * cs[i][jj];
                    for a in 0..d {
                        for b in 0..d {
                            sig[a][b] += w * (es[i][[jj, a]] - mu[a]) * (es[i][[jj, b]] - mu[b]);
                        }
                    }
                }
            }
            let got_mu = update_mu(&evidence, kk).unwrap();
            for a in 0..d {
                worst_moment = worst_moment.max((got_mu[a] - mu[a]).abs());
            }
            let got = update_sigma(&evidence, got_mu.view(), kk, CovarianceKind::Full).unwrap();
            let oracle = Array2::from_shape_fn((d, d), |(a, b)| sig[a][b] / w_sum);
            // rank-deficient scatter gets jitter; the oracle sees the same regularized matrix only when needed
            let jitter = (got.as_array()[[0, 0]] - oracle[[0, 0]]).abs();
            if m * j > d || jitter < 1e-9 {
                for (x, y) in got.as_array().iter().zip(oracle.iter()) {
                    worst_moment = worst_moment.max((x - y).abs());
                }
            }
        }
    }

    let pass = worst_grad <= 1e-6 && worst_phi <= 1e-3 && worst_moment <= 1e-9;
    Outcome::new(
        pass,
        format!(
            "(a) max |dL_e/dgamma| {worst_grad:.2e}, (b) max phi deviation from grid optimum {worst_phi:.2e}, (c) max moment error {worst_moment:.2e}"
        ),
    )
}

/// 4. Head gradients against central finite differences.
fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for _ in 0..20 {
        let k = rng.random_range(2..=4);
        let n = rng.random_range(2..=3);
        let m = rng.random_range(1..=5);
        let simplex = |rng: &mut ChaCha8Rng| sample_dirichlet(Array1::ones(k).view(), rng).unwrap();
        let samples: Vec<HeadSample> = (0..m)
            .map(|_| HeadSample {
                phi_bar: simplex(&mut rng),
                label: rng.random_range(0..n),
                perturbed_phi_bar: Some(simplex(&mut rng)),
                negatives: (0..rng.random_range(1..=4)).map(|_| simplex(&mut rng)).collect(),
            })
            .collect();
        let head = HeadParams {
            eta: Array2::from_shape_fn((n, k), |_| rng.random_range(-2.0..2.0)),
            beta: Array1::from_shape_fn(k, |_| rng.random_range(-1.0..2.0)),
        };
        let grad = head_gradients(&samples, &head).unwrap();
        let fd = |f: &dyn Fn(&mut HeadParams, f64)| {
            let mut plus = head.clone();
            f(&mut plus, h);
            let mut minus = head.clone();
            f(&mut minus, -h);
            (head_objective(&samples, &plus).unwrap() - head_objective(&samples, &minus).unwrap()) / (2.0 * h)
        };
        for a in 0..n {
            for b in 0..k {
                let g = fd(&|p: &mut HeadParams, s| p.eta[[a, b]] += s);
                worst = worst.max((g - grad.eta[[a, b]]).abs());
            }
        }
        for b in 0..k {
            let g = fd(&|p: &mut HeadParams, s| p.beta[b] += s);
            worst = worst.max((g - grad.beta[b]).abs());
        }
    }
    Outcome::new(worst <= 1e-6, format!("max abs gradient error {worst:.2e} over 20 batches"))
}

/// 5. Monte-Carlo covariance of z̄ ∘ z̄' against the [0, 1/J²] bound.
fn covariance_bound() -> Outcome {
    let k = 3;
    let draws = 1_000_000usize;
    let mut details = Vec::new();
    let mut pass = true;
    for (seed, j) in [(5u64, 4usize), (6, 16)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = random_simplex_rows(&mut rng, j, k);
        let phi_p = random_simplex_rows(&mut rng, j, k);
        let cat = |rows: &Array2<f64>| -> Vec<rand::distr::weighted::WeightedIndex<f64>> {
            rows.rows()
                .into_iter()
                .map(|r| rand::distr::weighted::WeightedIndex::new(r.iter().copied()).unwrap())
                .collect()
        };
        let (c, cp) = (cat(&phi), cat(&phi_p));
        let mut samples = Array2::<f64>::zeros((draws, k));
        for mut row in samples.rows_mut() {
            let mut zbar = [0.0; 3];
            let mut zbar_p = [0.0; 3];
            for jj in 0..j {
                zbar[c[jj].sample(&mut rng)] += 1.0 / j as f64;
                zbar_p[cp[jj].sample(&mut rng)] += 1.0 / j as f64;
            }
            for x in 0..k {
                row[x] = zbar[x] * zbar_p[x];
            }
        }
        let mean = samples.mean_axis(Axis(0)).unwrap();
        let centered = &samples - &mean;
        let upper = 1.0 / (j * j) as f64;
        let mut worst_low: f64 = f64::INFINITY;
        let mut worst_high: f64 = f64::NEG_INFINITY;
        for x in 0..k {
            for y in 0..k {
                let prod: Array1<f64> = &centered.column(x) * &centered.column(y);
                let cov = prod.sum() / (draws - 1) as f64;
                let se = prod.std(1.0) / (draws as f64).sqrt();
                let ok = cov >= -3.0 * se && cov <= upper + 3.0 * se;
                pass &= ok;
                worst_low = worst_low.min(cov / se);
                worst_high = worst_high.max((cov - upper) / se);
            }
        }
        details.push(format!(
            "J={j}: lowest entry {worst_low:.1} SE from 0, highest {worst_high:.1} SE from 1/J^2"
        ));
    }
    Outcome::new(pass, details.join("; "))
}

/// 6. Monotone ascent of L_e in per-image inference and across training epochs.
fn monotone_ascent() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut worst_drop: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(2..=5);
        let d = rng.random_range(1..=4);
        let j = rng.random_range(2..=12);
        let bank = random_bank(&mut rng, k, d);
        let rec = random_record(&mut rng, j, d);
        let config = TrainConfig {
            k,
            use_heads: false,
            attention: AttentionMode::SumToJ,
            inference_rel_tol: 1e-12,
            ..TrainConfig::default()
        };
        let out = infer(&rec, &bank, &HeadParams::zeros(2, k), &config).unwrap();
        for w in out.elbo_trace.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let bank = separated_bank(3, 4, 1.0, 4.0, 0.5, &mut rng).unwrap();
    let head = HeadParams {
        eta: Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0)),
        beta: Array1::zeros(3),
    };
    let (data, _) = sample_generative(&bank, &head, 100, 10, None, &mut rng).unwrap();
    let config = TrainConfig {
        k: 3,
        epochs: 10,
        use_heads: false,
        ..TrainConfig::default()
    };
    let fitted = fit(&data, &config).unwrap();
    let mut worst_epoch_drop: f64 = 0.0;
    for w in fitted.trace.windows(2) {
        worst_epoch_drop = worst_epoch_drop.max(w[0].elbo_e - w[1].elbo_e);
    }
    let pass = worst_drop <= 1e-9 && worst_epoch_drop <= 1e-7;
    Outcome::new(
        pass,
        format!("largest per-image L_e decrease {worst_drop:.2e}, largest per-epoch dataset L_e decrease {worst_epoch_drop:.2e}"),
    )
}

/// 7. Metric values on the reference examples.
fn metric_values() -> Outcome {
    use ndarray::array;
    let s = stability(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap();
    let sp4 = sparsity(array![1.0, 0.0, 0.0, 0.0].view()).unwrap();
    let sp3 = sparsity(array![0.5, 0.5, 0.0].view()).unwrap();
    let agg = aggregate_patches(Array2::<f64>::eye(4).view()).unwrap();
    let pass = (s - 2f64.sqrt()).abs() <= 1e-12
        && sp4 == 0.75
        && sp3 == 1.0 / 3.0
        && agg == array![[0.25, 0.25, 0.25, 0.25]];
    Outcome::new(
        pass,
        format!("stability {s}, sparsity {sp4} and {sp3}, aggregated row {:?}", agg.row(0).to_vec()),
    )
}

/// Central five-point derivative of statrs' log-gamma.
fn ln_gamma_derivative(x: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let h = 1e-3 * x;
    (-ln_gamma(x + 2.0 * h) + 8.0 * ln_gamma(x + h) - 8.0 * ln_gamma(x - h) + ln_gamma(x - 2.0 * h)) / (12.0 * h)
}

fn color_metrics_bytes(dir: &std::path::Path) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (data, _) = make_color_dataset(200, ColorOptions::default(), &mut rng).unwrap();
    save_dataset(&data, dir).unwrap();
    let data = load_dataset(dir).unwrap();
    let config = TrainConfig {
        k: 6,
        epochs: 5,
        rng_seed: 11,
        ..TrainConfig::default()
    };
    let fitted = fit(&data, &config).unwrap();
    let report = evaluate(&data, &fitted.bank, &fitted.head, &config).unwrap();
    serde_json::to_vec_pretty(&report).unwrap()
}

/// 8. Determinism, bit-exact persistence and the digamma oracle.
fn determinism_and_persistence() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let a = color_metrics_bytes(&tmp.path().join("a"));
    let b = color_metrics_bytes(&tmp.path().join("b"));
    let metrics_same = a == b;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bank = separated_bank(3, 5, 1.0, 6.0, 0.5, &mut rng).unwrap();
    let head = HeadParams {
        eta: Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0)),
        beta: Array1::from_shape_fn(3, |_| rng.random_range(0.0..1.0)),
    };
    let perturb = PerturbOptions {
        noise_sigma: 0.1,
        attention_jitter: 0.1,
    };
    let (data, _) = sample_generative(&bank, &head, 30, 7, Some(perturb), &mut rng).unwrap();
    let dir = tmp.path().join("ds");
    save_dataset(&data, &dir).unwrap();
    let loaded = load_dataset(&dir).unwrap();
    let bits = |r: &ImageRecord| -> Vec<u64> {
        r.embeddings
            .iter()
            .chain(r.attentions.iter())
            .map(|x| x.to_bits())
            .collect()
    };
    let dataset_exact = loaded == data
        && loaded.records.iter().zip(&data.records).all(|(x, y)| {
            bits(x) == bits(y) && bits(x.perturbed.as_ref().unwrap()) == bits(y.perturbed.as_ref().unwrap())
        })
        && loaded.splits == data.splits
        && data.splits.contains(&Split::Test);

    let model = SavedModel {
        bank,
        head,
        config: TrainConfig {
            k: 3,
            ..TrainConfig::default()
        },
    };
    let path = tmp.path().join("model.pace");
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    let model_exact = back == model
        && back
            .bank
            .covs
            .iter()
            .zip(&model.bank.covs)
            .all(|(x, y)| x.as_array().iter().zip(y.as_array()).all(|(p, q)| p.to_bits() == q.to_bits()));

    let mut worst_digamma: f64 = 0.0;
    for i in 0..=1000 {
        let x = 0.1 + (50.0 - 0.1) * i as f64 / 1000.0;
        worst_digamma = worst_digamma.max((digamma(x).unwrap() - ln_gamma_derivative(x)).abs());
    }
    let pass = metrics_same && dataset_exact && model_exact && worst_digamma <= 1e-8;
    Outcome::new(
        pass,
        format!(
            "metrics identical: {metrics_same}, dataset round-trip exact: {dataset_exact}, model round-trip exact: {model_exact}, max digamma error {worst_digamma:.2e}"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("concept recovery", concept_recovery),
        ("color pipeline", color_pipeline),
        ("update-rule correctness", update_rules),
        ("gradient check", gradient_check),
        ("covariance bound", covariance_bound),
        ("monotone coordinate ascent", monotone_ascent),
        ("metric unit values", metric_values),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if !outcome.pass {
            failures += 1;
        }
        println!(
            "criterion {number} ({name}): {} [{:.1}s] {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
