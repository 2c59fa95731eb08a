//! Property checks shared by the focused test files and the acceptance
//! runner. Each returns a one-line summary on success and a description
//! of the first violation otherwise.

use std::path::Path;
use std::process::Command;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tiltfed::estimators::{self, EstimatorConfig, Method};
use tiltfed::fednet::{Endpoint, Network, SiteNode};
use tiltfed::inference;
use tiltfed::score::{self, SurrogateContext, TiltedScoreContext};
use tiltfed::{FamilyKind, ModelFamily, Observation, SiteDataset};

use super::*;

pub type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn dv(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn tight_config() -> EstimatorConfig {
    let mut cfg = EstimatorConfig::default();
    cfg.solver.tol = 1e-13;
    cfg.covariance = false;
    cfg
}

// ---------------------------------------------------------------- 4

pub const PROPOSED: [Method; 7] = [
    Method::M1,
    Method::M2,
    Method::M3,
    Method::OneStep,
    Method::Modified,
    Method::Average,
    Method::Homo,
];

/// K = 1 collapses every method to the local MLE.
pub fn single_site_reduction() -> Check {
    let mut worst: f64 = 0.0;
    for kind in [FamilyKind::Logistic, FamilyKind::GaussianLinear] {
        for seed in 0..3 {
            let data = instance(kind, 1, 150, 100 + seed);
            let reference = mle(Fam::of(kind), &sites(&data)[0]);
            let net = Network::new(generate_model(kind), data.clone()).unwrap();
            for method in PROPOSED.iter().copied().chain([Method::Pooled]) {
                let rep = estimators::estimate(method, &net, Some(&data), &EstimatorConfig::default())
                    .map_err(|e| format!("{method} failed at K=1: {e}"))?;
                let diff = (rep.beta_hat[0] - reference[0]).abs();
                ensure(diff <= 1e-8, || {
                    format!("{method} ({kind}) differs from the local MLE by {diff:e}")
                })?;
                worst = worst.max(diff);
            }
        }
    }
    Ok(format!("all methods equal the local MLE at K=1 (max diff {worst:.1e})"))
}

fn generate_model(kind: FamilyKind) -> ModelFamily {
    scenario(kind, 1, 1, 0).model().unwrap()
}

/// Identical nuisances on shared data: tilting is the identity and the
/// score-only surrogate equals the shared-parameter surrogate score.
pub fn zero_heterogeneity_collapse() -> Check {
    for kind in [FamilyKind::Logistic, FamilyKind::GaussianLinear] {
        let m = generate_model(kind);
        let base = instance(kind, 1, 120, 7).remove(0);
        let copy = |site: usize| {
            let mut y = Vec::new();
            let mut x = Vec::new();
            let mut z = Vec::new();
            for o in base.iter() {
                y.push(o.outcome);
                x.extend_from_slice(o.common);
                z.extend_from_slice(o.nuisance);
            }
            SiteDataset::new(site, &m, y, x, z).unwrap()
        };
        let shared = [copy(0), copy(1)];
        let beta_bar = dv(&[-0.8]);
        let gamma = dv(&[0.2, 0.5]);
        let tilted = score::tilted_information(&m, &shared[0], &beta_bar, &gamma, &gamma).unwrap();
        let plain = score::empirical_information(&m, &shared[0], &beta_bar, &gamma).unwrap();
        ensure(tilted.0 == plain, || {
            format!("{kind}: tilted blocks differ from untilted blocks")
        })?;

        let weights = score::sample_size_weights(&[shared[0].len(), shared[1].len()]);
        let grads: Vec<DVector<f64>> = shared
            .iter()
            .map(|d| score::site_gradient(&m, d, &beta_bar, &gamma).unwrap())
            .collect();
        let beta_grads: Vec<DVector<f64>> = grads.iter().map(|g| g.rows(0, 1).into_owned()).collect();
        let ctx = TiltedScoreContext::build(
            &m,
            &shared[0],
            beta_bar.clone(),
            vec![gamma.clone(), gamma.clone()],
            weights.clone(),
            &beta_grads,
        )
        .unwrap();
        let mut global = DVector::zeros(m.d());
        for (g, w) in grads.iter().zip(&weights) {
            global += g * *w;
        }
        let theta_bar = dv(&cat(beta_bar.as_slice(), gamma.as_slice()));
        for b in [-1.3, -0.8, 0.0, 0.4] {
            let inner = score::tilted_score_equation(&ctx, &m, &shared[0], &dv(&[b])).unwrap();
            let theta = dv(&[b, gamma[0], gamma[1]]);
            let homo = score::homogeneous_surrogate_score(&m, &shared[0], &theta, &theta_bar, &global).unwrap();
            ensure(inner[0] == homo[0], || {
                format!(
                    "{kind}: score-only surrogate {} != shared-parameter surrogate {} at beta {b}",
                    inner[0], homo[0]
                )
            })?;
        }
    }
    Ok("tilted = untilted blocks and score-only = shared-parameter surrogate, bit for bit".into())
}

// ---------------------------------------------------------------- 5

fn random_point(
    kind: FamilyKind,
    p: usize,
    q: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, Vec<f64>, Vec<f64>, DVector<f64>, DVector<f64>) {
    let x: Vec<f64> = (0..p).map(|_| uniform(rng, -2.0, 2.0)).collect();
    let z: Vec<f64> = (0..q).map(|_| uniform(rng, -2.0, 2.0)).collect();
    let beta = DVector::from_fn(p, |_, _| uniform(rng, -1.5, 1.5));
    let gamma = DVector::from_fn(q, |_, _| uniform(rng, -1.5, 1.5));
    let y = match kind {
        FamilyKind::Logistic => f64::from(rng.random::<bool>()),
        FamilyKind::GaussianLinear => uniform(rng, -3.0, 3.0),
    };
    (y, x, z, beta, gamma)
}

fn theta_fd<F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>>(
    f: F,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
) -> DMatrix<f64> {
    let (p, q) = (beta.len(), gamma.len());
    let h = 1e-6;
    let mut cols = Vec::new();
    for k in 0..p + q {
        let (mut bu, mut bd, mut gu, mut gd) = (beta.clone(), beta.clone(), gamma.clone(), gamma.clone());
        if k < p {
            bu[k] += h;
            bd[k] -= h;
        } else {
            gu[k - p] += h;
            gd[k - p] -= h;
        }
        cols.push((f(&bu, &gu) - f(&bd, &gd)) / (2.0 * h));
    }
    DMatrix::from_columns(&cols)
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-6)
}

/// Score and Hessian against central differences on 100 points per family.
pub fn derivative_suite() -> Check {
    let mut worst = (0.0f64, 0.0f64);
    for kind in [FamilyKind::Logistic, FamilyKind::GaussianLinear] {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for i in 0..100 {
            let (p, q) = (1 + i % 2, 1 + i % 3);
            let m = ModelFamily::new(kind, tiltfed::ParameterPartition::new(p, q).unwrap());
            let (y, x, z, beta, gamma) = random_point(kind, p, q, &mut rng);
            let obs = Observation::new(y, &x, &z);
            let score = m.score(&obs, &beta, &gamma).unwrap();
            let fd_score = theta_fd(|b, g| dv(&[m.log_density(&obs, b, g).unwrap()]), &beta, &gamma).transpose();
            let e1 = rel_err(&DMatrix::from_column_slice(score.len(), 1, score.as_slice()), &fd_score);
            let hess = m.hessian(&obs, &beta, &gamma).unwrap();
            let fd_hess = theta_fd(|b, g| m.score(&obs, b, g).unwrap(), &beta, &gamma);
            let e2 = rel_err(&hess, &fd_hess);
            ensure(e1 <= 1e-5, || format!("{kind} point {i}: score rel err {e1:e}"))?;
            ensure(e2 <= 1e-4, || format!("{kind} point {i}: hessian rel err {e2:e}"))?;
            worst = (worst.0.max(e1), worst.1.max(e2));
        }
    }
    Ok(format!(
        "200 points: max score rel err {:.1e}, max hessian rel err {:.1e}",
        worst.0, worst.1
    ))
}

// ---------------------------------------------------------------- 6

fn logistic_prob(m: &ModelFamily, y: f64, x: &[f64], z: &[f64], beta: &DVector<f64>, gamma: &DVector<f64>) -> f64 {
    m.log_density(&Observation::new(y, x, z), beta, gamma).unwrap().exp()
}

/// Change of measure and efficient-score orthogonality by enumerating
/// `Y in {0, 1}`.
pub fn enumeration_identities() -> Check {
    let m = ModelFamily::logistic(1, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;

    for _ in 0..100 {
        let x = [f64::from(rng.random::<bool>())];
        let z = [1.0, uniform(&mut rng, -2.0, 2.0)];
        let beta = dv(&[uniform(&mut rng, -1.5, 1.5)]);
        let gj = dv(&[uniform(&mut rng, -2.0, 2.0), uniform(&mut rng, -2.0, 2.0)]);
        let gl = dv(&[uniform(&mut rng, -2.0, 2.0), uniform(&mut rng, -2.0, 2.0)]);
        let g = |y: f64| (3.0 * y - 1.0).powi(3) + y.cos();
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for y in [0.0, 1.0] {
            let obs = Observation::new(y, &x, &z);
            lhs += logistic_prob(&m, y, &x, &z, &beta, &gj) * g(y);
            let r = m.log_density_ratio(&obs, &beta, &gj, &gl).unwrap().exp();
            rhs += logistic_prob(&m, y, &x, &z, &beta, &gl) * g(y) * r;
        }
        worst = worst.max((lhs - rhs).abs());
    }
    ensure(worst <= 1e-12, || format!("change of measure off by {worst:e}"))?;

    // orthogonality over a fixed covariate sample at the true parameters
    let data = instance(FamilyKind::Logistic, 1, 200, 3).remove(0);
    let (beta, gamma) = (dv(&[-1.0]), dv(&[0.3, 0.8]));
    let blocks = score::empirical_information(&m, &data, &beta, &gamma).unwrap();
    let adj = blocks.adjuster(0).unwrap();
    let mut mean_dgamma = DMatrix::<f64>::zeros(1, 2);
    let mut mean_s = DVector::<f64>::zeros(1);
    for o in data.iter() {
        for y in [0.0, 1.0] {
            let pr = logistic_prob(&m, y, o.common, o.nuisance, &beta, &gamma);
            let obs = Observation::new(y, o.common, o.nuisance);
            let h = m.hessian(&obs, &beta, &gamma).unwrap();
            let dg = h.view((0, 1), (1, 2)) - &adj * h.view((1, 1), (2, 2));
            mean_dgamma += dg * pr;
            mean_s += score::efficient_score_integrand(&m, &obs, &beta, &gamma, &adj).unwrap() * pr;
        }
    }
    mean_dgamma /= data.len() as f64;
    mean_s /= data.len() as f64;
    let orth = mean_dgamma.amax().max(mean_s.amax());
    ensure(orth <= 1e-10, || {
        format!("E grad_gamma s = {mean_dgamma}, E s = {mean_s}")
    })?;

    let tilt = unbiased_tilting()?;
    Ok(format!(
        "change of measure {worst:.1e}, orthogonality {orth:.1e}, tilting {tilt:.1e}"
    ))
}

/// `E_1 { grad^k g*(Y; beta) } = (1/K) sum_j E_j { grad^k s_j(Y; beta, gamma_j) }`
/// for `k = 0, 1` at fixed covariates.
fn unbiased_tilting() -> std::result::Result<f64, String> {
    let m = ModelFamily::logistic(1, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = 3;
        let beta_star = dv(&[-1.0]);
        let gammas: Vec<DVector<f64>> = (0..k)
            .map(|_| dv(&[uniform(&mut rng, -1.0, 1.0), uniform(&mut rng, -2.0, 2.0)]))
            .collect();
        let adjs: Vec<DMatrix<f64>> = (0..k)
            .map(|_| DMatrix::from_fn(1, 2, |_, _| uniform(&mut rng, -1.0, 1.0)))
            .collect();
        let x = [f64::from(rng.random::<bool>())];
        let z = [1.0, uniform(&mut rng, -2.0, 2.0)];
        let beta = dv(&[uniform(&mut rng, -2.0, 0.0)]);
        // k = 0 uses the efficient-score integrand, k = 1 its beta derivative
        let s = |y: f64, j: usize| -> (f64, f64) {
            let obs = Observation::new(y, &x, &z);
            let v = score::efficient_score_integrand(&m, &obs, &beta, &gammas[j], &adjs[j]).unwrap()[0];
            let h = m.hessian(&obs, &beta, &gammas[j]).unwrap();
            let dv_ = h[(0, 0)] - (&adjs[j] * h.view((1, 0), (2, 1)))[(0, 0)];
            (v, dv_)
        };
        let (mut lhs0, mut lhs1, mut rhs0, mut rhs1) = (0.0, 0.0, 0.0, 0.0);
        for y in [0.0, 1.0] {
            let obs = Observation::new(y, &x, &z);
            let p1 = logistic_prob(&m, y, &x, &z, &beta_star, &gammas[0]);
            for j in 0..k {
                let r = m
                    .log_density_ratio(&obs, &beta_star, &gammas[j], &gammas[0])
                    .unwrap()
                    .exp();
                let (v, d) = s(y, j);
                lhs0 += p1 * r * v / k as f64;
                lhs1 += p1 * r * d / k as f64;
                let pj = logistic_prob(&m, y, &x, &z, &beta_star, &gammas[j]);
                rhs0 += pj * v / k as f64;
                rhs1 += pj * d / k as f64;
            }
        }
        worst = worst.max((lhs0 - rhs0).abs()).max((lhs1 - rhs1).abs());
    }
    ensure(worst <= 1e-10, || format!("unbiased tilting off by {worst:e}"))?;
    Ok(worst)
}

// ---------------------------------------------------------------- 7

fn local_fits(net: &Network) -> (Vec<f64>, Vec<Vec<f64>>) {
    let cfg = tight_config();
    let fits: Vec<_> = net
        .nodes()
        .iter()
        .map(|n| n.local_mle(None, &cfg.local_fit).unwrap())
        .collect();
    let betas: Vec<Vec<f64>> = fits.iter().map(|f| f.theta.iter().copied().collect()).collect();
    let p = net.model().p();
    (
        uniform_beta_mean(&betas, p),
        fits.iter().map(|f| f.gamma().iter().copied().collect()).collect(),
    )
}

fn crate_context(net: &Network, local: &SiteNode, beta_bar: &[f64], gammas: &[Vec<f64>]) -> SurrogateContext {
    let gs: Vec<DVector<f64>> = gammas.iter().map(|g| dv(g)).collect();
    let scores: Vec<DVector<f64>> = net
        .nodes()
        .iter()
        .map(|n| n.efficient_score(&dv(beta_bar), &gs[n.id()]).unwrap())
        .collect();
    local
        .surrogate_context(dv(beta_bar), gs, net.weights(), &scores)
        .unwrap()
}

/// Tilted information, surrogate equation and algorithm 2 against the
/// naive-loop, from-primitives and compositional oracles.
pub fn oracle_equivalence() -> Check {
    let mut worst = [0.0f64; 4];
    for seed in [1u64, 2, 3] {
        let data = instance(FamilyKind::Logistic, 3, 40 + 20 * seed as usize, seed);
        let m = generate_model(FamilyKind::Logistic);
        let ss = sites(&data);
        let net = Network::new(m, data.clone()).unwrap();
        let (beta_bar, gammas) = local_fits(&net);

        for (l, local) in data.iter().enumerate() {
            for gj in &gammas {
                let got = score::tilted_information(&m, local, &dv(&beta_bar), &dv(gj), &dv(&gammas[l])).unwrap();
                let want = tilted(Fam::Logistic, &ss[l], &beta_bar, gj, &gammas[l]);
                let full = got.assemble();
                for r in 0..3 {
                    worst[0] = worst[0].max(max_abs_diff(full.row(r).transpose().as_slice(), &want[r]));
                }
            }
        }
        ensure(worst[0] <= 1e-12, || {
            format!("tilted information off by {:e}", worst[0])
        })?;

        for l in 0..3 {
            let node = net.node(l).unwrap();
            let ctx = crate_context(&net, node, &beta_bar, &gammas);
            let oracle = Surrogate::new(Fam::Logistic, &ss, l, &beta_bar, &gammas);
            for shift in [-0.4, 0.0, 0.25] {
                let b = [beta_bar[0] + shift];
                let got = node.surrogate_equation(&ctx, &dv(&b)).unwrap();
                worst[1] = worst[1].max(max_abs_diff(got.as_slice(), &oracle.equation(&b)));
            }
        }
        ensure(worst[1] <= 1e-10, || {
            format!("surrogate equation off by {:e}", worst[1])
        })?;

        let cfg = EstimatorConfig {
            covariance: false,
            ..EstimatorConfig::default()
        };
        let all = estimators::algorithm2(&net, &cfg).unwrap();
        let mean = (0..3)
            .map(|l| {
                estimators::algorithm1(
                    &net,
                    &EstimatorConfig {
                        local_site: l,
                        ..cfg.clone()
                    },
                )
                .unwrap()
                .beta_hat[0]
            })
            .sum::<f64>()
            / 3.0;
        worst[2] = worst[2].max((all.beta_hat[0] - mean).abs());
        ensure(worst[2] <= 1e-10, || {
            format!(
                "algorithm 2 differs from the mean of single-site runs by {:e}",
                worst[2]
            )
        })?;

        for t in [1usize, 2] {
            let got = estimators::algorithm1(
                &net,
                &EstimatorConfig {
                    iterations: t,
                    ..tight_config()
                },
            )
            .unwrap();
            let want = algorithm1(Fam::Logistic, &ss, 0, t);
            worst[3] = worst[3].max((got.beta_hat[0] - want[0]).abs());
        }
        ensure(worst[3] <= 1e-10, || {
            format!("algorithm 1 differs from the from-primitives run by {:e}", worst[3])
        })?;
    }
    Ok(format!(
        "tilted info {:.1e}, surrogate eq {:.1e}, algorithm 2 {:.1e}, algorithm 1 end to end {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

// ---------------------------------------------------------------- 8

/// Round costs under the hub-and-spoke protocol, linearity in K, and
/// totals equal to summed payload lengths.
pub fn communication_accounting() -> Check {
    let mut first = Vec::new();
    for k in [5usize, 10, 20, 40] {
        let data = instance(FamilyKind::Logistic, k, 100, 77);
        let net = Network::new(generate_model(FamilyKind::Logistic), data.clone()).unwrap();
        let (d, p) = (net.model().d(), net.model().p());
        for method in Method::ALL {
            let rep = estimators::estimate(method, &net, Some(&data), &EstimatorConfig::default())
                .map_err(|e| format!("{method} at K={k}: {e}"))?;
            let l = &rep.ledger;
            let summed: usize = l.messages().iter().map(|m| m.payload_len()).sum();
            ensure(l.total() == summed, || {
                format!("{method}: total {} != summed payloads {summed}", l.total())
            })?;
            ensure(l.per_round().iter().sum::<usize>() == l.total(), || {
                format!("{method}: rounds do not add up")
            })?;
            ensure(l.messages().iter().all(|m| m.payload_len() <= d + p), || {
                format!("{method}: oversized payload")
            })?;
        }
        let m1 = estimators::estimate(Method::M1, &net, None, &EstimatorConfig::default()).unwrap();
        let m2 = estimators::estimate(Method::M2, &net, None, &EstimatorConfig::default()).unwrap();
        let expect1 = k * (d + 2 * p);
        let expect2 = k * (2 * p + (d - p));
        ensure(m1.ledger.round_cost(1) == expect1, || {
            format!("K={k}: round 1 costs {} not {expect1}", m1.ledger.round_cost(1))
        })?;
        ensure(m2.ledger.round_cost(2) == expect2, || {
            format!("K={k}: round 2 costs {} not {expect2}", m2.ledger.round_cost(2))
        })?;
        ensure(
            m1.ledger
                .messages()
                .iter()
                .all(|m| m.from == Endpoint::Coordinator || m.to == Endpoint::Coordinator),
            || "algorithm 1 sent a site-to-site message".into(),
        )?;
        first.push((k, m1.ledger.round_cost(1), m2.ledger.round_cost(2)));
    }
    for w in first.windows(2) {
        ensure(w[1].1 == 2 * w[0].1 && w[1].2 == 2 * w[0].2, || {
            format!("doubling K did not double cost: {w:?}")
        })?;
    }
    Ok(format!(
        "round costs (K, round 1, round t>=2): {}",
        first
            .iter()
            .map(|(k, a, b)| format!("({k}, {a}, {b})"))
            .collect::<Vec<_>>()
            .join(" ")
    ))
}

// ---------------------------------------------------------------- 9

fn random_spd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| uniform(rng, -1.0, 1.0));
    &a * a.transpose() + DMatrix::identity(p, p) * uniform(rng, 0.01, 0.5)
}

/// Average-of-inverses variance dominates the efficient variance.
pub fn efficiency_ordering() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut min_eig = f64::INFINITY;
    for case in 0..50 {
        let k = 2 + case % 5;
        let p = 1 + case % 4;
        let parts: Vec<DMatrix<f64>> = (0..k).map(|_| random_spd(&mut rng, p)).collect();
        let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(20..500)).collect();
        let avg = inference::average_variance(&parts, &sizes).map_err(|e| e.to_string())?;
        let eff = inference::efficient_variance(&parts, &sizes).map_err(|e| e.to_string())?;

        // independent recomputation of both sides
        let mut want_avg = DMatrix::<f64>::zeros(p, p);
        let mut total = zeros(p, p);
        for (pj, &n) in parts.iter().zip(&sizes) {
            let scaled: Mat = (0..p)
                .map(|r| (0..p).map(|c| pj[(r, c)] * n as f64).collect())
                .collect();
            let inv = inverse(&scaled);
            for r in 0..p {
                for c in 0..p {
                    want_avg[(r, c)] += inv[r][c] / (k * k) as f64;
                    total[r][c] += scaled[r][c];
                }
            }
        }
        let want_eff = inverse(&total);
        let scale = want_avg.amax();
        ensure((&avg - &want_avg).amax() <= 1e-10 * scale.max(1.0), || {
            format!("case {case}: average variance mismatch")
        })?;
        for r in 0..p {
            for c in 0..p {
                ensure((eff[(r, c)] - want_eff[r][c]).abs() <= 1e-10 * scale.max(1.0), || {
                    format!("case {case}: efficient variance mismatch")
                })?;
            }
        }
        let diff = &avg - &eff;
        let e = SymmetricEigen::new((&diff + diff.transpose()) * 0.5).eigenvalues.min();
        ensure(e >= -1e-10, || format!("case {case}: smallest eigenvalue {e:e}"))?;
        min_eig = min_eig.min(e);
    }
    Ok(format!(
        "50 SPD configurations, smallest eigenvalue of the difference {min_eig:.2e}"
    ))
}

// ---------------------------------------------------------------- 10

pub fn run_simulate(bin: &str, out: &Path) -> std::result::Result<(), String> {
    let status = Command::new(bin)
        .args([
            "simulate",
            "--preset",
            "figure1",
            "--replicates",
            "3",
            "--sites",
            "4",
            "--seed",
            "99",
        ])
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || {
        format!(
            "simulate exited with {}: {}",
            status.status,
            String::from_utf8_lossy(&status.stderr)
        )
    })
}

/// Two `simulate` runs with the same seed write identical bytes.
pub fn simulate_determinism(bin: &str) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_simulate(bin, &a)?;
    run_simulate(bin, &b)?;
    let mut sizes = Vec::new();
    for name in ["metrics.csv", "raw.csv"] {
        let x = std::fs::read(a.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let y = std::fs::read(b.join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(x == y, || format!("{name} differs between runs"))?;
        ensure(!x.is_empty(), || format!("{name} is empty"))?;
        sizes.push(format!("{name} {} bytes", x.len()));
    }
    Ok(format!("identical outputs ({})", sizes.join(", ")))
}
