//! Independent reference implementations for the integration tests.
//!
//! Everything here works on plain `Vec<f64>` and recomputes densities,
//! derivatives and linear solves from scratch, so it shares no numerics
//! with the crate beyond reading observations.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod checks;

use tiltfed::simlab::{generate_scenario, Heterogeneity, ScenarioConfig};
use tiltfed::{FamilyKind, SiteDataset};

pub type Mat = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fam {
    Logistic,
    Gaussian,
}

impl Fam {
    pub fn of(kind: FamilyKind) -> Self {
        match kind {
            FamilyKind::Logistic => Fam::Logistic,
            FamilyKind::GaussianLinear => Fam::Gaussian,
        }
    }

    pub fn logf(self, y: f64, eta: f64) -> f64 {
        match self {
            Fam::Logistic => {
                if eta > 0.0 {
                    y * eta - eta - (-eta).exp().ln_1p()
                } else {
                    y * eta - eta.exp().ln_1p()
                }
            }
            Fam::Gaussian => -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * (y - eta) * (y - eta),
        }
    }

    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Fam::Logistic => 1.0 / (1.0 + (-eta).exp()),
            Fam::Gaussian => eta,
        }
    }

    /// `d log f / d eta`.
    pub fn d1(self, y: f64, eta: f64) -> f64 {
        y - self.mean(eta)
    }

    /// `-d^2 log f / d eta^2`.
    pub fn w(self, eta: f64) -> f64 {
        match self {
            Fam::Logistic => {
                let m = self.mean(eta);
                m * (1.0 - m)
            }
            Fam::Gaussian => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Obs {
    pub y: f64,
    /// `(x, z)` stacked.
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Site {
    pub p: usize,
    pub obs: Vec<Obs>,
}

impl Site {
    pub fn n(&self) -> usize {
        self.obs.len()
    }

    pub fn d(&self) -> usize {
        self.obs[0].v.len()
    }
}

pub fn sites(data: &[SiteDataset]) -> Vec<Site> {
    data.iter()
        .map(|d| Site {
            p: d.partition().p(),
            obs: d
                .iter()
                .map(|o| Obs {
                    y: o.outcome,
                    v: o.common.iter().chain(o.nuisance).copied().collect(),
                })
                .collect(),
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn matvec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter().map(|r| dot(r, x)).collect()
}

/// Gaussian elimination with partial pivoting.
pub fn solve(a: &Mat, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Mat = a
        .iter()
        .zip(b)
        .map(|(r, &bi)| {
            let mut r = r.clone();
            r.push(bi);
            r
        })
        .collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, piv);
        assert!(m[c][c].abs() > 1e-300, "singular system in oracle");
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..=n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    x
}

pub fn inverse(a: &Mat) -> Mat {
    let n = a.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|c| solve(a, &(0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect::<Vec<_>>()))
        .collect();
    (0..n).map(|r| (0..n).map(|c| cols[c][r]).collect()).collect()
}

pub fn sub(a: &Mat, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Mat {
    a[rows].iter().map(|r| r[cols.clone()].to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (r, k, c) = (a.len(), b.len(), b[0].len());
    (0..r)
        .map(|i| (0..c).map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum()).collect())
        .collect()
}

/// `bg * gg^{-1}` of a `d x d` information matrix.
pub fn adjuster(info: &Mat, p: usize) -> Mat {
    let d = info.len();
    matmul(&sub(info, 0..p, p..d), &inverse(&sub(info, p..d, p..d)))
}

/// `bb - bg gg^{-1} gb`.
pub fn schur(info: &Mat, p: usize) -> Mat {
    let d = info.len();
    let a = adjuster(info, p);
    let corr = matmul(&a, &sub(info, p..d, 0..p));
    (0..p)
        .map(|r| (0..p).map(|c| info[r][c] - corr[r][c]).collect())
        .collect()
}

pub fn loglik(f: Fam, s: &Site, theta: &[f64]) -> f64 {
    s.obs.iter().map(|o| f.logf(o.y, dot(&o.v, theta))).sum::<f64>() / s.n() as f64
}

pub fn grad(f: Fam, s: &Site, theta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; theta.len()];
    for o in &s.obs {
        let r = f.d1(o.y, dot(&o.v, theta));
        for (gk, vk) in g.iter_mut().zip(&o.v) {
            *gk += r * vk;
        }
    }
    g.iter().map(|x| x / s.n() as f64).collect()
}

/// `(1/n) sum_i weight_i * w(eta_i) v_i v_i'` with `eta_i` at `theta`.
pub fn info_weighted(f: Fam, s: &Site, theta: &[f64], weight: &dyn Fn(&Obs) -> f64) -> Mat {
    let d = theta.len();
    let mut m = zeros(d, d);
    for o in &s.obs {
        let c = weight(o) * f.w(dot(&o.v, theta));
        for r in 0..d {
            for k in 0..d {
                m[r][k] += c * o.v[r] * o.v[k];
            }
        }
    }
    m.iter().map(|r| r.iter().map(|x| x / s.n() as f64).collect()).collect()
}

pub fn info(f: Fam, s: &Site, theta: &[f64]) -> Mat {
    info_weighted(f, s, theta, &|_| 1.0)
}

/// Newton ascent on `loglik` over the coordinates `free`, others fixed.
pub fn maximize(f: Fam, s: &Site, theta0: &[f64], free: std::ops::Range<usize>) -> Vec<f64> {
    let mut th = theta0.to_vec();
    for _ in 0..200 {
        let g = grad(f, s, &th)[free.clone()].to_vec();
        if g.iter().all(|x| x.abs() < 1e-13) {
            break;
        }
        let h = sub(&info(f, s, &th), free.clone(), free.clone());
        let step = solve(&h, &g);
        let base = loglik(f, s, &th);
        let mut lam = 1.0;
        loop {
            let mut cand = th.clone();
            for (k, st) in free.clone().zip(&step) {
                cand[k] += lam * st;
            }
            if loglik(f, s, &cand) >= base - 1e-15 || lam < 1e-10 {
                th = cand;
                break;
            }
            lam *= 0.5;
        }
        if step.iter().all(|x| (lam * x).abs() < 1e-15) {
            break;
        }
    }
    th
}

pub fn mle(f: Fam, s: &Site) -> Vec<f64> {
    maximize(f, s, &vec![0.0; s.d()], 0..s.d())
}

pub fn profile(f: Fam, s: &Site, beta: &[f64], gamma0: &[f64]) -> Vec<f64> {
    let th = maximize(f, s, &cat(beta, gamma0), s.p..s.d());
    th[s.p..].to_vec()
}

pub fn efficient_score(f: Fam, s: &Site, beta: &[f64], gamma: &[f64]) -> Vec<f64> {
    let th = cat(beta, gamma);
    let g = grad(f, s, &th);
    let a = adjuster(&info(f, s, &th), s.p);
    let proj = matvec(&a, &g[s.p..]);
    (0..s.p).map(|k| g[k] - proj[k]).collect()
}

pub fn ratio(f: Fam, o: &Obs, beta: &[f64], gj: &[f64], gl: &[f64]) -> f64 {
    let ej = dot(&o.v, &cat(beta, gj));
    let el = dot(&o.v, &cat(beta, gl));
    (f.logf(o.y, ej) - f.logf(o.y, el)).exp()
}

/// `(1/n) sum_i r_i * (-hess log f(y_i; beta_bar, gj))` over the local data.
pub fn tilted(f: Fam, local: &Site, beta_bar: &[f64], gj: &[f64], gl: &[f64]) -> Mat {
    let d = local.d();
    let th = cat(beta_bar, gj);
    let mut m = zeros(d, d);
    for o in &local.obs {
        let r = ratio(f, o, beta_bar, gj, gl);
        let e = dot(&o.v, &th);
        let w = f.w(e);
        for a in 0..d {
            for b in 0..d {
                m[a][b] += r * w * o.v[a] * o.v[b];
            }
        }
    }
    m.iter()
        .map(|row| row.iter().map(|x| x / local.n() as f64).collect())
        .collect()
}

pub fn size_weights(sites: &[Site]) -> Vec<f64> {
    let n: usize = sites.iter().map(Site::n).sum();
    sites.iter().map(|s| s.n() as f64 / n as f64).collect()
}

/// The surrogate efficient score at one local site, assembled from scratch.
pub struct Surrogate {
    pub fam: Fam,
    pub p: usize,
    pub local_site: usize,
    pub local: Site,
    pub beta_bar: Vec<f64>,
    pub gammas: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub adjusters: Vec<Mat>,
    pub global: Vec<f64>,
    pub anchor: Vec<f64>,
}

impl Surrogate {
    pub fn new(f: Fam, sites: &[Site], local: usize, beta_bar: &[f64], gammas: &[Vec<f64>]) -> Self {
        let p = sites[0].p;
        let weights = size_weights(sites);
        let ls = &sites[local];
        let adjusters = gammas
            .iter()
            .map(|gj| adjuster(&tilted(f, ls, beta_bar, gj, &gammas[local]), p))
            .collect();
        let mut global = vec![0.0; p];
        for ((s, g), w) in sites.iter().zip(gammas).zip(&weights) {
            for (acc, v) in global.iter_mut().zip(efficient_score(f, s, beta_bar, g)) {
                *acc += w * v;
            }
        }
        let mut out = Self {
            fam: f,
            p,
            local_site: local,
            local: ls.clone(),
            beta_bar: beta_bar.to_vec(),
            gammas: gammas.to_vec(),
            weights,
            adjusters,
            global,
            anchor: vec![0.0; p],
        };
        out.anchor = out.u1(beta_bar);
        out
    }

    pub fn u1(&self, beta: &[f64]) -> Vec<f64> {
        let p = self.p;
        let gl = &self.gammas[self.local_site];
        let mut out = vec![0.0; p];
        for o in &self.local.obs {
            let (x, z) = o.v.split_at(p);
            for (j, gj) in self.gammas.iter().enumerate() {
                let r = ratio(self.fam, o, &self.beta_bar, gj, gl);
                let e = dot(x, beta) + dot(z, gj);
                let d1 = self.fam.d1(o.y, e);
                let az = matvec(&self.adjusters[j], z);
                for k in 0..p {
                    out[k] += self.weights[j] * r * d1 * (x[k] - az[k]);
                }
            }
        }
        out.iter().map(|v| v / self.local.n() as f64).collect()
    }

    pub fn equation(&self, beta: &[f64]) -> Vec<f64> {
        let u = self.u1(beta);
        (0..self.p).map(|k| u[k] - self.anchor[k] + self.global[k]).collect()
    }
}

/// Newton's method with a central finite-difference Jacobian.
pub fn find_root(f: &dyn Fn(&[f64]) -> Vec<f64>, x0: &[f64], tol: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    for _ in 0..100 {
        let fx = f(&x);
        if fx.iter().all(|v| v.abs() <= tol) {
            return x;
        }
        let n = x.len();
        let mut jac = zeros(n, n);
        for c in 0..n {
            let h = 1e-6 * (1.0 + x[c].abs());
            let mut up = x.clone();
            up[c] += h;
            let mut dn = x.clone();
            dn[c] -= h;
            let (fu, fd) = (f(&up), f(&dn));
            for r in 0..n {
                jac[r][c] = (fu[r] - fd[r]) / (2.0 * h);
            }
        }
        let step = solve(&jac, &fx);
        for (xi, s) in x.iter_mut().zip(step) {
            *xi -= s;
        }
    }
    panic!("oracle root search did not converge");
}

pub fn uniform_beta_mean(thetas: &[Vec<f64>], p: usize) -> Vec<f64> {
    (0..p)
        .map(|k| thetas.iter().map(|t| t[k]).sum::<f64>() / thetas.len() as f64)
        .collect()
}

/// Algorithm 1 with `t_max` rounds and uniform initial weights.
pub fn algorithm1(f: Fam, sites: &[Site], local: usize, t_max: usize) -> Vec<f64> {
    let p = sites[0].p;
    let thetas: Vec<Vec<f64>> = sites.iter().map(|s| mle(f, s)).collect();
    let mut beta_bar = uniform_beta_mean(&thetas, p);
    let mut gammas: Vec<Vec<f64>> = thetas.iter().map(|t| t[p..].to_vec()).collect();
    let mut beta = beta_bar.clone();
    for t in 1..=t_max {
        if t > 1 {
            beta_bar = beta.clone();
            gammas = sites
                .iter()
                .zip(&gammas)
                .map(|(s, g)| profile(f, s, &beta_bar, g))
                .collect();
        }
        let sur = Surrogate::new(f, sites, local, &beta_bar, &gammas);
        beta = find_root(&|b| sur.equation(b), &beta_bar, 1e-14);
    }
    beta
}

/// Joint maximizer of `sum_j (n_j / N) L_j(beta, gamma_j)` by dense Newton.
pub fn pooled(f: Fam, sites: &[Site]) -> Vec<f64> {
    let p = sites[0].p;
    let q = sites[0].d() - p;
    let k = sites.len();
    let dim = p + k * q;
    let w = size_weights(sites);
    let theta_j = |x: &[f64], j: usize| cat(&x[..p], &x[p + j * q..p + (j + 1) * q]);
    let value = |x: &[f64]| -> f64 {
        sites
            .iter()
            .enumerate()
            .map(|(j, s)| w[j] * loglik(f, s, &theta_j(x, j)))
            .sum()
    };
    let mut x = vec![0.0; dim];
    for _ in 0..200 {
        let mut g = vec![0.0; dim];
        let mut h = zeros(dim, dim);
        for (j, s) in sites.iter().enumerate() {
            let th = theta_j(&x, j);
            let gj = grad(f, s, &th);
            let ij = info(f, s, &th);
            let idx: Vec<usize> = (0..p).chain(p + j * q..p + (j + 1) * q).collect();
            for (a, &ia) in idx.iter().enumerate() {
                g[ia] += w[j] * gj[a];
                for (b, &ib) in idx.iter().enumerate() {
                    h[ia][ib] += w[j] * ij[a][b];
                }
            }
        }
        if g.iter().all(|v| v.abs() < 1e-14) {
            break;
        }
        let step = solve(&h, &g);
        let base = value(&x);
        let mut lam = 1.0;
        loop {
            let cand: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + lam * s).collect();
            if value(&cand) >= base - 1e-15 || lam < 1e-10 {
                x = cand;
                break;
            }
            lam *= 0.5;
        }
        if step.iter().all(|s| (lam * s).abs() < 1e-15) {
            break;
        }
    }
    x[..p].to_vec()
}

/// A small seeded instance from the simulation generator.
pub fn scenario(kind: FamilyKind, k: usize, n: usize, seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::common_common(seed);
    cfg.k = k;
    cfg.n = n;
    cfg.family = kind;
    cfg.replicates = 1;
    cfg
}

pub fn instance(kind: FamilyKind, k: usize, n: usize, seed: u64) -> Vec<SiteDataset> {
    generate_scenario(&scenario(kind, k, n, seed), 0).unwrap().datasets
}

pub fn instance_with(cfg: &ScenarioConfig, replicate: usize) -> Vec<SiteDataset> {
    generate_scenario(cfg, replicate).unwrap().datasets
}

pub fn homogeneous_scenario(kind: FamilyKind, k: usize, n: usize, seed: u64) -> ScenarioConfig {
    let mut cfg = scenario(kind, k, n, seed);
    cfg.heterogeneity = Heterogeneity::Scale { v: 0.0 };
    cfg
}
