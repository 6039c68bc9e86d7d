//! Matrix functionals g: S⁺_d → ℝ^r with gradients and Hessians.
//!
//! Derivatives are taken entrywise, then stored symmetrised: gradients as
//! (G + Gᵀ)/2 and Hessians averaged over j↔k, l↔m and (jk)↔(lm). Contractions
//! against the symmetric Σ/Θ/Υ tensors are unchanged by this, and a symmetric
//! perturbation c^{jk} = c^{kj} += h moves g by (G_jk + G_kj)·h.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_symmetric, eig_sorted, Mat, Tensor4, Vector};

pub trait MatrixFunctional: Send + Sync {
    fn name(&self) -> String;
    fn r_out(&self, d: usize) -> usize;
    /// Dimension the functional is defined for, if fixed.
    fn dim(&self) -> Option<usize> {
        None
    }
    fn value(&self, c: &Mat) -> Result<Vec<f64>>;
    fn gradient(&self, c: &Mat) -> Result<Vec<Mat>>;
    fn hessian(&self, c: &Mat) -> Result<Vec<Tensor4>>;
    /// True when g is singular on the boundary of S⁺_d and plug-ins must be floored.
    fn domain_guard(&self) -> bool {
        false
    }
    /// Names of the output components.
    fn labels(&self, d: usize) -> Vec<String> {
        let n = self.name();
        if self.r_out(d) == 1 {
            vec![n]
        } else {
            (1..=self.r_out(d)).map(|i| format!("{n}[{i}]")).collect()
        }
    }
}

fn sym_grad(g: Mat) -> Mat {
    (&g + g.transpose()) * 0.5
}

fn check_dim(c: &Mat, want: Option<usize>, name: &str) -> Result<()> {
    check_symmetric(c, 1e-10)?;
    if let Some(d) = want {
        if c.nrows() != d {
            return Err(Error::Shape(format!("{name} needs a {d}x{d} matrix, got {}x{}", c.nrows(), c.ncols())));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- built-ins

pub struct Trace;

impl MatrixFunctional for Trace {
    fn name(&self) -> String {
        "trace".into()
    }
    fn r_out(&self, _d: usize) -> usize {
        1
    }
    fn value(&self, c: &Mat) -> Result<Vec<f64>> {
        check_dim(c, None, "trace")?;
        Ok(vec![c.trace()])
    }
    fn gradient(&self, c: &Mat) -> Result<Vec<Mat>> {
        Ok(vec![Mat::identity(c.nrows(), c.nrows())])
    }
    fn hessian(&self, c: &Mat) -> Result<Vec<Tensor4>> {
        Ok(vec![Tensor4::zeros(c.nrows())])
    }
}

/// c^{jk}, 0-based indices.
pub struct Entry {
    pub j: usize,
    pub k: usize,
}

impl MatrixFunctional for Entry {
    fn name(&self) -> String {
        format!("entry({},{})", self.j + 1, self.k + 1)
    }
    fn r_out(&self, _d: usize) -> usize {
        1
    }
    fn value(&self, c: &Mat) -> Result<Vec<f64>> {
        check_dim(c, None, "entry")?;
        if self.j >= c.nrows() || self.k >= c.nrows() {
            return Err(Error::Shape(format!("entry index out of range for d = {}", c.nrows())));
        }
        Ok(vec![c[(self.j, self.k)]])
    }
    fn gradient(&self, c: &Mat) -> Result<Vec<Mat>> {
        let d = c.nrows();
        let mut g = Mat::zeros(d, d);
        g[(self.j, self.k)] = 1.0;
        Ok(vec![sym_grad(g)])
    }
    fn hessian(&self, c: &Mat) -> Result<Vec<Tensor4>> {
        Ok(vec![Tensor4::zeros(c.nrows())])
    }
}

/// trace(c²); equals c² when d = 1.
pub struct Square;

impl MatrixFunctional for Square {
    fn name(&self) -> String {
        "square".into()
    }
    fn r_out(&self, _d: usize) -> usize {
        1
    }
    fn value(&self, c: &Mat) -> Result<Vec<f64>> {
        check_dim(c, None, "square")?;
        Ok(vec![(c * c).trace()])
    }
    fn gradient(&self, c: &Mat) -> Result<Vec<Mat>> {
        Ok(vec![sym_grad(c.transpose() * 2.0)])
    }
    fn hessian(&self, c: &Mat) -> Result<Vec<Tensor4>> {
        let d = c.nrows();
        let mut t = Tensor4::zeros(d);
        for j in 0..d {
            for k in 0..d {
                t.set(j, k, k, j, 2.0);
            }
        }
        Ok(vec![t.symmetrized()])
    }
}

/// log c for d = 1.
pub struct LogScalar;

impl MatrixFunctional for LogScalar {
    fn name(&self) -> String {
        "log".into()
    }
    fn r_out(&self, _d: usize) -> usize {
        1
    }
    fn dim(&self) -> Option<usize> {
        Some(1)
    }
    fn domain_guard(&self) -> bool {
        true
    }
    fn value(&self, c: &Mat) -> Result<Vec<f64>> {
        check_dim(c, Some(1), "log")?;
        let x = c[(0, 0)];
        if !(x > 0.0) {
            return Err(Error::Domain(format!("log of nonpositive volatility {x}")));
        }
        Ok(vec![x.ln()])
    }
    fn gradient(&self, c: &Mat) -> Result<Vec<Mat>> {
        self.value(c)?;
        Ok(vec![Mat::from_element(1, 1, 1.0 / c[(0, 0)])])
    }
    fn hessian(&self, c: &Mat) -> Result<Vec<Tensor4>> {
        self.value(c)?;
        let x = c[(0, 0)];
        let mut t = Tensor4::zeros(1);
        t.set(0, 0, 0, 0, -1.0 / (x * x));
        Ok(vec![t])
    }
}

pub struct LogDet;

impl LogDet {
    fn inverse(c: &Mat) -> Result<Mat> {
        let (lam, q) = eig_sorted(c)?;
        if let Some(&bad) = lam.iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("logdet needs a positive definite matrix (eigenvalue {bad})")));
        }
        Ok(&q * Mat::from_diagonal(&lam.map(|x| 1.0 / x)) * q.transpose())
    }
}

impl MatrixFunctional for LogDet {
    fn name(&self) -> String {
        "logdet".into()
    }
    fn r_out(&self, _d: usize) -> usize {
        1
    }
    fn domain_guard(&self) -> bool {
        true
    }
    fn value(&self, c: &Mat) -> Result<Vec<f64>> {
        check_dim(c, None, "logdet")?;
        let (lam, _) = eig_sorted(c)?;
        if let Some(&bad) = lam.iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("logdet needs a positive definite matrix (eigenvalue {bad})")));
        }
        Ok(vec![lam.iter().map(|x| x.ln()).sum()])
    }
    fn gradient(&self, c: &Mat) -> Result<Vec<Mat>> {
        Ok(vec![sym_grad(Self::inverse(c)?.transpose())])
    }
    fn hessian(&self, c: &Mat) -> Result<Vec<Tensor4>> {
        let inv = Self::inverse(c)?;
        let d = c.nrows();
        let mut t = Tensor4::zeros(d);
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    for m in 0..d {
                        t.set(j, k, l, m, -inv[(k, l)] * inv[(m, j)]);
                    }
                }
            }
        }
        Ok(vec![t.symmetrized()])
    }
}

/// (tr cos(wc), tr sin(wc)): the real and imaginary parts of tr e^{iwc}.
/// For d = 1 this is the Laplace transform of volatility at frequency w.
pub struct Laplace {
    pub w: f64,
}

impl MatrixFunctional for Laplace {
    fn name(&self) -> String {
        format!("laplace({})", self.w)
    }
    fn r_out(&self, _d: usize) -> usize {
        2
    }
    fn labels(&self, _d: usize) -> Vec<String> {
        vec![format!("laplace_re({})", self.w), format!("laplace_im({})", self.w)]
    }
    fn value(&self, c: &Mat) -> Result<Vec<f64>> {
        check_dim(c, None, "laplace")?;
        let (lam, _) = eig_sorted(c)?;
        Ok(vec![lam.iter().map(|x| (self.w * x).cos()).sum(), lam.iter().map(|x| (self.w * x).sin()).sum()])
    }
    fn gradient(&self, c: &Mat) -> Result<Vec<Mat>> {
        let w = self.w;
        let re = SpectralTrace {
            f1: Box::new(move |x: f64| -w * (w * x).sin()),
            f2: Box::new(move |x: f64| -w * w * (w * x).cos()),
        };
        let im = SpectralTrace {
            f1: Box::new(move |x: f64| w * (w * x).cos()),
            f2: Box::new(move |x: f64| -w * w * (w * x).sin()),
        };
        Ok(vec![re.gradient(c)?, im.gradient(c)?])
    }
    fn hessian(&self, c: &Mat) -> Result<Vec<Tensor4>> {
        let w = self.w;
        let re = SpectralTrace {
            f1: Box::new(move |x: f64| -w * (w * x).sin()),
            f2: Box::new(move |x: f64| -w * w * (w * x).cos()),
        };
        let im = SpectralTrace {
            f1: Box::new(move |x: f64| w * (w * x).cos()),
            f2: Box::new(move |x: f64| -w * w * (w * x).sin()),
        };
        Ok(vec![re.hessian(c)?, im.hessian(c)?])
    }
}

/// Derivatives of tr f(c) through divided differences of f′.
struct SpectralTrace {
    f1: Box<dyn Fn(f64) -> f64>,
    f2: Box<dyn Fn(f64) -> f64>,
}

impl SpectralTrace {
    fn gradient(&self, c: &Mat) -> Result<Mat> {
        let (lam, q) = eig_sorted(c)?;
        Ok(sym_grad(&q * Mat::from_diagonal(&lam.map(|x| (self.f1)(x))) * q.transpose()))
    }

    fn hessian(&self, c: &Mat) -> Result<Tensor4> {
        let (lam, q) = eig_sorted(c)?;
        let d = c.nrows();
        let scale = lam.iter().fold(1e-300f64, |m, x| m.max(x.abs()));
        let dd = Mat::from_fn(d, d, |a, b| {
            let (x, y) = (lam[a], lam[b]);
            if (x - y).abs() <= 1e-8 * scale {
                (self.f2)(0.5 * (x + y))
            } else {
                ((self.f1)(x) - (self.f1)(y)) / (x - y)
            }
        });
        let mut t = Tensor4::zeros(d);
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    for m in 0..d {
                        let mut s = 0.0;
                        for a in 0..d {
                            let qa = q[(l, a)] * q[(k, a)];
                            if qa == 0.0 {
                                continue;
                            }
                            for b in 0..d {
                                s += dd[(a, b)] * qa * q[(m, b)] * q[(j, b)];
                            }
                        }
                        t.set(j, k, l, m, s);
                    }
                }
            }
        }
        Ok(t.symmetrized())
    }
}

/// β = c_SS^{-1} c_SZ with S the first `split` coordinates; outputs row-major.
pub struct Beta {
    pub split: usize,
}

impl Beta {
    fn parts(&self, c: &Mat) -> Result<(Mat, Mat, Mat)> {
        let d = c.nrows();
        let s = self.split;
        if s == 0 {
            return Err(Error::Config("beta needs a nonempty S block".into()));
        }
        if s >= d {
            return Err(Error::Shape(format!("beta split {s} leaves no Z block for d = {d}")));
        }
        let a = c.view((0, 0), (s, s)).into_owned();
        let b = c.view((0, s), (s, d - s)).into_owned();
        let (lam, q) = eig_sorted(&a)?;
        if let Some(&bad) = lam.iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("beta needs c_SS positive definite (eigenvalue {bad})")));
        }
        let ainv = &q * Mat::from_diagonal(&lam.map(|x| 1.0 / x)) * q.transpose();
        Ok((ainv, b, a))
    }

    /// (dβ[E], d²β[E, F]) for symmetric directions E, F.
    fn directional(&self, c: &Mat, e: &Mat, f: &Mat) -> Result<(Mat, Mat, Mat)> {
        let (ainv, b, _) = self.parts(c)?;
        let d = c.nrows();
        let s = self.split;
        let beta = &ainv * &b;
        let blk = |m: &Mat| (m.view((0, 0), (s, s)).into_owned(), m.view((0, s), (s, d - s)).into_owned());
        let (ae, be) = blk(e);
        let (af, bf) = blk(f);
        let de = &ainv * (be - &ae * &beta);
        let df = &ainv * (bf - &af * &beta);
        let dd = -(&ainv * &af * &de) - (&ainv * &ae * &df);
        Ok((de, df, dd))
    }
}

/// Symmetric basis direction for the unordered pair {j, k} and its weight
/// (number of raw entries it moves).
fn sym_dir(d: usize, j: usize, k: usize) -> (Mat, f64) {
    let mut e = Mat::zeros(d, d);
    e[(j, k)] = 1.0;
    e[(k, j)] = 1.0;
    (e, if j == k { 1.0 } else { 2.0 })
}

impl MatrixFunctional for Beta {
    fn name(&self) -> String {
        format!("beta({})", self.split)
    }
    fn r_out(&self, d: usize) -> usize {
        self.split * d.saturating_sub(self.split)
    }
    fn domain_guard(&self) -> bool {
        true
    }
    fn value(&self, c: &Mat) -> Result<Vec<f64>> {
        check_dim(c, None, "beta")?;
        let (ainv, b, _) = self.parts(c)?;
        let beta = ainv * b;
        Ok(row_major(&beta))
    }
    fn gradient(&self, c: &Mat) -> Result<Vec<Mat>> {
        let d = c.nrows();
        let r = self.split * (d - self.split);
        let mut out = vec![Mat::zeros(d, d); r];
        for j in 0..d {
            for k in j..d {
                let (e, w) = sym_dir(d, j, k);
                let (de, _, _) = self.directional(c, &e, &e)?;
                for (o, v) in row_major(&de).into_iter().enumerate() {
                    out[o][(j, k)] = v / w;
                    out[o][(k, j)] = v / w;
                }
            }
        }
        Ok(out)
    }
    fn hessian(&self, c: &Mat) -> Result<Vec<Tensor4>> {
        let d = c.nrows();
        let r = self.split * (d - self.split);
        let mut out = vec![Tensor4::zeros(d); r];
        let pairs: Vec<(usize, usize)> = (0..d).flat_map(|j| (j..d).map(move |k| (j, k))).collect();
        for &(j, k) in &pairs {
            let (e, we) = sym_dir(d, j, k);
            for &(l, m) in &pairs {
                let (f, wf) = sym_dir(d, l, m);
                let (_, _, dd) = self.directional(c, &e, &f)?;
                for (o, v) in row_major(&dd).into_iter().enumerate() {
                    let v = v / (we * wf);
                    for (a, b2) in [(j, k), (k, j)] {
                        for (x, y) in [(l, m), (m, l)] {
                            out[o].set(a, b2, x, y, v);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn row_major(m: &Mat) -> Vec<f64> {
    let (r, c) = m.shape();
    (0..r * c).map(|i| m[(i / c, i % c)]).collect()
}

// ---------------------------------------------------------------- spectral

/// Eigenvalue clusters K_h = {r_{h−1}+1, …, r_h}; stored as 0-based boundaries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub bounds: Vec<usize>,
}

impl ClusterSpec {
    /// From cluster sizes, e.g. [1, 1, 8].
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::Config(format!("cluster sizes must be positive, got {sizes:?}")));
        }
        let mut bounds = vec![0];
        for s in sizes {
            bounds.push(bounds.last().unwrap() + s);
        }
        Ok(ClusterSpec { bounds })
    }

    pub fn singletons(d: usize) -> Self {
        ClusterSpec { bounds: (0..=d).collect() }
    }

    pub fn parse(spec: &str) -> Result<Self> {
        let sizes: std::result::Result<Vec<usize>, _> = spec.split(',').map(|s| s.trim().parse()).collect();
        Self::from_sizes(&sizes.map_err(|_| Error::Config(format!("cannot parse cluster spec {spec:?}")))?)
    }

    pub fn k(&self) -> usize {
        self.bounds.len() - 1
    }
    pub fn d(&self) -> usize {
        *self.bounds.last().unwrap()
    }
    pub fn members(&self, h: usize) -> std::ops::Range<usize> {
        self.bounds[h]..self.bounds[h + 1]
    }
    pub fn size(&self, h: usize) -> usize {
        self.bounds[h + 1] - self.bounds[h]
    }
    pub fn cluster_of(&self, r: usize) -> usize {
        (0..self.k()).find(|&h| self.members(h).contains(&r)).unwrap()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.bounds[0] != 0 || self.bounds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("cluster boundaries must be strictly increasing from 0".into()));
        }
        if self.d() != d {
            return Err(Error::Config(format!("clusters cover {} eigenvalues, matrix has {d}", self.d())));
        }
        Ok(())
    }
}

pub const GAP_TOL_REL: f64 = 1e-6;

pub fn gap_tol(c: &Mat, rel: f64) -> f64 {
    rel * c.trace().abs().max(f64::MIN_POSITIVE)
}

/// Smallest gap between adjacent clusters.
pub fn min_cluster_gap(lam: &Vector, cl: &ClusterSpec) -> f64 {
    (1..cl.k()).map(|h| lam[cl.bounds[h] - 1] - lam[cl.bounds[h]]).fold(f64::INFINITY, f64::min)
}

/// Cluster-averaged eigenvalues F_h.
pub struct EigenvalueFunctional {
    pub clusters: ClusterSpec,
    pub gap_rel: f64,
}

impl EigenvalueFunctional {
    pub fn new(clusters: ClusterSpec) -> Self {
        EigenvalueFunctional { clusters, gap_rel: GAP_TOL_REL }
    }

    fn decompose(&self, c: &Mat) -> Result<(Vector, Mat)> {
        check_symmetric(c, 1e-10)?;
        self.clusters.validate(c.nrows())?;
        let (lam, q) = eig_sorted(c)?;
        let gap = min_cluster_gap(&lam, &self.clusters);
        let tol = gap_tol(c, self.gap_rel);
        if gap <= tol {
            return Err(Error::Degeneracy(format!("inter-cluster eigenvalue gap {gap:e} below tolerance {tol:e}")));
        }
        Ok((lam, q))
    }
}

impl MatrixFunctional for EigenvalueFunctional {
    fn name(&self) -> String {
        "eigenvalues".into()
    }
    fn r_out(&self, _d: usize) -> usize {
        self.clusters.k()
    }
    fn dim(&self) -> Option<usize> {
        Some(self.clusters.d())
    }
    fn labels(&self, _d: usize) -> Vec<String> {
        (1..=self.clusters.k()).map(|h| format!("lambda{h}")).collect()
    }
    fn value(&self, c: &Mat) -> Result<Vec<f64>> {
        let (lam, _) = self.decompose(c)?;
        Ok((0..self.clusters.k())
            .map(|h| self.clusters.members(h).map(|r| lam[r]).sum::<f64>() / self.clusters.size(h) as f64)
            .collect())
    }
    fn gradient(&self, c: &Mat) -> Result<Vec<Mat>> {
        let (_, q) = self.decompose(c)?;
        let d = c.nrows();
        Ok((0..self.clusters.k())
            .map(|h| {
                let mut g = Mat::zeros(d, d);
                for r in self.clusters.members(h) {
                    let v = q.column(r);
                    g += v * v.transpose();
                }
                g / self.clusters.size(h) as f64
            })
            .collect())
    }
    fn hessian(&self, c: &Mat) -> Result<Vec<Tensor4>> {
        let (lam, q) = self.decompose(c)?;
        let d = c.nrows();
        let mut out = Vec::with_capacity(self.clusters.k());
        for h in 0..self.clusters.k() {
            let mut t = Tensor4::zeros(d);
            let inside = self.clusters.members(h);
            for r in inside.clone() {
                for v in 0..d {
                    if inside.contains(&v) {
                        continue;
                    }
                    let w = 1.0 / (lam[r] - lam[v]);
                    for j in 0..d {
                        for k in 0..d {
                            for l in 0..d {
                                for m in 0..d {
                                    let add = q[(j, r)] * q[(l, r)] * q[(k, v)] * q[(m, v)]
                                        + q[(j, v)] * q[(l, v)] * q[(k, r)] * q[(m, r)];
                                    t.flat[(j * d + k, l * d + m)] += w * add;
                                }
                            }
                        }
                    }
                }
            }
            out.push(t.scale(1.0 / self.clusters.size(h) as f64).symmetrized());
        }
        Ok(out)
    }
}

/// Unit eigenvector q^k (0-based k), signed by the module-wide rule.
pub struct EigenvectorFunctional {
    pub k: usize,
    pub gap_rel: f64,
}

impl EigenvectorFunctional {
    pub fn new(k: usize) -> Self {
        EigenvectorFunctional { k, gap_rel: GAP_TOL_REL }
    }

    fn decompose(&self, c: &Mat) -> Result<(Vector, Mat)> {
        check_symmetric(c, 1e-10)?;
        let d = c.nrows();
        if self.k >= d {
            return Err(Error::Shape(format!("eigenvector index {} out of range for d = {d}", self.k + 1)));
        }
        let (lam, q) = eig_sorted(c)?;
        let tol = gap_tol(c, self.gap_rel);
        let r = self.k;
        let mut gap = f64::INFINITY;
        if r > 0 {
            gap = gap.min(lam[r - 1] - lam[r]);
        }
        if r + 1 < d {
            gap = gap.min(lam[r] - lam[r + 1]);
        }
        if gap <= tol {
            return Err(Error::Degeneracy(format!(
                "eigenvalue {} is not simple (gap {gap:e} below {tol:e})",
                self.k + 1
            )));
        }
        Ok((lam, q))
    }
}

/// (λ^v I − c)^† = Σ_{b≠v} q^b q^bᵀ / (λ^v − λ^b)
fn pinv_shift(lam: &Vector, q: &Mat, v: usize) -> Mat {
    let d = lam.len();
    let mut p = Mat::zeros(d, d);
    for b in 0..d {
        if b == v {
            continue;
        }
        let col = q.column(b);
        p += (col * col.transpose()) / (lam[v] - lam[b]);
    }
    p
}

impl MatrixFunctional for EigenvectorFunctional {
    fn name(&self) -> String {
        format!("eigenvector({})", self.k + 1)
    }
    fn r_out(&self, d: usize) -> usize {
        d
    }
    fn value(&self, c: &Mat) -> Result<Vec<f64>> {
        let (_, q) = self.decompose(c)?;
        Ok(q.column(self.k).iter().cloned().collect())
    }
    fn gradient(&self, c: &Mat) -> Result<Vec<Mat>> {
        let (lam, q) = self.decompose(c)?;
        let d = c.nrows();
        let r = self.k;
        let mut out = vec![Mat::zeros(d, d); d];
        for v in 0..d {
            if v == r {
                continue;
            }
            let w = 1.0 / (lam[r] - lam[v]);
            for (a, g) in out.iter_mut().enumerate() {
                for j in 0..d {
                    for k in 0..d {
                        g[(j, k)] += w * q[(j, v)] * q[(k, r)] * q[(a, v)];
                    }
                }
            }
        }
        Ok(out.into_iter().map(sym_grad).collect())
    }
    fn hessian(&self, c: &Mat) -> Result<Vec<Tensor4>> {
        let (lam, q) = self.decompose(c)?;
        let d = c.nrows();
        let r = self.k;
        let pinv: Vec<Mat> = (0..d).map(|v| pinv_shift(&lam, &q, v)).collect();
        let mut out = vec![Tensor4::zeros(d); d];
        for (a, t) in out.iter_mut().enumerate() {
            for j in 0..d {
                for k in 0..d {
                    let qrk = q[(k, r)];
                    for l in 0..d {
                        for m in 0..d {
                            let mut s = pinv[r][(k, l)] * pinv[r][(j, a)] * q[(m, r)];
                            for v in 0..d {
                                if v == r {
                                    continue;
                                }
                                let g1 = 1.0 / (lam[r] - lam[v]);
                                let (qvj, qvm, qva) = (q[(j, v)], q[(m, v)], q[(a, v)]);
                                s += g1 * g1 * (q[(l, v)] * qvm * qvj * qrk - qvj * qrk * q[(l, r)] * q[(m, r)]) * qva;
                                s += g1 * qvm * qvj * qrk * pinv[v][(l, a)];
                                s += g1 * pinv[v][(j, l)] * qvm * qrk * qva;
                            }
                            t.set(j, k, l, m, s);
                        }
                    }
                }
            }
            *t = t.symmetrized();
        }
        Ok(out)
    }
}

/// Several functionals evaluated side by side.
pub struct Stacked {
    pub parts: Vec<Box<dyn MatrixFunctional>>,
}

impl MatrixFunctional for Stacked {
    fn name(&self) -> String {
        self.parts.iter().map(|p| p.name()).collect::<Vec<_>>().join("+")
    }
    fn r_out(&self, d: usize) -> usize {
        self.parts.iter().map(|p| p.r_out(d)).sum()
    }
    fn domain_guard(&self) -> bool {
        self.parts.iter().any(|p| p.domain_guard())
    }
    fn labels(&self, d: usize) -> Vec<String> {
        self.parts.iter().flat_map(|p| p.labels(d)).collect()
    }
    fn value(&self, c: &Mat) -> Result<Vec<f64>> {
        let mut v = vec![];
        for p in &self.parts {
            v.extend(p.value(c)?);
        }
        Ok(v)
    }
    fn gradient(&self, c: &Mat) -> Result<Vec<Mat>> {
        let mut v = vec![];
        for p in &self.parts {
            v.extend(p.gradient(c)?);
        }
        Ok(v)
    }
    fn hessian(&self, c: &Mat) -> Result<Vec<Tensor4>> {
        let mut v = vec![];
        for p in &self.parts {
            v.extend(p.hessian(c)?);
        }
        Ok(v)
    }
}

/// Cluster-averaged eigenvalues λ̄ per cluster.
pub fn eigenvalue_functional(clusters: ClusterSpec) -> EigenvalueFunctional {
    EigenvalueFunctional::new(clusters)
}

/// q^k for a 1-based index k.
pub fn eigenvector_functional(k: usize) -> Result<EigenvectorFunctional> {
    if k == 0 {
        return Err(Error::Config("eigenvector index is 1-based".into()));
    }
    Ok(EigenvectorFunctional::new(k - 1))
}

/// Parameters for `builtin`; only the ones relevant to the chosen name are read.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FunctionalParams {
    /// 1-based (j, k) for `entry`.
    pub entry: Option<(usize, usize)>,
    pub w: Option<f64>,
    pub split: Option<usize>,
    pub clusters: Option<String>,
    /// 1-based eigenvector index.
    pub index: Option<usize>,
}

pub fn builtin(name: &str, params: &FunctionalParams) -> Result<Box<dyn MatrixFunctional>> {
    Ok(match name {
        "trace" => Box::new(Trace),
        "entry" => {
            let (j, k) = params.entry.unwrap_or((1, 1));
            if j == 0 || k == 0 {
                return Err(Error::Config("entry indices are 1-based".into()));
            }
            Box::new(Entry { j: j - 1, k: k - 1 })
        }
        "square" => Box::new(Square),
        "log" => Box::new(LogScalar),
        "logdet" => Box::new(LogDet),
        "laplace" => {
            let w = params.w.unwrap_or(1.0);
            if !w.is_finite() {
                return Err(Error::Config(format!("laplace frequency must be finite, got {w}")));
            }
            Box::new(Laplace { w })
        }
        "beta" => {
            let split = params.split.ok_or_else(|| Error::Config("beta needs --split".into()))?;
            if split == 0 {
                return Err(Error::Config("beta needs a nonempty S block".into()));
            }
            Box::new(Beta { split })
        }
        "eigenvalues" => {
            let spec = params.clusters.as_deref().ok_or_else(|| Error::Config("eigenvalues needs --clusters".into()))?;
            Box::new(EigenvalueFunctional::new(ClusterSpec::parse(spec)?))
        }
        "eigenvector" => {
            let k = params.index.unwrap_or(1);
            if k == 0 {
                return Err(Error::Config("eigenvector index is 1-based".into()));
            }
            Box::new(EigenvectorFunctional::new(k - 1))
        }
        other => {
            return Err(Error::Config(format!(
                "unknown functional {other:?} (trace, entry, square, log, logdet, laplace, beta, eigenvalues, eigenvector)"
            )))
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub grad_rel_err: f64,
    pub hess_rel_err: f64,
}

/// Compare analytic derivatives with central differences along the symmetric
/// basis directions (c^{jk} and c^{kj} moved together).
pub fn fd_check(f: &dyn MatrixFunctional, c: &Mat, h: f64) -> Result<FdReport> {
    let d = c.nrows();
    let grads = f.gradient(c)?;
    let hess = f.hessian(c)?;
    let dirs: Vec<Mat> = (0..d).flat_map(|j| (j..d).map(move |k| sym_dir(d, j, k).0)).collect();
    let eval = |m: &Mat| f.value(m);
    let (mut gerr, mut gscale) = (0.0f64, 0.0f64);
    for e in &dirs {
        let up = eval(&(c + e * h))?;
        let dn = eval(&(c - e * h))?;
        for (o, g) in grads.iter().enumerate() {
            let an: f64 = g.component_mul(e).sum();
            let fd = (up[o] - dn[o]) / (2.0 * h);
            gerr = gerr.max((an - fd).abs());
            gscale = gscale.max(an.abs());
        }
    }
    let (mut herr, mut hscale) = (0.0f64, 0.0f64);
    for (p, e) in dirs.iter().enumerate() {
        for fdir in &dirs[p..] {
            let pp = eval(&(c + e * h + fdir * h))?;
            let pm = eval(&(c + e * h - fdir * h))?;
            let mp = eval(&(c - e * h + fdir * h))?;
            let mm = eval(&(c - e * h - fdir * h))?;
            for (o, t) in hess.iter().enumerate() {
                let an = t.bilinear(e, fdir);
                let fd = (pp[o] - pm[o] - mp[o] + mm[o]) / (4.0 * h * h);
                herr = herr.max((an - fd).abs());
                hscale = hscale.max(an.abs());
            }
        }
    }
    let rel = |err: f64, scale: f64| if scale > 0.0 { err / scale } else { err };
    Ok(FdReport { grad_rel_err: rel(gerr, gscale), hess_rel_err: rel(herr, hscale) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(d: usize, v: &[f64]) -> Mat {
        Mat::from_row_slice(d, d, v)
    }

    fn random_pd(rng: &mut ChaCha8Rng, d: usize) -> Mat {
        let a = Mat::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + Mat::identity(d, d) * 0.5
    }

    #[test]
    fn trace_example() {
        let c = m(2, &[1.0, 0.0, 0.0, 2.0]);
        assert_eq!(Trace.value(&c).unwrap(), vec![3.0]);
        assert_eq!(Trace.gradient(&c).unwrap()[0], Mat::identity(2, 2));
        assert_eq!(Trace.hessian(&c).unwrap()[0].flat.norm(), 0.0);
    }

    #[test]
    fn square_scalar_example() {
        let c = m(1, &[0.4]);
        assert_abs_diff_eq!(Square.value(&c).unwrap()[0], 0.16, epsilon = 1e-15);
        assert_abs_diff_eq!(Square.gradient(&c).unwrap()[0][(0, 0)], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(Square.hessian(&c).unwrap()[0].get(0, 0, 0, 0), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn beta_example() {
        let c = m(2, &[1.0, 0.3, 0.3, 2.0]);
        assert_abs_diff_eq!(Beta { split: 1 }.value(&c).unwrap()[0], 0.3, epsilon = 1e-15);
        assert!(builtin("beta", &FunctionalParams { split: Some(0), ..Default::default() }).is_err());
    }

    #[test]
    fn eigenvalue_examples() {
        let f = EigenvalueFunctional::new(ClusterSpec::singletons(2));
        let c = m(2, &[3.0, 0.0, 0.0, 1.0]);
        assert_eq!(f.value(&c).unwrap(), vec![3.0, 1.0]);
        let g = &f.gradient(&c).unwrap()[0];
        assert_abs_diff_eq!(*g, m(2, &[1.0, 0.0, 0.0, 0.0]), epsilon = 1e-14);
        // raw ∂²_{12,12}λ¹ = 1/(3−1); the symmetrised value averages it with ∂²_{12,21} = 0
        let h = &f.hessian(&c).unwrap()[0];
        assert_abs_diff_eq!(h.get(0, 1, 0, 1) + h.get(0, 1, 1, 0), 0.5, epsilon = 1e-14);
        let f = EigenvalueFunctional::new(ClusterSpec::from_sizes(&[2, 1]).unwrap());
        let c = Mat::from_diagonal(&Vector::from_vec(vec![2.0, 2.0, 1.0]));
        assert_abs_diff_eq!(f.value(&c).unwrap()[0], 2.0, epsilon = 1e-14);
        let want = Mat::from_diagonal(&Vector::from_vec(vec![0.5, 0.5, 0.0]));
        assert_abs_diff_eq!(f.gradient(&c).unwrap()[0], want, epsilon = 1e-14);
    }

    #[test]
    fn eigenvector_examples() {
        let f = EigenvectorFunctional::new(0);
        let c = m(2, &[3.0, 0.0, 0.0, 1.0]);
        let g = f.gradient(&c).unwrap();
        // symmetric unit move of the off-diagonal pair shifts q¹ by e₂/2
        assert_abs_diff_eq!(g[0][(0, 1)] + g[0][(1, 0)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1][(0, 1)] + g[1][(1, 0)], 0.5, epsilon = 1e-15);
        assert!(matches!(f.value(&Mat::identity(3, 3)), Err(Error::Degeneracy(_))));
        let r = fd_check(&f, &c, 1e-5).unwrap();
        assert!(r.grad_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn fd_examples() {
        let r = fd_check(&Trace, &m(2, &[1.0, 0.2, 0.2, 2.0]), 1e-5).unwrap();
        assert!(r.grad_rel_err < 1e-9);
        let r = fd_check(&LogDet, &m(2, &[1.0, 0.0, 0.0, 2.0]), 1e-5).unwrap();
        assert!(r.grad_rel_err < 1e-6 && r.hess_rel_err < 1e-3, "{r:?}");
        let r = fd_check(&Laplace { w: 1.0 }, &m(1, &[0.2]), 1e-5).unwrap();
        assert!(r.grad_rel_err < 1e-6 && r.hess_rel_err < 1e-3, "{r:?}");
    }

    #[test]
    fn all_functionals_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let c = random_pd(&mut rng, 4);
            let fs: Vec<Box<dyn MatrixFunctional>> = vec![
                Box::new(Square),
                Box::new(LogDet),
                Box::new(Laplace { w: 0.7 }),
                Box::new(Beta { split: 2 }),
                Box::new(EigenvalueFunctional::new(ClusterSpec::singletons(4))),
                Box::new(EigenvectorFunctional::new(0)),
                Box::new(EigenvectorFunctional::new(2)),
            ];
            for f in &fs {
                let r = fd_check(f.as_ref(), &c, 1e-4).unwrap();
                assert!(r.grad_rel_err < 1e-5 && r.hess_rel_err < 1e-3, "{}: {r:?}", f.name());
            }
        }
    }

    #[test]
    fn singleton_eigenvalues_sum_to_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_pd(&mut rng, 5);
        let v = EigenvalueFunctional::new(ClusterSpec::singletons(5)).value(&c).unwrap();
        assert_abs_diff_eq!(v.iter().sum::<f64>(), c.trace(), epsilon = 1e-10);
    }

    #[test]
    fn unknown_name_rejected() {
        assert!(matches!(builtin("cubic", &FunctionalParams::default()), Err(Error::Config(_))));
        let p = FunctionalParams { w: Some(f64::NAN), ..Default::default() };
        assert!(builtin("laplace", &p).is_err());
    }
}
