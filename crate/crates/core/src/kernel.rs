//! Smoothing kernels: profiles φ on [0,1], their discretised weights, and the
//! scalar constants φ₀(0), φ₁(0), Φ_lm, Ψ_lm.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    /// φ(s) = min(s, 1−s)
    MinMax,
    /// Piecewise cubic Hermite through (s, φ, φ′) nodes. A repeated abscissa
    /// marks a breakpoint where φ′ jumps.
    Table { s: Vec<f64>, phi: Vec<f64>, dphi: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelProfile {
    name: String,
    shape: Shape,
    scale: f64,
}

impl KernelProfile {
    pub fn minmax() -> Self {
        KernelProfile { name: "minmax".into(), shape: Shape::MinMax, scale: 1.0 }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "minmax" => Ok(Self::minmax()),
            other => Err(Error::Config(format!("unknown kernel {other:?} (built-in: minmax)"))),
        }
    }

    /// Tabulated profile. Nodes must be nondecreasing in s, start at 0 and end
    /// at 1; a node repeated twice declares a breakpoint of φ′.
    pub fn from_table(name: &str, s: Vec<f64>, phi: Vec<f64>, dphi: Vec<f64>) -> Result<Self> {
        if s.len() != phi.len() || s.len() != dphi.len() || s.len() < 2 {
            return Err(Error::Format("kernel table columns must have equal length ≥ 2".into()));
        }
        if s.iter().chain(&phi).chain(&dphi).any(|x| !x.is_finite()) {
            return Err(Error::Data("kernel table has non-finite entries".into()));
        }
        if s[0] != 0.0 || *s.last().unwrap() != 1.0 {
            return Err(Error::Data("kernel table must span s ∈ [0, 1]".into()));
        }
        for w in s.windows(3) {
            if w[0] == w[1] && w[1] == w[2] {
                return Err(Error::Data("kernel table repeats an abscissa more than twice".into()));
            }
        }
        if s.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Data("kernel table abscissae must be nondecreasing".into()));
        }
        for i in 1..s.len() {
            if s[i] == s[i - 1] && (phi[i] - phi[i - 1]).abs() > 1e-12 {
                return Err(Error::Data(format!("kernel φ discontinuous at s = {}", s[i])));
            }
        }
        // Hermite interpolation makes φ′ the exact derivative of the interpolant,
        // so consistency of the table itself is checked per segment: the secant
        // slope must agree with the mean of the endpoint derivatives.
        let dscale = dphi.iter().fold(1e-300f64, |m, x| m.max(x.abs()));
        for i in 0..s.len() - 1 {
            let h = s[i + 1] - s[i];
            if h <= 0.0 {
                continue;
            }
            let secant = (phi[i + 1] - phi[i]) / h;
            let mean = 0.5 * (dphi[i] + dphi[i + 1]);
            if (secant - mean).abs() > 5e-3 * dscale {
                return Err(Error::Data(format!(
                    "φ′ inconsistent with φ on [{}, {}]: secant {secant}, mean derivative {mean}",
                    s[i],
                    s[i + 1]
                )));
            }
        }
        let p = KernelProfile { name: name.into(), shape: Shape::Table { s, phi, dphi }, scale: 1.0 };
        p.validate()?;
        Ok(p)
    }

    /// CSV with header `s,phi,phi_prime`; breakpoints are declared by listing
    /// the same s twice with the left and right derivatives.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path.as_ref()).map_err(|e| Error::Format(e.to_string()))?;
        let (mut s, mut phi, mut dphi) = (vec![], vec![], vec![]);
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            if rec.len() != 3 {
                return Err(Error::Format("kernel CSV rows need 3 fields: s,phi,phi_prime".into()));
            }
            let p = |i: usize| -> Result<f64> {
                rec[i].trim().parse().map_err(|_| Error::Format(format!("cannot parse {:?}", &rec[i])))
            };
            s.push(p(0)?);
            phi.push(p(1)?);
            dphi.push(p(2)?);
        }
        let name = path.as_ref().file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_table(&name, s, phi, dphi)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The same shape multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        KernelProfile { name: format!("{}*{}", self.name, factor), shape: self.shape.clone(), scale: self.scale * factor }
    }

    pub fn phi(&self, s: f64) -> f64 {
        if !(0.0..=1.0).contains(&s) {
            return 0.0;
        }
        self.scale * self.eval(s).0
    }

    pub fn phi_prime(&self, s: f64) -> f64 {
        if !(0.0..=1.0).contains(&s) {
            return 0.0;
        }
        self.scale * self.eval(s).1
    }

    fn eval(&self, s: f64) -> (f64, f64) {
        match &self.shape {
            Shape::MinMax => {
                if s < 0.5 {
                    (s, 1.0)
                } else {
                    (1.0 - s, -1.0)
                }
            }
            Shape::Table { s: xs, phi, dphi } => {
                // last node with xs[i] <= s, then step back so the segment has length
                let mut i = xs.partition_point(|&x| x <= s).saturating_sub(1);
                if i + 1 >= xs.len() {
                    i = xs.len() - 2;
                }
                while i > 0 && xs[i + 1] == xs[i] {
                    i -= 1;
                }
                if xs[i + 1] == xs[i] {
                    i += 1;
                }
                let (x0, x1) = (xs[i], xs[i + 1]);
                let h = x1 - x0;
                let t = (s - x0) / h;
                let (p0, p1, m0, m1) = (phi[i], phi[i + 1], dphi[i] * h, dphi[i + 1] * h);
                let t2 = t * t;
                let t3 = t2 * t;
                let v = (2.0 * t3 - 3.0 * t2 + 1.0) * p0
                    + (t3 - 2.0 * t2 + t) * m0
                    + (-2.0 * t3 + 3.0 * t2) * p1
                    + (t3 - t2) * m1;
                let dv = ((6.0 * t2 - 6.0 * t) * p0
                    + (3.0 * t2 - 4.0 * t + 1.0) * m0
                    + (-6.0 * t2 + 6.0 * t) * p1
                    + (3.0 * t2 - 2.0 * t) * m1)
                    / h;
                (v, dv)
            }
        }
    }

    /// Points where the integrand pieces change: 0, 1 and every interior node.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b = match &self.shape {
            Shape::MinMax => vec![0.0, 0.5, 1.0],
            Shape::Table { s, .. } => s.clone(),
        };
        b.dedup();
        b
    }

    /// Declared kinks of φ (jumps of φ′), excluding the end points.
    fn kinks(&self) -> Vec<f64> {
        match &self.shape {
            Shape::MinMax => vec![0.5],
            Shape::Table { s, .. } => s.windows(2).filter(|w| w[0] == w[1]).map(|w| w[0]).collect(),
        }
    }

    /// Support, energy and derivative-consistency checks on a 10⁴-point mesh.
    pub fn validate(&self) -> Result<()> {
        let peak = (0..=1000).map(|i| self.phi(i as f64 / 1000.0).abs()).fold(0.0, f64::max);
        if self.phi(0.0).abs() > 1e-12 * peak.max(1.0) || self.phi(1.0).abs() > 1e-12 * peak.max(1.0) {
            return Err(Error::Data("kernel must vanish at 0 and 1".into()));
        }
        let energy = simpson(|s| self.phi(s).powi(2), &self.breakpoints());
        if !(energy > 0.0) {
            return Err(Error::Data("kernel has zero energy ∫φ²".into()));
        }
        let kinks = self.kinks();
        let h = 1e-6;
        let mesh = 10_000;
        let dscale = (0..=mesh).map(|i| self.phi_prime(i as f64 / mesh as f64).abs()).fold(1.0, f64::max);
        let mut prev: Option<(f64, f64)> = None;
        for i in 1..mesh {
            let s = i as f64 / mesh as f64;
            if kinks.iter().any(|&b| (s - b).abs() < 2.0 * h) {
                prev = None;
                continue;
            }
            let fd = (self.phi(s + h) - self.phi(s - h)) / (2.0 * h);
            if (fd - self.phi_prime(s)).abs() > 1e-6 * dscale {
                return Err(Error::Data(format!(
                    "φ′ inconsistent with φ at s = {s}: finite difference {fd}, tabulated {}",
                    self.phi_prime(s)
                )));
            }
            let dp = self.phi_prime(s);
            if let Some((ps, pd)) = prev {
                let crosses = kinks.iter().any(|&b| ps < b && b < s);
                if !crosses && (dp - pd).abs() / (s - ps) > 1e8 * dscale {
                    return Err(Error::Data(format!("φ′ not Lipschitz near s = {s}")));
                }
            }
            prev = Some((s, dp));
        }
        Ok(())
    }
}

fn simpson(f: impl Fn(f64) -> f64, breaks: &[f64]) -> f64 {
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        let n = 64;
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        total += acc * h / 3.0;
    }
    total
}

/// φ^n_h = φ(h/lₙ) and friends.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteKernel {
    pub l_n: usize,
    /// φ^n_h for h = 1..lₙ−1
    pub weights: Vec<f64>,
    /// φ^n_{h+1} − φ^n_h for h = 0..lₙ−1
    pub diff_weights: Vec<f64>,
    pub psi_n: f64,
}

impl DiscreteKernel {
    pub fn new(profile: &KernelProfile, l_n: usize) -> Result<Self> {
        if l_n < 2 {
            return Err(Error::Tuning(format!("window length l_n = {l_n} must be at least 2")));
        }
        let l = l_n as f64;
        let full: Vec<f64> = (0..=l_n)
            .map(|h| if h == 0 || h == l_n { 0.0 } else { profile.phi(h as f64 / l) })
            .collect();
        let weights = full[1..l_n].to_vec();
        let diff_weights: Vec<f64> = (0..l_n).map(|h| full[h + 1] - full[h]).collect();
        let psi_n: f64 = weights.iter().map(|w| w * w).sum();
        if !(psi_n > 0.0) {
            return Err(Error::Tuning(format!("ψₙ = {psi_n} is not positive for l_n = {l_n}")));
        }
        Ok(DiscreteKernel { l_n, weights, diff_weights, psi_n })
    }
}

pub fn discretize(profile: &KernelProfile, l_n: usize) -> Result<DiscreteKernel> {
    DiscreteKernel::new(profile, l_n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConstants {
    pub phi0_at_0: f64,
    pub phi1_at_0: f64,
    pub phi00: f64,
    pub phi01: f64,
    pub phi11: f64,
    pub psi00: f64,
    pub psi01: f64,
    pub psi11: f64,
}

impl KernelConstants {
    /// 2θΦ₀₀/φ₀(0)², the scale of the Σ tensor before θ.
    pub fn sigma_scale(&self) -> f64 {
        2.0 * self.phi00 / (self.phi0_at_0 * self.phi0_at_0)
    }
}

/// Agreement required between the full and half-mesh outer quadratures.
const FAIL_TOL: f64 = 1e-8;
const INNER_NODES: usize = 8;
const OUTER_NODES: usize = 16;

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration.
fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..m {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = m as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[m - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[m - 1 - i] = w[i];
    }
    (x, w)
}

/// Composite Gauss-Legendre over the pieces between consecutive breaks,
/// `panels_total` panels spread in proportion to piece length. Nodes are
/// interior, so jumps of the integrand at the breaks are never sampled.
fn piecewise<const K: usize>(f: &dyn Fn(f64) -> [f64; K], breaks: &[f64], panels_total: usize, nodes: usize) -> [f64; K] {
    let (x, w) = gauss_legendre(nodes);
    let mut total = [0.0; K];
    let span = breaks.last().unwrap() - breaks[0];
    for seg in breaks.windows(2) {
        let len = seg[1] - seg[0];
        if len <= 0.0 {
            continue;
        }
        let panels = ((panels_total as f64) * len / span).ceil().max(1.0) as usize;
        let h = len / panels as f64;
        for p in 0..panels {
            let mid = seg[0] + (p as f64 + 0.5) * h;
            for (xi, wi) in x.iter().zip(&w) {
                let v = f(mid + 0.5 * h * xi);
                for q in 0..K {
                    total[q] += 0.5 * h * wi * v[q];
                }
            }
        }
    }
    total
}

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    v
}

/// (φ₀(s), φ₁(s)) = (∫ₛ¹ φ(u)φ(u−s) du, ∫ₛ¹ φ′(u)φ′(u−s) du)
pub fn autocorrelations(profile: &KernelProfile, s: f64) -> [f64; 2] {
    if s >= 1.0 {
        return [0.0, 0.0];
    }
    let b = profile.breakpoints();
    let mut pts: Vec<f64> = vec![s, 1.0];
    for &x in &b {
        if x > s && x < 1.0 {
            pts.push(x);
        }
        if x + s > s && x + s < 1.0 {
            pts.push(x + s);
        }
    }
    let pts = sorted_unique(pts);
    let f = |u: f64| [profile.phi(u) * profile.phi(u - s), profile.phi_prime(u) * profile.phi_prime(u - s)];
    piecewise::<2>(&f, &pts, pts.len() - 1, INNER_NODES)
}

pub fn constants(profile: &KernelProfile, mesh: usize) -> Result<KernelConstants> {
    if mesh < 1000 {
        return Err(Error::Config(format!("quadrature mesh {mesh} below the minimum of 1000")));
    }
    let b = profile.breakpoints();
    let mut pts = vec![0.0, 1.0];
    for &x in &b {
        for &y in &b {
            let dlt = x - y;
            if dlt > 0.0 && dlt < 1.0 {
                pts.push(dlt);
            }
        }
    }
    let pts = sorted_unique(pts);
    let f = |s: f64| {
        let [p0, p1] = autocorrelations(profile, s);
        [p0 * p0, p0 * p1, p1 * p1, s * p0 * p0, s * p0 * p1, s * p1 * p1]
    };
    let v = piecewise::<6>(&f, &pts, mesh, OUTER_NODES);
    let coarse = piecewise::<6>(&f, &pts, mesh / 2, OUTER_NODES);
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let change = v.iter().zip(&coarse).fold(0.0f64, |m, (a, b)| m.max((a - b).abs() / a.abs().max(1e-6 * scale)));
    if change > FAIL_TOL {
        return Err(Error::Numeric(format!("kernel quadrature did not converge (relative change {change:e})")));
    }
    let [p0, p1] = autocorrelations(profile, 0.0);
    let kc = KernelConstants {
        phi0_at_0: p0,
        phi1_at_0: p1,
        phi00: v[0],
        phi01: v[1],
        phi11: v[2],
        psi00: v[3],
        psi01: v[4],
        psi11: v[5],
    };
    if [kc.phi0_at_0, kc.phi1_at_0, kc.phi00, kc.phi11].iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Numeric("kernel constants not strictly positive".into()));
    }
    Ok(kc)
}
