//! Phase-space Hamiltonians H_κ(q,p) = ½|p − κa(q)|² + V(q) with polynomial V and linear gauge a.
//!
//! Phase points are stored as flat slices `x = [q₁..qₙ, p₁..pₙ]` on the hot paths; [`PhasePoint`]
//! is the checked public wrapper.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_DEGREE: u32 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Monomial {
    pub exponents: Vec<u32>,
    pub coefficient: f64,
}

impl Monomial {
    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }

    fn eval(&self, q: &[f64]) -> f64 {
        self.exponents
            .iter()
            .zip(q)
            .fold(self.coefficient, |acc, (&e, &x)| acc * x.powi(e as i32))
    }

    /// ∂/∂q_i of the monomial at q.
    fn partial(&self, i: usize, q: &[f64]) -> f64 {
        let e = self.exponents[i];
        if e == 0 {
            return 0.0;
        }
        let mut v = self.coefficient * e as f64;
        for (j, (&ej, &x)) in self.exponents.iter().zip(q).enumerate() {
            let p = if j == i { ej - 1 } else { ej };
            v *= x.powi(p as i32);
        }
        v
    }

    fn second_partial(&self, i: usize, k: usize, q: &[f64]) -> f64 {
        let mut ex = self.exponents.clone();
        let mut v = self.coefficient;
        for idx in [i, k] {
            if ex[idx] == 0 {
                return 0.0;
            }
            v *= ex[idx] as f64;
            ex[idx] -= 1;
        }
        ex.iter().zip(q).fold(v, |acc, (&e, &x)| acc * x.powi(e as i32))
    }
}

/// Polynomial confining potential of total degree ≤ 4, with min V ≥ 1 enforced by the offset.
#[derive(Clone, Debug)]
pub struct PotentialModel {
    dim: usize,
    terms: Vec<Monomial>,
    offset: f64,
    raised_by: f64,
    minimizer: Vec<f64>,
    critical_values: Vec<f64>,
}

impl PotentialModel {
    /// Builds the potential from `(exponents, coefficient)` pairs. The constant term becomes the
    /// offset, which is raised when needed so that min V = 1 at least.
    pub fn new<I>(dim: usize, coefficients: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<u32>, f64)>,
    {
        if dim == 0 {
            return Err(Error::InvalidSpec("dimension must be positive".into()));
        }
        let mut merged: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for (exps, c) in coefficients {
            if exps.len() != dim {
                return Err(Error::InvalidSpec(format!(
                    "monomial {exps:?} has {} exponents, dimension is {dim}",
                    exps.len()
                )));
            }
            if !c.is_finite() {
                return Err(Error::InvalidSpec(format!("coefficient of {exps:?} is not finite")));
            }
            if exps.iter().sum::<u32>() > MAX_DEGREE {
                return Err(Error::InvalidSpec(format!("monomial {exps:?} exceeds total degree 4")));
            }
            *merged.entry(exps).or_insert(0.0) += c;
        }
        let mut offset = 0.0;
        let mut terms = Vec::new();
        for (exps, c) in merged {
            if c == 0.0 {
                continue;
            }
            if exps.iter().all(|&e| e == 0) {
                offset += c;
            } else {
                terms.push(Monomial { exponents: exps, coefficient: c });
            }
        }
        let mut model = PotentialModel {
            dim,
            terms,
            offset,
            raised_by: 0.0,
            minimizer: vec![0.0; dim],
            critical_values: Vec::new(),
        };
        model.check_confinement()?;
        let crit = model.find_critical_points();
        let (qmin, vmin) = crit
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .cloned()
            .ok_or_else(|| Error::InvalidSpec("could not locate the minimum of V".into()))?;
        if vmin < 1.0 {
            model.raised_by = 1.0 - vmin;
            model.offset += model.raised_by;
        }
        model.minimizer = qmin;
        let mut values: Vec<f64> = crit.iter().map(|c| c.1 + model.raised_by).collect();
        values.sort_by(f64::total_cmp);
        values.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * b.abs().max(1.0));
        model.critical_values = values;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[Monomial] {
        &self.terms
    }

    /// Constant term, including any raise applied for min V ≥ 1.
    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Amount added to the user's constant term to reach min V ≥ 1 (zero when untouched).
    pub fn offset_raised_by(&self) -> f64 {
        self.raised_by
    }

    pub fn minimizer(&self) -> &[f64] {
        &self.minimizer
    }

    pub fn minimum(&self) -> f64 {
        self.value(&self.minimizer)
    }

    /// Critical values of V, ascending. These are also the critical values of every H_κ.
    pub fn critical_values(&self) -> &[f64] {
        &self.critical_values
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn is_quadratic(&self) -> bool {
        self.degree() <= 2
    }

    pub fn value(&self, q: &[f64]) -> f64 {
        self.offset + self.terms.iter().map(|m| m.eval(q)).sum::<f64>()
    }

    pub fn gradient_into(&self, q: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.dim) {
            *o = self.terms.iter().map(|m| m.partial(i, q)).sum();
        }
    }

    pub fn gradient(&self, q: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        self.gradient_into(q, &mut g);
        g
    }

    pub fn hessian(&self, q: &[f64]) -> DMatrix<f64> {
        let n = self.dim;
        DMatrix::from_fn(n, n, |i, k| self.terms.iter().map(|m| m.second_partial(i, k, q)).sum())
    }

    pub fn laplacian(&self, q: &[f64]) -> f64 {
        (0..self.dim)
            .map(|i| self.terms.iter().map(|m| m.second_partial(i, i, q)).sum::<f64>())
            .sum()
    }

    /// Coefficients c_k(u) of V(r·u) = Σ_k c_k r^k along the ray with direction u.
    fn ray_coefficients(&self, u: &[f64]) -> [f64; 5] {
        let mut c = [0.0; 5];
        c[0] = self.offset;
        for m in &self.terms {
            c[m.degree() as usize] += m.eval(u);
        }
        c
    }

    fn coefficient_scale(&self) -> f64 {
        self.terms.iter().map(|m| m.coefficient.abs()).fold(0.0, f64::max).max(1e-300)
    }

    fn check_confinement(&self) -> Result<()> {
        let tol = 1e-12 * self.coefficient_scale();
        for u in sphere_directions(self.dim) {
            let c = self.ray_coefficients(&u);
            let ok = c[4] > tol || (c[4].abs() <= tol && c[3].abs() <= tol && c[2] > tol);
            if !ok {
                return Err(Error::InvalidSpec(format!(
                    "potential is not confining along direction {u:?} (leading part must be positive definite)"
                )));
            }
        }
        Ok(())
    }

    /// Radius beyond which V strictly increases along every sampled ray.
    fn monotone_radius(&self) -> f64 {
        let mut radius: f64 = 0.0;
        for u in sphere_directions(self.dim) {
            let c = self.ray_coefficients(&u);
            let d = |r: f64| c[1] + 2.0 * c[2] * r + 3.0 * c[3] * r * r + 4.0 * c[4] * r * r * r;
            let lead = if c[4] > 0.0 { 4.0 * c[4] } else { 2.0 * c[2] };
            let bound = 1.0 + (c[1].abs() + 2.0 * c[2].abs() + 3.0 * c[3].abs()) / lead.abs().max(1e-300);
            let steps = 2000;
            let mut last = 0.0;
            for s in 0..=steps {
                let r = bound * s as f64 / steps as f64;
                if d(r) <= 0.0 {
                    last = r;
                }
            }
            radius = radius.max(last);
        }
        1.1 * radius + 1e-3
    }

    /// Smallest radius R such that V > `level` for all |q| ≥ R (sampled along rays).
    pub fn sublevel_radius(&self, level: f64) -> f64 {
        let mut radius: f64 = 0.0;
        for u in sphere_directions(self.dim) {
            let c = self.ray_coefficients(&u);
            let v = |r: f64| c[0] + r * (c[1] + r * (c[2] + r * (c[3] + r * c[4])));
            let mut hi = 1.0;
            while v(hi) <= level || (hi < 1e6 && (1..=8).any(|k| v(hi * k as f64 / 8.0) > v(hi))) {
                hi *= 2.0;
                if hi > 1e8 {
                    break;
                }
            }
            // last sample on [0, hi] where V ≤ level
            let steps = 4000;
            let mut last = 0.0;
            for s in 0..=steps {
                let r = hi * s as f64 / steps as f64;
                if v(r) <= level {
                    last = r + hi / steps as f64;
                }
            }
            radius = radius.max(last);
        }
        1.05 * radius + 1e-9
    }

    fn find_critical_points(&self) -> Vec<(Vec<f64>, f64)> {
        let n = self.dim;
        let r = self.monotone_radius();
        let starts: Vec<Vec<f64>> = match n {
            1 => (0..=40).map(|i| vec![-r + 2.0 * r * i as f64 / 40.0]).collect(),
            2 => {
                let k = 20;
                let mut s = Vec::new();
                for i in 0..=k {
                    for j in 0..=k {
                        s.push(vec![-r + 2.0 * r * i as f64 / k as f64, -r + 2.0 * r * j as f64 / k as f64]);
                    }
                }
                s
            }
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
                let mut s = vec![vec![0.0; n]];
                for _ in 0..400 {
                    s.push((0..n).map(|_| rng.gen_range(-r..r)).collect());
                }
                s
            }
        };
        let mut found: Vec<(Vec<f64>, f64)> = Vec::new();
        let scale = self.coefficient_scale();
        for s in starts {
            if let Some(q) = self.newton_critical(s, scale) {
                if found.iter().all(|(p, _)| dist(p, &q) > 1e-6 * (1.0 + norm(&q))) {
                    let v = self.value(&q);
                    found.push((q, v));
                }
            }
        }
        found
    }

    fn newton_critical(&self, mut q: Vec<f64>, scale: f64) -> Option<Vec<f64>> {
        let n = self.dim;
        for _ in 0..80 {
            let g = DVector::from_vec(self.gradient(&q));
            if g.norm() <= 1e-13 * scale * (1.0 + norm(&q).powi(3)) {
                return Some(q);
            }
            let h = self.hessian(&q);
            let step = match h.clone().lu().solve(&g) {
                Some(s) if s.iter().all(|v| v.is_finite()) => s,
                _ => g.clone() / scale,
            };
            let step_norm = step.norm();
            let limit = 1.0 + norm(&q);
            let damp = if step_norm > limit { limit / step_norm } else { 1.0 };
            for i in 0..n {
                q[i] -= damp * step[i];
            }
            if !q.iter().all(|v| v.is_finite()) {
                return None;
            }
        }
        let g = self.gradient(&q);
        (norm(&g) <= 1e-9 * scale * (1.0 + norm(&q).powi(3))).then_some(q)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Deterministic set of unit directions used for confinement and radius checks.
pub(crate) fn sphere_directions(n: usize) -> Vec<Vec<f64>> {
    match n {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..720)
            .map(|k| {
                let a = std::f64::consts::PI * k as f64 / 360.0;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0xd1ec);
            let mut dirs = Vec::new();
            for i in 0..n {
                for s in [1.0, -1.0] {
                    let mut e = vec![0.0; n];
                    e[i] = s;
                    dirs.push(e);
                }
            }
            while dirs.len() < 4000 {
                let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let r = norm(&v);
                if r > 1e-3 && r <= 1.0 {
                    dirs.push(v.iter().map(|x| x / r).collect());
                }
            }
            dirs
        }
    }
}

/// Linear gauge a(q) = A·q.
#[derive(Clone, Debug, PartialEq)]
pub struct GaugeField {
    matrix: DMatrix<f64>,
}

impl GaugeField {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidSpec("gauge matrix must be square".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("gauge matrix has non-finite entries".into()));
        }
        Ok(GaugeField { matrix })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidSpec("gauge rows must form a square matrix".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn zero(n: usize) -> Self {
        GaugeField { matrix: DMatrix::zeros(n, n) }
    }

    /// Symmetric gauge a = (b/2)(−q₂, q₁), field B₁₂ = −b.
    pub fn symmetric(b: f64) -> Self {
        GaugeField { matrix: DMatrix::from_row_slice(2, 2, &[0.0, -0.5 * b, 0.5 * b, 0.0]) }
    }

    /// Landau gauge a = (−b q₂, 0), same field as [`GaugeField::symmetric`].
    pub fn landau(b: f64) -> Self {
        GaugeField { matrix: DMatrix::from_row_slice(2, 2, &[0.0, -b, 0.0, 0.0]) }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn apply_into(&self, q: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            *o = (0..n).map(|k| self.matrix[(i, k)] * q[k]).sum();
        }
    }

    pub fn apply(&self, q: &[f64]) -> Vec<f64> {
        let mut a = vec![0.0; self.dim()];
        self.apply_into(q, &mut a);
        a
    }

    /// B_jk = ∂a_j/∂q_k − ∂a_k/∂q_j.
    pub fn field_tensor(&self) -> DMatrix<f64> {
        &self.matrix - self.matrix.transpose()
    }

    /// Σ_{j<k} B_jk².
    pub fn norm_squared(&self) -> f64 {
        let b = self.field_tensor();
        let n = self.dim();
        let mut s = 0.0;
        for j in 0..n {
            for k in j + 1..n {
                s += b[(j, k)] * b[(j, k)];
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhasePoint {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Self {
        PhasePoint { q, p }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn to_state(&self) -> Vec<f64> {
        self.q.iter().chain(&self.p).copied().collect()
    }

    pub fn from_state(x: &[f64]) -> Self {
        let n = x.len() / 2;
        PhasePoint { q: x[..n].to_vec(), p: x[n..].to_vec() }
    }
}

/// H(x) = h_min + ½(x − x*)ᵀK(x − x*) for quadratic specs.
#[derive(Clone, Debug)]
pub struct QuadraticForm {
    pub k: DMatrix<f64>,
    pub center: DVector<f64>,
    pub min_value: f64,
}

impl QuadraticForm {
    pub fn det(&self) -> f64 {
        self.k.determinant()
    }
}

#[derive(Clone, Debug)]
pub struct HamiltonianSpec {
    pub potential: PotentialModel,
    pub gauge: GaugeField,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    dimension: Option<usize>,
    potential: BTreeMap<String, f64>,
    gauge: Option<GaugeSection>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GaugeSection {
    rows: Vec<Vec<f64>>,
}

fn parse_exponents(key: &str) -> Result<Vec<u32>> {
    key.split(',')
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::Config(format!("bad exponent tuple \"{key}\" in [potential]")))
        })
        .collect()
}

impl HamiltonianSpec {
    pub fn new(potential: PotentialModel, gauge: GaugeField) -> Result<Self> {
        if potential.dim() != gauge.dim() {
            return Err(Error::DimensionMismatch { expected: potential.dim(), got: gauge.dim() });
        }
        Ok(HamiltonianSpec { potential, gauge })
    }

    /// V = offset + ½ω²|q|² in two dimensions, symmetric gauge with field strength `b`.
    pub fn isotropic(omega: f64, offset: f64, b: f64) -> Result<Self> {
        Self::anisotropic(omega, omega, offset, b)
    }

    /// V = offset + ½(ω₁²q₁² + ω₂²q₂²), symmetric gauge with field strength `b`.
    pub fn anisotropic(omega1: f64, omega2: f64, offset: f64, b: f64) -> Result<Self> {
        let pot = PotentialModel::new(
            2,
            [
                (vec![0, 0], offset),
                (vec![2, 0], 0.5 * omega1 * omega1),
                (vec![0, 2], 0.5 * omega2 * omega2),
            ],
        )?;
        Self::new(pot, GaugeField::symmetric(b))
    }

    /// Parses the TOML spec format: `[potential]` keyed by exponent tuples, `[gauge] rows = [...]`.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SpecFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_tables(file.dimension, &file.potential, file.gauge.as_ref().map(|g| g.rows.as_slice()))
    }

    pub(crate) fn from_value(value: toml::Value) -> Result<Self> {
        let file: SpecFile = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_tables(file.dimension, &file.potential, file.gauge.as_ref().map(|g| g.rows.as_slice()))
    }

    fn from_tables(dimension: Option<usize>, potential: &BTreeMap<String, f64>, rows: Option<&[Vec<f64>]>) -> Result<Self> {
        let coeffs: Vec<(Vec<u32>, f64)> = potential
            .iter()
            .map(|(k, v)| parse_exponents(k).map(|e| (e, *v)))
            .collect::<Result<_>>()?;
        let dim = match dimension {
            Some(d) => d,
            None => coeffs
                .first()
                .map(|c| c.0.len())
                .ok_or_else(|| Error::Config("[potential] table is empty".into()))?,
        };
        let pot = PotentialModel::new(dim, coeffs)?;
        let gauge = match rows {
            Some(r) => GaugeField::from_rows(r)?,
            None => GaugeField::zero(dim),
        };
        Self::new(pot, gauge)
    }

    /// Serializes to the TOML spec format. The offset written is the raised one.
    pub fn to_toml_string(&self) -> String {
        let n = self.dim();
        let mut s = format!("dimension = {n}\n\n[potential]\n");
        s.push_str(&format!("\"{}\" = {:e}\n", vec!["0"; n].join(","), self.potential.offset()));
        for m in self.potential.terms() {
            let key: Vec<String> = m.exponents.iter().map(|e| e.to_string()).collect();
            s.push_str(&format!("\"{}\" = {:e}\n", key.join(","), m.coefficient));
        }
        s.push_str("\n[gauge]\nrows = [\n");
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| format!("{:e}", self.gauge.matrix()[(i, j)])).collect();
            s.push_str(&format!("  [{}],\n", row.join(", ")));
        }
        s.push_str("]\n");
        s
    }

    pub fn dim(&self) -> usize {
        self.potential.dim()
    }

    fn check(&self, x: &PhasePoint) -> Result<()> {
        let n = self.dim();
        if x.q.len() != n || x.p.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: x.q.len().max(x.p.len()) });
        }
        Ok(())
    }

    /// Mechanical momentum π = p − κa(q).
    fn mechanical_into(&self, kappa: f64, x: &[f64], a: &mut [f64], pi: &mut [f64]) {
        let n = self.dim();
        self.gauge.apply_into(&x[..n], a);
        for i in 0..n {
            pi[i] = x[n + i] - kappa * a[i];
        }
    }

    /// H_κ at the flat state `x = [q, p]`.
    pub fn energy(&self, kappa: f64, x: &[f64]) -> f64 {
        let n = self.dim();
        let mut a = vec![0.0; n];
        let mut pi = vec![0.0; n];
        self.mechanical_into(kappa, x, &mut a, &mut pi);
        let v = self.potential.value(&x[..n]);
        debug_assert!(v >= 1.0 - 1e-9, "V = {v} below 1");
        0.5 * pi.iter().map(|v| v * v).sum::<f64>() + v
    }

    /// ∇H = (∂H/∂q, ∂H/∂p) into `out` (length 2n).
    pub fn gradient_into(&self, kappa: f64, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        let mut a = vec![0.0; n];
        let mut pi = vec![0.0; n];
        self.mechanical_into(kappa, x, &mut a, &mut pi);
        self.potential.gradient_into(&x[..n], &mut out[..n]);
        let m = self.gauge.matrix();
        for k in 0..n {
            let at_pi: f64 = (0..n).map(|j| m[(j, k)] * pi[j]).sum();
            out[k] -= kappa * at_pi;
            out[n + k] = pi[k];
        }
    }

    pub fn gradient(&self, kappa: f64, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; 2 * self.dim()];
        self.gradient_into(kappa, x, &mut g);
        g
    }

    /// Hamiltonian vector field J∇H = (∂H/∂p, −∂H/∂q).
    pub fn velocity_into(&self, kappa: f64, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        let g = self.gradient(kappa, x);
        for i in 0..n {
            out[i] = g[n + i];
            out[n + i] = -g[i];
        }
    }

    pub fn hessian(&self, kappa: f64, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let a = self.gauge.matrix();
        let ata = a.transpose() * a;
        let hv = self.potential.hessian(&x[..n]);
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] = kappa * kappa * ata[(i, j)] + hv[(i, j)];
                h[(i, n + j)] = -kappa * a[(j, i)];
                h[(n + i, j)] = -kappa * a[(i, j)];
            }
            h[(n + i, n + i)] = 1.0;
        }
        h
    }

    /// ∂κH = −(p − κa(q))·a(q).
    pub fn kappa_derivative(&self, kappa: f64, x: &[f64]) -> f64 {
        let n = self.dim();
        let mut a = vec![0.0; n];
        let mut pi = vec![0.0; n];
        self.mechanical_into(kappa, x, &mut a, &mut pi);
        -pi.iter().zip(&a).map(|(p, a)| p * a).sum::<f64>()
    }

    pub fn eval_hamiltonian(&self, kappa: f64, x: &PhasePoint) -> Result<f64> {
        self.check(x)?;
        Ok(self.energy(kappa, &x.to_state()))
    }

    pub fn eval_kappa_derivative(&self, kappa: f64, x: &PhasePoint) -> Result<f64> {
        self.check(x)?;
        Ok(self.kappa_derivative(kappa, &x.to_state()))
    }

    /// ‖B‖² = Σ_{j<k} B_jk²; independent of q for linear gauges.
    pub fn magnetic_norm_squared(&self, _q: &[f64]) -> f64 {
        self.gauge.norm_squared()
    }

    /// Global minimum of H_κ, which equals min V for every κ.
    pub fn minimum_energy(&self) -> f64 {
        self.potential.minimum()
    }

    /// Critical values of H_κ (those of V, independent of κ).
    pub fn critical_values(&self) -> &[f64] {
        self.potential.critical_values()
    }

    pub fn is_quadratic(&self) -> bool {
        self.potential.is_quadratic()
    }

    pub fn quadratic_form(&self, kappa: f64) -> Option<QuadraticForm> {
        if !self.is_quadratic() {
            return None;
        }
        let n = self.dim();
        let qmin = self.potential.minimizer();
        let a = self.gauge.apply(qmin);
        let mut center = DVector::zeros(2 * n);
        for i in 0..n {
            center[i] = qmin[i];
            center[n + i] = kappa * a[i];
        }
        let x: Vec<f64> = center.iter().copied().collect();
        Some(QuadraticForm { k: self.hessian(kappa, &x), min_value: self.energy(kappa, &x), center })
    }

    /// Largest relative discrepancy between analytic derivatives and central differences at
    /// `points` random phase points (step 1e−5).
    pub fn finite_difference_self_test(&self, kappa: f64, points: usize, seed: u64) -> f64 {
        let n = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let rel = |num: f64, exact: f64, scale: f64| (num - exact).abs() / scale.max(1.0);
        for _ in 0..points {
            let x: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let g = self.gradient(kappa, &x);
            let hs = self.hessian(kappa, &x);
            for i in 0..2 * n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let d = (self.energy(kappa, &xp) - self.energy(kappa, &xm)) / (2.0 * h);
                worst = worst.max(rel(d, g[i], g[i].abs()));
                let gp = self.gradient(kappa, &xp);
                let gm = self.gradient(kappa, &xm);
                for j in 0..2 * n {
                    let d2 = (gp[j] - gm[j]) / (2.0 * h);
                    worst = worst.max(rel(d2, hs[(j, i)], hs[(j, i)].abs()));
                }
            }
            let dk = (self.energy(kappa + h, &x) - self.energy(kappa - h, &x)) / (2.0 * h);
            let exact = self.kappa_derivative(kappa, &x);
            worst = worst.max(rel(dk, exact, exact.abs()));
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iso() -> HamiltonianSpec {
        HamiltonianSpec::isotropic(1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        let s = iso();
        let origin = PhasePoint::new(vec![0.0, 0.0], vec![0.0, 0.0]);
        assert_eq!(s.eval_hamiltonian(3.7, &origin).unwrap(), 1.0);
        let x = PhasePoint::new(vec![0.0, 0.0], vec![1.0, 0.0]);
        assert_eq!(s.eval_hamiltonian(0.0, &x).unwrap(), 1.5);
        let x = PhasePoint::new(vec![1.0, 0.0], vec![0.0, 1.0]);
        assert!((s.eval_hamiltonian(2.0, &x).unwrap() - 1.5).abs() < 1e-15);
        let bad = PhasePoint::new(vec![0.0], vec![0.0]);
        assert!(matches!(s.eval_hamiltonian(0.0, &bad), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn kappa_derivative_examples() {
        let s = iso();
        let x = PhasePoint::new(vec![0.3, -0.7], vec![0.2, 0.5]);
        let a = s.gauge.apply(&x.q);
        let expect = -(x.p[0] * a[0] + x.p[1] * a[1]);
        assert!((s.eval_kappa_derivative(0.0, &x).unwrap() - expect).abs() < 1e-15);
        let at_origin = PhasePoint::new(vec![0.0, 0.0], vec![0.4, 0.1]);
        assert_eq!(s.eval_kappa_derivative(1.3, &at_origin).unwrap(), 0.0);
        let st = x.to_state();
        let h = 1e-4;
        let fd = (s.energy(0.8 + h, &st) - s.energy(0.8 - h, &st)) / (2.0 * h);
        assert!((fd - s.kappa_derivative(0.8, &st)).abs() < 1e-8);
    }

    #[test]
    fn field_norms() {
        assert_eq!(GaugeField::symmetric(1.0).norm_squared(), 1.0);
        assert_eq!(GaugeField::zero(2).norm_squared(), 0.0);
        assert_eq!(GaugeField::landau(1.0).norm_squared(), 1.0);
        assert_eq!(GaugeField::symmetric(1.0).field_tensor()[(0, 1)], -1.0);
        assert_eq!(GaugeField::symmetric(2.0).norm_squared(), 4.0);
    }

    #[test]
    fn offset_is_raised_to_one() {
        let p = PotentialModel::new(1, [(vec![2], 0.5), (vec![1], 1.0)]).unwrap();
        // min of ½q² + q is −½ at q = −1
        assert!((p.offset_raised_by() - 1.5).abs() < 1e-12);
        assert!((p.minimum() - 1.0).abs() < 1e-12);
        assert!((p.minimizer()[0] + 1.0).abs() < 1e-9);
        let q = PotentialModel::new(1, [(vec![0], 3.0), (vec![2], 1.0)]).unwrap();
        assert_eq!(q.offset_raised_by(), 0.0);
    }

    #[test]
    fn confinement_is_enforced() {
        assert!(PotentialModel::new(2, [(vec![0, 0], 1.0)]).is_err());
        assert!(PotentialModel::new(2, [(vec![2, 0], 1.0)]).is_err());
        assert!(PotentialModel::new(2, [(vec![3, 0], 1.0), (vec![2, 0], 1.0), (vec![0, 2], 1.0)]).is_err());
        assert!(PotentialModel::new(2, [(vec![4, 0], 1.0), (vec![0, 2], 1.0)]).is_ok());
        assert!(PotentialModel::new(2, [(vec![5, 0], 1.0)]).is_err());
    }

    #[test]
    fn double_well_critical_values() {
        // V = 1 + (q² − 1)²  → minima at ±1 (value 1), maximum at 0 (value 2)
        let p = PotentialModel::new(1, [(vec![0], 2.0), (vec![2], -2.0), (vec![4], 1.0)]).unwrap();
        let cv = p.critical_values();
        assert_eq!(cv.len(), 2);
        assert!((cv[0] - 1.0).abs() < 1e-10 && (cv[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn toml_roundtrip() {
        let text = r#"
            [potential]
            "0,0" = 1.0
            "2,0" = 0.5
            "0,2" = 1.0
            "4,0" = 0.01
            [gauge]
            rows = [[0.0, -0.5], [0.5, 0.0]]
        "#;
        let s = HamiltonianSpec::from_toml_str(text).unwrap();
        assert_eq!(s.dim(), 2);
        assert_eq!(s.magnetic_norm_squared(&[0.0, 0.0]), 1.0);
        let back = HamiltonianSpec::from_toml_str(&s.to_toml_string()).unwrap();
        let x = [0.3, 0.2, -0.1, 0.7];
        assert_eq!(s.energy(0.7, &x), back.energy(0.7, &x));
        let missing = HamiltonianSpec::from_toml_str("[gauge]\nrows = [[0.0]]\n").unwrap_err();
        assert!(missing.to_string().contains("line"), "{missing}");
    }

    #[test]
    fn quadratic_form_matches_energy() {
        let s = HamiltonianSpec::anisotropic(1.0, 2f64.sqrt(), 1.0, 1.0).unwrap();
        let qf = s.quadratic_form(0.9).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1]);
        let d = &x - &qf.center;
        let e = qf.min_value + 0.5 * (d.transpose() * &qf.k * &d)[(0, 0)];
        assert!((e - s.energy(0.9, x.as_slice())).abs() < 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn derivatives_agree_with_finite_differences(
            c20 in 0.2f64..2.0, c02 in 0.2f64..2.0, c11 in -0.1f64..0.1,
            c40 in 0.05f64..0.2, c21 in -0.2f64..0.2, kappa in -2.0f64..2.0,
            a in proptest::collection::vec(-1.0f64..1.0, 4), seed in 0u64..1000,
        ) {
            let pot = PotentialModel::new(2, [
                (vec![0, 0], 1.0), (vec![2, 0], c20), (vec![0, 2], c02), (vec![1, 1], c11),
                (vec![4, 0], c40), (vec![2, 1], c21), (vec![0, 4], 0.05),
            ]).unwrap();
            let gauge = GaugeField::new(DMatrix::from_row_slice(2, 2, &a)).unwrap();
            let s = HamiltonianSpec::new(pot, gauge).unwrap();
            prop_assert!(s.finite_difference_self_test(kappa, 100, seed) < 1e-6);
        }

        #[test]
        fn field_norm_depends_only_on_field(b in -3.0f64..3.0) {
            prop_assert!((GaugeField::symmetric(b).norm_squared() - GaugeField::landau(b).norm_squared()).abs() < 1e-12);
        }
    }
}
