//! Hamiltonian and tangent flows, and integrals against the Liouville measure.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use ode_solvers::dop_shared::IntegrationError;
use ode_solvers::{Dop853, System};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{HamiltonianSpec, PhasePoint};
use crate::numerics::{gauss_legendre, par_map};

pub const DEFAULT_TOL: f64 = 1e-12;

/// Standard symplectic form J = [[0, I], [−I, 0]].
pub fn symplectic_form(n: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    j
}

/// Flow of H_κ, optionally augmented with the tangent matrix M (column-major after the state) and
/// the running integrals ∫p·q̇ dt and ∫∂κH dt.
pub(crate) struct FlowSystem<'a> {
    pub spec: &'a HamiltonianSpec,
    pub kappa: f64,
    pub tangent: bool,
    pub integrals: bool,
}

impl System<f64, DVector<f64>> for &FlowSystem<'_> {
    fn system(&self, _t: f64, y: &DVector<f64>, dy: &mut DVector<f64>) {
        let n = self.spec.dim();
        let d = 2 * n;
        let x = &y.as_slice()[..d];
        let g = self.spec.gradient(self.kappa, x);
        for i in 0..n {
            dy[i] = g[n + i];
            dy[n + i] = -g[i];
        }
        let mut off = d;
        if self.tangent {
            let h = self.spec.hessian(self.kappa, x);
            for c in 0..d {
                let col = &y.as_slice()[d + c * d..d + (c + 1) * d];
                for r in 0..n {
                    let mut up = 0.0;
                    let mut down = 0.0;
                    for k in 0..d {
                        up += h[(n + r, k)] * col[k];
                        down += h[(r, k)] * col[k];
                    }
                    dy[d + c * d + r] = up;
                    dy[d + c * d + n + r] = -down;
                }
            }
            off += d * d;
        }
        if self.integrals {
            dy[off] = (0..n).map(|i| x[n + i] * g[n + i]).sum();
            dy[off + 1] = self.spec.kappa_derivative(self.kappa, x);
        }
    }
}

/// Integrates the (possibly augmented) flow from `y0` over [0, t_end] and returns `samples + 1`
/// equally spaced dense-output states.
pub(crate) fn propagate(
    system: FlowSystem<'_>,
    y0: DVector<f64>,
    t_end: f64,
    samples: usize,
    tol: f64,
    op: &'static str,
) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("{op}: tolerance must be positive")));
    }
    let samples = samples.max(1);
    if t_end == 0.0 {
        return Ok((vec![0.0], vec![y0]));
    }
    let dx = t_end / samples as f64;
    // The crate's interpolated dense output is only accurate to ~1e−8, so every sample time is
    // reached as a genuine step endpoint by restarting the solver per segment.
    let mut out_t = Vec::with_capacity(samples + 1);
    let mut out_y = Vec::with_capacity(samples + 1);
    out_t.push(0.0);
    out_y.push(y0.clone());
    let mut y = y0;
    for k in 0..samples {
        let t0 = k as f64 * dx;
        let t1 = if k + 1 == samples { t_end } else { (k + 1) as f64 * dx };
        let mut solver = Dop853::from_param(
            &system,
            t0,
            t1,
            t1 - t0,
            y,
            tol,
            tol,
            0.9,
            0.0,
            0.333,
            6.0,
            (t1 - t0).abs(),
            0.0,
            2_000_000,
            1000,
            ode_solvers::dop_shared::OutputType::Sparse,
        );
        solver.integrate().map_err(|e| {
            let msg = match e {
                IntegrationError::StepSizeUnderflow { x } => format!("step-size underflow at t = {x}"),
                IntegrationError::MaxNumStepReached { x, n_step } => {
                    format!("more than {n_step} steps needed, stopped at t = {x}")
                }
                IntegrationError::StiffnessDetected { x } => format!("stiffness detected at t = {x}"),
            };
            Error::numerical("classical", op, msg)
        })?;
        let end = solver.y_out().last().cloned().expect("solver output");
        if end.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("classical", op, format!("non-finite state near t = {t1}")));
        }
        out_t.push(t1);
        out_y.push(end.clone());
        y = end;
    }
    Ok((out_t, out_y))
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub energies: Vec<f64>,
}

impl Trajectory {
    pub fn point(&self, i: usize) -> PhasePoint {
        PhasePoint::from_state(&self.states[i])
    }

    pub fn last(&self) -> PhasePoint {
        self.point(self.states.len() - 1)
    }

    /// sup_t |H(x(t)) − H(x(0))| / |H(x(0))|.
    pub fn max_relative_energy_drift(&self) -> f64 {
        let e0 = self.energies[0];
        self.energies.iter().map(|e| (e - e0).abs() / e0.abs()).fold(0.0, f64::max)
    }

    /// CSV export with columns t, q…, p…, H.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let n = self.states.first().map(|s| s.len() / 2).unwrap_or(0);
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("q{i}")));
        header.extend((1..=n).map(|i| format!("p{i}")));
        header.push("H".into());
        wr.write_record(&header).map_err(csv_err)?;
        for ((t, x), e) in self.times.iter().zip(&self.states).zip(&self.energies) {
            let mut row = vec![format!("{t:e}")];
            row.extend(x.iter().map(|v| format!("{v:e}")));
            row.push(format!("{e:e}"));
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Integrates the Hamiltonian flow with 256 equally spaced dense-output samples.
pub fn integrate_flow(spec: &HamiltonianSpec, kappa: f64, x0: &PhasePoint, t_final: f64, tol: f64) -> Result<Trajectory> {
    integrate_flow_sampled(spec, kappa, x0, t_final, 256, tol)
}

pub fn integrate_flow_sampled(
    spec: &HamiltonianSpec,
    kappa: f64,
    x0: &PhasePoint,
    t_final: f64,
    samples: usize,
    tol: f64,
) -> Result<Trajectory> {
    let n = spec.dim();
    if x0.q.len() != n || x0.p.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x0.q.len() });
    }
    let sys = FlowSystem { spec, kappa, tangent: false, integrals: false };
    let (times, ys) = propagate(sys, DVector::from_vec(x0.to_state()), t_final, samples, tol, "integrate_flow")?;
    let states: Vec<Vec<f64>> = ys.into_iter().map(|y| y.as_slice().to_vec()).collect();
    let energies = states.iter().map(|x| spec.energy(kappa, x)).collect();
    Ok(Trajectory { times, states, energies })
}

/// Fundamental solution M(t) of the variational equation along a trajectory.
#[derive(Clone, Debug)]
pub struct TangentFrame {
    pub times: Vec<f64>,
    pub matrices: Vec<DMatrix<f64>>,
}

impl TangentFrame {
    pub fn final_matrix(&self) -> &DMatrix<f64> {
        self.matrices.last().expect("non-empty frame")
    }

    /// max_t ‖MᵀJM − J‖_max.
    pub fn symplectic_defect(&self) -> f64 {
        self.matrices.iter().map(symplectic_defect).fold(0.0, f64::max)
    }
}

pub fn symplectic_defect(m: &DMatrix<f64>) -> f64 {
    let j = symplectic_form(m.nrows() / 2);
    (m.transpose() * &j * m - &j).amax()
}

pub(crate) fn unpack_tangent(y: &DVector<f64>, d: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(d, d, &y.as_slice()[d..d + d * d])
}

pub(crate) fn identity_augmented(x0: &[f64], extra: usize) -> DVector<f64> {
    let d = x0.len();
    let mut y = DVector::zeros(d + d * d + extra);
    y.as_mut_slice()[..d].copy_from_slice(x0);
    for i in 0..d {
        y[d + i * d + i] = 1.0;
    }
    y
}

/// Re-integrates the trajectory together with Ṁ = J·Hess H·M, M(0) = I, on the same time grid.
pub fn integrate_tangent(spec: &HamiltonianSpec, kappa: f64, trajectory: &Trajectory, tol: f64) -> Result<TangentFrame> {
    let d = 2 * spec.dim();
    let samples = trajectory.times.len() - 1;
    let t_end = *trajectory.times.last().unwrap();
    let sys = FlowSystem { spec, kappa, tangent: true, integrals: false };
    let y0 = identity_augmented(&trajectory.states[0], 0);
    let (times, ys) = propagate(sys, y0, t_end, samples, tol, "integrate_tangent")?;
    let matrices = ys.iter().map(|y| unpack_tangent(y, d)).collect();
    Ok(TangentFrame { times, matrices })
}

/// Integrand for phase-space and surface integrals.
#[derive(Clone, Copy)]
pub enum Integrand<'a> {
    Constant(f64),
    Function(&'a (dyn Fn(&[f64]) -> f64 + Sync)),
}

impl Integrand<'_> {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Integrand::Constant(c) => *c,
            Integrand::Function(f) => f(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateMethod {
    Exact,
    Quadrature,
    MonteCarlo,
}

/// A value with its error estimate (standard error for Monte Carlo, rule difference otherwise).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    pub method: EstimateMethod,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, error: 0.0, method: EstimateMethod::Exact }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VolumeOptions {
    pub samples: usize,
    pub seed: u64,
    /// Skip the closed-form and quadrature paths.
    pub force_monte_carlo: bool,
}

impl Default for VolumeOptions {
    fn default() -> Self {
        VolumeOptions { samples: 4_000_000, seed: 0, force_monte_carlo: false }
    }
}

const SHARD: usize = 1 << 15;

/// Uniform Monte Carlo over a box. Each shard draws from its own ChaCha stream, so the result only
/// depends on (seed, samples), never on how shards are scheduled.
pub fn monte_carlo_box<F>(lo: &[f64], hi: &[f64], samples: usize, seed: u64, f: F) -> Estimate
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let d = lo.len();
    let shards = samples.div_ceil(SHARD).max(1);
    let parts = par_map(shards, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64 + 1);
        let mut x = vec![0.0; d];
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..SHARD {
            for k in 0..d {
                x[k] = lo[k] + (hi[k] - lo[k]) * rng.gen::<f64>();
            }
            let v = f(&x);
            sum += v;
            sq += v * v;
        }
        (sum, sq)
    });
    let n = (shards * SHARD) as f64;
    let (sum, sq) = parts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let vol: f64 = lo.iter().zip(hi).map(|(a, b)| b - a).product();
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    Estimate { value: vol * mean, error: vol * (var / n).sqrt(), method: EstimateMethod::MonteCarlo }
}

/// Box containing {H_κ ≤ level}.
pub fn bounding_box(spec: &HamiltonianSpec, kappa: f64, level: f64) -> (Vec<f64>, Vec<f64>) {
    let n = spec.dim();
    let r = spec.potential.sublevel_radius(level);
    let pmax = (2.0 * (level - spec.minimum_energy())).max(0.0).sqrt();
    let a = spec.gauge.matrix();
    let mut lo = vec![-r; 2 * n];
    let mut hi = vec![r; 2 * n];
    for i in 0..n {
        let row: f64 = (0..n).map(|k| a[(i, k)].abs()).sum();
        let w = kappa.abs() * row * r * (n as f64).sqrt() + pmax;
        lo[n + i] = -w;
        hi[n + i] = w;
    }
    (lo, hi)
}

fn unit_ball_volume(d: usize) -> f64 {
    // π^{d/2} / Γ(d/2 + 1)
    let mut v = if d.is_multiple_of(2) { 1.0 } else { 2.0 };
    let mut k = d;
    while k >= 2 {
        v *= 2.0 * std::f64::consts::PI / k as f64;
        k -= 2;
    }
    v
}

/// Integral of g over the ball |y| ≤ ρ in the Cholesky coordinates of a quadratic H, for n ≤ 2.
fn ball_quadrature(n: usize, center: &DVector<f64>, map: &DMatrix<f64>, rho: f64, g: &Integrand<'_>, fine: bool) -> f64 {
    use std::f64::consts::PI;
    let d = 2 * n;
    let eval = |y: &[f64]| {
        let yv = DVector::from_column_slice(y);
        let x = center + map * yv;
        g.eval(x.as_slice())
    };
    let (nr, na, nt) = if fine { (28, 28, 40) } else { (20, 20, 30) };
    let (gx, gw) = gauss_legendre(nr);
    let radial: Vec<(f64, f64)> = gx.iter().zip(&gw).map(|(x, w)| (0.5 * rho * (x + 1.0), 0.5 * rho * w)).collect();
    if d == 2 {
        let mut total = 0.0;
        for &(r, wr) in &radial {
            let mut s = 0.0;
            for k in 0..nt {
                let phi = 2.0 * PI * k as f64 / nt as f64;
                s += eval(&[r * phi.cos(), r * phi.sin()]);
            }
            total += wr * r * s * 2.0 * PI / nt as f64;
        }
        return total;
    }
    let (ax, aw) = gauss_legendre(na);
    let rows = par_map(radial.len(), |i| {
        let (r, wr) = radial[i];
        let mut s = 0.0;
        for (ex, ew) in ax.iter().zip(&aw) {
            let eta = 0.25 * PI * (ex + 1.0);
            let we = 0.25 * PI * ew * eta.sin() * eta.cos();
            let (se, ce) = eta.sin_cos();
            let mut inner = 0.0;
            for a in 0..nt {
                let x1 = 2.0 * PI * a as f64 / nt as f64;
                for b in 0..nt {
                    let x2 = 2.0 * PI * b as f64 / nt as f64;
                    inner += eval(&[r * x1.cos() * se, r * x1.sin() * se, r * x2.cos() * ce, r * x2.sin() * ce]);
                }
            }
            s += we * inner;
        }
        wr * r.powi(3) * s * (2.0 * PI / nt as f64).powi(2)
    });
    rows.iter().sum()
}

struct QuadraticGeometry {
    center: DVector<f64>,
    map: DMatrix<f64>,
    sqrt_det: f64,
    min_value: f64,
}

fn quadratic_geometry(spec: &HamiltonianSpec, kappa: f64) -> Option<QuadraticGeometry> {
    let qf = spec.quadratic_form(kappa)?;
    let chol = qf.k.clone().cholesky()?;
    let lt = chol.l().transpose();
    let map = lt.try_inverse()?;
    Some(QuadraticGeometry { sqrt_det: qf.det().sqrt(), center: qf.center, map, min_value: qf.min_value })
}

fn check_level(spec: &HamiltonianSpec, mu: f64) -> Result<Option<f64>> {
    let hmin = spec.minimum_energy();
    let tol = 1e-12 * hmin.abs().max(1.0);
    if mu < hmin - tol {
        return Err(Error::EmptyRegion { level: mu, min: hmin });
    }
    Ok((mu <= hmin + tol).then_some(hmin))
}

/// ∫_{H_κ ≤ μ} g dq dp.
pub fn phase_space_volume(
    spec: &HamiltonianSpec,
    kappa: f64,
    mu: f64,
    g: Integrand<'_>,
    opts: &VolumeOptions,
) -> Result<Estimate> {
    if check_level(spec, mu)?.is_some() {
        return Ok(Estimate::exact(0.0));
    }
    let n = spec.dim();
    if !opts.force_monte_carlo {
        if let Some(geo) = quadratic_geometry(spec, kappa) {
            let lambda = mu - geo.min_value;
            if let Integrand::Constant(c) = g {
                let v = unit_ball_volume(2 * n) * (2.0 * lambda).powi(n as i32) / geo.sqrt_det;
                return Ok(Estimate::exact(c * v));
            }
            if n <= 2 {
                let rho = (2.0 * lambda).sqrt();
                let fine = ball_quadrature(n, &geo.center, &geo.map, rho, &g, true) / geo.sqrt_det;
                let coarse = ball_quadrature(n, &geo.center, &geo.map, rho, &g, false) / geo.sqrt_det;
                return Ok(Estimate { value: fine, error: (fine - coarse).abs(), method: EstimateMethod::Quadrature });
            }
        }
    }
    let (lo, hi) = bounding_box(spec, kappa, mu);
    Ok(monte_carlo_box(&lo, &hi, opts.samples, opts.seed, |x| {
        if spec.energy(kappa, x) <= mu {
            g.eval(x)
        } else {
            0.0
        }
    }))
}

/// Distance from μ to the nearest critical value of H_κ.
pub fn critical_gap(spec: &HamiltonianSpec, mu: f64) -> f64 {
    spec.critical_values().iter().map(|c| (mu - c).abs()).fold(f64::INFINITY, f64::min)
}

/// Rejects levels at (or numerically at) a critical value of H_κ.
pub fn check_noncritical(spec: &HamiltonianSpec, mu: f64) -> Result<()> {
    let tol = 1e-6 * mu.abs().max(1.0);
    for &c in spec.critical_values() {
        if (mu - c).abs() <= tol {
            return Err(Error::CriticalEnergy { level: mu, critical: c, gap: (mu - c).abs() });
        }
    }
    Ok(())
}

/// ∫_{Σ_μ} g dσ_μ, the μ-derivative of the phase-space integral (co-area), by central differences
/// with one Richardson step unless a closed form applies.
pub fn liouville_surface_integral(
    spec: &HamiltonianSpec,
    kappa: f64,
    mu: f64,
    g: Integrand<'_>,
    opts: &VolumeOptions,
) -> Result<Estimate> {
    let hmin = spec.minimum_energy();
    if mu <= hmin {
        return Err(Error::EmptyRegion { level: mu, min: hmin });
    }
    check_noncritical(spec, mu)?;
    let n = spec.dim();
    let h = (1e-3 * mu.abs()).min(0.5 * (mu - hmin));
    if !opts.force_monte_carlo {
        if let Some(geo) = quadratic_geometry(spec, kappa) {
            let lambda = mu - geo.min_value;
            if let Integrand::Constant(c) = g {
                let v = unit_ball_volume(2 * n) * n as f64 * 2f64.powi(n as i32) * lambda.powi(n as i32 - 1) / geo.sqrt_det;
                return Ok(Estimate::exact(c * v));
            }
            if n <= 2 {
                let vol = |l: f64| {
                    ball_quadrature(n, &geo.center, &geo.map, (2.0 * (l - geo.min_value)).sqrt(), &g, true) / geo.sqrt_det
                };
                let d1 = (vol(mu + h) - vol(mu - h)) / (2.0 * h);
                let d2 = (vol(mu + 0.5 * h) - vol(mu - 0.5 * h)) / h;
                let r = (4.0 * d2 - d1) / 3.0;
                return Ok(Estimate { value: r, error: (r - d2).abs(), method: EstimateMethod::Quadrature });
            }
        }
    }
    let (lo, hi) = bounding_box(spec, kappa, mu + h);
    let est = monte_carlo_box(&lo, &hi, opts.samples, opts.seed, |x| {
        let e = spec.energy(kappa, x);
        if e > mu + h || e <= mu - h {
            return 0.0;
        }
        let ind = |l: f64| if e <= l { 1.0 } else { 0.0 };
        let inner = (ind(mu + 0.5 * h) - ind(mu - 0.5 * h)) / h;
        let outer = (ind(mu + h) - ind(mu - h)) / (2.0 * h);
        g.eval(x) * (4.0 * inner - outer) / 3.0
    });
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GaugeField, PotentialModel};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn iso(b: f64) -> HamiltonianSpec {
        HamiltonianSpec::isotropic(1.0, 1.0, b).unwrap()
    }

    #[test]
    fn harmonic_period_returns_to_start() {
        let s = iso(1.0);
        let x0 = PhasePoint::new(vec![1.0, 0.0], vec![0.0, 0.0]);
        let tr = integrate_flow(&s, 0.0, &x0, 2.0 * PI, DEFAULT_TOL).unwrap();
        let end = tr.last();
        let err = end.q.iter().chain(&end.p).zip(x0.q.iter().chain(&x0.p)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
        assert_eq!(tr.times.len(), 257);
    }

    #[test]
    fn energy_is_conserved_anisotropic() {
        let s = HamiltonianSpec::anisotropic(1.0, 2f64.sqrt(), 1.0, 1.0).unwrap();
        let x0 = PhasePoint::new(vec![0.4, -0.3], vec![0.2, 0.6]);
        let tr = integrate_flow(&s, 1.0, &x0, 50.0, DEFAULT_TOL).unwrap();
        assert!(tr.max_relative_energy_drift() < 1e-10, "{}", tr.max_relative_energy_drift());
        let tight = integrate_flow(&s, 1.0, &x0, 50.0, 1e-14).unwrap();
        let d = tr.last().q[0] - tight.last().q[0];
        assert!(d.abs() < 1e-8);
    }

    #[test]
    fn flat_potential_is_rejected() {
        assert!(PotentialModel::new(2, [(vec![0, 0], 1.0)]).is_err());
    }

    #[test]
    fn flow_is_reversible() {
        let pot = PotentialModel::new(2, [(vec![0, 0], 1.0), (vec![2, 0], 0.5), (vec![0, 2], 0.7), (vec![4, 0], 0.1), (vec![2, 2], 0.05)]).unwrap();
        let s = HamiltonianSpec::new(pot, GaugeField::symmetric(0.8)).unwrap();
        let x0 = PhasePoint::new(vec![0.5, 0.1], vec![-0.3, 0.4]);
        let fwd = integrate_flow(&s, 1.0, &x0, 12.0, DEFAULT_TOL).unwrap();
        let back = integrate_flow(&s, 1.0, &fwd.last(), -12.0, DEFAULT_TOL).unwrap();
        let e = back.last();
        let err = e.q.iter().chain(&e.p).zip(x0.q.iter().chain(&x0.p)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn tangent_matches_matrix_exponential() {
        let s = HamiltonianSpec::anisotropic(1.0, 2f64.sqrt(), 1.0, 1.0).unwrap();
        let kappa = 0.7;
        let x0 = PhasePoint::new(vec![0.2, 0.1], vec![0.0, 0.3]);
        let tr = integrate_flow_sampled(&s, kappa, &x0, 7.5, 30, DEFAULT_TOL).unwrap();
        let tf = integrate_tangent(&s, kappa, &tr, DEFAULT_TOL).unwrap();
        assert!((&tf.matrices[0] - DMatrix::identity(4, 4)).amax() == 0.0);
        let jk = symplectic_form(2) * s.hessian(kappa, &x0.to_state());
        for (t, m) in tf.times.iter().zip(&tf.matrices) {
            let exact = (&jk * *t).exp();
            assert!((m - exact).amax() < 1e-8);
            assert!((m.determinant() - 1.0).abs() < 1e-8);
        }
        assert!(tf.symplectic_defect() < 1e-8);
    }

    #[test]
    fn volume_examples() {
        let s = iso(0.0);
        let opts = VolumeOptions { samples: 1 << 20, seed: 7, force_monte_carlo: false };
        let v = phase_space_volume(&s, 0.0, 2.0, Integrand::Constant(1.0), &opts).unwrap();
        assert!((v.value - 2.0 * PI * PI).abs() < 1e-12);
        let mc = phase_space_volume(&s, 0.0, 2.0, Integrand::Constant(1.0), &VolumeOptions { force_monte_carlo: true, ..opts }).unwrap();
        assert!((mc.value - 2.0 * PI * PI).abs() < 4.0 * mc.error, "{mc:?}");
        assert_eq!(phase_space_volume(&s, 0.0, 1.0, Integrand::Constant(1.0), &opts).unwrap().value, 0.0);
        assert!(matches!(phase_space_volume(&s, 0.0, 0.5, Integrand::Constant(1.0), &opts), Err(Error::EmptyRegion { .. })));
        let odd = |x: &[f64]| x[2] * (1.0 + x[0] * x[0]);
        let mc = phase_space_volume(&s, 0.0, 2.0, Integrand::Function(&odd), &VolumeOptions { force_monte_carlo: true, ..opts }).unwrap();
        assert!(mc.value.abs() < 4.0 * mc.error);
        let q = phase_space_volume(&s, 0.0, 2.0, Integrand::Function(&odd), &opts).unwrap();
        assert!(q.value.abs() < 1e-12);
    }

    #[test]
    fn ball_quadrature_matches_closed_form() {
        let s = HamiltonianSpec::anisotropic(1.0, 1.7, 1.0, 0.6).unwrap();
        let one = |_: &[f64]| 1.0;
        let opts = VolumeOptions::default();
        let q = phase_space_volume(&s, 0.9, 2.3, Integrand::Function(&one), &opts).unwrap();
        let c = phase_space_volume(&s, 0.9, 2.3, Integrand::Constant(1.0), &opts).unwrap();
        assert!((q.value - c.value).abs() < 1e-11 * c.value);
    }

    #[test]
    fn surface_examples() {
        let s = iso(1.0);
        let opts = VolumeOptions { samples: 1 << 21, seed: 3, force_monte_carlo: false };
        let v = liouville_surface_integral(&s, 0.0, 2.0, Integrand::Constant(1.0), &opts).unwrap();
        assert!((v.value - 4.0 * PI * PI).abs() < 1e-12);
        let b2 = s.magnetic_norm_squared(&[0.0, 0.0]) * 3.0;
        let w = liouville_surface_integral(&s, 0.0, 2.0, Integrand::Constant(b2), &opts).unwrap();
        assert!((w.value - 3.0 * v.value).abs() < 1e-12);
        for eps in [1e-2, 1e-3] {
            let v = liouville_surface_integral(&s, 0.0, 1.0 + eps, Integrand::Constant(1.0), &opts).unwrap();
            assert!((v.value / eps - 4.0 * PI * PI).abs() < 1e-9);
        }
        let mc = liouville_surface_integral(&s, 0.0, 2.0, Integrand::Constant(1.0), &VolumeOptions { force_monte_carlo: true, ..opts }).unwrap();
        assert!((mc.value - 4.0 * PI * PI).abs() < 4.0 * mc.error + 1e-3 * mc.value, "{mc:?}");
        // the minimum is a critical value
        assert!(liouville_surface_integral(&s, 0.0, 1.0, Integrand::Constant(1.0), &opts).is_err());
    }

    #[test]
    fn quartic_volume_monte_carlo_matches_quadrature_of_radial_profile() {
        // V = 1 + |q|⁴/4 at κ = 0: Vol(H ≤ μ) = ∫ π(2(μ − V))·dq over the disk, = π²·2·∫_0^R (λ − r⁴/4) 2r dr
        let pot = PotentialModel::new(2, [(vec![0, 0], 1.0), (vec![4, 0], 0.25), (vec![2, 2], 0.5), (vec![0, 4], 0.25)]).unwrap();
        let s = HamiltonianSpec::new(pot, GaugeField::zero(2)).unwrap();
        let lambda: f64 = 1.0;
        let r = (4.0 * lambda).powf(0.25);
        let exact = 2.0 * PI * PI * (lambda * r * r - r.powi(6) / 12.0);
        let mc = phase_space_volume(&s, 0.0, 1.0 + lambda, Integrand::Constant(1.0), &VolumeOptions { samples: 1 << 21, seed: 11, force_monte_carlo: false }).unwrap();
        assert_eq!(mc.method, EstimateMethod::MonteCarlo);
        assert!((mc.value - exact).abs() < 4.0 * mc.error, "{mc:?} vs {exact}");
    }

    #[test]
    fn monte_carlo_is_independent_of_sharding_order() {
        let f = |x: &[f64]| x[0] * x[0] + x[1];
        let a = monte_carlo_box(&[0.0, 0.0], &[1.0, 2.0], 100_000, 5, f);
        let b = monte_carlo_box(&[0.0, 0.0], &[1.0, 2.0], 100_000, 5, f);
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10))]

        #[test]
        fn surface_integral_is_volume_derivative(
            w1 in 0.5f64..2.0, w2 in 0.5f64..2.0, b in -1.5f64..1.5, kappa in -1.0f64..1.0, lam in 0.3f64..2.0,
        ) {
            let s = HamiltonianSpec::anisotropic(w1, w2, 1.0, b).unwrap();
            let opts = VolumeOptions::default();
            let one = |_: &[f64]| 1.0;
            let mu = 1.0 + lam;
            let surf = liouville_surface_integral(&s, kappa, mu, Integrand::Function(&one), &opts).unwrap();
            let exact = liouville_surface_integral(&s, kappa, mu, Integrand::Constant(1.0), &opts).unwrap();
            prop_assert!((surf.value - exact.value).abs() <= 10.0 * surf.error + 1e-9 * exact.value);
        }
    }
}
