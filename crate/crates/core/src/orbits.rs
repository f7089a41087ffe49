//! Periodic orbits on an energy shell and the data the trace formula needs from them.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classical::{csv_err, identity_augmented, propagate, symplectic_form, unpack_tangent, FlowSystem, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::model::{HamiltonianSpec, PhasePoint};
use crate::numerics::par_map;
use crate::quantum::normal_mode_vectors;

/// Samples per primitive period kept for the flux quadrature and the Maslov winding.
const HISTORY_SAMPLES: usize = 512;

#[derive(Clone, Debug)]
pub struct PeriodicOrbit {
    pub x0: PhasePoint,
    pub period: f64,
    pub primitive_period: f64,
    pub repetitions: u32,
    /// ∮ p·dq over the full period.
    pub action: f64,
    /// Trace-formula Maslov index (n = 2 only), from the Jacobi-field winding.
    pub maslov: Option<i32>,
    /// Turning-point count 2r along the orbit.
    pub maslov_longitudinal: i32,
    pub monodromy: DMatrix<f64>,
    pub poincare: DMatrix<f64>,
    pub det_one_minus_p: f64,
    /// ∫₀^{T*} ∂κH dt over the primitive period.
    pub moment: f64,
    /// ∮ a·dq over the primitive period.
    pub flux: f64,
    pub degenerate: bool,
    pub closure: f64,
}

impl PeriodicOrbit {
    /// The time-reversal partner used to close the orbit sum: (S, ν, m) → (−S, −ν, −m).
    pub fn partner_key(&self) -> (f64, f64) {
        (self.primitive_period, -self.action)
    }
}

#[derive(Clone, Debug)]
pub struct OrbitSearch {
    /// Largest period kept, repetitions included.
    pub max_period: f64,
    /// Random seeds on the energy shell (in addition to mode-plane seeds).
    pub shell_seeds: usize,
    pub seed: u64,
    pub mode_seeds: bool,
    /// Extra (x0, T) guesses, e.g. orbits from a neighbouring κ.
    pub guesses: Vec<(Vec<f64>, f64)>,
    pub tol: f64,
    pub newton_tol: f64,
    pub max_newton: usize,
    pub degeneracy_threshold: f64,
}

impl OrbitSearch {
    pub fn new(max_period: f64) -> Self {
        OrbitSearch {
            max_period,
            shell_seeds: 16,
            seed: 0,
            mode_seeds: true,
            guesses: Vec::new(),
            tol: DEFAULT_TOL,
            newton_tol: 1e-10,
            max_newton: 50,
            degeneracy_threshold: 1e-3,
        }
    }

    /// Re-seeds from an earlier orbit list (continuation in κ).
    pub fn continue_from(mut self, orbits: &[PeriodicOrbit]) -> Self {
        for o in orbits.iter().filter(|o| o.repetitions == 1) {
            self.guesses.push((o.x0.to_state(), o.primitive_period));
        }
        self
    }
}

#[derive(Clone, Debug, Default)]
pub struct OrbitSet {
    /// Sorted by (T*, S, r).
    pub orbits: Vec<PeriodicOrbit>,
    /// Seeds whose refinement failed, with the reason.
    pub failures: Vec<String>,
}

impl OrbitSet {
    pub fn nondegenerate(&self) -> impl Iterator<Item = &PeriodicOrbit> {
        self.orbits.iter().filter(|o| !o.degenerate)
    }

    pub fn degenerate_count(&self) -> usize {
        self.orbits.iter().filter(|o| o.degenerate).count()
    }

    /// CSV export of the orbit table.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let d = self.orbits.first().map(|o| o.x0.q.len()).unwrap_or(0);
        let mut header: Vec<String> =
            ["T_primitive", "repetitions", "T", "S", "maslov", "det_one_minus_P", "m_gamma", "flux", "degenerate", "closure"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        header.extend((1..=d).map(|i| format!("q{i}")));
        header.extend((1..=d).map(|i| format!("p{i}")));
        wr.write_record(&header).map_err(csv_err)?;
        for o in &self.orbits {
            let mut row = vec![
                format!("{:e}", o.primitive_period),
                o.repetitions.to_string(),
                format!("{:e}", o.period),
                format!("{:e}", o.action),
                o.maslov.map(|m| m.to_string()).unwrap_or_default(),
                format!("{:e}", o.det_one_minus_p),
                format!("{:e}", o.moment),
                format!("{:e}", o.flux),
                (o.degenerate as u8).to_string(),
                format!("{:e}", o.closure),
            ];
            row.extend(o.x0.to_state().iter().map(|v| format!("{v:e}")));
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn flow_vector(spec: &HamiltonianSpec, kappa: f64, x: &[f64]) -> DVector<f64> {
    let n = spec.dim();
    let g = spec.gradient(kappa, x);
    DVector::from_fn(2 * n, |i, _| if i < n { g[n + i] } else { -g[i - n] })
}

fn flow_map(spec: &HamiltonianSpec, kappa: f64, x0: &[f64], t: f64, tol: f64, tangent: bool) -> Result<(Vec<f64>, Option<DMatrix<f64>>)> {
    let d = x0.len();
    let sys = FlowSystem { spec, kappa, tangent, integrals: false };
    let y0 = if tangent { identity_augmented(x0, 0) } else { DVector::from_column_slice(x0) };
    let (_, ys) = propagate(sys, y0, t, 1, tol, "find_periodic_orbits")?;
    let y = ys.last().expect("end state");
    Ok((y.as_slice()[..d].to_vec(), tangent.then(|| unpack_tangent(y, d))))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Gauss–Newton on (x0, T): closure φ_T(x0) = x0, H(x0) = μ, and a phase condition fixing x0 along
/// the flow through the reference point.
fn refine(spec: &HamiltonianSpec, kappa: f64, mu: f64, x_ref: &[f64], t_guess: f64, opts: &OrbitSearch) -> Result<(Vec<f64>, f64, f64)> {
    let d = x_ref.len();
    let f_ref = flow_vector(spec, kappa, x_ref);
    let scale = 1.0 + norm(x_ref);
    let mut x = x_ref.to_vec();
    let mut t = t_guess;
    for _ in 0..opts.max_newton {
        if !(t > 0.0) {
            return Err(Error::numerical("orbits", "find_periodic_orbits", "period collapsed"));
        }
        let (xt, m) = flow_map(spec, kappa, &x, t, opts.tol, true)?;
        let m = m.expect("tangent");
        let mut res = DVector::zeros(d + 2);
        for i in 0..d {
            res[i] = xt[i] - x[i];
        }
        res[d] = spec.energy(kappa, &x) - mu;
        res[d + 1] = (0..d).map(|i| (x[i] - x_ref[i]) * f_ref[i]).sum();
        let closure = norm(&res.as_slice()[..d]);
        if res.norm() <= opts.newton_tol * scale {
            return Ok((x, t, closure));
        }
        let mut jac = DMatrix::zeros(d + 2, d + 1);
        let ft = flow_vector(spec, kappa, &xt);
        let g = spec.gradient(kappa, &x);
        for i in 0..d {
            for j in 0..d {
                jac[(i, j)] = m[(i, j)] - if i == j { 1.0 } else { 0.0 };
            }
            jac[(i, d)] = ft[i];
            jac[(d, i)] = g[i];
            jac[(d + 1, i)] = f_ref[i];
        }
        let svd = jac.svd(true, true);
        let step = svd
            .solve(&(-res), 1e-12 * svd.singular_values.max())
            .map_err(|e| Error::numerical("orbits", "find_periodic_orbits", e))?;
        for i in 0..d {
            x[i] += step[i];
        }
        t += step[d];
        if step.norm() < 1e-14 * scale {
            let (xt, _) = flow_map(spec, kappa, &x, t, opts.tol, false)?;
            let closure = dist(&xt, &x);
            let e = (spec.energy(kappa, &x) - mu).abs();
            if closure <= 1e-9 * scale && e <= 1e-10 * mu.abs().max(1.0) {
                return Ok((x, t, closure));
            }
            break;
        }
    }
    Err(Error::numerical("orbits", "find_periodic_orbits", format!("Newton did not converge from T = {t_guess:.6}")))
}

/// Moves a point onto H = μ along the ray from the minimum of H.
fn project_to_shell(spec: &HamiltonianSpec, kappa: f64, mu: f64, centre: &[f64], dir: &[f64]) -> Option<Vec<f64>> {
    let at = |s: f64| -> Vec<f64> { centre.iter().zip(dir).map(|(c, d)| c + s * d).collect() };
    let mut hi = 1.0;
    let mut guard = 0;
    while spec.energy(kappa, &at(hi)) < mu {
        hi *= 2.0;
        guard += 1;
        if guard > 60 {
            return None;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if spec.energy(kappa, &at(mid)) < mu {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    let mut x = at(0.5 * (lo + hi));
    // one Newton step along the gradient
    let g = spec.gradient(kappa, &x);
    let gg: f64 = g.iter().map(|v| v * v).sum();
    if gg > 0.0 {
        let r = (spec.energy(kappa, &x) - mu) / gg;
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= r * gi;
        }
    }
    Some(x)
}

fn minimum_point(spec: &HamiltonianSpec, kappa: f64) -> Vec<f64> {
    let n = spec.dim();
    let qm = spec.potential.minimizer();
    let a = spec.gauge.apply(qm);
    (0..2 * n).map(|i| if i < n { qm[i] } else { kappa * a[i - n] }).collect()
}

/// Local minima of |x(t) − x0| after the trajectory has left the neighbourhood of x0.
fn recurrences(spec: &HamiltonianSpec, kappa: f64, x0: &[f64], t_max: f64, tol: f64) -> Result<Vec<f64>> {
    let samples = ((t_max * 48.0).ceil() as usize).max(64);
    let traj = crate::classical::integrate_flow_sampled(spec, kappa, &PhasePoint::from_state(x0), t_max, samples, tol.max(1e-10))?;
    let d: Vec<f64> = traj.states.iter().map(|x| dist(x, x0)).collect();
    let scale = d.iter().cloned().fold(0.0, f64::max);
    let threshold = 0.05 * scale;
    let mut left = false;
    let mut out = Vec::new();
    for k in 1..d.len() - 1 {
        if d[k] > 2.0 * threshold {
            left = true;
        }
        if left && d[k] < threshold && d[k] <= d[k - 1] && d[k] <= d[k + 1] {
            out.push(traj.times[k]);
            if out.len() >= 6 {
                break;
            }
        }
    }
    Ok(out)
}

struct Primitive {
    x0: Vec<f64>,
    period: f64,
    action: f64,
    moment: f64,
    flux: f64,
    closure: f64,
    states: Vec<Vec<f64>>,
    tangents: Vec<DMatrix<f64>>,
}

fn primitive_data(spec: &HamiltonianSpec, kappa: f64, x0: &[f64], period: f64, closure: f64, tol: f64) -> Result<Primitive> {
    let d = x0.len();
    let sys = FlowSystem { spec, kappa, tangent: true, integrals: true };
    let y0 = identity_augmented(x0, 2);
    let (_, ys) = propagate(sys, y0, period, HISTORY_SAMPLES, tol, "find_periodic_orbits")?;
    let states: Vec<Vec<f64>> = ys.iter().map(|y| y.as_slice()[..d].to_vec()).collect();
    let tangents: Vec<DMatrix<f64>> = ys.iter().map(|y| unpack_tangent(y, d)).collect();
    let last = ys.last().expect("end state");
    let off = d + d * d;
    let flux = flux_quadrature(spec, kappa, &states, period);
    Ok(Primitive { x0: x0.to_vec(), period, action: last[off], moment: last[off + 1], flux, closure, states, tangents })
}

/// Periodic trapezoid rule for ∮ a(q)·q̇ dt on equally spaced samples (last sample = first).
fn flux_quadrature(spec: &HamiltonianSpec, kappa: f64, states: &[Vec<f64>], period: f64) -> f64 {
    let n = spec.dim();
    let k = states.len() - 1;
    let dt = period / k as f64;
    let mut acc = 0.0;
    let mut v = vec![0.0; 2 * n];
    for x in &states[..k] {
        spec.velocity_into(kappa, x, &mut v);
        let a = spec.gauge.apply(&x[..n]);
        acc += (0..n).map(|i| a[i] * v[i]).sum::<f64>();
    }
    acc * dt
}

/// Quaternionic complex structure on ℝ⁴ anticommuting with J.
fn quaternion_k() -> DMatrix<f64> {
    DMatrix::from_row_slice(4, 4, &[0., -1., 0., 0., 1., 0., 0., 0., 0., 0., 0., 1., 0., 0., -1., 0.])
}

fn omega(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let n = a.len() / 2;
    (0..n).map(|i| a[i] * b[n + i] - a[n + i] * b[i]).sum()
}

/// Symplectic basis (w₁..w_{n−1}, w′₁..w′_{n−1}) of the complement of span{∇H, J∇H}.
fn transverse_frame(gradient: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    let d = gradient.len();
    let n = d / 2;
    let gn = gradient.norm();
    if !(gn > 0.0) {
        return Err(Error::numerical("orbits", "poincare_reduce", "vanishing energy gradient"));
    }
    let g = gradient / gn;
    let j = symplectic_form(n);
    // J·w for w = [q; p] gives [p; −q]; ω(w, −Jw) = 1 for unit w.
    let pair = |w: &DVector<f64>| -(&j * w);
    if n == 2 {
        let w1 = quaternion_k() * &g;
        let w2 = pair(&w1);
        return Ok(vec![w1, w2]);
    }
    let mut taken: Vec<DVector<f64>> = vec![g.clone(), &j * &g];
    let mut firsts = Vec::new();
    let mut seconds = Vec::new();
    for e in 0..d {
        if firsts.len() == n - 1 {
            break;
        }
        let mut w = DVector::from_fn(d, |i, _| if i == e { 1.0 } else { 0.0 });
        for _ in 0..2 {
            for t in &taken {
                let c = t.dot(&w);
                w -= t * c;
            }
        }
        let nw = w.norm();
        if nw < 1e-6 {
            continue;
        }
        let w = w / nw;
        let wp = pair(&w);
        taken.push(w.clone());
        taken.push(wp.clone());
        firsts.push(w);
        seconds.push(wp);
    }
    firsts.extend(seconds);
    Ok(firsts)
}

fn reduce_with(frame: &[DVector<f64>], m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = frame.len() / 2;
    DMatrix::from_fn(2 * k, 2 * k, |r, c| {
        let u = m * &frame[c];
        if r < k {
            omega(&u, &frame[k + r])
        } else {
            -omega(&u, &frame[r - k])
        }
    })
}

/// Linearized Poincaré map on the energy shell and det(1 − P). The monodromy must fix the flow
/// direction; the transverse block is read off in a symplectic frame of the complement of
/// span{∇H, J∇H}.
pub fn poincare_reduce(monodromy: &DMatrix<f64>, flow_direction: &[f64], energy_gradient: &[f64]) -> Result<(DMatrix<f64>, f64)> {
    let d = monodromy.nrows();
    if monodromy.ncols() != d || flow_direction.len() != d || energy_gradient.len() != d || !d.is_multiple_of(2) || d < 4 {
        return Err(Error::DimensionMismatch { expected: d, got: flow_direction.len() });
    }
    let f = DVector::from_column_slice(flow_direction);
    let fnorm = f.norm();
    if !(fnorm > 0.0) {
        return Err(Error::numerical("orbits", "poincare_reduce", "zero flow direction"));
    }
    let defect = (monodromy * &f - &f).norm() / fnorm;
    if defect > 1e-6 {
        return Err(Error::numerical(
            "orbits",
            "poincare_reduce",
            format!("monodromy does not fix the flow direction (defect {defect:e}); orbit not closed"),
        ));
    }
    let frame = transverse_frame(&DVector::from_column_slice(energy_gradient))?;
    let p = reduce_with(&frame, monodromy);
    let id = DMatrix::<f64>::identity(p.nrows(), p.nrows());
    let det = (id - &p).determinant();
    Ok((p, det))
}

fn wrap(a: f64) -> f64 {
    let tau = 2.0 * std::f64::consts::PI;
    (a + std::f64::consts::PI).rem_euclid(tau) - std::f64::consts::PI
}

/// Signed winding angle of a transverse Jacobi field over r periods.
fn transverse_winding(spec: &HamiltonianSpec, kappa: f64, prim: &Primitive, r: u32) -> Result<f64> {
    let frame_at = |x: &[f64]| -> Result<(DVector<f64>, DVector<f64>)> {
        let f = transverse_frame(&DVector::from_vec(spec.gradient(kappa, x)))?;
        Ok((f[0].clone(), f[1].clone()))
    };
    let (v0, _) = frame_at(&prim.x0)?;
    let mono = prim.tangents.last().expect("monodromy");
    let mut power = DMatrix::<f64>::identity(v0.len(), v0.len());
    let mut total = 0.0;
    let mut prev: Option<f64> = None;
    let samples = prim.states.len() - 1;
    for _ in 0..r {
        let base = &power * &v0;
        for s in 0..samples {
            let u = &prim.tangents[s] * &base;
            let (w1, w2) = frame_at(&prim.states[s])?;
            let xi = omega(&u, &w2);
            let eta = -omega(&u, &w1);
            if xi.hypot(eta) < 1e-300 {
                return Err(Error::numerical("orbits", "maslov_index", "ill-conditioned transverse frame"));
            }
            let ang = eta.atan2(xi);
            if let Some(p) = prev {
                total += wrap(ang - p);
            }
            prev = Some(ang);
        }
        power = mono * power;
    }
    // close the loop at t = rT*
    let u = &power * &v0;
    let (w1, w2) = frame_at(&prim.x0)?;
    let ang = (-omega(&u, &w1)).atan2(omega(&u, &w2));
    total += wrap(ang - prev.unwrap_or(ang));
    Ok(total)
}

/// Maslov index from the winding of a Jacobi field in the quaternionic frame and the reduced map P.
/// The frame turns once per period along the orbit, so the winding already carries the
/// longitudinal count 2r; for an elliptic orbit it gives 2⌊θ/2π⌋ + 1 with θ the total angle.
fn winding_index(raw: f64, p: &DMatrix<f64>) -> i32 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let tr = p[(0, 0)] + p[(1, 1)];
    if tr.abs() < 2.0 {
        let base = (0.5 * tr).acos();
        // rotation angle in the sense of the winding
        let phi = if raw >= 0.0 {
            if p[(1, 0)] > 0.0 { base } else { two_pi - base }
        } else if p[(0, 1)] > 0.0 {
            base
        } else {
            two_pi - base
        };
        let k = ((raw.abs() - phi) / two_pi).round();
        let theta = phi + two_pi * k.max(0.0);
        2 * (theta / two_pi).floor() as i32 + 1
    } else {
        (raw.abs() / std::f64::consts::PI).round() as i32
    }
}

/// Maslov index of the r-th repetition of an orbit (n = 2).
pub fn maslov_index(spec: &HamiltonianSpec, kappa: f64, orbit: &PeriodicOrbit, tol: f64) -> Result<i32> {
    if spec.dim() != 2 {
        return Err(Error::InvalidSpec("the Maslov winding is implemented for n = 2".into()));
    }
    let prim = primitive_data(spec, kappa, &orbit.x0.to_state(), orbit.primitive_period, orbit.closure, tol)?;
    let raw = transverse_winding(spec, kappa, &prim, orbit.repetitions)?;
    Ok(winding_index(raw, &orbit.poincare))
}

/// (m_γ, Φ_γ) by two independent quadratures along the primitive orbit.
pub fn orbit_moment(spec: &HamiltonianSpec, kappa: f64, orbit: &PeriodicOrbit, tol: f64) -> Result<(f64, f64)> {
    let prim = primitive_data(spec, kappa, &orbit.x0.to_state(), orbit.primitive_period, orbit.closure, tol)?;
    Ok((prim.moment, prim.flux))
}

fn build_orbits(spec: &HamiltonianSpec, kappa: f64, prim: &Primitive, opts: &OrbitSearch) -> Result<Vec<PeriodicOrbit>> {
    let reps = ((opts.max_period / prim.period) + 1e-9).floor() as u32;
    let mono = prim.tangents.last().expect("monodromy").clone();
    let f = flow_vector(spec, kappa, &prim.x0);
    let g = spec.gradient(kappa, &prim.x0);
    let mut out = Vec::new();
    let mut power = mono.clone();
    for r in 1..=reps {
        let (p, det) = poincare_reduce(&power, f.as_slice(), &g)?;
        let eig = p.complex_eigenvalues();
        let degenerate = eig.iter().any(|l| (l - nalgebra::Complex::new(1.0, 0.0)).norm() < opts.degeneracy_threshold);
        let maslov = if spec.dim() == 2 {
            let raw = transverse_winding(spec, kappa, prim, r)?;
            Some(winding_index(raw, &p))
        } else {
            None
        };
        out.push(PeriodicOrbit {
            x0: PhasePoint::from_state(&prim.x0),
            period: r as f64 * prim.period,
            primitive_period: prim.period,
            repetitions: r,
            action: r as f64 * prim.action,
            maslov,
            maslov_longitudinal: 2 * r as i32,
            monodromy: power.clone(),
            poincare: p,
            det_one_minus_p: det,
            moment: prim.moment,
            flux: prim.flux,
            degenerate,
            closure: prim.closure,
        });
        power = &mono * power;
    }
    Ok(out)
}

/// Shortest divisor period T/k at which the orbit already closes.
fn primitive_period(spec: &HamiltonianSpec, kappa: f64, x0: &[f64], period: f64, tol: f64) -> Result<f64> {
    let scale = 1.0 + norm(x0);
    for k in (2..=12).rev() {
        let (xt, _) = flow_map(spec, kappa, x0, period / k as f64, tol, false)?;
        if dist(&xt, x0) <= 1e-6 * scale {
            return Ok(period / k as f64);
        }
    }
    Ok(period)
}

fn same_orbit(a: &Primitive, b: &Primitive) -> bool {
    let dt = (a.period - b.period).abs() <= 1e-6 * a.period.max(1.0);
    let ds = (a.action - b.action).abs() <= 1e-6 * a.action.abs().max(1.0);
    if !(dt && ds) {
        return false;
    }
    // b's start point must lie on a's trajectory (within the sample spacing)
    let spacing = a.states.windows(2).map(|w| dist(&w[0], &w[1])).fold(0.0, f64::max);
    a.states.iter().any(|x| dist(x, &b.x0) <= spacing)
}

/// Finds periodic orbits on H_κ = μ with period ≤ `opts.max_period`, repetitions included.
pub fn find_periodic_orbits(spec: &HamiltonianSpec, kappa: f64, mu: f64, opts: &OrbitSearch) -> Result<OrbitSet> {
    if !(opts.max_period > 0.0) {
        return Err(Error::Config("maximal period must be positive".into()));
    }
    crate::classical::check_noncritical(spec, mu)?;
    let centre = minimum_point(spec, kappa);
    let mut candidates: Vec<(Vec<f64>, Option<f64>)> = Vec::new();

    if opts.mode_seeds {
        // linearization at the minimum: exact for quadratic specs, a guess otherwise
        let lin = if spec.is_quadratic() { spec.clone() } else { linearized(spec)? };
        let (modes, vectors) = normal_mode_vectors(&lin, kappa)?;
        let e = mu - modes.ground;
        for (w, v) in modes.frequencies.iter().zip(&vectors) {
            // x = centre + Re(c v), energy ¼|c|²·v̄ᵀKv = |c|²/4
            let c = 2.0 * e.sqrt();
            let mut x: Vec<f64> = centre.iter().zip(v.iter()).map(|(x0, vi)| x0 + c * vi.re).collect();
            if !spec.is_quadratic() {
                let dir: Vec<f64> = x.iter().zip(&centre).map(|(a, b)| a - b).collect();
                match project_to_shell(spec, kappa, mu, &centre, &dir) {
                    Some(p) => x = p,
                    None => continue,
                }
            }
            candidates.push((x, Some(2.0 * std::f64::consts::PI / w)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let d = centre.len();
    for _ in 0..opts.shell_seeds {
        let dir: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        if let Some(x) = project_to_shell(spec, kappa, mu, &centre, &dir) {
            candidates.push((x, None));
        }
    }
    for (x, t) in &opts.guesses {
        candidates.push((x.clone(), Some(*t)));
    }

    let refined = par_map(candidates.len(), |i| -> Vec<Result<Primitive>> {
        let (x, t) = &candidates[i];
        let guesses = match t {
            Some(t) => vec![*t],
            None => match recurrences(spec, kappa, x, opts.max_period, opts.tol) {
                Ok(ts) => ts,
                Err(e) => return vec![Err(e)],
            },
        };
        guesses
            .into_iter()
            .map(|tg| {
                let (x0, t, _) = refine(spec, kappa, mu, x, tg, opts)?;
                let tp = primitive_period(spec, kappa, &x0, t, opts.tol)?;
                let (x0, tp, closure) = if tp < t { refine(spec, kappa, mu, &x0, tp, opts)? } else { (x0, t, 0.0) };
                let closure = if closure == 0.0 { dist(&flow_map(spec, kappa, &x0, tp, opts.tol, false)?.0, &x0) } else { closure };
                if tp > opts.max_period {
                    return Err(Error::numerical("orbits", "find_periodic_orbits", format!("orbit period {tp:.6} exceeds the limit")));
                }
                primitive_data(spec, kappa, &x0, tp, closure, opts.tol)
            })
            .collect()
    });

    let mut prims: Vec<Primitive> = Vec::new();
    let mut failures = Vec::new();
    for r in refined.into_iter().flatten() {
        match r {
            Ok(p) => {
                if !prims.iter().any(|q| same_orbit(q, &p)) {
                    prims.push(p);
                }
            }
            Err(e) => {
                log::debug!("orbit candidate dropped: {e}");
                failures.push(e.to_string());
            }
        }
    }
    prims.sort_by(|a, b| a.period.total_cmp(&b.period).then(a.action.total_cmp(&b.action)));
    let mut orbits = Vec::new();
    for p in &prims {
        orbits.extend(build_orbits(spec, kappa, p, opts)?);
    }
    orbits.sort_by(|a, b| {
        a.primitive_period
            .total_cmp(&b.primitive_period)
            .then(a.action.total_cmp(&b.action))
            .then(a.repetitions.cmp(&b.repetitions))
    });
    Ok(OrbitSet { orbits, failures })
}

/// Quadratic approximation of the spec at its minimum (same gauge).
fn linearized(spec: &HamiltonianSpec) -> Result<HamiltonianSpec> {
    let n = spec.dim();
    let qm = spec.potential.minimizer().to_vec();
    let h = spec.potential.hessian(&qm);
    let mut terms: Vec<(Vec<u32>, f64)> = vec![(vec![0; n], spec.potential.minimum())];
    for i in 0..n {
        for j in i..n {
            let mut e = vec![0u32; n];
            e[i] += 1;
            e[j] += 1;
            let c = if i == j { 0.5 * h[(i, i)] } else { h[(i, j)] };
            terms.push((e, c));
        }
    }
    // centred at the origin; the seed is shifted back by the minimum point of the full spec
    let pot = crate::model::PotentialModel::new(n, terms)?;
    HamiltonianSpec::new(pot, spec.gauge.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aniso(kappa_b: f64) -> HamiltonianSpec {
        HamiltonianSpec::anisotropic(1.0, 2f64.sqrt(), 1.0, kappa_b).unwrap()
    }

    #[test]
    fn rotation_reduction() {
        // monodromy of the linear flow with frequencies (1, ω₂) over one period of mode 1
        for theta in [0.3, std::f64::consts::PI, 2.0, 1e-5] {
            let (c, s) = (theta.cos(), theta.sin());
            // q₂, p₂ rotate by θ; q₁, p₁ return (identity)
            let mut m = DMatrix::<f64>::identity(4, 4);
            m[(1, 1)] = c;
            m[(1, 3)] = s;
            m[(3, 1)] = -s;
            m[(3, 3)] = c;
            let x = [1.0, 0.0, 0.0, 0.0];
            let (_, det) = poincare_reduce(&m, &[0.0, 0.0, -1.0, 0.0], &x).unwrap();
            let want = 4.0 * (theta / 2.0).sin().powi(2);
            assert!((det - want).abs() < 1e-12, "{theta}: {det} {want}");
        }
    }

    #[test]
    fn zero_field_librations() {
        let spec = aniso(1.0);
        let set = find_periodic_orbits(&spec, 0.0, 2.0, &OrbitSearch::new(7.0)).unwrap();
        let prims: Vec<&PeriodicOrbit> = set.orbits.iter().filter(|o| o.repetitions == 1).collect();
        assert_eq!(prims.len(), 2, "{:?}", prims.iter().map(|o| o.period).collect::<Vec<_>>());
        let pi2 = 2.0 * std::f64::consts::PI;
        let s2 = 2f64.sqrt();
        let short = prims[0];
        let long = prims[1];
        assert!((short.period - pi2 / s2).abs() < 1e-8);
        assert!((long.period - pi2).abs() < 1e-8);
        assert!((long.action - pi2).abs() < 1e-8);
        assert!((short.action - pi2 / s2).abs() < 1e-8);
        let want = 4.0 * (std::f64::consts::PI * s2).sin().powi(2);
        assert!((long.det_one_minus_p - want).abs() < 1e-6);
        assert!((want - 3.7164).abs() < 1e-4);
        assert_eq!(long.maslov_longitudinal, 2);
        // zero flux through a libration at κ = 0
        assert!(long.flux.abs() < 1e-10 && long.moment.abs() < 1e-10);
        // odd total index: 2 + 2⌊√2⌋ + 1
        assert_eq!(long.maslov, Some(5));
        assert_eq!(short.maslov, Some(2 + 1));
    }

    #[test]
    fn isotropic_zero_field_is_degenerate() {
        let spec = HamiltonianSpec::isotropic(1.0, 1.0, 1.0).unwrap();
        let mut opts = OrbitSearch::new(7.0);
        opts.shell_seeds = 4;
        let set = find_periodic_orbits(&spec, 0.0, 2.0, &opts).unwrap();
        assert!(!set.orbits.is_empty());
        assert!(set.orbits.iter().all(|o| o.degenerate));
    }

    #[test]
    fn magnetic_mode_orbits() {
        let spec = aniso(1.0);
        let (mu, kappa) = (1.5, 1.0);
        let set = find_periodic_orbits(&spec, kappa, mu, &OrbitSearch::new(20.0)).unwrap();
        let s2 = 2f64.sqrt();
        let om = [(2.0 + s2).sqrt(), (2.0 - s2).sqrt()];
        for o in &set.orbits {
            assert!(!o.degenerate);
            let (a, b) = if (o.primitive_period - 2.0 * std::f64::consts::PI / om[0]).abs() < 1e-6 { (0, 1) } else { (1, 0) };
            assert!((o.primitive_period - 2.0 * std::f64::consts::PI / om[a]).abs() < 1e-8);
            let r = o.repetitions as f64;
            let ratio = r * om[b] / om[a];
            let want = 4.0 * (std::f64::consts::PI * ratio).sin().powi(2);
            assert!((o.det_one_minus_p - want).abs() < 1e-6, "{} vs {want}", o.det_one_minus_p);
            // det(1 − P) = 4 − tr M for n = 2
            assert!((o.det_one_minus_p - (4.0 - o.monodromy.trace())).abs() < 1e-6);
            assert!((o.moment + o.flux).abs() < 1e-8);
            assert!(crate::classical::symplectic_defect(&o.monodromy) < 1e-8);
            assert!((o.action - r * 2.0 * std::f64::consts::PI * (mu - 1.0) / om[a]).abs() < 1e-8);
            assert_eq!(o.maslov, Some(2 * o.repetitions as i32 + 2 * ratio.floor() as i32 + 1), "r={r} a={a}");
            assert!(o.closure < 1e-8);
        }
        let reps_a = set.orbits.iter().filter(|o| (o.primitive_period - 2.0 * std::f64::consts::PI / om[0]).abs() < 1e-6).count();
        assert_eq!(reps_a, (20.0 / (2.0 * std::f64::consts::PI / om[0])).floor() as usize);
    }

    #[test]
    fn fock_darwin_circle_moment() {
        // isotropic ω = 1, κ = 1: circular orbits, m = −B·(signed area)
        let spec = HamiltonianSpec::isotropic(1.0, 1.0, 1.0).unwrap();
        let set = find_periodic_orbits(&spec, 1.0, 2.0, &OrbitSearch::new(12.0)).unwrap();
        for o in set.orbits.iter().filter(|o| o.repetitions == 1) {
            let traj = crate::classical::integrate_flow_sampled(&spec, 1.0, &o.x0, o.period, 400, 1e-12).unwrap();
            // signed area ½∮(q₁q̇₂ − q₂q̇₁)dt by the periodic trapezoid rule
            let dt = o.period / 400.0;
            let mut v = vec![0.0; 4];
            let mut area = 0.0;
            for x in &traj.states[..400] {
                spec.velocity_into(1.0, x, &mut v);
                area += 0.5 * (x[0] * v[1] - x[1] * v[0]) * dt;
            }
            // gauge symmetric with b = 1 → B₁₂ = −1, ∮a·dq = b·area
            assert!((o.flux - area).abs() < 1e-6, "{} {area}", o.flux);
            assert!((o.moment + area).abs() < 1e-6);
        }
    }

    #[test]
    fn section_choice_invariance() {
        let spec = aniso(1.0);
        let set = find_periodic_orbits(&spec, 1.0, 1.5, &OrbitSearch::new(5.0)).unwrap();
        let o = &set.orbits[0];
        let t1 = o.period / 3.0;
        let (x1, m1) = flow_map(&spec, 1.0, &o.x0.to_state(), t1, 1e-12, true).unwrap();
        let m1 = m1.unwrap();
        let moved = &m1 * &o.monodromy * m1.clone().try_inverse().unwrap();
        let f = flow_vector(&spec, 1.0, &x1);
        let (_, det) = poincare_reduce(&moved, f.as_slice(), &spec.gradient(1.0, &x1)).unwrap();
        assert!((det - o.det_one_minus_p).abs() <= 1e-6 * o.det_one_minus_p.abs());
    }

    #[test]
    fn repetition_action_is_additive() {
        let spec = aniso(1.0);
        let set = find_periodic_orbits(&spec, 1.0, 1.5, &OrbitSearch::new(8.0)).unwrap();
        let o = set.orbits.iter().find(|o| o.repetitions == 2).unwrap();
        let full = primitive_data(&spec, 1.0, &o.x0.to_state(), o.period, 0.0, 1e-12).unwrap();
        assert!((full.action - o.action).abs() < 1e-8);
        let again = orbit_moment(&spec, 1.0, o, 1e-12).unwrap();
        assert!((again.0 - o.moment).abs() < 1e-10);
        assert_eq!(maslov_index(&spec, 1.0, o, 1e-12).unwrap(), o.maslov.unwrap());
    }

    #[test]
    fn tolerance_stability() {
        let spec = aniso(1.0);
        let a = find_periodic_orbits(&spec, 1.0, 1.5, &OrbitSearch::new(9.0)).unwrap();
        let mut o = OrbitSearch::new(9.0);
        o.tol = 5e-13;
        let b = find_periodic_orbits(&spec, 1.0, 1.5, &o).unwrap();
        assert_eq!(a.orbits.len(), b.orbits.len());
        for (x, y) in a.orbits.iter().zip(&b.orbits) {
            assert!((x.period - y.period).abs() <= 1e-7 && (x.action - y.action).abs() <= 1e-7);
        }
    }

    #[test]
    fn anharmonic_orbits_found() {
        let pot = crate::model::PotentialModel::new(
            2,
            [(vec![0, 0], 1.0), (vec![2, 0], 0.5), (vec![0, 2], 0.9), (vec![4, 0], 0.1), (vec![2, 2], 0.05), (vec![0, 4], 0.1)],
        )
        .unwrap();
        let spec = HamiltonianSpec::new(pot, crate::model::GaugeField::symmetric(1.0)).unwrap();
        let set = find_periodic_orbits(&spec, 0.5, 1.8, &OrbitSearch::new(10.0)).unwrap();
        assert!(set.orbits.len() >= 2);
        for o in &set.orbits {
            assert!((spec.energy(0.5, &o.x0.to_state()) - 1.8).abs() < 1e-10 * 1.8);
            assert!(o.closure < 1e-8);
            assert!((o.moment + o.flux).abs() < 1e-8);
            assert!((o.period - o.repetitions as f64 * o.primitive_period).abs() < 1e-8);
        }
    }
}
