//! Grand-canonical sums over a spectrum and the time-smeared magnetization.
//!
//! With σ = βħ and x = (E − μ)/ħ the Fermi factor is f_σ(x), whose derivative has the Fourier
//! representation −(1/2π)∫ R(t) e^{itx} dt with R(t) = (πt/σ)/sinh(πt/σ). Inserting a time cutoff
//! w(t) gives the smeared kernels tabulated by [`SmearingKernel`].

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{par_map, plateau, CompensatedSum};
use crate::quantum::SpectralResult;

/// Levels beyond μ + TRUNCATION/β are dropped (Fermi weight below e^{−40}).
pub const TRUNCATION: f64 = 40.0;
/// Default exponent margin ε of the regime inequalities.
pub const DEFAULT_EPS: f64 = 0.05;
/// Largest σ still treated as finite temperature.
pub const SIGMA_MAX: f64 = 50.0;

/// F_β(x) = −(1/β) log(1 + e^{−βx}), evaluated without overflow.
pub fn fermi_big_f(beta: f64, x: f64) -> f64 {
    let y = beta * x;
    if y >= 0.0 {
        -(-y).exp().ln_1p() / beta
    } else {
        x - y.exp().ln_1p() / beta
    }
}

/// f_β(x) = 1/(1 + e^{βx}).
pub fn fermi_f(beta: f64, x: f64) -> f64 {
    let y = beta * x;
    if y >= 0.0 {
        let e = (-y).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + y.exp())
    }
}

/// f′_β(x) = −β e^{βx}/(1 + e^{βx})².
pub fn fermi_f_prime(beta: f64, x: f64) -> f64 {
    let e = (-(beta * x).abs()).exp();
    -beta * e / ((1.0 + e) * (1.0 + e))
}

/// (πt/σ)/sinh(πt/σ), with its series near t = 0.
pub fn damping(t: f64, sigma: f64) -> f64 {
    let z = std::f64::consts::PI * t / sigma;
    let a = z.abs();
    if a < 1e-4 {
        1.0 - z * z / 6.0
    } else if a > 700.0 {
        2.0 * a * (-a).exp()
    } else {
        z / z.sinh()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// β ≤ ħ^{ε−2/3}: the ħ-expansion of Ω holds.
    Expansion,
    /// σ = βħ bounded: periodic orbits contribute with sinh damping.
    Mesoscopic,
    /// ħ^{1−ε} ≤ k_BT ≤ ħ^{2/3−ε}: the long-time tail is exponentially small.
    Intermediate,
    /// σ beyond the finite-temperature range.
    ZeroTemperature,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Expansion => "expansion",
            Regime::Mesoscopic => "mesoscopic",
            Regime::Intermediate => "intermediate",
            Regime::ZeroTemperature => "zero-temperature",
        })
    }
}

/// Regime with the ratios of each inequality (≤ 1 means satisfied).
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct RegimeReport {
    pub regime: Regime,
    /// β / ħ^{ε−2/3}
    pub expansion_ratio: f64,
    /// σ / ħ^ε
    pub intermediate_ratio: f64,
    /// σ / σ_max
    pub mesoscopic_ratio: f64,
}

pub fn regime_classify(hbar: f64, beta: f64, eps: f64) -> RegimeReport {
    let sigma = beta * hbar;
    let expansion_ratio = beta / hbar.powf(eps - 2.0 / 3.0);
    let intermediate_ratio = sigma / hbar.powf(eps);
    let mesoscopic_ratio = sigma / SIGMA_MAX;
    let regime = if expansion_ratio <= 1.0 {
        Regime::Expansion
    } else if intermediate_ratio <= 1.0 {
        Regime::Intermediate
    } else if mesoscopic_ratio <= 1.0 {
        Regime::Mesoscopic
    } else {
        Regime::ZeroTemperature
    };
    RegimeReport { regime, expansion_ratio, intermediate_ratio, mesoscopic_ratio }
}

/// Time cutoffs τ₀ < τ/2 and the energy window half-width δ.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Smearing {
    pub tau0: f64,
    pub tau: f64,
    pub delta: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ThermoState {
    pub hbar: f64,
    pub beta: f64,
    pub mu: f64,
    pub kappa: f64,
    pub smearing: Option<Smearing>,
    pub eps: f64,
}

impl ThermoState {
    pub fn new(hbar: f64, beta: f64, mu: f64, kappa: f64) -> Result<Self> {
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(Error::Config(format!("ħ must be positive, got {hbar}")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("β must be positive, got {beta}")));
        }
        if !mu.is_finite() || !kappa.is_finite() {
            return Err(Error::Config("μ and κ must be finite".into()));
        }
        Ok(ThermoState { hbar, beta, mu, kappa, smearing: None, eps: DEFAULT_EPS })
    }

    pub fn with_smearing(mut self, tau0: f64, tau: f64, delta: f64) -> Result<Self> {
        if !(tau0 > 0.0 && tau > 2.0 * tau0 && tau.is_finite()) {
            return Err(Error::Config(format!("need τ > 2τ₀ > 0, got τ₀ = {tau0}, τ = {tau}")));
        }
        if !(delta > 0.0) {
            return Err(Error::Config(format!("δ must be positive, got {delta}")));
        }
        self.smearing = Some(Smearing { tau0, tau, delta });
        Ok(self)
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn sigma(&self) -> f64 {
        self.beta * self.hbar
    }

    pub fn regime(&self) -> RegimeReport {
        regime_classify(self.hbar, self.beta, self.eps)
    }

    fn smearing(&self, op: &'static str) -> Result<Smearing> {
        self.smearing.ok_or_else(|| Error::Config(format!("{op} needs τ₀, τ and δ")))
    }

    /// Energy window θ(E − μ): 1 for |E − μ| ≤ δ/2, 0 beyond δ.
    pub fn window(&self, energy: f64) -> f64 {
        match self.smearing {
            Some(s) => plateau(2.0 * (energy - self.mu) / s.delta),
            None => 1.0,
        }
    }
}

/// A spectral sum with a bound on the contribution of the dropped levels.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct SpectralSum {
    pub value: f64,
    pub tail_bound: f64,
}

fn require_cutoff(spectrum: &SpectralResult, state: &ThermoState) -> Result<f64> {
    let required = state.mu + TRUNCATION / state.beta;
    if !spectrum.is_full() || spectrum.complete_through < required {
        return Err(Error::SpectrumTooShort {
            required,
            available: if spectrum.is_full() { spectrum.complete_through } else { f64::NEG_INFINITY },
        });
    }
    Ok(required)
}

/// Rough bound on Σ_{E > cut} |F| from the level density near the top of the spectrum, assuming the
/// counting function grows at most quadratically.
fn tail_bound(spectrum: &SpectralResult, state: &ThermoState, cut: f64) -> f64 {
    let n = spectrum.len() as f64;
    let e0 = spectrum.energies.first().copied().unwrap_or(cut);
    let span = (cut - e0).max(1e-300);
    let density = 2.0 * n / span;
    let b = state.beta;
    density * (-b * (cut - state.mu)).exp() / b * (1.0 + 2.0 / (b * span)) / b.min(1.0)
}

fn levels_through(spectrum: &SpectralResult, cut: f64) -> usize {
    spectrum.energies.partition_point(|&e| e <= cut)
}

/// Ω = Σ_j F_β(E_j − μ).
pub fn grand_potential(spectrum: &SpectralResult, state: &ThermoState) -> Result<SpectralSum> {
    let cut = require_cutoff(spectrum, state)?;
    let mut s = CompensatedSum::default();
    for &e in &spectrum.energies[..levels_through(spectrum, cut)] {
        s.add(fermi_big_f(state.beta, e - state.mu));
    }
    Ok(SpectralSum { value: s.value(), tail_bound: tail_bound(spectrum, state, cut) })
}

/// N = Σ_j f_β(E_j − μ).
pub fn particle_number(spectrum: &SpectralResult, state: &ThermoState) -> Result<SpectralSum> {
    let cut = require_cutoff(spectrum, state)?;
    let mut s = CompensatedSum::default();
    for &e in &spectrum.energies[..levels_through(spectrum, cut)] {
        s.add(fermi_f(state.beta, e - state.mu));
    }
    Ok(SpectralSum { value: s.value(), tail_bound: state.beta * tail_bound(spectrum, state, cut) })
}

/// M = Σ_j f_β(E_j − μ)·dE_j/dκ.
pub fn magnetization_exact(spectrum: &SpectralResult, state: &ThermoState) -> Result<SpectralSum> {
    let cut = require_cutoff(spectrum, state)?;
    let k = levels_through(spectrum, cut);
    let mut s = CompensatedSum::default();
    for j in 0..k {
        s.add(fermi_f(state.beta, spectrum.energies[j] - state.mu) * spectrum.derivatives[j]);
    }
    let dmax = spectrum.derivatives[..k].iter().fold(0.0f64, |a, d| a.max(d.abs()));
    Ok(SpectralSum { value: s.value(), tail_bound: state.beta * dmax * tail_bound(spectrum, state, cut) })
}

/// χ from the central second difference of Ω in κ. `solve` must return a spectrum at the given κ.
/// With `richardson`, the steps dκ and dκ/2 are combined to cancel the O(dκ²) error.
pub fn susceptibility_exact<F>(solve: F, state: &ThermoState, dkappa: f64, richardson: bool) -> Result<SpectralSum>
where
    F: Fn(f64) -> Result<SpectralResult>,
{
    if !(dkappa > 0.0) {
        return Err(Error::Config("dκ must be positive".into()));
    }
    let omega_at = |k: f64| -> Result<SpectralSum> {
        let spec = solve(k)?;
        let st = ThermoState { kappa: k, ..*state };
        grand_potential(&spec, &st)
    };
    let centre = omega_at(state.kappa)?;
    let second = |h: f64| -> Result<(f64, f64)> {
        let p = omega_at(state.kappa + h)?;
        let m = omega_at(state.kappa - h)?;
        let v = (p.value - 2.0 * centre.value + m.value) / (h * h);
        let rounding = 4.0 * f64::EPSILON * centre.value.abs() / (h * h);
        Ok((v, rounding + (p.tail_bound + 2.0 * centre.tail_bound + m.tail_bound) / (h * h)))
    };
    let (c1, e1) = second(dkappa)?;
    if !richardson {
        return Ok(SpectralSum { value: c1, tail_bound: e1 });
    }
    let (c2, e2) = second(0.5 * dkappa)?;
    let value = (4.0 * c2 - c1) / 3.0;
    Ok(SpectralSum { value, tail_bound: (4.0 * e2 + e1) / 3.0 + (c2 - c1).abs() / 3.0 })
}

// ---------------------------------------------------------------------------------------------
// Smearing kernels

#[derive(Clone, Debug)]
struct Table {
    x0: f64,
    h: f64,
    g: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

impl Table {
    fn x_max(&self) -> f64 {
        self.x0 + self.h * (self.g.len() - 1) as f64
    }

    fn contains(&self, x: f64) -> bool {
        x >= self.x0 && x <= self.x_max()
    }

    /// Quintic Hermite interpolation from values and first two derivatives.
    fn eval(&self, x: f64) -> (f64, f64) {
        let s = (x - self.x0) / self.h;
        let i = (s.floor() as usize).min(self.g.len() - 2);
        let u = s - i as f64;
        let h = self.h;
        let (u2, u3) = (u * u, u * u * u);
        let (u4, u5) = (u3 * u, u3 * u2);
        let h0 = 1.0 - 10.0 * u3 + 15.0 * u4 - 6.0 * u5;
        let h1 = u - 6.0 * u3 + 8.0 * u4 - 3.0 * u5;
        let h2 = 0.5 * (u2 - 3.0 * u3 + 3.0 * u4 - u5);
        let h3 = 0.5 * (u3 - 2.0 * u4 + u5);
        let h4 = -4.0 * u3 + 7.0 * u4 - 3.0 * u5;
        let h5 = 10.0 * u3 - 15.0 * u4 + 6.0 * u5;
        let v = self.g[i] * h0
            + h * self.d1[i] * h1
            + h * h * self.d2[i] * h2
            + h * h * self.d2[i + 1] * h3
            + h * self.d1[i + 1] * h4
            + self.g[i + 1] * h5;
        // derivative of the interpolant
        let dh0 = -30.0 * u2 + 60.0 * u3 - 30.0 * u4;
        let dh1 = 1.0 - 18.0 * u2 + 32.0 * u3 - 15.0 * u4;
        let dh2 = 0.5 * (2.0 * u - 9.0 * u2 + 12.0 * u3 - 5.0 * u4);
        let dh3 = 0.5 * (3.0 * u2 - 8.0 * u3 + 5.0 * u4);
        let dh4 = -12.0 * u2 + 28.0 * u3 - 15.0 * u4;
        let dh5 = 30.0 * u2 - 60.0 * u3 + 30.0 * u4;
        let d = (self.g[i] * dh0 + self.g[i + 1] * dh5) / h
            + self.d1[i] * dh1
            + self.d1[i + 1] * dh4
            + h * (self.d2[i] * dh2 + self.d2[i + 1] * dh3);
        (v, d)
    }
}

/// Trapezoid rule on [0, t_max] for the cutoff w(t)·R(t).
struct TimeRule {
    dt: f64,
    weights: Vec<f64>,
}

impl TimeRule {
    fn new(sigma: f64, t_max: f64, dt: f64, cutoff: impl Fn(f64) -> f64) -> Self {
        let n = (t_max / dt).ceil() as usize;
        let dt = t_max / n as f64;
        let weights = (0..=n)
            .map(|k| {
                let t = k as f64 * dt;
                let end = if k == 0 || k == n { 0.5 } else { 1.0 };
                end * dt * cutoff(t) * damping(t, sigma)
            })
            .collect();
        TimeRule { dt, weights }
    }

    /// (Σ W sin(tx)/t, Σ W cos(tx), Σ W t sin(tx)) with the t = 0 limit of sin(tx)/t = x.
    fn moments(&self, x: f64) -> (f64, f64, f64) {
        let (sd, cd) = (self.dt * x).sin_cos();
        let (mut s, mut c) = (0.0f64, 1.0f64);
        let (mut a, mut b, mut g) = (self.weights[0] * x, self.weights[0], 0.0);
        for k in 1..self.weights.len() {
            if k % 128 == 0 {
                let (ss, cc) = (k as f64 * self.dt * x).sin_cos();
                s = ss;
                c = cc;
            } else {
                let ns = s * cd + c * sd;
                c = c * cd - s * sd;
                s = ns;
            }
            let t = k as f64 * self.dt;
            let w = self.weights[k];
            a += w * s / t;
            b += w * c;
            g += w * t * s;
        }
        (a, b, g)
    }
}

/// Plateau cutoff g_{τ₀} = f_σ ∗ ρ̃_{τ₀} and band kernel g₁ built from ρ_τ(1 − ρ_{τ₀}), tabulated on
/// |x| ≤ x_max. Beyond the table the plateau kernels fall back to f_σ and the band kernel to 0.
#[derive(Clone, Debug)]
pub struct SmearingKernel {
    pub sigma: f64,
    pub tau0: f64,
    pub tau: f64,
    near: Table,
    band: Table,
    /// Largest jump at the table edges between the tabulated kernels and their fallbacks.
    pub edge_mismatch: f64,
    /// Largest positive value of g′_τ on the grid (zero for an exactly monotone kernel).
    pub max_positive_slope: f64,
    /// Largest change of tabulated values when the time step is halved.
    pub resolution_change: f64,
}

fn time_step(x_max: f64, sigma: f64, tau0: f64) -> f64 {
    2.0 * std::f64::consts::PI / (x_max + 800.0 / tau0 + 40.0 / sigma)
}

fn tabulate(rule: &TimeRule, plateau_part: bool, x_max: f64, h: f64) -> Table {
    let n = (2.0 * x_max / h).ceil() as usize;
    let h = 2.0 * x_max / n as f64;
    let chunk = 256;
    let chunks = par_map((n + 1).div_ceil(chunk), |c| {
        let lo = c * chunk;
        let hi = ((c + 1) * chunk).min(n + 1);
        (lo..hi)
            .map(|i| {
                let x = -x_max + i as f64 * h;
                let (a, b, g) = rule.moments(x);
                let base = if plateau_part { 0.5 } else { 0.0 };
                (base - a / std::f64::consts::PI, -b / std::f64::consts::PI, g / std::f64::consts::PI)
            })
            .collect::<Vec<_>>()
    });
    let vals: Vec<(f64, f64, f64)> = chunks.into_iter().flatten().collect();
    Table {
        x0: -x_max,
        h,
        g: vals.iter().map(|v| v.0).collect(),
        d1: vals.iter().map(|v| v.1).collect(),
        d2: vals.iter().map(|v| v.2).collect(),
    }
}

impl SmearingKernel {
    /// Tabulates both kernels on |x| ≤ x_max (x in units of energy/ħ).
    pub fn build(sigma: f64, tau0: f64, tau: f64, x_max: f64) -> Result<Self> {
        if !(sigma > 0.0 && tau0 > 0.0 && tau > 2.0 * tau0 && x_max > 0.0) {
            return Err(Error::Config(format!("kernel needs σ > 0, τ > 2τ₀ > 0, x_max > 0 (σ={sigma}, τ₀={tau0}, τ={tau})")));
        }
        let h = (0.1 / (2.0 * tau)).min(0.004);
        let dt = time_step(x_max, sigma, tau0);
        let near_rule = |dt| TimeRule::new(sigma, 2.0 * tau0, dt, |t| plateau(t / tau0));
        let band_rule = |dt| TimeRule::new(sigma, 2.0 * tau, dt, |t| plateau(t / tau) * (1.0 - plateau(t / tau0)));
        let near = tabulate(&near_rule(dt), true, x_max, h);
        let band = tabulate(&band_rule(dt), false, x_max, h);

        // resolution check on a sparse subsample
        let (fine_near, fine_band) = (near_rule(0.5 * dt), band_rule(0.5 * dt));
        let step = (near.g.len() / 97).max(1);
        let mut resolution_change = 0.0f64;
        for i in (0..near.g.len()).step_by(step) {
            let x = near.x0 + i as f64 * near.h;
            let pi = std::f64::consts::PI;
            let gn = 0.5 - fine_near.moments(x).0 / pi;
            let gb = -fine_band.moments(x).0 / pi;
            resolution_change = resolution_change.max((gn - near.g[i]).abs()).max((gb - band.g[i]).abs());
        }
        let beta_like = sigma;
        let mut edge_mismatch = 0.0f64;
        for (idx, x) in [(0, -x_max), (near.g.len() - 1, x_max)] {
            let f = fermi_f(beta_like, x);
            edge_mismatch = edge_mismatch
                .max((near.g[idx] - f).abs())
                .max((near.g[idx] + band.g[idx] - f).abs())
                .max(band.g[idx].abs());
        }
        let max_positive_slope = near.d1.iter().zip(&band.d1).map(|(a, b)| a + b).fold(0.0, f64::max);
        if resolution_change > 1e-7 {
            return Err(Error::numerical(
                "thermo",
                "build_smearing_kernel",
                format!("time quadrature unresolved (change {resolution_change:e} on halving dt); reduce x_max or enlarge τ₀"),
            ));
        }
        Ok(SmearingKernel { sigma, tau0, tau, near, band, edge_mismatch, max_positive_slope, resolution_change })
    }

    pub fn x_max(&self) -> f64 {
        self.near.x_max()
    }

    /// g_{τ₀}(x), the kernel with only the short-time cutoff.
    pub fn g_tau0(&self, x: f64) -> f64 {
        if self.near.contains(x) {
            self.near.eval(x).0
        } else {
            fermi_f(self.sigma, x)
        }
    }

    /// g₁(x), the band kernel carrying times τ₀ ≲ |t| ≲ 2τ.
    pub fn g_band(&self, x: f64) -> f64 {
        if self.band.contains(x) {
            self.band.eval(x).0
        } else {
            0.0
        }
    }

    /// g_τ(x) = g_{τ₀}(x) + g₁(x).
    pub fn g_tau(&self, x: f64) -> f64 {
        if self.near.contains(x) {
            self.near.eval(x).0 + self.band.eval(x).0
        } else {
            fermi_f(self.sigma, x)
        }
    }

    /// g′_τ(x).
    pub fn g_tau_prime(&self, x: f64) -> f64 {
        if self.near.contains(x) {
            self.near.eval(x).1 + self.band.eval(x).1
        } else {
            fermi_f_prime(self.sigma, x)
        }
    }
}

/// Smeared magnetization and its mean/oscillating split.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct SmearedMagnetization {
    pub m_tau: f64,
    pub m_mean: f64,
    pub m_osc: f64,
}

fn check_kernel(kernel: &SmearingKernel, state: &ThermoState, s: &Smearing) -> Result<()> {
    let rel = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs();
    if !(rel(kernel.sigma, state.sigma()) && rel(kernel.tau0, s.tau0) && rel(kernel.tau, s.tau)) {
        return Err(Error::Config("smearing kernel does not match the thermodynamic state".into()));
    }
    Ok(())
}

/// M_τ = Σ g_τ(x_j) E′_j, M̄ = Σ [θ g_{τ₀} + (1 − θ) g_τ] E′_j and M_osc = M_τ − M̄ = Σ θ g₁ E′_j.
pub fn smeared_magnetization(spectrum: &SpectralResult, state: &ThermoState, kernel: &SmearingKernel) -> Result<SmearedMagnetization> {
    let s = state.smearing("smeared_magnetization")?;
    check_kernel(kernel, state, &s)?;
    let cut = require_cutoff(spectrum, state)?;
    let (mut mt, mut mm, mut mo) = (CompensatedSum::default(), CompensatedSum::default(), CompensatedSum::default());
    for j in 0..levels_through(spectrum, cut) {
        let e = spectrum.energies[j];
        let de = spectrum.derivatives[j];
        let x = (e - state.mu) / state.hbar;
        let th = state.window(e);
        let (g0, g1) = (kernel.g_tau0(x), kernel.g_band(x));
        let gt = kernel.g_tau(x);
        mt.add(gt * de);
        mm.add((th * g0 + (1.0 - th) * gt) * de);
        mo.add(th * g1 * de);
    }
    Ok(SmearedMagnetization { m_tau: mt.value(), m_mean: mm.value(), m_osc: mo.value() })
}

fn require_window(spectrum: &SpectralResult, state: &ThermoState, s: &Smearing) -> Result<()> {
    let (lo, hi) = (state.mu - s.delta, state.mu + s.delta);
    if spectrum.lowest_included > lo || spectrum.complete_through < hi {
        return Err(Error::SpectrumTooShort { required: hi, available: spectrum.complete_through });
    }
    Ok(())
}

/// M_osc^num = Σ θ(E_j − μ) g₁(x_j) E′_j; only levels within δ of μ are needed.
pub fn oscillating_magnetization_numeric(spectrum: &SpectralResult, state: &ThermoState, kernel: &SmearingKernel) -> Result<f64> {
    let s = state.smearing("oscillating_magnetization_numeric")?;
    check_kernel(kernel, state, &s)?;
    require_window(spectrum, state, &s)?;
    if s.delta / state.hbar > kernel.x_max() {
        return Err(Error::Config(format!(
            "kernel table |x| ≤ {} does not cover the energy window δ/ħ = {}",
            kernel.x_max(),
            s.delta / state.hbar
        )));
    }
    let mut acc = CompensatedSum::default();
    for (&e, &de) in spectrum.energies.iter().zip(&spectrum.derivatives) {
        let th = state.window(e);
        if th > 0.0 {
            acc.add(th * kernel.g_band((e - state.mu) / state.hbar) * de);
        }
    }
    Ok(acc.value())
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct TailDiagnostic {
    pub magnitude: f64,
    /// Change of the value when the time step is halved.
    pub resolution_change: f64,
    pub regime: Regime,
    pub warning: Option<String>,
}

/// Magnitude of the long-time part −∫dλ h⁻¹∫dt (1 − ρ_{τ₀})R Σ_j e^{−it(E_j−λ)/ħ} θ E′_j with λ
/// running over the window [μ − δ, μ + δ]. In kernel form this is Σ θ_j E′_j [u(x_j) − u(x_j − 2δ/ħ)]
/// with u the band kernel, computed here in the time domain.
pub fn tail_diagnostic(spectrum: &SpectralResult, state: &ThermoState, force: bool) -> Result<TailDiagnostic> {
    let s = state.smearing("tail_diagnostic")?;
    let report = state.regime();
    let mut warning = None;
    match report.regime {
        Regime::Intermediate => {}
        Regime::ZeroTemperature => {
            warning = Some("σ beyond the finite-temperature range: no damping, the tail does not decay".into());
        }
        other => {
            if !force {
                return Err(Error::Regime {
                    op: "tail_diagnostic",
                    msg: format!("state is in the {other} regime; the tail bound holds in the intermediate regime (use --force)"),
                });
            }
            warning = Some(format!("forced outside the intermediate regime ({other})"));
        }
    }
    require_window(spectrum, state, &s)?;
    let sigma = state.sigma();
    let shift = 2.0 * s.delta / state.hbar;
    let levels: Vec<(f64, f64)> = spectrum
        .energies
        .iter()
        .zip(&spectrum.derivatives)
        .filter_map(|(&e, &de)| {
            let th = state.window(e);
            (th > 0.0).then(|| ((e - state.mu) / state.hbar, th * de))
        })
        .collect();
    let x_span = s.delta / state.hbar + shift;
    let eval = |dt: f64| -> f64 {
        let rule = TimeRule::new(sigma, 2.0 * s.tau, dt, |t| plateau(t / s.tau) * (1.0 - plateau(t / s.tau0)));
        let start = ((s.tau0 / rule.dt).floor() as usize).max(1);
        let ks: Vec<usize> = (start..rule.weights.len()).collect();
        let chunk = 64;
        let parts = par_map(ks.len().div_ceil(chunk), |c| {
            let mut acc = CompensatedSum::default();
            for &k in &ks[c * chunk..((c + 1) * chunk).min(ks.len())] {
                let t = k as f64 * rule.dt;
                let w = rule.weights[k];
                if w == 0.0 {
                    continue;
                }
                let (mut zr, mut zi) = (0.0, 0.0);
                for &(x, c) in &levels {
                    let (sn, cs) = (t * x).sin_cos();
                    zr += c * cs;
                    zi += c * sn;
                }
                // Im[Z(1 − e^{−itd})]
                let (sd, cd) = (t * shift).sin_cos();
                let im = zi - (zi * cd - zr * sd);
                acc.add(w / t * im);
            }
            acc.value()
        });
        -parts.iter().sum::<f64>() / std::f64::consts::PI
    };
    let dt = time_step(x_span, sigma, s.tau0);
    let coarse = eval(dt);
    let fine = eval(0.5 * dt);
    Ok(TailDiagnostic { magnitude: fine.abs(), resolution_change: (fine - coarse).abs(), regime: report.regime, warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantum::{fock_darwin_modes, fock_darwin_spectrum, harmonic_spectrum, LevelSelection};
    use proptest::prelude::*;

    #[test]
    fn fermi_basics() {
        for b in [0.1, 1.0, 50.0] {
            assert_eq!(fermi_f(b, 0.0), 0.5);
        }
        assert!(fermi_big_f(2.0, 1e6).abs() < 1e-300);
        assert!((fermi_big_f(2.0, -1e6) + 1e6).abs() < 1e-9);
        assert!(fermi_big_f(1e3, 1e3).is_finite() && fermi_f(1e3, -1e3) == 1.0);
        for i in 0..100 {
            let x = -5.0 + 0.1 * i as f64 + 0.013;
            let h = 1e-5;
            let fd = (fermi_big_f(1.7, x + h) - fermi_big_f(1.7, x - h)) / (2.0 * h);
            assert!((fd - fermi_f(1.7, x)).abs() < 1e-8);
            let fd2 = (fermi_f(1.7, x + h) - fermi_f(1.7, x - h)) / (2.0 * h);
            assert!((fd2 - fermi_f_prime(1.7, x)).abs() < 1e-8);
        }
        assert_eq!(damping(0.0, 1.0), 1.0);
    }

    #[test]
    fn single_level() {
        let spec = SpectralResult {
            energies: vec![2.0],
            derivatives: vec![0.0],
            converged: vec![true],
            change: vec![0.0],
            basis_per_axis: None,
            hbar: 1.0,
            kappa: 0.0,
            lowest_included: f64::NEG_INFINITY,
            complete_through: 1e9,
        };
        let st = ThermoState::new(1.0, 3.0, 2.0, 0.0).unwrap();
        assert!((grand_potential(&spec, &st).unwrap().value + 2f64.ln() / 3.0).abs() < 1e-15);
        assert_eq!(particle_number(&spec, &st).unwrap().value, 0.5);
        let cold = ThermoState::new(1.0, 1e4, 2.5, 0.0).unwrap();
        assert!((grand_potential(&spec, &cold).unwrap().value + 0.5).abs() < 1e-12);
    }

    #[test]
    fn truncation_oracle() {
        let st = ThermoState::new(1.0, 1.0, 3.0, 0.0).unwrap();
        let short = fock_darwin_spectrum(1.0, 0.0, 1.0, 1200, 1.0);
        let long = fock_darwin_spectrum(1.0, 0.0, 1.0, 12000, 1.0);
        let a = grand_potential(&short, &st).unwrap().value;
        let b = grand_potential(&long, &st).unwrap().value;
        assert!((a - b).abs() < 1e-10, "{a} {b}");
        let too_short = fock_darwin_spectrum(1.0, 0.0, 1.0, 100, 1.0);
        assert!(matches!(grand_potential(&too_short, &st), Err(Error::SpectrumTooShort { .. })));
    }

    #[test]
    fn zero_field_magnetization_vanishes() {
        let st = ThermoState::new(0.5, 2.0, 3.0, 0.0).unwrap();
        let s = fock_darwin_spectrum(1.0, 0.0, 0.5, 20000, 1.0);
        assert!(magnetization_exact(&s, &st).unwrap().value.abs() < 1e-12);
    }

    fn fd_state(kappa: f64) -> ThermoState {
        ThermoState::new(0.4, 2.0, 2.5, kappa).unwrap()
    }

    fn fd_solve(kappa: f64) -> Result<SpectralResult> {
        harmonic_spectrum(&fock_darwin_modes(1.0, kappa, 1.0), 0.4, kappa, LevelSelection::Below(2.5 + 45.0 / 2.0))
    }

    #[test]
    fn hellmann_feynman_equals_omega_derivative() {
        let k = 0.7;
        let h = 1e-4;
        let m = magnetization_exact(&fd_solve(k).unwrap(), &fd_state(k)).unwrap().value;
        let op = grand_potential(&fd_solve(k + h).unwrap(), &fd_state(k + h)).unwrap().value;
        let om = grand_potential(&fd_solve(k - h).unwrap(), &fd_state(k - h)).unwrap().value;
        assert!((m - (op - om) / (2.0 * h)).abs() < 1e-6, "{m}");
    }

    #[test]
    fn omega_mu_derivative_is_minus_n() {
        let s = fd_solve(0.3).unwrap();
        let st = fd_state(0.3);
        let h = 1e-5;
        let up = ThermoState { mu: st.mu + h, ..st };
        let dn = ThermoState { mu: st.mu - h, ..st };
        let d = (grand_potential(&s, &up).unwrap().value - grand_potential(&s, &dn).unwrap().value) / (2.0 * h);
        assert!((d + particle_number(&s, &st).unwrap().value).abs() < 1e-6);
    }

    #[test]
    fn susceptibility_matches_magnetization_slope() {
        let st = fd_state(0.5);
        let chi = susceptibility_exact(fd_solve, &st, 1e-3, true).unwrap().value;
        let h = 1e-4;
        let mp = magnetization_exact(&fd_solve(0.5 + h).unwrap(), &fd_state(0.5 + h)).unwrap().value;
        let mm = magnetization_exact(&fd_solve(0.5 - h).unwrap(), &fd_state(0.5 - h)).unwrap().value;
        assert!((chi - (mp - mm) / (2.0 * h)).abs() < 1e-5, "{chi}");
    }

    #[test]
    fn regime_examples() {
        assert_eq!(regime_classify(0.01, 10.0, DEFAULT_EPS).regime, Regime::Expansion);
        assert_eq!(regime_classify(0.01, 100.0, DEFAULT_EPS).regime, Regime::Mesoscopic);
        assert_eq!(regime_classify(0.01, 0.01f64.powf(-0.8), DEFAULT_EPS).regime, Regime::Intermediate);
        assert_eq!(regime_classify(0.01, 1e5, DEFAULT_EPS).regime, Regime::ZeroTemperature);
    }

    #[test]
    fn kernel_properties() {
        let k = SmearingKernel::build(2.0, 1.36, 17.0, 60.0).unwrap();
        assert!((k.g_tau(-50.0) - 1.0).abs() <= 1e-8, "{}", k.g_tau(-50.0) - 1.0);
        assert!(k.g_tau(50.0).abs() <= 1e-8);
        assert!(k.max_positive_slope < 1e-7, "{}", k.max_positive_slope);
        assert!(k.resolution_change < 1e-9);
        assert!((k.g_tau(-k.x_max()) - k.g_tau(k.x_max()) - 1.0).abs() < 1e-8);
        // interpolant against a direct evaluation
        let pi = std::f64::consts::PI;
        let rule = TimeRule::new(2.0, 34.0, 0.5 * time_step(60.0, 2.0, 1.36), |t| plateau(t / 17.0) * (1.0 - plateau(t / 1.36)));
        for x in [-3.217, 0.0113, 7.77] {
            let direct = -rule.moments(x).0 / pi;
            assert!((direct - k.g_band(x)).abs() < 1e-10, "{x}");
        }
    }

    #[test]
    fn long_cutoff_recovers_fermi() {
        let sigma = 1.0;
        let k = SmearingKernel::build(sigma, 5.0, 100.0 * sigma, 20.0).unwrap();
        let mut sup = 0.0f64;
        for i in 0..2001 {
            let x = -20.0 + 0.02 * i as f64;
            sup = sup.max((k.g_tau(x) - fermi_f(sigma, x)).abs());
        }
        assert!(sup < 1e-6, "{sup}");
    }

    #[test]
    fn exact_kernel_reproduces_exact_magnetization() {
        // replacing g by f_σ((E − μ)/ħ) gives f_β(E − μ) identically
        let s = fd_solve(0.6).unwrap();
        let st = fd_state(0.6);
        let direct = magnetization_exact(&s, &st).unwrap().value;
        let mut acc = CompensatedSum::default();
        for j in 0..s.len() {
            if s.energies[j] <= st.mu + TRUNCATION / st.beta {
                acc.add(fermi_f(st.sigma(), (s.energies[j] - st.mu) / st.hbar) * s.derivatives[j]);
            }
        }
        assert!((acc.value() - direct).abs() <= 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn no_levels_in_window_means_no_oscillation() {
        // ħΩ spacing far larger than δ, μ between levels
        let st = ThermoState::new(1.0, 2.0, 2.5, 0.0).unwrap().with_smearing(1.0, 4.0, 0.2).unwrap();
        let s = fock_darwin_spectrum(1.0, 0.0, 1.0, 4000, 1.0);
        let k = SmearingKernel::build(st.sigma(), 1.0, 4.0, 10.0).unwrap();
        let parts = smeared_magnetization(&s, &st, &k).unwrap();
        assert!(parts.m_osc.abs() < 1e-8);
        assert!((parts.m_tau - parts.m_mean - parts.m_osc).abs() < 1e-12);
    }

    #[test]
    fn smeared_magnetization_converges_to_exact() {
        let kappa = 0.6;
        let s = fd_solve(kappa).unwrap();
        let base = fd_state(kappa);
        let sigma = base.sigma();
        let exact = magnetization_exact(&s, &base).unwrap().value;
        let mut last = f64::INFINITY;
        for tau in [5.0 * sigma, 20.0 * sigma, 100.0 * sigma] {
            let st = base.with_smearing(1.5, tau, 0.2).unwrap();
            let k = SmearingKernel::build(sigma, 1.5, tau, 30.0).unwrap();
            let err = (smeared_magnetization(&s, &st, &k).unwrap().m_tau - exact).abs();
            assert!(err <= last + 1e-12);
            last = err;
        }
        assert!(last < 1e-6, "{last}");
    }

    #[test]
    fn tail_guard() {
        let st = ThermoState::new(0.1, 1.0, 2.0, 0.5).unwrap().with_smearing(1.0, 10.0, 0.5).unwrap();
        let s = fock_darwin_spectrum(0.5, 0.5, 0.1, 3000, 1.0);
        assert!(matches!(tail_diagnostic(&s, &st, false), Err(Error::Regime { .. })));
        let forced = tail_diagnostic(&s, &st, true).unwrap();
        assert!(forced.warning.is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn fermi_identities(beta in 0.01f64..100.0, x in -50.0f64..50.0) {
            let f = fermi_f(beta, x);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!((f + fermi_f(beta, -x) - 1.0).abs() < 1e-14);
            prop_assert!(fermi_big_f(beta, x) <= x.min(0.0) + 1e-12);
        }
    }
}
