//! Semiclassical side: the ħ-expansion of Ω, the Landau term and the periodic-orbit sums for the
//! oscillating magnetization and susceptibility.
//!
//! Conventions follow [`crate::thermo`]: Ω = Σ F_β(E_j − μ), M = ∂κΩ, χ = ∂κM, h = 2πħ.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use serde::Serialize;

use crate::classical::{
    bounding_box, check_noncritical, csv_err, liouville_surface_integral, monte_carlo_box, phase_space_volume, Estimate,
    EstimateMethod, Integrand, VolumeOptions,
};
use crate::error::{Error, Result};
use crate::model::HamiltonianSpec;
use crate::numerics::{integrate_with_breaks, plateau};
use crate::orbits::PeriodicOrbit;
use crate::quantum::{quadratic_spectrum, LevelSelection};
use crate::thermo::{fermi_big_f, fermi_f, fermi_f_prime, grand_potential, ThermoState, TRUNCATION};

pub use crate::thermo::{regime_classify, Regime, RegimeReport};

/// Constant C of the ħ² term C·ħ²·h^{−n}∫ f′_β(H₀ − μ)(κ²‖B‖² + ΔV) dq dp, from the
/// Wigner–Kirkwood expansion of Tr F_β(Ĥ − μ).
pub const CORRECTION_CONSTANT: f64 = -1.0 / 24.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TermKind {
    /// h^{−n}Ω₀₀, the phase-space integral of F_β.
    Weyl,
    /// The ħ^{2−n} term.
    Correction,
    /// κ-derivatives of the ħ^{2−n} term (Landau susceptibility and magnetization).
    Landau,
    Higher,
}

/// One term coefficient·ħ^power of an ħ-expansion, with the error of the coefficient.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExpansionTerm {
    pub power: i32,
    pub coefficient: f64,
    pub error: f64,
    pub method: EstimateMethod,
    pub kind: TermKind,
}

impl ExpansionTerm {
    pub fn value(&self, hbar: f64) -> f64 {
        self.coefficient * hbar.powi(self.power)
    }

    pub fn error_at(&self, hbar: f64) -> f64 {
        self.error * hbar.powi(self.power)
    }
}

/// Options shared by the expansion terms.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExpansionOptions {
    pub volume: VolumeOptions,
    /// Evaluate outside the expansion regime.
    pub force: bool,
}

fn guard(state: &ThermoState, allowed: &[Regime], force: bool, op: &'static str) -> Result<()> {
    let report = state.regime();
    if force || allowed.contains(&report.regime) {
        return Ok(());
    }
    Err(Error::Regime { op, msg: format!("state is in the {} regime (ħ = {}, β = {})", report.regime, state.hbar, state.beta) })
}

fn energy_cut(state: &ThermoState) -> f64 {
    if state.beta.is_finite() {
        state.mu + TRUNCATION / state.beta
    } else {
        state.mu
    }
}

fn big_f(beta: f64, x: f64) -> f64 {
    if beta.is_finite() {
        fermi_big_f(beta, x)
    } else {
        x.min(0.0)
    }
}

fn small_f(beta: f64, x: f64) -> f64 {
    if beta.is_finite() {
        fermi_f(beta, x)
    } else if x < 0.0 {
        1.0
    } else {
        0.0
    }
}

/// (2π)^{−n}∫ F_β(H_κ − μ) dq dp as the coefficient of ħ^{−n}.
///
/// Quadratic specs integrate the exact volume layer-cake in energy, −∫ V(E) f_β(E − μ) dE. Other
/// specs share one Monte Carlo sample set across all layers, which collapses the layer integral to
/// F_β(H − μ) pointwise.
pub fn weyl_omega(spec: &HamiltonianSpec, state: &ThermoState, opts: &ExpansionOptions) -> Result<ExpansionTerm> {
    guard(state, &[Regime::Expansion], opts.force, "weyl_omega")?;
    let n = spec.dim();
    let norm = (2.0 * PI).powi(-(n as i32));
    let hmin = spec.minimum_energy();
    let cut = energy_cut(state);
    let (beta, mu, kappa) = (state.beta, state.mu, state.kappa);
    let term = |value: f64, error: f64, method| ExpansionTerm {
        power: -(n as i32),
        coefficient: norm * value,
        error: norm * error,
        method,
        kind: TermKind::Weyl,
    };
    if cut <= hmin {
        return Ok(term(0.0, 0.0, EstimateMethod::Exact));
    }
    if spec.is_quadratic() && !opts.volume.force_monte_carlo {
        let unit = phase_space_volume(spec, kappa, hmin + 1.0, Integrand::Constant(1.0), &opts.volume)?.value;
        let volume = |e: f64| unit * (e - hmin).max(0.0).powi(n as i32);
        let mut breaks = vec![hmin];
        if mu > hmin && mu < cut {
            breaks.push(mu);
        }
        breaks.push(cut);
        let scale = volume(cut).max(1.0);
        let q = integrate_with_breaks(|e| -volume(e) * small_f(beta, e - mu), &breaks, 1e-14 * scale);
        let dropped = if beta.is_finite() { volume(cut) * (-TRUNCATION).exp() / beta } else { 0.0 };
        return Ok(term(q.value, q.error + dropped, EstimateMethod::Quadrature));
    }
    let (lo, hi) = bounding_box(spec, kappa, cut);
    let est = monte_carlo_box(&lo, &hi, opts.volume.samples, opts.volume.seed, |x| {
        let e = spec.energy(kappa, x);
        if e <= cut {
            big_f(beta, e - mu)
        } else {
            0.0
        }
    });
    Ok(term(est.value, est.error, est.method))
}

fn correction_weight(spec: &HamiltonianSpec, kappa: f64) -> impl Fn(&[f64]) -> f64 + Sync + '_ {
    let b2 = kappa * kappa * spec.gauge.norm_squared();
    move |x: &[f64]| b2 + spec.potential.laplacian(&x[..spec.dim()])
}

/// Coefficient of ħ^{2−n}: C·(2π)^{−n}∫ f′_β(H₀ − μ)(κ²‖B‖² + ΔV) dq dp with C = [`CORRECTION_CONSTANT`].
/// Depends on κ only through κ².
pub fn correction_omega(spec: &HamiltonianSpec, state: &ThermoState, opts: &ExpansionOptions) -> Result<ExpansionTerm> {
    guard(state, &[Regime::Expansion], opts.force, "correction_omega")?;
    let est = fprime_integral(spec, state, correction_weight(spec, state.kappa), &opts.volume)?;
    let n = spec.dim() as i32;
    let c = CORRECTION_CONSTANT * (2.0 * PI).powi(-n);
    Ok(ExpansionTerm {
        power: 2 - n,
        coefficient: c * est.value,
        error: c.abs() * est.error,
        method: est.method,
        kind: TermKind::Correction,
    })
}

/// ∂²κ of [`correction_omega`]: 2C·(2π)^{−n}‖B‖²∫ f′_β(H₀ − μ) dq dp. At β → ∞ this tends to
/// −2C(2π)^{−n}∫_{Σ_μ}‖B‖² dσ, i.e. +(1/48π²)∫‖B‖² dσ for n = 2.
pub fn correction_susceptibility(spec: &HamiltonianSpec, state: &ThermoState, opts: &ExpansionOptions) -> Result<ExpansionTerm> {
    guard(state, &[Regime::Expansion], opts.force, "correction_susceptibility")?;
    let b2 = spec.gauge.norm_squared();
    let est = fprime_integral(spec, state, move |_: &[f64]| b2, &opts.volume)?;
    let n = spec.dim() as i32;
    let c = 2.0 * CORRECTION_CONSTANT * (2.0 * PI).powi(-n);
    Ok(ExpansionTerm {
        power: 2 - n,
        coefficient: c * est.value,
        error: c.abs() * est.error,
        method: est.method,
        kind: TermKind::Landau,
    })
}

/// ∫ f′_β(H₀ − μ) g(q) dq dp; at β = ∞ this is −∫_{Σ_μ} g dσ.
fn fprime_integral<G>(spec: &HamiltonianSpec, state: &ThermoState, g: G, opts: &VolumeOptions) -> Result<Estimate>
where
    G: Fn(&[f64]) -> f64 + Sync,
{
    let (beta, mu) = (state.beta, state.mu);
    let hmin = spec.minimum_energy();
    let n = spec.dim() as i32;
    if !beta.is_finite() {
        let s = liouville_surface_integral(spec, 0.0, mu, Integrand::Function(&g), opts)?;
        return Ok(Estimate { value: -s.value, ..s });
    }
    let cut = energy_cut(state);
    if cut <= hmin {
        return Ok(Estimate::exact(0.0));
    }
    if spec.is_quadratic() && !opts.force_monte_carlo {
        // g is constant for a quadratic V and a linear gauge; V′(E) = n·V(E_min + 1)(E − E_min)^{n−1}.
        let c = g(&spec.potential.minimizer().iter().chain(&vec![0.0; spec.dim()]).copied().collect::<Vec<_>>());
        let unit = phase_space_volume(spec, 0.0, hmin + 1.0, Integrand::Constant(1.0), opts)?.value;
        let dv = |e: f64| n as f64 * unit * (e - hmin).max(0.0).powi(n - 1);
        let mut breaks = vec![hmin];
        if mu > hmin && mu < cut {
            breaks.push(mu);
        }
        breaks.push(cut);
        let scale = beta * dv(cut).max(1.0);
        let q = integrate_with_breaks(|e| fermi_f_prime(beta, e - mu) * dv(e), &breaks, 1e-14 * scale);
        return Ok(Estimate { value: c * q.value, error: c.abs() * q.error, method: EstimateMethod::Quadrature });
    }
    let (lo, hi) = bounding_box(spec, 0.0, cut);
    Ok(monte_carlo_box(&lo, &hi, opts.samples, opts.seed, |x| {
        let e = spec.energy(0.0, x);
        if e <= cut {
            fermi_f_prime(beta, e - mu) * g(x)
        } else {
            0.0
        }
    }))
}

fn require_planar(spec: &HamiltonianSpec, op: &str) -> Result<()> {
    if spec.dim() != 2 {
        return Err(Error::InvalidSpec(format!("{op} is defined for n = 2 (got n = {})", spec.dim())));
    }
    Ok(())
}

/// χ_L = −(1/24π²)∫_{Σ_μ⁰}‖B‖² dσ_μ⁰ for n = 2.
///
/// This is the normalization stated for the Landau limit. The exact quantum sums approach
/// [`correction_susceptibility`] at β → ∞ instead, which is −½ times this value.
pub fn landau_susceptibility(spec: &HamiltonianSpec, mu: f64, opts: &VolumeOptions) -> Result<Estimate> {
    require_planar(spec, "landau_susceptibility")?;
    check_noncritical(spec, mu)?;
    let b2 = spec.gauge.norm_squared();
    let s = liouville_surface_integral(spec, 0.0, mu, Integrand::Constant(b2), opts)?;
    let c = -1.0 / (24.0 * PI * PI);
    Ok(Estimate { value: c * s.value, error: c.abs() * s.error, method: s.method })
}

/// Leading term of M̄ for n = 2: κ·χ_L (the ħ^{2−n} prefactor is 1).
pub fn mean_magnetization(spec: &HamiltonianSpec, state: &ThermoState, opts: &VolumeOptions) -> Result<Estimate> {
    let chi = landau_susceptibility(spec, state.mu, opts)?;
    Ok(Estimate { value: state.kappa * chi.value, error: state.kappa.abs() * chi.error, method: chi.method })
}

/// Calibrates [`CORRECTION_CONSTANT`] from the exact spectrum of an isotropic oscillator of frequency
/// ω and offset V₀ in a unit field at coupling κ. The ratio
/// (Ω_exact − h^{−2}Ω₀₀)/(ħ²h^{−2}∫ f′(κ²‖B‖² + ΔV)) is formed at ħ and ħ/2 and Richardson
/// extrapolated in ħ². The error is the size of the extrapolation step.
pub fn calibrate_correction_constant(omega: f64, offset: f64, kappa: f64, mu: f64, beta: f64, hbar: f64) -> Result<Estimate> {
    let spec = HamiltonianSpec::isotropic(omega, offset, 1.0)?;
    let ratio = |h: f64| -> Result<f64> {
        let state = ThermoState::new(h, beta, mu, kappa)?;
        let opts = ExpansionOptions { force: true, ..Default::default() };
        let levels = quadratic_spectrum(&spec, kappa, h, LevelSelection::Below(energy_cut(&state) + 1.0))?;
        let exact = grand_potential(&levels, &state)?.value;
        let weyl = weyl_omega(&spec, &state, &opts)?.value(h);
        let unit = correction_omega(&spec, &state, &opts)?.value(h) / CORRECTION_CONSTANT;
        Ok((exact - weyl) / unit)
    };
    let (r1, r2) = (ratio(hbar)?, ratio(0.5 * hbar)?);
    let value = (4.0 * r2 - r1) / 3.0;
    Ok(Estimate { value, error: (value - r2).abs(), method: EstimateMethod::Quadrature })
}

// ---------------------------------------------------------------------------------------------
// Periodic-orbit sums

/// How the κ-derivative of the orbit phase enters χ_osc.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChiScaling {
    /// Amplitude r·m²/2σ relative to the phase factor, as displayed for the leading term.
    AsDisplayed,
    /// Amplitude r·m²/(2σħ): the full ∂κ(S/ħ) from differentiating the phase.
    PhaseDerivative,
}

/// One orbit's term in an oscillating sum. The real output adds each term and its complex
/// conjugate, which is the term of the time-reversal partner (S, ν, m) → (−S, −ν, −m).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct OrbitContribution {
    pub period: f64,
    pub primitive_period: f64,
    pub repetitions: u32,
    pub action: f64,
    pub maslov: i32,
    pub det_one_minus_p: f64,
    pub moment: f64,
    /// ρ₁(T)/(σ sinh(πT/σ)): window times thermal damping.
    pub damping_factor: f64,
    #[serde(skip)]
    pub amplitude: Complex64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OscillatingSum {
    pub value: f64,
    pub terms: Vec<OrbitContribution>,
}

impl OscillatingSum {
    /// Per-orbit table: T, S, maslov, det_one_minus_P, m, damping_factor, amplitude_Re, amplitude_Im.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["T", "S", "maslov", "det_one_minus_P", "m", "damping_factor", "amplitude_Re", "amplitude_Im"])
            .map_err(csv_err)?;
        for t in &self.terms {
            wr.write_record([
                format!("{:e}", t.period),
                format!("{:e}", t.action),
                t.maslov.to_string(),
                format!("{:e}", t.det_one_minus_p),
                format!("{:e}", t.moment),
                format!("{:e}", t.damping_factor),
                format!("{:e}", t.amplitude.re),
                format!("{:e}", t.amplitude.im),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Band window ρ₁(T) = ρ(T/τ)(1 − ρ(T/τ₀)).
pub fn band_window(t: f64, tau0: f64, tau: f64) -> f64 {
    plateau(t / tau) * (1.0 - plateau(t / tau0))
}

/// ρ₁(T)/(σ sinh(πT/σ)).
pub fn orbit_damping(t: f64, sigma: f64, tau0: f64, tau: f64) -> f64 {
    let z = PI * t / sigma;
    let w = band_window(t, tau0, tau);
    if w == 0.0 || z > 700.0 {
        return 0.0;
    }
    w / (sigma * z.sinh())
}

fn magnetization_terms(orbits: &[PeriodicOrbit], state: &ThermoState, force: bool, op: &'static str) -> Result<Vec<OrbitContribution>> {
    guard(state, &[Regime::Mesoscopic, Regime::Intermediate], force, op)?;
    let s = state.smearing.ok_or_else(|| Error::Config(format!("{op} needs τ₀ and τ")))?;
    let sigma = state.sigma();
    let mut terms = Vec::with_capacity(orbits.len());
    for o in orbits {
        if o.degenerate || o.det_one_minus_p.abs() < 1e-12 {
            return Err(Error::numerical(
                "semiclassical",
                op,
                format!("degenerate orbit (T = {}, det(1 − P) = {:e})", o.period, o.det_one_minus_p),
            ));
        }
        let maslov = o.maslov.ok_or_else(|| Error::numerical("semiclassical", op, format!("orbit T = {} has no Maslov index", o.period)))?;
        let damping_factor = orbit_damping(o.period, sigma, s.tau0, s.tau);
        // e^{i(S/ħ − νπ/2)}·(−i m/2)·ρ₁/(σ sinh)/√|det(1 − P)|
        let phase = Complex64::from_polar(1.0, o.action / state.hbar - maslov as f64 * PI / 2.0);
        let amplitude = phase * Complex64::new(0.0, -0.5 * o.moment) * damping_factor / o.det_one_minus_p.abs().sqrt();
        terms.push(OrbitContribution {
            period: o.period,
            primitive_period: o.primitive_period,
            repetitions: o.repetitions,
            action: o.action,
            maslov,
            det_one_minus_p: o.det_one_minus_p,
            moment: o.moment,
            damping_factor,
            amplitude,
        });
    }
    terms.sort_by(|a, b| {
        a.primitive_period
            .total_cmp(&b.primitive_period)
            .then(a.action.total_cmp(&b.action))
            .then(a.repetitions.cmp(&b.repetitions))
    });
    Ok(terms)
}

fn real_sum(terms: &[OrbitContribution]) -> f64 {
    terms.iter().map(|t| 2.0 * t.amplitude.re).sum()
}

/// Leading-order M_osc from an orbit list. Each orbit enters as
/// e^{i(S/ħ − νπ/2)}(−i m/2σ)ρ₁(T)/(|det(1 − P)|^{1/2} sinh(πT/σ)) plus its conjugate partner.
/// For odd ν this coincides with the e^{i(S/ħ + νπ/2)}(i m/2σ) form summed over partners.
pub fn oscillating_magnetization(orbits: &[PeriodicOrbit], state: &ThermoState, force: bool) -> Result<OscillatingSum> {
    let terms = magnetization_terms(orbits, state, force, "oscillating_magnetization")?;
    Ok(OscillatingSum { value: real_sum(&terms), terms })
}

/// Leading-order χ_osc: each M_osc term times −i·r·m (and 1/ħ for [`ChiScaling::PhaseDerivative`]).
pub fn oscillating_susceptibility(
    orbits: &[PeriodicOrbit],
    state: &ThermoState,
    scaling: ChiScaling,
    force: bool,
) -> Result<OscillatingSum> {
    let mut terms = magnetization_terms(orbits, state, force, "oscillating_susceptibility")?;
    let extra = match scaling {
        ChiScaling::AsDisplayed => 1.0,
        ChiScaling::PhaseDerivative => 1.0 / state.hbar,
    };
    for t in &mut terms {
        t.amplitude *= Complex64::new(0.0, -(t.repetitions as f64) * t.moment * extra);
    }
    Ok(OscillatingSum { value: real_sum(&terms), terms })
}
