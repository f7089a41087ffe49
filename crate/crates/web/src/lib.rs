//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export takes plain numbers and returns a float array or a JSON string, so the page needs
//! no framework. The `*_json` functions are plain Rust and are also used by the native tests.

use magres_core::orbits::{find_periodic_orbits, OrbitSearch};
use magres_core::quantum::{quadratic_spectrum, LevelSelection};
use magres_core::semiclassical::{correction_susceptibility, landau_susceptibility, oscillating_magnetization, ExpansionOptions};
use magres_core::thermo::{susceptibility_exact, ThermoState};
use magres_core::HamiltonianSpec;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn well(omega2: f64, b: f64) -> Result<HamiltonianSpec, String> {
    HamiltonianSpec::anisotropic(1.0, omega2, 1.0, b).map_err(|e| e.to_string())
}

/// Lowest `count` levels of V = 1 + (q₁² + ω₂²q₂²)/2 in a uniform field `b`.
pub fn levels(omega2: f64, b: f64, kappa: f64, hbar: f64, count: usize) -> Result<Vec<f64>, String> {
    let spec = well(omega2, b)?;
    let s = quadratic_spectrum(&spec, kappa, hbar, LevelSelection::Lowest(count.clamp(1, 2000))).map_err(|e| e.to_string())?;
    Ok(s.energies)
}

/// Exact χ at κ = 0 against the Landau value and the ħ² term, for β = ħ^beta_exponent.
pub fn susceptibility_json(mu: f64, beta_exponent: f64, hbars: &[f64]) -> Result<String, String> {
    let spec = well(1.0, 1.0)?;
    let landau = landau_susceptibility(&spec, mu, &Default::default()).map_err(|e| e.to_string())?.value;
    let mut rows = Vec::new();
    for &h in hbars {
        let st = ThermoState::new(h, h.powf(beta_exponent), mu, 0.0).map_err(|e| e.to_string())?;
        let cut = mu + 40.0 / st.beta + h;
        let chi = susceptibility_exact(|k| quadratic_spectrum(&spec, k, h, LevelSelection::Below(cut)), &st, 0.02, true)
            .map_err(|e| e.to_string())?;
        let corr = correction_susceptibility(&spec, &st, &ExpansionOptions { force: true, ..Default::default() })
            .map_err(|e| e.to_string())?
            .value(h);
        rows.push(json!({ "hbar": h, "beta": st.beta, "regime": st.regime().regime, "chi": chi.value, "chi_err": chi.tail_bound, "chi_correction": corr }));
    }
    Ok(json!({ "chi_landau": landau, "points": rows }).to_string())
}

/// Periodic orbits on the shell H = μ with their damped trace-formula terms at σ.
pub fn orbits_json(omega2: f64, kappa: f64, mu: f64, sigma: f64, max_period: f64) -> Result<String, String> {
    let spec = well(omega2, 1.0)?;
    let set = find_periodic_orbits(&spec, kappa, mu, &OrbitSearch::new(max_period.min(60.0))).map_err(|e| e.to_string())?;
    let hbar = 0.01;
    let orbits: Vec<_> = set.nondegenerate().cloned().collect();
    let t_min = orbits.iter().map(|o| o.primitive_period).fold(f64::INFINITY, f64::min);
    let tau0 = if t_min.is_finite() { 0.4 * t_min } else { 1.0 };
    let st = ThermoState::new(hbar, sigma / hbar, mu, kappa)
        .and_then(|s| s.with_smearing(tau0, (2.0 * max_period).max(2.5 * tau0), 0.25))
        .map_err(|e| e.to_string())?;
    let sum = oscillating_magnetization(&orbits, &st, true).map_err(|e| e.to_string())?;
    let rows: Vec<_> = sum
        .terms
        .iter()
        .map(|t| {
            json!({
                "T": t.period, "r": t.repetitions, "frequency": t.action / (2.0 * std::f64::consts::PI),
                "maslov": t.maslov, "det_one_minus_P": t.det_one_minus_p, "m": t.moment,
                "damping": t.damping_factor, "amplitude": 2.0 * t.amplitude.norm(),
            })
        })
        .collect();
    Ok(json!({ "orbits": rows, "degenerate": set.degenerate_count() }).to_string())
}

#[wasm_bindgen]
pub fn spectrum(omega2: f64, b: f64, kappa: f64, hbar: f64, count: usize) -> Result<Vec<f64>, JsError> {
    levels(omega2, b, kappa, hbar, count).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn susceptibility(mu: f64, beta_exponent: f64, hbars: Vec<f64>) -> Result<String, JsError> {
    susceptibility_json(mu, beta_exponent, &hbars).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn orbits(omega2: f64, kappa: f64, mu: f64, sigma: f64, max_period: f64) -> Result<String, JsError> {
    orbits_json(omega2, kappa, mu, sigma, max_period).map_err(|e| JsError::new(&e))
}
