//! Spectra of the Weyl-quantized Ĥ_κ in two dimensions.
//!
//! Quadratic specs are solved in closed form through their symplectic normal modes; the isotropic
//! case reduces to the Fock–Darwin levels. General polynomial specs are diagonalized in a tensor
//! harmonic-oscillator basis whose matrix elements come from exact ladder algebra.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::classical::{csv_err, symplectic_form};
use crate::error::{Error, Result};
use crate::model::HamiltonianSpec;
use crate::numerics::par_map;

/// Sorted eigenvalues with κ-derivatives and truncation metadata.
#[derive(Clone, Debug)]
pub struct SpectralResult {
    pub energies: Vec<f64>,
    pub derivatives: Vec<f64>,
    pub converged: Vec<bool>,
    /// Relative change of each level when the basis shrinks by 4 per axis (0 for closed forms).
    pub change: Vec<f64>,
    pub basis_per_axis: Option<usize>,
    pub hbar: f64,
    pub kappa: f64,
    /// All eigenvalues in [`lowest_included`, `complete_through`] are present.
    pub lowest_included: f64,
    pub complete_through: f64,
}

impl SpectralResult {
    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.lowest_included == f64::NEG_INFINITY
    }

    /// Checks ordering and the lower bound E_j ≥ min V.
    pub fn check_invariants(&self, min_v: f64) -> Result<()> {
        let tol = 1e-10 * min_v.abs().max(1.0);
        if self.is_full() {
            if let Some(&e0) = self.energies.first() {
                if e0 < min_v - tol {
                    return Err(Error::numerical("quantum", "spectrum", format!("level {e0} below min V = {min_v}")));
                }
            }
        }
        if self.energies.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::numerical("quantum", "spectrum", "levels not sorted"));
        }
        Ok(())
    }

    /// CSV export with columns j, E_j, dE_j/dκ, converged_flag, change.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["j", "E", "dE_dkappa", "converged", "basis_change"]).map_err(csv_err)?;
        for j in 0..self.len() {
            wr.write_record(&[
                j.to_string(),
                format!("{:e}", self.energies[j]),
                format!("{:e}", self.derivatives[j]),
                (self.converged[j] as u8).to_string(),
                format!("{:e}", self.change[j]),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Symplectic normal modes of a quadratic H_κ: E = ground + Σ ħΩ_k(n_k + ½).
#[derive(Clone, Debug)]
pub struct NormalModes {
    pub ground: f64,
    pub frequencies: Vec<f64>,
    pub derivatives: Vec<f64>,
}

/// Frequencies Ω± = √(ω² + κ²/4) ± κ/2 of the isotropic oscillator in a unit symmetric-gauge field.
pub fn fock_darwin_modes(omega: f64, kappa: f64, offset: f64) -> NormalModes {
    let r = (omega * omega + 0.25 * kappa * kappa).sqrt();
    let dr = if r > 0.0 { kappa / (4.0 * r) } else { 0.0 };
    NormalModes {
        ground: offset,
        frequencies: vec![r + 0.5 * kappa, r - 0.5 * kappa],
        derivatives: vec![dr + 0.5, dr - 0.5],
    }
}

/// Normal modes of a quadratic spec from the eigenvalues ±iΩ of J·K, with dΩ/dκ from first-order
/// perturbation theory (diagonalized inside degenerate frequency clusters).
pub fn normal_modes(spec: &HamiltonianSpec, kappa: f64) -> Result<NormalModes> {
    Ok(normal_mode_vectors(spec, kappa)?.0)
}

/// Normal modes together with complex mode vectors v (in phase-space coordinates relative to the
/// minimum) solving J·K·v = iΩv, normalized to v̄ᵀKv = 1.
pub(crate) fn normal_mode_vectors(spec: &HamiltonianSpec, kappa: f64) -> Result<(NormalModes, Vec<DVector<Complex64>>)> {
    let qf = spec
        .quadratic_form(kappa)
        .ok_or_else(|| Error::InvalidSpec("normal modes need a quadratic potential".into()))?;
    let d = qf.k.nrows();
    let n = d / 2;
    let chol = qf.k.clone().cholesky().ok_or_else(|| Error::numerical("quantum", "normal_modes", "Hessian not positive definite"))?;
    let l = chol.l();
    let linv = l.clone().try_inverse().ok_or_else(|| Error::numerical("quantum", "normal_modes", "singular Cholesky factor"))?;
    let s = l.transpose() * symplectic_form(n) * &l;
    let sts = s.transpose() * &s;
    let eig = SymmetricEigen::new(0.5 * (&sts + sts.transpose()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    // dK/dκ
    let a = spec.gauge.matrix();
    let mut kp = DMatrix::zeros(d, d);
    let ata = a.transpose() * a;
    for i in 0..n {
        for j in 0..n {
            kp[(i, j)] = 2.0 * kappa * ata[(i, j)];
            kp[(i, n + j)] = -a[(j, i)];
            kp[(n + i, j)] = -a[(i, j)];
        }
    }
    let kt = &linv * kp * linv.transpose();
    let ktc = kt.map(|v| Complex64::new(v, 0.0));

    let linv_t = linv.transpose();
    let mut freqs = Vec::new();
    let mut derivs = Vec::new();
    let mut vectors = Vec::new();
    let mut i = 0;
    while i < d {
        let w2 = eig.eigenvalues[order[i]];
        let mut j = i + 1;
        while j < d && (eig.eigenvalues[order[j]] - w2).abs() <= 1e-9 * w2.abs().max(1e-300) {
            j += 1;
        }
        let size = j - i;
        if size % 2 != 0 {
            return Err(Error::numerical("quantum", "normal_modes", "odd-dimensional frequency cluster"));
        }
        let omega = (order[i..j].iter().map(|&k| eig.eigenvalues[k]).sum::<f64>() / size as f64).sqrt();
        // positive-frequency vectors u = a − i S a / Ω, orthonormalized
        let mut basis: Vec<DVector<Complex64>> = Vec::new();
        for &k in &order[i..j] {
            let av = eig.eigenvectors.column(k).into_owned();
            let sa = &s * &av / omega;
            let mut u = DVector::from_fn(d, |r, _| Complex64::new(av[r], -sa[r]));
            for b in &basis {
                let proj = b.dotc(&u);
                u -= b * proj;
            }
            let nrm = u.norm();
            if nrm > 0.5 {
                basis.push(u.unscale(nrm));
            }
            if basis.len() == size / 2 {
                break;
            }
        }
        if basis.len() != size / 2 {
            return Err(Error::numerical("quantum", "normal_modes", "could not span a degenerate mode cluster"));
        }
        let m = basis.len();
        // ū_aᵀ K̃′ u_b with ū u = 1 normalization: dΩ = Ω·(ūK̃′u)/(ūu) for v̄ᵀKv = ūᵀu
        let dm = DMatrix::from_fn(m, m, |r, c| basis[r].dotc(&(&ktc * &basis[c])) * omega);
        let herm = (&dm + dm.adjoint()) * Complex64::new(0.5, 0.0);
        let ev = SymmetricEigen::new(herm);
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&x, &y| ev.eigenvalues[x].total_cmp(&ev.eigenvalues[y]));
        for k in idx {
            freqs.push(omega);
            derivs.push(ev.eigenvalues[k]);
            let mut u = DVector::<Complex64>::zeros(d);
            for (b, ub) in basis.iter().enumerate() {
                u += ub * ev.eigenvectors[(b, k)];
            }
            vectors.push(linv_t.map(|x| Complex64::new(x, 0.0)) * u);
        }
        i = j;
    }
    Ok((NormalModes { ground: qf.min_value, frequencies: freqs, derivatives: derivs }, vectors))
}

/// Which part of a closed-form spectrum to enumerate.
#[derive(Clone, Copy, Debug)]
pub enum LevelSelection {
    Lowest(usize),
    Below(f64),
    Window(f64, f64),
}

fn count_below(freqs: &[f64], hbar: f64, budget: f64) -> u64 {
    // number of (n_k) with Σ ħΩ_k n_k ≤ budget
    match freqs.split_first() {
        None => 1,
        Some((&w, rest)) => {
            if budget < 0.0 {
                return 0;
            }
            let step = hbar * w;
            let kmax = (budget / step).floor() as u64;
            (0..=kmax).map(|k| count_below(rest, hbar, budget - k as f64 * step)).sum()
        }
    }
}

fn enumerate(freqs: &[f64], hbar: f64, budget: f64, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    match freqs.split_first() {
        None => out.push(prefix.clone()),
        Some((&w, rest)) => {
            let step = hbar * w;
            let mut k = 0u32;
            while (k as f64) * step <= budget {
                prefix.push(k);
                enumerate(rest, hbar, budget - k as f64 * step, prefix, out);
                prefix.pop();
                k += 1;
            }
        }
    }
}

/// Levels E = ground + Σ ħΩ_k(n_k + ½) with exact κ-derivatives.
pub fn harmonic_spectrum(modes: &NormalModes, hbar: f64, kappa: f64, selection: LevelSelection) -> Result<SpectralResult> {
    if !(hbar > 0.0) || modes.frequencies.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::InvalidSpec("harmonic spectrum needs ħ > 0 and positive frequencies".into()));
    }
    let zero = modes.ground + 0.5 * hbar * modes.frequencies.iter().sum::<f64>();
    let (lo, hi) = match selection {
        LevelSelection::Below(e) => (f64::NEG_INFINITY, e),
        LevelSelection::Window(a, b) => (a, b),
        LevelSelection::Lowest(count) => {
            let count = count.max(1) as u64;
            let mut top = hbar * modes.frequencies.iter().cloned().fold(0.0, f64::max).max(1e-300);
            while count_below(&modes.frequencies, hbar, top) < count {
                top *= 2.0;
            }
            (f64::NEG_INFINITY, zero + top)
        }
    };
    let mut states = Vec::new();
    if hi >= zero {
        enumerate(&modes.frequencies, hbar, hi - zero, &mut Vec::new(), &mut states);
    }
    let mut levels: Vec<(f64, f64, Vec<u32>)> = states
        .into_iter()
        .map(|ns| {
            let e = zero + hbar * ns.iter().zip(&modes.frequencies).map(|(&k, w)| k as f64 * w).sum::<f64>();
            let de = hbar * ns.iter().zip(&modes.derivatives).map(|(&k, dw)| (k as f64 + 0.5) * dw).sum::<f64>();
            (e, de, ns)
        })
        .filter(|(e, _, _)| *e >= lo && *e <= hi)
        .collect();
    levels.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.2.cmp(&b.2)));
    let mut complete_through = hi;
    if let LevelSelection::Lowest(count) = selection {
        if levels.len() > count {
            let next = levels[count].0;
            levels.truncate(count);
            complete_through = if next > levels[count - 1].0 { levels[count - 1].0 } else { next - 1e-12 * next.abs() };
        }
    }
    let len = levels.len();
    Ok(SpectralResult {
        energies: levels.iter().map(|l| l.0).collect(),
        derivatives: levels.iter().map(|l| l.1).collect(),
        converged: vec![true; len],
        change: vec![0.0; len],
        basis_per_axis: None,
        hbar,
        kappa,
        lowest_included: lo,
        complete_through,
    })
}

/// Lowest `count` Fock–Darwin levels V_offset + ħΩ₊(n₊+½) + ħΩ₋(n₋+½).
pub fn fock_darwin_spectrum(omega: f64, kappa: f64, hbar: f64, count: usize, offset: f64) -> SpectralResult {
    harmonic_spectrum(&fock_darwin_modes(omega, kappa, offset), hbar, kappa, LevelSelection::Lowest(count))
        .expect("ω > 0 and ħ > 0")
}

/// Closed-form spectrum of any quadratic spec.
pub fn quadratic_spectrum(spec: &HamiltonianSpec, kappa: f64, hbar: f64, selection: LevelSelection) -> Result<SpectralResult> {
    harmonic_spectrum(&normal_modes(spec, kappa)?, hbar, kappa, selection)
}

// ---------------------------------------------------------------------------------------------
// Galerkin solver

/// Polynomial in (q₁, q₂, p₁, p₂).
#[derive(Clone, Debug, Default)]
struct Poly(BTreeMap<[u8; 4], f64>);

impl Poly {
    fn constant(c: f64) -> Self {
        let mut m = BTreeMap::new();
        m.insert([0; 4], c);
        Poly(m)
    }

    fn var(i: usize) -> Self {
        let mut e = [0u8; 4];
        e[i] = 1;
        let mut m = BTreeMap::new();
        m.insert(e, 1.0);
        Poly(m)
    }

    fn add(&self, o: &Poly) -> Poly {
        let mut m = self.0.clone();
        for (k, v) in &o.0 {
            *m.entry(*k).or_insert(0.0) += v;
        }
        Poly(m)
    }

    fn scale(&self, s: f64) -> Poly {
        Poly(self.0.iter().map(|(k, v)| (*k, v * s)).collect())
    }

    fn mul(&self, o: &Poly) -> Poly {
        let mut m = BTreeMap::new();
        for (ka, va) in &self.0 {
            for (kb, vb) in &o.0 {
                let k = [ka[0] + kb[0], ka[1] + kb[1], ka[2] + kb[2], ka[3] + kb[3]];
                *m.entry(k).or_insert(0.0) += va * vb;
            }
        }
        Poly(m)
    }

    /// Substitutes x_i → x_i + c_i.
    fn shift(&self, c: [f64; 4]) -> Poly {
        let mut out = Poly::default();
        for (k, v) in &self.0 {
            let mut term = Poly::constant(*v);
            for i in 0..4 {
                let lin = Poly::var(i).add(&Poly::constant(c[i]));
                for _ in 0..k[i] {
                    term = term.mul(&lin);
                }
            }
            out = out.add(&term);
        }
        out
    }

    fn coeff(&self, e: [u8; 4]) -> f64 {
        self.0.get(&e).copied().unwrap_or(0.0)
    }
}

fn hamiltonian_symbols(spec: &HamiltonianSpec, kappa: f64) -> (Poly, Poly) {
    let a = spec.gauge.matrix();
    let mut v = Poly::constant(spec.potential.offset());
    for m in spec.potential.terms() {
        let mut t = Poly::constant(m.coefficient);
        for (i, &e) in m.exponents.iter().enumerate() {
            for _ in 0..e {
                t = t.mul(&Poly::var(i));
            }
        }
        v = v.add(&t);
    }
    let mut h = v;
    let mut dk = Poly::default();
    for j in 0..2 {
        let aq = Poly::var(0).scale(a[(j, 0)]).add(&Poly::var(1).scale(a[(j, 1)]));
        let pi = Poly::var(2 + j).add(&aq.scale(-kappa));
        h = h.add(&pi.mul(&pi).scale(0.5));
        dk = dk.add(&pi.mul(&aq).scale(-1.0));
    }
    (h, dk)
}

/// Per-axis Weyl-ordered operator matrices in the oscillator basis of frequency ω.
struct AxisAlgebra {
    size: usize,
    ext: usize,
    q: DMatrix<Complex64>,
    p: DMatrix<Complex64>,
    cache: HashMap<(u8, u8), Vec<(usize, usize, Complex64)>>,
}

impl AxisAlgebra {
    fn new(size: usize, omega: f64, hbar: f64) -> Self {
        let ext = size + 6;
        let sq = (hbar / (2.0 * omega)).sqrt();
        let sp = (hbar * omega / 2.0).sqrt();
        let mut q = DMatrix::zeros(ext, ext);
        let mut p = DMatrix::zeros(ext, ext);
        for k in 1..ext {
            let r = (k as f64).sqrt();
            // a|k⟩ = √k|k−1⟩
            q[(k - 1, k)] = Complex64::new(sq * r, 0.0);
            q[(k, k - 1)] = Complex64::new(sq * r, 0.0);
            p[(k - 1, k)] = Complex64::new(0.0, -sp * r);
            p[(k, k - 1)] = Complex64::new(0.0, sp * r);
        }
        AxisAlgebra { size, ext, q, p, cache: HashMap::new() }
    }

    fn power(m: &DMatrix<Complex64>, e: u8, ext: usize) -> DMatrix<Complex64> {
        let mut r = DMatrix::identity(ext, ext);
        for _ in 0..e {
            r = &r * m;
        }
        r
    }

    /// Weyl(q^a p^c) = 2^{-a} Σ_k C(a,k) Q^k P^c Q^{a−k}, truncated to the basis.
    fn weyl(&mut self, a: u8, c: u8) -> &[(usize, usize, Complex64)] {
        let ext = self.ext;
        let size = self.size;
        let (q, p) = (&self.q, &self.p);
        self.cache.entry((a, c)).or_insert_with(|| {
            let pc = Self::power(p, c, ext);
            let mut op = DMatrix::<Complex64>::zeros(ext, ext);
            let mut binom = 1.0;
            for k in 0..=a {
                let t = Self::power(q, k, ext) * &pc * Self::power(q, a - k, ext);
                op += t * Complex64::new(binom, 0.0);
                binom = binom * (a - k) as f64 / (k + 1) as f64;
            }
            op /= Complex64::new(2f64.powi(a as i32), 0.0);
            let mut nz = Vec::new();
            for i in 0..size {
                for j in 0..size {
                    let v = op[(i, j)];
                    if v.norm() > 0.0 {
                        nz.push((i, j, v));
                    }
                }
            }
            nz
        })
    }
}

/// Sparse matrix in global product-basis indices, rows sorted.
struct Sparse {
    dim: usize,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<Complex64>,
}

fn assemble(symbol: &Poly, ax: &mut [AxisAlgebra; 2]) -> Sparse {
    let n = ax[0].size;
    let mut trip: Vec<(usize, usize, Complex64)> = Vec::new();
    for (e, &c) in &symbol.0 {
        if c == 0.0 {
            continue;
        }
        let w1 = ax[0].weyl(e[0], e[2]).to_vec();
        let w2 = ax[1].weyl(e[1], e[3]);
        for &(i1, j1, v1) in &w1 {
            for &(i2, j2, v2) in w2 {
                trip.push((i1 * n + i2, j1 * n + j2, v1 * v2 * c));
            }
        }
    }
    trip.sort_by_key(|a| (a.0, a.1));
    let mut merged: Vec<(usize, usize, Complex64)> = Vec::with_capacity(trip.len() / 4);
    for t in trip {
        match merged.last_mut() {
            Some(last) if last.0 == t.0 && last.1 == t.1 => last.2 += t.2,
            _ => merged.push(t),
        }
    }
    let scale = merged.iter().map(|t| t.2.norm()).fold(0.0, f64::max);
    merged.retain(|t| t.2.norm() > 1e-14 * scale);
    let dim = n * n;
    let mut row_start = vec![0usize; dim + 1];
    for t in &merged {
        row_start[t.0 + 1] += 1;
    }
    for r in 0..dim {
        row_start[r + 1] += row_start[r];
    }
    Sparse {
        dim,
        row_start,
        cols: merged.iter().map(|t| t.1).collect(),
        vals: merged.iter().map(|t| t.2).collect(),
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Connected components of the sparsity pattern, each sorted, ordered by smallest index.
fn blocks(m: &Sparse) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..m.dim).collect();
    for r in 0..m.dim {
        for k in m.row_start[r]..m.row_start[r + 1] {
            let (a, b) = (find(&mut parent, r), find(&mut parent, m.cols[k]));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..m.dim {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups.into_values().collect()
}

struct Eigenpair {
    energy: f64,
    block: usize,
    vector: DVector<Complex64>,
}

fn diagonalize(h: &Sparse, with_vectors: bool) -> Result<(Vec<Vec<usize>>, Vec<Eigenpair>)> {
    let groups = blocks(h);
    let solved = par_map(groups.len(), |b| {
        let idx = &groups[b];
        let pos: HashMap<usize, usize> = idx.iter().enumerate().map(|(k, &g)| (g, k)).collect();
        let s = idx.len();
        let mut m = DMatrix::<Complex64>::zeros(s, s);
        for (k, &g) in idx.iter().enumerate() {
            for e in h.row_start[g]..h.row_start[g + 1] {
                m[(k, pos[&h.cols[e]])] = h.vals[e];
            }
        }
        let asym = (&m - m.adjoint()).iter().map(|v| v.norm()).fold(0.0, f64::max);
        let herm = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
        let eig = SymmetricEigen::new(herm);
        let pairs: Vec<Eigenpair> = (0..s)
            .map(|k| Eigenpair {
                energy: eig.eigenvalues[k],
                block: b,
                vector: if with_vectors { eig.eigenvectors.column(k).into_owned() } else { DVector::zeros(0) },
            })
            .collect();
        (pairs, asym)
    });
    let mut all = Vec::new();
    for (pairs, asym) in solved {
        let scale = pairs.iter().map(|p| p.energy.abs()).fold(1.0, f64::max);
        if asym > 1e-10 * scale {
            return Err(Error::numerical("quantum", "assemble_and_diagonalize", format!("assembled matrix not Hermitian (defect {asym:e})")));
        }
        all.extend(pairs);
    }
    all.sort_by(|a, b| a.energy.total_cmp(&b.energy).then(a.block.cmp(&b.block)));
    Ok((groups, all))
}

#[derive(Clone, Copy, Debug)]
pub struct GalerkinOptions {
    pub basis_per_axis: usize,
    /// Error unless at least this many of the lowest levels are converged.
    pub min_converged: usize,
    /// Relative basis-growth change below which a level counts as converged.
    pub convergence_tol: f64,
}

impl GalerkinOptions {
    pub fn new(basis_per_axis: usize) -> Self {
        GalerkinOptions { basis_per_axis, min_converged: 1, convergence_tol: 1e-8 }
    }
}

struct Setup {
    h: Poly,
    dk: Poly,
    omegas: [f64; 2],
}

fn setup(spec: &HamiltonianSpec, kappa: f64, hbar: f64) -> Result<Setup> {
    if spec.dim() != 2 {
        return Err(Error::InvalidSpec(format!("quantum solver needs n = 2, spec has n = {}", spec.dim())));
    }
    let qc = spec.potential.minimizer().to_vec();
    let ac = spec.gauge.apply(&qc);
    let center = [qc[0], qc[1], kappa * ac[0], kappa * ac[1]];
    let (h, dk) = hamiltonian_symbols(spec, kappa);
    let (h, dk) = (h.shift(center), dk.shift(center));
    let mut omegas = [1.0; 2];
    for i in 0..2 {
        let mut e2 = [0u8; 4];
        e2[i] = 2;
        let mut e4 = [0u8; 4];
        e4[i] = 4;
        let quad = (2.0 * h.coeff(e2)).max(0.0).sqrt();
        let quart = (6.0 * h.coeff(e4).max(0.0) * hbar).cbrt();
        omegas[i] = quad.max(quart).max(1e-3);
    }
    Ok(Setup { h, dk, omegas })
}

fn solve_basis(s: &Setup, hbar: f64, n: usize, with_vectors: bool) -> Result<(Sparse, Vec<Vec<usize>>, Vec<Eigenpair>, Option<Sparse>)> {
    let mut ax = [AxisAlgebra::new(n, s.omegas[0], hbar), AxisAlgebra::new(n, s.omegas[1], hbar)];
    let hm = assemble(&s.h, &mut ax);
    let (groups, pairs) = diagonalize(&hm, with_vectors)?;
    let dm = with_vectors.then(|| assemble(&s.dk, &mut ax));
    Ok((hm, groups, pairs, dm))
}

/// ⟨ψ_a|D|ψ_b⟩ where ψ's are block-local vectors.
fn matrix_element(d: &Sparse, groups: &[Vec<usize>], a: &Eigenpair, b: &Eigenpair) -> Complex64 {
    let mut full = vec![Complex64::new(0.0, 0.0); d.dim];
    for (k, &g) in groups[b.block].iter().enumerate() {
        full[g] = b.vector[k];
    }
    let mut acc = Complex64::new(0.0, 0.0);
    for (k, &r) in groups[a.block].iter().enumerate() {
        let mut row = Complex64::new(0.0, 0.0);
        for e in d.row_start[r]..d.row_start[r + 1] {
            row += d.vals[e] * full[d.cols[e]];
        }
        acc += a.vector[k].conj() * row;
    }
    acc
}

/// Hellmann–Feynman derivatives with degenerate clusters (gap < 1e−9·ħ) diagonalized.
fn hellmann_feynman(d: &Sparse, groups: &[Vec<usize>], pairs: &[Eigenpair], hbar: f64) -> Vec<f64> {
    let gap = 1e-9 * hbar;
    let mut clusters = Vec::new();
    let mut start = 0;
    for i in 1..=pairs.len() {
        if i == pairs.len() || pairs[i].energy - pairs[i - 1].energy >= gap {
            clusters.push((start, i));
            start = i;
        }
    }
    let parts = par_map(clusters.len(), |c| {
        let (s, e) = clusters[c];
        let m = e - s;
        if m == 1 {
            return vec![matrix_element(d, groups, &pairs[s], &pairs[s]).re];
        }
        let mat = DMatrix::from_fn(m, m, |i, j| matrix_element(d, groups, &pairs[s + i], &pairs[s + j]));
        let herm = (&mat + mat.adjoint()) * Complex64::new(0.5, 0.0);
        let mut v: Vec<f64> = SymmetricEigen::new(herm).eigenvalues.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        v
    });
    parts.into_iter().flatten().collect()
}

/// Galerkin spectrum of Ĥ_κ in the tensor oscillator basis, with convergence judged against the
/// basis reduced by 4 per axis and κ-derivatives from Hellmann–Feynman.
pub fn assemble_and_diagonalize(spec: &HamiltonianSpec, kappa: f64, hbar: f64, opts: &GalerkinOptions) -> Result<SpectralResult> {
    let n = opts.basis_per_axis;
    if n < 8 {
        return Err(Error::Config("basis_per_axis must be at least 8".into()));
    }
    if !(hbar > 0.0) {
        return Err(Error::Config("ħ must be positive".into()));
    }
    let s = setup(spec, kappa, hbar)?;
    let (_, groups, pairs, dm) = solve_basis(&s, hbar, n, true)?;
    let (_, _, small, _) = solve_basis(&s, hbar, n - 4, false)?;
    let derivatives = hellmann_feynman(dm.as_ref().expect("derivative operator"), &groups, &pairs, hbar);
    let energies: Vec<f64> = pairs.iter().map(|p| p.energy).collect();
    let mut change = vec![f64::INFINITY; energies.len()];
    for (j, sm) in small.iter().enumerate() {
        change[j] = (energies[j] - sm.energy).abs() / energies[j].abs().max(1e-300);
    }
    let converged: Vec<bool> = change.iter().map(|&c| c <= opts.convergence_tol).collect();
    let prefix = converged.iter().take_while(|&&c| c).count();
    if prefix < opts.min_converged {
        return Err(Error::numerical(
            "quantum",
            "assemble_and_diagonalize",
            format!("only {prefix} of the lowest {} levels converged at basis {n}", opts.min_converged),
        ));
    }
    let complete_through = if prefix == 0 { f64::NEG_INFINITY } else { energies[prefix - 1] };
    let result = SpectralResult {
        energies,
        derivatives,
        converged,
        change,
        basis_per_axis: Some(n),
        hbar,
        kappa,
        lowest_included: f64::NEG_INFINITY,
        complete_through,
    };
    result.check_invariants(spec.minimum_energy())?;
    Ok(result)
}

/// Per-level dE_j/dκ = ⟨ψ_j|∂κĤ|ψ_j⟩ for a spectrum produced by [`assemble_and_diagonalize`].
pub fn kappa_derivatives(spec: &HamiltonianSpec, kappa: f64, hbar: f64, spectrum: &SpectralResult) -> Result<Vec<f64>> {
    let n = spectrum
        .basis_per_axis
        .ok_or_else(|| Error::Config("closed-form spectra already carry exact derivatives".into()))?;
    let s = setup(spec, kappa, hbar)?;
    let (_, groups, pairs, dm) = solve_basis(&s, hbar, n, true)?;
    let d = hellmann_feynman(dm.as_ref().expect("derivative operator"), &groups, &pairs, hbar);
    Ok(d[..spectrum.len().min(d.len())].to_vec())
}
