//! Quadratic Majorana Hamiltonians `H = (i/4) sum_ij A_ij g_i g_j`, their
//! normal modes, cylinder band structures, Chern numbers and vortex gaps.
//!
//! Mode convention: `c_k = (1/sqrt 2) sum_j Q_kj g_j` for `k > 0`, so that
//! `g_j = sqrt 2 sum_k (Q*_kj c_k + Q_kj c_k^dag)` and
//! `H = sum_k eps_k (c_k^dag c_k - 1/2)`.

use std::collections::HashMap;
use std::f64::consts::PI;

use faer::Mat;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, precondition, Result};
use crate::gauge::{ground_gauge, insert_vortex_pair, shortest_dual_path, GaugeConfig};
use crate::lattice::{build_lattice, Geometry, GeometryKind, Lattice, PlaquetteKind};
use crate::linalg::{herm_eigen, herm_eigenvalues, sym_eigen};
use crate::numfmt::sig12;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Sparse real antisymmetric coefficient matrix. Rows below `n_lattice` are the
/// matter Majoranas of lattice sites; later rows belong to attached registers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticHamiltonian {
    pub n: usize,
    pub n_lattice: usize,
    pub kappa: f64,
    rows: Vec<Vec<(usize, f64)>>,
}

impl QuadraticHamiltonian {
    pub fn zeros(n: usize, kappa: f64) -> Self {
        Self { n, n_lattice: n, kappa, rows: vec![Vec::new(); n] }
    }

    /// Adds `v` to `A_ij` and `-v` to `A_ji`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(i != j, "diagonal entry in antisymmetric matrix");
        Self::bump(&mut self.rows[i], j, v);
        Self::bump(&mut self.rows[j], i, -v);
    }

    fn bump(row: &mut Vec<(usize, f64)>, col: usize, v: f64) {
        match row.iter_mut().find(|(c, _)| *c == col) {
            Some(e) => e.1 += v,
            None => row.push((col, v)),
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let cur = self.get(i, j);
        self.add(i, j, v - cur);
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i].iter().find(|(c, _)| *c == j).map_or(0.0, |e| e.1)
    }

    /// Nonzero entries of row `i` as `(column, A_ij)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows[i].iter().copied().filter(|e| e.1 != 0.0)
    }

    /// Appends `extra` rows (registers) with no couplings.
    pub fn extend(&mut self, extra: usize) {
        self.n += extra;
        self.rows.resize(self.n, Vec::new());
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.rows[i].iter().map(|&(j, a)| a * x[j]).sum();
        }
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, a) in row {
                d[i * self.n + j] += a;
            }
        }
        d
    }

    /// Largest |A_ij + A_ji|; zero unless the storage was corrupted.
    pub fn antisymmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, a) in row {
                worst = worst.max((a + self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Row-sum bound on the operator norm of `iA`.
    pub fn norm_bound(&self) -> f64 {
        self.rows.iter().map(|r| r.iter().map(|e| e.1.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    fn fingerprint(&self) -> String {
        let nnz: usize = self.rows.iter().map(Vec::len).sum();
        let sum: f64 = self.rows.iter().flatten().map(|e| e.1.abs()).sum();
        format!("n={} nnz={} sum|A|={:.6e}", self.n, nnz, sum)
    }

    /// `S = A^T A` as a dense matrix; its eigenvalues are `eps_k^2`, each twice.
    fn gram(&self) -> Mat<f64> {
        let mut s = Mat::<f64>::zeros(self.n, self.n);
        for row in &self.rows {
            for &(i, a) in row {
                for &(j, b) in row {
                    s[(i, j)] += a * b;
                }
            }
        }
        s
    }
}

/// `A_ij = kappa * u_ij` on every lattice link.
pub fn assemble(lattice: &Lattice, gauge: &GaugeConfig, kappa: f64) -> Result<QuadraticHamiltonian> {
    if gauge.u.len() != lattice.links.len() {
        return Err(invalid(format!("gauge covers {} links, lattice has {}", gauge.u.len(), lattice.links.len())));
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(invalid(format!("kappa must be positive, got {kappa}")));
    }
    let mut h = QuadraticHamiltonian::zeros(lattice.n_sites(), kappa);
    for (l, link) in lattice.links.iter().enumerate() {
        h.add(link.i, link.j, kappa * gauge.u[l] as f64);
    }
    Ok(h)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Spectrum {
    pub n: usize,
    /// Ascending quasiparticle energies, one per positive mode.
    pub eps: Vec<f64>,
    /// Row-major `eps.len() x n`; row `k` is `Q_k`. Rows of the negative modes
    /// are the complex conjugates.
    pub q: Vec<Complex64>,
    pub vacuum_energy: f64,
}

impl Spectrum {
    pub fn n_modes(&self) -> usize {
        self.eps.len()
    }

    pub fn q_row(&self, k: usize) -> &[Complex64] {
        &self.q[k * self.n..(k + 1) * self.n]
    }

    /// Largest `|(iA) v_k - eps_k v_k|` with `v_k = conj(Q_k)`.
    pub fn residual(&self, h: &QuadraticHamiltonian) -> f64 {
        (0..self.n_modes())
            .into_par_iter()
            .map(|k| {
                let row = self.q_row(k);
                let mut worst = 0.0f64;
                for i in 0..self.n {
                    let av: Complex64 = h.row(i).map(|(j, a)| I * a * row[j].conj()).sum();
                    worst = worst.max((av - self.eps[k] * row[i].conj()).norm());
                }
                worst
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Largest deviation of the full `Q Q^dag` from the identity.
    pub fn unitarity_defect(&self) -> f64 {
        let m = self.n_modes();
        (0..m)
            .into_par_iter()
            .map(|a| {
                let ra = self.q_row(a);
                let mut worst = 0.0f64;
                for b in 0..m {
                    let rb = self.q_row(b);
                    let same: Complex64 = ra.iter().zip(rb).map(|(x, y)| x * y.conj()).sum();
                    let cross: Complex64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                    let target = if a == b { 1.0 } else { 0.0 };
                    worst = worst.max((same - target).norm()).max(cross.norm());
                }
                worst
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Energy of the Fock state with the listed modes occupied.
    pub fn energy(&self, occupied: &[usize]) -> f64 {
        self.vacuum_energy + occupied.iter().map(|&k| self.eps[k]).sum::<f64>()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,eps_over_kappa\n");
        for (k, e) in self.eps.iter().enumerate() {
            s.push_str(&format!("{},{}\n", k, sig12(*e)));
        }
        s
    }
}

fn orthogonalize(x: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        for b in basis {
            let d: f64 = x.iter().zip(b).map(|(a, c)| a * c).sum();
            x.iter_mut().zip(b).for_each(|(a, c)| *a -= d * c);
        }
    }
    let nrm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nrm > 0.0 {
        x.iter_mut().for_each(|v| *v /= nrm);
    }
    nrm
}

fn mode_row(x: &[f64], y: &[f64]) -> Vec<Complex64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    x.iter().zip(y).map(|(&a, &b)| Complex64::new(a * s, -b * s)).collect()
}

fn finish(h: &QuadraticHamiltonian, mut modes: Vec<(f64, Vec<Complex64>)>) -> Result<Spectrum> {
    if modes.len() * 2 != h.n {
        return Err(numerical(format!("found {} mode pairs for {} Majoranas ({})", modes.len(), h.n, h.fingerprint())));
    }
    modes.sort_by(|a, b| a.0.total_cmp(&b.0));
    let eps: Vec<f64> = modes.iter().map(|m| m.0).collect();
    let vacuum_energy = -0.5 * eps.iter().sum::<f64>();
    let q = modes.into_iter().flat_map(|m| m.1).collect();
    Ok(Spectrum { n: h.n, eps, q, vacuum_energy })
}

/// Pairs an orthonormal real basis of the kernel of `A` into zero modes.
fn pair_kernel(kernel: Vec<Vec<f64>>, modes: &mut Vec<(f64, Vec<Complex64>)>, h: &QuadraticHamiltonian) -> Result<()> {
    if kernel.len() % 2 == 1 {
        return Err(numerical(format!("odd zero-mode count {} ({})", kernel.len(), h.fingerprint())));
    }
    for pair in kernel.chunks_exact(2) {
        modes.push((0.0, mode_row(&pair[0], &pair[1])));
    }
    Ok(())
}

/// Normal modes from the real symmetric problem `A^T A`.
///
/// Each degenerate eigenspace of `A^T A` with eigenvalue `eps^2 > 0` is
/// invariant under `A`; for a unit vector `x` in it, `y = A x / eps` completes
/// the pair and `(x + i y)/sqrt 2` is an eigenvector of `iA` with eigenvalue
/// `+eps`. Real arithmetic keeps this several times faster than a complex
/// Hermitian solve of the same size.
pub fn diagonalize(h: &QuadraticHamiltonian) -> Result<Spectrum> {
    let n = h.n;
    if n % 2 == 1 {
        return Err(precondition(format!("odd Majorana count {n}")));
    }
    if n == 0 {
        return Ok(Spectrum { n, eps: vec![], q: vec![], vacuum_energy: 0.0 });
    }
    let (lam, x) = sym_eigen(&h.gram());
    if lam.iter().any(|v| !v.is_finite()) {
        return Err(numerical(format!("eigensolver returned non-finite values ({})", h.fingerprint())));
    }
    let scale = lam[n - 1].max(h.kappa * h.kappa);
    let cluster_tol = 1e-9 * scale;
    let zero_tol = 1e-14 * scale;

    let mut modes = Vec::with_capacity(n / 2);
    let mut kernel: Vec<Vec<f64>> = Vec::new();
    let mut start = 0;
    let mut ax = vec![0.0; n];
    while start < n {
        let mut end = start + 1;
        while end < n && lam[end] - lam[end - 1] <= cluster_tol {
            end += 1;
        }
        let mean = lam[start..end].iter().sum::<f64>() / (end - start) as f64;
        let mut pool: Vec<Vec<f64>> = (start..end).map(|c| (0..n).map(|i| x[(i, c)]).collect()).collect();
        if mean <= zero_tol {
            kernel.extend(pool);
            start = end;
            continue;
        }
        // Greedy Gram-Schmidt: always continue from the basis vector least
        // covered by the pairs built so far.
        let mut local: Vec<Vec<f64>> = Vec::new();
        for _ in 0..(end - start) / 2 {
            let (best, _) = pool
                .iter()
                .enumerate()
                .map(|(k, v)| {
                    let mut w = v.clone();
                    (k, orthogonalize(&mut w, &local))
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty cluster");
            let mut v = pool.swap_remove(best);
            orthogonalize(&mut v, &local);
            h.apply(&v, &mut ax);
            let mut y = ax.clone();
            let eps = orthogonalize(&mut y, &local);
            modes.push((eps, mode_row(&v, &y)));
            local.push(v);
            local.push(y);
        }
        start = end;
    }
    pair_kernel(kernel, &mut modes, h)?;
    finish(h, modes)
}

/// Normal modes from the complex Hermitian eigenproblem of `iA` directly.
/// Slower than [`diagonalize`]; kept as an independent cross-check.
pub fn diagonalize_hermitian(h: &QuadraticHamiltonian) -> Result<Spectrum> {
    let n = h.n;
    if n % 2 == 1 {
        return Err(precondition(format!("odd Majorana count {n}")));
    }
    let ia: Vec<Complex64> = h.dense().into_iter().map(|a| I * a).collect();
    let (vals, vecs) = herm_eigen(n, &ia);
    let zero_tol = 1e-7 * h.kappa.max(vals.last().copied().unwrap_or(0.0));
    let mut modes = Vec::with_capacity(n / 2);
    let mut kernel_parts = Vec::new();
    for (v, vec) in vals.iter().zip(vecs) {
        if v.abs() <= zero_tol {
            kernel_parts.push(vec.iter().map(|z| z.re).collect::<Vec<_>>());
            kernel_parts.push(vec.iter().map(|z| z.im).collect::<Vec<_>>());
        } else if *v > 0.0 {
            modes.push((*v, vec.iter().map(|z| z.conj()).collect()));
        }
    }
    let mut kernel: Vec<Vec<f64>> = Vec::new();
    for mut v in kernel_parts {
        if orthogonalize(&mut v, &kernel) > 1e-6 {
            kernel.push(v);
        }
    }
    pair_kernel(kernel, &mut modes, h)?;
    finish(h, modes)
}

/// `-(1/2) sum_k eps_k` without building mode vectors. Each `eps` is taken as
/// `|A x|` for an eigenvector `x` of `A^T A`, which is quadratically accurate
/// in the eigenvector error; `sqrt` of the raw eigenvalue drifts by ~1e-8.
pub fn vacuum_energy(h: &QuadraticHamiltonian) -> f64 {
    let (_, x) = sym_eigen(&h.gram());
    let mut col = vec![0.0; h.n];
    let mut ax = vec![0.0; h.n];
    let mut total = 0.0;
    for c in 0..h.n {
        col.iter_mut().enumerate().for_each(|(i, v)| *v = x[(i, c)]);
        h.apply(&col, &mut ax);
        total += ax.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    -0.25 * total
}

/// Eigenvalues of `iA`, ascending.
pub fn ia_eigenvalues(h: &QuadraticHamiltonian) -> Vec<f64> {
    let ia: Vec<Complex64> = h.dense().into_iter().map(|a| I * a).collect();
    herm_eigenvalues(h.n, &ia)
}

// ---------------------------------------------------------------------------
// Translation-invariant blocks

/// Link signs keyed by (sublattice i, sublattice j, cell offset), after
/// checking that every translate carries the same sign. Cross-boundary links
/// of a cylinder are keyed by their open-direction column as well.
fn cell_signature(lattice: &Lattice, gauge: &GaugeConfig, keep_column: bool) -> Result<HashMap<(usize, u8, u8, [i64; 2]), i8>> {
    let mut sig = HashMap::new();
    for (l, link) in lattice.links.iter().enumerate() {
        let si = &lattice.sites[link.i];
        let col = if keep_column { si.cell[0] } else { 0 };
        let key = (col, si.sub, lattice.sites[link.j].sub, link.offset);
        match sig.insert(key, gauge.u[l]) {
            Some(prev) if prev != gauge.u[l] => {
                return Err(precondition(
                    "gauge is not translation invariant; use diagonalize on the full lattice instead".to_string(),
                ));
            }
            _ => {}
        }
    }
    Ok(sig)
}

/// Bloch block of `iA` at momentum `ky` for a cylinder: `6 lx` orbitals
/// indexed `ix * 6 + sub`.
pub fn cylinder_bloch(lattice: &Lattice, gauge: &GaugeConfig, kappa: f64, ky: f64) -> Result<Vec<Complex64>> {
    if lattice.geometry.kind != GeometryKind::Cylinder {
        return Err(precondition("band structure needs a cylinder"));
    }
    cell_signature(lattice, gauge, true)?;
    let m = 6 * lattice.geometry.lx;
    let mut hk = vec![Complex64::new(0.0, 0.0); m * m];
    for (l, link) in lattice.links.iter().enumerate() {
        if lattice.sites[link.i].cell[1] != 0 {
            continue;
        }
        let (a, b) = (lattice.orbital(link.i), lattice.orbital(link.j));
        let t = I * kappa * gauge.u[l] as f64 * Complex64::from_polar(1.0, ky * link.offset[1] as f64);
        hk[a * m + b] += t;
        hk[b * m + a] += t.conj();
    }
    Ok(hk)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandOptions {
    /// Weight within `edge_rows` columns of a boundary that marks an edge state.
    pub edge_threshold: f64,
    pub edge_rows: usize,
}

impl Default for BandOptions {
    fn default() -> Self {
        Self { edge_threshold: 0.9, edge_rows: 3 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandStructure {
    pub lx: usize,
    pub ky: Vec<f64>,
    /// `energies[k][band]`, ascending per momentum, all signs.
    pub energies: Vec<Vec<f64>>,
    pub weight_bottom: Vec<Vec<f64>>,
    pub weight_top: Vec<Vec<f64>>,
    pub options: BandOptions,
}

impl BandStructure {
    pub fn is_edge(&self, k: usize, band: usize) -> bool {
        self.weight_bottom[k][band] > self.options.edge_threshold || self.weight_top[k][band] > self.options.edge_threshold
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("ky_a,band_index,energy_over_kappa,edge_weight_bottom,edge_weight_top\n");
        for (k, ky) in self.ky.iter().enumerate() {
            for b in 0..self.energies[k].len() {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    sig12(*ky),
                    b,
                    sig12(self.energies[k][b]),
                    sig12(self.weight_bottom[k][b]),
                    sig12(self.weight_top[k][b])
                ));
            }
        }
        s
    }

    /// Positive-energy bulk bands at momentum `k`, clustered into contiguous
    /// groups separated by more than `gap`.
    pub fn bulk_bands(&self, k: usize, gap: f64) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (b, &e) in self.energies[k].iter().enumerate() {
            if e <= 0.0 || self.is_edge(k, b) {
                continue;
            }
            match out.last_mut() {
                Some(last) if e - last.1 <= gap => last.1 = e,
                _ => out.push((e, e)),
            }
        }
        out
    }
}

fn column_weights(lx: usize, v: &[Complex64]) -> Vec<f64> {
    (0..lx).map(|ix| v[ix * 6..ix * 6 + 6].iter().map(|z| z.norm_sqr()).sum()).collect()
}

/// Diagonalizes every Bloch block `ky = 2 pi n / ly` of a cylinder.
pub fn band_structure(lattice: &Lattice, gauge: &GaugeConfig, kappa: f64, options: &BandOptions) -> Result<BandStructure> {
    let ly = lattice.geometry.ly;
    let lx = lattice.geometry.lx;
    cylinder_bloch(lattice, gauge, kappa, 0.0)?;
    let rows = options.edge_rows.min(lx);
    let ky: Vec<f64> = (0..ly).map(|n| 2.0 * PI * n as f64 / ly as f64).collect();
    let per_k: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = ky
        .par_iter()
        .map(|&k| {
            let hk = cylinder_bloch(lattice, gauge, kappa, k).expect("checked above");
            let (vals, vecs) = herm_eigen(6 * lx, &hk);
            let (mut wb, mut wt) = (Vec::new(), Vec::new());
            for v in &vecs {
                let cw = column_weights(lx, v);
                wb.push(cw[..rows].iter().sum());
                wt.push(cw[lx - rows..].iter().sum());
            }
            (vals, wb, wt)
        })
        .collect();
    let mut bands = BandStructure { lx, ky, energies: vec![], weight_bottom: vec![], weight_top: vec![], options: options.clone() };
    for (e, wb, wt) in per_k {
        bands.energies.push(e);
        bands.weight_bottom.push(wb);
        bands.weight_top.push(wt);
    }
    Ok(bands)
}

/// Smallest positive bulk energy over all momenta.
pub fn bulk_gap(bands: &BandStructure) -> f64 {
    let mut gap = f64::INFINITY;
    for k in 0..bands.ky.len() {
        for (b, &e) in bands.energies[k].iter().enumerate() {
            if e > 0.0 && !bands.is_edge(k, b) {
                gap = gap.min(e);
            }
        }
    }
    gap
}

/// Zero crossing of the chiral branch on the `ix = 0` boundary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeCrossing {
    pub ky: f64,
    /// `d eps / d ky` at the crossing, units kappa * a.
    pub velocity: f64,
    /// Decay length of the edge-state amplitude into the bulk, units a.
    pub xi: f64,
    /// Weight of the zero-energy edge state on its outermost column.
    pub outer_weight: f64,
    /// Column weights of the zero-energy edge state.
    pub profile: Vec<f64>,
}

/// Energy of the bottom-edge state nearest zero at `ky`, with its vector.
fn bottom_edge_state(lattice: &Lattice, gauge: &GaugeConfig, kappa: f64, ky: f64) -> Option<(f64, Vec<Complex64>)> {
    let lx = lattice.geometry.lx;
    let hk = cylinder_bloch(lattice, gauge, kappa, ky).ok()?;
    let (vals, vecs) = herm_eigen(6 * lx, &hk);
    vals.into_iter()
        .zip(vecs)
        .filter(|(_, v)| {
            let cw = column_weights(lx, v);
            cw[..lx / 2].iter().sum::<f64>() > 0.5
        })
        .min_by(|a, b| a.0.abs().total_cmp(&b.0.abs()))
}

pub fn edge_crossing(lattice: &Lattice, gauge: &GaugeConfig, kappa: f64) -> Result<EdgeCrossing> {
    let energy = |k: f64| bottom_edge_state(lattice, gauge, kappa, k).map(|s| s.0);
    let grid = 256;
    let mut bracket = None;
    let mut prev = (0.0, energy(0.0).ok_or_else(|| numerical("no bottom edge state"))?);
    for n in 1..=grid {
        let k = 2.0 * PI * n as f64 / grid as f64;
        let e = energy(k).ok_or_else(|| numerical("no bottom edge state"))?;
        // Ignore sign flips of the nearest-to-zero state that jump between branches.
        if prev.1.signum() != e.signum() && (prev.1 - e).abs() < 0.5 * kappa {
            let cand = (prev.0, k);
            let mid = 0.5 * (cand.0 + cand.1);
            if bracket.map_or(true, |(a, b): (f64, f64)| (0.5 * (a + b) - PI).abs() > (mid - PI).abs()) {
                bracket = Some(cand);
            }
        }
        prev = (k, e);
    }
    let (mut a, mut b) = bracket.ok_or_else(|| numerical("edge branch does not cross zero"))?;
    let ea = energy(a).unwrap();
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        let em = energy(m).unwrap();
        if em.signum() == ea.signum() {
            a = m;
        } else {
            b = m;
        }
    }
    let k0 = 0.5 * (a + b);
    let h = 1e-4;
    let velocity = (energy(k0 + h).unwrap() - energy(k0 - h).unwrap()) / (2.0 * h);
    let (_, v) = bottom_edge_state(lattice, gauge, kappa, k0).unwrap();
    let profile = column_weights(lattice.geometry.lx, &v);
    // Columns sit sqrt(3)/2 apart perpendicular to the edge.
    let spacing = 3f64.sqrt() / 2.0;
    let pts: Vec<(f64, f64)> = profile.iter().enumerate().take(6).filter(|(_, &w)| w > 1e-24).map(|(ix, &w)| (ix as f64 * spacing, w.ln())).collect();
    let xi = if pts.len() >= 2 {
        let (n, sx, sy) = (pts.len() as f64, pts.iter().map(|p| p.0).sum::<f64>(), pts.iter().map(|p| p.1).sum::<f64>());
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        // |psi|^2 ~ exp(-2 x / xi)
        -2.0 / slope
    } else {
        0.0
    };
    Ok(EdgeCrossing { ky: k0, velocity, xi, outer_weight: profile[0], profile })
}

// ---------------------------------------------------------------------------
// Chern number

/// 6x6 Bloch block of `iA` for a translation-invariant torus gauge.
fn torus_bloch(sig: &HashMap<(usize, u8, u8, [i64; 2]), i8>, kappa: f64, kx: f64, ky: f64) -> [Complex64; 36] {
    let mut hk = [Complex64::new(0.0, 0.0); 36];
    for (&(_, a, b, off), &u) in sig {
        let t = I * kappa * u as f64 * Complex64::from_polar(1.0, kx * off[0] as f64 + ky * off[1] as f64);
        hk[a as usize * 6 + b as usize] += t;
        hk[b as usize * 6 + a as usize] += t.conj();
    }
    hk
}

fn det3(m: &[[Complex64; 3]; 3]) -> Complex64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TopologyResult {
    pub chern: i32,
    /// Distance of the raw lattice sum from the nearest integer.
    pub defect: f64,
    pub grid: usize,
    pub edge_velocity: f64,
    pub localization_length: f64,
}

fn chern_on_grid(sig: &HashMap<(usize, u8, u8, [i64; 2]), i8>, kappa: f64, grid: usize) -> Result<f64> {
    let mut occ = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for j in 0..grid {
            let (kx, ky) = (2.0 * PI * i as f64 / grid as f64, 2.0 * PI * j as f64 / grid as f64);
            let (vals, vecs) = herm_eigen(6, &torus_bloch(sig, kappa, kx, ky));
            if vals[2] > -1e-9 * kappa || vals[3] < 1e-9 * kappa {
                return Err(precondition(format!("spectrum gapless at k = ({kx:.6}, {ky:.6})")));
            }
            occ.push([vecs[0].clone(), vecs[1].clone(), vecs[2].clone()]);
        }
    }
    let at = |i: usize, j: usize| &occ[(i % grid) * grid + (j % grid)];
    let link = |p: &[Vec<Complex64>; 3], q: &[Vec<Complex64>; 3]| {
        let mut m = [[Complex64::new(0.0, 0.0); 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] = p[a].iter().zip(&q[b]).map(|(x, y)| x.conj() * y).sum();
            }
        }
        let d = det3(&m);
        d / d.norm()
    };
    let mut total = 0.0;
    for i in 0..grid {
        for j in 0..grid {
            let u1 = link(at(i, j), at(i + 1, j));
            let u2 = link(at(i + 1, j), at(i + 1, j + 1));
            let u3 = link(at(i, j + 1), at(i + 1, j + 1));
            let u4 = link(at(i, j), at(i, j + 1));
            total += (u1 * u2 * u3.conj() * u4.conj()).arg();
        }
    }
    Ok(total / (2.0 * PI))
}

/// Chern number of the filled negative-energy bands by lattice link products,
/// refined until two successive grids agree; the edge velocity and decay length
/// come from a cylinder carrying the same per-cell gauge.
pub fn chern_number(lattice: &Lattice, gauge: &GaugeConfig, kappa: f64, grid: usize) -> Result<TopologyResult> {
    if lattice.geometry.kind != GeometryKind::Torus {
        return Err(precondition("Chern number needs a torus"));
    }
    if grid < 2 {
        return Err(invalid("Chern grid must be at least 2"));
    }
    let sig = cell_signature(lattice, gauge, false)?;
    let mut g = grid;
    let mut raw = chern_on_grid(&sig, kappa, g)?;
    for _ in 0..3 {
        let finer = chern_on_grid(&sig, kappa, 2 * g)?;
        let stable = finer.round() == raw.round();
        g *= 2;
        raw = finer;
        if stable {
            break;
        }
    }
    let chern = raw.round() as i32;

    let cyl = build_lattice(&Geometry::cylinder(16, 4))?;
    let mut cyl_gauge = ground_gauge(&cyl);
    for (l, link) in cyl.links.iter().enumerate() {
        let key = (0, cyl.sites[link.i].sub, cyl.sites[link.j].sub, link.offset);
        cyl_gauge.u[l] = *sig.get(&key).ok_or_else(|| numerical("cylinder link missing from torus cell"))?;
    }
    let edge = edge_crossing(&cyl, &cyl_gauge, kappa)?;
    Ok(TopologyResult { chern, defect: (raw - raw.round()).abs(), grid: g, edge_velocity: edge.velocity, localization_length: edge.xi })
}

// ---------------------------------------------------------------------------
// Vortex gaps

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VortexGap {
    pub species: PlaquetteKind,
    pub separations: Vec<usize>,
    /// `E_pair(s) - E_ground` at each separation.
    pub pair_energies: Vec<f64>,
    /// Fitted large-separation pair energy. Reported as the gap.
    pub gap: f64,
    /// Half the pair asymptote.
    pub per_vortex: f64,
    pub amplitude: f64,
    pub xi_fit: f64,
    pub residual: f64,
    pub converged: bool,
}

/// Plaquette of `kind` anchored at a cell (the A triangle for triangles).
fn plaquette_at(lattice: &Lattice, kind: PlaquetteKind, cell: [usize; 2]) -> Option<usize> {
    lattice.plaquettes.iter().position(|p| p.kind == kind && p.cell == cell)
}

/// Least-squares fit of `e_inf + c exp(-s / xi)`, scanning `xi`.
pub fn fit_exponential_tail(s: &[f64], e: &[f64]) -> (f64, f64, f64, f64) {
    let n = s.len() as f64;
    let mean = e.iter().sum::<f64>() / n;
    let mut best = (mean, 0.0, 0.0, (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt());
    let s_max = s.iter().cloned().fold(0.0, f64::max).max(1.0);
    if s.len() < 2 {
        return best;
    }
    for step in 0..400 {
        let xi = 0.05 * (s_max / 0.05).powf(step as f64 / 399.0);
        let f: Vec<f64> = s.iter().map(|v| (-v / xi).exp()).collect();
        let (sf, sff) = (f.iter().sum::<f64>(), f.iter().map(|v| v * v).sum::<f64>());
        let (se, sfe) = (e.iter().sum::<f64>(), f.iter().zip(e).map(|(a, b)| a * b).sum::<f64>());
        let det = n * sff - sf * sf;
        if det.abs() < 1e-300 {
            continue;
        }
        let c = (n * sfe - sf * se) / det;
        let e_inf = (se - c * sf) / n;
        let res = (f.iter().zip(e).map(|(fv, ev)| (e_inf + c * fv - ev).powi(2)).sum::<f64>() / n).sqrt();
        if res < best.3 - 1e-15 {
            best = (e_inf, c, xi, res);
        }
    }
    best
}

/// Pair energies of two same-species vortices a distance `s` apart along
/// `a_x`, extrapolated to infinite separation.
pub fn vortex_gap(lattice: &Lattice, kappa: f64, species: PlaquetteKind, separations: &[usize], tolerance: f64) -> Result<VortexGap> {
    if species == PlaquetteKind::Dangling {
        return Err(invalid("vortex species must be triangle or dodecagon"));
    }
    if separations.is_empty() || separations.iter().any(|&s| s < 3) {
        return Err(invalid("vortex separations must be at least 3"));
    }
    if separations.len() < 2 {
        return Err(precondition("extrapolating the pair energy needs at least two separations"));
    }
    let lx = lattice.geometry.lx;
    let limit = if lattice.geometry.periodic_x() { lx / 2 } else { lx - 1 };
    if let Some(&s) = separations.iter().find(|&&s| s > limit) {
        return Err(invalid(format!("separation {s} does not fit in width {lx}")));
    }
    let g0 = ground_gauge(lattice);
    let e0 = vacuum_energy(&assemble(lattice, &g0, kappa)?);
    let iy = lattice.geometry.ly / 2;
    let x0 = if lattice.geometry.periodic_x() { 0 } else { (lx - separations.iter().max().unwrap()) / 2 };
    let pair_energies: Vec<f64> = separations
        .par_iter()
        .map(|&s| -> Result<f64> {
            let p = plaquette_at(lattice, species, [x0, iy]).ok_or_else(|| invalid("no plaquette at anchor"))?;
            let q = plaquette_at(lattice, species, [x0 + s, iy]).ok_or_else(|| invalid("no plaquette at target"))?;
            let path = shortest_dual_path(lattice, p, q).ok_or_else(|| invalid("plaquettes not connected"))?;
            let g = insert_vortex_pair(lattice, &g0, &path)?;
            Ok(vacuum_energy(&assemble(lattice, &g, kappa)?) - e0)
        })
        .collect::<Result<_>>()?;
    let s: Vec<f64> = separations.iter().map(|&v| v as f64).collect();
    let (e_inf, amplitude, xi_fit, residual) = fit_exponential_tail(&s, &pair_energies);
    Ok(VortexGap {
        species,
        separations: separations.to_vec(),
        pair_energies,
        gap: e_inf,
        per_vortex: e_inf / 2.0,
        amplitude,
        xi_fit,
        residual,
        converged: residual <= tolerance,
    })
}
