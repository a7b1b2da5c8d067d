//! Decoherence estimates and static-disorder sweeps.
//!
//! The closed-form rates carry unit prefactors: they are scaling estimates,
//! meaningful as ratios and exponents rather than absolute values. Lengths
//! are in lattice spacings, energies and temperatures in units of kappa with
//! `k_B = 1`.

use std::f64::consts::PI;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, Median, Min, Max};

use crate::error::{invalid, numerical, precondition, Result};
use crate::fermion::{assemble, diagonalize, Spectrum, VortexGap};
use crate::gauge::{ground_gauge, insert_vortex_pair, shortest_dual_path, GaugeConfig};
use crate::lattice::{Lattice, PlaquetteKind};
use crate::numfmt::sig12;
use crate::transfer::{dot_plan, extend_hamiltonian, pick_edge_mode, secular_amplitudes, DotOptions, DotPlan, Drive, RegisterSetup};

/// Spectral density of the environment driving edge noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Bath {
    /// Thermal occupation `exp(-omega / T)`.
    Thermal,
    /// `S(omega) = 1 / (omega^2 + 1 / t_c^2)`, as for a slow nuclear bath.
    Lorentzian { t_c: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VortexSpecies {
    pub kind: PlaquetteKind,
    pub gap: f64,
    /// Bulk plaquettes of this kind.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub temperature: f64,
    pub species: Vec<VortexSpecies>,
    /// Droplet perimeter.
    pub perimeter: f64,
    /// Edge velocity.
    pub velocity: f64,
    /// Strength of the leading edge interaction, units kappa a^7.
    pub lambda: f64,
    /// Microscopic perturbation scale behind `lambda`.
    pub kappa_prime: f64,
    pub bath: Bath,
    /// Localization length of bulk excitations.
    pub xi: f64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(invalid(format!("temperature must be finite and >= 0, got {}", self.temperature)));
        }
        if !(self.velocity > 0.0) || !(self.xi > 0.0) || !(self.perimeter >= 0.0) {
            return Err(invalid("velocity and xi must be positive, perimeter nonnegative"));
        }
        if self.species.iter().any(|s| !(s.gap > 0.0)) {
            return Err(invalid("vortex gaps must be positive"));
        }
        if let Bath::Lorentzian { t_c } = self.bath {
            if !(t_c > 0.0) {
                return Err(invalid("bath correlation time must be positive"));
            }
        }
        Ok(())
    }

    /// Species taken from computed vortex gaps, with plaquette counts read off
    /// the lattice.
    pub fn with_vortex_gaps(mut self, lattice: &Lattice, gaps: &[VortexGap]) -> Self {
        self.species = gaps
            .iter()
            .map(|g| VortexSpecies { kind: g.species, gap: g.gap, count: lattice.count_plaquettes(g.species) })
            .collect();
        self
    }

    /// Smallest vortex gap; the cheapest excitation dominates every rate.
    pub fn min_gap(&self) -> f64 {
        self.species.iter().map(|s| s.gap).fold(f64::INFINITY, f64::min)
    }

    fn spectral(&self, omega: f64, t: f64) -> f64 {
        match self.bath {
            Bath::Thermal if t == 0.0 => 0.0,
            Bath::Thermal => (-omega / t).exp(),
            Bath::Lorentzian { t_c } => 1.0 / (omega * omega + 1.0 / (t_c * t_c)),
        }
    }
}

/// Expected number of thermally excited bulk vortices.
pub fn vortex_density(model: &NoiseModel, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(invalid(format!("temperature must be >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    Ok(model.species.iter().map(|s| s.count as f64 * (-s.gap / t).exp()).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub gamma: f64,
    /// Zero-temperature part.
    pub leading: f64,
    /// Leading thermal correction.
    pub correction: f64,
    /// False when `v p` is not well above `T` and the expansion is doubtful.
    pub expansion_valid: bool,
}

/// Interaction-induced decay of an edge fermion at momentum `p`:
/// `lambda^2 p^13 / v + lambda^2 p^11 (T / v)^2 / v`.
pub fn decay_interaction(model: &NoiseModel, p: f64, t: f64) -> Result<RateEstimate> {
    if !(p > 0.0) || !(t >= 0.0) {
        return Err(invalid(format!("need p > 0 and T >= 0, got p = {p}, T = {t}")));
    }
    let (l2, v) = (model.lambda * model.lambda, model.velocity);
    let leading = l2 * p.powi(13) / v;
    let correction = l2 * p.powi(11) * (t / v).powi(2) / v;
    Ok(RateEstimate { gamma: leading + correction, leading, correction, expansion_valid: v * p > 5.0 * t })
}

/// Zero-temperature rate from microscopic inputs,
/// `(kappa^2 / delta_s) (kappa' / kappa)^4 (a p)^14`.
pub fn decay_interaction_microscopic(kappa: f64, kappa_prime: f64, delta_s: f64, p: f64) -> Result<f64> {
    if !(kappa > 0.0 && delta_s > 0.0 && p > 0.0) {
        return Err(invalid("kappa, delta_s and p must be positive"));
    }
    Ok(kappa * kappa / delta_s * (kappa_prime / kappa).powi(4) * p.powi(14))
}

/// Total decay rate of a transfer from edge noise, `S(delta_s) + l S(delta_v)`
/// with `S` the bath spectral function.
pub fn decay_edge_noise(model: &NoiseModel, delta_s: f64, t: f64, ell: f64) -> Result<f64> {
    if model.bath == Bath::Thermal && !(t > 0.0) {
        if t == 0.0 {
            return Ok(0.0);
        }
        return Err(invalid(format!("temperature must be positive, got {t}")));
    }
    if !(ell >= 0.0) {
        return Err(invalid("perimeter must be nonnegative"));
    }
    Ok(model.spectral(delta_s, t) + ell * model.spectral(model.min_gap(), t))
}

/// Suppression of bulk noise at distance `d` from the edge,
/// `exp(-d / xi) exp(-omega_0 / T)` with `omega_0 = 2 delta_v`.
pub fn bulk_suppression(model: &NoiseModel, d: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(invalid(format!("distance must be >= 0, got {d}")));
    }
    let omega0 = 2.0 * model.min_gap();
    let thermal = if model.temperature == 0.0 { 0.0 } else { (-omega0 / model.temperature).exp() };
    Ok((-d / model.xi).exp() * thermal)
}

/// `p,T,gamma` for the interaction rate on a grid.
pub fn rate_table(model: &NoiseModel, ps: &[f64], ts: &[f64]) -> Result<String> {
    let mut s = String::from("p,T,gamma\n");
    for &p in ps {
        for &t in ts {
            let r = decay_interaction(model, p, t)?;
            s.push_str(&format!("{},{},{}\n", sig12(p), sig12(t), sig12(r.gamma)));
        }
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Golden-rule integral

/// Vertex `k2 k3^2 k4^3` of the leading interaction, Wick-contracted against
/// one incoming (`p`) and three outgoing (`out`) fermions. The contraction
/// sums the `3!` assignments of outgoing momenta to `k1..k3` with their
/// permutation sign; `k4 = -p`.
pub fn contracted_vertex(p: f64, out: [f64; 3]) -> f64 {
    const PERMS: [([usize; 3], f64); 6] =
        [([0, 1, 2], 1.0), ([1, 2, 0], 1.0), ([2, 0, 1], 1.0), ([1, 0, 2], -1.0), ([0, 2, 1], -1.0), ([2, 1, 0], -1.0)];
    let k4 = -p;
    PERMS.iter().map(|(s, sign)| sign * out[s[1]] * out[s[2]].powi(2) * k4.powi(3)).sum()
}

// Dunavant degree-5 rule: barycentric orbits and weights.
const DUNAVANT: [(f64, f64, f64); 3] = [
    (1.0 / 3.0, 1.0 / 3.0, 0.225),
    (0.059715871789770, 0.470142064105115, 0.132394152788506),
    (0.797426985353087, 0.101286507323456, 0.125939180544827),
];

type Tri = [[f64; 2]; 3];

fn tri_rule<F: Fn(f64, f64) -> f64>(f: &F, t: &Tri) -> f64 {
    let area = 0.5 * ((t[1][0] - t[0][0]) * (t[2][1] - t[0][1]) - (t[2][0] - t[0][0]) * (t[1][1] - t[0][1])).abs();
    let at = |l: [f64; 3]| {
        let x = l[0] * t[0][0] + l[1] * t[1][0] + l[2] * t[2][0];
        let y = l[0] * t[0][1] + l[1] * t[1][1] + l[2] * t[2][1];
        f(x, y)
    };
    let (_, _, w0) = DUNAVANT[0];
    let mut sum = w0 * at([1.0 / 3.0; 3]);
    for &(a, b, w) in &DUNAVANT[1..] {
        sum += w * (at([a, b, b]) + at([b, a, b]) + at([b, b, a]));
    }
    area * sum
}

fn split(t: &Tri) -> [Tri; 4] {
    let mid = |i: usize, j: usize| [0.5 * (t[i][0] + t[j][0]), 0.5 * (t[i][1] + t[j][1])];
    let (m01, m12, m20) = (mid(0, 1), mid(1, 2), mid(2, 0));
    [[t[0], m01, m20], [m01, t[1], m12], [m20, m12, t[2]], [m01, m12, m20]]
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
    pub max_level: usize,
    pub triangles: usize,
}

pub const MAX_LEVEL: usize = 16;

/// Adaptive subdivision of a triangle. A cell is accepted when its four
/// children change the estimate by less than its share of `rel_tol`.
pub fn integrate_triangle<F: Fn(f64, f64) -> f64>(f: F, t: Tri, rel_tol: f64) -> Result<Quadrature> {
    let mut scale = 0.0;
    for c in split(&t) {
        for g in split(&c) {
            scale += tri_rule(&f, &g);
        }
    }
    let tol = rel_tol * scale.abs().max(f64::MIN_POSITIVE);
    let mut q = Quadrature { value: 0.0, error: 0.0, max_level: 0, triangles: 0 };
    let mut stack = vec![(t, tri_rule(&f, &t), 0usize, tol)];
    while let Some((tri, coarse, level, budget)) = stack.pop() {
        let kids = split(&tri);
        let vals: Vec<f64> = kids.iter().map(|k| tri_rule(&f, k)).collect();
        let fine: f64 = vals.iter().sum();
        let err = (fine - coarse).abs();
        if err <= budget {
            q.value += fine;
            q.error += err;
            q.max_level = q.max_level.max(level + 1);
            q.triangles += 4;
        } else if level + 1 >= MAX_LEVEL {
            return Err(numerical(format!(
                "quadrature did not converge at refinement level {}: local change {err:.3e} over budget {budget:.3e}",
                level + 1
            )));
        } else {
            for (k, v) in kids.into_iter().zip(vals) {
                stack.push((k, v, level + 1, budget / 4.0));
            }
        }
    }
    Ok(q)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GoldenRule {
    pub p: f64,
    pub gamma: f64,
    pub quadrature: Quadrature,
}

/// Golden-rule decay of an edge fermion into three. The energy delta fixes
/// `p3 = p - p1 - p2` (Jacobian `1 / v`); the squared momentum delta leaves
/// the wavepacket length, taken as the coherence length `1 / p`.
pub fn golden_rule_numeric(lambda: f64, v: f64, p: f64, rel_tol: f64) -> Result<GoldenRule> {
    if !(p > 0.0) || !(v > 0.0) {
        return Err(invalid(format!("need p > 0 and v > 0, got p = {p}, v = {v}")));
    }
    let f = |p1: f64, p2: f64| contracted_vertex(p, [p1, p2, p - p1 - p2]).powi(2);
    let quadrature = integrate_triangle(f, [[0.0, 0.0], [p, 0.0], [0.0, p]], rel_tol)?;
    let gamma = lambda * lambda * quadrature.value / (4.0 * PI * PI * v * p);
    Ok(GoldenRule { p, gamma, quadrature })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PowerFit {
    pub exponent: f64,
    pub prefactor: f64,
    pub max_residual: f64,
}

/// Least-squares line through `(ln x, ln y)`.
pub fn power_fit(x: &[f64], y: &[f64]) -> Result<PowerFit> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(invalid("power fit needs at least two positive points"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let exponent = sxy / sxx;
    let c = my - exponent * mx;
    let max_residual = lx.iter().zip(&ly).map(|(a, b)| (c + exponent * a - b).abs()).fold(0.0, f64::max);
    Ok(PowerFit { exponent, prefactor: c.exp(), max_residual })
}

/// Golden-rule rates on `points` log-spaced momenta over one decade from
/// `p_min`, with the fitted power law.
pub fn golden_rule_scan(lambda: f64, v: f64, p_min: f64, points: usize, rel_tol: f64) -> Result<(Vec<GoldenRule>, PowerFit)> {
    if points < 2 {
        return Err(invalid("a scan needs at least two momenta"));
    }
    let rates: Vec<GoldenRule> = (0..points)
        .map(|i| golden_rule_numeric(lambda, v, p_min * 10f64.powf(i as f64 / (points - 1) as f64), rel_tol))
        .collect::<Result<_>>()?;
    let fit = power_fit(&rates.iter().map(|r| r.p).collect::<Vec<_>>(), &rates.iter().map(|r| r.gamma).collect::<Vec<_>>())?;
    Ok((rates, fit))
}

// ---------------------------------------------------------------------------
// Disorder sweeps

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisorderSpec {
    /// Coupling jitter: each link gets `kappa + d` with `d` uniform in `[-w, w]`.
    pub jitter: f64,
    /// Vortex pairs placed at random in the bulk.
    pub vortex_pairs: usize,
    /// Minimum distance from any boundary site to a bulk vortex.
    pub min_edge_distance: f64,
    /// Adds one vortex on a plaquette touching the edge between the
    /// registers, paired with a distant bulk vortex.
    pub stray_edge_vortex: bool,
}

impl DisorderSpec {
    pub fn clean() -> Self {
        Self { jitter: 0.0, vortex_pairs: 0, min_edge_distance: 0.0, stray_edge_vortex: false }
    }
}

/// Dot-regime transfer to be calibrated on each device.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepBase {
    pub kappa: f64,
    pub site_a: usize,
    pub site_b: usize,
    /// Target edge-mode energy.
    pub energy: f64,
    pub dot: DotOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub disorder_param: f64,
    pub fidelity: f64,
    pub arrival_time: f64,
    /// Calibrated register splitting.
    pub delta_s: f64,
    pub vortices: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepResult {
    /// Plan on the clean device.
    pub plan: DotPlan,
    pub clean_fidelity: f64,
    pub rows: Vec<SweepRow>,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub median_drop: f64,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,disorder_param,fidelity,arrival_time\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.seed, sig12(r.disorder_param), sig12(r.fidelity), sig12(r.arrival_time)));
        }
        s
    }
}

const STREAM_JITTER: u64 = 1;
const STREAM_VORTEX: u64 = 2;

/// Uniform `[-w, w]` jitter of link `link` for `seed`; the draw depends on
/// the pair only, not on the order links are visited.
pub fn link_jitter(seed: u64, link: usize, w: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_JITTER);
    rng.set_word_pos(2 * link as u128);
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    w * (2.0 * u - 1.0)
}

fn edge_distance(lattice: &Lattice, p: usize) -> f64 {
    let c = lattice.plaquette_center(p);
    lattice
        .boundaries
        .iter()
        .flat_map(|b| b.sites.iter())
        .map(|&s| {
            let q = lattice.sites[s].pos;
            ((q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Bulk plaquettes whose centers sit at least `min_distance` from the edge.
pub fn far_plaquettes(lattice: &Lattice, min_distance: f64) -> Vec<usize> {
    (0..lattice.plaquettes.len())
        .filter(|&p| lattice.plaquettes[p].kind != PlaquetteKind::Dangling && edge_distance(lattice, p) >= min_distance)
        .collect()
}

/// Bulk plaquettes sharing a site with the boundary arc from `a` to `b`.
pub fn edge_path_plaquettes(lattice: &Lattice, a: usize, b: usize) -> Vec<usize> {
    let Some(bd) = lattice.boundaries.iter().find(|bd| bd.sites.contains(&a) && bd.sites.contains(&b)) else {
        return Vec::new();
    };
    let (ia, ib) = (bd.sites.iter().position(|&s| s == a).unwrap(), bd.sites.iter().position(|&s| s == b).unwrap());
    let n = bd.sites.len();
    let len = (ib + n - ia) % n;
    let arc: Vec<usize> = (0..=len).map(|k| bd.sites[(ia + k) % n]).collect();
    (0..lattice.plaquettes.len())
        .filter(|&p| {
            let pl = &lattice.plaquettes[p];
            pl.kind != PlaquetteKind::Dangling && pl.sites.iter().any(|s| arc.contains(s))
        })
        .collect()
}

fn pick(rng: &mut ChaCha8Rng, pool: &mut Vec<usize>) -> Option<usize> {
    if pool.is_empty() {
        return None;
    }
    let i = (rng.next_u64() % pool.len() as u64) as usize;
    Some(pool.swap_remove(i))
}

/// Gauge configuration for one disorder realization.
pub fn disordered_gauge(lattice: &Lattice, spec: &DisorderSpec, base: &SweepBase, seed: u64) -> Result<GaugeConfig> {
    let mut gauge = ground_gauge(lattice);
    if spec.vortex_pairs == 0 && !spec.stray_edge_vortex {
        return Ok(gauge);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_VORTEX);
    let mut far = far_plaquettes(lattice, spec.min_edge_distance);
    let flip = |gauge: &mut GaugeConfig, p: usize, q: usize| -> Result<()> {
        let path = shortest_dual_path(lattice, p, q).ok_or_else(|| invalid("vortex plaquettes are not connected"))?;
        *gauge = insert_vortex_pair(lattice, gauge, &path)?;
        Ok(())
    };
    for _ in 0..spec.vortex_pairs {
        match (pick(&mut rng, &mut far), pick(&mut rng, &mut far)) {
            (Some(p), Some(q)) => flip(&mut gauge, p, q)?,
            _ => return Err(precondition(format!("fewer than {} bulk plaquettes lie {} from the edge", 2 * spec.vortex_pairs, spec.min_edge_distance))),
        }
    }
    if spec.stray_edge_vortex {
        let q = far
            .iter()
            .copied()
            .max_by(|&x, &y| edge_distance(lattice, x).total_cmp(&edge_distance(lattice, y)))
            .ok_or_else(|| precondition("no bulk plaquette left for the partner vortex"))?;
        // Corner plaquettes without a shared link cannot host one end of a pair.
        let mut near = edge_path_plaquettes(lattice, base.site_a, base.site_b);
        near.retain(|&p| gauge_flux_clean(lattice, &gauge, p) && shortest_dual_path(lattice, p, q).is_some());
        let p = pick(&mut rng, &mut near).ok_or_else(|| precondition("no plaquette along the edge path"))?;
        flip(&mut gauge, p, q)?;
    }
    Ok(gauge)
}

fn gauge_flux_clean(lattice: &Lattice, gauge: &GaugeConfig, p: usize) -> bool {
    lattice.plaquettes[p].links.iter().all(|&l| gauge.u[l] == 1)
}

fn sweep_hamiltonian(lattice: &Lattice, gauge: &GaugeConfig, kappa: f64, jitter: f64, seed: u64) -> Result<Spectrum> {
    let mut h = assemble(lattice, gauge, kappa)?;
    if jitter > 0.0 {
        for (l, link) in lattice.links.iter().enumerate() {
            h.add(link.i, link.j, gauge.u[l] as f64 * link_jitter(seed, l, jitter));
        }
    }
    diagonalize(&h)
}

fn calibrate(spectrum: &Spectrum, base: &SweepBase) -> Result<DotPlan> {
    let (a, b) = (base.site_a, base.site_b);
    let mode = pick_edge_mode(spectrum, a, b, base.energy, base.dot.min_overlap).ok_or_else(|| precondition("no edge mode visible at both sites"))?;
    dot_plan(spectrum, a, b, mode, &base.dot)
}

fn transfer_fidelity(lattice: &Lattice, spectrum: &Spectrum, base: &SweepBase, plan: &DotPlan) -> Result<f64> {
    let setup = RegisterSetup::new(lattice, plan.mode_energy, base.site_a, base.site_b, Drive::Constant(plan.g_l), Drive::Constant(plan.g_r))?;
    let amp = secular_amplitudes(&extend_hamiltonian(spectrum, &setup)?, plan.tau)?;
    Ok(amp[1][0].norm_sqr())
}

/// Dot-regime transfer under static disorder. Coupling jitter is frozen into
/// the device, so each realization is calibrated on its own vortex-free
/// spectrum; vortices appear afterwards and the calibrated run is repeated
/// in their presence.
pub fn disorder_sweep(lattice: &Lattice, base: &SweepBase, spec: &DisorderSpec, seeds: &[u64]) -> Result<SweepResult> {
    if !(spec.jitter >= 0.0) || spec.jitter >= base.kappa {
        return Err(invalid(format!("jitter must lie in [0, kappa), got {}", spec.jitter)));
    }
    let g0 = ground_gauge(lattice);
    let clean = diagonalize(&assemble(lattice, &g0, base.kappa)?)?;
    let plan = calibrate(&clean, base)?;
    let clean_fidelity = transfer_fidelity(lattice, &clean, base, &plan)?;
    let mut rows: Vec<SweepRow> = seeds
        .par_iter()
        .map(|&seed| -> Result<SweepRow> {
            let device = sweep_hamiltonian(lattice, &g0, base.kappa, spec.jitter, seed)?;
            let cal = calibrate(&device, base)?;
            let gauge = disordered_gauge(lattice, spec, base, seed)?;
            let vortices = crate::gauge::flux_pattern(lattice, &gauge).vortex_count();
            let fidelity = if gauge == g0 {
                transfer_fidelity(lattice, &device, base, &cal)?
            } else {
                transfer_fidelity(lattice, &sweep_hamiltonian(lattice, &gauge, base.kappa, spec.jitter, seed)?, base, &cal)?
            };
            Ok(SweepRow { seed, disorder_param: spec.jitter, fidelity, arrival_time: cal.tau, delta_s: cal.mode_energy, vortices })
        })
        .collect::<Result<_>>()?;
    rows.sort_by_key(|r| r.seed);
    let f: Vec<f64> = rows.iter().map(|r| r.fidelity).collect();
    let (median, min, max) = if f.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let d = Data::new(f);
        (d.median(), d.min(), d.max())
    };
    Ok(SweepResult { plan, clean_fidelity, rows, median, min, max, median_drop: clean_fidelity - median })
}
