//! Register-to-register transfer through the chiral edge.
//!
//! Each register is a spin with splitting `delta_s`, written as two Majoranas
//! `g0`, `g3` with `c = (g0 + i g3) / 2`; spin down is the occupied state. The
//! coupling `g sigma^x_L sigma^beta_a` to the dangling flavor `beta` of site
//! `a` becomes `A[g0_L, a] = -2 g U_La` between matter Majoranas, and the field
//! `-(delta_s / 2) sigma^z` becomes `A[g3, g0] = -delta_s`.
//!
//! Two engines evolve the creation operator `c_L^dag`:
//! * secular: number-conserving single-particle amplitudes over
//!   `{c_L, c_R, c_k}` with `h = diag(delta_s, delta_s, eps_k)` and
//!   `h[L, k] = -i sqrt2 g U Q*_{k,a}`;
//! * full: Majorana coefficients `w` of `sum_j w_j g_j` on the site basis,
//!   `dw/dt = A(t) w`, which keeps every pairing term.

use std::f64::consts::{PI, SQRT_2};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, precondition, Result};
use crate::fermion::{QuadraticHamiltonian, Spectrum};
use crate::lattice::Lattice;
use crate::numfmt::sig12;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

// ---------------------------------------------------------------------------
// Drives

/// Coupling samples on a uniform grid starting at `t = 0`; zero outside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub dt: f64,
    pub samples: Vec<f64>,
    pub g_max: f64,
    /// Target weight left in the register when the pulse is switched off.
    pub residual: f64,
    /// Set when the cap, not the target profile, shaped a noticeable part of
    /// the pulse.
    pub cap_dominated: bool,
}

impl Pulse {
    pub fn at(&self, t: f64) -> f64 {
        if t < 0.0 || self.samples.is_empty() {
            return 0.0;
        }
        let x = t / self.dt;
        let i = x.floor() as usize;
        if i + 1 >= self.samples.len() {
            return if i + 1 == self.samples.len() && (x - i as f64) < 1e-9 { self.samples[i] } else { 0.0 };
        }
        let f = x - i as f64;
        self.samples[i] * (1.0 - f) + self.samples[i + 1] * f
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.samples.len().saturating_sub(1) as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Time of the last nonzero sample.
    pub fn active_until(&self) -> f64 {
        self.samples.iter().rposition(|&g| g != 0.0).map_or(0.0, |i| i as f64 * self.dt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Drive {
    Constant(f64),
    Pulse(Pulse),
}

impl Drive {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Drive::Constant(g) => *g,
            Drive::Pulse(p) => p.at(t),
        }
    }

    pub fn peak(&self) -> f64 {
        match self {
            Drive::Constant(g) => g.abs(),
            Drive::Pulse(p) => p.peak(),
        }
    }
}

// ---------------------------------------------------------------------------
// Register setup

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisterSetup {
    pub delta_s: f64,
    pub site_a: usize,
    pub site_b: usize,
    pub flavor_beta: u8,
    pub flavor_eta: u8,
    pub g_l: Drive,
    pub g_r: Drive,
    /// Signs of the register links; fixed to +1 in the simulated sector.
    pub u_la: i8,
    pub u_rb: i8,
}

impl RegisterSetup {
    /// Validates the injection sites and reads their dangling flavors.
    pub fn new(lattice: &Lattice, delta_s: f64, site_a: usize, site_b: usize, g_l: Drive, g_r: Drive) -> Result<Self> {
        let flavor = |s: usize| {
            lattice
                .dangling_flavor(s)
                .ok_or_else(|| invalid(format!("injection site {s} has no dangling Majorana")))
        };
        let setup = Self {
            delta_s,
            site_a,
            site_b,
            flavor_beta: flavor(site_a)?,
            flavor_eta: flavor(site_b)?,
            g_l,
            g_r,
            u_la: 1,
            u_rb: 1,
        };
        if site_a == site_b {
            return Err(invalid("injection sites must differ"));
        }
        if !(delta_s > 0.0 && delta_s.is_finite()) {
            return Err(invalid(format!("register splitting must be positive, got {delta_s}")));
        }
        if let (Drive::Constant(gl), Drive::Constant(gr)) = (&setup.g_l, &setup.g_r) {
            if gl.abs() >= delta_s || gr.abs() >= delta_s {
                return Err(invalid("static couplings must stay below the register splitting"));
            }
        }
        Ok(setup)
    }

    pub fn with_drives(&self, g_l: Drive, g_r: Drive) -> Self {
        Self { g_l, g_r, ..self.clone() }
    }
}

// ---------------------------------------------------------------------------
// Engines

/// Linear dynamics `dx/dt = D(t) x` on a complex vector.
pub trait Dynamics: Sync {
    fn dim(&self) -> usize;
    /// Upper bound on the generator norm at time `t`.
    fn norm_bound(&self, t: f64) -> f64;
    fn deriv(&self, t: f64, x: &[Complex64], out: &mut [Complex64]);
    fn norm(&self, x: &[Complex64]) -> f64;
    /// Particle amplitudes `(c_L^dag, c_R^dag)`.
    fn register_amplitudes(&self, x: &[Complex64]) -> (Complex64, Complex64);
    /// Total weight on both registers, particles and holes.
    fn register_weight(&self, x: &[Complex64]) -> f64;
    /// Initial vector for `c_L^dag` (`left`) or `c_R^dag`.
    fn creation(&self, left: bool) -> Vec<Complex64>;
    /// Weight on the listed lattice sites, where the basis allows it.
    fn site_weight(&self, x: &[Complex64], sites: &[usize]) -> f64;
}

/// Number-conserving model over `{c_L, c_R, c_1 .. c_M}`.
#[derive(Clone, Debug)]
pub struct SecularModel {
    pub eps: Vec<f64>,
    /// `-i sqrt2 U Q*_{k,a}`: coupling per unit `g_L`.
    pub coupling_l: Vec<Complex64>,
    pub coupling_r: Vec<Complex64>,
    pub delta_s: f64,
    pub g_l: Drive,
    pub g_r: Drive,
    eps_max: f64,
}

/// Secular mode-basis Hamiltonian.
pub fn extend_hamiltonian(spectrum: &Spectrum, setup: &RegisterSetup) -> Result<SecularModel> {
    for s in [setup.site_a, setup.site_b] {
        if s >= spectrum.n {
            return Err(invalid(format!("injection site {s} outside the spectrum basis")));
        }
    }
    let col = |site: usize, u: i8| -> Vec<Complex64> {
        (0..spectrum.n_modes()).map(|k| -I * SQRT_2 * u as f64 * spectrum.q_row(k)[site].conj()).collect()
    };
    Ok(SecularModel {
        eps: spectrum.eps.clone(),
        coupling_l: col(setup.site_a, setup.u_la),
        coupling_r: col(setup.site_b, setup.u_rb),
        delta_s: setup.delta_s,
        g_l: setup.g_l.clone(),
        g_r: setup.g_r.clone(),
        eps_max: spectrum.eps.iter().fold(0.0, |m, e| m.max(*e)),
    })
}

impl SecularModel {
    /// Dense `h(t)` for inspection.
    pub fn dense(&self, t: f64) -> Vec<Complex64> {
        let m = self.eps.len() + 2;
        let mut h = vec![ZERO; m * m];
        h[0] = self.delta_s.into();
        h[m + 1] = self.delta_s.into();
        let (gl, gr) = (self.g_l.at(t), self.g_r.at(t));
        for (k, e) in self.eps.iter().enumerate() {
            let r = k + 2;
            h[r * m + r] = (*e).into();
            h[r] = gl * self.coupling_l[k];
            h[r * m] = (gl * self.coupling_l[k]).conj();
            h[m + r] = gr * self.coupling_r[k];
            h[r * m + 1] = (gr * self.coupling_r[k]).conj();
        }
        h
    }

    pub fn with_delta(&self, delta_s: f64) -> Self {
        Self { delta_s, ..self.clone() }
    }
}

impl Dynamics for SecularModel {
    fn dim(&self) -> usize {
        self.eps.len() + 2
    }

    fn norm_bound(&self, t: f64) -> f64 {
        let coupling: f64 = self.coupling_l.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt() * self.g_l.at(t).abs()
            + self.coupling_r.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt() * self.g_r.at(t).abs();
        self.eps_max.max(self.delta_s) + coupling
    }

    fn deriv(&self, t: f64, x: &[Complex64], out: &mut [Complex64]) {
        let (gl, gr) = (self.g_l.at(t), self.g_r.at(t));
        let (xl, xr) = (x[0], x[1]);
        let mut hl = self.delta_s * xl;
        let mut hr = self.delta_s * xr;
        for k in 0..self.eps.len() {
            let (cl, cr) = (gl * self.coupling_l[k], gr * self.coupling_r[k]);
            let xk = x[k + 2];
            hl += cl * xk;
            hr += cr * xk;
            out[k + 2] = -I * (self.eps[k] * xk + cl.conj() * xl + cr.conj() * xr);
        }
        out[0] = -I * hl;
        out[1] = -I * hr;
    }

    fn norm(&self, x: &[Complex64]) -> f64 {
        x.iter().map(|z| z.norm_sqr()).sum()
    }

    fn register_amplitudes(&self, x: &[Complex64]) -> (Complex64, Complex64) {
        (x[0], x[1])
    }

    fn register_weight(&self, x: &[Complex64]) -> f64 {
        x[0].norm_sqr() + x[1].norm_sqr()
    }

    fn creation(&self, left: bool) -> Vec<Complex64> {
        let mut v = vec![ZERO; self.dim()];
        v[if left { 0 } else { 1 }] = ONE;
        v
    }

    fn site_weight(&self, _x: &[Complex64], _sites: &[usize]) -> f64 {
        f64::NAN
    }
}

/// Full Majorana model on the site basis plus four register Majoranas
/// (`g0_L, g3_L, g0_R, g3_R` after the lattice rows).
#[derive(Clone, Debug)]
pub struct FullModel {
    pub a: QuadraticHamiltonian,
    pub n_lattice: usize,
    pub site_a: usize,
    pub site_b: usize,
    pub u_la: i8,
    pub u_rb: i8,
    pub g_l: Drive,
    pub g_r: Drive,
    static_norm: f64,
    csr: Csr,
}

/// Compressed rows of the static part, for the inner loop.
#[derive(Clone, Debug, Default)]
struct Csr {
    start: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    fn new(a: &QuadraticHamiltonian) -> Self {
        let mut c = Csr { start: vec![0], ..Default::default() };
        for i in 0..a.n {
            for (j, v) in a.row(i) {
                c.cols.push(j);
                c.vals.push(v);
            }
            c.start.push(c.cols.len());
        }
        c
    }
}

/// Full (pairing-preserving) Majorana form of the extended Hamiltonian; the
/// register couplings are applied at evaluation time from the drives.
pub fn full_hamiltonian(lattice_h: &QuadraticHamiltonian, setup: &RegisterSetup) -> Result<FullModel> {
    let n = lattice_h.n_lattice;
    if setup.site_a >= n || setup.site_b >= n {
        return Err(invalid("injection site outside the lattice"));
    }
    let mut a = lattice_h.clone();
    a.extend(4);
    a.add(n + 1, n, -setup.delta_s);
    a.add(n + 3, n + 2, -setup.delta_s);
    let static_norm = a.norm_bound();
    let csr = Csr::new(&a);
    Ok(FullModel {
        a,
        n_lattice: n,
        site_a: setup.site_a,
        site_b: setup.site_b,
        u_la: setup.u_la,
        u_rb: setup.u_rb,
        g_l: setup.g_l.clone(),
        g_r: setup.g_r.clone(),
        static_norm,
        csr,
    })
}

impl FullModel {
    fn reg(&self) -> [usize; 4] {
        let n = self.n_lattice;
        [n, n + 1, n + 2, n + 3]
    }

    pub fn with_delta(&self, delta_s: f64) -> Self {
        let mut out = self.clone();
        let [l0, l3, r0, r3] = self.reg();
        out.a.set(l3, l0, -delta_s);
        out.a.set(r3, r0, -delta_s);
        out.static_norm = out.a.norm_bound();
        out.csr = Csr::new(&out.a);
        out
    }
}

impl Dynamics for FullModel {
    fn dim(&self) -> usize {
        self.a.n
    }

    fn norm_bound(&self, t: f64) -> f64 {
        self.static_norm + 2.0 * (self.g_l.at(t).abs() + self.g_r.at(t).abs())
    }

    fn deriv(&self, t: f64, x: &[Complex64], out: &mut [Complex64]) {
        let c = &self.csr;
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = ZERO;
            for e in c.start[i]..c.start[i + 1] {
                acc += c.vals[e] * x[c.cols[e]];
            }
            *o = acc;
        }
        let [l0, _, r0, _] = self.reg();
        let cl = -2.0 * self.g_l.at(t) * self.u_la as f64;
        let cr = -2.0 * self.g_r.at(t) * self.u_rb as f64;
        out[l0] += cl * x[self.site_a];
        out[self.site_a] -= cl * x[l0];
        out[r0] += cr * x[self.site_b];
        out[self.site_b] -= cr * x[r0];
    }

    fn norm(&self, x: &[Complex64]) -> f64 {
        2.0 * x.iter().map(|z| z.norm_sqr()).sum::<f64>()
    }

    fn register_amplitudes(&self, x: &[Complex64]) -> (Complex64, Complex64) {
        let [l0, l3, r0, r3] = self.reg();
        (x[l0] + I * x[l3], x[r0] + I * x[r3])
    }

    fn register_weight(&self, x: &[Complex64]) -> f64 {
        let [l0, l3, r0, r3] = self.reg();
        2.0 * (x[l0].norm_sqr() + x[l3].norm_sqr() + x[r0].norm_sqr() + x[r3].norm_sqr())
    }

    fn creation(&self, left: bool) -> Vec<Complex64> {
        let [l0, l3, r0, r3] = self.reg();
        let (i0, i3) = if left { (l0, l3) } else { (r0, r3) };
        let mut v = vec![ZERO; self.dim()];
        v[i0] = Complex64::new(0.5, 0.0);
        v[i3] = Complex64::new(0.0, -0.5);
        v
    }

    fn site_weight(&self, x: &[Complex64], sites: &[usize]) -> f64 {
        2.0 * sites.iter().map(|&s| x[s].norm_sqr()).sum::<f64>()
    }
}

// ---------------------------------------------------------------------------
// Evolution

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvolveOptions {
    pub t_final: f64,
    /// Requested step; refined so that `dt * max |H| <= max_phase_step`.
    pub dt: f64,
    pub max_phase_step: f64,
    /// Approximate spacing of trace samples.
    pub sample_dt: f64,
    pub norm_tolerance: f64,
}

impl EvolveOptions {
    pub fn new(t_final: f64) -> Self {
        Self { t_final, dt: 0.02, max_phase_step: 0.05, sample_dt: 1.0, norm_tolerance: 1e-8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferTrace {
    pub t: Vec<f64>,
    pub amp_l: Vec<Complex64>,
    pub amp_r: Vec<Complex64>,
    pub edge_prob: Vec<f64>,
    pub norm: Vec<f64>,
    /// Weight on the watched sites (full engine only).
    pub watched: Vec<f64>,
    pub dt: f64,
    pub steps: usize,
    pub fidelity: f64,
    pub norm_drift: f64,
    /// Final vector for each initial condition.
    #[serde(skip)]
    pub finals: Vec<Vec<Complex64>>,
    /// `amplitudes[x][y]`: amplitude of `c_x^dag` in the evolved `c_y^dag`
    /// (x, y in {L, R}); present when both initial conditions were evolved.
    pub amplitudes: Option<[[Complex64; 2]; 2]>,
}

impl TransferTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,re_amp_L,im_amp_L,re_amp_R,im_amp_R,edge_prob,norm\n");
        for i in 0..self.t.len() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                sig12(self.t[i]),
                sig12(self.amp_l[i].re),
                sig12(self.amp_l[i].im),
                sig12(self.amp_r[i].re),
                sig12(self.amp_r[i].im),
                sig12(self.edge_prob[i]),
                sig12(self.norm[i])
            ));
        }
        s
    }
}

fn rk4_step<D: Dynamics + ?Sized>(d: &D, t: f64, dt: f64, x: &mut [Complex64], buf: &mut [Vec<Complex64>; 5]) {
    let n = x.len();
    let [k1, k2, k3, k4, tmp] = buf;
    d.deriv(t, x, k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    d.deriv(t + 0.5 * dt, tmp, k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    d.deriv(t + 0.5 * dt, tmp, k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    d.deriv(t + dt, tmp, k4);
    for i in 0..n {
        x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Fourth-order Runge-Kutta evolution of `c_L^dag` (and of `c_R^dag` when
/// `both` is set, which fills `amplitudes`). `watch` lists lattice sites whose
/// weight is recorded at each sample.
pub fn evolve<D: Dynamics>(d: &D, opts: &EvolveOptions, both: bool, watch: &[usize]) -> Result<TransferTrace> {
    if !(opts.t_final >= 0.0) || !(opts.dt > 0.0) {
        return Err(invalid("evolution needs t_final >= 0 and dt > 0"));
    }
    // Probe the generator norm over the window to pick a safe step.
    let probes = 64;
    let h_max = (0..=probes).map(|i| d.norm_bound(opts.t_final * i as f64 / probes as f64)).fold(0.0, f64::max);
    let dt_cap = if h_max > 0.0 { opts.max_phase_step / h_max } else { opts.dt };
    let steps = ((opts.t_final / opts.dt.min(dt_cap)).ceil() as usize).max(1);
    let dt = opts.t_final / steps as f64;
    let every = ((opts.sample_dt / dt).round() as usize).max(1);

    let mut states = vec![d.creation(true)];
    if both {
        states.push(d.creation(false));
    }
    let n0: Vec<f64> = states.iter().map(|s| d.norm(s)).collect();
    let n = d.dim();
    let mut buf = [vec![ZERO; n], vec![ZERO; n], vec![ZERO; n], vec![ZERO; n], vec![ZERO; n]];
    let mut trace = TransferTrace {
        t: vec![],
        amp_l: vec![],
        amp_r: vec![],
        edge_prob: vec![],
        norm: vec![],
        watched: vec![],
        dt,
        steps,
        fidelity: 0.0,
        norm_drift: 0.0,
        finals: vec![],
        amplitudes: None,
    };
    let record = |trace: &mut TransferTrace, t: f64, x: &[Complex64]| {
        let (al, ar) = d.register_amplitudes(x);
        let norm = d.norm(x);
        trace.t.push(t);
        trace.amp_l.push(al);
        trace.amp_r.push(ar);
        trace.edge_prob.push(norm - d.register_weight(x));
        trace.norm.push(norm);
        if !watch.is_empty() {
            trace.watched.push(d.site_weight(x, watch));
        }
    };
    record(&mut trace, 0.0, &states[0]);
    for step in 0..steps {
        let t = step as f64 * dt;
        for s in states.iter_mut() {
            rk4_step(d, t, dt, s, &mut buf);
        }
        if (step + 1) % every == 0 || step + 1 == steps {
            record(&mut trace, (step + 1) as f64 * dt, &states[0]);
        }
    }
    let drift = states.iter().zip(&n0).map(|(s, n0)| (d.norm(s) - n0).abs()).fold(0.0, f64::max);
    if drift > opts.norm_tolerance {
        return Err(numerical(format!(
            "norm drift {drift:.3e} exceeds {:.1e} with dt = {dt:.4e} ({steps} steps, |H| <= {h_max:.4}); lower max_phase_step",
            opts.norm_tolerance
        )));
    }
    trace.norm_drift = drift;
    trace.fidelity = trace.amp_r.last().map_or(0.0, |a| a.norm_sqr());
    if both {
        let (ll, rl) = d.register_amplitudes(&states[0]);
        let (lr, rr) = d.register_amplitudes(&states[1]);
        trace.amplitudes = Some([[ll, lr], [rl, rr]]);
    }
    trace.finals = states;
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Dot regime

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DotPlan {
    pub mode: usize,
    pub mode_energy: f64,
    pub g_l: f64,
    pub g_r: f64,
    /// Register-mode tunneling `sqrt2 |g Q|` (equal on both sides).
    pub tunneling: f64,
    pub tau: f64,
    pub phi: f64,
    /// Tunneling over the smaller neighboring mode spacing.
    pub resolvability: f64,
    pub spacing: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DotOptions {
    /// Target ratio of tunneling to the neighboring mode spacing.
    pub ratio: f64,
    /// Coupling cap as a fraction of the register splitting.
    pub g_max_fraction: f64,
    /// Smallest usable |Q| at an injection site.
    pub min_overlap: f64,
}

impl Default for DotOptions {
    fn default() -> Self {
        Self { ratio: 0.1, g_max_fraction: 0.1, min_overlap: 1e-3 }
    }
}

/// Phase `phi_s` of `-i Q*_{k,s}` (times the register link sign).
fn injection_phase(q: Complex64, u: i8) -> f64 {
    (-I * u as f64 * q.conj()).arg()
}

/// Resonant-tunneling plan through mode `mode` with `delta_s = eps_mode`.
pub fn dot_plan(spectrum: &Spectrum, site_a: usize, site_b: usize, mode: usize, opts: &DotOptions) -> Result<DotPlan> {
    if mode >= spectrum.n_modes() {
        return Err(invalid(format!("mode {mode} out of range")));
    }
    let (qa, qb) = (spectrum.q_row(mode)[site_a], spectrum.q_row(mode)[site_b]);
    if qa.norm() < opts.min_overlap || qb.norm() < opts.min_overlap {
        return Err(precondition(format!(
            "mode {mode} is nearly invisible at the injection sites (|Q_a| = {:.2e}, |Q_b| = {:.2e}); pick another mode",
            qa.norm(),
            qb.norm()
        )));
    }
    let e = spectrum.eps[mode];
    let below = if mode > 0 { e - spectrum.eps[mode - 1] } else { f64::INFINITY };
    let above = if mode + 1 < spectrum.n_modes() { spectrum.eps[mode + 1] - e } else { f64::INFINITY };
    let spacing = below.min(above);
    // Both sides share one tunneling rate; the weaker site sets the cap.
    let g_max = opts.g_max_fraction * e;
    let tunneling = (opts.ratio * spacing).min(SQRT_2 * g_max * qa.norm().min(qb.norm()));
    let g_l = tunneling / (SQRT_2 * qa.norm());
    let g_r = tunneling / (SQRT_2 * qb.norm());
    Ok(DotPlan {
        mode,
        mode_energy: e,
        g_l,
        g_r,
        tunneling,
        tau: PI / (SQRT_2 * tunneling),
        phi: injection_phase(qa, 1) - injection_phase(qb, 1),
        resolvability: tunneling / spacing,
        spacing,
    })
}

/// `exp(-i h t)` for the resonant three-mode model in the frame rotating at
/// `delta_s`: basis `(c_L, c_R, c_k)`, couplings `h[L,k] = x`, `h[R,k] = y`.
pub fn three_mode_propagator(x: Complex64, y: Complex64, detuning: f64, t: f64) -> [[Complex64; 3]; 3] {
    let h = [ZERO, ZERO, x, ZERO, ZERO, y, x.conj(), y.conj(), detuning.into()];
    let (vals, vecs) = crate::linalg::herm_eigen(3, &h);
    let mut u = [[ZERO; 3]; 3];
    for (k, v) in vecs.iter().enumerate() {
        let ph = Complex64::from_polar(1.0, -vals[k] * t);
        for i in 0..3 {
            for j in 0..3 {
                u[i][j] += v[i] * ph * v[j].conj();
            }
        }
    }
    u
}

/// Register amplitudes `[[LL, LR], [RL, RR]]` after time `t` under constant
/// drives, from the eigenbasis of the secular model.
pub fn secular_amplitudes(model: &SecularModel, t: f64) -> Result<[[Complex64; 2]; 2]> {
    if !matches!((&model.g_l, &model.g_r), (Drive::Constant(_), Drive::Constant(_))) {
        return Err(invalid("closed-form evolution needs constant drives"));
    }
    let m = model.dim();
    let (vals, vecs) = crate::linalg::herm_eigen(m, &model.dense(0.0));
    let mut amp = [[ZERO; 2]; 2];
    for (e, v) in vals.iter().zip(&vecs) {
        let ph = Complex64::from_polar(1.0, -e * t);
        for x in 0..2 {
            for y in 0..2 {
                amp[x][y] += v[x] * ph * v[y].conj();
            }
        }
    }
    Ok(amp)
}

/// Trace of `c_L^dag` (and the 2x2 amplitudes at `t_final`) for constant
/// drives, sampled from the eigenbasis instead of time stepping.
pub fn secular_trace(model: &SecularModel, t_final: f64, samples: usize) -> Result<TransferTrace> {
    if !matches!((&model.g_l, &model.g_r), (Drive::Constant(_), Drive::Constant(_))) {
        return Err(invalid("closed-form evolution needs constant drives"));
    }
    if samples < 2 || !(t_final >= 0.0) {
        return Err(invalid("a trace needs t_final >= 0 and at least two samples"));
    }
    let m = model.dim();
    let (vals, vecs) = crate::linalg::herm_eigen(m, &model.dense(0.0));
    let amp = |x: usize, y: usize, t: f64| -> Complex64 {
        vals.iter().zip(&vecs).map(|(e, v)| v[x] * Complex64::from_polar(1.0, -e * t) * v[y].conj()).sum()
    };
    let mut trace = TransferTrace {
        t: vec![],
        amp_l: vec![],
        amp_r: vec![],
        edge_prob: vec![],
        norm: vec![],
        watched: vec![],
        dt: t_final / (samples - 1) as f64,
        steps: 0,
        fidelity: 0.0,
        norm_drift: 0.0,
        finals: vec![],
        amplitudes: None,
    };
    for i in 0..samples {
        let t = t_final * i as f64 / (samples - 1) as f64;
        let (al, ar) = (amp(0, 0, t), amp(1, 0, t));
        trace.t.push(t);
        trace.amp_l.push(al);
        trace.amp_r.push(ar);
        trace.edge_prob.push((1.0 - al.norm_sqr() - ar.norm_sqr()).max(0.0));
        trace.norm.push(1.0);
    }
    trace.fidelity = trace.amp_r.last().map_or(0.0, |a| a.norm_sqr());
    trace.amplitudes = Some([[amp(0, 0, t_final), amp(0, 1, t_final)], [amp(1, 0, t_final), amp(1, 1, t_final)]]);
    Ok(trace)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DotOutcome {
    pub plan: DotPlan,
    pub detuning: f64,
    /// `|<c_R| U(tau) |c_L>|^2`.
    pub fidelity: f64,
    pub gate: GateReport,
}

/// Resonant transfer through one edge mode with constant couplings, the
/// register splitting offset from the mode energy by `detuning`.
pub fn run_dot(lattice: &Lattice, spectrum: &Spectrum, a: usize, b: usize, mode: usize, opts: &DotOptions, detuning: f64) -> Result<DotOutcome> {
    let plan = dot_plan(spectrum, a, b, mode, opts)?;
    let setup = RegisterSetup::new(lattice, plan.mode_energy + detuning, a, b, Drive::Constant(plan.g_l), Drive::Constant(plan.g_r))?;
    let amp = secular_amplitudes(&extend_hamiltonian(spectrum, &setup)?, plan.tau)?;
    let gate = gate_from_amplitudes(&amp);
    let report = GateReport { fidelity: gate_fidelity(&ideal_swap_gate(plan.phi), &gate), phi_measured: phase_from_gate(&gate), phi_planned: plan.phi, gate };
    Ok(DotOutcome { fidelity: amp[1][0].norm_sqr(), detuning, gate: report, plan })
}

/// Edge mode closest to `energy` that is visible at both sites.
pub fn pick_edge_mode(spectrum: &Spectrum, a: usize, b: usize, energy: f64, min_overlap: f64) -> Option<usize> {
    (0..spectrum.n_modes())
        .filter(|&k| spectrum.q_row(k)[a].norm() >= min_overlap && spectrum.q_row(k)[b].norm() >= min_overlap)
        .min_by(|&x, &y| (spectrum.eps[x] - energy).abs().total_cmp(&(spectrum.eps[y] - energy).abs()))
}

// ---------------------------------------------------------------------------
// Gates

pub type Gate = [[Complex64; 4]; 4];

/// Two-register map on `{up up, down up, up down, down down}` (L first) from
/// single-particle amplitudes. The cross terms pick up `-i`/`+i` from the
/// sector bookkeeping of the injection links; the doubly occupied entry is
/// the Slater determinant.
pub fn gate_from_amplitudes(amp: &[[Complex64; 2]; 2]) -> Gate {
    let [[ll, lr], [rl, rr]] = *amp;
    let mut g = [[ZERO; 4]; 4];
    g[0][0] = ONE;
    g[1][1] = ll;
    g[1][2] = -I * lr;
    g[2][1] = I * rl;
    g[2][2] = rr;
    g[3][3] = ll * rr - lr * rl;
    g
}

/// SWAP with the phase table `-i e^{-i phi}`, `+i e^{i phi}`, `-1`.
pub fn ideal_swap_gate(phi: f64) -> Gate {
    let mut g = [[ZERO; 4]; 4];
    g[0][0] = ONE;
    g[2][1] = -I * Complex64::from_polar(1.0, -phi);
    g[1][2] = I * Complex64::from_polar(1.0, phi);
    g[3][3] = -ONE;
    g
}

/// `phi` recovered from `M[2][1] / M[1][2] = -e^{-2 i phi}` (mod pi).
pub fn phase_from_gate(g: &Gate) -> f64 {
    let r = -(g[2][1] / g[1][2]);
    -0.5 * r.arg()
}

pub fn matmul(a: &Gate, b: &Gate) -> Gate {
    let mut c = [[ZERO; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn local_z(a: f64, b: f64) -> [Complex64; 4] {
    [ONE, Complex64::from_polar(1.0, a), Complex64::from_polar(1.0, b), Complex64::from_polar(1.0, a + b)]
}

/// `|Tr(T^dag D1 M D2)|^2 / 16` maximized over single-register z rotations
/// `D1`, `D2` by coordinate ascent; each coordinate has a closed-form optimum.
pub fn gate_fidelity(target: &Gate, m: &Gate) -> f64 {
    let overlap = |p: &[f64; 4]| -> Complex64 {
        let d1 = local_z(p[0], p[1]);
        let d2 = local_z(p[2], p[3]);
        let mut tr = ZERO;
        for i in 0..4 {
            for j in 0..4 {
                tr += target[i][j].conj() * d1[i] * m[i][j] * d2[j];
            }
        }
        tr
    };
    let mut best = 0.0f64;
    for start in 0..8 {
        let mut p = [0.0; 4];
        for (c, v) in p.iter_mut().enumerate() {
            *v = if (start >> (c % 3)) & 1 == 1 { PI / 2.0 } else { 0.0 };
        }
        p[3] += 0.37 * start as f64;
        for _ in 0..200 {
            let before = overlap(&p).norm();
            for c in 0..4 {
                // overlap = X + Y e^{i p_c}; |.| is largest for p_c = arg X - arg Y.
                let mut q0 = p;
                q0[c] = 0.0;
                let mut qm = p;
                qm[c] = PI;
                let (f0, fm) = (overlap(&q0), overlap(&qm));
                let x = 0.5 * (f0 + fm);
                let y = 0.5 * (f0 - fm);
                p[c] = if y.norm() > 1e-15 { x.arg() - y.arg() } else { p[c] };
            }
            if overlap(&p).norm() - before < 1e-14 {
                break;
            }
        }
        best = best.max(overlap(&p).norm_sqr() / 16.0);
    }
    best
}

/// Gate on four qubits `(t_L, m_L, t_R, m_R)`; index bit `q` is 1 for spin down.
type Gate16 = Vec<Vec<Complex64>>;

fn embed(g: &Gate, q1: usize, q2: usize) -> Gate16 {
    let mut out = vec![vec![ZERO; 16]; 16];
    for col in 0..16 {
        let (b1, b2) = ((col >> q1) & 1, (col >> q2) & 1);
        let sub_in = b1 + 2 * b2;
        for sub_out in 0..4 {
            let amp = g[sub_out][sub_in];
            if amp == ZERO {
                continue;
            }
            let row = (col & !(1 << q1) & !(1 << q2)) | ((sub_out & 1) << q1) | ((sub_out >> 1) << q2);
            out[row][col] += amp;
        }
    }
    out
}

fn mul16(a: &Gate16, b: &Gate16) -> Gate16 {
    let mut c = vec![vec![ZERO; 16]; 16];
    for i in 0..16 {
        for k in 0..16 {
            if a[i][k] == ZERO {
                continue;
            }
            for j in 0..16 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

pub fn swap_gate() -> Gate {
    let mut g = [[ZERO; 4]; 4];
    g[0][0] = ONE;
    g[1][2] = ONE;
    g[2][1] = ONE;
    g[3][3] = ONE;
    g
}

/// CNOT with the first qubit (lower index bit) as control.
pub fn cnot_gate() -> Gate {
    let mut g = [[ZERO; 4]; 4];
    g[0][0] = ONE;
    g[2][2] = ONE;
    g[3][1] = ONE;
    g[1][3] = ONE;
    g
}

/// Remote CNOT from memory `m_L` to memory `m_R`: local SWAP into the transfer
/// qubit, transfer gate, local CNOT, transfer back, local SWAP. Returns the
/// induced map on `(m_L, m_R)` with both transfer qubits starting and ending
/// spin up, plus the weight that leaked out of that subspace.
pub fn remote_cnot(transfer: &Gate) -> (Gate, f64) {
    let (tl, ml, tr, mr) = (0, 1, 2, 3);
    let seq = [
        embed(&swap_gate(), tl, ml),
        embed(transfer, tl, tr),
        embed(&cnot_gate(), tr, mr),
        embed(transfer, tl, tr),
        embed(&swap_gate(), tl, ml),
    ];
    let mut total = seq[0].clone();
    for g in &seq[1..] {
        total = mul16(g, &total);
    }
    let mut out = [[ZERO; 4]; 4];
    let index = |bl: usize, br: usize| (bl << ml) | (br << mr);
    let mut leak = 0.0;
    for c in 0..4 {
        let col = index(c & 1, c >> 1);
        let mut kept = 0.0;
        for r in 0..4 {
            out[r][c] = total[index(r & 1, r >> 1)][col];
            kept += out[r][c].norm_sqr();
        }
        leak += 1.0 - kept;
    }
    (out, leak / 4.0)
}

// ---------------------------------------------------------------------------
// Droplet regime

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Profile {
    /// `|f|^2` is a normal density with standard deviation `sigma` at `center`.
    Gaussian { center: f64, sigma: f64 },
    /// `f = sqrt(eta) exp(-eta t / 2)` for `t >= 0`.
    Exponential { eta: f64 },
}

impl Profile {
    pub fn intensity(&self, t: f64) -> f64 {
        match *self {
            Profile::Gaussian { center, sigma } => {
                let z = (t - center) / sigma;
                (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
            }
            Profile::Exponential { eta } => {
                if t < 0.0 {
                    0.0
                } else {
                    eta * (-eta * t).exp()
                }
            }
        }
    }

    /// `int_t^inf |f|^2`.
    pub fn tail(&self, t: f64) -> f64 {
        match *self {
            Profile::Gaussian { center, sigma } => 0.5 * statrs::function::erf::erfc((t - center) / (sigma * SQRT_2)),
            Profile::Exponential { eta } => {
                if t < 0.0 {
                    1.0
                } else {
                    (-eta * t).exp()
                }
            }
        }
    }

    /// Full width at half maximum of the spectral power `|f(omega)|^2`.
    pub fn bandwidth(&self) -> f64 {
        match *self {
            // |f|^2 with std sigma -> f has std sigma sqrt2 -> power has std 1/(2 sigma).
            Profile::Gaussian { sigma, .. } => 2.0 * (2.0 * 2f64.ln()).sqrt() / (2.0 * sigma),
            // Lorentzian of half width eta / 2.
            Profile::Exponential { eta } => eta,
        }
    }
}

/// Spectral weight of a site per unit energy, `sum_k |Q_{k,s}|^2 delta(E - eps_k)`,
/// smoothed as `|Q_{k,s}|^2` over the local mode spacing and interpolated
/// linearly between the modes bracketing `energy`.
pub fn local_density(spectrum: &Spectrum, site: usize, energy: f64) -> Result<f64> {
    let e = &spectrum.eps;
    let n = e.len();
    let hi = e.partition_point(|&x| x < energy);
    if hi < 2 || hi + 1 >= n {
        return Err(precondition(format!("energy {energy} is too close to the end of the spectrum")));
    }
    let rho = |k: usize| spectrum.q_row(k)[site].norm_sqr() / (0.5 * (e[k + 1] - e[k - 1]));
    let lo = hi - 1;
    let f = (energy - e[lo]) / (e[hi] - e[lo]);
    Ok(rho(lo) * (1.0 - f) + rho(hi) * f)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WavepacketPlan {
    pub profile: Profile,
    /// Edge group velocity at the carrier energy.
    pub v: f64,
    /// Spectral weight of the emitting site per unit energy.
    pub rho_a: f64,
    pub rho_b: f64,
    /// Effective edge length `1 / (2 pi v rho_a)` of a plane-wave edge with
    /// the same emission rate.
    pub edge_length: f64,
    /// Chiral arc length from `a` to `b`.
    pub distance: f64,
    pub g_max: f64,
    pub residual: f64,
    pub dt: f64,
    pub t_end: f64,
    /// `h(t) = -ln sqrt(int_t^inf |f|^2)`, the shaping accumulator.
    pub h: Vec<f64>,
    pub emission: Pulse,
    pub retrieval: Pulse,
}

/// Builds the plan: emission pulse from the target profile, retrieval pulse by
/// time reversal about the arrival time.
#[allow(clippy::too_many_arguments)]
pub fn wavepacket_plan(profile: Profile, v: f64, rho_a: f64, rho_b: f64, distance: f64, g_max: f64, residual: f64, dt: f64, t_end: f64) -> Result<WavepacketPlan> {
    if !(v > 0.0) || !(rho_a > 0.0) || !(rho_b > 0.0) {
        return Err(invalid("wavepacket plan needs positive v and local densities"));
    }
    let n = (t_end / dt).round() as usize + 1;
    let h = (0..n).map(|i| -0.5 * profile.tail(i as f64 * dt).max(1e-300).ln()).collect();
    let mut plan = WavepacketPlan {
        profile,
        v,
        rho_a,
        rho_b,
        edge_length: 1.0 / (2.0 * PI * v * rho_a),
        distance,
        g_max,
        residual,
        dt,
        t_end,
        h,
        emission: Pulse { dt, samples: vec![], g_max, residual, cap_dominated: false },
        retrieval: Pulse { dt, samples: vec![], g_max, residual, cap_dominated: false },
    };
    plan.emission = shape_emission(&plan)?;
    plan.retrieval = shape_retrieval(&plan, None)?;
    Ok(plan)
}

impl WavepacketPlan {
    /// Replaces the emission pulse and re-derives the retrieval pulse.
    pub fn with_emission(&self, emission: Pulse) -> Result<Self> {
        let mut out = self.clone();
        out.emission = emission;
        out.retrieval = shape_retrieval(&out, None)?;
        Ok(out)
    }

    /// Emission coupling in the plane-wave normalization, `sqrt(v) f / sqrt(tail)`.
    pub fn plane_wave_amplitude(&self, t: f64) -> f64 {
        let tail = self.profile.tail(t);
        if tail <= 0.0 {
            return 0.0;
        }
        (self.v * self.profile.intensity(t) / tail).sqrt()
    }

    /// Center of the arriving packet at `b`.
    pub fn arrival_time(&self) -> f64 {
        self.emission_center() + self.distance / self.v
    }

    pub fn emission_center(&self) -> f64 {
        match self.profile {
            Profile::Gaussian { center, .. } => center,
            Profile::Exponential { eta } => 1.0 / eta,
        }
    }
}

/// Coupling that empties the register with rate `|f|^2 / tail`, converted to
/// spin units through the golden-rule rate `4 pi g^2 rho_a`; capped at
/// `g_max` and switched off once the tail drops below the residual.
pub fn shape_emission(plan: &WavepacketPlan) -> Result<Pulse> {
    let n = (plan.t_end / plan.dt).round() as usize + 1;
    let mut samples = Vec::with_capacity(n);
    let mut capped_weight = 0.0;
    for i in 0..n {
        let t = i as f64 * plan.dt;
        let tail = plan.profile.tail(t);
        if tail < plan.residual {
            samples.push(0.0);
            continue;
        }
        let rate = plan.profile.intensity(t) / tail;
        let g = (rate / (4.0 * PI * plan.rho_a)).sqrt();
        if g > plan.g_max {
            capped_weight += plan.profile.intensity(t) * plan.dt;
        }
        samples.push(g.min(plan.g_max));
    }
    if samples.iter().all(|&g| g == 0.0) {
        return Err(invalid("target profile has no support inside the time window"));
    }
    Ok(Pulse { dt: plan.dt, samples, g_max: plan.g_max, residual: plan.residual, cap_dominated: capped_weight > 1e-2 })
}

/// Closed-loop correction of the emission pulse. The golden-rule pulse
/// assumes a memoryless edge; a band of finite width lags the emission rate
/// behind a ramping coupling. Each pass runs `build(pulse)` with only the
/// emitter driven, measures the hazard `-d ln p_L / dt` and rescales
/// `g(t)` by `sqrt(target / measured)`. Returns the refined pulse and the
/// profile error of the last measured run.
pub fn refine_emission<D: Dynamics, F: Fn(&Pulse) -> Result<D>>(plan: &WavepacketPlan, build: F, passes: usize) -> Result<(Pulse, f64)> {
    let mut pulse = plan.emission.clone();
    let t_stop = pulse.active_until();
    let mut opts = EvolveOptions::new(t_stop);
    opts.sample_dt = 0.25;
    let mut error = f64::NAN;
    for pass in 0..=passes {
        let trace = evolve(&build(&pulse)?, &opts, false, &[])?;
        error = packet_diagnostics(&trace, &plan.profile, t_stop).profile_error;
        if pass == passes {
            break;
        }
        let p: Vec<f64> = trace.amp_l.iter().map(|a| a.norm_sqr()).collect();
        // Correction factors at interval midpoints, where the register still
        // holds enough weight to measure a rate.
        let mut knots = Vec::new();
        for i in 1..trace.t.len() {
            if p[i] < 10.0 * plan.residual || p[i - 1] <= p[i] {
                continue;
            }
            let tm = 0.5 * (trace.t[i] + trace.t[i - 1]);
            let measured = (p[i - 1] / p[i]).ln() / (trace.t[i] - trace.t[i - 1]);
            let tail = plan.profile.tail(tm);
            if tail <= 0.0 {
                continue;
            }
            let target = plan.profile.intensity(tm) / tail;
            knots.push((tm, (target / measured).sqrt().clamp(0.5, 2.0)));
        }
        if knots.is_empty() {
            break;
        }
        for (i, g) in pulse.samples.iter_mut().enumerate() {
            let t = i as f64 * pulse.dt;
            let k = knots.partition_point(|&(x, _)| x < t);
            let factor = match k {
                0 => knots[0].1,
                k if k == knots.len() => knots[k - 1].1,
                k => {
                    let ((x0, f0), (x1, f1)) = (knots[k - 1], knots[k]);
                    f0 + (f1 - f0) * (t - x0) / (x1 - x0)
                }
            };
            *g = (*g * factor).min(pulse.g_max);
        }
    }
    Ok((pulse, error))
}

/// `g_R(T + x) = g_L(t0 - x) sqrt(rho_a / rho_b)`: the emission pulse reversed
/// about the packet center `t0` and delayed to the arrival time `T`.
/// `arrival` overrides the chiral arrival time; asking for an arrival earlier
/// than the packet can travel the chiral arc is an error.
pub fn shape_retrieval(plan: &WavepacketPlan, arrival: Option<f64>) -> Result<Pulse> {
    let natural = plan.arrival_time();
    let t_arr = arrival.unwrap_or(natural);
    let width = match plan.profile {
        Profile::Gaussian { sigma, .. } => 3.0 * sigma,
        Profile::Exponential { eta } => 3.0 / eta,
    };
    if t_arr < natural - width {
        return Err(precondition(format!(
            "receiver is {:.3} downstream along the chiral edge; the packet cannot arrive by t = {t_arr:.3}",
            plan.distance
        )));
    }
    let mirror = 0.5 * (plan.emission_center() + t_arr);
    Ok(mirror_pulse(&plan.emission, mirror, (plan.rho_a / plan.rho_b).sqrt(), plan.g_max))
}

/// Time reverse of `p` about `t_mirror`, scaled and capped.
pub fn mirror_pulse(p: &Pulse, t_mirror: f64, scale: f64, g_max: f64) -> Pulse {
    let samples = (0..p.samples.len()).map(|i| (scale * p.at(2.0 * t_mirror - i as f64 * p.dt)).min(g_max)).collect();
    Pulse { dt: p.dt, samples, g_max, residual: p.residual, cap_dominated: p.cap_dominated }
}

/// Observables of an emission/absorption run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PacketDiagnostics {
    /// Relative L2 error of `sqrt(-dp_L/dt)` against `|f|`.
    pub profile_error: f64,
    pub emitted: f64,
    pub emission_centroid: f64,
    pub absorption_centroid: f64,
    pub delay: f64,
}

/// The profile comparison runs up to `emission_end`, when the emitter is
/// switched off; the truncated tail of the target is excluded.
pub fn packet_diagnostics(trace: &TransferTrace, profile: &Profile, emission_end: f64) -> PacketDiagnostics {
    let pl: Vec<f64> = trace.amp_l.iter().map(|a| a.norm_sqr()).collect();
    let pr: Vec<f64> = trace.amp_r.iter().map(|a| a.norm_sqr()).collect();
    let (mut num, mut den) = (0.0, 0.0);
    let (mut ce, mut we, mut ca, mut wa) = (0.0, 0.0, 0.0, 0.0);
    for i in 1..trace.t.len() {
        let h = trace.t[i] - trace.t[i - 1];
        let tm = 0.5 * (trace.t[i] + trace.t[i - 1]);
        let out = ((pl[i - 1] - pl[i]) / h).max(0.0);
        let inc = ((pr[i] - pr[i - 1]) / h).max(0.0);
        if tm <= emission_end {
            let target = profile.intensity(tm).sqrt();
            num += (out.sqrt() - target).powi(2) * h;
            den += target * target * h;
        }
        ce += tm * out * h;
        we += out * h;
        ca += tm * inc * h;
        wa += inc * h;
    }
    let ec = if we > 0.0 { ce / we } else { f64::NAN };
    let ac = if wa > 0.0 { ca / wa } else { f64::NAN };
    PacketDiagnostics {
        profile_error: (num / den).sqrt(),
        emitted: pl[0] - pl[pl.len() - 1],
        emission_centroid: ec,
        absorption_centroid: ac,
        delay: ac - ec,
    }
}

/// Sites of every cell whose dangling site lies on the chiral arc behind `a`
/// at distances in `[skip, reach]`.
pub fn upstream_region(lattice: &Lattice, a: usize, clockwise: bool, skip: f64, reach: f64) -> Vec<usize> {
    let mut cells = Vec::new();
    for d in &lattice.dangling {
        // Behind `a` along the chiral direction = ahead against it.
        if let Some(back) = chiral_distance(lattice, d.site, a, clockwise) {
            if back >= skip && back <= reach {
                cells.push(lattice.sites[d.site].cell);
            }
        }
    }
    (0..lattice.n_sites()).filter(|&s| cells.contains(&lattice.sites[s].cell)).collect()
}

/// Arc length travelled from `a` to `b` along the chiral direction. The
/// stored boundary walks run counterclockwise.
pub fn chiral_distance(lattice: &Lattice, a: usize, b: usize, clockwise: bool) -> Option<f64> {
    lattice.boundary_arc(a, b, !clockwise)
}

/// Direction in which particle-like edge excitations circulate a droplet.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Circulation {
    pub clockwise: bool,
    /// Weight found `distance` ahead of the start in each direction.
    pub weight_cw: f64,
    pub weight_ccw: f64,
}

/// Launches the in-gap particle part of the dangling Majorana at `site` and
/// propagates it exactly with the mode energies for `distance / velocity`.
pub fn circulation(lattice: &Lattice, spectrum: &Spectrum, site: usize, gap: f64, distance: f64, velocity: f64) -> Result<Circulation> {
    if lattice.boundary_position(site).is_none() {
        return Err(invalid(format!("site {site} is not on a boundary")));
    }
    let t = distance / velocity;
    let modes: Vec<usize> = (0..spectrum.n_modes()).filter(|&k| spectrum.eps[k] < gap).collect();
    // Weight on the cells of dangling sites within one cell of `distance`.
    let weight = |clockwise: bool| -> f64 {
        let near: Vec<[usize; 2]> = lattice
            .dangling
            .iter()
            .filter(|d| chiral_distance(lattice, site, d.site, clockwise).is_some_and(|x| (x - distance).abs() <= 1.5))
            .map(|d| lattice.sites[d.site].cell)
            .collect();
        (0..lattice.n_sites())
            .filter(|&j| near.contains(&lattice.sites[j].cell))
            .map(|j| {
                let amp: Complex64 = modes
                    .iter()
                    .map(|&k| {
                        let q = spectrum.q_row(k);
                        q[site] * Complex64::from_polar(1.0, -spectrum.eps[k] * t) * q[j].conj()
                    })
                    .sum();
                amp.norm_sqr()
            })
            .sum()
    };
    let (cw, ccw) = (weight(true), weight(false));
    Ok(Circulation { clockwise: cw > ccw, weight_cw: cw, weight_ccw: ccw })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Secular,
    Full,
}

/// Builds the requested engine for `setup` and evolves it.
pub fn run_setup(engine: Engine, h: &QuadraticHamiltonian, spectrum: &Spectrum, setup: &RegisterSetup, opts: &EvolveOptions, both: bool, watch: &[usize]) -> Result<TransferTrace> {
    match engine {
        Engine::Secular => evolve(&extend_hamiltonian(spectrum, setup)?, opts, both, &[]),
        Engine::Full => evolve(&full_hamiltonian(h, setup)?, opts, both, watch),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateReport {
    pub gate: Gate,
    pub fidelity: f64,
    pub phi_planned: f64,
    pub phi_measured: f64,
}

/// Two-register gate of a run that evolved both creation operators, compared
/// with the ideal phase table for `phi`.
pub fn gate_extract(trace: &TransferTrace, phi: f64) -> Result<GateReport> {
    let amp = trace.amplitudes.as_ref().ok_or_else(|| precondition("gate extraction needs both registers evolved"))?;
    let gate = gate_from_amplitudes(amp);
    Ok(GateReport { fidelity: gate_fidelity(&ideal_swap_gate(phi), &gate), phi_measured: phase_from_gate(&gate), phi_planned: phi, gate })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DropletOptions {
    pub delta_s: f64,
    /// Standard deviation of `|f|^2`.
    pub sigma: f64,
    /// Coupling cap as a fraction of `delta_s`.
    pub g_max_fraction: f64,
    pub residual: f64,
    pub pulse_dt: f64,
    pub refine_passes: usize,
    pub sample_dt: f64,
}

impl Default for DropletOptions {
    fn default() -> Self {
        Self { delta_s: 0.25, sigma: 20.0, g_max_fraction: 1.0, residual: 1e-4, pulse_dt: 0.01, refine_passes: 4, sample_dt: 0.5 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DropletOutcome {
    pub plan: WavepacketPlan,
    pub clockwise: bool,
    pub open_loop_error: f64,
    pub diagnostics: PacketDiagnostics,
    /// Largest weight seen on the upstream side of the emitter.
    pub leakage: f64,
    pub trace: TransferTrace,
}

/// Wavepacket transfer from `a` to `b` on a droplet. `v` is the edge velocity
/// used for planning; the circulation sense is measured from the spectrum.
/// `arrival` overrides the planned arrival time.
#[allow(clippy::too_many_arguments)]
pub fn run_droplet(lattice: &Lattice, h: &QuadraticHamiltonian, spectrum: &Spectrum, a: usize, b: usize, v: f64, gap: f64, opts: &DropletOptions, arrival: Option<f64>) -> Result<DropletOutcome> {
    let circ = circulation(lattice, spectrum, a, gap, 10.0, v)?;
    let distance = chiral_distance(lattice, a, b, circ.clockwise).ok_or_else(|| invalid("injection sites are on different boundaries"))?;
    let profile = Profile::Gaussian { center: 5.0 * opts.sigma, sigma: opts.sigma };
    let t0 = 5.0 * opts.sigma;
    let t_arr = arrival.unwrap_or(t0 + distance / v);
    let t_end = t_arr + t0;
    let (rho_a, rho_b) = (local_density(spectrum, a, opts.delta_s)?, local_density(spectrum, b, opts.delta_s)?);
    let g_max = opts.g_max_fraction * opts.delta_s;
    let plan = wavepacket_plan(profile, v, rho_a, rho_b, distance, g_max, opts.residual, opts.pulse_dt, t_end)?;
    let base = RegisterSetup::new(lattice, opts.delta_s, a, b, Drive::Constant(0.0), Drive::Constant(0.0))?;
    let emit_only = |p: &Pulse| full_hamiltonian(h, &base.with_drives(Drive::Pulse(p.clone()), Drive::Constant(0.0)));
    let (_, open_loop_error) = refine_emission(&plan, emit_only, 0)?;
    let (refined, _) = refine_emission(&plan, emit_only, opts.refine_passes)?;
    let mut plan = plan.with_emission(refined)?;
    if let Some(t) = arrival {
        let mirror = 0.5 * (plan.emission_center() + t);
        plan.retrieval = mirror_pulse(&plan.emission, mirror, (plan.rho_a / plan.rho_b).sqrt(), g_max);
    }
    let setup = base.with_drives(Drive::Pulse(plan.emission.clone()), Drive::Pulse(plan.retrieval.clone()));
    // Upstream cells the forward-moving packet cannot reach before the end.
    let width = 4.0 * v * opts.sigma * SQRT_2;
    let perimeter = lattice.boundaries.iter().find(|bd| bd.sites.contains(&a)).map_or(0.0, |bd| bd.perimeter);
    let reach = (perimeter - v * t_end - width).min(0.5 * (perimeter - distance));
    let watch = upstream_region(lattice, a, circ.clockwise, 3.0, reach);
    let mut eo = EvolveOptions::new(t_end);
    eo.sample_dt = opts.sample_dt;
    let trace = evolve(&full_hamiltonian(h, &setup)?, &eo, false, &watch)?;
    let diagnostics = packet_diagnostics(&trace, &plan.profile, plan.emission.active_until());
    let leakage = trace.watched.iter().fold(0.0, |m: f64, x| m.max(*x));
    Ok(DropletOutcome { plan, clockwise: circ.clockwise, open_loop_error, diagnostics, leakage, trace })
}

/// Summary written next to a trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub regime: String,
    pub engine: String,
    pub fidelity: f64,
    pub tau: Option<f64>,
    pub arrival_time: Option<f64>,
    pub phi: Option<f64>,
    pub gate_fidelity: Option<f64>,
    pub norm_drift: f64,
    pub plan: serde_json::Value,
    pub config_sha256: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fermion::{assemble, diagonalize};
    use crate::gauge::ground_gauge;
    use crate::lattice::{build_lattice, Geometry};

    fn small() -> (Lattice, QuadraticHamiltonian, Spectrum) {
        let lat = build_lattice(&Geometry::droplet(3, 8)).unwrap();
        let h = assemble(&lat, &ground_gauge(&lat), 1.0).unwrap();
        let s = diagonalize(&h).unwrap();
        (lat, h, s)
    }

    #[test]
    fn setup_validation() {
        let (lat, _, _) = small();
        let a = lat.dangling[0].site;
        let b = lat.dangling[3].site;
        assert!(RegisterSetup::new(&lat, 0.2, a, b, Drive::Constant(0.01), Drive::Constant(0.01)).is_ok());
        let interior = (0..lat.n_sites()).find(|&s| lat.coordination(s) == 3).unwrap();
        assert!(RegisterSetup::new(&lat, 0.2, interior, b, Drive::Constant(0.01), Drive::Constant(0.01)).is_err());
        assert!(RegisterSetup::new(&lat, 0.2, a, b, Drive::Constant(0.3), Drive::Constant(0.01)).is_err());
        let s = RegisterSetup::new(&lat, 0.2, a, b, Drive::Constant(0.0), Drive::Constant(0.0)).unwrap();
        assert_eq!(Some(s.flavor_beta), lat.dangling_flavor(a));
    }

    #[test]
    fn secular_hamiltonian_structure() {
        let (lat, _, s) = small();
        let (a, b) = (lat.dangling[0].site, lat.dangling[5].site);
        let setup = RegisterSetup::new(&lat, 0.2, a, b, Drive::Constant(0.03), Drive::Constant(0.02)).unwrap();
        let m = extend_hamiltonian(&s, &setup).unwrap();
        let h = m.dense(0.0);
        let d = m.dim();
        let herm = (0..d * d).map(|k| (h[k] - h[(k % d) * d + k / d].conj()).norm()).fold(0.0, f64::max);
        assert!(herm < 1e-12);
        let col_l: f64 = (2..d).map(|r| h[r].norm_sqr()).sum::<f64>().sqrt();
        let expect: f64 = (0..s.n_modes()).map(|k| 2.0 * 0.03f64.powi(2) * s.q_row(k)[a].norm_sqr()).sum::<f64>().sqrt();
        assert!((col_l - expect).abs() < 1e-12);
        let idle = extend_hamiltonian(&s, &setup.with_drives(Drive::Constant(0.0), Drive::Constant(0.0))).unwrap().dense(0.0);
        assert!((2..d).all(|r| idle[r] == ZERO && idle[d + r] == ZERO));
    }

    #[test]
    fn eigenvector_evolution_is_stationary() {
        // Decoupled registers: c_L^dag only picks up exp(-i delta t).
        let (lat, h, s) = small();
        let (a, b) = (lat.dangling[0].site, lat.dangling[5].site);
        let setup = RegisterSetup::new(&lat, 0.2, a, b, Drive::Constant(0.0), Drive::Constant(0.0)).unwrap();
        let opts = EvolveOptions::new(50.0);
        for tr in [evolve(&extend_hamiltonian(&s, &setup).unwrap(), &opts, false, &[]).unwrap(), evolve(&full_hamiltonian(&h, &setup).unwrap(), &opts, false, &[]).unwrap()] {
            for (t, al) in tr.t.iter().zip(&tr.amp_l) {
                assert!((al - Complex64::from_polar(1.0, -0.2 * t)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn engines_differ_at_second_order() {
        let (lat, h, s) = small();
        let (a, b) = (lat.dangling[0].site, lat.dangling[5].site);
        let gap = |g: f64| {
            let setup = RegisterSetup::new(&lat, 0.25, a, b, Drive::Constant(g), Drive::Constant(g)).unwrap();
            let opts = EvolveOptions::new(200.0);
            let sec = evolve(&extend_hamiltonian(&s, &setup).unwrap(), &opts, true, &[]).unwrap();
            let full = evolve(&full_hamiltonian(&h, &setup).unwrap(), &opts, true, &[]).unwrap();
            assert!(sec.norm_drift < 1e-8 && full.norm_drift < 1e-8);
            let (x, y) = (sec.amplitudes.unwrap(), full.amplitudes.unwrap());
            (0..4).map(|k| (x[k / 2][k % 2] - y[k / 2][k % 2]).norm()).fold(0.0, f64::max)
        };
        let (d1, d2) = (gap(0.01), gap(0.005));
        assert!(d1 < 0.05, "{d1}");
        assert!((d1 / d2).log2() > 1.7, "{d1} {d2}");
    }

    #[test]
    fn three_mode_maps_left_to_right() {
        let (t, pa, pb) = (0.01, 0.7, -1.9);
        let tau = PI / (SQRT_2 * t);
        let u = three_mode_propagator(Complex64::from_polar(t, pa), Complex64::from_polar(t, pb), 0.0, tau);
        let phi = pa - pb;
        // Column 0 is the image of c_L^dag.
        assert!((u[1][0] + Complex64::from_polar(1.0, -phi)).norm() < 1e-12);
        assert!(u[0][0].norm() < 1e-12);
        assert!((u[2][2] + ONE).norm() < 1e-12);
        let g = gate_from_amplitudes(&[[u[0][0], u[0][1]], [u[1][0], u[1][1]]]);
        let ideal = ideal_swap_gate(phi);
        for i in 0..4 {
            for j in 0..4 {
                assert!((g[i][j] - ideal[i][j]).norm() < 1e-12);
            }
        }
        assert!((phase_from_gate(&g) - phi).rem_euclid(PI).min(PI - (phase_from_gate(&g) - phi).rem_euclid(PI)) < 1e-12);
    }

    #[test]
    fn dot_plan_balancing() {
        let (lat, _, s) = small();
        let (a, b) = (lat.dangling[0].site, lat.dangling[5].site);
        let k = (0..s.n_modes()).find(|&k| s.eps[k] > 0.15 && s.q_row(k)[a].norm() > 0.01 && s.q_row(k)[b].norm() > 0.01).unwrap();
        let p = dot_plan(&s, a, b, k, &DotOptions::default()).unwrap();
        assert!((p.g_l * s.q_row(k)[a].norm() - p.g_r * s.q_row(k)[b].norm()).abs() < 1e-15);
        assert!((p.tau * SQRT_2 * p.tunneling - PI).abs() < 1e-12);
        let half = DotOptions { ratio: 0.05, ..DotOptions::default() };
        let q = dot_plan(&s, a, b, k, &half).unwrap();
        assert!((q.tau / p.tau - 2.0).abs() < 1e-9 || p.tunneling < 0.1 * p.spacing * (1.0 - 1e-12));
        let same = dot_plan(&s, a, a, k, &DotOptions::default()).unwrap();
        assert_eq!(same.g_l, same.g_r);
        let interior = (0..lat.n_sites()).find(|&x| s.q_row(k)[x].norm() < 1e-6);
        if let Some(x) = interior {
            assert!(dot_plan(&s, x, b, k, &DotOptions::default()).is_err());
        }
    }

    #[test]
    fn identity_gate_and_fidelity() {
        let g = gate_from_amplitudes(&[[ONE, ZERO], [ZERO, ONE]]);
        let mut id = [[ZERO; 4]; 4];
        for (i, row) in id.iter_mut().enumerate() {
            row[i] = ONE;
        }
        assert_eq!(g, id);
        assert!((gate_fidelity(&id, &g) - 1.0).abs() < 1e-12);
        // Local z rotations are free.
        let phased = gate_from_amplitudes(&[[Complex64::from_polar(1.0, 0.4), ZERO], [ZERO, Complex64::from_polar(1.0, -1.3)]]);
        assert!((gate_fidelity(&id, &phased) - 1.0).abs() < 1e-10);
        let ideal = ideal_swap_gate(0.3);
        assert!((gate_fidelity(&ideal, &ideal_swap_gate(1.1)) - 1.0).abs() < 1e-10);
        assert!(gate_fidelity(&ideal, &id) < 0.3);
    }

    #[test]
    fn remote_cnot_composition() {
        for phi in [0.0, 0.8, -2.2] {
            let (g, leak) = remote_cnot(&ideal_swap_gate(phi));
            assert!(leak < 1e-12);
            assert!((gate_fidelity(&cnot_gate(), &g) - 1.0).abs() < 1e-10, "phi {phi}");
        }
        assert!(gate_fidelity(&cnot_gate(), &remote_cnot(&swap_gate()).0) > 0.999);
    }

    #[test]
    fn exponential_profile_gives_constant_coupling() {
        let plan = wavepacket_plan(Profile::Exponential { eta: 0.05 }, 0.25, 0.3, 0.3, 10.0, 1.0, 1e-4, 0.5, 300.0).unwrap();
        for t in [0.0, 10.0, 77.0, 150.0] {
            assert!((plan.plane_wave_amplitude(t) - (0.25f64 * 0.05).sqrt()).abs() < 1e-12);
        }
        let g0 = plan.emission.samples[0];
        let cut = (1e4f64.ln() / 0.05 / 0.5) as usize;
        assert!(plan.emission.samples[..cut].iter().all(|&g| (g - g0).abs() < 1e-12));
        assert!(plan.emission.samples[cut + 2..].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gaussian_retrieval_is_mirror_image() {
        let prof = Profile::Gaussian { center: 100.0, sigma: 20.0 };
        let plan = wavepacket_plan(prof, 0.25, 0.3, 0.3, 40.0, 0.3, 1e-4, 0.5, 600.0).unwrap();
        let t_arr = plan.arrival_time();
        for x in [-60.0, -10.0, 0.0, 50.0, 70.0] {
            assert!((plan.retrieval.at(t_arr + x) - plan.emission.at(100.0 - x)).abs() < 1e-12);
        }
        assert!(!plan.emission.cap_dominated);
        assert!(shape_retrieval(&plan, Some(plan.emission_center() + 1.0)).is_err());
        let tail = prof.tail(0.0) - plan.residual;
        assert!((tail - (1.0 - 1e-4)).abs() < 1e-4);
    }

    #[test]
    fn pulse_interpolation() {
        let p = Pulse { dt: 0.5, samples: vec![0.0, 1.0, 2.0], g_max: 3.0, residual: 0.0, cap_dominated: false };
        assert_eq!(p.at(0.25), 0.5);
        assert_eq!(p.at(1.0), 2.0);
        assert_eq!(p.at(1.2), 0.0);
        assert_eq!(p.at(-0.1), 0.0);
    }
}
