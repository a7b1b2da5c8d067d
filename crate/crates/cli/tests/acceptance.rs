//! Acceptance suite. Runs every criterion, prints one line each, and fails
//! when a check fails that is not listed as a known gap. Known gaps are
//! printed as FAIL all the same.

use std::f64::consts::{PI, SQRT_2};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use chiral_core::fermion::*;
use chiral_core::gauge::*;
use chiral_core::lattice::*;
use chiral_core::noise::*;
use chiral_core::oracle::*;
use chiral_core::transfer::*;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const GAP: f64 = 0.4569;
const V_EDGE: f64 = 0.25;

struct Check {
    what: String,
    pass: bool,
    known_gap: bool,
}

fn check(what: impl Into<String>, pass: bool) -> Check {
    Check { what: what.into(), pass, known_gap: false }
}

/// A check that is expected to fail; see the decisions ledger.
fn known_gap(what: impl Into<String>, pass: bool) -> Check {
    Check { what: what.into(), pass, known_gap: true }
}

type Outcome = Result<Vec<Check>, String>;

fn e(x: impl std::fmt::Display) -> String {
    x.to_string()
}

fn bands_and_edge() -> Outcome {
    let lat = build_lattice(&Geometry::cylinder(40, 61)).map_err(e)?;
    let g = ground_gauge(&lat);
    let bands = band_structure(&lat, &g, 1.0, &BandOptions::default()).map_err(e)?;
    let gap = bulk_gap(&bands);
    let counts: Vec<usize> = (0..bands.ky.len()).map(|k| bands.bulk_bands(k, 0.05).len()).collect();
    let three = counts.iter().filter(|&&c| c == 3).count();
    let modal = (0..=8).max_by_key(|&c| counts.iter().filter(|&&x| x == c).count()).unwrap();
    let cross = edge_crossing(&lat, &g, 1.0).map_err(e)?;
    Ok(vec![
        check(format!("gap {gap:.4} = 0.46 +- 0.01"), (gap - 0.46).abs() <= 0.01),
        check(format!("{modal} bulk bands at most momenta ({three}/{} have 3)", counts.len()), modal == 3),
        check(format!("crossing |ky - pi| = {:.1e} <= 0.1", (cross.ky - PI).abs()), (cross.ky - PI).abs() <= 0.1),
    ])
}

fn vortex_gaps() -> Outcome {
    let torus = build_lattice(&Geometry::torus(16, 16)).map_err(e)?;
    let cyl = build_lattice(&Geometry::cylinder(16, 16)).map_err(e)?;
    let mut out = Vec::new();
    for (kind, target) in [(PlaquetteKind::Triangle, 0.17), (PlaquetteKind::Dodecagon, 0.14)] {
        let t = vortex_gap(&torus, 1.0, kind, &[4, 5, 6, 7, 8], 1e-3).map_err(e)?;
        let c = vortex_gap(&cyl, 1.0, kind, &[4, 5, 6], 1e-3).map_err(e)?;
        let name = format!("{kind:?}").to_lowercase();
        out.push(check(format!("{name} {:.4} = {target} +- 0.02", t.gap), (t.gap - target).abs() <= 0.02 && t.converged));
        out.push(check(format!("{name} torus vs cylinder {:.1e} < 0.01", (t.gap - c.gap).abs()), (t.gap - c.gap).abs() < 0.01));
    }
    Ok(out)
}

fn oracle_equivalence() -> Outcome {
    let lat = build_lattice(&Geometry::droplet(3, 3)).map_err(e)?;
    let pair = lat.dangling_pairs(&[]).into_iter().find(|p| p.path_sites.len() == 2).ok_or("no short dangling pair")?;
    let pair_cell: Vec<usize> = (0..lat.n_sites()).filter(|&s| lat.sites[s].cell == lat.sites[pair.a].cell).collect();
    let cell = SpinCluster::from_fragment(&lat, &[0, 1, 2, 3, 4, 5], 1.0).map_err(e)?;
    let clusters = vec![
        ("cell", cell.clone()),
        ("two cells", SpinCluster::from_fragment(&lat, &[0, 1, 2, 3, 4, 5, 9, 10, 11, 6], 1.0).map_err(e)?),
        ("dangling pair", SpinCluster::from_fragment(&lat, &pair_cell, 1.0).map_err(e)?),
        ("registers", cell.with_registers(1, 2, 0.3, 0.05, 0.04).map_err(e)?),
    ];
    let mut out = Vec::new();
    let has_pair = !clusters[2].1.pairing.is_empty();
    out.push(check("one cluster carries a dangling pair", has_pair));
    for (name, c) in &clusters {
        let r = compare_spectra(c).map_err(e)?;
        let sec = sector_resolved_mismatch(c).map_err(e)?;
        let worst = r.max_mismatch.max(sec);
        out.push(check(format!("{name} ({} spins) mismatch {worst:.1e}, dim {}", c.n_spins, r.dimension), worst < 1e-8 && r.dimension == 1 << c.n_spins && c.n_spins <= 12));
    }
    Ok(out)
}

fn particle_hole() -> Outcome {
    let lat = build_lattice(&Geometry::torus(6, 6)).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut pairing, mut residual, mut unitarity) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let mut g = ground_gauge(&lat);
        for u in g.u.iter_mut() {
            if rng.next_u32() & 1 == 1 {
                *u = -*u;
            }
        }
        let h = assemble(&lat, &g, 1.0).map_err(e)?;
        let ev = ia_eigenvalues(&h);
        let m = ev.len();
        pairing = pairing.max((0..m).map(|i| (ev[i] + ev[m - 1 - i]).abs()).fold(0.0, f64::max));
        let s = diagonalize(&h).map_err(e)?;
        residual = residual.max(s.residual(&h));
        unitarity = unitarity.max(s.unitarity_defect());
    }
    Ok(vec![
        check(format!("pairing defect {pairing:.1e} < 1e-10"), pairing < 1e-10),
        check(format!("Q residual {residual:.1e} < 1e-8"), residual < 1e-8),
        check(format!("unitarity {unitarity:.1e} < 1e-8"), unitarity < 1e-8),
    ])
}

fn dot_transfer() -> Outcome {
    let lat = build_lattice(&Geometry::droplet(6, 70)).map_err(e)?;
    let s = diagonalize(&assemble(&lat, &ground_gauge(&lat), 1.0).map_err(e)?).map_err(e)?;
    let a = lat.boundaries[0].dangling[0];
    let cw = circulation(&lat, &s, a, GAP, 10.0, V_EDGE).map_err(e)?.clockwise;
    let d = |z: usize| chiral_distance(&lat, a, z, cw).unwrap_or(f64::INFINITY);
    let b = *lat.boundaries[0].dangling.iter().min_by(|&&x, &&y| (d(x) - 40.0).abs().total_cmp(&(d(y) - 40.0).abs())).unwrap();
    let in_gap = s.eps.iter().filter(|&&x| x < GAP).count();
    let k = pick_edge_mode(&s, a, b, 0.2, 1e-3).ok_or("no visible edge mode")?;
    let opts = DotOptions { ratio: 0.025, ..DotOptions::default() };
    let on = run_dot(&lat, &s, a, b, k, &opts, 0.0).map_err(e)?;
    let p = &on.plan;
    let off = run_dot(&lat, &s, a, b, k, &opts, p.spacing).map_err(e)?;
    let half = run_dot(&lat, &s, a, b, k, &opts, 0.5 * p.spacing).map_err(e)?;
    let tiny = build_lattice(&Geometry::droplet(2, 2)).map_err(e)?;
    let mb = dot_protocol(&tiny, &[0, 1, 2, 3, 4, 5], 1, 2, 1.0, &ProtocolOptions::default()).map_err(e)?;
    Ok(vec![
        check(format!("{in_gap} edge modes in the gap >= 30"), in_gap >= 30),
        check(format!("resolvability {:.3} <= 0.1", p.resolvability), p.resolvability <= 0.1),
        check("tau = pi / (sqrt2 t)", (p.tau - PI / (SQRT_2 * p.tunneling)).abs() <= 1e-12 * p.tau),
        check(format!("fidelity {:.4} >= 0.99", on.fidelity), on.fidelity >= 0.99),
        check(format!("gate fidelity {:.4} >= 0.99", on.gate.fidelity), on.gate.fidelity >= 0.99),
        known_gap(format!("one-spacing detuning {:.3} < 0.5 (half spacing: {:.3})", off.fidelity, half.fidelity), off.fidelity < 0.5),
        check(format!("many-body gate vs single-particle {:.5}, vs table {:.5}", mb.fidelity_cross, mb.fidelity_ideal), mb.fidelity_cross >= 0.99 && mb.fidelity_ideal >= 0.99),
    ])
}

fn droplet_transfer() -> Outcome {
    let lat = build_lattice(&Geometry::droplet(5, 40)).map_err(e)?;
    let h = assemble(&lat, &ground_gauge(&lat), 1.0).map_err(e)?;
    let s = diagonalize(&h).map_err(e)?;
    let bd = &lat.boundaries[0];
    let a = bd.dangling[3];
    let d = |z: usize| chiral_distance(&lat, a, z, true).unwrap_or(f64::INFINITY);
    let b = *bd.dangling.iter().min_by(|&&x, &&y| (d(x) - 20.0).abs().total_cmp(&(d(y) - 20.0).abs())).unwrap();
    let opts = DropletOptions { delta_s: 0.2, sigma: 20.0, refine_passes: 3, ..DropletOptions::default() };
    let o = run_droplet(&lat, &h, &s, a, b, 0.2518, GAP, &opts, None).map_err(e)?;
    // The chiral branch spans the gap on both sides of zero.
    let band = o.plan.profile.bandwidth() / (2.0 * GAP);
    let eta = 0.05;
    let rho = local_density(&s, a, 0.2).map_err(e)?;
    let exp = wavepacket_plan(Profile::Exponential { eta }, 0.25, rho, rho, 20.0, 1.0, 1e-4, 0.5, 300.0).map_err(e)?;
    let closed = (eta / (4.0 * PI * rho)).sqrt();
    let on: Vec<f64> = exp.emission.samples.iter().copied().filter(|&g| g != 0.0).collect();
    let exact = !on.is_empty() && on.iter().all(|&g| (g - closed).abs() <= 1e-14 * closed);
    Ok(vec![
        check(format!("packet bandwidth {band:.3} of the edge band <= 0.2"), band <= 0.2),
        check(format!("fidelity {:.4} >= 0.95", o.trace.fidelity), o.trace.fidelity >= 0.95),
        check(format!("profile error {:.1e} < 1e-2", o.diagnostics.profile_error), o.diagnostics.profile_error < 1e-2),
        check(format!("exponential profile gives constant g = {closed:.5} over {} samples", on.len()), exact),
        check(format!("upstream leakage {:.1e} < 1e-3", o.leakage), o.leakage < 1e-3),
    ])
}

fn topology() -> Outcome {
    let torus = build_lattice(&Geometry::torus(4, 4)).map_err(e)?;
    let g = ground_gauge(&torus);
    let t = chern_number(&torus, &g, 1.0, 12).map_err(e)?;
    let r = chern_number(&torus, &reversed_triangles(&torus, &g), 1.0, 12).map_err(e)?;
    let cyl = build_lattice(&Geometry::cylinder(10, 4)).map_err(e)?;
    let gc = ground_gauge(&cyl);
    let v0 = edge_crossing(&cyl, &gc, 1.0).map_err(e)?.velocity;
    let v1 = edge_crossing(&cyl, &reversed_triangles(&cyl, &gc), 1.0).map_err(e)?.velocity;
    let drop = build_lattice(&Geometry::droplet(5, 40)).map_err(e)?;
    let gd = ground_gauge(&drop);
    let site = drop.boundaries[0].dangling[3];
    let spin = |g: &GaugeConfig| -> Result<bool, String> {
        let s = diagonalize(&assemble(&drop, g, 1.0).map_err(e)?).map_err(e)?;
        Ok(circulation(&drop, &s, site, GAP, 10.0, V_EDGE).map_err(e)?.clockwise)
    };
    let (c0, c1) = (spin(&gd)?, spin(&reversed_triangles(&drop, &gd))?);
    Ok(vec![
        check(format!("nu = {} with defect {:.1e} < 1e-6", t.chern, t.defect), t.chern.abs() == 1 && t.defect < 1e-6),
        check(format!("reversed nu = {}", r.chern), r.chern == -t.chern && r.defect < 1e-6),
        check(format!("edge slope {v0:.4} -> {v1:.4}"), v0 * v1 < 0.0),
        check(format!("droplet clockwise {c0} -> {c1}"), c0 != c1),
    ])
}

/// Transfer probability through one mode, secular against full dynamics,
/// for coupling `r * delta_s`. The fast counter-rotating micromotion is
/// first order in `r`; it is averaged over two periods around `tau` before
/// the engines are compared. Also returns the bare endpoint difference.
fn engine_gap(lat: &Lattice, h: &QuadraticHamiltonian, s: &Spectrum, a: usize, b: usize, k: usize, r: f64) -> Result<(f64, f64), String> {
    let plan = dot_plan(s, a, b, k, &DotOptions { ratio: 1.0, g_max_fraction: r, min_overlap: 1e-3 }).map_err(e)?;
    let setup = RegisterSetup::new(lat, plan.mode_energy, a, b, Drive::Constant(plan.g_l), Drive::Constant(plan.g_r)).map_err(e)?;
    let model = extend_hamiltonian(s, &setup).map_err(e)?;
    let w = 4.0 * PI / plan.mode_energy;
    let mut eo = EvolveOptions::new(plan.tau + w / 2.0);
    eo.sample_dt = 0.1;
    let full = evolve(&full_hamiltonian(h, &setup).map_err(e)?, &eo, false, &[]).map_err(e)?;
    let samples = (eo.t_final / eo.sample_dt).ceil() as usize + 1;
    let sec = secular_trace(&model, eo.t_final, samples).map_err(e)?;
    let mean = |tr: &TransferTrace| -> f64 {
        let w: Vec<f64> = tr.t.iter().zip(&tr.amp_r).filter(|(&t, _)| t >= plan.tau - w / 2.0).map(|(_, a)| a.norm_sqr()).collect();
        w.iter().sum::<f64>() / w.len() as f64
    };
    let window = (mean(&sec) - mean(&full)).abs();
    let at_tau = full.t.iter().position(|&t| t >= plan.tau).ok_or("trace ends before tau")?;
    let t_end = full.t[at_tau];
    let endpoint = (secular_amplitudes(&model, t_end).map_err(e)?[1][0].norm_sqr() - full.amp_r[at_tau].norm_sqr()).abs();
    Ok((window, endpoint))
}

fn secular_validity() -> Outcome {
    let lat = build_lattice(&Geometry::droplet(4, 12)).map_err(e)?;
    let h = assemble(&lat, &ground_gauge(&lat), 1.0).map_err(e)?;
    let s = diagonalize(&h).map_err(e)?;
    let bd = &lat.boundaries[0];
    let (a, b) = (bd.dangling[1], bd.dangling[bd.dangling.len() / 3]);
    let k = pick_edge_mode(&s, a, b, 0.2, 0.05).ok_or("no visible edge mode")?;
    let ratios = [0.025, 0.05, 0.1];
    let gaps: Vec<(f64, f64)> = ratios.iter().map(|&r| engine_gap(&lat, &h, &s, a, b, k, r)).collect::<Result<_, _>>()?;
    let fit = power_fit(&ratios, &gaps.iter().map(|g| g.0).collect::<Vec<_>>()).map_err(e)?;
    Ok(vec![
        check(format!("discrepancy at g/delta = 0.05: averaged {:.1e}, endpoint {:.1e} < 0.01", gaps[1].0, gaps[1].1), gaps[1].0 < 0.01 && gaps[1].1 < 0.01),
        check(format!("log-log slope {:.3} = 2 +- 0.3", fit.exponent), (fit.exponent - 2.0).abs() <= 0.3),
    ])
}

fn golden_rule() -> Outcome {
    let (_, fit) = golden_rule_scan(1.0, 0.25, 0.02, 11, 1e-6).map_err(e)?;
    let model = NoiseModel { temperature: 0.0, species: vec![], perimeter: 80.0, velocity: 0.25, lambda: 1.0, kappa_prime: 0.05, bath: Bath::Thermal, xi: 0.55 };
    let ts: Vec<f64> = (0..7).map(|i| 1e-3 * 2f64.powf(0.5 * i as f64)).collect();
    let corr: Vec<f64> = ts.iter().map(|&t| decay_interaction(&model, 0.4, t).map(|r| r.correction)).collect::<Result<_, _>>().map_err(e)?;
    let som = power_fit(&ts, &corr).map_err(e)?;
    Ok(vec![
        check(format!("integral exponent {:.3} = 13 +- 0.5", fit.exponent), (fit.exponent - 13.0).abs() <= 0.5),
        check(format!("thermal correction slope {:.3} = 2 +- 0.1", som.exponent), (som.exponent - 2.0).abs() <= 0.1),
    ])
}

fn robustness() -> Outcome {
    let lat = build_lattice(&Geometry::droplet(8, 24)).map_err(e)?;
    let bd = &lat.boundaries[0];
    let base = SweepBase {
        kappa: 1.0,
        site_a: bd.dangling[bd.dangling.len() / 8],
        site_b: bd.dangling[bd.dangling.len() / 2],
        energy: 0.2,
        dot: DotOptions { ratio: 0.025, ..DotOptions::default() },
    };
    let seeds: Vec<u64> = (0..50).collect();
    let xi = V_EDGE / GAP;
    let far = DisorderSpec { jitter: 0.05, vortex_pairs: 1, min_edge_distance: 5.0 * xi, stray_edge_vortex: false };
    let r = disorder_sweep(&lat, &base, &far, &seeds).map_err(e)?;
    let stray = DisorderSpec { vortex_pairs: 0, stray_edge_vortex: true, ..far.clone() };
    let q = disorder_sweep(&lat, &base, &stray, &seeds).map_err(e)?;
    Ok(vec![
        check(format!("far pairs, w = 0.05: median drop {:.1e} < 0.01 over {} seeds", r.median_drop, r.rows.len()), r.median_drop < 0.01 && r.rows.len() == 50),
        check(format!("stray edge vortex: median drop {:.3} > 0.05", q.median_drop), q.median_drop > 0.05),
    ])
}

const SMALL: &[(&str, &str)] = &[
    ("bands", "[geometry]\nkind = \"cylinder\"\nlx = 8\nly = 12\n"),
    ("vortex-gaps", "[geometry]\nkind = \"torus\"\nlx = 8\nly = 8\n[vortex]\nseparations = [3, 4]\n"),
    ("transfer", "[geometry]\nkind = \"droplet\"\nlx = 4\nly = 20\n"),
    ("transfer", "[geometry]\nkind = \"droplet\"\nlx = 4\nly = 20\n[transfer]\nregime = \"droplet\"\ndistance = 10\n[transfer.droplet]\nsigma = 5\nrefine_passes = 1\n"),
    ("sweep", "[geometry]\nkind = \"droplet\"\nlx = 4\nly = 12\n[sweep]\nseeds = 4\nedge_distance_xi = 1.0\n[rates]\n"),
    ("oracle", "[oracle]\nregisters = [1, 2]\nprotocol = true\n"),
    ("chern", ""),
];

fn run_twice(dir: &Path, n: usize, cmd: &str, config: &str) -> Result<bool, String> {
    let cfg = dir.join(format!("c{n}.toml"));
    std::fs::write(&cfg, config).map_err(e)?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.join(format!("c{n}-{run}"));
        let o = Command::new(env!("CARGO_BIN_EXE_chiral"))
            .args([cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3"])
            .env_remove("CHIRAL_OUT")
            .output()
            .map_err(e)?;
        if !o.status.success() {
            return Err(format!("{cmd}: {}", String::from_utf8_lossy(&o.stderr)));
        }
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .map_err(e)?
            .map(|f| {
                let f = f.unwrap();
                (f.file_name().to_string_lossy().into_owned(), std::fs::read(f.path()).unwrap())
            })
            .collect();
        files.sort();
        outputs.push(files);
    }
    Ok(!outputs[0].is_empty() && outputs[0] == outputs[1])
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let mut out = Vec::new();
    for (n, (cmd, config)) in SMALL.iter().enumerate() {
        out.push(check(format!("{cmd} #{n} byte-identical"), run_twice(dir.path(), n, cmd, config)?));
    }
    Ok(out)
}

fn main() {
    let criteria: [(u8, &str, fn() -> Outcome); 11] = [
        (1, "band structure", bands_and_edge),
        (2, "vortex gaps", vortex_gaps),
        (3, "spin oracle", oracle_equivalence),
        (4, "particle-hole and unitarity", particle_hole),
        (5, "dot transfer", dot_transfer),
        (6, "droplet transfer", droplet_transfer),
        (7, "topology and chirality", topology),
        (8, "secular approximation", secular_validity),
        (9, "golden-rule scaling", golden_rule),
        (10, "robustness", robustness),
        (11, "determinism", determinism),
    ];
    let mut unexpected = 0;
    for (id, title, run) in criteria {
        let start = Instant::now();
        let (status, detail) = match run() {
            Ok(checks) => {
                unexpected += checks.iter().filter(|c| !c.pass && !c.known_gap).count();
                let ok = checks.iter().all(|c| c.pass);
                let gaps = checks.iter().any(|c| !c.pass && c.known_gap) && checks.iter().all(|c| c.pass || c.known_gap);
                let detail = checks
                    .iter()
                    .map(|c| format!("{} [{}]", c.what, if c.pass { "ok" } else if c.known_gap { "fail, known gap" } else { "fail" }))
                    .collect::<Vec<_>>()
                    .join("; ");
                (if ok { "PASS" } else if gaps { "FAIL (known gap)" } else { "FAIL" }, detail)
            }
            Err(msg) => {
                unexpected += 1;
                ("ERROR", msg)
            }
        };
        println!("criterion {id:>2} {status:<16} {title} ({:.1}s): {detail}", start.elapsed().as_secs_f64());
    }
    if unexpected > 0 {
        eprintln!("{unexpected} unexpected acceptance failure(s)");
        std::process::exit(1);
    }
}
