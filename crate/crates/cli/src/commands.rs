//! One function per subcommand. Each computes everything before returning
//! its artifacts, so a failure leaves the output directory untouched.

use chiral_core::fermion::{assemble, band_structure, bulk_gap, chern_number, diagonalize, edge_crossing, vortex_gap, BandOptions};
use chiral_core::gauge::{ground_gauge, reversed_triangles, GaugeConfig};
use chiral_core::lattice::{build_lattice, Lattice, PlaquetteKind};
use chiral_core::noise::{self, Bath, DisorderSpec, NoiseModel, SweepBase};
use chiral_core::oracle::{compare_spectra, dot_protocol, sector_resolved_mismatch, ProtocolOptions, SpinCluster};
use chiral_core::transfer::{
    chiral_distance, circulation, dot_plan, extend_hamiltonian, pick_edge_mode, run_dot, run_droplet, secular_trace, DotOptions, Drive, DropletOptions, RegisterSetup,
};
use chiral_core::Error;
use serde_json::{json, Value};

use crate::config::{Command, Regime, RunConfig};
use crate::output::{Artifact, Stamp};
use crate::{Failure, Format};

pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    /// Set when a result misses its configured tolerance; reported after the
    /// artifacts are written.
    pub check: Option<String>,
}

impl Outcome {
    fn ok(artifacts: Vec<Artifact>) -> Self {
        Self { artifacts, check: None }
    }
}

pub fn execute(cmd: Command, cfg: &RunConfig, stamp: &Stamp, format: Format) -> Result<Outcome, Failure> {
    let lattice = build_lattice(&cfg.geometry_for(cmd))?;
    match cmd {
        Command::Bands => bands(&lattice, cfg, stamp, format),
        Command::VortexGaps => vortex_gaps(&lattice, cfg, stamp),
        Command::Transfer => transfer(&lattice, cfg, stamp, format),
        Command::Sweep => sweep(&lattice, cfg, stamp, format),
        Command::Oracle => oracle(&lattice, cfg, stamp),
        Command::Chern => chern(&lattice, cfg, stamp),
    }
}

fn to_value<T: serde::Serialize>(x: &T) -> Result<Value, Failure> {
    serde_json::to_value(x).map_err(|e| Failure::Core(Error::Json(e)))
}

fn configured_gauge(lattice: &Lattice, cfg: &RunConfig) -> Result<GaugeConfig, Failure> {
    let mut g = ground_gauge(lattice);
    for &l in &cfg.gauge.flipped {
        if l >= lattice.links.len() {
            return Err(Failure::Config(format!("gauge.flipped: link {l} out of range ({} links)", lattice.links.len())));
        }
        g = g.flip(l);
    }
    if cfg.gauge.reverse_triangles {
        g = reversed_triangles(lattice, &g);
    }
    Ok(g)
}

fn check_site(lattice: &Lattice, site: usize, what: &str) -> Result<usize, Failure> {
    if lattice.dangling.iter().any(|d| d.site == site) {
        Ok(site)
    } else {
        Err(Failure::Config(format!("{what}: site {site} is not a dangling boundary site")))
    }
}

fn bands(lattice: &Lattice, cfg: &RunConfig, stamp: &Stamp, format: Format) -> Result<Outcome, Failure> {
    let gauge = configured_gauge(lattice, cfg)?;
    let opts = BandOptions { edge_threshold: cfg.bands.edge_threshold, edge_rows: cfg.bands.edge_rows };
    let bands = band_structure(lattice, &gauge, cfg.kappa, &opts)?;
    let gap = bulk_gap(&bands);
    let crossing = edge_crossing(lattice, &gauge, cfg.kappa)?;
    let counts: Vec<usize> = (0..bands.ky.len()).map(|k| bands.bulk_bands(k, cfg.bands.band_separation).len()).collect();
    // Most common count over momenta; ties go to the smaller count.
    let modal = (0..=counts.iter().copied().max().unwrap_or(0)).max_by_key(|&c| (counts.iter().filter(|&&x| x == c).count(), std::cmp::Reverse(c))).unwrap_or(0);
    let mut summary = json!({
        "bulk_gap": gap,
        "crossing_ky": crossing.ky,
        "edge_velocity": crossing.velocity,
        "edge_xi": crossing.xi,
        "bulk_band_count": modal,
        "band_separation": cfg.bands.band_separation,
        "n_ky": bands.ky.len(),
    });
    Ok(Outcome::ok(match format {
        Format::Csv => vec![Artifact::csv("bands.csv", stamp, &bands.to_csv()), Artifact::json("bands.json", stamp, summary)],
        Format::Json => {
            summary["bands"] = to_value(&bands)?;
            summary["edge_profile"] = to_value(&crossing.profile)?;
            vec![Artifact::json("bands.json", stamp, summary)]
        }
    }))
}

fn vortex_gaps(lattice: &Lattice, cfg: &RunConfig, stamp: &Stamp) -> Result<Outcome, Failure> {
    let v = &cfg.vortex;
    let tri = vortex_gap(lattice, cfg.kappa, PlaquetteKind::Triangle, &v.separations, v.fit_tolerance)?;
    let dod = vortex_gap(lattice, cfg.kappa, PlaquetteKind::Dodecagon, &v.separations, v.fit_tolerance)?;
    let check = [&tri, &dod]
        .iter()
        .find(|g| !g.converged)
        .map(|g| format!("{:?} fit residual {:.3e} exceeds {:.3e}", g.species, g.residual, v.fit_tolerance).to_lowercase());
    let body = json!({ "triangle": tri.gap, "dodecagon": dod.gap, "fits": [to_value(&tri)?, to_value(&dod)?] });
    Ok(Outcome { artifacts: vec![Artifact::json("vortex_gaps.json", stamp, body)], check })
}

/// Injection sites: configured, or the first dangling site of the outer
/// boundary and the dangling site nearest `distance` downstream of it.
fn transfer_sites(lattice: &Lattice, spectrum: &chiral_core::fermion::Spectrum, cfg: &RunConfig) -> Result<(usize, usize), Failure> {
    let t = &cfg.transfer;
    let a = match t.site_a {
        Some(s) => check_site(lattice, s, "transfer.site_a")?,
        None => *lattice.boundaries.first().and_then(|b| b.dangling.first()).ok_or_else(|| Failure::Config("lattice has no dangling sites".into()))?,
    };
    let b = match t.site_b {
        Some(s) => check_site(lattice, s, "transfer.site_b")?,
        None => {
            let circ = circulation(lattice, spectrum, a, t.gap, 10.0, t.velocity)?;
            lattice
                .dangling
                .iter()
                .filter_map(|d| chiral_distance(lattice, a, d.site, circ.clockwise).map(|x| (d.site, (x - t.distance).abs())))
                .filter(|&(s, _)| s != a)
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .map(|(s, _)| s)
                .ok_or_else(|| Failure::Config("no second dangling site on the boundary of site_a".into()))?
        }
    };
    if a == b {
        return Err(Failure::Config("transfer sites must differ".into()));
    }
    Ok((a, b))
}

fn transfer(lattice: &Lattice, cfg: &RunConfig, stamp: &Stamp, format: Format) -> Result<Outcome, Failure> {
    let gauge = configured_gauge(lattice, cfg)?;
    let h = assemble(lattice, &gauge, cfg.kappa)?;
    let spectrum = diagonalize(&h)?;
    let (a, b) = transfer_sites(lattice, &spectrum, cfg)?;
    let t = &cfg.transfer;
    let (trace, mut body) = match t.regime {
        Regime::Dot => {
            let d = &t.dot;
            let opts = DotOptions { ratio: d.ratio, g_max_fraction: d.g_max_fraction, min_overlap: d.min_overlap };
            let mode = pick_edge_mode(&spectrum, a, b, d.energy, d.min_overlap).ok_or_else(|| Error::Precondition("no edge mode is visible at both sites".into()))?;
            let spacing = dot_plan(&spectrum, a, b, mode, &opts)?.spacing;
            let outcome = run_dot(lattice, &spectrum, a, b, mode, &opts, d.detuning * spacing)?;
            let p = &outcome.plan;
            let setup = RegisterSetup::new(lattice, p.mode_energy + outcome.detuning, a, b, Drive::Constant(p.g_l), Drive::Constant(p.g_r))?;
            let trace = secular_trace(&extend_hamiltonian(&spectrum, &setup)?, p.tau, d.samples)?;
            let body = json!({
                "regime": "dot",
                "engine": "secular",
                "site_a": a,
                "site_b": b,
                "fidelity": outcome.fidelity,
                "tau": p.tau,
                "detuning": outcome.detuning,
                "plan": to_value(p)?,
                "gate": to_value(&outcome.gate)?,
            });
            (trace, body)
        }
        Regime::Droplet => {
            let d = &t.droplet;
            let opts = DropletOptions {
                delta_s: d.delta_s,
                sigma: d.sigma,
                g_max_fraction: d.g_max_fraction,
                residual: d.residual,
                pulse_dt: d.pulse_dt,
                refine_passes: d.refine_passes,
                sample_dt: d.sample_dt,
            };
            let out = run_droplet(lattice, &h, &spectrum, a, b, t.velocity, t.gap, &opts, None)?;
            let body = json!({
                "regime": "droplet",
                "engine": "full",
                "site_a": a,
                "site_b": b,
                "fidelity": out.trace.fidelity,
                "norm_drift": out.trace.norm_drift,
                "clockwise": out.clockwise,
                "distance": out.plan.distance,
                "arrival_time": out.plan.arrival_time(),
                "open_loop_error": out.open_loop_error,
                "leakage": out.leakage,
                "diagnostics": to_value(&out.diagnostics)?,
                "profile": to_value(&out.plan.profile)?,
                "rho_a": out.plan.rho_a,
                "rho_b": out.plan.rho_b,
            });
            (out.trace, body)
        }
    };
    Ok(Outcome::ok(match format {
        Format::Csv => vec![Artifact::csv("transfer_trace.csv", stamp, &trace.to_csv()), Artifact::json("transfer.json", stamp, body)],
        Format::Json => {
            body["trace"] = to_value(&trace)?;
            vec![Artifact::json("transfer.json", stamp, body)]
        }
    }))
}

fn sweep(lattice: &Lattice, cfg: &RunConfig, stamp: &Stamp, format: Format) -> Result<Outcome, Failure> {
    let s = &cfg.sweep;
    let dangling: Vec<usize> = lattice.boundaries.first().map(|b| b.dangling.clone()).unwrap_or_default();
    if dangling.len() < 8 {
        return Err(Failure::Config("sweep droplet is too small to place the registers".into()));
    }
    let site_a = match s.site_a {
        Some(x) => check_site(lattice, x, "sweep.site_a")?,
        None => dangling[dangling.len() / 8],
    };
    let site_b = match s.site_b {
        Some(x) => check_site(lattice, x, "sweep.site_b")?,
        None => dangling[dangling.len() / 2],
    };
    let base = SweepBase {
        kappa: cfg.kappa,
        site_a,
        site_b,
        energy: s.energy,
        dot: DotOptions { ratio: s.ratio, g_max_fraction: cfg.transfer.dot.g_max_fraction, min_overlap: cfg.transfer.dot.min_overlap },
    };
    let spec = DisorderSpec { jitter: s.jitter, vortex_pairs: s.vortex_pairs, min_edge_distance: s.edge_distance_xi * s.xi, stray_edge_vortex: s.stray_edge_vortex };
    let seeds: Vec<u64> = (0..s.seeds as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let result = noise::disorder_sweep(lattice, &base, &spec, &seeds)?;
    let mut body = json!({
        "site_a": site_a,
        "site_b": site_b,
        "seeds": seeds.len(),
        "clean_fidelity": result.clean_fidelity,
        "median": result.median,
        "min": result.min,
        "max": result.max,
        "median_drop": result.median_drop,
        "disorder": to_value(&spec)?,
        "plan": to_value(&result.plan)?,
    });
    let rates = match &cfg.rates {
        Some(r) => {
            let model = NoiseModel {
                temperature: 0.0,
                species: vec![],
                perimeter: lattice.boundaries.first().map_or(0.0, |b| b.perimeter),
                velocity: r.velocity,
                lambda: r.lambda,
                kappa_prime: cfg.kappa,
                bath: Bath::Thermal,
                xi: s.xi,
            };
            model.validate()?;
            Some(noise::rate_table(&model, &r.momenta, &r.temperatures)?)
        }
        None => None,
    };
    let mut artifacts = Vec::new();
    match format {
        Format::Csv => {
            artifacts.push(Artifact::csv("sweep.csv", stamp, &result.to_csv()));
            if let Some(table) = rates {
                let note = "# scaling estimate: rate prefactors are not absolute\n";
                artifacts.push(Artifact::csv("rates.csv", stamp, &format!("{note}{table}")));
            }
        }
        Format::Json => {
            body["rows"] = to_value(&result.rows)?;
            if let Some(table) = rates {
                let rows: Vec<Value> = table
                    .lines()
                    .skip(1)
                    .map(|l| {
                        let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap_or(f64::NAN)).collect();
                        json!({ "p": f[0], "T": f[1], "gamma": f[2] })
                    })
                    .collect();
                body["rates"] = json!({ "label": "scaling estimate", "rows": rows });
            }
        }
    }
    artifacts.push(Artifact::json("sweep.json", stamp, body));
    Ok(Outcome::ok(artifacts))
}

fn oracle(lattice: &Lattice, cfg: &RunConfig, stamp: &Stamp) -> Result<Outcome, Failure> {
    let o = &cfg.oracle;
    if let Some(&s) = o.sites.iter().find(|&&s| s >= lattice.n_sites()) {
        return Err(Failure::Config(format!("oracle.sites: site {s} out of range")));
    }
    let mut cluster = SpinCluster::from_fragment(lattice, &o.sites, cfg.kappa)?;
    if let Some([a, b]) = o.registers {
        cluster = cluster.with_registers(a, b, o.delta_s, o.g, o.g)?;
    }
    let report = compare_spectra(&cluster)?;
    let sector = sector_resolved_mismatch(&cluster)?;
    let tol = cfg.tolerances.oracle_mismatch * cfg.kappa;
    let worst = report.max_mismatch.max(sector);
    let check = (worst >= tol).then(|| format!("spectral mismatch {worst:.3e} exceeds {tol:.3e}"));
    let mut body = json!({
        "n_spins": report.n_spins,
        "dimension": report.dimension,
        "max_mismatch": report.max_mismatch,
        "sector_mismatch": sector,
        "within_tolerance": check.is_none(),
        "report": to_value(&report)?,
    });
    if o.protocol {
        let [a, b] = o.registers.expect("validated");
        body["protocol"] = to_value(&dot_protocol(lattice, &o.sites, a, b, cfg.kappa, &ProtocolOptions::default())?)?;
    }
    Ok(Outcome { artifacts: vec![Artifact::json("oracle.json", stamp, body)], check })
}

fn chern(lattice: &Lattice, cfg: &RunConfig, stamp: &Stamp) -> Result<Outcome, Failure> {
    let gauge = configured_gauge(lattice, cfg)?;
    let topo = chern_number(lattice, &gauge, cfg.kappa, cfg.chern.grid)?;
    Ok(Outcome::ok(vec![Artifact::json("chern.json", stamp, to_value(&topo)?)]))
}
