//! Run configuration: a TOML document with one optional table per command.
//! Unknown keys anywhere are rejected.

use chiral_core::lattice::{Geometry, GeometryKind};
use chiral_core::oracle::DEFAULT_CAP;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub kappa: f64,
    pub seed: u64,
    /// Overrides the per-command default geometry.
    pub geometry: Option<Geometry>,
    pub gauge: GaugeSection,
    pub bands: BandsSection,
    pub vortex: VortexSection,
    pub chern: ChernSection,
    pub transfer: TransferSection,
    pub sweep: SweepSection,
    pub rates: Option<RatesSection>,
    pub oracle: OracleSection,
    pub output: OutputSection,
    pub tolerances: Tolerances,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            seed: 0,
            geometry: None,
            gauge: GaugeSection::default(),
            bands: BandsSection::default(),
            vortex: VortexSection::default(),
            chern: ChernSection::default(),
            transfer: TransferSection::default(),
            sweep: SweepSection::default(),
            rates: None,
            oracle: OracleSection::default(),
            output: OutputSection::default(),
            tolerances: Tolerances::default(),
        }
    }
}

/// Links flipped away from the ground configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaugeSection {
    pub flipped: Vec<usize>,
    /// Reverses every triangle flux, the time-reversed partner sector.
    pub reverse_triangles: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandsSection {
    pub edge_threshold: f64,
    pub edge_rows: usize,
    /// Energy separation that splits two bulk bands.
    pub band_separation: f64,
}

impl Default for BandsSection {
    fn default() -> Self {
        Self { edge_threshold: 0.9, edge_rows: 3, band_separation: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VortexSection {
    pub separations: Vec<usize>,
    /// Largest acceptable residual of the exponential fit.
    pub fit_tolerance: f64,
}

impl Default for VortexSection {
    fn default() -> Self {
        Self { separations: vec![4, 5, 6, 7, 8], fit_tolerance: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChernSection {
    pub grid: usize,
}

impl Default for ChernSection {
    fn default() -> Self {
        Self { grid: 12 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Dot,
    Droplet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub regime: Regime,
    /// Injection sites; picked on the first boundary when absent.
    pub site_a: Option<usize>,
    pub site_b: Option<usize>,
    /// Downstream distance used when `site_b` is picked automatically.
    pub distance: f64,
    /// Bulk gap and carrier velocity used for planning.
    pub gap: f64,
    pub velocity: f64,
    pub dot: DotSection,
    pub droplet: DropletSection,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self {
            regime: Regime::Dot,
            site_a: None,
            site_b: None,
            distance: 40.0,
            gap: 0.4569,
            velocity: 0.2518,
            dot: DotSection::default(),
            droplet: DropletSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DotSection {
    /// Target mode energy.
    pub energy: f64,
    pub ratio: f64,
    pub g_max_fraction: f64,
    pub min_overlap: f64,
    /// Register detuning in units of the mode spacing.
    pub detuning: f64,
    pub samples: usize,
}

impl Default for DotSection {
    fn default() -> Self {
        Self { energy: 0.2, ratio: 0.025, g_max_fraction: 0.1, min_overlap: 1e-3, detuning: 0.0, samples: 401 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropletSection {
    pub delta_s: f64,
    pub sigma: f64,
    pub g_max_fraction: f64,
    pub residual: f64,
    pub pulse_dt: f64,
    pub refine_passes: usize,
    pub sample_dt: f64,
}

impl Default for DropletSection {
    fn default() -> Self {
        Self { delta_s: 0.2, sigma: 20.0, g_max_fraction: 1.0, residual: 1e-4, pulse_dt: 0.01, refine_passes: 4, sample_dt: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub seeds: usize,
    pub jitter: f64,
    pub vortex_pairs: usize,
    /// Minimum vortex distance from the edge in units of `xi`.
    pub edge_distance_xi: f64,
    pub xi: f64,
    pub stray_edge_vortex: bool,
    pub energy: f64,
    pub ratio: f64,
    pub site_a: Option<usize>,
    pub site_b: Option<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            seeds: 50,
            jitter: 0.05,
            vortex_pairs: 1,
            edge_distance_xi: 5.0,
            xi: 0.25 / 0.4569,
            stray_edge_vortex: false,
            energy: 0.2,
            ratio: 0.025,
            site_a: None,
            site_b: None,
        }
    }
}

/// Interaction-rate table written next to a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatesSection {
    pub momenta: Vec<f64>,
    pub temperatures: Vec<f64>,
    pub lambda: f64,
    pub velocity: f64,
}

impl Default for RatesSection {
    fn default() -> Self {
        Self { momenta: vec![0.05, 0.1, 0.2, 0.4], temperatures: vec![0.0, 0.005, 0.01], lambda: 1.0, velocity: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    /// Lattice sites of the fragment.
    pub sites: Vec<usize>,
    /// Fragment-local register sites; adds two register spins when set.
    pub registers: Option<[usize; 2]>,
    pub delta_s: f64,
    pub g: f64,
    /// Also runs the many-body transfer between the register sites.
    pub protocol: bool,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { sites: (0..6).collect(), registers: None, delta_s: 0.3, g: 0.05, protocol: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub oracle_mismatch: f64,
    pub quadrature: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { oracle_mismatch: 1e-8, quadrature: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Bands,
    VortexGaps,
    Transfer,
    Sweep,
    Oracle,
    Chern,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Bands => "bands",
            Command::VortexGaps => "vortex-gaps",
            Command::Transfer => "transfer",
            Command::Sweep => "sweep",
            Command::Oracle => "oracle",
            Command::Chern => "chern",
        }
    }

    pub fn default_geometry(self) -> Geometry {
        match self {
            Command::Bands => Geometry::cylinder(40, 61),
            Command::VortexGaps => Geometry::torus(16, 16),
            Command::Chern => Geometry::torus(4, 4),
            Command::Transfer => Geometry::droplet(6, 70),
            Command::Sweep => Geometry::droplet(8, 24),
            Command::Oracle => Geometry::droplet(2, 2),
        }
    }

    fn required_kind(self) -> GeometryKind {
        match self {
            Command::Bands => GeometryKind::Cylinder,
            Command::VortexGaps | Command::Chern => GeometryKind::Torus,
            Command::Transfer | Command::Sweep | Command::Oracle => GeometryKind::Droplet,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn positive(name: &str, x: f64) -> Result<(), String> {
    check(x > 0.0 && x.is_finite(), || format!("{name} must be positive and finite, got {x}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn geometry_for(&self, cmd: Command) -> Geometry {
        self.geometry.clone().unwrap_or_else(|| cmd.default_geometry())
    }

    /// Checks everything that can be checked without building a lattice.
    pub fn validate(&self, cmd: Option<Command>) -> Result<(), String> {
        positive("kappa", self.kappa)?;
        if let Some(g) = &self.geometry {
            g.validate().map_err(|e| e.to_string())?;
        }
        if let Some(cmd) = cmd {
            let g = self.geometry_for(cmd);
            check(g.kind == cmd.required_kind(), || {
                format!("{} needs a {:?} geometry, got {:?}", cmd.name(), cmd.required_kind(), g.kind).to_lowercase()
            })?;
        }
        let b = &self.bands;
        check((0.0..=1.0).contains(&b.edge_threshold) && b.edge_rows > 0, || "bands.edge_threshold must lie in [0, 1] and edge_rows > 0".into())?;
        positive("bands.band_separation", b.band_separation)?;
        check(!self.vortex.separations.is_empty(), || "vortex.separations must not be empty".into())?;
        positive("vortex.fit_tolerance", self.vortex.fit_tolerance)?;
        check(self.chern.grid >= 2, || "chern.grid must be at least 2".into())?;
        let t = &self.transfer;
        positive("transfer.distance", t.distance)?;
        positive("transfer.gap", t.gap)?;
        positive("transfer.velocity", t.velocity)?;
        let d = &t.dot;
        positive("transfer.dot.energy", d.energy)?;
        check(d.ratio > 0.0 && d.ratio <= 1.0, || format!("transfer.dot.ratio must lie in (0, 1], got {}", d.ratio))?;
        check(d.g_max_fraction > 0.0 && d.g_max_fraction < 1.0, || "transfer.dot.g_max_fraction must lie in (0, 1)".into())?;
        check(d.detuning.is_finite() && d.samples >= 2, || "transfer.dot.detuning must be finite and samples >= 2".into())?;
        let p = &t.droplet;
        for (n, x) in [("delta_s", p.delta_s), ("sigma", p.sigma), ("g_max_fraction", p.g_max_fraction), ("residual", p.residual), ("pulse_dt", p.pulse_dt), ("sample_dt", p.sample_dt)] {
            positive(&format!("transfer.droplet.{n}"), x)?;
        }
        let s = &self.sweep;
        check(s.seeds > 0, || "sweep.seeds must be positive".into())?;
        check(s.jitter >= 0.0 && s.jitter < self.kappa, || format!("sweep.jitter must lie in [0, kappa), got {}", s.jitter))?;
        check(s.edge_distance_xi >= 0.0, || "sweep.edge_distance_xi must be nonnegative".into())?;
        positive("sweep.xi", s.xi)?;
        positive("sweep.energy", s.energy)?;
        check(s.ratio > 0.0 && s.ratio <= 1.0, || "sweep.ratio must lie in (0, 1]".into())?;
        if let Some(r) = &self.rates {
            check(!r.momenta.is_empty() && r.momenta.iter().all(|&p| p > 0.0), || "rates.momenta must be nonempty and positive".into())?;
            check(r.temperatures.iter().all(|&t| t >= 0.0), || "rates.temperatures must be nonnegative".into())?;
            positive("rates.velocity", r.velocity)?;
        }
        let o = &self.oracle;
        let spins = o.sites.len() + if o.registers.is_some() { 2 } else { 0 };
        check(!o.sites.is_empty() && spins <= DEFAULT_CAP, || format!("oracle cluster has {spins} spins; the cap is {DEFAULT_CAP}"))?;
        check(o.registers.is_some() || !o.protocol, || "oracle.protocol needs oracle.registers".into())?;
        positive("oracle.delta_s", o.delta_s)?;
        check(o.g.abs() < o.delta_s, || "oracle.g must stay below oracle.delta_s".into())?;
        positive("tolerances.oracle_mismatch", self.tolerances.oracle_mismatch)?;
        positive("tolerances.quadrature", self.tolerances.quadrature)?;
        Ok(())
    }

    /// Digest of the resolved configuration. The output directory is left
    /// out so that runs into different directories can be compared.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output.dir = None;
        let canonical = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_every_command() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        for cmd in [Command::Bands, Command::VortexGaps, Command::Transfer, Command::Sweep, Command::Oracle, Command::Chern] {
            c.validate(Some(cmd)).unwrap();
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("kappa = 1.0\nkapa = 2.0\n").is_err());
        assert!(RunConfig::parse("[transfer.dot]\nratio = 0.05\nspeed = 1\n").is_err());
        assert!(RunConfig::parse("[geometry]\nkind = \"droplet\"\nlx = 4\nly = 8\nextra = 1\n").is_err());
    }

    #[test]
    fn range_checks() {
        let bad = |text: &str, cmd: Command| RunConfig::parse(text).unwrap().validate(Some(cmd)).is_err();
        assert!(bad("kappa = -1.0", Command::Bands));
        assert!(bad("[geometry]\nkind = \"torus\"\nlx = 4\nly = 4\n", Command::Bands));
        assert!(bad("[sweep]\njitter = 2.0\n", Command::Sweep));
        assert!(bad("[oracle]\nsites = [0,1,2,3,4,5,6,7,8,9,10,11,12]\nregisters = [0, 1]\n", Command::Oracle));
        assert!(bad("[oracle]\nprotocol = true\n", Command::Oracle));
    }

    #[test]
    fn digest_ignores_output_dir_and_layout() {
        let a = RunConfig::parse("kappa = 1.0\n[output]\ndir = \"x\"\n").unwrap();
        let b = RunConfig::parse("\n\n[output]\ndir = \"y\"\n").unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = RunConfig::parse("seed = 3").unwrap();
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
