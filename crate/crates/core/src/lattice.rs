//! Triangle-decorated honeycomb lattice in torus, cylinder and droplet form.
//!
//! Every honeycomb vertex is replaced by a triangle, giving six sites per unit
//! cell. Sublattice index `s`: `s / 3` picks the triangle (0 = A, 1 = B) and
//! `s % 3` the corner flavor (0 = x, 1 = y, 2 = z). A corner of flavor `d`
//! owns the primed inter-triangle link of the same flavor; the triangle-internal
//! link between corners `d` and `e` carries the remaining unprimed flavor.
//!
//! Inter-triangle links run from the A corner `d` of cell `(ix, iy)` to the B
//! corner `d` of cell `(ix, iy) + INTER_OFFSET[d]`. The cylinder is periodic
//! along `y` (circumference `ly`) and open along `x` (width `lx`), which gives
//! zigzag edges; the droplet is open in both directions and has zigzag edges
//! all the way around.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const SCHEMA_VERSION: u32 = 1;

const INTER_OFFSET: [[i64; 2]; 3] = [[0, 0], [0, -1], [1, 0]];
const SQRT3: f64 = 1.732_050_807_568_877_2;
/// Honeycomb bond length for lattice constant 1.
const BOND: f64 = 1.0 / SQRT3;
/// Distance of a triangle corner from its triangle center.
const CORNER: f64 = BOND / 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryKind {
    Torus,
    Cylinder,
    Droplet,
}

/// Shape and size. `lx` counts unit cells across (open direction of a
/// cylinder), `ly` along the periodic direction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub kind: GeometryKind,
    pub lx: usize,
    pub ly: usize,
    #[serde(default = "default_boundary")]
    pub boundary: String,
}

fn default_boundary() -> String {
    "zigzag".to_string()
}

impl Geometry {
    pub fn torus(lx: usize, ly: usize) -> Self {
        Self { kind: GeometryKind::Torus, lx, ly, boundary: default_boundary() }
    }

    pub fn cylinder(lx: usize, ly: usize) -> Self {
        Self { kind: GeometryKind::Cylinder, lx, ly, boundary: default_boundary() }
    }

    pub fn droplet(lx: usize, ly: usize) -> Self {
        Self { kind: GeometryKind::Droplet, lx, ly, boundary: default_boundary() }
    }

    pub fn periodic_x(&self) -> bool {
        self.kind == GeometryKind::Torus
    }

    pub fn periodic_y(&self) -> bool {
        self.kind != GeometryKind::Droplet
    }

    pub fn validate(&self) -> Result<()> {
        if self.lx == 0 || self.ly == 0 {
            return Err(invalid(format!("lattice dims must be positive, got {}x{}", self.lx, self.ly)));
        }
        if self.boundary != "zigzag" {
            return Err(invalid(format!("unsupported boundary termination '{}'", self.boundary)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkType {
    #[serde(rename = "x")]
    X,
    #[serde(rename = "y")]
    Y,
    #[serde(rename = "z")]
    Z,
    #[serde(rename = "x'")]
    XPrime,
    #[serde(rename = "y'")]
    YPrime,
    #[serde(rename = "z'")]
    ZPrime,
}

impl LinkType {
    fn intra(flavor_index: usize) -> Self {
        [Self::X, Self::Y, Self::Z][flavor_index]
    }

    fn inter(flavor_index: usize) -> Self {
        [Self::XPrime, Self::YPrime, Self::ZPrime][flavor_index]
    }

    /// Majorana flavor 1, 2 or 3 carried by the link.
    pub fn flavor(self) -> u8 {
        match self {
            Self::X | Self::XPrime => 1,
            Self::Y | Self::YPrime => 2,
            Self::Z | Self::ZPrime => 3,
        }
    }

    pub fn is_primed(self) -> bool {
        matches!(self, Self::XPrime | Self::YPrime | Self::ZPrime)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub cell: [usize; 2],
    pub sub: u8,
    pub pos: [f64; 2],
}

impl Site {
    /// Flavor (1..=3) of the corner, i.e. of its inter-triangle link.
    pub fn corner_flavor(&self) -> u8 {
        self.sub % 3 + 1
    }

    pub fn is_a(&self) -> bool {
        self.sub < 3
    }
}

/// A link stored in its canonical orientation `i -> j`. `offset` is the
/// unwrapped cell displacement from `i`'s cell to `j`'s cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub i: usize,
    pub j: usize,
    pub kind: LinkType,
    pub offset: [i64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlaquetteKind {
    Triangle,
    Dodecagon,
    Dangling,
}

/// Counterclockwise site cycle and the links along it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plaquette {
    pub kind: PlaquetteKind,
    pub cell: [usize; 2],
    pub sites: Vec<usize>,
    pub links: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dangling {
    pub site: usize,
    /// Flavor of the Majorana left without a partner.
    pub flavor: u8,
}

/// One closed boundary, walked with the interior on the left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub sites: Vec<usize>,
    /// Dangling sites in walk order.
    pub dangling: Vec<usize>,
    /// Cumulative arc length at each dangling site, measured along the chord
    /// between consecutive dangling sites (1 per cell on a straight edge).
    pub arc: Vec<f64>,
    pub perimeter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub version: u32,
    pub geometry: Geometry,
    pub sites: Vec<Site>,
    pub links: Vec<Link>,
    pub plaquettes: Vec<Plaquette>,
    pub dangling: Vec<Dangling>,
    pub boundaries: Vec<Boundary>,
    #[serde(skip)]
    adjacency: Vec<Vec<(usize, usize)>>,
}

/// Boundary-adjacent pair of dangling sites joined by an auxiliary gauge link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DanglingPair {
    pub a: usize,
    pub b: usize,
    pub flavor_a: u8,
    pub flavor_b: u8,
    /// Lattice links along the boundary from `a` to `b`.
    pub path_links: Vec<usize>,
    /// Sites along the boundary from `a` to `b`, inclusive.
    pub path_sites: Vec<usize>,
}

fn cell_vec(ix: f64, iy: f64) -> [f64; 2] {
    [ix * SQRT3 / 2.0, iy - ix / 2.0]
}

fn bond_dir(flavor_index: usize) -> [f64; 2] {
    let angle = [2.0 * PI / 3.0, 4.0 * PI / 3.0, 0.0][flavor_index];
    [angle.cos(), angle.sin()]
}

/// Position of sublattice `sub` relative to its cell origin.
fn local_pos(sub: u8) -> [f64; 2] {
    let d = (sub % 3) as usize;
    let dir = bond_dir(d);
    if sub < 3 {
        [CORNER * dir[0], CORNER * dir[1]]
    } else {
        let bx = bond_dir(0);
        [BOND * bx[0] - CORNER * dir[0], BOND * bx[1] - CORNER * dir[1]]
    }
}

/// Builds the lattice. Indexing is deterministic: site `(iy * lx + ix) * 6 + sub`,
/// links cell by cell (six internal links, then the three outgoing primed
/// links), plaquettes cell by cell (A triangle, B triangle, dodecagon).
pub fn build_lattice(geometry: &Geometry) -> Result<Lattice> {
    geometry.validate()?;
    let (lx, ly) = (geometry.lx, geometry.ly);
    let idx = |ix: usize, iy: usize, sub: usize| (iy * lx + ix) * 6 + sub;

    let mut sites = Vec::with_capacity(6 * lx * ly);
    for iy in 0..ly {
        for ix in 0..lx {
            let origin = cell_vec(ix as f64, iy as f64);
            for sub in 0..6u8 {
                let loc = local_pos(sub);
                sites.push(Site { cell: [ix, iy], sub, pos: [origin[0] + loc[0], origin[1] + loc[1]] });
            }
        }
    }

    let wrap = |v: i64, n: usize, periodic: bool| -> Option<usize> {
        if (0..n as i64).contains(&v) {
            Some(v as usize)
        } else if periodic {
            Some(v.rem_euclid(n as i64) as usize)
        } else {
            None
        }
    };
    let target_cell = |ix: usize, iy: usize, dx: i64, dy: i64| -> Option<(usize, usize)> {
        Some((
            wrap(ix as i64 + dx, lx, geometry.periodic_x())?,
            wrap(iy as i64 + dy, ly, geometry.periodic_y())?,
        ))
    };

    let mut links = Vec::with_capacity(9 * lx * ly);
    for iy in 0..ly {
        for ix in 0..lx {
            for base in [0usize, 3] {
                for (d, e) in [(2usize, 0usize), (0, 1), (1, 2)] {
                    links.push(Link {
                        i: idx(ix, iy, base + d),
                        j: idx(ix, iy, base + e),
                        kind: LinkType::intra(3 - d - e),
                        offset: [0, 0],
                    });
                }
            }
            for (d, off) in INTER_OFFSET.iter().enumerate() {
                if let Some((tx, ty)) = target_cell(ix, iy, off[0], off[1]) {
                    links.push(Link { i: idx(ix, iy, d), j: idx(tx, ty, 3 + d), kind: LinkType::inter(d), offset: *off });
                }
            }
        }
    }

    let mut pair_lookup = HashMap::with_capacity(links.len());
    for (l, link) in links.iter().enumerate() {
        pair_lookup.insert((link.i.min(link.j), link.i.max(link.j)), l);
    }
    let link_between = |a: usize, b: usize| pair_lookup.get(&(a.min(b), a.max(b))).copied();

    let mut plaquettes = Vec::with_capacity(3 * lx * ly);
    for iy in 0..ly {
        for ix in 0..lx {
            for ring in [[2usize, 0, 1], [4, 5, 3]] {
                let cycle: Vec<usize> = ring.iter().map(|&s| idx(ix, iy, s)).collect();
                let cycle_links = (0..3).map(|k| link_between(cycle[k], cycle[(k + 1) % 3]).expect("triangle link")).collect();
                plaquettes.push(Plaquette { kind: PlaquetteKind::Triangle, cell: [ix, iy], sites: cycle, links: cycle_links });
            }
            // Hexagon vertices counterclockwise: (cell offset, sublattice of the
            // entry corner, sublattice of the exit corner).
            let ring: [([i64; 2], usize, usize); 6] = [
                ([1, 1], 1, 0),
                ([1, 1], 3, 5),
                ([0, 1], 2, 1),
                ([0, 0], 4, 3),
                ([0, 0], 0, 2),
                ([1, 0], 5, 4),
            ];
            let mut cycle = Vec::with_capacity(12);
            let mut complete = true;
            for (off, s_in, s_out) in ring {
                match target_cell(ix, iy, off[0], off[1]) {
                    Some((cx, cy)) => {
                        cycle.push(idx(cx, cy, s_in));
                        cycle.push(idx(cx, cy, s_out));
                    }
                    None => complete = false,
                }
            }
            if !complete {
                continue;
            }
            let cycle_links: Option<Vec<usize>> = (0..12).map(|k| link_between(cycle[k], cycle[(k + 1) % 12])).collect();
            if let Some(cycle_links) = cycle_links {
                plaquettes.push(Plaquette { kind: PlaquetteKind::Dodecagon, cell: [ix, iy], sites: cycle, links: cycle_links });
            }
        }
    }

    let mut lattice = Lattice {
        version: SCHEMA_VERSION,
        geometry: geometry.clone(),
        sites,
        links,
        plaquettes,
        dangling: Vec::new(),
        boundaries: Vec::new(),
        adjacency: Vec::new(),
    };
    lattice.rebuild_adjacency();
    lattice.dangling = lattice.find_dangling();
    lattice.boundaries = lattice.trace_boundaries();
    Ok(lattice)
}

impl Lattice {
    fn rebuild_adjacency(&mut self) {
        let mut adjacency = vec![Vec::with_capacity(3); self.sites.len()];
        for (l, link) in self.links.iter().enumerate() {
            adjacency[link.i].push((link.j, l));
            adjacency[link.j].push((link.i, l));
        }
        self.adjacency = adjacency;
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut lattice: Lattice = serde_json::from_str(text)?;
        if lattice.version != SCHEMA_VERSION {
            return Err(invalid(format!("unsupported lattice schema version {}", lattice.version)));
        }
        lattice.rebuild_adjacency();
        Ok(lattice)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// `(neighbor, link)` pairs of a site.
    pub fn neighbors(&self, site: usize) -> &[(usize, usize)] {
        &self.adjacency[site]
    }

    pub fn coordination(&self, site: usize) -> usize {
        self.adjacency[site].len()
    }

    pub fn dangling_flavor(&self, site: usize) -> Option<u8> {
        self.dangling.iter().find(|d| d.site == site).map(|d| d.flavor)
    }

    pub fn count_plaquettes(&self, kind: PlaquetteKind) -> usize {
        self.plaquettes.iter().filter(|p| p.kind == kind).count()
    }

    /// Plaquettes bordering each link, with multiplicity.
    pub fn link_plaquettes(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.links.len()];
        for (p, plaq) in self.plaquettes.iter().enumerate() {
            for &l in &plaq.links {
                out[l].push(p);
            }
        }
        out
    }

    /// Displacement from `from` to the other end of `link`, unwrapped.
    pub fn link_vector(&self, link: usize, from: usize) -> [f64; 2] {
        let l = &self.links[link];
        let li = local_pos(self.sites[l.i].sub);
        let lj = local_pos(self.sites[l.j].sub);
        let shift = cell_vec(l.offset[0] as f64, l.offset[1] as f64);
        let v = [lj[0] + shift[0] - li[0], lj[1] + shift[1] - li[1]];
        if from == l.i {
            v
        } else {
            [-v[0], -v[1]]
        }
    }

    /// Geometric center of a plaquette (unwrapped around its first site).
    pub fn plaquette_center(&self, p: usize) -> [f64; 2] {
        let plaq = &self.plaquettes[p];
        let mut cur = self.sites[plaq.sites[0]].pos;
        let mut sum = cur;
        for k in 0..plaq.sites.len() - 1 {
            let v = self.link_vector(plaq.links[k], plaq.sites[k]);
            cur = [cur[0] + v[0], cur[1] + v[1]];
            sum = [sum[0] + cur[0], sum[1] + cur[1]];
        }
        let n = plaq.sites.len() as f64;
        [sum[0] / n, sum[1] / n]
    }

    /// Unit vector from a dangling site toward its missing partner.
    pub fn outward(&self, site: usize) -> [f64; 2] {
        let s = &self.sites[site];
        let dir = bond_dir((s.sub % 3) as usize);
        if s.is_a() {
            dir
        } else {
            [-dir[0], -dir[1]]
        }
    }

    fn find_dangling(&self) -> Vec<Dangling> {
        let mut out = Vec::new();
        for site in 0..self.sites.len() {
            if self.coordination(site) == 2 {
                let mut seen = [false; 4];
                for &(_, l) in self.neighbors(site) {
                    seen[self.links[l].kind.flavor() as usize] = true;
                }
                let flavor = (1..=3u8).find(|&f| !seen[f as usize]).expect("coordination-2 site lacks a free flavor");
                out.push(Dangling { site, flavor });
            }
        }
        out
    }

    /// Next boundary step: the first neighbor met rotating counterclockwise
    /// from the direction we arrived from, which keeps the exterior on the right.
    fn turn(&self, v: usize, back: f64) -> (usize, usize) {
        let mut best = None;
        let mut best_turn = f64::INFINITY;
        for &(w, l) in self.neighbors(v) {
            let d = self.link_vector(l, v);
            let mut turn = (d[1].atan2(d[0]) - back).rem_euclid(2.0 * PI);
            if turn < 1e-9 {
                turn = 2.0 * PI;
            }
            if turn < best_turn {
                best_turn = turn;
                best = Some((w, l));
            }
        }
        best.expect("isolated site")
    }

    fn walk(&self, start: usize) -> (Vec<usize>, Vec<usize>) {
        let out = self.outward(start);
        let mut back = out[1].atan2(out[0]);
        let mut v = start;
        let mut first = None;
        let (mut sites, mut links) = (Vec::new(), Vec::new());
        for _ in 0..=4 * self.sites.len() {
            let (w, l) = self.turn(v, back);
            if first == Some((v, w)) {
                break;
            }
            first.get_or_insert((v, w));
            sites.push(v);
            links.push(l);
            let d = self.link_vector(l, v);
            back = (-d[1]).atan2(-d[0]);
            v = w;
        }
        (sites, links)
    }

    fn trace_boundaries(&self) -> Vec<Boundary> {
        let mut visited = vec![false; self.sites.len()];
        let mut out = Vec::new();
        let centroid_x = self.sites.iter().map(|s| s.pos[0]).sum::<f64>() / self.sites.len() as f64;
        let centroid_y = self.sites.iter().map(|s| s.pos[1]).sum::<f64>() / self.sites.len() as f64;
        for d in &self.dangling {
            if visited[d.site] {
                continue;
            }
            let (mut sites, mut links) = self.walk(d.site);
            // Orientation check: interior must lie on the left of each step.
            let mut score = 0.0;
            let mut cur = self.sites[sites[0]].pos;
            for (k, &l) in links.iter().enumerate() {
                let v = self.link_vector(l, sites[k]);
                let mid = [cur[0] + v[0] / 2.0, cur[1] + v[1] / 2.0];
                let normal = [-v[1], v[0]];
                score += normal[0] * (centroid_x - mid[0]);
                if !self.geometry.periodic_y() {
                    score += normal[1] * (centroid_y - mid[1]);
                }
                cur = [cur[0] + v[0], cur[1] + v[1]];
            }
            if score < 0.0 {
                sites.reverse();
                (sites, links) = self.realign(&sites);
            }
            for &s in &sites {
                visited[s] = true;
            }
            // Start at the smallest dangling index for determinism.
            let start = sites
                .iter()
                .enumerate()
                .filter(|(_, &s)| self.coordination(s) == 2)
                .min_by_key(|(_, &s)| s)
                .map(|(k, _)| k)
                .unwrap_or(0);
            sites.rotate_left(start);
            links.rotate_left(start);
            out.push(self.boundary_from_walk(sites, links));
        }
        out.sort_by_key(|b| b.dangling.first().copied().unwrap_or(usize::MAX));
        out
    }

    /// Links for a closed site walk, each leaving the site at the same index.
    fn realign(&self, sites: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let n = sites.len();
        let links = (0..n)
            .map(|k| {
                let (a, b) = (sites[k], sites[(k + 1) % n]);
                self.neighbors(a).iter().find(|&&(w, _)| w == b).map(|&(_, l)| l).expect("walk step without link")
            })
            .collect();
        (sites.to_vec(), links)
    }

    fn boundary_from_walk(&self, sites: Vec<usize>, links: Vec<usize>) -> Boundary {
        let mut dangling = Vec::new();
        let mut arc = Vec::new();
        let mut cur = [0.0, 0.0];
        let mut last: Option<[f64; 2]> = None;
        let mut total = 0.0;
        for (k, &s) in sites.iter().enumerate() {
            if self.coordination(s) == 2 {
                if let Some(prev) = last {
                    total += ((cur[0] - prev[0]).powi(2) + (cur[1] - prev[1]).powi(2)).sqrt();
                }
                dangling.push(s);
                arc.push(total);
                last = Some(cur);
            }
            let v = self.link_vector(links[k], s);
            cur = [cur[0] + v[0], cur[1] + v[1]];
        }
        // The walk starts on a dangling site, so `cur` is where that site reappears
        // after one lap: the origin on a droplet, one circumference away on a cylinder.
        let perimeter = match last {
            Some(prev) => total + ((cur[0] - prev[0]).powi(2) + (cur[1] - prev[1]).powi(2)).sqrt(),
            None => 0.0,
        };
        Boundary { sites, dangling, arc, perimeter }
    }

    /// Boundary containing `site` and its index in that boundary's dangling list.
    pub fn boundary_position(&self, site: usize) -> Option<(usize, usize)> {
        self.boundaries
            .iter()
            .enumerate()
            .find_map(|(b, bd)| bd.dangling.iter().position(|&s| s == site).map(|k| (b, k)))
    }

    /// Arc length from dangling site `a` to `b` walking with the interior on
    /// the left (`forward`) or against it. `None` if they lie on different
    /// boundaries.
    pub fn boundary_arc(&self, a: usize, b: usize, forward: bool) -> Option<f64> {
        let (ba, ka) = self.boundary_position(a)?;
        let (bb, kb) = self.boundary_position(b)?;
        if ba != bb {
            return None;
        }
        let bd = &self.boundaries[ba];
        let ahead = (bd.arc[kb] - bd.arc[ka]).rem_euclid(bd.perimeter);
        Some(if forward { ahead } else { (bd.perimeter - ahead).rem_euclid(bd.perimeter) })
    }

    /// Pairs consecutive dangling sites along each boundary, skipping
    /// `reserved` sites. Deterministic: each boundary starts at its smallest
    /// dangling index; a trailing odd site stays unpaired.
    pub fn dangling_pairs(&self, reserved: &[usize]) -> Vec<DanglingPair> {
        let mut out = Vec::new();
        for bd in &self.boundaries {
            let free: Vec<usize> = bd.dangling.iter().copied().filter(|s| !reserved.contains(s)).collect();
            for chunk in free.chunks_exact(2) {
                let (a, b) = (chunk[0], chunk[1]);
                let ka = bd.sites.iter().position(|&s| s == a).expect("dangling site on walk");
                let kb = bd.sites.iter().position(|&s| s == b).expect("dangling site on walk");
                let n = bd.sites.len();
                let steps = (kb + n - ka) % n;
                let mut path_sites = Vec::with_capacity(steps + 1);
                let mut path_links = Vec::with_capacity(steps);
                for t in 0..steps {
                    let (u, w) = (bd.sites[(ka + t) % n], bd.sites[(ka + t + 1) % n]);
                    path_sites.push(u);
                    let l = self.neighbors(u).iter().find(|&&(x, _)| x == w).map(|&(_, l)| l).expect("boundary step");
                    path_links.push(l);
                }
                path_sites.push(b);
                out.push(DanglingPair {
                    a,
                    b,
                    flavor_a: self.dangling_flavor(a).expect("dangling"),
                    flavor_b: self.dangling_flavor(b).expect("dangling"),
                    path_links,
                    path_sites,
                });
            }
        }
        out
    }

    /// Cell coordinates of the Bloch orbital for a cylinder site: `ix * 6 + sub`.
    pub fn orbital(&self, site: usize) -> usize {
        let s = &self.sites[site];
        s.cell[0] * 6 + s.sub as usize
    }
}
