//! Static Z2 gauge fields on the lattice links and their plaquette fluxes.
//!
//! Each lattice link stores one sign in its canonical orientation `i -> j`;
//! the reverse direction is the negative. Auxiliary links join Majoranas that
//! have no lattice partner (dangling pairs, registers). Their endpoints may
//! refer to register indices beyond the lattice sites.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lattice::{DanglingPair, Lattice, PlaquetteKind};

/// Link between two Majoranas outside the lattice link set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxLink {
    pub i: usize,
    pub flavor_i: u8,
    pub j: usize,
    pub flavor_j: u8,
    pub u: i8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GaugeConfig {
    pub u: Vec<i8>,
    pub aux: Vec<AuxLink>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FluxPattern {
    pub w: Vec<i8>,
}

impl FluxPattern {
    pub fn vortex_count(&self) -> usize {
        self.w.iter().filter(|&&w| w < 0).count()
    }

    pub fn vortices(&self) -> Vec<usize> {
        self.w.iter().enumerate().filter(|(_, &w)| w < 0).map(|(p, _)| p).collect()
    }
}

/// Plaquettes `p_0 .. p_n` with `links[k]` separating `plaquettes[k]` and
/// `plaquettes[k + 1]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualPath {
    pub plaquettes: Vec<usize>,
    pub links: Vec<usize>,
}

/// Serialized form: links flipped relative to the ground configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GaugeDeltas {
    pub version: u32,
    pub n_links: usize,
    pub flipped: Vec<usize>,
    pub aux: Vec<AuxLink>,
}

/// All links +1 in canonical orientation, which is the zero-flux sector.
pub fn ground_gauge(lattice: &Lattice) -> GaugeConfig {
    GaugeConfig { u: vec![1; lattice.links.len()], aux: Vec::new() }
}

impl GaugeConfig {
    /// Sign of `U_{from -> to}` for lattice link `link`.
    pub fn oriented(&self, lattice: &Lattice, link: usize, from: usize) -> i8 {
        if lattice.links[link].i == from {
            self.u[link]
        } else {
            -self.u[link]
        }
    }

    pub fn flip(&self, link: usize) -> Self {
        let mut out = self.clone();
        out.u[link] = -out.u[link];
        out
    }

    /// Flip every link (lattice and auxiliary) touching `site`.
    pub fn site_transform(&self, lattice: &Lattice, site: usize) -> Self {
        let mut out = self.clone();
        if site < lattice.n_sites() {
            for &(_, l) in lattice.neighbors(site) {
                out.u[l] = -out.u[l];
            }
        }
        for a in &mut out.aux {
            if a.i == site || a.j == site {
                a.u = -a.u;
            }
        }
        out
    }

    /// Adds one auxiliary link per dangling pair, oriented `a -> b` with sign +1.
    pub fn with_dangling_pairs(&self, pairs: &[DanglingPair]) -> Self {
        let mut out = self.clone();
        out.aux.extend(pairs.iter().map(|p| AuxLink { i: p.a, flavor_i: p.flavor_a, j: p.b, flavor_j: p.flavor_b, u: 1 }));
        out
    }

    pub fn to_deltas(&self) -> GaugeDeltas {
        GaugeDeltas {
            version: crate::lattice::SCHEMA_VERSION,
            n_links: self.u.len(),
            flipped: self.u.iter().enumerate().filter(|(_, &u)| u < 0).map(|(l, _)| l).collect(),
            aux: self.aux.clone(),
        }
    }

    pub fn from_deltas(lattice: &Lattice, deltas: &GaugeDeltas) -> Result<Self> {
        if deltas.n_links != lattice.links.len() {
            return Err(invalid(format!("gauge has {} links, lattice has {}", deltas.n_links, lattice.links.len())));
        }
        let mut g = ground_gauge(lattice);
        for &l in &deltas.flipped {
            if l >= g.u.len() {
                return Err(invalid(format!("link index {l} out of range")));
            }
            g.u[l] = -1;
        }
        g.aux = deltas.aux.clone();
        Ok(g)
    }
}

/// Product of the canonical-arrow signs around every plaquette.
///
/// Each site touches exactly two links of any plaquette through it, so site
/// transforms cancel. Taking the product along the arrows rather than along the
/// traversal direction makes the ground sector +1 everywhere; the traversal
/// product differs by `(-1)` on dodecagons.
pub fn flux_pattern(lattice: &Lattice, gauge: &GaugeConfig) -> FluxPattern {
    let w = lattice.plaquettes.iter().map(|p| p.links.iter().map(|&l| gauge.u[l]).product()).collect();
    FluxPattern { w }
}

/// Flux through the loop closed by a dangling pair: its auxiliary link plus
/// the boundary links between the two sites.
pub fn dangling_flux(gauge: &GaugeConfig, pair: &DanglingPair) -> Option<i8> {
    let aux = gauge.aux.iter().find(|x| (x.i, x.j) == (pair.a, pair.b) || (x.i, x.j) == (pair.b, pair.a))?;
    Some(aux.u * pair.path_links.iter().map(|&l| gauge.u[l]).product::<i8>())
}

/// Flips every intra-triangle link, which negates all triangle fluxes and
/// leaves dodecagons untouched.
pub fn reversed_triangles(lattice: &Lattice, gauge: &GaugeConfig) -> GaugeConfig {
    let mut out = gauge.clone();
    for (l, link) in lattice.links.iter().enumerate() {
        if !link.kind.is_primed() {
            out.u[l] = -out.u[l];
        }
    }
    out
}

/// Flips the links of a dual path, creating (or annihilating) vortices at its
/// two ends.
pub fn insert_vortex_pair(lattice: &Lattice, gauge: &GaugeConfig, path: &DualPath) -> Result<GaugeConfig> {
    if path.plaquettes.len() != path.links.len() + 1 {
        return Err(invalid("dual path needs exactly one more plaquette than links"));
    }
    let borders = lattice.link_plaquettes();
    let mut out = gauge.clone();
    for (k, &l) in path.links.iter().enumerate() {
        let (p, q) = (path.plaquettes[k], path.plaquettes[k + 1]);
        let ok = l < lattice.links.len()
            && p != q
            && borders[l].iter().filter(|&&x| x == p).count() == 1
            && borders[l].iter().filter(|&&x| x == q).count() == 1;
        if !ok {
            return Err(invalid(format!("link {l} does not separate plaquettes {p} and {q}")));
        }
        out.u[l] = -out.u[l];
    }
    Ok(out)
}

/// Breadth-first shortest dual path. Links bordering a plaquette twice are
/// skipped, so the result is always a valid `insert_vortex_pair` argument.
pub fn shortest_dual_path(lattice: &Lattice, from: usize, to: usize) -> Option<DualPath> {
    let borders = lattice.link_plaquettes();
    let mut dual: Vec<Vec<(usize, usize)>> = vec![Vec::new(); lattice.plaquettes.len()];
    for (l, ps) in borders.iter().enumerate() {
        if let [p, q] = ps[..] {
            if p != q {
                dual[p].push((q, l));
                dual[q].push((p, l));
            }
        }
    }
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; dual.len()];
    let mut seen = vec![false; dual.len()];
    let mut queue = VecDeque::from([from]);
    seen[from] = true;
    while let Some(p) = queue.pop_front() {
        if p == to {
            break;
        }
        for &(q, l) in &dual[p] {
            if !seen[q] {
                seen[q] = true;
                prev[q] = Some((p, l));
                queue.push_back(q);
            }
        }
    }
    if !seen[to] {
        return None;
    }
    let (mut plaquettes, mut links) = (vec![to], Vec::new());
    let mut cur = to;
    while let Some((p, l)) = prev[cur] {
        plaquettes.push(p);
        links.push(l);
        cur = p;
    }
    plaquettes.reverse();
    links.reverse();
    Some(DualPath { plaquettes, links })
}

/// Plaquettes of one kind, ordered by index.
pub fn plaquettes_of(lattice: &Lattice, kind: PlaquetteKind) -> Vec<usize> {
    (0..lattice.plaquettes.len()).filter(|&p| lattice.plaquettes[p].kind == kind).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, Geometry};
    use proptest::prelude::*;

    fn torus() -> Lattice {
        build_lattice(&Geometry::torus(3, 3)).unwrap()
    }

    #[test]
    fn ground_sector_has_no_vortices() {
        for geom in [Geometry::torus(2, 2), Geometry::torus(4, 3), Geometry::cylinder(3, 4), Geometry::droplet(4, 4)] {
            let lat = build_lattice(&geom).unwrap();
            let w = flux_pattern(&lat, &ground_gauge(&lat));
            assert!(w.w.iter().all(|&x| x == 1), "{geom:?}");
        }
    }

    #[test]
    fn intra_flip_hits_triangle_and_dodecagon() {
        let lat = torus();
        let l = lat.links.iter().position(|l| !l.kind.is_primed()).unwrap();
        let w = flux_pattern(&lat, &ground_gauge(&lat).flip(l));
        let kinds: Vec<_> = w.vortices().iter().map(|&p| lat.plaquettes[p].kind).collect();
        assert_eq!(kinds.len(), 2);
        assert!(kinds.contains(&PlaquetteKind::Triangle));
        assert!(kinds.contains(&PlaquetteKind::Dodecagon));
    }

    #[test]
    fn torus_flux_product_is_one() {
        let lat = torus();
        let mut g = ground_gauge(&lat);
        for l in [0, 5, 11, 17, 30] {
            g = g.flip(l);
        }
        assert_eq!(flux_pattern(&lat, &g).w.iter().map(|&x| x as i32).product::<i32>(), 1);
    }

    #[test]
    fn reversed_triangles_negates_only_triangles() {
        let lat = torus();
        let w = flux_pattern(&lat, &reversed_triangles(&lat, &ground_gauge(&lat)));
        for (p, plaq) in lat.plaquettes.iter().enumerate() {
            let expect = if plaq.kind == PlaquetteKind::Triangle { -1 } else { 1 };
            assert_eq!(w.w[p], expect);
        }
    }

    #[test]
    fn vortex_pair_paths() {
        let lat = build_lattice(&Geometry::torus(5, 5)).unwrap();
        let g0 = ground_gauge(&lat);
        let dodecagons = plaquettes_of(&lat, PlaquetteKind::Dodecagon);
        let (p, q) = (dodecagons[0], dodecagons[12]);
        let path = shortest_dual_path(&lat, p, q).unwrap();
        let g1 = insert_vortex_pair(&lat, &g0, &path).unwrap();
        assert_eq!(flux_pattern(&lat, &g1).vortices(), vec![p.min(q), p.max(q)]);
        assert_eq!(insert_vortex_pair(&lat, &g1, &path).unwrap(), g0);

        let single = DualPath { plaquettes: path.plaquettes[..2].to_vec(), links: path.links[..1].to_vec() };
        let mut ends = single.plaquettes.clone();
        ends.sort();
        assert_eq!(flux_pattern(&lat, &insert_vortex_pair(&lat, &g0, &single).unwrap()).vortices(), ends);

        let two = DualPath { plaquettes: path.plaquettes[..3].to_vec(), links: path.links[..2].to_vec() };
        let w = flux_pattern(&lat, &insert_vortex_pair(&lat, &g0, &two).unwrap());
        assert_eq!(w.w[two.plaquettes[1]], 1);
        assert_eq!(w.vortex_count(), 2);
    }

    #[test]
    fn rejects_disconnected_path() {
        let lat = torus();
        let bad = DualPath { plaquettes: vec![0, 1], links: vec![lat.links.len() - 1] };
        let g0 = ground_gauge(&lat);
        let borders = lat.link_plaquettes();
        assert!(!(borders[bad.links[0]].contains(&0) && borders[bad.links[0]].contains(&1)));
        assert!(insert_vortex_pair(&lat, &g0, &bad).is_err());
    }

    #[test]
    fn deltas_round_trip() {
        let lat = build_lattice(&Geometry::droplet(3, 3)).unwrap();
        let g = ground_gauge(&lat).flip(3).flip(9).with_dangling_pairs(&lat.dangling_pairs(&[]));
        let text = serde_json::to_string(&g.to_deltas()).unwrap();
        let back = GaugeConfig::from_deltas(&lat, &serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn dangling_flux_is_gauge_invariant() {
        let lat = build_lattice(&Geometry::droplet(3, 4)).unwrap();
        let pairs = lat.dangling_pairs(&[]);
        let g = ground_gauge(&lat).with_dangling_pairs(&pairs);
        let before: Vec<_> = pairs.iter().map(|p| dangling_flux(&g, p).unwrap()).collect();
        let h = g.site_transform(&lat, pairs[0].a).site_transform(&lat, pairs[1].path_sites[1]);
        let after: Vec<_> = pairs.iter().map(|p| dangling_flux(&h, p).unwrap()).collect();
        assert_eq!(before, after);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn flux_invariant_under_site_transforms(sites in proptest::collection::vec(0usize..54, 1..40), flips in proptest::collection::vec(0usize..81, 0..6)) {
            let lat = torus();
            let mut g = ground_gauge(&lat);
            for l in flips {
                g = g.flip(l);
            }
            let w0 = flux_pattern(&lat, &g);
            for s in sites {
                g = g.site_transform(&lat, s);
            }
            prop_assert_eq!(flux_pattern(&lat, &g), w0);
        }

        #[test]
        fn single_flip_changes_vortex_count_by_even(flips in proptest::collection::vec(0usize..81, 0..8), l in 0usize..81) {
            let lat = torus();
            let mut g = ground_gauge(&lat);
            for f in flips {
                g = g.flip(f);
            }
            let before = flux_pattern(&lat, &g).vortex_count() as i64;
            let after = flux_pattern(&lat, &g.flip(l)).vortex_count() as i64;
            prop_assert_eq!((after - before).rem_euclid(2), 0);
        }
    }
}
