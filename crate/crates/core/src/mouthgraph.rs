//! Site and tooth topology of a mouth (or part of one) and the three
//! adjacency variants used by the CAR prior.
//!
//! Sites are stored in "jaw order": within a jaw, teeth run from the back of
//! one quadrant to the back of the other, so the interproximal gap at the
//! midline sits between two consecutive teeth. Each tooth carries six sites,
//! indexed `0..6` as buccal (left, mid, right) then lingual (left, mid,
//! right), where left/right follow the jaw order. A single quadrant runs from
//! the front tooth to the back.
//!
//! Grid 1 joins, per tooth, the buccal path, the lingual path and the two
//! buccal-lingual pairs at the interproximal ends, plus the same-side gap
//! links to the next tooth in the jaw. Grid 2 drops the buccal-lingual links.
//! Grid 3 replaces the within-tooth edges with a 6-clique. Jaws never connect.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const SITES_PER_TOOTH: usize = 6;

/// Incisors through third molar.
pub const MAX_TEETH_PER_QUADRANT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridVariant {
    Grid1,
    Grid2,
    Grid3,
    /// Adjacency read from an edge list.
    Imported,
}

impl fmt::Display for GridVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GridVariant::Grid1 => "1",
            GridVariant::Grid2 => "2",
            GridVariant::Grid3 => "3",
            GridVariant::Imported => "imported",
        };
        f.write_str(s)
    }
}

impl FromStr for GridVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "grid1" => Ok(GridVariant::Grid1),
            "2" | "grid2" => Ok(GridVariant::Grid2),
            "3" | "grid3" => Ok(GridVariant::Grid3),
            other => Err(Error::Config(format!("unknown grid variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Jaw {
    Maxilla,
    Mandible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Buccal,
    Lingual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Mesial,
    Mid,
    Distal,
}

impl Jaw {
    pub fn as_str(self) -> &'static str {
        match self {
            Jaw::Maxilla => "maxilla",
            Jaw::Mandible => "mandible",
        }
    }
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Buccal => "buccal",
            Side::Lingual => "lingual",
        }
    }
}

impl Position {
    pub fn as_str(self) -> &'static str {
        match self {
            Position::Mesial => "mesial",
            Position::Mid => "mid",
            Position::Distal => "distal",
        }
    }
}

/// Per-site labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteInfo {
    pub tooth: usize,
    pub jaw: Jaw,
    pub quadrant: usize,
    /// 1 = central incisor, counting back.
    pub tooth_number: usize,
    pub side: Side,
    pub position: Position,
    /// True if the site faces another tooth across an interproximal gap.
    pub gap: bool,
}

#[derive(Debug, Clone)]
pub struct MouthGraph {
    teeth_per_quadrant: usize,
    n_quadrants: usize,
    grid: GridVariant,
    sites: Vec<SiteInfo>,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl MouthGraph {
    /// Build the graph for `n_quadrants` quadrants (1 = half jaw, 2 = one jaw,
    /// 4 = full mouth) of `teeth_per_quadrant` teeth each.
    pub fn build(teeth_per_quadrant: usize, n_quadrants: usize, grid: GridVariant) -> Result<Self> {
        if !(1..=MAX_TEETH_PER_QUADRANT).contains(&teeth_per_quadrant) {
            return Err(Error::Config(format!(
                "teeth_per_quadrant must be between 1 and {MAX_TEETH_PER_QUADRANT} (got {teeth_per_quadrant})"
            )));
        }
        if !matches!(n_quadrants, 1 | 2 | 4) {
            return Err(Error::Config(format!(
                "n_quadrants must be 1, 2 or 4 (got {n_quadrants})"
            )));
        }
        if grid == GridVariant::Imported {
            return Err(Error::Config("imported grids are built with `with_edges`".into()));
        }

        // (jaw, quadrant, reversed) per quadrant in site order.
        let layout: Vec<(Jaw, usize, bool)> = match n_quadrants {
            1 => vec![(Jaw::Maxilla, 1, false)],
            2 => vec![(Jaw::Maxilla, 1, true), (Jaw::Maxilla, 2, false)],
            _ => vec![
                (Jaw::Maxilla, 1, true),
                (Jaw::Maxilla, 2, false),
                (Jaw::Mandible, 3, true),
                (Jaw::Mandible, 4, false),
            ],
        };

        let mut sites = Vec::new();
        // Teeth in jaw order, grouped by jaw.
        let mut jaws: Vec<Vec<usize>> = Vec::new();
        let mut tooth = 0;
        for (qi, &(jaw, quadrant, reversed)) in layout.iter().enumerate() {
            if qi % 2 == 0 {
                jaws.push(Vec::new());
            }
            for k in 0..teeth_per_quadrant {
                let tooth_number = if reversed { teeth_per_quadrant - k } else { k + 1 };
                // Left end of the tooth in jaw order is mesial when the
                // quadrant runs front to back.
                let (left, right) = if reversed {
                    (Position::Distal, Position::Mesial)
                } else {
                    (Position::Mesial, Position::Distal)
                };
                for idx in 0..SITES_PER_TOOTH {
                    let side = if idx < 3 { Side::Buccal } else { Side::Lingual };
                    let position = match idx % 3 {
                        0 => left,
                        1 => Position::Mid,
                        _ => right,
                    };
                    sites.push(SiteInfo {
                        tooth,
                        jaw,
                        quadrant,
                        tooth_number,
                        side,
                        position,
                        gap: false,
                    });
                }
                jaws.last_mut().expect("jaw pushed").push(tooth);
                tooth += 1;
            }
        }

        let mut edges = BTreeSet::new();
        let base = |t: usize| t * SITES_PER_TOOTH;
        for jaw_teeth in &jaws {
            for &t in jaw_teeth {
                let b = base(t);
                match grid {
                    GridVariant::Grid3 => {
                        for a in 0..SITES_PER_TOOTH {
                            for c in (a + 1)..SITES_PER_TOOTH {
                                edges.insert((b + a, b + c));
                            }
                        }
                    }
                    _ => {
                        for (a, c) in [(0, 1), (1, 2), (3, 4), (4, 5)] {
                            edges.insert((b + a, b + c));
                        }
                        if grid == GridVariant::Grid1 {
                            edges.insert((b, b + 3));
                            edges.insert((b + 2, b + 5));
                        }
                    }
                }
            }
            for pair in jaw_teeth.windows(2) {
                let (l, r) = (base(pair[0]), base(pair[1]));
                edges.insert((l + 2, r));
                edges.insert((l + 5, r + 3));
                for s in [l + 2, l + 5, r, r + 3] {
                    sites[s].gap = true;
                }
            }
        }

        let mut graph = MouthGraph {
            teeth_per_quadrant,
            n_quadrants,
            grid,
            sites,
            edges: Vec::new(),
            neighbors: Vec::new(),
        };
        graph.set_edges(edges.into_iter().collect())?;
        Ok(graph)
    }

    /// Replace the adjacency with an imported edge list over the same sites.
    pub fn with_edges(mut self, edges: &[(usize, usize)]) -> Result<Self> {
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a == b {
                return Err(Error::Validation {
                    row: None,
                    message: format!("self-loop at site {a}"),
                });
            }
            if a >= self.n_sites() || b >= self.n_sites() {
                return Err(Error::Validation {
                    row: None,
                    message: format!("edge ({a}, {b}) outside 0..{}", self.n_sites()),
                });
            }
            set.insert((a.min(b), a.max(b)));
        }
        self.grid = GridVariant::Imported;
        self.set_edges(set.into_iter().collect())?;
        Ok(self)
    }

    fn set_edges(&mut self, edges: Vec<(usize, usize)>) -> Result<()> {
        let mut neighbors = vec![Vec::new(); self.sites.len()];
        for &(a, b) in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        if let Some(s) = neighbors.iter().position(Vec::is_empty) {
            return Err(Error::Validation {
                row: None,
                message: format!("site {s} has no neighbours"),
            });
        }
        self.edges = edges;
        self.neighbors = neighbors;
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_teeth(&self) -> usize {
        self.sites.len() / SITES_PER_TOOTH
    }

    pub fn teeth_per_quadrant(&self) -> usize {
        self.teeth_per_quadrant
    }

    pub fn n_quadrants(&self) -> usize {
        self.n_quadrants
    }

    pub fn grid(&self) -> GridVariant {
        self.grid
    }

    pub fn sites(&self) -> &[SiteInfo] {
        &self.sites
    }

    pub fn site(&self, s: usize) -> &SiteInfo {
        &self.sites[s]
    }

    /// Undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, s: usize) -> &[usize] {
        &self.neighbors[s]
    }

    /// Neighbour count m(s).
    pub fn degree(&self, s: usize) -> usize {
        self.neighbors[s].len()
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.neighbors.iter().map(|n| n.len() as f64).collect()
    }

    pub fn tooth_of_site(&self, s: usize) -> usize {
        self.sites[s].tooth
    }

    pub fn sites_of_tooth(&self, t: usize) -> std::ops::Range<usize> {
        t * SITES_PER_TOOTH..(t + 1) * SITES_PER_TOOTH
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    /// Dense 0/1 adjacency matrix, row-major.
    pub fn adjacency_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n_sites();
        let mut d = vec![vec![0.0; n]; n];
        for &(a, b) in &self.edges {
            d[a][b] = 1.0;
            d[b][a] = 1.0;
        }
        d
    }

    /// Number of connected components.
    pub fn n_components(&self) -> usize {
        let n = self.n_sites();
        let mut seen = vec![false; n];
        let mut count = 0;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(s) = stack.pop() {
                for &nb in &self.neighbors[s] {
                    if !seen[nb] {
                        seen[nb] = true;
                        stack.push(nb);
                    }
                }
            }
        }
        count
    }

    pub fn tooth_average_map(&self) -> ToothAverageMap {
        ToothAverageMap {
            n_sites: self.n_sites(),
            rows: (0..self.n_teeth()).map(|t| self.sites_of_tooth(t).collect()).collect(),
        }
    }

    /// Write `site_a,site_b` rows (0-based site indices).
    pub fn write_edges_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["site_a", "site_b"])?;
        for &(a, b) in &self.edges {
            w.write_record([a.to_string(), b.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Write `site,tooth,jaw,side,position` rows.
    pub fn write_sites_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["site", "tooth", "jaw", "side", "position", "tooth_number", "gap"])?;
        for (s, info) in self.sites.iter().enumerate() {
            w.write_record([
                s.to_string(),
                info.tooth.to_string(),
                info.jaw.as_str().to_string(),
                info.side.as_str().to_string(),
                info.position.as_str().to_string(),
                info.tooth_number.to_string(),
                u8::from(info.gap).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parse an edge-list CSV with header `site_a,site_b`.
pub fn parse_edge_list<R: Read>(input: R) -> Result<Vec<(usize, usize)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "site_a" || &headers[1] != "site_b" {
        return Err(Error::validation(Some(1), "edge list header must be `site_a,site_b`"));
    }
    let mut edges = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec?;
        let parse = |i: usize| -> Result<usize> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::validation(Some(row), "site index must be a non-negative integer"))
        };
        edges.push((parse(0)?, parse(1)?));
    }
    Ok(edges)
}

/// Averaging operator Z: row t holds 1/6 at the six sites of tooth t.
#[derive(Debug, Clone, PartialEq)]
pub struct ToothAverageMap {
    n_sites: usize,
    rows: Vec<Vec<usize>>,
}

impl ToothAverageMap {
    /// Identity-like map where each site is its own averaging unit.
    pub fn per_site(n_sites: usize) -> Self {
        ToothAverageMap {
            n_sites,
            rows: (0..n_sites).map(|s| vec![s]).collect(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn row_sites(&self, t: usize) -> &[usize] {
        &self.rows[t]
    }

    pub fn weight(&self, t: usize) -> f64 {
        1.0 / self.rows[t].len() as f64
    }

    /// Z_t' μ.
    pub fn average(&self, t: usize, mu: &[f64]) -> f64 {
        self.rows[t].iter().map(|&s| mu[s]).sum::<f64>() * self.weight(t)
    }

    /// Z μ.
    pub fn apply(&self, mu: &[f64]) -> Vec<f64> {
        (0..self.rows.len()).map(|t| self.average(t, mu)).collect()
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|sites| {
                let mut row = vec![0.0; self.n_sites];
                let w = 1.0 / sites.len() as f64;
                for &s in sites {
                    row[s] = w;
                }
                row
            })
            .collect()
    }
}
