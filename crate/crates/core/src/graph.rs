//! Static city graph and the complete group-graph scaffold.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_RADIUS_KM: f64 = 250.0;

/// How inter-city distance is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Great-circle distance in kilometres.
    #[default]
    Haversine,
    /// Plain Euclidean distance on (lon, lat) degrees; the radius is then in
    /// degrees as well.
    EuclideanDegrees,
}

/// Great-circle distance between two (lon, lat) points in degrees.
pub fn haversine_km(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (lon1, lat1) = (a[0].to_radians(), a[1].to_radians());
    let (lon2, lat2) = (b[0].to_radians(), b[1].to_radians());
    let h = ((lat2 - lat1) / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

pub fn distance(metric: DistanceMetric, a: [f64; 2], b: [f64; 2]) -> f64 {
    match metric {
        DistanceMetric::Haversine => haversine_km(a, b),
        DistanceMetric::EuclideanDegrees => ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt(),
    }
}

/// Symmetric distance matrix with zero diagonal.
pub fn pairwise_distance(locations: &[[f64; 2]], metric: DistanceMetric) -> Tensor<f64> {
    let n = locations.len();
    let mut d = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = distance(metric, locations[i], locations[j]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Directed edge list with scalar weight `1/d` and per-node incoming lists.
#[derive(Clone, Debug, PartialEq)]
pub struct CityGraph {
    pub n_nodes: usize,
    /// `(src, dst)` pairs; both orientations of every connected pair appear.
    pub edges: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
    /// Indices into `edges` of edges ending at each node.
    pub incoming: Vec<Vec<usize>>,
}

impl CityGraph {
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn weight(&self, src: usize, dst: usize) -> Option<f64> {
        self.edges
            .iter()
            .position(|&e| e == (src, dst))
            .map(|i| self.weights[i])
    }

    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.incoming[node].iter().map(|&e| self.edges[e].0)
    }

    /// Writes `src,dst,weight`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "src,dst,weight")?;
        for (&(s, d), w) in self.edges.iter().zip(&self.weights) {
            writeln!(out, "{s},{d},{w:.9e}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Connects every ordered pair with `0 < d < radius`, weight `1/d`.
pub fn build_city_graph(locations: &[[f64; 2]], radius: f64, metric: DistanceMetric) -> Result<CityGraph> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("distance threshold must be positive, got {radius}")));
    }
    let n = locations.len();
    let dist = pairwise_distance(locations, metric);
    let mut edges = Vec::new();
    let mut weights = Vec::new();
    let mut incoming = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = dist[(i, j)];
            if d == 0.0 {
                return Err(Error::CoincidentCities(i.min(j), i.max(j)));
            }
            if d < radius {
                incoming[j].push(edges.len());
                edges.push((i, j));
                weights.push(1.0 / d);
            }
        }
    }
    Ok(CityGraph {
        n_nodes: n,
        edges,
        weights,
        incoming,
    })
}

/// Complete directed graph over groups without self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupGraph {
    pub n_nodes: usize,
    /// `(src, dst)` in lexicographic order.
    pub edges: Vec<(usize, usize)>,
    /// `[n_edges × d_edge]`, zero until the correlation encoder fills it.
    pub edge_attr: Tensor<f64>,
}

pub fn build_group_graph(n_group: usize, d_edge: usize) -> GroupGraph {
    let edges: Vec<(usize, usize)> = (0..n_group)
        .flat_map(|i| (0..n_group).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    GroupGraph {
        n_nodes: n_group,
        edge_attr: Tensor::zeros(edges.len(), d_edge),
        edges,
    }
}
