//! kNN hyperedge construction per feature group, vertex-weighted incidence
//! assembly and the normalized operator used by the solver.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, UvhlError};
use crate::uncertainty::VertexWeights;

/// One hyperedge: its centroid's neighborhood within one feature group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hyperedge {
    pub group: String,
    /// Centroid first, then its neighbors.
    pub vertices: Vec<usize>,
}

/// Vertex-weighted hypergraph with precomputed degree matrices.
#[derive(Debug, Clone)]
pub struct Hypergraph {
    pub n: usize,
    pub edges: Vec<Hyperedge>,
    /// Diagonal of the hyperedge-weight matrix W.
    pub edge_weights: DVector<f64>,
    /// n x m incidence: H(v, e) = U_v if v is in e, else 0.
    pub incidence: DMatrix<f64>,
    /// Diagonal of the vertex-degree matrix Dv.
    pub vertex_degrees: DVector<f64>,
    /// Diagonal of the hyperedge-degree matrix De.
    pub edge_degrees: DVector<f64>,
    /// Diagonal of the vertex-weight matrix U.
    pub vertex_weights: DVector<f64>,
}

/// kNN hyperedges over one feature group: one edge per centroid vertex with
/// its `k_nn` Euclidean nearest neighbors. Ties break toward the lower index.
pub fn knn_hyperedges(features: &DMatrix<f64>, k_nn: usize) -> Result<Vec<Vec<usize>>> {
    let n = features.nrows();
    if k_nn < 1 {
        return Err(UvhlError::Argument("k_nn must be >= 1".into()));
    }
    if k_nn >= n {
        return Err(UvhlError::Argument(format!(
            "k_nn = {} must be < n = {}",
            k_nn, n
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(UvhlError::Argument("non-finite feature value".into()));
    }
    let mut edges = Vec::with_capacity(n);
    for centroid in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != centroid)
            .map(|j| {
                let d: f64 = (0..features.ncols())
                    .map(|c| (features[(centroid, c)] - features[(j, c)]).powi(2))
                    .sum();
                (d, j)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut edge = vec![centroid];
        edge.extend(dists.iter().take(k_nn).map(|&(_, j)| j));
        edges.push(edge);
    }
    Ok(edges)
}

/// Assemble the weighted incidence matrix and degree diagonals from per-group
/// edge lists, concatenated in declared order. Hyperedge weights default to 1.
pub fn build_incidence(
    edge_groups: &[(String, Vec<Vec<usize>>)],
    weights: &VertexWeights,
) -> Result<Hypergraph> {
    let n = weights.weights.len();
    let edges: Vec<Hyperedge> = edge_groups
        .iter()
        .flat_map(|(group, list)| {
            list.iter().map(move |vs| Hyperedge {
                group: group.clone(),
                vertices: vs.clone(),
            })
        })
        .collect();
    if edges.is_empty() {
        return Err(UvhlError::Argument("no hyperedges".into()));
    }
    for e in &edges {
        if e.vertices.iter().any(|&v| v >= n) {
            return Err(UvhlError::Argument(format!(
                "edge references vertex out of range (n = {})",
                n
            )));
        }
    }
    let m = edges.len();
    let u = DVector::from_vec(weights.weights.clone());
    let mut incidence = DMatrix::zeros(n, m);
    for (e, edge) in edges.iter().enumerate() {
        for &v in &edge.vertices {
            incidence[(v, e)] = u[v];
        }
    }
    let edge_weights = DVector::from_element(m, 1.0);
    build_from_parts(n, edges, edge_weights, incidence, u)
}

fn build_from_parts(
    n: usize,
    edges: Vec<Hyperedge>,
    edge_weights: DVector<f64>,
    incidence: DMatrix<f64>,
    u: DVector<f64>,
) -> Result<Hypergraph> {
    let m = edges.len();
    let mut vertex_degrees = DVector::zeros(n);
    let mut edge_degrees = DVector::zeros(m);
    for v in 0..n {
        for e in 0..m {
            vertex_degrees[v] += edge_weights[e] * incidence[(v, e)];
            }
    }
    for e in 0..m {
        for v in 0..n {
            edge_degrees[e] += incidence[(v, e)];
        }
    }
    if let Some(v) = (0..n).find(|&v| vertex_degrees[v] <= 0.0) {
        return Err(UvhlError::Construction(format!(
            "vertex {} has non-positive degree",
            v
        )));
    }
    if let Some(e) = (0..m).find(|&e| edge_degrees[e] <= 0.0) {
        return Err(UvhlError::Construction(format!(
            "hyperedge {} has non-positive degree",
            e
        )));
    }
    Ok(Hypergraph {
        n,
        edges,
        edge_weights,
        incidence,
        vertex_degrees,
        edge_degrees,
        vertex_weights: u,
    })
}

impl Hypergraph {
    /// Replace the all-ones hyperedge weights and recompute degrees.
    pub fn with_edge_weights(self, edge_weights: DVector<f64>) -> Result<Hypergraph> {
        if edge_weights.nrows() != self.edges.len() {
            return Err(UvhlError::Shape("edge weight count mismatch".into()));
        }
        build_from_parts(
            self.n,
            self.edges,
            edge_weights,
            self.incidence,
            self.vertex_weights,
        )
    }

    /// The symmetric normalized operator
    /// `Dv^{-1/2} H W De^{-1} H^T Dv^{-1/2}`.
    pub fn theta(&self) -> Result<DMatrix<f64>> {
        if let Some(v) = (0..self.n).find(|&v| self.vertex_degrees[v] <= 0.0) {
            return Err(UvhlError::Singular(format!("vertex {} has zero degree", v)));
        }
        if let Some(e) = (0..self.edges.len()).find(|&e| self.edge_degrees[e] <= 0.0) {
            return Err(UvhlError::Singular(format!("edge {} has zero degree", e)));
        }
        let dv_inv_sqrt = self.vertex_degrees.map(|d| 1.0 / d.sqrt());
        let m = self.edges.len();
        // scaled = Dv^{-1/2} H, col e further scaled by w(e) / De(e)
        let mut scaled = self.incidence.clone();
        for e in 0..m {
            let col_scale = self.edge_weights[e] / self.edge_degrees[e];
            for v in 0..self.n {
                scaled[(v, e)] *= dv_inv_sqrt[v] * col_scale;
            }
        }
        let mut right = self.incidence.transpose();
        for v in 0..self.n {
            for e in 0..m {
                right[(e, v)] *= dv_inv_sqrt[v];
            }
        }
        Ok(scaled * right)
    }

    /// Dump the incidence matrix as `row,col,value` triplets.
    pub fn dump_incidence_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["row", "col", "value"])?;
        for v in 0..self.n {
            for e in 0..self.edges.len() {
                let h = self.incidence[(v, e)];
                if h != 0.0 {
                    writer.write_record([
                        v.to_string(),
                        e.to_string(),
                        format!("{}", h),
                    ])?;
                }
            }
        }
        writer.flush()?;
        Ok(())
    }
}
