//! Area random-effect priors: iid, intrinsic CAR and Leroux.

use std::collections::BTreeSet;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Jitter that keeps the intrinsic CAR precision invertible.
pub const ICAR_JITTER: f64 = 1e-6;

/// Undirected neighbourhood graph over areas `0..n_areas`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyGraph {
    pub n_areas: usize,
    pub edges: BTreeSet<(usize, usize)>,
    pub neighbor_counts: Vec<usize>,
    pub n_components: usize,
}

impl AdjacencyGraph {
    /// Builds a graph from undirected edges; duplicates collapse, self-loops are rejected.
    pub fn new(n_areas: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n_areas || b >= n_areas {
                return Err(Error::Argument(format!("edge ({a}, {b}) references an area outside 0..{n_areas}")));
            }
            if a == b {
                return Err(Error::Argument(format!("self-loop on area {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let mut neighbor_counts = vec![0; n_areas];
        for &(a, b) in &set {
            neighbor_counts[a] += 1;
            neighbor_counts[b] += 1;
        }
        let n_components = count_components(n_areas, &set);
        Ok(Self { n_areas, edges: set, neighbor_counts, n_components })
    }

    /// Rook-adjacency lattice with `ceil(sqrt(n))` columns, filled row by row.
    pub fn lattice(n_areas: usize) -> Self {
        let cols = (n_areas as f64).sqrt().ceil().max(1.0) as usize;
        let mut edges = Vec::new();
        for i in 0..n_areas {
            let (r, c) = (i / cols, i % cols);
            if c + 1 < cols && i + 1 < n_areas {
                edges.push((i, i + 1));
            }
            let below = (r + 1) * cols + c;
            if below < n_areas {
                edges.push((i, below));
            }
        }
        Self::new(n_areas, edges).expect("lattice edges are valid")
    }

    pub fn neighbors(&self, area: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == area {
                    Some(b)
                } else if b == area {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }
}

fn count_components(n: usize, edges: &BTreeSet<(usize, usize)>) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
        }
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialKind {
    Iid,
    Icar,
    Leroux,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialSpec {
    pub kind: SpatialKind,
    pub graph: Option<AdjacencyGraph>,
}

impl SpatialSpec {
    pub fn iid() -> Self {
        Self { kind: SpatialKind::Iid, graph: None }
    }

    pub fn icar(graph: AdjacencyGraph) -> Self {
        Self { kind: SpatialKind::Icar, graph: Some(graph) }
    }

    pub fn leroux(graph: AdjacencyGraph) -> Self {
        Self { kind: SpatialKind::Leroux, graph: Some(graph) }
    }

    pub fn has_rho(&self) -> bool {
        self.kind == SpatialKind::Leroux
    }

    /// Checks that structured priors carry a graph over exactly `n_areas` nodes.
    pub fn validate(&self, n_areas: usize) -> Result<()> {
        match (self.kind, &self.graph) {
            (SpatialKind::Iid, _) => Ok(()),
            (_, None) => Err(Error::Argument(format!("{:?} prior requires an adjacency graph", self.kind))),
            (_, Some(g)) if g.n_areas != n_areas => {
                Err(Error::Consistency(format!("adjacency graph has {} areas but the panel has {n_areas}", g.n_areas)))
            }
            _ => Ok(()),
        }
    }
}

/// CAR structure matrix: neighbour counts on the diagonal, -1 for each edge.
pub fn structure_matrix(graph: &AdjacencyGraph) -> DMatrix<f64> {
    let n = graph.n_areas;
    let mut r = DMatrix::zeros(n, n);
    for (i, &c) in graph.neighbor_counts.iter().enumerate() {
        r[(i, i)] = c as f64;
    }
    for &(a, b) in &graph.edges {
        r[(a, b)] = -1.0;
        r[(b, a)] = -1.0;
    }
    r
}

/// Random-effect precision `G`.
///
/// * iid: `tau I`
/// * Leroux: `tau (rho R + (1 - rho) I)`
/// * ICAR: `tau (R + jitter I)`
pub fn precision(spec: &SpatialSpec, n_areas: usize, tau: f64, rho: Option<f64>) -> Result<DMatrix<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Argument(format!("precision tau must be positive, got {tau}")));
    }
    spec.validate(n_areas)?;
    match spec.kind {
        SpatialKind::Iid => {
            if rho.is_some() {
                return Err(Error::Argument("rho is not a parameter of the iid prior".into()));
            }
            Ok(DMatrix::identity(n_areas, n_areas) * tau)
        }
        SpatialKind::Icar => {
            if rho.is_some() {
                return Err(Error::Argument("rho is not a parameter of the ICAR prior".into()));
            }
            let mut g = structure_matrix(spec.graph.as_ref().unwrap());
            for i in 0..n_areas {
                g[(i, i)] += ICAR_JITTER;
            }
            Ok(g * tau)
        }
        SpatialKind::Leroux => {
            let rho = rho.ok_or_else(|| Error::Argument("the Leroux prior requires rho".into()))?;
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::Argument(format!("rho must lie in [0, 1), got {rho}")));
            }
            let mut g = structure_matrix(spec.graph.as_ref().unwrap()) * rho;
            for i in 0..n_areas {
                g[(i, i)] += 1.0 - rho;
            }
            Ok(g * tau)
        }
    }
}
