//! Communication graph and the matrices derived from it.
//!
//! Edges are undirected and stored as `(i, j)` with `i < j`, ordered
//! lexicographically. The signed incidence matrix puts `+1` on the smaller
//! endpoint and `-1` on the larger one, so matrix-form and distributed runs
//! are bit-for-bit comparable. Matrices are kept at the `n x n` level; the
//! per-coordinate block extension is applied implicitly by the callers.

use nalgebra::DMatrix;
use rand::Rng;
use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Rejection-sampling cap for connected Erdős–Rényi draws.
pub const DEFAULT_GENERATION_ATTEMPTS: usize = 10_000;

/// Eigenvalues below this are treated as zero.
pub const EIGENVALUE_TOL: f64 = 1e-10;

/// Undirected communication graph plus cached neighbor lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Build a topology from an explicit edge list. Endpoints are normalized
    /// to `(min, max)` and sorted lexicographically; duplicates and self
    /// loops are rejected. Connectivity is not required here.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("graph needs at least one node".into()));
        }
        let mut normalized: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a == b {
                return Err(Error::InvalidArgument(format!("self loop at node {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge ({a},{b}) out of range for n={n}"
                )));
            }
            normalized.push((a.min(b), a.max(b)));
        }
        normalized.sort_unstable();
        if normalized.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate edge".into()));
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in &normalized {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Topology {
            n,
            edges: normalized,
            neighbors,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Signed incidence matrix (`|E| x n`): `+1` on the source (smaller
    /// index), `-1` on the destination.
    pub fn signed_incidence(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.edges.len(), self.n);
        for (k, &(i, j)) in self.edges.iter().enumerate() {
            m[(k, i)] = 1.0;
            m[(k, j)] = -1.0;
        }
        m
    }

    /// Unsigned incidence matrix (`|E| x n`): `+1` on both endpoints.
    pub fn unsigned_incidence(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.edges.len(), self.n);
        for (k, &(i, j)) in self.edges.iter().enumerate() {
            m[(k, i)] = 1.0;
            m[(k, j)] = 1.0;
        }
        m
    }

    /// Source matrix (`|E| x n`): `+1` on the smaller endpoint of each edge.
    pub fn source_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.edges.len(), self.n);
        for (k, &(i, _)) in self.edges.iter().enumerate() {
            m[(k, i)] = 1.0;
        }
        m
    }

    /// Destination matrix (`|E| x n`): `+1` on the larger endpoint.
    pub fn destination_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.edges.len(), self.n);
        for (k, &(_, j)) in self.edges.iter().enumerate() {
            m[(k, j)] = 1.0;
        }
        m
    }

    pub fn signed_laplacian(&self) -> DMatrix<f64> {
        let e = self.signed_incidence();
        e.transpose() * e
    }

    pub fn unsigned_laplacian(&self) -> DMatrix<f64> {
        let e = self.unsigned_incidence();
        e.transpose() * e
    }

    pub fn degree_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if i == j {
                self.degree(i) as f64
            } else {
                0.0
            }
        })
    }

    /// Export the edge list as a two-column CSV (`src,dst`).
    pub fn write_edge_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = String::from("src,dst\n");
        for &(i, j) in &self.edges {
            out.push_str(&format!("{i},{j}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Import an edge list from a two-column CSV. A `src,dst` header line is
    /// tolerated.
    pub fn read_edge_csv<P: AsRef<Path>>(path: P, n: usize) -> Result<Self> {
        let name = path.as_ref().display().to_string();
        let text = fs::read_to_string(&path)?;
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if lineno == 0 && line.chars().any(|c| c.is_ascii_alphabetic()) {
                continue;
            }
            let mut parts = line.split(',');
            let parse = |tok: Option<&str>| -> Result<usize> {
                tok.map(str::trim)
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Parse {
                        path: name.clone(),
                        line: lineno + 1,
                        msg: format!("expected `src,dst`, got {line:?}"),
                    })
            };
            let src = parse(parts.next())?;
            let dst = parse(parts.next())?;
            edges.push((src, dst));
        }
        Topology::from_edges(n, &edges)
    }
}

/// Breadth-first connectivity check from node 0.
pub fn is_connected(topo: &Topology) -> bool {
    connected_on_lists(topo.n, &topo.neighbors)
}

fn connected_on_lists(n: usize, neighbors: &[Vec<usize>]) -> bool {
    if n == 0 {
        return false;
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &neighbors[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

/// Draw a connected Erdős–Rényi graph: every pair is an edge independently
/// with probability `p`; disconnected draws are rejected wholesale and the
/// graph is resampled from the same stream.
pub fn generate_erdos_renyi<R: Rng>(n: usize, p: f64, rng: &mut R) -> Result<Topology> {
    generate_erdos_renyi_capped(n, p, rng, DEFAULT_GENERATION_ATTEMPTS)
}

pub fn generate_erdos_renyi_capped<R: Rng>(
    n: usize,
    p: f64,
    rng: &mut R,
    max_attempts: usize,
) -> Result<Topology> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "Erdős–Rényi generation needs n >= 2, got {n}"
        )));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "edge probability must lie in (0, 1], got {p}"
        )));
    }
    for _ in 0..max_attempts {
        let mut edges = Vec::new();
        let mut neighbors = vec![Vec::new(); n];
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                    neighbors[i].push(j);
                    neighbors[j].push(i);
                }
            }
        }
        if connected_on_lists(n, &neighbors) {
            return Topology::from_edges(n, &edges);
        }
    }
    Err(Error::GraphGeneration {
        n,
        p,
        attempts: max_attempts,
    })
}

/// Spectral quantities consumed by the convergence-rate calculator.
#[derive(Clone, Copy, Debug)]
pub struct SpectralConstants {
    /// Smallest positive eigenvalue of the Gram matrix of the signed
    /// incidence matrix stacked on the anchor row picking out agent `q`.
    pub sigma_plus_min: f64,
    /// Largest eigenvalue of the unsigned Laplacian.
    pub sigma_lu_max: f64,
}

/// Compute the spectral constants for a connected topology and anchor agent.
pub fn spectral_constants(topo: &Topology, q: usize) -> Result<SpectralConstants> {
    if q >= topo.n {
        return Err(Error::InvalidArgument(format!(
            "anchor agent {q} out of range for n={}",
            topo.n
        )));
    }
    if !is_connected(topo) {
        return Err(Error::InvalidArgument(
            "spectral constants are only defined for connected graphs".into(),
        ));
    }
    let n = topo.n;
    let m = topo.edge_count();
    let mut stacked = DMatrix::zeros(m + 1, n);
    stacked.view_mut((0, 0), (m, n)).copy_from(&topo.signed_incidence());
    stacked[(m, q)] = 1.0;
    let gram = stacked.transpose() * stacked;
    let eigs = gram.symmetric_eigen().eigenvalues;
    let sigma_plus_min = eigs
        .iter()
        .copied()
        .filter(|&v| v > EIGENVALUE_TOL)
        .fold(f64::INFINITY, f64::min);
    if !sigma_plus_min.is_finite() {
        return Err(Error::InvalidArgument(
            "stacked incidence operator has no positive eigenvalue".into(),
        ));
    }
    let lu_eigs = topo.unsigned_laplacian().symmetric_eigen().eigenvalues;
    let sigma_lu_max = lu_eigs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SpectralConstants {
        sigma_plus_min,
        sigma_lu_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
        let mut v: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    /// Spectral connectivity oracle: second-smallest eigenvalue of the
    /// signed Laplacian is positive.
    fn connected_by_spectrum(topo: &Topology) -> bool {
        if topo.n() == 1 {
            return true;
        }
        let eigs = sorted_eigenvalues(&topo.signed_laplacian());
        eigs[1] > EIGENVALUE_TOL
    }

    #[test]
    fn two_nodes_full_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let topo = generate_erdos_renyi(2, 1.0, &mut rng).unwrap();
        assert_eq!(topo.edges(), &[(0, 1)]);
        assert_eq!(topo.signed_incidence(), DMatrix::from_row_slice(1, 2, &[1.0, -1.0]));
        assert_eq!(topo.unsigned_incidence(), DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
        assert_eq!(topo.degree_matrix(), DMatrix::identity(2, 2));
        assert_eq!(
            topo.unsigned_laplacian(),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])
        );
    }

    #[test]
    fn triangle_signed_laplacian_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let topo = generate_erdos_renyi(3, 1.0, &mut rng).unwrap();
        assert_eq!(topo.edge_count(), 3);
        let eigs = sorted_eigenvalues(&topo.signed_laplacian());
        assert_abs_diff_eq!(eigs[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eigs[1], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eigs[2], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn triangle_unsigned_laplacian_top_eigenvalue() {
        // K_3 has L_u = I + ones(3,3), so the spectrum is {1, 1, 4}. The
        // value 4 is pinned here as a regression constant.
        let topo = Topology::from_edges(3, &[(0, 1), (0, 2), (1, 2)]).unwrap();
        let eigs = sorted_eigenvalues(&topo.unsigned_laplacian());
        assert_abs_diff_eq!(eigs[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eigs[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eigs[2], 4.0, epsilon = 1e-12);
        let sc = spectral_constants(&topo, 0).unwrap();
        assert_abs_diff_eq!(sc.sigma_lu_max, 4.0, epsilon = 1e-10);
        assert!(sc.sigma_plus_min > EIGENVALUE_TOL);
    }

    #[test]
    fn two_node_path_spectral_constants() {
        let topo = Topology::from_edges(2, &[(0, 1)]).unwrap();
        let sc = spectral_constants(&topo, 0).unwrap();
        // Eigenvalues of [[1,1],[1,1]] are {0, 2}.
        assert_abs_diff_eq!(sc.sigma_lu_max, 2.0, epsilon = 1e-12);
        // Gram of [E_s; e_0] is [[2,-1],[-1,1]] with smallest eigenvalue
        // (3 - sqrt(5)) / 2.
        assert_abs_diff_eq!(sc.sigma_plus_min, (3.0 - 5f64.sqrt()) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn seeded_ten_node_graph_satisfies_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let topo = generate_erdos_renyi(10, 0.2, &mut rng).unwrap();
        assert!(is_connected(&topo));
        let d = topo.degree_matrix();
        for i in 0..10 {
            assert_eq!(d[(i, i)] as usize, topo.neighbors(i).len());
            let incident = topo
                .edges()
                .iter()
                .filter(|&&(a, b)| a == i || b == i)
                .count();
            assert_eq!(d[(i, i)] as usize, incident);
        }
        let sc = spectral_constants(&topo, 0).unwrap();
        assert!(sc.sigma_plus_min > EIGENVALUE_TOL);
        assert!(sc.sigma_lu_max <= 2.0 * topo.max_degree() as f64 + 1e-12);
    }

    #[test]
    fn matrix_identities_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let topo = generate_erdos_renyi(8, 0.3, &mut rng).unwrap();
            let es = topo.signed_incidence();
            let eu = topo.unsigned_incidence();
            assert_eq!(topo.signed_laplacian(), es.transpose() * &es);
            assert_eq!(topo.unsigned_laplacian(), eu.transpose() * &eu);
            let half = (topo.unsigned_laplacian() + topo.signed_laplacian()) * 0.5;
            assert_eq!(topo.degree_matrix(), half);
            assert_eq!(eu.clone(), topo.source_matrix() + topo.destination_matrix());
            assert_eq!(es.clone(), topo.source_matrix() - topo.destination_matrix());
            for k in 0..topo.edge_count() {
                assert_eq!(es.row(k).sum(), 0.0);
                assert_eq!(eu.row(k).sum(), 2.0);
            }
        }
    }

    #[test]
    fn signed_incidence_kernel_is_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let topo = generate_erdos_renyi(6, 0.4, &mut rng).unwrap();
            let es = topo.signed_incidence();
            let consensus = DVector::from_element(6, 3.25);
            assert!((&es * &consensus).norm() == 0.0);
            // A vector with one perturbed entry must leave the kernel.
            let mut bumped = consensus.clone();
            bumped[2] += 1.0;
            assert!((&es * &bumped).norm() > 0.0);
            // Half the unsigned incidence maps consensus to consensus.
            let eu = topo.unsigned_incidence();
            let z = (&eu * &consensus) * 0.5;
            for k in 0..topo.edge_count() {
                assert_abs_diff_eq!(z[k], 3.25, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn rejection_sampling_never_returns_disconnected() {
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let topo = generate_erdos_renyi(8, 0.25, &mut rng).unwrap();
            assert!(is_connected(&topo), "seed {seed} yielded a disconnected graph");
            assert!(connected_by_spectrum(&topo), "spectral check disagrees at seed {seed}");
        }
    }

    #[test]
    fn bfs_matches_spectral_criterion_on_raw_draws() {
        // Raw (unrejected) draws so both connected and disconnected cases occur.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut disconnected = 0;
        for _ in 0..200 {
            let mut edges = Vec::new();
            for i in 0..10 {
                for j in (i + 1)..10 {
                    if rng.random::<f64>() < 0.2 {
                        edges.push((i, j));
                    }
                }
            }
            let topo = Topology::from_edges(10, &edges).unwrap();
            let bfs = is_connected(&topo);
            assert_eq!(bfs, connected_by_spectrum(&topo));
            if !bfs {
                disconnected += 1;
            }
        }
        assert!(disconnected > 0, "test never exercised the disconnected branch");
    }

    #[test]
    fn isolated_nodes_and_paths() {
        let two = Topology::from_edges(2, &[]).unwrap();
        assert!(!is_connected(&two));
        let path = Topology::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        assert!(is_connected(&path));
    }

    #[test]
    fn generation_cap_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = generate_erdos_renyi_capped(30, 0.01, &mut rng, 5).unwrap_err();
        assert!(matches!(err, Error::GraphGeneration { attempts: 5, .. }));
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_erdos_renyi(1, 0.5, &mut rng).is_err());
        assert!(generate_erdos_renyi(4, 0.0, &mut rng).is_err());
        assert!(generate_erdos_renyi(4, 1.5, &mut rng).is_err());
        assert!(Topology::from_edges(3, &[(0, 0)]).is_err());
        assert!(Topology::from_edges(3, &[(0, 5)]).is_err());
        assert!(Topology::from_edges(3, &[(0, 1), (1, 0)]).is_err());
        assert!(spectral_constants(&Topology::from_edges(2, &[]).unwrap(), 0).is_err());
    }

    #[test]
    fn edge_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edges.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let topo = generate_erdos_renyi(7, 0.35, &mut rng).unwrap();
        topo.write_edge_csv(&path).unwrap();
        let back = Topology::read_edge_csv(&path, 7).unwrap();
        assert_eq!(topo, back);
    }
}
