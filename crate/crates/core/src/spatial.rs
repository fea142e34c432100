//! Spatial coordinates, pairwise distances, and neighbourhood mask graphs.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar spot coordinates, one row per spot.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialCoords {
    pub spot_ids: Vec<String>,
    coords: Tensor,
}

impl SpatialCoords {
    pub fn new(spot_ids: Vec<String>, coords: Tensor) -> Result<Self> {
        if !coords.is_matrix() || coords.cols() != 2 {
            return Err(Error::invalid(format!(
                "coordinates must be n x 2, got {:?}",
                coords.shape()
            )));
        }
        if coords.rows() != spot_ids.len() {
            return Err(Error::invalid(format!(
                "{} spot ids for {} coordinate rows",
                spot_ids.len(),
                coords.rows()
            )));
        }
        if !coords.all_finite() {
            return Err(Error::NonFinite("spatial coordinates".into()));
        }
        Ok(Self { spot_ids, coords })
    }

    /// Coordinates with generated ids `s0, s1, ...`.
    pub fn from_points(points: &[[f64; 2]]) -> Result<Self> {
        let ids = (0..points.len()).map(|i| format!("s{i}")).collect();
        let data = points.iter().flatten().copied().collect();
        Self::new(ids, Tensor::matrix(points.len(), 2, data)?)
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.coords
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.coords.get(i, 0), self.coords.get(i, 1)]
    }

    pub fn subset(&self, indices: &[usize]) -> SpatialCoords {
        SpatialCoords {
            spot_ids: indices.iter().map(|&i| self.spot_ids[i].clone()).collect(),
            coords: self.coords.select_rows(indices),
        }
    }
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Symmetric matrix of pairwise distances with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix(Tensor);

impl DistanceMatrix {
    /// Wraps an existing square matrix after checking symmetry and the diagonal.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if !t.is_matrix() || t.rows() != t.cols() {
            return Err(Error::invalid(format!(
                "distance matrix must be square, got {:?}",
                t.shape()
            )));
        }
        let n = t.rows();
        for i in 0..n {
            if t.get(i, i) != 0.0 {
                return Err(Error::invalid("distance matrix diagonal must be zero"));
            }
            for j in 0..i {
                let v = t.get(i, j);
                if v != t.get(j, i) || !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::invalid(
                        "distance matrix must be symmetric, finite and nonnegative",
                    ));
                }
            }
        }
        Ok(Self(t))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn submatrix(&self, indices: &[usize]) -> DistanceMatrix {
        let m = indices.len();
        let mut data = Vec::with_capacity(m * m);
        for &i in indices {
            for &j in indices {
                data.push(self.0.get(i, j));
            }
        }
        DistanceMatrix(Tensor::matrix(m, m, data).expect("square"))
    }

    /// All off-diagonal entries, ordered pairs included once each.
    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * n.saturating_sub(1));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    out.push(self.0.get(i, j));
                }
            }
        }
        out
    }
}

/// Euclidean distances between all spots.
pub fn pairwise_distances(coords: &SpatialCoords) -> DistanceMatrix {
    let n = coords.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let pi = coords.point(i);
        for j in (i + 1)..n {
            let d = sq_dist(pi, coords.point(j)).sqrt();
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    DistanceMatrix(Tensor::matrix(n, n, data).expect("square"))
}

/// The `k` nearest other spots of every spot, nearest first.
///
/// Distance ties go to the lower index.
pub fn knn_indices(coords: &SpatialCoords, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = coords.len();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "k-NN needs 1 <= k < n, got k={k}, n={n}"
        )));
    }
    let mut out = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        let pi = coords.point(i);
        cand.clear();
        cand.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(pi, coords.point(j)), j)),
        );
        cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut nearest: Vec<(f64, usize)> = cand[..k].to_vec();
        nearest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.push(nearest.into_iter().map(|(_, j)| j).collect());
    }
    Ok(out)
}

/// Undirected edge set over `n` spots; no self-loops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGraph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl MaskGraph {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            edges: BTreeSet::new(),
        }
    }

    pub fn complete(n: usize) -> Self {
        let mut g = Self::new(n);
        for i in 0..n {
            for j in (i + 1)..n {
                g.edges.insert((i, j));
            }
        }
        g
    }

    /// Adds the unordered edge `{i, j}`. Self-loops are ignored.
    pub fn insert(&mut self, i: usize, j: usize) -> Result<()> {
        if i >= self.n || j >= self.n {
            return Err(Error::invalid(format!(
                "edge ({i}, {j}) outside {} spots",
                self.n
            )));
        }
        if i != j {
            self.edges.insert((i.min(j), i.max(j)));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    /// Unordered edges as `(i, j)` with `i < j`, ascending.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.edges
            .iter()
            .filter(|&&(a, b)| a == i || b == i)
            .count()
    }

    /// Dense symmetric 0/1 matrix.
    pub fn to_dense(&self) -> Tensor {
        let n = self.n;
        let mut t = Tensor::zeros(&[n, n]);
        for &(i, j) in &self.edges {
            t.set(i, j, 1.0);
            t.set(j, i, 1.0);
        }
        t
    }

    /// Neighbour lists, ascending.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    /// The induced subgraph on `indices`, relabelled to positions in `indices`.
    pub fn restrict(&self, indices: &[usize]) -> MaskGraph {
        let mut pos = vec![usize::MAX; self.n];
        for (p, &i) in indices.iter().enumerate() {
            pos[i] = p;
        }
        let mut out = MaskGraph::new(indices.len());
        for &(i, j) in &self.edges {
            let (pi, pj) = (pos[i], pos[j]);
            if pi != usize::MAX && pj != usize::MAX {
                out.edges.insert((pi.min(pj), pi.max(pj)));
            }
        }
        out
    }

    /// Two-column CSV edge list with header `i,j`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,j\n");
        for &(i, j) in &self.edges {
            s.push_str(&format!("{i},{j}\n"));
        }
        s
    }
}

/// Symmetrised k-nearest-neighbour graph.
pub fn knn_mask(coords: &SpatialCoords, k: usize) -> Result<MaskGraph> {
    let nn = knn_indices(coords, k)?;
    let mut g = MaskGraph::new(coords.len());
    for (i, row) in nn.iter().enumerate() {
        for &j in row {
            g.insert(i, j)?;
        }
    }
    Ok(g)
}

const KMEANS_MAX_ITER: usize = 100;
const KMEANS_TOL: f64 = 1e-6;

/// Cluster labels from Lloyd's algorithm with farthest-point seeding.
pub fn kmeans_labels(coords: &SpatialCoords, k_clusters: usize, seed: u64) -> Result<Vec<usize>> {
    let n = coords.len();
    if k_clusters == 0 || k_clusters > n {
        return Err(Error::invalid(format!(
            "k-means needs 1 <= clusters <= n, got {k_clusters} for n={n}"
        )));
    }
    let pts: Vec<[f64; 2]> = (0..n).map(|i| coords.point(i)).collect();
    let nearest = |centroids: &[[f64; 2]], p: [f64; 2]| -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (c, &cp) in centroids.iter().enumerate() {
            let d = sq_dist(p, cp);
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);
    let mut chosen = vec![false; n];
    chosen[first] = true;
    let mut centroids = vec![pts[first]];
    while centroids.len() < k_clusters {
        let mut best = (usize::MAX, -1.0);
        for (i, &p) in pts.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            let d = nearest(&centroids, p).1;
            if d > best.1 {
                best = (i, d);
            }
        }
        chosen[best.0] = true;
        centroids.push(pts[best.0]);
    }

    let mut labels = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITER {
        for (i, &p) in pts.iter().enumerate() {
            labels[i] = nearest(&centroids, p).0;
        }
        let mut sums = vec![[0.0f64; 2]; k_clusters];
        let mut counts = vec![0usize; k_clusters];
        for (i, &p) in pts.iter().enumerate() {
            sums[labels[i]][0] += p[0];
            sums[labels[i]][1] += p[1];
            counts[labels[i]] += 1;
        }
        let mut shift = 0.0f64;
        for c in 0..k_clusters {
            let next = if counts[c] == 0 {
                // reseed at the spot farthest from its nearest centroid
                let far = pts
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| (i, nearest(&centroids, p).1))
                    .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
                pts[far.0]
            } else {
                [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64]
            };
            shift = shift.max(sq_dist(next, centroids[c]).sqrt());
            centroids[c] = next;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    for (i, &p) in pts.iter().enumerate() {
        labels[i] = nearest(&centroids, p).0;
    }
    Ok(labels)
}

/// Connects every pair of spots that share a k-means cluster.
pub fn kmeans_mask(coords: &SpatialCoords, k_clusters: usize, seed: u64) -> Result<MaskGraph> {
    let labels = kmeans_labels(coords, k_clusters, seed)?;
    let mut g = MaskGraph::new(coords.len());
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            if labels[i] == labels[j] {
                g.insert(i, j)?;
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_coords(seed: u64, n: usize) -> SpatialCoords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)])
            .collect();
        SpatialCoords::from_points(&pts).unwrap()
    }

    #[test]
    fn distance_examples() {
        let c = SpatialCoords::from_points(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        let d = pairwise_distances(&c);
        assert_eq!(d.get(0, 1), 5.0);
        assert_eq!(d.get(1, 0), 5.0);
        let one = SpatialCoords::from_points(&[[1.0, 2.0]]).unwrap();
        assert_eq!(
            pairwise_distances(&one).as_tensor(),
            &Tensor::zeros(&[1, 1])
        );
    }

    #[test]
    fn distances_match_double_loop() {
        let c = random_coords(11, 10);
        let d = pairwise_distances(&c);
        for i in 0..10 {
            for j in 0..10 {
                let (a, b) = (c.point(i), c.point(j));
                let want = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                assert!((d.get(i, j) - want).abs() <= 1e-12);
            }
        }
        // triangle inequality spot check
        for (i, j, k) in [(0, 1, 2), (3, 7, 9), (4, 5, 8)] {
            assert!(d.get(i, k) <= d.get(i, j) + d.get(j, k) + 1e-12);
        }
    }

    #[test]
    fn collinear_tie_break() {
        let c = SpatialCoords::from_points(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]).unwrap();
        assert_eq!(knn_indices(&c, 1).unwrap(), vec![vec![1], vec![0], vec![1]]);
        let g = knn_mask(&c, 1).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn knn_full_k_is_complete() {
        let c = random_coords(2, 6);
        assert_eq!(knn_mask(&c, 5).unwrap(), MaskGraph::complete(6));
        assert!(knn_mask(&c, 6).is_err());
        assert!(knn_mask(&c, 0).is_err());
    }

    #[test]
    fn knn_matches_sorted_neighbour_oracle() {
        let c = random_coords(5, 20);
        let nn = knn_indices(&c, 3).unwrap();
        let g = knn_mask(&c, 3).unwrap();
        let mut want = BTreeSet::new();
        for i in 0..20 {
            let mut all: Vec<(f64, usize)> = (0..20)
                .filter(|&j| j != i)
                .map(|j| {
                    let (a, b) = (c.point(i), c.point(j));
                    (((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt(), j)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let top: Vec<usize> = all[..3].iter().map(|x| x.1).collect();
            assert_eq!(nn[i], top);
            for j in top {
                want.insert((i.min(j), i.max(j)));
            }
        }
        assert_eq!(g.edges().collect::<BTreeSet<_>>(), want);
        for i in 0..20 {
            assert!(g.degree(i) >= 3);
            assert!(!g.contains(i, i));
        }
    }

    #[test]
    fn kmeans_two_pairs() {
        let c = SpatialCoords::from_points(&[[0.0, 0.0], [100.0, 0.0], [0.1, 0.0], [100.0, 0.1]])
            .unwrap();
        for seed in 0..5 {
            let g = kmeans_mask(&c, 2, seed).unwrap();
            assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 2), (1, 3)]);
        }
    }

    #[test]
    fn kmeans_extremes() {
        let c = random_coords(9, 12);
        assert_eq!(kmeans_mask(&c, 1, 0).unwrap(), MaskGraph::complete(12));
        assert_eq!(kmeans_mask(&c, 12, 0).unwrap().edge_count(), 0);
        assert!(kmeans_mask(&c, 13, 0).is_err());
    }

    #[test]
    fn kmeans_deterministic() {
        let c = random_coords(4, 40);
        assert_eq!(
            kmeans_mask(&c, 4, 17).unwrap(),
            kmeans_mask(&c, 4, 17).unwrap()
        );
    }

    #[test]
    fn restrict_relabels() {
        let mut g = MaskGraph::new(5);
        g.insert(0, 3).unwrap();
        g.insert(3, 4).unwrap();
        g.insert(1, 2).unwrap();
        let r = g.restrict(&[4, 3, 1]);
        assert_eq!(r.edges().collect::<Vec<_>>(), vec![(0, 1)]);
        assert_eq!(g.to_csv(), "i,j\n0,3\n1,2\n3,4\n");
    }
}
