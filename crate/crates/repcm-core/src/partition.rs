//! Stage I: data-driven functional partitioning.
//!
//! Per-vertex motion descriptors are extracted from ED-relative trajectories
//! (PCA over the cohort-mean trajectory, or a learned trajectory autoencoder),
//! clustered with seeded k-means into R functional regions shared across the
//! cohort, and a binary region adjacency prior is read off the mesh edge
//! graph: regions are adjacent when at least one mesh edge joins them, and
//! every region is adjacent to itself.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RepcmError, Result};
use crate::mesh::{ed_relative, MeshSequence, MeshTopology, RegionPartition};

/// Number of k-means++ restarts folded into one `cluster_regions` call.
/// All restarts derive from the caller's seed, so clustering stays a pure
/// function of (field, r, seed).
const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 300;
const KMEANS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DescriptorBackend {
    #[serde(rename = "PCA")]
    #[default]
    Pca,
    #[serde(rename = "LEARNED")]
    Learned,
}

impl DescriptorBackend {
    pub fn as_str(&self) -> &'static str {
        match self {
            DescriptorBackend::Pca => "PCA",
            DescriptorBackend::Learned => "LEARNED",
        }
    }
}

/// One d-dimensional motion descriptor per vertex.
#[derive(Debug, Clone)]
pub struct MotionDescriptorField {
    pub descriptors: Array2<f64>,
    pub backend: DescriptorBackend,
}

/// Encoder half of the trajectory-reconstruction autoencoder
/// (3T -> hidden -> d, SiLU in the middle). Trained by
/// [`crate::training::fit_descriptor_autoencoder`].
#[derive(Debug, Clone)]
pub struct DescriptorEncoder {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    /// Trajectory rows are divided by this before encoding (same value used
    /// during training).
    pub input_scale: f64,
}

impl DescriptorEncoder {
    pub fn descriptor_dim(&self) -> usize {
        self.w2.ncols()
    }

    /// Encode N x 3T trajectory rows into N x d descriptors.
    pub fn encode_rows(&self, rows: &ArrayView2<'_, f64>) -> Array2<f64> {
        let x = rows.mapv(|v| v / self.input_scale);
        let mut h = x.dot(&self.w1);
        h += &self.b1;
        h.mapv_inplace(silu);
        let mut out = h.dot(&self.w2);
        out += &self.b2;
        out
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub enum DescriptorSource<'a> {
    Pca,
    Learned(&'a DescriptorEncoder),
}

/// Cohort-mean ED-relative trajectory, flattened per vertex to N x 3T rows.
pub fn mean_trajectory_rows(cohort: &[MeshSequence]) -> Result<Array2<f64>> {
    if cohort.is_empty() {
        return Err(RepcmError::EmptyInput("cohort for descriptor extraction".into()));
    }
    let n = cohort[0].topology.vertex_count();
    let t = cohort[0].num_frames();
    for seq in cohort {
        if seq.topology.vertex_count() != n || seq.num_frames() != t {
            return Err(RepcmError::shape(
                format!("shared topology N={n}, T={t}"),
                format!("subject {} has N={}, T={}", seq.subject_id, seq.topology.vertex_count(), seq.num_frames()),
            ));
        }
    }
    let mut acc = Array2::<f64>::zeros((n, 3 * t));
    for seq in cohort {
        acc += &ed_relative(seq).flatten_per_vertex();
    }
    acc /= cohort.len() as f64;
    Ok(acc)
}

/// Extract one motion descriptor per vertex.
///
/// PCA backend: the cohort-mean flattened trajectory of each vertex is
/// projected onto the top-d principal components fit over all vertices.
/// LEARNED backend: each subject's per-vertex trajectory is embedded by the
/// trained autoencoder and the embeddings are averaged over subjects.
pub fn extract_motion_descriptors(
    cohort: &[MeshSequence],
    source: DescriptorSource<'_>,
    d: usize,
) -> Result<MotionDescriptorField> {
    match source {
        DescriptorSource::Pca => {
            let rows = mean_trajectory_rows(cohort)?;
            if d == 0 || d > rows.ncols() {
                return Err(RepcmError::InvalidArgument(format!(
                    "descriptor dim d={d} outside 1..={} (= 3T)",
                    rows.ncols()
                )));
            }
            let descriptors = pca_project(&rows, d);
            Ok(MotionDescriptorField {
                descriptors,
                backend: DescriptorBackend::Pca,
            })
        }
        DescriptorSource::Learned(encoder) => {
            if cohort.is_empty() {
                return Err(RepcmError::EmptyInput("cohort for descriptor extraction".into()));
            }
            if encoder.descriptor_dim() != d {
                return Err(RepcmError::InvalidArgument(format!(
                    "encoder emits d={}, requested d={d}",
                    encoder.descriptor_dim()
                )));
            }
            let n = cohort[0].topology.vertex_count();
            let mut acc = Array2::<f64>::zeros((n, d));
            for seq in cohort {
                let rows = ed_relative(seq).flatten_per_vertex();
                acc += &encoder.encode_rows(&rows.view());
            }
            acc /= cohort.len() as f64;
            Ok(MotionDescriptorField {
                descriptors: acc,
                backend: DescriptorBackend::Learned,
            })
        }
    }
}

/// Center rows and project onto the top-d principal components.
/// Component signs are fixed (largest-magnitude entry positive) so the
/// output is reproducible across runs.
fn pca_project(rows: &Array2<f64>, d: usize) -> Array2<f64> {
    let n = rows.nrows();
    let dim = rows.ncols();
    let mean = rows.mean_axis(Axis(0)).expect("nonempty rows");
    let centered = rows - &mean.view().insert_axis(Axis(0));

    let mut cov = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        for j in i..dim {
            let mut s = 0.0;
            for v in 0..n {
                s += centered[[v, i]] * centered[[v, j]];
            }
            let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
            cov[(i, j)] = s / denom;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut components = Array2::<f64>::zeros((dim, d));
    for (out_col, &src_col) in order.iter().take(d).enumerate() {
        let col = eig.eigenvectors.column(src_col);
        let mut best = 0;
        for i in 1..dim {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        let sign = if col[best] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dim {
            components[[i, out_col]] = sign * col[i];
        }
    }
    centered.dot(&components)
}

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
}

/// Seeded k-means: k-means++ initialization, Lloyd iterations to convergence
/// (max centroid shift < 1e-6) or 300 iterations, empty clusters reseeded to
/// the point farthest from its centroid. Ties always break to the lowest
/// index, so the result is a pure function of (data, k, seed).
pub fn kmeans(data: &ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<KmeansResult> {
    let n = data.nrows();
    if k == 0 || k > n {
        return Err(RepcmError::InvalidArgument(format!("k={k} outside 1..={n}")));
    }
    let mut best: Option<KmeansResult> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(restart as u64 + 1)));
        let result = kmeans_single(data, k, &mut rng);
        let better = match &best {
            None => true,
            Some(b) => result.inertia < b.inertia,
        };
        if better {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn sq_dist(a: &ArrayView2<'_, f64>, i: usize, c: &Array2<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for d in 0..a.ncols() {
        let diff = a[[i, d]] - c[[j, d]];
        s += diff * diff;
    }
    s
}

fn kmeans_single(data: &ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> KmeansResult {
    let n = data.nrows();
    let dim = data.ncols();

    // k-means++ seeding
    let mut centroids = Array2::<f64>::zeros((k, dim));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data, i, &centroids, 0)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut cum = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                cum += w;
                if cum >= target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for i in 0..n {
            let nd = sq_dist(data, i, &centroids, c);
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }

    let mut labels = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITER {
        // assignment (ties to lowest centroid index)
        for i in 0..n {
            let mut best_c = 0;
            let mut best_d = sq_dist(data, i, &centroids, 0);
            for c in 1..k {
                let d = sq_dist(data, i, &centroids, c);
                if d < best_d {
                    best_d = d;
                    best_c = c;
                }
            }
            labels[i] = best_c;
        }
        // reseed empty clusters to the farthest point from its centroid
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = 0;
            let mut far_d = f64::NEG_INFINITY;
            for i in 0..n {
                if counts[labels[i]] <= 1 {
                    continue; // don't strand another cluster
                }
                let d = sq_dist(data, i, &centroids, labels[i]);
                if d > far_d {
                    far_d = d;
                    far = i;
                }
            }
            centroids.row_mut(c).assign(&data.row(far));
            counts[labels[far]] -= 1;
            labels[far] = c;
            counts[c] = 1;
        }
        // update
        let mut next = Array2::<f64>::zeros((k, dim));
        let mut sizes = vec![0.0f64; k];
        for i in 0..n {
            let mut row = next.row_mut(labels[i]);
            row += &data.row(i);
            sizes[labels[i]] += 1.0;
        }
        for c in 0..k {
            if sizes[c] > 0.0 {
                let mut row = next.row_mut(c);
                row /= sizes[c];
            } else {
                next.row_mut(c).assign(&centroids.row(c));
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let mut s = 0.0;
            for d in 0..dim {
                let diff = next[[c, d]] - centroids[[c, d]];
                s += diff * diff;
            }
            shift = shift.max(s.sqrt());
        }
        centroids = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    // final assignment + inertia
    let mut inertia = 0.0;
    for i in 0..n {
        let mut best_c = 0;
        let mut best_d = sq_dist(data, i, &centroids, 0);
        for c in 1..k {
            let d = sq_dist(data, i, &centroids, c);
            if d < best_d {
                best_d = d;
                best_c = c;
            }
        }
        labels[i] = best_c;
        inertia += best_d;
    }
    KmeansResult {
        labels,
        centroids,
        inertia,
    }
}

/// Cluster descriptors into r regions. Labels are canonicalized by first
/// occurrence (vertex 0's region is 0, the next new region is 1, ...).
pub fn cluster_regions(field: &MotionDescriptorField, r: usize, seed: u64) -> Result<Vec<usize>> {
    let n = field.descriptors.nrows();
    if r == 0 || r > n {
        return Err(RepcmError::InvalidArgument(format!("r={r} outside 1..={n}")));
    }
    if !field.descriptors.iter().all(|v| v.is_finite()) {
        return Err(RepcmError::NonFinite("motion descriptors".into()));
    }
    let result = kmeans(&field.descriptors.view(), r, seed)?;
    let mut remap = vec![usize::MAX; r];
    let mut next = 0;
    let mut labels = Vec::with_capacity(n);
    for &l in &result.labels {
        if remap[l] == usize::MAX {
            remap[l] = next;
            next += 1;
        }
        labels.push(remap[l]);
    }
    Ok(labels)
}

/// Binary region adjacency: A[i][j] = 1 iff i = j or some mesh edge joins a
/// vertex of region i to a vertex of region j.
pub fn build_region_adjacency(assignment: &[usize], topology: &MeshTopology) -> Result<Array2<u8>> {
    if assignment.len() != topology.vertex_count() {
        return Err(RepcmError::shape(
            format!("{} region assignments", topology.vertex_count()),
            format!("{}", assignment.len()),
        ));
    }
    let r = assignment.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    if r == 0 {
        return Err(RepcmError::EmptyInput("region assignment".into()));
    }
    let mut counts = vec![0usize; r];
    for &a in assignment {
        counts[a] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(RepcmError::EmptyRegion {
            region: empty,
            what: "vertices",
        });
    }
    let mut adjacency = Array2::<u8>::zeros((r, r));
    for i in 0..r {
        adjacency[[i, i]] = 1;
    }
    for &(u, v) in topology.edges() {
        let (ru, rv) = (assignment[u as usize], assignment[v as usize]);
        adjacency[[ru, rv]] = 1;
        adjacency[[rv, ru]] = 1;
    }
    Ok(adjacency)
}

/// Run clustering and adjacency construction in one step.
pub fn partition_cohort(
    field: &MotionDescriptorField,
    topology: &MeshTopology,
    r: usize,
    seed: u64,
) -> Result<RegionPartition> {
    let assignment = cluster_regions(field, r, seed)?;
    let adjacency = build_region_adjacency(&assignment, topology)?;
    RegionPartition::new(assignment, r, adjacency)
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same points");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ka = a.iter().copied().max().unwrap() + 1;
    let kb = b.iter().copied().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    let mut rows = vec![0u64; ka];
    let mut cols = vec![0u64; kb];
    for i in 0..n {
        table[a[i]][b[i]] += 1;
        rows[a[i]] += 1;
        cols[b[i]] += 1;
    }
    let comb2 = |x: u64| -> f64 { (x as f64) * ((x as f64) - 1.0) / 2.0 };
    let sum_ij: f64 = table.iter().flatten().map(|&x| comb2(x)).sum();
    let sum_a: f64 = rows.iter().map(|&x| comb2(x)).sum();
    let sum_b: f64 = cols.iter().map(|&x| comb2(x)).sum();
    let total = comb2(n as u64);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_ij - expected) / (max_index - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{icosphere, Chamber, MeshSequence, Phenotype};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn line_topology(n: usize) -> Arc<MeshTopology> {
        // degenerate face so edges exist; enough for descriptor tests
        Arc::new(MeshTopology::new(n, vec![[0, 1 % n as u32, 2 % n as u32]], vec![Chamber::Lv; n]).unwrap())
    }

    fn cohort_from_rows(rows: &Array2<f64>, t: usize) -> Vec<MeshSequence> {
        // Build a single-subject cohort whose ED-relative flattened rows equal `rows`.
        let n = rows.nrows();
        assert_eq!(rows.ncols(), 3 * t);
        let topo = line_topology(n);
        let mut frames = Array3::zeros((t, n, 3));
        for ti in 0..t {
            for vi in 0..n {
                for c in 0..3 {
                    frames[[ti, vi, c]] = rows[[vi, 3 * ti + c]];
                }
            }
        }
        // frame 0 of `rows` is zero in these tests, so frames[0] == 0 == ED
        vec![MeshSequence::new(frames, topo, Phenotype::Nor, "A".into()).unwrap()]
    }

    #[test]
    fn identical_trajectories_give_equal_descriptors() {
        let t = 4;
        let n = 10;
        let mut rows = Array2::zeros((n, 3 * t));
        for vi in 0..n {
            for c in 3..3 * t {
                rows[[vi, c]] = (c as f64).sin();
            }
        }
        let cohort = cohort_from_rows(&rows, t);
        let field = extract_motion_descriptors(&cohort, DescriptorSource::Pca, 3).unwrap();
        let first = field.descriptors.row(0).to_owned();
        for vi in 1..n {
            for d in 0..3 {
                assert!((field.descriptors[[vi, d]] - first[d]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn full_rank_pca_is_isometry() {
        let t = 3;
        let n = 12;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut rows = Array2::zeros((n, 3 * t));
        for vi in 0..n {
            for c in 3..3 * t {
                rows[[vi, c]] = rng.random::<f64>() * 4.0 - 2.0;
            }
        }
        let cohort = cohort_from_rows(&rows, t);
        let field = extract_motion_descriptors(&cohort, DescriptorSource::Pca, 3 * t).unwrap();
        for i in 0..n {
            for j in 0..i {
                let orig: f64 = (0..3 * t).map(|c| (rows[[i, c]] - rows[[j, c]]).powi(2)).sum::<f64>().sqrt();
                let desc: f64 = (0..3 * t)
                    .map(|c| (field.descriptors[[i, c]] - field.descriptors[[j, c]]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((orig - desc).abs() < 1e-5, "{orig} vs {desc}");
            }
        }
    }

    #[test]
    fn orthogonal_motion_modes_separate() {
        // Two vertex groups with orthogonal motion modes: group 0 oscillates
        // along x, group 1 along y, with per-vertex amplitude jitter.
        let t = 6;
        let n = 40;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut rows = Array2::zeros((n, 3 * t));
        for vi in 0..n {
            let group = vi % 2;
            let amp = 2.0 + 0.1 * rng.random::<f64>();
            for ti in 1..t {
                let wave = (ti as f64 / t as f64 * std::f64::consts::PI).sin() * amp;
                rows[[vi, 3 * ti + group]] = wave;
            }
        }
        let cohort = cohort_from_rows(&rows, t);
        let field = extract_motion_descriptors(&cohort, DescriptorSource::Pca, 4).unwrap();
        // inter/intra distance ratio > 5
        let mut intra: f64 = 0.0;
        let mut inter = f64::INFINITY;
        for i in 0..n {
            for j in 0..i {
                let d: f64 = (0..4)
                    .map(|c| (field.descriptors[[i, c]] - field.descriptors[[j, c]]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if i % 2 == j % 2 {
                    intra = intra.max(d);
                } else {
                    inter = inter.min(d);
                }
            }
        }
        assert!(inter / intra.max(1e-12) > 5.0, "inter={inter}, intra={intra}");
        // and the clustering recovers the groups exactly
        let labels = cluster_regions(&field, 2, 0).unwrap();
        for vi in 0..n {
            assert_eq!(labels[vi], labels[vi % 2], "vertex {vi}");
        }
    }

    #[test]
    fn single_region_clusters_everything_to_zero() {
        let field = MotionDescriptorField {
            descriptors: Array2::from_shape_fn((7, 2), |(i, j)| (i * j) as f64),
            backend: DescriptorBackend::Pca,
        };
        let labels = cluster_regions(&field, 1, 9).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn two_distant_blobs_recovered_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let n = 50;
        let mut descriptors = Array2::zeros((n, 3));
        for i in 0..n {
            let blob = i % 2;
            let center = if blob == 0 { 0.0 } else { 100.0 };
            for d in 0..3 {
                descriptors[[i, d]] = center + rng.random::<f64>(); // radius ~1 vs separation 100
            }
        }
        let field = MotionDescriptorField {
            descriptors,
            backend: DescriptorBackend::Pca,
        };
        let labels = cluster_regions(&field, 2, 123).unwrap();
        for i in 0..n {
            assert_eq!(labels[i], labels[i % 2]);
        }
        assert_ne!(labels[0], labels[1]);
    }

    #[test]
    fn clustering_is_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let descriptors = Array2::from_shape_fn((60, 4), |_| rng.random::<f64>());
        let field = MotionDescriptorField {
            descriptors,
            backend: DescriptorBackend::Pca,
        };
        let a = cluster_regions(&field, 5, 77).unwrap();
        let b = cluster_regions(&field, 5, 77).unwrap();
        assert_eq!(a, b);
    }

    fn strip_topology() -> Arc<MeshTopology> {
        // 2x3 vertex strip:
        //   0 - 1 - 2
        //   | / | / |
        //   3 - 4 - 5
        let faces = vec![[0u32, 3, 1], [1, 3, 4], [1, 4, 2], [2, 4, 5]];
        Arc::new(MeshTopology::new(6, faces, vec![Chamber::Lv; 6]).unwrap())
    }

    #[test]
    fn strip_bands_give_tridiagonal_adjacency() {
        let topo = strip_topology();
        let assignment = vec![0, 1, 2, 0, 1, 2];
        let a = build_region_adjacency(&assignment, &topo).unwrap();
        let expect = ndarray::arr2(&[[1u8, 1, 0], [1, 1, 1], [0, 1, 1]]);
        assert_eq!(a, expect);
    }

    #[test]
    fn single_region_adjacency_is_one() {
        let topo = strip_topology();
        let a = build_region_adjacency(&vec![0; 6], &topo).unwrap();
        assert_eq!(a, ndarray::arr2(&[[1u8]]));
    }

    #[test]
    fn checkerboard_adjacency_all_ones() {
        let topo = strip_topology();
        let assignment = vec![0, 1, 0, 1, 0, 1];
        let a = build_region_adjacency(&assignment, &topo).unwrap();
        assert_eq!(a, ndarray::arr2(&[[1u8, 1], [1, 1]]));
    }

    #[test]
    fn empty_region_rejected() {
        let topo = strip_topology();
        // region 1 unused
        let assignment = vec![0, 0, 2, 0, 0, 2];
        match build_region_adjacency(&assignment, &topo) {
            Err(RepcmError::EmptyRegion { region, .. }) => assert_eq!(region, 1),
            other => panic!("expected EmptyRegion, got {other:?}"),
        }
    }

    #[test]
    fn relabeling_permutes_adjacency() {
        let (coords, faces) = icosphere(1);
        let n = coords.nrows();
        let topo = MeshTopology::new(n, faces, vec![Chamber::Lv; n]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let r = 4;
        let mut assignment: Vec<usize> = (0..n).map(|_| rng.random_range(0..r)).collect();
        for i in 0..r {
            assignment[i] = i; // keep every region non-empty
        }
        let a = build_region_adjacency(&assignment, &topo).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<usize> = assignment.iter().map(|&x| perm[x]).collect();
        let ap = build_region_adjacency(&permuted, &topo).unwrap();
        for i in 0..r {
            for j in 0..r {
                assert_eq!(ap[[perm[i], perm[j]]], a[[i, j]]);
            }
        }
    }

    #[test]
    fn ari_basics() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        let ari = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!(ari < 0.1, "independent labelings should have ARI near 0, got {ari}");
    }
}
