//! Shared geometric types and pure mesh/trajectory operations.
//!
//! Everything here is deterministic and side-effect free; all functions can
//! be called concurrently over immutable inputs. Coordinates are millimetres,
//! computed in f64 (disk storage is f32, see [`crate::io`]).

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{RepcmError, Result};

/// Ventricular chamber label. Stored on disk as u8: LV = 0, RV = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Chamber {
    #[serde(rename = "LV")]
    Lv,
    #[serde(rename = "RV")]
    Rv,
}

impl Chamber {
    pub const ALL: [Chamber; 2] = [Chamber::Lv, Chamber::Rv];

    pub fn as_str(&self) -> &'static str {
        match self {
            Chamber::Lv => "LV",
            Chamber::Rv => "RV",
        }
    }

    pub fn from_u8(v: u8) -> Result<Chamber> {
        match v {
            0 => Ok(Chamber::Lv),
            1 => Ok(Chamber::Rv),
            other => Err(RepcmError::InvalidArgument(format!(
                "chamber label byte must be 0 (LV) or 1 (RV), got {other}"
            ))),
        }
    }

    pub fn to_u8(&self) -> u8 {
        match self {
            Chamber::Lv => 0,
            Chamber::Rv => 1,
        }
    }
}

impl std::fmt::Display for Chamber {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Disease-class label of a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phenotype {
    #[serde(rename = "NOR")]
    Nor,
    #[serde(rename = "DCM")]
    Dcm,
    #[serde(rename = "HCM")]
    Hcm,
    #[serde(rename = "RV")]
    Rv,
}

impl Phenotype {
    pub const ALL: [Phenotype; 4] = [Phenotype::Nor, Phenotype::Dcm, Phenotype::Hcm, Phenotype::Rv];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phenotype::Nor => "NOR",
            Phenotype::Dcm => "DCM",
            Phenotype::Hcm => "HCM",
            Phenotype::Rv => "RV",
        }
    }
}

impl std::fmt::Display for Phenotype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phenotype {
    type Err = RepcmError;
    fn from_str(s: &str) -> Result<Phenotype> {
        match s {
            "NOR" => Ok(Phenotype::Nor),
            "DCM" => Ok(Phenotype::Dcm),
            "HCM" => Ok(Phenotype::Hcm),
            "RV" => Ok(Phenotype::Rv),
            other => Err(RepcmError::InvalidArgument(format!(
                "unknown phenotype {other:?} (expected NOR, DCM, HCM or RV)"
            ))),
        }
    }
}

/// Fixed triangle topology shared by every subject and frame of a cohort.
///
/// The chamber surfaces are expected to be closed; that property is only
/// *enforced* where an operation needs it (volume computation, surface
/// metrics), so open test meshes remain constructible.
#[derive(Debug, Clone)]
pub struct MeshTopology {
    vertex_count: usize,
    faces: Vec<[u32; 3]>,
    chamber_labels: Vec<Chamber>,
    /// Undirected edges, each stored once as (lo, hi), sorted.
    edges: Vec<(u32, u32)>,
    /// Face indices belonging to each chamber (all three vertices labelled).
    chamber_faces: [Vec<usize>; 2],
}

impl MeshTopology {
    pub fn new(vertex_count: usize, faces: Vec<[u32; 3]>, chamber_labels: Vec<Chamber>) -> Result<Self> {
        if vertex_count == 0 {
            return Err(RepcmError::EmptyInput("topology with zero vertices".into()));
        }
        if chamber_labels.len() != vertex_count {
            return Err(RepcmError::shape(
                format!("{vertex_count} chamber labels"),
                format!("{}", chamber_labels.len()),
            ));
        }
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v as usize >= vertex_count {
                    return Err(RepcmError::InvalidArgument(format!(
                        "face {fi} references vertex {v} >= N={vertex_count}"
                    )));
                }
            }
        }
        let mut edge_set: BTreeMap<(u32, u32), ()> = BTreeMap::new();
        for f in &faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = if a < b { (a, b) } else { (b, a) };
                edge_set.insert(key, ());
            }
        }
        let mut chamber_faces: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (fi, f) in faces.iter().enumerate() {
            let labels = [
                chamber_labels[f[0] as usize],
                chamber_labels[f[1] as usize],
                chamber_labels[f[2] as usize],
            ];
            if labels.iter().all(|&l| l == Chamber::Lv) {
                chamber_faces[0].push(fi);
            } else if labels.iter().all(|&l| l == Chamber::Rv) {
                chamber_faces[1].push(fi);
            }
        }
        Ok(MeshTopology {
            vertex_count,
            faces,
            chamber_labels,
            edges: edge_set.into_keys().collect(),
            chamber_faces,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn chamber_labels(&self) -> &[Chamber] {
        &self.chamber_labels
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    /// Indices into `faces()` whose vertices are all labelled `chamber`.
    pub fn chamber_face_indices(&self, chamber: Chamber) -> &[usize] {
        &self.chamber_faces[chamber.to_u8() as usize]
    }

    /// Per-vertex mask selecting one chamber.
    pub fn chamber_mask(&self, chamber: Chamber) -> Vec<bool> {
        self.chamber_labels.iter().map(|&l| l == chamber).collect()
    }

    /// Number of boundary edges of a chamber's face subset. An edge is a
    /// boundary edge when it is incident to exactly one face of the subset;
    /// a closed surface has zero. Non-manifold edges (more than two incident
    /// faces) are counted as boundary as well.
    pub fn boundary_edge_count(&self, chamber: Chamber) -> usize {
        let mut incidence: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for &fi in self.chamber_face_indices(chamber) {
            let f = self.faces[fi];
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = if a < b { (a, b) } else { (b, a) };
                *incidence.entry(key).or_insert(0) += 1;
            }
        }
        incidence.values().filter(|&&c| c != 2).count()
    }
}

/// A full-cycle mesh sequence: T frames over the shared topology.
#[derive(Debug, Clone)]
pub struct MeshSequence {
    /// T x N x 3 vertex coordinates in mm. Frame 0 is the ED frame.
    pub frames: Array3<f64>,
    pub topology: Arc<MeshTopology>,
    pub phenotype: Phenotype,
    pub subject_id: String,
}

impl MeshSequence {
    pub fn new(
        frames: Array3<f64>,
        topology: Arc<MeshTopology>,
        phenotype: Phenotype,
        subject_id: String,
    ) -> Result<Self> {
        let (t, n, d) = frames.dim();
        if t == 0 {
            return Err(RepcmError::EmptyInput(format!("sequence {subject_id} has no frames")));
        }
        if n != topology.vertex_count() || d != 3 {
            return Err(RepcmError::shape(
                format!("T x {} x 3 frames", topology.vertex_count()),
                format!("{t} x {n} x {d}"),
            ));
        }
        if !frames.iter().all(|v| v.is_finite()) {
            return Err(RepcmError::NonFinite(format!("frames of subject {subject_id}")));
        }
        Ok(MeshSequence {
            frames,
            topology,
            phenotype,
            subject_id,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    /// The ED frame (frame 0) as an N x 3 view.
    pub fn ed_frame(&self) -> ArrayView2<'_, f64> {
        self.frames.index_axis(ndarray::Axis(0), 0)
    }
}

/// ED-relative displacements: frame t minus the ED frame, T x N x 3 in mm.
#[derive(Debug, Clone)]
pub struct TrajectoryField {
    pub displacements: Array3<f64>,
}

impl TrajectoryField {
    pub fn num_frames(&self) -> usize {
        self.displacements.dim().0
    }

    /// Flatten to N x 3T rows, one row per vertex:
    /// [x_0, y_0, z_0, x_1, y_1, z_1, ...].
    pub fn flatten_per_vertex(&self) -> Array2<f64> {
        let (t, n, _) = self.displacements.dim();
        let mut out = Array2::zeros((n, 3 * t));
        for ti in 0..t {
            for vi in 0..n {
                for c in 0..3 {
                    out[[vi, 3 * ti + c]] = self.displacements[[ti, vi, c]];
                }
            }
        }
        out
    }

    /// Inverse of [`flatten_per_vertex`]: N x 3T rows back to T x N x 3.
    pub fn from_flat_rows(rows: &ArrayView2<'_, f64>) -> Result<TrajectoryField> {
        let (n, cols) = rows.dim();
        if cols % 3 != 0 || cols == 0 {
            return Err(RepcmError::shape("N x 3T matrix", format!("{n} x {cols}")));
        }
        let t = cols / 3;
        let mut disp = Array3::zeros((t, n, 3));
        for ti in 0..t {
            for vi in 0..n {
                for c in 0..3 {
                    disp[[ti, vi, c]] = rows[[vi, 3 * ti + c]];
                }
            }
        }
        Ok(TrajectoryField { displacements: disp })
    }
}

/// Cohort-shared vertex-to-region assignment plus the binary region
/// adjacency matrix A (unit diagonal, symmetric).
#[derive(Debug, Clone)]
pub struct RegionPartition {
    pub assignment: Vec<usize>,
    pub region_count: usize,
    pub adjacency: Array2<u8>,
}

impl RegionPartition {
    pub fn new(assignment: Vec<usize>, region_count: usize, adjacency: Array2<u8>) -> Result<Self> {
        if region_count == 0 {
            return Err(RepcmError::InvalidArgument("region_count must be >= 1".into()));
        }
        let mut counts = vec![0usize; region_count];
        for (vi, &r) in assignment.iter().enumerate() {
            if r >= region_count {
                return Err(RepcmError::InvalidArgument(format!(
                    "vertex {vi} assigned to region {r} >= R={region_count}"
                )));
            }
            counts[r] += 1;
        }
        if let Some(r) = counts.iter().position(|&c| c == 0) {
            return Err(RepcmError::EmptyRegion { region: r, what: "vertices" });
        }
        if adjacency.dim() != (region_count, region_count) {
            return Err(RepcmError::shape(
                format!("{region_count} x {region_count} adjacency"),
                format!("{:?}", adjacency.dim()),
            ));
        }
        for i in 0..region_count {
            if adjacency[[i, i]] != 1 {
                return Err(RepcmError::InvalidArgument(format!(
                    "adjacency diagonal must be 1, A[{i}][{i}] = {}",
                    adjacency[[i, i]]
                )));
            }
            for j in 0..region_count {
                let v = adjacency[[i, j]];
                if v > 1 {
                    return Err(RepcmError::InvalidArgument(format!(
                        "adjacency must be binary, A[{i}][{j}] = {v}"
                    )));
                }
                if v != adjacency[[j, i]] {
                    return Err(RepcmError::InvalidArgument(format!(
                        "adjacency must be symmetric, A[{i}][{j}] != A[{j}][{i}]"
                    )));
                }
            }
        }
        Ok(RegionPartition {
            assignment,
            region_count,
            adjacency,
        })
    }

    /// Adjacency as f64 (attention-mask form).
    pub fn adjacency_f64(&self) -> Array2<f64> {
        self.adjacency.mapv(|v| v as f64)
    }

    /// All-ones adjacency of the same size (the "global attention" ablation).
    pub fn all_ones_variant(&self) -> RegionPartition {
        RegionPartition {
            assignment: self.assignment.clone(),
            region_count: self.region_count,
            adjacency: Array2::from_elem((self.region_count, self.region_count), 1),
        }
    }
}

/// K anchor vertex indices with region IDs inherited from the partition.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub indices: Vec<usize>,
    pub region_ids: Vec<usize>,
}

impl AnchorSet {
    /// Build from FPS indices, inheriting each sampled vertex's region ID.
    pub fn from_indices(indices: Vec<usize>, partition: &RegionPartition) -> Result<Self> {
        let mut seen = vec![false; partition.assignment.len()];
        let mut region_ids = Vec::with_capacity(indices.len());
        for &i in &indices {
            if i >= partition.assignment.len() {
                return Err(RepcmError::InvalidArgument(format!(
                    "anchor index {i} out of range (N={})",
                    partition.assignment.len()
                )));
            }
            if seen[i] {
                return Err(RepcmError::InvalidArgument(format!("duplicate anchor index {i}")));
            }
            seen[i] = true;
            region_ids.push(partition.assignment[i]);
        }
        Ok(AnchorSet { indices, region_ids })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// ED-relative trajectories: output[t] = frames[t] - frames[0].
pub fn ed_relative(seq: &MeshSequence) -> TrajectoryField {
    let ed = seq.frames.index_axis(ndarray::Axis(0), 0).to_owned();
    let mut disp = seq.frames.clone();
    for mut frame in disp.outer_iter_mut() {
        frame -= &ed;
    }
    TrajectoryField { displacements: disp }
}

/// Recompose frames from an ED frame and ED-relative displacements
/// (the exact inverse of [`ed_relative`]).
pub fn compose_frames(ed: &ArrayView2<'_, f64>, traj: &TrajectoryField) -> Result<Array3<f64>> {
    let (t, n, _) = traj.displacements.dim();
    if ed.dim() != (n, 3) {
        return Err(RepcmError::shape(format!("{n} x 3 ED frame"), format!("{:?}", ed.dim())));
    }
    let mut frames = traj.displacements.clone();
    for mut frame in frames.outer_iter_mut() {
        frame += ed;
    }
    debug_assert_eq!(frames.dim(), (t, n, 3));
    Ok(frames)
}

/// Greedy max-min farthest point sampling.
///
/// Each successive index maximizes the minimum Euclidean distance to the
/// already-selected set; ties break to the lowest vertex index, so the result
/// is fully determined by `start_index`.
pub fn farthest_point_sampling(
    points: &ArrayView2<'_, f64>,
    k: usize,
    start_index: usize,
) -> Result<Vec<usize>> {
    let n = points.nrows();
    if n == 0 {
        return Err(RepcmError::EmptyInput("point set for FPS".into()));
    }
    if k == 0 || k > n {
        return Err(RepcmError::InvalidArgument(format!("FPS k={k} outside 1..={n}")));
    }
    if start_index >= n {
        return Err(RepcmError::InvalidArgument(format!(
            "FPS start_index={start_index} outside 0..{n}"
        )));
    }
    let d2 = |a: usize, b: usize| -> f64 {
        let mut s = 0.0;
        for c in 0..points.ncols() {
            let d = points[[a, c]] - points[[b, c]];
            s += d * d;
        }
        s
    };
    let mut selected = Vec::with_capacity(k);
    let mut is_selected = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];
    selected.push(start_index);
    is_selected[start_index] = true;
    for i in 0..n {
        min_d2[i] = d2(i, start_index);
    }
    while selected.len() < k {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if !is_selected[i] && min_d2[i] > best_d {
                best_d = min_d2[i];
                best = i;
            }
        }
        selected.push(best);
        is_selected[best] = true;
        for i in 0..n {
            if !is_selected[i] {
                let d = d2(i, best);
                if d < min_d2[i] {
                    min_d2[i] = d;
                }
            }
        }
    }
    Ok(selected)
}

/// Volume of one chamber's closed surface via the divergence theorem:
/// |sum over faces of det(v0, v1, v2) / 6|, in mm^3.
pub fn chamber_volume(frame: &ArrayView2<'_, f64>, topology: &MeshTopology, chamber: Chamber) -> Result<f64> {
    if frame.dim() != (topology.vertex_count(), 3) {
        return Err(RepcmError::shape(
            format!("{} x 3 frame", topology.vertex_count()),
            format!("{:?}", frame.dim()),
        ));
    }
    let boundary = topology.boundary_edge_count(chamber);
    if boundary != 0 {
        return Err(RepcmError::OpenSurface {
            chamber: chamber.as_str().into(),
            boundary_edges: boundary,
        });
    }
    let mut signed = 0.0;
    for &fi in topology.chamber_face_indices(chamber) {
        let f = topology.faces()[fi];
        let a = [frame[[f[0] as usize, 0]], frame[[f[0] as usize, 1]], frame[[f[0] as usize, 2]]];
        let b = [frame[[f[1] as usize, 0]], frame[[f[1] as usize, 1]], frame[[f[1] as usize, 2]]];
        let c = [frame[[f[2] as usize, 0]], frame[[f[2] as usize, 1]], frame[[f[2] as usize, 2]]];
        signed += a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
            + a[2] * (b[0] * c[1] - b[1] * c[0]);
    }
    Ok((signed / 6.0).abs())
}

/// Unit cube topology (12 triangles, outward orientation), useful in tests
/// and as a documented volume oracle.
pub fn unit_cube() -> (Array2<f64>, MeshTopology) {
    let verts = [
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [1.0, 1.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 0.0, 1.0],
        [1.0, 1.0, 1.0],
        [0.0, 1.0, 1.0],
    ];
    let faces: Vec<[u32; 3]> = vec![
        // bottom (z=0), outward normal -z
        [0, 2, 1],
        [0, 3, 2],
        // top (z=1), outward normal +z
        [4, 5, 6],
        [4, 6, 7],
        // front (y=0), outward normal -y
        [0, 1, 5],
        [0, 5, 4],
        // right (x=1), outward normal +x
        [1, 2, 6],
        [1, 6, 5],
        // back (y=1), outward normal +y
        [2, 3, 7],
        [2, 7, 6],
        // left (x=0), outward normal -x
        [3, 0, 4],
        [3, 4, 7],
    ];
    let mut coords = Array2::zeros((8, 3));
    for (i, v) in verts.iter().enumerate() {
        coords[[i, 0]] = v[0];
        coords[[i, 1]] = v[1];
        coords[[i, 2]] = v[2];
    }
    let topo = MeshTopology::new(8, faces, vec![Chamber::Lv; 8]).expect("cube topology");
    (coords, topo)
}

/// Icosphere: subdivided icosahedron projected onto the unit sphere,
/// outward-oriented. Subdivision level 0 is the icosahedron itself
/// (12 vertices, 20 faces); each level quadruples the face count.
pub fn icosphere(subdivisions: usize) -> (Array2<f64>, Vec<[u32; 3]>) {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    for v in verts.iter_mut() {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        v[0] /= n;
        v[1] /= n;
        v[2] /= n;
    }
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mids = [0u32; 3];
            for (e, (a, b)) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])].into_iter().enumerate() {
                let key = if a < b { (a, b) } else { (b, a) };
                mids[e] = *midpoint.entry(key).or_insert_with(|| {
                    let pa = verts[a as usize];
                    let pb = verts[b as usize];
                    let mut m = [
                        (pa[0] + pb[0]) / 2.0,
                        (pa[1] + pb[1]) / 2.0,
                        (pa[2] + pb[2]) / 2.0,
                    ];
                    let n = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
                    m[0] /= n;
                    m[1] /= n;
                    m[2] /= n;
                    verts.push(m);
                    (verts.len() - 1) as u32
                });
            }
            next_faces.push([f[0], mids[0], mids[2]]);
            next_faces.push([f[1], mids[1], mids[0]]);
            next_faces.push([f[2], mids[2], mids[1]]);
            next_faces.push([mids[0], mids[1], mids[2]]);
        }
        faces = next_faces;
    }
    let mut coords = Array2::zeros((verts.len(), 3));
    for (i, v) in verts.iter().enumerate() {
        coords[[i, 0]] = v[0];
        coords[[i, 1]] = v[1];
        coords[[i, 2]] = v[2];
    }
    (coords, faces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{arr2, Array3};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_sequence(frames: Array3<f64>) -> MeshSequence {
        let n = frames.dim().1;
        let topo = Arc::new(MeshTopology::new(n, vec![[0, 0, 0]], vec![Chamber::Lv; n]).unwrap());
        MeshSequence::new(frames, topo, Phenotype::Nor, "toy".into()).unwrap()
    }

    #[test]
    fn ed_relative_constant_sequence_is_zero() {
        let mut frames = Array3::zeros((4, 3, 3));
        for t in 0..4 {
            for v in 0..3 {
                frames[[t, v, 0]] = 1.5;
                frames[[t, v, 1]] = -2.0;
                frames[[t, v, 2]] = 0.25;
            }
        }
        let traj = ed_relative(&toy_sequence(frames));
        assert!(traj.displacements.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ed_relative_frame_zero_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut frames = Array3::zeros((5, 4, 3));
        frames.mapv_inplace(|_| rng.random::<f64>() * 10.0 - 5.0);
        let traj = ed_relative(&toy_sequence(frames));
        let f0 = traj.displacements.index_axis(ndarray::Axis(0), 0);
        assert!(f0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ed_relative_direct_subtraction() {
        // 2-frame, 1-vertex sequence with frames (0,0,0),(1,2,3)
        let mut frames = Array3::zeros((2, 1, 3));
        frames[[1, 0, 0]] = 1.0;
        frames[[1, 0, 1]] = 2.0;
        frames[[1, 0, 2]] = 3.0;
        let traj = ed_relative(&toy_sequence(frames));
        assert_eq!(traj.displacements[[0, 0, 0]], 0.0);
        assert_eq!(traj.displacements[[1, 0, 0]], 1.0);
        assert_eq!(traj.displacements[[1, 0, 1]], 2.0);
        assert_eq!(traj.displacements[[1, 0, 2]], 3.0);
    }

    #[test]
    fn compose_zero_trajectory_repeats_ed() {
        let ed = arr2(&[[1.0, 1.0, 1.0], [2.0, 0.0, -1.0]]);
        let traj = TrajectoryField {
            displacements: Array3::zeros((3, 2, 3)),
        };
        let frames = compose_frames(&ed.view(), &traj).unwrap();
        for t in 0..3 {
            assert_eq!(frames.index_axis(ndarray::Axis(0), t), ed.view());
        }
    }

    #[test]
    fn compose_direct_addition() {
        let ed = arr2(&[[1.0, 1.0, 1.0]]);
        let mut disp = Array3::zeros((2, 1, 3));
        disp[[1, 0, 0]] = 0.5;
        let frames = compose_frames(&ed.view(), &TrajectoryField { displacements: disp }).unwrap();
        assert_eq!(frames[[1, 0, 0]], 1.5);
        assert_eq!(frames[[1, 0, 1]], 1.0);
        assert_eq!(frames[[1, 0, 2]], 1.0);
    }

    #[test]
    fn compose_shape_mismatch_rejected() {
        let ed = arr2(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        let traj = TrajectoryField {
            displacements: Array3::zeros((2, 3, 3)),
        };
        assert!(compose_frames(&ed.view(), &traj).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_ed_compose(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = rng.random_range(1..6usize);
            let n = rng.random_range(1..8usize);
            let mut frames = Array3::zeros((t, n, 3));
            frames.mapv_inplace(|_| rng.random::<f64>() * 40.0 - 20.0);
            let seq = toy_sequence(frames.clone());
            let traj = ed_relative(&seq);
            let back = compose_frames(&seq.ed_frame(), &traj).unwrap();
            for (a, b) in back.iter().zip(frames.iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn fps_min_pairwise_distance_non_increasing(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(3..20usize);
            let mut pts = Array2::zeros((n, 3));
            pts.mapv_inplace(|_| rng.random::<f64>() * 10.0);
            let full = farthest_point_sampling(&pts.view(), n, 0).unwrap();
            let min_pairwise = |sel: &[usize]| -> f64 {
                let mut m = f64::INFINITY;
                for i in 0..sel.len() {
                    for j in 0..i {
                        let mut s = 0.0;
                        for c in 0..3 {
                            let d = pts[[sel[i], c]] - pts[[sel[j], c]];
                            s += d * d;
                        }
                        m = m.min(s.sqrt());
                    }
                }
                m
            };
            let mut prev = f64::INFINITY;
            for k in 2..=n {
                let cur = min_pairwise(&full[..k]);
                prop_assert!(cur <= prev + 1e-12);
                prev = cur;
            }
        }
    }

    /// Independent greedy max-min reference: recomputes every distance at
    /// every step rather than maintaining a running minimum.
    fn fps_oracle(points: &ArrayView2<'_, f64>, k: usize, start: usize) -> Vec<usize> {
        let n = points.nrows();
        let d2 = |a: usize, b: usize| -> f64 {
            (0..points.ncols())
                .map(|c| (points[[a, c]] - points[[b, c]]).powi(2))
                .sum()
        };
        let mut sel = vec![start];
        while sel.len() < k {
            let mut best = usize::MAX;
            let mut best_d = f64::NEG_INFINITY;
            for i in 0..n {
                if sel.contains(&i) {
                    continue;
                }
                let m = sel.iter().map(|&s| d2(i, s)).fold(f64::INFINITY, f64::min);
                if m > best_d {
                    best_d = m;
                    best = i;
                }
            }
            sel.push(best);
        }
        sel
    }

    #[test]
    fn fps_line_example() {
        // 1-D points at x = {0, 1, 2, 10}, start 0, k = 2 -> {0, 3}
        let pts = arr2(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        let sel = farthest_point_sampling(&pts.view(), 2, 0).unwrap();
        assert_eq!(sel, vec![0, 3]);
    }

    #[test]
    fn fps_k_equals_n_selects_all() {
        let pts = arr2(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
        let mut sel = farthest_point_sampling(&pts.view(), 3, 1).unwrap();
        sel.sort_unstable();
        assert_eq!(sel, vec![0, 1, 2]);
    }

    #[test]
    fn fps_matches_oracle_small_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = rng.random_range(1..=8usize);
            let mut pts = Array2::zeros((n, 3));
            pts.mapv_inplace(|_| (rng.random_range(0..5) as f64) * 0.5);
            for start in 0..n {
                for k in 1..=n {
                    let got = farthest_point_sampling(&pts.view(), k, start).unwrap();
                    let want = fps_oracle(&pts.view(), k, start);
                    assert_eq!(got, want, "n={n} k={k} start={start}");
                }
            }
        }
    }

    #[test]
    fn fps_rejects_bad_args() {
        let pts = arr2(&[[0.0, 0.0, 0.0]]);
        assert!(farthest_point_sampling(&pts.view(), 2, 0).is_err());
        assert!(farthest_point_sampling(&pts.view(), 0, 0).is_err());
        assert!(farthest_point_sampling(&pts.view(), 1, 5).is_err());
    }

    #[test]
    fn cube_volume_is_one() {
        let (coords, topo) = unit_cube();
        let v = chamber_volume(&coords.view(), &topo, Chamber::Lv).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn degenerate_flat_mesh_volume_zero() {
        let (mut coords, topo) = unit_cube();
        coords.column_mut(2).fill(0.0);
        let v = chamber_volume(&coords.view(), &topo, Chamber::Lv).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn icosphere_volume_close_to_sphere() {
        let (coords, faces) = icosphere(3);
        let n = coords.nrows();
        let topo = MeshTopology::new(n, faces, vec![Chamber::Lv; n]).unwrap();
        let v = chamber_volume(&coords.view(), &topo, Chamber::Lv).unwrap();
        let sphere = 4.0 * std::f64::consts::PI / 3.0;
        assert!((v - sphere).abs() / sphere < 0.01, "v={v} vs {sphere}");
    }

    #[test]
    fn open_surface_detected() {
        let (coords, mut faces) = icosphere(1);
        faces.pop();
        let n = coords.nrows();
        let topo = MeshTopology::new(n, faces, vec![Chamber::Lv; n]).unwrap();
        match chamber_volume(&coords.view(), &topo, Chamber::Lv) {
            Err(RepcmError::OpenSurface { boundary_edges, .. }) => assert_eq!(boundary_edges, 3),
            other => panic!("expected OpenSurface, got {other:?}"),
        }
    }

    #[test]
    fn volume_translation_and_scale_invariance() {
        let (coords, faces) = icosphere(2);
        let n = coords.nrows();
        let topo = MeshTopology::new(n, faces, vec![Chamber::Lv; n]).unwrap();
        let v0 = chamber_volume(&coords.view(), &topo, Chamber::Lv).unwrap();
        let mut shifted = coords.clone();
        shifted.column_mut(0).mapv_inplace(|x| x + 123.0);
        shifted.column_mut(1).mapv_inplace(|x| x - 55.0);
        let v1 = chamber_volume(&shifted.view(), &topo, Chamber::Lv).unwrap();
        assert_relative_eq!(v0, v1, max_relative = 1e-6);

        let scaled = coords.mapv(|x| x * 2.5);
        let v2 = chamber_volume(&scaled.view(), &topo, Chamber::Lv).unwrap();
        assert_relative_eq!(v2, v0 * 2.5f64.powi(3), max_relative = 1e-6);
    }

    #[test]
    fn anchor_set_inherits_region_ids() {
        let assignment = vec![0, 0, 1, 1, 1];
        let adj = arr2(&[[1u8, 1], [1, 1]]);
        let part = RegionPartition::new(assignment, 2, adj).unwrap();
        let anchors = AnchorSet::from_indices(vec![4, 0, 2], &part).unwrap();
        assert_eq!(anchors.region_ids, vec![1, 0, 1]);
        assert!(AnchorSet::from_indices(vec![0, 0], &part).is_err());
        assert!(AnchorSet::from_indices(vec![9], &part).is_err());
    }

    #[test]
    fn partition_invariants_enforced() {
        // empty region
        assert!(RegionPartition::new(vec![0, 0], 2, arr2(&[[1u8, 1], [1, 1]])).is_err());
        // zero diagonal
        assert!(RegionPartition::new(vec![0, 1], 2, arr2(&[[0u8, 1], [1, 1]])).is_err());
        // asymmetric
        assert!(RegionPartition::new(vec![0, 1], 2, arr2(&[[1u8, 1], [0, 1]])).is_err());
    }
}
