//! Geometric and functional evaluation.
//!
//! Surface distances (ASSD, HD95) are computed per chamber by sampling each
//! surface at its vertices plus face barycenters and measuring
//! point-to-triangle distance against the other surface. The default path
//! uses an AABB tree; `*_brute` variants search exhaustively with the same
//! sampling and serve as the reference oracle. HD95 pools the directed
//! distance samples of both directions and takes the 95th percentile with
//! linear interpolation between order statistics, which makes it symmetric
//! by construction.

use ndarray::{Array2, Array3, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RepcmError, Result};
use crate::mesh::{chamber_volume, Chamber, MeshSequence, MeshTopology, Phenotype};

type Point = [f64; 3];
type Triangle = [Point; 3];

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm_sq(a: Point) -> f64 {
    dot(a, a)
}

/// Squared distance from a point to a triangle (closest-point region walk).
fn point_triangle_dist_sq(p: Point, tri: &Triangle) -> f64 {
    let [a, b, c] = *tri;
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return norm_sq(ap);
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return norm_sq(bp);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 && d1 - d3 > 0.0 {
        let v = d1 / (d1 - d3);
        let q = [ap[0] - v * ab[0], ap[1] - v * ab[1], ap[2] - v * ab[2]];
        return norm_sq(q);
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return norm_sq(cp);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 && d2 - d6 > 0.0 {
        let w = d2 / (d2 - d6);
        let q = [ap[0] - w * ac[0], ap[1] - w * ac[1], ap[2] - w * ac[2]];
        return norm_sq(q);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 && (d4 - d3) + (d5 - d6) > 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        let bc = sub(c, b);
        let q = [bp[0] - w * bc[0], bp[1] - w * bc[1], bp[2] - w * bc[2]];
        return norm_sq(q);
    }
    let denom = va + vb + vc;
    if denom.abs() < 1e-300 {
        // fully degenerate triangle: fall back to its vertices
        return norm_sq(ap).min(norm_sq(bp)).min(norm_sq(cp));
    }
    let v = vb / denom;
    let w = vc / denom;
    let q = [
        ap[0] - v * ab[0] - w * ac[0],
        ap[1] - v * ab[1] - w * ac[1],
        ap[2] - v * ab[2] - w * ac[2],
    ];
    norm_sq(q)
}

/// Flat AABB tree over triangles; median split on the largest centroid axis.
struct TriangleBvh {
    tris: Vec<Triangle>,
    nodes: Vec<BvhNode>,
}

struct BvhNode {
    lo: Point,
    hi: Point,
    left: usize,
    right: usize,
    start: usize,
    count: usize,
}

const BVH_LEAF: usize = 8;

impl TriangleBvh {
    fn build(mut tris: Vec<Triangle>) -> TriangleBvh {
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let mut nodes = Vec::new();
        if !tris.is_empty() {
            Self::build_node(&tris, &mut order, 0, tris.len(), &mut nodes);
            let reordered: Vec<Triangle> = order.iter().map(|&i| tris[i]).collect();
            tris = reordered;
        }
        TriangleBvh { tris, nodes }
    }

    fn bounds(tris: &[Triangle], order: &[usize], start: usize, end: usize) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &order[start..end] {
            for v in &tris[i] {
                for c in 0..3 {
                    lo[c] = lo[c].min(v[c]);
                    hi[c] = hi[c].max(v[c]);
                }
            }
        }
        (lo, hi)
    }

    fn build_node(
        tris: &[Triangle],
        order: &mut [usize],
        start: usize,
        end: usize,
        nodes: &mut Vec<BvhNode>,
    ) -> usize {
        let (lo, hi) = Self::bounds(tris, order, start, end);
        let idx = nodes.len();
        nodes.push(BvhNode {
            lo,
            hi,
            left: usize::MAX,
            right: usize::MAX,
            start,
            count: 0,
        });
        if end - start <= BVH_LEAF {
            nodes[idx].count = end - start;
            return idx;
        }
        let mut axis = 0;
        for c in 1..3 {
            if hi[c] - lo[c] > hi[axis] - lo[axis] {
                axis = c;
            }
        }
        let centroid = |t: &Triangle| (t[0][axis] + t[1][axis] + t[2][axis]) / 3.0;
        order[start..end].sort_by(|&a, &b| {
            centroid(&tris[a])
                .partial_cmp(&centroid(&tris[b]))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mid = (start + end) / 2;
        let left = Self::build_node(tris, order, start, mid, nodes);
        let right = Self::build_node(tris, order, mid, end, nodes);
        nodes[idx].left = left;
        nodes[idx].right = right;
        idx
    }

    fn aabb_dist_sq(p: Point, lo: Point, hi: Point) -> f64 {
        let mut s = 0.0;
        for c in 0..3 {
            let d = if p[c] < lo[c] {
                lo[c] - p[c]
            } else if p[c] > hi[c] {
                p[c] - hi[c]
            } else {
                0.0
            };
            s += d * d;
        }
        s
    }

    /// Minimum distance from `p` to any triangle.
    fn distance(&self, p: Point) -> f64 {
        if self.tris.is_empty() {
            return f64::INFINITY;
        }
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if Self::aabb_dist_sq(p, node.lo, node.hi) >= best {
                continue;
            }
            if node.count > 0 {
                for t in &self.tris[node.start..node.start + node.count] {
                    let d = point_triangle_dist_sq(p, t);
                    if d < best {
                        best = d;
                    }
                }
            } else {
                // visit the nearer child first
                let dl = Self::aabb_dist_sq(p, self.nodes[node.left].lo, self.nodes[node.left].hi);
                let dr = Self::aabb_dist_sq(p, self.nodes[node.right].lo, self.nodes[node.right].hi);
                if dl <= dr {
                    stack.push(node.right);
                    stack.push(node.left);
                } else {
                    stack.push(node.left);
                    stack.push(node.right);
                }
            }
        }
        best.sqrt()
    }
}

fn chamber_triangles(frame: &ArrayView2<'_, f64>, topology: &MeshTopology, chamber: Chamber) -> Vec<Triangle> {
    topology
        .chamber_face_indices(chamber)
        .iter()
        .map(|&fi| {
            let f = topology.faces()[fi];
            let vert = |v: u32| -> Point { [frame[[v as usize, 0]], frame[[v as usize, 1]], frame[[v as usize, 2]]] };
            [vert(f[0]), vert(f[1]), vert(f[2])]
        })
        .collect()
}

/// Surface samples of one chamber: its vertices, then its face barycenters.
fn surface_samples(frame: &ArrayView2<'_, f64>, topology: &MeshTopology, chamber: Chamber) -> Vec<Point> {
    let mut pts = Vec::new();
    for (v, &label) in topology.chamber_labels().iter().enumerate() {
        if label == chamber {
            pts.push([frame[[v, 0]], frame[[v, 1]], frame[[v, 2]]]);
        }
    }
    for &fi in topology.chamber_face_indices(chamber) {
        let f = topology.faces()[fi];
        let mut b = [0.0; 3];
        for &v in &f {
            for c in 0..3 {
                b[c] += frame[[v as usize, c]] / 3.0;
            }
        }
        pts.push(b);
    }
    pts
}

fn directed_distances(
    from: &ArrayView2<'_, f64>,
    to: &ArrayView2<'_, f64>,
    topology: &MeshTopology,
    chamber: Chamber,
) -> Result<Vec<f64>> {
    let samples = surface_samples(from, topology, chamber);
    let tris = chamber_triangles(to, topology, chamber);
    if samples.is_empty() || tris.is_empty() {
        return Err(RepcmError::EmptyInput(format!("{chamber} surface for distance computation")));
    }
    let bvh = TriangleBvh::build(tris);
    Ok(samples.iter().map(|&p| bvh.distance(p)).collect())
}

fn directed_distances_brute(
    from: &ArrayView2<'_, f64>,
    to: &ArrayView2<'_, f64>,
    topology: &MeshTopology,
    chamber: Chamber,
) -> Result<Vec<f64>> {
    let samples = surface_samples(from, topology, chamber);
    let tris = chamber_triangles(to, topology, chamber);
    if samples.is_empty() || tris.is_empty() {
        return Err(RepcmError::EmptyInput(format!("{chamber} surface for distance computation")));
    }
    Ok(samples
        .iter()
        .map(|&p| {
            tris.iter()
                .map(|t| point_triangle_dist_sq(p, t))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Percentile with linear interpolation between order statistics
/// (rank = p/100 * (n-1)).
fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < values.len() {
        values[lo] * (1.0 - frac) + values[lo + 1] * frac
    } else {
        values[lo]
    }
}

/// Average symmetric surface distance between one chamber of two frames
/// over the shared topology, in mm.
pub fn assd(
    frame_a: &ArrayView2<'_, f64>,
    frame_b: &ArrayView2<'_, f64>,
    topology: &MeshTopology,
    chamber: Chamber,
) -> Result<f64> {
    let ab = directed_distances(frame_a, frame_b, topology, chamber)?;
    let ba = directed_distances(frame_b, frame_a, topology, chamber)?;
    Ok(0.5 * (mean(&ab) + mean(&ba)))
}

/// Exhaustive-search ASSD (the oracle route; same sampling as [`assd`]).
pub fn assd_brute(
    frame_a: &ArrayView2<'_, f64>,
    frame_b: &ArrayView2<'_, f64>,
    topology: &MeshTopology,
    chamber: Chamber,
) -> Result<f64> {
    let ab = directed_distances_brute(frame_a, frame_b, topology, chamber)?;
    let ba = directed_distances_brute(frame_b, frame_a, topology, chamber)?;
    Ok(0.5 * (mean(&ab) + mean(&ba)))
}

/// 95th-percentile symmetric Hausdorff distance (pooled directions,
/// linear interpolation), in mm.
pub fn hd95(
    frame_a: &ArrayView2<'_, f64>,
    frame_b: &ArrayView2<'_, f64>,
    topology: &MeshTopology,
    chamber: Chamber,
) -> Result<f64> {
    let mut pooled = directed_distances(frame_a, frame_b, topology, chamber)?;
    pooled.extend(directed_distances(frame_b, frame_a, topology, chamber)?);
    Ok(percentile(&mut pooled, 95.0))
}

/// Exhaustive-search HD95 (the oracle route; same sampling as [`hd95`]).
pub fn hd95_brute(
    frame_a: &ArrayView2<'_, f64>,
    frame_b: &ArrayView2<'_, f64>,
    topology: &MeshTopology,
    chamber: Chamber,
) -> Result<f64> {
    let mut pooled = directed_distances_brute(frame_a, frame_b, topology, chamber)?;
    pooled.extend(directed_distances_brute(frame_b, frame_a, topology, chamber)?);
    Ok(percentile(&mut pooled, 95.0))
}

/// Vertex-wise RMSE over all frames and masked vertices, in mm:
/// sqrt of the mean squared Euclidean vertex error.
pub fn vtx_rmse(pred: &Array3<f64>, truth: &Array3<f64>, mask: &[bool]) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(RepcmError::shape(format!("{:?}", truth.dim()), format!("{:?}", pred.dim())));
    }
    let (t, n, _) = pred.dim();
    if mask.len() != n {
        return Err(RepcmError::shape(format!("{n} mask entries"), format!("{}", mask.len())));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(RepcmError::EmptyInput("vertex mask".into()));
    }
    let mut acc = 0.0;
    for ti in 0..t {
        for (v, &keep) in mask.iter().enumerate() {
            if !keep {
                continue;
            }
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = pred[[ti, v, c]] - truth[[ti, v, c]];
                d2 += d * d;
            }
            acc += d2;
        }
    }
    Ok((acc / (t * count) as f64).sqrt())
}

/// Vertex RMSE per region (each region over its own vertices).
pub fn per_region_vtx_rmse(
    pred: &Array3<f64>,
    truth: &Array3<f64>,
    assignment: &[usize],
    regions: usize,
) -> Result<Vec<f64>> {
    let n = pred.dim().1;
    if assignment.len() != n {
        return Err(RepcmError::shape(format!("{n} assignments"), format!("{}", assignment.len())));
    }
    (0..regions)
        .map(|r| {
            let mask: Vec<bool> = assignment.iter().map(|&a| a == r).collect();
            vtx_rmse(pred, truth, &mask)
        })
        .collect()
}

/// Mean motion amplitude of a sequence: average over frames and vertices of
/// the Euclidean displacement from the ED frame, in mm.
pub fn mean_motion_amplitude(frames: &Array3<f64>) -> f64 {
    let (t, n, _) = frames.dim();
    let mut acc = 0.0;
    for ti in 0..t {
        for v in 0..n {
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = frames[[ti, v, c]] - frames[[0, v, c]];
                d2 += d * d;
            }
            acc += d2.sqrt();
        }
    }
    acc / (t * n) as f64
}

/// Per-frame chamber volume of a sequence, mm^3.
pub fn volume_curve(seq: &MeshSequence, chamber: Chamber) -> Result<Vec<f64>> {
    (0..seq.num_frames())
        .map(|t| chamber_volume(&seq.frames.index_axis(ndarray::Axis(0), t), &seq.topology, chamber))
        .collect()
}

pub fn volume_curve_frames(frames: &Array3<f64>, topology: &MeshTopology, chamber: Chamber) -> Result<Vec<f64>> {
    (0..frames.dim().0)
        .map(|t| chamber_volume(&frames.index_axis(ndarray::Axis(0), t), topology, chamber))
        .collect()
}

/// v_t / v_0. The first entry is exactly 1.
pub fn normalized_volume_curve(curve: &[f64]) -> Result<Vec<f64>> {
    let v0 = *curve.first().ok_or_else(|| RepcmError::EmptyInput("volume curve".into()))?;
    if v0 <= 0.0 {
        return Err(RepcmError::InvalidArgument(format!("ED volume {v0} must be positive")));
    }
    Ok(curve.iter().map(|&v| v / v0).collect())
}

/// Row-normalized phenotype x expert usage matrix: entry (p, e) is the
/// fraction of phenotype-p subjects whose argmax gate weight is expert e.
pub fn expert_usage_matrix(
    subjects: &[(Phenotype, Vec<f64>)],
    phenotypes: &[Phenotype],
    experts: usize,
) -> Result<Array2<f64>> {
    if experts == 0 {
        return Err(RepcmError::InvalidArgument("experts must be >= 1".into()));
    }
    let mut matrix = Array2::<f64>::zeros((phenotypes.len(), experts));
    for (pi, &p) in phenotypes.iter().enumerate() {
        let rows: Vec<&Vec<f64>> = subjects.iter().filter(|(sp, _)| *sp == p).map(|(_, g)| g).collect();
        if rows.is_empty() {
            return Err(RepcmError::EmptyRegion {
                region: pi,
                what: "subjects (phenotype row)",
            });
        }
        for gates in &rows {
            if gates.len() != experts {
                return Err(RepcmError::shape(format!("{experts} gate weights"), format!("{}", gates.len())));
            }
            let total: f64 = gates.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(RepcmError::InvalidArgument(format!(
                    "gate weights must sum to 1, got {total}"
                )));
            }
            let mut arg = 0;
            for (e, &w) in gates.iter().enumerate() {
                if w > gates[arg] {
                    arg = e;
                }
            }
            matrix[[pi, arg]] += 1.0;
        }
        let inv = 1.0 / rows.len() as f64;
        for e in 0..experts {
            matrix[[pi, e]] *= inv;
        }
    }
    Ok(matrix)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectChamberMetrics {
    pub subject: String,
    pub phenotype: Phenotype,
    pub chamber: Chamber,
    pub assd_mm: f64,
    pub hd95_mm: f64,
    pub vtx_rmse_mm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

fn summarize(values: &[f64]) -> MetricSummary {
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
    MetricSummary { mean: m, std: var.sqrt() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChamberSummary {
    pub chamber: Chamber,
    pub assd: MetricSummary,
    pub hd95: MetricSummary,
    pub vtx_rmse: MetricSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeCurveRecord {
    pub subject: String,
    pub phenotype: Phenotype,
    pub chamber: Chamber,
    pub truth_mm3: Vec<f64>,
    pub predicted_mm3: Vec<f64>,
    pub truth_normalized: Vec<f64>,
    pub predicted_normalized: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UsageMatrix {
    pub phenotypes: Vec<Phenotype>,
    pub experts: usize,
    /// Row-normalized rows aligned with `phenotypes`.
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_subject: Vec<SubjectChamberMetrics>,
    pub summary: Vec<ChamberSummary>,
    pub volume_curves: Vec<VolumeCurveRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub usage: Option<UsageMatrix>,
}

/// Evaluate predicted sequences against ground truth, per subject and
/// chamber: ASSD/HD95 averaged over frames, vertex RMSE over frames and
/// chamber vertices, volume curves (raw and normalized), and the
/// expert-usage matrix when gate weights are supplied.
pub fn evaluate_cohort(
    pairs: &[(&MeshSequence, &Array3<f64>)],
    gates: Option<(&[(Phenotype, Vec<f64>)], usize)>,
) -> Result<EvaluationReport> {
    if pairs.is_empty() {
        return Err(RepcmError::EmptyInput("evaluation pairs".into()));
    }
    let per_subject_nested: Vec<Result<Vec<SubjectChamberMetrics>>> = pairs
        .par_iter()
        .map(|(truth, pred)| {
            let mut rows = Vec::with_capacity(2);
            for chamber in Chamber::ALL {
                let t_frames = truth.num_frames();
                let mut assd_acc = 0.0;
                let mut hd_acc = 0.0;
                for ti in 0..t_frames {
                    let tf = truth.frames.index_axis(ndarray::Axis(0), ti);
                    let pf = pred.index_axis(ndarray::Axis(0), ti);
                    assd_acc += assd(&pf, &tf, &truth.topology, chamber)?;
                    hd_acc += hd95(&pf, &tf, &truth.topology, chamber)?;
                }
                let mask = truth.topology.chamber_mask(chamber);
                let rmse = vtx_rmse(pred, &truth.frames, &mask)?;
                rows.push(SubjectChamberMetrics {
                    subject: truth.subject_id.clone(),
                    phenotype: truth.phenotype,
                    chamber,
                    assd_mm: assd_acc / t_frames as f64,
                    hd95_mm: hd_acc / t_frames as f64,
                    vtx_rmse_mm: rmse,
                });
            }
            Ok(rows)
        })
        .collect();
    let mut per_subject = Vec::new();
    for rows in per_subject_nested {
        per_subject.extend(rows?);
    }

    let mut summary = Vec::new();
    for chamber in Chamber::ALL {
        let rows: Vec<&SubjectChamberMetrics> = per_subject.iter().filter(|r| r.chamber == chamber).collect();
        summary.push(ChamberSummary {
            chamber,
            assd: summarize(&rows.iter().map(|r| r.assd_mm).collect::<Vec<_>>()),
            hd95: summarize(&rows.iter().map(|r| r.hd95_mm).collect::<Vec<_>>()),
            vtx_rmse: summarize(&rows.iter().map(|r| r.vtx_rmse_mm).collect::<Vec<_>>()),
        });
    }

    let mut volume_curves = Vec::new();
    for (truth, pred) in pairs {
        for chamber in Chamber::ALL {
            let tc = volume_curve(truth, chamber)?;
            let pc = volume_curve_frames(pred, &truth.topology, chamber)?;
            volume_curves.push(VolumeCurveRecord {
                subject: truth.subject_id.clone(),
                phenotype: truth.phenotype,
                chamber,
                truth_normalized: normalized_volume_curve(&tc)?,
                predicted_normalized: normalized_volume_curve(&pc)?,
                truth_mm3: tc,
                predicted_mm3: pc,
            });
        }
    }

    let usage = match gates {
        Some((records, experts)) => {
            let mut phenos: Vec<Phenotype> = records.iter().map(|(p, _)| *p).collect();
            phenos.sort();
            phenos.dedup();
            let matrix = expert_usage_matrix(records, &phenos, experts)?;
            Some(UsageMatrix {
                phenotypes: phenos.clone(),
                experts,
                matrix: (0..phenos.len())
                    .map(|i| (0..experts).map(|j| matrix[[i, j]]).collect())
                    .collect(),
            })
        }
        None => None,
    };

    Ok(EvaluationReport {
        per_subject,
        summary,
        volume_curves,
        usage,
    })
}

/// One CSV row per subject per chamber.
pub fn report_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("subject,phenotype,chamber,assd_mm,hd95_mm,vtx_rmse_mm\n");
    for r in &report.per_subject {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.subject, r.phenotype, r.chamber, r.assd_mm, r.hd95_mm, r.vtx_rmse_mm
        ));
    }
    out
}

/// Per-subject volume-curve CSV (frame, truth and prediction per chamber).
pub fn volume_curves_csv(records: &[&VolumeCurveRecord]) -> String {
    let mut out = String::from("frame,chamber,truth_mm3,predicted_mm3,truth_normalized,predicted_normalized\n");
    for rec in records {
        for t in 0..rec.truth_mm3.len() {
            out.push_str(&format!(
                "{t},{},{:.6},{:.6},{:.8},{:.8}\n",
                rec.chamber, rec.truth_mm3[t], rec.predicted_mm3[t], rec.truth_normalized[t], rec.predicted_normalized[t]
            ));
        }
    }
    out
}
