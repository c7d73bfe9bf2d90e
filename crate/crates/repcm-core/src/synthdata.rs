//! Deterministic synthetic bi-ventricular cohort generator.
//!
//! Each subject is a two-lobed closed surface (an LV and an RV ellipsoid
//! lobe over one fixed shared topology) animated by a radial contraction
//! field toward each lobe's center. The contraction is modulated per planted
//! motion region by the subject's phenotype program: per-region amplitude,
//! per-region timing (phase warp) and per-region activation ripple. Frame 0
//! carries zero contraction, so it is the end-diastolic, maximal-volume
//! frame by construction.
//!
//! All randomness derives from (cohort seed, subject id), so serial and
//! parallel generation agree bit-for-bit.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RepcmError, Result};
use crate::io::sha256_hex;
use crate::mesh::{icosphere, Chamber, MeshSequence, MeshTopology, Phenotype, RegionPartition};
use crate::partition::build_region_adjacency;

/// LV lobe rest radii in mm (x, y, z; z is the long axis).
const LV_RADII: [f64; 3] = [22.0, 22.0, 34.0];
/// RV lobe rest radii in mm.
const RV_RADII: [f64; 3] = [17.0, 26.0, 30.0];
/// RV lobe center offset along +x, mm.
const RV_CENTER: [f64; 3] = [44.0, 0.0, -2.0];
/// Strength of the per-region phase warp (exponent spread).
const PHASE_WARP_STRENGTH: f64 = 1.2;
/// Fraction of the activation cycle covered by the T frames. The sequence
/// is sampled just short of the next beat, so the last frame keeps a small
/// residual contraction and frame 0 is the strict volume maximum.
const CYCLE_SPAN: f64 = 0.96;

/// How one phenotype analog moves: per planted region, a contraction depth,
/// a timing offset (0.5 = nominal) and an activation-ripple frequency, plus
/// global geometry scales and the programmed end-systole frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhenotypeProgram {
    pub phenotype: Phenotype,
    /// Contraction depth per planted region, in (0, 1).
    pub region_amplitude: Vec<f64>,
    /// Timing offset per planted region as a fraction of the cycle in [0, 1);
    /// 0.5 leaves the activation peak at `es_frame`.
    pub region_phase: Vec<f64>,
    /// Cycles of a superimposed activation ripple per planted region
    /// (0 = none). Distinct frequencies make regional time courses
    /// separable for Stage I.
    pub region_ripple_cycles: Vec<f64>,
    /// Ripple depth shared by all regions of this program, in [0, 1).
    pub ripple_depth: f64,
    /// Uniform scale of both lobes (cavity size).
    pub cavity_scale: f64,
    /// Divides the LV short-axis radii: > 1 narrows the LV cavity
    /// (hypertrophy analog), < 1 widens it.
    pub wall_thickness_scale: f64,
    /// Frame index of programmed end-systole (peak contraction).
    pub es_frame: usize,
}

impl PhenotypeProgram {
    pub fn validate(&self, planted_groups: usize, frames: usize) -> Result<()> {
        let check_len = |name: &str, len: usize| -> Result<()> {
            if len != planted_groups {
                return Err(RepcmError::shape(
                    format!("{planted_groups} per-region values for {name}"),
                    format!("{len}"),
                ));
            }
            Ok(())
        };
        check_len("region_amplitude", self.region_amplitude.len())?;
        check_len("region_phase", self.region_phase.len())?;
        check_len("region_ripple_cycles", self.region_ripple_cycles.len())?;
        if self.region_amplitude.iter().any(|&a| !(0.0..1.0).contains(&a)) {
            return Err(RepcmError::InvalidArgument(format!(
                "{} region amplitudes must lie in [0, 1)",
                self.phenotype
            )));
        }
        if self.region_phase.iter().any(|&p| !(0.0..1.0).contains(&p)) {
            return Err(RepcmError::InvalidArgument(format!(
                "{} region phases must lie in [0, 1)",
                self.phenotype
            )));
        }
        if !(0.0..1.0).contains(&self.ripple_depth) {
            return Err(RepcmError::InvalidArgument("ripple_depth must lie in [0, 1)".into()));
        }
        if self.es_frame == 0 || self.es_frame >= frames - 1 {
            return Err(RepcmError::InvalidArgument(format!(
                "es_frame={} must lie strictly inside the cycle (1..{})",
                self.es_frame,
                frames - 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub subjects_per_phenotype: usize,
    /// Icosphere subdivision level per lobe (2 -> N = 324, 3 -> N = 1284).
    pub resolution: usize,
    /// Number of planted motion regions G (even; split across the lobes).
    pub planted_groups: usize,
    pub seed: u64,
    /// Frames per cycle after resampling.
    pub frames: usize,
    pub scale_jitter: f64,
    pub axis_jitter: f64,
    pub amplitude_jitter: f64,
    /// Blend between each vertex's own radial direction (0) and its planted
    /// region's mean radial direction (1). Regionally coherent contraction
    /// is what makes the planted partition recoverable from trajectories.
    pub direction_coherence: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            subjects_per_phenotype: 40,
            resolution: 3,
            planted_groups: 8,
            seed: 0,
            frames: 25,
            scale_jitter: 0.03,
            axis_jitter: 0.02,
            amplitude_jitter: 0.06,
            direction_coherence: 0.9,
        }
    }
}

#[derive(Debug)]
pub struct SyntheticCohort {
    pub topology: Arc<MeshTopology>,
    pub sequences: Vec<MeshSequence>,
    /// Ground-truth planted partition (assignment + mesh-edge adjacency).
    pub planted: RegionPartition,
    pub programs: Vec<PhenotypeProgram>,
}

/// Default phenotype programs for G planted regions.
///
/// The four analogs differ in contraction depth, cavity size, LV short-axis
/// narrowing and timing: NOR is the synchronous reference, DCM is dilated
/// and hypokinetic, HCM has a narrowed LV cavity with vigorous contraction,
/// and the RV analog is hypokinetic in the RV-lobe regions only.
pub fn default_programs(planted_groups: usize) -> Vec<PhenotypeProgram> {
    let g = planted_groups;
    // Alternating strong/weak contraction so spatially adjacent planted
    // regions carry clearly different depths. The spread is kept moderate
    // (too wide and k-means prefers splitting high-variance regions over
    // separating quiet ones), and the RV lobe contracts systematically less
    // than the LV so same-orientation patches of the two lobes stay
    // distinguishable in displacement space.
    let base_amp: Vec<f64> = (0..g)
        .map(|i| {
            let ramp = 0.015 * ((i % (g / 2).max(1)) / 2) as f64;
            let lobe = if i < g / 2 { 1.0 } else { 0.72 };
            let depth = if i % 2 == 0 { 0.32 - ramp } else { 0.18 + ramp };
            depth * lobe
        })
        .collect();
    let alternating_phase: Vec<f64> = (0..g).map(|i| if i % 2 == 0 { 0.30 } else { 0.70 }).collect();
    let graded_phase: Vec<f64> = (0..g).map(|i| 0.35 + 0.3 * (i as f64) / (g.max(2) - 1) as f64).collect();
    let ripple: Vec<f64> = (0..g).map(|i| 1.0 + (i % 3) as f64).collect();

    let scale_amp = |s: f64| -> Vec<f64> { base_amp.iter().map(|a| (a * s).min(0.55)).collect() };
    let rv_only_weak: Vec<f64> = base_amp
        .iter()
        .enumerate()
        .map(|(i, &a)| if i >= g / 2 { a * 0.38 } else { a })
        .collect();

    vec![
        PhenotypeProgram {
            phenotype: Phenotype::Nor,
            region_amplitude: base_amp.clone(),
            region_phase: vec![0.5; g],
            // mild region-distinct ripple keeps regional time courses
            // separable without moving the aggregate volume minimum
            region_ripple_cycles: ripple.clone(),
            ripple_depth: 0.10,
            cavity_scale: 1.0,
            wall_thickness_scale: 1.0,
            es_frame: 9,
        },
        PhenotypeProgram {
            phenotype: Phenotype::Dcm,
            region_amplitude: scale_amp(0.42),
            region_phase: graded_phase,
            region_ripple_cycles: ripple.clone(),
            ripple_depth: 0.22,
            cavity_scale: 1.32,
            wall_thickness_scale: 0.85,
            es_frame: 10,
        },
        PhenotypeProgram {
            phenotype: Phenotype::Hcm,
            region_amplitude: scale_amp(1.12),
            region_phase: alternating_phase.clone(),
            region_ripple_cycles: ripple.iter().map(|&c| c + 1.0).collect(),
            ripple_depth: 0.16,
            cavity_scale: 0.80,
            wall_thickness_scale: 1.42,
            es_frame: 8,
        },
        PhenotypeProgram {
            phenotype: Phenotype::Rv,
            region_amplitude: rv_only_weak,
            region_phase: (0..g).map(|i| if i >= g / 2 { 0.68 } else { 0.5 }).collect(),
            region_ripple_cycles: (0..g).map(|i| if i >= g / 2 { 2.0 + (i % 2) as f64 } else { 0.0 }).collect(),
            ripple_depth: 0.15,
            cavity_scale: 1.10,
            wall_thickness_scale: 1.0,
            es_frame: 9,
        },
    ]
}

/// Activation waveform in [0, 1]: zero at both cycle ends, peaking near the
/// programmed end-systole frame. `phase` warps timing (0.5 = none) and
/// `ripple_cycles`/`ripple_depth` superimpose a positive ripple.
fn activation(t: usize, frames: usize, es_frame: usize, phase: f64, ripple_cycles: f64, ripple_depth: f64) -> f64 {
    let frac = t as f64 / (frames - 1) as f64;
    let u = frac * CYCLE_SPAN;
    let gamma = 2f64.powf(PHASE_WARP_STRENGTH * (phase - 0.5));
    let uw = u.powf(gamma);
    let ues = es_frame as f64 / (frames - 1) as f64 * CYCLE_SPAN;
    let base = if uw <= ues {
        (std::f64::consts::FRAC_PI_2 * uw / ues).sin().powi(2)
    } else {
        (std::f64::consts::FRAC_PI_2 * (1.0 - uw) / (1.0 - ues)).sin().powi(2)
    };
    base * (1.0 + ripple_depth * (2.0 * std::f64::consts::PI * ripple_cycles * frac).sin())
}

/// Template geometry shared by the cohort: unit-sphere lobe coordinates,
/// the merged topology, the lobe (chamber) of each vertex, and the planted
/// region of each vertex.
struct Template {
    unit: Array2<f64>, // N x 3 unit-sphere coordinates within each lobe
    topology: Arc<MeshTopology>,
    planted: Vec<usize>,
}

fn build_template(resolution: usize, planted_groups: usize) -> Result<Template> {
    if planted_groups < 2 || planted_groups % 2 != 0 {
        return Err(RepcmError::InvalidArgument(format!(
            "planted_groups must be even and >= 2, got {planted_groups}"
        )));
    }
    let (sphere, sphere_faces) = icosphere(resolution);
    let per_lobe = sphere.nrows();
    let n = per_lobe * 2;
    let mut unit = Array2::zeros((n, 3));
    for v in 0..per_lobe {
        for c in 0..3 {
            unit[[v, c]] = sphere[[v, c]];
            unit[[per_lobe + v, c]] = sphere[[v, c]];
        }
    }
    let mut faces = Vec::with_capacity(sphere_faces.len() * 2);
    faces.extend_from_slice(&sphere_faces);
    for f in &sphere_faces {
        faces.push([f[0] + per_lobe as u32, f[1] + per_lobe as u32, f[2] + per_lobe as u32]);
    }
    let mut labels = vec![Chamber::Lv; per_lobe];
    labels.extend(vec![Chamber::Rv; per_lobe]);
    let topology = Arc::new(MeshTopology::new(n, faces, labels)?);

    // Planted regions per lobe: polar bands (by z threshold) x azimuth halves.
    let per_lobe_groups = planted_groups / 2;
    let sectors = if per_lobe_groups % 2 == 0 { 2 } else { 1 };
    let bands = per_lobe_groups / sectors;
    let mut zs: Vec<f64> = (0..per_lobe).map(|v| sphere[[v, 2]]).collect();
    zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let thresholds: Vec<f64> = (1..bands).map(|b| zs[b * per_lobe / bands]).collect();

    let mut planted = vec![0usize; n];
    for lobe in 0..2 {
        for v in 0..per_lobe {
            let z = sphere[[v, 2]];
            let band = thresholds.iter().filter(|&&t| z >= t).count();
            let sector = if sectors == 2 && sphere[[v, 1]] < 0.0 { 1 } else { 0 };
            planted[lobe * per_lobe + v] = lobe * per_lobe_groups + band * sectors + sector;
        }
    }
    let mut counts = vec![0usize; planted_groups];
    for &g in &planted {
        counts[g] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(RepcmError::InvalidArgument(format!(
            "resolution {resolution} is too low to host {planted_groups} planted regions"
        )));
    }
    Ok(Template {
        unit,
        topology,
        planted,
    })
}

/// Stable per-subject seed derived from the cohort seed and the subject id.
fn subject_seed(seed: u64, subject_id: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + subject_id.len());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(subject_id.as_bytes());
    let hex = sha256_hex(&bytes);
    u64::from_str_radix(&hex[..16], 16).expect("hex digest")
}

fn generate_subject(
    template: &Template,
    program: &PhenotypeProgram,
    cfg: &GeneratorConfig,
    subject_id: &str,
) -> MeshSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed(cfg.seed, subject_id));
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
    let gscale = (1.0 + cfg.scale_jitter * gauss()).max(0.7);
    let axis = [
        (1.0 + cfg.axis_jitter * gauss()).max(0.7),
        (1.0 + cfg.axis_jitter * gauss()).max(0.7),
        (1.0 + cfg.axis_jitter * gauss()).max(0.7),
    ];
    let amp_jitter = (1.0 + cfg.amplitude_jitter * gauss()).clamp(0.5, 1.5);

    let n = template.topology.vertex_count();
    let per_lobe = n / 2;
    let t_frames = cfg.frames;

    // ED geometry: lobe center + per-axis radii applied to the unit sphere.
    let lv_radii = [
        LV_RADII[0] * program.cavity_scale / program.wall_thickness_scale,
        LV_RADII[1] * program.cavity_scale / program.wall_thickness_scale,
        LV_RADII[2] * program.cavity_scale,
    ];
    let rv_radii = [
        RV_RADII[0] * program.cavity_scale,
        RV_RADII[1] * program.cavity_scale,
        RV_RADII[2] * program.cavity_scale,
    ];
    let mut ed = Array2::zeros((n, 3));
    for v in 0..n {
        let (radii, center) = if v < per_lobe {
            (&lv_radii, [0.0, 0.0, 0.0])
        } else {
            (&rv_radii, RV_CENTER)
        };
        for c in 0..3 {
            ed[[v, c]] = center[c] + template.unit[[v, c]] * radii[c] * axis[c] * gscale;
        }
    }

    // Per-region mean radial vector of this subject's ED geometry: the
    // contraction direction of each vertex blends its own radial vector
    // with this regional mean.
    let groups = program.region_amplitude.len();
    let mut region_mean = Array2::<f64>::zeros((groups, 3));
    let mut region_size = vec![0.0f64; groups];
    for v in 0..n {
        let g = template.planted[v];
        let center = if v < per_lobe { [0.0, 0.0, 0.0] } else { RV_CENTER };
        for c in 0..3 {
            region_mean[[g, c]] += ed[[v, c]] - center[c];
        }
        region_size[g] += 1.0;
    }
    for g in 0..groups {
        for c in 0..3 {
            region_mean[[g, c]] /= region_size[g].max(1.0);
        }
    }
    let lambda = cfg.direction_coherence;

    let mut frames = Array3::zeros((t_frames, n, 3));
    for ti in 0..t_frames {
        for v in 0..n {
            let g = template.planted[v];
            let act = activation(
                ti,
                t_frames,
                program.es_frame,
                program.region_phase[g],
                program.region_ripple_cycles[g],
                program.ripple_depth,
            );
            let contraction = program.region_amplitude[g] * amp_jitter * act;
            let center = if v < per_lobe { [0.0, 0.0, 0.0] } else { RV_CENTER };
            for c in 0..3 {
                let radial = ed[[v, c]] - center[c];
                let pull = (1.0 - lambda) * radial + lambda * region_mean[[g, c]];
                frames[[ti, v, c]] = center[c] + radial - contraction * pull;
            }
        }
    }

    MeshSequence::new(frames, Arc::clone(&template.topology), program.phenotype, subject_id.into())
        .expect("generated sequence is well-formed")
}

/// Generate a synthetic cohort: `subjects_per_phenotype` subjects per
/// program, the shared topology, and the planted ground-truth partition.
pub fn generate_cohort(cfg: &GeneratorConfig, programs: &[PhenotypeProgram]) -> Result<SyntheticCohort> {
    if cfg.subjects_per_phenotype == 0 {
        return Err(RepcmError::InvalidArgument("subjects_per_phenotype must be >= 1".into()));
    }
    if programs.is_empty() {
        return Err(RepcmError::EmptyInput("phenotype programs".into()));
    }
    if cfg.frames < 3 {
        return Err(RepcmError::InvalidArgument(format!("frames={} too short", cfg.frames)));
    }
    for p in programs {
        p.validate(cfg.planted_groups, cfg.frames)?;
    }
    let template = build_template(cfg.resolution, cfg.planted_groups)?;

    let jobs: Vec<(usize, String)> = programs
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| {
            (0..cfg.subjects_per_phenotype).map(move |s| (pi, format!("{}_{s:03}", p.phenotype)))
        })
        .collect();
    let sequences: Vec<MeshSequence> = jobs
        .par_iter()
        .map(|(pi, id)| generate_subject(&template, &programs[*pi], cfg, id))
        .collect();

    let adjacency = build_region_adjacency(&template.planted, &template.topology)?;
    let planted = RegionPartition::new(template.planted.clone(), cfg.planted_groups, adjacency)?;
    Ok(SyntheticCohort {
        topology: template.topology,
        sequences,
        planted,
        programs: programs.to_vec(),
    })
}
