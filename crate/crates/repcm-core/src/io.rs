//! Cohort container format, partition file, and binary tensor archives.
//!
//! A cohort directory holds:
//! - `manifest.json` — topology file name, subject list with phenotypes, T, N,
//!   and R when a partition has been attached;
//! - `topology.bin` — little-endian: u32 N, u32 F, F x 3 u32 face indices,
//!   then N u8 chamber labels (LV = 0, RV = 1);
//! - one `<SUBJECT>.traj.bin` per subject — u32 T, u32 N, then T x N x 3
//!   float32 little-endian coordinates in mm, frame-major.
//!
//! Coordinates are stored as f32 on disk and widened to f64 in memory.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{RepcmError, Result};
use crate::mesh::{Chamber, MeshSequence, MeshTopology, Phenotype, RegionPartition};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOPOLOGY_FILE: &str = "topology.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub phenotype: Phenotype,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub topology: String,
    pub t: usize,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r: Option<usize>,
    pub subjects: Vec<SubjectEntry>,
}

fn read_exact_u32(reader: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|e| RepcmError::MalformedFile {
        path: path.display().to_string(),
        reason: format!("truncated u32: {e}"),
    })?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_topology(path: &Path, topology: &MeshTopology) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&(topology.vertex_count() as u32).to_le_bytes());
    buf.extend_from_slice(&(topology.faces().len() as u32).to_le_bytes());
    for f in topology.faces() {
        for &v in f {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &l in topology.chamber_labels() {
        buf.push(l.to_u8());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_topology(path: &Path) -> Result<MeshTopology> {
    let mut file = fs::File::open(path)?;
    let n = read_exact_u32(&mut file, path)? as usize;
    let f = read_exact_u32(&mut file, path)? as usize;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    let need = f * 3 * 4 + n;
    if rest.len() != need {
        return Err(RepcmError::MalformedFile {
            path: path.display().to_string(),
            reason: format!("expected {need} bytes after header, got {}", rest.len()),
        });
    }
    let mut faces = Vec::with_capacity(f);
    for fi in 0..f {
        let at = fi * 12;
        let mut tri = [0u32; 3];
        for (c, t) in tri.iter_mut().enumerate() {
            let o = at + c * 4;
            *t = u32::from_le_bytes([rest[o], rest[o + 1], rest[o + 2], rest[o + 3]]);
        }
        faces.push(tri);
    }
    let labels = rest[f * 12..]
        .iter()
        .map(|&b| Chamber::from_u8(b))
        .collect::<Result<Vec<_>>>()?;
    MeshTopology::new(n, faces, labels)
}

/// Write one subject's frames (T x N x 3, mm) as float32 little-endian.
pub fn write_frames(path: &Path, frames: &Array3<f64>) -> Result<()> {
    let (t, n, _) = frames.dim();
    let mut buf: Vec<u8> = Vec::with_capacity(8 + t * n * 12);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for ti in 0..t {
        for vi in 0..n {
            for c in 0..3 {
                buf.extend_from_slice(&(frames[[ti, vi, c]] as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<Array3<f64>> {
    let mut file = fs::File::open(path)?;
    let t = read_exact_u32(&mut file, path)? as usize;
    let n = read_exact_u32(&mut file, path)? as usize;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    let need = t * n * 12;
    if rest.len() != need {
        return Err(RepcmError::MalformedFile {
            path: path.display().to_string(),
            reason: format!("expected {need} coordinate bytes, got {}", rest.len()),
        });
    }
    let mut frames = Array3::zeros((t, n, 3));
    let mut o = 0;
    for ti in 0..t {
        for vi in 0..n {
            for c in 0..3 {
                frames[[ti, vi, c]] =
                    f32::from_le_bytes([rest[o], rest[o + 1], rest[o + 2], rest[o + 3]]) as f64;
                o += 4;
            }
        }
    }
    Ok(frames)
}

/// Write a full cohort (topology + per-subject frames + manifest) to `dir`.
pub fn write_cohort(dir: &Path, topology: &MeshTopology, sequences: &[MeshSequence]) -> Result<()> {
    if sequences.is_empty() {
        return Err(RepcmError::EmptyInput("cohort to write".into()));
    }
    fs::create_dir_all(dir)?;
    write_topology(&dir.join(TOPOLOGY_FILE), topology)?;
    let t = sequences[0].num_frames();
    let mut subjects = Vec::with_capacity(sequences.len());
    for seq in sequences {
        if seq.num_frames() != t {
            return Err(RepcmError::shape(
                format!("{t} frames for every subject"),
                format!("{} in {}", seq.num_frames(), seq.subject_id),
            ));
        }
        let file = format!("{}.traj.bin", seq.subject_id);
        write_frames(&dir.join(&file), &seq.frames)?;
        subjects.push(SubjectEntry {
            id: seq.subject_id.clone(),
            phenotype: seq.phenotype,
            file,
        });
    }
    let manifest = CohortManifest {
        topology: TOPOLOGY_FILE.into(),
        t,
        n: topology.vertex_count(),
        r: None,
        subjects,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CohortManifest> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Load a cohort directory into memory.
pub fn load_cohort(dir: &Path) -> Result<(Arc<MeshTopology>, Vec<MeshSequence>)> {
    let manifest = read_manifest(dir)?;
    let topology = Arc::new(read_topology(&dir.join(&manifest.topology))?);
    if topology.vertex_count() != manifest.n {
        return Err(RepcmError::MalformedFile {
            path: dir.join(MANIFEST_FILE).display().to_string(),
            reason: format!(
                "manifest N={} disagrees with topology N={}",
                manifest.n,
                topology.vertex_count()
            ),
        });
    }
    let mut sequences = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let frames = read_frames(&dir.join(&entry.file))?;
        if frames.dim().0 != manifest.t {
            return Err(RepcmError::MalformedFile {
                path: dir.join(&entry.file).display().to_string(),
                reason: format!("expected T={}, got {}", manifest.t, frames.dim().0),
            });
        }
        sequences.push(MeshSequence::new(
            frames,
            Arc::clone(&topology),
            entry.phenotype,
            entry.id.clone(),
        )?);
    }
    Ok((topology, sequences))
}

/// On-disk partition schema (exact key set of `partition.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionFile {
    #[serde(rename = "R")]
    pub r: usize,
    pub assignment: Vec<usize>,
    pub adjacency: Vec<Vec<u8>>,
    pub seed: u64,
    pub backend: String,
}

impl PartitionFile {
    pub fn from_partition(partition: &RegionPartition, seed: u64, backend: &str) -> Self {
        let r = partition.region_count;
        let adjacency = (0..r)
            .map(|i| (0..r).map(|j| partition.adjacency[[i, j]]).collect())
            .collect();
        PartitionFile {
            r,
            assignment: partition.assignment.clone(),
            adjacency,
            seed,
            backend: backend.to_string(),
        }
    }

    pub fn to_partition(&self) -> Result<RegionPartition> {
        let mut adj = Array2::zeros((self.r, self.r));
        if self.adjacency.len() != self.r {
            return Err(RepcmError::shape(
                format!("{0} x {0} adjacency", self.r),
                format!("{} rows", self.adjacency.len()),
            ));
        }
        for (i, row) in self.adjacency.iter().enumerate() {
            if row.len() != self.r {
                return Err(RepcmError::shape(
                    format!("{} columns in adjacency row {i}", self.r),
                    format!("{}", row.len()),
                ));
            }
            for (j, &v) in row.iter().enumerate() {
                adj[[i, j]] = v;
            }
        }
        RegionPartition::new(self.assignment.clone(), self.r, adj)
    }
}

pub fn save_partition(path: &Path, file: &PartitionFile) -> Result<()> {
    write_json(path, file)
}

pub fn load_partition(path: &Path) -> Result<(RegionPartition, PartitionFile)> {
    let bytes = fs::read(path)?;
    let file: PartitionFile = serde_json::from_slice(&bytes)?;
    Ok((file.to_partition()?, file))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

const TENSOR_MAGIC: &[u8; 8] = b"RPCMTENS";

/// Write a named-tensor archive (all entries f64, row-major, little-endian).
pub fn write_tensor_archive(path: &Path, entries: &[(String, &Array2<f64>)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, arr) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(arr.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(arr.ncols() as u64).to_le_bytes());
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor_archive(path: &Path) -> Result<Vec<(String, Array2<f64>)>> {
    let bytes = fs::read(path)?;
    let malformed = |reason: String| RepcmError::MalformedFile {
        path: path.display().to_string(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != TENSOR_MAGIC {
        return Err(malformed("missing tensor archive magic".into()));
    }
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let mut o = 16;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let take = |o: &mut usize, len: usize| -> Result<&[u8]> {
            if *o + len > bytes.len() {
                return Err(malformed("truncated archive".into()));
            }
            let s = &bytes[*o..*o + len];
            *o += len;
            Ok(s)
        };
        let name_len = u32::from_le_bytes(take(&mut o, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut o, name_len)?.to_vec())
            .map_err(|e| malformed(format!("bad tensor name: {e}")))?;
        let rows = u64::from_le_bytes(take(&mut o, 8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&mut o, 8)?.try_into().unwrap()) as usize;
        let data = take(&mut o, rows * cols * 8)?;
        let mut arr = Array2::zeros((rows, cols));
        for (i, v) in arr.iter_mut().enumerate() {
            let at = i * 8;
            *v = f64::from_le_bytes(data[at..at + 8].try_into().unwrap());
        }
        entries.push((name, arr));
    }
    Ok(entries)
}

/// Resolve per-subject prediction/gate files inside a predictions directory.
pub fn prediction_path(dir: &Path, subject_id: &str) -> PathBuf {
    dir.join(format!("{subject_id}.traj.bin"))
}

/// Gate weights per subject, written by `complete` and read by `evaluate`.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct GateRecord {
    pub subjects: Vec<SubjectGates>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectGates {
    pub id: String,
    pub phenotype: Phenotype,
    pub gates: Vec<f64>,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
