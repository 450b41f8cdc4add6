//! On-disk formats: volume sidecar + raw blob, study manifest, dataset index
//! and per-study detection lists.
//!
//! Every `parse_*` function accepts untrusted bytes and must fail with an
//! error rather than panic; the fuzz targets drive exactly these entry points.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::phase::Phase;
use crate::volume::{LesionAnnotation, Mask, Study, Volume};

/// File name of the manifest inside a study directory.
pub const MANIFEST_FILE: &str = "study.json";

/// Upper bound on voxels per volume accepted from disk (guards allocations).
pub const MAX_VOXELS: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "int16le")]
    Int16Le,
    #[serde(rename = "f32le")]
    F32Le,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::Int16Le => 2,
            Dtype::F32Le => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSidecar {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Absent for non-phase grids such as the liver mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    pub dtype: Dtype,
    pub data_file: String,
}

impl VolumeSidecar {
    pub fn voxel_count(&self) -> Result<usize> {
        let n = self.dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        match n {
            Some(n) if n > 0 && n <= MAX_VOXELS => Ok(n),
            _ => Err(Error::MalformedVolume(format!("unsupported dims {:?}", self.dims))),
        }
    }
}

pub fn parse_sidecar(bytes: &[u8]) -> Result<VolumeSidecar> {
    let s: VolumeSidecar =
        serde_json::from_slice(bytes).map_err(|e| Error::MalformedVolume(e.to_string()))?;
    s.voxel_count()?;
    if !s.spacing_mm.iter().all(|v| v.is_finite() && *v > 0.0) {
        return Err(Error::InvalidSpacing(s.spacing_mm));
    }
    Ok(s)
}

/// Decodes a little-endian x-fastest blob into HU values.
pub fn decode_blob(bytes: &[u8], dtype: Dtype, voxels: usize) -> Result<Vec<f64>> {
    let expected = voxels
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::MalformedVolume("blob size overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::DimsMismatch(format!(
            "blob has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let out: Vec<f64> = match dtype {
        Dtype::Int16Le => bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        Dtype::F32Le => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::MalformedVolume("non-finite value in blob".into()));
    }
    Ok(out)
}

/// Encodes values; fails if a value is not exactly representable.
pub fn encode_blob(values: &[f64], dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(values.len() * dtype.width());
    for &v in values {
        match dtype {
            Dtype::Int16Le => {
                let q = v as i16;
                if q as f64 != v {
                    return Err(Error::MalformedVolume(format!("{v} is not representable as int16")));
                }
                out.extend_from_slice(&q.to_le_bytes());
            }
            Dtype::F32Le => {
                let q = v as f32;
                if q as f64 != v {
                    return Err(Error::MalformedVolume(format!("{v} is not representable as f32")));
                }
                out.extend_from_slice(&q.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("in-memory JSON serialization");
    v.push(b'\n');
    v
}

fn read_grid(sidecar_path: &Path) -> Result<(VolumeSidecar, Vec<f64>)> {
    let sidecar = parse_sidecar(&read(sidecar_path)?)?;
    let dir = sidecar_path.parent().unwrap_or(Path::new("."));
    let blob = read(&dir.join(&sidecar.data_file))?;
    let data = decode_blob(&blob, sidecar.dtype, sidecar.voxel_count()?)?;
    Ok((sidecar, data))
}

pub fn read_volume(sidecar_path: &Path) -> Result<Volume> {
    let (sc, data) = read_grid(sidecar_path)?;
    let phase = sc
        .phase
        .ok_or_else(|| Error::MalformedVolume(format!("{}: missing phase", sidecar_path.display())))?;
    Volume::new(sc.dims, sc.spacing_mm, phase, data)
}

pub fn read_mask(sidecar_path: &Path) -> Result<(Mask, [f64; 3])> {
    let (sc, data) = read_grid(sidecar_path)?;
    Ok((Mask::new(sc.dims, data.iter().map(|v| *v != 0.0).collect())?, sc.spacing_mm))
}

/// Writes `<dir>/<stem>.json` + `<dir>/<stem>.raw`.
pub fn write_volume(dir: &Path, stem: &str, v: &Volume, dtype: Dtype) -> Result<PathBuf> {
    let data_file = format!("{stem}.raw");
    write(&dir.join(&data_file), &encode_blob(v.data(), dtype)?)?;
    let sidecar = VolumeSidecar {
        dims: v.dims(),
        spacing_mm: v.spacing(),
        phase: Some(v.phase()),
        dtype,
        data_file,
    };
    let path = dir.join(format!("{stem}.json"));
    write(&path, &to_json_bytes(&sidecar))?;
    Ok(path)
}

pub fn write_mask(dir: &Path, stem: &str, m: &Mask, spacing: [f64; 3]) -> Result<PathBuf> {
    let data_file = format!("{stem}.raw");
    let values: Vec<f64> = m.data().iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
    write(&dir.join(&data_file), &encode_blob(&values, Dtype::Int16Le)?)?;
    let sidecar = VolumeSidecar {
        dims: m.dims(),
        spacing_mm: spacing,
        phase: None,
        dtype: Dtype::Int16Le,
        data_file,
    };
    let path = dir.join(format!("{stem}.json"));
    write(&path, &to_json_bytes(&sidecar))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyManifest {
    pub id: String,
    /// Phase → sidecar path relative to the manifest directory.
    pub phases: BTreeMap<Phase, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub liver_mask: Option<String>,
    #[serde(default)]
    pub lesions: Vec<LesionAnnotation>,
}

pub fn parse_manifest(bytes: &[u8]) -> Result<StudyManifest> {
    let m: StudyManifest =
        serde_json::from_slice(bytes).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    if m.phases.is_empty() {
        return Err(Error::MalformedManifest(format!("study {} declares no phases", m.id)));
    }
    if m.id.is_empty() {
        return Err(Error::MalformedManifest("empty study id".into()));
    }
    Ok(m)
}

/// Reads `<dir>/study.json` without loading any volume.
pub fn read_manifest(dir: &Path) -> Result<StudyManifest> {
    parse_manifest(&read(&dir.join(MANIFEST_FILE))?)
}

/// Loads `<dir>/study.json` and every file it references.
pub fn load_study(dir: &Path) -> Result<Study> {
    let manifest = read_manifest(dir)?;
    let mut volumes = BTreeMap::new();
    for (phase, rel) in &manifest.phases {
        let v = read_volume(&dir.join(rel))?;
        if v.phase() != *phase {
            return Err(Error::MalformedManifest(format!(
                "{rel} is tagged {} but listed as {phase}",
                v.phase()
            )));
        }
        volumes.insert(*phase, v);
    }
    let liver_mask = match &manifest.liver_mask {
        Some(rel) => Some(read_mask(&dir.join(rel))?.0),
        None => None,
    };
    Study::new(manifest.id, volumes, liver_mask, manifest.lesions)
}

/// Writes a study directory loadable by [`load_study`].
pub fn save_study(s: &Study, dir: &Path, dtype: Dtype) -> Result<()> {
    let mut phases = BTreeMap::new();
    for (p, v) in s.volumes() {
        let stem = p.as_str();
        write_volume(dir, stem, v, dtype)?;
        phases.insert(*p, format!("{stem}.json"));
    }
    let liver_mask = match s.liver_mask() {
        Some(m) => {
            write_mask(dir, "liver_mask", m, s.spacing())?;
            Some("liver_mask.json".to_string())
        }
        None => None,
    };
    let manifest = StudyManifest {
        id: s.id().to_string(),
        phases,
        liver_mask,
        lesions: s.lesions().to_vec(),
    };
    write(&dir.join(MANIFEST_FILE), &to_json_bytes(&manifest))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub split: String,
    /// Study directory relative to the index file.
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub studies: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";

impl DatasetIndex {
    pub fn split(&self, name: &str) -> impl Iterator<Item = &IndexEntry> + '_ {
        let name = name.to_string();
        self.studies.iter().filter(move |e| e.split == name)
    }
}

pub fn parse_index(bytes: &[u8]) -> Result<DatasetIndex> {
    let idx: DatasetIndex =
        serde_json::from_slice(bytes).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    for e in &idx.studies {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::MalformedManifest(format!("duplicate study id {}", e.id)));
        }
    }
    Ok(idx)
}

pub fn read_index(path: &Path) -> Result<DatasetIndex> {
    parse_index(&read(path)?)
}

pub fn write_index(path: &Path, idx: &DatasetIndex) -> Result<()> {
    write(path, &to_json_bytes(idx))
}

/// Loads every study of `split` listed in the index at `index_path`, in index order.
pub fn load_split(index_path: &Path, split: &str) -> Result<Vec<Study>> {
    let idx = read_index(index_path)?;
    let root = index_path.parent().unwrap_or(Path::new("."));
    idx.split(split).map(|e| load_study(&root.join(&e.dir))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDetections {
    pub study_id: String,
    pub detections: Vec<Detection>,
}

pub fn parse_detections(bytes: &[u8]) -> Result<Vec<StudyDetections>> {
    let list: Vec<StudyDetections> =
        serde_json::from_slice(bytes).map_err(|e| Error::MalformedDetections(e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    for s in &list {
        if !seen.insert(s.study_id.as_str()) {
            return Err(Error::MalformedDetections(format!("duplicate study {}", s.study_id)));
        }
        for d in &s.detections {
            Detection::new(d.bbox, d.score, d.kind)?;
        }
    }
    Ok(list)
}

pub fn read_detections(path: &Path) -> Result<Vec<StudyDetections>> {
    parse_detections(&read(path)?)
}

pub fn write_detections(path: &Path, list: &[StudyDetections]) -> Result<()> {
    write(path, &to_json_bytes(&list))
}

/// Serializes any value the way every JSON report in this crate is written.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &to_json_bytes(value))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Box3, DetectionKind, LesionKind};

    fn study(phases: &[Phase], dims: [usize; 3]) -> Study {
        let vols = phases
            .iter()
            .map(|p| {
                let v = Volume::from_fn(dims, [1.0, 1.0, 5.0], *p, |x, y, z| {
                    (x as f64) - 3.0 * y as f64 + 40.0 * z as f64 - 1000.0
                })
                .unwrap();
                (*p, v)
            })
            .collect();
        let mask = Mask::new(dims, (0..dims.iter().product()).map(|i| i % 3 == 0).collect()).unwrap();
        let lesions = vec![LesionAnnotation {
            bbox: Box3::new([1.0, 1.0, 0.0], [3.0, 4.0, 2.0]).unwrap(),
            kind: LesionKind::Hcc,
        }];
        Study::new("study_a", vols, Some(mask), lesions).unwrap()
    }

    #[test]
    fn two_phase_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let s = study(&[Phase::NC, Phase::VP], [5, 4, 3]);
        save_study(&s, dir.path(), Dtype::Int16Le).unwrap();
        let back = load_study(dir.path()).unwrap();
        assert_eq!(back.phases().len(), 2);
        assert_eq!(back, s);
    }

    #[test]
    fn f32_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let s = study(&Phase::ALL, [6, 5, 4]);
        save_study(&s, dir.path(), Dtype::F32Le).unwrap();
        let back = load_study(dir.path()).unwrap();
        for (a, b) in s.volumes().values().zip(back.volumes().values()) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn mismatched_dims_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = study(&Phase::ALL, [5, 4, 3]);
        save_study(&s, dir.path(), Dtype::Int16Le).unwrap();
        let other = Volume::filled([5, 4, 4], [1.0, 1.0, 5.0], Phase::AP, 0.0).unwrap();
        write_volume(dir.path(), "AP", &other, Dtype::Int16Le).unwrap();
        let err = load_study(dir.path()).unwrap_err();
        assert_eq!(err.code(), "dims_mismatch");
    }

    #[test]
    fn error_codes_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(load_study(dir.path()).unwrap_err().code(), "missing_file");
        fs::write(dir.path().join(MANIFEST_FILE), b"{\"id\": 3}").unwrap();
        assert_eq!(load_study(dir.path()).unwrap_err().code(), "malformed_manifest");
        let s = study(&[Phase::VP], [5, 4, 3]);
        save_study(&s, dir.path(), Dtype::Int16Le).unwrap();
        fs::remove_file(dir.path().join("VP.raw")).unwrap();
        assert_eq!(load_study(dir.path()).unwrap_err().code(), "missing_file");
    }

    #[test]
    fn blob_length_checked() {
        assert!(decode_blob(&[0u8; 7], Dtype::Int16Le, 4).is_err());
        assert_eq!(decode_blob(&[1, 0, 255, 255], Dtype::Int16Le, 2).unwrap(), vec![1.0, -1.0]);
        assert!(decode_blob(&f32::NAN.to_le_bytes(), Dtype::F32Le, 1).is_err());
        assert!(encode_blob(&[0.5], Dtype::Int16Le).is_err());
    }

    #[test]
    fn sidecar_rejects_huge_dims() {
        let j = br#"{"dims":[100000,100000,100000],"spacing_mm":[1,1,1],"phase":"NC","dtype":"int16le","data_file":"x"}"#;
        assert!(parse_sidecar(j).is_err());
        let j = br#"{"dims":[2,2,2],"spacing_mm":[1,0,1],"phase":"NC","dtype":"int16le","data_file":"x"}"#;
        assert!(parse_sidecar(j).is_err());
    }

    #[test]
    fn detections_format() {
        let j = br#"[{"study_id":"a","detections":[{"box":[0,0,0,2,2,2],"score":0.5,"kind":"unfiltered"}]}]"#;
        let d = parse_detections(j).unwrap();
        assert_eq!(d[0].detections[0].kind, DetectionKind::Unfiltered);
        assert!(parse_detections(br#"[{"study_id":"a","detections":[{"box":[0,0,0,0,2,2],"score":0.5,"kind":"HCC"}]}]"#).is_err());
        assert!(parse_detections(br#"[{"study_id":"a","detections":[{"box":[0,0,0,1,2,2],"score":1.5,"kind":"HCC"}]}]"#).is_err());
        assert!(parse_detections(br#"[{"study_id":"a","detections":[]},{"study_id":"a","detections":[]}]"#).is_err());
    }
}
