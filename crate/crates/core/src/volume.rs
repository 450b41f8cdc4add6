//! Volume and study data model plus the grid operations the detector needs:
//! resampling, phase-specific normalization, random crops and depth-wise
//! sliding windows with mean stitching.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3, LesionKind};
use crate::phase::{Phase, PhaseSet};

/// Row-major linear index, x fastest.
#[inline]
pub fn linear_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidSpacing(spacing))
    }
}

/// A single-phase scalar volume in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    phase: Phase,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], phase: Phase, data: Vec<f64>) -> Result<Volume> {
        if dims.contains(&0) {
            return Err(Error::DimsMismatch(format!("zero-sized dims {dims:?}")));
        }
        check_spacing(spacing)?;
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::DimsMismatch(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                dims[0],
                dims[1],
                dims[2]
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::MalformedVolume(format!("non-finite value at voxel {i}")));
        }
        Ok(Volume { dims, spacing, phase, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], phase: Phase, value: f64) -> Result<Volume> {
        Volume::new(dims, spacing, phase, vec![value; dims.iter().product()])
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        phase: Phase,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Volume> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume::new(dims, spacing, phase, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[linear_index(self.dims, x, y, z)]
    }

    pub fn with_phase(mut self, phase: Phase) -> Volume {
        self.phase = phase;
        self
    }

    /// Sub-block `[origin, origin + size)`; caller guarantees bounds.
    pub fn extract(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Volume> {
        if (0..3).any(|a| origin[a] + size[a] > self.dims[a]) {
            return Err(Error::CropTooLarge { crop: size, dims: self.dims });
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for z in origin[2]..origin[2] + size[2] {
            for y in origin[1]..origin[1] + size[1] {
                let start = linear_index(self.dims, origin[0], y, z);
                data.extend_from_slice(&self.data[start..start + size[0]]);
            }
        }
        Volume::new(size, self.spacing, self.phase, data)
    }
}

/// Binary mask on the shared study grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Mask> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::DimsMismatch(format!("mask length {} != {dims:?}", data.len())));
        }
        Ok(Mask { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[linear_index(self.dims, x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn extract(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Mask> {
        if (0..3).any(|a| origin[a] + size[a] > self.dims[a]) {
            return Err(Error::CropTooLarge { crop: size, dims: self.dims });
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for z in origin[2]..origin[2] + size[2] {
            for y in origin[1]..origin[1] + size[1] {
                let start = linear_index(self.dims, origin[0], y, z);
                data.extend_from_slice(&self.data[start..start + size[0]]);
            }
        }
        Mask::new(size, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionAnnotation {
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub kind: LesionKind,
}

/// Registered multi-phase study. All volumes share one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    id: String,
    volumes: BTreeMap<Phase, Volume>,
    liver_mask: Option<Mask>,
    lesions: Vec<LesionAnnotation>,
}

impl Study {
    pub fn new(
        id: impl Into<String>,
        volumes: BTreeMap<Phase, Volume>,
        liver_mask: Option<Mask>,
        lesions: Vec<LesionAnnotation>,
    ) -> Result<Study> {
        let id = id.into();
        let mut iter = volumes.iter();
        let (_, first) = iter
            .next()
            .ok_or_else(|| Error::MalformedManifest(format!("study {id} has no phases")))?;
        let (dims, spacing) = (first.dims, first.spacing);
        for (phase, v) in &volumes {
            if v.phase != *phase {
                return Err(Error::MalformedManifest(format!(
                    "volume tagged {} stored under {phase}",
                    v.phase
                )));
            }
            if v.dims != dims || v.spacing != spacing {
                return Err(Error::DimsMismatch(format!(
                    "phase {phase} grid {:?}/{:?} differs from {dims:?}/{spacing:?}",
                    v.dims, v.spacing
                )));
            }
        }
        if let Some(m) = &liver_mask {
            if m.dims != dims {
                return Err(Error::DimsMismatch(format!(
                    "liver mask dims {:?} != volume dims {dims:?}",
                    m.dims
                )));
            }
        }
        for l in &lesions {
            let inside = (0..3).all(|a| l.bbox.min[a] >= 0.0 && l.bbox.max[a] <= dims[a] as f64);
            if !inside {
                return Err(Error::InvalidBox(l.bbox.to_array().to_vec()));
            }
        }
        Ok(Study { id, volumes, liver_mask, lesions })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dims(&self) -> [usize; 3] {
        self.volumes.values().next().map(|v| v.dims).unwrap_or_default()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.volumes.values().next().map(|v| v.spacing).unwrap_or([1.0; 3])
    }

    pub fn volumes(&self) -> &BTreeMap<Phase, Volume> {
        &self.volumes
    }

    pub fn volume(&self, phase: Phase) -> Option<&Volume> {
        self.volumes.get(&phase)
    }

    pub fn phases(&self) -> PhaseSet {
        self.volumes.keys().copied().collect()
    }

    pub fn liver_mask(&self) -> Option<&Mask> {
        self.liver_mask.as_ref()
    }

    pub fn lesions(&self) -> &[LesionAnnotation] {
        &self.lesions
    }

    pub fn lesion_boxes(&self, kind: LesionKind) -> Vec<Box3> {
        self.lesions.iter().filter(|l| l.kind == kind).map(|l| l.bbox).collect()
    }

    pub fn is_target(&self) -> bool {
        self.lesions.iter().any(|l| l.kind == LesionKind::Hcc)
    }

    /// Same study restricted to `phases`.
    pub fn select_phases(&self, phases: PhaseSet) -> Result<Study> {
        let mut volumes = BTreeMap::new();
        for p in phases.iter() {
            let v = self.volumes.get(&p).ok_or(Error::MissingPhase(p))?;
            volumes.insert(p, v.clone());
        }
        Study::new(self.id.clone(), volumes, self.liver_mask.clone(), self.lesions.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Per-phase HU mean and standard deviation used for normalization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    entries: BTreeMap<Phase, MeanStd>,
}

impl PhaseStats {
    pub fn new(entries: BTreeMap<Phase, MeanStd>) -> Result<PhaseStats> {
        for (p, e) in &entries {
            if !(e.std.is_finite() && e.std > 0.0 && e.mean.is_finite()) {
                return Err(Error::InvalidConfig(format!("phase {p}: std must be finite and > 0")));
            }
        }
        Ok(PhaseStats { entries })
    }

    pub fn get(&self, phase: Phase) -> Option<MeanStd> {
        self.entries.get(&phase).copied()
    }

    pub fn entries(&self) -> &BTreeMap<Phase, MeanStd> {
        &self.entries
    }

    /// Pooled statistics over every voxel of every study, per phase.
    pub fn estimate<'a>(studies: impl IntoIterator<Item = &'a Study>) -> Result<PhaseStats> {
        let mut acc: BTreeMap<Phase, (f64, f64, usize)> = BTreeMap::new();
        for s in studies {
            for (p, v) in &s.volumes {
                let e = acc.entry(*p).or_insert((0.0, 0.0, 0));
                for &x in &v.data {
                    e.0 += x;
                    e.1 += x * x;
                }
                e.2 += v.data.len();
            }
        }
        let mut entries = BTreeMap::new();
        for (p, (sum, sq, n)) in acc {
            let n = n as f64;
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(0.0);
            entries.insert(p, MeanStd { mean, std: var.sqrt().max(1e-6) });
        }
        PhaseStats::new(entries)
    }
}

pub fn normalize(v: &Volume, stats: &PhaseStats) -> Result<Volume> {
    let MeanStd { mean, std } = stats.get(v.phase).ok_or(Error::MissingPhaseStats(v.phase))?;
    let data = v.data.iter().map(|x| (x - mean) / std).collect();
    Ok(Volume { data, ..v.clone() })
}

pub fn denormalize(v: &Volume, stats: &PhaseStats) -> Result<Volume> {
    let MeanStd { mean, std } = stats.get(v.phase).ok_or(Error::MissingPhaseStats(v.phase))?;
    let data = v.data.iter().map(|x| x * std + mean).collect();
    Ok(Volume { data, ..v.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    /// Separable cubic convolution (Keys, a = -0.5).
    #[default]
    Cubic,
}

fn keys_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Taps and weights for sampling a 1D signal of length `n` at `pos`,
/// clamping out-of-range taps to the edge.
fn taps(pos: f64, n: usize, mode: Interpolation) -> Vec<(usize, f64)> {
    let last = n as i64 - 1;
    let clamp = |i: i64| i.clamp(0, last) as usize;
    let base = pos.floor();
    let t = pos - base;
    let base = base as i64;
    match mode {
        Interpolation::Trilinear => vec![(clamp(base), 1.0 - t), (clamp(base + 1), t)],
        Interpolation::Cubic => (-1..=2)
            .map(|k| (clamp(base + k), keys_weight(t - k as f64)))
            .collect(),
    }
}

fn resample_axis(
    data: &[f64],
    dims: [usize; 3],
    axis: usize,
    out_len: usize,
    scale: f64,
    mode: Interpolation,
) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = out_len;
    let n = dims[axis];
    // voxel centers are aligned: output j sits at source (j + 0.5) * scale - 0.5
    let table: Vec<Vec<(usize, f64)>> = (0..out_len)
        .map(|j| taps((j as f64 + 0.5) * scale - 0.5, n, mode))
        .collect();
    let mut out = vec![0.0; out_dims.iter().product()];
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let o = [x, y, z];
                let mut acc = 0.0;
                for &(src, w) in &table[o[axis]] {
                    let mut i = o;
                    i[axis] = src;
                    acc += w * data[linear_index(dims, i[0], i[1], i[2])];
                }
                out[linear_index(out_dims, x, y, z)] = acc;
            }
        }
    }
    (out, out_dims)
}

/// Output dims for resampling `dims` from `spacing` to `target`.
pub fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| ((dims[a] as f64 * spacing[a] / target[a]).round() as usize).max(1))
}

pub fn resample(v: &Volume, target_spacing: [f64; 3], mode: Interpolation) -> Result<Volume> {
    check_spacing(target_spacing)?;
    if target_spacing == v.spacing {
        return Ok(v.clone());
    }
    let out_dims = resampled_dims(v.dims, v.spacing, target_spacing);
    let mut data = v.data.clone();
    let mut dims = v.dims;
    for axis in 0..3 {
        let scale = target_spacing[axis] / v.spacing[axis];
        (data, dims) = resample_axis(&data, dims, axis, out_dims[axis], scale, mode);
    }
    Volume::new(dims, target_spacing, v.phase, data)
}

/// A crop taken identically from every phase of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyCrop {
    pub origin: [usize; 3],
    pub volumes: BTreeMap<Phase, Volume>,
    pub liver_mask: Option<Mask>,
    /// Lesion boxes translated into crop coordinates and clipped to it.
    pub lesions: Vec<LesionAnnotation>,
}

pub fn crop_at(s: &Study, origin: [usize; 3], size: [usize; 3]) -> Result<StudyCrop> {
    let dims = s.dims();
    if (0..3).any(|a| size[a] == 0 || origin[a] + size[a] > dims[a]) {
        return Err(Error::CropTooLarge { crop: size, dims });
    }
    let volumes = s
        .volumes
        .iter()
        .map(|(p, v)| Ok((*p, v.extract(origin, size)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let liver_mask = s.liver_mask.as_ref().map(|m| m.extract(origin, size)).transpose()?;
    let window = Box3 {
        min: origin.map(|o| o as f64),
        max: [0, 1, 2].map(|a| (origin[a] + size[a]) as f64),
    };
    let shift = origin.map(|o| -(o as f64));
    let lesions = s
        .lesions
        .iter()
        .filter_map(|l| {
            l.bbox.intersection(&window).map(|b| LesionAnnotation {
                bbox: b.translate(shift),
                kind: l.kind,
            })
        })
        .collect();
    Ok(StudyCrop { origin, volumes, liver_mask, lesions })
}

/// Uniformly placed crop; a pure function of `(study, size, seed)`.
pub fn crop_random(s: &Study, size: [usize; 3], seed: u64) -> Result<StudyCrop> {
    let dims = s.dims();
    if (0..3).any(|a| size[a] == 0 || size[a] > dims[a]) {
        return Err(Error::CropTooLarge { crop: size, dims });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - size[a]));
    crop_at(s, origin, size)
}

/// Depth ranges covering `[0, nz)` with `overlap` between consecutive
/// windows. The last window is shifted back to end exactly at `nz`.
pub fn sliding_windows(nz: usize, window: usize, overlap: usize) -> Result<Vec<Range<usize>>> {
    if window == 0 || overlap >= window {
        return Err(Error::InvalidWindow { window, overlap });
    }
    if nz <= window {
        #[allow(clippy::single_range_in_vec_init)]
        return Ok(vec![0..nz]);
    }
    let step = window - overlap;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        if start + window >= nz {
            out.push(nz - window..nz);
            return Ok(out);
        }
        out.push(start..start + window);
        start += step;
    }
}

/// Reassembles depth windows into one field. Each window's field is
/// depth-major with `plane` values per slice; overlapped slices take the
/// arithmetic mean of all contributing windows.
pub fn stitch(windows: &[(Range<usize>, Vec<f64>)], plane: usize) -> Result<Vec<f64>> {
    let nz = windows.iter().map(|(r, _)| r.end).max().unwrap_or(0);
    let mut sum = vec![0.0; nz * plane];
    let mut count = vec![0u32; nz];
    for (range, field) in windows {
        if range.start >= range.end || field.len() != range.len() * plane {
            return Err(Error::ShapeMismatch(format!(
                "window {range:?} with {} values, expected {}",
                field.len(),
                range.len() * plane
            )));
        }
        for (k, z) in range.clone().enumerate() {
            let src = &field[k * plane..(k + 1) * plane];
            for (d, s) in sum[z * plane..(z + 1) * plane].iter_mut().zip(src) {
                *d += s;
            }
            count[z] += 1;
        }
    }
    if let Some(z) = count.iter().position(|c| *c == 0) {
        return Err(Error::ShapeMismatch(format!("slice {z} not covered by any window")));
    }
    for (z, c) in count.iter().enumerate() {
        if *c > 1 {
            let c = *c as f64;
            sum[z * plane..(z + 1) * plane].iter_mut().for_each(|v| *v /= c);
        }
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3], spacing: [f64; 3], f: impl Fn(f64, f64, f64) -> f64) -> Volume {
        // world coordinate of voxel centers
        Volume::from_fn(dims, spacing, Phase::VP, |x, y, z| {
            f(
                (x as f64 + 0.5) * spacing[0],
                (y as f64 + 0.5) * spacing[1],
                (z as f64 + 0.5) * spacing[2],
            )
        })
        .unwrap()
    }

    #[test]
    fn volume_invariants() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], Phase::NC, vec![0.0; 7]).is_err());
        assert!(Volume::new([2, 2, 2], [0.0, 1.0, 1.0], Phase::NC, vec![0.0; 8]).is_err());
        assert!(Volume::new([1, 1, 1], [1.0; 3], Phase::NC, vec![f64::NAN]).is_err());
    }

    #[test]
    fn resample_identity_and_constant() {
        let v = ramp([5, 4, 3], [1.0, 1.0, 5.0], |x, y, z| x * y - z);
        assert_eq!(resample(&v, [1.0, 1.0, 5.0], Interpolation::Cubic).unwrap(), v);
        let c = Volume::filled([7, 6, 5], [0.8, 1.3, 2.5], Phase::AP, 42.5).unwrap();
        for mode in [Interpolation::Trilinear, Interpolation::Cubic] {
            for target in [[1.0, 1.0, 5.0], [0.37, 2.2, 1.0], [3.0, 0.5, 0.9]] {
                let r = resample(&c, target, mode).unwrap();
                assert!(r.data().iter().all(|x| (x - 42.5).abs() < 1e-9), "{mode:?} {target:?}");
            }
        }
    }

    #[test]
    fn resample_dims_rounding() {
        let v = Volume::filled([10, 10, 9], [0.7, 1.0, 2.0], Phase::NC, 0.0).unwrap();
        let r = resample(&v, [1.0, 1.0, 5.0], Interpolation::Trilinear).unwrap();
        assert_eq!(r.dims(), [7, 10, 4]);
        assert!(resample(&v, [1.0, -1.0, 1.0], Interpolation::Cubic).is_err());
    }

    #[test]
    fn linear_field_reproduced_in_interior() {
        let f = |x: f64, y: f64, z: f64| 2.0 * x + 3.0 * y + z;
        let src = ramp([12, 10, 8], [1.0, 1.0, 1.0], f);
        for mode in [Interpolation::Trilinear, Interpolation::Cubic] {
            let out = resample(&src, [0.5, 0.5, 0.5], mode).unwrap();
            let d = out.dims();
            assert_eq!(d, [24, 20, 16]);
            let mut worst: f64 = 0.0;
            // interior: keep two source voxels (four output voxels) away from the border
            for z in 4..d[2] - 4 {
                for y in 4..d[1] - 4 {
                    for x in 4..d[0] - 4 {
                        let w = [(x as f64 + 0.5) * 0.5, (y as f64 + 0.5) * 0.5, (z as f64 + 0.5) * 0.5];
                        worst = worst.max((out.get(x, y, z) - f(w[0], w[1], w[2])).abs());
                    }
                }
            }
            assert!(worst < 1e-6, "{mode:?}: {worst}");
        }
    }

    #[test]
    fn normalize_examples() {
        let v = ramp([3, 3, 3], [1.0; 3], |x, y, z| 100.0 * x - y + z * z);
        let mut e = BTreeMap::new();
        e.insert(Phase::VP, MeanStd { mean: 0.0, std: 1.0 });
        let unit = PhaseStats::new(e).unwrap();
        assert_eq!(normalize(&v, &unit).unwrap(), v);

        let mut e = BTreeMap::new();
        e.insert(Phase::VP, MeanStd { mean: 90.0, std: 37.5 });
        let stats = PhaseStats::new(e).unwrap();
        let c = Volume::filled([2, 2, 2], [1.0; 3], Phase::VP, 90.0).unwrap();
        assert!(normalize(&c, &stats).unwrap().data().iter().all(|x| *x == 0.0));
        let back = denormalize(&normalize(&v, &stats).unwrap(), &stats).unwrap();
        for (a, b) in back.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let nc = c.clone().with_phase(Phase::NC);
        assert!(matches!(normalize(&nc, &stats), Err(Error::MissingPhaseStats(Phase::NC))));
    }

    #[test]
    fn phase_stats_reject_zero_std() {
        let mut e = BTreeMap::new();
        e.insert(Phase::NC, MeanStd { mean: 0.0, std: 0.0 });
        assert!(PhaseStats::new(e).is_err());
    }

    fn two_phase_study() -> Study {
        let dims = [8, 6, 4];
        let mut vols = BTreeMap::new();
        for p in [Phase::NC, Phase::VP] {
            vols.insert(
                p,
                Volume::from_fn(dims, [1.0; 3], p, |x, y, z| (x + 10 * y + 100 * z) as f64 + p.index() as f64)
                    .unwrap(),
            );
        }
        let lesions = vec![
            LesionAnnotation { bbox: Box3::new([0.0; 3], [2.0, 2.0, 1.0]).unwrap(), kind: LesionKind::Hcc },
            LesionAnnotation { bbox: Box3::new([5.0, 3.0, 2.0], [8.0, 6.0, 4.0]).unwrap(), kind: LesionKind::Tace },
        ];
        Study::new("s", vols, None, lesions).unwrap()
    }

    #[test]
    fn study_grid_invariants() {
        let mut vols = BTreeMap::new();
        vols.insert(Phase::NC, Volume::filled([4, 4, 4], [1.0; 3], Phase::NC, 0.0).unwrap());
        vols.insert(Phase::VP, Volume::filled([4, 4, 5], [1.0; 3], Phase::VP, 0.0).unwrap());
        assert!(matches!(Study::new("x", vols, None, vec![]), Err(Error::DimsMismatch(_))));
        assert!(Study::new("x", BTreeMap::new(), None, vec![]).is_err());
    }

    #[test]
    fn crop_whole_volume_keeps_annotations() {
        let s = two_phase_study();
        let c = crop_random(&s, s.dims(), 7).unwrap();
        assert_eq!(c.origin, [0, 0, 0]);
        assert_eq!(c.lesions, s.lesions().to_vec());
        assert_eq!(c.volumes, *s.volumes());
    }

    #[test]
    fn crop_is_deterministic_and_shared_across_phases() {
        let s = two_phase_study();
        let a = crop_random(&s, [4, 3, 2], 99).unwrap();
        let b = crop_random(&s, [4, 3, 2], 99).unwrap();
        assert_eq!(a, b);
        let o = a.origin;
        for (p, v) in &a.volumes {
            assert_eq!(v.get(0, 0, 0), s.volume(*p).unwrap().get(o[0], o[1], o[2]));
        }
        assert!(crop_random(&s, [9, 1, 1], 0).is_err());
    }

    #[test]
    fn crop_drops_and_clips_lesions() {
        let s = two_phase_study();
        // window [4,8) x [2,6) x [1,4): HCC box [0,2)^2x[0,1) is fully outside
        let c = crop_at(&s, [4, 2, 1], [4, 4, 3]).unwrap();
        assert_eq!(c.lesions.len(), 1);
        assert_eq!(c.lesions[0].kind, LesionKind::Tace);
        assert_eq!(c.lesions[0].bbox.to_array(), [1.0, 1.0, 1.0, 4.0, 4.0, 3.0]);
        // partial overlap gets clipped
        let c = crop_at(&s, [1, 1, 0], [4, 4, 4]).unwrap();
        assert_eq!(c.lesions[0].bbox.to_array(), [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sliding_window_examples() {
        assert_eq!(sliding_windows(48, 48, 16).unwrap(), vec![0..48]);
        assert_eq!(sliding_windows(80, 48, 16).unwrap(), vec![0..48, 32..80]);
        assert_eq!(sliding_windows(49, 48, 16).unwrap(), vec![0..48, 1..49]);
        assert_eq!(sliding_windows(10, 48, 16).unwrap(), vec![0..10]);
        assert!(sliding_windows(80, 16, 16).is_err());
    }

    #[test]
    fn stitch_examples() {
        let single = vec![(0..3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])];
        assert_eq!(stitch(&single, 2).unwrap(), single[0].1);
        let w = vec![(0..3, vec![0.0; 3]), (1..4, vec![1.0; 3])];
        assert_eq!(stitch(&w, 1).unwrap(), vec![0.0, 0.5, 0.5, 1.0]);
        let w = vec![(0..3, vec![2.0; 3]), (1..4, vec![2.0; 3])];
        assert_eq!(stitch(&w, 1).unwrap(), vec![2.0; 4]);
        assert!(stitch(&[(0..3, vec![0.0; 5])], 2).is_err());
    }
}
