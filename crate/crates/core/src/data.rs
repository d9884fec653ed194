//! Volume records, array-level preprocessing, training slice sampling,
//! dataset manifests and the synthetic phantom generator.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Error, Result};
use crate::io::{read_binary_map, read_volume, write_binary_map, write_volume};
use crate::rng::{gaussian_vec, stream};
use crate::volume::{BinaryMap, Slice2D, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(invalid!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub volume: Volume3D,
    pub subject_id: String,
    pub split: Split,
    pub ground_truth: Option<BinaryMap>,
}

impl VolumeRecord {
    pub fn new(volume: Volume3D, subject_id: impl Into<String>, split: Split, ground_truth: Option<BinaryMap>) -> Result<Self> {
        let subject_id = subject_id.into();
        if let Some(gt) = &ground_truth {
            ensure!(split != Split::Train, "training record {subject_id} must not carry ground truth");
            ensure!(gt.dims() == volume.dims(), "ground truth of {subject_id} does not match its volume");
        }
        Ok(VolumeRecord { volume, subject_id, split, ground_truth })
    }
}

pub fn split_records(records: Vec<VolumeRecord>, split: Split) -> Vec<VolumeRecord> {
    records.into_iter().filter(|r| r.split == split).collect()
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f32], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0] as f64;
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub volume: Volume3D,
    /// Set when the nonzero voxels have no intensity spread.
    pub degenerate: bool,
}

/// Maps the `lo`-th and `hi`-th percentiles of the nonzero voxels to 0 and 1, then clips.
pub fn normalize_percentile(v: &Volume3D, lo: f64, hi: f64) -> Result<Normalized> {
    ensure!((0.0..=100.0).contains(&lo) && (0.0..=100.0).contains(&hi) && lo < hi, "need 0 <= lo < hi <= 100, got {lo}, {hi}");
    let mut nz: Vec<f32> = v.data().iter().copied().filter(|&x| x != 0.0).collect();
    let (h, w, d) = v.dims();
    let degenerate = |reason: &str| {
        log::warn!("percentile normalization degenerate: {reason}; returning zeros");
        Normalized { volume: Volume3D::zeros(h, w, d).with_spacing(v.spacing()), degenerate: true }
    };
    if nz.is_empty() {
        return Ok(degenerate("no nonzero voxels"));
    }
    nz.sort_unstable_by(f32::total_cmp);
    let (a, b) = (percentile(&nz, lo), percentile(&nz, hi));
    if b <= a {
        return Ok(degenerate("constant intensities"));
    }
    let data = v.data().iter().map(|&x| (((x as f64 - a) / (b - a)).clamp(0.0, 1.0)) as f32).collect();
    Ok(Normalized { volume: Volume3D::new(h, w, d, data)?.with_spacing(v.spacing()), degenerate: false })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    /// Half-resolution slices removed from each end.
    pub trim: usize,
    pub lo_percentile: f64,
    pub hi_percentile: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { trim: 15, lo_percentile: 1.0, hi_percentile: 99.0 }
    }
}

/// Tight bounding box `(rows, cols, slices)` of the nonzero voxels.
pub fn nonzero_bbox(v: &Volume3D) -> Option<[(usize, usize); 3]> {
    let (h, w, d) = v.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for k in 0..d {
        for i in 0..h {
            for j in 0..w {
                if v.get(i, j, k) != 0.0 {
                    any = true;
                    for (a, x) in [i, j, k].into_iter().enumerate() {
                        lo[a] = lo[a].min(x);
                        hi[a] = hi[a].max(x + 1);
                    }
                }
            }
        }
    }
    any.then(|| [(lo[0], hi[0]), (lo[1], hi[1]), (lo[2], hi[2])])
}

pub fn crop(v: &Volume3D, bbox: [(usize, usize); 3]) -> Result<Volume3D> {
    let [(r0, r1), (c0, c1), (k0, k1)] = bbox;
    let (h, w, d) = v.dims();
    ensure!(r0 < r1 && r1 <= h && c0 < c1 && c1 <= w && k0 < k1 && k1 <= d, "crop box {bbox:?} outside volume {h}x{w}x{d}");
    let mut data = Vec::with_capacity((r1 - r0) * (c1 - c0) * (k1 - k0));
    for k in k0..k1 {
        for i in r0..r1 {
            for j in c0..c1 {
                data.push(v.get(i, j, k));
            }
        }
    }
    Ok(Volume3D::new(r1 - r0, c1 - c0, k1 - k0, data)?.with_spacing(v.spacing()))
}

/// 2×2×2 mean pooling; an odd trailing row, column or slice is dropped.
pub fn downsample2(v: &Volume3D) -> Result<Volume3D> {
    let (h, w, d) = v.dims();
    let (h2, w2, d2) = (h / 2, w / 2, d / 2);
    ensure!(h2 > 0 && w2 > 0 && d2 > 0, "volume {h}x{w}x{d} too small to downsample");
    let mut data = Vec::with_capacity(h2 * w2 * d2);
    for k in 0..d2 {
        for i in 0..h2 {
            for j in 0..w2 {
                let mut s = 0.0f64;
                for dk in 0..2 {
                    for di in 0..2 {
                        for dj in 0..2 {
                            s += v.get(2 * i + di, 2 * j + dj, 2 * k + dk) as f64;
                        }
                    }
                }
                data.push((s / 8.0) as f32);
            }
        }
    }
    let sp = v.spacing();
    Ok(Volume3D::new(h2, w2, d2, data)?.with_spacing([sp[0] * 2.0, sp[1] * 2.0, sp[2] * 2.0]))
}

/// Crop to the nonzero box, halve the resolution, trim slices, normalize.
pub fn preprocess_volume(v: &Volume3D, cfg: &PreprocessConfig) -> Result<Normalized> {
    let bbox = nonzero_bbox(v).ok_or_else(|| invalid!("volume has no nonzero voxels (empty bounding box)"))?;
    let half = downsample2(&crop(v, bbox)?)?;
    let (h, w, d) = half.dims();
    ensure!(d > 2 * cfg.trim, "{d} slices after downsampling, cannot trim {} from each end", cfg.trim);
    let trimmed = crop(&half, [(0, h), (0, w), (cfg.trim, d - cfg.trim)])?;
    normalize_percentile(&trimmed, cfg.lo_percentile, cfg.hi_percentile)
}

/// Slices of one optimizer step with their `(record, slice)` origin.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceBatch {
    pub slices: Vec<Slice2D>,
    pub origins: Vec<(usize, usize)>,
}

/// Slice index drawn for each record in an epoch, in record order.
pub fn epoch_slice_indices(records: &[VolumeRecord], epoch_seed: u64) -> Vec<usize> {
    let mut rng = stream(epoch_seed, &[0x736c_6963]);
    records.iter().map(|r| rng.random_range(0..r.volume.depth())).collect()
}

/// One uniformly drawn slice per record, shuffled and cut into batches.
///
/// Only image slices leave this function; ground truth is never read.
pub fn sample_training_slices(records: &[VolumeRecord], batch_size: usize, epoch_seed: u64) -> Result<Vec<SliceBatch>> {
    ensure!(!records.is_empty(), "training set is empty");
    ensure!(batch_size > 0, "batch size must be positive");
    let picks = epoch_slice_indices(records, epoch_seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut stream(epoch_seed, &[0x7368_7566]));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| SliceBatch {
            slices: chunk.iter().map(|&r| records[r].volume.slice(picks[r])).collect(),
            origins: chunk.iter().map(|&r| (r, picks[r])).collect(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub split: Split,
    pub volume: String,
    #[serde(default)]
    pub ground_truth: String,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    rd.deserialize().map(|r| r.map_err(|e| Error::data(path, e.to_string()))).collect()
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    for e in entries {
        w.serialize(e).map_err(|err| Error::data(path, err.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads every record listed in a manifest; paths are relative to its directory.
pub fn load_records(manifest: impl AsRef<Path>) -> Result<Vec<VolumeRecord>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for e in read_manifest(manifest)? {
        let volume = read_volume(base.join(&e.volume))?;
        let gt = if e.ground_truth.is_empty() { None } else { Some(read_binary_map(base.join(&e.ground_truth))?) };
        let rec = VolumeRecord::new(volume, e.subject_id.clone(), e.split, gt)
            .map_err(|err| Error::data(manifest, err.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes volumes, ground truths and the manifest under `dir`; returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, records: &[VolumeRecord]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let volume = format!("volumes/{}.raw", r.subject_id);
        write_volume(dir.join(&volume), &r.volume)?;
        let ground_truth = match &r.ground_truth {
            Some(gt) => {
                let p = format!("labels/{}_gt.raw", r.subject_id);
                write_binary_map(dir.join(&p), gt, r.volume.spacing())?;
                p
            }
            None => String::new(),
        };
        entries.push(ManifestEntry { subject_id: r.subject_id.clone(), split: r.split, volume, ground_truth });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Nested-ellipse tissue model.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureSpec {
    /// Outer (cortex-like) shell intensity.
    pub outer: f32,
    /// Inner (white-matter-like) intensity.
    pub inner: f32,
    pub ventricle: f32,
    /// Amplitude of the smooth intensity modulation.
    pub modulation: f32,
    pub noise_std: f32,
    /// Relative jitter of the ellipse axes per volume.
    pub deformation: f32,
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec { outer: 0.45, inner: 0.3, ventricle: 0.1, modulation: 0.03, noise_std: 0.01, deformation: 0.08 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalySpec {
    /// Inclusive range of blobs per unhealthy volume.
    pub count: (usize, usize),
    /// In-plane radius range in voxels.
    pub radius: (f32, f32),
    /// Added intensity range (result clipped to 1).
    pub intensity_offset: (f32, f32),
    /// Accepted fraction of brain voxels that are anomalous.
    pub prevalence: (f64, f64),
}

impl Default for AnomalySpec {
    fn default() -> Self {
        AnomalySpec { count: (1, 3), radius: (4.0, 7.0), intensity_offset: (0.55, 0.7), prevalence: (0.02, 0.05) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub image_size: (usize, usize),
    pub depth: usize,
    pub train_volumes: usize,
    pub val_volumes: usize,
    pub test_volumes: usize,
    pub texture: TextureSpec,
    pub anomaly: AnomalySpec,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: (64, 64),
            depth: 20,
            train_volumes: 24,
            val_volumes: 4,
            test_volumes: 6,
            texture: TextureSpec::default(),
            anomaly: AnomalySpec::default(),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        ensure!(h >= 16 && w >= 16 && self.depth >= 1, "phantom needs at least 16x16x1 voxels");
        let a = &self.anomaly;
        ensure!(a.count.0 <= a.count.1, "anomaly count range {:?} is empty", a.count);
        ensure!(a.radius.0 > 0.0 && a.radius.0 <= a.radius.1, "invalid anomaly radius range {:?}", a.radius);
        ensure!(
            2.0 * a.radius.1 < h.min(w) as f32 * 0.5,
            "anomaly radius {} exceeds the brain region of a {h}x{w} image",
            a.radius.1
        );
        ensure!(a.prevalence.0 <= a.prevalence.1, "prevalence range {:?} is empty", a.prevalence);
        Ok(())
    }
}

/// Per-volume random shape parameters.
struct Anatomy {
    cy: f32,
    cx: f32,
    ay: f32,
    ax: f32,
    angle: f32,
    cz: f32,
    zr: f32,
    phase: [f32; 3],
    freq: [f32; 2],
}

impl Anatomy {
    fn draw<R: Rng + ?Sized>(spec: &PhantomSpec, rng: &mut R) -> Self {
        let (h, w) = spec.image_size;
        let jit = spec.texture.deformation;
        let mut j = |s: f32| 1.0 + rng.random_range(-s..=s);
        let ay = 0.40 * h as f32 * j(jit);
        let ax = 0.33 * w as f32 * j(jit);
        let cy = h as f32 / 2.0 - 0.5 + 0.03 * h as f32 * (j(1.0) - 1.0);
        let cx = w as f32 / 2.0 - 0.5 + 0.03 * w as f32 * (j(1.0) - 1.0);
        let angle = 0.2 * (j(1.0) - 1.0);
        let cz = (spec.depth as f32 - 1.0) / 2.0;
        let zr = spec.depth as f32 * 0.75 * j(jit);
        let phase = [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)];
        let freq = [rng.random_range(1.0..2.5), rng.random_range(1.0..2.5)];
        Anatomy { cy, cx, ay, ax, angle, cz, zr, phase, freq }
    }

    /// Normalized in-plane coordinates, scaled by the slice's cross-section.
    fn coords(&self, i: usize, j: usize, k: usize) -> Option<(f32, f32, f32)> {
        let dz = (k as f32 - self.cz) / self.zr;
        let s2 = 1.0 - dz * dz;
        if s2 <= 0.0 {
            return None;
        }
        let s = s2.sqrt();
        let (dy, dx) = (i as f32 - self.cy, j as f32 - self.cx);
        let (sn, cs) = self.angle.sin_cos();
        let u = (cs * dx + sn * dy) / (self.ax * s);
        let v = (-sn * dx + cs * dy) / (self.ay * s);
        Some((u, v, s))
    }

    fn intensity(&self, t: &TextureSpec, i: usize, j: usize, k: usize) -> Option<f32> {
        let (u, v, _) = self.coords(i, j, k)?;
        let r = (u * u + v * v).sqrt();
        if r > 1.0 {
            return None;
        }
        let sig = |x: f32| 1.0 / (1.0 + (-x).exp());
        let mut val = t.inner + (t.outer - t.inner) * sig((r - 0.78) / 0.03);
        for side in [-1.0f32, 1.0] {
            let (du, dv) = ((u - side * 0.16) / 0.09, (v + 0.05) / 0.24);
            let q = (du * du + dv * dv).sqrt();
            val += (t.ventricle - val) * sig((1.0 - q) / 0.1);
        }
        let m = (self.freq[0] * std::f32::consts::PI * u + self.phase[0]).sin()
            * (self.freq[1] * std::f32::consts::PI * v + self.phase[1]).cos()
            + 0.5 * (0.4 * k as f32 + self.phase[2]).sin();
        Some(val + t.modulation * m / 1.5)
    }
}

fn healthy_volume<R: Rng + ?Sized>(spec: &PhantomSpec, rng: &mut R) -> (Volume3D, Anatomy) {
    let (h, w) = spec.image_size;
    let anat = Anatomy::draw(spec, rng);
    let noise = gaussian_vec(h * w * spec.depth, rng);
    let mut v = Volume3D::zeros(h, w, spec.depth);
    for k in 0..spec.depth {
        for i in 0..h {
            for j in 0..w {
                if let Some(val) = anat.intensity(&spec.texture, i, j, k) {
                    let n = noise[v.index(i, j, k)] * spec.texture.noise_std;
                    v.set(i, j, k, (val + n).clamp(0.02, 1.0));
                }
            }
        }
    }
    (v, anat)
}

/// Inserts blobs until the anomalous fraction of brain voxels lands in the configured range.
fn insert_anomalies<R: Rng + ?Sized>(
    spec: &PhantomSpec,
    healthy: &Volume3D,
    anat: &Anatomy,
    rng: &mut R,
) -> Result<(Volume3D, BinaryMap)> {
    let (h, w, d) = healthy.dims();
    let a = &spec.anomaly;
    if a.count.1 == 0 {
        return Ok((healthy.clone(), BinaryMap::zeros(h, w, d)));
    }
    let brain = healthy.data().iter().filter(|&&x| x > 0.0).count() as f64;
    for _ in 0..1000 {
        let count = rng.random_range(a.count.0.max(1)..=a.count.1);
        let mut gt = BinaryMap::zeros(h, w, d);
        let mut offsets = vec![0f32; h * w * d];
        for _ in 0..count {
            // Centre well inside the brain.
            let (ci, cj, ck) = loop {
                let (i, j, k) = (rng.random_range(0..h), rng.random_range(0..w), rng.random_range(0..d));
                if let Some((u, v, s)) = anat.coords(i, j, k) {
                    if u * u + v * v < 0.6 * 0.6 && s > 0.85 {
                        break (i as f32, j as f32, k as f32);
                    }
                }
            };
            let r = rng.random_range(a.radius.0..=a.radius.1);
            let off = rng.random_range(a.intensity_offset.0..=a.intensity_offset.1);
            for k in 0..d {
                for i in 0..h {
                    for j in 0..w {
                        let q = ((i as f32 - ci).powi(2) + (j as f32 - cj).powi(2) + (k as f32 - ck).powi(2)) / (r * r);
                        if q <= 1.0 && healthy.get(i, j, k) > 0.0 {
                            gt.set(i, j, k, true);
                            let idx = healthy.index(i, j, k);
                            offsets[idx] = offsets[idx].max(off);
                        }
                    }
                }
            }
        }
        let frac = gt.count() as f64 / brain;
        if frac >= a.prevalence.0 && frac <= a.prevalence.1 {
            let mut v = healthy.clone();
            for (x, o) in v.data_mut().iter_mut().zip(&offsets) {
                if *o > 0.0 {
                    *x = (*x + o).min(1.0);
                }
            }
            return Ok((v, gt));
        }
    }
    Err(invalid!("could not place anomalies within prevalence range {:?}", a.prevalence))
}

/// Train and validation volumes are healthy; test volumes carry anomalies.
pub fn generate_phantom_dataset(spec: &PhantomSpec) -> Result<Vec<VolumeRecord>> {
    spec.validate()?;
    let mut out = Vec::new();
    let groups = [(Split::Train, spec.train_volumes), (Split::Val, spec.val_volumes), (Split::Test, spec.test_volumes)];
    for (gi, (split, n)) in groups.into_iter().enumerate() {
        for idx in 0..n {
            let mut rng = stream(spec.seed, &[0x7068_616e, gi as u64, idx as u64]);
            let (healthy, anat) = healthy_volume(spec, &mut rng);
            let id = format!("{split}-{idx:03}");
            let rec = if split == Split::Test {
                let (v, gt) = insert_anomalies(spec, &healthy, &anat, &mut rng)?;
                VolumeRecord::new(v, id, split, Some(gt))?
            } else {
                VolumeRecord::new(healthy, id, split, None)?
            };
            out.push(rec);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let s = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&s, 50.0), 2.0);
        assert_eq!(percentile(&s, 0.0), 0.0);
        assert_eq!(percentile(&s, 100.0), 4.0);
        assert!((percentile(&s, 10.0) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn constant_volume_is_flagged() {
        let v = Volume3D::new(2, 2, 2, vec![3.0; 8]).unwrap();
        let n = normalize_percentile(&v, 1.0, 99.0).unwrap();
        assert!(n.degenerate);
        assert!(n.volume.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn preprocess_reaches_target_shape() {
        let data: Vec<f32> = (0..192 * 192 * 220).map(|i| 1.0 + (i % 97) as f32).collect();
        let v = Volume3D::new(192, 192, 220, data).unwrap();
        let out = preprocess_volume(&v, &PreprocessConfig::default()).unwrap();
        assert_eq!(out.volume.dims(), (96, 96, 80));
        assert!(out.volume.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(preprocess_volume(&Volume3D::zeros(40, 40, 40), &PreprocessConfig::default()).is_err());
    }

    #[test]
    fn train_records_reject_ground_truth() {
        let v = Volume3D::zeros(2, 2, 2);
        assert!(VolumeRecord::new(v.clone(), "a", Split::Train, Some(BinaryMap::zeros(2, 2, 2))).is_err());
        assert!(VolumeRecord::new(v.clone(), "a", Split::Test, Some(BinaryMap::zeros(2, 2, 3))).is_err());
        assert!(VolumeRecord::new(v, "a", Split::Test, Some(BinaryMap::zeros(2, 2, 2))).is_ok());
    }

    #[test]
    fn epoch_accounting() {
        let recs: Vec<VolumeRecord> =
            (0..2).map(|i| VolumeRecord::new(Volume3D::zeros(4, 4, 3), format!("s{i}"), Split::Train, None).unwrap()).collect();
        let b = sample_training_slices(&recs, 8, 5).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].slices.len(), 2);
        assert_eq!(b, sample_training_slices(&recs, 8, 5).unwrap());
    }

    #[test]
    fn phantom_prevalence_and_splits() {
        let spec = PhantomSpec { train_volumes: 2, val_volumes: 1, test_volumes: 3, ..Default::default() };
        let recs = generate_phantom_dataset(&spec).unwrap();
        assert_eq!(recs.len(), 6);
        for r in &recs {
            let brain = r.volume.data().iter().filter(|&&x| x > 0.0).count() as f64;
            match &r.ground_truth {
                Some(gt) => {
                    let f = gt.count() as f64 / brain;
                    assert!((0.02..=0.05).contains(&f), "prevalence {f}");
                }
                None => assert_ne!(r.split, Split::Test),
            }
        }
        assert_eq!(recs, generate_phantom_dataset(&spec).unwrap());
    }
}
