//! Anomaly map cleanup: median filter, brain-mask erosion, thresholding.

use crate::error::{ensure, Result};
use crate::inference::AnomalyMap;
use crate::volume::{BinaryMap, Volume3D};

#[derive(Clone, Debug, PartialEq)]
pub struct PostprocessConfig {
    pub median_kernel: usize,
    pub erosion_iterations: usize,
    pub theta: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig { median_kernel: 5, erosion_iterations: 3, theta: 0.2 }
    }
}

/// Median over each `kernel³` neighbourhood; out-of-bounds voxels count as 0.
pub fn median_filter_volume(v: &Volume3D, kernel: usize) -> Result<Volume3D> {
    ensure!(kernel % 2 == 1, "median kernel must be odd, got {kernel}");
    let (h, w, d) = v.dims();
    let r = (kernel / 2) as isize;
    let mut out = Volume3D::zeros(h, w, d).with_spacing(v.spacing());
    let mut buf = Vec::with_capacity(kernel * kernel * kernel);
    let mid = kernel * kernel * kernel / 2;
    for k in 0..d {
        for i in 0..h {
            for j in 0..w {
                buf.clear();
                for dk in -r..=r {
                    for di in -r..=r {
                        for dj in -r..=r {
                            let (kk, ii, jj) = (k as isize + dk, i as isize + di, j as isize + dj);
                            let inside = kk >= 0 && ii >= 0 && jj >= 0 && (kk as usize) < d && (ii as usize) < h && (jj as usize) < w;
                            buf.push(if inside { v.get(ii as usize, jj as usize, kk as usize) } else { 0.0 });
                        }
                    }
                }
                let (_, m, _) = buf.select_nth_unstable_by(mid, f32::total_cmp);
                out.set(i, j, k, *m);
            }
        }
    }
    Ok(out)
}

pub fn median_filter_3d(m: &AnomalyMap, kernel: usize) -> Result<AnomalyMap> {
    Ok(AnomalyMap { data: median_filter_volume(&m.data, kernel)?, p_norm: m.p_norm })
}

/// 1 where the volume is strictly positive.
pub fn brain_mask(v: &Volume3D) -> BinaryMap {
    let (h, w, d) = v.dims();
    BinaryMap::from_fn(h, w, d, |i, j, k| v.get(i, j, k) > 0.0)
}

/// Erosion with the 6-connected cross; voxels outside the grid count as 0.
pub fn erode(mask: &BinaryMap, iterations: usize) -> BinaryMap {
    let (h, w, d) = mask.dims();
    let mut cur = mask.clone();
    for _ in 0..iterations {
        let prev = cur.clone();
        let at = |i: isize, j: isize, k: isize| -> bool {
            i >= 0 && j >= 0 && k >= 0 && (i as usize) < h && (j as usize) < w && (k as usize) < d && prev.get(i as usize, j as usize, k as usize)
        };
        cur = BinaryMap::from_fn(h, w, d, |i, j, k| {
            let (i, j, k) = (i as isize, j as isize, k as isize);
            at(i, j, k) && at(i - 1, j, k) && at(i + 1, j, k) && at(i, j - 1, k) && at(i, j + 1, k) && at(i, j, k - 1) && at(i, j, k + 1)
        });
    }
    cur
}

/// 1 where `m > theta` inside `mask`.
pub fn threshold_binarize(m: &AnomalyMap, mask: &BinaryMap, theta: f64) -> Result<BinaryMap> {
    ensure!(theta > 0.0, "threshold must be positive, got {theta}");
    ensure!(m.dims() == mask.dims(), "map {:?} and mask {:?} differ in shape", m.dims(), mask.dims());
    let (h, w, d) = m.dims();
    Ok(BinaryMap::from_fn(h, w, d, |i, j, k| mask.get(i, j, k) && m.data.get(i, j, k) as f64 > theta))
}

/// Filtered map and eroded brain mask, ready for thresholding or scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Cleaned {
    pub filtered: AnomalyMap,
    pub mask: BinaryMap,
}

pub fn clean(v: &Volume3D, map: &AnomalyMap, cfg: &PostprocessConfig) -> Result<Cleaned> {
    ensure!(v.dims() == map.dims(), "volume {:?} and map {:?} differ in shape", v.dims(), map.dims());
    Ok(Cleaned { filtered: median_filter_3d(map, cfg.median_kernel)?, mask: erode(&brain_mask(v), cfg.erosion_iterations) })
}

/// Median filter, eroded brain mask, threshold at `cfg.theta`.
pub fn segment(v: &Volume3D, map: &AnomalyMap, cfg: &PostprocessConfig) -> Result<BinaryMap> {
    let c = clean(v, map, cfg)?;
    threshold_binarize(&c.filtered, &c.mask, cfg.theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::PNorm;

    #[test]
    fn median_removes_spike_and_keeps_constant() {
        let mut v = Volume3D::zeros(7, 7, 7);
        v.set(3, 3, 3, 9.0);
        assert!(median_filter_volume(&v, 5).unwrap().data().iter().all(|&x| x == 0.0));
        let c = Volume3D::new(4, 4, 4, vec![0.3; 64]).unwrap();
        assert_eq!(median_filter_volume(&c, 1).unwrap(), c);
        assert!(median_filter_volume(&c, 4).is_err());
    }

    #[test]
    fn cube_erodes_to_smaller_cube() {
        let m = BinaryMap::from_fn(9, 9, 9, |i, j, k| (1..8).contains(&i) && (1..8).contains(&j) && (1..8).contains(&k));
        let e = erode(&m, 1);
        assert_eq!(e, BinaryMap::from_fn(9, 9, 9, |i, j, k| (2..7).contains(&i) && (2..7).contains(&j) && (2..7).contains(&k)));
        assert_eq!(erode(&m, 0), m);
    }

    #[test]
    fn threshold_respects_mask() {
        let map = AnomalyMap { data: Volume3D::new(2, 2, 1, vec![0.5, 0.5, 0.1, 0.9]).unwrap(), p_norm: PNorm::L2 };
        let mask = BinaryMap::new(2, 2, 1, vec![1, 0, 1, 1]).unwrap();
        let b = threshold_binarize(&map, &mask, 0.2).unwrap();
        assert_eq!(b.data(), &[1, 0, 0, 1]);
        assert_eq!(threshold_binarize(&map, &mask, 1.0).unwrap().count(), 0);
        assert!(threshold_binarize(&map, &mask, 0.0).is_err());
    }
}
