//! Brute-force references for metrics and post-processing.

use std::collections::HashSet;

use mcddpm::{BinaryMap, Volume3D};

pub fn dice_oracle(a: &BinaryMap, b: &BinaryMap) -> f64 {
    let sa: HashSet<usize> = a.data().iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i).collect();
    let sb: HashSet<usize> = b.data().iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

/// Sweeps every distinct score as a `>=` threshold, highest first.
pub fn ap_oracle(scores: &[f32], labels: &[bool]) -> f64 {
    let npos = labels.iter().filter(|&&l| l).count();
    let mut thresholds: Vec<f32> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut tp_prev = 0usize;
    for th in thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= th && l).count();
        let fp = scores.iter().zip(labels).filter(|(&s, &l)| s >= th && !l).count();
        if tp > tp_prev {
            ap += (tp - tp_prev) as f64 / npos as f64 * (tp as f64 / (tp + fp) as f64);
            tp_prev = tp;
        }
    }
    ap
}

pub fn median_oracle(v: &Volume3D, kernel: usize) -> Volume3D {
    let (h, w, d) = v.dims();
    let r = (kernel / 2) as i64;
    let mut out = Volume3D::zeros(h, w, d);
    for k in 0..d as i64 {
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                let mut vals = Vec::new();
                for (dk, di, dj) in offsets(r) {
                    let (kk, ii, jj) = (k + dk, i + di, j + dj);
                    let inside = (0..d as i64).contains(&kk) && (0..h as i64).contains(&ii) && (0..w as i64).contains(&jj);
                    vals.push(if inside { v.get(ii as usize, jj as usize, kk as usize) } else { 0.0 });
                }
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                out.set(i as usize, j as usize, k as usize, vals[vals.len() / 2]);
            }
        }
    }
    out
}

fn offsets(r: i64) -> Vec<(i64, i64, i64)> {
    let mut o = Vec::new();
    for a in -r..=r {
        for b in -r..=r {
            for c in -r..=r {
                o.push((a, b, c));
            }
        }
    }
    o
}

pub fn erode_oracle(m: &BinaryMap) -> BinaryMap {
    let (h, w, d) = m.dims();
    let offsets = [(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
    BinaryMap::from_fn(h, w, d, |i, j, k| {
        offsets.iter().all(|&(di, dj, dk): &(i64, i64, i64)| {
            let (ii, jj, kk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
            ii >= 0 && jj >= 0 && kk >= 0 && ii < h as i64 && jj < w as i64 && kk < d as i64 && m.get(ii as usize, jj as usize, kk as usize)
        })
    })
}
