//! Brute-force reference implementations shared by the integration tests.
//! They favour directness over speed and share no code with the library.

#![allow(dead_code)]

use kag_core::Tensor;
use rand::Rng;

/// ROC curve traced over every distinct threshold (plus one above the
/// maximum), integrated with trapezoids.
pub fn auroc_sweep(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let n = labels.len() as f64 - p;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut points = vec![(0.0, 0.0)];
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= t).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= t).count() as f64;
        points.push((fp / n, tp / p));
    }
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Average precision with items ranked by descending score and ties broken
/// by index: each positive contributes the precision of the prefix ending at it.
pub fn aupr_bruteforce(scores: &[f64], labels: &[bool]) -> f64 {
    let ahead = |j: usize, k: usize| scores[j] > scores[k] || (scores[j] == scores[k] && j <= k);
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut total = 0.0;
    for k in (0..scores.len()).filter(|&k| labels[k]) {
        let prefix = (0..scores.len()).filter(|&j| ahead(j, k)).count() as f64;
        let hits = (0..scores.len()).filter(|&j| labels[j] && ahead(j, k)).count() as f64;
        total += hits / prefix;
    }
    total / positives
}

/// 4-connected foreground regions via union-find; returns a region label per
/// pixel (`None` for background) and the number of regions.
pub fn label_regions(mask: &Tensor) -> (Vec<Option<usize>>, usize) {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let fg = |i: usize| mask.data()[i] > 0.5;
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !fg(i) {
                continue;
            }
            for j in [if x + 1 < w { Some(i + 1) } else { None }, if y + 1 < h { Some(i + w) } else { None }]
                .into_iter()
                .flatten()
            {
                if fg(j) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
    }
    let mut ids = std::collections::BTreeMap::new();
    let mut labels = vec![None; h * w];
    for i in 0..h * w {
        if fg(i) {
            let root = find(&mut parent, i);
            let next = ids.len();
            labels[i] = Some(*ids.entry(root).or_insert(next));
        }
    }
    (labels, ids.len())
}

/// PRO curve traced over every distinct threshold, integrated with trapezoids
/// up to `limit` (interpolating the last segment) and divided by `limit`.
pub fn pro_sweep(maps: &[Tensor], masks: &[Tensor], limit: f64) -> f64 {
    let mut region: Vec<Option<usize>> = Vec::new();
    let mut scores: Vec<f64> = Vec::new();
    let mut sizes: Vec<f64> = Vec::new();
    for (m, g) in maps.iter().zip(masks) {
        let (labels, count) = label_regions(g);
        let offset = sizes.len();
        sizes.extend(std::iter::repeat_n(0.0, count));
        for (i, l) in labels.iter().enumerate() {
            if let Some(l) = l {
                sizes[offset + l] += 1.0;
            }
            region.push(l.map(|l| offset + l));
            scores.push(m.data()[i]);
        }
    }
    let negatives = region.iter().filter(|r| r.is_none()).count() as f64;
    let mut thresholds = scores.clone();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut curve = vec![(0.0, 0.0)];
    for t in thresholds {
        let mut covered = vec![0.0; sizes.len()];
        let mut fp = 0.0;
        for (s, r) in scores.iter().zip(&region) {
            if *s >= t {
                match r {
                    Some(r) => covered[*r] += 1.0,
                    None => fp += 1.0,
                }
            }
        }
        let overlap = covered.iter().zip(&sizes).map(|(c, s)| c / s).sum::<f64>() / sizes.len() as f64;
        curve.push((fp / negatives, overlap));
    }
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x1 >= limit {
            let y = if x1 > x0 { y0 + (y1 - y0) * (limit - x0) / (x1 - x0) } else { y0 };
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area / limit
}

/// Random scores quantised to a few levels so that ties are common.
pub fn random_scores<R: Rng>(n: usize, levels: u32, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| f64::from(rng.random_range(0..levels)) / f64::from(levels)).collect()
}

/// Random binary mask made of a few rectangles, guaranteed to contain at
/// least one foreground and one background pixel.
pub fn random_mask<R: Rng>(h: usize, w: usize, rng: &mut R) -> Tensor {
    loop {
        let mut m = Tensor::zeros(&[h, w]);
        for _ in 0..rng.random_range(1..=3) {
            let (rh, rw) = (rng.random_range(1..=h.div_ceil(2)), rng.random_range(1..=w.div_ceil(2)));
            let (y0, x0) = (rng.random_range(0..=h - rh), rng.random_range(0..=w - rw));
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    m.set(&[y, x], 1.0);
                }
            }
        }
        let fg = m.sum();
        if fg > 0.0 && fg < (h * w) as f64 {
            return m;
        }
    }
}

/// Direct-loop cross-correlation with zero "same" padding of `[C_in, H, W]`
/// by `[C_out, C_in, kh, kw]`.
pub fn conv2d_naive(x: &Tensor, k: &Tensor) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let mut out = Tensor::zeros(&[co, h, w]);
    for o in 0..co {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for c in 0..ci {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let sy = y as isize + dy as isize - (kh / 2) as isize;
                            let sx = xx as isize + dx as isize - (kw / 2) as isize;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                acc += x.get(&[c, sy as usize, sx as usize]) * k.get(&[o, c, dy, dx]);
                            }
                        }
                    }
                }
                out.set(&[o, y, xx], acc);
            }
        }
    }
    out
}
