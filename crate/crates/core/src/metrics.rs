//! Ranking and localisation metrics: AUROC, AUPR and per-region overlap.

use std::collections::VecDeque;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Default FPR integration limit for PRO.
pub const PRO_FPR_LIMIT: f64 = 0.3;

/// Scores with binary labels (`true` = anomalous).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return shape_err(format!("{} scores for {} labels", scores.len(), labels.len()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("scores must be finite".into()));
        }
        Ok(Self { scores, labels })
    }

    /// Pools every pixel of every map, labelled by its mask.
    pub fn from_maps(maps: &[Tensor], masks: &[Tensor]) -> Result<Self> {
        check_maps(maps, masks)?;
        let scores = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
        let labels = masks.iter().flat_map(|m| m.data().iter().map(|&v| v > 0.5)).collect();
        Self::new(scores, labels)
    }

    pub fn push(&mut self, score: f64, label: bool) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

fn check_maps(maps: &[Tensor], masks: &[Tensor]) -> Result<()> {
    if maps.len() != masks.len() {
        return shape_err(format!("{} maps for {} masks", maps.len(), masks.len()));
    }
    for (m, g) in maps.iter().zip(masks) {
        if m.shape() != g.shape() || m.rank() != 2 {
            return shape_err(format!("map {:?} vs mask {:?}", m.shape(), g.shape()));
        }
    }
    Ok(())
}

/// Mann-Whitney AUROC with midranks for ties.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let n = set.len();
    let pos = set.positives();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| set.labels[k]).count();
        rank_sum += midrank * tied_pos as f64;
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Average precision: mean of precision at the rank of each positive, with
/// items ordered by descending score and ties kept in index order.
pub fn aupr(set: &ScoredSet) -> Result<f64> {
    let pos = set.positives();
    if pos == 0 {
        return Err(Error::InvalidArgument("AUPR needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if set.labels[k] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

/// 4-connected foreground components of a `[H, W]` mask, each as sorted flat
/// pixel indices, ordered by their smallest index.
pub fn connected_components(mask: &Tensor) -> Result<Vec<Vec<usize>>> {
    if mask.rank() != 2 {
        return shape_err(format!("mask must be rank 2, got {:?}", mask.shape()));
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let fg: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if fg[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    Ok(out)
}

/// Area under the (FPR, mean region overlap) curve from FPR 0 to `fpr_limit`,
/// not normalised.
pub fn pro_integral(maps: &[Tensor], masks: &[Tensor], fpr_limit: f64) -> Result<f64> {
    check_maps(maps, masks)?;
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::InvalidArgument(format!("fpr_limit {fpr_limit} outside (0, 1]")));
    }
    // Per pixel: region id, or None for normal pixels.
    let mut region_of: Vec<Option<usize>> = Vec::new();
    let mut scores: Vec<f64> = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    for (m, g) in maps.iter().zip(masks) {
        let base = region_of.len();
        region_of.extend(std::iter::repeat_n(None, g.numel()));
        scores.extend_from_slice(m.data());
        for comp in connected_components(g)? {
            let id = region_sizes.len();
            region_sizes.push(comp.len());
            for p in comp {
                region_of[base + p] = Some(id);
            }
        }
    }
    if region_sizes.is_empty() {
        return Err(Error::InvalidArgument("PRO needs at least one anomalous region".into()));
    }
    let negatives = region_of.iter().filter(|r| r.is_none()).count();
    if negatives == 0 {
        return Err(Error::InvalidArgument("PRO needs at least one normal pixel".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let regions = region_sizes.len() as f64;
    let mut false_pos = 0usize;
    let mut overlap_sum = 0.0;
    let (mut prev_fpr, mut prev_pro) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            match region_of[order[i]] {
                Some(r) => overlap_sum += 1.0 / region_sizes[r] as f64,
                None => false_pos += 1,
            }
            i += 1;
        }
        let fpr = false_pos as f64 / negatives as f64;
        let pro = overlap_sum / regions;
        if fpr >= fpr_limit {
            let t = if fpr > prev_fpr { (fpr_limit - prev_fpr) / (fpr - prev_fpr) } else { 0.0 };
            let at_limit = prev_pro + t * (pro - prev_pro);
            area += (fpr_limit - prev_fpr) * (prev_pro + at_limit) / 2.0;
            return Ok(area);
        }
        area += (fpr - prev_fpr) * (prev_pro + pro) / 2.0;
        prev_fpr = fpr;
        prev_pro = pro;
    }
    Ok(area)
}

/// Per-region overlap integrated up to `fpr_limit` and normalised to `[0, 1]`.
pub fn pro(maps: &[Tensor], masks: &[Tensor], fpr_limit: f64) -> Result<f64> {
    Ok(pro_integral(maps, masks, fpr_limit)? / fpr_limit)
}
