//! Quadrilateral non-maximum suppression: the traditional greedy variant and
//! recalled NMS.
//!
//! Recalled NMS runs in three steps:
//! 1. traditional NMS picks the survivors `B_sup`;
//! 2. each survivor is switched to the highest-scoring candidate of the full
//!    set `B` that overlaps it by at least the threshold;
//! 3. switched survivors that overlap (transitively) are merged into one
//!    detection.

use crate::geometry::{iou, Point2, Quadrilateral};
use crate::inference::DetectionCandidate;

/// How step 3 collapses a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MergeRule {
    /// Score-weighted vertex mean; the score is the group maximum.
    #[default]
    WeightedMean,
    /// The highest-scoring member.
    KeepMax,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsConfig {
    pub overlap_threshold: f64,
    pub merge: MergeRule,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            overlap_threshold: 0.5,
            merge: MergeRule::WeightedMean,
        }
    }
}

fn boxes_touch(a: &Quadrilateral, b: &Quadrilateral) -> bool {
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    ax0 < bx1 && bx0 < ax1 && ay0 < by1 && by0 < ay1
}

fn overlap(a: &Quadrilateral, b: &Quadrilateral) -> f64 {
    if boxes_touch(a, b) {
        iou(a, b)
    } else {
        0.0
    }
}

/// Indices sorted by descending score; ties keep input order.
fn by_score(cands: &[DetectionCandidate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&i, &j| cands[j].score.total_cmp(&cands[i].score));
    order
}

/// Indices kept by greedy NMS, in descending score order.
pub fn traditional_nms_indices(cands: &[DetectionCandidate], cfg: &NmsConfig) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in by_score(cands) {
        if kept.iter().all(|&k| overlap(&cands[i].quad, &cands[k].quad) < cfg.overlap_threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn traditional_nms(cands: &[DetectionCandidate], cfg: &NmsConfig) -> Vec<DetectionCandidate> {
    traditional_nms_indices(cands, cfg).into_iter().map(|i| cands[i]).collect()
}

/// Intermediate results of [`recalled_nms`], as indices into the input.
#[derive(Debug, Clone, PartialEq)]
pub struct RecalledNmsTrace {
    pub survivors: Vec<usize>,
    /// `switched[k]` replaces `survivors[k]`.
    pub switched: Vec<usize>,
    /// Distinct switched candidates grouped by overlap, each group sorted by
    /// descending score.
    pub groups: Vec<Vec<usize>>,
    pub output: Vec<DetectionCandidate>,
}

pub fn recalled_nms(cands: &[DetectionCandidate], cfg: &NmsConfig) -> Vec<DetectionCandidate> {
    recalled_nms_trace(cands, cfg).output
}

pub fn recalled_nms_trace(cands: &[DetectionCandidate], cfg: &NmsConfig) -> RecalledNmsTrace {
    let thr = cfg.overlap_threshold;
    let survivors = traditional_nms_indices(cands, cfg);
    let order = by_score(cands);

    // step 2: first hit in score order is the highest-scoring overlap
    let switched: Vec<usize> = survivors
        .iter()
        .map(|&s| {
            *order
                .iter()
                .find(|&&b| b == s || overlap(&cands[s].quad, &cands[b].quad) >= thr)
                .expect("a survivor overlaps itself")
        })
        .collect();

    // step 3: connected components of the overlap relation
    let mut distinct: Vec<usize> = Vec::new();
    for &s in &switched {
        if !distinct.contains(&s) {
            distinct.push(s);
        }
    }
    let n = distinct.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for a in 0..n {
        for b in a + 1..n {
            if overlap(&cands[distinct[a]].quad, &cands[distinct[b]].quad) >= thr {
                let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of = vec![usize::MAX; n];
    for (k, &d) in distinct.iter().enumerate() {
        let r = root(&mut parent, k);
        if group_of[r] == usize::MAX {
            group_of[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[group_of[r]].push(d);
    }
    for g in &mut groups {
        g.sort_by(|&i, &j| cands[j].score.total_cmp(&cands[i].score).then(i.cmp(&j)));
    }
    let output = groups
        .iter()
        .map(|g| {
            let members: Vec<DetectionCandidate> = g.iter().map(|&i| cands[i]).collect();
            match cfg.merge {
                MergeRule::WeightedMean => merge_group(&members),
                MergeRule::KeepMax => members[0],
            }
        })
        .collect();
    RecalledNmsTrace {
        survivors,
        switched,
        groups,
        output,
    }
}

/// Vertex order of `q` (cyclic shift, possibly reversed) that best matches
/// `reference`; the identity wins ties.
fn aligned(q: &Quadrilateral, reference: &Quadrilateral) -> [Point2; 4] {
    let v = q.vertices;
    let mut best = v;
    let mut best_cost = f64::INFINITY;
    for reversed in [false, true] {
        for shift in 0..4 {
            let cand: [Point2; 4] = std::array::from_fn(|n| {
                let k = if reversed { (4 + shift - n) % 4 } else { (n + shift) % 4 };
                v[k]
            });
            let cost: f64 = cand
                .iter()
                .zip(&reference.vertices)
                .map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2))
                .sum();
            if cost < best_cost {
                best_cost = cost;
                best = cand;
            }
        }
    }
    best
}

/// Score-weighted vertex mean of a non-empty group; score = group maximum.
/// Vertices are matched to those of the highest-scoring member.
pub fn merge_group(group: &[DetectionCandidate]) -> DetectionCandidate {
    assert!(!group.is_empty(), "merge_group needs at least one candidate");
    let top = group
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.score.total_cmp(&b.score).then(j.cmp(i)))
        .map(|(_, c)| *c)
        .expect("non-empty");
    if group.len() == 1 {
        return top;
    }
    let reference = top.quad;
    let weight_sum: f64 = group.iter().map(|c| c.score).sum();
    let mut delta = [Point2::new(0.0, 0.0); 4];
    for c in group {
        let v = aligned(&c.quad, &reference);
        for n in 0..4 {
            delta[n].x += c.score * (v[n].x - reference.vertices[n].x);
            delta[n].y += c.score * (v[n].y - reference.vertices[n].y);
        }
    }
    let vertices = std::array::from_fn(|n| {
        let r = reference.vertices[n];
        if weight_sum > 0.0 {
            Point2::new(r.x + delta[n].x / weight_sum, r.y + delta[n].y / weight_sum)
        } else {
            r
        }
    });
    DetectionCandidate::new(Quadrilateral::new(vertices), top.score)
}
