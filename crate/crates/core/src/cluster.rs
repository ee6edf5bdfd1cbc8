//! Spatio-temporal clustering of cursor traces and word grounding.
//!
//! Each cursor sample becomes a 4-d point `(x, y, t, w)`: normalised screen
//! position, normalised time within the chunk, and the fraction of caption
//! words spoken so far. Spatial coordinates are multiplied by `e^{-λt}`
//! before clustering. Note the decay shrinks late points toward the origin
//! rather than re-weighting the metric; bounding boxes therefore always use
//! the undecayed positions.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caption::TimedWord;
use crate::cursor::CursorTrace;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub lambda: f64,
    pub words_per_cluster: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub kmeans_iters: usize,
    pub rng_seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            lambda: 0.05,
            words_per_cluster: 15,
            k_min: 1,
            k_max: 8,
            kmeans_iters: 100,
            rng_seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.k_min < 1 || self.k_max < self.k_min {
            return Err(Error::Config(format!(
                "need 1 <= k_min <= k_max, got {}..{}",
                self.k_min, self.k_max
            )));
        }
        if self.words_per_cluster == 0 {
            return Err(Error::Config("words_per_cluster must be positive".into()));
        }
        Ok(())
    }
}

/// Frame size and time window a trace was recorded in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceGeometry {
    pub width: u32,
    pub height: u32,
    pub start_ms: u64,
    pub end_ms: u64,
}

impl TraceGeometry {
    pub fn normalize_time(&self, t_ms: f64) -> f64 {
        let span = self.end_ms.saturating_sub(self.start_ms) as f64;
        if span <= 0.0 {
            return 0.0;
        }
        ((t_ms - self.start_ms as f64) / span).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturePoint {
    /// Decayed normalised x.
    pub x: f64,
    /// Decayed normalised y.
    pub y: f64,
    pub t: f64,
    pub w: f64,
    pub raw_x: f64,
    pub raw_y: f64,
    pub source_sample: usize,
}

impl FeaturePoint {
    fn vector(&self) -> [f64; 4] {
        [self.x, self.y, self.t, self.w]
    }
}

pub fn build_features(
    trace: &CursorTrace,
    geometry: TraceGeometry,
    words: &[TimedWord],
    cfg: &ClusterConfig,
) -> Result<Vec<FeaturePoint>> {
    if !trace.active {
        return Err(Error::InactiveTrace(trace.chunk_id.clone()));
    }
    let total = words.len();
    Ok(trace
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let t = geometry.normalize_time(s.t_ms as f64);
            let spoken = words.iter().filter(|w| w.t_ms <= s.t_ms as f64).count();
            let w = if total == 0 {
                0.0
            } else {
                spoken as f64 / total as f64
            };
            let raw_x = s.x as f64 / geometry.width as f64;
            let raw_y = s.y as f64 / geometry.height as f64;
            let decay = (-cfg.lambda * t).exp();
            FeaturePoint {
                x: raw_x * decay,
                y: raw_y * decay,
                t,
                w,
                raw_x,
                raw_y,
                source_sample: i,
            }
        })
        .collect())
}

/// round(words / words_per_cluster), clamped to `[k_min, min(k_max, n_points)]`.
pub fn select_cluster_count(word_count: usize, n_points: usize, cfg: &ClusterConfig) -> usize {
    let raw = (word_count as f64 / cfg.words_per_cluster as f64).round() as usize;
    let hi = cfg.k_max.min(n_points).max(cfg.k_min);
    raw.clamp(cfg.k_min, hi)
}

fn dist2(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Index of the closest centroid; ties go to the lowest id.
fn nearest(p: &[f64; 4], centroids: &[[f64; 4]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn kmeans_pp(points: &[[f64; 4]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 4]> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // every point coincides with a centre already
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(dist2(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i]).collect()
}

/// k-means with k-means++ seeding; returns one cluster id per point.
///
/// Empty clusters are refilled with the point farthest from the centroid
/// of the largest cluster, so every id in `0..k` ends up used.
pub fn cluster_points(features: &[FeaturePoint], k: usize, cfg: &ClusterConfig) -> Result<Vec<usize>> {
    let n = features.len();
    if k == 0 || k > n {
        return Err(Error::InsufficientPoints { k, n });
    }
    let points: Vec<[f64; 4]> = features.iter().map(FeaturePoint::vector).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut centroids = kmeans_pp(&points, k, &mut rng);
    let mut assignment: Vec<usize> = Vec::new();

    for _ in 0..cfg.kmeans_iters.max(1) {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        repair_empty(&points, &mut next, &mut centroids, k);
        let converged = next == assignment;
        assignment = next;
        if converged {
            break;
        }
        centroids = recompute_centroids(&points, &assignment, &centroids);
    }
    Ok(assignment)
}

fn recompute_centroids(points: &[[f64; 4]], assignment: &[usize], old: &[[f64; 4]]) -> Vec<[f64; 4]> {
    let mut sums = vec![[0.0; 4]; old.len()];
    let mut counts = vec![0usize; old.len()];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.iter()
        .zip(&counts)
        .zip(old)
        .map(|((s, &n), prev)| if n == 0 { *prev } else { s.map(|v| v / n as f64) })
        .collect()
}

fn repair_empty(points: &[[f64; 4]], assignment: &mut [usize], centroids: &mut [[f64; 4]], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
        let center = recompute_centroids(points, assignment, centroids)[largest];
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if assignment[i] == largest {
                let d = dist2(p, &center);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
        }
        let moved = far.expect("largest cluster is non-empty");
        assignment[moved] = empty;
        centroids[empty] = points[moved];
    }
}

pub fn temporal_midpoint(features: &[FeaturePoint], members: &[usize]) -> f64 {
    members.iter().map(|&i| features[i].t).sum::<f64>() / members.len() as f64
}

/// Contiguous word spans per cluster (indexed like `midpoints`).
///
/// Each word's nearest midpoint is found (ties to the earlier midpoint);
/// walking the words in order, the active cluster only ever advances in
/// midpoint order, so interleaved assignments collapse into spans.
pub fn assign_words(word_times: &[f64], midpoints: &[f64]) -> Vec<Range<usize>> {
    let k = midpoints.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| midpoints[a].total_cmp(&midpoints[b]).then(a.cmp(&b)));

    let nearest_rank = |t: f64| {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (rank, &c) in order.iter().enumerate() {
            let d = (t - midpoints[c]).abs();
            if d < best_d {
                best_d = d;
                best = rank;
            }
        }
        best
    };

    let mut ranks = Vec::with_capacity(word_times.len());
    let mut current = 0;
    for (i, &t) in word_times.iter().enumerate() {
        let r = nearest_rank(t);
        if i == 0 || r > current {
            current = r;
        }
        ranks.push(current);
    }

    let first_at_or_after = |rank: usize| ranks.iter().position(|&r| r >= rank).unwrap_or(ranks.len());
    let mut spans = vec![0..0; k];
    for (rank, &c) in order.iter().enumerate() {
        spans[c] = first_at_or_after(rank)..first_at_or_after(rank + 1);
    }
    spans
}

pub type BBox = [f64; 4];

/// Tight `[x1, y1, x2, y2]` around the members' undecayed coordinates.
pub fn bounding_box(features: &[FeaturePoint], members: &[usize]) -> BBox {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for &i in members {
        let p = &features[i];
        b[0] = b[0].min(p.raw_x);
        b[1] = b[1].min(p.raw_y);
        b[2] = b[2].max(p.raw_x);
        b[3] = b[3].max(p.raw_y);
    }
    b.map(|v| v.clamp(0.0, 1.0))
}

/// Suffix every non-empty span with its box, two decimals per coordinate.
pub fn render_grounded_caption(words: &[&str], spans: &[Range<usize>], boxes: &[BBox]) -> String {
    let mut ordered: Vec<(&Range<usize>, &BBox)> =
        spans.iter().zip(boxes).filter(|(s, _)| !s.is_empty()).collect();
    ordered.sort_by_key(|(s, _)| s.start);
    ordered
        .into_iter()
        .map(|(span, b)| {
            format!(
                "{} [{:.2}, {:.2}, {:.2}, {:.2}]",
                words[span.clone()].join(" "),
                b[0],
                b[1],
                b[2],
                b[3]
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedCluster {
    pub bbox: BBox,
    pub word_span: [usize; 2],
    pub midpoint: f64,
    #[serde(skip)]
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedCaption {
    pub chunk_id: String,
    pub caption: String,
    pub clusters: Vec<GroundedCluster>,
    pub grounded_caption: String,
}

/// Cluster a chunk's trace and attach its caption words to the clusters.
/// Clusters come back ordered by temporal midpoint.
pub fn ground_caption(
    trace: &CursorTrace,
    geometry: TraceGeometry,
    words: &[TimedWord],
    cfg: &ClusterConfig,
) -> Result<GroundedCaption> {
    cfg.validate()?;
    let features = build_features(trace, geometry, words, cfg)?;
    let k = select_cluster_count(words.len(), features.len(), cfg);
    let assignment = cluster_points(&features, k, cfg)?;

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        groups[c].push(i);
    }
    let mut clusters: Vec<(f64, Vec<usize>)> = groups
        .into_iter()
        .filter(|m| !m.is_empty())
        .map(|m| (temporal_midpoint(&features, &m), m))
        .collect();
    clusters.sort_by(|a, b| a.0.total_cmp(&b.0));

    let midpoints: Vec<f64> = clusters.iter().map(|c| c.0).collect();
    let word_times: Vec<f64> = words.iter().map(|w| geometry.normalize_time(w.t_ms)).collect();
    let spans = assign_words(&word_times, &midpoints);
    let boxes: Vec<BBox> = clusters.iter().map(|(_, m)| bounding_box(&features, m)).collect();

    let tokens: Vec<&str> = words.iter().map(|w| w.word.as_str()).collect();
    let grounded = render_grounded_caption(&tokens, &spans, &boxes);
    Ok(GroundedCaption {
        chunk_id: trace.chunk_id.clone(),
        caption: tokens.join(" "),
        clusters: clusters
            .into_iter()
            .zip(spans.into_iter().zip(boxes))
            .map(|((midpoint, members), (span, bbox))| GroundedCluster {
                bbox,
                word_span: [span.start, span.end],
                midpoint,
                members,
            })
            .collect(),
        grounded_caption: grounded,
    })
}
