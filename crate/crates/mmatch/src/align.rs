//! View alignment: two-phase background-constrained iterative registration.
//!
//! Phase 1 iterates only on the matched co-visible vehicle clusters (pair-
//! constrained correspondences) for an initial transform. Phase 2 continues
//! from there with the background point clouds added, weighting each vehicle
//! pair by e^score and the background by e^(1/N_v), so few co-visible
//! vehicles shift reliance onto the background structure.

use crate::dbscan::dbscan;
use crate::geom::{kabsch2, GeomError, Point2, Pose2};
use crate::sep::VehicleCluster;
use crate::sim::RadarPoint;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("not enough matched pairs: need >= 2, or 1 pair with >= 3 points per side")]
    InsufficientPairs,
    #[error("every candidate correspondence exceeds the rejection radius")]
    NoCorrespondences,
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Total iteration budget; the phase-1 cap L is half of it.
    pub max_total_iters: usize,
    /// Phase-1 convergence threshold on mean correspondence distance, meters.
    pub d_max: f64,
    /// Correspondences farther than this are dropped in phase 2, meters.
    pub nn_reject_radius: f64,
    /// Background outlier filter: DBSCAN epsilon, meters.
    pub bg_eps: f64,
    /// Background outlier filter: DBSCAN core threshold.
    pub bg_min_pts: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            max_total_iters: 60,
            d_max: 0.3,
            nn_reject_radius: 3.0,
            bg_eps: 1.0,
            bg_min_pts: 4,
        }
    }
}

impl AlignConfig {
    /// Phase-1 iteration cap: half the total budget (integer floor).
    pub fn phase1_cap(&self) -> usize {
        (self.max_total_iters / 2).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase1Result {
    pub transform: Pose2,
    /// Iterations actually run: min{L, N(D_max)}.
    pub iterations: usize,
    /// Mean correspondence distance after each iteration.
    pub distance_trace: Vec<f64>,
    /// Set when the paired geometry is rotationally degenerate (e.g. one
    /// collinear cluster pair).
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignResult {
    /// Final CAV -> Ego transform.
    pub transform: Pose2,
    pub phase1_transform: Pose2,
    pub iterations: usize,
    /// Final value of the weighted objective.
    pub final_error: f64,
    /// Objective value per phase-2 iteration; non-increasing.
    pub objective_trace: Vec<f64>,
    /// Per-pair weights e^score_n.
    pub pair_weights: Vec<f64>,
    /// Background weight e^(1/N_v).
    pub background_weight: f64,
    pub low_confidence: bool,
}

/// Keep only density-supported background points (roadsides, buildings);
/// isolated returns from noise or multi-path are dropped.
pub fn filter_background(points: &[RadarPoint], cfg: &AlignConfig) -> Vec<Point2> {
    let scaled: Vec<[f64; 2]> = points
        .iter()
        .map(|p| [p.position.x / cfg.bg_eps, p.position.y / cfg.bg_eps])
        .collect();
    let labels = dbscan::<2>(&scaled, cfg.bg_min_pts);
    points
        .iter()
        .zip(&labels)
        .filter(|(_, l)| l.is_some())
        .map(|(p, _)| p.position)
        .collect()
}

/// Uniform-grid nearest-neighbor index over a fixed point set. Queries are
/// exact within `radius` (cell size = radius, 3x3 neighborhood searched).
pub struct NnGrid {
    cell: f64,
    map: HashMap<(i64, i64), Vec<u32>>,
    pts: Vec<Point2>,
}

impl NnGrid {
    pub fn build(pts: &[Point2], radius: f64) -> Self {
        let cell = radius.max(1e-6);
        let mut map: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in pts.iter().enumerate() {
            let key = ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
            map.entry(key).or_default().push(i as u32);
        }
        Self {
            cell,
            map,
            pts: pts.to_vec(),
        }
    }

    /// Nearest point with no distance bound, by expanding ring search.
    pub fn nearest_unbounded(&self, q: Point2) -> Option<(usize, f64)> {
        if self.pts.is_empty() {
            return None;
        }
        let cx = (q.x / self.cell).floor() as i64;
        let cy = (q.y / self.cell).floor() as i64;
        let mut best: Option<(usize, f64)> = None;
        let mut ring = 0i64;
        loop {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    if dx.abs() != ring && dy.abs() != ring {
                        continue; // interior cells already visited
                    }
                    if let Some(ids) = self.map.get(&(cx + dx, cy + dy)) {
                        for &i in ids {
                            let d = q.dist(self.pts[i as usize]);
                            if best.map_or(true, |(_, bd)| d < bd) {
                                best = Some((i as usize, d));
                            }
                        }
                    }
                }
            }
            // Any point in ring r+1 or beyond lies at least r*cell away from
            // the query; once the best found beats that bound, it is exact.
            if let Some((_, bd)) = best {
                if bd <= ring as f64 * self.cell {
                    return best;
                }
            }
            ring += 1;
        }
    }

    /// Nearest point within `max_d`, or None. Expanding ring search like
    /// `nearest_unbounded`, but gives up once no closer point can exist
    /// inside the bound, so the cell size can stay small (dense cells make
    /// each ring cheap) independently of the query radius.
    pub fn nearest_within(&self, q: Point2, max_d: f64) -> Option<(usize, f64)> {
        if self.pts.is_empty() {
            return None;
        }
        let cx = (q.x / self.cell).floor() as i64;
        let cy = (q.y / self.cell).floor() as i64;
        let max_ring = (max_d / self.cell).ceil() as i64 + 1;
        let mut best: Option<(usize, f64)> = None;
        for ring in 0..=max_ring {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    if dx.abs() != ring && dy.abs() != ring {
                        continue;
                    }
                    if let Some(ids) = self.map.get(&(cx + dx, cy + dy)) {
                        for &i in ids {
                            let d = q.dist(self.pts[i as usize]);
                            if best.map_or(true, |(_, bd)| d < bd) {
                                best = Some((i as usize, d));
                            }
                        }
                    }
                }
            }
            if let Some((_, bd)) = best {
                if bd <= ring as f64 * self.cell {
                    break;
                }
            }
        }
        best.filter(|(_, d)| *d <= max_d)
    }

    /// Nearest point within the build radius, or None.
    pub fn nearest(&self, q: Point2) -> Option<(usize, f64)> {
        let cx = (q.x / self.cell).floor() as i64;
        let cy = (q.y / self.cell).floor() as i64;
        let mut best: Option<(usize, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(ids) = self.map.get(&(cx + dx, cy + dy)) {
                    for &i in ids {
                        let d = q.dist(self.pts[i as usize]);
                        if best.map_or(true, |(_, bd)| d < bd) {
                            best = Some((i as usize, d));
                        }
                    }
                }
            }
        }
        best.filter(|(_, d)| *d <= self.cell)
    }
}

fn brute_nearest(q: Point2, pts: &[Point2]) -> Option<(usize, f64)> {
    pts.iter()
        .enumerate()
        .map(|(i, p)| (i, q.dist(*p)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

fn cluster_positions(c: &VehicleCluster) -> Vec<Point2> {
    c.points.iter().map(|p| p.position).collect()
}

/// Rotational degeneracy check: ratio of covariance eigenvalues of the
/// combined source points.
fn is_degenerate(points: &[Point2]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let dx = p.x - cx;
        let dy = p.y - cy;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
    let l1 = (tr + disc) * 0.5;
    let l2 = (tr - disc) * 0.5;
    l1 <= 0.0 || l2 / l1 < 1e-9
}

/// Phase 1: ICP constrained to the matched cluster pairs. Correspondences
/// for a CAV point are searched only inside its paired Ego cluster; the
/// iteration count is exactly min{L, N(D_max)}.
pub fn phase1_align(
    pairs: &[(VehicleCluster, VehicleCluster)],
    cfg: &AlignConfig,
) -> Result<Phase1Result, AlignError> {
    let enough = pairs.len() >= 2
        || (pairs.len() == 1 && pairs[0].0.points.len() >= 3 && pairs[0].1.points.len() >= 3);
    if !enough {
        return Err(AlignError::InsufficientPairs);
    }

    let ego_sets: Vec<Vec<Point2>> = pairs.iter().map(|(e, _)| cluster_positions(e)).collect();
    let cav_sets: Vec<Vec<Point2>> = pairs.iter().map(|(_, c)| cluster_positions(c)).collect();
    let all_cav: Vec<Point2> = cav_sets.iter().flatten().copied().collect();
    let low_confidence = is_degenerate(&all_cav);

    // Initial estimate from the paired centroids; a single pair pins only
    // the translation.
    let mut transform = if pairs.len() >= 2 {
        let src: Vec<Point2> = pairs.iter().map(|(_, c)| c.centroid).collect();
        let dst: Vec<Point2> = pairs.iter().map(|(e, _)| e.centroid).collect();
        let w = vec![1.0; pairs.len()];
        kabsch2(&src, &dst, &w).unwrap_or_else(|_| {
            Pose2::new(0.0, dst[0].x - src[0].x, dst[0].y - src[0].y)
        })
    } else {
        let (e, c) = &pairs[0];
        Pose2::new(0.0, e.centroid.x - c.centroid.x, e.centroid.y - c.centroid.y)
    };

    let cap = cfg.phase1_cap();
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..cap {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for (ego_pts, cav_pts) in ego_sets.iter().zip(&cav_sets) {
            for p in cav_pts {
                let moved = transform.apply(*p);
                if let Some((j, _)) = brute_nearest(moved, ego_pts) {
                    src.push(*p);
                    dst.push(ego_pts[j]);
                }
            }
        }
        if src.len() < 2 {
            break;
        }
        let w = vec![1.0; src.len()];
        transform = kabsch2(&src, &dst, &w)?;
        let mean_dist: f64 = src
            .iter()
            .zip(&dst)
            .map(|(s, d)| transform.apply(*s).dist(*d))
            .sum::<f64>()
            / src.len() as f64;
        iterations += 1;
        trace.push(mean_dist);
        if mean_dist <= cfg.d_max {
            break;
        }
    }

    Ok(Phase1Result {
        transform,
        iterations,
        distance_trace: trace,
        low_confidence,
    })
}

struct WeightedCorrs {
    src: Vec<Point2>,
    dst: Vec<Point2>,
    w: Vec<f64>,
}

/// Phase 2: continue from T0 with background constraints per the weighted
/// objective: sum_n w_n E_n(pairs) + w_g E_g(background), where each E is a
/// weighted mean squared correspondence distance, w_n = e^score_n and
/// w_g = e^(1/N_v).
pub fn phase2_align(
    pairs: &[(VehicleCluster, VehicleCluster)],
    bg_ego: &[Point2],
    bg_cav: &[Point2],
    t0: &Phase1Result,
    scores: &[f64],
    cfg: &AlignConfig,
) -> Result<AlignResult, AlignError> {
    assert_eq!(pairs.len(), scores.len());
    let n_v = pairs.len().max(1);
    let pair_weights: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
    let background_weight = (1.0 / n_v as f64).exp();

    let ego_sets: Vec<Vec<Point2>> = pairs.iter().map(|(e, _)| cluster_positions(e)).collect();
    let cav_sets: Vec<Vec<Point2>> = pairs.iter().map(|(_, c)| cluster_positions(c)).collect();
    // Small fixed cell: query cost then depends on local density, not on
    // the rejection radius (which the caller may relax for coarse passes).
    let bg_grid = NnGrid::build(bg_ego, cfg.nn_reject_radius.min(2.0));

    // Pair-constrained + free background correspondences at transform `t`,
    // with per-point weights normalizing each error term to a mean.
    let correspond = |t: &Pose2| -> (WeightedCorrs, f64) {
        let mut matches: Vec<(Point2, Point2, usize)> = Vec::new(); // (src, dst, term)
        // term index: 0..n_v are vehicle pairs, n_v is background
        for (n, (ego_pts, cav_pts)) in ego_sets.iter().zip(&cav_sets).enumerate() {
            for p in cav_pts {
                let moved = t.apply(*p);
                if let Some((j, d)) = brute_nearest(moved, ego_pts) {
                    if d <= cfg.nn_reject_radius {
                        matches.push((*p, ego_pts[j], n));
                    }
                }
            }
        }
        for p in bg_cav {
            let moved = t.apply(*p);
            if let Some((j, _)) = bg_grid.nearest_within(moved, cfg.nn_reject_radius) {
                matches.push((*p, bg_ego[j], n_v));
            }
        }
        let mut counts = vec![0usize; n_v + 1];
        for (_, _, term) in &matches {
            counts[*term] += 1;
        }
        let term_weight = |term: usize| -> f64 {
            let base = if term == n_v {
                background_weight
            } else {
                pair_weights[term]
            };
            base / counts[term].max(1) as f64
        };
        let mut out = WeightedCorrs {
            src: Vec::with_capacity(matches.len()),
            dst: Vec::with_capacity(matches.len()),
            w: Vec::with_capacity(matches.len()),
        };
        let mut objective = 0.0;
        for (s, d, term) in matches {
            let w = term_weight(term);
            let dist = t.apply(s).dist(d);
            objective += w * dist * dist;
            out.src.push(s);
            out.dst.push(d);
            out.w.push(w);
        }
        (out, objective)
    };

    let mut transform = t0.transform;
    let mut best = (transform, f64::INFINITY);
    let mut trace: Vec<f64> = Vec::new();
    for _ in 0..cfg.max_total_iters {
        let (corrs, objective) = correspond(&transform);
        if corrs.src.is_empty() {
            if trace.is_empty() {
                return Err(AlignError::NoCorrespondences);
            }
            break;
        }
        // Keep the recorded trace non-increasing: the Kabsch step is the
        // exact minimizer for fixed correspondences, but re-matching can
        // admit previously rejected points and raise the value.
        if let Some(&prev) = trace.last() {
            if objective > prev {
                break;
            }
            if prev - objective < 1e-6 {
                trace.push(objective);
                if objective < best.1 {
                    best = (transform, objective);
                }
                break;
            }
        }
        trace.push(objective);
        if objective < best.1 {
            best = (transform, objective);
        }
        match kabsch2(&corrs.src, &corrs.dst, &corrs.w) {
            Ok(t) => transform = t,
            Err(_) => break,
        }
    }

    Ok(AlignResult {
        transform: best.0,
        phase1_transform: t0.transform,
        iterations: trace.len(),
        final_error: best.1,
        objective_trace: trace,
        pair_weights,
        background_weight,
        low_confidence: t0.low_confidence,
    })
}

/// Plain point-to-point ICP from identity; the ablation baseline. No pair
/// constraints, no weighting, unbounded nearest-neighbor matching.
pub fn icp_baseline(src: &[Point2], dst: &[Point2], cfg: &AlignConfig) -> Result<Pose2, AlignError> {
    if src.is_empty() || dst.is_empty() {
        return Err(AlignError::NoCorrespondences);
    }
    let grid = NnGrid::build(dst, 2.0);
    let mut transform = Pose2::identity();
    let mut prev_mean = f64::INFINITY;
    for _ in 0..cfg.max_total_iters {
        let mut s_pts = Vec::with_capacity(src.len());
        let mut d_pts = Vec::with_capacity(src.len());
        let mut mean = 0.0;
        for p in src {
            let moved = transform.apply(*p);
            if let Some((j, d)) = grid.nearest_unbounded(moved) {
                s_pts.push(*p);
                d_pts.push(dst[j]);
                mean += d;
            }
        }
        if s_pts.len() < 2 {
            return Err(AlignError::NoCorrespondences);
        }
        mean /= s_pts.len() as f64;
        let w = vec![1.0; s_pts.len()];
        match kabsch2(&s_pts, &d_pts, &w) {
            Ok(t) => transform = t,
            Err(_) => break,
        }
        if (prev_mean - mean).abs() < 1e-9 {
            break;
        }
        prev_mean = mean;
    }
    Ok(transform)
}
