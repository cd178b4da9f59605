//! Small fixed-dimension DBSCAN used by the separation filter (position +
//! Doppler space) and the background outlier filter (position only).
//!
//! Callers pre-scale each axis so the neighborhood is the unit ball; a grid
//! index keeps the neighbor queries near-linear for the frame sizes we see.

use std::collections::HashMap;

const NOISE: u32 = u32::MAX;
const UNVISITED: u32 = u32::MAX - 1;

/// Density clustering over `points` (already scaled to unit epsilon).
/// Returns per-point cluster ids, `None` for noise.
pub fn dbscan<const D: usize>(points: &[[f64; D]], min_pts: usize) -> Vec<Option<u32>> {
    let n = points.len();
    let mut labels = vec![UNVISITED; n];
    if n == 0 {
        return Vec::new();
    }

    // Cell size 1.0: all unit-ball neighbors live in the 3^D adjacent cells.
    let mut grid: HashMap<[i64; D], Vec<u32>> = HashMap::new();
    let cell_of = |p: &[f64; D]| {
        let mut c = [0i64; D];
        for (k, v) in p.iter().enumerate() {
            c[k] = v.floor() as i64;
        }
        c
    };
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell_of(p)).or_default().push(i as u32);
    }

    let neighbors = |i: usize, out: &mut Vec<u32>| {
        out.clear();
        let p = &points[i];
        let base = cell_of(p);
        let mut offsets = vec![[0i64; D]];
        for k in 0..D {
            let mut next = Vec::with_capacity(offsets.len() * 3);
            for off in &offsets {
                for d in -1..=1 {
                    let mut o = *off;
                    o[k] = d;
                    next.push(o);
                }
            }
            offsets = next;
        }
        for off in offsets {
            let mut cell = base;
            for k in 0..D {
                cell[k] += off[k];
            }
            if let Some(ids) = grid.get(&cell) {
                for &j in ids {
                    let q = &points[j as usize];
                    let mut d2 = 0.0;
                    for k in 0..D {
                        let dk = p[k] - q[k];
                        d2 += dk * dk;
                    }
                    if d2 <= 1.0 {
                        out.push(j);
                    }
                }
            }
        }
    };

    let mut cluster = 0u32;
    let mut nbuf = Vec::new();
    let mut stack = Vec::new();
    for i in 0..n {
        if labels[i] != UNVISITED {
            continue;
        }
        neighbors(i, &mut nbuf);
        if nbuf.len() < min_pts {
            labels[i] = NOISE;
            continue;
        }
        labels[i] = cluster;
        stack.clear();
        stack.extend(nbuf.iter().copied());
        while let Some(j) = stack.pop() {
            let j = j as usize;
            if labels[j] == NOISE {
                labels[j] = cluster; // border point
            }
            if labels[j] != UNVISITED {
                continue;
            }
            labels[j] = cluster;
            neighbors(j, &mut nbuf);
            if nbuf.len() >= min_pts {
                stack.extend(nbuf.iter().copied());
            }
        }
        cluster += 1;
    }

    labels
        .into_iter()
        .map(|l| if l == NOISE { None } else { Some(l) })
        .collect()
}
