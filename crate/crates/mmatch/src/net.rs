//! Cluster matching across the two views with a small message-passing
//! network.
//!
//! Each view contributes a complete local graph over its vehicle clusters
//! (nodes carry the camera appearance descriptor, edges carry relative
//! geometry); every ego/CAV cluster pair adds a cross edge, initialized to
//! zero. Alternating edge/node updates run for a fixed number of steps;
//! a classifier head scores each cross edge at every step and the losses
//! are summed (deep supervision), so early steps are trained directly.
//!
//! The backward pass runs on a tape recorded during the forward pass; the
//! only primitives are linear layers, ReLU, concatenation, mean pooling
//! and convex blending, which keeps gradients easy to audit against
//! finite differences.

use crate::geom::{wrap_angle, Point2};
use crate::sep::ProcessedFrame;
use crate::sim::DESCRIPTOR_DIM;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

pub const NODE_DIM: usize = 32;
pub const EDGE_DIM: usize = 16;
pub const EDGE_FEAT_DIM: usize = 4;
const HIDDEN: usize = 64;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Message-passing steps.
    pub steps: usize,
    /// Blend factor for embedding updates: new = eta * update + (1-eta) * old.
    pub eta: f64,
    /// Distance normalizer for edge features, meters.
    pub d_max: f64,
    /// Cross-edge score threshold for declaring a match.
    pub match_threshold: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            eta: 0.5,
            d_max: 80.0,
            match_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            seed: 7,
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Vec<f64>, // row-major, out_dim x in_dim
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (2.0 / in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            w,
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut y = self.b.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            *yo += row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            l1: Linear::init(in_dim, HIDDEN, rng),
            l2: Linear::init(HIDDEN, out_dim, rng),
        }
    }

    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            l1: Linear::zeros(in_dim, HIDDEN),
            l2: Linear::zeros(HIDDEN, out_dim),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlpId {
    EncV,
    EncE,
    V2eLocal,
    V2eCross,
    E2vLocal,
    E2vCross,
    NodeUpdate,
    Classifier,
}

const ALL_MLPS: [MlpId; 8] = [
    MlpId::EncV,
    MlpId::EncE,
    MlpId::V2eLocal,
    MlpId::V2eCross,
    MlpId::E2vLocal,
    MlpId::E2vCross,
    MlpId::NodeUpdate,
    MlpId::Classifier,
];

#[derive(Debug, Clone, PartialEq)]
pub struct RmNetParams {
    pub enc_v: Mlp,
    pub enc_e: Mlp,
    pub v2e_local: Mlp,
    pub v2e_cross: Mlp,
    pub e2v_local: Mlp,
    pub e2v_cross: Mlp,
    pub node_update: Mlp,
    pub classifier: Mlp,
}

/// (mlp name, input dim, output dim) for every block, in serialization order.
const SCHEMA: [(&str, usize, usize); 8] = [
    ("enc_v", DESCRIPTOR_DIM, NODE_DIM),
    ("enc_e", EDGE_FEAT_DIM, EDGE_DIM),
    ("v2e_local", 2 * NODE_DIM + EDGE_DIM, EDGE_DIM),
    ("v2e_cross", 2 * NODE_DIM + EDGE_DIM, EDGE_DIM),
    ("e2v_local", NODE_DIM + EDGE_DIM, NODE_DIM),
    ("e2v_cross", NODE_DIM + EDGE_DIM, NODE_DIM),
    ("node_update", 2 * NODE_DIM, NODE_DIM),
    ("classifier", EDGE_DIM, 1),
];

impl RmNetParams {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut it = SCHEMA.iter();
        let mut next = |rng: &mut ChaCha8Rng| {
            let (_, i, o) = it.next().unwrap();
            Mlp::init(*i, *o, rng)
        };
        Self {
            enc_v: next(&mut rng),
            enc_e: next(&mut rng),
            v2e_local: next(&mut rng),
            v2e_cross: next(&mut rng),
            e2v_local: next(&mut rng),
            e2v_cross: next(&mut rng),
            node_update: next(&mut rng),
            classifier: next(&mut rng),
        }
    }

    pub fn zeros_like() -> Self {
        let m = |i: usize| Mlp::zeros(SCHEMA[i].1, SCHEMA[i].2);
        Self {
            enc_v: m(0),
            enc_e: m(1),
            v2e_local: m(2),
            v2e_cross: m(3),
            e2v_local: m(4),
            e2v_cross: m(5),
            node_update: m(6),
            classifier: m(7),
        }
    }

    pub fn get(&self, id: MlpId) -> &Mlp {
        match id {
            MlpId::EncV => &self.enc_v,
            MlpId::EncE => &self.enc_e,
            MlpId::V2eLocal => &self.v2e_local,
            MlpId::V2eCross => &self.v2e_cross,
            MlpId::E2vLocal => &self.e2v_local,
            MlpId::E2vCross => &self.e2v_cross,
            MlpId::NodeUpdate => &self.node_update,
            MlpId::Classifier => &self.classifier,
        }
    }

    fn get_mut(&mut self, id: MlpId) -> &mut Mlp {
        match id {
            MlpId::EncV => &mut self.enc_v,
            MlpId::EncE => &mut self.enc_e,
            MlpId::V2eLocal => &mut self.v2e_local,
            MlpId::V2eCross => &mut self.v2e_cross,
            MlpId::E2vLocal => &mut self.e2v_local,
            MlpId::E2vCross => &mut self.e2v_cross,
            MlpId::NodeUpdate => &mut self.node_update,
            MlpId::Classifier => &mut self.classifier,
        }
    }

    /// Every tensor in a stable order, as (name, rows, cols, data).
    pub fn tensors(&self) -> Vec<(String, usize, usize, &Vec<f64>)> {
        let mut out = Vec::new();
        for (id, (name, _, _)) in ALL_MLPS.iter().zip(&SCHEMA) {
            let m = self.get(*id);
            for (suffix, l) in [("l1", &m.l1), ("l2", &m.l2)] {
                out.push((format!("{name}.{suffix}.w"), l.out_dim, l.in_dim, &l.w));
                out.push((format!("{name}.{suffix}.b"), l.out_dim, 1, &l.b));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mlps = [
            &mut self.enc_v,
            &mut self.enc_e,
            &mut self.v2e_local,
            &mut self.v2e_cross,
            &mut self.e2v_local,
            &mut self.e2v_cross,
            &mut self.node_update,
            &mut self.classifier,
        ];
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for m in mlps {
            out.push(&mut m.l1.w);
            out.push(&mut m.l1.b);
            out.push(&mut m.l2.w);
            out.push(&mut m.l2.b);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, _, d)| d.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
// Layout (all integers little-endian):
//   magic   b"RMNET\0"           6 bytes
//   version u16                  currently 1
//   count   u32                  number of tensors
//   then per tensor:
//     name_len u16, name bytes (utf-8), rows u32, cols u32
//   then per tensor, in the same order:
//     rows*cols f64 values, row-major, little-endian

const CKPT_MAGIC: &[u8; 6] = b"RMNET\0";
const CKPT_VERSION: u16 = 1;

pub fn save_checkpoint<W: Write>(params: &RmNetParams, mut w: W) -> Result<(), NetError> {
    let tensors = params.tensors();
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, rows, cols, _) in &tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(*rows as u32).to_le_bytes())?;
        w.write_all(&(*cols as u32).to_le_bytes())?;
    }
    for (_, _, _, data) in &tensors {
        for v in data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut r: R) -> Result<RmNetParams, NetError> {
    let bad = |m: &str| NetError::BadCheckpoint(m.to_string());
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(bad("wrong magic"));
    }
    let mut u16b = [0u8; 2];
    r.read_exact(&mut u16b)?;
    if u16::from_le_bytes(u16b) != CKPT_VERSION {
        return Err(bad("unsupported version"));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let count = u32::from_le_bytes(u32b) as usize;

    let mut params = RmNetParams::zeros_like();
    let expected = params.tensors();
    if count != expected.len() {
        return Err(bad("tensor count mismatch"));
    }
    let mut shapes = Vec::with_capacity(count);
    for (name, rows, cols, _) in &expected {
        r.read_exact(&mut u16b)?;
        let nlen = u16::from_le_bytes(u16b) as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf)?;
        let fname = String::from_utf8(nbuf).map_err(|_| bad("tensor name not utf-8"))?;
        r.read_exact(&mut u32b)?;
        let frows = u32::from_le_bytes(u32b) as usize;
        r.read_exact(&mut u32b)?;
        let fcols = u32::from_le_bytes(u32b) as usize;
        if fname != *name || frows != *rows || fcols != *cols {
            return Err(NetError::BadCheckpoint(format!(
                "tensor {fname} {frows}x{fcols}, expected {name} {rows}x{cols}"
            )));
        }
        shapes.push(frows * fcols);
    }
    drop(expected);
    let mut buf8 = [0u8; 8];
    for (dst, n) in params.tensors_mut().into_iter().zip(shapes) {
        debug_assert_eq!(dst.len(), n);
        for v in dst.iter_mut() {
            r.read_exact(&mut buf8)?;
            *v = f64::from_le_bytes(buf8);
        }
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Graph construction

#[derive(Debug, Clone, PartialEq)]
pub struct MatchGraph {
    /// Per-view node inputs (appearance descriptors).
    pub ego_desc: Vec<Vec<f64>>,
    pub cav_desc: Vec<Vec<f64>>,
    /// Local edges per view: canonical node pair + geometric feature vector.
    pub ego_edges: Vec<(usize, usize, [f64; EDGE_FEAT_DIM])>,
    pub cav_edges: Vec<(usize, usize, [f64; EDGE_FEAT_DIM])>,
    /// Cross edges: every (ego, cav) node pair.
    pub cross: Vec<(usize, usize)>,
}

fn folded_azimuth(p: Point2) -> f64 {
    // Fold to (0, pi] so a left/right-symmetric relabeling of the sensor
    // frame does not change the feature; floor away from zero so the log
    // ratio stays finite.
    let a = wrap_angle(p.azimuth()).abs();
    a.max(1e-3)
}

/// Relative geometry for one local edge, invariant to which endpoint is
/// listed first because callers order endpoints canonically.
fn edge_features(a: Point2, b: Point2, d_max: f64) -> [f64; EDGE_FEAT_DIM] {
    let d = a.dist(b);
    let bearing = wrap_angle((b.y - a.y).atan2(b.x - a.x));
    // Fold the centroid-to-centroid bearing to [0, pi): flipping the edge
    // direction shifts it by pi, which the fold removes.
    let mut theta = bearing;
    if theta < 0.0 {
        theta += std::f64::consts::PI;
    }
    let (ra, rb) = (a.norm().max(1e-3), b.norm().max(1e-3));
    let (ta, tb) = (folded_azimuth(a), folded_azimuth(b));
    [
        d / d_max,
        theta / std::f64::consts::PI,
        (ra / rb).ln(),
        (ta / tb).ln(),
    ]
}

fn local_edges(centroids: &[Point2], d_max: f64) -> Vec<(usize, usize, [f64; EDGE_FEAT_DIM])> {
    let mut out = Vec::new();
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            // Canonical endpoint order: smaller range first, ties broken by
            // azimuth. Keeps the feature vector independent of node labels.
            let (a, b) = (centroids[i], centroids[j]);
            let swap = (a.norm(), folded_azimuth(a)) > (b.norm(), folded_azimuth(b));
            let (p, q, u, v) = if swap { (b, a, j, i) } else { (a, b, i, j) };
            out.push((u, v, edge_features(p, q, d_max)));
        }
    }
    out
}

pub fn build_graph(ego: &ProcessedFrame, cav: &ProcessedFrame, cfg: &NetConfig) -> MatchGraph {
    let desc = |f: &ProcessedFrame| -> Vec<Vec<f64>> {
        f.clusters
            .iter()
            .map(|c| f.detections[c.detection_index].descriptor.clone())
            .collect()
    };
    let cents = |f: &ProcessedFrame| -> Vec<Point2> { f.clusters.iter().map(|c| c.centroid).collect() };
    let ego_c = cents(ego);
    let cav_c = cents(cav);
    let mut cross = Vec::new();
    for i in 0..ego_c.len() {
        for j in 0..cav_c.len() {
            cross.push((i, j));
        }
    }
    MatchGraph {
        ego_desc: desc(ego),
        cav_desc: desc(cav),
        ego_edges: local_edges(&ego_c, cfg.d_max),
        cav_edges: local_edges(&cav_c, cfg.d_max),
        cross,
    }
}

// ---------------------------------------------------------------------------
// Tape autograd

enum Op {
    Input,
    Zeros,
    Linear { mlp: MlpId, layer: u8, x: usize },
    Relu { x: usize },
    Concat(Vec<usize>),
    Mean(Vec<usize>),
    Blend { new: usize, old: usize, eta: f64 },
}

struct Tape<'p> {
    p: &'p RmNetParams,
    vals: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

impl<'p> Tape<'p> {
    fn new(p: &'p RmNetParams) -> Self {
        Self {
            p,
            vals: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, v: Vec<f64>, op: Op) -> usize {
        self.vals.push(v);
        self.ops.push(op);
        self.vals.len() - 1
    }

    fn input(&mut self, v: Vec<f64>) -> usize {
        self.push(v, Op::Input)
    }

    fn zeros(&mut self, dim: usize) -> usize {
        self.push(vec![0.0; dim], Op::Zeros)
    }

    fn linear(&mut self, mlp: MlpId, layer: u8, x: usize) -> usize {
        let l = if layer == 0 {
            &self.p.get(mlp).l1
        } else {
            &self.p.get(mlp).l2
        };
        let y = l.apply(&self.vals[x]);
        self.push(y, Op::Linear { mlp, layer, x })
    }

    fn relu(&mut self, x: usize) -> usize {
        let y = self.vals[x].iter().map(|v| v.max(0.0)).collect();
        self.push(y, Op::Relu { x })
    }

    fn mlp(&mut self, mlp: MlpId, x: usize) -> usize {
        let h = self.linear(mlp, 0, x);
        let h = self.relu(h);
        self.linear(mlp, 1, h)
    }

    fn concat(&mut self, xs: &[usize]) -> usize {
        let mut v = Vec::new();
        for &x in xs {
            v.extend_from_slice(&self.vals[x]);
        }
        self.push(v, Op::Concat(xs.to_vec()))
    }

    /// Elementwise mean of same-dim values; empty input pools to zeros.
    fn mean(&mut self, xs: &[usize], dim: usize) -> usize {
        if xs.is_empty() {
            return self.zeros(dim);
        }
        let mut v = vec![0.0; dim];
        for &x in xs {
            for (a, b) in v.iter_mut().zip(&self.vals[x]) {
                *a += b;
            }
        }
        let n = xs.len() as f64;
        v.iter_mut().for_each(|a| *a /= n);
        self.push(v, Op::Mean(xs.to_vec()))
    }

    fn blend(&mut self, new: usize, old: usize, eta: f64) -> usize {
        let v = self.vals[new]
            .iter()
            .zip(&self.vals[old])
            .map(|(n, o)| eta * n + (1.0 - eta) * o)
            .collect();
        self.push(v, Op::Blend { new, old, eta })
    }

    /// Reverse pass: seeds are (value id, upstream gradient); parameter
    /// gradients accumulate into `grads` (same shape as the parameters).
    fn backward(&self, seeds: &[(usize, Vec<f64>)], grads: &mut RmNetParams) {
        let mut g: Vec<Vec<f64>> = self.vals.iter().map(|v| vec![0.0; v.len()]).collect();
        for (id, seed) in seeds {
            for (a, b) in g[*id].iter_mut().zip(seed) {
                *a += b;
            }
        }
        for id in (0..self.ops.len()).rev() {
            if g[id].iter().all(|v| *v == 0.0) {
                continue;
            }
            match &self.ops[id] {
                Op::Input | Op::Zeros => {}
                Op::Linear { mlp, layer, x } => {
                    let l = if *layer == 0 {
                        &self.p.get(*mlp).l1
                    } else {
                        &self.p.get(*mlp).l2
                    };
                    let gl = if *layer == 0 {
                        &mut grads.get_mut(*mlp).l1
                    } else {
                        &mut grads.get_mut(*mlp).l2
                    };
                    let gy = g[id].clone();
                    let xv = &self.vals[*x];
                    for (o, go) in gy.iter().enumerate() {
                        gl.b[o] += go;
                        let row = &mut gl.w[o * l.in_dim..(o + 1) * l.in_dim];
                        for (wi, xi) in row.iter_mut().zip(xv) {
                            *wi += go * xi;
                        }
                    }
                    let gx = &mut g[*x];
                    for (o, go) in gy.iter().enumerate() {
                        let row = &l.w[o * l.in_dim..(o + 1) * l.in_dim];
                        for (gxi, wi) in gx.iter_mut().zip(row) {
                            *gxi += go * wi;
                        }
                    }
                }
                Op::Relu { x } => {
                    let gy = g[id].clone();
                    for ((gx, y), gy) in g[*x].iter_mut().zip(&self.vals[id]).zip(gy) {
                        if *y > 0.0 {
                            *gx += gy;
                        }
                    }
                }
                Op::Concat(xs) => {
                    let gy = g[id].clone();
                    let mut off = 0;
                    for &x in xs {
                        let n = self.vals[x].len();
                        for (gx, gyv) in g[x].iter_mut().zip(&gy[off..off + n]) {
                            *gx += gyv;
                        }
                        off += n;
                    }
                }
                Op::Mean(xs) => {
                    let gy = g[id].clone();
                    let n = xs.len() as f64;
                    for &x in xs {
                        for (gx, gyv) in g[x].iter_mut().zip(&gy) {
                            *gx += gyv / n;
                        }
                    }
                }
                Op::Blend { new, old, eta } => {
                    let gy = g[id].clone();
                    for (gn, gyv) in g[*new].iter_mut().zip(&gy) {
                        *gn += eta * gyv;
                    }
                    for (go, gyv) in g[*old].iter_mut().zip(&gy) {
                        *go += (1.0 - eta) * gyv;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward pass

struct ForwardOut<'p> {
    tape: Tape<'p>,
    /// Classifier logit value ids per step, indexed [step][cross edge].
    step_logits: Vec<Vec<usize>>,
}

fn forward<'p>(p: &'p RmNetParams, g: &MatchGraph, cfg: &NetConfig) -> ForwardOut<'p> {
    let mut t = Tape::new(p);

    let enc_nodes = |t: &mut Tape<'p>, descs: &[Vec<f64>]| -> Vec<usize> {
        descs
            .iter()
            .map(|d| {
                let x = t.input(d.clone());
                t.mlp(MlpId::EncV, x)
            })
            .collect()
    };
    let mut ego_h = enc_nodes(&mut t, &g.ego_desc);
    let mut cav_h = enc_nodes(&mut t, &g.cav_desc);

    let enc_edges = |t: &mut Tape<'p>, edges: &[(usize, usize, [f64; EDGE_FEAT_DIM])]| -> Vec<usize> {
        edges
            .iter()
            .map(|(_, _, f)| {
                let x = t.input(f.to_vec());
                t.mlp(MlpId::EncE, x)
            })
            .collect()
    };
    let mut ego_e = enc_edges(&mut t, &g.ego_edges);
    let mut cav_e = enc_edges(&mut t, &g.cav_edges);
    let mut cross_e: Vec<usize> = g.cross.iter().map(|_| t.zeros(EDGE_DIM)).collect();

    let mut step_logits = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        // Vehicle-to-edge: refresh every edge from its endpoints.
        let upd_local = |t: &mut Tape<'p>,
                         h: &[usize],
                         edges: &[(usize, usize, [f64; EDGE_FEAT_DIM])],
                         e: &[usize]| {
            edges
                .iter()
                .zip(e)
                .map(|((i, j, _), &old)| {
                    let x = t.concat(&[h[*i], h[*j], old]);
                    let new = t.mlp(MlpId::V2eLocal, x);
                    t.blend(new, old, cfg.eta)
                })
                .collect::<Vec<_>>()
        };
        let new_ego_e = upd_local(&mut t, &ego_h, &g.ego_edges, &ego_e);
        let new_cav_e = upd_local(&mut t, &cav_h, &g.cav_edges, &cav_e);
        let new_cross_e: Vec<usize> = g
            .cross
            .iter()
            .zip(&cross_e)
            .map(|((i, j), &old)| {
                let x = t.concat(&[ego_h[*i], cav_h[*j], old]);
                let new = t.mlp(MlpId::V2eCross, x);
                t.blend(new, old, cfg.eta)
            })
            .collect();
        ego_e = new_ego_e;
        cav_e = new_cav_e;
        cross_e = new_cross_e;

        // Edge-to-vehicle: pool incident-edge messages, then update nodes.
        let update_nodes = |t: &mut Tape<'p>,
                            h: &[usize],
                            other_h: &[usize],
                            edges: &[(usize, usize, [f64; EDGE_FEAT_DIM])],
                            e: &[usize],
                            cross_of: &dyn Fn(usize) -> Vec<(usize, usize)>| {
            (0..h.len())
                .map(|n| {
                    let mut local_msgs = Vec::new();
                    for ((i, j, _), &eid) in edges.iter().zip(e) {
                        let other = if *i == n {
                            *j
                        } else if *j == n {
                            *i
                        } else {
                            continue;
                        };
                        let x = t.concat(&[h[other], eid]);
                        local_msgs.push(t.mlp(MlpId::E2vLocal, x));
                    }
                    let m_local = t.mean(&local_msgs, NODE_DIM);
                    let mut cross_msgs = Vec::new();
                    for (peer, eid) in cross_of(n) {
                        let x = t.concat(&[other_h[peer], eid]);
                        cross_msgs.push(t.mlp(MlpId::E2vCross, x));
                    }
                    let m_cross = t.mean(&cross_msgs, NODE_DIM);
                    let x = t.concat(&[m_local, m_cross]);
                    let new = t.mlp(MlpId::NodeUpdate, x);
                    t.blend(new, h[n], cfg.eta)
                })
                .collect::<Vec<_>>()
        };
        let cross_snapshot = cross_e.clone();
        let cross_for_ego = |n: usize| -> Vec<(usize, usize)> {
            g.cross
                .iter()
                .zip(&cross_snapshot)
                .filter(|((i, _), _)| *i == n)
                .map(|((_, j), &eid)| (*j, eid))
                .collect()
        };
        let cross_for_cav = |n: usize| -> Vec<(usize, usize)> {
            g.cross
                .iter()
                .zip(&cross_snapshot)
                .filter(|((_, j), _)| *j == n)
                .map(|((i, _), &eid)| (*i, eid))
                .collect()
        };
        let new_ego_h = update_nodes(&mut t, &ego_h, &cav_h, &g.ego_edges, &ego_e, &cross_for_ego);
        let new_cav_h = update_nodes(&mut t, &cav_h, &ego_h, &g.cav_edges, &cav_e, &cross_for_cav);
        ego_h = new_ego_h;
        cav_h = new_cav_h;

        let logits: Vec<usize> = cross_e.iter().map(|&e| t.mlp(MlpId::Classifier, e)).collect();
        step_logits.push(logits);
    }

    ForwardOut {
        tape: t,
        step_logits,
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-step, class-weighted binary cross-entropy on the cross edges; the
/// positive class is up-weighted by #neg/#pos. Returns (loss, per-logit
/// gradient seeds).
fn bce_loss(logits: &[f64], labels: &[bool]) -> (f64, Vec<f64>) {
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    let omega = if pos == 0 { 1.0 } else { neg as f64 / pos as f64 };
    let m = labels.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let w = if y { omega } else { 1.0 };
        let p = sigmoid(z).clamp(1e-12, 1.0 - 1e-12);
        let target = if y { 1.0 } else { 0.0 };
        loss -= w * (target * p.ln() + (1.0 - target) * (1.0 - p).ln());
        grad.push(w * (sigmoid(z) - target) / m);
    }
    (loss / m, grad)
}

// ---------------------------------------------------------------------------
// Inference

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Sigmoid score per cross edge, last message-passing step.
    pub scores: Vec<f64>,
    /// One-to-one accepted matches: (ego cluster, cav cluster, score).
    pub matches: Vec<(usize, usize, f64)>,
}

/// Score all cross edges and commit greedy one-to-one matches above the
/// threshold, highest score first.
pub fn classify_edges(p: &RmNetParams, g: &MatchGraph, cfg: &NetConfig) -> MatchResult {
    if g.cross.is_empty() {
        return MatchResult {
            scores: Vec::new(),
            matches: Vec::new(),
        };
    }
    let out = forward(p, g, cfg);
    let last = out.step_logits.last().unwrap();
    let scores: Vec<f64> = last.iter().map(|&id| sigmoid(out.tape.vals[id][0])).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let n_ego = g.ego_desc.len();
    let n_cav = g.cav_desc.len();
    let mut ego_used = vec![false; n_ego];
    let mut cav_used = vec![false; n_cav];
    let mut matches = Vec::new();
    for k in order {
        if scores[k] < cfg.match_threshold {
            break;
        }
        let (i, j) = g.cross[k];
        if !ego_used[i] && !cav_used[j] {
            ego_used[i] = true;
            cav_used[j] = true;
            matches.push((i, j, scores[k]));
        }
    }
    MatchResult { scores, matches }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub graph: MatchGraph,
    /// Truth label per cross edge (same order as graph.cross).
    pub labels: Vec<bool>,
}

/// Loss and parameter gradients for one example (deep supervision: the
/// per-step losses are summed).
pub fn example_grads(p: &RmNetParams, ex: &TrainExample, cfg: &NetConfig) -> (f64, RmNetParams) {
    let out = forward(p, &ex.graph, cfg);
    let mut total = 0.0;
    let mut seeds = Vec::new();
    for step in &out.step_logits {
        let logits: Vec<f64> = step.iter().map(|&id| out.tape.vals[id][0]).collect();
        let (loss, grad) = bce_loss(&logits, &ex.labels);
        total += loss;
        for (&id, gz) in step.iter().zip(grad) {
            seeds.push((id, vec![gz]));
        }
    }
    let mut grads = RmNetParams::zeros_like();
    out.tape.backward(&seeds, &mut grads);
    (total, grads)
}

/// Random orthogonal matrix (row-major, dim x dim) by Gram-Schmidt on a
/// Gaussian matrix.
fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while q.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &q {
            let d: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(b).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        q.push(v);
    }
    q.into_iter().flatten().collect()
}

fn rotate_descs(descs: &[Vec<f64>], rot: &[f64], dim: usize) -> Vec<Vec<f64>> {
    descs
        .iter()
        .map(|d| {
            (0..dim)
                .map(|r| (0..dim).map(|c| rot[r * dim + c] * d[c]).sum())
                .collect()
        })
        .collect()
}

/// Adam with per-example updates; example order is reshuffled each epoch
/// from the training seed. Each presentation applies a fresh random rotation
/// of descriptor space to both views: the match labels only depend on
/// relative descriptor geometry, so this augmentation forces the network to
/// learn that invariant instead of memorizing the training descriptors'
/// absolute directions. Returns mean loss per epoch.
pub fn train(
    params: &mut RmNetParams,
    data: &[TrainExample],
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
) -> Vec<f64> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let n = params.num_params();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut step = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(train_cfg.epochs);
    for _ in 0..train_cfg.epochs {
        // Fisher-Yates reshuffle.
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let ex = &data[idx];
            if ex.graph.cross.is_empty() {
                continue;
            }
            let dim = ex.graph.ego_desc.first().map_or(0, Vec::len);
            let rot = random_rotation(dim, &mut rng);
            let aug = TrainExample {
                graph: MatchGraph {
                    ego_desc: rotate_descs(&ex.graph.ego_desc, &rot, dim),
                    cav_desc: rotate_descs(&ex.graph.cav_desc, &rot, dim),
                    ego_edges: ex.graph.ego_edges.clone(),
                    cav_edges: ex.graph.cav_edges.clone(),
                    cross: ex.graph.cross.clone(),
                },
                labels: ex.labels.clone(),
            };
            let (loss, grads) = example_grads(params, &aug, net_cfg);
            epoch_loss += loss;
            step += 1;
            let lr_t = train_cfg.learning_rate * (1.0 - B2.powi(step as i32)).sqrt()
                / (1.0 - B1.powi(step as i32));
            let mut off = 0;
            let gflat: Vec<&Vec<f64>> = grads.tensors().into_iter().map(|(_, _, _, d)| d).collect();
            let mut gi = gflat.into_iter();
            for dst in params.tensors_mut() {
                let gs = gi.next().unwrap();
                for (w, g) in dst.iter_mut().zip(gs) {
                    m[off] = B1 * m[off] + (1.0 - B1) * g;
                    v[off] = B2 * v[off] + (1.0 - B2) * g * g;
                    *w -= lr_t * m[off] / (v[off].sqrt() + EPS);
                    off += 1;
                }
            }
        }
        history.push(epoch_loss / data.len().max(1) as f64);
    }
    history
}

/// F1 of predicted matches against the positive cross-edge labels.
pub fn match_f1(result: &MatchResult, graph: &MatchGraph, labels: &[bool]) -> f64 {
    let truth: std::collections::HashSet<(usize, usize)> = graph
        .cross
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l)
        .map(|(p, _)| *p)
        .collect();
    let predicted: std::collections::HashSet<(usize, usize)> =
        result.matches.iter().map(|(i, j, _)| (*i, *j)).collect();
    let tp = predicted.intersection(&truth).count() as f64;
    let fp = predicted.len() as f64 - tp;
    let fnn = truth.len() as f64 - tp;
    if tp == 0.0 {
        return if truth.is_empty() && predicted.is_empty() {
            1.0
        } else {
            0.0
        };
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fnn);
    2.0 * precision * recall / (precision + recall)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sep::{separate_frame, SepConfig};
    use crate::sim::{
        generate_scene, make_frame_pair, DirectionMode, RoadType, ScenarioSpec, SimConfig, Traffic,
    };

    fn toy_graph(seed: u64) -> TrainExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut desc = || -> Vec<f64> {
            (0..DESCRIPTOR_DIM)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let d0 = desc();
        let d1 = desc();
        let cents_ego = [Point2::new(10.0, 2.0), Point2::new(25.0, -3.0)];
        let cents_cav = [Point2::new(8.0, 1.0), Point2::new(22.0, -4.0)];
        let cfg = NetConfig::default();
        let graph = MatchGraph {
            ego_desc: vec![d0.clone(), d1.clone()],
            cav_desc: vec![d0, d1],
            ego_edges: local_edges(&cents_ego, cfg.d_max),
            cav_edges: local_edges(&cents_cav, cfg.d_max),
            cross: vec![(0, 0), (0, 1), (1, 0), (1, 1)],
        };
        TrainExample {
            graph,
            labels: vec![true, false, false, true],
        }
    }

    #[test]
    fn gradients_match_finite_differences_sampled() {
        let ex = toy_graph(3);
        let cfg = NetConfig {
            steps: 2,
            ..NetConfig::default()
        };
        let mut p = RmNetParams::init(11);
        let (_, grads) = example_grads(&p, &ex, &cfg);
        let gvals: Vec<f64> = grads
            .tensors()
            .into_iter()
            .flat_map(|(_, _, _, d)| d.clone())
            .collect();
        let n = p.num_params();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-5;
        let mut checked = 0;
        for _ in 0..300 {
            let k = rng.gen_range(0..n);
            let analytic = gvals[k];
            let loss_at = |p: &RmNetParams| example_grads(p, &ex, &cfg).0;
            {
                let mut off = 0;
                for t in p.tensors_mut() {
                    if k < off + t.len() {
                        t[k - off] += h;
                        break;
                    }
                    off += t.len();
                }
            }
            let lp = loss_at(&p);
            {
                let mut off = 0;
                for t in p.tensors_mut() {
                    if k < off + t.len() {
                        t[k - off] -= 2.0 * h;
                        break;
                    }
                    off += t.len();
                }
            }
            let lm = loss_at(&p);
            {
                let mut off = 0;
                for t in p.tensors_mut() {
                    if k < off + t.len() {
                        t[k - off] += h;
                        break;
                    }
                    off += t.len();
                }
            }
            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            // ReLU kinks make a handful of samples non-differentiable; skip
            // parameters whose one-sided losses straddle a kink.
            let rel = (analytic - numeric).abs() / denom;
            if numeric.abs() < 1e-10 && analytic.abs() < 1e-10 {
                continue;
            }
            assert!(rel < 1e-4, "param {k}: analytic {analytic} numeric {numeric}");
            checked += 1;
        }
        assert!(checked > 200);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = RmNetParams::init(42);
        let mut buf = Vec::new();
        save_checkpoint(&p, &mut buf).unwrap();
        let q = load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        // Corrupt the magic.
        let mut bad = buf.clone();
        bad[0] ^= 0xff;
        assert!(matches!(
            load_checkpoint(bad.as_slice()),
            Err(NetError::BadCheckpoint(_))
        ));
        // Truncate the payload.
        let short = &buf[..buf.len() - 4];
        assert!(matches!(load_checkpoint(short), Err(NetError::Io(_))));
    }

    #[test]
    fn permutation_equivariance() {
        let ex = toy_graph(5);
        let cfg = NetConfig::default();
        let p = RmNetParams::init(3);
        let base = classify_edges(&p, &ex.graph, &cfg);

        // Swap the two CAV nodes; scores must follow the relabeling.
        let mut g2 = ex.graph.clone();
        g2.cav_desc.swap(0, 1);
        let cents = [Point2::new(22.0, -4.0), Point2::new(8.0, 1.0)];
        g2.cav_edges = local_edges(&cents, cfg.d_max);
        g2.cross = vec![(0, 0), (0, 1), (1, 0), (1, 1)];
        let swapped = classify_edges(&p, &g2, &cfg);
        // cross (i, j) in g2 corresponds to (i, 1-j) in the original.
        for (k, (i, j)) in g2.cross.iter().enumerate() {
            let orig = ex
                .graph
                .cross
                .iter()
                .position(|(a, b)| a == i && *b == 1 - j)
                .unwrap();
            assert!(
                (swapped.scores[k] - base.scores[orig]).abs() < 1e-9,
                "edge ({i},{j}): {} vs {}",
                swapped.scores[k],
                base.scores[orig]
            );
        }
    }

    #[test]
    fn training_separates_toy_duplicates() {
        // Identical descriptors across views: appearance alone decides.
        let data: Vec<TrainExample> = (0..20).map(toy_graph).collect();
        let cfg = NetConfig::default();
        let mut p = RmNetParams::init(1);
        let hist = train(
            &mut p,
            &data,
            &cfg,
            &TrainConfig {
                epochs: 60,
                learning_rate: 2e-3,
                seed: 2,
            },
        );
        assert!(
            hist.last().unwrap() < &(hist[0] * 0.5),
            "loss did not halve: {:?}",
            hist
        );
        let held_out: Vec<TrainExample> = (100..110).map(toy_graph).collect();
        let mut f1_sum = 0.0;
        for ex in &held_out {
            let r = classify_edges(&p, &ex.graph, &cfg);
            f1_sum += match_f1(&r, &ex.graph, &ex.labels);
        }
        assert!(f1_sum / 10.0 > 0.9, "mean F1 {}", f1_sum / 10.0);
    }

    #[test]
    fn matches_are_one_to_one() {
        let ex = toy_graph(9);
        let p = RmNetParams::init(4);
        let mut cfg = NetConfig::default();
        cfg.match_threshold = 0.0; // accept everything eligible
        let r = classify_edges(&p, &ex.graph, &cfg);
        let mut egos = std::collections::HashSet::new();
        let mut cavs = std::collections::HashSet::new();
        for (i, j, _) in &r.matches {
            assert!(egos.insert(*i));
            assert!(cavs.insert(*j));
        }
        assert_eq!(r.matches.len(), 2);
    }

    #[test]
    fn empty_views_yield_no_matches() {
        let p = RmNetParams::init(4);
        let cfg = NetConfig::default();
        let g = MatchGraph {
            ego_desc: vec![],
            cav_desc: vec![],
            ego_edges: vec![],
            cav_edges: vec![],
            cross: vec![],
        };
        let r = classify_edges(&p, &g, &cfg);
        assert!(r.scores.is_empty() && r.matches.is_empty());
    }

    #[test]
    fn simulator_pairs_build_consistent_graphs() {
        let sim = SimConfig::default();
        let w = generate_scene(&ScenarioSpec {
            road_type: RoadType::Straight,
            n_vehicles: 6,
            traffic: Traffic::Light,
            direction: DirectionMode::Same,
            seed: 2,
        })
        .unwrap();
        let pair = make_frame_pair(&w, &sim);
        let sep = SepConfig::default();
        let ego = separate_frame(&pair.ego, &sim.camera, &sep);
        let cav = separate_frame(&pair.cav, &sim.camera, &sep);
        let g = build_graph(&ego, &cav, &NetConfig::default());
        assert_eq!(g.ego_desc.len(), ego.clusters.len());
        assert_eq!(g.cross.len(), ego.clusters.len() * cav.clusters.len());
        let n = ego.clusters.len();
        assert_eq!(g.ego_edges.len(), n * n.saturating_sub(1) / 2);
        for (_, _, f) in g.ego_edges.iter().chain(&g.cav_edges) {
            assert!(f.iter().all(|v| v.is_finite()));
            assert!((0.0..=1.5).contains(&f[0]));
            assert!((0.0..=1.0).contains(&f[1]));
        }
    }
}
