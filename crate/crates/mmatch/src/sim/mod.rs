//! Deterministic two-viewpoint traffic scene simulator.
//!
//! Generates seeded worlds (road layout, buildings, vehicles), radar scans
//! with exact Doppler radial velocities, camera-style detections with noisy
//! depth, and per-vehicle appearance descriptors. Every output is a pure
//! function of the scenario spec and seed, so frames regenerate bit-identical.

mod camera;
mod radar;

pub use camera::{camera_detect, descriptor_for, DESCRIPTOR_DIM};
pub use radar::radar_scan;

use crate::geom::{wrap_angle, Point2, Pose2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("could not place {0} vehicles without footprint overlap in 1000 attempts")]
    PlacementFailure(usize),
    #[error("unknown scenario name: {0}")]
    UnknownScenario(String),
}

pub type VehicleId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadType {
    Straight,
    Intersection,
    TJunction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Traffic {
    Light,
    Heavy,
}

/// Relative driving direction of the two cooperating vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    Same,
    Opposite,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub road_type: RoadType,
    /// Total vehicle count including the two cooperating observers.
    pub n_vehicles: usize,
    pub traffic: Traffic,
    pub direction: DirectionMode,
    pub seed: u64,
}

/// Radar sensor model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    /// Mount deviation of the radar boresight from the vehicle heading, radians.
    pub mount_yaw_offset: f64,
    /// Field of view, radians, in (0, 2*pi].
    pub fov: f64,
    /// Maximum detection range, meters.
    pub max_range: f64,
    /// Range measurement noise, meters (1 sigma).
    pub range_noise_sigma: f64,
    /// Radial velocity noise, m/s (1 sigma).
    pub velocity_noise_sigma: f64,
    /// Expected spurious points per frame (Poisson rate).
    pub clutter_rate: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            mount_yaw_offset: 0.0,
            fov: std::f64::consts::TAU,
            max_range: 80.0,
            range_noise_sigma: 0.1,
            velocity_noise_sigma: 0.1,
            clutter_rate: 5.0,
        }
    }
}

/// Camera detector model (1-D pinhole over the BEV plane, co-located and
/// co-oriented with the radar).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    /// Horizontal field of view, radians.
    pub fov: f64,
    /// Focal length, pixels.
    pub focal_px: f64,
    pub image_width: f64,
    pub image_height: f64,
    /// Depth noise as a fraction of true range (1 sigma).
    pub depth_noise_frac: f64,
    /// Probability of dropping a visible vehicle.
    pub miss_rate: f64,
    /// Descriptor perturbation (1 sigma per component before renormalizing).
    pub descriptor_noise_sigma: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            fov: 2.1,
            focal_px: 600.0,
            image_width: 1280.0,
            image_height: 720.0,
            depth_noise_frac: 0.05,
            miss_rate: 0.0,
            descriptor_noise_sigma: 0.1,
        }
    }
}

/// Radar surface sampling densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Spacing between samples on visible vehicle faces, meters.
    pub vehicle_spacing: f64,
    /// Spacing between samples on background surfaces, meters.
    pub background_spacing: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            vehicle_spacing: 0.5,
            background_spacing: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub radar: SensorConfig,
    pub camera: CameraConfig,
    pub sampling: SamplingConfig,
    /// Minimum radar points per side for a vehicle to count as co-visible.
    pub min_covis_points: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            radar: SensorConfig::default(),
            camera: CameraConfig::default(),
            sampling: SamplingConfig::default(),
            min_covis_points: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleTruth {
    pub id: VehicleId,
    /// World-frame pose; yaw is the heading.
    pub pose: Pose2,
    /// Speed along heading, m/s.
    pub speed: f64,
    /// (length, width), meters.
    pub extent: (f64, f64),
    pub descriptor_seed: u64,
}

impl VehicleTruth {
    /// Footprint corners in world frame, counter-clockwise.
    pub fn corners(&self) -> [Point2; 4] {
        let (l, w) = self.extent;
        let hl = l * 0.5;
        let hw = w * 0.5;
        [
            self.pose.apply(Point2::new(hl, hw)),
            self.pose.apply(Point2::new(-hl, hw)),
            self.pose.apply(Point2::new(-hl, -hw)),
            self.pose.apply(Point2::new(hl, -hw)),
        ]
    }

    /// World-frame velocity vector.
    pub fn velocity(&self) -> (f64, f64) {
        let (s, c) = self.pose.yaw.sin_cos();
        (self.speed * c, self.speed * s)
    }
}

/// A background surface: a line segment, optionally blocking line of sight
/// (building walls block, low guardrails do not).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub a: Point2,
    pub b: Point2,
    pub occluding: bool,
}

impl Surface {
    pub fn new(a: Point2, b: Point2, occluding: bool) -> Self {
        Self { a, b, occluding }
    }

    pub fn len(&self) -> f64 {
        self.a.dist(self.b)
    }

    /// Outward normal is undefined for free-standing walls; samples are taken
    /// from the side facing the observer, decided per scan.
    pub fn direction(&self) -> (f64, f64) {
        let l = self.len().max(1e-12);
        ((self.b.x - self.a.x) / l, (self.b.y - self.a.y) / l)
    }
}

/// Where a radar point truly came from. Simulator-only label, never
/// transmitted; used as the oracle for separation accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TruthSource {
    Background,
    Vehicle(VehicleId),
    Clutter,
}

/// One radar return in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub position: Point2,
    /// Doppler radial velocity, m/s; positive = receding.
    pub radial_velocity: f64,
    /// Azimuth of `position`, radians.
    pub azimuth: f64,
    /// Range of `position`, meters.
    pub range: f64,
    pub truth_source: TruthSource,
}

impl RadarPoint {
    pub fn from_polar(range: f64, azimuth: f64, v_r: f64, source: TruthSource) -> Self {
        Self {
            position: Point2::new(range * azimuth.cos(), range * azimuth.sin()),
            radial_velocity: v_r,
            azimuth,
            range,
            truth_source: source,
        }
    }
}

/// Camera-style vehicle observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// (u_min, v_min, u_max, v_max), pixels.
    pub bbox: (f64, f64, f64, f64),
    /// Estimated depth, meters (noisy).
    pub depth: f64,
    /// Confidence in (0, 1].
    pub score: f64,
    pub descriptor: Vec<f64>,
    /// Simulator-only label.
    pub truth_id: Option<VehicleId>,
}

/// One observer's raw sensor output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFrame {
    pub sensor: SensorConfig,
    /// Observer speed, m/s.
    pub ego_speed: f64,
    pub detections: Vec<Detection>,
    pub radar: Vec<RadarPoint>,
}

/// The full simulated exchange between the two observers plus ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePair {
    pub ego: RawFrame,
    pub cav: RawFrame,
    /// CAV sensor frame -> Ego sensor frame.
    pub truth_transform: Pose2,
    /// Vehicle ids detected in both views with enough radar points each side.
    pub truth_covis: Vec<VehicleId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldTruth {
    pub spec: ScenarioSpec,
    pub vehicles: Vec<VehicleTruth>,
    pub ego_id: VehicleId,
    pub cav_id: VehicleId,
    pub background: Vec<Surface>,
}

impl WorldTruth {
    pub fn vehicle(&self, id: VehicleId) -> &VehicleTruth {
        self.vehicles.iter().find(|v| v.id == id).expect("vehicle id")
    }

    /// The radar/camera sensor pose for an observer: vehicle position, with
    /// the boresight rotated so the heading sits at `+mount_yaw_offset` in
    /// the sensor frame.
    pub fn sensor_pose(&self, id: VehicleId, cfg: &SensorConfig) -> Pose2 {
        let v = self.vehicle(id);
        Pose2::new(
            wrap_angle(v.pose.yaw - cfg.mount_yaw_offset),
            v.pose.tx,
            v.pose.ty,
        )
    }
}

const LANE_WIDTH: f64 = 3.5;
const ROAD_REACH: f64 = 120.0;

/// Scenario library: the six canonical specs (three road types, light and
/// heavy traffic). `seed` selects the concrete layout.
pub fn scenario_by_name(name: &str, seed: u64) -> Result<ScenarioSpec, SimError> {
    let (road_type, traffic) = match name {
        "straight_light" => (RoadType::Straight, Traffic::Light),
        "straight_heavy" => (RoadType::Straight, Traffic::Heavy),
        "intersection_light" => (RoadType::Intersection, Traffic::Light),
        "intersection_heavy" => (RoadType::Intersection, Traffic::Heavy),
        "tjunction_light" => (RoadType::TJunction, Traffic::Light),
        "tjunction_heavy" => (RoadType::TJunction, Traffic::Heavy),
        other => return Err(SimError::UnknownScenario(other.to_string())),
    };
    let (n_vehicles, direction) = match traffic {
        Traffic::Light => (5, DirectionMode::Same),
        Traffic::Heavy => (9, DirectionMode::Mixed),
    };
    Ok(ScenarioSpec {
        road_type,
        n_vehicles,
        traffic,
        direction,
        seed,
    })
}

pub const SCENARIO_NAMES: [&str; 6] = [
    "straight_light",
    "straight_heavy",
    "intersection_light",
    "intersection_heavy",
    "tjunction_light",
    "tjunction_heavy",
];

struct RoadLayout {
    /// Lane descriptors: (center offset from road axis, heading along lane).
    /// Arm 0 runs along +x; intersections add an arm along +y.
    surfaces: Vec<Surface>,
    /// Candidate (position, heading) slots are generated on the fly from
    /// these axes: (origin, direction angle, half-length, lane offsets).
    arms: Vec<Arm>,
}

struct Arm {
    axis_angle: f64,
    /// Signed lane center offsets perpendicular to the axis; positive offsets
    /// carry traffic along `axis_angle`, negative offsets the reverse.
    lane_offsets: Vec<f64>,
    min_s: f64,
    max_s: f64,
}

impl Arm {
    fn slot(&self, s: f64, lane: usize) -> (Point2, f64) {
        let off = self.lane_offsets[lane];
        let (sn, cs) = self.axis_angle.sin_cos();
        let pos = Point2::new(cs * s - sn * off, sn * s + cs * off);
        let heading = if off >= 0.0 {
            self.axis_angle
        } else {
            wrap_angle(self.axis_angle + std::f64::consts::PI)
        };
        (pos, heading)
    }
}

fn building_row(
    surfaces: &mut Vec<Surface>,
    rng: &mut ChaCha8Rng,
    axis_angle: f64,
    side_offset: f64,
    from_s: f64,
    to_s: f64,
) {
    // A row of free-standing rectangular buildings with street-facing
    // facades; all four walls occlude.
    let (sn, cs) = axis_angle.sin_cos();
    let to_world = |s: f64, o: f64| Point2::new(cs * s - sn * o, sn * s + cs * o);
    let mut s = from_s + rng.gen_range(0.0..4.0);
    while s < to_s {
        let width = rng.gen_range(8.0..16.0);
        let depth = rng.gen_range(6.0..12.0);
        let setback = side_offset.abs() + rng.gen_range(2.0..6.0);
        if s + width > to_s {
            break;
        }
        let o0 = setback * side_offset.signum();
        let o1 = (setback + depth) * side_offset.signum();
        let c = [
            to_world(s, o0),
            to_world(s + width, o0),
            to_world(s + width, o1),
            to_world(s, o1),
        ];
        for k in 0..4 {
            surfaces.push(Surface::new(c[k], c[(k + 1) % 4], true));
        }
        s += width + rng.gen_range(2.0..8.0);
    }
}

fn road_layout(road_type: RoadType, rng: &mut ChaCha8Rng) -> RoadLayout {
    let half = 2.0 * LANE_WIDTH; // two lanes per direction
    let lane_offsets = vec![-1.5 * LANE_WIDTH, -0.5 * LANE_WIDTH, 0.5 * LANE_WIDTH, 1.5 * LANE_WIDTH];
    let mut surfaces = Vec::new();
    let mut arms = Vec::new();

    let guard = |surfaces: &mut Vec<Surface>, angle: f64, off: f64, from: f64, to: f64| {
        let (sn, cs) = f64::sin_cos(angle);
        let p = |s: f64| Point2::new(cs * s - sn * off, sn * s + cs * off);
        surfaces.push(Surface::new(p(from), p(to), false));
    };

    match road_type {
        RoadType::Straight => {
            guard(&mut surfaces, 0.0, half + 0.5, -ROAD_REACH, ROAD_REACH);
            guard(&mut surfaces, 0.0, -(half + 0.5), -ROAD_REACH, ROAD_REACH);
            building_row(&mut surfaces, rng, 0.0, half + 3.0, -ROAD_REACH, ROAD_REACH);
            building_row(&mut surfaces, rng, 0.0, -(half + 3.0), -ROAD_REACH, ROAD_REACH);
            arms.push(Arm {
                axis_angle: 0.0,
                lane_offsets,
                min_s: -ROAD_REACH + 20.0,
                max_s: ROAD_REACH - 20.0,
            });
        }
        RoadType::Intersection | RoadType::TJunction => {
            let open = half + 2.0;
            let y_min = if road_type == RoadType::TJunction { 0.0 } else { -ROAD_REACH };
            // Arm along +x, interrupted by the crossing road.
            for side in [1.0, -1.0] {
                let off = (half + 0.5) * side;
                if side > 0.0 || road_type == RoadType::Intersection {
                    guard(&mut surfaces, 0.0, off, -ROAD_REACH, -open);
                    guard(&mut surfaces, 0.0, off, open, ROAD_REACH);
                } else {
                    // T-junction: the far side of the main road is unbroken.
                    guard(&mut surfaces, 0.0, off, -ROAD_REACH, ROAD_REACH);
                }
            }
            // Crossing arm along +y.
            for side in [1.0, -1.0] {
                let off = (half + 0.5) * side;
                guard(
                    &mut surfaces,
                    std::f64::consts::FRAC_PI_2,
                    off,
                    y_min.max(open) + if y_min > 0.0 { 0.0 } else { 0.0 },
                    ROAD_REACH,
                );
                if road_type == RoadType::Intersection {
                    guard(&mut surfaces, std::f64::consts::FRAC_PI_2, off, -ROAD_REACH, -open);
                }
            }
            // Corner buildings.
            building_row(&mut surfaces, rng, 0.0, half + 3.0, open + 2.0, ROAD_REACH);
            building_row(&mut surfaces, rng, 0.0, half + 3.0, -ROAD_REACH, -(open + 2.0));
            if road_type == RoadType::Intersection {
                building_row(&mut surfaces, rng, 0.0, -(half + 3.0), open + 2.0, ROAD_REACH);
                building_row(&mut surfaces, rng, 0.0, -(half + 3.0), -ROAD_REACH, -(open + 2.0));
            } else {
                building_row(&mut surfaces, rng, 0.0, -(half + 3.0), -ROAD_REACH, ROAD_REACH);
            }
            arms.push(Arm {
                axis_angle: 0.0,
                lane_offsets: lane_offsets.clone(),
                min_s: -ROAD_REACH + 20.0,
                max_s: ROAD_REACH - 20.0,
            });
            arms.push(Arm {
                axis_angle: std::f64::consts::FRAC_PI_2,
                lane_offsets,
                min_s: if road_type == RoadType::TJunction { open + 4.0 } else { -ROAD_REACH + 20.0 },
                max_s: ROAD_REACH - 20.0,
            });
        }
    }

    RoadLayout { surfaces, arms }
}

fn rects_overlap(a: &[Point2; 4], b: &[Point2; 4]) -> bool {
    // Separating-axis test for convex quads.
    for quad in [a, b] {
        for k in 0..4 {
            let e = (
                quad[(k + 1) % 4].x - quad[k].x,
                quad[(k + 1) % 4].y - quad[k].y,
            );
            let axis = (-e.1, e.0);
            let project = |q: &[Point2; 4]| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for p in q {
                    let d = axis.0 * p.x + axis.1 * p.y;
                    lo = lo.min(d);
                    hi = hi.max(d);
                }
                (lo, hi)
            };
            let (a0, a1) = project(a);
            let (b0, b1) = project(b);
            if a1 < b0 || b1 < a0 {
                return false; // separating axis found
            }
        }
    }
    true
}

/// Exact overlap area is not needed for placement; the SAT test above gives
/// intersection area = 0 iff the quads are disjoint. Exposed for tests.
pub fn footprints_overlap(a: &VehicleTruth, b: &VehicleTruth) -> bool {
    rects_overlap(&a.corners(), &b.corners())
}

/// Generate a world: road layout, background geometry, and `n_vehicles`
/// non-overlapping vehicles (the first two are the Ego and the CAV).
pub fn generate_scene(spec: &ScenarioSpec) -> Result<WorldTruth, SimError> {
    assert!(spec.n_vehicles >= 2, "need at least Ego and CAV");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let layout = road_layout(spec.road_type, &mut rng);

    let mut vehicles: Vec<VehicleTruth> = Vec::new();
    let place = |rng: &mut ChaCha8Rng,
                     vehicles: &mut Vec<VehicleTruth>,
                     id: VehicleId,
                     slot: Option<(Point2, f64)>|
     -> Result<(), SimError> {
        for _ in 0..1000 {
            let (pos, heading) = match slot {
                Some(s) => s,
                None => {
                    let arm = &layout.arms[rng.gen_range(0..layout.arms.len())];
                    let lane = rng.gen_range(0..arm.lane_offsets.len());
                    let s = rng.gen_range(arm.min_s..arm.max_s);
                    arm.slot(s, lane)
                }
            };
            let cand = VehicleTruth {
                id,
                pose: Pose2::new(heading, pos.x, pos.y),
                speed: rng.gen_range(8.0..20.0),
                extent: (rng.gen_range(4.0..5.2), rng.gen_range(1.8..2.2)),
                descriptor_seed: rng.gen(),
            };
            if vehicles.iter().all(|v| !footprints_overlap(v, &cand)) {
                vehicles.push(cand);
                return Ok(());
            }
            if slot.is_some() {
                break; // fixed slot cannot be retried
            }
        }
        Err(SimError::PlacementFailure(id as usize + 1))
    };

    // Ego on arm 0, forward lane, near the origin.
    let arm0 = &layout.arms[0];
    let ego_lane = arm0.lane_offsets.len() / 2; // a forward (+axis) lane
    let ego_s = rng.gen_range(-40.0..-20.0);
    let ego_slot = arm0.slot(ego_s, ego_lane);
    place(&mut rng, &mut vehicles, 0, Some(ego_slot))?;

    // CAV placement per direction mode.
    let cav_slot = match spec.direction {
        DirectionMode::Same => {
            let lane = if ego_lane + 1 < arm0.lane_offsets.len() { ego_lane + 1 } else { ego_lane - 1 };
            arm0.slot(ego_s + rng.gen_range(8.0..25.0), lane)
        }
        DirectionMode::Opposite => {
            let lane = rng.gen_range(0..arm0.lane_offsets.len() / 2); // reverse lane
            arm0.slot(ego_s + rng.gen_range(30.0..60.0), lane)
        }
        DirectionMode::Mixed => {
            let arm = &layout.arms[rng.gen_range(0..layout.arms.len())];
            let lane = rng.gen_range(0..arm.lane_offsets.len());
            let s = if layout.arms.len() > 1 && rng.gen_bool(0.5) {
                rng.gen_range(-40.0..40.0)
            } else {
                ego_s + rng.gen_range(8.0..40.0)
            };
            arm.slot(s.clamp(arm.min_s, arm.max_s), lane)
        }
    };
    if place(&mut rng, &mut vehicles, 1, Some(cav_slot)).is_err() {
        // CAV slot collided with the ego; fall back to free placement.
        place(&mut rng, &mut vehicles, 1, None)?;
    }

    // Traffic: keep it in the region both observers look at (ahead of the
    // rearmost observer on arm 0, or around the junction center).
    for id in 2..spec.n_vehicles as VehicleId {
        let mut placed = false;
        for _ in 0..1000 {
            let arm_idx = if layout.arms.len() > 1 && rng.gen_bool(0.4) { 1 } else { 0 };
            let arm = &layout.arms[arm_idx];
            let lane = rng.gen_range(0..arm.lane_offsets.len());
            let s = if arm_idx == 0 {
                rng.gen_range(ego_s + 10.0..ego_s + 75.0)
            } else {
                rng.gen_range(arm.min_s.max(-50.0)..50f64.min(arm.max_s))
            };
            let slot = arm.slot(s.clamp(arm.min_s, arm.max_s), lane);
            let cand = VehicleTruth {
                id,
                pose: Pose2::new(slot.1, slot.0.x, slot.0.y),
                speed: rng.gen_range(8.0..20.0),
                extent: (rng.gen_range(4.0..5.2), rng.gen_range(1.8..2.2)),
                descriptor_seed: rng.gen(),
            };
            if vehicles.iter().all(|v| !footprints_overlap(v, &cand)) {
                vehicles.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SimError::PlacementFailure(spec.n_vehicles));
        }
    }

    Ok(WorldTruth {
        spec: *spec,
        vehicles,
        ego_id: 0,
        cav_id: 1,
        background: layout.surfaces,
    })
}

/// Generate the full two-view frame pair for a world.
pub fn make_frame_pair(world: &WorldTruth, cfg: &SimConfig) -> FramePair {
    let seed = world.spec.seed;
    let ego_radar = radar_scan(world, world.ego_id, cfg, seed.wrapping_add(101));
    let cav_radar = radar_scan(world, world.cav_id, cfg, seed.wrapping_add(202));
    let ego_dets = camera_detect(world, world.ego_id, cfg, seed.wrapping_add(303));
    let cav_dets = camera_detect(world, world.cav_id, cfg, seed.wrapping_add(404));

    let ego_pose = world.sensor_pose(world.ego_id, &cfg.radar);
    let cav_pose = world.sensor_pose(world.cav_id, &cfg.radar);
    let truth_transform = ego_pose.inverse().compose(&cav_pose);

    let points_of = |radar: &[RadarPoint], id: VehicleId| {
        radar
            .iter()
            .filter(|p| p.truth_source == TruthSource::Vehicle(id))
            .count()
    };
    let mut truth_covis = Vec::new();
    for v in &world.vehicles {
        let in_ego = ego_dets.iter().any(|d| d.truth_id == Some(v.id));
        let in_cav = cav_dets.iter().any(|d| d.truth_id == Some(v.id));
        if in_ego
            && in_cav
            && points_of(&ego_radar, v.id) >= cfg.min_covis_points
            && points_of(&cav_radar, v.id) >= cfg.min_covis_points
        {
            truth_covis.push(v.id);
        }
    }

    FramePair {
        ego: RawFrame {
            sensor: cfg.radar,
            ego_speed: world.vehicle(world.ego_id).speed,
            detections: ego_dets,
            radar: ego_radar,
        },
        cav: RawFrame {
            sensor: cfg.radar,
            ego_speed: world.vehicle(world.cav_id).speed,
            detections: cav_dets,
            radar: cav_radar,
        },
        truth_transform,
        truth_covis,
    }
}
