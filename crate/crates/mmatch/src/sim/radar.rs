//! Radar forward model: surface sampling, line-of-sight occlusion, exact
//! Doppler radial velocities, measurement noise, and Poisson clutter.

use super::{RadarPoint, SimConfig, TruthSource, VehicleId, WorldTruth};
use crate::geom::{wrap_angle, Point2, Pose2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

/// Does segment (a, b) cross segment (c, d) strictly between endpoints?
fn segments_cross(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let r = (b.x - a.x, b.y - a.y);
    let s = (d.x - c.x, d.y - c.y);
    let denom = r.0 * s.1 - r.1 * s.0;
    if denom.abs() < 1e-12 {
        return false; // parallel; treat as non-blocking
    }
    let qp = (c.x - a.x, c.y - a.y);
    let t = (qp.0 * s.1 - qp.1 * s.0) / denom;
    let u = (qp.0 * r.1 - qp.1 * r.0) / denom;
    // End slack keeps a surface from occluding its own samples.
    t > 1e-6 && t < 1.0 - 1e-6 && u > -1e-9 && u < 1.0 + 1e-9
}

/// Collect every segment in the world that can block line of sight for
/// `observer`: occluding background walls plus all vehicle footprints except
/// the observer's own (and optionally one target to exempt).
fn occluders(world: &WorldTruth, observer: VehicleId, exempt: Option<VehicleId>) -> Vec<(Point2, Point2)> {
    let mut out = Vec::new();
    for s in &world.background {
        if s.occluding {
            out.push((s.a, s.b));
        }
    }
    for v in &world.vehicles {
        if v.id == observer || Some(v.id) == exempt {
            continue;
        }
        let c = v.corners();
        for k in 0..4 {
            out.push((c[k], c[(k + 1) % 4]));
        }
    }
    out
}

fn visible(from: Point2, to: Point2, occ: &[(Point2, Point2)]) -> bool {
    occ.iter().all(|(a, b)| !segments_cross(from, to, *a, *b))
}

pub(super) fn line_of_sight(
    world: &WorldTruth,
    observer: VehicleId,
    target: Option<VehicleId>,
    from: Point2,
    to: Point2,
) -> bool {
    let occ = occluders(world, observer, target);
    visible(from, to, &occ)
}

struct Sensor {
    pose: Pose2,
    inv: Pose2,
    origin: Point2,
    velocity: (f64, f64),
    fov: f64,
    max_range: f64,
}

impl Sensor {
    fn observe(&self, world_pt: Point2) -> Option<(f64, f64)> {
        let local = self.inv.apply(world_pt);
        let range = local.norm();
        if range < 0.5 || range > self.max_range {
            return None;
        }
        let az = local.azimuth();
        if self.fov < std::f64::consts::TAU - 1e-9 && az.abs() > self.fov * 0.5 {
            return None;
        }
        Some((range, az))
    }

    /// Exact Doppler: radial component of the target-relative velocity.
    fn radial_velocity(&self, world_pt: Point2, target_vel: (f64, f64)) -> f64 {
        let dx = world_pt.x - self.origin.x;
        let dy = world_pt.y - self.origin.y;
        let r = (dx * dx + dy * dy).sqrt().max(1e-9);
        let (ux, uy) = (dx / r, dy / r);
        ux * (target_vel.0 - self.velocity.0) + uy * (target_vel.1 - self.velocity.1)
    }
}

/// Scan the world from `observer`'s radar. Background surfaces and visible
/// vehicle faces are sampled into points; occluded samples emit nothing.
/// Radial velocities are exact before additive Gaussian noise; Poisson
/// clutter is appended last.
pub fn radar_scan(world: &WorldTruth, observer: VehicleId, cfg: &SimConfig, seed: u64) -> Vec<RadarPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radar = &cfg.radar;
    let obs_vehicle = world.vehicle(observer);
    let pose = world.sensor_pose(observer, radar);
    let sensor = Sensor {
        inv: pose.inverse(),
        origin: Point2::new(pose.tx, pose.ty),
        velocity: obs_vehicle.velocity(),
        fov: radar.fov,
        max_range: radar.max_range,
        pose,
    };
    let _ = &sensor.pose;
    let occ_bg = occluders(world, observer, None);

    let range_noise = Normal::new(0.0, radar.range_noise_sigma.max(1e-300)).unwrap();
    let vel_noise = Normal::new(0.0, radar.velocity_noise_sigma.max(1e-300)).unwrap();
    let push = |out: &mut Vec<RadarPoint>,
                    rng: &mut ChaCha8Rng,
                    range: f64,
                    az: f64,
                    v_r: f64,
                    source: TruthSource| {
        let r = if radar.range_noise_sigma > 0.0 {
            (range + range_noise.sample(rng)).max(0.05)
        } else {
            range
        };
        let v = if radar.velocity_noise_sigma > 0.0 {
            v_r + vel_noise.sample(rng)
        } else {
            v_r
        };
        out.push(RadarPoint::from_polar(r, az, v, source));
    };

    let mut points = Vec::new();

    // Background surfaces.
    for surf in &world.background {
        let n = (surf.len() / cfg.sampling.background_spacing).floor() as usize;
        let (dx, dy) = surf.direction();
        for k in 0..=n {
            let t = k as f64 * cfg.sampling.background_spacing;
            let p = Point2::new(surf.a.x + dx * t, surf.a.y + dy * t);
            let Some((range, az)) = sensor.observe(p) else { continue };
            if !visible(sensor.origin, p, &occ_bg) {
                continue;
            }
            let v_r = sensor.radial_velocity(p, (0.0, 0.0));
            push(&mut points, &mut rng, range, az, v_r, TruthSource::Background);
        }
    }

    // Vehicle faces: sample edges whose outward normal faces the sensor.
    for v in &world.vehicles {
        if v.id == observer {
            continue;
        }
        let occ = occluders(world, observer, Some(v.id));
        let corners = v.corners();
        let vel = v.velocity();
        for k in 0..4 {
            let a = corners[k];
            let b = corners[(k + 1) % 4];
            // Outward normal of a CCW polygon edge points right of a->b.
            let nx = b.y - a.y;
            let ny = -(b.x - a.x);
            let mid = Point2::new((a.x + b.x) * 0.5, (a.y + b.y) * 0.5);
            if nx * (sensor.origin.x - mid.x) + ny * (sensor.origin.y - mid.y) <= 0.0 {
                continue; // back face
            }
            let len = a.dist(b);
            let n = (len / cfg.sampling.vehicle_spacing).floor() as usize;
            for s in 0..=n {
                let t = (s as f64 * cfg.sampling.vehicle_spacing).min(len);
                let p = Point2::new(
                    a.x + (b.x - a.x) * t / len,
                    a.y + (b.y - a.y) * t / len,
                );
                let Some((range, az)) = sensor.observe(p) else { continue };
                if !visible(sensor.origin, p, &occ) {
                    continue;
                }
                let v_r = sensor.radial_velocity(p, vel);
                push(&mut points, &mut rng, range, az, v_r, TruthSource::Vehicle(v.id));
            }
        }
    }

    // Clutter: uniform in the field of view, Doppler uniform in +-30 m/s so
    // some returns land on the stationary sinusoid and some off it.
    if radar.clutter_rate > 0.0 {
        let n = Poisson::new(radar.clutter_rate).unwrap().sample(&mut rng) as usize;
        let half_fov = (radar.fov * 0.5).min(std::f64::consts::PI);
        for _ in 0..n {
            let az = wrap_angle(rng.gen_range(-half_fov..half_fov));
            let range = rng.gen_range(1.0..radar.max_range);
            let v_r = rng.gen_range(-30.0..30.0);
            points.push(RadarPoint::from_polar(range, az, v_r, TruthSource::Clutter));
        }
    }

    points
}
