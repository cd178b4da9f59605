//! Camera detector stand-in: a 1-D pinhole over the BEV plane producing
//! bounding boxes, noisy depths, range-dependent scores, and unit-norm
//! appearance descriptors.

use super::radar::line_of_sight;
use super::{Detection, SimConfig, VehicleId, VehicleTruth, WorldTruth};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub const DESCRIPTOR_DIM: usize = 32;

/// Appearance descriptor for one vehicle as seen from one view: the
/// vehicle's unit base vector plus per-view Gaussian noise, renormalized.
/// Same vehicle from two views gives correlated descriptors; distinct
/// vehicles give near-orthogonal ones.
pub fn descriptor_for(vehicle: &VehicleTruth, view_seed: u64, noise_sigma: f64) -> Vec<f64> {
    assert!(noise_sigma >= 0.0);
    let mut base_rng = ChaCha8Rng::seed_from_u64(vehicle.descriptor_seed);
    let mut v: Vec<f64> = (0..DESCRIPTOR_DIM)
        .map(|_| StandardNormal.sample(&mut base_rng))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);

    if noise_sigma > 0.0 {
        let mut view_rng = ChaCha8Rng::seed_from_u64(view_seed ^ vehicle.descriptor_seed.rotate_left(17));
        let noise = Normal::new(0.0, noise_sigma).unwrap();
        for x in v.iter_mut() {
            *x += noise.sample(&mut view_rng);
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Detect every unoccluded vehicle inside the camera field of view.
pub fn camera_detect(world: &WorldTruth, observer: VehicleId, cfg: &SimConfig, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = &cfg.camera;
    let pose = world.sensor_pose(observer, &cfg.radar);
    let inv = pose.inverse();
    let origin = pose.translation();
    let cx = cam.image_width * 0.5;
    let cy = cam.image_height * 0.5;

    let mut dets = Vec::new();
    for v in &world.vehicles {
        if v.id == observer {
            continue;
        }
        let center_local = inv.apply(v.pose.translation());
        let range = center_local.norm();
        if range < 1.0 || range > cfg.radar.max_range {
            continue;
        }
        if center_local.azimuth().abs() > cam.fov * 0.5 {
            continue;
        }
        if !line_of_sight(world, observer, Some(v.id), origin, v.pose.translation()) {
            continue;
        }
        // Detection dropout models missed targets at any noise setting.
        if cam.miss_rate > 0.0 && rng.gen_bool(cam.miss_rate.min(1.0)) {
            continue;
        }

        // Project footprint corners through the 1-D pinhole; u grows with
        // azimuth to the right of the boresight.
        let mut u_min = f64::INFINITY;
        let mut u_max = f64::NEG_INFINITY;
        for c in v.corners() {
            let local = inv.apply(c);
            if local.x < 0.2 {
                continue;
            }
            let u = cx - cam.focal_px * local.y / local.x;
            u_min = u_min.min(u);
            u_max = u_max.max(u);
        }
        if !u_min.is_finite() || u_max - u_min < 1.0 {
            continue;
        }
        // Vertical extent synthesized from a nominal vehicle height.
        let half_h = (cam.focal_px * 0.75 / center_local.x.abs().max(1.0)).max(1.0);

        let depth = if cam.depth_noise_frac > 0.0 {
            let n = Normal::new(0.0, cam.depth_noise_frac * range).unwrap();
            (range + n.sample(&mut rng)).max(0.5)
        } else {
            range
        };
        // Score decreases with range, jittered, clamped to [0.5, 1.0].
        let base = 1.0 - 0.4 * (range / cfg.radar.max_range);
        let score = (base + rng.gen_range(-0.05..0.05)).clamp(0.5, 1.0);

        dets.push(Detection {
            bbox: (u_min, cy - half_h, u_max, cy + half_h),
            depth,
            score,
            descriptor: descriptor_for(v, seed, cam.descriptor_noise_sigma),
            truth_id: Some(v.id),
        });
    }
    dets
}
