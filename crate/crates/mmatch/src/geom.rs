//! Planar rigid-body geometry, weighted closed-form registration, and the
//! rotation/translation error metrics used across the pipeline.
//!
//! Everything operates in the bird's-eye-view plane, so transforms are SE(2):
//! a yaw plus a translation. Angles are radians internally; the error metrics
//! report degrees.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeomError {
    /// All points coincide or every weight is zero; no rigid transform is
    /// determined by the input.
    #[error("degenerate input: point set or weights carry no rigid constraint")]
    DegenerateInput,
}

/// A point in the BEV plane, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Azimuth from the +x axis, in (-pi, pi].
    pub fn azimuth(self) -> f64 {
        self.y.atan2(self.x)
    }
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    } else if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    a
}

/// A rigid transform in the BEV plane: rotation by `yaw` followed by
/// translation by `(tx, ty)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    /// Rotation angle, radians, kept in (-pi, pi].
    pub yaw: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Pose2 {
    pub fn new(yaw: f64, tx: f64, ty: f64) -> Self {
        Self {
            yaw: wrap_angle(yaw),
            tx,
            ty,
        }
    }

    pub fn identity() -> Self {
        Self {
            yaw: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let (s, c) = self.yaw.sin_cos();
        Point2 {
            x: c * p.x - s * p.y + self.tx,
            y: s * p.x + c * p.y + self.ty,
        }
    }

    /// `compose(a, b)` maps `p` to `a.apply(b.apply(p))`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2 {
            yaw: wrap_angle(self.yaw + other.yaw),
            tx: c * other.tx - s * other.ty + self.tx,
            ty: s * other.tx + c * other.ty + self.ty,
        }
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2 {
            yaw: wrap_angle(-self.yaw),
            tx: -(c * self.tx + s * self.ty),
            ty: -(-s * self.tx + c * self.ty),
        }
    }

    pub fn translation(&self) -> Point2 {
        Point2::new(self.tx, self.ty)
    }
}

/// Weighted least-squares rigid transform minimizing
/// `sum_i w_i * ||T(src_i) - dst_i||^2` over SE(2).
///
/// The optimal yaw comes from the atan2 of the cross/dot sums of the
/// weight-centered coordinates; no SVD is needed in 2D.
pub fn kabsch2(src: &[Point2], dst: &[Point2], weights: &[f64]) -> Result<Pose2, GeomError> {
    assert_eq!(src.len(), dst.len());
    assert_eq!(src.len(), weights.len());
    let wsum: f64 = weights.iter().sum();
    if src.len() < 2 || wsum <= 0.0 {
        return Err(GeomError::DegenerateInput);
    }

    let mut cs = Point2::new(0.0, 0.0);
    let mut cd = Point2::new(0.0, 0.0);
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        cs.x += w * s.x;
        cs.y += w * s.y;
        cd.x += w * d.x;
        cd.y += w * d.y;
    }
    cs.x /= wsum;
    cs.y /= wsum;
    cd.x /= wsum;
    cd.y /= wsum;

    // Cross-covariance of the centered sets; yaw = atan2(sum cross, sum dot).
    let mut dot = 0.0;
    let mut cross = 0.0;
    let mut spread = 0.0;
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        let sx = s.x - cs.x;
        let sy = s.y - cs.y;
        let dx = d.x - cd.x;
        let dy = d.y - cd.y;
        dot += w * (sx * dx + sy * dy);
        cross += w * (sx * dy - sy * dx);
        spread += w * (sx * sx + sy * sy);
    }
    if spread / wsum < 1e-18 {
        return Err(GeomError::DegenerateInput);
    }
    let yaw = if dot == 0.0 && cross == 0.0 {
        // dst has no spread; any rotation is optimal, pick zero.
        0.0
    } else {
        cross.atan2(dot)
    };
    let (sn, cn) = yaw.sin_cos();
    Ok(Pose2 {
        yaw,
        tx: cd.x - (cn * cs.x - sn * cs.y),
        ty: cd.y - (sn * cs.x + cn * cs.y),
    })
}

/// Relative rotation error in degrees: |wrapped yaw difference|.
pub fn rre(estimated: &Pose2, truth: &Pose2) -> f64 {
    wrap_angle(estimated.yaw - truth.yaw).abs().to_degrees()
}

/// Relative translation error in meters: Euclidean norm of the
/// translation difference.
pub fn rte(estimated: &Pose2, truth: &Pose2) -> f64 {
    (truth.tx - estimated.tx).hypot(truth.ty - estimated.ty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn compose_identity() {
        let id = Pose2::identity();
        let r = id.compose(&id);
        assert_eq!(r, Pose2::identity());
    }

    #[test]
    fn compose_rotation_group() {
        let q = Pose2::new(FRAC_PI_2, 0.0, 0.0);
        let r = q.compose(&q);
        assert_abs_diff_eq!(r.yaw, PI, epsilon = 1e-12);
        assert_abs_diff_eq!(r.tx, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.ty, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn compose_matches_matrix_product() {
        // Hand computation: A = [I | (1,0)], B = rot(pi/2).
        // (A*B)(1,0) = A(0,1) = (1,1).
        let a = Pose2::new(0.0, 1.0, 0.0);
        let b = Pose2::new(FRAC_PI_2, 0.0, 0.0);
        let p = a.compose(&b).apply(Point2::new(1.0, 0.0));
        assert_abs_diff_eq!(p.x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn inverse_roundtrip() {
        let p = Pose2::new(1.3, -4.0, 2.5);
        let r = p.compose(&p.inverse());
        assert_abs_diff_eq!(r.yaw, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.tx, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.ty, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn kabsch_fixed_point() {
        let pts: Vec<Point2> = (0..5)
            .map(|i| Point2::new(i as f64, (i * i) as f64 * 0.3))
            .collect();
        let w = vec![1.0; 5];
        let t = kabsch2(&pts, &pts, &w).unwrap();
        assert_abs_diff_eq!(t.yaw, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.tx, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.ty, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kabsch_pure_rotation() {
        let src: Vec<Point2> = vec![
            Point2::new(1.0, 0.0),
            Point2::new(0.0, 2.0),
            Point2::new(-1.5, 0.5),
        ];
        let rot = Pose2::new(30f64.to_radians(), 0.0, 0.0);
        let dst: Vec<Point2> = src.iter().map(|p| rot.apply(*p)).collect();
        let t = kabsch2(&src, &dst, &[1.0, 1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(t.yaw, 30f64.to_radians(), epsilon = 1e-9);
        assert_abs_diff_eq!(t.tx, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(t.ty, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn kabsch_recovers_random_pose() {
        // Simulator-as-oracle: transform known points by a known pose.
        let src: Vec<Point2> = vec![
            Point2::new(0.3, 1.7),
            Point2::new(-2.0, 0.4),
            Point2::new(4.1, -3.3),
            Point2::new(0.0, 0.0),
            Point2::new(-1.1, -1.9),
        ];
        let truth = Pose2::new(-1.1, 5.2, -7.9);
        let dst: Vec<Point2> = src.iter().map(|p| truth.apply(*p)).collect();
        let t = kabsch2(&src, &dst, &[1.0; 5]).unwrap();
        assert!(rre(&t, &truth) < 1e-9);
        assert!(rte(&t, &truth) < 1e-9);
    }

    #[test]
    fn kabsch_degenerate() {
        let pts = vec![Point2::new(1.0, 1.0); 4];
        assert_eq!(
            kabsch2(&pts, &pts, &[1.0; 4]),
            Err(GeomError::DegenerateInput)
        );
        let src = vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)];
        assert_eq!(
            kabsch2(&src, &src, &[0.0, 0.0]),
            Err(GeomError::DegenerateInput)
        );
    }

    #[test]
    fn rre_cases() {
        let t = Pose2::new(8f64.to_radians(), 0.0, 0.0);
        let e = Pose2::new(10f64.to_radians(), 0.0, 0.0);
        assert_abs_diff_eq!(rre(&e, &t), 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(rre(&t, &t), 0.0, epsilon = 1e-12);
        // Wrap-around: 179 vs -179 is a 2 degree error.
        let a = Pose2::new(179f64.to_radians(), 0.0, 0.0);
        let b = Pose2::new(-179f64.to_radians(), 0.0, 0.0);
        assert_abs_diff_eq!(rre(&a, &b), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn rte_cases() {
        let t = Pose2::identity();
        let e = Pose2::new(0.0, 3.0, 4.0);
        assert_abs_diff_eq!(rte(&e, &t), 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rte(&t, &t), 0.0, epsilon = 1e-12);
    }

    fn arb_pose() -> impl Strategy<Value = Pose2> {
        (-3.1f64..3.1, -50.0f64..50.0, -50.0f64..50.0).prop_map(|(y, tx, ty)| Pose2::new(y, tx, ty))
    }

    proptest! {
        #[test]
        fn pose_self_error_zero(p in arb_pose()) {
            prop_assert!(rre(&p, &p) == 0.0);
            prop_assert!(rte(&p, &p) == 0.0);
        }

        #[test]
        fn rre_symmetric(p in arb_pose(), q in arb_pose()) {
            prop_assert!((rre(&p, &q) - rre(&q, &p)).abs() < 1e-9);
        }

        #[test]
        fn rte_matches_norm(p in arb_pose(), q in arb_pose()) {
            let dx = p.tx - q.tx;
            let dy = p.ty - q.ty;
            let norm = (dx * dx + dy * dy).sqrt();
            prop_assert!((rte(&p, &q) - norm).abs() < 1e-12);
        }

        #[test]
        fn apply_is_isometry(p in arb_pose(), ax in -20.0f64..20.0, ay in -20.0f64..20.0, bx in -20.0f64..20.0, by in -20.0f64..20.0) {
            let a = Point2::new(ax, ay);
            let b = Point2::new(bx, by);
            let d0 = a.dist(b);
            let d1 = p.apply(a).dist(p.apply(b));
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn inverse_apply_roundtrip(p in arb_pose(), x in -20.0f64..20.0, y in -20.0f64..20.0) {
            let pt = Point2::new(x, y);
            let back = p.inverse().apply(p.apply(pt));
            prop_assert!(back.dist(pt) < 1e-9);
        }

        #[test]
        fn kabsch_weight_scale_invariant(scale in 0.01f64..100.0) {
            let src = vec![
                Point2::new(0.0, 0.0),
                Point2::new(2.0, 1.0),
                Point2::new(-1.0, 3.0),
                Point2::new(4.0, -2.0),
            ];
            let truth = Pose2::new(0.7, 1.0, -2.0);
            let dst: Vec<Point2> = src.iter().map(|p| truth.apply(*p)).collect();
            let w0 = [1.0, 2.0, 0.5, 3.0];
            let w1: Vec<f64> = w0.iter().map(|w| w * scale).collect();
            let t0 = kabsch2(&src, &dst, &w0).unwrap();
            let t1 = kabsch2(&src, &dst, &w1).unwrap();
            prop_assert!((t0.yaw - t1.yaw).abs() < 1e-12);
            prop_assert!((t0.tx - t1.tx).abs() < 1e-12);
            prop_assert!((t0.ty - t1.ty).abs() < 1e-12);
        }
    }
}
