//! Capture geometry: a sphere sample, a pinhole camera and a light arm.
//!
//! The sphere sits at a configurable center; the camera looks at it from a
//! fixed pose, and the light source rides a circular arm in the camera's
//! horizontal plane. One sphere image therefore samples a continuous spread
//! of surface normals, which is what populates the reflectance table.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::Vec3;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("sphere radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("camera must sit outside the sphere (distance {distance}, radius {radius})")]
    CameraInsideSphere { distance: f64, radius: f64 },
    #[error("camera does not face the sphere center")]
    SphereBehindCamera,
    #[error("camera field of view must lie in (0, 180) degrees, got {0}")]
    BadFov(f64),
    #[error("camera resolution must be nonzero")]
    EmptyResolution,
    #[error("camera up vector is parallel to the view direction")]
    DegenerateUp,
    #[error("view offsets: expected {expected} per-band entries, got {got}")]
    ViewOffsetCount { expected: usize, got: usize },
}

/// Pinhole camera description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub fov_y_deg: f64,
    pub width: u32,
    pub height: u32,
    /// Optional per-band displacement of the camera origin, one entry per
    /// wavelength band, modelling a viewpoint that drifts with wavelength.
    pub view_offsets: Option<Vec<[f64; 3]>>,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            position: [0.0, 0.0, 0.6],
            look_at: [0.0, 0.0, 0.0],
            up: [0.0, 1.0, 0.0],
            fov_y_deg: 11.0,
            width: 410,
            height: 410,
            view_offsets: None,
        }
    }
}

/// Scene description as found in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SphereSceneConfig {
    pub sphere_center: [f64; 3],
    pub sphere_radius: f64,
    pub camera: CameraConfig,
    pub light_arm_radius: f64,
}

impl Default for SphereSceneConfig {
    fn default() -> Self {
        Self {
            sphere_center: [0.0; 3],
            sphere_radius: 0.05,
            camera: CameraConfig::default(),
            light_arm_radius: 1.0,
        }
    }
}

/// Validated scene with precomputed camera basis.
#[derive(Debug, Clone)]
pub struct SphereScene {
    pub center: Vec3,
    pub radius: f64,
    camera_origin: Vec3,
    cam_right: Vec3,
    cam_up: Vec3,
    cam_forward: Vec3,
    tan_half_fov: f64,
    pub width: u32,
    pub height: u32,
    view_offsets: Option<Vec<Vec3>>,
    pub light_arm_radius: f64,
}

/// Everything the simulator needs to know about one pixel under one light
/// position: directions away from the surface, the shading basis, and the
/// light-path length for falloff.
#[derive(Debug, Clone, Copy)]
pub struct PixelGeometry {
    pub point: Vec3,
    pub normal: Vec3,
    pub tangent: Vec3,
    pub bitangent: Vec3,
    pub omega_i: Vec3,
    pub omega_o: Vec3,
    pub light_distance: f64,
}

impl PixelGeometry {
    /// World vector expressed in the local shading basis (tangent, bitangent,
    /// normal).
    pub fn to_local(&self, v: &Vec3) -> Vec3 {
        Vec3::new(self.tangent.dot(v), self.bitangent.dot(v), self.normal.dot(v))
    }
}

impl SphereScene {
    pub fn new(config: &SphereSceneConfig, bands: usize) -> Result<Self, SceneError> {
        if !(config.sphere_radius > 0.0) {
            return Err(SceneError::BadRadius(config.sphere_radius));
        }
        let cam = &config.camera;
        if cam.width == 0 || cam.height == 0 {
            return Err(SceneError::EmptyResolution);
        }
        if !(cam.fov_y_deg > 0.0 && cam.fov_y_deg < 180.0) {
            return Err(SceneError::BadFov(cam.fov_y_deg));
        }
        let center = Vec3::from(config.sphere_center);
        let origin = Vec3::from(cam.position);
        let to_target = Vec3::from(cam.look_at) - origin;
        let distance = (center - origin).norm();
        if distance <= config.sphere_radius {
            return Err(SceneError::CameraInsideSphere {
                distance,
                radius: config.sphere_radius,
            });
        }
        if to_target.norm() < 1e-12 || to_target.dot(&(center - origin)) <= 0.0 {
            return Err(SceneError::SphereBehindCamera);
        }
        let forward = to_target.normalize();
        let up_hint = Vec3::from(cam.up);
        let right = forward.cross(&up_hint);
        if right.norm() < 1e-9 {
            return Err(SceneError::DegenerateUp);
        }
        let cam_right = right.normalize();
        let cam_up = cam_right.cross(&forward);
        let view_offsets = match &cam.view_offsets {
            None => None,
            Some(list) => {
                if list.len() != bands {
                    return Err(SceneError::ViewOffsetCount {
                        expected: bands,
                        got: list.len(),
                    });
                }
                Some(list.iter().map(|o| Vec3::from(*o)).collect())
            }
        };
        Ok(Self {
            center,
            radius: config.sphere_radius,
            camera_origin: origin,
            cam_right,
            cam_up,
            cam_forward: forward,
            tan_half_fov: (cam.fov_y_deg.to_radians() * 0.5).tan(),
            width: cam.width,
            height: cam.height,
            view_offsets,
            light_arm_radius: config.light_arm_radius,
        })
    }

    /// Light position for one arm angle: a circle of the configured radius
    /// around the sphere center, in the plane spanned by the camera direction
    /// and the camera's right axis. Angle zero is behind the camera.
    pub fn light_position(&self, arm_angle: f64) -> Vec3 {
        let toward_camera = -self.cam_forward;
        let (s, c) = arm_angle.sin_cos();
        self.center + (toward_camera * c + self.cam_right * s) * self.light_arm_radius
    }

    pub fn camera_origin(&self, band: usize) -> Vec3 {
        match &self.view_offsets {
            Some(offsets) => self.camera_origin + offsets[band],
            None => self.camera_origin,
        }
    }

    /// Orthonormal camera basis: (right, up, forward).
    pub fn camera_basis(&self) -> (Vec3, Vec3, Vec3) {
        (self.cam_right, self.cam_up, self.cam_forward)
    }

    /// First sphere intersection of the ray through the center of pixel
    /// (x, y), if any. Returns the hit point and outward normal.
    pub fn hit_sphere(&self, x: u32, y: u32, band: usize) -> Option<(Vec3, Vec3)> {
        let origin = self.camera_origin(band);
        let aspect = self.width as f64 / self.height as f64;
        let u = ((x as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * self.tan_half_fov * aspect;
        let v = (1.0 - (y as f64 + 0.5) / self.height as f64 * 2.0) * self.tan_half_fov;
        let dir = (self.cam_forward + self.cam_right * u + self.cam_up * v).normalize();

        let oc = origin - self.center;
        let b = oc.dot(&dir);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let t = -b - disc.sqrt();
        if t <= 0.0 {
            return None;
        }
        let point = origin + dir * t;
        let normal = (point - self.center) / self.radius;
        Some((point, normal))
    }

    /// Shading basis plus light/view directions for one pixel and light
    /// position. `None` when the pixel misses the sphere or the geometry is
    /// facing away from light or camera.
    pub fn pixel_geometry(&self, x: u32, y: u32, light: &Vec3, band: usize) -> Option<PixelGeometry> {
        let (point, normal) = self.hit_sphere(x, y, band)?;
        let to_light = light - point;
        let light_distance = to_light.norm();
        let omega_i = to_light / light_distance;
        let omega_o = (self.camera_origin(band) - point).normalize();
        if normal.dot(&omega_i) <= 1e-9 || normal.dot(&omega_o) <= 1e-9 {
            return None;
        }
        let (tangent, bitangent) = tangent_basis(&normal);
        Some(PixelGeometry {
            point,
            normal,
            tangent,
            bitangent,
            omega_i,
            omega_o,
            light_distance,
        })
    }
}

/// Deterministic tangent frame on the sphere: tangent along the world-z cross
/// normal direction where possible, with a fixed fallback at the poles of
/// that construction.
pub fn tangent_basis(normal: &Vec3) -> (Vec3, Vec3) {
    let mut t = Vector3::z().cross(normal);
    if t.norm() < 1e-9 {
        t = Vector3::x().cross(normal);
    }
    let tangent = t.normalize();
    let bitangent = normal.cross(&tangent);
    (tangent, bitangent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_scene() -> SphereScene {
        let config = SphereSceneConfig {
            camera: CameraConfig { width: 33, height: 33, ..CameraConfig::default() },
            ..SphereSceneConfig::default()
        };
        SphereScene::new(&config, 4).unwrap()
    }

    #[test]
    fn light_rides_a_circle_around_the_center() {
        let scene = small_scene();
        for step in 0..25 {
            let angle = (40.0 + 5.0 * step as f64).to_radians();
            let pos = scene.light_position(angle);
            assert_relative_eq!((pos - scene.center).norm(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(pos.y, 0.0, epsilon = 1e-12);
        }
        // 90 degrees is fully sideways, on the camera's right.
        let side = scene.light_position(std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(side.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(side.z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn central_pixel_hits_the_sphere_front() {
        let scene = small_scene();
        let (point, normal) = scene.hit_sphere(16, 16, 0).unwrap();
        assert!(point.z > 0.049, "front of the sphere, got {point:?}");
        assert_relative_eq!(normal.norm(), 1.0, epsilon = 1e-12);
        assert!(normal.z > 0.99);
        assert!(scene.hit_sphere(0, 0, 0).is_none(), "corner pixel misses");
    }

    #[test]
    fn pixel_geometry_points_away_from_the_surface() {
        let scene = small_scene();
        let light = scene.light_position(1.0);
        let g = scene.pixel_geometry(16, 10, &light, 0).unwrap();
        assert!(g.normal.dot(&g.omega_i) > 0.0);
        assert!(g.normal.dot(&g.omega_o) > 0.0);
        assert_relative_eq!(
            (g.point + g.omega_i * g.light_distance - light).norm(),
            0.0,
            epsilon = 1e-9
        );
        // Local basis is right-handed and orthonormal.
        assert_relative_eq!(g.tangent.cross(&g.bitangent).dot(&g.normal), 1.0, epsilon = 1e-12);
        let local = g.to_local(&g.normal);
        assert_relative_eq!(local, Vector3::z(), epsilon = 1e-12);
    }

    #[test]
    fn backlit_pixel_is_rejected() {
        let scene = small_scene();
        // Light angle close to 180 degrees: the camera-facing side is dark.
        let light = scene.light_position(std::f64::consts::PI * 0.999);
        assert!(scene.pixel_geometry(16, 16, &light, 0).is_none());
    }

    #[test]
    fn validation_rejects_broken_scenes() {
        let mut config = SphereSceneConfig::default();
        config.sphere_radius = -1.0;
        assert!(matches!(SphereScene::new(&config, 1), Err(SceneError::BadRadius(_))));

        let mut config = SphereSceneConfig::default();
        config.camera.position = [0.0, 0.0, 0.01];
        assert!(matches!(
            SphereScene::new(&config, 1),
            Err(SceneError::CameraInsideSphere { .. })
        ));

        let mut config = SphereSceneConfig::default();
        config.camera.look_at = [0.0, 0.0, 2.0];
        assert!(matches!(SphereScene::new(&config, 1), Err(SceneError::SphereBehindCamera)));

        let mut config = SphereSceneConfig::default();
        config.camera.view_offsets = Some(vec![[0.0; 3]; 2]);
        assert!(matches!(
            SphereScene::new(&config, 3),
            Err(SceneError::ViewOffsetCount { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn view_offsets_shift_the_camera_per_band() {
        let mut config = SphereSceneConfig::default();
        config.camera.width = 9;
        config.camera.height = 9;
        config.camera.view_offsets = Some(vec![[0.0; 3], [0.001, 0.0, 0.0]]);
        let scene = SphereScene::new(&config, 2).unwrap();
        let a = scene.camera_origin(0);
        let b = scene.camera_origin(1);
        assert_relative_eq!((b - a).x, 0.001, epsilon = 1e-15);
        let hit_a = scene.hit_sphere(4, 4, 0).unwrap().0;
        let hit_b = scene.hit_sphere(4, 4, 1).unwrap().0;
        assert!((hit_a - hit_b).norm() > 0.0);
    }

    #[test]
    fn tangent_basis_handles_the_poles() {
        for n in [Vector3::z(), -Vector3::z(), Vector3::x(), Vector3::new(0.6, 0.0, 0.8)] {
            let (t, b) = tangent_basis(&n);
            assert_relative_eq!(t.norm(), 1.0, epsilon = 1e-12);
            assert!(t.dot(&n).abs() < 1e-12);
            assert_relative_eq!(t.cross(&b).dot(&n), 1.0, epsilon = 1e-12);
        }
    }
}
