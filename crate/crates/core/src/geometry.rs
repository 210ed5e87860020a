//! Analytic signed-distance primitives and their composition by minimum.
//!
//! Distances are negative inside. Every scene carries an explicit background
//! object whose id is the last one, `K - 1`.

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Orthonormality tolerance for rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Rotation followed by translation: `x ↦ R x + t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseDoc", into = "PoseDoc")]
pub struct RigidTransform {
    rotation: Rotation3<f64>,
    translation: Vec3,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseDoc {
    /// Unit quaternion `[w, x, y, z]`.
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl TryFrom<PoseDoc> for RigidTransform {
    type Error = Error;

    fn try_from(doc: PoseDoc) -> Result<Self> {
        RigidTransform::from_quaternion(doc.rotation, Vec3::from(doc.translation))
    }
}

impl From<RigidTransform> for PoseDoc {
    fn from(t: RigidTransform) -> Self {
        PoseDoc {
            rotation: t.quaternion(),
            translation: t.translation.into(),
        }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self::from_translation(Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation,
        }
    }

    /// Builds a transform from a quaternion `[w, x, y, z]`, which is normalized.
    pub fn from_quaternion(q: [f64; 4], translation: Vec3) -> Result<Self> {
        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !(norm.is_finite() && norm > 1e-12) || !finite3(&translation) {
            return Err(Error::invalid(format!(
                "pose needs a non-zero finite quaternion and finite translation, got {q:?}"
            )));
        }
        Ok(Self {
            rotation: UnitQuaternion::from_quaternion(quat).to_rotation_matrix(),
            translation,
        })
    }

    /// Rotation about a unit axis by `angle` radians.
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Result<Self> {
        let axis = Unit::try_new(axis, 1e-12)
            .ok_or_else(|| Error::invalid("rotation axis must be non-zero"))?;
        Ok(Self {
            rotation: Rotation3::from_axis_angle(&axis, angle),
            translation,
        })
    }

    /// Accepts `rotation` only if `RᵀR = I` within [`ROTATION_TOLERANCE`] and
    /// `det R > 0`.
    pub fn from_matrix(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let defect = (rotation.transpose() * rotation - Matrix3::identity())
            .abs()
            .max();
        if !(defect <= ROTATION_TOLERANCE) || rotation.determinant() <= 0.0 {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (defect {defect:e})"
            )));
        }
        if !finite3(&translation) {
            return Err(Error::invalid("translation must be finite"));
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            translation,
        })
    }

    /// Parses a row-major 4×4 homogeneous matrix whose last row is `0 0 0 1`.
    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        let last = [m[12], m[13], m[14], m[15]];
        if last != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid(format!(
                "pose last row must be 0 0 0 1, got {last:?}"
            )));
        }
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::from_matrix(r, Vec3::new(m[3], m[7], m[11]))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = self.rotation.matrix();
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        self.rotation.matrix()
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    /// Rotation as `[w, x, y, z]` with `w ≥ 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&self.rotation);
        let c = q.quaternion().coords;
        let s = if c.w < 0.0 { -1.0 } else { 1.0 };
        [s * c.w, s * c.x, s * c.y, s * c.z]
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse_apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        Self {
            translation: -(rotation * self.translation),
            rotation,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

fn finite3(v: &Vec3) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Shape in the primitive's local frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    /// Axis-aligned in the local frame.
    Box {
        half_extents: [f64; 3],
    },
    /// The region `z ≤ offset` of the local frame.
    HalfSpace {
        offset: f64,
    },
}

impl Shape {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Shape::Sphere { radius } => radius.is_finite() && *radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|h| h.is_finite() && *h > 0.0),
            Shape::HalfSpace { offset } => offset.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "invalid primitive size parameters: {self:?}"
            )))
        }
    }

    /// Signed distance and its gradient at a local-frame point.
    pub fn sdf_with_gradient(&self, q: &Vec3) -> (f64, Vec3) {
        match self {
            Shape::Sphere { radius } => {
                let n = q.norm();
                let g = if n > 0.0 { q / n } else { Vec3::z() };
                (n - radius, g)
            }
            Shape::HalfSpace { offset } => (q.z - offset, Vec3::z()),
            Shape::Box { half_extents } => {
                let h = Vec3::from(*half_extents);
                let d = q.abs() - h;
                let outside = d.map(|x| x.max(0.0));
                let outside_norm = outside.norm();
                if outside_norm > 0.0 {
                    let g = outside.component_mul(&q.map(sign)) / outside_norm;
                    (outside_norm, g)
                } else {
                    // Inside or on the boundary: nearest face is the largest component.
                    let axis = d.imax();
                    let mut g = Vec3::zeros();
                    g[axis] = sign(q[axis]);
                    (d[axis], g)
                }
            }
        }
    }

    pub fn sdf(&self, q: &Vec3) -> f64 {
        match self {
            Shape::Sphere { radius } => q.norm() - radius,
            Shape::HalfSpace { offset } => q.z - offset,
            Shape::Box { .. } => self.sdf_with_gradient(q).0,
        }
    }
}

fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    #[serde(default)]
    pub pose: RigidTransform,
    pub albedo: [f64; 3],
    pub object_id: usize,
}

impl Primitive {
    pub fn new(
        shape: Shape,
        pose: RigidTransform,
        albedo: [f64; 3],
        object_id: usize,
    ) -> Result<Self> {
        let p = Self {
            shape,
            pose,
            albedo,
            object_id,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn sphere(center: Vec3, radius: f64, albedo: [f64; 3], object_id: usize) -> Result<Self> {
        Self::new(
            Shape::Sphere { radius },
            RigidTransform::from_translation(center),
            albedo,
            object_id,
        )
    }

    pub fn axis_box(
        center: Vec3,
        half_extents: [f64; 3],
        albedo: [f64; 3],
        object_id: usize,
    ) -> Result<Self> {
        Self::new(
            Shape::Box { half_extents },
            RigidTransform::from_translation(center),
            albedo,
            object_id,
        )
    }

    /// The world region `z ≤ height`.
    pub fn floor(height: f64, albedo: [f64; 3], object_id: usize) -> Result<Self> {
        Self::new(
            Shape::HalfSpace { offset: height },
            RigidTransform::identity(),
            albedo,
            object_id,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if !self.albedo.iter().all(|a| (0.0..=1.0).contains(a)) {
            return Err(Error::invalid(format!(
                "albedo must lie in [0,1], got {:?}",
                self.albedo
            )));
        }
        Ok(())
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.shape.sdf(&self.pose.inverse_apply_point(p))
    }

    /// World-space distance and gradient.
    pub fn sdf_with_gradient(&self, p: &Vec3) -> (f64, Vec3) {
        let (d, g) = self
            .shape
            .sdf_with_gradient(&self.pose.inverse_apply_point(p));
        (d, self.pose.apply_vector(&g))
    }
}

pub fn primitive_sdf(prim: &Primitive, p: &Vec3) -> f64 {
    prim.sdf(p)
}

/// Minimum and the smallest index attaining it.
pub fn compose_min(d: &[f64]) -> Result<(f64, usize)> {
    let (&first, rest) = d
        .split_first()
        .ok_or_else(|| Error::invalid("compose_min needs at least one distance"))?;
    let mut best = (first, 0);
    for (i, &v) in rest.iter().enumerate() {
        if v < best.0 {
            best = (v, i + 1);
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn cube(half: f64) -> Result<Self> {
        Self::new([-half; 3], [half; 3])
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0..3).all(|i| {
            self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i]
        });
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate bounding box {self:?}")))
        }
    }

    pub fn min_point(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn max_point(&self) -> Vec3 {
        Vec3::from(self.max)
    }

    pub fn center(&self) -> Vec3 {
        (self.min_point() + self.max_point()) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max_point() - self.min_point()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Shrinks every side by `fraction` of the extent along that axis.
    pub fn shrink(&self, fraction: f64) -> Result<Self> {
        let e = self.extent() * fraction;
        Self::new((self.min_point() + e).into(), (self.max_point() - e).into())
    }

    /// Parametric interval `[t0, t1]` with `t0 ≥ 0` in which the ray is inside
    /// the box, if it is non-empty.
    pub fn intersect_ray(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i] == 0.0 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (a, b) = (
                (self.min[i] - origin[i]) * inv,
                (self.max[i] - origin[i]) * inv,
            );
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// Ambient plus Lambertian shading with a fixed directional light.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Light {
    pub ambient: f64,
    pub diffuse: f64,
    /// Direction towards the light; normalized on use.
    pub direction: [f64; 3],
}

impl Default for Light {
    fn default() -> Self {
        Self {
            ambient: 0.3,
            diffuse: 0.7,
            direction: [0.3, -0.5, 0.8],
        }
    }
}

impl Light {
    pub fn validate(&self) -> Result<()> {
        let dir = Vec3::from(self.direction);
        if !(self.ambient >= 0.0 && self.diffuse >= 0.0 && self.ambient + self.diffuse <= 1.0)
            || !(dir.norm() > 0.0 && finite3(&dir))
        {
            return Err(Error::invalid(format!("invalid light {self:?}")));
        }
        Ok(())
    }

    pub fn unit_direction(&self) -> Vec3 {
        Vec3::from(self.direction).normalize()
    }

    pub fn shade(&self, albedo: [f64; 3], normal: &Vec3) -> [f64; 3] {
        let f = self.ambient + self.diffuse * normal.dot(&self.unit_direction()).max(0.0);
        albedo.map(|a| a * f)
    }
}

/// Analytic ground-truth scene. Object ids are `0..K`, the background is `K - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SceneDoc", into = "SceneDoc")]
pub struct SceneSpec {
    primitives: Vec<Primitive>,
    bbox: Aabb,
    light: Light,
    num_objects: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    primitives: Vec<Primitive>,
    bbox: Aabb,
    #[serde(default)]
    light: Light,
}

impl TryFrom<SceneDoc> for SceneSpec {
    type Error = Error;

    fn try_from(doc: SceneDoc) -> Result<Self> {
        SceneSpec::new(doc.primitives, doc.bbox, doc.light)
    }
}

impl From<SceneSpec> for SceneDoc {
    fn from(s: SceneSpec) -> Self {
        SceneDoc {
            primitives: s.primitives,
            bbox: s.bbox,
            light: s.light,
        }
    }
}

impl SceneSpec {
    pub fn new(primitives: Vec<Primitive>, bbox: Aabb, light: Light) -> Result<Self> {
        bbox.validate()?;
        light.validate()?;
        for p in &primitives {
            p.validate()?;
        }
        let num_objects = primitives
            .iter()
            .map(|p| p.object_id + 1)
            .max()
            .ok_or_else(|| Error::invalid("scene needs at least one primitive"))?;
        let mut seen = vec![false; num_objects];
        for p in &primitives {
            seen[p.object_id] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!(
                "object ids must be exactly 0..{num_objects}; id {missing} has no primitive"
            )));
        }
        Ok(Self {
            primitives,
            bbox,
            light,
            num_objects,
        })
    }

    /// Sphere (id 0, r = 0.4) and box (id 1, half extent 0.3) resting on a
    /// floor (id 2, the background). The two objects interpenetrate slightly,
    /// so part of the box is hidden behind the sphere from many views.
    pub fn reference() -> Self {
        let prims = vec![
            Primitive::sphere(Vec3::new(-0.3, 0.1, -0.1), 0.4, [0.85, 0.2, 0.15], 0).unwrap(),
            Primitive::axis_box(Vec3::new(0.35, -0.1, -0.2), [0.3; 3], [0.2, 0.45, 0.85], 1)
                .unwrap(),
            Primitive::floor(-0.5, [0.75, 0.7, 0.55], 2).unwrap(),
        ];
        let bbox = Aabb::new([-1.0, -1.0, -0.6], [1.0, 1.0, 1.0]).unwrap();
        Self::new(prims, bbox, Light::default()).unwrap()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn light(&self) -> &Light {
        &self.light
    }

    pub fn num_objects(&self) -> usize {
        self.num_objects
    }

    pub fn background_id(&self) -> usize {
        self.num_objects - 1
    }

    /// Centroid of the non-background primitive origins, or the box center.
    pub fn centroid(&self) -> Vec3 {
        let fg: Vec<Vec3> = self
            .primitives
            .iter()
            .filter(|p| p.object_id != self.background_id())
            .map(|p| p.pose.translation())
            .collect();
        if fg.is_empty() {
            self.bbox.center()
        } else {
            fg.iter().sum::<Vec3>() / fg.len() as f64
        }
    }

    /// Per-object distances: the minimum over each object's primitives.
    pub fn object_sdfs(&self, p: &Vec3) -> Vec<f64> {
        let mut d = vec![f64::INFINITY; self.num_objects];
        for prim in &self.primitives {
            let v = prim.sdf(p);
            if v < d[prim.object_id] {
                d[prim.object_id] = v;
            }
        }
        d
    }

    /// Per-object distance and gradient of the closest primitive of each object.
    pub fn object_sdfs_with_gradient(&self, p: &Vec3) -> Vec<(f64, Vec3)> {
        let mut out = vec![(f64::INFINITY, Vec3::zeros()); self.num_objects];
        for prim in &self.primitives {
            let (v, g) = prim.sdf_with_gradient(p);
            if v < out[prim.object_id].0 {
                out[prim.object_id] = (v, g);
            }
        }
        out
    }

    /// Index of the primitive attaining the scene minimum.
    pub fn closest_primitive(&self, p: &Vec3) -> (f64, usize) {
        let d: Vec<f64> = self.primitives.iter().map(|q| q.sdf(p)).collect();
        compose_min(&d).expect("scene has primitives")
    }
}

/// Scene distance and the label of the closest object.
pub fn scene_sdf_analytic(scene: &SceneSpec, p: &Vec3) -> (f64, usize) {
    compose_min(&scene.object_sdfs(p)).expect("scene has objects")
}

/// First intersection `t > 0` of `o + t d` (unit `d`) with a sphere.
pub fn ray_sphere_intersection(
    origin: &Vec3,
    dir: &Vec3,
    center: &Vec3,
    radius: f64,
) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [-b - s, -b + s].into_iter().find(|t| *t > 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_sphere() -> Primitive {
        Primitive::sphere(Vec3::zeros(), 1.0, [1.0, 0.0, 0.0], 0).unwrap()
    }

    #[test]
    fn primitive_examples() {
        assert_eq!(unit_sphere().sdf(&Vec3::new(2.0, 0.0, 0.0)), 1.0);
        assert_eq!(unit_sphere().sdf(&Vec3::zeros()), -1.0);
        let floor = Primitive::floor(0.0, [0.5; 3], 0).unwrap();
        assert_eq!(primitive_sdf(&floor, &Vec3::new(5.0, 5.0, 0.25)), 0.25);
    }

    #[test]
    fn compose_min_examples() {
        assert_eq!(compose_min(&[0.5, -0.2, 1.0]).unwrap(), (-0.2, 1));
        assert_eq!(compose_min(&[0.3]).unwrap(), (0.3, 0));
        assert_eq!(compose_min(&[0.0, 0.0]).unwrap(), (0.0, 0));
        assert!(compose_min(&[]).is_err());
    }

    fn sphere_and_floor() -> SceneSpec {
        SceneSpec::new(
            vec![
                Primitive::sphere(Vec3::zeros(), 0.4, [1.0, 0.0, 0.0], 0).unwrap(),
                Primitive::floor(-0.5, [0.5; 3], 1).unwrap(),
            ],
            Aabb::cube(1.0).unwrap(),
            Light::default(),
        )
        .unwrap()
    }

    #[test]
    fn scene_examples() {
        let s = sphere_and_floor();
        assert_eq!(scene_sdf_analytic(&s, &Vec3::zeros()), (-0.4, 0));
        let (d, label) = scene_sdf_analytic(&s, &Vec3::new(0.0, 0.0, -0.5));
        assert_eq!(d, 0.0);
        assert_eq!(label, 1);
        let (d, label) = scene_sdf_analytic(&s, &Vec3::new(0.0, 0.0, 50.0));
        assert_eq!((d, label), (49.6, 0));
        let (d, label) = scene_sdf_analytic(&s, &Vec3::new(100.0, 0.0, 1.0));
        assert_eq!((d, label), (1.5, 1));
    }

    #[test]
    fn box_distances() {
        let b = Primitive::axis_box(Vec3::zeros(), [1.0, 2.0, 3.0], [0.0; 3], 0).unwrap();
        assert_eq!(b.sdf(&Vec3::new(2.0, 0.0, 0.0)), 1.0);
        assert_eq!(b.sdf(&Vec3::new(0.0, 0.0, 0.0)), -1.0);
        assert!((b.sdf(&Vec3::new(2.0, 3.0, 0.0)) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(b.sdf(&Vec3::new(0.5, 0.0, 2.9)), -0.10000000000000009);
        let (_, g) = b.sdf_with_gradient(&Vec3::new(0.5, 0.0, -2.9));
        assert_eq!(g, Vec3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn scene_validation() {
        let gap = SceneSpec::new(
            vec![
                Primitive::sphere(Vec3::zeros(), 0.4, [1.0; 3], 0).unwrap(),
                Primitive::floor(-0.5, [0.5; 3], 2).unwrap(),
            ],
            Aabb::cube(1.0).unwrap(),
            Light::default(),
        );
        assert!(gap.is_err());
        assert!(Primitive::sphere(Vec3::zeros(), 0.0, [1.0; 3], 0).is_err());
        assert!(Primitive::axis_box(Vec3::zeros(), [1.0, -1.0, 1.0], [1.0; 3], 0).is_err());
        assert!(Aabb::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn rotation_must_be_orthonormal() {
        let mut m = Matrix3::identity();
        assert!(RigidTransform::from_matrix(m, Vec3::zeros()).is_ok());
        m[(0, 1)] = 1e-8;
        assert!(RigidTransform::from_matrix(m, Vec3::zeros()).is_err());
        let reflect = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::from_matrix(reflect, Vec3::zeros()).is_err());
    }

    #[test]
    fn pose_round_trips() {
        let t = RigidTransform::from_axis_angle(
            Vec3::new(1.0, 2.0, -0.5),
            0.7,
            Vec3::new(0.1, -2.0, 3.0),
        )
        .unwrap();
        let back = RigidTransform::from_row_major(&t.to_row_major()).unwrap();
        let p = Vec3::new(0.3, 0.2, -1.0);
        assert!((t.apply_point(&p) - back.apply_point(&p)).norm() < 1e-15);
        let q = RigidTransform::from_quaternion(t.quaternion(), t.translation()).unwrap();
        assert!((q.apply_point(&p) - t.apply_point(&p)).norm() < 1e-14);
        assert!((t.inverse().apply_point(&t.apply_point(&p)) - p).norm() < 1e-14);
        assert!((t.compose(&t.inverse()).apply_point(&p) - p).norm() < 1e-14);
    }

    #[test]
    fn scene_json_round_trip() {
        let s = SceneSpec::reference();
        let text = s.to_json().unwrap();
        let back = SceneSpec::from_json(&text).unwrap();
        assert_eq!(back.num_objects(), 3);
        assert_eq!(back.background_id(), 2);
        let p = Vec3::new(0.1, 0.2, -0.3);
        assert_eq!(back.object_sdfs(&p), s.object_sdfs(&p));
        assert!(SceneSpec::from_json(&text.replace("\"bbox\"", "\"bounds\"")).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let t = RigidTransform::from_axis_angle(
            Vec3::new(0.2, 1.0, 0.3),
            1.1,
            Vec3::new(0.3, 0.0, -0.2),
        )
        .unwrap();
        let prims = [
            Primitive::new(Shape::Sphere { radius: 0.5 }, t.clone(), [0.0; 3], 0).unwrap(),
            Primitive::new(
                Shape::Box {
                    half_extents: [0.3, 0.2, 0.4],
                },
                t.clone(),
                [0.0; 3],
                0,
            )
            .unwrap(),
            Primitive::new(Shape::HalfSpace { offset: 0.1 }, t, [0.0; 3], 0).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for prim in &prims {
            for _ in 0..200 {
                let p = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let (_, g) = prim.sdf_with_gradient(&p);
                let fd = Vec3::from_fn(|i, _| {
                    let mut e = Vec3::zeros();
                    e[i] = h;
                    (prim.sdf(&(p + e)) - prim.sdf(&(p - e))) / (2.0 * h)
                });
                // Skip points next to a kink of the box distance.
                if (fd.norm() - 1.0).abs() > 1e-4 {
                    continue;
                }
                assert!((g - fd).norm() < 1e-6, "{prim:?} at {p:?}: {g:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn ray_box_interval() {
        let b = Aabb::cube(1.0).unwrap();
        let (t0, t1) = b
            .intersect_ray(&Vec3::new(0.0, 0.0, -3.0), &Vec3::z())
            .unwrap();
        assert_eq!((t0, t1), (2.0, 4.0));
        let (t0, t1) = b.intersect_ray(&Vec3::zeros(), &Vec3::x()).unwrap();
        assert_eq!((t0, t1), (0.0, 1.0));
        assert!(b
            .intersect_ray(&Vec3::new(0.0, 0.0, -3.0), &-Vec3::z())
            .is_none());
        assert!(b
            .intersect_ray(&Vec3::new(2.0, 0.0, -3.0), &Vec3::z())
            .is_none());
    }

    #[test]
    fn closed_form_sphere_hit() {
        let t =
            ray_sphere_intersection(&Vec3::new(0.0, 0.0, -3.0), &Vec3::z(), &Vec3::zeros(), 1.0);
        assert_eq!(t, Some(2.0));
        let t = ray_sphere_intersection(&Vec3::zeros(), &Vec3::z(), &Vec3::zeros(), 1.0);
        assert_eq!(t, Some(1.0));
    }
}
