//! Synthetic supervision: posed pinhole cameras, sphere-traced ground truth,
//! dataset files and the training ray sampler.
//!
//! Cameras follow the OpenCV convention: `x` right, `y` down, `z` forward in
//! camera space, pixel `(u, v)` covers `[u, u+1) × [v, v+1)`.

use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose_min, Aabb, RigidTransform, SceneSpec, Vec3};
use crate::io;
use crate::rendering::Ray;
use crate::training::TrainBatch;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square pixels, principal point at the image center.
    pub fn from_fov(width: u32, height: u32, fov_x_degrees: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * fov_x_degrees.to_radians()).tan();
        let k = Self {
            width,
            height,
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.width > 0
            && self.height > 0
            && self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx.is_finite()
            && self.cy.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// Camera-to-world.
    pub pose: RigidTransform,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: RigidTransform) -> Result<Self> {
        intrinsics.validate()?;
        Ok(Self { intrinsics, pose })
    }

    pub fn center(&self) -> Vec3 {
        self.pose.translation()
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.pose.apply_vector(&Vec3::z())
    }

    /// Unit world direction through continuous image coordinates `(x, y)`.
    pub fn direction(&self, x: f64, y: f64) -> Vec3 {
        let k = &self.intrinsics;
        let d = Vec3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
        self.pose.apply_vector(&d).normalize()
    }

    /// Image coordinates of a world point, if it lies in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        let q = self.pose.inverse_apply_point(p);
        if q.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy))
    }
}

/// Camera-to-world pose at `eye` looking at `target`, with `up` pointing
/// roughly towards the top of the image.
pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<RigidTransform> {
    let forward = target - eye;
    let right = forward.cross(up);
    if forward.norm() < 1e-12 || right.norm() < 1e-9 * forward.norm() {
        return Err(Error::invalid(
            "look_at needs distinct eye and target and a non-parallel up",
        ));
    }
    let forward = forward.normalize();
    let right = right.normalize();
    let down = forward.cross(&right);
    RigidTransform::from_matrix(Matrix3::from_columns(&[right, down, forward]), *eye)
}

/// Ray through the center of pixel `(u, v)`, clipped to `bbox`. Pixels whose
/// ray misses the box give a vacuum ray.
pub fn camera_ray(cam: &Camera, u: u32, v: u32, bbox: &Aabb) -> Result<Ray> {
    let k = &cam.intrinsics;
    if u >= k.width || v >= k.height {
        return Err(Error::invalid(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            k.width, k.height
        )));
    }
    Ok(clipped_ray(
        cam.center(),
        cam.direction(u as f64 + 0.5, v as f64 + 0.5),
        bbox,
    ))
}

fn clipped_ray(origin: Vec3, dir: Vec3, bbox: &Aabb) -> Ray {
    match bbox.intersect_ray(&origin, &dir) {
        Some((t0, t1)) => {
            Ray::new(origin, dir, t0, t1).unwrap_or_else(|_| Ray::vacuum(origin, dir))
        }
        None => Ray::vacuum(origin, dir),
    }
}

/// All pixel rays in row-major order.
pub fn camera_rays(cam: &Camera, bbox: &Aabb) -> Vec<Ray> {
    let k = &cam.intrinsics;
    (0..k.height)
        .flat_map(|v| (0..k.width).map(move |u| (u, v)))
        .map(|(u, v)| camera_ray(cam, u, v, bbox).expect("pixel in range"))
        .collect()
}

pub const TRACE_EPSILON: f64 = 1e-5;
pub const TRACE_MAX_STEPS: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub object_id: usize,
    pub normal: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceResult {
    pub hit: Option<Hit>,
    pub steps: usize,
    /// The step budget ran out; reported as a miss.
    pub exhausted: bool,
}

/// Sphere tracing over `[ray.near, ray.far]`, refined with Newton steps on
/// the hit object's distance.
pub fn sphere_trace(scene: &SceneSpec, ray: &Ray) -> TraceResult {
    let mut t = ray.near;
    if ray.is_vacuum() {
        return TraceResult {
            hit: None,
            steps: 0,
            exhausted: false,
        };
    }
    for step in 1..=TRACE_MAX_STEPS {
        let d = scene_distance(scene, &ray.at(t));
        if d < TRACE_EPSILON {
            return TraceResult {
                hit: Some(refine_hit(scene, ray, t)),
                steps: step,
                exhausted: false,
            };
        }
        t += d;
        if t > ray.far {
            return TraceResult {
                hit: None,
                steps: step,
                exhausted: false,
            };
        }
    }
    TraceResult {
        hit: None,
        steps: TRACE_MAX_STEPS,
        exhausted: true,
    }
}

fn scene_distance(scene: &SceneSpec, p: &Vec3) -> f64 {
    scene
        .object_sdfs(p)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

fn refine_hit(scene: &SceneSpec, ray: &Ray, mut t: f64) -> Hit {
    for _ in 0..4 {
        let (d, g) = closest(scene, &ray.at(t));
        let slope = g.dot(&ray.direction);
        if d.abs() < 1e-14 || slope > -0.05 {
            break;
        }
        let next = t - d / slope;
        let (dn, _) = closest(scene, &ray.at(next));
        if !(dn.abs() < d.abs()) || next < ray.near {
            break;
        }
        t = next;
    }
    let point = ray.at(t);
    let dists = scene.object_sdfs(&point);
    let (_, object_id) = compose_min(&dists).expect("scene has objects");
    let (_, normal) = closest(scene, &point);
    Hit {
        t,
        point,
        object_id,
        normal,
    }
}

/// Distance and gradient of the closest object at `p`.
fn closest(scene: &SceneSpec, p: &Vec3) -> (f64, Vec3) {
    let all = scene.object_sdfs_with_gradient(p);
    let d: Vec<f64> = all.iter().map(|(d, _)| *d).collect();
    let (_, i) = compose_min(&d).expect("scene has objects");
    all[i]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetOptions {
    pub views: usize,
    pub width: u32,
    pub height: u32,
    pub fov_degrees: f64,
    /// Camera distance from the scene centroid.
    pub distance: f64,
    /// Relative random variation of the distance.
    pub distance_jitter: f64,
    pub elevation_min_degrees: f64,
    pub elevation_max_degrees: f64,
    pub train_fraction: f64,
    pub seed: u64,
    /// Positive values dilate object masks by that many pixels, negative
    /// values erode them.
    pub mask_perturbation: i32,
    /// Strength of an optional Blinn-Phong highlight.
    pub specular: f64,
    pub shininess: f64,
    /// Color of pixels whose ray hits nothing.
    pub background: [f64; 3],
    /// Every object must be visible in at least this fraction of views.
    pub min_visible_fraction: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            views: 40,
            width: 64,
            height: 64,
            fov_degrees: 45.0,
            distance: 2.8,
            distance_jitter: 0.05,
            elevation_min_degrees: 20.0,
            elevation_max_degrees: 60.0,
            train_fraction: 0.8,
            seed: 0,
            mask_perturbation: 0,
            specular: 0.0,
            shininess: 32.0,
            background: [0.0; 3],
            min_visible_fraction: 0.75,
        }
    }
}

impl DatasetOptions {
    pub fn validate(&self) -> Result<()> {
        let checks: [(bool, &str); 7] = [
            (self.views >= 1, "views must be at least 1"),
            (
                self.width >= 1 && self.height >= 1,
                "image size must be positive",
            ),
            (
                self.fov_degrees > 0.0 && self.fov_degrees < 180.0,
                "fov_degrees must lie in (0, 180)",
            ),
            (
                self.distance > 0.0 && (0.0..1.0).contains(&self.distance_jitter),
                "invalid camera distance",
            ),
            (
                self.elevation_min_degrees <= self.elevation_max_degrees
                    && self.elevation_min_degrees >= -90.0
                    && self.elevation_max_degrees <= 89.0,
                "invalid elevation range",
            ),
            (
                (0.0..=1.0).contains(&self.train_fraction),
                "train_fraction must lie in [0,1]",
            ),
            (
                self.specular >= 0.0
                    && self.shininess > 0.0
                    && self.background.iter().all(|c| (0.0..=1.0).contains(c)),
                "invalid shading options",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::config(*msg)),
            None => Ok(()),
        }
    }
}

/// Ground-truth buffers of one view, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthView {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<[f64; 3]>,
    pub labels: Vec<u8>,
    /// Ray distance to the first surface, `∞` on a miss.
    pub depth: Vec<f64>,
    /// Pixels whose trace ran out of steps.
    pub exhausted: usize,
}

/// Color, label, depth and whether the trace ran out of steps.
type TracedPixel = ([f64; 3], u8, f64, bool);

/// Sphere-traces every pixel: shaded albedo, hit label (background on a
/// miss) and hit distance.
pub fn render_ground_truth(
    scene: &SceneSpec,
    cam: &Camera,
    options: &DatasetOptions,
) -> Result<GroundTruthView> {
    if scene.num_objects() > 256 {
        return Err(Error::invalid("label masks hold at most 256 objects"));
    }
    let k = cam.intrinsics;
    let background = scene.background_id() as u8;
    let light = scene.light();
    let to_light = light.unit_direction();
    let rows: Vec<Vec<TracedPixel>> = (0..k.height)
        .into_par_iter()
        .map(|v| {
            (0..k.width)
                .map(|u| {
                    let ray = camera_ray(cam, u, v, scene.bbox()).expect("pixel in range");
                    let tr = sphere_trace(scene, &ray);
                    match tr.hit {
                        None => (options.background, background, f64::INFINITY, tr.exhausted),
                        Some(h) => {
                            let albedo = albedo_of(scene, &h.point, h.object_id);
                            let mut c = light.shade(albedo, &h.normal);
                            if options.specular > 0.0 {
                                let half = (to_light - ray.direction).normalize();
                                let s = options.specular
                                    * h.normal.dot(&half).max(0.0).powf(options.shininess);
                                c = c.map(|x| (x + s).min(1.0));
                            }
                            (c, h.object_id as u8, h.t, false)
                        }
                    }
                })
                .collect()
        })
        .collect();
    let mut out = GroundTruthView {
        width: k.width,
        height: k.height,
        rgb: Vec::with_capacity(k.num_pixels()),
        labels: Vec::with_capacity(k.num_pixels()),
        depth: Vec::with_capacity(k.num_pixels()),
        exhausted: 0,
    };
    for (c, l, d, e) in rows.into_iter().flatten() {
        out.rgb.push(c);
        out.labels.push(l);
        out.depth.push(d);
        out.exhausted += e as usize;
    }
    Ok(out)
}

/// Albedo of the closest primitive belonging to `object_id`.
fn albedo_of(scene: &SceneSpec, p: &Vec3, object_id: usize) -> [f64; 3] {
    scene
        .primitives()
        .iter()
        .filter(|q| q.object_id == object_id)
        .min_by(|a, b| a.sdf(p).total_cmp(&b.sdf(p)))
        .map(|q| q.albedo)
        .expect("object has a primitive")
}

/// Grows (positive `pixels`) or shrinks object regions; the background label
/// is the one that gives way or takes over.
pub fn perturb_mask(
    labels: &[u8],
    width: u32,
    height: u32,
    background: u8,
    pixels: i32,
) -> Vec<u8> {
    let (w, h) = (width as usize, height as usize);
    let mut cur = labels.to_vec();
    for _ in 0..pixels.unsigned_abs() {
        let prev = cur.clone();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let mut neighbors = [
                    (x.wrapping_sub(1), y),
                    (x + 1, y),
                    (x, y.wrapping_sub(1)),
                    (x, y + 1),
                ]
                .into_iter()
                .filter(|&(nx, ny)| nx < w && ny < h)
                .map(|(nx, ny)| prev[ny * w + nx]);
                if pixels > 0 {
                    if prev[i] == background {
                        if let Some(l) = neighbors.filter(|&l| l != background).min() {
                            cur[i] = l;
                        }
                    }
                } else if prev[i] != background && neighbors.any(|l| l != prev[i]) {
                    cur[i] = background;
                }
            }
        }
    }
    cur
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub id: usize,
    /// Camera-to-world, 4×4 row-major.
    pub pose: [f64; 16],
    pub image: String,
    pub mask: String,
    pub depth: String,
    pub split: Split,
}

pub const MANIFEST_FORMAT: &str = "objsdf-dataset";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub num_objects: usize,
    pub background_id: usize,
    pub bbox: Aabb,
    pub intrinsics: Intrinsics,
    pub background: [f64; 3],
    pub views: Vec<ViewEntry>,
    /// Number of views in which each object appears.
    pub visibility: Vec<usize>,
    pub options: DatasetOptions,
    /// The analytic scene the views were rendered from.
    pub scene: Option<SceneSpec>,
}

/// Cameras on the upper hemisphere around the scene centroid.
pub fn hemisphere_cameras(scene: &SceneSpec, options: &DatasetOptions) -> Result<Vec<Camera>> {
    options.validate()?;
    let k = Intrinsics::from_fov(options.width, options.height, options.fov_degrees)?;
    let target = scene.centroid();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    (0..options.views)
        .map(|_| {
            let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
            let el = if options.elevation_min_degrees < options.elevation_max_degrees {
                rng.gen_range(options.elevation_min_degrees..options.elevation_max_degrees)
            } else {
                options.elevation_min_degrees
            }
            .to_radians();
            let r = options.distance * (1.0 + options.distance_jitter * rng.gen_range(-1.0..=1.0));
            let eye = target
                + r * Vec3::new(el.cos() * azimuth.cos(), el.cos() * azimuth.sin(), el.sin());
            Camera::new(k, look_at(&eye, &target, &Vec3::z())?)
        })
        .collect()
}

/// Renders `options.views` views of `scene` into `out_dir` and writes the
/// manifest last.
pub fn generate_dataset(
    scene: &SceneSpec,
    options: &DatasetOptions,
    out_dir: &Path,
) -> Result<Manifest> {
    let cameras = hemisphere_cameras(scene, options)?;
    let k = scene.num_objects();
    let background = scene.background_id() as u8;
    let mut order: Vec<usize> = (0..cameras.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    rng.set_stream(1);
    order.shuffle(&mut rng);
    let n_train = (options.train_fraction * cameras.len() as f64).round() as usize;
    let mut split = vec![Split::Test; cameras.len()];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }

    let mut visibility = vec![0usize; k];
    let mut views = Vec::with_capacity(cameras.len());
    for (id, cam) in cameras.iter().enumerate() {
        let gt = render_ground_truth(scene, cam, options)?;
        let mut seen = vec![false; k];
        for &l in &gt.labels {
            seen[l as usize] = true;
        }
        for (v, s) in visibility.iter_mut().zip(&seen) {
            *v += *s as usize;
        }
        let labels = perturb_mask(
            &gt.labels,
            gt.width,
            gt.height,
            background,
            options.mask_perturbation,
        );
        let entry = ViewEntry {
            id,
            pose: cam.pose.to_row_major(),
            image: format!("images/view_{id:03}.png"),
            mask: format!("masks/view_{id:03}.png"),
            depth: format!("depth/view_{id:03}.f32"),
            split: split[id],
        };
        io::write_rgb_png(&out_dir.join(&entry.image), gt.width, gt.height, &gt.rgb)?;
        io::write_gray_png(&out_dir.join(&entry.mask), gt.width, gt.height, &labels)?;
        io::write_f32_raw(&out_dir.join(&entry.depth), &gt.depth)?;
        views.push(entry);
    }

    let needed = (options.min_visible_fraction * cameras.len() as f64).ceil() as usize;
    if let Some(id) = visibility.iter().position(|&v| v < needed) {
        return Err(Error::Dataset {
            path: out_dir.into(),
            reason: format!(
                "object {id} is visible in {} of {} views, fewer than the required {needed}",
                visibility[id],
                cameras.len()
            ),
        });
    }

    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        num_objects: k,
        background_id: scene.background_id(),
        bbox: *scene.bbox(),
        intrinsics: cameras[0].intrinsics,
        background: options.background,
        views,
        visibility,
        options: options.clone(),
        scene: Some(scene.clone()),
    };
    io::write_json_atomic(&out_dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

/// A loaded view: camera, colors in `[0,1]` and labels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub id: usize,
    pub camera: Camera,
    pub rgb: Vec<[f64; 3]>,
    pub labels: Vec<u8>,
    pub split: Split,
    pub depth_file: PathBuf,
}

impl View {
    pub fn depth(&self) -> Result<Vec<f32>> {
        io::read_f32_raw(&self.depth_file)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub views: Vec<View>,
}

impl Dataset {
    /// Reads a manifest (or a directory containing one) and all its images.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_NAME)
        } else {
            path.to_path_buf()
        };
        let root = manifest_path
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf();
        let bad = |reason: String| Error::Dataset {
            path: manifest_path.clone(),
            reason,
        };
        let manifest: Manifest = serde_json::from_str(&io::read_to_string(&manifest_path)?)
            .map_err(|e| bad(format!("malformed manifest: {e}")))?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(bad(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        if manifest.num_objects == 0 || manifest.background_id >= manifest.num_objects {
            return Err(bad("background id out of range".into()));
        }
        manifest.intrinsics.validate()?;
        manifest.bbox.validate()?;
        let k = manifest.intrinsics;
        let mut views = Vec::with_capacity(manifest.views.len());
        for e in &manifest.views {
            let camera = Camera::new(k, RigidTransform::from_row_major(&e.pose)?)?;
            let (w, h, rgb) = io::read_rgb_png(&root.join(&e.image))?;
            let (mw, mh, labels) = io::read_gray_png(&root.join(&e.mask))?;
            if (w, h) != (k.width, k.height) || (mw, mh) != (k.width, k.height) {
                return Err(bad(format!(
                    "view {} does not match the {}x{} intrinsics",
                    e.id, k.width, k.height
                )));
            }
            if let Some(&l) = labels.iter().find(|&&l| l as usize >= manifest.num_objects) {
                return Err(Error::LabelOutOfRange {
                    label: l as usize,
                    num_objects: manifest.num_objects,
                });
            }
            views.push(View {
                id: e.id,
                camera,
                rgb,
                labels,
                split: e.split,
                depth_file: root.join(&e.depth),
            });
        }
        Ok(Self {
            root,
            manifest,
            views,
        })
    }

    pub fn num_objects(&self) -> usize {
        self.manifest.num_objects
    }

    pub fn bbox(&self) -> &Aabb {
        &self.manifest.bbox
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &View> {
        self.views.iter().filter(move |v| v.split == split)
    }
}

/// Uniform sampling of non-vacuum pixel rays from one split.
#[derive(Clone, Debug)]
pub struct RaySampler {
    rays: Vec<Ray>,
    colors: Vec<[f64; 3]>,
    labels: Vec<usize>,
}

impl RaySampler {
    pub fn new(dataset: &Dataset, split: Split) -> Result<Self> {
        let mut s = Self {
            rays: Vec::new(),
            colors: Vec::new(),
            labels: Vec::new(),
        };
        for view in dataset.split(split) {
            for (i, ray) in camera_rays(&view.camera, dataset.bbox())
                .into_iter()
                .enumerate()
            {
                if ray.is_vacuum() {
                    continue;
                }
                s.rays.push(ray);
                s.colors.push(view.rgb[i]);
                s.labels.push(view.labels[i] as usize);
            }
        }
        if s.rays.is_empty() {
            return Err(Error::Dataset {
                path: dataset.root.clone(),
                reason: format!("split {split:?} has no rays inside the bounding box"),
            });
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// `n` rays drawn with replacement.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> TrainBatch {
        let mut b = TrainBatch::default();
        for _ in 0..n {
            let i = rng.gen_range(0..self.rays.len());
            b.rays.push(self.rays[i].clone());
            b.colors.push(self.colors[i]);
            b.labels.push(self.labels[i]);
        }
        b
    }
}
