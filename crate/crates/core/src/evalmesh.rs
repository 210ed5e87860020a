//! Zero-level-set meshes, surface sampling and the evaluation metrics
//! (Chamfer distance, PSNR, mIoU).
//!
//! Extraction splits every grid cell into six tetrahedra sharing the cell's
//! main diagonal and interpolates linearly along tetrahedron edges. Adjacent
//! cells agree on their shared face diagonals, so closed level sets give
//! closed meshes.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::datagen::{camera_rays, Dataset, Split};
use crate::error::{Error, Result};
use crate::fields::{sdf_values, SceneModel};
use crate::geometry::{Aabb, Primitive, SceneSpec, Shape, Vec3};
use crate::io;
use crate::rendering::{render_rays, RenderConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    /// Counter-clockwise seen from the positive side of the field.
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| self.triangle_area(t))
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= n) {
                return Err(Error::invalid(format!(
                    "triangle {i} indexes past {n} vertices"
                )));
            }
            if self.triangle_area(i) <= 0.0 {
                return Err(Error::invalid(format!("triangle {i} is degenerate")));
            }
        }
        Ok(())
    }

    /// Binary little-endian PLY.
    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        write!(
            buf,
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
            self.vertices.len(),
            self.triangles.len()
        )
        .expect("writing to memory");
        for v in &self.vertices {
            for c in v.iter() {
                buf.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        for t in &self.triangles {
            buf.push(3);
            for i in t {
                buf.extend_from_slice(&(*i as i32).to_le_bytes());
            }
        }
        io::write_atomic(path, &buf)
    }
}

/// Values of a scalar field on the `(res+1)³` lattice of `bbox`, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub bbox: Aabb,
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn points(bbox: &Aabb, resolution: usize) -> Vec<Vec3> {
        let n = resolution + 1;
        let step = bbox.extent() / resolution as f64;
        let mut pts = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    pts.push(Vec3::new(
                        lattice(bbox.min[0], step.x, i, resolution, bbox.max[0]),
                        lattice(bbox.min[1], step.y, j, resolution, bbox.max[1]),
                        lattice(bbox.min[2], step.z, k, resolution, bbox.max[2]),
                    ));
                }
            }
        }
        pts
    }

    pub fn sample(
        field: &(dyn Fn(&Vec3) -> f64 + Sync),
        bbox: &Aabb,
        resolution: usize,
    ) -> Result<Self> {
        check_resolution(resolution)?;
        bbox.validate()?;
        let values = Self::points(bbox, resolution)
            .par_iter()
            .map(field)
            .collect();
        Ok(Self {
            bbox: *bbox,
            resolution,
            values,
        })
    }

    pub fn cell_size(&self) -> Vec3 {
        self.bbox.extent() / self.resolution as f64
    }
}

fn lattice(min: f64, step: f64, i: usize, res: usize, max: f64) -> f64 {
    if i == res {
        max
    } else {
        min + step * i as f64
    }
}

fn check_resolution(resolution: usize) -> Result<()> {
    if resolution < 2 {
        return Err(Error::invalid(format!(
            "resolution must be at least 2, got {resolution}"
        )));
    }
    Ok(())
}

/// Zero level set of `field` sampled on a `resolution³`-cell grid.
pub fn marching_cubes(
    field: &(dyn Fn(&Vec3) -> f64 + Sync),
    bbox: &Aabb,
    resolution: usize,
) -> Result<TriangleMesh> {
    polygonize(&Grid::sample(field, bbox, resolution)?)
}

/// The six tetrahedra of a cell, as corner indices with bit 0 = x, 1 = y, 2 = z.
const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

pub fn polygonize(grid: &Grid) -> Result<TriangleMesh> {
    let res = grid.resolution;
    check_resolution(res)?;
    let n = res + 1;
    if grid.values.len() != n * n * n {
        return Err(Error::ShapeMismatch {
            op: "polygonize",
            expected: format!("{} grid values", n * n * n),
            found: format!("{}", grid.values.len()),
        });
    }
    if let Some(i) = grid.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("field value at grid point {i}"),
        });
    }
    let pts = Grid::points(&grid.bbox, res);
    let idx = |i: usize, j: usize, k: usize| (k * n + j) * n + i;
    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    // Interpolation always runs from the lower to the higher lattice index,
    // so every cell sharing an edge computes the same vertex.
    let mut vertex_on = |a: usize, b: usize, mesh: &mut TriangleMesh| -> u32 {
        let (lo, hi) = (a.min(b), a.max(b));
        let (vl, vh) = (grid.values[lo], grid.values[hi]);
        let key = if vl == 0.0 {
            (lo, lo)
        } else if vh == 0.0 {
            (hi, hi)
        } else {
            (lo, hi)
        };
        *edge_vertex.entry(key).or_insert_with(|| {
            let p = if key.0 == key.1 {
                pts[key.0]
            } else {
                pts[lo] + (pts[hi] - pts[lo]) * (vl / (vl - vh))
            };
            mesh.vertices.push(p);
            (mesh.vertices.len() - 1) as u32
        })
    };
    for k in 0..res {
        for j in 0..res {
            for i in 0..res {
                let corner = |c: usize| idx(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                for tet in TETS {
                    let g = tet.map(corner);
                    let inside: Vec<usize> = g
                        .iter()
                        .copied()
                        .filter(|&v| grid.values[v] < 0.0)
                        .collect();
                    let outside: Vec<usize> = g
                        .iter()
                        .copied()
                        .filter(|&v| grid.values[v] >= 0.0)
                        .collect();
                    let tris: Vec<[u32; 3]> = match inside.len() {
                        1 | 3 => {
                            let (apex, others) = if inside.len() == 1 {
                                (inside[0], &outside)
                            } else {
                                (outside[0], &inside)
                            };
                            let v: Vec<u32> = others
                                .iter()
                                .map(|&o| vertex_on(apex, o, &mut mesh))
                                .collect();
                            vec![[v[0], v[1], v[2]]]
                        }
                        2 => {
                            let (a, b, c, d) = (inside[0], inside[1], outside[0], outside[1]);
                            let ac = vertex_on(a, c, &mut mesh);
                            let ad = vertex_on(a, d, &mut mesh);
                            let bc = vertex_on(b, c, &mut mesh);
                            let bd = vertex_on(b, d, &mut mesh);
                            vec![[ac, ad, bd], [ac, bd, bc]]
                        }
                        _ => Vec::new(),
                    };
                    let out_dir: Vec3 = outside.iter().map(|&v| pts[v]).sum::<Vec3>()
                        / outside.len().max(1) as f64
                        - inside.iter().map(|&v| pts[v]).sum::<Vec3>() / inside.len().max(1) as f64;
                    for mut t in tris {
                        let [a, b, c] = t.map(|v| mesh.vertices[v as usize]);
                        let normal = (b - a).cross(&(c - a));
                        if !(normal.norm() > 0.0) || t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                            continue;
                        }
                        if normal.dot(&out_dir) < 0.0 {
                            t.swap(1, 2);
                        }
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    compact(&mut mesh);
    Ok(mesh)
}

/// Drops vertices no triangle refers to.
fn compact(mesh: &mut TriangleMesh) {
    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    for t in mesh.triangles.iter_mut() {
        for v in t.iter_mut() {
            if remap[*v as usize] == u32::MAX {
                remap[*v as usize] = vertices.len() as u32;
                vertices.push(mesh.vertices[*v as usize]);
            }
            *v = remap[*v as usize];
        }
    }
    mesh.vertices = vertices;
}

/// Mesh of the zero level set of one object channel.
pub fn extract_object_mesh(
    model: &dyn SceneModel,
    object_id: usize,
    bbox: &Aabb,
    resolution: usize,
) -> Result<TriangleMesh> {
    let k = model.num_objects();
    if object_id >= k {
        return Err(Error::ObjectOutOfRange {
            id: object_id,
            num_objects: k,
        });
    }
    polygonize(&model_grid(model, bbox, resolution, |row| row[object_id])?)
}

/// Mesh of the zero level set of the minimum over all channels.
pub fn extract_scene_mesh(
    model: &dyn SceneModel,
    bbox: &Aabb,
    resolution: usize,
) -> Result<TriangleMesh> {
    polygonize(&model_grid(model, bbox, resolution, |row| {
        row.iter().copied().fold(f64::INFINITY, f64::min)
    })?)
}

fn model_grid(
    model: &dyn SceneModel,
    bbox: &Aabb,
    resolution: usize,
    pick: impl Fn(&[f64]) -> f64,
) -> Result<Grid> {
    check_resolution(resolution)?;
    bbox.validate()?;
    let d = sdf_values(model, &Grid::points(bbox, resolution))?;
    Ok(Grid {
        bbox: *bbox,
        resolution,
        values: (0..d.rows()).map(|r| pick(d.row_slice(r))).collect(),
    })
}

/// `n` points uniformly distributed by area.
pub fn sample_mesh<R: Rng>(mesh: &TriangleMesh, n: usize, rng: &mut R) -> Result<Vec<Vec3>> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::invalid("cannot sample an empty mesh"));
    }
    Ok((0..n)
        .map(|_| {
            let x = rng.gen_range(0.0..total);
            let t = cumulative
                .partition_point(|&c| c <= x)
                .min(cumulative.len() - 1);
            let [a, b, c] = mesh.triangle(t);
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect())
}

/// Uniform samples of the part of the surface of the selected primitives
/// (one object, or all of them for `None`) that lies outside every other
/// selected primitive and inside `crop`.
pub fn sample_scene_surface<R: Rng>(
    scene: &SceneSpec,
    object: Option<usize>,
    n: usize,
    crop: &Aabb,
    rng: &mut R,
) -> Result<Vec<Vec3>> {
    if let Some(id) = object {
        if id >= scene.num_objects() {
            return Err(Error::ObjectOutOfRange {
                id,
                num_objects: scene.num_objects(),
            });
        }
    }
    let prims: Vec<&Primitive> = scene
        .primitives()
        .iter()
        .filter(|p| object.is_none_or(|id| p.object_id == id))
        .collect();
    let areas: Vec<f64> = prims.iter().map(|p| proposal_area(p, crop)).collect();
    let total: f64 = areas.iter().sum();
    let mut out = Vec::with_capacity(n);
    let max_tries = 1000 * n.max(1000);
    let mut tries = 0;
    while out.len() < n {
        tries += 1;
        if tries > max_tries {
            return Err(Error::invalid(
                "surface sampling accepted too few points inside the crop",
            ));
        }
        let mut x = rng.gen_range(0.0..total);
        let mut which = prims.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if x < *a {
                which = i;
                break;
            }
            x -= a;
        }
        let p = sample_primitive(prims[which], crop, rng);
        let hidden = prims
            .iter()
            .enumerate()
            .any(|(i, q)| i != which && q.sdf(&p) < -1e-9);
        if crop.contains(&p) && !hidden {
            out.push(p);
        }
    }
    Ok(out)
}

fn plane_proposal(crop: &Aabb) -> f64 {
    crop.extent().norm()
}

fn proposal_area(p: &Primitive, crop: &Aabb) -> f64 {
    match &p.shape {
        Shape::Sphere { radius } => 4.0 * std::f64::consts::PI * radius * radius,
        Shape::Box { half_extents: h } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
        Shape::HalfSpace { .. } => (2.0 * plane_proposal(crop)).powi(2),
    }
}

fn sample_primitive<R: Rng>(p: &Primitive, crop: &Aabb, rng: &mut R) -> Vec3 {
    let local = match &p.shape {
        Shape::Sphere { radius } => {
            let z: f64 = rng.gen_range(-1.0..1.0);
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            Vec3::new(r * phi.cos(), r * phi.sin(), z) * *radius
        }
        Shape::Box { half_extents: h } => {
            let faces = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let x = rng.gen_range(0.0..faces.iter().sum::<f64>());
            let axis = if x < faces[0] {
                0
            } else if x < faces[0] + faces[1] {
                1
            } else {
                2
            };
            let mut q = Vec3::new(
                rng.gen_range(-h[0]..h[0]),
                rng.gen_range(-h[1]..h[1]),
                rng.gen_range(-h[2]..h[2]),
            );
            q[axis] = if rng.gen::<bool>() { h[axis] } else { -h[axis] };
            q
        }
        Shape::HalfSpace { offset } => {
            // A square centered under the crop center, large enough to cover it.
            let c = p.pose.inverse_apply_point(&crop.center());
            let s = plane_proposal(crop);
            Vec3::new(
                c.x + rng.gen_range(-s..s),
                c.y + rng.gen_range(-s..s),
                *offset,
            )
        }
    };
    p.pose.apply_point(&local)
}

/// Symmetric mean of squared nearest-neighbor distances:
/// `½ (mean_a min_b ‖a−b‖² + mean_b min_a ‖a−b‖²)`.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid(
            "chamfer distance needs two non-empty point sets",
        ));
    }
    Ok(0.5 * (mean_nearest_sq(a, b) + mean_nearest_sq(b, a)))
}

/// Mean over `from` of the squared distance to the closest point of `to`.
pub fn mean_nearest_sq(from: &[Vec3], to: &[Vec3]) -> f64 {
    let tree = RTree::bulk_load(to.iter().map(|p| [p.x, p.y, p.z]).collect());
    let d: Vec<f64> = from
        .par_iter()
        .map(|p| {
            let q = tree
                .nearest_neighbor(&[p.x, p.y, p.z])
                .expect("non-empty tree");
            (p - Vec3::from(*q)).norm_squared()
        })
        .collect();
    d.iter().sum::<f64>() / from.len() as f64
}

pub const PSNR_CAP: f64 = 99.0;

/// `-10 log₁₀ MSE` over all channels, capped at 99 dB.
pub fn psnr(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            expected: format!("{} pixels", a.len()),
            found: format!("{}", b.len()),
        });
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    let mse = sum / (3 * a.len()) as f64;
    Ok(if mse < 1e-10 {
        PSNR_CAP
    } else {
        -10.0 * mse.log10()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Miou {
    /// IoU per class, `None` for classes absent from the ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Mean over classes present in `gt` of `|pred ∩ gt| / |pred ∪ gt|`.
pub fn miou(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<Miou> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "miou",
            expected: format!("{} labels", gt.len()),
            found: format!("{}", pred.len()),
        });
    }
    if let Some(&l) = pred.iter().chain(gt).find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: l,
            num_objects: num_classes,
        });
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    let mut present = vec![false; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        present[g] = true;
        if p == g {
            inter[g] += 1;
            union[g] += 1;
        } else {
            union[g] += 1;
            union[p] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| present[c].then(|| inter[c] as f64 / union[c] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(Miou { per_class, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Marching grid cells per axis.
    pub resolution: usize,
    /// Points sampled from each surface for the Chamfer distance.
    pub chamfer_samples: usize,
    /// Fraction of the box extent removed on every side before measuring.
    pub crop_margin: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            chamfer_samples: 100_000,
            crop_margin: 0.02,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub chamfer_variant: String,
    pub chamfer_samples: usize,
    pub resolution: usize,
    pub crop_margin: f64,
    pub cd_scene: Option<f64>,
    /// `None` where the extracted mesh is empty inside the crop.
    pub cd_per_object: Vec<Option<f64>>,
    /// Mean held-out PSNR in dB.
    pub psnr: Option<f64>,
    pub psnr_per_view: Vec<f64>,
    pub miou: Option<f64>,
    pub miou_per_class: Vec<Option<f64>>,
}

pub const CHAMFER_VARIANT: &str = "symmetric mean of squared nearest-neighbor distances";

/// Chamfer distance between a mesh and analytic surface samples, both
/// restricted to `crop`. `None` if the mesh has no area inside the crop.
pub fn mesh_chamfer<R: Rng>(
    mesh: &TriangleMesh,
    reference: &[Vec3],
    crop: &Aabb,
    n: usize,
    rng: &mut R,
) -> Result<Option<f64>> {
    if mesh.is_empty() {
        return Ok(None);
    }
    let pts: Vec<Vec3> = sample_mesh(mesh, n, rng)?
        .into_iter()
        .filter(|p| crop.contains(p))
        .collect();
    if pts.is_empty() {
        return Ok(None);
    }
    chamfer_distance(&pts, reference).map(Some)
}

/// Geometry metrics against the analytic scene: per-object meshes compared
/// with the full primitive surfaces (hidden parts included) and the scene
/// mesh with the visible union.
pub fn evaluate_geometry(
    model: &dyn SceneModel,
    scene: &SceneSpec,
    config: &EvalConfig,
) -> Result<(Option<f64>, Vec<Option<f64>>)> {
    let crop = scene.bbox().shrink(config.crop_margin)?;
    let bbox = scene.bbox();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.chamfer_samples;
    let mut per_object = Vec::with_capacity(scene.num_objects());
    for id in 0..scene.num_objects() {
        let mesh = extract_object_mesh(model, id, bbox, config.resolution)?;
        let gt = sample_scene_surface(scene, Some(id), n, &crop, &mut rng)?;
        per_object.push(mesh_chamfer(&mesh, &gt, &crop, n, &mut rng)?);
    }
    let mesh = extract_scene_mesh(model, bbox, config.resolution)?;
    let gt = sample_scene_surface(scene, None, n, &crop, &mut rng)?;
    let cd_scene = mesh_chamfer(&mesh, &gt, &crop, n, &mut rng)?;
    Ok((cd_scene, per_object))
}

/// Renders every held-out view: PSNR per view and mIoU over all pixels.
pub fn evaluate_views(
    model: &dyn SceneModel,
    dataset: &Dataset,
    render: &RenderConfig,
    seed: u64,
) -> Result<(Vec<f64>, Miou)> {
    let k = dataset.num_objects();
    let background = dataset.manifest.background_id;
    let mut psnrs = Vec::new();
    let mut pred_labels = Vec::new();
    let mut gt_labels = Vec::new();
    for view in dataset.split(Split::Test) {
        let rays = camera_rays(&view.camera, dataset.bbox());
        let out = render_rays(model, &rays, render, seed ^ view.id as u64)?;
        let colors: Vec<[f64; 3]> = out.iter().map(|o| o.color).collect();
        psnrs.push(psnr(&colors, &view.rgb)?);
        pred_labels.extend(out.iter().map(|o| o.label(background)));
        gt_labels.extend(view.labels.iter().map(|&l| l as usize));
    }
    if psnrs.is_empty() {
        return Err(Error::Dataset {
            path: dataset.root.clone(),
            reason: "no held-out views to evaluate".into(),
        });
    }
    Ok((psnrs, miou(&pred_labels, &gt_labels, k)?))
}

/// Full report; view metrics need a dataset, geometry metrics an analytic scene.
pub fn evaluate(
    model: &dyn SceneModel,
    dataset: Option<&Dataset>,
    scene: Option<&SceneSpec>,
    render: &RenderConfig,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    let mut report = MetricsReport {
        chamfer_variant: CHAMFER_VARIANT.into(),
        chamfer_samples: config.chamfer_samples,
        resolution: config.resolution,
        crop_margin: config.crop_margin,
        cd_scene: None,
        cd_per_object: Vec::new(),
        psnr: None,
        psnr_per_view: Vec::new(),
        miou: None,
        miou_per_class: Vec::new(),
    };
    if let Some(ds) = dataset {
        let (psnrs, m) = evaluate_views(model, ds, render, config.seed)?;
        report.psnr = Some(psnrs.iter().sum::<f64>() / psnrs.len() as f64);
        report.psnr_per_view = psnrs;
        report.miou = Some(m.mean);
        report.miou_per_class = m.per_class;
    }
    if let Some(scene) = scene {
        let (cd_scene, per_object) = evaluate_geometry(model, scene, config)?;
        report.cd_scene = cd_scene;
        report.cd_per_object = per_object;
    }
    Ok(report)
}
