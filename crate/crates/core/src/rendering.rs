//! Volume rendering of object-compositional SDF fields.
//!
//! Density comes from the scene distance `min_i d_i` through a Laplace CDF,
//! semantics from each object distance through a scaled sigmoid. Both are
//! integrated with the same quadrature weights `w_j = T_j (1 - e^{-σ_j δ_j})`.

use objsdf_autodiff::{Matrix, Tape, TapeError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{scene_sdf_and_normals, Binding, GeometryOutput, SceneModel};
use crate::geometry::Vec3;

/// Which side of the surface receives high density.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityVariant {
    /// High density inside (negative distance).
    #[default]
    Mirrored,
    /// The branches applied to `d` itself, which makes deep interiors empty
    /// under the negative-inside convention. Kept for comparison only.
    AsPrinted,
}

impl DensityVariant {
    pub fn is_mirrored(self) -> bool {
        self == DensityVariant::Mirrored
    }
}

/// `σ(d) = (1 - ½e^{d/β})/β` for `d ≤ 0`, `e^{-d/β}/(2β)` for `d > 0`.
pub fn density_from_sdf(d: f64, beta: f64) -> f64 {
    density_from_sdf_variant(d, beta, DensityVariant::Mirrored)
}

pub fn density_from_sdf_variant(d: f64, beta: f64, variant: DensityVariant) -> f64 {
    let d = if variant.is_mirrored() { d } else { -d };
    if d <= 0.0 {
        (1.0 - 0.5 * (d / beta).exp()) / beta
    } else {
        0.5 * (-d / beta).exp() / beta
    }
}

/// `s(d) = γ / (1 + e^{γd})`, evaluated without overflow.
pub fn semantic_from_sdf(d: f64, gamma: f64) -> f64 {
    let x = gamma * d;
    if x > 0.0 {
        let e = (-x).exp();
        gamma * e / (1.0 + e)
    } else {
        gamma / (1.0 + x.exp())
    }
}

/// `∂s/∂d = -γ² e^{γd} / (1 + e^{γd})²`.
pub fn semantic_derivative(d: f64, gamma: f64) -> f64 {
    let e = (-(gamma * d).abs()).exp();
    -gamma * gamma * e / ((1.0 + e) * (1.0 + e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quadrature {
    /// `T_j`, transmittance before sample `j`.
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
    /// Transmittance past the last segment.
    pub residual: f64,
    pub opacity: f64,
}

/// Transmittances and weights for densities `σ` over segments `δ`.
pub fn quadrature_weights(sigma: &[f64], delta: &[f64]) -> Result<Quadrature> {
    if sigma.len() != delta.len() {
        return Err(Error::ShapeMismatch {
            op: "quadrature_weights",
            expected: format!("{} segment lengths", sigma.len()),
            found: format!("{}", delta.len()),
        });
    }
    if sigma.iter().any(|s| !(*s >= 0.0)) || delta.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::invalid("quadrature needs σ ≥ 0 and δ > 0"));
    }
    let mut transmittance = Vec::with_capacity(sigma.len());
    let mut weights = Vec::with_capacity(sigma.len());
    let mut optical = 0.0f64;
    for (s, d) in sigma.iter().zip(delta) {
        let tau = s * d;
        let t = (-optical).exp();
        transmittance.push(t);
        weights.push(t * -(-tau).exp_m1());
        optical += tau;
    }
    let residual = (-optical).exp();
    let opacity = weights.iter().sum();
    Ok(Quadrature {
        transmittance,
        weights,
        residual,
        opacity,
    })
}

/// Softmax of a rendered semantic vector.
pub fn semantic_probabilities(s: &[f64]) -> Vec<f64> {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `r(v) = o + v d` restricted to `[near, far]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64) -> Result<Self> {
        let ok = origin.iter().all(|v| v.is_finite())
            && (direction.norm() - 1.0).abs() <= 1e-9
            && near.is_finite()
            && far.is_finite()
            && near >= 0.0
            && near < far;
        if !ok {
            return Err(Error::invalid(format!(
                "ray needs a unit direction and 0 ≤ near < far, got |d|={} near={near} far={far}",
                direction.norm()
            )));
        }
        Ok(Self {
            origin,
            direction,
            near,
            far,
        })
    }

    /// A ray that misses the scene bounds; its interval is empty.
    pub fn vacuum(origin: Vec3, direction: Vec3) -> Self {
        Self {
            origin,
            direction,
            near: 0.0,
            far: 0.0,
        }
    }

    pub fn is_vacuum(&self) -> bool {
        !(self.near < self.far)
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Randomize positions within strata and draw fine samples at random.
    pub jitter: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_fine: 64,
            jitter: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_coarse < 2 {
            return Err(Error::config("n_coarse must be at least 2"));
        }
        Ok(())
    }

    pub fn samples_per_ray(&self) -> usize {
        self.n_coarse + self.n_fine
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub sampling: SamplingConfig,
    /// Color seen through the residual transmittance.
    pub background: [f64; 3],
    pub density: DensityVariant,
    /// Floor on opacity when normalizing expected depth.
    pub depth_epsilon: f64,
    /// Rays per tape during inference.
    pub chunk_rays: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingConfig::default(),
            background: [0.0; 3],
            density: DensityVariant::Mirrored,
            depth_epsilon: 1e-6,
            chunk_rays: 64,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::config("background color must lie in [0,1]"));
        }
        if !(self.depth_epsilon > 0.0) || self.chunk_rays == 0 {
            return Err(Error::config(
                "depth_epsilon and chunk_rays must be positive",
            ));
        }
        Ok(())
    }
}

/// One depth per stratum of `[near, far]`: the stratum's left edge, or a
/// uniform position inside it when `rng` is given.
pub fn stratified_depths<R: Rng>(near: f64, far: f64, n: usize, rng: Option<&mut R>) -> Vec<f64> {
    let step = (far - near) / n as f64;
    match rng {
        Some(rng) => (0..n)
            .map(|j| near + (j as f64 + rng.gen::<f64>()) * step)
            .collect(),
        None => (0..n).map(|j| near + j as f64 * step).collect(),
    }
}

/// Segment lengths to the next depth, the last one reaching `far`.
pub fn segment_lengths(depths: &[f64], far: f64) -> Vec<f64> {
    let mut out: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(last) = depths.last() {
        out.push(far - last);
    }
    out
}

/// Draws `n` depths from the piecewise-constant distribution that puts
/// `weights[j]` uniformly on `[depths[j], depths[j+1])` (the last segment ends
/// at `far`). Falls back to uniform on `[near, far]` when all weights vanish.
pub fn importance_depths<R: Rng>(
    depths: &[f64],
    weights: &[f64],
    near: f64,
    far: f64,
    n: usize,
    rng: Option<&mut R>,
) -> Vec<f64> {
    let u: Vec<f64> = match rng {
        Some(rng) => (0..n).map(|_| rng.gen::<f64>()).collect(),
        None => (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect(),
    };
    let total: f64 = weights.iter().sum();
    if !(total > 1e-12) {
        return u.iter().map(|x| near + x * (far - near)).collect();
    }
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cdf.push(acc);
    }
    let last = weights.len() - 1;
    u.iter()
        .map(|&x| {
            let x = x * acc;
            // First segment whose upper CDF edge exceeds x.
            let j = cdf[1..].partition_point(|c| *c <= x).min(last);
            let lo = depths[j];
            let hi = if j + 1 < depths.len() {
                depths[j + 1]
            } else {
                far
            };
            let span = cdf[j + 1] - cdf[j];
            let frac = if span > 0.0 {
                ((x - cdf[j]) / span).clamp(0.0, 1.0)
            } else {
                0.5
            };
            lo + frac * (hi - lo)
        })
        .collect()
}

/// Sorted union of two depth lists. Non-increasing neighbours are pushed
/// apart by `1e-9·(far - near)`.
pub fn merge_depths(coarse: &[f64], fine: &[f64], near: f64, far: f64) -> Vec<f64> {
    let mut all: Vec<f64> = coarse.iter().chain(fine).copied().collect();
    all.sort_by(f64::total_cmp);
    let eps = 1e-9 * (far - near);
    for i in 1..all.len() {
        if all[i] <= all[i - 1] {
            all[i] = all[i - 1] + eps;
        }
    }
    all
}

/// Depths for one ray given a density probe `σ(depths)`.
pub fn sample_ray<R: Rng>(
    ray: &Ray,
    config: &SamplingConfig,
    density: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    config.validate()?;
    if ray.is_vacuum() {
        return Err(Error::invalid("cannot sample a vacuum ray"));
    }
    let jitter = config.jitter;
    let coarse = stratified_depths(
        ray.near,
        ray.far,
        config.n_coarse,
        jitter.then_some(&mut *rng),
    );
    if config.n_fine == 0 {
        return Ok(coarse);
    }
    let sigma = density(&coarse)?;
    let q = quadrature_weights(&sigma, &segment_lengths(&coarse, ray.far))?;
    let fine = importance_depths(
        &coarse,
        &q.weights,
        ray.near,
        ray.far,
        config.n_fine,
        jitter.then_some(rng),
    );
    Ok(merge_depths(&coarse, &fine, ray.near, ray.far))
}

/// Depths for many rays; the coarse pass evaluates `model` once on all rays.
pub fn sample_rays<R: Rng>(
    model: &dyn SceneModel,
    rays: &[Ray],
    config: &RenderConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let sc = &config.sampling;
    sc.validate()?;
    let coarse: Vec<Vec<f64>> = rays
        .iter()
        .map(|r| stratified_depths(r.near, r.far, sc.n_coarse, sc.jitter.then_some(&mut *rng)))
        .collect();
    if sc.n_fine == 0 || rays.is_empty() {
        return Ok(coarse);
    }
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, false)?;
    let beta = tape.value(binding.beta).item();
    let points = ray_points(rays, &coarse);
    let g = model.geometry(&mut tape, &binding, &points, false)?;
    let sdf = tape.value(g.sdf);
    let mut out = Vec::with_capacity(rays.len());
    for (i, (ray, depths)) in rays.iter().zip(&coarse).enumerate() {
        let sigma: Vec<f64> = (0..sc.n_coarse)
            .map(|j| {
                let row = sdf.row_slice(i * sc.n_coarse + j);
                let d = row.iter().copied().fold(f64::INFINITY, f64::min);
                density_from_sdf_variant(d, beta, config.density)
            })
            .collect();
        let q = quadrature_weights(&sigma, &segment_lengths(depths, ray.far))?;
        let fine = importance_depths(
            depths,
            &q.weights,
            ray.near,
            ray.far,
            sc.n_fine,
            sc.jitter.then_some(&mut *rng),
        );
        out.push(merge_depths(depths, &fine, ray.near, ray.far));
    }
    Ok(out)
}

fn ray_points(rays: &[Ray], depths: &[Vec<f64>]) -> Matrix {
    let n: usize = depths.iter().map(Vec::len).sum();
    let mut data = Vec::with_capacity(3 * n);
    for (r, ds) in rays.iter().zip(depths) {
        for &t in ds {
            data.extend(r.at(t).iter());
        }
    }
    Matrix::from_vec(n, 3, data)
}

/// Per-object depth and opacity, rendered with each object's own density.
#[derive(Clone, Debug)]
pub struct ObjectTerms {
    /// `R×K`.
    pub depth: Var,
    /// `R×K`.
    pub opacity: Var,
}

/// Differentiable outputs for a batch of `R` rays with `S` samples each.
#[derive(Clone, Debug)]
pub struct RenderedBatch {
    /// `R×3`.
    pub color: Var,
    /// `R×K`.
    pub semantic: Var,
    /// `R×1`.
    pub opacity: Var,
    /// `R×1`.
    pub depth: Var,
    /// `R×S`.
    pub weights: Var,
    pub objects: Option<ObjectTerms>,
    /// Field evaluation at all ray samples followed by any extra points.
    pub geometry: GeometryOutput,
}

/// Rows `start..end` of a geometry evaluation.
pub fn slice_geometry(
    tape: &mut Tape,
    g: &GeometryOutput,
    start: usize,
    end: usize,
) -> Result<GeometryOutput> {
    let n = g.num_points;
    if start == 0 && end == n {
        return Ok(g.clone());
    }
    let sdf = tape.slice_rows(g.sdf, start, end)?;
    let feature = tape.slice_rows(g.feature, start, end)?;
    let gradient = match g.gradient {
        Some(gr) => {
            let parts = (0..3)
                .map(|a| tape.slice_rows(gr, a * n + start, a * n + end))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Some(tape.concat_rows(&parts)?)
        }
        None => None,
    };
    Ok(GeometryOutput {
        sdf,
        feature,
        gradient,
        num_points: end - start,
    })
}

/// Records `(weights R×S, opacity R×1, residual R×1)` for sample densities
/// laid out ray-major in an `(R·S)×1` node.
fn quadrature_on_tape(
    tape: &mut Tape,
    sigma: Var,
    deltas: Var,
    rays: usize,
    samples: usize,
) -> Result<(Var, Var, Var)> {
    let tau = tape.mul(sigma, deltas)?;
    let tau = tape.reshape(tau, rays, samples)?;
    let before = tape.cumsum_exclusive(tau)?;
    let neg = tape.neg(before)?;
    let t = tape.exp(neg)?;
    let neg_tau = tape.neg(tau)?;
    let em1 = tape.expm1(neg_tau)?;
    let alpha = tape.neg(em1)?;
    let w = tape.mul(t, alpha)?;
    let opacity = tape.row_sum(w)?;
    let total = tape.row_sum(tau)?;
    let neg_total = tape.neg(total)?;
    let residual = tape.exp(neg_total)?;
    Ok((w, opacity, residual))
}

/// `Σ_j w_j x_j` per ray for an `(R·S)×C` node `x`.
fn integrate(tape: &mut Tape, w_col: Var, x: Var, samples: usize) -> Result<Var> {
    let wx = tape.mul(x, w_col)?;
    Ok(tape.sum_row_groups(wx, samples)?)
}

/// Renders non-vacuum rays with the given depths on `tape`.
///
/// `extra_points` are evaluated together with the samples (their geometry is
/// appended to [`RenderedBatch::geometry`]) but do not contribute to the image.
#[allow(clippy::too_many_arguments)]
pub fn render_on_tape(
    model: &dyn SceneModel,
    tape: &mut Tape,
    binding: &Binding,
    rays: &[Ray],
    depths: &[Vec<f64>],
    extra_points: Option<&Matrix>,
    config: &RenderConfig,
    object_terms: bool,
) -> Result<RenderedBatch> {
    let r = rays.len();
    if r == 0 || depths.len() != r {
        return Err(Error::invalid(format!(
            "{} rays with {} depth lists",
            r,
            depths.len()
        )));
    }
    let s = depths[0].len();
    if s == 0 || depths.iter().any(|d| d.len() != s) {
        return Err(Error::invalid(
            "every ray needs the same non-zero sample count",
        ));
    }
    if rays.iter().any(Ray::is_vacuum) {
        return Err(Error::invalid("vacuum rays cannot be rendered on a tape"));
    }
    let m = r * s;
    let k = model.num_objects();
    let samples = ray_points(rays, depths);
    let points = match extra_points {
        Some(extra) if extra.rows() > 0 => {
            let mut data = samples.data().to_vec();
            data.extend_from_slice(extra.data());
            Matrix::from_vec(m + extra.rows(), 3, data)
        }
        _ => samples.clone(),
    };
    let mut dirs = Vec::with_capacity(3 * m);
    let mut deltas = Vec::with_capacity(m);
    let mut depth_values = Vec::with_capacity(m);
    for (ray, ds) in rays.iter().zip(depths) {
        for _ in 0..s {
            dirs.extend(ray.direction.iter());
        }
        let seg = segment_lengths(ds, ray.far);
        if seg.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::invalid(
                "sample depths must be strictly increasing and below far",
            ));
        }
        deltas.extend(seg);
        depth_values.extend_from_slice(ds);
    }
    let dirs = Matrix::from_vec(m, 3, dirs);

    let geometry = model.geometry(tape, binding, &points, true)?;
    let at_samples = slice_geometry(tape, &geometry, 0, m)?;
    let (d_scene, normals, _) = scene_sdf_and_normals(tape, &at_samples)?;
    let mirrored = config.density.is_mirrored();
    let sigma = tape.laplace_density(d_scene, binding.beta, mirrored)?;
    let deltas = tape.constant(Matrix::from_vec(m, 1, deltas))?;
    let (w, opacity, residual) = quadrature_on_tape(tape, sigma, deltas, r, s)?;
    let w_col = tape.reshape(w, m, 1)?;

    let rgb = model.radiance(tape, binding, &samples, normals, &dirs, at_samples.feature)?;
    let color = integrate(tape, w_col, rgb, s)?;
    let bg = tape.constant(Matrix::from_vec(r, 3, config.background.repeat(r)))?;
    let bg = tape.mul(bg, residual)?;
    let color = tape.add(color, bg)?;

    let sem = tape.sigmoid(at_samples.sdf, -model.gamma())?;
    let sem = tape.scale(sem, model.gamma())?;
    let semantic = integrate(tape, w_col, sem, s)?;

    let depth_col = tape.constant(Matrix::from_vec(m, 1, depth_values))?;
    let depth_sum = integrate(tape, w_col, depth_col, s)?;
    let denom = tape.clamp_min(opacity, config.depth_epsilon)?;
    let depth = tape.div(depth_sum, denom)?;

    let objects = if object_terms {
        let mut ds = Vec::with_capacity(k);
        let mut os = Vec::with_capacity(k);
        for i in 0..k {
            let di = tape.slice_cols(at_samples.sdf, i, i + 1)?;
            let si = tape.laplace_density(di, binding.beta, mirrored)?;
            let (wi, oi, _) = quadrature_on_tape(tape, si, deltas, r, s)?;
            let wi = tape.reshape(wi, m, 1)?;
            let num = integrate(tape, wi, depth_col, s)?;
            let den = tape.clamp_min(oi, config.depth_epsilon)?;
            ds.push(tape.div(num, den)?);
            os.push(oi);
        }
        Some(ObjectTerms {
            depth: tape.concat_cols(&ds)?,
            opacity: tape.concat_cols(&os)?,
        })
    } else {
        None
    };

    Ok(RenderedBatch {
        color,
        semantic,
        opacity,
        depth,
        weights: w,
        objects,
        geometry,
    })
}

/// Rendered values for one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub semantic: Vec<f64>,
    pub depth: f64,
    pub object_depth: Vec<f64>,
    pub object_opacity: Vec<f64>,
    pub opacity: f64,
}

impl RenderOutput {
    fn vacuum(k: usize, background: [f64; 3]) -> Self {
        Self {
            color: background,
            semantic: vec![0.0; k],
            depth: 0.0,
            object_depth: vec![0.0; k],
            object_opacity: vec![0.0; k],
            opacity: 0.0,
        }
    }

    /// Most probable object, or `background` when the ray is mostly empty.
    pub fn label(&self, background: usize) -> usize {
        if self.opacity < 0.5 {
            return background;
        }
        let mut best = 0;
        for (i, v) in self.semantic.iter().enumerate() {
            if *v > self.semantic[best] {
                best = i;
            }
        }
        best
    }
}

/// Renders one ray.
pub fn render_ray(
    model: &dyn SceneModel,
    ray: &Ray,
    config: &RenderConfig,
    seed: u64,
) -> Result<RenderOutput> {
    Ok(render_rays(model, std::slice::from_ref(ray), config, seed)?.remove(0))
}

/// Renders many rays in parallel chunks. Chunk `c` draws its samples from a
/// generator seeded by `(seed, c)`, so results do not depend on thread count.
pub fn render_rays(
    model: &dyn SceneModel,
    rays: &[Ray],
    config: &RenderConfig,
    seed: u64,
) -> Result<Vec<RenderOutput>> {
    config.validate()?;
    let k = model.num_objects();
    let chunks: Vec<Result<Vec<RenderOutput>>> = rays
        .par_chunks(config.chunk_rays)
        .enumerate()
        .map(|(c, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            render_chunk(model, chunk, config, &mut rng).map_err(|e| match e {
                Error::NonFiniteRay { ray } => Error::NonFiniteRay {
                    ray: c * config.chunk_rays + ray,
                },
                other => other,
            })
        })
        .collect();
    let mut out = Vec::with_capacity(rays.len());
    for c in chunks {
        out.extend(c?);
    }
    debug_assert!(out.iter().all(|o| o.semantic.len() == k));
    Ok(out)
}

fn render_chunk(
    model: &dyn SceneModel,
    rays: &[Ray],
    config: &RenderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RenderOutput>> {
    let k = model.num_objects();
    let live: Vec<usize> = (0..rays.len()).filter(|&i| !rays[i].is_vacuum()).collect();
    let mut out: Vec<RenderOutput> = (0..rays.len())
        .map(|_| RenderOutput::vacuum(k, config.background))
        .collect();
    if live.is_empty() {
        return Ok(out);
    }
    let live_rays: Vec<Ray> = live.iter().map(|&i| rays[i].clone()).collect();
    let rendered = match render_live(model, &live_rays, config, &mut rng.clone()) {
        Ok(r) => r,
        Err(Error::Tape(TapeError::NonFinite { .. })) => {
            // Re-render ray by ray to name the culprit.
            let culprit = (0..live_rays.len()).find(|&j| {
                matches!(
                    render_live(
                        model,
                        std::slice::from_ref(&live_rays[j]),
                        config,
                        &mut rng.clone()
                    ),
                    Err(Error::Tape(TapeError::NonFinite { .. }))
                )
            });
            return Err(Error::NonFiniteRay {
                ray: live[culprit.unwrap_or(0)],
            });
        }
        Err(e) => return Err(e),
    };
    for (r, &i) in rendered.into_iter().zip(&live) {
        out[i] = r;
    }
    Ok(out)
}

fn render_live(
    model: &dyn SceneModel,
    rays: &[Ray],
    config: &RenderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RenderOutput>> {
    let depths = sample_rays(model, rays, config, rng)?;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, false)?;
    let batch = render_on_tape(
        model, &mut tape, &binding, rays, &depths, None, config, true,
    )?;
    let objects = batch.objects.as_ref().expect("object terms requested");
    let color = tape.value(batch.color);
    let semantic = tape.value(batch.semantic);
    let depth = tape.value(batch.depth);
    let opacity = tape.value(batch.opacity);
    let odepth = tape.value(objects.depth);
    let oopacity = tape.value(objects.opacity);
    Ok((0..rays.len())
        .map(|j| {
            let c = color.row_slice(j);
            RenderOutput {
                color: [c[0], c[1], c[2]],
                semantic: semantic.row_slice(j).to_vec(),
                depth: depth.get(j, 0),
                object_depth: odepth.row_slice(j).to_vec(),
                object_opacity: oopacity.row_slice(j).to_vec(),
                opacity: opacity.get(j, 0),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{AnalyticField, ChannelFn};
    use std::sync::Arc;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn density_examples() {
        assert!(close(density_from_sdf(0.0, 0.1), 5.0, 1e-12));
        assert!(close(
            density_from_sdf(-0.1, 0.1),
            10.0 - 5.0 * (-1f64).exp(),
            1e-12
        ));
        assert!(close(density_from_sdf(-0.1, 0.1), 8.16060, 1e-5));
        assert!(close(density_from_sdf(0.1, 0.1), 1.83940, 1e-5));
        let printed = density_from_sdf_variant(-0.1, 0.1, DensityVariant::AsPrinted);
        assert!(close(printed, density_from_sdf(0.1, 0.1), 1e-15));
        assert!(density_from_sdf(-1e6, 0.1) <= 10.0);
        assert_eq!(density_from_sdf(1e6, 0.1), 0.0);
    }

    #[test]
    fn semantic_examples() {
        assert_eq!(semantic_from_sdf(0.0, 20.0), 10.0);
        assert!(close(
            semantic_from_sdf(-0.5, 20.0),
            20.0 / (1.0 + (-10f64).exp()),
            1e-12
        ));
        assert!(close(
            semantic_from_sdf(0.5, 20.0),
            20.0 / (1.0 + 10f64.exp()),
            1e-15
        ));
        assert!(semantic_from_sdf(1e5, 20.0) >= 0.0);
        assert!(semantic_from_sdf(-1e5, 20.0) <= 20.0);
        assert_eq!(semantic_derivative(0.0, 20.0), -100.0);
    }

    #[test]
    fn quadrature_examples() {
        let q = quadrature_weights(&[0.0; 3], &[0.1; 3]).unwrap();
        assert_eq!(q.transmittance, vec![1.0; 3]);
        assert_eq!(q.weights, vec![0.0; 3]);
        assert_eq!(q.opacity, 0.0);
        let q = quadrature_weights(&[10.0, 10.0], &[0.1, 0.1]).unwrap();
        let e1 = (-1f64).exp();
        assert!(close(q.transmittance[1], e1, 1e-15));
        assert!(close(q.weights[0], 1.0 - e1, 1e-15));
        assert!(close(q.weights[1], e1 * (1.0 - e1), 1e-15));
        assert!(close(q.opacity, 1.0 - (-2f64).exp(), 1e-15));
        let q = quadrature_weights(&[1e300, 3.0], &[1.0, 1.0]).unwrap();
        assert_eq!(q.weights, vec![1.0, 0.0]);
        assert_eq!(q.opacity, 1.0);
        assert!(quadrature_weights(&[1.0], &[0.0]).is_err());
        assert!(quadrature_weights(&[1.0, 2.0], &[0.1]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(semantic_probabilities(&[0.0; 4]), vec![0.25; 4]);
        let p = semantic_probabilities(&[21.0, 1.0, 0.5]);
        assert!(p[0] >= 1.0 - 1e-8);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ray_validation() {
        assert!(Ray::new(Vec3::zeros(), Vec3::new(1.0, 1e-4, 0.0), 0.0, 1.0).is_err());
        assert!(Ray::new(Vec3::zeros(), Vec3::x(), 1.0, 1.0).is_err());
        assert!(Ray::vacuum(Vec3::zeros(), Vec3::x()).is_vacuum());
    }

    #[test]
    fn stratified_without_fine_samples() {
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), 1.0, 3.0).unwrap();
        let cfg = SamplingConfig {
            n_coarse: 8,
            n_fine: 0,
            jitter: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = sample_ray(&ray, &cfg, &|d| Ok(vec![0.0; d.len()]), &mut rng).unwrap();
        assert_eq!(d.len(), 8);
        for (j, v) in d.iter().enumerate() {
            let lo = 1.0 + 0.25 * j as f64;
            assert!(*v >= lo && *v < lo + 0.25);
        }
    }

    #[test]
    fn merged_depths_are_strictly_increasing() {
        let m = merge_depths(&[0.0, 0.5, 1.0], &[0.5, 0.5, 0.25], 0.0, 2.0);
        assert_eq!(m.len(), 6);
        assert!(m.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(m[3], 0.5 + 2e-9);
    }

    fn empty_field() -> AnalyticField {
        let far: ChannelFn = Arc::new(|_p: &Vec3| (1e3, Vec3::z()));
        AnalyticField::new(vec![far], Arc::new(|_, _, _, _| [1.0, 1.0, 1.0]), 0.1, 20.0).unwrap()
    }

    #[test]
    fn vacuum_renders_background() {
        let cfg = RenderConfig {
            background: [0.2, 0.4, 0.6],
            ..RenderConfig::default()
        };
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), 0.5, 2.0).unwrap();
        let out = render_ray(&empty_field(), &ray, &cfg, 0).unwrap();
        assert!(out.opacity <= 1e-6);
        for c in 0..3 {
            assert!((out.color[c] - cfg.background[c]).abs() < 1e-6);
        }
        let out = render_ray(
            &empty_field(),
            &Ray::vacuum(Vec3::zeros(), Vec3::z()),
            &cfg,
            0,
        )
        .unwrap();
        assert_eq!(out.color, cfg.background);
        assert_eq!(out.label(0), 0);
    }

    #[test]
    fn tape_quadrature_matches_plain_quadrature() {
        let sphere: ChannelFn = Arc::new(|p: &Vec3| (p.norm() - 0.5, p.normalize()));
        let field =
            AnalyticField::new(vec![sphere], Arc::new(|_, _, _, _| [0.5; 3]), 0.05, 20.0).unwrap();
        let ray = Ray::new(Vec3::new(0.1, 0.0, -2.0), Vec3::z(), 0.5, 3.5).unwrap();
        let depths = stratified_depths::<ChaCha8Rng>(0.5, 3.5, 50, None);
        let mut tape = Tape::new();
        let b = field.bind(&mut tape, false).unwrap();
        let batch = render_on_tape(
            &field,
            &mut tape,
            &b,
            std::slice::from_ref(&ray),
            std::slice::from_ref(&depths),
            None,
            &RenderConfig::default(),
            true,
        )
        .unwrap();
        let sigma: Vec<f64> = depths
            .iter()
            .map(|t| density_from_sdf(ray.at(*t).norm() - 0.5, 0.05))
            .collect();
        let q = quadrature_weights(&sigma, &segment_lengths(&depths, ray.far)).unwrap();
        for (a, b) in tape.value(batch.weights).data().iter().zip(&q.weights) {
            assert!((a - b).abs() < 1e-14);
        }
        let opacity = tape.value(batch.opacity).item();
        assert!((opacity - q.opacity).abs() < 1e-14);
        let od = tape.value(batch.objects.unwrap().opacity).item();
        assert!((od - opacity).abs() < 1e-14);
    }

    #[test]
    fn non_finite_ray_is_reported() {
        let bad: ChannelFn = Arc::new(|p: &Vec3| {
            if p.x > 0.5 {
                (f64::NAN, Vec3::z())
            } else {
                (1.0, Vec3::z())
            }
        });
        let field =
            AnalyticField::new(vec![bad], Arc::new(|_, _, _, _| [0.5; 3]), 0.1, 20.0).unwrap();
        let mut rays: Vec<Ray> = (0..5)
            .map(|i| Ray::new(Vec3::new(-0.2 * i as f64, 0.0, 0.0), Vec3::z(), 0.0, 1.0).unwrap())
            .collect();
        rays.push(Ray::new(Vec3::new(1.0, 0.0, 0.0), Vec3::z(), 0.0, 1.0).unwrap());
        let cfg = RenderConfig {
            chunk_rays: 4,
            ..RenderConfig::default()
        };
        match render_rays(&field, &rays, &cfg, 0) {
            Err(Error::NonFiniteRay { ray }) => assert_eq!(ray, 5),
            other => panic!("expected a non-finite ray error, got {other:?}"),
        }
    }
}
