//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `OBJSDF_ACCEPTANCE_PROFILE=full` trains the end-to-end runs at the full
//! size (desk model, 1024 rays, 64+64 samples, 5000 iterations); the default
//! `quick` profile shrinks them to finish in minutes on one core.
//! `OBJSDF_ACCEPTANCE_STRICT=1` makes every failure fatal; otherwise only the
//! criteria that need no long training (1-5 and 9) set the exit code.

use std::process::ExitCode;
use std::time::Instant;

use objsdf::datagen::{
    generate_dataset, sphere_trace, Dataset, DatasetOptions, RaySampler, Split, TRACE_EPSILON,
};
use objsdf::evalmesh::{
    chamfer_distance, evaluate, extract_object_mesh, marching_cubes, polygonize, sample_mesh,
    sample_scene_surface, EvalConfig, Grid, MetricsReport, TriangleMesh,
};
use objsdf::fields::{gradient_norms, AnalyticField, FieldConfig, FieldModel, SceneModel};
use objsdf::geometry::{compose_min, scene_sdf_analytic, Aabb, SceneSpec, Shape, Vec3};
use objsdf::rendering::{
    density_from_sdf, quadrature_weights, segment_lengths, semantic_derivative, semantic_from_sdf,
    stratified_depths, Ray, RenderConfig, SamplingConfig,
};
use objsdf::training::{TrainConfig, Trainer};
use objsdf_autodiff::{gradient_check, Matrix, Result as TapeResult, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- gradients

fn random_composition(seed: u64) -> impl Fn(&mut Tape, Var) -> TapeResult<Var> + Copy {
    move |t: &mut Tape, x: Var| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = vec![x];
        for _ in 0..rng.gen_range(4..12) {
            let a = pool[rng.gen_range(0..pool.len())];
            let b = pool[rng.gen_range(0..pool.len())];
            let next = match rng.gen_range(0..10) {
                0 => t.add(a, b)?,
                1 => t.mul(a, b)?,
                2 => t.sin(a)?,
                3 => t.tanh(a)?,
                4 => {
                    let s = t.cos(a)?;
                    t.exp(s)?
                }
                5 => {
                    let sq = t.square(a)?;
                    let one = t.offset(sq, 1.0)?;
                    t.log(one)?
                }
                6 => {
                    let sq = t.square(a)?;
                    let one = t.offset(sq, 0.5)?;
                    t.sqrt(one)?
                }
                7 => t.softplus(a, 2.0)?,
                8 => t.sigmoid(a, 1.5)?,
                _ => {
                    let n = t.shape(a).1;
                    let w = Matrix::from_vec(
                        n,
                        n,
                        (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    );
                    let w = t.constant(w)?;
                    t.matmul(a, w)?
                }
            };
            pool.push(next);
        }
        let last = *pool.last().unwrap();
        t.sum(last)
    }
}

const MLP: [usize; 5] = [3, 64, 64, 64, 1];

/// Four affine layers of width 64 with softplus between them; the input row
/// holds every weight and bias, the points are constants.
fn mlp_loss(points: &'static Matrix) -> impl Fn(&mut Tape, Var) -> TapeResult<Var> + Copy {
    move |t: &mut Tape, flat: Var| {
        let x = t.constant(points.clone())?;
        let mut h = x;
        let mut at = 0;
        for (i, pair) in MLP.windows(2).enumerate() {
            let w = t.slice_cols(flat, at, at + pair[0] * pair[1])?;
            let w = t.reshape(w, pair[0], pair[1])?;
            at += pair[0] * pair[1];
            let b = t.slice_cols(flat, at, at + pair[1])?;
            at += pair[1];
            let b = t.broadcast(b, points.rows(), pair[1])?;
            let z = t.matmul(h, w)?;
            let z = t.add(z, b)?;
            h = if i + 2 < MLP.len() {
                t.softplus(z, 1.0)?
            } else {
                z
            };
        }
        let sq = t.square(h)?;
        t.mean(sq)
    }
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    for seed in 0..100 {
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.2..1.2)).collect();
        let r = gradient_check(random_composition(seed), &x, 1e-5).unwrap();
        worst = worst.max(r.max_relative_error);
        failed += usize::from(!r.passed);
    }
    let points: &'static Matrix = Box::leak(Box::new(Matrix::from_vec(
        8,
        3,
        (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )));
    let mut params = Vec::new();
    for pair in MLP.windows(2) {
        let s = (1.0 / pair[0] as f64).sqrt();
        params.extend((0..pair[0] * pair[1]).map(|_| rng.gen_range(-s..s)));
        params.extend((0..pair[1]).map(|_| rng.gen_range(-0.1..0.1)));
    }
    let r = gradient_check(mlp_loss(points), &params, 1e-5).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failed == 0 && r.passed && secs < 10.0,
        format!(
            "max rel err {:.2e} over 100 compositions, {:.2e} over {} MLP weights, {secs:.1} s",
            worst,
            r.max_relative_error,
            params.len()
        ),
    )
}

// ---------------------------------------------------------------- transforms

fn criterion_transforms() -> Outcome {
    let mut ok = true;
    let mut jump: f64 = 0.0;
    for beta in [1e-3, 1e-2, 0.1, 1.0] {
        let at0 = density_from_sdf(0.0, beta);
        for eps in [1e-300, 1e-200, f64::MIN_POSITIVE] {
            jump = jump
                .max((density_from_sdf(eps, beta) - at0).abs())
                .max((density_from_sdf(-eps, beta) - at0).abs());
        }
        let mut prev = f64::INFINITY;
        for i in 0..=40_000 {
            let d = -2.0 + i as f64 * 1e-4;
            let s = density_from_sdf(d, beta);
            ok &= s <= prev && s <= 1.0 / beta && s >= 0.0;
            prev = s;
        }
        ok &= density_from_sdf(-1e3, beta) <= 1.0 / beta;
    }
    ok &= jump <= 1e-12;

    let gamma = 20.0;
    let closed = [
        (0.0, gamma / 2.0),
        (0.5, gamma / (1.0 + (gamma * 0.5f64).exp())),
        (-0.5, gamma / (1.0 + (-gamma * 0.5f64).exp())),
    ];
    let sem_err = closed
        .iter()
        .map(|&(d, v)| (semantic_from_sdf(d, gamma) - v).abs())
        .fold(0.0, f64::max);
    ok &= sem_err <= 1e-9;

    let peak = semantic_derivative(0.0, gamma).abs();
    let h = 1e-6;
    let fd = ((semantic_from_sdf(h, gamma) - semantic_from_sdf(-h, gamma)) / (2.0 * h)).abs();
    let is_max = (1..=2000).all(|i| {
        let d = i as f64 * 1e-3;
        semantic_derivative(d, gamma).abs() < peak && semantic_derivative(-d, gamma).abs() < peak
    });
    let peak_err = (peak - gamma * gamma / 4.0).abs();
    ok &= peak_err <= 1e-6 && (fd - gamma * gamma / 4.0).abs() <= 1e-4 && is_max;
    outcome(
        ok,
        format!("density jump {jump:.1e}, semantic err {sem_err:.1e}, |ds/dd| peak err {peak_err:.1e} (fd {fd:.6})"),
    )
}

// ---------------------------------------------------------------- quadrature

fn criterion_quadrature() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut err: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..40);
        let near = rng.gen_range(0.0..1.0);
        let mut t = vec![near];
        for _ in 0..n {
            let last = *t.last().unwrap();
            t.push(last + rng.gen_range(0.01..0.3));
        }
        let far = t.pop().unwrap();
        let sigma: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    0.0
                } else {
                    rng.gen_range(0.0..8.0)
                }
            })
            .collect();
        let delta = segment_lengths(&t, far);
        let q = quadrature_weights(&sigma, &delta).unwrap();
        // survival through each piece multiplied out
        let mut survive = 1.0;
        for j in 0..n {
            err = err.max((q.transmittance[j] - survive).abs());
            let next = survive * (-sigma[j] * (t.get(j + 1).copied().unwrap_or(far) - t[j])).exp();
            err = err.max((q.weights[j] - (survive - next)).abs());
            survive = next;
        }
        err = err
            .max((q.opacity - (1.0 - survive)).abs())
            .max((q.residual - survive).abs());
    }

    let sigma = |t: f64| 1.0 + (3.0 * t).sin();
    let exact = 1.0 - (-(2.0 + (1.0 - 6f64.cos()) / 3.0)).exp();
    let counts = [32usize, 64, 128, 256];
    let errors: Vec<f64> = counts
        .iter()
        .map(|&n| {
            let t = stratified_depths::<ChaCha8Rng>(0.0, 2.0, n, None);
            let s: Vec<f64> = t.iter().map(|&x| sigma(x)).collect();
            let q = quadrature_weights(&s, &segment_lengths(&t, 2.0)).unwrap();
            (q.opacity - exact).abs()
        })
        .collect();
    let xs: Vec<f64> = counts.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let slope = -xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        err <= 1e-12 && slope >= 0.9 && secs < 30.0,
        format!(
            "piecewise err {err:.1e}, convergence slope {slope:.3} (errors {}), {secs:.1} s",
            errors
                .iter()
                .map(|e| format!("{e:.1e}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    )
}

// ---------------------------------------------------------------- composition

/// Parameter interval over which a ray is inside a primitive, in closed form.
fn analytic_interval(shape: &Shape, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
    match shape {
        Shape::Sphere { radius } => {
            let b = o.dot(d);
            let disc = b * b - (o.norm_squared() - radius * radius);
            (disc >= 0.0).then(|| (-b - disc.sqrt(), -b + disc.sqrt()))
        }
        Shape::Box { half_extents } => {
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            for a in 0..3 {
                if d[a] == 0.0 {
                    if o[a].abs() > half_extents[a] {
                        return None;
                    }
                    continue;
                }
                let t1 = (-half_extents[a] - o[a]) / d[a];
                let t2 = (half_extents[a] - o[a]) / d[a];
                lo = lo.max(t1.min(t2));
                hi = hi.min(t1.max(t2));
            }
            (lo <= hi).then_some((lo, hi))
        }
        Shape::HalfSpace { offset } => {
            if d.z == 0.0 {
                return (o.z <= *offset).then_some((f64::NEG_INFINITY, f64::INFINITY));
            }
            let t = (offset - o.z) / d.z;
            Some(if d.z < 0.0 {
                (t, f64::INFINITY)
            } else {
                (f64::NEG_INFINITY, t)
            })
        }
    }
}

fn composition_metrics() -> serde_json::Value {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0usize;
    for _ in 0..100_000 {
        let k = rng.gen_range(1..=8);
        // coarse values make exact ties common
        let v: Vec<f64> = (0..k)
            .map(|_| (rng.gen_range(-20..20) as f64) * 0.25)
            .collect();
        let mut best = (f64::INFINITY, usize::MAX);
        for (i, &x) in v.iter().enumerate() {
            if x < best.0 {
                best = (x, i);
            }
        }
        let got = compose_min(&v).unwrap();
        mismatches += usize::from(got.0.to_bits() != best.0.to_bits() || got.1 != best.1);
    }

    let scene = SceneSpec::reference();
    let bbox = *scene.bbox();
    let center = bbox.center();
    let (mut hits, mut label_mismatches, mut hit_mismatches) = (0usize, 0usize, 0usize);
    let mut depth_sum = 0.0;
    for _ in 0..10_000 {
        let az = rng.gen_range(0.0..std::f64::consts::TAU);
        let el = rng.gen_range(0.1..1.4f64);
        let origin = center + Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * 2.8;
        let min = bbox.min_point();
        let e = bbox.extent();
        let target = min
            + Vec3::new(
                rng.gen::<f64>() * e.x,
                rng.gen::<f64>() * e.y,
                rng.gen::<f64>() * e.z,
            );
        let dir = (target - origin).normalize();
        let (near, far) = bbox
            .intersect_ray(&origin, &dir)
            .expect("aimed inside the box");
        let ray = Ray::new(origin, dir, near.max(0.0), far).unwrap();

        let mut first: Option<(f64, usize)> = None;
        for p in scene.primitives() {
            let o = p.pose.inverse_apply_point(&origin);
            let d = p.pose.inverse_apply_point(&(origin + dir)) - o;
            if let Some((lo, hi)) = analytic_interval(&p.shape, &o, &d) {
                let t = lo.max(ray.near);
                if t <= hi.min(ray.far) && first.is_none_or(|f| t < f.0) {
                    first = Some((t, p.object_id));
                }
            }
        }
        let traced = sphere_trace(&scene, &ray).hit;
        match (traced, first) {
            (Some(h), Some((t, id))) => {
                hits += 1;
                depth_sum += h.t;
                let label = scene_sdf_analytic(&scene, &h.point).1;
                label_mismatches += usize::from(label != id || h.object_id != id);
                // grazing hits stop short along the ray but within the trace tolerance of the surface
                let on_surface = h.t <= t && scene_sdf_analytic(&scene, &h.point).0 < TRACE_EPSILON;
                hit_mismatches += usize::from((h.t - t).abs() > 1e-4 && !on_surface);
            }
            (None, None) => {}
            _ => hit_mismatches += 1,
        }
    }
    json!({
        "compose_min_mismatches": mismatches,
        "rays": 10_000,
        "hits": hits,
        "label_mismatches": label_mismatches,
        "hit_mismatches": hit_mismatches,
        "mean_hit_depth": depth_sum / hits.max(1) as f64,
    })
}

fn criterion_composition(m: &serde_json::Value) -> Outcome {
    let zero = |k: &str| m[k].as_u64() == Some(0);
    let pass = zero("compose_min_mismatches") && zero("label_mismatches") && zero("hit_mismatches");
    outcome(
        pass,
        format!(
            "compose_min mismatches {} / 100000, labels {} and hits {} differ over {} traced hits",
            m["compose_min_mismatches"], m["label_mismatches"], m["hit_mismatches"], m["hits"]
        ),
    )
}

// ---------------------------------------------------------------- mesh

fn unit_sphere_samples(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    (0..n)
        .map(|_| loop {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let r = v.norm();
            if r > 1e-3 && r <= 1.0 {
                break v / r;
            }
        })
        .collect()
}

fn mesh_metrics() -> serde_json::Value {
    let bbox = Aabb::cube(1.25).unwrap();
    let res = 64;
    let cell = bbox.extent().max() / res as f64;
    let mesh = marching_cubes(&|p: &Vec3| p.norm() - 1.0, &bbox, res).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let on_mesh = sample_mesh(&mesh, 100_000, &mut rng).unwrap();
    let exact = unit_sphere_samples(100_000, &mut rng);
    let cd = chamfer_distance(&on_mesh, &exact).unwrap();
    let max_dev = mesh
        .vertices
        .iter()
        .map(|v| (v.norm() - 1.0).abs())
        .fold(0.0, f64::max);
    json!({
        "resolution": res,
        "cell": cell,
        "vertices": mesh.vertices.len(),
        "triangles": mesh.triangles.len(),
        "chamfer": cd,
        "max_vertex_deviation": max_dev,
    })
}

fn criterion_mesh(m: &serde_json::Value) -> Outcome {
    let cd = m["chamfer"].as_f64().unwrap();
    let dev = m["max_vertex_deviation"].as_f64().unwrap();
    let cell = m["cell"].as_f64().unwrap();
    outcome(
        cd <= 1e-3 && dev <= 2.0 * cell,
        format!(
            "chamfer {cd:.2e}, max vertex deviation {dev:.2e} (cell {cell:.4}), {} triangles",
            m["triangles"]
        ),
    )
}

// ---------------------------------------------------------------- end to end

#[derive(Clone)]
struct Profile {
    name: String,
    model: FieldConfig,
    render: RenderConfig,
    train: TrainConfig,
    eval: EvalConfig,
}

impl Profile {
    fn from_env() -> Self {
        let name = std::env::var("OBJSDF_ACCEPTANCE_PROFILE").unwrap_or_else(|_| "quick".into());
        let full = name == "full";
        let sampling = if full {
            SamplingConfig::default()
        } else {
            SamplingConfig {
                n_coarse: 16,
                n_fine: 16,
                jitter: true,
            }
        };
        Self {
            model: if full {
                FieldConfig::desk(3)
            } else {
                FieldConfig::compact(3)
            },
            render: RenderConfig {
                sampling,
                ..RenderConfig::default()
            },
            train: TrainConfig {
                lambda_semantic: 0.04,
                lambda_eikonal: 0.1,
                rays_per_batch: if full { 1024 } else { 128 },
                iterations: if full { 5000 } else { 200 },
                seed: 6,
                ..TrainConfig::default()
            },
            eval: EvalConfig {
                resolution: if full { 128 } else { 64 },
                chamfer_samples: if full { 100_000 } else { 20_000 },
                seed: 6,
                ..EvalConfig::default()
            },
            name: if full { name } else { "quick".into() },
        }
    }

    fn describe(&self) -> String {
        format!(
            "{} profile: width {}, {} rays x {}+{} samples, {} iterations",
            self.name,
            self.model.width,
            self.train.rays_per_batch,
            self.render.sampling.n_coarse,
            self.render.sampling.n_fine,
            self.train.iterations
        )
    }
}

fn train(
    profile: &Profile,
    ds: &Dataset,
    lambda_semantic: f64,
    lambda_eikonal: f64,
    tag: &str,
) -> FieldModel {
    let config = TrainConfig {
        lambda_semantic,
        lambda_eikonal,
        ..profile.train.clone()
    };
    let model = FieldModel::new(profile.model.clone(), config.seed).unwrap();
    let mut trainer = Trainer::new(model, config, profile.render.clone(), *ds.bbox()).unwrap();
    let sampler = RaySampler::new(ds, Split::Train).unwrap();
    let start = Instant::now();
    trainer
        .fit(&sampler, |t, r| {
            if r.iteration % 50 == 0 {
                eprintln!(
                    "  [{tag}] iteration {}/{} loss {:.4} beta {:.4} ({:.0} s)",
                    r.iteration,
                    t.config.iterations,
                    r.total,
                    r.beta,
                    start.elapsed().as_secs_f64()
                );
            }
            Ok(())
        })
        .unwrap();
    trainer.model
}

fn end_to_end_metrics(
    profile: &Profile,
    scene: &SceneSpec,
    ds: &Dataset,
) -> (MetricsReport, FieldModel) {
    let model = train(
        profile,
        ds,
        profile.train.lambda_semantic,
        profile.train.lambda_eikonal,
        "main",
    );
    let report = evaluate(
        &model,
        Some(ds),
        Some(scene),
        &profile.render,
        &profile.eval,
    )
    .unwrap();
    (report, model)
}

fn criterion_end_to_end(r: &MetricsReport) -> Outcome {
    let psnr = r.psnr.unwrap_or(f64::NAN);
    let miou = r.miou.unwrap_or(f64::NAN);
    let scene = r.cd_scene.unwrap_or(f64::INFINITY);
    let objects: Vec<f64> = r
        .cd_per_object
        .iter()
        .map(|c| c.unwrap_or(f64::INFINITY))
        .collect();
    let pass = psnr >= 22.0 && miou >= 0.80 && objects.iter().all(|&c| c <= 0.05) && scene <= 0.03;
    outcome(
        pass,
        format!("psnr {psnr:.2} dB, miou {miou:.3}, object chamfer {objects:.4?}, scene chamfer {scene:.4}"),
    )
}

/// Mean `|‖∇d_box‖ - 1|` over points on the box surface.
fn eikonal_residual(model: &FieldModel, scene: &SceneSpec) -> f64 {
    let box_id = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pts = sample_scene_surface(scene, Some(box_id), 2000, scene.bbox(), &mut rng).unwrap();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false).unwrap();
    let m = Matrix::from_vec(
        pts.len(),
        3,
        pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
    );
    let g = model.geometry(&mut tape, &b, &m, true).unwrap();
    let norms = gradient_norms(&mut tape, &g).unwrap();
    let v = tape.value(norms);
    (0..pts.len())
        .map(|i| (v.get(i, box_id) - 1.0).abs())
        .sum::<f64>()
        / pts.len() as f64
}

fn criterion_ablation(
    profile: &Profile,
    scene: &SceneSpec,
    ds: &Dataset,
    trained: &FieldModel,
) -> Outcome {
    let with = eikonal_residual(trained, scene);
    let without_eik = train(
        profile,
        ds,
        profile.train.lambda_semantic,
        0.0,
        "no eikonal",
    );
    let without = eikonal_residual(&without_eik, scene);
    let no_sem = train(
        profile,
        ds,
        0.0,
        profile.train.lambda_eikonal,
        "no semantic",
    );
    let miou = evaluate(&no_sem, Some(ds), None, &profile.render, &profile.eval)
        .unwrap()
        .miou
        .unwrap();
    outcome(
        without >= 3.0 * with && miou < 0.5,
        format!(
            "eikonal residual {without:.4} without vs {with:.4} with (ratio {:.2}), miou without semantics {miou:.3}",
            without / with
        ),
    )
}

fn criterion_threshold_free(r: &MetricsReport) -> Outcome {
    // the extraction signature has no level or threshold argument
    let extract: fn(&dyn SceneModel, usize, &Aabb, usize) -> objsdf::Result<TriangleMesh> =
        extract_object_mesh;

    // and it meshes exactly the zero set of the object's own channel
    let scene = SceneSpec::reference();
    let field = AnalyticField::from_scene(&scene, 0.01, 20.0).unwrap();
    let mut same = true;
    for id in 0..scene.num_objects() {
        let a = extract(&field, id, scene.bbox(), 32).unwrap();
        let grid = Grid::sample(&|p: &Vec3| scene.object_sdfs(p)[id], scene.bbox(), 32).unwrap();
        same &= a == polygonize(&grid).unwrap();
    }
    let objects: Vec<f64> = r
        .cd_per_object
        .iter()
        .map(|c| c.unwrap_or(f64::INFINITY))
        .collect();
    outcome(
        same && objects.iter().all(|&c| c <= 0.05),
        format!(
            "zero-level extraction matches channel meshing: {same}, object chamfer {objects:.4?}"
        ),
    )
}

fn main() -> ExitCode {
    let strict = std::env::var("OBJSDF_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let profile = Profile::from_env();
    println!("acceptance ({})", profile.describe());
    let mut fatal = false;
    let mut report = |id: usize, name: &str, always_fatal: bool, o: Outcome| {
        println!(
            "criterion {id} {name}: {} - {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        fatal |= !o.pass && (always_fatal || strict);
    };

    report(1, "gradients", true, criterion_gradients());
    report(2, "transforms", true, criterion_transforms());
    report(3, "quadrature", true, criterion_quadrature());
    let comp = composition_metrics();
    report(4, "composition", true, criterion_composition(&comp));
    let mesh = mesh_metrics();
    report(5, "mesh", true, criterion_mesh(&mesh));

    let scene = SceneSpec::reference();
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&scene, &DatasetOptions::default(), dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    let (metrics, model) = end_to_end_metrics(&profile, &scene, &ds);
    report(6, "end-to-end", false, criterion_end_to_end(&metrics));
    report(
        7,
        "ablations",
        false,
        criterion_ablation(&profile, &scene, &ds, &model),
    );
    report(
        8,
        "threshold-free extraction",
        false,
        criterion_threshold_free(&metrics),
    );

    let first = json!({ "composition": comp, "mesh": mesh, "end_to_end": metrics }).to_string();
    let again_dir = tempfile::tempdir().unwrap();
    generate_dataset(&scene, &DatasetOptions::default(), again_dir.path()).unwrap();
    let again_ds = Dataset::load(again_dir.path()).unwrap();
    let second = json!({
        "composition": composition_metrics(),
        "mesh": mesh_metrics(),
        "end_to_end": end_to_end_metrics(&profile, &scene, &again_ds).0,
    })
    .to_string();
    report(
        9,
        "determinism",
        true,
        outcome(
            first == second,
            format!(
                "metrics JSON of {} bytes identical across reruns: {}",
                first.len(),
                first == second
            ),
        ),
    );

    if fatal {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
