use objsdf::datagen::{generate_dataset, Dataset, DatasetOptions, RaySampler, Split};
use objsdf::evalmesh::{extract_object_mesh, extract_scene_mesh};
use objsdf::fields::{AnalyticField, FieldConfig, FieldModel};
use objsdf::geometry::{Aabb, Light, Primitive, SceneSpec, Vec3};
use objsdf::rendering::{RenderConfig, SamplingConfig};
use objsdf::training::{TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn read_all(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "masks", "depth"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        for p in names {
            out.push((
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            ));
        }
    }
    out.push((
        "manifest".into(),
        std::fs::read(dir.join("manifest.json")).unwrap(),
    ));
    out
}

#[test]
fn reference_dataset_shows_every_object() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(
        &SceneSpec::reference(),
        &DatasetOptions::default(),
        dir.path(),
    )
    .unwrap();
    assert_eq!(m.views.len(), 40);
    assert!(m.visibility.iter().all(|&v| v >= 30), "{:?}", m.visibility);
    assert_eq!(
        m.views.iter().filter(|v| v.split == Split::Train).count(),
        32
    );
    for sub in ["images", "masks", "depth"] {
        assert_eq!(std::fs::read_dir(dir.path().join(sub)).unwrap().count(), 40);
    }

    let again = tempfile::tempdir().unwrap();
    generate_dataset(
        &SceneSpec::reference(),
        &DatasetOptions::default(),
        again.path(),
    )
    .unwrap();
    assert!(read_all(dir.path()) == read_all(again.path()));
}

#[test]
fn analytic_meshes_follow_the_primitives() {
    let scene = SceneSpec::reference();
    let model = AnalyticField::from_scene(&scene, 0.01, 20.0).unwrap();
    let bbox = scene.bbox();
    let res = 40;
    let cell = bbox.extent().max() / res as f64;
    for id in 0..scene.num_objects() {
        let mesh = extract_object_mesh(&model, id, bbox, res).unwrap();
        assert!(!mesh.is_empty());
        mesh.validate().unwrap();
        for v in &mesh.vertices {
            assert!(scene.object_sdfs(v)[id].abs() <= 2.0 * cell);
        }
    }
    let mesh = extract_scene_mesh(&model, bbox, res).unwrap();
    for v in &mesh.vertices {
        let d = scene
            .object_sdfs(v)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        assert!(d.abs() <= 2.0 * cell);
    }
    assert!(extract_object_mesh(&model, 3, bbox, res).is_err());
}

#[test]
fn smoke_training_halves_the_loss() {
    let scene = SceneSpec::new(
        vec![
            Primitive::sphere(Vec3::new(0.0, 0.0, -0.1), 0.4, [0.85, 0.2, 0.15], 0).unwrap(),
            Primitive::floor(-0.5, [0.75, 0.7, 0.55], 1).unwrap(),
        ],
        Aabb::new([-1.0, -1.0, -0.6], [1.0, 1.0, 1.0]).unwrap(),
        Light::default(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = DatasetOptions {
        views: 10,
        width: 16,
        height: 16,
        ..DatasetOptions::default()
    };
    generate_dataset(&scene, &opts, dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    let sampler = RaySampler::new(&ds, Split::Train).unwrap();

    let field = FieldConfig {
        width: 32,
        feature_dim: 16,
        phi_layers: 3,
        theta_layers: 2,
        ..FieldConfig::compact(2)
    };
    let render = RenderConfig {
        sampling: SamplingConfig {
            n_coarse: 16,
            n_fine: 16,
            jitter: true,
        },
        ..RenderConfig::default()
    };
    let train = TrainConfig {
        iterations: 200,
        rays_per_batch: 64,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(
        FieldModel::new(field, 1).unwrap(),
        train,
        render,
        *scene.bbox(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..200 {
        let batch = sampler.sample(64, &mut rng);
        let r = trainer.step(&batch).unwrap();
        first.get_or_insert(r.total);
        last = r.total;
    }
    let first = first.unwrap();
    assert!(last < 0.5 * first, "loss went from {first} to {last}");
}
