use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
preset = "compact"

[dataset]
views = 6
width = 12
height = 12
min_visible_fraction = 0.0

[model]
width = 16
feature_dim = 8
phi_layers = 3
theta_layers = 2
pe_levels_pos = 2
pe_levels_dir = 1

[render.sampling]
n_coarse = 8
n_fine = 8

[train]
rays_per_batch = 32
checkpoint_every = 100

[eval]
resolution = 12
chamfer_samples = 2000
"#;

fn objsdf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_objsdf"))
        .args(args)
        .current_dir(cwd)
        .env("OBJSDF_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = objsdf(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn pipeline(dir: &Path) -> String {
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
    ok(
        &[
            "generate",
            "--config",
            "tiny.toml",
            "--out",
            "data",
            "--seed",
            "3",
        ],
        dir,
    );
    ok(
        &[
            "train",
            "--config",
            "tiny.toml",
            "--data",
            "data",
            "--out",
            "run",
            "--iters",
            "200",
            "--seed",
            "3",
        ],
        dir,
    );
    ok(
        &[
            "extract-mesh",
            "--config",
            "tiny.toml",
            "--model",
            "run/checkpoint.json",
            "--out",
            "meshes",
        ],
        dir,
    );
    ok(
        &[
            "evaluate",
            "--config",
            "tiny.toml",
            "--model",
            "run",
            "--data",
            "data",
            "--out",
            "eval",
            "--seed",
            "3",
        ],
        dir,
    );
    std::fs::read_to_string(dir.join("eval/metrics.json")).unwrap()
}

#[test]
fn full_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let metrics = pipeline(a.path());
    let v: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    for key in ["psnr", "miou", "cd_scene", "cd_per_object"] {
        assert!(v.get(key).is_some(), "metrics lack {key}");
    }
    assert_eq!(
        std::fs::read_dir(a.path().join("data/images"))
            .unwrap()
            .count(),
        6
    );
    let log = std::fs::read_to_string(a.path().join("run/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 201);
    assert!(a.path().join("run/checkpoints/iter_000200.json").exists());
    assert!(a.path().join("run/effective_config.json").exists());
    for f in ["object_0.ply", "object_1.ply", "object_2.ply", "scene.ply"] {
        let bytes = std::fs::read(a.path().join("meshes").join(f)).unwrap();
        assert!(bytes.starts_with(b"ply\nformat binary_little_endian 1.0\n"));
    }

    let b = tempfile::tempdir().unwrap();
    assert_eq!(metrics, pipeline(b.path()));
}

#[test]
fn resume_continues_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(&["generate", "--config", "tiny.toml", "--out", "data"], d);
    let every = ["--set", "train.checkpoint_every=2"];
    let train = |out: &str, extra: &[&str]| {
        let mut args = vec![
            "train",
            "--config",
            "tiny.toml",
            "--data",
            "data",
            "--out",
            out,
            "--iters",
            "6",
        ];
        args.extend_from_slice(&every);
        args.extend_from_slice(extra);
        ok(&args, d);
    };
    train("straight", &[]);
    // pretend the run died right after saving iteration 4
    std::fs::create_dir(d.join("split")).unwrap();
    std::fs::copy(
        d.join("straight/checkpoints/iter_000004.json"),
        d.join("split/checkpoint.json"),
    )
    .unwrap();
    std::fs::copy(d.join("straight/log.csv"), d.join("split/log.csv")).unwrap();
    train("split", &["--resume"]);
    let read = |p: &str| std::fs::read_to_string(d.join(p)).unwrap();
    assert_eq!(read("straight/log.csv"), read("split/log.csv"));
    assert_eq!(
        read("straight/checkpoint.json"),
        read("split/checkpoint.json")
    );

    ok(
        &[
            "render",
            "--config",
            "tiny.toml",
            "--model",
            "split",
            "--data",
            "data",
            "--out",
            "img",
            "--views",
            "0,2",
            "--object-id",
            "1",
        ],
        d,
    );
    for what in [
        "color",
        "labels",
        "semantic",
        "depth",
        "opacity",
        "object1_depth",
        "object1_opacity",
    ] {
        assert!(
            d.join(format!("img/view_002_{what}.png")).exists(),
            "{what}"
        );
    }
}

#[test]
fn bad_configuration_fails_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = objsdf(&["generate", "--out", "x", "--set", "dataset.viewz=3"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("viewz"));

    std::fs::write(d.join("broken.toml"), "[train]\niterations = \n").unwrap();
    let out = objsdf(&["generate", "--config", "broken.toml", "--out", "x"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = objsdf(&["train", "--out", "x", "--data", "missing"], d);
    assert!(!out.status.success());
}
