use std::path::Path;

use cubefield::image::psnr_rows;
use cubefield::io::{load_depth, load_field, load_image, load_trace, save_depth, save_image};
use cubefield::metrics::parse_metrics_csv;
use cubefield::optimizer::evaluate_loss;
use cubefield::{FitConfig, Image, SamplingMode};
use cubefield_cli::run;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn smooth_pano(w: usize) -> Image {
    Image::from_fn(w, w / 2, 3, |x, y, c| {
        let th = (x as f64 + 0.5) / w as f64 * std::f64::consts::TAU;
        let ph = (y as f64 + 0.5) / (w / 2) as f64 * std::f64::consts::PI;
        0.5 + 0.3 * (th + c as f64).sin() * ph.sin() + 0.15 * (2.0 * ph).cos()
    })
}

#[test]
fn e2c_then_c2e_reproduces_the_panorama() {
    let dir = tempfile::tempdir().unwrap();
    let pano = smooth_pano(256);
    let input = dir.path().join("pano.png");
    save_image(&input, &pano).unwrap();
    let faces = dir.path().join("faces");
    assert_eq!(run(["cubefield", "e2c", s(&input), s(&faces), "--face-size", "64"]), 0);
    assert!(faces.join("face_U.png").exists());
    let back = dir.path().join("back.png");
    assert_eq!(run(["cubefield", "c2e", s(&faces), s(&back)]), 0);
    let a = load_image(&input).unwrap();
    let b = load_image(&back).unwrap();
    assert!(psnr_rows(&a, &b, 2, a.height - 2).unwrap() > 30.0);
}

#[test]
fn data_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.png");
    assert_eq!(run(["cubefield", "e2c", s(&missing), s(dir.path())]), 2);
    let square = dir.path().join("square.png");
    save_image(&square, &Image::filled(8, 8, 3, 0.5)).unwrap();
    assert_eq!(run(["cubefield", "e2c", s(&square), s(dir.path())]), 2);
    let scene = dir.path().join("scene.toml");
    std::fs::write(&scene, "reference = \"r.png\"\nnear = 1.0\nfar = 4.0\nw = 8\nd = 4\n").unwrap();
    assert_eq!(run(["cubefield", "fit", s(&scene), "--out", s(dir.path())]), 2);
    assert_eq!(run(["cubefield", "fit", s(&scene), "--out", s(dir.path()), "--lambda-l1", "x"]), 1);
}

#[test]
fn synth_fit_render_path_eval() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("scene");
    let code = run([
        "cubefield", "synth", s(&scene_dir), "--width", "64", "--views", "1", "--supersample", "1",
        "--face-size", "8", "--planes", "4", "--seed", "3",
    ]);
    assert_eq!(code, 0);
    let manifest = scene_dir.join("scene.toml");
    let field_dir = dir.path().join("fit");
    let fit = |out: &Path| {
        run([
            "cubefield", "fit", s(&manifest), "--out", s(out), "--iterations", "6", "--sampling", "raycube",
            "--log-every", "0",
        ])
    };
    assert_eq!(fit(&field_dir), 0);
    let trace = load_trace(&field_dir.join("trace.csv")).unwrap();
    assert_eq!(trace.len(), 6);
    assert!(trace[5].total < trace[0].total);

    // Identity render against the reference: the pooled L1 of the final
    // field bounds the reference-only L1 by the ratio of pixel counts.
    let field = load_field(&field_dir).unwrap();
    let m = cubefield::io::load_scene(&manifest).unwrap();
    let (reference, views) = m.load_views().unwrap();
    let cfg = FitConfig {
        sampling: SamplingMode::RayCube,
        ..FitConfig::default()
    };
    let (parts, _) = evaluate_loss(&field, &reference, &views, &cfg).unwrap();
    let pano = dir.path().join("identity.png");
    assert_eq!(run(["cubefield", "render", s(&field_dir), "--out", s(&pano), "--width", "64"]), 0);
    let rendered = cubefield::rendering::render_novel_panorama(
        &field,
        &cubefield::Pose::identity(),
        &cubefield::ErpGrid::new(64, 32).unwrap(),
    )
    .unwrap();
    let l1_ref = rendered.image.data.iter().zip(&reference.data).map(|(a, b)| (a - b).abs()).sum::<f64>()
        / reference.data.len() as f64;
    assert!(l1_ref <= parts.l1 * (1 + views.len()) as f64 + 1e-9);
    assert_eq!(load_image(&pano).unwrap().width, 64);

    let traj = dir.path().join("traj.txt");
    std::fs::write(&traj, "interpolate 3\n1 0 0 0 0 0 0\n1 0 0 0 0.2 0 0\n").unwrap();
    let frames = dir.path().join("frames");
    assert_eq!(run(["cubefield", "path", s(&field_dir), s(&traj), "--out-dir", s(&frames), "--width", "32", "--depth"]), 0);
    assert!(frames.join("frame_0003.png").exists() && !frames.join("frame_0004.png").exists());
    assert!(frames.join("frame_0000_depth.pfm").exists());

    let csv = dir.path().join("metrics.csv");
    let code = run([
        "cubefield", "eval", s(&field_dir.join("depth.pfm")), s(&scene_dir.join("depth_gt.pfm")), "--out", s(&csv),
    ]);
    assert_eq!(code, 0);
    let rows = parse_metrics_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].scene, "depth_gt");

    // Same seed, same bytes.
    let again = dir.path().join("fit2");
    assert_eq!(fit(&again), 0);
    for f in ["trace.csv", "field.json", "face_B.bin", "face_U.bin", "depth.pfm"] {
        assert_eq!(std::fs::read(field_dir.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_directories_pair_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    let one = |v: f64| Image::filled(1, 1, 1, v);
    save_depth(&pred.join("a.pfm"), &one(2.0)).unwrap();
    save_depth(&gt.join("a.pfm"), &one(1.0)).unwrap();
    save_depth(&pred.join("b.png"), &one(1.5)).unwrap();
    save_depth(&gt.join("b.pfm"), &one(1.5)).unwrap();
    let csv = dir.path().join("m.csv");
    assert_eq!(run(["cubefield", "eval", s(&pred), s(&gt), "-o", s(&csv)]), 0);
    let rows = parse_metrics_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(rows[0].scene, "a");
    assert_eq!(rows[0].values, [1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    assert_eq!(rows[1].values, [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    assert_eq!(load_depth(&pred.join("b.png")).unwrap().data, [1.5]);
    std::fs::remove_file(pred.join("a.pfm")).unwrap();
    assert_eq!(run(["cubefield", "eval", s(&pred), s(&gt)]), 2);
}
