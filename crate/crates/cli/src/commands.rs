use std::path::{Path, PathBuf};

use cubefield::geometry::{cubemap_to_erp, erp_to_cubemap};
use cubefield::io::{
    list_files, load_depth, load_field, load_image, load_panorama, load_scene, load_trajectory, save_checkpoint,
    save_depth, save_field, save_image, save_trace,
};
use cubefield::metrics::{depth_metrics, median_abs_error, metrics_report, MetricsRow};
use cubefield::optimizer::{extract_depth, fit, DepthAs, DepthLayout};
use cubefield::rendering::{render_novel_cubemap, render_novel_panorama};
use cubefield::synth::{room_scene, SynthConfig};
use cubefield::{
    CubeIntrinsics, Cubemap, DepthEvalConfig, Error, ErpGrid, Face, FitConfig, LossWeights, Pose, Result,
};

use crate::args::*;

fn face_path(dir: &Path, face: Face, suffix: &str) -> PathBuf {
    dir.join(format!("face_{}{suffix}", face.name()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn pano_grid(width: Option<usize>, w: usize) -> Result<ErpGrid> {
    let width = width.unwrap_or(4 * w);
    ErpGrid::new(width, width / 2)
}

pub fn e2c(a: &E2cArgs) -> Result<()> {
    let pano = load_panorama(&a.input)?;
    if a.face_size == 0 {
        return Err(Error::InvalidArgument("face size must be positive".into()));
    }
    let cube = erp_to_cubemap(&pano, &CubeIntrinsics::new(a.face_size))?;
    create_dir(&a.out_dir)?;
    for f in Face::ALL {
        save_image(&face_path(&a.out_dir, f, ".png"), cube.face(f))?;
    }
    Ok(())
}

pub fn c2e(a: &C2eArgs) -> Result<()> {
    let faces = Face::ALL
        .iter()
        .map(|&f| load_image(&face_path(&a.in_dir, f, ".png")))
        .collect::<Result<Vec<_>>>()?;
    let w = faces[0].width;
    if faces.iter().any(|f| f.width != w || f.height != w) {
        return Err(Error::Shape("cube faces must be square and equally sized".into()));
    }
    let cube = Cubemap {
        faces: faces.try_into().expect("six faces"),
    };
    save_image(&a.output, &cubemap_to_erp(&cube, &pano_grid(a.width, w)?))
}

pub fn run_fit(a: &FitArgs) -> Result<()> {
    let mut m = load_scene(&a.scene)?;
    let f = &a.scene_flags;
    m.seed = f.seed.unwrap_or(m.seed);
    m.d = f.planes.unwrap_or(m.d);
    m.w = f.face_size.unwrap_or(m.w);
    m.near = f.near.unwrap_or(m.near);
    m.far = f.far.unwrap_or(m.far);
    m.validate(&a.scene)?;
    let (reference, views) = m.load_views()?;
    let cfg = FitConfig {
        iterations: a.iterations,
        step_size: a.step_size,
        step_decay: a.step_decay,
        seed: m.seed,
        weights: LossWeights::new(a.lambda_l1, a.lambda_ssim, a.lambda_edge)?,
        sampling: a.sampling.into(),
        optimize_blending: a.blend,
    };
    eprintln!(
        "fitting w={} d={} near={} far={} views={} sampling={}",
        m.w,
        m.d,
        m.near,
        m.far,
        views.len(),
        cfg.sampling.name()
    );
    let result = fit(&reference, &views, &m.planes()?, m.w, &cfg, |row| {
        if a.log_every > 0 && (row.iteration % a.log_every == 0 || row.iteration + 1 == a.iterations) {
            eprintln!(
                "iter {:>5}  L1 {:.6}  SSIM {:.6}  edge {:.6}  total {:.6}",
                row.iteration, row.parts.l1, row.parts.ssim, row.parts.edge, row.total
            );
        }
    })?;
    save_field(&a.out, &result.field)?;
    save_trace(&a.out.join("trace.csv"), &result.trace)?;
    let depth = extract_depth(&result.field, DepthAs::Panorama { width: reference.width })?;
    if let DepthLayout::Panorama(d) = depth.depth {
        save_depth(&a.out.join("depth.pfm"), &d)?;
    }
    if let Some(b) = &result.blend {
        save_checkpoint(&a.out.join("blend"), b)?;
    }
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn pose_of(p: &PoseArgs) -> Result<Pose> {
    Pose::from_quaternion(
        [p.rotation[0], p.rotation[1], p.rotation[2], p.rotation[3]],
        [p.translation[0], p.translation[1], p.translation[2]],
    )
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let field = load_field(&a.field_dir)?;
    let pose = pose_of(&a.pose)?;
    match a.mode {
        RenderMode::Panorama => {
            let out = render_novel_panorama(&field, &pose, &pano_grid(a.width, field.w())?)?;
            save_image(&a.out, &out.image)?;
            if let Some(p) = &a.depth {
                save_depth(p, &out.depth)?;
            }
        }
        RenderMode::Cubemap => {
            if pose.max_abs_translation() >= field.planes.near {
                return Err(Error::OriginOutsideCube {
                    origin: pose.center().into(),
                    half_size: field.planes.near,
                });
            }
            let out = render_novel_cubemap(&field, &pose);
            create_dir(&a.out)?;
            for f in Face::ALL {
                save_image(&face_path(&a.out, f, ".png"), &out.faces[f.index()].image)?;
            }
            if let Some(dir) = &a.depth {
                create_dir(dir)?;
                for f in Face::ALL {
                    save_depth(&face_path(dir, f, ".pfm"), &out.faces[f.index()].depth)?;
                }
            }
        }
    }
    Ok(())
}

pub fn path(a: &PathArgs) -> Result<()> {
    let field = load_field(&a.field_dir)?;
    let poses = load_trajectory(&a.trajectory)?.frames();
    let grid = pano_grid(a.width, field.w())?;
    create_dir(&a.out_dir)?;
    for (i, pose) in poses.iter().enumerate() {
        let out = render_novel_panorama(&field, pose, &grid)?;
        save_image(&a.out_dir.join(format!("frame_{i:04}.png")), &out.image)?;
        if a.depth {
            save_depth(&a.out_dir.join(format!("frame_{i:04}_depth.pfm")), &out.depth)?;
        }
    }
    eprintln!("wrote {} frames to {}", poses.len(), a.out_dir.display());
    Ok(())
}

const DEPTH_EXTS: [&str; 2] = ["pfm", "png"];

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// `(scene, pred, gt)` triples; directories pair files by stem.
fn depth_pairs(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if !gt.is_dir() {
        return Ok(vec![(stem(gt), pred.to_path_buf(), gt.to_path_buf())]);
    }
    let preds = list_files(pred, &DEPTH_EXTS)?;
    let mut out = Vec::new();
    for g in list_files(gt, &DEPTH_EXTS)? {
        let s = stem(&g);
        let p = preds
            .iter()
            .find(|p| stem(p) == s)
            .ok_or_else(|| Error::MissingFile(pred.join(format!("{s}.pfm"))))?;
        out.push((s, p.clone(), g));
    }
    if out.is_empty() {
        return Err(Error::MissingFile(gt.join("*.pfm")));
    }
    Ok(out)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = DepthEvalConfig {
        min_depth: a.min_depth,
        max_depth: a.max_depth,
        median_scaling: a.median_scaling,
    };
    let mut rows = Vec::new();
    let mut medians = Vec::new();
    for (scene, p, g) in depth_pairs(&a.pred, &a.gt)? {
        let (pred, gt) = (load_depth(&p)?, load_depth(&g)?);
        let m = depth_metrics(&pred, &gt, &cfg)?;
        medians.push((scene.clone(), median_abs_error(&pred, &gt, &cfg)?, m.excluded));
        rows.push(MetricsRow {
            scene,
            values: m.values(),
        });
    }
    let report = metrics_report(&rows)?;
    print!("{}", report.text);
    for (scene, med, excluded) in medians {
        println!("{scene}: median abs error {med:.6}, {excluded} pixels without valid ground truth");
    }
    if let Some(out) = &a.out {
        std::fs::write(out, report.csv).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let f = &a.scene_flags;
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        width: a.width,
        views: a.views,
        baseline: a.baseline,
        supersample: a.supersample,
        seed: f.seed.unwrap_or(0),
        near: f.near.unwrap_or(defaults.near),
        far: f.far.unwrap_or(defaults.far),
        ..defaults
    };
    let scene = room_scene(&cfg)?;
    let path = scene.save(&a.out_dir, f.face_size.unwrap_or(128), f.planes.unwrap_or(32), cfg.seed)?;
    println!("{}", path.display());
    println!("room scale {:.6}", scene.room.scale());
    Ok(())
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let field = a.field_dir.as_deref().map(load_field).transpose()?;
    let state = crate::service::AppState::new(field, a.workers)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io {
        path: PathBuf::from("<runtime>"),
        source: e,
    })?;
    rt.block_on(crate::service::serve(state, &a.host, a.port))
        .map_err(|e| Error::Io {
            path: PathBuf::from(format!("{}:{}", a.host, a.port)),
            source: e,
        })
}
