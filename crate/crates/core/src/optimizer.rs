//! Per-scene fitting of a cubic field to posed panoramas.
//!
//! Colors and densities are optimized through unconstrained parameters
//! (`c = logistic(ĉ)`, `σ = softplus(ŝ)`), so every iterate is a valid field.
//! Gradients are exact reverse-mode derivatives of the total loss through
//! rendering, sampling weights and the loss terms.

use std::str::FromStr;

use crate::blending::{blend_backward, blend_traced, BlendWeights};
use crate::error::{Error, Result};
use crate::field::{CubicField, DepthPlaneSet, Mpi};
use crate::geometry::{cubemap_to_erp, erp_to_cubemap, CubeIntrinsics, ErpGrid, Face};
use crate::image::{Cubemap, Image};
use crate::losses::{edge_align_loss_grad, l1_sum, l1_sum_backward, ssim_sum, total_loss, LossParts, LossWeights};
use crate::rendering::{
    backprop_rays, composite_faces, plane_distances, render_rays, PlanarSampler, Pose, RayCubeSampler, RaySampler,
};

/// Which renderings supervise the fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// Six target faces by planar homography sampling.
    Planar,
    /// Target panoramas by ray-cube sampling.
    RayCube,
    Both,
}

impl SamplingMode {
    fn planar(self) -> bool {
        matches!(self, SamplingMode::Planar | SamplingMode::Both)
    }

    fn raycube(self) -> bool {
        matches!(self, SamplingMode::RayCube | SamplingMode::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::Planar => "planar",
            SamplingMode::RayCube => "raycube",
            SamplingMode::Both => "both",
        }
    }
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planar" => Ok(SamplingMode::Planar),
            "raycube" => Ok(SamplingMode::RayCube),
            "both" => Ok(SamplingMode::Both),
            _ => Err(Error::InvalidArgument(format!(
                "unknown sampling mode '{s}' (expected planar, raycube or both)"
            ))),
        }
    }
}

/// A panorama captured at a known pose.
#[derive(Clone, Debug, PartialEq)]
pub struct PosedView {
    pub image: Image,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub iterations: usize,
    pub step_size: f64,
    /// Factor by which the step size shrinks over the whole run.
    pub step_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub sampling: SamplingMode,
    pub optimize_blending: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 200,
            step_size: 0.1,
            step_decay: 0.1,
            seed: 0,
            weights: LossWeights::default(),
            sampling: SamplingMode::Planar,
            optimize_blending: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size {} must be positive", self.step_size)));
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("step decay {} must lie in (0, 1]", self.step_decay)));
        }
        LossWeights::new(self.weights.l1, self.weights.ssim, self.weights.edge).map(|_| ())
    }

    fn step_at(&self, it: usize) -> f64 {
        self.step_size * self.step_decay.powf(it as f64 / self.iterations as f64)
    }
}

/// Loss values recorded at one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub parts: LossParts,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub field: CubicField,
    pub trace: Vec<TraceRow>,
    pub blend: Option<BlendWeights>,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Unconstrained parameters of a cubic field, laid out like the MPIs with
/// `(ĉ_r, ĉ_g, ĉ_b, ŝ)` per texel.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams {
    pub planes: DepthPlaneSet,
    pub w: usize,
    pub raw: [Vec<f64>; 6],
}

impl FieldParams {
    /// Colors from the reference faces on every plane; a constant density
    /// such that the optical depth along a face-center ray totals one.
    pub fn init(reference_faces: &Cubemap, planes: &DepthPlaneSet) -> Result<Self> {
        let w = reference_faces.size();
        if reference_faces.channels() != 3 {
            return Err(Error::Shape(format!("reference faces have {} channels", reference_faces.channels())));
        }
        let intr = CubeIntrinsics::new(w);
        let deltas = plane_distances(planes, &intr);
        let (cx, cy) = (w / 2, w / 2);
        let total: f64 = (0..planes.len()).map(|b| deltas[(b * w + cy) * w + cx]).sum();
        let sigma = 1.0 / total;
        let s_hat = sigma.exp_m1().ln();
        let raw = std::array::from_fn(|f| {
            let img = &reference_faces.faces[f];
            Mpi::from_fn(planes.len(), w, |_, x, y, c| {
                if c == 3 {
                    s_hat
                } else {
                    let v = img.get(x, y, c).clamp(1e-3, 1.0 - 1e-3);
                    (v / (1.0 - v)).ln()
                }
            })
            .data
        });
        Ok(FieldParams {
            planes: planes.clone(),
            w,
            raw,
        })
    }

    pub fn to_field(&self) -> CubicField {
        let mpis = std::array::from_fn(|f| Mpi {
            d: self.planes.len(),
            w: self.w,
            data: self.raw[f]
                .chunks_exact(4)
                .flat_map(|t| [logistic(t[0]), logistic(t[1]), logistic(t[2]), softplus(t[3])])
                .collect(),
        });
        CubicField::new(mpis, self.planes.clone()).expect("parameter shapes are consistent")
    }

    /// Maps a gradient with respect to field values onto the parameters.
    fn chain(&self, field: &CubicField, dfield: &mut [Vec<f64>; 6]) {
        for f in 0..6 {
            for ((g, v), r) in dfield[f]
                .chunks_exact_mut(4)
                .zip(field.mpis[f].data.chunks_exact(4))
                .zip(self.raw[f].chunks_exact(4))
            {
                for c in 0..3 {
                    g[c] *= v[c] * (1.0 - v[c]);
                }
                g[3] *= logistic(r[3]);
            }
        }
    }
}

/// A view prepared for supervision: target panorama and its cube faces.
struct Target {
    pose: Pose,
    pano: Image,
    grid: ErpGrid,
    faces: Option<Cubemap>,
}

fn prepare_targets(reference: &Image, views: &[PosedView], w: usize, cfg: &FitConfig) -> Result<Vec<Target>> {
    let intr = CubeIntrinsics::new(w);
    std::iter::once((reference, Pose::identity()))
        .chain(views.iter().map(|v| (&v.image, v.pose)))
        .map(|(img, pose)| {
            if img.channels != 3 {
                return Err(Error::Shape(format!("view has {} channels, expected 3", img.channels)));
            }
            Ok(Target {
                pose,
                grid: ErpGrid::new(img.width, img.height)?,
                faces: cfg.sampling.planar().then(|| erp_to_cubemap(img, &intr)).transpose()?,
                pano: img.clone(),
            })
        })
        .collect()
}

/// Accumulated photometric term over several images.
#[derive(Default)]
struct Pooled {
    l1: f64,
    l1_n: usize,
    ssim: f64,
    ssim_n: usize,
}

struct Rendered {
    image: Image,
    mask: Vec<bool>,
    ssim_grad: Vec<f64>,
}

fn render_and_score<S: RaySampler>(
    field: &CubicField,
    sampler: &S,
    target: &Image,
    pooled: &mut Pooled,
) -> Result<Rendered> {
    let batch = render_rays(field, sampler);
    let image = Image {
        width: target.width,
        height: target.height,
        channels: 3,
        data: batch.rgb,
    };
    let mask = batch.valid;
    let (l1, n) = l1_sum(&image, target, Some(&mask))?;
    let (ss, sn, g) = ssim_sum(&image, target, Some(&mask), true)?;
    pooled.l1 += l1;
    pooled.l1_n += n;
    pooled.ssim += ss;
    pooled.ssim_n += sn;
    Ok(Rendered {
        image,
        mask,
        ssim_grad: g.expect("gradient requested"),
    })
}

fn pooled_terms(p: &Pooled) -> (f64, f64) {
    let l1 = if p.l1_n > 0 { p.l1 / p.l1_n as f64 } else { 0.0 };
    let ss = if p.ssim_n > 0 { 1.0 - p.ssim / p.ssim_n as f64 } else { 0.0 };
    (l1, ss)
}

fn backprop_term<S: RaySampler>(
    field: &CubicField,
    sampler: &S,
    r: &Rendered,
    target: &Image,
    pooled: &Pooled,
    scale_l1: f64,
    scale_ssim: f64,
    grad: &mut [Vec<f64>; 6],
) {
    let mut g = vec![0.0; r.image.data.len()];
    if pooled.l1_n > 0 {
        l1_sum_backward(&r.image, target, Some(&r.mask), scale_l1 / pooled.l1_n as f64, &mut g);
    }
    if pooled.ssim_n > 0 {
        let s = -scale_ssim / pooled.ssim_n as f64;
        for (gi, si) in g.iter_mut().zip(&r.ssim_grad) {
            *gi += s * si;
        }
    }
    backprop_rays(field, sampler, &g, None, grad);
}

/// Total loss of `field` against the targets, and optionally its gradient
/// with respect to the field values.
fn evaluate(
    field: &CubicField,
    targets: &[Target],
    cfg: &FitConfig,
    want_grad: bool,
) -> Result<(LossParts, f64, Option<[Vec<f64>; 6]>)> {
    let lw = &cfg.weights;
    let nviews = targets.len() as f64;
    let mut grad: Option<[Vec<f64>; 6]> = want_grad.then(|| std::array::from_fn(|f| vec![0.0; field.mpis[f].data.len()]));
    let mut parts = LossParts::default();
    for t in targets {
        if let Some(faces) = &t.faces {
            let samplers: Vec<PlanarSampler> = Face::ALL.iter().map(|&f| PlanarSampler::new(field, f, &t.pose)).collect();
            let mut pooled = Pooled::default();
            let rendered = samplers
                .iter()
                .zip(&faces.faces)
                .map(|(s, target)| render_and_score(field, s, target, &mut pooled))
                .collect::<Result<Vec<_>>>()?;
            let (l1, ss) = pooled_terms(&pooled);
            parts.l1 += l1 / nviews;
            parts.ssim += ss / nviews;
            if let Some(g) = grad.as_mut() {
                for ((s, r), target) in samplers.iter().zip(&rendered).zip(&faces.faces) {
                    backprop_term(field, s, r, target, &pooled, lw.l1 / nviews, lw.ssim / nviews, g);
                }
            }
        }
        if cfg.sampling.raycube() {
            let sampler = RayCubeSampler::new(field, &t.pose, t.grid)?;
            let mut pooled = Pooled::default();
            let r = render_and_score(field, &sampler, &t.pano, &mut pooled)?;
            let (l1, ss) = pooled_terms(&pooled);
            parts.l1 += l1 / nviews;
            parts.ssim += ss / nviews;
            if let Some(g) = grad.as_mut() {
                backprop_term(field, &sampler, &r, &t.pano, &pooled, lw.l1 / nviews, lw.ssim / nviews, g);
            }
        }
    }
    parts.edge = edge_align_loss_grad(field, lw.edge, grad.as_mut());
    Ok((parts, total_loss(&parts, lw), grad))
}

/// Loss parts, total loss and the exact gradient with respect to `params`
/// for the reference panorama (identity pose) plus `views`.
pub fn loss_gradient(
    params: &FieldParams,
    reference: &Image,
    views: &[PosedView],
    cfg: &FitConfig,
) -> Result<(LossParts, f64, [Vec<f64>; 6])> {
    check_views(views, &params.planes)?;
    let targets = prepare_targets(reference, views, params.w, cfg)?;
    let field = params.to_field();
    let (parts, total, grad) = evaluate(&field, &targets, cfg, true)?;
    let mut grad = grad.expect("gradient requested");
    params.chain(&field, &mut grad);
    Ok((parts, total, grad))
}

fn check_views(views: &[PosedView], planes: &DepthPlaneSet) -> Result<()> {
    for v in views {
        if !(v.pose.max_abs_translation() < planes.near) {
            return Err(Error::OriginOutsideCube {
                origin: v.pose.center().into(),
                half_size: planes.near,
            });
        }
    }
    Ok(())
}

/// First-order moments for one flat parameter block.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64, t: usize) {
        let c1 = 1.0 - Self::B1.powi(t as i32);
        let c2 = 1.0 - Self::B2.powi(t as i32);
        for (((xi, gi), mi), vi) in x.iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
            *mi = Self::B1 * *mi + (1.0 - Self::B1) * gi;
            *vi = Self::B2 * *vi + (1.0 - Self::B2) * gi * gi;
            *xi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + Self::EPS);
        }
    }
}

/// Fits a field with `w`-pixel faces on `planes` to the reference panorama
/// (identity pose) and the posed views.
pub fn fit(
    reference: &Image,
    views: &[PosedView],
    planes: &DepthPlaneSet,
    w: usize,
    cfg: &FitConfig,
    mut progress: impl FnMut(&TraceRow),
) -> Result<FitResult> {
    cfg.validate()?;
    check_views(views, planes)?;
    let intr = CubeIntrinsics::new(w);
    let targets = prepare_targets(reference, views, w, cfg)?;
    let mut params = FieldParams::init(&erp_to_cubemap(reference, &intr)?, planes)?;
    let mut blend = cfg.optimize_blending.then(|| BlendWeights::seeded(cfg.seed));
    let mut opt: Vec<Adam> = params.raw.iter().map(|r| Adam::new(r.len())).collect();
    let mut blend_opt: Vec<Adam> = blend
        .as_mut()
        .map(|b| b.learnable_mut().iter().map(|t| Adam::new(t.len())).collect())
        .unwrap_or_default();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let base = params.to_field();
        let (parts, total, mut grad, blend_grad) = match &blend {
            None => {
                let (p, t, g) = evaluate(&base, &targets, cfg, true)?;
                (p, t, g.expect("gradient requested"), None)
            }
            Some(bw) => {
                let (blended, trace) = blend_traced(&base, reference, bw)?;
                let (p, t, g) = evaluate(&blended, &targets, cfg, true)?;
                let (gin, gw) = blend_backward(&trace, bw, &g.expect("gradient requested"))?;
                (p, t, gin, Some(gw))
            }
        };
        if !total.is_finite() {
            return Err(Error::Divergence(it));
        }
        let row = TraceRow {
            iteration: it,
            parts,
            total,
        };
        progress(&row);
        trace.push(row);
        params.chain(&base, &mut grad);
        if grad.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(it));
        }
        let lr = cfg.step_at(it);
        for ((x, g), o) in params.raw.iter_mut().zip(&grad).zip(&mut opt) {
            o.step(x, g, lr, it + 1);
        }
        if let (Some(bw), Some(gw)) = (blend.as_mut(), blend_grad) {
            for ((x, g), o) in bw.learnable_mut().into_iter().zip(gw.flat()).zip(&mut blend_opt) {
                o.step(x, g, lr, it + 1);
            }
        }
    }
    let mut field = params.to_field();
    if let Some(bw) = &blend {
        field = blend_traced(&field, reference, bw)?.0;
    }
    Ok(FitResult { field, trace, blend })
}

/// Evaluates the loss of a fixed field against posed views.
pub fn evaluate_loss(
    field: &CubicField,
    reference: &Image,
    views: &[PosedView],
    cfg: &FitConfig,
) -> Result<(LossParts, f64)> {
    check_views(views, &field.planes)?;
    let targets = prepare_targets(reference, views, field.w(), cfg)?;
    let (p, t, _) = evaluate(field, &targets, cfg, false)?;
    Ok((p, t))
}

/// Composited depth of the field seen from its center.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub depth: DepthLayout,
    /// True where nothing was absorbed (residual transmittance of one).
    pub empty: DepthLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DepthLayout {
    Cubemap(Cubemap),
    Panorama(Image),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthAs {
    Cubemap,
    Panorama { width: usize },
}

/// Per-face composited depth, optionally fused into an equirectangular map.
pub fn extract_depth(field: &CubicField, layout: DepthAs) -> Result<DepthMap> {
    let faces = composite_faces(field);
    let depth = Cubemap {
        faces: std::array::from_fn(|i| faces[i].depth.clone()),
    };
    let empty = Cubemap {
        faces: std::array::from_fn(|i| {
            let e = faces[i].empty_mask();
            Image {
                width: field.w(),
                height: field.w(),
                channels: 1,
                data: e.into_iter().map(|v| if v { 1.0 } else { 0.0 }).collect(),
            }
        }),
    };
    Ok(match layout {
        DepthAs::Cubemap => DepthMap {
            depth: DepthLayout::Cubemap(depth),
            empty: DepthLayout::Cubemap(empty),
        },
        DepthAs::Panorama { width } => {
            let grid = ErpGrid::new(width, width / 2)?;
            let mut e = cubemap_to_erp(&empty, &grid);
            e.data.iter_mut().for_each(|v| *v = if *v >= 1.0 - 1e-12 { 1.0 } else { 0.0 });
            DepthMap {
                depth: DepthLayout::Panorama(cubemap_to_erp(&depth, &grid)),
                empty: DepthLayout::Panorama(e),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::erp_pixel_to_sphere;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(w: usize, d: usize, seed: u64) -> FieldParams {
        let planes = DepthPlaneSet::new(1.0, 4.0, d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FieldParams {
            planes,
            w,
            raw: std::array::from_fn(|_| (0..d * w * w * 4).map(|_| rng.random_range(-2.0..2.0)).collect()),
        }
    }

    fn smooth_pano(w: usize, h: usize, phase: f64) -> Image {
        let grid = ErpGrid::new(w, h).unwrap();
        Image::from_fn(w, h, 3, |x, y, c| {
            let q = erp_pixel_to_sphere(x as f64 + 0.5, y as f64 + 0.5, &grid).q;
            0.5 + 0.4 * (3.0 * q.x + 2.0 * q.y * (c as f64 + 1.0) + q.z + phase).sin()
        })
    }

    fn views(n: usize) -> Vec<PosedView> {
        (0..n)
            .map(|i| PosedView {
                image: smooth_pano(32, 16, 0.3 * (i + 1) as f64),
                pose: Pose::new(
                    nalgebra::Rotation3::from_euler_angles(0.05 * i as f64, -0.1, 0.02).into_inner(),
                    nalgebra::Vector3::new(0.1, -0.05 * i as f64, 0.15),
                )
                .unwrap(),
            })
            .collect()
    }

    fn fd_check(mode: SamplingMode, seed: u64) {
        let params = random_params(8, 3, seed);
        let reference = smooth_pano(32, 16, 0.0);
        let vs = views(1);
        let cfg = FitConfig {
            sampling: mode,
            weights: LossWeights::new(1.0, 0.7, 0.3).unwrap(),
            ..FitConfig::default()
        };
        let (_, _, grad) = loss_gradient(&params, &reference, &vs, &cfg).unwrap();
        let h = 1e-4;
        let loss = |p: &FieldParams| evaluate_loss(&p.to_field(), &reference, &vs, &cfg).unwrap().1;
        let mut worst: f64 = 0.0;
        for f in 0..6 {
            for i in (0..params.raw[f].len()).step_by(5) {
                let mut p = params.clone();
                p.raw[f][i] += h;
                let mut m = params.clone();
                m.raw[f][i] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let a = grad[f][i];
                let ok = (a - fd).abs() < 1e-7 || (a - fd).abs() / fd.abs().max(a.abs()) < 1e-4;
                assert!(ok, "{mode:?} face {f} index {i}: analytic {a} fd {fd}");
                worst = worst.max((a - fd).abs());
            }
        }
        assert!(worst.is_finite());
    }

    #[test]
    fn planar_gradient_matches_finite_differences() {
        fd_check(SamplingMode::Planar, 1);
    }

    #[test]
    fn raycube_gradient_matches_finite_differences() {
        fd_check(SamplingMode::RayCube, 2);
    }

    #[test]
    fn zero_density_black_targets_give_no_color_gradient() {
        let planes = DepthPlaneSet::new(1.0, 4.0, 3).unwrap();
        let mut params = FieldParams {
            planes,
            w: 8,
            raw: std::array::from_fn(|_| vec![0.3; 3 * 64 * 4]),
        };
        for r in params.raw.iter_mut() {
            r.chunks_exact_mut(4).for_each(|t| t[3] = -800.0);
        }
        let black = Image::new(32, 16, 3);
        let vs = vec![PosedView {
            image: black.clone(),
            pose: Pose::translation([0.1, 0.0, 0.0]),
        }];
        let cfg = FitConfig {
            sampling: SamplingMode::Both,
            ..FitConfig::default()
        };
        let (_, _, grad) = loss_gradient(&params, &black, &vs, &cfg).unwrap();
        for g in &grad {
            for t in g.chunks_exact(4) {
                assert_eq!(&t[..3], &[0.0; 3]);
            }
        }
    }

    #[test]
    fn gradient_scales_with_loss_weights() {
        let params = random_params(8, 3, 5);
        let reference = smooth_pano(32, 16, 0.0);
        let vs = views(1);
        let base = FitConfig {
            sampling: SamplingMode::Both,
            ..FitConfig::default()
        };
        let scaled = FitConfig {
            weights: LossWeights::new(2.5, 2.5, 0.25).unwrap(),
            ..base.clone()
        };
        let (_, t1, g1) = loss_gradient(&params, &reference, &vs, &base).unwrap();
        let (_, t2, g2) = loss_gradient(&params, &reference, &vs, &scaled).unwrap();
        assert_abs_diff_eq!(t2, 2.5 * t1, epsilon = 1e-9);
        for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
            assert_abs_diff_eq!(*b, 2.5 * a, epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_bad_configs_and_poses() {
        let cfg = FitConfig {
            iterations: 0,
            ..FitConfig::default()
        };
        assert!(cfg.validate().is_err());
        let planes = DepthPlaneSet::new(0.5, 4.0, 3).unwrap();
        let reference = smooth_pano(32, 16, 0.0);
        let far = vec![PosedView {
            image: reference.clone(),
            pose: Pose::translation([0.6, 0.0, 0.0]),
        }];
        assert!(matches!(
            fit(&reference, &far, &planes, 8, &FitConfig::default(), |_| {}),
            Err(Error::OriginOutsideCube { .. })
        ));
        assert!("sideways".parse::<SamplingMode>().is_err());
        assert_eq!("raycube".parse::<SamplingMode>().unwrap(), SamplingMode::RayCube);
    }

    #[test]
    fn single_view_fit_reduces_loss() {
        let w = 16;
        let planes = DepthPlaneSet::new(1.0, 6.0, 4).unwrap();
        let reference = smooth_pano(64, 32, 0.0);
        let cfg = FitConfig {
            iterations: 60,
            ..FitConfig::default()
        };
        let res = fit(&reference, &[], &planes, w, &cfg, |_| {}).unwrap();
        let first = res.trace[0].total;
        let last = res.trace.last().unwrap().total;
        assert!(last < 0.1 * first, "{first} -> {last}");
        assert!(res.field.is_valid());
    }

    #[test]
    fn fits_are_reproducible() {
        let planes = DepthPlaneSet::new(1.0, 6.0, 3).unwrap();
        let reference = smooth_pano(32, 16, 0.0);
        let vs = views(2);
        let cfg = FitConfig {
            iterations: 5,
            sampling: SamplingMode::Both,
            ..FitConfig::default()
        };
        let a = fit(&reference, &vs, &planes, 8, &cfg, |_| {}).unwrap();
        let b = fit(&reference, &vs, &planes, 8, &cfg, |_| {}).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.field, b.field);
    }

    #[test]
    fn blending_joins_the_fit() {
        let planes = DepthPlaneSet::new(1.0, 6.0, 2).unwrap();
        let reference = smooth_pano(64, 32, 0.0);
        let cfg = FitConfig {
            iterations: 2,
            optimize_blending: true,
            ..FitConfig::default()
        };
        let res = fit(&reference, &[], &planes, 16, &cfg, |_| {}).unwrap();
        assert!(res.blend.is_some());
        assert!(res.field.is_valid());
        assert!(res.trace.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn depth_extraction_cases() {
        let w = 65;
        let planes = DepthPlaneSet::new(1.0, 4.0, 3).unwrap();
        let z = planes.z[1];
        let mpis = std::array::from_fn(|_| Mpi::from_fn(3, w, |b, _, _, c| if c == 3 { if b == 1 { 1e4 } else { 0.0 } } else { 0.5 }));
        let field = CubicField::new(mpis, planes.clone()).unwrap();
        let DepthMap {
            depth: DepthLayout::Cubemap(cube),
            ..
        } = extract_depth(&field, DepthAs::Cubemap).unwrap()
        else {
            panic!("cubemap layout requested");
        };
        for f in &cube.faces {
            assert_abs_diff_eq!(f.get(32, 32, 0), z, epsilon = 1e-9);
        }
        let DepthMap {
            depth: DepthLayout::Panorama(pano),
            ..
        } = extract_depth(&field, DepthAs::Panorama { width: 1024 }).unwrap()
        else {
            panic!("panorama layout requested");
        };
        // The front face center sits at longitude 0 on the equator.
        let mut px = [0.0];
        pano.sample_erp(512.0, 256.0, &mut px);
        assert_abs_diff_eq!(px[0], z, epsilon = 1e-3 * z);

        let empty = CubicField::uniform(w, planes, [0.5; 3], 0.0);
        let DepthMap {
            depth: DepthLayout::Cubemap(d),
            empty: DepthLayout::Cubemap(e),
        } = extract_depth(&empty, DepthAs::Cubemap).unwrap()
        else {
            panic!("cubemap layout requested");
        };
        assert!(d.faces.iter().all(|f| f.data.iter().all(|&v| v == 0.0)));
        assert!(e.faces.iter().all(|f| f.data.iter().all(|&v| v == 1.0)));
    }
}
