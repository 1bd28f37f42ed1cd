//! Photometric L1, SSIM and edge-alignment losses, each with an analytic
//! gradient so the optimizer can backpropagate without an autodiff engine.

use crate::error::{Error, Result};
use crate::field::CubicField;
use crate::geometry::{cube_edges, Edge, Face};
use crate::image::{Cubemap, Image};
use crate::rendering::{plane_distances, ray_weights, ray_weights_backward};

/// Weights of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            ssim: 1.0,
            edge: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(l1: f64, ssim: f64, edge: f64) -> Result<Self> {
        for (name, v) in [("l1", l1), ("ssim", ssim), ("edge", edge)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(LossWeights { l1, ssim, edge })
    }
}

/// Unweighted values of the three loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l1: f64,
    pub ssim: f64,
    pub edge: f64,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> f64 {
    weights.l1 * parts.l1 + weights.ssim * parts.ssim + weights.edge * parts.edge
}

fn check_mask(img: &Image, mask: Option<&[bool]>) -> Result<()> {
    match mask {
        Some(m) if m.len() != img.width * img.height => Err(Error::Shape(format!(
            "mask of {} entries for a {}x{} image",
            m.len(),
            img.width,
            img.height
        ))),
        _ => Ok(()),
    }
}

/// Sum of `|a − b|` over valid pixels and all channels, and the number of
/// entries summed.
pub fn l1_sum(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<(f64, usize)> {
    a.check_same_shape(b)?;
    check_mask(a, mask)?;
    let ch = a.channels;
    let mut sum = 0.0;
    let mut n = 0;
    for p in 0..a.width * a.height {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        for c in 0..ch {
            sum += (a.data[p * ch + c] - b.data[p * ch + c]).abs();
        }
        n += ch;
    }
    Ok((sum, n))
}

/// Adds `scale · sign(a − b)` on valid entries to `grad` (laid out like `a`).
pub fn l1_sum_backward(a: &Image, b: &Image, mask: Option<&[bool]>, scale: f64, grad: &mut [f64]) {
    let ch = a.channels;
    for p in 0..a.width * a.height {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        for c in 0..ch {
            let i = p * ch + c;
            let diff = a.data[i] - b.data[i];
            if diff != 0.0 {
                grad[i] += scale * diff.signum();
            }
        }
    }
}

fn masked_mean_faces(
    rendered: &Cubemap,
    target: &Cubemap,
    masks: &[Vec<bool>; 6],
    f: impl Fn(&Image, &Image, Option<&[bool]>) -> Result<(f64, usize)>,
) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..6 {
        let (s, k) = f(&rendered.faces[i], &target.faces[i], Some(&masks[i]))?;
        sum += s;
        n += k;
    }
    Ok((sum, n))
}

/// Masked mean absolute difference of the panorama plus that of the six
/// faces; each mean counts only valid entries.
pub fn photometric_l1(
    rendered_pano: &Image,
    target_pano: &Image,
    rendered_faces: &Cubemap,
    target_faces: &Cubemap,
    masks: &[Vec<bool>; 6],
) -> Result<f64> {
    let (ps, pn) = l1_sum(rendered_pano, target_pano, None)?;
    let (cs, cn) = masked_mean_faces(rendered_faces, target_faces, masks, l1_sum)?;
    if pn == 0 || cn == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(ps / pn as f64 + cs / cn as f64)
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Per-output-position 1-D Gaussian taps, truncated at the borders and
/// renormalized to sum to one.
struct Kernel1d {
    taps: Vec<Vec<(usize, f64)>>,
}

impl Kernel1d {
    fn new(n: usize) -> Self {
        let taps = (0..n)
            .map(|p| {
                let lo = p.saturating_sub(SSIM_RADIUS);
                let hi = (p + SSIM_RADIUS).min(n - 1);
                let mut t: Vec<(usize, f64)> = (lo..=hi)
                    .map(|k| {
                        let o = k as f64 - p as f64;
                        (k, (-o * o / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
                    })
                    .collect();
                let s: f64 = t.iter().map(|e| e.1).sum();
                t.iter_mut().for_each(|e| e.1 /= s);
                t
            })
            .collect();
        Kernel1d { taps }
    }
}

/// Separable Gaussian filtering of a single-channel `w × h` plane, or its
/// transpose.
struct Gaussian2d {
    w: usize,
    h: usize,
    kx: Kernel1d,
    ky: Kernel1d,
}

impl Gaussian2d {
    fn new(w: usize, h: usize) -> Self {
        Gaussian2d {
            w,
            h,
            kx: Kernel1d::new(w),
            ky: Kernel1d::new(h),
        }
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = self.kx.taps[x].iter().map(|&(k, g)| g * src[y * w + k]).sum();
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for (k, g) in &self.ky.taps[y] {
                let (row, src_row) = (&mut out[y * w..(y + 1) * w], &tmp[k * w..(k + 1) * w]);
                for (o, s) in row.iter_mut().zip(src_row) {
                    *o += g * s;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for (k, g) in &self.ky.taps[y] {
                let (row, src_row) = (&mut tmp[k * w..(k + 1) * w], &src[y * w..(y + 1) * w]);
                for (o, s) in row.iter_mut().zip(src_row) {
                    *o += g * s;
                }
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let v = tmp[y * w + x];
                for &(k, g) in &self.kx.taps[x] {
                    out[y * w + k] += g * v;
                }
            }
        }
        out
    }

    /// Window centers whose support contains only valid pixels.
    fn kept_windows(&self, mask: Option<&[bool]>) -> Vec<bool> {
        let (w, h) = (self.w, self.h);
        let Some(m) = mask else {
            return vec![true; w * h];
        };
        let mut rows = vec![true; w * h];
        for y in 0..h {
            for x in 0..w {
                let t = &self.kx.taps[x];
                let (lo, hi) = (t[0].0, t[t.len() - 1].0);
                rows[y * w + x] = (lo..=hi).all(|k| m[y * w + k]);
            }
        }
        let mut out = vec![true; w * h];
        for y in 0..h {
            let t = &self.ky.taps[y];
            let (lo, hi) = (t[0].0, t[t.len() - 1].0);
            for x in 0..w {
                out[y * w + x] = (lo..=hi).all(|k| rows[k * w + x]);
            }
        }
        out
    }
}

/// Sum of per-window SSIM over kept windows and channels, the number of
/// terms, and optionally the gradient of the sum with respect to `a`.
pub fn ssim_sum(a: &Image, b: &Image, mask: Option<&[bool]>, want_grad: bool) -> Result<(f64, usize, Option<Vec<f64>>)> {
    a.check_same_shape(b)?;
    check_mask(a, mask)?;
    let (w, h, ch) = (a.width, a.height, a.channels);
    let g = Gaussian2d::new(w, h);
    let kept = g.kept_windows(mask);
    let nkept = kept.iter().filter(|&&k| k).count();
    let mut sum = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; a.data.len()]);
    for c in 0..ch {
        let x: Vec<f64> = (0..w * h).map(|p| a.data[p * ch + c]).collect();
        let y: Vec<f64> = (0..w * h).map(|p| b.data[p * ch + c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (g.apply(&x), g.apply(&y));
        let (exx, eyy, exy) = (g.apply(&xx), g.apply(&yy), g.apply(&xy));
        let mut alpha = vec![0.0; w * h];
        let mut beta = vec![0.0; w * h];
        let mut gamma = vec![0.0; w * h];
        for p in 0..w * h {
            if !kept[p] {
                continue;
            }
            let (ux, uy) = (mx[p], my[p]);
            let vx = exx[p] - ux * ux;
            let vy = eyy[p] - uy * uy;
            let cxy = exy[p] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * cxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = vx + vy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            sum += s;
            if want_grad {
                alpha[p] = s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
                beta[p] = s * 2.0 / a2;
                gamma[p] = -s * 2.0 / b2;
            }
        }
        if let Some(grad) = grad.as_mut() {
            let (ga, gb, gc) = (g.apply_transpose(&alpha), g.apply_transpose(&beta), g.apply_transpose(&gamma));
            for p in 0..w * h {
                grad[p * ch + c] = ga[p] + y[p] * gb[p] + x[p] * gc[p];
            }
        }
    }
    Ok((sum, nkept * ch, grad))
}

/// Mean SSIM over kept windows.
pub fn ssim(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<f64> {
    let (s, n, _) = ssim_sum(a, b, mask, false)?;
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(s / n as f64)
}

/// `(1 − SSIM)` of the panorama plus `(1 − SSIM)` pooled over the six
/// faces, with windows touching invalid pixels dropped.
pub fn ssim_loss(
    rendered_pano: &Image,
    target_pano: &Image,
    rendered_faces: &Cubemap,
    target_faces: &Cubemap,
    masks: &[Vec<bool>; 6],
) -> Result<f64> {
    let pano = ssim(rendered_pano, target_pano, None)?;
    let (cs, cn) = masked_mean_faces(rendered_faces, target_faces, masks, |a, b, m| {
        ssim_sum(a, b, m, false).map(|(s, n, _)| (s, n))
    })?;
    if cn == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((1.0 - pano) + (1.0 - cs / cn as f64))
}

/// Rendering weights along one face border, `[pos][plane]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeightStrip {
    pub w: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl EdgeWeightStrip {
    pub fn row(&self, pos: usize) -> &[f64] {
        &self.data[pos * self.d..(pos + 1) * self.d]
    }
}

fn strip_with_deltas(field: &CubicField, deltas: &[f64], face: Face, edge: Edge) -> EdgeWeightStrip {
    let (w, d) = (field.w(), field.d());
    let mpi = field.mpi(face);
    let mut data = vec![0.0; w * d];
    let mut dl = vec![0.0; d];
    for pos in 0..w {
        let (x, y) = edge.inner_pixel(pos, 0, w);
        for b in 0..d {
            dl[b] = deltas[(b * w + y) * w + x];
        }
        ray_weights((0..d).map(|b| mpi.texel(b, x, y)[3]), &dl, &mut data[pos * d..(pos + 1) * d]);
    }
    EdgeWeightStrip { w, d, data }
}

/// Compositing weights of the border pixels of `face` along `edge`.
pub fn edge_strip(field: &CubicField, face: Face, edge: Edge) -> EdgeWeightStrip {
    let deltas = plane_distances(&field.planes, &field.intr);
    strip_with_deltas(field, &deltas, face, edge)
}

/// Cosine distance plus mean absolute error between two aligned strips,
/// with the gradients with respect to each side.
fn strip_distance_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = a.len() as f64;
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let cos_dist = if na == 0.0 && nb == 0.0 {
        0.0
    } else if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let cs = dot / (na * nb);
        for i in 0..a.len() {
            ga[i] -= b[i] / (na * nb) - cs * a[i] / (na * na);
            gb[i] -= a[i] / (na * nb) - cs * b[i] / (nb * nb);
        }
        1.0 - cs
    };
    let mut mae = 0.0;
    for i in 0..a.len() {
        let diff = a[i] - b[i];
        mae += diff.abs();
        if diff != 0.0 {
            ga[i] += diff.signum() / n;
            gb[i] -= diff.signum() / n;
        }
    }
    (cos_dist + mae / n, ga, gb)
}

/// Cosine distance plus mean absolute error between two flattened strips.
pub fn strip_distance(a: &EdgeWeightStrip, b: &EdgeWeightStrip) -> f64 {
    strip_distance_grad(&a.data, &b.data).0
}

/// The strip of the far side of an edge, re-ordered to follow the near side.
fn aligned(strip: EdgeWeightStrip, flip: bool) -> EdgeWeightStrip {
    if !flip {
        return strip;
    }
    let (w, d) = (strip.w, strip.d);
    let mut data = Vec::with_capacity(w * d);
    for pos in (0..w).rev() {
        data.extend_from_slice(strip.row(pos));
    }
    EdgeWeightStrip { w, d, data }
}

/// Mean over the 12 cube edges of the strip distance between the two faces
/// sharing the edge.
pub fn edge_align_loss(field: &CubicField) -> f64 {
    edge_align_loss_grad(field, 0.0, None)
}

/// [`edge_align_loss`], also adding `scale · ∂L/∂σ` into the density channel
/// of `grad` (per-face MPI layout) when given.
pub fn edge_align_loss_grad(field: &CubicField, scale: f64, mut grad: Option<&mut [Vec<f64>; 6]>) -> f64 {
    let (w, d) = (field.w(), field.d());
    let deltas = plane_distances(&field.planes, &field.intr);
    let edges = cube_edges();
    let mut total = 0.0;
    let mut sig = vec![0.0; d];
    let mut dl = vec![0.0; d];
    let mut gs = vec![0.0; d];
    for ((fa, ea), link) in &edges {
        let sa = strip_with_deltas(field, &deltas, *fa, *ea);
        let sb = aligned(strip_with_deltas(field, &deltas, link.face, link.edge), link.flip);
        let (v, ga, gb) = strip_distance_grad(&sa.data, &sb.data);
        total += v;
        let Some(grad) = grad.as_deref_mut() else {
            continue;
        };
        for (face, edge, g, flip) in [(*fa, *ea, &ga, false), (link.face, link.edge, &gb, link.flip)] {
            let mpi = field.mpi(face);
            for pos in 0..w {
                let (x, y) = edge.inner_pixel(pos, 0, w);
                let row = if flip { w - 1 - pos } else { pos };
                for b in 0..d {
                    sig[b] = mpi.texel(b, x, y)[3];
                    dl[b] = deltas[(b * w + y) * w + x];
                }
                ray_weights_backward(&sig, &dl, &g[row * d..(row + 1) * d], &mut gs);
                let dst = &mut grad[face.index()];
                for b in 0..d {
                    dst[((b * w + y) * w + x) * 4 + 3] += scale * gs[b] / edges.len() as f64;
                }
            }
        }
    }
    total / edges.len() as f64
}
