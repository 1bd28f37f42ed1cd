//! Sphere, equirectangular (ERP) and cubemap coordinate transforms.
//!
//! Conventions: world axes are x right, y down, z forward. A panorama pixel
//! with integer index `i` covers the continuous interval `[i, i+1)`, so its
//! center sits at `i + 0.5`; cube faces use the same convention and span
//! `[0, w]²`. Each face camera looks along its own +z after applying the
//! face rotation `r_i` to a world direction.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Cubemap, Image};

use std::f64::consts::PI;

/// Pixel grid of an equirectangular panorama.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErpGrid {
    pub width: usize,
    pub height: usize,
    pub cx: f64,
    pub cy: f64,
}

impl ErpGrid {
    /// Grid with the principal point at the image center. Requires `width = 2·height`.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if height == 0 || width != 2 * height {
            return Err(Error::InvalidArgument(format!(
                "ERP grid must be 2:1 and non-empty, got {width}x{height}"
            )));
        }
        Ok(ErpGrid {
            width,
            height,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// A direction on the unit sphere with its longitude/latitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereDir {
    pub theta: f64,
    pub phi: f64,
    pub q: Vector3<f64>,
}

impl SphereDir {
    pub fn from_angles(theta: f64, phi: f64) -> Self {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        SphereDir {
            theta,
            phi,
            q: Vector3::new(cp * st, sp, cp * ct),
        }
    }

    /// Normalizes `v` and recovers its angles.
    pub fn from_vector(v: &Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroDirection);
        }
        let q = v / n;
        Ok(SphereDir {
            theta: q.x.atan2(q.z),
            phi: q.y.clamp(-1.0, 1.0).asin(),
            q,
        })
    }
}

/// Maps a continuous panorama pixel to the sphere; longitude wraps and
/// latitude clamps for out-of-range input.
pub fn erp_pixel_to_sphere(m: f64, n: f64, grid: &ErpGrid) -> SphereDir {
    let theta = 2.0 * PI * (m - grid.cx) / grid.width as f64;
    let theta = (theta + PI).rem_euclid(2.0 * PI) - PI;
    let phi = (PI * (n - grid.cy) / grid.height as f64).clamp(-PI / 2.0, PI / 2.0);
    SphereDir::from_angles(theta, phi)
}

/// Inverse of [`erp_pixel_to_sphere`].
pub fn sphere_to_erp_pixel(q: &Vector3<f64>, grid: &ErpGrid) -> Result<(f64, f64)> {
    let dir = SphereDir::from_vector(q)?;
    Ok(angles_to_erp_pixel(dir.theta, dir.phi, grid))
}

#[inline]
pub fn angles_to_erp_pixel(theta: f64, phi: f64, grid: &ErpGrid) -> (f64, f64) {
    (
        grid.width as f64 * theta / (2.0 * PI) + grid.cx,
        grid.height as f64 * phi / PI + grid.cy,
    )
}

/// The six cube faces, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Face {
    B,
    D,
    F,
    L,
    R,
    U,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::B, Face::D, Face::F, Face::L, Face::R, Face::U];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Face {
        Face::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            Face::B => "B",
            Face::D => "D",
            Face::F => "F",
            Face::L => "L",
            Face::R => "R",
            Face::U => "U",
        }
    }

    pub fn from_name(s: &str) -> Option<Face> {
        Face::ALL.into_iter().find(|f| f.name() == s)
    }

    /// World-to-face rotation `r_i`. F looks along +z, B along −z, L along
    /// −x, R along +x, U along −y and D along +y; the four equatorial faces
    /// share the world "down" axis.
    pub fn rotation(self) -> Matrix3<f64> {
        match self {
            Face::F => Matrix3::identity(),
            Face::B => Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0),
            Face::R => Matrix3::new(0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0),
            Face::L => Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0),
            Face::U => Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0),
            Face::D => Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0),
        }
    }

    /// World direction of the face's optical axis.
    pub fn axis(self) -> Vector3<f64> {
        self.rotation().transpose() * Vector3::z()
    }
}

/// Face whose optical axis has the largest component of `q`. Exact ties go
/// to the earliest face in B, D, F, L, R, U order.
#[inline]
pub fn dominant_face(q: &Vector3<f64>) -> Face {
    let cands = [
        (Face::B, -q.z),
        (Face::D, q.y),
        (Face::F, q.z),
        (Face::L, -q.x),
        (Face::R, q.x),
        (Face::U, -q.y),
    ];
    let mut best = cands[0];
    for c in &cands[1..] {
        if c.1 > best.1 {
            best = *c;
        }
    }
    best.0
}

/// Pinhole intrinsics shared by all faces plus the six face rotations.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeIntrinsics {
    pub w: usize,
    pub k: Matrix3<f64>,
    pub k_inv: Matrix3<f64>,
    pub rots: [Matrix3<f64>; 6],
}

impl CubeIntrinsics {
    pub fn new(w: usize) -> Self {
        let h = w as f64 / 2.0;
        let k = Matrix3::new(h, 0.0, h, 0.0, h, h, 0.0, 0.0, 1.0);
        let k_inv = Matrix3::new(1.0 / h, 0.0, -1.0, 0.0, 1.0 / h, -1.0, 0.0, 0.0, 1.0);
        CubeIntrinsics {
            w,
            k,
            k_inv,
            rots: Face::ALL.map(Face::rotation),
        }
    }

    #[inline]
    pub fn rotation(&self, face: Face) -> &Matrix3<f64> {
        &self.rots[face.index()]
    }

    /// Unnormalized world direction `r_iᵀ K⁻¹ [u, v, 1]ᵀ`.
    #[inline]
    pub fn face_ray(&self, face: Face, u: f64, v: f64) -> Vector3<f64> {
        let h = self.w as f64 / 2.0;
        let cam = Vector3::new(u / h - 1.0, v / h - 1.0, 1.0);
        self.rots[face.index()].transpose() * cam
    }

    /// Camera-space ray `K⁻¹ [u, v, 1]ᵀ` (z component 1).
    #[inline]
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        let h = self.w as f64 / 2.0;
        Vector3::new(u / h - 1.0, v / h - 1.0, 1.0)
    }
}

/// Projects a direction onto a face: `p = K r_i q`, `None` when `p_z ≤ 0`.
#[inline]
pub fn sphere_to_face_pixel(q: &Vector3<f64>, face: Face, intr: &CubeIntrinsics) -> Option<(f64, f64)> {
    let p = intr.k * (intr.rots[face.index()] * q);
    if p.z <= 0.0 {
        None
    } else {
        Some((p.x / p.z, p.y / p.z))
    }
}

/// One side of a square face. Positions along an edge run with the image
/// `u` axis for Top/Bottom and with `v` for Left/Right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Edge {
    Top,
    Bottom,
    Left,
    Right,
}

impl Edge {
    pub const ALL: [Edge; 4] = [Edge::Top, Edge::Bottom, Edge::Left, Edge::Right];

    /// Pixel at `depth` pixels inside this edge, `pos` along it.
    #[inline]
    pub fn inner_pixel(self, pos: usize, depth: usize, w: usize) -> (usize, usize) {
        match self {
            Edge::Top => (pos, depth),
            Edge::Bottom => (pos, w - 1 - depth),
            Edge::Left => (depth, pos),
            Edge::Right => (w - 1 - depth, pos),
        }
    }
}

/// The face and edge across an edge, and whether the position order reverses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeLink {
    pub face: Face,
    pub edge: Edge,
    pub flip: bool,
}

/// Hand-derived 24-entry cube adjacency for the face rotations above.
pub fn neighbor(face: Face, edge: Edge) -> EdgeLink {
    use Edge::*;
    use Face::*;
    let (f, e, flip) = match (face, edge) {
        (F, Top) => (U, Bottom, false),
        (F, Bottom) => (D, Top, false),
        (F, Left) => (L, Right, false),
        (F, Right) => (R, Left, false),
        (B, Top) => (U, Top, true),
        (B, Bottom) => (D, Bottom, true),
        (B, Left) => (R, Right, false),
        (B, Right) => (L, Left, false),
        (R, Top) => (U, Right, true),
        (R, Bottom) => (D, Right, false),
        (R, Left) => (F, Right, false),
        (R, Right) => (B, Left, false),
        (L, Top) => (U, Left, false),
        (L, Bottom) => (D, Left, true),
        (L, Left) => (B, Right, false),
        (L, Right) => (F, Left, false),
        (U, Top) => (B, Top, true),
        (U, Bottom) => (F, Top, false),
        (U, Left) => (L, Top, false),
        (U, Right) => (R, Top, true),
        (D, Top) => (F, Bottom, false),
        (D, Bottom) => (B, Bottom, true),
        (D, Left) => (L, Bottom, true),
        (D, Right) => (R, Bottom, false),
    };
    EdgeLink { face: f, edge: e, flip }
}

/// The 12 cube edges, each listed once as its lower `(face, edge)` side.
pub fn cube_edges() -> Vec<((Face, Edge), EdgeLink)> {
    let mut out = Vec::with_capacity(12);
    for f in Face::ALL {
        for e in Edge::ALL {
            let n = neighbor(f, e);
            if (f.index(), e as usize) < (n.face.index(), n.edge as usize) {
                out.push(((f, e), n));
            }
        }
    }
    out
}

/// Source of one padded-face pixel: up to two `(face, x, y, weight)` entries.
pub type PadSource = ([(Face, usize, usize, f64); 2], usize);

/// Resolves a pixel of a conceptually padded face (coordinates may lie in
/// `[-w, 2w)`) to real face pixels. Band pixels copy the neighbor across the
/// edge; corner pixels average the two bands that meet there.
pub fn resolve_padded(face: Face, x: isize, y: isize, w: usize) -> PadSource {
    let wi = w as isize;
    let xin = (0..wi).contains(&x);
    let yin = (0..wi).contains(&y);
    let z = (Face::F, 0, 0, 0.0);
    if xin && yin {
        return ([(face, x as usize, y as usize, 1.0), z], 1);
    }
    if xin || yin {
        let (edge, depth, pos) = if y < 0 {
            (Edge::Top, -y - 1, x)
        } else if y >= wi {
            (Edge::Bottom, y - wi, x)
        } else if x < 0 {
            (Edge::Left, -x - 1, y)
        } else {
            (Edge::Right, x - wi, y)
        };
        let link = neighbor(face, edge);
        let pos = pos as usize;
        let pos = if link.flip { w - 1 - pos } else { pos };
        let (nx, ny) = link.edge.inner_pixel(pos, depth as usize, w);
        return ([(link.face, nx, ny, 1.0), z], 1);
    }
    let xc = x.clamp(0, wi - 1);
    let yc = y.clamp(0, wi - 1);
    let (a, _) = resolve_padded(face, xc, y, w);
    let (b, _) = resolve_padded(face, x, yc, w);
    (
        [
            (a[0].0, a[0].1, a[0].2, 0.5),
            (b[0].0, b[0].1, b[0].2, 0.5),
        ],
        2,
    )
}

/// A weighted reference to one face pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Tap {
    pub face: u8,
    pub pixel: u32,
    pub weight: f64,
}

/// Up to eight taps of a bilinear lookup that may straddle face edges.
#[derive(Clone, Copy, Debug, Default)]
pub struct Taps {
    len: usize,
    taps: [Tap; 8],
}

impl Taps {
    #[inline]
    pub fn as_slice(&self) -> &[Tap] {
        &self.taps[..self.len]
    }

    #[inline]
    fn push(&mut self, t: Tap) {
        self.taps[self.len] = t;
        self.len += 1;
    }
}

/// Bilinear taps at continuous face coordinates `(u, v)`, clamped to
/// `[0, w]²`. Taps that fall half a pixel past an edge resolve onto the
/// neighboring face.
#[inline]
pub fn face_bilinear_taps(face: Face, u: f64, v: f64, w: usize) -> Taps {
    let wf = w as f64;
    let x = u.clamp(0.0, wf) - 0.5;
    let y = v.clamp(0.0, wf) - 0.5;
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let x0 = x0f as isize;
    let y0 = y0f as isize;
    let mut taps = Taps::default();
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    let wi = w as isize;
    for (cx, cy, wt) in corners {
        if wt == 0.0 {
            continue;
        }
        if (0..wi).contains(&cx) && (0..wi).contains(&cy) {
            taps.push(Tap {
                face: face.index() as u8,
                pixel: (cy as usize * w + cx as usize) as u32,
                weight: wt,
            });
        } else {
            let (src, n) = resolve_padded(face, cx, cy, w);
            for &(f, px, py, sw) in &src[..n] {
                taps.push(Tap {
                    face: f.index() as u8,
                    pixel: (py * w + px) as u32,
                    weight: wt * sw,
                });
            }
        }
    }
    taps
}

/// Samples a cubemap in direction `q` (any non-zero vector).
pub fn sample_cubemap(faces: &Cubemap, q: &Vector3<f64>, intr: &CubeIntrinsics, out: &mut [f64]) {
    let face = dominant_face(q);
    let (u, v) = sphere_to_face_pixel(q, face, intr).unwrap_or((0.0, 0.0));
    let taps = face_bilinear_taps(face, u, v, intr.w);
    let ch = faces.channels();
    out[..ch].iter_mut().for_each(|o| *o = 0.0);
    for t in taps.as_slice() {
        let img = &faces.faces[t.face as usize];
        let base = t.pixel as usize * ch;
        for c in 0..ch {
            out[c] += t.weight * img.data[base + c];
        }
    }
}

/// Resamples an equirectangular panorama into six `w×w` faces.
pub fn erp_to_cubemap(pano: &Image, intr: &CubeIntrinsics) -> Result<Cubemap> {
    let grid = ErpGrid::new(pano.width, pano.height)?;
    let w = intr.w;
    let ch = pano.channels;
    let faces: Vec<Image> = Face::ALL
        .par_iter()
        .map(|&face| {
            let mut img = Image::new(w, w, ch);
            for y in 0..w {
                for x in 0..w {
                    let ray = intr.face_ray(face, x as f64 + 0.5, y as f64 + 0.5);
                    let dir = SphereDir::from_vector(&ray).expect("face rays are non-zero");
                    let (m, n) = angles_to_erp_pixel(dir.theta, dir.phi, &grid);
                    let i = (y * w + x) * ch;
                    pano.sample_erp(m, n, &mut img.data[i..i + ch]);
                }
            }
            img
        })
        .collect();
    Ok(Cubemap {
        faces: faces.try_into().expect("six faces"),
    })
}

/// Resamples six faces into an equirectangular panorama.
pub fn cubemap_to_erp(faces: &Cubemap, grid: &ErpGrid) -> Image {
    let intr = CubeIntrinsics::new(faces.size());
    let ch = faces.channels();
    let mut out = Image::new(grid.width, grid.height, ch);
    out.data
        .par_chunks_mut(grid.width * ch)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..grid.width {
                let dir = erp_pixel_to_sphere(x as f64 + 0.5, y as f64 + 0.5, grid);
                sample_cubemap(faces, &dir.q, &intr, &mut row[x * ch..(x + 1) * ch]);
            }
        });
    out
}

/// Pads every face by `pad` pixels taken from its neighbors.
pub fn cube_pad(faces: &Cubemap, pad: usize) -> Result<Cubemap> {
    let w = faces.size();
    if pad >= w.max(1) {
        return Err(Error::InvalidArgument(format!(
            "pad {pad} must be smaller than the face size {w}"
        )));
    }
    let ch = faces.channels();
    let pw = w + 2 * pad;
    let out: Vec<Image> = Face::ALL
        .iter()
        .map(|&face| {
            let mut img = Image::new(pw, pw, ch);
            for py in 0..pw {
                for px in 0..pw {
                    let (src, n) =
                        resolve_padded(face, px as isize - pad as isize, py as isize - pad as isize, w);
                    for c in 0..ch {
                        let v = src[..n]
                            .iter()
                            .map(|&(f, x, y, wt)| wt * faces.faces[f.index()].get(x, y, c))
                            .sum();
                        img.set(px, py, c, v);
                    }
                }
            }
            img
        })
        .collect();
    Ok(Cubemap {
        faces: out.try_into().expect("six faces"),
    })
}

/// Pinhole view looking down `+z` (x right, y down) resampled from an
/// equirectangular image; `fov_deg` is the horizontal field of view.
pub fn erp_to_perspective(pano: &Image, fov_deg: f64, width: usize, height: usize) -> Result<Image> {
    if !(fov_deg > 0.0 && fov_deg < 180.0) || width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "perspective view needs 0 < fov < 180 and a non-empty size, got {fov_deg}° {width}x{height}"
        )));
    }
    let grid = ErpGrid::new(pano.width, pano.height)?;
    let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
    let ch = pano.channels;
    let mut out = Image::new(width, height, ch);
    out.data.par_chunks_mut(width * ch).enumerate().for_each(|(y, row)| {
        for x in 0..width {
            let q = Vector3::new(
                (x as f64 + 0.5 - 0.5 * width as f64) / f,
                (y as f64 + 0.5 - 0.5 * height as f64) / f,
                1.0,
            );
            let (m, n) = sphere_to_erp_pixel(&q, &grid).expect("non-zero direction");
            pano.sample_erp(m, n, &mut row[x * ch..(x + 1) * ch]);
        }
    });
    Ok(out)
}
