//! The cubic-field data model: depth planes, per-face MPIs and the
//! positional encodings consumed by the blending stages.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{CubeIntrinsics, Face, SphereDir};

/// Width of a token embedding (four components for each of 256 frequencies).
pub const TOKEN_WIDTH: usize = 1024;

/// Length of [`point_feature`]: c(3), σ, θ, φ, 1/z, γ(θ, φ, 1/z)(6), and the
/// texel center in face coordinates normalized to `[0, 1]`(2).
pub const POINT_FEATURE_LEN: usize = 15;

/// Depth planes spaced uniformly in inverse depth, ascending in depth.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthPlaneSet {
    pub z: Vec<f64>,
    pub near: f64,
    pub far: f64,
}

impl DepthPlaneSet {
    pub fn new(near: f64, far: f64, d: usize) -> Result<Self> {
        if !(near > 0.0 && far > near && far.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "depth range must satisfy 0 < near < far, got near={near} far={far}"
            )));
        }
        if d < 2 {
            return Err(Error::InvalidArgument(format!("need at least two planes, got {d}")));
        }
        let (dn, df) = (1.0 / near, 1.0 / far);
        let mut z: Vec<f64> = (0..d)
            .map(|i| {
                let t = i as f64 / (d - 1) as f64;
                1.0 / (dn + (df - dn) * t)
            })
            .collect();
        z[0] = near;
        z[d - 1] = far;
        Ok(DepthPlaneSet { z, near, far })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// A stack of `d` RGBA planes over a `w×w` face, stored `[d][w][w][4]` with
/// channels `(r, g, b, σ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mpi {
    pub d: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Mpi {
    pub fn zeros(d: usize, w: usize) -> Self {
        Mpi {
            d,
            w,
            data: vec![0.0; d * w * w * 4],
        }
    }

    pub fn from_fn(d: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(d * w * w * 4);
        for b in 0..d {
            for y in 0..w {
                for x in 0..w {
                    for c in 0..4 {
                        data.push(f(b, x, y, c));
                    }
                }
            }
        }
        Mpi { d, w, data }
    }

    #[inline]
    pub fn index(&self, b: usize, x: usize, y: usize) -> usize {
        ((b * self.w + y) * self.w + x) * 4
    }

    #[inline]
    pub fn texel(&self, b: usize, x: usize, y: usize) -> &[f64] {
        let i = self.index(b, x, y);
        &self.data[i..i + 4]
    }

    #[inline]
    pub fn plane(&self, b: usize) -> &[f64] {
        let n = self.w * self.w * 4;
        &self.data[b * n..(b + 1) * n]
    }

    /// Colors in `[0, 1]`, densities non-negative, everything finite.
    pub fn is_valid(&self) -> bool {
        self.data.chunks_exact(4).all(|t| {
            t.iter().all(|v| v.is_finite()) && t[..3].iter().all(|c| (0.0..=1.0).contains(c)) && t[3] >= 0.0
        })
    }
}

/// Six face MPIs sharing one depth-plane set and intrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicField {
    pub mpis: [Mpi; 6],
    pub planes: DepthPlaneSet,
    pub intr: CubeIntrinsics,
}

impl CubicField {
    pub fn new(mpis: [Mpi; 6], planes: DepthPlaneSet) -> Result<Self> {
        let w = mpis[0].w;
        let d = planes.len();
        for (i, m) in mpis.iter().enumerate() {
            if m.w != w || m.d != d || m.data.len() != d * w * w * 4 {
                return Err(Error::Shape(format!(
                    "face {} has d={} w={} (len {}), expected d={d} w={w}",
                    Face::from_index(i).name(),
                    m.d,
                    m.w,
                    m.data.len()
                )));
            }
        }
        Ok(CubicField {
            mpis,
            planes,
            intr: CubeIntrinsics::new(w),
        })
    }

    pub fn uniform(w: usize, planes: DepthPlaneSet, rgb: [f64; 3], sigma: f64) -> Self {
        let d = planes.len();
        let mpi = Mpi::from_fn(d, w, |_, _, _, c| if c < 3 { rgb[c] } else { sigma });
        CubicField::new(std::array::from_fn(|_| mpi.clone()), planes).expect("consistent shapes")
    }

    pub fn w(&self) -> usize {
        self.intr.w
    }

    pub fn d(&self) -> usize {
        self.planes.len()
    }

    pub fn mpi(&self, f: Face) -> &Mpi {
        &self.mpis[f.index()]
    }

    pub fn is_valid(&self) -> bool {
        self.mpis.iter().all(Mpi::is_valid)
    }
}

/// Sinusoidal embedding of a token center on the sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbedding(pub Vec<f64>);

/// For `i = 0..256`, the block `[cos(θπ/s_i), sin(θπ/s_i), cos(φ(π/2)/s_i),
/// sin(φ(π/2)/s_i)]` with `s_i = 10000^(i/256)`, concatenated.
pub fn spherical_token_embedding(theta: f64, phi: f64) -> TokenEmbedding {
    let mut v = Vec::with_capacity(TOKEN_WIDTH);
    for i in 0..TOKEN_WIDTH / 4 {
        let s = 10000f64.powf(i as f64 / 256.0);
        let (st, ct) = (theta * PI / s).sin_cos();
        let (sp, cp) = (phi * (PI / 2.0) / s).sin_cos();
        v.extend_from_slice(&[ct, st, cp, sp]);
    }
    TokenEmbedding(v)
}

/// Single-frequency encoding `[cos 2πu, sin 2πu]` of a 3-vector.
pub fn nerf_gamma(u: [f64; 3]) -> [f64; 6] {
    let tau = 2.0 * PI;
    let (s0, c0) = (tau * u[0]).sin_cos();
    let (s1, c1) = (tau * u[1]).sin_cos();
    let (s2, c2) = (tau * u[2]).sin_cos();
    [c0, c1, c2, s0, s1, s2]
}

/// `[c, σ, θ, φ, 1/z, γ([θ, φ, 1/z]), u/w, v/w]` for one MPI texel.
pub fn point_feature(
    field: &CubicField,
    face: Face,
    x: usize,
    y: usize,
    b: usize,
) -> Result<[f64; POINT_FEATURE_LEN]> {
    let (w, d) = (field.w(), field.d());
    if x >= w || y >= w || b >= d {
        return Err(Error::InvalidArgument(format!(
            "texel ({x}, {y}) plane {b} outside {w}x{w}x{d}"
        )));
    }
    let t = field.mpi(face).texel(b, x, y);
    let mut out = [0.0; POINT_FEATURE_LEN];
    out[..4].copy_from_slice(t);
    out[4..].copy_from_slice(&position_feature(&field.intr, face, x, y, field.planes.z[b]));
    Ok(out)
}

/// The geometric tail of [`point_feature`].
pub fn position_feature(intr: &CubeIntrinsics, face: Face, x: usize, y: usize, z: f64) -> [f64; 11] {
    let ray = intr.face_ray(face, x as f64 + 0.5, y as f64 + 0.5);
    let dir = SphereDir::from_vector(&ray).expect("face rays are non-zero");
    let u = [dir.theta, dir.phi, 1.0 / z];
    let g = nerf_gamma(u);
    let w = intr.w as f64;
    [
        u[0],
        u[1],
        u[2],
        g[0],
        g[1],
        g[2],
        g[3],
        g[4],
        g[5],
        (x as f64 + 0.5) / w,
        (y as f64 + 0.5) / w,
    ]
}
