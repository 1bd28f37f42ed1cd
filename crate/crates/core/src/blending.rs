//! Blending stages that fuse the six per-face MPIs: self-attention across
//! face tokens, cross-attention against tokens pooled from the reference
//! panorama, and padding blending across face borders.
//!
//! All stages carry reverse-mode passes so the optimizer can fit their
//! weights together with the field.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{position_feature, spherical_token_embedding, CubicField, Mpi, POINT_FEATURE_LEN, TOKEN_WIDTH};
use crate::geometry::{erp_pixel_to_sphere, resolve_padded, ErpGrid, Face, SphereDir};
use crate::image::Image;

/// Patch side used to cut faces into tokens.
pub const PATCH: usize = 16;
/// Hidden width of the feed-forward block.
pub const FFN_WIDTH: usize = 2048;
/// Number of filter + pool stages in the panorama tokenizer.
pub const ERP_STAGES: usize = 5;

/// Where a token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenPlace {
    Face { face: Face, row: usize, col: usize },
    Erp { row: usize, col: usize },
}

/// `d` levels of `N × M` tokens plus the layout shared by every level.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub levels: Vec<Array2<f64>>,
    pub places: Vec<TokenPlace>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.places.len()
    }

    pub fn is_empty(&self) -> bool {
        self.places.is_empty()
    }

    pub fn width(&self) -> usize {
        self.levels.first().map_or(0, |l| l.ncols())
    }
}

fn face_places(w: usize) -> Vec<TokenPlace> {
    let p = w / PATCH;
    let mut out = Vec::with_capacity(6 * p * p);
    for face in Face::ALL {
        for row in 0..p {
            for col in 0..p {
                out.push(TokenPlace::Face { face, row, col });
            }
        }
    }
    out
}

/// Cuts every plane of the six MPIs into 16×16 patches, each flattened
/// row-major with channels last; faces are concatenated in B..U order.
pub fn tokenize_faces(mpis: &[Mpi; 6]) -> Result<TokenSequence> {
    let (d, w) = (mpis[0].d, mpis[0].w);
    if w % PATCH != 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("face size {w} is not a multiple of {PATCH}")));
    }
    if mpis.iter().any(|m| m.d != d || m.w != w) {
        return Err(Error::Shape("faces disagree in shape".into()));
    }
    let places = face_places(w);
    let levels = (0..d)
        .map(|b| {
            let mut a = Array2::zeros((places.len(), TOKEN_WIDTH));
            for (n, place) in places.iter().enumerate() {
                let TokenPlace::Face { face, row, col } = *place else { unreachable!() };
                let mpi = &mpis[face.index()];
                let mut k = 0;
                for py in 0..PATCH {
                    let start = mpi.index(b, col * PATCH, row * PATCH + py);
                    for v in &mpi.data[start..start + PATCH * 4] {
                        a[[n, k]] = *v;
                        k += 1;
                    }
                }
            }
            a
        })
        .collect();
    Ok(TokenSequence { levels, places })
}

/// Exact inverse of [`tokenize_faces`].
pub fn detokenize_faces(seq: &TokenSequence) -> Result<[Mpi; 6]> {
    let n = seq.len();
    let per_face = n / 6;
    let p = (per_face as f64).sqrt().round() as usize;
    if n == 0 || p * p * 6 != n || seq.width() != TOKEN_WIDTH || seq.places != face_places(p * PATCH) {
        return Err(Error::Shape("token layout is not a six-face patch grid".into()));
    }
    let (w, d) = (p * PATCH, seq.levels.len());
    let mut mpis: [Mpi; 6] = std::array::from_fn(|_| Mpi::zeros(d, w));
    for (b, level) in seq.levels.iter().enumerate() {
        if level.nrows() != n {
            return Err(Error::Shape(format!("level {b} has {} tokens, expected {n}", level.nrows())));
        }
        for (tok, place) in seq.places.iter().enumerate() {
            let TokenPlace::Face { face, row, col } = *place else { unreachable!() };
            let mpi = &mut mpis[face.index()];
            let mut k = 0;
            for py in 0..PATCH {
                let start = mpi.index(b, col * PATCH, row * PATCH + py);
                for v in &mut mpi.data[start..start + PATCH * 4] {
                    *v = level[[tok, k]];
                    k += 1;
                }
            }
        }
    }
    Ok(mpis)
}

/// Positional embeddings of face tokens from their patch-center directions.
pub fn face_token_positions(w: usize) -> Array2<f64> {
    let intr = crate::geometry::CubeIntrinsics::new(w);
    let places = face_places(w);
    let mut out = Array2::zeros((places.len(), TOKEN_WIDTH));
    for (n, place) in places.iter().enumerate() {
        let TokenPlace::Face { face, row, col } = *place else { unreachable!() };
        let ray = intr.face_ray(face, ((col * PATCH) + PATCH / 2) as f64, ((row * PATCH) + PATCH / 2) as f64);
        let dir = SphereDir::from_vector(&ray).expect("face rays are non-zero");
        out.row_mut(n).assign(&Array1::from(spherical_token_embedding(dir.theta, dir.phi).0));
    }
    out
}

/// Positional embeddings of panorama tokens from their cell-center angles.
pub fn erp_token_positions(rows: usize, cols: usize) -> Array2<f64> {
    let grid = ErpGrid {
        width: cols,
        height: rows,
        cx: cols as f64 / 2.0,
        cy: rows as f64 / 2.0,
    };
    let mut out = Array2::zeros((rows * cols, TOKEN_WIDTH));
    for r in 0..rows {
        for c in 0..cols {
            let dir = erp_pixel_to_sphere(c as f64 + 0.5, r as f64 + 0.5, &grid);
            out.row_mut(r * cols + c).assign(&Array1::from(spherical_token_embedding(dir.theta, dir.phi).0));
        }
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Projection and feed-forward parameters of one attention stage.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl AttentionWeights {
    pub fn zeros(m: usize, m_ff: usize) -> Self {
        AttentionWeights {
            wq: Array2::zeros((m, m)),
            wk: Array2::zeros((m, m)),
            wv: Array2::zeros((m, m)),
            w1: Array2::zeros((m, m_ff)),
            b1: Array1::zeros(m_ff),
            w2: Array2::zeros((m_ff, m)),
            b2: Array1::zeros(m),
        }
    }

    /// Uniform in `±1/√fan_in` per matrix; biases start at zero.
    pub fn seeded(m: usize, m_ff: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bm = 1.0 / (m as f64).sqrt();
        let bf = 1.0 / (m_ff as f64).sqrt();
        AttentionWeights {
            wq: uniform(&mut rng, (m, m), bm),
            wk: uniform(&mut rng, (m, m), bm),
            wv: uniform(&mut rng, (m, m), bm),
            w1: uniform(&mut rng, (m, m_ff), bm),
            b1: Array1::zeros(m_ff),
            w2: uniform(&mut rng, (m_ff, m), bf),
            b2: Array1::zeros(m),
        }
    }

    pub fn width(&self) -> usize {
        self.wq.nrows()
    }

    fn zeros_like(&self) -> Self {
        AttentionWeights::zeros(self.wq.nrows(), self.w1.ncols())
    }

    /// Named flat views of every tensor, in a fixed order.
    pub fn tensors(&self) -> [(&'static str, &[f64]); 7] {
        [
            ("wq", self.wq.as_slice().expect("standard layout")),
            ("wk", self.wk.as_slice().expect("standard layout")),
            ("wv", self.wv.as_slice().expect("standard layout")),
            ("w1", self.w1.as_slice().expect("standard layout")),
            ("b1", self.b1.as_slice().expect("standard layout")),
            ("w2", self.w2.as_slice().expect("standard layout")),
            ("b2", self.b2.as_slice().expect("standard layout")),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 7] {
        [
            ("wq", self.wq.as_slice_mut().expect("standard layout")),
            ("wk", self.wk.as_slice_mut().expect("standard layout")),
            ("wv", self.wv.as_slice_mut().expect("standard layout")),
            ("w1", self.w1.as_slice_mut().expect("standard layout")),
            ("b1", self.b1.as_slice_mut().expect("standard layout")),
            ("w2", self.w2.as_slice_mut().expect("standard layout")),
            ("b2", self.b2.as_slice_mut().expect("standard layout")),
        ]
    }
}

/// Row-wise softmax of `qkᵀ/√M`.
pub fn attention_probs(q: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut s = q.dot(&k.t()) * scale;
    for mut row in s.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    s
}

struct AttendTrace {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
    o: Array2<f64>,
    pre: Array2<f64>,
    h: Array2<f64>,
}

/// `FFN(softmax(q kᵀ/√M)·v)` with `q = qin·W_q`, `k = kin·W_k`, `v = vin·W_v`.
fn attend(qin: &Array2<f64>, kin: &Array2<f64>, vin: &Array2<f64>, wts: &AttentionWeights) -> (Array2<f64>, AttendTrace) {
    let q = qin.dot(&wts.wq);
    let k = kin.dot(&wts.wk);
    let v = vin.dot(&wts.wv);
    let a = attention_probs(&q, &k);
    let o = a.dot(&v);
    let pre = o.dot(&wts.w1) + &wts.b1;
    let h = pre.mapv(|x| x.max(0.0));
    let f = h.dot(&wts.w2) + &wts.b2;
    (f, AttendTrace { q, k, v, a, o, pre, h })
}

/// Reverse pass of [`attend`]; accumulates weight gradients into `g` and
/// returns the gradients for `(qin, kin, vin)`.
fn attend_backward(
    qin: &Array2<f64>,
    kin: &Array2<f64>,
    vin: &Array2<f64>,
    wts: &AttentionWeights,
    tr: &AttendTrace,
    df: &Array2<f64>,
    g: &mut AttentionWeights,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    g.w2 += &tr.h.t().dot(df);
    g.b2 += &df.sum_axis(Axis(0));
    let mut dpre = df.dot(&wts.w2.t());
    ndarray::Zip::from(&mut dpre).and(&tr.pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    g.w1 += &tr.o.t().dot(&dpre);
    g.b1 += &dpre.sum_axis(Axis(0));
    let d_o = dpre.dot(&wts.w1.t());
    let da = d_o.dot(&tr.v.t());
    let dv = tr.a.t().dot(&d_o);
    let mut ds = &da * &tr.a;
    let row_dot = ds.sum_axis(Axis(1));
    for (mut row, (arow, rd)) in ds.rows_mut().into_iter().zip(tr.a.rows().into_iter().zip(row_dot.iter())) {
        row.zip_mut_with(&arow, |s, &a| *s -= a * rd);
    }
    ds *= 1.0 / (tr.q.ncols() as f64).sqrt();
    let dq = ds.dot(&tr.k);
    let dk = ds.t().dot(&tr.q);
    g.wq += &qin.t().dot(&dq);
    g.wk += &kin.t().dot(&dk);
    g.wv += &vin.t().dot(&dv);
    (dq.dot(&wts.wq.t()), dk.dot(&wts.wk.t()), dv.dot(&wts.wv.t()))
}

fn check_width(seq: &TokenSequence, pos: &Array2<f64>, wts: &AttentionWeights) -> Result<()> {
    let m = wts.width();
    if pos.nrows() != seq.len() || pos.ncols() != m || seq.levels.iter().any(|l| l.dim() != (seq.len(), m)) {
        return Err(Error::Shape(format!(
            "{} tokens of width {} against {}x{} positions and width-{m} weights",
            seq.len(),
            seq.width(),
            pos.nrows(),
            pos.ncols()
        )));
    }
    Ok(())
}

/// `FFN(A v) + z` per level with `q = (z+pos)W_q`, `k = (z+pos)W_k`, `v = zW_v`.
pub fn self_attention(seq: &TokenSequence, pos: &Array2<f64>, wts: &AttentionWeights) -> Result<TokenSequence> {
    check_width(seq, pos, wts)?;
    let levels = seq
        .levels
        .iter()
        .map(|z| {
            let zp = z + pos;
            attend(&zp, &zp, z, wts).0 + z
        })
        .collect();
    Ok(TokenSequence {
        levels,
        places: seq.places.clone(),
    })
}

/// Reverse pass of [`self_attention`]; returns the gradient for the input
/// tokens and accumulates weight gradients into `g`.
pub fn self_attention_backward(
    seq: &TokenSequence,
    pos: &Array2<f64>,
    wts: &AttentionWeights,
    dout: &TokenSequence,
    g: &mut AttentionWeights,
) -> TokenSequence {
    let levels = seq
        .levels
        .iter()
        .zip(&dout.levels)
        .map(|(z, dy)| {
            let zp = z + pos;
            let (_, tr) = attend(&zp, &zp, z, wts);
            let (dq, dk, dv) = attend_backward(&zp, &zp, z, wts, &tr, dy, g);
            dy + &dq + &dk + &dv
        })
        .collect();
    TokenSequence {
        levels,
        places: seq.places.clone(),
    }
}

/// `FFN(A v) + ẑ` with queries from `ẑ` and keys/values from the single
/// panorama level, shared by every level of `ẑ`.
pub fn cross_attention(
    zq: &TokenSequence,
    z_erp: &TokenSequence,
    pos_c: &Array2<f64>,
    pos_e: &Array2<f64>,
    wts: &AttentionWeights,
) -> Result<TokenSequence> {
    check_width(zq, pos_c, wts)?;
    check_width(z_erp, pos_e, wts)?;
    if z_erp.levels.len() != 1 {
        return Err(Error::Shape(format!("panorama tokens have {} levels, expected 1", z_erp.levels.len())));
    }
    let e = &z_erp.levels[0];
    let ep = e + pos_e;
    let levels = zq
        .levels
        .iter()
        .map(|z| attend(&(z + pos_c), &ep, e, wts).0 + z)
        .collect();
    Ok(TokenSequence {
        levels,
        places: zq.places.clone(),
    })
}

/// Reverse pass of [`cross_attention`] with respect to the query tokens and
/// the weights; the panorama tokens are treated as constants.
pub fn cross_attention_backward(
    zq: &TokenSequence,
    z_erp: &TokenSequence,
    pos_c: &Array2<f64>,
    pos_e: &Array2<f64>,
    wts: &AttentionWeights,
    dout: &TokenSequence,
    g: &mut AttentionWeights,
) -> TokenSequence {
    let e = &z_erp.levels[0];
    let ep = e + pos_e;
    let levels = zq
        .levels
        .iter()
        .zip(&dout.levels)
        .map(|(z, dy)| {
            let zp = z + pos_c;
            let (_, tr) = attend(&zp, &ep, e, wts);
            let (dq, _, _) = attend_backward(&zp, &ep, e, wts, &tr, dy, g);
            dy + &dq
        })
        .collect();
    TokenSequence {
        levels,
        places: zq.places.clone(),
    }
}

/// Fixed filters and projection of the panorama tokenizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ErpPoolWeights {
    pub channels: usize,
    /// One `[out][in][3][3]` filter per stage.
    pub filters: Vec<Vec<f64>>,
    /// `channels × 1024` projection.
    pub proj: Array2<f64>,
}

impl ErpPoolWeights {
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = 1.0 / ((channels * 9) as f64).sqrt();
        let filters = (0..ERP_STAGES)
            .map(|_| (0..channels * channels * 9).map(|_| rng.random_range(-b..=b)).collect())
            .collect();
        let proj = uniform(&mut rng, (channels, TOKEN_WIDTH), 1.0 / (channels as f64).sqrt());
        ErpPoolWeights { channels, filters, proj }
    }

    pub fn zeros(channels: usize) -> Self {
        ErpPoolWeights {
            channels,
            filters: vec![vec![0.0; channels * channels * 9]; ERP_STAGES],
            proj: Array2::zeros((channels, TOKEN_WIDTH)),
        }
    }
}

/// 3×3 filter with longitude wrap and latitude replication.
fn erp_filter(img: &Image, filt: &[f64]) -> Image {
    let (w, h, c) = (img.width as isize, img.height as isize, img.channels);
    Image::from_fn(img.width, img.height, c, |x, y, o| {
        let mut acc = 0.0;
        for dy in -1..=1isize {
            let sy = (y as isize + dy).clamp(0, h - 1) as usize;
            for dx in -1..=1isize {
                let sx = (x as isize + dx).rem_euclid(w) as usize;
                let px = img.pixel(sx, sy);
                let tap = ((dy + 1) * 3 + dx + 1) as usize;
                for (i, v) in px.iter().enumerate() {
                    acc += filt[(o * c + i) * 9 + tap] * v;
                }
            }
        }
        acc
    })
}

fn avg_pool2(img: &Image) -> Image {
    Image::from_fn(img.width / 2, img.height / 2, img.channels, |x, y, c| {
        0.25 * (img.get(2 * x, 2 * y, c)
            + img.get(2 * x + 1, 2 * y, c)
            + img.get(2 * x, 2 * y + 1, c)
            + img.get(2 * x + 1, 2 * y + 1, c))
    })
}

/// Reduces the panorama 32× through five filter + pool stages, projects
/// each cell to 1024 channels and flattens the cells row-major.
pub fn tokenize_erp(pano: &Image, pool: &ErpPoolWeights) -> Result<TokenSequence> {
    let f = 1 << ERP_STAGES;
    if pano.width % f != 0 || pano.height % f != 0 || pano.width == 0 || pano.height == 0 {
        return Err(Error::InvalidArgument(format!(
            "panorama {}x{} is not divisible by {f}",
            pano.width, pano.height
        )));
    }
    if pano.channels != pool.channels {
        return Err(Error::Shape(format!(
            "panorama has {} channels, tokenizer expects {}",
            pano.channels, pool.channels
        )));
    }
    let mut img = pano.clone();
    for filt in &pool.filters {
        img = avg_pool2(&erp_filter(&img, filt));
    }
    let cells = Array2::from_shape_vec((img.width * img.height, img.channels), img.data)
        .expect("image buffer matches its shape");
    let places = (0..img.height)
        .flat_map(|row| (0..img.width).map(move |col| TokenPlace::Erp { row, col }))
        .collect();
    Ok(TokenSequence {
        levels: vec![cells.dot(&pool.proj)],
        places,
    })
}

/// Parameters of the padding-blend fusion filter: a 3×3 convolution from the
/// 15 point-feature channels to residuals on `(r, g, b, σ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FuseWeights {
    /// `[4][15][3][3]`.
    pub kernel: Vec<f64>,
    pub bias: [f64; 4],
}

impl FuseWeights {
    pub const KERNEL_LEN: usize = 4 * POINT_FEATURE_LEN * 9;

    pub fn zeros() -> Self {
        FuseWeights {
            kernel: vec![0.0; Self::KERNEL_LEN],
            bias: [0.0; 4],
        }
    }

    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = 1.0 / ((POINT_FEATURE_LEN * 9) as f64).sqrt();
        FuseWeights {
            kernel: (0..Self::KERNEL_LEN).map(|_| rng.random_range(-b..=b)).collect(),
            bias: [0.0; 4],
        }
    }

    #[inline]
    pub fn at(&self, out: usize, input: usize, tap: usize) -> f64 {
        self.kernel[(out * POINT_FEATURE_LEN + input) * 9 + tap]
    }
}

const C_EPS: f64 = 1e-9;
const SIGMA_EPS: f64 = 1e-12;

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

fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Applies residual `r` in unconstrained space and returns the new value
/// plus `∂out/∂in` and `∂out/∂r`. A zero residual only clamps, so valid
/// inputs pass through bit-exactly.
fn residual_map(channel: usize, v: f64, r: f64) -> (f64, f64, f64) {
    if r == 0.0 {
        let (lo, hi) = if channel < 3 { (0.0, 1.0) } else { (0.0, f64::INFINITY) };
        let out = v.clamp(lo, hi);
        return (out, if out == v { 1.0 } else { 0.0 }, 0.0);
    }
    if channel < 3 {
        let vc = v.clamp(C_EPS, 1.0 - C_EPS);
        let out = logistic((vc / (1.0 - vc)).ln() + r);
        let dr = out * (1.0 - out);
        let din = if v == vc { dr / (vc * (1.0 - vc)) } else { 0.0 };
        (out, din, dr)
    } else {
        let vs = v.max(SIGMA_EPS);
        let pre = softplus_inv(vs) + r;
        let out = softplus(pre);
        let dr = logistic(pre);
        let din = if v == vs { dr / -(-vs).exp_m1() } else { 0.0 };
        (out, din, dr)
    }
}

/// Point features of one plane of every face, `[face][y][x][15]`.
fn plane_features(field: &CubicField, b: usize, pos: &[Vec<[f64; 11]>]) -> Vec<Vec<f64>> {
    let w = field.w();
    (0..6)
        .map(|f| {
            let mut out = Vec::with_capacity(w * w * POINT_FEATURE_LEN);
            let plane = field.mpis[f].plane(b);
            for p in 0..w * w {
                out.extend_from_slice(&plane[p * 4..p * 4 + 4]);
                out.extend_from_slice(&pos[f][p]);
            }
            out
        })
        .collect()
}

fn position_table(field: &CubicField, b: usize) -> Vec<Vec<[f64; 11]>> {
    let w = field.w();
    Face::ALL
        .iter()
        .map(|&face| {
            (0..w * w)
                .map(|p| position_feature(&field.intr, face, p % w, p / w, field.planes.z[b]))
                .collect()
        })
        .collect()
}

/// The 3×3 neighbourhood of a face pixel on the padded cube, as weighted
/// references to `(face, pixel)`; corners of the pad average two sources.
fn neighbourhood(face: Face, x: usize, y: usize, w: usize) -> [([(usize, usize, f64); 2], usize); 9] {
    std::array::from_fn(|tap| {
        let (dx, dy) = ((tap % 3) as isize - 1, (tap / 3) as isize - 1);
        let (src, n) = resolve_padded(face, x as isize + dx, y as isize + dy, w);
        let conv = |i: usize| (src[i].0.index(), src[i].2 * w + src[i].1, src[i].3);
        ([conv(0), if n > 1 { conv(1) } else { (0, 0, 0.0) }], n)
    })
}

fn fuse_preactivation(feat: &[Vec<f64>], nb: &[([(usize, usize, f64); 2], usize); 9], fuse: &FuseWeights) -> [f64; 4] {
    let mut out = fuse.bias;
    for (tap, (src, n)) in nb.iter().enumerate() {
        for &(f, p, wt) in &src[..*n] {
            let px = &feat[f][p * POINT_FEATURE_LEN..(p + 1) * POINT_FEATURE_LEN];
            for (o, acc) in out.iter_mut().enumerate() {
                let mut s = 0.0;
                for (i, v) in px.iter().enumerate() {
                    s += fuse.at(o, i, tap) * v;
                }
                *acc += wt * s;
            }
        }
    }
    out
}

/// Residual fusion across face borders: point features are padded across
/// the cube, filtered 3×3 with ReLU, and the result is added to `(c, σ)` in
/// logistic/softplus space so the output stays a valid field.
pub fn padding_blend(field: &CubicField, fuse: &FuseWeights) -> CubicField {
    let (w, d) = (field.w(), field.d());
    let mut out = field.clone();
    for b in 0..d {
        let pos = position_table(field, b);
        let feat = plane_features(field, b, &pos);
        for face in Face::ALL {
            let f = face.index();
            for y in 0..w {
                for x in 0..w {
                    let pre = fuse_preactivation(&feat, &neighbourhood(face, x, y, w), fuse);
                    let i = field.mpis[f].index(b, x, y);
                    for c in 0..4 {
                        out.mpis[f].data[i + c] = residual_map(c, field.mpis[f].data[i + c], pre[c].max(0.0)).0;
                    }
                }
            }
        }
    }
    out
}

/// Reverse pass of [`padding_blend`]; returns the gradient for the input
/// field (MPI layout per face) and accumulates kernel gradients into `g`.
pub fn padding_blend_backward(field: &CubicField, fuse: &FuseWeights, dout: &[Vec<f64>; 6], g: &mut FuseWeights) -> [Vec<f64>; 6] {
    let (w, d) = (field.w(), field.d());
    let mut din: [Vec<f64>; 6] = std::array::from_fn(|f| vec![0.0; field.mpis[f].data.len()]);
    for b in 0..d {
        let pos = position_table(field, b);
        let feat = plane_features(field, b, &pos);
        for face in Face::ALL {
            let f = face.index();
            for y in 0..w {
                for x in 0..w {
                    let nb = neighbourhood(face, x, y, w);
                    let pre = fuse_preactivation(&feat, &nb, fuse);
                    let i = field.mpis[f].index(b, x, y);
                    let mut dpre = [0.0; 4];
                    for c in 0..4 {
                        let r = pre[c].max(0.0);
                        let (_, d_in, d_r) = residual_map(c, field.mpis[f].data[i + c], r);
                        din[f][i + c] += dout[f][i + c] * d_in;
                        if pre[c] > 0.0 {
                            dpre[c] = dout[f][i + c] * d_r;
                        }
                    }
                    if dpre == [0.0; 4] {
                        continue;
                    }
                    for (o, &dp) in dpre.iter().enumerate() {
                        g.bias[o] += dp;
                    }
                    for (tap, (src, n)) in nb.iter().enumerate() {
                        for &(sf, sp, wt) in &src[..*n] {
                            let px = &feat[sf][sp * POINT_FEATURE_LEN..(sp + 1) * POINT_FEATURE_LEN];
                            let si = (b * w * w + sp) * 4;
                            for (o, &dp) in dpre.iter().enumerate() {
                                if dp == 0.0 {
                                    continue;
                                }
                                for (ch, v) in px.iter().enumerate() {
                                    g.kernel[(o * POINT_FEATURE_LEN + ch) * 9 + tap] += dp * wt * v;
                                }
                                for ch in 0..4 {
                                    din[sf][si + ch] += dp * wt * fuse.at(o, ch, tap);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

/// Every blending parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendWeights {
    pub self_attn: AttentionWeights,
    pub cross_attn: AttentionWeights,
    pub erp_pool: ErpPoolWeights,
    pub fuse: FuseWeights,
}

impl BlendWeights {
    pub fn seeded(seed: u64) -> Self {
        BlendWeights {
            self_attn: AttentionWeights::seeded(TOKEN_WIDTH, FFN_WIDTH, seed),
            cross_attn: AttentionWeights::seeded(TOKEN_WIDTH, FFN_WIDTH, seed.wrapping_add(1)),
            erp_pool: ErpPoolWeights::seeded(3, seed.wrapping_add(2)),
            fuse: FuseWeights::seeded(seed.wrapping_add(3)),
        }
    }

    pub fn zeros() -> Self {
        BlendWeights {
            self_attn: AttentionWeights::zeros(TOKEN_WIDTH, FFN_WIDTH),
            cross_attn: AttentionWeights::zeros(TOKEN_WIDTH, FFN_WIDTH),
            erp_pool: ErpPoolWeights::zeros(3),
            fuse: FuseWeights::zeros(),
        }
    }

    /// Gradient accumulator with the learnable shapes of `self`.
    pub fn zeros_like(&self) -> BlendGrads {
        BlendGrads {
            self_attn: self.self_attn.zeros_like(),
            cross_attn: self.cross_attn.zeros_like(),
            fuse: FuseWeights::zeros(),
        }
    }

    /// Flat views of the learnable tensors (the panorama tokenizer is fixed).
    pub fn learnable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(self.self_attn.tensors_mut().into_iter().map(|t| t.1));
        out.extend(self.cross_attn.tensors_mut().into_iter().map(|t| t.1));
        out.push(&mut self.fuse.kernel);
        out.push(&mut self.fuse.bias);
        out
    }
}

/// Gradients of the learnable blending parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendGrads {
    pub self_attn: AttentionWeights,
    pub cross_attn: AttentionWeights,
    pub fuse: FuseWeights,
}

impl BlendGrads {
    pub fn flat(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        out.extend(self.self_attn.tensors().into_iter().map(|t| t.1));
        out.extend(self.cross_attn.tensors().into_iter().map(|t| t.1));
        out.push(&self.fuse.kernel);
        out.push(&self.fuse.bias);
        out
    }
}

/// Intermediate values of [`blend`] needed by its reverse pass.
pub struct BlendTrace {
    tokens: TokenSequence,
    after_self: TokenSequence,
    erp: TokenSequence,
    pos_c: Array2<f64>,
    pos_e: Array2<f64>,
    pre_pad: CubicField,
}

/// Full blending pipeline: self-attention, cross-attention against the
/// panorama, then padding blending.
pub fn blend(field: &CubicField, pano: &Image, wts: &BlendWeights) -> Result<CubicField> {
    blend_traced(field, pano, wts).map(|r| r.0)
}

pub fn blend_traced(field: &CubicField, pano: &Image, wts: &BlendWeights) -> Result<(CubicField, BlendTrace)> {
    let tokens = tokenize_faces(&field.mpis)?;
    let pos_c = face_token_positions(field.w());
    let after_self = self_attention(&tokens, &pos_c, &wts.self_attn)?;
    let erp = tokenize_erp(pano, &wts.erp_pool)?;
    let f = 1 << ERP_STAGES;
    let pos_e = erp_token_positions(pano.height / f, pano.width / f);
    let after_cross = cross_attention(&after_self, &erp, &pos_c, &pos_e, &wts.cross_attn)?;
    let pre_pad = CubicField::new(detokenize_faces(&after_cross)?, field.planes.clone())?;
    let out = padding_blend(&pre_pad, &wts.fuse);
    Ok((
        out,
        BlendTrace {
            tokens,
            after_self,
            erp,
            pos_c,
            pos_e,
            pre_pad,
        },
    ))
}

/// Reverse pass of [`blend`]: gradient for the input field plus gradients of
/// the learnable weights.
pub fn blend_backward(trace: &BlendTrace, wts: &BlendWeights, dout: &[Vec<f64>; 6]) -> Result<([Vec<f64>; 6], BlendGrads)> {
    let mut g = wts.zeros_like();
    let d_pre = padding_blend_backward(&trace.pre_pad, &wts.fuse, dout, &mut g.fuse);
    let w = trace.pre_pad.w();
    let d = trace.pre_pad.d();
    let d_mpis: [Mpi; 6] = std::array::from_fn(|f| Mpi {
        d,
        w,
        data: d_pre[f].clone(),
    });
    let d_cross = tokenize_faces(&d_mpis)?;
    let d_self = cross_attention_backward(
        &trace.after_self,
        &trace.erp,
        &trace.pos_c,
        &trace.pos_e,
        &wts.cross_attn,
        &d_cross,
        &mut g.cross_attn,
    );
    let d_tokens = self_attention_backward(&trace.tokens, &trace.pos_c, &wts.self_attn, &d_self, &mut g.self_attn);
    let d_in = detokenize_faces(&d_tokens)?;
    Ok((d_in.map(|m| m.data), g))
}
