//! Procedural textured box room with analytic depth, for end-to-end checks.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{erp_pixel_to_sphere, ErpGrid};
use crate::image::Image;
use crate::io::{save_depth, save_image, SceneManifest, ViewEntry};
use crate::optimizer::PosedView;
use crate::rendering::Pose;

/// One sinusoidal texture component on a wall, in wall-plane metres.
#[derive(Clone, Debug)]
struct Wave {
    freq: [f64; 2],
    phase: [f64; 3],
    amp: f64,
}

#[derive(Clone, Debug)]
struct WallTexture {
    base: [f64; 3],
    waves: Vec<Wave>,
}

impl WallTexture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let base = [0.0; 3].map(|_: f64| rng.random_range(0.3..0.7));
        let waves = (0..7)
            .map(|_| {
                let wavelength: f64 = rng.random_range(0.15..1.2);
                let angle: f64 = rng.random_range(0.0..TAU);
                let f = 1.0 / wavelength;
                Wave {
                    freq: [f * angle.cos(), f * angle.sin()],
                    phase: [0.0; 3].map(|_: f64| rng.random_range(0.0..TAU)),
                    amp: rng.random_range(0.5..1.0),
                }
            })
            .collect();
        WallTexture { base, waves }
    }

    fn color(&self, u: f64, v: f64) -> [f64; 3] {
        let total: f64 = self.waves.iter().map(|w| w.amp).sum();
        std::array::from_fn(|c| {
            let s: f64 = self
                .waves
                .iter()
                .map(|w| w.amp * (TAU * (w.freq[0] * u + w.freq[1] * v) + w.phase[c]).sin())
                .sum();
            (self.base[c] + 0.28 * s / total * 2.0).clamp(0.0, 1.0)
        })
    }
}

/// Axis-aligned box room; walls ordered `−x, +x, −y, +y, −z, +z`.
#[derive(Clone, Debug)]
pub struct Room {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    walls: Vec<WallTexture>,
}

impl Room {
    pub fn new(min: [f64; 3], max: [f64; 3], seed: u64) -> Result<Self> {
        let (min, max) = (Vector3::from(min), Vector3::from(max));
        if !(0..3).all(|a| min[a] < 0.0 && max[a] > 0.0) {
            return Err(Error::InvalidArgument(
                "room must contain the origin strictly inside".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let walls = (0..6).map(|_| WallTexture::random(&mut rng)).collect();
        Ok(Room { min, max, walls })
    }

    /// A 4.4 × 2.8 × 5.2 m room with the origin off-center.
    pub fn standard(seed: u64) -> Self {
        Room::new([-2.0, -1.3, -2.4], [2.4, 1.5, 2.8], seed).expect("valid room")
    }

    /// Mean side length of the box.
    pub fn scale(&self) -> f64 {
        (self.max - self.min).sum() / 3.0
    }

    /// Distance to the nearest wall along the coordinate axes from the origin.
    pub fn min_wall_distance(&self) -> f64 {
        (0..3).map(|a| (-self.min[a]).min(self.max[a])).fold(f64::INFINITY, f64::min)
    }

    /// Largest coordinate magnitude of any wall.
    pub fn max_wall_distance(&self) -> f64 {
        self.min.abs().max().max(self.max.amax())
    }

    /// Exit distance and wall of the ray `o + s·dir` from inside the box.
    pub fn hit(&self, o: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for a in 0..3 {
            if dir[a] == 0.0 {
                continue;
            }
            let (bound, wall) = if dir[a] > 0.0 {
                (self.max[a], 2 * a + 1)
            } else {
                (self.min[a], 2 * a)
            };
            let s = (bound - o[a]) / dir[a];
            if s > 0.0 && best.is_none_or(|b| s < b.0) {
                best = Some((s, wall));
            }
        }
        best
    }

    pub fn color_at(&self, p: &Vector3<f64>, wall: usize) -> [f64; 3] {
        let a = wall / 2;
        let (u, v) = (p[(a + 1) % 3], p[(a + 2) % 3]);
        self.walls[wall].color(u, v)
    }

    /// Radiance and distance along `dir` from `o`.
    pub fn trace(&self, o: &Vector3<f64>, dir: &Vector3<f64>) -> Option<([f64; 3], f64)> {
        let dir = dir.normalize();
        let (s, wall) = self.hit(o, &dir)?;
        Some((self.color_at(&(o + dir * s), wall), s))
    }

    /// Equirectangular color (averaged over `ss × ss` sub-pixel rays) and
    /// pixel-center ray distance seen from the camera of `pose`.
    pub fn render(&self, pose: &Pose, grid: &ErpGrid, ss: usize) -> Result<(Image, Image)> {
        let o = pose.center();
        if !(0..3).all(|a| o[a] > self.min[a] && o[a] < self.max[a]) {
            return Err(Error::InvalidArgument("camera is outside the room".into()));
        }
        let ss = ss.max(1);
        let mut rgb = Image::new(grid.width, grid.height, 3);
        let mut depth = Image::new(grid.width, grid.height, 1);
        let field_dir = |m: f64, n: f64| pose.rotation * erp_pixel_to_sphere(m, n, grid).q;
        for n in 0..grid.height {
            for m in 0..grid.width {
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let (fm, fn_) = (
                            m as f64 + (sx as f64 + 0.5) / ss as f64,
                            n as f64 + (sy as f64 + 0.5) / ss as f64,
                        );
                        let (c, _) = self.trace(&o, &field_dir(fm, fn_)).expect("rays leave the room");
                        acc.iter_mut().zip(c).for_each(|(a, v)| *a += v);
                    }
                }
                let k = 1.0 / (ss * ss) as f64;
                for (c, a) in acc.iter().enumerate() {
                    rgb.set(m, n, c, a * k);
                }
                let (_, s) = self
                    .trace(&o, &field_dir(m as f64 + 0.5, n as f64 + 0.5))
                    .expect("rays leave the room");
                depth.set(m, n, 0, s);
            }
        }
        Ok((rgb, depth))
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    /// Panorama width; height is half of it.
    pub width: usize,
    pub views: usize,
    /// Bound on each translation component, as a fraction of `near`.
    pub baseline: f64,
    /// Largest yaw of a view, in degrees.
    pub max_yaw_deg: f64,
    pub supersample: usize,
    pub seed: u64,
    pub near: f64,
    /// Defaults to just past the farthest wall plane of the standard room.
    pub far: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 512,
            views: 3,
            baseline: 0.4,
            max_yaw_deg: 20.0,
            supersample: 3,
            seed: 0,
            near: 1.0,
            far: 3.1,
        }
    }
}

/// A rendered room: reference panorama at the origin, posed views and
/// ground-truth reference depth.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub room: Room,
    pub reference: Image,
    pub depth: Image,
    pub views: Vec<PosedView>,
    pub near: f64,
    pub far: f64,
}

pub fn room_scene(cfg: &SynthConfig) -> Result<SynthScene> {
    let room = Room::standard(cfg.seed);
    if !(cfg.near > 0.0 && cfg.near < room.min_wall_distance() && cfg.far > cfg.near) {
        return Err(Error::InvalidArgument(format!(
            "near must lie in (0, {}) and far above it",
            room.min_wall_distance()
        )));
    }
    if !(0.0..1.0).contains(&cfg.baseline) {
        return Err(Error::InvalidArgument("baseline must lie in [0, 1)".into()));
    }
    let grid = ErpGrid::new(cfg.width, cfg.width / 2)?;
    let (reference, depth) = room.render(&Pose::identity(), &grid, cfg.supersample)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let b = cfg.baseline * cfg.near;
    let views = (0..cfg.views)
        .map(|_| {
            let t = Vector3::from([0.0; 3].map(|_: f64| if b > 0.0 { rng.random_range(-b..b) } else { 0.0 }));
            let yaw = if cfg.max_yaw_deg > 0.0 {
                rng.random_range(-cfg.max_yaw_deg..cfg.max_yaw_deg).to_radians()
            } else {
                0.0
            };
            let r = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
            let pose = Pose::new(r.into_inner(), t)?;
            let (image, _) = room.render(&pose, &grid, cfg.supersample)?;
            Ok(PosedView { image, pose })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthScene {
        room,
        reference,
        depth,
        views,
        near: cfg.near,
        far: cfg.far,
    })
}

impl SynthScene {
    /// Writes `reference.png`, `view_<k>.png`, `depth_gt.pfm` and
    /// `scene.toml`; returns the manifest path.
    pub fn save(&self, dir: &Path, w: usize, d: usize, seed: u64) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_image(&dir.join("reference.png"), &self.reference)?;
        save_depth(&dir.join("depth_gt.pfm"), &self.depth)?;
        let mut views = Vec::new();
        for (k, v) in self.views.iter().enumerate() {
            let name = format!("view_{k}.png");
            save_image(&dir.join(&name), &v.image)?;
            views.push(ViewEntry {
                image: name.into(),
                rotation: v.pose.to_quaternion(),
                translation: v.pose.translation.into(),
            });
        }
        let manifest = SceneManifest {
            reference: "reference.png".into(),
            near: self.near,
            far: self.far,
            w,
            d,
            seed,
            views,
            base_dir: dir.to_path_buf(),
        };
        let path = dir.join("scene.toml");
        std::fs::write(&path, manifest.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::erp_pixel_to_sphere;

    #[test]
    fn depth_matches_wall_planes() {
        let room = Room::standard(1);
        let grid = ErpGrid::new(64, 32).unwrap();
        let (_, depth) = room.render(&Pose::identity(), &grid, 1).unwrap();
        for n in 0..32 {
            for m in 0..64 {
                let q = erp_pixel_to_sphere(m as f64 + 0.5, n as f64 + 0.5, &grid).q;
                let p = q * depth.get(m, n, 0);
                // The hit point lies on the box surface.
                let on = (0..3).any(|a| (p[a] - room.min[a]).abs() < 1e-9 || (p[a] - room.max[a]).abs() < 1e-9);
                assert!(on);
                assert!((0..3).all(|a| p[a] >= room.min[a] - 1e-9 && p[a] <= room.max[a] + 1e-9));
            }
        }
    }

    #[test]
    fn hand_distances() {
        let room = Room::standard(0);
        let o = Vector3::zeros();
        assert_eq!(room.hit(&o, &Vector3::new(0.0, 0.0, 1.0)), Some((2.8, 5)));
        assert_eq!(room.hit(&o, &Vector3::new(-1.0, 0.0, 0.0)), Some((2.0, 0)));
        let o = Vector3::new(0.0, 1.0, 0.0);
        assert_eq!(room.hit(&o, &Vector3::new(0.0, 1.0, 0.0)).unwrap().1, 3);
        assert!((room.scale() - (4.4 + 2.8 + 5.2) / 3.0).abs() < 1e-12);
        assert_eq!(room.min_wall_distance(), 1.3);
    }

    #[test]
    fn views_respect_the_near_cube_and_are_seeded() {
        let cfg = SynthConfig {
            width: 32,
            supersample: 1,
            ..SynthConfig::default()
        };
        let a = room_scene(&cfg).unwrap();
        let b = room_scene(&cfg).unwrap();
        assert_eq!(a.views.len(), 3);
        for (x, y) in a.views.iter().zip(&b.views) {
            assert!(x.pose.max_abs_translation() < cfg.near);
            assert_eq!(x.pose, y.pose);
            assert_eq!(x.image, y.image);
        }
        assert!(a.reference.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn saved_scene_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            width: 32,
            views: 2,
            supersample: 1,
            ..SynthConfig::default()
        };
        let s = room_scene(&cfg).unwrap();
        let path = s.save(dir.path(), 8, 4, 3).unwrap();
        let m = crate::io::load_scene(&path).unwrap();
        assert_eq!((m.w, m.d, m.seed, m.views.len()), (8, 4, 3, 2));
        let (r, v) = m.load_views().unwrap();
        assert_eq!((r.width, r.height), (32, 16));
        for (a, b) in v.iter().zip(&s.views) {
            assert!((a.pose.rotation - b.pose.rotation).amax() < 1e-9);
        }
    }
}
