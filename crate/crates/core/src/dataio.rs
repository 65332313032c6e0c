//! Dataset format, validation, and the synthetic dynamic-scene generator.
//!
//! A dataset directory holds `manifest.json` plus `frames/%05d.png`. The
//! synthetic scene is an expression-conditioned ellipsoid: the first three
//! expression components scale the radii, the fourth phase-shifts a smooth
//! RGB band pattern, and the remaining components are inert (the network has
//! to learn to ignore them). Ground-truth images are rendered through the
//! same quadrature compositor the engine trains against, from the closed-form
//! density/color field, so every training target is representable.

use crate::error::{Error, Result};
use crate::renderer::{composite, generate_ray, orbit_camera, Camera};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

// ── Images ──────────────────────────────────────────────────────────────

/// Interleaved RGB image with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Round every channel to the nearest 8-bit level. Stored targets are
    /// 8-bit, so renders are quantized the same way before comparison.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| quantize_channel(v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_channel(v)).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
                .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
        buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Ok(Image { width: w, height: h, data })
    }
}

pub fn quantize_channel(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

// ── Manifest ────────────────────────────────────────────────────────────

pub const MANIFEST_NAME: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMeta {
    pub file: String,
    /// Camera-to-world, 16 row-major reals.
    pub c2w: Vec<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub delta: Vec<f64>,
    /// Foreground pixel rect [x0, y0, x1, y1), end-exclusive.
    #[serde(rename = "box")]
    pub bbox: [u32; 4],
    /// "train" or "test"; empty means untagged.
    #[serde(default)]
    pub split: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
    pub background: [f64; 3],
    pub delta_dim: usize,
    pub frames: Vec<FrameMeta>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "unsupported manifest schema {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for a in 0..3 {
            if !(self.bounds_min[a] < self.bounds_max[a]) {
                return Err(Error::Data("degenerate scene bounds".into()));
            }
        }
        if !(self.t_near < self.t_far) {
            return Err(Error::Data(format!("t_near {} !< t_far {}", self.t_near, self.t_far)));
        }
        if self.frames.is_empty() {
            return Err(Error::Data("manifest lists no frames".into()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.delta.len() != self.delta_dim {
                return Err(Error::Data(format!(
                    "frame {i}: delta has dim {}, manifest declares {}",
                    f.delta.len(),
                    self.delta_dim
                )));
            }
            if f.c2w.len() != 16 {
                return Err(Error::Data(format!("frame {i}: c2w must have 16 entries")));
            }
            if !matches!(f.split.as_str(), "" | "train" | "test") {
                return Err(Error::Data(format!("frame {i}: unknown split tag {:?}", f.split)));
            }
        }
        Ok(())
    }

    /// World-space geometry shared by rendering and training.
    pub fn geometry(&self) -> SceneGeometry {
        SceneGeometry {
            bounds_min: self.bounds_min,
            bounds_max: self.bounds_max,
            t_near: self.t_near,
            t_far: self.t_far,
        }
    }
}

/// Scene bounds and the ray depth range; world points are mapped into
/// [-1,1]^3 (and clamped) before positional encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneGeometry {
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

impl SceneGeometry {
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            let x = 2.0 * (p[a] - self.bounds_min[a]) / (self.bounds_max[a] - self.bounds_min[a]) - 1.0;
            out[a] = x.clamp(-1.0, 1.0);
        }
        out
    }
}

/// One loaded training/test frame.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub index: usize,
    pub image: Image,
    pub camera: Camera,
    pub delta: Vec<f64>,
    pub bbox: [u32; 4],
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub frames: Vec<FrameRecord>,
}

impl Dataset {
    pub fn train_indices(&self) -> Vec<usize> {
        self.frames.iter().filter(|f| f.split == Split::Train).map(|f| f.index).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.frames.iter().filter(|f| f.split == Split::Test).map(|f| f.index).collect()
    }

    pub fn frame(&self, i: usize) -> &FrameRecord {
        &self.frames[i]
    }
}

/// Chronological 90/10 split: first 90% train, last 10% test, at least one
/// frame on each side when possible.
pub fn chronological_split(n: usize) -> Vec<Split> {
    let n_train = if n <= 1 { n } else { ((n as f64) * 0.9).floor() as usize }.clamp(1, n.max(1));
    let n_train = if n > 1 && n_train == n { n - 1 } else { n_train };
    (0..n).map(|i| if i < n_train { Split::Train } else { Split::Test }).collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    manifest.validate()?;

    let untagged = manifest.frames.iter().any(|f| f.split.is_empty());
    let fallback = chronological_split(manifest.frames.len());

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (i, meta) in manifest.frames.iter().enumerate() {
        let img_path = dir.join(&meta.file);
        let image = Image::load_png(&img_path)
            .map_err(|e| Error::Data(format!("frame {i} ({}): {e}", meta.file)))?;
        let mut c2w = [0.0; 16];
        c2w.copy_from_slice(&meta.c2w);
        let camera = Camera::new(meta.fx, meta.fy, meta.cx, meta.cy, c2w, image.width, image.height)
            .map_err(|e| Error::Data(format!("frame {i}: {e}")))?;
        let split = if untagged {
            fallback[i]
        } else if meta.split == "train" {
            Split::Train
        } else {
            Split::Test
        };
        frames.push(FrameRecord { index: i, image, camera, delta: meta.delta.clone(), bbox: meta.bbox, split });
    }
    Ok(Dataset { dir: dir.to_path_buf(), manifest, frames })
}

// ── Synthetic scene ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    /// Base ellipsoid radii.
    pub base_radii: [f64; 3],
    /// Coupling matrix from delta[0..3] into the radii:
    /// r_i = r0_i + sum_k coupling[i][k] * delta_k. The default first column
    /// grows all radii together, so the silhouette tracks delta[0]
    /// monotonically from any viewpoint; the other columns add anisotropy.
    pub radius_coupling: [[f64; 3]; 3],
    /// Index of the expression component driving the color-band phase.
    pub phase_index: usize,
    /// Peak density at the ellipsoid center.
    pub density_scale: f64,
    /// Spatial frequency of the color bands.
    pub band_freq: f64,
    pub orbit_radius: f64,
    pub orbit_elevation: f64,
    pub frames: usize,
    pub image_size: usize,
    pub delta_dim: usize,
    /// Midpoint samples per ray for the ground-truth renders.
    pub gt_samples: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            base_radii: [0.33, 0.31, 0.32],
            radius_coupling: [[0.10, 0.04, 0.0], [0.10, -0.04, 0.03], [0.10, 0.0, -0.03]],
            phase_index: 3,
            density_scale: 14.0,
            band_freq: 7.0,
            orbit_radius: 2.4,
            orbit_elevation: 0.45,
            frames: 8,
            image_size: 48,
            delta_dim: 76,
            gt_samples: 256,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("frames must be positive".into()));
        }
        if self.image_size < 11 {
            return Err(Error::Config("image_size must be at least 11".into()));
        }
        if self.delta_dim <= self.phase_index || self.delta_dim < 4 {
            return Err(Error::Config("delta_dim too small for the active components".into()));
        }
        if self.gt_samples < 2 {
            return Err(Error::Config("gt_samples must be at least 2".into()));
        }
        // the trajectory keeps |delta| <= 1 on the radius components
        for a in 0..3 {
            let reach: f64 = self.radius_coupling[a].iter().map(|c| c.abs()).sum();
            if self.base_radii[a] - reach <= 0.02 {
                return Err(Error::Config(format!(
                    "radius {a} can collapse: base {} vs coupling reach {reach}",
                    self.base_radii[a]
                )));
            }
        }
        if self.density_scale <= 0.0 || self.band_freq <= 0.0 {
            return Err(Error::Config("density_scale and band_freq must be positive".into()));
        }
        Ok(())
    }

    /// Ellipsoid radii under an expression vector.
    pub fn radii(&self, delta: &[f64]) -> [f64; 3] {
        let mut r = self.base_radii;
        for a in 0..3 {
            for k in 0..3 {
                r[a] += self.radius_coupling[a][k] * delta.get(k).copied().unwrap_or(0.0);
            }
        }
        r
    }

    pub fn geometry(&self) -> SceneGeometry {
        SceneGeometry {
            bounds_min: [-1.25; 3],
            bounds_max: [1.25; 3],
            t_near: self.orbit_radius - 1.2,
            t_far: self.orbit_radius + 1.2,
        }
    }

    pub fn camera_for(&self, frame: usize) -> Result<Camera> {
        let azimuth = 2.0 * std::f64::consts::PI * frame as f64 / self.frames as f64;
        // ~50 degree field of view
        let f = self.image_size as f64 * 1.07;
        orbit_camera(self.orbit_radius, azimuth, self.orbit_elevation, f, f, self.image_size, self.image_size)
    }

    /// Smooth seeded expression trajectory. Components 0..3 are active with
    /// O(1) amplitude; the rest carry small smooth variation the scene
    /// ignores.
    pub fn delta_trajectory(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xd1_77_ab_1e);
        let tau = 2.0 * std::f64::consts::PI;
        let params: Vec<(f64, f64, f64)> = (0..self.delta_dim)
            .map(|k| {
                let amp = if k < 3 {
                    0.85
                } else if k == self.phase_index {
                    2.5
                } else {
                    0.05
                };
                let freq = 1.0 + (rng.gen::<f64>() * 2.0).floor();
                let phase = rng.gen::<f64>() * tau;
                (amp, freq, phase)
            })
            .collect();
        (0..self.frames)
            .map(|j| {
                let s = j as f64 / self.frames as f64;
                params
                    .iter()
                    .map(|&(amp, freq, phase)| amp * (tau * freq * s + phase).sin())
                    .collect()
            })
            .collect()
    }
}

/// Closed-form scene density/color at a world point under expression delta.
/// Smooth (C1) in both arguments.
pub fn analytic_query(p: [f64; 3], delta: &[f64], spec: &SyntheticSceneSpec) -> (f64, [f64; 3]) {
    let r = spec.radii(delta);
    let q = (p[0] / r[0]).powi(2) + (p[1] / r[1]).powi(2) + (p[2] / r[2]).powi(2);
    let sigma = if q < 1.0 { spec.density_scale * (1.0 - q) * (1.0 - q) } else { 0.0 };
    let phi = delta.get(spec.phase_index).copied().unwrap_or(0.0);
    let f = spec.band_freq;
    let color = [
        0.5 + 0.5 * (f * p[0] + phi).sin(),
        0.5 + 0.5 * (f * p[1] + phi + 2.094).sin(),
        0.5 + 0.5 * (f * p[2] + phi + 4.189).sin(),
    ];
    (sigma, color)
}

/// Render one ground-truth frame by midpoint quadrature over the closed-form
/// field.
pub fn render_analytic_frame(
    camera: &Camera,
    delta: &[f64],
    spec: &SyntheticSceneSpec,
    background: [f64; 3],
) -> Result<Image> {
    let geom = spec.geometry();
    let n = spec.gt_samples;
    let mut img = Image::new(camera.width, camera.height);
    let width = (geom.t_far - geom.t_near) / n as f64;
    for y in 0..camera.height {
        for x in 0..camera.width {
            let ray = generate_ray(camera, x as f64 + 0.5, y as f64 + 0.5, geom.t_near, geom.t_far)?;
            let mut densities = Vec::with_capacity(n);
            let mut colors = Vec::with_capacity(n);
            let mut ts = Vec::with_capacity(n);
            for i in 0..n {
                let t = geom.t_near + (i as f64 + 0.5) * width;
                let (s, c) = analytic_query(ray.at(t), delta, spec);
                densities.push(s);
                colors.push(c);
                ts.push(t);
            }
            let out = composite(&densities, &colors, &ts, geom.t_far, background)?;
            img.set_pixel(x, y, [out.pixel[0] as f32, out.pixel[1] as f32, out.pixel[2] as f32]);
        }
    }
    Ok(img)
}

/// Pixel bounding box of the ellipsoid's projection, padded by one pixel and
/// clamped to the image.
pub fn project_bbox(camera: &Camera, delta: &[f64], spec: &SyntheticSceneSpec) -> [u32; 4] {
    let r = spec.radii(delta);
    // world -> camera for a rigid c2w: R^T (p - t)
    let rot = camera.rotation();
    let pos = camera.position();
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let n = 512;
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    for i in 0..n {
        // Fibonacci sphere directions
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let rad = (1.0 - z * z).sqrt();
        let th = golden * i as f64;
        let dir = [rad * th.cos(), rad * th.sin(), z];
        let pw = [dir[0] * r[0], dir[1] * r[1], dir[2] * r[2]];
        let rel = [pw[0] - pos[0], pw[1] - pos[1], pw[2] - pos[2]];
        let pc = [
            rot[0][0] * rel[0] + rot[1][0] * rel[1] + rot[2][0] * rel[2],
            rot[0][1] * rel[0] + rot[1][1] * rel[1] + rot[2][1] * rel[2],
            rot[0][2] * rel[0] + rot[1][2] * rel[1] + rot[2][2] * rel[2],
        ];
        if pc[2] >= -1e-9 {
            continue; // behind the camera
        }
        let u = camera.cx + camera.fx * pc[0] / (-pc[2]);
        let v = camera.cy + camera.fy * pc[1] / (-pc[2]);
        x0 = x0.min(u);
        y0 = y0.min(v);
        x1 = x1.max(u);
        y1 = y1.max(v);
    }
    let w = camera.width as f64;
    let h = camera.height as f64;
    [
        (x0 - 1.0).clamp(0.0, w) as u32,
        (y0 - 1.0).clamp(0.0, h) as u32,
        (x1 + 1.0).ceil().clamp(0.0, w) as u32,
        (y1 + 1.0).ceil().clamp(0.0, h) as u32,
    ]
}

pub const DEFAULT_BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];

/// Write a complete synthetic dataset (manifest + frame PNGs) to `out_dir`.
/// A pure function of the spec: the same spec writes identical bytes.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let frames_dir = out_dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(frames_dir.display().to_string(), e))?;

    let geom = spec.geometry();
    let deltas = spec.delta_trajectory();
    let splits = chronological_split(spec.frames);
    let mut metas = Vec::with_capacity(spec.frames);
    for j in 0..spec.frames {
        let camera = spec.camera_for(j)?;
        let img = render_analytic_frame(&camera, &deltas[j], spec, DEFAULT_BACKGROUND)?;
        let file = format!("frames/{j:05}.png");
        img.save_png(&out_dir.join(&file))?;
        metas.push(FrameMeta {
            file,
            c2w: camera.c2w.to_vec(),
            fx: camera.fx,
            fy: camera.fy,
            cx: camera.cx,
            cy: camera.cy,
            delta: deltas[j].clone(),
            bbox: project_bbox(&camera, &deltas[j], spec),
            split: match splits[j] {
                Split::Train => "train".into(),
                Split::Test => "test".into(),
            },
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        bounds_min: geom.bounds_min,
        bounds_max: geom.bounds_max,
        t_near: geom.t_near,
        t_far: geom.t_far,
        background: DEFAULT_BACKGROUND,
        delta_dim: spec.delta_dim,
        frames: metas,
    };
    let path = out_dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(manifest)
}
