//! Dataset indexing (MVTec-style folders), PNG I/O, resizing, and the
//! synthetic texture generator.
//!
//! Folder layout, per category:
//!
//! ```text
//! <category>/train/good/*.png
//! <category>/test/<kind>/*.png          (kind "good" is normal)
//! <category>/ground_truth/<kind>/<stem>_mask.png
//! ```

use std::f32::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcad_tensor::Tensor;

use crate::augment::{self, AugmentConfig};
use crate::error::{Error, Result};

/// One image with its label and optional ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Path relative to the dataset root.
    pub id: String,
    /// C×H×W in [0,1].
    pub image: Tensor,
    pub label: bool,
    /// Defect kind (`good` for normals).
    pub kind: String,
    /// 1×H×W binary mask.
    pub mask: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Category {
    pub name: String,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: Option<PathBuf>,
    pub resolution: usize,
    pub categories: Vec<Category>,
}

impl DatasetIndex {
    /// Training images of every category, in index order.
    pub fn train_images(&self) -> Vec<Tensor> {
        self.categories
            .iter()
            .flat_map(|c| c.train.iter().map(|s| s.image.clone()))
            .collect()
    }

    /// `(category, sample)` pairs of every test split, in index order.
    pub fn test_samples(&self) -> impl Iterator<Item = (&str, &Sample)> {
        self.categories
            .iter()
            .flat_map(|c| c.test.iter().map(move |s| (c.name.as_str(), s)))
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = io(dir, fs::read_dir(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    out.sort();
    Ok(out)
}

fn is_png(p: &Path) -> bool {
    p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn relative(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Indexes `root`. Either `root` is itself a category (has `train/` or
/// `test/`) or each sub-directory with such folders is one.
pub fn load_dataset(root: &Path, resolution: usize) -> Result<DatasetIndex> {
    if resolution < 2 {
        return Err(Error::Config(format!("resolution {resolution} is too small")));
    }
    if !root.is_dir() {
        return Err(Error::Index(format!("{} is not a directory", root.display())));
    }
    let is_category = |d: &Path| d.join("train").is_dir() || d.join("test").is_dir();
    let dirs: Vec<PathBuf> = if is_category(root) {
        vec![root.to_path_buf()]
    } else {
        sorted_entries(root)?.into_iter().filter(|d| d.is_dir() && is_category(d)).collect()
    };
    if dirs.is_empty() {
        return Err(Error::Index(format!("no category folders under {}", root.display())));
    }
    let categories = dirs
        .iter()
        .map(|d| load_category(root, d, resolution))
        .collect::<Result<_>>()?;
    Ok(DatasetIndex {
        root: Some(root.to_path_buf()),
        resolution,
        categories,
    })
}

fn load_category(root: &Path, dir: &Path, resolution: usize) -> Result<Category> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "default".into());
    let mut train = Vec::new();
    let good = dir.join("train").join("good");
    if good.is_dir() {
        for p in sorted_entries(&good)?.into_iter().filter(|p| is_png(p)) {
            train.push(Sample {
                id: relative(root, &p),
                image: load_image(&p, resolution)?,
                label: false,
                kind: "good".into(),
                mask: None,
            });
        }
    }
    let mut test = Vec::new();
    let test_dir = dir.join("test");
    if test_dir.is_dir() {
        for kind_dir in sorted_entries(&test_dir)?.into_iter().filter(|d| d.is_dir()) {
            let kind = kind_dir.file_name().unwrap().to_string_lossy().into_owned();
            let normal = kind == "good";
            for p in sorted_entries(&kind_dir)?.into_iter().filter(|p| is_png(p)) {
                let mask = if normal {
                    None
                } else {
                    let stem = p.file_stem().unwrap().to_string_lossy();
                    let mp = dir.join("ground_truth").join(&kind).join(format!("{stem}_mask.png"));
                    if !mp.is_file() {
                        return Err(Error::Index(format!(
                            "no ground-truth mask for {} (expected {})",
                            p.display(),
                            mp.display()
                        )));
                    }
                    Some(load_mask(&mp, resolution)?)
                };
                test.push(Sample {
                    id: relative(root, &p),
                    image: load_image(&p, resolution)?,
                    label: !normal,
                    kind: kind.clone(),
                    mask,
                });
            }
        }
    }
    Ok(Category { name, train, test })
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Decodes an 8- or 16-bit PNG (gray or RGB) to 3×R×R in [0,1] with
/// bilinear resizing.
pub fn load_image(path: &Path, resolution: usize) -> Result<Tensor> {
    let rgb = decode(path)?.into_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px.0[c].clamp(0.0, 1.0);
        }
    }
    let img = Tensor::new(&[3, h, w], data)?;
    resize_bilinear(&img, resolution, resolution)
}

/// Decodes a mask (nonzero ⇒ anomalous) to 1×R×R with nearest resizing.
pub fn load_mask(path: &Path, resolution: usize) -> Result<Tensor> {
    let gray = decode(path)?.into_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = (0..resolution * resolution)
        .map(|i| {
            let (y, x) = (i / resolution, i % resolution);
            let sy = (y * h) / resolution;
            let sx = (x * w) / resolution;
            if gray.get_pixel(sx as u32, sy as u32).0[0] > 0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::new(&[1, resolution, resolution], data)?)
}

/// Bilinear resize of a C×H×W image with half-pixel centers.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = *img.shape() else {
        return Err(Error::Usage(format!("expected C×H×W, got {:?}", img.shape())));
    };
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let coords = |o: usize, n: usize, i: usize| {
        let s = ((i as f32 + 0.5) * n as f32 / o as f32 - 0.5).clamp(0.0, (n - 1) as f32);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n - 1), s - i0 as f32)
    };
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..out_h {
            let (y0, y1, fy) = coords(out_h, h, y);
            for x in 0..out_w {
                let (x0, x1, fx) = coords(out_w, w, x);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Tensor::new(&[c, out_h, out_w], out)?)
}

fn plane_hw(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || t.len() != s[s.len() - 2] * s[s.len() - 1] {
        return Err(Error::Usage(format!("expected a single-plane map, got {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

fn save_png<P: image::Pixel<Subpixel = S> + image::PixelWithColorType, S: image::Primitive>(
    buf: &ImageBuffer<P, Vec<S>>,
    path: &Path,
) -> Result<()>
where
    [S]: image::EncodableLayout,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        io(parent, fs::create_dir_all(parent))?;
    }
    buf.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes a score map as a 16-bit grayscale PNG of `round(score · 65535)`.
pub fn save_map(scores: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = plane_hw(scores)?;
    let px: Vec<u16> = scores
        .data()
        .iter()
        .map(|&s| (s.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, px).expect("buffer matches dimensions");
    save_png(&buf, path)
}

/// Reads a map written by [`save_map`] as 1×1×H×W scores.
pub fn load_map(path: &Path) -> Result<Tensor> {
    let gray = decode(path)?.into_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
    Ok(Tensor::new(&[1, 1, h, w], data)?)
}

/// Writes a 3×H×W image as 8-bit RGB.
pub fn save_image(img: &Tensor, path: &Path) -> Result<()> {
    let [3, h, w] = *img.shape() else {
        return Err(Error::Usage(format!("expected 3×H×W, got {:?}", img.shape())));
    };
    let d = img.data();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
    });
    save_png(&buf, path)
}

fn save_mask(mask: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = plane_hw(mask)?;
    let px = mask.data().iter().map(|&m| if m > 0.0 { 255 } else { 0 }).collect();
    let buf = GrayImage::from_raw(w as u32, h as u32, px).expect("buffer matches dimensions");
    save_png(&buf, path)
}

/// Writes `index` under `root` in the folder layout [`load_dataset`] reads.
pub fn write_dataset(index: &DatasetIndex, root: &Path) -> Result<()> {
    for cat in &index.categories {
        for s in cat.train.iter().chain(&cat.test) {
            let path = root.join(&s.id);
            save_image(&s.image, &path)?;
            if let Some(mask) = &s.mask {
                let stem = path.file_stem().unwrap().to_string_lossy();
                let mp = root
                    .join(&cat.name)
                    .join("ground_truth")
                    .join(&s.kind)
                    .join(format!("{stem}_mask.png"));
                save_mask(mask, &mp)?;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Stripes,
    Checker,
    Blobs,
}

impl Texture {
    pub fn name(self) -> &'static str {
        match self {
            Texture::Stripes => "stripes",
            Texture::Checker => "checker",
            Texture::Blobs => "blobs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "stripes" => Ok(Texture::Stripes),
            "checker" => Ok(Texture::Checker),
            "blobs" => Ok(Texture::Blobs),
            other => Err(Error::Config(format!("unknown texture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub textures: Vec<Texture>,
    pub resolution: usize,
    pub train_count: usize,
    /// Test images per category; half are normal, half anomalous.
    pub test_count: usize,
    /// Stripe period and checker cell size, in pixels.
    pub period: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Test anomalies are redrawn until their mask has this many pixels.
    pub min_anomaly_pixels: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            textures: vec![Texture::Stripes, Texture::Checker],
            resolution: 64,
            train_count: 48,
            test_count: 50,
            period: 8,
            seed: 7,
            augment: AugmentConfig {
                reference_resolution: 256,
                ..AugmentConfig::default()
            },
            min_anomaly_pixels: 8,
        }
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Two per-category base colors, fixed by the texture kind.
fn palette(t: Texture) -> [[f32; 3]; 2] {
    match t {
        Texture::Stripes => [[0.20, 0.30, 0.55], [0.80, 0.75, 0.55]],
        Texture::Checker => [[0.25, 0.25, 0.25], [0.70, 0.70, 0.70]],
        Texture::Blobs => [[0.45, 0.25, 0.20], [0.85, 0.70, 0.45]],
    }
}

/// One normal texture image with random phase and mild global brightness
/// and contrast jitter, quantized to 8 bits.
pub fn render_texture<R: Rng + ?Sized>(t: Texture, res: usize, period: usize, rng: &mut R) -> Tensor {
    let p = period.max(2) as f32;
    let brightness = rng.gen_range(-0.04f32..0.04);
    let contrast = rng.gen_range(0.9f32..1.1);
    let mix: Vec<f32> = match t {
        Texture::Stripes => {
            let phase = rng.gen_range(0.0..p);
            (0..res * res)
                .map(|i| 0.5 + 0.5 * (TAU * ((i % res) as f32 + phase) / p).sin())
                .collect()
        }
        Texture::Checker => {
            let (oy, ox) = (rng.gen_range(0..2 * period), rng.gen_range(0..2 * period));
            (0..res * res)
                .map(|i| (((i / res + oy) / period + (i % res + ox) / period) % 2) as f32)
                .collect()
        }
        Texture::Blobs => {
            let blobs: Vec<(f32, f32, f32)> = (0..6)
                .map(|_| {
                    (
                        rng.gen_range(0.0..res as f32),
                        rng.gen_range(0.0..res as f32),
                        rng.gen_range(res as f32 / 12.0..res as f32 / 6.0),
                    )
                })
                .collect();
            (0..res * res)
                .map(|i| {
                    let (y, x) = ((i / res) as f32, (i % res) as f32);
                    let v: f32 = blobs
                        .iter()
                        .map(|&(by, bx, s)| (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * s * s)).exp())
                        .sum();
                    v.min(1.0)
                })
                .collect()
        }
    };
    let [a, b] = palette(t);
    let mut data = Vec::with_capacity(3 * res * res);
    for c in 0..3 {
        for &m in &mix {
            let v = a[c] + (b[c] - a[c]) * m;
            data.push(quantize((v - 0.5) * contrast + 0.5 + brightness));
        }
    }
    Tensor::new(&[3, res, res], data).expect("3×res×res")
}

/// Deterministic synthetic dataset: clean training textures and a test
/// split alternating normal and corrupted images with exact masks.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<DatasetIndex> {
    if spec.textures.is_empty() || spec.resolution < 8 {
        return Err(Error::Config("synthetic data needs a texture and resolution ≥ 8".into()));
    }
    spec.augment.validate()?;
    let res = spec.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut categories = Vec::with_capacity(spec.textures.len());
    for &t in &spec.textures {
        let name = t.name();
        let train = (0..spec.train_count)
            .map(|i| Sample {
                id: format!("{name}/train/good/{i:03}.png"),
                image: render_texture(t, res, spec.period, &mut rng),
                label: false,
                kind: "good".into(),
                mask: None,
            })
            .collect();
        let mut test = Vec::with_capacity(spec.test_count);
        for i in 0..spec.test_count {
            let clean = render_texture(t, res, spec.period, &mut rng);
            if i % 2 == 0 {
                test.push(Sample {
                    id: format!("{name}/test/good/{i:03}.png"),
                    image: clean,
                    label: false,
                    kind: "good".into(),
                    mask: None,
                });
                continue;
            }
            let a = loop {
                let a = augment::sample(&clean, &mut rng, &spec.augment)?;
                if a.mask_pixels() >= spec.min_anomaly_pixels.max(1) {
                    break a;
                }
            };
            let kind = a.kind.name().to_string();
            test.push(Sample {
                id: format!("{name}/test/{kind}/{i:03}.png"),
                image: a.corrupted,
                label: true,
                kind,
                mask: Some(a.mask),
            });
        }
        categories.push(Category {
            name: name.to_string(),
            train,
            test,
        });
    }
    Ok(DatasetIndex {
        root: None,
        resolution: res,
        categories,
    })
}
