//! Procedural day-clear scenes with exact depth, simulated adverse renderings,
//! and the random multi-crop sampler.
//!
//! A scene is a ground plane whose depth grows geometrically toward the top
//! row, with axis-aligned boxes standing on it. Pixel intensity is
//! `albedo · 1 / (1 + depth / 10)`, so nearer surfaces are brighter.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

pub const DEPTH_MIN: f64 = 1.0;
pub const DEPTH_MAX: f64 = 80.0;
pub const SOURCE_DOMAIN: &str = "day-clear";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub night_gain: f64,
    pub night_noise: f64,
    pub rain_amplitude: f64,
    pub rain_contrast: f64,
    /// Fraction of image diagonals carrying a rain streak.
    pub rain_density: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 3,
            min_objects: 2,
            max_objects: 6,
            night_gain: 0.25,
            night_noise: 0.02,
            rain_amplitude: 0.15,
            rain_contrast: 0.7,
            rain_density: 0.12,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 || self.channels == 0 {
            return Err(Error::config("data.scene", "image extent must be at least 2×2 with one channel"));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config("data.scene.min_objects", "min_objects exceeds max_objects"));
        }
        if !(0.0..=1.0).contains(&self.rain_density) {
            return Err(Error::config("data.scene.rain_density", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

pub fn shading(depth: f64) -> f64 {
    1.0 / (1.0 + depth / 10.0)
}

/// Image `H×W×C` in `[0,1]` and metric depth `H×W` in `[1, 80]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub image: Vec<f64>,
    pub depth: Vec<f64>,
    pub domain: String,
    pub seed: u64,
}

impl SceneSample {
    pub fn mean_intensity(&self) -> f64 {
        self.image.iter().sum::<f64>() / self.image.len() as f64
    }
}

/// Ground-plane scene with `K ∈ [min_objects, max_objects]` boxes.
pub fn gen_scene(rng: &mut SeededRng, params: &SceneParams) -> SceneSample {
    let seed = rng.next_u64();
    let mut r = SeededRng::child(seed, "scene", 0);
    let (h, w, c) = (params.height, params.width, params.channels);

    let near = r.uniform(1.5, 4.0);
    let far = r.uniform(40.0, DEPTH_MAX);
    let ground: Vec<f64> = (0..h)
        .map(|y| far * (near / far).powf(y as f64 / (h - 1) as f64))
        .collect();
    let ground_albedo = r.uniform_vec(c, 0.6, 1.0);

    let mut depth = vec![0.0; h * w];
    let mut albedo = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            depth[y * w + x] = ground[y];
            albedo[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&ground_albedo);
        }
    }

    let count = params.min_objects + r.below(params.max_objects - params.min_objects + 1);
    let mut boxes = Vec::with_capacity(count);
    for _ in 0..count {
        let bh = 4 + r.below((h / 3).max(1));
        let bw = 4 + r.below((w / 3).max(1));
        let bh = bh.min(h);
        let bw = bw.min(w);
        let y0 = r.below(h - bh + 1);
        let x0 = r.below(w - bw + 1);
        // stands on the ground at its bottom row, so it is never behind it
        let z = (r.uniform(0.3, 0.9) * ground[y0 + bh - 1]).max(DEPTH_MIN);
        let col = r.uniform_vec(c, 0.5, 1.0);
        boxes.push((z, y0, x0, bh, bw, col));
    }
    // far to near, nearer boxes occlude
    boxes.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (z, y0, x0, bh, bw, col) in &boxes {
        for y in *y0..y0 + bh {
            for x in *x0..x0 + bw {
                depth[y * w + x] = *z;
                albedo[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(col);
            }
        }
    }

    depth.iter_mut().for_each(|d| *d = d.clamp(DEPTH_MIN, DEPTH_MAX));
    let mut image = vec![0.0; h * w * c];
    for p in 0..h * w {
        let s = shading(depth[p]);
        for ch in 0..c {
            image[p * c + ch] = (albedo[p * c + ch] * s).clamp(0.0, 1.0);
        }
    }

    SceneSample {
        height: h,
        width: w,
        channels: c,
        image,
        depth,
        domain: SOURCE_DOMAIN.to_string(),
        seed,
    }
}

/// Elementary image degradations; domains chain them in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Night,
    Rain,
}

/// Known domain labels and their transform chains (night before rain).
pub const DOMAINS: [(&str, &[Condition]); 5] = [
    (SOURCE_DOMAIN, &[]),
    ("night", &[Condition::Night]),
    ("rain", &[Condition::Rain]),
    ("rain-night", &[Condition::Night, Condition::Rain]),
    ("night-rain", &[Condition::Night, Condition::Rain]),
];

pub fn transform_chain(domain: &str) -> Result<&'static [Condition]> {
    DOMAINS
        .iter()
        .find(|(label, _)| *label == domain)
        .map(|(_, chain)| *chain)
        .ok_or_else(|| Error::config("eval.domains", format!("unknown domain '{domain}'")))
}

fn apply_night(img: &mut [f64], rng: &mut SeededRng, params: &SceneParams) {
    for v in img.iter_mut() {
        *v = (*v * params.night_gain + rng.normal(0.0, params.night_noise)).clamp(0.0, 1.0);
    }
}

fn apply_rain(img: &mut [f64], rng: &mut SeededRng, params: &SceneParams, h: usize, w: usize, c: usize) {
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    for v in img.iter_mut() {
        *v = mean + params.rain_contrast * (*v - mean);
    }
    // diagonal k holds pixels with x − y = k − (h − 1), running down-right
    for k in 0..h + w - 1 {
        if !rng.bernoulli(params.rain_density) {
            continue;
        }
        let offset = k as isize - (h as isize - 1);
        let y_start = (-offset).max(0) as usize;
        let y_end = (w as isize - offset).min(h as isize) as usize;
        let span = y_end - y_start;
        let len = (4 + rng.below(9)).min(span);
        let begin = y_start + rng.below(span - len + 1);
        for y in begin..begin + len {
            let x = (y as isize + offset) as usize;
            for ch in 0..c {
                img[(y * w + x) * c + ch] += params.rain_amplitude;
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Renders a day-clear sample under `domain`. Depth is copied unchanged.
pub fn apply_domain(sample: &SceneSample, domain: &str, params: &SceneParams) -> Result<SceneSample> {
    if sample.domain != SOURCE_DOMAIN {
        return Err(Error::Contract(format!(
            "domain transforms apply to {SOURCE_DOMAIN} samples, got '{}'",
            sample.domain
        )));
    }
    let chain = transform_chain(domain)?;
    let mut out = sample.clone();
    for (i, cond) in chain.iter().enumerate() {
        let mut rng = SeededRng::child(sample.seed, &format!("{domain}/{cond:?}"), i as u64);
        match cond {
            Condition::Night => apply_night(&mut out.image, &mut rng, params),
            Condition::Rain => apply_rain(&mut out.image, &mut rng, params, out.height, out.width, out.channels),
        }
    }
    out.domain = domain.to_string();
    Ok(out)
}

/// `N` crops with image and depth cut at identical origins.
#[derive(Clone, Debug)]
pub struct CropBatch {
    /// `[N, H', W', C]`
    pub crops: Tensor,
    /// `[N, H', W']`
    pub depth: Tensor,
    pub origins: Vec<(usize, usize)>,
}

impl CropBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Stacks batches along the crop axis.
    pub fn concat(batches: &[CropBatch]) -> Result<CropBatch> {
        let first = batches.first().ok_or_else(|| Error::Contract("no crop batches to concatenate".into()))?;
        let mut shape = first.crops.shape().to_vec();
        let mut dshape = first.depth.shape().to_vec();
        let mut img = Vec::new();
        let mut dep = Vec::new();
        let mut origins = Vec::new();
        for b in batches {
            if b.crops.shape()[1..] != shape[1..] {
                return Err(Error::Dimension {
                    op: "CropBatch::concat",
                    lhs: shape,
                    rhs: b.crops.shape().to_vec(),
                });
            }
            img.extend_from_slice(&b.crops.data());
            dep.extend_from_slice(&b.depth.data());
            origins.extend_from_slice(&b.origins);
        }
        shape[0] = origins.len();
        dshape[0] = origins.len();
        Ok(CropBatch {
            crops: Tensor::from_vec(img, &shape)?,
            depth: Tensor::from_vec(dep, &dshape)?,
            origins,
        })
    }
}

fn check_crop(sample: &SceneSample, ch: usize, cw: usize, patch: usize) -> Result<()> {
    if ch == 0 || cw == 0 || ch > sample.height || cw > sample.width {
        return Err(Error::Contract(format!(
            "crop {ch}×{cw} does not fit image {}×{}",
            sample.height, sample.width
        )));
    }
    if patch == 0 || ch % patch != 0 || cw % patch != 0 {
        return Err(Error::Contract(format!("crop {ch}×{cw} not divisible by patch {patch}")));
    }
    Ok(())
}

/// Cuts crops at explicit origins.
pub fn crops_at(sample: &SceneSample, origins: &[(usize, usize)], ch: usize, cw: usize) -> Result<CropBatch> {
    let (w, c) = (sample.width, sample.channels);
    let mut img = Vec::with_capacity(origins.len() * ch * cw * c);
    let mut dep = Vec::with_capacity(origins.len() * ch * cw);
    for &(y0, x0) in origins {
        if y0 + ch > sample.height || x0 + cw > sample.width {
            return Err(Error::Contract(format!("crop origin ({y0},{x0}) out of bounds")));
        }
        for y in y0..y0 + ch {
            img.extend_from_slice(&sample.image[(y * w + x0) * c..(y * w + x0 + cw) * c]);
            dep.extend_from_slice(&sample.depth[y * w + x0..y * w + x0 + cw]);
        }
    }
    let n = origins.len();
    Ok(CropBatch {
        crops: Tensor::from_vec(img, &[n, ch, cw, c])?,
        depth: Tensor::from_vec(dep, &[n, ch, cw])?,
        origins: origins.to_vec(),
    })
}

/// `n` uniform-random crops of `ch×cw`; extents must be multiples of `patch`.
pub fn sample_crops(rng: &mut SeededRng, sample: &SceneSample, n: usize, ch: usize, cw: usize, patch: usize) -> Result<CropBatch> {
    check_crop(sample, ch, cw, patch)?;
    if n == 0 {
        return Err(Error::Contract("crop count must be at least 1".into()));
    }
    let origins: Vec<(usize, usize)> = (0..n)
        .map(|_| (rng.below(sample.height - ch + 1), rng.below(sample.width - cw + 1)))
        .collect();
    crops_at(sample, &origins, ch, cw)
}

/// Non-overlapping grid covering the image; extents must tile it exactly.
pub fn tile_crops(sample: &SceneSample, ch: usize, cw: usize, patch: usize) -> Result<CropBatch> {
    check_crop(sample, ch, cw, patch)?;
    if sample.height % ch != 0 || sample.width % cw != 0 {
        return Err(Error::Contract(format!(
            "crop {ch}×{cw} does not tile image {}×{}",
            sample.height, sample.width
        )));
    }
    let origins: Vec<(usize, usize)> = (0..sample.height / ch)
        .flat_map(|ty| (0..sample.width / cw).map(move |tx| (ty * ch, tx * cw)))
        .collect();
    crops_at(sample, &origins, ch, cw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub seed: u64,
    pub domain: String,
    pub split: Split,
}

const MANIFEST_HEADER: &str = "# mmdlora manifest v1: seed domain split";

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&format!("{} {} {}\n", r.seed, r.domain, r.split.as_str()));
    }
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            offset: start,
            message: m.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [seed, domain, split] = fields[..] else {
            return Err(bad("expected `seed domain split`"));
        };
        let seed = seed.parse().map_err(|_| bad("seed is not an unsigned integer"))?;
        transform_chain(domain).map_err(|_| bad("unknown domain"))?;
        let split = match split {
            "train" => Split::Train,
            "eval" => Split::Eval,
            _ => return Err(bad("split must be train or eval")),
        };
        out.push(ManifestRecord {
            seed,
            domain: domain.to_string(),
            split,
        });
    }
    Ok(out)
}

const DUMP_MAGIC: &[u8; 4] = b"MMDS";

/// Little-endian dump: magic, version, H, W, C, seed, label, image f64s, depth f64s.
pub fn dump_sample(path: &Path, sample: &SceneSample) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DUMP_MAGIC);
    for v in [1u32, sample.height as u32, sample.width as u32, sample.channels as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&sample.seed.to_le_bytes());
    buf.extend_from_slice(&(sample.domain.len() as u32).to_le_bytes());
    buf.extend_from_slice(sample.domain.as_bytes());
    for v in sample.image.iter().chain(&sample.depth) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(&buf).map_err(|e| Error::file(path, e))
}

pub fn load_sample(path: &Path) -> Result<SceneSample> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or(Error::Parse {
            offset: pos,
            message: "truncated sample dump".into(),
        })?;
        pos += n;
        Ok(s)
    };
    if take(4)? != DUMP_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let mut u32s = [0u32; 4];
    for v in u32s.iter_mut() {
        *v = u32::from_le_bytes(take(4)?.try_into().unwrap());
    }
    let [version, h, w, c] = u32s.map(|v| v as usize);
    if version != 1 {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported dump version {version}"),
        });
    }
    let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let domain = String::from_utf8_lossy(take(len)?).into_owned();
    let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|_| Ok(f64::from_le_bytes(take(8)?.try_into().unwrap())))
            .collect()
    };
    let image = read_f64s(h * w * c)?;
    let depth = read_f64s(h * w)?;
    Ok(SceneSample {
        height: h,
        width: w,
        channels: c,
        image,
        depth,
        domain,
        seed,
    })
}
