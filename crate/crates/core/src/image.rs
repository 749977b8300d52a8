//! Image loading (PPM), bilinear resizing and training-time augmentation.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

/// `H×W×3` image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Input("image has zero extent".into()));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{height}×{width}×3 image cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Reads a plain (`P3`) or binary (`P6`) portable pixmap into `[0, 1]`.
    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_ppm(&bytes)
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut header = Vec::with_capacity(4);
        while header.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            header.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_owned());
        }
        let magic = header[0].as_str();
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PPM header field `{s}`")))
        };
        let (width, height, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
        if width == 0 || height == 0 {
            return Err(Error::Input("PPM has zero extent".into()));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Format(format!("PPM maxval {maxval} out of range")));
        }
        let n = width * height * 3;
        let maxval_f = maxval as f32;
        let data: Vec<f32> = match magic {
            "P6" => {
                let body = &bytes[(pos + 1).min(bytes.len())..];
                if maxval < 256 {
                    if body.len() < n {
                        return Err(Error::Corrupt("truncated PPM pixel data".into()));
                    }
                    body[..n].iter().map(|&b| b as f32 / maxval_f).collect()
                } else {
                    if body.len() < 2 * n {
                        return Err(Error::Corrupt("truncated PPM pixel data".into()));
                    }
                    body[..2 * n]
                        .chunks_exact(2)
                        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / maxval_f)
                        .collect()
                }
            }
            "P3" => {
                let text = std::str::from_utf8(&bytes[pos..])
                    .map_err(|_| Error::Format("plain PPM body is not ASCII".into()))?;
                let vals: Vec<f32> = text
                    .split_ascii_whitespace()
                    .take(n)
                    .map(|s| num(s).map(|v| v as f32 / maxval_f))
                    .collect::<Result<_>>()?;
                if vals.len() < n {
                    return Err(Error::Corrupt("truncated PPM pixel data".into()));
                }
                vals
            }
            other => return Err(Error::Format(format!("unsupported pixmap magic `{other}`"))),
        };
        Self::new(height, width, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Binary 8-bit PPM encoding.
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize(img: &Image, target: (usize, usize)) -> Result<Image> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Input("resize target has zero extent".into()));
    }
    if (img.height, img.width) == target {
        return Ok(img.clone());
    }
    let axis = |src: usize, dst: usize, i: usize| -> (usize, usize, f32) {
        let pos = ((i as f32 + 0.5) * src as f32 / dst as f32 - 0.5).clamp(0.0, (src - 1) as f32);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f32)
    };
    let mut data = Vec::with_capacity(th * tw * 3);
    for y in 0..th {
        let (y0, y1, fy) = axis(img.height, th, y);
        for x in 0..tw {
            let (x0, x1, fx) = axis(img.width, tw, x);
            let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bottom = c[ch] + (d[ch] - c[ch]) * fx;
                data.push((top + (bottom - top) * fy).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(th, tw, data)
}

/// Per-channel normalization constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl ChannelStats {
    /// Mean and population standard deviation over every pixel of `images`.
    pub fn compute(images: &[Image]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("no images to compute channel statistics".into()));
        }
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for img in images {
            for px in img.data.chunks_exact(3) {
                for c in 0..3 {
                    sum[c] += px[c] as f64;
                    sq[c] += (px[c] as f64).powi(2);
                }
            }
            count += img.height * img.width;
        }
        let n = count as f64;
        let mut stats = Self::default();
        for c in 0..3 {
            let mean = sum[c] / n;
            stats.mean[c] = mean as f32;
            stats.std[c] = ((sq[c] / n - mean * mean).max(0.0).sqrt() as f32).max(1e-6);
        }
        Ok(stats)
    }

    /// `mean=r,g,b` / `std=r,g,b` lines.
    pub fn to_text(&self) -> String {
        let join = |v: [f32; 3]| v.map(|x| x.to_string()).join(",");
        format!("mean={}\nstd={}\n", join(self.mean), join(self.std))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut stats = Self::default();
        let (mut seen_mean, mut seen_std) = (false, false);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad stats line `{line}`")))?;
            let vals: Vec<f32> = value
                .split(',')
                .map(|s| s.trim().parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("bad stats values `{value}`")))?;
            let arr: [f32; 3] = vals
                .try_into()
                .map_err(|_| Error::Format("stats need exactly three channels".into()))?;
            match key.trim() {
                "mean" => (stats.mean, seen_mean) = (arr, true),
                "std" => (stats.std, seen_std) = (arr, true),
                other => return Err(Error::Format(format!("unknown stats key `{other}`"))),
            }
        }
        if !(seen_mean && seen_std) {
            return Err(Error::Format("stats file needs mean and std".into()));
        }
        if stats.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Format("stats std must be positive".into()));
        }
        Ok(stats)
    }
}

/// Training-time augmentation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub pad: usize,
    pub hflip_prob: f64,
    pub stats: ChannelStats,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            pad: 10,
            hflip_prob: 0.5,
            stats: ChannelStats::default(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!(
                "flip probability {} outside [0, 1]",
                self.hflip_prob
            )));
        }
        if self.stats.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

pub fn normalize(img: &Image, stats: &ChannelStats) -> Image {
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - stats.mean[i % 3]) / stats.std[i % 3])
        .collect();
    Image { data, ..*img }
}

pub fn denormalize(img: &Image, stats: &ChannelStats) -> Image {
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| v * stats.std[i % 3] + stats.mean[i % 3])
        .collect();
    Image { data, ..*img }
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            out.set_pixel(y, img.width - 1 - x, img.pixel(y, x));
        }
    }
    out
}

/// Zero-pads by `pad` on all sides and crops the original extent at
/// `(top, left)` of the padded canvas.
pub fn pad_crop(img: &Image, pad: usize, top: usize, left: usize) -> Result<Image> {
    if top > 2 * pad || left > 2 * pad {
        return Err(Error::Contract(format!(
            "crop origin ({top}, {left}) outside padded canvas"
        )));
    }
    let mut out = Image::filled(img.height, img.width, [0.0; 3]);
    for y in 0..img.height {
        let sy = (y + top) as isize - pad as isize;
        if sy < 0 || sy >= img.height as isize {
            continue;
        }
        for x in 0..img.width {
            let sx = (x + left) as isize - pad as isize;
            if sx < 0 || sx >= img.width as isize {
                continue;
            }
            out.set_pixel(y, x, img.pixel(sy as usize, sx as usize));
        }
    }
    Ok(out)
}

/// Choices drawn for one augmented sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

pub fn draw_augment<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> AugmentDraw {
    AugmentDraw {
        top: rng.gen_range(0..=2 * cfg.pad),
        left: rng.gen_range(0..=2 * cfg.pad),
        flip: rng.gen_bool(cfg.hflip_prob),
    }
}

/// Pad + random crop, random horizontal flip, then per-channel normalization.
pub fn augment<R: Rng>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Result<Image> {
    let draw = draw_augment(cfg, rng);
    apply_augment(img, cfg, draw)
}

pub fn apply_augment(img: &Image, cfg: &AugmentConfig, draw: AugmentDraw) -> Result<Image> {
    let cropped = pad_crop(img, cfg.pad, draw.top, draw.left)?;
    let flipped = if draw.flip { hflip(&cropped) } else { cropped };
    Ok(normalize(&flipped, &cfg.stats))
}

/// Stacks equally sized images into an `N×H×W×3` tensor.
pub fn stack(images: &[Image]) -> Result<Tensor<f32>> {
    let Some(first) = images.first() else {
        return Err(Error::Input("empty image batch".into()));
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Dimension("images in a batch must share a size".into()));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), h, w, 3], data)
}

/// Augments a batch in parallel; sample `i` draws from its own substream
/// keyed by `(epoch, keys[i])`, so worker count never changes the result.
pub fn augment_batch(
    images: &[&Image],
    keys: &[u64],
    cfg: &AugmentConfig,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Image>> {
    images
        .par_iter()
        .zip(keys.par_iter())
        .map(|(img, &key)| {
            let mut rng = substream(seed, "augment", &[epoch, key]);
            augment(img, cfg, &mut rng)
        })
        .collect()
}
