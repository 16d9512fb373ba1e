//! Deterministic synthetic data. Image classes share one anatomy (nested
//! soft-edged ellipses) and differ only through acquisition-style
//! corruptions: noise level, blur, and a smooth intensity bias. That keeps
//! class identity in the statistics rather than the content, so likelihood
//! attribution and spectral checks have something honest to find. Also
//! provides 2-D conditional toy densities, grid (de)quantization, and a
//! radially binned power spectrum.

use std::fmt;
use std::path::Path;

use crate::error::{FlowError, Result};
use crate::tensor::{read_ten, write_ten, Rng, Tensor};

/// Acquisition-style corruption settings for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProfile {
    pub label: usize,
    pub noise_std: f64,
    pub blur_sigma: f64,
    /// Peak relative amplitude of the multiplicative bias field; must stay
    /// below 1 so intensities cannot go negative.
    pub bias_amplitude: f64,
    pub seed_offset: u64,
}

impl ClassProfile {
    pub fn new(label: usize, noise_std: f64, blur_sigma: f64, bias_amplitude: f64) -> Self {
        ClassProfile { label, noise_std, blur_sigma, bias_amplitude, seed_offset: label as u64 }
    }

    fn validate(&self, index: usize) -> Result<()> {
        if self.label != index {
            return Err(FlowError::Config(format!(
                "profile {index} is labeled {}; profiles must be labeled 0..K-1 in order",
                self.label
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(FlowError::Config(format!(
                "profile {index}: noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        if !(self.blur_sigma >= 0.0) {
            return Err(FlowError::Config(format!(
                "profile {index}: blur_sigma must be >= 0, got {}",
                self.blur_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.bias_amplitude) {
            return Err(FlowError::Config(format!(
                "profile {index}: bias_amplitude must be in [0,1), got {}",
                self.bias_amplitude
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<SplitTag> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(FlowError::Format(format!("unknown split tag {other:?}"))),
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Labeled sample collection plus the provenance needed to regenerate it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: SplitTag,
    pub meta: Vec<(String, String)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Samples of one class, in dataset order.
    pub fn class_members(&self, label: usize) -> Vec<Tensor> {
        self.images
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| **l == label)
            .map(|(t, _)| t.clone())
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(FlowError::Contract(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if self.num_classes == 0 {
            return Err(FlowError::Contract("dataset needs at least one class".into()));
        }
        let shape = match self.images.first() {
            Some(t) => t.shape().to_vec(),
            None => return Err(FlowError::Contract("dataset has no samples".into())),
        };
        for (i, t) in self.images.iter().enumerate() {
            if t.shape() != shape {
                return Err(FlowError::Dim(format!(
                    "sample {i} has shape {:?}, sample 0 has {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        // Unit range is an image property; 2-D point clouds are exempt.
        if shape.len() >= 2 {
            for (i, t) in self.images.iter().enumerate() {
                if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(FlowError::Contract(format!(
                        "image {i} has values outside [0,1]"
                    )));
                }
            }
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= self.num_classes {
                return Err(FlowError::Contract(format!(
                    "label {l} at position {i} with {} classes",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------ phantom images

/// Nested soft-edged ellipses: (vertical half-axis fraction, horizontal
/// fraction, intensity), composited outside-in over a dim background.
const ELLIPSES: [(f64, f64, f64); 3] =
    [(0.44, 0.40, 0.35), (0.30, 0.26, 0.70), (0.14, 0.12, 0.95)];
const BACKGROUND: f64 = 0.05;

fn base_phantom(h: usize, w: usize, dy: f64, dx: f64) -> Vec<f64> {
    let cy = (h as f64 - 1.0) / 2.0 + dy;
    let cx = (w as f64 - 1.0) / 2.0 + dx;
    let mut img = vec![BACKGROUND; h * w];
    for (ry_frac, rx_frac, value) in ELLIPSES {
        let ry = ry_frac * h as f64;
        let rx = rx_frac * w as f64;
        let soft = ry.min(rx);
        for i in 0..h {
            for j in 0..w {
                let ny = (i as f64 - cy) / ry;
                let nx = (j as f64 - cx) / rx;
                let r = (ny * ny + nx * nx).sqrt();
                // (1 - r) * soft approximates the signed distance in pixels;
                // the ramp keeps edges smooth at any resolution.
                let cov = ((1.0 - r) * soft / 1.2 + 0.5).clamp(0.0, 1.0);
                let px = &mut img[i * w + j];
                *px = *px * (1.0 - cov) + value * cov;
            }
        }
    }
    img
}

/// Smooth per-class multiplicative field: a product of low-frequency
/// cosines whose frequencies and phases are fixed by the class label.
fn bias_field(label: usize, amplitude: f64, h: usize, w: usize) -> Vec<f64> {
    let fy = (1 + label % 2) as f64;
    let fx = (1 + (label / 2) % 2) as f64;
    let phase_y = 0.7 * label as f64;
    let phase_x = 1.3 * label as f64;
    let tau = std::f64::consts::TAU;
    let mut field = Vec::with_capacity(h * w);
    for i in 0..h {
        let cy = (tau * fy * i as f64 / h as f64 + phase_y).cos();
        for j in 0..w {
            let cx = (tau * fx * j as f64 / w as f64 + phase_x).cos();
            field.push(amplitude * cy * cx);
        }
    }
    field
}

/// Separable Gaussian blur, kernel truncated at radius ceil(3 sigma) and
/// renormalized over the in-bounds taps at each position.
fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let pass = |src: &[f64], len: usize, stride: usize, rows: usize, row_stride: usize| {
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            for i in 0..len {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (ti, wt) in weights.iter().enumerate() {
                    let t = ti as isize - radius;
                    let p = i as isize + t;
                    if p >= 0 && (p as usize) < len {
                        acc += wt * src[r * row_stride + p as usize * stride];
                        wsum += wt;
                    }
                }
                out[r * row_stride + i * stride] = acc / wsum;
            }
        }
        out
    };
    let horizontal = pass(img, w, 1, h, w);
    // Vertical pass: walk columns; rows are indexed by the inner offset.
    let mut out = vec![0.0; img.len()];
    for j in 0..w {
        for i in 0..h {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (ti, wt) in weights.iter().enumerate() {
                let t = ti as isize - radius;
                let p = i as isize + t;
                if p >= 0 && (p as usize) < h {
                    acc += wt * horizontal[p as usize * w + j];
                    wsum += wt;
                }
            }
            out[i * w + j] = acc / wsum;
        }
    }
    out
}

/// Class-conditional phantom images: one shared anatomy with per-sample
/// sub-pixel-to-2px shift jitter, corrupted per class by bias field, blur,
/// and noise, clipped to [0,1]. Bitwise-deterministic under the rng.
pub fn gen_phantom_dataset(
    profiles: &[ClassProfile],
    n_per_class: usize,
    h: usize,
    w: usize,
    rng: &Rng,
) -> Result<Dataset> {
    if profiles.is_empty() {
        return Err(FlowError::Contract("at least one class profile is required".into()));
    }
    if n_per_class == 0 {
        return Err(FlowError::Contract("n_per_class must be at least 1".into()));
    }
    if h < 4 || w < 4 {
        return Err(FlowError::Config(format!("image size {h}x{w} is too small")));
    }
    for (i, p) in profiles.iter().enumerate() {
        p.validate(i)?;
    }
    let mut images = Vec::with_capacity(profiles.len() * n_per_class);
    let mut labels = Vec::with_capacity(profiles.len() * n_per_class);
    for (k, profile) in profiles.iter().enumerate() {
        let fields = bias_field(k, profile.bias_amplitude, h, w);
        for i in 0..n_per_class {
            let mut srng =
                rng.derive(0xDA7A_0000 + k as u64).derive(profile.seed_offset).derive(i as u64);
            let dy = srng.range(-2.0, 2.0);
            let dx = srng.range(-2.0, 2.0);
            let mut img = base_phantom(h, w, dy, dx);
            for (px, bias) in img.iter_mut().zip(&fields) {
                *px *= 1.0 + bias;
            }
            if profile.blur_sigma > 0.0 {
                img = gaussian_blur(&img, h, w, profile.blur_sigma);
            }
            for px in &mut img {
                *px = (*px + profile.noise_std * srng.normal()).clamp(0.0, 1.0);
            }
            images.push(Tensor::new(vec![1, h, w], img)?);
            labels.push(k);
        }
    }
    let mut meta = vec![
        ("generator".into(), "ellipse-phantom".into()),
        ("seed".into(), rng.seed().to_string()),
        ("n_per_class".into(), n_per_class.to_string()),
    ];
    for (k, p) in profiles.iter().enumerate() {
        meta.push((
            format!("profile{k}"),
            format!(
                "noise_std={} blur_sigma={} bias_amplitude={} seed_offset={}",
                p.noise_std, p.blur_sigma, p.bias_amplitude, p.seed_offset
            ),
        ));
    }
    let ds = Dataset {
        images,
        labels,
        num_classes: profiles.len(),
        split: SplitTag::Train,
        meta,
    };
    ds.validate()?;
    Ok(ds)
}

// ------------------------------------------------------------- 2-D toy data

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    /// K unit-covariance Gaussians with means on a circle of radius
    /// `separation`.
    ConditionalGaussians,
    /// The classic interleaved half-circles, one class per moon,
    /// with fixed point noise 0.05. `separation` is ignored.
    TwoMoons,
}

impl ToyKind {
    pub fn parse(s: &str) -> Result<ToyKind> {
        match s {
            "conditional-gaussians" => Ok(ToyKind::ConditionalGaussians),
            "two-moons-conditional" => Ok(ToyKind::TwoMoons),
            other => Err(FlowError::Config(format!("unknown toy dataset kind {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ToyKind::ConditionalGaussians => "conditional-gaussians",
            ToyKind::TwoMoons => "two-moons-conditional",
        }
    }
}

const MOON_NOISE: f64 = 0.05;

/// 2-D labeled point clouds (each sample a rank-1 tensor of shape [2]).
pub fn gen_toy2d(
    kind: ToyKind,
    num_classes: usize,
    n_per_class: usize,
    separation: f64,
    rng: &Rng,
) -> Result<Dataset> {
    if num_classes == 0 {
        return Err(FlowError::Contract("need at least one class".into()));
    }
    if n_per_class == 0 {
        return Err(FlowError::Contract("n_per_class must be at least 1".into()));
    }
    let mut images = Vec::with_capacity(num_classes * n_per_class);
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    match kind {
        ToyKind::ConditionalGaussians => {
            if !(separation >= 0.0) {
                return Err(FlowError::Config(format!(
                    "separation must be >= 0, got {separation}"
                )));
            }
            for k in 0..num_classes {
                let angle = std::f64::consts::TAU * k as f64 / num_classes as f64;
                let mu = [separation * angle.cos(), separation * angle.sin()];
                let mut srng = rng.derive(0x70_0000 + k as u64);
                for _ in 0..n_per_class {
                    let p = vec![mu[0] + srng.normal(), mu[1] + srng.normal()];
                    images.push(Tensor::new(vec![2], p)?);
                    labels.push(k);
                }
            }
        }
        ToyKind::TwoMoons => {
            if num_classes != 2 {
                return Err(FlowError::Config(format!(
                    "the two-moons dataset has exactly 2 classes, got {num_classes}"
                )));
            }
            for k in 0..2usize {
                let mut srng = rng.derive(0x70_0000 + k as u64);
                for _ in 0..n_per_class {
                    let t = srng.uniform() * std::f64::consts::PI;
                    let (x, y) = if k == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    let p = vec![x + MOON_NOISE * srng.normal(), y + MOON_NOISE * srng.normal()];
                    images.push(Tensor::new(vec![2], p)?);
                    labels.push(k);
                }
            }
        }
    }
    let meta = vec![
        ("generator".into(), kind.as_str().into()),
        ("seed".into(), rng.seed().to_string()),
        ("n_per_class".into(), n_per_class.to_string()),
        ("separation".into(), separation.to_string()),
    ];
    let ds = Dataset { images, labels, num_classes, split: SplitTag::Train, meta };
    ds.validate()?;
    Ok(ds)
}

// ----------------------------------------------------------- (de)quantization

/// Snap values in [0,1] to the {0,...,2^bits - 1}/2^bits grid.
pub fn quantize_to_grid(images: &Tensor, bits: u32) -> Result<Tensor> {
    check_bits(bits)?;
    let levels = (1u64 << bits) as f64;
    if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(FlowError::Contract("quantization input must lie in [0,1]".into()));
    }
    let data = images
        .data()
        .iter()
        .map(|&v| ((v * levels).floor().min(levels - 1.0)) / levels)
        .collect();
    Tensor::new(images.shape().to_vec(), data)
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=16).contains(&bits) {
        return Err(FlowError::Contract(format!("bit depth must be 1..=16, got {bits}")));
    }
    Ok(())
}

/// Spread grid values v/2^bits uniformly over [v/2^bits, (v+1)/2^bits), so
/// discrete pixels become a continuous density. Flooring output * 2^bits
/// recovers the grid exactly.
pub fn dequantize(images: &Tensor, bits: u32, rng: &mut Rng) -> Result<Tensor> {
    check_bits(bits)?;
    let levels = (1u64 << bits) as f64;
    let mut data = Vec::with_capacity(images.len());
    for (i, &v) in images.data().iter().enumerate() {
        let scaled = v * levels;
        let snapped = scaled.round();
        if (scaled - snapped).abs() > 1e-9 || !(0.0..levels).contains(&snapped) {
            return Err(FlowError::Contract(format!(
                "element {i} ({v}) is not on the {}-level grid",
                levels as u64
            )));
        }
        data.push((snapped + rng.uniform()) / levels);
    }
    Tensor::new(images.shape().to_vec(), data)
}

// ------------------------------------------------------------ power spectrum

/// Mean power spectrum over images, binned by integer radial frequency.
/// Bin r collects |DFT|^2 / (H*W) over frequencies with floor(|f|) = r,
/// averaged per bin and over images; channels are averaged.
pub fn mean_power_spectrum(images: &[Tensor]) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(FlowError::Contract("spectrum of an empty image set".into()));
    }
    let (c, h, w) = match *images[0].shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        ref s => {
            return Err(FlowError::Dim(format!("spectrum wants images, got shape {s:?}")))
        }
    };
    let n_bins = {
        let fy = h / 2;
        let fx = w / 2;
        (((fy * fy + fx * fx) as f64).sqrt().floor() as usize) + 1
    };
    let mut bins = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    let tau = std::f64::consts::TAU;
    for img in images {
        if img.shape() != images[0].shape() {
            return Err(FlowError::Dim("spectrum images must share a shape".into()));
        }
        for ch in 0..c {
            let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
            for u in 0..h {
                for v in 0..w {
                    let mut re = 0.0;
                    let mut im = 0.0;
                    for i in 0..h {
                        let ang_i = tau * (u * i) as f64 / h as f64;
                        for j in 0..w {
                            let ang = ang_i + tau * (v * j) as f64 / w as f64;
                            let x = plane[i * w + j];
                            re += x * ang.cos();
                            im -= x * ang.sin();
                        }
                    }
                    let power = (re * re + im * im) / (h * w) as f64;
                    let fy = u.min(h - u) as f64;
                    let fx = v.min(w - v) as f64;
                    let r = (fy * fy + fx * fx).sqrt().floor() as usize;
                    if r < n_bins {
                        bins[r] += power;
                        counts[r] += 1;
                    }
                }
            }
        }
    }
    for (b, &cnt) in bins.iter_mut().zip(&counts) {
        if cnt > 0 {
            *b /= cnt as f64;
        }
    }
    Ok(bins)
}

// ------------------------------------------------------------- serialization

/// Write a dataset as a directory: `images.ten` (samples stacked along a
/// new leading axis), `labels.ten` (labels as floats), `meta.txt`
/// (key=value provenance lines).
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    std::fs::create_dir_all(dir)?;
    let sample_shape = ds.images[0].shape().to_vec();
    let mut shape = vec![ds.images.len()];
    shape.extend_from_slice(&sample_shape);
    let mut data = Vec::with_capacity(ds.images.len() * ds.images[0].len());
    for img in &ds.images {
        data.extend_from_slice(img.data());
    }
    write_ten(&dir.join("images.ten"), &Tensor::new(shape, data)?)?;
    let labels: Vec<f64> = ds.labels.iter().map(|&l| l as f64).collect();
    write_ten(&dir.join("labels.ten"), &Tensor::new(vec![labels.len()], labels)?)?;
    let mut meta = String::new();
    meta.push_str(&format!("split={}\n", ds.split));
    meta.push_str(&format!("num_classes={}\n", ds.num_classes));
    for (k, v) in &ds.meta {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(FlowError::Contract(format!("meta key/value {k:?} is not line-safe")));
        }
        meta.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let stacked = read_ten(&dir.join("images.ten"))?;
    if stacked.rank() < 2 {
        return Err(FlowError::Format(format!(
            "stacked images must have rank >= 2, got {:?}",
            stacked.shape()
        )));
    }
    let n = stacked.shape()[0];
    let sample_shape: Vec<usize> = stacked.shape()[1..].to_vec();
    let sample_len: usize = sample_shape.iter().product();
    let images: Vec<Tensor> = (0..n)
        .map(|i| {
            Tensor::new(
                sample_shape.clone(),
                stacked.data()[i * sample_len..(i + 1) * sample_len].to_vec(),
            )
        })
        .collect::<Result<_>>()?;

    let label_t = read_ten(&dir.join("labels.ten"))?;
    if label_t.rank() != 1 || label_t.len() != n {
        return Err(FlowError::Format(format!(
            "labels must be a rank-1 tensor of length {n}, got {:?}",
            label_t.shape()
        )));
    }
    let labels: Vec<usize> = label_t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.fract() != 0.0 || v < 0.0 {
                Err(FlowError::Format(format!("label {i} is {v}, not a class id")))
            } else {
                Ok(v as usize)
            }
        })
        .collect::<Result<_>>()?;

    let meta_text = std::fs::read_to_string(dir.join("meta.txt"))?;
    let mut split = None;
    let mut num_classes = None;
    let mut meta = Vec::new();
    for (ln, line) in meta_text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            FlowError::Format(format!("meta.txt line {}: missing '='", ln + 1))
        })?;
        match k {
            "split" => split = Some(SplitTag::parse(v)?),
            "num_classes" => {
                num_classes = Some(v.parse::<usize>().map_err(|_| {
                    FlowError::Format(format!("meta.txt: bad num_classes {v:?}"))
                })?)
            }
            _ => meta.push((k.to_string(), v.to_string())),
        }
    }
    let num_classes = num_classes
        .ok_or_else(|| FlowError::Format("meta.txt is missing num_classes".into()))?;
    let ds = Dataset {
        images,
        labels,
        num_classes,
        split: split.unwrap_or(SplitTag::Train),
        meta,
    };
    ds.validate()?;
    Ok(ds)
}
