//! Image resampling, HR/LR pair construction, and dataset management.
//!
//! The training pipeline consumes `SamplePair`s: a scaled wavelet packet of the
//! normalized HR image (`x0`), the matching packet of the bicubic-upsampled LR
//! image (`x_lr`), and both pixel-space images in `[-1, 1]`. All resampling in
//! this crate goes through [`bicubic_resample`] so that pairs are reproducible
//! bit-for-bit across runs and platforms.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::wavelet::{dwt2d, idwt2d, WaveletPacket};

/// Catmull-Rom cubic kernel (a = -0.5). Support is |x| < 2; exactly zero at
/// integer offsets other than 0, so same-size resampling is the identity.
fn catmull_rom(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        A * (((x - 5.0) * x + 8.0) * x - 4.0)
    } else {
        0.0
    }
}

/// Per-output-position taps for one axis: source indices (edge-clamped) and
/// weights normalized to sum to 1.
fn plan_axis(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = in_len as f64 / out_len as f64;
    // Downscaling widens the kernel by the scale ratio (antialias); upscaling
    // uses the plain 4-tap kernel.
    let kernel_scale = ratio.max(1.0);
    let support = 2.0 * kernel_scale;
    let mut plans = Vec::with_capacity(out_len);
    for d in 0..out_len {
        let center = (d as f64 + 0.5) * ratio - 0.5;
        let lo = (center - support).ceil() as isize;
        let hi = (center + support).floor() as isize;
        let mut taps: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1).max(0) as usize);
        let mut sum = 0.0f64;
        for i in lo..=hi {
            let w = catmull_rom((i as f64 - center) / kernel_scale);
            if w == 0.0 {
                continue;
            }
            let idx = i.clamp(0, in_len as isize - 1) as usize;
            sum += w;
            taps.push((idx, w));
        }
        debug_assert!(sum > 0.0);
        for (_, w) in &mut taps {
            *w /= sum;
        }
        plans.push(taps);
    }
    plans
}

/// Separable bicubic resampling of a CHW image. Weights at each output
/// position sum to 1, so constant images stay constant and same-size calls
/// return the input bitwise. Edges are clamp-extended. Downscaling is
/// antialiased. Values may overshoot the input range near sharp transitions
/// (callers that need a range clamp afterwards).
pub fn bicubic_resample(
    image: &[f32],
    channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f32>> {
    if channels == 0 || in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape("bicubic_resample: dimensions must be positive".into()));
    }
    if image.len() != channels * in_h * in_w {
        return Err(Error::Shape(format!(
            "bicubic_resample: data length {} does not match {}x{}x{}",
            image.len(),
            channels,
            in_h,
            in_w
        )));
    }
    let rows = plan_axis(in_h, out_h);
    let cols = plan_axis(in_w, out_w);

    // Vertical pass in f64, then horizontal; single final rounding to f32.
    let mut tmp = vec![0.0f64; channels * out_h * in_w];
    for c in 0..channels {
        let src = &image[c * in_h * in_w..(c + 1) * in_h * in_w];
        let dst = &mut tmp[c * out_h * in_w..(c + 1) * out_h * in_w];
        for (y, taps) in rows.iter().enumerate() {
            for x in 0..in_w {
                let mut acc = 0.0f64;
                for &(sy, w) in taps {
                    acc += w * src[sy * in_w + x] as f64;
                }
                dst[y * in_w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; channels * out_h * out_w];
    for c in 0..channels {
        let src = &tmp[c * out_h * in_w..(c + 1) * out_h * in_w];
        let dst = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for y in 0..out_h {
            for (x, taps) in cols.iter().enumerate() {
                let mut acc = 0.0f64;
                for &(sx, w) in taps {
                    acc += w * src[y * in_w + sx];
                }
                dst[y * out_w + x] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Map `[0, 1]` pixels to the `[-1, 1]` model range.
pub fn normalize(image: &[f32]) -> Vec<f32> {
    image.iter().map(|&v| 2.0 * v - 1.0).collect()
}

/// Map `[-1, 1]` model values back to `[0, 1]` pixels, clamping overshoot.
pub fn denormalize(image: &[f32]) -> Vec<f32> {
    image.iter().map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect()
}

/// One training/evaluation example.
///
/// Invariants: `idwt2d(&x0)` reproduces `hr_image` (up to wavelet round-trip
/// error), and `x_lr` is a pure function of `lr_image` — recomputing it via
/// [`pack_lr`] gives bitwise identical coefficients.
#[derive(Clone)]
pub struct SamplePair {
    /// Scaled wavelet packet of the normalized HR image.
    pub x0: WaveletPacket,
    /// Scaled wavelet packet of the bicubic-upsampled normalized LR image.
    pub x_lr: WaveletPacket,
    /// HR pixels, CHW, in `[-1, 1]`.
    pub hr_image: Vec<f32>,
    /// LR pixels, CHW, in `[-1, 1]`, side = HR side / scale_factor.
    pub lr_image: Vec<f32>,
    pub channels: usize,
    pub hr_h: usize,
    pub hr_w: usize,
    pub scale_factor: usize,
    pub id: String,
}

/// Upsample a `[-1, 1]` LR image to HR size and take its scaled wavelet
/// packet. This is the canonical `lr_image -> x_lr` path used both when
/// building pairs and when conditioning on an externally supplied LR image.
pub fn pack_lr(
    lr_image: &[f32],
    channels: usize,
    lr_h: usize,
    lr_w: usize,
    hr_h: usize,
    hr_w: usize,
) -> Result<WaveletPacket> {
    let up = bicubic_resample(lr_image, channels, lr_h, lr_w, hr_h, hr_w)?;
    dwt2d(&up, channels, hr_h, hr_w, true)
}

/// Build a training pair from an HR image in `[0, 1]`.
///
/// The LR image is an antialiased bicubic downscale by `scale_factor`,
/// clamped back to `[0, 1]` (bicubic ringing can overshoot), then mapped to
/// `[-1, 1]`. Both wavelet packets are scaled so coefficients stay in
/// `[-1, 1]`.
pub fn make_pair(
    hr: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    scale_factor: usize,
    id: &str,
) -> Result<SamplePair> {
    if scale_factor == 0 {
        return Err(Error::Config("make_pair: scale_factor must be positive".into()));
    }
    if h == 0 || w == 0 || h % (2 * scale_factor) != 0 || w % (2 * scale_factor) != 0 {
        return Err(Error::Shape(format!(
            "make_pair: image size {h}x{w} must be divisible by 2*scale_factor = {}",
            2 * scale_factor
        )));
    }
    if hr.len() != channels * h * w {
        return Err(Error::Shape(format!(
            "make_pair: data length {} does not match {channels}x{h}x{w}",
            hr.len()
        )));
    }
    if let Some(v) = hr.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
        return Err(Error::Dataset(format!(
            "make_pair: pixel value {v} outside [0, 1] in image '{id}'"
        )));
    }
    let lr_h = h / scale_factor;
    let lr_w = w / scale_factor;
    let lr01: Vec<f32> = bicubic_resample(hr, channels, h, w, lr_h, lr_w)?
        .iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    let lr_image = normalize(&lr01);
    let hr_image = normalize(hr);
    let x0 = dwt2d(&hr_image, channels, h, w, true)?;
    let x_lr = pack_lr(&lr_image, channels, lr_h, lr_w, h, w)?;
    Ok(SamplePair {
        x0,
        x_lr,
        hr_image,
        lr_image,
        channels,
        hr_h: h,
        hr_w: w,
        scale_factor,
        id: id.to_string(),
    })
}

/// Quantize a CHW RGB image in `[-1, 1]` to 8-bit: `(v + 1) / 2`, clamp to
/// `[0, 1]`, round half away from zero. Zero input maps to mid-gray 128.
pub fn image_from_chw(data: &[f32], h: usize, w: usize) -> Result<image::RgbImage> {
    if data.len() != 3 * h * w {
        return Err(Error::Shape(format!(
            "image_from_chw: data length {} does not match 3x{h}x{w}",
            data.len()
        )));
    }
    let plane = h * w;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for (c, out) in px.iter_mut().enumerate() {
                let v = ((data[c * plane + y * w + x] + 1.0) * 0.5).clamp(0.0, 1.0);
                *out = (v * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

/// Invert a 12-channel (RGB source) wavelet packet to an 8-bit image via
/// [`image_from_chw`].
pub fn to_image(packet: &WaveletPacket) -> Result<image::RgbImage> {
    if packet.channels() != 12 {
        return Err(Error::Shape(format!(
            "to_image: expected a 12-channel packet (RGB source), got {}",
            packet.channels()
        )));
    }
    let flat = idwt2d(packet)?;
    image_from_chw(&flat, packet.height() * 2, packet.width() * 2)
}

/// Decode an image file to CHW f32 RGB in `[0, 1]`.
pub fn load_image_chw(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[c * h * w + y * w + x] = px[c] as f32 / 255.0;
            }
        }
    }
    Ok((out, h, w))
}

/// Center-crop to a square and resample to `target`x`target`, clamping the
/// resampled values back to `[0, 1]`.
pub fn center_crop_resize(
    image: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    target: usize,
) -> Result<Vec<f32>> {
    if target == 0 {
        return Err(Error::Config("center_crop_resize: target must be positive".into()));
    }
    let side = h.min(w);
    if side == 0 {
        return Err(Error::Shape("center_crop_resize: empty image".into()));
    }
    let y0 = (h - side) / 2;
    let x0 = (w - side) / 2;
    let mut crop = vec![0.0f32; channels * side * side];
    for c in 0..channels {
        for y in 0..side {
            let src = &image[c * h * w + (y0 + y) * w + x0..];
            crop[c * side * side + y * side..c * side * side + (y + 1) * side]
                .copy_from_slice(&src[..side]);
        }
    }
    let out = bicubic_resample(&crop, channels, side, side, target, target)?;
    Ok(out.iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Stream tag for the train/test permutation, distinct from epoch tags 0, 1,
/// 2, ... used for shuffling.
const SPLIT_TAG: u64 = u64::MAX;

fn is_image_file(name: &str) -> bool {
    let lower = name.to_ascii_lowercase();
    lower.ends_with(".png") || lower.ends_with(".jpg") || lower.ends_with(".jpeg")
}

fn file_list_digest(files: &[String]) -> String {
    let mut hasher = Sha256::new();
    for f in files {
        hasher.update(f.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Frozen description of a dataset: the sorted file list (with an integrity
/// digest), the split seed/ratio, and the preprocessing geometry. Everything
/// downstream (splits, epochs, pairs) is a deterministic function of this.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Sorted file names relative to `root`.
    pub files: Vec<String>,
    pub split_seed: u64,
    pub train_ratio: f64,
    /// HR images are center-cropped square and resampled to this side.
    pub target_size: usize,
    pub scale_factor: usize,
    /// SHA-256 over the newline-joined file list.
    pub files_sha256: String,
}

impl DatasetManifest {
    /// Scan `root` (non-recursive) for .png/.jpg/.jpeg files. An empty
    /// directory is fatal.
    pub fn scan(
        root: &Path,
        split_seed: u64,
        train_ratio: f64,
        target_size: usize,
        scale_factor: usize,
    ) -> Result<DatasetManifest> {
        if !(0.0..=1.0).contains(&train_ratio) {
            return Err(Error::Config(format!(
                "train_ratio {train_ratio} outside [0, 1]"
            )));
        }
        if target_size == 0 || target_size % (2 * scale_factor.max(1)) != 0 {
            return Err(Error::Config(format!(
                "target_size {target_size} must be a positive multiple of 2*scale_factor = {}",
                2 * scale_factor.max(1)
            )));
        }
        let mut files = Vec::new();
        for entry in fs::read_dir(root)? {
            let entry = entry?;
            if !entry.file_type()?.is_file() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            if is_image_file(&name) {
                files.push(name);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!(
                "no image files (.png/.jpg/.jpeg) found in {}",
                root.display()
            )));
        }
        let files_sha256 = file_list_digest(&files);
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            files,
            split_seed,
            train_ratio,
            target_size,
            scale_factor,
            files_sha256,
        })
    }

    /// Deterministic disjoint train/test index lists over `files`.
    /// n_train = max(1, floor(train_ratio * n)); both lists are sorted.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.files.len();
        let perm = rng::NoiseState::permutation(self.split_seed, SPLIT_TAG, n);
        let n_train = ((self.train_ratio * n as f64).floor() as usize).clamp(1, n);
        let mut train: Vec<usize> = perm[..n_train].to_vec();
        let mut test: Vec<usize> = perm[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        (train, test)
    }

    /// Write the manifest as a flat text file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("wavesr-manifest v1\n");
        out.push_str(&format!("root = {}\n", self.root.display()));
        out.push_str(&format!("split_seed = {}\n", self.split_seed));
        out.push_str(&format!("train_ratio = {}\n", self.train_ratio));
        out.push_str(&format!("target_size = {}\n", self.target_size));
        out.push_str(&format!("scale_factor = {}\n", self.scale_factor));
        out.push_str(&format!("files_sha256 = {}\n", self.files_sha256));
        for f in &self.files {
            out.push_str(&format!("file = {f}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Parse a manifest written by [`DatasetManifest::save`], verifying the
    /// file-list digest.
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some("wavesr-manifest v1") => {}
            other => {
                return Err(Error::Dataset(format!(
                    "{}: expected 'wavesr-manifest v1' header, got {other:?}",
                    path.display()
                )))
            }
        }
        let mut root = None;
        let mut split_seed = None;
        let mut train_ratio = None;
        let mut target_size = None;
        let mut scale_factor = None;
        let mut files_sha256 = None;
        let mut files = Vec::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Dataset(format!("{}: malformed line '{line}'", path.display()))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::Dataset(format!("{}: invalid {what} '{value}'", path.display()))
            };
            match key {
                "root" => root = Some(PathBuf::from(value)),
                "split_seed" => {
                    split_seed = Some(value.parse().map_err(|_| bad("split_seed"))?)
                }
                "train_ratio" => {
                    train_ratio = Some(value.parse().map_err(|_| bad("train_ratio"))?)
                }
                "target_size" => {
                    target_size = Some(value.parse().map_err(|_| bad("target_size"))?)
                }
                "scale_factor" => {
                    scale_factor = Some(value.parse().map_err(|_| bad("scale_factor"))?)
                }
                "files_sha256" => files_sha256 = Some(value.to_string()),
                "file" => files.push(value.to_string()),
                other => {
                    return Err(Error::Dataset(format!(
                        "{}: unknown manifest key '{other}'",
                        path.display()
                    )))
                }
            }
        }
        let missing =
            |what: &str| Error::Dataset(format!("{}: missing {what}", path.display()));
        let manifest = DatasetManifest {
            root: root.ok_or_else(|| missing("root"))?,
            files,
            split_seed: split_seed.ok_or_else(|| missing("split_seed"))?,
            train_ratio: train_ratio.ok_or_else(|| missing("train_ratio"))?,
            target_size: target_size.ok_or_else(|| missing("target_size"))?,
            scale_factor: scale_factor.ok_or_else(|| missing("scale_factor"))?,
            files_sha256: files_sha256.ok_or_else(|| missing("files_sha256"))?,
        };
        let actual = file_list_digest(&manifest.files);
        if actual != manifest.files_sha256 {
            return Err(Error::Dataset(format!(
                "{}: file list digest mismatch (manifest {}, actual {actual})",
                path.display(),
                manifest.files_sha256
            )));
        }
        Ok(manifest)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Decoded dataset: every manifest file is decoded and preprocessed once at
/// load; undecodable files are skipped with a warning and recorded in
/// `rejects`. Train/test splits are computed over the decodable files.
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// (id, HR pixels in [0, 1], CHW target_size x target_size).
    images: Vec<(String, Vec<f32>)>,
    rejects: Vec<(String, String)>,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Dataset> {
        let mut images = Vec::new();
        let mut rejects = Vec::new();
        for name in &manifest.files {
            let path = manifest.root.join(name);
            let id = Path::new(name)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| name.clone());
            match load_image_chw(&path) {
                Ok((pixels, h, w)) => {
                    let hr =
                        center_crop_resize(&pixels, 3, h, w, manifest.target_size)?;
                    images.push((id, hr));
                }
                Err(err) => {
                    eprintln!("warning: skipping undecodable image {}: {err}", path.display());
                    rejects.push((name.clone(), err.to_string()));
                }
            }
        }
        if images.is_empty() {
            return Err(Error::Dataset(format!(
                "no decodable images in {} ({} rejected)",
                manifest.root.display(),
                rejects.len()
            )));
        }
        // Split over decodable files only, with the manifest's seed/ratio.
        let n = images.len();
        let perm = rng::NoiseState::permutation(manifest.split_seed, SPLIT_TAG, n);
        let n_train = ((manifest.train_ratio * n as f64).floor() as usize).clamp(1, n);
        let mut train_idx: Vec<usize> = perm[..n_train].to_vec();
        let mut test_idx: Vec<usize> = perm[n_train..].to_vec();
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        Ok(Dataset {
            manifest: manifest.clone(),
            images,
            rejects,
            train_idx,
            test_idx,
        })
    }

    pub fn rejects(&self) -> &[(String, String)] {
        &self.rejects
    }

    pub fn write_rejects(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (name, reason) in &self.rejects {
            out.push_str(&format!("{name}\t{reason}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_idx.len(),
            Split::Test => self.test_idx.len(),
        }
    }

    pub fn is_empty(&self, split: Split) -> bool {
        self.len(split) == 0
    }

    /// Build the pair for position `i` of a split. Pairs are recomputed on
    /// demand; the construction is deterministic.
    pub fn pair(&self, split: Split, i: usize) -> Result<SamplePair> {
        let idx = match split {
            Split::Train => self.train_idx.get(i),
            Split::Test => self.test_idx.get(i),
        }
        .copied()
        .ok_or_else(|| {
            Error::Index(format!("dataset: position {i} out of range for {split:?}"))
        })?;
        let (id, hr) = &self.images[idx];
        make_pair(
            hr,
            3,
            self.manifest.target_size,
            self.manifest.target_size,
            self.manifest.scale_factor,
            id,
        )
    }

    /// Deterministic shuffle of train positions for one epoch.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        rng::NoiseState::permutation(seed, epoch, self.train_idx.len())
    }
}
