//! PNG image I/O, MATLAB-style bicubic resampling, LR set synthesis, patch
//! sampling and augmentation.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{cast, Scalar, Tensor};

/// 8-bit interleaved image with one or three channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::config(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::config(format!(
                "image data holds {} samples, {width}x{height}x{channels} needs {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        ImageBuffer::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let c = self.channels;
        &self.data[(y * self.width + x) * c..][..c]
    }

    /// Sub-rectangle with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<ImageBuffer> {
        if x + width > self.width || y + height > self.height {
            return Err(Error::config(format!(
                "crop {width}x{height}+{x}+{y} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for row in y..y + height {
            data.extend_from_slice(&self.data[(row * self.width + x) * c..][..width * c]);
        }
        ImageBuffer::new(width, height, c, data)
    }

    /// Crop the bottom/right remainder so both extents divide by `scale`.
    pub fn crop_to_multiple(&self, scale: usize) -> Result<ImageBuffer> {
        if scale == 0 {
            return Err(Error::config("scale must be >= 1"));
        }
        self.crop(
            0,
            0,
            self.width - self.width % scale,
            self.height - self.height % scale,
        )
    }

    /// Three-channel copy; grayscale is replicated.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// `1×3×H×W` tensor with values in [0,1]. Grayscale is replicated.
    pub fn to_unit_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (w, h, c) = (self.width, self.height, self.channels);
        let scale: T = cast(1.0 / 255.0);
        Tensor::from_fn(&[1, 3, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            let src = if c == 1 { p } else { p * 3 + ch };
            cast::<T>(self.data[src] as f64) * scale
        })
    }

    /// Quantize the first batch item of an `N×C×H×W` tensor in [0,1]
    /// (C = 1 or 3), rounding half away from zero and clamping.
    pub fn from_unit_tensor<T: Scalar>(t: &Tensor<T>) -> Result<ImageBuffer> {
        let [_, c, h, w] = t.dims4()?;
        if c != 1 && c != 3 {
            return Err(Error::config(format!(
                "cannot convert {c} channels to an image"
            )));
        }
        let d = t.data();
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = d[(ch * h + y) * w + x].to_f64().unwrap_or(0.0) * 255.0;
                    data.push(quantize(v));
                }
            }
        }
        ImageBuffer::new(w, h, c, data)
    }
}

/// Round half away from zero and clamp to `0..=255`. NaN maps to 0.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(0.0, 255.0) as u8
}

fn image_err(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Read an 8-bit PNG. Palettes and sub-byte depths are expanded and alpha
/// is dropped; 16-bit files are rejected.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(image_err(path, "16-bit PNG is not supported"));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| image_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(
            path,
            format!("unsupported bit depth {:?}", info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(image_err(path, format!("unsupported color type {other:?}"))),
    };
    let mut data = Vec::with_capacity(w * h * keep);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * stride].chunks_exact(stride) {
            data.extend_from_slice(&px[..keep]);
        }
    }
    ImageBuffer::new(w, h, keep, data)
}

pub fn save_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(if img.channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| image_err(path, e))?;
    writer
        .write_image_data(&img.data)
        .map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub const CUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = CUBIC_A;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// How taps that fall outside the image are mapped back inside.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeMode {
    /// Mirror including the border sample: `-1 -> 0`, `-2 -> 1`.
    Symmetric,
    /// Clamp to the nearest border sample.
    Replicate,
}

fn edge_index(i: isize, n: usize, edge: EdgeMode) -> usize {
    let n = n as isize;
    match edge {
        EdgeMode::Replicate => i.clamp(0, n - 1) as usize,
        EdgeMode::Symmetric => {
            let m = i.rem_euclid(2 * n);
            (if m < n { m } else { 2 * n - 1 - m }) as usize
        }
    }
}

/// Per-output-sample taps `(source index, weight)` for resampling a line of
/// `n_in` samples to `n_out`.
fn contributions(n_in: usize, n_out: usize, edge: EdgeMode) -> Vec<Vec<(usize, f64)>> {
    let scale = n_out as f64 / n_in as f64;
    // Downscaling stretches the kernel to act as a low-pass filter.
    let (kernel_scale, width) = if scale < 1.0 {
        (scale, 4.0 / scale)
    } else {
        (1.0, 4.0)
    };
    let taps = width.ceil() as isize + 2;
    (0..n_out)
        .map(|i| {
            // 1-based centre of output sample i in input coordinates.
            let u = (i + 1) as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor() as isize;
            let mut w: Vec<(usize, f64)> = (0..taps)
                .map(|k| {
                    let j = left + k;
                    let wt = kernel_scale * cubic(kernel_scale * (u - j as f64));
                    (edge_index(j - 1, n_in, edge), wt)
                })
                .collect();
            let sum: f64 = w.iter().map(|t| t.1).sum();
            for t in &mut w {
                t.1 /= sum;
            }
            w.retain(|t| t.1 != 0.0);
            w
        })
        .collect()
}

/// Bicubic resize with MATLAB conventions (antialiased when shrinking,
/// symmetric edges). Horizontal pass first, real-valued intermediate,
/// rounded once at the end.
pub fn bicubic_resize(img: &ImageBuffer, out_w: usize, out_h: usize) -> Result<ImageBuffer> {
    bicubic_resize_with(img, out_w, out_h, EdgeMode::Symmetric)
}

pub fn bicubic_resize_with(
    img: &ImageBuffer,
    out_w: usize,
    out_h: usize,
    edge: EdgeMode,
) -> Result<ImageBuffer> {
    let (w, h, c) = (img.width, img.height, img.channels);
    if out_w == 0 || out_h == 0 {
        return Err(Error::config(format!(
            "resize target {out_w}x{out_h} has a zero extent"
        )));
    }
    if w == 0 || h == 0 {
        return Err(Error::config("cannot resize an empty image"));
    }
    let plane = resize_real(
        &img.data.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        [w, h, c],
        out_w,
        out_h,
        edge,
    );
    let data = plane.into_iter().map(quantize).collect();
    ImageBuffer::new(out_w, out_h, c, data)
}

/// Bicubic resize of an interleaved real-valued image; no rounding.
pub fn resize_real(
    src: &[f64],
    [w, h, c]: [usize; 3],
    out_w: usize,
    out_h: usize,
    edge: EdgeMode,
) -> Vec<f64> {
    let cols = contributions(w, out_w, edge);
    let mut horiz = vec![0.0; out_w * h * c];
    for y in 0..h {
        for (x, taps) in cols.iter().enumerate() {
            for ch in 0..c {
                horiz[(y * out_w + x) * c + ch] = taps
                    .iter()
                    .map(|&(j, wt)| wt * src[(y * w + j) * c + ch])
                    .sum();
            }
        }
    }
    let rows = contributions(h, out_h, edge);
    let mut out = vec![0.0; out_w * out_h * c];
    for (y, taps) in rows.iter().enumerate() {
        for x in 0..out_w {
            for ch in 0..c {
                out[(y * out_w + x) * c + ch] = taps
                    .iter()
                    .map(|&(j, wt)| wt * horiz[(j * out_w + x) * c + ch])
                    .sum();
            }
        }
    }
    out
}

/// Crop to a multiple of `scale`, then bicubic-downscale by `scale`.
pub fn degrade(hr: &ImageBuffer, scale: usize) -> Result<ImageBuffer> {
    let hr = hr.crop_to_multiple(scale)?;
    if hr.width == 0 || hr.height == 0 {
        return Err(Error::config(format!(
            "image is smaller than the scale factor {scale}"
        )));
    }
    bicubic_resize(&hr, hr.width / scale, hr.height / scale)
}

pub fn lr_dir_name(scale: usize) -> String {
    format!("LR_x{scale}")
}

/// Result of [`make_lr_set`].
#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub path: PathBuf,
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub failures: Vec<(PathBuf, String)>,
}

/// Write `LR_x{scale}/` under `out_dir` with one downscaled PNG per HR PNG,
/// plus `manifest_x{scale}.tsv` pairing HR and LR paths. Unreadable inputs
/// are recorded as `#` lines and skipped.
pub fn make_lr_set(hr_dir: &Path, scale: usize, out_dir: &Path) -> Result<Manifest> {
    if scale == 0 {
        return Err(Error::config("scale must be >= 1"));
    }
    let inputs = list_pngs(hr_dir)?;
    let lr_dir = out_dir.join(lr_dir_name(scale));
    fs::create_dir_all(&lr_dir).map_err(|e| Error::io(&lr_dir, e))?;
    let mut manifest = Manifest {
        path: out_dir.join(format!("manifest_x{scale}.tsv")),
        ..Manifest::default()
    };
    for hr_path in inputs {
        let lr_path = lr_dir.join(hr_path.file_name().unwrap_or_default());
        let result = load_image(&hr_path)
            .and_then(|hr| degrade(&hr, scale))
            .and_then(|lr| save_image(&lr, &lr_path));
        match result {
            Ok(()) => manifest.pairs.push((hr_path, lr_path)),
            Err(e) => {
                log::warn!("skipping {}: {e}", hr_path.display());
                manifest.failures.push((hr_path, e.to_string()));
            }
        }
    }
    let mut text = String::new();
    for (hr, lr) in &manifest.pairs {
        text += &format!("{}\t{}\n", hr.display(), lr.display());
    }
    for (hr, msg) in &manifest.failures {
        text += &format!(
            "# error\t{}\t{}\n",
            hr.display(),
            msg.replace(['\n', '\t'], " ")
        );
    }
    let mut f = File::create(&manifest.path).map_err(|e| Error::io(&manifest.path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(&manifest.path, e))?;
    Ok(manifest)
}

/// Where a training patch came from and how it was transformed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchOrigin {
    pub image: usize,
    /// HR offsets; the LR patch starts at `(y / scale, x / scale)`.
    pub y: usize,
    pub x: usize,
    pub flip: bool,
    pub rotate: bool,
}

/// Aligned LR/HR patches as `1×3×h×w` tensors in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair<T: Scalar = f32> {
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
    pub origin: PatchOrigin,
}

fn check_pair(hr: &ImageBuffer, lr: &ImageBuffer, scale: usize) -> Result<()> {
    if scale == 0 || hr.width / scale != lr.width || hr.height / scale != lr.height {
        return Err(Error::config(format!(
            "HR {}x{} and LR {}x{} do not match scale {scale}",
            hr.width, hr.height, lr.width, lr.height
        )));
    }
    Ok(())
}

/// Draw an HR patch of `hr_patch` pixels at a uniformly chosen offset that
/// is a multiple of `scale`, with the matching LR patch. Returns `None`
/// (and logs a warning) when the image is smaller than the patch.
pub fn sample_patch_pair<T: Scalar, R: Rng + ?Sized>(
    hr: &ImageBuffer,
    lr: &ImageBuffer,
    scale: usize,
    hr_patch: usize,
    image: usize,
    rng: &mut R,
) -> Result<Option<PatchPair<T>>> {
    check_pair(hr, lr, scale)?;
    if hr_patch == 0 || hr_patch % scale != 0 {
        return Err(Error::config(format!(
            "patch size {hr_patch} must be a positive multiple of scale {scale}"
        )));
    }
    let p = hr_patch / scale;
    if lr.width < p || lr.height < p {
        log::warn!(
            "image {image} ({}x{}) is smaller than the {hr_patch}px patch; skipped",
            hr.width,
            hr.height
        );
        return Ok(None);
    }
    let ly = rng.random_range(0..=lr.height - p);
    let lx = rng.random_range(0..=lr.width - p);
    let hr_crop = hr.crop(lx * scale, ly * scale, hr_patch, hr_patch)?;
    let lr_crop = lr.crop(lx, ly, p, p)?;
    Ok(Some(PatchPair {
        lr: lr_crop.to_unit_tensor(),
        hr: hr_crop.to_unit_tensor(),
        origin: PatchOrigin {
            image,
            y: ly * scale,
            x: lx * scale,
            flip: false,
            rotate: false,
        },
    }))
}

/// Mirror each row of an `N×C×H×W` tensor.
pub fn flip_horizontal<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = t.dims4()?;
    let d = t.data();
    Ok(Tensor::from_fn(&[n, c, h, w], |i| {
        let x = i % w;
        d[i - x + (w - 1 - x)]
    }))
}

/// Rotate an `N×C×H×W` tensor 90° clockwise, giving `N×C×W×H`.
pub fn rotate_cw<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = t.dims4()?;
    let d = t.data();
    // Output (y, x) takes input (h-1-x, y).
    Ok(Tensor::from_fn(&[n, c, w, h], |i| {
        let (plane, p) = (i / (h * w), i % (h * w));
        let (y, x) = (p / h, p % h);
        d[plane * h * w + (h - 1 - x) * w + y]
    }))
}

/// Apply the given flip/rotation to both patches.
pub fn apply_augment<T: Scalar>(
    pair: PatchPair<T>,
    flip: bool,
    rotate: bool,
) -> Result<PatchPair<T>> {
    let PatchPair {
        mut lr,
        mut hr,
        mut origin,
    } = pair;
    if flip {
        lr = flip_horizontal(&lr)?;
        hr = flip_horizontal(&hr)?;
    }
    if rotate {
        lr = rotate_cw(&lr)?;
        hr = rotate_cw(&hr)?;
    }
    origin.flip ^= flip;
    origin.rotate ^= rotate;
    Ok(PatchPair { lr, hr, origin })
}

/// Horizontal flip and 90° clockwise rotation, each with probability 0.5.
pub fn augment<T: Scalar, R: Rng + ?Sized>(
    pair: PatchPair<T>,
    rng: &mut R,
) -> Result<PatchPair<T>> {
    let flip = rng.random_bool(0.5);
    let rotate = rng.random_bool(0.5);
    apply_augment(pair, flip, rotate)
}

/// Minibatch of aligned patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch<T: Scalar = f32> {
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
    pub provenance: Vec<PatchOrigin>,
}

impl<T: Scalar> PatchBatch<T> {
    pub fn from_pairs(pairs: Vec<PatchPair<T>>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::config("empty patch batch"));
        }
        let provenance = pairs.iter().map(|p| p.origin).collect();
        let lr: Vec<_> = pairs.iter().map(|p| p.lr.clone()).collect();
        let hr: Vec<_> = pairs.into_iter().map(|p| p.hr).collect();
        Ok(PatchBatch {
            lr: Tensor::stack(&lr)?,
            hr: Tensor::stack(&hr)?,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

/// One named HR/LR training pair.
#[derive(Clone, Debug)]
pub struct TrainingImage {
    pub name: String,
    pub hr: ImageBuffer,
    pub lr: ImageBuffer,
}

/// Training pairs held in memory.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub scale: usize,
    pub images: Vec<TrainingImage>,
}

impl TrainingSet {
    /// Load `root/HR/*.png` with matching `root/LR_x{scale}/*.png`. When the
    /// LR directory is absent the LR images are synthesised by bicubic
    /// downscaling. Images smaller than `hr_patch` are skipped with a
    /// warning.
    pub fn load(root: &Path, scale: usize, hr_patch: usize) -> Result<Self> {
        let hr_dir = root.join("HR");
        let hr_dir = if hr_dir.is_dir() {
            hr_dir
        } else {
            root.to_path_buf()
        };
        let lr_dir = root.join(lr_dir_name(scale));
        let mut images = Vec::new();
        for hr_path in list_pngs(&hr_dir)? {
            let name = hr_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let hr = load_image(&hr_path)?.crop_to_multiple(scale)?;
            let lr = if lr_dir.is_dir() {
                load_image(&lr_dir.join(&name))?
            } else {
                degrade(&hr, scale)?
            };
            check_pair(&hr, &lr, scale)?;
            if hr.width < hr_patch || hr.height < hr_patch {
                log::warn!(
                    "{name} ({}x{}) is smaller than the {hr_patch}px patch; skipped",
                    hr.width,
                    hr.height
                );
                continue;
            }
            images.push(TrainingImage { name, hr, lr });
        }
        if images.is_empty() {
            return Err(Error::config(format!(
                "no usable training images in {}",
                hr_dir.display()
            )));
        }
        Ok(TrainingSet { scale, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Batch source for one epoch. The sequence of image ids, offsets and
/// augmentation flags depends only on `(seed, epoch)`: images are visited
/// in a shuffled order, one patch per visit, reshuffling when exhausted.
pub struct EpochSampler<'a> {
    set: &'a TrainingSet,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    hr_patch: usize,
    augment: bool,
}

impl<'a> EpochSampler<'a> {
    pub fn new(
        set: &'a TrainingSet,
        seed: u64,
        epoch: u64,
        hr_patch: usize,
        augment: bool,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        EpochSampler {
            set,
            rng,
            order: Vec::new(),
            cursor: 0,
            hr_patch,
            augment,
        }
    }

    fn next_image(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.set.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn next_batch<T: Scalar>(&mut self, batch: usize) -> Result<PatchBatch<T>> {
        let mut pairs = Vec::with_capacity(batch);
        while pairs.len() < batch {
            let id = self.next_image();
            let img = &self.set.images[id];
            let pair = sample_patch_pair(
                &img.hr,
                &img.lr,
                self.set.scale,
                self.hr_patch,
                id,
                &mut self.rng,
            )?
            .ok_or_else(|| Error::config(format!("{} is smaller than the patch", img.name)))?;
            pairs.push(if self.augment {
                augment(pair, &mut self.rng)?
            } else {
                pair
            });
        }
        PatchBatch::from_pairs(pairs)
    }
}
