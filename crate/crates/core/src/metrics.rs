//! Training loss and the evaluation protocol: BT.601 luma, border shaving,
//! 8-bit quantization, PSNR and single-scale SSIM.

use crate::data::ImageBuffer;
use crate::error::{Error, Result};
use crate::tensor::{cast, Scalar, Tensor};

/// Mean absolute error and its gradient with respect to `pred`.
/// The subgradient of `|0|` is taken as 0.
pub fn mae_loss<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != reference.shape() {
        return Err(Error::config(format!(
            "loss operands differ in shape: {:?} vs {:?}",
            pred.shape(),
            reference.shape()
        )));
    }
    let n = pred.len();
    if n == 0 {
        return Err(Error::config("loss of an empty tensor"));
    }
    let inv: T = cast(1.0 / n as f64);
    let mut sum = 0.0f64;
    let grad = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&p, &r)| {
            let d = p - r;
            sum += d.abs().to_f64().unwrap_or(f64::NAN);
            if d > T::zero() {
                inv
            } else if d < T::zero() {
                -inv
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((sum / n as f64, Tensor::new(pred.shape(), grad)?))
}

/// Real-valued image with samples on the 0..=255 scale, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::config(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(FloatImage {
            width,
            height,
            channels,
            data,
        })
    }

    /// Clamp to `[0, 255]` and round half away from zero.
    pub fn quantized(&self) -> FloatImage {
        FloatImage {
            data: self
                .data
                .iter()
                .map(|v| v.clamp(0.0, 255.0).round())
                .collect(),
            ..self.clone()
        }
    }

    /// First image of a `N×C×H×W` tensor holding values in `[0, 1]`.
    pub fn from_unit_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let [_, c, h, w] = t.dims4()?;
        let d = t.data();
        let mut data = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(d[(ch * h + y) * w + x].to_f64().unwrap_or(f64::NAN) * 255.0);
                }
            }
        }
        FloatImage::new(w, h, c, data)
    }
}

impl From<&ImageBuffer> for FloatImage {
    fn from(img: &ImageBuffer) -> Self {
        FloatImage {
            width: img.width,
            height: img.height,
            channels: img.channels,
            data: img.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Single-channel real-valued plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::config(format!(
                "{width}x{height} plane needs {} samples",
                width * height
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Remove `border` pixels from every side.
    pub fn shave(&self, border: usize) -> Result<Plane> {
        if 2 * border >= self.width || 2 * border >= self.height {
            return Err(Error::config(format!(
                "shaving {border} pixels leaves nothing of a {}x{} image",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width - 2 * border, self.height - 2 * border);
        let mut data = Vec::with_capacity(w * h);
        for y in border..border + h {
            data.extend_from_slice(&self.data[y * self.width + border..][..w]);
        }
        Plane::new(w, h, data)
    }
}

/// BT.601 studio-swing luma, `16 + 65.481 R' + 128.553 G' + 24.966 B'`
/// with `R', G', B'` in `[0, 1]`. Single-channel images pass through.
pub fn rgb_to_y(img: &FloatImage) -> Result<Plane> {
    match img.channels {
        1 => Plane::new(img.width, img.height, img.data.clone()),
        3 => Plane::new(
            img.width,
            img.height,
            img.data
                .chunks_exact(3)
                .map(|p| 16.0 + (65.481 * p[0] + 128.553 * p[1] + 24.966 * p[2]) / 255.0)
                .collect(),
        ),
        c => Err(Error::config(format!(
            "cannot take luma of a {c}-channel image"
        ))),
    }
}

/// How super-resolved output is compared against ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalProtocol {
    /// Border pixels removed per side.
    pub shave: usize,
    /// Round both images to 8-bit before measuring.
    pub quantize: bool,
    /// Measure on the luma plane instead of every channel.
    pub y_only: bool,
}

impl EvalProtocol {
    pub fn for_scale(scale: usize) -> Self {
        EvalProtocol {
            shave: scale,
            quantize: true,
            y_only: true,
        }
    }

    /// Planes the metric is computed on, after quantization and shaving.
    pub fn planes(&self, img: &FloatImage) -> Result<Vec<Plane>> {
        let img = if self.quantize {
            img.quantized()
        } else {
            img.clone()
        };
        let planes = if self.y_only {
            vec![rgb_to_y(&img)?]
        } else {
            (0..img.channels)
                .map(|c| {
                    Plane::new(
                        img.width,
                        img.height,
                        img.data
                            .iter()
                            .skip(c)
                            .step_by(img.channels)
                            .copied()
                            .collect(),
                    )
                })
                .collect::<Result<_>>()?
        };
        planes.iter().map(|p| p.shave(self.shave)).collect()
    }
}

fn check_same_dims(a: &FloatImage, b: &FloatImage) -> Result<()> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(Error::config(format!(
            "images differ in size: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// PSNR in dB of `10·log10(255² / MSE)`; identical planes give `+inf`.
pub fn psnr_planes(a: &[Plane], b: &[Plane]) -> f64 {
    let mut sse = 0.0;
    let mut n = 0usize;
    for (pa, pb) in a.iter().zip(b) {
        for (x, y) in pa.data.iter().zip(&pb.data) {
            let d = x - y;
            sse += d * d;
        }
        n += pa.data.len();
    }
    let mse = sse / n as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

pub fn psnr(a: &FloatImage, b: &FloatImage, proto: &EvalProtocol) -> Result<f64> {
    check_same_dims(a, b)?;
    Ok(psnr_planes(&proto.planes(a)?, &proto.planes(b)?))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with the Gaussian window.
fn filter_valid(p: &Plane, taps: &[f64]) -> Plane {
    let k = taps.len();
    let (ow, oh) = (p.width - k + 1, p.height - k + 1);
    let mut horiz = vec![0.0; ow * p.height];
    for y in 0..p.height {
        let row = &p.data[y * p.width..(y + 1) * p.width];
        for x in 0..ow {
            horiz[y * ow + x] = taps.iter().zip(&row[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * horiz[(y + i) * ow + x])
                .sum();
        }
    }
    Plane {
        width: ow,
        height: oh,
        data: out,
    }
}

/// Mean SSIM over every valid 11×11 window position of one plane pair.
pub fn ssim_plane(a: &Plane, b: &Plane) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::config("SSIM planes differ in size"));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::config(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let product = |f: &dyn Fn(f64, f64) -> f64| Plane {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    };
    let mu_a = filter_valid(a, &taps);
    let mu_b = filter_valid(b, &taps);
    let aa = filter_valid(&product(&|x, _| x * x), &taps);
    let bb = filter_valid(&product(&|_, y| y * y), &taps);
    let ab = filter_valid(&product(&|x, y| x * y), &taps);
    let mut total = 0.0;
    for i in 0..mu_a.data.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = aa.data[i] - ma * ma;
        let vb = bb.data[i] - mb * mb;
        let cov = ab.data[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / mu_a.data.len() as f64)
}

/// SSIM averaged over the measured planes.
pub fn ssim(a: &FloatImage, b: &FloatImage, proto: &EvalProtocol) -> Result<f64> {
    check_same_dims(a, b)?;
    let (pa, pb) = (proto.planes(a)?, proto.planes(b)?);
    let mut sum = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        sum += ssim_plane(x, y)?;
    }
    Ok(sum / pa.len() as f64)
}
