use csrnet::data::{bicubic_resize, degrade, ImageBuffer};
use csrnet::metrics::{
    mae_loss, psnr, rgb_to_y, ssim, ssim_plane, EvalProtocol, FloatImage, Plane,
};
use csrnet::tensor::Tensor;

const RAW: EvalProtocol = EvalProtocol {
    shave: 0,
    quantize: false,
    y_only: false,
};

fn plane(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> Plane {
    Plane::new(
        w,
        h,
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| f(x, y))
            .collect(),
    )
    .unwrap()
}

fn gray(p: &Plane) -> FloatImage {
    FloatImage::new(p.width, p.height, 1, p.data.clone()).unwrap()
}

#[test]
fn psnr_of_unit_mse() {
    let a = plane(8, 8, |x, y| ((x * 31 + y * 17) % 200) as f64);
    let b = plane(8, 8, |x, y| {
        a_at(x, y) + if (x + y) % 2 == 0 { 1.0 } else { -1.0 }
    });
    fn a_at(x: usize, y: usize) -> f64 {
        ((x * 31 + y * 17) % 200) as f64
    }
    let v = psnr(&gray(&a), &gray(&b), &RAW).unwrap();
    assert!((v - 48.1308).abs() < 1e-3, "{v}");
    assert!((v - 20.0 * 255f64.log10()).abs() < 1e-12);
}

#[test]
fn identical_images() {
    let a = plane(20, 16, |x, y| (x * y % 256) as f64);
    assert_eq!(psnr(&gray(&a), &gray(&a), &RAW).unwrap(), f64::INFINITY);
    assert!((ssim(&gray(&a), &gray(&a), &RAW).unwrap() - 1.0).abs() < 1e-9);
    let flat = plane(16, 16, |_, _| 77.0);
    assert!((ssim_plane(&flat, &flat).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn white_luma() {
    let white = FloatImage::new(1, 1, 3, vec![255.0; 3]).unwrap();
    assert!((rgb_to_y(&white).unwrap().data[0] - 235.0).abs() < 1e-6);
    let black = FloatImage::new(1, 1, 3, vec![0.0; 3]).unwrap();
    assert!((rgb_to_y(&black).unwrap().data[0] - 16.0).abs() < 1e-12);
}

#[test]
fn metrics_are_symmetric() {
    let a = plane(24, 24, |x, y| ((x * 13 + y * 7) % 256) as f64);
    let b = plane(24, 24, |x, y| ((x * 5 + y * 11 + 3) % 256) as f64);
    let (a, b) = (gray(&a), gray(&b));
    let proto = EvalProtocol::for_scale(2);
    assert_eq!(
        psnr(&a, &b, &RAW).unwrap().to_bits(),
        psnr(&b, &a, &RAW).unwrap().to_bits()
    );
    assert_eq!(
        ssim(&a, &b, &RAW).unwrap().to_bits(),
        ssim(&b, &a, &RAW).unwrap().to_bits()
    );
    assert_eq!(
        psnr(&a, &b, &proto).unwrap().to_bits(),
        psnr(&b, &a, &proto).unwrap().to_bits()
    );
}

/// SSIM computed window by window with a normalised 2-D Gaussian.
fn naive_ssim(a: &Plane, b: &Plane) -> f64 {
    let (n, sigma) = (11usize, 1.5f64);
    let mut k = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f64 - 5.0, x as f64 - 5.0);
            k[y * n + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut acc = 0.0;
    let mut count = 0;
    for oy in 0..=a.height - n {
        for ox in 0..=a.width - n {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let w = k[y * n + x];
                    let va = a.data[(oy + y) * a.width + ox + x];
                    let vb = b.data[(oy + y) * b.width + ox + x];
                    ma += w * va;
                    mb += w * vb;
                    saa += w * va * va;
                    sbb += w * vb * vb;
                    sab += w * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

#[test]
fn ssim_matches_sliding_window_oracle() {
    let board = plane(32, 32, |x, y| {
        if (x / 4 + y / 4) % 2 == 0 {
            230.0
        } else {
            20.0
        }
    });
    // 3x3 box blur with clamped borders.
    let blurred = plane(32, 32, |x, y| {
        let mut s = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let yy = (y as i64 + dy).clamp(0, 31) as usize;
                let xx = (x as i64 + dx).clamp(0, 31) as usize;
                s += board.data[yy * 32 + xx];
            }
        }
        s / 9.0
    });
    let fast = ssim_plane(&board, &blurred).unwrap();
    let slow = naive_ssim(&board, &blurred);
    assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    assert!(fast < 0.99 && fast > 0.0);
}

#[test]
fn shave_and_quantize_protocol() {
    let a = FloatImage::new(6, 6, 3, (0..108).map(|i| i as f64 * 2.0 + 0.4).collect()).unwrap();
    let mut b = a.clone();
    // Differences confined to the border vanish after a shave of 1.
    for y in 0..6 {
        for x in 0..6 {
            if x == 0 || y == 0 || x == 5 || y == 5 {
                for c in 0..3 {
                    b.data[(y * 6 + x) * 3 + c] += 40.0;
                }
            }
        }
    }
    let proto = EvalProtocol {
        shave: 1,
        quantize: true,
        y_only: true,
    };
    assert_eq!(psnr(&a, &b, &proto).unwrap(), f64::INFINITY);
    assert!(psnr(&a, &b, &RAW).unwrap().is_finite());
}

#[test]
fn mae_gradient_is_sign_over_n() {
    let p = Tensor::new(&[1, 1, 1, 4], vec![0.5, 0.2, 0.9, 0.4]).unwrap();
    let r = Tensor::new(&[1, 1, 1, 4], vec![0.1, 0.3, 0.9, 0.0]).unwrap();
    let (loss, g) = mae_loss(&p, &r).unwrap();
    assert!((loss - (0.4 + 0.1 + 0.0 + 0.4) / 4.0).abs() < 1e-15);
    assert_eq!(g.data(), &[0.25, -0.25, 0.0, 0.25]);
}

fn natural(w: usize, h: usize) -> ImageBuffer {
    let mut d = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let v = 128.0
                + 60.0 * (fx * 0.09).sin() * (fy * 0.05).cos()
                + 30.0 * ((fx + fy) * 0.02).sin();
            for c in 0..3 {
                d.push((v + 10.0 * c as f64).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuffer::new(w, h, 3, d).unwrap()
}

#[test]
fn bicubic_round_trip_is_in_sanity_band() {
    let hr = natural(96, 80);
    for s in [2, 3, 4] {
        let lr = degrade(&hr, s).unwrap();
        let hr_c = hr.crop_to_multiple(s).unwrap();
        let up = bicubic_resize(&lr, hr_c.width, hr_c.height).unwrap();
        let p = psnr(
            &FloatImage::from(&up),
            &FloatImage::from(&hr_c),
            &EvalProtocol::for_scale(s),
        )
        .unwrap();
        assert!(p.is_finite() && p > 20.0, "x{s}: {p}");
    }
}
