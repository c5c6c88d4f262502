use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rose_core::bench::{
    background_consistency, build_copy_paste_pair, masked_psnr, motion_smoothness, psnr, run_benchmark,
    sample_paste_offset, ssim, temporal_flicker, EvalPair, Identity, MetricReport, Oracle, Subset,
    SSIM_K1, SSIM_K2,
};
use rose_core::mask::Mask;
use rose_core::render::Category;
use rose_core::video::VideoTensor;

fn random_video(seed: u64, f: usize, h: usize, w: usize) -> VideoTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VideoTensor::from_fn(f, h, w, 3, |_, _, _, _| rng.gen_range(0.0..1.0))
}

#[test]
fn psnr_reference_values() {
    let a = VideoTensor::filled(2, 8, 8, 3, 0.3);
    let b = VideoTensor::filled(2, 8, 8, 3, 0.4);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 0.01);
    assert_eq!(psnr(&a, &a).unwrap(), 99.0);
    let z = VideoTensor::zeros(2, 8, 8, 3);
    let o = VideoTensor::filled(2, 8, 8, 3, 1.0);
    assert_eq!(psnr(&z, &o).unwrap(), 0.0);
    assert!(psnr(&z, &VideoTensor::zeros(2, 8, 4, 3)).is_err());
}

#[test]
fn psnr_symmetric_and_decreasing_in_noise() {
    let base = VideoTensor::filled(2, 16, 16, 3, 0.5);
    let mut prev = f64::INFINITY;
    for amp in [0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5] {
        let mut mean = 0.0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy = VideoTensor::from_fn(2, 16, 16, 3, |_, _, _, _| 0.5 + rng.gen_range(-amp..amp));
            let p = psnr(&base, &noisy).unwrap();
            assert_eq!(p, psnr(&noisy, &base).unwrap());
            mean += p / 10.0;
        }
        assert!(mean < prev, "{amp}: {mean} !< {prev}");
        prev = mean;
    }
}

/// Direct SSIM: a full 2D Gaussian window at every valid position.
fn ssim_oracle(a: &VideoTensor, b: &VideoTensor, win: usize) -> f64 {
    let [f, h, w, c] = a.dims();
    let sigma = win as f64 / 6.0;
    let r = (win / 2) as f64;
    let mut k = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            k[i * win + j] = (-((i as f64 - r).powi(2) + (j as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for t in 0..f {
        let mut fr = 0.0;
        for ch in 0..c {
            let mut acc = 0.0;
            let mut n = 0;
            for y in 0..=h - win {
                for x in 0..=w - win {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..win {
                        for j in 0..win {
                            let g = k[i * win + j];
                            let p = a.pixel(t, y + i, x + j)[ch] as f64;
                            let q = b.pixel(t, y + i, x + j)[ch] as f64;
                            mx += g * p;
                            my += g * q;
                            xx += g * p * p;
                            yy += g * q * q;
                            xy += g * p * q;
                        }
                    }
                    let (vx, vy, cv) = (xx - mx * mx, yy - my * my, xy - mx * my);
                    acc += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    n += 1;
                }
            }
            fr += acc / n as f64;
        }
        total += fr / c as f64;
    }
    total / f as f64
}

#[test]
fn ssim_matches_direct_window_oracle() {
    for seed in 0..3 {
        let a = random_video(seed, 2, 14, 13);
        let b = random_video(seed + 100, 2, 14, 13);
        for win in [3, 7, 11] {
            let got = ssim(&a, &b, win, SSIM_K1, SSIM_K2).unwrap();
            let want = ssim_oracle(&a, &b, win);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
            assert_eq!(got, ssim(&b, &a, win, SSIM_K1, SSIM_K2).unwrap());
        }
    }
}

#[test]
fn ssim_special_cases() {
    let v = random_video(4, 3, 16, 16);
    assert_eq!(ssim(&v, &v, 11, SSIM_K1, SSIM_K2).unwrap(), 1.0);
    let board = VideoTensor::from_fn(1, 16, 16, 1, |_, y, x, _| ((y + x) % 2) as f32);
    let inv = VideoTensor::from_fn(1, 16, 16, 1, |_, y, x, _| (1 - (y + x) % 2) as f32);
    assert!(ssim(&board, &inv, 11, SSIM_K1, SSIM_K2).unwrap() < 0.0);
    let (a, b) = (0.2f64, 0.7f64);
    let ca = VideoTensor::filled(1, 16, 16, 1, a as f32);
    let cb = VideoTensor::filled(1, 16, 16, 1, b as f32);
    let (a, b) = (a as f32 as f64, b as f32 as f64);
    let c1 = SSIM_K1 * SSIM_K1;
    let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
    assert!((ssim(&ca, &cb, 11, SSIM_K1, SSIM_K2).unwrap() - want).abs() < 1e-9);
    assert!(ssim(&v, &v, 10, SSIM_K1, SSIM_K2).is_err());
    assert!(ssim(&v, &v, 17, SSIM_K1, SSIM_K2).is_err());
}

#[test]
fn flicker_reference_values() {
    let all = Mask::ones(11, 4, 4);
    let still = VideoTensor::filled(11, 4, 4, 3, 0.4);
    assert_eq!(temporal_flicker(&still, &all).unwrap(), 0.0);
    let alt = VideoTensor::from_fn(11, 4, 4, 3, |t, _, _, _| (t % 2) as f32);
    assert_eq!(temporal_flicker(&alt, &all).unwrap(), 1.0);
    let fade = VideoTensor::from_fn(11, 4, 4, 3, |t, _, _, _| t as f32 / 10.0);
    assert!((temporal_flicker(&fade, &all).unwrap() - 0.1).abs() < 1e-6);
    let one = VideoTensor::zeros(1, 4, 4, 3);
    assert!(temporal_flicker(&one, &Mask::ones(1, 4, 4)).is_err());
    assert!(temporal_flicker(&still, &Mask::zeros(11, 4, 4)).is_err());
}

#[test]
fn background_consistency_ignores_the_edit_region() {
    let input = random_video(1, 3, 12, 12);
    let region = Mask::from_fn(3, 12, 12, |_, y, x| (3..8).contains(&y) && (2..9).contains(&x));
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = input.clone();
        for t in 0..3 {
            for y in 0..12 {
                for x in 0..12 {
                    if region.get(t, y, x) {
                        out.pixel_mut(t, y, x).iter_mut().for_each(|v| *v = rng.gen_range(-5.0..5.0));
                    }
                }
            }
        }
        assert_eq!(background_consistency(&input, &out, &region).unwrap(), 99.0);
    }
    let flat = VideoTensor::filled(2, 6, 6, 3, 0.25);
    let mut shifted = VideoTensor::filled(2, 6, 6, 3, 0.35);
    let m = Mask::from_fn(2, 6, 6, |_, y, _| y < 2);
    for t in 0..2 {
        for y in 0..2 {
            for x in 0..6 {
                shifted.pixel_mut(t, y, x).fill(0.9);
            }
        }
    }
    assert!((background_consistency(&flat, &shifted, &m).unwrap() - 20.0).abs() < 0.01);
    assert!(background_consistency(&flat, &shifted, &Mask::ones(2, 6, 6)).is_err());
}

#[test]
fn motion_smoothness_reference_values() {
    let still = VideoTensor::filled(5, 8, 8, 3, 0.6);
    assert_eq!(motion_smoothness(&still).unwrap(), 1.0);
    let pan = VideoTensor::from_fn(8, 16, 32, 3, |t, _, x, _| (x + 2 * t) as f32 / 64.0);
    assert!(motion_smoothness(&pan).unwrap() > 0.999);
    let noise = random_video(9, 8, 16, 16);
    assert!(motion_smoothness(&noise).unwrap() < 0.7);
    assert!(motion_smoothness(&VideoTensor::zeros(2, 4, 4, 3)).is_err());
}

#[test]
fn copy_paste_pairs() {
    let dst = random_video(2, 3, 10, 10);
    let src = random_video(3, 3, 10, 10);
    let m = Mask::from_fn(3, 10, 10, |_, y, x| (2..5).contains(&y) && (3..6).contains(&x));
    let same = build_copy_paste_pair(&dst, &m, &dst, (0, 0)).unwrap();
    assert_eq!(same.input, dst);
    let empty = build_copy_paste_pair(&src, &Mask::zeros(3, 10, 10), &dst, (1, 1)).unwrap();
    assert_eq!(empty.input, dst);
    let p = build_copy_paste_pair(&src, &m, &dst, (4, -2)).unwrap();
    assert_eq!(p.ground_truth.as_ref(), Some(&dst));
    assert_eq!(psnr(p.ground_truth.as_ref().unwrap(), &dst).unwrap(), 99.0);
    for t in 0..3 {
        for y in 0..10 {
            for x in 0..10 {
                let inside = (6..9).contains(&y) && (1..4).contains(&x);
                assert_eq!(p.mask.get(t, y, x), inside);
                let want = if inside { src.pixel(t, y - 4, x + 2) } else { dst.pixel(t, y, x) };
                assert_eq!(p.input.pixel(t, y, x), want);
            }
        }
    }
    assert!(build_copy_paste_pair(&src, &m, &dst, (20, 0)).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let off = sample_paste_offset(&m, 10, 10, &mut rng).unwrap();
        let q = build_copy_paste_pair(&src, &m, &dst, off).unwrap();
        assert_eq!(q.mask.count(), m.count());
    }
}

fn cases() -> Vec<(Category, EvalPair)> {
    let mut out = Vec::new();
    for (i, c) in [Category::Shadow, Category::Shadow, Category::Mirror].into_iter().enumerate() {
        let gt = random_video(10 + i as u64, 3, 12, 12);
        let m = Mask::from_fn(3, 12, 12, |_, y, x| (4..8).contains(&y) && (4..8).contains(&x));
        let p = build_copy_paste_pair(&random_video(20 + i as u64, 3, 12, 12), &m, &gt, (i as i64, 0)).unwrap();
        out.push((c, p));
    }
    out
}

#[test]
fn report_rows_and_mean() {
    let oracle = run_benchmark(&Oracle, cases(), Subset::RealisticPaired).unwrap();
    for r in oracle.rows.iter().chain([&oracle.mean]) {
        assert_eq!(r.metrics.psnr, Some(99.0));
        assert_eq!(r.metrics.ssim, Some(1.0));
    }
    let id = run_benchmark(&Identity, cases(), Subset::RealisticPaired).unwrap();
    for ((_, pair), (_, row)) in cases().iter().zip(&id.samples) {
        let want = psnr(&pair.input, pair.ground_truth.as_ref().unwrap()).unwrap();
        assert_eq!(row.psnr, Some(want));
        assert_eq!(row.bg_consistency, 99.0);
    }
    assert_eq!(id.rows.len(), 2);
    assert_eq!(id.rows[0].label, "Shadow");
    assert_eq!(id.rows[0].samples, 2);
    let s = &id.samples;
    let shadow = (s[0].1.psnr.unwrap() + s[1].1.psnr.unwrap()) / 2.0;
    let mirror = s[2].1.psnr.unwrap();
    assert!((id.rows[0].metrics.psnr.unwrap() - shadow).abs() < 1e-12);
    assert!((id.mean.metrics.psnr.unwrap() - (shadow + mirror) / 2.0).abs() < 1e-12);
    let csv = id.to_csv();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().last().unwrap().starts_with("Mean,3,"));
    assert!(csv.lines().skip(1).all(|l| l.contains("n/a")));
    assert!(id.to_table().contains("Mean"));
}

#[test]
fn unpaired_reports_skip_paired_metrics() {
    let c: Vec<_> = cases()
        .into_iter()
        .map(|(c, mut p)| {
            p.ground_truth = None;
            (c, p)
        })
        .collect();
    let r = run_benchmark(&Identity, c, Subset::RealisticUnpaired).unwrap();
    assert_eq!(r.mean.metrics.psnr, None);
    assert!(r.to_csv().lines().nth(1).unwrap().contains("n/a,n/a,n/a"));
    assert!(MetricReport::aggregate(Subset::SyntheticPaired, vec![]).is_err());
    let v = random_video(1, 2, 6, 6);
    assert!(masked_psnr(&v, &v, &Mask::zeros(2, 6, 6)).is_err());
}
