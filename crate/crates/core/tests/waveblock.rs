use awb_core::params::{Ctx, Mode, ParamStore, Trainable};
use awb_core::waveblock::{
    apply_band, collision_probability, draw_wave, waveblock_apply, BandStyle, WaveConfig, WaveDraw,
};
use awb_tensor::{Graph, Real, RngStream, Tensor};

/// Elementwise reading of the band rule, written without the library's
/// helpers: rows inside `[X, X + round(H·r_w))` pass through, all other
/// rows are multiplied by `r_h`.
fn oracle<T: Real>(f: &Tensor<T>, rw: f64, rh: f64, offset: usize) -> Tensor<T> {
    let s = f.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let band = (h as f64 * rw).round() as usize;
    let mut out = Vec::with_capacity(f.numel());
    for i in 0..n {
        for ch in 0..c {
            for j in 0..h {
                for k in 0..w {
                    let v = f.at(&[i, ch, j, k]);
                    out.push(if j >= offset && j < offset + band { v } else { v * T::of(rh) });
                }
            }
        }
    }
    Tensor::new(s, out).unwrap()
}

fn random_case(rng: &mut RngStream) -> (Vec<usize>, WaveConfig) {
    loop {
        let shape = vec![rng.uniform_int(1, 3), rng.uniform_int(1, 4), rng.uniform_int(2, 40), rng.uniform_int(1, 8)];
        let cfg = WaveConfig::new(0.05 + 0.9 * rng.uniform(), 3.0 * rng.uniform() + 1e-3).unwrap();
        if cfg.check_height(shape[2]).is_ok() {
            return (shape, cfg);
        }
    }
}

#[test]
fn matches_elementwise_oracle_on_1000_tensors() {
    let mut rng = RngStream::new(2024, 0);
    for i in 0..1000 {
        let (shape, cfg) = random_case(&mut rng);
        let draw = draw_wave(&mut rng, shape[2], cfg.rw).unwrap();
        if i % 2 == 0 {
            let f = rng.normal_tensor::<f32>(&shape, 1.0);
            let got = waveblock_apply(&f, &cfg, &draw).unwrap();
            assert_eq!(got.data(), oracle(&f, cfg.rw, cfg.rh, draw.offset).data(), "case {i}");
        } else {
            let f = rng.normal_tensor::<f64>(&shape, 1.0);
            let got = waveblock_apply(&f, &cfg, &draw).unwrap();
            assert_eq!(got.data(), oracle(&f, cfg.rw, cfg.rh, draw.offset).data(), "case {i}");
        }
    }
}

#[test]
fn identity_when_height_rate_is_one_or_in_eval() {
    let mut rng = RngStream::new(5, 1);
    for _ in 0..200 {
        let (shape, cfg) = random_case(&mut rng);
        let f = rng.normal_tensor::<f32>(&shape, 2.0);
        let draw = draw_wave(&mut rng, shape[2], cfg.rw).unwrap();
        let unit = WaveConfig { rh: 1.0, ..cfg };
        assert_eq!(waveblock_apply(&f, &unit, &draw).unwrap(), f);
        let eval = cfg.with_mode(Mode::Eval);
        assert_eq!(waveblock_apply(&f, &eval, &draw).unwrap(), f);
    }
}

#[test]
fn band_geometry_at_default_rates() {
    let cfg = WaveConfig::default();
    assert_eq!(cfg.band_len(32), 10);
    assert_eq!(cfg.max_offset(32), 22);
    let f = Tensor::<f64>::ones(&[1, 1, 32, 1]);
    let out = waveblock_apply(&f, &cfg, &WaveDraw { offset: 22, height: 32 }).unwrap();
    let kept = out.data().iter().filter(|&&v| v == 1.0).count();
    assert_eq!(kept, 10);
    assert!(out.data()[..22].iter().all(|&v| v == 1.5));
}

#[test]
fn offsets_are_uniform_over_the_support() {
    let mut rng = RngStream::new(77, 3);
    let mut counts = [0usize; 23];
    let n = 230_000;
    for _ in 0..n {
        counts[draw_wave(&mut rng, 32, 0.3).unwrap().offset] += 1;
    }
    let expected = n as f64 / 23.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 22 degrees of freedom; the 0.999 quantile is about 48.3.
    assert!(chi2 < 48.3, "chi-square {chi2}, counts {counts:?}");
}

#[test]
fn paired_draw_collisions_match_the_support_size() {
    let n = 1_000_000u64;
    let mut a = RngStream::new(11, 0);
    let mut b = RngStream::new(11, 1);
    let hits = (0..n)
        .filter(|_| draw_wave(&mut a, 32, 0.3).unwrap().offset == draw_wave(&mut b, 32, 0.3).unwrap().offset)
        .count() as f64;
    let p = collision_probability(32, 0.3, 1).unwrap().support_based_f64();
    assert_eq!(p, 1.0 / 23.0);
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    let rate = hits / n as f64;
    assert!((rate - p).abs() < 3.0 * sd, "rate {rate}, expected {p} ± {}", 3.0 * sd);
}

#[test]
fn linear_in_the_input() {
    let mut rng = RngStream::new(8, 8);
    for _ in 0..50 {
        let (shape, cfg) = random_case(&mut rng);
        let draw = draw_wave(&mut rng, shape[2], cfg.rw).unwrap();
        let x = rng.normal_tensor::<f64>(&shape, 1.0);
        let y = rng.normal_tensor::<f64>(&shape, 1.0);
        let (a, b) = (rng.normal(), rng.normal());
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = waveblock_apply(&mix, &cfg, &draw).unwrap();
        let wx = waveblock_apply(&x, &cfg, &draw).unwrap();
        let wy = waveblock_apply(&y, &cfg, &draw).unwrap();
        let rhs = wx.zip_map(&wy, |p, q| a * p + b * q).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }
}

#[test]
fn gradient_is_the_row_factor() {
    let cfg = WaveConfig::new(0.25, 2.5).unwrap();
    let draw = WaveDraw { offset: 3, height: 8 };
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new();
    let x = g.param(RngStream::new(1, 1).normal_tensor(&[2, 3, 8, 5], 1.0));
    let mut ctx = Ctx::new(&mut g, &store, Mode::Train, Trainable::ALL);
    let y = apply_band(&mut ctx, x, &cfg, &draw, BandStyle::Wave).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    let dx = grads.get(x).unwrap();
    for (i, &v) in dx.data().iter().enumerate() {
        let row = (i / 5) % 8;
        let expected = if (3..5).contains(&row) { 1.0 } else { 2.5 };
        assert_eq!(v, expected, "row {row}");
    }
}

#[test]
fn drop_style_zeroes_the_band() {
    let cfg = WaveConfig::new(0.5, 1.5).unwrap();
    let draw = WaveDraw { offset: 1, height: 4 };
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 1, 4, 2]));
    let mut ctx = Ctx::new(&mut g, &store, Mode::Train, Trainable::ALL);
    let y = apply_band(&mut ctx, x, &cfg, &draw, BandStyle::Drop).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn collision_closed_forms() {
    let p = collision_probability(32, 0.3, 1).unwrap();
    assert_eq!(p.outcomes, 22);
    assert_eq!(p.closed_form_f64(), 1.0 / 22.0);
    let p4 = collision_probability(32, 0.3, 4).unwrap();
    assert_eq!(p4.closed_form.to_string(), "1/234256");
    assert_eq!(format!("{:.2e}", p4.closed_form_f64()), "4.27e-6");
    assert!(collision_probability(32, 0.3, 0).is_err());
    assert!(collision_probability(1, 0.6, 1).is_err());
}
