//! The synthetic corpus must be learnable from spatial-frequency content
//! while offering no shortcut through raw intensity.

use capst::data::{synth_video, SynthConfig};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

const BINS: usize = 32;

fn gray(frame: &[f32], s: usize) -> Vec<f64> {
    let plane = s * s;
    (0..plane)
        .map(|i| (frame[i] + frame[plane + i] + frame[2 * plane + i]) as f64 / 3.0)
        .collect()
}

/// Log energy in radial frequency bands of the 2-D power spectrum.
fn spectral_features(frames: &[Vec<f64>], s: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let fft = planner.plan_fft_forward(s);
    let mut bands = vec![0.0; BINS];
    for g in frames {
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        let mut buf: Vec<Complex<f64>> = g.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
        for row in buf.chunks_mut(s) {
            fft.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); s];
        for x in 0..s {
            for y in 0..s {
                col[y] = buf[y * s + x];
            }
            fft.process(&mut col);
            for y in 0..s {
                buf[y * s + x] = col[y];
            }
        }
        for y in 0..s {
            for x in 0..s {
                let fy = if y <= s / 2 { y } else { s - y } as f64;
                let fx = if x <= s / 2 { x } else { s - x } as f64;
                let r = (fx * fx + fy * fy).sqrt() / (s as f64 / 2.0);
                let bin = ((r * BINS as f64) as usize).min(BINS - 1);
                bands[bin] += buf[y * s + x].norm_sqr();
            }
        }
    }
    bands.iter().map(|e| (e / frames.len() as f64 + 1e-12).ln()).collect()
}

fn standardise(train: &mut [Vec<f64>], test: &mut [Vec<f64>]) {
    let d = train[0].len();
    for k in 0..d {
        let n = train.len() as f64;
        let mu = train.iter().map(|v| v[k]).sum::<f64>() / n;
        let sd = (train.iter().map(|v| (v[k] - mu).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        for v in train.iter_mut().chain(test.iter_mut()) {
            v[k] = (v[k] - mu) / sd;
        }
    }
}

fn nearest_centroid(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], classes: usize) -> f64 {
    let d = train[0].0.len();
    let mut centroids = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (v, k) in train {
        counts[*k] += 1;
        for (c, x) in centroids[*k].iter_mut().zip(v) {
            *c += x;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|x| *x /= *n as f64);
    }
    let correct = test
        .iter()
        .filter(|(v, k)| {
            let dist = |c: &Vec<f64>| c.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..classes)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == *k
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn spectral_features_separate_classes_raw_pixels_do_not() {
    let cfg = SynthConfig::default();
    let s = cfg.size;
    let mut planner = FftPlanner::new();
    let mut raw = Vec::new();
    let mut spec = Vec::new();
    let mut class_means = vec![0.0; cfg.classes];
    for k in 0..cfg.classes {
        for i in 0..cfg.videos_per_class {
            let (frames, _) = synth_video(&cfg, k, i);
            let grays: Vec<Vec<f64>> = frames.iter().map(|f| gray(f.data(), s)).collect();
            let mut pixels = vec![0.0; s * s];
            for g in &grays {
                for (p, v) in pixels.iter_mut().zip(g) {
                    *p += v / grays.len() as f64;
                }
            }
            class_means[k] += pixels.iter().sum::<f64>() / pixels.len() as f64 / cfg.videos_per_class as f64;
            raw.push((pixels, k, i));
            spec.push((spectral_features(&grays, s, &mut planner), k, i));
        }
    }

    let spread = class_means.iter().cloned().fold(f64::MIN, f64::max)
        - class_means.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 0.01, "class mean intensities differ by {spread}: {class_means:?}");

    let cut = cfg.videos_per_class * 7 / 10;
    let split = |rows: Vec<(Vec<f64>, usize, usize)>| {
        let (tr, te): (Vec<_>, Vec<_>) = rows.into_iter().partition(|(_, _, i)| *i < cut);
        let strip = |v: Vec<(Vec<f64>, usize, usize)>| v.into_iter().map(|(x, k, _)| (x, k)).collect::<Vec<_>>();
        (strip(tr), strip(te))
    };

    let (raw_train, raw_test) = split(raw);
    let raw_acc = nearest_centroid(&raw_train, &raw_test, cfg.classes);

    let (mut spec_train, mut spec_test) = split(spec);
    let mut tr: Vec<Vec<f64>> = spec_train.iter().map(|(v, _)| v.clone()).collect();
    let mut te: Vec<Vec<f64>> = spec_test.iter().map(|(v, _)| v.clone()).collect();
    standardise(&mut tr, &mut te);
    for (row, v) in spec_train.iter_mut().zip(tr) {
        row.0 = v;
    }
    for (row, v) in spec_test.iter_mut().zip(te) {
        row.0 = v;
    }
    let spec_acc = nearest_centroid(&spec_train, &spec_test, cfg.classes);

    println!("raw-pixel nearest centroid {:.1}%, spectral {:.1}%", 100.0 * raw_acc, 100.0 * spec_acc);
    assert!(raw_acc < 0.40, "raw pixels separate the classes: {raw_acc}");
    assert!(spec_acc > 0.90, "spectral features fail to separate the classes: {spec_acc}");
}

#[test]
fn generation_is_deterministic() {
    let cfg = SynthConfig {
        size: 32,
        frames: 3,
        ..SynthConfig::default()
    };
    let (a, qa) = synth_video(&cfg, 2, 4);
    let (b, qb) = synth_video(&cfg, 2, 4);
    assert_eq!(qa, qb);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.data(), y.data());
    }
}
