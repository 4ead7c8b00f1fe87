use capst::layers::{self, uniform, BatchNormState};
use capst::rng::indexed_stream;
use capst::{Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn direct_stats(plane: &[f64]) -> (f64, f64) {
    let n = plane.len() as f64;
    let mu = plane.iter().sum::<f64>() / n;
    let var = plane.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0);
    (mu, var)
}

#[test]
fn statistical_pooling_matches_direct_computation() {
    for seed in 0..1000u64 {
        let mut r = indexed_stream(seed, "statpool", 0);
        let h = r.gen_range(1..9);
        let w = r.gen_range(2..9);
        let offset = r.gen_range(-5.0..5.0);
        let scale = r.gen_range(0.01..10.0);
        let plane: Vec<f64> = (0..h * w).map(|_| offset + scale * r.gen_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[1, h, w], plane.clone()).unwrap());
        let y = layers::statistical_pooling(&mut t, x).unwrap();
        let (mu, var) = direct_stats(&plane);
        let got = t.data(y);
        assert!((got[0] - mu).abs() < 1e-6, "mean {} vs {mu}", got[0]);
        assert!((got[1] - var).abs() < 1e-6 * var.max(1.0), "variance {} vs {var}", got[1]);
    }
}

#[test]
fn statistical_pooling_is_exactly_permutation_invariant() {
    for seed in 0..200u64 {
        let mut r = indexed_stream(seed, "statpool-perm", 0);
        let (k, h, w) = (3, 7, 6);
        let x: Tensor<f64> = uniform(&mut r, &[k, h, w], 3.0);
        let mut shuffled = x.data().to_vec();
        for plane in shuffled.chunks_mut(h * w) {
            plane.shuffle(&mut r);
        }
        let mut t = Tape::new();
        let a = t.constant(x);
        let b = t.constant(Tensor::new(&[k, h, w], shuffled).unwrap());
        let ya = layers::statistical_pooling(&mut t, a).unwrap();
        let yb = layers::statistical_pooling(&mut t, b).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t.data(ya)), bits(t.data(yb)));
    }
    // Same in single precision, where summation order matters more.
    let mut r = indexed_stream(1, "statpool-perm32", 0);
    let x: Tensor<f32> = uniform(&mut r, &[4, 14, 14], 100.0);
    let mut shuffled = x.data().to_vec();
    for plane in shuffled.chunks_mut(196) {
        plane.shuffle(&mut r);
    }
    let mut t = Tape::new();
    let a = t.constant(x);
    let b = t.constant(Tensor::new(&[4, 14, 14], shuffled).unwrap());
    let ya = layers::statistical_pooling(&mut t, a).unwrap();
    let yb = layers::statistical_pooling(&mut t, b).unwrap();
    assert_eq!(t.data(ya), t.data(yb));
}

#[test]
fn statistical_pooling_rejects_single_pixel() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[2, 1, 1]));
    assert!(layers::statistical_pooling(&mut t, x).is_err());
}

proptest! {
    #[test]
    fn mfm_dominates_both_halves(seed in any::<u64>(), c in 1usize..5, hw in 1usize..5) {
        let x: Tensor<f64> = uniform(&mut indexed_stream(seed, "mfm", 0), &[2 * c, hw, hw], 2.0);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = layers::mfm(&mut t, v).unwrap();
        let n = c * hw * hw;
        let (a, b) = x.data().split_at(n);
        for (i, &out) in t.data(y).iter().enumerate() {
            prop_assert!(out >= a[i] && out >= b[i]);
            prop_assert!(out == a[i] || out == b[i]);
        }
    }

    #[test]
    fn spatial_attention_never_amplifies(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let mut r = indexed_stream(seed, "sa", 0);
        let x: Tensor<f64> = uniform(&mut r, &[2, 3, 6, 6], 4.0);
        let w: Tensor<f64> = uniform(&mut r, &[1, 2, k, k], 3.0);
        let b: Tensor<f64> = uniform(&mut r, &[1], 3.0);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w), t.constant(b));
        let y = layers::spatial_attention(&mut t, xv, wv, bv).unwrap();
        for (o, i) in t.data(y).iter().zip(x.data()) {
            prop_assert!(o.abs() <= i.abs());
            prop_assert!(o * i >= 0.0);
        }
    }

    #[test]
    fn batchnorm_inference_is_affine(seed in any::<u64>()) {
        // With identity running statistics, normalising twice equals
        // applying the affine map twice.
        let mut r = indexed_stream(seed, "bn", 0);
        let c = 3;
        let x: Tensor<f64> = uniform(&mut r, &[2, c, 2, 2], 5.0);
        let gamma: Tensor<f64> = uniform(&mut r, &[c], 2.0);
        let beta: Tensor<f64> = uniform(&mut r, &[c], 2.0);
        let mut state = BatchNormState::<f64>::new(c, 0.1, 1e-5);
        state.training_mode = false;
        let mut t = Tape::new();
        let (xv, g, b) = (t.constant(x.clone()), t.constant(gamma.clone()), t.constant(beta.clone()));
        let (once, stats) = layers::batchnorm(&mut t, xv, g, b, &state).unwrap();
        prop_assert!(stats.is_none());
        let (twice, _) = layers::batchnorm(&mut t, once, g, b, &state).unwrap();
        let s = 1.0 / (1.0 + 1e-5f64).sqrt();
        for (i, (&got, &x0)) in t.data(twice).iter().zip(x.data()).enumerate() {
            let ch = (i / 4) % c;
            let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
            let want = gm * s * (gm * s * x0 + bt) + bt;
            prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        // Inference output depends on nothing but the input.
        let (again, _) = layers::batchnorm(&mut t, xv, g, b, &state).unwrap();
        prop_assert_eq!(t.data(again), t.data(once));
    }
}

#[test]
fn batchnorm_running_statistics_follow_momentum() {
    let mut state = BatchNormState::<f64>::new(2, 0.1, 1e-5);
    let x = Tensor::new(&[2, 2, 1, 2], vec![1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 10.0, 14.0]).unwrap();
    let mut t = Tape::new();
    let (xv, g, b) = (
        t.constant(x),
        t.constant(Tensor::full(&[2], 1.0)),
        t.constant(Tensor::zeros(&[2])),
    );
    let (_, stats) = layers::batchnorm(&mut t, xv, g, b, &state).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![4.0, 11.0]);
    state.update(&stats);
    assert!((state.running_mean[0] - 0.4).abs() < 1e-12);
    assert!((state.running_mean[1] - 1.1).abs() < 1e-12);
    assert!(state.running_var.iter().all(|&v| v > 0.0));
}
