use capst::capsule::{dynamic_routing, squash, CapsuleConfig};
use capst::layers::uniform;
use capst::rng::indexed_stream;
use capst::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Straight-line routing written from the algorithm description, sharing no
/// code with the library.
struct Oracle {
    v: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

fn oracle_squash(s: &[f64], eps: f64) -> Vec<f64> {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    let n = n2.sqrt();
    s.iter().map(|x| n2 / (1.0 + n2) * x / (n + eps)).collect()
}

fn oracle_route(u: &[Vec<f64>], w: &[f64], bias: &[f64], j: usize, d: usize, iters: usize, squash_u: bool) -> Oracle {
    let p = u.len();
    let dp = u[0].len();
    let eps = 1e-8;
    let mut uhat = vec![vec![vec![0.0; d]; j]; p];
    for i in 0..p {
        for jj in 0..j {
            let mut row = vec![0.0; d];
            for (k, r) in row.iter_mut().enumerate() {
                let mut acc = bias[(i * j + jj) * d + k];
                for m in 0..dp {
                    acc += w[((i * j + jj) * d + k) * dp + m] * u[i][m];
                }
                *r = acc;
            }
            uhat[i][jj] = if squash_u { oracle_squash(&row, eps) } else { row };
        }
    }
    let mut b = vec![vec![0.0; j]; p];
    let mut c = vec![vec![0.0; j]; p];
    let mut v = vec![vec![0.0; d]; j];
    for _ in 0..iters {
        for i in 0..p {
            let m = b[i].iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = b[i].iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            c[i] = e.iter().map(|x| x / z).collect();
        }
        for jj in 0..j {
            let mut s = vec![0.0; d];
            for i in 0..p {
                for k in 0..d {
                    s[k] += c[i][jj] * uhat[i][jj][k];
                }
            }
            v[jj] = oracle_squash(&s, eps);
        }
        for i in 0..p {
            for jj in 0..j {
                let dot: f64 = (0..d).map(|k| v[jj][k] * uhat[i][jj][k]).sum();
                b[i][jj] += dot;
            }
        }
    }
    Oracle { v, c, b }
}

fn small_config(d_in: usize, d_out: usize, iters: usize) -> CapsuleConfig {
    // Two conv1d channels with kernel 1 give primary_dim == conv_channels.
    CapsuleConfig {
        num_primary: 3,
        num_output: 5,
        conv_channels: d_in,
        conv1d_channels: 2,
        conv1d_kernel: 1,
        output_dim: d_out,
        routing_iters: iters,
        ..CapsuleConfig::default()
    }
}

struct Instance {
    u: Vec<Vec<f64>>,
    w: Tensor<f64>,
    b: Tensor<f64>,
}

fn instance(seed: u64, cfg: &CapsuleConfig) -> Instance {
    let mut r = indexed_stream(seed, "routing-instance", 0);
    let dp = cfg.primary_dim();
    let scale = r.gen_range(0.1..3.0);
    let u = (0..cfg.num_primary)
        .map(|_| uniform::<f64>(&mut r, &[dp], scale).into_data())
        .collect();
    let w = uniform(&mut r, &[cfg.num_primary, cfg.num_output, cfg.output_dim, dp], 1.0);
    let b = uniform(&mut r, &[cfg.num_primary, cfg.num_output, cfg.output_dim], 0.3);
    Instance { u, w, b }
}

fn run(inst: &Instance, cfg: &CapsuleConfig) -> (Vec<f64>, capst::capsule::CapsuleState<f64>) {
    let mut t = Tape::new();
    let us: Vec<_> = inst
        .u
        .iter()
        .map(|u| t.constant(Tensor::new(&[u.len()], u.clone()).unwrap()))
        .collect();
    let w = t.constant(inst.w.clone());
    let b = t.constant(inst.b.clone());
    let (v, mut states) = dynamic_routing(&mut t, &us, w, b, cfg).unwrap();
    (t.data(v).to_vec(), states.remove(0))
}

#[test]
fn routing_matches_brute_force_oracle() {
    for seed in 0..100u64 {
        let d_in = if seed % 2 == 0 { 4 } else { 8 };
        let d_out = if seed % 3 == 0 { 8 } else { 4 };
        let iters = 1 + seed as usize % 4;
        let mut cfg = small_config(d_in, d_out, iters);
        cfg.squash_predictions = seed % 5 != 0;
        assert_eq!(cfg.primary_dim(), d_in);
        let inst = instance(seed, &cfg);
        let (v, state) = run(&inst, &cfg);
        let want = oracle_route(
            &inst.u,
            inst.w.data(),
            inst.b.data(),
            cfg.num_output,
            d_out,
            iters,
            cfg.squash_predictions,
        );
        let flat_v: Vec<f64> = want.v.concat();
        for (a, e) in v.iter().zip(&flat_v) {
            assert!((a - e).abs() < 1e-6, "seed {seed}: v {a} vs {e}");
        }
        for (a, e) in state.couplings.data().iter().zip(want.c.concat()) {
            assert!((a - e).abs() < 1e-6, "seed {seed}: c {a} vs {e}");
        }
        for (a, e) in state.logits.data().iter().zip(want.b.concat()) {
            assert!((a - e).abs() < 1e-6, "seed {seed}: b {a} vs {e}");
        }
    }
}

fn softmax_rows(logits: &[f64], cols: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(cols)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        })
        .collect()
}

#[test]
fn couplings_normalised_and_outputs_inside_unit_ball() {
    for seed in 0..1000u64 {
        let mut r = indexed_stream(seed, "routing-invariants", 0);
        let cfg = CapsuleConfig {
            conv_channels: 8,
            conv1d_kernel: 1,
            output_dim: 4 + seed as usize % 5,
            routing_iters: 1 + seed as usize % 5,
            squash_predictions: r.gen_bool(0.5),
            ..CapsuleConfig::default()
        };
        let inst = instance(seed, &cfg);
        let (v, state) = run(&inst, &cfg);
        let j = cfg.num_output;
        for (k, logits) in state.logit_history[..cfg.routing_iters].iter().enumerate() {
            for row in softmax_rows(logits.data(), j) {
                let total: f64 = row.iter().sum();
                assert!((total - 1.0).abs() < 1e-6, "seed {seed} iteration {k}: {total}");
            }
        }
        for row in state.couplings.data().chunks(j) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for cap in v.chunks(cfg.output_dim) {
            let n = cap.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n < 1.0, "seed {seed}: capsule norm {n}");
        }
    }
}

#[test]
fn squash_norm_is_bounded_and_monotone() {
    let mut r = indexed_stream(3, "squash-norms", 0);
    let dir: Tensor<f64> = uniform(&mut r, &[256], 1.0);
    let unit_norm = dir.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut norms: Vec<f64> = (0..1000).map(|_| 10f64.powf(r.gen_range(-6.0..3.0))).collect();
    norms.sort_by(f64::total_cmp);
    let mut prev = -1.0;
    for n in norms {
        let mut t = Tape::new();
        let s = t.constant(Tensor::new(&[256], dir.data().iter().map(|x| x / unit_norm * n).collect()).unwrap());
        let v = squash(&mut t, s, 1e-8);
        let out = t.data(v).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((0.0..1.0).contains(&out), "norm {n} -> {out}");
        assert!(out >= prev, "not monotone at {n}: {out} < {prev}");
        prev = out;
    }
}

proptest! {
    #[test]
    fn squash_keeps_direction(v in prop::collection::vec(-100.0f64..100.0, 2..64)) {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(n > 1e-4);
        let mut t = Tape::new();
        let s = t.constant(Tensor::new(&[v.len()], v.clone()).unwrap());
        let q = squash(&mut t, s, 1e-8);
        let out = t.data(q);
        let qn = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = out.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (qn * n);
        prop_assert!(cos > 1.0 - 1e-6);
        prop_assert!(qn < 1.0);
    }

    #[test]
    fn couplings_sum_to_one_for_any_logits(
        logits in prop::collection::vec(-50.0f64..50.0, 15),
    ) {
        let mut t = Tape::new();
        let b = t.constant(Tensor::new(&[3, 5], logits).unwrap());
        let c = t.softmax(b);
        for row in t.data(c).chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn winner_is_reinforced(seed in any::<u64>(), winner in 0usize..5) {
        // One prediction far longer than the rest: its logit must grow with
        // every iteration.
        let cfg = CapsuleConfig {
            conv_channels: 8,
            conv1d_kernel: 1,
            output_dim: 6,
            routing_iters: 4,
            squash_predictions: false,
            ..CapsuleConfig::default()
        };
        let dp = cfg.primary_dim();
        let mut r = indexed_stream(seed, "winner", 0);
        let u: Vec<Vec<f64>> = (0..cfg.num_primary).map(|_| uniform::<f64>(&mut r, &[dp], 1.0).into_data()).collect();
        let mut w: Tensor<f64> = uniform(&mut r, &[cfg.num_primary, cfg.num_output, cfg.output_dim, dp], 0.01);
        let big = uniform::<f64>(&mut r, &[cfg.output_dim, dp], 1.0);
        let row = cfg.output_dim * dp;
        let start = winner * row;
        w.data_mut()[start..start + row].copy_from_slice(big.data());
        let u0n = u[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(u0n > 0.3);
        let inst = Instance { u, w, b: Tensor::zeros(&[cfg.num_primary, cfg.num_output, cfg.output_dim]) };
        let (_, state) = run(&inst, &cfg);
        let b_hist: Vec<f64> = state.logit_history.iter().map(|h| h.data()[winner]).collect();
        for pair in b_hist.windows(2) {
            prop_assert!(pair[1] > pair[0], "{b_hist:?}");
        }
    }
}
