use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Central finite differences against analytic gradients. The closure must be
/// a pure function of its parameters: it is re-evaluated untracked for the
/// differences and once tracked for the analytic pass.
fn check_grads(params: &[Tensor], f: &dyn Fn(&[Tensor]) -> Tensor, tol: f64) {
    let tape = Tape::new();
    let tracked: Vec<Tensor> = params.iter().map(|p| tape.watch(p)).collect();
    let loss = f(&tracked);
    let grads = backward(&loss).unwrap();
    let analytic: Vec<Vec<f64>> = tracked.iter().map(|t| grads.get_or_zeros(t)).collect();

    let h = 1e-5;
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.len() {
            let eval = |delta: f64| {
                let mut ps = params.to_vec();
                let mut d = p.to_vec();
                d[k] += delta;
                ps[pi] = Tensor::from_vec(p.shape().to_vec(), d);
                f(&ps).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[pi][k];
            let err = (a - fd).abs();
            assert!(
                err <= tol * a.abs().max(fd.abs()) || err <= 1e-8,
                "param {pi} elem {k}: analytic {a} vs fd {fd}"
            );
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

#[test]
fn backward_square_at_three() {
    let tape = Tape::new();
    let x = tape.watch(&Tensor::scalar(3.0));
    let y = x.mul(&x);
    let grads = backward(&y).unwrap();
    assert_eq!(grads.get(&x).unwrap(), &[6.0]);
}

#[test]
fn backward_sigmoid_at_zero() {
    let tape = Tape::new();
    let x = tape.watch(&Tensor::scalar(0.0));
    let y = x.sigmoid();
    let grads = backward(&y).unwrap();
    assert!((grads.get(&x).unwrap()[0] - 0.25).abs() < 1e-15);
}

#[test]
fn backward_three_layer_network_matches_finite_differences() {
    let mut r = rng(7);
    let w1 = rand_tensor(&mut r, &[6, 4]);
    let b1 = rand_tensor(&mut r, &[6]);
    let w2 = rand_tensor(&mut r, &[5, 6]);
    let b2 = rand_tensor(&mut r, &[5]);
    let w3 = rand_tensor(&mut r, &[3, 5]);
    let b3 = rand_tensor(&mut r, &[3]);
    let x = rand_tensor(&mut r, &[4]);
    let params = vec![w1, b1, w2, b2, w3, b3, x];
    check_grads(
        &params,
        &|p| {
            let h1 = linear(&p[6], &p[0], &p[1]).unwrap().relu();
            let h2 = linear(&h1, &p[2], &p[3]).unwrap().tanh();
            linear(&h2, &p[4], &p[5]).unwrap().mean()
        },
        1e-4,
    );
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::new();
    let x = tape.watch(&Tensor::vector(vec![1.0, 2.0]));
    let y = x.scale(2.0);
    assert!(matches!(backward(&y), Err(NumericsError::NonScalarLoss { .. })));
}

#[test]
fn backward_rejects_untracked_loss() {
    let y = Tensor::scalar(1.0);
    assert!(matches!(backward(&y), Err(NumericsError::UntrackedLoss)));
}

#[test]
fn backward_rejects_consumed_tape() {
    let tape = Tape::new();
    let x = tape.watch(&Tensor::scalar(2.0));
    let y = x.mul(&x);
    backward(&y).unwrap();
    let z = x.mul(&x);
    assert!(matches!(backward(&z), Err(NumericsError::TapeConsumed)));
}

#[test]
fn untracked_tensors_receive_no_gradient() {
    let tape = Tape::new();
    let x = tape.watch(&Tensor::scalar(2.0));
    let c = Tensor::scalar(5.0);
    let y = x.mul(&c);
    let grads = backward(&y).unwrap();
    assert_eq!(grads.get(&x).unwrap(), &[5.0]);
    assert!(grads.get(&c).is_none());
}

#[test]
fn linear_identity_and_zero_weight() {
    let w = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let b = Tensor::zeros(&[2]);
    let x = Tensor::vector(vec![1.0, 2.0]);
    assert_eq!(linear(&x, &w, &b).unwrap().to_vec(), vec![1.0, 2.0]);

    let w0 = Tensor::zeros(&[1, 2]);
    let b5 = Tensor::vector(vec![5.0]);
    assert_eq!(linear(&x, &w0, &b5).unwrap().to_vec(), vec![5.0]);
}

#[test]
fn linear_shape_mismatch_is_an_error() {
    let w = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2]);
    let x = Tensor::vector(vec![1.0, 2.0]);
    assert!(matches!(linear(&x, &w, &b), Err(NumericsError::ShapeMismatch(_))));
}

/// Direct six-nested-loop convolution, kept free of the production path.
fn conv_reference(x: &[f64], k: &[f64], b: &[f64], ch: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let mut out = vec![0.0; f * h * w];
    for fi in 0..f {
        for i in 0..h {
            for j in 0..w {
                let mut s = b[fi];
                for c in 0..ch {
                    for a in 0..3_isize {
                        for bb in 0..3_isize {
                            let xi = i as isize + a - 1;
                            let xj = j as isize + bb - 1;
                            if xi < 0 || xi >= h as isize || xj < 0 || xj >= w as isize {
                                continue;
                            }
                            s += x[(c * h + xi as usize) * w + xj as usize]
                                * k[((fi * ch + c) * 3 + a as usize) * 3 + bb as usize];
                        }
                    }
                }
                out[(fi * h + i) * w + j] = s;
            }
        }
    }
    out
}

#[test]
fn conv2d_delta_kernel_sums_channels() {
    let mut r = rng(11);
    let x = rand_tensor(&mut r, &[2, 4, 4]);
    let mut k = vec![0.0; 2 * 9];
    k[4] = 1.0; // center of channel 0
    k[9 + 4] = 1.0; // center of channel 1
    let kernels = Tensor::from_vec(vec![1, 2, 3, 3], k);
    let bias = Tensor::zeros(&[1]);
    let y = conv2d(&x, &kernels, &bias).unwrap();
    for i in 0..16 {
        let expect = x.data()[i] + x.data()[16 + i];
        assert!((y.data()[i] - expect).abs() < 1e-15);
    }
}

#[test]
fn conv2d_zero_kernels_emit_bias() {
    let x = Tensor::zeros(&[1, 3, 3]);
    let kernels = Tensor::zeros(&[2, 1, 3, 3]);
    let bias = Tensor::vector(vec![0.5, -1.5]);
    let y = conv2d(&x, &kernels, &bias).unwrap();
    assert!(y.data()[..9].iter().all(|&v| v == 0.5));
    assert!(y.data()[9..].iter().all(|&v| v == -1.5));
}

#[test]
fn conv2d_matches_naive_loop_reference() {
    let mut r = rng(13);
    for _ in 0..5 {
        let x = rand_tensor(&mut r, &[3, 5, 4]);
        let k = rand_tensor(&mut r, &[2, 3, 3, 3]);
        let b = rand_tensor(&mut r, &[2]);
        let y = conv2d(&x, &k, &b).unwrap();
        let want = conv_reference(x.data(), k.data(), b.data(), 3, 5, 4, 2);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut r = rng(17);
    let x = rand_tensor(&mut r, &[2, 3, 3]);
    let k = rand_tensor(&mut r, &[2, 2, 3, 3]);
    let b = rand_tensor(&mut r, &[2]);
    check_grads(
        &[x, k, b],
        &|p| conv2d(&p[0], &p[1], &p[2]).unwrap().mean(),
        1e-4,
    );
}

fn zero_gru(input: usize, hid: usize) -> GruParams {
    GruParams {
        wz: Tensor::zeros(&[hid, input]),
        uz: Tensor::zeros(&[hid, hid]),
        bz: Tensor::zeros(&[hid]),
        wr: Tensor::zeros(&[hid, input]),
        ur: Tensor::zeros(&[hid, hid]),
        br: Tensor::zeros(&[hid]),
        wn: Tensor::zeros(&[hid, input]),
        un: Tensor::zeros(&[hid, hid]),
        bn: Tensor::zeros(&[hid]),
    }
}

#[test]
fn gru_zero_params_halve_hidden_state() {
    let p = zero_gru(3, 4);
    let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
    let h = Tensor::vector(vec![1.0, 2.0, -4.0, 0.0]);
    let h2 = gru_step(&x, &h, &p).unwrap();
    for (a, b) in h2.data().iter().zip(h.data()) {
        assert!((a - 0.5 * b).abs() < 1e-15);
    }

    let h0 = Tensor::zeros(&[4]);
    let x0 = Tensor::zeros(&[3]);
    assert!(gru_step(&x0, &h0, &p).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_gradients_match_finite_differences() {
    let mut r = rng(19);
    let mk = |r: &mut ChaCha8Rng, s: &[usize]| rand_tensor(r, s);
    let params: Vec<Tensor> = vec![
        mk(&mut r, &[4, 3]),
        mk(&mut r, &[4, 4]),
        mk(&mut r, &[4]),
        mk(&mut r, &[4, 3]),
        mk(&mut r, &[4, 4]),
        mk(&mut r, &[4]),
        mk(&mut r, &[4, 3]),
        mk(&mut r, &[4, 4]),
        mk(&mut r, &[4]),
        mk(&mut r, &[3]), // x
        mk(&mut r, &[4]), // h
    ];
    check_grads(
        &params,
        &|p| {
            let gp = GruParams {
                wz: p[0].clone(),
                uz: p[1].clone(),
                bz: p[2].clone(),
                wr: p[3].clone(),
                ur: p[4].clone(),
                br: p[5].clone(),
                wn: p[6].clone(),
                un: p[7].clone(),
                bn: p[8].clone(),
            };
            gru_step(&p[9], &p[10], &gp).unwrap().mean()
        },
        1e-4,
    );
}

#[test]
fn spectral_normalize_identity_unchanged() {
    let w = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let mut st = SpectralState::new(2);
    let y = spectral_normalize(&w, &mut st, 50).unwrap();
    for (a, b) in y.data().iter().zip(w.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn spectral_normalize_diagonal_converges() {
    let w = Tensor::from_vec(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]);
    let mut st = SpectralState::new(2);
    let y = spectral_normalize(&w, &mut st, 200).unwrap();
    assert!((y.data()[0] - 1.0).abs() < 1e-9);
    assert!((y.data()[3] - 1.0 / 3.0).abs() < 1e-9);
    assert!((st.u.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
}

#[test]
fn spectral_normalize_scale_invariant_at_convergence() {
    let mut r = rng(23);
    let w = rand_tensor(&mut r, &[4, 3]);
    let cw = w.scale(7.5);
    let mut s1 = SpectralState::new(4);
    let mut s2 = SpectralState::new(4);
    let a = spectral_normalize(&w, &mut s1, 200).unwrap();
    let b = spectral_normalize(&cw, &mut s2, 200).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn spectral_normalize_zero_matrix_passthrough() {
    let w = Tensor::zeros(&[3, 2]);
    let mut st = SpectralState::new(3);
    let y = spectral_normalize(&w, &mut st, 5).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn spectral_normalize_gradients_match_finite_differences() {
    let mut r = rng(29);
    let w = rand_tensor(&mut r, &[4, 3]);
    let x = rand_tensor(&mut r, &[3]);
    check_grads(
        &[w, x],
        &|p| {
            let mut st = SpectralState::new(4);
            spectral_normalize(&p[0], &mut st, 80).unwrap().matvec(&p[1]).mean()
        },
        1e-4,
    );
}

#[test]
fn adam_zero_grad_leaves_param_unchanged() {
    let mut p = Tensor::vector(vec![1.0, -2.0]);
    let mut st = AdamState::new(2);
    adam_step(&mut p, &[0.0, 0.0], &mut st, &AdamHyper::default()).unwrap();
    assert_eq!(p.to_vec(), vec![1.0, -2.0]);
    assert_eq!(st.t, 1);
}

#[test]
fn adam_first_step_matches_hand_evaluation() {
    let mut p = Tensor::scalar(0.0);
    let mut st = AdamState::new(1);
    let hp = AdamHyper::default();
    adam_step(&mut p, &[1.0], &mut st, &hp).unwrap();
    let expect = -hp.lr / (1.0 + hp.eps);
    assert!((p.item() - expect).abs() < 1e-12, "got {}, want {}", p.item(), expect);
}

#[test]
fn adam_antisymmetric_in_gradient_sign() {
    let mut r = rng(31);
    let g: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut p1 = Tensor::zeros(&[4]);
    let mut p2 = Tensor::zeros(&[4]);
    let mut s1 = AdamState::new(4);
    let mut s2 = AdamState::new(4);
    let hp = AdamHyper::default();
    adam_step(&mut p1, &g, &mut s1, &hp).unwrap();
    adam_step(&mut p2, &neg, &mut s2, &hp).unwrap();
    for (a, b) in p1.data().iter().zip(p2.data()) {
        assert!((a + b).abs() < 1e-15);
    }
}

#[test]
fn adam_shape_mismatch_is_an_error() {
    let mut p = Tensor::zeros(&[3]);
    let mut st = AdamState::new(3);
    assert!(adam_step(&mut p, &[1.0], &mut st, &AdamHyper::default()).is_err());
}

#[test]
fn forward_evaluation_is_deterministic() {
    let mut r = rng(37);
    let w = rand_tensor(&mut r, &[8, 8]);
    let x = rand_tensor(&mut r, &[8]);
    let once = w.matvec(&x).tanh().sum().item();
    let twice = w.matvec(&x).tanh().sum().item();
    assert_eq!(once.to_bits(), twice.to_bits());
}

#[test]
fn serialize_round_trip_is_bit_exact() {
    let dir = std::env::temp_dir().join(format!("commgrid-ser-{}", std::process::id()));
    let mut r = rng(41);
    let a = rand_tensor(&mut r, &[3, 2]);
    let b = rand_tensor(&mut r, &[5]);
    let named = vec![("layer.w".to_string(), &a), ("layer.b".to_string(), &b)];
    serialize::save_params(&dir, &named).unwrap();
    let loaded = serialize::load_params(&dir).unwrap();
    assert_eq!(loaded.len(), 2);
    for ((name, t), (oname, ot)) in loaded.iter().zip([("layer.w", &a), ("layer.b", &b)]) {
        assert_eq!(name, oname);
        assert_eq!(t.shape(), ot.shape());
        for (x, y) in t.data().iter().zip(ot.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn composite_ops_gradients_match_finite_differences() {
    let mut r = rng(43);
    let m = rand_tensor(&mut r, &[4, 3]);
    let v = rand_tensor(&mut r, &[4]);
    check_grads(
        &[m, v],
        &|p| {
            let nm = p[0].row_normalize();
            let sims = nm.matmul_nt(&nm);
            let mask: Vec<bool> = (0..16).map(|i| i % 5 != 0).collect(); // off-diagonal
            let lse = sims.row_logsumexp_masked(&mask);
            let picked = p[1].log_softmax().pick(1);
            let stacked = Tensor::stack_rows(&[&lse, &p[1]]);
            let sq = stacked.mul(&stacked);
            sq.mean().add(&picked).add(&p[1].abs().sum().scale(0.25))
        },
        1e-4,
    );
}
