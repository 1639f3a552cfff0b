use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
}

fn identity(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
}

/// Runs the parallel path for one head on plain tensors and returns the
/// output value.
fn parallel_head(x: &Tensor, head: &RetentionHeadParams, grid: &TokenGrid) -> Tensor {
    let mut tape = Tape::no_grad();
    let xv = tape.leaf(x.clone());
    let wq = tape.leaf(head.w_q.clone());
    let wk = tape.leaf(head.w_k.clone());
    let wv = tape.leaf(head.w_v.clone());
    let plan = RotationPlan::new(grid, &head.theta_freqs, head.d_head()).unwrap();
    let mask = build_decay_mask(grid, head.gamma).unwrap();
    let q = tape.matmul(xv, wq).unwrap();
    let k = tape.matmul(xv, wk).unwrap();
    let v = tape.matmul(xv, wv).unwrap();
    let qr = apply_rotation(&mut tape, q, &plan, false).unwrap();
    let kr = apply_rotation(&mut tape, k, &plan, false).unwrap();
    let out = retention_parallel(&mut tape, qr, kr, v, &mask).unwrap();
    tape.value(out).clone()
}

fn random_head(
    rng: &mut ChaCha8Rng,
    d_model: usize,
    d_head: usize,
    gamma: f64,
) -> RetentionHeadParams {
    RetentionHeadParams::new(
        rand_tensor(rng, &[d_model, d_head]),
        rand_tensor(rng, &[d_model, d_head]),
        rand_tensor(rng, &[d_model, d_head]),
        gamma,
        theta_frequencies(d_head, 10_000.0).unwrap(),
    )
    .unwrap()
}

#[test]
fn patchify_counts_tokens_like_the_formula() {
    // 224x224, P=16 -> 196 tokens of 16*16*3 features
    let mut tape = Tape::no_grad();
    let x = tape.leaf(Tensor::zeros(&[1, 3, 224, 224]));
    let (tok, grid) = patchify(&mut tape, x, 16).unwrap();
    assert_eq!(tape.value(tok).shape(), &[1, 196, 16 * 16 * 3]);
    assert_eq!(grid.len(), 196);
    assert_eq!(grid.grid(), (14, 14));
}

#[test]
fn patchify_coords_are_row_major() {
    let mut tape = Tape::no_grad();
    let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 4]));
    let (_, grid) = patchify(&mut tape, x, 2).unwrap();
    assert_eq!(grid.coords(), &[(0, 0), (0, 1), (1, 0), (1, 1)]);
}

#[test]
fn patchify_rejects_indivisible_dims() {
    let mut tape = Tape::no_grad();
    let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 6]));
    assert!(patchify(&mut tape, x, 4).is_err());
}

#[test]
fn patchify_layout_is_channel_major() {
    // 1 batch, 2 channels, 2x2 image, P=1: each token is [c0, c1] at its pixel
    let mut tape = Tape::no_grad();
    let data: Vec<f64> = (0..8).map(|v| v as f64).collect(); // c0: 0..3, c1: 4..7
    let x = tape.leaf(Tensor::new(vec![1, 2, 2, 2], data).unwrap());
    let (tok, _) = patchify(&mut tape, x, 1).unwrap();
    assert_eq!(
        tape.value(tok).data(),
        &[0., 4., 1., 5., 2., 6., 3., 7.]
    );
}

#[test]
fn unpatchify_inverts_patchify() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &p in &[1usize, 2, 4] {
        let x_t = rand_tensor(&mut rng, &[2, 3, 8, 8]);
        let mut tape = Tape::no_grad();
        let x = tape.leaf(x_t.clone());
        let (tok, grid) = patchify(&mut tape, x, p).unwrap();
        let back = unpatchify(&mut tape, tok, &grid, 3, p).unwrap();
        assert!(tape.value(back).max_abs_diff(&x_t) < 1e-15);
    }
}

#[test]
fn embed_identity_matrix_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let patches_t = rand_tensor(&mut rng, &[1, 4, 6]);
    let mut tape = Tape::no_grad();
    let p = tape.leaf(patches_t.clone());
    let e = tape.leaf(identity(6));
    let out = embed(&mut tape, p, e, None).unwrap();
    assert!(tape.value(out).max_abs_diff(&patches_t) < 1e-15);
}

#[test]
fn embed_zero_patch_gives_zero_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut tape = Tape::no_grad();
    let p = tape.leaf(Tensor::zeros(&[1, 2, 5]));
    let e = tape.leaf(rand_tensor(&mut rng, &[5, 7]));
    let out = embed(&mut tape, p, e, None).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn embed_matches_direct_matrix_vector_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let patches_t = rand_tensor(&mut rng, &[2, 3, 5]);
    let e_t = rand_tensor(&mut rng, &[5, 4]);
    let mut tape = Tape::no_grad();
    let p = tape.leaf(patches_t.clone());
    let e = tape.leaf(e_t.clone());
    let out = embed(&mut tape, p, e, None).unwrap();
    let got = tape.value(out);
    // independent triple loop
    for b in 0..2 {
        for t in 0..3 {
            for d in 0..4 {
                let mut acc = 0.0;
                for i in 0..5 {
                    acc += patches_t.data()[(b * 3 + t) * 5 + i] * e_t.data()[i * 4 + d];
                }
                let g = got.data()[(b * 3 + t) * 4 + d];
                assert!((g - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn decay_mask_examples() {
    // two tokens at (0,0) and (1,1), gamma 0.5 -> off-diagonal 0.25
    let grid = TokenGrid {
        coords: Arc::new(vec![(0, 0), (1, 1)]),
        grid: (2, 2),
    };
    let mask = build_decay_mask(&grid, 0.5).unwrap();
    assert_eq!(mask.matrix().data(), &[1.0, 0.25, 0.25, 1.0]);

    let grid = TokenGrid::new(3, 3);
    let ones = build_decay_mask(&grid, 1.0).unwrap();
    assert!(ones.matrix().data().iter().all(|&v| v == 1.0));

    assert!(build_decay_mask(&grid, 0.0).is_err());
    assert!(build_decay_mask(&grid, 1.5).is_err());
}

#[test]
fn decay_mask_properties_over_random_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let hp = rng.random_range(1..=6);
        let wp = rng.random_range(1..=6);
        let gamma = rng.random_range(0.5..1.0);
        let grid = TokenGrid::new(hp, wp);
        let n = grid.len();
        let m = build_decay_mask(&grid, gamma).unwrap();
        let d = m.matrix().data();
        for a in 0..n {
            assert_eq!(d[a * n + a], 1.0, "unit diagonal");
            for b in 0..n {
                assert_eq!(d[a * n + b], d[b * n + a], "symmetry");
                assert!(d[a * n + b] > 0.0 && d[a * n + b] <= 1.0, "range");
            }
        }
        // strictly decreasing in Manhattan distance
        let coords = grid.coords();
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let dab = coords[a].0.abs_diff(coords[b].0) + coords[a].1.abs_diff(coords[b].1);
                    let dac = coords[a].0.abs_diff(coords[c].0) + coords[a].1.abs_diff(coords[c].1);
                    if dab < dac {
                        assert!(d[a * n + b] > d[a * n + c]);
                    }
                }
            }
        }
    }
}

#[test]
fn rotation_at_origin_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let grid = TokenGrid {
        coords: Arc::new(vec![(0, 0)]),
        grid: (1, 1),
    };
    let theta = theta_frequencies(8, 10_000.0).unwrap();
    let plan = RotationPlan::new(&grid, &theta, 8).unwrap();
    let x_t = rand_tensor(&mut rng, &[1, 1, 8]);
    let mut tape = Tape::no_grad();
    let x = tape.leaf(x_t.clone());
    let y = apply_rotation(&mut tape, x, &plan, false).unwrap();
    assert!(tape.value(y).max_abs_diff(&x_t) < 1e-15);
}

#[test]
fn rotation_preserves_pair_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let grid = TokenGrid::new(4, 4);
    let theta = theta_frequencies(8, 10_000.0).unwrap();
    let plan = RotationPlan::new(&grid, &theta, 8).unwrap();
    let x_t = rand_tensor(&mut rng, &[2, 16, 8]);
    let mut tape = Tape::no_grad();
    let x = tape.leaf(x_t.clone());
    for conj in [false, true] {
        let y = apply_rotation(&mut tape, x, &plan, conj).unwrap();
        let yd = tape.value(y).data();
        for i in (0..x_t.numel()).step_by(2) {
            let before = x_t.data()[i].hypot(x_t.data()[i + 1]);
            let after = yd[i].hypot(yd[i + 1]);
            assert!((before - after).abs() < 1e-12, "norm drift");
        }
    }
}

#[test]
fn rotation_rejects_indivisible_head_dim() {
    let grid = TokenGrid::new(2, 2);
    let theta = Tensor::ones(&[1]);
    assert!(RotationPlan::new(&grid, &theta, 6).is_err());
}

#[test]
fn rotated_products_depend_only_on_relative_position() {
    // dot(rot(q, n), rot(k, m)) must equal the dot computed with the explicit
    // relative angle (xn - xm) * theta_d applied to q (per axis half).
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let d_head = 8;
    let quarter = d_head / 4;
    let grid = TokenGrid::new(5, 5);
    let theta = theta_frequencies(d_head, 10_000.0).unwrap();
    let plan = RotationPlan::new(&grid, &theta, d_head).unwrap();
    let q_t = rand_tensor(&mut rng, &[1, 25, d_head]);
    let k_t = rand_tensor(&mut rng, &[1, 25, d_head]);

    let mut tape = Tape::no_grad();
    let q = tape.leaf(q_t.clone());
    let k = tape.leaf(k_t.clone());
    let qr = apply_rotation(&mut tape, q, &plan, false).unwrap();
    let kr = apply_rotation(&mut tape, k, &plan, false).unwrap();
    let qr_d = tape.value(qr).data();
    let kr_d = tape.value(kr).data();

    let coords = grid.coords();
    for n in 0..25 {
        for m in 0..25 {
            let rotated_dot: f64 = (0..d_head)
                .map(|d| qr_d[n * d_head + d] * kr_d[m * d_head + d])
                .sum();
            // explicit relative angle on the raw q vector
            let mut relative_dot = 0.0;
            for pair in 0..d_head / 2 {
                let delta = if pair < quarter {
                    (coords[n].0 as f64 - coords[m].0 as f64) * theta.data()[pair]
                } else {
                    (coords[n].1 as f64 - coords[m].1 as f64) * theta.data()[pair - quarter]
                };
                let (s, c) = delta.sin_cos();
                let (q1, q2) = (q_t.data()[n * d_head + 2 * pair], q_t.data()[n * d_head + 2 * pair + 1]);
                let rq1 = q1 * c - q2 * s;
                let rq2 = q1 * s + q2 * c;
                relative_dot += rq1 * k_t.data()[m * d_head + 2 * pair]
                    + rq2 * k_t.data()[m * d_head + 2 * pair + 1];
            }
            assert!(
                (rotated_dot - relative_dot).abs() < 1e-10,
                "tokens {n},{m}: {rotated_dot} vs {relative_dot}"
            );
        }
    }
}

#[test]
fn conjugate_rotation_is_the_adjoint() {
    // dot(rot(u), v) == dot(u, rot_conj(v))
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let grid = TokenGrid::new(3, 3);
    let theta = theta_frequencies(4, 10_000.0).unwrap();
    let plan = RotationPlan::new(&grid, &theta, 4).unwrap();
    let u_t = rand_tensor(&mut rng, &[1, 9, 4]);
    let v_t = rand_tensor(&mut rng, &[1, 9, 4]);
    let mut tape = Tape::no_grad();
    let u = tape.leaf(u_t.clone());
    let v = tape.leaf(v_t.clone());
    let ru = apply_rotation(&mut tape, u, &plan, false).unwrap();
    let cv = apply_rotation(&mut tape, v, &plan, true).unwrap();
    let lhs: f64 = tape
        .value(ru)
        .data()
        .iter()
        .zip(v_t.data())
        .map(|(a, b)| a * b)
        .sum();
    let rhs: f64 = u_t
        .data()
        .iter()
        .zip(tape.value(cv).data())
        .map(|(a, b)| a * b)
        .sum();
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn retention_single_token_is_scalar_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let grid = TokenGrid::new(1, 1);
    let q_t = rand_tensor(&mut rng, &[1, 1, 4]);
    let k_t = rand_tensor(&mut rng, &[1, 1, 4]);
    let v_t = rand_tensor(&mut rng, &[1, 1, 4]);
    let mask = build_decay_mask(&grid, 0.9).unwrap();
    let mut tape = Tape::no_grad();
    let q = tape.leaf(q_t.clone());
    let k = tape.leaf(k_t.clone());
    let v = tape.leaf(v_t.clone());
    let out = retention_parallel(&mut tape, q, k, v, &mask).unwrap();
    let qk: f64 = q_t.data().iter().zip(k_t.data()).map(|(a, b)| a * b).sum();
    for (o, vv) in tape.value(out).data().iter().zip(v_t.data()) {
        assert!((o - qk * vv).abs() < 1e-12);
    }
}

#[test]
fn retention_with_ones_mask_is_plain_qkt_v() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let grid = TokenGrid::new(2, 3);
    let q_t = rand_tensor(&mut rng, &[2, 6, 4]);
    let k_t = rand_tensor(&mut rng, &[2, 6, 4]);
    let v_t = rand_tensor(&mut rng, &[2, 6, 4]);
    let mask = build_decay_mask(&grid, 1.0).unwrap();

    let mut tape = Tape::no_grad();
    let q = tape.leaf(q_t);
    let k = tape.leaf(k_t);
    let v = tape.leaf(v_t);
    let out = retention_parallel(&mut tape, q, k, v, &mask).unwrap();
    let kt = tape.transpose_last2(k).unwrap();
    let scores = tape.matmul(q, kt).unwrap();
    let plain = tape.matmul(scores, v).unwrap();
    assert!(tape.value(out).max_abs_diff(tape.value(plain)) < 1e-12);
}

#[test]
fn parallel_matches_recurrent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for &(hp, wp) in &[(1usize, 4usize), (4, 4), (5, 5), (8, 8)] {
        for &gamma in &[0.9, 0.96875, 1.0] {
            let grid = TokenGrid::new(hp, wp);
            let head = random_head(&mut rng, 8, 8, gamma);
            let x = rand_tensor(&mut rng, &[1, grid.len(), 8]);
            let fast = parallel_head(&x, &head, &grid);
            let slow = retention_recurrent_oracle(&x, &head, &grid).unwrap();
            let diff = fast.max_abs_diff(&slow);
            assert!(diff < 1e-10, "grid {hp}x{wp} gamma {gamma}: diff {diff}");
        }
    }
}

#[test]
fn oracle_single_token_matches_parallel() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let grid = TokenGrid::new(1, 1);
    let head = random_head(&mut rng, 4, 4, 0.9);
    let x = rand_tensor(&mut rng, &[2, 1, 4]);
    let fast = parallel_head(&x, &head, &grid);
    let slow = retention_recurrent_oracle(&x, &head, &grid).unwrap();
    assert!(fast.max_abs_diff(&slow) < 1e-12);
}

#[test]
fn oracle_without_decay_or_phase_is_plain_qkt_v() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let grid = TokenGrid::new(2, 2);
    let head = RetentionHeadParams::new(
        rand_tensor(&mut rng, &[4, 4]),
        rand_tensor(&mut rng, &[4, 4]),
        rand_tensor(&mut rng, &[4, 4]),
        1.0,
        Tensor::zeros(&[1]),
    )
    .unwrap();
    let x = rand_tensor(&mut rng, &[1, 4, 4]);
    let slow = retention_recurrent_oracle(&x, &head, &grid).unwrap();

    let mut tape = Tape::no_grad();
    let xv = tape.leaf(x);
    let wq = tape.leaf(head.w_q.clone());
    let wk = tape.leaf(head.w_k.clone());
    let wv = tape.leaf(head.w_v.clone());
    let q = tape.matmul(xv, wq).unwrap();
    let k = tape.matmul(xv, wk).unwrap();
    let v = tape.matmul(xv, wv).unwrap();
    let kt = tape.transpose_last2(k).unwrap();
    let s = tape.matmul(q, kt).unwrap();
    let plain = tape.matmul(s, v).unwrap();
    assert!(tape.value(plain).max_abs_diff(&slow) < 1e-12);
}

#[test]
fn retention_output_invariant_under_coordinate_translation() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let grid = TokenGrid::new(4, 4);
    let head = random_head(&mut rng, 8, 8, 0.96875);
    let x = rand_tensor(&mut rng, &[1, 16, 8]);
    let base = parallel_head(&x, &head, &grid);
    for &(dx, dy) in &[(1usize, 0usize), (0, 7), (3, 5)] {
        let shifted = grid.translated(dx, dy);
        let moved = parallel_head(&x, &head, &shifted);
        assert!(
            base.max_abs_diff(&moved) < 1e-10,
            "translation ({dx},{dy}) changed output"
        );
    }
}

#[test]
fn retention_is_linear_in_v() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let grid = TokenGrid::new(3, 3);
    let mask = build_decay_mask(&grid, 0.9).unwrap();
    let q_t = rand_tensor(&mut rng, &[1, 9, 4]);
    let k_t = rand_tensor(&mut rng, &[1, 9, 4]);
    let v_t = rand_tensor(&mut rng, &[1, 9, 4]);
    let c = 3.7;

    let run = |v_in: Tensor| {
        let mut tape = Tape::no_grad();
        let q = tape.leaf(q_t.clone());
        let k = tape.leaf(k_t.clone());
        let v = tape.leaf(v_in);
        let out = retention_parallel(&mut tape, q, k, v, &mask).unwrap();
        tape.value(out).clone()
    };
    let base = run(v_t.clone());
    let scaled = run(v_t.map(|x| c * x));
    assert!(scaled.max_abs_diff(&base.map(|x| c * x)) < 1e-12);
}

fn block_vars(
    tape: &mut Tape,
    params: &std::collections::BTreeMap<String, Var>,
    heads: usize,
    ffn: bool,
) -> RetentionBlockVars {
    let _ = tape;
    RetentionBlockVars {
        ln1: (params["ln1.g"], params["ln1.b"]),
        heads: (0..heads)
            .map(|h| RetentionHeadVars {
                w_q: params[&format!("h{h}.wq")],
                w_k: params[&format!("h{h}.wk")],
                w_v: params[&format!("h{h}.wv")],
                gamma: head_gamma(h),
            })
            .collect(),
        w_out: params["wout"],
        out_ln: (params["oln.g"], params["oln.b"]),
        ffn: if ffn {
            Some((
                params["ln2.g"],
                params["ln2.b"],
                FeedForwardVars {
                    w1: params["ffn.w1"],
                    b1: params["ffn.b1"],
                    w2: params["ffn.w2"],
                    b2: params["ffn.b2"],
                },
            ))
        } else {
            None
        },
    }
}

fn block_param_tensors(
    rng: &mut ChaCha8Rng,
    d_model: usize,
    heads: usize,
    zero_out: bool,
) -> std::collections::BTreeMap<String, Tensor> {
    let d_head = d_model / heads;
    let mut m = std::collections::BTreeMap::new();
    m.insert("ln1.g".into(), Tensor::ones(&[d_model]));
    m.insert("ln1.b".into(), Tensor::zeros(&[d_model]));
    for h in 0..heads {
        m.insert(format!("h{h}.wq"), rand_tensor(rng, &[d_model, d_head]));
        m.insert(format!("h{h}.wk"), rand_tensor(rng, &[d_model, d_head]));
        m.insert(format!("h{h}.wv"), rand_tensor(rng, &[d_model, d_head]));
    }
    m.insert(
        "wout".into(),
        if zero_out {
            Tensor::zeros(&[d_model, d_model])
        } else {
            rand_tensor(rng, &[d_model, d_model])
        },
    );
    m.insert("oln.g".into(), Tensor::ones(&[d_model]));
    m.insert("oln.b".into(), Tensor::zeros(&[d_model]));
    m.insert("ln2.g".into(), Tensor::ones(&[d_model]));
    m.insert("ln2.b".into(), Tensor::zeros(&[d_model]));
    let e = 2 * d_model;
    m.insert("ffn.w1".into(), rand_tensor(rng, &[d_model, e]));
    m.insert("ffn.b1".into(), Tensor::zeros(&[e]));
    m.insert(
        "ffn.w2".into(),
        if zero_out {
            Tensor::zeros(&[e, d_model])
        } else {
            rand_tensor(rng, &[e, d_model])
        },
    );
    m.insert("ffn.b2".into(), Tensor::zeros(&[d_model]));
    m
}

#[test]
fn single_head_reduces_to_normed_parallel_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let grid = TokenGrid::new(2, 2);
    let d = 8;
    let theta = theta_frequencies(d, 10_000.0).unwrap();
    let x_t = rand_tensor(&mut rng, &[1, 4, d]);
    let head_t = random_head(&mut rng, d, d, head_gamma(0));

    let mut tape = Tape::no_grad();
    let x = tape.leaf(x_t.clone());
    let wq = tape.leaf(head_t.w_q.clone());
    let wk = tape.leaf(head_t.w_k.clone());
    let wv = tape.leaf(head_t.w_v.clone());
    let wout = tape.leaf(identity(d));
    let g = tape.leaf(Tensor::ones(&[d]));
    let b = tape.leaf(Tensor::zeros(&[d]));
    let mhr = multi_head_retention(
        &mut tape,
        x,
        &[RetentionHeadVars {
            w_q: wq,
            w_k: wk,
            w_v: wv,
            gamma: head_gamma(0),
        }],
        wout,
        (g, b),
        &grid,
        &theta,
        1e-6,
    )
    .unwrap();

    let raw = parallel_head(&x_t, &head_t, &grid);
    let mut tape2 = Tape::no_grad();
    let r = tape2.leaf(raw);
    let g2 = tape2.leaf(Tensor::ones(&[d]));
    let b2 = tape2.leaf(Tensor::zeros(&[d]));
    let normed = tape2.layer_norm(r, g2, b2, 1e-6).unwrap();
    assert!(tape.value(mhr).max_abs_diff(tape2.value(normed)) < 1e-12);
}

#[test]
fn head_permutation_with_matching_wout_rows_is_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let grid = TokenGrid::new(2, 2);
    let (d, d_head) = (8, 4);
    let theta = theta_frequencies(d_head, 10_000.0).unwrap();
    let x_t = rand_tensor(&mut rng, &[1, 4, d]);
    let h0: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[d, d_head])).collect();
    let h1: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[d, d_head])).collect();
    let wout_t = rand_tensor(&mut rng, &[d, d]);
    // swap the two row blocks of w_out to follow the head swap
    let wout_swapped = Tensor::from_fn(&[d, d], |i| {
        let (r, c) = (i / d, i % d);
        let r_src = if r < d_head { r + d_head } else { r - d_head };
        wout_t.data()[r_src * d + c]
    });

    let run = |order: [usize; 2], wout_used: &Tensor| {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(x_t.clone());
        let banks = [&h0, &h1];
        let heads: Vec<RetentionHeadVars> = order
            .iter()
            .map(|&hi| {
                let bank = banks[hi];
                RetentionHeadVars {
                    w_q: tape.leaf(bank[0].clone()),
                    w_k: tape.leaf(bank[1].clone()),
                    w_v: tape.leaf(bank[2].clone()),
                    gamma: head_gamma(hi),
                }
            })
            .collect();
        let wout = tape.leaf(wout_used.clone());
        let g = tape.leaf(Tensor::ones(&[d]));
        let b = tape.leaf(Tensor::zeros(&[d]));
        let out =
            multi_head_retention(&mut tape, x, &heads, wout, (g, b), &grid, &theta, 1e-6).unwrap();
        tape.value(out).clone()
    };

    let forward = run([0, 1], &wout_t);
    let swapped = run([1, 0], &wout_swapped);
    assert!(forward.max_abs_diff(&swapped) < 1e-12);
}

#[test]
fn mhr_rejects_mismatched_head_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let grid = TokenGrid::new(2, 2);
    let theta = theta_frequencies(4, 10_000.0).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&mut rng, &[1, 4, 8]));
    let wq = tape.leaf(rand_tensor(&mut rng, &[8, 4]));
    let wout = tape.leaf(identity(8));
    let g = tape.leaf(Tensor::ones(&[8]));
    let b = tape.leaf(Tensor::zeros(&[8]));
    let heads = [RetentionHeadVars {
        w_q: wq,
        w_k: wq,
        w_v: wq,
        gamma: 0.9,
    }];
    assert!(
        multi_head_retention(&mut tape, x, &heads, wout, (g, b), &grid, &theta, 1e-6).is_err()
    );
}

#[test]
fn block_with_zeroed_projections_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let grid = TokenGrid::new(2, 2);
    let d = 8;
    let theta = theta_frequencies(d / 2, 10_000.0).unwrap();
    let x_t = rand_tensor(&mut rng, &[2, 4, d]);
    let tensors = block_param_tensors(&mut rng, d, 2, true);

    let mut tape = Tape::no_grad();
    let x = tape.leaf(x_t.clone());
    let vars: std::collections::BTreeMap<String, Var> = tensors
        .iter()
        .map(|(k, t)| (k.clone(), tape.leaf(t.clone())))
        .collect();
    let bv = block_vars(&mut tape, &vars, 2, true);
    let out = retention_block(&mut tape, x, &bv, &grid, &theta, 1e-6).unwrap();
    assert!(tape.value(out).max_abs_diff(&x_t) < 1e-12);
}

#[test]
fn block_preserves_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for &(hp, wp, d, heads) in &[(2usize, 2usize, 8usize, 2usize), (3, 4, 16, 4), (1, 6, 8, 1)] {
        let grid = TokenGrid::new(hp, wp);
        let theta = theta_frequencies(d / heads, 10_000.0).unwrap();
        let x_t = rand_tensor(&mut rng, &[2, hp * wp, d]);
        let tensors = block_param_tensors(&mut rng, d, heads, false);
        let mut tape = Tape::no_grad();
        let x = tape.leaf(x_t.clone());
        let vars: std::collections::BTreeMap<String, Var> = tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone())))
            .collect();
        let bv = block_vars(&mut tape, &vars, heads, true);
        let out = retention_block(&mut tape, x, &bv, &grid, &theta, 1e-6).unwrap();
        assert_eq!(tape.value(out).shape(), x_t.shape());
    }
}

#[test]
fn block_gradient_passes_finite_difference_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(56);
    let grid = TokenGrid::new(2, 2);
    let d = 8;
    let heads = 2;
    let theta = theta_frequencies(d / heads, 10_000.0).unwrap();
    let x_t = rand_tensor(&mut rng, &[1, 4, d]).map(|v| v * 0.5);
    let weights = rand_tensor(&mut rng, &[1, 4, d]);
    let mut tensors = block_param_tensors(&mut rng, d, heads, false);
    // keep the block in a smooth regime for finite differences
    for t in tensors.values_mut() {
        *t = t.map(|v| v * 0.3);
    }
    tensors.insert("x".into(), x_t);

    let report = crate::tensor::grad_check_named(
        |tape, vars| {
            let bv = block_vars(tape, vars, heads, true);
            let out = retention_block(tape, vars["x"], &bv, &grid, &theta, 1e-6)?;
            let weighted = tape.mul_const(out, &weights)?;
            Ok(tape.sum(weighted))
        },
        &tensors,
        1e-5,
    )
    .unwrap();
    assert!(
        report.max_rel_error < 1e-5,
        "block grad check: {} at {}[{}]",
        report.max_rel_error,
        report.worst_param,
        report.worst_index
    );
}
