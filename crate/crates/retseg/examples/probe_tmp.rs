use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retseg::model::*;
use retseg::tensor::{grad_check, grad_check_named, Conv2dSpec, Tensor};

fn rt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    // conv with eps=1e-4 (bilinear: zero truncation error, less cancellation)
    for (groups, stride) in [(1usize,1usize),(1,2),(2,1),(4,2)] {
        let (cin, cout) = (4, 4);
        let x = rt(&mut rng, &[2, cin, 5, 5]);
        let w = rt(&mut rng, &[cout, cin/groups, 3, 3]);
        let b = rt(&mut rng, &[cout]);
        let hw = (5+2-3)/stride+1;
        let wt = rt(&mut rng, &[2, cout, hw, hw]);
        let r = grad_check(|tape, vars| {
            let y = tape.conv2d(vars[0], vars[1], Some(vars[2]), Conv2dSpec::new(stride, 1, groups))?;
            let m = tape.mul_const(y, &wt)?;
            Ok(tape.sum(m))
        }, &[x, w, b], 1e-4).unwrap();
        println!("conv g{groups} s{stride} eps1e-4: {:.3e}", r.max_rel_error);
    }

    // full tiny model at a generic (perturbed) point
    let config = RetSegConfig {
        input_channels: 3, image_size: 16, stages: 2, stage_channels: vec![4, 8],
        patch_size: 1, d_model: 8, retention_blocks: 1, heads: 2,
        dropout_rate: 0.0, feedforward_expansion: 4, embed_bias: true,
    };
    let params = init_params(&config, 31).unwrap();
    let mut map = params.map().clone();
    for t in map.values_mut() {
        *t = Tensor::from_fn(t.shape(), {
            let d = t.data().to_vec();
            let mut k = 0;
            move |i| { k = i; d[k] + 0.0 }
        });
    }
    // perturb away from the degenerate zero-init point
    let mut prng = ChaCha8Rng::seed_from_u64(99);
    for t in map.values_mut() {
        let d: Vec<f64> = t.data().iter().map(|&v| v + prng.random_range(-0.05..0.05)).collect();
        *t = Tensor::new(t.shape().to_vec(), d).unwrap();
    }
    let image = rt(&mut rng, &[1, 3, 16, 16]).map(|v| 0.5 + 0.4 * v);
    let wt = rt(&mut rng, &[1, 1, 16, 16]);
    for eps in [1e-5, 1e-6] {
        let r = grad_check_named(
            |tape, vars| {
                let img = tape.leaf(image.clone());
                let mut rng2 = ChaCha8Rng::seed_from_u64(0);
                let out = retseg_forward(tape, img, vars, &config, false, &mut rng2)?;
                let m = tape.mul_const(out, &wt)?;
                Ok(tape.sum(m))
            },
            &map,
            eps,
        )
        .unwrap();
        println!("full model eps {eps:.0e}: {:.3e} at {} (a {:.3e} n {:.3e})", r.max_rel_error, r.worst_param, r.analytic, r.numeric);
    }
}
