//! Micro-benchmark of member forward/backward at desk scale.

use std::time::Instant;

use denem::ensemble::{build_ensemble, MemberSpec, NormPolicy};
use denem::nn::EncoderArch;
use ndarray::Array4;

fn main() {
    let arch = EncoderArch::desk();
    let specs = vec![MemberSpec {
        arch,
        init_seed: 1,
    }];
    let mut model = build_ensemble(&specs, NormPolicy::group(8), 2).unwrap();
    let batch = Array4::from_shape_fn((32, 1, 64, 64), |(n, _, i, j)| {
        ((n * 31 + i * 7 + j) as f32 * 0.01).sin()
    });

    // Warm up.
    let _ = model.forward_member(0, &batch).unwrap();

    let t = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let _ = model.forward_member(0, &batch).unwrap();
    }
    let fwd = t.elapsed().as_secs_f64() / reps as f64;
    println!("eval forward: {:.1} ms/batch32 ({:.2} ms/patch)", fwd * 1e3, fwd * 1e3 / 32.0);

    let t = Instant::now();
    for _ in 0..reps {
        let (logits, cache) = model.member_forward_train(0, &batch).unwrap();
        let dlogits = logits.mapv(|v| v * 0.01);
        let mut grads = vec![0.0f32; model.param_len()];
        model.member_backward(0, &cache, &dlogits, &mut grads);
    }
    let fb = t.elapsed().as_secs_f64() / reps as f64;
    println!(
        "train fwd+bwd: {:.1} ms/batch32 ({:.2} ms/patch)",
        fb * 1e3,
        fb * 1e3 / 32.0
    );
}
