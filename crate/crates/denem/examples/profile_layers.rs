//! Where does member forward/backward time go? Times each primitive on the
//! desk-scale shapes.

use std::time::Instant;

use denem::nn::{Conv2d, Elem, MaxPool2d, Norm2d, NormKind, ParamAlloc, ParamSet};
use ndarray::Array4;

fn time_ms(reps: usize, mut f: impl FnMut()) -> f64 {
    f();
    let t = Instant::now();
    for _ in 0..reps {
        f();
    }
    t.elapsed().as_secs_f64() * 1e3 / reps as f64
}

fn main() {
    let n = 32usize;
    // Desk-scale layer shapes: (cin, cout, hw_in, k, stride, pad)
    let shapes = [
        (1usize, 8usize, 64usize, 7usize, 2usize, 3usize),
        (8, 8, 16, 3, 1, 1),
        (8, 16, 16, 3, 2, 1),
        (16, 16, 8, 3, 1, 1),
        (16, 32, 8, 3, 2, 1),
        (32, 32, 4, 3, 1, 1),
        (32, 64, 4, 3, 2, 1),
        (64, 64, 2, 3, 1, 1),
    ];
    let mut total_fwd = 0.0;
    let mut total_bwd = 0.0;
    for (cin, cout, hw, k, s, p) in shapes {
        let mut alloc = ParamAlloc::default();
        let conv = Conv2d::new(&mut alloc, cin, cout, k, s, p);
        let mut ps = ParamSet::zeros(alloc.param_len(), alloc.state_len());
        for (i, v) in ps.params.iter_mut().enumerate() {
            *v = ((i % 13) as f32 - 6.0) * 0.01;
        }
        let x = Array4::from_shape_fn((n, cin, hw, hw), |(a, b, c, d)| {
            ((a + b * 3 + c * 7 + d) as f32 * 0.01).sin()
        });
        let fwd = time_ms(10, || {
            let _ = conv.forward_eval(&ps, &x);
        });
        let (y, cache) = conv.forward_train(&ps, &x);
        let dy = y.mapv(|v| v * 0.1);
        let mut grads = vec![0.0 as Elem; ps.params.len()];
        let bwd = time_ms(10, || {
            let _ = conv.backward(&ps, &cache, &dy, &mut grads);
        });
        println!("conv {cin:>2}->{cout:>2} @{hw:>2} k{k}: fwd {fwd:6.2} ms  bwd {bwd:6.2} ms");
        total_fwd += fwd;
        total_bwd += bwd;
    }
    println!("conv totals: fwd {total_fwd:.2} ms, bwd {total_bwd:.2} ms");

    // Norm on the widest activation (8ch @ 32x32 after stem, 16x16 stage1).
    for (ch, hw, groups) in [(8usize, 32usize, 8usize), (8, 16, 8), (64, 2, 8)] {
        let mut alloc = ParamAlloc::default();
        let norm = Norm2d::new(&mut alloc, ch, NormKind::Group, groups);
        let mut ps = ParamSet::zeros(alloc.param_len(), alloc.state_len());
        norm.init(&mut ps);
        let x = Array4::from_shape_fn((n, ch, hw, hw), |(a, b, c, d)| {
            ((a * 5 + b * 3 + c + d * 2) as f32 * 0.03).cos()
        });
        let fwd = time_ms(10, || {
            let _ = norm.forward_eval(&ps, &x);
        });
        let (y, cache) = norm.forward_train(&mut ps.clone(), &x);
        let dy = y.mapv(|v| v * 0.1);
        let mut grads = vec![0.0 as Elem; ps.params.len()];
        let bwd = time_ms(10, || {
            let _ = norm.backward(&ps, &cache, &dy, &mut grads);
        });
        println!("group norm {ch:>2}ch @{hw:>2}: fwd {fwd:6.2} ms  bwd {bwd:6.2} ms");
    }

    let pool = MaxPool2d::new(3, 2, 1);
    let x = Array4::from_shape_fn((n, 8, 32, 32), |(a, b, c, d)| {
        ((a + b + c + d) as f32 * 0.05).sin()
    });
    let fwd = time_ms(10, || {
        let _ = pool.forward_eval(&x);
    });
    println!("maxpool 8ch @32: fwd {fwd:6.2} ms");
}
