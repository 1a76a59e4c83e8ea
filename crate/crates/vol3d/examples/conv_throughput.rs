//! Rough forward/backward throughput of representative convolutions.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vol3d::{Conv3d, ConvGeometry, Ctx, Tensor};

fn run(name: &str, g: ConvGeometry, input: [usize; 5], input_grad: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut conv = Conv3d::<f32>::new(g, false, &mut rng);
    conv.input_grad = input_grad;
    let x = Tensor::full(&input, 0.5f32);
    let ctx = Ctx::train(0);
    let (mut fwd, mut bwd) = (f64::MAX, f64::MAX);
    let mut y = Tensor::zeros(&[1]);
    for _ in 0..5 {
        let t0 = Instant::now();
        y = conv.forward(&x, &ctx).unwrap();
        fwd = fwd.min(t0.elapsed().as_secs_f64());
        let t1 = Instant::now();
        conv.backward(&y).unwrap();
        bwd = bwd.min(t1.elapsed().as_secs_f64());
    }
    let macs = (y.len() * g.patch_len()) as f64;
    println!(
        "{name:>10}: out {:?} fwd {:.3}s ({:.1} GFLOP/s) bwd {:.3}s",
        y.shape(),
        fwd,
        2.0 * macs / fwd / 1e9,
        bwd
    );
}

fn main() {
    // Optional first argument: channel divisor relative to ResNet-18 widths.
    let d: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(4);
    let c = |w: usize| w / d;
    let adapter = ConvGeometry {
        in_channels: 1,
        out_channels: c(64),
        kernel: [9, 7, 7],
        stride: [1, 3, 3],
        padding: [1, 3, 3],
    };
    run("adapter", adapter, [8, 1, 32, 64, 64], false);
    run(
        "layer1",
        ConvGeometry::cubic(c(64), c(64), 3, 1, 1),
        [8, c(64), 26, 22, 22],
        true,
    );
    run(
        "layer2",
        ConvGeometry::cubic(c(128), c(128), 3, 1, 1),
        [8, c(128), 13, 11, 11],
        true,
    );
    run(
        "layer3",
        ConvGeometry::cubic(c(256), c(256), 3, 1, 1),
        [8, c(256), 7, 6, 6],
        true,
    );
    run(
        "layer4",
        ConvGeometry::cubic(c(512), c(512), 3, 1, 1),
        [8, c(512), 4, 3, 3],
        true,
    );
}
