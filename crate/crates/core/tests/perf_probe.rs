//! Manual throughput probe; run with `cargo test --test perf_probe -- --ignored --nocapture`.

use std::time::Instant;

use lscfg::kernels::{conv2d_backward, conv2d_forward, Nchw};

#[test]
#[ignore]
fn conv_throughput() {
    // Stage sizes of the 0.25-width encoder at 32x32 input, batch 64.
    let cases = [
        (64usize, 1usize, 16usize, 32usize),
        (64, 16, 16, 32),
        (64, 16, 32, 16),
        (64, 32, 32, 16),
        (64, 32, 64, 8),
        (64, 64, 64, 8),
        (64, 64, 128, 4),
        (64, 128, 128, 4),
        (64, 128, 128, 2),
        (64, 128, 128, 2),
    ];
    let mut total_flop = 0.0;
    let mut total_time = 0.0;
    for &(n, cin, cout, hw) in &cases {
        let dims = Nchw { n, c: cin, h: hw, w: hw };
        let input: Vec<f64> = (0..dims.numel()).map(|i| (i % 97) as f64 * 0.01).collect();
        let weight: Vec<f64> = (0..cout * cin * 9).map(|i| (i % 53) as f64 * 0.001).collect();
        let bias = vec![0.1; cout];
        let mut out = vec![0.0; n * cout * hw * hw];
        let gout = vec![0.5; out.len()];
        let mut gin = vec![0.0; input.len()];
        let mut gw = vec![0.0; weight.len()];
        let mut gb = vec![0.0; cout];
        let reps = 3;
        let t0 = Instant::now();
        for _ in 0..reps {
            conv2d_forward(&input, dims, &weight, &bias, cout, &mut out);
            conv2d_backward(&input, dims, &weight, cout, &gout, &mut gin, &mut gw, &mut gb);
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        let macs = 3.0 * (n * cout * cin * 9 * hw * hw) as f64; // fwd + dW + dX
        let gflops = 2.0 * macs / dt / 1e9;
        total_flop += 2.0 * macs;
        total_time += dt;
        println!("conv {cin:>3}->{cout:>3} @{hw:>2}x{hw:<2}: {:>8.1} ms  {:>6.2} GFLOP/s", dt * 1e3, gflops);
    }
    println!(
        "full fwd+bwd conv stack, batch 64: {:.1} ms ({:.2} GFLOP/s aggregate)",
        total_time * 1e3,
        total_flop / total_time / 1e9
    );
}
