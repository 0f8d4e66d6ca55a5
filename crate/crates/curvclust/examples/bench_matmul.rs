use curvclust::diff::Tensor;
use std::time::Instant;

fn main() {
    let n = 2708;
    let d = 32;
    let a = Tensor::full(n, d, 0.5);
    let b = Tensor::full(d, n, 0.25);
    let t = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let c = a.matmul(&b);
        std::hint::black_box(&c);
    }
    let secs = t.elapsed().as_secs_f64() / reps as f64;
    let gflops = (2.0 * n as f64 * n as f64 * d as f64) / secs / 1e9;
    println!("N x d * d x N: {secs:.3}s -> {gflops:.2} GFlops/s");

    let big = Tensor::full(n, n, 0.1);
    let small = Tensor::full(n, d, 0.2);
    let t = Instant::now();
    for _ in 0..reps {
        let c = big.matmul(&small);
        std::hint::black_box(&c);
    }
    let secs = t.elapsed().as_secs_f64() / reps as f64;
    let gflops = (2.0 * n as f64 * n as f64 * d as f64) / secs / 1e9;
    println!("N x N * N x d: {secs:.3}s -> {gflops:.2} GFlops/s");

    let t = Instant::now();
    for _ in 0..reps {
        let c = big.map(f64::exp);
        std::hint::black_box(&c);
    }
    println!("exp over N x N: {:.3}s", t.elapsed().as_secs_f64() / reps as f64);
}
