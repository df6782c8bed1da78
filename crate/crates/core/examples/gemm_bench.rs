//! Raw GEMM throughput check (development aid).

use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a = ndarray::Array2::<f32>::from_elem((m, k), 0.5);
    let b = ndarray::Array2::<f32>::from_elem((k, n), 0.25);
    let t0 = Instant::now();
    let mut acc = 0.0f32;
    for _ in 0..reps {
        let c = a.dot(&b);
        acc += c[[0, 0]];
    }
    let secs = t0.elapsed().as_secs_f64();
    let gmacs = (m * k * n * reps) as f64 / secs / 1e9;
    println!("{m}x{k}x{n} x{reps}: {secs:.3}s -> {gmacs:.2} GMAC/s (acc {acc})");
}

fn main() {
    bench(30, 1344, 1344, 20);
    bench(1344, 30, 1344, 20);
    bench(16, 128, 3136, 50);
    bench(8, 72, 12544, 50);
    bench(630, 64, 64, 200);
}
