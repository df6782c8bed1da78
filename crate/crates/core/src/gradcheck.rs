//! Central finite-difference gradient verification.
//!
//! Used by unit tests and the acceptance suite to check every differentiable
//! op against an independent numerical derivative in double precision.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};

/// Finite-difference step (double precision central differences).
pub const FD_STEP: f64 = 1e-5;

/// Relative error of `a` vs `b` with a floored denominator, so near-zero
/// gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Random tensors in `(lo, hi)` for each shape, from a seeded generator.
pub fn random_tensors(shapes: &[Vec<usize>], lo: f64, hi: f64, seed: u64) -> Vec<ArrayD<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
            ArrayD::from_shape_vec(IxDyn(s), data).unwrap()
        })
        .collect()
}

/// Check reverse-mode gradients of `build` against central finite differences
/// for every element of every input tensor. Panics with a description of the
/// first offending element if the relative error reaches `tol`.
pub fn fd_check_tensors<B>(tensors: &[ArrayD<f64>], build: B, tol: f64)
where
    B: Fn(&Tape<f64>, &[Var]) -> Var,
{
    let eval = |arrays: &[ArrayD<f64>]| -> f64 {
        let tape: Tape<f64> = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| tape.leaf(a.clone())).collect();
        let root = build(&tape, &vars);
        tape.scalar_value(root)
    };

    let tape: Tape<f64> = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|a| tape.leaf(a.clone())).collect();
    let root = build(&tape, &vars);
    assert_eq!(tape.shape(root).iter().product::<usize>(), 1, "root must be scalar");
    let grads = tape.backward(root);

    let mut work: Vec<ArrayD<f64>> = tensors.to_vec();
    for (ti, tensor) in tensors.iter().enumerate() {
        let ad = grads.get_or_zeros(vars[ti], tensor.shape());
        let n = tensor.len();
        for flat in 0..n {
            let orig = work[ti].as_slice_mut().unwrap()[flat];
            work[ti].as_slice_mut().unwrap()[flat] = orig + FD_STEP;
            let fp = eval(&work);
            work[ti].as_slice_mut().unwrap()[flat] = orig - FD_STEP;
            let fm = eval(&work);
            work[ti].as_slice_mut().unwrap()[flat] = orig;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let advl = ad.as_slice().unwrap()[flat];
            let err = rel_err(advl, fd);
            assert!(
                err < tol,
                "gradient mismatch: tensor {ti} element {flat}: ad={advl:.9e} fd={fd:.9e} rel={err:.3e}"
            );
        }
    }
}

/// Convenience wrapper: random inputs in `(lo, hi)`.
pub fn fd_check_range<B>(shapes: &[Vec<usize>], lo: f64, hi: f64, build: B, seed: u64, tol: f64)
where
    B: Fn(&Tape<f64>, &[Var]) -> Var,
{
    let tensors = random_tensors(shapes, lo, hi, seed);
    fd_check_tensors(&tensors, build, tol);
}

/// Convenience wrapper with inputs in `(-1, 1)`.
pub fn fd_check<B>(shapes: &[Vec<usize>], build: B, seed: u64, tol: f64)
where
    B: Fn(&Tape<f64>, &[Var]) -> Var,
{
    fd_check_range(shapes, -1.0, 1.0, build, seed, tol);
}
