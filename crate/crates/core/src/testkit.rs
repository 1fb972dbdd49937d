//! Shared helpers for numerical verification: finite-difference gradient
//! checks and seeded random tensors. Used by unit tests and the acceptance
//! suite; kept in the library so every test target shares one implementation.

use crate::tensor::{ArrD, Tape, Var};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Standard-normal random tensor.
pub fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrD {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal_sample(rng)).collect();
    ArrD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Uniform [0,1) random tensor.
pub fn rand_uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrD {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    ArrD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Box-Muller standard normal draw; avoids depending on `rand_distr` just
/// for this.
pub fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Central finite-difference gradient of `f` at `x0`.
pub fn finite_diff<F>(x0: &ArrD, f: F, h: f64) -> ArrD
where
    F: Fn(&ArrD) -> f64,
{
    let mut g = ArrD::zeros(IxDyn(x0.shape()));
    let mut xp = x0.clone();
    for i in 0..x0.len() {
        let slice = xp.as_slice_mut().unwrap();
        let orig = slice[i];
        slice[i] = orig + h;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig - h;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Max relative error between two gradients, with an absolute floor below
/// which entries are treated as matching (finite differences lose all
/// precision near zero).
pub fn max_rel_err(a: &ArrD, b: &ArrD, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let denom = x.abs().max(y.abs());
            if denom < floor {
                0.0
            } else {
                (x - y).abs() / denom
            }
        })
        .fold(0.0, f64::max)
}

/// Run `build` to produce a scalar loss from a leaf holding `x0`, compare the
/// tape gradient against central finite differences, and return the max
/// relative error (entries below 1e-7 in both are skipped).
pub fn check_grad<F>(x0: &ArrD, build: F, h: f64) -> f64
where
    F: Fn(&Tape, Var) -> Var,
{
    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let loss = build(&tape, x);
    let grads = tape.backward(loss);
    let analytic = grads.get_or_zeros(x, x0.shape());
    let numeric = finite_diff(
        x0,
        |xp| {
            let t = Tape::new();
            let v = t.leaf(xp.clone());
            t.scalar(build(&t, v))
        },
        h,
    );
    max_rel_err(&analytic, &numeric, 1e-7)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn finite_diff_on_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_arr(&[4], &mut rng);
        let g = finite_diff(&x, |v| v.iter().map(|&a| a * a).sum(), 1e-6);
        let expect = x.mapv(|v| 2.0 * v);
        assert!(max_rel_err(&g, &expect, 1e-9) < 1e-8);
    }
}
