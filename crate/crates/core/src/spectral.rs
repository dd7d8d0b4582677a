//! Largest-singular-value estimation by power iteration and spectral
//! normalization of weight matrices.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::bilinear;
use crate::tensor::{Real, Tensor};

/// Result of a power-iteration run: the estimate `sigma = u^T W v` and the
/// unit left/right singular-vector estimates.
#[derive(Clone, Debug)]
pub struct PowerIteration<T> {
    pub sigma: T,
    pub u: Vec<T>,
    pub v: Vec<T>,
}

fn normalize<T: Real>(x: &mut [T]) -> T {
    let n = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    if n > T::zero() {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Runs `iters` power-iteration steps on the `rows x cols` matrix `w`,
/// starting from the left vector `u`:
/// `v <- W^T u / |W^T u|`, `u <- W v / |W v|`, `sigma = u^T W v`.
///
/// A zero matrix yields `sigma = 0`; callers must guard the division.
pub fn power_iteration<T: Real>(w: &Tensor<T>, u: &[T], iters: usize) -> Result<PowerIteration<T>> {
    let [rows, cols] = w.shape() else {
        return Err(Error::shape("power_iteration", w.shape(), &[]));
    };
    let (rows, cols) = (*rows, *cols);
    if u.len() != rows {
        return Err(Error::shape("power_iteration", w.shape(), &[u.len()]));
    }
    let data = w.data();
    let mut u = u.to_vec();
    if normalize(&mut u) == T::zero() {
        return Err(Error::Invalid("power_iteration: initial vector is zero".into()));
    }
    let mut v = vec![T::zero(); cols];
    for _ in 0..iters.max(1) {
        v.iter_mut().for_each(|x| *x = T::zero());
        for (r, &ur) in u.iter().enumerate() {
            for (vc, &wrc) in v.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
                *vc += wrc * ur;
            }
        }
        if normalize(&mut v) == T::zero() {
            return Ok(PowerIteration {
                sigma: T::zero(),
                u,
                v,
            });
        }
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = data[r * cols..(r + 1) * cols]
                .iter()
                .zip(&v)
                .map(|(&a, &b)| a * b)
                .sum();
        }
        if normalize(&mut u) == T::zero() {
            return Ok(PowerIteration {
                sigma: T::zero(),
                u,
                v,
            });
        }
    }
    let sigma = bilinear(data, &u, &v);
    Ok(PowerIteration { sigma, u, v })
}

/// Random unit vector used to seed power iteration.
pub fn random_unit<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    loop {
        let mut x: Vec<T> = (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
        if normalize(&mut x) > T::zero() {
            return x;
        }
    }
}

/// `W / max(sigma, eps)` outside the autodiff graph; below `eps` the weight is
/// returned unchanged.
pub fn spectral_normalize<T: Real>(w: &Tensor<T>, sigma: T, eps: T) -> Tensor<T> {
    if sigma < eps {
        w.clone()
    } else {
        w.map(|x| x / sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_matrix() {
        let w = Tensor::new(&[2, 2], vec![3.0f64, 0.0, 0.0, 1.0]).unwrap();
        let p = power_iteration(&w, &[0.6, 0.8], 60).unwrap();
        assert!((p.sigma - 3.0).abs() < 1e-9);
        let eff = spectral_normalize(&w, p.sigma, 1e-8);
        let want = [1.0, 0.0, 0.0, 1.0 / 3.0];
        for (a, b) in eff.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_matrix_gives_zero_sigma() {
        let w = Tensor::<f64>::zeros(&[3, 2]);
        let p = power_iteration(&w, &[1.0, 0.0, 0.0], 5).unwrap();
        assert_eq!(p.sigma, 0.0);
        let eff = spectral_normalize(&w, p.sigma, 1e-8);
        assert_eq!(eff, w);
    }

    #[test]
    fn vectors_stay_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::from_fn(&[4, 6], |_| rng.sample::<f64, _>(StandardNormal));
        let u0 = random_unit::<f64, _>(4, &mut rng);
        let p = power_iteration(&w, &u0, 1).unwrap();
        let nu: f64 = p.u.iter().map(|x| x * x).sum();
        let nv: f64 = p.v.iter().map(|x| x * x).sum();
        assert!((nu - 1.0).abs() < 1e-12 && (nv - 1.0).abs() < 1e-12);
    }

    #[test]
    fn monotone_on_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::from_fn(&[5, 5], |_| rng.sample::<f64, _>(StandardNormal));
        // A^T A is symmetric PSD.
        let mut m = vec![0.0; 25];
        for i in 0..5 {
            for j in 0..5 {
                m[i * 5 + j] = (0..5).map(|k| a.data()[k * 5 + i] * a.data()[k * 5 + j]).sum();
            }
        }
        let m = Tensor::new(&[5, 5], m).unwrap();
        let mut u = random_unit::<f64, _>(5, &mut rng);
        let mut last = 0.0;
        for _ in 0..30 {
            let p = power_iteration(&m, &u, 1).unwrap();
            assert!(p.sigma >= last - 1e-12, "{} < {}", p.sigma, last);
            last = p.sigma;
            u = p.u;
        }
    }
}
