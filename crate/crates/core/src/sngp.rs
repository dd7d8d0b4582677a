//! Gaussian-process output head via random Fourier features, with a Laplace
//! precision matrix fitted after training and mean-field calibrated
//! probabilities.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SngpConfig {
    /// Number of random features.
    pub d_rf: usize,
    /// RBF kernel length scale.
    pub length_scale: f64,
    /// Mean-field factor.
    pub kappa: f64,
    /// Prior precision.
    pub ridge: f64,
}

impl Default for SngpConfig {
    fn default() -> Self {
        Self {
            d_rf: 1024,
            length_scale: 2.0,
            kappa: std::f64::consts::PI / 8.0,
            ridge: 1.0,
        }
    }
}

impl SngpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_rf == 0 {
            return Err(Error::Config("sngp.d_rf must be >= 1".into()));
        }
        if !(self.length_scale > 0.0) {
            return Err(Error::Config("sngp.length_scale must be > 0".into()));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::Config("sngp.kappa must be >= 0".into()));
        }
        if !(self.ridge > 0.0) {
            return Err(Error::Config("sngp.ridge must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SngpHead {
    /// `[d, d_rf]`, frozen.
    pub omega: ParamId,
    /// `[d_rf]` uniform in `[0, 2 pi)`, frozen.
    pub phase: ParamId,
    pub beta: Linear,
    /// `[d_rf, d_rf]` precision matrix.
    pub precision: ParamId,
    /// `[1]`: 1 once the precision has been fitted.
    pub fitted: ParamId,
    pub config: SngpConfig,
    pub classes: usize,
    factor: OnceLock<Option<Cholesky<f64, Dyn>>>,
}

impl SngpHead {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        classes: usize,
        config: &SngpConfig,
        rng: &mut R,
    ) -> Self {
        let n = config.d_rf;
        let inv_l = 1.0 / config.length_scale;
        let omega = Tensor::from_fn(&[d, n], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * inv_l)
        });
        let uni = Uniform::new(0.0, 2.0 * std::f64::consts::PI).expect("valid range");
        let phase = Tensor::from_fn(&[n], |_| T::of(uni.sample(rng)));
        let mut prec = Tensor::zeros(&[n, n]);
        for i in 0..n {
            prec.data_mut()[i * n + i] = T::of(config.ridge);
        }
        Self {
            omega: store.add_buffer(format!("{name}.omega"), omega),
            phase: store.add_buffer(format!("{name}.phase"), phase),
            beta: Linear::new(store, &format!("{name}.beta"), n, classes, false, false, rng),
            precision: store.add_buffer(format!("{name}.precision"), prec),
            fitted: store.add_buffer(format!("{name}.fitted"), Tensor::zeros(&[1])),
            config: config.clone(),
            classes,
            factor: OnceLock::new(),
        }
    }

    /// `phi = sqrt(2 / d_rf) cos(x Omega + b)` for `pooled: [B, d]`.
    pub fn features<T: Real>(&self, s: &mut Session<'_, T>, pooled: Var) -> Result<Var> {
        let om = s.p(self.omega);
        let ph = s.p(self.phase);
        let z = s.g.matmul(pooled, om)?;
        let z = s.g.add(z, ph)?;
        let c = s.g.cos(z);
        Ok(s.g.scale(c, T::of((2.0 / self.config.d_rf as f64).sqrt())))
    }

    pub fn logits<T: Real>(&self, s: &mut Session<'_, T>, phi: Var) -> Result<Var> {
        self.beta.forward(s, phi)
    }

    pub fn is_fitted<T: Real>(&self, store: &ParamStore<T>) -> bool {
        store.get(self.fitted).data()[0] > T::zero()
    }

    /// Replace the precision with `ridge I + sum_i p_i (1 - p_i) phi_i phi_i^T`.
    /// `phi` is row-major `[n, d_rf]`; `p` is the (max-class) probability of
    /// each row.
    pub fn fit_covariance<T: Real>(&mut self, store: &mut ParamStore<T>, phi: &[f64], p: &[f64]) -> Result<()> {
        let prec = precision_matrix(phi, p, self.config.d_rf, self.config.ridge)?;
        let n = self.config.d_rf;
        let data: Vec<T> = (0..n * n).map(|k| T::of(prec[(k / n, k % n)])).collect();
        store.set(self.precision, Tensor::new(&[n, n], data)?)?;
        store.set(self.fitted, Tensor::from_vec(vec![T::one()]))?;
        self.factor = OnceLock::new();
        Ok(())
    }

    /// Drop the cached factorization (after the precision buffer changed).
    pub fn reset_cache(&mut self) {
        self.factor = OnceLock::new();
    }

    fn factor<T: Real>(&self, store: &ParamStore<T>) -> Option<&Cholesky<f64, Dyn>> {
        self.factor
            .get_or_init(|| {
                if !self.is_fitted(store) {
                    return None;
                }
                let n = self.config.d_rf;
                let m = DMatrix::from_row_slice(n, n, &store.get(self.precision).data().iter().map(|x| x.f64()).collect::<Vec<_>>());
                Cholesky::new(m)
            })
            .as_ref()
    }

    /// Posterior variance `phi Lambda^-1 phi^T` per row; `None` if unfitted.
    pub fn variance<T: Real>(&self, store: &ParamStore<T>, phi: &[f64]) -> Result<Option<Vec<f64>>> {
        let Some(chol) = self.factor(store) else {
            if self.is_fitted(store) {
                return Err(Error::Invalid("precision matrix is not positive definite".into()));
            }
            return Ok(None);
        };
        Ok(Some(variance_with(chol, phi, self.config.d_rf)))
    }
}

/// `ridge I + sum_i p_i (1 - p_i) phi_i phi_i^T`, accumulated in row order
/// in blocks.
pub fn precision_matrix(phi: &[f64], p: &[f64], n: usize, ridge: f64) -> Result<DMatrix<f64>> {
    if phi.len() != p.len() * n {
        return Err(Error::shape("fit_covariance", &[phi.len()], &[p.len(), n]));
    }
    let mut prec = DMatrix::<f64>::identity(n, n) * ridge;
    const BLOCK: usize = 1024;
    let mut scaled = Vec::with_capacity(BLOCK * n);
    for (rows, ps) in phi.chunks(BLOCK * n).zip(p.chunks(BLOCK)) {
        scaled.clear();
        for (row, &pi) in rows.chunks(n).zip(ps) {
            let w = (pi * (1.0 - pi)).max(0.0).sqrt();
            scaled.extend(row.iter().map(|x| x * w));
        }
        let (m, n_) = (ps.len(), n as isize);
        // prec += scaled^T scaled; `prec` is column-major, symmetric.
        // SAFETY: `scaled` is m x n row-major and `prec` is n x n.
        unsafe {
            f64::gemm_raw(n, m, n, scaled.as_ptr(), 1, n_, scaled.as_ptr(), n_, 1, 1.0, prec.as_mut_ptr(), 1, n_);
        }
    }
    Ok(prec)
}

/// `phi_i^T Lambda^-1 phi_i` via the lower Cholesky factor.
pub fn variance_with(chol: &Cholesky<f64, Dyn>, phi: &[f64], n: usize) -> Vec<f64> {
    let l = chol.l_dirty();
    // row-major lower triangle so each step is a contiguous dot product
    let mut rows = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..=i {
            rows[i * n + k] = l[(i, k)];
        }
    }
    let mut out = Vec::with_capacity(phi.len() / n.max(1));
    let mut z = vec![0.0; n];
    for row in phi.chunks(n) {
        for i in 0..n {
            let li = &rows[i * n..i * n + i];
            let acc = row[i] - li.iter().zip(&z[..i]).map(|(a, b)| a * b).sum::<f64>();
            z[i] = acc / rows[i * n + i];
        }
        out.push(z.iter().map(|x| x * x).sum());
    }
    out
}

/// Mean-field adjusted probabilities `softmax(logits / sqrt(1 + kappa var))`.
pub fn mean_field_probs(logits: &[f64], variance: f64, kappa: f64) -> Vec<f64> {
    let scale = 1.0 / (1.0 + kappa * variance).sqrt();
    softmax(&logits.iter().map(|l| l * scale).collect::<Vec<_>>())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_is_pure_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let cfg = SngpConfig {
            d_rf: 16,
            ..Default::default()
        };
        let head = SngpHead::new(&mut store, "h", 4, 2, &cfg, &mut rng);
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::zeros(&[1, 4]));
        let phi = head.features(&mut s, x).unwrap();
        let b = store.get(head.phase).data();
        let scale = (2.0f64 / 16.0).sqrt();
        for (p, bb) in s.g.value(phi).data().iter().zip(b) {
            assert!((p - scale * bb.cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn prior_only_variance() {
        let phi = vec![0.3, -0.4, 0.0];
        let prec = precision_matrix(&[], &[], 3, 2.0).unwrap();
        let chol = Cholesky::new(prec).unwrap();
        let v = variance_with(&chol, &phi, 3);
        assert!((v[0] - 0.25 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn rank_one_matches_sherman_morrison() {
        let phi = vec![0.6, 0.8];
        let lam = 1.5;
        let prec = precision_matrix(&phi, &[0.5], 2, lam).unwrap();
        let v = variance_with(&Cholesky::new(prec).unwrap(), &phi, 2)[0];
        // (lam I + c u u^T)^-1 quadratic form = |u|^2/lam - c |u|^4 / (lam (lam + c |u|^2))
        let c = 0.25;
        let uu = 1.0;
        let want = uu / lam - c * uu * uu / (lam * (lam + c * uu));
        assert!((v - want).abs() < 1e-14);
        assert!(v < uu / lam);
    }

    #[test]
    fn mean_field_keeps_binary_argmax_and_shrinks() {
        let l = [0.3, 1.7];
        let p0 = mean_field_probs(&l, 0.0, std::f64::consts::PI / 8.0);
        assert_eq!(p0, softmax(&l));
        let mut prev = p0[1];
        for v in [0.5, 2.0, 10.0, 1e6] {
            let p = mean_field_probs(&l, v, std::f64::consts::PI / 8.0);
            assert!(p[1] > 0.5 && p[1] <= prev);
            prev = p[1];
        }
        assert!((prev - 0.5).abs() < 1e-3);
    }
}
