//! The trainable projection head.
//!
//! Per cell `x` (a `c`-vector) the head computes
//! `code = (x·W_lin + b_lin) + (relu(x·W1 + b1)·W2 + b2)`,
//! a linear branch plus a two-layer ReLU branch. Gradients are derived by
//! hand in [`head_backward`].

mod adam;
mod checkpoint;
mod train;

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::feature_io::{CodeMap, FeatureMap};
use crate::scalar::Scalar;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, SGHD_HEADER_LEN,
    SGHD_MAGIC, SGHD_VERSION,
};
pub use train::{
    pair_loss_and_grad, train, train_epoch, EpochMetrics, KindLoss, PairMix, TrainConfig,
};

/// Head weights. Matrices are stored input-major: `w_lin` is `c × d`,
/// `w1` is `c × h_hidden`, `w2` is `h_hidden × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T = f32> {
    pub w_lin: Array2<T>,
    pub b_lin: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn zeros(c: usize, d: usize, h_hidden: usize) -> Self {
        Self {
            w_lin: Array2::zeros((c, d)),
            b_lin: Array1::zeros(d),
            w1: Array2::zeros((c, h_hidden)),
            b1: Array1::zeros(h_hidden),
            w2: Array2::zeros((h_hidden, d)),
            b2: Array1::zeros(d),
        }
    }

    pub fn c(&self) -> usize {
        self.w_lin.nrows()
    }

    pub fn d(&self) -> usize {
        self.w_lin.ncols()
    }

    pub fn h_hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.c(), self.d(), self.h_hidden())
    }

    pub fn num_params(&self) -> usize {
        self.parts().iter().map(|p| p.len()).sum()
    }

    /// Checks that the six tensors agree on `c`, `d` and `h_hidden`, that
    /// `d <= c`, and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        let (c, d, h) = (self.c(), self.d(), self.h_hidden());
        if c == 0 || d == 0 || h == 0 {
            return Err(Error::Parameter(format!("head dims must be positive, got c={c} d={d} h={h}")));
        }
        if d > c {
            return Err(Error::Parameter(format!("code dim {d} exceeds channel count {c}")));
        }
        let consistent = self.b_lin.len() == d
            && self.w1.nrows() == c
            && self.b1.len() == h
            && self.w2.dim() == (h, d)
            && self.b2.len() == d;
        if !consistent {
            return Err(Error::Shape("head parameter shapes are inconsistent".into()));
        }
        if self.parts().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite head parameter".into()));
        }
        Ok(())
    }

    /// The six tensors in checkpoint order: `w_lin, b_lin, w1, b1, w2, b2`.
    pub fn parts(&self) -> [ArrayViewD<'_, T>; 6] {
        [
            self.w_lin.view().into_dyn(),
            self.b_lin.view().into_dyn(),
            self.w1.view().into_dyn(),
            self.b1.view().into_dyn(),
            self.w2.view().into_dyn(),
            self.b2.view().into_dyn(),
        ]
    }

    pub fn parts_mut(&mut self) -> [ArrayViewMutD<'_, T>; 6] {
        [
            self.w_lin.view_mut().into_dyn(),
            self.b_lin.view_mut().into_dyn(),
            self.w1.view_mut().into_dyn(),
            self.b1.view_mut().into_dyn(),
            self.w2.view_mut().into_dyn(),
            self.b2.view_mut().into_dyn(),
        ]
    }

    /// All parameters flattened in checkpoint order.
    pub fn to_flat(&self) -> Vec<T> {
        self.parts().iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for mut part in self.parts_mut() {
            part.iter_mut().for_each(|v| *v = *it.next().unwrap());
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (mut a, b) in self.parts_mut().into_iter().zip(other.parts()) {
            a.zip_mut_with(&b, |x, &y| *x += scale * y);
        }
    }

    pub fn cast<U: Scalar>(&self) -> HeadParams<U> {
        let conv = |v: &T| U::from_f64_lossy(v.to_f64_lossy());
        HeadParams {
            w_lin: self.w_lin.map(conv),
            b_lin: self.b_lin.map(conv),
            w1: self.w1.map(conv),
            b1: self.b1.map(conv),
            w2: self.w2.map(conv),
            b2: self.b2.map(conv),
        }
    }
}

/// Fan-in scaled uniform init, `U(-sqrt(1/fan_in), sqrt(1/fan_in))`, zero biases.
pub fn init_head(c: usize, d: usize, h_hidden: usize, seed: u64) -> Result<HeadParams> {
    if c == 0 || d == 0 || h_hidden == 0 {
        return Err(Error::Parameter(format!(
            "head dims must be positive, got c={c} d={d} h_hidden={h_hidden}"
        )));
    }
    if d > c {
        return Err(Error::Parameter(format!("code dim {d} exceeds channel count {c}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
        let bound = (1.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("bound is positive");
        Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng) as f32)
    };
    let w_lin = uniform(c, d, c);
    let w1 = uniform(c, h_hidden, c);
    let w2 = uniform(h_hidden, d, h_hidden);
    Ok(HeadParams {
        w_lin,
        b_lin: Array1::zeros(d),
        w1,
        b1: Array1::zeros(h_hidden),
        w2,
        b2: Array1::zeros(d),
    })
}

fn check_channels<T: Scalar>(fm: &FeatureMap<T>, p: &HeadParams<T>) -> Result<()> {
    if fm.channels() != p.c() {
        return Err(Error::Shape(format!(
            "feature map has {} channels, head expects {}",
            fm.channels(),
            p.c()
        )));
    }
    Ok(())
}

/// Codes plus the hidden pre-activations needed by the backward pass.
pub(crate) fn forward_cached<T: Scalar>(
    x: ArrayView2<'_, T>,
    p: &HeadParams<T>,
) -> (Array2<T>, Array2<T>) {
    let mut z1 = x.dot(&p.w1);
    z1 += &p.b1;
    let hidden = z1.mapv(|v| if v > T::zero() { v } else { T::zero() });
    let mut codes = x.dot(&p.w_lin);
    codes += &hidden.dot(&p.w2);
    codes += &p.b_lin;
    codes += &p.b2;
    (codes, z1)
}

/// Parameter gradients given upstream `grad_codes` (`N × d`), accumulated over cells.
pub(crate) fn backward_cached<T: Scalar>(
    x: ArrayView2<'_, T>,
    z1: &Array2<T>,
    p: &HeadParams<T>,
    grad_codes: ArrayView2<'_, T>,
) -> HeadParams<T> {
    let hidden = z1.mapv(|v| if v > T::zero() { v } else { T::zero() });
    let mut grad_z1 = grad_codes.dot(&p.w2.t());
    // relu'(0) = 0
    grad_z1.zip_mut_with(z1, |g, &z| {
        if z <= T::zero() {
            *g = T::zero();
        }
    });
    let bias_grad = grad_codes.sum_axis(Axis(0));
    HeadParams {
        w_lin: x.t().dot(&grad_codes),
        b_lin: bias_grad.clone(),
        w1: x.t().dot(&grad_z1),
        b1: grad_z1.sum_axis(Axis(0)),
        w2: hidden.t().dot(&grad_codes),
        b2: bias_grad,
    }
}

pub fn head_forward<T: Scalar>(fm: &FeatureMap<T>, p: &HeadParams<T>) -> Result<CodeMap<T>> {
    check_channels(fm, p)?;
    let (codes, _) = forward_cached(fm.as_matrix(), p);
    if codes.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("head produced non-finite codes".into()));
    }
    FeatureMap::from_matrix(fm.hp(), fm.wp(), codes)
}

pub fn head_backward<T: Scalar>(
    fm: &FeatureMap<T>,
    p: &HeadParams<T>,
    grad_codes: &CodeMap<T>,
) -> Result<HeadParams<T>> {
    check_channels(fm, p)?;
    if (grad_codes.hp(), grad_codes.wp(), grad_codes.channels()) != (fm.hp(), fm.wp(), p.d()) {
        return Err(Error::Shape(format!(
            "code gradient is {}x{}x{}, expected {}x{}x{}",
            grad_codes.hp(),
            grad_codes.wp(),
            grad_codes.channels(),
            fm.hp(),
            fm.wp(),
            p.d()
        )));
    }
    let x = fm.as_matrix();
    let (_, z1) = forward_cached(x, p);
    Ok(backward_cached(x, &z1, p, grad_codes.as_matrix()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_params(rng: &mut ChaCha8Rng, c: usize, d: usize, h: usize) -> HeadParams<f64> {
        let mut p = HeadParams::<f64>::zeros(c, d, h);
        for mut part in p.parts_mut() {
            part.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        p
    }

    fn random_map(rng: &mut ChaCha8Rng, hp: usize, wp: usize, c: usize) -> FeatureMap<f64> {
        FeatureMap::new(hp, wp, c, (0..hp * wp * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_head(16, 8, 32, 3).unwrap();
        let b = init_head(16, 8, 32, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_head(16, 8, 32, 4).unwrap());
        assert!(a.b_lin.iter().chain(&a.b1).chain(&a.b2).all(|&v| v == 0.0));
        let bound = (1.0f32 / 16.0).sqrt();
        assert!(a.w1.iter().all(|v| v.abs() <= bound));
        let bound2 = (1.0f32 / 32.0).sqrt();
        assert!(a.w2.iter().all(|v| v.abs() <= bound2));
    }

    #[test]
    fn init_weight_mean_is_centred() {
        // 100 x 100 = 10^4 draws from U(-0.1, 0.1); sd of the mean = 0.1/sqrt(3)/100.
        let p = init_head(100, 100, 1, 17).unwrap();
        let mean = p.w_lin.iter().map(|&v| v as f64).sum::<f64>() / 1e4;
        let sd = 0.1 / 3f64.sqrt() / 100.0;
        assert!(mean.abs() <= 3.0 * sd, "mean {mean}");
    }

    #[test]
    fn init_rejects_expanding_head() {
        assert!(matches!(init_head(4, 5, 8, 0), Err(Error::Parameter(_))));
        assert!(matches!(init_head(4, 2, 0, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn zero_params_give_zero_codes() {
        let fm = FeatureMap::new(2, 2, 3, vec![0.5f32; 12]).unwrap();
        let codes = head_forward(&fm, &HeadParams::zeros(3, 2, 4)).unwrap();
        assert_eq!(codes.channels(), 2);
        assert!(codes.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_branch_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fm = random_map(&mut rng, 3, 2, 5);
        let mut p = HeadParams::<f64>::zeros(5, 5, 3);
        p.w_lin = Array2::eye(5);
        let codes = head_forward(&fm, &p).unwrap();
        assert_eq!(codes.data(), fm.data());
    }

    #[test]
    fn forward_matches_per_cell_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, d, h) = (6, 3, 5);
        let fm = random_map(&mut rng, 4, 3, c);
        let p = random_params(&mut rng, c, d, h);
        let codes = head_forward(&fm, &p).unwrap();
        for idx in 0..fm.cells() {
            let x = fm.cell_at(idx);
            let hidden: Vec<f64> = (0..h)
                .map(|k| (p.b1[k] + (0..c).map(|i| x[i] * p.w1[[i, k]]).sum::<f64>()).max(0.0))
                .collect();
            for j in 0..d {
                let lin = p.b_lin[j] + (0..c).map(|i| x[i] * p.w_lin[[i, j]]).sum::<f64>();
                let nl = p.b2[j] + (0..h).map(|k| hidden[k] * p.w2[[k, j]]).sum::<f64>();
                assert!((codes.cell_at(idx)[j] - (lin + nl)).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn forward_shape_error() {
        let fm = FeatureMap::new(1, 1, 3, vec![1.0f32; 3]).unwrap();
        assert!(matches!(head_forward(&fm, &HeadParams::zeros(4, 2, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fm = random_map(&mut rng, 2, 2, 4);
        let p = random_params(&mut rng, 4, 2, 3);
        let g = FeatureMap::new(2, 2, 2, vec![0.0; 8]).unwrap();
        let grads = head_backward(&fm, &p, &g).unwrap();
        assert!(grads.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_is_upstream_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fm = random_map(&mut rng, 1, 1, 3);
        let p = random_params(&mut rng, 3, 1, 2);
        let g = FeatureMap::new(1, 1, 1, vec![0.37]).unwrap();
        let grads = head_backward(&fm, &p, &g).unwrap();
        assert_eq!(grads.b_lin[0], 0.37);
        assert_eq!(grads.b2[0], 0.37);
    }

    #[test]
    fn backward_shape_error() {
        let fm = FeatureMap::new(2, 2, 3, vec![1.0f32; 12]).unwrap();
        let g = FeatureMap::new(2, 2, 3, vec![1.0f32; 12]).unwrap();
        assert!(matches!(
            head_backward(&fm, &HeadParams::zeros(3, 2, 2), &g),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, d, h) = (6, 3, 5);
        let mut checked = 0;
        while checked < 5 {
            let fm = random_map(&mut rng, 4, 4, c);
            let p = random_params(&mut rng, c, d, h);
            let (_, z1) = forward_cached(fm.as_matrix(), &p);
            if z1.iter().any(|z| z.abs() <= 1e-3) {
                continue;
            }
            // Scalar probe: sum of codes weighted by a fixed random tensor.
            let probe = random_map(&mut rng, 4, 4, d);
            let objective = |q: &HeadParams<f64>| -> f64 {
                let codes = head_forward(&fm, q).unwrap();
                codes.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            let grads = head_backward(&fm, &p, &probe).unwrap().to_flat();
            let base = p.to_flat();
            let step = 1e-6;
            for (i, &analytic) in grads.iter().enumerate() {
                let mut q = p.clone();
                let mut v = base.clone();
                v[i] += step;
                q.set_flat(&v).unwrap();
                let plus = objective(&q);
                v[i] -= 2.0 * step;
                q.set_flat(&v).unwrap();
                let minus = objective(&q);
                let numeric = (plus - minus) / (2.0 * step);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(rel <= 1e-4, "param {i}: analytic {analytic} numeric {numeric}");
            }
            checked += 1;
        }
    }

    #[test]
    fn flat_roundtrip_and_validate() {
        let p = init_head(5, 3, 4, 9).unwrap();
        let mut q = HeadParams::zeros(5, 3, 4);
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        q.validate().unwrap();
        q.w1[[0, 0]] = f32::NAN;
        assert!(matches!(q.validate(), Err(Error::Numeric(_))));
    }
}
