use crate::tensor::{Scalar, Tensor};

/// Sinusoidal timestamp table.
///
/// Entry `(t, d)` is `sin(t / base^(d/D))` for even `d` and
/// `cos(t / base^(d/D))` for odd `d`, with `d` counted from zero. The
/// exponent is `d/D` for every dimension, so each dimension has its own
/// frequency (rather than sharing one per sin/cos pair).
#[derive(Clone, Debug)]
pub struct PositionalEncoding<T> {
    table: Tensor<T>,
    d_model: usize,
}

impl<T: Scalar> PositionalEncoding<T> {
    pub fn new(max_len: usize, d_model: usize, base: f64) -> Self {
        let table = Tensor::from_fn(&[max_len, d_model], |i| {
            T::from_f64(Self::entry(i / d_model, i % d_model, d_model, base))
        });
        Self { table, d_model }
    }

    /// Closed-form value, evaluated in 64-bit.
    pub fn entry(t: usize, d: usize, d_model: usize, base: f64) -> f64 {
        let angle = t as f64 / base.powf(d as f64 / d_model as f64);
        if d % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }

    pub fn max_len(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn table(&self) -> &Tensor<T> {
        &self.table
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.table.data()[t * self.d_model..(t + 1) * self.d_model]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_zero_is_sin_zero_cos_zero() {
        let pe = PositionalEncoding::<f64>::new(4, 8, 10000.0);
        for (d, &v) in pe.row(0).iter().enumerate() {
            assert_eq!(v, if d % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn entry_one_zero_is_sin_one() {
        let pe = PositionalEncoding::<f64>::new(2, 512, 10000.0);
        assert!((pe.row(1)[0] - 1f64.sin()).abs() < 1e-12);
        assert!((pe.row(1)[0] - 0.841471).abs() < 1e-6);
    }

    #[test]
    fn entries_are_bounded() {
        let pe = PositionalEncoding::<f32>::new(64, 32, 10000.0);
        assert!(pe.table().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
