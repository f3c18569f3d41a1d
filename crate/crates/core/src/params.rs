//! Named parameter storage and seeded initialization.
//!
//! Modules register tensors with a [`ParamBuilder`] at construction time and
//! keep the returned [`ParamId`]s; the same ids are later resolved against a
//! [`ParamStore`] inside forward passes. Initialization draws are always made
//! in `f64` and cast, so `f32` and `f64` instantiations of the same
//! configuration see the same weights.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Sets every tensor (including biases and scalars) to zero.
    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.fill(T::zero());
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Registers parameters into a store with seeded initialization.
pub struct ParamBuilder<'s, T: Scalar> {
    store: &'s mut ParamStore<T>,
    rng: ChaCha8Rng,
}

/// A convolution's weight and bias handles.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

impl<'s, T: Scalar> ParamBuilder<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seed: u64) -> Self {
        ParamBuilder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn register(&mut self, name: &str, value: ArrayD<T>) -> ParamId {
        assert!(
            self.store.find(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.store.names.push(name.to_string());
        self.store.values.push(value);
        ParamId(self.store.values.len() - 1)
    }

    /// Truncated-normal draw (resampled beyond 2 sigma) with fan-in scaling.
    fn trunc_normal(&mut self, n: usize, std: f64) -> Vec<T> {
        (0..n)
            .map(|_| {
                let mut z: f64 = StandardNormal.sample(&mut self.rng);
                while z.abs() > 2.0 {
                    z = StandardNormal.sample(&mut self.rng);
                }
                T::from_f(z * std)
            })
            .collect()
    }

    /// Conv2d parameters: weight (out, in, k, k) with fan-in scaled init,
    /// zero bias.
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> ConvParams {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let data = self.trunc_normal(c_out * c_in * k * k, std);
        let w = self.register(
            &format!("{name}.w"),
            ArrayD::from_shape_vec(IxDyn(&[c_out, c_in, k, k]), data).unwrap(),
        );
        let b = self.register(
            &format!("{name}.b"),
            ArrayD::zeros(IxDyn(&[c_out])),
        );
        ConvParams { w, b, kernel: k }
    }

    /// A scalar parameter with a fixed initial value.
    pub fn scalar(&mut self, name: &str, init: f64) -> ParamId {
        self.register(name, ArrayD::from_elem(IxDyn(&[1]), T::from_f(init)))
    }

    /// Advances the init stream exactly as `conv` would, without registering.
    /// Used to keep sibling modules' draws aligned across configurations.
    pub fn skip_conv_draws(&mut self, c_in: usize, c_out: usize, k: usize) {
        let _ = self.trunc_normal(c_out * c_in * k * k, 1.0);
        let _ = self.rng.gen::<u64>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let mut s1 = ParamStore::<f64>::new();
        let mut b1 = ParamBuilder::new(&mut s1, 7);
        let c1 = b1.conv("a", 3, 8, 3);
        let mut s2 = ParamStore::<f64>::new();
        let mut b2 = ParamBuilder::new(&mut s2, 7);
        let c2 = b2.conv("a", 3, 8, 3);
        assert_eq!(s1.value(c1.w), s2.value(c2.w));
        let mut s3 = ParamStore::<f64>::new();
        let mut b3 = ParamBuilder::new(&mut s3, 8);
        let c3 = b3.conv("a", 3, 8, 3);
        assert_ne!(s1.value(c1.w), s3.value(c3.w));
    }

    #[test]
    fn f32_and_f64_draws_match() {
        let mut s1 = ParamStore::<f64>::new();
        ParamBuilder::new(&mut s1, 3).conv("a", 4, 4, 3);
        let mut s2 = ParamStore::<f32>::new();
        ParamBuilder::new(&mut s2, 3).conv("a", 4, 4, 3);
        let a = s1.value(ParamId(0));
        let b = s2.value(ParamId(0));
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(*x as f32, *y);
        }
    }

    #[test]
    fn truncation_bound_holds() {
        let mut s = ParamStore::<f64>::new();
        let mut b = ParamBuilder::new(&mut s, 11);
        let c = b.conv("a", 16, 16, 3);
        let fan_in = (16.0 * 9.0_f64).sqrt();
        let bound = 2.0 * (2.0_f64).sqrt() / fan_in;
        assert!(s.value(c.w).iter().all(|v| v.abs() <= bound + 1e-12));
    }
}
