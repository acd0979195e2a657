//! Flat views over groups of parameter tensors.
//!
//! Models, gradients and optimizer state all expose their tensors as an ordered
//! list of contiguous slices, which is all the optimizers and finite-difference
//! checks need.

pub trait ParamSet {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Read parameter `index` in flattened order.
    fn get_flat(&self, mut index: usize) -> f64 {
        for s in self.slices() {
            if index < s.len() {
                return s[index];
            }
            index -= s.len();
        }
        panic!("parameter index out of range");
    }

    fn set_flat(&mut self, mut index: usize, value: f64) {
        for s in self.slices_mut() {
            if index < s.len() {
                s[index] = value;
                return;
            }
            index -= s.len();
        }
        panic!("parameter index out of range");
    }

    fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            for v in s.iter_mut() {
                *v *= factor;
            }
        }
    }
}

/// Contiguous slice of an owned ndarray. All arrays in this crate are built in
/// standard layout, so this never fails in practice.
pub(crate) fn view<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameter arrays are contiguous")
}

pub(crate) fn view_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter arrays are contiguous")
}
