//! Dense f32 tensors with flat row-major storage, plus the shared-parameter
//! handle used by models and the optimizer.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::TensorError;

/// n-dimensional f32 array. `data.len()` always equals `shape` product; the
/// gradient buffer, when present, has the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.contains(&0) {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Truncated-normal init: N(0, sigma) with resampling outside two sigma.
    pub fn trunc_normal(shape: Vec<usize>, sigma: f32, rng: &mut ChaCha12Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let z: f32 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                data.push(z * sigma);
            }
        }
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        debug_assert_eq!(g.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (dst, &src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
    }
}

/// Shared handle to a trainable (or frozen) tensor. The model owns the
/// canonical set; tapes hold clones so backward can write gradients back.
#[derive(Clone)]
pub struct Param {
    inner: Rc<RefCell<Tensor>>,
}

impl Param {
    pub fn new(mut tensor: Tensor) -> Self {
        tensor.requires_grad = true;
        Param {
            inner: Rc::new(RefCell::new(tensor)),
        }
    }

    pub fn frozen(tensor: Tensor) -> Self {
        Param {
            inner: Rc::new(RefCell::new(tensor)),
        }
    }

    pub fn borrow(&self) -> std::cell::Ref<'_, Tensor> {
        self.inner.borrow()
    }

    pub fn borrow_mut(&self) -> std::cell::RefMut<'_, Tensor> {
        self.inner.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().numel()
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.borrow_mut().requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn ptr_eq(&self, other: &Param) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let t = self.inner.borrow();
        write!(f, "Param{:?}", t.shape)
    }
}

/// Ordered, named parameter registry. Iteration order is construction order,
/// which keeps optimizer state and checkpoints deterministic.
#[derive(Default)]
pub struct Params {
    entries: Vec<(String, Param)>,
    index: BTreeMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn register(&mut self, name: impl Into<String>, param: Param) -> Param {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, param.clone()));
        param
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.entries {
            p.borrow_mut().zero_grad();
        }
    }

    /// Toggle `requires_grad` for every parameter whose name starts with
    /// `prefix`. Returns how many were touched.
    pub fn set_trainable_by_prefix(&self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, p) in &self.entries {
            if name.starts_with(prefix) {
                p.set_requires_grad(trainable);
                n += 1;
            }
        }
        n
    }

    /// Snapshot all values (used for best-epoch retention).
    pub fn snapshot(&self) -> Vec<Vec<f32>> {
        self.entries
            .iter()
            .map(|(_, p)| p.borrow().data().to_vec())
            .collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f32>]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for ((_, p), values) in self.entries.iter().zip(snapshot) {
            p.borrow_mut().data_mut().copy_from_slice(values);
        }
    }

    /// FNV-1a fingerprint of raw parameter bytes under a name prefix.
    /// Bit-identical values give identical fingerprints.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, p) in &self.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in p.borrow().data() {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn shape_data_mismatch_is_rejected() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        match err {
            TensorError::ShapeDataMismatch {
                expected, actual, ..
            } => {
                assert_eq!(expected, 6);
                assert_eq!(actual, 5);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut rng = rng::stream(3, "init");
        let t = Tensor::trunc_normal(vec![64, 64], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04 + 1e-9));
        assert!(t.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn grad_accumulation_adds() {
        let mut t = Tensor::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 4.0, 6.0][..]));
        t.zero_grad();
        assert!(t.grad.is_none());
    }

    #[test]
    fn fingerprint_tracks_prefix_only() {
        let mut ps = Params::new();
        ps.register("enc.w", Param::new(Tensor::full(vec![2], 1.0)));
        ps.register("head.w", Param::new(Tensor::full(vec![2], 2.0)));
        let before = ps.fingerprint("head.");
        ps.get("enc.w").unwrap().borrow_mut().data_mut()[0] = 9.0;
        assert_eq!(before, ps.fingerprint("head."));
        ps.get("head.w").unwrap().borrow_mut().data_mut()[0] = 9.0;
        assert_ne!(before, ps.fingerprint("head."));
    }
}
