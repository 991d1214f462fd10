//! Dense row-major f64 tensors with NumPy-style broadcasting.
//!
//! Values are immutable once constructed; clones share storage. All shape
//! arithmetic is right-aligned: trailing dimensions must match or be 1.

use std::sync::Arc;

use crate::tape::AdError;

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, AdError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AdError::ShapeMismatch {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(i)).collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the same storage under a new shape of equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor, AdError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }
}

/// Broadcast result shape of two operand shapes, right-aligned.
pub fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>, AdError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(AdError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Row-major strides with 0 wherever the dim is broadcast (size 1 against a
/// larger output dim), so a flat output index maps straight to an input index.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        let s = shape[i];
        strides[pad + i] = if s == 1 { 0 } else { acc };
        acc *= s;
    }
    strides
}

/// Applies a binary op elementwise with broadcasting.
pub fn zip_broadcast(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, AdError> {
    if a.shape == b.shape {
        let data: Vec<f64> = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data: Arc::new(data),
        });
    }
    if b.len() == 1 {
        let y = b.data[0];
        return Ok(a.map(|x| f(x, y)));
    }
    if a.len() == 1 {
        let x = a.data[0];
        return Ok(b.map(|y| f(x, y)));
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape, op)?;
    let n: usize = out_shape.iter().product();
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut data = Vec::with_capacity(n);
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..n {
        data.push(f(a.data[ia], b.data[ib]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data: Arc::new(data),
    })
}

/// Sums a cotangent of `from` shape down to `to` shape (the reverse of a
/// broadcast). Used by binary-op VJPs.
pub fn reduce_to_shape(cot: &Tensor, to: &[usize]) -> Tensor {
    if cot.shape() == to {
        return cot.clone();
    }
    let n_to: usize = to.iter().product();
    if n_to == 1 {
        let s: f64 = cot.data.iter().sum();
        return Tensor {
            shape: to.to_vec(),
            data: Arc::new(vec![s]),
        };
    }
    let strides = broadcast_strides(to, cot.shape());
    let rank = cot.shape.len();
    let mut out = vec![0.0f64; n_to];
    let mut idx = vec![0usize; rank];
    let mut it = 0usize;
    for &g in cot.data.iter() {
        out[it] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            it += strides[d];
            if idx[d] < cot.shape[d] {
                break;
            }
            idx[d] = 0;
            it -= strides[d] * cot.shape[d];
        }
    }
    Tensor {
        shape: to.to_vec(),
        data: Arc::new(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(
            broadcast_shape(&[4, 4, 3], &[4, 4, 1], "t").unwrap(),
            vec![4, 4, 3]
        );
        assert_eq!(broadcast_shape(&[1], &[2, 3], "t").unwrap(), vec![2, 3]);
        assert!(broadcast_shape(&[4, 3], &[3, 4], "t").is_err());
    }

    #[test]
    fn zip_and_reduce_roundtrip() {
        let a = Tensor::from_fn(&[2, 2, 3], |i| i as f64);
        let b = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = zip_broadcast(&a, &b, "mul", |x, y| x * y).unwrap();
        assert_eq!(out.shape(), &[2, 2, 3]);
        // texel (1,1,c): (9+c) * 4
        assert_eq!(out.data()[9..12], [36.0, 40.0, 44.0]);

        let ones = Tensor::full(&[2, 2, 3], 1.0);
        let red = reduce_to_shape(&ones, &[2, 2, 1]);
        assert_eq!(red.data(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn reduce_to_scalar_sums_everything() {
        let t = Tensor::from_fn(&[3, 5], |i| i as f64);
        let r = reduce_to_shape(&t, &[1]);
        assert_eq!(r.item(), (0..15).sum::<usize>() as f64);
    }
}
