use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 2-D tensor from rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::contract("ragged rows"));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor (1 for vectors).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::contract(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }
}

/// `a (n×k) · b (k×m)`. Each output row depends only on the matching row of
/// `a`, and accumulation order is fixed, so results do not depend on how
/// rows are batched.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::contract(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; n * m];
    matmul_into(&a.data, &b.data, &mut out, n, k, m);
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Adds a row vector (bias) to every row in place.
pub fn add_row_inplace(x: &mut Tensor, bias: &[f64]) {
    let c = x.cols();
    debug_assert_eq!(c, bias.len());
    for row in x.data.chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column-wise concatenation of 2-D tensors with equal row counts.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let r = parts
        .first()
        .ok_or_else(|| Error::contract("concat of nothing"))?
        .rows();
    if parts.iter().any(|p| p.rows() != r) {
        return Err(Error::contract("concat row counts differ"));
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor {
        shape: vec![r, total],
        data,
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
        assert!(matmul(&a, &a.transpose().reshape(vec![1, 4]).unwrap()).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
