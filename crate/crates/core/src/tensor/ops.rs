use super::Tensor;
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// `c += alpha * op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
/// `a` and `b` are stored row-major in their untransposed shapes.
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: Transpose,
    b: &[f64],
    tb: Transpose,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Transpose::No => (k as isize, 1),
        Transpose::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Transpose::No => (n as isize, 1),
        Transpose::Yes => (1, k as isize),
    };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements, and the
    // strides above address them in bounds for either orientation.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// libm's tanh goes through expm1 and dominated training profiles. This form
// saturates cleanly to +-1 and loses only a few ulps near zero.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu_inner_tanh(x: f64) -> f64 {
    fast_tanh(SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x))
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_inner_tanh(x))
}

/// Derivative of GELU at `x`, given the `t = tanh(..)` from the forward pass.
pub(crate) fn gelu_grad_scalar(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if k != k2 {
            return Err(self.dim_err("matmul", other));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            1.0,
            &self.data,
            Transpose::No,
            &other.data,
            Transpose::No,
            &mut out,
        );
        finite(Tensor::matrix(m, n, out), "matmul")
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2();
        let (n, k2) = other.dims2();
        if k != k2 {
            return Err(self.dim_err("matmul_t", other));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            1.0,
            &self.data,
            Transpose::No,
            &other.data,
            Transpose::Yes,
            &mut out,
        );
        finite(Tensor::matrix(m, n, out), "matmul_t")
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.dims2() != other.dims2() {
            return Err(self.dim_err("add", other));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        finite(self.with_shape_of(data), "add")
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, c) = self.dims2();
        if bias.len() != c {
            return Err(self.dim_err("add_row", bias));
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        finite(self.with_shape_of(data), "add_row")
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|x| x * factor).collect();
        finite(self.with_shape_of(data), "scale")
    }

    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(self.layer_norm_cached(gamma, beta, eps)?.0)
    }

    pub(crate) fn layer_norm_cached(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, LayerNormCache)> {
        let (r, c) = self.dims2();
        if gamma.len() != c {
            return Err(self.dim_err("layer_norm", gamma));
        }
        if beta.len() != c {
            return Err(self.dim_err("layer_norm", beta));
        }
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gamma.data[j] + beta.data[j];
            }
        }
        let out = finite(self.with_shape_of(out), "layer_norm")?;
        Ok((out, LayerNormCache { xhat, inv_std }))
    }

    pub fn gelu(&self) -> Result<Tensor> {
        Ok(self.gelu_cached()?.0)
    }

    /// GELU plus the inner tanh values, which the backward pass reuses.
    pub(crate) fn gelu_cached(&self) -> Result<(Tensor, Vec<f64>)> {
        let tanh: Vec<f64> = self.data.iter().map(|&x| gelu_inner_tanh(x)).collect();
        let data = self
            .data
            .iter()
            .zip(&tanh)
            .map(|(&x, &t)| 0.5 * x * (1.0 + t))
            .collect();
        Ok((finite(self.with_shape_of(data), "gelu")?, tanh))
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, c) = self.dims2();
        let mut data = self.data.clone();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        finite(self.with_shape_of(data), "softmax_rows")
    }

    /// Gathers rows of an embedding table `[vocab, dim]`.
    pub fn embedding_lookup(&self, ids: &[u32]) -> Result<Tensor> {
        let (v, d) = self.dims2();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id_us = id as usize;
            if id_us >= v {
                return Err(Error::Vocab { id, size: v });
            }
            out.extend_from_slice(&self.data[id_us * d..(id_us + 1) * d]);
        }
        if ids.is_empty() {
            return Err(Error::Contract("embedding_lookup of no ids".into()));
        }
        Ok(Tensor::matrix(ids.len(), d, out))
    }

    /// Replaces every element whose mask entry is `true` with `value`.
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Result<Tensor> {
        if mask.len() != self.len() {
            return Err(Error::Dimension {
                op: "masked_fill",
                lhs: self.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let data = self
            .data
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        finite(self.with_shape_of(data), "masked_fill")
    }

    fn dim_err(&self, op: &'static str, other: &Tensor) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Numerically stable `log(softmax(row))`.
pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn finite(t: Tensor, op: &str) -> Result<Tensor> {
    t.check_finite(op)?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(t.softmax_rows().unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::new(
            vec![3, 4],
            (0..12).map(|i| (i as f64 * 0.7).sin() * 5.0).collect(),
        )
        .unwrap();
        let s = t.softmax_rows().unwrap();
        for i in 0..3 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let t = Tensor::new(vec![1, 4], vec![3.0; 4]).unwrap();
        let gamma = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let beta = Tensor::zeros(&[4]);
        let y = t.layer_norm(&gamma, &beta, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_matmul() {
        let x = Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 4.0, 3.0, 7.0]).unwrap();
        assert_eq!(Tensor::identity(3).matmul(&x).unwrap(), x);
    }

    #[test]
    fn matmul_t_matches_explicit_transpose() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.0, 0.0, -3.0]).unwrap();
        let bt = Tensor::new(vec![3, 2], vec![0.5, 1.0, -1.0, 0.0, 2.0, -3.0]).unwrap();
        assert_eq!(a.matmul_t(&b).unwrap(), a.matmul(&bt).unwrap());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match a.matmul(&b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn embedding_out_of_range() {
        let table = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            table.embedding_lookup(&[1, 4]),
            Err(Error::Vocab { id: 4, size: 4 })
        ));
    }

    #[test]
    fn non_finite_is_an_error() {
        let a = Tensor::new(vec![1, 1], vec![1e200]).unwrap();
        assert!(matches!(a.matmul(&a), Err(Error::Numeric(_))));
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn masked_fill_replaces_flagged_entries() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = a.masked_fill(&[false, true, true, false], -9.0).unwrap();
        assert_eq!(y.data(), &[1.0, -9.0, -9.0, 4.0]);
    }
}
