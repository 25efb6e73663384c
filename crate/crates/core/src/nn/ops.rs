//! Single-image forms of the batched layers.

use ndarray::{Array3, Array4};

use super::{AvgPool, Conv2d, NnError, Tensor};

fn to_batch(x: &Array3<f64>) -> Tensor {
    let (h, w, c) = x.dim();
    Tensor::new(vec![1, h, w, c], x.iter().copied().collect()).expect("non-empty image")
}

fn from_batch(t: Tensor) -> Array3<f64> {
    let s = t.shape().to_vec();
    Array3::from_shape_vec((s[1], s[2], s[3]), t.into_data()).expect("rank-4 single sample")
}

/// Valid cross-correlation of an `H × W × C_in` image with kernels laid out
/// `C_out × kh × kw × C_in`, plus a per-channel bias.
pub fn conv2d(input: &Array3<f64>, kernels: &Array4<f64>, bias: &[f64]) -> Result<Array3<f64>, NnError> {
    let (cout, kh, kw, cin) = kernels.dim();
    if bias.len() != cout || input.dim().2 != cin {
        return Err(NnError::ShapeMismatch(format!(
            "input {:?}, kernels {:?}, bias {}",
            input.dim(),
            kernels.dim(),
            bias.len()
        )));
    }
    let hwio = kernels.view().permuted_axes([1, 2, 3, 0]);
    let weight = Tensor::new(vec![kh, kw, cin, cout], hwio.iter().copied().collect())?;
    let conv = Conv2d::from_weights(weight, Tensor::new(vec![cout], bias.to_vec())?)?;
    Ok(from_batch(conv.infer(&to_batch(input))?))
}

/// Non-overlapping mean pooling of an `H × W × C` image.
pub fn avg_pool(input: &Array3<f64>, ph: usize, pw: usize) -> Result<Array3<f64>, NnError> {
    Ok(from_batch(AvgPool::new(ph, pw).infer(&to_batch(input))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        let x = Array3::from_shape_fn((4, 3, 1), |(i, j, _)| (i * 3 + j) as f64 - 2.0);
        let k = Array4::from_elem((1, 1, 1, 1), 1.0);
        assert_eq!(conv2d(&x, &k, &[0.0]).unwrap(), x);
    }

    #[test]
    fn matches_direct_sum() {
        let x = Array3::from_shape_fn((5, 4, 2), |(i, j, c)| ((i * 7 + j * 3 + c * 5) % 11) as f64 - 4.0);
        let k = Array4::from_shape_fn((3, 2, 3, 2), |(o, a, b, c)| ((o + 2 * a + b * c) % 5) as f64 * 0.25 - 0.5);
        let bias = [0.1, -0.2, 0.3];
        let y = conv2d(&x, &k, &bias).unwrap();
        assert_eq!(y.dim(), (4, 2, 3));
        for ((i, j, o), &v) in y.indexed_iter() {
            let mut s = bias[o];
            for a in 0..2 {
                for b in 0..3 {
                    for c in 0..2 {
                        s += x[[i + a, j + b, c]] * k[[o, a, b, c]];
                    }
                }
            }
            assert!((v - s).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_example() {
        let y = avg_pool(&Array3::from_elem((48, 12, 8), 1.0), 2, 1).unwrap();
        assert_eq!(y.dim(), (24, 12, 8));
    }
}
