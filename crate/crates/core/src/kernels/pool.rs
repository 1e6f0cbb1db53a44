use alloc::vec::Vec;

use crate::error::Result;
use crate::tensor::Tensor;

/// Mean over each channel's H×W plane, giving N×C×1×1.
pub fn adaptive_avg_pool_1x1(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let count = (h * w) as f64;
    let data: Vec<f64> = x.data().chunks_exact(h * w).map(|p| p.iter().sum::<f64>() / count).collect();
    Tensor::from_vec(&[n, c, 1, 1], data)
}

/// Spreads each pooled gradient uniformly over its plane.
pub fn adaptive_avg_pool_1x1_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let mut gx = Tensor::zeros(input_shape);
    let [_, _, h, w] = gx.dims4()?;
    let count = (h * w) as f64;
    for (plane, &g) in gx.data_mut().chunks_exact_mut(h * w).zip(grad_out.data()) {
        plane.fill(g / count);
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn pools_plane_means() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(adaptive_avg_pool_1x1(&x).unwrap().data(), &[4.0]);
        let single = Tensor::from_vec(&[2, 1, 1, 1], vec![-3.5, 9.0]).unwrap();
        assert_eq!(adaptive_avg_pool_1x1(&single).unwrap().data(), single.data());
        let constant = Tensor::full(&[1, 3, 5, 7], 0.1);
        assert!(adaptive_avg_pool_1x1(&constant).unwrap().data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }
}
