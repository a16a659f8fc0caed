//! Central finite-difference validation of analytic gradients.
//!
//! The oracle only needs a scalar function of a parameter list; it knows
//! nothing about the tape, so it stays an independent check of whatever
//! produced the analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One sampled coordinate: (parameter index, flat element index).
pub type Coord = (usize, usize);

/// Max relative error between `analytic` gradients and central finite
/// differences of `f` at the sampled coordinates.
///
/// The relative error at a coordinate is
/// `|analytic - central| / (|analytic| + |central| + 1e-12)`.
pub fn finite_difference_check<Func>(
    mut f: Func,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    eps: f64,
    coords: &[Coord],
) -> Result<f64>
where
    Func: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    assert!(eps > 0.0, "eps must be positive");
    assert_eq!(params.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for &(ti, ei) in coords {
        let orig = work[ti].data()[ei];

        work[ti].data_mut()[ei] = orig + eps;
        let plus = f(&work)?;
        work[ti].data_mut()[ei] = orig - eps;
        let minus = f(&work)?;
        work[ti].data_mut()[ei] = orig;

        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteEval {
                tensor: ti,
                index: ei,
            });
        }
        let central = (plus - minus) / (2.0 * eps);
        let ana = analytic[ti].data()[ei];
        let rel = (ana - central).abs() / (ana.abs() + central.abs() + 1e-12);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

/// Deterministically sample `n` coordinates spread over all parameters.
pub fn sample_coords(params: &[Tensor<f64>], n: usize, seed: u64) -> Vec<Coord> {
    let mut rng = crate::rng::Rng::new(seed);
    let mut coords = Vec::with_capacity(n);
    let nonempty: Vec<usize> = (0..params.len())
        .filter(|&i| !params[i].is_empty())
        .collect();
    for i in 0..n {
        let ti = nonempty[i % nonempty.len()];
        let ei = rng.below(params[ti].len());
        coords.push((ti, ei));
    }
    coords
}
