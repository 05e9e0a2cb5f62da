//! Virtual outliers from the low-likelihood tail of a class Gaussian.
//!
//! A pool of `M` samples is drawn from the class Gaussian and the `t` with
//! the smallest log-density are kept. The threshold is reported in log
//! space; for `m` in the hundreds the raw density underflows.

use crate::density::GaussianModel;
use crate::error::{Result, VosError};
use crate::mathkit::{RngState, Vector};

pub const DEFAULT_POOL_SIZE: usize = 10_000;
pub const DEFAULT_T: usize = 1;

#[derive(Debug, Clone)]
pub struct OutlierBatch {
    /// Model index of the class the outliers were drawn from.
    pub class_id: usize,
    /// Ordered by increasing log-density.
    pub outliers: Vec<Vector>,
    /// Log-density of each outlier under its class Gaussian.
    pub log_likelihoods: Vec<f64>,
    /// Log of the realised threshold ε: the t-th smallest pool log-density.
    pub log_epsilon: f64,
    /// Pool index of each outlier.
    pub pool_indices: Vec<usize>,
    pub pool_size: usize,
}

impl OutlierBatch {
    pub fn epsilon(&self) -> f64 {
        self.log_epsilon.exp()
    }
}

/// Draw a pool of `pool_size` samples for `class` and keep the `t` least likely.
pub fn synthesize(
    model: &GaussianModel,
    class: usize,
    pool_size: usize,
    t: usize,
    rng: &mut RngState,
) -> Result<OutlierBatch> {
    check_counts(pool_size, t)?;
    let pool = model.sample(class, pool_size, rng)?;
    select_from_pool(model, class, pool, t)
}

/// Selection step of [`synthesize`] on an explicit pool. Ties in log-density
/// resolve to the lower pool index.
pub fn select_from_pool(
    model: &GaussianModel,
    class: usize,
    pool: Vec<Vector>,
    t: usize,
) -> Result<OutlierBatch> {
    let pool_size = pool.len();
    check_counts(pool_size, t)?;
    let log_p = pool
        .iter()
        .map(|v| model.log_density(class, v))
        .collect::<Result<Vec<f64>>>()?;

    let mut order: Vec<usize> = (0..pool_size).collect();
    let by_density = |a: &usize, b: &usize| log_p[*a].total_cmp(&log_p[*b]).then(a.cmp(b));
    if t < pool_size {
        order.select_nth_unstable_by(t - 1, by_density);
        order.truncate(t);
    }
    order.sort_unstable_by(by_density);

    let mut pool: Vec<Option<Vector>> = pool.into_iter().map(Some).collect();
    let outliers = order.iter().map(|&i| pool[i].take().expect("distinct pool index")).collect();
    let log_likelihoods: Vec<f64> = order.iter().map(|&i| log_p[i]).collect();
    Ok(OutlierBatch {
        class_id: class,
        outliers,
        log_epsilon: log_likelihoods[t - 1],
        log_likelihoods,
        pool_indices: order,
        pool_size,
    })
}

fn check_counts(pool_size: usize, t: usize) -> Result<()> {
    if t == 0 {
        return Err(VosError::InvalidArgument("t must be at least 1".into()));
    }
    if t > pool_size {
        return Err(VosError::InvalidArgument(format!("t = {t} exceeds pool size {pool_size}")));
    }
    Ok(())
}

/// `n` vectors from `N(0, σ²I)`, independent of any fitted model.
pub fn gaussian_noise_outliers(dim: usize, n: usize, scale: f64, rng: &mut RngState) -> Result<Vec<Vector>> {
    if n == 0 || dim == 0 {
        return Err(VosError::Empty("noise outlier count"));
    }
    if !(scale > 0.0) {
        return Err(VosError::InvalidArgument(format!("noise scale must be > 0, got {scale}")));
    }
    Ok((0..n).map(|_| (0..dim).map(|_| scale * rng.normal()).collect()).collect())
}
