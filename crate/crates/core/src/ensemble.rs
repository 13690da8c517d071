//! Ensemble execution and seed-ordered reduction.
//!
//! Work items are indexed `0..n`; results always come back in index order,
//! so every reduction is identical whether items ran on one thread or many.
//! With the `parallel` feature off, every [`Parallelism`] runs sequentially.

/// Environment variable consulted when no worker count is given.
pub const WORKERS_ENV: &str = "MEDLAB_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    /// Thread pool of the given size; `0` means one thread per core.
    Workers(usize),
    #[default]
    Auto,
}

impl Parallelism {
    /// Explicit count, else `MEDLAB_WORKERS`, else one per core.
    pub fn resolve(workers: Option<usize>) -> Self {
        let n = workers.or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()));
        match n {
            Some(1) => Parallelism::Sequential,
            Some(k) => Parallelism::Workers(k),
            None => Parallelism::Auto,
        }
    }

    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && !matches!(self, Parallelism::Sequential)
    }

    /// `f(0), …, f(n-1)`, in index order.
    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            match *self {
                Parallelism::Sequential => (0..n).map(f).collect(),
                Parallelism::Auto | Parallelism::Workers(0) => {
                    (0..n).into_par_iter().map(f).collect()
                }
                Parallelism::Workers(k) => match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
                    Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
                    Err(e) => {
                        log::warn!("could not build a {k}-thread pool ({e}); running sequentially");
                        (0..n).map(f).collect()
                    }
                },
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..n).map(f).collect()
        }
    }
}

/// Mean and standard error of the mean. `se` is 0 for fewer than two samples.
pub fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Sample standard deviation.
pub fn std_dev(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Pointwise mean and standard error across equally long series.
pub fn pointwise_mean_se(series: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let Some(len) = series.iter().map(Vec::len).min() else {
        return Vec::new();
    };
    (0..len)
        .map(|i| {
            let column: Vec<f64> = series.iter().map(|s| s[i]).collect();
            mean_and_se(&column)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        for par in [Parallelism::Sequential, Parallelism::Auto, Parallelism::Workers(3)] {
            let v = par.map(100, |i| i * i);
            assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mean_se_known_values() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_se(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn pointwise_uses_shortest_series() {
        let s = vec![vec![1.0, 2.0, 3.0], vec![3.0, 4.0]];
        let r = pointwise_mean_se(&s);
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].0, 2.0);
    }
}
