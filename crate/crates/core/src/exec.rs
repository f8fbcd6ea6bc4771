//! Data-parallel helpers. With the `parallel` feature the work is spread
//! over the rayon pool; without it (or with [`Exec::Sequential`]) the same
//! closures run in a plain loop. Outputs are always in index order, so
//! results do not depend on the worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Maps `f` over `0..n`, collecting in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Maps `f` over a slice, collecting in order.
    pub fn map_slice<'a, S, T, F>(self, items: &'a [S], f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(&'a S) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    /// Runs `f` on every element of a mutable slice.
    pub fn for_each_mut<S, F>(self, items: &mut [S], f: F)
    where
        S: Send,
        F: Fn(usize, &mut S) + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter_mut().enumerate().for_each(|(i, s)| f(i, s)),
            _ => items.iter_mut().enumerate().for_each(|(i, s)| f(i, s)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let f = |i: usize| (i as f64).sqrt();
        assert_eq!(Exec::Sequential.map(1000, f), Exec::Parallel.map(1000, f));
        let xs: Vec<u32> = (0..100).collect();
        assert_eq!(
            Exec::Sequential.map_slice(&xs, |x| x * 2),
            Exec::Parallel.map_slice(&xs, |x| x * 2)
        );
        let mut a = vec![0usize; 50];
        Exec::Parallel.for_each_mut(&mut a, |i, v| *v = i * i);
        assert_eq!(a[7], 49);
    }
}
