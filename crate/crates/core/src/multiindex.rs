//! Increasing multi-indices `I ⊆ {0..n}` stored as bitmasks.
//!
//! Degree-`k` components of a form are laid out in lexicographic order of the
//! increasing tuples, e.g. for `n = 3, k = 2`: `(0,1), (0,2), (1,2)`.

use std::sync::OnceLock;

use crate::geometry::MAX_DIM;

pub type Mask = u8;

/// Lookup tables for all increasing multi-indices of a fixed dimension.
#[derive(Debug)]
pub struct Basis {
    n: usize,
    by_degree: Vec<Vec<Mask>>,
    position: Vec<usize>,
}

impl Basis {
    fn build(n: usize) -> Self {
        let by_degree: Vec<Vec<Mask>> = (0..=n).map(|k| combinations(n, k)).collect();
        let mut position = vec![usize::MAX; 1 << n];
        for masks in &by_degree {
            for (i, &m) in masks.iter().enumerate() {
                position[m as usize] = i;
            }
        }
        Self { n, by_degree, position }
    }

    /// Shared tables for dimension `n` (`n ≤ MAX_DIM`).
    pub fn get(n: usize) -> &'static Basis {
        static TABLES: OnceLock<Vec<Basis>> = OnceLock::new();
        &TABLES.get_or_init(|| (0..=MAX_DIM).map(Basis::build).collect())[n]
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Increasing multi-indices of size `k`, empty when `k > n`.
    pub fn masks(&self, k: usize) -> &[Mask] {
        self.by_degree.get(k).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn count(&self, k: usize) -> usize {
        self.masks(k).len()
    }

    /// Position of `mask` among the multi-indices of its own size.
    #[inline]
    pub fn position(&self, mask: Mask) -> usize {
        self.position[mask as usize]
    }

    pub fn full(&self) -> Mask {
        ((1u16 << self.n) - 1) as Mask
    }
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn combinations(n: usize, k: usize) -> Vec<Mask> {
    fn rec(start: usize, n: usize, left: usize, acc: Mask, out: &mut Vec<Mask>) {
        if left == 0 {
            out.push(acc);
            return;
        }
        for i in start..n {
            if n - i < left {
                break;
            }
            rec(i + 1, n, left - 1, acc | (1 << i), out);
        }
    }
    let mut out = Vec::with_capacity(binomial(n, k));
    if k <= n {
        rec(0, n, k, 0, &mut out);
    }
    out
}

#[inline]
pub fn degree(mask: Mask) -> usize {
    mask.count_ones() as usize
}

/// Elements of `mask` in increasing order.
pub fn elements(mask: Mask) -> Vec<usize> {
    (0..8).filter(|&i| mask & (1 << i) != 0).collect()
}

/// Sign of the permutation that sorts the concatenation `(a, b)` of two
/// disjoint increasing tuples; `dx^a ∧ dx^b = shuffle_sign(a, b) dx^{a∪b}`.
#[inline]
pub fn shuffle_sign(a: Mask, b: Mask) -> f64 {
    debug_assert_eq!(a & b, 0);
    let mut inversions = 0u32;
    let mut rest = b;
    while rest != 0 {
        let j = rest.trailing_zeros();
        // elements of a strictly greater than j
        inversions += (a as u32 >> (j + 1)).count_ones();
        rest &= rest - 1;
    }
    if inversions.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// Sign and sorted mask of an arbitrary index tuple; `None` on repeats.
pub fn sort_tuple(tuple: &[usize]) -> Option<(f64, Mask)> {
    let mut mask: Mask = 0;
    let mut inversions = 0;
    for (pos, &i) in tuple.iter().enumerate() {
        if mask & (1 << i) != 0 {
            return None;
        }
        mask |= 1 << i;
        inversions += tuple[..pos].iter().filter(|&&j| j > i).count();
    }
    Some((if inversions % 2 == 0 { 1.0 } else { -1.0 }, mask))
}
