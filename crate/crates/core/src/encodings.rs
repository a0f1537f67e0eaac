//! Position (ξ) and range (ρ) encoding maps for a feature-map size.
//!
//! With 1-based indices `i ∈ 1..=H`, `j ∈ 1..=W`:
//!
//! ```text
//! r = 2|i − H/2| / H        c = 2|j − W/2| / W        ρ = 2·sqrt((r² + c²)/2) − 1
//! ```
//!
//! `r, c ∈ [0, 1]` and `ρ ∈ [−1, 1]`. Maps depend only on `(H, W)` and are
//! cached process-wide.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncodingMaps {
    /// `1×2×H×W`; channel 0 is the row encoding, channel 1 the column encoding.
    pub xi: Tensor<f64>,
    /// `1×1×H×W`.
    pub rho: Tensor<f64>,
}

impl EncodingMaps {
    pub fn height(&self) -> usize {
        self.rho.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.rho.shape()[3]
    }

    pub fn row(&self, i: usize, j: usize) -> f64 {
        self.xi.at4(0, 0, i, j)
    }

    pub fn col(&self, i: usize, j: usize) -> f64 {
        self.xi.at4(0, 1, i, j)
    }

    pub fn range(&self, i: usize, j: usize) -> f64 {
        self.rho.at4(0, 0, i, j)
    }
}

/// Row/column encoding for 1-based `index` along an axis of length `len`.
fn axis_encoding(index: usize, len: usize) -> f64 {
    let half = len as f64 / 2.0;
    2.0 * (index as f64 - half).abs() / len as f64
}

pub fn make_encodings(h: usize, w: usize) -> Result<EncodingMaps> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("encoding size must be positive, got {h}x{w}")));
    }
    let plane = h * w;
    let mut xi = vec![0.0; 2 * plane];
    let mut rho = vec![0.0; plane];
    for i in 0..h {
        let r = axis_encoding(i + 1, h);
        for j in 0..w {
            let c = axis_encoding(j + 1, w);
            xi[i * w + j] = r;
            xi[plane + i * w + j] = c;
            // Clamp guards the last ulp; analytically already within [-1, 1].
            rho[i * w + j] = (2.0 * ((r * r + c * c) / 2.0).sqrt() - 1.0).clamp(-1.0, 1.0);
        }
    }
    Ok(EncodingMaps {
        xi: Tensor::new(vec![1, 2, h, w], xi)?,
        rho: Tensor::new(vec![1, 1, h, w], rho)?,
    })
}

type Cache = RwLock<HashMap<(usize, usize), Arc<EncodingMaps>>>;

/// Cached [`make_encodings`].
pub fn encodings(h: usize, w: usize) -> Result<Arc<EncodingMaps>> {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(m) = cache.read().expect("encoding cache poisoned").get(&(h, w)) {
        return Ok(Arc::clone(m));
    }
    let maps = Arc::new(make_encodings(h, w)?);
    cache
        .write()
        .expect("encoding cache poisoned")
        .entry((h, w))
        .or_insert_with(|| Arc::clone(&maps));
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_by_four_rows() {
        let e = make_encodings(4, 4).unwrap();
        // 1-based i=2 → 0, i=4 → 1
        assert_eq!(e.row(1, 0), 0.0);
        assert_eq!(e.row(3, 0), 1.0);
        assert_eq!(e.row(0, 0), 0.5);
    }

    #[test]
    fn center_and_corner_range() {
        let e = make_encodings(8, 6).unwrap();
        assert_eq!(e.range(3, 2), -1.0);
        assert_eq!(e.range(7, 5), 1.0);
    }

    #[test]
    fn rejects_empty() {
        assert!(make_encodings(0, 3).is_err());
        assert!(make_encodings(3, 0).is_err());
    }

    #[test]
    fn cache_returns_same_values() {
        let a = encodings(5, 7).unwrap();
        let b = encodings(5, 7).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(*a, make_encodings(5, 7).unwrap());
    }

    proptest! {
        #[test]
        fn bounds_hold(h in 1usize..=512, w in 1usize..=512) {
            let e = make_encodings(h, w).unwrap();
            prop_assert!(e.xi.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(e.rho.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
            prop_assert_eq!(e.range(h - 1, w - 1), 1.0);
        }

        #[test]
        fn mirror_symmetry_about_half_extent(h in 2usize..64, w in 2usize..64) {
            // r(i) = r(H − i) for 1-based i in 1..H
            let e = make_encodings(h, w).unwrap();
            for i in 1..h {
                for j in 1..w {
                    let (a, b) = ((i - 1, j - 1), (h - i - 1, w - j - 1));
                    prop_assert!((e.row(a.0, a.1) - e.row(b.0, a.1)).abs() < 1e-12);
                    prop_assert!((e.col(a.0, a.1) - e.col(a.0, b.1)).abs() < 1e-12);
                    prop_assert!((e.range(a.0, a.1) - e.range(b.0, b.1)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn column_grows_away_from_midline(h in 1usize..32, w in 2usize..128) {
            let e = make_encodings(h, w).unwrap();
            let mid = w / 2; // 0-based index of 1-based W/2 is mid - 1
            for j in mid..w {
                if j > 0 {
                    prop_assert!(e.col(0, j) >= e.col(0, j - 1));
                }
            }
            // ρ is monotone in the radial term
            let mut pairs: Vec<(f64, f64)> = (0..h)
                .flat_map(|i| (0..w).map(move |j| (i, j)))
                .map(|(i, j)| ((e.row(i, j).powi(2) + e.col(i, j).powi(2)).sqrt(), e.range(i, j)))
                .collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for p in pairs.windows(2) {
                prop_assert!(p[1].1 >= p[0].1 - 1e-12);
            }
        }
    }
}
