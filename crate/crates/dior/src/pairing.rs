//! Ordered-pair construction over a batch with ground-truth differential
//! labels r_{i,j} = y_i - y_j.

use crate::error::{Error, Result};

/// Ordinal class label in {1..n_classes}.
pub type OrdinalLabel = u8;

/// Three-way ordering relation between two samples under threshold tau.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ordering3 {
    Precedes,
    Approx,
    Succeeds,
}

/// All ordered pairs (i, j), i != j, over one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    /// (minuend index, subtrahend index) in enumeration order.
    pub pairs: Vec<(usize, usize)>,
    /// r_{i,j} = y_i - y_j per pair, same order.
    pub labels: Vec<i32>,
    /// Label span |c_Nc - c_1|.
    pub span: i32,
}

fn check_label(y: OrdinalLabel, n_classes: u8) -> Result<()> {
    if y < 1 || y > n_classes {
        return Err(Error::Contract {
            op: "differential_label",
            detail: format!("label {y} outside 1..{n_classes}"),
        });
    }
    Ok(())
}

/// r = y_i - y_j.
pub fn differential_label(y_i: OrdinalLabel, y_j: OrdinalLabel, n_classes: u8) -> Result<i32> {
    check_label(y_i, n_classes)?;
    check_label(y_j, n_classes)?;
    Ok(y_i as i32 - y_j as i32)
}

/// Threshold comparison of two labels; diagnostic only, never trained on.
pub fn ordering_relation(y_i: OrdinalLabel, y_j: OrdinalLabel, tau: f64) -> Ordering3 {
    let d = y_i as f64 - y_j as f64;
    if d > tau {
        Ordering3::Succeeds
    } else if d < -tau {
        Ordering3::Precedes
    } else {
        Ordering3::Approx
    }
}

/// Enumerate all ordered pairs: i ascending, then j ascending skipping i.
pub fn enumerate_pairs(batch_labels: &[OrdinalLabel], n_classes: u8) -> Result<PairSet> {
    let n = batch_labels.len();
    if n < 2 {
        return Err(Error::Contract {
            op: "enumerate_pairs",
            detail: format!("need at least 2 samples, got {n}"),
        });
    }
    let mut pairs = Vec::with_capacity(n * (n - 1));
    let mut labels = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            pairs.push((i, j));
            labels.push(differential_label(batch_labels[i], batch_labels[j], n_classes)?);
        }
    }
    Ok(PairSet {
        pairs,
        labels,
        span: n_classes as i32 - 1,
    })
}

/// f^d_{i,j} = f_i - f_j per pair, in pair-set order.
pub fn differential_features(features: &[Vec<f64>], pairs: &PairSet) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(pairs.pairs.len());
    for &(i, j) in &pairs.pairs {
        let (fi, fj) = (
            features.get(i).ok_or_else(|| index_err(i))?,
            features.get(j).ok_or_else(|| index_err(j))?,
        );
        out.push(fi.iter().zip(fj).map(|(a, b)| a - b).collect());
    }
    Ok(out)
}

fn index_err(i: usize) -> Error {
    Error::Contract {
        op: "differential_features",
        detail: format!("pair index {i} out of range"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn differential_label_cases() {
        assert_eq!(differential_label(3, 1, 4).unwrap(), 2);
        assert_eq!(differential_label(2, 2, 4).unwrap(), 0);
        assert!(differential_label(5, 1, 4).is_err());
        assert!(differential_label(0, 1, 4).is_err());
        // antisymmetry, exhaustive for N_c = 4
        for a in 1..=4u8 {
            for b in 1..=4u8 {
                assert_eq!(
                    differential_label(a, b, 4).unwrap(),
                    -differential_label(b, a, 4).unwrap()
                );
            }
        }
    }

    #[test]
    fn ordering_relation_cases() {
        assert_eq!(ordering_relation(3, 1, 0.5), Ordering3::Succeeds);
        assert_eq!(ordering_relation(2, 2, 0.5), Ordering3::Approx);
        assert_eq!(ordering_relation(1, 3, 0.5), Ordering3::Precedes);
        // sign of r determines the relation for integer labels at tau = 0.5
        for a in 1..=4u8 {
            for b in 1..=4u8 {
                let r = differential_label(a, b, 4).unwrap();
                let expect = match r.signum() {
                    1 => Ordering3::Succeeds,
                    0 => Ordering3::Approx,
                    _ => Ordering3::Precedes,
                };
                assert_eq!(ordering_relation(a, b, 0.5), expect);
            }
        }
    }

    #[test]
    fn enumerate_pairs_order_and_count() {
        let ps = enumerate_pairs(&[1, 3], 4).unwrap();
        assert_eq!(ps.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(ps.labels, vec![-2, 2]);

        let ps = enumerate_pairs(&[1, 2, 3, 4], 4).unwrap();
        assert_eq!(ps.pairs.len(), 12);
        assert_eq!(ps.labels.iter().sum::<i32>(), 0);
        assert!(ps.labels.iter().all(|r| r.abs() <= ps.span));

        assert!(enumerate_pairs(&[1], 4).is_err());
    }

    #[test]
    fn differential_features_cases() {
        let ps = enumerate_pairs(&[1, 2], 4).unwrap();
        let f = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let fd = differential_features(&f, &ps).unwrap();
        assert_eq!(fd[0], vec![1.0, -1.0]); // pair (0,1)
        assert_eq!(fd[1], vec![-1.0, 1.0]); // pair (1,0)

        let same = vec![vec![2.0, 2.0], vec![2.0, 2.0]];
        let fd = differential_features(&same, &ps).unwrap();
        assert!(fd.iter().all(|v| v.iter().all(|&x| x == 0.0)));
    }
}
