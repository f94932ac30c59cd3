//! Set-level evaluation of generated masks: Minimum Matching Distance,
//! Coverage and pairwise Dice.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sdf::BinaryMask;

/// Non-empty set of non-empty masks sharing dims and spacing.
#[derive(Clone, Debug)]
pub struct ShapeSet {
    items: Vec<BinaryMask>,
}

impl ShapeSet {
    pub fn new(items: Vec<BinaryMask>) -> Result<Self> {
        let first = items.first().ok_or(Error::TooFewItems { needed: 1, got: 0 })?;
        for m in &items {
            if !m.same_geometry(first) {
                return Err(Error::DimMismatch(format!("mask {:?} vs {:?}", m.dims, first.dims)));
            }
            if m.count() == 0 {
                return Err(Error::EmptyMask);
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[BinaryMask] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// `2 |A & B| / (|A| + |B|)`; 1 for two empty masks.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if !a.same_geometry(b) {
        return Err(Error::DimMismatch(format!("mask {:?} vs {:?}", a.dims, b.dims)));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `1 - Dice(a', b)`, where `a'` is `a` shifted by the rounded centroid offset
/// when `align` is set.
pub fn shape_distance(a: &BinaryMask, b: &BinaryMask, align: bool) -> Result<f64> {
    if !a.same_geometry(b) {
        return Err(Error::DimMismatch(format!("mask {:?} vs {:?}", a.dims, b.dims)));
    }
    let (ca, cb) = match (a.centroid(), b.centroid()) {
        (Some(ca), Some(cb)) => (ca, cb),
        _ => return Err(Error::EmptyMask),
    };
    if !align {
        return Ok(1.0 - dice(a, b)?);
    }
    let offset: [i64; 3] = std::array::from_fn(|i| (cb[i] - ca[i]).round() as i64);
    Ok(1.0 - dice(&a.translated(offset), b)?)
}

/// `d[i][j] = shape_distance(gen[i], ref[j])`, rows computed in parallel.
pub fn distance_matrix(gen: &ShapeSet, reference: &ShapeSet, align: bool) -> Result<Vec<Vec<f64>>> {
    gen.items
        .par_iter()
        .map(|g| reference.items.iter().map(|r| shape_distance(g, r, align)).collect())
        .collect()
}

fn mmd_from(d: &[Vec<f64>], n_ref: usize) -> f64 {
    let total: f64 = (0..n_ref).map(|j| d.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min)).sum();
    total / n_ref as f64
}

fn coverage_from(d: &[Vec<f64>], n_ref: usize) -> f64 {
    let mut covered = vec![false; n_ref];
    for row in d {
        let mut best = 0;
        for j in 1..n_ref {
            if row[j] < row[best] {
                best = j;
            }
        }
        covered[best] = true;
    }
    100.0 * covered.iter().filter(|&&c| c).count() as f64 / n_ref as f64
}

/// Mean over references of the distance to the nearest generated shape.
pub fn mmd(gen: &ShapeSet, reference: &ShapeSet, align: bool) -> Result<f64> {
    Ok(mmd_from(&distance_matrix(gen, reference, align)?, reference.len()))
}

/// Percentage of references that are the nearest neighbour of some generated
/// shape (ties go to the lowest reference index).
pub fn coverage(gen: &ShapeSet, reference: &ShapeSet, align: bool) -> Result<f64> {
    Ok(coverage_from(&distance_matrix(gen, reference, align)?, reference.len()))
}

/// `100 *` mean Dice over unordered pairs, without alignment.
pub fn pdsc(set: &ShapeSet) -> Result<f64> {
    let n = set.len();
    if n < 2 {
        return Err(Error::TooFewItems { needed: 2, got: n });
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let sum = pairs
        .par_iter()
        .map(|&(i, j)| dice(&set.items[i], &set.items[j]))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum::<f64>();
    Ok(100.0 * sum / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mmd: f64,
    pub cov_percent: f64,
    pub pdsc_percent: f64,
    pub n_gen: usize,
    pub n_ref: usize,
    #[serde(skip)]
    pub distances: Vec<Vec<f64>>,
}

impl MetricsReport {
    /// Distance matrix as CSV, one row per generated shape.
    pub fn distances_csv(&self) -> String {
        let mut out = String::from("gen");
        for j in 0..self.n_ref {
            let _ = write!(out, ",ref{j}");
        }
        out.push('\n');
        for (i, row) in self.distances.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// All three metrics from one distance matrix. pDSC needs at least two
/// generated shapes.
pub fn evaluate(gen: &ShapeSet, reference: &ShapeSet, align: bool) -> Result<MetricsReport> {
    let d = distance_matrix(gen, reference, align)?;
    Ok(MetricsReport {
        mmd: mmd_from(&d, reference.len()),
        cov_percent: coverage_from(&d, reference.len()),
        pdsc_percent: pdsc(gen)?,
        n_gen: gen.len(),
        n_ref: reference.len(),
        distances: d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(dims: [usize; 3], lo: [usize; 3], side: usize) -> BinaryMask {
        BinaryMask::from_fn(dims, 1.0, |x, y, z| {
            [x, y, z].iter().zip(lo).all(|(&p, l)| p >= l && p < l + side)
        })
    }

    #[test]
    fn distance_examples() {
        let d = [16; 3];
        let a = cube(d, [2, 2, 2], 4);
        assert_eq!(shape_distance(&a, &a, true).unwrap(), 0.0);
        let b = cube(d, [10, 10, 10], 4);
        assert_eq!(shape_distance(&a, &b, false).unwrap(), 1.0);
        let shifted = cube(d, [5, 2, 2], 4);
        assert_eq!(shape_distance(&a, &shifted, true).unwrap(), 0.0);
        assert!(shape_distance(&a, &shifted, false).unwrap() > 0.0);
        assert!(matches!(shape_distance(&a, &BinaryMask::empty(d, 1.0), true), Err(Error::EmptyMask)));
    }

    #[test]
    fn set_identities() {
        let d = [12; 3];
        let set = ShapeSet::new((0..4).map(|i| cube(d, [i, 1, 1], 2 + i)).collect()).unwrap();
        assert_eq!(mmd(&set, &set, true).unwrap(), 0.0);
        assert_eq!(coverage(&set, &set, true).unwrap(), 100.0);
        let same = ShapeSet::new(vec![cube(d, [1, 1, 1], 3); 3]).unwrap();
        assert_eq!(pdsc(&same).unwrap(), 100.0);
        assert_eq!(coverage(&same, &set, false).unwrap(), 25.0);
        let disjoint = ShapeSet::new((0..3).map(|i| cube(d, [4 * i, 0, 0], 3)).collect()).unwrap();
        assert_eq!(pdsc(&disjoint).unwrap(), 0.0);
        let one = ShapeSet::new(vec![cube(d, [1, 1, 1], 3)]).unwrap();
        assert!(matches!(pdsc(&one), Err(Error::TooFewItems { needed: 2, got: 1 })));
        assert!(ShapeSet::new(vec![]).is_err());
    }

    #[test]
    fn report_csv_shape() {
        let d = [8; 3];
        let set = ShapeSet::new(vec![cube(d, [0, 0, 0], 3), cube(d, [4, 4, 4], 2)]).unwrap();
        let r = evaluate(&set, &set, true).unwrap();
        let csv = r.distances_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("gen,ref0,ref1\n0,0,"));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json.as_object().unwrap().len(), 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn unaligned_distance_symmetric_and_bounded(seed in 0u64..10_000) {
            use rand::Rng as _;
            let mut rng = crate::rng::seeded(seed);
            let d = [6, 6, 6];
            let mut a = BinaryMask::from_fn(d, 1.0, |_, _, _| rng.random_bool(0.3));
            let mut b = BinaryMask::from_fn(d, 1.0, |_, _, _| rng.random_bool(0.3));
            a.values[0] = true;
            b.values[7] = true;
            let ab = shape_distance(&a, &b, false).unwrap();
            prop_assert_eq!(ab, shape_distance(&b, &a, false).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            let aligned = shape_distance(&a, &b, true).unwrap();
            prop_assert!((0.0..=1.0).contains(&aligned));
        }
    }
}
