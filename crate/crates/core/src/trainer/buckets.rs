use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::fp16::quantize_fp16;
use crate::numerics::DType;

/// A contiguous slice of the flat gradient vector reduced as one unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GradientBucket {
    /// Parameter slots in the order their gradients complete (reverse canonical).
    pub params: Vec<usize>,
    pub range: Range<usize>,
}

impl GradientBucket {
    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}

/// Groups parameters back to front, closing a bucket once it holds at least
/// `threshold` elements. The layout depends only on `sizes` and `threshold`.
pub fn bucket_gradients(sizes: &[usize], threshold: usize) -> Result<Vec<GradientBucket>> {
    if threshold < 1 {
        return Err(Error::Invalid("bucket threshold must be at least 1".into()));
    }
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let mut buckets = Vec::new();
    let mut params = Vec::new();
    let mut filled = 0;
    for slot in (0..sizes.len()).rev() {
        params.push(slot);
        filled += sizes[slot];
        if filled >= threshold {
            buckets.push(close(&mut params, &offsets, sizes));
            filled = 0;
        }
    }
    if !params.is_empty() {
        buckets.push(close(&mut params, &offsets, sizes));
    }
    Ok(buckets)
}

fn close(params: &mut Vec<usize>, offsets: &[usize], sizes: &[usize]) -> GradientBucket {
    let first = *params.last().expect("non-empty bucket");
    let last = params[0];
    GradientBucket {
        params: std::mem::take(params),
        range: offsets[first]..offsets[last] + sizes[last],
    }
}

/// Sums replica gradients bucket by bucket, folding replicas in index order.
///
/// Under FP16E every partial sum is rounded to the binary16 grid.
pub fn all_reduce(replicas: &[Vec<f32>], buckets: &[GradientBucket], dtype: DType) -> Result<Vec<f32>> {
    let first = replicas
        .first()
        .ok_or_else(|| Error::Invalid("all_reduce needs at least one replica".into()))?;
    let n = first.len();
    if let Some(bad) = replicas.iter().find(|r| r.len() != n) {
        return Err(Error::Shape(format!(
            "replica gradients of length {} and {}",
            n,
            bad.len()
        )));
    }
    let covered: usize = buckets.iter().map(GradientBucket::len).sum();
    if covered != n {
        return Err(Error::Shape(format!("buckets cover {covered} of {n} elements")));
    }
    let mut out = vec![0.0f32; n];
    for bucket in buckets {
        let dst = &mut out[bucket.range.clone()];
        dst.copy_from_slice(&first[bucket.range.clone()]);
        for r in &replicas[1..] {
            for (d, s) in dst.iter_mut().zip(&r[bucket.range.clone()]) {
                *d += s;
                if dtype == DType::F16E {
                    *d = quantize_fp16(*d);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn greedy_examples() {
        let b = bucket_gradients(&[4, 4, 4], 8).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].params, vec![2, 1]);
        assert_eq!(b[0].range, 4..12);
        assert_eq!(b[1].params, vec![0]);
        assert_eq!(b[1].range, 0..4);
        assert_eq!(bucket_gradients(&[4, 4, 4], 100).unwrap().len(), 1);
        assert_eq!(bucket_gradients(&[4, 4, 4], 1).unwrap().len(), 3);
    }

    #[test]
    fn reduce_examples() {
        let one = bucket_gradients(&[3], 1).unwrap();
        assert_eq!(
            all_reduce(&[vec![1.0, 2.0, 3.0]], &one, DType::F32).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        let r = all_reduce(&[vec![1.0; 3], vec![2.0; 3], vec![3.0; 3]], &one, DType::F32).unwrap();
        assert_eq!(r, vec![6.0; 3]);
    }

    proptest! {
        #[test]
        fn buckets_partition(sizes in prop::collection::vec(1usize..50, 1..20), threshold in 1usize..200) {
            let b = bucket_gradients(&sizes, threshold).unwrap();
            let total: usize = sizes.iter().sum();
            let mut ranges: Vec<_> = b.iter().map(|x| x.range.clone()).collect();
            ranges.sort_by_key(|r| r.start);
            prop_assert_eq!(ranges[0].start, 0);
            prop_assert_eq!(ranges.last().unwrap().end, total);
            for w in ranges.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
            }
            for x in &b[..b.len() - 1] {
                prop_assert!(x.len() >= threshold);
            }
        }

        #[test]
        fn reduce_is_independent_of_bucketing(
            vals in prop::collection::vec(prop::collection::vec(-1e3f32..1e3, 12), 1..5),
            threshold in 1usize..13,
        ) {
            let sizes = [3, 5, 4];
            let a = all_reduce(&vals, &bucket_gradients(&sizes, threshold).unwrap(), DType::F32).unwrap();
            let b = all_reduce(&vals, &bucket_gradients(&sizes, 100).unwrap(), DType::F32).unwrap();
            prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
