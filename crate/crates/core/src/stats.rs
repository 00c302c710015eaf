//! Small descriptive statistics used by the harness and embedding analysis.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Population standard deviation (divisor `n`).
pub fn std_pop(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    Some((xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient under Euclidean distance.
///
/// Points in singleton clusters score 0. At least two clusters are needed.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::shape("silhouette", &[points.len()], &[labels.len()]));
    }
    if points.is_empty() {
        return Err(Error::Empty("silhouette points"));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Degenerate("silhouette needs at least two clusters"));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let li = labels[i];
        if sizes[li] < 2 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += dist(p, q);
            }
        }
        let a = sums[li] / (sizes[li] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != li && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let s = a.max(b);
        if s > 0.0 {
            total += (b - a) / s;
        }
    }
    Ok(total / points.len() as f64)
}

/// Silhouette restricted to the points whose label is in `classes`.
pub fn silhouette_subset(points: &[Vec<f64>], labels: &[usize], classes: &[usize]) -> Result<f64> {
    let (p, l): (Vec<Vec<f64>>, Vec<usize>) = points
        .iter()
        .zip(labels)
        .filter(|(_, l)| classes.contains(l))
        .map(|(p, &l)| (p.clone(), l))
        .unzip();
    silhouette(&p, &l)
}
