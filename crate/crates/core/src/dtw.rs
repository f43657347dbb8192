//! Exact dynamic time warping over sequences of vectors.
//!
//! The local cost is the Euclidean distance between elements and the step
//! pattern is symmetric: `(+1, 0)`, `(0, +1)` and `(+1, +1)`. No band or slope
//! constraint is applied. Backtracking prefers the diagonal, then the step in
//! `a` (vertical), then the step in `b` (horizontal), so paths are
//! deterministic.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest `len(a) · len(b)` accepted by [`dtw_brute_force`].
pub const BRUTE_FORCE_MAX_CELLS: usize = 36;

#[derive(Debug, Clone, PartialEq)]
pub struct DtwResult<S> {
    pub distance: S,
    /// Index pairs `(i, j)` from `(0, 0)` to `(len(a) - 1, len(b) - 1)`.
    pub path: Vec<(usize, usize)>,
}

#[inline]
fn euclid<S: Scalar>(x: &[S], y: &[S]) -> S {
    let mut acc = S::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc += (a - b) * (a - b);
    }
    acc.sqrt()
}

fn flatten<S: Scalar>(seq: &[Vec<S>]) -> Result<(Vec<S>, usize)> {
    let width = seq.first().ok_or(Error::Empty)?.len();
    if seq.iter().any(|v| v.len() != width) {
        return Err(Error::shape("sequence elements differ in width"));
    }
    Ok((seq.concat(), width))
}

fn check<S: Scalar>(a: &[Vec<S>], b: &[Vec<S>]) -> Result<(Vec<S>, Vec<S>, usize)> {
    let (fa, wa) = flatten(a)?;
    let (fb, wb) = flatten(b)?;
    if wa != wb {
        return Err(Error::shape(format!("dtw widths {wa} vs {wb}")));
    }
    Ok((fa, fb, wa))
}

/// DTW between two sequences of equal-width vectors.
pub fn dtw_distance<S: Scalar>(a: &[Vec<S>], b: &[Vec<S>]) -> Result<DtwResult<S>> {
    let (fa, fb, w) = check(a, b)?;
    dtw_flat(&fa, a.len(), &fb, b.len(), w)
}

/// DTW between the rows of two matrices `[M_a, D]` and `[M_b, D]`.
pub fn dtw_tensors<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<DtwResult<S>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape(format!("dtw of {:?} and {:?}", a.shape(), b.shape())));
    }
    dtw_flat(a.data(), a.shape()[0], b.data(), b.shape()[0], a.shape()[1])
}

/// DTW on row-major buffers holding `ma` and `mb` rows of `width` values.
pub fn dtw_flat<S: Scalar>(a: &[S], ma: usize, b: &[S], mb: usize, width: usize) -> Result<DtwResult<S>> {
    if ma == 0 || mb == 0 {
        return Err(Error::Empty);
    }
    if a.len() != ma * width || b.len() != mb * width {
        return Err(Error::shape("dtw buffer length"));
    }
    let mut cost = vec![S::zero(); ma * mb];
    for i in 0..ma {
        for j in 0..mb {
            let local = euclid(&a[i * width..(i + 1) * width], &b[j * width..(j + 1) * width]);
            let prev = match (i, j) {
                (0, 0) => S::zero(),
                (0, _) => cost[j - 1],
                (_, 0) => cost[(i - 1) * mb],
                _ => cost[(i - 1) * mb + j - 1]
                    .min(cost[(i - 1) * mb + j])
                    .min(cost[i * mb + j - 1]),
            };
            cost[i * mb + j] = prev + local;
        }
    }

    let mut path = Vec::with_capacity(ma + mb);
    let (mut i, mut j) = (ma - 1, mb - 1);
    path.push((i, j));
    while i > 0 || j > 0 {
        if i == 0 {
            j -= 1;
        } else if j == 0 {
            i -= 1;
        } else {
            let diag = cost[(i - 1) * mb + j - 1];
            let up = cost[(i - 1) * mb + j];
            let left = cost[i * mb + j - 1];
            if diag <= up && diag <= left {
                i -= 1;
                j -= 1;
            } else if up <= left {
                i -= 1;
            } else {
                j -= 1;
            }
        }
        path.push((i, j));
    }
    path.reverse();

    Ok(DtwResult {
        distance: cost[ma * mb - 1],
        path,
    })
}

/// Exhaustive minimum over every monotone warping path. Test oracle for
/// [`dtw_distance`]; refuses inputs larger than [`BRUTE_FORCE_MAX_CELLS`].
pub fn dtw_brute_force<S: Scalar>(a: &[Vec<S>], b: &[Vec<S>]) -> Result<DtwResult<S>> {
    let (_, _, _) = check(a, b)?;
    let cells = a.len() * b.len();
    if cells > BRUTE_FORCE_MAX_CELLS {
        return Err(Error::TooLarge {
            cells,
            limit: BRUTE_FORCE_MAX_CELLS,
        });
    }
    let mut best: Option<DtwResult<S>> = None;
    let mut path = vec![(0, 0)];
    enumerate(a, b, &mut path, &mut best);
    Ok(best.expect("at least one path exists"))
}

fn enumerate<S: Scalar>(a: &[Vec<S>], b: &[Vec<S>], path: &mut Vec<(usize, usize)>, best: &mut Option<DtwResult<S>>) {
    let (i, j) = *path.last().unwrap();
    if i == a.len() - 1 && j == b.len() - 1 {
        let cost = path_cost(a, b, path);
        if best.as_ref().is_none_or(|r| cost < r.distance) {
            *best = Some(DtwResult {
                distance: cost,
                path: path.clone(),
            });
        }
        return;
    }
    for (di, dj) in [(1, 1), (1, 0), (0, 1)] {
        let (ni, nj) = (i + di, j + dj);
        if ni < a.len() && nj < b.len() {
            path.push((ni, nj));
            enumerate(a, b, path, best);
            path.pop();
        }
    }
}

/// Sum of local Euclidean distances along `path`, accumulated in path order.
pub fn path_cost<S: Scalar>(a: &[Vec<S>], b: &[Vec<S>], path: &[(usize, usize)]) -> S {
    path.iter().fold(S::zero(), |acc, &(i, j)| acc + euclid(&a[i], &b[j]))
}

/// Adds `scale · ∂(path cost)/∂a` and `∂/∂b` into `da`, `db` with the path held
/// fixed. A matched pair at distance zero contributes nothing.
pub fn path_gradient<S: Scalar>(
    a: &[S],
    b: &[S],
    width: usize,
    path: &[(usize, usize)],
    scale: S,
    da: &mut [S],
    db: &mut [S],
) {
    for &(i, j) in path {
        let ai = &a[i * width..(i + 1) * width];
        let bj = &b[j * width..(j + 1) * width];
        let d = euclid(ai, bj);
        if d > S::zero() {
            let f = scale / d;
            for k in 0..width {
                let g = f * (ai[k] - bj[k]);
                da[i * width + k] += g;
                db[j * width + k] -= g;
            }
        }
    }
}

/// Hard DTW distance plus its straight-through gradients with respect to
/// every element of `a` and `b`.
#[allow(clippy::type_complexity)]
pub fn dtw_loss_value_and_grad<S: Scalar>(a: &[Vec<S>], b: &[Vec<S>]) -> Result<(S, Vec<Vec<S>>, Vec<Vec<S>>)> {
    let (fa, fb, w) = check(a, b)?;
    let r = dtw_flat(&fa, a.len(), &fb, b.len(), w)?;
    let mut da = vec![S::zero(); fa.len()];
    let mut db = vec![S::zero(); fb.len()];
    path_gradient(&fa, &fb, w, &r.path, S::one(), &mut da, &mut db);
    let split = |v: Vec<S>| v.chunks(w).map(<[S]>::to_vec).collect();
    Ok((r.distance, split(da), split(db)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn identical_sequences_align_on_the_diagonal() {
        let a = vec![vec![0.1, 0.2], vec![1.0, -1.0], vec![3.0, 0.5]];
        let r = dtw_distance(&a, &a).unwrap();
        assert_eq!(r.distance, 0.0);
        assert_eq!(r.path, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn repeated_element_costs_nothing() {
        let r = dtw_distance(&seq(&[0., 1., 2.]), &seq(&[0., 1., 1., 2.])).unwrap();
        assert_eq!(r.distance, 0.0);
        assert_eq!(r.path, vec![(0, 0), (1, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn constant_offset_pairs() {
        let r = dtw_distance(&seq(&[0., 0.]), &seq(&[1., 1.])).unwrap();
        assert_eq!(r.distance, 2.0);
        assert_eq!(r.path, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn errors() {
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(dtw_distance(&empty, &seq(&[1.0])), Err(Error::Empty)));
        let wide = vec![vec![1.0, 2.0]];
        assert!(matches!(
            dtw_distance(&wide, &seq(&[1.0])),
            Err(Error::ShapeMismatch(_))
        ));
        let long = seq(&[0.0; 7]);
        assert!(matches!(
            dtw_brute_force(&long, &long),
            Err(Error::TooLarge { cells: 49, .. })
        ));
    }

    #[test]
    fn brute_force_single_elements() {
        let a = vec![vec![0.0, 0.0]];
        let b = vec![vec![3.0, 4.0]];
        assert_eq!(dtw_brute_force(&a, &b).unwrap().distance, 5.0);
        let c = seq(&[1., 5., 2.]);
        assert_eq!(dtw_brute_force(&c, &c).unwrap().distance, 0.0);
    }

    #[test]
    fn scalar_gradient_is_sign_of_difference() {
        let (d, ga, gb) = dtw_loss_value_and_grad(&seq(&[0.0]), &seq(&[1.0])).unwrap();
        assert_eq!(d, 1.0);
        assert_eq!(ga, vec![vec![-1.0]]);
        assert_eq!(gb, vec![vec![1.0]]);
    }

    #[test]
    fn gradient_vanishes_for_equal_inputs() {
        let a = vec![vec![0.3, -0.1], vec![2.0, 1.0]];
        let (d, ga, gb) = dtw_loss_value_and_grad(&a, &a).unwrap();
        assert_eq!(d, 0.0);
        assert!(ga.iter().chain(&gb).flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn works_in_single_precision() {
        let a: Vec<Vec<f32>> = vec![vec![0.0], vec![1.0], vec![2.0]];
        let b: Vec<Vec<f32>> = vec![vec![0.0], vec![1.0], vec![1.0], vec![2.0]];
        assert_eq!(dtw_distance(&a, &b).unwrap().distance, 0.0f32);
    }
}
