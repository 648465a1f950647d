use std::ops::Deref;

use crate::error::{check_dim, Error, Result};

/// Smallest divisor magnitude accepted by [`elementwise`] division.
pub const DIV_FLOOR: f64 = 1e-6;

/// Dense double-precision vector with finite entries.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vec64(Vec<f64>);

impl Vec64 {
    /// Validates that every entry is finite.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Skips the finiteness scan. Callers produce the data from finite inputs.
    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }
}

impl Deref for Vec64 {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vec64 {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Vec64> for Vec<f64> {
    fn from(v: Vec64) -> Self {
        v.0
    }
}

/// Squared Euclidean distance.
pub fn sq_dist(p: &Vec64, q: &Vec64) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    Ok(sq_dist_slice(p, q))
}

/// Squared Euclidean distance over raw slices of equal length.
#[inline]
pub fn sq_dist_slice(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            let t = x[l] - y[l];
            acc[l] += t * t;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        let t = x - y;
        tail += t * t;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Entrywise `a op b`. Division rejects divisors with magnitude below [`DIV_FLOOR`].
pub fn elementwise(op: ElementwiseOp, a: &[f64], b: &[f64]) -> Result<Vec64> {
    check_dim(a.len(), b.len())?;
    let out = match op {
        ElementwiseOp::Add => a.iter().zip(b).map(|(x, y)| x + y).collect(),
        ElementwiseOp::Sub => a.iter().zip(b).map(|(x, y)| x - y).collect(),
        ElementwiseOp::Mul => a.iter().zip(b).map(|(x, y)| x * y).collect(),
        ElementwiseOp::Div => {
            if let Some((index, &value)) = b.iter().enumerate().find(|(_, y)| y.abs() < DIV_FLOOR) {
                return Err(Error::DivisionByNearZero { index, value });
            }
            a.iter().zip(b).map(|(x, y)| x / y).collect()
        }
    };
    Vec64::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::common::SeededRng;

    fn v(x: &[f64]) -> Vec64 {
        Vec64::new(x.to_vec()).unwrap()
    }

    fn random(rng: &mut SeededRng, d: usize) -> Vec64 {
        v(&(0..d).map(|_| rng.uniform(-3.0, 3.0)).collect::<Vec<_>>())
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn sq_dist_examples() {
        let p = v(&[0.3, -2.0, 7.5]);
        assert_eq!(sq_dist(&p, &p).unwrap(), 0.0);
        assert_eq!(sq_dist(&v(&[1.0, 0.0]), &v(&[0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(sq_dist(&v(&[3.0, 4.0]), &v(&[0.0, 0.0])).unwrap(), 25.0);
    }

    #[test]
    fn sq_dist_dim_mismatch() {
        assert!(matches!(
            sq_dist(&v(&[1.0]), &v(&[1.0, 2.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(Vec64::new(vec![1.0, f64::NAN]), Err(Error::NonFinite(1))));
        assert!(Vec64::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn mul_and_div() {
        let a = v(&[2.0, 3.0]);
        let b = v(&[4.0, 5.0]);
        assert_eq!(
            elementwise(ElementwiseOp::Mul, &a, &b).unwrap().as_slice(),
            &[8.0, 15.0]
        );
        let q = elementwise(ElementwiseOp::Div, &a, &b).unwrap();
        let back = elementwise(ElementwiseOp::Mul, &q, &b).unwrap();
        for (x, y) in back.iter().zip(a.iter()) {
            assert!(close(*x, *y, 1e-12));
        }
    }

    #[test]
    fn div_floor() {
        let a = v(&[1.0, 1.0]);
        let b = v(&[1.0, 1e-7]);
        assert!(matches!(
            elementwise(ElementwiseOp::Div, &a, &b),
            Err(Error::DivisionByNearZero { index: 1, .. })
        ));
        assert!(elementwise(ElementwiseOp::Div, &a, &v(&[1.0, 1e-6])).is_ok());
    }

    // 2a + 2b = (a + 1) o (b + 1) - (a - 1) o (b - 1)
    #[test]
    fn sum_as_product_difference() {
        let mut rng = SeededRng::new(11);
        for d in [2, 8, 64] {
            let a = random(&mut rng, d);
            let b = random(&mut rng, d);
            let ones = Vec64::new(vec![1.0; d]).unwrap();
            let ap = elementwise(ElementwiseOp::Add, &a, &ones).unwrap();
            let bp = elementwise(ElementwiseOp::Add, &b, &ones).unwrap();
            let am = elementwise(ElementwiseOp::Sub, &a, &ones).unwrap();
            let bm = elementwise(ElementwiseOp::Sub, &b, &ones).unwrap();
            let lhs = elementwise(
                ElementwiseOp::Sub,
                &elementwise(ElementwiseOp::Mul, &ap, &bp).unwrap(),
                &elementwise(ElementwiseOp::Mul, &am, &bm).unwrap(),
            )
            .unwrap();
            for i in 0..d {
                assert!(close(lhs[i], 2.0 * a[i] + 2.0 * b[i], 1e-12), "d={d} i={i}");
            }
        }
    }

    // (a o b) / (c o d) = (a / c) o (b / d)
    #[test]
    fn quotient_of_products() {
        let mut rng = SeededRng::new(12);
        for d in [2, 8, 64] {
            let a = random(&mut rng, d);
            let b = random(&mut rng, d);
            let c = v(&(0..d).map(|_| rng.signed_magnitude(0.5, 2.0)).collect::<Vec<_>>());
            let e = v(&(0..d).map(|_| rng.signed_magnitude(0.5, 2.0)).collect::<Vec<_>>());
            let lhs = elementwise(
                ElementwiseOp::Div,
                &elementwise(ElementwiseOp::Mul, &a, &b).unwrap(),
                &elementwise(ElementwiseOp::Mul, &c, &e).unwrap(),
            )
            .unwrap();
            let rhs = elementwise(
                ElementwiseOp::Mul,
                &elementwise(ElementwiseOp::Div, &a, &c).unwrap(),
                &elementwise(ElementwiseOp::Div, &b, &e).unwrap(),
            )
            .unwrap();
            for i in 0..d {
                assert!(close(lhs[i], rhs[i], 1e-12));
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn sq_dist_symmetric(xs in proptest::collection::vec(-1e3f64..1e3, 1..40), seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let p = v(&xs);
            let q = random(&mut rng, xs.len());
            proptest::prop_assert_eq!(sq_dist(&p, &q).unwrap(), sq_dist(&q, &p).unwrap());
            proptest::prop_assert!(sq_dist(&p, &q).unwrap() >= 0.0);
        }
    }
}
