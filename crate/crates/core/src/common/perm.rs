use super::SeededRng;
use crate::error::{check_dim, Error, Result};

/// Bijection on `0..n`. Applying it to `v` yields `out[i] = v[mapping[i]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Perm {
    mapping: Vec<u32>,
}

impl Perm {
    pub fn new(mapping: Vec<u32>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            let m = m as usize;
            if m >= n || seen[m] {
                return Err(Error::InvalidParameter("mapping is not a bijection".into()));
            }
            seen[m] = true;
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n as u32).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[u32] {
        &self.mapping
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.len(), v.len())?;
        Ok(self.mapping.iter().map(|&m| v[m as usize]).collect())
    }

    pub fn apply_inverse(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.len(), v.len())?;
        let mut out = vec![0.0; v.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            out[m as usize] = v[i];
        }
        Ok(out)
    }
}

/// Uniform random permutation by Fisher–Yates over the seeded stream.
pub fn gen_permutation(n: usize, rng: &mut SeededRng) -> Perm {
    let mut mapping: Vec<u32> = (0..n as u32).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        mapping.swap(i, j);
    }
    Perm { mapping }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_element_is_identity() {
        assert_eq!(gen_permutation(1, &mut SeededRng::new(1)), Perm::identity(1));
    }

    #[test]
    fn apply_then_inverse() {
        let p = gen_permutation(10, &mut SeededRng::new(2));
        let v: Vec<f64> = (0..10).map(f64::from).collect();
        let w = p.apply(&v).unwrap();
        assert_ne!(w, v);
        assert_eq!(p.apply_inverse(&w).unwrap(), v);
    }

    #[test]
    fn seeded() {
        let a = gen_permutation(50, &mut SeededRng::new(4));
        let b = gen_permutation(50, &mut SeededRng::new(4));
        assert_eq!(a, b);
        assert!(Perm::new(a.mapping().to_vec()).is_ok());
    }

    #[test]
    fn rejects_non_bijection() {
        assert!(Perm::new(vec![0, 0]).is_err());
        assert!(Perm::new(vec![0, 2]).is_err());
    }
}
