//! Monomial observable dictionaries.
//!
//! A dictionary lifts a q-dimensional observation into the k monomials of
//! total degree at most d. The ordering is graded-lexicographic with the
//! constant monomial first, so the pure degree-1 monomials occupy entries
//! 2..q+1 and the projection back to the observation is a fixed slice.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    obs_dim: usize,
    max_degree: usize,
    exponents: Vec<Vec<u32>>,
}

impl Dictionary {
    /// All monomials in `obs_dim` variables of total degree at most
    /// `max_degree`, graded-lexicographically ordered.
    pub fn monomials(obs_dim: usize, max_degree: usize) -> Result<Self> {
        if obs_dim == 0 {
            return Err(Error::InvalidArgument(
                "dictionary needs obs_dim >= 1".into(),
            ));
        }
        let mut exponents = Vec::with_capacity(binomial(obs_dim + max_degree, max_degree));
        for degree in 0..=max_degree {
            push_degree(obs_dim, degree as u32, &mut exponents);
        }
        Ok(Self {
            obs_dim,
            max_degree,
            exponents,
        })
    }

    /// Builds a (possibly thinned) dictionary from an explicit exponent list.
    ///
    /// The constant monomial must come first, and when any non-constant entry
    /// is present the pure degree-1 monomials must follow in variable order;
    /// the projection back to observations does not exist otherwise.
    pub fn from_exponents(obs_dim: usize, exponents: Vec<Vec<u32>>) -> Result<Self> {
        if obs_dim == 0 {
            return Err(Error::InvalidArgument(
                "dictionary needs obs_dim >= 1".into(),
            ));
        }
        if exponents.is_empty() {
            return Err(Error::InvalidArgument("empty exponent list".into()));
        }
        for e in &exponents {
            if e.len() != obs_dim {
                return Err(Error::Dimension {
                    what: "exponent tuple",
                    expected: obs_dim,
                    got: e.len(),
                });
            }
        }
        if exponents[0].iter().any(|&e| e != 0) {
            return Err(Error::InvalidArgument(
                "first dictionary entry must be the constant monomial".into(),
            ));
        }
        if exponents.len() > 1 {
            if exponents.len() < obs_dim + 1 {
                return Err(Error::InvalidArgument(
                    "dictionary with non-constant entries must contain all degree-1 monomials"
                        .into(),
                ));
            }
            for (var, e) in exponents[1..=obs_dim].iter().enumerate() {
                let unit = e.iter().enumerate().all(|(j, &x)| x == u32::from(j == var));
                if !unit {
                    return Err(Error::InvalidArgument(format!(
                        "dictionary entry {} must be the degree-1 monomial in variable {}",
                        var + 2,
                        var + 1
                    )));
                }
            }
        }
        for (i, a) in exponents.iter().enumerate() {
            if exponents[i + 1..].contains(a) {
                return Err(Error::InvalidArgument(
                    "duplicate exponent tuple in dictionary".into(),
                ));
            }
        }
        let max_degree = exponents
            .iter()
            .map(|e| e.iter().map(|&x| x as usize).sum())
            .max()
            .unwrap_or(0);
        Ok(Self {
            obs_dim,
            max_degree,
            exponents,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    /// Number of basis functions, k.
    pub fn size(&self) -> usize {
        self.exponents.len()
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    /// Evaluates every monomial at `z`.
    pub fn lift(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.size());
        self.lift_into(z, &mut out)?;
        Ok(out)
    }

    /// As [`lift`](Self::lift) but writing into a caller-provided buffer.
    pub fn lift_into(&self, z: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        if z.len() != self.obs_dim {
            return Err(Error::Dimension {
                what: "observation",
                expected: self.obs_dim,
                got: z.len(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation".into()));
        }
        if out.len() != self.size() {
            return Err(Error::Dimension {
                what: "lifted vector",
                expected: self.size(),
                got: out.len(),
            });
        }
        for (slot, exps) in out.iter_mut().zip(&self.exponents) {
            let mut value = 1.0;
            for (j, &e) in exps.iter().enumerate() {
                if e > 0 {
                    value *= z[j].powi(e as i32);
                }
            }
            *slot = value;
        }
        Ok(())
    }

    /// Recovers the observation from a lifted vector: the degree-1 slice.
    pub fn project(&self, lifted: &DVector<f64>) -> Result<DVector<f64>> {
        if self.max_degree == 0 {
            return Err(Error::InvalidArgument(
                "projection needs degree-1 monomials (max_degree >= 1)".into(),
            ));
        }
        if lifted.len() != self.size() {
            return Err(Error::Dimension {
                what: "lifted vector",
                expected: self.size(),
                got: lifted.len(),
            });
        }
        Ok(lifted.rows(1, self.obs_dim).into_owned())
    }
}

/// Appends all exponent tuples of total degree exactly `degree`, descending
/// lexicographically (so the leading variable carries the highest exponent
/// first).
fn push_degree(vars: usize, degree: u32, out: &mut Vec<Vec<u32>>) {
    fn rec(prefix: &mut Vec<u32>, vars_left: usize, budget: u32, out: &mut Vec<Vec<u32>>) {
        if vars_left == 1 {
            prefix.push(budget);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=budget).rev() {
            prefix.push(e);
            rec(prefix, vars_left - 1, budget - e, out);
            prefix.pop();
        }
    }
    let mut prefix = Vec::with_capacity(vars);
    rec(&mut prefix, vars, degree, out);
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    let mut result: usize = 1;
    for i in 0..k {
        result = result * (n - i) / (i + 1);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent enumeration: number of exponent tuples with sum <= budget.
    fn count_tuples(vars: usize, budget: usize) -> usize {
        if vars == 0 {
            return 1;
        }
        (0..=budget)
            .map(|e| count_tuples(vars - 1, budget - e))
            .sum()
    }

    #[test]
    fn sizes_match_table_values() {
        assert_eq!(Dictionary::monomials(4, 3).unwrap().size(), 35);
        assert_eq!(Dictionary::monomials(8, 2).unwrap().size(), 45);
        assert_eq!(Dictionary::monomials(3, 0).unwrap().size(), 1);
    }

    #[test]
    fn size_formula_vs_enumeration_oracle() {
        for q in 1..=10 {
            for d in 0..=5 {
                let dict = Dictionary::monomials(q, d).unwrap();
                assert_eq!(dict.size(), count_tuples(q, d), "q={q} d={d}");
                assert_eq!(dict.size(), binomial(q + d, d), "q={q} d={d}");
            }
        }
    }

    #[test]
    fn ordering_is_graded_lex_with_constant_first() {
        let dict = Dictionary::monomials(3, 3).unwrap();
        let exps = dict.exponents();
        assert!(exps[0].iter().all(|&e| e == 0));
        // entries 2..q+1 are the pure degree-1 monomials in variable order
        for var in 0..3 {
            let e = &exps[1 + var];
            assert!(e.iter().enumerate().all(|(j, &x)| x == u32::from(j == var)));
        }
        // graded: degrees never decrease; within a degree, descending lex
        for w in exps.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let (da, db): (u32, u32) = (a.iter().sum(), b.iter().sum());
            assert!(da <= db);
            if da == db {
                assert!(a > b, "within-degree order must be descending lex");
            }
        }
    }

    #[test]
    fn rejects_zero_obs_dim() {
        assert!(Dictionary::monomials(0, 2).is_err());
    }

    #[test]
    fn lift_at_zero_is_unit_constant() {
        let dict = Dictionary::monomials(2, 2).unwrap();
        let lifted = dict.lift(&DVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert_eq!(lifted.as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn lift_scalar_quadratic() {
        let dict = Dictionary::monomials(1, 2).unwrap();
        let lifted = dict.lift(&DVector::from_vec(vec![2.0])).unwrap();
        assert_eq!(lifted.as_slice(), &[1.0, 2.0, 4.0]);
    }

    #[test]
    fn lift_at_all_ones_is_all_ones() {
        let dict = Dictionary::monomials(3, 3).unwrap();
        let lifted = dict.lift(&DVector::from_vec(vec![1.0, 1.0, 1.0])).unwrap();
        assert_eq!(lifted.len(), 20);
        assert!(lifted.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn lift_rejects_bad_input() {
        let dict = Dictionary::monomials(2, 2).unwrap();
        assert!(dict.lift(&DVector::from_vec(vec![1.0])).is_err());
        assert!(dict.lift(&DVector::from_vec(vec![1.0, f64::NAN])).is_err());
    }

    #[test]
    fn project_is_degree_one_slice() {
        let dict = Dictionary::monomials(2, 1).unwrap();
        let z = dict
            .project(&DVector::from_vec(vec![1.0, 3.0, -4.0]))
            .unwrap();
        assert_eq!(z.as_slice(), &[3.0, -4.0]);
    }

    #[test]
    fn project_inverts_lift_on_scalar_example() {
        let dict = Dictionary::monomials(1, 2).unwrap();
        let lifted = dict.lift(&DVector::from_vec(vec![5.0])).unwrap();
        assert_eq!(lifted.as_slice(), &[1.0, 5.0, 25.0]);
        let z = dict.project(&lifted).unwrap();
        assert_eq!(z.as_slice(), &[5.0]);
    }

    #[test]
    fn project_rejects_degree_zero() {
        let dict = Dictionary::monomials(3, 0).unwrap();
        assert!(dict.project(&DVector::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn thinned_dictionary_keeps_projection_prefix() {
        // constant, z1, z2, z1*z2 (dropping the squares) is fine
        let ok =
            Dictionary::from_exponents(2, vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]]);
        assert!(ok.is_ok());
        assert_eq!(ok.unwrap().max_degree(), 2);
        // missing the degree-1 block is not
        let bad = Dictionary::from_exponents(2, vec![vec![0, 0], vec![1, 1]]);
        assert!(bad.is_err());
        // duplicate entries are not
        let dup =
            Dictionary::from_exponents(2, vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![0, 1]]);
        assert!(dup.is_err());
    }

    proptest! {
        /// project(lift(z)) == z bit-exactly: the degree-1 entries are copies.
        #[test]
        fn project_lift_identity(
            q in 1usize..6,
            d in 1usize..5,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dict = Dictionary::monomials(q, d).unwrap();
            let z = DVector::from_fn(q, |_, _| rng.random_range(-10.0..10.0));
            let back = dict.project(&dict.lift(&z).unwrap()).unwrap();
            prop_assert_eq!(back.as_slice(), z.as_slice());
        }

        /// psi_a(z) * psi_b(z) equals the entry for a+b whenever that entry
        /// exists. Dyadic inputs keep every product exact in f64.
        #[test]
        fn multiplicative_consistency(
            q in 1usize..4,
            d in 1usize..5,
            picks in proptest::collection::vec(0usize..1000, 3),
        ) {
            let dict = Dictionary::monomials(q, d).unwrap();
            let vals = [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0];
            let z = DVector::from_fn(q, |i, _| vals[(picks[i % picks.len()] + i) % vals.len()]);
            let lifted = dict.lift(&z).unwrap();
            let k = dict.size();
            for ia in 0..k {
                for ib in 0..k {
                    let sum: Vec<u32> = dict.exponents()[ia]
                        .iter()
                        .zip(&dict.exponents()[ib])
                        .map(|(&a, &b)| a + b)
                        .collect();
                    if let Some(ic) = dict.exponents().iter().position(|e| *e == sum) {
                        prop_assert_eq!(lifted[ia] * lifted[ib], lifted[ic]);
                    }
                }
            }
        }
    }
}
