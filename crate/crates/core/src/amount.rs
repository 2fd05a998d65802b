//! Sterling amounts in integer minor units.

use std::fmt;
use std::iter::Sum;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AmountError {
    #[error("amount underflow: {lhs} - {rhs} would be negative")]
    Underflow { lhs: u64, rhs: u64 },
    #[error("amount overflow: {lhs} + {rhs}")]
    Overflow { lhs: u64, rhs: u64 },
    #[error("cannot split into zero parts")]
    ZeroParts,
}

/// A non-negative amount of pence.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct MonetaryAmount(u64);

impl MonetaryAmount {
    pub const ZERO: MonetaryAmount = MonetaryAmount(0);

    pub const fn from_pence(pence: u64) -> Self {
        MonetaryAmount(pence)
    }

    pub const fn pence(self) -> u64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn checked_add(self, rhs: MonetaryAmount) -> Result<MonetaryAmount, AmountError> {
        self.0
            .checked_add(rhs.0)
            .map(MonetaryAmount)
            .ok_or(AmountError::Overflow {
                lhs: self.0,
                rhs: rhs.0,
            })
    }

    pub fn checked_sub(self, rhs: MonetaryAmount) -> Result<MonetaryAmount, AmountError> {
        self.0
            .checked_sub(rhs.0)
            .map(MonetaryAmount)
            .ok_or(AmountError::Underflow {
                lhs: self.0,
                rhs: rhs.0,
            })
    }

    /// Signed view, for journal deltas.
    pub fn as_delta(self) -> i64 {
        i64::try_from(self.0).expect("amount exceeds i64 range")
    }

    /// Applies a signed delta, refusing to go below zero.
    pub fn apply_delta(self, delta: i64) -> Result<MonetaryAmount, AmountError> {
        if delta >= 0 {
            self.checked_add(MonetaryAmount(delta.unsigned_abs()))
        } else {
            self.checked_sub(MonetaryAmount(delta.unsigned_abs()))
        }
    }

    /// Splits into `parts` amounts that differ by at most one penny; the
    /// first `self % parts` parts carry the extra penny.
    pub fn split(self, parts: usize) -> Result<Vec<MonetaryAmount>, AmountError> {
        if parts == 0 {
            return Err(AmountError::ZeroParts);
        }
        let n = parts as u64;
        let base = self.0 / n;
        let extra = self.0 % n;
        Ok((0..n)
            .map(|i| MonetaryAmount(base + u64::from(i < extra)))
            .collect())
    }

    pub fn merge(parts: &[MonetaryAmount]) -> Result<MonetaryAmount, AmountError> {
        parts
            .iter()
            .try_fold(MonetaryAmount::ZERO, |acc, p| acc.checked_add(*p))
    }
}

impl fmt::Display for MonetaryAmount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "£{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl Sum for MonetaryAmount {
    fn sum<I: Iterator<Item = MonetaryAmount>>(iter: I) -> Self {
        MonetaryAmount(iter.map(|a| a.0).sum())
    }
}

impl From<u64> for MonetaryAmount {
    fn from(pence: u64) -> Self {
        MonetaryAmount(pence)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn subtraction_below_zero_is_an_error() {
        let a = MonetaryAmount::from_pence(100);
        assert_eq!(
            a.checked_sub(MonetaryAmount::from_pence(101)),
            Err(AmountError::Underflow { lhs: 100, rhs: 101 })
        );
        assert_eq!(a.apply_delta(-100), Ok(MonetaryAmount::ZERO));
        assert!(a.apply_delta(-101).is_err());
    }

    #[test]
    fn display_in_pounds() {
        assert_eq!(MonetaryAmount::from_pence(50000).to_string(), "£500.00");
        assert_eq!(MonetaryAmount::from_pence(7).to_string(), "£0.07");
    }

    #[test]
    fn split_spreads_remainder() {
        let parts = MonetaryAmount::from_pence(10).split(3).unwrap();
        assert_eq!(parts, vec![4.into(), 3.into(), 3.into()]);
        assert!(MonetaryAmount::from_pence(1).split(0).is_err());
    }

    proptest! {
        #[test]
        fn split_merge_round_trips(pence in 0u64..10_000_000, k in 1usize..64) {
            let a = MonetaryAmount::from_pence(pence);
            let parts = a.split(k).unwrap();
            prop_assert_eq!(parts.len(), k);
            prop_assert_eq!(MonetaryAmount::merge(&parts).unwrap(), a);
            let max = parts.iter().max().unwrap().pence();
            let min = parts.iter().min().unwrap().pence();
            prop_assert!(max - min <= 1);
        }

        #[test]
        fn add_then_sub_is_identity(a in 0u64..u32::MAX as u64, b in 0u64..u32::MAX as u64) {
            let x = MonetaryAmount::from_pence(a);
            let y = MonetaryAmount::from_pence(b);
            prop_assert_eq!(x.checked_add(y).unwrap().checked_sub(y).unwrap(), x);
        }
    }
}
