//! Operation-count instrumentation for the matching stages.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

/// Scalar work performed by a matching routine. Multiply-accumulates cover
/// score evaluation, `exps` every exponential evaluated by a softmax and
/// `compares` every comparison made by top-k, argmax or threshold logic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub macs: u64,
    pub exps: u64,
    pub compares: u64,
}

impl OpCount {
    pub fn total(&self) -> u64 {
        self.macs + self.exps + self.compares
    }
}

impl Add for OpCount {
    type Output = OpCount;

    fn add(self, o: OpCount) -> OpCount {
        OpCount {
            macs: self.macs + o.macs,
            exps: self.exps + o.exps,
            compares: self.compares + o.compares,
        }
    }
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, o: OpCount) {
        *self = *self + o;
    }
}

impl std::iter::Sum for OpCount {
    fn sum<I: Iterator<Item = OpCount>>(iter: I) -> OpCount {
        iter.fold(OpCount::default(), Add::add)
    }
}
