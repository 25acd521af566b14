// SPDX-License-Identifier: Apache-2.0
//! Splits a measured overhead into a fixed startup cost and a runtime
//! slope, given two runs of different native length: `o = s + r * t`.

use num_traits::Float;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overhead<F> {
    /// Startup overhead, in the unit of the inputs.
    pub startup: F,
    /// Runtime overhead per unit of native runtime.
    pub ratio: F,
}

impl<F: Float> Overhead<F> {
    /// Overhead predicted for a run of native length `t`.
    pub fn at(&self, t: F) -> F {
        self.startup + self.ratio * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
#[error("native runtimes must differ and be finite")]
pub struct DegenerateInputs;

pub fn derive_overhead<F: Float>(t1: F, o1: F, t2: F, o2: F) -> Result<Overhead<F>, DegenerateInputs> {
    if t1 == t2 || [t1, o1, t2, o2].iter().any(|v| !v.is_finite()) {
        return Err(DegenerateInputs);
    }
    let ratio = (o2 - o1) / (t2 - t1);
    Ok(Overhead {
        startup: o1 - ratio * t1,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_overhead_has_no_slope() {
        let o = derive_overhead(10.0_f64, 2.5, 40.0, 2.5).unwrap();
        assert_eq!(o.ratio, 0.0);
        assert_eq!(o.startup, 2.5);
    }

    #[test]
    fn equal_runtimes_are_degenerate() {
        assert_eq!(derive_overhead(5.0_f64, 1.0, 5.0, 2.0), Err(DegenerateInputs));
        assert_eq!(derive_overhead(f64::NAN, 1.0, 5.0, 2.0), Err(DegenerateInputs));
    }

    #[test]
    fn works_in_f32() {
        let o = derive_overhead(1.0_f32, 2.0, 3.0, 4.0).unwrap();
        assert!((o.ratio - 1.0).abs() < 1e-6 && (o.startup - 1.0).abs() < 1e-6);
    }
}
