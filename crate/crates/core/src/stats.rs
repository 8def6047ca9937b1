//! Order statistics shared across the pipeline.

use crate::{Error, Result};

/// Gaussian consistency factor: `MAD_SCALE * median(|x - median(x)|)` estimates
/// the standard deviation of normally distributed data.
pub const MAD_SCALE: f64 = 1.4826;

/// Median of a sequence; even lengths average the two central order statistics.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::param("median of an empty sequence"));
    }
    let mut buf = values.to_vec();
    Ok(median_in_place(&mut buf))
}

/// Median that reorders `buf`. `buf` must be non-empty and NaN-free.
pub(crate) fn median_in_place(buf: &mut [f64]) -> f64 {
    let n = buf.len();
    let mid = n / 2;
    let (lower, upper, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower_max = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower_max + upper)
    }
}

/// Scaled median absolute deviation, `1.4826 * median(|x - median(x)|)`.
pub fn mad(values: &[f64]) -> Result<f64> {
    Ok(median_and_mad(values)?.1)
}

/// Both location and scale in one pass over a scratch buffer.
pub fn median_and_mad(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::param("MAD of an empty sequence"));
    }
    let mut buf = values.to_vec();
    let center = median_in_place(&mut buf);
    for (b, &v) in buf.iter_mut().zip(values) {
        *b = (v - center).abs();
    }
    Ok((center, MAD_SCALE * median_in_place(&mut buf)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odd_and_even_medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert_eq!(median(&[7.0]).unwrap(), 7.0);
    }

    #[test]
    fn mad_of_one_to_five() {
        // deviations from 3 are {2,1,0,1,2}; raw MAD 1
        assert!((mad(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap() - 1.4826).abs() < 1e-15);
    }

    #[test]
    fn constant_sequence_has_zero_mad() {
        assert_eq!(mad(&[2.5; 17]).unwrap(), 0.0);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(mad(&[]), Err(Error::Parameter(_))));
        assert!(median(&[]).is_err());
    }
}
