//! Float formatting shared by every CSV writer.

/// 17 significant digits, enough to round-trip any `f64` exactly.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            prop_assert_eq!(fmt_float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn specials() {
        assert_eq!(fmt_float(f64::INFINITY).parse::<f64>().unwrap(), f64::INFINITY);
        assert!(fmt_float(f64::NAN).parse::<f64>().unwrap().is_nan());
    }
}
