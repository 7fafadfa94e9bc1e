//! Number formatting shared by the CSV writers.

/// Formats `x` with `sig` significant digits in the style of C's `%.{sig}g`:
/// fixed notation for moderate exponents, scientific otherwise, trailing
/// zeros trimmed.
pub fn fmt_sig(x: f64, sig: usize) -> String {
    if x.is_nan() {
        return "NaN".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let sig = sig.max(1);
    let sci = format!("{:.*e}", sig - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -4 || exp >= sig as i32 {
        format!("{}e{}", trim_zeros(mantissa), exp)
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Formats an optional metric, writing `NA` when absent.
pub fn fmt_opt(x: Option<f64>, decimals: usize) -> String {
    match x {
        Some(v) => format!("{:.*}", decimals, v),
        None => "NA".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(fmt_sig(0.25, 9), "0.25");
        assert_eq!(fmt_sig(1.0, 9), "1");
        assert_eq!(fmt_sig(1.0 / 3.0, 9), "0.333333333");
        assert_eq!(fmt_sig(123456789.0, 9), "123456789");
        assert_eq!(fmt_sig(1234567890.0, 9), "1.23456789e9");
        assert_eq!(fmt_sig(-0.0000123456789, 9), "-1.23456789e-5");
        assert_eq!(fmt_sig(0.000123, 9), "0.000123");
        assert_eq!(fmt_sig(0.0, 9), "0");
        assert_eq!(fmt_sig(9.999999999, 9), "10");
    }

    #[test]
    fn optional_metrics() {
        assert_eq!(fmt_opt(Some(1.5), 3), "1.500");
        assert_eq!(fmt_opt(None, 3), "NA");
    }
}
