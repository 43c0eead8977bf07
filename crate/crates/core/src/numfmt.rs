//! Number formatting for wire and model files.

/// Formats a finite float the way Python's `repr` does (shortest
/// round-trip digits, `48.0` not `48`, exponent form outside `[1e-4, 1e16)`).
pub fn python_repr(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0.0".into() } else { "0.0".into() };
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "NaN".into()
        } else if x > 0.0 {
            "Infinity".into()
        } else {
            "-Infinity".into()
        };
    }
    // `{:e}` yields the shortest round-trip digits, e.g. `-3.275e1`.
    let sci = format!("{:e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let n = digits.len() as i32;

    let body = if (-4..16).contains(&exp) {
        if exp >= 0 {
            let int_len = exp + 1;
            if n <= int_len {
                format!("{}{}.0", digits, "0".repeat((int_len - n) as usize))
            } else {
                format!("{}.{}", &digits[..int_len as usize], &digits[int_len as usize..])
            }
        } else {
            format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
        }
    } else {
        let frac = if n > 1 { format!(".{}", &digits[1..]) } else { String::new() };
        let esign = if exp < 0 { '-' } else { '+' };
        format!("{}{}e{}{:02}", &digits[..1], frac, esign, exp.abs())
    };
    format!("{sign}{body}")
}

/// Lossless decimal string with 17 significant digits.
pub fn exact(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Twelve significant digits.
pub fn sig12(x: f64) -> String {
    format!("{:.11e}", x)
}

pub fn parse(s: &str) -> Result<f64, std::num::ParseFloatError> {
    s.trim().parse()
}
