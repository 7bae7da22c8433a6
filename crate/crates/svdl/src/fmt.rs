//! Text formatting for metric logs and reports.

/// Format a float with 6 significant digits, `%g`-style.
///
/// Plain decimal notation for exponents in [-4, 5], scientific otherwise.
/// Trailing zeros after the decimal point are trimmed so re-parsing the text
/// gives the same rounded value on every platform.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        trim_zeros(&s)
    } else {
        let s = format!("{:.5e}", x);
        // Rust renders `1.23000e-7`; trim the mantissa zeros.
        match s.split_once('e') {
            Some((mant, e)) => format!("{}e{}", trim_zeros(mant), e),
            None => s,
        }
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        let t = s.trim_end_matches('0').trim_end_matches('.');
        t.to_string()
    } else {
        s.to_string()
    }
}
