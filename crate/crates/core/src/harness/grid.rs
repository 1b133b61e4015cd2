//! Sweep grids: a comma-separated list whose items are scalars or inclusive
//! `lo:hi:step` ranges, e.g. `50:150:50,175:225:25,250`.

fn split_items(text: &str) -> Result<Vec<&str>, String> {
    let items: Vec<&str> = text.split(',').map(str::trim).collect();
    if items.iter().any(|s| s.is_empty()) {
        return Err(format!("empty item in grid `{text}`"));
    }
    Ok(items)
}

/// Integer grid.
pub fn parse_usize_grid(text: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for item in split_items(text)? {
        let parts: Vec<&str> = item.split(':').collect();
        let num = |s: &str| s.trim().parse::<usize>().map_err(|_| format!("`{s}` is not a non-negative integer in grid `{text}`"));
        match parts.as_slice() {
            [v] => out.push(num(v)?),
            [lo, hi, step] => {
                let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
                if step == 0 {
                    return Err(format!("range `{item}` has zero step"));
                }
                if hi < lo {
                    return Err(format!("range `{item}` has hi < lo"));
                }
                out.extend((lo..=hi).step_by(step));
            }
            _ => return Err(format!("`{item}` is neither a value nor lo:hi:step")),
        }
    }
    Ok(out)
}

/// Real grid. Range points are `lo + i·step` for every `i` with the point at
/// most `hi` (up to a relative slack of 1e-9), rounded to 12 significant
/// digits so that CSV output stays readable.
pub fn parse_f64_grid(text: &str) -> Result<Vec<f64>, String> {
    let mut out = Vec::new();
    for item in split_items(text)? {
        let parts: Vec<&str> = item.split(':').collect();
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("`{s}` is not a finite number in grid `{text}`"))
        };
        match parts.as_slice() {
            [v] => out.push(num(v)?),
            [lo, hi, step] => {
                let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
                if !(step > 0.0) {
                    return Err(format!("range `{item}` needs a positive step"));
                }
                if hi < lo {
                    return Err(format!("range `{item}` has hi < lo"));
                }
                let count = ((hi - lo) / step * (1.0 + 1e-9) + 1e-9).floor() as usize + 1;
                out.extend((0..count).map(|i| round_sig(lo + i as f64 * step)));
            }
            _ => return Err(format!("`{item}` is neither a value nor lo:hi:step")),
        }
    }
    Ok(out)
}

fn round_sig(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let scale = 10f64.powi(11 - x.abs().log10().floor() as i32);
    (x * scale).round() / scale
}

/// `Some(position)` of the first element that does not exceed its predecessor.
pub fn first_non_increasing<T: PartialOrd>(values: &[T]) -> Option<usize> {
    values.windows(2).position(|w| w[1] <= w[0]).map(|i| i + 1)
}
