//! `key = value` text files with `#` comments, used for run configs and
//! synthetic panel specs.

use std::collections::BTreeMap;

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// a repeated key is an error.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value, got {raw:?}", n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(format!("line {}: empty key", n + 1));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(format!("line {}: duplicate key {k:?}", n + 1));
        }
    }
    Ok(out)
}

/// Comma-separated list of parsed values.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(|x| x.trim())
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|_| format!("cannot parse {x:?}")))
        .collect()
}

/// `a-b` or `a..b` year range, inclusive.
pub fn parse_year_range(s: &str) -> Result<(i32, i32), String> {
    let (a, b) = s
        .split_once("..")
        .or_else(|| s.split_once('-'))
        .ok_or_else(|| format!("expected a year range like 1993-2006, got {s:?}"))?;
    let a: i32 = a.trim().parse().map_err(|_| format!("bad year {a:?}"))?;
    let b: i32 = b.trim().parse().map_err(|_| format!("bad year {b:?}"))?;
    if a > b {
        return Err(format!("empty year range {s:?}"));
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lines_and_comments() {
        let kv = parse_key_values("# header\nwidth = 40\n\nseed=7 # trailing\n").unwrap();
        assert_eq!(kv["width"], "40");
        assert_eq!(kv["seed"], "7");
        assert!(parse_key_values("a = 1\na = 2").is_err());
        assert!(parse_key_values("no equals sign").is_err());
    }

    #[test]
    fn lists_and_ranges() {
        assert_eq!(parse_list::<f64>("1, 2.5,3").unwrap(), vec![1.0, 2.5, 3.0]);
        assert_eq!(parse_year_range("1993-2006").unwrap(), (1993, 2006));
        assert_eq!(parse_year_range("2007..2013").unwrap(), (2007, 2013));
        assert!(parse_year_range("2013-2007").is_err());
    }
}
