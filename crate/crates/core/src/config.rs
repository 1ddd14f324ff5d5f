//! Flat `key=value` text used for config files and checkpoint headers.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; whitespace around keys and values is trimmed. Later duplicates
/// win, like flags on a command line.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got {line:?}",
                i + 1
            )));
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        match out.iter_mut().find(|(ek, _)| *ek == k) {
            Some(slot) => slot.1 = v,
            None => out.push((k, v)),
        }
    }
    Ok(out)
}

pub fn render_kv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_renders() {
        let kv = parse_kv("# c\n a = 1 \n\nb=x=y\na=2\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "2".into()), ("b".into(), "x=y".into())]);
        assert_eq!(parse_kv(&render_kv(&kv)).unwrap(), kv);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(parse_kv("a=1\nnonsense"), Err(Error::Config(m)) if m.contains("line 2")));
        assert!(parse_kv("=3").is_err());
        assert!(parse_value::<usize>("rho", "-1").is_err());
        assert_eq!(parse_value::<f64>("lr", "1e-4").unwrap(), 1e-4);
    }
}
