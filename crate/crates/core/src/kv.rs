//! Line-oriented `key=value` text files.
//!
//! Blank lines and lines starting with `#` are ignored; trailing `# ...`
//! comments after a value are stripped. Keys may be dotted (`critic.K`).
//! A key may appear at most once per file.

use std::collections::HashSet;

use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KvLine {
    /// 1-based line number in the source text.
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<KvLine>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(config_err!("line {line}: expected key=value, got `{content}`"));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(config_err!("line {line}: empty key"));
        }
        if !seen.insert(key.to_string()) {
            return Err(config_err!("line {line}: key `{key}` given more than once"));
        }
        out.push(KvLine {
            line,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

/// Parses a `x:p,x:p,...` list of weighted points.
pub fn parse_weighted(value: &str) -> std::result::Result<Vec<(f64, f64)>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (x, p) = item
                .split_once(':')
                .ok_or_else(|| format!("expected value:probability, got `{item}`"))?;
            let x: f64 = x.trim().parse().map_err(|_| format!("bad number `{x}`"))?;
            let p: f64 = p.trim().parse().map_err(|_| format!("bad probability `{p}`"))?;
            Ok((x, p))
        })
        .collect()
}

pub fn format_weighted(points: &[(f64, f64)]) -> String {
    points
        .iter()
        .map(|(x, p)| format!("{x}:{p}"))
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines() {
        let lines = parse("# header\n\na = 1\nb.c=x # trailing\n").unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].line, 3);
        assert_eq!(lines[1].key, "b.c");
        assert_eq!(lines[1].value, "x");
    }

    #[test]
    fn duplicate_and_malformed_lines() {
        let err = parse("a=1\na=2\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = parse("novalue\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn weighted_lists() {
        assert_eq!(parse_weighted("-1:0.5, 1:0.5").unwrap(), vec![(-1.0, 0.5), (1.0, 0.5)]);
        assert!(parse_weighted("1").is_err());
        assert_eq!(format_weighted(&[(1.0, 0.25), (-2.5, 0.75)]), "1:0.25,-2.5:0.75");
    }
}
