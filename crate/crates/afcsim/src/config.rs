//! TOML loading with position-anchored diagnostics and field validators.

use crate::error::ConfigError;
use crate::{Error, Result};
use serde::de::{self, DeserializeOwned, Deserializer};
use serde::Deserialize;
use std::fmt;

/// 1-based line and column of a byte offset.
pub fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) + 1;
    (line, col)
}

fn key_on_line(text: &str, line: usize) -> Option<String> {
    let l = text.lines().nth(line.checked_sub(1)?)?;
    let (k, _) = l.split_once('=')?;
    let k = k.trim().trim_matches('"');
    (!k.is_empty() && !k.starts_with('[')).then(|| k.to_string())
}

fn backticked(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

/// Find the assignment of `key` at or after `from_line`, returning its line
/// and the column of its value.
fn find_assignment(text: &str, key: &str, from_line: usize) -> Option<(usize, usize)> {
    for (i, l) in text.lines().enumerate().skip(from_line.saturating_sub(1)) {
        if let Some((k, v)) = l.split_once('=') {
            if k.trim().trim_matches('"') == key {
                let col = l.len() - v.trim_start().len() + 1;
                return Some((i + 1, col));
            }
        }
    }
    None
}

/// Deserialize `text`, mapping failures to a [`ConfigError`] that names the
/// file, line, column and key.
///
/// Values inside tagged tables are buffered by serde and lose their own
/// position, so an error reported against a table header is re-anchored to
/// the key it names when that key appears in the message.
pub fn parse_toml<T: DeserializeOwned>(text: &str, file: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let (mut line, mut column, mut key) = match e.span() {
            Some(span) => {
                let (l, c) = line_col(text, span.start);
                (Some(l), Some(c), key_on_line(text, l))
            }
            None => (None, None, None),
        };
        if key.is_none() {
            if let Some(named) = backticked(e.message()) {
                if let Some((l, c)) = find_assignment(text, named, line.unwrap_or(1)) {
                    line = Some(l);
                    column = Some(c);
                    key = Some(named.to_string());
                }
            }
        }
        Error::Config(ConfigError {
            file: file.to_string(),
            line,
            column,
            key,
            message: e.message().trim().to_string(),
        })
    })
}

pub(crate) fn config_error(file: &str, key: Option<&str>, message: impl Into<String>) -> Error {
    Error::Config(ConfigError {
        file: file.to_string(),
        line: None,
        column: None,
        key: key.map(str::to_string),
        message: message.into(),
    })
}

/// Prefix a field validator's error with the key it guards.
pub fn keyed<'de, D, T>(d: D, key: &str, check: fn(D) -> std::result::Result<T, D::Error>) -> std::result::Result<T, D::Error>
where
    D: Deserializer<'de>,
{
    check(d).map_err(|e| de::Error::custom(format!("`{key}` {e}")))
}

/// Declare a validator that names its key in error messages.
#[macro_export]
#[doc(hidden)]
macro_rules! keyed_field {
    ($name:ident, $key:literal, $check:path, $t:ty) => {
        fn $name<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<$t, D::Error> {
            $crate::config::keyed(d, $key, $check)
        }
    };
}

fn check<E: de::Error>(v: f64, ok: bool, what: &str) -> std::result::Result<f64, E> {
    if ok {
        Ok(v)
    } else {
        Err(E::custom(format!("must be {what}, got {v}")))
    }
}

/// Field validator: strictly positive finite number.
pub fn positive<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    check(v, v.is_finite() && v > 0.0, "positive")
}

/// Field validator: finite number ≥ 0.
pub fn non_negative<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    check(v, v.is_finite() && v >= 0.0, "non-negative")
}

/// Field validator: number in [0, 1].
pub fn unit_interval<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    check(v, (0.0..=1.0).contains(&v), "within [0, 1]")
}

/// Field validator: integer ≥ 1.
pub fn count<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u32, D::Error> {
    let v = i64::deserialize(d)?;
    if v >= 1 && v <= u32::MAX as i64 {
        Ok(v as u32)
    } else {
        Err(de::Error::custom(format!("must be a positive integer, got {v}")))
    }
}

/// Duration in seconds. Accepts a bare number of seconds or a string with a
/// unit: `"100 us"`, `"20 μs"`, `"150 ms"`, `"10 s"`, `"200 ns"`.
pub fn parse_seconds(s: &str) -> std::result::Result<f64, String> {
    let t = s.trim();
    let split = t
        .find(|c: char| c.is_alphabetic() || c == 'μ' || c == 'µ')
        .unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let v: f64 = num.trim().parse().map_err(|_| format!("cannot read duration `{s}`"))?;
    match unit.trim() {
        "" | "s" => Ok(v),
        "ms" => Ok(v / 1e3),
        "us" | "μs" | "µs" => Ok(v / 1e6),
        "ns" => Ok(v / 1e9),
        "min" => Ok(v * 60.0),
        u => Err(format!("unknown time unit `{u}`")),
    }
}

fn any_seconds<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    struct V;
    impl de::Visitor<'_> for V {
        type Value = f64;
        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a duration in seconds or a string such as \"100 us\"")
        }
        fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<f64, E> {
            Ok(v)
        }
        fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }
        fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }
        fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<f64, E> {
            parse_seconds(v).map_err(E::custom)
        }
    }
    d.deserialize_any(V)
}

/// Field validator: duration > 0.
pub fn duration<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    let v = any_seconds(d)?;
    check(v, v.is_finite() && v > 0.0, "a positive duration")
}

/// Field validator: duration ≥ 0.
pub fn duration_or_zero<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    let v = any_seconds(d)?;
    check(v, v.is_finite() && v >= 0.0, "a non-negative duration")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    #[allow(dead_code)]
    struct Probe {
        #[serde(deserialize_with = "positive")]
        width: f64,
        #[serde(deserialize_with = "duration")]
        duration: f64,
    }

    #[test]
    fn units_parse() {
        assert_eq!(parse_seconds("100 us").unwrap(), 100e-6);
        assert_eq!(parse_seconds("150ms").unwrap(), 0.15);
        assert_eq!(parse_seconds("2").unwrap(), 2.0);
        assert!(parse_seconds("3 parsecs").is_err());
    }

    #[test]
    fn negative_duration_names_key_and_line() {
        let text = "width = 1.0\nduration = \"-1 s\"\n";
        let err = parse_toml::<Probe>(text, "probe.toml").unwrap_err();
        let Error::Config(c) = err else { panic!("{err}") };
        assert_eq!(c.line, Some(2));
        assert_eq!(c.key.as_deref(), Some("duration"));
        assert!(c.message.contains("positive duration"), "{}", c.message);
    }

    #[test]
    fn unknown_key_rejected() {
        let text = "width = 1.0\nduration = 1\nwidht = 3\n";
        let err = parse_toml::<Probe>(text, "probe.toml").unwrap_err();
        let Error::Config(c) = err else { panic!("{err}") };
        assert_eq!(c.line, Some(3));
        assert!(c.message.contains("widht"), "{}", c.message);
    }

    #[test]
    fn zero_width_rejected() {
        let err = parse_toml::<Probe>("width = 0\nduration = 1", "p").unwrap_err();
        assert!(err.to_string().contains("p:1:"), "{err}");
    }

    #[test]
    fn line_col_counts_from_one() {
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
        assert_eq!(line_col("ab", 0), (1, 1));
    }
}
