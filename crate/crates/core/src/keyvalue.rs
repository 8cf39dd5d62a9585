//! The `key = value` text format used by run configs and benchmark specs.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys may appear once. Callers pull typed values out of a [`KeyValues`] and
//! then call [`KeyValues::finish`], which rejects any key nobody asked for.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {line_no}: expected `key = value`, got {line:?}"
                )));
            };
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {line_no}: invalid key {key:?}")));
            }
            if entries
                .insert(key.to_string(), (line_no, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Config(format!("line {line_no}: duplicate key {key:?}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes and parses `key`, if present.
    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some((line_no, raw)) = self.entries.remove(key) else {
            return Ok(None);
        };
        raw.parse()
            .map(Some)
            .map_err(|e| Error::Config(format!("line {line_no}: {key} = {raw:?}: {e}")))
    }

    pub fn take_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Removes and parses a comma-separated list.
    pub fn take_list<T>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(raw) = self.take::<String>(key)? else {
            return Ok(None);
        };
        parse_list(&raw)
            .map(Some)
            .map_err(|e| Error::Config(format!("{key}: {e}")))
    }

    /// Errors if any key was never taken.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line_no, _))) => Err(Error::Config(format!("line {line_no}: unknown key {key:?}"))),
        }
    }
}

pub fn parse_list<T>(raw: &str) -> std::result::Result<Vec<T>, String>
where
    T: FromStr,
    T::Err: Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

/// Renders a list in the form [`KeyValues::take_list`] reads back.
pub fn format_list<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let mut kv = KeyValues::parse("# header\nepochs = 5  # trailing\n\nkernels = 5, 25,39\nname=x\n").unwrap();
        assert_eq!(kv.take::<usize>("epochs").unwrap(), Some(5));
        assert_eq!(kv.take_list::<usize>("kernels").unwrap(), Some(vec![5, 25, 39]));
        assert_eq!(kv.take_or("missing", 3.5).unwrap(), 3.5);
        assert_eq!(kv.take::<String>("name").unwrap().as_deref(), Some("x"));
        kv.finish().unwrap();
    }

    #[test]
    fn rejects_unknown_duplicate_and_garbage() {
        let mut kv = KeyValues::parse("epochs = 5\nbogus = 1\n").unwrap();
        kv.take::<usize>("epochs").unwrap();
        let err = kv.finish().unwrap_err();
        assert!(err.is_config() && err.to_string().contains("bogus"));
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        assert!(KeyValues::parse("just words").is_err());
        assert!(KeyValues::parse("two words = 1").is_err());
        let mut kv = KeyValues::parse("epochs = five").unwrap();
        assert!(kv.take::<usize>("epochs").unwrap_err().is_config());
    }

    #[test]
    fn list_round_trip() {
        let xs = [0.5, 1e-3, 7.0];
        assert_eq!(parse_list::<f64>(&format_list(&xs)).unwrap(), xs);
    }
}
