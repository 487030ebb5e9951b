//! Split manifest: section headers `[train]`, `[val]`, `[test]` followed by
//! one source id per line.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn ids(d: &Dataset) -> Vec<String> {
    d.samples.iter().map(|s| s.source_id.clone()).collect()
}

impl SplitManifest {
    pub fn from_datasets(train: &Dataset, val: &Dataset, test: Option<&Dataset>) -> Result<Self> {
        let m = SplitManifest {
            train: ids(train),
            val: ids(val),
            test: test.map(ids).unwrap_or_default(),
        };
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (section, list) in self.sections() {
            for id in list {
                if !seen.insert(id.as_str()) {
                    return Err(Error::invalid(format!(
                        "source id {id} repeated (found again in [{section}])"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sections(&self) -> [(&'static str, &Vec<String>); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

impl fmt::Display for SplitManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, list) in self.sections() {
            writeln!(f, "[{name}]")?;
            for id in list {
                writeln!(f, "{id}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for SplitManifest {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut m = SplitManifest::default();
        let mut current: Option<&mut Vec<String>> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(match name {
                    "train" => &mut m.train,
                    "val" => &mut m.val,
                    "test" => &mut m.test,
                    other => return Err(Error::Format(format!("line {}: unknown section [{other}]", n + 1))),
                });
                continue;
            }
            match current.as_deref_mut() {
                Some(list) => list.push(line.to_string()),
                None => return Err(Error::Format(format!("line {}: id before any section header", n + 1))),
            }
        }
        m.check_disjoint()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let m = SplitManifest {
            train: vec!["a/1.ppm".into(), "a/2.ppm".into()],
            val: vec!["b/1.ppm".into()],
            test: vec![],
        };
        let text = m.to_string();
        assert!(text.starts_with("[train]\na/1.ppm\n"));
        assert_eq!(text.parse::<SplitManifest>().unwrap(), m);
    }

    #[test]
    fn overlap_and_garbage_are_rejected() {
        assert!("[train]\nx\n[val]\nx\n".parse::<SplitManifest>().is_err());
        assert!("x\n[train]\n".parse::<SplitManifest>().is_err());
        assert!("[dev]\n".parse::<SplitManifest>().is_err());
    }
}
