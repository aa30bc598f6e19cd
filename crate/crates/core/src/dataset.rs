//! Dataset index: images with label maps, identities and optional pairing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub image: PathBuf,
    pub labels: PathBuf,
    pub identity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub entries: Vec<DatasetEntry>,
}

impl DatasetIndex {
    /// Every pair id names exactly two entries of one identity.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Data("dataset index is empty".into()));
        }
        for (id, members) in self.pair_groups() {
            if members.len() != 2 {
                return Err(Error::Data(format!("pair {id} has {} entries, expected 2", members.len())));
            }
            let (a, b) = (&self.entries[members[0]], &self.entries[members[1]]);
            if a.identity != b.identity {
                return Err(Error::Data(format!("pair {id} mixes identities {} and {}", a.identity, b.identity)));
            }
        }
        Ok(())
    }

    fn pair_groups(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(p) = &e.pair {
                groups.entry(p.as_str()).or_default().push(i);
            }
        }
        groups
    }

    /// Entry indices of each pair, ordered by pair id.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.pair_groups().into_values().filter(|m| m.len() == 2).map(|m| (m[0], m[1])).collect()
    }

    pub fn singles(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].pair.is_none()).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let index: Self = serde_json::from_str(text)?;
        index.validate()?;
        Ok(index)
    }

    /// Loads and validates an index; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut index = Self::from_json(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut index.entries {
            e.image = base.join(&e.image);
            e.labels = base.join(&e.labels);
        }
        Ok(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(identity: &str, pair: Option<&str>) -> DatasetEntry {
        DatasetEntry {
            image: "a.png".into(),
            labels: "a_labels.png".into(),
            identity: identity.into(),
            pair: pair.map(Into::into),
        }
    }

    #[test]
    fn pairs_must_share_identity() {
        let ok = DatasetIndex { entries: vec![entry("x", Some("p")), entry("y", None), entry("x", Some("p"))] };
        ok.validate().unwrap();
        assert_eq!(ok.pairs(), vec![(0, 2)]);
        assert_eq!(ok.singles(), vec![1]);
        let bad = DatasetIndex { entries: vec![entry("x", Some("p")), entry("y", Some("p"))] };
        assert!(bad.validate().is_err());
        let lonely = DatasetIndex { entries: vec![entry("x", Some("p"))] };
        assert!(lonely.validate().is_err());
    }
}
