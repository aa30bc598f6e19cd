//! Reading face-parsing label maps into the component layout.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LabelMap;
use crate::latent::SemanticLayout;

/// Table collapsing the 19-class face-parsing labels into the default layout.
pub const CELEBAMASK19: &str = include_str!("../data/celebamask19.json");

/// Raw label value to component name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelTable {
    pub name: String,
    pub labels: BTreeMap<u8, String>,
}

impl LabelTable {
    pub fn celebamask19() -> Self {
        Self::from_json(CELEBAMASK19).expect("shipped table parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Each raw value mapped to itself with the layout's names.
    pub fn identity(layout: &SemanticLayout) -> Self {
        let labels = (0..layout.len()).map(|k| (k as u8, layout.name(k).to_string())).collect();
        Self { name: "identity".into(), labels }
    }

    /// Lookup from raw value to component index. Names absent from the layout
    /// are an error listing the offending raw values.
    pub fn resolve(&self, layout: &SemanticLayout) -> Result<[Option<u8>; 256]> {
        let mut lut = [None; 256];
        let mut bad = Vec::new();
        for (&raw, name) in &self.labels {
            match layout.index_of(name) {
                Ok(k) => lut[raw as usize] = Some(k as u8),
                Err(_) => bad.push(format!("{raw} ({name})")),
            }
        }
        if !bad.is_empty() {
            return Err(Error::Data(format!("label table {} maps values outside the layout: {}", self.name, bad.join(", "))));
        }
        Ok(lut)
    }
}

/// A remapped label map with the raw values that fell back to background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedLabels {
    pub labels: LabelMap,
    pub unmapped: Vec<u8>,
}

/// Remaps raw values through `table`; values the table does not cover become
/// background and are reported.
pub fn remap_labels(raw: &LabelMap, table: &LabelTable, layout: &SemanticLayout) -> Result<LoadedLabels> {
    let lut = table.resolve(layout)?;
    let background = layout.index_of("background").unwrap_or(0) as u8;
    let mut unmapped = [false; 256];
    let data = raw
        .data
        .iter()
        .map(|&v| {
            lut[v as usize].unwrap_or_else(|| {
                unmapped[v as usize] = true;
                background
            })
        })
        .collect();
    let unmapped: Vec<u8> = (0..=255u8).filter(|&v| unmapped[v as usize]).collect();
    Ok(LoadedLabels { labels: LabelMap::new(raw.height, raw.width, data)?, unmapped })
}

/// Reads an 8-bit indexed or grayscale PNG and remaps it into `layout`.
pub fn load_label_map(path: &Path, table: &LabelTable, layout: &SemanticLayout) -> Result<LoadedLabels> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let raw = LabelMap::decode_png(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let loaded = remap_labels(&raw, table, layout)?;
    if !loaded.unmapped.is_empty() {
        warn!("{}: labels {:?} not in table {}; mapped to background", path.display(), loaded.unmapped, table.name);
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_table_resolves_against_default_layout() {
        let layout = SemanticLayout::default();
        let lut = LabelTable::celebamask19().resolve(&layout).unwrap();
        assert_eq!(lut.iter().filter(|v| v.is_some()).count(), 19);
    }

    #[test]
    fn foreign_component_names_are_listed() {
        let mut table = LabelTable::identity(&SemanticLayout::default());
        table.labels.insert(40, "tattoo".into());
        let err = table.resolve(&SemanticLayout::default()).unwrap_err().to_string();
        assert!(err.contains("40 (tattoo)"), "{err}");
    }
}
