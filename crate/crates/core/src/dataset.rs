//! Dataset records and NDJSON serialization.
//!
//! Datasets are newline-delimited JSON, one example per line, with parallel
//! `units` / `durations` / `pitch` arrays plus a class label and a split
//! tag. Everything is validated on read so downstream code can index
//! without re-checking.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One deduplicated example: parallel unit/duration/pitch streams.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSequence {
    pub units: Vec<usize>,
    pub durations: Vec<usize>,
    pub pitch: Vec<usize>,
    pub label: usize,
    pub split: Split,
}

impl UnitSequence {
    /// Structural checks: non-empty, parallel lengths, positive durations,
    /// no adjacent equal units (the deduplicated form).
    pub fn validate(&self, context: &str) -> Result<()> {
        if self.units.is_empty() {
            return Err(Error::InvalidInput(format!("{context}: empty unit sequence")));
        }
        if self.durations.len() != self.units.len() || self.pitch.len() != self.units.len() {
            return Err(Error::InvalidInput(format!(
                "{context}: stream lengths differ (units {}, durations {}, pitch {})",
                self.units.len(),
                self.durations.len(),
                self.pitch.len()
            )));
        }
        if let Some(pos) = self.durations.iter().position(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "{context}: zero duration at position {pos}"
            )));
        }
        if let Some(pos) = self.units.windows(2).position(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!(
                "{context}: adjacent equal units at position {pos}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub examples: Vec<UnitSequence>,
}

impl Dataset {
    pub fn new(examples: Vec<UnitSequence>) -> Self {
        Dataset { examples }
    }

    /// Reads and validates an NDJSON dataset; errors carry the 1-based line.
    pub fn read_ndjson(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let mut examples = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let seq: UnitSequence = serde_json::from_str(&line).map_err(|e| {
                Error::Corrupt(format!("{}:{}: {e}", path.display(), idx + 1))
            })?;
            seq.validate(&format!("{}:{}", path.display(), idx + 1))?;
            examples.push(seq);
        }
        if examples.is_empty() {
            return Err(Error::InvalidInput(format!(
                "{}: dataset contains no examples",
                path.display()
            )));
        }
        Ok(Dataset { examples })
    }

    pub fn write_ndjson(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for seq in &self.examples {
            let line = serde_json::to_string(seq)
                .map_err(|e| Error::Corrupt(format!("serialize example: {e}")))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> Vec<&UnitSequence> {
        self.examples.iter().filter(|s| s.split == split).collect()
    }

    /// Number of classes; labels are required to be contiguous from zero.
    pub fn num_classes(&self) -> Result<usize> {
        let max = self
            .examples
            .iter()
            .map(|s| s.label)
            .max()
            .ok_or_else(|| Error::InvalidInput("empty dataset".into()))?;
        let mut seen = vec![false; max + 1];
        for s in &self.examples {
            seen[s.label] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::InvalidInput(format!(
                "labels are not contiguous: class {missing} absent but class {max} present"
            )));
        }
        Ok(max + 1)
    }

    /// Largest unit id + 1 across all examples.
    pub fn observed_vocab(&self) -> usize {
        self.examples
            .iter()
            .flat_map(|s| s.units.iter())
            .max()
            .map_or(0, |&u| u + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(units: Vec<usize>, label: usize, split: Split) -> UnitSequence {
        let n = units.len();
        UnitSequence {
            units,
            durations: vec![1; n],
            pitch: vec![0; n],
            label,
            split,
        }
    }

    #[test]
    fn ndjson_round_trip() {
        let ds = Dataset::new(vec![
            seq(vec![1, 2, 3], 0, Split::Train),
            seq(vec![4, 5], 1, Split::Test),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.ndjson");
        ds.write_ndjson(&path).unwrap();
        let loaded = Dataset::read_ndjson(&path).unwrap();
        assert_eq!(loaded.examples, ds.examples);
    }

    #[test]
    fn split_serializes_lowercase() {
        let line = serde_json::to_string(&seq(vec![7], 0, Split::Valid)).unwrap();
        assert!(line.contains("\"split\":\"valid\""), "{line}");
        assert!(line.contains("\"units\":[7]"), "{line}");
    }

    #[test]
    fn read_reports_bad_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ndjson");
        let good = serde_json::to_string(&seq(vec![1, 2], 0, Split::Train)).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        let err = Dataset::read_ndjson(&path).unwrap_err();
        assert!(err.to_string().contains(":2"), "{err}");
    }

    #[test]
    fn read_rejects_unequal_streams() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("uneven.ndjson");
        std::fs::write(
            &path,
            r#"{"units":[1,2],"durations":[1],"pitch":[0,0],"label":0,"split":"train"}"#,
        )
        .unwrap();
        let err = Dataset::read_ndjson(&path).unwrap_err();
        assert!(err.to_string().contains("lengths differ"), "{err}");
    }

    #[test]
    fn read_rejects_adjacent_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.ndjson");
        std::fs::write(
            &path,
            r#"{"units":[3,3],"durations":[1,1],"pitch":[0,0],"label":0,"split":"train"}"#,
        )
        .unwrap();
        let err = Dataset::read_ndjson(&path).unwrap_err();
        assert!(err.to_string().contains("adjacent equal"), "{err}");
    }

    #[test]
    fn num_classes_requires_contiguity() {
        let ds = Dataset::new(vec![
            seq(vec![1], 0, Split::Train),
            seq(vec![2], 2, Split::Train),
        ]);
        assert!(ds.num_classes().is_err());

        let ok = Dataset::new(vec![
            seq(vec![1], 0, Split::Train),
            seq(vec![2], 1, Split::Train),
        ]);
        assert_eq!(ok.num_classes().unwrap(), 2);
    }

    #[test]
    fn split_filter_and_vocab() {
        let ds = Dataset::new(vec![
            seq(vec![1, 9], 0, Split::Train),
            seq(vec![2], 1, Split::Valid),
            seq(vec![3], 1, Split::Train),
        ]);
        assert_eq!(ds.split(Split::Train).len(), 2);
        assert_eq!(ds.split(Split::Valid).len(), 1);
        assert_eq!(ds.split(Split::Test).len(), 0);
        assert_eq!(ds.observed_vocab(), 10);
    }
}
