//! Plain-text dataset manifest: one `<file> <train|val>` line per sequence.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::SimDataError;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    /// Free-form `key=value` header lines, written as `# key=value`.
    pub header: Vec<(String, String)>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn files(&self, split: Split) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(move |e| e.split == split).map(|e| e.file.as_str())
    }

    pub fn parse(text: &str) -> Result<Self, SimDataError> {
        let mut m = DatasetManifest::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.trim().split_once('=') {
                    m.header.push((k.trim().to_string(), v.trim().to_string()));
                }
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(file), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(SimDataError::Manifest { line: i + 1, msg: format!("expected `<file> <split>`, got `{line}`") });
            };
            let split = split.parse().map_err(|msg| SimDataError::Manifest { line: i + 1, msg })?;
            m.entries.push(ManifestEntry { file: file.to_string(), split });
        }
        Ok(m)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.header {
            s.push_str(&format!("# {k}={v}\n"));
        }
        for e in &self.entries {
            s.push_str(&format!("{} {}\n", e.file, e.split));
        }
        s
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, SimDataError> {
        DatasetManifest::parse(&fs::read_to_string(dir.as_ref().join(MANIFEST_FILE))?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), SimDataError> {
        fs::write(dir.as_ref().join(MANIFEST_FILE), self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_render_round_trip() {
        let text = "# seed=3\n# class=vehicle\nseq_0000.mf2sf train\n\nseq_0001.mf2sf val\n";
        let m = DatasetManifest::parse(text).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.files(Split::Val).collect::<Vec<_>>(), vec!["seq_0001.mf2sf"]);
        assert_eq!(DatasetManifest::parse(&m.render()).unwrap(), m);
        assert!(DatasetManifest::parse("a.bin test\n").is_err());
        assert!(DatasetManifest::parse("a.bin\n").is_err());
    }
}
