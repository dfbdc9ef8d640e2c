use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One simulated mixture and where its parts live on disk.
///
/// Paths are stored as written in the manifest, i.e. relative to the
/// manifest's directory; use [`ManifestEntry::resolve`] to join them.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub mixture_path: PathBuf,
    pub source_paths: Vec<PathBuf>,
    pub speaker_ids: Vec<String>,
    pub gains_db: Vec<f64>,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn num_speakers(&self) -> usize {
        self.source_paths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.source_paths.len();
        if n == 0 {
            return Err(Error::InvalidEntry("entry has no sources".into()));
        }
        if self.speaker_ids.len() != n || self.gains_db.len() != n {
            return Err(Error::InvalidEntry(format!(
                "{} source paths, {} speaker ids, {} gains",
                n,
                self.speaker_ids.len(),
                self.gains_db.len()
            )));
        }
        let mut seen = HashSet::new();
        for id in &self.speaker_ids {
            if !seen.insert(id) {
                return Err(Error::InvalidEntry(format!("duplicate speaker id `{id}`")));
            }
        }
        if self.gains_db.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidEntry("non-finite gain".into()));
        }
        let fields = std::iter::once(self.mixture_path.to_string_lossy().into_owned())
            .chain(self.source_paths.iter().map(|p| p.to_string_lossy().into_owned()))
            .chain(self.speaker_ids.iter().cloned());
        for f in fields {
            if f.is_empty() || f.contains(['\t', ';', '\n', '\r']) {
                return Err(Error::InvalidEntry(format!(
                    "field `{f}` is empty or contains a reserved character"
                )));
            }
        }
        Ok(())
    }

    /// Paths joined onto `base` (the manifest's directory).
    pub fn resolve(&self, base: &Path) -> (PathBuf, Vec<PathBuf>) {
        (
            base.join(&self.mixture_path),
            self.source_paths.iter().map(|p| base.join(p)).collect(),
        )
    }

    fn to_line(&self) -> String {
        let join = |v: &[PathBuf]| {
            v.iter()
                .map(|p| p.to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join(";")
        };
        let gains = self
            .gains_db
            .iter()
            .map(|g| format!("{g:.2}"))
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.mixture_path.to_string_lossy(),
            join(&self.source_paths),
            self.speaker_ids.join(";"),
            gains,
            self.seed
        )
    }

    fn parse_line(line: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(format!("expected 5 tab-separated fields, found {}", fields.len()));
        }
        let gains_db = fields[3]
            .split(';')
            .map(|g| g.parse::<f64>().map_err(|_| format!("bad gain `{g}`")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let seed = fields[4]
            .parse::<u64>()
            .map_err(|_| format!("bad seed `{}`", fields[4]))?;
        let entry = ManifestEntry {
            mixture_path: PathBuf::from(fields[0]),
            source_paths: fields[1].split(';').map(PathBuf::from).collect(),
            speaker_ids: fields[2].split(';').map(str::to_owned).collect(),
            gains_db,
            seed,
        };
        entry.validate().map_err(|e| e.to_string())?;
        Ok(entry)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry = ManifestEntry::parse_line(line).map_err(|reason| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn save_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for e in entries {
        e.validate()?;
        writeln!(out, "{}", e.to_line()).expect("writing to a String");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(n: usize) -> ManifestEntry {
        ManifestEntry {
            mixture_path: "mix/0000.wav".into(),
            source_paths: (0..n).map(|i| PathBuf::from(format!("s{i}/0000.wav"))).collect(),
            speaker_ids: (0..n).map(|i| format!("spk{i}")).collect(),
            gains_db: (0..n).map(|i| i as f64 * 1.25).collect(),
            seed: 42,
        }
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn two_speaker_entry() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        save_manifest(&p, &[entry(2)]).unwrap();
        let loaded = load_manifest(&p).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].source_paths.len(), 2);
        assert_eq!(loaded[0], entry(2));
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "mix/0000.wav\ts0/0000.wav;s1/0000.wav\tspk0;spk1\t0.00;1.25\t42\n"
        );
    }

    #[test]
    fn mismatched_gains_fail_validation() {
        let mut e = entry(3);
        e.gains_db.pop();
        assert!(matches!(e.validate(), Err(Error::InvalidEntry(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "a.wav\tb.wav;c.wav;d.wav\tx;y;z\t0.00;1.00\t1\n").unwrap();
        match load_manifest(&p) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        let good = entry(2).to_line();
        std::fs::write(&p, format!("{good}\n{good}\nnot a record\n")).unwrap();
        match load_manifest(&p) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_speakers_rejected() {
        let mut e = entry(2);
        e.speaker_ids[1] = e.speaker_ids[0].clone();
        assert!(e.validate().is_err());
    }

    proptest! {
        #[test]
        fn save_then_load_is_identity(
            specs in proptest::collection::vec((1usize..6, -1000i32..1000, any::<u64>()), 0..8)
        ) {
            let entries: Vec<ManifestEntry> = specs
                .iter()
                .enumerate()
                .map(|(k, &(n, g, seed))| ManifestEntry {
                    mixture_path: format!("mix/{k:04}.wav").into(),
                    source_paths: (0..n).map(|i| PathBuf::from(format!("s{i}/{k:04}.wav"))).collect(),
                    speaker_ids: (0..n).map(|i| format!("sp{}", i * 7 + k)).collect(),
                    gains_db: (0..n).map(|i| (g + i as i32) as f64 / 100.0).collect(),
                    seed,
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.tsv");
            save_manifest(&p, &entries).unwrap();
            prop_assert_eq!(load_manifest(&p).unwrap(), entries);
        }
    }
}
