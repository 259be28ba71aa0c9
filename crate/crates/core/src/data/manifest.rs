//! CSV manifest: `subject_id,clip_id,onset_path,apex_path,emotion`, paths
//! relative to the manifest's directory.

use std::fs::File;
use std::path::{Path, PathBuf};

use crate::data::{DatasetIndex, ImageSource, Sample, TaskSpec};
use crate::error::{Error, Result};

pub const HEADER: [&str; 5] = ["subject_id", "clip_id", "onset_path", "apex_path", "emotion"];

pub fn load_manifest(path: &Path, task: &TaskSpec) -> Result<DatasetIndex> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let bad = |row: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = rdr.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(bad(1, format!("header must be `{}`", HEADER.join(","))));
    }
    let mut samples = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| bad(row, e.to_string()))?;
        if rec.len() != HEADER.len() {
            return Err(bad(row, format!("expected 5 fields, found {}", rec.len())));
        }
        let field = |j: usize| rec[j].trim().to_string();
        if field(0).is_empty() {
            return Err(bad(row, "empty subject_id".into()));
        }
        if field(2).is_empty() || field(3).is_empty() {
            return Err(bad(row, "empty image path".into()));
        }
        samples.push(Sample {
            subject_id: field(0),
            clip_id: field(1),
            onset: ImageSource::File(base.join(field(2))),
            apex: ImageSource::File(base.join(field(3))),
            emotion: field(4),
            truth: None,
        });
    }
    DatasetIndex::from_samples(samples, task.clone())
}

/// One manifest row; paths are written as given.
#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub subject_id: String,
    pub clip_id: String,
    pub onset_path: PathBuf,
    pub apex_path: PathBuf,
    pub emotion: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    w.write_record(HEADER).map_err(err)?;
    for r in rows {
        w.write_record([
            r.subject_id.as_str(),
            r.clip_id.as_str(),
            &r.onset_path.to_string_lossy(),
            &r.apex_path.to_string_lossy(),
            r.emotion.as_str(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskName;
    use std::io::Write;

    fn manifest(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("m.csv");
        let mut f = File::create(&p).unwrap();
        write!(f, "subject_id,clip_id,onset_path,apex_path,emotion\n{body}").unwrap();
        p
    }

    #[test]
    fn loads_all_mappable_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = manifest(
            dir.path(),
            "s1,c1,a.png,b.png,happiness\ns1,c2,a.png,b.png,surprise\ns2,c3,a.png,b.png,others\n",
        );
        let idx = load_manifest(&p, &TaskSpec::new(TaskName::Casme2Five)).unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.labels, vec![0, 3, 4]);
        assert_eq!(idx.dropped, 0);
        match &idx.samples[0].onset {
            ImageSource::File(p) => assert_eq!(p, &dir.path().join("a.png")),
            _ => panic!("expected file source"),
        }
    }

    #[test]
    fn drops_and_counts_unmapped_emotion() {
        let dir = tempfile::tempdir().unwrap();
        let p = manifest(dir.path(), "s1,c1,a.png,b.png,fear\n");
        let idx = load_manifest(&p, &TaskSpec::new(TaskName::Casme2Five)).unwrap();
        assert_eq!(idx.len(), 0);
        assert_eq!(idx.dropped, 1);
    }

    #[test]
    fn reports_row_of_malformed_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = manifest(dir.path(), "s1,c1,a.png,b.png,happiness\ns1,c2,a.png\n");
        match load_manifest(&p, &TaskSpec::new(TaskName::Casme2Five)) {
            Err(Error::Manifest { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_and_bad_header() {
        let task = TaskSpec::new(TaskName::Casme2Five);
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/m.csv"), &task),
            Err(Error::Io { .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        std::fs::write(&p, "a,b,c,d,e\n").unwrap();
        assert!(matches!(load_manifest(&p, &task), Err(Error::Manifest { row: 1, .. })));
    }

    #[test]
    fn unreadable_image_is_reported_on_access_with_clip_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = manifest(dir.path(), "s1,clip-x,missing.png,missing.png,happiness\n");
        let idx = load_manifest(&p, &TaskSpec::new(TaskName::Casme2Five)).unwrap();
        match idx.samples[0].load_pair() {
            Err(Error::Image { clip_id, .. }) => assert_eq!(clip_id, "clip-x"),
            other => panic!("expected image error, got {other:?}"),
        }
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<ManifestRow> = (0..4)
            .map(|i| ManifestRow {
                subject_id: format!("s{}", i % 2),
                clip_id: format!("c{i}"),
                onset_path: "o.png".into(),
                apex_path: "a.png".into(),
                emotion: "class1".into(),
            })
            .collect();
        let p = dir.path().join("w.csv");
        write_manifest(&p, &rows).unwrap();
        let idx = load_manifest(&p, &TaskSpec::new(TaskName::Synthetic(2))).unwrap();
        assert_eq!(idx.len(), 4);
        assert_eq!(idx.subjects(), vec!["s0", "s1"]);
    }
}
