//! Dataset manifests: CSV with header `subject_id,image,label,mask`.
//!
//! Relative paths are resolved against the manifest's directory on read.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::IoError;

pub const COLUMNS: [&str; 4] = ["subject_id", "image", "label", "mask"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub subject_id: String,
    pub image: PathBuf,
    pub label: u8,
    /// Lesion segmentation; absent for controls.
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }
}

/// Parses manifest text; relative paths are joined onto `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Manifest, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let mut col = [0usize; 4];
    for (slot, name) in col.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IoError::MissingColumn(name.to_string()))?;
    }
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let subject_id = field(col[0]).to_string();
        if subject_id.is_empty() {
            return Err(IoError::Format(format!("line {line}: empty subject_id")));
        }
        if !seen.insert(subject_id.clone()) {
            return Err(IoError::DuplicateSubject(subject_id));
        }
        let label = match field(col[2]) {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(IoError::BadLabel {
                    line,
                    value: other.to_string(),
                })
            }
        };
        let image = field(col[1]);
        if image.is_empty() {
            return Err(IoError::Format(format!("line {line}: empty image path")));
        }
        let mask = Some(field(col[3])).filter(|m| !m.is_empty()).map(resolve);
        rows.push(ManifestRow {
            subject_id,
            image: resolve(image),
            label,
            mask,
        });
    }
    Ok(Manifest { rows })
}

fn csv_err(e: csv::Error) -> IoError {
    IoError::Format(format!("manifest: {e}"))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    parse_manifest(&text, base)
}

/// Writes paths exactly as stored in the rows.
pub fn write_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS).map_err(csv_err)?;
    for r in &m.rows {
        let mask = r.mask.as_ref().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default();
        w.write_record([
            r.subject_id.as_str(),
            &r.image.to_string_lossy(),
            if r.label == 1 { "1" } else { "0" },
            &mask,
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| IoError::Format(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_three_rows() {
        let text = "subject_id,image,label,mask\na,a.nii,1,a_mask.nii\nb,/abs/b.nii,0,\nc,c.nii,0,\n";
        let m = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.rows[0].image, PathBuf::from("/data/a.nii"));
        assert_eq!(m.rows[0].mask, Some(PathBuf::from("/data/a_mask.nii")));
        assert_eq!(m.rows[1].image, PathBuf::from("/abs/b.nii"));
        assert_eq!(m.rows[1].mask, None);
        assert_eq!(m.labels(), vec![1, 0, 0]);
    }

    #[test]
    fn column_order_is_free() {
        let m = parse_manifest("label,mask,image,subject_id\n1,,x.nii,s1\n", Path::new("")).unwrap();
        assert_eq!(m.rows[0].subject_id, "s1");
    }

    #[test]
    fn rejects_duplicates_labels_and_missing_columns() {
        let dup = "subject_id,image,label,mask\na,a.nii,0,\na,b.nii,1,\n";
        assert!(matches!(parse_manifest(dup, Path::new("")), Err(IoError::DuplicateSubject(s)) if s == "a"));
        let bad = "subject_id,image,label,mask\na,a.nii,2,\n";
        assert!(matches!(parse_manifest(bad, Path::new("")), Err(IoError::BadLabel { line: 2, .. })));
        let missing = "subject_id,image,label\na,a.nii,0\n";
        assert!(matches!(parse_manifest(missing, Path::new("")), Err(IoError::MissingColumn(c)) if c == "mask"));
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            rows: vec![
                ManifestRow {
                    subject_id: "p0".into(),
                    image: "p0.nii".into(),
                    label: 1,
                    mask: Some("p0_mask.nii".into()),
                },
                ManifestRow {
                    subject_id: "c0".into(),
                    image: "c0.nii".into(),
                    label: 0,
                    mask: None,
                },
            ],
        };
        let path = dir.path().join("m.csv");
        write_manifest(&m, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.rows[0].image, dir.path().join("p0.nii"));
        assert_eq!(back.rows[1].mask, None);
        assert_eq!(back.labels(), vec![1, 0]);
    }
}
