//! Dataset plumbing: sample/record types, the CSV manifest that ties images
//! on disk to labels, and image ingestion (decode, resize, normalize).

pub mod augment;
pub mod split;
pub mod synth;

use std::collections::HashSet;
use std::fmt;
use std::io::Write as _;
use std::path::Path;

use crate::config::NUM_GRADES;
use crate::error::DataError;

/// Acquisition site. The two sites share anatomy but differ in imaging
/// nuisances, which is what the drift-correction experiments exercise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Source,
    Target,
}

impl Site {
    pub fn as_str(self) -> &'static str {
        match self {
            Site::Source => "source",
            Site::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "source" => Ok(Site::Source),
            "target" => Ok(Site::Target),
            other => Err(format!("unknown site {other:?} (expected source|target)")),
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dataset split membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train|val|test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labelled image. `image` is H×W×3 interleaved, every value in [0, 1].
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub grade: u8,
    pub site: Site,
    pub split: Split,
}

impl Sample {
    /// Flat pixel buffer length implied by the dimensions.
    pub fn expected_len(&self) -> usize {
        self.height * self.width * 3
    }
}

/// One manifest row: a relative image path plus its labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub grade: u8,
    pub site: Site,
    pub split: Split,
}

/// Parsed dataset manifest. Paths are unique and grades valid by
/// construction of `load`/`save`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
}

const MANIFEST_HEADER: &str = "path,grade,site,split";

impl DatasetManifest {
    /// Read and validate a manifest file. Errors carry 1-based line numbers.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|(line, msg)| DataError::Manifest {
            path: path.display().to_string(),
            line,
            msg,
        })
    }

    /// Parse manifest text; errors are (line, message).
    pub fn parse(text: &str) -> Result<Self, (usize, String)> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
            Some((_, h)) => {
                return Err((1, format!("bad header {h:?} (expected {MANIFEST_HEADER:?})")))
            }
            None => return Err((1, "empty manifest".to_string())),
        }
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (idx, raw) in lines {
            let line_no = idx + 1;
            let line = raw.trim_end();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err((
                    line_no,
                    format!("expected 4 comma-separated fields, found {}", fields.len()),
                ));
            }
            let path = fields[0].to_string();
            if path.is_empty() {
                return Err((line_no, "empty path".to_string()));
            }
            if !seen.insert(path.clone()) {
                return Err((line_no, format!("duplicate path {path:?}")));
            }
            let grade: u8 = fields[1]
                .parse()
                .map_err(|_| (line_no, format!("grade {:?} is not an integer", fields[1])))?;
            if grade as usize >= NUM_GRADES {
                return Err((line_no, format!("grade {grade} out of range 0..=4")));
            }
            let site = Site::parse(fields[2]).map_err(|msg| (line_no, msg))?;
            let split = Split::parse(fields[3]).map_err(|msg| (line_no, msg))?;
            rows.push(ManifestRow {
                path,
                grade,
                site,
                split,
            });
        }
        Ok(DatasetManifest { rows })
    }

    /// Write the manifest. Paths that would corrupt the CSV are rejected.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let io_err = |source| DataError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            if row.path.contains(',') || row.path.contains('\n') {
                return Err(DataError::Manifest {
                    path: path.display().to_string(),
                    line: i + 2,
                    msg: format!("path {:?} contains a CSV delimiter", row.path),
                });
            }
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.path, row.grade, row.site, row.split
            ));
        }
        let mut file = std::fs::File::create(path).map_err(io_err)?;
        file.write_all(out.as_bytes()).map_err(io_err)
    }
}

/// Decode every manifest image (paths relative to `base`), resize to
/// `image_size`² with bilinear filtering, replicate grayscale to three
/// channels and normalize to [0, 1].
pub fn load_images(
    manifest: &DatasetManifest,
    base: &Path,
    image_size: usize,
) -> Result<Vec<Sample>, DataError> {
    let mut samples = Vec::with_capacity(manifest.rows.len());
    for row in &manifest.rows {
        let full = base.join(&row.path);
        let img = image::open(&full).map_err(|e| DataError::BadImage {
            path: full.display().to_string(),
            msg: e.to_string(),
        })?;
        let resized = img.resize_exact(
            image_size as u32,
            image_size as u32,
            image::imageops::FilterType::Triangle,
        );
        let rgb = resized.to_rgb8();
        let image: Vec<f32> = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        samples.push(Sample {
            id: row.path.clone(),
            image,
            height: image_size,
            width: image_size,
            grade: row.grade,
            site: row.site,
            split: row.split,
        });
    }
    Ok(samples)
}

/// Save an H×W×3 [0,1] buffer as an 8-bit grayscale PNG (channel mean).
pub fn save_gray_png(path: &Path, image: &[f32], height: usize, width: usize) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(height * width);
    for px in image.chunks_exact(3) {
        let v = (px[0] + px[1] + px[2]) / 3.0;
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let gray = image::GrayImage::from_raw(width as u32, height as u32, bytes).ok_or_else(|| {
        DataError::BadImage {
            path: path.display().to_string(),
            msg: "pixel buffer does not match dimensions".to_string(),
        }
    })?;
    gray.save(path).map_err(|e| DataError::BadImage {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_manifest() -> DatasetManifest {
        DatasetManifest {
            rows: vec![
                ManifestRow {
                    path: "source/a.png".into(),
                    grade: 0,
                    site: Site::Source,
                    split: Split::Train,
                },
                ManifestRow {
                    path: "source/b.png".into(),
                    grade: 4,
                    site: Site::Source,
                    split: Split::Val,
                },
                ManifestRow {
                    path: "target/c.png".into(),
                    grade: 2,
                    site: Site::Target,
                    split: Split::Test,
                },
            ],
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let m = demo_manifest();
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn three_valid_rows_parse_in_order() {
        let text = "path,grade,site,split\na.png,0,source,train\nb.png,1,target,val\nc.png,3,source,test\n";
        let m = DatasetManifest::parse(text).unwrap();
        assert_eq!(m.rows.len(), 3);
        assert_eq!(m.rows[0].path, "a.png");
        assert_eq!(m.rows[1].grade, 1);
        assert_eq!(m.rows[2].split, Split::Test);
    }

    #[test]
    fn out_of_range_grade_names_line() {
        let text = "path,grade,site,split\na.png,0,source,train\nb.png,7,source,train\n";
        let err = DatasetManifest::parse(text).unwrap_err();
        assert_eq!(err.0, 3);
        assert!(err.1.contains("grade 7"), "{}", err.1);
    }

    #[test]
    fn bad_header_and_field_count_and_dupes_rejected() {
        assert_eq!(DatasetManifest::parse("path,grade,site\n").unwrap_err().0, 1);
        let err = DatasetManifest::parse("path,grade,site,split\na.png,0,source\n").unwrap_err();
        assert_eq!(err.0, 2);
        assert!(err.1.contains("found 3"));
        let err = DatasetManifest::parse(
            "path,grade,site,split\na.png,0,source,train\na.png,1,target,val\n",
        )
        .unwrap_err();
        assert_eq!(err.0, 3);
        assert!(err.1.contains("duplicate"));
    }

    #[test]
    fn unknown_site_or_split_rejected() {
        let err =
            DatasetManifest::parse("path,grade,site,split\na.png,0,clinic,train\n").unwrap_err();
        assert!(err.1.contains("clinic"));
        let err =
            DatasetManifest::parse("path,grade,site,split\na.png,0,source,holdout\n").unwrap_err();
        assert!(err.1.contains("holdout"));
    }

    #[test]
    fn comma_in_path_rejected_at_save() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = demo_manifest();
        m.rows[1].path = "bad,name.png".into();
        let err = m.save(&dir.path().join("m.csv")).unwrap_err();
        assert!(err.to_string().contains("delimiter"), "{err}");
    }

    #[test]
    fn missing_file_reports_path() {
        let err = DatasetManifest::load(Path::new("/nonexistent/m.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/m.csv"));
    }

    #[test]
    fn png_write_then_load_round_trips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let size = 16usize;
        let mut img = vec![0.0f32; size * size * 3];
        for y in 0..size {
            for x in 0..size {
                let v = (y * size + x) as f32 / (size * size) as f32;
                for c in 0..3 {
                    img[(y * size + x) * 3 + c] = v;
                }
            }
        }
        std::fs::create_dir(dir.path().join("imgs")).unwrap();
        save_gray_png(&dir.path().join("imgs/g.png"), &img, size, size).unwrap();
        let manifest = DatasetManifest {
            rows: vec![ManifestRow {
                path: "imgs/g.png".into(),
                grade: 1,
                site: Site::Target,
                split: Split::Train,
            }],
        };
        let samples = load_images(&manifest, dir.path(), size).unwrap();
        assert_eq!(samples.len(), 1);
        let s = &samples[0];
        assert_eq!(s.image.len(), size * size * 3);
        // 8-bit quantization is the only loss expected at matching size.
        for (a, b) in s.image.iter().zip(img.iter()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6, "{a} vs {b}");
        }
        assert_eq!(s.grade, 1);
        assert_eq!(s.site, Site::Target);
    }

    #[test]
    fn unreadable_image_names_its_path() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("junk.png"), b"not a png").unwrap();
        let manifest = DatasetManifest {
            rows: vec![ManifestRow {
                path: "junk.png".into(),
                grade: 0,
                site: Site::Source,
                split: Split::Train,
            }],
        };
        let err = load_images(&manifest, dir.path(), 16).unwrap_err();
        assert!(err.to_string().contains("junk.png"));
    }
}
