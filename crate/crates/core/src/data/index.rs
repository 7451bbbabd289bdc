use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NO_FINDING: &str = "No Finding";

/// Ordered class vocabulary plus the subset that carries box annotations
/// used for localization scoring.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassList {
    names: Vec<String>,
    localizable: Vec<bool>,
}

const NIH_CLASSES: [&str; 15] = [
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural_Thickening",
    "Hernia",
    NO_FINDING,
];

/// Spellings used by the NIH box file that differ from the label file.
const ALIASES: [(&str, &str); 1] = [("Infiltrate", "Infiltration")];

impl ClassList {
    pub fn new(names: Vec<String>, localizable: Vec<bool>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("class list is empty".into()));
        }
        if names.len() != localizable.len() {
            return Err(Error::Config("localizable flags do not match class count".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.trim().is_empty() || !seen.insert(n.as_str()) {
                return Err(Error::Config(format!("invalid or duplicate class name {n:?}")));
            }
        }
        Ok(Self { names, localizable })
    }

    /// All classes localizable.
    pub fn from_names<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let localizable = vec![true; names.len()];
        Self::new(names, localizable)
    }

    /// The 14 NIH ChestX-ray14 findings plus "No Finding"; the first eight carry boxes.
    pub fn nih() -> Self {
        let names = NIH_CLASSES.iter().map(|s| s.to_string()).collect();
        let localizable = (0..NIH_CLASSES.len()).map(|i| i < 8).collect();
        Self { names, localizable }
    }

    /// One class per line. A line of the form `Name,localize` marks the class
    /// as localizable; when no line carries the marker every class is.
    /// The literal path `nih` selects the built-in NIH list.
    pub fn from_file(path: &Path) -> Result<Self> {
        if path.as_os_str() == "nih" {
            return Ok(Self::nih());
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut names = Vec::new();
        let mut marks = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once(',') {
                Some((name, flag)) if flag.trim() == "localize" => {
                    names.push(name.trim().to_string());
                    marks.push(true);
                }
                Some(_) => return Err(Error::format(path, format!("bad class line {line:?}"))),
                None => {
                    names.push(line.to_string());
                    marks.push(false);
                }
            }
        }
        if !marks.iter().any(|&m| m) {
            marks.iter_mut().for_each(|m| *m = true);
        }
        Self::new(names, marks).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_file_contents(&self) -> String {
        let all = self.localizable.iter().all(|&l| l);
        let mut out = String::new();
        for (n, &l) in self.names.iter().zip(&self.localizable) {
            out.push_str(n);
            if l && !all {
                out.push_str(",localize");
            }
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn is_localizable(&self, id: usize) -> bool {
        self.localizable[id]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let name = ALIASES
            .iter()
            .find(|(alias, _)| *alias == name)
            .map_or(name, |(_, canonical)| canonical);
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: String,
    /// Relative to the dataset image directory.
    pub path: PathBuf,
    pub labels: Vec<u8>,
    pub split: Split,
    pub patient_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BBoxAnnotation {
    pub image_id: String,
    pub class_id: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    /// False when the class is outside the localization subset; such boxes
    /// are kept but not scored.
    pub localizable: bool,
}

impl BBoxAnnotation {
    /// Integer pixel span `[x0, x1) x [y0, y1)` covered by the box.
    pub fn pixel_span(&self) -> (usize, usize, usize, usize) {
        let x0 = self.x.round().max(0.0) as usize;
        let y0 = self.y.round().max(0.0) as usize;
        let x1 = ((self.x + self.w).round() as usize).max(x0 + 1);
        let y1 = ((self.y + self.h).round() as usize).max(y0 + 1);
        (x0, y0, x1, y1)
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Reads `Image Index,Finding Labels[,Patient ID,...]`. Labels are `|`-separated.
pub fn load_label_index(csv_path: &Path, classes: &ClassList) -> Result<Vec<ImageRecord>> {
    let mut rdr = open_csv(csv_path)?;
    let headers = rdr.headers().map_err(|e| csv_err(csv_path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("Image Index")
        .ok_or_else(|| Error::format(csv_path, "missing column `Image Index`"))?;
    let label_col = col("Finding Labels")
        .ok_or_else(|| Error::format(csv_path, "missing column `Finding Labels`"))?;
    let patient_col = col("Patient ID");

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (row_no, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| csv_err(csv_path, e))?;
        let line = row_no + 2;
        let image_id = row
            .get(id_col)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::format(csv_path, format!("row {line}: missing image id")))?
            .to_string();
        if !seen.insert(image_id.clone()) {
            return Err(Error::format(
                csv_path,
                format!("row {line}: duplicate image id {image_id}"),
            ));
        }
        let mut labels = vec![0u8; classes.len()];
        for token in row.get(label_col).unwrap_or("").split('|') {
            let token = token.trim();
            if token.is_empty() {
                continue;
            }
            match classes.index_of(token) {
                Some(c) => labels[c] = 1,
                // without a dedicated slot a healthy image is simply all-negative
                None if token == NO_FINDING => {}
                None => {
                    return Err(Error::format(
                        csv_path,
                        format!("row {line} ({image_id}): unknown class {token:?}"),
                    ))
                }
            }
        }
        let patient_id = patient_col
            .and_then(|c| row.get(c))
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        out.push(ImageRecord {
            path: PathBuf::from(&image_id),
            image_id,
            labels,
            split: Split::Train,
            patient_id,
        });
    }
    Ok(out)
}

/// Reads `Image Index,Finding Label,x,y,w,h` (the NIH header spells the last
/// four as `Bbox [x,y,w,h]`); columns are taken positionally.
pub fn load_bbox_index(csv_path: &Path, classes: &ClassList) -> Result<Vec<BBoxAnnotation>> {
    let mut rdr = open_csv(csv_path)?;
    let headers = rdr.headers().map_err(|e| csv_err(csv_path, e))?.clone();
    if headers.len() < 6 {
        return Err(Error::format(
            csv_path,
            "expected columns image id, class, x, y, w, h",
        ));
    }
    let mut out = Vec::new();
    for (row_no, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| csv_err(csv_path, e))?;
        let line = row_no + 2;
        let fail = |msg: String| Error::format(csv_path, format!("row {line}: {msg}"));
        if row.iter().all(str::is_empty) {
            continue;
        }
        let image_id = row.get(0).unwrap_or("").to_string();
        let class_name = row.get(1).unwrap_or("");
        let class_id = classes
            .index_of(class_name)
            .ok_or_else(|| fail(format!("unknown class {class_name:?}")))?;
        let mut nums = [0.0f64; 4];
        for (k, v) in nums.iter_mut().enumerate() {
            let raw = row.get(2 + k).unwrap_or("");
            *v = raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| fail(format!("bad number {raw:?}")))?;
        }
        let [x, y, w, h] = nums;
        if x < 0.0 || y < 0.0 {
            return Err(fail(format!("negative box origin ({x}, {y})")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(fail(format!("non-positive box extent ({w}, {h})")));
        }
        out.push(BBoxAnnotation {
            image_id,
            class_id,
            x,
            y,
            w,
            h,
            localizable: classes.is_localizable(class_id),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn parses_multi_label_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "l.csv",
            "Image Index,Finding Labels,Patient ID\na.png,Effusion|Mass,1\nb.png,No Finding,2\n",
        );
        let nih = ClassList::nih();
        let recs = load_label_index(&p, &nih).unwrap();
        let eff = nih.index_of("Effusion").unwrap();
        let mass = nih.index_of("Mass").unwrap();
        let nf = nih.index_of(NO_FINDING).unwrap();
        assert_eq!(recs[0].labels.iter().map(|&v| v as usize).sum::<usize>(), 2);
        assert_eq!(recs[0].labels[eff], 1);
        assert_eq!(recs[0].labels[mass], 1);
        assert_eq!(recs[1].labels.iter().map(|&v| v as usize).sum::<usize>(), 1);
        assert_eq!(recs[1].labels[nf], 1);
        assert_eq!(recs[1].patient_id.as_deref(), Some("2"));
    }

    #[test]
    fn typo_in_label_names_row_and_token() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "l.csv", "Image Index,Finding Labels\nc.png,Efusion\n");
        let err = load_label_index(&p, &ClassList::nih()).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        assert!(err.contains("Efusion"), "{err}");
    }

    #[test]
    fn missing_label_column_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "l.csv", "Image Index,Labels\nc.png,Mass\n");
        let err = load_label_index(&p, &ClassList::nih()).unwrap_err().to_string();
        assert!(err.contains("Finding Labels"));
    }

    #[test]
    fn bbox_rows_parse_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "b.csv",
            "Image Index,Finding Label,Bbox [x,y,w,h],,,\nimg1,Mass,100,200,50,60\nimg1,Mass,100,200,50,60\nimg2,Infiltrate,1,2,3,4\nimg3,Edema,1,1,5,5\n",
        );
        let nih = ClassList::nih();
        let b = load_bbox_index(&p, &nih).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b[0], b[1]);
        assert_eq!((b[0].x, b[0].y, b[0].w, b[0].h), (100.0, 200.0, 50.0, 60.0));
        assert_eq!(b[0].class_id, nih.index_of("Mass").unwrap());
        assert_eq!(b[2].class_id, nih.index_of("Infiltration").unwrap());
        // Edema has no boxes in the localization subset: kept but flagged
        assert!(!b[3].localizable);
        assert!(b[0].localizable);

        let bad = write(dir.path(), "bad.csv", "a,b,c,d,e,f\nimg1,Mass,100,200,-5,60\n");
        assert!(load_bbox_index(&bad, &nih).is_err());
    }

    #[test]
    fn class_file_markers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.txt", "A,localize\nB\n# comment\nC,localize\n");
        let cl = ClassList::from_file(&p).unwrap();
        assert_eq!(cl.len(), 3);
        assert!(cl.is_localizable(0) && !cl.is_localizable(1) && cl.is_localizable(2));
        let p2 = write(dir.path(), "d.txt", &cl.to_file_contents());
        assert_eq!(ClassList::from_file(&p2).unwrap(), cl);
        let p3 = write(dir.path(), "e.txt", "A\nB\n");
        assert!(ClassList::from_file(&p3).unwrap().is_localizable(1));
    }
}
