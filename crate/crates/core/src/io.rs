//! File formats: feature matrices, box streams, and the small CSV tables
//! (constraints, clusters, labels) passed between subcommands.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{BoxObservation, BoxSource, ConstraintSet, FeatureMatrix, Rect, Tracklet};

pub const FEATURE_MAGIC: &[u8; 4] = b"FEAT";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 16;

pub const BOXES_HEADER: [&str; 8] = [
    "frame",
    "x",
    "y",
    "w",
    "h",
    "source",
    "feature_index",
    "identity",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Binary,
    Csv,
}

impl FeatureFormat {
    /// `.bin` and `.feat` are binary, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("feat") => FeatureFormat::Binary,
            _ => FeatureFormat::Csv,
        }
    }
}

impl FromStr for FeatureFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" | "bin" => Ok(Self::Binary),
            "csv" => Ok(Self::Csv),
            other => Err(Error::InvalidParameter(format!("unknown feature format {other:?}"))),
        }
    }
}

pub fn load_features(
    path: &Path,
    format: FeatureFormat,
    expected_dims: Option<usize>,
) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let matrix = match format {
        FeatureFormat::Binary => decode_binary_features(&bytes)?,
        FeatureFormat::Csv => parse_csv_features(&bytes, &path.display().to_string())?,
    };
    if let Some(dims) = expected_dims {
        matrix.expect_dims(dims)?;
    }
    Ok(matrix)
}

pub fn decode_binary_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::BadHeader(format!(
            "need {FEATURE_HEADER_LEN} header bytes, found {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::BadHeader("missing FEAT magic".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::BadHeader(format!("unsupported version {version}")));
    }
    let (n, f) = (word(8) as usize, word(12) as usize);
    if n == 0 || f == 0 {
        return Err(Error::EmptyMatrix);
    }
    let payload = &bytes[FEATURE_HEADER_LEN..];
    let expected = n * f * 4;
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::BadHeader(format!(
            "{} trailing bytes after {n}x{f} payload",
            payload.len() - expected
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureMatrix::new(n, f, values)
}

/// Values are narrowed to `f32`; matrices loaded from binary round-trip exactly.
pub fn encode_binary_features(matrix: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + matrix.values().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.n_items() as u32).to_le_bytes());
    out.extend_from_slice(&(matrix.n_dims() as u32).to_le_bytes());
    for v in matrix.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn save_features(path: &Path, matrix: &FeatureMatrix, format: FeatureFormat) -> Result<()> {
    match format {
        FeatureFormat::Binary => {
            fs::write(path, encode_binary_features(matrix)).map_err(|e| Error::io(path, e))
        }
        FeatureFormat::Csv => {
            let mut w = create(path)?;
            for i in 0..matrix.n_items() {
                let line: Vec<String> = matrix.row(i).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

pub fn parse_csv_features(bytes: &[u8], context: &str) -> Result<FeatureMatrix> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::parse(context, 0, e.to_string()))?;
    let mut values = Vec::new();
    let mut n_dims = None;
    let mut n_items = 0;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        n_items += 1;
        let mut cols = 0;
        for (col, cell) in line.split(',').enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::parse(context, line_no + 1, format!("column {}: bad number {cell:?}", col + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: n_items,
                    col: col + 1,
                });
            }
            values.push(v);
            cols += 1;
        }
        match n_dims {
            None => n_dims = Some(cols),
            Some(d) if d != cols => {
                return Err(Error::parse(
                    context,
                    line_no + 1,
                    format!("expected {d} columns, found {cols}"),
                ))
            }
            _ => {}
        }
    }
    FeatureMatrix::new(n_items, n_dims.unwrap_or(0), values)
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}

/// Data rows of a headerless-or-headed numeric CSV. A first row whose first
/// cell does not parse as a number is treated as a header and skipped.
/// `#` starts a comment line.
pub(crate) fn numeric_rows(text: &str, context: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(context, k + 1, e.to_string()))?;
        let line = rec.position().map_or(k + 1, |p| p.line() as usize);
        let cells: Vec<String> = rec.iter().map(str::to_owned).collect();
        if rows.is_empty() && k == 0 && cells.first().is_some_and(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        if cells.iter().all(|c| c.is_empty()) {
            continue;
        }
        rows.push((line, cells));
    }
    Ok(rows)
}

pub(crate) fn parse_cell<T: FromStr>(cells: &[String], col: usize, context: &str, line: usize) -> Result<T> {
    let cell = cells
        .get(col)
        .ok_or_else(|| Error::parse(context, line, format!("missing column {}", col + 1)))?;
    cell.parse()
        .map_err(|_| Error::parse(context, line, format!("column {}: cannot parse {cell:?}", col + 1)))
}

/// Boxes file contents. `tracklet_ids` is present when the file carries a
/// `tracklet_id` column (fusion output).
#[derive(Debug, Clone, Default)]
pub struct BoxTable {
    pub boxes: Vec<BoxObservation>,
    pub tracklet_ids: Option<Vec<usize>>,
}

impl BoxTable {
    /// Per-row join key: tracklet id when present, else feature index, else
    /// row number.
    pub fn item_keys(&self) -> Vec<usize> {
        match &self.tracklet_ids {
            Some(ids) => ids.clone(),
            None => self
                .boxes
                .iter()
                .enumerate()
                .map(|(k, b)| b.feature_index.unwrap_or(k))
                .collect(),
        }
    }

    /// Groups rows into tracklets ordered by tracklet id, observations by
    /// frame. Requires the `tracklet_id` column.
    pub fn tracklets(&self) -> Result<Vec<Tracklet>> {
        let ids = self
            .tracklet_ids
            .as_ref()
            .ok_or_else(|| Error::MissingField("tracklet_id column".into()))?;
        let mut groups: BTreeMap<usize, Vec<BoxObservation>> = BTreeMap::new();
        for (b, &id) in self.boxes.iter().zip(ids) {
            groups.entry(id).or_default().push(b.clone());
        }
        Ok(groups
            .into_iter()
            .map(|(id, mut observations)| {
                observations.sort_by_key(|o| o.frame);
                Tracklet {
                    id,
                    observations,
                    provisional_tail: 0,
                }
            })
            .collect())
    }
}

pub fn read_boxes(path: &Path) -> Result<BoxTable> {
    let text = read_to_string(path)?;
    parse_boxes(&text, &path.display().to_string())
}

pub fn parse_boxes(text: &str, context: &str) -> Result<BoxTable> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(context, 1, e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 8];
    for (slot, name) in idx.iter_mut().zip(BOXES_HEADER) {
        *slot = col(name).ok_or_else(|| Error::BadHeader(format!("{context}: missing column {name:?}")))?;
    }
    let tracklet_col = col("tracklet_id");

    let mut table = BoxTable {
        boxes: Vec::new(),
        tracklet_ids: tracklet_col.map(|_| Vec::new()),
    };
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(context, k + 2, e.to_string()))?;
        let line = rec.position().map_or(k + 2, |p| p.line() as usize);
        let cells: Vec<String> = rec.iter().map(str::to_owned).collect();
        let num = |c: usize| parse_cell::<f64>(&cells, c, context, line);
        let frame: u64 = parse_cell(&cells, idx[0], context, line)?;
        let rect = Rect::new(num(idx[1])?, num(idx[2])?, num(idx[3])?, num(idx[4])?)
            .map_err(|e| Error::parse(context, line, e.to_string()))?;
        let source: BoxSource = cells[idx[5]]
            .parse()
            .map_err(|e: Error| Error::parse(context, line, e.to_string()))?;
        let feature_index = optional(&cells, idx[6])
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::parse(context, line, format!("bad feature_index {s:?}")))
            })
            .transpose()?;
        let identity = optional(&cells, idx[7]).map(str::to_owned);
        table.boxes.push(BoxObservation {
            frame,
            rect,
            source,
            feature_index,
            identity,
        });
        if let (Some(c), Some(ids)) = (tracklet_col, table.tracklet_ids.as_mut()) {
            ids.push(parse_cell(&cells, c, context, line)?);
        }
    }
    Ok(table)
}

fn optional(cells: &[String], col: usize) -> Option<&str> {
    cells.get(col).map(String::as_str).filter(|s| !s.is_empty())
}

fn box_record(b: &BoxObservation) -> Vec<String> {
    vec![
        b.frame.to_string(),
        b.rect.x.to_string(),
        b.rect.y.to_string(),
        b.rect.w.to_string(),
        b.rect.h.to_string(),
        b.source.to_string(),
        b.feature_index.map(|i| i.to_string()).unwrap_or_default(),
        b.identity.clone().unwrap_or_default(),
    ]
}

pub fn write_boxes(path: &Path, boxes: &[BoxObservation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let wrap = |e: csv::Error| Error::io(path, e.into());
    w.write_record(BOXES_HEADER).map_err(wrap)?;
    for b in boxes {
        w.write_record(box_record(b)).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Boxes CSV with the extra `tracklet_id,confirmed` columns.
pub fn write_tracklet_boxes(path: &Path, tracklets: &[Tracklet]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let wrap = |e: csv::Error| Error::io(path, e.into());
    let mut header: Vec<&str> = BOXES_HEADER.to_vec();
    header.extend(["tracklet_id", "confirmed"]);
    w.write_record(&header).map_err(wrap)?;
    for t in tracklets {
        for o in &t.observations {
            let mut rec = box_record(o);
            rec.push(t.id.to_string());
            rec.push(u8::from(o.is_confirmed()).to_string());
            w.write_record(&rec).map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_constraints(path: &Path) -> Result<ConstraintSet> {
    let text = read_to_string(path)?;
    let context = path.display().to_string();
    let mut set = ConstraintSet::new();
    for (line, cells) in numeric_rows(&text, &context)? {
        let a: usize = parse_cell(&cells, 0, &context, line)?;
        let b: usize = parse_cell(&cells, 1, &context, line)?;
        set.insert(a, b);
    }
    Ok(set)
}

pub fn write_constraints(path: &Path, constraints: &ConstraintSet) -> Result<()> {
    let mut w = create(path)?;
    let wrap = |e| Error::io(path, e);
    writeln!(w, "i,j").map_err(wrap)?;
    for (a, b) in constraints.iter() {
        writeln!(w, "{a},{b}").map_err(wrap)?;
    }
    w.flush().map_err(wrap)
}

/// `item_index,cluster_id`, ids as given (callers renumber).
pub fn write_clusters(path: &Path, assignment: &[usize]) -> Result<()> {
    let mut w = create(path)?;
    let wrap = |e| Error::io(path, e);
    writeln!(w, "item_index,cluster_id").map_err(wrap)?;
    for (i, c) in assignment.iter().enumerate() {
        writeln!(w, "{i},{c}").map_err(wrap)?;
    }
    w.flush().map_err(wrap)
}

/// Sparse `(item_index, cluster_id)` pairs as written by [`write_clusters`].
pub fn read_clusters(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = read_to_string(path)?;
    let context = path.display().to_string();
    numeric_rows(&text, &context)?
        .into_iter()
        .map(|(line, cells)| Ok((parse_cell(&cells, 0, &context, line)?, parse_cell(&cells, 1, &context, line)?)))
        .collect()
}

/// `item_index,label` rows; labels are free-form strings.
pub fn read_labels(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = read_to_string(path)?;
    let context = path.display().to_string();
    numeric_rows(&text, &context)?
        .into_iter()
        .map(|(line, cells)| {
            let item = parse_cell(&cells, 0, &context, line)?;
            let label = cells
                .get(1)
                .filter(|s| !s.is_empty())
                .cloned()
                .ok_or_else(|| Error::parse(&context, line, "missing label"))?;
            Ok((item, label))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_two_by_three() {
        let m = parse_csv_features(b"1,2,3\n4,5,6", "t").unwrap();
        assert_eq!((m.n_items(), m.n_dims()), (2, 3));
        assert_eq!(m.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn csv_nan_reports_position() {
        let err = parse_csv_features(b"1,nan,3\n4,5,6", "t").unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 1, col: 2 }), "{err}");
        assert!(err.to_string().contains("row 1, col 2"));
    }

    #[test]
    fn csv_ragged_rows() {
        assert!(matches!(
            parse_csv_features(b"1,2\n3", "t"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn binary_empty_matrix() {
        let mut bytes = FEATURE_MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        let err = decode_binary_features(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "empty matrix");
    }

    #[test]
    fn binary_truncated_and_bad_magic() {
        let m = FeatureMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_binary_features(&m);
        assert!(matches!(
            decode_binary_features(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { expected: 16, found: 15 })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_binary_features(&bad), Err(Error::BadHeader(_))));
    }

    #[test]
    fn binary_header_is_little_endian() {
        let m = FeatureMatrix::new(1, 1, vec![1.0]).unwrap();
        let bytes = encode_binary_features(&m);
        assert_eq!(
            bytes,
            [b'F', b'E', b'A', b'T', 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0x80, 0x3f]
        );
    }

    #[test]
    fn boxes_with_empty_optionals() {
        let text = "frame,x,y,w,h,source,feature_index,identity\n\
                    3,1,2,10,10,detector,,\n\
                    4,1,2,10,10,tracker,7,alice\n";
        let t = parse_boxes(text, "t").unwrap();
        assert_eq!(t.boxes.len(), 2);
        assert_eq!(t.boxes[0].feature_index, None);
        assert_eq!(t.boxes[0].identity, None);
        assert_eq!(t.boxes[1].feature_index, Some(7));
        assert_eq!(t.boxes[1].identity.as_deref(), Some("alice"));
        assert!(t.tracklet_ids.is_none());
    }

    #[test]
    fn boxes_reject_zero_width() {
        let text = "frame,x,y,w,h,source,feature_index,identity\n0,0,0,0,5,detector,,\n";
        assert!(parse_boxes(text, "t").is_err());
    }
}
