//! File formats: EMB1 binary embeddings, CSV embeddings, label lists,
//! prediction CSVs and flat `key=value` config files.
//!
//! EMB1 layout: the ASCII magic `EMB1`, `u32` row count, `u32` column
//! count (both little-endian), then `rows × cols` little-endian `f32` values
//! in row-major order. Nothing follows the payload.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::numeric::argmax;
use crate::types::{EmbeddingMatrix, SimplexAssignments};

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
const HEADER_LEN: u64 = 12;
/// Largest payload a header may declare.
pub const MAX_PAYLOAD_BYTES: u64 = 1 << 30;

/// Reads an EMB1 file without any normalization. Bit-exact inverse of
/// [`write_emb1`].
pub fn read_emb1_raw(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut header = [0u8; HEADER_LEN as usize];
    if file_len < HEADER_LEN {
        let mut magic = Vec::new();
        file.read_to_end(&mut magic)
            .map_err(|e| Error::io(path, e))?;
        if !EMB1_MAGIC.starts_with(&magic) {
            return Err(Error::BadMagic { path: path.into() });
        }
        return Err(Error::TruncatedFile {
            path: path.into(),
            expected: HEADER_LEN,
            found: file_len,
        });
    }
    file.read_exact(&mut header)
        .map_err(|e| Error::io(path, e))?;
    if &header[..4] != EMB1_MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as u64;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as u64;
    let expected = rows.saturating_mul(cols).saturating_mul(4);
    if expected > MAX_PAYLOAD_BYTES {
        return Err(Error::HeaderTooLarge {
            path: path.into(),
            bytes: expected,
            cap: MAX_PAYLOAD_BYTES,
        });
    }
    let found = file_len - HEADER_LEN;
    if found < expected {
        return Err(Error::TruncatedFile {
            path: path.into(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::TrailingData {
            path: path.into(),
            found: found - expected,
        });
    }
    let mut payload = vec![0u8; expected as usize];
    file.read_exact(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(
        Array2::from_shape_vec((rows as usize, cols as usize), values)
            .expect("payload length checked against header"),
    )
}

/// Writes a raw `f32` matrix as EMB1.
pub fn write_emb1(path: impl AsRef<Path>, data: ArrayView2<'_, f32>) -> Result<()> {
    let path = path.as_ref();
    let too_big = |n: usize| -> Result<u32> {
        u32::try_from(n).map_err(|_| Error::InvalidParameter {
            name: "matrix shape",
            reason: format!("{n} does not fit the u32 header field"),
        })
    };
    let rows = too_big(data.nrows())?;
    let cols = too_big(data.ncols())?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>, bytes: &[u8]| {
        out.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    write(&mut out, EMB1_MAGIC)?;
    write(&mut out, &rows.to_le_bytes())?;
    write(&mut out, &cols.to_le_bytes())?;
    for v in data.iter() {
        write(&mut out, &v.to_le_bytes())?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a comma-separated matrix, one row per line, uniform column count.
pub fn read_csv_raw(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut count = 0;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| Error::ParseError {
                path: path.into(),
                line: line_no + 1,
                message: format!("not a number: {:?}", field.trim()),
            })?;
            values.push(v);
            count += 1;
        }
        match cols {
            None => cols = Some(count),
            Some(expected) if expected != count => {
                return Err(Error::RaggedCsv {
                    path: path.into(),
                    line: line_no + 1,
                    expected,
                    found: count,
                })
            }
            Some(_) => {}
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Ok(Array2::from_shape_vec((rows, cols), values).expect("row lengths checked"))
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads an embedding file (`.csv` by extension, EMB1 otherwise) and
/// renormalizes its rows.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    if is_csv(path) {
        EmbeddingMatrix::new(read_csv_raw(path)?, "embedding file")
    } else {
        EmbeddingMatrix::from_f32(read_emb1_raw(path)?.view(), "embedding file")
    }
}

/// Writes embeddings as EMB1 (rounded to `f32`).
pub fn write_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_emb1(path, matrix.to_f32().view())
}

/// Newline-separated non-negative integers. A trailing newline is optional;
/// blank lines are errors.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path)
}

fn parse_labels(text: &str, path: &Path) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let body = text.strip_suffix('\n').unwrap_or(text);
    body.split('\n')
        .enumerate()
        .map(|(i, raw)| {
            let line = raw.strip_suffix('\r').unwrap_or(raw).trim();
            let parse_err = |message: String| Error::ParseError {
                path: path.into(),
                line: i + 1,
                message,
            };
            if line.is_empty() {
                return Err(parse_err("blank line".into()));
            }
            let value: i64 = line
                .parse()
                .map_err(|_| parse_err(format!("not an integer: {line:?}")))?;
            if value < 0 {
                return Err(Error::NegativeLabel {
                    path: path.into(),
                    line: i + 1,
                    value,
                });
            }
            usize::try_from(value).map_err(|_| parse_err(format!("label too large: {value}")))
        })
        .collect()
}

pub fn write_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `x` with 9 significant digits, formatted like C's `%.9g`.
pub fn format_sig9(x: f64) -> String {
    const PRECISION: i32 = 9;
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    fn trim(s: &str) -> &str {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.')
        } else {
            s
        }
    }
    if !(-4..PRECISION).contains(&exp) {
        format!("{}e{}", trim(mantissa), exp)
    } else {
        let decimals = (PRECISION - 1 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}")).to_string()
    }
}

/// Serializes predictions as CSV with header `index,pred,conf,p_0,...`.
pub fn format_predictions<W: Write>(
    assignments: &SimplexAssignments,
    mut out: W,
) -> std::io::Result<()> {
    let k = assignments.n_classes();
    let mut header = String::from("index,pred,conf");
    for c in 0..k {
        header.push_str(&format!(",p_{c}"));
    }
    writeln!(out, "{header}")?;
    for (i, row) in assignments.view().axis_iter(Axis(0)).enumerate() {
        let pred = argmax(row);
        let mut line = format!("{i},{pred},{}", format_sig9(row[pred]));
        for &p in row {
            line.push(',');
            line.push_str(&format_sig9(p));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()
}

pub fn write_predictions(assignments: &SimplexAssignments, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    format_predictions(assignments, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Reads the `pred` column of a predictions CSV.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut preds = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let parse_err = |message: String| Error::ParseError {
            path: path.into(),
            line: i + 1,
            message,
        };
        if i == 0 {
            if !line.starts_with("index,pred") {
                return Err(parse_err("missing predictions header".into()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let field = line
            .split(',')
            .nth(1)
            .ok_or_else(|| parse_err("missing pred column".into()))?;
        preds.push(
            field
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad class index {field:?}")))?,
        );
    }
    Ok(preds)
}

/// Parses a flat `key=value` file. Blank lines and `#` comments are
/// skipped; keys and values are trimmed.
pub fn read_config(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::ParseError {
            path: path.into(),
            line: i + 1,
            message: format!("expected key=value, got {line:?}"),
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

pub fn write_config(pairs: &[(String, String)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for (k, v) in pairs {
        text.push_str(&format!("{k}={v}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::path::PathBuf;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn write_bytes(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    fn emb1_bytes(rows: u32, cols: u32, payload_len: usize) -> Vec<u8> {
        let mut b = EMB1_MAGIC.to_vec();
        b.extend(rows.to_le_bytes());
        b.extend(cols.to_le_bytes());
        b.extend(std::iter::repeat_n(0u8, payload_len));
        b
    }

    #[test]
    fn emb1_shape_from_header() {
        let dir = tmp();
        let p = write_bytes(&dir, "a.emb", &emb1_bytes(2, 3, 24));
        assert_eq!(read_emb1_raw(&p).unwrap().dim(), (2, 3));
    }

    #[test]
    fn emb1_truncated_and_trailing() {
        let dir = tmp();
        let p = write_bytes(&dir, "a.emb", &emb1_bytes(2, 3, 23));
        assert!(matches!(
            read_emb1_raw(&p),
            Err(Error::TruncatedFile {
                expected: 24,
                found: 23,
                ..
            })
        ));
        let p = write_bytes(&dir, "b.emb", &emb1_bytes(2, 3, 25));
        assert!(matches!(
            read_emb1_raw(&p),
            Err(Error::TrailingData { found: 1, .. })
        ));
        let p = write_bytes(&dir, "c.emb", b"EMB");
        assert!(matches!(
            read_emb1_raw(&p),
            Err(Error::TruncatedFile { .. })
        ));
    }

    #[test]
    fn emb1_bad_magic_and_oversized_header() {
        let dir = tmp();
        let mut bytes = emb1_bytes(1, 1, 4);
        bytes[3] = b'2';
        let p = write_bytes(&dir, "a.emb", &bytes);
        assert!(matches!(read_emb1_raw(&p), Err(Error::BadMagic { .. })));
        let p = write_bytes(&dir, "b.emb", &emb1_bytes(u32::MAX, u32::MAX, 0));
        assert!(matches!(
            read_emb1_raw(&p),
            Err(Error::HeaderTooLarge { .. })
        ));
    }

    #[test]
    fn read_embeddings_normalizes_and_rejects_non_finite() {
        let dir = tmp();
        let p = dir.path().join("a.emb");
        write_emb1(&p, array![[3.0f32, 4.0]].view()).unwrap();
        assert!(matches!(
            read_embeddings(&p),
            Err(Error::NormTooFarFromUnit { .. })
        ));
        write_emb1(&p, array![[0.6f32, 0.8], [1.0, 0.0]].view()).unwrap();
        let m = read_embeddings(&p).unwrap();
        assert_eq!(m.n_rows(), 2);
        write_emb1(&p, array![[f32::NAN, 0.0]].view()).unwrap();
        assert!(matches!(
            read_embeddings(&p),
            Err(Error::NonFiniteValue { .. })
        ));
    }

    #[test]
    fn csv_embeddings_and_ragged_rows() {
        let dir = tmp();
        let p = write_bytes(&dir, "a.csv", b"1,0\n0.6,0.8\n");
        assert_eq!(read_embeddings(&p).unwrap().dim(), 2);
        let p = write_bytes(&dir, "b.csv", b"1,0\n0.6,0.8,0\n");
        assert!(matches!(
            read_embeddings(&p),
            Err(Error::RaggedCsv { line: 2, .. })
        ));
    }

    #[test]
    fn labels_parse_strictly() {
        let p = Path::new("x");
        assert_eq!(parse_labels("0\n1\n2\n", p).unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_labels("0\n1\n2", p).unwrap(), vec![0, 1, 2]);
        assert!(matches!(
            parse_labels("0\n\n1\n", p),
            Err(Error::ParseError { line: 2, .. })
        ));
        assert!(matches!(
            parse_labels("0\n-1\n", p),
            Err(Error::NegativeLabel { value: -1, .. })
        ));
        assert!(matches!(
            parse_labels("a\n", p),
            Err(Error::ParseError { .. })
        ));
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.75), "0.75");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(2.5e-7), "2.5e-7");
        assert_eq!(format_sig9(0.999_999_999_7), "1");
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(123456789.4), "123456789");
    }

    #[test]
    fn prediction_rows_serialize_directly() {
        let z = SimplexAssignments::new(array![[0.25, 0.75]]).unwrap();
        let mut buf = Vec::new();
        format_predictions(&z, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "index,pred,conf,p_0,p_1\n0,1,0.75,0.25,0.75\n"
        );

        let z = SimplexAssignments::new(array![[1.0], [1.0]]).unwrap();
        let mut buf = Vec::new();
        format_predictions(&z, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "index,pred,conf,p_0\n0,0,1,1\n1,0,1,1\n"
        );
    }

    #[test]
    fn config_round_trip_and_errors() {
        let dir = tmp();
        let p = dir.path().join("run.cfg");
        let pairs = vec![
            ("tau".to_string(), "30".to_string()),
            ("knn".into(), "3".into()),
        ];
        write_config(&pairs, &p).unwrap();
        assert_eq!(read_config(&p).unwrap(), pairs);
        let bad = write_bytes(&dir, "bad.cfg", b"# comment\n\ntau 30\n");
        assert!(matches!(
            read_config(&bad),
            Err(Error::ParseError { line: 3, .. })
        ));
    }
}
