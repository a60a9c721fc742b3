//! Embedding file formats: CSV (`label, v1, ..., vD`) and the binary EMB1 layout.
//!
//! EMB1, little-endian:
//!
//! ```text
//! magic "EMB1" | u16 version=1 | u8 flags (bit0: names) | u8 reserved=0
//! u64 N | u32 D | N*D f32 row-major | N u32 labels
//! [u32 name count | per name: u16 byte length + UTF-8]
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use dml_core::{EmbeddingSet, Matrix};

use crate::error::{Result, ToolError};

pub const MAGIC: [u8; 4] = *b"EMB1";
pub const VERSION: u16 = 1;
const FLAG_NAMES: u8 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 8 + 4;

pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<EmbeddingSet> {
    let bytes = fs::read(path)?;
    parse_csv(&bytes, has_header)
}

/// Rows keep file order. Every row must have the same number of values.
pub fn parse_csv(input: &[u8], has_header: bool) -> Result<EmbeddingSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dim: Option<usize> = None;
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| {
            let line = e.position().map(|p| p.line());
            ToolError::format(line, e.to_string())
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let d = record.len().saturating_sub(1);
        match dim {
            None if d == 0 => return Err(ToolError::format(Some(line), "row has a label but no values")),
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(ToolError::format(Some(line), format!("expected {expected} values, found {d}")))
            }
            Some(_) => {}
        }
        let label: u32 = record[0].parse().map_err(|_| ToolError::Value {
            line,
            column: 1,
            message: format!("label {:?} is not a non-negative integer", &record[0]),
        })?;
        labels.push(label);
        for (j, field) in record.iter().enumerate().skip(1) {
            let v: f64 = field.parse().map_err(|_| ToolError::Value {
                line,
                column: j as u64 + 1,
                message: format!("cannot parse {field:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(ToolError::Value {
                    line,
                    column: j as u64 + 1,
                    message: format!("non-finite value {field}"),
                });
            }
            data.push(v);
        }
    }
    let Some(dim) = dim else {
        return Err(ToolError::EmptyInput);
    };
    let n = labels.len();
    Ok(EmbeddingSet::new(Matrix::from_vec(n, dim, data)?, labels)?)
}

pub fn save_csv(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_io)?;
    let mut fields = Vec::with_capacity(set.dim() + 1);
    for (i, &label) in set.labels().iter().enumerate() {
        fields.clear();
        fields.push(label.to_string());
        // `{}` on f64 prints the shortest string that parses back exactly
        fields.extend(set.row(i).iter().map(|v| v.to_string()));
        w.write_record(&fields).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> ToolError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => ToolError::Io(io),
        other => ToolError::format(None, format!("{other:?}")),
    }
}

pub fn save_binary(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_binary(set)?)?;
    w.flush()?;
    Ok(())
}

/// Values are narrowed to f32.
pub fn encode_binary(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let (n, d) = (set.len(), set.dim());
    let d32 = u32::try_from(d).map_err(|_| ToolError::format(None, format!("dimension {d} exceeds u32")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + n * d * 4 + n * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(if set.class_names().is_some() { FLAG_NAMES } else { 0 });
    out.push(0);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for &v in set.data().as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in set.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    if let Some(names) = set.class_names() {
        out.extend_from_slice(&(names.len() as u32).to_le_bytes());
        for name in names {
            let len = u16::try_from(name.len())
                .map_err(|_| ToolError::format(None, format!("class name of {} bytes is too long", name.len())))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
    }
    Ok(out)
}

pub fn load_binary(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    decode_binary(&fs::read(path)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            ToolError::Truncated(format!(
                "{what} needs {len} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

pub fn decode_binary(buf: &[u8]) -> Result<EmbeddingSet> {
    if buf.is_empty() {
        return Err(ToolError::EmptyInput);
    }
    let prefix = &buf[..buf.len().min(4)];
    if prefix != &MAGIC[..prefix.len()] {
        return Err(ToolError::format(None, format!("bad magic {prefix:02x?}")));
    }
    let mut c = Cursor { buf, pos: 0 };
    c.take(4, "magic")?;
    let version = u16::from_le_bytes(c.array("version")?);
    if version != VERSION {
        return Err(ToolError::Version(version));
    }
    let [flags] = c.array::<1>("flags")?;
    let [reserved] = c.array::<1>("reserved byte")?;
    if flags & !FLAG_NAMES != 0 || reserved != 0 {
        return Err(ToolError::format(None, format!("unknown flags {flags:#04x} / reserved {reserved:#04x}")));
    }
    let n = u64::from_le_bytes(c.array("row count")?);
    let d = u32::from_le_bytes(c.array("dimension")?) as usize;
    let n = usize::try_from(n).map_err(|_| ToolError::format(None, format!("row count {n} too large")))?;
    let cells = n.checked_mul(d).ok_or_else(|| ToolError::format(None, format!("{n}x{d} overflows")))?;
    let value_bytes = cells.checked_mul(4).ok_or_else(|| ToolError::format(None, format!("{n}x{d} overflows")))?;

    let raw = c.take(value_bytes, "embedding values")?;
    let data: Vec<f64> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    let raw = c.take(n * 4, "labels")?;
    let labels: Vec<u32> = raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();

    let names = if flags & FLAG_NAMES != 0 {
        let count = u32::from_le_bytes(c.array("name count")?) as usize;
        let mut names = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let len = u16::from_le_bytes(c.array("name length")?) as usize;
            let bytes = c.take(len, "class name")?;
            let name = std::str::from_utf8(bytes)
                .map_err(|e| ToolError::format(None, format!("class name {i} is not UTF-8: {e}")))?;
            names.push(name.to_owned());
        }
        Some(names)
    } else {
        None
    };
    if c.pos != buf.len() {
        return Err(ToolError::format(None, format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(EmbeddingSet::with_names(Matrix::from_vec(n, d, data)?, labels, names)?)
}

/// `.csv` files are parsed as CSV, anything else as EMB1.
pub fn load_any(path: impl AsRef<Path>, has_header: bool) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    if is_csv(path) {
        load_csv(path, has_header)
    } else {
        load_binary(path)
    }
}

pub fn save_any(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_csv(path) {
        save_csv(set, path)
    } else {
        save_binary(set, path)
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(names: Option<Vec<String>>) -> EmbeddingSet {
        let m = Matrix::from_rows(&[[0.5, -1.25], [3.0, 0.125], [-2.0, 7.0]]).unwrap();
        EmbeddingSet::with_names(m, vec![0, 1, 1], names).unwrap()
    }

    #[test]
    fn parses_two_rows() {
        let s = parse_csv(b"0,1.0,0.0\n1,0.0,1.0\n", false).unwrap();
        assert_eq!((s.len(), s.dim()), (2, 2));
        assert_eq!(s.labels(), &[0, 1]);
        assert_eq!(s.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn header_is_skipped() {
        let s = parse_csv(b"label,a,b\n3, 1.5 , 2\n", true).unwrap();
        assert_eq!(s.labels(), &[3]);
        assert_eq!(s.row(0), &[1.5, 2.0]);
    }

    #[test]
    fn ragged_row_reports_line() {
        let err = parse_csv(b"0,1,2\n1,1,2,3\n", false).unwrap_err();
        assert!(matches!(err, ToolError::Format { line: crate::error::Line(Some(2)), .. }), "{err:?}");
    }

    #[test]
    fn bad_values_report_position() {
        let err = parse_csv(b"0,1,2\n1,1,inf\n", false).unwrap_err();
        assert!(matches!(err, ToolError::Value { line: 2, column: 3, .. }), "{err:?}");
        let err = parse_csv(b"-1,1,2\n", false).unwrap_err();
        assert!(matches!(err, ToolError::Value { line: 1, column: 1, .. }), "{err:?}");
        let err = parse_csv(b"0,1,x\n", false).unwrap_err();
        assert!(matches!(err, ToolError::Value { line: 1, column: 3, .. }), "{err:?}");
    }

    #[test]
    fn empty_input() {
        assert!(matches!(parse_csv(b"", false), Err(ToolError::EmptyInput)));
        assert!(matches!(parse_csv(b"a,b\n", true), Err(ToolError::EmptyInput)));
    }

    #[test]
    fn binary_round_trip_with_names() {
        let s = set(Some(vec!["cat".into(), "vögel".into()]));
        let back = decode_binary(&encode_binary(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn binary_header_layout() {
        let bytes = encode_binary(&set(None)).unwrap();
        assert_eq!(&bytes[..4], &[0x45, 0x4d, 0x42, 0x31]);
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), HEADER_LEN + 3 * 2 * 4 + 3 * 4);
    }

    #[test]
    fn binary_errors() {
        let good = encode_binary(&set(None)).unwrap();
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_binary(&bad), Err(ToolError::Format { .. })));
        assert!(matches!(decode_binary(&good[..HEADER_LEN]), Err(ToolError::Truncated(_))));
        assert!(matches!(decode_binary(&good[..2]), Err(ToolError::Truncated(_))));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode_binary(&v2), Err(ToolError::Version(2))));
        let mut extra = good;
        extra.push(0);
        assert!(matches!(decode_binary(&extra), Err(ToolError::Format { .. })));
    }
}
