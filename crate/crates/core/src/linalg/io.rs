//! Matrix serialization: CSV, a raw binary matrix format, and a
//! checksummed multi-section container. Layouts are described in
//! `docs/formats.md`.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::Mat;
use crate::error::{Error, Result};
use crate::numerics::Grid;

pub const MAT_MAGIC: &[u8; 4] = b"FBMT";
const MAT_VERSION: u16 = 1;
const MAT_HEADER: usize = 24;

const CONTAINER_MAGIC: &[u8; 4] = b"FBCT";
const CONTAINER_VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

/// Writes `#grid=<g>,rows=<r>,cols=<c>` followed by one line per row.
///
/// Values use Rust's shortest round-trip representation, so parsing the
/// file gives back the same bits.
pub fn write_csv(m: &Mat, mut out: impl Write) -> Result<()> {
    writeln!(
        out,
        "#grid={},rows={},cols={}",
        m.grid().name(),
        m.rows(),
        m.cols()
    )?;
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|x| format!("{x:?}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_csv(text: &str) -> Result<Mat> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty matrix CSV".into()))?;
    let header = header.strip_prefix('#').ok_or_else(|| {
        Error::Format(format!("matrix CSV header must start with '#': {header:?}"))
    })?;
    let (mut grid, mut rows, mut cols) = (None, None, None);
    for field in header.split(',') {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header field {field:?}")))?;
        let bad = || Error::Format(format!("bad header value {field:?}"));
        match key.trim() {
            "grid" => grid = Some(Grid::parse(value.trim()).ok_or_else(bad)?),
            "rows" => rows = Some(value.trim().parse::<usize>().map_err(|_| bad())?),
            "cols" => cols = Some(value.trim().parse::<usize>().map_err(|_| bad())?),
            _ => return Err(Error::Format(format!("unknown header key {key:?}"))),
        }
    }
    let grid = grid.ok_or_else(|| Error::Format("header lacks grid".into()))?;
    let mut data = Vec::new();
    let mut seen_rows = 0;
    for (n, line) in lines.enumerate() {
        for tok in line.split(',') {
            let x: f64 = tok
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad number {tok:?}", n + 2)))?;
            data.push(x);
        }
        seen_rows += 1;
    }
    let rows = rows.unwrap_or(seen_rows);
    let cols = cols.unwrap_or(data.len().checked_div(rows).unwrap_or(0));
    if seen_rows != rows && cols != 0 {
        return Err(Error::Format(format!(
            "expected {rows} rows, found {seen_rows}"
        )));
    }
    Mat::new(rows, cols, data, grid)
}

/// Raw binary matrix: 24-byte header then little-endian f64 payload.
pub fn write_mat(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAT_HEADER + 8 * m.data().len());
    out.extend_from_slice(MAT_MAGIC);
    out.extend_from_slice(&MAT_VERSION.to_le_bytes());
    out.push(m.grid().tag());
    out.push(0);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

pub fn read_mat(bytes: &[u8]) -> Result<Mat> {
    if bytes.len() < MAT_HEADER || &bytes[..4] != MAT_MAGIC {
        return Err(Error::Format("not a binary matrix (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported matrix version {version}"
        )));
    }
    let grid = Grid::from_tag(bytes[6])
        .ok_or_else(|| Error::Format(format!("unknown grid tag {}", bytes[6])))?;
    let rows = u64_at(bytes, 8) as usize;
    let cols = u64_at(bytes, 16) as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("matrix dimensions overflow".into()))?;
    if bytes.len() != MAT_HEADER + 8 * count {
        return Err(Error::Format(format!(
            "matrix payload is {} bytes, expected {}",
            bytes.len() - MAT_HEADER,
            8 * count
        )));
    }
    let data = bytes[MAT_HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Mat::new(rows, cols, data, grid)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Named byte sections with a trailing SHA-256 over everything before it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    sections: Vec<(String, Vec<u8>)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.sections.push((name.into(), bytes));
    }

    pub fn push_mat(&mut self, name: impl Into<String>, m: &Mat) {
        self.push(name, write_mat(m));
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }

    pub fn mat(&self, name: &str) -> Result<Option<Mat>> {
        self.get(name).map(read_mat).transpose()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        let index_len: usize = self.sections.iter().map(|(n, _)| 2 + n.len() + 16).sum();
        let mut offset = (12 + index_len) as u64;
        for (name, bytes) in &self.sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            offset += bytes.len() as u64;
        }
        for (_, bytes) in &self.sections {
            out.extend_from_slice(bytes);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < DIGEST_LEN {
            return Err(Error::Checksum {
                stored: "<missing>".into(),
                computed: hex(&Sha256::digest(bytes)),
            });
        }
        let (body, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let computed = Sha256::digest(body);
        if computed.as_slice() != stored {
            return Err(Error::Checksum {
                stored: hex(stored),
                computed: hex(&computed),
            });
        }
        if body.len() < 12 || &body[..4] != CONTAINER_MAGIC {
            return Err(Error::Format("not a container (bad magic)".into()));
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version}"
            )));
        }
        let count = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
        let truncated = || Error::Format("container index is truncated".into());
        let mut at = 12;
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            let len_bytes = body.get(at..at + 2).ok_or_else(truncated)?;
            let name_len = u16::from_le_bytes([len_bytes[0], len_bytes[1]]) as usize;
            at += 2;
            let name = body.get(at..at + name_len).ok_or_else(truncated)?;
            let name = String::from_utf8(name.to_vec())
                .map_err(|_| Error::Format("section name is not UTF-8".into()))?;
            at += name_len;
            if body.len() < at + 16 {
                return Err(truncated());
            }
            let offset = u64_at(body, at) as usize;
            let len = u64_at(body, at + 8) as usize;
            at += 16;
            let payload = offset
                .checked_add(len)
                .and_then(|end| body.get(offset..end))
                .ok_or_else(|| Error::Format(format!("section {name:?} lies outside the file")))?;
            sections.push((name, payload.to_vec()));
        }
        Ok(Container { sections })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Mat {
        Mat::new(
            2,
            3,
            vec![0.1, -0.0, 1e-300, f64::MIN_POSITIVE / 3.0, 12345.678, -7.0],
            Grid::F64,
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let m = sample();
        let mut buf = Vec::new();
        write_csv(&m, &mut buf).unwrap();
        let back = read_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert!(back.bits_eq(&m));
        assert_eq!(back.grid(), Grid::F64);
        assert!(read_csv("1,2\n").is_err());
    }

    #[test]
    fn csv_rejects_off_grid_values() {
        assert!(read_csv("#grid=b16,rows=1,cols=1\n0.1\n").is_err());
        assert!(read_csv("#grid=b16,rows=1,cols=2\n0.5,-2.25\n").is_ok());
    }

    #[test]
    fn binary_round_trip() {
        let m = sample();
        let bytes = write_mat(&m);
        assert_eq!(&bytes[..4], MAT_MAGIC);
        assert_eq!(bytes.len(), 24 + 6 * 8);
        assert!(read_mat(&bytes).unwrap().bits_eq(&m));
        assert!(read_mat(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn container_round_trip_and_corruption() {
        let mut c = Container::new();
        c.push_mat("a", &sample());
        c.push("meta", b"{\"k\":1}".to_vec());
        c.push("empty", Vec::new());
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert!(back.mat("a").unwrap().unwrap().bits_eq(&sample()));
        assert_eq!(back.names().collect::<Vec<_>>(), ["a", "meta", "empty"]);

        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(
            Container::from_bytes(truncated),
            Err(Error::Checksum { .. })
        ));
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(
            Container::from_bytes(&flipped),
            Err(Error::Checksum { .. })
        ));
        assert!(matches!(
            Container::from_bytes(&bytes[..3]),
            Err(Error::Checksum { .. })
        ));
    }
}
