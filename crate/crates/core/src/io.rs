//! File formats: 8-bit PGM (P5, maxval 255), raw little-endian float64 with a
//! 16-byte header, and whitespace-separated plain-text matrices.
//!
//! Raw float64 layout: bytes `0..7` hold `STSLF64`, byte 7 is zero, bytes
//! `8..12` and `12..16` hold the row and column counts as little-endian `u32`,
//! followed by `rows * cols` row-major `f64` values.

use std::io::{Read, Write};

use crate::{Error, Matrix, Result};

pub const F64_MAGIC: &[u8; 7] = b"STSLF64";

/// Row-major image with explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("image data", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }
}

/// Writes a P5 PGM, mapping `[lo, hi]` linearly onto `0..=255` with clamping.
pub fn write_pgm<W: Write>(out: &mut W, image: &Image, range: (f64, f64)) -> Result<()> {
    let (lo, hi) = range;
    if !(hi > lo) {
        return Err(Error::InvalidParameter(format!("invalid PGM range [{lo}, {hi}]")));
    }
    write!(out, "P5\n{} {}\n255\n", image.cols, image.rows)?;
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|&v| {
            let t = if v.is_nan() { 0.0 } else { (v - lo) / (hi - lo) };
            (t.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Reads a P5 PGM with maxval ≤ 255 into values scaled to `[0, 1]`.
pub fn read_pgm<R: Read>(input: &mut R) -> Result<Image> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        tokens.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(Error::Format(format!("expected P5 magic, found {:?}", tokens[0])));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("invalid PGM {what}: {s:?}")))
    };
    let cols = parse(&tokens[1], "width")?;
    let rows = parse(&tokens[2], "height")?;
    let maxval = parse(&tokens[3], "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let pixels = buf
        .get(pos..pos + rows * cols)
        .ok_or_else(|| Error::Format("truncated PGM raster".into()))?;
    let data = pixels.iter().map(|&b| b as f64 / maxval as f64).collect();
    Image::new(rows, cols, data)
}

pub fn write_f64<W: Write>(out: &mut W, matrix: &Matrix) -> Result<()> {
    let rows = u32::try_from(matrix.nrows())
        .map_err(|_| Error::Format("too many rows for raw float64 header".into()))?;
    let cols = u32::try_from(matrix.ncols())
        .map_err(|_| Error::Format("too many columns for raw float64 header".into()))?;
    out.write_all(F64_MAGIC)?;
    out.write_all(&[0])?;
    out.write_all(&rows.to_le_bytes())?;
    out.write_all(&cols.to_le_bytes())?;
    for r in 0..matrix.nrows() {
        for c in 0..matrix.ncols() {
            out.write_all(&matrix[(r, c)].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_f64<R: Read>(input: &mut R) -> Result<Matrix> {
    let mut header = [0u8; 16];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::Format("truncated raw float64 header".into()))?;
    if &header[..7] != F64_MAGIC {
        return Err(Error::Format("missing STSLF64 magic".into()));
    }
    let rows = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != rows * cols * 8 {
        return Err(Error::Format(format!(
            "raw float64 body has {} bytes, header implies {}",
            body.len(),
            rows * cols * 8
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    Ok(Matrix::from_row_iterator(rows, cols, values))
}

/// One row per line, whitespace-separated, full round-trip precision.
pub fn write_text_matrix<W: Write>(out: &mut W, matrix: &Matrix) -> Result<()> {
    for r in 0..matrix.nrows() {
        let line: Vec<String> = (0..matrix.ncols()).map(|c| format!("{:e}", matrix[(r, c)])).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Parses whitespace-separated rows; blank lines and `#` comments are skipped.
pub fn parse_text_matrix(text: &str) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: invalid number {t:?}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Format(format!(
                    "line {}: expected {} columns, found {}",
                    lineno + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    Ok(Matrix::from_row_iterator(rows.len(), cols, rows.into_iter().flatten()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let img = Image::new(2, 3, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let mut bytes = Vec::new();
        write_pgm(&mut bytes, &img, (0.0, 1.0)).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let back = read_pgm(&mut bytes.as_slice()).unwrap();
        assert_eq!((back.rows, back.cols), (2, 3));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, -0.1, f64::MIN_POSITIVE, 3e300]);
        let mut bytes = Vec::new();
        write_f64(&mut bytes, &m).unwrap();
        assert_eq!(bytes.len(), 16 + 32);
        assert_eq!(&bytes[..8], b"STSLF64\0");
        assert_eq!(read_f64(&mut bytes.as_slice()).unwrap(), m);
        assert!(read_f64(&mut &bytes[..20]).is_err());
    }

    #[test]
    fn text_matrix_round_trip_and_errors() {
        let m = Matrix::from_row_slice(2, 3, &[0.1, 2.0, -3.5, 1e-17, 0.0, 7.25]);
        let mut bytes = Vec::new();
        write_text_matrix(&mut bytes, &m).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(parse_text_matrix(&text).unwrap(), m);
        let err = parse_text_matrix("1 2\n# c\n3\n").unwrap_err();
        assert!(err.to_string().contains("line 3"));
    }
}
