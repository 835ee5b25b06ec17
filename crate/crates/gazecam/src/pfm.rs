//! Portable float map (PFM) reading and writing, grayscale variant.
//!
//! Header: `Pf\n<width> <height>\n<scale>\n`, where a negative scale means
//! little-endian. Pixel data is 32-bit floats, rows stored bottom-to-top.
//! This is the interchange format for fixation maps and activation maps so
//! they stay comparable at full float precision.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Writes a [h, w] map. Values are narrowed to f32.
pub fn write_pfm(path: &Path, map: &Tensor) -> Result<()> {
    if map.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "pfm expects a [h, w] map, got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(out, "Pf\n{w} {h}\n-1.0\n").map_err(io)?;
    for row in (0..h).rev() {
        for &v in &map.data()[row * w..(row + 1) * w] {
            out.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)?;
    Ok(())
}

/// Reads a grayscale PFM back into a [h, w] tensor.
pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);

    let mut header = Vec::new();
    let mut newlines = 0;
    let mut byte = [0u8; 1];
    while newlines < 3 {
        r.read_exact(&mut byte).map_err(io)?;
        if byte[0] == b'\n' {
            newlines += 1;
        }
        header.push(byte[0]);
    }
    let header = String::from_utf8(header)
        .map_err(|_| Error::Data(format!("{}: pfm header is not UTF-8", path.display())))?;
    let mut lines = header.lines();
    let magic = lines.next().unwrap_or("");
    if magic != "Pf" {
        return Err(Error::Data(format!(
            "{}: not a grayscale pfm (magic '{magic}')",
            path.display()
        )));
    }
    let dims = lines.next().unwrap_or("");
    let mut parts = dims.split_whitespace();
    let parse_dim = |s: Option<&str>| -> Result<usize> {
        s.and_then(|v| v.parse().ok()).ok_or_else(|| {
            Error::Data(format!("{}: bad pfm dimensions '{dims}'", path.display()))
        })
    };
    let w = parse_dim(parts.next())?;
    let h = parse_dim(parts.next())?;
    if w == 0 || h == 0 {
        return Err(Error::Data(format!(
            "{}: pfm dimensions must be positive",
            path.display()
        )));
    }
    let scale: f64 = lines
        .next()
        .unwrap_or("")
        .trim()
        .parse()
        .map_err(|_| Error::Data(format!("{}: bad pfm scale", path.display())))?;
    let little_endian = scale < 0.0;

    let mut raw = vec![0u8; w * h * 4];
    r.read_exact(&mut raw).map_err(io)?;
    let mut data = vec![0.0; w * h];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        let row = h - 1 - i / w;
        let col = i % w;
        data[row * w + col] = v as f64;
    }
    Tensor::new(vec![h, w], data)
}
