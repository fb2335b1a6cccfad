//! Binary PPM (P6) frames and binary PGM (P5) label masks, maxval 255.

use std::fs;
use std::path::Path;

use super::{ImageFrame, LabelMask};
use crate::{Error, Result};

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!(
            "expected {} header",
            std::str::from_utf8(magic).unwrap_or("?")
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header number".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("header number out of range")?;
    }
    if fields[2] != 255 {
        return Err(format!("unsupported maxval {}", fields[2]));
    }
    // exactly one whitespace byte before the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        data_offset: pos + 1,
    })
}

fn read_raster(path: &Path, magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(&bytes, magic).map_err(|m| Error::format(path, m))?;
    let need = header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format(path, "image dimensions overflow"))?;
    let raster = &bytes[header.data_offset..];
    if raster.len() < need {
        return Err(Error::format(
            path,
            format!("truncated raster: {} of {need} bytes", raster.len()),
        ));
    }
    Ok((header.width, header.height, raster[..need].to_vec()))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageFrame> {
    let path = path.as_ref();
    let (w, h, rgb) = read_raster(path, b"P6", 3)?;
    ImageFrame::new(w, h, rgb).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let (w, h, ids) = read_raster(path, b"P5", 1)?;
    LabelMask::new(w, h, ids)
}

pub fn write_ppm(path: impl AsRef<Path>, frame: &ImageFrame) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P6\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend_from_slice(frame.rgb());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: impl AsRef<Path>, mask: &LabelMask) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.ids());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<u8> = (0..8 * 9 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let frame = ImageFrame::new(8, 9, rgb).unwrap();
        write_ppm(dir.path().join("a.ppm"), &frame).unwrap();
        assert_eq!(read_ppm(dir.path().join("a.ppm")).unwrap(), frame);

        let mask = LabelMask::new(3, 2, vec![0, 1, 2, 255, 0, 1]).unwrap();
        write_pgm(dir.path().join("m.pgm"), &mask).unwrap();
        assert_eq!(read_pgm(dir.path().join("m.pgm")).unwrap(), mask);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"P5 # c\n2 # w\n1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2]);
        std::fs::write(dir.path().join("c.pgm"), bytes).unwrap();
        assert_eq!(read_pgm(dir.path().join("c.pgm")).unwrap().ids(), &[1, 2]);
    }

    #[test]
    fn truncated_raster_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\n\x01\x02").unwrap();
        let err = read_pgm(&path).unwrap_err().to_string();
        assert!(err.contains("t.pgm") && err.contains("truncated"), "{err}");
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        std::fs::write(&path, b"P5\n8 8\n255\n").unwrap();
        assert!(read_ppm(&path).is_err());
    }
}
