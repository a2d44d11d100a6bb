//! Binary PGM (P5) and PPM (P6) readers and writers, maxval 255.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, one byte per pixel.
    pub pixels: Vec<u8>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, three bytes per pixel.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage { width, height, pixels: vec![0; width * height] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, pixels: vec![0; 3 * width * height] }
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3, h, w]` doubles in `[0, 1]`.
    pub fn to_planar_f64(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.pixels[3 * p + c] as f64 / 255.0;
            }
        }
        out
    }
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.pixels)?;
    Ok(())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.pixels)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> std::io::Result<GrayImage> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let (magic, w, h, maxval, data) = parse_header(&bytes, path)?;
    if magic != b"P5" {
        return Err(bad_data(path, "expected P5 magic"));
    }
    if maxval != 255 {
        return Err(bad_data(path, "expected maxval 255"));
    }
    if data.len() < w * h {
        return Err(bad_data(path, "truncated pixel data"));
    }
    Ok(GrayImage { width: w, height: h, pixels: data[..w * h].to_vec() })
}

pub fn read_ppm(path: &Path) -> std::io::Result<RgbImage> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let (magic, w, h, maxval, data) = parse_header(&bytes, path)?;
    if magic != b"P6" {
        return Err(bad_data(path, "expected P6 magic"));
    }
    if maxval != 255 {
        return Err(bad_data(path, "expected maxval 255"));
    }
    if data.len() < 3 * w * h {
        return Err(bad_data(path, "truncated pixel data"));
    }
    Ok(RgbImage { width: w, height: h, pixels: data[..3 * w * h].to_vec() })
}

fn bad_data(path: &Path, msg: &str) -> std::io::Error {
    std::io::Error::new(
        std::io::ErrorKind::InvalidData,
        format!("{}: {msg}", path.display()),
    )
}

/// Returns (magic, width, height, maxval, raster bytes). Comments and any
/// whitespace runs are accepted between header tokens.
fn parse_header<'a>(
    bytes: &'a [u8],
    path: &Path,
) -> std::io::Result<(&'a [u8], usize, usize, u32, &'a [u8])> {
    if bytes.len() < 2 {
        return Err(bad_data(path, "file too short"));
    }
    let magic = &bytes[..2];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad_data(path, "malformed header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text.parse().map_err(|_| bad_data(path, "bad header number"))?;
    }
    // exactly one whitespace byte separates maxval from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad_data(path, "missing raster separator"));
    }
    pos += 1;
    Ok((magic, fields[0], fields[1], fields[2] as u32, &bytes[pos..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mut img = GrayImage::new(5, 3);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = (i * 17 % 256) as u8;
        }
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn ppm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.ppm");
        let mut img = RgbImage::new(4, 2);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = (i * 31 % 256) as u8;
        }
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5\n# a comment\n2 1\n255\n\x07\x0a").unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.pixels, vec![7, 10]);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\nxy").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn planar_conversion_orders_channels_first() {
        let mut img = RgbImage::new(2, 1);
        img.set(0, 0, [255, 0, 51]);
        img.set(0, 1, [0, 255, 102]);
        let f = img.to_planar_f64();
        assert_eq!(f.len(), 6);
        assert_eq!(f[0], 1.0); // r plane
        assert_eq!(f[1], 0.0);
        assert_eq!(f[2], 0.0); // g plane
        assert_eq!(f[3], 1.0);
        assert!((f[4] - 0.2).abs() < 1e-12); // b plane
        assert!((f[5] - 0.4).abs() < 1e-12);
    }
}
