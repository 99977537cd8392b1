//! On-disk formats: 8-bit PNG images, single-channel PFM depth/disparity
//! maps and Middlebury `.flo` flow fields.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::warp::FlowField;

const FLO_MAGIC: f32 = 202021.25;

/// Reads an 8-bit PNG into `[0, 1]` floats (`v / 255`). Gray images stay
/// single-channel; alpha is dropped.
pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
    );
    if gray {
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        let data = g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Image::new(h as usize, w as usize, 1, data)
    } else {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Image::new(h as usize, w as usize, 3, data)
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `round(v * 255)` as an 8-bit PNG (gray or RGB).
pub fn write_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let res = if img.channels() == 1 {
        image::GrayImage::from_raw(w, h, bytes)
            .expect("buffer size matches")
            .save(path)
    } else {
        image::RgbImage::from_raw(w, h, bytes)
            .expect("buffer size matches")
            .save(path)
    };
    res.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a validity mask as a gray PNG (255 = valid).
pub fn write_mask_png(path: impl AsRef<Path>, valid: &[bool], height: usize, width: usize) -> Result<()> {
    let data = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    write_png(path, &Image::new(height, width, 1, data)?)
}

pub fn read_mask_png(path: impl AsRef<Path>) -> Result<Vec<bool>> {
    let img = read_png(path)?;
    Ok(img.luminance().into_iter().map(|v| v >= 0.5).collect())
}

/// A decoded single-channel PFM grid, rows top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Reads a single-channel (`Pf`) PFM. Rows are stored bottom-to-top on disk
/// and returned top-to-bottom; the scale sign selects endianness.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<FloatGrid> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = BufReader::new(file);
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if rd.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::format(path, "truncated PFM header"));
        }
        tokens.extend(line.split_whitespace().map(str::to_owned));
    }
    if tokens[0] != "Pf" {
        return Err(Error::format(
            path,
            format!("expected single-channel PFM 'Pf', found '{}'", tokens[0]),
        ));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::format(path, format!("bad PFM dimension '{s}'")))
    };
    let width = parse(&tokens[1])?;
    let height = parse(&tokens[2])?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::format(path, "bad PFM scale"))?;
    let little = scale < 0.0;
    let mut raw = vec![0u8; width * height * 4];
    rd.read_exact(&mut raw)
        .map_err(|_| Error::format(path, "truncated PFM payload"))?;
    let mut data = vec![0.0; width * height];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (row, col) = (i / width, i % width);
        data[(height - 1 - row) * width + col] = v as f64;
    }
    Ok(FloatGrid {
        height,
        width,
        data,
    })
}

/// Writes a little-endian single-channel PFM.
pub fn write_pfm(path: impl AsRef<Path>, grid: &FloatGrid) -> Result<()> {
    let path = path.as_ref();
    let mut buf = format!("Pf\n{} {}\n-1.0\n", grid.width, grid.height).into_bytes();
    for row in (0..grid.height).rev() {
        for col in 0..grid.width {
            buf.extend_from_slice(&(grid.data[row * grid.width + col] as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a Middlebury `.flo` file (little-endian).
pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::format(path, "truncated .flo header"));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(Error::format(path, "bad .flo magic"));
    }
    let width = i32::from_le_bytes(word(4));
    let height = i32::from_le_bytes(word(8));
    if width <= 0 || height <= 0 {
        return Err(Error::format(path, "bad .flo dimensions"));
    }
    let (w, h) = (width as usize, height as usize);
    if bytes.len() != 12 + 8 * w * h {
        return Err(Error::format(path, "wrong .flo payload size"));
    }
    let data = (0..2 * w * h)
        .map(|i| f32::from_le_bytes(word(12 + 4 * i)) as f64)
        .collect();
    FlowField::new(h, w, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = flow.dims();
    let mut buf = Vec::with_capacity(12 + 8 * w * h);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(w as i32).to_le_bytes());
    buf.extend_from_slice(&(h as i32).to_le_bytes());
    for &v in flow.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Sorted `*.png` file names in a directory.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, 3, |y, x, c| ((y * 31 + x * 17 + c * 5) % 256) as f64 / 255.0).unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back.dims(), (5, 7));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pfm_round_trip_preserves_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let grid = FloatGrid {
            height: 2,
            width: 3,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5],
        };
        let p = dir.path().join("d.pfm");
        write_pfm(&p, &grid).unwrap();
        let raw = fs::read(&p).unwrap();
        // first stored row is the bottom one
        let first = f32::from_le_bytes([raw[12], raw[13], raw[14], raw[15]]);
        assert_eq!(first, 4.0);
        assert_eq!(read_pfm(&p).unwrap(), grid);
    }

    #[test]
    fn flo_round_trip_and_magic() {
        let dir = tempfile::tempdir().unwrap();
        let flow = FlowField::new(2, 2, vec![1.0, -1.0, 0.5, 0.25, 3.0, 0.0, -2.0, 8.0]).unwrap();
        let p = dir.path().join("f.flo");
        write_flo(&p, &flow).unwrap();
        let raw = fs::read(&p).unwrap();
        assert_eq!(f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]), 202021.25);
        assert_eq!(read_flo(&p).unwrap(), flow);
        fs::write(&p, [0u8; 20]).unwrap();
        assert!(read_flo(&p).is_err());
    }
}
