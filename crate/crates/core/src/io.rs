//! File formats: DFLO rasters, DPC1/CSV point clouds, calibration JSON, PNG.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{CalibratedRig, PointCloud, Vec3};
use crate::raster::Field;

pub const DFLO_MAGIC: &[u8; 4] = b"DFLO";
pub const DPC1_MAGIC: &[u8; 4] = b"DPC1";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err("truncated header"))
}

/// Values are stored as f32; encoding rounds each sample.
pub fn encode_dflo(field: &Field) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * field.len());
    out.extend_from_slice(DFLO_MAGIC);
    for d in [field.width(), field.height(), field.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in field.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode_dflo(bytes: &[u8]) -> Result<Field> {
    if bytes.len() < 16 || &bytes[..4] != DFLO_MAGIC {
        return Err(format_err("missing DFLO magic"));
    }
    let w = read_u32(bytes, 4)? as usize;
    let h = read_u32(bytes, 8)? as usize;
    let c = read_u32(bytes, 12)? as usize;
    let n = w
        .checked_mul(h)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| format_err("raster dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() != 4 * n {
        return Err(format_err(format!(
            "DFLO body has {} bytes, expected {} for {w}x{h}x{c}",
            body.len(),
            4 * n
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Field::from_vec(w, h, c, data)
}

pub fn write_dflo(path: &Path, field: &Field) -> Result<()> {
    fs::write(path, encode_dflo(field))?;
    Ok(())
}

pub fn read_dflo(path: &Path) -> Result<Field> {
    decode_dflo(&fs::read(path)?)
}

pub fn encode_dpc1(points: &[Vec3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 12 * points.len());
    out.extend_from_slice(DPC1_MAGIC);
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for &x in p {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_dpc1(bytes: &[u8]) -> Result<Vec<Vec3>> {
    if bytes.len() < 8 || &bytes[..4] != DPC1_MAGIC {
        return Err(format_err("missing DPC1 magic"));
    }
    let n = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != 12 * n {
        return Err(format_err(format!(
            "DPC1 body has {} bytes, expected {} for {n} points",
            body.len(),
            12 * n
        )));
    }
    Ok(body
        .chunks_exact(12)
        .map(|b| {
            let f = |k: usize| f32::from_le_bytes(b[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
            [f(0), f(1), f(2)]
        })
        .collect())
}

/// CSV with header `x,y,z`.
pub fn decode_cloud_csv(text: &str) -> Result<Vec<Vec3>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| format_err("empty CSV cloud"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != ["x", "y", "z"] {
        return Err(format_err(format!("CSV cloud header must be x,y,z, got `{header}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format_err(format!("CSV cloud row {}: {e}", i + 1)))?;
            match vals[..] {
                [x, y, z] => Ok([x, y, z]),
                _ => Err(format_err(format!("CSV cloud row {}: expected 3 values", i + 1))),
            }
        })
        .collect()
}

/// Reads a DPC1 file, or a CSV file when the magic is absent.
pub fn read_cloud(path: &Path, epoch: u64) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    let points = if bytes.starts_with(DPC1_MAGIC) {
        decode_dpc1(&bytes)?
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| format_err("cloud is neither DPC1 nor UTF-8 CSV"))?;
        decode_cloud_csv(text)?
    };
    PointCloud::new(points, epoch)
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_dpc1(&cloud.points))?;
    Ok(())
}

pub fn read_rig(path: &Path) -> Result<CalibratedRig> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn write_rig(path: &Path, rig: &CalibratedRig) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(rig)?)?;
    Ok(())
}

/// Loads a PNG as values in [0, 1]: one channel for gray input, three
/// otherwise. Alpha is dropped.
pub fn read_png(path: &Path) -> Result<Field> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let eight_bit = img.color().bytes_per_pixel() / img.color().channel_count() == 1;
    let (channels, data): (usize, Vec<f64>) = match (img.color().has_color(), eight_bit) {
        (true, true) => (3, img.to_rgb8().into_raw().into_iter().map(|x| x as f64 / 255.0).collect()),
        (false, true) => (1, img.to_luma8().into_raw().into_iter().map(|x| x as f64 / 255.0).collect()),
        (true, false) => (3, img.to_rgb16().into_raw().into_iter().map(|x| x as f64 / 65535.0).collect()),
        (false, false) => (1, img.to_luma16().into_raw().into_iter().map(|x| x as f64 / 65535.0).collect()),
    };
    Field::from_vec(w, h, channels, data)
}

pub fn read_png_gray(path: &Path) -> Result<Field> {
    let f = read_png(path)?;
    Ok(if f.channels() == 1 { f } else { f.to_gray() })
}

/// Writes channel 0 as 8-bit gray, clamped to [0, 1].
pub fn write_png_gray(path: &Path, field: &Field) -> Result<()> {
    let buf: Vec<u8> = (0..field.num_pixels())
        .map(|i| (field.data()[i * field.channels()].clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(field.width() as u32, field.height() as u32, buf)
        .ok_or_else(|| format_err("image buffer size"))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dflo_round_trip_is_exact_for_f32_values() {
        let f = Field::from_fn(5, 3, 2, |u, v, c| (u as f64 - 2.0) * 0.25 + v as f64 * 8.0 - c as f64);
        let back = decode_dflo(&encode_dflo(&f)).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn dflo_layout() {
        let f = Field::from_vec(2, 1, 1, vec![1.0, -2.0]).unwrap();
        let b = encode_dflo(&f);
        assert_eq!(&b[..4], b"DFLO");
        assert_eq!(&b[4..16], &[2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn dflo_rejects_truncation() {
        let f = Field::zeros(3, 3, 1);
        let b = encode_dflo(&f);
        assert!(decode_dflo(&b[..b.len() - 1]).is_err());
        assert!(decode_dflo(b"DFL").is_err());
    }

    #[test]
    fn dpc1_round_trip() {
        let pts = vec![[1.5, -2.0, 30.25], [0.0, 0.125, 12.0]];
        assert_eq!(decode_dpc1(&encode_dpc1(&pts)).unwrap(), pts);
        let mut bad = encode_dpc1(&pts);
        bad.truncate(bad.len() - 4);
        assert!(decode_dpc1(&bad).is_err());
    }

    #[test]
    fn csv_cloud() {
        let pts = decode_cloud_csv("x,y,z\n1,2,3\n-0.5, 4 ,5e1\n").unwrap();
        assert_eq!(pts, vec![[1.0, 2.0, 3.0], [-0.5, 4.0, 50.0]]);
        assert!(decode_cloud_csv("a,b,c\n1,2,3\n").is_err());
        assert!(decode_cloud_csv("x,y,z\n1,2\n").is_err());
    }

    #[test]
    fn png_gray_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let f = Field::from_fn(7, 4, 1, |u, v, _| (u * 4 + v) as f64 / 31.0);
        write_png_gray(&path, &f).unwrap();
        let back = read_png_gray(&path).unwrap();
        for (a, b) in f.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            assert_eq!((b * 255.0).fract(), 0.0);
        }
    }

    #[test]
    fn rig_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.json");
        let rig = CalibratedRig::identity(200.0, 210.0, 64.0, 40.0, 128, 80).unwrap();
        write_rig(&path, &rig).unwrap();
        assert_eq!(read_rig(&path).unwrap(), rig);
    }
}
