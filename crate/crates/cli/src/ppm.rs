//! Binary PPM (P6) heat images with a small five-stop color ramp.

use anyhow::Result;
use std::io::Write;
use std::path::Path;

/// Dark blue -> blue -> cyan -> yellow -> red.
const STOPS: [[f64; 3]; 5] = [
    [13.0, 8.0, 135.0],
    [84.0, 39.0, 143.0],
    [0.0, 170.0, 170.0],
    [240.0, 220.0, 60.0],
    [220.0, 30.0, 30.0],
];

/// Map t in [0,1] to an RGB triple along the ramp.
pub fn colorize(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        rgb[c] = (STOPS[i][c] + f * (STOPS[i + 1][c] - STOPS[i][c])).round() as u8;
    }
    rgb
}

/// Write a width x height P6 image; `values` are row-major intensities in
/// [0,1], top row first.
pub fn write_p6(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    anyhow::ensure!(
        values.len() == width * height,
        "have {} values for {}x{} image",
        values.len(),
        width,
        height
    );
    let mut buf = Vec::with_capacity(32 + 3 * values.len());
    write!(buf, "P6\n{width} {height}\n255\n")?;
    for &v in values {
        buf.extend_from_slice(&colorize(v));
    }
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_size_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        write_p6(&path, 3, 2, &[0.0, 0.25, 0.5, 0.75, 1.0, 0.9]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), b"P6\n3 2\n255\n".len() + 18);
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(colorize(0.0), [13, 8, 135]);
        assert_eq!(colorize(1.0), [220, 30, 30]);
    }
}
