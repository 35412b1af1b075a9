use std::fs;
use std::path::Path;

use s2wmamba::Tensor;

/// All bands side by side as an 8-bit binary graymap, stretched to the
/// image's min..max.
pub fn write_pgm(path: &Path, img: &Tensor) -> anyhow::Result<()> {
    let (c, h, w) = img.chw()?;
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let width = c * w;
    let mut out = format!("P5\n{width} {h}\n255\n").into_bytes();
    for y in 0..h {
        for b in 0..c {
            for x in 0..w {
                let v = (img.plane(b)[y * w + x] - lo) / span;
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let img = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        write_pgm(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"P5\n8 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 24);
        assert_eq!(bytes[header.len()], 0);
        assert_eq!(*bytes.last().unwrap(), 255);
    }
}
