use std::path::Path;

use crate::training::write_atomic;
use crate::{Error, Result};

/// Binary (P5) PGM of `images: [N×(h·w)]` laid out `cols` per row with a
/// one-pixel black border around every tile.
pub fn encode_pgm_grid(images: &[f64], n: usize, h: usize, w: usize, cols: usize) -> Result<Vec<u8>> {
    if n == 0 || h == 0 || w == 0 || cols == 0 {
        return Err(Error::invalid("image grid needs at least one non-empty image and column"));
    }
    if images.len() != n * h * w {
        return Err(Error::invalid(format!("{} pixels for {n} images of {h}×{w}", images.len())));
    }
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut pix = vec![0u8; gh * gw];
    for k in 0..n {
        let (r0, c0) = ((k / cols) * (h + 1) + 1, (k % cols) * (w + 1) + 1);
        for i in 0..h {
            for j in 0..w {
                let v = images[k * h * w + i * w + j];
                pix[(r0 + i) * gw + c0 + j] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let mut out = format!("P5\n{gw} {gh}\n255\n").into_bytes();
    out.extend(pix);
    Ok(out)
}

pub fn write_pgm_grid(path: &Path, images: &[f64], n: usize, h: usize, w: usize, cols: usize) -> Result<()> {
    write_atomic(path, &encode_pgm_grid(images, n, h, w, cols)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout() {
        let imgs = [1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0];
        let b = encode_pgm_grid(&imgs, 3, 2, 2, 2).unwrap();
        let header = b"P5\n7 7\n255\n";
        assert_eq!(&b[..header.len()], header);
        let px = &b[header.len()..];
        assert_eq!(px.len(), 49);
        assert_eq!(px[7 + 1], 255);
        assert_eq!(px[7 + 2], 0);
        assert_eq!(px[7 + 4], 128);
    }
}
