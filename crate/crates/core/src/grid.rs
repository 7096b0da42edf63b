//! 4x4 PNG sample grids.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::dataset::PixelRange;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const GRID_SIDE: usize = 4;
pub const GRID_CELLS: usize = GRID_SIDE * GRID_SIDE;

/// Tiles the first 16 images of `[N, ...shape]` into one RGB image.
/// `shape` is `[H, W, 3]`, `[H, W, 1]` or a flat square `[H*W]`.
pub fn render_grid<T: Scalar>(images: &Tensor<T>, shape: &[usize], range: PixelRange) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
    let (h, w, c) = match *shape {
        [h, w, c] if c == 1 || c == 3 => (h, w, c),
        [n] => {
            let side = (n as f64).sqrt() as usize;
            if side * side != n {
                return Err(Error::invalid(format!("flat image of {n} pixels is not square")));
            }
            (side, side, 1)
        }
        _ => return Err(Error::invalid(format!("cannot render images of shape {shape:?}"))),
    };
    let per = h * w * c;
    let count = images.len() / per;
    if images.len() % per != 0 || count == 0 {
        return Err(Error::shape("render_grid", images.shape(), shape));
    }
    let data = images.data();
    let mut img = ImageBuffer::new((GRID_SIDE * w) as u32, (GRID_SIDE * h) as u32);
    for cell in 0..count.min(GRID_CELLS) {
        let (gy, gx) = (cell / GRID_SIDE, cell % GRID_SIDE);
        let src = &data[cell * per..(cell + 1) * per];
        for y in 0..h {
            for x in 0..w {
                let px = &src[(y * w + x) * c..(y * w + x + 1) * c];
                let b = |i: usize| range.to_byte(px[i.min(c - 1)].as_f64());
                img.put_pixel((gx * w + x) as u32, (gy * h + y) as u32, Rgb([b(0), b(1), b(2)]));
            }
        }
    }
    Ok(img)
}

pub fn save_grid<T: Scalar>(path: &Path, images: &Tensor<T>, shape: &[usize], range: PixelRange) -> Result<()> {
    render_grid(images, shape, range)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
