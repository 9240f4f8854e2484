//! Contact sheets: rows of equally sized tiles separated by white gutters.

use luminet::image::ImageTensor;

use crate::{CliError, CliResult};

pub const GUTTER: usize = 2;

/// A crop rectangle `y,x,h,w` in source-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl std::str::FromStr for Crop {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::usage(format!("crop must be y,x,h,w in pixels, got {s:?}")))?;
        match v[..] {
            [y, x, h, w] if h > 0 && w > 0 => Ok(Crop { y, x, h, w }),
            _ => Err(CliError::usage(format!("crop must be y,x,h,w with h,w > 0, got {s:?}"))),
        }
    }
}

/// Lays `rows` out on a white canvas. Every tile in a row has the row's
/// first tile's size.
pub fn contact_sheet(rows: &[Vec<ImageTensor>]) -> CliResult<ImageTensor> {
    if rows.is_empty() || rows.iter().any(|r| r.is_empty()) {
        return Err(CliError::usage("contact sheet needs at least one tile per row"));
    }
    for r in rows {
        if r.iter().any(|t| t.dims() != r[0].dims() || t.channels() != 3) {
            return Err(CliError::data("contact sheet tiles in a row must share RGB dimensions"));
        }
    }
    let width = rows
        .iter()
        .map(|r| r.len() * r[0].width() + (r.len() - 1) * GUTTER)
        .max()
        .expect("non-empty");
    let height = rows.iter().map(|r| r[0].height()).sum::<usize>() + (rows.len() - 1) * GUTTER;
    let mut data = vec![1.0f32; height * width * 3];
    let mut y0 = 0;
    for r in rows {
        let (th, tw, _) = r[0].dims();
        for (i, tile) in r.iter().enumerate() {
            let x0 = i * (tw + GUTTER);
            for y in 0..th {
                let src = &tile.data()[y * tw * 3..(y + 1) * tw * 3];
                let at = ((y0 + y) * width + x0) * 3;
                data[at..at + tw * 3].copy_from_slice(src);
            }
        }
        y0 += th + GUTTER;
    }
    Ok(ImageTensor::new(height, width, 3, data)?)
}

/// The crop of `img`, enlarged by the largest integer factor that keeps it
/// within `max_h × max_w`.
pub fn crop_tile(img: &ImageTensor, c: Crop, max_h: usize, max_w: usize) -> CliResult<ImageTensor> {
    if c.y + c.h > img.height() || c.x + c.w > img.width() {
        return Err(CliError::usage(format!(
            "crop {},{},{},{} exceeds the {}x{} image",
            c.y,
            c.x,
            c.h,
            c.w,
            img.height(),
            img.width()
        )));
    }
    let piece = img.crop(c.y, c.x, c.h, c.w)?;
    let k = (max_h / c.h).min(max_w / c.w).max(1);
    Ok(piece.resize_nearest(c.h * k, c.w * k)?)
}

/// `[target | source | relit…]` on the first row, then one row per crop with
/// the same column order.
pub fn relight_sheet(
    target: &ImageTensor,
    source: &ImageTensor,
    relit: &[ImageTensor],
    crops: &[Crop],
) -> CliResult<ImageTensor> {
    let (h, w, _) = source.dims();
    let fit = |img: &ImageTensor| -> CliResult<ImageTensor> {
        if img.height() == h && img.width() == w {
            Ok(img.clone())
        } else {
            Ok(img.resize_nearest(h, w)?)
        }
    };
    let mut columns = vec![fit(target)?, source.clone()];
    for r in relit {
        columns.push(fit(r)?);
    }
    let mut rows = vec![columns.clone()];
    for &c in crops {
        rows.push(columns.iter().map(|img| crop_tile(img, c, h, w)).collect::<CliResult<_>>()?);
    }
    contact_sheet(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_land_where_expected() {
        let a = ImageTensor::constant(2, 3, 3, 0.0).unwrap();
        let b = ImageTensor::constant(2, 3, 3, 0.5).unwrap();
        let s = contact_sheet(&[vec![a.clone(), b.clone()], vec![b]]).unwrap();
        assert_eq!(s.dims(), (2 + GUTTER + 2, 3 + GUTTER + 3, 3));
        assert_eq!(s.get(0, 0, 0), 0.0);
        assert_eq!(s.get(0, 3, 0), 1.0);
        assert_eq!(s.get(1, 3 + GUTTER, 2), 0.5);
        assert_eq!(s.get(2 + GUTTER, 0, 1), 0.5);
        assert_eq!(s.get(2 + GUTTER, 3 + GUTTER, 1), 1.0);
    }

    #[test]
    fn crops_are_enlarged_and_bounds_checked() {
        let img = ImageTensor::from_fn(8, 8, 3, |y, x, _| (y * 8 + x) as f32 / 64.0).unwrap();
        let t = crop_tile(&img, Crop { y: 2, x: 4, h: 2, w: 2 }, 8, 8).unwrap();
        assert_eq!(t.dims(), (8, 8, 3));
        assert_eq!(t.get(0, 0, 0), img.get(2, 4, 0));
        assert_eq!(t.get(7, 7, 0), img.get(3, 5, 0));
        assert!(crop_tile(&img, Crop { y: 7, x: 0, h: 2, w: 2 }, 8, 8).is_err());
        assert!("1,2,3".parse::<Crop>().is_err());
        assert_eq!("1, 2, 3, 4".parse::<Crop>().unwrap(), Crop { y: 1, x: 2, h: 3, w: 4 });
    }

    #[test]
    fn relight_sheet_has_one_row_per_crop() {
        let img = ImageTensor::constant(8, 8, 3, 0.3).unwrap();
        let s = relight_sheet(&img, &img, &[img.clone(), img.clone()], &[Crop { y: 0, x: 0, h: 4, w: 4 }]).unwrap();
        assert_eq!(s.dims(), (8 + GUTTER + 8, 4 * 8 + 3 * GUTTER, 3));
    }
}
