//! Image grids for training samples and qualitative dumps.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::domain::{FlowField, Image};
use crate::error::{Error, Result};
use crate::kernels;
use crate::warp::{default_max_mag, flow_to_color};

pub use crate::data::save_png;

/// `(C, H, W)` or `(1, C, H, W)` tile with 1 or 3 channels to `(3, H, W)` in `[0, 1]`.
fn as_rgb(t: &Tensor) -> Result<Tensor> {
    let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
    let t = t.to_dtype(DType::F32)?.clamp(0f32, 1f32)?;
    match t.dim(0)? {
        3 => Ok(t),
        1 => Ok(t.repeat((3, 1, 1))?),
        c => Err(Error::invalid(format!("cannot display {c} channels"))),
    }
}

/// Lays tiles out row by row; all tiles are resized to the first tile's size.
pub fn grid(rows: &[Vec<Tensor>]) -> Result<Image> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::invalid("empty grid"))?;
    let (h, w) = (first.dim(first.rank() - 2)?, first.dim(first.rank() - 1)?);
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut row_tensors = Vec::with_capacity(rows.len());
    for r in rows {
        let mut tiles = Vec::with_capacity(cols);
        for t in r {
            let mut t = as_rgb(t)?;
            if t.dim(1)? != h || t.dim(2)? != w {
                t = kernels::resize_bilinear(&t.unsqueeze(0)?, h, w)?.squeeze(0)?;
            }
            tiles.push(t);
        }
        while tiles.len() < cols {
            tiles.push(Tensor::zeros((3, h, w), DType::F32, first.device())?);
        }
        row_tensors.push(Tensor::cat(&tiles, 2)?);
    }
    Image::new_unchecked(Tensor::cat(&row_tensors, 1)?)
}

/// Writes `grid(rows)` as a PNG.
pub fn save_grid(path: &Path, rows: &[Vec<Tensor>]) -> Result<()> {
    save_png(path, &grid(rows)?)
}

/// Color-coded flow at the conventional scale for its width.
pub fn flow_panel(flow: &Tensor) -> Result<Tensor> {
    let f = FlowField::new_unchecked(flow.to_dtype(DType::F32)?)?;
    Ok(flow_to_color(&f, default_max_mag(f.width()))?.into_tensor())
}

/// Channel-mean of each attention gate, upsampled to `size`.
pub fn attention_tiles(gates: &[Tensor], size: usize) -> Result<Vec<Tensor>> {
    gates
        .iter()
        .map(|g| {
            let g = if g.rank() == 4 { g.clone() } else { g.unsqueeze(0)? };
            let m = g.mean_keepdim(1)?.to_dtype(DType::F32)?;
            Ok(kernels::resize_bilinear(&m, size, size)?.squeeze(0)?)
        })
        .collect()
}
