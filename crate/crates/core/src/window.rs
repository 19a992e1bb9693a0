//! Sliding-window application of a patch-level logit provider over a whole grid.

use crate::error::{Error, Result};
use crate::grid::{Dims, LogitTensor, Spacing, Volume};

/// Grids that can hand out zero-padded sub-blocks.
pub trait PatchSource {
    fn source_dims(&self) -> Dims;
    fn spacing(&self) -> Spacing;
    /// Block of `size` starting at `origin`; voxels outside the grid are zero.
    fn patch(&self, origin: [usize; 3], size: Dims) -> Self;
}

fn copy_block(src: &[f64], src_dims: Dims, origin: [usize; 3], size: Dims, dst: &mut [f64]) {
    for z in 0..size.d {
        let sz = origin[0] + z;
        if sz >= src_dims.d {
            break;
        }
        for y in 0..size.h {
            let sy = origin[1] + y;
            if sy >= src_dims.h {
                break;
            }
            let row = src_dims.index(sz, sy, 0);
            let n = size.w.min(src_dims.w.saturating_sub(origin[2]));
            let out = size.index(z, y, 0);
            dst[out..out + n].copy_from_slice(&src[row + origin[2]..row + origin[2] + n]);
        }
    }
}

impl PatchSource for Volume {
    fn source_dims(&self) -> Dims {
        self.dims
    }
    fn spacing(&self) -> Spacing {
        self.spacing
    }
    fn patch(&self, origin: [usize; 3], size: Dims) -> Self {
        let mut out = Volume::filled(size, self.spacing, 0.0);
        copy_block(&self.data, self.dims, origin, size, &mut out.data);
        out
    }
}

impl PatchSource for LogitTensor {
    fn source_dims(&self) -> Dims {
        self.dims
    }
    fn spacing(&self) -> Spacing {
        self.spacing
    }
    fn patch(&self, origin: [usize; 3], size: Dims) -> Self {
        let mut out = LogitTensor::zeros(self.channels, size, self.spacing);
        for c in 0..self.channels {
            copy_block(self.channel(c), self.dims, origin, size, out.channel_mut(c));
        }
        out
    }
}

/// Window start offsets along one axis.
///
/// The stride is `floor(patch * (1 - overlap))` (at least 1); the final window is
/// pinned to `extent - patch` so the grid is covered exactly. An axis no larger
/// than the patch gets a single zero-padded window at 0.
pub fn window_starts(extent: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let stride = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let last = extent - patch;
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s < last).collect();
    starts.push(last);
    starts
}

/// Runs `f` on every window and averages overlapping outputs uniformly.
///
/// Windows are visited in z-major order and each voxel's sum is accumulated in
/// that order, so results are bit-reproducible.
pub fn sliding_window_apply<S, F>(input: &S, patch: Dims, overlap: f64, mut f: F) -> Result<LogitTensor>
where
    S: PatchSource,
    F: FnMut(&S) -> Result<LogitTensor>,
{
    let dims = input.source_dims();
    if dims.is_empty() || patch.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::ConfigInvalid(format!("overlap {overlap} outside [0, 1)")));
    }
    let size = patch;
    let zs = window_starts(dims.d, patch.d, overlap);
    let ys = window_starts(dims.h, patch.h, overlap);
    let xs = window_starts(dims.w, patch.w, overlap);

    let mut sum: Option<LogitTensor> = None;
    let mut counts = vec![0u32; dims.len()];
    for &z0 in &zs {
        for &y0 in &ys {
            for &x0 in &xs {
                let out = f(&input.patch([z0, y0, x0], size))?;
                if out.dims != size {
                    return Err(Error::ShapeMismatch(format!(
                        "window output {} for patch {size}",
                        out.dims
                    )));
                }
                let acc = sum.get_or_insert_with(|| LogitTensor::zeros(out.channels, dims, input.spacing()));
                if acc.channels != out.channels {
                    return Err(Error::ShapeMismatch("window outputs disagree on channels".into()));
                }
                let zn = size.d.min(dims.d - z0);
                let yn = size.h.min(dims.h - y0);
                let xn = size.w.min(dims.w - x0);
                for z in 0..zn {
                    for y in 0..yn {
                        let base = dims.index(z0 + z, y0 + y, x0);
                        for x in 0..xn {
                            counts[base + x] += 1;
                        }
                    }
                }
                for c in 0..out.channels {
                    let src = out.channel(c);
                    let dst = acc.channel_mut(c);
                    for z in 0..zn {
                        for y in 0..yn {
                            let base = dims.index(z0 + z, y0 + y, x0);
                            let pbase = size.index(z, y, 0);
                            for x in 0..xn {
                                dst[base + x] += src[pbase + x];
                            }
                        }
                    }
                }
            }
        }
    }
    let mut acc = sum.ok_or(Error::EmptyInput)?;
    let v = dims.len();
    for c in 0..acc.channels {
        for (i, val) in acc.channel_mut(c).iter_mut().enumerate().take(v) {
            *val /= counts[i] as f64;
        }
    }
    Ok(acc)
}
