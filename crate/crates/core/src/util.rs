//! Small shared helpers.

use ndarray::Array2;

/// Index of the source row/column a destination index maps to under
/// nearest-neighbor resampling.
pub fn nearest_src(dst: usize, dst_len: usize, src_len: usize) -> usize {
    if dst_len == src_len {
        return dst;
    }
    let idx = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
    idx.min(src_len - 1)
}

/// Nearest-neighbor resampling of a 2-D grid to `(out_h, out_w)`.
pub fn upsample_nearest(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        src[[nearest_src(y, out_h, h), nearest_src(x, out_w, w)]]
    })
}
