//! Volume preprocessing. Volumes are indexed `(x, y, z)` as stored in NIfTI;
//! the axial plane is `(x, y)` and projections run along `z`.

use std::path::Path;

use log::warn;
use ndarray::{Array2, Array3, ArrayView3, Axis, Ix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominators below this are treated as zero when computing SER.
pub const SER_EPSILON: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VolumeOptions {
    /// Edge length of the cubic resampling grid.
    pub size: usize,
    /// Optional `(low, high)` percentiles clipped before min-max scaling.
    pub percentile_clip: Option<(f64, f64)>,
}

impl Default for VolumeOptions {
    fn default() -> Self {
        Self {
            size: 256,
            percentile_clip: None,
        }
    }
}

/// Linear resampling along one axis with half-pixel centres; identity when the
/// length is unchanged.
fn resize_axis(src: &Array3<f32>, axis: usize, new_len: usize) -> Array3<f32> {
    let old_len = src.len_of(Axis(axis));
    if old_len == new_len {
        return src.clone();
    }
    let mut shape = [src.dim().0, src.dim().1, src.dim().2];
    shape[axis] = new_len;
    let mut out = Array3::<f32>::zeros(shape);
    let scale = old_len as f64 / new_len as f64;
    for i in 0..new_len {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (old_len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(old_len - 1);
        let frac = (pos - lo as f64) as f32;
        let a = src.index_axis(Axis(axis), lo);
        let b = src.index_axis(Axis(axis), hi);
        let mut dst = out.index_axis_mut(Axis(axis), i);
        ndarray::Zip::from(&mut dst).and(&a).and(&b).for_each(|d, &x, &y| *d = x + (y - x) * frac);
    }
    out
}

/// Trilinear resampling, done as three separable passes.
pub fn resize_trilinear(volume: ArrayView3<f32>, size: (usize, usize, usize)) -> Array3<f32> {
    let v = volume.to_owned();
    let v = resize_axis(&v, 0, size.0);
    let v = resize_axis(&v, 1, size.1);
    resize_axis(&v, 2, size.2)
}

fn percentile(sorted: &[f32], p: f64) -> f32 {
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let f = (rank - lo as f64) as f32;
    sorted[lo] + (sorted[hi] - sorted[lo]) * f
}

/// Resamples to `size`³ and rescales intensities to `[0, 1]`. A constant volume
/// becomes all zeros.
pub fn preprocess_volume(volume: ArrayView3<f32>, options: &VolumeOptions) -> Result<Array3<f32>> {
    if volume.is_empty() {
        return Err(Error::DataQuality("empty volume".into()));
    }
    if volume.iter().any(|v| !v.is_finite()) {
        return Err(Error::DataQuality("volume contains NaN or Inf".into()));
    }
    let s = options.size;
    let mut v = resize_trilinear(volume, (s, s, s));
    if let Some((lo, hi)) = options.percentile_clip {
        let mut sorted: Vec<f32> = v.iter().copied().collect();
        sorted.sort_by(f32::total_cmp);
        let (a, b) = (percentile(&sorted, lo), percentile(&sorted, hi));
        v.mapv_inplace(|x| x.clamp(a, b));
    }
    let min = v.iter().copied().fold(f32::INFINITY, f32::min);
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max <= min {
        warn!("constant volume (value {min}); normalized to zeros");
        v.fill(0.0);
        return Ok(v);
    }
    let range = max - min;
    v.mapv_inplace(|x| ((x - min) / range).clamp(0.0, 1.0));
    Ok(v)
}

/// Per-pixel maximum along the axial (`z`) axis.
pub fn axial_mip(volume: ArrayView3<f32>) -> Array2<f32> {
    volume.fold_axis(Axis(2), f32::NEG_INFINITY, |&m, &v| m.max(v))
}

/// Voxelwise `early / late`, with zero where `late < SER_EPSILON`.
pub fn guarded_ser(early: ArrayView3<f32>, late: ArrayView3<f32>) -> Result<Array3<f32>> {
    if early.dim() != late.dim() {
        return Err(Error::Shape(format!(
            "PE maps differ in shape: {:?} vs {:?}",
            early.dim(),
            late.dim()
        )));
    }
    let mut out = Array3::<f32>::zeros(early.dim());
    ndarray::Zip::from(&mut out)
        .and(&early)
        .and(&late)
        .for_each(|o, &e, &l| *o = if l < SER_EPSILON { 0.0 } else { e / l });
    Ok(out)
}

/// Reads `.nii`, `.nii.gz` or `.npy` volumes as `f32`.
pub fn read_volume(path: &Path) -> Result<Array3<f32>> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let volume = if name.ends_with(".npy") {
        ndarray_npy::read_npy::<_, Array3<f32>>(path)
            .map_err(|e| Error::DataQuality(format!("cannot read npy: {e}")).at(path))?
    } else if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
        let obj = ReaderOptions::new()
            .read_file(path)
            .map_err(|e| Error::DataQuality(format!("cannot read nifti: {e}")).at(path))?;
        let dyn_arr = obj
            .into_volume()
            .into_ndarray::<f32>()
            .map_err(|e| Error::DataQuality(format!("cannot decode nifti: {e}")).at(path))?;
        let dyn_arr = match dyn_arr.ndim() {
            3 => dyn_arr,
            4 if dyn_arr.shape()[3] == 1 => dyn_arr.index_axis_move(Axis(3), 0),
            n => return Err(Error::DataQuality(format!("expected a 3D volume, got {n} dimensions")).at(path)),
        };
        dyn_arr
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::DataQuality(e.to_string()).at(path))?
    } else {
        return Err(Error::DataQuality("unsupported volume format".into()).at(path));
    };
    Ok(volume)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(size: usize) -> VolumeOptions {
        VolumeOptions {
            size,
            percentile_clip: None,
        }
    }

    #[test]
    fn constant_volume_becomes_zeros() {
        let v = Array3::from_elem((4, 4, 4), 7.0f32);
        let out = preprocess_volume(v.view(), &opts(4)).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalized_volume_at_target_size_is_unchanged() {
        let v = Array3::from_shape_fn((8, 8, 8), |(x, y, z)| ((x + 2 * y + 3 * z) % 10) as f32 / 9.0);
        let out = preprocess_volume(v.view(), &opts(8)).unwrap();
        let max = (&out - &v).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
        assert!(max < 1e-6);
    }

    #[test]
    fn min_max_maps_extremes_to_unit_interval() {
        let mut v = Array3::from_elem((4, 4, 4), 15.0f32);
        v[[0, 0, 0]] = 10.0;
        v[[3, 3, 3]] = 20.0;
        let out = preprocess_volume(v.view(), &opts(4)).unwrap();
        assert_eq!(out[[0, 0, 0]], 0.0);
        assert_eq!(out[[3, 3, 3]], 1.0);
        assert_eq!(out[[1, 1, 1]], 0.5);
    }

    #[test]
    fn resize_changes_grid_and_preserves_constants() {
        let v = Array3::from_elem((3, 5, 7), 2.5f32);
        let out = resize_trilinear(v.view(), (6, 6, 6));
        assert_eq!(out.dim(), (6, 6, 6));
        assert!(out.iter().all(|&x| (x - 2.5).abs() < 1e-6));
    }

    #[test]
    fn mip_single_bright_voxel() {
        let mut v = Array3::<f32>::zeros((4, 4, 4));
        v[[1, 2, 3]] = 1.0;
        let m = axial_mip(v.view());
        assert_eq!(m.dim(), (4, 4));
        assert_eq!(m.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(m[[1, 2]], 1.0);
        assert!(axial_mip(Array3::<f32>::zeros((3, 3, 2)).view()).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mip_of_two_slices_is_elementwise_max() {
        let a = Array2::from_shape_fn((3, 3), |(x, y)| (x * 3 + y) as f32 / 8.0);
        let b = Array2::from_shape_fn((3, 3), |(x, y)| ((8 - x * 3 - y) as f32) / 8.0);
        let mut v = Array3::<f32>::zeros((3, 3, 2));
        v.index_axis_mut(Axis(2), 0).assign(&a);
        v.index_axis_mut(Axis(2), 1).assign(&b);
        let m = axial_mip(v.view());
        for x in 0..3 {
            for y in 0..3 {
                let expect = if a[[x, y]] > b[[x, y]] { a[[x, y]] } else { b[[x, y]] };
                assert_eq!(m[[x, y]], expect);
            }
        }
    }

    #[test]
    fn ser_guards_small_denominators() {
        let early = Array3::from_elem((2, 2, 1), 0.8f32);
        let mut late = Array3::from_elem((2, 2, 1), 0.4f32);
        late[[0, 0, 0]] = 0.0;
        late[[1, 1, 0]] = 1e-7;
        let ser = guarded_ser(early.view(), late.view()).unwrap();
        assert_eq!(ser[[0, 0, 0]], 0.0);
        assert_eq!(ser[[1, 1, 0]], 0.0);
        assert!((ser[[0, 1, 0]] - 2.0).abs() < 1e-6);
        assert!(ser.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_nan_volumes() {
        let mut v = Array3::<f32>::zeros((2, 2, 2));
        v[[0, 0, 0]] = f32::NAN;
        assert!(matches!(preprocess_volume(v.view(), &opts(2)), Err(Error::DataQuality(_))));
    }

    #[test]
    fn npy_volume_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.npy");
        let v = Array3::from_shape_fn((2, 3, 4), |(a, b, c)| (a * 12 + b * 4 + c) as f32);
        ndarray_npy::write_npy(&path, &v).unwrap();
        assert_eq!(read_volume(&path).unwrap(), v);
        assert!(read_volume(&dir.path().join("v.txt")).is_err());
    }
}
