//! Dense 3D scalar fields and the intensity/augmentation transforms applied to
//! them before they reach an encoder.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, shape_err, Result};

/// A 3D scalar field stored in C order (`z` slowest, `x` fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0.0; dims[0] * dims[1] * dims[2]] }
    }

    pub fn cube(side: usize) -> Self {
        Self::zeros([side; 3])
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(shape_err!("{} values for dims {:?}", data.len(), dims));
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(z, y, x)]
    }

    /// `(z, y, x)` coordinates of a flat index.
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[2];
        let y = (idx / self.dims[2]) % self.dims[1];
        let z = idx / (self.dims[1] * self.dims[2]);
        [z, y, x]
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        self.dims == other.dims
    }
}

/// Min-max rescales intensities to the unit interval. A constant volume maps
/// to all zeros.
pub fn minmax_rescale(vol: &Volume) -> Result<Volume> {
    if let Some(i) = vol.data.iter().position(|v| !v.is_finite()) {
        return Err(data_err!("non-finite intensity at voxel {i}"));
    }
    let (lo, hi) = vol
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let data = if vol.data.is_empty() || range <= 0.0 {
        vec![0.0; vol.len()]
    } else {
        vol.data.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    };
    Ok(Volume { dims: vol.dims, data })
}

#[inline]
fn reflect_index(p: isize, n: usize) -> usize {
    let n = n as isize;
    let mut q = p;
    // A single fold suffices while pad < n; the loop covers larger pads too.
    loop {
        if q < 0 {
            q = -q;
        } else if q >= n {
            q = 2 * (n - 1) - q;
        } else {
            return q as usize;
        }
    }
}

/// Reflect-pads by `pad` voxels on every face (edge voxel not repeated) and
/// extracts a `crop³` window at the given offsets into the padded volume.
pub fn reflect_pad_crop_at(vol: &Volume, pad: usize, crop: usize, offset: [usize; 3]) -> Result<Volume> {
    for (axis, &n) in vol.dims.iter().enumerate() {
        if crop > n + 2 * pad {
            return Err(config_err!("crop {crop} exceeds padded extent {} on axis {axis}", n + 2 * pad));
        }
        if pad >= n && n > 1 {
            return Err(config_err!("reflect pad {pad} must be smaller than side {n}"));
        }
        if offset[axis] > n + 2 * pad - crop {
            return Err(config_err!("crop offset {} out of range on axis {axis}", offset[axis]));
        }
    }
    let mut out = Volume::cube(crop);
    let src = |o: usize, axis: usize| reflect_index(o as isize - pad as isize, vol.dims[axis]);
    let mut k = 0;
    for z in 0..crop {
        let sz = src(offset[0] + z, 0);
        for y in 0..crop {
            let sy = src(offset[1] + y, 1);
            for x in 0..crop {
                let sx = src(offset[2] + x, 2);
                out.data[k] = vol.at(sz, sy, sx);
                k += 1;
            }
        }
    }
    Ok(out)
}

/// Random reflect-pad-and-crop augmentation; offsets uniform per axis over
/// `0..=side + 2·pad − crop`.
pub fn reflect_pad_crop(vol: &Volume, pad: usize, crop: usize, rng: &mut crate::Rng) -> Result<Volume> {
    let mut offset = [0usize; 3];
    for (axis, o) in offset.iter_mut().enumerate() {
        let extent = vol.dims[axis] + 2 * pad;
        if crop > extent {
            return Err(config_err!("crop {crop} exceeds padded extent {extent} on axis {axis}"));
        }
        *o = rng.random_range(0..=extent - crop);
    }
    reflect_pad_crop_at(vol, pad, crop, offset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(side: usize) -> Volume {
        let n = side * side * side;
        Volume::from_vec([side; 3], (0..n).map(|i| (2 * i + 2) as f64).collect()).unwrap()
    }

    #[test]
    fn minmax_maps_extremes() {
        let v = ramp(3);
        let r = minmax_rescale(&v).unwrap();
        assert_eq!(r.data[0], 0.0);
        assert_eq!(*r.data.last().unwrap(), 1.0);
    }

    #[test]
    fn minmax_constant_is_zero() {
        let v = Volume::from_vec([2, 2, 2], vec![3.5; 8]).unwrap();
        assert!(minmax_rescale(&v).unwrap().data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn minmax_rejects_nan() {
        let mut v = ramp(2);
        v.data[3] = f64::NAN;
        assert!(matches!(minmax_rescale(&v), Err(crate::Error::Data(_))));
        v.data[3] = f64::INFINITY;
        assert!(minmax_rescale(&v).is_err());
    }

    #[test]
    fn minmax_matches_formula() {
        let mut rng = crate::rng_from_seed(5);
        let data: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..7.0)).collect();
        let v = Volume::from_vec([4, 4, 4], data.clone()).unwrap();
        let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let r = minmax_rescale(&v).unwrap();
        for (a, b) in r.data.iter().zip(&data) {
            assert!((a - (b - lo) / (hi - lo)).abs() < 1e-15);
        }
    }

    #[test]
    fn crop_shape_and_offsets() {
        let v = ramp(16);
        let mut rng = crate::rng_from_seed(1);
        for _ in 0..20 {
            let c = reflect_pad_crop(&v, 8, 16, &mut rng).unwrap();
            assert_eq!(c.dims, [16; 3]);
        }
        assert!(reflect_pad_crop(&v, 8, 33, &mut rng).is_err());
    }

    #[test]
    fn zero_offset_mirrors_leading_planes() {
        let side = 16;
        let pad = 8;
        let v = ramp(side);
        let c = reflect_pad_crop_at(&v, pad, side, [0, 0, 0]).unwrap();
        // Explicit mirror: padded plane p < pad holds input plane pad - p.
        for p in 0..pad {
            for y in 0..side {
                for x in 0..side {
                    let my = pad.abs_diff(y);
                    let mx = pad.abs_diff(x);
                    assert_eq!(c.at(p, y, x), v.at(pad - p, my, mx));
                }
            }
        }
    }

    #[test]
    fn no_pad_full_crop_is_identity() {
        let v = ramp(8);
        let mut rng = crate::rng_from_seed(2);
        assert_eq!(reflect_pad_crop(&v, 0, 8, &mut rng).unwrap(), v);
    }
}
