use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::{Error, Result};

pub const UNIT_TOLERANCE: f64 = 1e-4;

/// Per-pixel unit normals with a validity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalMap {
    height: usize,
    width: usize,
    normals: Vec<[f64; 3]>,
    mask: Vec<bool>,
}

impl NormalMap {
    /// Valid pixels must be unit length within [`UNIT_TOLERANCE`].
    pub fn new(height: usize, width: usize, normals: Vec<[f64; 3]>, mask: Vec<bool>) -> Result<Self> {
        if normals.len() != height * width || mask.len() != normals.len() {
            return Err(Error::shape(format!(
                "normal map {height}x{width} needs {} normals and mask entries",
                height * width
            )));
        }
        for (i, (n, &m)) in normals.iter().zip(&mask).enumerate() {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if m && !((len - 1.0).abs() <= UNIT_TOLERANCE) {
                return Err(Error::data(format!("normal {i} has length {len}")));
            }
        }
        Ok(Self {
            height,
            width,
            normals,
            mask,
        })
    }

    /// Every pixel valid.
    pub fn dense(height: usize, width: usize, normals: Vec<[f64; 3]>) -> Result<Self> {
        let n = normals.len();
        Self::new(height, width, normals, vec![true; n])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn normals(&self) -> &[[f64; 3]] {
        &self.normals
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Applies a 3×3 rotation (row-major) to every normal.
    pub fn rotated(&self, r: [[f64; 3]; 3]) -> Result<NormalMap> {
        let normals = self
            .normals
            .iter()
            .map(|n| std::array::from_fn(|i| r[i][0] * n[0] + r[i][1] * n[1] + r[i][2] * n[2]))
            .collect();
        Self::new(self.height, self.width, normals, self.mask.clone())
    }
}

/// An external surface-normal predictor.
pub trait NormalEstimator {
    fn estimate(&self, img: &ImageTensor) -> Result<NormalMap>;
}

/// Median over jointly valid pixels of `acos(clamp(a·b, −1, 1))`, in degrees.
pub fn median_angular_error(a: &NormalMap, b: &NormalMap) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("normal maps differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let mut angles: Vec<f64> = a
        .normals
        .iter()
        .zip(&b.normals)
        .zip(a.mask.iter().zip(&b.mask))
        .filter(|(_, (&ma, &mb))| ma && mb)
        .map(|((x, y), _)| (x[0] * y[0] + x[1] * y[1] + x[2] * y[2]).clamp(-1.0, 1.0).acos().to_degrees())
        .collect();
    if angles.is_empty() {
        return Err(Error::data("normal maps share no valid pixel"));
    }
    angles.sort_by(f64::total_cmp);
    let n = angles.len();
    Ok(if n % 2 == 1 {
        angles[n / 2]
    } else {
        0.5 * (angles[n / 2 - 1] + angles[n / 2])
    })
}

/// Rotation by `degrees` about a unit `axis` (Rodrigues).
pub fn rotation(axis: [f64; 3], degrees: f64) -> [[f64; 3]; 3] {
    let len = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|v| v / len);
    let (s, c) = degrees.to_radians().sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}
