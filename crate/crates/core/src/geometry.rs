//! Camera poses, rotation matrices and resampling of cubic volumes under a
//! rotation about the volume centre.
//!
//! Conventions: right-handed world frame with x to the right, y up and z
//! towards the viewer. A volume `[N, C, D, H, W]` has voxel centres at
//! `(i + 0.5)/D·2 − 1` along each axis, with `w ↦ x`, `h ↦ −y` (rows grow
//! downwards) and `d ↦ −z` (depth index 0 is nearest the viewer).
//! `R_world(pose) = R_y(azimuth)·R_x(elevation)`.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Camera pose in degrees. Azimuth is normalized to `[0, 360)`.
#[derive(Debug, Clone, Copy)]
pub struct Pose {
    azimuth: f64,
    elevation: f64,
}

impl Pose {
    pub fn new(azimuth: f64, elevation: f64) -> Result<Self> {
        if !azimuth.is_finite() || !elevation.is_finite() {
            return Err(Error::InvalidPose(format!("({azimuth}, {elevation}) is not finite")));
        }
        if !(-90.0..=90.0).contains(&elevation) {
            return Err(Error::InvalidPose(format!("elevation {elevation} outside [-90, 90]")));
        }
        let mut az = azimuth.rem_euclid(360.0);
        if az >= 360.0 {
            az = 0.0;
        }
        Ok(Pose {
            azimuth: az,
            elevation,
        })
    }

    /// The pose `(0, 0)`.
    pub const fn origin() -> Self {
        Pose {
            azimuth: 0.0,
            elevation: 0.0,
        }
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    /// `R_y(azimuth)·R_x(elevation)`.
    pub fn world_rotation(&self) -> RotationMatrix {
        rot_y(self.azimuth).mul(&rot_x(self.elevation))
    }

    /// File-name friendly label, e.g. `20_10`.
    pub fn label(&self) -> String {
        format!("{}_{}", fmt_angle(self.azimuth), fmt_angle(self.elevation))
    }
}

impl PartialEq for Pose {
    fn eq(&self, other: &Self) -> bool {
        self.azimuth == other.azimuth && self.elevation == other.elevation
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", fmt_angle(self.azimuth), fmt_angle(self.elevation))
    }
}

/// Shortest decimal that round-trips; integral angles print without a point.
pub fn fmt_angle(a: f64) -> String {
    format!("{a}")
}

/// Sine and cosine of an angle in degrees, exact at multiples of 90°.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r.fract() == 0.0 && (r as u32) % 90 == 0 {
        return match r as u32 {
            0 => (0.0, 1.0),
            90 => (1.0, 0.0),
            180 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        };
    }
    deg.to_radians().sin_cos()
}

fn rot_y(deg: f64) -> RotationMatrix {
    let (s, c) = sin_cos_deg(deg);
    RotationMatrix([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
}

fn rot_x(deg: f64) -> RotationMatrix {
    let (s, c) = sin_cos_deg(deg);
    RotationMatrix([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix([[f64; 3]; 3]);

impl RotationMatrix {
    pub const IDENTITY: RotationMatrix = RotationMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Validated construction: `RᵀR = I` and `det R = 1`, both within 1e-6.
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        let r = RotationMatrix(rows);
        r.validate()?;
        Ok(r)
    }

    /// No validation; [`rotate_volume`] still rejects non-rotations.
    pub fn from_rows_unchecked(rows: [[f64; 3]; 3]) -> Self {
        RotationMatrix(rows)
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.0
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.transpose().mul(self);
        let orthonormal = (0..3).all(|i| (0..3).all(|j| {
            let target = if i == j { 1.0 } else { 0.0 };
            (rtr.0[i][j] - target).abs() <= 1e-6
        }));
        if orthonormal && (self.det() - 1.0).abs() <= 1e-6 {
            Ok(())
        } else {
            Err(Error::NotARotation(self.0))
        }
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn transpose(&self) -> RotationMatrix {
        let m = &self.0;
        RotationMatrix(std::array::from_fn(|i| std::array::from_fn(|j| m[j][i])))
    }

    pub fn inverse(&self) -> RotationMatrix {
        self.transpose()
    }

    pub fn mul(&self, other: &RotationMatrix) -> RotationMatrix {
        let (a, b) = (&self.0, &other.0);
        RotationMatrix(std::array::from_fn(|i| {
            std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum())
        }))
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (0..3).map(|k| self.0[i][k] * v[k]).sum())
    }

    pub fn max_abs_diff(&self, other: &RotationMatrix) -> f64 {
        (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (self.0[i][j] - other.0[i][j]).abs())
            .fold(0.0, f64::max)
    }
}

/// Rotation carrying content seen from `from` into the frame of `to`:
/// `R_world(to)·R_world(from)⁻¹`.
pub fn rotation_between(from: &Pose, to: &Pose) -> RotationMatrix {
    to.world_rotation().mul(&from.world_rotation().inverse())
}

/// Poses with azimuths `0, 360/n, ...` crossed with `elevations`,
/// azimuth-major.
pub fn pose_grid(n_azimuth: usize, elevations: &[f64]) -> Result<Vec<Pose>> {
    if n_azimuth == 0 {
        return Err(Error::InvalidPose("pose grid needs at least one azimuth".into()));
    }
    let step = 360.0 / n_azimuth as f64;
    let mut poses = Vec::with_capacity(n_azimuth * elevations.len());
    for i in 0..n_azimuth {
        for &el in elevations {
            poses.push(Pose::new(i as f64 * step, el)?);
        }
    }
    Ok(poses)
}

/// Elevations of the dataset pose grid.
pub const DATASET_ELEVATIONS: [f64; 3] = [0.0, 10.0, 20.0];
/// Azimuth count of the dataset pose grid (20° steps).
pub const DATASET_AZIMUTHS: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Trilinear,
}

/// Index-space sampling matrix: the source position (in `(d, h, w)` index
/// units about the centre) for an output offset is `M·offset` with
/// `M = Pᵀ·Rᵀ·P`, `P` mapping index axes to world axes.
fn index_space(r: &RotationMatrix) -> [[f64; 3]; 3] {
    // world = P·u with u = (u_d, u_h, u_w): x = u_w, y = −u_h, z = −u_d.
    let p = [[0.0, 0.0, 1.0], [0.0, -1.0, 0.0], [-1.0, 0.0, 0.0]];
    let rt = r.transpose();
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            // (Pᵀ Rᵀ P)_ij = Σ_a Σ_b P_ai Rᵀ_ab P_bj
            *v = (0..3)
                .flat_map(|a| (0..3).map(move |b| (a, b)))
                .map(|(a, b)| p[a][i] * rt.0[a][b] * p[b][j])
                .sum();
        }
    }
    m
}

/// Per-output-voxel source taps (`TAPS` per voxel, weight 0 for padding).
struct SampleTable<T> {
    taps: usize,
    index: Vec<usize>,
    weight: Vec<T>,
}

fn sample_table<T: Scalar>(d: usize, r: &RotationMatrix, interp: Interp) -> SampleTable<T> {
    let m = index_space(r);
    let center = (d as f64 - 1.0) / 2.0;
    let taps = match interp {
        Interp::Nearest => 1,
        Interp::Trilinear => 8,
    };
    let n = d * d * d;
    let mut index = Vec::with_capacity(n * taps);
    let mut weight = Vec::with_capacity(n * taps);
    let inside = |i: isize| i >= 0 && (i as usize) < d;
    for z in 0..d {
        for y in 0..d {
            for x in 0..d {
                let u = [z as f64 - center, y as f64 - center, x as f64 - center];
                let src: [f64; 3] = std::array::from_fn(|i| center + (0..3).map(|k| m[i][k] * u[k]).sum::<f64>());
                match interp {
                    Interp::Nearest => {
                        let q: [isize; 3] = std::array::from_fn(|i| src[i].round() as isize);
                        if q.iter().all(|&v| inside(v)) {
                            index.push((q[0] as usize * d + q[1] as usize) * d + q[2] as usize);
                            weight.push(T::one());
                        } else {
                            index.push(0);
                            weight.push(T::zero());
                        }
                    }
                    Interp::Trilinear => {
                        let base: [f64; 3] = std::array::from_fn(|i| src[i].floor());
                        let frac: [f64; 3] = std::array::from_fn(|i| src[i] - base[i]);
                        for corner in 0..8 {
                            let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
                            let q: [isize; 3] = std::array::from_fn(|i| base[i] as isize + off[i] as isize);
                            let w: f64 = (0..3)
                                .map(|i| if off[i] == 1 { frac[i] } else { 1.0 - frac[i] })
                                .product();
                            if w != 0.0 && q.iter().all(|&v| inside(v)) {
                                index.push((q[0] as usize * d + q[1] as usize) * d + q[2] as usize);
                                weight.push(T::of(w));
                            } else {
                                index.push(0);
                                weight.push(T::zero());
                            }
                        }
                    }
                }
            }
        }
    }
    SampleTable { taps, index, weight }
}

/// Resample `[N, C, D, D, D]` so that output voxel `o` takes the input value
/// at `R⁻¹·o` (zero outside the cube). Trilinear mode is differentiable with
/// respect to the volume.
pub fn rotate_volume<T: Scalar>(vol: &Tensor<T>, r: &RotationMatrix, interp: Interp) -> Result<Tensor<T>> {
    let n = vol.shape().first().copied().unwrap_or(0);
    rotate_volumes(vol, &vec![*r; n], interp)
}

/// [`rotate_volume`] with one rotation per batch element.
pub fn rotate_volumes<T: Scalar>(vol: &Tensor<T>, rs: &[RotationMatrix], interp: Interp) -> Result<Tensor<T>> {
    let shape = vol.shape();
    if shape.len() != 5 || shape[2] != shape[3] || shape[3] != shape[4] {
        return Err(Error::NonCubicVolume(shape.to_vec()));
    }
    if rs.len() != shape[0] {
        return Err(Error::InvalidShape(format!(
            "{} rotations for a batch of {}",
            rs.len(),
            shape[0]
        )));
    }
    for r in rs {
        r.validate()?;
    }
    let d = shape[2];
    let cube = d * d * d;
    let channels = shape[1];
    // Batch elements sharing a rotation share a table.
    let mut tables: Vec<std::sync::Arc<SampleTable<T>>> = Vec::with_capacity(rs.len());
    for (i, r) in rs.iter().enumerate() {
        match rs[..i].iter().position(|q| q == r) {
            Some(j) => tables.push(tables[j].clone()),
            None => tables.push(std::sync::Arc::new(sample_table::<T>(d, r, interp))),
        }
    }
    let x = vol.data();
    let mut out = vec![T::zero(); x.len()];
    for p in 0..shape[0] * channels {
        let table = &tables[p / channels];
        let src = &x[p * cube..(p + 1) * cube];
        let dst = &mut out[p * cube..(p + 1) * cube];
        for (o, v) in dst.iter_mut().enumerate() {
            let base = o * table.taps;
            let mut acc = T::zero();
            for t in base..base + table.taps {
                acc = acc + table.weight[t] * src[table.index[t]];
            }
            *v = acc;
        }
    }
    let backward = Box::new(move |g: &[T], _: &[Tensor<T>]| {
        let mut dx = vec![T::zero(); g.len()];
        for p in 0..g.len() / cube {
            let table = &tables[p / channels];
            let gp = &g[p * cube..(p + 1) * cube];
            let dp = &mut dx[p * cube..(p + 1) * cube];
            for (o, &gv) in gp.iter().enumerate() {
                let base = o * table.taps;
                for t in base..base + table.taps {
                    let i = table.index[t];
                    dp[i] = dp[i] + table.weight[t] * gv;
                }
            }
        }
        vec![Some(dx)]
    });
    Ok(Tensor::from_op("rotate_volume", shape.to_vec(), out, &[vol], backward))
}
