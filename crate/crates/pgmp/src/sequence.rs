//! Pose sequences: the object every operator consumes and produces.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A length-L sequence of poses, each `joints × coords`, with frame-rate
/// metadata. Coordinates are millimeters for 3D data, radians for angle
/// representations.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence<S: Scalar = f32> {
    frames: Tensor<S>,
    fps: f32,
}

impl<S: Scalar> MotionSequence<S> {
    /// Wraps a rank-3 (frames, joints, coords) tensor. Rejects non-finite
    /// values and non-positive frame rates.
    pub fn new(frames: Tensor<S>, fps: f32) -> Result<Self> {
        if frames.rank() != 3 {
            return Err(Error::InvalidArgument(format!(
                "motion sequence needs a rank-3 (frames, joints, coords) tensor, got rank {}",
                frames.rank()
            )));
        }
        if !frames.all_finite() {
            return Err(Error::NonFinite("motion sequence frames".into()));
        }
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one frame
    }

    pub fn joints(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn coords(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn frames(&self) -> &Tensor<S> {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor<S> {
        self.frames
    }

    /// The flat (joints·coords) slice of one pose, 0-based frame index.
    pub fn pose(&self, frame: usize) -> &[S] {
        let stride = self.joints() * self.coords();
        &self.frames.data()[frame * stride..(frame + 1) * stride]
    }

    /// Copies the frame range `[start, start+len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self { frames: self.frames.narrow(0, start, len)?, fps: self.fps })
    }

    pub fn cast<T: Scalar>(&self) -> MotionSequence<T> {
        MotionSequence { frames: self.frames.cast(), fps: self.fps }
    }

    /// Repeats the last observed pose `t_f` times and appends it, producing
    /// the padded full-length input sequence.
    pub fn pad_with_last_pose(&self, t_f: usize) -> Result<Self> {
        if t_f == 0 {
            return Err(Error::InvalidArgument("pad_with_last_pose needs t_f >= 1".into()));
        }
        let (l, m, d) = (self.len(), self.joints(), self.coords());
        let last = self.pose(l - 1);
        let mut data = Vec::with_capacity((l + t_f) * m * d);
        data.extend_from_slice(self.frames.data());
        for _ in 0..t_f {
            data.extend_from_slice(last);
        }
        Ok(Self { frames: Tensor::from_vec(&[l + t_f, m, d], data)?, fps: self.fps })
    }
}

/// Tensor-level last-pose padding for a (B, T_h, M, D) batch.
pub fn pad_last_pose_batch<S: Scalar>(obs: &Tensor<S>, t_f: usize) -> Result<Tensor<S>> {
    if obs.rank() != 4 {
        return Err(Error::InvalidArgument("pad_last_pose_batch needs a rank-4 batch".into()));
    }
    if t_f == 0 {
        return Err(Error::InvalidArgument("pad_last_pose_batch needs t_f >= 1".into()));
    }
    let (b, t_h, m, d) = (obs.shape()[0], obs.shape()[1], obs.shape()[2], obs.shape()[3]);
    let pose = m * d;
    let mut out = Tensor::zeros(&[b, t_h + t_f, m, d]);
    for bi in 0..b {
        let src = &obs.data()[bi * t_h * pose..(bi + 1) * t_h * pose];
        let dst_base = bi * (t_h + t_f) * pose;
        out.data_mut()[dst_base..dst_base + t_h * pose].copy_from_slice(src);
        let last = src[(t_h - 1) * pose..].to_vec();
        for t in 0..t_f {
            let off = dst_base + (t_h + t) * pose;
            out.data_mut()[off..off + pose].copy_from_slice(&last);
        }
    }
    Ok(out)
}
