//! Evaluation metrics: MPJPE for position data, MAE for angle data, reported
//! per prediction horizon.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Mpjpe,
    Mae,
}

impl MetricKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mpjpe" => Ok(MetricKind::Mpjpe),
            "mae" => Ok(MetricKind::Mae),
            _ => Err(Error::Config(format!("metric must be mpjpe|mae, got '{s}'"))),
        }
    }
}

/// Per-horizon metric values plus the all-frame average. The paper-style
/// tables show selected horizons; the average here is always over every
/// future frame, which is also reported so both readings are available.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonReport {
    pub horizons_ms: Vec<u32>,
    pub errors: Vec<f64>,
    /// Mean of the per-frame metric over all T_f future frames.
    pub average: f64,
    pub samples: usize,
}

impl HorizonReport {
    /// CSV rendering: `horizon_ms,value` rows plus a final `average` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon_ms,value\n");
        for (h, e) in self.horizons_ms.iter().zip(&self.errors) {
            out.push_str(&format!("{h},{e}\n"));
        }
        out.push_str(&format!("average,{}\n", self.average));
        out
    }
}

fn check_future_batch<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "metric operands",
            format!("{:?}", gt.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    if pred.rank() != 4 {
        return Err(Error::InvalidArgument(
            "metrics expect (samples, frames, joints, coords) batches".into(),
        ));
    }
    Ok(())
}

/// Mean over samples and joints of the Euclidean norm of the coordinate
/// error at one future frame. `frames_ahead` counts from 1 (the first
/// predicted frame).
pub fn mpjpe_at<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, frames_ahead: usize) -> Result<f64> {
    per_frame_metric(pred, gt, frames_ahead, MetricKind::Mpjpe)
}

/// Mean absolute error over samples, joints and coordinates at one frame.
pub fn mae_at<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, frames_ahead: usize) -> Result<f64> {
    per_frame_metric(pred, gt, frames_ahead, MetricKind::Mae)
}

fn per_frame_metric<S: Scalar>(
    pred: &Tensor<S>,
    gt: &Tensor<S>,
    frames_ahead: usize,
    kind: MetricKind,
) -> Result<f64> {
    check_future_batch(pred, gt)?;
    let (n, t_f, m, d) = (pred.shape()[0], pred.shape()[1], pred.shape()[2], pred.shape()[3]);
    if frames_ahead < 1 || frames_ahead > t_f {
        return Err(Error::InvalidArgument(format!(
            "frame index {frames_ahead} out of range 1..={t_f}"
        )));
    }
    let frame = frames_ahead - 1;
    let mut acc = 0.0f64;
    for s in 0..n {
        for j in 0..m {
            let base = ((s * t_f + frame) * m + j) * d;
            match kind {
                MetricKind::Mpjpe => {
                    let mut sq = 0.0f64;
                    for c in 0..d {
                        let e = pred.data()[base + c].as_f64() - gt.data()[base + c].as_f64();
                        sq += e * e;
                    }
                    acc += sq.sqrt();
                }
                MetricKind::Mae => {
                    for c in 0..d {
                        let e = pred.data()[base + c].as_f64() - gt.data()[base + c].as_f64();
                        acc += e.abs();
                    }
                }
            }
        }
    }
    let denom = match kind {
        MetricKind::Mpjpe => (n * m) as f64,
        MetricKind::Mae => (n * m * d) as f64,
    };
    Ok(acc / denom)
}

/// Converts a millisecond horizon into a 1-based future-frame count. The
/// conversion must be exact; silent rounding would corrupt cross-run
/// comparability.
pub fn frames_ahead_for(horizon_ms: u32, fps: f32) -> Result<usize> {
    let frames = horizon_ms as f64 * fps as f64 / 1000.0;
    let rounded = frames.round();
    if (frames - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon_ms}ms is not a whole frame count at {fps}fps ({frames} frames)"
        )));
    }
    Ok(rounded as usize)
}

/// Evaluates the metric at each requested horizon plus the all-frame
/// average.
pub fn horizon_report<S: Scalar>(
    pred: &Tensor<S>,
    gt: &Tensor<S>,
    horizons_ms: &[u32],
    fps: f32,
    metric: MetricKind,
) -> Result<HorizonReport> {
    check_future_batch(pred, gt)?;
    let t_f = pred.shape()[1];
    let mut errors = Vec::with_capacity(horizons_ms.len());
    for &h in horizons_ms {
        let frame = frames_ahead_for(h, fps)?;
        if frame > t_f {
            return Err(Error::InvalidArgument(format!(
                "horizon {h}ms needs frame {frame} but only {t_f} future frames exist"
            )));
        }
        errors.push(per_frame_metric(pred, gt, frame, metric)?);
    }
    let mut total = 0.0;
    for frame in 1..=t_f {
        total += per_frame_metric(pred, gt, frame, metric)?;
    }
    Ok(HorizonReport {
        horizons_ms: horizons_ms.to_vec(),
        errors,
        average: total / t_f as f64,
        samples: pred.shape()[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_batch(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-10.0..10.0))
    }

    #[test]
    fn mpjpe_zero_and_offset() {
        let gt = rand_batch(&[2, 5, 3, 3], 1);
        assert_eq!(mpjpe_at(&gt, &gt, 1).unwrap(), 0.0);
        // Uniform offset (1,2,2) has norm 3 on every joint.
        let pred = Tensor::from_fn(gt.shape(), |ix| gt.get(ix) + [1.0, 2.0, 2.0][ix[3]]);
        for frame in 1..=5 {
            assert!((mpjpe_at(&pred, &gt, frame).unwrap() - 3.0).abs() < 1e-12);
        }
        assert!(mpjpe_at(&pred, &gt, 6).is_err());
        assert!(mpjpe_at(&pred, &gt, 0).is_err());
    }

    #[test]
    fn mae_zero_offset_and_mixed() {
        let gt = rand_batch(&[3, 4, 2, 2], 2);
        assert_eq!(mae_at(&gt, &gt, 2).unwrap(), 0.0);
        let uniform = Tensor::from_fn(gt.shape(), |ix| gt.get(ix) + 0.5);
        assert!((mae_at(&uniform, &gt, 2).unwrap() - 0.5).abs() < 1e-12);
        // +0.2 and −0.4 on the two coordinates → mean |e| = 0.3.
        let mixed = Tensor::from_fn(gt.shape(), |ix| gt.get(ix) + [0.2, -0.4][ix[3]]);
        assert!((mae_at(&mixed, &gt, 1).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn horizon_frame_conversion() {
        assert_eq!(frames_ahead_for(80, 25.0).unwrap(), 2);
        assert_eq!(frames_ahead_for(160, 25.0).unwrap(), 4);
        assert_eq!(frames_ahead_for(320, 25.0).unwrap(), 8);
        assert_eq!(frames_ahead_for(400, 25.0).unwrap(), 10);
        assert_eq!(frames_ahead_for(1000, 25.0).unwrap(), 25);
        // 100ms at 25fps is 2.5 frames: rejected, not rounded.
        let err = frames_ahead_for(100, 25.0).unwrap_err().to_string();
        assert!(err.contains("100ms"), "{err}");
    }

    #[test]
    fn horizon_report_shape_and_average() {
        let gt = rand_batch(&[4, 25, 3, 3], 3);
        let pred = rand_batch(&[4, 25, 3, 3], 4);
        let rep = horizon_report(&pred, &gt, &[80, 160, 320, 400, 1000], 25.0, MetricKind::Mpjpe).unwrap();
        assert_eq!(rep.errors.len(), 5);
        assert_eq!(rep.samples, 4);
        // 1000ms hits the T_f boundary and is accepted.
        assert_eq!(*rep.horizons_ms.last().unwrap(), 1000);
        // The report average equals the mean of per-frame values.
        let mut total = 0.0;
        for f in 1..=25 {
            total += mpjpe_at(&pred, &gt, f).unwrap();
        }
        assert!((rep.average - total / 25.0).abs() < 1e-10);
        // Identical inputs give an all-zero report.
        let zero = horizon_report(&gt, &gt, &[80], 25.0, MetricKind::Mpjpe).unwrap();
        assert_eq!(zero.errors, vec![0.0]);
        assert_eq!(zero.average, 0.0);
    }

    #[test]
    fn mpjpe_invariant_under_common_rotation() {
        let gt = rand_batch(&[2, 3, 4, 3], 5);
        let pred = rand_batch(&[2, 3, 4, 3], 6);
        let before = mpjpe_at(&pred, &gt, 2).unwrap();
        // Rotate both by the same random 3D rotation (two Givens rotations).
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
        let rot = |t: &Tensor<f64>| -> Tensor<f64> {
            Tensor::from_fn(t.shape(), |ix| {
                let base = [ix[0], ix[1], ix[2], 0];
                let (x, y, z) = (
                    t.get(&[base[0], base[1], base[2], 0]),
                    t.get(&[base[0], base[1], base[2], 1]),
                    t.get(&[base[0], base[1], base[2], 2]),
                );
                // Rz(a) then Rx(b)
                let (x1, y1, z1) = (x * a.cos() - y * a.sin(), x * a.sin() + y * a.cos(), z);
                let v = [x1, y1 * b.cos() - z1 * b.sin(), y1 * b.sin() + z1 * b.cos()];
                v[ix[3]]
            })
        };
        let after = mpjpe_at(&rot(&pred), &rot(&gt), 2).unwrap();
        assert!((before - after).abs() < 1e-6);
    }

    #[test]
    fn metric_triangle_inequality_per_frame() {
        let a = rand_batch(&[3, 4, 2, 3], 8);
        let b = rand_batch(&[3, 4, 2, 3], 9);
        let c = rand_batch(&[3, 4, 2, 3], 10);
        for f in 1..=4 {
            let ab = mpjpe_at(&a, &b, f).unwrap();
            let bc = mpjpe_at(&b, &c, f).unwrap();
            let ac = mpjpe_at(&a, &c, f).unwrap();
            assert!(ac <= ab + bc + 1e-12);
            let mab = mae_at(&a, &b, f).unwrap();
            let mbc = mae_at(&b, &c, f).unwrap();
            let mac = mae_at(&a, &c, f).unwrap();
            assert!(mac <= mab + mbc + 1e-12);
        }
    }
}
