//! VGG-M adapted to 40-mel filterbank input.
//!
//! Input is [N, 1, 40, T] (frequency × time). The stack below collapses the
//! frequency axis to 4 bins, which the final `fc` layer (a convolution whose
//! kernel spans exactly those 4 bins) reduces to 1, leaving a 512-channel
//! 1 × T′ map.
//!
//! The conv1 convolution strides (1, 2): striding the frequency axis there
//! would leave at most 3 frequency bins at fc, so the stride-2 entry can
//! only apply to time. Every layer's padding is pinned by the same
//! requirement and checked at build time.

use ndarray::Array4;

use super::layers::{chain_extent, BnMode, ConvUnit, MaxPool2d, TensorMut};
use crate::error::{Error, Result};
use crate::num::Real;

/// Frequency extent the fc kernel spans.
const FC_FREQ: usize = 4;

pub struct VggM40<R> {
    conv1: ConvUnit<R>,
    pool1: MaxPool2d,
    conv2: ConvUnit<R>,
    pool2: MaxPool2d,
    conv3: ConvUnit<R>,
    conv4: ConvUnit<R>,
    conv5: ConvUnit<R>,
    pool5: MaxPool2d,
    fc: ConvUnit<R>,
    in_bins: usize,
}

/// Channel count scaled by the width multiplier, at least 1.
pub(crate) fn scaled(base: usize, width_mult: f64) -> usize {
    ((base as f64 * width_mult).round() as usize).max(1)
}

impl<R: Real> VggM40<R> {
    pub fn new(seed: u64, prefix: &str, width_mult: f64, in_bins: usize) -> Result<Self> {
        let c1 = scaled(96, width_mult);
        let c2 = scaled(96, width_mult);
        let c3 = scaled(256, width_mult);
        let name = |layer: &str| format!("{prefix}/{layer}");
        let net = VggM40 {
            conv1: ConvUnit::new(seed, &name("conv1"), 1, c1, (5, 7), (1, 2), (0, 0)),
            pool1: MaxPool2d::new((3, 3), (1, 2), (0, 0)),
            conv2: ConvUnit::new(seed, &name("conv2"), c1, c2, (5, 5), (2, 2), (0, 0)),
            pool2: MaxPool2d::new((3, 3), (2, 2), (0, 0)),
            conv3: ConvUnit::new(seed, &name("conv3"), c2, c3, (3, 3), (1, 1), (1, 1)),
            conv4: ConvUnit::new(seed, &name("conv4"), c3, c3, (3, 3), (1, 1), (1, 1)),
            conv5: ConvUnit::new(seed, &name("conv5"), c3, c3, (3, 3), (1, 1), (1, 1)),
            pool5: MaxPool2d::new((3, 3), (2, 2), (1, 1)),
            fc: ConvUnit::new(seed, &name("fc"), c3, 512, (FC_FREQ, 1), (1, 1), (0, 0)),
            in_bins,
        };
        match net.freq_before_fc(in_bins) {
            Some(FC_FREQ) => Ok(net),
            got => Err(Error::Model(format!(
                "VGG-M-40 needs frequency extent {FC_FREQ} entering fc, but {in_bins} \
                 input bins leave {}",
                got.map_or("none".to_string(), |g| g.to_string()),
            ))),
        }
    }

    fn freq_steps(&self) -> Vec<(usize, usize, usize)> {
        self.steps(|k, s, p| (k.0, s.0, p.0))
    }

    fn time_steps(&self) -> Vec<(usize, usize, usize)> {
        self.steps(|k, s, p| (k.1, s.1, p.1))
    }

    fn steps(
        &self,
        axis: impl Fn((usize, usize), (usize, usize), (usize, usize)) -> (usize, usize, usize),
    ) -> Vec<(usize, usize, usize)> {
        let conv = |u: &ConvUnit<R>| axis(u.conv.kernel(), u.conv.stride, u.conv.pad);
        let pool = |p: &MaxPool2d| axis(p.kernel, p.stride, p.pad);
        vec![
            conv(&self.conv1),
            pool(&self.pool1),
            conv(&self.conv2),
            pool(&self.pool2),
            conv(&self.conv3),
            conv(&self.conv4),
            conv(&self.conv5),
            pool(&self.pool5),
        ]
    }

    fn freq_before_fc(&self, bins: usize) -> Option<usize> {
        chain_extent(&self.freq_steps(), bins)
    }

    /// Output frame count for a T-frame input; None when T is too short.
    pub fn out_time(&self, t: usize) -> Option<usize> {
        let mut steps = self.time_steps();
        steps.push((1, 1, 0)); // fc kernel is 1 wide in time
        chain_extent(&steps, t)
    }

    pub fn expected_bins(&self) -> usize {
        self.in_bins
    }

    pub fn check_input(&self, bins: usize) -> Result<()> {
        match self.freq_before_fc(bins) {
            Some(FC_FREQ) => Ok(()),
            got => Err(Error::Model(format!(
                "fc layer spans {FC_FREQ} frequency bins but input with {bins} bins \
                 reaches it with extent {}",
                got.map_or("none".to_string(), |g| g.to_string()),
            ))),
        }
    }

    pub fn forward(&mut self, x: &Array4<R>, mode: BnMode) -> Array4<R> {
        let y = self.conv1.forward(x, mode);
        let y = self.pool1.forward(&y);
        let y = self.conv2.forward(&y, mode);
        let y = self.pool2.forward(&y);
        let y = self.conv3.forward(&y, mode);
        let y = self.conv4.forward(&y, mode);
        let y = self.conv5.forward(&y, mode);
        let y = self.pool5.forward(&y);
        self.fc.forward(&y, mode)
    }

    pub fn infer(&self, x: &Array4<R>) -> Array4<R> {
        let y = self.conv1.infer(x);
        let y = self.pool1.infer(&y);
        let y = self.conv2.infer(&y);
        let y = self.pool2.infer(&y);
        let y = self.conv3.infer(&y);
        let y = self.conv4.infer(&y);
        let y = self.conv5.infer(&y);
        let y = self.pool5.infer(&y);
        self.fc.infer(&y)
    }

    pub fn backward(&mut self, dy: &Array4<R>) -> Array4<R> {
        let d = self.fc.backward(dy);
        let d = self.pool5.backward(&d);
        let d = self.conv5.backward(&d);
        let d = self.conv4.backward(&d);
        let d = self.conv3.backward(&d);
        let d = self.pool2.backward(&d);
        let d = self.conv2.backward(&d);
        let d = self.pool1.backward(&d);
        self.conv1.backward(&d)
    }

    pub fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, R>>) {
        self.conv1.tensors(&format!("{prefix}/conv1"), out);
        self.conv2.tensors(&format!("{prefix}/conv2"), out);
        self.conv3.tensors(&format!("{prefix}/conv3"), out);
        self.conv4.tensors(&format!("{prefix}/conv4"), out);
        self.conv5.tensors(&format!("{prefix}/conv5"), out);
        self.fc.tensors(&format!("{prefix}/fc"), out);
    }
}
