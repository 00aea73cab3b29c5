//! ResNet-34 at one quarter of the usual channel widths, adapted to
//! 257-bin spectrogram input.
//!
//! Input is [N, 1, 257, T]. The stem and the four stages (3/4/6/3 basic
//! blocks at 16/32/64/128 channels) reduce the frequency axis to 9 bins;
//! the final `fc` convolution spans those 9 bins and emits a 512-channel
//! 1 × T′ map. Each basic block is two 3×3 convolutions with batchnorm,
//! a shortcut (1×1 projection when the stride or width changes), and a
//! ReLU after the addition.

use ndarray::Array4;

use super::layers::{
    chain_extent, BatchNorm2d, BnMode, Conv2d, ConvUnit, MaxPool2d, Relu, TensorMut,
};
use super::vgg::scaled;
use crate::error::{Error, Result};
use crate::num::Real;

/// Frequency extent the fc kernel spans.
const FC_FREQ: usize = 9;

struct Projection<R> {
    conv: Conv2d<R>,
    bn: BatchNorm2d<R>,
}

struct BasicBlock<R> {
    conv1: ConvUnit<R>,
    conv2: Conv2d<R>,
    bn2: BatchNorm2d<R>,
    proj: Option<Projection<R>>,
    relu_out: Relu,
    stride: usize,
}

impl<R: Real> BasicBlock<R> {
    fn new(seed: u64, name: &str, c_in: usize, c_out: usize, stride: usize) -> Self {
        let proj = (stride != 1 || c_in != c_out).then(|| Projection {
            conv: Conv2d::new(
                seed,
                &format!("{name}/proj/w"),
                c_in,
                c_out,
                (1, 1),
                (stride, stride),
                (0, 0),
            ),
            bn: BatchNorm2d::new(c_out),
        });
        BasicBlock {
            conv1: ConvUnit::new(
                seed,
                &format!("{name}/conv1"),
                c_in,
                c_out,
                (3, 3),
                (stride, stride),
                (1, 1),
            ),
            conv2: Conv2d::new(
                seed,
                &format!("{name}/conv2/w"),
                c_out,
                c_out,
                (3, 3),
                (1, 1),
                (1, 1),
            ),
            bn2: BatchNorm2d::new(c_out),
            proj,
            relu_out: Relu::new(),
            stride,
        }
    }

    fn forward(&mut self, x: &Array4<R>, mode: BnMode) -> Array4<R> {
        let main = self.conv1.forward(x, mode);
        let main = self.conv2.forward(&main);
        let mut main = self.bn2.forward(&main, mode);
        match &mut self.proj {
            Some(p) => {
                let s = p.conv.forward(x);
                main += &p.bn.forward(&s, mode);
            }
            None => main += x,
        }
        self.relu_out.forward4(&main)
    }

    fn infer(&self, x: &Array4<R>) -> Array4<R> {
        let main = self.conv1.infer(x);
        let mut main = self.bn2.infer(&self.conv2.infer(&main));
        match &self.proj {
            Some(p) => main += &p.bn.infer(&p.conv.infer(x)),
            None => main += x,
        }
        Relu::infer4(&main)
    }

    fn backward(&mut self, dy: &Array4<R>) -> Array4<R> {
        let d = self.relu_out.backward4(dy);
        let dmain = self.bn2.backward(&d);
        let dmain = self.conv2.backward(&dmain);
        let mut dx = self.conv1.backward(&dmain);
        match &mut self.proj {
            Some(p) => {
                let ds = p.bn.backward(&d);
                dx += &p.conv.backward(&ds);
            }
            None => dx += &d,
        }
        dx
    }

    fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, R>>) {
        self.conv1.tensors(&format!("{prefix}/conv1"), out);
        self.conv2.tensors(&format!("{prefix}/conv2"), out);
        self.bn2.tensors(&format!("{prefix}/conv2/bn"), out);
        if let Some(p) = &mut self.proj {
            p.conv.tensors(&format!("{prefix}/proj"), out);
            p.bn.tensors(&format!("{prefix}/proj/bn"), out);
        }
    }
}

pub struct ThinResNet34<R> {
    stem: ConvUnit<R>,
    stem_pool: MaxPool2d,
    blocks: Vec<BasicBlock<R>>,
    fc: ConvUnit<R>,
    in_bins: usize,
}

/// Blocks per stage and base channel widths (quarter of ResNet-34's
/// 64/128/256/512).
const STAGES: [(usize, usize); 4] = [(3, 16), (4, 32), (6, 64), (3, 128)];

impl<R: Real> ThinResNet34<R> {
    pub fn new(seed: u64, prefix: &str, width_mult: f64, in_bins: usize) -> Result<Self> {
        let stem_ch = scaled(16, width_mult);
        let mut blocks = Vec::new();
        let mut c_in = stem_ch;
        for (stage, &(depth, base)) in STAGES.iter().enumerate() {
            let c_out = scaled(base, width_mult);
            for b in 0..depth {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let name = format!("{prefix}/layer{}/block{b}", stage + 1);
                blocks.push(BasicBlock::new(seed, &name, c_in, c_out, stride));
                c_in = c_out;
            }
        }
        let net = ThinResNet34 {
            stem: ConvUnit::new(seed, &format!("{prefix}/conv1"), 1, stem_ch, (7, 7), (2, 2), (3, 3)),
            stem_pool: MaxPool2d::new((3, 3), (2, 2), (1, 1)),
            blocks,
            fc: ConvUnit::new(seed, &format!("{prefix}/fc"), c_in, 512, (FC_FREQ, 1), (1, 1), (0, 0)),
            in_bins,
        };
        match net.freq_before_fc(in_bins) {
            Some(FC_FREQ) => Ok(net),
            got => Err(Error::Model(format!(
                "Thin ResNet-34 needs frequency extent {FC_FREQ} entering fc, but {in_bins} \
                 input bins leave {}",
                got.map_or("none".to_string(), |g| g.to_string()),
            ))),
        }
    }

    fn axis_steps(&self, pick: impl Fn((usize, usize)) -> usize) -> Vec<(usize, usize, usize)> {
        let mut steps = vec![
            (
                pick(self.stem.conv.kernel()),
                pick(self.stem.conv.stride),
                pick(self.stem.conv.pad),
            ),
            (pick(self.stem_pool.kernel), pick(self.stem_pool.stride), pick(self.stem_pool.pad)),
        ];
        for b in &self.blocks {
            steps.push((3, b.stride, 1));
        }
        steps
    }

    fn freq_before_fc(&self, bins: usize) -> Option<usize> {
        chain_extent(&self.axis_steps(|ax| ax.0), bins)
    }

    /// Output frame count for a T-frame input; None when T is too short.
    pub fn out_time(&self, t: usize) -> Option<usize> {
        let mut steps = self.axis_steps(|ax| ax.1);
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
        let y = self.stem.forward(x, mode);
        let mut y = self.stem_pool.forward(&y);
        for b in &mut self.blocks {
            y = b.forward(&y, mode);
        }
        self.fc.forward(&y, mode)
    }

    pub fn infer(&self, x: &Array4<R>) -> Array4<R> {
        let y = self.stem.infer(x);
        let mut y = self.stem_pool.infer(&y);
        for b in &self.blocks {
            y = b.infer(&y);
        }
        self.fc.infer(&y)
    }

    pub fn backward(&mut self, dy: &Array4<R>) -> Array4<R> {
        let mut d = self.fc.backward(dy);
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d);
        }
        let d = self.stem_pool.backward(&d);
        self.stem.backward(&d)
    }

    /// Weight-tensor element count; BN buffers and biases excluded.
    pub fn conv_weight_count(&self) -> usize {
        let mut n = self.stem.conv.w.len() + self.fc.conv.w.len();
        for b in &self.blocks {
            n += b.conv1.conv.w.len() + b.conv2.w.len();
            if let Some(p) = &b.proj {
                n += p.conv.w.len();
            }
        }
        n
    }

    pub fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, R>>) {
        self.stem.tensors(&format!("{prefix}/conv1"), out);
        let mut names = Vec::new();
        for (stage, &(depth, _)) in STAGES.iter().enumerate() {
            for b in 0..depth {
                names.push(format!("{prefix}/layer{}/block{b}", stage + 1));
            }
        }
        for (block, name) in self.blocks.iter_mut().zip(&names) {
            block.tensors(name, out);
        }
        self.fc.tensors(&format!("{prefix}/fc"), out);
    }
}
