//! Residual backbone producing four feature maps at strides 4, 8, 16, 32.

use candle_core::Tensor;

use crate::error::{ensure, Result};
use crate::nn::{Conv2d, InitScale, Mode, Norm, NormKind, ParamBuilder};

/// Input height and width must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    norm1: Norm,
    conv2: Conv2d,
    norm2: Norm,
    shortcut: Option<(Conv2d, Norm)>,
}

impl BasicBlock {
    fn new(b: &mut ParamBuilder, path: &str, in_ch: usize, out_ch: usize, stride: usize, norm: NormKind) -> Result<Self> {
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(b, &format!("{path}.down"), in_ch, out_ch, 1, stride, false, InitScale::FanIn)?,
                Norm::new(b, &format!("{path}.down_norm"), norm, out_ch)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(b, &format!("{path}.conv1"), in_ch, out_ch, 3, stride, false, InitScale::He)?,
            norm1: Norm::new(b, &format!("{path}.norm1"), norm, out_ch)?,
            conv2: Conv2d::new(b, &format!("{path}.conv2"), out_ch, out_ch, 3, 1, false, InitScale::He)?,
            norm2: Norm::new(b, &format!("{path}.norm2"), norm, out_ch)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.norm1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let y = self.norm2.forward(&self.conv2.forward(&y)?, mode)?;
        let identity = match &self.shortcut {
            Some((conv, norm)) => norm.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }
}

/// Feature maps F1..F4 (strides 4, 8, 16, 32).
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub levels: [Tensor; 4],
}

impl EncoderOutput {
    /// Feature map of hierarchy level 1..=4.
    pub fn level(&self, level: usize) -> &Tensor {
        &self.levels[level - 1]
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    stem: Conv2d,
    stem_norm: Norm,
    stages: Vec<Vec<BasicBlock>>,
    widths: [usize; 4],
}

impl Encoder {
    pub fn new(b: &mut ParamBuilder, path: &str, widths: [usize; 4], blocks_per_level: usize, norm: NormKind) -> Result<Self> {
        ensure!(blocks_per_level >= 1, "blocks_per_level must be >= 1");
        ensure!(
            widths.iter().all(|&w| w > 0) && widths.windows(2).all(|p| p[0] <= p[1]),
            "encoder widths must be positive and nondecreasing, got {widths:?}"
        );
        let stem = Conv2d::new(b, &format!("{path}.stem"), 3, widths[0], 7, 2, false, InitScale::He)?;
        let stem_norm = Norm::new(b, &format!("{path}.stem_norm"), norm, widths[0])?;
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = widths[0];
        for (i, &out_ch) in widths.iter().enumerate() {
            let blocks = (0..blocks_per_level)
                .map(|k| {
                    let stride = if i > 0 && k == 0 { 2 } else { 1 };
                    let cin = if k == 0 { in_ch } else { out_ch };
                    BasicBlock::new(b, &format!("{path}.level{}.block{k}", i + 1), cin, out_ch, stride, norm)
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            in_ch = out_ch;
        }
        Ok(Self {
            stem,
            stem_norm,
            stages,
            widths,
        })
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    /// Run the backbone on a `(batch, 3, H, W)` tensor.
    pub fn encode(&self, image: &Tensor, mode: Mode) -> Result<EncoderOutput> {
        let (_, c, h, w) = image.dims4()?;
        ensure!(c == 3, "encoder expects 3 input channels, got {c}");
        ensure!(
            h % INPUT_MULTIPLE == 0 && w % INPUT_MULTIPLE == 0 && h > 0 && w > 0,
            "input dims {h}x{w} must be positive multiples of {INPUT_MULTIPLE}"
        );
        let mut x = self.stem_norm.forward(&self.stem.forward(image)?, mode)?.relu()?.max_pool2d(2)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x, mode)?;
            }
            outs.push(x.clone());
        }
        let levels: [Tensor; 4] = outs.try_into().expect("four stages");
        Ok(EncoderOutput { levels })
    }
}
