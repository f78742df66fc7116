//! Per-level road-border detector used for deep supervision.

use candle_core::Tensor;

use crate::error::{ensure, Result};
use crate::nn::{Conv2d, InitScale, ParamBuilder};

#[derive(Debug, Clone)]
pub struct BorderOutput {
    /// Border probability, `(batch, 1, h, w)`.
    pub prob: Tensor,
    /// Border feature X_b, the activation feeding the probability projection.
    pub feature: Tensor,
}

/// Two 3×3 convolutions with a logistic output.
#[derive(Debug, Clone)]
pub struct BorderHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl BorderHead {
    pub fn new(b: &mut ParamBuilder, path: &str, in_ch: usize, border_width: usize) -> Result<Self> {
        ensure!(border_width > 0, "border feature width must be positive");
        Ok(Self {
            conv1: Conv2d::new(b, &format!("{path}.conv1"), in_ch, border_width, 3, 1, true, InitScale::He)?,
            conv2: Conv2d::new(b, &format!("{path}.conv2"), border_width, 1, 3, 1, true, InitScale::FanIn)?,
        })
    }

    pub fn detect_border(&self, road_feature: &Tensor) -> Result<BorderOutput> {
        let (_, c, _, _) = road_feature.dims4()?;
        let expected = self.conv1.weight.dims()[1];
        ensure!(c == expected, "border head expects {expected} channels, got {c}");
        let feature = self.conv1.forward(road_feature)?.relu()?;
        let prob = candle_nn::ops::sigmoid(&self.conv2.forward(&feature)?)?;
        Ok(BorderOutput { prob, feature })
    }
}
