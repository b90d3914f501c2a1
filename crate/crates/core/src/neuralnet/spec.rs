use serde::{Deserialize, Serialize};

use crate::error::{PallorError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    #[default]
    Linear,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
        }
    }
}

/// One layer of a sequential network. Learnable layers carry their
/// activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
        #[serde(default)]
        activation: Activation,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default)]
        activation: Activation,
    },
    Upsample2x,
    Flatten,
}

impl LayerSpec {
    pub fn dense(input: usize, output: usize, activation: Activation) -> Self {
        LayerSpec::Dense { input, output, activation }
    }

    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, activation: Activation) -> Self {
        LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, activation }
    }

    /// `(weight count, bias count)`.
    pub fn param_counts(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { input, output, .. } => (input * output, output),
            LayerSpec::Conv2d { in_ch, out_ch, kernel, .. } => (out_ch * in_ch * kernel * kernel, out_ch),
            LayerSpec::Upsample2x | LayerSpec::Flatten => (0, 0),
        }
    }

    pub fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { input, output, .. } => (input, output),
            LayerSpec::Conv2d { in_ch, out_ch, kernel, .. } => (in_ch * kernel * kernel, out_ch * kernel * kernel),
            LayerSpec::Upsample2x | LayerSpec::Flatten => (0, 0),
        }
    }

    pub fn activation(&self) -> Activation {
        match *self {
            LayerSpec::Dense { activation, .. } | LayerSpec::Conv2d { activation, .. } => activation,
            _ => Activation::Linear,
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let err = |msg: String| Err(PallorError::Shape(msg));
        match *self {
            LayerSpec::Dense { input: n, output, .. } => match input {
                [m] if *m == n => Ok(vec![output]),
                _ => err(format!("dense expects [{n}], got {input:?}")),
            },
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, .. } => {
                let [c, h, w] = input else {
                    return err(format!("conv2d expects [C,H,W], got {input:?}"));
                };
                if *c != in_ch {
                    return err(format!("conv2d expects {in_ch} channels, got {c}"));
                }
                if kernel == 0 || stride == 0 {
                    return err("conv2d kernel and stride must be positive".into());
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return err(format!("conv2d kernel {kernel} larger than padded {h}x{w}"));
                }
                Ok(vec![
                    out_ch,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::Upsample2x => match input {
                [c, h, w] => Ok(vec![*c, h * 2, w * 2]),
                _ => err(format!("upsample2x expects [C,H,W], got {input:?}")),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Short human-readable summary, e.g. `3→16 relu`.
    pub fn summary(&self) -> String {
        match *self {
            LayerSpec::Dense { input, output, activation } => format!("{input}→{output} {}", activation.name()),
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, activation } => {
                format!("conv {in_ch}→{out_ch} k{kernel} s{stride} p{padding} {}", activation.name())
            }
            LayerSpec::Upsample2x => "upsample2x".into(),
            LayerSpec::Flatten => "flatten".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl NetworkSpec {
    /// Shapes flowing through the network: `shapes[0]` is the input,
    /// `shapes[i + 1]` is the output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(PallorError::Shape("network needs at least one layer".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(PallorError::Shape(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| PallorError::Shape(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| {
            let (w, b) = l.param_counts();
            w + b
        }).sum()
    }

    pub fn learnable_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.is_learnable()).count()
    }

    /// Default Hb regressor: 3→16 relu, 16→8 relu, 8→1 linear.
    pub fn regressor(seed: u64) -> Self {
        use Activation::*;
        NetworkSpec {
            input_shape: vec![3],
            layers: vec![
                LayerSpec::dense(3, 16, Relu),
                LayerSpec::dense(16, 8, Relu),
                LayerSpec::dense(8, 1, Linear),
            ],
            seed,
        }
    }

    /// Encoder–decoder segmenter: `down` stride-2 convolutions, one
    /// bottleneck convolution, and `down` upsample+convolution stages. The
    /// last stage maps back to 3 channels with a linear output (callers clamp).
    /// A sigmoid there saturates on the mostly-zero target. `widths` gives the
    /// channel count after each downsampling stage.
    pub fn segmenter(resolution: usize, widths: &[usize], seed: u64) -> Self {
        use Activation::*;
        let mut layers = Vec::new();
        let mut ch = 3;
        for &w in widths {
            layers.push(LayerSpec::conv(ch, w, 3, 2, 1, Relu));
            ch = w;
        }
        layers.push(LayerSpec::conv(ch, ch, 3, 1, 1, Relu));
        for (i, _) in widths.iter().enumerate().rev() {
            let out = if i == 0 { 3 } else { widths[i - 1] };
            layers.push(LayerSpec::Upsample2x);
            layers.push(LayerSpec::conv(ch, out, 3, 1, 1, if i == 0 { Linear } else { Relu }));
            ch = out;
        }
        NetworkSpec { input_shape: vec![3, resolution, resolution], layers, seed }
    }
}
