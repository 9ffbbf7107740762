//! Compact U-Net: `levels` encoder stages of two 3×3 conv+ReLU blocks with
//! 2×2 max pooling, a bottleneck, and a mirrored decoder that upsamples by
//! nearest neighbour, convolves, and concatenates the matching skip tensor.
//! A final 1×1 convolution produces per-class logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, ConvForward};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub levels: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub in_channels: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            levels: 2,
            base_channels: 8,
            num_classes: 4,
            in_channels: 1,
        }
    }
}

/// One convolution in the network, in evaluation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config(format!(
                "architecture needs non-zero channels and classes: {self:?}"
            )));
        }
        if self.levels > 8 {
            return Err(Error::Config(format!("{} levels is too deep", self.levels)));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Convolutions in evaluation order: encoder, bottleneck, decoder, head.
    pub fn conv_layers(&self) -> Vec<ConvSpec> {
        let conv = |name: String, i, o, k| ConvSpec {
            name,
            in_channels: i,
            out_channels: o,
            kernel: k,
        };
        let mut layers = Vec::new();
        let mut cin = self.in_channels;
        for l in 0..self.levels {
            layers.push(conv(format!("enc{l}.a"), cin, self.width(l), 3));
            layers.push(conv(format!("enc{l}.b"), self.width(l), self.width(l), 3));
            cin = self.width(l);
        }
        let mid = self.width(self.levels);
        layers.push(conv("mid.a".into(), cin, mid, 3));
        layers.push(conv("mid.b".into(), mid, mid, 3));
        for l in (0..self.levels).rev() {
            layers.push(conv(format!("up{l}"), self.width(l + 1), self.width(l), 3));
            layers.push(conv(format!("dec{l}.a"), 2 * self.width(l), self.width(l), 3));
            layers.push(conv(format!("dec{l}.b"), self.width(l), self.width(l), 3));
        }
        layers.push(conv("head".into(), self.base_channels, self.num_classes, 1));
        layers
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[c, h, w] = shape else {
            return Err(Error::Shape(format!("input must be (1, H, W), got {shape:?}")));
        };
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, model expects {}",
                self.in_channels
            )));
        }
        let step = 1usize << self.levels;
        if h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by 2^{} = {step}",
                self.levels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T: Real = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Network weights: for every convolution a `(out, in, k, k)` weight tensor
/// followed by an `(out)` bias tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    arch: Architecture,
    tensors: Vec<NamedTensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// He-normal weights (variance `2 / fan_in`) from a seeded generator, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for layer in arch.conv_layers() {
            let fan_in = layer.in_channels * layer.kernel * layer.kernel;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            let shape = [layer.out_channels, layer.in_channels, layer.kernel, layer.kernel];
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
                .collect();
            tensors.push(NamedTensor {
                name: format!("{}.weight", layer.name),
                tensor: Tensor::from_vec(&shape, data)?,
            });
            tensors.push(NamedTensor {
                name: format!("{}.bias", layer.name),
                tensor: Tensor::zeros(&[layer.out_channels]),
            });
        }
        Ok(ModelParams { arch, tensors })
    }

    /// Reassembles parameters, checking every tensor against the architecture.
    pub fn from_tensors(arch: Architecture, tensors: Vec<NamedTensor<T>>) -> Result<Self> {
        arch.validate()?;
        let layers = arch.conv_layers();
        if tensors.len() != 2 * layers.len() {
            return Err(Error::Shape(format!(
                "architecture needs {} tensors, got {}",
                2 * layers.len(),
                tensors.len()
            )));
        }
        for (layer, pair) in layers.iter().zip(tensors.chunks(2)) {
            let wshape = [layer.out_channels, layer.in_channels, layer.kernel, layer.kernel];
            let expect = [
                (format!("{}.weight", layer.name), wshape.to_vec()),
                (format!("{}.bias", layer.name), vec![layer.out_channels]),
            ];
            for (t, (name, shape)) in pair.iter().zip(expect) {
                if t.name != name || t.tensor.shape() != shape.as_slice() {
                    return Err(Error::Shape(format!(
                        "expected {name} {shape:?}, found {} {:?}",
                        t.name,
                        t.tensor.shape()
                    )));
                }
            }
        }
        Ok(ModelParams { arch, tensors })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn tensors(&self) -> &[NamedTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .map(|t| Tensor::zeros(t.tensor.shape()))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch,
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    tensor: t.tensor.cast(),
                })
                .collect(),
        }
    }

    fn weight(&self, layer: usize) -> &Tensor<T> {
        &self.tensors[2 * layer].tensor
    }

    fn bias(&self, layer: usize) -> &[T] {
        self.tensors[2 * layer + 1].tensor.data()
    }

    fn conv(
        &self,
        tape: &mut Tape<T>,
        layer: usize,
        input: &Tensor<T>,
        relu: bool,
    ) -> Result<Tensor<T>> {
        let ConvForward { mut output, input } =
            ops::conv2d_forward(input, self.weight(layer), self.bias(layer))?;
        if relu {
            ops::relu_in_place(&mut output);
        }
        tape.convs[layer] = Some(ConvRecord {
            input,
            activated: relu.then(|| output.clone()),
        });
        Ok(output)
    }

    /// Logits for a `(1, H, W)` image.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_recorded(image)?.0)
    }

    /// Logits plus the tape needed by [`ModelParams::backward`].
    pub fn forward_recorded(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        self.arch.check_input(image.shape())?;
        let levels = self.arch.levels;
        let mut tape = Tape {
            convs: vec![None; self.arch.conv_layers().len()],
            pools: Vec::with_capacity(levels),
            logits_shape: Vec::new(),
        };
        let mut layer = 0;
        let mut x = image.clone();
        let mut skips = Vec::with_capacity(levels);
        for _ in 0..levels {
            x = self.conv(&mut tape, layer, &x, true)?;
            x = self.conv(&mut tape, layer + 1, &x, true)?;
            layer += 2;
            let (pooled, idx) = ops::max_pool2(&x)?;
            tape.pools.push((x.shape().to_vec(), idx));
            skips.push(x);
            x = pooled;
        }
        x = self.conv(&mut tape, layer, &x, true)?;
        x = self.conv(&mut tape, layer + 1, &x, true)?;
        layer += 2;
        for skip in skips.iter().rev() {
            let up = ops::upsample2(&x)?;
            x = self.conv(&mut tape, layer, &up, true)?;
            let joined = ops::concat_channels(skip, &x)?;
            x = self.conv(&mut tape, layer + 1, &joined, true)?;
            x = self.conv(&mut tape, layer + 2, &x, true)?;
            layer += 3;
        }
        let logits = self.conv(&mut tape, layer, &x, false)?;
        tape.logits_shape = logits.shape().to_vec();
        Ok((logits, tape))
    }

    fn conv_backward(
        &self,
        tape: &Tape<T>,
        layer: usize,
        mut grad: Tensor<T>,
        grads: &mut [Tensor<T>],
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let record = tape.convs[layer].as_ref().ok_or(Error::NoForwardPass)?;
        if let Some(out) = &record.activated {
            ops::relu_backward_in_place(out, &mut grad);
        }
        let (gw, gb) = grads.split_at_mut(2 * layer + 1);
        ops::conv2d_backward_accumulate(
            &record.input,
            self.weight(layer),
            &grad,
            gw[2 * layer].data_mut(),
            gb[0].data_mut(),
            want_input,
        )
    }

    /// Adds this sample's parameter gradients to `grads` and returns nothing
    /// else; `logit_grad` is the loss derivative with respect to the logits.
    pub fn backward_accumulate(
        &self,
        tape: &Tape<T>,
        logit_grad: &Tensor<T>,
        grads: &mut [Tensor<T>],
    ) -> Result<()> {
        if tape.convs.is_empty() || tape.convs.iter().any(Option::is_none) {
            return Err(Error::NoForwardPass);
        }
        if logit_grad.shape() != tape.logits_shape.as_slice() {
            return Err(Error::Shape(format!(
                "logit gradient {:?} does not match logits {:?}",
                logit_grad.shape(),
                tape.logits_shape
            )));
        }
        if grads.len() != self.tensors.len() {
            return Err(Error::Shape("gradient buffer does not match parameters".into()));
        }
        let levels = self.arch.levels;
        let n_layers = tape.convs.len();
        let mut layer = n_layers - 1;
        let mut g = self
            .conv_backward(tape, layer, logit_grad.clone(), grads, true)?
            .expect("input gradient");
        let mut skip_grads = vec![None; levels];
        for l in 0..levels {
            // decoder stage l occupies layers [layer-3, layer-1]
            layer -= 3;
            g = self
                .conv_backward(tape, layer + 2, g, grads, true)?
                .expect("input gradient");
            g = self
                .conv_backward(tape, layer + 1, g, grads, true)?
                .expect("input gradient");
            let (g_skip, g_up) = ops::split_channels(&g, self.arch.width(l))?;
            skip_grads[l] = Some(g_skip);
            g = self
                .conv_backward(tape, layer, g_up, grads, true)?
                .expect("input gradient");
            g = ops::upsample2_backward(&g)?;
        }
        layer -= 2;
        g = self
            .conv_backward(tape, layer + 1, g, grads, true)?
            .expect("input gradient");
        g = self
            .conv_backward(tape, layer, g, grads, true)?
            .expect("input gradient");
        for l in (0..levels).rev() {
            let (shape, idx) = &tape.pools[l];
            let mut gx = ops::max_pool2_backward(shape, idx, &g)?;
            let skip = skip_grads[l].take().expect("skip gradient");
            for (a, b) in gx.data_mut().iter_mut().zip(skip.data()) {
                *a = *a + *b;
            }
            layer -= 2;
            let gi = self
                .conv_backward(tape, layer + 1, gx, grads, true)?
                .expect("input gradient");
            match self.conv_backward(tape, layer, gi, grads, l > 0)? {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(())
    }

    /// Parameter gradients of one sample, bundled with the logit gradient they were seeded from.
    pub fn backward(&self, tape: &Tape<T>, logit_grad: &Tensor<T>) -> Result<GradientBundle<T>> {
        let mut grads = self.zero_grads();
        self.backward_accumulate(tape, logit_grad, &mut grads)?;
        Ok(GradientBundle {
            parameter_grads: grads,
            logit_grads: logit_grad.clone(),
        })
    }
}

#[derive(Clone)]
struct ConvRecord<T> {
    input: ops::PaddedInput<T>,
    activated: Option<Tensor<T>>,
}

/// Intermediate values of one forward pass, consumed by the backward pass.
#[derive(Clone, Default)]
pub struct Tape<T: Real> {
    convs: Vec<Option<ConvRecord<T>>>,
    pools: Vec<(Vec<usize>, Vec<u32>)>,
    logits_shape: Vec<usize>,
}

impl<T: Real> Tape<T> {
    pub fn is_empty(&self) -> bool {
        self.convs.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct GradientBundle<T: Real = f32> {
    pub parameter_grads: Vec<Tensor<T>>,
    pub logit_grads: Tensor<T>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Architecture {
        Architecture {
            levels: 2,
            base_channels: 2,
            num_classes: 4,
            in_channels: 1,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = ModelParams::<f32>::init(Architecture::default(), 9).unwrap();
        let b = ModelParams::<f32>::init(Architecture::default(), 9).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::<f32>::init(Architecture::default(), 10).unwrap();
        assert_ne!(a, c);
        for t in a.tensors().iter().filter(|t| t.name.ends_with(".bias")) {
            assert!(t.tensor.data().iter().all(|&v| v == 0.0), "{}", t.name);
        }
    }

    #[test]
    fn init_variance_follows_fan_in() {
        let p = ModelParams::<f64>::init(Architecture::default(), 4).unwrap();
        let mut checked = 0;
        for t in p.tensors().iter().filter(|t| t.name.ends_with(".weight")) {
            if t.tensor.len() < 1024 {
                continue;
            }
            let s = t.tensor.shape();
            let fan_in = (s[1] * s[2] * s[3]) as f64;
            let n = t.tensor.len() as f64;
            let mean = t.tensor.sum_f64() / n;
            let var = t.tensor.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let expected = 2.0 / fan_in;
            assert!((var / expected - 1.0).abs() < 0.2, "{}: {var} vs {expected}", t.name);
            checked += 1;
        }
        assert!(checked >= 4);
    }

    #[test]
    fn zero_channel_architecture_is_rejected() {
        let arch = Architecture {
            num_classes: 0,
            ..Architecture::default()
        };
        assert!(matches!(ModelParams::<f32>::init(arch, 0), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shape_and_purity() {
        let p = ModelParams::<f32>::init(Architecture::default(), 1).unwrap();
        let img = Tensor::from_vec(&[1, 64, 64], (0..4096).map(|i| (i % 17) as f32 / 17.0).collect())
            .unwrap();
        let a = p.forward(&img).unwrap();
        assert_eq!(a.shape(), &[4, 64, 64]);
        assert_eq!(a, p.forward(&img).unwrap());
    }

    #[test]
    fn forward_rejects_indivisible_input() {
        let p = ModelParams::<f32>::init(Architecture::default(), 1).unwrap();
        assert!(matches!(p.forward(&Tensor::zeros(&[1, 30, 32])), Err(Error::Shape(_))));
        assert!(matches!(p.forward(&Tensor::zeros(&[2, 32, 32])), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_image_propagates_only_the_head_bias() {
        let mut p = ModelParams::<f64>::init(small(), 3).unwrap();
        let head_bias = [0.25, -1.0, 0.5, 2.0];
        let last = p.tensors().len() - 1;
        p.tensors_mut()[last].tensor.data_mut().copy_from_slice(&head_bias);
        let logits = p.forward(&Tensor::zeros(&[1, 8, 8])).unwrap();
        for (c, &b) in head_bias.iter().enumerate() {
            assert!(logits.channel(c).iter().all(|&v| v == b));
        }
    }

    #[test]
    fn backward_without_forward_is_rejected() {
        let p = ModelParams::<f64>::init(small(), 3).unwrap();
        let tape = Tape::default();
        assert!(matches!(
            p.backward(&tape, &Tensor::zeros(&[4, 8, 8])),
            Err(Error::NoForwardPass)
        ));
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let p = ModelParams::<f64>::init(small(), 3).unwrap();
        let img = Tensor::filled(&[1, 8, 8], 0.5);
        let (_, tape) = p.forward_recorded(&img).unwrap();
        let bundle = p.backward(&tape, &Tensor::zeros(&[4, 8, 8])).unwrap();
        assert!(bundle
            .parameter_grads
            .iter()
            .all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn from_tensors_checks_layout() {
        let p = ModelParams::<f32>::init(small(), 3).unwrap();
        let mut tensors = p.tensors().to_vec();
        assert!(ModelParams::from_tensors(small(), tensors.clone()).is_ok());
        tensors.swap(0, 1);
        assert!(ModelParams::from_tensors(small(), tensors).is_err());
    }
}
