//! The four networks: utility and privacy classifiers (same CNN, different
//! heads), the UNET-S sanitizer, and the stochastic resample-then-UNET wrapper.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, ImageShape, Renderer, Sample};
use crate::error::{Error, Result};
use crate::nn::layers::{
    concat_channels, leaky_relu, leaky_relu_backward, maxpool2, maxpool2_backward, relu, sigmoid,
    sigmoid_backward, softmax_rows, split_channels, upsample2, upsample2_backward,
};
use crate::nn::{Conv2d, Dense, ParamGrad, Tensor};

pub const LEAKY_SLOPE: f32 = 0.2;
pub const HIDDEN_UNITS: usize = 64;

fn check_shape(expected: ImageShape, x: &Tensor) -> Result<()> {
    let [_, c, h, w] = x.shape();
    if (c, h, w) != expected {
        return Err(Error::Shape {
            expected,
            actual: (c, h, w),
        });
    }
    Ok(())
}

fn hash_slices<'a>(slices: impl IntoIterator<Item = &'a [f32]>) -> String {
    let mut hasher = Sha256::new();
    for s in slices {
        for v in s {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Convolutional feature extractor shared by both classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub input_shape: ImageShape,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub fc: Dense,
}

impl Backbone {
    fn new<R: Rng>(input_shape: ImageShape, rng: &mut R) -> Self {
        let (c, h, w) = input_shape;
        Self {
            input_shape,
            conv1: Conv2d::new(c, 16, 3, 1, 1, rng),
            conv2: Conv2d::new(16, 32, 3, 1, 1, rng),
            fc: Dense::new(32 * (h / 4) * (w / 4), HIDDEN_UNITS, rng),
        }
    }
}

/// Intermediate activations of one classifier forward pass.
#[derive(Debug, Clone)]
pub struct ClassifierTrace {
    x: Tensor,
    a1: Tensor,
    p1: Tensor,
    arg1: Vec<u32>,
    a2: Tensor,
    p2: Tensor,
    arg2: Vec<u32>,
    /// Backbone output after ReLU, `[batch, HIDDEN_UNITS]`.
    pub features: Vec<f32>,
    /// Softmax output, `[batch, num_classes]`.
    pub probs: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ClassifierGrads {
    pub conv1: ParamGrad,
    pub conv2: ParamGrad,
    pub fc: ParamGrad,
    pub head: ParamGrad,
}

impl ClassifierGrads {
    pub fn clear(&mut self) {
        for g in [&mut self.conv1, &mut self.conv2, &mut self.fc, &mut self.head] {
            g.clear();
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in [&mut self.conv1, &mut self.conv2, &mut self.fc, &mut self.head] {
            g.scale(s);
        }
    }

    pub fn all(&self) -> Vec<&[f32]> {
        let mut out = Vec::with_capacity(8);
        for g in [&self.conv1, &self.conv2, &self.fc, &self.head] {
            out.push(g.weight.as_slice());
            out.push(g.bias.as_slice());
        }
        out
    }

    pub fn head(&self) -> Vec<&[f32]> {
        vec![&self.head.weight, &self.head.bias]
    }
}

/// Small CNN producing a categorical posterior. The final dense layer (the
/// head) can be trained on its own while the backbone stays frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub backbone: Backbone,
    pub head: Dense,
    pub num_classes: usize,
    pub frozen_backbone: bool,
}

impl Classifier {
    pub fn new(input_shape: ImageShape, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(input_shape, &mut rng);
        Self {
            backbone,
            head: Dense::new(HIDDEN_UNITS, num_classes, &mut rng),
            num_classes,
            frozen_backbone: false,
        }
    }

    pub fn input_shape(&self) -> ImageShape {
        self.backbone.input_shape
    }

    pub fn grad_buffer(&self) -> ClassifierGrads {
        ClassifierGrads {
            conv1: self.backbone.conv1.grad_buffer(),
            conv2: self.backbone.conv2.grad_buffer(),
            fc: self.backbone.fc.grad_buffer(),
            head: self.head.grad_buffer(),
        }
    }

    pub fn forward_trace(&self, x: &Tensor) -> Result<ClassifierTrace> {
        check_shape(self.input_shape(), x)?;
        let b = x.batch();
        let bb = &self.backbone;
        let mut a1 = bb.conv1.forward(x);
        relu(&mut a1);
        let (p1, arg1) = maxpool2(&a1);
        let mut a2 = bb.conv2.forward(&p1);
        relu(&mut a2);
        let (p2, arg2) = maxpool2(&a2);
        let mut features = bb.fc.forward(p2.data(), b);
        features.iter_mut().for_each(|v| *v = v.max(0.0));
        let logits = self.head.forward(&features, b);
        let probs = softmax_rows(&logits, self.num_classes);
        Ok(ClassifierTrace {
            x: x.clone(),
            a1,
            p1,
            arg1,
            a2,
            p2,
            arg2,
            features,
            probs,
        })
    }

    /// Posterior rows, `[batch, num_classes]` flattened.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<f32>> {
        Ok(self.forward_trace(x)?.probs)
    }

    /// Posterior of a single `C×H×W` image.
    pub fn predict(&self, image: &[f32]) -> Result<Vec<f32>> {
        let (c, h, w) = self.input_shape();
        if image.len() != c * h * w {
            return Err(Error::domain(format!(
                "image has {} values, classifier expects {}",
                image.len(),
                c * h * w
            )));
        }
        self.forward(&Tensor::from_vec([1, c, h, w], image.to_vec()))
    }

    /// Back-propagate logit gradients. Head gradients are accumulated when
    /// `grads` is given; backbone gradients only if `train_backbone` is also set.
    pub fn backward(
        &self,
        trace: &ClassifierTrace,
        dlogits: &[f32],
        mut grads: Option<&mut ClassifierGrads>,
        train_backbone: bool,
        want_dx: bool,
    ) -> Option<Tensor> {
        let b = trace.x.batch();
        let bb = &self.backbone;
        let need_backbone = want_dx || (train_backbone && grads.is_some());
        let mut dfeat = self
            .head
            .backward(&trace.features, dlogits, b, grads.as_deref_mut().map(|g| &mut g.head), need_backbone)?;
        for (g, f) in dfeat.iter_mut().zip(&trace.features) {
            if *f <= 0.0 {
                *g = 0.0;
            }
        }
        let mut bgrads = if train_backbone { grads } else { None };
        let dp2 = bb.fc.backward(
            trace.p2.data(),
            &dfeat,
            b,
            bgrads.as_deref_mut().map(|g| &mut g.fc),
            true,
        )?;
        let dp2 = Tensor::from_vec(trace.p2.shape(), dp2);
        let mut da2 = maxpool2_backward(trace.a2.shape(), &trace.arg2, &dp2);
        leaky_relu_backward(trace.a2.data(), da2.data_mut(), 0.0);
        let dp1 = bb
            .conv2
            .backward(&trace.p1, &da2, bgrads.as_deref_mut().map(|g| &mut g.conv2), true)?;
        let mut da1 = maxpool2_backward(trace.a1.shape(), &trace.arg1, &dp1);
        leaky_relu_backward(trace.a1.data(), da1.data_mut(), 0.0);
        bb.conv1
            .backward(&trace.x, &da1, bgrads.map(|g| &mut g.conv1), want_dx)
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut [f32]> {
        let bb = &mut self.backbone;
        vec![
            &mut bb.conv1.weight,
            &mut bb.conv1.bias,
            &mut bb.conv2.weight,
            &mut bb.conv2.bias,
            &mut bb.fc.weight,
            &mut bb.fc.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    pub fn head_params_mut(&mut self) -> Vec<&mut [f32]> {
        vec![&mut self.head.weight, &mut self.head.bias]
    }

    pub fn backbone_hash(&self) -> String {
        let bb = &self.backbone;
        hash_slices([
            bb.conv1.weight.as_slice(),
            &bb.conv1.bias,
            &bb.conv2.weight,
            &bb.conv2.bias,
            &bb.fc.weight,
            &bb.fc.bias,
        ])
    }

    /// SHA-256 over every parameter, hex encoded.
    pub fn param_hash(&self) -> String {
        let bb = &self.backbone;
        hash_slices([
            bb.conv1.weight.as_slice(),
            &bb.conv1.bias,
            &bb.conv2.weight,
            &bb.conv2.bias,
            &bb.fc.weight,
            &bb.fc.bias,
            &self.head.weight,
            &self.head.bias,
        ])
    }
}

/// Copy of `model` with the same (frozen) backbone and a freshly initialized head.
pub fn clone_final_layer(model: &Classifier, seed: u64) -> Classifier {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Classifier {
        backbone: model.backbone.clone(),
        head: Dense::new(HIDDEN_UNITS, model.num_classes, &mut rng),
        num_classes: model.num_classes,
        frozen_backbone: true,
    }
}

/// Three-level UNET with two skip connections and a sigmoid output, mapping
/// `C×H×W` images to the same space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnetS {
    pub input_shape: ImageShape,
    pub enc1: Conv2d,
    pub down1: Conv2d,
    pub down2: Conv2d,
    pub mid: Conv2d,
    pub up1: Conv2d,
    pub up2: Conv2d,
    pub out: Conv2d,
}

#[derive(Debug, Clone)]
pub struct UnetTrace {
    x: Tensor,
    e1: Tensor,
    d1: Tensor,
    d2: Tensor,
    m: Tensor,
    u1_in: Tensor,
    u1: Tensor,
    u2_in: Tensor,
    u2: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct UnetGrads {
    pub layers: [ParamGrad; 7],
}

impl UnetGrads {
    pub fn clear(&mut self) {
        self.layers.iter_mut().for_each(ParamGrad::clear);
    }

    pub fn scale(&mut self, s: f32) {
        self.layers.iter_mut().for_each(|g| g.scale(s));
    }

    pub fn all(&self) -> Vec<&[f32]> {
        self.layers
            .iter()
            .flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()])
            .collect()
    }
}

impl UnetS {
    pub fn new(input_shape: ImageShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = input_shape.0;
        Self {
            input_shape,
            enc1: Conv2d::new(c, 16, 3, 1, 1, &mut rng),
            down1: Conv2d::new(16, 32, 3, 2, 1, &mut rng),
            down2: Conv2d::new(32, 64, 3, 2, 1, &mut rng),
            mid: Conv2d::new(64, 64, 3, 1, 1, &mut rng),
            up1: Conv2d::new(96, 32, 3, 1, 1, &mut rng),
            up2: Conv2d::new(48, 16, 3, 1, 1, &mut rng),
            out: Conv2d::new(16, c, 1, 1, 0, &mut rng),
        }
    }

    /// Random weights plus a pass-through path `x → enc1 → up2 → out`, so the
    /// untrained network starts close to the identity: each output channel is
    /// `sigmoid(4x − 2)` of its input channel, perturbed by the random paths.
    pub fn identity_leaning(input_shape: ImageShape, seed: u64) -> Self {
        let mut u = Self::new(input_shape, seed);
        let c = input_shape.0;
        let center = |conv: &Conv2d, o: usize, i: usize| {
            let k = conv.kernel;
            ((o * conv.in_ch + i) * k + k / 2) * k + k / 2
        };
        let skip_offset = u.up2.in_ch - u.enc1.out_ch;
        for ch in 0..c {
            let e = center(&u.enc1, ch, ch);
            u.enc1.weight[e] += 1.0;
            let p = center(&u.up2, ch, skip_offset + ch);
            u.up2.weight[p] += 1.0;
            let o = center(&u.out, ch, ch);
            u.out.weight[o] += 4.0;
            u.out.bias[ch] -= 2.0;
        }
        u
    }

    /// All weights and biases zero: the output is the constant 0.5 image.
    pub fn zeroed(input_shape: ImageShape) -> Self {
        let c = input_shape.0;
        Self {
            input_shape,
            enc1: Conv2d::zeroed(c, 16, 3, 1, 1),
            down1: Conv2d::zeroed(16, 32, 3, 2, 1),
            down2: Conv2d::zeroed(32, 64, 3, 2, 1),
            mid: Conv2d::zeroed(64, 64, 3, 1, 1),
            up1: Conv2d::zeroed(96, 32, 3, 1, 1),
            up2: Conv2d::zeroed(48, 16, 3, 1, 1),
            out: Conv2d::zeroed(16, c, 1, 1, 0),
        }
    }

    pub fn layers(&self) -> [&Conv2d; 7] {
        [&self.enc1, &self.down1, &self.down2, &self.mid, &self.up1, &self.up2, &self.out]
    }

    pub fn layers_mut(&mut self) -> [&mut Conv2d; 7] {
        [
            &mut self.enc1,
            &mut self.down1,
            &mut self.down2,
            &mut self.mid,
            &mut self.up1,
            &mut self.up2,
            &mut self.out,
        ]
    }

    pub fn grad_buffer(&self) -> UnetGrads {
        UnetGrads {
            layers: self.layers().map(Conv2d::grad_buffer),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_hash(&self) -> String {
        hash_slices(
            self.layers()
                .into_iter()
                .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]),
        )
    }

    pub fn forward_trace(&self, x: &Tensor) -> Result<UnetTrace> {
        check_shape(self.input_shape, x)?;
        let act = |t: &mut Tensor| leaky_relu(t, LEAKY_SLOPE);
        let mut e1 = self.enc1.forward(x);
        act(&mut e1);
        let mut d1 = self.down1.forward(&e1);
        act(&mut d1);
        let mut d2 = self.down2.forward(&d1);
        act(&mut d2);
        let mut m = self.mid.forward(&d2);
        act(&mut m);
        let u1_in = concat_channels(&upsample2(&m), &d1);
        let mut u1 = self.up1.forward(&u1_in);
        act(&mut u1);
        let u2_in = concat_channels(&upsample2(&u1), &e1);
        let mut u2 = self.up2.forward(&u2_in);
        act(&mut u2);
        let mut output = self.out.forward(&u2);
        sigmoid(&mut output);
        Ok(UnetTrace {
            x: x.clone(),
            e1,
            d1,
            d2,
            m,
            u1_in,
            u1,
            u2_in,
            u2,
            output,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(x)?.output)
    }

    /// Accumulate parameter gradients for `dy = dL/d(output)`.
    pub fn backward(
        &self,
        trace: &UnetTrace,
        dy: &Tensor,
        grads: &mut UnetGrads,
        want_dx: bool,
    ) -> Option<Tensor> {
        let [g_enc1, g_down1, g_down2, g_mid, g_up1, g_up2, g_out] = &mut grads.layers;
        let mut d = dy.clone();
        sigmoid_backward(trace.output.data(), d.data_mut());
        let mut du2 = self.out.backward(&trace.u2, &d, Some(g_out), true)?;
        leaky_relu_backward(trace.u2.data(), du2.data_mut(), LEAKY_SLOPE);
        let du2_in = self.up2.backward(&trace.u2_in, &du2, Some(g_up2), true)?;
        let (d_up_u1, mut de1) = split_channels(&du2_in, trace.u1.channels());
        let mut du1 = upsample2_backward(&d_up_u1);
        leaky_relu_backward(trace.u1.data(), du1.data_mut(), LEAKY_SLOPE);
        let du1_in = self.up1.backward(&trace.u1_in, &du1, Some(g_up1), true)?;
        let (d_up_m, mut dd1) = split_channels(&du1_in, trace.m.channels());
        let mut dm = upsample2_backward(&d_up_m);
        leaky_relu_backward(trace.m.data(), dm.data_mut(), LEAKY_SLOPE);
        let mut dd2 = self.mid.backward(&trace.d2, &dm, Some(g_mid), true)?;
        leaky_relu_backward(trace.d2.data(), dd2.data_mut(), LEAKY_SLOPE);
        dd1.add_assign(&self.down2.backward(&trace.d1, &dd2, Some(g_down2), true)?);
        leaky_relu_backward(trace.d1.data(), dd1.data_mut(), LEAKY_SLOPE);
        de1.add_assign(&self.down1.backward(&trace.e1, &dd1, Some(g_down1), true)?);
        leaky_relu_backward(trace.e1.data(), de1.data_mut(), LEAKY_SLOPE);
        self.enc1.backward(&trace.x, &de1, Some(g_enc1), want_dx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SanitizerKind {
    Deterministic,
    Stochastic,
}

impl SanitizerKind {
    pub fn name(self) -> &'static str {
        match self {
            SanitizerKind::Deterministic => "deterministic",
            SanitizerKind::Stochastic => "stochastic",
        }
    }
}

/// Trainable image-to-image stage of a sanitizer.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Unet(UnetS),
    /// Pass-through; used for the resampler-only baseline.
    Identity,
}

/// `S(x)`: a map from image space onto itself. The stochastic variant first
/// re-renders the subject with an attribute drawn from the prior.
#[derive(Debug, Clone)]
pub struct SanitizerModel {
    pub kind: SanitizerKind,
    pub stage: Stage,
    pub input_shape: ImageShape,
    resampler: Option<Renderer>,
}

impl SanitizerModel {
    pub fn deterministic(unet: UnetS) -> Self {
        Self {
            kind: SanitizerKind::Deterministic,
            input_shape: unet.input_shape,
            stage: Stage::Unet(unet),
            resampler: None,
        }
    }

    /// Stochastic sanitizer. `resampler` may be `None` (e.g. after import),
    /// in which case sanitizing fails with a configuration error.
    pub fn stochastic(stage: Stage, input_shape: ImageShape, resampler: Option<Renderer>) -> Self {
        Self {
            kind: SanitizerKind::Stochastic,
            stage,
            input_shape,
            resampler,
        }
    }

    pub fn new(kind: SanitizerKind, renderer: &Renderer, seed: u64) -> Self {
        let shape = renderer.spec().image_shape;
        match kind {
            SanitizerKind::Deterministic => Self::deterministic(UnetS::identity_leaning(shape, seed)),
            SanitizerKind::Stochastic => Self::stochastic(
                Stage::Unet(UnetS::identity_leaning(shape, seed)),
                shape,
                Some(renderer.clone()),
            ),
        }
    }

    pub fn set_resampler(&mut self, renderer: Renderer) {
        self.resampler = Some(renderer);
    }

    pub fn unet(&self) -> Option<&UnetS> {
        match &self.stage {
            Stage::Unet(u) => Some(u),
            Stage::Identity => None,
        }
    }

    pub fn unet_mut(&mut self) -> Option<&mut UnetS> {
        match &mut self.stage {
            Stage::Unet(u) => Some(u),
            Stage::Identity => None,
        }
    }

    /// Draw an attribute from `prior` and re-render the sample's subject with it.
    pub fn resample(&self, sample: &Sample, prior: [f64; 2], rng: &mut impl Rng) -> Result<Sample> {
        let renderer = self
            .resampler
            .as_ref()
            .ok_or_else(|| Error::config("stochastic sanitizer has no generator spec"))?;
        let attribute = u8::from(rng.gen::<f64>() >= prior[0]);
        renderer.render(sample.utility_label, attribute, sample.render_seed)
    }

    /// Batch fed to the trainable stage: the raw images for the deterministic
    /// variant, resampled renders for the stochastic one.
    pub fn stage_input(
        &self,
        data: &Dataset,
        indices: &[usize],
        prior: [f64; 2],
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        if data.image_shape != self.input_shape {
            return Err(Error::Shape {
                expected: self.input_shape,
                actual: data.image_shape,
            });
        }
        match self.kind {
            SanitizerKind::Deterministic => Ok(data.batch(indices)),
            SanitizerKind::Stochastic => {
                let renders = indices
                    .iter()
                    .map(|&i| self.resample(&data.samples[i], prior, rng).map(|s| s.image))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tensor::stack(self.input_shape, renders.iter().map(Vec::as_slice)))
            }
        }
    }

    pub fn apply_stage(&self, x: &Tensor) -> Result<Tensor> {
        check_shape(self.input_shape, x)?;
        match &self.stage {
            Stage::Unet(u) => u.forward(x),
            Stage::Identity => Ok(x.clone()),
        }
    }

    /// Sanitize the samples at `indices`.
    pub fn sanitize_batch(
        &self,
        data: &Dataset,
        indices: &[usize],
        prior: [f64; 2],
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let x = self.stage_input(data, indices, prior, rng)?;
        self.apply_stage(&x)
    }

    pub fn param_hash(&self) -> String {
        match &self.stage {
            Stage::Unet(u) => u.param_hash(),
            Stage::Identity => "identity".into(),
        }
    }
}

/// Deterministic UNET forward pass on one image.
pub fn sanitize_deterministic(model: &SanitizerModel, image: &Tensor) -> Result<Tensor> {
    if model.kind != SanitizerKind::Deterministic {
        return Err(Error::config("sanitize_deterministic called on a stochastic sanitizer"));
    }
    model.apply_stage(image)
}

/// Resample the attribute from `prior`, then run the trainable stage.
pub fn sanitize_stochastic(
    model: &SanitizerModel,
    sample: &Sample,
    prior: [f64; 2],
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if model.kind != SanitizerKind::Stochastic {
        return Err(Error::config("sanitize_stochastic called on a deterministic sanitizer"));
    }
    let render = model.resample(sample, prior, rng)?;
    let (c, h, w) = model.input_shape;
    model.apply_stage(&Tensor::from_vec([1, c, h, w], render.image))
}
