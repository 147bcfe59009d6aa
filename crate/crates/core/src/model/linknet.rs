//! LinkNet-style encoder-decoder.
//!
//! ```text
//! input -> stem (3x3, /2) -> stage0 (/2) -> stage1 (/4) -> stage2 (/8) -> stage3 (/8) = features
//!                              |               |                              |
//!                              +---- + <- up <- dec2 <--- + <- up <- dec3 <---+
//!                                    |
//!                                    up -> dec1 (full res) -> head -> logits
//! ```
//!
//! Decoder blocks convolve at the coarse resolution, upsample by two and add
//! the matching encoder output, as LinkNet does with its residual links.

use ndarray::{Array4, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::label_space::LabelSpace;
use super::nn::{
    relu_backward_inplace, relu_inplace, upsample2x, upsample2x_backward, ClassifierHead, Conv2d,
    ConvCache, Grads, ParamStore, Scalar,
};
use crate::error::{Error, Result};

/// Total downsampling between the input and the feature tap.
pub const ENCODER_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub decoder_channels: usize,
    /// Inputs are mapped through `(x - input_mean) * input_scale`.
    pub input_mean: f32,
    pub input_scale: f32,
    pub init_seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl ArchConfig {
    /// Feature width 128 at stride 8.
    pub fn standard() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 32,
            stage_channels: [32, 64, 128, 128],
            decoder_channels: 32,
            input_mean: 0.5,
            input_scale: 4.0,
            init_seed: 0,
        }
    }

    /// Narrow variant for CPU desk-scale experiments.
    pub fn tiny() -> Self {
        Self {
            stem_channels: 8,
            stage_channels: [8, 16, 32, 32],
            decoder_channels: 8,
            ..Self::standard()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown architecture preset {other:?}"
            ))),
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.stage_channels[3]
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    conv_a: Conv2d,
    conv_b: Conv2d,
    proj: Option<Conv2d>,
}

struct ResCache<T> {
    a: ConvCache<T>,
    a_out: Array4<T>,
    b: ConvCache<T>,
    proj: Option<ConvCache<T>>,
    out: Array4<T>,
}

impl ResBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv_a = Conv2d::new(
            store,
            &format!("{name}.conv_a"),
            cin,
            cout,
            3,
            stride,
            1.0,
            rng,
        );
        let conv_b = Conv2d::new(store, &format!("{name}.conv_b"), cout, cout, 3, 1, 0.5, rng);
        let proj = (stride != 1 || cin != cout).then(|| {
            Conv2d::new(
                store,
                &format!("{name}.proj"),
                cin,
                cout,
                1,
                stride,
                0.5,
                rng,
            )
        });
        Self {
            conv_a,
            conv_b,
            proj,
        }
    }

    fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Array4<T>) -> ResCache<T> {
        let (mut a_out, a) = self.conv_a.forward(store, x);
        relu_inplace(&mut a_out);
        let (mut out, b) = self.conv_b.forward(store, &a_out);
        let proj = match &self.proj {
            Some(p) => {
                let (sc, cache) = p.forward(store, x);
                out += &sc;
                Some(cache)
            }
            None => {
                out += x;
                None
            }
        };
        relu_inplace(&mut out);
        ResCache {
            a,
            a_out,
            b,
            proj,
            out,
        }
    }

    fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &ResCache<T>,
        mut dout: Array4<T>,
        grads: &mut Grads<T>,
    ) -> Array4<T> {
        relu_backward_inplace(&mut dout, &cache.out);
        let mut da = self
            .conv_b
            .backward(store, &cache.b, &dout, grads, true)
            .expect("input grad requested");
        relu_backward_inplace(&mut da, &cache.a_out);
        let mut dx = self
            .conv_a
            .backward(store, &cache.a, &da, grads, true)
            .expect("input grad requested");
        match (&self.proj, &cache.proj) {
            (Some(p), Some(pc)) => {
                dx += &p
                    .backward(store, pc, &dout, grads, true)
                    .expect("input grad requested");
            }
            _ => dx += &dout,
        }
        dx
    }
}

/// Logits `(N, K, H, W)` and encoder features `(N, C_f, H/8, W/8)`.
#[derive(Debug, Clone)]
pub struct NetOutput<T> {
    pub logits: Array4<T>,
    pub features: Array4<T>,
}

pub struct ForwardCache<T> {
    stem: ConvCache<T>,
    stem_out: Array4<T>,
    stages: Vec<ResCache<T>>,
    dec3: ConvCache<T>,
    dec3_out: Array4<T>,
    dec2: ConvCache<T>,
    dec2_out: Array4<T>,
    dec1: ConvCache<T>,
    dec1_out: Array4<T>,
}

/// Segmentation network generic over the scalar type.
#[derive(Debug, Clone)]
pub struct SegNet<T> {
    arch: ArchConfig,
    label_space: LabelSpace,
    params: ParamStore<T>,
    stem: Conv2d,
    stages: [ResBlock; 4],
    dec3: Conv2d,
    dec2: Conv2d,
    dec1: Conv2d,
    head: ClassifierHead,
}

impl<T: Scalar> SegNet<T> {
    pub fn new(arch: ArchConfig, label_space: LabelSpace) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(arch.init_seed);
        let mut p = ParamStore::default();
        let r = &mut rng;
        let [c0, c1, c2, c3] = arch.stage_channels;
        let stem = Conv2d::new(
            &mut p,
            "stem",
            arch.in_channels,
            arch.stem_channels,
            3,
            2,
            1.0,
            r,
        );
        let stages = [
            ResBlock::new(&mut p, "stage0", arch.stem_channels, c0, 1, r),
            ResBlock::new(&mut p, "stage1", c0, c1, 2, r),
            ResBlock::new(&mut p, "stage2", c1, c2, 2, r),
            ResBlock::new(&mut p, "stage3", c2, c3, 1, r),
        ];
        let dec3 = Conv2d::new(&mut p, "dec3", c3, c1, 3, 1, 1.0, r);
        let dec2 = Conv2d::new(&mut p, "dec2", c1, c0, 3, 1, 1.0, r);
        let dec1 = Conv2d::new(&mut p, "dec1", c0, arch.decoder_channels, 3, 1, 1.0, r);
        let head = ClassifierHead::new(
            &mut p,
            "head",
            arch.decoder_channels,
            label_space.num_classes(),
            r,
        );
        Self {
            arch,
            label_space,
            params: p,
            stem,
            stages,
            dec3,
            dec2,
            dec1,
            head,
        }
    }

    /// Rebuilds a network from stored tensors, checking every shape.
    pub fn from_parts(
        arch: ArchConfig,
        label_space: LabelSpace,
        tensors: Vec<(String, ArrayD<T>)>,
    ) -> Result<Self> {
        let mut net = Self::new(arch, label_space.clone());
        // The freshly built head has the stored class count already.
        let expected: Vec<(String, Vec<usize>)> = net
            .params
            .iter()
            .map(|(n, t)| (n.to_owned(), t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (stored_name, tensor)) in expected.iter().zip(&tensors) {
            if *name != *stored_name || shape.as_slice() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {stored_name} {:?} does not match architecture slot {name} {shape:?}",
                    tensor.shape()
                )));
            }
        }
        for (slot, (_, tensor)) in net.params.tensors_mut().zip(tensors) {
            *slot = tensor;
        }
        Ok(net)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes(&self.params)
    }

    pub fn cast<U: Scalar>(&self) -> SegNet<U> {
        SegNet {
            arch: self.arch.clone(),
            label_space: self.label_space.clone(),
            params: self.params.cast(),
            stem: self.stem,
            stages: self.stages,
            dec3: self.dec3,
            dec2: self.dec2,
            dec1: self.dec1,
            head: self.head,
        }
    }

    pub fn check_input(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        if channels != self.arch.in_channels {
            return Err(Error::InputContract(format!(
                "model expects {} input channels, got {channels}",
                self.arch.in_channels
            )));
        }
        if height == 0
            || width == 0
            || !height.is_multiple_of(ENCODER_STRIDE)
            || !width.is_multiple_of(ENCODER_STRIDE)
        {
            return Err(Error::InputContract(format!(
                "input {height}x{width} must be a positive multiple of {ENCODER_STRIDE}"
            )));
        }
        Ok(())
    }

    pub fn forward_batch(&self, input: &Array4<T>) -> Result<(NetOutput<T>, ForwardCache<T>)> {
        let (_, c, h, w) = input.dim();
        self.check_input(c, h, w)?;
        let p = &self.params;
        let mean = T::from_f64(f64::from(self.arch.input_mean));
        let scale = T::from_f64(f64::from(self.arch.input_scale));
        let x0 = input.mapv(|v| (v - mean) * scale);

        let (mut stem_out, stem) = self.stem.forward(p, &x0);
        relu_inplace(&mut stem_out);
        let mut stages = Vec::with_capacity(4);
        let mut x = stem_out.clone();
        for block in &self.stages {
            let cache = block.forward(p, &x);
            x = cache.out.clone();
            stages.push(cache);
        }
        let features = x;

        let (mut dec3_out, dec3) = self.dec3.forward(p, &features);
        relu_inplace(&mut dec3_out);
        let u3 = upsample2x(&dec3_out) + &stages[1].out;
        let (mut dec2_out, dec2) = self.dec2.forward(p, &u3);
        relu_inplace(&mut dec2_out);
        let u2 = upsample2x(&dec2_out) + &stages[0].out;
        let (mut dec1_out, dec1) = self.dec1.forward(p, &upsample2x(&u2));
        relu_inplace(&mut dec1_out);
        let logits = self.head.forward(p, &dec1_out);

        let cache = ForwardCache {
            stem,
            stem_out,
            stages,
            dec3,
            dec3_out,
            dec2,
            dec2_out,
            dec1,
            dec1_out,
        };
        Ok((NetOutput { logits, features }, cache))
    }

    /// Parameter gradients given upstream gradients on logits and (optionally) features.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        dlogits: &Array4<T>,
        dfeatures: Option<&Array4<T>>,
    ) -> Grads<T> {
        let p = &self.params;
        let mut grads = p.zeros_like();

        let mut d = self.head.backward(p, &cache.dec1_out, dlogits, &mut grads);
        relu_backward_inplace(&mut d, &cache.dec1_out);
        let d_up = self
            .dec1
            .backward(p, &cache.dec1, &d, &mut grads, true)
            .expect("input grad requested");
        let du2 = upsample2x_backward(&d_up);

        let mut d = upsample2x_backward(&du2);
        relu_backward_inplace(&mut d, &cache.dec2_out);
        let du3 = self
            .dec2
            .backward(p, &cache.dec2, &d, &mut grads, true)
            .expect("input grad requested");

        let mut d = upsample2x_backward(&du3);
        relu_backward_inplace(&mut d, &cache.dec3_out);
        let mut de4 = self
            .dec3
            .backward(p, &cache.dec3, &d, &mut grads, true)
            .expect("input grad requested");
        if let Some(df) = dfeatures {
            de4 += df;
        }

        let de3 = self.stages[3].backward(p, &cache.stages[3], de4, &mut grads);
        let mut de2 = self.stages[2].backward(p, &cache.stages[2], de3, &mut grads);
        de2 += &du3;
        let mut de1 = self.stages[1].backward(p, &cache.stages[1], de2, &mut grads);
        de1 += &du2;
        let mut ds = self.stages[0].backward(p, &cache.stages[0], de1, &mut grads);
        relu_backward_inplace(&mut ds, &cache.stem_out);
        self.stem.backward(p, &cache.stem, &ds, &mut grads, false);
        grads
    }

    /// Appends one head row for `new_class`, copying every existing row exactly.
    pub fn with_expanded_head(&self, new_class: &str, copy_from: Option<u8>) -> Result<Self> {
        let label_space = self.label_space.with_new_class(new_class)?;
        let mut next = self.clone();
        let old_w = self.params.get(self.head.weight);
        let old_b = self.params.get(self.head.bias);
        let k = old_w.shape()[0];
        let c = old_w.shape()[1];
        let new_w = ArrayD::from_shape_fn(IxDyn(&[k + 1, c]), |ix| {
            let (row, col) = (ix[0], ix[1]);
            if row < k {
                old_w[[row, col]]
            } else {
                copy_from.map_or(T::zero(), |src| old_w[[usize::from(src), col]])
            }
        });
        let new_b = ArrayD::from_shape_fn(IxDyn(&[k + 1]), |ix| {
            if ix[0] < k {
                old_b[[ix[0]]]
            } else {
                copy_from.map_or(T::zero(), |src| old_b[[usize::from(src)]])
            }
        });
        next.params.replace(self.head.weight, new_w);
        next.params.replace(self.head.bias, new_b);
        next.label_space = label_space;
        Ok(next)
    }

    /// Subtracts the mean head row (weights and bias) from every row.
    ///
    /// Softmax outputs are unchanged; afterwards the logits at every pixel
    /// sum to zero, so the largest one is never negative and a zero-initialized
    /// extra row cannot win the argmax.
    pub fn center_head(&mut self) {
        let k = T::from_f64(self.num_classes() as f64);
        for id in [self.head.weight, self.head.bias] {
            let t = self.params.get_mut(id);
            let mean = t.sum_axis(Axis(0)) / k;
            for mut row in t.axis_iter_mut(Axis(0)) {
                row -= &mean;
            }
        }
    }
}
