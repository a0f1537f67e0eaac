//! Range-aware attention convolution and the plain convolution it replaces.
//!
//! A [`RaaConvLayer`] runs two half-width convolution branches. Each branch
//! gets its own spatial attention map, computed from channel max/mean pooling
//! of the branch features with position encodings appended (ξ for branch a,
//! 1−ξ for branch b), a 1×1 squeeze, the range encoding appended (ρ / −ρ), a
//! 3×3 conv and a sigmoid. The map gates its branch residually:
//! `F'' = (γ·f) ⊗ F + F`. Branch outputs are concatenated.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::encodings::encodings;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Shape of a convolution, shared by plain and range-aware layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        }
    }

    /// `k×k` conv that preserves size at stride 1.
    pub fn same(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self::new(c_in, c_out, kernel, stride, kernel / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvParams {
    kernel: ParamId,
    bias: ParamId,
}

impl ConvParams {
    fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let kernel = store.register_uniform(format!("{name}.kernel"), vec![c_out, c_in, k, k], fan_in, rng)?;
        let bias = store.register_uniform(format!("{name}.bias"), vec![c_out], fan_in, rng)?;
        Ok(ConvParams { kernel, bias })
    }

    fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let w = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        tape.conv2d(input, w, b, stride, padding)
    }
}

#[derive(Clone, Debug)]
pub struct PlainConv {
    pub spec: ConvSpec,
    params: ConvParams,
}

impl PlainConv {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        let params = ConvParams::register(store, name, spec.c_in, spec.c_out, spec.kernel, rng)?;
        Ok(PlainConv { spec, params })
    }

    pub fn kernel(&self) -> ParamId {
        self.params.kernel
    }

    pub fn bias(&self) -> ParamId {
        self.params.bias
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: Var) -> Result<Var> {
        self.params
            .apply(tape, store, input, self.spec.stride, self.spec.padding)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    A,
    B,
}

#[derive(Clone, Debug)]
struct BranchParams {
    features: ConvParams,
    squeeze: ConvParams,
    attention: ConvParams,
    gamma: ParamId,
}

/// Output of a range-aware layer together with its two attention maps.
#[derive(Clone, Copy, Debug)]
pub struct RaaOutput {
    pub output: Var,
    /// Sigmoid attention of branch a, `N×1×H'×W'`.
    pub attn_a: Var,
    pub attn_b: Var,
}

#[derive(Clone, Debug)]
pub struct RaaConvLayer {
    pub spec: ConvSpec,
    a: BranchParams,
    b: BranchParams,
}

impl RaaConvLayer {
    /// Same signature as [`PlainConv::new`]; `c_out` must be even.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.c_out % 2 != 0 || spec.c_out == 0 {
            return Err(Error::invalid(format!(
                "range-aware conv needs an even output width, got {}",
                spec.c_out
            )));
        }
        let half = spec.c_out / 2;
        let mut branch = |tag: &str| -> Result<BranchParams> {
            Ok(BranchParams {
                features: ConvParams::register(store, &format!("{name}.{tag}.conv"), spec.c_in, half, spec.kernel, rng)?,
                squeeze: ConvParams::register(store, &format!("{name}.{tag}.squeeze"), 2, 1, 1, rng)?,
                attention: ConvParams::register(store, &format!("{name}.{tag}.attn"), 2, 1, 3, rng)?,
                gamma: store.register(format!("{name}.{tag}.gamma"), Tensor::scalar(T::one()))?,
            })
        };
        let a = branch("a")?;
        let b = branch("b")?;
        Ok(RaaConvLayer { spec, a, b })
    }

    fn branch(&self, which: Branch) -> &BranchParams {
        match which {
            Branch::A => &self.a,
            Branch::B => &self.b,
        }
    }

    pub fn gamma(&self, which: Branch) -> ParamId {
        self.branch(which).gamma
    }

    pub fn feature_kernel(&self, which: Branch) -> ParamId {
        self.branch(which).features.kernel
    }

    pub fn feature_bias(&self, which: Branch) -> ParamId {
        self.branch(which).features.bias
    }

    /// Parameter ids of the squeeze and attention convs (kernel, bias for each).
    pub fn attention_params(&self, which: Branch) -> [ParamId; 4] {
        let b = self.branch(which);
        [b.squeeze.kernel, b.squeeze.bias, b.attention.kernel, b.attention.bias]
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: Var) -> Result<Var> {
        Ok(self.forward_with_attention(tape, store, input)?.output)
    }

    /// The two attention maps of one forward pass.
    pub fn attention_maps<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: Var,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let out = self.forward_with_attention(tape, store, input)?;
        Ok((tape.value(out.attn_a).clone(), tape.value(out.attn_b).clone()))
    }

    pub fn forward_with_attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: Var,
    ) -> Result<RaaOutput> {
        let c_in = tape.value(input).dims4()?.1;
        if c_in != self.spec.c_in {
            return Err(Error::shape(format!(
                "range-aware conv expects {} input channels, got {c_in}",
                self.spec.c_in
            )));
        }
        // Both branch convs run as one conv with stacked kernels.
        let kernel_a = tape.param(store, self.a.features.kernel);
        let kernel_b = tape.param(store, self.b.features.kernel);
        let kernel = tape.concat_rows(kernel_a, kernel_b)?;
        let bias_a = tape.param(store, self.a.features.bias);
        let bias_b = tape.param(store, self.b.features.bias);
        let bias = tape.concat_rows(bias_a, bias_b)?;
        let both = tape.conv2d(input, kernel, bias, self.spec.stride, self.spec.padding)?;
        let half = self.spec.c_out / 2;
        let features_a = tape.slice_channels(both, 0, half)?;
        let features_b = tape.slice_channels(both, half, half)?;
        let (fa, attn_a) = self.run_branch(tape, store, features_a, Branch::A)?;
        let (fb, attn_b) = self.run_branch(tape, store, features_b, Branch::B)?;
        let output = tape.concat_channels(fa, fb)?;
        Ok(RaaOutput { output, attn_a, attn_b })
    }

    fn run_branch<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: Var,
        which: Branch,
    ) -> Result<(Var, Var)> {
        let p = self.branch(which);
        let (n, _, h, w) = tape.value(features).dims4()?;
        let enc = encodings(h, w)?;
        let (position, range) = match which {
            Branch::A => (enc.xi.cast::<T>(), enc.rho.cast::<T>()),
            Branch::B => (
                enc.xi.map(|v| 1.0 - v).cast::<T>(),
                enc.rho.map(|v| -v).cast::<T>(),
            ),
        };
        let position = tape.constant(position.repeat_batch(n)?);
        let range = tape.constant(range.repeat_batch(n)?);

        let with_position = tape.concat_channels(features, position)?;
        let pooled_max = tape.channel_max(with_position)?;
        let pooled_mean = tape.channel_mean(with_position)?;
        let pooled = tape.concat_channels(pooled_max, pooled_mean)?;
        let embedded = p.squeeze.apply(tape, store, pooled, 1, 0)?;
        let with_range = tape.concat_channels(embedded, range)?;
        let logits = p.attention.apply(tape, store, with_range, 1, 1)?;
        let attn = tape.sigmoid(logits);

        let gamma = tape.param(store, p.gamma);
        let scaled = tape.broadcast_mul(gamma, attn)?;
        let gated = tape.broadcast_mul(scaled, features)?;
        let out = tape.add(gated, features)?;
        Ok((out, attn))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    #[default]
    Plain,
    Raa,
}

/// A convolution slot that is either plain or range-aware.
#[derive(Clone, Debug)]
pub enum ConvLayer {
    Plain(PlainConv),
    Raa(RaaConvLayer),
}

impl ConvLayer {
    pub fn new<T: Real>(
        kind: ConvKind,
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match kind {
            ConvKind::Plain => ConvLayer::Plain(PlainConv::new(store, name, spec, rng)?),
            ConvKind::Raa => ConvLayer::Raa(RaaConvLayer::new(store, name, spec, rng)?),
        })
    }

    pub fn kind(&self) -> ConvKind {
        match self {
            ConvLayer::Plain(_) => ConvKind::Plain,
            ConvLayer::Raa(_) => ConvKind::Raa,
        }
    }

    pub fn as_raa(&self) -> Option<&RaaConvLayer> {
        match self {
            ConvLayer::Raa(l) => Some(l),
            ConvLayer::Plain(_) => None,
        }
    }

    /// Forward pass; attention maps of range-aware layers are pushed onto `taps`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: Var,
        taps: Option<&mut Vec<(Var, Var)>>,
    ) -> Result<Var> {
        match self {
            ConvLayer::Plain(c) => c.forward(tape, store, input),
            ConvLayer::Raa(l) => {
                let out = l.forward_with_attention(tape, store, input)?;
                if let Some(taps) = taps {
                    taps.push((out.attn_a, out.attn_b));
                }
                Ok(out.output)
            }
        }
    }
}
