//! The detector: pillar-feature stem, a small down/up RPN with skip
//! connections, and heatmap / box / density heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bev::BEV_CHANNELS;
use crate::error::{Error, Result};
use crate::losses::DENSITY_BINS;
use crate::params::ParamStore;
use crate::raaconv::{ConvKind, ConvLayer, ConvSpec, PlainConv};
use crate::targets::BOX_CHANNELS;
use crate::tensor::Tensor;

/// Where range-aware convolutions replace plain ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Plain convolutions everywhere.
    Baseline,
    /// Range-aware convolutions in the heads only.
    Lite,
    /// Range-aware convolutions in every 3×3 layer.
    Full,
}

impl Variant {
    pub fn from_flags(use_raa: bool, lite: bool) -> Self {
        match (use_raa, lite) {
            (false, _) => Variant::Baseline,
            (true, true) => Variant::Lite,
            (true, false) => Variant::Full,
        }
    }

    fn backbone(self) -> ConvKind {
        match self {
            Variant::Full => ConvKind::Raa,
            _ => ConvKind::Plain,
        }
    }

    fn head(self) -> ConvKind {
        match self {
            Variant::Baseline => ConvKind::Plain,
            _ => ConvKind::Raa,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub use_adle: bool,
    pub num_classes: usize,
    /// Channel widths of the three downsampling stages.
    pub widths: [usize; 3],
    pub head_width: usize,
    /// Initial bias of the heatmap logits.
    pub heatmap_bias: f64,
    /// Predicted heatmap is clamped to `[clamp, 1 − clamp]`.
    pub heatmap_clamp: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Full,
            use_adle: true,
            num_classes: 2,
            widths: [16, 32, 64],
            head_width: 16,
            heatmap_bias: -2.19,
            heatmap_clamp: 1e-4,
        }
    }
}

/// Cumulative downsampling from the BEV grid to the head outputs.
pub const OUTPUT_STRIDE: usize = 2;

struct Head {
    conv: ConvLayer,
    out: PlainConv,
}

impl Head {
    fn new(
        store: &mut ParamStore<f32>,
        name: &str,
        kind: ConvKind,
        width: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Head {
            conv: ConvLayer::new(kind, store, &format!("{name}.conv"), ConvSpec::same(width, width, 3, 1), rng)?,
            out: PlainConv::new(store, &format!("{name}.out"), ConvSpec::same(width, c_out, 1, 1), rng)?,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape<f32>,
        store: &ParamStore<f32>,
        x: Var,
        taps: &mut Vec<AttentionTap>,
        name: &str,
    ) -> Result<Var> {
        let h = conv_relu(&self.conv, tape, store, x, taps, name)?;
        self.out.forward(tape, store, h)
    }
}

/// Attention maps of one range-aware layer.
#[derive(Clone, Debug)]
pub struct AttentionTap {
    pub layer: String,
    pub a: Var,
    pub b: Var,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `N×K×H'×W'` clamped sigmoid scores.
    pub heatmap: Var,
    /// `N×8×H'×W'`.
    pub boxes: Var,
    /// `N×3×H'×W'` density logits, when requested and present.
    pub density: Option<Var>,
    pub attention: Vec<AttentionTap>,
}

pub struct RaaNetModel {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    stem: ConvLayer,
    down: Vec<(ConvLayer, ConvLayer)>,
    up: Vec<ConvLayer>,
    heatmap: Head,
    boxes: Head,
    density: Option<Head>,
}

fn conv_relu(
    layer: &ConvLayer,
    tape: &mut Tape<f32>,
    store: &ParamStore<f32>,
    x: Var,
    taps: &mut Vec<AttentionTap>,
    name: &str,
) -> Result<Var> {
    let mut local = Vec::new();
    let y = layer.forward(tape, store, x, Some(&mut local))?;
    taps.extend(local.into_iter().map(|(a, b)| AttentionTap {
        layer: name.to_string(),
        a,
        b,
    }));
    Ok(tape.relu(y))
}

const DOWN_NAMES: [&str; 3] = ["down1", "down2", "down3"];
const UP_NAMES: [&str; 2] = ["up1", "up2"];

/// Deterministic initialization from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<RaaNetModel> {
    if config.num_classes == 0 || config.widths.iter().any(|&w| w == 0 || w % 2 != 0) || config.head_width % 2 != 0 {
        return Err(Error::invalid("model widths must be positive and even"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bb = config.variant.backbone();
    let [w1, w2, w3] = config.widths;
    // The stem halves the grid, so the first stage keeps its resolution.
    let stem = ConvLayer::new(bb, &mut store, "stem", ConvSpec::same(BEV_CHANNELS, w1, 3, 2), &mut rng)?;
    let mut down = Vec::new();
    let mut c_in = w1;
    for ((name, w), stride) in DOWN_NAMES.iter().zip([w1, w2, w3]).zip([1, 2, 2]) {
        let a = ConvLayer::new(bb, &mut store, &format!("{name}.0"), ConvSpec::same(c_in, w, 3, stride), &mut rng)?;
        let b = ConvLayer::new(bb, &mut store, &format!("{name}.1"), ConvSpec::same(w, w, 3, 1), &mut rng)?;
        down.push((a, b));
        c_in = w;
    }
    let up = vec![
        ConvLayer::new(bb, &mut store, UP_NAMES[0], ConvSpec::same(w3 + w2, w2, 3, 1), &mut rng)?,
        ConvLayer::new(bb, &mut store, UP_NAMES[1], ConvSpec::same(w2 + w1, config.head_width, 3, 1), &mut rng)?,
    ];
    let hk = config.variant.head();
    let hw = config.head_width;
    let heatmap = Head::new(&mut store, "head.heatmap", hk, hw, config.num_classes, &mut rng)?;
    let bias = heatmap.out.bias();
    store.get_mut(bias).value.data_mut().fill(config.heatmap_bias as f32);
    let boxes = Head::new(&mut store, "head.box", hk, hw, BOX_CHANNELS, &mut rng)?;
    // registered last so the other parameters do not depend on ADLE
    let density = if config.use_adle {
        Some(Head::new(&mut store, "head.density", hk, hw, DENSITY_BINS, &mut rng)?)
    } else {
        None
    };
    Ok(RaaNetModel {
        config: config.clone(),
        params: store,
        stem,
        down,
        up,
        heatmap,
        boxes,
        density,
    })
}

impl RaaNetModel {
    /// Number of range-aware layers.
    pub fn raa_layer_count(&self) -> usize {
        self.layers().filter(|(_, l)| l.kind() == ConvKind::Raa).count()
    }

    /// Number of 3×3 convolutions in the heads that exist in this model.
    pub fn head_conv_count(&self) -> usize {
        2 + self.density.is_some() as usize
    }

    fn layers(&self) -> impl Iterator<Item = (String, &ConvLayer)> {
        let mut v: Vec<(String, &ConvLayer)> = vec![("stem".into(), &self.stem)];
        for (name, (a, b)) in DOWN_NAMES.iter().zip(&self.down) {
            v.push((format!("{name}.0"), a));
            v.push((format!("{name}.1"), b));
        }
        for (name, u) in UP_NAMES.iter().zip(&self.up) {
            v.push((name.to_string(), u));
        }
        v.push(("head.heatmap.conv".into(), &self.heatmap.conv));
        v.push(("head.box.conv".into(), &self.boxes.conv));
        if let Some(d) = &self.density {
            v.push(("head.density.conv".into(), &d.conv));
        }
        v.into_iter()
    }

    /// Names of the range-aware layers, in forward order.
    pub fn raa_layer_names(&self) -> Vec<String> {
        self.layers()
            .filter(|(_, l)| l.kind() == ConvKind::Raa)
            .map(|(n, _)| n)
            .collect()
    }

    /// Every γ in forward order, branch a before b.
    pub fn gamma_values(&self) -> Vec<f32> {
        use crate::raaconv::Branch;
        self.layers()
            .filter_map(|(_, l)| l.as_raa())
            .flat_map(|l| [l.gamma(Branch::A), l.gamma(Branch::B)])
            .map(|id| self.params.value(id).data()[0])
            .collect()
    }

    pub fn has_density_head(&self) -> bool {
        self.density.is_some()
    }

    /// Head output size for a `rows×cols` BEV grid.
    pub fn output_size(&self, rows: usize, cols: usize) -> Result<(usize, usize)> {
        let f = 8;
        if rows % f != 0 || cols % f != 0 {
            return Err(Error::invalid(format!("grid {rows}x{cols} must be divisible by {f}")));
        }
        Ok((rows / OUTPUT_STRIDE, cols / OUTPUT_STRIDE))
    }

    /// Runs the network on an `N×6×H×W` input. The density head only runs
    /// when `with_density` is set and the model has one.
    pub fn forward(&self, tape: &mut Tape<f32>, input: Var, with_density: bool) -> Result<ModelOutput> {
        let (_, c, h, w) = tape.value(input).dims4()?;
        if c != BEV_CHANNELS {
            return Err(Error::Incompatible {
                expected: format!("{BEV_CHANNELS} input channels"),
                got: format!("{c}"),
            });
        }
        self.output_size(h, w)?;
        let store = &self.params;
        let mut taps = Vec::new();
        let x = conv_relu(&self.stem, tape, store, input, &mut taps, "stem")?;
        let mut skips = Vec::new();
        let mut x = x;
        for (name, (a, b)) in DOWN_NAMES.iter().zip(&self.down) {
            x = conv_relu(a, tape, store, x, &mut taps, &format!("{name}.0"))?;
            x = conv_relu(b, tape, store, x, &mut taps, &format!("{name}.1"))?;
            skips.push(x);
        }
        for (i, (name, u)) in UP_NAMES.iter().zip(&self.up).enumerate() {
            let up = tape.upsample_nearest(x, 2)?;
            let cat = tape.concat_channels(up, skips[1 - i])?;
            x = conv_relu(u, tape, store, cat, &mut taps, name)?;
        }
        let logits = self.heatmap.forward(tape, store, x, &mut taps, "head.heatmap.conv")?;
        let prob = tape.sigmoid(logits);
        let eps = self.config.heatmap_clamp;
        let heatmap = tape.clamp(prob, eps, 1.0 - eps)?;
        let boxes = self.boxes.forward(tape, store, x, &mut taps, "head.box.conv")?;
        let density = match (&self.density, with_density) {
            (Some(d), true) => Some(d.forward(tape, store, x, &mut taps, "head.density.conv")?),
            _ => None,
        };
        Ok(ModelOutput {
            heatmap,
            boxes,
            density,
            attention: taps,
        })
    }

    /// Inference forward of a single `1×6×H×W` grid: heatmap and box maps.
    pub fn predict(&self, features: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut tape = Tape::inference();
        let x = tape.constant(features.clone());
        let out = self.forward(&mut tape, x, false)?;
        Ok((tape.value(out.heatmap).clone(), tape.value(out.boxes).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: Variant, use_adle: bool) -> ModelConfig {
        ModelConfig {
            variant,
            use_adle,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&cfg(Variant::Full, true), 7).unwrap();
        let b = build_model(&cfg(Variant::Full, true), 7).unwrap();
        for ((_, p), (_, q)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
        assert!(a.gamma_values().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn variants_share_output_shapes() {
        let x = Tensor::from_fn(vec![1, 6, 32, 32], |i| ((i * 31) % 17) as f32 / 17.0);
        let mut shapes = Vec::new();
        for v in [Variant::Baseline, Variant::Lite, Variant::Full] {
            let m = build_model(&cfg(v, true), 1).unwrap();
            let (h, b) = m.predict(&x).unwrap();
            assert!(h.data().iter().all(|&p| p > 0.0 && p < 1.0));
            shapes.push((h.shape().to_vec(), b.shape().to_vec()));
        }
        assert!(shapes.windows(2).all(|s| s[0] == s[1]));
        assert_eq!(shapes[0].0, vec![1, 2, 16, 16]);
    }

    #[test]
    fn lite_puts_attention_in_heads_only() {
        let lite = build_model(&cfg(Variant::Lite, true), 1).unwrap();
        assert_eq!(lite.raa_layer_count(), lite.head_conv_count());
        assert!(lite.raa_layer_names().iter().all(|n| n.starts_with("head.")));
        let baseline = build_model(&cfg(Variant::Baseline, true), 1).unwrap();
        assert_eq!(baseline.raa_layer_count(), 0);
        let full = build_model(&cfg(Variant::Full, true), 1).unwrap();
        assert_eq!(full.raa_layer_count(), 12);
        let counts: Vec<usize> = [&baseline, &lite, &full].iter().map(|m| m.params.numel()).collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    }

    #[test]
    fn density_head_is_last_and_optional() {
        let with = build_model(&cfg(Variant::Lite, true), 3).unwrap();
        let without = build_model(&cfg(Variant::Lite, false), 3).unwrap();
        assert!(with.has_density_head() && !without.has_density_head());
        for ((_, p), (_, q)) in without.params.iter().zip(with.params.iter()) {
            assert_eq!((&p.name, &p.value), (&q.name, &q.value));
        }
        let x = Tensor::full(vec![1, 6, 16, 16], 0.3f32);
        assert_eq!(with.predict(&x).unwrap(), without.predict(&x).unwrap());
    }

    #[test]
    fn rejects_wrong_input() {
        let m = build_model(&cfg(Variant::Baseline, false), 0).unwrap();
        assert!(m.predict(&Tensor::zeros(vec![1, 5, 16, 16])).is_err());
        assert!(m.predict(&Tensor::zeros(vec![1, 6, 12, 16])).is_err());
    }
}
