//! Declarative architectures: the DenseNet image model, the two speech
//! ConvNets, and scaled-down variants of each.
//!
//! Every layer carries a `block` (the numbered rows of the architecture
//! tables) and a `stage`. A stage is one convolution or fully connected
//! layer together with the BatchNorm/ReLU/Dropout/pooling/concat layers
//! attached to it; stages are the unit `l_c` counts. The output layer is the
//! final stage on its own, so a spec with `L` stages has `L_H = L - 1` hidden
//! stages.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::LayerKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub block: usize,
    pub stage: usize,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// A freeze interval: everything up to and including `last_block`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeGroup {
    pub label: String,
    pub last_block: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub groups: Vec<FreezeGroup>,
}

/// A freeze cut-point: `l_c` hidden stages held constant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutPoint {
    pub label: String,
    pub l_c: usize,
}

impl ModelSpec {
    /// Output class count `K`.
    pub fn classes(&self) -> usize {
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::SoftmaxOutput { classes }) => *classes,
            _ => 0,
        }
    }

    /// Total stage count `L`.
    pub fn num_stages(&self) -> usize {
        self.layers.last().map(|l| l.stage + 1).unwrap_or(0)
    }

    /// Hidden stage count `L_H = L - 1`.
    pub fn hidden_stages(&self) -> usize {
        self.num_stages().saturating_sub(1)
    }

    pub fn output_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Index of the first layer belonging to `stage` (or `layers.len()` past the end).
    pub fn first_layer_of_stage(&self, stage: usize) -> usize {
        self.layers.iter().position(|l| l.stage >= stage).unwrap_or(self.layers.len())
    }

    /// Producers feeding layer `i`; `None` is the model input.
    pub fn sources(&self, i: usize) -> Vec<Option<usize>> {
        match &self.layers[i].kind {
            LayerKind::Concat { sources } => sources.iter().map(|&s| Some(s)).collect(),
            _ => vec![i.checked_sub(1)],
        }
    }

    /// Same architecture with a `classes`-way output layer.
    pub fn with_classes(&self, classes: usize) -> ModelSpec {
        let mut s = self.clone();
        if let Some(last) = s.layers.last_mut() {
            last.kind = LayerKind::SoftmaxOutput { classes };
        }
        s
    }

    /// Per-sample output shape of every layer.
    pub fn shape_trace(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let ins: Vec<&[usize]> = self
                .sources(i)
                .into_iter()
                .map(|s| match s {
                    Some(j) => shapes[j].as_slice(),
                    None => self.input_shape.as_slice(),
                })
                .collect();
            let out = layer.kind.output_shape(&ins).map_err(|e| Error::Shape {
                layer: layer.id.clone(),
                expected: e,
                actual: ins.first().map(|s| s.to_vec()).unwrap_or_default(),
            })?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Per-sample input shape of layer `i` (first source).
    pub fn input_shape_of(&self, i: usize, trace: &[Vec<usize>]) -> Vec<usize> {
        match self.sources(i)[0] {
            Some(j) => trace[j].clone(),
            None => self.input_shape.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(format!("{}: {}", self.name, m)));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        let outputs = self
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::SoftmaxOutput { .. }))
            .count();
        if outputs != 1 || !matches!(self.layers.last().unwrap().kind, LayerKind::SoftmaxOutput { .. }) {
            return bad("exactly one SoftmaxOutput layer, last".into());
        }
        if self.classes() < 2 {
            return bad("output needs at least 2 classes".into());
        }
        let first = &self.layers[0];
        if first.block != 1 || first.stage != 0 {
            return bad("first layer must be block 1, stage 0".into());
        }
        for w in self.layers.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if !(b.block == a.block || b.block == a.block + 1) {
                return bad(format!("block ids not contiguous at {}", b.id));
            }
            if !(b.stage == a.stage || b.stage == a.stage + 1) {
                return bad(format!("stage ids not contiguous at {}", b.id));
            }
        }
        let out = self.layers.last().unwrap();
        let last_block = out.block;
        if self.layers[..self.layers.len() - 1].iter().any(|l| l.stage == out.stage || l.block == last_block) {
            return bad("output layer must be alone in the final stage and block".into());
        }
        for stage in 0..self.num_stages() {
            let n = self.layers.iter().filter(|l| l.stage == stage && l.kind.is_stage()).count();
            if n != 1 {
                return bad(format!("stage {stage} has {n} parameterized layers"));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if let LayerKind::Concat { sources } = &l.kind {
                if sources.is_empty() || sources.iter().any(|&s| s >= i) {
                    return bad(format!("{}: concat sources must precede the layer", l.id));
                }
            }
            if let LayerKind::Dropout { rate } = l.kind {
                if !(0.0..1.0).contains(&rate) {
                    return bad(format!("{}: dropout rate {rate} outside [0, 1)", l.id));
                }
            }
        }
        let mut prev = 0;
        for g in &self.groups {
            if g.last_block <= prev || g.last_block >= last_block {
                return bad(format!("freeze group `{}` out of order or includes output", g.label));
            }
            prev = g.last_block;
        }
        self.shape_trace()?;
        Ok(())
    }

    /// Hash of the canonical serialization (hex, 128 bits).
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&canonical);
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let spec: ModelSpec = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Freeze cut-points in order: `l_c = 0` first, then one per block group.
/// Specs without groups fall back to one cut-point per hidden stage.
pub fn block_boundaries(spec: &ModelSpec) -> Vec<CutPoint> {
    let mut cuts = vec![CutPoint {
        label: "none".into(),
        l_c: 0,
    }];
    if spec.groups.is_empty() {
        cuts.extend((1..=spec.hidden_stages()).map(|l| CutPoint {
            label: format!("stage {l}"),
            l_c: l,
        }));
        return cuts;
    }
    for g in &spec.groups {
        let l_c = spec
            .layers
            .iter()
            .filter(|l| l.block <= g.last_block)
            .map(|l| l.stage + 1)
            .max()
            .unwrap_or(0);
        cuts.push(CutPoint {
            label: g.label.clone(),
            l_c,
        });
    }
    cuts
}

/// Incremental construction of a block- and stage-annotated layer list.
pub struct SpecBuilder {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    block: usize,
    stage: Option<usize>,
}

impl SpecBuilder {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            input_shape,
            layers: Vec::new(),
            block: 1,
            stage: None,
        }
    }

    pub fn block(&mut self, block: usize) -> &mut Self {
        self.block = block;
        self
    }

    pub fn stage(&mut self) -> &mut Self {
        self.stage = Some(self.stage.map_or(0, |s| s + 1));
        self
    }

    pub fn push(&mut self, kind: LayerKind) -> usize {
        let idx = self.layers.len();
        self.layers.push(LayerSpec {
            id: format!("{idx:03}.{}", kind.tag()),
            block: self.block,
            stage: self.stage.unwrap_or(0),
            kind,
        });
        idx
    }

    pub fn last(&self) -> usize {
        self.layers.len() - 1
    }

    /// Per-sample output shape of the last layer pushed.
    pub fn current_shape(&self) -> Vec<usize> {
        let spec = ModelSpec {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            groups: Vec::new(),
        };
        spec.shape_trace().expect("builder produced a feasible prefix").pop().unwrap_or_else(|| self.input_shape.clone())
    }

    pub fn finish(self, groups: Vec<FreezeGroup>) -> ModelSpec {
        ModelSpec {
            name: self.name,
            input_shape: self.input_shape,
            layers: self.layers,
            groups,
        }
    }
}

pub const IMAGE_INPUT: [usize; 3] = [3, 32, 32];
pub const SPEECH_FEATURES: usize = 40;
pub const DEFAULT_CONTEXT: usize = 16;
pub const DENSENET_DROPOUT: f64 = 0.2;
pub const SPEECH_DROPOUT: f64 = 0.4;

/// DenseNet with three dense blocks of `layers_per_block` BN-ReLU-Conv-Dropout
/// units, transitions that keep the running channel count, and a global
/// average pool before the output layer.
pub fn densenet_spec(growth: usize, layers_per_block: usize, classes: usize) -> ModelSpec {
    densenet_spec_with(growth, layers_per_block, classes, IMAGE_INPUT.to_vec())
}

pub fn densenet_spec_with(growth: usize, layers_per_block: usize, classes: usize, input_shape: Vec<usize>) -> ModelSpec {
    assert!(growth >= 1 && layers_per_block >= 1, "growth and layers_per_block must be positive");
    let name = format!("densenet-g{growth}-n{layers_per_block}");
    let mut b = SpecBuilder::new(name, input_shape);
    let mut channels = 2 * growth;

    b.block(1).stage();
    b.push(LayerKind::convolution(channels, 3, 3, 1, false));

    for (dense, transition) in [(2, Some(3)), (4, Some(5)), (6, None)] {
        b.block(dense);
        let mut outputs = vec![b.last()];
        for _ in 0..layers_per_block {
            b.stage();
            if outputs.len() > 1 {
                b.push(LayerKind::Concat { sources: outputs.clone() });
            }
            b.push(LayerKind::BatchNorm);
            b.push(LayerKind::Relu);
            b.push(LayerKind::convolution(growth, 3, 3, 1, false));
            outputs.push(b.push(LayerKind::Dropout { rate: DENSENET_DROPOUT }));
            channels += growth;
        }
        match transition {
            Some(t) => {
                b.block(t).stage();
                b.push(LayerKind::Concat { sources: outputs });
                b.push(LayerKind::BatchNorm);
                b.push(LayerKind::Relu);
                b.push(LayerKind::convolution(channels, 1, 1, 1, false));
                b.push(LayerKind::Dropout { rate: DENSENET_DROPOUT });
                b.push(LayerKind::AvgPool { size: [2, 2], stride: 2 });
            }
            None => {
                // Block 7 rides on the last dense stage: it has no parameters
                // of its own beyond the BatchNorm.
                b.block(7);
                b.push(LayerKind::Concat { sources: outputs });
                b.push(LayerKind::BatchNorm);
                b.push(LayerKind::Relu);
                let shape = b.current_shape();
                b.push(LayerKind::AvgPool {
                    size: [shape[1], shape[2]],
                    stride: shape[1].max(1),
                });
            }
        }
    }
    b.block(8).stage();
    b.push(LayerKind::SoftmaxOutput { classes });
    b.finish(vec![
        group("Block 1", 1),
        group("Blocks 2 and 3", 3),
        group("Blocks 4 and 5", 5),
        group("Blocks 6 and 7", 7),
    ])
}

fn group(label: &str, last_block: usize) -> FreezeGroup {
    FreezeGroup {
        label: label.into(),
        last_block,
    }
}

/// Layer widths of the speech ConvNets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeechWidths {
    /// One width per convolutional block.
    pub conv: Vec<usize>,
    pub fc: usize,
}

impl SpeechWidths {
    pub fn model_a() -> Self {
        Self {
            conv: vec![64, 128],
            fc: 1024,
        }
    }

    pub fn model_b() -> Self {
        Self {
            conv: vec![64, 128, 256, 256],
            fc: 1024,
        }
    }
}

pub fn speech_input(context: usize) -> Vec<usize> {
    vec![1, SPEECH_FEATURES, context]
}

/// Model A: two conv/BN/ReLU/max-pool stages, three fully connected
/// BN/ReLU/Dropout stages, and the output layer.
pub fn convnet_a_spec(classes: usize) -> ModelSpec {
    convnet_a_spec_with(classes, speech_input(DEFAULT_CONTEXT), &SpeechWidths::model_a())
}

pub fn convnet_a_spec_with(classes: usize, input_shape: Vec<usize>, widths: &SpeechWidths) -> ModelSpec {
    assert!(classes >= 2 && widths.conv.len() == 2);
    let mut b = SpecBuilder::new(format!("model-a-c{}-{}-fc{}", widths.conv[0], widths.conv[1], widths.fc), input_shape);
    let kernels = [[5, 4], [3, 3]];
    for (i, (&w, k)) in widths.conv.iter().zip(kernels).enumerate() {
        b.block(i + 1).stage();
        b.push(LayerKind::convolution(w, k[0], k[1], 1, false));
        b.push(LayerKind::BatchNorm);
        b.push(LayerKind::Relu);
        b.push(LayerKind::MaxPool { size: [2, 2], stride: 2 });
    }
    for blk in 3..=5 {
        b.block(blk).stage();
        b.push(LayerKind::FullyConnected {
            out_units: widths.fc,
            bias: false,
        });
        b.push(LayerKind::BatchNorm);
        b.push(LayerKind::Relu);
        b.push(LayerKind::Dropout { rate: SPEECH_DROPOUT });
    }
    b.block(6).stage();
    b.push(LayerKind::SoftmaxOutput { classes });
    let groups = (1..=5).map(|i| group(&format!("No. {i}"), i)).collect();
    b.finish(groups)
}

/// Model B: VGG-style conv stacks (1+1, 2, 3, 3 convolutions per block, each
/// followed by max pooling), two fully connected stages, and the output layer.
pub fn vgg_b_spec(classes: usize) -> ModelSpec {
    vgg_b_spec_with(classes, speech_input(DEFAULT_CONTEXT), &SpeechWidths::model_b())
}

pub fn vgg_b_spec_with(classes: usize, input_shape: Vec<usize>, widths: &SpeechWidths) -> ModelSpec {
    assert!(classes >= 2 && widths.conv.len() == 4);
    let name = format!(
        "model-b-c{}-fc{}",
        widths.conv.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("-"),
        widths.fc
    );
    let mut b = SpecBuilder::new(name, input_shape);
    let convs: [&[[usize; 2]]; 4] = [&[[6, 5], [3, 3]], &[[3, 3]; 2], &[[3, 3]; 3], &[[3, 3]; 3]];
    for (i, (&w, kernels)) in widths.conv.iter().zip(convs).enumerate() {
        b.block(i + 1);
        for k in kernels {
            b.stage();
            b.push(LayerKind::convolution(w, k[0], k[1], 1, false));
            b.push(LayerKind::BatchNorm);
            b.push(LayerKind::Relu);
        }
        b.push(LayerKind::MaxPool { size: [2, 2], stride: 2 });
    }
    for blk in 5..=6 {
        b.block(blk).stage();
        b.push(LayerKind::FullyConnected {
            out_units: widths.fc,
            bias: false,
        });
        b.push(LayerKind::BatchNorm);
        b.push(LayerKind::Relu);
        b.push(LayerKind::Dropout { rate: SPEECH_DROPOUT });
    }
    b.block(7).stage();
    b.push(LayerKind::SoftmaxOutput { classes });
    let groups = (1..=6).map(|i| group(&format!("No. {i}"), i)).collect();
    b.finish(groups)
}

/// Named architecture presets, resolvable from configuration files and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Densenet,
    DensenetMicro,
    ModelA,
    ModelAMicro,
    ModelB,
    ModelBMicro,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Densenet,
        Preset::DensenetMicro,
        Preset::ModelA,
        Preset::ModelAMicro,
        Preset::ModelB,
        Preset::ModelBMicro,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Densenet => "densenet",
            Preset::DensenetMicro => "densenet-micro",
            Preset::ModelA => "model-a",
            Preset::ModelAMicro => "model-a-micro",
            Preset::ModelB => "model-b",
            Preset::ModelBMicro => "model-b-micro",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }

    pub fn default_input(self) -> Vec<usize> {
        match self {
            Preset::Densenet => IMAGE_INPUT.to_vec(),
            Preset::DensenetMicro => vec![3, 8, 8],
            Preset::ModelA | Preset::ModelB => speech_input(DEFAULT_CONTEXT),
            Preset::ModelAMicro | Preset::ModelBMicro => vec![1, 16, 16],
        }
    }

    pub fn spec(self, classes: usize) -> ModelSpec {
        self.spec_with_input(classes, self.default_input())
    }

    pub fn spec_with_input(self, classes: usize, input: Vec<usize>) -> ModelSpec {
        match self {
            Preset::Densenet => densenet_spec_with(12, 12, classes, input),
            Preset::DensenetMicro => densenet_spec_with(2, 2, classes, input),
            Preset::ModelA => convnet_a_spec_with(classes, input, &SpeechWidths::model_a()),
            Preset::ModelAMicro => convnet_a_spec_with(
                classes,
                input,
                &SpeechWidths {
                    conv: vec![8, 16],
                    fc: 64,
                },
            ),
            Preset::ModelB => vgg_b_spec_with(classes, input, &SpeechWidths::model_b()),
            Preset::ModelBMicro => vgg_b_spec_with(
                classes,
                input,
                &SpeechWidths {
                    conv: vec![4, 8, 8, 16],
                    fc: 64,
                },
            ),
        }
    }
}
