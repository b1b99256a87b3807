//! Segmentation networks assembled from layer lists, with per-layer sharing
//! annotations derived from the experimental setting.
//!
//! A layer annotated [`Sharing::Shared`] owns one parameter copy under
//! [`ScopeTag::Shared`]; a [`Sharing::PerModality`] layer owns two copies of
//! identical shape under [`ScopeTag::A`] and [`ScopeTag::B`], and the forward
//! pass picks the copy matching the input's modality.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{blend_running, norm_forward, BatchStats, NormKind, NormSpec};
use crate::tensor::{io, Conv2dParams, Padding, Tape, Tensor, Var};
use crate::{Modality, Mode, ScopeTag};

/// The seven experimental settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    /// Two disjoint networks, one per modality.
    #[serde(rename = "individual")]
    Individual,
    /// Every parameter shared, normalization included.
    #[serde(rename = "joint")]
    Joint,
    /// `Joint` plus the distillation loss.
    #[serde(rename = "joint-kd", alias = "joint_kd")]
    JointKd,
    /// Modality-specific encoder prefix, shared remainder.
    #[serde(rename = "y", alias = "y_shaped")]
    YShaped,
    /// Modality-specific prefix and suffix around a shared middle.
    #[serde(rename = "x", alias = "x_shaped")]
    XShaped,
    /// Shared kernels, modality-specific normalization.
    #[serde(rename = "chilopod")]
    Chilopod,
    /// `Chilopod` plus the distillation loss.
    #[serde(rename = "ours")]
    Ours,
}

impl Setting {
    pub const ALL: [Setting; 7] = [
        Setting::Individual,
        Setting::Joint,
        Setting::JointKd,
        Setting::YShaped,
        Setting::XShaped,
        Setting::Chilopod,
        Setting::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Setting::Individual => "individual",
            Setting::Joint => "joint",
            Setting::JointKd => "joint-kd",
            Setting::YShaped => "y",
            Setting::XShaped => "x",
            Setting::Chilopod => "chilopod",
            Setting::Ours => "ours",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "individual" => Some(Setting::Individual),
            "joint" => Some(Setting::Joint),
            "joint-kd" | "joint_kd" => Some(Setting::JointKd),
            "y" | "y_shaped" | "y-shaped" => Some(Setting::YShaped),
            "x" | "x_shaped" | "x-shaped" => Some(Setting::XShaped),
            "chilopod" => Some(Setting::Chilopod),
            "ours" => Some(Setting::Ours),
            _ => None,
        }
    }

    /// Whether the distillation term takes part in optimization.
    pub fn uses_kd(self) -> bool {
        matches!(self, Setting::JointKd | Setting::Ours)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    Shared,
    PerModality,
}

/// One entry of an architecture's layer list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: Padding,
        bias: bool,
    },
    Norm {
        kind: NormKind,
    },
    Relu,
    /// Upsample the running activation to the extent of layer `source`'s
    /// output and concatenate the two along channels.
    ResizeConcat {
        source: usize,
    },
    /// Final `same`-padded, stride-1 convolution with bias producing one
    /// channel per class.
    Logits {
        kernel: usize,
        dilation: usize,
    },
}

impl LayerKind {
    fn conv(out_channels: usize, dilation: usize) -> Self {
        LayerKind::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            dilation,
            padding: Padding::Same,
            bias: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchName {
    DilatedMini,
    UnetMini,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub name: ArchName,
    pub input_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerKind>,
    pub setting: Setting,
    /// Leading layers kept modality-specific by the Y and X settings.
    pub private_prefix: usize,
    /// Trailing layers kept modality-specific by the X setting.
    pub private_suffix: usize,
}

impl ArchConfig {
    /// Six 3×3 convolutions with widths 8, 8, 16, 16, 16, C and dilations
    /// 1, 1, 2, 2, 1, 1; normalization and ReLU follow every convolution but
    /// the logits layer.
    pub fn dilated_mini(num_classes: usize, setting: Setting, norm: NormKind) -> Self {
        let mut layers = Vec::new();
        for (width, dilation) in [(8, 1), (8, 1), (16, 2), (16, 2), (16, 1)] {
            layers.push(LayerKind::conv(width, dilation));
            layers.push(LayerKind::Norm { kind: norm });
            layers.push(LayerKind::Relu);
        }
        layers.push(LayerKind::Logits {
            kernel: 3,
            dilation: 1,
        });
        Self {
            name: ArchName::DilatedMini,
            input_channels: 1,
            num_classes,
            layers,
            setting,
            private_prefix: 3,
            private_suffix: 4,
        }
    }

    /// Two-level encoder/decoder: a full-resolution block pair, a stride-2
    /// block pair, then upsampling concatenated with the full-resolution skip.
    pub fn unet_mini(num_classes: usize, setting: Setting, norm: NormKind) -> Self {
        let block = |layers: &mut Vec<LayerKind>, conv: LayerKind| {
            layers.push(conv);
            layers.push(LayerKind::Norm { kind: norm });
            layers.push(LayerKind::Relu);
        };
        let mut layers = Vec::new();
        block(&mut layers, LayerKind::conv(8, 1));
        block(&mut layers, LayerKind::conv(8, 1));
        let skip = layers.len() - 1;
        block(
            &mut layers,
            LayerKind::Conv {
                out_channels: 16,
                kernel: 3,
                stride: 2,
                dilation: 1,
                padding: Padding::Same,
                bias: false,
            },
        );
        block(&mut layers, LayerKind::conv(16, 1));
        layers.push(LayerKind::ResizeConcat { source: skip });
        block(&mut layers, LayerKind::conv(8, 1));
        layers.push(LayerKind::Logits {
            kernel: 3,
            dilation: 1,
        });
        Self {
            name: ArchName::UnetMini,
            input_channels: 1,
            num_classes,
            layers,
            setting,
            private_prefix: 3,
            private_suffix: 4,
        }
    }

    pub fn with_setting(mut self, setting: Setting) -> Self {
        self.setting = setting;
        self
    }

    /// Sharing annotation of layer `index` under the configured setting.
    pub fn sharing(&self, index: usize) -> Sharing {
        let n = self.layers.len();
        let per_modality = match self.setting {
            Setting::Individual => true,
            Setting::Joint | Setting::JointKd => false,
            Setting::Chilopod | Setting::Ours => {
                matches!(self.layers[index], LayerKind::Norm { .. })
            }
            Setting::YShaped => index < self.private_prefix,
            Setting::XShaped => index < self.private_prefix || index >= n - self.private_suffix,
        };
        if per_modality {
            Sharing::PerModality
        } else {
            Sharing::Shared
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamName {
    Kernel,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamName {
    const ALL: [ParamName; 6] = [
        ParamName::Kernel,
        ParamName::Bias,
        ParamName::Gamma,
        ParamName::Beta,
        ParamName::RunningMean,
        ParamName::RunningVar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamName::Kernel => "kernel",
            ParamName::Bias => "bias",
            ParamName::Gamma => "gamma",
            ParamName::Beta => "beta",
            ParamName::RunningMean => "running_mean",
            ParamName::RunningVar => "running_var",
        }
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamName::RunningMean | ParamName::RunningVar)
    }
}

/// Address of one parameter tensor: `layer{i}.{scope}.{name}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: usize,
    pub scope: ScopeTag,
    pub name: ParamName,
}

impl ParamKey {
    pub fn new(layer: usize, scope: ScopeTag, name: ParamName) -> Self {
        Self { layer, scope, name }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let mut parts = s.splitn(3, '.');
        let layer = parts.next()?.strip_prefix("layer")?.parse().ok()?;
        let scope = ScopeTag::parse(parts.next()?)?;
        let name = parts.next()?;
        let name = ParamName::ALL.into_iter().find(|n| n.as_str() == name)?;
        Some(Self { layer, scope, name })
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layer{}.{}.{}",
            self.layer,
            self.scope.as_str(),
            self.name.as_str()
        )
    }
}

/// The three regularized parameter sets of the overall loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ThetaSet {
    /// All convolution kernels and biases, plus shared normalization affines.
    Kernel,
    NormA,
    NormB,
}

impl ParamKey {
    /// Regularizer set of a trainable parameter; `None` for running statistics.
    pub fn theta_set(&self) -> Option<ThetaSet> {
        match (self.name, self.scope) {
            (ParamName::RunningMean | ParamName::RunningVar, _) => None,
            (ParamName::Gamma | ParamName::Beta, ScopeTag::A) => Some(ThetaSet::NormA),
            (ParamName::Gamma | ParamName::Beta, ScopeTag::B) => Some(ThetaSet::NormB),
            _ => Some(ThetaSet::Kernel),
        }
    }
}

/// Every parameter tensor of a network, keyed by layer, scope and name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    entries: BTreeMap<ParamKey, Tensor>,
}

impl ParameterStore {
    pub fn get(&self, key: &ParamKey) -> Result<&Tensor> {
        self.entries
            .get(key)
            .ok_or_else(|| Error::MissingParameter(key.to_string()))
    }

    pub fn get_mut(&mut self, key: &ParamKey) -> Result<&mut Tensor> {
        self.entries
            .get_mut(key)
            .ok_or_else(|| Error::MissingParameter(key.to_string()))
    }

    pub fn insert(&mut self, key: ParamKey, tensor: Tensor) {
        self.entries.insert(key, tensor);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.entries.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.entries.keys()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.entries.iter().filter(|(k, _)| k.name.is_trainable())
    }

    /// Scope tags present for `layer`.
    pub fn scopes_of(&self, layer: usize) -> Vec<ScopeTag> {
        let mut s: Vec<ScopeTag> = self
            .entries
            .keys()
            .filter(|k| k.layer == layer)
            .map(|k| k.scope)
            .collect();
        s.dedup();
        s
    }

    /// Records every trainable as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        self.bind_with(tape, true)
    }

    /// Records every trainable as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, track: bool) -> Binding {
        let vars = self
            .trainable()
            .map(|(k, t)| (*k, tape.leaf(t.clone().with_requires_grad(track))))
            .collect();
        Binding { vars }
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_stat_updates(&mut self, network: &Network, updates: &[StatUpdate]) -> Result<()> {
        for u in updates {
            let spec = network.norm_spec(u.layer)?;
            for (name, batch) in [
                (ParamName::RunningMean, &u.stats.mean),
                (ParamName::RunningVar, &u.stats.var),
            ] {
                let t = self.get_mut(&ParamKey::new(u.layer, u.scope, name))?;
                blend_running(t.values_mut(), batch, spec.momentum)?;
            }
        }
        Ok(())
    }

    pub fn count(&self) -> ParamCount {
        count_parameters(self)
    }
}

/// Trainable parameters of a store recorded on one tape.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: BTreeMap<ParamKey, Var>,
}

impl Binding {
    pub fn get(&self, key: &ParamKey) -> Result<Var> {
        self.vars
            .get(key)
            .copied()
            .ok_or_else(|| Error::MissingParameter(key.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Var)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }
}

/// Exact trainable-parameter counts. Running statistics are not counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub shared_kernel: usize,
    pub shared_norm: usize,
    pub private_a: usize,
    pub private_b: usize,
    pub norm_a: usize,
    pub norm_b: usize,
}

pub fn count_parameters(store: &ParameterStore) -> ParamCount {
    let mut c = ParamCount::default();
    for (key, t) in store.trainable() {
        let n = t.len();
        c.total += n;
        let is_norm = matches!(key.name, ParamName::Gamma | ParamName::Beta);
        let slot = match (key.scope, is_norm) {
            (ScopeTag::Shared, false) => &mut c.shared_kernel,
            (ScopeTag::Shared, true) => &mut c.shared_norm,
            (ScopeTag::A, false) => &mut c.private_a,
            (ScopeTag::B, false) => &mut c.private_b,
            (ScopeTag::A, true) => &mut c.norm_a,
            (ScopeTag::B, true) => &mut c.norm_b,
        };
        *slot += n;
    }
    c
}

/// A layer with its resolved sharing and channel extents.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub sharing: Sharing,
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm: Option<NormSpec>,
}

impl LayerSpec {
    pub fn scopes(&self) -> &'static [ScopeTag] {
        match self.sharing {
            Sharing::Shared => &[ScopeTag::Shared],
            Sharing::PerModality => &[ScopeTag::A, ScopeTag::B],
        }
    }

    pub fn scope_for(&self, modality: Modality) -> ScopeTag {
        match self.sharing {
            Sharing::Shared => ScopeTag::Shared,
            Sharing::PerModality => modality.scope(),
        }
    }

    fn conv_params(&self) -> Option<(Conv2dParams, usize, bool)> {
        match self.kind {
            LayerKind::Conv {
                kernel,
                stride,
                dilation,
                padding,
                bias,
                ..
            } => Some((
                Conv2dParams {
                    stride,
                    dilation,
                    padding,
                },
                kernel,
                bias,
            )),
            LayerKind::Logits { kernel, dilation } => Some((
                Conv2dParams {
                    stride: 1,
                    dilation,
                    padding: Padding::Same,
                },
                kernel,
                true,
            )),
            _ => None,
        }
    }
}

/// A running-statistics update emitted by a train-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate {
    pub layer: usize,
    pub scope: ScopeTag,
    pub stats: BatchStats,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub stat_updates: Vec<StatUpdate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: ArchConfig,
    layers: Vec<LayerSpec>,
}

impl Network {
    /// Validates the layer chain and resolves sharing annotations.
    pub fn new(config: ArchConfig) -> Result<Self> {
        let cfg = &config;
        let err = |m: String| Err(Error::Config(m));
        if cfg.num_classes < 2 {
            return err(format!("need at least 2 classes, got {}", cfg.num_classes));
        }
        if cfg.input_channels == 0 || cfg.layers.is_empty() {
            return err("empty architecture".into());
        }
        let n = cfg.layers.len();
        match cfg.setting {
            Setting::YShaped if cfg.private_prefix == 0 || cfg.private_prefix >= n => {
                return err(format!(
                    "Y split point {} out of range for {n} layers",
                    cfg.private_prefix
                ));
            }
            Setting::XShaped
                if cfg.private_prefix == 0
                    || cfg.private_suffix == 0
                    || cfg.private_prefix + cfg.private_suffix >= n =>
            {
                return err(format!(
                    "X split points {}/{} out of range for {n} layers",
                    cfg.private_prefix, cfg.private_suffix
                ));
            }
            _ => {}
        }

        let logits: Vec<usize> = (0..n)
            .filter(|&i| matches!(cfg.layers[i], LayerKind::Logits { .. }))
            .collect();
        if logits.len() != 1 {
            return err(format!(
                "expected exactly one logits layer, found {}",
                logits.len()
            ));
        }
        if cfg.layers[logits[0] + 1..]
            .iter()
            .any(|l| !matches!(l, LayerKind::Norm { .. }))
        {
            return err("only normalization layers may follow the logits layer".into());
        }

        let mut layers = Vec::with_capacity(n);
        // (channels, downsampling factor) of every layer output.
        let mut trace: Vec<(usize, usize)> = Vec::with_capacity(n);
        let (mut ch, mut scale) = (cfg.input_channels, 1usize);
        for (i, kind) in cfg.layers.iter().enumerate() {
            let in_ch = ch;
            let mut norm = None;
            match *kind {
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    stride,
                    dilation,
                    ..
                } => {
                    if out_channels == 0 || kernel == 0 || stride == 0 || dilation == 0 {
                        return err(format!("layer {i}: conv extents must be positive"));
                    }
                    ch = out_channels;
                    scale *= stride;
                }
                LayerKind::Logits { kernel, dilation } => {
                    if kernel == 0 || dilation == 0 {
                        return err(format!("layer {i}: logits extents must be positive"));
                    }
                    if scale != 1 {
                        return err(format!("layer {i}: logits at 1/{scale} resolution"));
                    }
                    ch = cfg.num_classes;
                }
                LayerKind::Norm { kind } => {
                    let spec = NormSpec::new(kind, ch)
                        .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                    norm = Some(spec);
                }
                LayerKind::Relu => {}
                LayerKind::ResizeConcat { source } => {
                    if source >= i {
                        return err(format!(
                            "layer {i}: skip source {source} is not an earlier layer"
                        ));
                    }
                    let (src_ch, src_scale) = trace[source];
                    if scale % src_scale != 0 {
                        return err(format!(
                            "layer {i}: cannot upsample 1/{scale} to 1/{src_scale}"
                        ));
                    }
                    ch += src_ch;
                    scale = src_scale;
                }
            }
            trace.push((ch, scale));
            layers.push(LayerSpec {
                kind: *kind,
                sharing: cfg.sharing(i),
                in_channels: in_ch,
                out_channels: ch,
                norm,
            });
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn setting(&self) -> Setting {
        self.config.setting
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn norm_spec(&self, layer: usize) -> Result<&NormSpec> {
        self.layers
            .get(layer)
            .and_then(|l| l.norm.as_ref())
            .ok_or_else(|| Error::Config(format!("layer {layer} is not a normalization layer")))
    }

    /// Expected parameter shapes per key.
    pub fn param_shapes(&self) -> Vec<(ParamKey, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for &scope in layer.scopes() {
                if let Some((_, k, bias)) = layer.conv_params() {
                    out.push((
                        ParamKey::new(i, scope, ParamName::Kernel),
                        vec![layer.out_channels, layer.in_channels, k, k],
                    ));
                    if bias {
                        out.push((
                            ParamKey::new(i, scope, ParamName::Bias),
                            vec![layer.out_channels],
                        ));
                    }
                }
                if let Some(spec) = &layer.norm {
                    let c = vec![spec.channels];
                    out.push((ParamKey::new(i, scope, ParamName::Gamma), c.clone()));
                    out.push((ParamKey::new(i, scope, ParamName::Beta), c.clone()));
                    if spec.has_running_stats() {
                        out.push((ParamKey::new(i, scope, ParamName::RunningMean), c.clone()));
                        out.push((ParamKey::new(i, scope, ParamName::RunningVar), c));
                    }
                }
            }
        }
        out
    }

    /// Fresh parameters: kernels drawn from N(0, 2 / fan_in), biases and
    /// shifts zero, scales one, running mean 0 and variance 1.
    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::default();
        for (key, shape) in self.param_shapes() {
            let len: usize = shape.iter().product();
            let values = match key.name {
                ParamName::Kernel => {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                    (0..len).map(|_| dist.sample(&mut rng)).collect()
                }
                ParamName::Gamma | ParamName::RunningVar => vec![1.0; len],
                _ => vec![0.0; len],
            };
            store.insert(key, Tensor::from_vec(&shape, values)?);
        }
        Ok(store)
    }

    /// Runs the layers for one modality. Shared layers read the shared copy,
    /// per-modality layers the copy of `modality`. Train-mode batch
    /// normalization statistics are returned rather than applied.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        store: &ParameterStore,
        input: Var,
        modality: Modality,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let in_shape = tape.shape(input)?.to_vec();
        if in_shape.len() != 4 || in_shape[1] != self.config.input_channels {
            return Err(Error::ShapeMismatch {
                op: "forward_modality",
                left: in_shape,
                right: vec![self.config.input_channels],
            });
        }
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut updates = Vec::new();
        let mut cur = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let scope = layer.scope_for(modality);
            let key = |name| ParamKey::new(i, scope, name);
            cur = match layer.kind {
                LayerKind::Conv { .. } | LayerKind::Logits { .. } => {
                    let (params, _, bias) = layer.conv_params().expect("conv layer");
                    let k = binding.get(&key(ParamName::Kernel))?;
                    let b = if bias {
                        Some(binding.get(&key(ParamName::Bias))?)
                    } else {
                        None
                    };
                    tape.conv2d(cur, k, b, params)?
                }
                LayerKind::Norm { .. } => {
                    let spec = layer.norm.as_ref().expect("norm spec");
                    let gamma = binding.get(&key(ParamName::Gamma))?;
                    let beta = binding.get(&key(ParamName::Beta))?;
                    let running = if spec.has_running_stats() {
                        Some((
                            store.get(&key(ParamName::RunningMean))?.values(),
                            store.get(&key(ParamName::RunningVar))?.values(),
                        ))
                    } else {
                        None
                    };
                    let out = norm_forward(tape, cur, gamma, beta, spec, mode, running)?;
                    if let Some(stats) = out.batch_stats {
                        updates.push(StatUpdate {
                            layer: i,
                            scope,
                            stats,
                        });
                    }
                    out.output
                }
                LayerKind::Relu => tape.relu(cur)?,
                LayerKind::ResizeConcat { source } => tape.resize_concat(cur, outputs[source])?,
            };
            outputs.push(cur);
        }
        let out_shape = tape.shape(cur)?;
        if out_shape[1] != self.config.num_classes || out_shape[2..] != in_shape[2..] {
            return Err(Error::ShapeMismatch {
                op: "forward_modality output",
                left: out_shape.to_vec(),
                right: in_shape,
            });
        }
        Ok(ForwardOutput {
            logits: cur,
            stat_updates: updates,
        })
    }

    /// Detached forward pass: returns logits and, in train mode, applies the
    /// running-statistics updates to `store`.
    pub fn forward_modality(
        &self,
        store: &mut ParameterStore,
        batch: &Tensor,
        modality: Modality,
        mode: Mode,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = store.bind_frozen(&mut tape);
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, &binding, store, x, modality, mode)?;
        let logits = tape.value(out.logits)?.clone();
        store.apply_stat_updates(self, &out.stat_updates)?;
        Ok(logits)
    }

    /// Eval-mode logits without touching the store.
    pub fn predict(
        &self,
        store: &ParameterStore,
        batch: &Tensor,
        modality: Modality,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = store.bind_frozen(&mut tape);
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, &binding, store, x, modality, Mode::Eval)?;
        Ok(tape.value(out.logits)?.clone())
    }

    /// Checks that `store` holds exactly the expected keys and shapes.
    pub fn check_store(&self, store: &ParameterStore) -> Result<()> {
        let expected = self.param_shapes();
        if expected.len() != store.entries.len() {
            return Err(Error::Config(format!(
                "store holds {} tensors, network expects {}",
                store.entries.len(),
                expected.len()
            )));
        }
        for (key, shape) in expected {
            let t = store.get(&key)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "parameter store",
                    left: t.shape().to_vec(),
                    right: shape,
                });
            }
        }
        Ok(())
    }
}

/// Validates `config` and initializes its parameters.
pub fn build_network(config: ArchConfig, seed: u64) -> Result<(Network, ParameterStore)> {
    let net = Network::new(config)?;
    let store = net.init_params(seed)?;
    Ok((net, store))
}

pub const CHECKPOINT_MANIFEST: &str = "arch.json";
const TENSOR_EXT: &str = "cmdt";

/// Writes `dir/arch.json` plus one `layer{i}.{scope}.{name}.cmdt` per tensor.
pub fn save_checkpoint(dir: &Path, network: &Network, store: &ParameterStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = serde_json::to_string_pretty(network.config())?;
    manifest.push('\n');
    fs::write(dir.join(CHECKPOINT_MANIFEST), manifest)?;
    for (key, t) in store.iter() {
        io::write(dir.join(format!("{key}.{TENSOR_EXT}")), t)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Network, ParameterStore)> {
    let manifest = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
    let config: ArchConfig = serde_json::from_str(&manifest)?;
    let network = Network::new(config)?;
    let mut store = ParameterStore::default();
    for (key, _) in network.param_shapes() {
        let t = io::read(dir.join(format!("{key}.{TENSOR_EXT}")))?;
        store.insert(key, t);
    }
    network.check_store(&store)?;
    Ok((network, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Fill;

    /// conv 1→4 (bias) + batch norm, conv 4→2 (bias, logits) + batch norm.
    fn toy(setting: Setting) -> ArchConfig {
        ArchConfig {
            name: ArchName::Custom,
            input_channels: 1,
            num_classes: 2,
            layers: vec![
                LayerKind::Conv {
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    dilation: 1,
                    padding: Padding::Same,
                    bias: true,
                },
                LayerKind::Norm {
                    kind: NormKind::Batch,
                },
                LayerKind::Logits {
                    kernel: 3,
                    dilation: 1,
                },
                LayerKind::Norm {
                    kind: NormKind::Batch,
                },
            ],
            setting,
            private_prefix: 1,
            private_suffix: 1,
        }
    }

    fn count(cfg: ArchConfig) -> ParamCount {
        build_network(cfg, 0).unwrap().1.count()
    }

    #[test]
    fn toy_counts() {
        let chilopod = count(toy(Setting::Chilopod));
        assert_eq!(chilopod.shared_kernel, 36 + 4 + 72 + 2);
        assert_eq!(chilopod.norm_a, 2 * (4 + 2));
        assert_eq!(chilopod.norm_b, 2 * (4 + 2));
        let joint = count(toy(Setting::Joint));
        assert_eq!(joint.total, 114 + 12);
        assert_eq!(chilopod.total - joint.total, 12);
        assert_eq!(count(toy(Setting::Individual)).total, 2 * (114 + 12));
        assert_eq!(count(toy(Setting::Ours)), chilopod);
    }

    #[test]
    fn setting_annotations() {
        let cfg = ArchConfig::dilated_mini(5, Setting::XShaped, NormKind::Batch);
        let n = cfg.layers.len();
        assert_eq!(n, 16);
        let net = Network::new(cfg).unwrap();
        let per: Vec<bool> = net
            .layers()
            .iter()
            .map(|l| l.sharing == Sharing::PerModality)
            .collect();
        assert!(per[..3].iter().all(|&p| p));
        assert!(per[3..n - 4].iter().all(|&p| !p));
        assert!(per[n - 4..].iter().all(|&p| p));

        let y = Network::new(ArchConfig::dilated_mini(
            5,
            Setting::YShaped,
            NormKind::Batch,
        ))
        .unwrap();
        assert!(y.layers()[..3]
            .iter()
            .all(|l| l.sharing == Sharing::PerModality));
        assert!(y.layers()[3..].iter().all(|l| l.sharing == Sharing::Shared));

        let c = Network::new(ArchConfig::unet_mini(5, Setting::Chilopod, NormKind::Batch)).unwrap();
        for l in c.layers() {
            let is_norm = matches!(l.kind, LayerKind::Norm { .. });
            assert_eq!(l.sharing == Sharing::PerModality, is_norm);
        }
    }

    #[test]
    fn split_points_validated() {
        let mut cfg = ArchConfig::dilated_mini(5, Setting::YShaped, NormKind::Batch);
        cfg.private_prefix = 16;
        assert!(Network::new(cfg.clone()).is_err());
        cfg.setting = Setting::XShaped;
        cfg.private_prefix = 8;
        cfg.private_suffix = 8;
        assert!(Network::new(cfg).is_err());
    }

    #[test]
    fn channel_chain_validated() {
        let mut cfg = toy(Setting::Joint);
        cfg.layers.push(LayerKind::Relu);
        assert!(Network::new(cfg).is_err());
        let mut cfg = toy(Setting::Joint);
        cfg.layers.insert(0, LayerKind::ResizeConcat { source: 3 });
        assert!(Network::new(cfg).is_err());
        let mut cfg = toy(Setting::Joint);
        cfg.layers
            .retain(|l| !matches!(l, LayerKind::Logits { .. }));
        assert!(Network::new(cfg).is_err());
        let mut cfg = toy(Setting::Joint);
        cfg.num_classes = 1;
        assert!(Network::new(cfg).is_err());
    }

    #[test]
    fn unet_shapes() {
        let (net, store) = build_network(
            ArchConfig::unet_mini(3, Setting::Ours, NormKind::Group { groups: 2 }),
            4,
        )
        .unwrap();
        let x = Tensor::new(
            &[2, 1, 8, 8],
            Fill::Normal {
                mean: 0.0,
                std: 1.0,
                seed: 1,
            },
        )
        .unwrap();
        let y = net.predict(&store, &x, Modality::B).unwrap();
        assert_eq!(y.shape(), &[2, 3, 8, 8]);
        let concat = net
            .layers()
            .iter()
            .find(|l| matches!(l.kind, LayerKind::ResizeConcat { .. }))
            .unwrap();
        assert_eq!(concat.out_channels, 24);
    }

    #[test]
    fn param_key_text_roundtrip() {
        let k = ParamKey::new(12, ScopeTag::B, ParamName::RunningVar);
        assert_eq!(k.to_string(), "layer12.B.running_var");
        assert_eq!(ParamKey::parse("layer12.B.running_var"), Some(k));
        assert_eq!(ParamKey::parse("layer1.C.kernel"), None);
    }

    #[test]
    fn deterministic_init() {
        let cfg = ArchConfig::dilated_mini(5, Setting::Individual, NormKind::Batch);
        let (_, a) = build_network(cfg.clone(), 9).unwrap();
        let (_, b) = build_network(cfg.clone(), 9).unwrap();
        let (_, c) = build_network(cfg, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (net, mut store) = build_network(
            ArchConfig::unet_mini(4, Setting::XShaped, NormKind::Batch),
            2,
        )
        .unwrap();
        store
            .get_mut(&ParamKey::new(1, ScopeTag::A, ParamName::RunningMean))
            .unwrap()
            .values_mut()[0] = 0.25;
        save_checkpoint(dir.path(), &net, &store).unwrap();
        let (net2, store2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(net, net2);
        assert_eq!(store, store2);
        assert!(dir.path().join("layer0.A.kernel.cmdt").exists());
    }
}
