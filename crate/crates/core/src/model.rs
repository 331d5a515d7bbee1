//! The SUNSET family: a small CNN over stacked past sky frames plus a
//! measurement-lag vector, with two location-conditioned variants for
//! multi-site training.
//!
//! Layer stack: two conv blocks (3x3 conv -> ReLU -> batchnorm -> 2x2
//! maxpool; 24 then 48 filters at the default profile), flatten, concat
//! with the 8 lag values, then two 1024-wide dense+ReLU+dropout(0.4)
//! layers and a single linear output unit. The 8 RGB frames enter stacked
//! along the channel axis (24 input channels). `condition_matrix` appends
//! one constant 0/1 plane as an extra input channel; `dual_head` shares
//! the conv blocks and keeps one dense stack per site, selected by inner
//! product with the one-hot site vector.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use helio_tensor::{he_uniform, stream_seed, DetRng, Mode, Scalar, Tape, Tensor, Var};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    #[default]
    None,
    ConditionMatrix,
    DualHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SunsetConfig {
    /// Pixels per side; must be divisible by 4 (two 2x poolings).
    pub image_size: usize,
    /// Input sky frames; 8 at the faithful profile.
    pub frames: usize,
    /// Measurement lag values; 8 at the faithful profile.
    pub lag_len: usize,
    pub conv_filters: [usize; 2],
    pub fc_width: usize,
    pub dropout_rate: f64,
    pub condition_mode: ConditionMode,
}

impl Default for SunsetConfig {
    fn default() -> Self {
        SunsetConfig {
            image_size: 64,
            frames: 8,
            lag_len: 8,
            conv_filters: [24, 48],
            fc_width: 1024,
            dropout_rate: 0.4,
            condition_mode: ConditionMode::None,
        }
    }
}

impl SunsetConfig {
    /// Desk-scale profile used by fast tests: 32px, [8,16] filters, 64-wide FC.
    pub fn test_profile() -> Self {
        SunsetConfig { image_size: 32, conv_filters: [8, 16], fc_width: 64, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(CoreError::Config(format!(
                "model.image_size: must be a positive multiple of 4, got {}",
                self.image_size
            )));
        }
        if self.frames == 0 || self.lag_len == 0 {
            return Err(CoreError::Config("model.frames / model.lag_len: must be positive".into()));
        }
        if self.conv_filters.iter().any(|&f| f == 0) || self.fc_width == 0 {
            return Err(CoreError::Config("model.conv_filters / model.fc_width: must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CoreError::Config(format!(
                "model.dropout_rate: must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Input channels: RGB frames stacked, plus the condition plane.
    pub fn in_channels(&self) -> usize {
        3 * self.frames + usize::from(self.condition_mode == ConditionMode::ConditionMatrix)
    }

    /// Width of the flattened conv output.
    pub fn flatten_dim(&self) -> usize {
        let side = self.image_size / 4;
        self.conv_filters[1] * side * side
    }

    pub fn head_count(&self) -> usize {
        if self.condition_mode == ConditionMode::DualHead {
            2
        } else {
            1
        }
    }

    /// Closed-form count of trainable parameters (batchnorm running
    /// statistics are state, not parameters, and are excluded):
    ///
    /// ```text
    /// conv  = F1*(9*Cin + 1) + 2*F1  +  F2*(9*F1 + 1) + 2*F2
    /// head  = (D+1)*W + (W+1)*W + (W+1)      with D = flatten + lag_len
    /// total = conv + heads * head
    /// ```
    ///
    /// At the default profile this gives 13,658,521 (the usual
    /// "13.66M" headline figure for this architecture).
    pub fn param_count(&self) -> usize {
        let [f1, f2] = self.conv_filters;
        let cin = self.in_channels();
        let conv = f1 * (9 * cin + 1) + 2 * f1 + f2 * (9 * f1 + 1) + 2 * f2;
        let d = self.flatten_dim() + self.lag_len;
        let w = self.fc_width;
        let head = (d + 1) * w + (w + 1) * w + (w + 1);
        conv + self.head_count() * head
    }

    fn head_prefixes(&self) -> Vec<String> {
        match self.condition_mode {
            ConditionMode::DualHead => vec!["head0.".into(), "head1.".into()],
            _ => vec!["".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Conv,
    Fc,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Conv => "conv",
            ParamGroup::Fc => "fc",
        })
    }
}

impl FromStr for ParamGroup {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(ParamGroup::Conv),
            "fc" => Ok(ParamGroup::Fc),
            other => Err(CoreError::Config(format!("unknown parameter group '{other}' (conv|fc)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub tensor: Tensor<T>,
    pub group: ParamGroup,
    /// False for batchnorm running statistics: they are updated by the
    /// forward pass, never by the optimizer.
    pub trainable: bool,
}

/// Named parameter tensors in deterministic (lexicographic) order.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        ModelParams { entries: BTreeMap::new() }
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn insert(&mut self, name: &str, entry: ParamEntry<T>) {
        let prev = self.entries.insert(name.to_string(), entry);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_value_count(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    /// All names in a group, in iteration order.
    pub fn group_names(&self, group: ParamGroup) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.group == group)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(other.entries.iter()).all(|((an, ae), (bn, be))| {
                an == bn && ae.group == be.group && ae.trainable == be.trainable && ae.tensor.bit_eq(&be.tensor)
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

/// One parameter the builder will create: the single source of truth for
/// names, shapes, grouping and init, also used to validate checkpoints.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub trainable: bool,
    init: Init,
}

pub fn param_specs(config: &SunsetConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let cin = config.in_channels();
    let [f1, f2] = config.conv_filters;
    let mut specs = Vec::new();

    for (idx, in_ch, filters) in [(1, cin, f1), (2, f1, f2)] {
        let conv = |name: String, shape: Vec<usize>, trainable: bool, init: Init| ParamSpec {
            name,
            shape,
            group: ParamGroup::Conv,
            trainable,
            init,
        };
        specs.push(conv(
            format!("conv{idx}.weight"),
            vec![filters, in_ch, 3, 3],
            true,
            Init::HeUniform { fan_in: in_ch * 9 },
        ));
        specs.push(conv(format!("conv{idx}.bias"), vec![filters], true, Init::Zeros));
        specs.push(conv(format!("bn{idx}.gamma"), vec![filters], true, Init::Ones));
        specs.push(conv(format!("bn{idx}.beta"), vec![filters], true, Init::Zeros));
        specs.push(conv(format!("bn{idx}.running_mean"), vec![filters], false, Init::Zeros));
        specs.push(conv(format!("bn{idx}.running_var"), vec![filters], false, Init::Ones));
    }

    let d = config.flatten_dim() + config.lag_len;
    let w = config.fc_width;
    for prefix in config.head_prefixes() {
        for (name, din, dout) in [
            (format!("{prefix}fc1"), d, w),
            (format!("{prefix}fc2"), w, w),
            (format!("{prefix}out"), w, 1),
        ] {
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![din, dout],
                group: ParamGroup::Fc,
                trainable: true,
                init: Init::HeUniform { fan_in: din },
            });
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![dout],
                group: ParamGroup::Fc,
                trainable: true,
                init: Init::Zeros,
            });
        }
    }
    Ok(specs)
}

/// Builds freshly initialized parameters: He-style uniform weights seeded
/// per parameter name, zero biases, unit gamma / zero beta, and zero-mean /
/// unit-variance running statistics.
pub fn build_model<T: Scalar>(config: &SunsetConfig, seed: u64) -> Result<ModelParams<T>> {
    let mut params = ModelParams::default();
    for spec in param_specs(config)? {
        let tensor = match spec.init {
            Init::HeUniform { fan_in } => he_uniform(spec.shape.clone(), fan_in, stream_seed(seed, &spec.name)),
            Init::Zeros => Tensor::zeros(spec.shape.clone()),
            Init::Ones => Tensor::filled(spec.shape.clone(), T::ONE),
        };
        params.insert(&spec.name, ParamEntry { tensor, group: spec.group, trainable: spec.trainable });
    }
    debug_assert_eq!(params.trainable_value_count(), config.param_count());
    Ok(params)
}

/// Parameters staged onto a tape for one or more forward passes.
pub struct StagedModel {
    vars: BTreeMap<String, Var>,
    bn_update: [bool; 2],
}

impl StagedModel {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Moves every parameter onto the tape. Entries named in `frozen` (and all
/// non-trainable entries) are left untracked; a frozen batchnorm also stops
/// updating its running statistics and normalizes with them instead.
pub fn stage_params<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    frozen: &std::collections::HashSet<String>,
) -> StagedModel {
    let mut vars = BTreeMap::new();
    for (name, entry) in params.iter() {
        let mut t = entry.tensor.clone();
        t.track_grad = entry.trainable && !frozen.contains(name);
        vars.insert(name.clone(), tape.leaf(t));
    }
    let bn_update = [1, 2].map(|i| !frozen.contains(&format!("bn{i}.running_mean")));
    StagedModel { vars, bn_update }
}

/// Copies (possibly trained) parameter values back off the tape.
pub fn unstage_params<T: Scalar>(tape: &Tape<T>, staged: &StagedModel, params: &mut ModelParams<T>) {
    for (name, var) in staged.vars() {
        let entry = params.get_mut(name).expect("staged name exists");
        entry.tensor.set_data(tape.data(*var).to_vec());
    }
}

/// Per-sample site input for the conditioned variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteInput {
    /// Condition-matrix bit per sample (0 = first site, 1 = second).
    Bits(Var),
    /// One-hot pair per sample, shape [N,2].
    OneHot(Var),
}

/// Runs the network. `images` is [N, 3*frames, S, S] already scaled to
/// [0,1]; `lags` is [N, lag_len] already normalized; `site` carries the
/// per-sample condition plane ([N,1,S,S]) or one-hot ([N,2]) and is
/// required exactly when the config is conditioned. Dropout draws from
/// streams named per layer under `dropout_seed`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    staged: &StagedModel,
    config: &SunsetConfig,
    images: Var,
    lags: Var,
    site: Option<SiteInput>,
    mode: Mode,
    dropout_seed: u64,
) -> Result<Var> {
    let x = match (config.condition_mode, site) {
        (ConditionMode::None, None) => images,
        (ConditionMode::ConditionMatrix, Some(SiteInput::Bits(plane))) => {
            tape.concat(&[images, plane], 1)?
        }
        (ConditionMode::DualHead, Some(SiteInput::OneHot(_))) => images,
        (mode_, got) => {
            return Err(CoreError::Config(format!(
                "condition_mode {mode_:?} requires the matching site input, got {}",
                if got.is_some() { "a mismatched one" } else { "none" }
            )))
        }
    };

    let mut h = x;
    for (i, update) in staged.bn_update.iter().enumerate() {
        let idx = i + 1;
        let c = tape.conv2d(h, staged.var(&format!("conv{idx}.weight")), staged.var(&format!("conv{idx}.bias")))?;
        let r = tape.relu(c)?;
        let bn = tape.batchnorm2d(
            r,
            staged.var(&format!("bn{idx}.gamma")),
            staged.var(&format!("bn{idx}.beta")),
            staged.var(&format!("bn{idx}.running_mean")),
            staged.var(&format!("bn{idx}.running_var")),
            mode,
            *update,
        )?;
        h = tape.maxpool2(bn)?;
    }
    let flat = tape.flatten(h)?;
    let feat = tape.concat(&[flat, lags], 1)?;

    let mut head_out = Vec::new();
    for prefix in config.head_prefixes() {
        let mut h = feat;
        for layer in ["fc1", "fc2"] {
            let name = format!("{prefix}{layer}");
            let d = tape.dense(h, staged.var(&format!("{name}.weight")), staged.var(&format!("{name}.bias")))?;
            let r = tape.relu(d)?;
            let mut stream = DetRng::named(dropout_seed, &format!("{name}.dropout"));
            h = tape.dropout(r, config.dropout_rate, mode, &mut stream)?;
        }
        let name = format!("{prefix}out");
        head_out.push(tape.dense(h, staged.var(&format!("{name}.weight")), staged.var(&format!("{name}.bias")))?);
    }

    match (config.condition_mode, site) {
        (ConditionMode::DualHead, Some(SiteInput::OneHot(onehot))) => {
            let stacked = tape.concat(&head_out, 1)?; // [N,2]
            let selected = tape.mul(stacked, onehot)?;
            Ok(tape.row_sum(selected)?)
        }
        _ => Ok(head_out.pop().expect("single head")),
    }
}
