//! The three classifier architectures, assembled from the numeric core.
//!
//! All of them end in a single sigmoid unit: the emitted value is the
//! probability that the instance is genuine. The decision rule is strict:
//! a probability exactly at the threshold classifies as forgery, so
//! verification fails closed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::checkpoint::{load_into, read_checkpoint, write_checkpoint, Checkpoint};
use crate::nn::optim::{xavier_uniform, ParamSet};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::{Scalar, Tensor};
use crate::nn::NnError;
use crate::psf::Variant;

/// Dropout probability applied to the FC1 output when enabled.
pub const DROPOUT_P: f64 = 0.5;

/// Hidden width of the point-sequence model's embedding.
const RNN_EMBED: usize = 64;
/// Hidden state width of the point-sequence LSTM.
const RNN_HIDDEN: usize = 128;
/// Hidden state width of the column LSTM in the hybrid model.
const CNN_LSTM_HIDDEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// LeNet-5-shaped stack over width-fixed 128x128 tensors.
    CnnFixed,
    /// LSTM over resampled stroke points.
    RnnPoints,
    /// Convolutional encoder feeding column vectors into an LSTM.
    CnnLstm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::CnnFixed => "cnn",
            ModelKind::RnnPoints => "rnn",
            ModelKind::CnnLstm => "cnn-lstm",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "cnn" => Some(ModelKind::CnnFixed),
            "rnn" => Some(ModelKind::RnnPoints),
            "cnn-lstm" => Some(ModelKind::CnnLstm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub feature_variant: Variant,
    pub input_channels: usize,
    pub resample_n: Option<usize>,
    pub dropout_fc1: bool,
}

impl ModelConfig {
    /// Canonical config for a model kind and feature variant.
    pub fn new(kind: ModelKind, variant: Variant) -> Self {
        ModelConfig {
            kind,
            feature_variant: variant,
            input_channels: variant.channels(),
            resample_n: (kind == ModelKind::RnnPoints)
                .then_some(crate::preprocess::DEFAULT_RESAMPLE_POINTS),
            dropout_fc1: kind == ModelKind::CnnLstm && variant == Variant::Stacked,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_channels != self.feature_variant.channels() {
            return Err(ModelError::ConfigMismatch(format!(
                "variant {} needs {} channels, config says {}",
                self.feature_variant.name(),
                self.feature_variant.channels(),
                self.input_channels
            )));
        }
        if self.resample_n.is_some() != (self.kind == ModelKind::RnnPoints) {
            return Err(ModelError::ConfigMismatch(
                "resample_n is set exactly for the rnn model".into(),
            ));
        }
        Ok(())
    }

    /// ASCII `key=value` block stored after the checkpoint parameter
    /// table.
    pub fn to_config_block(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("kind={}\n", self.kind.name()));
        out.push_str(&format!("variant={}\n", self.feature_variant.name()));
        out.push_str(&format!("input_channels={}\n", self.input_channels));
        if let Some(n) = self.resample_n {
            out.push_str(&format!("resample_n={n}\n"));
        }
        out.push_str(&format!("dropout_fc1={}\n", self.dropout_fc1));
        out
    }

    pub fn from_config_block(block: &str) -> Result<Self, ModelError> {
        let mut kind = None;
        let mut variant = None;
        let mut channels = None;
        let mut resample_n = None;
        let mut dropout = false;
        for line in block.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ModelError::ConfigMismatch(format!("bad config line {line:?}")))?;
            match key {
                "kind" => kind = ModelKind::from_name(value),
                "variant" => variant = Variant::from_name(value),
                "input_channels" => channels = value.parse().ok(),
                "resample_n" => resample_n = Some(value.parse().map_err(|_| {
                    ModelError::ConfigMismatch(format!("bad resample_n {value:?}"))
                })?),
                "dropout_fc1" => dropout = value == "true",
                _ => {
                    return Err(ModelError::ConfigMismatch(format!("unknown config key {key:?}")))
                }
            }
        }
        let cfg = ModelConfig {
            kind: kind.ok_or_else(|| ModelError::ConfigMismatch("missing kind".into()))?,
            feature_variant: variant
                .ok_or_else(|| ModelError::ConfigMismatch("missing variant".into()))?,
            input_channels: channels
                .ok_or_else(|| ModelError::ConfigMismatch("missing input_channels".into()))?,
            resample_n,
            dropout_fc1: dropout,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("input width {width} is not a positive multiple of 16")]
    WidthNotMultipleOf16 { width: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Forward-pass mode: training draws dropout masks from the supplied
/// generator, evaluation applies none.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Eval,
}

/// Per-layer output shapes as (width, height, channels).
pub type ShapeTrace = Vec<(&'static str, (usize, usize, usize))>;

/// Fixed per-channel divisors that bring raster features into unit range
/// before the first convolution. Second-order channels grow like the
/// square of the displacement and the temporal ones carry extra factors
/// of tau, so without this the tanh/relu stacks saturate on the first
/// batch. All divisors are powers of two: scaling is exact in f32.
fn raster_divisors(variant: Variant) -> Vec<f64> {
    const ORIGINAL: [f64; 7] = [1.0, 32.0, 32.0, 1024.0, 1024.0, 1024.0, 1024.0];
    const TEMPORAL: [f64; 7] = [8.0, 256.0, 256.0, 65536.0, 65536.0, 65536.0, 65536.0];
    match variant {
        Variant::Original => ORIGINAL.to_vec(),
        Variant::Temporal => TEMPORAL.to_vec(),
        Variant::Stacked => ORIGINAL.iter().chain(&TEMPORAL).copied().collect(),
    }
}

fn condition_raster<F: Scalar>(input: &Tensor<F>, variant: Variant) -> Tensor<F> {
    let divisors = raster_divisors(variant);
    let plane = input.shape()[1] * input.shape()[2];
    let mut out = input.clone();
    for (c, &div) in divisors.iter().enumerate() {
        let k = F::from_f64(1.0 / div);
        for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
            *v = *v * k;
        }
    }
    out
}

/// Point rows are (x, y, elapsed ms, pen); coordinates sit in raster
/// units and the clock in milliseconds, so each column gets its own
/// power-of-two divisor.
fn condition_rows<F: Scalar>(input: &Tensor<F>) -> Tensor<F> {
    const DIVISORS: [f64; 4] = [128.0, 128.0, 1024.0, 1.0];
    let mut out = input.clone();
    for row in out.data_mut().chunks_exact_mut(4) {
        for (v, &div) in row.iter_mut().zip(&DIVISORS) {
            *v = *v * F::from_f64(1.0 / div);
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ConvSlots {
    kernel: usize,
    bias: usize,
    stride: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
struct LinearSlots {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct LstmSlots {
    weight: usize,
    bias: usize,
    hidden: usize,
}

enum Arch {
    CnnFixed { convs: Vec<ConvSlots>, fc1: LinearSlots, fc2: LinearSlots },
    RnnPoints { embed: LinearSlots, lstm: LstmSlots, head: LinearSlots },
    CnnLstm { convs: Vec<ConvSlots>, lstm: LstmSlots, fc1: LinearSlots, fc2: LinearSlots },
}

/// A built classifier: configuration, parameters, and wiring.
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
    arch: Arch,
}

struct Builder<'r, F: Scalar> {
    params: ParamSet<F>,
    rng: &'r mut ChaCha8Rng,
}

impl<'r, F: Scalar> Builder<'r, F> {
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, stride: (usize, usize)) -> ConvSlots {
        let fan_in = c_in * 9;
        let fan_out = c_out * 9;
        let kernel = self.params.add(
            format!("{name}.kernel"),
            xavier_uniform(&[c_out, c_in, 3, 3], fan_in, fan_out, self.rng),
        );
        let bias = self.params.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        ConvSlots { kernel, bias, stride }
    }

    fn linear(&mut self, name: &str, m: usize, n: usize) -> LinearSlots {
        let weight = self
            .params
            .add(format!("{name}.weight"), xavier_uniform(&[m, n], n, m, self.rng));
        let bias = self.params.add(format!("{name}.bias"), Tensor::zeros(&[m]));
        LinearSlots { weight, bias }
    }

    /// Four-gate LSTM over concatenated input and state; the forget-gate
    /// bias rows start at 1 so early training does not flush the cell.
    fn lstm(&mut self, name: &str, input: usize, hidden: usize) -> LstmSlots {
        let rows = 4 * hidden;
        let cols = input + hidden;
        let weight = self
            .params
            .add(format!("{name}.weight"), xavier_uniform(&[rows, cols], cols, rows, self.rng));
        let mut bias = Tensor::zeros(&[rows]);
        for i in 0..hidden {
            bias.data_mut()[hidden + i] = F::ONE;
        }
        let bias = self.params.add(format!("{name}.bias"), bias);
        LstmSlots { weight, bias, hidden }
    }
}

impl<F: Scalar> Model<F> {
    /// Build a model with freshly initialized parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: ParamSet::new(), rng: &mut rng };
        let c_in = config.input_channels;
        let arch = match config.kind {
            ModelKind::CnnFixed => {
                let convs = vec![
                    b.conv("conv1", 6, c_in, (1, 1)),
                    b.conv("conv2", 16, 6, (1, 1)),
                    b.conv("conv3", 120, 16, (1, 1)),
                ];
                // Three pools shrink 128x128 to 16x16 under 120 channels.
                let fc1 = b.linear("fc1", 84, 120 * 16 * 16);
                let fc2 = b.linear("fc2", 1, 84);
                Arch::CnnFixed { convs, fc1, fc2 }
            }
            ModelKind::RnnPoints => {
                let embed = b.linear("embed", RNN_EMBED, 4);
                let lstm = b.lstm("lstm", RNN_EMBED, RNN_HIDDEN);
                let head = b.linear("head", 1, RNN_HIDDEN);
                Arch::RnnPoints { embed, lstm, head }
            }
            ModelKind::CnnLstm => {
                let convs = vec![
                    b.conv("conv1", 32, c_in, (1, 1)),
                    b.conv("conv2", 64, 32, (1, 1)),
                    b.conv("conv3", 128, 64, (1, 1)),
                    b.conv("conv4", 256, 128, (1, 2)),
                    b.conv("conv5", 128, 256, (1, 2)),
                    b.conv("conv6", 256, 128, (1, 2)),
                ];
                let lstm = b.lstm("lstm", CNN_LSTM_HIDDEN, CNN_LSTM_HIDDEN);
                let fc1 = b.linear("fc1", 128, CNN_LSTM_HIDDEN);
                let fc2 = b.linear("fc2", 1, 128);
                Arch::CnnLstm { convs, lstm, fc1, fc2 }
            }
        };
        Ok(Model { config, params: b.params, arch })
    }

    /// Number of trainable values across all parameters.
    pub fn param_count(&self) -> usize {
        self.params.total_values()
    }

    /// Probability that the input is genuine, as a tape variable.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        input: &Tensor<F>,
        mode: Mode<'_>,
    ) -> Result<Var, ModelError> {
        match &self.arch {
            Arch::CnnFixed { .. } => self.forward_cnn_fixed(tape, input, mode),
            Arch::RnnPoints { .. } => self.forward_rnn(tape, input),
            Arch::CnnLstm { .. } => self.forward_cnn_lstm(tape, input, mode, None),
        }
    }

    fn forward_cnn_fixed(
        &self,
        tape: &mut Tape<F>,
        input: &Tensor<F>,
        mode: Mode<'_>,
    ) -> Result<Var, ModelError> {
        let Arch::CnnFixed { convs, fc1, fc2 } = &self.arch else { unreachable!() };
        let want = [self.config.input_channels, 128, 128];
        if input.shape() != want {
            return Err(ModelError::ConfigMismatch(format!(
                "cnn expects {:?}, got {:?}",
                want,
                input.shape()
            )));
        }
        let mut x = tape.input(condition_raster(input, self.config.feature_variant));
        for conv in convs {
            let k = tape.param(&self.params, conv.kernel);
            let bias = tape.param(&self.params, conv.bias);
            x = tape.conv2d(x, k, bias, conv.stride)?;
            x = tape.tanh(x);
            x = tape.avgpool2d(x)?;
        }
        let flat = tape.flatten(x);
        let w1 = tape.param(&self.params, fc1.weight);
        let b1 = tape.param(&self.params, fc1.bias);
        let h = tape.linear(flat, w1, b1)?;
        let mut h = tape.tanh(h);
        if self.config.dropout_fc1 {
            if let Mode::Train(rng) = mode {
                h = tape.dropout(h, DROPOUT_P, rng);
            }
        }
        let w2 = tape.param(&self.params, fc2.weight);
        let b2 = tape.param(&self.params, fc2.bias);
        let logit = tape.linear(h, w2, b2)?;
        Ok(tape.sigmoid(logit))
    }

    fn forward_rnn(&self, tape: &mut Tape<F>, input: &Tensor<F>) -> Result<Var, ModelError> {
        let Arch::RnnPoints { embed, lstm, head } = &self.arch else { unreachable!() };
        if input.rank() != 2 || input.shape()[1] != 4 || input.shape()[0] == 0 {
            return Err(ModelError::ConfigMismatch(format!(
                "rnn expects (steps, 4) rows, got {:?}",
                input.shape()
            )));
        }
        let steps = input.shape()[0];
        let rows = tape.input(condition_rows(input));
        let we = tape.param(&self.params, embed.weight);
        let be = tape.param(&self.params, embed.bias);
        let wl = tape.param(&self.params, lstm.weight);
        let bl = tape.param(&self.params, lstm.bias);
        let mut h = tape.input(Tensor::zeros(&[lstm.hidden]));
        let mut c = tape.input(Tensor::zeros(&[lstm.hidden]));
        for step in 0..steps {
            let row = tape.slice_row(rows, step)?;
            let e = tape.linear(row, we, be)?;
            let (nh, nc) = tape.lstm_cell(e, h, c, wl, bl)?;
            h = nh;
            c = nc;
        }
        let ww = tape.param(&self.params, head.weight);
        let bw = tape.param(&self.params, head.bias);
        let logit = tape.linear(h, ww, bw)?;
        Ok(tape.sigmoid(logit))
    }

    fn forward_cnn_lstm(
        &self,
        tape: &mut Tape<F>,
        input: &Tensor<F>,
        mode: Mode<'_>,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Var, ModelError> {
        let Arch::CnnLstm { convs, lstm, fc1, fc2 } = &self.arch else { unreachable!() };
        if input.rank() != 3
            || input.shape()[0] != self.config.input_channels
            || input.shape()[1] != 128
        {
            return Err(ModelError::ConfigMismatch(format!(
                "cnn-lstm expects ({}, 128, W), got {:?}",
                self.config.input_channels,
                input.shape()
            )));
        }
        let width = input.shape()[2];
        if width == 0 || !width.is_multiple_of(16) {
            return Err(ModelError::WidthNotMultipleOf16 { width });
        }

        let record = |tape: &Tape<F>, name: &'static str, var: Var, trace: &mut Option<&mut ShapeTrace>| {
            if let Some(t) = trace {
                let s = tape.value(var).shape();
                t.push((name, (s[2], s[1], s[0])));
            }
        };

        let mut x = tape.input(condition_raster(input, self.config.feature_variant));
        // Pools sit after conv1, conv2, conv4 and conv6.
        let pool_after = [true, true, false, true, false, true];
        let names = ["conv1", "conv2", "conv3", "conv4", "conv5", "conv6"];
        let pool_names = ["avgpool1", "avgpool2", "", "avgpool3", "", "avgpool4"];
        for (i, conv) in convs.iter().enumerate() {
            let k = tape.param(&self.params, conv.kernel);
            let bias = tape.param(&self.params, conv.bias);
            x = tape.conv2d(x, k, bias, conv.stride)?;
            x = tape.relu(x);
            record(tape, names[i], x, &mut trace);
            if pool_after[i] {
                x = tape.avgpool2d(x)?;
                record(tape, pool_names[i], x, &mut trace);
            }
        }

        // The encoded map is (256, 1, W/16): feed its columns to the LSTM
        // left to right.
        let cols = tape.value(x).shape()[2];
        let wl = tape.param(&self.params, lstm.weight);
        let bl = tape.param(&self.params, lstm.bias);
        let mut h = tape.input(Tensor::zeros(&[lstm.hidden]));
        let mut c = tape.input(Tensor::zeros(&[lstm.hidden]));
        for j in 0..cols {
            let col = tape.column(x, j)?;
            let (nh, nc) = tape.lstm_cell(col, h, c, wl, bl)?;
            h = nh;
            c = nc;
        }

        let w1 = tape.param(&self.params, fc1.weight);
        let b1 = tape.param(&self.params, fc1.bias);
        let mut z = tape.linear(h, w1, b1)?;
        z = tape.relu(z);
        if self.config.dropout_fc1 {
            if let Mode::Train(rng) = mode {
                z = tape.dropout(z, DROPOUT_P, rng);
            }
        }
        let w2 = tape.param(&self.params, fc2.weight);
        let b2 = tape.param(&self.params, fc2.bias);
        let logit = tape.linear(z, w2, b2)?;
        Ok(tape.sigmoid(logit))
    }

    /// Layer-by-layer output shapes of the convolutional encoder for a
    /// given input width, reported as (width, height, channels). Runs a
    /// real forward pass on zeros, so the trace is the executed truth.
    pub fn cnn_lstm_shape_trace(
        &self,
        width: usize,
    ) -> Result<ShapeTrace, ModelError> {
        if !matches!(self.arch, Arch::CnnLstm { .. }) {
            return Err(ModelError::ConfigMismatch("shape trace needs a cnn-lstm model".into()));
        }
        let input = Tensor::zeros(&[self.config.input_channels, 128, width]);
        let mut tape = Tape::new();
        let mut trace = Vec::new();
        self.forward_cnn_lstm(&mut tape, &input, Mode::Eval, Some(&mut trace))?;
        Ok(trace)
    }

    /// Serialize parameters and configuration.
    pub fn write_to(&self, w: &mut impl std::io::Write) -> Result<(), NnError> {
        write_checkpoint(&self.params, &self.config.to_config_block(), w)
    }

    /// Rebuild a model from a checkpoint produced by [`Model::write_to`].
    pub fn read_from(r: &mut impl std::io::Read) -> Result<Model<F>, ModelError> {
        let ckpt: Checkpoint = read_checkpoint(r)?;
        let config = ModelConfig::from_config_block(&ckpt.config_block)?;
        let mut model = Model::build(config, 0)?;
        load_into(&ckpt, &mut model.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_constructor_matches_invariants() {
        let cfg = ModelConfig::new(ModelKind::CnnLstm, Variant::Stacked);
        assert_eq!(cfg.input_channels, 14);
        assert!(cfg.dropout_fc1);
        cfg.validate().unwrap();

        let cfg = ModelConfig::new(ModelKind::RnnPoints, Variant::Original);
        assert_eq!(cfg.resample_n, Some(128));
        cfg.validate().unwrap();
    }

    #[test]
    fn config_rejects_channel_mismatch() {
        let cfg = ModelConfig {
            kind: ModelKind::CnnFixed,
            feature_variant: Variant::Stacked,
            input_channels: 7,
            resample_n: None,
            dropout_fc1: false,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_block_round_trips() {
        for cfg in [
            ModelConfig::new(ModelKind::CnnFixed, Variant::Original),
            ModelConfig::new(ModelKind::RnnPoints, Variant::Temporal),
            ModelConfig::new(ModelKind::CnnLstm, Variant::Stacked),
        ] {
            let block = cfg.to_config_block();
            let back = ModelConfig::from_config_block(&block).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn cnn_fixed_outputs_probability() {
        let model: Model<f32> =
            Model::build(ModelConfig::new(ModelKind::CnnFixed, Variant::Original), 1).unwrap();
        let input = Tensor::zeros(&[7, 128, 128]);
        let mut tape = Tape::new();
        let p = model.forward(&mut tape, &input, Mode::Eval).unwrap();
        let v = tape.value(p).item();
        assert!(v > 0.0 && v < 1.0);

        // Repeat call is bit-identical.
        let mut tape2 = Tape::new();
        let p2 = model.forward(&mut tape2, &input, Mode::Eval).unwrap();
        assert_eq!(tape.value(p).item(), tape2.value(p2).item());
    }

    #[test]
    fn cnn_fixed_param_count_closed_form() {
        let model: Model<f64> =
            Model::build(ModelConfig::new(ModelKind::CnnFixed, Variant::Original), 0).unwrap();
        let conv1 = 6 * 7 * 9 + 6;
        let conv2 = 16 * 6 * 9 + 16;
        let conv3 = 120 * 16 * 9 + 120;
        let fc1 = 84 * (120 * 16 * 16) + 84;
        let fc2 = 84 + 1;
        assert_eq!(model.param_count(), conv1 + conv2 + conv3 + fc1 + fc2);
    }

    #[test]
    fn cnn_lstm_param_count_closed_form() {
        let model: Model<f64> =
            Model::build(ModelConfig::new(ModelKind::CnnLstm, Variant::Original), 0).unwrap();
        let convs = (32 * 7 * 9 + 32)
            + (64 * 32 * 9 + 64)
            + (128 * 64 * 9 + 128)
            + (256 * 128 * 9 + 256)
            + (128 * 256 * 9 + 128)
            + (256 * 128 * 9 + 256);
        let lstm = 4 * 256 * (256 + 256) + 4 * 256;
        let fc = (128 * 256 + 128) + (128 + 1);
        assert_eq!(model.param_count(), convs + lstm + fc);
    }

    #[test]
    fn rnn_accepts_any_length_and_runs_n_steps() {
        let model: Model<f32> =
            Model::build(ModelConfig::new(ModelKind::RnnPoints, Variant::Original), 3).unwrap();
        let input = Tensor::zeros(&[128, 4]);
        let mut tape = Tape::new();
        let p = model.forward(&mut tape, &input, Mode::Eval).unwrap();
        assert_eq!(tape.lstm_cell_count(), 128);
        let v = tape.value(p).item();
        assert!(v > 0.0 && v < 1.0);

        // A truncated sequence changes the step count.
        let mut tape2 = Tape::new();
        let short = Tensor::zeros(&[40, 4]);
        model.forward(&mut tape2, &short, Mode::Eval).unwrap();
        assert_eq!(tape2.lstm_cell_count(), 40);
    }

    #[test]
    fn cnn_lstm_minimal_width_runs_one_step() {
        let model: Model<f32> =
            Model::build(ModelConfig::new(ModelKind::CnnLstm, Variant::Original), 5).unwrap();
        let input = Tensor::zeros(&[7, 128, 16]);
        let mut tape = Tape::new();
        let p = model.forward(&mut tape, &input, Mode::Eval).unwrap();
        assert_eq!(tape.lstm_cell_count(), 1);
        let v = tape.value(p).item();
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn cnn_lstm_rejects_bad_width() {
        let model: Model<f32> =
            Model::build(ModelConfig::new(ModelKind::CnnLstm, Variant::Original), 5).unwrap();
        let input = Tensor::zeros(&[7, 128, 24]);
        let mut tape = Tape::new();
        assert!(matches!(
            model.forward(&mut tape, &input, Mode::Eval),
            Err(ModelError::WidthNotMultipleOf16 { width: 24 })
        ));
    }

    #[test]
    fn cnn_lstm_shares_parameters_across_widths() {
        let model: Model<f32> =
            Model::build(ModelConfig::new(ModelKind::CnnLstm, Variant::Original), 5).unwrap();
        for width in [16usize, 32, 64] {
            let input = Tensor::zeros(&[7, 128, width]);
            let mut tape = Tape::new();
            let p = model.forward(&mut tape, &input, Mode::Eval).unwrap();
            let v = tape.value(p).item();
            assert!(v > 0.0 && v < 1.0, "width {width} -> {v}");
        }
    }

    #[test]
    fn cnn_lstm_trace_follows_expected_shapes() {
        let model: Model<f64> =
            Model::build(ModelConfig::new(ModelKind::CnnLstm, Variant::Original), 0).unwrap();
        let w = 64;
        let trace = model.cnn_lstm_shape_trace(w).unwrap();
        let want: Vec<(&str, (usize, usize, usize))> = vec![
            ("conv1", (w, 128, 32)),
            ("avgpool1", (w / 2, 64, 32)),
            ("conv2", (w / 2, 64, 64)),
            ("avgpool2", (w / 4, 32, 64)),
            ("conv3", (w / 4, 32, 128)),
            ("conv4", (w / 4, 16, 256)),
            ("avgpool3", (w / 8, 8, 256)),
            ("conv5", (w / 8, 4, 128)),
            ("conv6", (w / 8, 2, 256)),
            ("avgpool4", (w / 16, 1, 256)),
        ];
        assert_eq!(trace, want);
    }

    #[test]
    fn checkpoint_round_trips_model() {
        let model: Model<f32> =
            Model::build(ModelConfig::new(ModelKind::RnnPoints, Variant::Original), 9).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let back: Model<f32> = Model::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config, model.config);
        for slot in 0..model.params.len() {
            assert_eq!(
                back.params.get(slot).value.data(),
                model.params.get(slot).value.data()
            );
        }
    }
}
