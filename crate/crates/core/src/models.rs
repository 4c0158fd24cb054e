//! The five network architectures and the linear SVM.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::nn::{LayerSpec, LossKind, Model, OptimizerKind, OverfitRule, TrainConfig, LEAKY_SLOPE};
use crate::spectral::{ComplexSpectrogramTensor, ComplexSpectrumMatrix, Spectrogram, N_BANDS, N_BINS};
use crate::types::WINDOW_LEN;

pub const CNN_DROPOUT: f64 = 0.25;
pub const RNN_DROPOUT: f64 = 0.4;
pub const RNN_KERNEL: usize = 32;

/// Flattened width ahead of each head at the full channel counts.
pub const FLATTEN_FBCNN2D: usize = 256;
pub const FLATTEN_FBCNN3D: usize = 224;
pub const FLATTEN_ACNN: usize = 224;
pub const FLATTEN_RNN: usize = 40;

/// Input representation consumed by a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// 20 x 45 Re/Im rows per sub-band.
    ComplexSpectrumMatrix,
    /// 10 x 45 x 6 sub-band spectrograms.
    ComplexSpectrogramTensor,
    /// 10 x 125 filtered windows.
    SubBandStack,
    /// 45 x 6 spectrogram of the unfiltered window.
    Spectrogram,
    /// 125 raw samples.
    Window,
    /// 45 decibel magnitudes.
    MagnitudeDb,
}

impl FeatureKind {
    /// Sample shape, channel axis included where a network expects one.
    pub fn shape(self) -> Vec<usize> {
        match self {
            FeatureKind::ComplexSpectrumMatrix => {
                let [r, c] = ComplexSpectrumMatrix::SHAPE;
                vec![1, r, c]
            }
            FeatureKind::ComplexSpectrogramTensor => {
                let [b, f, t] = ComplexSpectrogramTensor::SHAPE;
                vec![1, b, f, t]
            }
            FeatureKind::SubBandStack => vec![N_BANDS, WINDOW_LEN],
            FeatureKind::Spectrogram => {
                let [f, t] = Spectrogram::SHAPE;
                vec![1, f, t]
            }
            FeatureKind::Window => vec![1, WINDOW_LEN],
            FeatureKind::MagnitudeDb => vec![N_BINS],
        }
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(self) -> usize {
        self.shape().iter().product()
    }

    pub fn uses_bank(self) -> bool {
        matches!(
            self,
            FeatureKind::ComplexSpectrumMatrix | FeatureKind::ComplexSpectrogramTensor | FeatureKind::SubBandStack
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Fbcnn2d,
    Fbcnn3d,
    Fbrnn,
    Acnn,
    Arnn,
    Svm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] =
        [ModelKind::Fbrnn, ModelKind::Fbcnn3d, ModelKind::Fbcnn2d, ModelKind::Acnn, ModelKind::Arnn, ModelKind::Svm];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fbcnn2d => "FBCNN-2D",
            ModelKind::Fbcnn3d => "FBCNN-3D",
            ModelKind::Fbrnn => "FBRNN",
            ModelKind::Acnn => "A-CNN",
            ModelKind::Arnn => "A-RNN",
            ModelKind::Svm => "SVM",
        }
    }

    pub fn feature(self) -> FeatureKind {
        match self {
            ModelKind::Fbcnn2d => FeatureKind::ComplexSpectrumMatrix,
            ModelKind::Fbcnn3d => FeatureKind::ComplexSpectrogramTensor,
            ModelKind::Fbrnn => FeatureKind::SubBandStack,
            ModelKind::Acnn => FeatureKind::Spectrogram,
            ModelKind::Arnn => FeatureKind::Window,
            ModelKind::Svm => FeatureKind::MagnitudeDb,
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, ModelKind::Fbrnn | ModelKind::Arnn)
    }

    pub fn build(self, n_classes: usize, seed: u64) -> Result<Model> {
        self.build_with(n_classes, &full_widths(self), seed)
    }

    /// Builds with custom channel and hidden widths; the full layout is
    /// kept otherwise.
    pub fn build_with(self, n_classes: usize, widths: &Widths, seed: u64) -> Result<Model> {
        if n_classes < 2 {
            bail!(Parameter, "a classifier needs at least 2 classes, got {n_classes}");
        }
        if widths.conv.contains(&0) || widths.lstm.contains(&0) {
            bail!(Parameter, "layer widths must be positive: {widths:?}");
        }
        let [c1, c2] = widths.conv;
        let (body, expected_flat, loss) = match self {
            ModelKind::Fbcnn2d => (
                cnn_body(2, c1, c2, &[20, 6], &[1, 1], &[3, 2], &[1, 8], &[0, 1], &[1, 2], false),
                FLATTEN_FBCNN2D,
                LossKind::CrossEntropy,
            ),
            ModelKind::Fbcnn3d => (
                cnn_body(3, c1, c2, &[4, 6, 6], &[1, 1, 1], &[2, 2, 3], &[4, 10, 1], &[1, 1, 0], &[3, 2, 1], true),
                FLATTEN_FBCNN3D,
                LossKind::CrossEntropy,
            ),
            ModelKind::Acnn => (
                cnn_body(2, c1, c2, &[6, 6], &[1, 1], &[2, 3], &[10, 1], &[1, 0], &[2, 1], false),
                FLATTEN_ACNN,
                LossKind::CrossEntropy,
            ),
            ModelKind::Fbrnn => (rnn_body(N_BANDS, c1, c2, &widths.lstm), FLATTEN_RNN, LossKind::CrossEntropy),
            ModelKind::Arnn => (rnn_body(1, c1, c2, &widths.lstm), FLATTEN_RNN, LossKind::CrossEntropy),
            ModelKind::Svm => {
                let (out, loss) = if n_classes == 2 { (1, LossKind::Hinge) } else { (n_classes, LossKind::MultiHinge) };
                let layers = vec![LayerSpec::Linear { input: N_BINS, output: out }];
                return Model::new(layers, &self.feature().shape(), loss, seed);
            }
        };
        let input = self.feature().shape();
        let flat = flattened(&body, &input)?;
        if *widths == full_widths(self) && flat != expected_flat {
            bail!(Shape, "{} flattens to {flat}, expected {expected_flat}", self.name());
        }
        let mut layers = body;
        layers.push(LayerSpec::Linear { input: flat, output: n_classes });
        Model::new(layers, &input, loss, seed)
    }

    /// Training hyperparameters; two classes selects the small-dataset
    /// settings and more classes the large-dataset ones.
    pub fn train_config(self, n_classes: usize, seed: u64) -> TrainConfig {
        let small = n_classes <= 2;
        let (optimizer, patience, max_epochs) = match self {
            ModelKind::Fbcnn2d | ModelKind::Fbcnn3d | ModelKind::Acnn => {
                (OptimizerKind::SGD, if small { 50 } else { 250 }, if small { 1000 } else { 2000 })
            }
            ModelKind::Fbrnn | ModelKind::Arnn => (OptimizerKind::ADAM, 300, 10_000),
            ModelKind::Svm => (OptimizerKind::SGD, 200, 3000),
        };
        TrainConfig {
            optimizer,
            lr: 0.001,
            batch_size: if small { 16 } else { 64 },
            max_epochs,
            patience,
            overfit: OverfitRule::default(),
            seed,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).map(|c| c.to_ascii_lowercase()).collect();
        Ok(match key.as_str() {
            "fbcnn2d" => ModelKind::Fbcnn2d,
            "fbcnn3d" => ModelKind::Fbcnn3d,
            "fbrnn" => ModelKind::Fbrnn,
            "acnn" => ModelKind::Acnn,
            "arnn" => ModelKind::Arnn,
            "svm" => ModelKind::Svm,
            _ => return Err(Error::Config(format!("unknown model kind {s:?}"))),
        })
    }
}

/// Channel counts of the two convolutions and the five LSTM widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub conv: [usize; 2],
    pub lstm: [usize; 5],
}

impl Widths {
    pub const FULL: Widths = Widths { conv: [16, 32], lstm: [100, 50, 20, 10, 5] };
    pub const FULL_RNN: Widths = Widths { conv: [8, 10], lstm: [100, 50, 20, 10, 5] };
    /// Small enough for exhaustive finite-difference checks.
    pub const TINY: Widths = Widths { conv: [2, 3], lstm: [4, 3, 2, 2, 2] };
}

#[allow(clippy::too_many_arguments)]
fn cnn_body(
    rank: usize,
    c1: usize,
    c2: usize,
    k1: &[usize],
    p1: &[usize],
    pool1: &[usize],
    k2: &[usize],
    p2: &[usize],
    pool2: &[usize],
    leaky: bool,
) -> Vec<LayerSpec> {
    let ones = vec![1; rank];
    let act = || if leaky { LayerSpec::LeakyRelu { slope: LEAKY_SLOPE } } else { LayerSpec::Relu };
    vec![
        LayerSpec::conv(1, c1, k1, &ones, p1),
        LayerSpec::batchnorm(c1),
        act(),
        LayerSpec::maxpool(pool1),
        LayerSpec::Dropout { p: CNN_DROPOUT },
        LayerSpec::conv(c1, c2, k2, &ones, p2),
        LayerSpec::batchnorm(c2),
        act(),
        LayerSpec::maxpool(pool2),
        LayerSpec::Dropout { p: CNN_DROPOUT },
        LayerSpec::Flatten,
    ]
}

fn rnn_body(in_ch: usize, c1: usize, c2: usize, lstm: &[usize; 5]) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for (i, o) in [(in_ch, c1), (c1, c2)] {
        layers.extend([
            LayerSpec::conv(i, o, &[RNN_KERNEL], &[1], &[0]),
            LayerSpec::batchnorm(o),
            LayerSpec::Relu,
            LayerSpec::maxpool(&[2]),
            LayerSpec::Dropout { p: RNN_DROPOUT },
        ]);
    }
    layers.push(LayerSpec::ToSequence);
    let mut input = c2;
    for &hidden in lstm {
        layers.push(LayerSpec::Lstm { input, hidden });
        layers.push(LayerSpec::Dropout { p: RNN_DROPOUT });
        input = hidden;
    }
    layers.push(LayerSpec::Flatten);
    layers
}

fn flattened(layers: &[LayerSpec], input: &[usize]) -> Result<usize> {
    let mut shape = input.to_vec();
    for l in layers {
        shape = l.output_shape(&shape)?;
    }
    Ok(shape.iter().product())
}

/// Full-size widths for `kind`: the recurrent nets use 8 and 10 conv channels.
pub fn full_widths(kind: ModelKind) -> Widths {
    if kind.is_recurrent() {
        Widths::FULL_RNN
    } else {
        Widths::FULL
    }
}

pub fn build_fbcnn2d(n_classes: usize, seed: u64) -> Result<Model> {
    ModelKind::Fbcnn2d.build(n_classes, seed)
}

pub fn build_fbcnn3d(n_classes: usize, seed: u64) -> Result<Model> {
    ModelKind::Fbcnn3d.build(n_classes, seed)
}

pub fn build_fbrnn(n_classes: usize, seed: u64) -> Result<Model> {
    ModelKind::Fbrnn.build(n_classes, seed)
}

pub fn build_acnn(n_classes: usize, seed: u64) -> Result<Model> {
    ModelKind::Acnn.build(n_classes, seed)
}

pub fn build_arnn(n_classes: usize, seed: u64) -> Result<Model> {
    ModelKind::Arnn.build(n_classes, seed)
}

pub fn build_svm(n_classes: usize, seed: u64) -> Result<Model> {
    ModelKind::Svm.build(n_classes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{check_model, Mode, ModelCheck, Tensor};
    use crate::seed;
    use rand::Rng;

    #[test]
    fn parameter_counts_match_the_reference_counts() {
        let expected = [
            (ModelKind::Fbrnn, 87_836),
            (ModelKind::Fbcnn3d, 23_378),
            (ModelKind::Fbcnn2d, 6_674),
            (ModelKind::Acnn, 6_290),
            (ModelKind::Arnn, 85_532),
            (ModelKind::Svm, 46),
        ];
        for (kind, count) in expected {
            let m = kind.build(2, 0).unwrap();
            assert_eq!(m.param_count(), count, "{kind}");
            assert_eq!(m.params.iter().map(Tensor::numel).sum::<usize>(), count, "{kind} storage");
        }
    }

    #[test]
    fn twelve_class_counts_swap_only_the_head() {
        assert_eq!(build_fbcnn3d(12, 0).unwrap().param_count(), 23_378 - 450 + 224 * 12 + 12);
        assert_eq!(build_svm(12, 0).unwrap().param_count(), 45 * 12 + 12);
        assert_eq!(build_svm(12, 0).unwrap().loss, LossKind::MultiHinge);
        assert_eq!(build_svm(2, 0).unwrap().loss, LossKind::Hinge);
    }

    #[test]
    fn shape_traces() {
        let t = build_fbcnn3d(2, 0).unwrap().shape_trace().unwrap();
        assert_eq!(t[0], [16, 9, 42, 3]);
        assert_eq!(t[3], [16, 4, 21, 1]);
        assert_eq!(t[10], [FLATTEN_FBCNN3D]);

        let t = build_fbcnn2d(2, 0).unwrap().shape_trace().unwrap();
        assert_eq!(t[0], [16, 3, 42]);
        // Input to the second convolution.
        assert_eq!(t[4], [16, 1, 21]);
        assert_eq!(t[10], [FLATTEN_FBCNN2D]);

        let t = build_acnn(2, 0).unwrap().shape_trace().unwrap();
        let spatial: Vec<Vec<usize>> = [0, 3, 5, 8].iter().map(|&i| t[i][1..].to_vec()).collect();
        assert_eq!(spatial, [vec![42, 3], vec![21, 1], vec![14, 1], vec![7, 1]]);

        for m in [build_fbrnn(2, 0).unwrap(), build_arnn(2, 0).unwrap()] {
            let t = m.shape_trace().unwrap();
            let lens: Vec<usize> = [0, 3, 5, 8].iter().map(|&i| t[i][1]).collect();
            assert_eq!(lens, [94, 47, 16, 8]);
            assert_eq!(t[10], [8, 10]);
            assert_eq!(t[t.len() - 2], [FLATTEN_RNN]);
        }
    }

    #[test]
    fn zero_input_gives_finite_scores() {
        for kind in ModelKind::ALL {
            let m = kind.build(2, 1).unwrap();
            let mut shape = vec![2];
            shape.extend(kind.feature().shape());
            let scores = m.predict_scores(&Tensor::zeros(&shape), 2).unwrap();
            assert_eq!(scores.len(), 2);
            assert!(scores.iter().flatten().all(|v| v.is_finite()), "{kind}");
        }
    }

    #[test]
    fn each_model_rejects_every_other_feature_shape() {
        let features = [
            FeatureKind::ComplexSpectrumMatrix,
            FeatureKind::ComplexSpectrogramTensor,
            FeatureKind::SubBandStack,
            FeatureKind::Spectrogram,
            FeatureKind::Window,
            FeatureKind::MagnitudeDb,
        ];
        for kind in ModelKind::ALL {
            let m = kind.build(2, 0).unwrap();
            for f in features {
                let mut shape = vec![1];
                shape.extend(f.shape());
                let ok = m.predict_scores(&Tensor::zeros(&shape), 1).is_ok();
                assert_eq!(ok, f == kind.feature(), "{kind} on {f:?}");
            }
        }
    }

    #[test]
    fn hyperparameters_follow_the_model_family() {
        let c = ModelKind::Fbcnn3d.train_config(2, 0);
        assert_eq!((c.optimizer, c.batch_size, c.patience, c.max_epochs), (OptimizerKind::SGD, 16, 50, 1000));
        let c = ModelKind::Acnn.train_config(12, 0);
        assert_eq!((c.batch_size, c.patience, c.max_epochs), (64, 250, 2000));
        let c = ModelKind::Arnn.train_config(2, 0);
        assert_eq!((c.optimizer, c.patience, c.max_epochs), (OptimizerKind::ADAM, 300, 10_000));
        let c = ModelKind::Svm.train_config(2, 0);
        assert_eq!((c.optimizer, c.patience, c.max_epochs), (OptimizerKind::SGD, 200, 3000));
        for kind in ModelKind::ALL {
            assert_eq!(kind.train_config(2, 0).lr, 0.001);
        }
    }

    #[test]
    fn names_round_trip() {
        for kind in ModelKind::ALL {
            assert_eq!(kind.name().parse::<ModelKind>().unwrap(), kind);
        }
        assert!("resnet".parse::<ModelKind>().is_err());
        assert!(ModelKind::Svm.build(1, 0).is_err());
    }

    fn random_input(kind: ModelKind, batch: usize, s: u64) -> Tensor {
        let mut shape = vec![batch];
        shape.extend(kind.feature().shape());
        let mut rng = seed::rng(s);
        let n = shape.iter().product();
        Tensor { shape, data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    #[test]
    fn full_models_pass_gradient_checks() {
        for kind in ModelKind::ALL {
            let widths = if kind == ModelKind::Svm { full_widths(kind) } else { Widths::TINY };
            let m = kind.build_with(2, &widths, 3).unwrap();
            let x = random_input(kind, 2, 11);
            // Every parameter, and a spread of about 800 input elements.
            let stride = (x.numel() / 800).max(1);
            for mode in [Mode::Train, Mode::Eval] {
                let opts = ModelCheck { input_stride: stride, ..model_check(mode) };
                let r = check_model(&m, &x, &[0, 1], &opts).unwrap();
                assert!(r.max_rel_err < 1e-4, "{kind} {mode:?}: {r:?}");
            }
        }
    }

    // Small enough to stay clear of most ReLU and pooling kinks; rounding in
    // the central difference is then near 1e-12, hence the absolute floor.
    fn model_check(mode: Mode) -> ModelCheck {
        ModelCheck { mode, eps: 1e-4, floor: 1e-7, seed: 5, input_stride: 1 }
    }
}
