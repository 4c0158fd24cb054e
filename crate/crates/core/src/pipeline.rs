//! Preprocessing, feature sets, leave-one-subject-out splits and fold runs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, FilterBank};
use crate::error::{bail, Error, Result};
use crate::fbcca::{Fbcca, FbccaConfig};
use crate::forest::{fit_forest, Forest, ForestConfig};
use crate::models::{FeatureKind, ModelKind};
use crate::nn::{train_loop_with, Dataset, EpochRecord, History, Model, TrainConfig};
use crate::seed;
use crate::spectral::{NormStats, SpectralPlan, N_BANDS};
use crate::types::{samples_for, Recording, StimulusTable, SubBandStack, STEP_SECONDS, WINDOW_SECONDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// Leave the channels as recorded.
    None,
    /// Subtract the mean over channels at every sample.
    Car,
    /// 2-90 Hz zero-phase band-pass.
    BandPass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub notch: bool,
    pub reference: Reference,
    /// Analysed channel; the first channel when unset.
    pub channel: Option<String>,
    /// Whether the filter bank may run; banked features fail without it.
    pub bank: bool,
    pub window_seconds: f64,
    pub step_seconds: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            notch: true,
            reference: Reference::BandPass,
            channel: None,
            bank: true,
            window_seconds: WINDOW_SECONDS,
            step_seconds: STEP_SECONDS,
        }
    }
}

/// Notch, then re-reference or band-pass, then pick the analysed channel.
pub fn preprocess(rec: &Recording, cfg: &PreprocessConfig) -> Result<Vec<f64>> {
    let idx = match &cfg.channel {
        Some(name) => rec
            .channel_index(name)
            .ok_or_else(|| Error::Config(format!("subject {} has no channel {name:?}", rec.subject_id)))?,
        None => 0,
    };
    if rec.data.is_empty() {
        bail!(Empty, "subject {} has no channels", rec.subject_id);
    }
    let notched = |x: &[f64]| if cfg.notch { dsp::notch_50hz(x, rec.fs) } else { Ok(x.to_vec()) };
    match cfg.reference {
        Reference::Car => {
            if rec.data.len() < 2 {
                bail!(Config, "common average reference needs at least 2 channels, subject {} has 1", rec.subject_id);
            }
            let data = rec.data.iter().map(|c| notched(c)).collect::<Result<Vec<_>>>()?;
            let car = dsp::car(&Recording { data, ..rec.clone() })?;
            Ok(car.data[idx].clone())
        }
        Reference::BandPass => dsp::bandpass_2_90(&notched(&rec.data[idx])?, rec.fs),
        Reference::None => notched(&rec.data[idx]),
    }
}

/// Flattened features of every window of one subject, tagged by trial.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectFeatures {
    pub subject: String,
    pub kind: FeatureKind,
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Index into the recording's trial list.
    pub trials: Vec<usize>,
    /// Window index within its trial.
    pub windows: Vec<usize>,
}

impl SubjectFeatures {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Filters the whole stream first, then slices each trial into windows and
/// builds `kind` features from them.
pub fn build_features(rec: &Recording, kind: FeatureKind, cfg: &PreprocessConfig) -> Result<SubjectFeatures> {
    if kind.uses_bank() && !cfg.bank {
        bail!(Config, "{kind:?} features need the filter bank, which is disabled");
    }
    let stream = preprocess(rec, cfg)?;
    let bands = if kind.uses_bank() { FilterBank::new(N_BANDS, rec.fs)?.apply(&stream)? } else { Vec::new() };
    let plan = SpectralPlan::default();
    let win = samples_for(cfg.window_seconds, rec.fs);
    let mut out = SubjectFeatures {
        subject: rec.subject_id.clone(),
        kind,
        samples: Vec::new(),
        labels: Vec::new(),
        trials: Vec::new(),
        windows: Vec::new(),
    };
    for (ti, trial) in rec.trials.iter().enumerate() {
        let starts = trial_windows(rec, ti, cfg)?;
        for (wi, s) in starts.into_iter().enumerate() {
            let at = trial.start + s;
            let raw = &stream[at..at + win];
            let stack = || SubBandStack {
                bands: bands.iter().map(|b| b[at..at + win].to_vec()).collect(),
                fs: rec.fs,
                label: trial.label,
            };
            let values = match kind {
                FeatureKind::ComplexSpectrumMatrix => plan.complex_spectrum_matrix(&stack())?.values,
                FeatureKind::ComplexSpectrogramTensor => plan.complex_spectrogram_tensor(&stack())?.values,
                FeatureKind::SubBandStack => stack().bands.concat(),
                FeatureKind::Spectrogram => plan.complex_spectrogram_single(raw)?.values,
                FeatureKind::Window => raw.to_vec(),
                FeatureKind::MagnitudeDb => plan.magnitude_db(raw)?.values,
            };
            out.samples.push(values);
            out.labels.push(trial.label);
            out.trials.push(ti);
            out.windows.push(wi);
        }
    }
    Ok(out)
}

/// Window offsets inside trial `ti`.
fn trial_windows(rec: &Recording, ti: usize, cfg: &PreprocessConfig) -> Result<Vec<usize>> {
    let t = rec.trials[ti];
    if t.start + t.length > rec.n_samples() {
        bail!(Shape, "subject {} trial {ti} runs past the recording", rec.subject_id);
    }
    dsp::window_starts(t.length, rec.fs, cfg.window_seconds, cfg.step_seconds)
}

/// Windows of the analysed channel through the FBCCA bank, with their trial.
pub fn fbcca_stacks(rec: &Recording, n_bands: usize, cfg: &PreprocessConfig) -> Result<Vec<(SubBandStack, usize)>> {
    let stream = preprocess(rec, cfg)?;
    let bands = FilterBank::new(n_bands, rec.fs)?.apply(&stream)?;
    let mut out = Vec::new();
    for (ti, trial) in rec.trials.iter().enumerate() {
        let region: Vec<Vec<f64>> = bands.iter().map(|b| b[trial.start..trial.start + trial.length].to_vec()).collect();
        for stack in dsp::slice_bands(&region, rec.fs, cfg.window_seconds, cfg.step_seconds, trial.label)? {
            out.push((stack, ti));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Whole trials go to one side, so overlapping windows never straddle.
    Trial,
    Window,
}

/// One trial, or one window of one trial, of a training subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Unit {
    pub subject: usize,
    pub trial: usize,
    pub window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_subject: String,
    pub test_index: usize,
    pub train: Vec<Unit>,
    pub val: Vec<Unit>,
    pub val_fraction: f64,
    pub granularity: Granularity,
    pub seed: u64,
}

pub const VAL_FRACTION: f64 = 0.25;

/// Holds out `test_subject` and shuffles every other subject's units into a
/// 75/25 train/validation split.
pub fn loso_split(
    recordings: &[Recording],
    test_subject: &str,
    val_fraction: f64,
    granularity: Granularity,
    cfg: &PreprocessConfig,
    seed_: u64,
) -> Result<SplitPlan> {
    if recordings.len() < 2 {
        bail!(Precondition, "leave-one-subject-out needs at least 2 subjects, got {}", recordings.len());
    }
    if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
        bail!(Parameter, "validation fraction must be in (0, 1), got {val_fraction}");
    }
    let test_index = recordings
        .iter()
        .position(|r| r.subject_id == test_subject)
        .ok_or_else(|| Error::UnknownSubject(String::from(test_subject)))?;
    let mut units = Vec::new();
    for (si, rec) in recordings.iter().enumerate() {
        if si == test_index {
            continue;
        }
        for ti in 0..rec.trials.len() {
            match granularity {
                Granularity::Trial => units.push(Unit { subject: si, trial: ti, window: None }),
                Granularity::Window => {
                    let n = trial_windows(rec, ti, cfg)?.len();
                    units.extend((0..n).map(|w| Unit { subject: si, trial: ti, window: Some(w) }));
                }
            }
        }
    }
    let n_val = libm::round(val_fraction * units.len() as f64) as usize;
    if n_val == 0 || n_val == units.len() {
        bail!(Precondition, "{} units cannot be split {val_fraction} for validation", units.len());
    }
    let mut rng = seed::rng(seed::derive(seed_, &format!("split/{test_subject}")));
    units.shuffle(&mut rng);
    let mut val = units.split_off(units.len() - n_val);
    units.sort_unstable();
    val.sort_unstable();
    Ok(SplitPlan {
        test_subject: String::from(test_subject),
        test_index,
        train: units,
        val,
        val_fraction,
        granularity,
        seed: seed_,
    })
}

impl SplitPlan {
    /// Builds the train and validation datasets from per-subject features.
    pub fn datasets(&self, features: &[SubjectFeatures], shape: &[usize]) -> Result<(Dataset, Dataset)> {
        let mut train = Dataset::new(shape);
        let mut val = Dataset::new(shape);
        for (si, f) in features.iter().enumerate() {
            if si == self.test_index {
                continue;
            }
            for i in 0..f.len() {
                let unit = Unit {
                    subject: si,
                    trial: f.trials[i],
                    window: (self.granularity == Granularity::Window).then_some(f.windows[i]),
                };
                let target = if self.val.binary_search(&unit).is_ok() {
                    &mut val
                } else if self.train.binary_search(&unit).is_ok() {
                    &mut train
                } else {
                    bail!(Precondition, "window {unit:?} is in neither split");
                };
                target.push(&f.samples[i], f.labels[i])?;
            }
        }
        Ok((train, val))
    }
}

/// A classifier with whatever it needs to score new feature sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trained {
    Net { model_kind: ModelKind, model: Model, norm: NormStats },
    Forest { forest: Forest, norm: NormStats },
}

impl Trained {
    pub fn feature(&self) -> FeatureKind {
        match self {
            Trained::Net { model_kind, .. } => model_kind.feature(),
            Trained::Forest { .. } => FeatureKind::MagnitudeDb,
        }
    }

    pub fn predict(&self, features: &SubjectFeatures) -> Result<Vec<usize>> {
        if features.kind != self.feature() {
            bail!(Config, "classifier expects {:?} features, got {:?}", self.feature(), features.kind);
        }
        match self {
            Trained::Net { model, norm, .. } => {
                let mut data = Dataset::new(&model.input_shape);
                for (s, &l) in features.samples.iter().zip(&features.labels) {
                    data.push(&crate::spectral::normalize(s, *norm)?, l)?;
                }
                model.predict(&data.all(), 256)
            }
            Trained::Forest { forest, norm } => {
                features.samples.iter().map(|s| forest.predict(&crate::spectral::normalize(s, *norm)?)).collect()
            }
        }
    }
}

/// Fits normalisation on the training set and applies it to both sets.
pub fn normalize_split(train: &mut Dataset, val: &mut Dataset) -> Result<NormStats> {
    let stats = NormStats::fit(&train.data)?;
    stats.apply_in_place(&mut train.data)?;
    stats.apply_in_place(&mut val.data)?;
    Ok(stats)
}

/// Trains one network on a fold.
pub fn train_net_fold(
    kind: ModelKind,
    n_classes: usize,
    features: &[SubjectFeatures],
    plan: &SplitPlan,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Trained, History)> {
    check_kinds(features, kind.feature())?;
    let mut model = kind.build(n_classes, seed::derive(cfg.seed, "init"))?;
    let (mut train, mut val) = plan.datasets(features, &model.input_shape)?;
    let norm = normalize_split(&mut train, &mut val)?;
    let history = train_loop_with(&mut model, &train, &val, cfg, on_epoch)?;
    Ok((Trained::Net { model_kind: kind, model, norm }, history))
}

/// Fits the forest on every non-test window; it has no use for validation data.
pub fn train_forest_fold(
    n_classes: usize,
    features: &[SubjectFeatures],
    plan: &SplitPlan,
    cfg: &ForestConfig,
) -> Result<Trained> {
    check_kinds(features, FeatureKind::MagnitudeDb)?;
    let (mut train, mut val) = plan.datasets(features, &FeatureKind::MagnitudeDb.shape())?;
    let norm = normalize_split(&mut train, &mut val)?;
    let width = train.sample_len();
    let mut xs: Vec<Vec<f64>> = train.data.chunks(width).map(<[f64]>::to_vec).collect();
    xs.extend(val.data.chunks(width).map(<[f64]>::to_vec));
    let mut ys = train.labels.clone();
    ys.extend_from_slice(&val.labels);
    let forest = fit_forest(&xs, &ys, n_classes, cfg)?;
    Ok(Trained::Forest { forest, norm })
}

fn check_kinds(features: &[SubjectFeatures], kind: FeatureKind) -> Result<()> {
    if let Some(f) = features.iter().find(|f| f.kind != kind) {
        bail!(Config, "expected {kind:?} features, subject {} has {:?}", f.subject, f.kind);
    }
    Ok(())
}

/// FBCCA predictions and labels for every window of `rec`.
pub fn fbcca_predict(
    rec: &Recording,
    table: &StimulusTable,
    fb: FbccaConfig,
    cfg: &PreprocessConfig,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let win = samples_for(cfg.window_seconds, rec.fs);
    let clf = Fbcca::new(table, fb, rec.fs, win)?;
    let stacks = fbcca_stacks(rec, fb.n_bands, cfg)?;
    let mut preds = Vec::with_capacity(stacks.len());
    let mut labels = Vec::with_capacity(stacks.len());
    for (stack, _) in &stacks {
        preds.push(clf.classify_stack(stack)?);
        labels.push(stack.label);
    }
    Ok((preds, labels))
}

/// Number of samples per class.
pub fn class_counts(labels: &[usize], n_classes: usize) -> Vec<usize> {
    let mut c = vec![0; n_classes];
    for &l in labels {
        if l < n_classes {
            c[l] += 1;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};
    use core::f64::consts::PI;

    fn table() -> StimulusTable {
        StimulusTable::new(&[(12.0, 0.0), (15.0, PI / 2.0)]).unwrap()
    }

    fn dataset(n: usize, trials_per_class: usize, seconds: f64, noisy: bool) -> Vec<Recording> {
        let base = if noisy { SynthConfig::new(table(), 4) } else { SynthConfig::clean(table(), 4) };
        let cfg = SynthConfig { trial_seconds: seconds, ..base };
        generate_dataset(n, trials_per_class, &cfg).unwrap()
    }

    #[test]
    fn feature_shapes_and_window_counts() {
        let recs = dataset(1, 1, 5.0, true);
        let cfg = PreprocessConfig::default();
        let f = build_features(&recs[0], FeatureKind::ComplexSpectrumMatrix, &cfg).unwrap();
        assert_eq!(f.len(), 2 * 46);
        assert!(f.samples.iter().all(|s| s.len() == 20 * 45));
        assert_eq!(f.trials.iter().filter(|&&t| t == 0).count(), 46);
        let w = build_features(&recs[0], FeatureKind::Window, &cfg).unwrap();
        assert!(w.samples.iter().all(|s| s.len() == 125));
        // The raw window is the preprocessed stream itself.
        let stream = preprocess(&recs[0], &cfg).unwrap();
        let t = recs[0].trials[1];
        assert_eq!(w.samples[46 + 3], stream[t.start + 75..t.start + 200]);
        for kind in [
            FeatureKind::ComplexSpectrogramTensor,
            FeatureKind::SubBandStack,
            FeatureKind::Spectrogram,
            FeatureKind::MagnitudeDb,
        ] {
            let f = build_features(&recs[0], kind, &cfg).unwrap();
            assert_eq!(f.len(), 92);
            assert!(f.samples.iter().all(|s| s.len() == kind.len()), "{kind:?}");
        }
        let short = dataset(1, 1, 2.0, true);
        assert_eq!(build_features(&short[0], FeatureKind::Window, &cfg).unwrap().len(), 2 * 16);
    }

    #[test]
    fn features_are_deterministic() {
        let recs = dataset(1, 1, 2.0, true);
        let cfg = PreprocessConfig::default();
        let a = build_features(&recs[0], FeatureKind::ComplexSpectrogramTensor, &cfg).unwrap();
        let b = build_features(&recs[0], FeatureKind::ComplexSpectrogramTensor, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_mismatches_are_errors() {
        let recs = dataset(1, 1, 2.0, true);
        let no_bank = PreprocessConfig { bank: false, ..PreprocessConfig::default() };
        assert!(matches!(build_features(&recs[0], FeatureKind::SubBandStack, &no_bank), Err(Error::Config(_))));
        assert!(build_features(&recs[0], FeatureKind::Window, &no_bank).is_ok());
        let car = PreprocessConfig { reference: Reference::Car, ..PreprocessConfig::default() };
        assert!(matches!(preprocess(&recs[0], &car), Err(Error::Config(_))));
        let missing = PreprocessConfig { channel: Some(String::from("Pz")), ..PreprocessConfig::default() };
        assert!(matches!(preprocess(&recs[0], &missing), Err(Error::Config(_))));
    }

    #[test]
    fn car_uses_every_channel() {
        let cfg = SynthConfig { n_channels: 3, trial_seconds: 1.0, ..SynthConfig::new(table(), 2) };
        let rec = &generate_dataset(1, 1, &cfg).unwrap()[0];
        let pre = PreprocessConfig { notch: false, reference: Reference::Car, ..PreprocessConfig::default() };
        let out = preprocess(rec, &pre).unwrap();
        for t in [0, 100, 400] {
            let mean = rec.data.iter().map(|c| c[t]).sum::<f64>() / 3.0;
            assert!((out[t] - (rec.data[0][t] - mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn one_plan_per_subject() {
        let recs = dataset(35, 2, 1.0, true);
        let cfg = PreprocessConfig::default();
        let mut plans = Vec::new();
        for r in &recs {
            let plan = loso_split(&recs, &r.subject_id, VAL_FRACTION, Granularity::Trial, &cfg, 1).unwrap();
            assert!(plan.train.iter().chain(&plan.val).all(|u| u.subject != plan.test_index));
            assert!(plan.train.iter().all(|u| plan.val.binary_search(u).is_err()));
            let total = plan.train.len() + plan.val.len();
            assert_eq!(total, 34 * 4);
            // One trial is the smallest unit, so the fraction is exact to within one.
            assert!((plan.val.len() as f64 - 0.25 * total as f64).abs() <= 1.0);
            plans.push(plan);
        }
        for i in 0..plans.len() {
            for j in i + 1..plans.len() {
                assert_ne!(plans[i], plans[j]);
            }
        }
        let again = loso_split(&recs, "S07", VAL_FRACTION, Granularity::Trial, &cfg, 1).unwrap();
        assert_eq!(again, plans[6]);
        assert!(matches!(
            loso_split(&recs, "S99", VAL_FRACTION, Granularity::Trial, &cfg, 1),
            Err(Error::UnknownSubject(_))
        ));
        assert!(loso_split(&recs[..1], "S01", VAL_FRACTION, Granularity::Trial, &cfg, 1).is_err());
    }

    #[test]
    fn datasets_never_contain_the_test_subject() {
        let recs = dataset(4, 2, 1.0, true);
        let cfg = PreprocessConfig::default();
        let feats: Vec<SubjectFeatures> =
            recs.iter().map(|r| build_features(r, FeatureKind::MagnitudeDb, &cfg).unwrap()).collect();
        for g in [Granularity::Trial, Granularity::Window] {
            let plan = loso_split(&recs, "S02", VAL_FRACTION, g, &cfg, 3).unwrap();
            let (train, val) = plan.datasets(&feats, &[45]).unwrap();
            let others: usize = feats.iter().enumerate().filter(|(i, _)| *i != 1).map(|(_, f)| f.len()).sum();
            assert_eq!(train.len() + val.len(), others);
            // Audit: every training row is a window of some non-test subject.
            let test_rows: Vec<&Vec<f64>> = feats[1].samples.iter().collect();
            for set in [&train, &val] {
                for i in 0..set.len() {
                    assert!(!test_rows.iter().any(|r| r.as_slice() == set.sample(i)));
                }
            }
            if g == Granularity::Trial {
                // No trial straddles the split.
                assert_eq!(val.len() % 6, 0);
            }
        }
    }

    #[test]
    fn normalisation_uses_training_moments() {
        let recs = dataset(3, 2, 1.0, true);
        let cfg = PreprocessConfig::default();
        let feats: Vec<SubjectFeatures> =
            recs.iter().map(|r| build_features(r, FeatureKind::Spectrogram, &cfg).unwrap()).collect();
        let plan = loso_split(&recs, "S03", VAL_FRACTION, Granularity::Trial, &cfg, 0).unwrap();
        let (mut train, mut val) = plan.datasets(&feats, &FeatureKind::Spectrogram.shape()).unwrap();
        let raw_val = val.data.clone();
        let stats = normalize_split(&mut train, &mut val).unwrap();
        let n = train.data.len() as f64;
        let mean = train.data.iter().sum::<f64>() / n;
        let std = libm::sqrt(train.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n);
        assert!(mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-9);
        assert!((val.data[5] - (raw_val[5] - stats.mean) / stats.std).abs() < 1e-12);
    }

    #[test]
    fn fbcca_is_perfect_on_clean_data() {
        let recs = dataset(2, 2, 2.0, false);
        let cfg = PreprocessConfig::default();
        for r in &recs {
            let (preds, labels) = fbcca_predict(r, &table(), FbccaConfig::default(), &cfg).unwrap();
            assert_eq!(preds.len(), 64);
            assert_eq!(preds, labels);
        }
    }

    #[test]
    fn folds_train_and_predict() {
        let recs = dataset(3, 2, 1.0, true);
        let cfg = PreprocessConfig::default();
        let plan = loso_split(&recs, "S01", VAL_FRACTION, Granularity::Trial, &cfg, 0).unwrap();
        let mags: Vec<SubjectFeatures> =
            recs.iter().map(|r| build_features(r, FeatureKind::MagnitudeDb, &cfg).unwrap()).collect();
        let forest =
            train_forest_fold(2, &mags, &plan, &ForestConfig { n_trees: 5, ..ForestConfig::for_classes(2, 0) })
                .unwrap();
        assert_eq!(forest.predict(&mags[0]).unwrap().len(), mags[0].len());

        let train_cfg = TrainConfig { max_epochs: 3, ..ModelKind::Svm.train_config(2, 7) };
        let mut seen = 0;
        let (svm, history) = train_net_fold(ModelKind::Svm, 2, &mags, &plan, &train_cfg, |_| seen += 1).unwrap();
        assert_eq!(history.epochs.len(), seen);
        assert_eq!(svm.predict(&mags[0]).unwrap().len(), mags[0].len());
        let windows = build_features(&recs[0], FeatureKind::Window, &cfg).unwrap();
        assert!(matches!(svm.predict(&windows), Err(Error::Config(_))));
        assert!(train_net_fold(ModelKind::Arnn, 2, &mags, &plan, &train_cfg, |_| {}).is_err());
    }
}
