//! Leave-one-subject-out runs over a loaded dataset.

use std::fmt;
use std::str::FromStr;

use fbssvep_core::eval::{score_subject, MethodReport, SubjectResult};
use fbssvep_core::fbcca::FbccaConfig;
use fbssvep_core::forest::ForestConfig;
use fbssvep_core::models::{FeatureKind, ModelKind};
use fbssvep_core::nn::{EpochRecord, History, TrainConfig};
use fbssvep_core::pipeline::{
    build_features, fbcca_predict, loso_split, train_forest_fold, train_net_fold, Granularity, PreprocessConfig,
    SubjectFeatures, Trained, VAL_FRACTION,
};
use fbssvep_core::seed;
use fbssvep_core::types::{Recording, StimulusTable};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{subject, Error, Result};

pub const THREADS_ENV: &str = "FBSSVEP_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Fbcca,
    Forest,
    Net(ModelKind),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fbcca => "FBCCA",
            Method::Forest => "RF",
            Method::Net(k) => k.name(),
        }
    }

    /// Features the method trains on; FBCCA works on raw sub-bands.
    pub fn feature(self) -> Option<FeatureKind> {
        match self {
            Method::Fbcca => None,
            Method::Forest => Some(FeatureKind::MagnitudeDb),
            Method::Net(k) => Some(k.feature()),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = fbssvep_core::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fbcca" => Ok(Method::Fbcca),
            "rf" | "forest" => Ok(Method::Forest),
            _ => s.parse().map(Method::Net),
        }
    }
}

/// Command-line replacements for a network's training settings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOverrides {
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
}

impl TrainOverrides {
    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        cfg.max_epochs = self.max_epochs.unwrap_or(cfg.max_epochs);
        cfg.patience = self.patience.unwrap_or(cfg.patience);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.lr = self.lr.unwrap_or(cfg.lr);
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub preprocess: PreprocessConfig,
    pub granularity: Granularity,
    pub val_fraction: f64,
    pub seed: u64,
    pub overrides: TrainOverrides,
    pub fbcca: FbccaConfig,
}

impl RunConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        RunConfig {
            method,
            preprocess: PreprocessConfig::default(),
            granularity: Granularity::Trial,
            val_fraction: VAL_FRACTION,
            seed,
            overrides: TrainOverrides::default(),
            fbcca: FbccaConfig::default(),
        }
    }
}

/// Seed of the fold that holds out `subject`.
pub fn fold_seed(base: u64, subject: &str) -> u64 {
    seed::derive(base, subject)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub result: SubjectResult,
    pub preds: Vec<usize>,
    pub labels: Vec<usize>,
    /// Absent for FBCCA, which has nothing to store.
    pub checkpoint: Option<Checkpoint>,
    /// Networks only.
    pub history: Option<History>,
}

/// Folds run in parallel at most this wide: `FBSSVEP_THREADS` when set to a
/// positive integer, else the available cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

pub fn with_fold_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(thread_count()).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Features of every recording, in recording order.
pub fn feature_sets(
    recordings: &[Recording],
    kind: FeatureKind,
    cfg: &PreprocessConfig,
) -> Result<Vec<SubjectFeatures>> {
    recordings.par_iter().map(|r| build_features(r, kind, cfg).map_err(subject(&r.subject_id))).collect()
}

/// Runs one fold. `features` must come from [`feature_sets`] with the method's
/// feature kind; FBCCA ignores it.
pub fn run_fold(
    recordings: &[Recording],
    table: &StimulusTable,
    features: &[SubjectFeatures],
    test_subject: &str,
    cfg: &RunConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<FoldResult> {
    let n_classes = table.len();
    let wrap = subject(test_subject);
    let fseed = fold_seed(cfg.seed, test_subject);
    let checkpoint = |trained: Trained| Checkpoint {
        method: cfg.method.name().into(),
        test_subject: test_subject.into(),
        n_classes,
        seed: fseed,
        preprocess: cfg.preprocess.clone(),
        trained,
    };
    let fold = || -> fbssvep_core::Result<FoldResult> {
        if cfg.method == Method::Fbcca {
            let rec = recordings
                .iter()
                .find(|r| r.subject_id == test_subject)
                .ok_or_else(|| fbssvep_core::Error::UnknownSubject(test_subject.into()))?;
            let (preds, labels) = fbcca_predict(rec, table, cfg.fbcca, &cfg.preprocess)?;
            let result = score_subject(test_subject, &preds, &labels, n_classes)?;
            return Ok(FoldResult { result, preds, labels, checkpoint: None, history: None });
        }
        let plan = loso_split(recordings, test_subject, cfg.val_fraction, cfg.granularity, &cfg.preprocess, fseed)?;
        let (trained, history) = match cfg.method {
            Method::Net(kind) => {
                let tc = cfg.overrides.apply(kind.train_config(n_classes, fseed));
                let (t, h) = train_net_fold(kind, n_classes, features, &plan, &tc, on_epoch)?;
                (t, Some(h))
            }
            Method::Forest => {
                (train_forest_fold(n_classes, features, &plan, &ForestConfig::for_classes(n_classes, fseed))?, None)
            }
            Method::Fbcca => unreachable!(),
        };
        let test = &features[plan.test_index];
        let preds = trained.predict(test)?;
        let result = score_subject(test_subject, &preds, &test.labels, n_classes)?;
        Ok(FoldResult { result, preds, labels: test.labels.clone(), checkpoint: Some(checkpoint(trained)), history })
    };
    fold().map_err(wrap)
}

/// Runs the fold of each subject in `subjects`, in parallel, and returns the
/// results in the same order.
pub fn run_loso(
    recordings: &[Recording],
    table: &StimulusTable,
    subjects: &[String],
    cfg: &RunConfig,
) -> Result<Vec<FoldResult>> {
    let missing: Vec<String> =
        subjects.iter().filter(|s| !recordings.iter().any(|r| &r.subject_id == *s)).cloned().collect();
    if let Some(s) = missing.first() {
        return Err(Error::Core(fbssvep_core::Error::UnknownSubject(s.clone())));
    }
    with_fold_pool(|| {
        let features = match cfg.method.feature() {
            Some(kind) => feature_sets(recordings, kind, &cfg.preprocess)?,
            None => Vec::new(),
        };
        subjects.par_iter().map(|s| run_fold(recordings, table, &features, s, cfg, |_| {})).collect()
    })
}

pub fn method_report(method: &str, folds: &[FoldResult]) -> MethodReport {
    MethodReport::new(method, folds.iter().map(|f| f.result.clone()).collect())
}

/// Scores a stored classifier on the subject it held out.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, recordings: &[Recording]) -> Result<SubjectResult> {
    let id = ckpt.test_subject.as_str();
    let score = || -> fbssvep_core::Result<SubjectResult> {
        let rec = recordings
            .iter()
            .find(|r| r.subject_id == id)
            .ok_or_else(|| fbssvep_core::Error::UnknownSubject(id.into()))?;
        let features = build_features(rec, ckpt.trained.feature(), &ckpt.preprocess)?;
        let preds = ckpt.trained.predict(&features)?;
        score_subject(id, &preds, &features.labels, ckpt.n_classes)
    };
    score().map_err(subject(id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fbssvep_core::synth::{generate_dataset, SynthConfig};
    use std::f64::consts::PI;

    fn data(clean: bool) -> (StimulusTable, Vec<Recording>) {
        let table = StimulusTable::new(&[(12.0, 0.0), (15.0, PI / 2.0)]).unwrap();
        let base = if clean { SynthConfig::clean(table.clone(), 8) } else { SynthConfig::new(table.clone(), 8) };
        let cfg = SynthConfig { trial_seconds: 1.0, ..base };
        let recs = generate_dataset(4, 2, &cfg).unwrap();
        (table, recs)
    }

    #[test]
    fn method_names_parse() {
        for m in [Method::Fbcca, Method::Forest, Method::Net(ModelKind::Fbcnn3d), Method::Net(ModelKind::Svm)] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("forest".parse::<Method>().unwrap(), Method::Forest);
        assert!("cnn".parse::<Method>().is_err());
    }

    #[test]
    fn fold_seeds_depend_on_subject_and_base() {
        assert_eq!(fold_seed(3, "S01"), fold_seed(3, "S01"));
        assert_ne!(fold_seed(3, "S01"), fold_seed(3, "S02"));
        assert_ne!(fold_seed(3, "S01"), fold_seed(4, "S01"));
    }

    #[test]
    fn overrides_replace_only_what_is_set() {
        let base = ModelKind::Acnn.train_config(2, 1);
        let o = TrainOverrides { max_epochs: Some(3), lr: Some(0.5), ..TrainOverrides::default() };
        let c = o.apply(base);
        assert_eq!((c.max_epochs, c.lr, c.patience, c.batch_size), (3, 0.5, base.patience, base.batch_size));
    }

    #[test]
    fn fbcca_folds_need_no_training() {
        let (table, recs) = data(true);
        let ids: Vec<String> = recs.iter().map(|r| r.subject_id.clone()).collect();
        let folds = run_loso(&recs, &table, &ids, &RunConfig::new(Method::Fbcca, 0)).unwrap();
        assert_eq!(folds.len(), 4);
        for f in &folds {
            assert!(f.checkpoint.is_none() && f.history.is_none());
            assert_eq!(f.result.accuracy, 100.0);
        }
    }

    #[test]
    fn parallel_folds_match_serial_folds() {
        let (table, recs) = data(false);
        let ids: Vec<String> = recs.iter().map(|r| r.subject_id.clone()).collect();
        let mut cfg = RunConfig::new(Method::Net(ModelKind::Svm), 5);
        cfg.overrides.max_epochs = Some(3);
        let par = run_loso(&recs, &table, &ids, &cfg).unwrap();
        let feats = feature_sets(&recs, FeatureKind::MagnitudeDb, &cfg.preprocess).unwrap();
        for (id, p) in ids.iter().zip(&par) {
            let s = run_fold(&recs, &table, &feats, id, &cfg, |_| {}).unwrap();
            assert_eq!(&s, p);
            assert_eq!(s.history.as_ref().unwrap().epochs.len(), 3);
        }
    }

    #[test]
    fn stored_classifier_scores_like_the_fold() {
        let (table, recs) = data(false);
        let ids = vec![String::from("S02")];
        let mut cfg = RunConfig::new(Method::Forest, 2);
        cfg.overrides.max_epochs = Some(2);
        let fold = run_loso(&recs, &table, &ids, &cfg).unwrap().remove(0);
        let ckpt = fold.checkpoint.unwrap();
        assert_eq!(ckpt.seed, fold_seed(2, "S02"));
        assert_eq!(evaluate_checkpoint(&ckpt, &recs).unwrap(), fold.result);
    }

    #[test]
    fn unknown_subject_is_reported() {
        let (table, recs) = data(true);
        let err = run_loso(&recs, &table, &[String::from("S99")], &RunConfig::new(Method::Forest, 0)).unwrap_err();
        assert!(err.to_string().contains("S99"), "{err}");
    }
}
