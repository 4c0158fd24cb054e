//! Desk-scale synthetic study: one seeded two-class dataset, FBCCA on every
//! subject, and the filter-bank networks against their single-band
//! counterparts over several seeds.

use std::f64::consts::PI;

use fbssvep_core::eval::MethodReport;
use fbssvep_core::models::ModelKind;
use fbssvep_core::pipeline::SubjectFeatures;
use fbssvep_core::synth::{generate_dataset, subject_id, SynthConfig};
use fbssvep_core::types::{Recording, StimulusTable};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::experiment::{feature_sets, method_report, run_fold, run_loso, with_fold_pool, Method, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub n_subjects: usize,
    pub trials_per_class: usize,
    pub trial_seconds: f64,
    pub white_sigma: f64,
    pub pink_sigma: f64,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    /// Networks and their epoch caps.
    pub models: Vec<(ModelKind, usize)>,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            n_subjects: 20,
            trials_per_class: 3,
            trial_seconds: 2.0,
            white_sigma: 2.5,
            pink_sigma: 0.5,
            data_seed: 2024,
            seeds: (0..5).collect(),
            models: vec![
                (ModelKind::Fbcnn3d, 15),
                (ModelKind::Acnn, 15),
                (ModelKind::Fbrnn, 20),
                (ModelKind::Arnn, 20),
            ],
        }
    }
}

pub fn two_class_table() -> StimulusTable {
    StimulusTable::new(&[(12.0, 0.0), (15.0, PI / 2.0)]).expect("valid table")
}

impl DeskConfig {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            white_sigma: self.white_sigma,
            pink_sigma: self.pink_sigma,
            trial_seconds: self.trial_seconds,
            ..SynthConfig::new(two_class_table(), self.data_seed)
        }
    }

    pub fn dataset(&self) -> Result<Vec<Recording>> {
        Ok(generate_dataset(self.n_subjects, self.trials_per_class, &self.synth_config())?)
    }

    /// Held-out subject of run `seed`; consecutive seeds land four subjects apart.
    pub fn test_subject(&self, seed: u64) -> String {
        subject_id(((4 * seed + 3) % self.n_subjects as u64) as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskRun {
    pub seed: u64,
    pub model: String,
    pub test_subject: String,
    /// Percent correct.
    pub accuracy: f64,
    pub f1: f64,
    pub epochs: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskReport {
    pub config: DeskConfig,
    pub fbcca: MethodReport,
    pub runs: Vec<DeskRun>,
}

impl DeskReport {
    /// Mean accuracy of `model` over seeds.
    pub fn mean_accuracy(&self, model: ModelKind) -> Option<f64> {
        let accs: Vec<f64> = self.runs.iter().filter(|r| r.model == model.name()).map(|r| r.accuracy).collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

pub fn run_desk(cfg: &DeskConfig) -> Result<DeskReport> {
    let recs = cfg.dataset()?;
    let table = two_class_table();
    let ids: Vec<String> = recs.iter().map(|r| r.subject_id.clone()).collect();
    let fbcca = method_report("FBCCA", &run_loso(&recs, &table, &ids, &RunConfig::new(Method::Fbcca, 0))?);
    let base = RunConfig::new(Method::Fbcca, 0);
    let features: Vec<Vec<SubjectFeatures>> =
        cfg.models.iter().map(|(k, _)| feature_sets(&recs, k.feature(), &base.preprocess)).collect::<Result<_>>()?;
    let jobs: Vec<(u64, usize)> = cfg.seeds.iter().flat_map(|&s| (0..cfg.models.len()).map(move |m| (s, m))).collect();
    let runs = with_fold_pool(|| {
        jobs.par_iter()
            .map(|&(seed, m)| {
                let (kind, cap) = cfg.models[m];
                let mut rc = RunConfig::new(Method::Net(kind), seed);
                rc.overrides.max_epochs = Some(cap);
                let subject = cfg.test_subject(seed);
                let fold = run_fold(&recs, &table, &features[m], &subject, &rc, |_| {})?;
                let history = fold.history.expect("networks keep a history");
                Ok(DeskRun {
                    seed,
                    model: kind.name().into(),
                    test_subject: subject,
                    accuracy: fold.result.accuracy,
                    f1: fold.result.f1,
                    epochs: history.epochs.len(),
                    best_epoch: history.best_epoch,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(DeskReport { config: cfg.clone(), fbcca, runs })
}

/// Mean FBCCA accuracy (%) over every subject of a dataset drawn at each white-noise level.
pub fn fbcca_sweep(
    base: &SynthConfig,
    n_subjects: usize,
    trials_per_class: usize,
    sigmas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    sigmas
        .iter()
        .map(|&white_sigma| {
            let cfg = SynthConfig { white_sigma, ..base.clone() };
            let recs = generate_dataset(n_subjects, trials_per_class, &cfg)?;
            let ids: Vec<String> = recs.iter().map(|r| r.subject_id.clone()).collect();
            let folds = run_loso(&recs, &cfg.table, &ids, &RunConfig::new(Method::Fbcca, 0))?;
            Ok((white_sigma, method_report("FBCCA", &folds).mean_accuracy))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_subjects_are_distinct_across_seeds() {
        let cfg = DeskConfig::default();
        let ids: std::collections::HashSet<String> = cfg.seeds.iter().map(|&s| cfg.test_subject(s)).collect();
        assert_eq!(ids.len(), cfg.seeds.len());
    }

    #[test]
    fn tiny_study_is_deterministic() {
        let cfg = DeskConfig {
            n_subjects: 3,
            trials_per_class: 1,
            trial_seconds: 1.0,
            seeds: vec![0],
            models: vec![(ModelKind::Svm, 2)],
            ..DeskConfig::default()
        };
        let a = run_desk(&cfg).unwrap();
        assert_eq!(a.runs.len(), 1);
        assert_eq!(a.runs[0].epochs, 2);
        assert_eq!(a.fbcca.subjects.len(), 3);
        assert_eq!(a, run_desk(&cfg).unwrap());
    }

    #[test]
    fn sweep_accuracy_falls_with_noise() {
        let base = SynthConfig { trial_seconds: 1.0, ..SynthConfig::new(two_class_table(), 1) };
        let rows = fbcca_sweep(&base, 3, 2, &[0.0, 8.0]).unwrap();
        assert!(rows[0].1 > rows[1].1, "{rows:?}");
    }
}
