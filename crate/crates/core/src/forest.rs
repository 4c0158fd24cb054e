//! Gini random forest over magnitude features.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::fbcca::argmax_first;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_features: usize,
    pub bootstrap: bool,
    pub min_samples_split: usize,
    /// `None` grows until leaves are pure or unsplittable.
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl ForestConfig {
    /// 100 trees; 11 features per split for two classes, 14 otherwise.
    pub fn for_classes(n_classes: usize, seed: u64) -> Self {
        ForestConfig {
            n_trees: 100,
            max_features: if n_classes <= 2 { 11 } else { 14 },
            bootstrap: true,
            min_samples_split: 2,
            max_depth: None,
            seed,
        }
    }

    fn check(&self, n_features: usize) -> Result<()> {
        if self.n_trees == 0 {
            bail!(Config, "a forest needs at least one tree");
        }
        if self.max_features == 0 || self.max_features > n_features {
            bail!(Config, "max_features must be in 1..={n_features}, got {}", self.max_features);
        }
        if self.min_samples_split < 2 {
            bail!(Config, "min_samples_split must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    /// Class counts of the training samples that reached the leaf.
    Leaf { counts: Vec<usize> },
    /// `x[feature] <= threshold` goes left.
    Split { feature: usize, threshold: f64, left: Box<Node>, right: Box<Node> },
}

impl Node {
    pub fn leaf_counts(&self, x: &[f64]) -> &[usize] {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { counts } => return counts,
                Node::Split { feature, threshold, left, right } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub root: Node,
}

impl Tree {
    /// Majority class of the reached leaf; ties go to the lower class.
    pub fn predict(&self, x: &[f64]) -> usize {
        let counts: Vec<f64> = self.root.leaf_counts(x).iter().map(|&c| c as f64).collect();
        argmax_first(&counts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub n_features: usize,
    pub n_classes: usize,
}

impl Forest {
    /// Majority vote over trees; ties go to the lower class.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax_first(&self.votes(x)?))
    }

    pub fn votes(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            bail!(Shape, "forest expects {} features, got {}", self.n_features, x.len());
        }
        let mut votes = vec![0.0; self.n_classes];
        for t in &self.trees {
            votes[t.predict(x)] += 1.0;
        }
        Ok(votes)
    }

    pub fn predict_all(&self, xs: &[Vec<f64>]) -> Result<Vec<usize>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }
}

/// `1 - sum p_k^2`; zero for an empty node.
pub fn gini(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n) * (c as f64 / n)).sum::<f64>()
}

/// Row indices one tree trains on.
pub(crate) fn tree_sample(cfg: &ForestConfig, n: usize, rng: &mut seed::Rng) -> Vec<usize> {
    if cfg.bootstrap {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..n).collect()
    }
}

pub fn fit_forest(x: &[Vec<f64>], y: &[usize], n_classes: usize, cfg: &ForestConfig) -> Result<Forest> {
    if x.is_empty() {
        bail!(Empty, "cannot fit a forest on no samples");
    }
    if x.len() != y.len() {
        bail!(Shape, "{} samples but {} labels", x.len(), y.len());
    }
    let n_features = x[0].len();
    if x.iter().any(|r| r.len() != n_features) {
        bail!(Shape, "samples have unequal feature counts");
    }
    if let Some(&target) = y.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidTarget { target, classes: n_classes });
    }
    cfg.check(n_features)?;
    let trees = (0..cfg.n_trees)
        .map(|t| {
            let mut rng = seed::rng(seed::derive_index(cfg.seed, t as u64));
            let rows = tree_sample(cfg, x.len(), &mut rng);
            let mut grower = Grower { x, y, n_classes, cfg, rng };
            Tree { root: grower.grow(rows, 0) }
        })
        .collect();
    Ok(Forest { trees, n_features, n_classes })
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    n_classes: usize,
    cfg: &'a ForestConfig,
    rng: seed::Rng,
}

struct Candidate {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

impl Grower<'_> {
    fn counts(&self, rows: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &r in rows {
            c[self.y[r]] += 1;
        }
        c
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> Node {
        let counts = self.counts(&rows);
        let parent = gini(&counts);
        let capped = self.cfg.max_depth.is_some_and(|d| depth >= d);
        if parent == 0.0 || rows.len() < self.cfg.min_samples_split || capped {
            return Node::Leaf { counts };
        }
        let Some(best) = self.best_split(&rows, parent) else {
            return Node::Leaf { counts };
        };
        let (left, right): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&r| self.x[r][best.feature] <= best.threshold);
        Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: Box::new(self.grow(left, depth + 1)),
            right: Box::new(self.grow(right, depth + 1)),
        }
    }

    /// Best strictly-improving split among `max_features` randomly ordered
    /// features; more features are visited only while none improves.
    fn best_split(&mut self, rows: &[usize], parent: f64) -> Option<Candidate> {
        let mut features: Vec<usize> = (0..self.x[0].len()).collect();
        features.shuffle(&mut self.rng);
        let mut best: Option<Candidate> = None;
        for (visited, &f) in features.iter().enumerate() {
            if visited >= self.cfg.max_features && best.is_some() {
                break;
            }
            if let Some(c) = self.best_on_feature(rows, f) {
                if c.impurity < parent && best.as_ref().is_none_or(|b| c.impurity < b.impurity) {
                    best = Some(c);
                }
            }
        }
        best
    }

    /// Lowest weighted child impurity over midpoints of sorted unique values.
    fn best_on_feature(&self, rows: &[usize], f: usize) -> Option<Candidate> {
        let mut order: Vec<(f64, usize)> = rows.iter().map(|&r| (self.x[r][f], self.y[r])).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = order.len();
        let mut right = vec![0usize; self.n_classes];
        for &(_, l) in &order {
            right[l] += 1;
        }
        let mut left = vec![0usize; self.n_classes];
        let mut best: Option<Candidate> = None;
        for i in 0..n - 1 {
            let label = order[i].1;
            left[label] += 1;
            right[label] -= 1;
            let (lo, hi) = (order[i].0, order[i + 1].0);
            if lo == hi {
                continue;
            }
            let nl = (i + 1) as f64;
            let impurity = (nl * gini(&left) + (n as f64 - nl) * gini(&right)) / n as f64;
            if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                let mut threshold = lo + (hi - lo) / 2.0;
                // The midpoint of adjacent floats can round up to `hi`.
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(Candidate { feature: f, threshold, impurity });
            }
        }
        best
    }
}
