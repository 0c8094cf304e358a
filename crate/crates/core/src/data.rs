//! Bags, bag datasets, the synthetic Gaussian-mixture generator, CSV
//! ingestion and stratified fold splitting.
//!
//! CSV schema (UTF-8, header required):
//!
//! ```text
//! bag_id,instance_label,label,f0,f1,...,f{D-1}
//! ```
//!
//! `instance_label` is `0`, `1` or `?`; `label` is the bag label repeated on
//! every row of the bag. Rows of one bag need not be contiguous; bags keep
//! the order in which their first row appears.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MilError, Result};
use crate::numerics::{Matrix, Rng};

/// One MIL sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub id: String,
    pub instances: Matrix,
    pub label: bool,
    pub instance_labels: Option<Vec<bool>>,
}

impl Bag {
    /// Validates instance count and, when instance labels are known, that
    /// the bag label is their OR.
    pub fn new(
        id: impl Into<String>,
        instances: Matrix,
        label: bool,
        instance_labels: Option<Vec<bool>>,
    ) -> Result<Self> {
        let id = id.into();
        if instances.rows() == 0 {
            return Err(MilError::Empty("bag"));
        }
        if let Some(labels) = &instance_labels {
            if labels.len() != instances.rows() {
                return Err(MilError::Shape(format!(
                    "bag {id}: {} instance labels for {} instances",
                    labels.len(),
                    instances.rows()
                )));
            }
            if bag_label_oracle(labels)? != label {
                return Err(MilError::Config(format!(
                    "bag {id}: label {} contradicts its instance labels",
                    u8::from(label)
                )));
            }
        }
        Ok(Self {
            id,
            instances,
            label,
            instance_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.rows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.instances.cols()
    }

    /// Bag restricted to the given instances. The bag label is kept as is,
    /// which is the point of instance-removal augmentation.
    pub fn subset(&self, indices: &[usize]) -> Bag {
        Bag {
            id: self.id.clone(),
            instances: self.instances.select_rows(indices),
            label: self.label,
            instance_labels: self
                .instance_labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn permuted(&self, order: &[usize]) -> Bag {
        self.subset(order)
    }
}

/// Bag label from instance labels: positive iff any instance is positive.
pub fn bag_label_oracle(instance_labels: &[bool]) -> Result<bool> {
    if instance_labels.is_empty() {
        return Err(MilError::Empty("instance label vector"));
    }
    Ok(instance_labels.iter().any(|&y| y))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagDataset {
    pub name: String,
    pub feature_dim: usize,
    pub bags: Vec<Bag>,
}

impl BagDataset {
    pub fn new(name: impl Into<String>, bags: Vec<Bag>) -> Result<Self> {
        let name = name.into();
        let feature_dim = bags
            .first()
            .map(Bag::feature_dim)
            .ok_or(MilError::Empty("dataset"))?;
        let mut seen = HashSet::new();
        for bag in &bags {
            if bag.feature_dim() != feature_dim {
                return Err(MilError::Shape(format!(
                    "bag {} has {} features, dataset has {feature_dim}",
                    bag.id,
                    bag.feature_dim()
                )));
            }
            if !seen.insert(bag.id.as_str()) {
                return Err(MilError::Config(format!("duplicate bag id {:?}", bag.id)));
            }
        }
        Ok(Self {
            name,
            feature_dim,
            bags,
        })
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.bags.iter().map(|b| b.label).collect()
    }

    pub fn instance_count(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }

    pub fn select(&self, indices: &[usize]) -> Vec<Bag> {
        indices.iter().map(|&i| self.bags[i].clone()).collect()
    }
}

/// Parameters of the Gaussian-mixture bag generator.
///
/// Negative instances are drawn from `N(negative_mean, std²)` on every
/// feature. Positive instances share that distribution except on the first
/// `signal_dims` features, where the mean is `positive_mean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_bags: usize,
    pub feature_dim: usize,
    pub mean_bag_size: f64,
    pub bag_size_std: f64,
    pub witness_rate: f64,
    pub positive_bag_fraction: f64,
    pub positive_mean: f64,
    pub negative_mean: f64,
    pub std: f64,
    pub signal_dims: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_bags: 500,
            feature_dim: 20,
            mean_bag_size: 20.0,
            bag_size_std: 2.0,
            witness_rate: 0.1,
            positive_bag_fraction: 0.5,
            positive_mean: 1.0,
            negative_mean: 0.0,
            std: 1.0,
            signal_dims: 20,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MilError::Config(msg));
        if self.n_bags == 0 {
            return bad("synthetic dataset needs at least one bag".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if !(self.mean_bag_size >= 1.0) {
            return bad(format!("mean_bag_size {} below 1", self.mean_bag_size));
        }
        if !(self.bag_size_std >= 0.0) {
            return bad(format!("bag_size_std {} negative", self.bag_size_std));
        }
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return bad(format!("witness_rate {} outside (0, 1]", self.witness_rate));
        }
        if !(0.0..=1.0).contains(&self.positive_bag_fraction) {
            return bad(format!(
                "positive_bag_fraction {} outside [0, 1]",
                self.positive_bag_fraction
            ));
        }
        if !(self.std > 0.0) {
            return bad(format!("std {} must be positive", self.std));
        }
        if self.signal_dims == 0 || self.signal_dims > self.feature_dim {
            return bad(format!(
                "signal_dims {} outside 1..={}",
                self.signal_dims, self.feature_dim
            ));
        }
        if !(self.positive_mean.is_finite() && self.negative_mean.is_finite()) {
            return bad("component means must be finite".into());
        }
        Ok(())
    }

    /// Generates the dataset from `self.seed`.
    pub fn generate(&self) -> Result<BagDataset> {
        synth_bags(self, &mut Rng::new(self.seed))
    }
}

/// Synthetic bags with known instance labels.
pub fn synth_bags(config: &SynthConfig, rng: &mut Rng) -> Result<BagDataset> {
    config.validate()?;
    let n_pos = (config.positive_bag_fraction * config.n_bags as f64).round() as usize;
    let mut labels: Vec<bool> = (0..config.n_bags).map(|i| i < n_pos).collect();
    rng.shuffle(&mut labels);

    let d = config.feature_dim;
    let mut bags = Vec::with_capacity(config.n_bags);
    for (b, &label) in labels.iter().enumerate() {
        let size = (config.mean_bag_size + config.bag_size_std * rng.gaussian())
            .round()
            .max(1.0) as usize;
        let mut inst_labels = vec![false; size];
        if label {
            let witnesses = ((config.witness_rate * size as f64).ceil() as usize).clamp(1, size);
            inst_labels[..witnesses].fill(true);
            rng.shuffle(&mut inst_labels);
        }
        let mut instances = Matrix::zeros(size, d);
        for (k, &positive) in inst_labels.iter().enumerate() {
            for (j, v) in instances.row_mut(k).iter_mut().enumerate() {
                let mean = if positive && j < config.signal_dims {
                    config.positive_mean
                } else {
                    config.negative_mean
                };
                *v = mean + config.std * rng.gaussian();
            }
        }
        bags.push(Bag::new(
            format!("bag{b:05}"),
            instances,
            label,
            Some(inst_labels),
        )?);
    }
    BagDataset::new("synthetic", bags)
}

fn parse_label(token: &str, what: &str, path: &str, line: usize) -> Result<Option<bool>> {
    match token.trim() {
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        "?" if what == "instance_label" => Ok(None),
        other => Err(MilError::Parse {
            path: path.to_string(),
            line,
            message: format!("unknown {what} token {other:?}"),
        }),
    }
}

struct PendingBag {
    first_line: usize,
    label: bool,
    rows: Vec<f64>,
    instance_labels: Vec<Option<bool>>,
}

/// Reads a bag CSV file (see the module docs for the schema).
pub fn load_bags_csv(path: impl AsRef<Path>) -> Result<BagDataset> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(&shown, e))?;

    let header = reader.headers().map_err(|e| csv_error(&shown, e))?.clone();
    let fixed = ["bag_id", "instance_label", "label"];
    if header.len() < 4 || header.iter().take(3).ne(fixed.iter().copied()) {
        return Err(MilError::Parse {
            path: shown,
            line: 1,
            message: "header must start with bag_id,instance_label,label followed by features"
                .into(),
        });
    }
    let dim = header.len() - 3;

    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, PendingBag> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&shown, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let parse_err = |message: String| MilError::Parse {
            path: shown.clone(),
            line,
            message,
        };
        if record.len() != dim + 3 {
            return Err(parse_err(format!(
                "expected {} fields ({dim} features), found {}",
                dim + 3,
                record.len()
            )));
        }
        let id = record[0].trim().to_string();
        if id.is_empty() {
            return Err(parse_err("empty bag_id".into()));
        }
        let inst = parse_label(&record[1], "instance_label", &shown, line)?;
        let label =
            parse_label(&record[2], "label", &shown, line)?.expect("bag label is never '?'");
        let mut features = Vec::with_capacity(dim);
        for (j, tok) in record.iter().skip(3).enumerate() {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("feature f{j}: cannot parse {tok:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("feature f{j} is not finite")));
            }
            features.push(v);
        }
        let entry = pending.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            PendingBag {
                first_line: line,
                label,
                rows: Vec::new(),
                instance_labels: Vec::new(),
            }
        });
        if entry.label != label {
            return Err(parse_err(format!(
                "bag {id} has label {} here but {} on line {}",
                u8::from(label),
                u8::from(entry.label),
                entry.first_line
            )));
        }
        entry.rows.extend(features);
        entry.instance_labels.push(inst);
    }

    let mut bags = Vec::with_capacity(order.len());
    for id in order {
        let p = pending.remove(&id).expect("every ordered id is pending");
        let k = p.instance_labels.len();
        let instance_labels: Option<Vec<bool>> = p.instance_labels.into_iter().collect();
        let instances = Matrix::from_vec(k, dim, p.rows)?;
        let bag =
            Bag::new(id, instances, p.label, instance_labels).map_err(|e| MilError::Parse {
                path: shown.clone(),
                line: p.first_line,
                message: e.to_string(),
            })?;
        bags.push(bag);
    }
    let name = path.file_stem().map_or_else(
        || "dataset".to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    BagDataset::new(name, bags)
}

fn csv_error(path: &str, e: csv::Error) -> MilError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    MilError::Parse {
        path: path.to_string(),
        line,
        message: e.to_string(),
    }
}

/// Writes a dataset in the bag CSV schema. Values use Rust's shortest
/// round-trip float formatting, so reloading reproduces them exactly.
pub fn write_bags_csv(dataset: &BagDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())
        .map_err(|e| csv_error(&path.as_ref().display().to_string(), e))?;
    let mut header = vec![
        "bag_id".to_string(),
        "instance_label".into(),
        "label".into(),
    ];
    header.extend((0..dataset.feature_dim).map(|j| format!("f{j}")));
    let io = |e: csv::Error| MilError::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(io)?;
    for bag in &dataset.bags {
        for k in 0..bag.len() {
            let mut rec = vec![
                bag.id.clone(),
                match &bag.instance_labels {
                    Some(l) => u8::from(l[k]).to_string(),
                    None => "?".into(),
                },
                u8::from(bag.label).to_string(),
            ];
            rec.extend(bag.instances.row(k).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One cross-validation fold: bag indices used for training and testing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified `k`-fold split of a dataset's bags.
pub fn kfold_split(dataset: &BagDataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    stratified_folds(&dataset.labels(), k, seed)
}

/// Stratified `k`-fold split over bag labels. Each class is shuffled with
/// `seed` and dealt round-robin, so per-class fold sizes differ by at most one.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(MilError::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > labels.len() {
        return Err(MilError::Config(format!(
            "cannot split {} bags into {k} folds",
            labels.len()
        )));
    }
    let mut rng = Rng::new(seed).fork("kfold");
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);

    let mut tests: Vec<Vec<usize>> = vec![Vec::new(); k];
    // negatives continue where positives stopped so total sizes stay balanced
    for (slot, idx) in pos.iter().chain(&neg).enumerate() {
        tests[slot % k].push(*idx);
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let in_test: HashSet<usize> = test.iter().copied().collect();
            let train = (0..labels.len()).filter(|i| !in_test.contains(i)).collect();
            Fold { train, test }
        })
        .collect())
}

/// Per-feature standardization fitted on a subset of bags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(bags: impl IntoIterator<Item = &'a Bag>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for bag in bags {
            if sum.is_empty() {
                sum = vec![0.0; bag.feature_dim()];
                sq = vec![0.0; bag.feature_dim()];
            }
            for row in bag.instances.row_iter() {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(MilError::Empty("standardization sample"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, bag: &Bag) -> Bag {
        let mut out = bag.clone();
        for i in 0..out.len() {
            for (j, v) in out.instances.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_examples() {
        assert!(!bag_label_oracle(&[false, false, false]).unwrap());
        assert!(bag_label_oracle(&[false, true, false]).unwrap());
        assert!(bag_label_oracle(&[]).is_err());
        let mut rng = Rng::new(11);
        for _ in 0..200 {
            let v: Vec<bool> = (0..30).map(|_| rng.bernoulli(0.03)).collect();
            let mut brute = false;
            for &y in &v {
                brute = brute || y;
            }
            assert_eq!(bag_label_oracle(&v).unwrap(), brute);
        }
    }

    #[test]
    fn bag_rejects_contradicting_labels() {
        let m = Matrix::zeros(2, 3);
        assert!(Bag::new("a", m.clone(), true, Some(vec![false, false])).is_err());
        assert!(Bag::new("a", m.clone(), false, Some(vec![true, false])).is_err());
        assert!(Bag::new("a", m, true, Some(vec![false, true])).is_ok());
        assert!(Bag::new("e", Matrix::zeros(0, 3), false, None).is_err());
    }

    #[test]
    fn full_witness_rate_labels_every_positive_instance() {
        let cfg = SynthConfig {
            n_bags: 40,
            witness_rate: 1.0,
            ..SynthConfig::default()
        };
        let ds = cfg.generate().unwrap();
        for bag in ds.bags.iter().filter(|b| b.label) {
            assert!(bag.instance_labels.as_ref().unwrap().iter().all(|&y| y));
        }
    }

    #[test]
    fn synthetic_bags_satisfy_label_rule() {
        let ds = SynthConfig {
            n_bags: 300,
            ..SynthConfig::default()
        }
        .generate()
        .unwrap();
        for bag in &ds.bags {
            let labels = bag.instance_labels.as_ref().unwrap();
            assert_eq!(bag_label_oracle(labels).unwrap(), bag.label);
        }
        assert_eq!(ds.bags.iter().filter(|b| b.label).count(), 150);
    }

    #[test]
    fn mean_bag_size() {
        let ds = SynthConfig {
            n_bags: 2000,
            feature_dim: 2,
            signal_dims: 2,
            ..SynthConfig::default()
        }
        .generate()
        .unwrap();
        let mean = ds.instance_count() as f64 / 2000.0;
        assert!((mean - 20.0).abs() < 0.15, "mean bag size {mean}");
    }

    #[test]
    fn synthetic_generation_is_seeded() {
        let cfg = SynthConfig {
            n_bags: 30,
            ..SynthConfig::default()
        };
        assert_eq!(cfg.generate().unwrap(), cfg.generate().unwrap());
        let other = SynthConfig {
            seed: 1,
            ..cfg.clone()
        };
        assert_ne!(cfg.generate().unwrap(), other.generate().unwrap());
    }

    #[test]
    fn invalid_synth_config() {
        let cfg = SynthConfig {
            witness_rate: 0.0,
            ..SynthConfig::default()
        };
        assert!(cfg.generate().is_err());
        let cfg = SynthConfig {
            signal_dims: 21,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn two_fold_on_four_bags() {
        let labels = [true, true, false, false];
        let folds = stratified_folds(&labels, 2, 0).unwrap();
        assert_eq!(folds.len(), 2);
        for f in &folds {
            assert_eq!(f.test.iter().filter(|&&i| labels[i]).count(), 1);
            assert_eq!(f.test.len(), 2);
            assert_eq!(f.train.len(), 2);
        }
        assert!(stratified_folds(&labels, 5, 0).is_err());
        assert!(stratified_folds(&labels, 1, 0).is_err());
    }

    #[test]
    fn standardizer_zero_mean_unit_std() {
        let ds = SynthConfig {
            n_bags: 50,
            ..SynthConfig::default()
        }
        .generate()
        .unwrap();
        let s = Standardizer::fit(&ds.bags).unwrap();
        let t: Vec<Bag> = ds.bags.iter().map(|b| s.apply(b)).collect();
        let again = Standardizer::fit(&t).unwrap();
        assert!(again.mean.iter().all(|m| m.abs() < 1e-10));
        assert!(again.std.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }
}
