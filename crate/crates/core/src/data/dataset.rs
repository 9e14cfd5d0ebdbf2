use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment_downsample, augment_noise};
use super::csv_io::{read_bundle_split, write_bundle_split};
use super::preprocess::resample_to_length;
use super::{AlignedSequence, INPUT_CHANNELS, TARGET_COLUMN};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BUNDLE_MANIFEST: &str = "manifest.json";
const BUNDLE_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.csv", self.name())
    }
}

/// How sources are multiplied and partitioned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPlan {
    /// Noisy copies per source.
    pub noisy_copies: usize,
    /// Noise-then-split pairs per source; each yields two children.
    pub downsampled_pairs: usize,
    /// Fractions of sources assigned to train, validation and test.
    pub split_ratios: [f64; 3],
    /// Every child is resampled to this many rows.
    pub sequence_length: usize,
    pub seed: u64,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        AugmentationPlan {
            noisy_copies: 42,
            downsampled_pairs: 21,
            split_ratios: [0.74, 0.13, 0.13],
            sequence_length: 512,
            seed: 0,
        }
    }
}

impl AugmentationPlan {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split ratios must be non-negative and sum to 1, got {:?} (sum {sum})",
                self.split_ratios
            )));
        }
        if self.sequence_length < 2 {
            return Err(Error::config("sequence_length must be at least 2"));
        }
        if self.children_per_source() == 0 {
            return Err(Error::config("plan produces no children per source"));
        }
        Ok(())
    }

    pub fn children_per_source(&self) -> usize {
        self.noisy_copies + 2 * self.downsampled_pairs
    }

    /// Sources per split by largest-remainder apportionment, with at least
    /// one source in each split.
    pub fn source_counts(&self, sources: usize) -> Result<[usize; 3]> {
        if sources < 3 {
            return Err(Error::contract(format!("at least 3 sources are required, got {sources}")));
        }
        let exact = self.split_ratios.map(|r| r * sources as f64);
        let mut counts = exact.map(|x| x.floor() as usize);
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.partial_cmp(&ra).expect("finite ratios").then(a.cmp(&b))
        });
        let mut left = sources - counts.iter().sum::<usize>();
        for &k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[k] += 1;
            left -= 1;
        }
        for k in 0..3 {
            while counts[k] == 0 {
                let donor = (0..3).max_by_key(|&j| counts[j]).expect("three splits");
                counts[donor] -= 1;
                counts[k] += 1;
            }
        }
        Ok(counts)
    }
}

/// Per-source rng seed, stable across platforms and runs.
pub fn source_seed(seed: u64, source_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in source_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

/// Channel statistics of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardization {
    pub feature_means: Vec<f64>,
    /// Population standard deviations; a constant channel gets 1.
    pub feature_stds: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Standardization {
    pub fn identity() -> Self {
        Standardization {
            feature_means: vec![0.0; INPUT_CHANNELS],
            feature_stds: vec![1.0; INPUT_CHANNELS],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    /// Statistics over every row of every sequence.
    pub fn fit(seqs: &[&Tensor]) -> Result<Self> {
        let rows: usize = seqs.iter().map(|t| t.rows()).sum();
        if rows == 0 {
            return Err(Error::contract("cannot fit standardization on an empty split"));
        }
        let cols = INPUT_CHANNELS + 1;
        let mut mean = vec![0.0; cols];
        for t in seqs {
            for row in t.data().chunks(cols) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; cols];
        for t in seqs {
            for row in t.data().chunks(cols) {
                for c in 0..cols {
                    var[c] += (row[c] - mean[c]).powi(2);
                }
            }
        }
        let sd: Vec<f64> = var
            .iter()
            .map(|v| (v / rows as f64).sqrt())
            .map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 })
            .collect();
        Ok(Standardization {
            feature_means: mean[..INPUT_CHANNELS].to_vec(),
            feature_stds: sd[..INPUT_CHANNELS].to_vec(),
            target_mean: mean[TARGET_COLUMN],
            target_std: sd[TARGET_COLUMN],
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_means.len() != INPUT_CHANNELS || self.feature_stds.len() != INPUT_CHANNELS {
            return Err(Error::config(format!("standardization needs {INPUT_CHANNELS} feature statistics")));
        }
        if self.feature_stds.iter().chain([&self.target_std]).any(|s| !(*s > 0.0)) {
            return Err(Error::config("standardization deviations must be positive"));
        }
        Ok(())
    }

    /// Standardizes an N×8 block (inputs and target).
    pub fn apply(&self, data: &Tensor) -> Tensor {
        let mut out = data.clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            for c in 0..INPUT_CHANNELS {
                row[c] = (row[c] - self.feature_means[c]) / self.feature_stds[c];
            }
            if cols > TARGET_COLUMN {
                row[TARGET_COLUMN] = (row[TARGET_COLUMN] - self.target_mean) / self.target_std;
            }
        }
        out
    }

    pub fn standardize_target(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.target_mean) / self.target_std).collect()
    }

    pub fn destandardize_target(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.target_std + self.target_mean).collect()
    }
}

/// A fixed-length standardized sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizedSequence {
    pub source_id: String,
    pub spacing_m: f64,
    /// L×8, standardized inputs followed by the standardized target.
    pub data: Tensor,
}

impl StandardizedSequence {
    pub fn inputs(&self) -> Tensor {
        self.data.slice_cols(0, INPUT_CHANNELS)
    }

    pub fn target(&self) -> Vec<f64> {
        self.data.column(TARGET_COLUMN)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub plan: AugmentationPlan,
    pub standardization: Standardization,
    pub train: Vec<StandardizedSequence>,
    pub validation: Vec<StandardizedSequence>,
    pub test: Vec<StandardizedSequence>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleManifest {
    format: u32,
    plan: AugmentationPlan,
    children_per_source: usize,
    noisy_children: usize,
    downsampled_children: usize,
    total_children: usize,
    split_counts: [usize; 3],
    sources: SplitSources,
    standardization: Standardization,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitSources {
    train: Vec<String>,
    validation: Vec<String>,
    test: Vec<String>,
}

impl DatasetBundle {
    pub fn split(&self, s: Split) -> &[StandardizedSequence] {
        match s {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn split_counts(&self) -> [usize; 3] {
        Split::ALL.map(|s| self.split(s).len())
    }

    pub fn total(&self) -> usize {
        self.split_counts().iter().sum()
    }

    pub fn sources(&self, s: Split) -> BTreeSet<String> {
        self.split(s).iter().map(|q| q.source_id.clone()).collect()
    }

    pub fn contains_source(&self, id: &str) -> bool {
        Split::ALL.iter().any(|&s| self.split(s).iter().any(|q| q.source_id == id))
    }

    pub fn sequence_length(&self) -> usize {
        self.plan.sequence_length
    }

    /// Fails if any source contributes children to more than one split.
    pub fn check_no_leakage(&self) -> Result<()> {
        let sets = Split::ALL.map(|s| self.sources(s));
        for i in 0..3 {
            for j in i + 1..3 {
                if let Some(id) = sets[i].intersection(&sets[j]).next() {
                    return Err(Error::Leakage(id.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let per = self.plan.children_per_source();
        let sorted = |s: Split| self.sources(s).into_iter().collect::<Vec<_>>();
        let manifest = BundleManifest {
            format: BUNDLE_FORMAT,
            plan: self.plan.clone(),
            children_per_source: per,
            noisy_children: self.total() / per * self.plan.noisy_copies,
            downsampled_children: self.total() / per * 2 * self.plan.downsampled_pairs,
            total_children: self.total(),
            split_counts: self.split_counts(),
            sources: SplitSources {
                train: sorted(Split::Train),
                validation: sorted(Split::Validation),
                test: sorted(Split::Test),
            },
            standardization: self.standardization.clone(),
        };
        for s in Split::ALL {
            write_bundle_split(&dir.join(s.file_name()), self.split(s))?;
        }
        let path = dir.join(BUNDLE_MANIFEST);
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BUNDLE_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: BundleManifest = serde_json::from_str(&text)?;
        if manifest.format != BUNDLE_FORMAT {
            return Err(Error::config(format!(
                "{}: unsupported bundle format {} (expected {BUNDLE_FORMAT})",
                path.display(),
                manifest.format
            )));
        }
        manifest.plan.validate()?;
        manifest.standardization.validate()?;
        let [train, validation, test] = Split::ALL.map(|s| read_bundle_split(&dir.join(s.file_name())));
        let bundle = DatasetBundle {
            plan: manifest.plan,
            standardization: manifest.standardization,
            train: train?,
            validation: validation?,
            test: test?,
        };
        if bundle.split_counts() != manifest.split_counts {
            return Err(Error::config(format!(
                "{}: split counts {:?} do not match the CSV files {:?}",
                path.display(),
                manifest.split_counts,
                bundle.split_counts()
            )));
        }
        if let Some(bad) = Split::ALL
            .iter()
            .flat_map(|&s| bundle.split(s))
            .find(|q| q.data.rows() != bundle.plan.sequence_length)
        {
            return Err(Error::config(format!(
                "sequence from `{}` has {} rows, expected {}",
                bad.source_id,
                bad.data.rows(),
                bundle.plan.sequence_length
            )));
        }
        bundle.check_no_leakage()?;
        Ok(bundle)
    }
}

/// All children of one source, resampled, in generation order.
fn children_of(source: &AlignedSequence, plan: &AugmentationPlan) -> Result<Vec<AlignedSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(source_seed(plan.seed, &source.source_id));
    let mut out = Vec::with_capacity(plan.children_per_source());
    for _ in 0..plan.noisy_copies {
        out.push(resample_to_length(&augment_noise(source, &mut rng), plan.sequence_length)?);
    }
    for _ in 0..plan.downsampled_pairs {
        let (even, odd) = augment_downsample(source, &mut rng)?;
        out.push(resample_to_length(&even, plan.sequence_length)?);
        out.push(resample_to_length(&odd, plan.sequence_length)?);
    }
    Ok(out)
}

/// Augments, splits (by source) and standardizes aligned sources.
pub fn build_dataset(sources: &[AlignedSequence], plan: &AugmentationPlan) -> Result<DatasetBundle> {
    plan.validate()?;
    let counts = plan.source_counts(sources.len())?;
    let mut ids = BTreeSet::new();
    for s in sources {
        if !ids.insert(s.source_id.as_str()) {
            return Err(Error::contract(format!("duplicate source id `{}`", s.source_id)));
        }
    }

    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.sort_by(|&a, &b| sources[a].source_id.cmp(&sources[b].source_id));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));

    let children: Vec<Vec<AlignedSequence>> =
        order.par_iter().map(|&i| children_of(&sources[i], plan)).collect::<Result<_>>()?;

    let mut groups: [Vec<AlignedSequence>; 3] = Default::default();
    for (rank, kids) in children.into_iter().enumerate() {
        let split = if rank < counts[0] {
            0
        } else if rank < counts[0] + counts[1] {
            1
        } else {
            2
        };
        groups[split].extend(kids);
    }

    let stats = Standardization::fit(&groups[0].iter().map(|s| &s.data).collect::<Vec<_>>())?;
    let [train, validation, test] = groups.map(|g| {
        g.into_par_iter()
            .map(|s| StandardizedSequence {
                data: stats.apply(&s.data),
                source_id: s.source_id,
                spacing_m: s.spacing_m,
            })
            .collect::<Vec<_>>()
    });
    let bundle = DatasetBundle {
        plan: plan.clone(),
        standardization: stats,
        train,
        validation,
        test,
    };
    bundle.check_no_leakage()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportionment_matches_ratios() {
        let plan = AugmentationPlan::default();
        assert_eq!(plan.source_counts(127).unwrap(), [94, 17, 16]);
        assert_eq!(plan.source_counts(3).unwrap(), [1, 1, 1]);
        assert_eq!(plan.source_counts(10).unwrap().iter().sum::<usize>(), 10);
        assert!(plan.source_counts(2).is_err());
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let plan = AugmentationPlan {
            split_ratios: [0.7, 0.2, 0.2],
            ..AugmentationPlan::default()
        };
        assert!(matches!(plan.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn source_seeds_differ_by_id_and_seed() {
        assert_ne!(source_seed(0, "a"), source_seed(0, "b"));
        assert_ne!(source_seed(0, "a"), source_seed(1, "a"));
        assert_eq!(source_seed(5, "crossing-001"), source_seed(5, "crossing-001"));
    }

    #[test]
    fn destandardize_inverts_standardize() {
        let s = Standardization {
            target_mean: 0.17,
            target_std: 0.09,
            ..Standardization::identity()
        };
        let y = [0.0, 0.3, -1.2, 5.5];
        let back = s.destandardize_target(&s.standardize_target(&y));
        for (a, b) in y.iter().zip(back) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
