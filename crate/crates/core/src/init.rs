//! Dataset splits, seed management and initialization of the model pair.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DmtError, Result};
use crate::nn::{read_checkpoint, Architecture, Network};
use crate::prob::argmax;

/// SplitMix64 finalizer; spreads nearby inputs over the whole `u64` range.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A seed for a named purpose, derived deterministically from a base seed.
pub fn derive_seed(base: u64, role: &str, index: u64) -> u64 {
    let mut h = mix64(base);
    for b in role.bytes() {
        h = mix64(h ^ b as u64);
    }
    mix64(h ^ index)
}

/// Hands out never-repeating initialization seeds from a monotone counter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSequence {
    base: u64,
    counter: u64,
}

impl SeedSequence {
    pub fn new(base: u64) -> Self {
        SeedSequence { base, counter: 0 }
    }

    /// Resumes a sequence after `counter` seeds have been used.
    pub fn at(base: u64, counter: u64) -> Self {
        SeedSequence { base, counter }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_seed(&mut self) -> u64 {
        let s = derive_seed(self.base, "init", self.counter);
        self.counter += 1;
        s
    }
}

/// A labeled fraction written as `num/den`, e.g. `1/8` or `4000/50000`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(DmtError::validation(format!(
                "labeled ratio {num}/{den} outside (0, 1]"
            )));
        }
        Ok(Ratio { num, den })
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `round(n * num / den)`, halves up, in integer arithmetic.
    pub fn of(&self, n: usize) -> usize {
        ((2 * n as u128 * self.num as u128 + self.den as u128) / (2 * self.den as u128)) as usize
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = DmtError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || DmtError::validation(format!("cannot parse ratio {s:?}; expected e.g. 1/8"));
        match s.split_once('/') {
            Some((a, b)) => {
                let num = a.trim().parse().map_err(|_| bad())?;
                let den = b.trim().parse().map_err(|_| bad())?;
                Ratio::new(num, den)
            }
            None if s.trim() == "1" => Ratio::new(1, 1),
            None => Err(bad()),
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A deterministic labeled / unlabeled / valtiny partition of sample indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labeled_ids: Vec<usize>,
    pub unlabeled_ids: Vec<usize>,
    pub valtiny_ids: Vec<usize>,
    pub seed: u64,
    pub labeled_ratio: Ratio,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, ids) in [
            ("labeled", &self.labeled_ids),
            ("unlabeled", &self.unlabeled_ids),
            ("valtiny", &self.valtiny_ids),
        ] {
            for &id in ids {
                if !seen.insert(id) {
                    return Err(DmtError::validation(format!(
                        "sample {id} appears twice (again in the {name} list)"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: SplitSpec = serde_json::from_slice(&std::fs::read(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Shuffles `ids` with `seed` and returns the first and the last `k`
/// elements, so the overlap is `max(0, 2k - n)`.
pub fn difference_maximized_sampling<T: Clone>(
    ids: &[T],
    k: usize,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    let n = ids.len();
    if k == 0 || k > n {
        return Err(DmtError::validation(format!(
            "subset size {k} must lie in 1..={n}"
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let a = shuffled[..k].to_vec();
    let b = shuffled[n - k..].to_vec();
    Ok((a, b))
}

/// Splits `total` across groups in proportion to `sizes` by largest
/// remainder, never exceeding a group's size. Ties go to the lower index.
fn proportional_allocation(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let total = total.min(n);
    let mut alloc: Vec<usize> = sizes
        .iter()
        .map(|&s| (s as u128 * total as u128 / n as u128) as usize)
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // remainder numerators, compared exactly
    let rem = |c: usize| (sizes[c] as u128 * total as u128) % n as u128;
    order.sort_by(|&a, &b| rem(b).cmp(&rem(a)).then(a.cmp(&b)));
    let mut left = total - alloc.iter().sum::<usize>();
    while left > 0 {
        let before = left;
        for &c in &order {
            if left == 0 {
                break;
            }
            if alloc[c] < sizes[c] {
                alloc[c] += 1;
                left -= 1;
            }
        }
        if before == left {
            break;
        }
    }
    alloc
}

/// Class-stratified random split. `valtiny_size` samples are drawn first,
/// then `labeled_ratio` of the whole set as labeled; the rest is unlabeled.
pub fn make_split(
    labels: &[usize],
    labeled_ratio: Ratio,
    valtiny_size: usize,
    seed: u64,
) -> Result<SplitSpec> {
    let n = labels.len();
    let labeled_count = labeled_ratio.of(n);
    if valtiny_size + labeled_count > n {
        return Err(DmtError::validation(format!(
            "valtiny ({valtiny_size}) plus labeled ({labeled_count}) exceed the {n} samples"
        )));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", 0));
    for p in &mut pools {
        p.shuffle(&mut rng);
    }
    let present = pools.iter().filter(|p| !p.is_empty()).count();
    if labeled_count < present {
        log::warn!(
            "{labeled_count} labeled samples cannot cover all {present} classes; \
             stratification is best effort"
        );
    }

    let mut take = |count: usize| -> Vec<usize> {
        let sizes: Vec<usize> = pools.iter().map(|p| p.len()).collect();
        let alloc = proportional_allocation(&sizes, count);
        let mut out = Vec::with_capacity(count);
        for (pool, a) in pools.iter_mut().zip(alloc) {
            out.extend(pool.drain(..a));
        }
        out.sort_unstable();
        out
    };
    let valtiny_ids = take(valtiny_size);
    let labeled_ids = take(labeled_count);
    let mut unlabeled_ids: Vec<usize> = pools.into_iter().flatten().collect();
    unlabeled_ids.sort_unstable();

    let spec = SplitSpec {
        labeled_ids,
        unlabeled_ids,
        valtiny_ids,
        seed,
        labeled_ratio,
    };
    spec.validate()?;
    Ok(spec)
}

/// How the two models of a pair are made different.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitPolicy {
    DistinctRandomSeeds {
        seed_a: u64,
        seed_b: u64,
    },
    DistinctPretrainedWeights {
        weights_a: String,
        weights_b: String,
    },
    /// One shared initialization trained on two minimally overlapping
    /// subsets; `k` defaults to `ceil(n / 2)`.
    DifferenceMaximizedSubsets {
        seed: u64,
        k: Option<usize>,
    },
}

impl InitPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            InitPolicy::DistinctRandomSeeds { seed_a, seed_b } if seed_a == seed_b => {
                Err(DmtError::config(format!(
                    "distinct random seeds required, got {seed_a} twice"
                )))
            }
            InitPolicy::DistinctPretrainedWeights {
                weights_a,
                weights_b,
            } if weights_a == weights_b => Err(DmtError::config(format!(
                "distinct pretrained weights required, got {weights_a:?} twice"
            ))),
            InitPolicy::DifferenceMaximizedSubsets { k: Some(0), .. } => {
                Err(DmtError::config("subset size k must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// Named warm-start checkpoints available to [`init_model_pair`].
#[derive(Debug, Clone, Default)]
pub struct CheckpointRegistry {
    models: BTreeMap<String, Network>,
}

impl CheckpointRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, net: Network) {
        self.models.insert(id.into(), net);
    }

    /// Registers every `*.ckpt` file in `dir` under its file stem.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut reg = Self::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "ckpt") {
                let id = path.file_stem().unwrap().to_string_lossy().into_owned();
                reg.insert(id, read_checkpoint(&path)?);
            }
        }
        Ok(reg)
    }

    pub fn get(&self, id: &str) -> Result<&Network> {
        self.models.get(id).ok_or_else(|| {
            DmtError::config(format!(
                "unknown checkpoint id {id:?}; known: {:?}",
                self.models.keys().collect::<Vec<_>>()
            ))
        })
    }
}

/// Two initial models and the labeled ids each one trains on.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub model_a: Network,
    pub model_b: Network,
    pub subset_a: Vec<usize>,
    pub subset_b: Vec<usize>,
}

pub fn init_model_pair(
    policy: &InitPolicy,
    arch: &Architecture,
    labeled_ids: &[usize],
    registry: &CheckpointRegistry,
) -> Result<ModelPair> {
    policy.validate()?;
    let pair = match policy {
        InitPolicy::DistinctRandomSeeds { seed_a, seed_b } => {
            let pair = ModelPair {
                model_a: Network::new(arch.clone(), *seed_a),
                model_b: Network::new(arch.clone(), *seed_b),
                subset_a: labeled_ids.to_vec(),
                subset_b: labeled_ids.to_vec(),
            };
            let disagreements =
                probe_disagreements(&pair.model_a, &pair.model_b, *seed_a ^ *seed_b)?;
            if disagreements == 0 {
                log::warn!("models from seeds {seed_a} and {seed_b} agree on every probe input");
            }
            pair
        }
        InitPolicy::DistinctPretrainedWeights {
            weights_a,
            weights_b,
        } => {
            let a = registry.get(weights_a)?.clone();
            let b = registry.get(weights_b)?.clone();
            if a.architecture() != b.architecture() {
                return Err(DmtError::config(format!(
                    "checkpoints {weights_a:?} and {weights_b:?} have different architectures"
                )));
            }
            ModelPair {
                model_a: a,
                model_b: b,
                subset_a: labeled_ids.to_vec(),
                subset_b: labeled_ids.to_vec(),
            }
        }
        InitPolicy::DifferenceMaximizedSubsets { seed, k } => {
            let k = k.unwrap_or(labeled_ids.len().div_ceil(2));
            let (subset_a, subset_b) =
                difference_maximized_sampling(labeled_ids, k, derive_seed(*seed, "subsets", 0))?;
            let net = Network::new(arch.clone(), *seed);
            ModelPair {
                model_a: net.clone(),
                model_b: net,
                subset_a,
                subset_b,
            }
        }
    };
    Ok(pair)
}

/// Number of inputs in a random probe batch on which the two models'
/// argmax predictions differ. Dense models count pixels.
pub fn probe_disagreements(a: &Network, b: &Network, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f32 { StandardNormal.sample(&mut rng) };
    let classes = a.classes();
    let count = |pa: &[f32], pb: &[f32]| {
        pa.chunks(classes)
            .zip(pb.chunks(classes))
            .filter(|(x, y)| argmax(x) != argmax(y))
            .count()
    };
    match a.architecture() {
        Architecture::Fcn { channels, .. } => {
            let (n, side) = (4, 8);
            let x = Array4::from_shape_simple_fn((n, *channels, side, side), &mut normal);
            // move the class axis last so chunks are per pixel
            let pa = a
                .predict_proba_images(x.view())?
                .permuted_axes([0, 2, 3, 1]);
            let pb = b
                .predict_proba_images(x.view())?
                .permuted_axes([0, 2, 3, 1]);
            let pa = pa.as_standard_layout();
            let pb = pb.as_standard_layout();
            Ok(count(pa.as_slice().unwrap(), pb.as_slice().unwrap()))
        }
        arch => {
            let len = arch.row_len().expect("per-sample architecture");
            let x = Array2::from_shape_simple_fn((64, len), &mut normal);
            let pa = a.predict_proba_rows(x.view())?;
            let pb = b.predict_proba_rows(x.view())?;
            Ok(count(pa.as_slice().unwrap(), pb.as_slice().unwrap()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> Architecture {
        Architecture::Mlp {
            inputs: 2,
            hidden: vec![16],
            classes: 2,
        }
    }

    #[test]
    fn overlap_examples() {
        let ids: Vec<usize> = (0..10).collect();
        let overlap = |k| {
            let (a, b) = difference_maximized_sampling(&ids, k, 3).unwrap();
            let a: HashSet<_> = a.into_iter().collect();
            b.iter().filter(|x| a.contains(x)).count()
        };
        assert_eq!(overlap(5), 0);
        assert_eq!(overlap(7), 4);
        let four: Vec<usize> = (0..4).collect();
        let (mut a, mut b) = difference_maximized_sampling(&four, 4, 1).unwrap();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert!(difference_maximized_sampling(&four, 5, 1).is_err());
    }

    #[test]
    fn ratio_parsing() {
        let r: Ratio = "1/8".parse().unwrap();
        assert_eq!(r.value(), 0.125);
        assert_eq!(r.to_string(), "1/8");
        assert_eq!("4000/50000".parse::<Ratio>().unwrap().of(50_000), 4000);
        assert!("0/8".parse::<Ratio>().is_err());
        assert!("9/8".parse::<Ratio>().is_err());
        assert!("x".parse::<Ratio>().is_err());
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(json, "\"1/8\"");
        assert_eq!(serde_json::from_str::<Ratio>(&json).unwrap(), r);
    }

    #[test]
    fn stratified_split() {
        let labels: Vec<usize> = (0..50_000).map(|i| i % 10).collect();
        let spec = make_split(&labels, "4000/50000".parse().unwrap(), 200, 1).unwrap();
        let mut per_class = [0usize; 10];
        for &i in &spec.labeled_ids {
            per_class[labels[i]] += 1;
        }
        assert_eq!(per_class, [400; 10]);
        let mut val = [0usize; 10];
        for &i in &spec.valtiny_ids {
            val[labels[i]] += 1;
        }
        assert_eq!(val, [20; 10]);
        assert_eq!(spec.unlabeled_ids.len(), 50_000 - 4200);
        assert_eq!(
            spec,
            make_split(&labels, "4000/50000".parse().unwrap(), 200, 1).unwrap()
        );
    }

    #[test]
    fn full_ratio_split() {
        let labels = vec![0, 1, 1, 0, 2];
        let spec = make_split(&labels, Ratio::new(1, 1).unwrap(), 0, 4).unwrap();
        assert_eq!(spec.labeled_ids, vec![0, 1, 2, 3, 4]);
        assert!(spec.unlabeled_ids.is_empty());
        assert!(make_split(&labels, Ratio::new(1, 1).unwrap(), 1, 4).is_err());
    }

    #[test]
    fn split_json_round_trip() {
        let labels: Vec<usize> = (0..100).map(|i| i % 3).collect();
        let spec = make_split(&labels, Ratio::new(1, 10).unwrap(), 6, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        spec.save(&path).unwrap();
        assert_eq!(SplitSpec::load(&path).unwrap(), spec);
    }

    #[test]
    fn distinct_seeds() {
        let ids: Vec<usize> = (0..10).collect();
        let reg = CheckpointRegistry::new();
        let policy = InitPolicy::DistinctRandomSeeds {
            seed_a: 1,
            seed_b: 2,
        };
        let pair = init_model_pair(&policy, &mlp(), &ids, &reg).unwrap();
        assert_ne!(pair.model_a.param_snapshot(), pair.model_b.param_snapshot());
        assert!(probe_disagreements(&pair.model_a, &pair.model_b, 0).unwrap() > 0);
        assert_eq!(pair.subset_a, ids);

        let same = InitPolicy::DistinctRandomSeeds {
            seed_a: 1,
            seed_b: 1,
        };
        assert!(init_model_pair(&same, &mlp(), &ids, &reg).is_err());
    }

    #[test]
    fn pretrained_and_subsets() {
        let ids: Vec<usize> = (0..100).collect();
        let mut reg = CheckpointRegistry::new();
        reg.insert("warm-a", Network::new(mlp(), 10));
        reg.insert("warm-b", Network::new(mlp(), 11));
        let policy = InitPolicy::DistinctPretrainedWeights {
            weights_a: "warm-a".into(),
            weights_b: "warm-b".into(),
        };
        let pair = init_model_pair(&policy, &mlp(), &ids, &reg).unwrap();
        assert_eq!(pair.model_a.init_seed(), 10);
        let missing = InitPolicy::DistinctPretrainedWeights {
            weights_a: "warm-a".into(),
            weights_b: "nope".into(),
        };
        assert!(matches!(
            init_model_pair(&missing, &mlp(), &ids, &reg),
            Err(DmtError::Config(_))
        ));

        let policy = InitPolicy::DifferenceMaximizedSubsets {
            seed: 5,
            k: Some(50),
        };
        let pair = init_model_pair(&policy, &mlp(), &ids, &reg).unwrap();
        let a: HashSet<_> = pair.subset_a.iter().collect();
        assert!(pair.subset_b.iter().all(|x| !a.contains(x)));
        assert_eq!(pair.model_a.param_snapshot(), pair.model_b.param_snapshot());
    }

    #[test]
    fn seed_sequence_never_repeats() {
        let mut s = SeedSequence::new(7);
        let seeds: HashSet<u64> = (0..1000).map(|_| s.next_seed()).collect();
        assert_eq!(seeds.len(), 1000);
        let mut resumed = SeedSequence::at(7, 10);
        let mut fresh = SeedSequence::new(7);
        for _ in 0..10 {
            fresh.next_seed();
        }
        assert_eq!(resumed.next_seed(), fresh.next_seed());
    }
}
