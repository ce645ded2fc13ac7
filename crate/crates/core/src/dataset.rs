//! Dataset configurations mixing annotation-, GAN-, and literature-sourced
//! masks into train/val/test manifests.
//!
//! The five named configs reproduce fixed counts: anno 66/12/18,
//! gan 350/50/100, gan-anno 350/50/100 (anno:gan source ratio 19:81,
//! rounded toward anno), lit 350/50/100, lit-gan-anno 766/112/218. Every
//! config shares the same target test set: the 18-mask anno test split,
//! whose shuffle depends only on the master seed, never on the config.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::Rng64;

/// Which pool a sample comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Anno,
    Gan,
    Lit,
}

impl MaskSource {
    pub fn name(self) -> &'static str {
        match self {
            MaskSource::Anno => "anno",
            MaskSource::Gan => "gan",
            MaskSource::Lit => "lit",
        }
    }
}

/// Reference to one mask in its source pool (original pool index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub struct SampleRef {
    pub source: MaskSource,
    pub index: usize,
}

/// The five named dataset configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetConfigName {
    Anno,
    Gan,
    GanAnno,
    Lit,
    LitGanAnno,
}

impl DatasetConfigName {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "anno" => Ok(Self::Anno),
            "gan" => Ok(Self::Gan),
            "gan-anno" => Ok(Self::GanAnno),
            "lit" => Ok(Self::Lit),
            "lit-gan-anno" => Ok(Self::LitGanAnno),
            other => Err(CoreError::UnknownConfig(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Anno => "anno",
            Self::Gan => "gan",
            Self::GanAnno => "gan-anno",
            Self::Lit => "lit",
            Self::LitGanAnno => "lit-gan-anno",
        }
    }

    pub fn all() -> [Self; 5] {
        [Self::Anno, Self::Gan, Self::GanAnno, Self::Lit, Self::LitGanAnno]
    }
}

/// Available mask counts per pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSizes {
    pub anno: usize,
    pub gan: usize,
    pub lit: usize,
}

/// Split manifest of one dataset configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: String,
    pub seed: u64,
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
    /// The shared annotation-based test set all configs are judged on.
    pub target_test: Vec<SampleRef>,
    /// Per-source sample totals across train+val+test.
    pub source_mix: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn splits_disjoint(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .all(|r| seen.insert(*r))
    }
}

/// Generic 70/10/20 split of `n` items: round(0.7 n) train, round(0.1 n)
/// val, remainder test.
pub fn split_70_10_20(n: usize) -> (usize, usize, usize) {
    let train = (0.7 * n as f64).round() as usize;
    let val = (0.1 * n as f64).round() as usize;
    let test = n - train - val;
    (train, val, test)
}

fn require(pool: &str, available: usize, needed: usize) -> Result<()> {
    if available < needed {
        return Err(CoreError::InsufficientPool {
            pool: pool.to_string(),
            available,
            needed,
        });
    }
    Ok(())
}

fn shuffled_indices(n: usize, seed: u64, label: &str) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = Rng64::stream_named(seed, label);
    rng.shuffle(&mut idx);
    idx
}

fn refs(source: MaskSource, indices: &[usize]) -> Vec<SampleRef> {
    indices.iter().map(|&index| SampleRef { source, index }).collect()
}

/// Rows of Table-style allocations per source: (train, val, test).
type Alloc = (usize, usize, usize);

/// Build the manifest of a named config from pool sizes and a master seed.
pub fn build_dataset(
    config: DatasetConfigName,
    pools: PoolSizes,
    seed: u64,
) -> Result<DatasetManifest> {
    // Every config carries the shared anno target test, so the anno pool
    // must cover the full 78 + 18 partition.
    require("anno", pools.anno, 96)?;
    let anno_order = shuffled_indices(pools.anno, seed, "anno-order");
    let anno_rest = &anno_order[..78]; // never part of the target test
    let anno_target = &anno_order[78..96];

    let gan_needed = match config {
        DatasetConfigName::Gan | DatasetConfigName::LitGanAnno => 500,
        DatasetConfigName::GanAnno => 404,
        _ => 0,
    };
    let lit_needed = match config {
        DatasetConfigName::Lit | DatasetConfigName::LitGanAnno => 500,
        _ => 0,
    };
    require("gan", pools.gan, gan_needed)?;
    require("lit", pools.lit, lit_needed)?;
    let gan_order = shuffled_indices(pools.gan, seed, "gan-order");
    let lit_order = shuffled_indices(pools.lit, seed, "lit-order");

    // anno allocation: (train, val) drawn from the 78 non-target masks;
    // test takes leftovers of the 78 first, then the 18 target masks.
    let take_anno = |alloc: Alloc| -> (Vec<SampleRef>, Vec<SampleRef>, Vec<SampleRef>) {
        let (tr, va, te) = alloc;
        assert!(tr + va <= 78, "anno alloc {alloc:?}");
        assert_eq!((78 - tr - va) + 18, te, "anno alloc must consume the pool: {alloc:?}");
        let train = refs(MaskSource::Anno, &anno_rest[..tr]);
        let val = refs(MaskSource::Anno, &anno_rest[tr..tr + va]);
        let mut test_idx: Vec<usize> = anno_rest[tr + va..].to_vec();
        test_idx.extend_from_slice(anno_target);
        let test = refs(MaskSource::Anno, &test_idx);
        (train, val, test)
    };
    let take_pool = |order: &[usize], source: MaskSource, alloc: Alloc| {
        let (tr, va, te) = alloc;
        (
            refs(source, &order[..tr]),
            refs(source, &order[tr..tr + va]),
            refs(source, &order[tr + va..tr + va + te]),
        )
    };

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    let mut push = |(tr, va, te): (Vec<SampleRef>, Vec<SampleRef>, Vec<SampleRef>)| {
        train.extend(tr);
        val.extend(va);
        test.extend(te);
    };

    match config {
        DatasetConfigName::Anno => {
            push(take_anno((66, 12, 18)));
        }
        DatasetConfigName::Gan => {
            push(take_pool(&gan_order, MaskSource::Gan, (350, 50, 100)));
        }
        DatasetConfigName::GanAnno => {
            // 19:81 source ratio applied per split, rounded toward anno:
            // 350 -> 67 + 283, 50 -> 10 + 40, 100 -> 19 + 81.
            push(take_anno((67, 10, 19)));
            push(take_pool(&gan_order, MaskSource::Gan, (283, 40, 81)));
        }
        DatasetConfigName::Lit => {
            push(take_pool(&lit_order, MaskSource::Lit, (350, 50, 100)));
        }
        DatasetConfigName::LitGanAnno => {
            push(take_anno((66, 12, 18)));
            push(take_pool(&gan_order, MaskSource::Gan, (350, 50, 100)));
            push(take_pool(&lit_order, MaskSource::Lit, (350, 50, 100)));
        }
    }

    let mut source_mix = BTreeMap::new();
    for r in train.iter().chain(&val).chain(&test) {
        *source_mix.entry(r.source.name().to_string()).or_insert(0) += 1;
    }

    let manifest = DatasetManifest {
        config: config.name().to_string(),
        seed,
        train,
        val,
        test,
        target_test: refs(MaskSource::Anno, anno_target),
        source_mix,
    };
    debug_assert!(manifest.splits_disjoint());
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    const POOLS: PoolSizes = PoolSizes { anno: 96, gan: 500, lit: 500 };

    fn counts(m: &DatasetManifest) -> (usize, usize, usize) {
        (m.train.len(), m.val.len(), m.test.len())
    }

    #[test]
    fn named_config_counts() {
        let cases = [
            (DatasetConfigName::Anno, (66, 12, 18)),
            (DatasetConfigName::Gan, (350, 50, 100)),
            (DatasetConfigName::GanAnno, (350, 50, 100)),
            (DatasetConfigName::Lit, (350, 50, 100)),
            (DatasetConfigName::LitGanAnno, (766, 112, 218)),
        ];
        for (config, expect) in cases {
            let m = build_dataset(config, POOLS, 1).unwrap();
            assert_eq!(counts(&m), expect, "{config:?}");
            assert!(m.splits_disjoint(), "{config:?}");
            assert_eq!(m.target_test.len(), 18);
        }
    }

    #[test]
    fn gan_anno_source_ratio() {
        let m = build_dataset(DatasetConfigName::GanAnno, POOLS, 3).unwrap();
        assert_eq!(m.source_mix["anno"], 96);
        assert_eq!(m.source_mix["gan"], 404);
        let anno_train = m.train.iter().filter(|r| r.source == MaskSource::Anno).count();
        assert_eq!(anno_train, 67);
        let anno_val = m.val.iter().filter(|r| r.source == MaskSource::Anno).count();
        assert_eq!(anno_val, 10);
        let anno_test = m.test.iter().filter(|r| r.source == MaskSource::Anno).count();
        assert_eq!(anno_test, 19);
    }

    #[test]
    fn target_test_shared_across_configs() {
        let seed = 11;
        let reference = build_dataset(DatasetConfigName::Anno, POOLS, seed).unwrap();
        assert_eq!(reference.test, reference.target_test);
        for config in DatasetConfigName::all() {
            let m = build_dataset(config, POOLS, seed).unwrap();
            assert_eq!(m.target_test, reference.target_test, "{config:?}");
        }
    }

    #[test]
    fn training_never_touches_target_test() {
        for config in DatasetConfigName::all() {
            let m = build_dataset(config, POOLS, 7).unwrap();
            let target: std::collections::HashSet<_> = m.target_test.iter().collect();
            for r in m.train.iter().chain(&m.val) {
                assert!(!target.contains(r), "{config:?} leaks target test into training");
            }
        }
    }

    #[test]
    fn insufficient_pool_is_an_error() {
        let small = PoolSizes { anno: 96, gan: 200, lit: 0 };
        assert!(matches!(
            build_dataset(DatasetConfigName::Gan, small, 1),
            Err(CoreError::InsufficientPool { .. })
        ));
        let tiny_anno = PoolSizes { anno: 50, gan: 500, lit: 500 };
        assert!(build_dataset(DatasetConfigName::Anno, tiny_anno, 1).is_err());
    }

    #[test]
    fn manifest_is_deterministic_in_seed() {
        let a = build_dataset(DatasetConfigName::LitGanAnno, POOLS, 5).unwrap();
        let b = build_dataset(DatasetConfigName::LitGanAnno, POOLS, 5).unwrap();
        let c = build_dataset(DatasetConfigName::LitGanAnno, POOLS, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn generic_split_fractions() {
        for n in [10usize, 96, 500, 1096, 33] {
            let (tr, va, te) = split_70_10_20(n);
            assert_eq!(tr + va + te, n);
            assert!((tr as f64 - 0.7 * n as f64).abs() <= 1.0);
            assert!((va as f64 - 0.1 * n as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn unknown_config_rejected() {
        assert!(DatasetConfigName::parse("banana").is_err());
        assert_eq!(
            DatasetConfigName::parse("lit-gan-anno").unwrap(),
            DatasetConfigName::LitGanAnno
        );
    }
}
