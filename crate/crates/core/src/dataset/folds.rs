use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ParentArea;

pub const FOLDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitStrategy {
    /// Overlapping split: classes balanced by clip count; classes of the
    /// same parent area may land in different folds.
    #[serde(rename = "OS")]
    Overlapping,
    /// Non-overlapping split: whole parent areas go to one fold whenever
    /// there are at least four areas.
    #[serde(rename = "NS")]
    NonOverlapping,
}

impl std::str::FromStr for SplitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "OS" => Ok(SplitStrategy::Overlapping),
            "NS" => Ok(SplitStrategy::NonOverlapping),
            other => Err(Error::Config(format!(
                "unknown split strategy {other:?} (use OS or NS)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassStat {
    pub motion_class: usize,
    pub area: ParentArea,
    pub clips: usize,
}

/// Assignment of every motion class to one of four folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub strategy: SplitStrategy,
    pub seed: u64,
    /// motion class -> fold
    pub folds: BTreeMap<usize, usize>,
    /// Whether NS could keep every parent area inside a single fold.
    #[serde(default)]
    pub area_disjoint: bool,
}

impl FoldSplit {
    pub fn fold_of(&self, motion_class: usize) -> Option<usize> {
        self.folds.get(&motion_class).copied()
    }

    pub fn classes_in(&self, fold: usize) -> Vec<usize> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn classes_outside(&self, fold: usize) -> Vec<usize> {
        self.folds
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Assigns items to folds greedily: each goes to the fold with the fewest
/// classes so far, then the fewest clips.
fn greedy(items: &[(Vec<usize>, usize)]) -> Vec<usize> {
    let mut classes = [0usize; FOLDS];
    let mut clips = [0usize; FOLDS];
    items
        .iter()
        .map(|(members, n_clips)| {
            let f = (0..FOLDS)
                .min_by_key(|&f| (classes[f], clips[f], f))
                .unwrap();
            classes[f] += members.len();
            clips[f] += n_clips;
            f
        })
        .collect()
}

pub fn make_folds(stats: &[ClassStat], strategy: SplitStrategy, seed: u64) -> Result<FoldSplit> {
    if stats.len() < FOLDS {
        return Err(Error::Config(format!(
            "need at least {FOLDS} motion classes to build folds, got {}",
            stats.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = BTreeMap::new();
    let areas: BTreeSet<ParentArea> = stats.iter().map(|s| s.area).collect();

    let area_level = strategy == SplitStrategy::NonOverlapping && areas.len() >= FOLDS;
    if area_level {
        let mut groups: Vec<(ParentArea, Vec<usize>, usize)> = areas
            .iter()
            .map(|&a| {
                let members: Vec<&ClassStat> = stats.iter().filter(|s| s.area == a).collect();
                (
                    a,
                    members.iter().map(|s| s.motion_class).collect(),
                    members.iter().map(|s| s.clips).sum(),
                )
            })
            .collect();
        groups.shuffle(&mut rng);
        groups.sort_by_key(|g| std::cmp::Reverse(g.1.len()));
        let items: Vec<(Vec<usize>, usize)> = groups.iter().map(|g| (g.1.clone(), g.2)).collect();
        for (g, f) in groups.iter().zip(greedy(&items)) {
            for &c in &g.1 {
                folds.insert(c, f);
            }
        }
    } else if strategy == SplitStrategy::NonOverlapping {
        // Too few areas: keep each area as contiguous as possible by
        // cutting the area-sorted class list into four runs.
        let mut sorted: Vec<&ClassStat> = stats.iter().collect();
        sorted.shuffle(&mut rng);
        sorted.sort_by_key(|s| s.area);
        let n = sorted.len();
        for (i, s) in sorted.iter().enumerate() {
            folds.insert(s.motion_class, i * FOLDS / n);
        }
    } else {
        let mut sorted: Vec<&ClassStat> = stats.iter().collect();
        sorted.shuffle(&mut rng);
        sorted.sort_by_key(|s| std::cmp::Reverse(s.clips));
        let items: Vec<(Vec<usize>, usize)> = sorted
            .iter()
            .map(|s| (vec![s.motion_class], s.clips))
            .collect();
        for (s, f) in sorted.iter().zip(greedy(&items)) {
            folds.insert(s.motion_class, f);
        }
    }

    Ok(FoldSplit {
        strategy,
        seed,
        folds,
        area_disjoint: area_level,
    })
}
