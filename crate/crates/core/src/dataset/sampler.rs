use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetIndex, FoldSplit, SplitStrategy};
use crate::error::{Error, Result};
use crate::types::{Episode, MaskSequence, QueryObject, QuerySample, SupportShot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub ways: usize,
    pub shots: usize,
    pub support_frames: usize,
    pub query_frames: usize,
    /// Probability that the query contains none of the way classes.
    pub empty_rate: f64,
    pub max_retries: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            ways: 2,
            shots: 1,
            support_frames: 8,
            query_frames: 8,
            empty_rate: 0.2,
            max_retries: 64,
        }
    }
}

/// A clip and the frame indices taken from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRef {
    pub clip_id: String,
    pub frames: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WayPlan {
    pub motion_class: usize,
    pub shots: Vec<ClipRef>,
}

/// Which clips and frames make up an episode, without any pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodePlan {
    pub ways: Vec<WayPlan>,
    pub query: ClipRef,
    pub target_way: Option<usize>,
}

/// `want` frame indices out of `total` at a uniform stride. With an RNG the
/// start offset is random; without one it is 0.
pub fn subsample_frames<R: Rng>(
    total: usize,
    want: usize,
    rng: Option<&mut R>,
) -> Result<Vec<usize>> {
    if want == 0 || want > total {
        return Err(Error::Sampling(format!(
            "cannot take {want} frames from a {total}-frame clip"
        )));
    }
    let stride = (total / want).max(1);
    let span = (want - 1) * stride + 1;
    let start = match rng {
        Some(r) => r.gen_range(0..=total - span),
        None => 0,
    };
    Ok((0..want).map(|i| start + i * stride).collect())
}

/// The clips an episode may draw from, per motion class.
#[derive(Debug, Clone, Default)]
pub struct ClipPools {
    /// Classes ways are drawn from.
    pub classes: Vec<usize>,
    support: BTreeMap<usize, Vec<String>>,
    query: BTreeMap<usize, Vec<String>>,
    /// Candidate queries for empty-target episodes, in preference order.
    empty_preferred: Vec<String>,
    empty_fallback: Vec<String>,
    clip_classes: BTreeMap<String, Vec<usize>>,
}

impl ClipPools {
    /// Pools from explicit predicates over clips.
    pub fn from_predicates(
        index: &DatasetIndex,
        classes: Vec<usize>,
        is_support: impl Fn(&super::ClipEntry) -> bool,
        is_query: impl Fn(&super::ClipEntry) -> bool,
    ) -> Self {
        let allowed: HashSet<usize> = classes.iter().copied().collect();
        let mut pools = ClipPools {
            classes,
            ..Default::default()
        };
        for (id, entry) in &index.clips {
            let cls: Vec<usize> = entry.objects.iter().map(|(_, c)| c.motion_class).collect();
            let sup = is_support(entry);
            let qry = is_query(entry);
            for &c in cls.iter().filter(|c| allowed.contains(c)) {
                if sup {
                    pools.support.entry(c).or_default().push(id.clone());
                }
                if qry {
                    pools.query.entry(c).or_default().push(id.clone());
                }
            }
            if qry {
                if cls.iter().all(|c| allowed.contains(c)) {
                    pools.empty_preferred.push(id.clone());
                } else {
                    pools.empty_fallback.push(id.clone());
                }
            }
            pools.clip_classes.insert(id.clone(), cls);
        }
        pools
    }

    /// Train phase: classes outside the test fold; test phase: classes of
    /// the test fold.
    pub fn from_fold(
        index: &DatasetIndex,
        split: &FoldSplit,
        test_fold: usize,
        phase: Phase,
    ) -> Self {
        let classes = match phase {
            Phase::Train => split.classes_outside(test_fold),
            Phase::Test => split.classes_in(test_fold),
        };
        Self::from_predicates(index, classes, |_| true, |_| true)
    }

    /// Held-out (object, motion) combinations: training never sees a clip
    /// whose primary object is in a held-out cell; test queries come only
    /// from such clips while supports keep coming from the other cells.
    pub fn from_holdout(index: &DatasetIndex, holdout: &[(usize, usize)], phase: Phase) -> Self {
        let held = |e: &super::ClipEntry| {
            e.primary()
                .is_some_and(|c| holdout.contains(&(c.object_class, c.motion_class)))
        };
        match phase {
            Phase::Train => {
                let classes = (0..index.motion_classes()).collect();
                Self::from_predicates(index, classes, |e| !held(e), |e| !held(e))
            }
            Phase::Test => {
                // ways range over every motion so that empty queries exist;
                // the query itself is always a held-out clip
                let all = (0..index.motion_classes()).collect();
                let mut pools = Self::from_predicates(index, all, |e| !held(e), held);
                // a non-empty target is always the held-out object itself
                for (class, clips) in pools.query.iter_mut() {
                    clips.retain(|id| {
                        index.clips[id]
                            .primary()
                            .is_some_and(|c| c.motion_class == *class)
                    });
                }
                pools
            }
        }
    }

    fn eligible(&self, shots: usize) -> Vec<usize> {
        self.classes
            .iter()
            .copied()
            .filter(|c| self.support.get(c).map_or(0, Vec::len) >= shots)
            .collect()
    }

    fn has_any(&self, clip: &str, classes: &[usize]) -> bool {
        self.clip_classes
            .get(clip)
            .is_some_and(|cls| cls.iter().any(|c| classes.contains(c)))
    }

    /// Draws clip ids and frame indices for one episode.
    pub fn plan<R: Rng>(
        &self,
        index: &DatasetIndex,
        cfg: &EpisodeConfig,
        phase: Phase,
        rng: &mut R,
    ) -> Result<EpisodePlan> {
        let eligible = self.eligible(cfg.shots);
        if eligible.len() < cfg.ways {
            return Err(Error::Sampling(format!(
                "only {} classes have at least {} clips, need {} ways",
                eligible.len(),
                cfg.shots,
                cfg.ways
            )));
        }
        let empty = rng.gen_bool(cfg.empty_rate.clamp(0.0, 1.0));
        for _ in 0..cfg.max_retries.max(1) {
            let classes: Vec<usize> = eligible.choose_multiple(rng, cfg.ways).copied().collect();

            let (query_id, target_way) = if empty {
                let pick = |pool: &'_ [String]| -> Vec<String> {
                    pool.iter()
                        .filter(|id| !self.has_any(id, &classes))
                        .cloned()
                        .collect()
                };
                let preferred = pick(&self.empty_preferred);
                let candidates = if preferred.is_empty() {
                    pick(&self.empty_fallback)
                } else {
                    preferred
                };
                match candidates.choose(rng) {
                    Some(id) => (id.clone(), None),
                    None => continue,
                }
            } else {
                let way = rng.gen_range(0..cfg.ways);
                match self.query.get(&classes[way]).and_then(|p| p.choose(rng)) {
                    Some(id) => (id.clone(), Some(way)),
                    None => continue,
                }
            };

            let mut used: HashSet<&str> = HashSet::from([query_id.as_str()]);
            let mut ways = Vec::with_capacity(cfg.ways);
            let mut ok = true;
            for &c in &classes {
                let pool: Vec<&String> = self.support[&c]
                    .iter()
                    .filter(|id| !used.contains(id.as_str()))
                    .collect();
                if pool.len() < cfg.shots {
                    ok = false;
                    break;
                }
                let chosen: Vec<&String> = pool.choose_multiple(rng, cfg.shots).copied().collect();
                let mut shots = Vec::with_capacity(cfg.shots);
                for id in chosen {
                    used.insert(id.as_str());
                    shots.push(ClipRef {
                        clip_id: id.clone(),
                        frames: self.frames_for(index, id, cfg.support_frames, phase, rng)?,
                    });
                }
                ways.push(WayPlan {
                    motion_class: c,
                    shots,
                });
            }
            if !ok {
                continue;
            }
            let frames = self.frames_for(index, &query_id, cfg.query_frames, phase, rng)?;
            return Ok(EpisodePlan {
                ways,
                query: ClipRef {
                    clip_id: query_id,
                    frames,
                },
                target_way,
            });
        }
        Err(Error::Sampling(format!(
            "no valid episode after {} attempts (empty target: {empty})",
            cfg.max_retries
        )))
    }

    fn frames_for<R: Rng>(
        &self,
        index: &DatasetIndex,
        id: &str,
        want: usize,
        phase: Phase,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let total = index.clips[id].frame_count();
        match phase {
            Phase::Train => subsample_frames(total, want, Some(rng)),
            Phase::Test => subsample_frames::<R>(total, want, None),
        }
    }
}

impl EpisodePlan {
    /// Loads pixels and masks for the plan.
    pub fn materialize(&self, index: &DatasetIndex) -> Result<Episode> {
        let mut support = Vec::with_capacity(self.ways.len());
        for way in &self.ways {
            let mut shots = Vec::with_capacity(way.shots.len());
            for r in &way.shots {
                let loaded = index.load_clip(&r.clip_id)?;
                let entry = &index.clips[&r.clip_id];
                let clip = loaded.clip.select_frames(&r.frames);
                let mut mask: Option<MaskSequence> = None;
                let mut category = None;
                for ((_, cat), m) in entry.objects.iter().zip(&loaded.masks) {
                    if cat.motion_class != way.motion_class {
                        continue;
                    }
                    let m = m.select_frames(&r.frames);
                    mask = Some(match mask {
                        Some(acc) => acc.union(&m)?,
                        None => m,
                    });
                    category.get_or_insert(*cat);
                }
                let (mask, category) = mask.zip(category).ok_or_else(|| {
                    Error::Sampling(format!(
                        "{} has no object of class {}",
                        r.clip_id, way.motion_class
                    ))
                })?;
                shots.push(SupportShot {
                    clip,
                    mask,
                    category,
                });
            }
            support.push(shots);
        }
        let loaded = index.load_clip(&self.query.clip_id)?;
        let entry = &index.clips[&self.query.clip_id];
        let objects = entry
            .objects
            .iter()
            .zip(&loaded.masks)
            .map(|((_, cat), m)| QueryObject {
                mask: m.select_frames(&self.query.frames),
                category: *cat,
            })
            .collect();
        Ok(Episode {
            support,
            query: QuerySample {
                clip: loaded.clip.select_frames(&self.query.frames),
                objects,
            },
            target_way: self.target_way,
        })
    }
}

/// Which clips and classes a run trains and tests on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Protocol {
    /// Four-fold class split; `test_fold` is held out for testing.
    Folds {
        strategy: SplitStrategy,
        test_fold: usize,
        seed: u64,
    },
    /// Held-out `(object_class, motion_class)` cells of a synthetic dataset.
    Holdout { cells: Vec<(usize, usize)> },
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::Folds {
            strategy: SplitStrategy::Overlapping,
            test_fold: 0,
            seed: 0,
        }
    }
}

impl Protocol {
    pub fn pools(&self, index: &DatasetIndex, phase: Phase) -> Result<ClipPools> {
        match self {
            Protocol::Folds {
                strategy,
                test_fold,
                seed,
            } => {
                if *test_fold >= super::folds::FOLDS {
                    return Err(Error::Config(format!("test fold {test_fold} out of range 0..4")));
                }
                let split = super::make_folds(&index.class_stats(), *strategy, *seed)?;
                Ok(ClipPools::from_fold(index, &split, *test_fold, phase))
            }
            Protocol::Holdout { cells } => {
                if cells.is_empty() {
                    return Err(Error::Config("hold-out protocol without held-out cells".into()));
                }
                Ok(ClipPools::from_holdout(index, cells, phase))
            }
        }
    }

    /// Fold index for result tables; hold-out runs report as fold 0.
    pub fn fold(&self) -> usize {
        match self {
            Protocol::Folds { test_fold, .. } => *test_fold,
            Protocol::Holdout { .. } => 0,
        }
    }
}

/// Samples one episode under a fold split.
pub fn sample_episode<R: Rng>(
    index: &DatasetIndex,
    split: &FoldSplit,
    test_fold: usize,
    phase: Phase,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<Episode> {
    ClipPools::from_fold(index, split, test_fold, phase)
        .plan(index, cfg, phase, rng)?
        .materialize(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_synthetic_dataset, load_index, make_folds, SplitStrategy};
    use crate::synth::SyntheticConfig;
    use crate::types::validate_episode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(motions: usize) -> (tempfile::TempDir, DatasetIndex) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            motion_classes: motions,
            object_classes: 3,
            clips_per_cell: 2,
            frames: 6,
            height: 64,
            width: 64,
            ..SyntheticConfig::default()
        };
        build_synthetic_dataset(&cfg, &dir.path().join("ds"), false).unwrap();
        let index = load_index(dir.path().join("ds")).unwrap();
        (dir, index)
    }

    #[test]
    fn frame_subsampling_is_uniform() {
        assert_eq!(
            subsample_frames::<ChaCha8Rng>(8, 4, None).unwrap(),
            vec![0, 2, 4, 6]
        );
        assert_eq!(
            subsample_frames::<ChaCha8Rng>(8, 8, None).unwrap(),
            (0..8).collect::<Vec<_>>()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let f = subsample_frames(9, 4, Some(&mut rng)).unwrap();
            assert!(f[0] <= 2 && f.windows(2).all(|w| w[1] - w[0] == 2));
        }
        assert!(subsample_frames::<ChaCha8Rng>(3, 4, None).is_err());
    }

    #[test]
    fn episodes_have_requested_ways_and_are_valid() {
        let (_dir, index) = dataset(8);
        let split = make_folds(&index.class_stats(), SplitStrategy::Overlapping, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ways, phase) in [(2, Phase::Train), (5, Phase::Train), (2, Phase::Test)] {
            let cfg = EpisodeConfig {
                ways,
                support_frames: 4,
                query_frames: 4,
                ..EpisodeConfig::default()
            };
            for _ in 0..5 {
                let ep = sample_episode(&index, &split, 0, phase, &cfg, &mut rng).unwrap();
                assert_eq!(ep.support.len(), ways);
                assert_eq!(ep.query.clip.frame_count(), 4);
                assert!(
                    validate_episode(&ep).is_empty(),
                    "{:?}",
                    validate_episode(&ep)
                );
            }
        }
    }

    #[test]
    fn full_empty_rate_gives_empty_targets() {
        let (_dir, index) = dataset(8);
        let split = make_folds(&index.class_stats(), SplitStrategy::Overlapping, 0).unwrap();
        let pools = ClipPools::from_fold(&index, &split, 1, Phase::Train);
        let cfg = EpisodeConfig {
            empty_rate: 1.0,
            support_frames: 4,
            query_frames: 4,
            ..EpisodeConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let plan = pools.plan(&index, &cfg, Phase::Train, &mut rng).unwrap();
            assert_eq!(plan.target_way, None);
            let ep = plan.materialize(&index).unwrap();
            assert!(validate_episode(&ep).is_empty());
        }
    }

    #[test]
    fn test_phase_is_deterministic_in_frames() {
        let (_dir, index) = dataset(4);
        let split = make_folds(&index.class_stats(), SplitStrategy::Overlapping, 0).unwrap();
        let pools = ClipPools::from_fold(&index, &split, 0, Phase::Test);
        let cfg = EpisodeConfig {
            ways: 1,
            support_frames: 3,
            query_frames: 3,
            ..EpisodeConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = pools.plan(&index, &cfg, Phase::Test, &mut rng).unwrap();
        assert_eq!(plan.query.frames, vec![0, 2, 4]);
    }

    #[test]
    fn too_many_ways_is_an_error() {
        let (_dir, index) = dataset(4);
        let split = make_folds(&index.class_stats(), SplitStrategy::Overlapping, 0).unwrap();
        let cfg = EpisodeConfig {
            ways: 2,
            ..EpisodeConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // test fold of 4 classes holds exactly one class
        assert!(sample_episode(&index, &split, 0, Phase::Test, &cfg, &mut rng).is_err());
    }

    #[test]
    fn protocol_round_trips_and_builds_pools() {
        let (_dir, index) = dataset(4);
        for p in [
            Protocol::default(),
            Protocol::Holdout { cells: vec![(0, 1)] },
        ] {
            let back: Protocol = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
            assert_eq!(back, p);
            let pools = p.pools(&index, Phase::Train).unwrap();
            assert!(!pools.classes.is_empty());
        }
        assert!(Protocol::Holdout { cells: vec![] }.pools(&index, Phase::Test).is_err());
        let bad = Protocol::Folds { strategy: SplitStrategy::Overlapping, test_fold: 4, seed: 0 };
        assert!(bad.pools(&index, Phase::Test).is_err());
    }
}
