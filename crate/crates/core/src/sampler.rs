//! Dataset-level class balancing: every class contributes the same number of
//! drawn samples per epoch, duplicating samples of rare classes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::DatasetIndex;
use crate::error::{Error, Result};
use crate::model::{ClassId, PerClass, NUM_CLASSES};

/// Sample ids containing each class, in index order.
pub fn class_sample_lists(index: &DatasetIndex) -> PerClass<Vec<String>> {
    let mut lists: PerClass<Vec<String>> = Default::default();
    for entry in index.entries() {
        for class in ClassId::ALL {
            if entry.contains(class) {
                lists[class.index()].push(entry.sample_id.clone());
            }
        }
    }
    lists
}

/// One class-balanced epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPlan {
    /// Shuffled sample ids; duplicates allowed.
    pub sample_ids: Vec<String>,
    /// Number of ids drawn on behalf of each class.
    pub drawn: PerClass<usize>,
    /// Per-class draw target.
    pub target: usize,
    pub seed: u64,
}

impl EpochPlan {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    /// Number of plan entries whose sample contains each class.
    pub fn appearances(&self, index: &DatasetIndex) -> PerClass<usize> {
        let lookup: std::collections::HashMap<&str, _> = index
            .entries()
            .iter()
            .map(|e| (e.sample_id.as_str(), e))
            .collect();
        let mut out = [0; NUM_CLASSES];
        for id in &self.sample_ids {
            if let Some(e) = lookup.get(id.as_str()) {
                for c in ClassId::ALL {
                    out[c.index()] += e.contains(c) as usize;
                }
            }
        }
        out
    }

    /// One sample id per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for id in &self.sample_ids {
            writeln!(w, "{id}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_ids(path: &Path) -> Result<Vec<String>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_owned)
            .collect())
    }
}

fn class_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-class target `floor(fraction * sum of class list lengths)`. Each class
/// draws exactly that many of its samples, without replacement when it has
/// enough and with replacement otherwise. The concatenated draws are then
/// shuffled. Each class uses its own RNG stream derived from `seed`, so the
/// plan does not depend on the thread count.
pub fn build_epoch(index: &DatasetIndex, fraction: f64, seed: u64) -> Result<EpochPlan> {
    build_epoch_for_classes(index, &ClassId::ALL, fraction, seed)
}

/// [`build_epoch`] restricted to a subset of classes; classes outside
/// `classes` neither draw samples nor count toward the target.
pub fn build_epoch_for_classes(
    index: &DatasetIndex,
    classes: &[ClassId],
    fraction: f64,
    seed: u64,
) -> Result<EpochPlan> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if index.is_empty() {
        return Err(Error::InvalidArgument("cannot sample from an empty index".into()));
    }
    let mut lists = class_sample_lists(index);
    for c in ClassId::ALL {
        if !classes.contains(&c) {
            lists[c.index()].clear();
        }
    }
    let total: usize = lists.iter().map(Vec::len).sum();
    let target = (fraction * total as f64).floor() as usize;

    let empty: Vec<ClassId> = ClassId::ALL
        .into_iter()
        .filter(|c| classes.contains(c) && lists[c.index()].is_empty())
        .collect();
    if target > 0 && !empty.is_empty() {
        return Err(Error::EmptyClasses(empty));
    }

    let draws: Vec<Vec<&str>> = ClassId::ALL
        .par_iter()
        .map(|class| {
            let list = &lists[class.index()];
            if list.is_empty() {
                return Vec::new();
            }
            let mut rng = class_rng(seed, class.index() as u64 + 1);
            if target <= list.len() {
                index::sample(&mut rng, list.len(), target)
                    .into_iter()
                    .map(|i| list[i].as_str())
                    .collect()
            } else {
                (0..target)
                    .map(|_| list[rng.random_range(0..list.len())].as_str())
                    .collect()
            }
        })
        .collect();

    let mut drawn = [0; NUM_CLASSES];
    for (d, v) in drawn.iter_mut().zip(&draws) {
        *d = v.len();
    }
    let mut sample_ids: Vec<String> = draws.into_iter().flatten().map(str::to_owned).collect();
    sample_ids.shuffle(&mut class_rng(seed, 0));

    Ok(EpochPlan {
        sample_ids,
        drawn,
        target,
        seed,
    })
}
