//! Speaker-disjoint partitioning: every clip follows its speaker, so no
//! speaker contributes to more than one of train/val/test.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::ManifestEntry;
use super::TrainError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl SplitSpec {
    pub fn partition_of(&self, speaker_id: &str) -> Option<Partition> {
        if self.train.iter().any(|s| s == speaker_id) {
            Some(Partition::Train)
        } else if self.val.iter().any(|s| s == speaker_id) {
            Some(Partition::Val)
        } else if self.test.iter().any(|s| s == speaker_id) {
            Some(Partition::Test)
        } else {
            None
        }
    }

    /// Clips of `entries` whose speaker belongs to the given partition.
    pub fn select<'a>(&self, entries: &'a [ManifestEntry], part: Partition) -> Vec<&'a ManifestEntry> {
        entries.iter().filter(|e| self.partition_of(&e.speaker_id) == Some(part)).collect()
    }
}

/// Shuffle the distinct speakers with a seeded PRNG; the first `n_test` go
/// to test, the next `n_val` to val, the rest to train.
pub fn speaker_split(
    entries: &[ManifestEntry],
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<SplitSpec, TrainError> {
    // Sort before shuffling so the split depends only on the speaker set.
    let speakers: BTreeSet<&str> = entries.iter().map(|e| e.speaker_id.as_str()).collect();
    let mut speakers: Vec<String> = speakers.into_iter().map(String::from).collect();
    if speakers.len() < n_val + n_test + 1 {
        return Err(TrainError::TooFewSpeakers { have: speakers.len(), need: n_val + n_test + 1 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    speakers.shuffle(&mut rng);
    let test = speakers[..n_test].to_vec();
    let val = speakers[n_test..n_test + n_val].to_vec();
    let train = speakers[n_test + n_val..].to_vec();
    Ok(SplitSpec { train, val, test, seed })
}

/// CSV with header `speaker_id,partition`; the seed rides in a comment line.
pub fn write_split(path: &Path, split: &SplitSpec) -> Result<(), TrainError> {
    let mut text = format!("# seed={}\nspeaker_id,partition\n", split.seed);
    for (list, name) in [(&split.test, "test"), (&split.val, "val"), (&split.train, "train")] {
        for s in list.iter() {
            text.push_str(s);
            text.push(',');
            text.push_str(name);
            text.push('\n');
        }
    }
    std::fs::write(path, text).map_err(|e| TrainError::Io(path.display().to_string(), e))
}

pub fn read_split(path: &Path) -> Result<SplitSpec, TrainError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| TrainError::Io(path.display().to_string(), e))?;
    let mut split = SplitSpec { train: Vec::new(), val: Vec::new(), test: Vec::new(), seed: 0 };
    let mut saw_header = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(seed) = rest.trim().strip_prefix("seed=") {
                split.seed = seed.parse().unwrap_or(0);
            }
            continue;
        }
        if !saw_header {
            if line != "speaker_id,partition" {
                return Err(TrainError::Manifest(format!(
                    "{}: bad split header {line:?}",
                    path.display()
                )));
            }
            saw_header = true;
            continue;
        }
        let (speaker, part) = line
            .split_once(',')
            .ok_or_else(|| TrainError::Manifest(format!("line {}: bad split row", i + 1)))?;
        match part.trim() {
            "train" => split.train.push(speaker.trim().to_string()),
            "val" => split.val.push(speaker.trim().to_string()),
            "test" => split.test.push(speaker.trim().to_string()),
            other => {
                return Err(TrainError::Manifest(format!("line {}: bad partition {other:?}", i + 1)))
            }
        }
    }
    Ok(split)
}
