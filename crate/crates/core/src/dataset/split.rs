use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetIndex, Label};

/// `train:val` proportion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: u32,
    pub val: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self { train: 15, val: 1 }
    }
}

/// Per-class validation counts: proportional allocation of the overall
/// target by largest remainder, with at least one per class holding two or
/// more samples whenever the target leaves room for that.
fn allocate(target: usize, class_sizes: &[usize]) -> Vec<usize> {
    let n: usize = class_sizes.iter().sum();
    let mut alloc: Vec<usize> = class_sizes.iter().map(|&c| target * c / n).collect();
    let mut rems: Vec<(usize, usize)> = class_sizes
        .iter()
        .enumerate()
        .map(|(i, &c)| (target * c % n, i))
        .collect();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = target - alloc.iter().sum::<usize>();
    for &(_, i) in &rems {
        if left == 0 {
            break;
        }
        alloc[i] += 1;
        left -= 1;
    }
    let eligible: Vec<usize> = (0..class_sizes.len()).filter(|&i| class_sizes[i] >= 2).collect();
    if target >= eligible.len() {
        for &i in &eligible {
            if alloc[i] == 0 {
                let donor = (0..alloc.len())
                    .filter(|&j| alloc[j] > 1)
                    .max_by_key(|&j| (alloc[j], std::cmp::Reverse(j)));
                if let Some(d) = donor {
                    alloc[d] -= 1;
                    alloc[i] += 1;
                }
            }
        }
    }
    alloc
}

/// Stratified, seeded train/validation partition.
///
/// The validation side receives `round(n * val / (train + val))` samples.
/// Both outputs keep the input order.
pub fn split_train_val(
    index: &DatasetIndex,
    ratio: SplitRatio,
    seed: u64,
) -> Result<(DatasetIndex, DatasetIndex), DatasetError> {
    if index.is_empty() {
        return Err(DatasetError::EmptyIndex);
    }
    if ratio.train == 0 || ratio.val == 0 {
        return Err(DatasetError::InvalidSpec(format!(
            "split ratio {}:{} must be positive",
            ratio.train, ratio.val
        )));
    }
    let n = index.len();
    let target = (n as f64 * ratio.val as f64 / (ratio.train + ratio.val) as f64).round() as usize;
    let classes = [Label::Attack, Label::Live];
    let members: Vec<Vec<usize>> = classes
        .iter()
        .map(|&l| (0..n).filter(|&i| index.samples()[i].label == l).collect())
        .collect();
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let alloc = allocate(target, &sizes);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; n];
    for (mut ids, take) in members.into_iter().zip(alloc) {
        ids.shuffle(&mut rng);
        for &i in ids.iter().take(take) {
            is_val[i] = true;
        }
    }
    let pick = |want: bool| {
        index
            .samples()
            .iter()
            .zip(&is_val)
            .filter(|(_, &v)| v == want)
            .map(|(s, _)| s.clone())
            .collect::<Vec<_>>()
    };
    Ok((DatasetIndex::new(pick(false))?, DatasetIndex::new(pick(true))?))
}
