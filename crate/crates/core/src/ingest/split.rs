use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, GazeSession, SplitTag};
use crate::error::{Error, Result};

/// Sizes of the (train, val, test) parts for `n` items.
///
/// Validation and test sizes are `n * fraction` rounded to nearest with exact
/// halves rounded down; whatever remains goes to train.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<(usize, usize, usize)> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::Config(format!("split fractions {fractions:?} must be nonnegative")));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
    }
    let part = |f: f64| ((n as f64 * f) - 0.5).ceil().max(0.0) as usize;
    let val = part(fractions[1]).min(n);
    let test = part(fractions[2]).min(n - val);
    Ok((n - val - test, val, test))
}

/// Partitions a dataset into train/val/test with a seeded shuffle.
///
/// Sessions are ordered by case id before shuffling, so the result does not
/// depend on the input order.
pub fn split_dataset(
    dataset: &Dataset,
    seed: u64,
    fractions: [f64; 3],
) -> Result<(Dataset, Dataset, Dataset)> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let (n_train, n_val, _) = split_sizes(dataset.len(), fractions)?;
    let mut sessions: Vec<GazeSession> = dataset.sessions.clone();
    sessions.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    sessions.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let test = sessions.split_off(n_train + n_val);
    let val = sessions.split_off(n_train);
    Ok((
        Dataset::new(sessions, SplitTag::Train)?,
        Dataset::new(val, SplitTag::Val)?,
        Dataset::new(test, SplitTag::Test)?,
    ))
}
