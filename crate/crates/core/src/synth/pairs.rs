use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::{MultiviewDataset, Sample, View};
use crate::error::{Error, Result};

fn pick<'a, R: Rng + ?Sized>(
    dataset: &'a MultiviewDataset,
    view: View,
    identity: usize,
    rng: &mut R,
) -> Result<&'a Sample> {
    let idx = dataset.indices_of(view, identity);
    if idx.is_empty() {
        return Err(Error::Data(format!("identity {identity} has no {view:?} sample")));
    }
    Ok(&dataset.samples(view)[idx[rng.random_range(0..idx.len())]])
}

/// Draws an identity uniformly, then one sample of each view of that identity.
pub fn sample_genuine_pair<'a, R: Rng + ?Sized>(
    dataset: &'a MultiviewDataset,
    rng: &mut R,
) -> Result<(&'a Sample, &'a Sample)> {
    let ids = dataset.identities();
    if ids.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let id = ids[rng.random_range(0..ids.len())];
    Ok((
        pick(dataset, View::Frontal, id, rng)?,
        pick(dataset, View::Profile, id, rng)?,
    ))
}

/// `batch_size` genuine pairs with pairwise-distinct identities, so every
/// off-diagonal in-batch pair is an imposter pair.
pub fn sample_genuine_batch<'a, R: Rng + ?Sized>(
    dataset: &'a MultiviewDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<(&'a Sample, &'a Sample)>> {
    let ids = dataset.identities();
    if batch_size > ids.len() {
        return Err(Error::Data(format!(
            "batch of {batch_size} distinct identities requested from {}",
            ids.len()
        )));
    }
    sample_indices(rng, ids.len(), batch_size)
        .into_iter()
        .map(|k| {
            let id = ids[k];
            Ok((
                pick(dataset, View::Frontal, id, rng)?,
                pick(dataset, View::Profile, id, rng)?,
            ))
        })
        .collect()
}

/// Draws each side from its view's marginal and rejects identity collisions.
pub fn sample_imposter_pair<'a, R: Rng + ?Sized>(
    dataset: &'a MultiviewDataset,
    rng: &mut R,
) -> Result<(&'a Sample, &'a Sample)> {
    let (f, p) = (dataset.frontal(), dataset.profile());
    let distinct = |samples: &[Sample]| {
        let mut ids: Vec<usize> = samples.iter().map(|s| s.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };
    if f.is_empty() || p.is_empty() || dataset.identities().len() < 2 {
        return Err(Error::Data("imposter pairs need at least two identities".into()));
    }
    if distinct(f) == 1 && distinct(p) == 1 && f[0].identity == p[0].identity {
        return Err(Error::Data("both views contain a single shared identity".into()));
    }
    loop {
        let a = &f[rng.random_range(0..f.len())];
        let b = &p[rng.random_range(0..p.len())];
        if a.identity != b.identity {
            return Ok((a, b));
        }
    }
}
