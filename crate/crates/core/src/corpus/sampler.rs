//! Identity-aware batch construction.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::{Corpus, CorpusRecord, PairIndex, Split};
use crate::error::{Error, Result};
use crate::objectives::{mask_tokens, BatchItem, TrainingBatch};

/// Training records with identity groups and counterpart lists resolved to
/// positions.
#[derive(Clone, Debug)]
pub struct TrainPool<'a> {
    records: Vec<&'a CorpusRecord>,
    groups: Vec<Vec<usize>>,
    group_of: Vec<usize>,
    counterparts: Vec<Vec<usize>>,
}

impl<'a> TrainPool<'a> {
    /// Training split of a corpus, restricted to the first `fraction` of its
    /// identities so that smaller pools are nested in larger ones.
    pub fn new(corpus: &'a Corpus, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid("train_pool", format!("fraction {fraction} outside (0, 1]")));
        }
        let ids: Vec<u32> = corpus
            .identities
            .iter()
            .filter(|i| i.split == Split::Train)
            .map(|i| i.identity_id)
            .collect();
        let keep = ((ids.len() as f64 * fraction).ceil() as usize).max(1);
        let kept: std::collections::HashSet<u32> = ids.into_iter().take(keep).collect();
        Ok(Self::from_records(corpus.split(Split::Train).filter(|r| kept.contains(&r.identity_id)).collect()))
    }

    pub fn from_records(records: Vec<&'a CorpusRecord>) -> Self {
        let index = PairIndex::build(records.iter().copied());
        let position: HashMap<u32, usize> = records.iter().enumerate().map(|(i, r)| (r.record_id, i)).collect();
        let mut group_ids: HashMap<u32, usize> = HashMap::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut group_of = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let g = *group_ids.entry(r.identity_id).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(i);
            group_of.push(g);
        }
        let counterparts = records
            .iter()
            .map(|r| index.counterparts(r.record_id).iter().map(|id| position[id]).collect())
            .collect();
        Self { records, groups, group_of, counterparts }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.groups.len()
    }

    pub fn record(&self, pos: usize) -> &'a CorpusRecord {
        self.records[pos]
    }

    pub fn records(&self) -> &[&'a CorpusRecord] {
        &self.records
    }

    pub fn counterparts(&self, pos: usize) -> &[usize] {
        &self.counterparts[pos]
    }

    pub fn same_identity(&self, a: usize, b: usize) -> bool {
        self.group_of[a] == self.group_of[b]
    }

    /// One pass over every record in shuffled order, cut into batches that
    /// avoid repeating an identity whenever the pool allows it.
    pub fn epoch_batches<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut queue: Vec<usize> = (0..self.len()).collect();
        queue.shuffle(rng);
        let mut batches = Vec::new();
        while !queue.is_empty() {
            let mut batch = Vec::with_capacity(batch_size);
            let mut rest = Vec::with_capacity(queue.len());
            for p in queue {
                if batch.len() < batch_size && !batch.iter().any(|&b| self.same_identity(b, p)) {
                    batch.push(p);
                } else {
                    rest.push(p);
                }
            }
            queue = rest;
            // Top up from repeated identities once distinct ones run out.
            while batch.len() < batch_size && !queue.is_empty() {
                batch.push(queue.remove(0));
            }
            batches.push(batch);
        }
        batches
    }

    /// Identity-stratified positives: distinct identities first, then one
    /// record of each.
    pub fn sample_positives<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        let mut groups: Vec<usize> = (0..self.groups.len()).collect();
        groups.shuffle(rng);
        let mut out: Vec<usize> = groups
            .iter()
            .take(batch_size)
            .map(|&g| *self.groups[g].choose(rng).expect("groups are never empty"))
            .collect();
        if out.len() < batch_size {
            let mut rest: Vec<usize> = (0..self.len()).filter(|p| !out.contains(p)).collect();
            rest.shuffle(rng);
            out.extend(rest.into_iter().take(batch_size - out.len()));
        }
        out
    }

    /// Attaches counterparts, random negatives and masked captions to a set
    /// of positives.
    pub fn build_batch<R: Rng>(
        &self,
        positives: &[usize],
        ihnm: bool,
        mask_rate: f64,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<TrainingBatch> {
        let n = positives.len();
        if n < 2 {
            return Err(Error::invalid("sample_batch", "a batch needs at least two pairs"));
        }
        let mut items = Vec::with_capacity(n);
        for (slot, &pos) in positives.iter().enumerate() {
            let others: Vec<usize> = (0..n).filter(|&j| j != slot).collect();
            let strangers: Vec<usize> =
                others.iter().copied().filter(|&j| !self.same_identity(positives[j], pos)).collect();
            let pick = |rng: &mut R| *strangers.choose(rng).or_else(|| others.choose(rng)).expect("n ≥ 2");
            let counterpart = if ihnm { self.counterparts[pos].choose(rng).copied() } else { None };
            let random_text = pick(rng);
            let random_image = pick(rng);
            let masked = mask_tokens(&self.records[pos].caption, mask_rate, vocab_size, rng)?;
            items.push(BatchItem {
                positive: pos,
                counterpart,
                fallback: ihnm && counterpart.is_none(),
                random_text,
                random_image,
                masked,
            });
        }
        Ok(TrainingBatch { items })
    }
}

/// Draws an identity-stratified batch and attaches identity-based hard
/// negatives where the counterpart variant exists.
pub fn sample_batch_ihnm<R: Rng>(
    pool: &TrainPool<'_>,
    batch_size: usize,
    mask_rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<TrainingBatch> {
    if pool.len() < batch_size {
        return Err(Error::invalid(
            "sample_batch_ihnm",
            format!("pool of {} records is smaller than the batch size {batch_size}", pool.len()),
        ));
    }
    let positives = pool.sample_positives(batch_size, rng);
    pool.build_batch(&positives, true, mask_rate, vocab_size, rng)
}
