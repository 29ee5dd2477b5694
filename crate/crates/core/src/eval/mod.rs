//! Two-stage retrieval and ranking metrics.
//!
//! Stage one ranks the whole gallery by cosine similarity of pooled features;
//! stage two re-scores the top of that list with the cross encoder's match
//! probability.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusRecord, Variant};
use crate::error::{Error, Result};
use crate::model::{CmpModel, TextInput};
use crate::numerics::{Scalar, Tensor};

pub const DEFAULT_SHORTLIST: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Only images showing the described identity and action are relevant.
    Behavior,
    /// Every image of the described identity is relevant.
    Identity,
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "behavior" => Ok(Setting::Behavior),
            "identity" => Ok(Setting::Identity),
            other => Err(Error::config("eval.setting", format!("expected behavior or identity, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
struct GalleryItem<T> {
    record_id: u32,
    pooled: Vec<T>,
    tokens: Tensor<T>,
}

/// Encoded gallery: unit-norm pooled features for stage one and fused image
/// tokens for the cross encoder.
#[derive(Clone, Debug)]
pub struct GalleryIndex<T> {
    items: Vec<GalleryItem<T>>,
}

impl<T: Scalar> GalleryIndex<T> {
    pub fn build(model: &CmpModel<T>, records: &[&CorpusRecord]) -> Result<Self> {
        let items = records
            .par_iter()
            .map(|r| {
                let mut g = model.graph();
                let tokens = model.encode_visual(&mut g, &r.image, &r.pose)?;
                let pooled = model.pool_image(&mut g, tokens)?;
                Ok(GalleryItem {
                    record_id: r.record_id,
                    pooled: g.value(pooled).data().to_vec(),
                    tokens: g.value(tokens).clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn record_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.items.iter().map(|i| i.record_id)
    }

    pub fn pooled(&self, pos: usize) -> &[T] {
        &self.items[pos].pooled
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedItem {
    pub record_id: u32,
    pub similarity: f64,
    /// Present for shortlisted items.
    pub itm_prob: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub query_id: u32,
    pub items: Vec<RankedItem>,
}

impl RankingResult {
    pub fn from_ids(query_id: u32, ids: &[u32]) -> Self {
        let items = ids.iter().map(|&record_id| RankedItem { record_id, similarity: 0.0, itm_prob: None }).collect();
        Self { query_id, items }
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.items.iter().map(|i| i.record_id)
    }
}

fn descending(a: f64, ida: u32, b: f64, idb: u32) -> std::cmp::Ordering {
    b.total_cmp(&a).then(ida.cmp(&idb))
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Ranks the gallery for one caption. `shortlist_k = 0` skips the rerank.
pub fn retrieve_two_stage<T: Scalar>(
    model: &CmpModel<T>,
    gallery: &GalleryIndex<T>,
    query: &TextInput,
    shortlist_k: usize,
) -> Result<Vec<RankedItem>> {
    if gallery.is_empty() {
        return Err(Error::invalid("retrieve_two_stage", "empty gallery"));
    }
    let mut g = model.graph();
    let f_text = model.encode_text(&mut g, query)?;
    let pooled = model.pool_text(&mut g, f_text)?;
    let q: Vec<f64> = g.value(pooled).data().iter().map(|&v| to_f64(v)).collect();
    let text_tokens = g.value(f_text).clone();

    let mut ranked: Vec<RankedItem> = gallery
        .items
        .iter()
        .map(|it| RankedItem {
            record_id: it.record_id,
            similarity: it.pooled.iter().zip(&q).map(|(&a, b)| to_f64(a) * b).sum(),
            itm_prob: None,
        })
        .collect();
    ranked.sort_by(|a, b| descending(a.similarity, a.record_id, b.similarity, b.record_id));

    let k = shortlist_k.min(ranked.len());
    let by_id: BTreeMap<u32, &GalleryItem<T>> = gallery.items.iter().map(|i| (i.record_id, i)).collect();
    for item in &mut ranked[..k] {
        let mut g = model.graph();
        let v = g.constant(by_id[&item.record_id].tokens.clone())?;
        let t = g.constant(text_tokens.clone())?;
        let out = model.cross_encode_features(&mut g, v, t, false)?;
        let p = model.match_probability(&mut g, out.itm_logits)?;
        item.itm_prob = Some(to_f64(g.scalar(p)));
    }
    ranked[..k].sort_by(|a, b| {
        descending(a.itm_prob.unwrap_or(0.0), a.record_id, b.itm_prob.unwrap_or(0.0), b.record_id)
    });
    Ok(ranked)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub query_id: u32,
    pub text: TextInput,
}

/// One query per distinct (identity, variant) caption, identified by the
/// smallest record id carrying it.
pub fn queries_from_records(records: &[&CorpusRecord]) -> Vec<Query> {
    let mut seen: BTreeMap<(u32, Variant), &CorpusRecord> = BTreeMap::new();
    for r in records {
        let e = seen.entry((r.identity_id, r.variant)).or_insert(r);
        if r.record_id < e.record_id {
            *e = r;
        }
    }
    let mut out: Vec<Query> = seen
        .values()
        .map(|r| Query { query_id: r.record_id, text: r.caption.clone() })
        .collect();
    out.sort_by_key(|q| q.query_id);
    out
}

pub fn rank_queries<T: Scalar>(
    model: &CmpModel<T>,
    gallery: &GalleryIndex<T>,
    queries: &[Query],
    shortlist_k: usize,
) -> Result<Vec<RankingResult>> {
    queries
        .par_iter()
        .map(|q| {
            Ok(RankingResult {
                query_id: q.query_id,
                items: retrieve_two_stage(model, gallery, &q.text, shortlist_k)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub setting: Setting,
    pub relevant: BTreeMap<u32, BTreeSet<u32>>,
}

impl GroundTruth {
    /// Relevant gallery records for each query record: same identity and
    /// variant under behavior match, same identity under identity match.
    pub fn from_records(queries: &[Query], gallery: &[&CorpusRecord], setting: Setting) -> Result<Self> {
        let meta: BTreeMap<u32, (u32, Variant)> =
            gallery.iter().map(|r| (r.record_id, (r.identity_id, r.variant))).collect();
        let mut relevant = BTreeMap::new();
        for q in queries {
            let &(identity, variant) = meta.get(&q.query_id).ok_or_else(|| {
                Error::invalid("ground_truth", format!("query {} is not a gallery record", q.query_id))
            })?;
            let set: BTreeSet<u32> = gallery
                .iter()
                .filter(|r| r.identity_id == identity && (setting == Setting::Identity || r.variant == variant))
                .map(|r| r.record_id)
                .collect();
            relevant.insert(q.query_id, set);
        }
        Ok(Self { setting, relevant })
    }

    fn relevant_for(&self, query_id: u32) -> Result<&BTreeSet<u32>> {
        self.relevant
            .get(&query_id)
            .ok_or_else(|| Error::invalid("metrics", format!("no ground truth for query {query_id}")))
    }
}

/// Fraction of queries with a relevant record among the first `k`.
pub fn recall_at_k(rankings: &[RankingResult], truth: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("recall_at_k", "k must be at least 1"));
    }
    if rankings.is_empty() {
        return Err(Error::invalid("recall_at_k", "no rankings"));
    }
    let mut hits = 0usize;
    for r in rankings {
        let rel = truth.relevant_for(r.query_id)?;
        if r.ids().take(k).any(|id| rel.contains(&id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

/// Uninterpolated average precision of one ranked list.
pub fn average_precision(ranked: impl IntoIterator<Item = u32>, relevant: &BTreeSet<u32>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::invalid("mean_average_precision", "query without relevant records"));
    }
    let (mut found, mut sum) = (0usize, 0.0);
    for (i, id) in ranked.into_iter().enumerate() {
        if relevant.contains(&id) {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

pub fn mean_average_precision(rankings: &[RankingResult], truth: &GroundTruth) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::invalid("mean_average_precision", "no rankings"));
    }
    let mut total = 0.0;
    for r in rankings {
        total += average_precision(r.ids(), truth.relevant_for(r.query_id)?)?;
    }
    Ok(total / rankings.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub setting: Setting,
    pub n_queries: usize,
    pub n_gallery: usize,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
    pub shortlist_k: usize,
    pub checkpoint_hash: Option<String>,
}

pub fn metrics_report(
    rankings: &[RankingResult],
    truth: &GroundTruth,
    n_gallery: usize,
    shortlist_k: usize,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        setting: truth.setting,
        n_queries: rankings.len(),
        n_gallery,
        r1: recall_at_k(rankings, truth, 1)?,
        r5: recall_at_k(rankings, truth, 5)?,
        r10: recall_at_k(rankings, truth, 10)?,
        map: mean_average_precision(rankings, truth)?,
        shortlist_k,
        checkpoint_hash: None,
    })
}

/// Rankings of every query over a set of records used as both gallery and
/// query source.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub queries: Vec<Query>,
    pub rankings: Vec<RankingResult>,
    pub n_gallery: usize,
    pub shortlist_k: usize,
}

impl Evaluation {
    pub fn run<T: Scalar>(model: &CmpModel<T>, records: &[&CorpusRecord], shortlist_k: usize) -> Result<Self> {
        let gallery = GalleryIndex::build(model, records)?;
        let queries = queries_from_records(records);
        let rankings = rank_queries(model, &gallery, &queries, shortlist_k)?;
        Ok(Self { queries, rankings, n_gallery: gallery.len(), shortlist_k })
    }

    pub fn report(&self, records: &[&CorpusRecord], setting: Setting) -> Result<MetricsReport> {
        let truth = GroundTruth::from_records(&self.queries, records, setting)?;
        metrics_report(&self.rankings, &truth, self.n_gallery, self.shortlist_k)
    }
}

pub fn evaluate<T: Scalar>(
    model: &CmpModel<T>,
    records: &[&CorpusRecord],
    setting: Setting,
    shortlist_k: usize,
) -> Result<MetricsReport> {
    Evaluation::run(model, records, shortlist_k)?.report(records, setting)
}

pub const RANKINGS_CSV_HEADER: &str = "query_id,rank,record_id,sim,itm_prob";

pub fn write_rankings_csv(path: &Path, rankings: &[RankingResult]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{RANKINGS_CSV_HEADER}").expect("vec write");
    for r in rankings {
        for (i, it) in r.items.iter().enumerate() {
            let p = it.itm_prob.map(|p| p.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{}", r.query_id, i + 1, it.record_id, it.similarity, p).expect("vec write");
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
