//! Interaction logs: synthetic drift generation, CSV ingestion, stage
//! splitting, pair construction and item-code assignment.

use std::collections::HashMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal};
use serde::{Deserialize, Serialize};

use crate::decode::CodeTrie;
use crate::error::{Error, Result};
use crate::model::{CodeBook, ItemCode, Pair, HISTORY_WINDOW};

/// Users need at least this many interactions in an incremental block.
pub const MIN_BLOCK_INTERACTIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    pub n_users: usize,
    pub n_items: usize,
}

impl InteractionLog {
    /// Builds a log from records, inferring the id ranges.
    pub fn from_records(records: Vec<Interaction>) -> Self {
        let n_users = records.iter().map(|r| r.user + 1).max().unwrap_or(0);
        let n_items = records.iter().map(|r| r.item + 1).max().unwrap_or(0);
        InteractionLog {
            records,
            n_users,
            n_items,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stable sort by timestamp.
    pub fn sort(&mut self) {
        self.records.sort_by_key(|r| r.timestamp);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    pub n_clusters: usize,
    /// Stability weight per stage; entry 0 is unused.
    pub alpha: Vec<f64>,
    pub users: usize,
    pub items: usize,
    /// Interactions generated in each stage.
    pub stage_sizes: Vec<usize>,
    pub dirichlet_conc: f64,
    pub seed: u64,
    /// Share of each stage's Dirichlet base measure placed on a drifting
    /// population-wide cluster popularity (0 gives the symmetric Dirichlet).
    #[serde(default)]
    pub trend: f64,
    /// Log-scale spread of per-user activity.
    #[serde(default = "default_activity_sigma")]
    pub activity_sigma: f64,
    /// Dirichlet concentration of the fresh popularity draws; small values
    /// give a few dominant clusters per stage.
    #[serde(default = "default_popularity_conc")]
    pub popularity_conc: f64,
    /// When set, items inside a cluster are drawn from stage weights
    /// `w_t = α_t w_{t−1} + (1−α_t) Dirichlet(conc)` instead of uniformly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_popularity_conc: Option<f64>,
}

fn default_popularity_conc() -> f64 {
    1.0
}

fn default_activity_sigma() -> f64 {
    1.0
}

impl DriftSpec {
    /// `n_stages` stages with 60% of `total` in the first and the rest split evenly.
    pub fn with_total(total: usize, n_stages: usize, alpha: f64) -> Self {
        let first = (total as f64 * 0.6).round() as usize;
        let rest = total - first;
        let mut stage_sizes = vec![first];
        let inc = n_stages.saturating_sub(1).max(1);
        for s in 0..n_stages.saturating_sub(1) {
            stage_sizes.push(rest / inc + usize::from(s < rest % inc));
        }
        DriftSpec {
            n_clusters: 16,
            alpha: vec![alpha; n_stages],
            users: 2000,
            items: 256,
            stage_sizes,
            dirichlet_conc: 0.5,
            seed: 0,
            trend: 0.0,
            activity_sigma: default_activity_sigma(),
            popularity_conc: default_popularity_conc(),
            item_popularity_conc: None,
        }
    }

    pub fn n_stages(&self) -> usize {
        self.stage_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.users == 0 || self.items < self.n_clusters {
            return Err(Error::Config("drift spec needs users, and at least one item per cluster".into()));
        }
        if self.stage_sizes.is_empty() || self.alpha.len() != self.stage_sizes.len() {
            return Err(Error::Config("alpha needs one entry per stage".into()));
        }
        if self.alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("alpha values must lie in [0, 1]".into()));
        }
        if !(self.dirichlet_conc > 0.0) {
            return Err(Error::Config("dirichlet_conc must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.trend) {
            return Err(Error::Config("trend must lie in [0, 1]".into()));
        }
        if !(self.popularity_conc > 0.0) {
            return Err(Error::Config("popularity_conc must be positive".into()));
        }
        if self.item_popularity_conc.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("item_popularity_conc must be positive".into()));
        }
        if !(self.activity_sigma >= 0.0) {
            return Err(Error::Config("activity_sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Generated log plus the latent quantities behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftData {
    pub log: InteractionLog,
    pub item_cluster: Vec<usize>,
    /// `mixtures[u][t]`: cluster mixture `π_{u,t}`.
    pub mixtures: Vec<Vec<Vec<f64>>>,
    /// `draws[u][t]`: fresh Dirichlet draw `q_{u,t}`.
    pub draws: Vec<Vec<Vec<f64>>>,
    /// Population popularity per stage (uniform when `trend = 0`).
    pub popularity: Vec<Vec<f64>>,
    /// `item_weights[t][item]`: within-cluster item weights of stage `t`
    /// (each cluster sums to 1; uniform unless item popularity drifts).
    pub item_weights: Vec<Vec<f64>>,
}

fn dirichlet<R: Rng + ?Sized>(rng: &mut R, conc: &[f64]) -> Vec<f64> {
    loop {
        let g: Vec<f64> = conc
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
            .collect();
        let s: f64 = g.iter().sum();
        if s > 0.0 && s.is_finite() {
            return g.into_iter().map(|x| x / s).collect();
        }
    }
}

/// Draws an evolving-preference interaction log.
///
/// Each user's stage mixture follows `π_t = α_t π_{t−1} + (1−α_t) q_t`,
/// `q_t ~ Dirichlet(c·C·m_t)` with `m_t` the uniform measure blended with the
/// stage popularity. An interaction picks a user by activity, a cluster from
/// the user's mixture, then an item uniformly within the cluster.
pub fn generate_drift(spec: &DriftSpec) -> Result<DriftData> {
    spec.validate()?;
    let c = spec.n_clusters;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut perm: Vec<usize> = (0..spec.items).collect();
    perm.shuffle(&mut rng);
    let mut item_cluster = vec![0; spec.items];
    for (pos, &item) in perm.iter().enumerate() {
        item_cluster[item] = pos % c;
    }
    let mut members = vec![Vec::new(); c];
    for (item, &cl) in item_cluster.iter().enumerate() {
        members[cl].push(item);
    }

    let activity = LogNormal::new(0.0, spec.activity_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let weights: Vec<f64> = (0..spec.users).map(|_| activity.sample(&mut rng)).collect();
    let pick_user = WeightedIndex::new(&weights).map_err(|e| Error::Numeric(e.to_string()))?;

    let mut popularity: Vec<Vec<f64>> = Vec::with_capacity(spec.n_stages());
    let flat = vec![spec.popularity_conc; c];
    for t in 0..spec.n_stages() {
        let fresh = dirichlet(&mut rng, &flat);
        let m = match popularity.last() {
            None => fresh,
            Some(prev) => prev
                .iter()
                .zip(&fresh)
                .map(|(p, f)| spec.alpha[t] * p + (1.0 - spec.alpha[t]) * f)
                .collect(),
        };
        popularity.push(m);
    }
    if spec.trend == 0.0 {
        popularity.iter_mut().for_each(|m| m.iter_mut().for_each(|x| *x = 1.0 / c as f64));
    }

    let mut item_weights: Vec<Vec<f64>> = Vec::with_capacity(spec.n_stages());
    for t in 0..spec.n_stages() {
        let mut w = vec![0.0; spec.items];
        for items in &members {
            let fresh = match spec.item_popularity_conc {
                Some(conc) => dirichlet(&mut rng, &vec![conc; items.len()]),
                None => vec![1.0 / items.len() as f64; items.len()],
            };
            for (j, &item) in items.iter().enumerate() {
                w[item] = match item_weights.last() {
                    None => fresh[j],
                    Some(prev) => spec.alpha[t] * prev[item] + (1.0 - spec.alpha[t]) * fresh[j],
                };
            }
        }
        item_weights.push(w);
    }

    let mut mixtures = vec![Vec::with_capacity(spec.n_stages()); spec.users];
    let mut draws = vec![Vec::with_capacity(spec.n_stages()); spec.users];
    let mut records = Vec::with_capacity(spec.stage_sizes.iter().sum());
    let mut clock: i64 = 0;
    for t in 0..spec.n_stages() {
        let base: Vec<f64> = popularity[t]
            .iter()
            .map(|&m| spec.dirichlet_conc * c as f64 * ((1.0 - spec.trend) / c as f64 + spec.trend * m))
            .collect();
        for u in 0..spec.users {
            let q = dirichlet(&mut rng, &base);
            let pi = if t == 0 {
                q.clone()
            } else {
                let prev: &Vec<f64> = &mixtures[u][t - 1];
                prev.iter()
                    .zip(&q)
                    .map(|(p, qi)| spec.alpha[t] * p + (1.0 - spec.alpha[t]) * qi)
                    .collect()
            };
            draws[u].push(q);
            mixtures[u].push(pi);
        }
        let pickers: Vec<WeightedIndex<f64>> = mixtures
            .iter()
            .map(|m| WeightedIndex::new(&m[t]).map_err(|e| Error::Numeric(e.to_string())))
            .collect::<Result<_>>()?;
        let item_pickers: Option<Vec<WeightedIndex<f64>>> = match spec.item_popularity_conc {
            None => None,
            Some(_) => Some(
                members
                    .iter()
                    .map(|items| {
                        let w: Vec<f64> = items.iter().map(|&i| item_weights[t][i]).collect();
                        WeightedIndex::new(&w).map_err(|e| Error::Numeric(e.to_string()))
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        for _ in 0..spec.stage_sizes[t] {
            let user = pick_user.sample(&mut rng);
            let cluster = pickers[user].sample(&mut rng);
            let within = match &item_pickers {
                None => rng.random_range(0..members[cluster].len()),
                Some(p) => p[cluster].sample(&mut rng),
            };
            let item = members[cluster][within];
            clock += 1;
            records.push(Interaction {
                user,
                item,
                timestamp: clock,
            });
        }
    }
    Ok(DriftData {
        log: InteractionLog {
            records,
            n_users: spec.users,
            n_items: spec.items,
        },
        item_cluster,
        mixtures,
        draws,
        popularity,
        item_weights,
    })
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    user_id: String,
    item_id: String,
    timestamp: String,
}

/// Dense reindexing from raw ids, in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdMaps {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

/// Reads a `user_id,item_id,timestamp` CSV into a time-sorted log.
pub fn ingest_csv(path: impl AsRef<Path>) -> Result<(InteractionLog, IdMaps)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file)
}

pub fn ingest_reader<R: std::io::Read>(reader: R) -> Result<(InteractionLog, IdMaps)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.is_empty() {
        return Err(Error::pre("empty interaction file"));
    }
    if headers.iter().collect::<Vec<_>>() != ["user_id", "item_id", "timestamp"] {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header user_id,item_id,timestamp, got {}", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut raw = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let ts: i64 = row.timestamp.parse().map_err(|_| Error::Parse {
            line,
            message: format!("timestamp {:?} is not an integer", row.timestamp),
        })?;
        if row.user_id.is_empty() || row.item_id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty id".into(),
            });
        }
        raw.push((row.user_id, row.item_id, ts));
    }
    if raw.is_empty() {
        return Err(Error::pre("interaction file has no records"));
    }
    raw.sort_by_key(|r| r.2);
    let mut maps = IdMaps::default();
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let records = raw
        .into_iter()
        .map(|(u, it, ts)| {
            let next_u = users.len();
            let user = *users.entry(u.clone()).or_insert_with(|| {
                maps.users.push(u);
                next_u
            });
            let next_i = items.len();
            let item = *items.entry(it.clone()).or_insert_with(|| {
                maps.items.push(it);
                next_i
            });
            Interaction {
                user,
                item,
                timestamp: ts,
            }
        })
        .collect();
    Ok((
        InteractionLog {
            records,
            n_users: users.len(),
            n_items: items.len(),
        },
        maps,
    ))
}

pub fn write_csv(log: &InteractionLog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(log, file).map_err(|e| Error::io(path, e))
}

pub fn write_csv_to<W: std::io::Write>(log: &InteractionLog, writer: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_id", "item_id", "timestamp"])?;
    for r in &log.records {
        w.write_record([r.user.to_string(), r.item.to_string(), r.timestamp.to_string()])?;
    }
    w.flush()
}

/// Records of one stage before pair construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInput {
    /// 1-based.
    pub stage_index: usize,
    /// Time-ordered records of the block.
    pub records: Vec<Interaction>,
    /// Users with fewer interactions in the block contribute no pairs.
    pub min_interactions: usize,
}

impl BlockInput {
    fn per_user(&self) -> Vec<(usize, Vec<usize>)> {
        let mut order = Vec::new();
        let mut seqs: HashMap<usize, Vec<usize>> = HashMap::new();
        for r in &self.records {
            seqs.entry(r.user)
                .or_insert_with(|| {
                    order.push(r.user);
                    Vec::new()
                })
                .push(r.item);
        }
        order.sort_unstable();
        order
            .into_iter()
            .map(|u| {
                let s = seqs.remove(&u).unwrap_or_default();
                (u, s)
            })
            .collect()
    }

    /// Users meeting the block's interaction threshold.
    pub fn eligible_users(&self) -> Vec<usize> {
        self.per_user()
            .into_iter()
            .filter(|(_, s)| s.len() >= self.min_interactions)
            .map(|(u, _)| u)
            .collect()
    }
}

fn min_for(stage_index: usize) -> usize {
    if stage_index == 1 {
        0
    } else {
        MIN_BLOCK_INTERACTIONS
    }
}

/// First `pretrain_frac` of the time-sorted log, then `n_stages − 1` equal
/// contiguous spans.
pub fn split_chronological(log: &InteractionLog, n_stages: usize, pretrain_frac: f64) -> Result<Vec<BlockInput>> {
    if n_stages < 2 {
        return Err(Error::pre("need at least two stages"));
    }
    if !(0.0 < pretrain_frac && pretrain_frac < 1.0) {
        return Err(Error::pre("pretrain_frac must lie in (0, 1)"));
    }
    let mut sorted = log.records.clone();
    sorted.sort_by_key(|r| r.timestamp);
    let sizes = chronological_sizes(sorted.len(), n_stages, pretrain_frac);
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Split(format!(
            "{} records cannot fill {n_stages} stages",
            sorted.len()
        )));
    }
    let mut blocks = Vec::with_capacity(n_stages);
    let mut start = 0;
    for (i, &n) in sizes.iter().enumerate() {
        let b = BlockInput {
            stage_index: i + 1,
            records: sorted[start..start + n].to_vec(),
            min_interactions: min_for(i + 1),
        };
        start += n;
        if b.eligible_users().is_empty() {
            return Err(Error::Split(format!("stage {} is empty after user filtering", i + 1)));
        }
        blocks.push(b);
    }
    Ok(blocks)
}

/// Record counts of the chronological split.
pub fn chronological_sizes(total: usize, n_stages: usize, pretrain_frac: f64) -> Vec<usize> {
    let first = (total as f64 * pretrain_frac).round() as usize;
    let rest = total - first.min(total);
    let inc = n_stages - 1;
    let mut sizes = vec![first.min(total)];
    sizes.extend((0..inc).map(|s| rest / inc + usize::from(s < rest % inc)));
    sizes
}

/// Random user partition with block sizes matched to the chronological split.
///
/// Users are dealt to the block with the largest remaining deficit (the first
/// `n_stages` users to distinct blocks). With `tolerance = Some(f)` every
/// block must land within `f` relative error of its target, reshuffling up
/// to 100 times.
pub fn split_user_disjoint(
    log: &InteractionLog,
    n_stages: usize,
    pretrain_frac: f64,
    tolerance: Option<f64>,
    seed: u64,
) -> Result<Vec<BlockInput>> {
    if n_stages < 2 {
        return Err(Error::pre("need at least two stages"));
    }
    let mut sorted = log.records.clone();
    sorted.sort_by_key(|r| r.timestamp);
    let targets = chronological_sizes(sorted.len(), n_stages, pretrain_frac);
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for r in &sorted {
        *counts.entry(r.user).or_default() += 1;
    }
    let mut users: Vec<usize> = counts.keys().copied().collect();
    users.sort_unstable();
    if users.len() < n_stages {
        return Err(Error::Split(format!("{} users cannot fill {n_stages} stages", users.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_target: Vec<usize> = (0..n_stages).collect();
    by_target.sort_by_key(|&b| std::cmp::Reverse(targets[b]));
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        users.shuffle(&mut rng);
        let mut assign: HashMap<usize, usize> = HashMap::with_capacity(users.len());
        let mut filled = vec![0usize; n_stages];
        for (i, &u) in users.iter().enumerate() {
            let b = if i < n_stages {
                by_target[i]
            } else {
                (0..n_stages)
                    .max_by_key(|&b| (targets[b] as i64 - filled[b] as i64, std::cmp::Reverse(b)))
                    .unwrap_or(0)
            };
            filled[b] += counts[&u];
            assign.insert(u, b);
        }
        let err = filled
            .iter()
            .zip(&targets)
            .map(|(&f, &t)| (f as f64 - t as f64).abs() / (t.max(1) as f64))
            .fold(0.0, f64::max);
        worst = worst.min(err);
        if tolerance.is_some_and(|tol| err > tol) {
            continue;
        }
        let mut blocks: Vec<BlockInput> = (0..n_stages)
            .map(|b| BlockInput {
                stage_index: b + 1,
                records: Vec::new(),
                min_interactions: min_for(b + 1),
            })
            .collect();
        for r in &sorted {
            blocks[assign[&r.user]].records.push(*r);
        }
        return Ok(blocks);
    }
    Err(Error::Split(format!(
        "could not match block sizes within {:.1}% after 100 reshuffles (best {:.1}%)",
        100.0 * tolerance.unwrap_or(0.0),
        100.0 * worst
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBlock {
    pub stage_index: usize,
    pub pairs: Vec<Pair>,
    pub val_pairs: Vec<Pair>,
    pub test_pairs: Vec<Pair>,
}

/// Everything each user interacted with before the current block.
#[derive(Debug, Clone, Default)]
pub struct UserHistories {
    seqs: HashMap<usize, Vec<usize>>,
}

impl UserHistories {
    pub fn get(&self, user: usize) -> &[usize] {
        self.seqs.get(&user).map_or(&[], |s| s.as_slice())
    }

    pub fn extend(&mut self, block: &BlockInput) {
        for r in &block.records {
            self.seqs.entry(r.user).or_default().push(r.item);
        }
    }
}

fn window_before(prior: &[usize], seq: &[usize], i: usize, window: usize) -> Vec<usize> {
    // history = prior ++ seq[..i], last `window` items
    let need = window;
    let from_seq = i.min(need);
    let from_prior = (need - from_seq).min(prior.len());
    let mut h = Vec::with_capacity(from_prior + from_seq);
    h.extend_from_slice(&prior[prior.len() - from_prior..]);
    h.extend_from_slice(&seq[i - from_seq..i]);
    h
}

/// Sliding-window pairs of one block.
///
/// For every eligible user the last block item is the test target and the
/// second-to-last the validation target; every earlier block item with a
/// nonempty history becomes a training target. Histories reach back into
/// `prior` (earlier blocks). In the first block, users with fewer than three
/// items keep all of them for training.
pub fn make_pairs(block: &BlockInput, prior: &UserHistories, window: usize) -> StageBlock {
    let mut out = StageBlock {
        stage_index: block.stage_index,
        pairs: Vec::new(),
        val_pairs: Vec::new(),
        test_pairs: Vec::new(),
    };
    for (user, seq) in block.per_user() {
        if seq.len() < block.min_interactions {
            continue;
        }
        let past = prior.get(user);
        let holdout = seq.len() >= 3;
        let n_train = if holdout { seq.len() - 2 } else { seq.len() };
        for i in 0..seq.len() {
            let history = window_before(past, &seq, i, window);
            if history.is_empty() {
                continue;
            }
            let pair = Pair {
                user,
                history,
                target: seq[i],
            };
            if i < n_train {
                out.pairs.push(pair);
            } else if i == seq.len() - 2 {
                out.val_pairs.push(pair);
            } else {
                out.test_pairs.push(pair);
            }
        }
    }
    out
}

/// Pairs for every block, threading user histories forward in stage order.
pub fn make_all_pairs(blocks: &[BlockInput]) -> Vec<StageBlock> {
    let mut hist = UserHistories::default();
    blocks
        .iter()
        .map(|b| {
            let sb = make_pairs(b, &hist, HISTORY_WINDOW);
            hist.extend(b);
            sb
        })
        .collect()
}

/// Hierarchical item codes: the cluster fixes token 0 through a seeded
/// permutation, the remaining `L−1` tokens are distinct suffixes drawn without
/// replacement inside the cluster.
pub fn assign_codes(
    item_cluster: &[usize],
    code_len: usize,
    codebook_size: usize,
    seed: u64,
) -> Result<(CodeBook, CodeTrie)> {
    if code_len == 0 || codebook_size == 0 {
        return Err(Error::pre("code length and codebook size must be positive"));
    }
    let k = codebook_size;
    let n_clusters = item_cluster.iter().map(|c| c + 1).max().unwrap_or(0);
    if n_clusters > k {
        return Err(Error::pre(format!("{n_clusters} clusters exceed codebook size {k}")));
    }
    let suffix_space = (code_len - 1) as u32;
    let suffixes = k
        .checked_pow(suffix_space)
        .ok_or_else(|| Error::pre("code space overflows"))?;
    let capacity = suffixes
        .checked_mul(k)
        .ok_or_else(|| Error::pre("code space overflows"))?;
    if item_cluster.len() > capacity {
        return Err(Error::pre(format!("{} items exceed code capacity {capacity}", item_cluster.len())));
    }
    let mut members = vec![Vec::new(); n_clusters];
    for (item, &c) in item_cluster.iter().enumerate() {
        members[c].push(item);
    }
    if let Some(c) = members.iter().position(|m| m.len() > suffixes) {
        return Err(Error::pre(format!(
            "cluster {c} has {} items, only {suffixes} suffixes available",
            members[c].len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prefix: Vec<usize> = (0..k).collect();
    prefix.shuffle(&mut rng);
    let mut codes = vec![ItemCode { tokens: Vec::new() }; item_cluster.len()];
    for (c, items) in members.iter().enumerate() {
        let picks = rand::seq::index::sample(&mut rng, suffixes, items.len());
        for (&item, mut s) in items.iter().zip(picks.iter()) {
            let mut tokens = vec![0; code_len];
            tokens[0] = prefix[c];
            for j in (1..code_len).rev() {
                tokens[j] = s % k;
                s /= k;
            }
            codes[item] = ItemCode { tokens };
        }
    }
    let book = CodeBook::new(vec![k; code_len], codes)?;
    let trie = CodeTrie::from_codebook(&book)?;
    Ok((book, trie))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: usize, item: usize, timestamp: i64) -> Interaction {
        Interaction { user, item, timestamp }
    }

    fn small_spec() -> DriftSpec {
        DriftSpec {
            users: 50,
            items: 64,
            n_clusters: 8,
            ..DriftSpec::with_total(2000, 5, 0.7)
        }
    }

    #[test]
    fn drift_is_deterministic_and_timestamps_increase() {
        let a = generate_drift(&small_spec()).unwrap();
        let b = generate_drift(&small_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log.len(), 2000);
        assert!(a.log.records.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        let sizes: Vec<usize> = (0..8).map(|c| a.item_cluster.iter().filter(|&&x| x == c).count()).collect();
        assert_eq!(sizes, vec![8; 8]);
    }

    #[test]
    fn drift_recurrence_holds_exactly() {
        for trend in [0.0, 0.6] {
            let spec = DriftSpec { trend, ..small_spec() };
            let d = generate_drift(&spec).unwrap();
            for u in 0..spec.users {
                for t in 1..spec.n_stages() {
                    for c in 0..spec.n_clusters {
                        let expect = spec.alpha[t] * d.mixtures[u][t - 1][c] + (1.0 - spec.alpha[t]) * d.draws[u][t][c];
                        assert_eq!(d.mixtures[u][t][c], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn stability_and_plasticity_limits() {
        let spec = DriftSpec {
            alpha: vec![1.0; 5],
            ..small_spec()
        };
        let d = generate_drift(&spec).unwrap();
        for m in &d.mixtures {
            assert!(m.iter().all(|pi| pi == &m[0]));
        }
        let spec = DriftSpec {
            alpha: vec![0.0; 5],
            ..small_spec()
        };
        let d = generate_drift(&spec).unwrap();
        for (m, q) in d.mixtures.iter().zip(&d.draws) {
            assert_eq!(m, q);
        }
    }

    #[test]
    fn item_weights_follow_the_recurrence() {
        let d = generate_drift(&small_spec()).unwrap();
        assert!(d.item_weights.iter().all(|w| w.iter().all(|&x| x == 1.0 / 8.0)));
        let spec = DriftSpec {
            item_popularity_conc: Some(0.3),
            ..small_spec()
        };
        let d = generate_drift(&spec).unwrap();
        for w in &d.item_weights {
            for c in 0..8 {
                let s: f64 = (0..64).filter(|&i| d.item_cluster[i] == c).map(|i| w[i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert_ne!(d.item_weights[0], d.item_weights[1]);
    }

    #[test]
    fn cluster_frequencies_match_mixture() {
        let spec = DriftSpec {
            users: 1,
            items: 32,
            n_clusters: 4,
            alpha: vec![0.0],
            stage_sizes: vec![10_000],
            dirichlet_conc: 2.0,
            seed: 3,
            trend: 0.0,
            activity_sigma: 1.0,
            popularity_conc: 1.0,
            item_popularity_conc: None,
        };
        let d = generate_drift(&spec).unwrap();
        let pi = &d.mixtures[0][0];
        let n = 10_000.0;
        for c in 0..4 {
            let count = d.log.records.iter().filter(|r| d.item_cluster[r.item] == c).count() as f64;
            let sigma = (n * pi[c] * (1.0 - pi[c])).sqrt();
            assert!((count - n * pi[c]).abs() <= 3.0 * sigma, "cluster {c}: {count} vs {}", n * pi[c]);
        }
    }

    #[test]
    fn csv_ingest_examples() {
        let text = "user_id,item_id,timestamp\nu2,i9,30\nu1,i9,10\nu1,i3,20\n";
        let (log, maps) = ingest_reader(text.as_bytes()).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log.records.iter().map(|r| r.timestamp).collect::<Vec<_>>(), [10, 20, 30]);
        assert_eq!(maps.users, ["u1", "u2"]);
        assert_eq!(maps.items, ["i9", "i3"]);
        assert_eq!((log.n_users, log.n_items), (2, 2));

        let bad = "user_id,item_id,timestamp\n1,2,3\n1,2,yesterday\n";
        assert!(matches!(ingest_reader(bad.as_bytes()), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(ingest_reader("".as_bytes()), Err(Error::Precondition(_))));
        assert!(matches!(
            ingest_reader("user_id,item_id,timestamp\n".as_bytes()),
            Err(Error::Precondition(_))
        ));

        let dup = "user_id,item_id,timestamp\n1,2,3\n1,2,3\n";
        assert_eq!(ingest_reader(dup.as_bytes()).unwrap().0.len(), 2);
    }

    #[test]
    fn csv_round_trip() {
        let d = generate_drift(&small_spec()).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&d.log, &mut buf).unwrap();
        let (back, _) = ingest_reader(buf.as_slice()).unwrap();
        assert_eq!(back.len(), d.log.len());
        // generated ids are already dense, so only the relabeling by first appearance differs
        let mut seen_u = HashMap::new();
        for (a, b) in d.log.records.iter().zip(&back.records) {
            assert_eq!(a.timestamp, b.timestamp);
            assert_eq!(*seen_u.entry(a.user).or_insert(b.user), b.user);
        }
    }

    #[test]
    fn chronological_sizes_and_order() {
        let log = InteractionLog::from_records((0..100).map(|i| rec(i % 2, i, i as i64)).collect());
        assert_eq!(chronological_sizes(100, 5, 0.6), [60, 10, 10, 10, 10]);
        let blocks = split_chronological(&log, 5, 0.6).unwrap();
        let sizes: Vec<usize> = blocks.iter().map(|b| b.records.len()).collect();
        assert_eq!(sizes, [60, 10, 10, 10, 10]);
        for b in &blocks {
            assert!(b.records.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        }
        let all: Vec<Interaction> = blocks.iter().flat_map(|b| b.records.clone()).collect();
        assert_eq!(all, log.records);
    }

    #[test]
    fn filter_threshold_keeps_five() {
        let mut records: Vec<Interaction> = (0..15).map(|i| rec(0, i, i as i64)).collect();
        // incremental block: user 1 with exactly 5, user 2 with 4
        records.extend((0..5).map(|i| rec(1, i, 100 + i as i64)));
        records.extend((0..4).map(|i| rec(2, i, 200 + i as i64)));
        records.push(rec(0, 0, 300));
        let log = InteractionLog::from_records(records);
        let blocks = split_chronological(&log, 2, 0.6).unwrap();
        assert_eq!(blocks[1].eligible_users(), [1]);
        let sb = make_pairs(&blocks[1], &UserHistories::default(), HISTORY_WINDOW);
        assert!(sb.pairs.iter().chain(&sb.test_pairs).all(|p| p.user == 1));
    }

    #[test]
    fn block_left_empty_is_an_error() {
        let mut records: Vec<Interaction> = (0..12).map(|i| rec(0, i, i as i64)).collect();
        records.extend((0..8).map(|i| rec(i, 0, 100 + i as i64)));
        let log = InteractionLog::from_records(records);
        assert!(matches!(split_chronological(&log, 2, 0.6), Err(Error::Split(_))));
    }

    #[test]
    fn pair_counts() {
        let mut prior = UserHistories::default();
        prior.extend(&BlockInput {
            stage_index: 1,
            records: vec![rec(0, 99, 0)],
            min_interactions: 0,
        });
        let block = |n: usize| BlockInput {
            stage_index: 2,
            records: (0..n).map(|i| rec(0, i, 1 + i as i64)).collect(),
            min_interactions: 5,
        };
        let sb = make_pairs(&block(7), &prior, HISTORY_WINDOW);
        assert_eq!((sb.pairs.len(), sb.val_pairs.len(), sb.test_pairs.len()), (5, 1, 1));
        assert_eq!(sb.test_pairs[0].target, 6);
        assert_eq!(sb.val_pairs[0].target, 5);
        assert_eq!(sb.test_pairs[0].history, [99, 0, 1, 2, 3, 4, 5]);
        let sb = make_pairs(&block(5), &prior, HISTORY_WINDOW);
        assert_eq!((sb.pairs.len(), sb.val_pairs.len(), sb.test_pairs.len()), (3, 1, 1));
        let sb = make_pairs(&block(25), &prior, HISTORY_WINDOW);
        assert!(sb.pairs.iter().chain(&sb.test_pairs).all(|p| p.history.len() <= HISTORY_WINDOW));
        // without any earlier interaction the first item has no history
        let sb = make_pairs(&block(7), &UserHistories::default(), HISTORY_WINDOW);
        assert_eq!(sb.pairs.len(), 4);
    }

    #[test]
    fn test_targets_never_repeat_a_training_example() {
        let d = generate_drift(&small_spec()).unwrap();
        let blocks = split_chronological(&d.log, 5, 0.6).unwrap();
        for sb in make_all_pairs(&blocks) {
            for t in &sb.test_pairs {
                assert!(!sb.pairs.iter().any(|p| p.user == t.user && p.history == t.history && p.target == t.target));
            }
        }
    }

    #[test]
    fn user_disjoint_examples() {
        let log = InteractionLog::from_records((0..5).flat_map(|u| (0..3).map(move |i| rec(u, i, (u * 10 + i) as i64))).collect());
        let blocks = split_user_disjoint(&log, 5, 0.6, None, 1).unwrap();
        for b in &blocks {
            let users: std::collections::BTreeSet<usize> = b.records.iter().map(|r| r.user).collect();
            assert_eq!(users.len(), 1);
        }

        let d = generate_drift(&small_spec()).unwrap();
        let a = split_user_disjoint(&d.log, 5, 0.6, Some(0.05), 9).unwrap();
        let b = split_user_disjoint(&d.log, 5, 0.6, Some(0.05), 9).unwrap();
        assert_eq!(a, b);
        let mut owner = HashMap::new();
        for blk in &a {
            for r in &blk.records {
                assert_eq!(*owner.entry(r.user).or_insert(blk.stage_index), blk.stage_index);
            }
        }
        let targets = chronological_sizes(d.log.len(), 5, 0.6);
        for (blk, t) in a.iter().zip(targets) {
            assert!((blk.records.len() as f64 - t as f64).abs() <= 0.05 * t as f64);
        }
        assert!(matches!(
            split_user_disjoint(&log, 5, 0.6, Some(0.01), 1),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn code_assignment_examples() {
        let clusters = [0, 1, 0, 1, 0];
        let (book, trie) = assign_codes(&clusters, 4, 16, 7).unwrap();
        let t0: Vec<usize> = (0..5).filter(|i| clusters[*i] == 0).map(|i| book.code(i).tokens[0]).collect();
        assert!(t0.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(book.code(0).tokens[0], book.code(1).tokens[0]);
        assert_eq!(trie.num_items(), 5);
        assert_eq!(assign_codes(&clusters, 4, 16, 7).unwrap().0, book);

        // full capacity: K = 2, L = 3 → 8 items, 2 clusters of 4
        let clusters: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let (book, trie) = assign_codes(&clusters, 3, 2, 1).unwrap();
        assert_eq!(trie.num_items(), 8);
        let mut all: Vec<&Vec<usize>> = book.codes.iter().map(|c| &c.tokens).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 8);

        assert!(assign_codes(&[0, 1, 2], 2, 2, 0).is_err());
        assert!(assign_codes(&[0, 0, 0], 2, 2, 0).is_err());
    }
}
