//! Utility-aligned contrastive training of a projection head.
//!
//! Items whose per-server utility profiles look alike (cosine similarity of
//! mean-centered utility vectors) are pulled together in representation space
//! and dissimilar ones pushed apart with an InfoNCE loss. The trained head
//! maps raw embeddings to the contexts the bandit learner sees.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{stream_rng, Stream};

/// Offline items: raw embeddings and their per-server utility vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    embeddings: Vec<Vec<f64>>,
    utilities: Vec<Vec<f64>>,
}

impl OfflineDataset {
    pub fn new(embeddings: Vec<Vec<f64>>, utilities: Vec<Vec<f64>>) -> Result<Self> {
        check_dim(embeddings.len(), utilities.len())?;
        if let (Some(e), Some(u)) = (embeddings.first(), utilities.first()) {
            for x in &embeddings {
                check_dim(e.len(), x.len())?;
            }
            for v in &utilities {
                check_dim(u.len(), v.len())?;
            }
        }
        Ok(OfflineDataset { embeddings, utilities })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn utilities(&self) -> &[Vec<f64>] {
        &self.utilities
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Result of [`balanced_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedSample {
    pub dataset: OfflineDataset,
    /// Pool indices of the chosen items, grouped by model.
    pub chosen: Vec<usize>,
    /// Models whose group held fewer than the requested items.
    pub short_groups: Vec<usize>,
}

/// Groups `pool` by best model and draws `per_model` items uniformly from each
/// non-empty group. Smaller groups are taken whole and reported.
pub fn balanced_sample(
    pool: &[(Vec<f64>, Vec<f64>)],
    per_model: usize,
    seed: u64,
) -> Result<BalancedSample> {
    let n_models = pool.first().map_or(0, |(_, u)| u.len());
    let mut groups = vec![Vec::new(); n_models];
    for (i, (_, u)) in pool.iter().enumerate() {
        check_dim(n_models, u.len())?;
        groups[argmax(u)].push(i);
    }
    let mut rng = stream_rng(seed, Stream::Contrastive);
    let mut chosen = Vec::new();
    let mut short_groups = Vec::new();
    for (model, members) in groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < per_model {
            short_groups.push(model);
            chosen.extend_from_slice(members);
            continue;
        }
        let mut picks: Vec<usize> = index::sample(&mut rng, members.len(), per_model)
            .into_iter()
            .map(|k| members[k])
            .collect();
        picks.sort_unstable();
        chosen.extend(picks);
    }
    let dataset = OfflineDataset::new(
        chosen.iter().map(|&i| pool[i].0.clone()).collect(),
        chosen.iter().map(|&i| pool[i].1.clone()).collect(),
    )?;
    Ok(BalancedSample { dataset, chosen, short_groups })
}

fn centered(u: &[f64]) -> Vec<f64> {
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    u.iter().map(|v| v - mean).collect()
}

/// Cosine similarity of the mean-centered vectors; 0 if either is constant.
pub fn utility_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let (ca, cb) = (centered(a), centered(b));
    let na = ca.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = cb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Full pairwise similarity matrix of a dataset's utility vectors.
pub fn similarity_matrix(dataset: &OfflineDataset) -> Result<Vec<Vec<f64>>> {
    let u = dataset.utilities();
    let mut c = vec![vec![0.0; u.len()]; u.len()];
    for i in 0..u.len() {
        for j in i..u.len() {
            let s = utility_similarity(&u[i], &u[j])?;
            c[i][j] = s;
            c[j][i] = s;
        }
    }
    Ok(c)
}

/// One anchor with its positive and hard negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSelection {
    pub anchor: usize,
    pub positive: usize,
    /// Ordered from least to most similar.
    pub negatives: Vec<usize>,
}

/// Pair-selection thresholds and the negative cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRule {
    pub iota_pos: f64,
    pub iota_neg: f64,
    pub k_neg: usize,
}

impl Default for PairRule {
    fn default() -> Self {
        PairRule { iota_pos: 0.6, iota_neg: 0.3, k_neg: 64 }
    }
}

/// Picks, for every anchor with a non-constant utility vector, the most
/// similar item above `iota_pos` and up to `k_neg` least similar items below
/// `iota_neg`. Anchors lacking either are skipped.
pub fn select_pairs(dataset: &OfflineDataset, rule: &PairRule) -> Result<Vec<PairSelection>> {
    let c = similarity_matrix(dataset)?;
    Ok(select_pairs_from(&c, dataset.utilities(), rule))
}

fn select_pairs_from(c: &[Vec<f64>], utilities: &[Vec<f64>], rule: &PairRule) -> Vec<PairSelection> {
    let mut out = Vec::new();
    for i in 0..c.len() {
        if centered(&utilities[i]).iter().all(|v| *v == 0.0) {
            continue;
        }
        let mut positive: Option<usize> = None;
        let mut negatives = Vec::new();
        for j in 0..c.len() {
            if j == i {
                continue;
            }
            if c[i][j] > rule.iota_pos && positive.is_none_or(|p| c[i][j] > c[i][p]) {
                positive = Some(j);
            }
            if c[i][j] < rule.iota_neg {
                negatives.push(j);
            }
        }
        negatives.sort_by(|&a, &b| c[i][a].total_cmp(&c[i][b]).then(a.cmp(&b)));
        negatives.truncate(rule.k_neg);
        if let (Some(positive), false) = (positive, negatives.is_empty()) {
            out.push(PairSelection { anchor: i, positive, negatives });
        }
    }
    out
}

/// Two-layer rectifier network `z = W₂·relu(W₁x + b₁) + b₂`.
///
/// Parameters live in one flat vector laid out as `W₁` (row-major), `b₁`,
/// `W₂` (row-major), `b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    d_in: usize,
    hidden: usize,
    d_out: usize,
    params: Vec<f64>,
}

struct ForwardCache {
    pre: Vec<f64>,
    act: Vec<f64>,
    out: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    d_in: usize,
    hidden: usize,
    d_out: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_D_OUT: usize = 16;

impl ProjectionHead {
    /// He-initialized weights, zero biases.
    pub fn init(d_in: usize, hidden: usize, d_out: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || hidden == 0 || d_out == 0 {
            return Err(Error::Config("projection head dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = ProjectionHead {
            d_in,
            hidden,
            d_out,
            params: vec![0.0; hidden * d_in + hidden + d_out * hidden + d_out],
        };
        let s1 = (2.0 / d_in as f64).sqrt();
        let s2 = (2.0 / hidden as f64).sqrt();
        let (w1, b1, w2, _) = head.offsets();
        for p in &mut head.params[w1..b1] {
            *p = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        for p in &mut head.params[w2..w2 + d_out * hidden] {
            *p = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(head)
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    // start of W1, b1, W2, b2
    fn offsets(&self) -> (usize, usize, usize, usize) {
        let b1 = self.hidden * self.d_in;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.d_out * self.hidden;
        (0, b1, w2, b2)
    }

    fn forward_cached(&self, x: &[f64]) -> ForwardCache {
        let (_, b1, w2, b2) = self.offsets();
        let p = &self.params;
        let pre: Vec<f64> = (0..self.hidden)
            .map(|h| {
                let row = &p[h * self.d_in..(h + 1) * self.d_in];
                p[b1 + h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let out = (0..self.d_out)
            .map(|o| {
                let row = &p[w2 + o * self.hidden..w2 + (o + 1) * self.hidden];
                p[b2 + o] + row.iter().zip(&act).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        ForwardCache { pre, act, out }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.d_in, x.len())?;
        Ok(self.forward_cached(x).out)
    }

    // Accumulates dℓ/dparams given dℓ/dz.
    fn backward(&self, x: &[f64], cache: &ForwardCache, dz: &[f64], grad: &mut [f64]) {
        let (_, b1, w2, b2) = self.offsets();
        let p = &self.params;
        let mut dact = vec![0.0; self.hidden];
        for o in 0..self.d_out {
            grad[b2 + o] += dz[o];
            for h in 0..self.hidden {
                grad[w2 + o * self.hidden + h] += dz[o] * cache.act[h];
                dact[h] += dz[o] * p[w2 + o * self.hidden + h];
            }
        }
        for h in 0..self.hidden {
            if cache.pre[h] <= 0.0 {
                continue;
            }
            grad[b1 + h] += dact[h];
            for (i, v) in x.iter().enumerate() {
                grad[h * self.d_in + i] += dact[h] * v;
            }
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let (_, b1, w2, b2) = self.offsets();
        let file = HeadFile {
            d_in: self.d_in,
            hidden: self.hidden,
            d_out: self.d_out,
            w1: self.params[..b1].to_vec(),
            b1: self.params[b1..w2].to_vec(),
            w2: self.params[w2..b2].to_vec(),
            b2: self.params[b2..].to_vec(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)? + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let f: HeadFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        check_dim(f.hidden * f.d_in, f.w1.len())?;
        check_dim(f.hidden, f.b1.len())?;
        check_dim(f.d_out * f.hidden, f.w2.len())?;
        check_dim(f.d_out, f.b2.len())?;
        let params: Vec<f64> = [f.w1, f.b1, f.w2, f.b2].concat();
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("projection head has non-finite weights".into()));
        }
        Ok(ProjectionHead { d_in: f.d_in, hidden: f.hidden, d_out: f.d_out, params })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// InfoNCE loss of one anchor and its gradient with respect to the head parameters.
///
/// Similarities are raw dot products of head outputs divided by `tau`.
pub fn infonce_loss(
    head: &ProjectionHead,
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature {tau} must be positive")));
    }
    check_dim(head.d_in, anchor.len())?;
    check_dim(head.d_in, positive.len())?;
    for n in negatives {
        check_dim(head.d_in, n.len())?;
    }
    let ca = head.forward_cached(anchor);
    let cp = head.forward_cached(positive);
    let cn: Vec<ForwardCache> = negatives.iter().map(|x| head.forward_cached(x)).collect();
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(dot(&ca.out, &cp.out) / tau);
    logits.extend(cn.iter().map(|c| dot(&ca.out, &c.out) / tau));
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + total.ln();
    let loss = lse - logits[0];
    let w: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();

    let mut grad = vec![0.0; head.params.len()];
    let d = head.d_out;
    let mut dz_anchor = vec![0.0; d];
    let c0 = (w[0] - 1.0) / tau;
    for k in 0..d {
        dz_anchor[k] += c0 * cp.out[k];
    }
    let dz_pos: Vec<f64> = ca.out.iter().map(|v| c0 * v).collect();
    head.backward(positive, &cp, &dz_pos, &mut grad);
    for (n, (x, c)) in negatives.iter().zip(&cn).enumerate() {
        let wk = w[n + 1] / tau;
        for k in 0..d {
            dz_anchor[k] += wk * c.out[k];
        }
        let dz: Vec<f64> = ca.out.iter().map(|v| wk * v).collect();
        head.backward(x, c, &dz, &mut grad);
    }
    head.backward(anchor, &ca, &dz_anchor, &mut grad);
    Ok((loss, grad))
}

/// Contrastive training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub iota_pos: f64,
    pub iota_neg: f64,
    pub k_neg: usize,
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 0.001,
            iota_pos: 0.6,
            iota_neg: 0.3,
            k_neg: 64,
            tau: 0.07,
        }
    }
}

impl TrainConfig {
    pub fn rule(&self) -> PairRule {
        PairRule { iota_pos: self.iota_pos, iota_neg: self.iota_neg, k_neg: self.k_neg }
    }
}

/// Losses observed during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Summed loss before each epoch, then once more after the last.
    pub losses: Vec<f64>,
    pub anchors: usize,
}

/// Summed InfoNCE loss over the selected anchors and its gradient.
pub fn total_loss(
    head: &ProjectionHead,
    dataset: &OfflineDataset,
    pairs: &[PairSelection],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    let x = dataset.embeddings();
    let mut loss = 0.0;
    let mut grad = vec![0.0; head.params.len()];
    for p in pairs {
        let negs: Vec<&[f64]> = p.negatives.iter().map(|&j| x[j].as_slice()).collect();
        let (l, g) = infonce_loss(head, &x[p.anchor], &x[p.positive], &negs, tau)?;
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss, grad))
}

/// Full-batch gradient descent on the summed InfoNCE loss.
///
/// Similarities depend only on utilities, so the pairs are fixed across
/// epochs. Fails if no anchor qualifies or the loss exceeds ten times its
/// initial value.
pub fn train_head(
    dataset: &OfflineDataset,
    head: &mut ProjectionHead,
    config: &TrainConfig,
) -> Result<TrainReport> {
    check_dim(head.d_in, dataset.embedding_dim())?;
    let pairs = select_pairs(dataset, &config.rule())?;
    if pairs.is_empty() {
        return Err(Error::Training(
            "no anchor has both a positive and a negative under the thresholds".into(),
        ));
    }
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for _ in 0..config.epochs {
        let (loss, grad) = total_loss(head, dataset, &pairs, config.tau)?;
        check_divergence(&losses, loss)?;
        losses.push(loss);
        head.params
            .iter_mut()
            .zip(&grad)
            .for_each(|(p, g)| *p -= config.learning_rate * g);
    }
    let (loss, _) = total_loss(head, dataset, &pairs, config.tau)?;
    check_divergence(&losses, loss)?;
    losses.push(loss);
    Ok(TrainReport { losses, anchors: pairs.len() })
}

fn check_divergence(history: &[f64], loss: f64) -> Result<()> {
    let initial = history.first().copied().unwrap_or(loss);
    if !loss.is_finite() || loss > 10.0 * initial {
        return Err(Error::Training(format!(
            "loss diverged: {loss} against initial {initial}"
        )));
    }
    Ok(())
}

/// Two utility clusters over `n_servers`, each item's embedding a noisy copy
/// of its cluster's random unit center. Returns the dataset and cluster labels.
pub fn two_cluster_toy(
    per_cluster: usize,
    d_in: usize,
    n_servers: usize,
    seed: u64,
) -> Result<(OfflineDataset, Vec<usize>)> {
    if n_servers < 2 {
        return Err(Error::Config("the toy needs at least two servers".into()));
    }
    let mut rng = stream_rng(seed, Stream::Contrastive);
    let mut centers = Vec::new();
    for _ in 0..2 {
        let v: Vec<f64> = (0..d_in).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        centers.push(v.into_iter().map(|x| x / n).collect::<Vec<f64>>());
    }
    let (mut emb, mut util, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..2 * per_cluster {
        let c = i % 2;
        emb.push(
            centers[c]
                .iter()
                .map(|v| v + 0.3 / (d_in as f64).sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        // cluster 0 favours server 0, cluster 1 favours server 1
        util.push(
            (0..n_servers)
                .map(|j| {
                    let base = if j == c { 0.9 } else { 0.2 };
                    base + rng.random_range(-0.05..0.05)
                })
                .collect(),
        );
        labels.push(c);
    }
    Ok((OfflineDataset::new(emb, util)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn similarity_examples() {
        assert_abs_diff_eq!(utility_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(utility_similarity(&[0.3, 0.9, 0.1], &[0.3, 0.9, 0.1]).unwrap(), 1.0, epsilon = 1e-15);
        // high-precision reference: 0.994849751167109793519
        assert_abs_diff_eq!(
            utility_similarity(&[1.0, 0.0, 0.0], &[0.9, 0.1, 0.0]).unwrap(),
            0.994_849_751_167_109_8,
            epsilon = 1e-14
        );
        assert_eq!(utility_similarity(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn balanced_sampling() {
        let mut pool = Vec::new();
        for i in 0..20 {
            let u = if i % 2 == 0 { vec![0.9, 0.1] } else { vec![0.1, 0.9] };
            pool.push((vec![i as f64], u));
        }
        let s = balanced_sample(&pool, 5, 1).unwrap();
        assert_eq!(s.dataset.len(), 10);
        assert!(s.short_groups.is_empty());
        let first = s.dataset.utilities()[..5].iter().all(|u| argmax(u) == 0);
        let second = s.dataset.utilities()[5..].iter().all(|u| argmax(u) == 1);
        assert!(first && second);

        let s = balanced_sample(&pool, 15, 1).unwrap();
        assert_eq!(s.dataset.len(), 20);
        assert_eq!(s.short_groups, vec![0, 1]);
        assert_eq!(argmax(&[0.4, 0.4, 0.1]), 0);
    }

    #[test]
    fn hand_built_pair_sets() {
        // similarity matrix chosen by hand:
        //       0     1     2     3
        // 0   1.0   0.8   0.7   0.1
        // 1   0.8   1.0   0.5  -0.2
        // 2   0.7   0.5   1.0   0.4
        // 3   0.1  -0.2   0.4   1.0
        let c = vec![
            vec![1.0, 0.8, 0.7, 0.1],
            vec![0.8, 1.0, 0.5, -0.2],
            vec![0.7, 0.5, 1.0, 0.4],
            vec![0.1, -0.2, 0.4, 1.0],
        ];
        let u = vec![vec![1.0, 0.0]; 4];
        let pairs = select_pairs_from(&c, &u, &PairRule { iota_pos: 0.6, iota_neg: 0.3, k_neg: 64 });
        // 0: P = {1, 2}, N = {3}; 1: P = {0}, N = {3}; 2: P = {0}, N = {} -> skipped; 3: P = {} -> skipped
        assert_eq!(
            pairs,
            vec![
                PairSelection { anchor: 0, positive: 1, negatives: vec![3] },
                PairSelection { anchor: 1, positive: 0, negatives: vec![3] },
            ]
        );
        let none = select_pairs_from(&c, &u, &PairRule { iota_pos: 0.95, iota_neg: -0.5, k_neg: 4 });
        assert!(none.is_empty());
    }

    #[test]
    fn pairs_respect_thresholds_and_cap() {
        let (ds, _) = two_cluster_toy(10, 6, 3, 2).unwrap();
        let rule = PairRule { iota_pos: 0.6, iota_neg: 0.3, k_neg: 4 };
        let c = similarity_matrix(&ds).unwrap();
        for p in select_pairs(&ds, &rule).unwrap() {
            assert!(c[p.anchor][p.positive] > rule.iota_pos);
            assert!(p.negatives.len() <= 4 && !p.negatives.is_empty());
            let max_neg = p.negatives.iter().map(|&j| c[p.anchor][j]).fold(f64::MIN, f64::max);
            // every excluded candidate is at least as similar as the kept ones
            for j in 0..ds.len() {
                if j != p.anchor && c[p.anchor][j] < rule.iota_neg && !p.negatives.contains(&j) {
                    assert!(c[p.anchor][j] >= max_neg);
                }
            }
            for &j in &p.negatives {
                assert!(c[p.anchor][j] < rule.iota_neg);
            }
        }
    }

    #[test]
    fn symmetric_case_is_ln2() {
        let head = ProjectionHead::init(4, 8, 3, 1).unwrap();
        let x = [0.3, -0.1, 0.5, 0.2];
        let (loss, _) = infonce_loss(&head, &x, &x, &[&x], 1.0).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(infonce_loss(&head, &x, &x, &[], 0.0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for config in 0..10 {
            let head = ProjectionHead::init(5, 7, 4, config).unwrap();
            let mut v = || -> Vec<f64> { (0..5).map(|_| rng.random_range(-1.0..1.0)).collect() };
            let (a, p, n1, n2) = (v(), v(), v(), v());
            let negs = [n1.as_slice(), n2.as_slice()];
            let tau = 0.5;
            let (_, g) = infonce_loss(&head, &a, &p, &negs, tau).unwrap();
            for k in 0..head.params().len() {
                let h = 1e-6;
                let mut up = head.clone();
                up.params_mut()[k] += h;
                let mut dn = head.clone();
                dn.params_mut()[k] -= h;
                let fd = (infonce_loss(&up, &a, &p, &negs, tau).unwrap().0
                    - infonce_loss(&dn, &a, &p, &negs, tau).unwrap().0)
                    / (2.0 * h);
                let scale = g[k].abs().max(fd.abs()).max(1e-3);
                assert!((g[k] - fd).abs() / scale <= 1e-4, "param {k}: {} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let (ds, _) = two_cluster_toy(6, 4, 2, 1).unwrap();
        let mut head = ProjectionHead::init(4, 8, 3, 1).unwrap();
        let before = head.clone();
        train_head(&ds, &mut head, &TrainConfig { learning_rate: 0.0, ..Default::default() }).unwrap();
        assert_eq!(head, before);
    }

    #[test]
    fn toy_training_reduces_loss_and_clusters() {
        let (ds, labels) = two_cluster_toy(10, 8, 3, 7).unwrap();
        let mut head = ProjectionHead::init(8, 32, 16, 7).unwrap();
        let cfg = TrainConfig { epochs: 10, learning_rate: 0.002, ..Default::default() };
        let report = train_head(&ds, &mut head, &cfg).unwrap();
        assert!(report.losses.last().unwrap() < report.losses.first().unwrap());
        assert!(report.losses.iter().all(|l| *l >= 0.0));
        let z: Vec<Vec<f64>> = ds.embeddings().iter().map(|x| head.forward(x).unwrap()).collect();
        let (mut intra, mut inter, mut ni, mut nx) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..z.len() {
            for j in i + 1..z.len() {
                let s = dot(&z[i], &z[j]);
                if labels[i] == labels[j] {
                    intra += s;
                    ni += 1.0;
                } else {
                    inter += s;
                    nx += 1.0;
                }
            }
        }
        assert!(intra / ni > inter / nx);
    }

    #[test]
    fn head_json_round_trip() {
        let head = ProjectionHead::init(3, 4, 2, 9).unwrap();
        let dir = std::env::temp_dir().join(format!("head-{}.json", std::process::id()));
        head.write_json(&dir).unwrap();
        let back = ProjectionHead::read_json(&dir).unwrap();
        std::fs::remove_file(&dir).ok();
        assert_eq!(head, back);
        assert_eq!(back.forward(&[0.1, 0.2, 0.3]).unwrap().len(), 2);
    }

    #[test]
    fn divergence_is_reported() {
        assert!(check_divergence(&[1.0, 2.0], 9.9).is_ok());
        assert!(matches!(check_divergence(&[1.0, 2.0], 10.5), Err(Error::Training(_))));
        assert!(matches!(check_divergence(&[1.0], f64::NAN), Err(Error::Training(_))));
        let (ds, _) = two_cluster_toy(6, 4, 2, 3).unwrap();
        let mut head = ProjectionHead::init(4, 8, 3, 3).unwrap();
        let cfg = TrainConfig { learning_rate: 1e4, epochs: 20, ..Default::default() };
        if let Ok(report) = train_head(&ds, &mut head, &cfg) {
            let first = report.losses[0];
            assert!(report.losses.iter().all(|l| *l <= 10.0 * first));
        }
    }

}
