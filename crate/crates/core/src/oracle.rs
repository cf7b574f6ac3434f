//! Exhaustive enumeration of small search spaces, exact costing, retrain
//! scores with an on-disk cache, and Pareto fronts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cellgraph::{CellGenotype, CellKind, CellTemplate, DiscreteArch, EdgeChoice, NetworkPlan, NodeGenotype};
use crate::costmodel::{exact_cost, M};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::opset::OpKind;
use crate::search::{retrain_eval, RetrainConfig};

pub const DEFAULT_CEILING: u64 = 10_000;

/// A network plan small enough to enumerate.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroSpace {
    pub plan: NetworkPlan,
    pub ceiling: u64,
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

fn choose(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut out = choose(n - 1, k);
    for mut c in choose(n - 1, k - 1) {
        c.push(n - 1);
        out.push(c);
    }
    out.sort();
    out
}

/// Number of discrete cells one template admits.
pub fn template_count(t: &CellTemplate) -> u128 {
    let ops = t.op_set.iter().filter(|&&k| k != OpKind::Zero).count() as u128;
    t.intermediates()
        .map(|j| binomial(j, t.keep(j)).saturating_mul(ops.saturating_pow(t.keep(j) as u32)))
        .fold(1, u128::saturating_mul)
}

/// Every discrete cell of a template, in canonical order.
pub fn enumerate_template(t: &CellTemplate) -> Vec<CellGenotype> {
    let ops: Vec<OpKind> = t.op_set.iter().copied().filter(|&k| k != OpKind::Zero).collect();
    let per_node: Vec<Vec<NodeGenotype>> = t
        .intermediates()
        .map(|j| {
            let mut v = Vec::new();
            for preds in choose(j, t.keep(j)) {
                for code in 0..ops.len().pow(preds.len() as u32) {
                    let mut c = code;
                    let mut inputs = vec![EdgeChoice { from: 0, op: ops[0] }; preds.len()];
                    for (slot, &from) in preds.iter().enumerate().rev() {
                        inputs[slot] = EdgeChoice { from, op: ops[c % ops.len()] };
                        c /= ops.len();
                    }
                    v.push(NodeGenotype { node: j, inputs });
                }
            }
            v
        })
        .collect();
    product(&per_node)
        .into_iter()
        .map(|nodes| CellGenotype { nodes })
        .collect()
}

/// Cartesian product, last factor varying fastest.
fn product<X: Clone>(factors: &[Vec<X>]) -> Vec<Vec<X>> {
    factors.iter().fold(vec![vec![]], |acc, f| {
        acc.iter()
            .flat_map(|prefix| {
                f.iter().map(move |x| {
                    let mut p = prefix.clone();
                    p.push(x.clone());
                    p
                })
            })
            .collect()
    })
}

impl MicroSpace {
    pub fn new(plan: NetworkPlan) -> Self {
        Self { plan, ceiling: DEFAULT_CEILING }
    }

    pub fn count(&self) -> Result<u128> {
        let space = self.plan.space()?;
        Ok(self
            .plan
            .kinds()
            .iter()
            .map(|&k| template_count(space.template(k)))
            .fold(1, u128::saturating_mul))
    }

    /// Every legal architecture exactly once, in canonical order.
    pub fn enumerate(&self) -> Result<ArchIter> {
        self.plan.validate()?;
        let count = self.count()?;
        if count > self.ceiling as u128 {
            return Err(Error::Ceiling { count, ceiling: self.ceiling as u128 });
        }
        let space = self.plan.space()?;
        let kinds = self.plan.kinds();
        let choices = kinds.iter().map(|&k| enumerate_template(space.template(k))).collect();
        Ok(ArchIter { kinds, choices, next: 0, total: count as usize })
    }
}

/// Mixed-radix walk over the per-kind cell choices.
#[derive(Debug, Clone)]
pub struct ArchIter {
    kinds: Vec<CellKind>,
    choices: Vec<Vec<CellGenotype>>,
    next: usize,
    total: usize,
}

impl Iterator for ArchIter {
    type Item = DiscreteArch;

    fn next(&mut self) -> Option<DiscreteArch> {
        if self.next >= self.total {
            return None;
        }
        let mut code = self.next;
        self.next += 1;
        let mut cells = std::collections::BTreeMap::new();
        for (kind, opts) in self.kinds.iter().zip(&self.choices).rev() {
            cells.insert(*kind, opts[code % opts.len()].clone());
            code /= opts.len();
        }
        Some(DiscreteArch { cells })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.total - self.next;
        (n, Some(n))
    }
}

impl ExactSizeIterator for ArchIter {}

/// An architecture with its exact cost and a score (higher is better).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredArch {
    pub arch: DiscreteArch,
    pub cost: [u64; M],
    pub score: f64,
}

/// `a` dominates `b`: no worse everywhere, strictly better somewhere.
/// Two missing (NaN) scores compare equal, so unscored sets get a cost-only front.
pub fn dominates(a: &ScoredArch, b: &ScoredArch) -> bool {
    let (sa, sb) = if a.score.is_nan() && b.score.is_nan() { (0.0, 0.0) } else { (a.score, b.score) };
    let no_worse = a.cost.iter().zip(&b.cost).all(|(x, y)| x <= y) && sa >= sb;
    let better = a.cost.iter().zip(&b.cost).any(|(x, y)| x < y) || sa > sb;
    no_worse && better
}

/// Indices (ascending) of the non-dominated entries.
pub fn pareto_front(items: &[ScoredArch]) -> Vec<usize> {
    // Every dominator sorts before what it dominates, and dominance is
    // transitive, so comparing against the front found so far suffices.
    let mut order: Vec<usize> = (0..items.len()).collect();
    let total = |i: usize| items[i].cost.iter().map(|&c| c as u128).sum::<u128>();
    order.sort_by(|&a, &b| {
        items[b]
            .score
            .total_cmp(&items[a].score)
            .then(total(a).cmp(&total(b)))
    });
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        if !front.iter().any(|&f| dominates(&items[f], &items[i])) {
            front.push(i);
        }
    }
    front.sort_unstable();
    front
}

/// Arch hash, params, flops, score, on_front.
pub fn pareto_csv(items: &[ScoredArch]) -> String {
    let front = pareto_front(items);
    let mut s = String::from("arch_hash,params,flops,score,on_front\n");
    for (i, it) in items.iter().enumerate() {
        let score = if it.score.is_nan() { String::new() } else { it.score.to_string() };
        let _ = writeln!(
            s,
            "{},{},{},{score},{}",
            it.arch.hash(),
            it.cost[0],
            it.cost[1],
            front.binary_search(&i).is_ok()
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheEntry {
    arch_hash: String,
    config_hash: String,
    score: f64,
}

/// Retrain scores on disk, keyed by architecture hash and retrain config.
#[derive(Debug, Clone)]
pub struct ScoreCache {
    dir: PathBuf,
    config_hash: String,
}

impl ScoreCache {
    pub fn new(dir: &Path, plan: &NetworkPlan, cfg: &RetrainConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let doc = serde_json::to_string(&(plan, cfg))?;
        let digest = Sha256::digest(doc.as_bytes());
        Ok(Self { dir: dir.to_path_buf(), config_hash: hex::encode(&digest[..8]) })
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}-{}.json", self.config_hash))
    }

    pub fn get(&self, arch: &DiscreteArch) -> Result<Option<f64>> {
        let p = self.path(&arch.hash());
        if !p.exists() {
            return Ok(None);
        }
        let e: CacheEntry = serde_json::from_str(&std::fs::read_to_string(p)?)?;
        Ok(Some(e.score))
    }

    pub fn put(&self, arch: &DiscreteArch, score: f64) -> Result<()> {
        let hash = arch.hash();
        let e = CacheEntry { arch_hash: hash.clone(), config_hash: self.config_hash.clone(), score };
        std::fs::write(self.path(&hash), serde_json::to_string_pretty(&e)? + "\n")?;
        let arch_file = self.dir.join(format!("{hash}.arch.json"));
        if !arch_file.exists() {
            std::fs::write(arch_file, arch.to_json())?;
        }
        Ok(())
    }
}

/// Costs every architecture and, given a retrain config, scores each by a
/// short retrain (cached when `cache` is set). Work is split across
/// `threads` workers; results keep the canonical order.
pub fn score_space(
    space: &MicroSpace,
    data: Option<(&Dataset, &Dataset, &RetrainConfig)>,
    cache: Option<&ScoreCache>,
    threads: usize,
) -> Result<Vec<ScoredArch>> {
    let archs: Vec<DiscreteArch> = space.enumerate()?.collect();
    let plan = &space.plan;
    let score_one = |a: &DiscreteArch| -> Result<ScoredArch> {
        let cost = exact_cost(a, plan)?;
        let score = match data {
            None => f64::NAN,
            Some((train, val, cfg)) => match cache.map(|c| c.get(a)).transpose()?.flatten() {
                Some(s) => s,
                None => {
                    let s = retrain_eval(a, plan, train, val, cfg)?.val_accuracy;
                    if let Some(c) = cache {
                        c.put(a, s)?;
                    }
                    s
                }
            },
        };
        Ok(ScoredArch { arch: a.clone(), cost, score })
    };
    let threads = threads.max(1).min(archs.len().max(1));
    if threads == 1 {
        return archs.iter().map(score_one).collect();
    }
    let chunk = archs.len().div_ceil(threads);
    let parts: Vec<Result<Vec<ScoredArch>>> = std::thread::scope(|s| {
        let handles: Vec<_> = archs
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(score_one).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(archs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
