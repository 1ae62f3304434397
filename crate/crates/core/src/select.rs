//! Gene / cell-type pair selection: curated markers, one-vs-rest
//! differential expression, and noise suppression.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::reference::ReferenceDataset;
use crate::stats;

pub type Pair = (String, String);

/// Largest pooled sample size for which Wilcoxon p-values are enumerated.
pub const EXACT_LIMIT: usize = 12;

/// Genes whose reference dropout rate exceeds this are not tested.
pub const DROPOUT_CEILING: f64 = 0.95;

/// Load `{gene: [cell types]}` into a set of pairs.
pub fn load_marker_list(path: &Path) -> Result<BTreeSet<Pair>> {
    let raw: BTreeMap<String, Vec<String>> = read_json(path)?;
    Ok(raw
        .into_iter()
        .flat_map(|(g, types)| types.into_iter().map(move |t| (g.clone(), t)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankSumTest {
    /// Mann-Whitney U of the first sample: pairs with a > b, ties counting 1/2.
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_term = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = r;
        }
        let t = (end - start) as f64;
        tie_term += t * t * t - t;
        start = end;
    }
    (ranks, tie_term)
}

/// Enumerate every way of choosing which pooled ranks belong to the first
/// group; the two-sided p-value is the share of splits at least as extreme.
fn exact_p(ranks: &[f64], n_a: usize, u_obs: f64) -> f64 {
    let n = ranks.len();
    let n_b = n - n_a;
    let centre = (n_a * n_b) as f64 / 2.0;
    let offset = (n_a * (n_a + 1)) as f64 / 2.0;
    let observed = (u_obs - centre).abs();
    let (mut extreme, mut total) = (0u64, 0u64);
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != n_a {
            continue;
        }
        let r_sum: f64 = (0..n)
            .filter(|k| mask >> k & 1 == 1)
            .map(|k| ranks[k])
            .sum();
        total += 1;
        if (r_sum - offset - centre).abs() >= observed - 1e-9 {
            extreme += 1;
        }
    }
    extreme as f64 / total as f64
}

/// Two-sided Wilcoxon rank-sum (Mann-Whitney) test with mid-ranks for ties.
///
/// Small problems (pooled size at most [`EXACT_LIMIT`]) are enumerated;
/// larger ones use the normal approximation with tie-corrected variance and
/// a continuity correction.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<RankSumTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty(
            "both Wilcoxon samples need at least one value".into(),
        ));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, tie_term) = midranks(&pooled);
    let (n_a, n_b) = (a.len() as f64, b.len() as f64);
    let n = n_a + n_b;
    let r_a: f64 = ranks[..a.len()].iter().sum();
    let u = r_a - n_a * (n_a + 1.0) / 2.0;
    if pooled.len() <= EXACT_LIMIT {
        return Ok(RankSumTest {
            u,
            p_value: exact_p(&ranks, a.len(), u),
            exact: true,
        });
    }
    let mean = n_a * n_b / 2.0;
    let var = n_a * n_b / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
        (2.0 * stats::normal_sf(z)).min(1.0)
    };
    Ok(RankSumTest {
        u,
        p_value,
        exact: false,
    })
}

/// Benjamini-Hochberg step-up adjusted p-values, in input order.
pub fn benjamini_hochberg(pvalues: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Invalid(format!("p-value {p} outside [0, 1]")));
    }
    let n = pvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| pvalues[i].total_cmp(&pvalues[j]).then(i.cmp(&j)));
    let mut adjusted = vec![0.0; n];
    let mut running = 1.0f64;
    for (rank, &idx) in order.iter().enumerate().rev() {
        let candidate = pvalues[idx] * n as f64 / (rank + 1) as f64;
        running = running.min(candidate);
        adjusted[idx] = running.min(1.0);
    }
    Ok(adjusted)
}

/// log2 of the ratio of linear-scale means of two log2-scale samples.
pub fn log2_fold_change(a: &[f64], b: &[f64], pseudo: f64) -> f64 {
    let lin_mean = |xs: &[f64]| xs.iter().map(|x| x.exp2()).sum::<f64>() / xs.len() as f64;
    ((lin_mean(a) + pseudo) / (lin_mean(b) + pseudo)).log2()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Marker,
    Stability,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub p_adj: f64,
    pub log2_fc: f64,
    /// -log10(p_adj) * |log2 FC|.
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionParams {
    pub fdr_threshold: f64,
    pub lfc_threshold: f64,
    pub noise_quantile: f64,
    /// Pseudo-count added to linear-scale means in fold changes.
    pub pseudo_count: f64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        SelectionParams {
            fdr_threshold: 0.01,
            lfc_threshold: 1.0,
            noise_quantile: 0.10,
            pseudo_count: 1.0,
        }
    }
}

/// Selected pairs with their provenance and differential-expression score.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairSelection {
    entries: BTreeMap<Pair, (Provenance, Option<f64>)>,
    /// Pairs that passed the statistical filters before noise suppression.
    stability: BTreeSet<Pair>,
}

#[derive(Serialize, Deserialize)]
struct SelectionRecord {
    gene: String,
    cell_type: String,
    provenance: Provenance,
    score: Option<f64>,
}

impl PairSelection {
    pub fn from_entries(
        entries: impl IntoIterator<Item = (Pair, Provenance, Option<f64>)>,
    ) -> Self {
        PairSelection {
            entries: entries
                .into_iter()
                .map(|(p, prov, s)| (p, (prov, s)))
                .collect(),
            stability: BTreeSet::new(),
        }
    }

    /// Every (gene, cell type) combination, tagged as stability pairs.
    pub fn all_pairs(genes: &[String], cell_types: &[String]) -> Self {
        PairSelection::from_entries(genes.iter().flat_map(|g| {
            cell_types
                .iter()
                .map(move |c| ((g.clone(), c.clone()), Provenance::Stability, None))
        }))
    }

    pub fn pairs(&self) -> impl Iterator<Item = &Pair> {
        self.entries.keys()
    }

    pub fn contains(&self, gene: &str, cell_type: &str) -> bool {
        self.entries
            .contains_key(&(gene.to_string(), cell_type.to_string()))
    }

    pub fn provenance(&self, pair: &Pair) -> Option<Provenance> {
        self.entries.get(pair).map(|e| e.0)
    }

    pub fn score(&self, pair: &Pair) -> Option<f64> {
        self.entries.get(pair).and_then(|e| e.1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Genes appearing in any selected pair, sorted.
    pub fn genes(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.entries.keys().map(|(g, _)| g).collect();
        set.into_iter().cloned().collect()
    }

    pub fn stability_set(&self) -> &BTreeSet<Pair> {
        &self.stability
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<SelectionRecord> = self
            .entries
            .iter()
            .map(|((g, c), (prov, score))| SelectionRecord {
                gene: g.clone(),
                cell_type: c.clone(),
                provenance: *prov,
                score: *score,
            })
            .collect();
        write_json(path, &records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<SelectionRecord> = read_json(path)?;
        Ok(PairSelection::from_entries(
            records
                .into_iter()
                .map(|r| ((r.gene, r.cell_type), r.provenance, r.score)),
        ))
    }
}

/// One-vs-rest statistics for every (gene, cell type) in the reference,
/// with BH adjustment across all tests. Genes above the dropout ceiling get
/// no entry.
pub fn one_vs_rest(reference: &ReferenceDataset, pseudo: f64) -> Result<BTreeMap<Pair, PairStats>> {
    let members = reference.members();
    let values = reference.values();
    let n_cells = reference.cells().len();
    let mut keys = Vec::new();
    let mut raw_p = Vec::new();
    let mut lfcs = Vec::new();
    for (g, gene) in reference.genes().iter().enumerate() {
        let row: Vec<f64> = values.row(g).iter().copied().collect();
        let zeros = row.iter().filter(|v| **v == 0.0).count();
        if zeros as f64 / n_cells as f64 > DROPOUT_CEILING {
            continue;
        }
        for (c, cells) in members.iter().enumerate() {
            let inside: Vec<f64> = cells.iter().map(|&m| row[m]).collect();
            let outside: Vec<f64> = reference
                .labels()
                .iter()
                .enumerate()
                .filter(|(_, &l)| l != c)
                .map(|(m, _)| row[m])
                .collect();
            if outside.is_empty() {
                continue;
            }
            let test = wilcoxon_rank_sum(&inside, &outside)?;
            keys.push((gene.clone(), reference.cell_types()[c].clone()));
            raw_p.push(test.p_value);
            lfcs.push(log2_fold_change(&inside, &outside, pseudo));
        }
    }
    let adjusted = benjamini_hochberg(&raw_p)?;
    Ok(keys
        .into_iter()
        .zip(adjusted)
        .zip(lfcs)
        .map(|((k, p_adj), lfc)| {
            let score = -p_adj.max(f64::MIN_POSITIVE).log10() * lfc.abs();
            (
                k,
                PairStats {
                    p_adj,
                    log2_fc: lfc,
                    score,
                },
            )
        })
        .collect())
}

/// Tripartite selection: markers, plus one-vs-rest DE pairs passing the FDR
/// and fold-change thresholds whose DE score is not below the
/// `noise_quantile` quantile (inverse empirical CDF) of the stability set.
pub fn select_pairs(
    reference: &ReferenceDataset,
    markers: &BTreeSet<Pair>,
    params: &SelectionParams,
) -> Result<PairSelection> {
    if !(params.fdr_threshold > 0.0 && params.lfc_threshold >= 0.0 && params.pseudo_count > 0.0) {
        return Err(Error::Invalid(
            "selection thresholds must be positive".into(),
        ));
    }
    if !(params.noise_quantile > 0.0 && params.noise_quantile < 1.0) {
        return Err(Error::Invalid(format!(
            "noise quantile must lie in (0, 1), got {}",
            params.noise_quantile
        )));
    }
    let tested = one_vs_rest(reference, params.pseudo_count)?;
    let stability: BTreeSet<Pair> = tested
        .iter()
        .filter(|(_, s)| s.p_adj < params.fdr_threshold && s.log2_fc.abs() > params.lfc_threshold)
        .map(|(k, _)| k.clone())
        .collect();
    let scores: Vec<f64> = stability.iter().map(|k| tested[k].score).collect();
    let cutoff = stats::quantile_lower(&scores, params.noise_quantile);
    let survivors: BTreeSet<&Pair> = stability
        .iter()
        .filter(|k| tested[*k].score >= cutoff)
        .collect();

    let mut entries = BTreeMap::new();
    for pair in survivors {
        entries.insert(
            pair.clone(),
            (Provenance::Stability, Some(tested[pair].score)),
        );
    }
    for pair in markers {
        let score = tested.get(pair).map(|s| s.score);
        entries
            .entry(pair.clone())
            .and_modify(|e: &mut (Provenance, Option<f64>)| e.0 = Provenance::Both)
            .or_insert((Provenance::Marker, score));
    }
    Ok(PairSelection { entries, stability })
}
