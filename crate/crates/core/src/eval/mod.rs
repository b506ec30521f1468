//! Localization recall over `(k, ε)` grids, oracle and random ablations,
//! and the street-name filter.

mod report;

pub use report::{line_plot_svg, read_metrics_csv, recall_plot_svg, write_metrics_csv, Series};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::celldb::{ground_truth_cell, gt_matches, Cell, CellDatabase, CellError, GroundTruthMatch};
use crate::coarse::{retrieve_topk, CoarseError, CoarseModel, RetrievalIndex};
use crate::fine::{estimate_position, FineError, FineModel, Match, MatchCounts};
use crate::querygen::QueryDescription;
use crate::scene::{dist2, ClassRegistry};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("inconsistent mode: {0}")]
    Mode(String),
    #[error("mode `{0}` needs a {1}")]
    MissingModel(String, &'static str),
    #[error("no evaluable queries")]
    NoQueries,
    #[error(transparent)]
    Coarse(#[from] CoarseError),
    #[error(transparent)]
    Fine(#[from] FineError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoarseSource {
    Learned,
    Oracle,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchSource {
    Learned,
    Oracle,
    Random,
    /// No matching: the estimate is the cell center.
    CellCenter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TranslationSource {
    Learned,
    Oracle,
    /// `t = 0`: the mean of matched instance centers.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalMode {
    pub coarse: CoarseSource,
    pub matching: MatchSource,
    pub translation: TranslationSource,
}

pub const PRESETS: [&str; 11] = [
    "full",
    "coarse-only",
    "coarse-oracle",
    "matching-oracle",
    "translation-oracle",
    "fine-oracle",
    "both-oracles",
    "coarse-random",
    "fine-random",
    "mean-of-matched",
    "cell-center",
];

impl EvalMode {
    pub const fn new(coarse: CoarseSource, matching: MatchSource, translation: TranslationSource) -> Self {
        Self {
            coarse,
            matching,
            translation,
        }
    }

    /// Named modes. `mean-of-matched` and `cell-center` use the coarse
    /// oracle.
    pub fn preset(name: &str) -> Result<Self, EvalError> {
        use CoarseSource as C;
        use MatchSource as M;
        use TranslationSource as T;
        Ok(match name {
            "full" => Self::new(C::Learned, M::Learned, T::Learned),
            "coarse-only" => Self::new(C::Learned, M::CellCenter, T::Zero),
            "coarse-oracle" => Self::new(C::Oracle, M::Learned, T::Learned),
            "matching-oracle" => Self::new(C::Oracle, M::Oracle, T::Learned),
            "translation-oracle" => Self::new(C::Oracle, M::Learned, T::Oracle),
            "fine-oracle" => Self::new(C::Learned, M::Oracle, T::Oracle),
            "both-oracles" => Self::new(C::Oracle, M::Oracle, T::Oracle),
            "coarse-random" => Self::new(C::Random, M::Learned, T::Learned),
            "fine-random" => Self::new(C::Learned, M::Random, T::Learned),
            "mean-of-matched" => Self::new(C::Oracle, M::Learned, T::Zero),
            "cell-center" => Self::new(C::Oracle, M::CellCenter, T::Zero),
            other => {
                return Err(EvalError::Mode(format!(
                    "unknown mode `{other}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        match (self.matching, self.translation) {
            (MatchSource::CellCenter, TranslationSource::Zero) => Ok(()),
            (MatchSource::CellCenter, _) => Err(EvalError::Mode(
                "cell-center estimates take no translation; use translation = zero".into(),
            )),
            (MatchSource::Random, TranslationSource::Oracle) => Err(EvalError::Mode(
                "GT translations are undefined for randomly matched hints".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn is_random(&self) -> bool {
        self.coarse == CoarseSource::Random || self.matching == MatchSource::Random
    }

    pub fn needs_coarse(&self) -> bool {
        self.coarse == CoarseSource::Learned
    }

    pub fn needs_fine(&self) -> bool {
        self.matching == MatchSource::Learned || self.translation == TranslationSource::Learned
    }

    /// Canonical label: the preset name when one matches.
    pub fn label(&self) -> String {
        for p in PRESETS {
            if Self::preset(p).ok().as_ref() == Some(self) {
                return p.to_string();
            }
        }
        let c = serde_json::to_value(self).expect("serializable");
        format!(
            "{}/{}/{}",
            c["coarse"].as_str().unwrap_or(""),
            c["matching"].as_str().unwrap_or(""),
            c["translation"].as_str().unwrap_or("")
        )
    }
}

/// How a query counts as localized within the top `k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuccessRule {
    /// Smallest error among the first `k` estimates.
    #[default]
    MinOverK,
    /// Error of the estimate ranked exactly `k`.
    PerRank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Meters.
    pub epsilons: Vec<f64>,
    pub modes: Vec<String>,
    pub street_filter: bool,
    pub success_rule: SuccessRule,
    /// Seeds averaged over in modes with a random component.
    pub random_seeds: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            epsilons: vec![5.0, 10.0, 15.0],
            modes: vec!["full".into(), "coarse-only".into()],
            street_filter: false,
            success_rule: SuccessRule::MinOverK,
            random_seeds: 100,
            seed: 0,
        }
    }
}

/// ε grid used for fine-localization ablations.
pub const FINE_ABLATION_EPSILONS: [f64; 3] = [2.0, 5.0, 10.0];

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let mut bad = Vec::new();
        if self.ks.is_empty() || self.ks.contains(&0) {
            bad.push("ks must be non-empty and at least 1".to_string());
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(*e > 0.0)) {
            bad.push("epsilons must be non-empty and positive".to_string());
        }
        if self.random_seeds == 0 {
            bad.push("random_seeds must be at least 1".to_string());
        }
        for m in &self.modes {
            if let Err(e) = EvalMode::preset(m).and_then(|m| m.validate()) {
                bad.push(e.to_string());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(EvalError::Config(bad.join("; ")))
        }
    }

    pub fn max_k(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub query: usize,
    pub gt: [f64; 2],
    /// Candidate cells in rank order.
    pub cells: Vec<usize>,
    /// One estimate per candidate.
    pub estimates: Vec<[f64; 2]>,
    pub errors: Vec<f64>,
}

impl LocalizationResult {
    pub fn best_error(&self, k: usize) -> f64 {
        self.errors.iter().take(k).copied().fold(f64::INFINITY, f64::min)
    }

    pub fn success(&self, k: usize, epsilon: f64, rule: SuccessRule) -> bool {
        match rule {
            SuccessRule::MinOverK => self.best_error(k) < epsilon,
            SuccessRule::PerRank => self.errors.get(k - 1).is_some_and(|e| *e < epsilon),
        }
    }
}

/// Fraction of `results` localized within `epsilon` at `k`.
pub fn recall(results: &[LocalizationResult], k: usize, epsilon: f64, rule: SuccessRule) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results.iter().filter(|r| r.success(k, epsilon, rule)).count();
    hits as f64 / results.len() as f64
}

/// Stable filter keeping cells that overlap `street`.
pub fn street_filter(ranked: &[usize], street: &str, db: &CellDatabase) -> Vec<usize> {
    ranked
        .iter()
        .copied()
        .filter(|&c| db.cell(c).streets.iter().any(|s| s == street))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub mode: String,
    pub k: usize,
    pub epsilon: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub queries: usize,
    pub seeds: usize,
    pub matching_precision: Option<f64>,
    pub matching_recall: Option<f64>,
    /// Queries whose estimates all fell back to a cell center.
    pub fallbacks: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
    pub summaries: Vec<ModeSummary>,
    /// Queries skipped because they had no GT cell or no GT match.
    pub excluded: usize,
}

impl MetricsTable {
    pub fn get(&self, mode: &str, k: usize, epsilon: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.mode == mode && r.k == k && r.epsilon == epsilon)
            .map(|r| r.recall)
    }

    pub fn extend(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
        self.summaries.extend(other.summaries);
        self.excluded = self.excluded.max(other.excluded);
    }

    /// Recall never decreases in `k` or `ε` within a mode.
    pub fn is_monotone(&self) -> bool {
        self.rows.iter().all(|a| {
            self.rows.iter().all(|b| {
                a.mode != b.mode || !(b.k >= a.k && b.epsilon >= a.epsilon) || b.recall >= a.recall
            })
        })
    }
}

/// A query with its GT cell and GT matches in that cell.
#[derive(Clone, Debug)]
pub struct EvalQuery<'a> {
    pub desc: &'a QueryDescription,
    pub gt_cell: usize,
    pub gt: GroundTruthMatch,
}

/// Queries with a containing cell and at least one GT match; returns them
/// with the number skipped.
pub fn evaluable_queries<'a>(
    descs: &'a [QueryDescription],
    db: &CellDatabase,
    classes: &ClassRegistry,
) -> (Vec<EvalQuery<'a>>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for d in descs {
        let Ok(c) = ground_truth_cell(d.position, db) else {
            skipped += 1;
            continue;
        };
        let gt = gt_matches(d, db.cell(c), classes, db.config.match_angle);
        if gt.num_matched() == 0 {
            skipped += 1;
            continue;
        }
        out.push(EvalQuery {
            desc: d,
            gt_cell: c,
            gt,
        });
    }
    (out, skipped)
}

/// Trained artifacts available to the evaluator.
#[derive(Clone, Copy, Default)]
pub struct Models<'a> {
    pub coarse: Option<(&'a CoarseModel, &'a RetrievalIndex)>,
    pub fine: Option<&'a FineModel>,
}

struct Run {
    results: Vec<LocalizationResult>,
    counts: MatchCounts,
    learned_matching: bool,
    fallbacks: usize,
}

/// Localizes every query under `mode`. `rng` drives the random sources.
pub fn localize_all(
    queries: &[EvalQuery<'_>],
    db: &CellDatabase,
    classes: &ClassRegistry,
    models: Models<'_>,
    mode: EvalMode,
    k_max: usize,
    use_streets: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LocalizationResult>, EvalError> {
    Ok(run_mode(queries, db, classes, models, mode, k_max, use_streets, rng)?.results)
}

#[allow(clippy::too_many_arguments)]
fn run_mode(
    queries: &[EvalQuery<'_>],
    db: &CellDatabase,
    classes: &ClassRegistry,
    models: Models<'_>,
    mode: EvalMode,
    k_max: usize,
    use_streets: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Run, EvalError> {
    mode.validate()?;
    let label = mode.label();
    let coarse = match (mode.coarse, models.coarse) {
        (CoarseSource::Learned, None) => return Err(EvalError::MissingModel(label, "coarse model and index")),
        (_, c) => c,
    };
    if let Some((_, index)) = coarse {
        index.check_database(db)?;
    }
    let fine = match (mode.needs_fine(), models.fine) {
        (true, None) => return Err(EvalError::MissingModel(label, "fine model")),
        (_, f) => f,
    };
    let descs: Vec<&QueryDescription> = queries.iter().map(|q| q.desc).collect();
    let text_emb = match (mode.coarse, coarse) {
        (CoarseSource::Learned, Some((model, _))) => Some(model.embed_descriptions(&descs)?),
        _ => None,
    };
    let mut run = Run {
        results: Vec::with_capacity(queries.len()),
        counts: MatchCounts::default(),
        learned_matching: mode.matching == MatchSource::Learned,
        fallbacks: 0,
    };
    for (qi, q) in queries.iter().enumerate() {
        let ranked: Vec<usize> = match mode.coarse {
            CoarseSource::Oracle => vec![q.gt_cell],
            CoarseSource::Random => {
                let mut all: Vec<usize> = (0..db.len()).collect();
                all.shuffle(rng);
                all
            }
            CoarseSource::Learned => {
                let (_, index) = coarse.expect("checked above");
                let emb = text_emb.as_ref().expect("computed above");
                retrieve_topk(emb.row(qi), index, index.len())?.ids
            }
        };
        let ranked = if use_streets && mode.coarse != CoarseSource::Oracle {
            let street = db.streets.region_of(q.desc.position)?;
            street_filter(&ranked, street, db)
        } else {
            ranked
        };
        let cells: Vec<usize> = ranked.into_iter().take(k_max).collect();
        let mut estimates = Vec::with_capacity(cells.len());
        let mut all_fallback = true;
        for &c in &cells {
            let cell = db.cell(c);
            let (pos, fallback) = estimate_in_cell(q, cell, classes, db, fine, mode, rng, &mut run.counts, c == q.gt_cell)?;
            all_fallback &= fallback;
            estimates.push(pos);
        }
        if all_fallback && mode.matching != MatchSource::CellCenter {
            run.fallbacks += 1;
        }
        let errors = estimates.iter().map(|e| dist2(*e, q.desc.position)).collect();
        run.results.push(LocalizationResult {
            query: q.desc.id,
            gt: q.desc.position,
            cells,
            estimates,
            errors,
        });
    }
    Ok(run)
}

#[allow(clippy::too_many_arguments)]
fn estimate_in_cell(
    q: &EvalQuery<'_>,
    cell: &Cell,
    classes: &ClassRegistry,
    db: &CellDatabase,
    fine: Option<&FineModel>,
    mode: EvalMode,
    rng: &mut ChaCha8Rng,
    counts: &mut MatchCounts,
    is_gt_cell: bool,
) -> Result<([f64; 2], bool), EvalError> {
    if mode.matching == MatchSource::CellCenter {
        return Ok((cell.center(), true));
    }
    let n_h = q.desc.hints.len();
    let gt = if is_gt_cell {
        q.gt.clone()
    } else {
        gt_matches(q.desc, cell, classes, db.config.match_angle)
    };
    let pred = match fine {
        Some(f) if mode.needs_fine() => Some(f.localize(q.desc, cell)?.0),
        _ => None,
    };
    let matches: Vec<Match> = match mode.matching {
        MatchSource::Learned => {
            let p = pred.as_ref().expect("fine model present");
            if is_gt_cell {
                counts.add(&p.matches, &gt);
            }
            p.matches.clone()
        }
        MatchSource::Oracle => gt
            .pairs()
            .into_iter()
            .map(|(hint, instance)| Match {
                hint,
                instance,
                confidence: 1.0,
            })
            .collect(),
        MatchSource::Random => random_assignment(n_h, cell.num_real, rng),
        MatchSource::CellCenter => unreachable!(),
    };
    let translations: Vec<[f64; 2]> = match mode.translation {
        TranslationSource::Learned => pred.as_ref().expect("fine model present").translations.clone(),
        TranslationSource::Oracle => gt.t_gt.iter().map(|t| t.unwrap_or([0.0, 0.0])).collect(),
        TranslationSource::Zero => vec![[0.0, 0.0]; n_h],
    };
    let est = estimate_position(&matches, &translations, cell);
    Ok((est.position, est.fallback))
}

/// Hints matched one-to-one to distinct real instances chosen uniformly.
fn random_assignment(n_h: usize, n_real: usize, rng: &mut ChaCha8Rng) -> Vec<Match> {
    let mut inst: Vec<usize> = (0..n_real).collect();
    inst.shuffle(rng);
    let mut hints: Vec<usize> = (0..n_h).collect();
    hints.shuffle(rng);
    let mut out: Vec<Match> = hints
        .into_iter()
        .zip(inst)
        .map(|(hint, instance)| Match {
            hint,
            instance,
            confidence: 1.0,
        })
        .collect();
    out.sort_by_key(|m| m.hint);
    out
}

/// Every mode in `cfg`, over the evaluable subset of `descs`.
pub fn evaluate_pipeline(
    descs: &[QueryDescription],
    db: &CellDatabase,
    classes: &ClassRegistry,
    models: Models<'_>,
    cfg: &EvalConfig,
) -> Result<MetricsTable, EvalError> {
    cfg.validate()?;
    let (queries, excluded) = evaluable_queries(descs, db, classes);
    if excluded > 0 {
        log::info!("evaluation: skipped {excluded} queries without a GT cell or GT match");
    }
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut table = MetricsTable {
        excluded,
        ..Default::default()
    };
    for name in &cfg.modes {
        let mode = EvalMode::preset(name)?;
        let seeds = if mode.is_random() { cfg.random_seeds } else { 1 };
        let mut grid = vec![vec![0.0; cfg.epsilons.len()]; cfg.ks.len()];
        let mut counts = MatchCounts::default();
        let mut learned = false;
        let mut fallbacks = 0;
        for s in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(s as u64));
            let run = run_mode(&queries, db, classes, models, mode, cfg.max_k(), cfg.street_filter, &mut rng)?;
            for (ki, &k) in cfg.ks.iter().enumerate() {
                for (ei, &e) in cfg.epsilons.iter().enumerate() {
                    grid[ki][ei] += recall(&run.results, k, e, cfg.success_rule);
                }
            }
            counts.predicted += run.counts.predicted;
            counts.gt += run.counts.gt;
            counts.correct += run.counts.correct;
            learned = run.learned_matching;
            fallbacks += run.fallbacks;
        }
        for (ki, &k) in cfg.ks.iter().enumerate() {
            for (ei, &e) in cfg.epsilons.iter().enumerate() {
                table.rows.push(MetricRow {
                    mode: name.clone(),
                    k,
                    epsilon: e,
                    recall: grid[ki][ei] / seeds as f64,
                });
            }
        }
        table.summaries.push(ModeSummary {
            mode: name.clone(),
            queries: queries.len(),
            seeds,
            matching_precision: learned.then(|| counts.precision()),
            matching_recall: learned.then(|| counts.recall()),
            fallbacks: fallbacks / seeds,
        });
    }
    Ok(table)
}
