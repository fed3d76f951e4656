//! Adaptive attacks for cross-silo FL, where one identifiable user answers
//! every round with the same private batch.
//!
//! Each query feature-fishes the benign model at some cutoff; the answer is
//! (up to suppressed leakage) the mean gradient of the examples whose
//! attacked feature lies below the cutoff, and its head gradients reveal
//! both their mean feature and their count. Sets below a cutoff are nested
//! prefixes in feature order, so cumulative sums over a growing chain of
//! cutoffs can be first-differenced into per-example gradients.

use alloc::vec::Vec;

use crate::crossdevice::max_abs_diff;
use crate::error::{param, Error, Result};
use crate::fedsim::{self, User};
use crate::fishing;
use crate::linalg::Vector;
use crate::model::{self, GradientUpdate, ModelParams};
use crate::recovery::{self, CatchReport};

/// Two examples closer than this along the attacked feature are not split.
pub const FEATURE_TOL: f64 = 1e-7;
/// Relative tolerance for "already visited" feature values.
pub const VISITED_RTOL: f64 = 1e-9;
/// The one-shot attack gives up after this many queries.
pub const ONE_SHOT_MAX_QUERIES: usize = 64;
/// Largest tolerated distance of the raw target count from an integer
/// before a query is repeated with a steeper cut.
pub const LEAK_TOL: f64 = 1e-6;
/// Factor applied to beta per sharpening step.
pub const SHARPEN_FACTOR: f64 = 10.0;
/// Default number of sharpening steps per cutoff.
pub const DEFAULT_MAX_SHARPEN: usize = 3;

/// One round trip with the attacked user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryRecord {
    /// 1-based.
    pub query_index: usize,
    pub cutoff: f64,
    /// Recovered mean of the attacked feature below the cutoff.
    pub recovered_f: Option<f64>,
    pub s_below: usize,
}

/// The user answers with its fedSGD update (plus its own defense, if any).
pub fn query_user(user: &User, params: &ModelParams) -> Result<GradientUpdate> {
    fedsim::user_update(user, params)
}

fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    if a == b {
        return true;
    }
    if !a.is_finite() || !b.is_finite() {
        return false;
    }
    let diff = (a - b).abs();
    diff <= atol || diff <= rtol * a.abs().max(b.abs())
}

/// A recovered prefix set: everything below `cutoff`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub feature: f64,
    pub cutoff: f64,
    pub count: usize,
    /// `batch_size ×` the returned mean update, i.e. the sum over the set.
    pub cumulative: GradientUpdate,
}

/// Search state of the binary attack.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BinaryTreeState {
    pub visited: Vec<f64>,
    /// Kept sorted by ascending feature.
    pub nodes: Vec<TreeNode>,
    pub pending: Vec<f64>,
    pub queried: Vec<f64>,
    pub queries: usize,
}

impl BinaryTreeState {
    fn is_visited(&self, f: f64) -> bool {
        self.visited.iter().any(|&v| close(v, f, VISITED_RTOL, 0.0))
    }

    fn was_queried(&self, cut: f64) -> bool {
        self.queried.iter().any(|&q| close(q, cut, VISITED_RTOL, FEATURE_TOL))
    }

    fn push_cutoff(&mut self, cut: f64) {
        if cut.is_nan()
            || self.was_queried(cut)
            || self.pending.iter().any(|&p| close(p, cut, VISITED_RTOL, FEATURE_TOL))
        {
            return;
        }
        self.pending.push(cut);
    }

    /// Lowest pending cutoff first, so the search dives to the minimum.
    fn pop_cutoff(&mut self) -> Option<f64> {
        let (idx, _) = self.pending.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
        Some(self.pending.swap_remove(idx))
    }

    fn insert(&mut self, node: TreeNode) {
        let pos = self.nodes.partition_point(|n| n.feature < node.feature);
        self.nodes.insert(pos, node);
    }

    fn has_count(&self, count: usize) -> bool {
        self.nodes.iter().any(|n| n.count == count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryAttackConfig {
    pub beta: f64,
    /// Defaults to `4 n² + 8`.
    pub query_budget: Option<usize>,
    /// Times a cutoff may be re-asked with `beta` raised by
    /// [`SHARPEN_FACTOR`] when examples close to it leak into the answer.
    pub max_sharpen: usize,
}

impl Default for BinaryAttackConfig {
    fn default() -> Self {
        Self {
            beta: fishing::DEFAULT_BETA,
            query_budget: None,
            max_sharpen: DEFAULT_MAX_SHARPEN,
        }
    }
}

/// Per-example (or merged-group) gradient recovered by differencing.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredGradient {
    /// Summed (not averaged) gradient of the group.
    pub gradient: GradientUpdate,
    pub mean_feature: f64,
    /// Estimated group size; more than one means the group stayed merged.
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryAttackResult {
    /// Ascending by feature.
    pub gradients: Vec<RecoveredGradient>,
    pub queries: usize,
    pub log: Vec<QueryRecord>,
    /// For the example of rank r (0 = smallest feature), the 1-based query
    /// after which its gradient could first be isolated.
    pub isolation_query: Vec<Option<usize>>,
    pub state: BinaryTreeState,
}

impl BinaryAttackResult {
    pub fn merged_groups(&self) -> usize {
        self.gradients.iter().filter(|g| g.members > 1).count()
    }

    /// Σ of recovered gradients; equals the largest cumulative set.
    pub fn total(&self) -> Option<GradientUpdate> {
        let mut it = self.gradients.iter();
        let mut acc = it.next()?.gradient.clone();
        for g in it {
            acc.add_scaled(&g.gradient, 1.0);
        }
        Some(acc)
    }
}

fn fished(benign: &ModelParams, c: usize, j: usize, cut: f64, beta: f64) -> Result<ModelParams> {
    fishing::feature_fishing(benign, c, j, cut, beta, false)
}

/// Recovered feature j and count from one answer; `None` when nothing
/// fell below the cutoff. A negative count (only possible under a
/// defense) reads as zero.
fn read_answer(g: &GradientUpdate, c: usize, j: usize) -> Result<Option<(f64, usize)>> {
    match recovery::recover_avg_feature(g, c) {
        Ok(f) => match recovery::estimate_target_count(g, c) {
            Ok(s) => Ok(Some((f[j], s))),
            Err(Error::InconsistentCount(_)) => Ok(Some((f[j], 0))),
            Err(e) => Err(e),
        },
        Err(Error::NoSignal(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Distance of the raw target count `-n ∇b_c` from the nearest integer.
/// Exact prefix sets give integers; an example sitting close to the cutoff
/// contributes a fraction.
pub fn count_leak(g: &GradientUpdate, c: usize) -> f64 {
    let raw = -(g.batch_size as f64) * g.head_bias[c];
    (raw - libm::round(raw)).abs()
}

/// One answer at `cut`, logged.
struct Asked {
    update: GradientUpdate,
    answer: Option<(f64, usize)>,
    /// The fished model at the base beta.
    params: ModelParams,
}

/// Query at `cut` with scale `beta`. Extractor gradients are linear in the
/// single head weight, so an answer taken at a sharpened `beta` is rescaled
/// to `base_beta`; head gradients do not depend on it.
#[allow(clippy::too_many_arguments)]
fn ask(
    user: &User,
    benign: &ModelParams,
    c: usize,
    j: usize,
    cut: f64,
    (base_beta, beta): (f64, f64),
    queries: &mut usize,
    log: &mut Vec<QueryRecord>,
) -> Result<Asked> {
    let sent = fished(benign, c, j, cut, beta)?;
    let mut update = query_user(user, &sent)?;
    *queries += 1;
    let params = if beta == base_beta {
        sent
    } else {
        let ratio = base_beta / beta;
        for layer in &mut update.layers {
            layer.weight.as_mut_slice().iter_mut().for_each(|v| *v *= ratio);
            layer.bias.iter_mut().for_each(|v| *v *= ratio);
        }
        fished(benign, c, j, cut, base_beta)?
    };
    let answer = read_answer(&update, c, j)?;
    log.push(QueryRecord {
        query_index: *queries,
        cutoff: cut,
        recovered_f: answer.map(|a| a.0),
        s_below: answer.map_or(0, |a| a.1),
    });
    Ok(Asked { update, answer, params })
}

pub fn binary_attack(
    user: &User,
    benign: &ModelParams,
    c: usize,
    j: usize,
    n: usize,
    beta: f64,
) -> Result<BinaryAttackResult> {
    binary_attack_with(
        user,
        benign,
        c,
        j,
        n,
        &BinaryAttackConfig {
            beta,
            ..Default::default()
        },
    )
}

/// Binary cutoff tree over repeated queries of one user.
///
/// Every new node f found at cutoff `cut` spawns the cutoffs `f` (split the
/// set) and `2·cut − f` (mirror above the cut). Pending cutoffs are served
/// lowest first. When the tree runs dry while some group between adjacent
/// nodes still holds several examples, the group's own mean feature is
/// queried to split it. The search stops once all `n` prefix sizes are
/// known or the query budget is spent.
pub fn binary_attack_with(
    user: &User,
    benign: &ModelParams,
    c: usize,
    j: usize,
    n: usize,
    config: &BinaryAttackConfig,
) -> Result<BinaryAttackResult> {
    if n == 0 {
        return Err(param("batch size must be positive"));
    }
    let budget = config.query_budget.unwrap_or(4 * n * n + 8);
    let mut state = BinaryTreeState {
        pending: alloc::vec![f64::INFINITY],
        ..Default::default()
    };
    let mut log = Vec::new();
    let mut isolation_query = alloc::vec![None; n];
    let mut split_attempts: Vec<(usize, usize)> = Vec::new();

    'search: loop {
        while let Some(cut) = state.pop_cutoff() {
            if state.was_queried(cut) {
                continue;
            }
            if state.queries >= budget {
                break 'search;
            }
            state.queried.push(cut);
            let mut beta = config.beta;
            let mut asked = ask(
                user,
                benign,
                c,
                j,
                cut,
                (config.beta, beta),
                &mut state.queries,
                &mut log,
            )?;
            for _ in 0..config.max_sharpen {
                if asked.answer.is_none() || count_leak(&asked.update, c) <= LEAK_TOL || state.queries >= budget {
                    break;
                }
                beta *= SHARPEN_FACTOR;
                asked = ask(
                    user,
                    benign,
                    c,
                    j,
                    cut,
                    (config.beta, beta),
                    &mut state.queries,
                    &mut log,
                )?;
            }
            let (g, answer) = (asked.update, asked.answer);
            let Some((f, count)) = answer else { continue };
            if count == 0 || state.is_visited(f) || state.has_count(count) {
                continue;
            }
            state.visited.push(f);
            let scale = g.batch_size as f64;
            state.insert(TreeNode {
                feature: f,
                cutoff: cut,
                count,
                cumulative: g.scaled(scale),
            });
            mark_isolated(&state, &mut isolation_query);
            if (1..=n).all(|k| state.has_count(k)) {
                break 'search;
            }
            if count > 1 {
                state.push_cutoff(f);
            }
            state.push_cutoff(2.0 * cut - f);
        }
        // Split any group of several examples at its own mean feature.
        let mut progressed = false;
        let mut prev: Option<&TreeNode> = None;
        let mut splits = Vec::new();
        for node in &state.nodes {
            let lower = prev.map_or(0, |p| p.count);
            if node.count >= lower + 2 && !split_attempts.contains(&(lower, node.count)) {
                let group = match prev {
                    Some(p) => node.cumulative.difference(&p.cumulative),
                    None => node.cumulative.clone(),
                };
                if group.head_bias[c].abs() > recovery::NO_SIGNAL_THRESHOLD {
                    splits.push(((lower, node.count), group.head_weight[(c, j)] / group.head_bias[c]));
                }
            }
            prev = Some(node);
        }
        for (key, cut) in splits {
            split_attempts.push(key);
            if !state.was_queried(cut) {
                state.push_cutoff(cut);
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    let mut gradients = Vec::with_capacity(state.nodes.len());
    let mut prev: Option<&TreeNode> = None;
    for node in &state.nodes {
        let (gradient, members) = match prev {
            Some(p) => (
                node.cumulative.difference(&p.cumulative),
                node.count.saturating_sub(p.count),
            ),
            None => (node.cumulative.clone(), node.count),
        };
        let db = gradient.head_bias[c];
        let mean_feature = if db.abs() > recovery::NO_SIGNAL_THRESHOLD {
            gradient.head_weight[(c, j)] / db
        } else {
            node.feature
        };
        gradients.push(RecoveredGradient {
            gradient,
            mean_feature,
            members,
        });
        prev = Some(node);
    }
    Ok(BinaryAttackResult {
        gradients,
        queries: state.queries,
        log,
        isolation_query,
        state,
    })
}

fn mark_isolated(state: &BinaryTreeState, isolation: &mut [Option<usize>]) {
    for (rank, slot) in isolation.iter_mut().enumerate() {
        if slot.is_none() && (rank == 0 || state.has_count(rank)) && state.has_count(rank + 1) {
            *slot = Some(state.queries);
        }
    }
}

/// How the one-shot attack decides that a single example answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IsolationTest {
    /// The estimated target count below the cutoff is one.
    #[default]
    TargetCount,
    /// First-layer input candidates agree (count-free, survives clipping).
    InputConsistency,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneShotOptions {
    pub beta: f64,
    /// Sharpening steps allowed when a single-example answer still leaks.
    pub max_sharpen: usize,
    pub max_queries: usize,
    pub isolation: IsolationTest,
    /// On running out of queries, report the most consistent recovery seen
    /// instead of failing.
    pub best_effort: bool,
}

impl Default for OneShotOptions {
    fn default() -> Self {
        Self {
            beta: fishing::DEFAULT_BETA,
            max_sharpen: DEFAULT_MAX_SHARPEN,
            max_queries: ONE_SHOT_MAX_QUERIES,
            isolation: IsolationTest::TargetCount,
            best_effort: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneShotReport {
    pub report: CatchReport,
    pub log: Vec<QueryRecord>,
    pub final_cutoff: f64,
    pub gave_up: bool,
    /// Index into the user's batch of its minimum-feature example.
    pub min_feature_example: usize,
}

pub fn one_shot_binary(user: &User, benign: &ModelParams, c: usize, j: usize, beta: f64) -> Result<OneShotReport> {
    one_shot_binary_with(
        user,
        benign,
        c,
        j,
        &OneShotOptions {
            beta,
            ..Default::default()
        },
    )
}

/// Lower the cutoff to the recovered mean below it until one example is
/// left. An empty answer backs off to the midpoint with the previous cutoff.
pub fn one_shot_binary_with(
    user: &User,
    benign: &ModelParams,
    c: usize,
    j: usize,
    options: &OneShotOptions,
) -> Result<OneShotReport> {
    let mut cut = f64::INFINITY;
    let mut previous: Option<f64> = None;
    let mut log = Vec::new();
    let mut best: Option<(f64, GradientUpdate, Vector, ModelParams)> = None;

    let mut queries = 0;
    let mut last_count: Option<usize> = None;
    while queries < options.max_queries {
        let mut asked = ask(
            user,
            benign,
            c,
            j,
            cut,
            (options.beta, options.beta),
            &mut queries,
            &mut log,
        )?;
        if options.isolation == IsolationTest::TargetCount {
            let mut beta = options.beta;
            for _ in 0..options.max_sharpen {
                // Sharpen when the answer claims isolation or makes no
                // progress, and examples near the cut leak into it.
                let s = asked.answer.map_or(0, |a| a.1);
                let stalled = s == 1 || last_count.is_some_and(|l| s >= l);
                if !stalled || count_leak(&asked.update, c) <= LEAK_TOL || queries >= options.max_queries {
                    break;
                }
                beta *= SHARPEN_FACTOR;
                asked = ask(user, benign, c, j, cut, (options.beta, beta), &mut queries, &mut log)?;
            }
        }
        let Asked {
            update: g,
            answer,
            params,
        } = asked;
        if let Some((_, s)) = answer {
            last_count = Some(s);
        }
        let recovered = recovery::analytic_input_recovery(&g).ok();
        if let Some(r) = &recovered {
            let rel = r.disagreement / (r.input.norm() + 1e-12);
            if best.as_ref().is_none_or(|b| rel < b.0) {
                best = Some((rel, g.clone(), r.input.clone(), params.clone()));
            }
        }
        let isolated = match (options.isolation, answer) {
            (_, None) => false,
            (IsolationTest::TargetCount, Some((_, s))) => s == 1,
            (IsolationTest::InputConsistency, Some(_)) => recovered.as_ref().is_some_and(|r| !r.mixed),
        };
        if isolated {
            let input = recovered.map(|r| r.input);
            return evaluate(user, &params, j, g, input, queries, log, cut, false, true);
        }
        match answer {
            Some((f, s)) if s != 0 || options.isolation == IsolationTest::InputConsistency => {
                previous = Some(cut);
                cut = f;
            }
            _ => match previous {
                Some(p) => cut = 0.5 * (cut + p),
                None => return Err(Error::NoSignal(g.head_bias[c])),
            },
        }
    }
    if options.best_effort {
        if let Some((_, g, input, params)) = best {
            let best_cut = params_cutoff(&params, c, j);
            return evaluate(user, &params, j, g, Some(input), queries, log, best_cut, true, false);
        }
    }
    Err(Error::GiveUp {
        queries: options.max_queries,
    })
}

fn params_cutoff(params: &ModelParams, c: usize, j: usize) -> f64 {
    let w = params.head_weight[(c, j)];
    if params.head_bias[c] == -f64::MAX {
        f64::INFINITY
    } else {
        -params.head_bias[c] / w
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    user: &User,
    params: &ModelParams,
    j: usize,
    g: GradientUpdate,
    recovered_input: Option<Vector>,
    queries_used: usize,
    log: Vec<QueryRecord>,
    final_cutoff: f64,
    gave_up: bool,
    isolated: bool,
) -> Result<OneShotReport> {
    let mut ranked = Vec::with_capacity(user.batch.len());
    for (i, e) in user.batch.iter().enumerate() {
        let t = model::forward(params, &e.x)?;
        ranked.push((t.feature()[j], i, model::backward(params, &t, e.y)?));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let per_example: Vec<GradientUpdate> = ranked.iter().map(|r| r.2.clone()).collect();
    let caught = recovery::count_caught(&g, &per_example)?;
    let min_feature_example = ranked[0].1;
    let input_recovery_error = recovered_input
        .as_ref()
        .map(|x| max_abs_diff(x, &user.batch[min_feature_example].x));
    let n = g.batch_size as f64;
    let isolated_gradient = (isolated && caught.n_caught > 0).then(|| g.clone().scaled(n));
    Ok(OneShotReport {
        report: CatchReport {
            user_id: user.user_id,
            n_caught: caught.n_caught,
            best_cosine: caught.best_cosine,
            isolated_gradient,
            recovered_input,
            queries_used,
            input_recovery_error,
        },
        log,
        final_cutoff,
        gave_up,
        min_feature_example,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisparateImpactRow {
    pub user_id: usize,
    pub batch_size: usize,
    /// Query index at which the minimum-feature example was isolated.
    pub min_query: usize,
    /// Same for the (lower) median-feature example.
    pub median_query: usize,
    pub total_queries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisparateImpactTable {
    pub rows: Vec<DisparateImpactRow>,
    pub mean_min_query: f64,
    pub mean_median_query: f64,
}

/// Full binary attack per user, reporting when the extreme and the median
/// example each became isolated. Examples never isolated count as the
/// user's total query count.
pub fn disparate_impact_experiment(
    users: &[User],
    benign: &ModelParams,
    c: usize,
    j: usize,
    beta: f64,
) -> Result<DisparateImpactTable> {
    let rows = users
        .iter()
        .map(|u| disparate_impact_row(u, benign, c, j, beta))
        .collect::<Result<Vec<_>>>()?;
    Ok(disparate_impact_table(rows))
}

pub fn disparate_impact_row(
    user: &User,
    benign: &ModelParams,
    c: usize,
    j: usize,
    beta: f64,
) -> Result<DisparateImpactRow> {
    let n = user.batch.len();
    let result = binary_attack(user, benign, c, j, n, beta)?;
    let at = |rank: usize| result.isolation_query[rank].unwrap_or(result.queries);
    Ok(DisparateImpactRow {
        user_id: user.user_id,
        batch_size: n,
        min_query: at(0),
        median_query: at((n - 1) / 2),
        total_queries: result.queries,
    })
}

pub fn disparate_impact_table(rows: Vec<DisparateImpactRow>) -> DisparateImpactTable {
    let k = rows.len().max(1) as f64;
    let mean_min_query = rows.iter().map(|r| r.min_query as f64).sum::<f64>() / k;
    let mean_median_query = rows.iter().map(|r| r.median_query as f64).sum::<f64>() / k;
    DisparateImpactTable {
        rows,
        mean_min_query,
        mean_median_query,
    }
}
