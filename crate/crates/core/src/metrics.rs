//! Subtask-, query- and tool-level metric arithmetic.
//!
//! Rates are kept as exact ratios and only converted to floating point for
//! rendering. A tool's F1 is `2tp / (2tp + fp + fn)`, which equals the
//! harmonic mean of precision and recall whenever both are defined and is 0
//! when every count is 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{StepOutcome, ToolRef};

/// Exact non-negative rational. A zero denominator reads as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub numerator: u64,
    pub denominator: u64,
}

impl Ratio {
    pub fn new(numerator: u64, denominator: u64) -> Self {
        Self { numerator, denominator }
    }

    pub fn value(&self) -> f64 {
        if self.denominator == 0 {
            0.0
        } else {
            self.numerator as f64 / self.denominator as f64
        }
    }

    /// Percentage with one decimal, as printed in result tables.
    pub fn percent(&self) -> String {
        format!("{:.1}", self.value() * 100.0)
    }

    /// Exact comparison by cross multiplication.
    pub fn same_value(&self, other: &Ratio) -> bool {
        match (self.denominator, other.denominator) {
            (0, 0) => true,
            (0, _) => other.numerator == 0,
            (_, 0) => self.numerator == 0,
            _ => {
                self.numerator as u128 * other.denominator as u128
                    == other.numerator as u128 * self.denominator as u128
            }
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

pub fn precision(tp: u64, fp: u64) -> Ratio {
    Ratio::new(tp, tp + fp)
}

pub fn recall(tp: u64, fn_: u64) -> Ratio {
    Ratio::new(tp, tp + fn_)
}

/// F1 as an exact ratio.
pub fn tool_f1_ratio(tp: u64, fp: u64, fn_: u64) -> Ratio {
    if tp == 0 {
        // Precision or recall is 0 (or undefined): F1 collapses to 0.
        return Ratio::new(0, if fp + fn_ == 0 { 0 } else { fp + fn_ });
    }
    Ratio::new(2 * tp, 2 * tp + fp + fn_)
}

/// Tool-level F1; total, returning 0 for zero denominators.
pub fn compute_tool_f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    tool_f1_ratio(tp, fp, fn_).value()
}

/// Input row for [`aggregate_report`].
///
/// A subtask needs an API iff `gt_tool` is present. `executed_tool` is the
/// tool whose call was scored for execution; it defaults to the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub query_id: String,
    pub step: usize,
    pub outcome: StepOutcome,
    pub gt_tool: Option<ToolRef>,
    pub selected_tool: Option<ToolRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executed_tool: Option<ToolRef>,
}

impl OutcomeRecord {
    pub fn needs_api(&self) -> bool {
        self.gt_tool.is_some()
    }

    fn scored_execution_tool(&self) -> Option<&ToolRef> {
        self.executed_tool.as_ref().or(self.gt_tool.as_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ToolStats {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub f1: f64,
    pub exec_attempts: u64,
    pub exec_successes: u64,
}

impl ToolStats {
    pub fn f1_ratio(&self) -> Ratio {
        tool_f1_ratio(self.tp, self.fp, self.fn_)
    }

    pub fn exec_rate(&self) -> Ratio {
        Ratio::new(self.exec_successes, self.exec_attempts)
    }

    fn refresh_f1(&mut self) {
        self.f1 = compute_tool_f1(self.tp, self.fp, self.fn_);
    }
}

/// Per-tool comparison deltas (`candidate - baseline`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToolDelta {
    pub delta_f1: f64,
    pub delta_exec: f64,
}

/// Per-tool stats keyed by `provider::api` in serialized form.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_subtask: Vec<OutcomeRecord>,
    pub sl_rate: Ratio,
    pub ql_rate: Ratio,
    #[serde(with = "tool_map")]
    pub per_tool: BTreeMap<ToolRef, ToolStats>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_tool_map")]
    pub comparison: Option<BTreeMap<ToolRef, ToolDelta>>,
}

impl Default for Ratio {
    fn default() -> Self {
        Ratio::new(0, 0)
    }
}

impl EvaluationReport {
    /// Tools that were the ground truth of at least one subtask.
    pub fn ground_truth_tools(&self) -> BTreeSet<ToolRef> {
        self.per_subtask.iter().filter_map(|r| r.gt_tool.clone()).collect()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("duplicate outcome key ({query_id}, {step})")]
    DuplicateKey { query_id: String, step: usize },
    #[error("outcome list is empty")]
    Empty,
    #[error("outcome for ({query_id}, {step}) violates subtask_success = selection AND execution")]
    InconsistentOutcome { query_id: String, step: usize },
    #[error("reports cover different ground-truth tool sets ({only_candidate} only in candidate, {only_baseline} only in baseline)")]
    MismatchedTools {
        only_candidate: usize,
        only_baseline: usize,
    },
}

/// Rolls per-subtask outcomes up into SL/QL rates and per-tool tallies.
///
/// Subtasks without a ground-truth tool are processing steps: they are left
/// out of the SL denominator and the tool tallies, and cannot fail a query.
pub fn aggregate_report(outcomes: &[OutcomeRecord]) -> Result<EvaluationReport, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut keys = BTreeSet::new();
    for r in outcomes {
        if !keys.insert((r.query_id.as_str(), r.step)) {
            return Err(MetricsError::DuplicateKey {
                query_id: r.query_id.clone(),
                step: r.step,
            });
        }
        if !r.outcome.is_consistent() {
            return Err(MetricsError::InconsistentOutcome {
                query_id: r.query_id.clone(),
                step: r.step,
            });
        }
    }

    let mut per_subtask = outcomes.to_vec();
    per_subtask.sort_by(|a, b| (&a.query_id, a.step).cmp(&(&b.query_id, b.step)));

    let mut sl_num = 0u64;
    let mut sl_den = 0u64;
    let mut query_ok: BTreeMap<String, bool> = BTreeMap::new();
    let mut per_tool: BTreeMap<ToolRef, ToolStats> = BTreeMap::new();

    for r in &per_subtask {
        let ok = query_ok.entry(r.query_id.clone()).or_insert(true);
        let Some(gt) = &r.gt_tool else { continue };
        sl_den += 1;
        if r.outcome.subtask_success {
            sl_num += 1;
        } else {
            *ok = false;
        }
        match &r.selected_tool {
            Some(sel) if sel == gt => per_tool.entry(gt.clone()).or_default().tp += 1,
            Some(sel) => {
                per_tool.entry(gt.clone()).or_default().fn_ += 1;
                per_tool.entry(sel.clone()).or_default().fp += 1;
            }
            None => per_tool.entry(gt.clone()).or_default().fn_ += 1,
        }
        if let Some(exec) = r.scored_execution_tool() {
            let s = per_tool.entry(exec.clone()).or_default();
            s.exec_attempts += 1;
            if r.outcome.execution_success {
                s.exec_successes += 1;
            }
        }
    }
    for s in per_tool.values_mut() {
        s.refresh_f1();
    }
    let ql_num = query_ok.values().filter(|ok| **ok).count() as u64;
    Ok(EvaluationReport {
        per_subtask,
        sl_rate: Ratio::new(sl_num, sl_den),
        ql_rate: Ratio::new(ql_num, query_ok.len() as u64),
        per_tool,
        comparison: None,
    })
}

/// Improvement/degradation share and mean delta for one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub improved: usize,
    pub degraded: usize,
    pub tools: usize,
    pub avg_delta: f64,
}

impl MetricComparison {
    fn from_deltas(deltas: &[f64]) -> Self {
        let improved = deltas.iter().filter(|d| **d > 0.0).count();
        let degraded = deltas.iter().filter(|d| **d < 0.0).count();
        let avg_delta = if deltas.is_empty() {
            0.0
        } else {
            deltas.iter().sum::<f64>() / deltas.len() as f64
        };
        Self {
            improved,
            degraded,
            tools: deltas.len(),
            avg_delta,
        }
    }

    pub fn impr_pct(&self) -> f64 {
        pct(self.improved, self.tools)
    }

    pub fn degr_pct(&self) -> f64 {
        pct(self.degraded, self.tools)
    }

    /// `label & impr & degr & avgΔ` with 1-decimal percentages and 4-decimal Δ.
    pub fn format_row(&self, label: &str) -> String {
        format!(
            "{label} & {:.1} & {:.1} & {:.4}",
            self.impr_pct(),
            self.degr_pct(),
            self.avg_delta
        )
    }
}

fn pct(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 * 100.0 / d as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolWiseComparison {
    pub f1: MetricComparison,
    pub exec_success: MetricComparison,
    #[serde(with = "tool_map")]
    pub per_tool: BTreeMap<ToolRef, ToolDelta>,
}

/// Tool-wise comparison of `candidate` against `baseline`.
///
/// Both reports must have been computed on the same subtasks, i.e. the same
/// ground-truth tool set. Tools present in only one report (false-positive
/// selections) count with zero tallies on the other side.
pub fn compare_reports(
    candidate: &EvaluationReport,
    baseline: &EvaluationReport,
) -> Result<ToolWiseComparison, MetricsError> {
    let cg = candidate.ground_truth_tools();
    let bg = baseline.ground_truth_tools();
    if cg != bg {
        return Err(MetricsError::MismatchedTools {
            only_candidate: cg.difference(&bg).count(),
            only_baseline: bg.difference(&cg).count(),
        });
    }
    let tools: BTreeSet<&ToolRef> = candidate
        .per_tool
        .keys()
        .chain(baseline.per_tool.keys())
        .collect();
    let zero = ToolStats::default();
    let mut per_tool = BTreeMap::new();
    let mut f1_deltas = Vec::with_capacity(tools.len());
    let mut exec_deltas = Vec::with_capacity(tools.len());
    for t in tools {
        let c = candidate.per_tool.get(t).unwrap_or(&zero);
        let b = baseline.per_tool.get(t).unwrap_or(&zero);
        let d = ToolDelta {
            delta_f1: c.f1_ratio().value() - b.f1_ratio().value(),
            delta_exec: c.exec_rate().value() - b.exec_rate().value(),
        };
        f1_deltas.push(d.delta_f1);
        exec_deltas.push(d.delta_exec);
        per_tool.insert(t.clone(), d);
    }
    Ok(ToolWiseComparison {
        f1: MetricComparison::from_deltas(&f1_deltas),
        exec_success: MetricComparison::from_deltas(&exec_deltas),
        per_tool,
    })
}

/// Attaches per-tool deltas against `baseline` to `candidate`.
pub fn with_comparison(
    mut candidate: EvaluationReport,
    baseline: &EvaluationReport,
) -> Result<(EvaluationReport, ToolWiseComparison), MetricsError> {
    let cmp = compare_reports(&candidate, baseline)?;
    candidate.comparison = Some(cmp.per_tool.clone());
    Ok((candidate, cmp))
}

/// Serializes `BTreeMap<ToolRef, V>` as a JSON object keyed `provider::api`.
mod tool_map {
    use super::*;
    use serde::de::Error as _;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer, V: Serialize>(
        map: &BTreeMap<ToolRef, V>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let m: BTreeMap<String, &V> = map.iter().map(|(k, v)| (k.to_string(), v)).collect();
        m.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>, V: Deserialize<'de>>(
        d: D,
    ) -> Result<BTreeMap<ToolRef, V>, D::Error> {
        let m: BTreeMap<String, V> = BTreeMap::deserialize(d)?;
        m.into_iter()
            .map(|(k, v)| {
                let (p, a) = k
                    .split_once("::")
                    .ok_or_else(|| D::Error::custom(format!("bad tool key `{k}`")))?;
                Ok((ToolRef::new(p, a), v))
            })
            .collect()
    }
}

mod opt_tool_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        map: &Option<BTreeMap<ToolRef, ToolDelta>>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        match map {
            Some(m) => tool_map::serialize(m, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<Option<BTreeMap<ToolRef, ToolDelta>>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "tool_map")] BTreeMap<ToolRef, ToolDelta>);
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(name: &str) -> ToolRef {
        ToolRef::new("p", name)
    }

    fn rec(q: &str, step: usize, gt: Option<&str>, sel: Option<&str>, exec: bool) -> OutcomeRecord {
        let sel_ok = gt.is_some() && gt == sel;
        OutcomeRecord {
            query_id: q.into(),
            step,
            outcome: StepOutcome::new(sel_ok, exec),
            gt_tool: gt.map(t),
            selected_tool: sel.map(t),
            executed_tool: None,
        }
    }

    #[test]
    fn f1_hand_examples() {
        // GT = {A, B}, selected = {A, C}: A is tp, C is fp, B is fn.
        assert_eq!(precision(1, 1).value(), 0.5);
        assert_eq!(recall(1, 1).value(), 0.5);
        assert_eq!(compute_tool_f1(1, 1, 1), 0.5);
        assert_eq!(compute_tool_f1(3, 0, 0), 1.0);
        assert_eq!(compute_tool_f1(0, 0, 0), 0.0);
        assert_eq!(compute_tool_f1(0, 4, 0), 0.0);
        assert_eq!(compute_tool_f1(0, 0, 2), 0.0);
    }

    #[test]
    fn query_level_requires_all_subtasks() {
        let r = aggregate_report(&[rec("q", 0, Some("a"), Some("a"), true), rec("q", 1, Some("b"), Some("b"), true)])
            .unwrap();
        assert_eq!(r.ql_rate.value(), 1.0);
        assert_eq!(r.sl_rate.value(), 1.0);
        let r = aggregate_report(&[rec("q", 0, Some("a"), Some("a"), true), rec("q", 1, Some("b"), Some("b"), false)])
            .unwrap();
        assert_eq!(r.ql_rate.value(), 0.0);
        assert_eq!(r.sl_rate.value(), 0.5);
    }

    #[test]
    fn processing_steps_are_excluded() {
        let r = aggregate_report(&[
            rec("q", 0, Some("a"), Some("a"), true),
            rec("q", 1, None, None, false),
        ])
        .unwrap();
        assert_eq!(r.sl_rate, Ratio::new(1, 1));
        assert_eq!(r.ql_rate, Ratio::new(1, 1));
        assert_eq!(r.per_tool.len(), 1);
    }

    #[test]
    fn duplicate_keys_rejected() {
        let err = aggregate_report(&[rec("q", 0, Some("a"), Some("a"), true), rec("q", 0, Some("a"), Some("a"), true)])
            .unwrap_err();
        assert!(matches!(err, MetricsError::DuplicateKey { .. }));
    }

    #[test]
    fn comparison_arithmetic() {
        let d = MetricComparison::from_deltas(&[0.1, -0.05, 0.0]);
        assert_eq!(d.improved, 1);
        assert_eq!(d.degraded, 1);
        assert_eq!(format!("{:.1}", d.impr_pct()), "33.3");
        assert_eq!(format!("{:.1}", d.degr_pct()), "33.3");
        assert_eq!(format!("{:.4}", d.avg_delta), "0.0167");
        assert_eq!(d.format_row("X"), "X & 33.3 & 33.3 & 0.0167");
    }

    #[test]
    fn self_comparison_is_zero() {
        let r = aggregate_report(&[rec("q", 0, Some("a"), Some("b"), true)]).unwrap();
        let c = compare_reports(&r, &r).unwrap();
        assert_eq!(c.f1.improved + c.f1.degraded, 0);
        assert_eq!(c.f1.avg_delta, 0.0);
        assert_eq!(c.exec_success.avg_delta, 0.0);
    }

    #[test]
    fn mismatched_ground_truth_rejected() {
        let a = aggregate_report(&[rec("q", 0, Some("a"), Some("a"), true)]).unwrap();
        let b = aggregate_report(&[rec("q", 0, Some("b"), Some("b"), true)]).unwrap();
        assert!(matches!(compare_reports(&a, &b), Err(MetricsError::MismatchedTools { .. })));
    }

    #[test]
    fn report_json_roundtrip() {
        let r = aggregate_report(&[rec("q", 0, Some("a"), Some("b"), true)]).unwrap();
        let (r, _) = with_comparison(r.clone(), &r).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"p::a\""));
        let back: EvaluationReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn ratio_exact_equality() {
        assert!(Ratio::new(1, 2).same_value(&Ratio::new(2, 4)));
        assert!(Ratio::new(0, 0).same_value(&Ratio::new(0, 5)));
        assert!(!Ratio::new(1, 3).same_value(&Ratio::new(1, 2)));
        assert_eq!(Ratio::new(2, 3).percent(), "66.7");
    }
}
