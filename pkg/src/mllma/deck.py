"""Design suggestion decks: ranked attributions turned into actions.

A deck takes one sample's attribution breakdown and renders the story a
designer needs: which features drive the predicted congestion, where on
the die each driver concentrates, and what to try next. Rules map
feature names to suggestion templates; hotspots come from the feature's
pre-reduction saliency grid when its expression ends in a reducer.
"""

from __future__ import annotations

import enum
import fnmatch
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .featdsl import FeatureSpec, saliency_grid
from .layout import LayoutSample
from .prefmodel import Attribution, GatePolicy, WhatIfReport


class DeckError(ValueError):
    pass


class DeckFormat(str, enum.Enum):
    MARKDOWN = "markdown"
    JSON = "json"


IMPACT_DOWN = "↓"
IMPACT_HIGH = "High"
IMPACT_MIXED = "Mixed"

DECK_FORMAT = "deck v1"


@dataclass(frozen=True)
class SuggestionRule:
    """Maps a feature-name pattern and contribution sign to advice text.

    The template may use {feature}, {value} and {region} placeholders.
    thresholds = (moderate, high) bounds on |contribution| for severity.
    """

    pattern: str
    sign: str                      # "+", "-" or "any"
    template: str
    thresholds: tuple[float, float] = (0.25, 0.75)

    def __post_init__(self):
        if self.sign not in ("+", "-", "any"):
            raise DeckError(f"rule sign must be +, - or any, got {self.sign!r}")
        lo, hi = self.thresholds
        if not (0 <= lo <= hi):
            raise DeckError("thresholds must satisfy 0 <= moderate <= high")

    def matches(self, name: str, contribution: float) -> bool:
        if not fnmatch.fnmatchcase(name, self.pattern):
            return False
        if self.sign == "+":
            return contribution > 0
        if self.sign == "-":
            return contribution < 0
        return True

    def severity(self, contribution: float) -> str:
        mag = abs(contribution)
        lo, hi = self.thresholds
        if mag >= hi:
            return "high"
        if mag >= lo:
            return "moderate"
        return "low"


FALLBACK_RULE = SuggestionRule(
    "*", "any",
    "review {feature} (value {value}) near {region}; no specific playbook matched",
)

PROTECTIVE_RULE = SuggestionRule(
    "*", "-",
    "{feature} currently pulls the congestion score down; preserve this "
    "structure when editing near {region}",
)

# one hand-written playbook entry per stock feature, congestion-driving case
DEFAULT_RULES: list[SuggestionRule] = [
    SuggestionRule("rudy_gradient_variability", "+",
                   "smooth abrupt routing-demand transitions near {region}; "
                   "stepped demand gradients ({feature} = {value}) precede overflow"),
    SuggestionRule("clustered_macro_distance_std", "+",
                   "equalize spacing between macro clusters; uneven gaps "
                   "({feature} = {value}) starve the channels near {region}"),
    SuggestionRule("rudy_pin_clustering_coefficient", "+",
                   "spread pin clusters near {region}; reduce local pin fan-in "
                   "({feature} = {value})"),
    SuggestionRule("macro_density_gradient", "+",
                   "taper macro density toward the die edge around {region}; a steep "
                   "gradient ({feature} = {value}) funnels nets into narrow corridors"),
    SuggestionRule("macro_aspect_ratio_variance", "+",
                   "normalize macro aspect ratios; mixed tall and flat blocks "
                   "({feature} = {value}) fragment the tracks near {region}"),
    SuggestionRule("macro_compactness_index", "+",
                   "loosen the tightest macro group near {region}; high compactness "
                   "({feature} = {value}) blocks through-routing"),
    SuggestionRule("rudy_pin_compaction_ratio", "+",
                   "rebalance pin compaction near {region}; {feature} = {value} "
                   "signals pins crowding into a shrinking area"),
    SuggestionRule("macro_variability_coefficient", "+",
                   "even out macro size variation ({feature} = {value}); dominant "
                   "blocks near {region} distort the demand profile"),
    SuggestionRule("macro_cluster_density_contrast", "+",
                   "reduce the density contrast between macro clusters near {region}; "
                   "sharp contrast ({feature} = {value}) concentrates demand at the seam"),
    SuggestionRule("rudy_pin_distribution_kurtosis", "+",
                   "flatten the pin-density distribution; heavy-tailed peaks "
                   "({feature} = {value}) mark single-point hotspots at {region}"),
    SuggestionRule("localized_rudy_variability_coefficient", "+",
                   "stabilize local routing demand near {region}; spiky variation "
                   "({feature} = {value}) defeats uniform track allocation"),
    SuggestionRule("macro_distribution_clarity_index", "+",
                   "declutter the macro floorplan; low-clarity placement "
                   "({feature} = {value}) mixes blockages into routing regions "
                   "near {region}"),
    SuggestionRule("rudy_direction_consistency_index", "+",
                   "align demand flow directions near {region}; conflicting pressure "
                   "({feature} = {value}) doubles layer usage"),
    SuggestionRule("rudy_pin_area_masking_index", "+",
                   "free pin areas masked by blockages near {region} "
                   "({feature} = {value}); masked pins reroute the long way"),
    SuggestionRule("rudy_pin_gradient_convergence", "+",
                   "diverge pin-demand gradients near {region}; convergence "
                   "({feature} = {value}) predicts a pile-up"),
    SuggestionRule("rudy_deviation_effect_index", "+",
                   "damp outlier demand cells near {region}; deviation pressure "
                   "({feature} = {value}) shifts overflow downstream"),
    SuggestionRule("demarcated_macro_proximity_index", "+",
                   "widen channels between closely placed macros near {region}; "
                   "{feature} at {value} leaves sub-track gaps"),
    SuggestionRule("macro_surface_irregularity_index", "+",
                   "straighten irregular macro outlines near {region}; jagged edges "
                   "({feature} = {value}) create unroutable notches"),
    SuggestionRule("macro_rudy_boundary_interaction_index", "+",
                   "pull routing demand off macro boundaries near {region}; "
                   "{feature} at {value} couples blockage with demand"),
    SuggestionRule("pin_density_peak_contrast", "+",
                   "shave the dominant pin-density peak at {region}; the peak "
                   "({feature} = {value}) dwarfs the surrounding average"),
    SuggestionRule("rudy_pin_density_flux_index", "+",
                   "steady the pin-density flux near {region}; rapid local change "
                   "({feature} = {value}) churns demand estimates"),
    SuggestionRule("high_density_rudy_ratio", "+",
                   "shrink the share of near-saturated cells ({feature} = "
                   "{value}); start at {region} where demand already exceeds "
                   "capacity"),
    SuggestionRule("high_density_rudy_pin_ratio", "+",
                   "thin dense pin fields near {region}; a dense-pin share "
                   "({feature} = {value}) leaves no escape tracks"),
    PROTECTIVE_RULE,
    FALLBACK_RULE,
]


@dataclass
class DeckItem:
    feature: str
    raw: float
    normalized: float
    weight: float
    contribution: float
    severity: str
    suggestion: str
    hotspot: tuple[int, int, int, int] | None = None   # half-open row/col bounds


@dataclass
class CaseRow:
    feature: str
    before_value: float
    after_value: float
    before_contribution: float
    after_contribution: float
    impact: str


@dataclass
class CaseTable:
    rows: list[CaseRow]
    score_before: float
    score_after: float

    @property
    def delta(self) -> float:
        return self.score_after - self.score_before


@dataclass
class Deck:
    sample_id: str
    score: float
    items: list[DeckItem] = field(default_factory=list)
    case: CaseTable | None = None


def hotspot_window(grid: np.ndarray, size: int) -> tuple[int, int, int, int]:
    """Half-open bounds of the size x size window with the largest mean."""
    h, w = grid.shape
    p = max(1, min(size, h, w))
    means = sliding_window_view(grid, (p, p)).mean(axis=(2, 3))
    flat = int(np.argmax(means))
    r0, c0 = divmod(flat, means.shape[1])
    return (r0, c0, r0 + p, c0 + p)


def _region_text(hotspot: tuple[int, int, int, int] | None) -> str:
    if hotspot is None:
        return "the full die"
    r0, c0, r1, c1 = hotspot
    return f"rows {r0}-{r1 - 1}, cols {c0}-{c1 - 1}"


def _first_rule(name: str, contribution: float,
                rules: list[SuggestionRule]) -> SuggestionRule:
    for rule in rules:
        if rule.matches(name, contribution):
            return rule
    return FALLBACK_RULE


def build_deck(att: Attribution, sample: LayoutSample | None,
               rules: list[SuggestionRule] = DEFAULT_RULES, m: int = 5,
               specs: dict[str, FeatureSpec] | None = None,
               window: int = 32, case: CaseTable | None = None) -> Deck:
    """Top-m attribution items with suggestions and hotspot windows.

    specs supplies the DSL expression per feature name; features without
    a spec (or with a non-reducer expression) get no hotspot.
    """
    if m < 0:
        raise DeckError("m must be >= 0")
    ranked = sorted(att.items, key=lambda it: (-abs(it.contribution), it.name))
    items: list[DeckItem] = []
    for it in ranked[: min(m, len(ranked))]:
        hotspot = None
        if specs is not None and sample is not None and it.name in specs:
            grid = saliency_grid(specs[it.name].expr, sample)
            if grid is not None and grid.ndim == 2:
                hotspot = hotspot_window(grid, window)
        rule = _first_rule(it.name, it.contribution, rules)
        text = rule.template.format(
            feature=it.name,
            value=f"{it.raw:.4g}",
            region=_region_text(hotspot),
        )
        items.append(DeckItem(
            feature=it.name,
            raw=it.raw,
            normalized=it.normalized,
            weight=it.weight,
            contribution=it.contribution,
            severity=rule.severity(it.contribution),
            suggestion=text,
            hotspot=hotspot,
        ))
    sample_id = sample.id if sample is not None else ""
    return Deck(sample_id, att.score, items, case)


# ---------------------------------------------------------------------------
# Before/after case tables

def _impact(before_value: float, after_value: float,
            before_c: float, after_c: float, is_top: bool) -> str:
    unchanged = before_value == after_value and before_c == after_c
    if unchanged:
        return IMPACT_MIXED
    if abs(before_c) > 0 and abs(after_c) <= 0.5 * abs(before_c):
        return IMPACT_DOWN
    if is_top:
        return IMPACT_HIGH
    return IMPACT_MIXED


def case_report(before: Attribution, after: Attribution) -> CaseTable:
    """Table 5-shaped rows from two attribution snapshots."""
    before_names = [it.name for it in before.items]
    if sorted(before_names) != sorted(it.name for it in after.items):
        raise DeckError("before/after attributions cover different features")
    top = before.items[0].name if before.items else None
    rows = []
    for it in before.items:
        aft = after.by_name(it.name)
        rows.append(CaseRow(
            feature=it.name,
            before_value=it.raw,
            after_value=aft.raw,
            before_contribution=it.contribution,
            after_contribution=aft.contribution,
            impact=_impact(it.raw, aft.raw, it.contribution,
                           aft.contribution, it.name == top),
        ))
    return CaseTable(rows, before.score, after.score)


def case_from_whatif(report: WhatIfReport) -> CaseTable:
    """Same table, built from a what-if run (frozen-gating friendly)."""
    top = report.rows[0].name if report.rows else None
    rows = [
        CaseRow(
            feature=r.name,
            before_value=r.before_raw,
            after_value=r.after_raw,
            before_contribution=r.before_contribution,
            after_contribution=r.after_contribution,
            impact=_impact(r.before_raw, r.after_raw, r.before_contribution,
                           r.after_contribution, r.name == top),
        )
        for r in report.rows
    ]
    return CaseTable(rows, report.score_before, report.score_after)


def whatif_payload(sample_id: str, gating: GatePolicy,
                   report: WhatIfReport) -> dict:
    """The one case-report JSON shape shared by every interface.

    CLI output and HTTP responses must agree byte for byte, so both
    build their payload here and render it with the same serializer.
    """
    payload = case_to_dict(case_from_whatif(report))
    payload["sample_id"] = sample_id
    payload["gating_mode"] = gating.value
    payload["delta"] = report.delta
    return payload


# ---------------------------------------------------------------------------
# Rendering

def case_to_dict(case: CaseTable) -> dict:
    return {
        "score_before": case.score_before,
        "score_after": case.score_after,
        "rows": [
            {
                "feature": r.feature,
                "before_value": r.before_value,
                "after_value": r.after_value,
                "before_contribution": r.before_contribution,
                "after_contribution": r.after_contribution,
                "impact": r.impact,
            }
            for r in case.rows
        ],
    }


def deck_to_dict(deck: Deck) -> dict:
    return {
        "format": DECK_FORMAT,
        "sample_id": deck.sample_id,
        "score": deck.score,
        "items": [
            {
                "feature": it.feature,
                "raw": it.raw,
                "normalized": it.normalized,
                "weight": it.weight,
                "contribution": it.contribution,
                "severity": it.severity,
                "suggestion": it.suggestion,
                "hotspot": list(it.hotspot) if it.hotspot else None,
            }
            for it in deck.items
        ],
        "case": case_to_dict(deck.case) if deck.case else None,
    }


def _markdown(deck: Deck) -> str:
    lines = [
        f"# Design suggestion deck: {deck.sample_id or '(unnamed sample)'}",
        "",
        f"Predicted congestion score: {deck.score:.4f}",
    ]
    if deck.items:
        lines += ["", "## Importance ranking", "",
                  "| rank | feature | contribution | weight | value | severity |",
                  "|-----:|---------|-------------:|-------:|------:|----------|"]
        for rank, it in enumerate(deck.items, start=1):
            lines.append(
                f"| {rank} | {it.feature} | {it.contribution:+.4f} "
                f"| {it.weight:+.3f} | {it.raw:.4g} | {it.severity} |"
            )
        lines += ["", "## Root causes and takeaways", ""]
        for rank, it in enumerate(deck.items, start=1):
            lines.append(f"{rank}. **{it.feature}** ({it.severity}): {it.suggestion}")
    if deck.case:
        lines += ["", "## What-if case", "",
                  f"Score {deck.case.score_before:.4f} -> "
                  f"{deck.case.score_after:.4f} "
                  f"(delta {deck.case.delta:+.4f})", "",
                  "| feature | before | after | attribution | impact |",
                  "|---------|-------:|------:|-------------|--------|"]
        for r in deck.case.rows:
            lines.append(
                f"| {r.feature} | {r.before_value:.4g} | {r.after_value:.4g} "
                f"| {r.before_contribution:+.4f} -> {r.after_contribution:+.4f} "
                f"| {r.impact} |"
            )
    return "\n".join(lines) + "\n"


def render(deck: Deck, fmt: DeckFormat = DeckFormat.MARKDOWN) -> str:
    if fmt is DeckFormat.JSON:
        return json.dumps(deck_to_dict(deck), indent=2, sort_keys=True) + "\n"
    return _markdown(deck)


def parse_deck(text: str) -> Deck:
    """Inverse of the JSON render."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DeckError(f"deck JSON does not parse: {exc}") from exc
    if not isinstance(obj, dict) or obj.get("format") != DECK_FORMAT:
        raise DeckError(f"not a {DECK_FORMAT} document")
    items = [
        DeckItem(
            feature=d["feature"],
            raw=float(d["raw"]),
            normalized=float(d["normalized"]),
            weight=float(d["weight"]),
            contribution=float(d["contribution"]),
            severity=d["severity"],
            suggestion=d["suggestion"],
            hotspot=tuple(d["hotspot"]) if d.get("hotspot") else None,
        )
        for d in obj.get("items", [])
    ]
    case = None
    if obj.get("case"):
        c = obj["case"]
        case = CaseTable(
            rows=[
                CaseRow(
                    feature=r["feature"],
                    before_value=float(r["before_value"]),
                    after_value=float(r["after_value"]),
                    before_contribution=float(r["before_contribution"]),
                    after_contribution=float(r["after_contribution"]),
                    impact=r["impact"],
                )
                for r in c.get("rows", [])
            ],
            score_before=float(c["score_before"]),
            score_after=float(c["score_after"]),
        )
    return Deck(obj["sample_id"], float(obj["score"]), items, case)
