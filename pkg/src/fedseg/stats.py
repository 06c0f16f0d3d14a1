"""Two-sided Wilcoxon signed-rank test, Bonferroni correction and the
paired comparison tables used to compare paradigms and configurations."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .metrics import METRICS

EXACT_MAX_N = 20


@dataclass(frozen=True)
class TestResult:
    statistic: float  # min(W+, W-)
    p_value: float
    n_effective: int
    method: str  # "exact" | "normal-approx"
    w_plus: float = 0.0
    w_minus: float = 0.0
    significant: bool = False

    __test__ = False  # not a pytest class


def midranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1, ties sharing the average of their positions."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_cdf(doubled_ranks: np.ndarray, w_doubled: int) -> float:
    """P(T <= w) for T the sum of a random subset of the ranks, each rank
    included with probability 1/2. Ranks are passed doubled so midranks
    are integers; the count over all 2^n sign patterns is exact."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    hits = int(sum(counts[: w_doubled + 1]))
    return hits / 2 ** len(doubled_ranks)


def wilcoxon_two_sided(x, y, method: str = "auto", alpha: float = 0.05) -> TestResult:
    """Paired two-sided Wilcoxon signed-rank test.

    Zero differences are discarded. With ``method="auto"`` the exact null
    distribution is used up to 20 non-zero differences, otherwise a normal
    approximation with tie-corrected variance and continuity correction.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"paired samples must be equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 1:
        raise DimensionError("need at least one pair")
    if method not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown method {method!r}")
    d = x - y
    d = d[d != 0]
    n = d.size
    if n == 0:
        return TestResult(0.0, 1.0, 0, "exact", 0.0, 0.0, False)
    ranks = midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    use_exact = method == "exact" or (method == "auto" and n <= EXACT_MAX_N)
    if use_exact:
        doubled = np.rint(2 * ranks).astype(int)
        p = min(1.0, 2.0 * _exact_cdf(doubled, int(round(2 * w))))
        kind = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
        if var <= 0:
            p = 1.0
        else:
            z = max(0.0, abs(w - mean) - 0.5) / math.sqrt(var)
            p = min(1.0, math.erfc(z / math.sqrt(2.0)))
        kind = "normal-approx"
    return TestResult(w, p, n, kind, w_plus, w_minus, p < alpha)


def bonferroni(alpha: float, n_tests: int) -> float:
    if n_tests < 1:
        raise ConfigError("bonferroni correction needs at least one test")
    return alpha / n_tests


# -- comparison suite ----------------------------------------------------------

CONFIGURATIONS = ("baseline", "label_manip", "image_manip", "exclusion")
PARADIGMS = ("LL0", "CL", "FL")
WITHIN_CONFIGURATION_PAIRS = (("LL0", "CL"), ("LL0", "FL"), ("CL", "FL"))

CONFIG_LABELS = {
    "baseline": "Baseline",
    "label_manip": "Label Manipulation",
    "image_manip": "Image Quality Manipulation",
    "exclusion": "Faulty Client Exclusion",
}


@dataclass
class Comparison:
    table: str  # "within-configuration" | "within-paradigm" | "across-run"
    group: str  # configuration or paradigm
    label: str  # e.g. "LL0 vs CL"
    results: dict[str, TestResult]


def _paired(a: dict[int, float], b: dict[int, float]) -> tuple[np.ndarray, np.ndarray]:
    keys = sorted(k for k in a.keys() & b.keys() if not (np.isnan(a[k]) or np.isnan(b[k])))
    return np.array([a[k] for k in keys]), np.array([b[k] for k in keys])


def compare_models(a: dict[str, dict[int, float]], b: dict[str, dict[int, float]]) -> dict[str, TestResult]:
    """Per-metric paired tests on the image ids both models scored."""
    out = {}
    for m in METRICS:
        xa, xb = _paired(a[m], b[m])
        if xa.size == 0:
            out[m] = TestResult(0.0, 1.0, 0, "exact")
        else:
            out[m] = wilcoxon_two_sided(xa, xb)
    return out


def comparison_suite(tables: dict[tuple[str, str], dict[str, dict[int, float]]], alpha: float = 0.05,
                     strict: bool = False) -> tuple[list[Comparison], float]:
    """Run every within-configuration and within-paradigm comparison the
    available models allow.

    ``tables`` maps (configuration, paradigm) to ``metric -> {image id:
    value}``. Within each configuration: LL0 vs CL, LL0 vs FL, CL vs FL.
    Within each paradigm: baseline vs every other configuration. The
    Bonferroni threshold is computed over the number of comparisons
    actually run, and each result's ``significant`` flag uses it. With
    ``strict=True`` a missing model raises instead of being skipped.
    """
    comps: list[Comparison] = []
    for cfg in CONFIGURATIONS:
        for a, b in WITHIN_CONFIGURATION_PAIRS:
            if (cfg, a) in tables and (cfg, b) in tables:
                comps.append(Comparison("within-configuration", cfg, f"{a} vs {b}",
                                        compare_models(tables[(cfg, a)], tables[(cfg, b)])))
            elif strict and any(k[0] == cfg for k in tables) and not (cfg == "exclusion" and "LL0" in (a, b)):
                raise KeyError(f"missing model for {cfg}: {a} vs {b}")
    for par in PARADIGMS:
        for other in CONFIGURATIONS[1:]:
            if ("baseline", par) in tables and (other, par) in tables:
                comps.append(Comparison("within-paradigm", par, f"baseline vs {other}",
                                        compare_models(tables[("baseline", par)], tables[(other, par)])))
    return finalize(comps, alpha)


def finalize(comps: list[Comparison], alpha: float = 0.05) -> tuple[list[Comparison], float]:
    """Flag significance at the Bonferroni threshold over ``len(comps)``."""
    if not comps:
        return comps, alpha
    alpha_corr = bonferroni(alpha, len(comps))
    for c in comps:
        c.results = {m: _with_sig(r, alpha_corr) for m, r in c.results.items()}
    return comps, alpha_corr


def _with_sig(r: TestResult, alpha: float) -> TestResult:
    return TestResult(r.statistic, r.p_value, r.n_effective, r.method, r.w_plus, r.w_minus, r.p_value < alpha)


def write_significance_csv(path, comps: list[Comparison], table: str) -> None:
    """Rows shaped like the study's appendix tables: group, comparison, then
    ``<METRIC> p`` / ``<METRIC> sig`` pairs."""
    head = "Paradigm" if table == "within-paradigm" else "Configuration"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        cols = [head, "Comparison"]
        for m in METRICS:
            cols += [f"{m.upper()} p", f"{m.upper()} sig"]
        w.writerow(cols)
        for c in comps:
            if c.table != table:
                continue
            row = [CONFIG_LABELS.get(c.group, c.group), c.label]
            for m in METRICS:
                r = c.results[m]
                row += [f"{r.p_value:.2e}", "yes" if r.significant else "no"]
            w.writerow(row)
