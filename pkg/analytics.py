"""
Analytics for HeadEdit Lab
Welch comparisons, condition summaries and plot-data tables
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import betainc

from exceptions import ContractException

logger = logging.getLogger(__name__)

# (a, b) pairs tested in every report
DEFAULT_COMPARISONS: Tuple[Tuple[str, str], ...] = (
    ("iti_localized", "iti_random"),
    ("ipo_localized", "ipo_random"),
    ("ipo_random", "ipo_full"),
    ("ipo_localized", "ipo_full"),
    ("ipo_localized", "iti_localized"),
)

COMPARISON_COLUMNS = ["condition_a", "condition_b", "n_a", "n_b", "mean_a", "mean_b",
                      "t_statistic", "df", "p_value", "degenerate"]


@dataclass(frozen=True)
class WelchResult:
    t_statistic: float
    p_value: float
    df: float
    degenerate: bool
    mean_a: float
    mean_b: float
    n_a: int
    n_b: int


def compare_conditions(results_a: Sequence[float], results_b: Sequence[float]) -> WelchResult:
    """
    Two-sided Welch t-test

    The p-value is I_{df/(df+t^2)}(df/2, 1/2), the t-distribution survival
    function written as a regularized incomplete beta. When both samples have
    zero variance the result is flagged degenerate: p = 1 for equal means,
    otherwise t = +-inf and p = 0.

    Raises:
        ContractException: a sample has fewer than two values
    """
    a = np.asarray(results_a, dtype=np.float64)
    b = np.asarray(results_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ContractException(f"Welch test needs two samples of size >= 2, got {a.size} and {b.size}")
    mean_a, mean_b = float(np.mean(a)), float(np.mean(b))
    var_a, var_b = float(np.var(a, ddof=1)), float(np.var(b, ddof=1))
    n_a, n_b = int(a.size), int(b.size)

    if var_a == 0.0 and var_b == 0.0:
        if mean_a == mean_b:
            return WelchResult(0.0, 1.0, float(n_a + n_b - 2), True, mean_a, mean_b, n_a, n_b)
        logger.warning(f"Welch test degenerate: zero variance, means {mean_a} vs {mean_b}")
        t = math.copysign(math.inf, mean_a - mean_b)
        return WelchResult(t, 0.0, float(n_a + n_b - 2), True, mean_a, mean_b, n_a, n_b)

    se_a, se_b = var_a / n_a, var_b / n_b
    se2 = se_a + se_b
    t = (mean_a - mean_b) / math.sqrt(se2)
    df = se2 ** 2 / (se_a ** 2 / (n_a - 1) + se_b ** 2 / (n_b - 1))
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return WelchResult(float(t), min(max(p, 0.0), 1.0), float(df), False, mean_a, mean_b, n_a, n_b)


def summarize(values: Sequence[float]) -> Dict[str, float]:
    """Median, mean, spread and count of a score sample"""
    arr = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if arr.size == 0:
        return {"count": 0, "mean": math.nan, "median": math.nan, "std": math.nan, "min": math.nan, "max": math.nan}
    return {
        "count": int(arr.size),
        "mean": float(np.mean(arr)),
        "median": float(np.median(arr)),
        "std": float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0,
        "min": float(np.min(arr)),
        "max": float(np.max(arr)),
    }


def best_scores(runs: Sequence[Dict], condition: str, metric: str = "info_truth") -> List[float]:
    """Test-split score at the selected setting for every successful run of a condition"""
    return [r[metric] for r in runs if r["condition"] == condition and r["status"] == "ok"]


def condition_summary_frame(runs: Sequence[Dict]) -> pd.DataFrame:
    rows = []
    for condition in sorted({r["condition"] for r in runs}):
        stats = summarize(best_scores(runs, condition))
        failed = sum(1 for r in runs if r["condition"] == condition and r["status"] != "ok")
        rows.append({
            "condition": condition, **stats, "failed": failed,
            "mean_kl": summarize(best_scores(runs, condition, "kl"))["mean"],
            "mean_mc": summarize(best_scores(runs, condition, "mc"))["mean"],
            "median_mis_info_truth": summarize(best_scores(runs, condition, "mis_info_truth"))["median"],
        })
    columns = ["condition", "count", "mean", "median", "std", "min", "max", "failed",
               "mean_kl", "mean_mc", "median_mis_info_truth"]
    return pd.DataFrame(rows, columns=columns)


def comparisons_frame(
    runs: Sequence[Dict],
    comparisons: Sequence[Tuple[str, str]] = DEFAULT_COMPARISONS,
) -> pd.DataFrame:
    """Welch tests on best test Info*Truth; comparisons lacking data are skipped"""
    rows = []
    for cond_a, cond_b in comparisons:
        a, b = best_scores(runs, cond_a), best_scores(runs, cond_b)
        if len(a) < 2 or len(b) < 2:
            logger.debug(f"skipping comparison {cond_a} vs {cond_b}: {len(a)} and {len(b)} runs")
            continue
        result = compare_conditions(a, b)
        row = asdict(result)
        rows.append({"condition_a": cond_a, "condition_b": cond_b, **row})
    return pd.DataFrame(rows, columns=COMPARISON_COLUMNS)


def infotruth_hist_frame(runs: Sequence[Dict]) -> pd.DataFrame:
    """Best Info*Truth per run, for the per-condition histograms"""
    columns = ["condition", "seed", "repeat", "head_set", "best_setting", "info_truth"]
    rows = [{c: r[c] for c in columns} for r in runs if r["status"] == "ok" and r["condition"] != "base"]
    return pd.DataFrame(rows, columns=columns)


def truth_info_scatter_frame(settings: Sequence[Dict]) -> pd.DataFrame:
    """Truth against info for every evaluated setting on the test split"""
    columns = ["condition", "seed", "repeat", "alpha_or_tau", "truth", "info"]
    rows = [{c: s[c] for c in columns} for s in settings if s["split"] == "test"]
    return pd.DataFrame(rows, columns=columns)


def kl_mc_scatter_frame(runs: Sequence[Dict]) -> pd.DataFrame:
    """KL against MC accuracy at each run's selected setting"""
    columns = ["condition", "seed", "repeat", "head_set", "kl", "mc"]
    rows = [{c: r[c] for c in columns} for r in runs if r["status"] == "ok"]
    return pd.DataFrame(rows, columns=columns)


def single_head_frame(runs: Sequence[Dict], condition: str = "ipo_single") -> pd.DataFrame:
    """One row per sampled single head: its probe accuracy next to its best Info*Truth"""
    columns = ["seed", "layer", "head", "probe_val_acc", "info_truth", "status"]
    rows = []
    for r in runs:
        if r["condition"] != condition:
            continue
        layer, head = r["heads"][0]
        rows.append({
            "seed": r["seed"], "layer": layer, "head": head,
            "probe_val_acc": r.get("probe_val_acc", math.nan),
            "info_truth": r["info_truth"], "status": r["status"],
        })
    return pd.DataFrame(rows, columns=columns)


def effective_single_heads(runs: Sequence[Dict], margin: float = 0.15) -> Optional[int]:
    """Single heads within margin of the same seed's full-IPO Info*Truth"""
    full = {r["seed"]: r["info_truth"] for r in runs if r["condition"] == "ipo_full" and r["status"] == "ok"}
    if not full:
        return None
    return sum(
        1 for r in runs
        if r["condition"] == "ipo_single" and r["status"] == "ok" and r["seed"] in full
        and r["info_truth"] >= full[r["seed"]] - margin
    )
