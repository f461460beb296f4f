"""
Head Localization
Last-token activation collection, per-head logistic probes, ranking and ITI vectors
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from checkpoint import META_KEY, artifact_errors, read_container, read_meta, require_array, write_container
from config import ProbeConfig
from exceptions import ArtifactIOException, ContractException
from model import HeadId, ModelWeights, all_heads, forward_capture
from tensor import no_grad
from validators import TokenValidator

logger = logging.getLogger(__name__)

PROBE_REPORT_COLUMNS = ["layer", "head", "train_acc", "val_acc", "sigma", "theta_norm"]


class ProbeExample(NamedTuple):
    """(question, answer, random question, label); label 1 marks a truthful answer"""

    x: Tuple[int, ...]
    y: Tuple[int, ...]
    x_random: Tuple[int, ...]
    label: int


@dataclass
class LabeledActivations:
    """Last-token head outputs per head, one row per example"""

    acts: Dict[HeadId, np.ndarray]
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def split_by_label(self, head: HeadId) -> Tuple[np.ndarray, np.ndarray]:
        rows = self.acts[head]
        return rows[self.labels == 1], rows[self.labels == 0]


@dataclass(frozen=True)
class Probe:
    head: HeadId
    weights: np.ndarray
    bias: float
    train_accuracy: float
    val_accuracy: float


@dataclass(frozen=True)
class InterventionVector:
    head: HeadId
    direction: np.ndarray
    sigma: float
    theta: np.ndarray


@dataclass
class Localization:
    """Everything the probing pipeline produced for one model"""

    probes: Dict[HeadId, Probe]
    interventions: Dict[HeadId, InterventionVector]
    ranked: List[HeadId] = field(default_factory=list)

    def top(self, k: int) -> List[HeadId]:
        return self.ranked[:k]

    def vectors_for(self, heads: Sequence[HeadId]) -> List[InterventionVector]:
        return [self.interventions[h] for h in heads]

    def report_frame(self) -> pd.DataFrame:
        rows = []
        for head in sorted(self.probes):
            probe = self.probes[head]
            iv = self.interventions.get(head)
            rows.append({
                "layer": head.layer,
                "head": head.head,
                "train_acc": probe.train_accuracy,
                "val_acc": probe.val_accuracy,
                "sigma": iv.sigma if iv is not None else 0.0,
                "theta_norm": float(np.linalg.norm(iv.theta)) if iv is not None else 0.0,
            })
        return pd.DataFrame(rows, columns=PROBE_REPORT_COLUMNS)


def collect_activations(weights: ModelWeights, examples: Sequence[ProbeExample]) -> LabeledActivations:
    """
    Record every head's output at the final token of x + y + x_random

    Raises:
        ContractException: no examples
        InputException: an example does not fit the context
    """
    if not examples:
        raise ContractException("collect_activations needs at least one example")
    config = weights.config
    heads = all_heads(config)
    rows: Dict[HeadId, List[np.ndarray]] = {h: [] for h in heads}
    labels = []
    with no_grad():
        for i, ex in enumerate(examples):
            tokens = list(ex.x) + list(ex.y) + list(ex.x_random)
            TokenValidator.validate_fits(len(tokens), config.context_len, "probe example", example=i)
            _, tape = forward_capture(weights, tokens)
            for h in heads:
                rows[h].append(tape.head_output(h, position=-1).copy())
            labels.append(int(ex.label))
    acts = {h: np.vstack(r) for h, r in rows.items()}
    logger.debug(f"collected activations for {len(examples)} examples over {len(heads)} heads")
    return LabeledActivations(acts=acts, labels=np.asarray(labels, dtype=np.int64))


def probe_split(n: int, val_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Fixed train/validation index split of the probing set"""
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _accuracy(X: np.ndarray, y: np.ndarray, w: np.ndarray, bias: float) -> float:
    if y.size == 0:
        return 0.0
    pred = (X @ w + bias) > 0
    return float(np.mean(pred == (y == 1)))


def train_probe(
    acts: np.ndarray,
    labels: np.ndarray,
    config: Optional[ProbeConfig] = None,
    head: HeadId = HeadId(0, 0),
) -> Probe:
    """
    L2-regularized logistic regression by gradient descent

    Stops when the gradient norm falls below config.tol or after
    config.max_steps steps. Accuracy is reported on a fixed split.

    Raises:
        ContractException: only one class present
    """
    config = config or ProbeConfig()
    X = np.asarray(acts, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ContractException(f"probe inputs disagree: acts {X.shape}, labels {y.shape}")
    if len(np.unique(y)) < 2:
        raise ContractException("train_probe needs both classes", {"head": str(head)})

    train_idx, val_idx = probe_split(len(y), config.val_fraction, config.split_seed)
    Xt, yt = X[train_idx], y[train_idx]
    n, d = Xt.shape
    w = np.zeros(d)
    bias = 0.0
    for step in range(config.max_steps):
        p = _sigmoid(Xt @ w + bias)
        err = p - yt
        grad_w = Xt.T @ err / n + config.l2 * w
        grad_b = float(np.mean(err))
        if np.sqrt(np.dot(grad_w, grad_w) + grad_b ** 2) < config.tol:
            break
        w -= config.step_size * grad_w
        bias -= config.step_size * grad_b

    return Probe(
        head=head,
        weights=w,
        bias=bias,
        train_accuracy=_accuracy(Xt, yt, w, bias),
        val_accuracy=_accuracy(X[val_idx], y[val_idx], w, bias),
    )


def rank_heads(probes: Sequence[Probe], k: int) -> List[HeadId]:
    """Top-k heads by validation accuracy, ties by (layer, head)"""
    if k > len(probes):
        raise ContractException(f"k={k} exceeds {len(probes)} probes")
    ordered = sorted(probes, key=lambda p: (-p.val_accuracy, p.head.layer, p.head.head))
    return [p.head for p in ordered[:k]]


def mass_mean_shift(acts_pos: np.ndarray, acts_neg: np.ndarray) -> np.ndarray:
    """mean(positive) - mean(negative)"""
    if len(acts_pos) == 0 or len(acts_neg) == 0:
        raise ContractException("mass_mean_shift needs both classes")
    return np.mean(acts_pos, axis=0) - np.mean(acts_neg, axis=0)


def direction_sigma(all_acts: np.ndarray, u: np.ndarray) -> float:
    """Population std of the projections onto u/|u|, classes pooled"""
    norm = float(np.linalg.norm(u))
    if norm == 0.0:
        logger.warning("direction_sigma: zero direction, returning 0")
        return 0.0
    if len(all_acts) < 2:
        raise ContractException("direction_sigma needs at least two rows")
    projections = np.asarray(all_acts) @ (u / norm)
    return float(np.std(projections))


def build_intervention(head: HeadId, u: np.ndarray, sigma: float, normalize_direction: bool = True) -> InterventionVector:
    """theta = sigma * u/|u| (or sigma * u when normalization is off)"""
    u = np.asarray(u, dtype=np.float64)
    norm = float(np.linalg.norm(u))
    if norm == 0.0:
        theta = np.zeros_like(u)
    elif normalize_direction:
        theta = sigma * (u / norm)
    else:
        theta = sigma * u
    return InterventionVector(head=head, direction=u, sigma=float(sigma), theta=theta)


def localize(weights: ModelWeights, examples: Sequence[ProbeExample], config: Optional[ProbeConfig] = None) -> Localization:
    """Probe every head, rank them and build ITI vectors for all heads"""
    config = config or ProbeConfig()
    labeled = collect_activations(weights, examples)
    probes: Dict[HeadId, Probe] = {}
    interventions: Dict[HeadId, InterventionVector] = {}
    for head in all_heads(weights.config):
        probes[head] = train_probe(labeled.acts[head], labeled.labels, config, head)
        pos, neg = labeled.split_by_label(head)
        u = mass_mean_shift(pos, neg)
        sigma = direction_sigma(labeled.acts[head], u)
        interventions[head] = build_intervention(head, u, sigma, config.normalize_direction)
    ranked = rank_heads(list(probes.values()), len(probes))
    best = probes[ranked[0]]
    logger.info(f"probed {len(probes)} heads; best {best.head} val_acc={best.val_accuracy:.3f}")
    return Localization(probes=probes, interventions=interventions, ranked=ranked)


def save_probe_report(localization: Localization, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        localization.report_frame().to_csv(path, index=False, float_format="%.12g")
    except OSError as e:
        raise ArtifactIOException(f"cannot write probe report {path}: {e}")
    return path


def save_interventions(localization: Localization, path: Union[str, Path]) -> Path:
    """Write probes and intervention vectors to a HEDL container"""
    entries = {}
    meta_probes = []
    for head in sorted(localization.probes):
        probe = localization.probes[head]
        iv = localization.interventions[head]
        prefix = f"layer{head.layer}.head{head.head}"
        entries[f"{prefix}.probe_w"] = probe.weights
        entries[f"{prefix}.direction"] = iv.direction
        entries[f"{prefix}.theta"] = iv.theta
        meta_probes.append({
            "layer": head.layer, "head": head.head, "bias": probe.bias,
            "train_acc": probe.train_accuracy, "val_acc": probe.val_accuracy, "sigma": iv.sigma,
        })
    entries[META_KEY] = json.dumps({
        "kind": "localization",
        "probes": meta_probes,
        "ranked": [[h.layer, h.head] for h in localization.ranked],
    }, sort_keys=True)
    return write_container(path, entries)


def load_interventions(path: Union[str, Path]) -> Localization:
    entries = read_container(path)
    meta = read_meta(entries)
    if meta.get("kind") != "localization":
        raise ArtifactIOException(f"{path} does not hold a localization")
    probes, interventions = {}, {}
    with artifact_errors(path):
        for rec in meta["probes"]:
            head = HeadId(int(rec["layer"]), int(rec["head"]))
            prefix = f"layer{head.layer}.head{head.head}"
            probes[head] = Probe(head, require_array(entries, f"{prefix}.probe_w"), float(rec["bias"]),
                                 float(rec["train_acc"]), float(rec["val_acc"]))
            interventions[head] = InterventionVector(head, require_array(entries, f"{prefix}.direction"),
                                                     float(rec["sigma"]), require_array(entries, f"{prefix}.theta"))
        ranked = [HeadId(int(l), int(h)) for l, h in meta["ranked"]]
    return Localization(probes=probes, interventions=interventions, ranked=ranked)
