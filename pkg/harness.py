"""
HeadEdit Lab Experiment Harness
Localized vs random vs single-head edit experiments, reports and the command-line entry point
"""
import argparse
import json
import logging
import math
import platform
import sys
import time
import zlib
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy
from pydantic import BaseModel, Field, field_validator

import analytics
from align import TrainConfig, save_trace, train_localized
from caching import LogprobCache
from checkpoint import load_weights, save_weights
from config import CONDITIONS, LabConfig, get_settings, load_lab_config
from edits import HeadMask, ItiEditor, load_adapter, save_adapter
from evalsuite import Task, build_probe_examples, evaluate_split, generate_task, write_eval_csv
from exceptions import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_TRAINING,
    ArtifactIOException,
    ConfigException,
    ContractException,
    HeadEditException,
    TrainingException,
    exit_code_for,
)
from localize import Localization, load_interventions, localize, save_interventions, save_probe_report
from logging_config import StageTimer, setup_logging
from model import HeadId, ModelWeights, pretrain

logger = logging.getLogger(__name__)

ACCURACY_TARGET = 0.95

# conditions that must be evaluated on the same random head sets
SHARED_HEAD_SETS = (("iti_random", "ipo_random"),)


class Metrics(BaseModel):
    truth: float
    info: float
    info_truth: float
    kl: float
    mc: float
    mis_info_truth: Optional[float] = None
    n: int

    @classmethod
    def from_eval(cls, m) -> "Metrics":
        mis = None if math.isnan(m.mis_info_truth) else m.mis_info_truth
        return cls(truth=m.truth, info=m.info, info_truth=m.info_truth, kl=m.kl, mc=m.mc,
                   mis_info_truth=mis, n=m.n)


class SettingResult(BaseModel):
    """Metrics at one alpha (ITI) or tau (IPO)"""

    value: float
    val: Metrics
    test: Metrics


class ExperimentPlan(BaseModel):
    condition: Literal[CONDITIONS]
    k: int = Field(ge=1)
    n_repeats: int = Field(ge=1)
    grid: List[float]
    seeds: List[int]

    @field_validator("grid", "seeds")
    @classmethod
    def validate_nonempty(cls, v):
        if not v:
            raise ValueError("must be nonempty")
        return v


class RunResult(BaseModel):
    """One condition, one seed, one head set"""

    condition: str
    seed: int
    repeat: int = 0
    heads: List[Tuple[int, int]] = Field(default_factory=list)
    head_set: str = ""
    settings: List[SettingResult] = Field(default_factory=list)
    best_setting: Optional[float] = None
    best: Optional[Metrics] = None
    status: Literal["ok", "failed"] = "ok"
    error: Optional[str] = None
    probe_val_acc: Optional[float] = None
    config_hash: str = ""
    wall_clock_s: float = 0.0

    def record(self) -> Dict:
        """Flat row used by the analytics tables"""
        best = self.best
        nan = float("nan")
        return {
            "condition": self.condition, "seed": self.seed, "repeat": self.repeat,
            "heads": [tuple(h) for h in self.heads], "head_set": self.head_set,
            "best_setting": self.best_setting if self.best_setting is not None else nan,
            "status": self.status,
            "probe_val_acc": self.probe_val_acc if self.probe_val_acc is not None else nan,
            "truth": best.truth if best else nan,
            "info": best.info if best else nan,
            "info_truth": best.info_truth if best else nan,
            "kl": best.kl if best else nan,
            "mc": best.mc if best else nan,
            "mis_info_truth": best.mis_info_truth if best and best.mis_info_truth is not None else nan,
        }

    def setting_records(self) -> List[Dict]:
        rows = []
        for s in self.settings:
            for split, m in (("val", s.val), ("test", s.test)):
                rows.append({
                    "condition": self.condition, "seed": self.seed, "alpha_or_tau": s.value,
                    "truth": m.truth, "info": m.info, "info_truth": m.info_truth, "kl": m.kl, "mc": m.mc,
                    "split": split, "repeat": self.repeat, "head_set": self.head_set,
                    "mis_info_truth": m.mis_info_truth if m.mis_info_truth is not None else float("nan"),
                    "selected": s.value == self.best_setting,
                })
        return rows


class ExperimentResults(BaseModel):
    config_hash: str
    seeds: List[int]
    runs: List[RunResult] = Field(default_factory=list)


def derive_seed(seed: int, stream: str) -> int:
    """Independent, reproducible seed for one named random stream"""
    return int(np.random.SeedSequence([seed, zlib.crc32(stream.encode("utf-8"))]).generate_state(1)[0])


def sample_random_heads(k: int, n_repeats: int, seed: int, n_layers: int, n_heads: int) -> List[List[HeadId]]:
    """
    n_repeats head sets of k heads, each drawn uniformly without replacement

    Sets are distinct whenever C(L*H, k) >= n_repeats.

    Raises:
        ConfigException: k outside [1, L*H] or n_repeats < 1
    """
    total = n_layers * n_heads
    if not 1 <= k <= total:
        raise ConfigException(f"cannot sample {k} heads from {total}")
    if n_repeats < 1:
        raise ConfigException("n_repeats must be at least 1")
    rng = np.random.default_rng(seed)
    distinct = math.comb(total, k) >= n_repeats
    seen = set()
    sets: List[List[HeadId]] = []
    while len(sets) < n_repeats:
        flat = sorted(int(i) for i in rng.choice(total, size=k, replace=False))
        key = tuple(flat)
        if distinct and key in seen:
            continue
        seen.add(key)
        sets.append([HeadId(i // n_heads, i % n_heads) for i in flat])
    return sets


class HeadSetRegistry:
    """
    Head-set digests recorded per condition

    ITI and IPO record the random sets they actually use independently;
    verify compares the two records repeat by repeat.
    """

    def __init__(self):
        self.digests: Dict[Tuple[str, int], Dict[int, str]] = {}

    def record(self, condition: str, seed: int, repeat: int, digest: str) -> str:
        self.digests.setdefault((condition, seed), {})[repeat] = digest
        logger.debug(f"head set {condition} seed={seed} repeat={repeat}: {digest}")
        return digest

    def compare(self, condition_a: str, condition_b: str, seed: int) -> Dict:
        a = self.digests.get((condition_a, seed), {})
        b = self.digests.get((condition_b, seed), {})
        mismatched = sorted(r for r in set(a) | set(b) if a.get(r) != b.get(r))
        return {
            "seed": seed,
            "conditions": [condition_a, condition_b],
            "n_sets": [len(a), len(b)],
            "matched": bool(a) and not mismatched,
            "mismatched_repeats": mismatched,
        }

    def verify(self, condition_a: str, condition_b: str, seed: int) -> Dict:
        """
        Raises:
            ContractException: the two conditions did not use the same sets
        """
        comparison = self.compare(condition_a, condition_b, seed)
        if not comparison["matched"]:
            raise ContractException(
                f"{condition_a} and {condition_b} used different head sets for seed {seed}", comparison
            )
        return comparison


def shared_head_set_checks(
    runs: Sequence[RunResult],
    pairs: Sequence[Tuple[str, str]] = SHARED_HEAD_SETS,
) -> List[Dict]:
    """Repeat-by-repeat comparison of recorded head sets for conditions that must share them"""
    registry = HeadSetRegistry()
    for r in runs:
        registry.record(r.condition, r.seed, r.repeat, r.head_set)
    checks = []
    for seed in sorted({r.seed for r in runs}):
        for condition_a, condition_b in pairs:
            if (condition_a, seed) in registry.digests and (condition_b, seed) in registry.digests:
                checks.append(registry.compare(condition_a, condition_b, seed))
    return checks


def select_best(val_scores: Sequence[Tuple[float, float]]) -> float:
    """
    Setting with the highest validation Info*Truth; the first one wins ties

    Args:
        val_scores: (setting, validation Info*Truth) pairs, grid order
    """
    if not val_scores:
        raise ContractException("select_best needs at least one setting")
    best_value, best_score = val_scores[0]
    for value, score in val_scores[1:]:
        if score > best_score or (math.isnan(best_score) and not math.isnan(score)):
            best_value, best_score = value, score
    return best_value


def _evaluate_both(weights: ModelWeights, task: Task, editor, lab: LabConfig, seed: int) -> Tuple[Metrics, Metrics]:
    kwargs = dict(
        eval_config=lab.eval,
        edit_prompt=lab.edit.edit_prompt_positions,
        n_mc_distractors=lab.world.n_mc_distractors,
        seed=seed,
    )
    val = evaluate_split(weights, task.world, task.split.val, editor, **kwargs)
    test = evaluate_split(weights, task.world, task.split.test, editor, **kwargs)
    return Metrics.from_eval(val), Metrics.from_eval(test)


def _finish(result: RunResult) -> RunResult:
    if result.settings and result.status == "ok":
        result.best_setting = select_best([(s.value, s.val.info_truth) for s in result.settings])
        result.best = next(s.test for s in result.settings if s.value == result.best_setting)
    return result


def run_base(weights: ModelWeights, task: Task, lab: LabConfig, seed: int) -> RunResult:
    """Unedited model metrics, reported as the base condition"""
    val, test = _evaluate_both(weights, task, None, lab, seed)
    result = RunResult(condition="base", seed=seed, config_hash=lab.config_hash(),
                       settings=[SettingResult(value=0.0, val=val, test=test)])
    return _finish(result)


def run_iti_sweep(
    weights: ModelWeights,
    localization: Localization,
    heads: Sequence[HeadId],
    alpha_grid: Sequence[float],
    task: Task,
    lab: LabConfig,
    condition: str = "iti_localized",
    seed: int = 0,
    repeat: int = 0,
) -> RunResult:
    """Evaluate the ITI edit at every alpha; best alpha picked on validation Info*Truth"""
    start = time.perf_counter()
    interventions = localization.vectors_for(heads)
    result = RunResult(
        condition=condition, seed=seed, repeat=repeat, heads=[tuple(h) for h in heads],
        head_set=HeadMask.for_model(weights.config, heads).digest(), config_hash=lab.config_hash(),
    )
    for alpha in alpha_grid:
        editor = ItiEditor.from_interventions(weights.config, interventions, alpha)
        val, test = _evaluate_both(weights, task, editor, lab, seed)
        result.settings.append(SettingResult(value=float(alpha), val=val, test=test))
        logger.debug(f"{condition} seed={seed} repeat={repeat} alpha={alpha}: val Info*Truth {val.info_truth:.3f}")
    result.wall_clock_s = time.perf_counter() - start
    return _finish(result)


def run_ipo_condition(
    weights: ModelWeights,
    mask: HeadMask,
    tau_grid: Sequence[float],
    task: Task,
    lab: LabConfig,
    condition: str = "ipo_localized",
    seed: int = 0,
    repeat: int = 0,
    cache: Optional[LogprobCache] = None,
    adapter_dir: Optional[Path] = None,
) -> RunResult:
    """
    Train one adapter per tau on the training pairs and evaluate it

    A training failure marks the run failed instead of aborting the experiment.
    """
    start = time.perf_counter()
    result = RunResult(
        condition=condition, seed=seed, repeat=repeat, heads=[tuple(h) for h in mask.sorted_heads()],
        head_set=mask.digest(), config_hash=lab.config_hash(),
    )
    for tau in tau_grid:
        config = TrainConfig.from_sections(lab.align, lab.edit, mask, tau, derive_seed(seed, "adapter"),
                                           weights.config.total_heads)
        try:
            run = train_localized(weights, task.pairs, config, cache=cache)
        except TrainingException as e:
            logger.error(f"{condition} seed={seed} repeat={repeat} tau={tau} failed: {e.message}")
            result.status = "failed"
            result.error = e.message
            break
        editor = run.adapter.frozen()
        if adapter_dir is not None:
            save_adapter(editor, adapter_dir / f"{condition}_s{seed}_r{repeat}_tau{tau:g}.hedl")
        val, test = _evaluate_both(weights, task, editor, lab, seed)
        result.settings.append(SettingResult(value=float(tau), val=val, test=test))
        logger.debug(f"{condition} seed={seed} repeat={repeat} tau={tau}: val Info*Truth {val.info_truth:.3f}")
    result.wall_clock_s = time.perf_counter() - start
    return _finish(result)


def plans_for(lab: LabConfig, seeds: Sequence[int]) -> List[ExperimentPlan]:
    plan = lab.plan
    plans = []
    for condition in plan.conditions:
        is_iti = condition.startswith("iti")
        k = {"ipo_full": lab.model.total_heads, "ipo_single": 1}.get(condition, plan.k)
        repeats = {"iti_random": plan.n_random_sets, "ipo_random": plan.n_random_sets,
                   "ipo_single": plan.n_single_heads}.get(condition, 1)
        plans.append(ExperimentPlan(
            condition=condition, k=k, n_repeats=repeats,
            grid=list(plan.alpha_grid if is_iti else lab.align.tau_grid), seeds=list(seeds),
        ))
    return plans


def prepare_seed(lab: LabConfig, seed: int) -> Tuple[Task, ModelWeights, Localization]:
    """Task, pretrained base model and probe localization for one seed"""
    with StageTimer(f"seed {seed}: task", logger):
        task = generate_task(lab.world, seed)
    with StageTimer(f"seed {seed}: pretrain", logger):
        weights = pretrain(lab.model.model_copy(update={"seed": seed}), task.corpus, lab.pretrain)
    if weights.train_accuracy is not None and weights.train_accuracy < ACCURACY_TARGET:
        logger.warning(f"seed {seed}: base model next-token accuracy {weights.train_accuracy:.3f} "
                       f"is below {ACCURACY_TARGET}")
    with StageTimer(f"seed {seed}: probe", logger):
        examples = build_probe_examples(task.world, task.split.train, lab.probe.random_questions_per_subject,
                                        derive_seed(seed, "probe_examples"))
        localization = localize(weights, examples, lab.probe)
    return task, weights, localization


def run_seed(
    lab: LabConfig,
    seed: int,
    registry: Optional[HeadSetRegistry] = None,
    cache: Optional[LogprobCache] = None,
    adapter_dir: Optional[Path] = None,
) -> List[RunResult]:
    """Every configured condition for one experiment seed"""
    registry = registry or HeadSetRegistry()
    cache = cache or LogprobCache()
    plans = {p.condition: p for p in plans_for(lab, [seed])}
    task, weights, localization = prepare_seed(lab, seed)
    config = weights.config
    results = [run_base(weights, task, lab, seed)]

    localized = localization.top(lab.plan.k)
    random_sets = sample_random_heads(lab.plan.k, lab.plan.n_random_sets, derive_seed(seed, "random_heads"),
                                      config.n_layers, config.n_heads)
    logger.info(f"seed {seed}: localized heads {[str(h) for h in localized]}")

    if "iti_localized" in plans:
        with StageTimer(f"seed {seed}: iti_localized", logger):
            results.append(run_iti_sweep(weights, localization, localized, plans["iti_localized"].grid,
                                         task, lab, "iti_localized", seed))
    if "iti_random" in plans:
        with StageTimer(f"seed {seed}: iti_random", logger):
            for repeat, heads in enumerate(random_sets):
                result = run_iti_sweep(weights, localization, heads, plans["iti_random"].grid,
                                       task, lab, "iti_random", seed, repeat)
                registry.record("iti_random", seed, repeat, result.head_set)
                results.append(result)

    ipo_jobs: List[Tuple[str, int, HeadMask]] = []
    if "ipo_full" in plans:
        full = HeadMask.full(config)
        ipo_jobs.append(("ipo_full", 0, full))
    if "ipo_localized" in plans:
        mask = HeadMask.for_model(config, localized)
        ipo_jobs.append(("ipo_localized", 0, mask))
    if "ipo_random" in plans:
        for repeat, heads in enumerate(random_sets):
            mask = HeadMask.for_model(config, heads)
            registry.record("ipo_random", seed, repeat, mask.digest())
            ipo_jobs.append(("ipo_random", repeat, mask))
        if "iti_random" in plans:
            registry.verify("iti_random", "ipo_random", seed)
    if "ipo_single" in plans:
        singles = sample_random_heads(1, lab.plan.n_single_heads, derive_seed(seed, "single_heads"),
                                      config.n_layers, config.n_heads)
        for repeat, heads in enumerate(singles):
            mask = HeadMask.for_model(config, heads)
            ipo_jobs.append(("ipo_single", repeat, mask))

    for condition, repeat, mask in ipo_jobs:
        with StageTimer(f"seed {seed}: {condition} #{repeat}", logger):
            result = run_ipo_condition(weights, mask, plans[condition].grid, task, lab, condition,
                                       seed, repeat, cache, adapter_dir)
        if condition == "ipo_single":
            result.probe_val_acc = localization.probes[mask.sorted_heads()[0]].val_accuracy
        results.append(result)

    stats = cache.get_stats()
    logger.info(f"seed {seed}: {len(results)} runs, reference cache hit rate {stats['hit_rate']}%")
    return results


def run_experiment(lab: LabConfig, seeds: Optional[Sequence[int]] = None,
                   adapter_dir: Optional[Path] = None) -> ExperimentResults:
    """Run every seed of the plan with shared head-set bookkeeping"""
    seeds = list(seeds) if seeds is not None else list(lab.plan.seeds)
    registry = HeadSetRegistry()
    cache = LogprobCache()
    results = ExperimentResults(config_hash=lab.config_hash(), seeds=seeds)
    for seed in seeds:
        results.runs.extend(run_seed(lab, seed, registry, cache, adapter_dir))
    return results


def _write_frame(frame: pd.DataFrame, path: Path) -> Path:
    try:
        frame.to_csv(path, index=False, float_format="%.12g")
    except OSError as e:
        raise ArtifactIOException(f"cannot write {path}: {e}", {"path": str(path)})
    return path


def emit_report(results: ExperimentResults, out_dir, lab: Optional[LabConfig] = None) -> Dict[str, Path]:
    """
    Write the eval CSV, summary tables, plot data and the run manifest

    Report files contain no timestamps or durations, so identical inputs
    produce byte-identical files.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ArtifactIOException(f"cannot create report directory {out_dir}: {e}")

    runs = [r.record() for r in results.runs]
    setting_rows = [row for r in results.runs for row in r.setting_records()]

    files = {"eval": write_eval_csv(setting_rows, out_dir / "eval.csv")}
    frames = {
        "summary": analytics.condition_summary_frame(runs),
        "comparisons": analytics.comparisons_frame(runs),
        "fig_infotruth_hist": analytics.infotruth_hist_frame(runs),
        "fig_truth_info_scatter": analytics.truth_info_scatter_frame(setting_rows),
        "fig_kl_mc_scatter": analytics.kl_mc_scatter_frame(runs),
        "fig_single_heads": analytics.single_head_frame(runs),
    }
    for name, frame in frames.items():
        files[name] = _write_frame(frame, out_dir / f"{name}.csv")

    settings = get_settings()
    manifest = {
        "app": settings.APP_NAME,
        "app_version": settings.APP_VERSION,
        "environment": settings.ENVIRONMENT,
        "config_hash": results.config_hash,
        "config": lab.model_dump(mode="json") if lab is not None else None,
        "seeds": results.seeds,
        "conditions": sorted({r.condition for r in results.runs}),
        "head_sets": {f"{r.condition}:{r.seed}:{r.repeat}": r.head_set for r in results.runs},
        "shared_head_sets": shared_head_set_checks(results.runs),
        "failed_runs": [f"{r.condition}:{r.seed}:{r.repeat}" for r in results.runs if r.status != "ok"],
        "effective_single_heads": analytics.effective_single_heads(runs),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
        "files": sorted(p.name for p in files.values()),
    }
    manifest_path = out_dir / "manifest.json"
    try:
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise ArtifactIOException(f"cannot write {manifest_path}: {e}")
    files["manifest"] = manifest_path
    logger.info(f"report written to {out_dir} ({len(files)} files)")
    return files


def save_results(results: ExperimentResults, path) -> Path:
    """Run results without wall-clock fields"""
    path = Path(path)
    data = results.model_dump(mode="json", exclude={"runs": {"__all__": {"wall_clock_s"}}})
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise ArtifactIOException(f"cannot write {path}: {e}")
    return path


def load_results(path) -> ExperimentResults:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ArtifactIOException(f"cannot read {path}: {e}")
    return ExperimentResults.model_validate_json(text)


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def parse_heads(text: str) -> List[HeadId]:
    """'0:1,2:3' -> [L0H1, L2H3]"""
    heads = []
    for item in text.split(","):
        try:
            layer, head = item.strip().split(":")
            heads.append(HeadId(int(layer), int(head)))
        except ValueError:
            raise ConfigException(f"bad head '{item}', expected layer:head")
    return heads


def _weights_for(args, lab: LabConfig, task: Task, seed: int) -> ModelWeights:
    if getattr(args, "weights", None):
        return load_weights(args.weights)
    with StageTimer(f"seed {seed}: pretrain", logger):
        return pretrain(lab.model.model_copy(update={"seed": seed}), task.corpus, lab.pretrain)


def _localization_for(args, lab: LabConfig, task: Task, weights: ModelWeights, seed: int) -> Localization:
    if getattr(args, "interventions", None):
        return load_interventions(args.interventions)
    examples = build_probe_examples(task.world, task.split.train, lab.probe.random_questions_per_subject,
                                    derive_seed(seed, "probe_examples"))
    return localize(weights, examples, lab.probe)


def cmd_pretrain(args, lab: LabConfig, out: Path) -> int:
    seed = args.seed or 0
    task = generate_task(lab.world, seed)
    weights = _weights_for(argparse.Namespace(), lab, task, seed)
    path = save_weights(weights, out / f"model_seed{seed}.hedl")
    print(json.dumps({"weights": str(path), "train_accuracy": weights.train_accuracy}))
    return 0


def cmd_gen_task(args, lab: LabConfig, out: Path) -> int:
    seed = args.seed or 0
    task = generate_task(lab.world, seed)
    world = task.world
    data = {
        "seed": seed,
        "subjects": [
            {"subject": s, "true_value": world.true_value[s], "distractor": world.distractor[s],
             "misconception": world.misconception[s]}
            for s in world.subjects
        ],
        "split": {"train": list(task.split.train), "val": list(task.split.val), "test": list(task.split.test)},
        "pairs": [p.model_dump(mode="json") for p in task.pairs],
        "corpus": task.corpus,
    }
    path = out / f"task_seed{seed}.json"
    try:
        out.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise ArtifactIOException(f"cannot write {path}: {e}")
    print(json.dumps({"task": str(path), "split": task.split.sizes()}))
    return 0


def cmd_probe(args, lab: LabConfig, out: Path) -> int:
    seed = args.seed or 0
    task = generate_task(lab.world, seed)
    weights = _weights_for(args, lab, task, seed)
    localization = _localization_for(argparse.Namespace(), lab, task, weights, seed)
    save_probe_report(localization, out / f"probe_report_seed{seed}.csv")
    save_interventions(localization, out / f"interventions_seed{seed}.hedl")
    print(json.dumps({"top_heads": [str(h) for h in localization.top(lab.probe.top_k)]}))
    return 0


def cmd_iti_sweep(args, lab: LabConfig, out: Path) -> int:
    seed = args.seed or 0
    task = generate_task(lab.world, seed)
    weights = _weights_for(args, lab, task, seed)
    localization = _localization_for(args, lab, task, weights, seed)
    heads = parse_heads(args.heads) if args.heads else localization.top(lab.probe.top_k)
    condition = "iti_heads" if args.heads else "iti_localized"
    result = run_iti_sweep(weights, localization, heads, lab.plan.alpha_grid, task, lab, condition, seed)
    write_eval_csv(result.setting_records(), out / f"iti_seed{seed}.csv")
    print(json.dumps({"condition": condition, "head_set": result.head_set, "best_alpha": result.best_setting,
                      "test": result.best.model_dump() if result.best else None}))
    return 0


def cmd_ipo_train(args, lab: LabConfig, out: Path) -> int:
    seed = args.seed or 0
    task = generate_task(lab.world, seed)
    weights = _weights_for(args, lab, task, seed)
    if args.full:
        mask = HeadMask.full(weights.config)
    elif args.heads:
        mask = HeadMask.for_model(weights.config, parse_heads(args.heads))
    else:
        mask = HeadMask.for_model(weights.config, _localization_for(args, lab, task, weights, seed).top(lab.plan.k))
    tau = args.tau if args.tau is not None else lab.align.tau_grid[0]
    config = TrainConfig.from_sections(lab.align, lab.edit, mask, tau, derive_seed(seed, "adapter"),
                                       weights.config.total_heads)
    run = train_localized(weights, task.pairs, config)
    adapter_path = save_adapter(run.adapter, out / f"adapter_seed{seed}.hedl")
    save_trace(run, out / f"trace_seed{seed}.csv")
    print(json.dumps({"adapter": str(adapter_path), "head_set": mask.digest(),
                      "initial_loss": run.initial_loss, "final_loss": run.final_loss}))
    return 0


def cmd_evaluate(args, lab: LabConfig, out: Path) -> int:
    seed = args.seed or 0
    task = generate_task(lab.world, seed)
    weights = _weights_for(args, lab, task, seed)
    editor = None
    condition, setting = "base", 0.0
    if args.adapter:
        editor = load_adapter(args.adapter)
        condition = "adapter"
    elif args.alpha is not None:
        localization = _localization_for(args, lab, task, weights, seed)
        heads = parse_heads(args.heads) if args.heads else localization.top(lab.probe.top_k)
        editor = ItiEditor.from_interventions(weights.config, localization.vectors_for(heads), args.alpha)
        condition, setting = "iti", args.alpha
    val, test = _evaluate_both(weights, task, editor, lab, seed)
    result = RunResult(condition=condition, seed=seed, config_hash=lab.config_hash(),
                       settings=[SettingResult(value=setting, val=val, test=test)])
    write_eval_csv(_finish(result).setting_records(), out / f"eval_seed{seed}.csv")
    print(json.dumps({"val": val.model_dump(), "test": test.model_dump()}))
    return 0


def cmd_experiment(args, lab: LabConfig, out: Path) -> int:
    seeds = [args.seed] if args.seed is not None else None
    adapter_dir = out / "adapters" if args.save_adapters else None
    results = run_experiment(lab, seeds, adapter_dir)
    save_results(results, out / "results.json")
    emit_report(results, out, lab)
    failed = [r for r in results.runs if r.status != "ok"]
    if failed:
        logger.error(f"{len(failed)} runs failed")
        return EXIT_TRAINING
    return EXIT_OK


def cmd_report(args, lab: LabConfig, out: Path) -> int:
    results = load_results(args.results or out / "results.json")
    emit_report(results, out, lab)
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "gen-task": cmd_gen_task,
    "probe": cmd_probe,
    "iti-sweep": cmd_iti_sweep,
    "ipo-train": cmd_ipo_train,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="headedit",
        description="Localized vs random representation edits on a synthetic truthfulness task",
    )
    parser.add_argument("--config", default=None, help="JSON experiment configuration")
    parser.add_argument("--seed", type=int, default=None, help="Experiment seed (default: plan seeds, or 0)")
    parser.add_argument("--out", default=None, help="Output directory")
    parser.add_argument("--log-level", default=None, help="Override HEADEDIT_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", help="Train the base model and save its weights")
    sub.add_parser("gen-task", help="Write the synthetic world, split, pairs and corpus")

    probe = sub.add_parser("probe", help="Probe every head and build ITI vectors")
    probe.add_argument("--weights", help="Saved base model (pretrains when omitted)")

    iti = sub.add_parser("iti-sweep", help="Sweep the ITI strength over the alpha grid")
    iti.add_argument("--weights")
    iti.add_argument("--interventions", help="Saved probe/intervention container")
    iti.add_argument("--heads", help="Comma-separated layer:head list (default: top probed heads)")

    ipo = sub.add_parser("ipo-train", help="Train one localized IPO adapter")
    ipo.add_argument("--weights")
    ipo.add_argument("--interventions")
    ipo.add_argument("--heads")
    ipo.add_argument("--full", action="store_true", help="Edit every head")
    ipo.add_argument("--tau", type=float, default=None)

    ev = sub.add_parser("evaluate", help="Evaluate the base model, an adapter or an ITI edit")
    ev.add_argument("--weights")
    ev.add_argument("--adapter")
    ev.add_argument("--interventions")
    ev.add_argument("--heads")
    ev.add_argument("--alpha", type=float, default=None)

    exp = sub.add_parser("experiment", help="Run the full localized/random/single-head pipeline")
    exp.add_argument("--save-adapters", action="store_true")

    rep = sub.add_parser("report", help="Rebuild report files from results.json")
    rep.add_argument("--results", help="results.json path (default: <out>/results.json)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; that code means training failure here
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    settings = get_settings()
    setup_logging(args.log_level or settings.LOG_LEVEL, settings.LOG_FILE, settings.LOG_JSON)
    try:
        lab = load_lab_config(args.config)
        out = Path(args.out or settings.OUT_DIR)
        return COMMANDS[args.command](args, lab, out)
    except HeadEditException as e:
        logger.error(f"{args.command} failed: {e.message}")
        if e.details:
            logger.debug(f"details: {e.details}")
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
