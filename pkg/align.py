"""
Localized IPO Training
Preference optimization of head-masked rank-1 adapters with a cosine schedule
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from caching import LogprobCache
from config import AlignConfig, EditConfig
from edits import EditVariant, HeadMask, LoraAdapter
from exceptions import ArtifactIOException, ConfigException, ContractException, training_failure
from model import ModelWeights, sequence_logprob_tensor
from tensor import AdamW, Tensor, backward, no_grad

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["step", "epoch", "lr", "loss"]


class PreferencePair(BaseModel):
    """(x, y+, y-) with y+ the truthful answer"""

    model_config = ConfigDict(frozen=True)

    x: Tuple[int, ...]
    y_plus: Tuple[int, ...]
    y_minus: Tuple[int, ...]

    @field_validator("x", "y_plus", "y_minus")
    @classmethod
    def validate_nonempty(cls, v):
        if len(v) == 0:
            raise ValueError("token sequence must be nonempty")
        return v

    @model_validator(mode="after")
    def validate_distinct(self):
        if self.y_plus == self.y_minus:
            raise ValueError("y_plus and y_minus must differ")
        return self


class TrainConfig(BaseModel):
    """One IPO run: a single tau and a single head mask"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    tau: float = Field(gt=0)
    epochs: int = Field(default=20, ge=1)
    batch_size: int = Field(default=4, ge=1)
    lr: float = Field(default=1e-4, gt=0)
    schedule: Literal["cosine", "constant"] = "cosine"
    seed: int = 0
    mask: HeadMask
    variant: EditVariant = EditVariant.LORA_REPARAM
    constant_strength: bool = False
    edit_prompt: bool = True
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(default=0.0, ge=0)
    init_std: float = Field(default=0.02, ge=0)

    @classmethod
    def from_sections(
        cls,
        align: AlignConfig,
        edit: EditConfig,
        mask: HeadMask,
        tau: float,
        seed: int,
        total_heads: int,
    ) -> "TrainConfig":
        """Build a run config from the lab sections; lr follows the head-count table"""
        if tau <= 0:
            raise ConfigException(f"tau must be positive, got {tau}")
        return cls(
            tau=tau,
            epochs=align.epochs,
            batch_size=align.batch_size,
            lr=align.lr_for(len(mask), total_heads),
            seed=seed,
            mask=mask,
            constant_strength=edit.constant_strength,
            edit_prompt=edit.edit_prompt_positions,
            betas=align.betas,
            weight_decay=align.weight_decay,
            init_std=align.init_std,
        )


@dataclass(frozen=True)
class TraceRow:
    step: int
    epoch: int
    lr: float
    loss: float


@dataclass
class TrainingRun:
    """Trained adapter plus its loss history"""

    adapter: LoraAdapter
    trace: List[TraceRow] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.trace], columns=TRACE_COLUMNS)


def cosine_lr(step: int, total_steps: int, lr_max: float) -> float:
    """lr_max * (1 + cos(pi * step / total_steps)) / 2"""
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ContractException(f"cosine_lr needs 0 <= step <= total_steps, got {step}/{total_steps}")
    if step == total_steps:
        return 0.0
    return lr_max * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def reference_logprobs(
    weights: ModelWeights,
    pairs: Sequence[PreferencePair],
    cache: Optional[LogprobCache] = None,
    edit_prompt: bool = True,
) -> List[Tuple[float, float]]:
    """(log pi_0(y+|x), log pi_0(y-|x)) for every pair, adapter disabled"""
    cache = cache or LogprobCache()
    items = []
    for pair in pairs:
        items += [(pair.x, pair.y_plus), (pair.x, pair.y_minus)]
    flat = cache.logprobs(weights, items, edit_prompt)
    return [(flat[2 * i], flat[2 * i + 1]) for i in range(len(pairs))]


def ipo_loss(
    batch: Sequence[PreferencePair],
    weights: ModelWeights,
    adapter: Optional[LoraAdapter],
    ref_logprobs: Sequence[Tuple[float, float]],
    tau: float,
    edit_prompt: bool = True,
) -> Tensor:
    """
    Mean over the batch of (h_i - 1/(2 tau))^2

    h_i = (log pi(y+|x) - log pi_0(y+|x)) - (log pi(y-|x) - log pi_0(y-|x)),
    where pi runs the base weights with the adapter and pi_0 without it.

    Raises:
        ConfigException: tau <= 0
        ContractException: empty batch or mismatched reference values
    """
    if tau <= 0:
        raise ConfigException(f"tau must be positive, got {tau}")
    if not batch:
        raise ContractException("ipo_loss needs a nonempty batch")
    if len(ref_logprobs) != len(batch):
        raise ContractException(f"{len(ref_logprobs)} reference values for {len(batch)} pairs")
    target = 1.0 / (2.0 * tau)
    total: Optional[Tensor] = None
    for pair, (ref_plus, ref_minus) in zip(batch, ref_logprobs):
        lp_plus = sequence_logprob_tensor(weights, pair.x, pair.y_plus, adapter, edit_prompt)
        lp_minus = sequence_logprob_tensor(weights, pair.x, pair.y_minus, adapter, edit_prompt)
        h = (lp_plus - ref_plus) - (lp_minus - ref_minus)
        term = (h - target) ** 2
        total = term if total is None else total + term
    return total * (1.0 / len(batch))


def train_localized(
    weights: ModelWeights,
    pairs: Sequence[PreferencePair],
    config: TrainConfig,
    cache: Optional[LogprobCache] = None,
    adapter: Optional[LoraAdapter] = None,
    on_step: Optional[Callable[[int, LoraAdapter], None]] = None,
) -> TrainingRun:
    """
    Minimize the IPO loss over the adapter vectors

    The base weights stay frozen. b is projected onto the mask after every
    optimizer step, so off-mask coordinates stay exactly zero.

    Args:
        weights: frozen base model
        pairs: training preference pairs
        config: one (tau, mask) run
        cache: shared reference log-prob cache
        adapter: starting adapter; a fresh zero-edit adapter when None
        on_step: called with (step, adapter) after each projected update

    Raises:
        ContractException: empty mask or no pairs
        TrainingException: non-finite loss, with the trace in details
    """
    if len(config.mask) == 0:
        raise ContractException("train_localized needs a nonempty head mask")
    if not pairs:
        raise ContractException("train_localized needs at least one preference pair")

    if adapter is None:
        adapter = LoraAdapter.init(
            weights.config, config.mask, seed=config.seed, init_std=config.init_std,
            variant=config.variant, constant_strength=config.constant_strength,
        )
    params = adapter.parameters()
    refs = reference_logprobs(weights, pairs, cache, config.edit_prompt)
    optimizer = AdamW(params, lr=config.lr, betas=config.betas, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)

    steps_per_epoch = math.ceil(len(pairs) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    with no_grad():
        initial = ipo_loss(pairs, weights, adapter, refs, config.tau, config.edit_prompt).item()
    run = TrainingRun(adapter=adapter, initial_loss=initial)
    logger.debug(f"IPO tau={config.tau} mask={config.mask.digest()} lr={config.lr:g}: initial loss {initial:.6f}")

    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            lr = cosine_lr(step, total_steps, config.lr) if config.schedule == "cosine" else config.lr
            loss = ipo_loss([pairs[i] for i in idx], weights, adapter, [refs[i] for i in idx],
                            config.tau, config.edit_prompt)
            value = loss.item()
            if not math.isfinite(value):
                raise training_failure(
                    f"IPO loss became {value} at step {step}",
                    [r.loss for r in run.trace],
                    step=step, epoch=epoch, tau=config.tau,
                )
            backward(loss, leaves=params)
            optimizer.step(lr=lr)
            adapter.project()
            run.trace.append(TraceRow(step=step, epoch=epoch, lr=lr, loss=value))
            losses.append(value)
            if on_step is not None:
                on_step(step, adapter)
            step += 1
        run.epoch_losses.append(float(np.mean(losses)))
        logger.debug(f"IPO epoch {epoch + 1}/{config.epochs}: mean loss {run.epoch_losses[-1]:.6f}")

    with no_grad():
        run.final_loss = ipo_loss(pairs, weights, adapter, refs, config.tau, config.edit_prompt).item()
    logger.info(
        f"IPO tau={config.tau} heads={len(config.mask)}: loss {run.initial_loss:.4f} -> {run.final_loss:.4f}"
    )
    return run


def save_trace(run: TrainingRun, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        run.trace_frame().to_csv(path, index=False, float_format="%.12g")
    except OSError as e:
        raise ArtifactIOException(f"cannot write training trace {path}: {e}")
    return path
