"""
Representation Edits
Heuristic ITI addition, rank-1 LoRA edits and the head-maskable reparameterized form
"""
import hashlib
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Union

import numpy as np

from checkpoint import META_KEY, artifact_errors, read_container, read_meta, require_array, write_container
from config import ModelConfig
from exceptions import ArtifactIOException, ContractException, DimensionException
from model import HeadId, ModelWeights, all_heads, head_slice
from tensor import Tensor
from validators import HeadValidator

logger = logging.getLogger(__name__)


class EditVariant(str, Enum):
    ITI = "iti"
    LORA = "lora"
    LORA_REPARAM = "lora_reparam"


class HeadMask:
    """Set of heads whose write directions may be edited"""

    def __init__(self, heads: Iterable[HeadId], n_layers: int, n_heads: int, head_dim: int):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.head_dim = head_dim
        checked = set()
        for layer, head in heads:
            HeadValidator.validate(layer, head, n_layers, n_heads)
            checked.add(HeadId(int(layer), int(head)))
        self.heads: FrozenSet[HeadId] = frozenset(checked)

    @classmethod
    def for_model(cls, config: ModelConfig, heads: Iterable[HeadId]) -> "HeadMask":
        return cls(heads, config.n_layers, config.n_heads, config.head_dim)

    @classmethod
    def full(cls, config: ModelConfig) -> "HeadMask":
        return cls.for_model(config, all_heads(config))

    @property
    def hidden_dim(self) -> int:
        return self.n_heads * self.head_dim

    def __len__(self) -> int:
        return len(self.heads)

    def __contains__(self, head) -> bool:
        return HeadId(*head) in self.heads

    def __eq__(self, other) -> bool:
        return isinstance(other, HeadMask) and self.heads == other.heads and \
            (self.n_layers, self.n_heads, self.head_dim) == (other.n_layers, other.n_heads, other.head_dim)

    def __hash__(self) -> int:
        return hash((self.heads, self.n_layers, self.n_heads, self.head_dim))

    def __repr__(self) -> str:
        return f"HeadMask({[str(h) for h in self.sorted_heads()]})"

    def sorted_heads(self) -> List[HeadId]:
        return sorted(self.heads)

    def is_full(self) -> bool:
        return len(self.heads) == self.n_layers * self.n_heads

    def layers(self) -> List[int]:
        """Layers with at least one masked head"""
        return sorted({h.layer for h in self.heads})

    def indicator(self, layer: int) -> np.ndarray:
        """{0,1}^{DH} block indicator for one layer"""
        ind = np.zeros(self.hidden_dim)
        for h in self.heads:
            if h.layer == layer:
                ind[h.head * self.head_dim:(h.head + 1) * self.head_dim] = 1.0
        return ind

    def digest(self) -> str:
        """Stable hash of the head set"""
        text = ",".join(f"{h.layer}:{h.head}" for h in self.sorted_heads())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _check_vec(name: str, v: np.ndarray, n: int) -> None:
    if v.shape != (n,):
        raise DimensionException(name, v.shape, (n,))


def iti_edit(r_next_orig: np.ndarray, w_out: np.ndarray, theta: np.ndarray, alpha: float) -> np.ndarray:
    """r + alpha * W^l theta^l"""
    _check_vec("iti_edit theta", theta, w_out.shape[1])
    return r_next_orig + alpha * (w_out @ theta)


def lora_edit(r_next_orig: np.ndarray, o: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """r + <a, o> b"""
    _check_vec("lora_edit a", a, o.shape[-1])
    _check_vec("lora_edit b", b, r_next_orig.shape[-1])
    return r_next_orig + np.dot(a, o) * b


def project_mask(b: np.ndarray, mask: HeadMask, layer: int) -> np.ndarray:
    """Zero the blocks of b outside the mask; on-mask entries are kept bitwise"""
    return np.where(mask.indicator(layer) > 0, b, 0.0)


def reparam_lora_edit(
    r_next_orig: np.ndarray,
    o: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    w_out: np.ndarray,
    mask: HeadMask,
    layer: int,
) -> np.ndarray:
    """
    r + <a, o> * sum_{h in mask} W_h^l b_h^l

    Raises:
        ContractException: b is nonzero outside the mask
    """
    _check_vec("reparam_lora_edit a", a, o.shape[-1])
    _check_vec("reparam_lora_edit b", b, w_out.shape[1])
    ind = mask.indicator(layer)
    if np.any(b[ind == 0] != 0):
        raise ContractException("b has nonzero entries outside the head mask", {"layer": layer})
    strength = np.dot(a, o)
    delta = np.zeros_like(r_next_orig, dtype=np.float64)
    for h in sorted(mask.heads):
        if h.layer != layer:
            continue
        cols = slice(h.head * mask.head_dim, (h.head + 1) * mask.head_dim)
        delta = delta + w_out[:, cols] @ b[cols]
    return r_next_orig + strength * delta


class ItiEditor:
    """Adds alpha * W^l theta^l to the attention contribution"""

    variant = EditVariant.ITI

    def __init__(self, thetas: Dict[int, np.ndarray], alpha: float):
        self.thetas = {int(l): np.asarray(t, dtype=np.float64) for l, t in thetas.items()}
        self.alpha = float(alpha)

    @classmethod
    def from_interventions(cls, config: ModelConfig, interventions, alpha: float) -> "ItiEditor":
        """Assemble per-layer theta^l from per-head vectors, zero elsewhere"""
        thetas: Dict[int, np.ndarray] = {}
        for iv in interventions:
            layer_theta = thetas.setdefault(iv.head.layer, np.zeros(config.hidden_dim))
            layer_theta[head_slice(config, iv.head.head)] = iv.theta
        return cls(thetas, alpha)

    def residual_delta(self, layer: int, o: Tensor, w_out: Tensor) -> Optional[Tensor]:
        theta = self.thetas.get(layer)
        if theta is None or self.alpha == 0.0:
            return None
        return Tensor(self.alpha * (w_out.data @ theta))


class LoraAdapter:
    """
    Per-layer rank-1 adapter vectors a^l, b^l.

    LORA writes <a, o> b directly; LORA_REPARAM writes <a, o> W^l b with b
    confined to the mask's head blocks. Layers with no masked head carry no
    parameters.
    """

    def __init__(
        self,
        config: ModelConfig,
        mask: HeadMask,
        a: Dict[int, Tensor],
        b: Dict[int, Tensor],
        variant: EditVariant = EditVariant.LORA_REPARAM,
        constant_strength: bool = False,
    ):
        if variant == EditVariant.ITI:
            raise ContractException("LoraAdapter cannot hold an ITI edit")
        self.config = config
        self.mask = mask
        self.a = a
        self.b = b
        self.variant = variant
        self.constant_strength = constant_strength

    @classmethod
    def init(
        cls,
        config: ModelConfig,
        mask: HeadMask,
        seed: int = 0,
        init_std: float = 0.02,
        variant: EditVariant = EditVariant.LORA_REPARAM,
        constant_strength: bool = False,
    ) -> "LoraAdapter":
        """a = 0 and b ~ N(0, init_std^2) restricted to the mask, so the edit starts at zero"""
        rng = np.random.default_rng(seed)
        n = config.hidden_dim
        a, b = {}, {}
        for layer in mask.layers():
            a[layer] = Tensor(np.zeros(n), requires_grad=not constant_strength, name=f"layer{layer}.a")
            if constant_strength:
                b_init = np.zeros(n)
            else:
                b_init = rng.normal(0.0, init_std, size=n)
            if variant == EditVariant.LORA_REPARAM:
                b_init = project_mask(b_init, mask, layer)
            b[layer] = Tensor(b_init, requires_grad=True, name=f"layer{layer}.b")
        return cls(config, mask, a, b, variant, constant_strength)

    def parameters(self) -> List[Tensor]:
        params = []
        for layer in sorted(self.b):
            if not self.constant_strength:
                params.append(self.a[layer])
            params.append(self.b[layer])
        return params

    def project(self) -> None:
        """Re-impose the mask on every b^l"""
        if self.variant != EditVariant.LORA_REPARAM:
            return
        for layer, b in self.b.items():
            b.data = project_mask(b.data, self.mask, layer)

    def write_direction(self, layer: int, w_out: Tensor) -> Tensor:
        """b^l, or W^l b^l for the reparameterized form, as [hidden]"""
        b = self.b[layer]
        if self.variant == EditVariant.LORA:
            return b
        n = self.config.hidden_dim
        return (w_out @ b.reshape(n, 1)).reshape(n)

    def residual_delta(self, layer: int, o: Tensor, w_out: Tensor) -> Optional[Tensor]:
        if layer not in self.b:
            return None
        n = self.config.hidden_dim
        write = self.write_direction(layer, w_out)
        if self.constant_strength:
            return write
        strength = o @ self.a[layer].reshape(n, 1)
        return strength @ write.reshape(1, n)

    def frozen(self) -> "LoraAdapter":
        """Copy with gradients disabled"""
        return LoraAdapter(
            self.config, self.mask,
            {l: Tensor(t.data.copy(), name=t.name) for l, t in self.a.items()},
            {l: Tensor(t.data.copy(), name=t.name) for l, t in self.b.items()},
            self.variant, self.constant_strength,
        )

    def to_plain(self, weights: ModelWeights) -> "LoraAdapter":
        """Equivalent plain LoRA adapter with b' = W^l b"""
        if self.variant == EditVariant.LORA:
            return self.frozen()
        b_plain = {l: Tensor(weights.w_out(l) @ t.data, requires_grad=t.requires_grad, name=t.name)
                   for l, t in self.b.items()}
        a_plain = {l: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name) for l, t in self.a.items()}
        return LoraAdapter(self.config, self.mask, a_plain, b_plain, EditVariant.LORA, self.constant_strength)

    def off_mask_max(self) -> float:
        """Largest |b| entry outside the mask (0.0 when the mask holds)"""
        worst = 0.0
        for layer, b in self.b.items():
            off = b.data[self.mask.indicator(layer) == 0]
            if off.size:
                worst = max(worst, float(np.max(np.abs(off))))
        return worst


def save_adapter(adapter: LoraAdapter, path: Union[str, Path]) -> Path:
    """Write a^l, b^l and the sorted mask record"""
    entries = {}
    for layer in sorted(adapter.b):
        entries[f"layer{layer}.a"] = adapter.a[layer].data
        entries[f"layer{layer}.b"] = adapter.b[layer].data
    heads = adapter.mask.sorted_heads()
    entries["mask"] = np.array([[h.layer, h.head] for h in heads], dtype=np.int64).reshape(len(heads), 2)
    meta = {
        "kind": "adapter",
        "variant": adapter.variant.value,
        "constant_strength": adapter.constant_strength,
        "config": adapter.config.model_dump(mode="json"),
    }
    entries[META_KEY] = json.dumps(meta, sort_keys=True)
    return write_container(path, entries)


def load_adapter(path: Union[str, Path]) -> LoraAdapter:
    entries = read_container(path)
    meta = read_meta(entries)
    if meta.get("kind") != "adapter":
        raise ArtifactIOException(f"{path} does not hold an adapter")
    with artifact_errors(path):
        config = ModelConfig.model_validate(meta["config"])
        mask = HeadMask.for_model(config, [HeadId(int(l), int(h)) for l, h in require_array(entries, "mask")])
        variant = EditVariant(meta["variant"])
        constant_strength = bool(meta["constant_strength"])
    a, b = {}, {}
    for layer in mask.layers():
        a[layer] = Tensor(require_array(entries, f"layer{layer}.a"), name=f"layer{layer}.a")
        b[layer] = Tensor(require_array(entries, f"layer{layer}.b"), name=f"layer{layer}.b")
    return LoraAdapter(config, mask, a, b, variant, constant_strength)
