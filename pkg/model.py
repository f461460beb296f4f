"""
Toy Decoder-Only Transformer
Per-head attention algebra, activation capture, greedy decoding and pretraining
"""
import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np

from config import ModelConfig, PretrainConfig
from exceptions import ContractException, TrainingException
from tensor import AdamW, Tensor, backward, concat, layer_norm, log_softmax, no_grad, softmax
from validators import HeadValidator, TokenValidator

logger = logging.getLogger(__name__)

MASK_VALUE = -1e9


class HeadId(NamedTuple):
    """(layer, head) address of one attention head"""

    layer: int
    head: int

    def __str__(self) -> str:
        return f"L{self.layer}H{self.head}"


def all_heads(config: ModelConfig) -> List[HeadId]:
    return [HeadId(l, h) for l in range(config.n_layers) for h in range(config.n_heads)]


def head_slice(config: ModelConfig, head: int) -> slice:
    """Columns of the hidden vector owned by one head"""
    return slice(head * config.head_dim, (head + 1) * config.head_dim)


class EditHook(Protocol):
    """Anything that adds to the attention contribution of a layer"""

    def residual_delta(self, layer: int, o: Tensor, w_out: Tensor) -> Optional[Tensor]:
        """
        Args:
            layer: layer index
            o: concatenated head outputs [T x hidden]
            w_out: project-out matrix W^l [hidden x hidden]

        Returns:
            [T x hidden] or [hidden] addition to the residual, or None
        """
        ...


def param_names(config: ModelConfig) -> List[str]:
    names = ["tok_emb", "pos_emb"]
    for l in range(config.n_layers):
        names += [
            f"layer{l}.ln1.g", f"layer{l}.ln1.b",
            f"layer{l}.wq", f"layer{l}.wk", f"layer{l}.wv", f"layer{l}.wo",
            f"layer{l}.ln2.g", f"layer{l}.ln2.b",
            f"layer{l}.mlp.w1", f"layer{l}.mlp.b1", f"layer{l}.mlp.w2", f"layer{l}.mlp.b2",
        ]
    names += ["ln_f.g", "ln_f.b", "unembed"]
    return names


@dataclass
class ModelWeights:
    """
    Named parameter tensors of the toy transformer.

    Linear maps are stored as [out x in] so that W^l o is the plain matrix-vector
    product; W^l's columns h*D:(h+1)*D are the block W_h^l.
    """

    config: ModelConfig
    tensors: Dict[str, Tensor]
    train_accuracy: Optional[float] = None

    @classmethod
    def init(cls, config: ModelConfig) -> "ModelWeights":
        rng = np.random.default_rng(config.seed)
        n, m, v = config.hidden_dim, config.mlp_dim, config.vocab_size
        std = config.init_std
        shapes = {
            "tok_emb": (v, n),
            "pos_emb": (config.context_len, n),
            "ln_f.g": (n,), "ln_f.b": (n,),
            "unembed": (n, v),
        }
        for l in range(config.n_layers):
            shapes.update({
                f"layer{l}.ln1.g": (n,), f"layer{l}.ln1.b": (n,),
                f"layer{l}.wq": (n, n), f"layer{l}.wk": (n, n), f"layer{l}.wv": (n, n), f"layer{l}.wo": (n, n),
                f"layer{l}.ln2.g": (n,), f"layer{l}.ln2.b": (n,),
                f"layer{l}.mlp.w1": (m, n), f"layer{l}.mlp.b1": (m,),
                f"layer{l}.mlp.w2": (n, m), f"layer{l}.mlp.b2": (n,),
            })
        tensors = {}
        for name in param_names(config):
            shape = shapes[name]
            if name.endswith(".g"):
                data = np.ones(shape)
            elif name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
                data = np.zeros(shape)
            elif name in ("tok_emb", "pos_emb"):
                data = rng.normal(0.0, std, size=shape)
            else:
                data = rng.normal(0.0, 1.0 / math.sqrt(shape[-1] if name != "unembed" else shape[0]), size=shape)
            tensors[name] = Tensor(data, name=name)
        return cls(config=config, tensors=tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> List[Tensor]:
        return [self.tensors[name] for name in param_names(self.config)]

    def set_trainable(self, trainable: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = trainable
            t.grad = None

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            config=self.config,
            tensors={k: Tensor(t.data.copy(), name=k) for k, t in self.tensors.items()},
            train_accuracy=self.train_accuracy,
        )

    def w_out(self, layer: int) -> np.ndarray:
        """Project-out matrix W^l"""
        return self.tensors[f"layer{layer}.wo"].data

    def w_block(self, head: HeadId) -> np.ndarray:
        """Block W_h^l [hidden x D]"""
        HeadValidator.validate(head.layer, head.head, self.config.n_layers, self.config.n_heads)
        return self.w_out(head.layer)[:, head_slice(self.config, head.head)]

    def fingerprint(self) -> str:
        """Content hash used as a cache key"""
        digest = hashlib.sha256()
        for name in param_names(self.config):
            digest.update(name.encode("utf-8"))
            digest.update(self.tensors[name].data.tobytes())
        return digest.hexdigest()


@dataclass
class ActivationTape:
    """
    Per-layer captures of one forward pass.

    heads[l] holds the concatenated head outputs o^l [T x hidden] (head h in
    columns h*D:(h+1)*D); residual[l] is r^l, residual[L] the final stream.
    """

    config: ModelConfig
    heads: List[np.ndarray] = field(default_factory=list)
    residual: List[np.ndarray] = field(default_factory=list)
    attn_out: List[np.ndarray] = field(default_factory=list)
    mlp_out: List[np.ndarray] = field(default_factory=list)
    edit_delta: List[Optional[np.ndarray]] = field(default_factory=list)

    def head_output(self, head: HeadId, position: int = -1) -> np.ndarray:
        """o_h^l at one position"""
        return self.heads[head.layer][position, head_slice(self.config, head.head)]


def _causal_mask(T: int) -> np.ndarray:
    return np.triu(np.full((T, T), MASK_VALUE), k=1)


def edit_start(prompt_len: int, edit_prompt: bool = True) -> int:
    """
    First position an editor may modify

    With prompt positions excluded the window still opens at the last prompt
    token, whose output predicts the first generated token.
    """
    return 0 if edit_prompt else max(prompt_len - 1, 0)


def forward_capture(
    weights: ModelWeights,
    tokens: Sequence[int],
    editor: Optional[EditHook] = None,
    edit_from: int = 0,
    capture: bool = True,
) -> Tuple[Tensor, Optional[ActivationTape]]:
    """
    Run the transformer over tokens

    Args:
        weights: model parameters
        tokens: input token ids
        editor: optional residual editor applied at the layers it targets
        edit_from: first position the editor may modify
        capture: record an ActivationTape

    Returns:
        (logits [T x vocab], tape or None)
    """
    config = weights.config
    TokenValidator.validate_nonempty(tokens, "tokens")
    TokenValidator.validate_tokens(tokens, config.vocab_size)
    TokenValidator.validate_fits(len(tokens), config.context_len)

    T = len(tokens)
    D = config.head_dim
    scale = 1.0 / math.sqrt(D)
    mask = Tensor(_causal_mask(T))
    row_mask = None
    if edit_from > 0:
        row_mask = Tensor((np.arange(T) >= edit_from).astype(np.float64).reshape(T, 1))

    tape = ActivationTape(config=config) if capture else None
    r = weights["tok_emb"].take_rows(tokens) + weights["pos_emb"][:T]

    for l in range(config.n_layers):
        if tape is not None:
            tape.residual.append(r.data.copy())
        h = layer_norm(r, weights[f"layer{l}.ln1.g"], weights[f"layer{l}.ln1.b"])
        q = h @ weights[f"layer{l}.wq"].T
        k = h @ weights[f"layer{l}.wk"].T
        v = h @ weights[f"layer{l}.wv"].T

        head_outputs = []
        for hh in range(config.n_heads):
            cols = head_slice(config, hh)
            scores = (q[:, cols] @ k[:, cols].T) * scale + mask
            head_outputs.append(softmax(scores, axis=-1) @ v[:, cols])
        o = concat(head_outputs, axis=1)

        w_out = weights[f"layer{l}.wo"]
        attn_out = o @ w_out.T
        delta = editor.residual_delta(l, o, w_out) if editor is not None else None
        if delta is not None:
            if delta.ndim == 1:
                delta = delta.reshape(1, config.hidden_dim) * Tensor(np.ones((T, 1)))
            if row_mask is not None:
                delta = delta * row_mask
            attn_out = attn_out + delta
        r_mid = r + attn_out

        hidden = layer_norm(r_mid, weights[f"layer{l}.ln2.g"], weights[f"layer{l}.ln2.b"])
        act = (hidden @ weights[f"layer{l}.mlp.w1"].T + weights[f"layer{l}.mlp.b1"]).gelu()
        mlp = act @ weights[f"layer{l}.mlp.w2"].T + weights[f"layer{l}.mlp.b2"]
        r = r_mid + mlp

        if tape is not None:
            tape.heads.append(o.data.copy())
            tape.attn_out.append(attn_out.data.copy())
            tape.mlp_out.append(mlp.data.copy())
            tape.edit_delta.append(None if delta is None else delta.data.copy())

    if tape is not None:
        tape.residual.append(r.data.copy())
    final = layer_norm(r, weights["ln_f.g"], weights["ln_f.b"])
    logits = final @ weights["unembed"]
    return logits, tape


def generate(
    weights: ModelWeights,
    prompt: Sequence[int],
    max_new: int,
    editor: Optional[EditHook] = None,
    stop_token: Optional[int] = None,
    edit_prompt: bool = True,
) -> List[int]:
    """
    Greedy decoding without a KV cache

    Returns:
        prompt followed by the generated tokens
    """
    TokenValidator.validate_fits(len(prompt) + max_new, weights.config.context_len, "prompt + max_new")
    tokens = list(prompt)
    edit_from = edit_start(len(prompt), edit_prompt)
    with no_grad():
        for _ in range(max_new):
            logits, _ = forward_capture(weights, tokens, editor, edit_from=edit_from, capture=False)
            nxt = int(np.argmax(logits.data[-1]))
            tokens.append(nxt)
            if stop_token is not None and nxt == stop_token:
                break
    return tokens


def sequence_logprob_tensor(
    weights: ModelWeights,
    prompt: Sequence[int],
    answer: Sequence[int],
    editor: Optional[EditHook] = None,
    edit_prompt: bool = True,
) -> Tensor:
    """Differentiable sum of log p(answer_t | prompt, answer_<t)"""
    if len(answer) == 0:
        raise ContractException("sequence_logprob needs a nonempty answer")
    if len(prompt) == 0:
        raise ContractException("sequence_logprob needs a nonempty prompt")
    tokens = list(prompt) + list(answer)
    TokenValidator.validate_fits(len(tokens), weights.config.context_len, "prompt + answer")
    logits, _ = forward_capture(
        weights, tokens[:-1], editor, edit_from=edit_start(len(prompt), edit_prompt), capture=False
    )
    rows = np.arange(len(prompt) - 1, len(tokens) - 1)
    targets = np.asarray(answer, dtype=np.int64)
    return log_softmax(logits, axis=-1)[rows, targets].sum()


def sequence_logprob(
    weights: ModelWeights,
    prompt: Sequence[int],
    answer: Sequence[int],
    editor: Optional[EditHook] = None,
    edit_prompt: bool = True,
) -> float:
    """Sum of log p(answer_t | prompt, answer_<t); always <= 0"""
    with no_grad():
        return sequence_logprob_tensor(weights, prompt, answer, editor, edit_prompt).item()


def next_token_logprobs(weights: ModelWeights, tokens: Sequence[int],
                        editor: Optional[EditHook] = None, edit_from: int = 0) -> np.ndarray:
    """log-softmax of the logits at every position [T x vocab]"""
    with no_grad():
        logits, _ = forward_capture(weights, tokens, editor, edit_from=edit_from, capture=False)
        return log_softmax(logits, axis=-1).data


def _sequence_loss(weights: ModelWeights, seq: Sequence[int]) -> Tensor:
    logits, _ = forward_capture(weights, seq[:-1], capture=False)
    rows = np.arange(len(seq) - 1)
    targets = np.asarray(seq[1:], dtype=np.int64)
    return -log_softmax(logits, axis=-1)[rows, targets].mean()


def next_token_accuracy(weights: ModelWeights, corpus: Sequence[Sequence[int]]) -> float:
    """
    Greedy next-token accuracy against the corpus's modal continuations.

    Each prefix is scored against its most frequent continuation in the
    corpus (ties broken by lowest token id), so stochastic facts are judged
    against the best achievable prediction. The first prediction of every
    sequence is skipped.
    """
    continuations: Dict[Tuple[int, ...], Counter] = {}
    for seq in corpus:
        for t in range(1, len(seq) - 1):
            continuations.setdefault(tuple(seq[: t + 1]), Counter())[seq[t + 1]] += 1
    if not continuations:
        return 1.0
    correct = 0
    total = 0
    seen = set()
    for seq in corpus:
        key = tuple(seq)
        if key in seen:
            continue
        seen.add(key)
        log_probs = next_token_logprobs(weights, seq[:-1])
        for t in range(1, len(seq) - 1):
            counts = continuations[tuple(seq[: t + 1])]
            best = max(counts.values())
            modal = min(tok for tok, c in counts.items() if c == best)
            correct += int(np.argmax(log_probs[t]) == modal)
            total += 1
    return correct / total if total else 1.0


def pretrain(
    config: ModelConfig,
    corpus: Sequence[Sequence[int]],
    train_config: Optional[PretrainConfig] = None,
) -> ModelWeights:
    """
    Fit the base model by next-token cross-entropy

    Args:
        config: model shape and seed
        corpus: token sequences (each at least two tokens)
        train_config: optimizer schedule

    Returns:
        Frozen weights with train_accuracy set

    Raises:
        ContractException: empty corpus
        TrainingException: non-finite loss
    """
    if not corpus:
        raise ContractException("pretrain needs a nonempty corpus")
    train_config = train_config or PretrainConfig()
    sequences = [list(s) for s in corpus if len(s) >= 2]
    if not sequences:
        raise ContractException("pretrain needs sequences of at least two tokens")
    for i, seq in enumerate(sequences):
        TokenValidator.validate_tokens(seq, config.vocab_size, f"corpus[{i}]")
        TokenValidator.validate_fits(len(seq) - 1, config.context_len, "corpus sequence", example=i)

    weights = ModelWeights.init(config)
    weights.set_trainable(True)
    params = weights.parameters()
    optimizer = AdamW(params, lr=train_config.lr, weight_decay=train_config.weight_decay)
    rng = np.random.default_rng(config.seed)

    trace: List[float] = []
    step = 0
    for epoch in range(train_config.epochs):
        order = rng.permutation(len(sequences))
        epoch_losses = []
        for start in range(0, len(order), train_config.batch_size):
            batch = [sequences[i] for i in order[start:start + train_config.batch_size]]
            loss = _sequence_loss(weights, batch[0])
            for seq in batch[1:]:
                loss = loss + _sequence_loss(weights, seq)
            loss = loss * (1.0 / len(batch))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingException(
                    f"pretraining loss became {value} at step {step}",
                    {"step": step, "epoch": epoch, "trace": trace[-50:]},
                )
            backward(loss, leaves=params)
            optimizer.step()
            trace.append(value)
            epoch_losses.append(value)
            if step % train_config.log_every == 0:
                logger.debug(f"pretrain step {step}: loss {value:.4f}")
            step += 1
        logger.info(f"pretrain epoch {epoch + 1}/{train_config.epochs}: mean loss {np.mean(epoch_losses):.4f}")

    weights.set_trainable(False)
    weights.train_accuracy = next_token_accuracy(weights, sequences)
    logger.info(f"pretraining done: next-token accuracy {weights.train_accuracy:.3f}")
    return weights
