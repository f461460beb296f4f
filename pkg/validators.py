"""
Input Validation Utilities
Token-sequence and head-address checks shared by the model and pipelines
"""
import logging
from typing import Optional, Sequence

from exceptions import InputException

logger = logging.getLogger(__name__)


class TokenValidator:
    """Token sequence validation"""

    @staticmethod
    def validate_tokens(tokens: Sequence[int], vocab_size: int, what: str = "tokens") -> None:
        """Every token must lie in [0, vocab_size)"""
        for position, token in enumerate(tokens):
            if not 0 <= int(token) < vocab_size:
                raise InputException(
                    f"{what}: token {token} at position {position} outside vocabulary of size {vocab_size}",
                    {"position": position, "token": int(token), "vocab_size": vocab_size},
                )

    @staticmethod
    def validate_fits(length: int, context_len: int, what: str = "sequence", example: Optional[int] = None) -> None:
        """Sequence length must be within the model context"""
        if length > context_len:
            details = {"length": length, "context_len": context_len}
            if example is not None:
                details["example"] = example
            label = f"{what} (example {example})" if example is not None else what
            raise InputException(f"{label}: length {length} exceeds context {context_len}", details)

    @staticmethod
    def validate_nonempty(tokens: Sequence[int], what: str = "sequence") -> None:
        if len(tokens) == 0:
            raise InputException(f"{what} is empty")


class HeadValidator:
    """Attention-head address validation"""

    @staticmethod
    def validate(layer: int, head: int, n_layers: int, n_heads: int) -> None:
        """(layer, head) must address an existing head"""
        if not (0 <= layer < n_layers and 0 <= head < n_heads):
            raise InputException(
                f"head ({layer}, {head}) outside model with {n_layers} layers x {n_heads} heads",
                {"layer": layer, "head": head},
            )
