"""Key/value slices captured at attention sites and the masked image-token mixture."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import HardMask


def _ro(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.flags.writeable:
        a = a.copy()
        a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class KVSlice:
    """K/V of one attention site at one step, split into text and image tokens.

    Rows are tokens, columns are ``heads * head_dim`` features.
    """

    site: int
    step: int
    text_keys: np.ndarray
    text_values: np.ndarray
    image_keys: np.ndarray
    image_values: np.ndarray

    def __post_init__(self):
        tk, tv, ik, iv = (_ro(a) for a in (self.text_keys, self.text_values, self.image_keys, self.image_values))
        if tk.shape != tv.shape or ik.shape != iv.shape:
            raise ValueError("keys and values must have matching shapes")
        if tk.ndim != 2 or ik.ndim != 2 or tk.shape[1] != ik.shape[1]:
            raise ValueError(f"text {tk.shape} and image {ik.shape} segments need equal feature dims")
        for name, a in (("text_keys", tk), ("text_values", tv), ("image_keys", ik), ("image_values", iv)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, a)

    @property
    def num_image_tokens(self) -> int:
        return self.image_keys.shape[0]

    def same_shape(self, other: "KVSlice") -> bool:
        return (
            self.text_keys.shape == other.text_keys.shape
            and self.image_keys.shape == other.image_keys.shape
        )


def replace_image_kv(edit: KVSlice, base: KVSlice, mask: HardMask) -> KVSlice:
    """Image rows from ``edit`` where the mask is set and from ``base`` elsewhere.

    Text rows always come from ``edit``.  Because the mask is binary this is a
    row selection, so each output row is bitwise equal to its source row.
    """
    if (edit.site, edit.step) != (base.site, base.step):
        raise ValueError(
            f"provenance mismatch: edit slice (step {edit.step}, site {edit.site}) "
            f"vs base slice (step {base.step}, site {base.site})"
        )
    if not edit.same_shape(base):
        raise ValueError("edit and base slices differ in shape")
    if mask.bits.shape[0] != edit.num_image_tokens:
        raise ValueError(f"mask has {mask.bits.shape[0]} entries for {edit.num_image_tokens} image tokens")
    keep = mask.bits[:, None]
    return KVSlice(
        edit.site,
        edit.step,
        edit.text_keys,
        edit.text_values,
        np.where(keep, edit.image_keys, base.image_keys),
        np.where(keep, edit.image_values, base.image_values),
    )


@dataclass(frozen=True, eq=False)
class KVOverride:
    """Directive for the attention computation: mix own image K/V with ``base`` under ``mask``."""

    mask: HardMask
    base: Mapping[int, KVSlice] = field(default_factory=dict)

    def sites(self) -> tuple[int, ...]:
        return tuple(sorted(self.base))
