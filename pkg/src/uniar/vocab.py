"""Unified token-ID space and the visual-token activation schedule.

The unified space concatenates three ranges: textual IDs first, visual IDs
next, six special tokens last ([SOS], [EOS], [SOI], [EOI], [MASK], PAD).
Visual IDs start all inactive under the periodic schedule and are revealed
one at a time during training; occurrences of not-yet-activated IDs are
rewritten to [MASK] before the loss sees them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

SPECIALS = ("SOS", "EOS", "SOI", "EOI", "MASK", "PAD")


@dataclass(frozen=True)
class VocabLayout:
    """Partition of the unified ID space.

    Textual IDs occupy [0, text_size), visual IDs occupy
    [text_size, text_size + visual_size), and the six specials take the tail
    slots in the order [SOS], [EOS], [SOI], [EOI], [MASK], PAD.
    """

    text_size: int
    visual_size: int

    def __post_init__(self):
        if self.text_size < 1:
            raise ValueError(f"text_size must be >= 1, got {self.text_size}")
        if self.visual_size < 1:
            raise ValueError(f"visual_size must be >= 1, got {self.visual_size}")

    @property
    def total_size(self) -> int:
        return self.text_size + self.visual_size + len(SPECIALS)

    @property
    def sos(self) -> int:
        return self.text_size + self.visual_size

    @property
    def eos(self) -> int:
        return self.sos + 1

    @property
    def soi(self) -> int:
        return self.sos + 2

    @property
    def eoi(self) -> int:
        return self.sos + 3

    @property
    def mask(self) -> int:
        return self.sos + 4

    @property
    def pad(self) -> int:
        return self.sos + 5

    @property
    def special_ids(self) -> tuple[int, ...]:
        return tuple(range(self.sos, self.sos + len(SPECIALS)))

    def visual_ids(self) -> range:
        return range(self.text_size, self.text_size + self.visual_size)

    def is_textual(self, token_id: int) -> bool:
        self._check(token_id)
        return token_id < self.text_size

    def is_visual(self, token_id: int) -> bool:
        self._check(token_id)
        return self.text_size <= token_id < self.text_size + self.visual_size

    def is_special(self, token_id: int) -> bool:
        self._check(token_id)
        return token_id >= self.sos

    def kind_of(self, token_id: int) -> str:
        if self.is_textual(token_id):
            return "textual"
        if self.is_visual(token_id):
            return "visual"
        return SPECIALS[token_id - self.sos]

    def _check(self, token_id: int) -> None:
        if not 0 <= token_id < self.total_size:
            raise ValueError(
                f"token id {token_id} outside unified space [0, {self.total_size})"
            )


class ActivationState:
    """Activated / pending split of the visual IDs under the reveal schedule.

    The pending pool is shuffled once at construction from a dedicated seed;
    each activation pops the next element of that fixed order. This matches a
    uniform draw without replacement per tick, is replayable from the seed
    alone, and consumes no RNG during training, so schedules with different k
    (or none at all) see identical data-sampling streams.

    k is the activation period; k=None means immediate mode, where every
    visual ID is active from step 0 and ticks only advance the step counter.
    """

    def __init__(
        self,
        layout: VocabLayout,
        k: int | None,
        seed: int,
        *,
        step: int = 0,
        n_activated: int | None = None,
    ):
        if k is not None and k < 1:
            raise ValueError(f"activation period must be >= 1, got {k}")
        if step < 0:
            raise ValueError(f"step must be >= 0, got {step}")
        self.layout = layout
        self.k = k
        self.seed = seed
        self.step = step
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        lo = layout.text_size
        self._order = rng.permutation(np.arange(lo, lo + layout.visual_size))
        if n_activated is None:
            n_activated = layout.visual_size if k is None else 0
        if not 0 <= n_activated <= layout.visual_size:
            raise ValueError(f"n_activated out of range: {n_activated}")
        self.n_activated = n_activated
        # Lookup over the whole unified space: textual and special IDs always
        # pass through masking, visual IDs only once activated.
        self._active = np.ones(layout.total_size, dtype=bool)
        self._active[self._order[self.n_activated :]] = False

    @classmethod
    def immediate(cls, layout: VocabLayout, seed: int) -> "ActivationState":
        return cls(layout, None, seed)

    @classmethod
    def periodic(cls, layout: VocabLayout, k: int, seed: int) -> "ActivationState":
        if k is None:
            raise ValueError("periodic schedule needs an integer period")
        return cls(layout, k, seed)

    @property
    def activated(self) -> frozenset[int]:
        return frozenset(int(i) for i in self._order[: self.n_activated])

    @property
    def pending(self) -> frozenset[int]:
        return frozenset(int(i) for i in self._order[self.n_activated :])

    @property
    def active_lookup(self) -> np.ndarray:
        """Boolean table over the unified space; True where an ID survives masking."""
        return self._active

    def is_active(self, token_id: int) -> bool:
        self.layout._check(token_id)
        return bool(self._active[token_id])

    def activation_fraction(self) -> float:
        return self.n_activated / self.layout.visual_size

    def tick(self) -> "ActivationState":
        """Advance one training step; on schedule, activate one pending visual ID.

        The step counter is incremented first, then the periodic test runs, so
        with period k the first activation lands on step k and the pool of V
        pending IDs empties exactly at step k*V.
        """
        self.step += 1
        if (
            self.k is not None
            and self.step % self.k == 0
            and self.n_activated < self.layout.visual_size
        ):
            token_id = int(self._order[self.n_activated])
            self._active[token_id] = True
            self.n_activated += 1
        return self

    def state_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "k": "immediate" if self.k is None else int(self.k),
            "step": int(self.step),
            "n_activated": int(self.n_activated),
        }

    @classmethod
    def from_state_dict(cls, layout: VocabLayout, d: dict) -> "ActivationState":
        k = d["k"]
        return cls(
            layout,
            None if k == "immediate" else int(k),
            int(d["seed"]),
            step=int(d["step"]),
            n_activated=int(d["n_activated"]),
        )

    def __repr__(self):
        mode = "immediate" if self.k is None else f"k={self.k}"
        return (
            f"ActivationState({mode}, step={self.step}, "
            f"activated={self.n_activated}/{self.layout.visual_size})"
        )


def mask_sequence(seq, state: ActivationState):
    """Rewrite not-yet-activated visual IDs in a formatted sequence to [MASK].

    Applies to the whole id sequence, so both the input and the shifted-target
    views of training see the same rewrite. Textual, special, and activated
    visual IDs pass through untouched. Returns a sequence of the same type
    (any dataclass with an `ids` tuple field); input is never mutated.
    """
    layout = state.layout
    ids = np.asarray(seq.ids, dtype=np.int64)
    if ids.size:
        bad = (ids < 0) | (ids >= layout.total_size)
        if bad.any():
            pos = int(np.argmax(bad))
            raise ValueError(
                f"invalid token id {int(ids[pos])} at position {pos} "
                f"(unified space is [0, {layout.total_size}))"
            )
    keep = state.active_lookup[ids]
    if keep.all():
        return seq
    out = np.where(keep, ids, layout.mask)
    return dataclasses.replace(seq, ids=tuple(int(i) for i in out))
