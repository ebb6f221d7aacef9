"""Unified sequence layouts, chat templating, packing, and parsing.

Every training sample is one flat ID sequence over the unified space:

    text only:      [SOS] x1..xN [EOS]
    image -> text:  [SOS] [SOI] y1..yK [EOI] x1..xN [EOS]
    text -> image:  [SOS] x1..xN [SOI] y1..yK [EOI] [EOS]
    unconditional:  [SOS] [SOI] y1..yK [EOI] [EOS]      (caption dropped)

x are textual IDs, y are visual IDs (or [MASK] after schedule masking). The
unconditional form is the text->image layout with an empty caption; it is
what classifier-free guidance trains its unconditional stream on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .vocab import VocabLayout

KINDS = ("text_only", "image_to_text", "text_to_image", "unconditional_image")


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class UnifiedSequence:
    ids: tuple[int, ...]
    kind: str
    text_span: tuple[int, int] | None  # [start, end) of the raw text ids
    image_span: tuple[int, int] | None  # [start, end) of the raw image ids

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown sequence kind {self.kind!r}")

    def __len__(self):
        return len(self.ids)

    def text_ids(self) -> tuple[int, ...]:
        if self.text_span is None:
            return ()
        s, e = self.text_span
        return self.ids[s:e]

    def image_ids(self) -> tuple[int, ...]:
        if self.image_span is None:
            return ()
        s, e = self.image_span
        return self.ids[s:e]


def _check_textual(x_ids, layout: VocabLayout) -> None:
    for i, t in enumerate(x_ids):
        if not layout.is_textual(t):
            raise ValueError(
                f"text position {i}: id {t} is not textual (< {layout.text_size})"
            )


def _check_image(y_ids, layout: VocabLayout, image_len: int) -> None:
    if image_len < 1:
        raise ValueError(f"image length must be >= 1, got {image_len}")
    if len(y_ids) != image_len:
        raise ValueError(f"image must be exactly {image_len} ids, got {len(y_ids)}")
    for i, t in enumerate(y_ids):
        if not (layout.is_visual(t) or t == layout.mask):
            raise ValueError(f"image position {i}: id {t} is not visual or [MASK]")


def format_text(x_ids, layout: VocabLayout) -> UnifiedSequence:
    """[SOS] x [EOS]; x must be non-empty textual ids."""
    x_ids = tuple(int(t) for t in x_ids)
    if not x_ids:
        raise ValueError("text sample must contain at least one textual id")
    _check_textual(x_ids, layout)
    ids = (layout.sos, *x_ids, layout.eos)
    return UnifiedSequence(ids, "text_only", (1, 1 + len(x_ids)), None)


def format_und(y_ids, x_ids, layout: VocabLayout, image_len: int) -> UnifiedSequence:
    """[SOS] [SOI] y [EOI] x [EOS]: describe the image that comes first."""
    y_ids = tuple(int(t) for t in y_ids)
    x_ids = tuple(int(t) for t in x_ids)
    _check_image(y_ids, layout, image_len)
    if not x_ids:
        raise ValueError("image-to-text sample needs a non-empty text segment")
    _check_textual(x_ids, layout)
    ids = (layout.sos, layout.soi, *y_ids, layout.eoi, *x_ids, layout.eos)
    img_start = 2
    txt_start = img_start + len(y_ids) + 1
    return UnifiedSequence(
        ids,
        "image_to_text",
        (txt_start, txt_start + len(x_ids)),
        (img_start, img_start + len(y_ids)),
    )


def format_gen(x_ids, y_ids, layout: VocabLayout, image_len: int) -> UnifiedSequence:
    """[SOS] x [SOI] y [EOI] [EOS]; empty x yields the unconditional form."""
    x_ids = tuple(int(t) for t in x_ids)
    y_ids = tuple(int(t) for t in y_ids)
    _check_textual(x_ids, layout)
    _check_image(y_ids, layout, image_len)
    ids = (layout.sos, *x_ids, layout.soi, *y_ids, layout.eoi, layout.eos)
    img_start = 2 + len(x_ids)
    kind = "text_to_image" if x_ids else "unconditional_image"
    text_span = (1, 1 + len(x_ids)) if x_ids else None
    return UnifiedSequence(ids, kind, text_span, (img_start, img_start + len(y_ids)))


def drop_caption(
    seq: UnifiedSequence, p: float, rng: np.random.Generator, layout: VocabLayout
) -> UnifiedSequence:
    """With probability p, strip the caption from a text->image sample.

    Supplies the unconditional stream for classifier-free guidance. p=0 is an
    identity that consumes no randomness; p=1 always drops.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability must be in [0, 1], got {p}")
    if seq.kind != "text_to_image":
        raise ValueError(f"can only drop captions from text_to_image, got {seq.kind}")
    if p == 0.0 or rng.random() >= p:
        return seq
    y = seq.image_ids()
    return format_gen((), y, layout, len(y))


def sft_template(turns) -> str:
    """Literal chat template: "User:" + input + "\\n" + "Assistant:" + response,
    repeated per turn, turns joined with a newline."""
    if not turns:
        raise ValueError("need at least one (input, response) turn")
    return "\n".join(f"User:{inp}\nAssistant:{resp}" for inp, resp in turns)


def format_sft(turns, tokenizer) -> list[int]:
    """Encode the chat template to textual ids, ready for Eq-style wrapping."""
    return tokenizer.encode(sft_template(turns))


def parse_sequence(ids, layout: VocabLayout) -> UnifiedSequence:
    """Recover (kind, spans) from a flat ID sequence; inverse of the formatters.

    Raises ParseError naming the first violating position.
    """
    ids = tuple(int(t) for t in ids)

    def fail(pos, msg):
        raise ParseError(f"position {pos}: {msg}")

    for i, t in enumerate(ids):
        if not 0 <= t < layout.total_size:
            fail(i, f"id {t} outside unified space [0, {layout.total_size})")
    if not ids:
        raise ParseError("position 0: empty sequence")
    if ids[0] != layout.sos:
        fail(0, f"expected [SOS] ({layout.sos}), got {ids[0]}")

    def scan_text(i):
        start = i
        while i < len(ids) and layout.is_textual(ids[i]):
            i += 1
        return (start, i), i

    def scan_image(i):
        if ids[i] != layout.soi:
            fail(i, f"expected [SOI], got {ids[i]}")
        i += 1
        start = i
        while i < len(ids) and (layout.is_visual(ids[i]) or ids[i] == layout.mask):
            i += 1
        if i >= len(ids):
            fail(len(ids) - 1, "unterminated image segment (no [EOI])")
        if ids[i] != layout.eoi:
            fail(i, f"image segment may only hold visual or [MASK] ids, got {ids[i]}")
        if start == i:
            fail(start, "empty image segment")
        return (start, i), i + 1

    def expect_eos(i):
        if i >= len(ids):
            fail(len(ids) - 1, "missing [EOS]")
        if ids[i] != layout.eos:
            fail(i, f"expected [EOS], got {ids[i]}")
        if i + 1 != len(ids):
            fail(i + 1, "trailing tokens after [EOS]")

    i = 1
    if i < len(ids) and ids[i] == layout.soi:
        image_span, i = scan_image(i)
        text_span, i = scan_text(i)
        if text_span[0] == text_span[1]:
            # No text after the image: this is the unconditional form.
            expect_eos(i)
            return UnifiedSequence(ids, "unconditional_image", None, image_span)
        expect_eos(i)
        return UnifiedSequence(ids, "image_to_text", text_span, image_span)
    text_span, i = scan_text(i)
    if i >= len(ids):
        fail(len(ids) - 1, "missing [EOS]")
    if ids[i] == layout.eos:
        if text_span[0] == text_span[1]:
            fail(i, "text-only sequence has no textual ids")
        expect_eos(i)
        return UnifiedSequence(ids, "text_only", text_span, None)
    if ids[i] == layout.soi:
        image_span, i = scan_image(i)
        expect_eos(i)
        return UnifiedSequence(ids, "text_to_image", text_span, image_span)
    fail(i, f"expected [SOI] or [EOS] after text, got {ids[i]}")


def parse_interleaved(ids, layout: VocabLayout) -> list[tuple[str, tuple[int, ...]]]:
    """Segments of a mixed-modal sequence: [SOS] (text | image)* [EOS].

    Returns [("text", ids...), ("image", ids...), ...]; raises ParseError on
    malformed input. Image segments must be [SOI]-opened and [EOI]-closed and
    may not contain textual or [MASK] ids.
    """
    ids = tuple(int(t) for t in ids)
    if not ids or ids[0] != layout.sos:
        raise ParseError("position 0: expected [SOS]")
    if ids[-1] != layout.eos:
        raise ParseError(f"position {len(ids) - 1}: expected final [EOS]")
    segments: list[tuple[str, tuple[int, ...]]] = []
    i = 1
    end = len(ids) - 1
    while i < end:
        t = ids[i]
        if layout.is_textual(t):
            start = i
            while i < end and layout.is_textual(ids[i]):
                i += 1
            segments.append(("text", ids[start:i]))
        elif t == layout.soi:
            i += 1
            start = i
            while i < end and layout.is_visual(ids[i]):
                i += 1
            if i >= end or ids[i] != layout.eoi:
                raise ParseError(f"position {i}: unterminated or invalid image segment")
            segments.append(("image", ids[start:i]))
            i += 1
        else:
            raise ParseError(f"position {i}: unexpected id {t}")
    return segments


# ---------------------------------------------------------------------------
# Packing: several samples share one fixed-length row; attention blocks keep
# them causally isolated and PAD fills the remainder.


@dataclass(frozen=True)
class PackedSample:
    row: int
    start: int
    end: int  # exclusive
    kind: str


@dataclass
class PackedBatch:
    ids: np.ndarray  # (rows, row_len) int64, PAD-filled
    block: np.ndarray  # (rows, row_len) int32; 0 marks PAD, samples count from 1
    pos: np.ndarray  # (rows, row_len) int32, offset within the owning sample
    samples: list[PackedSample]
    row_len: int
    pad_id: int

    @property
    def n_rows(self) -> int:
        return self.ids.shape[0]


def pack(seqs, row_len: int, layout: VocabLayout) -> PackedBatch:
    """First-fit-decreasing packing into rows of row_len tokens.

    Deterministic: sort by length descending (stable), place each sample into
    the first row with room, then PAD. Sample boundaries always start at the
    sample's [SOS].
    """
    seqs = list(seqs)
    if not seqs:
        raise ValueError("nothing to pack")
    for s in seqs:
        if len(s.ids) > row_len:
            raise ValueError(f"sample of {len(s.ids)} ids exceeds row length {row_len}")
    order = sorted(range(len(seqs)), key=lambda i: -len(seqs[i].ids))
    rows: list[list[int]] = []
    used: list[int] = []
    placement: list[tuple[int, int, int]] = [None] * len(seqs)  # type: ignore
    for i in order:
        length = len(seqs[i].ids)
        target = None
        for r in range(len(rows)):
            if used[r] + length <= row_len:
                target = r
                break
        if target is None:
            rows.append([])
            used.append(0)
            target = len(rows) - 1
        placement[i] = (target, used[target], used[target] + length)
        rows[target].append(i)
        used[target] += length

    n_rows = len(rows)
    ids = np.full((n_rows, row_len), layout.pad, dtype=np.int64)
    block = np.zeros((n_rows, row_len), dtype=np.int32)
    pos = np.zeros((n_rows, row_len), dtype=np.int32)
    samples = []
    for r, members in enumerate(rows):
        for slot, i in enumerate(members, start=1):
            _, start, end = placement[i]
            seq = seqs[i]
            ids[r, start:end] = seq.ids
            block[r, start:end] = slot
            pos[r, start:end] = np.arange(end - start)
            samples.append(PackedSample(r, start, end, seq.kind))
    return PackedBatch(ids, block, pos, samples, row_len, layout.pad)


def attention_blocks(batch: PackedBatch) -> np.ndarray:
    """Per-row block map: 0 where PAD, a distinct positive id per sample."""
    return batch.block


def shifted_targets(batch: PackedBatch) -> tuple[np.ndarray, np.ndarray]:
    """Next-token targets and per-position sample kinds.

    targets[r, i] = ids[r, i+1] when both positions belong to the same sample,
    else -1 (excluded from the loss). kinds[r, i] indexes KINDS for counted
    positions, -1 elsewhere.
    """
    ids, block = batch.ids, batch.block
    targets = np.full_like(ids, -1)
    same = (block[:, 1:] == block[:, :-1]) & (block[:, :-1] != 0)
    targets[:, :-1][same] = ids[:, 1:][same]
    kinds = np.full(ids.shape, -1, dtype=np.int8)
    for s in batch.samples:
        kinds[s.row, s.start : s.end] = KINDS.index(s.kind)
    kinds[targets < 0] = -1
    return targets, kinds


_PACK_MAGIC = b"UPKB"


def save_packed(batch: PackedBatch, path) -> None:
    """Binary layout: magic, rows, row_len, pad id (u32 LE), int32 LE ids,
    sample count, then (row, start, end, kind) per sample."""
    with open(path, "wb") as f:
        f.write(_PACK_MAGIC)
        f.write(struct.pack("<III", batch.n_rows, batch.row_len, batch.pad_id))
        f.write(batch.ids.astype("<i4").tobytes())
        f.write(struct.pack("<I", len(batch.samples)))
        for s in batch.samples:
            f.write(struct.pack("<IIIB", s.row, s.start, s.end, KINDS.index(s.kind)))


def load_packed(path) -> PackedBatch:
    with open(path, "rb") as f:
        if f.read(4) != _PACK_MAGIC:
            raise ValueError(f"{path}: not a packed-batch file")
        n_rows, row_len, pad_id = struct.unpack("<III", f.read(12))
        ids = (
            np.frombuffer(f.read(4 * n_rows * row_len), dtype="<i4")
            .reshape(n_rows, row_len)
            .astype(np.int64)
        )
        (n_samples,) = struct.unpack("<I", f.read(4))
        samples = []
        for _ in range(n_samples):
            row, start, end, kind_code = struct.unpack("<IIIB", f.read(13))
            samples.append(PackedSample(row, start, end, KINDS[kind_code]))
    block = np.zeros((n_rows, row_len), dtype=np.int32)
    pos = np.zeros((n_rows, row_len), dtype=np.int32)
    slots = [0] * n_rows
    for s in sorted(samples, key=lambda s: (s.row, s.start)):
        slots[s.row] += 1
        block[s.row, s.start : s.end] = slots[s.row]
        pos[s.row, s.start : s.end] = np.arange(s.end - s.start)
    return PackedBatch(ids, block, pos, samples, row_len, pad_id)
