"""Discrete tokenizers for both modalities.

Text uses byte-level BPE: 256 base byte tokens plus learned merges, so any
byte string round-trips exactly. Images use a k-means patch codebook: each
non-overlapping patch is flattened row-major and snapped to its nearest
centroid. Both trainers are deterministic given their seed, with pinned
tie-breaking (lexicographically smallest merge pair; lowest centroid index).
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import extract_cells

N_BYTES = 256


class TextTokenizer:
    """Byte-level BPE. Token i < 256 is the raw byte i; merge j is token 256+j."""

    def __init__(self, merges: list[tuple[int, int]]):
        self.merges = [(int(a), int(b)) for a, b in merges]
        self._token_bytes = [bytes([i]) for i in range(N_BYTES)]
        for i, (a, b) in enumerate(self.merges):
            top = N_BYTES + i
            if not (0 <= a < top and 0 <= b < top):
                raise ValueError(f"merge {i} references unknown token: ({a}, {b})")
            self._token_bytes.append(self._token_bytes[a] + self._token_bytes[b])
        self._rank = {pair: i for i, pair in enumerate(self.merges)}

    @property
    def vocab_size(self) -> int:
        return N_BYTES + len(self.merges)

    def token_bytes(self, token_id: int) -> bytes:
        return self._token_bytes[token_id]

    def encode(self, text: str | bytes) -> list[int]:
        """Greedy BPE: repeatedly apply the earliest-learned applicable merge."""
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        ids = list(data)
        while len(ids) > 1:
            best = None
            for pair in zip(ids, ids[1:]):
                rank = self._rank.get(pair)
                if rank is not None and (best is None or rank < best[0]):
                    best = (rank, pair)
            if best is None:
                break
            ids = _apply_merge(ids, best[1], N_BYTES + best[0])
        return ids

    def decode_bytes(self, ids) -> bytes:
        out = []
        for i, token_id in enumerate(ids):
            if not 0 <= token_id < self.vocab_size:
                raise ValueError(
                    f"id {token_id} at position {i} is not textual "
                    f"(vocab size {self.vocab_size})"
                )
            out.append(self._token_bytes[token_id])
        return b"".join(out)

    def decode(self, ids) -> str:
        # sampled ids need not form valid UTF-8; replacement keeps decoding
        # total while staying lossless on anything encode() produced
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def save(self, path) -> None:
        """Line-delimited merge pairs, in training order."""
        with open(path, "w") as f:
            for a, b in self.merges:
                f.write(f"{a} {b}\n")

    @classmethod
    def load(cls, path) -> "TextTokenizer":
        merges = []
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise ValueError(f"{path}:{lineno}: expected two ids, got {line!r}")
                merges.append((int(parts[0]), int(parts[1])))
        return cls(merges)


def _apply_merge(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out = []
    i = 0
    while i < len(ids):
        if i + 1 < len(ids) and (ids[i], ids[i + 1]) == pair:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


def train_bpe(corpus, target_merges: int) -> TextTokenizer:
    """Learn up to target_merges merges from an iterable of strings.

    Each round merges the most frequent adjacent pair across the corpus
    (pairs never span string boundaries); frequency ties go to the
    lexicographically smallest pair of token byte strings. Stops early when
    no adjacent pair remains.
    """
    if target_merges < 0:
        raise ValueError(f"target_merges must be >= 0, got {target_merges}")
    token_bytes = [bytes([i]) for i in range(N_BYTES)]
    # Collapse duplicate strings; counts weight the pair statistics.
    work = Counter(tuple(s.encode("utf-8")) for s in corpus)
    merges: list[tuple[int, int]] = []
    while len(merges) < target_merges:
        pair_counts: Counter = Counter()
        for seq, n in work.items():
            for pair in zip(seq, seq[1:]):
                pair_counts[pair] += n
        if not pair_counts:
            break
        top = max(pair_counts.values())
        best = min(
            (p for p, n in pair_counts.items() if n == top),
            key=lambda p: (token_bytes[p[0]], token_bytes[p[1]]),
        )
        new_id = N_BYTES + len(merges)
        token_bytes.append(token_bytes[best[0]] + token_bytes[best[1]])
        merges.append(best)
        new_work: Counter = Counter()
        for seq, n in work.items():
            new_work[tuple(_apply_merge(list(seq), best, new_id))] += n
        work = new_work
    return TextTokenizer(merges)


# ---------------------------------------------------------------------------
# Visual codebook.


@dataclass
class VisualCodebook:
    """K centroids over flattened patch vectors (row-major, RGB interleaved)."""

    centroids: np.ndarray  # (K, dim) float64
    fit_seed: int

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2:
            raise ValueError("centroids must be a (K, dim) matrix")

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def patch_size(self) -> int:
        p = round((self.dim / 3) ** 0.5)
        if 3 * p * p != self.dim:
            raise ValueError(f"dim {self.dim} is not 3 * p^2 for integer p")
        return p


def fit_codebook(patches: np.ndarray, k: int, seed: int) -> VisualCodebook:
    """Lloyd's k-means with k-means++ init.

    Deterministic per seed. At most 100 iterations, stopping earlier when the
    relative inertia improvement drops to 1e-6 or assignments stabilize.
    Empty clusters are reseeded to the point currently farthest from its
    centroid (lowest index on ties).
    """
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("patches must be a (n, dim) matrix")
    n = x.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < k:
        raise ValueError(f"need at least k={k} patches, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[int(rng.integers(n))]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centroids[j] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))

    prev_inertia = None
    prev_assign = None
    for _ in range(100):
        dist = _sq_distances(x, centroids)
        assign = dist.argmin(axis=1)
        point_d2 = dist[np.arange(n), assign]
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j] == 0:
                # Reseed to the farthest point whose cluster keeps >= 1 member;
                # stable sort puts the lowest index first on distance ties.
                for cand in np.argsort(-point_d2, kind="stable"):
                    if counts[assign[cand]] > 1:
                        counts[assign[cand]] -= 1
                        counts[j] = 1
                        assign[cand] = j
                        point_d2[cand] = 0.0
                        break
        inertia = float(point_d2.sum())
        for j in range(k):
            centroids[j] = x[assign == j].mean(axis=0)
        if prev_assign is not None and (assign == prev_assign).all():
            break
        if prev_inertia is not None and prev_inertia > 0:
            if (prev_inertia - inertia) <= 1e-6 * prev_inertia:
                break
        prev_inertia = inertia
        prev_assign = assign
    return VisualCodebook(centroids, seed)


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # Exact differences, chunked so n * K * dim stays in memory comfortably.
    n = x.shape[0]
    out = np.empty((n, centroids.shape[0]), dtype=np.float64)
    step = max(1, 2_000_000 // max(1, centroids.shape[0] * centroids.shape[1]) + 1)
    for i in range(0, n, step):
        diff = x[i : i + step, None, :] - centroids[None, :, :]
        out[i : i + step] = (diff * diff).sum(axis=2)
    return out


def quantize(codebook: VisualCodebook, image: np.ndarray) -> np.ndarray:
    """Snap each patch to its nearest centroid; (G, G) indices, row-major.

    Squared-distance ties resolve to the lowest centroid index.
    """
    p = codebook.patch_size
    h, w, _ = image.shape
    if h != w or h % p:
        raise ValueError(f"image shape {image.shape} incompatible with patch size {p}")
    cells = extract_cells(image, p).astype(np.float64)
    g = h // p
    return _sq_distances(cells, codebook.centroids).argmin(axis=1).reshape(g, g)


def dequantize(codebook: VisualCodebook, codes: np.ndarray) -> np.ndarray:
    """Tile centroid patches back into an image, clamped to [0, 255]."""
    codes = np.asarray(codes)
    if codes.ndim == 1:
        g = round(len(codes) ** 0.5)
        if g * g != len(codes):
            raise ValueError(f"{len(codes)} codes do not form a square grid")
        codes = codes.reshape(g, g)
    g = codes.shape[0]
    if codes.shape != (g, g):
        raise ValueError(f"codes must be square, got {codes.shape}")
    if codes.min() < 0 or codes.max() >= codebook.size:
        raise ValueError(f"code out of range [0, {codebook.size})")
    p = codebook.patch_size
    img = np.empty((g * p, g * p, 3), dtype=np.uint8)
    patches = np.clip(np.rint(codebook.centroids), 0, 255).astype(np.uint8)
    for r in range(g):
        for c in range(g):
            img[r * p : (r + 1) * p, c * p : (c + 1) * p] = patches[
                codes[r, c]
            ].reshape(p, p, 3)
    return img


_CODEBOOK_MAGIC = b"UVCB"


def save_codebook(codebook: VisualCodebook, path) -> None:
    """Binary layout: magic, K, dim (u32 LE), fit seed (u64 LE), f64 LE centroids."""
    with open(path, "wb") as f:
        f.write(_CODEBOOK_MAGIC)
        f.write(struct.pack("<IIQ", codebook.size, codebook.dim, codebook.fit_seed))
        f.write(codebook.centroids.astype("<f8").tobytes())


def load_codebook(path) -> VisualCodebook:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CODEBOOK_MAGIC:
            raise ValueError(f"{path}: not a codebook file")
        k, dim, seed = struct.unpack("<IIQ", f.read(16))
        data = np.frombuffer(f.read(8 * k * dim), dtype="<f8").reshape(k, dim)
    return VisualCodebook(data.copy(), seed)
