"""Synthetic paired-modality toy world.

Scenes hold one or two colored shapes on a small grid. Images render each
grid cell as a fixed prototype patch plus seeded per-pixel jitter, so patch
quantization has nontrivial work but nearest-prototype classification stays
exact. Captions come from a small grammar whose sentences are true statements
about the scene, every caption parses back to a unique predicate, and
check() decides caption-vs-image satisfaction exactly (per-axis verdicts for
object, color, count, position). A second, word-disjoint grammar supplies the
text-only stream so pure language skill is measurable separately.
"""

from __future__ import annotations

import base64
import json
from collections import Counter
from dataclasses import dataclass

import numpy as np

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
RELATIONS = ("left of", "right of", "above", "below")

DEFAULT_GRID = 4
DEFAULT_PATCH = 4
JITTER = 8

_COLOR_RGB = {
    "red": (200, 40, 40),
    "green": (40, 190, 40),
    "blue": (40, 60, 210),
    "yellow": (230, 220, 50),
}
_BACKGROUND_RGB = (160, 160, 160)

# RNG stream salts, one per independent randomness source.
_SCENE_SALT = 0x5C31
_CAPTION_SALT = 0xCA97
_TEXT_SALT = 0x7E87
_JITTER_SALT = 0x117E


@dataclass(frozen=True, order=True)
class SceneObject:
    shape: str
    color: str
    cell: int  # row-major grid index


@dataclass(frozen=True)
class Scene:
    """One or two objects at distinct cells; objects kept sorted by cell."""

    objects: tuple[SceneObject, ...]
    grid_size: int = DEFAULT_GRID

    def __post_init__(self):
        objs = tuple(sorted(self.objects, key=lambda o: o.cell))
        object.__setattr__(self, "objects", objs)
        if not 1 <= len(objs) <= 2:
            raise ValueError(f"scene must hold 1 or 2 objects, got {len(objs)}")
        cells = [o.cell for o in objs]
        if len(set(cells)) != len(cells):
            raise ValueError(f"objects overlap at cell {cells[0]}")
        n = self.grid_size * self.grid_size
        for o in objs:
            if not 0 <= o.cell < n:
                raise ValueError(f"cell {o.cell} outside grid of {n} cells")
            if o.shape not in SHAPES:
                raise ValueError(f"unknown shape {o.shape!r}")
            if o.color not in COLORS:
                raise ValueError(f"unknown color {o.color!r}")

    def to_dict(self) -> dict:
        return {
            "grid_size": self.grid_size,
            "objects": [
                {"shape": o.shape, "color": o.color, "cell": o.cell}
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            tuple(SceneObject(o["shape"], o["color"], o["cell"]) for o in d["objects"]),
            d["grid_size"],
        )


# ---------------------------------------------------------------------------
# Scene space enumeration. Types are (shape, color) pairs indexed
# shape_index * len(COLORS) + color_index; scenes are canonical (objects
# sorted by cell), so the space is finite and exactly countable:
# one-object scenes: 12 * cells, two-object scenes: C(cells, 2) * 12^2.

_N_TYPES = len(SHAPES) * len(COLORS)


def _type_index(shape: str, color: str) -> int:
    return SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


def _type_at(index: int) -> tuple[str, str]:
    return SHAPES[index // len(COLORS)], COLORS[index % len(COLORS)]


def _cell_pairs(grid_size: int) -> list[tuple[int, int]]:
    n = grid_size * grid_size
    return [(a, b) for a in range(n) for b in range(a + 1, n)]


def scene_count(grid_size: int = DEFAULT_GRID) -> int:
    n = grid_size * grid_size
    return _N_TYPES * n + (n * (n - 1) // 2) * _N_TYPES * _N_TYPES


def scene_from_index(index: int, grid_size: int = DEFAULT_GRID) -> Scene:
    """Bijection from [0, scene_count) onto canonical scenes."""
    n = grid_size * grid_size
    singles = _N_TYPES * n
    if not 0 <= index < scene_count(grid_size):
        raise ValueError(f"scene index {index} out of range")
    if index < singles:
        t, cell = divmod(index, n)
        shape, color = _type_at(t)
        return Scene((SceneObject(shape, color, cell),), grid_size)
    rest = index - singles
    pair_idx, types = divmod(rest, _N_TYPES * _N_TYPES)
    ta, tb = divmod(types, _N_TYPES)
    ca, cb = _cell_pairs(grid_size)[pair_idx]
    sa, cla = _type_at(ta)
    sb, clb = _type_at(tb)
    return Scene((SceneObject(sa, cla, ca), SceneObject(sb, clb, cb)), grid_size)


def scene_to_index(scene: Scene) -> int:
    n = scene.grid_size * scene.grid_size
    if len(scene.objects) == 1:
        o = scene.objects[0]
        return _type_index(o.shape, o.color) * n + o.cell
    a, b = scene.objects  # sorted by cell
    pair_idx = _cell_pairs(scene.grid_size).index((a.cell, b.cell))
    types = _type_index(a.shape, a.color) * _N_TYPES + _type_index(b.shape, b.color)
    return _N_TYPES * n + pair_idx * _N_TYPES * _N_TYPES + types


def gen_scene(seed: int, grid_size: int = DEFAULT_GRID) -> Scene:
    """Deterministic per seed, uniform over the legal scene space."""
    rng = np.random.default_rng(np.random.SeedSequence([_SCENE_SALT, seed]))
    return scene_from_index(int(rng.integers(scene_count(grid_size))), grid_size)


# ---------------------------------------------------------------------------
# Rendering: fixed prototype patch per (shape, color) plus seeded jitter.

_prototype_cache: dict = {}


def _shape_mask(shape: str, patch_size: int) -> np.ndarray:
    p = patch_size
    rr, cc = np.mgrid[0:p, 0:p]
    if shape == "square":
        return np.ones((p, p), dtype=bool)
    if shape == "circle":
        c = (p - 1) / 2.0
        return (rr - c) ** 2 + (cc - c) ** 2 <= (p / 2.0) ** 2
    if shape == "triangle":
        return cc <= rr  # lower-left triangle
    raise ValueError(f"unknown shape {shape!r}")


def prototype_patch(kind, patch_size: int = DEFAULT_PATCH) -> np.ndarray:
    """Prototype pixels for `kind`: either "background" or a (shape, color) pair."""
    key = (kind, patch_size)
    if key not in _prototype_cache:
        patch = np.tile(
            np.array(_BACKGROUND_RGB, dtype=np.uint8), (patch_size, patch_size, 1)
        )
        if kind != "background":
            shape, color = kind
            patch[_shape_mask(shape, patch_size)] = _COLOR_RGB[color]
        patch.setflags(write=False)
        _prototype_cache[key] = patch
    return _prototype_cache[key]


def render(scene: Scene, patch_size: int = DEFAULT_PATCH) -> np.ndarray:
    """Render a scene to an (H, W, 3) uint8 image, H = W = grid_size * patch_size.

    The jitter seed is a pure function of the scene, so rendering is
    deterministic: the same scene always yields identical pixels.
    """
    g, p = scene.grid_size, patch_size
    img = np.tile(prototype_patch("background", p), (g, g, 1)).copy()
    for o in scene.objects:
        r, c = divmod(o.cell, g)
        img[r * p : (r + 1) * p, c * p : (c + 1) * p] = prototype_patch(
            (o.shape, o.color), p
        )
    rng = np.random.default_rng(
        np.random.SeedSequence([_JITTER_SALT, scene_to_index(scene), patch_size])
    )
    jitter = rng.integers(-JITTER, JITTER + 1, size=img.shape)
    return np.clip(img.astype(np.int16) + jitter, 0, 255).astype(np.uint8)


def _prototype_table(patch_size: int) -> tuple[list, np.ndarray]:
    kinds = ["background"] + [(s, c) for s in SHAPES for c in COLORS]
    flat = np.stack(
        [prototype_patch(k, patch_size).reshape(-1).astype(np.float64) for k in kinds]
    )
    return kinds, flat


def detect_objects(image: np.ndarray, patch_size: int = DEFAULT_PATCH) -> list[SceneObject]:
    """Classify every cell by nearest prototype; return non-background objects.

    Squared-distance ties break toward the earlier prototype (background
    first, then (shape, color) in declaration order); with the default
    palette and jitter bound the margins make classification exact.
    """
    h, w, _ = image.shape
    if h != w or h % patch_size:
        raise ValueError(f"image shape {image.shape} not a {patch_size}-patch grid")
    g = h // patch_size
    kinds, protos = _prototype_table(patch_size)
    cells = extract_cells(image, patch_size).astype(np.float64)
    d2 = ((cells[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    best = d2.argmin(axis=1)  # argmin takes the lowest index on ties
    out = []
    for cell in range(g * g):
        kind = kinds[best[cell]]
        if kind != "background":
            out.append(SceneObject(kind[0], kind[1], cell))
    return out


def extract_cells(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Row-major (grid_size^2, patch_size^2 * 3) view of an image's patches."""
    h, w, ch = image.shape
    g = h // patch_size
    return (
        image.reshape(g, patch_size, g, patch_size, ch)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * g, patch_size * patch_size * ch)
    )


# ---------------------------------------------------------------------------
# Caption grammar.
#
#   caption  := NP | NP rel NP | NP "and" NP | "two" color plural
#   NP       := ("a" | "one") color shape
#   rel      := "left of" | "right of" | "above" | "below"
#
# Relations compare columns (left/right) or rows (above/below) of the two
# cells, irrespective of the other axis. Generated captions are always true
# of their scene; the phrasing among all true options is picked by seed.

_PLURALS = {s + "s": s for s in SHAPES}


def _cell_relations(cell_a: int, cell_b: int, grid_size: int) -> list[str]:
    ra, ca = divmod(cell_a, grid_size)
    rb, cb = divmod(cell_b, grid_size)
    rels = []
    if ca < cb:
        rels.append("left of")
    if ca > cb:
        rels.append("right of")
    if ra < rb:
        rels.append("above")
    if ra > rb:
        rels.append("below")
    return rels


def caption_phrasings(scene: Scene) -> list[str]:
    """Every true caption for the scene, in a fixed deterministic order."""
    objs = scene.objects
    if len(objs) == 1:
        o = objs[0]
        return [f"a {o.color} {o.shape}", f"one {o.color} {o.shape}"]
    a, b = objs
    out = []
    if (a.shape, a.color) == (b.shape, b.color):
        out.append(f"two {a.color} {a.shape}s")
    else:
        out.append(f"a {a.color} {a.shape} and a {b.color} {b.shape}")
        out.append(f"a {b.color} {b.shape} and a {a.color} {a.shape}")
    for first, second in ((a, b), (b, a)):
        for rel in _cell_relations(first.cell, second.cell, scene.grid_size):
            out.append(
                f"a {first.color} {first.shape} {rel} a {second.color} {second.shape}"
            )
    return out


def caption(scene: Scene, seed: int) -> str:
    """Uniform pick among the scene's true phrasings, deterministic per seed."""
    options = caption_phrasings(scene)
    rng = np.random.default_rng(np.random.SeedSequence([_CAPTION_SALT, seed]))
    return options[int(rng.integers(len(options)))]


class CaptionParseError(ValueError):
    pass


@dataclass(frozen=True)
class Predicate:
    """Parsed caption meaning.

    form "single": exactly one object, of items[0]'s color and shape.
    form "two":    exactly two objects, both items[0].
    form "and":    exactly two objects matching items as a multiset.
    form "rel":    exactly two objects, assignable to items so that rel holds
                   from the first to the second.
    """

    form: str
    items: tuple[tuple[str, str], ...]  # (color, shape)
    rel: str | None = None


def parse_caption(text: str) -> Predicate:
    words = text.split()

    def fail(msg):
        raise CaptionParseError(f"{msg} in caption {text!r}")

    def take_np(i):
        if i >= len(words):
            fail("expected noun phrase")
        if words[i] not in ("a", "one"):
            fail(f"expected 'a' or 'one', got {words[i]!r}")
        if i + 2 >= len(words):
            fail("truncated noun phrase")
        color, shape = words[i + 1], words[i + 2]
        if color not in COLORS:
            fail(f"unknown color {color!r}")
        if shape not in SHAPES:
            fail(f"unknown shape {shape!r}")
        return (color, shape), i + 3

    if not words:
        fail("empty caption")
    if words[0] == "two":
        if len(words) != 3:
            fail("count form must be exactly 'two <color> <shape>s'")
        color, plural = words[1], words[2]
        if color not in COLORS:
            fail(f"unknown color {color!r}")
        if plural not in _PLURALS:
            fail(f"unknown plural shape {plural!r}")
        return Predicate("two", ((color, _PLURALS[plural]),))
    first, i = take_np(0)
    if i == len(words):
        return Predicate("single", (first,))
    if words[i] == "and":
        second, j = take_np(i + 1)
        if j != len(words):
            fail("trailing words")
        return Predicate("and", (first, second))
    if words[i] == "left" or words[i] == "right":
        if i + 1 >= len(words) or words[i + 1] != "of":
            fail(f"expected 'of' after {words[i]!r}")
        rel, i = f"{words[i]} of", i + 2
    elif words[i] in ("above", "below"):
        rel, i = words[i], i + 1
    else:
        fail(f"unexpected word {words[i]!r}")
    second, j = take_np(i)
    if j != len(words):
        fail("trailing words")
    return Predicate("rel", (first, second), rel)


def _rel_holds(cell_a: int, cell_b: int, rel: str, grid_size: int) -> bool:
    return rel in _cell_relations(cell_a, cell_b, grid_size)


def predicate_holds(pred: Predicate, objects, grid_size: int) -> bool:
    """Exact truth of a parsed caption against a list of SceneObjects."""
    types = [(o.color, o.shape) for o in objects]
    if pred.form == "single":
        return len(objects) == 1 and types[0] == pred.items[0]
    if pred.form == "two":
        return len(objects) == 2 and types[0] == types[1] == pred.items[0]
    if pred.form == "and":
        return len(objects) == 2 and Counter(types) == Counter(pred.items)
    if pred.form == "rel":
        if len(objects) != 2:
            return False
        want_a, want_b = pred.items
        for x, y in ((0, 1), (1, 0)):
            if (
                types[x] == want_a
                and types[y] == want_b
                and _rel_holds(objects[x].cell, objects[y].cell, pred.rel, grid_size)
            ):
                return True
        return False
    raise ValueError(f"unknown predicate form {pred.form!r}")


@dataclass(frozen=True)
class CheckResult:
    ok: bool
    object_ok: bool
    color_ok: bool
    count_ok: bool
    position_ok: bool
    objects: tuple[SceneObject, ...]

    AXES = ("object", "color", "count", "position")

    def axes(self) -> dict[str, bool]:
        return {
            "object": self.object_ok,
            "color": self.color_ok,
            "count": self.count_ok,
            "position": self.position_ok,
        }


def check(caption_text: str, image: np.ndarray, patch_size: int = DEFAULT_PATCH) -> CheckResult:
    """Does the image satisfy the caption? Exact, with per-axis verdicts.

    Raises CaptionParseError on malformed captions; scorers treat that as a
    failed sample.
    """
    pred = parse_caption(caption_text)
    h = image.shape[0]
    grid_size = h // patch_size
    objects = detect_objects(image, patch_size)

    mention_shapes = Counter(s for _, s in pred.items)
    scene_shapes = Counter(o.shape for o in objects)
    if pred.form == "two":
        mention_shapes = Counter({pred.items[0][1]: 2})
    object_ok = all(scene_shapes[s] >= n for s, n in mention_shapes.items())

    items = pred.items if pred.form != "two" else (pred.items[0], pred.items[0])
    color_ok = _injective_match(items, [(o.color, o.shape) for o in objects])

    implied = 1 if pred.form == "single" else 2
    count_ok = len(objects) == implied

    if pred.form == "rel":
        position_ok = predicate_holds(pred, objects, grid_size)
    else:
        position_ok = True

    ok = predicate_holds(pred, objects, grid_size)
    return CheckResult(ok, object_ok, color_ok, count_ok, position_ok, tuple(objects))


def _injective_match(items, pool) -> bool:
    """Can every (color, shape) item claim a distinct matching pool entry?"""
    if not items:
        return True
    first, rest = items[0], items[1:]
    for i, cand in enumerate(pool):
        if cand == first and _injective_match(rest, pool[:i] + pool[i + 1 :]):
            return True
    return False


# ---------------------------------------------------------------------------
# Analytic base rate: the probability that a random caption (drawn the same
# way training captions are: uniform scene, uniform true phrasing) is
# satisfied by an independently drawn uniform scene. Exact by enumeration.

_base_rate_cache: dict = {}


def _scene_arrays(grid_size: int):
    n = grid_size * grid_size
    singles_t = np.repeat(np.arange(_N_TYPES), n)
    singles_c = np.tile(np.arange(n), _N_TYPES)
    pairs = np.array(_cell_pairs(grid_size), dtype=np.int64)
    npair = len(pairs)
    grid = np.arange(_N_TYPES * _N_TYPES)
    pa = np.repeat(pairs[:, 0], _N_TYPES * _N_TYPES)
    pb = np.repeat(pairs[:, 1], _N_TYPES * _N_TYPES)
    ta = np.tile(grid // _N_TYPES, npair)
    tb = np.tile(grid % _N_TYPES, npair)
    return {
        "nobj": np.concatenate([np.ones(len(singles_t), np.int64), np.full(len(pa), 2)]),
        "ta": np.concatenate([singles_t, ta]),
        "ca": np.concatenate([singles_c, pa]),
        "tb": np.concatenate([np.full(len(singles_t), -1), tb]),
        "cb": np.concatenate([np.full(len(singles_t), -1), pb]),
    }


def _rel_vec(ca, cb, rel, grid_size):
    ra, cola = ca // grid_size, ca % grid_size
    rb, colb = cb // grid_size, cb % grid_size
    if rel == "left of":
        return cola < colb
    if rel == "right of":
        return cola > colb
    if rel == "above":
        return ra < rb
    return ra > rb


def _satisfying_count(pred: Predicate, arrs, grid_size: int) -> int:
    one = arrs["nobj"] == 1
    two = ~one
    items = [
        _type_index(shape, color) for color, shape in pred.items
    ]
    if pred.form == "single":
        return int((one & (arrs["ta"] == items[0])).sum())
    if pred.form == "two":
        t = items[0]
        return int((two & (arrs["ta"] == t) & (arrs["tb"] == t)).sum())
    if pred.form == "and":
        t0, t1 = items
        hit = ((arrs["ta"] == t0) & (arrs["tb"] == t1)) | (
            (arrs["ta"] == t1) & (arrs["tb"] == t0)
        )
        return int((two & hit).sum())
    t0, t1 = items
    fwd = (
        (arrs["ta"] == t0)
        & (arrs["tb"] == t1)
        & _rel_vec(arrs["ca"], arrs["cb"], pred.rel, grid_size)
    )
    rev = (
        (arrs["ta"] == t1)
        & (arrs["tb"] == t0)
        & _rel_vec(arrs["cb"], arrs["ca"], pred.rel, grid_size)
    )
    return int((two & (fwd | rev)).sum())


def exact_base_rate(grid_size: int = DEFAULT_GRID) -> float:
    """P(random caption satisfied by an independent random scene), exact."""
    if grid_size in _base_rate_cache:
        return _base_rate_cache[grid_size]
    total = scene_count(grid_size)
    arrs = _scene_arrays(grid_size)
    weights: Counter = Counter()
    parsed: dict[str, Predicate] = {}
    for idx in range(total):
        phr = caption_phrasings(scene_from_index(idx, grid_size))
        w = 1.0 / (total * len(phr))
        for p in phr:
            if p not in parsed:
                parsed[p] = parse_caption(p)
            weights[parsed[p]] += w
    rate = sum(
        w * _satisfying_count(pred, arrs, grid_size) / total
        for pred, w in weights.items()
    )
    _base_rate_cache[grid_size] = float(rate)
    return _base_rate_cache[grid_size]


# ---------------------------------------------------------------------------
# Text-only grammar, word-disjoint from the caption grammar.

_NOUNS = ("cat", "dog", "bird", "fox", "owl", "frog")
_VERBS = ("runs", "sleeps", "jumps", "sings", "waits", "hides")
_ADVERBS = ("quickly", "slowly", "quietly", "happily")
_ADJECTIVES = ("small", "big", "old", "young")

_TEMPLATES = (
    ("the", _NOUNS, _VERBS),
    ("the", _NOUNS, _VERBS, _ADVERBS),
    ("the", _ADJECTIVES, _NOUNS, _VERBS),
    ("every", _NOUNS, _VERBS, _ADVERBS),
)


def gen_sentence(rng: np.random.Generator) -> str:
    slots = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
    words = [
        slot if isinstance(slot, str) else slot[int(rng.integers(len(slot)))]
        for slot in slots
    ]
    return " ".join(words)


def gen_text_corpus(seed: int, n: int) -> list[str]:
    rng = np.random.default_rng(np.random.SeedSequence([_TEXT_SALT, seed]))
    return [gen_sentence(rng) for _ in range(n)]


def is_text_sentence(sentence: str) -> bool:
    words = sentence.split()
    for slots in _TEMPLATES:
        if len(slots) != len(words):
            continue
        if all(
            w == slot if isinstance(slot, str) else w in slot
            for w, slot in zip(words, slots)
        ):
            return True
    return False


def text_unigram_distribution() -> dict[str, float]:
    """Exact word distribution of the generator (per emitted word token)."""
    expected: Counter = Counter()
    for slots in _TEMPLATES:
        for slot in slots:
            if isinstance(slot, str):
                expected[slot] += 1.0 / len(_TEMPLATES)
            else:
                for w in slot:
                    expected[w] += 1.0 / (len(_TEMPLATES) * len(slot))
    mean_len = sum(len(s) for s in _TEMPLATES) / len(_TEMPLATES)
    return {w: e / mean_len for w, e in expected.items()}


def text_unigram_entropy() -> float:
    """Entropy (nats) of the exact unigram word distribution."""
    probs = np.array(list(text_unigram_distribution().values()))
    return float(-(probs * np.log(probs)).sum())


def caption_words() -> frozenset[str]:
    words = set()
    for s in SHAPES:
        words.update((s, s + "s"))
    words.update(COLORS)
    words.update({"a", "one", "two", "and", "left", "right", "of", "above", "below"})
    return frozenset(words)


def text_words() -> frozenset[str]:
    words = {"the", "every"}
    for cls in (_NOUNS, _VERBS, _ADVERBS, _ADJECTIVES):
        words.update(cls)
    return frozenset(words)


# ---------------------------------------------------------------------------
# Export formats.


def image_to_b64(image: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(image).tobytes()).decode("ascii")


def image_from_b64(data: str) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"))
    side = round((len(raw) // 3) ** 0.5)
    if side * side * 3 != len(raw):
        raise ValueError(f"payload of {len(raw)} bytes is not a square RGB image")
    return np.frombuffer(raw, dtype=np.uint8).reshape(side, side, 3)


def pair_record(scene: Scene, caption_text: str, image: np.ndarray, seed: int) -> dict:
    return {
        "kind": "pair",
        "caption": caption_text,
        "scene": scene.to_dict(),
        "image": image_to_b64(image),
        "seed": seed,
    }


def text_record(sentence: str, seed: int) -> dict:
    return {"kind": "text", "caption": sentence, "scene": None, "image": None, "seed": seed}


def export_jsonl(records, path) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def write_ppm(image: np.ndarray, path) -> None:
    """Binary PPM (P6), for eyeballing generated images."""
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())
