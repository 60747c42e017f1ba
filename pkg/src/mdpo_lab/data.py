"""Synthetic grid-world preference data and rejected-image construction.

A scene is a G×G grid holding 1-5 objects (type 1..K, colour 1..C). Each
record asks one templated question about one object type:

    presence   [BOS, ASK_EXIST, QMARK, OBJ_k] -> [YES|NO, EOS]
    count      [BOS, ASK_COUNT, QMARK, OBJ_k] -> [NUM_n, EOS]
    colour     [BOS, ASK_COLOR, QMARK, OBJ_k] -> [COLOR_c, EOS]

The object token comes last so the position that predicts the answer holds it.

The chosen response is true for the scene and the rejected one is a
well-formed false answer. Answers are drawn first and the scene is built to
match, with the rejected answer drawn uniformly from the remaining options, so
chosen and rejected answers have the same marginal distribution and text alone
cannot tell them apart. Confounded records insert a MARK token before the
chosen response's EOS only: a language-only shortcut.

Scenes are canonical; pixels are rendered from them at ``scale`` pixels per
cell and average-pooled back to one vector per cell for the model.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .model import SequenceBatch
from .rng import SeededRng

N_OBJECT_TYPES = 3
N_COLORS = 3
MAX_COUNT = 3
MAX_OBJECTS = 5
GRID = 8
SCALE = 4
CHANNELS = 3

PAD, EOS, BOS, QMARK = 0, 1, 2, 3
ASK_EXIST, ASK_COUNT, ASK_COLOR = 4, 5, 6
YES, NO, MARK = 7, 8, 9
NUM0 = 10                               # NUM_n = NUM0 + n, n in 0..5
OBJ0 = 16                               # OBJ_k = OBJ0 + k - 1
COLOR0 = OBJ0 + N_OBJECT_TYPES          # COLOR_c = COLOR0 + c - 1
VOCAB_USED = COLOR0 + N_COLORS
QUESTION_LEN = 4
Q_ASK, Q_OBJ = 1, 3   # positions in [BOS, ASK_x, QMARK, OBJ_k]
RESPONSE_LEN = 3

QTYPES = ("presence", "count", "color")
_ASK = {"presence": ASK_EXIST, "count": ASK_COUNT, "color": ASK_COLOR}
_ASK_INV = {v: k for k, v in _ASK.items()}

# records 0..n-1 of a split use streams offset+i; eval records never collide with train
TRAIN_OFFSET = 0
EVAL_OFFSET = 1 << 40
WARMSTART_OFFSET = 1 << 41


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- scenes

@dataclass(frozen=True)
class SyntheticScene:
    grid: int
    objects: tuple  # sorted ((row, col, obj_type, color), ...)

    def __post_init__(self):
        if not 1 <= len(self.objects) <= MAX_OBJECTS:
            raise DataError(f"scene must hold 1..{MAX_OBJECTS} objects, got {len(self.objects)}")
        if len({(r, c) for r, c, _, _ in self.objects}) != len(self.objects):
            raise DataError("object positions must be distinct")

    def count(self, obj_type: int) -> int:
        return sum(1 for o in self.objects if o[2] == obj_type)

    def colors_of(self, obj_type: int) -> list[int]:
        return [o[3] for o in self.objects if o[2] == obj_type]

    def to_json(self) -> dict:
        return {"grid": self.grid, "objects": [list(o) for o in self.objects]}

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticScene":
        return cls(int(d["grid"]), tuple(sorted(tuple(int(v) for v in o) for o in d["objects"])))


def render(scene: SyntheticScene, scale: int = SCALE) -> np.ndarray:
    """(G*scale)×(G*scale)×3 image; an object of type k and colour c sets channel k-1 to c/C."""
    g = scene.grid
    cells = np.zeros((g, g, CHANNELS))
    for r, c, k, col in scene.objects:
        cells[r, c, k - 1] = col / N_COLORS
    return np.repeat(np.repeat(cells, scale, axis=0), scale, axis=1)


def pool_to_grid(image: np.ndarray, grid: int) -> np.ndarray:
    """Average-pool a square image down to grid×grid cells (one patch per cell)."""
    h = image.shape[0]
    if h % grid:
        raise DataError(f"image side {h} is not a multiple of grid {grid}")
    s = h // grid
    return image.reshape(grid, s, grid, s, image.shape[-1]).mean(axis=(1, 3))


# ---------------------------------------------------------------- records

@dataclass
class PreferenceRecord:
    scene: SyntheticScene
    question_tokens: list
    chosen_tokens: list
    rejected_tokens: list
    confounded: bool
    seed: int
    index: int
    scale: int = SCALE
    override: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def qtype(self) -> str:
        return _ASK_INV[self.question_tokens[Q_ASK]]

    @property
    def obj_type(self) -> int:
        return self.question_tokens[Q_OBJ] - OBJ0 + 1

    @cached_property
    def image(self) -> np.ndarray:
        return render(self.scene, self.scale)

    def model_image(self, cfg=None) -> np.ndarray:
        """The G×G×C array the model sees (``override`` wins when set)."""
        if self.override is not None:
            return self.override
        return pool_to_grid(self.image, self.scene.grid if cfg is None else cfg.image_grid)

    def with_image(self, model_image) -> "PreferenceRecord":
        return PreferenceRecord(self.scene, self.question_tokens, self.chosen_tokens, self.rejected_tokens,
                                self.confounded, self.seed, self.index, self.scale,
                                np.asarray(model_image, dtype=np.float64))

    def to_json(self) -> dict:
        return {
            "scene": self.scene.to_json(),
            "question_tokens": list(self.question_tokens),
            "chosen_tokens": list(self.chosen_tokens),
            "rejected_tokens": list(self.rejected_tokens),
            "confounded": self.confounded,
            "seed": self.seed,
            "index": self.index,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PreferenceRecord":
        return cls(
            scene=SyntheticScene.from_json(d["scene"]),
            question_tokens=[int(t) for t in d["question_tokens"]],
            chosen_tokens=[int(t) for t in d["chosen_tokens"]],
            rejected_tokens=[int(t) for t in d["rejected_tokens"]],
            confounded=bool(d["confounded"]),
            seed=int(d["seed"]),
            index=int(d["index"]),
        )


def answer_token(response) -> int | None:
    """The answer token of a response (its first token), or None if empty."""
    return int(response[0]) if len(response) else None


def true_answer(scene: SyntheticScene, qtype: str, obj_type: int) -> int | None:
    """Token of the correct answer, or None for a colour question with no unique object."""
    n = scene.count(obj_type)
    if qtype == "presence":
        return YES if n > 0 else NO
    if qtype == "count":
        return NUM0 + n
    cols = scene.colors_of(obj_type)
    return COLOR0 + cols[0] - 1 if len(cols) == 1 else None


def is_true_statement(scene: SyntheticScene, question, response) -> bool:
    qtype = _ASK_INV.get(question[Q_ASK])
    if qtype is None:
        return False
    ans = answer_token(response)
    return ans is not None and ans == true_answer(scene, qtype, question[Q_OBJ] - OBJ0 + 1)


def _answer_space(qtype: str) -> list[int]:
    if qtype == "presence":
        return [YES, NO]
    if qtype == "count":
        return [NUM0 + n for n in range(MAX_COUNT + 1)]
    return [COLOR0 + c for c in range(N_COLORS)]


def _build_scene(rng: SeededRng, grid: int, obj_type: int, qtype: str, answer: int) -> SyntheticScene:
    if qtype == "presence":
        n_target = int(rng.integers(1, 3)) if answer == YES else 0
    elif qtype == "count":
        n_target = answer - NUM0
    else:
        n_target = 1
    n_total = int(rng.integers(max(1, n_target), MAX_OBJECTS + 1))
    cells = rng.choice(grid * grid, size=n_total, replace=False)
    others = [k for k in range(1, N_OBJECT_TYPES + 1) if k != obj_type]
    objects = []
    for j, cell in enumerate(cells):
        r, c = divmod(int(cell), grid)
        if j < n_target:
            k = obj_type
            col = answer - COLOR0 + 1 if qtype == "color" else int(rng.integers(1, N_COLORS + 1))
        else:
            k = int(others[int(rng.integers(len(others)))])
            col = int(rng.integers(1, N_COLORS + 1))
        objects.append((r, c, k, col))
    return SyntheticScene(grid, tuple(sorted(objects)))


def make_record(seed: int, index: int, confounded: bool, grid: int = GRID,
                stream_offset: int = TRAIN_OFFSET) -> PreferenceRecord:
    """Record ``index`` drawn only from stream ``stream_offset + index`` of ``seed``."""
    rng = SeededRng(seed, stream_offset + index)
    qtype = QTYPES[index % len(QTYPES)]
    obj_type = int(rng.integers(1, N_OBJECT_TYPES + 1))
    space = _answer_space(qtype)
    answer = space[int(rng.integers(len(space)))]
    wrong = [a for a in space if a != answer]
    rejected = wrong[int(rng.integers(len(wrong)))]
    scene = _build_scene(rng, grid, obj_type, qtype, answer)
    chosen = [answer] + ([MARK] if confounded else []) + [EOS]
    return PreferenceRecord(
        scene=scene,
        question_tokens=[BOS, _ASK[qtype], QMARK, OBJ0 + obj_type - 1],
        chosen_tokens=chosen,
        rejected_tokens=[rejected, EOS],
        confounded=confounded,
        seed=seed,
        index=index,
    )


def generate_dataset(seed: int, n: int, confound_rate: float = 0.7, grid: int = GRID,
                     stream_offset: int = TRAIN_OFFSET) -> list[PreferenceRecord]:
    """``n`` records, exactly ``round(confound_rate * n)`` of them confounded.

    A pure function of its arguments; record i depends only on stream i (plus
    the confound assignment), so it can be generated in any order.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    if not 0.0 <= confound_rate <= 1.0:
        raise DataError("confound_rate must be in [0, 1]")
    n_conf = int(round(confound_rate * n))
    perm = SeededRng(seed, stream_offset).split("confound").permutation(n)
    confounded = np.zeros(n, dtype=bool)
    confounded[perm[:n_conf]] = True
    return [make_record(seed, i, bool(confounded[i]), grid, stream_offset) for i in range(n)]


def generate_eval_set(seed: int, n: int, confound_rate: float = 0.7, grid: int = GRID) -> list[PreferenceRecord]:
    """Held-out records from streams disjoint from any training split."""
    return generate_dataset(seed, n, confound_rate, grid, stream_offset=EVAL_OFFSET)


def generate_warmstart_set(seed: int, n: int, confound_rate: float = 0.7, grid: int = GRID) -> list[PreferenceRecord]:
    """Records for supervised warm-starting, from streams disjoint from train and eval."""
    return generate_dataset(seed, n, confound_rate, grid, stream_offset=WARMSTART_OFFSET)


def dumps_dataset(records) -> str:
    return "".join(json.dumps(r.to_json(), sort_keys=True, separators=(",", ":")) + "\n" for r in records)


def save_dataset(records, path) -> str:
    """Write JSON Lines and return the sha256 of the bytes written."""
    text = dumps_dataset(records).encode()
    Path(path).write_bytes(text)
    return hashlib.sha256(text).hexdigest()


def load_dataset(path) -> list[PreferenceRecord]:
    with open(path) as fh:
        return [PreferenceRecord.from_json(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------- rejected images

@dataclass(frozen=True)
class PerturbStrategy:
    kind: str                 # "crop" | "random" | "noise"
    lo: float = 0.0
    hi: float = 0.2

    def __post_init__(self):
        if self.kind not in ("crop", "random", "noise"):
            raise DataError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "crop" and not 0.0 <= self.lo < self.hi <= 1.0:
            raise DataError(f"crop fractions must satisfy 0 <= lo < hi <= 1, got ({self.lo}, {self.hi})")

    @property
    def label(self) -> str:
        if self.kind == "crop":
            return f"crop-{self.lo:g}-{self.hi:g}"
        return {"random": "random-image", "noise": "noise-aug"}[self.kind]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbStrategy":
        unknown = set(d) - {"kind", "lo", "hi"}
        if unknown:
            raise DataError(f"unknown perturb keys: {sorted(unknown)}")
        return cls(**d)


def CropKeep(lo: float, hi: float) -> PerturbStrategy:
    return PerturbStrategy("crop", lo, hi)


def RandomImage() -> PerturbStrategy:
    return PerturbStrategy("random")


def NoiseAug() -> PerturbStrategy:
    return PerturbStrategy("noise")


def crop_side(size: int, keep: float) -> int:
    """Side of the square crop that keeps about ``keep`` of a size×size image."""
    return max(1, math.floor(size * math.sqrt(keep)))


def sample_crop_box(size: int, strategy: PerturbStrategy, rng) -> tuple[int, int, int]:
    """(top, left, side) of a square crop keeping a fraction f ~ U(lo, hi] of the area."""
    if strategy.hi * size * size < 1:
        raise DataError(f"degenerate crop: hi={strategy.hi} keeps under one pixel of a {size}x{size} image")
    f = strategy.hi - rng.uniform() * (strategy.hi - strategy.lo)
    side = crop_side(size, f)
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    return top, left, side


def make_rejected_image(image: np.ndarray, strategy: PerturbStrategy, rng, pool=None,
                        index: int | None = None) -> np.ndarray:
    """Build m_l from m_w. ``pool``/``index`` supply the other images for RandomImage."""
    h = image.shape[0]
    if strategy.kind == "crop":
        top, left, side = sample_crop_box(h, strategy, rng)
        crop = image[top: top + side, left: left + side]
        nn = (np.arange(h) * side) // h
        return crop[nn][:, nn].copy()
    if strategy.kind == "random":
        if pool is None or len(pool) < 2:
            raise DataError("RandomImage needs a pool of at least two images")
        j = int(rng.integers(len(pool) - 1))
        if index is not None and j >= index:
            j += 1
        return np.array(pool[j], dtype=np.float64)
    c = image.shape[-1]
    scale = rng.uniform(0.6, 1.4, size=c)
    shift = rng.uniform(-0.2, 0.2, size=c)
    noisy = image * scale + shift + rng.normal(0.0, 0.1, size=image.shape)
    return np.clip(noisy, 0.0, 1.0)


# ---------------------------------------------------------------- batches

@dataclass
class PreferenceBatch:
    """Three aligned views of the same records.

    ``chosen`` is (m_w, q, y_w), ``rejected`` is (m_w, q, y_l) and
    ``rejected_image`` is (m_l, q, y_w); the last is None when no strategy is given.
    """

    chosen: SequenceBatch
    rejected: SequenceBatch
    rejected_image: SequenceBatch | None


def _pad(rows, width: int, what: str):
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        if len(r) > width:
            raise DataError(f"{what} of length {len(r)} overflows width {width}")
        out[i, : len(r)] = r
        mask[i, : len(r)] = True
    return out, mask


def encode_responses(records, which: str, images: np.ndarray) -> SequenceBatch:
    q, _ = _pad([r.question_tokens for r in records], QUESTION_LEN, "question")
    y, m = _pad([getattr(r, which) for r in records], RESPONSE_LEN, "response")
    return SequenceBatch(images, q, y, m)


def model_images(records, grid: int = GRID, no_image: bool = False) -> np.ndarray:
    if no_image:
        return np.zeros((len(records), grid, grid, CHANNELS))
    return np.stack([r.model_image() for r in records])


def encode_batch(records, strategy: PerturbStrategy | None = None, rng: SeededRng | None = None,
                 pool=None, no_image: bool = False, grid: int = GRID) -> PreferenceBatch:
    """Tokenise and pad ``records``; build rejected images when ``strategy`` is given.

    Rejected image for record r comes from ``rng.split(r.index)`` so it does not
    depend on batch composition. With ``no_image`` every image plane is zero.
    """
    if not records:
        raise DataError("encode_batch: no records")
    imgs = model_images(records, grid, no_image)
    chosen = encode_responses(records, "chosen_tokens", imgs)
    rejected = encode_responses(records, "rejected_tokens", imgs)
    rej_img = None
    if strategy is not None:
        if no_image:
            ml = np.zeros_like(imgs)
        else:
            ml = np.stack([
                pool_to_grid(make_rejected_image(r.image, strategy, rng.split(r.index), pool, r.index), grid)
                for r in records
            ])
        rej_img = chosen.with_images(ml)
    return PreferenceBatch(chosen, rejected, rej_img)


def decode_batch(batch: SequenceBatch) -> list[tuple[list[int], list[int]]]:
    """(question tokens, response tokens) per row, padding stripped."""
    out = []
    for q, y, m in zip(batch.question_tokens, batch.response_tokens, batch.response_mask):
        out.append(([int(t) for t in q if t != PAD], [int(t) for t in y[m]]))
    return out


class ImagePool:
    """Lazy full-resolution images of ``records``, indexed by position."""

    def __init__(self, records):
        self.records = records

    def __len__(self):
        return len(self.records)

    def __getitem__(self, j):
        return self.records[j].image
