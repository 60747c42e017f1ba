"""A tiny image-conditioned causal language model.

The image's G*G cells are projected to soft tokens and prepended to the text
(prefix conditioning). Patches see each other bidirectionally; text positions
see every patch and the text before them. Only response tokens are scored.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .rng import SeededRng
from .tensor import Tensor, no_grad

CHECKPOINT_MAGIC = b"MDPOCKPT"
CHECKPOINT_VERSION = 1
_NEG_INF = -1e30


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 80
    image_grid: int = 8
    channels: int = 3
    seed: int = 0
    init_std: float = 0.02
    patch_init_std: float = 1.0
    zero_head: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.image_grid, self.channels) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.max_seq_len <= self.patch_count:
            raise ConfigError(f"max_seq_len={self.max_seq_len} leaves no room after {self.patch_count} patches")

    @property
    def patch_count(self) -> int:
        return self.image_grid * self.image_grid

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SequenceBatch:
    """``images`` B×G×G×C in [0, 1]; token arrays are int64; ``response_mask`` marks scored positions."""

    images: np.ndarray
    question_tokens: np.ndarray
    response_tokens: np.ndarray
    response_mask: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.question_tokens = np.asarray(self.question_tokens, dtype=np.int64)
        self.response_tokens = np.asarray(self.response_tokens, dtype=np.int64)
        self.response_mask = np.asarray(self.response_mask, dtype=bool)

    def __len__(self):
        return self.images.shape[0]

    def with_images(self, images) -> "SequenceBatch":
        return SequenceBatch(images, self.question_tokens, self.response_tokens, self.response_mask)

    def validate(self, cfg: ModelConfig):
        b, g = len(self), cfg.image_grid
        if self.images.shape != (b, g, g, cfg.channels):
            raise ValueError(f"images shape {self.images.shape} != {(b, g, g, cfg.channels)}")
        if self.question_tokens.shape[0] != b or self.response_tokens.shape[0] != b:
            raise ValueError("batch dimension mismatch between images and tokens")
        if self.response_mask.shape != self.response_tokens.shape:
            raise ValueError("response_mask shape must match response_tokens")
        for arr in (self.question_tokens, self.response_tokens):
            if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab_size):
                raise ValueError(f"token id outside [0, {cfg.vocab_size})")
        if self.response_tokens.shape[1] == 0 or not self.response_mask.any(axis=1).all():
            raise ValueError("every row needs at least one scored response position")
        total = cfg.patch_count + self.question_tokens.shape[1] + self.response_tokens.shape[1]
        if total > cfg.max_seq_len:
            raise ValueError(f"sequence length {total} exceeds max_seq_len={cfg.max_seq_len}")


class MultimodalLM:
    """Pre-norm transformer over ``[patches ; question ; response]``.

    ``params`` is an ordered name -> Tensor mapping; everything the model
    computes flows from it, so gradients, checkpoints and the optimizer all
    work off the same dictionary.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.frozen = False
        self.params = self._init_params(config)

    @staticmethod
    def _init_params(cfg: ModelConfig) -> dict[str, Tensor]:
        rng = SeededRng(cfg.seed).split("init")
        d, std = cfg.d_model, cfg.init_std

        def normal(*shape):
            return rng.normal(0.0, std, size=shape)

        # Patch inputs are sparse and only C wide, so their projection starts at
        # unit scale and patch positions start at zero; otherwise positional
        # noise swamps the few occupied cells early in training.
        pos = normal(cfg.max_seq_len, d)
        pos[: cfg.patch_count] = 0.0
        p = {
            "patch_proj.w": rng.normal(0.0, cfg.patch_init_std, size=(cfg.channels, d)),
            "patch_proj.b": np.zeros(d),
            "tok_emb": normal(cfg.vocab_size, d),
            "pos_emb": pos,
        }
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}."
            p[pre + "ln1.g"] = np.ones(d)
            p[pre + "ln1.b"] = np.zeros(d)
            p[pre + "attn.qkv.w"] = normal(d, 3 * d)
            p[pre + "attn.qkv.b"] = np.zeros(3 * d)
            p[pre + "attn.out.w"] = normal(d, d)
            p[pre + "attn.out.b"] = np.zeros(d)
            p[pre + "ln2.g"] = np.ones(d)
            p[pre + "ln2.b"] = np.zeros(d)
            p[pre + "mlp.fc.w"] = normal(d, 4 * d)
            p[pre + "mlp.fc.b"] = np.zeros(4 * d)
            p[pre + "mlp.proj.w"] = normal(4 * d, d)
            p[pre + "mlp.proj.b"] = np.zeros(d)
        p["ln_f.g"] = np.ones(d)
        p["ln_f.b"] = np.zeros(d)
        p["head.w"] = np.zeros((d, cfg.vocab_size)) if cfg.zero_head else normal(d, cfg.vocab_size)
        p["head.b"] = np.zeros(cfg.vocab_size)
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def __call__(self, batch: SequenceBatch) -> Tensor:
        return forward(self, batch)


def _text_mask(n_patch: int, n_text: int) -> np.ndarray:
    """Additive mask for text queries over ``[patches ; text]`` keys: every patch, causal text."""
    i = np.arange(n_text)[:, None]
    j = np.arange(n_text)[None, :]
    causal = np.where(j <= i, 0.0, _NEG_INF)
    return np.concatenate([np.zeros((n_text, n_patch)), causal], axis=1)


def _heads(x: Tensor, w: Tensor, b: Tensor, n_heads: int):
    n, t, d = x.shape
    qkv = (x @ w + b).reshape(n, t, 3, n_heads, d // n_heads).transpose(2, 0, 3, 1, 4)
    return qkv[0], qkv[1], qkv[2]


def _merge(ctx: Tensor, x: Tensor, p: dict, pre: str) -> Tensor:
    n, h, t, dh = ctx.shape
    x = x + (ctx.transpose(0, 2, 1, 3).reshape(n, t, h * dh) @ p[pre + "attn.out.w"] + p[pre + "attn.out.b"])
    m = T.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
    m = T.gelu(m @ p[pre + "mlp.fc.w"] + p[pre + "mlp.fc.b"])
    return x + (m @ p[pre + "mlp.proj.w"] + p[pre + "mlp.proj.b"])


def _block(xp: Tensor, xt: Tensor, rows: np.ndarray, p: dict, pre: str, cfg: ModelConfig,
           mask: np.ndarray, last: bool = False) -> tuple[Tensor | None, Tensor]:
    """One pre-norm layer.

    Patch states never look at text, so they are carried once per distinct
    image (``xp``, U×P×d); text row ``i`` (``xt``, B×L×d) reads the patch keys
    and values of image ``rows[i]``. In the ``last`` layer nothing reads the
    updated patch states, so they are not computed.
    """
    scale = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)
    g, b = p[pre + "ln1.g"], p[pre + "ln1.b"]
    w, wb = p[pre + "attn.qkv.w"], p[pre + "attn.qkv.b"]
    qp, kp, vp = _heads(T.layer_norm(xp, g, b), w, wb, cfg.n_heads)
    qt, kt, vt = _heads(T.layer_norm(xt, g, b), w, wb, cfg.n_heads)
    keys = T.concatenate([T.take_rows(kp, rows), kt], axis=2)
    vals = T.concatenate([T.take_rows(vp, rows), vt], axis=2)
    ctx_t = T.softmax((qt @ keys.transpose(0, 1, 3, 2)) * scale + mask) @ vals
    xt = _merge(ctx_t, xt, p, pre)
    if last:
        return None, xt
    ctx_p = T.softmax((qp @ kp.transpose(0, 1, 3, 2)) * scale) @ vp
    return _merge(ctx_p, xp, p, pre), xt


def _distinct_rows(flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices of first occurrences of each distinct row, and each row's group (in first-seen order)."""
    seen: dict[bytes, int] = {}
    first, rows = [], np.empty(len(flat), dtype=np.int64)
    for i, row in enumerate(flat):
        key = row.tobytes()
        if key not in seen:
            seen[key] = len(first)
            first.append(i)
        rows[i] = seen[key]
    return np.array(first, dtype=np.int64), rows


def forward(model: MultimodalLM, batch: SequenceBatch) -> Tensor:
    """Next-token logits at every response position, shape B×Lr×V.

    ``logits[:, t]`` predicts ``response_tokens[:, t]`` from the image, the
    question and ``response_tokens[:, :t]``.
    """
    cfg, p = model.config, model.params
    batch.validate(cfg)
    n_patch = cfg.patch_count
    lq, lr = batch.question_tokens.shape[1], batch.response_tokens.shape[1]
    if lq == 0:
        raise ValueError("question must contain at least one token")

    flat = batch.images.reshape(len(batch), -1)
    first, rows = _distinct_rows(flat)
    patches = flat[first].reshape(len(first), n_patch, cfg.channels)
    xp = T.matmul(Tensor(patches), p["patch_proj.w"]) + p["patch_proj.b"] + p["pos_emb"][:n_patch]

    text_ids = np.concatenate([batch.question_tokens, batch.response_tokens[:, :-1]], axis=1)
    n_text = text_ids.shape[1]
    xt = T.take_rows(p["tok_emb"], text_ids) + p["pos_emb"][n_patch: n_patch + n_text]
    mask = _text_mask(n_patch, n_text)
    for i in range(cfg.n_layers):
        xp, xt = _block(xp, xt, rows, p, f"blocks.{i}.", cfg, mask, last=i == cfg.n_layers - 1)
    x = xt[:, lq - 1: lq - 1 + lr]
    x = T.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
    return x @ p["head.w"] + p["head.b"]


def batch_log_probs(model: MultimodalLM, batch: SequenceBatch) -> Tensor:
    """Per-row summed log-probability of the masked response tokens, shape (B,)."""
    logp = T.log_softmax(forward(model, batch))
    tok = T.gather(logp, batch.response_tokens)
    return (tok * batch.response_mask.astype(np.float64)).sum(axis=1)


def sequence_log_prob(model: MultimodalLM, image, question, response) -> Tensor:
    """``sum_t log p(y_t | image, question, y_<t)`` as a differentiable scalar."""
    response = np.asarray(response, dtype=np.int64)
    if response.size == 0:
        raise ValueError("sequence_log_prob: empty response")
    batch = SequenceBatch(
        images=np.asarray(image, dtype=np.float64)[None],
        question_tokens=np.asarray(question, dtype=np.int64)[None],
        response_tokens=response[None],
        response_mask=np.ones((1, response.size), dtype=bool),
    )
    return batch_log_probs(model, batch)[0]


def snapshot_reference(model: MultimodalLM) -> MultimodalLM:
    """Frozen deep copy: its parameters never require gradients."""
    ref = MultimodalLM.__new__(MultimodalLM)
    ref.config = model.config
    ref.frozen = True
    ref.params = {k: Tensor(v.data.copy(), requires_grad=False, name=k) for k, v in model.params.items()}
    return ref


def clone(model: MultimodalLM) -> MultimodalLM:
    return copy.deepcopy(model)


def reference_log_probs(reference: MultimodalLM, batch: SequenceBatch) -> np.ndarray:
    with no_grad():
        return batch_log_probs(reference, batch).data


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: MultimodalLM, path) -> None:
    """Header (magic, version, JSON config + manifest) then little-endian float64 data."""
    manifest, offset = [], 0
    for name, t in model.params.items():
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "config": asdict(model.config), "params": manifest},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for t in model.params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> MultimodalLM:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported format_version {header.get('format_version')}")
    cfg = ModelConfig.from_dict(header["config"])
    model = MultimodalLM(cfg)
    data = np.frombuffer(raw[12 + hlen:], dtype="<f8")
    expected = {k: t.shape for k, t in model.params.items()}
    listed = {e["name"]: tuple(e["shape"]) for e in header["params"]}
    if listed != expected:
        raise ConfigError(f"{path}: parameter manifest does not match config")
    total = sum(int(np.prod(s)) for s in expected.values())
    if data.size != total:
        raise ConfigError(f"{path}: expected {total} floats, found {data.size}")
    for e in header["params"]:
        n = int(np.prod(e["shape"]))
        model.params[e["name"]].data = data[e["offset"]: e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return model
