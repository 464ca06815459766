"""One-hidden-layer ReLU MLPs, a small pre-norm transformer, and checkpoints."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal

import numpy as np

from . import engine as E
from .engine import Tensor

FORMAT_VERSION = 1
_MAGIC = b"PDCKPT01"


# ===================================================================== MLP

@dataclass
class MLP:
    """f(x) = sum_i a_i relu(<w_i, x> + b_i).

    ``mode`` picks the head: ``"scalar"`` returns f (hinge setting),
    ``"two_logit"`` returns (f, -f), ``"multi"`` uses ``a`` of shape
    (m, C) and returns C logits.
    """

    W: Tensor
    b: Tensor
    a: Tensor
    mode: Literal["scalar", "two_logit", "multi"] = "two_logit"

    @property
    def width(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def num_outputs(self) -> int:
        return {"scalar": 1, "two_logit": 2}.get(self.mode, self.a.shape[-1])

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b, self.a]

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {"W": self.W.data, "b": self.b.data, "a": self.a.data}

    def config(self) -> dict:
        return {"m": self.width, "d": self.d, "mode": self.mode, "outputs": self.num_outputs}

    def hidden(self, x) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d:
            raise E.ShapeError("mlp_forward", x.shape, self.W.shape)
        return E.relu(E.matmul(Tensor(x.reshape(-1, self.d)), self.W.T) + self.b)

    def __call__(self, x) -> Tensor:
        h = self.hidden(x)
        if self.mode == "multi":
            return E.matmul(h, self.a)
        f = E.matmul(h, self.a.reshape(-1, 1)).reshape(-1)
        if self.mode == "scalar":
            return f
        return E.concat([f.reshape(-1, 1), (-f).reshape(-1, 1)], axis=1)

    def score(self, x) -> np.ndarray:
        """Raw scalar output f(x) (no graph); for multi mode, the logits."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.d)
        h = np.maximum(x @ self.W.data.T + self.b.data, 0.0)
        if self.mode == "multi":
            return h @ self.a.data
        return h @ self.a.data

    def logits(self, x) -> np.ndarray:
        f = self.score(x)
        if self.mode == "two_logit":
            return np.stack([f, -f], axis=1)
        if self.mode == "scalar":
            return f
        return f

    def copy(self) -> MLP:
        return MLP(Tensor(self.W.data.copy(), True), Tensor(self.b.data.copy(), True),
                   Tensor(self.a.data.copy(), True), self.mode)


def bias_grid(k: int) -> np.ndarray:
    """{-1 + 1/k, -1 + 3/k, ..., 1 - 1/k}: spacing 2/k, endpoints included."""
    return -1.0 + (2.0 * np.arange(k) + 1.0) / k


def init_mlp_symmetric(m: int, d: int, k: int, rng: np.random.Generator,
                       mode: str = "scalar") -> MLP:
    """Mirrored-pair init: the second half copies w, b and negates a, so f == 0."""
    if m % 2:
        raise ValueError(f"symmetric init needs even width, got m={m}")
    half = m // 2
    w = rng.integers(0, 2, size=(half, d)) * 2.0 - 1.0
    b = rng.choice(bias_grid(k), size=half)
    a = (rng.integers(0, 2, size=half) * 2.0 - 1.0) / m
    W = np.concatenate([w, w])
    B = np.concatenate([b, b])
    A = np.concatenate([a, -a])
    return MLP(Tensor(W, True), Tensor(B, True), Tensor(A, True), mode)


def init_mlp(m: int, d: int, rng: np.random.Generator, mode: str = "two_logit",
             num_classes: int = 2) -> MLP:
    """Uniform fan-in init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor."""
    lim1 = 1.0 / math.sqrt(d)
    lim2 = 1.0 / math.sqrt(m)
    W = rng.uniform(-lim1, lim1, size=(m, d))
    b = rng.uniform(-lim1, lim1, size=m)
    shape = (m, num_classes) if mode == "multi" else (m,)
    a = rng.uniform(-lim2, lim2, size=shape)
    return MLP(Tensor(W, True), Tensor(b, True), Tensor(a, True), mode)


def mlp_forward(params: MLP, x) -> Tensor:
    return params(x)


@dataclass
class TwoStageConfig:
    T1: int
    T2: int
    lr1: float
    lr2: float
    batch1: int
    batch2: int
    decay1: float
    decay2: float = 0.0
    population_stage1: bool = False   # exact expectation over {+-1}^d in stage 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.T1 < 0 or self.T2 < 0:
            raise ValueError("stage lengths must be non-negative")
        if self.lr1 <= 0 or self.lr2 <= 0 or self.batch1 <= 0 or self.batch2 <= 0:
            raise ValueError("learning rates and batch sizes must be positive")
        if self.decay1 < 0 or self.decay2 < 0:
            raise ValueError("weight decay must be non-negative")


POPULATION_CHUNK = 1 << 13


def hinge(margin: Tensor) -> Tensor:
    return E.relu(1.0 - margin)


def train_two_stage(model: MLP, config: TwoStageConfig, supervision: Callable[[np.ndarray], np.ndarray],
                    rng: np.random.Generator, alpha: float = 1.0,
                    labels: Callable[[np.ndarray], np.ndarray] | None = None,
                    ) -> list[tuple[int, dict[str, np.ndarray]]]:
    """Two-stage hinge training of a scalar-output MLP.

    Stage 1 updates only ``W``; stage 2 updates only ``a``; ``b`` never
    moves. ``supervision(x)`` returns the hinge target for each row (±1
    labels, or a teacher's scalar outputs). When ``labels`` is also given
    the loss is ``alpha * hinge(f y) + (1 - alpha) * hinge(f f_T)`` with
    ``supervision`` playing the teacher. Returns ``(step, tensors)``
    snapshots: the initial state, every ``checkpoint_every`` steps, the end
    of stage 1, and the end of training.
    """
    from .boolean_tasks import all_inputs, sample_inputs

    d = model.d
    snaps: list[tuple[int, dict[str, np.ndarray]]] = []

    def snap(step):
        if not snaps or snaps[-1][0] != step:
            snaps.append((step, {k: v.copy() for k, v in model.named_tensors().items()}))

    def loss_on(x):
        f = model(x)
        target = supervision(x)
        if labels is None:
            return hinge(f * target).mean()
        y = labels(x)
        return (alpha * hinge(f * y) + (1.0 - alpha) * hinge(f * target)).mean()

    snap(0)
    pop = all_inputs(d) if config.population_stage1 else None
    for t in range(config.T1):
        E.zero_grad(model.parameters())
        if pop is not None:
            # exact expectation, accumulated chunk by chunk
            for lo in range(0, len(pop), POPULATION_CHUNK):
                chunk = pop[lo:lo + POPULATION_CHUNK]
                E.backward(loss_on(chunk) * (len(chunk) / len(pop)))
        else:
            E.backward(loss_on(sample_inputs(d, rng, config.batch1)))
        E.sgd_step([model.W], config.lr1, config.decay1)
        if config.checkpoint_every and (t + 1) % config.checkpoint_every == 0:
            snap(t + 1)
    snap(config.T1)
    for t in range(config.T2):
        x = sample_inputs(d, rng, config.batch2)
        E.zero_grad(model.parameters())
        E.backward(loss_on(x))
        E.sgd_step([model.a], config.lr2, config.decay2)
        step = config.T1 + t + 1
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            snap(step)
    snap(config.T1 + config.T2)
    return snaps


# ============================================================== transformer

@dataclass
class TransformerConfig:
    layers: int = 2
    heads: int = 4
    head_dim: int = 8
    vocab: int = 4
    max_len: int = 32
    mode: Literal["bidirectional", "causal"] = "bidirectional"
    num_outputs: int = 0        # 0 -> same as vocab
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.mode not in ("bidirectional", "causal"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if min(self.layers, self.heads, self.head_dim, self.vocab, self.max_len) < 1:
            raise ValueError("transformer sizes must be positive")

    @property
    def width(self) -> int:
        return self.heads * self.head_dim

    @property
    def outputs(self) -> int:
        return self.num_outputs or self.vocab

    def to_dict(self) -> dict:
        return {"layers": self.layers, "heads": self.heads, "head_dim": self.head_dim,
                "vocab": self.vocab, "max_len": self.max_len, "mode": self.mode,
                "num_outputs": self.num_outputs, "mlp_ratio": self.mlp_ratio}


def _layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * E.power(var + eps, -0.5) * g + b


class Transformer:
    """Pre-norm transformer with learned absolute positions and a linear head."""

    def __init__(self, config: TransformerConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: TransformerConfig, rng: np.random.Generator) -> Transformer:
        w = config.width
        hid = config.mlp_ratio * w
        std = 0.02
        p: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0, std, (config.vocab, w)),
            "pos_emb": rng.normal(0, std, (config.max_len, w)),
        }
        for l in range(config.layers):
            p[f"l{l}.ln1.g"] = np.ones(w)
            p[f"l{l}.ln1.b"] = np.zeros(w)
            for name in "qkv":
                p[f"l{l}.attn.{name}"] = rng.normal(0, std, (w, w))
            p[f"l{l}.attn.o"] = rng.normal(0, std / math.sqrt(2 * config.layers), (w, w))
            p[f"l{l}.ln2.g"] = np.ones(w)
            p[f"l{l}.ln2.b"] = np.zeros(w)
            p[f"l{l}.mlp.w1"] = rng.normal(0, std, (w, hid))
            p[f"l{l}.mlp.b1"] = np.zeros(hid)
            p[f"l{l}.mlp.w2"] = rng.normal(0, std / math.sqrt(2 * config.layers), (hid, w))
            p[f"l{l}.mlp.b2"] = np.zeros(w)
        p["lnf.g"] = np.ones(w)
        p["lnf.b"] = np.zeros(w)
        p["head.w"] = rng.normal(0, std, (w, config.outputs))
        p["head.b"] = np.zeros(config.outputs)
        return cls(config, {k: Tensor(v, True) for k, v in p.items()})

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> Transformer:
        return Transformer(self.config, {k: Tensor(v.data.copy(), True) for k, v in self.params.items()})

    def embed(self, tokens, hidden=None, positions=None) -> Tensor:
        """Final-layer (post-norm) embeddings, shape (B, h, width)."""
        cfg = self.config
        P = self.params
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, h = tokens.shape
        if h > cfg.max_len:
            raise ValueError(f"sequence length {h} exceeds max_len {cfg.max_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
            raise ValueError(f"token ids must lie in [0, {cfg.vocab})")
        pos = np.arange(h) if positions is None else np.asarray(positions, dtype=np.int64)
        x = E.embedding(P["tok_emb"], tokens) + E.embedding(P["pos_emb"], pos)

        key_block = np.zeros((B, 1, h, h), dtype=bool)
        if hidden is not None:
            hid = np.asarray(hidden, dtype=bool).reshape(-1, h)
            key_block = key_block | np.broadcast_to(hid[:, None, None, :], (B, 1, h, h))
        if cfg.mode == "causal":
            key_block = key_block | np.triu(np.ones((h, h), dtype=bool), 1)[None, None]

        H, hd, w = cfg.heads, cfg.head_dim, cfg.width
        scale = 1.0 / math.sqrt(hd)
        for l in range(cfg.layers):
            z = _layer_norm(x, P[f"l{l}.ln1.g"], P[f"l{l}.ln1.b"])
            q = E.matmul(z, P[f"l{l}.attn.q"]).reshape(B, h, H, hd).transpose(0, 2, 1, 3)
            k = E.matmul(z, P[f"l{l}.attn.k"]).reshape(B, h, H, hd).transpose(0, 2, 3, 1)
            v = E.matmul(z, P[f"l{l}.attn.v"]).reshape(B, h, H, hd).transpose(0, 2, 1, 3)
            scores = E.matmul(q, k) * scale
            scores = E.masked_fill(scores, key_block, E.NEG_INF)
            att = E.softmax(scores)
            ctx = E.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, h, w)
            x = x + E.matmul(ctx, P[f"l{l}.attn.o"])
            z = _layer_norm(x, P[f"l{l}.ln2.g"], P[f"l{l}.ln2.b"])
            z = E.relu(E.matmul(z, P[f"l{l}.mlp.w1"]) + P[f"l{l}.mlp.b1"])
            x = x + E.matmul(z, P[f"l{l}.mlp.w2"]) + P[f"l{l}.mlp.b2"]
        return _layer_norm(x, P["lnf.g"], P["lnf.b"])

    def __call__(self, tokens, hidden=None, positions=None) -> Tensor:
        """Per-position logits, shape (B, h, outputs)."""
        e = self.embed(tokens, hidden, positions)
        return E.matmul(e, self.params["head.w"]) + self.params["head.b"]

    def logits(self, tokens, hidden=None, positions=None, batch: int = 256) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        hid = None if hidden is None else np.asarray(hidden, dtype=bool).reshape(tokens.shape)
        outs = []
        for s in range(0, len(tokens), batch):
            sl = slice(s, s + batch)
            outs.append(self(tokens[sl], None if hid is None else hid[sl], positions).data)
        return np.concatenate(outs) if outs else np.zeros((0,) + tokens.shape[1:] + (self.config.outputs,))


def transformer_forward(config: TransformerConfig, params: Transformer, tokens, hidden=None) -> Tensor:
    if params.config != config:
        raise ValueError("config does not match the parameters")
    return params(tokens, hidden)


# ============================================================== checkpoints

class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    step: int
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def checkpoint_of(model, step: int, **meta) -> Checkpoint:
    if isinstance(model, MLP):
        kind, cfg = "mlp", model.config()
    elif isinstance(model, Transformer):
        kind, cfg = "transformer", model.config.to_dict()
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    meta = {"config": cfg, **meta}
    return Checkpoint(kind, int(step), {k: v.copy() for k, v in model.named_tensors().items()}, meta)


def model_from_checkpoint(ckpt: Checkpoint):
    cfg = ckpt.meta["config"]
    t = {k: Tensor(v.copy(), True) for k, v in ckpt.tensors.items()}
    if ckpt.kind == "mlp":
        return MLP(t["W"], t["b"], t["a"], cfg["mode"])
    if ckpt.kind == "transformer":
        return Transformer(TransformerConfig(**cfg), t)
    raise CheckpointError(f"unknown model kind {ckpt.kind!r}")


def _header(ckpt: Checkpoint) -> dict:
    return {"format_version": ckpt.format_version, "kind": ckpt.kind, "step": ckpt.step,
            "meta": ckpt.meta}


def save_checkpoint(ckpt: Checkpoint, binary: bool = False) -> bytes:
    """Serialize to JSON bytes, or to the binary layout (magic, header length, JSON header, <f8 data)."""
    if not binary:
        doc = _header(ckpt)
        doc["tensors"] = {k: {"shape": list(v.shape), "data": [float(x) for x in v.reshape(-1)]}
                          for k, v in sorted(ckpt.tensors.items())}
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    doc = _header(ckpt)
    layout, chunks, offset = {}, [], 0
    for k, v in sorted(ckpt.tensors.items()):
        raw = np.ascontiguousarray(v, dtype="<f8").tobytes()
        layout[k] = {"shape": list(v.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    doc["tensors"] = layout
    head = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return _MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def _check_version(doc: dict) -> None:
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")


def load_checkpoint(blob: bytes) -> Checkpoint:
    if blob.startswith(_MAGIC):
        try:
            (n,) = struct.unpack("<Q", blob[len(_MAGIC):len(_MAGIC) + 8])
            start = len(_MAGIC) + 8
            doc = json.loads(blob[start:start + n])
        except (struct.error, ValueError) as err:
            raise CheckpointError(f"corrupt checkpoint payload: {err}") from None
        _check_version(doc)
        body = blob[start + n:]
        tensors = {}
        for k, info in doc["tensors"].items():
            raw = body[info["offset"]:info["offset"] + info["nbytes"]]
            if len(raw) != info["nbytes"]:
                raise CheckpointError(f"corrupt checkpoint payload: tensor {k!r} truncated")
            tensors[k] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(info["shape"])
        return Checkpoint(doc["kind"], doc["step"], tensors, doc["meta"], doc["format_version"])
    try:
        doc = json.loads(blob)
    except (ValueError, UnicodeDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint payload: {err}") from None
    if not isinstance(doc, dict):
        raise CheckpointError("corrupt checkpoint payload: not a JSON object")
    _check_version(doc)
    try:
        tensors = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                   for k, v in doc["tensors"].items()}
        return Checkpoint(doc["kind"], doc["step"], tensors, doc["meta"], doc["format_version"])
    except (KeyError, ValueError, TypeError) as err:
        raise CheckpointError(f"corrupt checkpoint payload: {err}") from None


def param_digest(arrays: Iterable[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()
