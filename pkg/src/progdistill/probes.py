"""Measurements on teacher/student snapshots.

Boolean side: monomial (Fourier) correlations, Majority Fourier
coefficients, the population gradient at symmetric initialization and its
closed form, and teacher-Majority correlations. Grammar side: n-gram
robustness/closeness of masked or next-token predictions and a
position-attention linear probe for nonterminals. Plus transition
detection on a metric curve.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import engine as E
from .boolean_tasks import ParitySpec, all_inputs, sample_inputs
from .engine import Tensor
from .grammar import ngram_window

EXACT_BUDGET = 2 ** 22
CHUNK = 1 << 15


# ============================================================ boolean probes

@dataclass
class MonomialCorrelationReport:
    subsets: list[tuple[int, ...]]
    values: np.ndarray          # |E[p(x) chi_A(x)]|
    signed: np.ndarray
    stderr: np.ndarray          # zeros in exact mode
    mode: str                   # exact | monte_carlo
    samples: int

    def to_dict(self) -> dict:
        return {"mode": self.mode, "samples": self.samples,
                "rows": [{"subset": list(a), "value": float(v), "stderr": float(s)}
                         for a, v, s in zip(self.subsets, self.values, self.stderr)]}


def _chi(x: np.ndarray, subset: Sequence[int]) -> np.ndarray:
    return np.prod(x[:, list(subset)], axis=1)


def _point_values(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(fn(x[s:s + CHUNK]), dtype=np.float64).reshape(-1)
                           for s in range(0, len(x), CHUNK)]) if len(x) else np.zeros(0)


def monomial_correlations(fn: Callable[[np.ndarray], np.ndarray], d: int,
                          subsets: Sequence[Sequence[int]], mode: str = "auto",
                          samples: int = 1 << 16, rng: np.random.Generator | None = None,
                          budget: int = EXACT_BUDGET) -> MonomialCorrelationReport:
    """E[fn(x) chi_A(x)] for each subset A under uniform x.

    ``fn`` maps a (n, d) batch to n scalars (a class-1 probability or a
    raw score). ``auto`` enumerates the cube when 2^d <= budget and falls
    back to Monte-Carlo with standard errors otherwise.
    """
    subsets = [tuple(int(i) for i in a) for a in subsets]
    if any(len(a) == 0 for a in subsets):
        raise ValueError("monomial subsets must be nonempty")
    if mode == "auto":
        mode = "exact" if 2 ** d <= budget else "monte_carlo"
    if mode == "exact":
        x = all_inputs(d)
    elif mode == "monte_carlo":
        x = sample_inputs(d, rng if rng is not None else np.random.default_rng(0), samples)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    p = _point_values(fn, x)
    signed, err = [], []
    for a in subsets:
        prod = p * _chi(x, a)
        signed.append(prod.mean())
        err.append(0.0 if mode == "exact" else prod.std(ddof=1) / math.sqrt(len(prod)))
    signed = np.array(signed)
    return MonomialCorrelationReport(subsets, np.abs(signed), signed, np.array(err), mode, len(x))


def monomial_correlation(fn, d: int, subset: Sequence[int], mode: str = "auto", **kw) -> float:
    return float(monomial_correlations(fn, d, [subset], mode, **kw).values[0])


def class1_probability(model) -> Callable[[np.ndarray], np.ndarray]:
    """x -> p(x)_1 for a model with a ``logits`` method."""

    def fn(x):
        z = model.logits(x)
        if z.ndim == 1:           # scalar head: (f, -f)
            z = np.stack([z, -z], axis=1)
        return np.exp(z[:, 0] - np.logaddexp.reduce(z, axis=1))

    return fn


def maj_fourier(d: int, s: int, tie: int = 1, exact: bool = False):
    """Fourier coefficient E[Maj(x) chi_S(x)] for any |S| = s.

    Maj(x) = sign(sum x) with a zero sum sent to ``tie``. Computed by
    counting sign patterns; ``exact=True`` returns a Fraction.
    """
    if not 0 <= s <= d:
        raise ValueError(f"need 0 <= s <= d, got s={s}, d={d}")
    total = 0
    for a in range(s + 1):                 # -1 entries inside S
        for c in range(d - s + 1):         # -1 entries outside S
            z = d - 2 * (a + c)
            sgn = tie if z == 0 else (1 if z > 0 else -1)
            total += math.comb(s, a) * math.comb(d - s, c) * (-1) ** a * sgn
    val = Fraction(total, 2 ** d)
    return val if exact else float(val)


def maj_fourier_enumerated(d: int, s: int, tie: int = 1, max_d: int = 22) -> float:
    """Same coefficient by brute force over the cube."""
    if d > max_d:
        raise ValueError(f"enumeration budget exceeded for d={d}")
    x = all_inputs(d)
    tot = x.sum(axis=1)
    maj = np.where(tot > 0, 1.0, np.where(tot < 0, -1.0, float(tie)))
    return float((maj * np.prod(x[:, :s], axis=1)).mean())


def majority(x: np.ndarray, tie: int = 1) -> np.ndarray:
    t = np.asarray(x).sum(axis=-1)
    return np.where(t > 0, 1.0, np.where(t < 0, -1.0, float(tie)))


def population_hinge_gradient(model, spec: ParitySpec) -> np.ndarray:
    """Exact gradient of E[max(0, 1 - f(x) y)] with respect to W, y = chi_S(x).

    Assumes a scalar-output MLP. Enumerates the whole cube.
    """
    x = all_inputs(spec.d)
    y = _chi(x, spec.support)
    pre = x @ model.W.data.T + model.b.data
    f = np.maximum(pre, 0.0) @ model.a.data
    active = (1.0 - f * y) > 0
    coef = -(y * active)[:, None] * (pre > 0) * model.a.data[None, :]
    return coef.T @ x / len(x)


def claim1_closed_form(spec: ParitySpec, w: np.ndarray, b: float, a: float, j: int) -> float:
    """Population hinge-loss gradient on w_j for a neuron at f == 0.

    -1/2 a chi_T(w) (zeta_|T| + [T empty]) with T = S xor {j}; on even d
    a zero pre-activation sum falls on the side of sign(b).
    """
    T = set(spec.support) ^ {j}
    chi = float(np.prod(w[list(T)])) if T else 1.0
    tie = 1 if b > 0 else -1
    zeta = maj_fourier(spec.d, len(T), tie=tie)
    return -0.5 * a * chi * (zeta + (1.0 if not T else 0.0))


def verify_claim1(spec: ParitySpec, model, i: int, j: int) -> tuple[float, float]:
    """(enumerated, closed-form) population gradient of neuron i, coordinate j."""
    if 2 ** spec.d > EXACT_BUDGET:
        raise ValueError(f"enumeration budget exceeded for d={spec.d}")
    g = population_hinge_gradient(model, spec)
    closed = claim1_closed_form(spec, model.W.data[i], float(model.b.data[i]), float(model.a.data[i]), j)
    return float(g[i, j]), closed


def teacher_support_correlation(score: Callable[[np.ndarray], np.ndarray], d: int,
                                coords: Sequence[int] | None = None, mode: str = "auto",
                                samples: int = 1 << 17, rng: np.random.Generator | None = None,
                                tie: int = 1) -> np.ndarray:
    """Signed E[f(x) Maj(x) x_i] for each coordinate i."""
    coords = list(range(d)) if coords is None else list(coords)
    if mode == "auto":
        mode = "exact" if 2 ** d <= EXACT_BUDGET else "monte_carlo"
    x = all_inputs(d) if mode == "exact" else sample_inputs(d, rng or np.random.default_rng(0), samples)
    f = _point_values(score, x) * majority(x, tie)
    return np.array([(f * x[:, i]).mean() for i in coords])


# ============================================================ distributions

def tv(p, q) -> float:
    """Total variation 1/2 sum |p - q|."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions differ in shape")
    return float(min(1.0, 0.5 * np.abs(p - q).sum(axis=-1)))


def tv_rows(p, q) -> np.ndarray:
    return np.minimum(1.0, 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1))


# ============================================================ n-gram measures

@dataclass
class SequenceModelSpec:
    """How to feed a grammar model: which id hides a token and how inputs align.

    ``mode='bidirectional'``: the input is the sentence, hidden positions
    get ``special_id`` (the [mask] token). ``mode='autoregressive'``: the
    input is ``[special_id] + sentence[:-1]`` (``special_id`` = [bos]) and
    hidden tokens are dropped from attention while keeping their position.
    """

    mode: str
    special_id: int
    pad_id: int


def _predictions(model, spec: SequenceModelSpec, sents: np.ndarray, pos: np.ndarray,
                 hide: np.ndarray) -> np.ndarray:
    """Distribution at ``pos[r]`` of sentence row r with ``hide[r]`` positions removed."""
    B, h = sents.shape
    valid = sents != spec.pad_id
    if spec.mode == "bidirectional":
        inp = np.where(hide, spec.special_id, sents)
        hidden = ~valid
    elif spec.mode == "autoregressive":
        inp = np.concatenate([np.full((B, 1), spec.special_id), sents[:, :-1]], axis=1)
        shifted_hide = np.concatenate([np.zeros((B, 1), bool), hide[:, :-1]], axis=1)
        shifted_valid = np.concatenate([np.ones((B, 1), bool), valid[:, :-1]], axis=1)
        inp = np.where(shifted_valid, inp, spec.pad_id)
        hidden = shifted_hide | ~shifted_valid
    else:
        raise ValueError(f"unknown mode {spec.mode!r}")
    logits = model.logits(inp, hidden)
    z = logits[np.arange(B), pos]
    return np.exp(z - np.logaddexp.reduce(z, axis=-1, keepdims=True))


def _context_sets(spec: SequenceModelSpec, i: int, n: int, h: int, kind: str):
    """(base hidden set, comparison hidden set) for position i of a length-h sentence."""
    every = set(range(h))
    if spec.mode == "bidirectional":
        base = {i}
        win = set(ngram_window(i, n, h, "centered"))
        if kind == "robust":
            return base, win | base
        return base, (every - win) | base
    # autoregressive: the prediction of token i reads tokens < i
    past = set(range(i))
    base = every - past
    lo = max(i - n + 1, 0)
    if kind == "robust":          # skip n-gram: drop i-n+1 .. i-2, keep i-1
        return base, base | set(range(lo, i - 1))
    return base, base | set(range(0, lo))


def m_measure_batch(model, spec: SequenceModelSpec, sents: np.ndarray, positions: Sequence[int],
                    n: int, kind: str) -> np.ndarray:
    """M_robust (``kind='robust'``) or M_close (``kind='close'``) per (sentence, position)."""
    if kind not in ("robust", "close"):
        raise ValueError(f"unknown measure {kind!r}")
    sents = np.asarray(sents, dtype=np.int64)
    B, H = sents.shape
    pos = np.asarray(positions, dtype=np.int64)
    lens = (sents != spec.pad_id).sum(axis=1)
    if spec.mode == "autoregressive" and (pos < 1).any():
        raise ValueError("autoregressive measures need i >= 1")
    hide_a = np.zeros((B, H), bool)
    hide_b = np.zeros((B, H), bool)
    for r in range(B):
        a, b = _context_sets(spec, int(pos[r]), n, int(lens[r]), kind)
        hide_a[r, list(a)] = True
        hide_b[r, list(b)] = True
    p = _predictions(model, spec, sents, pos, hide_a)
    q = _predictions(model, spec, sents, pos, hide_b)
    return tv_rows(p, q)


def m_robust(model, spec: SequenceModelSpec, tokens, i: int, n: int) -> float:
    """TV between predictions at i with only i removed and with its n-gram removed."""
    return float(m_measure_batch(model, spec, np.asarray(tokens)[None], [i], n, "robust")[0])


def m_close(model, spec: SequenceModelSpec, tokens, i: int, n: int) -> float:
    """TV between predictions at i from the full context and from the n-gram only."""
    return float(m_measure_batch(model, spec, np.asarray(tokens)[None], [i], n, "close")[0])


def percentile(values, q: float = 50.0) -> float:
    return float(np.percentile(np.asarray(values, dtype=np.float64), q))


# ============================================================ nonterminal probe

@dataclass
class NtProbe:
    """G_i(x) = sum_r sum_k w_{r,i->k} f_r(e_k) with w = softmax_k <P_{i,r}, P_{k,r}>."""

    heads: int
    maps: Tensor                # (H, E, C) linear maps f_r
    bias: Tensor                # (C,)
    keys: Tensor                # (H, max_len, key_dim)

    def parameters(self) -> list[Tensor]:
        return [self.maps, self.bias, self.keys]

    def attention(self, h: int, valid: np.ndarray | None = None) -> Tensor:
        P = self.keys[:, :h, :]
        s = E.matmul(P, P.transpose(0, 2, 1))              # (H, h, h)
        if valid is not None:
            s = E.masked_fill(s.reshape(1, self.heads, h, h),
                              ~np.asarray(valid, bool)[:, None, None, :], E.NEG_INF)
        return E.softmax(s)

    def scores(self, emb: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
        """(B, h, C) scores for frozen embeddings of shape (B, h, E)."""
        B, h, _ = emb.shape
        w = self.attention(h, valid)                         # (B|1, H, h, h)
        proj = E.matmul(Tensor(emb[:, None]), self.maps)    # (B, H, h, C)
        mixed = E.matmul(w, proj)                            # (B, H, h, C)
        return mixed.sum(axis=1) + self.bias


def train_nt_probe(emb: np.ndarray, labels: np.ndarray, select: np.ndarray, n_classes: int,
                   heads: int = 4, rng: np.random.Generator | None = None, steps: int = 300,
                   lr: float = 0.02, key_dim: int = 8, valid: np.ndarray | None = None,
                   batch: int = 128) -> NtProbe:
    """Fit a probe by cross-entropy at the selected (boundary) positions.

    ``emb`` (N, h, E) frozen embeddings, ``labels`` (N, h) class ids,
    ``select`` (N, h) positions carrying a label.
    """
    if not np.asarray(select).any():
        raise ValueError("no labelled positions for this level")
    rng = rng or np.random.default_rng(0)
    N, h, Ed = emb.shape
    probe = NtProbe(heads, Tensor(rng.normal(0, 1 / math.sqrt(Ed), (heads, Ed, n_classes)), True),
                    Tensor(np.zeros(n_classes), True),
                    Tensor(rng.normal(0, 0.1, (heads, h, key_dim)), True))
    opt = E.Adam(probe.parameters())
    rows = np.flatnonzero(np.asarray(select).any(axis=1))
    for t in range(steps):
        idx = rows[rng.integers(0, len(rows), size=min(batch, len(rows)))]
        E.zero_grad(probe.parameters())
        s = probe.scores(emb[idx], None if valid is None else valid[idx])
        lp = E.log_softmax(s)
        sel = np.asarray(select)[idx]
        tgt = np.where(sel, labels[idx], 0)
        picked = lp.reshape(-1, n_classes)[np.arange(sel.size), tgt.reshape(-1)]
        loss = -(picked * sel.reshape(-1).astype(float)).sum() * (1.0 / sel.sum())
        E.backward(loss)
        opt.step(lr)
    return probe


def eval_nt_probe(probe: NtProbe, emb: np.ndarray, labels: np.ndarray, select: np.ndarray,
                  valid: np.ndarray | None = None) -> float:
    """Top-1 accuracy at the selected positions."""
    pred = np.argmax(probe.scores(emb, valid).data, axis=-1)
    sel = np.asarray(select, bool)
    return float((pred == labels)[sel].mean())


# ============================================================ transitions

@dataclass
class Transition:
    found: bool
    c1: int | None = None
    start: int | None = None
    end: int | None = None
    direction: int = 0          # +1 rising, -1 falling

    def to_dict(self) -> dict:
        return {"found": self.found, "c1": self.c1, "start": self.start, "end": self.end,
                "direction": self.direction}


def smooth(values, width: int) -> np.ndarray:
    """Centered moving average with shrinking windows at the ends."""
    v = np.asarray(values, dtype=np.float64)
    if width <= 1:
        return v.copy()
    half = width // 2
    out = np.empty_like(v)
    for i in range(len(v)):
        out[i] = v[max(0, i - half):i + half + 1].mean()
    return out


def detect_transition(series: Sequence[tuple[int, float]], width: int = 1, ratio: float = 3.0,
                      edge: float = 0.05) -> Transition:
    """Locate the sharpest change in a (step, value) curve.

    After smoothing, the steepest per-step slope must exceed ``ratio``
    times the median slope magnitude; otherwise there is no transition.
    The segment runs from the last point before the jump that is still
    within ``edge`` of the starting level to the first point after it
    within ``edge`` of the end level (fractions of the total swing). C1
    is the first step at which the curve has covered half of the
    segment's change.
    """
    if len(series) < 5:
        raise ValueError("need at least 5 points")
    steps = np.array([s for s, _ in series], dtype=np.float64)
    v = smooth([x for _, x in series], width)
    slope = np.diff(v) / np.maximum(np.diff(steps), 1e-12)
    mag = np.abs(slope)
    j = int(np.argmax(mag))
    med = float(np.median(mag))
    if mag[j] <= 1e-12 or mag[j] <= ratio * med:
        return Transition(False)
    sign = 1 if slope[j] > 0 else -1
    u = sign * v                            # rising view
    lo_val, hi_val = u[: j + 1].min(), u[j + 1:].max()
    swing = hi_val - lo_val
    if swing <= 0:
        return Transition(False)
    a = j
    while a > 0 and u[a] > lo_val + edge * swing:
        a -= 1
    b = j + 1
    while b < len(u) - 1 and u[b] < hi_val - edge * swing:
        b += 1
    mid = 0.5 * (u[a] + u[b])
    c = a
    while c < b and u[c] < mid:
        c += 1
    return Transition(True, int(steps[c]), int(steps[a]), int(steps[b]), sign)


# ============================================================ reports

def report_json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True)


def report_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(str(r.get(c, "")) for c in columns))
    return "\n".join(lines) + "\n"
