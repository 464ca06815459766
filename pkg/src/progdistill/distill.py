"""Distillation losses, teacher schedules and the student training loop."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from . import engine as E
from .engine import Tensor
from .grammar import Grammar, ParseTree, boundary_positions, mask_arrays, sample_sentence

INF = math.inf


# ------------------------------------------------------------------ losses

def soften(logits, tau: float) -> np.ndarray:
    """softmax(logits / tau) on the last axis; one-hot argmax for tiny tau."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return E.softmax(Tensor(np.asarray(logits, dtype=np.float64)), tau).data


def _targets(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"class index outside [0, {n_classes})")
    return y


def loss_ce(student_logits: Tensor, y) -> Tensor:
    """Mean of -log p_S[y] over the batch; ``y`` holds 0-based class indices."""
    lp = E.log_softmax(student_logits)
    lp = lp.reshape(-1, lp.shape[-1])
    y = _targets(y, lp.shape[-1]).reshape(-1)
    return -lp[np.arange(len(y)), y].mean()


def _kl_rows(p_t: np.ndarray, student_logits: Tensor) -> Tensor:
    """Per-row KL(p_t || softmax(student)), with 0 log 0 = 0."""
    lp = E.log_softmax(student_logits)
    safe = np.where(p_t > 0, p_t, 1.0)
    ent = np.where(p_t > 0, p_t * np.log(safe), 0.0).sum(axis=-1)
    cross = (lp * p_t).sum(axis=-1)
    return ent - cross


def loss_dl(student_logits: Tensor, teacher_logits, tau: float) -> Tensor:
    """Mean KL(p_T(.; tau) || p_S) over the batch."""
    t = np.asarray(teacher_logits, dtype=np.float64)
    if t.shape != student_logits.shape:
        raise ValueError(f"class-count mismatch: teacher {t.shape} vs student {student_logits.shape}")
    return _kl_rows(soften(t, tau), student_logits).mean()


def loss_hinge_mix(alpha: float, f_s: Tensor, y, f_t) -> Tensor:
    """alpha * max(0, 1 - f_S y) + (1 - alpha) * max(0, 1 - f_S f_T), averaged."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    y = np.asarray(y, dtype=np.float64)
    f_t = np.asarray(f_t, dtype=np.float64)
    return (alpha * E.relu(1.0 - f_s * y) + (1.0 - alpha) * E.relu(1.0 - f_s * f_t)).mean()


def _position_average(per_pos: Tensor, mask: np.ndarray) -> Tensor:
    """Average over selected positions within each row, then over rows that have any."""
    mask = np.asarray(mask, dtype=bool).reshape(per_pos.shape)
    counts = mask.sum(axis=-1)
    rows = counts > 0
    if not rows.any():
        raise ValueError("no positions selected for the loss")
    w = np.where(mask, 1.0, 0.0) / np.maximum(counts, 1)[..., None]
    return (per_pos * w).sum() * (1.0 / rows.sum())


def loss_masked(student_logits: Tensor, targets, masked, mode: str = "ce",
                teacher_logits=None, tau: float = 1.0) -> Tensor:
    """Masked-prediction loss: per sentence, the mean over its masked positions
    of KL(one-hot target or softened teacher || p_S); then the mean over
    sentences. Inputs are (B, h, C) logits and (B, h) targets / mask."""
    masked = np.asarray(masked, dtype=bool)
    if masked.ndim == 1:
        masked = masked[None]
    logits = student_logits if student_logits.ndim == 3 else student_logits.reshape(1, *student_logits.shape)
    return _per_position_loss(logits, targets, masked, mode, teacher_logits, tau)


def _per_position_loss(logits: Tensor, targets, mask, mode, teacher_logits, tau) -> Tensor:
    C = logits.shape[-1]
    if not np.asarray(mask).any():
        raise ValueError("empty masked set")
    if mode == "ce":
        if teacher_logits is not None:
            raise ValueError("ce mode takes no teacher logits")
        t = _targets(np.asarray(targets).reshape(logits.shape[:-1]), C)
        p = np.zeros(logits.shape)
        np.put_along_axis(p, t[..., None], 1.0, axis=-1)
    elif mode == "dl":
        if teacher_logits is None:
            raise ValueError("dl mode needs teacher logits")
        tl = np.asarray(teacher_logits, dtype=np.float64).reshape(logits.shape)
        p = soften(tl, tau)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return _position_average(_kl_rows(p, logits), mask)


def level_mask(trees: Sequence[ParseTree], level: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    """(B, h) boolean mask of level boundaries and per-sentence counts.

    Sentences whose trees are too shallow for ``level`` contribute no
    positions (count 0).
    """
    out = np.zeros((len(trees), h), dtype=bool)
    for b, tree in enumerate(trees):
        if 1 <= level <= tree.depth - 1:
            for pos, _ in boundary_positions(tree, level):
                out[b, pos] = True
    return out, out.sum(axis=1)


def loss_level_boundary(student_logits: Tensor, targets, trees: Sequence[ParseTree], level: int,
                        mode: str = "ce", teacher_logits=None, tau: float = 1.0) -> Tensor:
    """Next-token loss restricted to level-``level`` boundary tokens.

    ``student_logits[:, j]`` must be the causal prediction of token j
    (models see a shifted input). Sentences with no boundary at this level
    are skipped.
    """
    logits = student_logits if student_logits.ndim == 3 else student_logits.reshape(1, *student_logits.shape)
    mask, _ = level_mask(trees, level, logits.shape[1])
    return _per_position_loss(logits, targets, mask, mode, teacher_logits, tau)


# --------------------------------------------------------------- schedules

@dataclass
class TeacherSchedule:
    """Checkpoint ``checkpoints[i]`` supervises for ``durations[i]`` steps;
    past the total the last checkpoint stays on."""

    checkpoints: list
    durations: list[float]

    def __post_init__(self):
        if not self.checkpoints:
            raise ValueError("schedule needs at least one checkpoint")
        if len(self.checkpoints) != len(self.durations):
            raise ValueError("checkpoints and durations differ in length")
        if any(d < 0 for d in self.durations):
            raise ValueError("durations must be non-negative")
        self._ends = np.cumsum(np.asarray(self.durations, dtype=np.float64))

    def to_dict(self) -> dict:
        return {"checkpoints": list(self.checkpoints),
                "durations": [d if math.isfinite(d) else "inf" for d in self.durations]}


def teacher_at_step(schedule: TeacherSchedule, t: int) -> int:
    """Index into ``schedule.checkpoints`` of the teacher used at student step t."""
    i = int(np.searchsorted(schedule._ends, t, side="right"))
    return min(i, len(schedule.checkpoints) - 1)


def _pick(available: Sequence, n: int) -> list:
    if n > len(available):
        raise ValueError(f"asked for {n} checkpoints but only {len(available)} exist")
    if n == len(available):
        return list(available)
    K = len(available) - 1
    inter = [available[int(round(i * K / n))] for i in range(1, n)]
    return inter + [available[-1]]


SCHEDULE_VARIANTS = ("one_shot", "explicit", "two_shot", "n_t_progressive", "equal_split", "kappa_split")


def build_schedule(variant: str, available: Sequence, **args) -> TeacherSchedule:
    """Build a schedule over ``available`` checkpoints (ordered, final last).

    Variants and their arguments: ``one_shot``; ``explicit(checkpoints,
    durations)``; ``n_t_progressive(N, T)``; ``equal_split(N,
    student_total)``; ``kappa_split(N, kappa, T0)``; ``two_shot(intermediate,
    T)``.
    """
    if variant not in SCHEDULE_VARIANTS:
        raise ValueError(f"unknown schedule variant {variant!r}")
    available = list(available)
    if not available:
        raise ValueError("no checkpoints available")
    final = available[-1]
    if variant == "one_shot":
        return TeacherSchedule([final], [INF])
    if variant == "explicit":
        return TeacherSchedule(list(args["checkpoints"]), [float(d) for d in args["durations"]])
    if variant == "two_shot":
        T = args["T"]
        if T < 0:
            raise ValueError("T must be non-negative")
        return TeacherSchedule([args["intermediate"], final], [float(T), INF])
    N = int(args["N"])
    if N < 1:
        raise ValueError("N must be positive")
    chosen = _pick(available, N)
    if variant == "n_t_progressive":
        T = float(args["T"])
        if T <= 0:
            raise ValueError("T must be positive")
        return TeacherSchedule(chosen, [T] * (N - 1) + [INF])
    if variant == "equal_split":
        total = int(args["student_total"])
        if total <= 0:
            raise ValueError("student_total must be positive")
        base, extra = divmod(total, N)
        durs = [float(base + (i < extra)) for i in range(N)]
        durs[-1] = INF
        return TeacherSchedule(chosen, durs)
    if variant == "kappa_split":
        kappa = float(args["kappa"])
        if not 0.0 < kappa <= 1.0:
            raise ValueError("kappa must lie in (0, 1]")
        per = kappa * float(args["T0"]) / N
        return TeacherSchedule(chosen, [per] * (N - 1) + [INF])
    raise ValueError(f"unknown schedule variant {variant!r}")


def steps_per_checkpoint(schedule: TeacherSchedule, total: int) -> list[int]:
    """How many of the first ``total`` student steps each checkpoint supervises."""
    counts = [0] * len(schedule.checkpoints)
    for t in range(total):
        counts[teacher_at_step(schedule, t)] += 1
    return counts


# ------------------------------------------------------------------ metrics

@dataclass(frozen=True)
class MetricRecord:
    step: int
    phase: str
    metric: str
    value: float


def records_to_csv(records: Iterable[MetricRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "phase", "metric", "value"])
    for r in records:
        w.writerow([r.step, r.phase, r.metric, repr(float(r.value))])
    return buf.getvalue()


def records_from_csv(text: str) -> list[MetricRecord]:
    rows = csv.DictReader(io.StringIO(text))
    return [MetricRecord(int(r["step"]), r["phase"], r["metric"], float(r["value"])) for r in rows]


# -------------------------------------------------------------- tasks

class DistillTask(Protocol):
    def sample(self, rng: np.random.Generator, n: int): ...
    def loss(self, student, batch, teacher, config: DistillConfig) -> Tensor: ...
    def evaluate(self, model) -> dict[str, float]: ...


@dataclass
class DistillConfig:
    tau: float = 1.0
    loss: str = "dl"            # ce | dl | hinge_mix
    alpha: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.loss not in ("ce", "dl", "hinge_mix"):
            raise ValueError(f"unknown loss kind {self.loss!r}")


@dataclass
class OptimConfig:
    kind: str = "sgd"           # sgd | adam
    lr: float = 0.01
    batch: int = 1
    weight_decay: float = 0.0
    lr_schedule: str = "constant"   # constant | cosine
    warmup: int = 0
    lr_min: float = 0.0

    def lr_at(self, step: int, total: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        return E.cosine_lr(step, max(total, 1), self.lr, self.lr_min, min(self.warmup, max(total - 1, 0)))


class Optimizer:
    def __init__(self, params: list[Tensor], config: OptimConfig):
        self.params = params
        self.config = config
        self.adam = E.Adam(params, weight_decay=config.weight_decay) if config.kind == "adam" else None
        if config.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {config.kind!r}")

    def step(self, lr: float) -> None:
        if self.adam is not None:
            self.adam.step(lr)
        else:
            E.sgd_step(self.params, lr, self.config.weight_decay)


@dataclass
class BooleanTask:
    """Classification of boolean inputs; models emit one logit per class."""

    task: object                # ParitySpec | HierarchySpec
    eval_x: np.ndarray = field(default=None, repr=False)
    eval_y: np.ndarray = field(default=None, repr=False)

    def sample(self, rng, n):
        from .boolean_tasks import sample_arrays
        x, y = sample_arrays(self.task, rng, n)
        return x, y - 1

    def loss(self, student, batch, teacher, config: DistillConfig) -> Tensor:
        x, y = batch
        out = student(x)
        if config.loss == "ce" or teacher is None:
            return loss_ce(out, y)
        t = teacher.logits(x)
        if config.loss == "hinge_mix":
            ys = np.where(y == 0, 1.0, -1.0)
            f_s = out[:, 0] if out.ndim == 2 else out
            f_t = t[:, 0] if t.ndim == 2 else t
            return loss_hinge_mix(config.alpha, f_s, ys, f_t)
        return loss_dl(out, t, config.tau)

    def evaluate(self, model) -> dict[str, float]:
        logits = model.logits(self.eval_x)
        pred = np.argmax(logits, axis=-1)
        lp = logits - np.logaddexp.reduce(logits, axis=-1, keepdims=True)
        return {"accuracy": float((pred == self.eval_y).mean()),
                "loss": float(-lp[np.arange(len(pred)), self.eval_y].mean())}


@dataclass
class GrammarBatch:
    tokens: np.ndarray          # (B, h) target ids, padded
    inputs: np.ndarray          # (B, h) model inputs
    hidden: np.ndarray          # (B, h) padding keys
    select: np.ndarray          # (B, h) positions in the loss
    trees: list = field(default_factory=list)


class MaskedGrammarTask:
    """Masked-token prediction on PCFG sentences (bidirectional models).

    Vocabulary layout: terminals 0..V-1, then [mask] = V, [pad] = V+1.
    """

    def __init__(self, grammar: Grammar, max_len: int, mask_rate: float = 0.3,
                 eval_batch: GrammarBatch | None = None):
        self.g = grammar
        self.V = grammar.vocab_size
        self.mask_id, self.pad_id = self.V, self.V + 1
        self.max_len = max_len
        self.p = mask_rate
        self.eval_batch = eval_batch

    @property
    def model_vocab(self) -> int:
        return self.V + 2

    def sentences(self, rng, n):
        toks = np.full((n, self.max_len), self.pad_id, dtype=np.int64)
        trees = []
        for b in range(n):
            while True:
                words, tree = sample_sentence(self.g, rng)
                if len(words) <= self.max_len:
                    break
            toks[b, :len(words)] = self.g.encode(words)
            trees.append(tree)
        return toks, trees

    def sample(self, rng, n) -> GrammarBatch:
        toks, trees = self.sentences(rng, n)
        valid = toks != self.pad_id
        inp, in_m, _ = mask_arrays(toks, self.p, rng, self.V, self.mask_id, valid)
        # every sentence needs at least one masked slot
        for b in np.flatnonzero(~in_m.any(axis=1)):
            j = int(rng.integers(valid[b].sum()))
            in_m[b, j] = True
            inp[b, j] = self.mask_id
        return GrammarBatch(toks, inp, ~valid, in_m, trees)

    def loss(self, student, batch: GrammarBatch, teacher, config: DistillConfig) -> Tensor:
        out = student(batch.inputs, batch.hidden)
        if config.loss == "ce" or teacher is None:
            return loss_masked(out, np.where(batch.select, batch.tokens, 0), batch.select, "ce")
        t = teacher.logits(batch.inputs, batch.hidden)
        return loss_masked(out, None, batch.select, "dl", t, config.tau)

    def evaluate(self, model) -> dict[str, float]:
        b = self.eval_batch
        logits = model.logits(b.inputs, b.hidden)
        pred = np.argmax(logits, axis=-1)
        lp = logits - np.logaddexp.reduce(logits, axis=-1, keepdims=True)
        tgt = np.where(b.select, b.tokens, 0)
        nll = -np.take_along_axis(lp, tgt[..., None], axis=-1)[..., 0]
        return {"accuracy": float((pred == b.tokens)[b.select].mean()),
                "loss": float(nll[b.select].mean())}


class CausalGrammarTask(MaskedGrammarTask):
    """Next-token prediction with the loss on level-``level`` boundaries.

    Vocabulary: terminals, then [bos] = V, [pad] = V+1. The model reads
    ``[bos] x_0 .. x_{h-2}`` so output j predicts token j.
    """

    def __init__(self, grammar: Grammar, max_len: int, level: int = 1,
                 eval_batch: GrammarBatch | None = None):
        super().__init__(grammar, max_len, 0.5, eval_batch)
        self.level = level
        self.bos_id = self.V

    def sample(self, rng, n) -> GrammarBatch:
        toks, trees = self.sentences(rng, n)
        valid = toks != self.pad_id
        inp = np.concatenate([np.full((n, 1), self.bos_id), toks[:, :-1]], axis=1)
        sel, _ = level_mask(trees, self.level, self.max_len)
        return GrammarBatch(toks, inp, ~np.concatenate([np.ones((n, 1), bool), valid[:, :-1]], 1),
                            sel & valid, trees)

    def loss(self, student, batch: GrammarBatch, teacher, config: DistillConfig) -> Tensor:
        out = student(batch.inputs, batch.hidden)
        keep = batch.select.any(axis=1)
        if not keep.all():
            out = out[keep]
        sel = batch.select[keep]
        if config.loss == "ce" or teacher is None:
            return _per_position_loss(out, np.where(sel, batch.tokens[keep], 0), sel, "ce", None, 1.0)
        t = teacher.logits(batch.inputs, batch.hidden)[keep]
        return _per_position_loss(out, None, sel, "dl", t, config.tau)


# --------------------------------------------------------------- training

def distill_train(student, schedule: TeacherSchedule | None, teachers: dict | Sequence | None,
                  task, config: DistillConfig, optim: OptimConfig, steps: int,
                  rng: np.random.Generator, eval_every: int = 0, phase: str = "student",
                  eval_steps: Iterable[int] = (), on_eval: Callable | None = None,
                  ) -> tuple[object, list[MetricRecord]]:
    """Train ``student`` for ``steps`` optimizer steps.

    At step t the teacher is ``teachers[schedule.checkpoints[i]]`` with
    ``i = teacher_at_step(schedule, t)``; with ``config.loss == "ce"`` the
    teacher is ignored and ground-truth labels supervise. Evaluation runs
    at step 0, every ``eval_every`` steps, at each of ``eval_steps`` and at
    the end.
    """
    records: list[MetricRecord] = []
    params = student.parameters()
    opt = Optimizer(params, optim)
    marks = set(int(s) for s in eval_steps)

    def do_eval(t):
        for name, val in task.evaluate(student).items():
            records.append(MetricRecord(t, phase, name, val))
        if on_eval is not None:
            on_eval(t, student)

    if config.loss != "ce" and (schedule is None or teachers is None):
        raise ValueError("distillation losses need a schedule and teachers")
    do_eval(0)
    for t in range(steps):
        teacher = None
        if config.loss != "ce":
            ref = schedule.checkpoints[teacher_at_step(schedule, t)]
            try:
                teacher = teachers[ref]
            except (KeyError, IndexError) as err:
                raise RuntimeError(f"teacher checkpoint {ref!r} unavailable at step {t}") from err
        batch = task.sample(rng, optim.batch)
        E.zero_grad(params)
        loss = task.loss(student, batch, teacher, config)
        E.backward(loss)
        opt.step(optim.lr_at(t, steps))
        done = t + 1
        if (eval_every and done % eval_every == 0) or done in marks or done == steps:
            do_eval(done)
    return student, records
