"""Experiment configs, end-to-end runs, reports and the command line.

A run directory holds::

    config.json          resolved config (enough to rerun)
    build.json           package version stamp
    teacher/             checkpoints + transition.json
    metrics.csv          step,phase,metric,value for teacher and students
    probes.json          probe results
    report/              summary tables and plot data (after ``report``)
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from . import probes as P
from .boolean_tasks import HierarchySpec, ParitySpec, dump_csv, sample_arrays
from .distill import (BooleanTask, CausalGrammarTask, DistillConfig, MaskedGrammarTask, MetricRecord,
                      OptimConfig, build_schedule, distill_train, records_from_csv, records_to_csv)
from .grammar import (Grammar, bundled_grammar, exact_masked_posterior, export_jsonl, apply_masking,
                      load_grammar, sample_sentence)
from .models import (MLP, Checkpoint, Transformer, TransformerConfig, TwoStageConfig, checkpoint_of,
                     config_hash, init_mlp, init_mlp_symmetric, load_checkpoint, model_from_checkpoint,
                     save_checkpoint, train_two_stage)

DEFAULTS: dict[str, Any] = {
    "name": "run",
    "seed": 0,
    "task": {"kind": "parity", "d": 20, "k": 4},
    "teacher": {
        "model": {"kind": "mlp", "width": 2048, "init": "uniform"},
        "optim": {"kind": "sgd", "lr": 0.01, "batch": 1, "weight_decay": 0.0,
                  "lr_schedule": "constant", "warmup": 0, "lr_min": 0.0},
        "steps": 1000,
        "checkpoint_every": 50,
        "procedure": "standard",
    },
    "transition": {"metric": "accuracy", "width": 1},
    "student": {
        "model": {"kind": "mlp", "width": 64, "init": "uniform"},
        "optim": {"kind": "sgd", "lr": 0.01, "batch": 1, "weight_decay": 0.0,
                  "lr_schedule": "constant", "warmup": 0, "lr_min": 0.0},
        "steps": 0,
        "eval_every": 0,
        "eval_steps": [],
        "seeds": [0],
    },
    "strategies": [{"name": "one_shot", "variant": "one_shot", "loss": "dl", "tau": 1e-4}],
    "probes": {},
    "eval": {"size": 4096, "seed": 12345},
    "checkpoint_format": "binary",
}

STAGES = ("teacher", "probes", "students")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, err: Exception):
        super().__init__(f"stage {stage!r} failed: {err}")
        self.stage = stage


# ------------------------------------------------------------------ config

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(raw: dict, base_dir: str | os.PathLike | None = None) -> dict:
    """Fill defaults and validate. Grammar paths are made absolute."""
    cfg = _merge(DEFAULTS, raw)
    if "seed" not in raw:
        raise ConfigError("config must set a seed")
    task = cfg["task"]
    kind = task.get("kind")
    if kind in ("pcfg_masked", "pcfg_causal"):
        ref = task.get("grammar", "tiny")
        if not ref.endswith(".cfg"):
            task["grammar"] = ref
        else:
            p = Path(ref)
            if not p.is_absolute() and base_dir is not None:
                p = Path(base_dir) / p
            if not p.exists():
                raise ConfigError(f"grammar file {ref!r} not found")
            task["grammar"] = str(p.resolve())
        task.setdefault("max_len", 32)
        task.setdefault("mask_rate", 0.3)
        task.setdefault("level", 1)
    elif kind not in ("parity", "hierarchy"):
        raise ConfigError(f"unknown task kind {kind!r}")
    for s in cfg["strategies"]:
        if "name" not in s or "variant" not in s:
            raise ConfigError("each strategy needs a name and a variant")
    return cfg


def bundled_config_path(name: str) -> Path:
    return Path(__file__).with_name("configs") / f"{name}.json"


def load_config(path: str | os.PathLike) -> dict:
    p = Path(path)
    return resolve_config(json.loads(p.read_text()), p.parent)


def config_digest(cfg: dict) -> str:
    return config_hash(cfg)


def set_path(cfg: dict, dotted: str, value) -> dict:
    out = copy.deepcopy(cfg)
    node = out
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return out


# ------------------------------------------------------------------ pieces

def make_task_spec(task: dict):
    if task["kind"] == "parity":
        return ParitySpec(task["d"], task["k"], tuple(task.get("support") or ()))
    if task["kind"] == "hierarchy":
        if task.get("features"):
            return HierarchySpec(task["d"], task["depth"], tuple(map(tuple, task["features"])))
        return HierarchySpec.contiguous(task["d"], task["depth"], task["k"])
    raise ConfigError(f"not a boolean task: {task['kind']!r}")


def make_grammar(task: dict) -> Grammar:
    ref = task["grammar"]
    if ref.endswith(".cfg"):
        return load_grammar(Path(ref).read_text(encoding="utf-8"))
    return bundled_grammar(ref)


def eval_rng(cfg: dict) -> np.random.Generator:
    return np.random.default_rng([cfg["eval"]["seed"], 1])


def make_task(cfg: dict):
    t = cfg["task"]
    n = cfg["eval"]["size"]
    if t["kind"] in ("parity", "hierarchy"):
        spec = make_task_spec(t)
        x, y = sample_arrays(spec, eval_rng(cfg), n)
        return BooleanTask(spec, x, y - 1)
    g = make_grammar(t)
    if t["kind"] == "pcfg_masked":
        task = MaskedGrammarTask(g, t["max_len"], t["mask_rate"])
    else:
        task = CausalGrammarTask(g, t["max_len"], t["level"])
    task.eval_batch = task.sample(eval_rng(cfg), n)
    return task


def num_classes(cfg: dict) -> int:
    return make_task_spec(cfg["task"]).num_classes


def make_model(cfg: dict, mcfg: dict, task, rng: np.random.Generator):
    kind = mcfg.get("kind", "mlp")
    if kind == "mlp":
        d = task.task.d
        C = num_classes(cfg)
        if mcfg.get("init", "uniform") == "symmetric":
            k = cfg["task"].get("k", 2)
            return init_mlp_symmetric(mcfg["width"], d, k, rng, mode=mcfg.get("mode", "scalar"))
        mode = "two_logit" if C == 2 and mcfg.get("mode", "two_logit") == "two_logit" else "multi"
        return init_mlp(mcfg["width"], d, rng, mode=mode, num_classes=C)
    if kind == "transformer":
        tc = TransformerConfig(layers=mcfg.get("layers", 2), heads=mcfg.get("heads", 4),
                               head_dim=mcfg.get("head_dim", 8), vocab=task.model_vocab,
                               max_len=task.max_len,
                               mode="causal" if isinstance(task, CausalGrammarTask) else "bidirectional",
                               num_outputs=task.V, mlp_ratio=mcfg.get("mlp_ratio", 4))
        return Transformer.init(tc, rng)
    raise ConfigError(f"unknown model kind {kind!r}")


def optim_config(d: dict) -> OptimConfig:
    return OptimConfig(**{k: v for k, v in d.items() if k in OptimConfig.__dataclass_fields__})


# ------------------------------------------------------------------ stages

def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _ckpt_name(step: int, fmt: str) -> str:
    return f"step_{step:08d}." + ("bin" if fmt == "binary" else "json")


def train_teacher(cfg: dict, out: Path | None = None) -> tuple[dict[int, Any], list[MetricRecord], P.Transition]:
    """Train the teacher, keeping a snapshot every ``checkpoint_every`` steps."""
    tcfg = cfg["teacher"]
    task = make_task(cfg)
    rng = np.random.default_rng([cfg["seed"], 0])
    model = make_model(cfg, tcfg["model"], task, rng)
    every = tcfg["checkpoint_every"]
    snaps: dict[int, Any] = {}
    records: list[MetricRecord] = []
    if tcfg.get("procedure", "standard") == "two_stage":
        ts = TwoStageConfig(**tcfg["two_stage"], checkpoint_every=every)
        spec = task.task
        from .boolean_tasks import parity_label, to_signed
        traj = train_two_stage(model, ts, lambda x: to_signed(parity_label(spec, x)), rng)
        for step, tensors in traj:
            m = model_from_checkpoint(Checkpoint("mlp", step, tensors, {"config": model.config()}))
            snaps[step] = m
            for name, val in task.evaluate(_as_classifier(m)).items():
                records.append(MetricRecord(step, "teacher", name, val))
        records.append(MetricRecord(ts.T1, "teacher", "end_of_stage1", float(ts.T1)))
    else:
        def keep(t, m):
            snaps[t] = m.copy()

        marks = range(every, tcfg["steps"] + 1, every) if every else ()
        model, records = distill_train(model, None, None, task, DistillConfig(loss="ce"),
                                       optim_config(tcfg["optim"]), tcfg["steps"], rng,
                                       phase="teacher", eval_steps=marks, on_eval=keep)
    series = [(r.step, r.value) for r in records if r.metric == cfg["transition"]["metric"]]
    tr = (P.detect_transition(series, cfg["transition"].get("width", 1)) if len(series) >= 5
          else P.Transition(False))
    if out is not None:
        fmt = cfg["checkpoint_format"]
        for step, m in sorted(snaps.items()):
            blob = save_checkpoint(checkpoint_of(m, step, seed=cfg["seed"],
                                                 config_hash=config_digest(cfg)), binary=fmt == "binary")
            (out / "teacher").mkdir(parents=True, exist_ok=True)
            (out / "teacher" / _ckpt_name(step, fmt)).write_bytes(blob)
        _write(out / "teacher" / "transition.json", json.dumps(tr.to_dict(), sort_keys=True))
        _write(out / "teacher" / "metrics.csv", records_to_csv(records))
    return snaps, records, tr


class _ScalarAsLogits:
    """View a scalar-head MLP as a two-class classifier (f, -f)."""

    def __init__(self, m: MLP):
        self.m = m

    def logits(self, x):
        f = self.m.score(x)
        return np.stack([f, -f], axis=1)


def _as_classifier(m):
    return _ScalarAsLogits(m) if isinstance(m, MLP) and m.mode == "scalar" else m


def load_teacher(out: Path) -> tuple[dict[int, Any], P.Transition]:
    d = out / "teacher"
    if not d.exists():
        raise FileNotFoundError(f"no teacher checkpoints under {d}")
    snaps = {}
    for f in sorted(d.iterdir()):
        if f.name.startswith("step_"):
            ck = load_checkpoint(f.read_bytes())
            snaps[ck.step] = model_from_checkpoint(ck)
    tr = P.Transition(**json.loads((d / "transition.json").read_text()))
    return snaps, tr


def resolve_ref(ref, steps: list[int], tr: P.Transition) -> int:
    """Checkpoint reference -> teacher step.

    ``int``: that step; ``"final"``; ``"C1"``: the detected inflection;
    ``"T@f"``: the checkpoint nearest to fraction f of the detected
    transition segment.
    """
    if isinstance(ref, int):
        if ref not in steps:
            raise ConfigError(f"no teacher checkpoint at step {ref}")
        return ref
    if ref == "final":
        return steps[-1]
    if not tr.found:
        raise ConfigError(f"checkpoint {ref!r} needs a detected transition")
    if ref == "C1":
        return tr.c1
    if isinstance(ref, str) and ref.startswith("T@"):
        target = tr.start + float(ref[2:]) * (tr.end - tr.start)
        return min(steps, key=lambda s: (abs(s - target), s))
    raise ConfigError(f"bad checkpoint reference {ref!r}")


def _schedule(strategy: dict, steps: list[int], tr: P.Transition, student_total: int):
    v = strategy["variant"]
    args = {k: val for k, val in strategy.items() if k not in ("name", "variant", "loss", "tau", "alpha")}
    if "intermediate" in args:
        args["intermediate"] = resolve_ref(args["intermediate"], steps, tr)
    if "checkpoints" in args:
        args["checkpoints"] = [resolve_ref(r, steps, tr) for r in args["checkpoints"]]
    if v == "equal_split":
        args.setdefault("student_total", student_total)
    return build_schedule(v, steps, **args)


def run_students(cfg: dict, snaps: dict[int, Any], tr: P.Transition) -> tuple[list[MetricRecord], dict]:
    scfg = cfg["student"]
    if scfg["steps"] <= 0:
        return [], {}
    task = make_task(cfg)
    steps = sorted(snaps)
    teachers = {s: _as_classifier(m) for s, m in snaps.items()}
    records: list[MetricRecord] = []
    schedules = {}
    for strat in cfg["strategies"]:
        sched = _schedule(strat, steps, tr, scfg["steps"])
        schedules[strat["name"]] = sched.to_dict()
        dc = DistillConfig(tau=strat.get("tau", 1.0), loss=strat.get("loss", "dl"), alpha=strat.get("alpha", 0.0))
        for j, seed in enumerate(scfg["seeds"]):
            rng = np.random.default_rng([cfg["seed"], 2, seed])
            student = make_model(cfg, scfg["model"], task, rng)
            _, recs = distill_train(student, sched, teachers, task, dc, optim_config(scfg["optim"]),
                                    scfg["steps"], rng, eval_every=scfg["eval_every"],
                                    eval_steps=scfg["eval_steps"], phase=f"{strat['name']}/seed{seed}")
            records.extend(recs)
    return records, schedules


def run_probes(cfg: dict, snaps: dict[int, Any], tr: P.Transition) -> dict:
    plan = cfg["probes"]
    out: dict[str, Any] = {}
    steps = sorted(snaps)
    t = cfg["task"]
    if "monomials" in plan and t["kind"] in ("parity", "hierarchy"):
        mp = plan["monomials"]
        spec = make_task_spec(t)
        at = [resolve_ref(r, steps, tr) for r in mp.get("at", ["C1"])]
        if t["kind"] == "parity":
            support = list(spec.support)
        else:
            support = sorted({i for f in spec.features for i in f})
        rows = []
        for s in at:
            rep = P.monomial_correlations(P.class1_probability(_as_classifier(snaps[s])), spec.d,
                                          [(i,) for i in range(spec.d)], mp.get("mode", "auto"),
                                          samples=mp.get("samples", 1 << 16),
                                          rng=np.random.default_rng([cfg["seed"], 3]))
            vals = rep.values
            ins = vals[support]
            off = np.delete(vals, support)
            rows.append({"step": s, "mode": rep.mode, "values": vals.tolist(), "stderr": rep.stderr.tolist(),
                         "in_min": float(ins.min()), "in_mean": float(ins.mean()),
                         "off_max": float(off.max()) if off.size else 0.0,
                         "off_mean": float(off.mean()) if off.size else 0.0,
                         "off_std": float(off.std()) if off.size else 0.0})
        out["monomials"] = rows
    if "m_measures" in plan and t["kind"] in ("pcfg_masked", "pcfg_causal"):
        out["m_measures"] = measure_grammar(cfg, snaps, tr)
    if "oracle" in plan and t["kind"] == "pcfg_masked":
        op = plan["oracle"]
        out["oracle"] = {str(s): oracle_tv(cfg, snaps[s], op.get("sentences", 40))
                         for s in [resolve_ref(r, steps, tr) for r in op.get("at", ["final"])]}
    return out


def _spec_for(cfg: dict, task) -> P.SequenceModelSpec:
    mode = "autoregressive" if cfg["task"]["kind"] == "pcfg_causal" else "bidirectional"
    return P.SequenceModelSpec(mode, task.V, task.pad_id)


def measure_grammar(cfg: dict, snaps: dict[int, Any], tr: P.Transition) -> list[dict]:
    """Median M_robust / M_close per checkpoint and n on a fixed probe set."""
    plan = cfg["probes"]["m_measures"]
    task = make_task(cfg)
    rng = np.random.default_rng([cfg["seed"], 4])
    sents, _ = task.sentences(rng, plan.get("sentences", 64))
    lens = (sents != task.pad_id).sum(axis=1)
    lo = 1 if cfg["task"]["kind"] == "pcfg_causal" else 0
    pos = np.array([rng.integers(lo, L) for L in lens])
    steps = sorted(snaps)
    at = plan.get("at", "all")
    chosen = steps if at == "all" else [resolve_ref(r, steps, tr) for r in at]
    spec = _spec_for(cfg, task)
    q = plan.get("percentile", 50.0)
    rows = []
    for s in chosen:
        for n in plan.get("n", [3]):
            for kind in ("robust", "close"):
                vals = P.m_measure_batch(snaps[s], spec, sents, pos, n, kind)
                rows.append({"step": s, "n": n, "measure": kind, "value": P.percentile(vals, q)})
    return rows


def oracle_tv(cfg: dict, model, sentences: int = 40) -> float:
    """Median TV between model and exact posteriors at masked positions."""
    task = make_task(cfg)
    rng = np.random.default_rng([cfg["seed"], 5])
    batch = task.sample(rng, sentences)
    # every masked slot shown as [mask]
    inp = np.where(batch.select, task.mask_id, batch.tokens)
    logits = model.logits(inp, batch.hidden)
    tvs = []
    for b in range(sentences):
        L = int((~batch.hidden[b]).sum())
        obs = [None if batch.select[b, j] else int(batch.tokens[b, j]) for j in range(L)]
        for i in np.flatnonzero(batch.select[b]):
            exact = exact_masked_posterior(task.g, obs, int(i))
            z = logits[b, i]
            p = np.exp(z - np.logaddexp.reduce(z))
            tvs.append(P.tv(p, exact))
    return float(np.median(tvs))


def build_stamp() -> dict:
    return {"package": "progdistill", "version": __version__}


def run_experiment(cfg: dict, out: str | os.PathLike, stages=STAGES) -> Path:
    """Run the configured stages into ``out``; returns the run directory."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", json.dumps(cfg, indent=2, sort_keys=True))
    _write(out / "build.json", json.dumps(build_stamp(), sort_keys=True))
    snaps, tr, records = None, None, []
    if "teacher" in stages:
        try:
            snaps, records, tr = train_teacher(cfg, out)
        except Exception as err:
            raise StageError("teacher", err) from err
    else:
        snaps, tr = load_teacher(out)
        records = records_from_csv((out / "teacher" / "metrics.csv").read_text())
    # keep earlier student curves when only some stages rerun
    previous = []
    if "students" not in stages and (out / "metrics.csv").exists():
        previous = [r for r in records_from_csv((out / "metrics.csv").read_text()) if r.phase != "teacher"]
    if "probes" in stages and cfg["probes"]:
        try:
            res = run_probes(cfg, snaps, tr)
        except Exception as err:
            raise StageError("probes", err) from err
        _write(out / "probes.json", json.dumps(res, indent=1, sort_keys=True))
    if "students" in stages:
        try:
            srecs, schedules = run_students(cfg, snaps, tr)
        except Exception as err:
            raise StageError("students", err) from err
        records = records + srecs
        if schedules:
            _write(out / "schedules.json", json.dumps(schedules, indent=1, sort_keys=True))
    _write(out / "metrics.csv", records_to_csv(records + previous))
    return out


# ------------------------------------------------------------------ report

def _series(records: list[MetricRecord], metric: str) -> dict[str, list[tuple[int, float]]]:
    out: dict[str, list[tuple[int, float]]] = {}
    for r in records:
        if r.metric == metric:
            out.setdefault(r.phase, []).append((r.step, r.value))
    return out


def strategy_table(records: list[MetricRecord], metric: str = "accuracy") -> dict[str, list[tuple[int, float, float]]]:
    """Per strategy: (step, mean over seeds, min over seeds)."""
    by: dict[str, dict[int, list[float]]] = {}
    for phase, pts in _series(records, metric).items():
        if phase == "teacher":
            continue
        name = phase.split("/")[0]
        for s, v in pts:
            by.setdefault(name, {}).setdefault(s, []).append(v)
    return {n: [(s, float(np.mean(v)), float(np.min(v))) for s, v in sorted(d.items())] for n, d in by.items()}


def report(run_dir: str | os.PathLike) -> dict[str, str]:
    """Write summary tables under ``run_dir/report``; returns {file: text}."""
    run = Path(run_dir)
    mpath = run / "metrics.csv"
    if not mpath.exists():
        raise FileNotFoundError(f"missing {mpath}; expected metrics.csv (and optionally probes.json)")
    records = records_from_csv(mpath.read_text())
    files: dict[str, str] = {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "step", "mean_accuracy", "min_accuracy"])
    for name, rows in sorted(strategy_table(records).items()):
        for s, m, lo in rows:
            w.writerow([name, s, repr(m), repr(lo)])
    files["strategies.csv"] = buf.getvalue()
    teacher = _series(records, "accuracy").get("teacher", []) or _series(records, "loss").get("teacher", [])
    files["teacher.dat"] = "# step value\n" + "".join(f"{s} {v!r}\n" for s, v in teacher)
    probes_path = run / "probes.json"
    if probes_path.exists():
        pr = json.loads(probes_path.read_text())
        if "monomials" in pr:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["step", "in_min", "in_mean", "off_mean", "off_std", "off_max"])
            for r in pr["monomials"]:
                w.writerow([r["step"], r["in_min"], r["in_mean"], r["off_mean"], r["off_std"], r["off_max"]])
            files["correlations.csv"] = buf.getvalue()
        if "m_measures" in pr:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["step", "n", "measure", "value"])
            for r in pr["m_measures"]:
                w.writerow([r["step"], r["n"], r["measure"], r["value"]])
            files["m_measures.csv"] = buf.getvalue()
    for name, text in files.items():
        _write(run / "report" / name, text)
    return files


def group_correlations(values: np.ndarray, support: list[int]) -> dict[str, float]:
    """In-support mean and off-support mean/std of per-coordinate correlations."""
    v = np.asarray(values, dtype=np.float64)
    off = np.delete(v, support)
    return {"in_mean": float(v[support].mean()), "off_mean": float(off.mean()), "off_std": float(off.std())}


# ------------------------------------------------------------------ CLI

def _gen(cfg: dict, out: Path, n: int) -> Path:
    t = cfg["task"]
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([cfg["seed"], 6])
    if t["kind"] in ("parity", "hierarchy"):
        x, y = sample_arrays(make_task_spec(t), rng, n)
        path = out / "data.csv"
        dump_csv(path, x, y)
        return path
    g = make_grammar(t)
    exs = []
    for _ in range(n):
        words, _ = sample_sentence(g, rng)
        exs.append(apply_masking(g.encode(words), t["mask_rate"], rng, g.vocab_size))
    path = out / "masked.jsonl"
    export_jsonl(exs, path)
    return path


def sweep(cfg: dict, out: Path) -> list[dict]:
    """Run the experiment once per value of ``cfg['sweep']``; return final accuracies."""
    sw = cfg.get("sweep")
    if not sw:
        raise ConfigError("config has no 'sweep' section (path + values)")
    rows = []
    for i, val in enumerate(sw["values"]):
        sub = set_path(cfg, sw["path"], val)
        sub.pop("sweep")
        run = run_experiment(sub, out / f"sweep_{i:02d}")
        recs = records_from_csv((run / "metrics.csv").read_text())
        table = strategy_table(recs)
        final = {n: rows_[-1][1] for n, rows_ in table.items()} if table else {}
        if not final:
            t = _series(recs, "accuracy").get("teacher", [])
            final = {"teacher": t[-1][1]} if t else {}
        rows.append({"value": val, "final": final})
    _write(out / "sweep.json", json.dumps(rows, indent=1, sort_keys=True))
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="progdistill", description="Progressive distillation experiments.")
    p.add_argument("--config", help="experiment JSON config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default="runs/latest", help="run directory")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", help="emit a data sample or masked corpus")
    g.add_argument("-n", type=int, default=1000)
    sub.add_parser("train-teacher", help="train the teacher and save checkpoints")
    sub.add_parser("distill", help="train students from saved teacher checkpoints")
    sub.add_parser("probe", help="run the probe plan on saved checkpoints")
    sub.add_parser("measure", help="n-gram measures on saved grammar checkpoints")
    sub.add_parser("report", help="summarize a run directory")
    sub.add_parser("sweep", help="rerun over the config's sweep grid")
    sub.add_parser("run", help="teacher, probes and students in one go")
    return p


def _load(args) -> dict:
    if not args.config:
        raise SystemExit("--config is required for this command")
    path = Path(args.config)
    if not path.exists() and bundled_config_path(args.config).exists():
        path = bundled_config_path(args.config)
    raw = json.loads(path.read_text())
    if args.seed is not None:
        raw["seed"] = args.seed
    return resolve_config(raw, path.parent)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    if args.command == "report":
        for name in report(out):
            print(out / "report" / name)
        return 0
    cfg = _load(args)
    if args.command == "gen":
        print(_gen(cfg, out, args.n))
    elif args.command == "train-teacher":
        run_experiment(cfg, out, stages=("teacher",))
        print(out)
    elif args.command == "distill":
        run_experiment(cfg, out, stages=("students",))
        print(out / "metrics.csv")
    elif args.command in ("probe", "measure"):
        if args.command == "measure":
            cfg["probes"] = {k: v for k, v in cfg["probes"].items() if k in ("m_measures", "oracle")}
        run_experiment(cfg, out, stages=("probes",))
        print(out / "probes.json")
    elif args.command == "sweep":
        for row in sweep(cfg, out):
            print(json.dumps(row, sort_keys=True))
    elif args.command == "run":
        run_experiment(cfg, out)
        print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
