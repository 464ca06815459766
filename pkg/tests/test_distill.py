import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from progdistill import engine as E
from progdistill.boolean_tasks import ParitySpec, parity_label, sample_inputs
from progdistill.distill import (
    BooleanTask, CausalGrammarTask, DistillConfig, MaskedGrammarTask, MetricRecord, OptimConfig,
    TeacherSchedule, build_schedule, distill_train, level_mask, loss_ce, loss_dl, loss_hinge_mix,
    loss_level_boundary, loss_masked, records_from_csv, records_to_csv, soften, steps_per_checkpoint,
    teacher_at_step,
)
from progdistill.engine import Tensor
from progdistill.grammar import bundled_grammar, load_grammar, sample_sentence
from progdistill.models import Transformer, TransformerConfig, init_mlp

from gradcheck import max_rel_error

logit_rows = arrays(np.float64, (3, 4), elements=st.floats(-8, 8, allow_nan=False))


# ------------------------------------------------------------------ soften

def test_soften_examples():
    assert np.allclose(soften([0.0, 0.0], 1.0), [0.5, 0.5])
    assert np.array_equal(soften([2.0, 1.0], 1e-7), [1.0, 0.0])
    assert np.array_equal(soften([1.0, 3.0, 3.0], 1e-9), [0.0, 1.0, 0.0])


def test_soften_rejects_nonpositive_tau():
    with pytest.raises(ValueError):
        soften([1.0], 0.0)


@settings(max_examples=50, deadline=None)
@given(logit_rows, st.floats(-50, 50), st.sampled_from([0.1, 1.0, 1e-4, 10.0]))
def test_soften_shift_invariant(x, c, tau):
    assert np.allclose(soften(x + c, tau), soften(x, tau), atol=1e-12, rtol=0)


# ------------------------------------------------------------------ losses

def test_ce_examples():
    assert loss_ce(Tensor([[60.0, -60.0]]), [0]).item() < 1e-12
    assert abs(loss_ce(Tensor([[0.3, 0.3]]), [1]).item() - math.log(2)) < 1e-15
    z = np.array([[0.2, -1.0, 3.0], [1.5, 0.0, 0.1]])
    y = np.array([2, 0])
    want = -np.mean([z[i, y[i]] - np.log(np.exp(z[i]).sum()) for i in range(2)])
    assert abs(loss_ce(Tensor(z), y).item() - want) <= 1e-12


def test_ce_rejects_bad_class():
    with pytest.raises(ValueError):
        loss_ce(Tensor([[0.0, 1.0]]), [2])


def test_dl_examples():
    z = np.array([[0.5, -0.2, 1.0]])
    assert abs(loss_dl(Tensor(z), z, 1.0).item()) <= 1e-12
    with pytest.raises(ValueError):
        loss_dl(Tensor(z), np.zeros((1, 2)), 1.0)


@settings(max_examples=50, deadline=None)
@given(logit_rows, logit_rows)
def test_dl_hard_labels_equal_ce(s, t):
    y = np.argmax(t, axis=-1)
    assert abs(loss_dl(Tensor(s), t, 1e-7).item() - loss_ce(Tensor(s), y).item()) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(logit_rows, logit_rows, st.sampled_from([0.5, 1.0, 3.0]))
def test_dl_nonnegative(s, t, tau):
    val = loss_dl(Tensor(s), t, tau).item()
    assert val >= -1e-12
    if not np.allclose(soften(t, tau), soften(s, 1.0), atol=1e-9):
        assert val > 0


def test_hinge_mix_examples():
    one = Tensor([1.0])
    assert loss_hinge_mix(1.0, one, [1.0], [0.3]).item() == 0.0
    for alpha in (0.0, 0.3, 1.0):
        assert loss_hinge_mix(alpha, Tensor([0.0]), [-1.0], [5.0]).item() == 1.0
    assert loss_hinge_mix(0.0, Tensor([2.0]), [1.0], [2.0]).item() == 0.0
    with pytest.raises(ValueError):
        loss_hinge_mix(1.5, one, [1.0], [1.0])


def test_masked_single_position_reduces():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(1, 5, 4))
    t = rng.normal(size=(1, 5, 4))
    tok = rng.integers(0, 4, size=(1, 5))
    m = np.zeros((1, 5), bool)
    m[0, 2] = True
    assert abs(loss_masked(Tensor(z), tok, m).item() - loss_ce(Tensor(z[0, 2:3]), tok[0, 2:3]).item()) <= 1e-12
    got = loss_masked(Tensor(z), None, m, "dl", t, 2.0).item()
    assert abs(got - loss_dl(Tensor(z[0, 2:3]), t[0, 2:3], 2.0).item()) <= 1e-12


def test_masked_perfect_student_and_average():
    tok = np.array([[0, 2, 1, 3]])
    m = np.array([[True, False, True, True]])
    perfect = np.full((1, 4, 4), -60.0)
    perfect[0, np.arange(4), tok[0]] = 60.0
    assert loss_masked(Tensor(perfect), tok, m).item() < 1e-12
    z = np.random.default_rng(1).normal(size=(1, 4, 4))
    per = [loss_ce(Tensor(z[0, i:i + 1]), tok[0, i:i + 1]).item() for i in (0, 2, 3)]
    assert abs(loss_masked(Tensor(z), tok, m).item() - np.mean(per)) <= 1e-12


def test_masked_errors():
    z = Tensor(np.zeros((1, 3, 2)))
    with pytest.raises(ValueError):
        loss_masked(z, np.zeros((1, 3), int), np.zeros((1, 3), bool))
    with pytest.raises(ValueError):
        loss_masked(z, None, np.ones((1, 3), bool), "dl")


def _trees(name, n, seed=0):
    g = bundled_grammar(name)
    rng = np.random.default_rng(seed)
    return g, [sample_sentence(g, rng) for _ in range(n)]


def test_level_one_is_autoregressive_loss_on_single_word_preterminals():
    g, pairs = _trees("cfg3b_style", 3)
    trees = [t for _, t in pairs]
    h = max(len(w) for w, _ in pairs)
    tok = np.zeros((3, h), dtype=int)
    valid = np.zeros((3, h), bool)
    for b, (w, _) in enumerate(pairs):
        tok[b, :len(w)] = g.encode(w)
        valid[b, :len(w)] = True
    z = np.random.default_rng(2).normal(size=(3, h, g.vocab_size))
    mask, _ = level_mask(trees, 1, h)
    assert np.array_equal(mask, valid)
    want = np.mean([loss_ce(Tensor(z[b, :len(w)]), tok[b, :len(w)]).item() for b, (w, _) in enumerate(pairs)])
    assert abs(loss_level_boundary(Tensor(z), tok, trees, 1).item() - want) <= 1e-12


def test_boundary_sets_nest_across_levels():
    _, pairs = _trees("cfg3b_style", 20, seed=4)
    trees = [t for _, t in pairs]
    h = max(len(w) for w, _ in pairs)
    masks = [level_mask(trees, lv, h)[0] for lv in range(1, 7)]
    for lo, hi in zip(masks, masks[1:]):
        assert np.all(lo >= hi)


def test_single_boundary_sentence_equals_that_position():
    g = load_grammar("root: S\nterminals: a b\nS -> A [1.0]\nA -> a b a [1.0]\n")
    _, tree = sample_sentence(g, np.random.default_rng(0))
    mask, counts = level_mask([tree], 1, 3)
    assert counts[0] == 1 and mask[0, 2]
    z = np.random.default_rng(3).normal(size=(1, 3, 2))
    tok = np.array([[0, 1, 0]])
    got = loss_level_boundary(Tensor(z), tok, [tree], 1).item()
    assert abs(got - loss_ce(Tensor(z[0, 2:3]), tok[0, 2:3]).item()) <= 1e-12


def test_level_without_boundaries_is_skipped():
    _, pairs = _trees("tiny", 1)
    tree = pairs[0][1]
    _, counts = level_mask([tree], 9, 30)
    assert counts[0] == 0


# ---------------------------------------------------------- loss gradients

def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    s = Tensor(rng.normal(size=(4, 3)), True)
    t = rng.normal(size=(4, 3))
    y = rng.integers(0, 3, size=4)
    f = Tensor(rng.normal(size=5), True)
    ys, ft = np.sign(rng.normal(size=5)), rng.normal(size=5) * 0.3
    seq = Tensor(rng.normal(size=(2, 5, 3)), True)
    tok = rng.integers(0, 3, size=(2, 5))
    m = rng.random((2, 5)) < 0.5
    m[:, 0] = True
    cases = [
        (lambda: loss_ce(s, y), s),
        (lambda: loss_dl(s, t, 0.7), s),
        (lambda: loss_hinge_mix(0.4, f, ys, ft), f),
        (lambda: loss_masked(seq, tok, m), seq),
        (lambda: loss_masked(seq, None, m, "dl", rng.normal(size=(2, 5, 3)) * 0 + 1.0, 1.0), seq),
    ]
    for fn, p in cases:
        assert max_rel_error(fn, [p]) <= 1e-5


# --------------------------------------------------------------- schedules

def test_n_t_progressive_example():
    sch = build_schedule("n_t_progressive", ["c1", "c2", "c3", "c4", "c5"], N=3, T=5)
    assert sch.checkpoints[-1] == "c5" and len(sch.checkpoints) == 3
    got = [teacher_at_step(sch, t) for t in range(20)]
    assert got == [0] * 5 + [1] * 5 + [2] * 10
    assert [teacher_at_step(sch, t) for t in (4, 5, 15)] == [0, 1, 2]


def test_one_shot_equals_explicit_final():
    a = build_schedule("one_shot", [10, 20, 30])
    b = build_schedule("explicit", [10, 20, 30], checkpoints=[30], durations=[math.inf])
    assert a.checkpoints == b.checkpoints == [30]
    assert all(teacher_at_step(a, t) == teacher_at_step(b, t) == 0 for t in (0, 7, 10**9))


def test_kappa_split_example():
    sch = build_schedule("kappa_split", list(range(16)), N=8, kappa=0.5, T0=8000)
    assert sch.durations[:-1] == [500.0] * 7 and sch.checkpoints[-1] == 15
    assert [teacher_at_step(sch, t) for t in (499, 500, 3500)] == [0, 1, 7]
    with pytest.raises(ValueError):
        build_schedule("kappa_split", list(range(16)), N=8, kappa=0.0, T0=8000)
    with pytest.raises(ValueError):
        build_schedule("kappa_split", list(range(16)), N=8, kappa=1.5, T0=8000)


def test_two_shot_and_equal_split():
    sch = build_schedule("two_shot", ["a", "b", "fin"], intermediate="b", T=7)
    assert sch.checkpoints == ["b", "fin"]
    assert [teacher_at_step(sch, t) for t in (6, 7, 100)] == [0, 1, 1]
    eq = build_schedule("equal_split", list(range(10)), N=3, student_total=10)
    assert eq.durations[:2] == [4.0, 3.0]
    assert steps_per_checkpoint(eq, 10) == [4, 3, 3]


def test_schedule_errors():
    with pytest.raises(ValueError):
        build_schedule("n_t_progressive", [1, 2], N=3, T=5)
    with pytest.raises(ValueError):
        build_schedule("bogus", [1])
    with pytest.raises(ValueError):
        TeacherSchedule([1, 2], [1.0])
    with pytest.raises(ValueError):
        TeacherSchedule([], [])
    with pytest.raises(ValueError):
        TeacherSchedule([1], [-1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=1, max_size=6))
def test_schedule_coverage(durations):
    sch = TeacherSchedule(list(range(len(durations))), [float(d) for d in durations])
    total = sum(durations) + 5
    counts = steps_per_checkpoint(sch, total)
    assert counts[:-1] == durations[:-1]
    assert counts[-1] == durations[-1] + 5


# ------------------------------------------------------------- training

class _Oracle:
    """Teacher whose argmax is always the true parity label."""

    def __init__(self, spec):
        self.spec = spec

    def logits(self, x):
        y = parity_label(self.spec, x) - 1
        out = np.zeros((len(y), 2))
        out[np.arange(len(y)), y] = 3.0
        return out


def _bool_task(spec, rng):
    x = sample_inputs(spec.d, rng, 256)
    return BooleanTask(spec, x, parity_label(spec, x) - 1)


def test_hard_dl_with_perfect_teacher_matches_ce():
    spec = ParitySpec(6, 2)
    task = _bool_task(spec, np.random.default_rng(1))
    opt = OptimConfig("sgd", 0.05, 8)
    runs = []
    for cfg in (DistillConfig(loss="ce"), DistillConfig(tau=1e-7, loss="dl")):
        model = init_mlp(16, 6, np.random.default_rng(2))
        sch = build_schedule("one_shot", ["final"])
        distill_train(model, sch, {"final": _Oracle(spec)}, task, cfg, opt, 50, np.random.default_rng(3))
        runs.append(model.named_tensors())
    for k in runs[0]:
        assert np.allclose(runs[0][k], runs[1][k], atol=1e-12, rtol=0)


def test_zero_step_training_is_identity():
    spec = ParitySpec(6, 2)
    task = _bool_task(spec, np.random.default_rng(1))
    model = init_mlp(8, 6, np.random.default_rng(0))
    before = {k: v.copy() for k, v in model.named_tensors().items()}
    _, rec = distill_train(model, None, None, task, DistillConfig(loss="ce"), OptimConfig(), 0,
                           np.random.default_rng(0))
    assert all(np.array_equal(before[k], v) for k, v in model.named_tensors().items())
    assert {r.metric for r in rec} == {"accuracy", "loss"} and all(r.step == 0 for r in rec)


def test_missing_teacher_raises_with_context():
    spec = ParitySpec(6, 2)
    task = _bool_task(spec, np.random.default_rng(1))
    sch = build_schedule("two_shot", ["mid", "final"], intermediate="mid", T=2)
    with pytest.raises(RuntimeError, match="mid"):
        distill_train(init_mlp(8, 6, np.random.default_rng(0)), sch, {"final": _Oracle(spec)}, task,
                      DistillConfig(loss="dl"), OptimConfig(), 3, np.random.default_rng(0))


def test_eval_schedule_and_csv_round_trip():
    spec = ParitySpec(6, 2)
    task = _bool_task(spec, np.random.default_rng(1))
    _, rec = distill_train(init_mlp(8, 6, np.random.default_rng(0)), None, None, task,
                           DistillConfig(loss="ce"), OptimConfig(), 10, np.random.default_rng(0),
                           eval_every=4, eval_steps=[3])
    assert sorted({r.step for r in rec}) == [0, 3, 4, 8, 10]
    assert records_from_csv(records_to_csv(rec)) == rec
    assert records_to_csv([MetricRecord(1, "p", "m", 0.1)]).splitlines()[0] == "step,phase,metric,value"


def test_grammar_tasks_train_a_transformer():
    g = bundled_grammar("tiny")
    rng = np.random.default_rng(0)
    for task in (MaskedGrammarTask(g, 27, 0.3), CausalGrammarTask(g, 27, level=2)):
        task.eval_batch = task.sample(rng, 8)
        cfg = TransformerConfig(layers=1, heads=2, head_dim=4, vocab=task.model_vocab, max_len=27,
                                mode="causal" if isinstance(task, CausalGrammarTask) else "bidirectional",
                                num_outputs=g.vocab_size)
        model = Transformer.init(cfg, rng)
        _, rec = distill_train(model, None, None, task, DistillConfig(loss="ce"),
                               OptimConfig("adam", 1e-2, 4), 5, rng)
        losses = [r.value for r in rec if r.metric == "loss"]
        assert len(losses) == 2 and all(np.isfinite(losses))


def test_masked_batch_invariants():
    g = bundled_grammar("tiny")
    task = MaskedGrammarTask(g, 27, 0.3)
    b = task.sample(np.random.default_rng(0), 32)
    assert b.select.any(axis=1).all()
    assert not (b.select & b.hidden).any()
    assert np.all(b.inputs[b.hidden] == task.pad_id)
