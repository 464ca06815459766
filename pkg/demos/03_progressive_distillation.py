"""
One-shot versus progressive distillation on a small parity
==========================================================

A wide teacher learns a (12, 3)-parity with a sharp jump in accuracy.
Students of width 16 then learn either from the final teacher alone or
first from a checkpoint inside the jump.
"""
import numpy as np

from progdistill.boolean_tasks import ParitySpec, sample_arrays
from progdistill.distill import BooleanTask, DistillConfig, OptimConfig, build_schedule, distill_train
from progdistill.models import init_mlp
from progdistill.probes import class1_probability, detect_transition, monomial_correlations

spec = ParitySpec(12, 3)
x, y = sample_arrays(spec, np.random.default_rng(1), 2048)
task = BooleanTask(spec, x, y - 1)

rng = np.random.default_rng(0)
teacher = init_mlp(256, 12, rng)
snaps = {}
teacher, rec = distill_train(teacher, None, None, task, DistillConfig(loss="ce"),
                             OptimConfig("sgd", 0.05, 32), 1500, rng, eval_every=50, phase="teacher",
                             on_eval=lambda t, m: snaps.__setitem__(t, m.copy()))
curve = [(r.step, r.value) for r in rec if r.metric == "accuracy"]
tr = detect_transition(curve, width=3)
print("teacher transition:", tr)

# %%
# Degree-1 correlations of the teacher's class-1 probability at C1
rep = monomial_correlations(class1_probability(snaps[tr.c1]), 12, [(i,) for i in range(12)])
print("support", rep.values[:3].round(4), "rest max", rep.values[3:].max().round(4))

# %%
# Students
steps = sorted(snaps)
for name, sched in [("one-shot", build_schedule("one_shot", steps)),
                    ("two-shot", build_schedule("two_shot", steps, intermediate=tr.c1, T=1500))]:
    srng = np.random.default_rng(7)
    student = init_mlp(16, 12, srng)
    _, srec = distill_train(student, sched, snaps, task, DistillConfig(tau=1.0, loss="dl"),
                            OptimConfig("sgd", 0.05, 8), 4000, srng, eval_every=500)
    print(f"{name:9s}", [round(r.value, 3) for r in srec if r.metric == "accuracy"])
