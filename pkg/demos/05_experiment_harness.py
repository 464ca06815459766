"""
Running and reporting an experiment
===================================

The harness takes one JSON document, trains the teacher, runs probes and
students, and writes everything under a run directory. The same steps
are available from the ``progdistill`` command.
"""
import json
import tempfile
from pathlib import Path

from progdistill import harness as H

config = H.resolve_config({
    "seed": 0,
    "task": {"kind": "parity", "d": 10, "k": 3},
    "teacher": {"model": {"width": 128}, "optim": {"lr": 0.05, "batch": 32}, "steps": 800,
                "checkpoint_every": 50},
    "transition": {"width": 3},
    "student": {"model": {"width": 16}, "optim": {"lr": 0.05, "batch": 8}, "steps": 1000,
                "eval_every": 250, "seeds": [0, 1]},
    "strategies": [
        {"name": "one_shot", "variant": "one_shot", "loss": "dl", "tau": 1.0},
        {"name": "two_shot", "variant": "two_shot", "intermediate": "C1", "T": 500, "loss": "dl", "tau": 1.0},
    ],
    "probes": {"monomials": {"at": ["C1", "final"]}},
    "eval": {"size": 1024, "seed": 1},
})

out = Path(tempfile.mkdtemp()) / "run"
H.run_experiment(config, out)
print("transition:", (out / "teacher" / "transition.json").read_text())
for name, text in H.report(out).items():
    print(f"--- {name}")
    print(text.strip())

# %%
# Equivalent shell session:
#   progdistill --config cfg.json --out runs/demo train-teacher
#   progdistill --config cfg.json --out runs/demo probe
#   progdistill --config cfg.json --out runs/demo distill
#   progdistill --out runs/demo report
print(json.dumps(config["strategies"], indent=1))
