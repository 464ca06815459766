"""Console entry point; applies ``--threads`` before numpy is imported."""
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _threads(argv: list[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--threads="):
            return a.split("=", 1)[1]
    return None


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    n = _threads(argv)
    if n is not None and "numpy" not in sys.modules:
        for var in _THREAD_VARS:
            os.environ[var] = n
    from .harness import main as run
    return run(argv)
