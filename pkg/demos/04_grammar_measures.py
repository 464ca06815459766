"""
Grammars, masking and n-gram measures
=====================================

Sample from a small bundled grammar, corrupt it the masked-prediction way,
compute an exact masked posterior with the inside algorithm, and evaluate
the n-gram robustness and closeness measures on a freshly initialized
bidirectional transformer.
"""
import numpy as np

from progdistill.grammar import (apply_masking, boundary_positions, bundled_grammar,
                                 exact_masked_posterior, sample_sentence)
from progdistill.models import Transformer, TransformerConfig
from progdistill.probes import SequenceModelSpec, m_close, m_robust

g = bundled_grammar("tiny")
rng = np.random.default_rng(0)
words, tree = sample_sentence(g, rng)
print("sentence:", " ".join(words))
for level in range(1, tree.depth):
    print(f"level {level} boundaries:", boundary_positions(tree, level))

# %%
# 80/10/10 corruption of 30% of the positions
ex = apply_masking(g.encode(words), 0.3, rng, g.vocab_size)
print("masked positions:", ex.masked.tolist(), "kinds:", ex.kinds)

# %%
# Exact posterior of one hidden position given the visible tokens
obs = [None if j in set(ex.masked.tolist()) else int(t) for j, t in enumerate(ex.tokens)]
i = int(ex.masked[0])
print(f"P(x_{i} | visible) =", exact_masked_posterior(g, obs, i).round(3), "true:", words[i])

# %%
# n-gram measures on an untrained model ([mask] = V, [pad] = V + 1)
V = g.vocab_size
cfg = TransformerConfig(layers=2, heads=2, vocab=V + 2, max_len=32, num_outputs=V)
model = Transformer.init(cfg, rng)
spec = SequenceModelSpec("bidirectional", V, V + 1)
toks = np.full(32, V + 1)
toks[: len(words)] = g.encode(words)
for n in (3, 5, 7):
    print(f"n={n}: robust {m_robust(model, spec, toks, 4, n):.2e}  close {m_close(model, spec, toks, 4, n):.2e}")
