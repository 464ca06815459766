"""
Sparse parity at symmetric initialization
=========================================

The mirrored initialization makes the network output exactly zero, so the
first hinge-loss gradient has a closed form in terms of the Fourier
coefficients of Majority. One exact step then moves every neuron onto the
sign pattern of the support.
"""
import numpy as np

from progdistill.boolean_tasks import ParitySpec, parity_label, sample_inputs, to_signed
from progdistill.models import TwoStageConfig, init_mlp_symmetric, train_two_stage
from progdistill.probes import maj_fourier, verify_claim1

d, k, m = 11, 4, 32
spec = ParitySpec(d, k)
rng = np.random.default_rng(0)
model = init_mlp_symmetric(m, d, k, rng)
print("max |f| at init:", np.abs(model.score(sample_inputs(d, rng, 1000))).max())

# %%
# Majority coefficients: zero at even sizes, shrinking at odd sizes
print("zeta_s for d=11:", [round(maj_fourier(d, s), 5) for s in range(1, 8)])

# %%
# Enumerated population gradient against the closed form, neuron 0
for j in (0, 1, 5, 9):
    got, want = verify_claim1(spec, model, 0, j)
    tag = "support" if j < k else "off"
    print(f"coord {j} ({tag}): enumerated {got:+.6f}  closed form {want:+.6f}")

# %%
# One exact first-layer step; decay 1/(2 lr) wipes the initial weights
zeta = maj_fourier(d, k - 1)
lr = m / (k * abs(zeta))
cfg = TwoStageConfig(T1=1, T2=0, lr1=lr, lr2=1.0, batch1=1, batch2=1, decay1=1 / (2 * lr),
                     population_stage1=True)
train_two_stage(model, cfg, lambda x: to_signed(parity_label(spec, x)), rng)
W = model.W.data
print("support weights (|w| = 1/2k = %.3f):" % (1 / (2 * k)), np.round(np.abs(W[:4, :k]), 4).tolist())
print("largest off-support weight:", np.abs(W[:, k:]).max().round(4))
