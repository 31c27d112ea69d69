"""A guided tour of the winner-takes-all loss family on one fixture.

No training here, just the algebra on a frozen forecast: which mode
wins, what each relaxation changes, how the two-level loss blends its
terms, and a finite-difference spot check of the gradients.
"""

import numpy as np

from hmix.losses import (LossConfig, compute_loss, eps_wta_loss, ewta_loss,
                         hwta_loss, select_winner_meta, wta_loss)
from hmix.mixture import B_MIN, HierarchicalMixture, MixtureForecast, meta_mixture
from hmix.tensor import Tensor, finite_diff_check, softplus

rng = np.random.Generator(np.random.PCG64(31))

# flat mixture: 6 modes over a 3-step horizon
mus = rng.normal(size=(6, 3, 2))
bs = rng.uniform(0.3, 0.8, size=(6, 3, 2))
w = rng.dirichlet(np.ones(6))
m = MixtureForecast(Tensor(mus), Tensor(bs), weights=Tensor(w))
y = rng.normal(size=(3, 2))

print("flat family on one target:")
print(f"  wta                     {wta_loss(y, m).total.item():.4f}")
print(f"  eps-wta, eps=0.05       {eps_wta_loss(y, m, 0.05).total.item():.4f}")
print(f"  eps-wta, eps=0 == wta:  "
      f"{eps_wta_loss(y, m, 0.0).total.item() == wta_loss(y, m).total.item()}")
for n in (6, 3, 1):
    print(f"  ewta, top {n} assigned   {ewta_loss(y, m, n).total.item():.4f}")

# two-level mixture: 2 groups x 3 sub-modes
hm = rng.normal(size=(2, 3, 3, 2))
hb = rng.uniform(0.3, 0.8, size=(2, 3, 3, 2))
hl = rng.normal(size=(2, 3))
h = HierarchicalMixture(Tensor(hm), Tensor(hb), logits=Tensor(hl))
winner = select_winner_meta(y, h)
print(f"\ntwo-level loss, winner group {int(winner)}"
      f" (centroids {np.round(meta_mixture(h).mus.data[:, -1], 2).tolist()} at the horizon):")
for gamma in (0.0, 0.5, 0.6, 1.0):
    rep = hwta_loss(y, h, gamma)
    print(f"  gamma={gamma:3.1f}  total {rep.total.item():7.4f}"
          f"  (group term {rep.meta_term.item():.4f},"
          f" winner term {rep.mwta_term.item():.4f})")
g0 = hwta_loss(y, h, 0.0).total.item()
g1 = hwta_loss(y, h, 1.0).total.item()
gh = hwta_loss(y, h, 0.5).total.item()
print(f"  affine in gamma: |total(0.5) - midpoint| = {abs(gh - 0.5 * (g0 + g1)):.1e}")

# gradients: tape vs central differences through the full loss
raw_mus = Tensor(rng.normal(size=(2, 3, 3, 2)), requires_grad=True)
raw_b = Tensor(rng.normal(size=(2, 3, 3, 2)), requires_grad=True)
logits = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
prev = rng.dirichlet(np.ones(6)).reshape(2, 3)
config = LossConfig(kind="hwta", gamma=0.6, mwta_prefactor_grad=True)


def f():
    hx = HierarchicalMixture(raw_mus, softplus(raw_b) + B_MIN, logits=logits)
    return compute_loss(y, hx, config, previous_responsibilities=prev).total


report = finite_diff_check(f, [raw_mus, raw_b, logits], tol=1e-3)
print(f"\nfinite differences over {sum(p.size for p in (raw_mus, raw_b, logits))} "
      f"coordinates: max rel err {report.max_rel_err:.1e} (pass: {report.passed})")
