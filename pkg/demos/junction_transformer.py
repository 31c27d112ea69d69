"""Small grouped transformer on synthetic four-way junction scenes.

Scenes put a focal agent on a constant-speed approach that continues
straight or turns along a quarter arc; neighbors drive straight lines.
Everything is normalized into the focal frame (origin at the last
observed step, heading along +x) before featurization, so the forecast
fan below is in that frame too. We train briefly, print the metric
table, and draw the forecast fan for a few held-out scenes: group
centroids solid, sub-modes dashed.

Takes about a minute. Output: demos/out/junction_scene*.svg
"""

import os

import numpy as np

from hmix.data import (IntersectionConfig, feature_dim, features_and_targets,
                       synth_intersection)
from hmix.losses import LossConfig
from hmix.metrics import evaluate_forecasts, metrics_table
from hmix.models import GroupedTransformerForecaster, HeadSpec, TransformerConfig
from hmix.plots import trajectory_figure
from hmix.tensor import Tensor
from hmix.training import TrainConfig, train

OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "out")
os.makedirs(OUT, exist_ok=True)

icfg = IntersectionConfig(t_obs=5, t_pred=6, n_neighbors=3)
rng = np.random.Generator(np.random.PCG64(11))
xt, yt = features_and_targets(synth_intersection(360, rng, icfg), n_neighbors=3)
xv, yv = features_and_targets(synth_intersection(60, rng, icfg), n_neighbors=3)
xe, ye = features_and_targets(synth_intersection(40, rng, icfg), n_neighbors=3)

cfg = TransformerConfig(in_features=feature_dim(3), t_obs=icfg.t_obs,
                        head=HeadSpec(2, 3, icfg.t_pred), base_dim=16,
                        heads=2, n_blocks=2)
model = GroupedTransformerForecaster(cfg, seed=11)
print(f"model: {model.param_count()} parameters, {model.mac_count()} MACs per scene")
loss = LossConfig(kind="hwta", gamma=0.6, normalized_meta_stats=True)
train(model, (xt, yt), (xv, yv), loss,
      TrainConfig(epochs=60, batch_size=64, seed=11, lr_milestones=(40,), lr_decay=0.5))

h = model.forward(xe)[0]


def scene(i):
    return type(h)(Tensor(h.mus.data[i]), Tensor(h.bs.data[i]),
                   weights=Tensor(h.weights.data[i]))


report = evaluate_forecasts([(ye[i], scene(i)) for i in range(len(xe))],
                            n_params=model.param_count(), macs=model.mac_count())
print(metrics_table({"junction transformer": report}))

for i in range(3):
    path = os.path.join(OUT, f"junction_scene{i}.svg")
    # features carry the observed positions in columns 0:2
    past = xe[i][:, 0:2]
    trajectory_figure(scene(i), path, past=past, truth=ye[i])
    print(f"wrote {path}")
