"""
Tapping a network and reading the loss breakdown
================================================

Build the desk-scale segmentation net, place taps with a few different
criteria and look at every term of the combined objective for one batch.
"""

import numpy as np

from imachsr import datagen, netspec, supervision, training
from imachsr.netspec import TapCriterion
from imachsr.tensor import Tensor

# a handful of 16x16 images with four classes
data = datagen.generate(datagen.GenSpec(count=8, seed=0))
spec = netspec.preset_spec("desk12", 1, 16, 16, 4)
print(netspec.format_layers(spec.layers))

# the same architecture under several placement rules
for crit in [
    TapCriterion("explicit_indices", (3, 6)),
    TapCriterion("after_downsample"),
    TapCriterion("at_bottleneck"),
    TapCriterion("pattern", count=3, spacing_bases=1, anchor="central"),
]:
    taps = netspec.resolve_taps(spec, crit)
    print(f"{crit.rule:18s}", [(t.layer_index, t.feature_dims) for t in taps])

# rules that find nothing say which annotations exist
try:
    netspec.resolve_taps(spec, TapCriterion("at_fusion"))
except netspec.TapResolutionError as exc:
    print("at_fusion:", exc)

# one forward pass with two taps; every term is kept separately
model = netspec.build_model(spec, seed=0, criterion=TapCriterion("pattern", count=2))
weights = supervision.LossWeights.uniform(2)
x = Tensor(np.asarray(data.images, dtype=np.float64))
_, bd, *_ = training.compute_losses(model, x, data.labels.astype(np.int64), weights)
print("ce      ", round(bd.ce, 5))
print("mi      ", [round(v, 5) for v in bd.mi])
print("ne      ", [round(v, 5) for v in bd.ne])
print("total   ", round(bd.total, 5), "rebuilt", round(bd.reconstruct(), 5))

# the backbone parameters do not depend on where the taps sit
plain = netspec.build_model(spec, seed=0)
same = all(np.array_equal(p.data, model.theta()[k].data) for k, p in plain.theta().items())
print("backbone identical with and without taps:", same)
print("backbone parameters:", plain.num_parameters(), " adapter parameters:", training.adapter_param_count(model))
