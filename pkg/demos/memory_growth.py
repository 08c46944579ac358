"""
Feature memory versus depth
===========================

Dense connectivity makes a naive implementation store one concatenation and
one batch-norm output per layer, each as wide as everything before it, so
feature memory grows quadratically with depth.  Pointing those outputs at
two shared buffers and recomputing them during back-propagation leaves only
the convolution outputs, which grow linearly.
"""
import numpy as np

from denseplan import DenseNetConfig, build_plan, predict_peak_elements, step_trace
from denseplan.densenet import with_depth

# %%
# A classic (non-bottleneck) three-block model with growth rate 12.  The
# depth is 3 * layers_per_block + 4.
base = DenseNetConfig((2, 2, 2), 12, num_classes=10)
rng = np.random.default_rng(0)
x = rng.standard_normal((2, 3, 8, 8))
y = rng.integers(0, 10, 2)

print(f"{'depth':>5} {'naive':>12} {'shared-grad':>12} {'shared-all':>12}   (feature bytes)")
for depth in (10, 16, 22, 28, 40):
    cfg = with_depth(base, depth)
    peaks = []
    for strategy in ("naive", "shared-grad", "shared-all"):
        plan = build_plan(cfg, strategy, 2, x.shape)
        measured = step_trace(plan, x, y).stats.total_feature_peak_bytes
        # the closed-form model agrees to the byte
        assert measured == predict_peak_elements(cfg, strategy, 2, (8, 8)).feature_bytes(8)
        peaks.append(measured)
    print(f"{depth:>5} " + " ".join(f"{p:>12,}" for p in peaks))

# %%
# At the scale of a 160-layer DenseNet-BC on 32x32 inputs only the closed
# form is needed; no step has to run.
from denseplan import preset

big = preset("paper-160-k12")
naive = predict_peak_elements(big, "naive", 64, (32, 32)).feature_bytes(4)
shared = predict_peak_elements(big, "shared-all", 64, (32, 32)).feature_bytes(4)
print(f"\n160 layers, batch 64, f32: naive {naive / 2**30:.2f} GiB, "
      f"shared-all {shared / 2**30:.2f} GiB ({shared / naive:.1%})")
