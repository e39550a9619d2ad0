"""ReLU and xUnit seen as gates.

Every activation with f(0) = 0 can be written as z * g.  For ReLU the gate
is a hard threshold of z at the same pixel.  An xUnit computes its gate from
a neighbourhood of z through a depthwise convolution and a Gaussian, so the
gate is smooth, spatially aware and never leaves (0, 1].
"""

import numpy as np

from xunit import data, nn

rng = np.random.default_rng(0)

# ReLU as a gate: the binary map reproduces max(z, 0) exactly, zeros included.
z = rng.normal(size=(1, 1, 4, 6))
z[0, 0, 0, :2] = 0.0
gate = nn.binary_gate(z)
print("ReLU gate values:", np.unique(gate))
print("z * gate == relu(z):", np.array_equal(z * gate, nn.relu(z)))

# An xUnit with identity batch norms and a delta kernel collapses to a
# pointwise gate exp(-relu(z)^2), which shrinks large positive responses.
spec = nn.XUnitSpec(channels=1, kernel=3)
params = nn.xunit_params(spec, dtype=np.float64)
params["dw"].value[...] = 0
params["dw"].value[0, 1, 1] = 1
for i in range(spec.num_bn):
    params[f"bn{i}.running_var"].value[...] = 1 - nn.BN_EPS
zz = np.array([-1.0, 0.0, 0.5, 1.0, 2.0]).reshape(1, 1, 1, 5)
print("\nidentity xUnit on", zz.ravel(), "->", np.round(nn.xunit_forward(zz, params, spec).ravel(), 5))

# With a random 9x9 kernel the gate depends on neighbours, which is what lets
# a single xUnit layer act on texture rather than on isolated values.
spec = nn.XUnitSpec(channels=4, kernel=9)
params = nn.xunit_params(spec, seed=3, dtype=np.float64)
image = data.synthetic_images(1, size=64, seed=5)[0]
z = np.concatenate([image[None]] * 4, axis=1) - 0.5
_, g = nn.xunit_forward(z, params, spec, train=True, return_gate=True)
print(f"\nspatial gate range [{g.min():.3g}, {g.max():.3g}], mean {g.mean():.3f}")

# Dropping the Gaussian (the BN+RL+CD variant) lets the map go negative.
spec = nn.XUnitSpec(channels=4, kernel=9, stages="BN+RL+CD")
_, g = nn.xunit_forward(z, nn.xunit_params(spec, seed=3), spec, train=True, return_gate=True)
print(f"BN+RL+CD gate range [{g.min():.3g}, {g.max():.3g}]")
