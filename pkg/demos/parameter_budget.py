"""Where the parameters go.

An xUnit costs (r^2 + 4) * d parameters for d channels and an r x r
depthwise kernel, which is small next to the 9 * d^2 of a 3x3 convolution.
Trading convolution layers for xUnits therefore shrinks a network while
moving a noticeable share of its budget into the activations.
"""

from xunit import models

print(f"{'arch':<9}{'params':>9}{'in activations':>17}")
for arch in ("dncnn", "xdncnn", "srcnn", "xsrcnnf", "xsrcnnc"):
    spec = models.build(arch)
    print(f"{arch:<9}{models.count_params(spec):>9}{models.activation_fraction(spec):>17.1%}")

# The overhead of swapping ReLUs for xUnits is exactly (depth - 1) * (r^2 + 4) * width.
print("\noverhead of xUnits over ReLUs, width 64:")
for r in (1, 3, 5, 9):
    spec = models.build_xnet(9, 64, xkernel=r)
    extra = models.count_params(spec) - models.count_params(models.relu_twin(spec))
    print(f"  r={r}: {extra:>6} = 8 * ({r}^2 + 4) * 64")

# Equal-budget comparison used by the trend demo: a shallow xNet against a deeper ConvNet.
for label, spec in (("convnet depth 5", models.build_convnet(5)),
                    ("xnet depth 3, r=9", models.build_xnet(3))):
    print(f"\n{label}: {models.count_params(spec)} parameters, "
          f"{models.activation_fraction(spec):.1%} in activations")
    for i, count in enumerate(models.layer_param_counts(spec)):
        if count:
            print(f"  layer {i:>2} {spec.layers[i].kind:<6}{count:>8}")
