"""Fixed-point formats and exact arithmetic.

Walks through the working number formats: 32-bit activations with 10
integer bits, 16-bit weights, the two 16-bit bias flavors, and the widened
19-bit bias type that covers both.  Shows what quantization, saturation,
and wraparound do to out-of-range values, and that every event is counted.
"""

import numpy as np

from fxmoe import (
    FormatCatalog,
    Overflow,
    RunContext,
    dequantize,
    quantize,
    requantize,
)

cat = FormatCatalog()

print("=== The working formats ===")
for name in ("activation", "weight", "bias_attention", "bias_mlp",
             "bias_widened", "gelu_lut_entry"):
    fmt = getattr(cat, name)
    print(f"{name:<16} {fmt.describe():>12}   range [{fmt.min_value:.6g}, "
          f"{fmt.max_value:.6g}]   ulp {fmt.ulp:.3g}")

print()
print("=== Quantization is plain scaling ===")
act = cat.activation
v = quantize(1.0, act)
print(f"quantize(1.0)  -> raw {v.raw} = 2^{act.frac_bits}")
v = quantize(0.3, act)
print(f"quantize(0.3)  -> raw {v.raw} (truncated: 0.3 * 2^21 = "
      f"{0.3 * 2 ** 21:.1f}), back to {dequantize(v):.9f}")

print()
print("=== The exponential overflow hazard ===")
sat = cat.bias_attention.with_policies(overflow=Overflow.SATURATE)
with RunContext() as ctx:
    v = quantize(float(np.exp(7.0)), sat)
print(f"exp(7) = {np.exp(7.0):.2f} into a 16-bit/7-int format saturates to "
      f"{v.value} ({ctx.overflow_events} overflow event recorded)")
print("a signed format needs 12 integer bits before exp(7) fits")

print()
print("=== Bias widening is lossless both ways ===")
b_att = quantize(63.5, cat.bias_attention)
b_mlp = quantize(2.0 ** -10, cat.bias_mlp)
for b, src in ((b_att, "attention"), (b_mlp, "mlp")):
    wide = requantize(b, cat.bias_widened)
    back = requantize(wide, b.fmt)
    print(f"{src:<10} {b.value!r:>22} -> widened {wide.value!r:>22} "
          f"-> back {back.value!r:>22} (identity: {back.raw == b.raw})")

print()
print("=== Wraparound has the full-span period ===")
with RunContext():
    x = 3.25
    a = quantize(x, act)
    b = quantize(x + 2.0 ** (act.int_bits + 1), act)
print(f"quantize({x}) raw {a.raw}, quantize({x} + 2^{act.int_bits + 1}) "
      f"raw {b.raw} -> identical: {a.raw == b.raw}")
