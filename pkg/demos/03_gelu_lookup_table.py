"""GELU as ReLU minus a small tabulated correction.

The correction ``delta(x) = ReLU(x) - GELU(x)`` is even, lives in [0, 1),
and decays to nothing a few units from the origin, so one small unsigned
table of fractional bits covers the whole function.  The step is a power of
two, making the table index a bit shift.  Accuracy beats the cheap sigmoid
closed form by two orders of magnitude.
"""

import numpy as np

from fxmoe import (
    FormatCatalog,
    FxTensor,
    build_gelu_table,
    gelu,
    gelu_reference,
    gelu_sigmoid,
    gelu_tanh,
)

act = FormatCatalog().activation
table = build_gelu_table(step=2.0 ** -10)

print("=== Table geometry ===")
print(f"step        2^-10 = {table.step}")
print(f"entries     {len(table.entries)} x {table.entry_fmt.width_bits}-bit "
      f"unsigned fractions")
print(f"cutoff      |x| = {table.cutoff:.4f} (beyond it GELU rounds to ReLU)")
print(f"peak entry  {table.entries.max() * table.entry_fmt.ulp:.6f} at "
      f"x = {int(np.argmax(table.entries)) * table.step:.4f}")

print()
print("=== Sample points ===")
for x in (-4.0, -1.0, -0.5, 0.0, 0.5, 1.0, 4.0, 8.0):
    v = gelu(FxTensor.from_real([x], act), table).to_real()[0]
    print(f"gelu({x:+.1f}) = {v:+.6f}   exact {gelu_reference(x):+.6f}")

print()
print("=== Error comparison on a dense grid ===")
grid = np.linspace(-8, 8, 100_001)
xs = FxTensor.from_real(grid, act)
exact = gelu_reference(xs.to_real())
lut = np.max(np.abs(gelu(xs, table).to_real() - exact))
tanh_err = np.max(np.abs(gelu_tanh(grid) - gelu_reference(grid)))
sig_err = np.max(np.abs(gelu_sigmoid(grid) - gelu_reference(grid)))
print(f"table lookup max error    {lut:.3e}")
print(f"tanh closed form          {tanh_err:.3e}")
print(f"sigmoid closed form       {sig_err:.3e}")
print(f"analytic bound 0.25*step + 2^-22 = {0.25 * table.step + 2 ** -22:.3e}")
