"""Why the reordered attention schedule wins.

Streaming one K block per iteration against a batch of p cached Q rows
keeps the bandwidth demand at one block per iteration at any parallelism,
where the naive row-major order needs p blocks per iteration.  The
event-enumerated schedules land exactly on the closed forms, and the
computed values never depend on the schedule at all.
"""

import numpy as np

from fxmoe import (
    FormatCatalog,
    FxTensor,
    analytic_attention_stats,
    make_schedule,
    measure_traffic,
    run_mv,
    run_qk,
)

act = FormatCatalog().activation

print("=== Traffic at N = 128 ===")
print(f"{'p':>3} {'strategy':>10} {'blocks':>8} {'iterations':>11} "
      f"{'peak bw':>8} {'buffers':>8}")
for p in (1, 2, 4, 8):
    for reordered in (False, True):
        stats = measure_traffic(make_schedule(128, p, reordered=reordered))
        name = "reordered" if reordered else "naive"
        print(f"{p:>3} {name:>10} {stats.blocks_loaded:>8} "
              f"{stats.latency_iters:>11} "
              f"{stats.peak_bandwidth_blocks_per_iter:>8} "
              f"{stats.live_buffers:>8}")

print()
print("=== Measured always equals the closed form ===")
for n, p in ((16, 4), (64, 8), (128, 4), (196, 4)):
    measured = measure_traffic(make_schedule(n, p, reordered=True))
    analytic = analytic_attention_stats(n, p, reordered=True)
    print(f"N={n:<4} p={p}: measured {measured.blocks_loaded} blocks, "
          f"closed form N^2/p + N + p - 1 = {analytic.as_dict()['data_load']}")

print()
print("=== The parallelism factor never changes the values ===")
rng = np.random.default_rng(7)
q = FxTensor.from_real(rng.uniform(-2, 2, (16, 8)), act)
k = FxTensor.from_real(rng.uniform(-2, 2, (16, 8)), act)
v = FxTensor.from_real(rng.uniform(-2, 2, (16, 8)), act)
outs = {}
for p in (1, 2, 4, 8, 16):
    rows = run_qk(q, k, p=p)
    outs[p] = run_mv(rows, v, p=p)
base = outs[1].raw
print("bitwise equal across p in {1, 2, 4, 8, 16}:",
      all(np.array_equal(base, o.raw) for o in outs.values()))

ratio = 16512 / 4227
print()
print(f"data-load advantage at N=128, p=4: 16512 / 4227 = {ratio:.2f}x")
