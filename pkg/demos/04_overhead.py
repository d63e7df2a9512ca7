"""
What the taps cost
==================

Memory for the tap cache and adapter parameters grows by a fixed amount per
equal-size tap.  Step time grows too; measured here with steps for the
different tap counts interleaved.
"""

from imachsr import datagen, training
from imachsr.cli import equal_tap_family

data = datagen.generate(datagen.GenSpec(count=4, seed=0))
family = equal_tap_family(1, 16, 16, 4)
prof = training.profile_overhead(training.TrainingConfig(batch_size=4), family, range(6), data, n_batches=20)

print(" M   step ms   cache bytes   adapter params")
for r in prof.rows:
    print(f"{r.M:2d} {1e3 * r.time_median_s:9.2f} {r.tap_cache_bytes:13d} {r.adapter_params:16d}")

# each tap on an 8-channel 16x16 map with B=4, K=4 and 8-byte reals
print("per tap:", 4 * 16 * 16 * 8 * 8 + 4 * 16 * 16 * 4 * 8, "bytes")
print("R^2:", prof.r2_tap_cache, prof.r2_adapter_params, " monotone time:", prof.time_monotone)
