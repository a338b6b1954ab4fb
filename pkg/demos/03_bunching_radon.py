"""Recover a type density from bunched purchases with varying taste directions.

Run: python3 demos/03_bunching_radon.py
"""
import numpy as np

from screenlab.grids import tensor_weights
from screenlab.ident_bunching import bunching_index, detect_bunching_set, radon_invert
from screenlab.simulate import BilinearBandGenerator, CovariateLaw

rng = np.random.default_rng(0)
gen = BilinearBandGenerator()

# Gaussian types restricted to the bunching band.
th = rng.normal(0.55, 0.12, (200000, 2))
th = th[gen.in_band(th) & np.all((th >= 0) & (th <= 1), axis=1)][:50000]
X1, _ = CovariateLaw("directions").draw(len(th), 2, rng)
ds = gen.sample(th, X1)

geo = detect_bunching_set(ds)
bi = bunching_index(ds, geo)
print(f"bunching flats found: {len(geo.flats)}; records on them: {int(np.sum(bi.B == bi.B))}")

ax = (np.linspace(0, 1, 81),) * 2
est = radon_invert(bi.B, bi.D, ax, n_bins=64)
w = tensor_weights(ax)
X = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)
truth = gen.in_band(X.reshape(-1, 2)).reshape(X.shape[:-1]) * np.exp(-0.5 * np.sum((X - 0.55) ** 2, -1) / 0.12 ** 2)
truth /= np.sum(truth * w)
print(f"reconstructed density L1 error: {np.sum(np.abs(est.density - truth) * w):.3f}")
