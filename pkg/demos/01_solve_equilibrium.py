"""Solve the uniform-square screening problem and look at the regions.

Run: python3 demos/01_solve_equilibrium.py
"""
import numpy as np

from screenlab.model import closed_form_example, uniform_square_primitives
from screenlab.solver import SolverConfig, bunching_flat_fit, exclusion_boundary, solve_equilibrium, sweep_check

MESH = 41

prim = uniform_square_primitives(1.0, MESH)
menu = solve_equilibrium(prim, SolverConfig(mesh=MESH))

# Label 0 is excluded, 1 bunched, 2 fully screened.
for lab, name in enumerate(("excluded", "bunched", "screened")):
    print(f"{name:>9}: {np.mean(menu.labels == lab):6.1%} of lattice nodes")

# Where the exclusion boundary crosses the diagonal, next to the closed-form threshold.
eb = exclusion_boundary(menu)
print(f"exclusion threshold on the diagonal: lattice {eb['tau_diagonal']:.3f}, "
      f"closed form {closed_form_example(1.0).tau0:.3f}")

# How close the bunched choices are to a single straight segment.
print(f"bunched choices, straight-line fit R^2: {bunching_flat_fit(menu)['r2']:.3f}")

# Mass balance on each bunch.
rep = sweep_check(menu, prim)
print(f"{len(rep.bunches)} bunches, largest balance residual {rep.max_abs_residual:.3g}")
