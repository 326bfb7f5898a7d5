"""Chance-aware kinodynamic planning over noisy voxel grids.

The pipeline: a voxel world and its exact distance field (``world``), a noise
model over measured distances (``uncertainty``), a kernel-embedding distance
between the violation distribution and the safe Dirac (``rkhs``), an optional
linear embedding that accelerates that distance (``embedding``), Bernstein
polynomial trajectories (``trajectory``), a kinodynamic graph search frontend
(``frontend``), a sampling-based refinement backend (``backend``), and a
benchmark harness with a CLI (``harness``, ``cli``).
"""

__version__ = "0.1.0"
