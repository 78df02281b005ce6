"""Strength reinforcement on a bar pulled along its length.

A voxel FEA of the bar gives the direction of maximal principal stress,
which is the bar axis. Layers should contain that axis, so the printing
direction must stay within 10 degrees of perpendicular to it. Starting from
layers tilted 45 degrees towards the axis (every stress sample violates),
the SR term rotates the field back.
"""

import logging

import numpy as np

from curvedslice import benchmarks as bm
from curvedslice import trainer
from curvedslice.objective import evaluate, sr_violating_fraction

logging.basicConfig(level=logging.ERROR)
solid, scene, stress = bm.bar_scene()
print(f"FEA: {len(stress.voxels)} voxels, {len(scene.T)} stress samples, "
      f"mean |tau . x| = {np.abs(scene.T.tau[:, 0]).mean():.4f}")

q, s = bm.benchmark_nets(scene.cage)
trainer.pretrain_fit(scene, q, s, bm.tilt_target(scene.cage, 45.0), 200, 3e-3)
vf0 = sr_violating_fraction(scene, evaluate(scene, q, s, want_grad=False).state)
print(f"tilted start: {vf0:.0%} of stress samples violate")

cfg = bm.benchmark_config(100)
res = trainer.optimize(scene, trainer.new_state(q, s, cfg), cfg)
print(f"after {res.epochs_run} epochs: {res.final.extras['sr_violating']:.1%} violate "
      f"(L_CA = {res.final.ca:.3g}; {res.status})")
