"""Curved-layer slicing for multi-axis printing via learned deformation fields.

The pipeline: an implicit solid is caged by a tetrahedral mesh; two SIREN
networks give a rotation and a per-axis scale at every element; a
scale-controlled ARAP solve turns them into deformed cage positions whose
z-coordinate is the slicing field G; manufacturing losses on grad G train the
networks; trimmed isosurfaces of G are the printed layers.
"""

__version__ = "0.1.0"
