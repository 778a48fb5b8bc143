"""gazekit: desk-scale 3D gaze estimation with few-shot personal calibration.

The package covers the full loop: image-free normalization geometry, a
synthetic corneal-reflection (PCCR) eye benchmark with known ground truth,
a compact differentiable gaze regressor with a low-dimensional per-person
latent, joint training, BFGS few-shot calibration, and the experiment
harness behind the `gazekit` command line tool.
"""

__version__ = "0.1.0"

from . import geometry  # noqa: F401
