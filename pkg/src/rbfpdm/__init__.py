"""Particle-based statistical shape modeling with RBF surface sampling.

Particles on every shape of a cohort are optimized jointly for surface
coverage (an RBF-reconstruction-aware sampling loss), neighborhood
correspondence with a template shape and a compact PCA model, and are kept
in geodesic correspondence by a periodic repair pass.
"""

from .config import CohortConfig, load_config
from .correspondence import initialize, select_reference
from .errors import NumericalError, PdmError, ValidationError
from .mesh import TriangleMesh, load_mesh, save_mesh
from .metrics import compactness, fit_pca, generalization, specificity, surface_to_surface, warp_mesh
from .optimizer import OptimizationConfig, run_stage1, run_stage2
from .regularizer import mismatch_report, regularize
from .sdf import SignedDistanceVolume, voxelize_sdf
from .shapes import ParticleSystem, ShapeSample, load_particles, save_particles

__version__ = "0.1.0"
