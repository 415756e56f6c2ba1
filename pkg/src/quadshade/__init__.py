"""Shape from shading with local quadratic shape proposals."""
__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .patch_model import (IntensityPatch, LightVector, PatchGrid, QuadShape, ShadowPolicy,  # noqa: F401
                          four_solutions, render, theta_of_normal, vandermonde_rank)
from .proposal_engine import (NoiseModel, ProposalCollection, SolverConfig, fit_proposal,  # noqa: F401
                              infer_image, infer_patch)
from .reconstructor import ReconConfig, frankot_chellappa, reconstruct, weighted_integrate_cg  # noqa: F401
