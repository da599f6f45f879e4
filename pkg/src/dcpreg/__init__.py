"""Rigid point-cloud registration: classical ICP plus a learned
soft-matching pipeline with a differentiable SVD alignment head."""

__version__ = "0.1.0"

from .dataio import LabeledPair, PairGenConfig, PointCloud  # noqa: F401
from .dcpnet import ModelConfig, ModelParams, dcp_forward, dcp_loss, dcp_predict  # noqa: F401
from .geometry import RigidTransform, procrustes_solve, svd3  # noqa: F401
from .icp import icp_register, polish_with_icp  # noqa: F401

# The training entry points live on the submodule (dcpreg.train.train etc.);
# re-exporting the function here would shadow the module name.
from .train import Metrics, TrainConfig, evaluate, load_checkpoint, save_checkpoint  # noqa: F401
