"""Open-world compositional zero-shot learning with a sparse linear compositor, at desk scale."""

from .backbone import Backbone, BackboneConfig
from .data import CompositionSpace, Sample, generate_dataset
from .evaluate import EvalCurve, bias_sweep, evaluate
from .model import Model
from .slc import Slc, SlcConfig
from .train import TrainConfig, train

__version__ = "0.1.0"
