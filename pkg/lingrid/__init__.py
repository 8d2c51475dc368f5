from .network import LinGridModel, ModelDims
from .trainer import Trainer
