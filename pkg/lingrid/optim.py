import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List

import numpy as np

from lingrid.diffcore import Parameter
from lingrid.errors import NumericError

logger = logging.getLogger(__name__)


def lr_at_epoch(
    epoch: int, initial: float = 1e-2, decayed: float = 1e-3, decay_after: int = 20
) -> float:
    """Step schedule; epochs are 1-based, the decayed rate starts at ``decay_after + 1``."""
    return initial if epoch <= decay_after else decayed


@dataclass
class SGD:
    params: List[Parameter]
    momentum: float = 0.0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.params = list(self.params)

    def step(self, learning_rate: float) -> None:
        # all-or-nothing: nothing is updated if any gradient is bad
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {p.name}")

        for p in self.params:
            update = p.grad
            if self.momentum:
                v = self.velocity.get(p.name)
                v = update if v is None else self.momentum * v + update
                self.velocity[p.name] = v
                update = v
            p.data = (p.data - learning_rate * update).astype(p.data.dtype)
            p.zero_grad()


def sgd_step(params: Iterable[Parameter], learning_rate: float) -> None:
    SGD(list(params)).step(learning_rate)
