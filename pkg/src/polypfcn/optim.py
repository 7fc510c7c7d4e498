"""SGD with momentum and per-parameter learning-rate multipliers."""
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NonFiniteGradientError


@dataclass
class SGD:
    """Heavy-ball SGD: ``v <- momentum*v - lr*lr_mult*g``; ``p <- p + v``.

    ``lr_mult`` maps parameter names to multipliers; names absent from it use
    1.0.  Velocities are created lazily, shape-identical to the parameter.
    """

    base_lr: float
    momentum: float = 0.99
    lr_mult: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.base_lr >= 0:
            raise ValueError(f"base_lr must be non-negative, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")

    def step(self, params, grads):
        """Update ``params`` in place from ``grads`` (both dicts keyed by name).

        Only names present in ``grads`` are touched.  The whole step is
        rejected, leaving every parameter and velocity unchanged, if any
        gradient is non-finite.
        """
        for name, g in grads.items():
            if params[name].shape != g.shape:
                raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for {name}; step rejected")
        for name, g in grads.items():
            p = params[name]
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p)
            lr = self.base_lr * self.lr_mult.get(name, 1.0)
            v *= self.momentum
            v -= lr * g
            p += v
        return params
