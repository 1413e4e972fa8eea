"""
Adaptive-moment (Adam) updates over a dictionary of named numpy parameters.
"""

from typing import Dict

import numpy as np


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(value) for name, value in params.items()}
        self.v = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Return updated copies of params; parameters without a gradient are left unchanged."""
        self.step_count += 1
        t = self.step_count
        updated = {}
        for name, value in params.items():
            g = grads.get(name)
            if g is None:
                updated[name] = value
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / (1.0 - self.beta1 ** t)
            v_hat = self.v[name] / (1.0 - self.beta2 ** t)
            updated[name] = value - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated
