"""Adaptive-moment optimizers and the plateau learning-rate scheduler."""
import logging

import numpy as np

logger = logging.getLogger('rel2prompt')


class Adam:
    """
    Adam over the trainable parameters of a :class:`~rel2prompt.diff.ParameterStore`.

    With ``weight_decay > 0`` the decay is decoupled from the gradient (AdamW); otherwise the
    update is plain Adam. Moment estimates live in ``store.state``.
    """

    def __init__(self, store, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.store = store
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = float(weight_decay)
        self.steps = 0

    @property
    def decoupled(self):
        return self.weight_decay > 0.0

    def step(self):
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for name in self.store.trainable():
            param = self.store[name]
            if param.grad is None:
                continue
            state = self.store.state.setdefault(name, {'m': np.zeros_like(param.data), 'v': np.zeros_like(param.data)})
            state['m'] = self.beta1 * state['m'] + (1.0 - self.beta1) * param.grad
            state['v'] = self.beta2 * state['v'] + (1.0 - self.beta2) * param.grad ** 2
            update = (state['m'] / correction1) / (np.sqrt(state['v'] / correction2) + self.eps)
            if self.decoupled:
                param.data = param.data - self.lr * self.weight_decay * param.data
            param.data = param.data - self.lr * update

    def zero_grad(self):
        self.store.zero_grad()


def build_optimizer(store, lr, weight_decay=0.0):
    optimizer = Adam(store, lr=lr, weight_decay=weight_decay)
    logger.info(f"Using {'AdamW' if optimizer.decoupled else 'Adam'} with lr={lr}, weight_decay={weight_decay}")
    return optimizer


class ReduceLROnPlateau:
    """
    Multiply the learning rate by ``factor`` once ``patience`` evaluations in a row fail to improve.

    Improvement means moving past the best value by more than ``threshold`` in the favorable
    direction (``mode='max'`` for AUROC, ``'min'`` for MAE and losses).
    """

    def __init__(self, optimizer, mode='max', patience=100, factor=0.8, threshold=1e-6, min_lr=0.0):
        if mode not in ('min', 'max'):
            raise ValueError(f"mode must be 'min' or 'max', got {mode}")
        self.optimizer = optimizer
        self.mode = mode
        self.patience = int(patience)
        self.factor = float(factor)
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = None
        self.bad_evaluations = 0

    def improved(self, value):
        if self.best is None:
            return True
        if self.mode == 'max':
            return value > self.best + self.threshold
        return value < self.best - self.threshold

    def step(self, value):
        """Record one evaluation; returns True when the learning rate was reduced."""
        if self.improved(value):
            self.best = value
            self.bad_evaluations = 0
            return False
        self.bad_evaluations += 1
        if self.bad_evaluations < self.patience:
            return False
        self.bad_evaluations = 0
        new_lr = max(self.optimizer.lr * self.factor, self.min_lr)
        logger.info(f"Plateau after {self.patience} evaluations, lr {self.optimizer.lr:.3e} -> {new_lr:.3e}")
        self.optimizer.lr = new_lr
        return True
