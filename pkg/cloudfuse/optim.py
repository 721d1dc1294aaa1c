from collections import OrderedDict, namedtuple

import numpy as np

from .errors import NonFiniteGradientError
from .util import _getLogger


AdamState = namedtuple("AdamState", ["t", "m", "v"])


def init_adam_state(param):
    return AdamState(0, np.zeros_like(param), np.zeros_like(param))


def adam_step(param, grad, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, rectify=False):
    """
    One Adam update of a single array. Returns the updated parameter and state, leaving
    the inputs untouched.

    With `rectify` the adaptive step is scaled by the RAdam variance rectification term,
    and replaced by a plain momentum step while the second-moment estimate is still too
    young (rho_t <= 4).
    """
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    if rectify:
        rho_inf = 2.0 / (1 - beta2) - 1
        rho_t = rho_inf - 2.0 * t * beta2 ** t / (1 - beta2 ** t)
        if rho_t > 4:
            r = np.sqrt(
                (rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t)
            )
            update = lr * r * m_hat / (np.sqrt(v_hat) + eps)
        else:
            update = lr * m_hat
    else:
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
    new_param = (param - update).astype(param.dtype, copy=False)
    return new_param, AdamState(t, m, v)


class Adam(object):
    """
    Adam over a named set of parameter tensors. Parameters whose `grad` is None are
    skipped, which is how frozen parameters stay bitwise unchanged.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, rectify=False):
        self.params = OrderedDict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.rectify = rectify
        self.state = OrderedDict(
            (name, init_adam_state(p.data)) for name, p in self.params.items()
        )
        self._log = _getLogger("Adam")

    def __repr__(self):
        return "<Adam lr=%g params=%d rectify=%s>" % (self.lr, len(self.params), self.rectify)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        # Check everything first so a rejected step leaves all parameters untouched.
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(name)
        for name, p in self.params.items():
            if p.grad is None:
                continue
            p.data, self.state[name] = adam_step(
                p.data,
                p.grad,
                self.state[name],
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                self.rectify,
            )


class Lookahead(object):
    """
    Keeps a slow copy of the weights. Every `k` inner steps the slow weights move a
    fraction `alpha` towards the fast weights and the fast weights are reset onto them.
    """

    def __init__(self, optimizer, k=5, alpha=0.5):
        if k < 1:
            raise ValueError("Lookahead k must be >= 1, got %r" % k)
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("Lookahead alpha must be in [0, 1], got %r" % alpha)
        self.optimizer = optimizer
        self.k = k
        self.alpha = alpha
        self.counter = 0
        self.slow = OrderedDict((name, p.data.copy()) for name, p in self.params.items())
        self._log = _getLogger("Lookahead")

    def __repr__(self):
        return "<Lookahead k=%d alpha=%g over %r>" % (self.k, self.alpha, self.optimizer)

    @property
    def params(self):
        return self.optimizer.params

    @property
    def lr(self):
        return self.optimizer.lr

    def zero_grad(self):
        self.optimizer.zero_grad()

    def step(self):
        self.optimizer.step()
        self.counter += 1
        if self.counter >= self.k:
            self.sync()
            self.counter = 0

    def sync(self):
        for name, p in self.params.items():
            slow = self.slow[name]
            slow += self.alpha * (p.data - slow)
            p.data = slow.astype(p.dtype, copy=True)
        self._log.debug("Synchronised %d slow weights", len(self.slow))


def build_optimizer(params, lr, rectify=False, lookahead=False, lookahead_k=5,
                    lookahead_alpha=0.5):
    optimizer = Adam(params, lr=lr, rectify=rectify)
    if lookahead:
        return Lookahead(optimizer, k=lookahead_k, alpha=lookahead_alpha)
    return optimizer
