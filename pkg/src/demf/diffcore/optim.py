import numpy as np


class MissingGrad(RuntimeError):
    def __init__(self, name):
        super().__init__(f"parameter {name!r} has no gradient; run backward first")
        self.name = name


class AdamW:
    """Adam with decoupled weight decay.

    ``params`` is an iterable of ``(name, Parameter)`` pairs or bare parameters.
    ``lr_multipliers`` optionally maps a name prefix to a learning-rate factor;
    the longest matching prefix wins.

    One step, per parameter ``w`` with gradient ``g``::

        w <- w * (1 - lr * weight_decay)
        m <- beta1 * m + (1 - beta1) * g
        v <- beta2 * v + (1 - beta2) * g**2
        w <- w - lr * (m / (1 - beta1**t)) / (sqrt(v / (1 - beta2**t)) + eps)
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, lr_multipliers=None):
        self.named = []
        for i, item in enumerate(params):
            name, p = item if isinstance(item, tuple) else (f"param{i}", item)
            self.named.append((name, p))
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.multipliers = {}
        for name, _ in self.named:
            factor = 1.0
            best = -1
            for prefix, value in (lr_multipliers or {}).items():
                if name.startswith(prefix) and len(prefix) > best:
                    factor, best = value, len(prefix)
            self.multipliers[name] = factor
        self.state = {name: (np.zeros_like(p.data), np.zeros_like(p.data)) for name, p in self.named}
        self.t = 0

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None

    def step(self):
        for name, p in self.named:
            if p.grad is None:
                raise MissingGrad(name)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.named:
            lr = self.lr * self.multipliers[name]
            m, v = self.state[name]
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

