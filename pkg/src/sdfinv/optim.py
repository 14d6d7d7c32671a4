"""Adam with per-group learning rates and post-step projections."""

import numpy as np


class Adam:
    """groups: [{"params": [...], "lr": float, "project": callable|None}]"""

    def __init__(self, groups, beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = []
        for g in groups:
            self.groups.append({
                "params": list(g["params"]),
                "lr": float(g["lr"]),
                "project": g.get("project"),
            })
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for g in self.groups:
            for p in g["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                key = id(p)
                if key not in self.m:
                    self.m[key] = np.zeros_like(grad)
                    self.v[key] = np.zeros_like(grad)
                m = self.m[key]
                v = self.v[key]
                m *= b1
                m += (1 - b1) * grad
                v *= b2
                v += (1 - b2) * grad * grad
                upd = (g["lr"] / c1) * m / (np.sqrt(v / c2) + self.eps)
                # keep 0-d params as ndarrays (numpy 0-d ops return scalars)
                p.value = np.asarray(p.value - upd, dtype=p.value.dtype)
            if g["project"] is not None:
                for p in g["params"]:
                    g["project"](p)

    def state_arrays(self):
        """Moment snapshot keyed by group/param order (for traces/debug)."""
        out = []
        for gi, g in enumerate(self.groups):
            for pi, p in enumerate(g["params"]):
                key = id(p)
                if key in self.m:
                    out.append((gi, pi, self.m[key].copy(), self.v[key].copy()))
        return out


def clamp_min_(minimum):
    def project(p):
        p.value = np.asarray(np.maximum(p.value, minimum), dtype=p.value.dtype)
    return project


def renormalize_():
    def project(p):
        n = np.linalg.norm(p.value)
        if n > 0:
            p.value = np.asarray(p.value / n, dtype=p.value.dtype)
    return project
