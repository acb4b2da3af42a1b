"""Adam and Adadelta with float64 state, plus a multi-group driver."""

from dataclasses import dataclass

import torch

from .._validation import ValidationError
from .layers import NonFiniteError


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    rho: float = 0.95
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "adadelta"):
            raise ValidationError(f"unknown optimizer {self.kind!r}")
        for name in ("beta1", "beta2", "rho"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must lie in [0, 1)")
        if not self.lr > 0 or not self.epsilon > 0:
            raise ValidationError("lr and epsilon must be positive")

    @classmethod
    def adadelta(cls, lr=1.0, rho=0.95, epsilon=1e-6):
        return cls(kind="adadelta", lr=lr, rho=rho, epsilon=epsilon)


def init_state(params, cfg):
    slots = ("m", "v") if cfg.kind == "adam" else ("sq_grad", "sq_delta")
    return {
        "step": 0,
        "slots": [{s: torch.zeros(p.shape, dtype=torch.float64) for s in slots} for p in params],
    }


def optimizer_step(state, params, grads, cfg, lr=None):
    """Apply one in-place update; ``lr`` overrides ``cfg.lr`` (scheduled rate).

    Raises :class:`NonFiniteError` before touching anything if a gradient is
    NaN/Inf.
    """
    if len(params) != len(grads) or len(params) != len(state["slots"]):
        raise ValidationError("params, grads and optimizer state disagree in length")
    for i, g in enumerate(grads):
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter #{i}")
    lr = cfg.lr if lr is None else lr
    state["step"] += 1
    t = state["step"]
    with torch.no_grad():
        for p, g, slot in zip(params, grads, state["slots"]):
            if g is None:
                continue
            g = g.to(torch.float64)
            if cfg.kind == "adam":
                m, v = slot["m"], slot["v"]
                m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
                v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
                m_hat = m / (1 - cfg.beta1 ** t)
                v_hat = v / (1 - cfg.beta2 ** t)
                update = -lr * m_hat / (v_hat.sqrt() + cfg.epsilon)
            else:
                sq_g, sq_d = slot["sq_grad"], slot["sq_delta"]
                sq_g.mul_(cfg.rho).addcmul_(g, g, value=1 - cfg.rho)
                delta = -((sq_d + cfg.epsilon).sqrt() / (sq_g + cfg.epsilon).sqrt()) * g
                sq_d.mul_(cfg.rho).addcmul_(delta, delta, value=1 - cfg.rho)
                update = lr * delta
            p.add_(update.to(p.dtype))
    return state, params


class Optimizer:
    """Several parameter groups, each with its own rule; one shared schedule factor."""

    def __init__(self, groups):
        self.groups = []
        for params, cfg in groups:
            params = [p for p in params if p.requires_grad]
            if params:
                self.groups.append({"params": params, "cfg": cfg, "state": init_state(params, cfg)})

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def step(self, lr_factor=1.0):
        for g in self.groups:
            grads = [p.grad for p in g["params"]]
            for i, gr in enumerate(grads):
                if gr is not None and not torch.isfinite(gr).all():
                    raise NonFiniteError(f"non-finite gradient in a {g['cfg'].kind} group (#{i})")
        for g in self.groups:
            optimizer_step(g["state"], g["params"], [p.grad for p in g["params"]], g["cfg"],
                           lr=g["cfg"].lr * lr_factor)

    def named_state(self, names):
        """Flatten slots to ``{(param_name, slot): tensor}`` for checkpointing."""
        out = {}
        for g in self.groups:
            for p, slot in zip(g["params"], g["state"]["slots"]):
                for s, tensor in slot.items():
                    out[(names[id(p)], s)] = tensor
        return out

    def load_named_state(self, names, tensors, steps):
        for gi, g in enumerate(self.groups):
            g["state"]["step"] = steps[gi]
            for p, slot in zip(g["params"], g["state"]["slots"]):
                for s in slot:
                    slot[s].copy_(tensors[(names[id(p)], s)])

    @property
    def steps(self):
        return [g["state"]["step"] for g in self.groups]
