"""Central finite-difference checks of autograd gradients for the differentiable ops.

Each registered op builds a small random float64 instance. The scalar probe
is ``sum(output * R)`` for a fixed random ``R``; every parameter and input
coordinate is perturbed by +-h and the difference quotient is compared with
the autograd gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import torch
import torch.nn as nn

from .dualgraph import GAT, FeatureGraph
from .glfe import AFF, AGCA, GlobalStage, LocalStage
from .hcmgfm import ClassifierHead, CrossAttentionBlock, SelfAttentionBlock

STEP = 1e-5
DENOM_FLOOR = 1e-8


def _randomize(module: nn.Module, gen: torch.Generator, scale=0.5):
    # default inits leave some tensors at exact identities/zeros; jitter all of them
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


def _build_agca(gen):
    m = AGCA(4).double()
    return m, [torch.randn(2, 4, 2, 2, 2, generator=gen, dtype=torch.float64)], lambda x: m(x)


def _build_aff(gen):
    m = AFF(4, prev_channels=2).double()
    L = torch.randn(1, 4, 2, 2, 2, generator=gen, dtype=torch.float64)
    G = torch.randn(1, 4, 2, 2, 2, generator=gen, dtype=torch.float64)
    Fp = torch.randn(1, 2, 4, 4, 4, generator=gen, dtype=torch.float64)
    return m, [L, G, Fp], lambda l, g, f: m(l, g, f)


def _build_global(gen):
    m = GlobalStage(2, 4, heads=2, window_size=2, merge=True).double()
    x = torch.randn(1, 2, 4, 4, 8, generator=gen, dtype=torch.float64)
    return m, [x], lambda x: m(x)


def _build_local(gen):
    m = LocalStage(4, 8, stride=2).double()
    x = torch.randn(1, 4, 4, 4, 4, generator=gen, dtype=torch.float64)
    return m, [x], lambda x: m(x)


def _build_gat(gen):
    m = GAT(4, heads=2).double()
    X = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    tags = ["a", "b", "c"]
    return m, [X], lambda X: m(FeatureGraph.fully_connected(X, tags))


def _build_sab(gen):
    m = SelfAttentionBlock(8, 2).double()
    return m, [torch.randn(3, 8, generator=gen, dtype=torch.float64)], lambda x: m(x)


def _build_cab(gen):
    m = CrossAttentionBlock(8, 2).double()
    a = torch.randn(2, 8, generator=gen, dtype=torch.float64)
    b = torch.randn(3, 8, generator=gen, dtype=torch.float64)
    return m, [a, b], lambda a, b: torch.cat(m(a, b), dim=0)


def _build_head(gen):
    m = ClassifierHead(4).double()
    return m, [torch.randn(4, generator=gen, dtype=torch.float64)], lambda x: m(x)


OPS: Dict[str, Callable] = {
    "agca": _build_agca,
    "aff_fuse": _build_aff,
    "global_stage": _build_global,
    "local_stage": _build_local,
    "gat_forward": _build_gat,
    "self_attention_block": _build_sab,
    "cross_attention_block": _build_cab,
    "classify_head": _build_head,
}


@dataclass
class GradReport:
    op: str
    seed: int
    max_rel_error: float
    worst: str
    n_coords: int

    def line(self) -> str:
        return (
            f"{self.op:<22} seed={self.seed} coords={self.n_coords:<5d} "
            f"max_rel_err={self.max_rel_error:.3e} ({self.worst})"
        )


def gradient_check(op_name: str, seed: int = 0, h: float = STEP) -> GradReport:
    """Max relative error between autograd and central differences over all coordinates.

    Each coordinate's error |g_auto - g_fd| is divided by the op's gradient
    scale, max over all coordinates of |g_auto| and |g_fd|, floored at 1e-8.
    Scaling per coordinate instead would flag gradients that are exactly zero
    (e.g. attention key biases, which softmax ignores) whenever the
    finite-difference round-off exceeds 1e-12.
    """
    if op_name not in OPS:
        raise KeyError(f"unknown op {op_name!r}; registered: {sorted(OPS)}")
    gen = torch.Generator().manual_seed(seed)
    module, inputs, fn = OPS[op_name](gen)
    _randomize(module, gen)
    inputs = [x.clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    probe = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def objective():
        return (fn(*inputs) * probe).sum()

    params: List[Tuple[str, torch.Tensor]] = list(module.named_parameters())
    params += [(f"input{i}", x) for i, x in enumerate(inputs)]
    tensors = [t for _, t in params]
    grads = torch.autograd.grad(objective(), tensors, allow_unused=True)

    rows = []  # (coordinate name, autograd value, finite-difference value)
    with torch.no_grad():
        for (name, t), g in zip(params, grads):
            g = torch.zeros_like(t) if g is None else g
            flat, gflat = t.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = objective().item()
                flat[i] = orig - h
                down = objective().item()
                flat[i] = orig
                rows.append((f"{name}[{i}]", gflat[i].item(), (up - down) / (2 * h)))
    scale = max(DENOM_FLOOR, max(max(abs(a), abs(n)) for _, a, n in rows))
    worst_name, a, n = max(rows, key=lambda r: abs(r[1] - r[2]))
    return GradReport(op_name, seed, abs(a - n) / scale, worst_name, len(rows))
