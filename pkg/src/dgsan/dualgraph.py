"""Dual-graph construction and graph attention.

Multi-scale encoder maps become fixed-width nodes (global average pool +
linear), which are wired into fully connected intra-modal graphs (local and
global stage features of one scan) and an inter-modal graph (fused features
of both scans plus the clinical embedding).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .glfe import StageFeatures

SCHEMES = {
    1: "per-modality graphs",
    2: "no local/global nodes",
    3: "no fused nodes",
    4: "per-time-point graphs",
    5: "intra + inter (default)",
}


def fully_connected_edges(n: int) -> List[Tuple[int, int]]:
    """All ordered pairs (i, j), i != j, in lexicographic order."""
    if n < 1:
        raise ValueError("a graph needs at least one node")
    return [(i, j) for i in range(n) for j in range(n) if i != j]


@dataclass
class FeatureGraph:
    X: torch.Tensor  # (B, n, d) or (n, d)
    edges: List[Tuple[int, int]]
    node_tags: List[str]

    def __post_init__(self):
        n = self.X.shape[-2]
        if len(self.node_tags) != n:
            raise ValueError(f"{len(self.node_tags)} tags for {n} nodes")
        for i, j in self.edges:
            if i == j:
                raise ValueError("self-loops are not stored in the edge set")
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge {(i, j)} out of range for {n} nodes")

    @property
    def n(self) -> int:
        return self.X.shape[-2]

    @classmethod
    def fully_connected(cls, X, node_tags) -> "FeatureGraph":
        return cls(X, fully_connected_edges(X.shape[-2]), list(node_tags))

    def adjacency(self, self_loops=True) -> torch.Tensor:
        """Boolean (n, n) matrix, row i marks the nodes i attends to."""
        adj = torch.zeros(self.n, self.n, dtype=torch.bool, device=self.X.device)
        if self.edges:
            idx = torch.tensor(self.edges, device=self.X.device)
            adj[idx[:, 0], idx[:, 1]] = True
        if self_loops:
            adj |= torch.eye(self.n, dtype=torch.bool, device=self.X.device)
        return adj

    def dump(self, out_dir, sample: int = 0) -> Path:
        """Debug dump: graph.json plus one .f32 file per node vector."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        X = self.X if self.X.dim() == 2 else self.X[sample]
        nodes = []
        for i, tag in enumerate(self.node_tags):
            name = f"node{i:02d}.f32"
            X[i].detach().cpu().numpy().astype("<f4").tofile(out_dir / name)
            nodes.append({"tag": tag, "vector_file": name})
        path = out_dir / "graph.json"
        path.write_text(json.dumps({"nodes": nodes, "edges": [list(e) for e in self.edges]}))
        return path


class NodeProjector(nn.Module):
    """Global average pool + linear map C -> d; d-length vectors pass through."""

    def __init__(self, in_channels, d):
        super().__init__()
        self.d = d
        self.linear = nn.Linear(in_channels, d)

    def forward(self, x):
        if not torch.isfinite(x).all():
            raise ValueError("node input has non-finite values")
        if x.dim() <= 2:
            if x.shape[-1] != self.d:
                raise ValueError(f"vector node has length {x.shape[-1]}, expected {self.d}")
            return x
        return self.linear(x.mean(dim=(-3, -2, -1)))


def project_node(x, d: int, projector: Optional[NodeProjector] = None):
    if x.dim() <= 2:
        if x.shape[-1] != d:
            raise ValueError(f"vector node has length {x.shape[-1]}, expected {d}")
        return x
    if projector is None:
        raise ValueError("feature maps need a projector")
    return projector(x)


class GATLayer(nn.Module):
    """Single graph attention layer with heads concatenated.

    Self-loops are added inside the attention so singleton nodes are defined.
    """

    def __init__(self, in_dim, out_dim, heads=1, leaky_slope=0.2, self_loops=True):
        super().__init__()
        if out_dim % heads:
            raise ValueError(f"output width {out_dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = out_dim // heads
        self.leaky_slope = leaky_slope
        self.self_loops = self_loops
        self.W = nn.Linear(in_dim, out_dim, bias=False)
        self.attn_src = nn.Parameter(torch.empty(heads, self.head_dim))
        self.attn_dst = nn.Parameter(torch.empty(heads, self.head_dim))
        nn.init.xavier_uniform_(self.attn_src)
        nn.init.xavier_uniform_(self.attn_dst)
        self.last_attention = None

    @property
    def attn(self):
        """Attention vectors as (heads, 2 * head_dim): [query half | neighbour half]."""
        return torch.cat([self.attn_src, self.attn_dst], dim=-1)

    def forward(self, X, adjacency):
        squeeze = X.dim() == 2
        if squeeze:
            X = X[None]
        B, n, _ = X.shape
        if not adjacency.any(dim=-1).all():
            raise ValueError("isolated node: enable self-loops or add edges")
        h = self.W(X).view(B, n, self.heads, self.head_dim)
        s_src = (h * self.attn_src).sum(-1)  # (B, n, heads)
        s_dst = (h * self.attn_dst).sum(-1)
        e = F.leaky_relu(s_src[:, :, None, :] + s_dst[:, None, :, :], self.leaky_slope)
        e = e.masked_fill(~adjacency[None, :, :, None], float("-inf"))
        alpha = e.softmax(dim=2)  # (B, i, j, heads)
        self.last_attention = alpha.detach()
        out = torch.einsum("bijh,bjhc->bihc", alpha, h).reshape(B, n, -1)
        return out[0] if squeeze else out


class GAT(nn.Module):
    def __init__(self, dim, heads=1, layers=1, leaky_slope=0.2, self_loops=True):
        super().__init__()
        self.self_loops = self_loops
        self.layers = nn.ModuleList(
            [GATLayer(dim, dim, heads, leaky_slope, self_loops) for _ in range(layers)]
        )

    def forward(self, graph: FeatureGraph):
        adj = graph.adjacency(self.self_loops)
        x = graph.X
        for i, layer in enumerate(self.layers):
            if i:
                x = F.elu(x)
            x = layer(x, adj)
        return x


def gat_forward(graph: FeatureGraph, gat: nn.Module):
    return gat(graph)


# ---------------------------------------------------------------------------
# graph construction


@dataclass
class GraphSet:
    """Graphs of one scheme: ``intra`` graphs (image structure) and one optional ``inter`` graph."""

    intra: List[FeatureGraph]
    inter: Optional[FeatureGraph]

    @property
    def all(self) -> List[FeatureGraph]:
        return self.intra + ([self.inter] if self.inter is not None else [])


class NodeBank(nn.Module):
    """One projector per encoder output kind (L_i, G_i, F_4), shared across time points."""

    def __init__(self, stage_channels: Sequence[int], d: int):
        super().__init__()
        self.d = d
        self.local = nn.ModuleList([NodeProjector(c, d) for c in stage_channels])
        self.glob = nn.ModuleList([NodeProjector(c, d) for c in stage_channels])
        self.fused = NodeProjector(stage_channels[-1], d)

    def intra_nodes(self, feats: StageFeatures, t: str):
        vecs = [p(x) for p, x in zip(self.local, feats.L)] + [p(x) for p, x in zip(self.glob, feats.G)]
        tags = [f"L{i + 1}@{t}" for i in range(len(feats.L))] + [
            f"G{i + 1}@{t}" for i in range(len(feats.G))
        ]
        return torch.stack(vecs, dim=-2), tags

    def fused_node(self, feats: StageFeatures):
        return self.fused(feats.F[-1])


def _graph(vectors: List[torch.Tensor], tags: List[str]) -> FeatureGraph:
    return FeatureGraph.fully_connected(torch.stack(vectors, dim=-2), tags)


def build_graphs(
    feats: Dict[str, StageFeatures],
    f_text: Optional[torch.Tensor],
    scheme: int,
    bank: NodeBank,
) -> GraphSet:
    """Assemble the graphs of a construction scheme.

    ``feats`` maps time-point names ("t0", "t1") to encoder features. Passing a
    single time point or ``f_text=None`` gives the single-scan and image-only
    variants used in ablations.

    1: one image graph over every node of both scans, plus a clinical graph
    2: only the inter graph {F_t0, F_t1, F_text}
    3: the intra graphs only, clinical node kept as its own graph
    4: one graph per scan over {L_1..4, G_1..4, F_4}, plus a clinical graph
    5: intra graph per scan over {L_1..4, G_1..4} and the inter graph
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown graph scheme {scheme!r}")
    if not feats:
        raise ValueError("need features for at least one time point")
    if f_text is not None and f_text.shape[-1] != bank.d:
        raise ValueError(f"clinical node has length {f_text.shape[-1]}, expected {bank.d}")
    times = list(feats)
    intra = {t: bank.intra_nodes(feats[t], t) for t in times}
    fused = {t: bank.fused_node(feats[t]) for t in times}
    clinical = _graph([f_text], ["F_text"]) if f_text is not None else None

    def image_nodes(t):
        X, tags = intra[t]
        return list(X.unbind(-2)) + [fused[t]], tags + [f"F_{t}"]

    if scheme in (2, 5):
        vecs = [fused[t] for t in times] + ([f_text] if f_text is not None else [])
        tags = [f"F_{t}" for t in times] + (["F_text"] if f_text is not None else [])
        inter = _graph(vecs, tags)
        if scheme == 2:
            return GraphSet([], inter)
        return GraphSet([FeatureGraph.fully_connected(*intra[t]) for t in times], inter)
    if scheme == 3:
        return GraphSet([FeatureGraph.fully_connected(*intra[t]) for t in times], clinical)
    if scheme == 1:
        vecs, tags = [], []
        for t in times:
            v, tg = image_nodes(t)
            vecs += v
            tags += tg
        return GraphSet([_graph(vecs, tags)], clinical)
    return GraphSet([_graph(*image_nodes(t)) for t in times], clinical)


class DualGraph(nn.Module):
    """Node projection + GAT over a scheme's graphs, returning two token streams.

    Stream A stacks the intra-graph outputs, stream B the inter-graph outputs.
    Scheme 2 has no intra graphs, so its inter-graph rows are split into image
    nodes (A) and the clinical node (B).
    """

    def __init__(self, stage_channels, d, scheme=5, heads=1, layers=1, leaky_slope=0.2):
        super().__init__()
        if scheme not in SCHEMES:
            raise ValueError(f"unknown graph scheme {scheme!r}")
        self.scheme = scheme
        self.bank = NodeBank(stage_channels, d)
        self.gat_intra = GAT(d, heads, layers, leaky_slope)
        self.gat_inter = GAT(d, heads, layers, leaky_slope)

    def graphs(self, feats, f_text) -> GraphSet:
        return build_graphs(feats, f_text, self.scheme, self.bank)

    def forward(self, feats, f_text):
        gs = self.graphs(feats, f_text)
        inter = self.gat_inter(gs.inter) if gs.inter is not None else None
        if gs.intra:
            a = torch.cat([self.gat_intra(g) for g in gs.intra], dim=-2)
            b = inter
        else:
            text = [i for i, tag in enumerate(gs.inter.node_tags) if tag == "F_text"]
            image = [i for i, tag in enumerate(gs.inter.node_tags) if tag != "F_text"]
            a, b = inter[..., image, :], (inter[..., text, :] if text else None)
        if b is None or b.shape[-2] == 0:
            raise ValueError(f"scheme {self.scheme} needs clinical features for its second stream")
        return a, b, gs
