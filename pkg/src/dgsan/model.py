"""Full network assembly, ablation variants and parameter accounting."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import torch
import torch.nn as nn

from .data import CLINICAL_DIM
from .dualgraph import SCHEMES, DualGraph
from .glfe import GLFE, ClinicalEncoder, EncoderConfig
from .hcmgfm import HCMGFM, ClassifierHead, FusionConfig

FUSION_MODES = ("hcmgfm", "concat", "direct")
TIME_POINTS = ("both", "t0", "t1")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    scheme: int = 5
    gat_heads: int = 1
    gat_layers: int = 1
    time_points: str = "both"
    use_clinical: bool = True
    fusion_mode: str = "hcmgfm"

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.fusion, dict):
            self.fusion = FusionConfig(**self.fusion)
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown graph scheme {self.scheme!r}")
        if self.time_points not in TIME_POINTS:
            raise ValueError(f"time_points must be one of {TIME_POINTS}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.fusion.d != self.encoder.feature_dim:
            raise ValueError(
                f"fusion width {self.fusion.d} differs from node width {self.encoder.feature_dim}"
            )

    @property
    def times(self):
        return ("t0", "t1") if self.time_points == "both" else (self.time_points,)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


class DGSAN(nn.Module):
    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        enc = config.encoder
        d = enc.feature_dim
        self.glfe = GLFE(enc)
        self.clinical = ClinicalEncoder(CLINICAL_DIM, enc.clinical_hidden, d) if config.use_clinical else None
        self.graph = DualGraph(enc.stage_channels, d, config.scheme, config.gat_heads, config.gat_layers)
        if config.fusion_mode == "hcmgfm":
            self.fusion = HCMGFM(config.fusion)
            self.head = ClassifierHead(d)
        elif config.fusion_mode == "concat":
            self.fusion = None
            self.head = nn.Linear(2 * d, 2)
        else:
            self.fusion = None
            n_nodes = 8 * len(config.times) + len(config.times) + int(config.use_clinical)
            self.head = nn.Linear(n_nodes * d, 2)

    def encode(self, t0=None, t1=None):
        vols = {"t0": t0, "t1": t1}
        times = self.config.times
        stacked = torch.cat([vols[t] for t in times], dim=0)
        feats = self.glfe(stacked)
        B = vols[times[0]].shape[0]
        return {t: feats.select(slice(i * B, (i + 1) * B)) for i, t in enumerate(times)}

    def forward(self, t0, t1, clinical):
        feats = self.encode(t0, t1)
        f_text = self.clinical(clinical) if self.clinical is not None else None
        mode = self.config.fusion_mode
        if mode == "direct":
            bank = self.graph.bank
            nodes = [bank.intra_nodes(feats[t], t)[0] for t in feats]
            nodes += [bank.fused_node(feats[t])[:, None] for t in feats]
            if f_text is not None:
                nodes.append(f_text[:, None])
            return self.head(torch.cat(nodes, dim=1).flatten(1))
        a, b, _ = self.graph(feats, f_text)
        if mode == "concat":
            return self.head(torch.cat([a.mean(-2), b.mean(-2)], dim=-1))
        return self.head(self.fusion(a, b).pooled)


class PretrainNet(nn.Module):
    """Encoder + temporary head on the concatenated pooled F_4 of both scans."""

    def __init__(self, config: Optional[EncoderConfig] = None):
        super().__init__()
        self.glfe = GLFE(config or EncoderConfig())
        self.head = nn.Linear(2 * self.glfe.config.stage_channels[-1], 2)

    def forward(self, t0, t1, clinical=None):
        B = t0.shape[0]
        f4 = self.glfe(torch.cat([t0, t1], dim=0)).F[-1].mean(dim=(2, 3, 4))
        return self.head(torch.cat([f4[:B], f4[B:]], dim=1))


# ---------------------------------------------------------------------------
# ablation variants

ABLATION_VARIANTS = {
    "full": {},
    "t0_only": {"time_points": "t0", "use_clinical": False},
    "t0_clinical": {"time_points": "t0"},
    "t1_only": {"time_points": "t1", "use_clinical": False},
    "t1_clinical": {"time_points": "t1"},
    "no_GFF": {"fusion_mode": "concat"},
    "no_HCC_GFF": {"fusion_mode": "direct"},
}


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    """Model config for an ablation variant.

    Besides the named variants, ``scheme1``..``scheme5`` pick a graph scheme and
    ``seq:SAB-CAB`` style names pick a fusion sequence.
    """
    cfg = asdict(base)
    if variant in ABLATION_VARIANTS:
        cfg.update(ABLATION_VARIANTS[variant])
    elif variant.startswith("scheme") and variant[6:].isdigit():
        cfg["scheme"] = int(variant[6:])
    elif variant.startswith("seq:"):
        cfg["fusion"]["sequence"] = variant[4:].replace("-", ",").split(",")
    else:
        raise ValueError(f"unknown ablation variant {variant!r}")
    return ModelConfig.from_json(cfg)


# ---------------------------------------------------------------------------


def count_parameters(model_or_config) -> Dict[str, object]:
    """Exact trainable parameter counts per tensor, per top-level module and total."""
    if isinstance(model_or_config, nn.Module):
        model = model_or_config
    else:
        cfg = model_or_config if isinstance(model_or_config, ModelConfig) else ModelConfig.from_json(model_or_config)
        model = DGSAN(cfg)
    tensors = OrderedDict(
        (name, p.numel()) for name, p in model.named_parameters() if p.requires_grad
    )
    modules: Dict[str, int] = OrderedDict()
    for name, n in tensors.items():
        top = name.split(".", 1)[0]
        modules[top] = modules.get(top, 0) + n
    return {"tensors": tensors, "modules": modules, "total": sum(tensors.values())}
