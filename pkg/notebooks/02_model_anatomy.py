# %% [markdown]
# # Inside the network
#
# Shapes and counts at each step of a forward pass with the default
# configuration: the shared encoder, the two graph streams, the fusion
# stack and the head.

# %%
import torch

from dgsan.dualgraph import NodeBank, build_graphs
from dgsan.glfe import GLFE, ClinicalEncoder, EncoderConfig, hwd
from dgsan.hcmgfm import HCMGFM
from dgsan.model import DGSAN, ModelConfig, count_parameters

torch.manual_seed(0)
cfg = ModelConfig()
print(cfg.encoder)

# %% [markdown]
# ## Encoder
# Patch embedding turns the 16x64x64 crop into a 16x16x8 token grid (h, w, d).
# Each stage then halves every axis while the channels double.

# %%
glfe = GLFE(cfg.encoder)
t0, t1 = torch.rand(2, 1, 16, 64, 64), torch.rand(2, 1, 16, 64, 64)
with torch.no_grad():
    f0, f1 = glfe(t0), glfe(t1)
for i in range(4):
    print(f"stage {i + 1}: L {hwd(f0.L[i].shape)}  G {hwd(f0.G[i].shape)}  F {hwd(f0.F[i].shape)}  C={f0.F[i].shape[1]}")

# %% [markdown]
# ## Graphs
# Scheme 5 builds one intra graph per scan (four local and four global stage
# nodes) and one inter graph over the fused t0, fused t1 and clinical nodes.

# %%
clin = ClinicalEncoder(6, cfg.encoder.clinical_hidden, cfg.fusion.d)
bank = NodeBank(cfg.encoder.stage_channels, cfg.fusion.d)
with torch.no_grad():
    graphs = build_graphs({"t0": f0, "t1": f1}, clin(torch.randn(2, 6)), 5, bank)
for g in graphs.all:
    print(len(g.node_tags), "nodes,", len(g.edges), "edges:", g.node_tags)

# %% [markdown]
# Other schemes regroup the same nodes.

# %%
for scheme in range(1, 6):
    with torch.no_grad():
        gs = build_graphs({"t0": f0, "t1": f1}, clin(torch.randn(2, 6)), scheme, bank)
    print(f"scheme {scheme}:", [g.n for g in gs.all])

# %% [markdown]
# ## Fusion
# Intra tokens (16) and inter tokens (3) meet in the SAB -> CAB -> SAB stack
# and leave as 19 joint tokens, mean-pooled for the head.

# %%
fusion = HCMGFM(cfg.fusion)
with torch.no_grad():
    rep = fusion(torch.randn(2, 16, cfg.fusion.d), torch.randn(2, 3, cfg.fusion.d))
print(rep.tokens.shape, rep.pooled.shape)

# %% [markdown]
# ## Whole model

# %%
model = DGSAN(cfg)
with torch.no_grad():
    logits = model(t0, t1, torch.randn(2, 6))
print("logits", logits.shape, "probabilities", torch.softmax(logits, -1)[:, 1])
counts = count_parameters(model)
for name, n in counts["modules"].items():
    print(f"{name:<10} {n:>10,d}")
print(f"total      {counts['total']:>10,d}")
