"""Desk-scale laboratory for token-level dynamic layer pruning.

A small decoder-only transformer whose attention and MLP modules are
gated per token by tiny routers, trained with Gumbel-Softmax
straight-through estimation under a global sparsity budget, plus the
measurement tools (cosine redundancy traces, sparsity breakdowns,
static-drop baselines, sparsity sweeps) to study the resulting routing
behavior.
"""

__version__ = "0.1.0"
