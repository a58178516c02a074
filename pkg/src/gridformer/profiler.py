"""Exact parameter and MAC accounting.

MACs are counted by running the model in shape-only (meta) mode under a MAC
counter, so the numbers come from the same op code paths as real execution:
conv ``Cout*Cin*k*k*H'*W'``, transposed conv ``Cin*Cout*k*k*H*W``, matmul
``M*K*N``; pooling, reshuffles and element-wise ops count zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridConfig, GridFormer
from .tensor import Tensor, count_macs, meta


@dataclass
class ProfileNode:
    path: str
    params: int = 0
    macs: int = 0
    children: dict[str, "ProfileNode"] = field(default_factory=dict)

    def child(self, name: str) -> "ProfileNode":
        if name not in self.children:
            prefix = f"{self.path}." if self.path else ""
            self.children[name] = ProfileNode(prefix + name)
        return self.children[name]

    def find(self, path: str) -> "ProfileNode":
        node = self
        for part in filter(None, path.split(".")):
            node = node.children[part]
        return node

    def walk(self, depth: int = 0, max_depth: int | None = None):
        yield depth, self
        if max_depth is not None and depth >= max_depth:
            return
        for c in self.children.values():
            yield from c.walk(depth + 1, max_depth)


@dataclass
class Profile:
    params: int
    macs: int
    tree: ProfileNode
    by_kind: dict[str, int]
    input_shape: tuple[int, ...]

    def lines(self, max_depth: int = 2) -> list[str]:
        out = ["path,params,macs"]
        for _, node in self.tree.walk(max_depth=max_depth):
            out.append(f"{node.path or '<total>'},{node.params},{node.macs}")
        return out


def _insert(root: ProfileNode, path: str, params: int = 0, macs: int = 0) -> None:
    node = root
    node.params += params
    node.macs += macs
    for part in filter(None, path.split(".")):
        node = node.child(part)
        node.params += params
        node.macs += macs


def profile_model(model: GridFormer, height: int = 256, width: int = 256, batch: int = 1) -> Profile:
    cfg = model.config
    dtype = cfg.np_dtype
    with meta():
        pyramid = [
            Tensor._wrap(np.broadcast_to(np.zeros((), dtype), (batch, cfg.image_channels, height >> i, width >> i)))
            for i in range(cfg.rows)
        ]
        with count_macs() as counter:
            model(pyramid)
    root = ProfileNode("")
    for path, p in model.named_parameters():
        _insert(root, path.rpartition(".")[0], params=p.size)
    for path, n in counter.by_path.items():
        _insert(root, path, macs=n)
    return Profile(root.params, root.macs, root, dict(counter.by_kind), (batch, cfg.image_channels, height, width))


def profile(config: GridConfig, height: int = 256, width: int = 256, batch: int = 1) -> Profile:
    return profile_model(GridFormer(config), height, width, batch)


def compact_attention_macs(channels: int, tokens: int, heads_per_half: int = 1) -> int:
    """Attention matmul MACs of split attention: 2 halves x {q k^T, attn v}."""
    d = channels // 2 // heads_per_half
    return 2 * 2 * heads_per_half * d * d * tokens


def naive_token_attention_macs(channels: int, tokens: int) -> int:
    """Token-by-token attention in the same two-half layout: 2 x 2 x N^2 x C/2."""
    return 2 * 2 * tokens * tokens * (channels // 2)
