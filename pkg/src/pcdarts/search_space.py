"""Cell-based super-network with partial channel connections and edge normalization."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ops import OPS, build_classifier, build_op, build_stem, relu_conv_bn, FactorizedReduce
from .tensor import ShapeError, Tensor, default_dtype, scope
from .tensor import functional as F
from .tensor.layers import MaxPool2d, Module

CELL_TYPES = ("normal", "reduce")


def edge_list(nodes: int) -> list[tuple[int, int]]:
    """Edges (i, j) with 0 <= i < j and 2 <= j < nodes, grouped by destination."""
    return [(i, j) for j in range(2, nodes) for i in range(j)]


def edge_offset(j: int) -> int:
    """Index of edge (0, j) in :func:`edge_list` order."""
    return sum(range(2, j))


def n_edges(nodes: int) -> int:
    return sum(range(2, nodes))


# ----------------------------------------------------------------------------
# architecture parameters

@dataclass
class ArchParams:
    """Per cell type: alpha (edges x ops) and beta (edges,)."""

    alpha: dict
    beta: dict
    nodes: int
    ops: tuple = OPS

    def parameters(self, edge_normalization: bool = True) -> list:
        params = [self.alpha[t] for t in CELL_TYPES]
        if edge_normalization:
            params += [self.beta[t] for t in CELL_TYPES]
        return params

    def tensors(self) -> dict:
        out = {f"alpha.{t}": self.alpha[t].data for t in CELL_TYPES}
        out.update({f"beta.{t}": self.beta[t].data for t in CELL_TYPES})
        return out

    def copy(self) -> "ArchParams":
        return ArchParams.from_tensors({k: v.copy() for k, v in self.tensors().items()}, self.ops)

    @classmethod
    def from_tensors(cls, tensors: dict, ops=OPS, nodes: int | None = None) -> "ArchParams":
        for key in ("alpha.normal", "alpha.reduce", "beta.normal", "beta.reduce"):
            if key not in tensors:
                raise KeyError(f"architecture checkpoint lacks {key!r}")
        E = tensors["alpha.normal"].shape[0]
        inferred = _nodes_for_edges(E)
        if nodes is None:
            if inferred is None:
                raise ValueError(f"{E} edges does not correspond to any node count")
            nodes = inferred
        elif n_edges(nodes) != E:
            raise ValueError(f"arity mismatch: alpha.normal has {E} edges but nodes={nodes} "
                             f"expects {n_edges(nodes)}")
        for t in CELL_TYPES:
            a, b = tensors[f"alpha.{t}"], tensors[f"beta.{t}"]
            if a.shape != (E, len(ops)) or b.shape != (E,):
                raise ValueError(f"arity mismatch: alpha.{t} {a.shape} / beta.{t} {b.shape} "
                                 f"vs {E} edges x {len(ops)} ops")
        alpha = {t: Tensor(np.array(tensors[f"alpha.{t}"]), requires_grad=True, name=f"alpha.{t}")
                 for t in CELL_TYPES}
        beta = {t: Tensor(np.array(tensors[f"beta.{t}"]), requires_grad=True, name=f"beta.{t}")
                for t in CELL_TYPES}
        return cls(alpha, beta, nodes, tuple(ops))


def _nodes_for_edges(E):
    n = 2
    while n_edges(n) < E:
        n += 1
    return n if n_edges(n) == E and n >= 3 else None


def init_arch_params(nodes: int = 6, ops=OPS, seed: int = 0, std: float = 1e-3) -> ArchParams:
    """Gaussian(0, std) alpha and beta, deterministic per seed."""
    rng = np.random.default_rng([seed, 1])
    E = n_edges(nodes)
    dt = default_dtype()
    alpha, beta = {}, {}
    for t in CELL_TYPES:
        alpha[t] = Tensor(rng.normal(0.0, std, size=(E, len(ops))).astype(dt), requires_grad=True, name=f"alpha.{t}")
        beta[t] = Tensor(rng.normal(0.0, std, size=E).astype(dt), requires_grad=True, name=f"beta.{t}")
    return ArchParams(alpha, beta, nodes, tuple(ops))


# ----------------------------------------------------------------------------
# channel masks and shuffle

def selected_count(channels: int, K: int) -> int:
    return math.ceil(channels / K)


@dataclass(frozen=True)
class ChannelMask:
    """Which input channels of an edge enter the operation mixture.

    ``selected`` and ``masked`` partition range(channels).  The efficient
    variant selects the first ceil(C/K) channels.
    """

    channels: int
    K: int
    selected: np.ndarray
    masked: np.ndarray

    @classmethod
    def efficient(cls, channels: int, K: int) -> "ChannelMask":
        _check_k(channels, K)
        n = selected_count(channels, K)
        return cls(channels, K, np.arange(n), np.arange(n, channels))

    @classmethod
    def random(cls, channels: int, K: int, rng) -> "ChannelMask":
        _check_k(channels, K)
        n = selected_count(channels, K)
        perm = rng.permutation(channels)
        return cls(channels, K, np.sort(perm[:n]), np.sort(perm[n:]))

    @property
    def is_prefix(self) -> bool:
        return bool(np.array_equal(self.selected, np.arange(len(self.selected))))


def _check_k(channels, K):
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if channels < K:
        raise ValueError(f"cannot sample 1/{K} of {channels} channels: need at least K channels")


def shuffle_groups(channels: int, K: int) -> int:
    """K when it divides the channel count, else its largest divisor below K."""
    for g in range(min(K, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    if groups < 1 or channels % groups:
        raise ShapeError(f"channel_shuffle: {channels} channels not divisible into {groups} groups")
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_shuffle(x, groups: int):
    """Group transpose: channel at grid (g, r) of a (groups x C/groups) grid moves to (r, g)."""
    perm = shuffle_permutation(x.shape[1], groups)
    if groups == 1:
        return x
    return F.take(x, 1, perm)


# ----------------------------------------------------------------------------
# edges and nodes

class MixedEdge(Module):
    def __init__(self, channels, stride, K, ops=OPS, *, rng, affine=False):
        self.channels = channels
        self.stride = stride
        self.K = K
        self.op_names = tuple(ops)
        self.c_sel = selected_count(channels, K)
        self.ops = [build_op(name, self.c_sel, stride, rng=rng, affine=affine) for name in ops]
        self.bypass = MaxPool2d(2, 2) if stride == 2 else None

    def forward(self, x, alpha_row, mask=None):
        return mixed_op_forward(self, x, alpha_row, mask)


def mixed_op_forward(edge: MixedEdge, x, alpha_row, mask: ChannelMask | None = None):
    """Softmax(alpha)-weighted mixture on the selected channels; masked ones bypass.

    At stride 2 the bypassed channels go through a 2x2 stride-2 max-pool so
    the two parts line up spatially.
    """
    C = x.shape[1]
    if C != edge.channels:
        raise ShapeError(f"mixed_op: edge built for {edge.channels} channels, input has {C}")
    if mask is None:
        mask = ChannelMask.efficient(C, edge.K)
    if mask.channels != C or len(mask.selected) != edge.c_sel:
        raise ShapeError(f"mixed_op: mask ({mask.channels} ch, {len(mask.selected)} selected) "
                         f"inconsistent with edge ({C} ch, {edge.c_sel} selected)")
    if alpha_row.shape != (len(edge.ops),):
        raise ShapeError(f"mixed_op: alpha row {alpha_row.shape} vs {len(edge.ops)} ops")
    with scope("mixed_op"):
        weights = F.softmax(alpha_row, axis=0)
        full = len(mask.masked) == 0
        if full:
            xs = x
        elif mask.is_prefix:
            xs = F.narrow(x, 1, 0, edge.c_sel)
        else:
            xs = F.take(x, 1, mask.selected)
        mixed = F.mix(weights, [op(xs) for op in edge.ops])
        if full:
            return mixed
        rest = F.narrow(x, 1, edge.c_sel, C) if mask.is_prefix else F.take(x, 1, mask.masked)
        if edge.bypass is not None:
            rest = edge.bypass(rest)
        out = F.concat([mixed, rest], axis=1)
        if not mask.is_prefix:
            order = np.concatenate([mask.selected, mask.masked])
            out = F.take(out, 1, np.argsort(order))
        return out


def node_forward(edge_outputs, beta_row=None, j: int | None = None):
    """x_j = sum_i softmax(beta_row)_i * f_ij, or the plain sum without beta."""
    j = len(edge_outputs) if j is None else j
    shape = edge_outputs[0].shape
    for i, f in enumerate(edge_outputs):
        if f.shape != shape:
            raise ShapeError(f"node {j}: edge ({i},{j}) output {f.shape} differs from {shape}")
    if beta_row is None:
        out = edge_outputs[0]
        for f in edge_outputs[1:]:
            out = F.add(out, f)
        return out
    if beta_row.shape != (len(edge_outputs),):
        raise ShapeError(f"node {j}: beta row {beta_row.shape} vs {len(edge_outputs)} incoming edges")
    return F.mix(F.softmax(beta_row, axis=0), edge_outputs)


# ----------------------------------------------------------------------------
# cells and network

class Cell(Module):
    def __init__(self, nodes, c_pp, c_p, c, reduction, reduction_prev, *, K, ops, rng,
                 partial_channel=True, edge_normalization=True, affine=False):
        self.nodes = nodes
        self.reduction = reduction
        self.channels = c
        self.edge_normalization = edge_normalization
        k_eff = K if partial_channel else 1
        self.K = k_eff
        self.groups = shuffle_groups(c, k_eff) if partial_channel else 1
        if reduction_prev:
            self.preprocess0 = FactorizedReduce(c_pp, c, affine, rng=rng)
        else:
            self.preprocess0 = relu_conv_bn(c_pp, c, 1, 1, 0, affine, rng=rng)
        self.preprocess1 = relu_conv_bn(c_p, c, 1, 1, 0, affine, rng=rng)
        self.edges = [MixedEdge(c, 2 if reduction and i < 2 else 1, k_eff, ops, rng=rng, affine=affine)
                      for i, j in edge_list(nodes)]

    @property
    def cell_type(self):
        return "reduce" if self.reduction else "normal"

    def forward(self, s0, s1, alpha, beta, masks=None):
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        for j in range(2, self.nodes):
            off = edge_offset(j)
            outs = []
            for i in range(j):
                e = off + i
                mask = masks[e] if masks is not None else None
                outs.append(mixed_op_forward(self.edges[e], states[i], F.select(alpha, e), mask))
            beta_row = F.narrow(beta, 0, off, off + j) if self.edge_normalization else None
            x = node_forward(outs, beta_row, j)
            if self.groups > 1:
                x = channel_shuffle(x, self.groups)
            states.append(x)
        return F.concat(states[2:], axis=1)


def reduction_layers(layers: int) -> tuple[int, int]:
    return layers // 3, 2 * layers // 3


class SuperNet(Module):
    """Stem, L searched cells (two reductions), classifier, shared ArchParams."""

    def __init__(self, C0=16, num_classes=10, layers=8, nodes=6, K=4, ops=OPS, *,
                 partial_channel=True, edge_normalization=True, mask_mode="efficient",
                 stem_multiplier=3, affine=False, in_channels=3, seed=0):
        if nodes < 3:
            raise ValueError(f"a cell needs at least 3 nodes, got {nodes}")
        if mask_mode not in ("efficient", "random"):
            raise ValueError(f"mask_mode must be 'efficient' or 'random', got {mask_mode!r}")
        rng = np.random.default_rng([seed, 0])
        self.mask_rng = np.random.default_rng([seed, 2])
        self.mask_mode = mask_mode
        self.partial_channel = partial_channel
        self.edge_normalization = edge_normalization
        self.nodes = nodes
        self.op_names = tuple(ops)
        c_curr = stem_multiplier * C0
        self.stem = build_stem(in_channels, c_curr, rng=rng)
        c_pp, c_p, c = c_curr, c_curr, C0
        red = reduction_layers(layers)
        cells, reduction_prev = [], False
        for i in range(layers):
            reduction = i in red
            if reduction:
                c *= 2
            cells.append(Cell(nodes, c_pp, c_p, c, reduction, reduction_prev, K=K, ops=ops, rng=rng,
                              partial_channel=partial_channel, edge_normalization=edge_normalization,
                              affine=affine))
            reduction_prev = reduction
            c_pp, c_p = c_p, (nodes - 2) * c
        self.cells = cells
        self.classifier = build_classifier(c_p, num_classes, rng=rng)
        self.arch = init_arch_params(nodes, ops, seed)

    def weights(self):
        return self.parameters()

    def arch_parameters(self):
        # a cell type with no instance (e.g. L < 3 has no normal cell) gets no gradient
        present = {c.cell_type for c in self.cells}
        return [p for p in self.arch.parameters(self.edge_normalization) if p.name.split(".")[1] in present]

    def _masks(self, cell):
        if self.mask_mode == "efficient" or cell.K == 1:
            return None
        return [ChannelMask.random(e.channels, e.K, self.mask_rng) for e in cell.edges]

    def forward(self, x):
        if x.data.ndim != 4:
            raise ShapeError(f"supernet: expected (B,C,H,W) batch, got {x.shape}")
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            t = cell.cell_type
            s0, s1 = s1, cell(s0, s1, self.arch.alpha[t], self.arch.beta[t], self._masks(cell))
        return self.classifier(s1)

    def loss(self, x, y):
        logits = self.forward(x)
        return F.cross_entropy(logits, y), logits
