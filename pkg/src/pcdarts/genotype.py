"""Discrete cells derived from architecture parameters.

A genotype lists, per cell type, two ``(op_name, predecessor)`` entries for
each intermediate node.  Predecessors 0 and 1 are the two cell inputs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .ops import OPS, FactorizedReduce, build_classifier, build_op, build_stem, macs, param_count, relu_conv_bn
from .search_space import CELL_TYPES, edge_offset, n_edges

MOBILE_MACS = 600_000_000


@dataclass(frozen=True)
class Genotype:
    normal: tuple
    reduce: tuple
    concat: tuple = (2, 3, 4, 5)

    @property
    def nodes(self) -> int:
        return len(self.normal) // 2 + 2

    def cell(self, kind: str) -> tuple:
        return self.normal if kind == "normal" else self.reduce

    def to_json(self) -> str:
        doc = {
            "normal": [[op, int(i)] for op, i in self.normal],
            "reduce": [[op, int(i)] for op, i in self.reduce],
            "concat": [int(c) for c in self.concat],
        }
        body = ",\n".join(f"  {json.dumps(k)}: {json.dumps(v)}" for k, v in doc.items())
        return "{\n" + body + "\n}\n"

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"genotype is not valid JSON: {exc}") from None
        if not isinstance(doc, dict) or set(doc) != {"normal", "reduce", "concat"}:
            raise ValueError("genotype JSON must have exactly the keys normal, reduce, concat")

        def entries(key):
            out = []
            for item in doc[key]:
                if (not isinstance(item, list) or len(item) != 2 or not isinstance(item[0], str)
                        or not isinstance(item[1], int) or isinstance(item[1], bool)):
                    raise ValueError(f"genotype {key}: entry {item!r} is not [op_name, predecessor]")
                out.append((item[0], item[1]))
            return tuple(out)

        concat = doc["concat"]
        if not isinstance(concat, list) or not all(isinstance(c, int) for c in concat):
            raise ValueError("genotype concat must be a list of node indices")
        return cls(entries("normal"), entries("reduce"), tuple(concat))


def save(genotype: Genotype, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(genotype.to_json())


def load(path) -> Genotype:
    with open(path, encoding="utf-8") as fh:
        return Genotype.from_json(fh.read())


# ----------------------------------------------------------------------------
# derivation

def _softmax(x, axis=-1):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    # summing in sorted order makes rows that are permutations of each other tie exactly
    return z / np.sort(z, axis=axis).sum(axis=axis, keepdims=True)


def combined_weights(alpha, beta, nodes, edge_normalization=True):
    """softmax(alpha) per edge, times the per-node softmax of beta when used."""
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    w = _softmax(alpha, axis=1)
    if edge_normalization:
        for j in range(2, nodes):
            off = edge_offset(j)
            w[off:off + j] *= _softmax(beta[off:off + j])[:, None]
    return w


def derive_cell(alpha, beta, nodes, edge_normalization=True, keep_zero=False, score="max", ops=OPS):
    if score not in ("max", "sum"):
        raise ValueError(f"score must be 'max' or 'sum', got {score!r}")
    w = combined_weights(alpha, beta, nodes, edge_normalization)
    allowed = [k for k, name in enumerate(ops) if keep_zero or name != "zero"]
    sub = w[:, allowed]
    edge_score = sub.max(axis=1) if score == "max" else sub.sum(axis=1)
    # argmax returns the first maximum, i.e. op-list order on ties
    best_op = [ops[allowed[k]] for k in sub.argmax(axis=1)]
    out = []
    for j in range(2, nodes):
        off = edge_offset(j)
        # stable sort on -score keeps lower predecessors first among ties
        order = sorted(range(j), key=lambda i: -edge_score[off + i])
        out.extend((best_op[off + i], i) for i in order[:2])
    return tuple(out)


def derive(arch, nodes=None, edge_normalization=True, keep_zero=False, score="max") -> Genotype:
    """Keep the two strongest incoming edges of every node, each with its best op.

    An edge's strength is the largest combined coefficient
    softmax(alpha)_o * softmax(beta)_i over the admissible ops (``score="sum"``
    adds them instead).  The zero op is inadmissible unless ``keep_zero``.
    Ties go to the lower predecessor, then to the earlier op.
    """
    nodes = arch.nodes if nodes is None else nodes
    if nodes < 3:
        raise ValueError(f"derivation needs at least 3 nodes, got {nodes}")
    tensors = arch.tensors()
    E = tensors["alpha.normal"].shape[0]
    if E != n_edges(nodes):
        raise ValueError(f"arity mismatch: architecture has {E} edges, nodes={nodes} expects {n_edges(nodes)}")
    cells = {t: derive_cell(tensors[f"alpha.{t}"], tensors[f"beta.{t}"], nodes, edge_normalization,
                            keep_zero, score, arch.ops) for t in CELL_TYPES}
    return Genotype(cells["normal"], cells["reduce"], tuple(range(2, nodes)))


# ----------------------------------------------------------------------------
# validation

def validate(genotype: Genotype, nodes=None, allow_zero=False, ops=OPS) -> list:
    """Structural violations as ``(code, detail)`` tuples; empty means valid."""
    nodes = genotype.nodes if nodes is None else nodes
    problems = []
    for kind in CELL_TYPES:
        entries = genotype.cell(kind)
        if len(entries) != 2 * (nodes - 2):
            problems.append(("wrong-arity", f"{kind}: {len(entries)} entries, expected {2 * (nodes - 2)}"))
            continue
        for n in range(nodes - 2):
            j = n + 2
            pair = entries[2 * n:2 * n + 2]
            for op, i in pair:
                if op not in ops:
                    problems.append(("unknown-op", f"{kind} node {j}: {op!r}"))
                elif op == "zero" and not allow_zero:
                    problems.append(("excluded-op", f"{kind} node {j}: zero"))
                if not 0 <= i < j:
                    problems.append(("bad-predecessor", f"{kind} node {j}: predecessor {i}"))
            if pair[0][1] == pair[1][1]:
                problems.append(("duplicate-predecessor", f"{kind} node {j}: {pair[0][1]} twice"))
    if tuple(genotype.concat) != tuple(range(2, nodes)):
        problems.append(("bad-concat", f"concat {list(genotype.concat)} != {list(range(2, nodes))}"))
    return problems


def is_valid(genotype, nodes=None, allow_zero=False) -> bool:
    return not validate(genotype, nodes, allow_zero)


def jaccard(a: Genotype, b: Genotype) -> float:
    """Jaccard similarity of the labelled edge sets (cell type, node, predecessor, op)."""
    def edges(g):
        out = set()
        for kind in CELL_TYPES:
            for k, (op, i) in enumerate(g.cell(kind)):
                out.add((kind, k // 2 + 2, i, op))
        return out
    ea, eb = edges(a), edges(b)
    union = ea | eb
    return 1.0 if not union else len(ea & eb) / len(union)


# ----------------------------------------------------------------------------
# cost accounting on the evaluation network

@dataclass
class CostReport:
    params: int
    macs: int
    resolution: int
    mobile: bool
    breakdown: dict = field(default_factory=dict)

    def to_dict(self):
        return {"params": self.params, "macs": self.macs, "resolution": self.resolution,
                "mobile_setting_ok": self.mobile, "breakdown": self.breakdown}


def _eval_cell_cost(entries, c_pp, c_p, c, reduction, reduction_prev, H, rng):
    """Params and MACs of one evaluation cell whose s1 input is H x H."""
    params = macs_total = 0
    if reduction_prev:
        pre0 = FactorizedReduce(c_pp, c, True, rng=rng)
        m, _, _ = macs(pre0, 2 * H, 2 * H)
    else:
        pre0 = relu_conv_bn(c_pp, c, 1, 1, 0, True, rng=rng)
        m, _, _ = macs(pre0, H, H)
    pre1 = relu_conv_bn(c_p, c, 1, 1, 0, True, rng=rng)
    m1, _, _ = macs(pre1, H, H)
    params += param_count(pre0) + param_count(pre1)
    macs_total += m + m1
    for k, (name, i) in enumerate(entries):
        stride = 2 if reduction and i < 2 else 1
        # intermediate nodes of a reduction cell are already at half resolution
        h_in = H // 2 if reduction and i >= 2 else H
        op = build_op(name, c, stride, rng=rng, affine=True, pool_bn=False)
        m, _, _ = macs(op, h_in, h_in)
        params += param_count(op)
        macs_total += m
    return params, macs_total


def count_costs(genotype: Genotype, C0=36, layers=20, classes=10, resolution=32,
                stem_multiplier=3) -> CostReport:
    """Parameter and multiply-add counts of the network built from ``genotype``.

    Layout: 3x3 conv stem to stem_multiplier*C0 channels, ``layers`` cells
    with reductions at layers//3 and 2*layers//3 (channels doubled there),
    global pooling and a linear classifier.  Cells use affine BN and no BN
    after pools.  Multiply-adds count convolutions and the classifier only.
    """
    problems = validate(genotype)
    if problems:
        raise ValueError("invalid genotype: " + "; ".join(f"{c} ({d})" for c, d in problems))
    if resolution % 4:
        raise ValueError(f"resolution must be divisible by 4 (two reductions), got {resolution}")
    rng = np.random.default_rng(0)
    stem = build_stem(3, stem_multiplier * C0, rng=rng)
    stem_params = param_count(stem)
    stem_macs, H, _ = macs(stem, resolution, resolution)
    mult = len(genotype.concat)
    c_pp = c_p = stem_multiplier * C0
    c = C0
    red = (layers // 3, 2 * layers // 3)
    cell_params, cell_macs = [], []
    reduction_prev = False
    for li in range(layers):
        reduction = li in red
        if reduction:
            c *= 2
        p, m = _eval_cell_cost(genotype.cell("reduce" if reduction else "normal"),
                               c_pp, c_p, c, reduction, reduction_prev, H, rng)
        cell_params.append(p)
        cell_macs.append(m)
        if reduction:
            H //= 2
        reduction_prev = reduction
        c_pp, c_p = c_p, mult * c
    head = build_classifier(c_p, classes, rng=rng)
    head_params = param_count(head)
    head_macs, _, _ = macs(head, H, H)
    total_params = stem_params + sum(cell_params) + head_params
    total_macs = stem_macs + sum(cell_macs) + head_macs
    breakdown = {"stem": stem_params, "cells": cell_params, "classifier": head_params}
    return CostReport(int(total_params), int(total_macs), resolution, total_macs <= MOBILE_MACS, breakdown)


# ----------------------------------------------------------------------------
# DOT

def to_dot(genotype: Genotype) -> str:
    """Graphviz digraph with one cluster per cell type."""
    lines = ["digraph genotype {", "  rankdir=LR;", "  node [shape=box];"]
    for kind in CELL_TYPES:
        p = kind[0]
        lines.append(f"  subgraph cluster_{kind} {{")
        lines.append(f'    label="{kind}";')
        lines.append(f'    {p}_in0 [label="c_{{k-2}}"];')
        lines.append(f'    {p}_in1 [label="c_{{k-1}}"];')
        n_inter = len(genotype.cell(kind)) // 2
        for n in range(n_inter):
            lines.append(f'    {p}_n{n} [label="{n}"];')
        lines.append(f'    {p}_out [label="c_{{k}}"];')
        for k, (op, i) in enumerate(genotype.cell(kind)):
            src = f"{p}_in{i}" if i < 2 else f"{p}_n{i - 2}"
            lines.append(f'    {src} -> {p}_n{k // 2} [label="{op}"];')
        for node in genotype.concat:
            lines.append(f"    {p}_n{node - 2} -> {p}_out;")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


# transcription of the searched CIFAR-10 cells
PC_DARTS_CIFAR = Genotype(
    normal=(("sep_conv_3x3", 1), ("skip_connect", 0), ("sep_conv_3x3", 0), ("dil_conv_3x3", 1),
            ("sep_conv_5x5", 0), ("sep_conv_3x3", 1), ("avg_pool_3x3", 0), ("dil_conv_3x3", 1)),
    reduce=(("sep_conv_5x5", 1), ("max_pool_3x3", 0), ("sep_conv_5x5", 1), ("sep_conv_5x5", 2),
            ("sep_conv_3x3", 0), ("sep_conv_3x3", 3), ("sep_conv_3x3", 1), ("sep_conv_3x3", 2)),
    concat=(2, 3, 4, 5),
)
