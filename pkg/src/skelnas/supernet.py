"""The relaxed search network: mixed operations on every cell edge.

A cell has two input nodes, four intermediate nodes and one output node,
giving 14 edges in the canonical order (all edges into n0, then n1, ...).
Each edge carries all eight candidate operators blended by a softmax over
that edge's row of the architecture matrix.  One matrix per cell type is
shared by every cell of that type.
"""

from __future__ import annotations

import numpy as np

from . import ops as op_zoo
from . import tensor as tc
from .errors import ConfigurationError, DimensionError, NumericFault
from .ops import BatchNorm, CandidateOpKind, FactorizedReduce, ReluConvBN

NUM_INPUT_NODES = 2
NUM_INTERMEDIATE = 4
NUM_OPS = len(CandidateOpKind)

# (src, dst) pairs; node indices 0..1 are inputs, 2..5 intermediates
EDGES = tuple(
    (src, NUM_INPUT_NODES + j)
    for j in range(NUM_INTERMEDIATE)
    for src in range(NUM_INPUT_NODES + j)
)
NUM_EDGES = len(EDGES)
assert NUM_EDGES == 14

NODE_NAMES = ("input0", "input1", "n0", "n1", "n2", "n3")


class AlphaParams:
    """The two shared edge-by-operator matrices of architecture logits."""

    def __init__(self, normal, reduce):
        self.normal = normal
        self.reduce = reduce
        for name, t in self.items():
            if t.shape != (NUM_EDGES, NUM_OPS):
                raise DimensionError(
                    f"alpha_{name} must have shape ({NUM_EDGES}, {NUM_OPS}), got {t.shape}"
                )

    def items(self):
        return (("normal", self.normal), ("reduce", self.reduce))

    def tensors(self):
        return [self.normal, self.reduce]

    def snapshot(self):
        return (self.normal.data.copy(), self.reduce.data.copy())


def init_alpha(seed, noise_scale=1e-3, dtype=None):
    """Zero-mean gaussian logits; scale 0 gives exactly uniform mixtures."""
    if noise_scale < 0:
        raise ConfigurationError(f"noise_scale must be >= 0, got {noise_scale}")
    if dtype is None:
        dtype = tc.DEFAULT_DTYPE
    rng = np.random.default_rng(seed)
    mats = []
    for _ in range(2):
        m = rng.normal(0.0, 1.0, size=(NUM_EDGES, NUM_OPS)) * noise_scale
        mats.append(tc.Tensor(m.astype(dtype), requires_grad=True))
    return AlphaParams(*mats)


def softmax_matrix(alpha_data):
    """Plain-numpy row softmax for metrics and discretization."""
    z = alpha_data - alpha_data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def mean_edge_entropy(alpha_tensor):
    """Average softmax entropy per edge (nats)."""
    p = softmax_matrix(np.asarray(alpha_tensor.data, dtype=np.float64))
    return float(-(p * np.log(p)).sum(axis=1).mean())


def mixed_op_forward(x, edge_alphas, ops, train=False):
    """Softmax-weighted sum of all candidate operator outputs on one edge.

    ``edge_alphas`` is the raw length-8 logit vector for this edge;
    the softmax applies here so the result is differentiable in both the
    input and the logits.
    """
    if len(ops) != NUM_OPS or edge_alphas.shape != (NUM_OPS,):
        raise DimensionError(
            f"expected {NUM_OPS} operators and ({NUM_OPS},) logits, "
            f"got {len(ops)} and {edge_alphas.shape}"
        )
    weights = tc.softmax_vec(edge_alphas)
    outputs = [op(x, train=train) for op in ops]
    ref = outputs[0].shape
    for op, out in zip(ops, outputs):
        if out.shape != ref:
            raise DimensionError(
                f"operator {op.kind.name} produced shape {out.shape}, expected {ref}"
            )
    return tc.weighted_sum(weights, outputs)


class MixedEdge:
    def __init__(self, C, stride, name, rng, dtype):
        self.stride = stride
        self.ops = [
            op_zoo.build_op(kind, C, stride, rng, f"{name}.{kind.name}", dtype)
            for kind in CandidateOpKind
        ]

    def __call__(self, x, edge_alphas, train):
        return mixed_op_forward(x, edge_alphas, self.ops, train=train)

    def params(self):
        out = []
        for op in self.ops:
            out.extend(op.params())
        return out


class Cell:
    """One searched cell; reduction cells stride the input-adjacent edges."""

    def __init__(self, C_pp, C_p, C, reduction, reduction_prev, name, rng, dtype):
        self.reduction = reduction
        if reduction_prev:
            self.pre0 = FactorizedReduce(C_pp, C, f"{name}.pre0", rng, dtype)
        else:
            self.pre0 = ReluConvBN(C_pp, C, 1, 1, 0, f"{name}.pre0", rng, dtype)
        self.pre1 = ReluConvBN(C_p, C, 1, 1, 0, f"{name}.pre1", rng, dtype)
        self.edges = []
        for e, (src, _) in enumerate(EDGES):
            stride = 2 if reduction and src < NUM_INPUT_NODES else 1
            self.edges.append(MixedEdge(C, stride, f"{name}.edge{e}", rng, dtype))

    def __call__(self, s0, s1, alpha_matrix, train):
        states = [self.pre0(s0, train), self.pre1(s1, train)]
        e = 0
        for j in range(NUM_INTERMEDIATE):
            terms = []
            for src in range(NUM_INPUT_NODES + j):
                logits = tc.row(alpha_matrix, e)
                terms.append(self.edges[e](states[src], logits, train))
                e += 1
            states.append(tc.add_n(terms))
        return tc.channel_concat(states[NUM_INPUT_NODES:])

    def params(self):
        out = self.pre0.params() + self.pre1.params()
        for edge in self.edges:
            out.extend(edge.params())
        return out


def reduction_positions(num_cells):
    """0-based indices of the two reduction cells in an L-cell stack.

    Reductions sit at cells floor(L/3) and floor(2L/3) counting from one.
    """
    if num_cells < 3:
        raise ConfigurationError(f"need at least 3 cells, got {num_cells}")
    return (num_cells // 3 - 1, (2 * num_cells) // 3 - 1)


class SuperNet:
    """Stem, stacked mixed cells, and a global-average-pool classifier."""

    def __init__(self, num_cells, C_init, num_classes, in_channels=3, seed=0, dtype=None):
        if dtype is None:
            dtype = tc.DEFAULT_DTYPE
        if C_init % 2 != 0:
            raise ConfigurationError(
                f"initial channel count must be even for reductions, got {C_init}"
            )
        rng = np.random.default_rng(seed)
        self.num_cells = num_cells
        self.C_init = C_init
        self.num_classes = num_classes
        self.in_channels = in_channels

        self.stem_conv = tc.Parameter(
            op_zoo.uniform_init(rng, (C_init, in_channels, 3, 3), in_channels * 9, dtype),
            "stem.weight",
        )
        self.stem_bn = BatchNorm(C_init, "stem.bn", dtype)

        red_at = set(reduction_positions(num_cells))
        self.cells = []
        C_pp = C_p = C_init
        C_cur = C_init
        reduction_prev = False
        for i in range(num_cells):
            reduction = i in red_at
            if reduction:
                C_cur *= 2
            cell = Cell(
                C_pp, C_p, C_cur, reduction, reduction_prev, f"cell{i}", rng, dtype
            )
            self.cells.append(cell)
            reduction_prev = reduction
            C_pp, C_p = C_p, C_cur * NUM_INTERMEDIATE
        self.C_out = C_p

        self.fc_w = tc.Parameter(
            op_zoo.uniform_init(rng, (num_classes, self.C_out), self.C_out, dtype),
            "classifier.weight",
        )
        self.fc_b = tc.Parameter(np.zeros(num_classes, dtype=dtype), "classifier.bias")

    def forward(self, x, alphas, train=False):
        """Batch (B, 3, T, N) -> logits (B, K)."""
        if not isinstance(x, tc.Tensor):
            x = tc.Tensor(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"expected (B, {self.in_channels}, T, N) input, got {x.shape}"
            )
        h = self.stem_bn(tc.conv2d(x, self.stem_conv.tensor, padding=(1, 1)), train)
        _check_finite(h, "stem")
        s0 = s1 = h
        for i, cell in enumerate(self.cells):
            mat = alphas.reduce if cell.reduction else alphas.normal
            s0, s1 = s1, cell(s0, s1, mat, train)
            _check_finite(s1, f"cell {i}")
        pooled = tc.global_avg_spatial(s1)
        logits = tc.linear(pooled, self.fc_w.tensor, self.fc_b.tensor)
        _check_finite(logits, "classifier")
        return logits

    def loss(self, x, labels, alphas, train=False):
        logits = self.forward(x, alphas, train=train)
        loss, _ = tc.softmax_cross_entropy(logits, labels)
        return loss

    def params(self):
        out = [self.stem_conv] + self.stem_bn.params()
        for cell in self.cells:
            out.extend(cell.params())
        out += [self.fc_w, self.fc_b]
        return out

    def param_count(self):
        return sum(p.data.size for p in self.params())


def _check_finite(t, layer):
    if not np.isfinite(t.data).all():
        raise NumericFault(f"non-finite activation after {layer}")


def relaxed_cell_dot(alpha_tensor, cell_type):
    """DOT digraph of one relaxed cell, top operator per edge with weight."""
    probs = softmax_matrix(np.asarray(alpha_tensor.data, dtype=np.float64))
    lines = [f"digraph {cell_type} {{", "  rankdir=LR;", "  node [shape=box];"]
    for name in NODE_NAMES + ("out",):
        lines.append(f'  "{name}";')
    for e, (src, dst) in enumerate(EDGES):
        top = int(probs[e].argmax())
        label = f"{CandidateOpKind(top).name} {probs[e, top]:.3f}"
        lines.append(
            f'  "{NODE_NAMES[src]}" -> "{NODE_NAMES[dst]}" [label="{label}"];'
        )
    for j in range(NUM_INTERMEDIATE):
        lines.append(f'  "{NODE_NAMES[NUM_INPUT_NODES + j]}" -> "out";')
    lines.append("}")
    return "\n".join(lines) + "\n"
