"""Discrete architectures: derivation from logits, text format, final network.

For each intermediate node the two strongest incoming edges are kept,
each contributing its highest-weighted operator other than Zero; ties
fall to the lower edge index, then the lower operator index.  The text
format round-trips exactly and rejects anything a derivation could not
have produced.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import ops as op_zoo
from . import supernet as sn
from . import tensor as tc
from .errors import ConfigurationError, DimensionError, InputError, NumericFault, ParseError
from .ops import BatchNorm, CandidateOpKind, FactorizedReduce, ReluConvBN

GENO_MAGIC = "SARNAS-GENO v1"

# (kind, src) pairs per node; src indexes input0, input1, n0..n3
Entry = tuple


@dataclass(frozen=True)
class Genotype:
    normal: tuple
    reduce: tuple

    def __post_init__(self):
        for side in (self.normal, self.reduce):
            if len(side) != sn.NUM_INTERMEDIATE:
                raise InputError(
                    f"genotype needs {sn.NUM_INTERMEDIATE} node entries, got {len(side)}"
                )
            for j, entry in enumerate(side):
                srcs = [src for _, src in entry]
                if len(entry) != 2 or len(set(srcs)) != 2:
                    raise InputError(f"node n{j} needs two distinct sources")
                for kind, src in entry:
                    if kind is CandidateOpKind.Zero:
                        raise InputError("Zero cannot appear in a genotype")
                    if not 0 <= src < sn.NUM_INPUT_NODES + j:
                        raise InputError(
                            f"source {src} does not precede node n{j}"
                        )


def derive_genotype(alphas):
    """Keep the two top-weighted non-Zero operations per intermediate node."""
    if isinstance(alphas, sn.AlphaParams):
        mats = (alphas.normal.data, alphas.reduce.data)
    else:
        mats = tuple(np.asarray(m) for m in alphas)
    for m in mats:
        if not np.isfinite(m).all():
            raise InputError("alpha matrix contains non-finite values")
    return Genotype(_derive_cell(mats[0]), _derive_cell(mats[1]))


def _derive_cell(alpha_matrix):
    probs = sn.softmax_matrix(np.asarray(alpha_matrix, dtype=np.float64))
    zero_col = int(CandidateOpKind.Zero)
    entries = []
    e = 0
    for j in range(sn.NUM_INTERMEDIATE):
        n_in = sn.NUM_INPUT_NODES + j
        candidates = []
        for src in range(n_in):
            weights = probs[e].copy()
            weights[zero_col] = -np.inf
            best_op = int(weights.argmax())  # argmax takes the lowest index on ties
            candidates.append((src, best_op, weights[best_op]))
            e += 1
        ranked = sorted(candidates, key=lambda c: (-c[2], c[0]))[:2]
        entry = tuple(
            (CandidateOpKind(op), src) for src, op, _ in sorted(ranked, key=lambda c: c[0])
        )
        entries.append(entry)
    return tuple(entries)


def random_genotype(seed):
    """Genotype derived from standard-normal logits; used for baselines."""
    rng = np.random.default_rng(seed)
    mats = rng.normal(size=(2, sn.NUM_EDGES, sn.NUM_OPS))
    return derive_genotype((mats[0], mats[1]))


# ---------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------

_LINE_RE = re.compile(
    r"^(normal|reduce) n([0-3]): (\w+)<-(\w+), (\w+)<-(\w+)$"
)


def serialize_genotype(genotype):
    lines = [GENO_MAGIC]
    for side_name, side in (("normal", genotype.normal), ("reduce", genotype.reduce)):
        for j, entry in enumerate(side):
            pairs = ", ".join(
                f"{kind.name}<-{sn.NODE_NAMES[src]}" for kind, src in entry
            )
            lines.append(f"{side_name} n{j}: {pairs}")
    return "\n".join(lines) + "\n"


def parse_genotype(text):
    lines = text.splitlines()
    if not lines or lines[0] != GENO_MAGIC:
        raise ParseError(f"expected header {GENO_MAGIC!r}", line=1)
    body = [ln for ln in lines[1:] if ln.strip()]
    expected = 2 * sn.NUM_INTERMEDIATE
    if len(body) != expected:
        raise ParseError(
            f"expected {expected} entry lines, found {len(body)}", line=len(lines)
        )
    sides = {"normal": [None] * sn.NUM_INTERMEDIATE, "reduce": [None] * sn.NUM_INTERMEDIATE}
    for lineno, ln in enumerate(body, start=2):
        m = _LINE_RE.match(ln)
        if not m:
            raise ParseError(f"malformed entry {ln!r}", line=lineno)
        side, node, op_a, src_a, op_b, src_b = m.groups()
        j = int(node)
        entry = []
        for op_name, src_name in ((op_a, src_a), (op_b, src_b)):
            if op_name == CandidateOpKind.Zero.name:
                raise ParseError("Zero is not a valid genotype operator", line=lineno)
            if op_name not in op_zoo.OP_NAMES:
                raise ParseError(f"unknown operator {op_name!r}", line=lineno)
            if src_name not in sn.NODE_NAMES:
                raise ParseError(f"unknown source {src_name!r}", line=lineno)
            src = sn.NODE_NAMES.index(src_name)
            if src >= sn.NUM_INPUT_NODES + j:
                raise ParseError(
                    f"source {src_name} does not precede n{j}", line=lineno
                )
            entry.append((CandidateOpKind[op_name], src))
        if entry[0][1] == entry[1][1]:
            raise ParseError(f"duplicate source in n{j} entry", line=lineno)
        if sides[side][j] is not None:
            raise ParseError(f"duplicate entry for {side} n{j}", line=lineno)
        sides[side][j] = tuple(entry)
    canonical_order = [
        (side, j) for side in ("normal", "reduce") for j in range(sn.NUM_INTERMEDIATE)
    ]
    seen_order = []
    for lineno, ln in enumerate(body, start=2):
        m = _LINE_RE.match(ln)
        seen_order.append((m.group(1), int(m.group(2))))
    if seen_order != canonical_order:
        raise ParseError("entries out of canonical order (normal n0..n3, reduce n0..n3)")
    return Genotype(tuple(sides["normal"]), tuple(sides["reduce"]))


def genotype_dot(genotype, cell_type):
    """DOT digraph of one derived cell; only retained edges appear."""
    side = genotype.normal if cell_type == "normal" else genotype.reduce
    lines = [f"digraph {cell_type} {{", "  rankdir=LR;", "  node [shape=box];"]
    for name in sn.NODE_NAMES + ("out",):
        lines.append(f'  "{name}";')
    for j, entry in enumerate(side):
        for kind, src in entry:
            lines.append(
                f'  "{sn.NODE_NAMES[src]}" -> "{sn.NODE_NAMES[sn.NUM_INPUT_NODES + j]}" '
                f'[label="{kind.name}"];'
            )
    for j in range(sn.NUM_INTERMEDIATE):
        lines.append(f'  "{sn.NODE_NAMES[sn.NUM_INPUT_NODES + j]}" -> "out";')
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------
# discrete network
# ---------------------------------------------------------------------


class DiscreteCell:
    """A cell realizing only its genotype's eight chosen connections."""

    def __init__(self, entries, C_pp, C_p, C, reduction, reduction_prev, name, rng, dtype):
        self.reduction = reduction
        if reduction_prev:
            self.pre0 = FactorizedReduce(C_pp, C, f"{name}.pre0", rng, dtype)
        else:
            self.pre0 = ReluConvBN(C_pp, C, 1, 1, 0, f"{name}.pre0", rng, dtype)
        self.pre1 = ReluConvBN(C_p, C, 1, 1, 0, f"{name}.pre1", rng, dtype)
        self.nodes = []
        for j, entry in enumerate(entries):
            pair = []
            for k, (kind, src) in enumerate(entry):
                stride = 2 if reduction and src < sn.NUM_INPUT_NODES else 1
                op = op_zoo.build_op(
                    kind, C, stride, rng, f"{name}.n{j}.op{k}.{kind.name}", dtype
                )
                pair.append((op, src))
            self.nodes.append(pair)

    def __call__(self, s0, s1, train):
        states = [self.pre0(s0, train), self.pre1(s1, train)]
        for pair in self.nodes:
            terms = [op(states[src], train=train) for op, src in pair]
            states.append(tc.add(terms[0], terms[1]))
        return tc.channel_concat(states[sn.NUM_INPUT_NODES:])

    def params(self):
        out = self.pre0.params() + self.pre1.params()
        for pair in self.nodes:
            for op, _ in pair:
                out.extend(op.params())
        return out


class DiscreteNet:
    """Final trainable network stacked from one genotype's cells."""

    def __init__(self, genotype, num_cells, C_init, num_classes, in_channels=3, seed=0, dtype=None):
        if dtype is None:
            dtype = tc.DEFAULT_DTYPE
        if num_cells < 3:
            raise ConfigurationError(f"need at least 3 cells, got {num_cells}")
        if C_init % 2 != 0:
            raise ConfigurationError(
                f"initial channel count must be even for reductions, got {C_init}"
            )
        rng = np.random.default_rng(seed)
        self.genotype = genotype
        self.num_cells = num_cells
        self.C_init = C_init
        self.num_classes = num_classes
        self.in_channels = in_channels

        self.stem_conv = tc.Parameter(
            op_zoo.uniform_init(rng, (C_init, in_channels, 3, 3), in_channels * 9, dtype),
            "stem.weight",
        )
        self.stem_bn = BatchNorm(C_init, "stem.bn", dtype)

        red_at = set(sn.reduction_positions(num_cells))
        self.reduction_indices = tuple(sorted(red_at))
        self.cells = []
        C_pp = C_p = C_init
        C_cur = C_init
        reduction_prev = False
        for i in range(num_cells):
            reduction = i in red_at
            if reduction:
                C_cur *= 2
            entries = genotype.reduce if reduction else genotype.normal
            cell = DiscreteCell(
                entries, C_pp, C_p, C_cur, reduction, reduction_prev,
                f"cell{i}", rng, dtype,
            )
            self.cells.append(cell)
            reduction_prev = reduction
            C_pp, C_p = C_p, C_cur * sn.NUM_INTERMEDIATE
        self.C_out = C_p

        self.fc_w = tc.Parameter(
            op_zoo.uniform_init(rng, (num_classes, self.C_out), self.C_out, dtype),
            "classifier.weight",
        )
        self.fc_b = tc.Parameter(np.zeros(num_classes, dtype=dtype), "classifier.bias")

    def forward(self, x, train=False):
        if not isinstance(x, tc.Tensor):
            x = tc.Tensor(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"expected (B, {self.in_channels}, T, N) input, got {x.shape}"
            )
        h = self.stem_bn(tc.conv2d(x, self.stem_conv.tensor, padding=(1, 1)), train)
        s0 = s1 = h
        for i, cell in enumerate(self.cells):
            s0, s1 = s1, cell(s0, s1, train)
            if not np.isfinite(s1.data).all():
                raise NumericFault(f"non-finite activation after cell {i}")
        pooled = tc.global_avg_spatial(s1)
        return tc.linear(pooled, self.fc_w.tensor, self.fc_b.tensor)

    def loss(self, x, labels, train=False):
        logits = self.forward(x, train=train)
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


def build_discrete_network(genotype, num_cells, C_init, num_classes, in_channels=3, seed=0, dtype=None):
    return DiscreteNet(genotype, num_cells, C_init, num_classes, in_channels, seed, dtype)
