"""Cell DAG templates, architecture parameters, and discretization.

A cell is a small DAG: input nodes, intermediate nodes, and (for
feature cells) an output that channel-concatenates the intermediates.
During search every intermediate receives a softmax-weighted mixture of
candidate ops on every incoming edge. Discretization keeps the top-2
strongest incoming edges per intermediate and the strongest non-zero op
on each kept edge.

Cells come in kinds. Normal cells are split into k depth levels, each
with its own logits; reduction cells share one set; channel-adapting
connection cells (one input, one intermediate, one edge) share another.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Tensor, softmax, weighted_sum

__all__ = [
    "CellTemplate",
    "ArchParams",
    "DiscreteArch",
    "ArchFormatError",
    "REDUCE_KIND",
    "CONNECT_KIND",
    "normal_kind",
    "normal_template",
    "connection_template",
    "edge_strength",
    "mixed_edge_forward",
    "cell_forward",
    "derive_discrete",
    "export_dot",
    "TOP_EDGES_PER_NODE",
]

REDUCE_KIND = "reduce"
CONNECT_KIND = "connect"

# Discretization keeps this many incoming edges per intermediate node
# (fewer if the node has fewer candidate predecessors).
TOP_EDGES_PER_NODE = 2


def normal_kind(level: int) -> str:
    return f"normal.{level}"


class ArchFormatError(ValueError):
    """A serialized architecture violated the document schema."""


@dataclass(frozen=True)
class CellTemplate:
    """Node/edge layout plus the candidate op list for one cell kind."""

    n_inputs: int
    n_intermediate: int
    op_names: tuple[str, ...]
    concat_output: bool = True

    def __post_init__(self):
        if self.n_inputs < 1 or self.n_intermediate < 1:
            raise ValueError("template needs at least one input and one intermediate node")
        if len(self.op_names) < 2:
            raise ValueError("template needs at least two candidate ops")
        if len(set(self.op_names)) != len(self.op_names):
            raise ValueError("duplicate op names in template")

    @property
    def intermediates(self) -> tuple[int, ...]:
        return tuple(range(self.n_inputs, self.n_inputs + self.n_intermediate))

    def predecessors(self, j: int) -> tuple[int, ...]:
        """Candidate source nodes for intermediate j: every earlier node."""
        return tuple(range(j))

    def edges(self) -> tuple[tuple[int, int], ...]:
        out = []
        for j in self.intermediates:
            out.extend((i, j) for i in self.predecessors(j))
        return tuple(out)

    @property
    def n_ops(self) -> int:
        return len(self.op_names)

    @property
    def zero_index(self) -> int | None:
        try:
            return self.op_names.index(ops.ZERO)
        except ValueError:
            return None

    def kept_per_node(self, j: int) -> int:
        return min(TOP_EDGES_PER_NODE, len(self.predecessors(j)))


def normal_template(n_nodes: int = 7, op_names: tuple[str, ...] = ops.NORMAL_OPS) -> CellTemplate:
    """Feature-cell template: nodes 0,1 are inputs, node n_nodes-1 is the
    concat output, the rest are intermediates."""
    if n_nodes < 4:
        raise ValueError(f"feature cells need >= 4 nodes (2 inputs, 1 intermediate, output), got {n_nodes}")
    return CellTemplate(n_inputs=2, n_intermediate=n_nodes - 3, op_names=tuple(op_names), concat_output=True)


def connection_template(op_names: tuple[str, ...] = ops.CONNECTION_OPS) -> CellTemplate:
    """Channel-adapting template: one input, one intermediate, one edge."""
    return CellTemplate(n_inputs=1, n_intermediate=1, op_names=tuple(op_names), concat_output=False)


class ArchParams:
    """One logits vector per (cell kind, edge); cells of equal kind share it."""

    def __init__(self, templates: dict[str, CellTemplate], rng: np.random.Generator, init_scale: float = 1e-3):
        self.templates = dict(templates)
        self._vectors: dict[str, dict[tuple[int, int], Tensor]] = {}
        for kind, tpl in self.templates.items():
            per_edge = {}
            for edge in tpl.edges():
                per_edge[edge] = Tensor(init_scale * rng.standard_normal(tpl.n_ops), requires_grad=True)
            self._vectors[kind] = per_edge

    def vector(self, kind: str, edge: tuple[int, int]) -> Tensor:
        return self._vectors[kind][edge]

    def items(self):
        for kind in self._vectors:
            for edge, t in self._vectors[kind].items():
                yield kind, edge, t

    def tensors(self) -> list[Tensor]:
        return [t for _, _, t in self.items()]

    def numpy(self) -> dict[tuple[str, tuple[int, int]], np.ndarray]:
        return {(kind, edge): t.data.copy() for kind, edge, t in self.items()}

    def load(self, values: dict[tuple[str, tuple[int, int]], np.ndarray]) -> None:
        for key, arr in values.items():
            kind, edge = key
            t = self._vectors[kind][edge]
            if t.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {key}: {t.data.shape} vs {arr.shape}")
            t.data = np.asarray(arr, dtype=np.float64).copy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for kind, edge, t in self.items():
            h.update(f"{kind}:{edge}".encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    def set_trainable(self, flag: bool) -> None:
        for _, _, t in self.items():
            t.requires_grad = flag


def edge_strength(theta: np.ndarray, zero_index: int | None) -> float:
    """Largest mixture weight among non-zero ops; used to rank edges."""
    z = np.asarray(theta, dtype=np.float64)
    e = np.exp(z - z.max())
    w = e / e.sum()
    if zero_index is not None:
        w = np.delete(w, zero_index)
    return float(w.max())


def mixed_edge_forward(theta: Tensor, x: Tensor, edge_ops: list[ops.OpInstance]) -> Tensor:
    """Softmax-weighted sum of every candidate op applied to x."""
    if theta.shape != (len(edge_ops),):
        raise ValueError(f"theta shape {theta.shape} does not match {len(edge_ops)} ops")
    weights = softmax(theta)
    return weighted_sum(weights, [op(x) for op in edge_ops])


def cell_forward(
    template: CellTemplate,
    inputs: list[Tensor],
    theta: dict[tuple[int, int], Tensor],
    edge_ops: dict[tuple[int, int], list[ops.OpInstance]],
) -> Tensor:
    """Run one relaxed cell: every edge active, mixtures summed per node.

    Returns the channel-concat of intermediates (or the single
    intermediate for non-concat templates).
    """
    if len(inputs) != template.n_inputs:
        raise ValueError(f"template expects {template.n_inputs} inputs, got {len(inputs)}")
    states = list(inputs)
    for j in template.intermediates:
        acc = None
        for i in template.predecessors(j):
            term = mixed_edge_forward(theta[(i, j)], states[i], edge_ops[(i, j)])
            acc = term if acc is None else _add(acc, term)
        states.append(acc)
    inter = states[template.n_inputs :]
    if template.concat_output:
        from .autodiff import concat

        return concat(inter, axis=1)
    return inter[0]


def _add(a: Tensor, b: Tensor) -> Tensor:
    from .autodiff import add

    return add(a, b)


@dataclass
class DiscreteArch:
    """Chosen (predecessor, op) pairs per intermediate node, per cell kind."""

    choices: dict[str, dict[int, tuple[tuple[int, str], ...]]] = field(default_factory=dict)

    SCHEMA_VERSION = 1

    def validate(self, templates: dict[str, CellTemplate]) -> None:
        if set(self.choices) != set(templates):
            raise ArchFormatError(f"kinds {sorted(self.choices)} do not match templates {sorted(templates)}")
        for kind, tpl in templates.items():
            nodes = self.choices[kind]
            if set(nodes) != set(tpl.intermediates):
                raise ArchFormatError(f"{kind}: nodes {sorted(nodes)} != intermediates {list(tpl.intermediates)}")
            for j, picks in nodes.items():
                if len(picks) != tpl.kept_per_node(j):
                    raise ArchFormatError(f"{kind}: node {j} keeps {len(picks)} edges, expected {tpl.kept_per_node(j)}")
                preds = [p for p, _ in picks]
                if len(set(preds)) != len(preds):
                    raise ArchFormatError(f"{kind}: node {j} reuses a predecessor")
                for p, op in picks:
                    if p not in tpl.predecessors(j):
                        raise ArchFormatError(f"{kind}: node {j} cannot take input from node {p}")
                    if op not in tpl.op_names:
                        raise ArchFormatError(f"{kind}: op {op!r} not in template op set")
                    if op == ops.ZERO:
                        raise ArchFormatError(f"{kind}: node {j} kept the zero op")
                if list(preds) != sorted(preds):
                    raise ArchFormatError(f"{kind}: node {j} edges must be sorted by predecessor")

    def to_json_dict(self) -> dict:
        kinds = {}
        for kind, nodes in self.choices.items():
            kinds[kind] = {
                "nodes": {
                    str(j): [{"pred": p, "op": op} for p, op in picks]
                    for j, picks in sorted(nodes.items())
                }
            }
        return {"schema_version": self.SCHEMA_VERSION, "kinds": kinds}

    def to_canonical_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DiscreteArch":
        if not isinstance(doc, dict):
            raise ArchFormatError("architecture document must be a JSON object")
        if doc.get("schema_version") != cls.SCHEMA_VERSION:
            raise ArchFormatError(f"unsupported schema_version {doc.get('schema_version')!r}")
        kinds = doc.get("kinds")
        if not isinstance(kinds, dict):
            raise ArchFormatError("missing 'kinds' object")
        choices: dict[str, dict[int, tuple[tuple[int, str], ...]]] = {}
        for kind, body in kinds.items():
            if not isinstance(body, dict) or "nodes" not in body:
                raise ArchFormatError(f"kind {kind!r}: missing 'nodes'")
            nodes = {}
            for j_str, picks in body["nodes"].items():
                try:
                    j = int(j_str)
                except ValueError:
                    raise ArchFormatError(f"kind {kind!r}: node key {j_str!r} is not an integer") from None
                if not isinstance(picks, list):
                    raise ArchFormatError(f"kind {kind!r}: node {j} edges must be a list")
                parsed = []
                for item in picks:
                    if not isinstance(item, dict) or set(item) != {"pred", "op"}:
                        raise ArchFormatError(f"kind {kind!r}: node {j} edge entries need exactly 'pred' and 'op'")
                    parsed.append((int(item["pred"]), str(item["op"])))
                nodes[j] = tuple(parsed)
            choices[kind] = nodes
        return cls(choices)

    def arch_hash(self) -> str:
        return hashlib.sha256(self.to_canonical_json().encode()).hexdigest()


def derive_discrete(
    theta: dict[tuple[str, tuple[int, int]], np.ndarray] | ArchParams,
    templates: dict[str, CellTemplate],
) -> DiscreteArch:
    """Discretize mixture logits into a concrete architecture.

    Per intermediate node, keep the top-2 incoming edges ranked by the
    strongest non-zero mixture weight; per kept edge take the argmax
    non-zero op. Strength ties prefer the smaller predecessor index; op
    ties prefer the smaller op index. The result is invariant to adding
    a constant to any single edge's logits.
    """
    if isinstance(theta, ArchParams):
        theta = theta.numpy()
    choices: dict[str, dict[int, tuple[tuple[int, str], ...]]] = {}
    for kind, tpl in templates.items():
        zi = tpl.zero_index
        nodes = {}
        for j in tpl.intermediates:
            ranked = sorted(
                tpl.predecessors(j),
                key=lambda i: (-edge_strength(theta[(kind, (i, j))], zi), i),
            )
            kept = sorted(ranked[: tpl.kept_per_node(j)])
            picks = []
            for i in kept:
                vec = np.asarray(theta[(kind, (i, j))], dtype=np.float64)
                order = np.argsort(-vec, kind="stable")
                for op_idx in order:
                    if tpl.op_names[op_idx] != ops.ZERO:
                        picks.append((i, tpl.op_names[op_idx]))
                        break
            nodes[j] = tuple(picks)
        choices[kind] = nodes
    arch = DiscreteArch(choices)
    arch.validate(templates)
    return arch


def export_dot(arch: DiscreteArch, templates: dict[str, CellTemplate]) -> str:
    """Render the chosen cells as a Graphviz digraph, one cluster per kind.

    Input nodes are labeled c_{k-1} / c_{k-2}; op edges carry op labels;
    dashed edges mark the output concat.
    """
    arch.validate(templates)
    lines = ["digraph arch {", "  rankdir=LR;", "  node [shape=box, style=rounded];"]
    for ci, (kind, tpl) in enumerate(templates.items()):
        tag = f"k{ci}"
        lines.append(f"  subgraph cluster_{tag} {{")
        lines.append(f'    label="{kind}";')
        input_labels = ["c_{k-2}", "c_{k-1}"] if tpl.n_inputs == 2 else ["in"]
        for i in range(tpl.n_inputs):
            lines.append(f'    {tag}_n{i} [label="{input_labels[i]}"];')
        for j in tpl.intermediates:
            lines.append(f'    {tag}_n{j} [label="{j}"];')
        for j, picks in sorted(arch.choices[kind].items()):
            for p, op in picks:
                lines.append(f'    {tag}_n{p} -> {tag}_n{j} [label="{op}"];')
        if tpl.concat_output:
            out = tpl.n_inputs + tpl.n_intermediate
            lines.append(f'    {tag}_n{out} [label="out"];')
            for j in tpl.intermediates:
                lines.append(f"    {tag}_n{j} -> {tag}_n{out} [style=dashed];")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"
