"""Whole-network assembly: stem, stacked cells, inter-cell links, classifier.

A NetworkPlan fixes the macro structure (cell count, channel schedule,
reduction placement, depth levels). Supernet materializes every candidate
op on every edge and mixes them with shared architecture logits;
DiscreteNetwork materializes only the ops a DiscreteArch chose. Both use
the same layout walk, so costs, counts, and shapes agree by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cells, ops
from .autodiff import (
    Parameter,
    Tensor,
    batch_norm,
    conv2d,
    cross_entropy_logits,
    global_avg_pool,
    linear,
    relu,
)

__all__ = [
    "NetworkPlan",
    "Layout",
    "CellInfo",
    "LinkInfo",
    "Supernet",
    "DiscreteNetwork",
    "ReferenceConvNet",
    "STEM",
]

STEM = -1  # source index meaning "the stem output"


def default_reduction_positions(n_cells: int) -> tuple[int, ...]:
    """Reductions at one and two thirds of the depth (8 cells -> 2 and 5)."""
    if n_cells < 3:
        return ()
    return (n_cells // 3, (2 * n_cells) // 3)


@dataclass(frozen=True)
class NetworkPlan:
    """Macro structure of the searched network."""

    n_cells: int = 8
    init_channels: int = 16
    n_classes: int = 10
    in_channels: int = 3
    image_hw: tuple[int, int] = (16, 16)
    n_nodes: int = 7
    k_levels: int = 3
    use_connection: bool = True
    reduction_positions: tuple[int, ...] | None = None
    normal_ops: tuple[str, ...] = ops.NORMAL_OPS
    connection_ops: tuple[str, ...] = ops.CONNECTION_OPS

    def __post_init__(self):
        if self.n_cells < 1:
            raise ValueError("need at least one cell")
        if self.k_levels < 1:
            raise ValueError("need at least one depth level")
        reds = self.reductions
        if any(r < 0 or r >= self.n_cells for r in reds):
            raise ValueError(f"reduction positions {reds} out of range for {self.n_cells} cells")
        if len(set(reds)) != len(reds):
            raise ValueError("duplicate reduction positions")
        h, w = self.image_hw
        factor = 2 ** len(reds)
        if h % factor or w % factor:
            raise ValueError(f"image {h}x{w} not divisible by total reduction factor {factor}")
        if self.use_connection:
            gmax = max(_group_of(name) for name in self.connection_ops)
            if self.init_channels % gmax:
                raise ValueError(
                    f"init_channels={self.init_channels} must be divisible by {gmax} for grouped connection ops"
                )

    @property
    def reductions(self) -> tuple[int, ...]:
        if self.reduction_positions is not None:
            return tuple(sorted(self.reduction_positions))
        return default_reduction_positions(self.n_cells)

    @property
    def n_intermediate(self) -> int:
        return self.n_nodes - 3

    def cell_kind_list(self) -> list[str]:
        """Kind id per cell index; normal cells split into contiguous levels."""
        reds = set(self.reductions)
        normal_cells = [i for i in range(self.n_cells) if i not in reds]
        kinds = [cells.REDUCE_KIND] * self.n_cells
        groups = [g for g in np.array_split(normal_cells, self.k_levels) if len(g)]
        for level, grp in enumerate(groups):
            for idx in grp:
                kinds[int(idx)] = cells.normal_kind(level)
        return kinds

    def templates(self) -> dict[str, cells.CellTemplate]:
        """Templates for every kind the plan instantiates, in network order."""
        out: dict[str, cells.CellTemplate] = {}
        for kind in self.cell_kind_list():
            if kind not in out:
                out[kind] = cells.normal_template(self.n_nodes, self.normal_ops)
        if self.use_connection:
            out[cells.CONNECT_KIND] = cells.connection_template(self.connection_ops)
        return out

    def layout(self) -> "Layout":
        reds = set(self.reductions)
        kinds = self.cell_kind_list()
        infos: list[CellInfo] = []
        links: list[list[LinkInfo]] = []
        h, w = self.image_hw
        ch = self.init_channels
        out_hw: list[tuple[int, int]] = []
        out_ch: list[int] = []

        def src_hw(s: int) -> tuple[int, int]:
            return self.image_hw if s == STEM else out_hw[s]

        def src_ch(s: int) -> int:
            return self.init_channels if s == STEM else out_ch[s]

        for i in range(self.n_cells):
            reduction = i in reds
            if reduction:
                ch *= 2
            in_hw = self.image_hw if not out_hw else out_hw[-1]
            cell_out_hw = (in_hw[0] // 2, in_hw[1] // 2) if reduction else in_hw
            info = CellInfo(
                index=i,
                kind=kinds[i],
                reduction=reduction,
                channels=ch,
                in_hw=in_hw,
                out_hw=cell_out_hw,
                out_channels=self.n_intermediate * ch,
            )
            cell_links = []
            for slot, src in enumerate((i - 2, i - 1)):
                src = src if src >= 0 else STEM
                sh = src_hw(src)
                stride = sh[0] // in_hw[0]
                if stride not in (1, 2) or sh[1] // in_hw[1] != stride:
                    raise ValueError(f"cell {i} slot {slot}: cannot bridge {sh} -> {in_hw}")
                cell_links.append(
                    LinkInfo(
                        dst=i,
                        slot=slot,
                        src=src,
                        context=ops.OpContext(src_ch(src), ch, sh[0], sh[1], stride),
                    )
                )
            infos.append(info)
            links.append(cell_links)
            out_hw.append(cell_out_hw)
            out_ch.append(info.out_channels)
        return Layout(plan=self, cells=infos, links=links)


def _group_of(conn_op: str) -> int:
    return {ops.DIL_CONV_3: 1, ops.GROUP_CONV_G1: 1, ops.GROUP_CONV_G2: 2, ops.GROUP_CONV_G4: 4}[conn_op]


@dataclass(frozen=True)
class CellInfo:
    index: int
    kind: str
    reduction: bool
    channels: int
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]
    out_channels: int

    def edge_context(self, template: cells.CellTemplate, edge: tuple[int, int]) -> ops.OpContext:
        i, _j = edge
        from_input = i < template.n_inputs
        stride = 2 if (self.reduction and from_input) else 1
        hw = self.in_hw if from_input else self.out_hw
        return ops.OpContext(self.channels, self.channels, hw[0], hw[1], stride)


@dataclass(frozen=True)
class LinkInfo:
    dst: int
    slot: int
    src: int  # cell index or STEM
    context: ops.OpContext


@dataclass
class Layout:
    plan: NetworkPlan
    cells: list[CellInfo]
    links: list[list[LinkInfo]] = field(default_factory=list)

    @property
    def final_channels(self) -> int:
        return self.cells[-1].out_channels


class _NetworkBase:
    """Stem / link / classifier plumbing shared by both network flavors."""

    def __init__(self, plan: NetworkPlan, seed: int):
        self.plan = plan
        self.layout = plan.layout()
        self.templates = plan.templates()
        ss = np.random.SeedSequence(seed)
        w_ss, theta_ss = ss.spawn(2)
        self._w_rng = np.random.default_rng(w_ss)
        self._theta_rng = np.random.default_rng(theta_ss)
        self._params: list[Parameter] = []

        C = plan.init_channels
        self.stem_w = self._track(_conv_init(self._w_rng, C, plan.in_channels, 3, "stem.conv.weight"))
        self.stem_gamma = self._track(Parameter(np.ones(C), "stem.bn.gamma"))
        self.stem_beta = self._track(Parameter(np.zeros(C), "stem.bn.beta"))

    def _track(self, p: Parameter) -> Parameter:
        self._params.append(p)
        return p

    def _track_all(self, params: list[Parameter]) -> None:
        self._params.extend(params)

    def _build_classifier(self) -> None:
        feat = self.layout.final_channels
        K = self.plan.n_classes
        bound = np.sqrt(6.0 / feat)
        self.fc_w = self._track(Parameter(self._w_rng.uniform(-bound, bound, size=(K, feat)), "classifier.weight"))
        self.fc_b = self._track(Parameter(np.zeros(K), "classifier.bias"))

    def _stem_forward(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.stem_w, stride=1, padding=1)
        return batch_norm(y, self.stem_gamma, self.stem_beta)

    def _classify(self, feat: Tensor) -> Tensor:
        return linear(global_avg_pool(feat), self.fc_w, self.fc_b)

    def weight_params(self) -> list[Parameter]:
        return list(self._params)

    def weight_count(self) -> int:
        return sum(p.size for p in self._params)

    def set_weights_trainable(self, flag: bool) -> None:
        for p in self._params:
            p.requires_grad = flag

    def zero_weight_grads(self) -> None:
        for p in self._params:
            p.grad = None

    def check_names_unique(self) -> None:
        names = [p.name for p in self._params]
        assert len(names) == len(set(names)), "duplicate parameter names"

    def loss(self, x: np.ndarray, y: np.ndarray) -> tuple[Tensor, Tensor]:
        logits = self.forward(x)
        return cross_entropy_logits(logits, y), logits

    def forward(self, x, tap: int | None = None) -> Tensor:  # pragma: no cover - overridden
        raise NotImplementedError


def _conv_init(rng: np.random.Generator, c_out: int, c_in: int, k: int, name: str) -> Parameter:
    bound = np.sqrt(6.0 / (c_in * k * k))
    return Parameter(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)), name)


class _FixedAdapter:
    """ReLU -> 1x1 conv (stride matches the link) -> BN, used when
    connection cells are disabled."""

    def __init__(self, ctx: ops.OpContext, rng: np.random.Generator, prefix: str):
        self.ctx = ctx
        self.w = _conv_init(rng, ctx.c_out, ctx.c_in, 1, f"{prefix}.conv.weight")
        self.gamma = Parameter(np.ones(ctx.c_out), f"{prefix}.bn.gamma")
        self.beta = Parameter(np.zeros(ctx.c_out), f"{prefix}.bn.beta")
        self.parameters = [self.w, self.gamma, self.beta]

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(relu(x), self.w, stride=self.ctx.stride)
        return batch_norm(y, self.gamma, self.beta)

    @staticmethod
    def param_cost(ctx: ops.OpContext) -> int:
        return ctx.c_in * ctx.c_out + 2 * ctx.c_out

    @staticmethod
    def flop_cost(ctx: ops.OpContext) -> int:
        return ctx.c_in * ctx.c_out * ctx.h_out * ctx.w_out


class Supernet(_NetworkBase):
    """Relaxed search network: every candidate op on every edge, mixed by
    softmax over shared per-kind logits."""

    def __init__(self, plan: NetworkPlan, seed: int, theta_init_scale: float = 1e-3):
        super().__init__(plan, seed)
        self.arch = cells.ArchParams(self.templates, self._theta_rng, init_scale=theta_init_scale)

        self._cell_ops: list[dict[tuple[int, int], list[ops.OpInstance]]] = []
        self._link_mods: list[list] = []
        for info, cell_links in zip(self.layout.cells, self.layout.links):
            mods = []
            for link in cell_links:
                mods.append(self._build_link(link))
            self._link_mods.append(mods)
            tpl = self.templates[info.kind]
            per_edge: dict[tuple[int, int], list[ops.OpInstance]] = {}
            for edge in tpl.edges():
                ctx = info.edge_context(tpl, edge)
                insts = []
                for op_name in tpl.op_names:
                    inst = ops.build(
                        op_name, ctx, self._w_rng, f"cell{info.index}.edge{edge[0]}_{edge[1]}.{op_name}"
                    )
                    self._track_all(inst.parameters)
                    insts.append(inst)
                per_edge[edge] = insts
            self._cell_ops.append(per_edge)
        self._build_classifier()
        self.check_names_unique()

    def _build_link(self, link: LinkInfo):
        prefix = f"cell{link.dst}.in{link.slot}"
        if not self.plan.use_connection:
            adapter = _FixedAdapter(link.context, self._w_rng, prefix)
            self._track_all(adapter.parameters)
            return adapter
        tpl = self.templates[cells.CONNECT_KIND]
        insts = []
        for op_name in tpl.op_names:
            inst = ops.build(op_name, link.context, self._w_rng, f"{prefix}.{op_name}")
            self._track_all(inst.parameters)
            insts.append(inst)
        theta = self.arch.vector(cells.CONNECT_KIND, (0, 1))

        def run(x: Tensor) -> Tensor:
            return cells.mixed_edge_forward(theta, x, insts)

        return run

    def forward(self, x, tap: int | None = None) -> Tensor:
        xt = x if isinstance(x, Tensor) else Tensor(x)
        stem_out = self._stem_forward(xt)
        outs: list[Tensor] = []
        for info, mods in zip(self.layout.cells, self._link_mods):
            tpl = self.templates[info.kind]
            ins = []
            for link, mod in zip(self.layout.links[info.index], mods):
                src_t = stem_out if link.src == STEM else outs[link.src]
                ins.append(mod(src_t))
            theta_map = {e: self.arch.vector(info.kind, e) for e in tpl.edges()}
            out = cells.cell_forward(tpl, ins, theta_map, self._cell_ops[info.index])
            outs.append(out)
            if tap is not None and info.index == tap:
                return out
        return self._classify(outs[-1])

    def theta_tensors(self) -> list[Tensor]:
        return self.arch.tensors()

    def zero_theta_grads(self) -> None:
        for t in self.theta_tensors():
            t.grad = None

    def set_theta_trainable(self, flag: bool) -> None:
        self.arch.set_trainable(flag)


class DiscreteNetwork(_NetworkBase):
    """Concrete network for a chosen architecture; only kept edges exist."""

    def __init__(self, plan: NetworkPlan, arch: cells.DiscreteArch, seed: int):
        super().__init__(plan, seed)
        arch.validate(self.templates)
        self.arch = arch

        self._cell_ops: list[dict[int, list[tuple[int, ops.OpInstance]]]] = []
        self._link_mods: list[list] = []
        for info, cell_links in zip(self.layout.cells, self.layout.links):
            mods = []
            for link in cell_links:
                mods.append(self._build_link(link))
            self._link_mods.append(mods)
            tpl = self.templates[info.kind]
            per_node: dict[int, list[tuple[int, ops.OpInstance]]] = {}
            for j, picks in sorted(arch.choices[info.kind].items()):
                built = []
                for p, op_name in picks:
                    ctx = info.edge_context(tpl, (p, j))
                    inst = ops.build(op_name, ctx, self._w_rng, f"cell{info.index}.edge{p}_{j}.{op_name}")
                    self._track_all(inst.parameters)
                    built.append((p, inst))
                per_node[j] = built
            self._cell_ops.append(per_node)
        self._build_classifier()
        self.check_names_unique()

    def _build_link(self, link: LinkInfo):
        prefix = f"cell{link.dst}.in{link.slot}"
        if not self.plan.use_connection:
            adapter = _FixedAdapter(link.context, self._w_rng, prefix)
            self._track_all(adapter.parameters)
            return adapter
        picks = self.arch.choices[cells.CONNECT_KIND][1]
        (_, op_name), = picks
        inst = ops.build(op_name, link.context, self._w_rng, f"{prefix}.{op_name}")
        self._track_all(inst.parameters)
        return inst

    def forward(self, x, tap: int | None = None) -> Tensor:
        from .autodiff import add, concat

        xt = x if isinstance(x, Tensor) else Tensor(x)
        stem_out = self._stem_forward(xt)
        outs: list[Tensor] = []
        for info, mods in zip(self.layout.cells, self._link_mods):
            tpl = self.templates[info.kind]
            states: list[Tensor] = []
            for link, mod in zip(self.layout.links[info.index], mods):
                src_t = stem_out if link.src == STEM else outs[link.src]
                states.append(mod(src_t))
            for j in tpl.intermediates:
                acc = None
                for p, inst in self._cell_ops[info.index][j]:
                    term = inst(states[p])
                    acc = term if acc is None else add(acc, term)
                states.append(acc)
            out = concat(states[tpl.n_inputs :], axis=1) if tpl.concat_output else states[tpl.n_inputs]
            outs.append(out)
            if tap is not None and info.index == tap:
                return out
        return self._classify(outs[-1])

class ReferenceConvNet:
    """Two conv blocks and a linear head: a floor model for dataset checks.

    If this cannot learn a dataset, no searched cell architecture will;
    tests use it to certify the synthetic generators are learnable.
    """

    def __init__(self, in_channels: int, n_classes: int, channels: int = 16, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.conv1 = _conv_init(rng, channels, in_channels, 3, "ref.conv1")
        self.g1 = Parameter(np.ones(channels), "ref.bn1.gamma")
        self.b1 = Parameter(np.zeros(channels), "ref.bn1.beta")
        self.conv2 = _conv_init(rng, channels, channels, 3, "ref.conv2")
        self.g2 = Parameter(np.ones(channels), "ref.bn2.gamma")
        self.b2 = Parameter(np.zeros(channels), "ref.bn2.beta")
        bound = np.sqrt(6.0 / channels)
        self.fc_w = Parameter(rng.uniform(-bound, bound, size=(n_classes, channels)), "ref.fc.weight")
        self.fc_b = Parameter(np.zeros(n_classes), "ref.fc.bias")
        self._params = [self.conv1, self.g1, self.b1, self.conv2, self.g2, self.b2, self.fc_w, self.fc_b]

    def weight_params(self) -> list[Parameter]:
        return list(self._params)

    def zero_weight_grads(self) -> None:
        for p in self._params:
            p.grad = None

    def forward(self, x) -> Tensor:
        xt = x if isinstance(x, Tensor) else Tensor(x)
        h = relu(batch_norm(conv2d(xt, self.conv1, stride=1, padding=1), self.g1, self.b1))
        h = relu(batch_norm(conv2d(h, self.conv2, stride=2, padding=1), self.g2, self.b2))
        return linear(global_avg_pool(h), self.fc_w, self.fc_b)

    def loss(self, x, y) -> tuple[Tensor, Tensor]:
        logits = self.forward(x)
        return cross_entropy_logits(logits, y), logits
