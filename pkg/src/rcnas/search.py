"""Bilevel architecture search with periodic cost projection.

The outer loop alternates two phases.  Phase I runs e_u paired updates:
a weight step on a training batch with the architecture logits frozen,
then a logits step on a validation batch with the weights frozen
(first-order approximation: no unrolling through the weight update).
Phase II projects the logits back into the cost box and continues from
the projected point.  The first Phase I block is stretched by a warm
start multiplier so early projections act on meaningful mixtures.

With both penalty weights at zero the projection is the identity and
the whole procedure degenerates to plain alternating descent; the
reference loop at the bottom of this file implements that flat
procedure independently so the equivalence is checkable.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cells
from .autodiff import Tape, Tensor
from .cells import DiscreteArch
from .cost import ConstraintBox, CostScope, build_cost_table, exact_cost, expected_cost
from .data import BatchStream, Dataset, SplitSpec, normalization_stats, normalize, split_dataset
from .network import DiscreteNetwork, NetworkPlan, Supernet
from .optim import SGD, Adam
from .projection import ProjectionConfig, decay_lambda, project

__all__ = [
    "SearchConfig",
    "SearchResult",
    "SearchAbort",
    "run_search",
    "darts_reference_search",
    "evaluate",
    "retrain_eval",
    "RetrainResult",
    "LOG_COLUMNS",
]


class SearchAbort(RuntimeError):
    """Raised when a loss turns non-finite; carries the step diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class SearchConfig:
    """Knobs for the bilevel loop.  Defaults mirror the usual search recipe."""

    epochs: int = 50
    batch_size: int = 64
    e_u: int = 150  # phase-I steps per round
    warm_start_multiplier: int = 10  # first round runs warm_start_multiplier * e_u steps
    seed: int = 0
    val_fraction: float = 0.5  # held-out share used for the logits step
    w_lr: float = 0.025
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    theta_lr: float = 3e-4
    theta_betas: tuple[float, float] = (0.5, 0.999)
    theta_init_scale: float = 1e-3

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0 or self.e_u <= 0:
            raise ValueError("epochs, batch_size, and e_u must be positive")
        if self.warm_start_multiplier < 1:
            raise ValueError("warm_start_multiplier must be at least 1")


@dataclass
class SearchResult:
    arch: DiscreteArch
    theta: dict
    digests: list[str]
    log_rows: list[list[str]]
    phi: np.ndarray
    feasible: bool
    report: dict


LOG_COLUMNS = [
    "step",
    "round",
    "phase",
    "train_loss",
    "val_loss",
    "phi_params",
    "phi_flops",
    "lambda1",
    "lambda2",
    "feasible",
    "proj_iters",
]


def _fmt(x: float) -> str:
    return repr(float(x))


def _derive_seeds(seed: int) -> tuple[int, int, int, int]:
    """Model init, split, train stream, val stream."""
    s = np.random.SeedSequence(seed).generate_state(4)
    return tuple(int(v) for v in s)


def _setup(plan: NetworkPlan, ds: Dataset, cfg: SearchConfig):
    """Shared preamble: split, normalize, model, streams, optimizers.

    Both the projected search and the flat reference loop call this, so a
    degeneration comparison starts from bit-identical state.
    """
    model_seed, split_seed, train_seed, val_seed = _derive_seeds(cfg.seed)
    val, train = split_dataset(ds, SplitSpec(fraction=cfg.val_fraction, seed=split_seed))
    mean, std = normalization_stats(train)
    train = normalize(train, mean, std)
    val = normalize(val, mean, std)

    net = Supernet(plan, model_seed, theta_init_scale=cfg.theta_init_scale)
    train_stream = BatchStream(train, cfg.batch_size, train_seed)
    val_stream = BatchStream(val, cfg.batch_size, val_seed)
    sgd = SGD(net.weight_params(), lr=cfg.w_lr, momentum=cfg.w_momentum, weight_decay=cfg.w_weight_decay)
    adam = Adam(net.theta_tensors(), lr=cfg.theta_lr, betas=cfg.theta_betas)
    return net, train_stream, val_stream, sgd, adam


def _check_finite(value: float, what: str, step: int) -> None:
    if not np.isfinite(value):
        raise SearchAbort(
            f"{what} became non-finite at step {step}",
            {"step": step, "quantity": what, "value": float(value)},
        )


def phase1_step(net: Supernet, sgd: SGD, adam: Adam, train_stream: BatchStream, val_stream: BatchStream, step: int) -> tuple[float, float]:
    """One paired update: weights on a train batch, logits on a val batch."""
    # weight step; logits held fixed
    net.set_theta_trainable(False)
    net.set_weights_trainable(True)
    net.zero_weight_grads()
    xb, yb = train_stream.next_batch()
    with Tape() as tape:
        loss, _ = net.loss(xb, yb)
        tape.backward(loss)
    train_loss = float(loss.data)
    _check_finite(train_loss, "train loss", step)
    sgd.step()

    # logits step; weights held fixed
    net.set_weights_trainable(False)
    net.set_theta_trainable(True)
    net.zero_theta_grads()
    xv, yv = val_stream.next_batch()
    with Tape() as tape:
        vloss, _ = net.loss(xv, yv)
        tape.backward(vloss)
    val_loss = float(vloss.data)
    _check_finite(val_loss, "val loss", step)
    adam.step()
    net.set_weights_trainable(True)
    return train_loss, val_loss


def run_search(
    plan: NetworkPlan,
    ds: Dataset,
    box: ConstraintBox,
    cfg: SearchConfig = SearchConfig(),
    proj: ProjectionConfig = ProjectionConfig(),
    scope: CostScope = CostScope.TOP_K,
) -> SearchResult:
    """Projected bilevel search; returns the derived architecture and trace."""
    t0 = time.monotonic()
    net, train_stream, val_stream, sgd, adam = _setup(plan, ds, cfg)
    table = build_cost_table(plan)
    total_steps = cfg.epochs * train_stream.batches_per_epoch
    if total_steps <= 0:
        raise ValueError("no training steps: dataset too small for the batch size")

    digests: list[str] = []
    rows: list[list[str]] = []
    step = 0
    round_idx = 0
    while step < total_steps:
        round_len = cfg.e_u * (cfg.warm_start_multiplier if round_idx == 0 else 1)
        round_len = min(round_len, total_steps - step)
        lam1, lam2 = decay_lambda(proj, round_idx)
        for _ in range(round_len):
            train_loss, val_loss = phase1_step(net, sgd, adam, train_stream, val_stream, step)
            step += 1
            digests.append(net.arch.digest())
            phi = expected_cost(net.arch.numpy(), table, scope)
            rows.append(
                [
                    str(step),
                    str(round_idx),
                    "search",
                    _fmt(train_loss),
                    _fmt(val_loss),
                    _fmt(phi[0]),
                    _fmt(phi[1]),
                    _fmt(lam1),
                    _fmt(lam2),
                    str(int(box.feasible(phi))),
                    "",
                ]
            )

        res = project(net.arch.numpy(), box, table, scope, proj, lambda1=lam1, lambda2=lam2)
        net.arch.load(res.theta_p)
        rows.append(
            [
                str(step),
                str(round_idx),
                "project",
                "",
                "",
                _fmt(res.phi[0]),
                _fmt(res.phi[1]),
                _fmt(lam1),
                _fmt(lam2),
                str(int(res.feasible)),
                str(res.iterations),
            ]
        )
        round_idx += 1

    theta = net.arch.numpy()
    phi = expected_cost(theta, table, scope)
    arch = cells.derive_discrete(theta, plan.templates())
    report = {
        "steps": step,
        "rounds": round_idx,
        "phi": [float(v) for v in phi],
        "feasible": bool(box.feasible(phi)),
        "exact_cost": [float(v) for v in exact_cost(arch, plan)],
        "wall_seconds": time.monotonic() - t0,
    }
    return SearchResult(arch, theta, digests, rows, phi, bool(box.feasible(phi)), report)


def darts_reference_search(plan: NetworkPlan, ds: Dataset, cfg: SearchConfig = SearchConfig()) -> SearchResult:
    """Plain first-order alternating search: one flat loop, no projection.

    Deliberately independent of run_search's round scheduling so the two
    can be compared step for step.
    """
    t0 = time.monotonic()
    net, train_stream, val_stream, sgd, adam = _setup(plan, ds, cfg)
    table = build_cost_table(plan)
    total_steps = cfg.epochs * train_stream.batches_per_epoch
    if total_steps <= 0:
        raise ValueError("no training steps: dataset too small for the batch size")

    digests: list[str] = []
    rows: list[list[str]] = []
    for step in range(total_steps):
        # weight update on the training half
        net.set_theta_trainable(False)
        net.set_weights_trainable(True)
        net.zero_weight_grads()
        xb, yb = train_stream.next_batch()
        with Tape() as tape:
            loss, _ = net.loss(xb, yb)
            tape.backward(loss)
        _check_finite(float(loss.data), "train loss", step)
        sgd.step()

        # logits update on the validation half
        net.set_weights_trainable(False)
        net.set_theta_trainable(True)
        net.zero_theta_grads()
        xv, yv = val_stream.next_batch()
        with Tape() as tape:
            vloss, _ = net.loss(xv, yv)
            tape.backward(vloss)
        _check_finite(float(vloss.data), "val loss", step)
        adam.step()
        net.set_weights_trainable(True)

        digests.append(net.arch.digest())
        rows.append(
            [
                str(step + 1),
                "0",
                "search",
                _fmt(float(loss.data)),
                _fmt(float(vloss.data)),
                "",
                "",
                "0.0",
                "0.0",
                "1",
                "",
            ]
        )

    theta = net.arch.numpy()
    phi = expected_cost(theta, table, CostScope.TOP_K)
    arch = cells.derive_discrete(theta, plan.templates())
    report = {
        "steps": total_steps,
        "rounds": 0,
        "phi": [float(v) for v in phi],
        "feasible": True,
        "exact_cost": [float(v) for v in exact_cost(arch, plan)],
        "wall_seconds": time.monotonic() - t0,
    }
    return SearchResult(arch, theta, digests, rows, phi, True, report)


def evaluate(net, ds: Dataset, batch_size: int = 64) -> tuple[float, float]:
    """Mean loss and accuracy over the dataset in fixed order (no tape)."""
    n = len(ds)
    total_loss = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        xb = ds.images[start : start + batch_size]
        yb = ds.labels[start : start + batch_size]
        loss, logits = net.loss(xb, yb)
        total_loss += float(loss.data) * len(yb)
        correct += int((np.argmax(logits.data, axis=1) == yb).sum())
    return total_loss / n, correct / n


@dataclass
class RetrainResult:
    accuracy: float
    loss: float
    params: float
    flops: float
    seed: int
    history: list[dict] = field(default_factory=list)


def retrain_eval(
    arch: DiscreteArch,
    plan: NetworkPlan,
    train: Dataset,
    eval_ds: Dataset,
    epochs: int = 20,
    batch_size: int = 64,
    seed: int = 0,
    lr: float = 0.025,
    momentum: float = 0.9,
    weight_decay: float = 3e-4,
    cosine: bool = True,
    use_cutout: bool = False,
    eval_batch_size: int = 256,
) -> RetrainResult:
    """Train the discrete network from scratch and report held-out accuracy."""
    from .data import cutout

    model_seed, _, stream_seed, aug_seed = _derive_seeds(seed)
    mean, std = normalization_stats(train)
    train_n = normalize(train, mean, std)
    eval_n = normalize(eval_ds, mean, std)

    net = DiscreteNetwork(plan, arch, model_seed)
    sgd = SGD(net.weight_params(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    stream = BatchStream(train_n, batch_size, stream_seed)
    aug_rng = np.random.default_rng(np.random.SeedSequence(aug_seed))

    steps_per_epoch = stream.batches_per_epoch
    total = epochs * steps_per_epoch
    history: list[dict] = []
    for step in range(total):
        if cosine:
            sgd.lr = 0.5 * lr * (1.0 + np.cos(np.pi * step / max(1, total)))
        net.zero_weight_grads()
        xb, yb = stream.next_batch()
        if use_cutout:
            xb = cutout(xb, aug_rng)
        with Tape() as tape:
            loss, _ = net.loss(xb, yb)
            tape.backward(loss)
        _check_finite(float(loss.data), "retrain loss", step)
        sgd.step()
        if (step + 1) % steps_per_epoch == 0:
            history.append({"epoch": (step + 1) // steps_per_epoch, "train_loss": float(loss.data)})

    eval_loss, acc = evaluate(net, eval_n, batch_size=eval_batch_size)
    cost_vec = exact_cost(arch, plan)
    return RetrainResult(acc, eval_loss, float(cost_vec[0]), float(cost_vec[1]), seed, history)


def save_checkpoint(path: str | Path, net: Supernet, sgd: SGD, adam: Adam, train_stream: BatchStream, val_stream: BatchStream, step: int, round_idx: int) -> None:
    """Serialize the full search state to JSON (weights included)."""
    state = {
        "step": step,
        "round": round_idx,
        "theta": {f"{k}|{e[0]},{e[1]}": t.data.tolist() for (k, e), t in _theta_items(net)},
        "weights": {p.name: p.data.tolist() for p in net.weight_params()},
        "sgd": sgd.state_dict(),
        "adam": adam.state_dict(),
        "train_stream": train_stream.state_dict(),
        "val_stream": val_stream.state_dict(),
    }
    Path(path).write_text(json.dumps(state))


def load_checkpoint(path: str | Path, net: Supernet, sgd: SGD, adam: Adam, train_stream: BatchStream, val_stream: BatchStream) -> tuple[int, int]:
    """Restore state written by save_checkpoint; returns (step, round)."""
    state = json.loads(Path(path).read_text())
    theta = {}
    for key, vals in state["theta"].items():
        kind, edge = key.split("|")
        a, b = edge.split(",")
        theta[(kind, (int(a), int(b)))] = np.asarray(vals, dtype=np.float64)
    net.arch.load(theta)
    by_name = {p.name: p for p in net.weight_params()}
    if set(by_name) != set(state["weights"]):
        raise ValueError("checkpoint weights do not match the network")
    for name, vals in state["weights"].items():
        p = by_name[name]
        p.data = np.asarray(vals, dtype=np.float64).reshape(p.data.shape)
    sgd.load_state_dict(state["sgd"])
    adam.load_state_dict(state["adam"])
    train_stream.load_state_dict(state["train_stream"])
    val_stream.load_state_dict(state["val_stream"])
    return int(state["step"]), int(state["round"])


def _theta_items(net: Supernet):
    for kind, edge, t in net.arch.items():
        yield (kind, edge), t
