"""Role-based split training as a deterministic in-process simulation.

One computation server (role 0) owns the shared trunk.  K feature-holding
clients own partial nets whose cut-layer outputs are merged into the
trunk's input; exactly one of them (role 3) also holds the labels, computes
the loss, and may own extra logits-side layers ("head").  Per training
iteration the exchange is:

1. every present feature holder sends its cut activations to the server
2. the server sends the trunk output to the label holder
3. the label holder sends back the gradient at the trunk output
4. the server sends each present feature holder its slice of the merge
   gradient
5. every participant applies its local optimizer step

so an iteration with K' present feature holders moves 2*K' + 2 messages.
Messages are byte-counted as rows * cols * wire_element_size (payload only,
no framing), and the TrafficLog tallies training and evaluation separately.
Absent clients exchange no messages and apply no updates.

Everything is driven by one master seed: party init, per-epoch shuffles,
and drop masks each draw from an independent derived stream, so a given
(config, seed) pair reproduces losses, parameters, and byte counts exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .data import MetricsReport, PartitionPlan, SplitDataset, evaluate
from .errors import ConfigError, ProtocolError, ShapeError
from .merge import MergeStrategy, PresenceMask, merge_backward, merge_forward, validate_cut_shapes
from .nn import (
    GradientSet,
    Mlp,
    SgdConfig,
    SgdState,
    count_flops_per_sample,
    count_params,
    backward,
    forward,
    init_mlp,
    sgd_step,
    softmax_cross_entropy,
)
from .tensor import Matrix, Rng, take_rows

__all__ = [
    "Role",
    "Party",
    "WireMessage",
    "TrafficLog",
    "DropSchedule",
    "Simulation",
    "EpochRecord",
    "build_simulation",
    "schedule_from_config",
    "apply_drop",
    "compute_gradients",
    "train_iteration",
    "run_training",
    "evaluate_with_drop",
    "predict_epoch_traffic",
    "party_costs",
]

# Derivation keys for the independent random streams hanging off one seed.
_KEY_PARTY = 0
_KEY_HEAD = 1
_KEY_SHUFFLE = 2
_KEY_DROP = 3

DEFAULT_EVAL_BATCH = 256


class Role(str, Enum):
    SERVER = "role0"
    FEATURES = "role1"
    FEATURES_AND_LABELS = "role3"


@dataclass(eq=False)
class Party:
    """One participant: its id, protocol role, and locally owned model.

    Only the label holder carries a `head`.  Optimizer state lives with the
    party because updates are strictly local.
    """

    id: int
    role: Role
    model: Mlp
    opt_state: SgdState | None = None
    head: Mlp | None = None
    head_state: SgdState | None = None


@dataclass(frozen=True, eq=False)
class WireMessage:
    """One payload crossing a link, byte-counted as rows*cols*element_size."""

    sender: int
    receiver: int
    kind: str  # "activation" | "gradient"
    payload: Matrix
    byte_size: int


def _msg(sender: int, receiver: int, kind: str, payload: Matrix, element_size: int) -> WireMessage:
    return WireMessage(
        sender, receiver, kind, payload, payload.rows * payload.cols * element_size
    )


class TrafficLog:
    """Per-(phase, epoch, party) byte tallies of sent and received payloads."""

    def __init__(self, wire_element_size: int = 4) -> None:
        if wire_element_size < 1:
            raise ConfigError(f"wire_element_size must be positive, got {wire_element_size}")
        self.wire_element_size = int(wire_element_size)
        self._tally: dict[tuple[str, int, int], list[int]] = {}

    def record(self, msg: WireMessage, phase: str, epoch: int) -> None:
        if phase not in ("train", "eval"):
            raise ProtocolError(f"unknown traffic phase {phase!r}")
        sent = self._tally.setdefault((phase, epoch, msg.sender), [0, 0])
        sent[0] += msg.byte_size
        recv = self._tally.setdefault((phase, epoch, msg.receiver), [0, 0])
        recv[1] += msg.byte_size

    def _select(self, party: int | None, phase: str | None, epoch: int | None, slot: int) -> int:
        total = 0
        for (ph, ep, pid), (s, r) in self._tally.items():
            if phase is not None and ph != phase:
                continue
            if epoch is not None and ep != epoch:
                continue
            if party is not None and pid != party:
                continue
            total += (s, r)[slot]
        return total

    def bytes_sent(self, party: int | None = None, phase: str | None = "train",
                   epoch: int | None = None) -> int:
        return self._select(party, phase, epoch, 0)

    def bytes_received(self, party: int | None = None, phase: str | None = "train",
                       epoch: int | None = None) -> int:
        return self._select(party, phase, epoch, 1)

    def epochs(self, phase: str = "train") -> list[int]:
        return sorted({ep for (ph, ep, _pid) in self._tally if ph == phase})

    def parties(self) -> list[int]:
        return sorted({pid for (_ph, _ep, pid) in self._tally})


@dataclass(frozen=True)
class DropSchedule:
    """Deterministic client-dropout policy.

    `mode` is none | fixed_count | probability.  The mask for an iteration
    is a pure function of (seed, iteration); `protected` names a client
    index that never drops (normally the label holder's feature branch) and
    may be None.  Probability mode redraws until at least one client is
    present.
    """

    phase: str = "train"
    mode: str = "none"
    count: int = 0
    probability: float = 0.0
    seed: int = 0
    protected: int | None = None

    def __post_init__(self) -> None:
        if self.phase not in ("train", "test"):
            raise ConfigError(f"drop phase must be train|test, got {self.phase!r}")
        if self.mode not in ("none", "fixed_count", "probability"):
            raise ConfigError(f"unknown drop mode {self.mode!r}")
        if self.count < 0:
            raise ConfigError(f"drop count must be >= 0, got {self.count}")
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError(f"drop probability must lie in [0, 1], got {self.probability}")
        if self.mode == "probability" and self.probability >= 1.0 and self.protected is None:
            raise ConfigError("probability 1.0 with no protected client would never converge")


def apply_drop(schedule: DropSchedule | None, iteration: int, n_clients: int) -> PresenceMask:
    """The presence mask for one iteration; same inputs give the same mask."""
    if schedule is None or schedule.mode == "none":
        return PresenceMask.all_present(n_clients)
    protected = schedule.protected
    if protected is not None and not 0 <= protected < n_clients:
        raise ConfigError(f"protected client {protected} out of range for {n_clients}")
    droppable = [i for i in range(n_clients) if i != protected]
    if schedule.mode == "fixed_count":
        if schedule.count >= n_clients:
            raise ConfigError(
                f"cannot drop {schedule.count} of {n_clients} clients"
            )
        if schedule.count > len(droppable):
            raise ConfigError(
                f"cannot drop {schedule.count} clients while protecting one of {n_clients}"
            )
        if schedule.count == 0:
            return PresenceMask.all_present(n_clients)
        rng = Rng(schedule.seed).derive(_KEY_DROP, iteration)
        absent = set(int(i) for i in rng.choice(droppable, schedule.count))
        return PresenceMask(tuple(i not in absent for i in range(n_clients)))
    # probability mode: independent coin per droppable client, redraw while
    # nobody at all would be present.
    rng = Rng(schedule.seed).derive(_KEY_DROP, iteration)
    while True:
        coins = rng.uniform(0.0, 1.0, len(droppable))
        absent = {i for i, c in zip(droppable, coins) if c < schedule.probability}
        flags = tuple(i not in absent for i in range(n_clients))
        if any(flags):
            return PresenceMask(flags)


@dataclass(eq=False)
class Simulation:
    """All parties plus the shared run context (plan, strategy, traffic)."""

    clients: list[Party]
    server: Party
    plan: PartitionPlan
    strategy: MergeStrategy
    label_client: int
    sgd: SgdConfig
    n_classes: int
    seed: int
    wire_element_size: int = 4
    eval_batch_size: int = DEFAULT_EVAL_BATCH
    traffic: TrafficLog = field(default_factory=TrafficLog)

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    @property
    def label_holder(self) -> Party:
        return self.clients[self.label_client]

    @property
    def parties(self) -> list[Party]:
        return [*self.clients, self.server]


@dataclass(frozen=True)
class EpochRecord:
    """One epoch of training: the mean optimization loss over its
    iterations plus full-presence metrics on both splits."""

    epoch: int
    train_loss: float
    train: MetricsReport
    test: MetricsReport


def build_simulation(
    cfg: ExperimentConfig, plan: PartitionPlan, n_classes: int
) -> Simulation:
    """Construct and validate every party's net from the config and plan.

    Client input widths come from the plan, the server input width from the
    merge strategy, and each party draws its Glorot init from its own
    stream derived off the master seed.  All shape/strategy inconsistencies
    surface here, before any training step.
    """
    k = plan.n_clients
    label_client = cfg.resolve_label_client(k)
    strategy = MergeStrategy.from_name(cfg.merge)
    hidden = cfg.model.per_client_dims(k)
    cut_widths = [dims[-1] for dims in hidden]
    validate_cut_shapes(strategy, cut_widths)
    merged_width = sum(cut_widths) if strategy is MergeStrategy.CONCAT else cut_widths[0]
    if not cfg.model.server_dims:
        raise ConfigError("model.server_dims needs at least one layer width")
    server_dims = [merged_width, *cfg.model.server_dims]
    head_dims = cfg.model.head_dims
    if head_dims is None and server_dims[-1] != n_classes:
        raise ConfigError(
            f"with no head the server must emit {n_classes} logits, "
            f"but its last width is {server_dims[-1]}"
        )
    master = Rng(cfg.seed)
    clients: list[Party] = []
    for i in range(k):
        dims = [len(plan.columns[i]), *hidden[i]]
        net = init_mlp(dims, cfg.model.client_activation, master.derive(_KEY_PARTY, i))
        role = Role.FEATURES_AND_LABELS if i == label_client else Role.FEATURES
        clients.append(Party(id=i, role=role, model=net))
    server = Party(
        id=k,
        role=Role.SERVER,
        model=init_mlp(server_dims, cfg.model.server_activation, master.derive(_KEY_PARTY, k)),
    )
    if head_dims is not None:
        full = [server_dims[-1], *head_dims, n_classes]
        acts = [cfg.model.head_activation] * (len(full) - 2) + ["identity"]
        clients[label_client].head = init_mlp(full, acts, master.derive(_KEY_HEAD))
    return Simulation(
        clients=clients,
        server=server,
        plan=plan,
        strategy=strategy,
        label_client=label_client,
        sgd=cfg.optimizer,
        n_classes=n_classes,
        seed=cfg.seed,
        wire_element_size=cfg.wire_element_size,
        traffic=TrafficLog(cfg.wire_element_size),
    )


def schedule_from_config(cfg: ExperimentConfig, n_clients: int) -> DropSchedule:
    """Turn the config's drop block into a concrete schedule.

    The drop stream seeds from the master seed unless overridden, and the
    label holder's feature branch is protected by default in fixed_count
    mode (probability mode may drop it; a redraw keeps at least one client
    present)."""
    spec = cfg.drop
    label_client = cfg.resolve_label_client(n_clients)
    protect = spec.protect_label_client
    if protect is None:
        protect = spec.mode == "fixed_count"
    return DropSchedule(
        phase=spec.phase,
        mode=spec.mode,
        count=spec.count,
        probability=spec.probability,
        seed=spec.seed if spec.seed is not None else cfg.seed,
        protected=label_client if protect else None,
    )


def _validate_batch(sim: Simulation, parts: Sequence[Matrix], labels) -> None:
    if len(parts) != sim.n_clients:
        raise ShapeError(f"{len(parts)} feature parts for {sim.n_clients} clients")
    if labels is None:
        raise ProtocolError("no labels at the label-holding client")


def compute_gradients(
    sim: Simulation,
    parts: Sequence[Matrix],
    labels,
    mask: PresenceMask | None = None,
) -> tuple[float, list[GradientSet | None], GradientSet, GradientSet | None, list[WireMessage]]:
    """Run steps 1-4 of the iteration without applying updates.

    Returns (loss, per-client gradient sets with None for absent clients,
    server gradients, head gradients or None, messages in wire order).
    """
    _validate_batch(sim, parts, labels)
    if mask is None:
        mask = PresenceMask.all_present(sim.n_clients)
    if len(mask) != sim.n_clients:
        raise ShapeError(f"mask covers {len(mask)} clients, simulation has {sim.n_clients}")
    es = sim.wire_element_size
    msgs: list[WireMessage] = []
    acts: list[Matrix | None] = [None] * sim.n_clients
    caches = [None] * sim.n_clients
    for i in mask.present:
        out, cache = forward(sim.clients[i].model, parts[i])
        acts[i] = out
        caches[i] = cache
        msgs.append(_msg(i, sim.server.id, "activation", out, es))
    merged, mcache = merge_forward(sim.strategy, acts, mask)
    server_out, server_cache = forward(sim.server.model, merged)
    msgs.append(_msg(sim.server.id, sim.label_client, "activation", server_out, es))
    holder = sim.label_holder
    if holder.head is not None:
        logits, head_cache = forward(holder.head, server_out)
    else:
        logits = server_out
    loss, dlogits = softmax_cross_entropy(logits, labels)
    if holder.head is not None:
        head_grads, dserver_out = backward(holder.head, head_cache, dlogits)
    else:
        head_grads, dserver_out = None, dlogits
    msgs.append(_msg(sim.label_client, sim.server.id, "gradient", dserver_out, es))
    server_grads, dmerged = backward(sim.server.model, server_cache, dserver_out)
    part_grads = merge_backward(mcache, dmerged)
    client_grads: list[GradientSet | None] = [None] * sim.n_clients
    for i in mask.present:
        msgs.append(_msg(sim.server.id, i, "gradient", part_grads[i], es))
        grads, _ = backward(sim.clients[i].model, caches[i], part_grads[i])
        client_grads[i] = grads
    return loss, client_grads, server_grads, head_grads, msgs


def train_iteration(
    sim: Simulation,
    parts: Sequence[Matrix],
    labels,
    mask: PresenceMask | None = None,
) -> tuple[float, list[WireMessage]]:
    """One full iteration: exchange gradients, then apply local SGD steps.

    Present clients update in ascending id order, then the server, then the
    label holder's head; absent clients' parameters and optimizer state are
    untouched.  Returns the batch loss and the messages that crossed the
    wire (the caller accounts them).
    """
    if mask is None:
        mask = PresenceMask.all_present(sim.n_clients)
    loss, client_grads, server_grads, head_grads, msgs = compute_gradients(
        sim, parts, labels, mask
    )
    for i in mask.present:
        party = sim.clients[i]
        party.model, party.opt_state = sgd_step(
            party.model, client_grads[i], sim.sgd, party.opt_state
        )
    sim.server.model, sim.server.opt_state = sgd_step(
        sim.server.model, server_grads, sim.sgd, sim.server.opt_state
    )
    holder = sim.label_holder
    if holder.head is not None:
        holder.head, holder.head_state = sgd_step(
            holder.head, head_grads, sim.sgd, holder.head_state
        )
    return loss, msgs


def _forward_logits(
    sim: Simulation, parts: Sequence[Matrix], mask: PresenceMask
) -> tuple[Matrix, list[WireMessage]]:
    """Inference pass: activations flow forward, nothing flows back."""
    es = sim.wire_element_size
    msgs: list[WireMessage] = []
    acts: list[Matrix | None] = [None] * sim.n_clients
    for i in mask.present:
        out, _ = forward(sim.clients[i].model, parts[i])
        acts[i] = out
        msgs.append(_msg(i, sim.server.id, "activation", out, es))
    merged, _ = merge_forward(sim.strategy, acts, mask)
    server_out, _ = forward(sim.server.model, merged)
    msgs.append(_msg(sim.server.id, sim.label_client, "activation", server_out, es))
    holder = sim.label_holder
    logits = forward(holder.head, server_out)[0] if holder.head is not None else server_out
    return logits, msgs


def _batch_ranges(n: int, batch_size: int) -> list[np.ndarray]:
    order = np.arange(n)
    return [order[s : s + batch_size] for s in range(0, n, batch_size)]


def evaluate_with_drop(
    sim: Simulation,
    split: SplitDataset,
    drop: DropSchedule | None,
    *,
    epoch: int = 0,
) -> MetricsReport:
    """Score a split under a test-time drop schedule (None = everyone present).

    Forward-only: parameters and optimizer state are untouched, and zero
    gradient messages are produced.  Batch b of the pass uses the drop mask
    for iteration b, so the schedule is reproducible.
    """
    if split.n_clients != sim.n_clients:
        raise ShapeError(f"split has {split.n_clients} parts, simulation {sim.n_clients}")
    if split.label_client != sim.label_client:
        raise ConfigError(
            f"split holds labels at client {split.label_client}, "
            f"simulation expects {sim.label_client}"
        )
    n = split.n_samples
    preds = np.empty(n, dtype=np.int64)
    loss_total = 0.0
    for b, idx in enumerate(_batch_ranges(n, sim.eval_batch_size)):
        mask = apply_drop(drop, b, sim.n_clients)
        parts_b = [take_rows(p, idx) for p in split.parts]
        labels_b = split.labels[idx]
        logits, msgs = _forward_logits(sim, parts_b, mask)
        for m in msgs:
            sim.traffic.record(m, "eval", epoch)
        batch_loss, _ = softmax_cross_entropy(logits, labels_b)
        loss_total += batch_loss * idx.size
        preds[idx] = logits.array.argmax(axis=1)
    report = evaluate(preds, split.labels, sim.n_classes)
    return replace(report, loss=loss_total / n, epoch=epoch)


def run_training(
    sim: Simulation,
    train_split: SplitDataset,
    test_split: SplitDataset,
    epochs: int,
    batch_size: int,
    drop: DropSchedule | None = None,
) -> tuple[list[EpochRecord], TrafficLog]:
    """The full training loop.

    Every epoch reshuffles the training rows from a stream derived off
    (seed, epoch), walks them in mini-batches (the short final batch is
    kept), applies the drop schedule when it targets the train phase, and
    then scores both splits with everyone present.  Returns one record per
    epoch plus the simulation's traffic log (train and eval phases tallied
    separately).
    """
    if epochs < 1:
        raise ConfigError(f"epochs must be positive, got {epochs}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    for name, split in (("train", train_split), ("test", test_split)):
        if split.n_clients != sim.n_clients:
            raise ShapeError(
                f"{name} split has {split.n_clients} parts, simulation {sim.n_clients}"
            )
        if split.label_client != sim.label_client:
            raise ConfigError(
                f"{name} split holds labels at client {split.label_client}, "
                f"simulation expects {sim.label_client}"
            )
        for i, part in enumerate(split.parts):
            if part.cols != sim.clients[i].model.in_dim:
                raise ShapeError(
                    f"{name} split gives client {i} {part.cols} columns but its "
                    f"net expects {sim.clients[i].model.in_dim}"
                )
    train_drop = drop if drop is not None and drop.phase == "train" else None
    n = train_split.n_samples
    records: list[EpochRecord] = []
    iteration = 0
    for epoch in range(epochs):
        perm = Rng(sim.seed).derive(_KEY_SHUFFLE, epoch).permutation(n)
        loss_sum = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            parts_b = [take_rows(p, idx) for p in train_split.parts]
            labels_b = train_split.labels[idx]
            mask = apply_drop(train_drop, iteration, sim.n_clients)
            loss, msgs = train_iteration(sim, parts_b, labels_b, mask)
            for m in msgs:
                sim.traffic.record(m, "train", epoch)
            loss_sum += loss * idx.size
            iteration += 1
        train_report = evaluate_with_drop(sim, train_split, None, epoch=epoch)
        test_report = evaluate_with_drop(sim, test_split, None, epoch=epoch)
        records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / n,
                train=train_report,
                test=test_report,
            )
        )
    return records, sim.traffic


def predict_epoch_traffic(sim: Simulation, n_rows: int) -> dict[int, dict[str, int]]:
    """Closed-form per-party train bytes for one epoch with nobody absent.

    Each feature holder ships n_rows * cut_width * element_size up and gets
    the same volume of gradients back; the label holder additionally trades
    n_rows * server_out * element_size with the server in both directions.
    Mini-batch boundaries don't change the totals.
    """
    es = sim.wire_element_size
    server_out = sim.server.model.out_dim
    out: dict[int, dict[str, int]] = {}
    server_sent = 0
    server_recv = 0
    for party in sim.clients:
        w = party.model.out_dim
        sent = n_rows * w * es
        recv = n_rows * w * es
        if party.id == sim.label_client:
            sent += n_rows * server_out * es
            recv += n_rows * server_out * es
        out[party.id] = {"sent": sent, "received": recv}
        server_recv += sent
        server_sent += recv
    out[sim.server.id] = {"sent": server_sent, "received": server_recv}
    return out


def party_costs(sim: Simulation) -> dict[int, dict[str, int]]:
    """Trainable parameter and forward-flop counts per party (the label
    holder's head counts toward that client)."""
    out: dict[int, dict[str, int]] = {}
    for party in sim.parties:
        params = count_params(party.model)
        flops = count_flops_per_sample(party.model)
        if party.head is not None:
            params += count_params(party.head)
            flops += count_flops_per_sample(party.head)
        out[party.id] = {"params": params, "flops_per_sample": flops}
    return out
