"""Multi-party simulation: wiring, equivalence to a monolithic net,
traffic accounting, dropout schedules, and the training loop.

The centerpiece is `MonolithicOracle`, a from-scratch replica of the whole
pipeline written with ordinary BLAS-backed numpy ops.  Running it in
lockstep with the simulator checks that splitting the computation across
parties changes nothing about the math.
"""

import numpy as np
import pytest

from splitsim import (
    DropSchedule,
    ExperimentConfig,
    Matrix,
    ModelSpec,
    PartitionSpec,
    PresenceMask,
    Rng,
    SgdConfig,
    SplitDataset,
    SyntheticSpec,
    apply_drop,
    build_simulation,
    compute_gradients,
    evaluate_with_drop,
    make_plan,
    party_costs,
    predict_epoch_traffic,
    run_training,
    schedule_from_config,
    synth_blobs,
    train_iteration,
    train_test_indices,
    vertical_split,
)
from splitsim.config import DropSpec
from splitsim.errors import (
    ConfigError,
    ProtocolError,
    ShapeError,
    StragglerError,
)
from splitsim.protocol import _forward_logits
from splitsim.tensor import take_rows

STRATEGIES = ("concat", "max", "avg", "sum", "mul")


def tiny_config(**overrides) -> ExperimentConfig:
    base = dict(
        dataset=SyntheticSpec(
            n_samples=80,
            n_features=8,
            n_classes=3,
            informative_per_client=(1, 1),
            separation=3.0,
            seed=5,
        ),
        partition=PartitionSpec(mode="contiguous", clients=2),
        model=ModelSpec(
            client_dims=(3,),
            client_activation="tanh",
            server_dims=(4,),
            server_activation="tanh",
            head_dims=(),
            head_activation="tanh",
        ),
        optimizer=SgdConfig(learning_rate=0.05, momentum=0.9),
        merge="sum",
        label_client=-1,
        epochs=2,
        batch_size=16,
        seed=11,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def build_world(cfg: ExperimentConfig):
    spec = cfg.dataset
    ds = synth_blobs(
        spec.n_samples,
        spec.n_features,
        spec.n_classes,
        spec.informative_per_client,
        Rng(spec.seed),
        spec.separation,
    )
    plan = make_plan(ds.n_features, cfg.partition.clients)
    sim = build_simulation(cfg, plan, ds.n_classes)
    split = vertical_split(ds, plan, sim.label_client)
    return ds, plan, sim, split


def subset(split: SplitDataset, idx: np.ndarray) -> SplitDataset:
    return SplitDataset(
        tuple(take_rows(p, idx) for p in split.parts),
        split.labels[idx],
        split.label_client,
        split.n_classes,
    )


def all_weights(sim):
    out = []
    for party in sim.parties:
        for layer in party.model.layers:
            out.append(layer.weights.array)
            out.append(layer.bias)
        if party.head is not None:
            for layer in party.head.layers:
                out.append(layer.weights.array)
                out.append(layer.bias)
    return out


# --- independent full-pipeline replica ------------------------------------

_ACT = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0.0).astype(float)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
}


def _ce(logits: np.ndarray, y: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = y.shape[0]
    loss = -float(logp[np.arange(n), y].mean())
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    return loss, g / n


class MonolithicOracle:
    """The same model as one big numpy program, no simulator code involved."""

    def __init__(self, sim):
        self.strategy = sim.strategy.value
        self.lr = sim.sgd.learning_rate
        self.mu = sim.sgd.momentum
        self.label_client = sim.label_client
        self.nets = {}
        for party in sim.clients:
            self.nets[("client", party.id)] = self._snap(party.model)
            if party.head is not None:
                self.nets[("head", party.id)] = self._snap(party.head)
        self.nets[("server", 0)] = self._snap(sim.server.model)
        self.vel = {
            key: [[np.zeros_like(w), np.zeros_like(b)] for w, b, _ in net]
            for key, net in self.nets.items()
        }

    @staticmethod
    def _snap(mlp):
        return [[l.weights.array.copy(), l.bias.copy(), l.activation] for l in mlp.layers]

    def _forward(self, key, x):
        acts, pres = [x], []
        for w, b, act in self.nets[key]:
            z = x @ w + b
            x = _ACT[act][0](z)
            pres.append(z)
            acts.append(x)
        return x, (acts, pres)

    def _backward(self, key, cache, g):
        acts, pres = cache
        grads = []
        for li in reversed(range(len(self.nets[key]))):
            w, b, act = self.nets[key][li]
            delta = g * _ACT[act][1](pres[li], acts[li + 1])
            grads.append((acts[li].T @ delta, delta.sum(axis=0)))
            g = delta @ w.T
        return list(reversed(grads)), g

    def _merge(self, outs):
        s = self.strategy
        if s == "concat":
            return np.concatenate(outs, axis=1)
        stack = np.stack(outs)
        if s == "sum":
            return stack.sum(axis=0)
        if s == "avg":
            return stack.mean(axis=0)
        if s == "max":
            return stack.max(axis=0)
        return np.prod(stack, axis=0)

    def _unmerge(self, outs, dmerged):
        s = self.strategy
        k = len(outs)
        if s == "concat":
            cuts = np.cumsum([o.shape[1] for o in outs])[:-1]
            return np.split(dmerged, cuts, axis=1)
        if s == "sum":
            return [dmerged.copy() for _ in range(k)]
        if s == "avg":
            return [dmerged / k for _ in range(k)]
        if s == "max":
            winner = np.stack(outs).argmax(axis=0)
            return [dmerged * (winner == i) for i in range(k)]
        stack = np.stack(outs)
        grads = []
        for i in range(k):
            grads.append(dmerged * np.prod(np.delete(stack, i, axis=0), axis=0))
        return grads

    def step(self, parts, labels, update=True):
        outs, caches = [], []
        for i, x in enumerate(parts):
            o, c = self._forward(("client", i), x)
            outs.append(o)
            caches.append(c)
        merged = self._merge(outs)
        server_out, server_cache = self._forward(("server", 0), merged)
        head_key = ("head", self.label_client)
        if head_key in self.nets:
            logits, head_cache = self._forward(head_key, server_out)
        else:
            logits = server_out
        loss, dlogits = _ce(logits, labels)
        grads = {}
        if head_key in self.nets:
            grads[head_key], dserver_out = self._backward(head_key, head_cache, dlogits)
        else:
            dserver_out = dlogits
        grads[("server", 0)], dmerged = self._backward(("server", 0), server_cache, dserver_out)
        for i, part_grad in enumerate(self._unmerge(outs, dmerged)):
            grads[("client", i)], _ = self._backward(("client", i), caches[i], part_grad)
        if update:
            for key, layer_grads in grads.items():
                net, vel = self.nets[key], self.vel[key]
                for li, (gw, gb) in enumerate(layer_grads):
                    vel[li][0] = self.mu * vel[li][0] + gw
                    vel[li][1] = self.mu * vel[li][1] + gb
                    net[li][0] = net[li][0] - self.lr * vel[li][0]
                    net[li][1] = net[li][1] - self.lr * vel[li][1]
        return loss, grads


def rel_gap(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


class TestBuildSimulation:
    def test_widths_follow_plan_and_strategy(self):
        cfg = tiny_config(partition=PartitionSpec(clients=3), merge="concat")
        ds, plan, sim, _ = build_world(cfg)
        assert plan.widths == (3, 3, 2)
        for i, party in enumerate(sim.clients):
            assert party.model.in_dim == plan.widths[i]
            assert party.model.out_dim == 3
        assert sim.server.model.in_dim == 9  # concat joins the three cuts
        cfg2 = tiny_config(partition=PartitionSpec(clients=3), merge="sum")
        sim2 = build_world(cfg2)[2]
        assert sim2.server.model.in_dim == 3

    def test_roles_and_head_placement(self):
        cfg = tiny_config(partition=PartitionSpec(clients=3))
        sim = build_world(cfg)[2]
        assert [p.role.value for p in sim.clients] == ["role1", "role1", "role3"]
        assert sim.server.role.value == "role0"
        assert sim.clients[2].head is not None
        assert sim.clients[0].head is None and sim.clients[1].head is None
        assert sim.clients[2].head.out_dim == 3

    def test_negative_label_client_resolves_to_last(self):
        sim = build_world(tiny_config(label_client=-1))[2]
        assert sim.label_client == 1
        sim0 = build_world(tiny_config(label_client=0))[2]
        assert sim0.label_client == 0
        assert sim0.clients[0].role.value == "role3"
        assert sim0.clients[0].head is not None

    def test_same_seed_same_parameters(self):
        a = build_world(tiny_config())[2]
        b = build_world(tiny_config())[2]
        for wa, wb in zip(all_weights(a), all_weights(b)):
            assert np.array_equal(wa, wb)
        c = build_world(tiny_config(seed=12))[2]
        assert not all(
            np.array_equal(wa, wc) for wa, wc in zip(all_weights(a), all_weights(c))
        )

    def test_parties_draw_distinct_streams(self):
        sim = build_world(tiny_config())[2]
        w0 = sim.clients[0].model.layers[0].weights.array
        w1 = sim.clients[1].model.layers[0].weights.array
        assert not np.array_equal(w0, w1)

    def test_elementwise_rejects_unequal_cuts(self):
        cfg = tiny_config(
            model=ModelSpec(client_dims=((4,), (5,)), server_dims=(4,), head_dims=()),
            merge="sum",
        )
        with pytest.raises(ShapeError):
            build_world(cfg)
        # concat tolerates the very same shapes
        build_world(tiny_config(
            model=ModelSpec(client_dims=((4,), (5,)), server_dims=(4,), head_dims=()),
            merge="concat",
        ))

    def test_headless_server_must_emit_class_scores(self):
        with pytest.raises(ConfigError):
            build_world(tiny_config(
                model=ModelSpec(client_dims=(3,), server_dims=(4,), head_dims=None)
            ))
        sim = build_world(tiny_config(
            model=ModelSpec(client_dims=(3,), server_dims=(4, 3), head_dims=None)
        ))[2]
        assert sim.label_holder.head is None
        assert sim.server.model.out_dim == 3

    def test_unknown_strategy(self):
        with pytest.raises(ShapeError):
            build_world(tiny_config(merge="mean"))


class TestMessageFlow:
    def test_train_message_count_all_present(self):
        for k in (2, 3, 4):
            cfg = tiny_config(partition=PartitionSpec(clients=k))
            _, _, sim, split = build_world(cfg)
            idx = np.arange(8)
            parts = [take_rows(p, idx) for p in split.parts]
            _, _, _, _, msgs = compute_gradients(sim, parts, split.labels[idx])
            assert len(msgs) == 2 * k + 2
            kinds = [m.kind for m in msgs]
            assert kinds.count("activation") == k + 1
            assert kinds.count("gradient") == k + 1

    def test_train_message_count_with_absence(self):
        cfg = tiny_config(partition=PartitionSpec(clients=4))
        _, _, sim, split = build_world(cfg)
        idx = np.arange(8)
        parts = [take_rows(p, idx) for p in split.parts]
        mask = PresenceMask((True, False, True, True))
        _, grads, _, _, msgs = compute_gradients(sim, parts, split.labels[idx], mask)
        assert len(msgs) == 2 * 3 + 2
        assert grads[1] is None
        senders_up = [m.sender for m in msgs if m.kind == "activation"][:-1]
        assert senders_up == [0, 2, 3]

    def test_eval_sends_activations_only(self):
        cfg = tiny_config(partition=PartitionSpec(clients=3))
        _, _, sim, split = build_world(cfg)
        idx = np.arange(8)
        parts = [take_rows(p, idx) for p in split.parts]
        _, msgs = _forward_logits(sim, parts, PresenceMask.all_present(3))
        assert len(msgs) == 3 + 1
        assert all(m.kind == "activation" for m in msgs)
        mask = PresenceMask((True, False, True))
        _, msgs = _forward_logits(sim, parts, mask)
        assert len(msgs) == 2 + 1

    def test_concat_raises_for_absent_client(self):
        cfg = tiny_config(merge="concat")
        _, _, sim, split = build_world(cfg)
        idx = np.arange(4)
        parts = [take_rows(p, idx) for p in split.parts]
        with pytest.raises(StragglerError):
            compute_gradients(sim, parts, split.labels[idx], PresenceMask((True, False)))

    def test_missing_labels_rejected(self):
        _, _, sim, split = build_world(tiny_config())
        idx = np.arange(4)
        parts = [take_rows(p, idx) for p in split.parts]
        with pytest.raises(ProtocolError):
            compute_gradients(sim, parts, None)

    def test_absent_client_state_untouched(self):
        cfg = tiny_config(partition=PartitionSpec(clients=3), merge="max")
        _, _, sim, split = build_world(cfg)
        idx = np.arange(8)
        parts = [take_rows(p, idx) for p in split.parts]
        labels = split.labels[idx]
        # warm up momentum so optimizer state exists for everyone
        train_iteration(sim, parts, labels)
        frozen_w = [l.weights.array.copy() for l in sim.clients[0].model.layers]
        frozen_b = [l.bias.copy() for l in sim.clients[0].model.layers]
        frozen_vel = [v.copy() for v in sim.clients[0].opt_state.w_vel]
        mask = PresenceMask((False, True, True))
        train_iteration(sim, parts, labels, mask)
        for layer, w, b in zip(sim.clients[0].model.layers, frozen_w, frozen_b):
            assert np.array_equal(layer.weights.array, w)
            assert np.array_equal(layer.bias, b)
        for vel, frozen in zip(sim.clients[0].opt_state.w_vel, frozen_vel):
            assert np.array_equal(vel, frozen)
        # ...while a present party and the server did move
        moved = sim.clients[1].model.layers[0].weights.array
        before_step = build_world(cfg)[2].clients[1].model.layers[0].weights.array
        assert not np.array_equal(moved, before_step)
        assert sim.server.opt_state is not None


class TestMonolithicEquivalence:
    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_lockstep_losses_two_clients(self, strategy):
        cfg = tiny_config(merge=strategy)
        _, _, sim, split = build_world(cfg)
        oracle = MonolithicOracle(sim)
        idx = np.arange(16)
        parts = [take_rows(p, idx) for p in split.parts]
        raw = [p.array for p in parts]
        labels = split.labels[idx]
        for step in range(20):
            loss_sim, _ = train_iteration(sim, parts, labels)
            loss_ref, _ = oracle.step(raw, labels)
            assert abs(loss_sim - loss_ref) <= 1e-12 * max(1.0, abs(loss_ref)), (
                f"{strategy} step {step}: {loss_sim} vs {loss_ref}"
            )

    def test_lockstep_losses_four_clients_headless(self):
        cfg = tiny_config(
            partition=PartitionSpec(clients=4),
            model=ModelSpec(client_dims=(3,), server_dims=(4, 3), head_dims=None),
            merge="max",
        )
        _, _, sim, split = build_world(cfg)
        oracle = MonolithicOracle(sim)
        idx = np.arange(16)
        parts = [take_rows(p, idx) for p in split.parts]
        raw = [p.array for p in parts]
        labels = split.labels[idx]
        for _ in range(20):
            loss_sim, _ = train_iteration(sim, parts, labels)
            loss_ref, _ = oracle.step(raw, labels)
            assert abs(loss_sim - loss_ref) <= 1e-12 * max(1.0, abs(loss_ref))

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_gradient_level_agreement(self, strategy):
        cfg = tiny_config(merge=strategy, partition=PartitionSpec(clients=2))
        _, _, sim, split = build_world(cfg)
        oracle = MonolithicOracle(sim)
        idx = np.arange(16)
        parts = [take_rows(p, idx) for p in split.parts]
        labels = split.labels[idx]
        loss, client_grads, server_grads, head_grads, _ = compute_gradients(
            sim, parts, labels
        )
        loss_ref, grads_ref = oracle.step([p.array for p in parts], labels, update=False)
        assert abs(loss - loss_ref) <= 1e-12 * max(1.0, abs(loss_ref))
        for i, gset in enumerate(client_grads):
            for li, (gw, gb) in enumerate(grads_ref[("client", i)]):
                assert rel_gap(gset.weights[li].array, gw) < 1e-10
                assert rel_gap(gset.biases[li], gb) < 1e-10
        for li, (gw, gb) in enumerate(grads_ref[("server", 0)]):
            assert rel_gap(server_grads.weights[li].array, gw) < 1e-10
        head_key = ("head", sim.label_client)
        for li, (gw, gb) in enumerate(grads_ref[head_key]):
            assert rel_gap(head_grads.weights[li].array, gw) < 1e-10
            assert rel_gap(head_grads.biases[li], gb) < 1e-10


class TestTraffic:
    def fixed_world(self, wire_element_size=4):
        cfg = tiny_config(
            dataset=SyntheticSpec(
                n_samples=8, n_features=4, n_classes=3,
                informative_per_client=(1, 1), seed=5,
            ),
            partition=PartitionSpec(clients=2),
            epochs=1,
            batch_size=8,
            wire_element_size=wire_element_size,
        )
        _, _, sim, split = build_world(cfg)
        return cfg, sim, split

    def test_hand_computed_byte_totals(self):
        # cuts 3+3 wide, server output 4 wide, 8 rows, 4 bytes/element:
        # each client trades 8*3*4 = 96 bytes with the server per direction,
        # and the label holder additionally trades 8*4*4 = 128 both ways.
        cfg, sim, split = self.fixed_world()
        run_training(sim, split, split, epochs=1, batch_size=8)
        t = sim.traffic
        assert t.bytes_sent(party=0) == 96
        assert t.bytes_received(party=0) == 96
        assert t.bytes_sent(party=1) == 96 + 128
        assert t.bytes_received(party=1) == 96 + 128
        assert t.bytes_sent(party=2) == 320
        assert t.bytes_received(party=2) == 320

    def test_prediction_matches_hand_numbers(self):
        cfg, sim, split = self.fixed_world()
        predicted = predict_epoch_traffic(sim, 8)
        assert predicted == {
            0: {"sent": 96, "received": 96},
            1: {"sent": 224, "received": 224},
            2: {"sent": 320, "received": 320},
        }

    def test_conservation(self):
        cfg, sim, split = self.fixed_world()
        run_training(sim, split, split, epochs=3, batch_size=4)
        t = sim.traffic
        server = sim.server.id
        client_sent = sum(t.bytes_sent(party=i) for i in range(sim.n_clients))
        client_recv = sum(t.bytes_received(party=i) for i in range(sim.n_clients))
        assert t.bytes_received(party=server) == client_sent
        assert t.bytes_sent(party=server) == client_recv
        assert t.bytes_sent() == t.bytes_received()

    def test_element_size_scales_linearly(self):
        _, sim4, split = self.fixed_world(4)
        _, sim8, _ = self.fixed_world(8)
        run_training(sim4, split, split, epochs=1, batch_size=8)
        run_training(sim8, split, split, epochs=1, batch_size=8)
        assert sim8.traffic.bytes_sent() == 2 * sim4.traffic.bytes_sent()

    def test_eval_phase_tallied_separately(self):
        cfg, sim, split = self.fixed_world()
        run_training(sim, split, split, epochs=1, batch_size=8)
        # two full-presence scoring passes over 8 rows: 2 * (96 + 96 + 128)
        assert sim.traffic.bytes_sent(phase="eval") == 640
        assert sim.traffic.bytes_sent(phase="train") == 640
        report = evaluate_with_drop(sim, split, None, epoch=5)
        assert sim.traffic.bytes_sent(phase="eval", epoch=5) == 320
        assert report.epoch == 5

    def test_eval_leaves_parameters_untouched(self):
        cfg, sim, split = self.fixed_world()
        before = [w.copy() for w in all_weights(sim)]
        evaluate_with_drop(sim, split, None)
        after = all_weights(sim)
        for b, a in zip(before, after):
            assert np.array_equal(b, a)
        assert sim.server.opt_state is None


class TestApplyDrop:
    def test_none_mode(self):
        assert apply_drop(None, 0, 4).n_present == 4
        sched = DropSchedule(mode="none")
        assert apply_drop(sched, 3, 4).n_present == 4

    def test_fixed_count_exact_and_deterministic(self):
        sched = DropSchedule(mode="fixed_count", count=2, seed=9)
        masks = [apply_drop(sched, it, 5) for it in range(50)]
        for m in masks:
            assert m.n_present == 3
        again = [apply_drop(sched, it, 5) for it in range(50)]
        assert [tuple(m.flags) for m in masks] == [tuple(m.flags) for m in again]
        assert len({tuple(m.flags) for m in masks}) > 1

    def test_fixed_count_zero_drops_nobody(self):
        sched = DropSchedule(mode="fixed_count", count=0, seed=9)
        assert apply_drop(sched, 0, 3).n_present == 3

    def test_fixed_count_frequency_is_uniform(self):
        sched = DropSchedule(mode="fixed_count", count=1, seed=17)
        absent = np.zeros(4)
        trials = 4000
        for it in range(trials):
            mask = apply_drop(sched, it, 4)
            for i in mask.absent:
                absent[i] += 1
        freq = absent / trials
        assert np.all(np.abs(freq - 0.25) < 0.025)

    def test_protected_client_never_drops(self):
        sched = DropSchedule(mode="probability", probability=0.9, seed=3, protected=2)
        for it in range(200):
            mask = apply_drop(sched, it, 4)
            assert mask[2] is True or mask[2] == True  # noqa: E712
            assert mask.n_present >= 1

    def test_probability_deterministic_and_never_empty(self):
        sched = DropSchedule(mode="probability", probability=0.95, seed=8)
        for it in range(100):
            a = apply_drop(sched, it, 3)
            b = apply_drop(sched, it, 3)
            assert tuple(a.flags) == tuple(b.flags)
            assert a.n_present >= 1

    def test_probability_frequency(self):
        sched = DropSchedule(mode="probability", probability=0.25, seed=21)
        absent = np.zeros(4)
        trials = 4000
        for it in range(trials):
            mask = apply_drop(sched, it, 4)
            for i in mask.absent:
                absent[i] += 1
        freq = absent / trials
        assert np.all(np.abs(freq - 0.25) < 0.025)

    def test_count_validation(self):
        with pytest.raises(ConfigError):
            apply_drop(DropSchedule(mode="fixed_count", count=4), 0, 4)
        with pytest.raises(ConfigError):
            apply_drop(DropSchedule(mode="fixed_count", count=1, protected=7), 0, 4)

    def test_dropping_everyone_but_the_protected_client(self):
        sched = DropSchedule(mode="fixed_count", count=3, seed=2, protected=0)
        mask = apply_drop(sched, 0, 4)
        assert mask.present == (0,)

    def test_schedule_validation(self):
        with pytest.raises(ConfigError):
            DropSchedule(phase="validate")
        with pytest.raises(ConfigError):
            DropSchedule(mode="sometimes")
        with pytest.raises(ConfigError):
            DropSchedule(count=-1)
        with pytest.raises(ConfigError):
            DropSchedule(mode="probability", probability=1.5)
        with pytest.raises(ConfigError):
            DropSchedule(mode="probability", probability=1.0)
        DropSchedule(mode="probability", probability=1.0, protected=0)


class TestScheduleFromConfig:
    def test_fixed_count_protects_label_holder_by_default(self):
        cfg = tiny_config(drop=DropSpec(mode="fixed_count", count=1))
        sched = schedule_from_config(cfg, 2)
        assert sched.protected == 1
        assert sched.seed == cfg.seed

    def test_probability_unprotected_by_default(self):
        cfg = tiny_config(drop=DropSpec(mode="probability", probability=0.5))
        assert schedule_from_config(cfg, 2).protected is None

    def test_explicit_protection_overrides(self):
        cfg = tiny_config(
            drop=DropSpec(mode="probability", probability=0.5, protect_label_client=True)
        )
        assert schedule_from_config(cfg, 2).protected == 1
        cfg2 = tiny_config(
            drop=DropSpec(mode="fixed_count", count=1, protect_label_client=False)
        )
        assert schedule_from_config(cfg2, 2).protected is None

    def test_explicit_drop_seed_wins(self):
        cfg = tiny_config(drop=DropSpec(mode="fixed_count", count=1, seed=777))
        assert schedule_from_config(cfg, 2).seed == 777


class TestRunTraining:
    def split_pair(self, cfg):
        ds, plan, sim, split = build_world(cfg)
        train_idx, test_idx = train_test_indices(ds.labels)
        return sim, subset(split, train_idx), subset(split, test_idx)

    def test_deterministic_repeat(self):
        cfg = tiny_config(epochs=3)
        sim_a, train, test = self.split_pair(cfg)
        recs_a, _ = run_training(sim_a, train, test, cfg.epochs, cfg.batch_size)
        sim_b, train_b, test_b = self.split_pair(cfg)
        recs_b, _ = run_training(sim_b, train_b, test_b, cfg.epochs, cfg.batch_size)
        assert len(recs_a) == cfg.epochs
        for ra, rb in zip(recs_a, recs_b):
            assert ra.train_loss == rb.train_loss
            assert ra.test.accuracy == rb.test.accuracy
            assert ra.test.loss == rb.test.loss
            assert ra.train.f1 == rb.train.f1
        for wa, wb in zip(all_weights(sim_a), all_weights(sim_b)):
            assert np.array_equal(wa, wb)

    def test_final_record_matches_fresh_evaluation(self):
        cfg = tiny_config(epochs=2)
        sim, train, test = self.split_pair(cfg)
        records, _ = run_training(sim, train, test, cfg.epochs, cfg.batch_size)
        again = evaluate_with_drop(sim, test, None, epoch=cfg.epochs - 1)
        last = records[-1].test
        assert again.accuracy == last.accuracy
        assert again.f1 == last.f1
        assert again.loss == last.loss

    def test_loss_decreases_on_easy_data(self):
        cfg = tiny_config(epochs=4, merge="concat")
        sim, train, test = self.split_pair(cfg)
        records, _ = run_training(sim, train, test, cfg.epochs, cfg.batch_size)
        assert records[-1].train_loss < records[0].train_loss
        assert records[-1].epoch == 3

    def test_train_drop_applies_only_in_train_phase(self):
        cfg = tiny_config(partition=PartitionSpec(clients=2), epochs=1)
        sim, train, test = self.split_pair(cfg)
        drop = DropSchedule(phase="test", mode="fixed_count", count=1, seed=1, protected=1)
        # a test-phase schedule must not perturb training at all
        records, _ = run_training(sim, train, test, 1, cfg.batch_size, drop=drop)
        sim2, train2, test2 = self.split_pair(cfg)
        records2, _ = run_training(sim2, train2, test2, 1, cfg.batch_size)
        assert records[0].train_loss == records2[0].train_loss

    def test_argument_validation(self):
        cfg = tiny_config()
        sim, train, test = self.split_pair(cfg)
        with pytest.raises(ConfigError):
            run_training(sim, train, test, 0, 16)
        with pytest.raises(ConfigError):
            run_training(sim, train, test, 1, 0)
        bad = SplitDataset(
            (train.parts[0],), train.labels, 0, train.n_classes
        )
        with pytest.raises(ShapeError):
            run_training(sim, bad, test, 1, 16)

    def test_mismatched_label_client_rejected(self):
        cfg = tiny_config()
        sim, train, test = self.split_pair(cfg)
        moved = SplitDataset(train.parts, train.labels, 0, train.n_classes)
        with pytest.raises(ConfigError):
            run_training(sim, moved, test, 1, 16)


class TestPartyCosts:
    def test_head_counts_toward_label_holder(self):
        cfg = tiny_config()
        sim = build_world(cfg)[2]
        costs = party_costs(sim)
        # client nets: 4 -> 3 (tanh): 15 params; label holder adds head 4 -> 3
        assert costs[0] == {"params": 15, "flops_per_sample": 30}
        assert costs[1]["params"] == 15 + (4 * 3 + 3)
        # server: 3 -> 4 tanh
        assert costs[2]["params"] == 3 * 4 + 4
