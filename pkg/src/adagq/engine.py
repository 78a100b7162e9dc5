"""Federated training orchestration: clients, server rounds and strategies.

All strategies share one update path. Each client runs ``local_epochs`` of
minibatch SGD from its replica and uploads the pseudo-gradient
``(w_start - w_end) / lr``; the server aggregates the decoded uploads with
data-fraction weights in client-id order and every replica applies the
aggregate with the same learning rate at the start of the next round.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import codec
from .allocator import AllocationPlan, allocate, estimate_time_stats, uniform_plan
from .config import ControllerSpec, ExperimentConfig
from .controller import ControllerState, auxiliary_levels, controller_step, norm_only_update
from .core_ml import Model, evaluate, init_model, lr_at_round, sgd_step, train_epoch
from .data import Dataset, generate_synthetic, load_csv, load_idx
from .rng import stream
from .simnet import (
    ComputeProfile,
    LinkProfile,
    RoundTiming,
    compute_time,
    hypothetical_round_time,
    load_profiles,
    round_time,
    sample_compute,
    sample_rates,
    transmission_time,
    uniform_rates,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class PartitionError(ValueError):
    pass


class RoundAborted(RuntimeError):
    pass


# --------------------------------------------------------------------------
# partitioning and aggregation


def partition_noniid(
    labels: np.ndarray, n: int, sigma_d: float, rng: np.random.Generator, n_classes: int | None = None
) -> list[np.ndarray]:
    """Equal-size index partitions; a ``sigma_d`` share of each is one class.

    Client ``i``'s dominant class is ``i % n_classes``; the rest of its
    partition is spread evenly over the other classes. ``sigma_d == 0`` is
    the iid case: every class (including the would-be dominant one) gets an
    even share.
    """
    labels = np.asarray(labels)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    if not 0 <= sigma_d <= 1:
        raise ValueError("sigma_d must be in [0, 1]")
    m = len(labels) // n
    if m < n_classes:
        raise PartitionError(
            f"{len(labels)} samples give {m} per client; need at least n_classes={n_classes}"
        )

    counts = np.zeros((n, n_classes), dtype=np.int64)
    for i in range(n):
        dom = i % n_classes
        if sigma_d == 0:
            others = [(dom + j) % n_classes for j in range(n_classes)]
            rest = m
        else:
            d = min(m, math.floor(sigma_d * m + 0.5))
            counts[i, dom] = d
            others = [(dom + j) % n_classes for j in range(1, n_classes)]
            rest = m - d
        base, extra = divmod(rest, len(others))
        # rotate who gets the remainder so no class is systematically favoured
        shift = i // n_classes
        for j, c in enumerate(others):
            counts[i, c] += base + (1 if (j - shift) % len(others) < extra else 0)

    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in range(n_classes)]
    need = counts.sum(axis=0)
    short = [(c, int(need[c]), len(pools[c])) for c in range(n_classes) if need[c] > len(pools[c])]
    if short:
        detail = ", ".join(f"class {c} needs {r} has {h}" for c, r, h in short)
        raise PartitionError(f"insufficient per-class samples: {detail}")

    taken = np.zeros(n_classes, dtype=np.int64)
    parts = []
    for i in range(n):
        chunks = []
        for c in range(n_classes):
            k = counts[i, c]
            chunks.append(pools[c][taken[c] : taken[c] + k])
            taken[c] += k
        parts.append(rng.permutation(np.concatenate(chunks)))
    return parts


def decode_update(u) -> np.ndarray:
    if isinstance(u, codec.QuantizedGradient):
        return codec.qsgd_decode(u)
    if isinstance(u, codec.SparseGradient):
        return codec.topk_decode(u)
    return np.asarray(u, dtype=np.float64)


def aggregate(updates: Sequence, p: Sequence[float]) -> np.ndarray:
    """Weighted sum of decoded updates, accumulated in list (client-id) order."""
    if len(updates) != len(p) or not updates:
        raise ValueError("need one weight per update")
    if abs(sum(p) - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights sum to {sum(p)}, not 1")
    decoded = [decode_update(u) for u in updates]
    dim = len(decoded[0])
    if any(len(d) != dim for d in decoded):
        raise ValueError("updates decode to different dimensions")
    acc = np.zeros(dim)
    for w, d in zip(p, decoded):
        acc += w * d
    return acc


# --------------------------------------------------------------------------
# state


@dataclass
class ClientState:
    id: int
    train: Dataset
    probe: Dataset
    model: Model
    link: LinkProfile
    compute: ComputeProfile
    p: float


@dataclass(frozen=True)
class Strategy:
    name: str
    params: dict[str, Any]

    @property
    def local_epochs(self) -> int:
        return int(self.params["local_epochs"])


@dataclass
class RoundTelemetry:
    round: int
    t_down: tuple[float, ...]
    t_cp: tuple[float, ...]
    t_cm: tuple[float, ...]
    uploaded_bits: tuple[int, ...]
    bits: tuple[int, ...]
    levels: tuple[int, ...]
    probe_loss_prev: tuple[float, ...] = ()
    probe_loss: tuple[float, ...] = ()
    probe_loss_aux: tuple[float, ...] = ()


@dataclass
class MetricsRecord:
    round: int
    sim_time_s: float
    train_loss: float
    test_accuracy: float
    mean_levels: float
    aux_levels: int
    sign: int
    grad_norm: float
    round_time_s: float
    client_bits: tuple[int, ...]
    client_upload_bits: tuple[int, ...]
    t_cp: tuple[float, ...]
    t_cm: tuple[float, ...]
    t_down: tuple[float, ...]
    cum_uploaded_bytes: tuple[float, ...]


@dataclass
class ExperimentResult:
    records: list[MetricsRecord]
    summary: dict[str, Any]
    telemetry: list[dict[str, Any]] = field(default_factory=list)
    links: list[LinkProfile] = field(default_factory=list)
    compute: list[ComputeProfile] = field(default_factory=list)


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        full = generate_synthetic(
            ds.n_classes, ds.input_dim, ds.n_samples + ds.n_test, ds.class_sep, stream(cfg.seed, "data")
        )
        # stratified split keeps the training classes balanced for the partitioner
        train_idx = []
        for c in range(ds.n_classes):
            members = np.flatnonzero(full.labels == c)
            share = ds.n_samples // ds.n_classes + (1 if c < ds.n_samples % ds.n_classes else 0)
            train_idx.append(members[:share])
        train_idx = np.sort(np.concatenate(train_idx))
        test_idx = np.setdiff1d(np.arange(len(full)), train_idx)
        return full.subset(train_idx), full.subset(test_idx)
    if ds.kind == "idx":
        train = load_idx(ds.images, ds.labels, ds.n_classes)
        test = load_idx(ds.test_images, ds.test_labels, ds.n_classes) if ds.test_images else train
        return train, test
    train = load_csv(ds.path, ds.label_column)
    test = load_csv(ds.test_path, ds.label_column) if ds.test_path else train
    return train, test


# --------------------------------------------------------------------------
# simulation


class Simulation:
    def __init__(self, cfg: ExperimentConfig, datasets: tuple[Dataset, Dataset] | None = None):
        self.cfg = cfg
        self.strategy = Strategy(cfg.strategy, cfg.params())
        train, test = datasets or build_datasets(cfg)
        self.test = test
        n = cfg.n_clients
        seed = cfg.seed

        parts = partition_noniid(train.labels, n, cfg.sigma_d, stream(seed, "partition"), train.n_classes)
        if cfg.profiles_path:
            links, compute = load_profiles(cfg.profiles_path)
            if len(links) != n:
                raise ValueError(f"profile trace has {len(links)} clients, config has {n}")
        else:
            if cfg.sigma_r is not None:
                links = sample_rates(
                    n, cfg.sigma_r, stream(seed, "rates"), cfg.rate_range_mbps[1], cfg.rate_jitter, seed
                )
            else:
                links = uniform_rates(
                    n, tuple(cfg.rate_range_mbps), stream(seed, "rates"), cfg.rate_jitter, seed
                )
            compute = sample_compute(
                n, tuple(cfg.compute_range_s), stream(seed, "compute_profile"), cfg.compute_noise_sigma
            )
        self.links, self.compute = links, compute

        self.model = init_model(
            cfg.model.kind, train.input_dim, train.n_classes, tuple(cfg.model.hidden), stream(seed, "init")
        )
        sizes = []
        self.clients: list[ClientState] = []
        for i, idx in enumerate(parts):
            n_probe = max(1, math.floor(cfg.probe_fraction * len(idx) + 0.5))
            probe, tr = idx[:n_probe], idx[n_probe:]
            sizes.append(len(tr))
            self.clients.append(
                ClientState(i, train.subset(tr), train.subset(probe), self.model.copy(), links[i], compute[i], 0.0)
            )
        total = sum(sizes)
        for c, m in zip(self.clients, sizes):
            c.p = m / total
        self.train_x = np.concatenate([c.train.features for c in self.clients])
        self.train_y = np.concatenate([c.train.labels for c in self.clients])
        self.dim = self.model.num_params

        self.k = 0
        self.clock = 0.0
        self.g_prev: np.ndarray | None = None
        self.cum_bits = [0] * n
        self.history: list[RoundTelemetry] = []
        self.telemetry: list[dict[str, Any]] = []
        self.last_timing: RoundTiming | None = None

        cs = cfg.controller
        s0 = float(2**cs.s0_bits - 1)
        self.ctrl = ControllerState(min(max(s0, cs.s_min), cs.s_max), None, cs.lambda_g, cs.s_min, cs.s_max)
        self.plan: AllocationPlan = uniform_plan(self.ctrl.s_k, n)
        self.aux_plan: AllocationPlan = uniform_plan(auxiliary_levels(self.ctrl.s_k), n)
        self.norm_bits = float(self.strategy.params.get("initial_bits", 8))
        self.prev_norm: float | None = None

    # -- helpers -----------------------------------------------------------

    def lr(self, k: int) -> float:
        return lr_at_round(k, self.cfg.lr, self.cfg.lr_decay)

    def _apply_broadcast(self, client: ClientState) -> None:
        if self.g_prev is not None:
            client.model = sgd_step(client.model, self.g_prev, self.lr(self.k - 1))

    def _local_update(self, client: ClientState) -> tuple[np.ndarray, float]:
        k, epochs = self.k, self.strategy.local_epochs
        lr = self.lr(k)
        rng = stream(self.cfg.seed, "batches", client.id, k)
        m = client.model
        for _ in range(epochs):
            m = train_epoch(m, client.train.features, client.train.labels, lr, self.cfg.batch_size, rng)
        g = (client.model.weights - m.weights) / lr
        t_cp = compute_time(client.compute, epochs, stream(self.cfg.seed, "compute", client.id, k))
        return g, t_cp

    def _through_wire(self, q: codec.QuantizedGradient) -> codec.QuantizedGradient:
        return codec.deserialize(codec.serialize(q))

    def _downlink_bits(self, upload_bits: int) -> int:
        if self.cfg.downlink == "mirror":
            return upload_bits
        return codec.dense_size_bits(self.dim)

    def _finish_round(
        self,
        uploads: list,
        t_cp: list[float],
        up_bits: list[int],
        q_bits: list[int],
        levels: list[int],
        extra: dict[str, Any],
    ) -> tuple[RoundTelemetry, MetricsRecord]:
        k = self.k
        n = len(self.clients)
        if len(uploads) != n:
            raise RoundAborted(f"round {k}: {n - len(uploads)} client(s) missing")
        g = aggregate(uploads, [c.p for c in self.clients])
        norm = float(np.linalg.norm(g))
        self.model = sgd_step(self.model, g, self.lr(k))
        self.g_prev = g

        t_cm = [transmission_time(b, c.link.rate_mbps(k)) for b, c in zip(up_bits, self.clients)]
        t_down = [
            transmission_time(self._downlink_bits(b), c.link.rate_mbps(k)) for b, c in zip(up_bits, self.clients)
        ]
        timing = round_time(t_cp, t_cm, t_down, self.cfg.t_server, self.clock)
        self.clock = timing.cumulative
        self.last_timing = timing
        for i, b in enumerate(up_bits):
            self.cum_bits[i] += b

        tel = RoundTelemetry(
            k, tuple(t_down), tuple(t_cp), tuple(t_cm), tuple(up_bits), tuple(q_bits), tuple(levels),
            extra.get("probe_loss_prev", ()), extra.get("probe_loss", ()), extra.get("probe_loss_aux", ()),
        )
        self.history.append(tel)
        loss, acc = evaluate(self.model, self.train_x, self.train_y)
        _, test_acc = evaluate(self.model, self.test.features, self.test.labels)
        rec = MetricsRecord(
            k, timing.cumulative, loss, test_acc, float(extra.get("mean_levels", 0.0)),
            int(extra.get("aux_levels", 0)), int(extra.get("sign", 0)), norm, timing.total,
            tuple(q_bits), tuple(up_bits), tuple(t_cp), tuple(t_cm), tuple(t_down),
            tuple(b / 8 for b in self.cum_bits),
        )
        self.k += 1
        return tel, rec

    # -- AdaGQ -------------------------------------------------------------

    def _encode_levels(self, v: np.ndarray, levels: int, rng) -> tuple[Any, int, int]:
        """Returns (decodable upload, uploaded bits, quantization bits)."""
        if self.strategy.params.get("codec") == "identity":
            return v, codec.dense_size_bits(self.dim), codec.DENSE_VALUE_BITS
        q = self._through_wire(codec.qsgd_encode(v, levels, rng))
        return q, codec.encoded_size_bits(q), q.bit_width

    def _time_bits(self, levels: int) -> int:
        """Per-coordinate bits on the wire at ``levels``; drives the time model."""
        if self.strategy.params.get("codec") == "identity":
            return codec.DENSE_VALUE_BITS
        return codec.bit_width(levels) + 1

    def run_round_adagq(self) -> tuple[RoundTelemetry, MetricsRecord]:
        seed, k = self.cfg.seed, self.k
        n = len(self.clients)
        probe_prev, probe, probe_aux = [], [], []
        grads, t_cp = [], []
        for c in self.clients:
            if self.g_prev is not None:
                lr_prev = self.lr(k - 1)
                x, y = c.probe.features, c.probe.labels
                probe_prev.append(evaluate(c.model, x, y)[0])
                for levels, out, tag in (
                    (self.plan.levels[c.id], probe, "probe_q"),
                    (self.aux_plan.levels[c.id], probe_aux, "probe_q_aux"),
                ):
                    u, _, _ = self._encode_levels(self.g_prev, levels, stream(seed, tag, c.id, k))
                    w = sgd_step(c.model, decode_update(u), lr_prev)
                    out.append(evaluate(w, x, y)[0])
            self._apply_broadcast(c)
            g, tcp = self._local_update(c)
            grads.append(g)
            t_cp.append(tcp)

        extra: dict[str, Any] = {}
        sign = 0
        if self.g_prev is not None:
            prev = self.history[-1]
            timing = self.last_timing
            b = [self._time_bits(s) for s in self.plan.levels]
            b_aux = [self._time_bits(s) for s in self.aux_plan.levels]
            t_hyp = hypothetical_round_time(timing, b, b_aux)
            s_before = self.ctrl.s_k
            norm_k = float(np.linalg.norm(self.g_prev))
            inputs = {
                "round": k,
                "s_k": s_before,
                "prev_norm": self.ctrl.prev_norm,
                "norm_k": norm_k,
                "loss_prev": float(np.mean(probe_prev)),
                "loss_bar": float(np.mean(probe)),
                "loss_bar_prime": float(np.mean(probe_aux)),
                "T": timing.total,
                "T_prime": t_hyp,
            }
            step = controller_step(
                self.ctrl, inputs["loss_prev"], inputs["loss_bar"], inputs["loss_bar_prime"],
                timing.total, t_hyp, norm_k,
            )
            sign = step.sign
            cp_hist = [[h.t_cp[i] for h in self.history] for i in range(n)]
            stats = [
                estimate_time_stats(cp_hist[i], prev.t_cm[i], b[i], i) for i in range(n)
            ]
            self.plan = allocate(step.s_next, stats)
            self.aux_plan = allocate(auxiliary_levels(step.s_next), stats)
            self.telemetry.append(
                {
                    **inputs,
                    "t_cp_hist": cp_hist,
                    "t_cm_prev": list(prev.t_cm),
                    "wire_bits_prev": b,
                    "sign": step.sign,
                    "s_next": step.s_next,
                    "plan_bits": list(self.plan.bits),
                    "aux_bits": list(self.aux_plan.bits),
                }
            )
            extra.update(probe_loss_prev=tuple(probe_prev), probe_loss=tuple(probe), probe_loss_aux=tuple(probe_aux))

        uploads, up_bits, q_bits = [], [], []
        for c, g in zip(self.clients, grads):
            u, nbits, qb = self._encode_levels(g, self.plan.levels[c.id], stream(seed, "upload_q", c.id, k))
            uploads.append(u)
            up_bits.append(nbits)
            q_bits.append(qb)
        extra.update(mean_levels=self.plan.mean_levels, aux_levels=auxiliary_levels(self.ctrl.s_k), sign=sign)
        return self._finish_round(uploads, t_cp, up_bits, q_bits, list(self.plan.levels), extra)

    # -- baselines ---------------------------------------------------------

    def _baseline_levels(self) -> int:
        name, p = self.strategy.name, self.strategy.params
        if name in ("qsgd", "fedpaq"):
            return 2 ** int(p["bits"]) - 1
        if name == "norm_adaptive":
            return 2 ** int(math.floor(self.norm_bits + 0.5)) - 1
        return 0

    def run_round_baseline(self) -> tuple[RoundTelemetry, MetricsRecord]:
        name, p = self.strategy.name, self.strategy.params
        seed, k = self.cfg.seed, self.k
        levels = self._baseline_levels()
        uploads, t_cp, up_bits, q_bits = [], [], [], []
        for c in self.clients:
            self._apply_broadcast(c)
            g, tcp = self._local_update(c)
            t_cp.append(tcp)
            if name in ("fedavg",):
                uploads.append(g)
                up_bits.append(codec.dense_size_bits(self.dim))
                q_bits.append(codec.DENSE_VALUE_BITS)
            elif name == "topk":
                sg = codec.topk_encode(g, float(p["fraction"]))
                uploads.append(sg)
                up_bits.append(codec.topk_size_bits(sg))
                q_bits.append(codec.DENSE_VALUE_BITS)
            else:
                q = self._through_wire(codec.qsgd_encode(g, levels, stream(seed, "upload_q", c.id, k)))
                uploads.append(q)
                up_bits.append(codec.encoded_size_bits(q))
                q_bits.append(q.bit_width)
        extra = {"mean_levels": float(levels)}
        tel, rec = self._finish_round(uploads, t_cp, up_bits, q_bits, [levels] * len(self.clients), extra)
        if name == "norm_adaptive":
            norm = rec.grad_norm
            if self.prev_norm and norm > 0:
                self.norm_bits = min(max(norm_only_update(self.norm_bits, norm, self.prev_norm), 1.0), 15.0)
            self.prev_norm = norm if norm > 0 else self.prev_norm
        return tel, rec

    def run_round(self) -> tuple[RoundTelemetry, MetricsRecord]:
        if self.strategy.name == "adagq":
            return self.run_round_adagq()
        return self.run_round_baseline()


# --------------------------------------------------------------------------


def target_met(cfg: ExperimentConfig, rec: MetricsRecord) -> bool:
    if cfg.target_loss is None and cfg.target_accuracy is None:
        return False
    if cfg.target_loss is not None and rec.train_loss > cfg.target_loss:
        return False
    if cfg.target_accuracy is not None and rec.test_accuracy < cfg.target_accuracy:
        return False
    return True


def summarize(cfg: ExperimentConfig, records: list[MetricsRecord], reached: bool) -> dict[str, Any]:
    last = records[-1] if records else None
    cum_bytes = last.cum_uploaded_bytes if last else ()
    return {
        "schema_version": SCHEMA_VERSION,
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "status": "reached" if reached else "cap_reached",
        "rounds": len(records),
        "avg_uploaded_gb": (sum(cum_bytes) / len(cum_bytes) / 1e9) if cum_bytes else 0.0,
        "total_time_s": last.sim_time_s if last else 0.0,
        "final_train_loss": last.train_loss if last else None,
        "final_test_accuracy": last.test_accuracy if last else None,
        "norm_header_counted": True,
    }


def run_experiment(cfg: ExperimentConfig, datasets: tuple[Dataset, Dataset] | None = None) -> ExperimentResult:
    sim = Simulation(cfg, datasets)
    records: list[MetricsRecord] = []
    reached = False
    for _ in range(cfg.round_cap):
        _, rec = sim.run_round()
        records.append(rec)
        log.debug("round %d t=%.3f loss=%.4f acc=%.4f", rec.round, rec.sim_time_s, rec.train_loss, rec.test_accuracy)
        if target_met(cfg, rec):
            reached = True
            break
    return ExperimentResult(records, summarize(cfg, records, reached), sim.telemetry, sim.links, sim.compute)


def replay_decision(entry: dict[str, Any], ctrl: ControllerSpec) -> dict[str, Any]:
    """Recompute one round's controller and allocator outputs from telemetry."""
    state = ControllerState(entry["s_k"], entry["prev_norm"], ctrl.lambda_g, ctrl.s_min, ctrl.s_max)
    step = controller_step(
        state, entry["loss_prev"], entry["loss_bar"], entry["loss_bar_prime"],
        entry["T"], entry["T_prime"], entry["norm_k"],
    )
    stats = [
        estimate_time_stats(hist, t_cm, b, i)
        for i, (hist, t_cm, b) in enumerate(zip(entry["t_cp_hist"], entry["t_cm_prev"], entry["wire_bits_prev"]))
    ]
    plan = allocate(step.s_next, stats)
    aux = allocate(auxiliary_levels(step.s_next), stats)
    return {"sign": step.sign, "s_next": step.s_next, "plan_bits": list(plan.bits), "aux_bits": list(aux.bits)}
