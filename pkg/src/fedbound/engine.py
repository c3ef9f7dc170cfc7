"""Federated round loop with synthetic-data ensemble-distillation fusion.

One round: sample clients, train locally, optionally filter/clip the updates,
FedAvg per prototype, distill from the cross-prototype ensemble on the
synthetic data, apply the post-fusion defense, evaluate, and hand the new
parameters (never the bounds) back to the clients.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines
from .baselines import UpdateVector
from .config import ExperimentConfig
from .data import (
    ConfigError,
    LabeledDataset,
    PoisonSpec,
    SyntheticDataset,
    generate_dataset,
    generate_synthetic,
    make_asr_testset,
    partition,
    poison_dataset,
)
from .defense import BoundOptReport, LambdaController, init_bounds, optimize_bounds, predict
from .model import (
    BoundSet,
    MlpModel,
    backward_logits,
    backward_params,
    flatten_params,
    forward,
    forward_bounded,
    init_model,
    save_checkpoint,
    sgd_step,
    unflatten_params,
)
from .tensor import cross_entropy, kl_divergence, log_softmax, make_rng, softmax

log = logging.getLogger(__name__)


@dataclass
class ClientState:
    client_id: int
    prototype_id: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    train: LabeledDataset
    test: LabeledDataset
    compromised: bool = False


@dataclass
class ServerState:
    models: dict[int, MlpModel]
    syn: SyntheticDataset
    defense: str = "none"
    bounds: dict[int, BoundSet] = field(default_factory=dict)
    controllers: dict[int, LambdaController] = field(default_factory=dict)
    # bounds actually applied at inference (None: run unbounded)
    deployed: dict[int, BoundSet | None] = field(default_factory=dict)
    round: int = 0
    # parameters handed to clients at the end of the last round
    distributed: dict[int, MlpModel] = field(default_factory=dict)


@dataclass
class Scenario:
    server: ServerState
    clients: list[ClientState]
    asr_test: LabeledDataset | None
    poison: PoisonSpec | None
    syn_poisoned_idx: np.ndarray


def poison_spec(cfg: ExperimentConfig, ratio: float) -> PoisonSpec:
    a = cfg.attack
    return PoisonSpec(
        trigger=a.trigger,
        target_class=a.target_class,
        ratio=ratio,
        patch=a.patch,
        blend_alpha=a.blend_alpha,
        blend_seed=a.blend_seed,
        sig_amplitude=a.sig_amplitude,
        sig_frequency=a.sig_frequency,
    )


def _client_test_indices(train_labels, test_pool_labels, size, n_classes, rng):
    """Test indices whose class mix follows the client's training labels."""
    counts = np.bincount(train_labels, minlength=n_classes).astype(np.float64)
    quota = counts / counts.sum() * size
    base = np.floor(quota).astype(int)
    rem = size - base.sum()
    # largest remainder, lowest class first on ties
    order = sorted(range(n_classes), key=lambda c: (-(quota[c] - base[c]), c))
    for c in order[:rem]:
        base[c] += 1
    picks = []
    for c in range(n_classes):
        if base[c] == 0:
            continue
        pool = np.flatnonzero(test_pool_labels == c)
        picks.append(rng.choice(pool, size=min(base[c], len(pool)), replace=False))
    return np.sort(np.concatenate(picks)) if picks else np.zeros(0, dtype=np.int64)


def local_train(
    model: MlpModel,
    data: LabeledDataset,
    epochs: int,
    lr: float,
    batch: int,
    rng: np.random.Generator,
) -> MlpModel:
    """Minibatch SGD on cross-entropy, reshuffling every epoch."""
    n = len(data)
    if n == 0:
        raise ConfigError("client has no training data")
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch):
            idx = perm[start : start + batch]
            _, grads = backward_params(model, data.images[idx], data.labels[idx])
            model = sgd_step(model, grads, lr)
    return model


def pretrain(model, data, epochs, lr, batch, rng) -> MlpModel:
    """Server-side supervised warm start of a prototype on the synthetic data."""
    return local_train(model, data, epochs, lr, batch, rng)


def fedavg(models: list[MlpModel], weights: list[float]) -> MlpModel:
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    vec = sum(wi * flatten_params(m) for wi, m in zip(w, models))
    return unflatten_params(vec, models[0])


def _kl_grad(teacher: np.ndarray):
    def fn(logits):
        q = softmax(logits)
        loss = kl_divergence(teacher, q)
        return loss, (q - teacher) / len(logits)

    return fn


def distill(
    student: MlpModel,
    teacher_probs: np.ndarray,
    syn: LabeledDataset,
    iters: int,
    lr: float,
    batch: int,
    rng: np.random.Generator,
) -> tuple[MlpModel, list[float]]:
    """``iters`` SGD steps on KL(teacher || student) over synthetic minibatches."""
    losses = []
    n = len(syn)
    perm = rng.permutation(n)
    pos = 0
    for _ in range(iters):
        if pos + batch > n:
            perm = rng.permutation(n)
            pos = 0
        idx = perm[pos : pos + batch]
        pos += batch
        loss, grads = backward_logits(student, syn.images[idx], _kl_grad(teacher_probs[idx]))
        losses.append(loss)
        student = sgd_step(student, grads, lr)
    return student, losses


def ensemble_teacher(models: list[MlpModel], x: np.ndarray) -> np.ndarray:
    """Softmax of the mean logits of every participant (all prototypes)."""
    logits = np.mean(np.stack([forward(m, x) for m in models]), axis=0)
    return softmax(logits)


def setup(cfg: ExperimentConfig) -> Scenario:
    d, fl, a = cfg.data, cfg.fl, cfg.attack
    seed = cfg.seed
    train = generate_dataset(d.n_classes, d.per_class, d.grid, make_rng(seed, "train-data"), d.noise)
    test_pool = generate_dataset(d.n_classes, d.test_per_class, d.grid, make_rng(seed, "test-data"), d.noise)
    syn = generate_synthetic(
        d.n_classes, d.syn_per_class, d.grid, make_rng(seed, "syn-data"), d.syn_brightness, d.syn_noise
    )
    poison = None
    syn_poisoned = np.zeros(0, dtype=np.int64)
    if a.kind == "novel":
        poison = poison_spec(cfg, a.ratio)
        syn, syn_poisoned = poison_dataset(syn, poison, make_rng(seed, "syn-poison"))
    elif a.kind == "classic":
        poison = poison_spec(cfg, a.client_ratio)
    if poison is not None:
        poison.validate(d.n_classes)

    part = partition(train.labels, fl.n_clients, make_rng(seed, "partition"), cfg.partition.mode, cfg.partition.beta)
    compromised: set[int] = set()
    if a.kind == "classic" and a.n_compromised:
        pick = make_rng(seed, "compromised").choice(fl.n_clients, size=a.n_compromised, replace=False)
        compromised = {int(i) for i in pick}
    n_proto = len(cfg.model.prototypes)
    clients = []
    for cid in range(fl.n_clients):
        idx = part.assignment[cid]
        local = train.subset(idx)
        if cid in compromised:
            local, _ = poison_dataset(local, poison, make_rng(seed, "client-poison", cid))
        size = max(1, int(round(d.client_test_fraction * len(idx))))
        test_idx = _client_test_indices(
            train.labels[idx], test_pool.labels, size, d.n_classes, make_rng(seed, "client-test", cid)
        )
        clients.append(
            ClientState(cid, cid % n_proto, idx, test_idx, local, test_pool.subset(test_idx), cid in compromised)
        )

    models = {}
    for pid, widths in enumerate(cfg.model.prototypes):
        dims = [d.grid * d.grid] + list(widths) + [d.n_classes]
        model = init_model(dims, make_rng(seed, "init", pid), pid)
        if fl.pretrain_epochs:
            model = pretrain(model, syn, fl.pretrain_epochs, fl.lr_pretrain, fl.pretrain_batch, make_rng(seed, "pretrain", pid))
        models[pid] = model
    server = ServerState(models=models, syn=syn, defense=cfg.defense.kind)
    server.distributed = {pid: m.copy() for pid, m in models.items()}
    if cfg.defense.kind == "bounds":
        df = cfg.defense
        for pid, model in models.items():
            server.bounds[pid] = init_bounds(
                model, df.bound_init, df.bound_init_value, df.bound_margin, syn, cfg.model.bounded_layers
            )
            server.controllers[pid] = LambdaController(df.lambda0, df.alpha, df.delta_pi)
            server.deployed[pid] = server.bounds[pid].copy()
    asr_test = make_asr_testset(test_pool, poison) if poison is not None else None
    return Scenario(server, clients, asr_test, poison, syn_poisoned)


def sample_clients(n_clients: int, mode: str, rho: float, rng: np.random.Generator) -> list[int]:
    if mode == "cross_silo":
        return list(range(n_clients))
    if mode != "cross_device":
        raise ConfigError(f"unknown FL mode {mode!r}")
    k = min(n_clients, max(1, math.ceil(rho * n_clients - 1e-9)))
    return sorted(int(i) for i in rng.choice(n_clients, size=k, replace=False))


def _aggregate(cfg, server, pid, global_model, trained, clients_by_id, round_rng):
    """FedAvg start point for one prototype, after any update-space defense."""
    kind = cfg.defense.kind
    ids = sorted(trained)
    models = [trained[i] for i in ids]
    sizes = [len(clients_by_id[i].train) for i in ids]
    if kind not in ("normthr", "dp", "krum"):
        return fedavg(models, sizes), {}
    base = flatten_params(global_model)
    updates = [UpdateVector(i, flatten_params(trained[i]) - base, weight=s) for i, s in zip(ids, sizes)]
    if kind == "normthr":
        clipped = baselines.norm_threshold(updates, cfg.defense.norm_m)
        w = np.array(sizes, dtype=np.float64) / sum(sizes)
        delta = sum(wi * u.delta for wi, u in zip(w, clipped))
        stats = {"clipped": sum(u.norm > cfg.defense.norm_m for u in updates)}
    elif kind == "dp":
        delta = baselines.dp_aggregate(updates, cfg.defense.norm_m, cfg.defense.dp_sigma, round_rng)
        stats = {"clipped": sum(u.norm > cfg.defense.norm_m for u in updates)}
    else:
        chosen = baselines.krum_select(updates, cfg.defense.krum_f)
        delta = next(u.delta for u in updates if u.client_id == chosen)
        stats = {"selected": chosen}
    stats["update_norms"] = [u.norm for u in updates]
    return unflatten_params(base + delta, global_model), stats


def run_round(server: ServerState, clients: list[ClientState], cfg: ExperimentConfig, asr_test=None, pool=None) -> dict:
    """Execute one federated round in place and return its report."""
    t0 = time.perf_counter()
    fl, seed = cfg.fl, cfg.seed
    t = server.round + 1
    clients_by_id = {c.client_id: c for c in clients}
    participants = sample_clients(len(clients), fl.mode, fl.rho, make_rng(seed, "sample", t))

    def train_one(cid):
        c = clients_by_id[cid]
        start = server.models[c.prototype_id].copy()
        rng = make_rng(seed, "local", t, cid)
        return cid, local_train(start, c.train, fl.local_epochs, fl.lr_local, fl.batch, rng)

    if pool is not None:
        results = list(pool.map(train_one, participants))
    else:
        results = [train_one(cid) for cid in participants]
    trained = dict(sorted(results))

    teacher = ensemble_teacher([trained[i] for i in sorted(trained)], server.syn.images)
    distill_loss, defense_report = {}, {}
    for pid in sorted(server.models):
        group = {i: m for i, m in trained.items() if clients_by_id[i].prototype_id == pid}
        if not group:
            log.warning("round %d: no participants for prototype %d, keeping previous model", t, pid)
            continue
        student, stats = _aggregate(cfg, server, pid, server.models[pid], group, clients_by_id, make_rng(seed, "dp", t, pid))
        student, losses = distill(
            student, teacher, server.syn, fl.distill_iters, fl.lr_distill, fl.distill_batch, make_rng(seed, "distill", t, pid)
        )
        distill_loss[str(pid)] = losses
        if cfg.defense.kind == "pruning":
            student = baselines.activation_prune(student, server.syn, cfg.defense.prune_p, cfg.model.bounded_layers)
            stats = {"pruned_fraction": cfg.defense.prune_p}
        server.models[pid] = student
        if cfg.defense.kind == "bounds":
            df = cfg.defense
            iterate, rep = optimize_bounds(
                student, server.bounds[pid], server.syn, server.controllers[pid], df.bound_iters, df.lr_bounds
            )
            server.deployed[pid] = rep.best
            if df.warm_start == "best" and rep.best is not None:
                iterate = rep.best.copy()
            server.bounds[pid] = iterate
            stats = rep.to_dict()
        if stats:
            defense_report[str(pid)] = stats

    # only parameters leave the server; bounds stay behind
    server.distributed = {pid: m.copy() for pid, m in server.models.items()}
    server.round = t
    report = {"round": t, "participants": participants}
    report.update(evaluate(server, clients, asr_test, cfg.attack.target_class))
    report["distill_loss"] = distill_loss
    report["defense"] = defense_report
    report["wall_clock_s"] = time.perf_counter() - t0
    return report


def _accuracy(model, bounds, data) -> float:
    logits = forward(model, data.images) if bounds is None else forward_bounded(model, bounds, data.images)[0]
    return float(np.mean(predict(logits) == data.labels))


def _asr(model, bounds, data, target) -> float:
    if len(data) == 0:
        return 0.0
    logits = forward(model, data.images) if bounds is None else forward_bounded(model, bounds, data.images)[0]
    return float(np.mean(predict(logits) == target))


def evaluate(server: ServerState, clients: list[ClientState], asr_test, target_class: int = 0) -> dict:
    """ACC over client test splits and ASR on the triggered test set.

    With the bound defense both bounded (headline) and unbounded numbers are
    reported; otherwise the two coincide.
    """
    out = {}
    for variant in ("bounded", "unbounded"):
        use_bounds = variant == "bounded" and server.defense == "bounds"
        accs = {}
        for c in clients:
            if len(c.test) == 0:
                log.warning("client %d has an empty test split; excluded from ACC", c.client_id)
                continue
            b = server.deployed.get(c.prototype_id) if use_bounds else None
            accs[c.client_id] = _accuracy(server.models[c.prototype_id], b, c.test)
        acc = float(np.mean([accs[k] for k in sorted(accs)])) if accs else 0.0
        asr = None
        if asr_test is not None:
            per_proto = {}
            for pid in sorted(server.models):
                b = server.deployed.get(pid) if use_bounds else None
                per_proto[pid] = _asr(server.models[pid], b, asr_test, target_class)
            asr = float(np.mean([per_proto[c.prototype_id] for c in clients]))
        suffix = "" if variant == "bounded" else "_unbounded"
        out["acc" + suffix] = acc
        out["asr" + suffix] = asr
        if variant == "bounded":
            out["client_acc"] = [accs[k] for k in sorted(accs)]
    return out


@dataclass
class RunResult:
    summary: dict
    reports: list[dict]
    scenario: Scenario


def run_experiment(cfg: ExperimentConfig, out_dir=None, parallel: int = 1, on_round=None) -> RunResult:
    """Run all rounds; optionally write ``rounds.jsonl``, ``summary.json`` and checkpoints.

    On a failure mid-run, the reports written so far are kept and the
    exception is re-raised.
    """
    t0 = time.perf_counter()
    scenario = setup(cfg)
    server, clients = scenario.server, scenario.clients
    out = Path(out_dir) if out_dir is not None else None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
        fh = (out / "rounds.jsonl").open("w")
    reports = []
    pool = ThreadPoolExecutor(max_workers=parallel) if parallel > 1 else None
    try:
        for _ in range(cfg.fl.rounds):
            report = run_round(server, clients, cfg, scenario.asr_test, pool)
            reports.append(report)
            log.info("round %d: acc %.4f asr %s", report["round"], report["acc"], report["asr"])
            if fh is not None:
                fh.write(json.dumps(report) + "\n")
                fh.flush()
            if on_round is not None:
                on_round(report)
    finally:
        if pool is not None:
            pool.shutdown()
        if fh is not None:
            fh.close()
    final = reports[-1] if reports else evaluate(server, clients, scenario.asr_test, cfg.attack.target_class)
    summary = {
        "config_hash": cfg.config_hash(),
        "rounds": len(reports),
        "final_acc": final["acc"],
        "final_asr": final["asr"],
        "final_acc_unbounded": final["acc_unbounded"],
        "final_asr_unbounded": final["asr_unbounded"],
        "attack": cfg.attack.kind,
        "defense": cfg.defense.kind,
        "wall_clock_s": time.perf_counter() - t0,
    }
    if out is not None:
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        for pid, model in server.models.items():
            save_checkpoint(out / f"model_p{pid}.json", model, server.deployed.get(pid))
    return RunResult(summary, reports, scenario)
