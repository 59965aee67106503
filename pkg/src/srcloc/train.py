"""Denoiser training (Adam, linear LR decay, best-validation selection) and checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import DenoiserConfig, SourceDenoiser, TorchGraph, init_params
from .diffusion import NoiseSchedule, make_schedule, training_loss
from .evaluation import evaluate_model
from .graph import Graph, GraphOperators
from .prior import LpsiConfig, centrality_prior, compute_x_est
from .propagation import Dataset

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SRCLOC-CKPT"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class PreparedSet:
    """Stacked (x0, x_est, y) arrays for samples on one graph."""

    x0: np.ndarray
    x_est: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "PreparedSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PreparedSet(self.x0[idx], self.x_est[idx], self.y[idx], self.ids[idx])


_PRIOR_CACHE: dict = {}


def prepare(dataset: Dataset, g: Graph, ops: GraphOperators, prior: str = "lpsi", alpha: float = 0.5) -> PreparedSet:
    """Attach a structural prior to every sample; LPSI priors are cached per (graph, sample, alpha)."""
    n = g.node_count
    x0 = np.zeros((len(dataset), n))
    xe = np.zeros((len(dataset), n))
    y = np.zeros((len(dataset), n))
    cfg = LpsiConfig(alpha=alpha)
    for i, s in enumerate(dataset.samples):
        x0[i], y[i] = s.x_star, s.y
        if prior == "lpsi":
            key = (id(ops), s.id, s.y.tobytes(), alpha)
            if key not in _PRIOR_CACHE:
                _PRIOR_CACHE[key] = compute_x_est(s.y, ops, cfg).x_est
            xe[i] = _PRIOR_CACHE[key]
        elif prior == "centrality":
            xe[i] = centrality_prior(s.y, g).x_est
        else:
            raise ValueError(f"unknown prior {prior!r}")
    return PreparedSet(x0, xe, y, np.array([s.id for s in dataset.samples], dtype=np.int64))


@dataclass
class TrainConfig:
    lr: float = 0.005
    max_epochs: int = 500
    batch_size: int = 32
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    patience: int = 50
    early_stop: bool = True
    val_every: int = 1
    val_samples: int = 4
    val_seed: int = 0
    val_rule: str = "threshold"

    def __post_init__(self):
        if self.lr < 0 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("need lr >= 0, max_epochs >= 1, batch_size >= 1")
        self.betas = tuple(self.betas)


@dataclass
class TrainRun:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_f1: float = -1.0
    checkpoint: str | None = None

    def history_csv(self) -> str:
        lines = ["epoch,loss,val_f1"]
        for h in self.history:
            f1 = "" if h["val_f1"] is None else f"{h['val_f1']:.6f}"
            lines.append(f"{h['epoch']},{h['loss']:.8f},{f1}")
        return "\n".join(lines) + "\n"


def linear_decay(max_epochs: int):
    return lambda epoch: max(0.0, 1.0 - epoch / max_epochs)


def make_optimizer(model: SourceDenoiser, cfg: TrainConfig):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, linear_decay(cfg.max_epochs))
    return opt, sched


def _tensors(data: PreparedSet, dtype):
    return tuple(torch.as_tensor(a, dtype=dtype) for a in (data.x0, data.x_est, data.y))


def train(
    train_set: PreparedSet,
    val_set: PreparedSet | None,
    graph: TorchGraph,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    model: SourceDenoiser | None = None,
    denoiser_config: DenoiserConfig = DenoiserConfig(),
    init_seed: int = 0,
    checkpoint_path=None,
    meta: dict | None = None,
    resume: bool = False,
    stop_after: int | None = None,
    on_epoch=None,
) -> tuple[SourceDenoiser, TrainRun]:
    """Fit the denoiser to ``train_set`` with the x0-regression objective.

    Each epoch draws a fresh (t, noise) pair per sample. When ``val_set`` is
    given, validation F1 (``cfg.val_rule``, by default threshold 0.5) is
    computed every ``val_every`` epochs and the best-scoring parameters are returned. With
    ``checkpoint_path`` the full training state is written after every epoch;
    ``resume=True`` continues from it. ``stop_after`` ends the run after that
    many epochs without touching the schedule (used to test resumption).
    ``on_epoch(epoch, model)`` is called after each epoch's updates.
    """
    if len(train_set) == 0:
        raise TrainingError("empty training split")
    if model is None:
        model = init_params(denoiser_config, init_seed)
    dtype = model.dtype
    opt, lr_sched = make_optimizer(model, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    run = TrainRun()
    best_state = copy.deepcopy(model.state_dict())
    start_epoch, stale = 1, 0
    meta = {**model_meta(model, sched, None), **(meta or {})}

    if resume and checkpoint_path and Path(checkpoint_path).exists():
        state, saved_meta = load_checkpoint(checkpoint_path)
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        lr_sched.load_state_dict(state["lr_schedule"])
        gen.set_state(state["rng"])
        best_state = state["best"]
        t = saved_meta["train_state"]
        run.history, run.best_epoch, run.best_f1 = t["history"], t["best_epoch"], t["best_f1"]
        start_epoch, stale = t["epoch"] + 1, t["stale"]

    X0, XE, Y = _tensors(train_set, dtype)
    N = len(train_set)
    bound = model.bind(graph)
    epochs_run = 0
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        perm = torch.randperm(N, generator=gen)
        total = 0.0
        for b in range(0, N, cfg.batch_size):
            idx = perm[b:b + cfg.batch_size]
            opt.zero_grad()
            loss = training_loss(
                lambda x_t, t, xe, y: model(x_t, t, xe, y, graph), X0[idx], XE[idx], Y[idx], sched, gen
            )
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b // cfg.batch_size}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        lr_sched.step()
        if on_epoch is not None:
            on_epoch(epoch, model)

        val_f1 = None
        if val_set is not None and len(val_set) and (epoch % cfg.val_every == 0 or epoch == cfg.max_epochs):
            model.eval()
            report = evaluate_model(bound, val_set, sched, cfg.val_samples, cfg.val_rule, seed=cfg.val_seed,
                                    dtype=dtype)
            val_f1 = report.f1
            if val_f1 > run.best_f1:
                run.best_f1, run.best_epoch, stale = val_f1, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += cfg.val_every
        elif val_set is None:
            run.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

        run.history.append({"epoch": epoch, "loss": total / N, "val_f1": val_f1, "seconds": time.perf_counter() - t0})
        log.info("epoch %d loss %.5f val_f1 %s", epoch, total / N, "-" if val_f1 is None else f"{val_f1:.4f}")

        if checkpoint_path:
            _save_training_state(checkpoint_path, model, opt, lr_sched, gen, best_state, run, epoch, stale, meta)
            run.checkpoint = str(checkpoint_path)
        epochs_run += 1
        if cfg.early_stop and val_set is not None and stale >= cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, run.best_epoch)
            break
        if stop_after is not None and epochs_run >= stop_after:
            break

    model.load_state_dict(best_state)
    return model, run


def few_shot_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted indices of a seed-fixed random ``fraction`` of ``range(n)``."""
    k = int(round(fraction * n))
    if k < 1:
        raise TrainingError(f"fraction {fraction} of {n} training samples selects nothing")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    return np.sort(rng.permutation(n)[:k])


def pretrain_then_finetune(
    synthetic: tuple[PreparedSet, PreparedSet | None],
    target: tuple[PreparedSet, PreparedSet | None],
    graph: TorchGraph,
    sched: NoiseSchedule,
    pretrain_cfg: TrainConfig,
    finetune_cfg: TrainConfig,
    fraction: float = 0.1,
    subset_seed: int = 0,
    zero_shot: bool = False,
    denoiser_config: DenoiserConfig = DenoiserConfig(),
    init_seed: int = 0,
):
    """Train on synthetic cascades, then adapt on a few-shot slice of the target split.

    Returns (model, subset indices into the target train split, [runs]).
    """
    model, run1 = train(synthetic[0], synthetic[1], graph, sched, pretrain_cfg,
                        denoiser_config=denoiser_config, init_seed=init_seed)
    if zero_shot:
        return model, np.zeros(0, dtype=np.int64), [run1]
    subset = few_shot_subset(len(target[0]), fraction, subset_seed)
    model, run2 = train(target[0].subset(subset), target[1], graph, sched, finetune_cfg, model=model)
    return model, subset, [run1, run2]


# checkpoint file: magic + version line, one JSON header line, then raw little-endian tensor bytes

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.uint8: "|u1",
}


def _flatten(state, prefix=""):
    """Split a nested state into (json-able skeleton, {path: tensor})."""
    tensors = {}

    def walk(obj, path):
        if torch.is_tensor(obj):
            tensors[path] = obj.detach().cpu()
            return {"__tensor__": path}
        if isinstance(obj, dict):
            return {"__dict__": [[walk(k, f"{path}/k{i}"), walk(v, f"{path}/{i}")] for i, (k, v) in enumerate(obj.items())]}
        if isinstance(obj, (list, tuple)):
            return {"__list__": [walk(v, f"{path}/{i}") for i, v in enumerate(obj)], "tuple": isinstance(obj, tuple)}
        if isinstance(obj, float) and not math.isfinite(obj):
            return {"__float__": repr(obj)}
        return obj

    return walk(state, prefix), tensors


def _unflatten(skeleton, tensors):
    def walk(obj):
        if isinstance(obj, dict):
            if "__tensor__" in obj:
                return tensors[obj["__tensor__"]]
            if "__dict__" in obj:
                return {walk(k): walk(v) for k, v in obj["__dict__"]}
            if "__list__" in obj:
                items = [walk(v) for v in obj["__list__"]]
                return tuple(items) if obj.get("tuple") else items
            if "__float__" in obj:
                return float(obj["__float__"])
        return obj

    return walk(skeleton)


def save_checkpoint(state: dict, meta: dict, path) -> None:
    """Write ``state`` (nested dicts/lists of tensors and plain values) and ``meta``."""
    skeleton, tensors = _flatten(state)
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": CKPT_VERSION,
        "meta": meta,
        "state": skeleton,
        "tensors": index,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = CKPT_MAGIC + b" %d\n" % CKPT_VERSION + json.dumps(header, sort_keys=True).encode() + b"\n" + payload
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    first = blob.find(b"\n")
    second = blob.find(b"\n", first + 1)
    if first < 0 or second < 0 or not blob.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint or truncated header")
    try:
        version = int(blob[len(CKPT_MAGIC):first])
        header = json.loads(blob[first + 1:second])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if version != CKPT_VERSION or header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    payload = blob[second + 1:]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt payload)")
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return _unflatten(header["state"], tensors), header["meta"]


def _save_training_state(path, model, opt, lr_sched, gen, best_state, run, epoch, stale, meta):
    state = {
        "model": model.state_dict(),
        "best": best_state,
        "optimizer": opt.state_dict(),
        "lr_schedule": lr_sched.state_dict(),
        "rng": gen.get_state(),
    }
    meta = dict(meta, train_state={
        "epoch": epoch, "stale": stale, "history": run.history,
        "best_epoch": run.best_epoch, "best_f1": run.best_f1,
    })
    save_checkpoint(state, meta, path)


def model_meta(model: SourceDenoiser, sched: NoiseSchedule, alpha: float, **extra) -> dict:
    return dict(
        denoiser=model.config.to_dict(),
        schedule=sched.params(),
        alpha=alpha,
        dtype=str(model.dtype).replace("torch.", ""),
        **extra,
    )


def save_model(model: SourceDenoiser, sched: NoiseSchedule, alpha: float, path, **extra) -> None:
    save_checkpoint({"model": model.state_dict()}, model_meta(model, sched, alpha, **extra), path)


def load_model(path) -> tuple[SourceDenoiser, NoiseSchedule, dict]:
    """Rebuild the denoiser and schedule stored in a checkpoint (training or model file)."""
    state, meta = load_checkpoint(path)
    cfg = DenoiserConfig(**meta["denoiser"])
    dtype = getattr(torch, meta.get("dtype", "float32"))
    model = SourceDenoiser(cfg).to(dtype)
    model.load_state_dict(state.get("best", state["model"]))
    sched = make_schedule(**meta["schedule"])
    return model, sched, meta
