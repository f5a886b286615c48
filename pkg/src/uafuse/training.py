"""Two-stage training, Adam/SGD, stitched inference and Dice evaluation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import NetworkConfig, TrainConfig
from .data.patches import build_patch_grid, filter_and_balance, stitch
from .data.volume import Volume, normalize
from .fusion import UAFNet, compute_uncertainty
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

STREAM_WEIGHT = 0.5


class TrainingDivergedError(RuntimeError):
    pass


def loss_weights(epoch: int, stage_switch_epoch: int = 30) -> tuple[float, float, float]:
    """(modal1, modal2, final) loss weights; the fused head joins once ``epoch >= stage_switch_epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return (STREAM_WEIGHT, STREAM_WEIGHT, 0.0 if epoch < stage_switch_epoch else 1.0)


def dice(pred: np.ndarray, true: np.ndarray, c: int) -> float:
    p, t = pred == c, true == c
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def dice_per_class(pred: np.ndarray, true: np.ndarray, num_classes: int) -> list[float]:
    """Dice for each foreground class 1..num_classes-1."""
    return [dice(pred, true, c) for c in range(1, num_classes)]


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def sgd_step(params, grads, state: AdamState, lr: float) -> None:
    state.step += 1
    for name, p in params.items():
        p -= lr * grads[name]


# ---------------------------------------------------------------------------
# inference

def predict_volume(net: UAFNet, vol: Volume, patch_size=(32, 32, 32), stride=(14, 14, 14),
                   with_fusion: bool = True) -> dict[str, np.ndarray]:
    """Sliding-window inference on a normalized volume.

    Returns stitched probability maps ``final`` (if fused) and ``modal1``... plus
    uncertainty fields ``u_modal1``... computed from the stitched stream maps.
    """
    grid = build_patch_grid(vol.dims, patch_size, stride)
    x = vol.stack()
    per = {}
    with T.no_grad():
        for i in range(len(grid)):
            w = (slice(None),) + grid.window(i)
            out = net.forward(x[w], with_fusion=with_fusion, min_spatial=1)
            for j, y in enumerate(out.y_modal):
                per.setdefault(f"modal{j + 1}", []).append(y.data)
            if out.y_final is not None:
                per.setdefault("final", []).append(out.y_final.data)
    maps = {k: stitch(v, grid) for k, v in per.items()}
    for j in range(net.config.num_modalities):
        maps[f"u_modal{j + 1}"] = compute_uncertainty(maps[f"modal{j + 1}"]).values
    return maps


def evaluate(net: UAFNet, vols: list[Volume], patch_size, stride, with_fusion: bool = True) -> dict:
    """Mean per-class Dice over volumes for every head."""
    nc = net.config.num_classes
    scores: dict[str, list[list[float]]] = {}
    for vol in vols:
        maps = predict_volume(net, vol, patch_size, stride, with_fusion)
        for head in [k for k in maps if not k.startswith("u_")]:
            scores.setdefault(head, []).append(dice_per_class(maps[head].argmax(axis=0), vol.label, nc))
    out = {}
    for head, rows in scores.items():
        per_class = np.mean(rows, axis=0).tolist()
        out[head] = {"per_class": per_class, "mean": float(np.mean(per_class))}
    return out


# ---------------------------------------------------------------------------
# checkpoints

def save_network(path, net: UAFNet, opt: AdamState | None = None, meta: dict | None = None) -> None:
    tensors = {name: p.data for name, p in net.parameters().items()}
    if opt is not None:
        for name in opt.m:
            tensors[f"optim.m/{name}"] = opt.m[name]
            tensors[f"optim.v/{name}"] = opt.v[name]
    meta = dict(meta or {})
    meta["network"] = net.config.to_dict()
    if opt is not None:
        meta["optim_step"] = opt.step
    save_checkpoint(path, tensors, meta)


def load_network(path) -> tuple[UAFNet, AdamState, dict]:
    tensors, meta = load_checkpoint(path)
    net = UAFNet.init(NetworkConfig.from_dict(meta["network"]))
    params = net.parameters()
    missing = set(params) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in params.items():
        if tensors[name].shape != p.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {tensors[name].shape}, expected {p.shape}")
        p.data = tensors[name].copy()
    opt = AdamState(step=int(meta.get("optim_step", 0)))
    for key, arr in tensors.items():
        if key.startswith("optim.m/"):
            opt.m[key[8:]] = arr.copy()
        elif key.startswith("optim.v/"):
            opt.v[key[8:]] = arr.copy()
    return net, opt, meta


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainState:
    net: UAFNet
    optim: AdamState
    epoch: int = 0
    stage: int = 1
    seed: int = 0
    best_dice: float = -1.0
    best_epoch: int = -1
    best_params: dict[str, np.ndarray] | None = None


def _write_jsonl(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def _step_losses(net: UAFNet, batch, weights) -> tuple[Tensor, dict[str, float]]:
    """Forward a batch of (modalities, label) patches on the active tape; returns the total loss."""
    w1, w2, wf = weights
    fused = wf > 0
    heads = {"modal1": [], "modal2": [], "final": []}
    for x, lab in batch:
        out = net.forward(x, with_fusion=fused)
        heads["modal1"].append(T.cross_entropy(out.y_modal[0], lab))
        heads["modal2"].append(T.cross_entropy(out.y_modal[1], lab))
        if fused:
            heads["final"].append(T.cross_entropy(out.y_final, lab))

    def batch_mean(ls):
        acc = ls[0]
        for item in ls[1:]:
            acc = T.add(acc, item)
        return T.scale(acc, 1.0 / len(ls))

    l1, l2 = batch_mean(heads["modal1"]), batch_mean(heads["modal2"])
    total = T.add(T.scale(l1, w1), T.scale(l2, w2))
    logged = {"modal1": l1.item(), "modal2": l2.item(), "final": 0.0}
    if fused:
        lf = batch_mean(heads["final"])
        total = T.add(total, T.scale(lf, wf))
        logged["final"] = lf.item()
    logged["total"] = total.item()
    return total, logged


def train(config: TrainConfig, train_vols: list[Volume], val_vols: list[Volume] | None = None,
          out_dir=None, normalized: bool = False, on_epoch=None) -> tuple[TrainState, list[dict]]:
    """Run the two-stage schedule; returns the final state and one metrics record per epoch.

    Validation (stitched full-volume Dice of the fused head) runs every ``val_every``
    epochs and at the last epoch; the best-scoring parameters are kept and, with
    ``out_dir``, written to ``best.uaf``. With no validation volumes the training
    volumes are scored instead.
    """
    if not normalized:
        train_vols = [normalize(v) for v in train_vols]
        val_vols = [normalize(v) for v in val_vols or []]
    val_vols = val_vols or train_vols
    cfg = config.network
    if cfg.num_modalities != 2:
        raise ValueError("training expects exactly two modality streams")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("")

    rng = np.random.default_rng(config.seed)
    net = UAFNet.init(cfg, seed=config.seed)
    state = TrainState(net=net, optim=AdamState(), seed=config.seed)
    grids = [build_patch_grid(v.dims, config.patch_size, config.stride) for v in train_vols]
    sampler = filter_and_balance(grids, [v.label for v in train_vols], config.sampling, cfg.num_classes)
    stacks = [v.stack() for v in train_vols]
    params = net.parameters()
    step_fn = adam_step if config.optimizer == "adam" else sgd_step
    val_stride = config.val_stride or config.stride
    history = []
    steps_per_epoch = config.patches_per_epoch // config.batch_size
    total_steps = steps_per_epoch * config.total_epochs

    for epoch in range(config.total_epochs):
        t0 = time.time()
        weights = loss_weights(epoch, config.stage_switch_epoch)
        state.epoch, state.stage = epoch, 1 if weights[2] == 0 else 2
        draws = sampler.draw(rng, config.patches_per_epoch)
        steps = []
        for b in range(0, len(draws) - config.batch_size + 1, config.batch_size):
            batch = []
            for vi, pi in draws[b:b + config.batch_size]:
                w = grids[vi].window(pi)
                batch.append((stacks[vi][(slice(None),) + w], train_vols[vi].label[w]))
            net.zero_grad()
            with Tape() as tape:
                total, logged = _step_losses(net, batch, weights)
                if not np.isfinite(logged["total"]):
                    dump = {"epoch": epoch, "batch_index": b // config.batch_size, "seed": config.seed,
                            "patches": [[vi, list(grids[vi].starts[pi])] for vi, pi in draws[b:b + config.batch_size]],
                            "losses": {k: repr(v) for k, v in logged.items()}}
                    if out_dir is not None:
                        (out_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2))
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {dump['batch_index']}, seed {config.seed}")
                tape.backward(total)
            grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
            lr = config.lr_at(state.optim.step, total_steps)
            step_fn({n: p.data for n, p in params.items()}, grads, state.optim, lr)
            steps.append(logged)

        record = {
            "epoch": epoch,
            "stage": state.stage,
            "weights": list(weights),
            "losses": {k: float(np.mean([s[k] for s in steps])) for k in ("modal1", "modal2", "final", "total")},
            "steps": steps,
            "dice": None,
            "mean_dice": None,
        }
        last = epoch == config.total_epochs - 1
        if last or (config.val_every > 0 and (epoch + 1) % config.val_every == 0):
            scores = evaluate(net, val_vols, config.patch_size, val_stride)
            record["dice"] = scores["final"]["per_class"]
            record["mean_dice"] = scores["final"]["mean"]
            record["stream_dice"] = {k: v["mean"] for k, v in scores.items() if k != "final"}
            if scores["final"]["mean"] > state.best_dice:
                state.best_dice = scores["final"]["mean"]
                state.best_epoch = epoch
                state.best_params = {n: p.data.copy() for n, p in params.items()}
                if out_dir is not None:
                    save_network(out_dir / "best.uaf", net, state.optim,
                                 {"epoch": epoch, "mean_dice": state.best_dice, "seed": config.seed})
        record["seconds"] = round(time.time() - t0, 3)
        history.append(record)
        if out_dir is not None:
            _write_jsonl(metrics_path, record)
        log.info("epoch %d stage %d loss %.4f dice %s", epoch, state.stage, record["losses"]["total"], record["mean_dice"])
        if on_epoch is not None:
            on_epoch(record)

    if out_dir is not None:
        save_network(out_dir / "last.uaf", net, state.optim, {"epoch": config.total_epochs - 1, "seed": config.seed})
    return state, history
