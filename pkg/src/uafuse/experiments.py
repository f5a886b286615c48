"""Desk-scale empirical runs: single-phantom overfit and the corrupted-modality fusion benefit.

Both return plain dicts so the acceptance tests and ``scripts/`` can share them.
"""
from __future__ import annotations

import logging
import time

import numpy as np

from .config import NetworkConfig, TrainConfig
from .data.phantom import Corruption, PhantomSpec, generate_phantom
from .data.volume import normalize
from .training import evaluate, train

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# overfit

# Peak lr 1e-2 with cosine decay: a constant 3e-3 left the extreme-intensity classes
# merged with their neighbours after 60 epochs (their relu thresholds sit far from zero).
# Training always validates after its last epoch; on the full stride-14 grid that pass
# is the reported score, so no separate scoring run is needed.
OVERFIT_TRAIN = dict(total_epochs=60, stage_switch_epoch=30, patches_per_epoch=6, learning_rate=1e-2,
                     lr_schedule="cosine", val_every=0, stride=(14, 14, 14))


def run_overfit(seed: int, **overrides) -> dict:
    """Train the default network on one default 64^3 phantom and score it on that same volume.

    Returns the stitched per-class Dice of the fused head after the last epoch and
    the wall-clock seconds for training plus scoring.
    """
    t0 = time.time()
    vol = normalize(generate_phantom(PhantomSpec(), seed))
    cfg = TrainConfig(seed=seed, **{**OVERFIT_TRAIN, **overrides})
    _, history = train(cfg, [vol], normalized=True)
    last = history[-1]
    return {
        "seed": seed,
        "dice": last["dice"],
        "mean_dice": last["mean_dice"],
        "stream_dice": last["stream_dice"],
        "seconds": round(time.time() - t0, 1),
        "loss_curve": [round(r["losses"]["total"], 4) for r in history],
    }


# ---------------------------------------------------------------------------
# fusion benefit on a corrupted-modality dataset

def complementary_contrast(std: float = 0.25):
    """Each modality alone confuses one pair of foreground classes, a different pair per modality."""
    m1 = [0.0, 1.5, 1.5, 3.0, 4.5]  # classes 1 and 2 look alike
    m2 = [4.5, 3.0, 1.5, 0.0, 0.0]  # classes 3 and 4 look alike
    return [[(m, std) for m in m1], [(m, std) for m in m2]]


def fusion_spec(dims=(40, 40, 40)) -> PhantomSpec:
    d = np.asarray(dims)
    lo, hi = d // 4, d // 4 + d // 2
    region = tuple((int(a), int(b)) for a, b in zip(lo, hi))
    return PhantomSpec(dims=tuple(int(v) for v in d), contrast=complementary_contrast(),
                       corruption=Corruption(modality=1, region=region, mode="swap-contrast"))


FUSION_NET = dict(width=8, aspp_branch_width=4, se_reduction=2, adapt_width=8)
# Batches of two patches: with single patches the gated/ungated gap on one seed was
# dominated by training noise rather than by the gate.
FUSION_TRAIN = dict(total_epochs=60, stage_switch_epoch=30, patches_per_epoch=8, batch_size=2,
                    learning_rate=1e-2, lr_schedule="cosine", val_every=10)


def fusion_dataset(count: int = 10, data_seed: int = 100, dims=(40, 40, 40)):
    spec = fusion_spec(dims)
    children = np.random.SeedSequence(data_seed).spawn(count)
    return [normalize(generate_phantom(spec, int(c.generate_state(1)[0]))) for c in children]


def run_fusion_benefit(seeds=(0, 1, 2), count: int = 10, split=(6, 1, 3), data_seed: int = 100,
                       dims=(40, 40, 40), net_overrides=None, train_overrides=None) -> dict:
    """Gated vs ungated fusion on a dataset whose modality 2 is swap-contrast corrupted in a box.

    Single-modality numbers are the stream heads of the gated model. Reports per-seed
    mean foreground test Dice for all four and their medians over seeds.
    """
    vols = fusion_dataset(count, data_seed, dims)
    n_train, n_val, n_test = split
    if n_train + n_val + n_test != count:
        raise ValueError(f"split {split} does not add up to {count} volumes")
    train_vols, val_vols, test_vols = vols[:n_train], vols[n_train:n_train + n_val], vols[n_train + n_val:]
    rows = []
    t0 = time.time()
    for seed in seeds:
        row = {"seed": seed}
        for gating in (True, False):
            net_cfg = NetworkConfig(num_classes=5, gating=gating, **{**FUSION_NET, **(net_overrides or {})})
            cfg = TrainConfig(seed=seed, network=net_cfg, **{**FUSION_TRAIN, **(train_overrides or {})})
            state, _ = train(cfg, train_vols, val_vols, normalized=True)
            # score the best-validation parameters
            params = state.net.parameters()
            for name, arr in (state.best_params or {}).items():
                params[name].data = arr
            scores = evaluate(state.net, test_vols, cfg.patch_size, cfg.stride)
            key = "fused_gated" if gating else "fused_ungated"
            row[key] = scores["final"]["mean"]
            if gating:
                row["modal1"] = scores["modal1"]["mean"]
                row["modal2"] = scores["modal2"]["mean"]
            log.info("seed %d gating=%s (best epoch %d): %s", seed, gating, state.best_epoch,
                     {k: (round(v["mean"], 4), [round(d, 3) for d in v["per_class"]]) for k, v in scores.items()})
        rows.append(row)
    keys = ("fused_gated", "fused_ungated", "modal1", "modal2")
    median = {k: float(np.median([r[k] for r in rows])) for k in keys}
    return {"runs": rows, "median": median, "seconds": round(time.time() - t0, 1)}


def fusion_criterion(median: dict, margin: float = 0.02) -> tuple[bool, str]:
    g = median["fused_gated"]
    ok = g >= median["modal1"] and g >= median["modal2"] and g >= median["fused_ungated"] - margin
    detail = (f"gated {g:.4f}, ungated {median['fused_ungated']:.4f}, "
              f"modal1 {median['modal1']:.4f}, modal2 {median['modal2']:.4f}")
    return ok, detail
