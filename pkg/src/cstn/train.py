"""L1 training with Adam on phantom data, and the evaluation harness.

All training hyperparameters below are repo choices (not from paper).
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics as M
from . import tensor as T
from .model import (CSTNConfig, bicubic_baseline, enhance, forward, init_weights, load_checkpoint,
                    preprocess, save_checkpoint)
from .mri import MultiEchoVolume, generate_phantom, load_volume, simulate_lowres
from .smwi import SMWIParams, reconstruct_smwi
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

PROTOCOLS = (192, 256)


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    # every default here is a repo choice (not from paper)
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    total_steps: int = 5000
    lambda_mag: float = 1.0
    lambda_phase: float = 1.0
    seed: int = 0
    checkpoint_every: int = 500
    lr_milestones: tuple = (0.5, 0.75)
    patch_size: int = 96
    num_train: int = 64
    num_val: int = 10
    hr_size: int = 384
    lr_size: int = 256
    echo_times: tuple = (14.0, 27.0, 40.0)

    def __post_init__(self):
        self.lr_milestones = _floats(self.lr_milestones)
        self.echo_times = _floats(self.echo_times)
        for f in ("learning_rate", "eps", "batch_size", "patch_size", "num_train", "hr_size", "lr_size"):
            if not getattr(self, f) > 0:
                raise ValueError(f"train.{f} must be positive")
        if self.total_steps < 0 or self.checkpoint_every < 1:
            raise ValueError("train.total_steps must be >= 0 and train.checkpoint_every >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``: halved at each milestone fraction."""
        lr = self.learning_rate
        for frac in self.lr_milestones:
            if step >= int(frac * self.total_steps):
                lr *= 0.5
        return lr

    def to_items(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            text = ",".join(repr(x) for x in v) if isinstance(v, tuple) else repr(v)
            out.append((f"train.{f.name}", text))
        return out

    @classmethod
    def from_items(cls, items: dict) -> "TrainConfig":
        kw = {}
        for f in fields(cls):
            key = f"train.{f.name}"
            if key not in items:
                continue
            raw = items[key]
            default = f.default
            if isinstance(default, tuple):
                kw[f.name] = _floats(raw)
            elif isinstance(default, int):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = float(raw)
        return cls(**kw)


def _floats(v) -> tuple:
    if isinstance(v, str):
        v = [p for p in v.split(",") if p.strip()]
    return tuple(float(x) for x in v)


@dataclass
class EvalConfig:
    protocol: int = 256
    scans: list = field(default_factory=list)
    smwi: SMWIParams = field(default_factory=SMWIParams)
    metrics: tuple = ("mse", "mae", "ssim")

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol}")


# ---------------------------------------------------------------- loss / optimizer

def encode_target(volume: MultiEchoVolume) -> tuple:
    """Ground truth as ([1,E,H,W] magnitude, [1,2E,H,W] cos/sin pairs) float32 arrays."""
    mag = volume.magnitude_stack()[None]
    ph = volume.phase_stack().astype(np.float64)
    cs = np.stack([np.cos(ph), np.sin(ph)], axis=1).reshape(1, -1, *volume.shape)
    return mag.astype(np.float32), cs.astype(np.float32)


def loss(pred_mag: Tensor, pred_cs: Tensor, gt, lambda_mag: float = 1.0, lambda_phase: float = 1.0) -> Tensor:
    """lambda_mag * L1(magnitude) + lambda_phase * L1(cos/sin phase encoding).

    The phase term averages only over pixels where the ground-truth magnitude
    is nonzero: the phase of an empty pixel is undefined, and outside the
    head it would otherwise dominate the loss with noise.
    """
    gt_mag, gt_cs = encode_target(gt) if isinstance(gt, MultiEchoVolume) else gt
    if pred_mag.shape != np.shape(gt_mag) or pred_cs.shape != np.shape(gt_cs):
        raise ShapeError(f"prediction {pred_mag.shape}/{pred_cs.shape} vs target "
                         f"{np.shape(gt_mag)}/{np.shape(gt_cs)}")
    total = T.tmean(T.tabs(pred_mag - gt_mag)) * lambda_mag
    if lambda_phase:
        support = np.repeat(np.asarray(gt_mag) > 0, 2, axis=1)
        count = int(support.sum())
        if count:
            weight = support.astype(pred_cs.dtype) / count
            total = total + T.tsum(T.tabs(pred_cs - gt_cs) * weight) * lambda_phase
    return total


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(weights: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, in place on the weight arrays."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, w in weights.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(w.data)
            state.v[name] = np.zeros_like(w.data)
        m, v = state.m[name], state.v[name]
        if m.shape != w.shape:
            raise ShapeError(f"Adam state for {name} has shape {m.shape}, weight {w.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        w.data -= update.astype(w.data.dtype)


# ---------------------------------------------------------------- data

def phantom_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


def make_pairs(seeds, hr_size: int, lr_size: int, echo_times, target_size=None):
    """(inputs, targets): inputs [n, 3E, H, W] = mag + cos/sin; targets alike from ground truth."""
    target_size = target_size or (hr_size, hr_size)
    xs, ys = [], []
    for s in seeds:
        hr, _ = generate_phantom(s, hr_size, hr_size, echo_times)
        lr = simulate_lowres(hr, lr_size, lr_size)
        mag_in, phase_in = preprocess(lr, target_size)
        xs.append(np.concatenate([mag_in.data[0], phase_in.data[0]]))
        gm, gc = encode_target(hr)
        ys.append(np.concatenate([gm[0], gc[0]]))
    return np.stack(xs), np.stack(ys)


def sample_crops(rng, targets: np.ndarray, n: int, patch: int, echoes: int, min_fg: float = 0.25):
    """``n`` (image, row, col) crops, preferring crops with foreground tissue."""
    count, _, h, w = targets.shape
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} larger than image {h}x{w}")
    out = []
    for _ in range(n):
        for _attempt in range(20):
            i = int(rng.integers(count))
            r = int(rng.integers(h - patch + 1))
            c = int(rng.integers(w - patch + 1))
            fg = (targets[i, :echoes, r:r + patch, c:c + patch].max(axis=0) > 0.05).mean()
            if fg >= min_fg:
                break
        out.append((i, r, c))
    return out


def gather(arr: np.ndarray, crops, patch: int) -> np.ndarray:
    return np.stack([arr[i, :, r:r + patch, c:c + patch] for i, r, c in crops])


def _split(batch: np.ndarray, echoes: int):
    return Tensor(batch[:, :echoes]), Tensor(batch[:, echoes:])


def batch_loss(x: np.ndarray, y: np.ndarray, model_cfg: CSTNConfig, weights: dict,
               lambda_mag=1.0, lambda_phase=1.0) -> Tensor:
    e = model_cfg.in_echoes
    mag_in, phase_in = _split(x, e)
    pm, pc = forward(mag_in, phase_in, model_cfg, weights)
    return loss(pm, pc, (y[:, :e], y[:, e:]), lambda_mag, lambda_phase)


def validation_loss(x, y, model_cfg, weights, cfg: TrainConfig, chunk: int = 4) -> float:
    total = 0.0
    with T.no_grad():
        for s in range(0, len(x), chunk):
            part = batch_loss(x[s:s + chunk], y[s:s + chunk], model_cfg, weights,
                              cfg.lambda_mag, cfg.lambda_phase)
            total += part.item() * len(x[s:s + chunk])
    return total / len(x)


@dataclass
class TrainResult:
    weights: dict
    losses: list
    val_losses: list
    best_weights: dict
    best_val: float
    run_dir: Path | None = None


def fit(x: np.ndarray, y: np.ndarray, model_cfg: CSTNConfig, cfg: TrainConfig, weights: dict | None = None,
        crops=None, val=None, log_path=None, on_checkpoint=None) -> TrainResult:
    """Core loop over preprocessed arrays ``x``/``y`` of shape [n, 3E, H, W].

    With ``crops=None`` every step uses the whole of ``x`` as the batch
    (overfit mode); otherwise ``crops(rng)`` returns crop triples per step.
    """
    weights = weights if weights is not None else init_weights(model_cfg, cfg.seed)
    for w in weights.values():
        w.requires_grad = True
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    losses, val_losses = [], []
    best_val = validation_loss(*val, model_cfg, weights, cfg) if val is not None else float("inf")
    best = {k: Tensor(v.data.copy()) for k, v in weights.items()}
    fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(fh, lineterminator="\n") if fh else None
    if writer:
        writer.writerow(["step", "loss", "lr"])
    try:
        for step in range(cfg.total_steps):
            lr = cfg.lr_at(step)
            if crops is None:
                bx, by = x, y
            else:
                picks = crops(rng)
                bx, by = gather(x, picks, cfg.patch_size), gather(y, picks, cfg.patch_size)
            total = batch_loss(bx, by, model_cfg, weights, cfg.lambda_mag, cfg.lambda_phase)
            value = total.item()
            if not np.isfinite(value):
                T.get_tape().clear()
                raise NumericError(f"loss became non-finite at step {step}")
            T.backward(total, list(weights.values()))
            grads = {k: w.grad for k, w in weights.items()}
            adam_step(weights, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            for w in weights.values():
                w.grad = None
            losses.append(value)
            if writer:
                writer.writerow([step, repr(value), repr(lr)])
            done = step + 1
            if val is not None and (done % cfg.checkpoint_every == 0 or done == cfg.total_steps):
                v = validation_loss(*val, model_cfg, weights, cfg)
                val_losses.append((done, v))
                log.info("step %d loss %.5f val %.5f", done, value, v)
                if v < best_val:
                    best_val = v
                    best = {k: Tensor(w.data.copy()) for k, w in weights.items()}
                if on_checkpoint:
                    on_checkpoint(done, best)
    finally:
        if fh:
            fh.close()
        for w in weights.values():
            w.requires_grad = False
    return TrainResult(weights, losses, val_losses, best, best_val)


def train(cfg: TrainConfig, model_cfg: CSTNConfig, run_dir=None) -> TrainResult:
    """Generate phantom pairs, run patch training, save checkpoints and the loss log.

    Artifacts in ``run_dir``: ``loss.csv`` (step, loss, lr), ``best.cstck``
    (lowest validation loss), ``final.cstck`` and ``config.txt``.
    """
    if model_cfg.target_size != (cfg.hr_size, cfg.hr_size):
        model_cfg = model_cfg.with_(target_size=(cfg.hr_size, cfg.hr_size))
    if model_cfg.in_echoes != len(cfg.echo_times):
        raise ValueError(f"model expects {model_cfg.in_echoes} echoes, data has {len(cfg.echo_times)}")
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    train_seeds = [phantom_seed(cfg.seed, i) for i in range(cfg.num_train)]
    val_seeds = [phantom_seed(cfg.seed + 1_000_003, i) for i in range(cfg.num_val)]
    x, y = make_pairs(train_seeds, cfg.hr_size, cfg.lr_size, cfg.echo_times)
    val = None
    if cfg.num_val:
        vx, vy = make_pairs(val_seeds, cfg.hr_size, cfg.lr_size, cfg.echo_times)
        # fixed central crops for validation
        p = min(cfg.patch_size, cfg.hr_size)
        r0 = (cfg.hr_size - p) // 2
        val = (np.ascontiguousarray(vx[:, :, r0:r0 + p, r0:r0 + p]), np.ascontiguousarray(vy[:, :, r0:r0 + p, r0:r0 + p]))

    e = model_cfg.in_echoes

    def crops(rng):
        return sample_crops(rng, y, cfg.batch_size, cfg.patch_size, e)

    def on_checkpoint(step, best):
        if run_dir is not None:
            save_checkpoint(run_dir / "best.cstck", model_cfg, best)

    t0 = time.time()
    result = fit(x, y, model_cfg, cfg, crops=crops, val=val,
                 log_path=run_dir / "loss.csv" if run_dir is not None else None,
                 on_checkpoint=on_checkpoint)
    log.info("trained %d steps in %.1fs", cfg.total_steps, time.time() - t0)
    if run_dir is not None:
        save_checkpoint(run_dir / "best.cstck", model_cfg, result.best_weights)
        save_checkpoint(run_dir / "final.cstck", model_cfg, result.weights)
    result.run_dir = run_dir
    return result


def run_dir_name(seed: int, stamp: float | None = None) -> str:
    stamp = time.time() if stamp is None else stamp
    return time.strftime("%Y%m%d-%H%M%S", time.gmtime(stamp)) + f"-seed{seed}"


# ---------------------------------------------------------------- evaluation

def _normalized(ref, pred):
    scale = float(np.max(ref))
    scale = scale if scale > 0 else 1.0
    return np.asarray(ref, dtype=np.float64) / scale, np.asarray(pred, dtype=np.float64) / scale


def score_image(ref, pred, which=("mse", "mae", "ssim")) -> dict:
    """Metrics on images scaled by the reference maximum (so the reference spans [0, 1])."""
    r, p = _normalized(ref, pred)
    funcs = {"mse": M.mse, "mae": M.mae, "ssim": M.ssim}
    return {m: funcs[m](r, p) for m in which}


def score_pairs(refs, preds, ids=None, smwi_params: SMWIParams = SMWIParams(),
                which=("mse", "mae", "ssim")) -> dict:
    """Per-scan metrics for (reference, prediction) volume pairs, aggregated.

    Keys are ``smwi/<metric>`` (SMWI of prediction vs SMWI of reference) and
    ``echo<k>/<metric>`` (magnitude of echo k).
    """
    ids = list(ids) if ids is not None else [str(i) for i in range(len(refs))]
    values: dict = {}
    for ref, pred in zip(refs, preds):
        if ref.shape != pred.shape or ref.num_echoes != pred.num_echoes:
            raise ShapeError(f"volumes differ: {ref.shape}x{ref.num_echoes} vs {pred.shape}x{pred.num_echoes}")
        s = score_image(reconstruct_smwi(ref, smwi_params).data, reconstruct_smwi(pred, smwi_params).data, which)
        for m, v in s.items():
            values.setdefault(f"smwi/{m}", []).append(v)
        for k, (er, ep) in enumerate(zip(ref.echoes, pred.echoes)):
            for m, v in score_image(er.magnitude, ep.magnitude, which).items():
                values.setdefault(f"echo{k + 1}/{m}", []).append(v)
    return {name: M.aggregate(v, name, ids) for name, v in values.items()}


@dataclass
class EvalResult:
    protocol: int
    cstn: dict
    baseline: dict

    def table(self) -> str:
        names = [n for n in self.cstn if n.startswith("smwi/")] + [n for n in self.cstn if not n.startswith("smwi/")]
        p = self.protocol
        return M.reports_table({f"{p}x{p} CSTN": [self.cstn[n] for n in names],
                                f"{p}x{p} bicubic": [self.baseline[n] for n in names]})


def evaluate(ckpt, eval_cfg: EvalConfig) -> EvalResult:
    """Score CSTN and the bicubic baseline on every scan for one protocol point.

    ``ckpt`` is a checkpoint path or a ``(CSTNConfig, weights)`` pair;
    scans are volume paths or :class:`MultiEchoVolume` objects at full size.
    """
    if isinstance(ckpt, (str, os.PathLike)):
        model_cfg, weights = load_checkpoint(ckpt)
    else:
        model_cfg, weights = ckpt
    if not eval_cfg.scans:
        raise ValueError("no scans to evaluate")
    refs, ids = [], []
    for i, scan in enumerate(eval_cfg.scans):
        if isinstance(scan, MultiEchoVolume):
            refs.append(scan)
            ids.append(str(i))
        else:
            refs.append(load_volume(scan))
            ids.append(Path(scan).name)
    outs, bases = [], []
    for ref in refs:
        if ref.shape != model_cfg.target_size:
            raise ShapeError(f"scan is {ref.shape}, checkpoint targets {model_cfg.target_size}")
        if ref.num_echoes != model_cfg.in_echoes:
            raise ShapeError(f"scan has {ref.num_echoes} echoes, checkpoint expects {model_cfg.in_echoes}")
        lr = simulate_lowres(ref, eval_cfg.protocol, eval_cfg.protocol)
        outs.append(enhance(lr, model_cfg, weights))
        bases.append(bicubic_baseline(lr, model_cfg.target_size))
    which = tuple(eval_cfg.metrics)
    return EvalResult(eval_cfg.protocol,
                      score_pairs(refs, outs, ids, eval_cfg.smwi, which),
                      score_pairs(refs, bases, ids, eval_cfg.smwi, which))
