"""Desk-scale training loop and paired-directory evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .blocks import ConfigError
from .data import IngestionError, list_images, read_image, to_image, to_tensor, to_uint8
from .evalkit import MetricsReport, psnr, ssim
from .losses import FeatureExtractor, LossWeights, total_loss
from .model import (DEFAULT_SAT_THRESHOLD, MFDNet, atomic_write, deflare, load_checkpoint, restore,
                    save_checkpoint)
from .params import ParamStore

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    steps: int = 1000
    batch: int = 2
    patch: int = 128
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 0
    clip_grad_norm: float | None = 1.0
    extractor_seed: int = 0

    def validate(self, divisor: int | None = None):
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if self.steps < 0:
            raise ConfigError(f"train.steps must be >= 0, got {self.steps}")
        if self.batch < 1:
            raise ConfigError(f"train.batch must be >= 1, got {self.batch}")
        if divisor and self.patch % divisor:
            raise ConfigError(f"train.patch ({self.patch}) must be divisible by the model divisor {divisor}")
        return self


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    eval_psnr: list = field(default_factory=list)
    last_checkpoint: Path | None = None
    best_checkpoint: Path | None = None


LOG_HEADER = "step mse ssim perceptual total\n"


def _batch_indices(seed, step, n_pairs, batch):
    rng = np.random.default_rng([seed, step])
    return rng.integers(0, n_pairs, size=batch)


def _adam_state(opt, model):
    store = ParamStore()
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        store[f"m/{name}"] = st["exp_avg"].detach().numpy().copy()
        store[f"v/{name}"] = st["exp_avg_sq"].detach().numpy().copy()
        store[f"t/{name}"] = st["step"].detach().reshape(1).numpy().copy()
    return store


def _load_adam_state(opt, model, store):
    for name, p in model.named_parameters():
        if f"m/{name}" not in store:
            continue
        opt.state[p] = {
            "step": torch.from_numpy(store[f"t/{name}"].copy()).reshape(()),
            "exp_avg": torch.from_numpy(store[f"m/{name}"].copy()),
            "exp_avg_sq": torch.from_numpy(store[f"v/{name}"].copy()),
        }


def save_train_state(out_dir, model, opt, step):
    out_dir = Path(out_dir)
    save_checkpoint(model, out_dir / "last.ckpt", extra={"step": step})
    atomic_write(out_dir / "last.optim", _adam_state(opt, model).to_bytes())


def mean_psnr(model, pairs):
    """Mean PSNR of the deflared output (no blend-back) over ``(corrupted, gt)`` arrays."""
    vals = []
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for corrupted, gt in pairs:
            out = deflare(model, to_tensor(corrupted, dtype))
            vals.append(psnr(out.double(), to_tensor(gt, torch.float64)))
    model.train(was_training)
    return float(np.mean(vals))


def train(model: MFDNet, pairs, tc: TrainConfig, out_dir=None, eval_pairs=None, resume=False,
          extractor=None) -> TrainResult:
    """Adam on the weighted loss over a fixed pool of ``(corrupted, gt)`` arrays.

    Batches are drawn from a generator seeded with ``(tc.seed, step)`` so a run
    resumed from ``out_dir/last.*`` continues with exactly the same data.
    """
    tc.validate(model.divisor)
    if not pairs:
        raise ConfigError("training set is empty")
    dtype = next(model.parameters()).dtype
    xs = torch.cat([to_tensor(c, dtype) for c, _ in pairs])
    ys = torch.cat([to_tensor(g, dtype) for _, g in pairs])
    for t in (xs, ys):
        if t.shape[-1] % model.divisor or t.shape[-2] % model.divisor:
            raise ConfigError(f"training images {tuple(t.shape[-2:])} not divisible by {model.divisor}")
    fx = extractor or FeatureExtractor(tc.extractor_seed)
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr, betas=tuple(tc.betas), eps=tc.eps)
    result = TrainResult()
    start = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "loss_history.txt"
        if resume:
            loaded, meta = load_checkpoint(out_dir / "last.ckpt", with_meta=True)
            ParamStore.from_module(loaded).load_into(model)
            _load_adam_state(opt, model, ParamStore.from_bytes((out_dir / "last.optim").read_bytes()))
            start = int(meta["extra"]["step"])
            if log_path.exists():
                kept = log_path.read_text().splitlines(keepends=True)
                kept = [kept[0]] + [ln for ln in kept[1:] if int(ln.split()[0]) < start]
                log_path.write_text("".join(kept))
        else:
            log_path.write_text(LOG_HEADER)
        log_file = log_path.open("a")

    best = -math.inf
    model.train()
    try:
        for step in range(start, tc.steps):
            idx = torch.from_numpy(_batch_indices(tc.seed, step, len(pairs), tc.batch))
            out = model(xs[idx])
            loss, terms = total_loss(out, ys[idx], fx, tc.weights)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if tc.clip_grad_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.clip_grad_norm)
            opt.step()
            rec = {"step": step, **{k: v.item() for k, v in terms.items()}, "total": loss.item()}
            result.history.append(rec)
            if log_file is not None:
                log_file.write(f"{step} {rec['mse']!r} {rec['ssim']!r} {rec['perceptual']!r} {rec['total']!r}\n")
            if tc.eval_every and (step + 1) % tc.eval_every == 0:
                score = mean_psnr(model, eval_pairs or pairs)
                result.eval_psnr.append((step + 1, score))
                log.info("step %d: loss %.5f eval psnr %.3f", step + 1, rec["total"], score)
                if out_dir is not None and score > best:
                    best = score
                    save_checkpoint(model, out_dir / "best.ckpt", extra={"step": step + 1, "psnr": score})
                    result.best_checkpoint = out_dir / "best.ckpt"
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        save_train_state(out_dir, model, opt, max(tc.steps, start))
        result.last_checkpoint = out_dir / "last.ckpt"
    return result


def load_pairs(eval_dir):
    """Pairs from ``eval_dir/corrupted/NAME`` and ``eval_dir/gt/NAME``."""
    eval_dir = Path(eval_dir)
    corrupted = {p.name: p for p in list_images(eval_dir / "corrupted")}
    gts = {p.name: p for p in list_images(eval_dir / "gt")}
    for name in sorted(set(corrupted) ^ set(gts)):
        where = corrupted.get(name) or gts.get(name)
        raise IngestionError(f"unpaired image {where}")
    if not corrupted:
        raise ConfigError(f"no image pairs under {eval_dir}/corrupted and {eval_dir}/gt")
    return [(name, corrupted[name], gts[name]) for name in sorted(corrupted)]


def evaluate(model: MFDNet, eval_dir, sat_threshold=DEFAULT_SAT_THRESHOLD) -> MetricsReport:
    """Metrics of the 8-bit restored output, exactly as ``infer`` would write it."""
    report = MetricsReport()
    dtype = next(model.parameters()).dtype
    model.eval()
    for name, cp, gp in load_pairs(eval_dir):
        x, gt = read_image(cp), read_image(gp)
        if x.shape != gt.shape:
            raise IngestionError(f"{cp} and {gp} differ in size")
        out = to_uint8(to_image(restore(model, to_tensor(x, dtype), sat_threshold))) / 255.0
        a, b = to_tensor(out, torch.float64), to_tensor(gt, torch.float64)
        report.names.append(name)
        report.psnr.append(psnr(a, b))
        report.ssim.append(ssim(a, b))
    return report


def config_dict(tc: TrainConfig):
    d = asdict(tc)
    d["betas"] = list(tc.betas)
    return d
