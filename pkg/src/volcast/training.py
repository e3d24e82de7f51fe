"""Minibatch variational training of the DSVM with validation-based selection."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from volcast import autodiff as ad
from volcast.dsvm import DivergenceError, DsvmConfig, config_of, elbo, init_dsvm
from volcast.nets import adam_init, adam_step, load_into, read_checkpoint, save_checkpoint
from volcast.tree import tree_leaves, tree_map

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 300
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    valid_every: int = 1
    valid_samples: int = 1
    clip_norm: float | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.valid_every < 1 or self.valid_samples < 1:
            raise ValueError("valid_every and valid_samples must be >= 1")


@dataclass
class TrainReport:
    train_elbo: list = field(default_factory=list)
    valid_elbo: list = field(default_factory=list)
    valid_epochs: list = field(default_factory=list)
    init_valid_elbo: float = float("nan")
    selected_epoch: int = 0
    seconds: list = field(default_factory=list, compare=False)

    def write_csv(self, path):
        by_epoch = dict(zip(self.valid_epochs, self.valid_elbo))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_elbo", "valid_elbo"])
            for i, tr in enumerate(self.train_elbo, start=1):
                va = by_epoch.get(i)
                w.writerow([i, repr(float(tr)), "NA" if va is None else repr(float(va))])

    def write_summary(self, path):
        best = dict(zip(self.valid_epochs, self.valid_elbo)).get(self.selected_epoch)
        doc = {
            "epochs_run": len(self.train_elbo),
            "selected_epoch": self.selected_epoch,
            "selected_valid_elbo": best,
            "init_valid_elbo": self.init_valid_elbo,
            "final_train_elbo": self.train_elbo[-1] if self.train_elbo else None,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, cause, params, report):
        self.epoch = epoch
        self.params = params
        self.report = report
        super().__init__(f"training diverged in epoch {epoch}: {cause}")


def _as_windows(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"expected a non-empty (N, T) array of windows, got {x.shape}")
    return x


def evaluate_elbo(gen, inf, sequences, n_samples=1, rng=None, chunk=8192):
    """Mean single-path ELBO per sequence over ``n_samples`` noise draws.

    ``sequences`` is ``(N, T)``; returns an array of length N. Noise for
    sample ``s`` comes from ``rng.spawn(s)``, so the draws do not depend on
    ``chunk``.
    """
    seqs = _as_windows(sequences)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = rng if rng is not None else ad.Rng(0)
    N, T = seqs.shape
    acc = np.zeros(N)
    for s in range(n_samples):
        eta = rng.spawn(s).normal((T, gen.d_z, N))
        for lo in range(0, N, chunk):
            hi = min(lo + chunk, N)
            e, _ = elbo(gen, inf, seqs[lo:hi].T, eta[:, :, lo:hi], keep_path=False)
            acc[lo:hi] += e[0]
    return acc / n_samples


def minibatches(n, batch_size, rng):
    """Index arrays of one epoch: a uniform random permutation cut into blocks."""
    order = rng.permutation(n)
    return [order[lo:lo + batch_size] for lo in range(0, n, batch_size)]


def _global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in tree_leaves(grads)))


def elbo_and_grads(params, r, eta):
    """Mean ELBO over the batch and its gradient w.r.t. ``(gen, inf)``."""
    tape = ad.Tape()
    gen, inf = tape.leaves(params)
    e, _ = elbo(gen, inf, r, eta, keep_path=False)
    B = r.shape[1]
    loss = ad.mul(ad.sum(e), -1.0 / B)
    tape.backward(loss)
    grads = tree_map(lambda n: n.grad if n.grad is not None else np.zeros_like(n.value), (gen, inf))
    return -float(loss.value[0, 0]), grads


def train(train_seqs, valid_seqs, config=TrainConfig(), model=DsvmConfig(), init=None,
          trainable=None, progress=None):
    """Stochastic variational training.

    Each epoch shuffles the training windows and walks them in minibatches
    of ``batch_size``; each minibatch uses one fresh noise path per sequence,
    backpropagates through the reparameterized draws and takes an Adam step.
    Validation ELBO is evaluated on a fixed noise stream so epochs are
    comparable. Returns ``(gen, inf, report)`` for the best validation epoch.

    ``trainable`` is an optional 0/1 mask tree shaped like ``(gen, inf)``;
    masked-out entries receive zero gradient and never move.
    """
    train_seqs = _as_windows(train_seqs)
    valid_seqs = _as_windows(valid_seqs)
    rng = ad.Rng(config.seed)
    params = init if init is not None else init_dsvm(model, rng.spawn(0))
    params = tuple(params)
    opt = adam_init(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    valid_rng = rng.spawn(1)
    batch_rng = rng.spawn(2)
    noise_rng = rng.spawn(3)

    report = TrainReport()
    best = params
    best_valid = -math.inf
    report.init_valid_elbo = float(np.mean(evaluate_elbo(*params, valid_seqs, config.valid_samples, valid_rng)))
    N, T = train_seqs.shape
    B = min(config.batch_size, N)

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        for idx in minibatches(N, B, batch_rng):
            r = train_seqs[idx].T
            eta = noise_rng.normal((T, model_dz(params), len(idx)))
            try:
                value, grads = elbo_and_grads(params, r, eta)
            except DivergenceError as exc:
                _save(config, best, report)
                raise TrainingDiverged(epoch, exc, best, report) from exc
            norm = _global_norm(grads)
            if not math.isfinite(norm):
                _save(config, best, report)
                raise TrainingDiverged(epoch, "non-finite gradient", best, report)
            if config.clip_norm is not None and norm > config.clip_norm:
                scale = config.clip_norm / norm
                grads = tree_map(lambda g: g * scale, grads)
            if trainable is not None:
                grads = tree_map(lambda g, m: g * m, grads, trainable)
            params, opt = adam_step(opt, params, grads)
            total += value * len(idx)
        report.train_elbo.append(total / N)
        if epoch % config.valid_every == 0 or epoch == config.epochs:
            try:
                v = float(np.mean(evaluate_elbo(*params, valid_seqs, config.valid_samples, valid_rng)))
            except DivergenceError as exc:
                _save(config, best, report)
                raise TrainingDiverged(epoch, exc, best, report) from exc
            report.valid_epochs.append(epoch)
            report.valid_elbo.append(v)
            if v > best_valid:
                best_valid = v
                best = params
                report.selected_epoch = epoch
                _save(config, best, report)
        report.seconds.append(time.perf_counter() - t0)
        log.info("epoch %d train_elbo %.5f valid_elbo %s (%.1fs)", epoch, report.train_elbo[-1],
                 report.valid_elbo[-1] if report.valid_epochs[-1:] == [epoch] else "-", report.seconds[-1])
        if progress is not None:
            progress(epoch, report)
    gen, inf = best
    return gen, inf, report


def model_dz(params):
    return params[0].d_z


def _save(config, params, report):
    if config.checkpoint_path:
        save_model(config.checkpoint_path, *params)


def save_model(path, gen, inf):
    save_checkpoint(path, (gen, inf), meta={"model": "dsvm", "config": asdict(config_of(gen, inf))})


def load_model(path):
    meta, arrays = read_checkpoint(path)
    if meta.get("model") != "dsvm":
        raise ValueError(f"{path}: not a DSVM checkpoint")
    template = init_dsvm(DsvmConfig(**meta["config"]), ad.Rng(0))
    gen, inf = load_into(template, arrays)
    return gen, inf
