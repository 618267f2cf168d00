"""Surrogate-based parameter optimisation and the search baselines.

All methods take a dataset whose pairs carry split tags, a black box exposing
``space`` and ``evaluate(image, params)``, and a :class:`TrainConfig`.  Each
returns its artifact together with a :class:`RunReport`.

Black-box call accounting is exact: ``RunReport.bb_calls`` separates calls
spent on training targets, on the held-out warm-up gate and on the final
evaluation.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from . import rng as rngmod
from .blackbox.space import ParamSpace, grid_points, normalize, param_planes, quantize
from .metrics import SsimConfig, psnr, ssim

log = logging.getLogger(__name__)

METHODS = ("algo1", "algo2", "algo3", "random", "grid")


class TrainingAborted(RuntimeError):
    """Raised when training cannot continue; ``report`` holds what was recorded so far."""

    def __init__(self, message: str, report: Optional["RunReport"] = None):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    epochs: int = 20  # algo2 / algo3
    surrogate_epochs: int = 16  # algo1 phase 1
    param_epochs: int = 4  # algo1 phase 2
    surrogate_lr: float = 0.0005
    param_lr: float = 0.02
    learner_lr: float = 0.001
    lr_decay: float = 0.8
    lr_period: int = 2
    batch_size: int = 1
    seed: int = 0
    warmup_min: int = 10
    warmup_max: int = 20
    explore: float = 0.15
    gate_images: int = 8
    budget: int = 0  # random search; 0 -> same black-box calls as algo2
    grid_samples: int = 8
    max_grid_evals: int = 10_000
    surrogate_widths: tuple = (32, 64, 128)
    learner_widths: tuple = (32, 64)
    ssim_window: int = 0
    learner_planes: str = "mean"  # algo3 surrogate input: "mean" planes or the raw learner "map"

    def validate(self) -> list:
        errs = []
        for name in ("surrogate_lr", "param_lr", "learner_lr"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be > 0")
        for name in ("epochs", "surrogate_epochs", "param_epochs", "batch_size", "lr_period", "grid_samples"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if not 0 < self.lr_decay <= 1:
            errs.append("lr_decay must lie in (0, 1]")
        if not 1 <= self.warmup_min <= self.warmup_max:
            errs.append("need 1 <= warmup_min <= warmup_max")
        if self.explore < 0:
            errs.append("explore must be >= 0")
        if self.budget < 0:
            errs.append("budget must be >= 0")
        if self.learner_planes not in ("mean", "map"):
            errs.append("learner_planes must be 'mean' or 'map'")
        return errs

    def ssim_config(self) -> SsimConfig:
        return SsimConfig(window=self.ssim_window)

    def param_lr_at(self, base: float, phase_epoch: int) -> float:
        """LR for the ``phase_epoch``-th (0-based) epoch of a parameter phase."""
        return base * self.lr_decay ** (phase_epoch // self.lr_period)


@dataclass
class RunReport:
    method: str
    seed: int
    space: list
    config: dict
    curves: list = field(default_factory=list)  # dict rows, one per epoch / search step
    theta: Optional[list] = None  # normalized, global methods only
    params: Optional[list] = None  # concrete, global methods only
    rows: list = field(default_factory=list)  # per-image evaluation rows
    aggregates: dict = field(default_factory=dict)
    bb_calls: dict = field(default_factory=lambda: {"train": 0, "gate": 0, "eval": 0})
    gate_variance: Optional[float] = None
    warmup_epochs: Optional[int] = None
    ssim_mode: str = "global"
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)  # method-specific diagnostics

    @property
    def la_curve(self) -> list:
        return [r["L_a"] for r in self.curves if r.get("L_a") is not None]

    @property
    def ls_curve(self) -> list:
        return [r["L_s"] for r in self.curves if r.get("L_s") is not None]

    def to_dict(self) -> dict:
        return asdict(self)


class CountingBlackBox:
    """Wraps a black box and tallies calls under the current ``phase``."""

    def __init__(self, inner, report: RunReport):
        self.inner = inner
        self.space = inner.space
        self.report = report
        self.phase = "train"

    def __call__(self, image, params) -> np.ndarray:
        self.report.bb_calls[self.phase] += 1
        out = np.asarray(self.inner.evaluate(image, params), dtype=np.float32)
        if out.shape != np.shape(image):
            raise ValueError(f"black box returned shape {out.shape} for input {np.shape(image)}")
        return out


# -- helpers --------------------------------------------------------------------

def _split_pairs(data, name: str, required: bool = True) -> list:
    pairs = data.subset(name)
    if required and not pairs:
        raise ValueError(f"dataset has no {name} pairs")
    return pairs


def _batches(n: int, size: int, seed: int, epoch: int):
    order = rngmod.make_rng(seed, rngmod.SHUFFLE, epoch).permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def _new_report(method: str, space: ParamSpace, cfg: TrainConfig) -> RunReport:
    return RunReport(method=method, seed=cfg.seed, space=space.describe(), config=asdict(cfg),
                     ssim_mode=cfg.ssim_config().mode)


def _row(epoch, la=None, ls=None, lr=None, score=None, theta=None) -> dict:
    return {"epoch": epoch, "L_a": la, "L_s": ls, "lr": lr, "score": score,
            "theta": None if theta is None else [float(t) for t in theta]}


def _surrogate_step(net, state, batch, xs, thetas, targets) -> float:
    """One Adam step on the surrogate weights; returns the mean batch loss."""
    net.set_trainable(True)
    params = net.parameters()
    ad.zero_grad(params)
    scale = ad.Tensor(1.0 / len(batch))
    total = 0.0
    for i in batch:
        h, w, _ = xs[i].shape
        with ad.Tape():
            pred = net(ad.Tensor(xs[i]), param_planes(ad.Tensor(thetas[i]), h, w))
            loss = ad.mse_loss(pred, ad.Tensor(targets[i]))
            ad.backward(ad.mul(loss, scale))
        total += loss.item()
    nn.adam_step(state, params)
    return total / len(batch)


def _theta_step(net, state, theta: ad.Tensor, batch, xs, gts) -> float:
    """Adam step on a global relaxed parameter vector through the frozen surrogate."""
    net.set_trainable(False)
    theta.grad = np.zeros_like(theta.data)
    scale = ad.Tensor(1.0 / len(batch))
    total = 0.0
    for i in batch:
        h, w, _ = xs[i].shape
        with ad.Tape():
            pred = net(ad.Tensor(xs[i]), param_planes(theta, h, w))
            loss = ad.mse_loss(pred, ad.Tensor(gts[i]))
            ad.backward(ad.mul(loss, scale))
        total += loss.item()
    nn.adam_step(state, [theta])
    theta.data = np.clip(theta.data, 0.0, 1.0)
    net.set_trainable(True)
    return total / len(batch)


def _gate_variance(bb: CountingBlackBox, data, u0, space, n: int) -> float:
    """Pixel variance of black-box outputs on a held-out (validation) batch."""
    val = data.subset("val")[:n] or data.subset("train")[:n]
    bb.phase = "gate"
    outs = [bb(p.noisy, quantize(u0, space)) for p in val]
    bb.phase = "train"
    return float(np.var(np.stack(outs)))


def _explore(rng, base: np.ndarray, warm: bool, scale: float) -> np.ndarray:
    if warm:
        return rng.random(base.shape)
    if scale == 0:
        return base.copy()
    return np.clip(base + scale * rng.standard_normal(base.shape), 0.0, 1.0)


def _guard(method: str, report: RunReport, fn, *args):
    try:
        return fn(*args)
    except ad.NonFiniteError as exc:
        raise TrainingAborted(f"{method}: diverged ({exc}) after {len(report.curves)} epochs", report) from None


# -- evaluation -------------------------------------------------------------------

def predict_params(learner: nn.ParamLearnerNet, image: np.ndarray, space: ParamSpace):
    u = ad.channel_mean(learner(ad.Tensor(image))).data.astype(np.float64)
    return u, quantize(u, space)


def evaluate(artifact, pairs: Sequence, black_box, ssim_cfg: SsimConfig = SsimConfig(), report: Optional[RunReport] = None):
    """Run the black box with the artifact's parameters and score every pair.

    ``artifact`` is a concrete parameter tuple (global) or a ParamLearnerNet
    (per-instance).  Returns (rows, aggregates).
    """
    space = black_box.space
    if isinstance(artifact, nn.ParamLearnerNet):
        if artifact.n_params != space.P:
            raise ValueError("parameter space mismatch")
    else:
        if len(artifact) != space.P:
            raise ValueError("parameter space mismatch")
        normalize(artifact, space)  # raises on values outside the space
    if not pairs:
        raise ValueError("nothing to evaluate")
    rows = []
    for p in pairs:
        params = predict_params(artifact, p.noisy, space)[1] if isinstance(artifact, nn.ParamLearnerNet) else tuple(artifact)
        if report is not None:
            report.bb_calls["eval"] += 1
        out = np.asarray(black_box.evaluate(p.noisy, params), dtype=np.float32)
        rows.append({"id": p.id, "split": p.split, "psnr_db": psnr(out, p.clean),
                     "ssim": ssim(out, p.clean, ssim_cfg), "sigma": p.sigma, "params": list(params)})
    return rows, aggregate(rows)


def aggregate(rows: Sequence[dict]) -> dict:
    out = {}
    for split in ("train", "val", "test"):
        sel = [r for r in rows if r["split"] == split]
        if sel:
            out[f"{split}_psnr"] = float(np.mean([r["psnr_db"] for r in sel]))
            out[f"{split}_ssim"] = float(np.mean([r["ssim"] for r in sel]))
            out[f"{split}_count"] = len(sel)
    return out


def _finish_report(report: RunReport, artifact, data, black_box, cfg: TrainConfig, t0: float) -> None:
    pairs = data.subset("train") + data.subset("test")
    report.rows, report.aggregates = evaluate(artifact, pairs, black_box, cfg.ssim_config(), report)
    report.wall_clock = time.perf_counter() - t0


# -- Algorithm: static surrogate, then global parameters ---------------------------

def algo1_static(data, black_box, cfg: TrainConfig = TrainConfig()):
    """Fit the surrogate on random per-instance parameters, then optimise one global theta."""
    t0 = time.perf_counter()
    space = black_box.space
    report = _new_report("algo1", space, cfg)
    bb = CountingBlackBox(black_box, report)
    train = _split_pairs(data, "train")
    xs = [p.noisy for p in train]
    gts = [p.clean for p in train]
    n, c = len(train), xs[0].shape[2]
    thetas = rngmod.make_rng(cfg.seed, rngmod.SAMPLING).random((n, space.P))
    targets = [bb(x, quantize(t, space)) for x, t in zip(xs, thetas)]

    net = nn.SurrogateNet(c, space.P, cfg.surrogate_widths, cfg.seed)
    opt_w = nn.AdamState(lr=cfg.surrogate_lr)
    for epoch in range(1, cfg.surrogate_epochs + 1):
        losses = [_guard("algo1", report, _surrogate_step, net, opt_w, b, xs, thetas, targets)
                  for b in _batches(n, cfg.batch_size, cfg.seed, epoch)]
        report.curves.append(_row(epoch, la=float(np.mean(losses))))
        log.info("algo1 surrogate epoch %d  L_a=%.3g", epoch, report.curves[-1]["L_a"])

    theta = ad.Tensor(np.full(space.P, 0.5), requires_grad=True, name="theta")
    opt_t = nn.AdamState(lr=cfg.param_lr)
    for k in range(cfg.param_epochs):
        epoch = cfg.surrogate_epochs + k + 1
        opt_t.lr = cfg.param_lr_at(cfg.param_lr, k)
        losses = [_guard("algo1", report, _theta_step, net, opt_t, theta, b, xs, gts)
                  for b in _batches(n, cfg.batch_size, cfg.seed, epoch)]
        report.curves.append(_row(epoch, ls=float(np.mean(losses)), lr=opt_t.lr, theta=theta.data))
        log.info("algo1 param epoch %d  L_s=%.3g theta=%s", epoch, report.curves[-1]["L_s"], theta.data)

    u = theta.data.astype(np.float64)
    report.theta, report.params = u.tolist(), list(quantize(u, space))
    _finish_report(report, tuple(report.params), data, black_box, cfg, t0)
    return net, u, report


# -- Algorithm: dynamic alternating optimisation ---------------------------------

def algo2_dynamic(data, black_box, cfg: TrainConfig = TrainConfig()):
    """Alternate surrogate fitting on fresh black-box outputs with global theta updates."""
    t0 = time.perf_counter()
    space = black_box.space
    report = _new_report("algo2", space, cfg)
    bb = CountingBlackBox(black_box, report)
    train = _split_pairs(data, "train")
    xs = [p.noisy for p in train]
    gts = [p.clean for p in train]
    n, c = len(train), xs[0].shape[2]

    net = nn.SurrogateNet(c, space.P, cfg.surrogate_widths, cfg.seed)
    opt_w = nn.AdamState(lr=cfg.surrogate_lr)
    theta = ad.Tensor(np.full(space.P, 0.5), requires_grad=True, name="theta")
    opt_t = nn.AdamState(lr=cfg.param_lr)
    report.gate_variance = _gate_variance(bb, data, theta.data, space, cfg.gate_images)
    explore_rng = rngmod.make_rng(cfg.seed, rngmod.EXPLORE)
    fit_thetas = [None] * n
    targets = [None] * n
    warm = True
    for epoch in range(1, cfg.epochs + 1):
        if not warm:
            opt_t.lr = cfg.param_lr_at(cfg.param_lr, epoch - report.warmup_epochs - 1)
        la, ls = [], []
        for b in _batches(n, cfg.batch_size, cfg.seed, epoch):
            for i in b:
                fit_thetas[i] = _explore(explore_rng, theta.data.astype(np.float64), warm, cfg.explore)
                targets[i] = bb(xs[i], quantize(fit_thetas[i], space))
            la.append(_guard("algo2", report, _surrogate_step, net, opt_w, b, xs, fit_thetas, targets))
            if not warm:
                ls.append(_guard("algo2", report, _theta_step, net, opt_t, theta, b, xs, gts))
        report.curves.append(_row(epoch, la=float(np.mean(la)), ls=float(np.mean(ls)) if ls else None,
                                  lr=None if warm else opt_t.lr, theta=theta.data))
        log.info("algo2 epoch %d  L_a=%.3g L_s=%s theta=%s", epoch, report.curves[-1]["L_a"],
                 report.curves[-1]["L_s"], theta.data)
        if warm:
            warm = _still_warming(report, epoch, cfg, "algo2")

    u = theta.data.astype(np.float64)
    report.theta, report.params = u.tolist(), list(quantize(u, space))
    _finish_report(report, tuple(report.params), data, black_box, cfg, t0)
    return net, u, report


def _still_warming(report: RunReport, epoch: int, cfg: TrainConfig, method: str) -> bool:
    """Surrogate-fidelity gate: parameter updates start once the epoch-mean
    surrogate loss is below the held-out output variance (after ``warmup_min``
    epochs); failing that by ``warmup_max`` aborts the run."""
    la = report.curves[-1]["L_a"]
    if epoch >= cfg.warmup_min and la < report.gate_variance:
        report.warmup_epochs = epoch
        return False
    if epoch >= cfg.warmup_max:
        raise TrainingAborted(
            f"{method}: surrogate failed the fidelity gate after {epoch} epochs "
            f"(L_a={la:.4g} >= variance {report.gate_variance:.4g})", report)
    return True


# -- Algorithm: instance-specific parameters ----------------------------------------

def _learner_step(net, learner, state, batch, xs, gts, planes: str = "mean") -> float:
    net.set_trainable(False)
    learner.set_trainable(True)
    params = learner.parameters()
    ad.zero_grad(params)
    scale = ad.Tensor(1.0 / len(batch))
    total = 0.0
    for i in batch:
        h, w, _ = xs[i].shape
        with ad.Tape():
            x = ad.Tensor(xs[i])
            u = learner(x)
            pred = net(x, u if planes == "map" else param_planes(ad.channel_mean(u), h, w))
            loss = ad.mse_loss(pred, ad.Tensor(gts[i]))
            ad.backward(ad.mul(loss, scale))
        total += loss.item()
    nn.adam_step(state, params)
    net.set_trainable(True)
    return total / len(batch)


def algo3_instance(data, black_box, cfg: TrainConfig = TrainConfig()):
    """Train a parameter learner end to end through a dynamically refitted surrogate."""
    t0 = time.perf_counter()
    space = black_box.space
    report = _new_report("algo3", space, cfg)
    bb = CountingBlackBox(black_box, report)
    train = _split_pairs(data, "train")
    xs = [p.noisy for p in train]
    gts = [p.clean for p in train]
    n, c = len(train), xs[0].shape[2]

    net = nn.SurrogateNet(c, space.P, cfg.surrogate_widths, cfg.seed)
    learner = nn.ParamLearnerNet(c, space.P, cfg.learner_widths, cfg.seed + 1)
    opt_w = nn.AdamState(lr=cfg.surrogate_lr)
    opt_p = nn.AdamState(lr=cfg.learner_lr)
    report.gate_variance = _gate_variance(bb, data, np.full(space.P, 0.5), space, cfg.gate_images)
    explore_rng = rngmod.make_rng(cfg.seed, rngmod.EXPLORE)
    fit_thetas = [None] * n
    targets = [None] * n
    warm = True
    for epoch in range(1, cfg.epochs + 1):
        if not warm:
            opt_p.lr = cfg.param_lr_at(cfg.learner_lr, epoch - report.warmup_epochs - 1)
        la, ls, us = [], [], []
        for b in _batches(n, cfg.batch_size, cfg.seed, epoch):
            for i in b:
                if warm:
                    base = np.full(space.P, 0.5)
                else:
                    base = predict_params(learner, xs[i], space)[0]
                    us.append(base)
                fit_thetas[i] = _explore(explore_rng, base, warm, cfg.explore)
                targets[i] = bb(xs[i], quantize(fit_thetas[i], space))
            la.append(_guard("algo3", report, _surrogate_step, net, opt_w, b, xs, fit_thetas, targets))
            if not warm:
                ls.append(_guard("algo3", report, _learner_step, net, learner, opt_p, b, xs, gts,
                                 cfg.learner_planes))
        report.curves.append(_row(epoch, la=float(np.mean(la)), ls=float(np.mean(ls)) if ls else None,
                                  lr=None if warm else opt_p.lr,
                                  theta=np.mean(us, axis=0) if us else None))
        log.info("algo3 epoch %d  L_a=%.3g L_s=%s", epoch, report.curves[-1]["L_a"], report.curves[-1]["L_s"])
        if warm:
            warm = _still_warming(report, epoch, cfg, "algo3")

    _finish_report(report, learner, data, black_box, cfg, t0)
    return net, learner, report


# -- search baselines ------------------------------------------------------------------

def _score_matrix(candidates, pairs, bb: CountingBlackBox) -> np.ndarray:
    """PSNR of every candidate on every pair; images outer so block matching is reused."""
    scores = np.empty((len(pairs), len(candidates)))
    for i, p in enumerate(pairs):
        for j, params in enumerate(candidates):
            scores[i, j] = psnr(bb(p.noisy, params), p.clean)
    return scores


def random_search(data, black_box, budget: int, seed: int = 0, cfg: Optional[TrainConfig] = None):
    """Best of ``budget`` uniform samples, scored by mean train PSNR."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    cfg = cfg or TrainConfig(seed=seed)
    t0 = time.perf_counter()
    space = black_box.space
    report = _new_report("random", space, cfg)
    report.seed = seed
    report.config["budget"] = budget
    bb = CountingBlackBox(black_box, report)
    train = _split_pairs(data, "train")
    samples = rngmod.make_rng(seed, rngmod.SAMPLING).random((budget, space.P))
    candidates = [quantize(u, space) for u in samples]
    mean_psnr = _score_matrix(candidates, train, bb).mean(axis=0)
    best = 0
    for k in range(budget):
        if mean_psnr[k] > mean_psnr[best]:
            best = k
        report.curves.append(_row(k + 1, score=float(mean_psnr[best]), theta=samples[best]))
    report.theta, report.params = samples[best].tolist(), list(candidates[best])
    _finish_report(report, candidates[best], data, black_box, cfg, t0)
    return candidates[best], report


def grid_search(data, black_box, samples: int = 8, cfg: Optional[TrainConfig] = None, split: str = "train"):
    """Exhaustive lattice search; continuous dims get ``samples`` evenly spaced values.

    Ties go to the lexicographically smallest index vector (the first in
    lattice order).  ``split`` selects which pairs score the candidates.
    """
    cfg = cfg or TrainConfig()
    t0 = time.perf_counter()
    space = black_box.space
    report = _new_report("grid", space, cfg)
    report.config["grid_samples"] = samples
    bb = CountingBlackBox(black_box, report)
    pairs = _split_pairs(data, split)
    candidates = grid_points(space, samples)
    if len(candidates) > cfg.max_grid_evals:
        raise ValueError(f"grid of {len(candidates)} settings x {len(pairs)} images exceeds the cap "
                         f"of {cfg.max_grid_evals} settings")
    mean_psnr = _score_matrix(candidates, pairs, bb).mean(axis=0)
    best = 0
    for k in range(len(candidates)):
        if mean_psnr[k] > mean_psnr[best]:
            best = k
        report.curves.append(_row(k + 1, score=float(mean_psnr[best]), theta=normalize(candidates[best], space)))
    report.params = list(candidates[best])
    report.theta = normalize(candidates[best], space).tolist()
    report.extra["grid_scores"] = mean_psnr.tolist()
    _finish_report(report, candidates[best], data, black_box, cfg, t0)
    return candidates[best], report


def run_method(method: str, data, black_box, cfg: TrainConfig):
    """Dispatch by name; returns (artifacts dict, report)."""
    if method == "algo1":
        net, u, rep = algo1_static(data, black_box, cfg)
        return {"surrogate": net}, rep
    if method == "algo2":
        net, u, rep = algo2_dynamic(data, black_box, cfg)
        return {"surrogate": net}, rep
    if method == "algo3":
        net, learner, rep = algo3_instance(data, black_box, cfg)
        return {"surrogate": net, "learner": learner}, rep
    if method == "random":
        budget = cfg.budget or cfg.epochs
        _, rep = random_search(data, black_box, budget, cfg.seed, cfg)
        return {}, rep
    if method == "grid":
        _, rep = grid_search(data, black_box, cfg.grid_samples, cfg)
        return {}, rep
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
