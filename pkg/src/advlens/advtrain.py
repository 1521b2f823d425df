"""Natural, PGD adversarial and TRADES training, plus PGD robust-accuracy evaluation."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, example_rng, pgd
from .models import Classifier, ConfigError, ModelConfig, frozen_params, init_parameters
from .optim import SGD, Adam, piecewise_lr
from .tensor import Tensor

METHODS = ("natural", "pgd_at", "trades")


@dataclass
class TrainConfig:
    method: str = "natural"
    epsilon: float = 8 / 255
    inner_steps: int = 7
    inner_step_size: float | None = None  # default 2.5 * epsilon / inner_steps
    trades_beta: float = 6.0
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    decay_epochs: list = field(default_factory=lambda: [15, 18])
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float | None = None  # 5e-4 for cnn, 2e-4 otherwise
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown training method {self.method!r}; expected {METHODS}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.method == "trades" and self.trades_beta <= 0:
            raise ConfigError("TRADES beta must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        self.decay_epochs = list(self.decay_epochs)

    @property
    def inner_alpha(self) -> float:
        if self.inner_step_size is not None:
            return float(self.inner_step_size)
        return 2.5 * self.epsilon / self.inner_steps

    def weight_decay_for(self, family: str) -> float:
        if self.weight_decay is not None:
            return self.weight_decay
        return 5e-4 if family == "cnn" else 2e-4

    def to_dict(self) -> dict:
        return asdict(self)


def trades_inner_max(model, x: np.ndarray, ids, cfg: TrainConfig, epoch: int) -> np.ndarray:
    """Signed-gradient ascent on KL(f(x) || f(x')) from a 0.001-scale Gaussian start."""
    eps = cfg.epsilon
    if eps == 0:
        return x.copy()
    with T.no_grad():
        p_clean = T.softmax(model(Tensor(x)), axis=-1).data
    start = np.stack([example_rng(cfg.seed, 7, epoch, i).standard_normal(x.shape[1:]) for i in ids])
    xa = np.clip(np.clip(x + 0.001 * start, x - eps, x + eps), 0.0, 1.0)
    for _ in range(cfg.inner_steps):
        xt = Tensor(xa, requires_grad=True)
        # KL(p || q) up to a constant in x': -sum p log q
        obj = -T.sum_(T.log_softmax(model(xt), axis=-1) * p_clean)
        (g,) = T.grad(obj, [xt])
        xa = np.clip(np.clip(xa + cfg.inner_alpha * np.sign(g), x - eps, x + eps), 0.0, 1.0)
    return xa


def trades_loss(model, x, x_adv, y, beta: float):
    """``CE(f(x), y) + beta * mean KL(softmax f(x) || softmax f(x_adv))``; returns (total, ce, kl)."""
    logits = model(T.as_tensor(x))
    ce = T.cross_entropy(logits, y)
    kl = T.mean(T.kl_divergence(logits, model(T.as_tensor(x_adv))))
    return ce + beta * kl, ce, kl


def _batch_loss(model, frozen, xb, yb, idx, cfg: TrainConfig, epoch: int):
    """Loss tensor plus the adversarial inputs used (None for natural training)."""
    if cfg.method == "natural":
        return T.cross_entropy(model(Tensor(xb)), yb), None
    if cfg.method == "pgd_at":
        acfg = AttackConfig(epsilon=cfg.epsilon, n_iter=cfg.inner_steps, step_size=cfg.inner_alpha,
                            random_start=True, seed=cfg.seed * 1_000_003 + epoch,
                            batch_size=max(len(xb), 1))
        x_adv = pgd(frozen, xb, yb, acfg, example_ids=idx).x_adv
        return T.cross_entropy(model(Tensor(x_adv)), yb), x_adv
    x_adv = trades_inner_max(frozen, xb, idx, cfg, epoch)
    total, _, _ = trades_loss(model, xb, x_adv, yb, cfg.trades_beta)
    return total, x_adv


def train(model_cfg: ModelConfig, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
          init_seed: int | None = None, log=None) -> tuple[Classifier, list[dict]]:
    """Train from a seeded initialization; history has one row per epoch."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    seed = cfg.seed if init_seed is None else init_seed
    params = init_parameters(model_cfg, seed)
    model = Classifier(model_cfg, params, seed=seed)
    frozen = Classifier(model_cfg, frozen_params(params), seed=seed)
    names = list(params)
    leaves = [params[k] for k in names]
    if cfg.optimizer == "adam":
        opt = Adam(params, lr=cfg.lr)
    else:
        opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                  weight_decay=cfg.weight_decay_for(model_cfg.family))
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = piecewise_lr(cfg.lr, epoch, cfg.decay_epochs, cfg.decay_factor)
        order = np.random.default_rng([cfg.seed, 11, epoch]).permutation(len(x))
        tot_loss = clean_ok = adv_ok = 0.0
        for a in range(0, len(x), cfg.batch_size):
            idx = order[a:a + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            loss, x_adv = _batch_loss(model, frozen, xb, yb, idx, cfg, epoch)
            grads = T.grad(loss, leaves)
            opt.step(dict(zip(names, grads)))
            for k in names:  # keep the frozen view pointing at the updated arrays
                frozen.params[k].data = params[k].data
            tot_loss += loss.item() * len(idx)
            with T.no_grad():
                clean_ok += float((frozen(Tensor(xb)).data.argmax(1) == yb).sum())
                if x_adv is not None:
                    adv_ok += float((frozen(Tensor(x_adv)).data.argmax(1) == yb).sum())
        row = {"epoch": epoch, "lr": opt.lr, "train_loss": tot_loss / len(x),
               "clean_acc": clean_ok / len(x),
               "robust_acc": adv_ok / len(x) if cfg.method != "natural" else float("nan")}
        history.append(row)
        if log:
            log(row)
    return model, history


def pgd_adversarial_train(model_cfg, x, y, cfg: TrainConfig, **kw):
    if cfg.method != "pgd_at":
        raise ConfigError("pgd_adversarial_train requires method 'pgd_at'")
    return train(model_cfg, x, y, cfg, **kw)


def trades_train(model_cfg, x, y, cfg: TrainConfig, **kw):
    if cfg.method != "trades":
        raise ConfigError("trades_train requires method 'trades'")
    return train(model_cfg, x, y, cfg, **kw)


def evaluate_robust_accuracy(model, x, y, epsilon: float, steps: int = 10, seed: int = 0,
                             restarts: int = 1, workers: int = 1) -> tuple[float, float]:
    """(clean accuracy, accuracy under PGD-``steps``); robust counts need both correct."""
    cfg = AttackConfig(epsilon=epsilon, n_iter=steps, n_restarts=restarts, seed=seed)
    res = pgd(model, x, y, cfg, workers=workers)
    clean = float((res.clean_pred == res.labels).mean())
    return clean, res.robust_accuracy


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "clean_acc", "robust_acc"])
        for r in history:
            rob = "" if np.isnan(r["robust_acc"]) else f"{r['robust_acc']:.10g}"
            w.writerow([r["epoch"], f"{r['train_loss']:.10g}", f"{r['clean_acc']:.10g}", rob])
