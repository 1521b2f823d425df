"""L-infinity attacks (FGSM, PGD, frequency-filtered PGD), transfer matrices and sweeps.

All attacks work in raw ``[0, 1]`` pixel space.  A *model* is any callable
mapping a ``B x ...`` :class:`Tensor` to ``B x K`` logits; a
:class:`~advlens.models.Classifier` is automatically frozen so parameter
gradients are neither computed nor stored.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .frequency import FrequencyMask, filter_perturbation, make_mask
from .models import Classifier, ConfigError
from .tensor import Tensor


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    n_iter: int = 40
    step_size: float | None = None  # default 2.5 * epsilon / n_iter
    random_start: bool = True
    n_restarts: int = 1
    filter_mode: str = "full"
    filter_corner: int | None = None
    clamp_to_valid_range: bool = True
    post_clip: bool = False  # re-project frequency-filtered examples into the ball
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.n_iter < 1:
            raise ConfigError(f"n_iter must be >= 1, got {self.n_iter}")
        if self.n_restarts < 1:
            raise ConfigError(f"n_restarts must be >= 1, got {self.n_restarts}")
        if self.filter_mode not in ("full", "low", "high"):
            raise ConfigError(f"unknown filter mode {self.filter_mode!r}")
        if self.n_iter > 1 and self.epsilon > 0 and self.alpha <= 0:
            raise ConfigError("step size must be positive for multi-step attacks")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return float(self.step_size)
        return 2.5 * self.epsilon / self.n_iter

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    clean_pred: np.ndarray
    adv_pred: np.ndarray
    labels: np.ndarray
    loss_trajectory: np.ndarray  # N x (n_iter + 1), best-so-far loss; column 0 is the start
    linf: np.ndarray
    example_ids: np.ndarray
    misclassified_any: np.ndarray = field(default=None)

    @property
    def success(self) -> np.ndarray:
        return self.adv_pred != self.clean_pred

    @property
    def asr(self) -> float:
        return float(self.success.mean()) if len(self.success) else 0.0

    @property
    def robust_accuracy(self) -> float:
        ok = (self.adv_pred == self.labels) & (self.clean_pred == self.labels)
        return float(ok.mean()) if len(ok) else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["example_id", "clean_pred", "adv_pred", "label", "linf_dist", "success"])
            for i in range(len(self.labels)):
                w.writerow([int(self.example_ids[i]), int(self.clean_pred[i]), int(self.adv_pred[i]),
                            int(self.labels[i]), f"{self.linf[i]:.10g}", int(self.success[i])])

    def trajectory_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["example_id"] + [f"step_{t}" for t in range(self.loss_trajectory.shape[1])])
            for i, row in enumerate(self.loss_trajectory):
                w.writerow([int(self.example_ids[i])] + [f"{v:.10g}" for v in row])


def _as_model(model):
    return model.frozen() if isinstance(model, Classifier) else model


def example_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator keyed by ``(seed, *keys)``; independent of evaluation order."""
    return np.random.default_rng([int(seed)] + [int(k) for k in keys])


def loss_and_grad(model, x: np.ndarray, y: np.ndarray):
    """Per-example cross-entropy, its input gradient, and the logits."""
    xt = Tensor(x, requires_grad=True)
    logits = model(xt)
    per = T.cross_entropy(logits, y, reduction="none")
    (g,) = T.grad(T.sum_(per), [xt])
    return per.data, g, logits.data


def loss_only(model, x: np.ndarray, y: np.ndarray):
    with T.no_grad():
        logits = model(Tensor(x))
        per = T.cross_entropy(logits, y, reduction="none")
    return per.data, logits.data


def _project(x, x0, eps, clamp):
    x = np.clip(x, x0 - eps, x0 + eps)
    return np.clip(x, 0.0, 1.0) if clamp else x


def _chunks(n: int, size: int):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def run_chunked(fn, n: int, batch_size: int, workers: int = 1) -> list:
    """Apply ``fn(start, stop)`` over fixed chunks; results keep chunk order.

    Chunk boundaries do not depend on ``workers`` so serial and parallel runs
    perform identical arithmetic.
    """
    spans = _chunks(n, batch_size)
    if workers <= 1 or len(spans) <= 1:
        return [fn(a, b) for a, b in spans]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: fn(*s), spans))


def _merge(parts: list[AttackResult]) -> AttackResult:
    return AttackResult(
        x_adv=np.concatenate([p.x_adv for p in parts]),
        clean_pred=np.concatenate([p.clean_pred for p in parts]),
        adv_pred=np.concatenate([p.adv_pred for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        loss_trajectory=np.concatenate([p.loss_trajectory for p in parts]),
        linf=np.concatenate([p.linf for p in parts]),
        example_ids=np.concatenate([p.example_ids for p in parts]),
        misclassified_any=np.concatenate([p.misclassified_any for p in parts]),
    )


def _linf(x, x0):
    return np.abs(x - x0).reshape(len(x), -1).max(axis=1) if len(x) else np.zeros(0)


# ---------------------------------------------------------------------------
# FGSM / PGD
# ---------------------------------------------------------------------------


def _fgsm_batch(model, x0, y, ids, cfg: AttackConfig) -> AttackResult:
    clean_loss, g, clean_logits = loss_and_grad(model, x0, y)
    x = x0 + cfg.epsilon * np.sign(g)
    if cfg.clamp_to_valid_range:
        x = np.clip(x, 0.0, 1.0)
    adv_loss, adv_logits = loss_only(model, x, y)
    traj = np.stack([clean_loss, np.maximum(clean_loss, adv_loss)], axis=1)
    adv_pred = adv_logits.argmax(1)
    return AttackResult(x, clean_logits.argmax(1), adv_pred, y, traj, _linf(x, x0), ids,
                        adv_pred != y)


def _pgd_batch(model, x0, y, ids, cfg: AttackConfig, init=None) -> AttackResult:
    n, eps, alpha, clamp = len(x0), cfg.epsilon, cfg.alpha, cfg.clamp_to_valid_range
    clean_loss, clean_logits = loss_only(model, x0, y)
    clean_pred = clean_logits.argmax(1)
    shape = (-1,) + (1,) * (x0.ndim - 1)

    best_x = x0.copy()
    best_loss = np.full(n, -np.inf)
    traj = np.empty((n, cfg.n_iter + 1))
    traj[:, 0] = clean_loss
    wrong = np.zeros(n, dtype=bool)

    def consider(x, loss, logits, t_col, run_traj):
        nonlocal best_x
        better = loss > best_loss
        best_loss[better] = loss[better]
        best_x[better] = x[better]
        wrong[:] |= logits.argmax(1) != y
        run_traj[:, t_col] = np.maximum(run_traj[:, t_col - 1] if t_col else run_traj[:, 0], loss)

    for r in range(cfg.n_restarts):
        run = np.empty_like(traj)
        run[:, 0] = clean_loss
        start_is_candidate = init is not None and r == 0
        if start_is_candidate:
            x = np.array(init, dtype=float)
        elif cfg.random_start and eps > 0:
            noise = np.stack([example_rng(cfg.seed, i, r).uniform(-eps, eps, x0.shape[1:])
                              for i in ids]) if n else np.zeros_like(x0)
            x = _project(x0 + noise, x0, eps, clamp)
        else:
            x = x0.copy()
        for t in range(cfg.n_iter):
            loss, g, logits = loss_and_grad(model, x, y)
            if t == 0:
                if start_is_candidate:
                    consider(x, loss, logits, 0, run)
            else:
                consider(x, loss, logits, t, run)
            x = _project(x + alpha * np.sign(g), x0, eps, clamp)
        loss, logits = loss_only(model, x, y)
        consider(x, loss, logits, cfg.n_iter, run)
        traj = run if r == 0 else np.maximum(traj, run)

    _, adv_logits = loss_only(model, best_x, y)
    return AttackResult(best_x, clean_pred, adv_logits.argmax(1), y, traj, _linf(best_x, x0),
                        ids, wrong)


def _prepare(x0, y, ids):
    x0 = np.asarray(x0, dtype=float)
    y = np.asarray(y, dtype=np.intp).reshape(-1)
    if len(x0) != len(y):
        raise ValueError(f"{len(x0)} inputs but {len(y)} labels")
    ids = np.arange(len(y)) if ids is None else np.asarray(ids, dtype=np.int64)
    return x0, y, ids


def fgsm(model, x0, y, cfg: AttackConfig, example_ids=None, workers: int = 1) -> AttackResult:
    """Single signed-gradient step of size epsilon."""
    model = _as_model(model)
    x0, y, ids = _prepare(x0, y, example_ids)
    parts = run_chunked(lambda a, b: _fgsm_batch(model, x0[a:b], y[a:b], ids[a:b], cfg),
                        len(y), cfg.batch_size, workers)
    return _merge(parts) if parts else _empty(x0, y, ids, 2)


def pgd(model, x0, y, cfg: AttackConfig, example_ids=None, workers: int = 1,
        init=None) -> AttackResult:
    """Projected signed-gradient ascent; returns the highest-loss iterate.

    ``init`` warm-starts the first restart and is itself a candidate.
    """
    model = _as_model(model)
    x0, y, ids = _prepare(x0, y, example_ids)
    init = None if init is None else np.asarray(init, dtype=float)
    parts = run_chunked(
        lambda a, b: _pgd_batch(model, x0[a:b], y[a:b], ids[a:b], cfg,
                                None if init is None else init[a:b]),
        len(y), cfg.batch_size, workers)
    return _merge(parts) if parts else _empty(x0, y, ids, cfg.n_iter + 1)


def _empty(x0, y, ids, steps):
    z = np.zeros(0, dtype=np.intp)
    return AttackResult(x0.copy(), z, z, y, np.zeros((0, steps)), np.zeros(0), ids,
                        np.zeros(0, dtype=bool))


def frequency_filtered_attack(model, x0, y, cfg: AttackConfig, mask: FrequencyMask | None = None,
                              example_ids=None, workers: int = 1,
                              base: AttackResult | None = None) -> AttackResult:
    """PGD, then keep only the masked DCT coefficients of the perturbation.

    The filtered example is not re-projected into the epsilon ball unless
    ``cfg.post_clip`` is set; ``linf`` reports the achieved distance.
    """
    x0, y, ids = _prepare(x0, y, example_ids)
    if mask is None:
        mask = make_mask(x0.shape[-2], x0.shape[-1], cfg.filter_mode, cfg.filter_corner)
    if (mask.height, mask.width) != x0.shape[-2:]:
        raise ValueError(f"mask extents {(mask.height, mask.width)} do not match image "
                         f"extents {x0.shape[-2:]}")
    if base is None:
        base = pgd(model, x0, y, cfg, ids, workers)
    x = x0 + filter_perturbation(base.x_adv - x0, mask)
    if cfg.post_clip:
        x = _project(x, x0, cfg.epsilon, cfg.clamp_to_valid_range)
    adv_pred = _as_model(model).predict(x) if isinstance(model, Classifier) else predict(model, x)
    return replace(base, x_adv=x, adv_pred=adv_pred, linf=_linf(x, x0),
                   misclassified_any=adv_pred != y)


def predict(model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    if isinstance(model, Classifier):
        return model.predict(x, batch_size)
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model(Tensor(x[i:i + batch_size])).data.argmax(1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)


# ---------------------------------------------------------------------------
# Metrics and protocols
# ---------------------------------------------------------------------------


def attack_success_rate(clean_preds, adv_preds, labels=None):
    """Fraction of predictions the attack changed.

    With ``labels`` also returns robust accuracy: examples classified
    correctly both before and after the attack.
    """
    clean = np.asarray(clean_preds)
    adv = np.asarray(adv_preds)
    if clean.shape != adv.shape:
        raise ValueError(f"length mismatch: {clean.shape} vs {adv.shape}")
    asr = float((clean != adv).mean()) if clean.size else 0.0
    if labels is None:
        return asr
    labels = np.asarray(labels)
    if labels.shape != clean.shape:
        raise ValueError(f"length mismatch: labels {labels.shape} vs {clean.shape}")
    robust = float(((adv == labels) & (clean == labels)).mean()) if clean.size else 0.0
    return asr, robust


def transfer_attack_matrix(models: list, x0, y, cfg: AttackConfig, attack: str = "fgsm",
                           workers: int = 1) -> np.ndarray:
    """ASR of examples crafted on source ``i`` (row) when fed to target ``j`` (column)."""
    x0, y, ids = _prepare(x0, y, None)
    clean = [predict(m, x0) for m in models]
    fn = fgsm if attack == "fgsm" else pgd
    out = np.zeros((len(models), len(models)))
    for i, src in enumerate(models):
        adv = fn(src, x0, y, cfg, ids, workers).x_adv
        for j, tgt in enumerate(models):
            out[i, j] = attack_success_rate(clean[j], predict(tgt, adv))
    return out


def radius_step_sweep(model, x0, y, radii, step_counts, cfg: AttackConfig | None = None,
                      workers: int = 1) -> np.ndarray:
    """Robust accuracy on an ``(epsilon, steps)`` grid.

    Along each epsilon row the attack is warm-started from the previous step
    count's best iterate, and an example stays broken once any evaluated
    iterate misclassified it, so rows are non-increasing by construction.
    """
    if not len(radii) or not len(step_counts):
        raise ValueError("radius_step_sweep needs non-empty grids")
    cfg = cfg or AttackConfig()
    x0, y, ids = _prepare(x0, y, None)
    steps = sorted(int(s) for s in step_counts)
    clean_ok = predict(model, x0) == y
    grid = np.zeros((len(radii), len(steps)))
    for i, eps in enumerate(radii):
        broken = ~clean_ok
        prev_x, done = None, 0
        for j, s in enumerate(steps):
            extra = s - done
            if extra > 0 and eps > 0:
                sub = replace(cfg, epsilon=float(eps), n_iter=extra,
                              step_size=2.5 * float(eps) / s,
                              random_start=cfg.random_start and prev_x is None)
                res = pgd(model, x0, y, sub, ids, workers, init=prev_x)
                broken = broken | res.misclassified_any
                prev_x, done = res.x_adv, s
            grid[i, j] = float((~broken).mean())
    return grid


def mean_loss_trajectory(result: AttackResult) -> np.ndarray:
    return result.loss_trajectory.mean(axis=0)
