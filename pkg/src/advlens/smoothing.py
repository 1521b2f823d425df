"""Denoised randomized smoothing: stability-trained denoiser, smoothed
prediction and certified L2 radii."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtri
from scipy.stats import beta as beta_dist
from scipy.stats import binomtest

from . import tensor as T
from .models import Classifier, ConfigError, ParameterSet, frozen_params
from .optim import Adam
from .tensor import Tensor


@dataclass
class SmoothingConfig:
    sigma: float = 0.25
    n0: int = 32
    n: int = 1000
    alpha: float = 0.001
    batch_size: int = 250
    seed: int = 0
    exact_pb: bool = False  # bound p_B separately instead of p_B = 1 - p_A

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if self.n0 < 1 or self.n < self.n0:
            raise ConfigError(f"need n0 >= 1 and n >= n0, got n0={self.n0}, n={self.n}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DenoiserConfig:
    layers: int = 5
    width: int = 32
    kernel: int = 3
    residual: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("denoiser needs at least one conv layer")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CertificationResult:
    predicted: int
    pa_bound: float
    pb_bound: float
    radius: float  # nan when abstaining
    abstain: bool
    counts: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------


class Denoiser:
    """DnCNN-style conv stack; with ``residual`` it predicts the noise and subtracts it."""

    def __init__(self, cfg: DenoiserConfig, channels: int, params: ParameterSet | None = None,
                 seed: int = 0):
        self.cfg = cfg
        self.channels = channels
        self.params = params if params is not None else self.init(seed)

    def _shapes(self):
        c, w, k, L = self.channels, self.cfg.width, self.cfg.kernel, self.cfg.layers
        if L == 1:
            return [(c, c, k, k)]
        return [(w, c, k, k)] + [(w, w, k, k)] * (L - 2) + [(c, w, k, k)]

    def init(self, seed: int) -> ParameterSet:
        rng = np.random.default_rng(seed)
        params = ParameterSet()
        shapes = self._shapes()
        for i, shape in enumerate(shapes):
            fan_in = int(np.prod(shape[1:]))
            w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            if i == len(shapes) - 1 and self.cfg.residual:
                w = np.zeros(shape)  # start as the identity map
            params[f"conv{i}.weight"] = Tensor(w, requires_grad=True)
            params[f"conv{i}.bias"] = Tensor(np.zeros(shape[0]), requires_grad=True)
        return params

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        h = x
        L = len(self._shapes())
        pad = self.cfg.kernel // 2
        for i in range(L):
            h = T.conv2d(h, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"], padding=pad)
            if i < L - 1:
                h = T.relu(h)
        return x - h if self.cfg.residual else h

    def frozen(self) -> "Denoiser":
        return Denoiser(self.cfg, self.channels, frozen_params(self.params))


def compose(base, denoiser=None):
    """``x -> base(denoiser(x))`` with frozen parameters."""
    base = base.frozen() if isinstance(base, Classifier) else base
    if denoiser is None:
        return base
    den = denoiser.frozen() if isinstance(denoiser, Denoiser) else denoiser
    return lambda x: base(den(x))


# stream tags keep training, evaluation and certification noise independent
_TRAIN, _EVAL, _CERT, _NOISY = 1, 2, 3, 4


def _noise(sigma: float, shape, *keys) -> np.ndarray:
    return np.random.default_rng([int(k) for k in keys]).normal(0.0, sigma, shape)


def stability_loss(base, denoiser: Denoiser, x: np.ndarray, targets: np.ndarray, sigma: float,
                   seed: int, ids=None, batch_size: int = 128) -> float:
    """Mean cross-entropy of ``base(denoiser(x + noise))`` against ``targets``."""
    f = compose(base, denoiser)
    ids = np.arange(len(x)) if ids is None else ids
    total = 0.0
    with T.no_grad():
        for a in range(0, len(x), batch_size):
            xb = x[a:a + batch_size]
            noise = np.stack([_noise(sigma, xb.shape[1:], seed, _EVAL, i) for i in ids[a:a + batch_size]])
            total += T.cross_entropy(f(Tensor(xb + noise)), targets[a:a + batch_size], "sum").item()
    return total / len(x)


def train_denoiser(base, x: np.ndarray, cfg: SmoothingConfig, dcfg: DenoiserConfig | None = None,
                   epochs: int = 5, lr: float = 1e-3, batch_size: int = 64,
                   log=None) -> tuple[Denoiser, list[dict]]:
    """Fit a denoiser so the frozen ``base`` keeps its clean predictions under noise."""
    dcfg = dcfg or DenoiserConfig()
    x = np.asarray(x, dtype=float)
    frozen = base.frozen() if isinstance(base, Classifier) else base
    with T.no_grad():
        targets = np.concatenate([frozen(Tensor(x[a:a + 256])).data.argmax(1)
                                  for a in range(0, len(x), 256)])
    den = Denoiser(dcfg, x.shape[1], seed=cfg.seed)
    opt = Adam(den.params, lr=lr)
    names = list(den.params)
    leaves = [den.params[k] for k in names]
    history = []
    for epoch in range(epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(x))
        total = 0.0
        for a in range(0, len(x), batch_size):
            idx = order[a:a + batch_size]
            noise = np.stack([_noise(cfg.sigma, x.shape[1:], cfg.seed, _TRAIN, epoch, i) for i in idx])
            logits = frozen(den(Tensor(x[idx] + noise)))
            loss = T.cross_entropy(logits, targets[idx])
            grads = T.grad(loss, leaves)
            opt.step(dict(zip(names, grads)))
            total += loss.item() * len(idx)
        row = {"epoch": epoch, "stability_loss": total / len(x)}
        history.append(row)
        if log:
            log(row)
    return den, history


# ---------------------------------------------------------------------------
# Bounds and radius
# ---------------------------------------------------------------------------


def inverse_normal_cdf(p):
    return ndtri(p)


def clopper_pearson_lower(k: int, n: int, alpha: float) -> float:
    """One-sided lower confidence bound on a binomial proportion at level ``alpha``."""
    return 0.0 if k == 0 else float(beta_dist.ppf(alpha, k, n - k + 1))


def clopper_pearson_upper(k: int, n: int, alpha: float) -> float:
    return 1.0 if k == n else float(beta_dist.ppf(1 - alpha, k + 1, n - k))


def certified_radius(sigma: float, p_a: float, p_b: float | None = None) -> float:
    """``sigma / 2 * (invPhi(p_a) - invPhi(p_b))``; ``p_b`` defaults to ``1 - p_a``."""
    if p_b is None:
        p_b = 1.0 - p_a
    return float(sigma / 2.0 * (inverse_normal_cdf(p_a) - inverse_normal_cdf(p_b)))


# ---------------------------------------------------------------------------
# Monte Carlo prediction and certification
# ---------------------------------------------------------------------------


def sample_counts(f, x: np.ndarray, num: int, cfg: SmoothingConfig, input_id: int,
                  offset: int, num_classes: int) -> np.ndarray:
    """Class histogram of ``f(x + noise)`` over samples ``offset .. offset+num-1``."""
    counts = np.zeros(num_classes, dtype=np.int64)
    with T.no_grad():
        for a in range(0, num, cfg.batch_size):
            b = min(a + cfg.batch_size, num)
            noise = np.stack([_noise(cfg.sigma, x.shape, cfg.seed, _CERT, input_id, offset + j)
                              for j in range(a, b)])
            preds = f(Tensor(x[None] + noise)).data.argmax(1)
            counts += np.bincount(preds, minlength=num_classes)[:num_classes]
    return counts


def _num_classes(base) -> int:
    return base.cfg.num_classes if isinstance(base, Classifier) else getattr(base, "num_classes", 10)


def smoothed_predict(base, denoiser, x: np.ndarray, cfg: SmoothingConfig, input_id: int = 0,
                     num_classes: int | None = None) -> tuple[int, bool]:
    """Majority class from ``n0`` samples, kept only if a two-sided binomial test
    on ``n`` fresh samples shows it wins more than half the time."""
    f = compose(base, denoiser)
    K = num_classes or _num_classes(base)
    c0 = int(np.argmax(sample_counts(f, x, cfg.n0, cfg, input_id, 0, K)))
    counts = sample_counts(f, x, cfg.n, cfg, input_id, cfg.n0, K)
    na = int(counts[c0])
    p = binomtest(na, cfg.n, 0.5, alternative="two-sided").pvalue
    abstain = not (p <= cfg.alpha and na > cfg.n / 2)
    return c0, abstain


def certify(base, denoiser, x: np.ndarray, cfg: SmoothingConfig, input_id: int = 0,
            num_classes: int | None = None) -> CertificationResult:
    f = compose(base, denoiser)
    K = num_classes or _num_classes(base)
    c0 = int(np.argmax(sample_counts(f, x, cfg.n0, cfg, input_id, 0, K)))
    counts = sample_counts(f, x, cfg.n, cfg, input_id, cfg.n0, K)
    return certify_from_counts(c0, counts, cfg)


def certify_from_counts(c0: int, counts: np.ndarray, cfg: SmoothingConfig) -> CertificationResult:
    n = int(counts.sum())
    pa = clopper_pearson_lower(int(counts[c0]), n, cfg.alpha)
    if cfg.exact_pb:
        others = np.delete(counts, c0)
        nb = int(others.max()) if others.size else 0
        pb = clopper_pearson_upper(nb, n, cfg.alpha)
    else:
        pb = 1.0 - pa
    if pa <= 0.5:
        return CertificationResult(c0, pa, pb, float("nan"), True, counts)
    r = certified_radius(cfg.sigma, pa, pb)
    if r <= 0:
        return CertificationResult(c0, pa, pb, float("nan"), True, counts)
    return CertificationResult(c0, pa, pb, r, False, counts)


def certify_dataset(base, denoiser, x: np.ndarray, cfg: SmoothingConfig, ids=None,
                    workers: int = 1) -> list[CertificationResult]:
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    K = _num_classes(base)
    work = lambda i: certify(base, denoiser, x[i], cfg, int(ids[i]), K)
    if workers <= 1:
        return [work(i) for i in range(len(x))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, range(len(x))))


def certified_accuracy(results: list[CertificationResult], labels, radii) -> np.ndarray:
    """Fraction of examples predicted correctly, not abstained, with radius >= r."""
    radii = np.asarray(radii, dtype=float)
    if np.any(np.diff(radii) < 0):
        raise ValueError("radii must be sorted ascending")
    labels = np.asarray(labels)
    ok = np.array([(not r.abstain) and r.predicted == l for r, l in zip(results, labels)])
    rad = np.array([r.radius if not r.abstain else -np.inf for r in results])
    if not len(results):
        return np.zeros(len(radii))
    return np.array([float((ok & (rad >= r)).mean()) for r in radii])


def certified_accuracy_curve(base, denoiser, x, y, cfg: SmoothingConfig, radii, ids=None,
                             workers: int = 1):
    results = certify_dataset(base, denoiser, x, cfg, ids, workers)
    return certified_accuracy(results, y, radii), results


def noisy_accuracy(base, denoiser, x: np.ndarray, y: np.ndarray, sigma: float, seed: int,
                   samples: int = 1) -> float:
    """Accuracy of ``base(denoiser(x + noise))`` on single noise draws."""
    f = compose(base, denoiser)
    correct = 0
    with T.no_grad():
        for s in range(samples):
            for a in range(0, len(x), 256):
                xb = x[a:a + 256]
                noise = np.stack([_noise(sigma, xb.shape[1:], seed, _NOISY, s, a + i)
                                  for i in range(len(xb))])
                correct += int((f(Tensor(xb + noise)).data.argmax(1) == y[a:a + 256]).sum())
    return correct / (len(x) * samples)


def write_certification_csv(path, results: list[CertificationResult], labels, ids=None) -> None:
    ids = np.arange(len(results)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["example_id", "label", "predicted", "pA_bound", "radius", "abstain"])
        for i, (r, l) in enumerate(zip(results, labels)):
            w.writerow([int(ids[i]), int(l), r.predicted, f"{r.pa_bound:.10g}",
                        "" if r.abstain else f"{r.radius:.10g}", int(r.abstain)])


def write_curve_csv(path, radii, acc) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["radius", "certified_accuracy"])
        for r, a in zip(radii, acc):
            w.writerow([f"{r:.10g}", f"{a:.10g}"])
