"""Experiment configuration, orchestration and report emission."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .advtrain import TrainConfig, evaluate_robust_accuracy, train, write_history_csv
from .attacks import (AttackConfig, attack_success_rate, fgsm, frequency_filtered_attack, pgd,
                      radius_step_sweep, transfer_attack_matrix)
from .data import DataError, Dataset, load_dataset
from .frequency import make_mask, write_pgm
from .models import Classifier, ConfigError, ModelConfig, load_classifier, save_checkpoint
from .smoothing import (DenoiserConfig, SmoothingConfig, certified_accuracy, certify_dataset,
                        noisy_accuracy, smoothed_predict, train_denoiser, write_certification_csv,
                        write_curve_csv)

log = logging.getLogger(__name__)

KINDS = ("train", "attack", "transfer", "freq_study", "certify", "advtrain", "sweep", "feature_dump")

DEFAULTS = {
    "seed": 0,
    "samples": 200,
    "workers": 1,
    "plots": True,
    "out": "runs/default",
    "dataset": {"source": "synthetic", "split": "test",
                "params": {"n": 1000, "num_classes": 10, "channels": 3, "size": 32}},
    "train_dataset": None,
    "model": {},
    "models": [],
    "attack": {},
    "epsilons": [0.001, 0.003, 0.005, 0.01],
    "train": {},
    "methods": ["natural", "pgd_at", "trades"],
    "smoothing": {},
    "denoiser": {},
    "denoiser_epochs": 5,
    "denoiser_lr": 1e-3,
    "radii": [0.0, 0.25, 0.5, 0.75, 1.0],
    "sweep": {"radii": [0.0, 0.005, 0.01, 0.02], "steps": [1, 5, 10, 40]},
    "feature_image": 0,
    "freq": {"low": None, "high": None},
}

# execution-only keys: they never change results, so they stay out of the report echo
EXECUTION_KEYS = ("workers", "out")


def merge_config(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, **overrides) -> dict:
    """Defaults, then the JSON file, then non-None keyword overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            cfg = merge_config(cfg, json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    return merge_config(cfg, {k: v for k, v in overrides.items() if v is not None})


def validate_config(cfg: dict) -> None:
    if cfg.get("kind") not in KINDS:
        raise ConfigError(f"unknown experiment kind {cfg.get('kind')!r}; expected one of {KINDS}")
    unknown = set(cfg) - set(DEFAULTS) - {"kind"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if cfg["samples"] < 1:
        raise ConfigError("samples must be >= 1")
    if cfg["kind"] in ("attack", "transfer", "freq_study", "certify", "sweep", "feature_dump"):
        if not cfg["models"]:
            raise ConfigError(f"{cfg['kind']} needs at least one model checkpoint in 'models'")
        for m in cfg["models"]:
            if not Path(m["checkpoint"]).is_file():
                raise ConfigError(f"checkpoint {m['checkpoint']} does not exist")
    if cfg["workers"] < 1:
        raise ConfigError("workers must be >= 1")


def _dataset(ds_cfg: dict, seed: int) -> Dataset:
    ds_cfg = dict(ds_cfg)
    source = ds_cfg.pop("source", "synthetic")
    params = dict(ds_cfg.pop("params", {}) or {})
    split = ds_cfg.pop("split", "test")
    if source == "synthetic":
        params.setdefault("seed", seed)
        return load_dataset("synthetic", split=split, **params)
    return load_dataset(source, ds_cfg.pop("path", None), split=split, **params)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else f"{float(v):.10g}"
    return str(v)


def write_table(path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


class Run:
    """Output directory bookkeeping for one experiment."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []
        self.results: dict = {}

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def table(self, name: str, header, rows) -> Path:
        p = self.path(name)
        write_table(p, header, rows)
        return p

    def plot(self, fn, name: str, *args, **kwargs) -> None:
        if self.cfg.get("plots", True):
            fn(self.path(f"figures/{name}"), *args, **kwargs)

    def finish(self) -> dict:
        report = {
            "artifact": "advlens",
            "version": __version__,
            "kind": self.cfg["kind"],
            "config": {k: v for k, v in self.cfg.items() if k not in EXECUTION_KEYS},
            "ops": {"gelu": T.GELU_FORM, "layer_norm_eps": T.LAYER_NORM_EPS, "dtype": "float64",
                    "asr_definition": "prediction change vs clean prediction"},
            "resolved": _resolved(self.cfg),
            "results": self.results,
            "files": [{"path": p.relative_to(self.out).as_posix(), "sha256": _sha256(p)}
                      for p in sorted(set(self.files))],
        }
        (self.out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True,
                                                         default=_json_default) + "\n")
        return report


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _resolved(cfg: dict) -> dict:
    """Sub-configs with every default filled in, for the report echo."""
    out = {"attack": asdict(_attack_cfg(cfg, epsilon=0.0)),
           "smoothing": asdict(_build(SmoothingConfig, {"seed": cfg["seed"], **cfg["smoothing"]})),
           "denoiser": asdict(_build(DenoiserConfig, cfg["denoiser"]))}
    out["attack"].pop("epsilon")  # swept per cell
    if cfg["kind"] in ("train", "advtrain"):
        out["model"] = ModelConfig.from_dict(cfg["model"]).to_dict()
        out["train"] = asdict(_build(TrainConfig, {**cfg["train"], "seed": cfg["seed"]}))
    return out


def verify_manifest(out_dir) -> bool:
    out = Path(out_dir)
    report = json.loads((out / "report.json").read_text())
    return all(_sha256(out / f["path"]) == f["sha256"] for f in report["files"])


def _models(cfg) -> list[Classifier]:
    models = []
    for m in cfg["models"]:
        try:
            models.append(load_classifier(m["checkpoint"], m.get("name")))
        except (ValueError, KeyError) as e:
            if isinstance(e, ConfigError):
                raise
            raise DataError(f"unreadable checkpoint {m['checkpoint']}: {e}") from None
    seen: dict[str, int] = {}
    for m in models:  # keep output file names unique
        k = seen.get(m.name, 0)
        seen[m.name] = k + 1
        if k:
            m.name = f"{m.name}_{k}"
    return models


def _eval_set(cfg) -> tuple[Dataset, np.ndarray]:
    ds = _dataset(cfg["dataset"], cfg["seed"])
    if cfg["samples"] > len(ds):
        raise ConfigError(f"samples={cfg['samples']} exceeds dataset size {len(ds)}")
    return ds.sample(cfg["samples"], cfg["seed"])


def _build(cls, fields: dict):
    try:
        return cls(**fields)
    except TypeError as e:
        raise ConfigError(f"bad {cls.__name__} fields: {e}") from None


def _attack_cfg(cfg, **kw) -> AttackConfig:
    a = {"seed": cfg["seed"], **cfg["attack"], **kw}
    a.pop("kind", None)
    return _build(AttackConfig, a)


# ---------------------------------------------------------------------------
# Protocols usable outside the CLI
# ---------------------------------------------------------------------------


def freq_study(models, x, y, cfg: AttackConfig, epsilons, low_f=None, high_f=None,
               workers: int = 1) -> list[dict]:
    """ASR of the PGD perturbation under full, low-pass and high-pass DCT filtering."""
    H, W = x.shape[-2:]
    masks = {"full": make_mask(H, W, "full"), "low": make_mask(H, W, "low", low_f),
             "high": make_mask(H, W, "high", high_f)}
    rows = []
    for m in models:
        for eps in epsilons:
            acfg = replace(cfg, epsilon=float(eps))
            base = pgd(m, x, y, acfg, workers=workers)
            row = {"model": getattr(m, "name", "model"), "epsilon": float(eps), "pgd": base.asr}
            for mode, mask in masks.items():
                res = frequency_filtered_attack(m, x, y, acfg, mask, base=base)
                row[mode] = res.asr
                row[f"{mode}_linf"] = float(res.linf.max()) if len(res.linf) else 0.0
            rows.append(row)
    return rows


def loss_trajectory_report(model, x, y, cfg: AttackConfig, init=None, workers: int = 1):
    """Mean best-so-far cross-entropy per PGD step; also returns the attack result."""
    if cfg.n_iter < 2:
        raise ConfigError("loss trajectory needs n_iter >= 2")
    res = pgd(model, x, y, cfg, workers=workers, init=init)
    return res.loss_trajectory.mean(axis=0), res


def _normalize_map(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0:
        return np.full(m.shape, 128, dtype=np.uint8)  # constant map -> mid-gray
    return np.round((m - lo) / (hi - lo) * 255).astype(np.uint8)


def dump_feature_maps(model: Classifier, image: np.ndarray, out_dir, cap: int = 64) -> list[Path]:
    """First-block activations, one min-max normalized PGM per channel."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feats = model.first_block(np.asarray(image, dtype=float)[None]).data[0]
    if model.cfg.family == "cnn":
        maps = feats
    else:
        tokens = feats[1:]  # drop CLS
        side = int(round(np.sqrt(tokens.shape[0])))
        maps = tokens.T.reshape(-1, side, side)
    paths = []
    for c in range(min(len(maps), cap)):
        p = out_dir / f"channel_{c:03d}.pgm"
        write_pgm(p, _normalize_map(maps[c]))
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# Experiment kinds
# ---------------------------------------------------------------------------


def _train_set(cfg) -> Dataset:
    ds_cfg = cfg["train_dataset"] or {**cfg["dataset"], "split": "train"}
    return _dataset(ds_cfg, cfg["seed"])


def _run_train(run: Run, cfg: dict, methods=None) -> None:
    from . import plotting

    mcfg = ModelConfig.from_dict(cfg["model"]).validate() if cfg["model"] else ModelConfig()
    tr = _train_set(cfg)
    ev, _ = _eval_set(cfg)
    methods = methods or [cfg["train"].get("method", "natural")]
    rows = []
    for method in methods:
        tcfg = _build(TrainConfig, {**cfg["train"], "method": method, "seed": cfg["seed"]})
        model, hist = train(mcfg, tr.images, tr.labels, tcfg,
                            log=lambda r: log.info("epoch %s loss %.4f", r["epoch"], r["train_loss"]))
        tag = method if len(methods) > 1 else "model"
        write_history_csv(run.path(f"history_{method}.csv"), hist)
        save_checkpoint(run.path(f"{tag}.ckpt"), mcfg, model.params, cfg["seed"],
                        {"train": tcfg.to_dict()})
        clean, robust = evaluate_robust_accuracy(model, ev.images, ev.labels, tcfg.epsilon, 10,
                                                 cfg["seed"], workers=cfg["workers"])
        rows.append([method, clean, robust])
        run.plot(plotting.line_plot, f"history_{method}.png", [h["epoch"] for h in hist],
                 {"train loss": [h["train_loss"] for h in hist]}, "epoch", "loss")
    run.table("accuracy.csv", ["method", "clean", "pgd10"], rows)
    run.results["accuracy"] = [{"method": m, "clean": c, "pgd10": r} for m, c, r in rows]


def _run_attack(run: Run, cfg: dict) -> None:
    from . import plotting

    models = _models(cfg)
    ev, idx = _eval_set(cfg)
    eps_list = [float(e) for e in cfg["epsilons"]]
    kind = cfg["attack"].get("kind", "pgd")
    fn = fgsm if kind == "fgsm" else pgd
    asr_rows, traj = [], {}
    for m in models:
        row = [m.name]
        for eps in eps_list:
            acfg = _attack_cfg(cfg, epsilon=eps)
            res = fn(m, ev.images, ev.labels, acfg, idx, cfg["workers"])
            res.to_csv(run.path(f"attacks/{m.name}_eps{eps:g}.csv"))
            res.trajectory_to_csv(run.path(f"attacks/{m.name}_eps{eps:g}_trajectory.csv"))
            traj[f"{m.name} eps={eps:g}"] = res.loss_trajectory.mean(axis=0)
            row.append(res.asr)
        asr_rows.append(row)
    run.table("asr.csv", ["model"] + [f"eps={e:g}" for e in eps_list], asr_rows)
    steps = max(len(v) for v in traj.values())
    run.table("loss_trajectory.csv", ["step"] + list(traj),
              [[t] + [v[t] if t < len(v) else float("nan") for v in traj.values()] for t in range(steps)])
    run.results["asr"] = {r[0]: dict(zip([f"{e:g}" for e in eps_list], r[1:])) for r in asr_rows}
    a = _attack_cfg(cfg, epsilon=0.0)
    run.results["evaluator"] = "FGSM" if kind == "fgsm" else f"PGD-{a.n_iter} x {a.n_restarts} restarts"
    run.plot(plotting.heatmap, "asr.png", [r[1:] for r in asr_rows], [r[0] for r in asr_rows],
             [f"{e:g}" for e in eps_list], "Attack success rate", "epsilon", "model")
    run.plot(plotting.line_plot, "loss_trajectory.png", np.arange(steps), traj, "PGD step",
             "mean cross-entropy")


def _run_transfer(run: Run, cfg: dict) -> None:
    from . import plotting

    models = _models(cfg)
    ev, _ = _eval_set(cfg)
    names = [m.name for m in models]
    out = {}
    for eps in cfg["epsilons"]:
        acfg = _attack_cfg(cfg, epsilon=float(eps))
        mat = transfer_attack_matrix(models, ev.images, ev.labels, acfg, workers=cfg["workers"])
        run.table(f"transfer_eps{float(eps):g}.csv", ["source\\target"] + names,
                  [[n] + list(r) for n, r in zip(names, mat)])
        run.plot(plotting.heatmap, f"transfer_eps{float(eps):g}.png", mat, names, names,
                 f"FGSM transfer ASR, eps={float(eps):g}", "target", "source")
        out[f"{float(eps):g}"] = mat
    run.results["transfer"] = out


def _run_freq(run: Run, cfg: dict) -> None:
    from . import plotting

    models = _models(cfg)
    ev, _ = _eval_set(cfg)
    acfg = _attack_cfg(cfg, epsilon=0.0)
    H, W = ev.images.shape[-2:]
    low_f, high_f = cfg["freq"].get("low"), cfg["freq"].get("high")
    rows = freq_study(models, ev.images, ev.labels, acfg, cfg["epsilons"], low_f, high_f,
                      cfg["workers"])
    for mode, f in (("full", None), ("low", low_f), ("high", high_f)):
        mask = make_mask(H, W, mode, f)
        mask.to_pgm(run.path(f"masks/{mode}.pgm"))
    run.table("freq_study.csv", ["model", "epsilon", "full", "low", "high", "low_linf", "high_linf"],
              [[r["model"], r["epsilon"], r["full"], r["low"], r["high"], r["low_linf"],
                r["high_linf"]] for r in rows])
    run.results["freq_study"] = rows
    labels = [f"{r['model']}@{r['epsilon']:g}" for r in rows]
    run.plot(plotting.grouped_bars, "freq_study.png", labels,
             {m: [r[m] for r in rows] for m in ("full", "low", "high")}, "ASR")


def _run_certify(run: Run, cfg: dict) -> None:
    from . import plotting

    models = _models(cfg)
    ev, idx = _eval_set(cfg)
    scfg = _build(SmoothingConfig, {"seed": cfg["seed"], **cfg["smoothing"]})
    dcfg = _build(DenoiserConfig, cfg["denoiser"])
    tr = _train_set(cfg)
    radii = [float(r) for r in cfg["radii"]]
    curves, summary = {}, {}
    for m in models:
        den = None
        if cfg["denoiser_epochs"] > 0:
            den, hist = train_denoiser(m, tr.images, scfg, dcfg, cfg["denoiser_epochs"],
                                       cfg["denoiser_lr"])
            run.table(f"denoiser_{m.name}_history.csv", ["epoch", "stability_loss"],
                      [[h["epoch"], h["stability_loss"]] for h in hist])
        results = certify_dataset(m, den, ev.images, scfg, idx, cfg["workers"])
        write_certification_csv(run.path(f"certify_{m.name}.csv"), results, ev.labels, idx)
        acc = certified_accuracy(results, ev.labels, radii)
        write_curve_csv(run.path(f"curve_{m.name}.csv"), radii, acc)
        curves[m.name] = acc
        summary[m.name] = {
            "certified_accuracy": dict(zip([f"{r:g}" for r in radii], acc)),
            "noisy_acc_denoised": noisy_accuracy(m, den, ev.images, ev.labels, scfg.sigma, scfg.seed),
            "noisy_acc_plain": noisy_accuracy(m, None, ev.images, ev.labels, scfg.sigma, scfg.seed),
            "abstain_rate": float(np.mean([r.abstain for r in results])),
        }
    run.results["certify"] = summary
    run.plot(plotting.line_plot, "certified_accuracy.png", radii, curves, "radius",
             "certified accuracy")


def _run_sweep(run: Run, cfg: dict) -> None:
    from . import plotting

    models = _models(cfg)
    ev, _ = _eval_set(cfg)
    radii = [float(r) for r in cfg["sweep"]["radii"]]
    steps = [int(s) for s in cfg["sweep"]["steps"]]
    acfg = _attack_cfg(cfg, epsilon=0.0)
    out = {}
    for m in models:
        grid = radius_step_sweep(m, ev.images, ev.labels, radii, steps, acfg, cfg["workers"])
        run.table(f"sweep_{m.name}.csv", ["epsilon"] + [f"steps={s}" for s in steps],
                  [[r] + list(g) for r, g in zip(radii, grid)])
        run.plot(plotting.heatmap, f"sweep_{m.name}.png", grid, [f"{r:g}" for r in radii], steps,
                 f"{m.name} robust accuracy", "steps", "epsilon", cmap="Blues")
        out[m.name] = grid
        curves = {}
        for eps in [r for r in radii if r > 0]:
            tcfg = replace(acfg, epsilon=eps, n_iter=max(steps), step_size=None)
            curve, _ = loss_trajectory_report(m, ev.images, ev.labels, tcfg, workers=cfg["workers"])
            curves[f"eps={eps:g}"] = curve
        if curves:
            n = len(next(iter(curves.values())))
            run.table(f"loss_steps_{m.name}.csv", ["step"] + list(curves),
                      [[t] + [c[t] for c in curves.values()] for t in range(n)])
            run.plot(plotting.line_plot, f"loss_steps_{m.name}.png", np.arange(n), curves,
                     "PGD step", "mean cross-entropy")
    run.results["sweep"] = out


def _run_features(run: Run, cfg: dict) -> None:
    models = _models(cfg)
    ds = _dataset(cfg["dataset"], cfg["seed"])
    img = ds.images[int(cfg["feature_image"])]
    out = {}
    for m in models:
        paths = dump_feature_maps(m, img, run.out / "features" / m.name)
        run.files.extend(paths)
        out[m.name] = len(paths)
    run.results["feature_maps"] = out


def run_experiment(cfg: dict) -> dict:
    """Run one experiment kind; writes tables, figures and ``report.json`` under ``cfg['out']``."""
    validate_config(cfg)
    run = Run(cfg)
    kind = cfg["kind"]
    if kind == "train":
        _run_train(run, cfg)
    elif kind == "advtrain":
        _run_train(run, cfg, methods=list(cfg["methods"]))
    elif kind == "attack":
        _run_attack(run, cfg)
    elif kind == "transfer":
        _run_transfer(run, cfg)
    elif kind == "freq_study":
        _run_freq(run, cfg)
    elif kind == "certify":
        _run_certify(run, cfg)
    elif kind == "sweep":
        _run_sweep(run, cfg)
    else:
        _run_features(run, cfg)
    return run.finish()


__all__ = ["run_experiment", "load_config", "freq_study", "loss_trajectory_report",
           "dump_feature_maps", "verify_manifest", "ConfigError", "DataError", "KINDS",
           "attack_success_rate", "smoothed_predict"]
