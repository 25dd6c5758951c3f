"""Experiment runner: dataset generation, two-phase training, evaluation,
edge-count ablation and the denominator-quality histogram.

Every command is a pure function of (config, seed) and emits
machine-readable outputs: line-delimited JSON logs, JSON reports that echo
the fully resolved config, and plain CSV histograms/tables.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dgde, fusion, gmw, synth
from ._backend import backend_name
from .errors import IncompatibleCheckpoint, NonFiniteLoss, ParseError
from .geometry import Camera, normalize_points
from .tinynn import (
    ParamStore,
    PlainMLP,
    adamw_step,
    load_checkpoint,
    save_checkpoint,
)

CONFIG_SCHEMA_VERSION = 1
STRATEGIES = ("gmw", "uniform", "uncertainty", "inverse_denominator")


@dataclass(frozen=True)
class CameraSettings:
    f_x: float = 721.5
    f_y: float = 721.5
    c_x: float = 609.6
    c_y: float = 172.9

    def build(self) -> Camera:
        return Camera(self.f_x, self.f_y, self.c_x, self.c_y)


@dataclass(frozen=True)
class TemplateSettings:
    kind: str = "car_like"
    n_extra: int = 6  # 10 base keypoints + extras
    dims: tuple[float, float, float] = (1.5, 1.6, 3.9)
    seed: int = 0

    def build(self) -> synth.ObjectTemplate:
        return synth.make_template(self.kind, self.n_extra, self.dims, self.seed)


@dataclass(frozen=True)
class NoiseSettings:
    """Default corruption: pixel + 3D regression noise plus moderate outliers.

    The outlier box is kept at 15 px: displacements beyond the clean
    normalized-pixel spread would dominate the large-denominator end of the
    candidate ranking and invert the denominator-quality relation the
    selection rule depends on, while 15 px outliers stay selectable yet are
    gross enough for matching-based weighting to learn to reject."""

    sigma_px: float = 1.0
    sigma_3d: float = 0.02
    p_outlier: float = 0.1
    outlier_px: float = 15.0


@dataclass(frozen=True)
class PoseSettings:
    z_range: tuple[float, float] = (5.0, 60.0)
    x_frac_range: tuple[float, float] = (-0.2, 0.2)
    y_range: tuple[float, float] = (0.8, 1.8)

    def build(self) -> synth.PoseRanges:
        return synth.PoseRanges(self.z_range, self.x_frac_range, self.y_range)


@dataclass(frozen=True)
class EncoderSettings:
    """Desk-scale encoder; larger stacks are supported but slow on one core."""

    layers: int = 3
    hidden: int = 64
    feature_dim: int = 64
    weight_eps: float = 1e-6
    temperature: float = 1.0

    def build(self) -> gmw.GMWConfig:
        return gmw.GMWConfig(self.layers, self.hidden, self.feature_dim,
                             weight_eps=self.weight_eps,
                             temperature=self.temperature)


@dataclass(frozen=True)
class SinkhornSettings:
    alpha: float = 0.1
    max_iters: int = 200
    tol: float = 1e-9
    train_max_iters: int = 6
    train_tol: float = 1e-6

    def config(self) -> gmw.SinkhornConfig:
        return gmw.SinkhornConfig(self.alpha, self.max_iters, self.tol)

    def train_config(self) -> gmw.SinkhornConfig:
        return gmw.SinkhornConfig(self.alpha, self.train_max_iters, self.train_tol)


@dataclass(frozen=True)
class TrainSettings:
    batch_size: int = 32
    epochs_cls: int = 50
    epochs_reg: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta: float = 150.0


@dataclass(frozen=True)
class SelectionSettings:
    tau: float = 1e-3
    k: int = 1500


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = CONFIG_SCHEMA_VERSION
    seed: int = 0
    n_train: int = 8000
    n_val: int = 2000
    strategy: str = "gmw"
    camera: CameraSettings = field(default_factory=CameraSettings)
    template: TemplateSettings = field(default_factory=TemplateSettings)
    noise: NoiseSettings = field(default_factory=NoiseSettings)
    pose: PoseSettings = field(default_factory=PoseSettings)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    sinkhorn: SinkhornSettings = field(default_factory=SinkhornSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    selection: SelectionSettings = field(default_factory=SelectionSettings)

    def __post_init__(self):
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema {self.schema_version}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.train.beta < 0.0:
            raise ValueError("beta must be >= 0")

    def to_dict(self) -> dict:
        return _as_plain(dataclasses.asdict(self))

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        return _config_from_dict(RunConfig, doc)

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)


def _as_plain(obj):
    if isinstance(obj, dict):
        return {k: _as_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_as_plain(v) for v in obj]
    return obj


def _config_from_dict(cls, doc: dict):
    if not isinstance(doc, dict):
        raise ValueError(f"expected a mapping for {cls.__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        ftype = hints[name]
        if dataclasses.is_dataclass(ftype):
            kwargs[name] = _config_from_dict(ftype, value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid config JSON: {exc}") from exc
    return RunConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# dataset preparation


@dataclass
class Prepared:
    """Network-independent per-object arrays for a homogeneous dataset."""

    instances: list
    m: int
    x2d: np.ndarray    # (N, m, 4) raw 2D edge features
    x3d: np.ndarray    # (N, m, 6) raw 3D edge features
    z: np.ndarray      # (N, m) candidate depths, NaN where invalid
    denom: np.ndarray  # (N, m)
    valid: np.ndarray  # (N, m)
    z_star: np.ndarray
    sel_idx: list[np.ndarray]
    z_sel: list[np.ndarray]
    denom_sel: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.instances)


def prepare_dataset(instances, selection: SelectionSettings,
                    view: str = "observed") -> Prepared:
    if not instances:
        raise ValueError("empty dataset")
    n = instances[0].n
    if any(inst.n != n for inst in instances):
        raise ValueError("datasets must have a fixed keypoint count")
    N = len(instances)
    m = n * (n - 1) // 2
    x2d = np.empty((N, m, 4))
    x3d = np.empty((N, m, 6))
    z = np.empty((N, m))
    denom = np.empty((N, m))
    valid = np.empty((N, m), dtype=bool)
    z_star = np.empty(N)
    sel_idx, z_sel, denom_sel = [], [], []
    for i, inst in enumerate(instances):
        g2, g3 = gmw.build_graphs(inst)
        x2d[i] = g2.features
        x3d[i] = g3.features
        cands = dgde.generate_candidates(inst, view=view)
        z[i] = cands.z
        denom[i] = cands.denom
        valid[i] = cands.valid
        z_star[i] = inst.z_star
        sel = dgde.mask_and_select(cands, selection.tau, selection.k)
        sel_idx.append(sel.edge_index)
        z_sel.append(sel.z)
        denom_sel.append(sel.denom)
    return Prepared(list(instances), m, x2d, x3d, z, denom, valid, z_star,
                    sel_idx, z_sel, denom_sel)


# ---------------------------------------------------------------------------
# generate


def cmd_generate(config: RunConfig, out_dir) -> dict:
    """Write train/val splits (disjoint seed streams) plus a config echo."""
    out = Path(out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory {out} does not exist")
    template = config.template.build()
    camera = config.camera.build()
    ranges = config.pose.build()
    paths = {}
    for split, count, noise_key in (
        ("train", config.n_train, 2 * config.seed),
        ("val", config.n_val, 2 * config.seed + 1),
    ):
        noise = synth.NoiseModel(
            sigma_px=config.noise.sigma_px,
            sigma_3d=config.noise.sigma_3d,
            p_outlier=config.noise.p_outlier,
            outlier_px=config.noise.outlier_px,
            seed=noise_key,
        )
        instances = [
            synth.sample_instance(template, ranges, camera, noise, seed=i)
            for i in range(count)
        ]
        path = out / f"{split}.jsonl"
        synth.write_dataset(path, instances)
        paths[split] = str(path)
    save_config(config, out / "config.json")
    paths["config"] = str(out / "config.json")
    paths["counts"] = {"train": config.n_train, "val": config.n_val}
    return paths


# ---------------------------------------------------------------------------
# weighting strategies


def _strategy_weights(strategy: str, prep: Prepared, model=None, head=None):
    """Per-object weight vectors over the selected candidates."""
    if strategy == "uniform":
        return [fusion.weight_uniform(len(ix)) for ix in prep.sel_idx]
    if strategy == "inverse_denominator":
        # first-order candidate noise scales like 1/denom, so weight by denom
        out = []
        for d in prep.denom_sel:
            out.append(d / d.sum())
        return out
    if strategy == "gmw":
        if model is None:
            raise IncompatibleCheckpoint("gmw strategy requires a checkpoint")
        weights = []
        step = max(1, 65536 // prep.m)  # keep (step, m, d) activations modest
        for lo in range(0, len(prep), step):
            hi = min(lo + step, len(prep))
            weights.extend(model.edge_weights(
                prep.x2d[lo:hi], prep.x3d[lo:hi], prep.sel_idx[lo:hi]))
        return weights
    if strategy == "uncertainty":
        if head is None:
            raise IncompatibleCheckpoint("uncertainty strategy requires a checkpoint")
        sigmas = _sigma_head_predict(head, prep)
        return [fusion.weight_uncertainty(s) for s in sigmas]
    raise ValueError(f"unknown strategy {strategy!r}")


def _fused_errors(prep: Prepared, weights) -> np.ndarray:
    errs = np.empty(len(prep))
    for i, w in enumerate(weights):
        errs[i] = abs(fusion.fuse_depth_raw(prep.z_sel[i], w) - prep.z_star[i])
    return errs


# ---------------------------------------------------------------------------
# gmw training


def _model_seed(config: RunConfig) -> int:
    return config.seed * 7919 + 17


def _make_model(config: RunConfig) -> gmw.MatchingWeighter:
    return gmw.MatchingWeighter(config.encoder.build(), seed=_model_seed(config))


def _val_depth_error(model, prep: Prepared) -> float:
    weights = _strategy_weights("gmw", prep, model=model)
    return float(_fused_errors(prep, weights).mean())


def _dump_nonfinite(out_dir, payload) -> None:
    with open(Path(out_dir) / "nonfinite_dump.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)


def cmd_train(config: RunConfig, data_dir, out_dir) -> dict:
    """Two-phase training: classification-only epochs, then both losses.

    Writes checkpoint.json (best validation depth error) and train_log.jsonl
    (one record per epoch). Returns a summary dict.
    """
    out = Path(out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory {out} does not exist")
    data = Path(data_dir)
    train_insts = synth.read_dataset(data / "train.jsonl")
    val_insts = synth.read_dataset(data / "val.jsonl")
    prep = prepare_dataset(train_insts, config.selection)
    val_prep = prepare_dataset(val_insts, config.selection)
    if config.strategy == "uncertainty":
        return _train_sigma_head(config, prep, val_prep, out)
    if config.strategy != "gmw":
        raise ValueError(f"strategy {config.strategy!r} has nothing to train")

    model = _make_model(config)
    cfg_sink = config.sinkhorn.train_config()
    tr = config.train
    total_epochs = tr.epochs_cls + tr.epochs_reg
    n = len(prep)
    best = {"val_err": math.inf, "epoch": 0, "state": None}
    t0 = time.perf_counter()
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(1, total_epochs + 1):
            include_reg = epoch > tr.epochs_cls
            order = np.random.default_rng(
                np.random.SeedSequence([config.seed, 104729 + epoch])
            ).permutation(n)
            cls_sum = reg_sum = 0.0
            batches = 0
            for lo in range(0, n, tr.batch_size):
                idx = order[lo: lo + tr.batch_size]
                losses, grads, _ = gmw.batch_loss_and_grads(
                    model,
                    prep.x2d[idx],
                    prep.x3d[idx],
                    prep.z_star[idx],
                    [prep.sel_idx[i] for i in idx],
                    [prep.z_sel[i] for i in idx],
                    cfg_sink,
                    tr.beta,
                    include_reg,
                )
                if not math.isfinite(losses["total"]):
                    _dump_nonfinite(out, {
                        "epoch": epoch, "batch": batches, "losses": losses,
                        "config": config.to_dict(),
                    })
                    raise NonFiniteLoss(f"epoch {epoch} batch {batches}")
                adamw_step(model.store, grads, tr.lr, tr.weight_decay)
                cls_sum += losses["cls"]
                reg_sum += losses["reg"]
                batches += 1
            val_err = _val_depth_error(model, val_prep)
            record = {
                "epoch": epoch,
                "phase": 2 if include_reg else 1,
                "train_cls": cls_sum / batches,
                "train_reg": reg_sum / batches,
                "val_mean_abs_err": val_err,
            }
            if val_err < best["val_err"]:
                best.update(val_err=val_err, epoch=epoch,
                            state=model.store.copy_state())
                record["best"] = True
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()

    if best["state"] is not None:
        model.store.load_state(best["state"])
    ckpt_path = out / "checkpoint.json"
    save_checkpoint(ckpt_path, model.store, {
        "kind": "gmw",
        "encoder": _as_plain(dataclasses.asdict(config.encoder)),
        "best_epoch": best["epoch"],
        "val_mean_abs_err": best["val_err"],
        "run_config": config.to_dict(),
    })
    return {
        "checkpoint": str(ckpt_path),
        "log": str(log_path),
        "best_epoch": best["epoch"],
        "val_mean_abs_err": best["val_err"],
        "wall_clock_s": time.perf_counter() - t0,
    }


def load_gmw_checkpoint(path, config: RunConfig | None = None):
    """Rebuild a MatchingWeighter from a checkpoint; verifies encoder shape
    compatibility with `config` when given."""
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "gmw":
        raise IncompatibleCheckpoint(f"checkpoint kind {meta.get('kind')!r}")
    enc = _config_from_dict(EncoderSettings, meta["encoder"])
    if config is not None and dataclasses.asdict(config.encoder) != dataclasses.asdict(enc):
        raise IncompatibleCheckpoint("encoder settings differ from config")
    model = gmw.MatchingWeighter(enc.build(), seed=0)
    model.store.load_state(state)
    return model, meta


# ---------------------------------------------------------------------------
# uncertainty baseline head


def _sigma_inputs(prep: Prepared, i: int) -> np.ndarray:
    """Per selected edge: both normalized pixels, both 3D points, denominator."""
    inst = prep.instances[i]
    idx = prep.sel_idx[i]
    order = np.argsort(inst.kp_index, kind="stable")
    npx = normalize_points(inst.camera, inst.kp2d[order])
    kp3d = inst.kp3d[order]
    n = inst.n
    ii, jj = np.triu_indices(n, k=1)
    feats = np.concatenate([
        npx[ii], npx[jj], kp3d[ii], kp3d[jj],
        prep.denom[i][:, None],
    ], axis=1)
    return feats[idx]


def _sigma_head_predict(head: PlainMLP, prep: Prepared):
    out = []
    for i in range(len(prep)):
        logb, _ = head.forward(_sigma_inputs(prep, i))
        out.append(np.exp(np.clip(logb[:, 0], -10.0, 10.0)))
    return out


def _train_sigma_head(config: RunConfig, prep: Prepared, val_prep: Prepared,
                      out: Path) -> dict:
    """Laplace negative log likelihood on candidate depth errors."""
    store = ParamStore()
    rng = np.random.default_rng(np.random.SeedSequence([_model_seed(config), 5]))
    head = PlainMLP([11, 32, 1], store, "sigma", rng)
    tr = config.train
    epochs = tr.epochs_cls + tr.epochs_reg
    n = len(prep)
    inputs = [_sigma_inputs(prep, i) for i in range(n)]
    resid = [np.abs(prep.z_sel[i] - prep.z_star[i]) for i in range(n)]
    t0 = time.perf_counter()
    log_path = out / "train_log.jsonl"
    best = {"val_err": math.inf, "epoch": 0, "state": None}
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(1, epochs + 1):
            order = np.random.default_rng(
                np.random.SeedSequence([config.seed, 104729 + epoch])
            ).permutation(n)
            loss_sum = 0.0
            batches = 0
            for lo in range(0, n, tr.batch_size):
                idx = order[lo: lo + tr.batch_size]
                X = np.concatenate([inputs[i] for i in idx])
                r = np.concatenate([resid[i] for i in idx])
                logb, cache = head.forward(X)
                logb_c = np.clip(logb[:, 0], -10.0, 10.0)
                b = np.exp(logb_c)
                loss = float((r / b + math.log(2.0) + logb_c).mean())
                if not math.isfinite(loss):
                    _dump_nonfinite(out, {"epoch": epoch, "loss": loss,
                                          "config": config.to_dict()})
                    raise NonFiniteLoss(f"epoch {epoch}")
                dlogb = np.where(
                    (logb[:, 0] > -10.0) & (logb[:, 0] < 10.0),
                    (1.0 - r / b) / r.size, 0.0,
                )[:, None]
                _, grads = head.backward(cache, dlogb)
                adamw_step(store, grads, tr.lr, tr.weight_decay)
                loss_sum += loss
                batches += 1
            val_w = [fusion.weight_uncertainty(s)
                     for s in _sigma_head_predict(head, val_prep)]
            val_err = float(_fused_errors(val_prep, val_w).mean())
            record = {"epoch": epoch, "train_nll": loss_sum / batches,
                      "val_mean_abs_err": val_err}
            if val_err < best["val_err"]:
                best.update(val_err=val_err, epoch=epoch,
                            state=store.copy_state())
                record["best"] = True
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()
    if best["state"] is not None:
        store.load_state(best["state"])
    ckpt_path = out / "checkpoint.json"
    save_checkpoint(ckpt_path, store, {
        "kind": "uncertainty",
        "dims": [11, 32, 1],
        "best_epoch": best["epoch"],
        "val_mean_abs_err": best["val_err"],
        "run_config": config.to_dict(),
    })
    return {
        "checkpoint": str(ckpt_path),
        "log": str(log_path),
        "best_epoch": best["epoch"],
        "val_mean_abs_err": best["val_err"],
        "wall_clock_s": time.perf_counter() - t0,
    }


def load_sigma_checkpoint(path):
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "uncertainty":
        raise IncompatibleCheckpoint(f"checkpoint kind {meta.get('kind')!r}")
    store = ParamStore()
    head = PlainMLP(list(meta["dims"]), store, "sigma",
                    np.random.default_rng(0))
    store.load_state(state)
    return head, meta


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    """Aggregate fused-depth error statistics for one dataset."""

    strategy: str
    n_objects: int
    mean_abs_err: float
    median_abs_err: float
    max_abs_err: float
    percentiles: dict
    hist_edges: list
    hist_counts: list
    x_err_mean: float
    y_err_mean: float
    wall_clock_s: float
    backend: str
    config: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _load_model_for(config: RunConfig, checkpoint):
    model = head = None
    if config.strategy == "gmw":
        if checkpoint is None:
            raise IncompatibleCheckpoint("gmw strategy requires a checkpoint")
        model, _ = load_gmw_checkpoint(checkpoint, config)
    elif config.strategy == "uncertainty":
        if checkpoint is None:
            raise IncompatibleCheckpoint("uncertainty strategy requires a checkpoint")
        head, _ = load_sigma_checkpoint(checkpoint)
    return model, head


def evaluate(config: RunConfig, instances, checkpoint=None) -> MetricsReport:
    t0 = time.perf_counter()
    prep = prepare_dataset(instances, config.selection)
    model, head = _load_model_for(config, checkpoint)
    weights = _strategy_weights(config.strategy, prep, model=model, head=head)
    errs = _fused_errors(prep, weights)
    x_errs = np.empty(len(prep))
    y_errs = np.empty(len(prep))
    for i, w in enumerate(weights):
        zf = fusion.fuse_depth_raw(prep.z_sel[i], w)
        inst = prep.instances[i]
        if zf > 0.0:
            loc = fusion.estimate_location(inst, zf, n_candidates=len(w), weights=w)
            x_errs[i] = abs(loc.x_c - inst.pose.x_c)
            y_errs[i] = abs(loc.y_c - inst.pose.y_c)
        else:
            x_errs[i] = np.nan
            y_errs[i] = np.nan
    counts, edges = np.histogram(errs, bins=20)
    pct = {f"p{p}": float(np.percentile(errs, p)) for p in (10, 25, 50, 75, 90)}
    return MetricsReport(
        strategy=config.strategy,
        n_objects=len(prep),
        mean_abs_err=float(errs.mean()),
        median_abs_err=float(np.median(errs)),
        max_abs_err=float(errs.max()),
        percentiles=pct,
        hist_edges=[float(e) for e in edges],
        hist_counts=[int(c) for c in counts],
        x_err_mean=float(np.nanmean(x_errs)),
        y_err_mean=float(np.nanmean(y_errs)),
        wall_clock_s=time.perf_counter() - t0,
        backend=backend_name(),
        config=config.to_dict(),
    )


def cmd_eval(config: RunConfig, data_path, checkpoint=None,
             out_prefix=None) -> MetricsReport:
    instances = synth.read_dataset(data_path)
    report = evaluate(config, instances, checkpoint)
    if out_prefix is not None:
        prefix = Path(out_prefix)
        with open(f"{prefix}.report.json", "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(f"{prefix}.hist.csv", "w", encoding="utf-8") as fh:
            fh.write("bin_lo,bin_hi,count\n")
            for i, c in enumerate(report.hist_counts):
                fh.write(f"{report.hist_edges[i]!r},{report.hist_edges[i + 1]!r},{c}\n")
    return report


# ---------------------------------------------------------------------------
# ablations


def cmd_ablate_edges(config: RunConfig, data_path, checkpoint=None,
                     ks=(50, 500, 1500, "all"), out_csv=None) -> list[dict]:
    """Mean/median fused error as the selected candidate count k varies."""
    if not ks:
        raise ValueError("ks must be nonempty")
    instances = synth.read_dataset(data_path)
    if not instances:
        raise ValueError("empty dataset")
    n = instances[0].n
    m = n * (n - 1) // 2
    model, head = _load_model_for(config, checkpoint)
    rows = []
    for k in ks:
        k_eff = m if k == "all" else min(int(k), m)
        prep = prepare_dataset(
            instances, SelectionSettings(tau=config.selection.tau, k=k_eff))
        weights = _strategy_weights(config.strategy, prep, model=model, head=head)
        errs = _fused_errors(prep, weights)
        rows.append({
            "k": k_eff,
            "mean_abs_err": float(errs.mean()),
            "median_abs_err": float(np.median(errs)),
        })
    if out_csv is not None:
        with open(out_csv, "w", encoding="utf-8") as fh:
            fh.write("k,mean_abs_err,median_abs_err\n")
            for r in rows:
                fh.write(f"{r['k']},{r['mean_abs_err']!r},{r['median_abs_err']!r}\n")
    return rows


def cmd_denominator_histogram(config: RunConfig, data_path, out_csv=None,
                              n_bins: int = 10) -> list[dict]:
    """Decile bins of candidate denominators; per bin, the total count and the
    count with |z - z*| < 0.5 m."""
    instances = synth.read_dataset(data_path)
    if not instances:
        raise ValueError("empty dataset")
    denoms, good = [], []
    for inst in instances:
        cands = dgde.generate_candidates(inst)
        keep = cands.valid
        denoms.append(cands.denom[keep])
        good.append(np.abs(cands.z[keep] - inst.z_star) < 0.5)
    denoms = np.concatenate(denoms)
    good = np.concatenate(good)
    qs = np.linspace(0.0, 1.0, n_bins + 1)
    edges = np.quantile(denoms, qs)
    edges[0], edges[-1] = denoms.min(), denoms.max()
    rows = []
    for b in range(n_bins):
        lo, hi = edges[b], edges[b + 1]
        sel = (denoms >= lo) & ((denoms <= hi) if b == n_bins - 1 else (denoms < hi))
        rows.append({
            "bin_lo": float(lo),
            "bin_hi": float(hi),
            "count": int(sel.sum()),
            "count_good": int(good[sel].sum()),
        })
    if out_csv is not None:
        with open(out_csv, "w", encoding="utf-8") as fh:
            fh.write("bin_lo,bin_hi,count,count_good\n")
            for r in rows:
                fh.write(f"{r['bin_lo']!r},{r['bin_hi']!r},{r['count']},{r['count_good']}\n")
    return rows
