"""Training, pseudo-mask generation, mIoU evaluation and experiment runners."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import netpbm
from .config import ConfigError, RunConfig, apply_overrides, _format
from .datagen import ImageSample, patchify
from .head import PoolingConfig, check_epsilon, confidence_masks, pool
from .losses import label_vector, mce, pce_batch
from .model import ModelSpec, TKPModel
from .numerics import AdamState, NonFiniteGradientError, adam_step, no_grad
from .numerics.tensor import Tensor

log = logging.getLogger(__name__)

ABLATION_ROWS = (("avg", False), ("max", False), ("topk", False), ("topk", True))


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


@dataclass
class Batchable:
    patches: np.ndarray  # (N, s, d*d*3), pixels centred on 0
    targets: np.ndarray  # (N, C) 0/1, background column always 1
    sample_ids: np.ndarray
    rows: int
    cols: int
    d: int


def prepare(samples: Sequence[ImageSample], d: int, n_total_classes: int) -> Batchable:
    if not samples:
        raise ValueError("no samples")
    grids = [patchify(s, d) for s in samples]
    return Batchable(
        patches=np.stack([g.patches for g in grids]) - 0.5,
        targets=np.stack([label_vector(s.labels, n_total_classes) for s in samples]),
        sample_ids=np.array([s.sample_id for s in samples]),
        rows=grids[0].rows,
        cols=grids[0].cols,
        d=d,
    )


def model_spec(config: RunConfig) -> ModelSpec:
    ds = config.dataset
    return ModelSpec(
        encoder=config.encoder,
        lstm=config.hv_bilstm,
        n_classes=config.n_total_classes,
        rows=ds.h // ds.d,
        cols=ds.w // ds.d,
        patch_dim=ds.d * ds.d * 3,
    )


def build_model(config: RunConfig) -> TKPModel:
    return TKPModel.initialize(model_spec(config), head_seed=config.encoder.seed)


# ---------------------------------------------------------------------------
# loss on a batch
# ---------------------------------------------------------------------------


@dataclass
class BatchLoss:
    total: Tensor  # scalar: mean over images of per-image totals
    mce: float
    pce_total: float
    pce_per_class: np.ndarray  # (C,) batch mean


def batch_loss(model: TKPModel, patches: np.ndarray, targets: np.ndarray, train: Any,
               frozen_sets: tuple[np.ndarray, np.ndarray] | None = None) -> BatchLoss:
    """Forward one batch and build the training objective.

    ``frozen_sets`` overrides the confidence sets (used by gradient checks so
    that perturbations cannot move set membership).
    """
    fw = model.forward(patches)
    pred = pool(fw.z, PoolingConfig(mode=train.pooling_mode, k=train.k))
    per_image_mce = mce(pred.y, targets)
    total = per_image_mce
    n_cls = targets.shape[1]
    pce_mean = np.zeros(n_cls)
    pce_total = 0.0
    if train.pce_enabled:
        if frozen_sets is None:
            high, low = confidence_masks(fw.z.data, train.epsilon)
        else:
            high, low = frozen_sets
        if train.pce_classes == "present":
            eligible = targets.astype(bool)
            eligible[:, 0] = False
            high = high & eligible[:, None, :]
        pce, _, _ = pce_batch(fw.f_out, high, low)
        total = total + train.alpha * pce.sum(axis=-1)
        pce_mean = pce.data.mean(axis=0)
        pce_total = float(pce.data.sum(axis=-1).mean())
    loss = total.mean()
    return BatchLoss(total=loss, mce=float(per_image_mce.data.mean()), pce_total=pce_total, pce_per_class=pce_mean)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def config_echo(config: RunConfig) -> dict[str, Any]:
    return config.to_flat()


def config_from_echo(echo: dict[str, Any]) -> RunConfig:
    return apply_overrides(RunConfig(), {k: _format(v) for k, v in echo.items()})


def make_checkpoint(model: TKPModel, config: RunConfig, epoch: int, step: int,
                    adam: AdamState | None = None) -> ckpt_io.Checkpoint:
    blobs = {f"param/{name}": p.data for name, p in model.params.items()}
    meta: dict[str, Any] = {"epoch": epoch, "step": step}
    if adam is not None:
        meta["adam_step_count"] = adam.step_count
        names = list(model.params)
        for name, m, v in zip(names, adam.m, adam.v):
            blobs[f"adam.m/{name}"] = m
            blobs[f"adam.v/{name}"] = v
    return ckpt_io.Checkpoint(config=config_echo(config), meta=meta, blobs=blobs)


def load_model(source: str | os.PathLike | ckpt_io.Checkpoint) -> tuple[TKPModel, RunConfig, ckpt_io.Checkpoint]:
    ck = source if isinstance(source, ckpt_io.Checkpoint) else ckpt_io.load(source)
    config = config_from_echo(ck.config)
    model = build_model(config)
    for name, p in model.params.items():
        key = f"param/{name}"
        if key not in ck.blobs:
            raise ckpt_io.CheckpointError(f"checkpoint lacks parameter {name}")
        if ck.blobs[key].shape != p.shape:
            raise ckpt_io.CheckpointError(f"{name}: shape {ck.blobs[key].shape} != {p.shape}")
        p.data = ck.blobs[key].copy()
    return model, config, ck


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: TKPModel
    config: RunConfig
    records: list[dict[str, Any]]
    checkpoint_path: Path | None
    epochs_completed: int


class _MetricsStream:
    def __init__(self, path: Path | None, append: bool):
        self.records: list[dict[str, Any]] = []
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "a" if append else "w")

    def emit(self, record: dict[str, Any]) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 404]).permutation(n)


def train(config: RunConfig, samples: Sequence[ImageSample], out_dir: str | os.PathLike | None = None,
          resume_from: str | os.PathLike | None = None,
          clock: Callable[[], float] = time.time) -> TrainResult:
    """Train the patch network; returns the model and the per-step metric records.

    With ``out_dir`` set, ``metrics.jsonl`` is flushed every step and
    ``checkpoint.tkp`` is rewritten every ``checkpoint_every`` epochs and at
    the end.  A non-finite loss or gradient raises :class:`TrainingDiverged`
    after logging a diagnostic record; the last good checkpoint stays on disk.
    """
    config.validate()
    tc = config.train
    data = prepare(samples, config.dataset.d, config.n_total_classes)
    out = Path(out_dir) if out_dir is not None else None

    start_epoch, step = 1, 0
    if resume_from is not None:
        model, _, ck = load_model(resume_from)
        start_epoch = int(ck.meta["epoch"]) + 1
        step = int(ck.meta["step"])
    else:
        model = build_model(config)

    trainable = [(n, p) for n, p in model.params.items() if not (tc.freeze_encoder and n.startswith("enc."))]
    for name, p in model.params.items():
        p.requires_grad = not (tc.freeze_encoder and name.startswith("enc."))
    params = [p for _, p in trainable]
    adam = AdamState.for_params(params, lr=tc.lr_phase1, beta1=tc.beta1, beta2=tc.beta2, eps=tc.adam_eps)
    if resume_from is not None:
        adam.step_count = int(ck.meta.get("adam_step_count", 0))
        for i, (name, _) in enumerate(trainable):
            if f"adam.m/{name}" in ck.blobs:
                adam.m[i] = ck.blobs[f"adam.m/{name}"].copy()
                adam.v[i] = ck.blobs[f"adam.v/{name}"].copy()

    ckpt_path = out / "checkpoint.tkp" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _atomic_text(out / "config.txt", config.dumps())
    stream = _MetricsStream(out / "metrics.jsonl" if out is not None else None, append=resume_from is not None)

    n = len(data.sample_ids)
    epoch = start_epoch - 1
    try:
        for epoch in range(start_epoch, tc.max_epochs + 1):
            adam.lr = tc.lr_at(epoch)
            order = epoch_order(n, tc.seed, epoch)
            for lo in range(0, n, tc.batch_size):
                idx = order[lo : lo + tc.batch_size]
                step += 1
                for p in params:
                    p.grad = None
                bl = batch_loss(model, data.patches[idx], data.targets[idx], tc)
                total = float(bl.total.data)
                record = {
                    "run_id": config.run_id, "epoch": epoch, "step": step, "lr": adam.lr,
                    "mce": bl.mce, "pce_total": bl.pce_total, "total": total, "timestamp": clock(),
                }
                if not np.isfinite(total):
                    _diverged(stream, config, epoch, step, "non-finite loss", clock)
                bl.total.backward()
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
                try:
                    adam_step(adam, params, grads)
                except NonFiniteGradientError as exc:
                    _diverged(stream, config, epoch, step, str(exc), clock)
                stream.emit(record)
            if ckpt_path is not None and (epoch % tc.checkpoint_every == 0 or epoch == tc.max_epochs):
                ckpt_io.save(ckpt_path, make_checkpoint(model, config, epoch, step, _adam_by_name(adam, trainable, model)))
    finally:
        stream.close()
        for p in model.params.values():
            p.grad = None
    return TrainResult(model=model, config=config, records=stream.records, checkpoint_path=ckpt_path,
                       epochs_completed=max(epoch, start_epoch - 1))


def _adam_by_name(adam: AdamState, trainable, model: TKPModel) -> AdamState:
    # checkpoint moments for every parameter (zeros for frozen ones) so names line up
    by_name = {name: i for i, (name, _) in enumerate(trainable)}
    full = AdamState(lr=adam.lr, beta1=adam.beta1, beta2=adam.beta2, eps=adam.eps, step_count=adam.step_count)
    for name, p in model.params.items():
        i = by_name.get(name)
        full.m.append(adam.m[i] if i is not None else np.zeros_like(p.data))
        full.v.append(adam.v[i] if i is not None else np.zeros_like(p.data))
    return full


def _diverged(stream: _MetricsStream, config: RunConfig, epoch: int, step: int, detail: str, clock) -> None:
    stream.emit({"run_id": config.run_id, "event": "nonfinite", "epoch": epoch, "step": step,
                 "detail": detail, "timestamp": clock()})
    raise TrainingDiverged(f"epoch {epoch} step {step}: {detail}")


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# pseudo masks and evaluation
# ---------------------------------------------------------------------------


@dataclass
class PseudoMask:
    patch_labels: np.ndarray  # (s,)
    pixel_mask: np.ndarray  # (h, w)
    sample_id: int


@dataclass
class EvalReport:
    per_class_iou: dict[int, float]
    miou: float
    n_samples: int
    config_echo: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "miou": self.miou,
            "n_samples": self.n_samples,
            "config": self.config_echo,
        }


def identity_refiner(mask: PseudoMask, sample: ImageSample) -> PseudoMask:
    """Stand-in for a dense-CRF refinement stage: returns the mask unchanged."""
    return mask


def predict_scores(model: TKPModel, patches: np.ndarray, batch_size: int = 50) -> np.ndarray:
    out = []
    with no_grad():
        for lo in range(0, len(patches), batch_size):
            out.append(model.forward(patches[lo : lo + batch_size]).z.data)
    return np.concatenate(out, axis=0)


def masked_argmax(z: np.ndarray, allowed: np.ndarray | None) -> np.ndarray:
    """Argmax over the class axis of (N, s, C) scores; disallowed classes get -inf."""
    if allowed is None:
        return z.argmax(axis=-1)
    scores = np.where(allowed[:, None, :], z, -np.inf)
    return scores.argmax(axis=-1)


def upsample_labels(patch_labels: np.ndarray, rows: int, cols: int, d: int) -> np.ndarray:
    grid = np.asarray(patch_labels).reshape(rows, cols)
    return np.repeat(np.repeat(grid, d, axis=0), d, axis=1)


def generate_pseudo_masks(model: TKPModel | str | os.PathLike, samples: Sequence[ImageSample],
                          restrict_to_image_labels: bool = True, d: int | None = None,
                          refiner: Callable[[PseudoMask, ImageSample], PseudoMask] = identity_refiner
                          ) -> list[PseudoMask]:
    """Per-patch argmax labels, block-upsampled to pixels.

    With ``restrict_to_image_labels`` only the sample's image-level classes
    and background may win.
    """
    if not isinstance(model, TKPModel):
        model, config, _ = load_model(model)
        d = d or config.dataset.d
    if d is None:
        d = samples[0].pixels.shape[0] // model.spec.rows
    n_cls = model.spec.n_classes
    data = prepare(samples, d, n_cls)
    z = predict_scores(model, data.patches)
    allowed = data.targets.astype(bool) if restrict_to_image_labels else None
    labels = masked_argmax(z, allowed)
    masks = []
    for s, lab in zip(samples, labels):
        pm = PseudoMask(patch_labels=lab, pixel_mask=upsample_labels(lab, data.rows, data.cols, d),
                        sample_id=s.sample_id)
        masks.append(refiner(pm, s))
    return masks


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    """counts[gt, pred] over all pixels."""
    idx = gt.astype(np.int64).ravel() * n_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def evaluate_miou(masks: Sequence[PseudoMask | np.ndarray], gt: Sequence[ImageSample], n_classes: int,
                  config: RunConfig | None = None) -> EvalReport:
    """IoU per class over all pixels of all samples; zero-union classes are skipped."""
    if len(masks) != len(gt):
        raise ValueError(f"{len(masks)} masks for {len(gt)} samples")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    for m, s in zip(masks, gt):
        if isinstance(m, PseudoMask):
            if m.sample_id != s.sample_id:
                raise ValueError(f"mask for sample {m.sample_id} aligned with sample {s.sample_id}")
            pred = m.pixel_mask
        else:
            pred = np.asarray(m)
        if pred.shape != s.gt_mask.shape:
            raise ValueError(f"mask shape {pred.shape} != ground truth {s.gt_mask.shape}")
        conf += confusion_matrix(pred, s.gt_mask, n_classes)
    inter = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    per_class = {c: float(inter[c] / union[c]) for c in range(n_classes) if union[c] > 0}
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalReport(per_class_iou=per_class, miou=miou, n_samples=len(gt),
                      config_echo=config_echo(config) if config is not None else {})


def background_baseline(samples: Sequence[ImageSample], n_classes: int) -> EvalReport:
    return evaluate_miou([np.zeros_like(s.gt_mask) for s in samples], samples, n_classes)


def write_masks(directory: str | os.PathLike, masks: Iterable[PseudoMask]) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for m in masks:
        netpbm.write(root / f"{m.sample_id}.pgm", m.pixel_mask.astype(np.uint8))
    return root


# ---------------------------------------------------------------------------
# experiment runners
# ---------------------------------------------------------------------------


@dataclass
class RunSummary:
    label: str
    pooling_mode: str
    pce: bool
    seed: int
    mask_miou: float  # train-split pseudo masks, restricted to image labels
    val_miou: float | None
    final_mce: float
    result: TrainResult | None = None


def train_and_score(config: RunConfig, train_samples: Sequence[ImageSample],
                    val_samples: Sequence[ImageSample] | None = None, label: str = "",
                    out_dir: str | os.PathLike | None = None, keep_result: bool = False) -> RunSummary:
    res = train(config, train_samples, out_dir=out_dir)
    n_cls = config.n_total_classes
    train_masks = generate_pseudo_masks(res.model, train_samples, True, d=config.dataset.d)
    mask_miou = evaluate_miou(train_masks, train_samples, n_cls).miou
    val_miou = None
    if val_samples:
        val_masks = generate_pseudo_masks(res.model, val_samples, False, d=config.dataset.d)
        val_miou = evaluate_miou(val_masks, val_samples, n_cls).miou
    last_epoch = [r for r in res.records if r["epoch"] == res.epochs_completed]
    final_mce = float(np.mean([r["mce"] for r in last_epoch])) if last_epoch else float("nan")
    return RunSummary(label=label, pooling_mode=config.train.pooling_mode, pce=config.train.pce_enabled,
                      seed=config.train.seed, mask_miou=mask_miou, val_miou=val_miou, final_mce=final_mce,
                      result=res if keep_result else None)


def ablation_config(base: RunConfig, mode: str, pce: bool) -> RunConfig:
    return replace(base, train=replace(base.train, pooling_mode=mode, pce_enabled=pce),
                   run_id=f"{base.run_id}-{mode}{'-pce' if pce else ''}")


def run_ablation(base: RunConfig, train_samples: Sequence[ImageSample],
                 val_samples: Sequence[ImageSample] | None = None, seeds: Sequence[int] | None = None,
                 out_dir: str | os.PathLike | None = None,
                 on_run: Callable[[RunSummary], None] | None = None) -> list[dict[str, Any]]:
    """Train the four ablation rows (avg, max, top-k, top-k + PCE) per seed.

    Rows share seeds and data order.  Returns one dict per row, in that
    order, with seed-mean pseudo-mask mIoU.
    """
    seeds = list(seeds) if seeds is not None else [base.train.seed]
    rows = []
    for mode, pce in ABLATION_ROWS:
        runs = []
        for seed in seeds:
            cfg = ablation_config(base.with_seed(seed), mode, pce)
            sub = Path(out_dir) / f"{cfg.run_id}-s{seed}" if out_dir is not None else None
            summary = train_and_score(cfg, train_samples, val_samples, label=cfg.run_id, out_dir=sub)
            log.info("ablation %s seed %d: mask mIoU %.4f", cfg.run_id, seed, summary.mask_miou)
            if on_run is not None:
                on_run(summary)
            runs.append(summary)
        rows.append({
            "pooling_mode": mode,
            "pce": pce,
            "k": base.train.k if mode == "topk" else None,
            "mask_miou": float(np.mean([r.mask_miou for r in runs])),
            "val_miou": float(np.mean([r.val_miou for r in runs])) if val_samples else None,
            "per_seed": [{"seed": r.seed, "mask_miou": r.mask_miou, "val_miou": r.val_miou,
                          "final_mce": r.final_mce} for r in runs],
        })
    return rows


def run_sweep(param: str, values: Sequence[float], base: RunConfig, train_samples: Sequence[ImageSample],
              out_dir: str | os.PathLike | None = None) -> list[dict[str, Any]]:
    """One training per value of ``k`` or ``epsilon``, everything else shared."""
    if param not in ("k", "epsilon"):
        raise ConfigError(f"sweep parameter must be 'k' or 'epsilon', got {param!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    if param == "epsilon":
        for v in values:
            try:
                check_epsilon(float(v))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
    else:
        if any(int(v) != v or v < 1 for v in values):
            raise ConfigError("k values must be positive integers")
    points = []
    for v in values:
        val = int(v) if param == "k" else float(v)
        overrides = {param: val, "pooling_mode": "topk"} if param == "k" else {param: val}
        cfg = replace(base, train=replace(base.train, **overrides), run_id=f"{base.run_id}-{param}{val}")
        sub = Path(out_dir) / cfg.run_id if out_dir is not None else None
        summary = train_and_score(cfg, train_samples, out_dir=sub)
        points.append({param: val, "mask_miou": summary.mask_miou})
    return points
