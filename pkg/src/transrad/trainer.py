"""Training loop and the operations behind the CLI verbs.

Adam (beta1 = 0.937, no weight decay) under a linear-warmup cosine
schedule, with an exponential moving average of the weights kept for
evaluation.  Setting the environment variable ``TRANSRAD_DETERMINISTIC=1``
forces single-threaded math and makes fixed-seed runs bit-reproducible.
"""

from __future__ import annotations

import copy
import hashlib
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .assignment import AssignConfig, tal_assign
from .backbone import BackboneConfig, cube_to_input
from .detmodel import Detector, ModelConfig, NeckConfig, anchor_centers, flatten_predictions
from .errors import ConfigError, DataError
from .evalmetrics import EvalConfig, EvalResult, count_params, evaluate_detections
from .losses import LossBreakdown, LossWeights, decode_ra_boxes, total_loss
from .postprocess import Detection, PostprocessConfig, postprocess_pipeline
from .raddata import (
    Annotation3D,
    ClassWeightConfig,
    FrameRecord,
    compute_class_weights,
    rescale_annotations,
    resize_doppler,
)

DETERMINISTIC_ENV = "TRANSRAD_DETERMINISTIC"


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr_init: float = 1e-3
    lr_min: float = 1e-5
    warmup_ratio: float = 0.05
    momentum: float = 0.937        # Adam beta1
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    seed: int = 0
    target_doppler: int = 256
    phase2: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)
    assign: AssignConfig = field(default_factory=AssignConfig)
    eval_interval_epochs: int = 10
    class_weight_min: float = 0.05

    def __post_init__(self):
        if not (0.0 <= self.warmup_ratio < 1.0):
            raise ConfigError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if self.lr_min >= self.lr_init:
            raise ConfigError("lr_min must be below lr_init")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.phase2:
            self.loss_weights = LossWeights(self.loss_weights.alpha, phase2=True)


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") == "1"


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic_mode():
        torch.set_num_threads(1)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_init, then cosine down to lr_min at total_steps."""
    warmup_steps = cfg.warmup_ratio * total_steps
    if warmup_steps > 0 and step <= warmup_steps:
        return cfg.lr_init * step / warmup_steps
    span = max(total_steps - warmup_steps, 1e-12)
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


def ema_update(ema_params, model_params, decay: float):
    """In-place elementwise update: ema <- decay * ema + (1 - decay) * model."""
    with torch.no_grad():
        for ema_p, model_p in zip(ema_params, model_params):
            ema_p.mul_(decay).add_(model_p, alpha=1.0 - decay)


class EmaModel:
    """Shadow copy of the detector holding averaged weights."""

    def __init__(self, model: Detector, decay: float):
        self.decay = decay
        self.module = copy.deepcopy(model)
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)

    def update(self, model: Detector):
        ema_update(self.module.parameters(), model.parameters(), self.decay)
        with torch.no_grad():
            for ema_b, model_b in zip(self.module.buffers(), model.buffers()):
                ema_b.copy_(model_b)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

@dataclass
class PreparedFrame:
    frame_id: str
    tensor: torch.Tensor                 # (D, R, A) float32
    annotations: list[Annotation3D]
    cube_shape: tuple[int, int, int]


def prepare_frame(record: FrameRecord, target_doppler: int) -> PreparedFrame:
    """Resize the Doppler axis, rescale annotations, lay out (D, R, A)."""
    src_d = record.cube.shape[2]
    cube = resize_doppler(record.cube, target_doppler)
    anns = [rescale_annotations(a, src_d, target_doppler) for a in record.annotations]
    tensor = cube_to_input(cube.values).squeeze(0)
    return PreparedFrame(record.frame_id, tensor, anns, cube.shape)


def split_frames(frames: list[FrameRecord]) -> tuple[list[FrameRecord], list[FrameRecord]]:
    """Deterministic 80/20 split by frame-id hash, for datasets with no
    validation split of their own."""
    train, val = [], []
    for record in frames:
        digest = hashlib.sha1(record.frame_id.encode("utf-8")).hexdigest()
        (val if int(digest, 16) % 5 == 0 else train).append(record)
    if not train:
        train, val = val, []
    return train, val


def class_counts(frames: list[PreparedFrame] | list[FrameRecord], num_classes: int) -> list[int]:
    counts = [0] * num_classes
    for record in frames:
        for ann in record.annotations:
            if ann.class_id >= num_classes:
                raise DataError(
                    f"frame '{record.frame_id}': class_id {ann.class_id} "
                    f"out of range for {num_classes} classes"
                )
            counts[ann.class_id] += 1
    return counts


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def model_config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    backbone = BackboneConfig(**{**d["backbone"],
                                 "decomposed_stages": tuple(d["backbone"]["decomposed_stages"])})
    neck = NeckConfig(**d["neck"])
    return ModelConfig(backbone=backbone, neck=neck, num_classes=d["num_classes"],
                       reg_max=d["reg_max"], head_width=d["head_width"])


def save_checkpoint(path: Path | str, model: Detector, ema: EmaModel | None,
                    step: int = 0, extra: dict | None = None):
    payload = {
        "model_config": model_config_to_dict(model.cfg),
        "model": model.state_dict(),
        "ema": ema.module.state_dict() if ema is not None else None,
        "step": step,
        "extra": extra or {},
    }
    torch.save(payload, str(path))


def load_checkpoint(path: Path | str, use_ema: bool = True) -> tuple[Detector, dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing checkpoint {path}")
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    model = Detector(model_config_from_dict(payload["model_config"]))
    state = payload["ema"] if use_ema and payload.get("ema") else payload["model"]
    reference = model.state_dict()
    for name, tensor in state.items():
        if name not in reference:
            raise DataError(f"checkpoint {path}: unexpected parameter '{name}'")
        if tuple(reference[name].shape) != tuple(tensor.shape):
            raise DataError(
                f"checkpoint {path}: parameter '{name}' has shape "
                f"{tuple(tensor.shape)}, model expects {tuple(reference[name].shape)}"
            )
    missing = set(reference) - set(state)
    if missing:
        raise DataError(f"checkpoint {path}: missing parameters {sorted(missing)[:5]}")
    model.load_state_dict(state)
    model.eval()
    return model, payload


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def assign_batch(preds, frames: list[PreparedFrame], cfg: AssignConfig):
    """Decode candidates without grad and run TAL per frame."""
    with torch.no_grad():
        flat = flatten_predictions(preds)
        centers, strides = anchor_centers(preds.grid_shapes, preds.strides,
                                          device=flat["obj"].device,
                                          dtype=flat["obj"].dtype)
        boxes = decode_ra_boxes(flat["box"], centers, strides)
        cls_probs = torch.sigmoid(flat["cls"])
    return [
        tal_assign(boxes[i], cls_probs[i], centers, frame.annotations,
                   frame.cube_shape, cfg)
        for i, frame in enumerate(frames)
    ]


def format_log_line(step: int, lr: float, breakdown: LossBreakdown) -> str:
    comps = " ".join(f"{k}={v!r}" for k, v in breakdown.components().items())
    return (f"step={step} lr={lr!r} total={breakdown.total!r} "
            f"pos={breakdown.num_positive} {comps}")


@dataclass
class TrainResult:
    history: list[LossBreakdown]
    log_lines: list[str]
    best_map: float
    best_path: Path | None
    last_path: Path | None
    model: Detector | None = None      # raw trained weights
    ema_model: Detector | None = None  # averaged weights used for eval


def train(cfg: TrainConfig, model_cfg: ModelConfig, train_records: list[FrameRecord],
          val_records: list[FrameRecord] | None = None,
          out_dir: Path | str | None = None,
          eval_cfg: EvalConfig | None = None,
          post_cfg: PostprocessConfig | None = None,
          progress: bool = False) -> TrainResult:
    if not train_records:
        raise DataError("empty training dataset")
    if cfg.target_doppler != model_cfg.backbone.input_channels:
        raise ConfigError(
            f"target_doppler {cfg.target_doppler} must equal backbone "
            f"input_channels {model_cfg.backbone.input_channels}"
        )
    seed_everything(cfg.seed)

    frames = [prepare_frame(r, cfg.target_doppler) for r in train_records]
    val_frames = [prepare_frame(r, cfg.target_doppler) for r in (val_records or [])]
    counts = class_counts(frames, model_cfg.num_classes)
    if sum(counts) > 0:
        class_weights = compute_class_weights(
            ClassWeightConfig(counts, cfg.class_weight_min))
    else:
        class_weights = np.full(model_cfg.num_classes, 1.0 / model_cfg.num_classes)

    model = Detector(model_cfg)
    model.train()
    ema = EmaModel(model, cfg.ema_decay)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_init,
                                 betas=(cfg.momentum, 0.999),
                                 weight_decay=cfg.weight_decay)

    steps_per_epoch = math.ceil(len(frames) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    rng = np.random.default_rng(cfg.seed)
    class_weight_tensor = torch.as_tensor(class_weights, dtype=torch.float32)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    history: list[LossBreakdown] = []
    log_lines: list[str] = []
    best_map, best_path, last_path = -1.0, None, None

    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(frames))
        for start in range(0, len(frames), cfg.batch_size):
            batch = [frames[i] for i in order[start:start + cfg.batch_size]]
            inputs = torch.stack([f.tensor for f in batch])
            preds = model(inputs)
            assignments = assign_batch(preds, batch, cfg.assign)
            loss, breakdown = total_loss(preds, assignments, cfg.loss_weights,
                                         class_weights=class_weight_tensor)
            lr = lr_at(step + 1, total_steps, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            ema.update(model)

            step += 1
            history.append(breakdown)
            line = format_log_line(step, lr, breakdown)
            log_lines.append(line)
            if progress and (step % 20 == 0 or step == total_steps):
                print(line, flush=True)

        is_last = epoch == cfg.epochs - 1
        if val_frames and (is_last or (cfg.eval_interval_epochs > 0
                                       and (epoch + 1) % cfg.eval_interval_epochs == 0)):
            val_map = _validation_map(ema.module, val_frames, post_cfg)
            if out_dir is not None and val_map > best_map:
                best_map = val_map
                best_path = out_dir / "best.pt"
                save_checkpoint(best_path, model, ema, step, {"val_map": val_map})

    if out_dir is not None:
        last_path = out_dir / "last.pt"
        save_checkpoint(last_path, model, ema, step)
        (out_dir / "loss_log.txt").write_text(
            "".join(ln + "\n" for ln in log_lines), encoding="utf-8")
        if best_path is None:
            best_path = out_dir / "best.pt"
            save_checkpoint(best_path, model, ema, step, {"val_map": best_map})
    return TrainResult(history, log_lines, best_map, best_path, last_path,
                       model=model, ema_model=ema.module)


def _validation_map(model: Detector, frames: list[PreparedFrame],
                    post_cfg: PostprocessConfig | None) -> float:
    """3D mAP at the lowest threshold (0.3) for checkpoint selection."""
    dets, gts = run_detection(model, frames, post_cfg)
    cfg = EvalConfig(iou_thresholds_3d=(0.3,))
    return evaluate_detections(dets, gts, cfg, mode="3d").map_value


def run_detection(model: Detector, frames: list[PreparedFrame],
                  post_cfg: PostprocessConfig | None = None
                  ) -> tuple[dict[str, list[Detection]], dict[str, list[Annotation3D]]]:
    post_cfg = post_cfg or PostprocessConfig()
    was_training = model.training
    model.eval()
    dets_by_frame, gts_by_frame = {}, {}
    with torch.no_grad():
        for frame in frames:
            preds = model(frame.tensor.unsqueeze(0))
            dets_by_frame[frame.frame_id] = postprocess_pipeline(
                preds, frame.cube_shape, post_cfg)
            gts_by_frame[frame.frame_id] = frame.annotations
    if was_training:
        model.train()
    return dets_by_frame, gts_by_frame


def evaluate(model: Detector, records: list[FrameRecord], target_doppler: int,
             eval_cfg: EvalConfig | None = None,
             post_cfg: PostprocessConfig | None = None) -> list[EvalResult]:
    """AP tables for 3D, RA, and RD detection."""
    eval_cfg = eval_cfg or EvalConfig()
    frames = [prepare_frame(r, target_doppler) for r in records]
    dets, gts = run_detection(model, frames, post_cfg)
    return [evaluate_detections(dets, gts, eval_cfg, mode=m) for m in ("3d", "ra", "rd")]


def detect(model: Detector, record: FrameRecord, target_doppler: int,
           post_cfg: PostprocessConfig | None = None,
           plot_path: Path | str | None = None) -> list[Detection]:
    frame = prepare_frame(record, target_doppler)
    dets, _ = run_detection(model, [frame], post_cfg)
    detections = dets[frame.frame_id]
    if plot_path is not None:
        plot_detections(frame, detections, plot_path)
    return detections


def plot_detections(frame: PreparedFrame, detections: list[Detection],
                    path: Path | str):
    """Range-azimuth and range-Doppler heatmaps with predicted boxes."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Rectangle

    cube = frame.tensor.permute(1, 2, 0).numpy()  # (R, A, D)
    panels = [("RA", cube.max(axis=2), lambda d: d.ra_box()),
              ("RD", cube.max(axis=1), lambda d: d.rd_box())]
    fig, axes = plt.subplots(1, 2, figsize=(11, 5))
    for ax, (name, img, box_fn) in zip(axes, panels):
        ax.imshow(img, origin="lower", aspect="auto", cmap="viridis")
        ax.set_title(f"{name} view: {frame.frame_id}")
        ax.set_xlabel("azimuth cells" if name == "RA" else "Doppler cells")
        ax.set_ylabel("range cells")
        for det in detections:
            r1, q1, r2, q2 = box_fn(det)
            ax.add_patch(Rectangle((q1, r1), q2 - q1, r2 - r1, fill=False,
                                   edgecolor="red", linewidth=1.2))
            ax.text(q1, r2, f"{det.class_id}:{det.score:.2f}", color="red", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def bench(model: Detector, cube_shape: tuple[int, int, int], target_doppler: int,
          repeats: int = 10) -> dict:
    """Per-frame inference latency (model + postprocess) and parameter count."""
    model.eval()
    r, a, _ = cube_shape
    x = torch.randn(1, target_doppler, r, a)
    shape = (r, a, target_doppler)
    with torch.no_grad():
        postprocess_pipeline(model(x), shape)  # warmup
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            postprocess_pipeline(model(x), shape)
            times.append((time.perf_counter() - start) * 1000.0)
    return {
        "params": count_params(model),
        "mean_ms": float(np.mean(times)),
        "std_ms": float(np.std(times)),
        "min_ms": float(np.min(times)),
        "max_ms": float(np.max(times)),
        "repeats": repeats,
    }
