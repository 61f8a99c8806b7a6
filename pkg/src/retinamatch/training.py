"""Training loops: supervised teacher training and reverse knowledge
distillation into the attention-based student.

Every step samples an image and a random homography, forms the augmented
copy, and optimizes
    teacher:  l_clf + l_geo + l_des
    student:  l_clf + l_clf_rkd + l_geo + l_des + l_des_rkd
with the distillation terms computed against a frozen teacher run in eval
mode. The keypoint set feeding the descriptor losses is the NMS extraction
of the current (detached) heatmap. Runs are deterministic for a given
(dataset, config, seed): checkpoints and JSON-line logs are byte-identical
across repeats on one platform.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import losses, nets
from .geometry import AugmentParams, sample_homography
from .keypoints import nms_extract
from .losses import LossBreakdown, LossWeights
from .nets import ModelParams, ModelSpec, build_model, load_checkpoint, save_checkpoint

__all__ = ["TrainConfig", "TrainLog", "AnnotatedSample", "TrainingDivergedError",
           "train_teacher", "train_student_rkd", "save_checkpoint", "load_checkpoint"]


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the last finite parameters."""

    def __init__(self, message: str, last_good: ModelParams, log: "TrainLog"):
        super().__init__(message)
        self.last_good = last_good
        self.log = log


@dataclass
class AnnotatedSample:
    """A preprocessed gray image plus its human (or synthetic) keypoints."""

    image: np.ndarray        # float32 (h, w) in [0, 1]
    keypoints: np.ndarray    # (n, 2) xy

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image, dtype=np.float32)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        h, w = self.image.shape
        if self.keypoints.shape[0] < 1:
            raise ValueError("annotated sample needs at least one keypoint")
        xs, ys = self.keypoints[:, 0], self.keypoints[:, 1]
        if (xs < 0).any() or (xs > w - 1).any() or (ys < 0).any() or (ys > h - 1).any():
            raise ValueError("keypoint outside image bounds")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 1
    learning_rate: float = 1e-3
    optimizer: str = "adam"            # "adam" | "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    seed: int = 0
    sigma: float = 1.5                 # label smoothing, pixels
    margin_m: float = 1.0
    dropout_rate: float | None = None  # overrides the model spec when set
    augment: AugmentParams = AugmentParams(
        max_rotation=10.0, max_translation=0.05, scale_range=(0.95, 1.05),
        max_perspective=0.0)
    loss_weights: LossWeights = LossWeights()
    nms_threshold: float = 0.3
    nms_window: float = 10.0
    nms_max_keypoints: int = 256
    dice_eps: float = 1e-6
    grad_clip_norm: float = 5.0    # 0 disables clipping
    checkpoint_every: int = 0          # epochs; 0 disables periodic saves
    checkpoint_dir: str | None = None
    log_path: str | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.dropout_rate is not None and not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.sigma <= 0 or self.margin_m < 0:
            raise ValueError("sigma must be > 0 and margin_m >= 0")

    def config_hash(self) -> str:
        # output locations are not part of the run's identity
        skip = {"log_path", "checkpoint_dir"}

        def enc(obj):
            if hasattr(obj, "__dataclass_fields__"):
                return {k: enc(getattr(obj, k))
                        for k in obj.__dataclass_fields__ if k not in skip}
            if isinstance(obj, tuple):
                return list(obj)
            return obj
        blob = json.dumps(enc(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainLogRecord:
    step: int
    epoch: int
    split: str                   # "train" | "val"
    losses: LossBreakdown
    config_hash: str
    wall_time: float = 0.0       # informational; excluded from the JSONL stream

    def to_json(self) -> str:
        doc = {"step": self.step, "epoch": self.epoch, "split": self.split,
               "config_hash": self.config_hash}
        doc.update(self.losses.to_dict())
        return json.dumps(doc, sort_keys=True)


class TrainLog:
    """Per-step loss records, optionally streamed to a JSON-lines file.

    Wall time stays in memory only so that identical (config, seed) runs
    produce byte-identical log files.
    """

    def __init__(self, config_hash: str, path: str | Path | None = None):
        self.config_hash = config_hash
        self.records: list[TrainLogRecord] = []
        self._fh = open(path, "w") if path else None

    def append(self, step: int, epoch: int, split: str, breakdown: LossBreakdown) -> None:
        if self.records and step < self.records[-1].step:
            raise ValueError("step counter must be monotone")
        rec = TrainLogRecord(step=step, epoch=epoch, split=split, losses=breakdown,
                             config_hash=self.config_hash, wall_time=time.monotonic())
        self.records.append(rec)
        if self._fh:
            self._fh.write(rec.to_json() + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None

    def loss_sequence(self, split: str = "train") -> list[float]:
        return [r.losses.total for r in self.records if r.split == split]


def _make_optimizer(cfg: TrainConfig, parameters):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(parameters, lr=cfg.learning_rate,
                                betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    return torch.optim.SGD(parameters, lr=cfg.learning_rate, momentum=cfg.momentum)


def _params_from_module(spec: ModelSpec, module: torch.nn.Module) -> ModelParams:
    tensors = {name: p.detach().cpu().numpy().astype(np.float32).copy()
               for name, p in module.named_parameters()}
    return ModelParams(spec, tensors)


def _load_into_module(module: torch.nn.Module, params: ModelParams) -> None:
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(torch.from_numpy(params.tensors[name]))


def _effective_spec(spec: ModelSpec, cfg: TrainConfig) -> ModelSpec:
    if cfg.dropout_rate is None or cfg.dropout_rate == spec.dropout_rate:
        return spec
    return replace(spec, dropout_rate=cfg.dropout_rate)


class _Trainer:
    """Shared machinery for the two training modes."""

    def __init__(self, dataset: list[AnnotatedSample], spec: ModelSpec,
                 cfg: TrainConfig, teacher: ModelParams | None,
                 val: list[AnnotatedSample]):
        if not dataset:
            raise ValueError("empty training dataset")
        self.cfg = cfg
        self.spec = _effective_spec(spec, cfg)
        shape = tuple(self.spec.input_size)
        for s in dataset + list(val):
            if s.image.shape != shape:
                raise ValueError(f"sample shape {s.image.shape} != spec {shape}")
        self.train_set = dataset
        self.val_set = list(val)
        self.module = build_model(self.spec)
        _load_into_module(self.module, nets.init_params(self.spec, cfg.seed))
        self.labels = [torch.from_numpy(
            losses.smooth_labels(s.keypoints, shape, cfg.sigma)) for s in dataset]
        self.val_labels = [torch.from_numpy(
            losses.smooth_labels(s.keypoints, shape, cfg.sigma)) for s in self.val_set]
        self.images = [torch.from_numpy(s.image) for s in dataset]
        self.val_images = [torch.from_numpy(s.image) for s in self.val_set]
        self.rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator()
        self.gen.manual_seed(cfg.seed)

        self.teacher_module = None
        self.teacher_out: list[tuple[torch.Tensor, torch.Tensor]] = []
        self.teacher_val_out: list[tuple[torch.Tensor, torch.Tensor]] = []
        if teacher is not None:
            if teacher.spec.kind != "teacher":
                raise ValueError("distillation teacher checkpoint must be a teacher model")
            if tuple(teacher.spec.input_size) != shape:
                raise ValueError("teacher/student input sizes differ")
            self.teacher_module = build_model(teacher.spec)
            _load_into_module(self.teacher_module, teacher)
            with torch.no_grad():
                # teacher runs in eval mode (dropout off); outputs are static
                self.teacher_out = [self._run(self.teacher_module, img, train=False)
                                    for img in self.images]
                self.teacher_val_out = [self._run(self.teacher_module, img, train=False)
                                        for img in self.val_images]

    def _run(self, module, img: torch.Tensor, train: bool):
        heat, desc = module(img.reshape(1, 1, *img.shape), train=train,
                            generator=self.gen if train else None)
        return heat[0, 0], desc[0]

    def step_losses(self, idx: int, step: int) -> tuple[torch.Tensor, LossBreakdown]:
        cfg = self.cfg
        img = self.images[idx]
        shape = tuple(img.shape)
        hmat = sample_homography(cfg.augment, shape,
                                 seed=cfg.seed * 1000003 + step)
        img_aug = losses.warp_tensor(img, hmat).detach()

        heat, desc = self._run(self.module, img, train=True)
        heat_aug, desc_aug = self._run(self.module, img_aug, train=True)

        clf = losses.l_clf(heat, self.labels[idx], eps=cfg.dice_eps)
        geo = losses.l_geo(heat, heat_aug, hmat, eps=cfg.dice_eps)

        kps = nms_extract(heat.detach().numpy(), cfg.nms_threshold,
                          cfg.nms_window, cfg.nms_max_keypoints)
        triplet_seed = cfg.seed * 7919 + step
        des = des_rkd = None
        if len(kps) >= 2:
            try:
                des = losses.triplet_descriptor_loss(
                    desc, desc_aug, kps.xy, hmat, cfg.margin_m, seed=triplet_seed)
            except ValueError:
                des = None
        clf_rkd = None
        if self.teacher_module is not None:
            t_heat, t_desc = self.teacher_out[idx]
            clf_rkd = losses.l_clf_rkd(heat, t_heat, eps=cfg.dice_eps)
            if len(kps) >= 2:
                try:
                    des_rkd = losses.l_des_rkd(desc, t_desc, kps.xy,
                                               cfg.margin_m, seed=triplet_seed)
                except ValueError:
                    des_rkd = None
        return losses.combine_losses(clf, clf_rkd, geo, des, des_rkd,
                                     weights=cfg.loss_weights)

    def val_losses(self, idx: int) -> LossBreakdown:
        with torch.no_grad():
            heat, desc = self._run(self.module, self.val_images[idx], train=False)
            clf = losses.l_clf(heat, self.val_labels[idx], eps=self.cfg.dice_eps)
            clf_rkd = None
            if self.teacher_module is not None:
                clf_rkd = losses.l_clf_rkd(heat, self.teacher_val_out[idx][0],
                                           eps=self.cfg.dice_eps)
            _, breakdown = losses.combine_losses(clf, clf_rkd,
                                                 weights=self.cfg.loss_weights)
        return breakdown

    def run(self) -> tuple[ModelParams, TrainLog]:
        cfg = self.cfg
        log = TrainLog(cfg.config_hash(), cfg.log_path)
        optimizer = _make_optimizer(cfg, self.module.parameters())
        last_good = _params_from_module(self.spec, self.module)
        step = 0
        try:
            for epoch in range(cfg.epochs):
                order = self.rng.permutation(len(self.train_set))
                for start in range(0, len(order), cfg.batch_size):
                    batch = order[start:start + cfg.batch_size]
                    optimizer.zero_grad()
                    total = None
                    parts = []
                    for idx in batch:
                        t, b = self.step_losses(int(idx), step)
                        total = t if total is None else total + t
                        parts.append(b)
                    breakdown = _mean_breakdown(parts)
                    total = total / len(batch)
                    if not torch.isfinite(total):
                        raise TrainingDivergedError(
                            f"non-finite loss at step {step}", last_good, log)
                    total.backward()
                    if cfg.grad_clip_norm > 0:
                        torch.nn.utils.clip_grad_norm_(self.module.parameters(),
                                                       cfg.grad_clip_norm)
                    optimizer.step()
                    log.append(step, epoch, "train", breakdown)
                    snapshot = _params_from_module(self.spec, self.module)
                    # a step can blow up the weights while its loss was still
                    # finite; never let such a state become "last good"
                    if all(np.isfinite(a).all() for a in snapshot.tensors.values()):
                        last_good = snapshot
                    step += 1
                for v in range(len(self.val_set)):
                    log.append(step, epoch, "val", self.val_losses(v))
                if (cfg.checkpoint_every and cfg.checkpoint_dir
                        and (epoch + 1) % cfg.checkpoint_every == 0):
                    save_checkpoint(last_good,
                                    Path(cfg.checkpoint_dir) / f"epoch_{epoch + 1:04d}")
        finally:
            log.close()
        return _params_from_module(self.spec, self.module), log


def _mean_breakdown(parts: list[LossBreakdown]) -> LossBreakdown:
    n = len(parts)
    return LossBreakdown(
        l_clf=sum(p.l_clf for p in parts) / n,
        l_clf_rkd=sum(p.l_clf_rkd for p in parts) / n,
        l_geo=sum(p.l_geo for p in parts) / n,
        l_des=sum(p.l_des for p in parts) / n,
        l_des_rkd=sum(p.l_des_rkd for p in parts) / n,
    )


def train_teacher(dataset: list[AnnotatedSample], spec: ModelSpec, cfg: TrainConfig,
                  val: list[AnnotatedSample] = ()) -> tuple[ModelParams, TrainLog]:
    """Supervised training of the CNN teacher (no distillation terms)."""
    if spec.kind != "teacher":
        raise ValueError("train_teacher requires a teacher spec")
    trainer = _Trainer(dataset, spec, cfg, teacher=None, val=list(val))
    return trainer.run()


def train_student_rkd(dataset: list[AnnotatedSample], teacher: ModelParams,
                      student_spec: ModelSpec, cfg: TrainConfig,
                      val: list[AnnotatedSample] = ()) -> tuple[ModelParams, TrainLog]:
    """Reverse knowledge distillation: the attention student additionally
    matches the frozen CNN teacher's heatmap and descriptor field."""
    if student_spec.kind != "student":
        raise ValueError("train_student_rkd requires a student spec")
    trainer = _Trainer(dataset, student_spec, cfg, teacher=teacher, val=list(val))
    return trainer.run()


def train_student_scratch(dataset: list[AnnotatedSample], student_spec: ModelSpec,
                          cfg: TrainConfig, val: list[AnnotatedSample] = ()
                          ) -> tuple[ModelParams, TrainLog]:
    """Student trained like the teacher (no distillation), for comparisons."""
    if student_spec.kind != "student":
        raise ValueError("train_student_scratch requires a student spec")
    trainer = _Trainer(dataset, student_spec, cfg, teacher=None, val=list(val))
    return trainer.run()


def load_samples(manifest_path: str | Path, preprocess_cfg=None
                 ) -> tuple[list[AnnotatedSample], list[AnnotatedSample]]:
    """Load a training manifest: {"train": [{image, annotations}...], "val": [...]}.

    Images are read and preprocessed; annotation keypoints ride along
    unchanged (preprocessing is purely photometric).
    """
    from . import data as data_mod
    from . import imagecore
    path = Path(manifest_path)
    doc = json.loads(path.read_text())
    base = path.parent

    def build(entries):
        out = []
        for e in entries:
            raw = imagecore.read_image(base / e["image"])
            gray = imagecore.preprocess(raw, preprocess_cfg)
            ann = data_mod.load_annotations(base / e["annotations"])
            out.append(AnnotatedSample(image=gray, keypoints=ann.keypoint_array()))
        return out

    return build(doc.get("train", [])), build(doc.get("val", []))
