"""Flat key-value configuration shared by every CLI command.

Config files hold `key = value` lines ('#' comments allowed). Every key is
validated against the registry below; unknown keys are errors. Command-line
`--set key=value` overrides win over the file.
"""

from __future__ import annotations

from pathlib import Path

from .geometry import AugmentParams
from .imagecore import PreprocessConfig
from .losses import LossWeights


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


# key -> (type converter, default)
KEY_REGISTRY: dict[str, tuple] = {
    "seed": (int, 0),
    # preprocessing
    "clahe_clip_limit": (float, 2.0),
    "clahe_tile_rows": (int, 8),
    "clahe_tile_cols": (int, 8),
    "gamma": (float, 1.2),
    # losses
    "sigma": (float, 1.5),
    "margin_m": (float, 1.0),
    "dice_epsilon": (float, 1e-6),
    "loss_weights.clf": (float, 1.0),
    "loss_weights.clf_rkd": (float, 1.0),
    "loss_weights.geo": (float, 1.0),
    "loss_weights.des": (float, 1.0),
    "loss_weights.des_rkd": (float, 1.0),
    # keypoints / matching
    "detection_threshold": (float, 0.3),
    "nms_window": (float, 10.0),
    "max_keypoints": (int, 1024),
    "ratio_threshold": (float, 0.9),
    "mutual": (_parse_bool, True),
    # registration
    "ransac_threshold": (float, 3.0),
    "ransac_iterations": (int, 2000),
    "auc_t_max": (float, 25.0),
    "auc_step": (float, 1.0),
    # model
    "base_channels": (int, 0),        # 0 -> kind default (teacher 16 / student 32)
    "descriptor_dim": (int, 32),
    "lk_block": (_parse_bool, False),
    "window_size": (int, 4),
    "dropout_rate": (float, 0.0),
    "input_h": (int, 0),              # 0 -> infer from the training data
    "input_w": (int, 0),
    # training
    "epochs": (int, 5),
    "batch_size": (int, 1),
    "learning_rate": (float, 1e-3),
    "optimizer": (str, "adam"),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "momentum": (float, 0.9),
    "checkpoint_every": (int, 0),
    "train_max_keypoints": (int, 256),
    # augmentation
    "max_rotation": (float, 10.0),
    "max_translation": (float, 0.05),
    "scale_min": (float, 0.95),
    "scale_max": (float, 1.05),
    "max_perspective": (float, 0.0),
    # synthetic data
    "synth_images": (int, 8),
    "synth_vessels": (int, 6),
    "synth_branches": (int, 10),
    "synth_pairs": (int, 6),
    "synth_identity_pairs": (int, 2),
    "synth_noise": (float, 0.01),
    "synth_size": (int, 128),
    "vessel_width_min": (float, 1.5),
    "vessel_width_max": (float, 3.0),
    "pair_max_rotation": (float, 5.0),
    "pair_max_translation": (float, 0.03),
    "pair_scale_min": (float, 0.97),
    "pair_scale_max": (float, 1.03),
    "pair_max_perspective": (float, 0.0),
}


def parse_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


class GlobalConfig:
    """Validated, typed configuration with factory methods per subsystem."""

    def __init__(self, values: dict | None = None):
        self.values = {k: default for k, (_, default) in KEY_REGISTRY.items()}
        for key, raw in (values or {}).items():
            if key not in KEY_REGISTRY:
                raise ConfigError(f"unknown config key {key!r}")
            conv = KEY_REGISTRY[key][0]
            try:
                self.values[key] = conv(raw) if isinstance(raw, str) else raw
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from exc

    @staticmethod
    def load(config_path: str | Path | None = None,
             overrides: dict[str, str] | None = None) -> "GlobalConfig":
        merged: dict[str, str] = {}
        if config_path is not None:
            merged.update(parse_config_file(config_path))
        merged.update(overrides or {})
        return GlobalConfig(merged)

    def __getitem__(self, key: str):
        return self.values[key]

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(
            clahe_clip_limit=self["clahe_clip_limit"],
            clahe_tile_grid=(self["clahe_tile_rows"], self["clahe_tile_cols"]),
            gamma=self["gamma"],
        )

    def augment_params(self) -> AugmentParams:
        return AugmentParams(
            max_rotation=self["max_rotation"],
            max_translation=self["max_translation"],
            scale_range=(self["scale_min"], self["scale_max"]),
            max_perspective=self["max_perspective"],
        )

    def pair_augment_params(self) -> AugmentParams:
        return AugmentParams(
            max_rotation=self["pair_max_rotation"],
            max_translation=self["pair_max_translation"],
            scale_range=(self["pair_scale_min"], self["pair_scale_max"]),
            max_perspective=self["pair_max_perspective"],
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            clf=self["loss_weights.clf"],
            clf_rkd=self["loss_weights.clf_rkd"],
            geo=self["loss_weights.geo"],
            des=self["loss_weights.des"],
            des_rkd=self["loss_weights.des_rkd"],
        )

    def model_spec(self, kind: str, fallback_input: tuple[int, int] = (128, 128)):
        from .nets import ModelSpec
        base = self["base_channels"] or (16 if kind == "teacher" else 32)
        return ModelSpec(
            kind=kind,
            base_channels=base,
            descriptor_dim=self["descriptor_dim"],
            lk_block=self["lk_block"],
            window_size=self["window_size"],
            dropout_rate=self["dropout_rate"],
            input_size=(self["input_h"] or fallback_input[0],
                        self["input_w"] or fallback_input[1]),
        )

    def registration_config(self):
        from .registration import RegistrationConfig
        return RegistrationConfig(
            preprocess=self.preprocess_config(),
            detection_threshold=self["detection_threshold"],
            nms_window=self["nms_window"],
            max_keypoints=self["max_keypoints"],
            ratio_threshold=self["ratio_threshold"],
            mutual=self["mutual"],
            ransac_threshold=self["ransac_threshold"],
            ransac_iterations=self["ransac_iterations"],
            seed=self["seed"],
            auc_t_max=self["auc_t_max"],
            auc_step=self["auc_step"],
        )

    def train_config(self, checkpoint_dir=None, log_path=None):
        from .training import TrainConfig
        return TrainConfig(
            epochs=self["epochs"],
            batch_size=self["batch_size"],
            learning_rate=self["learning_rate"],
            optimizer=self["optimizer"],
            beta1=self["beta1"],
            beta2=self["beta2"],
            adam_eps=self["adam_eps"],
            momentum=self["momentum"],
            seed=self["seed"],
            sigma=self["sigma"],
            margin_m=self["margin_m"],
            dropout_rate=self["dropout_rate"] or None,
            augment=self.augment_params(),
            loss_weights=self.loss_weights(),
            nms_threshold=self["detection_threshold"],
            nms_window=self["nms_window"],
            nms_max_keypoints=self["train_max_keypoints"],
            checkpoint_every=self["checkpoint_every"],
            checkpoint_dir=checkpoint_dir,
            log_path=log_path,
            dice_eps=self["dice_epsilon"],
        )

    def synth_config(self):
        from .data import SynthConfig
        return SynthConfig(
            seed=self["seed"],
            image_size=(self["synth_size"], self["synth_size"]),
            n_images=self["synth_images"],
            n_vessels=self["synth_vessels"],
            n_branches=self["synth_branches"],
            vessel_width=(self["vessel_width_min"], self["vessel_width_max"]),
            noise=self["synth_noise"],
            n_pairs=self["synth_pairs"],
            n_identity_pairs=self["synth_identity_pairs"],
            pair_augment=self.pair_augment_params(),
        )
