"""Flat key=value run configuration.

One text file drives everything: model wiring, training toggles, loss
weights, scene generation, and evaluation. Unknown keys are rejected;
every key has a documented default. `resolved_text()` re-parses to an
identical config, and every CLI command prints it before doing work.
"""

from dataclasses import dataclass

from .data import SHAPE_KINDS, TEXTURE_FAMILIES, TRAJECTORIES, SceneSpec
from .ict import SCHEMES
from .losses import LossWeights
from .sanet import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(s):
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_list(s):
    return tuple(int(v) for v in s.split(","))


def _parse_str_list(s):
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _choice(options):
    def parse(s):
        if s not in options:
            raise ConfigError(f"expected one of {options}, got {s!r}")
        return s

    return parse


@dataclass
class Key:
    default: object
    parse: object
    doc: str


KEYS = {
    # model
    "model.channels": Key((16, 32, 64, 128), _parse_int_list, "encoder channel plan, 4 extents"),
    "model.use_ffm": Key(True, _parse_bool, "gated feature fusion in the decoder"),
    "model.use_refiner": Key(True, _parse_bool, "second decoding pass (needs ffm)"),
    "model.use_dam": Key(True, _parse_bool, "detail attention branch (needs refiner)"),
    # training
    "train.epochs": Key(10, int, "total training epochs"),
    "train.lr": Key(3e-3, float, "peak learning rate, decays linearly to 0"),
    "train.batch_labeled": Key(4, int, "labeled images per step"),
    "train.batch_unlabeled": Key(4, int, "unlabeled triplets per step"),
    "train.ema_decay": Key(0.999, float, "teacher EMA decay"),
    "train.k": Key(1, int, "temporal interpolation half-window"),
    "train.lambda_t": Key(0.5, float, "temporal blend coefficient"),
    "train.lcs_window": Key(3, int, "correlation-shuffle window (odd)"),
    "train.scheme": Key("si", _choice(SCHEMES), "spatial interpolation scheme"),
    "train.use_sic": Key(True, _parse_bool, "spatial interpolation consistency"),
    "train.use_tic": Key(True, _parse_bool, "temporal interpolation consistency"),
    "train.use_sc": Key(True, _parse_bool, "scale consistency"),
    "train.sic_all_frames": Key(True, _parse_bool, "spatial loss on all 3 triplet frames"),
    "train.ppa_window": Key(7, int, "boundary-weight window of the supervised loss"),
    "train.seed": Key(0, int, "run seed (init, shuffles, coefficients)"),
    # loss weights
    "loss.beta_max": Key(1.0, float, "ramp-up ceiling for consistency weight"),
    "loss.t_max": Key(10, int, "epochs until the ramp reaches beta_max"),
    "loss.eta_sic": Key(1.0, float, "spatial consistency weight"),
    "loss.eta_tic": Key(1.0, float, "temporal consistency weight"),
    "loss.eta_sc": Key(1.0, float, "scale consistency weight"),
    # data generation
    "data.resolution": Key(64, int, "frame extent (multiple of 16)"),
    "data.labeled_count": Key(200, int, "labeled stills to generate"),
    "data.video_count": Key(12, int, "videos to generate"),
    "data.frame_count": Key(24, int, "frames per video"),
    "data.image_texture": Key("blobs", _choice(TEXTURE_FAMILIES), "image-domain background family"),
    "data.video_texture": Key("stripes", _choice(TEXTURE_FAMILIES), "video-domain background family"),
    "data.image_shapes": Key(SHAPE_KINDS, _parse_str_list, "image-domain occluder kinds"),
    "data.video_shapes": Key(SHAPE_KINDS, _parse_str_list, "video-domain occluder kinds"),
    "data.size_min": Key(6.0, float, "occluder size range, low"),
    "data.size_max": Key(14.0, float, "occluder size range, high"),
    "data.darkening_min": Key(0.25, float, "shadow darkening factor, low"),
    "data.darkening_max": Key(0.6, float, "shadow darkening factor, high"),
    "data.light_min": Key(8.0, float, "shadow offset magnitude, low"),
    "data.light_max": Key(16.0, float, "shadow offset magnitude, high"),
    "data.speed_min": Key(0.5, float, "occluder speed px/frame, low"),
    "data.speed_max": Key(2.5, float, "occluder speed px/frame, high"),
    "data.trajectory": Key("mixed", _choice(TRAJECTORIES), "motion kind for videos"),
    # evaluation
    "eval.threshold": Key(0.5, float, "binarization threshold"),
    "eval.beta2": Key(0.3, float, "beta^2 of the F-measure"),
    "eval.domain": Key("labeled", _choice(("labeled", "unlabeled")), "normalization statistics used at inference"),
    "eval.strict": Key(False, _parse_bool, "nonzero exit when single-class frames were flagged"),
}


class RunConfig:
    def __init__(self, values=None):
        self.values = {k: spec.default for k, spec in KEYS.items()}
        if values:
            self.values.update(values)

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key, raw):
        if key not in KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        self.values[key] = KEYS[key].parse(raw) if isinstance(raw, str) else raw

    @classmethod
    def parse(cls, text):
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, _, raw = stripped.partition("=")
            try:
                cfg.set(key.strip(), raw.strip())
            except ConfigError as e:
                raise ConfigError(f"line {lineno}: {e}") from None
        return cfg

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls.parse(f.read())

    def resolved_text(self):
        lines = [f"{k} = {_fmt(self.values[k])}" for k in KEYS]
        return "\n".join(lines) + "\n"

    # -- views over module configs ----------------------------------------

    def model_config(self):
        return ModelConfig(
            channels=self["model.channels"],
            use_ffm=self["model.use_ffm"],
            use_refiner=self["model.use_refiner"],
            use_dam=self["model.use_dam"],
        )

    def loss_weights(self):
        return LossWeights(
            beta_max=self["loss.beta_max"],
            t_max=self["loss.t_max"],
            eta_sic=self["loss.eta_sic"],
            eta_tic=self["loss.eta_tic"],
            eta_sc=self["loss.eta_sc"],
        )

    def train_config(self):
        return TrainConfig(
            epochs=self["train.epochs"],
            lr=self["train.lr"],
            batch_labeled=self["train.batch_labeled"],
            batch_unlabeled=self["train.batch_unlabeled"],
            ema_decay=self["train.ema_decay"],
            k=self["train.k"],
            lam_t=self["train.lambda_t"],
            lcs_window=self["train.lcs_window"],
            scheme=self["train.scheme"],
            use_sic=self["train.use_sic"],
            use_tic=self["train.use_tic"],
            use_sc=self["train.use_sc"],
            sic_all_frames=self["train.sic_all_frames"],
            ppa_window=self["train.ppa_window"],
            seed=self["train.seed"],
            weights=self.loss_weights(),
            model=self.model_config(),
        )

    def _scene_spec(self, texture, shapes):
        return SceneSpec(
            resolution=self["data.resolution"],
            frame_count=self["data.frame_count"],
            texture_family=texture,
            shapes=shapes,
            size_range=(self["data.size_min"], self["data.size_max"]),
            darkening_range=(self["data.darkening_min"], self["data.darkening_max"]),
            light_range=(self["data.light_min"], self["data.light_max"]),
            speed_range=(self["data.speed_min"], self["data.speed_max"]),
            trajectory=self["data.trajectory"],
        )

    def image_scene_spec(self):
        return self._scene_spec(self["data.image_texture"], self["data.image_shapes"])

    def video_scene_spec(self):
        return self._scene_spec(self["data.video_texture"], self["data.video_shapes"])

    def validate(self):
        """Run every module-level validator before any work starts."""
        self.train_config().validate()
        self.image_scene_spec().validate()
        self.video_scene_spec().validate()
        if self["data.labeled_count"] < 1:
            raise ConfigError("data.labeled_count must be positive")
        if self["data.video_count"] < 0:
            raise ConfigError("data.video_count must be non-negative")
        if not 0.0 < self["eval.threshold"] < 1.0:
            raise ConfigError("eval.threshold must lie strictly inside (0, 1)")
        return self
