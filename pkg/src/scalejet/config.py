"""Declarative run configuration: flat `key = value` text files whose field
names mirror the architecture and training tables, so presets double as
documentation.  Lists are comma separated; `#` starts a comment."""

from __future__ import annotations

import os
from dataclasses import dataclass

from .net import MultiNetConfig, ScaleChannelConfig, channel_initial_scales
from .train import TrainConfig

_PRESET_DIR = os.path.join(os.path.dirname(__file__), "presets")


def parse_config_text(text: str) -> dict:
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = _parse_value(value)
    return out


def _parse_scalar(token: str):
    low = token.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(token)
        except ValueError:
            continue
    return token


def _parse_value(value: str):
    if value == "":
        return []
    if "," in value:
        return [_parse_scalar(tok.strip()) for tok in value.split(",") if tok.strip()]
    return _parse_scalar(value)


def load_config_file(path: str) -> dict:
    with open(path) as fh:
        return parse_config_text(fh.read())


def preset_path(name: str) -> str:
    return os.path.join(_PRESET_DIR, f"{name}.cfg")


def available_presets() -> list[str]:
    return sorted(
        os.path.splitext(f)[0] for f in os.listdir(_PRESET_DIR) if f.endswith(".cfg")
    )


@dataclass(frozen=True)
class RunConfig:
    """Everything one training/evaluation run needs."""

    net: MultiNetConfig
    train: TrainConfig
    raw: dict

    @property
    def pretrain_stage_configs(self) -> tuple[MultiNetConfig, TrainConfig, TrainConfig]:
        """Single-channel stage-1 config plus the two stage TrainConfigs."""
        from dataclasses import replace

        raw = self.raw
        single = MultiNetConfig(
            channel_sigmas=(float(raw.get("pretrain_sigma", 1.0)),),
            channel=self.net.channel,
            scale_pooling=self.net.scale_pooling,
        )
        stage1 = replace(
            self.train,
            epochs=int(raw.get("pretrain_stage1_epochs", self.train.epochs // 2)),
            batch_size=int(raw.get("pretrain_stage1_batch", self.train.batch_size)),
            lr_init=float(raw.get("pretrain_stage1_lr", 0.01)),
        )
        stage2 = replace(
            self.train,
            epochs=int(raw.get("pretrain_stage2_epochs", self.train.epochs - stage1.epochs)),
            lr_init=float(raw.get("pretrain_stage2_lr", 0.005)),
        )
        return single, stage1, stage2


def _as_tuple(v) -> tuple:
    return tuple(v) if isinstance(v, list) else (v,)


def build_run_config(raw: dict, seed: int | None = None) -> RunConfig:
    channel = ScaleChannelConfig(
        sigma0=float(raw.get("sigma_base", 1.0)),
        relative_ratio=float(raw["relative_scale_ratio"]),
        feature_widths=tuple(int(w) for w in raw["feature_widths"]),
        num_layers=int(raw.get("num_layers", 18)),
        jet_order=int(raw.get("jet_order", 2)),
        spatial_selection=str(raw.get("spatial_selection", "centre")),
        include_zero_order=bool(raw.get("include_zero_order", False)),
        depthwise_blocks=tuple(int(k) for k in _as_tuple(raw.get("depthwise_blocks", []))),
        epsilon=float(raw.get("truncation_epsilon", 0.005)),
        boundary=str(raw.get("boundary", "mirror")),
    )
    count = int(raw.get("num_scale_channels", 1))
    if count > 1:
        sigmas = channel_initial_scales(
            channel.sigma0, float(raw.get("channel_ratio", 2**0.5)), count
        )
    else:
        sigmas = [channel.sigma0]
    net = MultiNetConfig(
        channel_sigmas=tuple(sigmas),
        channel=channel,
        scale_pooling=str(raw.get("scale_pooling", "max")),
    )
    train = TrainConfig(
        epochs=int(raw.get("epochs", 1)),
        batch_size=int(raw.get("batch_size", 32)),
        lr_init=float(raw.get("lr_init", 0.01)),
        weight_decay=float(raw.get("weight_decay", 0.025)),
        label_smoothing=float(raw.get("label_smoothing", 0.1)),
        channel_dropout_q=float(raw.get("channel_dropout_q", 0.0)),
        warmup_epochs=int(raw.get("warmup_epochs", 0)),
        lr_floor=float(raw.get("lr_floor", 1e-5)),
        seed=int(raw.get("seed", 0)) if seed is None else seed,
        hflip=bool(raw.get("hflip", True)),
        crop_pad=int(raw.get("crop_pad", 0)),
        color_jitter=bool(raw.get("color_jitter", False)),
    )
    return RunConfig(net=net, train=train, raw=raw)
