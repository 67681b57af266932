"""Line-oriented configuration files: ``section.key = value`` with ``#``
comments.

The format round-trips a :class:`~capsroute.model.ModelConfig` (sections
``model`` and ``layer.<name>``) and carries optional ``train`` and
``augment`` sections consumed by the CLI. Unknown keys are errors, so typos
fail before any computation starts.
"""

from __future__ import annotations

from .data import AugmentConfig
from .model import ConfigError, LayerSpec, ModelConfig, validate

MODEL_KEYS = {
    "height", "width", "loss", "m_pos", "m_neg", "lambda_neg", "rec_scale",
    "threshold", "decoder_widths", "layers", "preset",
}
LAYER_KEYS = {"kind", "kernel", "stride", "types", "dims", "iterations",
              "routing", "skip"}
TRAIN_KEYS = {
    "lr", "plateau_window", "decay_factor", "decay_mode", "patience",
    "batch_size", "max_iterations", "val_every",
}
AUGMENT_KEYS = {
    "probability", "scale_min", "scale_max", "shift_fraction",
    "rotate_degrees", "elastic_alpha_fraction", "elastic_sigma", "noise_std",
}


def parse_config_text(text):
    """Flat {"section.key": "value"} dict; malformed lines raise ConfigError."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} lacks a section prefix")
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def _validate_keys(entries):
    layer_names = set()
    if "model.layers" in entries:
        layer_names = {n.strip() for n in entries["model.layers"].split(",") if n.strip()}
    for key in entries:
        parts = key.split(".")
        section = parts[0]
        if section == "model":
            if len(parts) != 2 or parts[1] not in MODEL_KEYS:
                raise ConfigError(f"unknown key {key!r}")
        elif section == "layer":
            if len(parts) != 3 or parts[2] not in LAYER_KEYS:
                raise ConfigError(f"unknown key {key!r}")
            if parts[1] not in layer_names:
                raise ConfigError(
                    f"key {key!r} names a layer absent from model.layers"
                )
        elif section == "train":
            if len(parts) != 2 or parts[1] not in TRAIN_KEYS:
                raise ConfigError(f"unknown key {key!r}")
        elif section == "augment":
            if len(parts) != 2 or parts[1] not in AUGMENT_KEYS:
                raise ConfigError(f"unknown key {key!r}")
        else:
            raise ConfigError(f"unknown section {section!r} in key {key!r}")


def _get(entries, key, default=None, required=False):
    if key in entries:
        return entries[key]
    if required:
        raise ConfigError(f"missing required key {key!r}")
    return default


def _to_int(key, value):
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


def _to_float(key, value):
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None


def _to_flag(key, value):
    if value in ("on", "true", "1", "yes"):
        return True
    if value in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected on/off, got {value!r}")


def model_config_from_entries(entries):
    _validate_keys(entries)
    height = _to_int("model.height", _get(entries, "model.height", required=True))
    width = _to_int("model.width", _get(entries, "model.width", required=True))
    names = [n.strip() for n in _get(entries, "model.layers", required=True).split(",")
             if n.strip()]
    if not names:
        raise ConfigError("model.layers lists no layers")
    layers = []
    for name in names:
        prefix = f"layer.{name}."
        kind = _get(entries, prefix + "kind", required=True)
        spec = LayerSpec(
            name=name,
            kind=kind,
            kernel=_to_int(prefix + "kernel", _get(entries, prefix + "kernel", "5")),
            stride=_to_int(prefix + "stride", _get(entries, prefix + "stride", "1")),
            out_types=_to_int(prefix + "types", _get(entries, prefix + "types", "1")),
            out_dim=_to_int(prefix + "dims", _get(entries, prefix + "dims", "16")),
            iterations=_to_int(prefix + "iterations",
                               _get(entries, prefix + "iterations", "3")),
            routing_enabled=_to_flag(prefix + "routing",
                                     _get(entries, prefix + "routing", "on")),
            skip_source=_get(entries, prefix + "skip"),
        )
        layers.append(spec)
    rec_scale = _get(entries, "model.rec_scale", "auto")
    if rec_scale != "auto":
        rec_scale = _to_float("model.rec_scale", rec_scale)
    widths_raw = _get(entries, "model.decoder_widths", "64,128")
    try:
        widths = tuple(int(v) for v in widths_raw.split(","))
    except ValueError:
        raise ConfigError(
            f"model.decoder_widths: expected 'w1,w2', got {widths_raw!r}"
        ) from None
    cfg = ModelConfig(
        height=height,
        width=width,
        layers=layers,
        loss=_get(entries, "model.loss", "weighted_bce"),
        m_pos=_to_float("model.m_pos", _get(entries, "model.m_pos", "0.9")),
        m_neg=_to_float("model.m_neg", _get(entries, "model.m_neg", "0.1")),
        lambda_neg=_to_float("model.lambda_neg",
                             _get(entries, "model.lambda_neg", "0.5")),
        rec_scale=rec_scale,
        threshold=_to_float("model.threshold",
                            _get(entries, "model.threshold", "0.5")),
        decoder_widths=widths,
        preset=_get(entries, "model.preset"),
    )
    validate(cfg)
    return cfg


def model_config_from_text(text):
    return model_config_from_entries(parse_config_text(text))


def config_to_text(cfg):
    lines = [
        f"model.height = {cfg.height}",
        f"model.width = {cfg.width}",
        f"model.loss = {cfg.loss}",
        f"model.m_pos = {cfg.m_pos}",
        f"model.m_neg = {cfg.m_neg}",
        f"model.lambda_neg = {cfg.lambda_neg}",
        f"model.rec_scale = {cfg.rec_scale}",
        f"model.threshold = {cfg.threshold}",
        "model.decoder_widths = " + ",".join(str(v) for v in cfg.decoder_widths),
    ]
    if cfg.preset:
        lines.append(f"model.preset = {cfg.preset}")
    lines.append("model.layers = " + ",".join(spec.name for spec in cfg.layers))
    for spec in cfg.layers:
        p = f"layer.{spec.name}."
        lines.append(f"{p}kind = {spec.kind}")
        lines.append(f"{p}kernel = {spec.kernel}")
        lines.append(f"{p}stride = {spec.stride}")
        lines.append(f"{p}types = {spec.out_types}")
        lines.append(f"{p}dims = {spec.out_dim}")
        lines.append(f"{p}iterations = {spec.iterations}")
        lines.append(f"{p}routing = {'on' if spec.routing_enabled else 'off'}")
        if spec.skip_source:
            lines.append(f"{p}skip = {spec.skip_source}")
    return "\n".join(lines) + "\n"


def schedule_kwargs_from_entries(entries):
    """Typed keyword arguments for TrainSchedule from the train section."""
    out = {}
    ints = {"plateau_window", "patience", "batch_size", "max_iterations",
            "val_every"}
    for key in TRAIN_KEYS:
        full = f"train.{key}"
        if full not in entries:
            continue
        if key == "decay_mode":
            if entries[full] not in ("multiply", "relative"):
                raise ConfigError(
                    f"{full}: expected multiply/relative, got {entries[full]!r}"
                )
            out[key] = entries[full]
        elif key in ints:
            out[key] = _to_int(full, entries[full])
        else:
            out[key] = _to_float(full, entries[full])
    return out


def augment_config_from_entries(entries):
    kw = {}
    mapping = {
        "probability": "probability",
        "shift_fraction": "shift_fraction",
        "rotate_degrees": "rotate_degrees",
        "elastic_alpha_fraction": "elastic_alpha_fraction",
        "elastic_sigma": "elastic_sigma",
        "noise_std": "noise_std",
    }
    for key, attr in mapping.items():
        full = f"augment.{key}"
        if full in entries:
            kw[attr] = _to_float(full, entries[full])
    lo = entries.get("augment.scale_min")
    hi = entries.get("augment.scale_max")
    if lo is not None or hi is not None:
        kw["scale_range"] = (
            _to_float("augment.scale_min", lo) if lo is not None else 0.9,
            _to_float("augment.scale_max", hi) if hi is not None else 1.1,
        )
    return AugmentConfig(**kw) if kw else AugmentConfig()
