"""Experiment configuration files.

One ``key = value`` per line, ``#`` starts a comment, dotted keys group
settings (``decoder.alpha = 5``). Lists are comma separated. Every key is
checked against :data:`SCHEMA`; unknown keys and unparsable values are
reported with their line number.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

from .classifier import ClassifierConfig
from .data import SynthSpec
from .decoder import DecoderConfig
from .errors import ConfigurationError
from .scoring import DetectorConfig


class ConfigParseError(ConfigurationError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None):
        self.source = source
        self.line = line
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


# ----------------------------------------------------------------------
# value parsers


def _int(text: str) -> int:
    return int(text, 0)


def _float(text: str) -> float:
    # fractions such as 1/5 are accepted for ratios
    return float(Fraction(text)) if "/" in text else float(text)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(conv):
    def parse(text: str) -> tuple:
        items = [t.strip() for t in text.split(",") if t.strip()]
        if not items:
            raise ValueError("empty list")
        return tuple(conv(t) for t in items)

    return parse


def _blocks(text: str) -> tuple:
    """``16x3x2, 32x3x2`` -> ((channels, kernel, stride), ...)."""
    out = []
    for item in _list(str)(text):
        parts = item.lower().split("x")
        if len(parts) != 3:
            raise ValueError(f"conv block {item!r} is not CHANNELSxKERNELxSTRIDE")
        out.append(tuple(int(p) for p in parts))
    return tuple(out)


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    return parse


SPLIT_KEYS = ("in_train", "in_test", "out_train", "out_test", "out_pool")

SCHEMA = {
    "seed": _int,
    "out": str,
    "data.source": _choice("synth", "files"),
    "data.format": _choice("hood_native", "cifar_binary"),
    "data.num_classes": _int,
    **{f"data.{k}": str for k in SPLIT_KEYS},
    "synth.num_classes": _int,
    "synth.image_size": _int,
    "synth.noise": _float,
    "synth.brightness_jitter": _float,
    "synth.shade": _float,
    "synth.family.in": str,
    "synth.family.out_train": str,
    "synth.family.out_test": str,
    **{f"synth.count.{k}": _int for k in SPLIT_KEYS},
    "classifier.conv_blocks": _blocks,
    "classifier.feature_dim": _int,
    "classifier.epochs": _int,
    "classifier.batch_size": _int,
    "classifier.lr": _float,
    "decoder.alpha": _float,
    "decoder.epochs": _int,
    "decoder.lr": _float,
    "decoder.beta1": _float,
    "decoder.beta2": _float,
    "decoder.batch_size": _int,
    "decoder.ood_ratio": _float,
    "decoder.proj_channels": _int,
    "decoder.block_channels": _list(int),
    "detector.threshold": _float,
    "metrics.tpr_target": _float,
    "metrics.energy_temperature": _float,
    "ablate.sizes": _list(int),
    "lighting.brightness": _list(float),
    "lighting.contrast": _list(float),
    "visualize.count": _int,
}


@dataclass
class Entry:
    raw: str
    source: str
    line: int | None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Entry]:
    entries: dict[str, Entry] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigParseError(f"expected 'key = value', got {body!r}", source, lineno)
        key, value = (s.strip() for s in body.split("=", 1))
        if not key:
            raise ConfigParseError("missing key before '='", source, lineno)
        if key not in SCHEMA:
            raise ConfigParseError(f"unknown key {key!r}", source, lineno)
        if key in entries:
            raise ConfigParseError(f"duplicate key {key!r} (first set on line {entries[key].line})", source, lineno)
        entries[key] = Entry(value, source, lineno)
    return entries


def parse_config_file(path) -> dict[str, Entry]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigParseError("config file not found", str(path)) from None
    return parse_config_text(text, str(path))


def parse_override(item: str) -> tuple[str, Entry]:
    if "=" not in item:
        raise ConfigParseError(f"expected key=value, got {item!r}", "--set")
    key, value = (s.strip() for s in item.split("=", 1))
    if key not in SCHEMA:
        raise ConfigParseError(f"unknown key {key!r}", "--set")
    return key, Entry(value, "--set", None)


# ----------------------------------------------------------------------
# typed configuration


@dataclass
class DataConfig:
    source: str = "synth"
    format: str = "hood_native"
    num_classes: int | None = None
    paths: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "run"
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    tpr_target: float = 0.95
    energy_temperature: float = 1.0
    ablate_sizes: tuple = (50, 100, 500, 1000, 2000)
    lighting_brightness: tuple = (2.0, 2.5)
    lighting_contrast: tuple = (0.5, 0.1)
    visualize_count: int = 8
    values: dict = field(default_factory=dict, repr=False)

    def snapshot(self) -> list[tuple[str, str]]:
        """Resolved settings as sorted (key, text) pairs for the manifest."""
        return sorted(self.values.items())


def _convert(entries: dict[str, Entry]) -> dict:
    values = {}
    for key, e in entries.items():
        try:
            values[key] = SCHEMA[key](e.raw)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigParseError(f"bad value for {key!r}: {exc}", e.source, e.line) from None
    return values


def build_config(entries: dict[str, Entry], overrides=(), seed: int | None = None,
                 out: str | None = None) -> ExperimentConfig:
    """Merge file entries, ``--set`` overrides and flags into an :class:`ExperimentConfig`."""
    merged = dict(entries)
    for item in overrides:
        key, e = parse_override(item)
        merged[key] = e
    v = _convert(merged)
    if seed is not None:
        v["seed"] = int(seed)
    if out is not None:
        v["out"] = str(out)

    def pick(prefix: str) -> dict:
        return {k[len(prefix):]: val for k, val in v.items() if k.startswith(prefix)}

    try:
        gseed = v.get("seed", 0)
        if gseed < 0:
            raise ConfigurationError("seed must be >= 0")
        data = DataConfig(
            source=v.get("data.source", "synth"),
            format=v.get("data.format", "hood_native"),
            num_classes=v.get("data.num_classes"),
            paths={k: v[f"data.{k}"] for k in SPLIT_KEYS if f"data.{k}" in v},
        )
        sp = pick("synth.")
        base = SynthSpec()
        families = dict(base.families)
        families.update({k[len("family."):]: val for k, val in sp.items() if k.startswith("family.")})
        counts = dict(base.counts)
        counts.update({k[len("count."):]: val for k, val in sp.items() if k.startswith("count.")})
        synth_kw = {k: val for k, val in sp.items() if "." not in k}
        synth = SynthSpec(families=families, counts=counts, **synth_kw)

        if data.source == "synth":
            num_classes, side = synth.num_classes, synth.image_size
        else:
            missing = [k for k in ("in_train", "in_test", "out_train", "out_test") if k not in data.paths]
            if missing:
                raise ConfigurationError(f"data.source = files needs data.{missing[0]}")
            if data.num_classes is None:
                raise ConfigurationError("data.source = files needs data.num_classes")
            num_classes = data.num_classes
            side = 32 if data.format == "cifar_binary" else v.get("synth.image_size", base.image_size)
        clf_kw = pick("classifier.")
        classifier = ClassifierConfig(width=side, height=side, num_classes=num_classes, seed=gseed, **clf_kw)
        decoder = DecoderConfig(seed=gseed, **pick("decoder."))
        detector = DetectorConfig(v.get("detector.threshold", DetectorConfig().threshold))
        cfg = ExperimentConfig(
            seed=gseed,
            out=v.get("out", "run"),
            data=data,
            synth=synth,
            classifier=classifier,
            decoder=decoder,
            detector=detector,
            tpr_target=v.get("metrics.tpr_target", 0.95),
            energy_temperature=v.get("metrics.energy_temperature", 1.0),
            ablate_sizes=v.get("ablate.sizes", (50, 100, 500, 1000, 2000)),
            lighting_brightness=v.get("lighting.brightness", (2.0, 2.5)),
            lighting_contrast=v.get("lighting.contrast", (0.5, 0.1)),
            visualize_count=v.get("visualize.count", 8),
        )
    except (ConfigurationError, ValueError) as exc:
        if isinstance(exc, ConfigParseError):
            raise
        raise ConfigParseError(str(exc), "config") from None
    if not 0 < cfg.tpr_target <= 1:
        raise ConfigParseError("metrics.tpr_target must lie in (0, 1]", "config")
    if any(s <= 0 for s in cfg.ablate_sizes):
        raise ConfigParseError("ablate.sizes must be positive", "config")
    cfg.values = _resolved(cfg)
    return cfg


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join("x".join(str(x) for x in v) if isinstance(v, tuple) else _fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _resolved(cfg: ExperimentConfig) -> dict[str, str]:
    out = {"seed": str(cfg.seed), "data.source": cfg.data.source, "data.format": cfg.data.format}
    for k, p in sorted(cfg.data.paths.items()):
        out[f"data.{k}"] = p
    for f in fields(cfg.synth):
        val = getattr(cfg.synth, f.name)
        if isinstance(val, dict):
            for k, x in val.items():
                out[f"synth.{'family' if f.name == 'families' else 'count'}.{k}"] = str(x)
        else:
            out[f"synth.{f.name}"] = _fmt(val)
    for prefix, obj in (("classifier", cfg.classifier), ("decoder", cfg.decoder), ("detector", cfg.detector)):
        for f in fields(obj):
            out[f"{prefix}.{f.name}"] = _fmt(getattr(obj, f.name))
    out["metrics.tpr_target"] = _fmt(cfg.tpr_target)
    out["metrics.energy_temperature"] = _fmt(cfg.energy_temperature)
    out["ablate.sizes"] = _fmt(cfg.ablate_sizes)
    out["lighting.brightness"] = _fmt(cfg.lighting_brightness)
    out["lighting.contrast"] = _fmt(cfg.lighting_contrast)
    out["visualize.count"] = str(cfg.visualize_count)
    return out


def load_config(path=None, overrides=(), seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    entries = parse_config_file(path) if path is not None else {}
    return build_config(entries, overrides, seed=seed, out=out)
