"""Plain-text run configuration: ``key = value`` lines with dotted keys."""
from __future__ import annotations

from pathlib import Path


class ConfigFileError(ValueError):
    pass


def parse_dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in str(text).lower().replace(",", "x").split("x"))
    except ValueError:
        raise ConfigFileError(f"bad dims {text!r}, expected HxWxD") from None
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigFileError(f"bad dims {text!r}, expected HxWxD")
    return dims


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigFileError(f"bad boolean {text!r}")


def _opt_int(text):
    return None if str(text).strip().lower() in ("", "none") else int(text)


# key -> (parser, default)
SCHEMA = {
    "model.levels": (int, 4),
    "model.dim": (int, 32),
    "model.heads": (int, 2),
    "model.num_classes": (int, 6),
    "model.variant": (str, "A"),
    "model.scale_energies": (_bool, True),
    "model.expand_radius": (int, 1),
    "data.dims": (parse_dims, (32, 32, 8)),
    "data.train": (str, ""),
    "data.keep_prob": (float, 0.7),
    "train.epochs": (int, 50),
    "train.iterations": (_opt_int, None),
    "train.base_lr": (float, 0.006),
    "train.power": (float, 0.9),
    "train.optimizer": (str, "sgd"),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 0.0),
    "train.batch_size": (int, 1),
    "train.seed": (int, 0),
    "out.checkpoint": (str, "model.swac"),
    "out.log": (str, "metrics.csv"),
    "run.threads": (int, 1),
}


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return "x".join(str(i) for i in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return "none" if v is None else str(v)


class RunConfig:
    """Resolved configuration: schema defaults < config file < overrides."""

    def __init__(self, values: dict | None = None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value, origin: str = "override") -> None:
        if key not in SCHEMA:
            raise ConfigFileError(f"{origin}: unknown config key {key!r}")
        parser, _ = SCHEMA[key]
        if isinstance(value, str):
            try:
                value = parser(value)
            except (ValueError, ConfigFileError) as exc:
                raise ConfigFileError(f"{origin}: bad value for {key}: {exc}") from None
        self.values[key] = value

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigFileError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            cfg.set(key, value, origin=f"{source}:{lineno}")
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigFileError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text, str(path))

    def dump(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in sorted(self.values))

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}
