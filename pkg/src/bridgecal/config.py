"""Plain key=value run configuration.

One key per line, ``key = value``; blank lines and lines starting with
``#`` are ignored. Unknown keys are rejected so typos cannot silently
fall back to defaults. Every command writes the resolved configuration
next to its outputs.

Conditional default: ``lambda_eta`` falls back to 0.001 when the
conservative coefficient variant is selected and the key is not given
explicitly (the fixed-strength setting keeps it at 0).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

BEHAVIOR_VARIANTS = ("ben", "raw_cooc", "ease", "none")
SCOPE_VARIANTS = ("candidate", "global", "none")
COEFF_VARIANTS = ("fixed", "conservative")
BAND_MODES = ("svd", "equal", "gram", "dct", "random")

ABLATION_VARIANTS = {
    # name -> config overrides applied on top of the base run
    "bridge": {},
    "no_behavior": {"behavior": "none"},
    "no_topk": {"scope": "none"},
    "global": {"scope": "global"},
    "raw_cooc": {"behavior": "raw_cooc"},
    "ease": {"behavior": "ease"},
    "conservative": {"coeff": "conservative"},
    "no_item_graph": {"drop_item_graph": True},
    "no_image": {"drop_image": True},
    "no_text": {"drop_text": True},
    "no_content": {"drop_content": True},
    "no_ib": {"drop_ib": True},
    "no_freq": {"drop_freq": True},
    "no_freq_objectives": {"drop_ib": True, "drop_freq": True},
    "equal_cap": {"band_mode": "equal"},
    "gram": {"band_mode": "gram"},
    "dct": {"band_mode": "dct"},
    "random_ortho": {"band_mode": "random"},
}


@dataclass
class Config:
    # data paths
    interactions: str = ""
    visual_features: str = ""
    text_features: str = ""
    artifact_dir: str = "artifacts"
    # model shape
    embed_dim: int = 64
    num_layers: int = 2
    m_bands: int = 3
    band_mode: str = "svd"
    knn_k: int = 10
    mix_visual: float = 0.1
    mix_text: float = 0.9
    # behavior evidence
    behavior: str = "ben"
    k_b: int = 1000
    behavior_eps: float = 1e-6
    ease_l2: float = 100.0
    # calibration
    scope: str = "candidate"
    coeff: str = "fixed"
    lambda_b: float = 0.4
    lambda_b_grid: tuple[float, ...] = (0.1, 0.2, 0.4, 0.6, 0.8)
    k_c_train: int = 200
    k_c_eval: int = 200
    # training
    lr: float = 1e-4
    l2_reg: float = 1e-3
    lambda_base: float = 0.2
    lambda_ib: float = 1.0
    lambda_freq: float = 0.001
    lambda_eta: float = 0.0
    tau_eta: float = 0.5
    alpha_ib: float = 1.0
    mu_ib: float = 1.0
    phi_plus: float = 0.2
    tau_disc: float = 0.2
    norm_eps: float = 1e-8
    epochs: int = 300
    batch_size: int = 2048
    seed: int = 2020
    # ablation switches
    drop_image: bool = False
    drop_text: bool = False
    drop_item_graph: bool = False
    drop_ib: bool = False
    drop_freq: bool = False
    drop_content: bool = False
    # evaluation
    mask_valid_at_test: bool = False
    diagnostics_split: str = "test"
    # sweep / ablate
    sweep_retrain: bool = False
    ablate_variants: tuple[str, ...] = ("bridge", "no_behavior", "global")

    def channels(self) -> tuple[str, ...]:
        if self.drop_content:
            return ("id",)
        out = ["id"]
        if not self.drop_image:
            out.append("v")
        if not self.drop_text:
            out.append("t")
        return tuple(out)

    def use_item_graph(self) -> bool:
        return not self.drop_item_graph and len(self.channels()) > 1

    def validate(self) -> None:
        if self.behavior not in BEHAVIOR_VARIANTS:
            raise ConfigError(f"behavior must be one of {BEHAVIOR_VARIANTS}")
        if self.scope not in SCOPE_VARIANTS:
            raise ConfigError(f"scope must be one of {SCOPE_VARIANTS}")
        if self.coeff not in COEFF_VARIANTS:
            raise ConfigError(f"coeff must be one of {COEFF_VARIANTS}")
        if self.band_mode not in BAND_MODES:
            raise ConfigError(f"band_mode must be one of {BAND_MODES}")
        if self.diagnostics_split not in ("valid", "test"):
            raise ConfigError("diagnostics_split must be valid or test")
        for name in self.ablate_variants:
            if name not in ABLATION_VARIANTS:
                raise ConfigError(
                    f"unknown ablation variant {name!r}; known: {sorted(ABLATION_VARIANTS)}"
                )
        for key in (
            "lr", "l2_reg", "lambda_base", "lambda_ib", "lambda_freq",
            "lambda_eta", "tau_eta", "alpha_ib", "mu_ib", "phi_plus",
            "tau_disc", "norm_eps", "lambda_b", "behavior_eps", "ease_l2",
        ):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be nonnegative")
        for key in ("embed_dim", "num_layers", "m_bands", "knn_k", "k_b",
                    "k_c_train", "k_c_eval", "batch_size"):
            if getattr(self, key) < 1 and not (key == "num_layers" and getattr(self, key) == 0):
                raise ConfigError(f"{key} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_BOOL_VALUES = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_value(name: str, raw: str, kind) -> object:
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in _BOOL_VALUES:
                raise ValueError(raw)
            return _BOOL_VALUES[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == tuple[float, ...]:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if kind == tuple[str, ...]:
            return tuple(v.strip() for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: cannot parse value {raw!r}") from exc
    raise ConfigError(f"config key {name!r} has unsupported type")


def parse_config_text(text: str, source: str = "<config>") -> Config:
    field_map = {f.name: f.type for f in fields(Config)}
    type_map = {
        "str": str, "int": int, "float": float, "bool": bool,
        "tuple[float, ...]": tuple[float, ...],
        "tuple[str, ...]": tuple[str, ...],
    }
    raw_values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in field_map:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in raw_values:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        kind = field_map[key]
        if isinstance(kind, str):
            kind = type_map[kind]
        raw_values[key] = _parse_value(key, value, kind)
    cfg = Config(**raw_values)
    # the conservative control defaults its gate-target weight on
    if cfg.coeff == "conservative" and "lambda_eta" not in raw_values:
        cfg.lambda_eta = 0.001
    cfg.validate()
    return cfg


def parse_config(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))


def write_resolved(cfg: Config, path) -> None:
    Path(path).write_text(cfg.to_text(), encoding="utf-8")
