"""Plain-text run configuration.

Grammar: one ``section.key = value`` per line, ``#`` starts a comment, later
assignments override earlier ones, and unknown keys are an error. Values are
parsed according to the type of the default (``none`` clears optional keys).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

from .denoiser import DenoiserSpec
from .deq import DEQConfig
from .classical import TVConfig
from .sampling import MaskDistribution
from .tomo import Geometry
from .training import NoiseConfig, TrainConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


# (type, default); type "opt-int" etc. accept "none"
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "geometry": {
        "n_pixels": ("int", 32),
        "n_angles_total": ("int", 60),
        "n_detectors": ("opt-int", None),
    },
    "data": {
        "kind": ("str", "random-ellipses"),
        "n_train": ("int", 24),
        "n_val": ("int", 8),
        "n_min": ("int", 3),
        "n_max": ("int", 6),
        "seed": ("int", 0),
    },
    "sampling": {
        "kind": ("str", "uniform"),
        "s": ("int", 12),
        "pair_mode": ("str", "iid"),
    },
    "noise": {
        "relative_level": ("float", 0.01),
        "seed": ("int", 0),
    },
    "deq": {
        "alpha": ("float", 0.1),
        "gamma": ("gamma", "auto"),
        "gamma_scale": ("float", 1.0),
        "s_ref": ("opt-int", None),
        "fp_tol": ("float", 1e-3),
        "fp_max_iter": ("int", 100),
        "anderson": ("bool", True),
        "anderson_depth": ("int", 5),
        "anderson_ridge": ("float", 1e-8),
        "anderson_damping": ("float", 1.0),
        "anderson_safeguard": ("bool", True),
        "init": ("str", "zero"),
    },
    "denoiser": {
        "n_scales": ("int", 2),
        "channels": ("int", 16),
        "kernel_size": ("int", 3),
        "activation": ("str", "leaky-relu"),
        "leaky_slope": ("float", 0.1),
        "use_skip": ("bool", True),
        "sn_power_iters": ("int", 1),
    },
    "train": {
        "loss_kind": ("list", ["self"]),
        # 300 desk epochs instead of 2000: ten times the TrainConfig learning rate
        "lr": ("float", 2e-3),
        "batch_size": ("int", 8),
        "n_epochs": ("int", 300),
        "averaging": ("opt-str", None),
        "ema_decay": ("float", 0.99),
        "val_s": ("opt-int", None),
        "sn_init_iters": ("int", 100),
        "checkpoint_every": ("int", 0),
    },
    "tv": {
        "lambda": ("lambda", "auto"),
        "max_iters": ("int", 300),
        "tol": ("float", 1e-6),
        "step_rule": ("str", "adaptive"),
        "tau": ("opt-float", None),
        "inner_iters": ("int", 20),
    },
    "verify": {
        "thm1_seeds": ("int", 10),
        "thm1_images": ("int", 3),
        "mc_reps": ("int", 20),
        "prop2_draws": ("int", 1000000),
    },
    "run": {
        "seed": ("int", 0),
        "workers": ("int", 1),
    },
}


def _parse(kind: str, text: str, where: str):
    t = text.strip()
    low = t.lower()
    try:
        if kind.startswith("opt-"):
            if low in ("none", ""):
                return None
            return _parse(kind[4:], t, where)
        if kind == "int":
            return int(t)
        if kind == "float":
            return float(t)
        if kind == "bool":
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(t)
        if kind == "str":
            return t
        if kind == "list":
            return [v.strip() for v in t.split(",") if v.strip()]
        if kind in ("gamma", "lambda"):
            return low if low.startswith("auto") else float(t)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text.strip()!r} as {kind}") from None
    raise ConfigError(f"{where}: unsupported type {kind}")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({sec: {k: copy.deepcopy(d) for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()})

    def get(self, dotted: str):
        sec, key = _split(dotted, "get")
        return self.values[sec][key]

    def set(self, dotted: str, raw: str, where: str = "override") -> None:
        sec, key = _split(dotted, where)
        self.values[sec][key] = _parse(SCHEMA[sec][key][0], raw, where)

    def update_text(self, text: str, source: str = "<config>") -> None:
        for lineno, line in enumerate(text.splitlines(), start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            where = f"{source}:{lineno}"
            if "=" not in body:
                raise ConfigError(f"{where}: expected 'section.key = value'")
            key, value = body.split("=", 1)
            self.set(key.strip(), value, where)

    def to_text(self) -> str:
        lines = []
        for sec, keys in SCHEMA.items():
            for key in keys:
                lines.append(f"{sec}.{key} = {_format(self.values[sec][key])}")
            lines.append("")
        return "\n".join(lines)

    def write_resolved(self, out_dir) -> Path:
        path = Path(out_dir) / "config.resolved.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    # -- typed views ----------------------------------------------------

    def geometry(self) -> Geometry:
        v = self.values["geometry"]
        return Geometry(v["n_pixels"], v["n_angles_total"], v["n_detectors"])

    def sampling(self) -> MaskDistribution:
        v = self.values["sampling"]
        return MaskDistribution(v["kind"], v["s"], self.values["geometry"]["n_angles_total"])

    def noise(self) -> NoiseConfig:
        v = self.values["noise"]
        return NoiseConfig(v["relative_level"], v["seed"])

    def deq(self) -> DEQConfig:
        v = dict(self.values["deq"])
        if v["s_ref"] is None:
            v["s_ref"] = self.validation_s
        return DEQConfig(**v)

    def denoiser(self) -> DenoiserSpec:
        return DenoiserSpec(image_side=self.values["geometry"]["n_pixels"], **self.values["denoiser"])

    @property
    def validation_s(self) -> int:
        val = self.values["train"]["val_s"]
        return val if val is not None else self.values["sampling"]["s"]

    def train(self, loss_kind: str | None = None) -> TrainConfig:
        v = self.values["train"]
        kind = loss_kind if loss_kind is not None else v["loss_kind"][0]
        return TrainConfig(loss_kind=kind, lr=v["lr"], batch_size=v["batch_size"], n_epochs=v["n_epochs"],
                           averaging=v["averaging"], ema_decay=v["ema_decay"], deq=self.deq(),
                           denoiser=self.denoiser(), sampling=self.sampling(),
                           pair_mode=self.values["sampling"]["pair_mode"], val_s=v["val_s"],
                           noise=self.noise(), seed=self.values["run"]["seed"],
                           sn_init_iters=v["sn_init_iters"], workers=self.values["run"]["workers"])

    def tv(self, lam: float | None = None) -> TVConfig:
        v = self.values["tv"]
        if lam is None:
            if isinstance(v["lambda"], str):
                raise ConfigError("tv.lambda is 'auto'; resolve it by grid search first")
            lam = v["lambda"]
        return TVConfig(lam, v["max_iters"], v["tol"], v["step_rule"], v["tau"], v["inner_iters"])


def _split(dotted: str, where: str) -> tuple[str, str]:
    if "." not in dotted:
        raise ConfigError(f"{where}: key {dotted!r} must look like section.key")
    sec, key = dotted.split(".", 1)
    if sec not in SCHEMA:
        raise ConfigError(f"{where}: unknown section {sec!r}")
    if key not in SCHEMA[sec]:
        raise ConfigError(f"{where}: unknown key {dotted!r}")
    return sec, key


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the file (if any), then ``section.key=value`` overrides."""
    cfg = RunConfig.defaults()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        cfg.update_text(p.read_text(), str(p))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value, f"override {item!r}")
    return cfg
