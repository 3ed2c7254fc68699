"""Solver configuration: presets, config-file parsing, provenance echo.

Config files are flat ``key = value`` text with one section per concern
(INI syntax). CLI flags override file values; presets override the loss
selection and weights. The effective config is echoed into every output
directory so runs can be reproduced exactly.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, replace

from .losses import LossWeights
from .optimizer import OptimizerConfig

# Loss-weight ratios (voxel : mask : regularization) for the named setups.
# dice / hybrid share ratios; the edt variant compensates the smaller
# magnitude of distance-mask mismatches with a larger mask weight.
PRESETS: dict[str, dict] = {
    "cardiac-dice": dict(
        weights=LossWeights(1.0, 0.1, 0.01), similarity="mse", mask_loss="dice"
    ),
    "cardiac-edt": dict(
        weights=LossWeights(1.0, 10.0, 0.01), similarity="mse", mask_loss="edt"
    ),
    "cardiac-hybrid": dict(
        weights=LossWeights(1.0, 0.1, 0.01), similarity="mse",
        mask_loss="edt_and_dice",
    ),
    "abdomen-dice": dict(
        weights=LossWeights(1.0, 1.0, 0.1), similarity="lncc", mask_loss="dice"
    ),
    "abdomen-edt": dict(
        weights=LossWeights(1.0, 100.0, 0.1), similarity="lncc", mask_loss="edt"
    ),
    "abdomen-hybrid": dict(
        weights=LossWeights(1.0, 1.0, 0.1), similarity="lncc",
        mask_loss="edt_and_dice",
    ),
}


@dataclass(frozen=True)
class RunConfig:
    """Optimizer settings plus pipeline-level knobs."""

    optimizer: OptimizerConfig
    crop_margin: int | None = None
    threads: int | None = None


def apply_preset(cfg: OptimizerConfig, name: str) -> OptimizerConfig:
    if name not in PRESETS:
        known = ", ".join(sorted(PRESETS))
        raise ValueError(f"unknown preset {name!r} (known: {known})")
    return replace(cfg, **PRESETS[name])


_OPT_KEYS = {
    "iterations": int,
    "learning_rate": float,
    "adam_beta1": float,
    "adam_beta2": float,
    "adam_eps": float,
    "similarity": str,
    "mask_loss": str,
    "lncc_window": int,
    "edt_loss_form": str,
    "integration_steps": int,
    "seed": int,
}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse an INI config; unknown sections or keys are rejected."""
    base = base or RunConfig(OptimizerConfig())
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValueError(f"bad config: {exc}") from None

    opt_kwargs: dict = {}
    crop_margin = base.crop_margin
    threads = base.threads
    for section in parser.sections():
        if section == "optimizer":
            for key, value in parser.items(section):
                if key == "levels":
                    opt_kwargs["levels"] = tuple(
                        int(t) for t in value.replace(",", " ").split()
                    )
                elif key in _OPT_KEYS:
                    opt_kwargs[key] = _OPT_KEYS[key](value)
                else:
                    raise ValueError(f"unknown [optimizer] key {key!r}")
        elif section == "loss":
            gammas = {}
            for key, value in parser.items(section):
                if key not in ("gamma0", "gamma1", "gamma2"):
                    raise ValueError(f"unknown [loss] key {key!r}")
                gammas[key] = float(value)
            w = base.optimizer.weights
            opt_kwargs["weights"] = LossWeights(
                gammas.get("gamma0", w.gamma0),
                gammas.get("gamma1", w.gamma1),
                gammas.get("gamma2", w.gamma2),
            )
        elif section == "pipeline":
            for key, value in parser.items(section):
                if key == "crop_margin":
                    crop_margin = int(value) if value.strip() else None
                elif key == "threads":
                    threads = int(value) if value.strip() else None
                else:
                    raise ValueError(f"unknown [pipeline] key {key!r}")
        else:
            raise ValueError(f"unknown config section [{section}]")

    optimizer = replace(base.optimizer, **opt_kwargs) if opt_kwargs else base.optimizer
    return RunConfig(optimizer, crop_margin, threads)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


def format_config(run: RunConfig) -> str:
    """The full effective configuration, re-parseable by :func:`parse_config`."""
    o = run.optimizer
    buf = io.StringIO()
    buf.write("[optimizer]\n")
    buf.write(f"iterations = {o.iterations}\n")
    buf.write(f"learning_rate = {o.learning_rate!r}\n")
    buf.write(f"adam_beta1 = {o.adam_beta1!r}\n")
    buf.write(f"adam_beta2 = {o.adam_beta2!r}\n")
    buf.write(f"adam_eps = {o.adam_eps!r}\n")
    buf.write(f"similarity = {o.similarity}\n")
    buf.write(f"mask_loss = {o.mask_loss}\n")
    buf.write(f"lncc_window = {o.lncc_window}\n")
    buf.write(f"edt_loss_form = {o.edt_loss_form}\n")
    buf.write(f"integration_steps = {o.integration_steps}\n")
    buf.write("levels = " + ",".join(str(f) for f in o.levels) + "\n")
    buf.write(f"seed = {o.seed}\n")
    buf.write("\n[loss]\n")
    buf.write(f"gamma0 = {o.weights.gamma0!r}\n")
    buf.write(f"gamma1 = {o.weights.gamma1!r}\n")
    buf.write(f"gamma2 = {o.weights.gamma2!r}\n")
    buf.write("\n[pipeline]\n")
    buf.write(f"crop_margin = {'' if run.crop_margin is None else run.crop_margin}\n")
    buf.write(f"threads = {'' if run.threads is None else run.threads}\n")
    return buf.getvalue()
