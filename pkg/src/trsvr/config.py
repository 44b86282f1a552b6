"""Experiment configuration files: INI sections ``[problem]``, ``[optimizer]``, ``[theory]``, ``[output]``.

Every key is declared in :data:`SCHEMA`; unknown sections or keys are
rejected with the dotted key name. Blank values mean "unset" for optional
keys.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Union

import numpy as np

from .core import ConfigurationError
from .drivers import OPTIMIZERS, RunConfig
from .estimators import SAMPLING_MODES
from .problems import PROBLEM_KINDS, SYNTH_KINDS, Dataset, make_problem, parse_libsvm, synth_data

OUTPUT_ENV = "TRSVR_OUTPUT_DIR"


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def conv(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return conv


def _float_list(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _z(text: str):
    return "auto" if text.strip() == "auto" else float(text)


@dataclass(frozen=True)
class Key:
    conv: Callable[[str], Any]
    default: Any
    optional: bool = False


SCHEMA: dict[str, dict[str, Key]] = {
    "problem": {
        "kind": Key(_choice(*PROBLEM_KINDS), "least_squares"),
        "reg": Key(float, 0.0),
        "source": Key(_choice("synthetic", "libsvm"), "synthetic"),
        "path": Key(str, None, optional=True),
        "feature_dim": Key(int, None, optional=True),
        "data": Key(_choice(*SYNTH_KINDS), "gaussian_ls"),
        "N": Key(int, 50),
        "d": Key(int, 10),
        "noise": Key(float, 0.0),
        "scale": Key(float, 1.0),
        "data_seed": Key(int, 0),
        "x0": Key(_float_list, None, optional=True),
    },
    "optimizer": {
        "name": Key(_choice(*OPTIMIZERS), "trsvr"),
        "b": Key(int, 1),
        "S": Key(int, 10),
        "K_max": Key(int, 10),
        "alpha": Key(float, 0.1),
        "eta1": Key(float, 10.0),
        "eta2": Key(float, 0.1),
        "delta0": Key(float, 1.0),
        "lagged_radius": Key(_bool, False),
        "radius_policy": Key(_choice("proportional", "clipped"), "proportional"),
        "hessian_mode": Key(str, "identity_scaled"),
        "hessian_scale": Key(float, 1.0),
        "hessian_cap": Key(float, None, optional=True),
        "subproblem": Key(_choice("steihaug", "cauchy"), "steihaug"),
        "cg_tol": Key(float, 1e-8),
        "cg_max_iter": Key(int, None, optional=True),
        "sampling": Key(_choice(*SAMPLING_MODES), "without_replacement"),
        "seed": Key(int, 0),
        "grad_tol": Key(float, None, optional=True),
        "max_evals": Key(int, None, optional=True),
        "diag_every": Key(int, 1),
        "strict": Key(_bool, False),
    },
    "theory": {
        "L_grad": Key(float, None, optional=True),
        "L_H": Key(float, None, optional=True),
        "K_H": Key(float, None, optional=True),
        "L": Key(float, None, optional=True),
        "sigma_g": Key(float, None, optional=True),
        "f_inf": Key(float, None, optional=True),
        "f0": Key(float, None, optional=True),
        "z": Key(_z, "auto"),
        "seeds": Key(int, 20),
        "pairs": Key(int, 50),
        "trials": Key(int, 0),
        "states": Key(int, 10),
        "replays": Key(int, 1000),
    },
    "output": {
        "dir": Key(str, None, optional=True),
        "metrics": Key(str, "metrics.csv"),
        "report": Key(str, "report.txt"),
        "index": Key(str, "index.txt"),
    },
}


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, Any]]
    present: set = field(default_factory=set)  # sections that appeared in the file
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, dotted: str):
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.values == other.values and self.present == other.present

    @classmethod
    def parse(cls, text: str, overrides: Optional[list[str]] = None, base_dir: Union[str, Path, None] = None):
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",),
                                           comment_prefixes=("#", ";"), empty_lines_in_values=False)
        parser.optionxform = str  # keys are case-sensitive (K_max, L_grad)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config: {exc}") from None
        for item in overrides or []:
            dotted, sep, raw = item.partition("=")
            section, dot, key = dotted.strip().partition(".")
            if not sep or not dot:
                raise ConfigurationError(f"override {item!r} must look like section.key=value", key=dotted)
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, key, raw.strip())

        values = {name: {k: spec.default for k, spec in keys.items()} for name, keys in SCHEMA.items()}
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigurationError(f"unknown section [{section}]", key=section)
            for key, raw in parser.items(section):
                dotted = f"{section}.{key}"
                spec = SCHEMA[section].get(key)
                if spec is None:
                    raise ConfigurationError(f"unknown key {dotted}", key=dotted)
                raw = raw.strip()
                if raw == "":
                    if not spec.optional:
                        raise ConfigurationError(f"{dotted} must not be blank", key=dotted)
                    values[section][key] = None
                    continue
                try:
                    values[section][key] = spec.conv(raw)
                except ValueError as exc:
                    raise ConfigurationError(f"{dotted}: invalid value {raw!r} ({exc})", key=dotted) from None
        return cls(values, set(parser.sections()), Path(base_dir) if base_dir else Path.cwd())

    @classmethod
    def load(cls, path: Union[str, Path], overrides: Optional[list[str]] = None):
        path = Path(path)
        return cls.parse(path.read_text(), overrides, base_dir=path.parent)

    def serialize(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section in SCHEMA:
            if section not in self.present:
                continue
            parser.add_section(section)
            for key, value in self.values[section].items():
                parser.set(section, key, _format(value))
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    # -- builders --------------------------------------------------------

    def dataset(self) -> Dataset:
        p = self.values["problem"]
        if p["source"] == "libsvm":
            if not p["path"]:
                raise ConfigurationError("problem.path is required for source = libsvm", key="problem.path")
            path = Path(p["path"])
            if not path.is_absolute():
                path = self.base_dir / path
            with open(path) as fh:
                return parse_libsvm(fh, p["feature_dim"])
        return synth_data(p["data_seed"], p["N"], p["d"], p["data"], p["noise"], p["scale"])

    def problem(self):
        p = self.values["problem"]
        try:
            return make_problem(p["kind"], self.dataset(), p["reg"])
        except ConfigurationError:
            raise
        except ValueError as exc:
            raise ConfigurationError(f"problem: {exc}", key="problem") from None

    def run_config(self, problem=None) -> RunConfig:
        o = dict(self.values["optimizer"])
        name = o.pop("name")
        x0 = self.values["problem"]["x0"]
        if x0 is not None and problem is not None:
            x0 = np.full(problem.d, x0[0]) if len(x0) == 1 else np.array(x0)
        cfg = RunConfig(optimizer=name, x0=None if x0 is None else np.asarray(x0, float), **o)
        if problem is not None:
            try:
                cfg.validate(problem)
            except ConfigurationError as exc:
                key = {"x0": "problem.x0", "optimizer": "optimizer.name"}.get(exc.key, f"optimizer.{exc.key}")
                raise ConfigurationError(f"{key}: {str(exc).split(': ', 1)[-1]}", key=key) from None
        return cfg

    def output_dir(self, override: Optional[str] = None) -> Path:
        chosen = override or self.values["output"]["dir"] or os.environ.get(OUTPUT_ENV) or "."
        path = Path(chosen)
        if not path.is_absolute() and override is None and self.values["output"]["dir"]:
            path = self.base_dir / path
        return path
