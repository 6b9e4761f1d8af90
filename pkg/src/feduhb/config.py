"""Experiment configuration: a closed JSON schema with defaults and validation.

Every key is declared in ``SCHEMA``. Unknown keys are rejected with a
spelling suggestion; missing keys take the defaults of the standard setup
(20 clients, 5 local epochs, 40 rounds, learning rate 0.005, batch 64,
momentum 0.9, stop multiplier 0.6, two target clients).
"""

from __future__ import annotations

import copy
import difflib
import hashlib
import json
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

from .datasets import TriggerSpec
from .errors import ConfigError
from .fl_engine import FLConfig
from .models import KINDS, ModelSpec
from .unlearning import METHODS, UnlearnConfig

STAGES = ("train", "unlearn", "attack", "verify")
DATASETS = ("mnist", "quadratic")


@dataclass(frozen=True)
class Field:
    kind: str  # int | float | bool | str | int_list | str_list | optional_int | optional_float | optional_str
    default: Any
    check: Optional[Callable[[Any], bool]] = None
    constraint: str = ""


def _f(kind, default, check=None, constraint=""):
    return Field(kind, default, check, constraint)


_pos = (lambda v: v > 0, "must be positive")
_pos_or_none = (lambda v: v is None or v > 0, "must be positive or null")
_ge1 = (lambda v: v >= 1, "must be >= 1")
_ge0 = (lambda v: v >= 0, "must be >= 0")
_unit_open = (lambda v: 0 < v < 1, "must lie in (0,1)")

SCHEMA: Dict[str, Any] = {
    "seed": _f("int", 0, *_ge0),
    "output_dir": _f("str", "runs/default"),
    "stages": _f("str_list", list(STAGES), lambda v: len(v) > 0 and all(s in STAGES for s in v),
                 f"must be a non-empty subset of {list(STAGES)}"),
    "dataset": {
        "name": _f("str", "mnist", lambda v: v in DATASETS, f"must be one of {list(DATASETS)}"),
        "data_dir": _f("optional_str", None),
        "train_size": _f("optional_int", None, *_pos_or_none),
        "test_size": _f("optional_int", None, *_pos_or_none),
        "dim": _f("int", 20, *_ge1),
        "mu": _f("float", 0.1, *_pos),
        "L": _f("float", 10.0, *_pos),
        "heterogeneity": _f("float", 0.5, *_ge0),
    },
    "model": {
        "kind": _f("str", "logistic", lambda v: v in KINDS, f"must be one of {list(KINDS)}"),
        "hidden_units": _f("int", 64, *_ge1),
    },
    "fl": {
        "num_clients": _f("int", 20, *_ge1),
        "local_epochs": _f("int", 5, *_ge1),
        "global_rounds": _f("int", 40, *_ge0),
        "learning_rate": _f("float", 0.005, *_pos),
        "batch_size": _f("int", 64, *_ge1),
        "target_clients": _f("int_list", [0, 1], lambda v: all(c >= 0 for c in v), "must be client ids >= 0"),
        "history_interval": _f("int", 1, *_ge1),
        "workers": _f("int", 1, *_ge1),
    },
    "unlearn": {
        "methods": _f("str_list", list(METHODS), lambda v: len(v) > 0 and all(m in METHODS for m in v),
                      f"must be a non-empty subset of {list(METHODS)}"),
        "step_size": _f("optional_float", None, *_pos_or_none),
        "momentum": _f("float", 0.9, *_unit_open),
        "stop_multiplier": _f("float", 0.6, *_pos),
        "min_threshold": _f("float", 1e-4, *_pos),
        "window": _f("int", 5, lambda v: v >= 2, "must be >= 2"),
        "max_rounds": _f("int", 40, *_ge1),
        "stopping": _f("bool", True),
        "local_epochs": _f("optional_int", None, *_pos_or_none),
        "batch_size": _f("optional_int", None, *_pos_or_none),
        "local_lr": _f("optional_float", None, *_pos_or_none),
        "calibration_epochs": _f("int", 1, *_ge1),
        "lbfgs_memory": _f("int", 8, *_ge0),
    },
    "attack": {
        "mia": _f("bool", True),
        "backdoor": _f("bool", False),
        "row": _f("int", 24, *_ge0),
        "col": _f("int", 24, *_ge0),
        "height": _f("int", 4, *_ge1),
        "width": _f("int", 4, *_ge1),
        "value": _f("float", 1.0),
        "target_label": _f("int", 0, *_ge0),
        "poison_fraction": _f("float", 0.5, lambda v: 0 < v <= 1, "must lie in (0,1]"),
        "l2": _f("float", 1e-4, *_ge0),
    },
    "verify": {
        "dim": _f("int", 20, lambda v: 1 <= v <= 200, "must lie in [1, 200]"),
        "num_clients": _f("int", 5, *_ge1),
        "mu": _f("float", 0.1, *_pos),
        "L": _f("float", 10.0, *_pos),
        "heterogeneity": _f("float", 0.5, *_ge0),
        "alpha": _f("optional_float", None, *_pos_or_none),
        "beta": _f("optional_float", None, lambda v: v is None or 0 < v < 1, "must lie in (0,1) or be null"),
        "rounds": _f("int", 500, *_ge0),
        "distinct_inits": _f("bool", True),
    },
}

# friendlier wording for the constraints users hit most
_MESSAGES = {("unlearn", "momentum"): "momentum must lie in (0,1)",
             ("verify", "beta"): "momentum must lie in (0,1)"}


def _all_paths(schema=SCHEMA, prefix=()) -> List[Tuple[str, ...]]:
    out = []
    for k, v in schema.items():
        if isinstance(v, dict):
            out += _all_paths(v, prefix + (k,))
        else:
            out.append(prefix + (k,))
    return out


def _suggest(key: str, candidates: List[str]) -> str:
    close = difflib.get_close_matches(key, candidates, n=1, cutoff=0.6)
    if close:
        return f"; did you mean {close[0]!r}?"
    dotted = [".".join(p) for p in _all_paths()]
    leaves = {p.rsplit(".", 1)[-1]: p for p in dotted}
    close = difflib.get_close_matches(key, list(leaves), n=1, cutoff=0.6)
    return f"; did you mean {leaves[close[0]]!r}?" if close else ""


def _coerce(path: str, f: Field, v):
    def bad(expected):
        return ConfigError(f"{path}: expected {expected}, got {json.dumps(v)}")

    kind = f.kind
    if kind.startswith("optional_"):
        if v is None:
            return None
        kind = kind[len("optional_"):]
    if kind == "bool":
        if not isinstance(v, bool):
            raise bad("a boolean")
        return v
    if kind == "int":
        if isinstance(v, bool) or not isinstance(v, int):
            raise bad("an integer")
        return v
    if kind == "float":
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise bad("a number")
        return float(v)
    if kind == "str":
        if not isinstance(v, str):
            raise bad("a string")
        return v
    if kind in ("int_list", "str_list"):
        elem = str if kind == "str_list" else int
        if not isinstance(v, list) or any(isinstance(e, bool) or not isinstance(e, elem) for e in v):
            raise bad(f"a list of {elem.__name__}")
        return list(v)
    raise AssertionError(kind)


def _fill(data, schema, prefix: str) -> Dict[str, Any]:
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    for key in data:
        if key not in schema:
            where = f"{prefix}.{key}" if prefix else key
            raise ConfigError(f"unknown key {where!r}{_suggest(key, list(schema))}")
    out = {}
    for key, f in schema.items():
        path = f"{prefix}.{key}" if prefix else key
        if isinstance(f, dict):
            out[key] = _fill(data.get(key, {}), f, path)
            continue
        v = _coerce(path, f, data[key]) if key in data else copy.deepcopy(f.default)
        if f.check is not None and not f.check(v):
            msg = _MESSAGES.get(tuple(path.split(".")), f"{key} {f.constraint}")
            raise ConfigError(f"{path}: {msg}, got {json.dumps(v)}")
        out[key] = v
    return out


def _cross_checks(c: Dict[str, Any]) -> None:
    fl = c["fl"]
    targets = fl["target_clients"]
    if len(set(targets)) != len(targets):
        raise ConfigError("fl.target_clients: duplicate client ids")
    if any(t >= fl["num_clients"] for t in targets):
        raise ConfigError(f"fl.target_clients: ids must be < fl.num_clients = {fl['num_clients']}")
    if len(targets) >= fl["num_clients"]:
        raise ConfigError("fl.target_clients: at least one client must remain")
    quad = c["dataset"]["name"] == "quadratic"
    if quad != (c["model"]["kind"] == "quadratic"):
        raise ConfigError("model.kind: the quadratic model goes with the quadratic dataset and only with it")
    if c["dataset"]["mu"] > c["dataset"]["L"]:
        raise ConfigError("dataset.mu: must not exceed dataset.L")
    if c["verify"]["mu"] > c["verify"]["L"]:
        raise ConfigError("verify.mu: must not exceed verify.L")
    if "attack" in c["stages"] and quad:
        raise ConfigError("stages: the attack stage needs a classifier (mnist dataset)")
    if quad and c["attack"]["backdoor"]:
        raise ConfigError("attack.backdoor: needs image data")
    if c["attack"]["backdoor"]:
        try:
            TriggerSpec(**{k: c["attack"][k] for k in ("row", "col", "height", "width", "value",
                                                        "target_label", "poison_fraction")}).validate((28, 28))
        except ConfigError as exc:
            raise ConfigError(f"attack: {exc}") from exc
    # stages always run in canonical order
    c["stages"] = [s for s in STAGES if s in c["stages"]]
    c["unlearn"]["methods"] = [m for m in METHODS if m in c["unlearn"]["methods"]]
    fl["target_clients"] = sorted(targets)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, defaults-filled configuration (nested plain data)."""

    data: Dict[str, Any]

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def stages(self) -> List[str]:
        return self.data["stages"]

    @property
    def methods(self) -> List[str]:
        return self.data["unlearn"]["methods"]

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.data)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        canonical = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def with_overrides(self, **top_level) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(top_level)
        return from_dict(d)

    def fl_config(self) -> FLConfig:
        fl = self.data["fl"]
        return FLConfig(num_clients=fl["num_clients"], local_epochs=fl["local_epochs"],
                        global_rounds=fl["global_rounds"], learning_rate=fl["learning_rate"],
                        batch_size=fl["batch_size"], seed=self.seed,
                        target_clients=tuple(fl["target_clients"]),
                        history_interval=fl["history_interval"], workers=fl["workers"])

    def unlearn_config(self) -> UnlearnConfig:
        u = self.data["unlearn"]
        step = u["step_size"] if u["step_size"] is not None else self.data["fl"]["learning_rate"]
        return UnlearnConfig(step_size=step, momentum=u["momentum"], stop_multiplier=u["stop_multiplier"],
                             min_threshold=u["min_threshold"], window=u["window"], max_rounds=u["max_rounds"],
                             stopping=u["stopping"], local_epochs=u["local_epochs"], batch_size=u["batch_size"],
                             local_lr=u["local_lr"], calibration_epochs=u["calibration_epochs"],
                             lbfgs_memory=u["lbfgs_memory"], seed=self.seed, workers=self.data["fl"]["workers"])

    def trigger(self) -> TriggerSpec:
        a = self.data["attack"]
        return TriggerSpec(row=a["row"], col=a["col"], height=a["height"], width=a["width"], value=a["value"],
                           target_label=a["target_label"], poison_fraction=a["poison_fraction"])

    def model_spec(self, input_dim: int) -> ModelSpec:
        m = self.data["model"]
        return ModelSpec(m["kind"], input_dim, num_classes=10, hidden_units=m["hidden_units"])


def from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    filled = _fill(data, SCHEMA, "")
    _cross_checks(filled)
    return ExperimentConfig(filled)


def parse_config(text: str) -> ExperimentConfig:
    """Parse JSON text into a validated :class:`ExperimentConfig`."""
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(data)


def config_schema() -> Dict[str, Any]:
    """The schema as JSON-Schema-style data (types, defaults, constraints)."""
    type_names = {"int": "integer", "float": "number", "bool": "boolean", "str": "string",
                  "int_list": "array", "str_list": "array"}

    def walk(schema):
        props = {}
        for k, f in schema.items():
            if isinstance(f, dict):
                props[k] = walk(f)
                continue
            base = f.kind.replace("optional_", "")
            entry = {"type": [type_names[base], "null"] if f.kind.startswith("optional_") else type_names[base],
                     "default": f.default}
            if f.constraint:
                entry["description"] = f.constraint
            props[k] = entry
        return {"type": "object", "additionalProperties": False, "properties": props}

    return walk(SCHEMA)
