"""Experiment configuration: one INI file with a fixed, typed schema.

Every section and key must appear in ``SCHEMA``; anything else is rejected.
Missing keys take the schema default.  The resolved values (after any
command-line overrides) are hashed, and the hash identifies a run in report
headers and in the sweep cache.

Example::

    [experiment]
    instance = linear-benchmark
    seed = 0

    [hybrid]
    epsilon = 0.04, 0.01, 0.0025
    delta_schedule = sqrt
    replicates = 100
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError

INSTANCES = ("linear-benchmark", "two-state-mdp", "disconnected-chain", "custom")


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _str(s):
    return s.strip()


def _ints(s):
    return [int(x) for x in s.replace(",", " ").split()]


def _floats(s):
    return [float(x) for x in s.replace(",", " ").split()]


def _words(s):
    return [x for x in s.replace(",", " ").split()]


def _pairs(s):
    """``"0-16, 3-5"`` -> ``[(0, 16), (3, 5)]``."""
    out = []
    for item in s.replace(",", " ").split():
        a, b = item.split("-")
        out.append((int(a), int(b)))
    return out


def _choice(*options):
    def parse(s):
        v = s.strip()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return parse


def _optional(parse):
    def wrapped(s):
        return None if s.strip() in ("", "none", "auto") else parse(s)
    return wrapped


UNHASHED = {("experiment", "out"), ("experiment", "threads")}

# section -> key -> (parser, default as written in a config file)
SCHEMA = {
    "experiment": {
        "instance": (_choice(*INSTANCES), "linear-benchmark"),
        "file": (_str, ""),
        "seed": (_int, "0"),
        "out": (_str, "occavg-out"),
        "threads": (_int, "1"),
    },
    "instance": {
        "n_states": (_int, "17"),
        "single_action": (_bool, "false"),
    },
    "basis": {
        "J": (_int, "16"),
        "seed": (_int, "0"),
    },
    "compute-w": {
        "directions": (_int, "32"),
        "enumerate_vertices": (_optional(_bool), "auto"),
    },
    "loms": {
        "y0": (_int, "0"),
        "horizons": (_ints, "50, 200, 800"),
        "metrics": (_words, "hull_distance"),
        "replicates": (_int, "30"),
        "plans": (_int, "50"),
        "directions": (_optional(_int), "auto"),
    },
    "happrox": {
        "horizons": (_ints, "20, 80, 320"),
        "pairs": (_optional(_pairs), "auto"),
        "j": (_int, "2"),
        "replicates": (_int, "200"),
        "plans": (_int, "20"),
        "coupling": (_choice("same", "search"), "same"),
        "contraction": (_optional(_float), "auto"),
    },
    "hybrid": {
        "epsilon": (_floats, "0.04, 0.01, 0.0025"),
        "delta_schedule": (_str, "sqrt"),
        "substeps": (_int, "4"),
        "replicates": (_int, "100"),
        "y0": (_int, "0"),
        "field": (_choice("benchmark", "zero"), "benchmark"),
        "z_box": (_optional(_floats), "auto"),
        "lattice": (_int, "401"),
        "refine": (_bool, "true"),
        "filler": (_int, "0"),
        "burn_in": (_int, "0"),
        "steer": (_bool, "true"),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved configuration.  ``values[section][key]`` holds parsed values."""

    values: dict = field(repr=False)
    raw: dict = field(repr=False)  # canonical strings, used for hashing and headers
    source: str = ""

    def __getitem__(self, section):
        return self.values[section]

    @property
    def instance(self):
        return self.values["experiment"]["instance"]

    @property
    def seed(self):
        return self.values["experiment"]["seed"]

    @property
    def hash(self):
        """Digest of every resolved key except the output location and thread count."""
        keyed = {sec: {k: v for k, v in kv.items() if (sec, k) not in UNHASHED} for sec, kv in self.raw.items()}
        blob = json.dumps(keyed, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, **overrides):
        """``with_overrides(**{"experiment.seed": "3"})``: string values, validated."""
        raw = {s: dict(kv) for s, kv in self.raw.items()}
        for dotted, value in overrides.items():
            section, key = dotted.split(".", 1)
            raw.setdefault(section, {})[key] = str(value)
        return _resolve(raw, self.source)

    def header_lines(self):
        lines = []
        for section in sorted(self.raw):
            for key in sorted(self.raw[section]):
                lines.append(f"[{section}] {key} = {self.raw[section][key]}")
        return lines


def _resolve(raw, source=""):
    values, canon = {}, {}
    for section, keys in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in keys:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
    for section, keys in SCHEMA.items():
        values[section], canon[section] = {}, {}
        for key, (parse, default) in keys.items():
            text = raw.get(section, {}).get(key, default)
            try:
                values[section][key] = parse(text)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{section}] {key} = {text!r}: {exc}") from exc
            canon[section][key] = " ".join(text.split())
    exp = values["experiment"]
    if exp["instance"] == "custom" and not exp["file"]:
        raise ConfigError("instance = custom requires [experiment] file")
    if exp["threads"] < 1:
        raise ConfigError("[experiment] threads must be at least 1")
    hyb = values["hybrid"]
    if not hyb["epsilon"]:
        raise ConfigError("[hybrid] epsilon needs at least one value")
    if hyb["substeps"] < 4:
        raise ConfigError("[hybrid] substeps must be at least 4")
    if hyb["z_box"] is not None and len(hyb["z_box"]) % 2:
        raise ConfigError("[hybrid] z_box lists lower bounds then upper bounds")
    return ExperimentConfig(values, canon, source)


def _read_raw(text, source):
    # keys are case sensitive (``J``); interpolation is off so '%' is literal
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from exc
    if cp.defaults():
        raise ConfigError("a [DEFAULT] section is not part of the schema")
    return {s: dict(cp.items(s, raw=True)) for s in cp.sections()}


def parse_config(text, source="<string>") -> ExperimentConfig:
    return _resolve(_read_raw(text, source), source)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw = _read_raw(text, os.fspath(path))
    f = raw.get("experiment", {}).get("file", "").strip()
    if f and not os.path.isabs(f):
        # custom instance files are resolved relative to the config file
        raw["experiment"]["file"] = os.path.join(os.path.dirname(os.path.abspath(path)), f)
    return _resolve(raw, os.fspath(path))


def default_config() -> ExperimentConfig:
    return _resolve({})
