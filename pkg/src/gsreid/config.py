"""Plain-text run configuration.

One ``section.key = value`` assignment per line, ``#`` starts a comment,
booleans are ``true``/``false``. Every key must be known; a typo is an error
that names the key rather than a silently ignored line.

``run.preset = bench-50`` loads the desk-scale benchmark first; keys given in
the file override it regardless of their position.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .clustering import DbscanConfig
from .learner import LOSS_MODES, SAMPLER_KINDS, SamplerConfig, TrainConfig
from .sampling import ALL
from .synth import SynthConfig


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


def _bool(text):
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError(f"expected true or false, got {text!r}")


def _degree(text):
    return ALL if text.lower() == ALL else int(text)


def _positive(x):
    return x > 0


def _at_least_one(x):
    return x >= 1


def _non_negative(x):
    return x >= 0


# key -> (parser, default, check, requirement text)
SCHEMA = {
    "run.preset": (str, "", lambda s: s in ("", *PRESETS), "unknown preset"),
    "run.seed": (int, 0, lambda s: 0 <= s < 2**64, "must be an unsigned 64-bit integer"),
    "synth.num_identities": (int, 50, _at_least_one, "must be >= 1"),
    "synth.samples_per_identity": (int, 20, _at_least_one, "must be >= 1"),
    "synth.obs_dim": (int, 32, _at_least_one, "must be >= 1"),
    "synth.num_cameras": (int, 4, _at_least_one, "must be >= 1"),
    "synth.identity_noise": (float, 0.35, _non_negative, "must be >= 0"),
    "synth.camera_offset_scale": (float, 0.25, _non_negative, "must be >= 0"),
    "synth.query_fraction": (float, 0.2, lambda q: 0 <= q < 1, "must be in [0, 1)"),
    # -1: follow run.seed, so one --seed pairs data and training
    "synth.seed": (int, -1, lambda s: s >= -1, "must be >= 0, or -1 to follow run.seed"),
    "train.tau": (float, 0.05, _positive, "must be > 0"),
    "train.momentum": (float, 0.2, lambda m: 0 <= m <= 1, "must be in [0, 1]"),
    "train.lr": (float, 3.5e-4, _positive, "must be > 0"),
    "train.lr_decay": (int, 20, _non_negative, "must be >= 0 (0 disables decay)"),
    "train.epochs": (int, 50, _non_negative, "must be >= 0"),
    "train.batch_size": (int, 64, _at_least_one, "must be >= 1"),
    "train.dim_out": (int, 16, _at_least_one, "must be >= 1"),
    "train.loss_mode": (str, LOSS_MODES[1], lambda m: m in LOSS_MODES, f"must be one of {LOSS_MODES}"),
    "affinity.k": (int, 30, _at_least_one, "must be >= 1"),
    "dbscan.eps": (float, 0.6, _non_negative, "must be >= 0"),
    "dbscan.min_pts": (int, 4, _at_least_one, "must be >= 1"),
    "sampler.kind": (str, "group", lambda k: k in SAMPLER_KINDS, f"must be one of {SAMPLER_KINDS}"),
    "sampler.N": (int, 64, _at_least_one, "must be >= 1"),
    "sampler.M": (_degree, 1, lambda m: m == ALL or m >= 1, "must be >= 1 or 'all'"),
    "sampler.P": (int, 16, _at_least_one, "must be >= 1"),
    "sampler.K": (int, 4, _at_least_one, "must be >= 1"),
    "metrics.retrieval": (_bool, True, None, ""),
}

PRESETS = {
    "bench-50": {
        "synth.num_identities": 50,
        "synth.samples_per_identity": 20,
        "synth.obs_dim": 32,
        "synth.num_cameras": 4,
        "synth.identity_noise": 0.35,
        "synth.camera_offset_scale": 0.25,
        "synth.query_fraction": 0.2,
        "train.dim_out": 16,
        "train.epochs": 20,
    },
}


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self):
        return self.values["run.seed"]

    @property
    def synth(self):
        v = self.values
        seed = v["synth.seed"] if v["synth.seed"] >= 0 else v["run.seed"]
        return SynthConfig(
            num_identities=v["synth.num_identities"],
            samples_per_identity=v["synth.samples_per_identity"],
            obs_dim=v["synth.obs_dim"],
            num_cameras=v["synth.num_cameras"],
            identity_noise=v["synth.identity_noise"],
            camera_offset_scale=v["synth.camera_offset_scale"],
            query_fraction=v["synth.query_fraction"],
            seed=seed,
        )

    @property
    def train(self):
        v = self.values
        return TrainConfig(
            tau=v["train.tau"], momentum=v["train.momentum"], lr=v["train.lr"],
            lr_decay=v["train.lr_decay"], epochs=v["train.epochs"],
            batch_size=v["train.batch_size"], dim_out=v["train.dim_out"],
            loss_mode=v["train.loss_mode"], k=v["affinity.k"],
            dbscan=DbscanConfig(eps=v["dbscan.eps"], min_pts=v["dbscan.min_pts"]),
            sampler=SamplerConfig(kind=v["sampler.kind"], group_size=v["sampler.N"],
                                  shuffle_degree=v["sampler.M"], pk_p=v["sampler.P"],
                                  pk_k=v["sampler.K"]),
        )

    def with_overrides(self, **pairs):
        """Copy with ``section__key=value`` pairs validated and applied."""
        values = dict(self.values)
        for name, value in pairs.items():
            key = name.replace("__", ".")
            _check(key, value)
            values[key] = value
        return RunConfig(values)

    def snapshot(self):
        """Resolved config in the input format, one key per line, sorted."""
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _check(key, value):
    if key not in SCHEMA:
        raise ConfigError(key, "unknown key")
    _, _, check, requirement = SCHEMA[key]
    if check is not None and not check(value):
        raise ConfigError(key, f"{requirement} (got {value!r})")


def parse_lines(lines, source="<config>"):
    """Parse assignments into ``{key: value}``; no defaults are applied here."""
    found = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(None, f"{source}:{lineno}: expected 'section.key = value'")
        key, text = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, f"unknown key ({source}:{lineno})")
        if key in found:
            raise ConfigError(key, f"assigned twice ({source}:{lineno})")
        parser = SCHEMA[key][0]
        try:
            value = parser(text)
        except ValueError as exc:
            raise ConfigError(key, f"cannot parse {text!r}: {exc}") from None
        _check(key, value)
        found[key] = value
    return found


def resolve(assignments):
    values = {key: spec[1] for key, spec in SCHEMA.items()}
    preset = assignments.get("run.preset", "")
    if preset:
        values.update(PRESETS[preset])
    values.update(assignments)
    return RunConfig(values)


def loads(text, source="<config>"):
    return resolve(parse_lines(text.splitlines(), source))


def load(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(None, f"cannot read config {path}: {exc}") from None
    return loads(text, str(path))


def preset(name):
    return resolve({"run.preset": name})
