"""Experiment configuration: dotted-key text files, seed splitting, manifests.

Config files hold one ``key = value`` per line ('#' starts a comment); every
key must exist in the schema below, so typos fail loudly. CLI ``--set``
overrides take the same ``key=value`` form.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from . import __version__


class ConfigError(Exception):
    """Invalid configuration key, value, or file."""


def _bool(text):
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (type constructor, default)
SCHEMA = {
    "seed": (int, 0),
    "data.path": (str, ""),
    "data.out_dir": (str, "out"),
    "synth.users": (int, 2000),
    "synth.items": (int, 1000),
    "synth.latent_dim": (int, 8),
    "synth.feat_dim_v": (int, 16),
    "synth.feat_dim_t": (int, 16),
    "synth.interactions_per_user": (int, 20),
    "synth.feature_noise": (float, 0.1),
    "synth.interaction_noise": (float, 0.05),
    "synth.mixing_overlap": (float, 0.0),
    "synth.unpopular_count": (int, 100),
    "synth.n_unpop": (int, 5),
    "model.kind": (str, "concat"),
    "model.dim": (int, 32),
    "model.fuse_dim": (int, 16),
    "model.nonlinearity": (str, "tanh"),
    "model.user_content": (str, "shared"),
    "train.eta": (float, 0.01),
    "train.beta": (float, 1e-5),
    "train.batch_size": (int, 256),
    "train.max_epochs": (int, 30),
    "train.patience": (int, 5),
    "train.eval_every": (int, 1),
    "train.optimizer": (str, "adam"),
    "train.reduction": (str, "sum"),
    "defense.mode": (str, "uat_mc"),
    "defense.lambda": (float, 1.0),
    "defense.alpha": (float, 1.0),
    "defense.beta": (float, 1e-5),
    "defense.eps_d_pct": (float, 0.10),
    "defense.max_epochs": (int, 10),
    "attack.variant": (str, "pgd"),
    "attack.eps_a_pct": (float, 0.10),
    "attack.pgd_steps": (int, 10),
    "attack.with_align": (_bool, False),
    "attack.align_weight": (float, 1.0),
    "attack.k": (int, 50),
    "attack.targets": (int, 100),
    "attack.threshold_mode": (str, "exact"),
    "attack.popularity_threshold": (int, 5),
    "eval.k_hit": (int, 50),
    "eval.k_rank": (int, 10),
    "sweep.kind": (str, "eps"),
    "sweep.eps_d": (str, "0.025,0.05,0.075,0.10"),
    "sweep.eps_a": (str, "0.025,0.05,0.075,0.10"),
    "sweep.lambdas": (str, "1,2,3,4,5,6,7,8,9,10"),
    "sweep.alphas": (str, "0.1,1,2,3,4,5,6,7,8,9,10"),
    "diagnose.targets": (int, 100),
    "diagnose.k_users": (int, 0),  # 0 = 10% of the promotion set
    "diagnose.bin_width": (float, 0.05),
    "bench.batches": (int, 50),
    "bench.batch_size": (int, 256),
    "report.wall_clock": (_bool, False),
}


class Config:
    def __init__(self, values=None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, raw):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        ctor, _ = SCHEMA[key]
        try:
            self.values[key] = ctor(raw) if isinstance(raw, str) else ctor(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc

    def __getitem__(self, key):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def floats(self, key):
        try:
            return [float(x) for x in str(self[key]).split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad list for {key!r}") from exc

    def snapshot(self):
        return dict(sorted(self.values.items()))

    def canonical(self):
        return json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))


def load_config(path, overrides=()):
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
                key, _, value = stripped.partition("=")
                values[key.strip()] = value.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = Config(values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip())
    return cfg


def default_config():
    return Config()


def seed_for(root_seed, label):
    """Deterministically split one root seed per component."""
    digest = hashlib.sha256(f"{root_seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2 ** 63)


def file_checksum(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    run_id: str
    command: str
    provenance: str
    config: dict
    input_checksums: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    @staticmethod
    def create(command, cfg, input_paths=()):
        checksums = {str(p): file_checksum(p) for p in input_paths}
        body = json.dumps({"command": command, "config": cfg.snapshot(),
                           "inputs": checksums}, sort_keys=True)
        run_id = hashlib.sha256(body.encode()).hexdigest()[:12]
        return RunManifest(run_id, command, f"mmadvrec-{__version__}",
                           cfg.snapshot(), checksums)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"run_id": self.run_id, "command": self.command,
                       "provenance": self.provenance, "config": self.config,
                       "input_checksums": self.input_checksums,
                       "outputs": self.outputs}, fh, indent=2, sort_keys=True)
            fh.write("\n")
