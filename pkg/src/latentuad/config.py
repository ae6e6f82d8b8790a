"""Pipeline configuration: JSON in, validated frozen dataclasses out.

Defaults reproduce the reference hyperparameters. Unknown keys and out of
range values raise :class:`ConfigError` naming the dotted field path.
"""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    data_dir: str = "data"
    output_dir: str = "runs"
    atlas: str | None = None  # label volume; default <data_dir>/atlas.raw when present
    atlas_names: str | None = None
    metadata: str | None = None  # default <data_dir>/metadata.csv


@dataclass(frozen=True)
class SaeSection:
    kernels: tuple = ((5, 5), (3, 3), (3, 3), (3, 3))
    strides: tuple = ((1, 1), (1, 1), (3, 3), (1, 1))
    filters: tuple = (3, 4, 12, 16)
    alpha: float = 1e-3
    epochs: int = 20
    batch_size: int = 1000
    lr: float = 1e-3
    val_fraction: float = 0.1


@dataclass(frozen=True)
class OcsvmSection:
    n_models: int = 5
    n_per_model: int = 500
    nu: float = 0.03
    tol: float = 1e-6


@dataclass(frozen=True)
class MmstSection:
    K: int = 9
    kappa: float = 0.6
    t0: float = 100.0
    t_min: int = 500
    refresh_every: int = 1000
    n_passes: int = 1
    warmup: int = 2000
    heldout: int = 2000


@dataclass(frozen=True)
class FoldSection:
    n_folds: int = 10
    control_test_fraction: float = 0.25
    control_jitter: int = 1
    patient_test_fraction: float = 84 / 124
    patient_jitter: int = 2
    stratify: bool = True


@dataclass(frozen=True)
class PhantomSection:
    n_normal: int = 20
    n_anomalous: int = 20
    dims: tuple = (40, 40, 16)
    corr_length: float = 1.0
    amplitude: float = 0.1
    # nearly fills the field of view, so few scored patches straddle the zero background
    semi_axes: tuple = (0.8, 0.8, 0.8)
    radius: float = 6.0
    delta: float = 1.5


@dataclass(frozen=True)
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    patch_size: int = 15
    patches_per_subject: int = 25000
    features_per_subject: int = 1000
    sae: SaeSection = field(default_factory=SaeSection)
    ocsvm: OcsvmSection = field(default_factory=OcsvmSection)
    mmst: MmstSection = field(default_factory=MmstSection)
    threshold_q: float = 0.98
    folds: FoldSection = field(default_factory=FoldSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    seed: int = 0

    def __post_init__(self):
        validate(self)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self):
        """Short hash of everything except paths; names the run directory."""
        d = self.to_dict()
        d.pop("paths")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:10]

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


_SECTIONS = {"paths": Paths, "sae": SaeSection, "ocsvm": OcsvmSection, "mmst": MmstSection, "folds": FoldSection, "phantom": PhantomSection}


def _tupled(v):
    return tuple(_tupled(x) for x in v) if isinstance(v, list) else v


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}: unknown field")
    kw = {}
    for k, v in d.items():
        if cls is PipelineConfig and k in _SECTIONS:
            kw[k] = _build(_SECTIONS[k], v, f"{k}.")
        else:
            kw[k] = _tupled(v)
    try:
        return cls(**kw) if cls is not PipelineConfig else kw
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{prefix.rstrip('.')}: {e}") from e


def from_dict(d) -> PipelineConfig:
    kw = _build(PipelineConfig, d, "")
    return PipelineConfig(**kw)


def load(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return from_dict(d)


def _check(ok, name, msg):
    if not ok:
        raise ConfigError(f"{name}: {msg}")


def _pos_int(v):
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool) and v >= 1


def validate(c: PipelineConfig):
    _check(_pos_int(c.patch_size) and c.patch_size % 2 == 1, "patch_size", f"must be a positive odd integer, got {c.patch_size}")
    _check(_pos_int(c.patches_per_subject), "patches_per_subject", "must be a positive integer")
    _check(_pos_int(c.features_per_subject), "features_per_subject", "must be a positive integer")
    _check(0.90 <= c.threshold_q < 1.0, "threshold_q", f"must lie in [0.90, 1.0), got {c.threshold_q}")
    _check(isinstance(c.seed, (int, np.integer)) and c.seed >= 0, "seed", "must be a non-negative integer")
    s = c.sae
    _check(len(s.kernels) == len(s.strides) == len(s.filters) >= 1, "sae.kernels", "kernels, strides and filters need equal non-zero length")
    _check(s.alpha >= 0, "sae.alpha", f"must be >= 0, got {s.alpha}")
    _check(_pos_int(s.epochs), "sae.epochs", "must be a positive integer")
    _check(_pos_int(s.batch_size), "sae.batch_size", "must be a positive integer")
    _check(s.lr > 0, "sae.lr", "must be positive")
    _check(0.0 < s.val_fraction < 1.0, "sae.val_fraction", "must lie in (0, 1)")
    o = c.ocsvm
    _check(0.0 < o.nu < 1.0, "ocsvm.nu", f"must lie in (0, 1), got {o.nu}")
    _check(_pos_int(o.n_models), "ocsvm.n_models", "must be a positive integer")
    _check(_pos_int(o.n_per_model) and o.nu * o.n_per_model >= 1, "ocsvm.n_per_model", "must be a positive integer with nu * n >= 1")
    _check(o.tol > 0, "ocsvm.tol", "must be positive")
    m = c.mmst
    _check(_pos_int(m.K), "mmst.K", "must be a positive integer")
    _check(0.5 < m.kappa <= 1.0, "mmst.kappa", f"must lie in (0.5, 1], got {m.kappa}")
    _check(m.t0 >= 0, "mmst.t0", "must be >= 0")
    _check(m.t_min >= 0, "mmst.t_min", "must be >= 0")
    _check(_pos_int(m.refresh_every), "mmst.refresh_every", "must be a positive integer")
    _check(_pos_int(m.n_passes), "mmst.n_passes", "must be a positive integer")
    _check(_pos_int(m.warmup), "mmst.warmup", "must be a positive integer")
    _check(m.heldout >= 0, "mmst.heldout", "must be >= 0")
    f = c.folds
    _check(_pos_int(f.n_folds), "folds.n_folds", "must be a positive integer")
    _check(0.0 < f.control_test_fraction < 1.0, "folds.control_test_fraction", "must lie in (0, 1)")
    _check(0.0 < f.patient_test_fraction < 1.0, "folds.patient_test_fraction", "must lie in (0, 1)")
    _check(f.control_jitter >= 0 and f.patient_jitter >= 0, "folds.control_jitter", "jitter must be >= 0")
    p = c.phantom
    _check(p.n_normal >= 2, "phantom.n_normal", "must be >= 2")
    _check(p.n_anomalous >= 0, "phantom.n_anomalous", "must be >= 0")
    _check(len(p.dims) == 3 and min(p.dims) >= 1, "phantom.dims", "must be three positive integers")
    _check(len(p.semi_axes) == 3 and min(p.semi_axes) > 0, "phantom.semi_axes", "must be three positive fractions")
    _check(p.radius >= 0, "phantom.radius", "must be >= 0")
    _check(p.amplitude >= 0 and p.corr_length >= 0, "phantom.amplitude", "amplitude and corr_length must be >= 0")


def substream(seed, name, *keys):
    """Independent generator for a named stage, derived from the global seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *(int(k) for k in keys)])


def substream_seed(seed, name, *keys) -> int:
    return int(substream(seed, name, *keys).integers(2**31))
