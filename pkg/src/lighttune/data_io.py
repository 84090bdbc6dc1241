"""File formats: MNIST IDX, CQI table, run configs, telemetry CSV and model dumps."""

from __future__ import annotations

import configparser
import csv
import io
import math
import os
import struct
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .ff_core import BLER_CLASSES, InputError, LabelSet, MlpModel, TrainConfig
from .finetune import FineTuneConfig
from .link_adapt import CqiTable, FeatureNormalizer

# ---------------------------------------------------------------------------
# MNIST IDX
# ---------------------------------------------------------------------------

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class IdxDataset:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def _read_idx(path, magic: int, ndims: int) -> tuple[tuple[int, ...], bytes]:
    data = Path(path).read_bytes()
    header = 4 + 4 * ndims
    if len(data) < header:
        raise TruncatedError(f"{path}: file shorter than its header")
    (m,) = struct.unpack(">I", data[:4])
    if m != magic:
        raise BadMagicError(f"{path}: magic 0x{m:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndims, data[4:header])
    expected = header + int(np.prod(dims))
    if len(data) < expected:
        raise TruncatedError(f"{path}: {len(data)} bytes, header promises {expected}")
    return dims, data[header:expected]


def load_mnist(images_path, labels_path) -> IdxDataset:
    """Parse an IDX image/label file pair; pixels are scaled to ``[0, 1]``."""
    (n, rows, cols), img = _read_idx(images_path, IMAGE_MAGIC, 3)
    (n_lab,), lab = _read_idx(labels_path, LABEL_MAGIC, 1)
    if n != n_lab:
        raise CountMismatchError(f"{n} images but {n_lab} labels")
    images = np.frombuffer(img, dtype=np.uint8).reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise IdxError("label values must be 0..9")
    return IdxDataset(images, labels)


def write_idx_images(path, images_u8: np.ndarray, rows: int = 28, cols: int = 28):
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, images_u8.shape[0], rows, cols))
        fh.write(images_u8.tobytes())


def write_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def find_mnist(directory) -> tuple[IdxDataset, IdxDataset]:
    """Load ``(train, test)`` from a directory holding the four standard IDX files."""
    d = Path(directory)
    names = {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
    out = []
    for key in ("train", "test"):
        img, lab = names[key]
        out.append(load_mnist(d / img, d / lab))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# BLER quantization
# ---------------------------------------------------------------------------


def quantize_bler(p: float, classes: LabelSet = BLER_CLASSES) -> float:
    """Nearest class to ``p``; an exact midpoint goes to the lower class.

    Values above the top class clamp to it (``1.0 -> 0.9`` on the default set).
    """
    if not (0.0 <= p <= 1.0) or math.isnan(p):
        raise InputError(f"BLER {p} outside [0, 1]")
    vals = classes.values
    best = vals[0]
    best_d = abs(p - best)
    for v in vals[1:]:
        d = abs(p - v)
        # the tolerance keeps decimal midpoints such as 0.25 on the lower side
        if d < best_d - 1e-12:
            best, best_d = v, d
    return best


# ---------------------------------------------------------------------------
# CQI table
# ---------------------------------------------------------------------------


def parse_cqi_table(text: str) -> CqiTable:
    """Rows ``index Qm R SE`` (whitespace separated, ``#`` comments)."""
    qm, rate = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise InputError(f"cqi table line {lineno}: expected 4 columns")
        idx, q, r, se = int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])
        if idx != len(qm) + 1:
            raise InputError(f"cqi table line {lineno}: index {idx} out of order")
        if abs(q * r - se) > 1e-4:
            raise InputError(f"cqi table line {lineno}: SE column disagrees with Qm*R")
        qm.append(q)
        rate.append(r)
    return CqiTable(tuple(qm), tuple(rate))


_CQI_CACHE: dict = {}


def load_cqi_table(path: Optional[str] = None) -> CqiTable:
    key = path or "<packaged>"
    if key not in _CQI_CACHE:
        if path is None:
            text = resources.files("lighttune").joinpath("data/cqi_table.txt").read_text()
        else:
            text = Path(path).read_text()
        _CQI_CACHE[key] = parse_cqi_table(text)
    return _CQI_CACHE[key]


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


class ConfigError(ValueError):
    pass


@dataclass
class LinkConfig:
    tau_bler: float = 0.9
    backoff_steps: int = 1
    olla_step_up: float = 0.1
    olla_target: float = 0.1
    r_max: int = 4
    dims: str = "13,32,32"
    offline_samples: int = 20000
    label_init_scale: float = 30.0
    pretrained: str = "packaged"

    def validate(self):
        if not 0 < self.tau_bler <= 1:
            raise ConfigError("link.tau_bler must lie in (0, 1]")
        if self.backoff_steps < 0:
            raise ConfigError("link.backoff_steps must be >= 0")
        if not self.olla_step_up > 0:
            raise ConfigError("link.olla_step_up must be > 0")
        if not 0 < self.olla_target < 1:
            raise ConfigError("link.olla_target must lie in (0, 1)")
        if not 1 <= self.r_max <= 4:
            raise ConfigError("link.r_max must be in 1..4")
        d = self.layer_dims
        if len(d) < 2 or d[0] != 13 or any(v < 1 for v in d):
            raise ConfigError("link.dims must start with 13 (12 features + label)")
        if self.offline_samples < 1 or self.label_init_scale < 0:
            raise ConfigError("link.offline_samples must be >= 1 and link.label_init_scale >= 0")

    @property
    def layer_dims(self) -> list[int]:
        try:
            return [int(v) for v in self.dims.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad dims {self.dims!r}") from exc


@dataclass
class MnistConfig:
    # empty: take the directory from $LIGHTTUNE_MNIST_DIR
    data_dir: str = ""
    hidden: str = "256,256"
    epochs: int = 20
    batch_size: int = 50
    lr: float = 0.03
    threshold: float = 2.0
    loss: str = "quadratic"
    train_samples: int = 60000

    def validate(self):
        if self.loss not in ("quadratic", "softplus"):
            raise ConfigError("mnist.loss must be quadratic or softplus")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0 or self.train_samples < 1:
            raise ConfigError("mnist: epochs >= 0, batch_size >= 1, lr > 0 and train_samples >= 1 required")
        self.hidden_sizes

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        try:
            sizes = tuple(int(v) for v in self.hidden.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad mnist.hidden {self.hidden!r}") from exc
        if not sizes or min(sizes) < 1:
            raise ConfigError("mnist.hidden needs at least one positive width")
        return sizes


@dataclass
class VerifyConfig:
    dims: str = "13,32,32"
    b_z: float = 2.0
    b_theta: float = 1.0
    threshold: float = 9.0
    lemma_samples: int = 10000
    lipschitz_pairs: int = 1000
    gradient_points: int = 10000
    taylor_points: int = 2001

    def validate(self):
        if not (self.b_z > 0 and self.b_theta > 0 and self.threshold > 0):
            raise ConfigError("verify: b_z, b_theta and threshold must be > 0")
        if min(self.lemma_samples, self.lipschitz_pairs, self.gradient_points) < 1 or self.taylor_points < 3:
            raise ConfigError("verify: sample counts must be >= 1 (taylor_points >= 3)")
        d = self.layer_dims
        if len(d) < 2 or min(d) < 1:
            raise ConfigError("verify.dims needs at least two positive sizes")

    @property
    def layer_dims(self) -> list[int]:
        try:
            return [int(v) for v in self.dims.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad dims {self.dims!r}") from exc


@dataclass
class ConvergenceConfig:
    # 0 picks 20000 periods for shifted scenarios and 50000 for stationary ones
    periods: int = 0
    window: int = 100

    def validate(self):
        if self.periods < 0 or self.window < 1:
            raise ConfigError("convergence: periods >= 0 and window >= 1 required")


@dataclass
class RunConfig:
    seed: int = 0
    # Calibrated BLER recipe; the dataclass defaults elsewhere are the generic ones.
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=15, lr=0.01, batch_size=128))
    finetune: FineTuneConfig = field(default_factory=lambda: FineTuneConfig(alpha_f=0.001))
    link: LinkConfig = field(default_factory=LinkConfig)
    mnist: MnistConfig = field(default_factory=MnistConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)
    scenario: dict = field(default_factory=dict)
    channel: dict = field(default_factory=dict)
    shifts: dict = field(default_factory=dict)

    def resolved(self) -> dict:
        """Every tunable with its resolved value, for the run manifest."""
        out: dict[str, Any] = {"seed": self.seed}
        for name in CONFIG_SECTIONS:
            obj = getattr(self, name)
            out[name] = {f.name: getattr(obj, f.name) for f in fields(obj)}
        out["scenario"] = dict(self.scenario)
        out["channel"] = dict(self.channel)
        out["shifts"] = {str(k): dict(v) for k, v in sorted(self.shifts.items())}
        return out


CONFIG_SECTIONS = ("train", "finetune", "link", "mnist", "verify", "convergence")


def load_config(name_or_path: Optional[str]) -> RunConfig:
    """Parse a config file; a bare name such as ``s1_high_shift`` picks a packaged one."""
    if not name_or_path:
        return RunConfig()
    path = Path(name_or_path)
    if path.exists():
        return parse_config(path.read_text())
    packaged = resources.files("lighttune").joinpath(f"data/configs/{name_or_path}.ini")
    if packaged.is_file():
        return parse_config(packaged.read_text())
    raise ConfigError(f"config {name_or_path!r} not found")


def _coerce(value: str, default: Any, where: str):
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            v = float(value)
            if not math.isfinite(v):
                raise ValueError
            return v
    except ValueError as exc:
        raise ConfigError(f"{where}: bad number {value!r}") from exc
    return value.strip()


def _line_of(text: str, section: str, key: Optional[str] = None) -> int:
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                return lineno
        elif current == section and key is not None and "=" in s and s.split("=", 1)[0].strip().lower() == key:
            return lineno
    return 0


def _fill(obj, items: dict, section: str, text: str):
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for k, v in items.items():
        if k not in known:
            raise ConfigError(f"line {_line_of(text, section, k)}: unknown key {k!r} in [{section}]")
        updates[k] = _coerce(v, getattr(obj, k), f"line {_line_of(text, section, k)}: [{section}] {k}")
    try:
        return replace(obj, **updates)
    except (InputError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


SCENARIO_KEYS = ("name", "duration", "csi_rs_period_ms", "tx_per_period", "meas_noise_db", "pdsch_noise_db",
                 "jitter_frac", "n_rbs", "n_dmrs_symbols", "symbols_per_tx", "r_max", "seed")


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` text with ``[section]`` headers.

    Sections: ``[run]`` (seed), ``[train]``, ``[finetune]``, ``[link]``,
    ``[mnist]``, ``[verify]``, ``[convergence]``, ``[scenario]``,
    ``[channel]`` and ``[shift.<period>]``. Unknown sections
    and keys, duplicates and out-of-range values raise :class:`ConfigError`
    with the offending line number.
    """
    from .env_sim import ChannelParams  # local import: env_sim depends on link_adapt only

    cp = configparser.ConfigParser(strict=True, interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str.lower
    try:
        cp.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"line {exc.lineno}: duplicate key {exc.option!r} in [{exc.section}]") from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"line {exc.lineno}: duplicate section [{exc.section}]") from exc
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"line {exc.lineno}: key outside any [section]") from exc
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else 0
        raise ConfigError(f"line {lineno}: malformed line") from exc
    cfg = RunConfig()
    channel_defaults = ChannelParams()
    for section in cp.sections():
        items = dict(cp.items(section))
        if section == "run":
            for k, v in items.items():
                if k != "seed":
                    raise ConfigError(f"line {_line_of(text, section, k)}: unknown key {k!r} in [run]")
                cfg.seed = _coerce(v, 0, f"line {_line_of(text, section, k)}: [run] seed")
        elif section in CONFIG_SECTIONS:
            setattr(cfg, section, _fill(getattr(cfg, section), items, section, text))
        elif section == "scenario":
            for k in items:
                if k not in SCENARIO_KEYS:
                    raise ConfigError(f"line {_line_of(text, section, k)}: unknown key {k!r} in [scenario]")
            cfg.scenario = items
        elif section == "channel":
            _fill(channel_defaults, items, section, text)
            cfg.channel = items
        elif section.startswith("shift."):
            try:
                period = int(section.split(".", 1)[1])
            except ValueError as exc:
                raise ConfigError(f"line {_line_of(text, section)}: shift section needs an integer period") from exc
            _fill(channel_defaults, items, section, text)
            cfg.shifts[period] = items
        else:
            raise ConfigError(f"line {_line_of(text, section)}: unknown section [{section}]")
    for name in ("link", "mnist", "verify", "convergence"):
        getattr(cfg, name).validate()
    if cfg.train.epochs < 0 or not cfg.train.lr > 0:
        raise ConfigError("[train]: epochs must be >= 0 and lr > 0")
    return cfg


def build_scenario(scenario_items: dict, channel_items: dict, shifts: dict, base=None):
    """Assemble a :class:`ScenarioSpec` from string items on top of ``base``."""
    from .env_sim import ChannelParams, ScenarioSpec, ShiftEntry, overrides_from_text

    base = base if base is not None else ScenarioSpec()
    defaults = {f.name: getattr(base, f.name) for f in fields(base) if f.name in SCENARIO_KEYS}
    upd = {k: _coerce(v, defaults[k], f"[scenario] {k}") for k, v in scenario_items.items()}
    channel = replace(base.channel, **overrides_from_text(channel_items))
    schedule = list(base.shift_schedule)
    if shifts:
        schedule = [ShiftEntry(p, overrides_from_text(v)) for p, v in sorted(shifts.items())]
    try:
        return replace(base, channel=channel, shift_schedule=schedule, **upd)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_scenario(name_or_path: str, seed: Optional[int] = None):
    """Load a canned scenario (``S0``, ``S1``, ``S2``) or a scenario file."""
    if name_or_path in ("S0", "S1", "S2"):
        text = resources.files("lighttune").joinpath(f"data/scenarios/{name_or_path}.ini").read_text()
    else:
        text = Path(name_or_path).read_text()
    cfg = parse_config(text)
    spec = build_scenario(cfg.scenario, cfg.channel, cfg.shifts)
    if seed is not None:
        spec = spec.with_seed(seed)
    return spec


# ---------------------------------------------------------------------------
# CSV telemetry
# ---------------------------------------------------------------------------


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(rows: Iterable[dict], schema: Sequence[str], path) -> None:
    """Write rows with a fixed column order; floats use the shortest round-trip repr."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema)
        for row in rows:
            extra = set(row) - set(schema)
            if extra:
                raise InputError(f"row has columns outside the schema: {sorted(extra)}")
            w.writerow([format_value(row.get(col)) for col in schema])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


TELEMETRY_SCHEMA = (
    "period", "algorithm", "snr", "rank", "cqi", "p_hat", "p_true_empirical",
    "error", "triggered", "throughput_bits", "mac_count",
)


# ---------------------------------------------------------------------------
# Model dump
# ---------------------------------------------------------------------------

MODEL_HEADER = "lighttune-model 1"


def dump_model(model: MlpModel, normalizer: Optional[FeatureNormalizer] = None) -> str:
    """Versioned plain-text dump: dims, optional normalizer, row-major ``[W | b]`` per layer."""
    out = io.StringIO()
    out.write(MODEL_HEADER + "\n")
    out.write("dims " + " ".join(str(d) for d in model.dims) + "\n")
    if normalizer is not None:
        out.write("offset " + " ".join(repr(float(v)) for v in normalizer.offset) + "\n")
        out.write("scale " + " ".join(repr(float(v)) for v in normalizer.scale) + "\n")
    for l, theta in enumerate(model.thetas, start=1):
        out.write(f"layer {l}\n")
        for row in theta:
            out.write(" ".join(repr(float(v)) for v in row) + "\n")
    return out.getvalue()


def parse_model(text: str) -> tuple[MlpModel, Optional[FeatureNormalizer]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != MODEL_HEADER:
        raise InputError("not a lighttune model dump (bad header)")
    pos = 1

    def take(prefix):
        nonlocal pos
        if pos < len(lines) and lines[pos].startswith(prefix + " "):
            vals = lines[pos].split()[1:]
            pos += 1
            return vals
        return None

    dims_s = take("dims")
    if dims_s is None:
        raise InputError("model dump lacks a dims line")
    dims = [int(v) for v in dims_s]
    offset = take("offset")
    scale = take("scale")
    normalizer = None
    if offset is not None and scale is not None:
        normalizer = FeatureNormalizer(tuple(float(v) for v in offset), tuple(float(v) for v in scale))
    thetas = []
    for l in range(1, len(dims)):
        if take("layer") is None and not lines[pos - 1].startswith("layer"):
            raise InputError(f"missing layer {l} header")
        rows = []
        for _ in range(dims[l]):
            if pos >= len(lines):
                raise InputError("model dump truncated")
            rows.append([float(v) for v in lines[pos].split()])
            pos += 1
        theta = np.array(rows)
        if theta.shape != (dims[l], dims[l - 1] + 1):
            raise InputError(f"layer {l} has shape {theta.shape}")
        thetas.append(theta)
    return MlpModel(thetas), normalizer


def save_model(path, model: MlpModel, normalizer: Optional[FeatureNormalizer] = None):
    Path(path).write_text(dump_model(model, normalizer))


def load_model(path) -> tuple[MlpModel, Optional[FeatureNormalizer]]:
    return parse_model(Path(path).read_text())


def load_packaged_model(name: str = "bler_s0.txt"):
    return parse_model(resources.files("lighttune").joinpath(f"data/{name}").read_text())
