"""Deterministic synthetic data generators.

Two families:

* proportionality samples: ``x1`` uniform over {-10, 0, 10} and
  ``x2 ~ N(x1, (0.1 * x1 + 2)^2)`` — a minimal heteroscedastic target for
  checking that the mean-variance heads learn both moments;
* sine sequences: 8 segments of 256 samples at 128 Hz whose instantaneous
  frequency, amplitude and baseline drift as bounded random walks, with an
  optional frequency change inside segment index 5.

Reproducibility contract: all randomness comes from the Philox counter-based
generator; dataset item ``k`` uses the stream keyed by ``(seed, k)``, so any
item can be regenerated in isolation, bit-exactly, independent of batching
or scheduling.  The generator name is recorded in dataset file headers.

Per-signal draw order (fixed, part of the format): noise std, initial
phase, frequency-deviation walk, amplitude walk, baseline walk, change
sample position (when applicable), white noise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import runconfig
from .errors import ConfigError, DataError

GENERATOR_NAME = "philox"

LABEL_NORMAL = "no_change"
LABEL_ANOMALOUS = "anomalous_change"

DATASET_MAGIC = b"PPCD"
DATASET_VERSION = 1


def make_item_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(index)]))


# ---------------------------------------------------------------------------
# proportionality samples


def prop_mean(x1):
    return np.asarray(x1, dtype=np.float64)


def prop_std(x1):
    return 0.1 * np.asarray(x1, dtype=np.float64) + 2.0


def gen_prop_sample(rng: np.random.Generator):
    x1 = float(rng.choice([-10.0, 0.0, 10.0]))
    x2 = float(rng.normal(x1, prop_std(x1)))
    return x1, x2


def gen_prop_dataset(n: int, seed: int) -> np.ndarray:
    """[n, 2] array of (x1, x2) pairs from a single seeded stream."""
    if n < 1:
        raise ConfigError(f"gen_prop_dataset: n must be >= 1, got {n}")
    rng = make_item_rng(seed, 0x9E0B)
    x1 = rng.choice([-10.0, 0.0, 10.0], size=n)
    x2 = rng.normal(x1, prop_std(x1))
    return np.stack([x1, x2], axis=1)


# ---------------------------------------------------------------------------
# sine sequences


@dataclass(frozen=True)
class SineConfig:
    f_range: tuple[float, float] = (0.5, 10.0)
    f_band: float = 0.25
    amp_range: tuple[float, float] = (0.5, 2.0)
    baseline_range: tuple[float, float] = (-1.0, 1.0)
    noise_sigma_max: float = 0.2
    f_s: float = 128.0
    segment_len: int = 256
    n_segments: int = 8
    freq_step_std: float = 0.01
    amp_step_std: float = 0.002
    baseline_step_std: float = 0.002
    change_segment: int = 5

    def validate(self) -> None:
        if not self.f_range[0] < self.f_range[1]:
            raise ConfigError(f"f_range must be increasing, got {self.f_range}")
        for name in ("amp_range", "baseline_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} must be ordered, got {(lo, hi)}")
        if self.f_band < 0 or self.noise_sigma_max < 0:
            raise ConfigError("f_band and noise_sigma_max must be >= 0")
        if self.segment_len < 1 or not 0 <= self.change_segment < self.n_segments:
            raise ConfigError("bad segment geometry")

    @property
    def total_samples(self) -> int:
        return self.segment_len * self.n_segments

    def change_window(self) -> tuple[int, int]:
        start = self.change_segment * self.segment_len
        return start, start + self.segment_len


@dataclass(frozen=True)
class LabeledSequence:
    segments: np.ndarray  # [n_segments, segment_len] float32
    label: str
    f_before: float
    f_after: float
    change_sample: int | None = None

    @property
    def samples(self) -> np.ndarray:
        return self.segments.reshape(-1)

    @property
    def is_anomalous(self) -> bool:
        return self.label == LABEL_ANOMALOUS


def _fold(y: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Reflect values into [lo, hi] (handles multiple crossings)."""
    span = hi - lo
    if span == 0.0:
        return np.full_like(y, lo)
    u = np.mod(y - lo, 2.0 * span)
    return lo + np.where(u <= span, u, 2.0 * span - u)


def bounded_random_walk(rng, lo, hi, step_std, n, start=None) -> np.ndarray:
    """Random walk with Gaussian increments reflected at both bounds."""
    if lo > hi:
        raise ConfigError(f"bounded_random_walk: lo {lo} > hi {hi}")
    if step_std < 0:
        raise ConfigError(f"bounded_random_walk: step_std must be >= 0, got {step_std}")
    if start is None:
        start = rng.uniform(lo, hi)
    elif not lo <= start <= hi:
        raise ConfigError(f"bounded_random_walk: start {start} outside [{lo}, {hi}]")
    steps = rng.normal(0.0, step_std, size=n) if step_std > 0 else np.zeros(n)
    steps[0] = 0.0
    return _fold(start + np.cumsum(steps), lo, hi)


def gen_sine_signal(
    rng: np.random.Generator,
    f_before: float,
    f_after: float,
    change_sample: int | None = None,
    config: SineConfig = SineConfig(),
) -> LabeledSequence:
    """One drifting-sine sequence; frequency recenters at ``change_sample``."""
    config.validate()
    lo, hi = config.f_range
    for f in (f_before, f_after):
        if not lo <= f <= hi:
            raise ConfigError(f"frequency {f} outside [{lo}, {hi}]")
    w0, w1 = config.change_window()
    if change_sample is not None and not w0 <= change_sample < w1:
        raise ConfigError(
            f"change_sample {change_sample} outside segment window [{w0}, {w1})"
        )

    n = config.total_samples
    sigma_n = rng.uniform(0.0, config.noise_sigma_max)
    phase0 = rng.uniform(0.0, 2.0 * np.pi)
    half = config.f_band / 2.0
    deviation = bounded_random_walk(rng, -half, half, config.freq_step_std, n)
    amp = bounded_random_walk(rng, *config.amp_range, config.amp_step_std, n)
    baseline = bounded_random_walk(
        rng, *config.baseline_range, config.baseline_step_std, n
    )

    center = np.full(n, f_before)
    if change_sample is not None:
        center[change_sample:] = f_after
    freq = center + deviation

    # piecewise-constant frequency: the phase integral is an exact cumsum
    phase = phase0 + 2.0 * np.pi * np.concatenate(
        ([0.0], np.cumsum(freq[:-1]) / config.f_s)
    )
    noise = sigma_n * rng.standard_normal(n) if config.noise_sigma_max > 0 else np.zeros(n)
    samples = amp * np.sin(phase) + baseline + noise

    anomalous = change_sample is not None and f_before != f_after
    return LabeledSequence(
        segments=samples.reshape(config.n_segments, config.segment_len).astype(np.float32),
        label=LABEL_ANOMALOUS if anomalous else LABEL_NORMAL,
        f_before=float(f_before),
        f_after=float(f_after),
        change_sample=None if change_sample is None else int(change_sample),
    )


CHANGEPOINT_MODES = ("none", "all", "paired")


def gen_sequence_item(
    seed: int, index: int, with_change: bool, config: SineConfig = SineConfig()
) -> LabeledSequence:
    """Item ``index`` of a dataset: reproducible in isolation."""
    rng = make_item_rng(seed, index)
    lo, hi = config.f_range
    # metadata draws precede the signal draws so the signal stream is
    # identical for changed and unchanged items with the same frequencies
    f_before = float(rng.uniform(lo, hi))
    if with_change:
        f_after = float(rng.uniform(lo, hi))
        while f_after == f_before:  # zero-probability guard keeps labels exact
            f_after = float(rng.uniform(lo, hi))
        w0, w1 = config.change_window()
        change_sample = int(rng.integers(w0, w1))
    else:
        f_after = f_before
        change_sample = None
    return gen_sine_signal(rng, f_before, f_after, change_sample, config)


def gen_dataset(
    n: int,
    seed: int,
    changepoints: str = "none",
    config: SineConfig = SineConfig(),
):
    """Yield ``n`` labeled sequences.

    ``changepoints`` is one of ``none`` (all unchanged), ``all`` (every item
    gets an anomalous change) or ``paired`` (odd indices change; exact n/2
    label balance, n must be even).
    """
    if n < 1:
        raise ConfigError(f"gen_dataset: n must be >= 1, got {n}")
    if changepoints not in CHANGEPOINT_MODES:
        raise ConfigError(f"gen_dataset: changepoints must be one of {CHANGEPOINT_MODES}")
    if changepoints == "paired" and n % 2:
        raise ConfigError("gen_dataset: paired mode needs an even n")
    for i in range(n):
        with_change = {"none": False, "all": True, "paired": bool(i % 2)}[changepoints]
        yield gen_sequence_item(seed, i, with_change, config)


def sequences_to_array(items) -> np.ndarray:
    """[N, n_segments, segment_len] float32 training array."""
    return np.stack([it.segments for it in items]).astype(np.float32)


def gen_frequency_grid(
    resolution: float,
    reps: int,
    seed: int,
    config: SineConfig = SineConfig(),
):
    """Yield (f_before, f_after, signals) over the full frequency grid.

    Frequencies run from the lower bound up to (excluding) the upper bound
    in steps of ``resolution``; every cell gets ``reps`` signals whose
    change sample sits in the usual window (equal-frequency cells are
    labeled unchanged).
    """
    lo, hi = config.f_range
    span = hi - lo
    cells = round(span / resolution)
    if not (resolution > 0 and abs(cells * resolution - span) < 1e-9 and cells >= 1):
        raise ConfigError(f"resolution {resolution} does not divide span {span}")
    if reps < 1:
        raise ConfigError(f"reps must be >= 1, got {reps}")
    freqs = lo + resolution * np.arange(cells)
    for i, f_before in enumerate(freqs):
        for j, f_after in enumerate(freqs):
            base = (i * cells + j) * reps
            signals = []
            for r in range(reps):
                rng = make_item_rng(seed, base + r)
                w0, w1 = config.change_window()
                change = int(rng.integers(w0, w1))
                signals.append(
                    gen_sine_signal(rng, float(f_before), float(f_after), change, config)
                )
            yield float(f_before), float(f_after), signals


def grid_frequencies(resolution: float, config: SineConfig = SineConfig()) -> np.ndarray:
    lo, hi = config.f_range
    cells = round((hi - lo) / resolution)
    return lo + resolution * np.arange(cells)


# ---------------------------------------------------------------------------
# dataset files


def _header_tree(config: SineConfig, seed: int, count: int, changepoints: str):
    return {
        "kind": "sine",
        "generator": GENERATOR_NAME,
        "seed": seed,
        "count": count,
        "changepoints": changepoints,
        "sine": {
            "f_lo": config.f_range[0], "f_hi": config.f_range[1],
            "f_band": config.f_band,
            "amp_lo": config.amp_range[0], "amp_hi": config.amp_range[1],
            "baseline_lo": config.baseline_range[0],
            "baseline_hi": config.baseline_range[1],
            "noise_sigma_max": config.noise_sigma_max,
            "f_s": config.f_s,
            "segment_len": config.segment_len,
            "n_segments": config.n_segments,
            "freq_step_std": config.freq_step_std,
            "amp_step_std": config.amp_step_std,
            "baseline_step_std": config.baseline_step_std,
            "change_segment": config.change_segment,
        },
    }


def _config_from_tree(t: dict) -> SineConfig:
    return SineConfig(
        f_range=(t["f_lo"], t["f_hi"]),
        f_band=t["f_band"],
        amp_range=(t["amp_lo"], t["amp_hi"]),
        baseline_range=(t["baseline_lo"], t["baseline_hi"]),
        noise_sigma_max=t["noise_sigma_max"],
        f_s=t["f_s"],
        segment_len=t["segment_len"],
        n_segments=t["n_segments"],
        freq_step_std=t["freq_step_std"],
        amp_step_std=t["amp_step_std"],
        baseline_step_std=t["baseline_step_std"],
        change_segment=t["change_segment"],
    )


@dataclass
class PropDataset:
    """(x1, x2) pair dataset; sequences are two one-sample segments."""

    data: np.ndarray  # [N, 2] float32
    seed: int = 0

    def to_array(self) -> np.ndarray:
        return self.data.reshape(len(self.data), 2, 1).astype(np.float32)


@dataclass
class Dataset:
    items: list[LabeledSequence]
    config: SineConfig = field(default_factory=SineConfig)
    seed: int = 0
    changepoints: str = "none"

    def to_array(self) -> np.ndarray:
        return sequences_to_array(self.items)

    def labels(self) -> np.ndarray:
        return np.array([it.is_anomalous for it in self.items])


def save_dataset(path: str, dataset: Dataset) -> None:
    header = runconfig.dumps(
        _header_tree(dataset.config, dataset.seed, len(dataset.items), dataset.changepoints)
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(header)))
        fh.write(header)
        for it in dataset.items:
            change = -1 if it.change_sample is None else it.change_sample
            fh.write(struct.pack("<ffi", it.f_before, it.f_after, change))
            fh.write(np.ascontiguousarray(it.samples, dtype="<f4").tobytes())


def save_prop_dataset(path: str, dataset: PropDataset) -> None:
    header = runconfig.dumps({
        "kind": "prop",
        "generator": GENERATOR_NAME,
        "seed": dataset.seed,
        "count": len(dataset.data),
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(dataset.data, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise DataError(f"dataset file truncated while reading {what}")
    return blob


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != DATASET_MAGIC:
            raise DataError(f"{path}: bad magic, not a dataset file")
        version, header_len = struct.unpack("<II", _read_exact(fh, 8, "header size"))
        if version != DATASET_VERSION:
            raise DataError(f"{path}: unsupported dataset version {version}")
        tree = runconfig.loads(_read_exact(fh, header_len, "header").decode("utf-8"))
        kind = tree.get("kind")
        if kind not in ("sine", "prop"):
            raise DataError(f"{path}: unsupported dataset kind {kind!r}")
        if tree.get("generator") != GENERATOR_NAME:
            raise DataError(f"{path}: unknown generator {tree.get('generator')!r}")
        if kind == "prop":
            count = int(tree["count"])
            raw = _read_exact(fh, 8 * count, "samples")
            if fh.read(1):
                raise DataError(f"{path}: trailing bytes after {count} records")
            data = np.frombuffer(raw, dtype="<f4").reshape(count, 2).copy()
            return PropDataset(data=data, seed=int(tree["seed"]))
        config = _config_from_tree(tree["sine"])
        count = int(tree["count"])
        items = []
        n = config.total_samples
        for _ in range(count):
            f_before, f_after, change = struct.unpack("<ffi", _read_exact(fh, 12, "record"))
            raw = _read_exact(fh, 4 * n, "samples")
            samples = np.frombuffer(raw, dtype="<f4").reshape(
                config.n_segments, config.segment_len
            )
            anomalous = change >= 0 and f_before != f_after
            items.append(LabeledSequence(
                segments=samples.copy(),
                label=LABEL_ANOMALOUS if anomalous else LABEL_NORMAL,
                f_before=f_before,
                f_after=f_after,
                change_sample=None if change < 0 else change,
            ))
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after {count} records")
    return Dataset(items=items, config=config, seed=int(tree["seed"]),
                   changepoints=str(tree["changepoints"]))


def dataset_to_csv(dataset: Dataset) -> str:
    n = dataset.config.total_samples
    header = "index,label,f_before,f_after,change_sample," + ",".join(
        f"sample_{i}" for i in range(n)
    )
    lines = [header]
    for i, it in enumerate(dataset.items):
        change = "" if it.change_sample is None else str(it.change_sample)
        values = ",".join(f"{v:.7g}" for v in it.samples)
        lines.append(f"{i},{it.label},{it.f_before:.7g},{it.f_after:.7g},{change},{values}")
    return "\n".join(lines) + "\n"
