"""Pipeline assembly: declarative config, the four model families and
checkpointing.

A :class:`PipelineConfig` describes the encoder, sequence model, forecasters
and decoder; :func:`build_pipeline` turns it into a :class:`PpcModel` with
Glorot-initialized parameters.  Built-in presets mirror the three published
architecture configurations (dense proportionality model, convolutional
sine model, deep dense spectroscopy model).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import runconfig
from .autodiff import Tensor
from .errors import ConfigError, DataError
from .layers import Conv1dBlock, Conv1dLayer, DenseLayer, GruCell, MveHead, UpsampleBlock, make_rng

CHECKPOINT_MAGIC = b"PPCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Forecast:
    """Predicted latent mean and per-dimension std for one forecast step."""

    z_hat: np.ndarray
    sigma: np.ndarray
    step_index: int  # 1-based


@dataclass
class PipelineConfig:
    n_past: int
    n_forecast: int
    latent_size: int
    gru_units: int
    segment_shape: tuple[int, ...]
    encoder: list[dict]
    decoder: list[dict]
    forecaster_hidden: list[int]
    lambda_recon: float
    optimizer: dict = field(default_factory=lambda: {"lr": 1e-4, "rho": 0.9})
    schedule: dict = field(default_factory=lambda: {
        "warmup_iters": 1000, "max_iters": 50000, "eval_every": 250,
        "patience": 10, "batch_size": 64,
    })
    seed: int = 0

    _SCHEDULE_KEYS = ("warmup_iters", "max_iters", "eval_every", "patience", "batch_size")

    def validate(self) -> None:
        for name in ("n_past", "n_forecast", "latent_size", "gru_units"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lambda_recon < 0:
            raise ConfigError(f"lambda_recon must be >= 0, got {self.lambda_recon}")
        if not self.segment_shape or any(s < 1 for s in self.segment_shape):
            raise ConfigError(f"segment_shape must have positive extents, got {self.segment_shape}")
        if len(self.segment_shape) != 1:
            raise ConfigError("only 1-D segments are supported")
        if not (0 < self.optimizer.get("rho", 0.9) < 1):
            raise ConfigError(f"optimizer.rho must be in (0, 1), got {self.optimizer.get('rho')}")
        if self.optimizer.get("lr", 0) <= 0:
            raise ConfigError(f"optimizer.lr must be > 0, got {self.optimizer.get('lr')}")
        if set(self.optimizer) != {"lr", "rho"}:
            raise ConfigError(f"optimizer keys must be lr and rho, got {sorted(self.optimizer)}")
        if set(self.schedule) != set(self._SCHEDULE_KEYS):
            raise ConfigError(f"schedule keys must be {self._SCHEDULE_KEYS}, got {sorted(self.schedule)}")
        if self.schedule["warmup_iters"] < 0:
            raise ConfigError("schedule.warmup_iters must be >= 0")
        if self.schedule["batch_size"] < 1:
            raise ConfigError("schedule.batch_size must be >= 1")

    def to_tree(self) -> dict:
        return {
            "n_past": self.n_past,
            "n_forecast": self.n_forecast,
            "latent_size": self.latent_size,
            "gru_units": self.gru_units,
            "segment_shape": list(self.segment_shape),
            "encoder": self.encoder,
            "decoder": self.decoder,
            "forecaster_hidden": list(self.forecaster_hidden),
            "lambda_recon": float(self.lambda_recon),
            "optimizer": {"lr": float(self.optimizer["lr"]), "rho": float(self.optimizer["rho"])},
            "schedule": {k: int(self.schedule[k]) for k in self._SCHEDULE_KEYS},
            "seed": self.seed,
        }

    @classmethod
    def from_tree(cls, tree: dict) -> "PipelineConfig":
        if not isinstance(tree, dict):
            raise ConfigError("config root must be a mapping")
        known = {
            "n_past", "n_forecast", "latent_size", "gru_units", "segment_shape",
            "encoder", "decoder", "forecaster_hidden", "lambda_recon",
            "optimizer", "schedule", "seed",
        }
        unknown = set(tree) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = known - set(tree)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        seg = tree["segment_shape"]
        cfg = cls(
            n_past=int(tree["n_past"]),
            n_forecast=int(tree["n_forecast"]),
            latent_size=int(tree["latent_size"]),
            gru_units=int(tree["gru_units"]),
            segment_shape=tuple(seg) if isinstance(seg, list) else (int(seg),),
            encoder=list(tree["encoder"]),
            decoder=list(tree["decoder"]),
            forecaster_hidden=[int(u) for u in tree["forecaster_hidden"]],
            lambda_recon=float(tree["lambda_recon"]),
            optimizer=dict(tree["optimizer"]),
            schedule=dict(tree["schedule"]),
            seed=int(tree["seed"]),
        )
        cfg.validate()
        return cfg

    def to_text(self) -> str:
        return runconfig.dumps(self.to_tree())

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        return cls.from_tree(runconfig.loads(text))

    def with_overrides(self, **kwargs) -> "PipelineConfig":
        sched = dict(self.schedule)
        sched.update(kwargs.pop("schedule", {}))
        for k in list(kwargs):
            if k in self._SCHEDULE_KEYS:
                sched[k] = kwargs.pop(k)
        cfg = replace(self, schedule=sched, **kwargs)
        cfg.validate()
        return cfg


def preset(name: str, seed: int = 0) -> PipelineConfig:
    """Built-in architecture presets: 'prop', 'sine' and 'mrsi'."""
    if name == "prop":
        cfg = PipelineConfig(
            n_past=1, n_forecast=1, latent_size=4, gru_units=8,
            segment_shape=(1,),
            encoder=[{"kind": "dense", "units": 4, "activation": "linear"}],
            decoder=[{"kind": "dense", "units": 1, "activation": "linear"}],
            forecaster_hidden=[16, 16, 32, 32, 64, 64],
            lambda_recon=100.0,
            schedule={"warmup_iters": 1000, "max_iters": 50000, "eval_every": 250,
                      "patience": 10, "batch_size": 64},
            seed=seed,
        )
    elif name == "sine":
        cfg = PipelineConfig(
            n_past=5, n_forecast=3, latent_size=16, gru_units=32,
            segment_shape=(256,),
            encoder=[
                {"kind": "conv_block", "filters": 32, "kernel_size": 7, "pool_size": 4, "batchnorm": True},
                {"kind": "conv_block", "filters": 64, "kernel_size": 7, "pool_size": 4, "batchnorm": True},
                {"kind": "flatten"},
                {"kind": "dense", "units": 16, "activation": "linear"},
            ],
            decoder=[
                {"kind": "dense", "units": 1024, "activation": "relu"},
                {"kind": "reshape", "channels": 64, "length": 16},
                {"kind": "upsample_block", "filters": 64, "kernel_size": 7, "factor": 4},
                {"kind": "upsample_block", "filters": 32, "kernel_size": 7, "factor": 4},
                {"kind": "conv", "filters": 1, "kernel_size": 7, "activation": "linear"},
            ],
            forecaster_hidden=[64, 128, 256],
            lambda_recon=1e4,
            schedule={"warmup_iters": 1000, "max_iters": 400000, "eval_every": 500,
                      "patience": 20, "batch_size": 32},
            seed=seed,
        )
    elif name == "mrsi":
        cfg = PipelineConfig(
            n_past=1, n_forecast=1, latent_size=16, gru_units=32,
            segment_shape=(32,),
            encoder=[
                {"kind": "dense", "units": 512, "activation": "relu"},
                {"kind": "dense", "units": 512, "activation": "relu"},
                {"kind": "dense", "units": 512, "activation": "relu"},
                {"kind": "dense", "units": 512, "activation": "relu"},
                {"kind": "dense", "units": 16, "activation": "linear"},
            ],
            decoder=[
                {"kind": "dense", "units": 512, "activation": "relu"},
                {"kind": "dense", "units": 512, "activation": "relu"},
                {"kind": "dense", "units": 512, "activation": "relu"},
                {"kind": "dense", "units": 512, "activation": "relu"},
                {"kind": "dense", "units": 32, "activation": "linear"},
            ],
            forecaster_hidden=[64, 64, 128, 128, 256, 256],
            lambda_recon=1e5,
            schedule={"warmup_iters": 20000, "max_iters": 2000000, "eval_every": 1000,
                      "patience": 20, "batch_size": 256},
            seed=seed,
        )
    else:
        raise ConfigError(f"unknown preset {name!r}; available: prop, sine, mrsi")
    cfg.validate()
    return cfg


class _Stack:
    """Sequential encoder/decoder stack built from a declarative layer list.

    Items are (kind, payload) pairs where payload is a layer object, a
    reshape target or None for flatten.
    """

    def __init__(self, items):
        self.items = items

    def parameters(self):
        ps = []
        for i, (kind, payload) in enumerate(self.items):
            if hasattr(payload, "parameters"):
                ps += [(f"{i}.{n}", t) for n, t in payload.parameters()]
        return ps

    def layers(self):
        return [payload for _, payload in self.items if hasattr(payload, "initialize")]

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        h = x
        for kind, payload in self.items:
            if kind == "dense":
                h = payload.forward(h)
            elif kind == "conv_block":
                if h.data.ndim == 2:  # add the implicit single channel
                    h = ad.reshape(h, (h.shape[0], 1, h.shape[1]))
                h = payload.forward(h, training=training)
            elif kind == "upsample_block":
                h = payload.forward(h)
            elif kind == "conv":
                h = payload.forward(h)
            elif kind == "flatten":
                b = h.shape[0]
                h = ad.reshape(h, (b, int(np.prod(h.shape[1:]))))
            elif kind == "reshape":
                c, length = payload
                h = ad.reshape(h, (h.shape[0], c, length))
            else:
                raise ConfigError(f"unknown layer kind {kind!r}")
        return h


def _build_stack(spec: list[dict], in_shape: tuple, rng, dtype, where: str):
    """Build a stack from a spec, tracking shapes; returns (stack, out_shape).

    Shapes are per-sample: (features,) for dense data, (channels, length)
    for conv data.
    """
    items = []
    shape = tuple(in_shape)
    for i, layer in enumerate(spec):
        kind = layer.get("kind")
        loc = f"{where}.{i}"
        if kind == "dense":
            if len(shape) != 1:
                raise ConfigError(f"{loc}: dense layer needs flat input, have shape {shape}")
            obj = DenseLayer(shape[0], int(layer["units"]), layer.get("activation", "linear"), rng, dtype)
            items.append(("dense", obj))
            shape = (int(layer["units"]),)
        elif kind == "conv_block":
            if len(shape) == 1:
                shape = (1, shape[0])
            c, length = shape
            pool = int(layer["pool_size"])
            if length % pool != 0:
                raise ConfigError(f"{loc}: pool_size {pool} does not divide length {length}")
            obj = Conv1dBlock(c, int(layer["filters"]), int(layer["kernel_size"]), pool,
                              bool(layer.get("batchnorm", True)), rng, dtype)
            items.append(("conv_block", obj))
            shape = (int(layer["filters"]), length // pool)
        elif kind == "upsample_block":
            if len(shape) != 2:
                raise ConfigError(f"{loc}: upsample_block needs (channels, length) input, have {shape}")
            c, length = shape
            obj = UpsampleBlock(c, int(layer["filters"]), int(layer["kernel_size"]),
                                int(layer["factor"]), rng, dtype)
            items.append(("upsample_block", obj))
            shape = (int(layer["filters"]), length * int(layer["factor"]))
        elif kind == "conv":
            if len(shape) != 2:
                raise ConfigError(f"{loc}: conv needs (channels, length) input, have {shape}")
            c, length = shape
            obj = Conv1dLayer(c, int(layer["filters"]), int(layer["kernel_size"]),
                              layer.get("activation", "linear"), rng, dtype)
            items.append(("conv", obj))
            shape = (int(layer["filters"]), length)
        elif kind == "flatten":
            items.append(("flatten", None))
            shape = (int(np.prod(shape)),)
        elif kind == "reshape":
            c, length = int(layer["channels"]), int(layer["length"])
            if int(np.prod(shape)) != c * length:
                raise ConfigError(f"{loc}: cannot reshape {shape} to ({c}, {length})")
            items.append(("reshape", (c, length)))
            shape = (c, length)
        else:
            raise ConfigError(f"{loc}: unknown layer kind {kind!r}")
    return _Stack(items), shape


class ForecasterNet:
    """One forecasting network: dense ReLU trunk plus a mean-variance head."""

    def __init__(self, in_size: int, hidden: list[int], latent_size: int, rng, dtype):
        self.hidden_layers = []
        size = in_size
        for units in hidden:
            self.hidden_layers.append(DenseLayer(size, units, "relu", rng, dtype))
            size = units
        self.head = MveHead(size, latent_size, rng, dtype)

    def parameters(self):
        ps = []
        for i, layer in enumerate(self.hidden_layers):
            ps += [(f"hidden.{i}.{n}", t) for n, t in layer.parameters()]
        ps += [(f"head.{n}", t) for n, t in self.head.parameters()]
        return ps

    def preactivations(self, c: Tensor):
        h = c
        for layer in self.hidden_layers:
            h = layer.forward(h)
        return self.head.preactivations(h)


class PpcModel:
    """Assembled pipeline: encoder, sequence model, forecasters, decoder."""

    def __init__(self, config: PipelineConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        self.train_iterations = 0
        rng = make_rng(config.seed)
        seg = config.segment_shape
        self.encoder, enc_out = _build_stack(config.encoder, seg, rng, dtype, "encoder")
        if enc_out != (config.latent_size,):
            raise ConfigError(
                f"encoder: output shape {enc_out} does not match latent_size {config.latent_size}"
            )
        self.gru = GruCell(config.latent_size, config.gru_units, rng, dtype)
        self.forecasters = [
            ForecasterNet(config.gru_units, config.forecaster_hidden, config.latent_size, rng, dtype)
            for _ in range(config.n_forecast)
        ]
        self.decoder, dec_out = _build_stack(config.decoder, (config.latent_size,), rng, dtype, "decoder")
        if dec_out not in (seg, (1,) + seg):
            raise ConfigError(
                f"decoder: output shape {dec_out} does not match segment_shape {seg}"
            )
        self._decoder_has_channel = dec_out == (1,) + seg

    # -- parameters ---------------------------------------------------------

    def parameters(self):
        ps = [(f"encoder.{n}", t) for n, t in self.encoder.parameters()]
        ps += [(f"gru.{n}", t) for n, t in self.gru.parameters()]
        for i, f in enumerate(self.forecasters):
            ps += [(f"forecaster.{i}.{n}", t) for n, t in f.parameters()]
        ps += [(f"decoder.{n}", t) for n, t in self.decoder.parameters()]
        return ps

    def sigma_head_parameters(self):
        ps = []
        for i, f in enumerate(self.forecasters):
            ps += [(f"forecaster.{i}.head.std_layer.{n}", t)
                   for n, t in f.head.std_layer.parameters()]
        return ps

    def count_parameters(self) -> int:
        return sum(t.data.size for _, t in self.parameters())

    def batchnorm_state(self):
        """(name, array) pairs of batchnorm running statistics."""
        out = []
        for i, (kind, payload) in enumerate(self.encoder.items):
            if kind == "conv_block" and payload.has_batchnorm:
                out.append((f"encoder.{i}.running_mean", payload.running_mean))
                out.append((f"encoder.{i}.running_var", payload.running_var))
        return out

    def set_batchnorm_state(self, name: str, value: np.ndarray) -> None:
        prefix, _, stat = name.rpartition(".")
        idx = int(prefix.split(".")[1])
        payload = self.encoder.items[idx][1]
        setattr(payload, stat, value.astype(payload.dtype))

    # -- graph-building forwards (used by training) -------------------------

    def encode_graph(self, xb: Tensor, training: bool = False) -> Tensor:
        """Encode a batch [B, segment_len] to latents [B, N_e]."""
        return self.encoder.forward(xb, training=training)

    def context_graph(self, z_steps: list[Tensor]) -> Tensor:
        """Summarize n_past latent batches [B, N_e] into contexts [B, N_g]."""
        return self.gru.run(z_steps)

    def forecast_graph(self, c: Tensor):
        """Per-step (z_hat, log_sigma) graph tensors from contexts [B, N_g]."""
        return [f.preactivations(c) for f in self.forecasters]

    def decode_graph(self, zb: Tensor) -> Tensor:
        """Decode latents [B, N_e] to segments [B, segment_len]."""
        out = self.decoder.forward(zb)
        if self._decoder_has_channel:
            out = ad.reshape(out, (out.shape[0], out.shape[2]))
        return out

    # -- inference API ------------------------------------------------------

    def _as_batch(self, x_seq) -> np.ndarray:
        seg = self.config.segment_shape
        xb = np.asarray(x_seq, dtype=self.dtype)
        if xb.ndim == 1:
            xb = xb[None, :]
        if xb.shape[1:] != seg:
            raise ad.ShapeError(f"encode: segments must have shape {seg}, got {xb.shape[1:]}")
        return xb

    def encode(self, x_seq: list) -> list[np.ndarray]:
        """Encode data instances (inference mode; running batchnorm stats)."""
        if len(x_seq) == 0:
            return []
        xb = self._as_batch(x_seq)
        out = self.encode_graph(Tensor(xb), training=False)
        return [row for row in out.data]

    def predict(self, z_past: list[np.ndarray]) -> list[Forecast]:
        """Forecast n_forecast latent distributions from n_past latents."""
        cfg = self.config
        if len(z_past) != cfg.n_past:
            raise ad.ShapeError(f"predict: expected {cfg.n_past} latents, got {len(z_past)}")
        zs = []
        for z in z_past:
            z = np.asarray(z, dtype=self.dtype)
            if z.shape != (cfg.latent_size,):
                raise ad.ShapeError(f"predict: latents must have length {cfg.latent_size}, got {z.shape}")
            zs.append(Tensor(z[None, :]))
        c = self.context_graph(zs)
        out = []
        for i, f in enumerate(self.forecasters, start=1):
            z_hat, log_sigma = f.preactivations(c)
            sigma = np.exp(np.clip(log_sigma.data.astype(np.float64), -700.0, 700.0))
            out.append(Forecast(z_hat=z_hat.data[0].copy(), sigma=sigma[0], step_index=i))
        return out

    def predict_batch(self, z_past: np.ndarray):
        """Vectorized predict: [B, n_past, N_e] -> list of (z_hat, sigma) arrays."""
        cfg = self.config
        steps = [Tensor(np.ascontiguousarray(z_past[:, k, :], dtype=self.dtype))
                 for k in range(cfg.n_past)]
        c = self.context_graph(steps)
        out = []
        for f in self.forecasters:
            z_hat, log_sigma = f.preactivations(c)
            sigma = np.exp(np.clip(log_sigma.data.astype(np.float64), -700.0, 700.0))
            out.append((z_hat.data.copy(), sigma))
        return out

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=self.dtype)
        if z.shape != (self.config.latent_size,):
            raise ad.ShapeError(
                f"reconstruct: latent must have length {self.config.latent_size}, got {z.shape}"
            )
        return self.decode_graph(Tensor(z[None, :])).data[0]


def build_pipeline(config: PipelineConfig, dtype=np.float32) -> PpcModel:
    return PpcModel(config, dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoint io


def save_checkpoint(model: PpcModel, path: str) -> None:
    """Binary checkpoint: magic, version, config text, parameter records."""
    meta = runconfig.dumps({
        "config": model.config.to_tree(),
        "train_iterations": model.train_iterations,
    }).encode("utf-8")
    records = [(n, t.data) for n, t in model.parameters()]
    records += [(n, v) for n, v in model.batchnorm_state()]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for name, arr in records:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path: str) -> PpcModel:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise DataError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        meta = runconfig.loads(_read_exact(fh, meta_len, "config").decode("utf-8"))
        config = PipelineConfig.from_tree(meta["config"])
        model = build_pipeline(config)
        model.train_iterations = int(meta.get("train_iterations", 0))
        params = dict(model.parameters())
        bn_names = {n for n, _ in model.batchnorm_state()}
        seen = set()
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise DataError("checkpoint truncated while reading record header")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "record rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "record dims"))
            data = np.frombuffer(
                _read_exact(fh, 4 * int(np.prod(dims)), f"record {name}"), dtype="<f4"
            ).reshape(dims)
            if name in params:
                if params[name].data.shape != data.shape:
                    raise DataError(f"checkpoint record {name} has shape {data.shape}, "
                                    f"expected {params[name].data.shape}")
                params[name].data = data.astype(model.dtype)
            elif name in bn_names:
                model.set_batchnorm_state(name, data)
            else:
                raise DataError(f"checkpoint contains unknown record {name!r}")
            seen.add(name)
        missing = (set(params) | bn_names) - seen
        if missing:
            raise DataError(f"checkpoint missing records: {sorted(missing)[:5]}")
    return model
