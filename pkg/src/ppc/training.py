"""Training: maximum-likelihood and warm-up losses, RMSprop, and the
convergence-driven loop.

The loop runs ``warmup_iters`` iterations on the mean-squared warm-up
objective with the std heads excluded from the optimizer (their parameters
never appear in the warm-up graph, so no gradient can reach them), then
switches to the full MLE objective plus ``lambda * reconstruction`` until
the validation loss stops improving or ``max_iters`` is reached.  The best
validation checkpoint is returned.  Everything is deterministic per seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .model import Forecast, PpcModel

LOG_SQRT_2PI = math.log(math.sqrt(2.0 * math.pi))
RMSPROP_EPS = 1e-8
# relative improvement below this does not reset patience
IMPROVEMENT_RTOL = 1e-5

HISTORY_COLUMNS = ("iteration", "phase", "train_loss", "val_loss", "mle_component", "recon_component")


# ---------------------------------------------------------------------------
# value-level losses


def mle_loss(z_true: list[np.ndarray], forecasts: list[Forecast]) -> float:
    """Negative mean Gaussian log-likelihood over the forecast steps."""
    if len(z_true) != len(forecasts):
        raise ValueError(f"mle_loss: {len(z_true)} targets vs {len(forecasts)} forecasts")
    n_f = len(forecasts)
    n_e = np.asarray(z_true[0]).size
    total = 0.0
    for z, f in zip(z_true, forecasts):
        z = np.asarray(z, dtype=np.float64)
        sigma = np.asarray(f.sigma, dtype=np.float64)
        if np.any(sigma <= 0):
            raise ValueError("mle_loss: sigma must be strictly positive")
        total += np.sum(np.log(sigma)) + 0.5 * np.sum((z - f.z_hat) ** 2 / sigma**2)
    return float(n_e * LOG_SQRT_2PI + total / n_f)


def warmup_loss(z_true: list[np.ndarray], z_hat: list[np.ndarray]) -> float:
    """MLE loss with all sigmas fixed at one: mean squared error form."""
    if len(z_true) != len(z_hat):
        raise ValueError(f"warmup_loss: {len(z_true)} targets vs {len(z_hat)} predictions")
    n_f = len(z_true)
    n_e = np.asarray(z_true[0]).size
    total = sum(
        np.sum((np.asarray(z, dtype=np.float64) - np.asarray(zh, dtype=np.float64)) ** 2)
        for z, zh in zip(z_true, z_hat)
    )
    return float(n_e * LOG_SQRT_2PI + total / (2.0 * n_f))


def recon_loss(x_seq: list[np.ndarray], x_hat_seq: list[np.ndarray]) -> float:
    """Mean over segments of the per-segment mean squared error."""
    if len(x_seq) != len(x_hat_seq):
        raise ValueError(f"recon_loss: {len(x_seq)} inputs vs {len(x_hat_seq)} reconstructions")
    mses = []
    for x, xh in zip(x_seq, x_hat_seq):
        x = np.asarray(x, dtype=np.float64)
        xh = np.asarray(xh, dtype=np.float64)
        if x.shape != xh.shape:
            raise ValueError(f"recon_loss: shape mismatch {x.shape} vs {xh.shape}")
        mses.append(np.mean((x - xh) ** 2))
    return float(np.mean(mses))


def joint_loss(mle: float, recon: float, lambda_recon: float) -> float:
    if lambda_recon < 0:
        raise ValueError(f"joint_loss: lambda must be >= 0, got {lambda_recon}")
    return mle + lambda_recon * recon


# ---------------------------------------------------------------------------
# optimizer


def rmsprop_step(params, grads, state, lr: float, rho: float, eps: float = RMSPROP_EPS):
    """One in-place RMSprop update; ``state`` maps index -> running mean of g^2."""
    for i, (p, g) in enumerate(zip(params, grads)):
        s = state.get(i)
        if s is None:
            s = np.zeros_like(p)
        s = rho * s + (1.0 - rho) * g * g
        state[i] = s
        p -= lr * g / np.sqrt(s + eps)


class RmsProp:
    """RMSprop over named parameter tensors; keyed state survives re-scoping."""

    def __init__(self, lr: float, rho: float, eps: float = RMSPROP_EPS):
        if lr <= 0 or not (0 < rho < 1):
            raise ValueError(f"RmsProp: need lr > 0 and 0 < rho < 1, got lr={lr} rho={rho}")
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.state: dict[str, np.ndarray] = {}

    def step(self, named_params) -> None:
        for name, t in named_params:
            if t.grad is None:
                continue
            g = t.grad
            s = self.state.get(name)
            if s is None:
                s = np.zeros_like(t.data)
            s = self.rho * s + (1.0 - self.rho) * g * g
            self.state[name] = s
            t.data -= (self.lr * g / np.sqrt(s + self.eps)).astype(t.data.dtype)


# ---------------------------------------------------------------------------
# graph-level objective


def _const(v: float, dtype) -> Tensor:
    return Tensor(np.asarray(v, dtype=dtype))


def _sequence_graph(model: PpcModel, batch: np.ndarray, training: bool):
    """Encode a [B, S, L] batch and return (z_steps, z_flat, x_flat)."""
    b, s, length = batch.shape
    flat = np.ascontiguousarray(batch.reshape(b * s, length), dtype=model.dtype)
    x_flat = Tensor(flat)
    z_flat = model.encode_graph(x_flat, training=training)
    n_e = model.config.latent_size
    z_all = ad.reshape(z_flat, (b, s, n_e))
    z_steps = [
        ad.reshape(ad.slice_(z_all, 1, k, k + 1), (b, n_e)) for k in range(s)
    ]
    return z_steps, z_flat, x_flat


def batch_objective(model: PpcModel, batch: np.ndarray, warmup: bool, training: bool = True):
    """Joint loss graph for one [B, S, L] batch.

    Returns (loss, mle_value, recon_value).  During warm-up the std heads
    are never evaluated, so their parameters receive no gradient.
    """
    cfg = model.config
    dtype = model.dtype
    n_p, n_f, n_e = cfg.n_past, cfg.n_forecast, cfg.latent_size
    z_steps, z_flat, x_flat = _sequence_graph(model, batch, training)
    c = model.context_graph(z_steps[:n_p])

    step_terms = []
    for i, forecaster in enumerate(model.forecasters):
        z_true = z_steps[n_p + i]
        if warmup:
            h = c
            for layer in forecaster.hidden_layers:
                h = layer.forward(h)
            z_hat = forecaster.head.mean_layer.forward(h)
            sq = ad.square(ad.sub(z_true, z_hat))
            term = ad.mul(_const(0.5, dtype), ad.reduce_sum(sq, axis=1))
        else:
            z_hat, log_sigma = forecaster.preactivations(c)
            diff = ad.sub(z_true, z_hat)
            scaled = ad.mul(diff, ad.exp(ad.mul(_const(-1.0, dtype), log_sigma)))
            term = ad.add(
                ad.reduce_sum(log_sigma, axis=1),
                ad.mul(_const(0.5, dtype), ad.reduce_sum(ad.square(scaled), axis=1)),
            )
        step_terms.append(ad.reduce_mean(term))

    acc = step_terms[0]
    for t in step_terms[1:]:
        acc = ad.add(acc, t)
    mle = ad.add(_const(n_e * LOG_SQRT_2PI, dtype), ad.mul(_const(1.0 / n_f, dtype), acc))

    x_hat = model.decode_graph(z_flat)
    recon = ad.reduce_mean(ad.square(ad.sub(x_flat, x_hat)))
    loss = ad.add(mle, ad.mul(_const(cfg.lambda_recon, dtype), recon))
    return loss, float(mle.data), float(recon.data)


def evaluate_loss(model: PpcModel, data: np.ndarray, batch_size: int = 512):
    """Full objective on held-out data, inference mode; (loss, mle, recon)."""
    losses, mles, recons = [], [], []
    for start in range(0, len(data), batch_size):
        chunk = data[start:start + batch_size]
        loss, mle, recon = batch_objective(model, chunk, warmup=False, training=False)
        w = len(chunk)
        losses.append(float(loss.data) * w)
        mles.append(mle * w)
        recons.append(recon * w)
    n = len(data)
    return sum(losses) / n, sum(mles) / n, sum(recons) / n


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: PpcModel
    history: list[dict]
    best_val_loss: float


def history_to_csv(history: list[dict]) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join(
            f"{row[c]:.8g}" if isinstance(row[c], float) else str(row[c])
            for c in HISTORY_COLUMNS
        ))
    return "\n".join(lines) + "\n"


def _snapshot(model: PpcModel):
    params = {n: t.data.copy() for n, t in model.parameters()}
    bn = {n: v.copy() for n, v in model.batchnorm_state()}
    return params, bn


def _restore(model: PpcModel, snapshot) -> None:
    params, bn = snapshot
    for n, t in model.parameters():
        t.data = params[n].copy()
    for n, v in bn.items():
        model.set_batchnorm_state(n, v)


def train(
    model: PpcModel,
    train_data: np.ndarray,
    val_data: np.ndarray,
    schedule: dict | None = None,
    val_limit: int = 2048,
    log_fn=None,
) -> TrainResult:
    """Train in place; returns the best-validation checkpoint and history.

    ``train_data`` and ``val_data`` are [N, n_past + n_forecast, segment]
    arrays.  Batches are sampled with replacement from a Philox stream
    derived from the config seed, so the whole run is reproducible.
    """
    cfg = model.config
    sched = dict(cfg.schedule)
    if schedule:
        sched.update(schedule)
    warmup_iters = int(sched["warmup_iters"])
    max_iters = int(sched["max_iters"])
    eval_every = int(sched["eval_every"])
    patience = int(sched["patience"])
    batch_size = int(sched["batch_size"])
    if max_iters < warmup_iters:
        raise ValueError(f"max_iters {max_iters} < warmup_iters {warmup_iters}")

    expected = (cfg.n_past + cfg.n_forecast,) + cfg.segment_shape
    if train_data.ndim != 3 or train_data.shape[1:] != expected:
        raise ValueError(f"train: expected data shaped [N, {expected[0]}, {expected[1]}], "
                         f"got {train_data.shape}")

    rng = np.random.Generator(np.random.Philox(key=[np.uint64(cfg.seed), np.uint64(0xBA7C)]))
    train_data = np.ascontiguousarray(train_data, dtype=model.dtype)
    val_view = np.ascontiguousarray(val_data[:val_limit], dtype=model.dtype)

    sigma_names = {n for n, _ in model.sigma_head_parameters()}
    all_params = model.parameters()
    warm_params = [(n, t) for n, t in all_params if n not in sigma_names]
    opt = RmsProp(cfg.optimizer["lr"], cfg.optimizer["rho"])

    history: list[dict] = []
    best = None
    best_val = math.inf
    stale = 0

    def record(it, phase, train_loss, mle_c, recon_c, val_loss):
        history.append({
            "iteration": it, "phase": phase, "train_loss": train_loss,
            "val_loss": val_loss, "mle_component": mle_c, "recon_component": recon_c,
        })
        if log_fn:
            log_fn(history[-1])

    it = 0
    while it < max_iters:
        it += 1
        warmup = it <= warmup_iters
        idx = rng.integers(0, len(train_data), size=batch_size)
        batch = train_data[idx]
        with Tape() as tape:
            loss, mle_c, recon_c = batch_objective(model, batch, warmup=warmup)
        train_loss = float(loss.data)
        if not math.isfinite(train_loss):
            raise ad.NumericError(
                f"train: non-finite loss at iteration {it} "
                f"(mle={mle_c}, recon={recon_c})"
            )
        active = warm_params if warmup else all_params
        for _, t in active:
            t.zero_grad()
        ad.backward(tape, loss)
        opt.step(active)
        model.train_iterations += 1

        at_warmup_end = it == warmup_iters
        if it % eval_every == 0 or at_warmup_end or it == max_iters:
            val_loss, _, _ = evaluate_loss(model, val_view)
            phase = "warmup" if warmup else "full"
            record(it, phase, train_loss, mle_c, recon_c, val_loss)
            if val_loss < best_val * (1.0 - IMPROVEMENT_RTOL) or best is None:
                best_val = min(best_val, val_loss)
                best = _snapshot(model)
                stale = 0
            elif not warmup:
                stale += 1
                if stale >= patience:
                    break

    if best is not None:
        _restore(model, best)
    return TrainResult(model=model, history=history, best_val_loss=best_val)
