"""End-to-end experiment drivers shared by the CLI and the acceptance suite.

* proportionality experiment: learn ``x2 ~ N(x1, (0.1 x1 + 2)^2)`` and
  recover the conditional mean and standard deviation per ``x1``;
* sine experiment: train on unchanged signals, score a balanced
  change-point test set, report ROC AUC;
* frequency grid: average conformance per (f_before, f_after) cell.
"""

from __future__ import annotations

import numpy as np

from . import datagen as dg
from .autodiff import Tensor
from .estimator import batch_conformance
from .metrics import fit_gaussian
from .model import PpcModel, build_pipeline, preset
from .training import TrainResult, train

PROP_X1_VALUES = (-10.0, 0.0, 10.0)


PROP_GRID_LO, PROP_GRID_HI, PROP_GRID_STEP = -16.0, 28.0, 0.05


def estimate_prop_params(model: PpcModel, x1: float) -> tuple[float, float]:
    """Learned conditional mean/std of x2 given x1.

    Evaluates the forecast's latent density at the encodings of a dense x2
    grid, normalizes it into a density over x2, and fits a Gaussian by
    moments.
    """
    z1 = model.encode([np.array([x1], dtype=np.float32)])
    (forecast,) = model.predict(z1)
    xs = np.arange(PROP_GRID_LO, PROP_GRID_HI + PROP_GRID_STEP / 2, PROP_GRID_STEP)
    z_grid = model.encode_graph(
        Tensor(xs[:, None].astype(model.dtype)), training=False
    ).data.astype(np.float64)
    log_f = -0.5 * np.sum(((z_grid - forecast.z_hat) / forecast.sigma) ** 2, axis=1)
    pdf = np.exp(log_f - np.max(log_f))
    mu, sigma = fit_gaussian(xs, pdf)
    return mu, sigma


def run_prop_experiment(
    seed: int,
    n_train: int = 20_000,
    warmup_iters: int = 1000,
    max_iters: int = 50_000,
    patience: int = 1000,
    val_fraction: float = 0.1,
) -> tuple[list[dict], TrainResult]:
    """One training run; returns per-x1 rows of true and estimated moments.

    The default patience effectively disables early stopping: the loss
    keeps improving slowly for the whole run while redundant latent
    dimensions collapse, and the recovered standard deviation is biased
    low until they do.
    """
    cfg = preset("prop", seed=seed).with_overrides(
        warmup_iters=warmup_iters, max_iters=max_iters, patience=patience
    )
    data = dg.gen_prop_dataset(n_train, seed=seed)
    sequences = data.reshape(n_train, 2, 1).astype(np.float32)
    n_val = max(1, int(round(n_train * val_fraction)))
    model = build_pipeline(cfg)
    result = train(model, sequences[:-n_val], sequences[-n_val:])
    rows = []
    for x1 in PROP_X1_VALUES:
        mu_hat, sigma_hat = estimate_prop_params(model, x1)
        rows.append({
            "x1": x1,
            "mu": float(dg.prop_mean(x1)),
            "sigma": float(dg.prop_std(x1)),
            "mu_hat": mu_hat,
            "sigma_hat": sigma_hat,
        })
    return rows, result


def prop_summary_rows(all_rows: list[list[dict]]) -> list[dict]:
    """Aggregate repeated runs into one row per x1 with mean and spread."""
    out = []
    for i, x1 in enumerate(PROP_X1_VALUES):
        mu_hats = np.array([rows[i]["mu_hat"] for rows in all_rows])
        sigma_hats = np.array([rows[i]["sigma_hat"] for rows in all_rows])
        single = len(all_rows) == 1
        out.append({
            "x1": x1,
            "mu": all_rows[0][i]["mu"],
            "sigma": all_rows[0][i]["sigma"],
            "mu_hat_mean": float(np.mean(mu_hats)),
            "mu_hat_sd": None if single else float(np.std(mu_hats, ddof=1)),
            "sigma_hat_mean": float(np.mean(sigma_hats)),
            "sigma_hat_sd": None if single else float(np.std(sigma_hats, ddof=1)),
        })
    return out


def prop_rows_to_csv(rows: list[dict]) -> str:
    cols = ("x1", "mu", "sigma", "mu_hat_mean", "mu_hat_sd",
            "sigma_hat_mean", "sigma_hat_sd")
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(
            "" if row[c] is None else f"{row[c]:.6g}" for c in cols
        ))
    return "\n".join(lines) + "\n"


def run_sine_experiment(
    seed: int,
    n_train: int = 100_000,
    warmup_iters: int = 1000,
    max_iters: int = 21_000,
    n_test: int = 20_000,
    patience: int = 1000,
    config: dg.SineConfig = dg.SineConfig(),
    log_fn=None,
):
    """Train on unchanged signals, score a balanced test set.

    Returns (model, train_result, scores, labels).
    """
    cfg = preset("sine", seed=seed).with_overrides(
        warmup_iters=warmup_iters, max_iters=max_iters, patience=patience
    )
    signals = dg.sequences_to_array(dg.gen_dataset(n_train, seed=seed, config=config))
    n_val = max(1, n_train // 10)
    model = build_pipeline(cfg)
    result = train(model, signals[:-n_val], signals[-n_val:], log_fn=log_fn)

    test = list(dg.gen_dataset(n_test, seed=seed + 1, changepoints="paired",
                               config=config))
    labels = np.array([it.is_anomalous for it in test])
    scores, _ = batch_conformance(model, dg.sequences_to_array(test))
    return model, result, scores, labels


def grid_scores(
    model: PpcModel,
    resolution: float,
    reps: int,
    seed: int,
    config: dg.SineConfig = dg.SineConfig(),
) -> list[dict]:
    """Average p and log-likelihood per frequency-grid cell."""
    rows = []
    for f_before, f_after, signals in dg.gen_frequency_grid(resolution, reps, seed, config):
        arr = dg.sequences_to_array(signals)
        p_seq, mean_ll = batch_conformance(model, arr)
        rows.append({
            "f_before": f_before,
            "f_after": f_after,
            "mean_p": float(np.mean(p_seq)),
            "mean_log_likelihood": float(np.mean(mean_ll)),
        })
    return rows


def grid_rows_to_csv(rows: list[dict]) -> str:
    cols = ("f_before", "f_after", "mean_p", "mean_log_likelihood")
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(f"{row[c]:.8g}" for c in cols))
    return "\n".join(lines) + "\n"


def grid_diagonal_contrast(rows: list[dict], band: float, far: float = 2.0):
    """Mean p near the diagonal minus mean p over far-off-diagonal cells."""
    near = [r["mean_p"] for r in rows if abs(r["f_before"] - r["f_after"]) <= band]
    far_cells = [r["mean_p"] for r in rows if abs(r["f_before"] - r["f_after"]) >= far]
    return float(np.mean(near)), float(np.mean(far_cells))
