"""Accuracy experiments: estimator error versus group size, k, and epsilon.

Each trial draws n true statuses, randomizes them client-side, debiases
the tally, and measures |estimated mean risk - empirical mean risk of the
drawn group|.  Measuring against the empirical mean rather than the
sampling distribution's mean isolates the randomizer's noise from plain
sampling variation, which matters at small n.

Curves are averaged over independent trials.  Every trial's generator is
derived by feeding (seed, k, exp-epsilon, n, trial) into a seed sequence,
so a curve is reproducible on its own, in parallel, or reordered.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence, TextIO

import numpy as np

from .dp import Policy, debias, expected_risk, parse_epsilon, randomize_many

__all__ = [
    "ExperimentConfig",
    "ErrorCurve",
    "PRESETS",
    "trial_rng",
    "run_trial",
    "run_curve",
    "run_preset",
    "write_csv",
    "epsilon_direction_note",
    "plot_curves",
]

CSV_COLUMNS = ("preset", "k", "epsilon_num", "epsilon_den", "n", "mean_abs_error", "trials")

# simulation-only policy id: experiments never touch tokens or ledgers
_SIM_POLICY_ID = bytes(16)


@dataclass(frozen=True)
class ExperimentConfig:
    """One error curve: fixed (k, epsilon), swept group sizes."""

    preset: str
    k: int
    exp_epsilon: Fraction
    n_values: tuple[int, ...]
    trials: int
    seed: int
    truth_weights: tuple[float, ...] | None = None

    def policy(self) -> Policy:
        return Policy(policy_id=_SIM_POLICY_ID, k=self.k, exp_epsilon=self.exp_epsilon)


@dataclass(frozen=True)
class ErrorCurve:
    config: ExperimentConfig
    mean_abs_errors: tuple[float, ...]

    def error_at(self, n: int) -> float:
        return self.mean_abs_errors[self.config.n_values.index(n)]


def trial_rng(config: ExperimentConfig, n: int, trial: int) -> np.random.Generator:
    entropy = [
        config.seed,
        config.k,
        config.exp_epsilon.numerator,
        config.exp_epsilon.denominator,
        n,
        trial,
    ]
    return np.random.default_rng(np.random.SeedSequence(entropy=entropy))


def _draw_truths(config: ExperimentConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    if config.truth_weights is None:
        return rng.integers(0, config.k, size=n)
    weights = np.asarray(config.truth_weights, dtype=np.float64)
    if weights.shape != (config.k,) or (weights < 0).any() or weights.sum() <= 0:
        raise ValueError("truth_weights must be k nonnegative weights")
    return rng.choice(config.k, size=n, p=weights / weights.sum())


def run_trial(config: ExperimentConfig, n: int, rng: np.random.Generator) -> float:
    """|debiased mean risk - empirical mean risk| for one simulated group."""
    policy = config.policy()
    truths = _draw_truths(config, n, rng)
    empirical = float(truths.mean())
    responses = randomize_many(truths, policy, rng)
    tally = np.bincount(responses, minlength=config.k)
    estimate = debias(tally.tolist(), policy)
    return abs(expected_risk(estimate) - empirical)


def run_curve(config: ExperimentConfig) -> ErrorCurve:
    means = []
    for n in config.n_values:
        total = 0.0
        for trial in range(config.trials):
            total += run_trial(config, n, trial_rng(config, n, trial))
        means.append(total / config.trials)
    return ErrorCurve(config=config, mean_abs_errors=tuple(means))


def _preset_fig2(seed: int, n_values: tuple[int, ...], trials: int) -> list[ExperimentConfig]:
    eps = parse_epsilon("log(3)")
    return [
        ExperimentConfig("fig2", k, eps, n_values, trials, seed) for k in (2, 3, 4)
    ]


def _preset_fig3(seed: int, n_values: tuple[int, ...], trials: int) -> list[ExperimentConfig]:
    return [
        ExperimentConfig("fig3", 2, parse_epsilon(text), n_values, trials, seed)
        for text in ("log(5/3)", "log(3)", "log(7)")
    ]


PRESETS = {"fig2": _preset_fig2, "fig3": _preset_fig3}

DEFAULT_N_VALUES = tuple(range(1, 501))
DEFAULT_TRIALS = 100


def run_preset(
    name: str,
    seed: int,
    n_values: tuple[int, ...] = DEFAULT_N_VALUES,
    trials: int = DEFAULT_TRIALS,
) -> list[ErrorCurve]:
    try:
        build = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}, expected one of {sorted(PRESETS)}")
    return [run_curve(cfg) for cfg in build(seed, tuple(n_values), trials)]


def write_csv(curves: Iterable[ErrorCurve], out: TextIO) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for curve in curves:
        cfg = curve.config
        for n, err in zip(cfg.n_values, curve.mean_abs_errors):
            writer.writerow(
                [
                    cfg.preset,
                    cfg.k,
                    cfg.exp_epsilon.numerator,
                    cfg.exp_epsilon.denominator,
                    n,
                    repr(err),
                    cfg.trials,
                ]
            )


def epsilon_direction_note(curves: Sequence[ErrorCurve]) -> str:
    """State which way error moves as epsilon grows, measured at the largest n.

    Larger epsilon keeps the true status more often, so the debiased
    estimate needs less correction and its error shrinks.  Plot legends
    that suggest otherwise should be checked against this measured order.
    """
    ordered = sorted(curves, key=lambda c: c.config.exp_epsilon)
    n = min(max(c.config.n_values) for c in ordered)
    parts = []
    for curve in ordered:
        eps = curve.config.exp_epsilon
        label = f"e^eps={eps.numerator}/{eps.denominator}"
        parts.append(f"{label}: {curve.error_at(n):.4f}")
    errs = [c.error_at(n) for c in ordered]
    if all(a >= b for a, b in zip(errs, errs[1:])):
        direction = "error is non-increasing as epsilon grows"
    else:
        direction = "WARNING: error did not decrease monotonically with epsilon"
    return f"mean |error| at n={n}: " + ", ".join(parts) + f"; {direction}"


def plot_curves(curves: Sequence[ErrorCurve], path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for curve in curves:
        cfg = curve.config
        eps = cfg.exp_epsilon
        label = f"k={cfg.k}, e^eps={eps.numerator}/{eps.denominator}"
        ax.plot(cfg.n_values, curve.mean_abs_errors, label=label, linewidth=1.0)
    ax.set_xlabel("group size n")
    ax.set_ylabel("mean |estimated - empirical| risk")
    ax.set_title(f"estimator error, {curves[0].config.trials} trials per point")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
