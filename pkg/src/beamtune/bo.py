"""Bayesian optimisation of the tuning objective with expected improvement.

A Gaussian process models the logarithmic objective over magnet
settings normalised to [-1, 1].  Proposals maximise expected
improvement inside a polarity box (focus-defocus-focus quadrupole
signs preserved) over a candidate set that mixes global uniform draws
with a cloud around the best settings seen, then refine the winner
with shrinking coordinate steps.  After the evaluation budget the
machine is returned to the best settings seen, including the reset
point measured before the first step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .environment import FDF_SETTINGS, OPERATIONAL_HALF_RANGE, TuningEnv
from .errors import ConfigurationError
from .gp import GaussianProcess, GPHyperparameters, build_gp, fit_gp
from .records import RunRecord

# Quadrupole strengths keep the reset-point polarity; steerers are free.
POLARITY_LO = np.array([0.0, -30.0, -2e-3, 0.0, -2e-3])
POLARITY_HI = np.array([30.0, 0.0, 2e-3, 30.0, 2e-3])

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def expected_improvement(mean, std, best) -> np.ndarray:
    """Expected improvement of a Gaussian belief over the incumbent (maximisation)."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    improvement = mean - best
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(std > 0, improvement / np.where(std > 0, std, 1.0), 0.0)
    pdf = np.exp(-0.5 * z * z) / _SQRT_2PI
    ei = improvement * ndtr(z) + std * pdf
    return np.where(std > 0, ei, np.maximum(improvement, 0.0))


def normalize_settings(u) -> np.ndarray:
    """Map operational-box settings onto [-1, 1] per dimension."""
    return np.asarray(u, dtype=float) / OPERATIONAL_HALF_RANGE


TRUST_REGION_HALF_WIDTH = np.array([3.0, 3.0, 2e-4, 3.0, 2e-4])

# Hyperparameter search space for the objective model.  The log
# objective varies sharply near the optimum, so lengthscales are capped
# well below the box size and the noise floor is kept tiny; a loose
# noise bound lets the fit explain the peak as noise and flattens the
# acquisition exactly where precision matters.
LENGTHSCALE_BOUNDS = (0.05, 2.0)
NOISE_BOUNDS = (1e-8, 1e-4)
COLD_START_HYPER = GPHyperparameters(
    lengthscales=(0.3,) * 5, signal_variance=1.0, noise_variance=1e-6
)

# Scale of exploratory draws around the reset point; workable optics
# cluster there rather than spreading over the whole polarity box.
EXPLORE_SD = np.array([8.0, 8.0, 1.0e-3, 8.0, 1.0e-3])


def sample_exploratory(rng: np.random.Generator, n: int, sd=None) -> np.ndarray:
    """Draw settings around the reset point, clipped to the polarity box."""
    sd = EXPLORE_SD if sd is None else np.asarray(sd, dtype=float)
    draws = FDF_SETTINGS + sd * rng.standard_normal((n, FDF_SETTINGS.size))
    return np.clip(draws, POLARITY_LO, POLARITY_HI)


# Single-axis excursions from the reset point used as a structured
# initial design; signs keep each quadrupole on its polarity side.
AXIS_INIT_STEP = np.array([10.0, -10.0, 1.0e-3, 10.0, 1.0e-3])


def gaussianize(y: np.ndarray) -> np.ndarray:
    """Map observations onto Gaussian scores by rank, ties averaged.

    The objective mixes an off-screen plateau with a sharp logarithmic
    valley; rank scores give the stationary kernel a target it can
    actually fit.  The map is monotone, so improvement ordering and the
    EI argmax carry over to the raw objective.
    """
    y = np.asarray(y, dtype=float)
    order = np.argsort(y, kind="stable")
    ranks = np.empty(len(y))
    ranks[order] = np.arange(len(y), dtype=float)
    uniq, inverse = np.unique(y, return_inverse=True)
    if len(uniq) < len(y):
        for value_index in range(len(uniq)):
            mask = inverse == value_index
            ranks[mask] = ranks[mask].mean()
    return ndtri((ranks + 0.5) / len(y))


def feasible_box(
    center, trust_half_width=TRUST_REGION_HALF_WIDTH
) -> tuple[np.ndarray, np.ndarray]:
    """Intersect the trust region at ``center`` with the polarity box."""
    center = np.asarray(center, dtype=float)
    half = np.asarray(trust_half_width, dtype=float)
    lo = np.clip(center - half, POLARITY_LO, POLARITY_HI)
    hi = np.clip(center + half, POLARITY_LO, POLARITY_HI)
    return lo, hi


def propose_next(
    gp: GaussianProcess,
    incumbent_value: float,
    box_lo,
    box_hi,
    rng: np.random.Generator,
    *,
    n_candidates: int = 512,
    n_global: int = 128,
    n_cloud: int = 256,
    cloud_scales: tuple[float, ...] = (0.25, 0.0625),
    refine_fracs: tuple[float, ...] = (0.3, 0.1, 0.03),
    n_refine_starts: int = 1,
    segment_points: np.ndarray | None = None,
    n_segment: int = 128,
    explore_style: str = "uniform",
    acquisition: str = "ei",
) -> np.ndarray:
    """Maximise expected improvement, mostly inside the given box.

    Most candidates are uniform in the box, Gaussian clouds shrink
    around the box centre so fine moves are searched at every step, and
    a smaller global pool spans the whole polarity box so the
    acquisition can leave a plateau when the model favours somewhere
    else entirely.  Optional segment candidates interpolate between the
    box centre and previously good settings, following the valleys the
    model has seen.  The top candidates are refined with shrinking
    coordinate steps sized to the local box.
    """
    box_lo = np.asarray(box_lo, dtype=float)
    box_hi = np.asarray(box_hi, dtype=float)
    dim = box_lo.size
    center = 0.5 * (box_lo + box_hi)
    half = 0.5 * (box_hi - box_lo)

    def scores(points: np.ndarray) -> np.ndarray:
        mean, std = gp.predict(normalize_settings(points))
        if acquisition == "mean":
            return mean
        return expected_improvement(mean, std, incumbent_value)

    pools = [rng.uniform(box_lo, box_hi, size=(n_candidates, dim))]
    if n_cloud > 0 and cloud_scales:
        per_scale = max(1, n_cloud // len(cloud_scales))
        for scale in cloud_scales:
            draws = center + scale * half * rng.standard_normal((per_scale, dim))
            pools.append(np.clip(draws, box_lo, box_hi))
    if segment_points is not None and len(segment_points) > 0 and n_segment > 0:
        anchors = segment_points[rng.integers(0, len(segment_points), size=n_segment)]
        lam = rng.uniform(0.0, 1.3, size=(n_segment, 1))
        jitter = 0.05 * OPERATIONAL_HALF_RANGE * rng.standard_normal((n_segment, dim))
        draws = center + lam * (anchors - center) + jitter
        pools.append(np.clip(draws, box_lo, box_hi))
    if n_global > 0:
        if explore_style == "reset":
            pools.append(sample_exploratory(rng, n_global))
        else:
            pools.append(rng.uniform(POLARITY_LO, POLARITY_HI, size=(n_global, dim)))
    candidates = np.concatenate(pools, axis=0)
    cand_scores = scores(candidates)
    order = np.argsort(cand_scores)[::-1]
    starts = candidates[order[: max(1, n_refine_starts)]]

    def refine(point: np.ndarray) -> np.ndarray:
        for frac in refine_fracs:
            step = frac * half
            moves = np.concatenate([np.eye(dim) * step, -np.eye(dim) * step])
            trial = np.clip(point + moves, POLARITY_LO, POLARITY_HI)
            batch = np.vstack([point[None, :], trial])
            point = batch[int(np.argmax(scores(batch)))]
        return point

    refined = np.array([refine(p) for p in starts])
    return refined[int(np.argmax(scores(refined)))]


@dataclass(frozen=True)
class BOConfig:
    budget: int = 150
    n_init: int = 5
    seed: int = 0
    n_candidates: int = 512
    n_global: int = 128
    n_cloud: int = 256
    cloud_scales: tuple[float, ...] = (0.25, 0.0625)
    refine_fracs: tuple[float, ...] = (0.3, 0.1, 0.03)
    n_refine_starts: int = 1
    n_segment: int = 0
    segment_quantile: float = 0.75
    n_local: int = 0  # fit on the n nearest observations only (0 = all)
    restart_after: int = 0  # steps without a new overall best before a fresh region (0 = off)
    explore_style: str = "uniform"  # init design: "uniform" | "reset" | "axes"
    init_points: tuple[tuple[float, ...], ...] | None = None  # explicit init design
    y_transform: str = "none"  # GP target scale: "none" | "rank"
    greed_every: int = 0  # every kth model step exploits the posterior mean (0 = off)
    trust_half_width: tuple[float, ...] = tuple(TRUST_REGION_HALF_WIDTH)
    center_on: str = "best"  # candidate box centre: "best" | "last"
    shrink_patience: int = 8  # model steps without a new best before halving
    max_shrink: float = 32.0  # smallest width is base / max_shrink
    fit_restarts: int = 4
    warm_restarts: int = 2
    fit_evals: int = 70
    refit_every: int = 5  # full refit cadence once warm
    warm_after: int = 20  # observations before warm-started refits begin
    lengthscale_bounds: tuple[float, float] = LENGTHSCALE_BOUNDS
    noise_bounds: tuple[float, float] = NOISE_BOUNDS

    def __post_init__(self) -> None:
        if self.budget < 1 or self.n_init < 1:
            raise ConfigurationError("budget and n_init must be >= 1")
        if self.n_candidates < 1 or self.refit_every < 1:
            raise ConfigurationError("n_candidates and refit_every must be >= 1")
        if self.n_global < 0 or self.n_cloud < 0 or self.n_segment < 0:
            raise ConfigurationError("candidate pool sizes must be >= 0")
        if any(s <= 0 for s in self.cloud_scales):
            raise ConfigurationError("cloud_scales must be positive")
        if self.n_refine_starts < 1:
            raise ConfigurationError("n_refine_starts must be >= 1")
        if not 0.0 <= self.segment_quantile < 1.0:
            raise ConfigurationError("segment_quantile must be in [0, 1)")
        if self.n_local < 0 or self.restart_after < 0:
            raise ConfigurationError("n_local and restart_after must be >= 0")
        if self.explore_style not in ("uniform", "reset", "axes"):
            raise ConfigurationError(
                "explore_style must be 'uniform', 'reset', or 'axes'"
            )
        if self.init_points is not None:
            if len(self.init_points) < 1 or any(
                len(p) != 5 or not all(np.isfinite(p)) for p in self.init_points
            ):
                raise ConfigurationError(
                    "init_points needs finite settings of 5 entries each"
                )
            if len(self.init_points) >= self.budget:
                raise ConfigurationError("init_points must leave room in the budget")
        if self.y_transform not in ("none", "rank"):
            raise ConfigurationError("y_transform must be 'none' or 'rank'")
        if self.greed_every < 0:
            raise ConfigurationError("greed_every must be >= 0")
        if len(self.trust_half_width) != 5 or any(
            w <= 0 for w in self.trust_half_width
        ):
            raise ConfigurationError("trust_half_width needs 5 positive entries")
        if self.center_on not in ("best", "last"):
            raise ConfigurationError("center_on must be 'best' or 'last'")
        if self.shrink_patience < 1 or self.max_shrink < 1.0:
            raise ConfigurationError("shrink_patience >= 1 and max_shrink >= 1 required")
        for lo, hi in (self.lengthscale_bounds, self.noise_bounds):
            if not (0 < lo < hi):
                raise ConfigurationError("hyperparameter bounds must satisfy 0 < lo < hi")


def run_bo(env: TuningEnv, config: BOConfig) -> RunRecord:
    """Run the optimiser on the environment and return to the best settings.

    The reset-point measurement seeds both the model data and the
    best-seen tracker, so the final state can never be worse than the
    starting point.  Time spent fitting and proposing is recorded per
    step as inference time.
    """
    obs = env.reset()
    record = env.record
    x_obs = [np.array(obs.settings)]
    y_obs = [record.initial.objective]
    best_settings = np.array(obs.settings)
    best_mae = record.initial.mae

    rng_init = np.random.default_rng(np.random.SeedSequence([config.seed, 97]))
    hyper_prev = None
    base_width = np.asarray(config.trust_half_width, dtype=float)
    width = base_width.copy()
    fail_streak = 0
    stall = 0
    epoch_best_y = y_obs[0]
    epoch_center = x_obs[0]
    n_init = config.n_init
    if config.init_points is not None:
        n_init = len(config.init_points)
    for step_index in range(config.budget):
        started = time.perf_counter()
        model_step = step_index >= n_init
        if not model_step:
            if config.init_points is not None:
                u = np.clip(
                    np.asarray(config.init_points[step_index], dtype=float),
                    POLARITY_LO,
                    POLARITY_HI,
                )
            elif config.explore_style == "reset":
                u = sample_exploratory(rng_init, 1)[0]
            elif config.explore_style == "axes":
                axis = step_index % AXIS_INIT_STEP.size
                sign = 1.0 if step_index < AXIS_INIT_STEP.size else -1.0
                u = FDF_SETTINGS.copy()
                u[axis] += sign * AXIS_INIT_STEP[axis]
                u = np.clip(u, POLARITY_LO, POLARITY_HI)
            else:
                u = rng_init.uniform(POLARITY_LO, POLARITY_HI)
        else:
            x_all = np.array(x_obs)
            y_all = np.array(y_obs)
            x = normalize_settings(x_all)
            y = gaussianize(y_all) if config.y_transform == "rank" else y_all
            if config.restart_after > 0 and stall >= config.restart_after:
                # fresh search region: the current one has gone quiet
                stall = 0
                fail_streak = 0
                width = base_width.copy()
                epoch_best_y = -np.inf
                epoch_center = None
            if epoch_center is None:
                lo, hi = POLARITY_LO, POLARITY_HI
            else:
                center = epoch_center if config.center_on == "best" else x_obs[-1]
                lo, hi = feasible_box(center, width)
            x_fit, y_fit = x, y
            if 0 < config.n_local < len(y_all) and epoch_center is not None:
                # model only the neighbourhood: distant basins would force
                # long lengthscales and flatten the local posterior
                dist = np.linalg.norm(x - normalize_settings(epoch_center), axis=1)
                near = np.argsort(dist)[: config.n_local]
                x_fit, y_fit = x[near], y[near]
            warm = hyper_prev is not None and len(y) > config.warm_after
            refit = not warm or step_index % config.refit_every == 0
            if refit:
                gp = fit_gp(
                    x_fit,
                    y_fit,
                    seed=config.seed,
                    n_restarts=config.warm_restarts if warm else config.fit_restarts,
                    max_fit_evals=config.fit_evals,
                    initial_hyper=hyper_prev if warm else COLD_START_HYPER,
                    lengthscale_bounds=config.lengthscale_bounds,
                    noise_bounds=config.noise_bounds,
                )
                hyper_prev = gp.hyper
                if gp.flags and "gp-fallback" not in record.flags:
                    record.flags.append("gp-fallback")
            else:
                gp = build_gp(x_fit, y_fit, hyper_prev)
            rng_prop = np.random.default_rng(
                np.random.SeedSequence([config.seed, 101, step_index])
            )
            segment_points = None
            if config.n_segment > 0:
                cut = np.quantile(y_all, config.segment_quantile)
                segment_points = x_all[y_all >= cut]
            # Improvement is judged against the region's own best while a
            # region is active, so descent keeps a usable gradient even in
            # a basin worse than the overall best.
            incumbent = (
                epoch_best_y if epoch_center is not None else float(np.max(y_all))
            )
            if config.y_transform == "rank":
                incumbent = float(y[int(np.argmin(np.abs(y_all - incumbent)))])
            greedy = (
                config.greed_every > 0
                and (step_index - n_init) % config.greed_every == config.greed_every - 1
            )
            u = propose_next(
                gp,
                incumbent,
                lo,
                hi,
                rng_prop,
                n_candidates=config.n_candidates,
                n_global=0 if greedy else config.n_global,
                n_cloud=config.n_cloud,
                cloud_scales=config.cloud_scales,
                refine_fracs=config.refine_fracs,
                n_refine_starts=config.n_refine_starts,
                segment_points=segment_points,
                n_segment=config.n_segment,
                explore_style=config.explore_style,
                acquisition="mean" if greedy else "ei",
            )
        inference_time = time.perf_counter() - started
        result = env.step(u, inference_time=inference_time)
        x_obs.append(np.array(result.observation.settings))
        y_obs.append(result.objective)
        if result.objective > epoch_best_y:
            epoch_best_y = result.objective
            epoch_center = np.array(result.observation.settings)
            if model_step:
                fail_streak = 0
                stall = 0
                width = np.minimum(2.0 * width, base_width)
        elif model_step:
            fail_streak += 1
            stall += 1
            if fail_streak >= config.shrink_patience:
                fail_streak = 0
                width = np.maximum(0.5 * width, base_width / config.max_shrink)
        if result.mae < best_mae:
            best_mae = result.mae
            best_settings = np.array(result.observation.settings)

    final = env.step(best_settings, phase="final")
    record.set_final(
        final.observation.settings, final.mae, final.objective, "return-to-best"
    )
    record.meta["n_evals"] = config.budget
    return record
