"""Multilevel orchestration: hierarchy, variance estimation, allocation,
stopping, cost accounting, and the single-level baseline.

The multilevel estimate telescopes per-level estimators,

    Q_hat = Qhat_0 + sum_{l>=1} Yhat_l,

where level 0 runs a plain Metropolis chain for Q_0 and each level l >= 1
runs the two-level sampler for Y_l = Q_l - Q_{l-1}. Every level uses several
independent parallel chains; the per-sample variance is estimated across
them with the Gelman-Rubin pooled form and drives both the optimal sample
allocation

    N_l = ceil( (2/eps^2) * sqrt(s2_l / C_l) * sum_k sqrt(s2_k * C_k) )

and the stopping rule sum_l s2_l / N_l <= eps^2 / 2. Chains are extended in
doubling rounds, re-estimating variances between rounds, until the
allocation targets are met. Modelled cost per kept sample is
C_l = C* eta_l^gamma M_l^gamma (never wall time), with eta_l accounting for
the auxiliary coarse solve of the coupled sampler.

Per-level chain groups are mutually independent (separate RNG streams) and
could run concurrently; this implementation runs them sequentially so that
outputs are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .posterior import (
    LevelModel,
    LevelSpec,
    ObservationSet,
    fidelity_schedule,
)
from .random_field import KLBasis
from .samplers import (
    PRIOR_REVERSIBLE,
    ChainStreams,
    run_chain,
)

__all__ = [
    "LevelHierarchy",
    "LevelStatistics",
    "MultilevelEstimate",
    "ChainDiagnostics",
    "DecayRates",
    "BudgetExceededError",
    "build_hierarchy",
    "default_truncation_schedule",
    "default_beta_schedule",
    "level_cost",
    "gelman_rubin_variance",
    "allocate_samples",
    "integrated_autocorrelation",
    "fit_decay_rates",
    "run_mlmcmc",
    "run_single_level",
]

DEFAULT_CHAINS = 5
# 500 kept-sample equivalents at the default thinning, counted in raw steps
DEFAULT_BURN_IN = 5000
DEFAULT_THINNING = 10
DEFAULT_N_MIN = 100
DEFAULT_MAX_RAW_STEPS = 50_000_000


class BudgetExceededError(RuntimeError):
    """Raised when the raw-transition cap is hit before the stopping rule."""

    def __init__(self, message, progress=None):
        super().__init__(message)
        self.progress = progress


@dataclass(frozen=True, eq=False)
class LevelHierarchy:
    """Levels plus the shared basis and data they all condition on."""

    levels: tuple
    basis: KLBasis
    observations: "ObservationSet | None"
    sigma2_f_finest: float
    kappa: float
    gamma: float = 1.0
    cost_constant: float = 1.0

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError("hierarchy needs at least one level")

    @property
    def finest(self) -> LevelSpec:
        return self.levels[-1]

    def costs(self) -> np.ndarray:
        return np.array(
            [level_cost(spec, self.gamma, self.cost_constant) for spec in self.levels]
        )


def default_truncation_schedule(r0: int, num_levels: int, growth: float = 8.0) -> list[int]:
    """Truncations growing by ~growth*log(R) new modes per level."""
    out = [int(r0)]
    for _ in range(num_levels):
        out.append(out[-1] + max(1, math.ceil(growth * math.log(out[-1]))))
    return out


def default_beta_schedule(num_levels: int, beta0: float = 0.15, beta_fine: float = 0.10) -> list[float]:
    """Coarsest chain steps wider than the fine-level chains."""
    return [beta0] + [beta_fine] * num_levels


def build_hierarchy(
    num_levels: int,
    m0: int,
    truncations,
    betas,
    sigma2_f_finest: float,
    kappa: float,
    basis: KLBasis,
    observations: "ObservationSet | None",
    gamma: float = 1.0,
    cost_constant: float = 1.0,
    eta_coupled: float = 1.25,
) -> LevelHierarchy:
    """Build levels l = 0..num_levels with m_l = 2^l m0 and the fidelity schedule.

    `truncations` and `betas` must cover each level; a decreasing truncation
    schedule is rejected.
    """
    if num_levels < 0:
        raise ValueError("num_levels must be nonnegative")
    count = num_levels + 1
    truncations = list(truncations)
    betas = list(betas)
    if len(truncations) != count or len(betas) != count:
        raise ValueError(
            f"need {count} truncations and betas, got {len(truncations)}/{len(betas)}"
        )
    if any(truncations[i] > truncations[i + 1] for i in range(count - 1)):
        raise ValueError(f"truncation schedule must be non-decreasing: {truncations}")
    ms = [m0 * 2 ** lvl for lvl in range(count)]
    spacings = [1.0 / (m - 1) for m in ms]
    sigma2 = fidelity_schedule(sigma2_f_finest, kappa, spacings)
    levels = tuple(
        LevelSpec(
            index=lvl,
            points_per_side=ms[lvl],
            truncation=int(truncations[lvl]),
            sigma2_f=float(sigma2[lvl]),
            beta=float(betas[lvl]),
            eta=1.0 if lvl == 0 else eta_coupled,
        )
        for lvl in range(count)
    )
    return LevelHierarchy(
        levels=levels,
        basis=basis,
        observations=observations,
        sigma2_f_finest=sigma2_f_finest,
        kappa=kappa,
        gamma=gamma,
        cost_constant=cost_constant,
    )


def level_cost(spec: LevelSpec, gamma: float, cost_constant: float = 1.0) -> float:
    """Modelled cost of one raw transition: C* * eta^gamma * M^gamma."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return cost_constant * (spec.eta ** gamma) * (float(spec.dof) ** gamma)


def gelman_rubin_variance(chains) -> float:
    """Pooled per-sample variance across parallel chains.

    With J chains of common length N, within-chain variance W (mean of the
    per-chain sample variances) and between-chain variance
    B = N * var(chain means), the estimate is ((N-1)/N) W + B/N. A single
    chain falls back to its plain sample variance; degenerate inputs give 0.
    """
    arrays = [np.asarray(c, dtype=float) for c in chains]
    if len(arrays) == 0:
        raise ValueError("need at least one chain")
    n = min(a.size for a in arrays)
    if len(arrays) == 1 or n < 2:
        pooled = np.concatenate(arrays)
        return float(np.var(pooled, ddof=1)) if pooled.size > 1 else 0.0
    data = np.stack([a[:n] for a in arrays])
    w = float(np.mean(np.var(data, axis=1, ddof=1)))
    means = data.mean(axis=1)
    b = n * float(np.var(means, ddof=1))
    return (n - 1) / n * w + b / n


def allocate_samples(
    variances,
    costs,
    epsilon: float,
    n_min: int = DEFAULT_N_MIN,
    inflation: float = 1.0,
) -> np.ndarray:
    """Cost-optimal sample counts meeting sum(s2/N) = eps^2/2 before rounding.

    `inflation` is an optional safety multiplier (e.g. L+1 for conservative
    coverage of the per-level sampling-error union bound); the default of 1
    reproduces the plain allocation.
    """
    s2 = np.asarray(variances, dtype=float)
    c = np.asarray(costs, dtype=float)
    if s2.shape != c.shape:
        raise ValueError("variances and costs must align")
    if np.any(s2 < 0) or np.any(c <= 0):
        raise ValueError("need s2 >= 0 and costs > 0")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if np.all(s2 == 0):
        return np.full(s2.shape, int(n_min), dtype=np.int64)
    total = np.sum(np.sqrt(s2 * c))
    raw = (2.0 / epsilon ** 2) * np.sqrt(s2 / c) * total * inflation
    return np.maximum(np.ceil(raw).astype(np.int64), int(n_min))


@dataclass(frozen=True)
class ChainDiagnostics:
    """Autocorrelation summary of one chain's kept samples."""

    iact: float
    ess: float
    asymptotic_variance: float
    degenerate: bool


def integrated_autocorrelation(samples) -> ChainDiagnostics:
    """IACT by initial-positive-sequence truncation of the autocovariance.

    Sums empirical autocorrelations over pairs (Geyer's initial positive
    sequence) and stops at the first nonpositive pair sum. A chain with zero
    variance is flagged degenerate.
    """
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n < 100:
        raise ValueError("need at least 100 samples for an IACT estimate")
    x = x - x.mean()
    var = float(np.dot(x, x)) / n
    if var == 0.0:
        return ChainDiagnostics(iact=float("nan"), ess=0.0,
                                asymptotic_variance=0.0, degenerate=True)
    # FFT autocovariance, biased normalisation (1/n)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    rho = acov / acov[0]
    iact = 1.0
    k = 1
    while k + 1 < n:
        pair = rho[k] + rho[k + 1]
        if pair <= 0.0:
            break
        iact += 2.0 * pair
        k += 2
    ess = n / iact
    return ChainDiagnostics(
        iact=float(iact),
        ess=float(ess),
        asymptotic_variance=float(var * iact),
        degenerate=False,
    )


@dataclass(eq=False)
class LevelStatistics:
    """Per-level outcome of a run."""

    level: int
    spacing: float
    points_per_side: int
    truncation: int
    sigma2_f: float
    beta: float
    n_kept: int
    mean_y: float
    variance: float
    accept_rate_coarse: float
    accept_rate_fine: float
    iact: float
    cost_units: float
    burn_in_cost_units: float
    mean_q_fine: float
    var_q_fine: float
    per_chain_means: np.ndarray = field(default=None)


@dataclass(eq=False)
class MultilevelEstimate:
    """Telescoped estimate with statistics, cost and termination status."""

    estimate: float
    epsilon: float
    levels: list
    total_cost_units: float
    burn_in_cost_units: float
    terminated: bool
    sampling_error: float       # sum_l s2_l / N_l at termination
    warnings: list
    stream_labels: list
    thinning: int
    chains: int


class _LevelGroup:
    """The parallel chains estimating one telescoping term."""

    def __init__(self, hierarchy, level_index, models, chains, thinning, beta,
                 master_seed, rule):
        self.level_index = level_index
        self.kind = "single" if level_index == 0 else "coupled"
        if self.kind == "single":
            self.models = models[0]
        else:
            self.models = (models[level_index], models[level_index - 1])
        self.thinning = thinning
        self.beta = beta
        self.rule = rule
        self.cost_per_step = level_cost(
            hierarchy.levels[level_index], hierarchy.gamma, hierarchy.cost_constant
        )
        self.streams = [
            ChainStreams.for_chain(master_seed, level_index, j, self.kind == "coupled")
            for j in range(chains)
        ]
        self.states = [None] * chains
        self.kept = [[] for _ in range(chains)]
        self.kept_qf = [[] for _ in range(chains)]
        self.kept_qc = [[] for _ in range(chains)]
        self.raw_steps = 0
        self.burn_in_steps = 0
        self.accepts_fine = 0
        self.accepts_coarse = 0

    def burn_in(self, n0):
        for j, streams in enumerate(self.streams):
            record, state, _ = run_chain(
                self.kind, self.models, 0, n0, self.thinning, self.beta,
                streams, self.rule, state=self.states[j],
            )
            self.states[j] = state
            self.burn_in_steps += record.raw_steps

    def extend_to(self, per_chain_target):
        current = sum(a.size for a in self.kept[0])
        extra = per_chain_target - current
        if extra <= 0:
            return
        for j, streams in enumerate(self.streams):
            record, state, _ = run_chain(
                self.kind, self.models, extra, 0, self.thinning, self.beta,
                streams, self.rule, state=self.states[j],
            )
            self.states[j] = state
            self.kept[j].append(record.values)
            self.kept_qf[j].append(record.q_fine)
            self.kept_qc[j].append(record.q_coarse)
            self.raw_steps += record.raw_steps
            self.accepts_fine += record.accepts_fine
            self.accepts_coarse += record.accepts_coarse

    def chain_arrays(self):
        return [np.concatenate(k) if k else np.empty(0) for k in self.kept]

    def n_kept_total(self):
        return sum(sum(a.size for a in k) for k in self.kept)

    def variance(self):
        return gelman_rubin_variance(self.chain_arrays())

    def statistics(self, spec):
        arrays = self.chain_arrays()
        pooled = np.concatenate(arrays)
        qf = np.concatenate([np.concatenate(k) for k in self.kept_qf])
        diags = []
        for a in arrays:
            if a.size >= 100:
                d = integrated_autocorrelation(a)
                if not d.degenerate:
                    diags.append(d.iact)
        iact = float(np.mean(diags)) if diags else float("nan")
        n = pooled.size
        return LevelStatistics(
            level=self.level_index,
            spacing=spec.spacing,
            points_per_side=spec.points_per_side,
            truncation=spec.truncation,
            sigma2_f=spec.sigma2_f,
            beta=spec.beta,
            n_kept=n,
            mean_y=float(pooled.mean()) if n else float("nan"),
            variance=self.variance(),
            accept_rate_coarse=(
                self.accepts_coarse / self.raw_steps if self.kind == "coupled" and self.raw_steps else float("nan")
            ),
            accept_rate_fine=(
                self.accepts_fine / self.raw_steps if self.raw_steps else float("nan")
            ),
            iact=iact,
            cost_units=self.raw_steps * self.cost_per_step,
            burn_in_cost_units=self.burn_in_steps * self.cost_per_step,
            mean_q_fine=float(qf.mean()) if qf.size else float("nan"),
            var_q_fine=float(np.var(qf, ddof=1)) if qf.size > 1 else 0.0,
            per_chain_means=np.array([a.mean() if a.size else np.nan for a in arrays]),
        )

    def stream_labels(self):
        out = []
        for s in self.streams:
            out.extend(s.labels())
        return out


def _build_models(hierarchy: LevelHierarchy) -> list:
    return [
        LevelModel(spec, hierarchy.basis, hierarchy.observations)
        for spec in hierarchy.levels
    ]


def run_mlmcmc(
    hierarchy: LevelHierarchy,
    epsilon: float,
    chains: int = DEFAULT_CHAINS,
    burn_in: int = DEFAULT_BURN_IN,
    thinning: int = DEFAULT_THINNING,
    master_seed: int = 0,
    rule: str = PRIOR_REVERSIBLE,
    n_min: int = DEFAULT_N_MIN,
    max_raw_steps: int = DEFAULT_MAX_RAW_STEPS,
    use_level_inflation: bool = False,
    models: "list | None" = None,
) -> MultilevelEstimate:
    """Adaptive multilevel run: extend chains until the stopping rule holds.

    All chains are burnt in first; then, in rounds, per-level variances are
    re-estimated, allocations recomputed, and each level is extended toward
    its target (at most doubling per round). With L = 0 this reduces to the
    single-level estimator with identical seeding.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if chains < 1:
        raise ValueError("need at least one chain")
    if models is None:
        models = _build_models(hierarchy)
    count = len(hierarchy.levels)
    costs = hierarchy.costs()
    inflation = float(count) if use_level_inflation else 1.0
    groups = [
        _LevelGroup(hierarchy, lvl, models, chains, thinning,
                    hierarchy.levels[lvl].beta, master_seed, rule)
        for lvl in range(count)
    ]
    for g in groups:
        g.burn_in(burn_in)

    per_chain_floor = max(1, math.ceil(n_min / chains))
    for g in groups:
        g.extend_to(per_chain_floor)

    while True:
        s2 = np.array([g.variance() for g in groups])
        targets = allocate_samples(s2, costs, epsilon, n_min=n_min,
                                   inflation=inflation)
        kept = np.array([g.n_kept_total() for g in groups])
        if np.all(kept >= targets):
            break
        total_raw = sum(g.raw_steps + g.burn_in_steps for g in groups)
        if total_raw > max_raw_steps:
            raise BudgetExceededError(
                f"raw-transition budget {max_raw_steps} exhausted at "
                f"{total_raw} steps; kept={kept.tolist()}, targets={targets.tolist()}",
                progress={"kept": kept.tolist(), "targets": targets.tolist(),
                          "s2": s2.tolist()},
            )
        for g, target, have in zip(groups, targets, kept):
            if have >= target:
                continue
            per_chain_target = math.ceil(target / chains)
            current = math.ceil(have / chains)
            capped = min(per_chain_target, max(2 * current, current + 1))
            g.extend_to(capped)

    stats = [g.statistics(spec) for g, spec in zip(groups, hierarchy.levels)]
    s2 = np.array([st.variance for st in stats])
    kept = np.array([st.n_kept for st in stats])
    sampling_error = float(np.sum(s2 / kept))
    estimate = 0.0
    for st in stats:  # fixed summation order: level 0 up to L
        estimate += st.mean_y
    warnings = []
    if count > 1:
        bias_proxy = abs(stats[-1].mean_y)
        if bias_proxy > epsilon / math.sqrt(2.0):
            warnings.append(
                f"finest-level correction magnitude {bias_proxy:.3e} exceeds "
                f"epsilon/sqrt(2) = {epsilon / math.sqrt(2.0):.3e}; the level "
                f"hierarchy may be too shallow for this tolerance"
            )
    labels = []
    for g in groups:
        labels.extend(g.stream_labels())
    return MultilevelEstimate(
        estimate=float(estimate),
        epsilon=epsilon,
        levels=stats,
        total_cost_units=float(sum(st.cost_units for st in stats)),
        burn_in_cost_units=float(sum(st.burn_in_cost_units for st in stats)),
        terminated=True,
        sampling_error=sampling_error,
        warnings=warnings,
        stream_labels=labels,
        thinning=thinning,
        chains=chains,
    )


def run_single_level(
    level: LevelSpec,
    hierarchy_context: LevelHierarchy,
    epsilon: "float | None" = None,
    n_keep: "int | None" = None,
    chains: int = DEFAULT_CHAINS,
    burn_in: int = DEFAULT_BURN_IN,
    thinning: int = DEFAULT_THINNING,
    master_seed: int = 0,
    rule: str = PRIOR_REVERSIBLE,
    n_min: int = DEFAULT_N_MIN,
    max_raw_steps: int = DEFAULT_MAX_RAW_STEPS,
    model: "LevelModel | None" = None,
) -> MultilevelEstimate:
    """Plain Metropolis estimator of E[Q] at one level.

    Runs either to a prescribed tolerance (stopping rule s2/N <= eps^2/2) or
    for a fixed number of kept samples. The baseline pays no auxiliary
    coarse solve, so its cost uses eta = 1.
    """
    if (epsilon is None) == (n_keep is None):
        raise ValueError("specify exactly one of epsilon or n_keep")
    baseline_spec = LevelSpec(
        index=level.index,
        points_per_side=level.points_per_side,
        truncation=level.truncation,
        sigma2_f=level.sigma2_f,
        beta=level.beta,
        eta=1.0,
    )
    sub = LevelHierarchy(
        levels=(baseline_spec,),
        basis=hierarchy_context.basis,
        observations=hierarchy_context.observations,
        sigma2_f_finest=baseline_spec.sigma2_f,
        kappa=hierarchy_context.kappa,
        gamma=hierarchy_context.gamma,
        cost_constant=hierarchy_context.cost_constant,
    )
    models = [model] if model is not None else None
    if epsilon is not None:
        return run_mlmcmc(
            sub, epsilon, chains=chains, burn_in=burn_in, thinning=thinning,
            master_seed=master_seed, rule=rule, n_min=n_min,
            max_raw_steps=max_raw_steps, models=models,
        )
    # fixed-N mode
    if models is None:
        models = _build_models(sub)
    group = _LevelGroup(sub, 0, models, chains, thinning, baseline_spec.beta,
                        master_seed, rule)
    group.burn_in(burn_in)
    group.extend_to(math.ceil(n_keep / chains))
    stats = [group.statistics(baseline_spec)]
    kept = stats[0].n_kept
    return MultilevelEstimate(
        estimate=stats[0].mean_y,
        epsilon=float("nan"),
        levels=stats,
        total_cost_units=stats[0].cost_units,
        burn_in_cost_units=stats[0].burn_in_cost_units,
        terminated=True,
        sampling_error=float(stats[0].variance / kept) if kept else float("nan"),
        warnings=[],
        stream_labels=group.stream_labels(),
        thinning=thinning,
        chains=chains,
    )


@dataclass(frozen=True)
class DecayRates:
    """Log-log regression of |mean| and variance against the mesh spacing."""

    mean_rate: float
    variance_rate: float
    mean_residual: float
    variance_residual: float
    spacings: tuple
    means: tuple
    variances: tuple


def fit_decay_rates(means, variances, spacings) -> DecayRates:
    """Least-squares slopes of log|Y_l| and log s2_l versus log h_l.

    Inputs are the per-level statistics for the correction levels l >= 1 of a
    hierarchy with at least three levels (two correction terms).
    """
    y = np.abs(np.asarray(means, dtype=float))
    v = np.asarray(variances, dtype=float)
    h = np.asarray(spacings, dtype=float)
    if not (y.size == v.size == h.size):
        raise ValueError("means, variances, spacings must align")
    if y.size < 2:
        raise ValueError(
            "need at least two correction levels (a hierarchy of >= 3 levels) "
            "to fit decay rates"
        )
    if np.any(y <= 0) or np.any(v <= 0) or np.any(h <= 0):
        raise ValueError("decay fit requires strictly positive inputs")
    lh = np.log(h)

    def fit(vals):
        coeff, res = np.polyfit(lh, np.log(vals), 1, full=True)[:2]
        residual = float(res[0]) if res.size else 0.0
        return float(coeff[0]), residual

    mean_rate, mean_res = fit(y)
    var_rate, var_res = fit(v)
    return DecayRates(
        mean_rate=mean_rate,
        variance_rate=var_rate,
        mean_residual=mean_res,
        variance_residual=var_res,
        spacings=tuple(float(x) for x in h),
        means=tuple(float(x) for x in y),
        variances=tuple(float(x) for x in v),
    )
