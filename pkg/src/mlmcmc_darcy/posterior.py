"""Level-dependent Bayesian model for the Darcy inverse problem.

Each level pairs a mesh resolution with a KL truncation and a likelihood
fidelity. The unnormalised log-posterior is

    log pi(theta) = log prior(theta) + log likelihood(F_obs | theta),

with a standard-normal prior on the KL coefficients (constants kept, so
prior ratios across levels of different dimension are exact) and a Gaussian
likelihood centred at the model response, whose proportionality constant is
dropped (it cancels in every acceptance ratio formed at a fixed level).
All probability arithmetic stays in log space; tight fidelities underflow
raw densities.

Synthetic observations are produced on a mesh one refinement finer than the
finest inference level and with the basis's full truncation, so the data do
not come from any forward map used in inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import (
    ObservationOperator,
    assemble_and_solve,
    build_mesh,
    interpolation_weights,
    outflow_flux,
)
from .random_field import KLBasis, ModeVector, mode_matrix

__all__ = [
    "LevelSpec",
    "ObservationSet",
    "PosteriorEvaluation",
    "LevelModel",
    "log_prior",
    "log_likelihood",
    "fidelity_schedule",
    "make_observation_points",
    "generate_synthetic_data",
    "generation_level",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LevelSpec:
    """Resolution, truncation and sampler tuning of one level."""

    index: int
    points_per_side: int
    truncation: int
    sigma2_f: float
    beta: float
    eta: float = 1.0

    def __post_init__(self):
        if self.points_per_side < 2:
            raise ValueError("points_per_side must be at least 2")
        if self.truncation < 0:
            raise ValueError("truncation must be nonnegative")
        if self.sigma2_f <= 0:
            raise ValueError("sigma2_f must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")

    @property
    def dof(self) -> int:
        return self.points_per_side ** 2

    @property
    def spacing(self) -> float:
        return 1.0 / (self.points_per_side - 1)


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Synthetic observations with full provenance for reproducibility."""

    seed: int
    generation_m: int
    generation_truncation: int
    points: np.ndarray
    values: np.ndarray
    reference_theta: np.ndarray

    def __post_init__(self):
        if len(self.points) != len(self.values):
            raise ValueError("points/values length mismatch")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("observed values must be finite")

    def to_text(self) -> str:
        lines = [
            f"seed: {self.seed}",
            f"generation_m: {self.generation_m}",
            f"generation_truncation: {self.generation_truncation}",
            "points:",
        ]
        for x, y in self.points:
            lines.append(f"  {x!r} {y!r}")
        lines.append("values:")
        for v in self.values:
            lines.append(f"  {v!r}")
        lines.append("reference_theta:")
        for v in self.reference_theta:
            lines.append(f"  {v!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ObservationSet":
        scalars = {}
        arrays = {"points": [], "values": [], "reference_theta": []}
        section = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.endswith(":") and line[:-1] in arrays:
                section = line[:-1]
            elif raw.startswith("  ") and section is not None:
                arrays[section].append([float(t) for t in line.split()])
            else:
                key, _, val = line.partition(":")
                scalars[key.strip()] = int(val.strip())
                section = None
        return cls(
            seed=scalars["seed"],
            generation_m=scalars["generation_m"],
            generation_truncation=scalars["generation_truncation"],
            points=np.array(arrays["points"], dtype=float),
            values=np.array([v[0] for v in arrays["values"]], dtype=float),
            reference_theta=np.array(
                [v[0] for v in arrays["reference_theta"]], dtype=float
            ),
        )


@dataclass(frozen=True, eq=False)
class PosteriorEvaluation:
    """All level terms for one parameter vector (deterministic in theta)."""

    log_prior: float
    log_likelihood: float
    log_posterior: float
    response: np.ndarray
    qoi: float
    cost_units: float


def log_prior(theta: "ModeVector | np.ndarray") -> float:
    """Standard-normal log-density with constants kept.

    Keeping -(R/2) log(2 pi) makes prior ratios between vectors of different
    length exact, which the two-level acceptance ratio relies on.
    """
    coeff = theta.coefficients if isinstance(theta, ModeVector) else np.asarray(theta, float)
    r = coeff.size
    return float(-0.5 * r * _LOG_2PI - 0.5 * np.dot(coeff, coeff))


def log_likelihood(
    f_model: np.ndarray, f_obs: np.ndarray, sigma2_f: float
) -> float:
    """Gaussian misfit -||F_obs - F_model||^2 / (2 sigma2_F), constant dropped."""
    if sigma2_f <= 0:
        raise ValueError("sigma2_f must be positive")
    diff = np.asarray(f_obs, float) - np.asarray(f_model, float)
    return float(-0.5 * np.dot(diff, diff) / sigma2_f)


def fidelity_schedule(
    sigma2_f_finest: float, kappa: float, spacings: "list[float]"
) -> np.ndarray:
    """Relax the likelihood variance from the finest level toward the coarsest.

    sigma2[l] = (1 + kappa * h_l) * sigma2[l+1], anchored at the finest level;
    kappa = 0 collapses the schedule to a constant.
    """
    if sigma2_f_finest <= 0:
        raise ValueError("sigma2_f_finest must be positive")
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    count = len(spacings)
    out = np.empty(count)
    out[-1] = sigma2_f_finest
    for lvl in range(count - 2, -1, -1):
        out[lvl] = (1.0 + kappa * spacings[lvl]) * out[lvl + 1]
    return out


def make_observation_points(seed: int, count: int = 9) -> np.ndarray:
    """Draw the experiment's fixed observation points uniformly in (0,1)^2."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x0B5)))
    return rng.uniform(0.0, 1.0, size=(count, 2))


def generation_level(finest: LevelSpec, truncation: int) -> LevelSpec:
    """Data-generation level: one uniform refinement beyond the finest level."""
    return LevelSpec(
        index=finest.index + 1,
        points_per_side=2 * finest.points_per_side,
        truncation=truncation,
        sigma2_f=finest.sigma2_f,
        beta=finest.beta,
        eta=finest.eta,
    )


def generate_synthetic_data(
    seed: int,
    basis: KLBasis,
    gen_level: LevelSpec,
    obs: ObservationOperator,
    f: float = 1.0,
) -> ObservationSet:
    """Sample a reference field from the prior and record its responses.

    No observation noise is added; the level fidelities play the role of the
    model-data tolerance.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x7EF)))
    theta_ref = rng.standard_normal(gen_level.truncation)
    model = LevelModel(gen_level, basis, observations=None, f=f)
    response, _, _ = model.forward(theta_ref)
    return ObservationSet(
        seed=int(seed),
        generation_m=gen_level.points_per_side,
        generation_truncation=gen_level.truncation,
        points=obs.points.copy(),
        values=response,
        reference_theta=theta_ref,
    )


class LevelModel:
    """Forward model and posterior terms of one level, with cached operators.

    Construction precomputes the mesh, the KL mode matrix at element
    centroids and the observation interpolation; evaluation is then pure and
    deterministic, so one instance may be shared by concurrent chains.

    `flat_likelihood=True` forces the log-likelihood to zero (test hook for
    prior-targeting runs); the forward solve still runs so the quantity of
    interest remains meaningful.
    """

    def __init__(
        self,
        spec: LevelSpec,
        basis: KLBasis,
        observations: "ObservationSet | None",
        f: float = 1.0,
        tol: float = 1e-10,
        flat_likelihood: bool = False,
    ):
        if spec.truncation > basis.r_max:
            raise ValueError(
                f"level truncation {spec.truncation} exceeds basis size {basis.r_max}"
            )
        if observations is None and not flat_likelihood:
            raise ValueError("observations are required unless flat_likelihood is set")
        self.spec = spec
        self.basis = basis
        self.observations = observations
        self.f = float(f)
        self.tol = float(tol)
        self.flat_likelihood = bool(flat_likelihood)
        self.mesh = build_mesh(spec.points_per_side)
        self._phi = mode_matrix(basis, self.mesh.centroids, truncation=spec.truncation)
        self._sqrt_mu = np.sqrt(basis.eigenvalues[: spec.truncation])
        if observations is not None:
            ids, w = interpolation_weights(self.mesh, observations.points)
            self._obs_ids, self._obs_w = ids, w
        else:
            self._obs_ids = self._obs_w = None

    def _coefficients(self, theta) -> np.ndarray:
        coeff = theta.coefficients if isinstance(theta, ModeVector) else np.asarray(theta, float)
        if coeff.size != self.spec.truncation:
            raise ValueError(
                f"theta has {coeff.size} modes, level {self.spec.index} expects "
                f"{self.spec.truncation}"
            )
        return coeff

    def element_field(self, theta) -> np.ndarray:
        coeff = self._coefficients(theta)
        return np.exp(self._phi @ (self._sqrt_mu * coeff))

    def forward(self, theta) -> tuple[np.ndarray, float, float]:
        """Solve and return (response at observation points, qoi, cost units)."""
        k = self.element_field(theta)
        pressure, report = assemble_and_solve(self.mesh, k, f=self.f, tol=self.tol)
        qoi = outflow_flux(self.mesh, k, pressure)
        if self._obs_ids is not None:
            response = np.sum(self._obs_w * pressure.values[self._obs_ids], axis=1)
        else:
            response = np.zeros(0)
        return response, qoi, report.cost_units

    def evaluate(self, theta) -> PosteriorEvaluation:
        coeff = self._coefficients(theta)
        lp = log_prior(coeff)
        response, qoi, cost = self.forward(coeff)
        if self.flat_likelihood:
            ll = 0.0
        else:
            ll = log_likelihood(response, self.observations.values, self.spec.sigma2_f)
        return PosteriorEvaluation(
            log_prior=lp,
            log_likelihood=ll,
            log_posterior=lp + ll,
            response=response,
            qoi=qoi,
            cost_units=cost,
        )
