"""Proposal kernels and Markov transitions for single and two-level chains.

Proposals use the preconditioned Crank-Nicolson (pCN) update

    theta' = sqrt(1 - beta^2) * theta + beta * xi,    xi ~ N(0, I),

which leaves the standard-normal prior invariant. Because pCN is reversible
with respect to the prior rather than symmetric in volume, two acceptance
rules are provided:

* ``prior_reversible`` (default): the proposal ratio cancels the prior
  ratio exactly, so the single-level rule reduces to a likelihood ratio and
  the two-level rule to the four likelihood terms. This targets the stated
  posteriors exactly under pCN.
* ``posterior_ratio``: the plain posterior-ratio formulas, i.e. what one
  obtains by treating pCN as a symmetric proposal. Retained for literal
  reproduction; with a flat likelihood its invariant density is the prior
  squared (a normal with variance 1/2), not the prior.

The two-level step advances a coarse chain one Metropolis step, reuses its
new state as the coarse block of the fine proposal, draws fresh fine modes
by pCN, and accepts or rejects the fine chain as a whole. Each step costs
exactly one posterior evaluation per level; everything else is cached.

Each chain is strictly sequential and owns its state and RNG streams;
distinct chains never share mutable state, so they may run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .posterior import PosteriorEvaluation
from .random_field import ModeVector

__all__ = [
    "ACCEPTANCE_RULES",
    "RngStream",
    "ChainStreams",
    "ChainState",
    "CoupledChainState",
    "ChainRecord",
    "pcn_propose",
    "mh_step_single",
    "coupled_step",
    "init_single_chain",
    "init_coupled_chain",
    "run_chain",
    "trace_header",
    "trace_row",
]

PRIOR_REVERSIBLE = "prior_reversible"
POSTERIOR_RATIO = "posterior_ratio"
ACCEPTANCE_RULES = (PRIOR_REVERSIBLE, POSTERIOR_RATIO)

_ROLE_CODES = {
    "init_coarse": 1,
    "init_fine": 2,
    "prop_coarse": 3,
    "prop_fine": 4,
    "accept_coarse": 5,
    "accept_fine": 6,
}


class RngStream:
    """Deterministic pseudo-random stream keyed by (seed, level, chain, role).

    Identical identifiers reproduce identical streams; distinct identifiers
    give statistically independent streams.
    """

    def __init__(self, master_seed: int, level: int, chain: int, role: str):
        if role not in _ROLE_CODES:
            raise ValueError(f"unknown stream role {role!r}")
        self.identifier = (int(master_seed), int(level), int(chain), role)
        seq = np.random.SeedSequence(
            (int(master_seed), int(level), int(chain), _ROLE_CODES[role])
        )
        self._gen = np.random.default_rng(seq)

    def standard_normal(self, size: int) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self) -> float:
        return float(self._gen.uniform())

    def label(self) -> str:
        seed, level, chain, role = self.identifier
        return f"seed={seed}/level={level}/chain={chain}/{role}"


@dataclass
class ChainStreams:
    """The stream bundle a single chain owns."""

    init_coarse: RngStream | None
    init_fine: RngStream
    prop_coarse: RngStream | None
    prop_fine: RngStream
    accept_coarse: RngStream | None
    accept_fine: RngStream

    @classmethod
    def for_chain(
        cls, master_seed: int, level: int, chain: int, coupled: bool
    ) -> "ChainStreams":
        mk = lambda role: RngStream(master_seed, level, chain, role)
        return cls(
            init_coarse=mk("init_coarse") if coupled else None,
            init_fine=mk("init_fine"),
            prop_coarse=mk("prop_coarse") if coupled else None,
            prop_fine=mk("prop_fine"),
            accept_coarse=mk("accept_coarse") if coupled else None,
            accept_fine=mk("accept_fine"),
        )

    def labels(self) -> list[str]:
        out = []
        for s in (self.init_coarse, self.init_fine, self.prop_coarse,
                  self.prop_fine, self.accept_coarse, self.accept_fine):
            if s is not None:
                out.append(s.label())
        return out


def pcn_propose(theta: np.ndarray, beta: float, rng: RngStream) -> np.ndarray:
    """One pCN draw. beta = 0 reproduces theta exactly (testing only)."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"pCN step size must lie in [0, 1], got {beta}")
    theta = np.asarray(theta, dtype=float)
    xi = rng.standard_normal(theta.size)
    return np.sqrt(1.0 - beta * beta) * theta + beta * xi


def _accept(log_alpha: float, rng: RngStream) -> bool:
    # clamp at 0 from above: alpha = exp(min(0, log_alpha)); u = 1.0 rejects
    u = rng.uniform()
    return np.log(u) < min(0.0, log_alpha) if u > 0.0 else True


def _log_ratio(new: PosteriorEvaluation, old: PosteriorEvaluation, rule: str) -> float:
    if rule == POSTERIOR_RATIO:
        return new.log_posterior - old.log_posterior
    if rule == PRIOR_REVERSIBLE:
        return new.log_likelihood - old.log_likelihood
    raise ValueError(f"unknown acceptance rule {rule!r}")


@dataclass(eq=False)
class ChainState:
    """Single-level chain state with its cached evaluation and tallies."""

    theta: ModeVector
    evaluation: PosteriorEvaluation
    step: int = 0
    accepts: int = 0
    rejects: int = 0


@dataclass(eq=False)
class CoupledChainState:
    """Paired fine/coarse states of the two-level sampler.

    Caches: the fine-level evaluation of theta, the coarse-level evaluation
    of theta's coarse block, and the coarse-level evaluation of the coarse
    chain's state. These are exactly the terms the acceptance ratio and the
    sample difference need, so each transition performs one new evaluation
    per level.
    """

    fine: ModeVector
    fine_eval: PosteriorEvaluation
    fine_coarse_eval: PosteriorEvaluation
    coarse: ModeVector
    coarse_eval: PosteriorEvaluation
    step: int = 0
    coarse_accepts: int = 0
    coarse_rejects: int = 0
    fine_accepts: int = 0
    fine_rejects: int = 0

    def __post_init__(self):
        if self.fine.coarse_len != len(self.coarse):
            raise ValueError("coarse chain length must equal the fine coarse block")

    @property
    def y_value(self) -> float:
        return self.fine_eval.qoi - self.coarse_eval.qoi


def init_single_chain(model, streams: ChainStreams) -> ChainState:
    """Draw theta0 from the prior and cache its evaluation."""
    r = model.spec.truncation
    theta = ModeVector(
        level=model.spec.index,
        coefficients=streams.init_fine.standard_normal(r),
        coarse_len=0,
    )
    return ChainState(theta=theta, evaluation=model.evaluate(theta))


def init_coupled_chain(fine_model, coarse_model, streams: ChainStreams) -> CoupledChainState:
    """Draw a shared coarse block from the prior plus fresh fine modes."""
    r_coarse = coarse_model.spec.truncation
    r_fine = fine_model.spec.truncation
    if r_coarse > r_fine:
        raise ValueError("coarse truncation exceeds fine truncation")
    coarse0 = streams.init_coarse.standard_normal(r_coarse)
    fine_block = streams.init_fine.standard_normal(r_fine - r_coarse)
    coarse = ModeVector(coarse_model.spec.index, coarse0, coarse_len=0)
    fine = ModeVector(
        fine_model.spec.index,
        np.concatenate([coarse0, fine_block]),
        coarse_len=r_coarse,
    )
    coarse_eval = coarse_model.evaluate(coarse)
    return CoupledChainState(
        fine=fine,
        fine_eval=fine_model.evaluate(fine),
        fine_coarse_eval=coarse_eval,  # theta0 coarse block equals the coarse state
        coarse=coarse,
        coarse_eval=coarse_eval,
    )


def mh_step_single(
    state: ChainState,
    model,
    beta: float,
    prop_stream: RngStream,
    accept_stream: RngStream,
    rule: str = PRIOR_REVERSIBLE,
) -> ChainState:
    """One Metropolis-Hastings transition with a pCN proposal.

    Performs exactly one posterior evaluation (at the proposal).
    """
    proposal = ModeVector(
        state.theta.level,
        pcn_propose(state.theta.coefficients, beta, prop_stream),
        coarse_len=state.theta.coarse_len,
    )
    prop_eval = model.evaluate(proposal)
    if _accept(_log_ratio(prop_eval, state.evaluation, rule), accept_stream):
        return ChainState(
            theta=proposal,
            evaluation=prop_eval,
            step=state.step + 1,
            accepts=state.accepts + 1,
            rejects=state.rejects,
        )
    return replace(state, step=state.step + 1, rejects=state.rejects + 1)


def coupled_step(
    state: CoupledChainState,
    fine_model,
    coarse_model,
    beta: float,
    streams: ChainStreams,
    rule: str = PRIOR_REVERSIBLE,
) -> CoupledChainState:
    """One transition of the two-level sampler.

    Coarse substep: Metropolis step of the coarse chain at its own level.
    Fine substep: propose [new coarse state, pCN fine modes] and accept with
    the two-level ratio

        alpha = min{1, [pi_f(prop) pi_c(theta_C)] / [pi_f(theta) pi_c(prop_C)]},

    where under the prior-reversible rule every prior factor cancels and only
    the four likelihood terms remain. Costs one evaluation per level.
    """
    # --- coarse substep
    coarse_prop = ModeVector(
        state.coarse.level,
        pcn_propose(state.coarse.coefficients, beta, streams.prop_coarse),
        coarse_len=0,
    )
    coarse_prop_eval = coarse_model.evaluate(coarse_prop)
    if _accept(
        _log_ratio(coarse_prop_eval, state.coarse_eval, rule), streams.accept_coarse
    ):
        new_coarse, new_coarse_eval = coarse_prop, coarse_prop_eval
        coarse_accepted = True
    else:
        new_coarse, new_coarse_eval = state.coarse, state.coarse_eval
        coarse_accepted = False

    # --- fine substep: coarse block comes from the advanced coarse chain
    fine_block = pcn_propose(state.fine.fine, beta, streams.prop_fine)
    fine_prop = ModeVector(
        state.fine.level,
        np.concatenate([new_coarse.coefficients, fine_block]),
        coarse_len=len(new_coarse),
    )
    fine_prop_eval = fine_model.evaluate(fine_prop)

    if rule == POSTERIOR_RATIO:
        log_alpha = (
            fine_prop_eval.log_posterior
            + state.fine_coarse_eval.log_posterior
            - state.fine_eval.log_posterior
            - new_coarse_eval.log_posterior
        )
    else:
        log_alpha = (
            fine_prop_eval.log_likelihood
            + state.fine_coarse_eval.log_likelihood
            - state.fine_eval.log_likelihood
            - new_coarse_eval.log_likelihood
        )

    if _accept(log_alpha, streams.accept_fine):
        return CoupledChainState(
            fine=fine_prop,
            fine_eval=fine_prop_eval,
            fine_coarse_eval=new_coarse_eval,
            coarse=new_coarse,
            coarse_eval=new_coarse_eval,
            step=state.step + 1,
            coarse_accepts=state.coarse_accepts + coarse_accepted,
            coarse_rejects=state.coarse_rejects + (not coarse_accepted),
            fine_accepts=state.fine_accepts + 1,
            fine_rejects=state.fine_rejects,
        )
    return CoupledChainState(
        fine=state.fine,
        fine_eval=state.fine_eval,
        fine_coarse_eval=state.fine_coarse_eval,
        coarse=new_coarse,
        coarse_eval=new_coarse_eval,
        step=state.step + 1,
        coarse_accepts=state.coarse_accepts + coarse_accepted,
        coarse_rejects=state.coarse_rejects + (not coarse_accepted),
        fine_accepts=state.fine_accepts,
        fine_rejects=state.fine_rejects + 1,
    )


@dataclass(eq=False)
class ChainRecord:
    """Kept samples and bookkeeping from one `run_chain` call."""

    kind: str
    level: int
    values: np.ndarray          # Q for single chains, Y for coupled chains
    q_fine: np.ndarray
    q_coarse: np.ndarray        # empty for single chains
    raw_steps: int
    accepts_fine: int
    accepts_coarse: int
    burn_in_steps: int


def run_chain(
    kind: str,
    models,
    n_keep: int,
    burn_in: int,
    thinning: int,
    beta: float,
    streams: ChainStreams,
    rule: str = PRIOR_REVERSIBLE,
    state=None,
    trace=None,
    trace_state=None,
):
    """Advance one chain by burn_in + n_keep*thinning raw transitions.

    Records every `thinning`-th post-burn-in state's quantity (Q or Y).
    Passing the returned state back in (with burn_in=0) extends the chain
    deterministically. `trace`, if given, is a writable text stream receiving
    one row per kept sample; `trace_state` carries (step, cumulative cost)
    across calls.
    """
    if kind not in ("single", "coupled"):
        raise ValueError("kind must be 'single' or 'coupled'")
    if n_keep < 0 or burn_in < 0 or thinning < 1:
        raise ValueError("need n_keep >= 0, burn_in >= 0, thinning >= 1")

    if kind == "single":
        model = models if not isinstance(models, tuple) else models[0]
        if state is None:
            state = init_single_chain(model, streams)
        start_acc, start_steps = state.accepts, state.step
        step_fn = lambda s: mh_step_single(
            s, model, beta, streams.prop_fine, streams.accept_fine, rule
        )
        value_of = lambda s: s.evaluation.qoi
    else:
        fine_model, coarse_model = models
        if state is None:
            state = init_coupled_chain(fine_model, coarse_model, streams)
        start_acc = (state.fine_accepts, state.coarse_accepts)
        start_steps = state.step
        step_fn = lambda s: coupled_step(
            s, fine_model, coarse_model, beta, streams, rule
        )
        value_of = lambda s: s.y_value

    for _ in range(burn_in):
        state = step_fn(state)

    values = np.empty(n_keep)
    q_fine = np.empty(n_keep)
    q_coarse = np.empty(n_keep) if kind == "coupled" else np.empty(0)
    for i in range(n_keep):
        before = state
        for _ in range(thinning):
            state = step_fn(state)
        values[i] = value_of(state)
        if kind == "coupled":
            q_fine[i] = state.fine_eval.qoi
            q_coarse[i] = state.coarse_eval.qoi
        else:
            q_fine[i] = state.evaluation.qoi
        if trace is not None:
            trace_state = _emit_trace(
                trace, trace_state, kind, before, state, thinning
            )

    if kind == "single":
        record = ChainRecord(
            kind=kind,
            level=state.theta.level,
            values=values,
            q_fine=q_fine,
            q_coarse=q_coarse,
            raw_steps=state.step - start_steps,
            accepts_fine=state.accepts - start_acc,
            accepts_coarse=0,
            burn_in_steps=burn_in,
        )
    else:
        record = ChainRecord(
            kind=kind,
            level=state.fine.level,
            values=values,
            q_fine=q_fine,
            q_coarse=q_coarse,
            raw_steps=state.step - start_steps,
            accepts_fine=state.fine_accepts - start_acc[0],
            accepts_coarse=state.coarse_accepts - start_acc[1],
            burn_in_steps=burn_in,
        )
    return record, state, trace_state


def trace_header() -> str:
    return "step,level,value,accept_coarse,accept_fine,cum_cost_units\n"


def trace_row(step, level, value, acc_coarse, acc_fine, cum_cost) -> str:
    return (
        f"{step},{level},{float(value)!r},{acc_coarse},{acc_fine},{float(cum_cost)!r}\n"
    )


def _emit_trace(trace, trace_state, kind, before, state, thinning):
    # acceptance flags report whether any transition in the thinning block
    # accepted; cost counts one evaluation per level per raw transition
    _, cum_cost = trace_state if trace_state is not None else (0, 0.0)
    if kind == "single":
        cum_cost += thinning * state.evaluation.cost_units
        trace.write(
            trace_row(state.step, state.theta.level, state.evaluation.qoi, -1,
                      int(state.accepts > before.accepts), cum_cost)
        )
    else:
        cum_cost += thinning * (
            state.fine_eval.cost_units + state.coarse_eval.cost_units
        )
        trace.write(
            trace_row(state.step, state.fine.level, state.y_value,
                      int(state.coarse_accepts > before.coarse_accepts),
                      int(state.fine_accepts > before.fine_accepts),
                      cum_cost)
        )
    return (state.step, cum_cost)
