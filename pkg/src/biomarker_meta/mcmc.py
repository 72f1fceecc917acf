"""Metropolis-within-Gibbs engine for hierarchical normal models.

The engine is generic: a model object supplies an ordered list of update
blocks (closed-form Gaussian conditionals, random-walk Metropolis blocks on
transformed scales, and deterministic recomputations), an initial state, and
a joint log-density for the initialisation check. Chains are advanced in
lock-step as a vectorised batch, but every chain consumes its own counter-based
RNG stream derived from (seed, chain_index), so results are bit-for-bit
reproducible and independent of how many chains run together.

Random-walk proposals are scalar and adapted towards a 0.44 acceptance rate
with multiplicative Robbins-Monro updates applied in batches during burn-in
only; scales are frozen afterwards so the retained draws satisfy detailed
balance.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .diagnostics import effective_sample_size, split_rhat

__all__ = [
    "SamplerError",
    "InitializationError",
    "AdaptationError",
    "SamplerConfig",
    "GibbsBlock",
    "MetropolisBlock",
    "DeterministicBlock",
    "ChainSet",
    "ParamSummary",
    "PosteriorSummary",
    "run_sampler",
    "summarize",
]

ADAPT_BATCH = 50
TARGET_ACCEPT = 0.44
_SLAB = 256
DEFAULT_SEED = 74519


class SamplerError(RuntimeError):
    """Base class for sampler failures."""


class InitializationError(SamplerError):
    """The joint log-density is not finite at the initial state."""


class AdaptationError(SamplerError):
    """A proposal saw zero acceptances over the whole adaptation window."""


@dataclass(frozen=True)
class SamplerConfig:
    """Run-length and seeding settings for one sampler invocation.

    ``samples`` counts post-burn-in iterations per chain; every ``thin``-th one
    is retained. ``adapt_window`` limits step-size adaptation to the first part
    of burn-in (defaults to all of it).
    """

    n_chains: int = 4
    burn_in: int = 50_000
    samples: int = 100_000
    thin: int = 1
    seed: int = DEFAULT_SEED
    adapt_window: int | None = None

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.samples <= 0:
            raise ValueError("samples must be > 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.adapt_window is not None and self.adapt_window < 0:
            raise ValueError("adapt_window must be >= 0")

    @property
    def kept(self) -> int:
        return (self.samples + self.thin - 1) // self.thin

    @classmethod
    def paper_scale(cls, seed: int = DEFAULT_SEED, **kw) -> "SamplerConfig":
        """4 chains, 50k burn-in, 100k retained iterations."""
        return cls(n_chains=4, burn_in=50_000, samples=100_000, seed=seed, **kw)

    @classmethod
    def desk_scale(cls, seed: int = DEFAULT_SEED, **kw) -> "SamplerConfig":
        """4 chains, 5k burn-in, 20k retained iterations; for tests and CI."""
        return cls(n_chains=4, burn_in=5_000, samples=20_000, seed=seed, **kw)


@dataclass
class GibbsBlock:
    """Exact Gaussian conditional: draws value = mean + sd * eps."""

    name: str
    size: int
    moments: Callable[[dict], tuple[np.ndarray, np.ndarray]]


@dataclass
class MetropolisBlock:
    """Scalar random-walk Metropolis on an unconstrained transform.

    ``log_density(z, state)`` returns the conditional log target evaluated at
    transformed values ``z`` (Jacobian included), elementwise per scalar.
    Scalars within a block must be conditionally independent of each other.
    ``z`` may carry extra leading axes (the engine stacks proposal and current
    values into one call), so implementations must broadcast, not assume
    (n_chains, size) exactly.
    """

    name: str
    size: int
    log_density: Callable[[np.ndarray, dict], np.ndarray]
    to_unconstrained: Callable[[np.ndarray], np.ndarray]
    to_constrained: Callable[[np.ndarray], np.ndarray]
    initial_scale: float = 0.5


@dataclass
class DeterministicBlock:
    """Value recomputed from the rest of the state (collapsed parameters)."""

    name: str
    size: int
    compute: Callable[[dict], np.ndarray]


@dataclass
class ChainSet:
    """Retained posterior draws, one slab per chain, plus MH acceptance rates.

    ``proposal_scales`` holds the per-chain random-walk scales as frozen at the
    end of adaptation (diagnostics only).
    """

    param_names: list[str]
    draws: np.ndarray  # (n_chains, n_kept, n_params)
    acceptance_rates: dict[str, np.ndarray] = field(default_factory=dict)
    proposal_scales: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self._index = {name: i for i, name in enumerate(self.param_names)}

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_kept(self) -> int:
        return self.draws.shape[1]

    def draws_for(self, name: str) -> np.ndarray:
        """Per-chain draws of one parameter, shape (n_chains, n_kept)."""
        return self.draws[:, :, self._index[name]]

    def pooled(self, name: str) -> np.ndarray:
        return self.draws_for(name).reshape(-1)

    def dump_csv(self, directory, prefix: str = "chain") -> list[Path]:
        """One CSV per chain: header of parameter names, one row per draw."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for c in range(self.n_chains):
            path = directory / f"{prefix}_{c}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(self.param_names)
                for row in self.draws[c]:
                    writer.writerow([format(v, ".17g") for v in row])
            paths.append(path)
        return paths


@dataclass(frozen=True)
class ParamSummary:
    mean: float
    median: float
    sd: float
    q2_5: float
    q97_5: float
    rhat: float
    ess: float

    @property
    def width(self) -> float:
        return self.q97_5 - self.q2_5

    @property
    def mcse(self) -> float:
        if self.sd == 0.0:
            return 0.0
        return self.sd / math.sqrt(max(self.ess, 1.0))


@dataclass
class PosteriorSummary:
    """Per-parameter posterior summaries in layout order."""

    order: list[str]
    rows: dict[str, ParamSummary]

    def __getitem__(self, name: str) -> ParamSummary:
        return self.rows[name]

    def __contains__(self, name: str) -> bool:
        return name in self.rows

    def max_rhat(self, names=None) -> float:
        names = self.order if names is None else names
        vals = [self.rows[n].rhat for n in names if not math.isnan(self.rows[n].rhat)]
        return max(vals) if vals else float("nan")

    def to_csv(self) -> str:
        lines = ["parameter,mean,median,sd,cri_lo,cri_hi,rhat,ess"]
        for name in self.order:
            r = self.rows[name]
            lines.append(
                f"{_csv_quote(name)},{r.mean:.6g},{r.median:.6g},{r.sd:.6g},"
                f"{r.q2_5:.6g},{r.q97_5:.6g},{r.rhat:.4f},{r.ess:.1f}"
            )
        return "\n".join(lines) + "\n"


def _csv_quote(text: str) -> str:
    if "," in text or '"' in text:
        return '"' + text.replace('"', '""') + '"'
    return text


def _chain_generators(seed: int, n_chains: int) -> list[np.random.Generator]:
    return [
        np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(c,))))
        for c in range(n_chains)
    ]


def run_sampler(model, config: SamplerConfig) -> ChainSet:
    """Run the Metropolis-within-Gibbs chain batch defined by ``model``.

    The model must provide ``param_layout() -> [(name, size)]``,
    ``blocks() -> list`` of update blocks, ``initial_state(n_chains) -> dict``
    and ``log_joint_state(state) -> (n_chains,) array``.
    """
    layout = model.param_layout()
    blocks = model.blocks()
    n_chains = config.n_chains
    state = {k: np.array(v, dtype=float, copy=True) for k, v in model.initial_state(n_chains).items()}

    lj = np.asarray(model.log_joint_state(state), dtype=float)
    if not np.all(np.isfinite(lj)):
        bad = np.flatnonzero(~np.isfinite(lj)).tolist()
        raise InitializationError(f"log joint density not finite at initial state (chains {bad})")

    gibbs = [b for b in blocks if isinstance(b, GibbsBlock)]
    metro = [b for b in blocks if isinstance(b, MetropolisBlock)]
    n_gibbs_cols = sum(b.size for b in gibbs)
    n_metro_cols = sum(b.size for b in metro)

    norm_cols: dict[str, slice] = {}
    off = 0
    for b in gibbs:
        norm_cols[b.name] = slice(off, off + b.size)
        off += b.size
    for b in metro:
        norm_cols[b.name] = slice(off, off + b.size)
        off += b.size
    unif_cols: dict[str, slice] = {}
    off = 0
    for b in metro:
        unif_cols[b.name] = slice(off, off + b.size)
        off += b.size

    # transformed values and adaptation state for MH blocks
    zval = {b.name: b.to_unconstrained(state[b.name]) for b in metro}
    scales = {b.name: np.full((n_chains, b.size), b.initial_scale) for b in metro}
    batch_acc = {b.name: np.zeros((n_chains, b.size)) for b in metro}
    phase_acc = {b.name: np.zeros((n_chains, b.size)) for b in metro}
    kept_acc = {b.name: np.zeros((n_chains, b.size)) for b in metro}

    burn = config.burn_in
    total = burn + config.samples
    adapt_end = burn if config.adapt_window is None else min(config.adapt_window, burn)
    kept = config.kept
    n_params = sum(size for _, size in layout)
    out = np.empty((n_chains, kept, n_params))
    out_slices = {}
    off = 0
    for name, size in layout:
        out_slices[name] = slice(off, off + size)
        off += size

    gens = _chain_generators(config.seed, n_chains)
    stored = 0
    batch_count = 0
    it = 0
    while it < total:
        span = min(_SLAB, total - it)
        normals = np.stack([g.standard_normal((span, max(n_gibbs_cols + n_metro_cols, 1))) for g in gens])
        uniforms = np.stack([g.random((span, max(n_metro_cols, 1))) for g in gens])
        for t in range(span):
            eps = normals[:, t, :]
            uni = uniforms[:, t, :]
            for b in blocks:
                if isinstance(b, GibbsBlock):
                    mean, sd = b.moments(state)
                    state[b.name] = mean + sd * eps[:, norm_cols[b.name]]
                elif isinstance(b, DeterministicBlock):
                    state[b.name] = b.compute(state)
                else:
                    z = zval[b.name]
                    prop = z + scales[b.name] * eps[:, norm_cols[b.name]]
                    # one stacked evaluation: leading axis 0 = proposal, 1 = current
                    ld = b.log_density(np.stack((prop, z)), state)
                    delta = ld[0] - ld[1]
                    accept = np.log(uni[:, unif_cols[b.name]]) < delta
                    z = np.where(accept, prop, z)
                    zval[b.name] = z
                    state[b.name] = b.to_constrained(z)
                    if it < adapt_end:
                        batch_acc[b.name] += accept
                        phase_acc[b.name] += accept
                    elif it >= burn:
                        kept_acc[b.name] += accept
            if it < adapt_end and (it + 1) % ADAPT_BATCH == 0:
                batch_count += 1
                gamma = min(0.25, 2.0 / math.sqrt(batch_count))
                for b in metro:
                    rate = batch_acc[b.name] / ADAPT_BATCH
                    scales[b.name] *= np.exp(gamma * (rate - TARGET_ACCEPT))
                    batch_acc[b.name][:] = 0.0
            if it + 1 == adapt_end and adapt_end >= ADAPT_BATCH:
                for b in metro:
                    if np.any(phase_acc[b.name] == 0.0):
                        raise AdaptationError(
                            f"no accepted proposals for '{b.name}' during the "
                            f"{adapt_end}-iteration adaptation window"
                        )
            if it >= burn and (it - burn) % config.thin == 0:
                for name, _ in layout:
                    out[:, stored, out_slices[name]] = state[name]
                stored += 1
            it += 1

    if stored != kept:
        raise SamplerError(f"internal error: stored {stored} draws, expected {kept}")
    if not np.all(np.isfinite(out)):
        raise SamplerError("non-finite draws retained")

    names: list[str] = []
    for name, size in layout:
        names.extend(model.scalar_names(name) if hasattr(model, "scalar_names") else _default_names(name, size))
    rates = {}
    final_scales = {}
    for b in metro:
        block_rates = kept_acc[b.name] / max(config.samples, 1)
        scalars = model.scalar_names(b.name) if hasattr(model, "scalar_names") else _default_names(b.name, b.size)
        for j, scalar in enumerate(scalars):
            rates[scalar] = block_rates[:, j].copy()
            final_scales[scalar] = scales[b.name][:, j].copy()
    return ChainSet(
        param_names=names, draws=out, acceptance_rates=rates, proposal_scales=final_scales
    )


def _default_names(name: str, size: int) -> list[str]:
    return [name] if size == 1 else [f"{name}[{j}]" for j in range(size)]


def summarize(chains: ChainSet, derived_squares: tuple[str, ...] = ("tau_pos", "tau_beta")) -> PosteriorSummary:
    """Posterior mean/median/sd, 95% CrI (type-7 quantiles), split R-hat and ESS.

    Parameters named in ``derived_squares`` additionally get a ``<name>_sq``
    row computed from the squared draws, reported right after the scale row.
    """
    if chains.n_kept < 100:
        raise ValueError(f"need >= 100 retained draws to summarise, got {chains.n_kept}")
    if chains.n_chains < 2:
        warnings.warn("single chain: R-hat is not defined and is reported as NaN", stacklevel=2)

    order: list[str] = []
    rows: dict[str, ParamSummary] = {}

    def add(name: str, draws: np.ndarray):
        pooled = draws.reshape(-1)
        lo, med, hi = np.quantile(pooled, [0.025, 0.5, 0.975])
        rhat = split_rhat(draws) if chains.n_chains >= 2 else float("nan")
        rows[name] = ParamSummary(
            mean=float(pooled.mean()),
            median=float(med),
            sd=float(pooled.std(ddof=1)) if pooled.size > 1 else 0.0,
            q2_5=float(lo),
            q97_5=float(hi),
            rhat=rhat,
            ess=effective_sample_size(draws),
        )
        order.append(name)

    for name in chains.param_names:
        draws = chains.draws_for(name)
        add(name, draws)
        if name in derived_squares:
            add(f"{name}_sq", draws**2)
    return PosteriorSummary(order=order, rows=rows)
