"""The hierarchical REMA models, bound to a dataset as sampler update blocks.

Model structure, per study i (log scale throughout):

- positive subgroup estimate:   y_pos_i ~ N(delta_pos_i, se_pos_i^2)
- negative subgroup estimate:   y_neg_i ~ N(delta_pos_i + beta_i, se_neg_i^2)
- mixed population estimate:    y_mix_i ~ N(delta_pos_i + p_i * beta_i, se_mix_i^2)

with delta_pos_i ~ N(d_pos, tau_pos^2), beta_i ~ N(mu_beta, tau_beta^2) and
p_i (the study's biomarker-negative proportion) given a Beta prior. The
negative and mixed true effects are deterministic offsets of delta_pos_i,
not separately noisy. Model kinds select which observation blocks enter:

- M1    pooled positive-subgroup analysis only
- M2    adds negative-subgroup estimates from studies reporting both
- M2NEG additionally accepts studies reporting only a negative estimate
- M3    adds mixed-population estimates interpolated through p_i

All location parameters have exact Gaussian conditionals and are Gibbs
sampled; the two heterogeneity scales move by random-walk Metropolis on the
log scale and the proportions on the logit scale, Jacobians included.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .data_model import MetaDataset, StudyRecord, ValidationError
from .mcmc import (
    DeterministicBlock,
    GibbsBlock,
    MetropolisBlock,
    SamplerConfig,
    run_sampler,
    summarize,
)
from .priors import HyperPriors

__all__ = ["ModelKind", "BoundModel", "bind", "log_joint", "conjugate_updates", "fit"]

_LOG_2PI = math.log(2.0 * math.pi)


class ModelKind(enum.Enum):
    M1 = "m1"
    M2 = "m2"
    M2NEG = "m2neg"
    M3 = "m3"

    @classmethod
    def from_string(cls, text: str) -> "ModelKind":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValidationError(
                f"unknown model '{text}', expected one of {[k.value for k in cls]}"
            ) from None

    @property
    def uses_negative(self) -> bool:
        return self is not ModelKind.M1

    @property
    def uses_neg_only(self) -> bool:
        return self in (ModelKind.M2NEG, ModelKind.M3)

    @property
    def uses_mixed(self) -> bool:
        return self is ModelKind.M3


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p) - np.log1p(-p)


@dataclass
class BoundModel:
    """A model kind bound to a dataset: parameter layout plus update blocks.

    Instances are read-only after construction and safe to share across
    chains. ``fixed`` can pin ``tau_pos``/``tau_beta`` (a value of exactly 0
    collapses the corresponding random effects onto their mean) and ``p``
    (mapping study_id -> proportion). ``prior_only`` drops every observation
    term, which turns the sampler into a prior sampler for validation.
    """

    kind: ModelKind
    dataset: MetaDataset
    hyperpriors: HyperPriors
    fixed: dict = field(default_factory=dict)
    prior_only: bool = False

    def __post_init__(self):
        hp = self.hyperpriors
        records = self._included_records()
        self.study_ids = [r.study_id for r in records]
        n = len(records)
        use_neg = self.kind.uses_negative
        use_mix = self.kind.uses_mixed

        beta_idx = [
            i
            for i, r in enumerate(records)
            if use_neg and (r.negative is not None or (use_mix and r.mixed is not None))
        ]
        bmap = {i: j for j, i in enumerate(beta_idx)}
        mix_idx = [i for i, r in enumerate(records) if use_mix and r.mixed is not None]
        pmap = {i: j for j, i in enumerate(mix_idx)}

        self.n = n
        self.k = len(beta_idx)
        self.m = len(mix_idx)
        self.beta_ids = [records[i].study_id for i in beta_idx]
        self.p_ids = [records[i].study_id for i in mix_idx]

        pos = [(i, r.positive) for i, r in enumerate(records) if r.positive is not None]
        neg = [(i, r.negative) for i, r in enumerate(records) if use_neg and r.negative is not None]
        mix = [(i, r.mixed) for i, r in enumerate(records) if use_mix and r.mixed is not None]

        self.pos_i = np.array([i for i, _ in pos], dtype=int)
        self.ypos = np.array([e.y for _, e in pos])
        self.wpos = np.array([1.0 / e.variance for _, e in pos])
        self.neg_i = np.array([i for i, _ in neg], dtype=int)
        self.neg_b = np.array([bmap[i] for i, _ in neg], dtype=int)
        self.yneg = np.array([e.y for _, e in neg])
        self.wneg = np.array([1.0 / e.variance for _, e in neg])
        self.mix_i = np.array([i for i, _ in mix], dtype=int)
        self.mix_b = np.array([bmap[i] for i, _ in mix], dtype=int)
        self.ymix = np.array([e.y for _, e in mix])
        self.wmix = np.array([1.0 / e.variance for _, e in mix])
        self.prop_a = np.array([records[i].proportion_prior.alpha for i in mix_idx])
        self.prop_b = np.array([records[i].proportion_prior.beta for i in mix_idx])

        if self.prior_only:
            for name in ("wpos", "wneg", "wmix"):
                setattr(self, name, np.zeros_like(getattr(self, name)))

        # static precision/mean pieces for the Gaussian conditionals
        self.P0_delta = np.zeros(n)
        self.M0_delta = np.zeros(n)
        np.add.at(self.P0_delta, self.pos_i, self.wpos)
        np.add.at(self.M0_delta, self.pos_i, self.ypos * self.wpos)
        np.add.at(self.P0_delta, self.neg_i, self.wneg)
        np.add.at(self.M0_delta, self.neg_i, self.yneg * self.wneg)
        np.add.at(self.P0_delta, self.mix_i, self.wmix)
        np.add.at(self.M0_delta, self.mix_i, self.ymix * self.wmix)
        self.P0_beta = np.zeros(self.k)
        if self.k:
            np.add.at(self.P0_beta, self.neg_b, self.wneg)

        self.tau_pos_fixed = self._fixed_scale("tau_pos")
        self.tau_beta_fixed = self._fixed_scale("tau_beta")
        self.collapse_delta = self.tau_pos_fixed == 0.0
        self.collapse_beta = self.k > 0 and self.tau_beta_fixed == 0.0
        self.p_fixed = self._fixed_proportions()

        self.has_beta_block = self.kind.uses_negative and self.k > 0
        self.prior_d = (hp.d_pos_mean, hp.d_pos_sd)
        self.prior_mu = (hp.mu_beta_mean, hp.mu_beta_sd)
        self.tau_pos_scale = hp.tau_pos_halfnormal_sd
        self.tau_beta_scale = hp.tau_beta_halfnormal_sd

        layout = [("d_pos", 1), ("tau_pos", 1)]
        if self.has_beta_block:
            layout += [("mu_beta", 1), ("tau_beta", 1)]
        layout.append(("delta_pos", n))
        if self.has_beta_block:
            layout.append(("beta", self.k))
        if self.m:
            layout.append(("p", self.m))
        self._layout = layout

    # -- dataset views ---------------------------------------------------

    def _included_records(self) -> list[StudyRecord]:
        kind, ds = self.kind, self.dataset
        records = []
        for r in ds.studies:
            block = r.block
            if block in ("pos_only", "both"):
                records.append(r)
            elif block == "neg_only" and kind.uses_neg_only:
                records.append(r)
            elif block == "mixed" and kind.uses_mixed:
                records.append(r)
        if kind is ModelKind.M1 and not any(r.positive is not None for r in records):
            raise ValidationError("model m1 requires at least one biomarker-positive estimate")
        if kind in (ModelKind.M2, ModelKind.M2NEG) and ds.n_both < 1:
            raise ValidationError(
                f"model {kind.value} requires at least one study reporting both subgroups "
                f"(dataset blocks: pos_only={ds.n_pos_only}, both={ds.n_both}, "
                f"neg_only={ds.n_neg_only}, mixed={ds.n_mix})"
            )
        if kind is ModelKind.M3 and ds.n_mix < 1:
            raise ValidationError(
                f"model m3 requires at least one mixed-population study "
                f"(dataset blocks: pos_only={ds.n_pos_only}, both={ds.n_both}, "
                f"neg_only={ds.n_neg_only}, mixed={ds.n_mix})"
            )
        if not records:
            raise ValidationError(f"no studies usable by model {kind.value}")
        return records

    def _fixed_scale(self, name: str) -> float | None:
        if name not in self.fixed:
            return None
        v = float(self.fixed[name])
        if not (math.isfinite(v) and v >= 0.0):
            raise ValidationError(f"fixed {name} must be >= 0, got {v}")
        return v

    def _fixed_proportions(self) -> np.ndarray | None:
        if "p" not in self.fixed or self.m == 0:
            return None
        spec = self.fixed["p"]
        if np.isscalar(spec):
            vals = np.full(self.m, float(spec))
        else:
            vals = np.array([float(spec[sid]) for sid in self.p_ids])
        # endpoints allowed when fixed: p=0 / p=1 are the exact reduction cases
        if np.any((vals < 0.0) | (vals > 1.0)):
            raise ValidationError("fixed proportions must lie in [0, 1]")
        return vals

    # -- engine protocol ---------------------------------------------------

    def param_layout(self) -> list[tuple[str, int]]:
        return list(self._layout)

    def scalar_names(self, block: str) -> list[str]:
        if block == "delta_pos":
            return [f"delta_pos[{sid}]" for sid in self.study_ids]
        if block == "beta":
            return [f"beta[{sid}]" for sid in self.beta_ids]
        if block == "p":
            return [f"p[{sid}]" for sid in self.p_ids]
        return [block]

    def flat_names(self) -> list[str]:
        names = []
        for block, _ in self._layout:
            names.extend(self.scalar_names(block))
        return names

    def _delta_vals(self, state: dict) -> np.ndarray:
        if self.collapse_delta:
            return np.broadcast_to(state["d_pos"], (state["d_pos"].shape[0], self.n))
        return state["delta_pos"]

    def _beta_vals(self, state: dict) -> np.ndarray:
        if self.collapse_beta:
            return np.broadcast_to(state["mu_beta"], (state["mu_beta"].shape[0], self.k))
        return state["beta"]

    def _p_vals(self, state: dict) -> np.ndarray:
        return state["p"]

    def initial_state(self, n_chains: int) -> dict:
        d0 = self.prior_d[0]
        if self.wpos.sum() > 0:
            d0 = float(np.sum(self.ypos * self.wpos) / np.sum(self.wpos))
        mu0 = self.prior_mu[0]
        shared = [
            (j, i)
            for i, j in zip(self.neg_i, self.neg_b)
            if i in set(self.pos_i.tolist())
        ]
        if shared and not self.prior_only:
            pos_at = {int(i): (y, w) for i, y, w in zip(self.pos_i, self.ypos, self.wpos)}
            neg_at = {int(i): (y, w) for i, y, w in zip(self.neg_i, self.yneg, self.wneg)}
            num = den = 0.0
            for _, i in shared:
                yp, wp = pos_at[int(i)]
                yn, wn = neg_at[int(i)]
                w = 1.0 / (1.0 / wp + 1.0 / wn)
                num += (yn - yp) * w
                den += w
            if den > 0:
                mu0 = num / den

        tau0 = self.tau_pos_fixed if self.tau_pos_fixed is not None else 0.5 * self.tau_pos_scale
        taub0 = self.tau_beta_fixed if self.tau_beta_fixed is not None else 0.5 * self.tau_beta_scale

        delta0 = np.full(self.n, d0)
        delta0[self.pos_i] = self.ypos if not self.prior_only else d0
        if self.collapse_delta:
            delta0[:] = d0
        beta0 = np.full(self.k, mu0)
        if self.k and not self.prior_only and not self.collapse_beta:
            beta0[self.neg_b] = self.yneg - delta0[self.neg_i]
        p0 = self.p_fixed if self.p_fixed is not None else self.prop_a / (self.prop_a + self.prop_b)

        def tile(vals, size):
            return np.tile(np.asarray(vals, dtype=float).reshape(1, size), (n_chains, 1))

        state = {
            "d_pos": tile([d0], 1),
            "tau_pos": tile([tau0], 1),
            "delta_pos": tile(delta0, self.n),
        }
        if self.has_beta_block:
            state["mu_beta"] = tile([mu0], 1)
            state["tau_beta"] = tile([taub0], 1)
            state["beta"] = tile(beta0, self.k)
        if self.m:
            state["p"] = tile(p0, self.m)
        return state

    # -- update blocks -----------------------------------------------------

    def _delta_moments(self, state: dict):
        tau = state["tau_pos"]
        ssq = 1.0 / (tau * tau)
        P = self.P0_delta + ssq
        M = self.M0_delta + state["d_pos"] * ssq
        if self.k:
            beta = self._beta_vals(state)
            if len(self.neg_i):
                M[:, self.neg_i] -= beta[:, self.neg_b] * self.wneg
            if self.m:
                M[:, self.mix_i] -= self._p_vals(state) * beta[:, self.mix_b] * self.wmix
        return M / P, np.sqrt(1.0 / P)

    def _beta_moments(self, state: dict):
        taub = state["tau_beta"]
        ssqb = 1.0 / (taub * taub)
        delta = self._delta_vals(state)
        C = delta.shape[0]
        P = self.P0_beta + ssqb  # broadcasts to a fresh (C, k) array
        M = np.empty_like(P)
        M[:] = state["mu_beta"] * ssqb
        if len(self.neg_i):
            M[:, self.neg_b] += (self.yneg - delta[:, self.neg_i]) * self.wneg
        if self.m:
            p = self._p_vals(state)
            P[:, self.mix_b] += p * p * self.wmix
            M[:, self.mix_b] += p * (self.ymix - delta[:, self.mix_i]) * self.wmix
        return M / P, np.sqrt(1.0 / P)

    def _d_moments(self, state: dict):
        mean0, sd0 = self.prior_d
        prior_prec = 1.0 / (sd0 * sd0)
        if not self.collapse_delta:
            tau = state["tau_pos"]
            ssq = 1.0 / (tau * tau)
            P = self.n * ssq + prior_prec
            M = state["delta_pos"].sum(axis=1, keepdims=True) * ssq + mean0 * prior_prec
        else:
            C = state["d_pos"].shape[0]
            P = np.full((C, 1), self.wpos.sum() + self.wneg.sum() + self.wmix.sum() + prior_prec)
            M = np.full((C, 1), float(np.sum(self.ypos * self.wpos)) + mean0 * prior_prec)
            if self.k:
                beta = self._beta_vals(state)
                if len(self.neg_i):
                    M += ((self.yneg - beta[:, self.neg_b]) * self.wneg).sum(axis=1, keepdims=True)
                if self.m:
                    p = self._p_vals(state)
                    M += ((self.ymix - p * beta[:, self.mix_b]) * self.wmix).sum(axis=1, keepdims=True)
        return M / P, np.sqrt(1.0 / P)

    def _mu_moments(self, state: dict):
        mean0, sd0 = self.prior_mu
        prior_prec = 1.0 / (sd0 * sd0)
        if not self.collapse_beta:
            taub = state["tau_beta"]
            ssqb = 1.0 / (taub * taub)
            P = self.k * ssqb + prior_prec
            M = state["beta"].sum(axis=1, keepdims=True) * ssqb + mean0 * prior_prec
        else:
            delta = self._delta_vals(state)
            C = delta.shape[0]
            P = np.full((C, 1), self.wneg.sum() + prior_prec)
            M = np.full((C, 1), mean0 * prior_prec)
            if len(self.neg_i):
                M += ((self.yneg - delta[:, self.neg_i]) * self.wneg).sum(axis=1, keepdims=True)
            if self.m:
                p = self._p_vals(state)
                P += (p * p * self.wmix).sum(axis=1, keepdims=True)
                M += (p * (self.ymix - delta[:, self.mix_i]) * self.wmix).sum(axis=1, keepdims=True)
        return M / P, np.sqrt(1.0 / P)

    def _tau_log_density(self, z: np.ndarray, state: dict) -> np.ndarray:
        count = self.n
        resid = state["delta_pos"] - state["d_pos"]
        S = np.sum(resid * resid, axis=1, keepdims=True)
        scale = self.tau_pos_scale
        t2 = np.exp(2.0 * z)
        return -count * z - S / (2.0 * t2) - t2 / (2.0 * scale * scale) + z

    def _tau_beta_log_density(self, z: np.ndarray, state: dict) -> np.ndarray:
        count = self.k
        resid = state["beta"] - state["mu_beta"]
        S = np.sum(resid * resid, axis=1, keepdims=True)
        scale = self.tau_beta_scale
        t2 = np.exp(2.0 * z)
        return -count * z - S / (2.0 * t2) - t2 / (2.0 * scale * scale) + z

    def _p_log_density(self, z: np.ndarray, state: dict) -> np.ndarray:
        log_p = -np.logaddexp(0.0, -z)
        log_1mp = -np.logaddexp(0.0, z)
        out = self.prop_a * log_p + self.prop_b * log_1mp
        if not self.prior_only:
            p = _sigmoid(z)
            delta = self._delta_vals(state)
            beta = self._beta_vals(state)
            resid = self.ymix - delta[:, self.mix_i] - p * beta[:, self.mix_b]
            out = out - 0.5 * resid * resid * self.wmix
        return out

    def blocks(self) -> list:
        blocks = []
        if not self.collapse_delta:
            blocks.append(GibbsBlock("delta_pos", self.n, self._delta_moments))
        if self.has_beta_block and not self.collapse_beta:
            blocks.append(GibbsBlock("beta", self.k, self._beta_moments))
        blocks.append(GibbsBlock("d_pos", 1, self._d_moments))
        if self.has_beta_block:
            blocks.append(GibbsBlock("mu_beta", 1, self._mu_moments))
        if self.tau_pos_fixed is None:
            blocks.append(
                MetropolisBlock("tau_pos", 1, self._tau_log_density, np.log, np.exp)
            )
        if self.has_beta_block and self.tau_beta_fixed is None:
            blocks.append(
                MetropolisBlock("tau_beta", 1, self._tau_beta_log_density, np.log, np.exp)
            )
        if self.m and self.p_fixed is None:
            blocks.append(MetropolisBlock("p", self.m, self._p_log_density, _logit, _sigmoid))
        if self.collapse_delta:
            blocks.append(
                DeterministicBlock(
                    "delta_pos",
                    self.n,
                    lambda state: np.broadcast_to(state["d_pos"], (state["d_pos"].shape[0], self.n)).copy(),
                )
            )
        if self.has_beta_block and self.collapse_beta:
            blocks.append(
                DeterministicBlock(
                    "beta",
                    self.k,
                    lambda state: np.broadcast_to(state["mu_beta"], (state["mu_beta"].shape[0], self.k)).copy(),
                )
            )
        return blocks

    # -- joint density -------------------------------------------------------

    def state_from_theta(self, theta: np.ndarray) -> dict:
        theta = np.asarray(theta, dtype=float).reshape(1, -1)
        expect = sum(size for _, size in self._layout)
        if theta.shape[1] != expect:
            raise ValueError(f"theta has {theta.shape[1]} entries, layout needs {expect}")
        state = {}
        off = 0
        for name, size in self._layout:
            state[name] = theta[:, off : off + size]
            off += size
        return state

    def log_joint_state(self, state: dict) -> np.ndarray:
        C = state["d_pos"].shape[0]
        out = np.zeros(C)
        d = state["d_pos"][:, 0]
        tau = state["tau_pos"][:, 0]
        mean0, sd0 = self.prior_d
        out += _normal_logpdf(d, mean0, sd0)
        if self.tau_pos_fixed is None:
            out += _halfnormal_logpdf(tau, self.tau_pos_scale)
        if self.has_beta_block:
            mu = state["mu_beta"][:, 0]
            taub = state["tau_beta"][:, 0]
            out += _normal_logpdf(mu, self.prior_mu[0], self.prior_mu[1])
            if self.tau_beta_fixed is None:
                out += _halfnormal_logpdf(taub, self.tau_beta_scale)
        if self.m:
            p = self._p_vals(state)
            if self.p_fixed is None:
                bad = np.any((p <= 0.0) | (p >= 1.0), axis=1)
                with np.errstate(divide="ignore", invalid="ignore"):
                    lp = (
                        (self.prop_a - 1.0) * np.log(p)
                        + (self.prop_b - 1.0) * np.log1p(-p)
                        - _betaln(self.prop_a, self.prop_b)
                    )
                out += np.where(bad, -np.inf, np.where(np.isfinite(lp), lp, -np.inf).sum(axis=1))

        delta = self._delta_vals(state)
        if not self.collapse_delta:
            bad_tau = tau <= 0.0
            safe_tau = np.where(bad_tau, 1.0, tau)
            hier = _normal_logpdf(delta, d[:, None], safe_tau[:, None]).sum(axis=1)
            out += np.where(bad_tau, -np.inf, hier)
        if self.has_beta_block:
            beta = self._beta_vals(state)
            if not self.collapse_beta:
                taub = state["tau_beta"][:, 0]
                bad = taub <= 0.0
                safe = np.where(bad, 1.0, taub)
                hier = _normal_logpdf(beta, state["mu_beta"], safe[:, None]).sum(axis=1)
                out += np.where(bad, -np.inf, hier)

        if not self.prior_only:
            if len(self.pos_i):
                out += _normal_logpdf_prec(self.ypos, delta[:, self.pos_i], self.wpos).sum(axis=1)
            if len(self.neg_i):
                beta = self._beta_vals(state)
                mean = delta[:, self.neg_i] + beta[:, self.neg_b]
                out += _normal_logpdf_prec(self.yneg, mean, self.wneg).sum(axis=1)
            if self.m:
                beta = self._beta_vals(state)
                p = self._p_vals(state)
                mean = delta[:, self.mix_i] + p * beta[:, self.mix_b]
                out += _normal_logpdf_prec(self.ymix, mean, self.wmix).sum(axis=1)
        return out

    def log_joint(self, theta: np.ndarray) -> float:
        """Joint log density (likelihood + free-parameter priors) at a flat vector."""
        return float(self.log_joint_state(self.state_from_theta(theta))[0])


def _normal_logpdf(x, mean, sd):
    z = (x - mean) / sd
    return -0.5 * _LOG_2PI - np.log(sd) - 0.5 * z * z


def _normal_logpdf_prec(x, mean, w):
    r = x - mean
    return -0.5 * _LOG_2PI + 0.5 * np.log(w) - 0.5 * w * r * r


def _halfnormal_logpdf(x, scale):
    out = math.log(2.0) - 0.5 * _LOG_2PI - math.log(scale) - 0.5 * (x / scale) ** 2
    return np.where(x >= 0.0, out, -np.inf)


def _betaln(a, b):
    lg = np.vectorize(math.lgamma)
    return lg(a) + lg(b) - lg(a + b)


def bind(
    kind: ModelKind | str,
    dataset: MetaDataset,
    hyperpriors: HyperPriors | None = None,
    fixed: dict | None = None,
    prior_only: bool = False,
) -> BoundModel:
    """Bind a model kind to a dataset, validating block compatibility."""
    if isinstance(kind, str):
        kind = ModelKind.from_string(kind)
    return BoundModel(
        kind=kind,
        dataset=dataset,
        hyperpriors=hyperpriors or HyperPriors(),
        fixed=dict(fixed or {}),
        prior_only=prior_only,
    )


def log_joint(model: BoundModel, theta: np.ndarray) -> float:
    return model.log_joint(theta)


def conjugate_updates(model: BoundModel) -> dict[str, GibbsBlock]:
    """The closed-form Gaussian conditional blocks, keyed by parameter name."""
    return {b.name: b for b in model.blocks() if isinstance(b, GibbsBlock)}


def fit(
    kind: ModelKind | str,
    dataset: MetaDataset,
    hyperpriors: HyperPriors | None = None,
    config: SamplerConfig | None = None,
    return_chains: bool = False,
):
    """Bind, sample and summarise. Returns the summary, or (summary, chains)."""
    model = bind(kind, dataset, hyperpriors)
    cfg = config or SamplerConfig()
    chains = run_sampler(model, cfg)
    summary = summarize(chains)
    if return_chains:
        return summary, chains
    return summary
