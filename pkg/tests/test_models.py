import math

import numpy as np
import pytest
from scipy import optimize, stats

from biomarker_meta.data_model import (
    EffectEstimate,
    MetaDataset,
    ProportionPrior,
    StudyRecord,
    ValidationError,
)
from biomarker_meta.mcmc import SamplerConfig, run_sampler, summarize
from biomarker_meta.models import ModelKind, bind, conjugate_updates, fit, log_joint
from biomarker_meta.priors import HyperPriors

from conftest import micro_config, tiny_dataset


def oracle_log_joint(model, theta):
    """Independent evaluator: walks the flat layout and sums scipy logpdfs.

    Reimplements the joint density from the model definition (per-study
    likelihood blocks plus priors) without touching the packaged math.
    """
    names = model.flat_names()
    vals = dict(zip(names, np.asarray(theta, dtype=float)))
    hp = model.hyperpriors
    d = vals["d_pos"]
    tau = vals["tau_pos"]
    total = stats.norm.logpdf(d, hp.d_pos_mean, hp.d_pos_sd)
    if model.tau_pos_fixed is None:
        total += stats.halfnorm.logpdf(tau, scale=hp.tau_pos_halfnormal_sd)
    has_beta = "mu_beta" in vals
    if has_beta:
        mu, taub = vals["mu_beta"], vals["tau_beta"]
        total += stats.norm.logpdf(mu, hp.mu_beta_mean, hp.mu_beta_sd)
        if model.tau_beta_fixed is None:
            total += stats.halfnorm.logpdf(taub, scale=hp.tau_beta_halfnormal_sd)

    id_to_record = {r.study_id: r for r in model.dataset.studies}
    for sid in model.study_ids:
        record = id_to_record[sid]
        delta = d if model.collapse_delta else vals[f"delta_pos[{sid}]"]
        if not model.collapse_delta:
            total += stats.norm.logpdf(delta, d, tau)
        beta = None
        if f"beta[{sid}]" in vals or (model.collapse_beta and sid in model.beta_ids):
            beta = mu if model.collapse_beta else vals[f"beta[{sid}]"]
            if not model.collapse_beta:
                total += stats.norm.logpdf(beta, mu, taub)
        if model.prior_only:
            pass
        else:
            if record.positive is not None:
                total += stats.norm.logpdf(record.positive.y, delta, record.positive.se)
            if record.negative is not None and model.kind.uses_negative and beta is not None:
                total += stats.norm.logpdf(record.negative.y, delta + beta, record.negative.se)
        if record.mixed is not None and model.kind.uses_mixed:
            p = vals[f"p[{sid}]"]
            if model.p_fixed is None:
                prior = record.proportion_prior
                total += stats.beta.logpdf(p, prior.alpha, prior.beta)
            if not model.prior_only:
                total += stats.norm.logpdf(record.mixed.y, delta + p * beta, record.mixed.se)
    return float(total)


def random_theta(model, rng):
    theta = []
    for name in model.flat_names():
        if name.startswith("tau"):
            theta.append(rng.uniform(0.05, 0.8))
        elif name.startswith("p["):
            theta.append(rng.uniform(0.05, 0.95))
        else:
            theta.append(rng.normal(0.0, 0.5))
    return np.array(theta)


# ---------------------------------------------------------------- layout


def test_m1_layout_has_no_difference_parameters(os_main):
    model = bind(ModelKind.M1, os_main)
    names = model.flat_names()
    assert names[:2] == ["d_pos", "tau_pos"]
    assert sum(1 for n in names if n.startswith("delta_pos[")) == 8
    assert not any(n.startswith(("mu_beta", "tau_beta", "beta[", "p[")) for n in names)


def test_m2_layout(os_main):
    model = bind(ModelKind.M2, os_main)
    names = model.flat_names()
    assert "mu_beta" in names and "tau_beta" in names
    assert sum(1 for n in names if n.startswith("delta_pos[")) == 8
    assert [n for n in names if n.startswith("beta[")] == [
        "beta[Douillard 2014]",
        "beta[Peeters 2010]",
        "beta[Peeters 2014]",
    ]
    assert not any(n.startswith("p[") for n in names)


def test_m3_layout_covers_every_symbol(os_main):
    model = bind(ModelKind.M3, os_main)
    names = model.flat_names()
    deltas = [n for n in names if n.startswith("delta_pos[")]
    betas = [n for n in names if n.startswith("beta[")]
    ps = [n for n in names if n.startswith("p[")]
    assert len(deltas) == 13  # every included study owns a true positive effect
    assert len(betas) == 3 + 5  # both-reporting plus mixed studies
    assert len(ps) == 5  # exactly the mixed studies
    mixed_ids = {s.study_id for s in os_main.studies if s.block == "mixed"}
    assert {n[2:-1] for n in ps} == mixed_ids
    # layout is deterministic given (kind, dataset)
    assert names == bind(ModelKind.M3, os_main).flat_names()


def test_m2neg_includes_negative_only_block():
    ds = MetaDataset.from_studies(
        [
            StudyRecord("pos", positive=EffectEstimate(-0.2, 0.1)),
            StudyRecord(
                "both",
                positive=EffectEstimate(-0.1, 0.1),
                negative=EffectEstimate(0.1, 0.1),
            ),
            StudyRecord("negonly", negative=EffectEstimate(-0.05, 0.1)),
        ]
    )
    m2 = bind(ModelKind.M2, ds)
    m2neg = bind(ModelKind.M2NEG, ds)
    assert "delta_pos[negonly]" not in m2.flat_names()
    assert "delta_pos[negonly]" in m2neg.flat_names()
    assert "beta[negonly]" in m2neg.flat_names()


def test_incompatible_dataset_errors_list_blocks():
    pos_only = MetaDataset.from_studies([StudyRecord("a", positive=EffectEstimate(-0.1, 0.1))])
    with pytest.raises(ValidationError, match="requires at least one study reporting both"):
        bind(ModelKind.M2, pos_only)
    with pytest.raises(ValidationError, match="requires at least one mixed"):
        bind(ModelKind.M3, pos_only)
    neg_only = MetaDataset.from_studies([StudyRecord("a", negative=EffectEstimate(-0.1, 0.1))])
    with pytest.raises(ValidationError, match="biomarker-positive estimate"):
        bind(ModelKind.M1, neg_only)


def test_modelkind_from_string():
    assert ModelKind.from_string("M3") is ModelKind.M3
    assert ModelKind.from_string(" m2neg ") is ModelKind.M2NEG
    with pytest.raises(ValidationError, match="unknown model"):
        ModelKind.from_string("m4")


# ---------------------------------------------------------- joint density


@pytest.mark.parametrize("kind", [ModelKind.M1, ModelKind.M2, ModelKind.M3])
def test_log_joint_matches_independent_oracle(kind, os_main):
    model = bind(kind, os_main)
    rng = np.random.Generator(np.random.Philox(17))
    for _ in range(8):
        theta = random_theta(model, rng)
        assert log_joint(model, theta) == pytest.approx(oracle_log_joint(model, theta), abs=1e-8)


def test_log_joint_single_study_hand_expression():
    y, se, t = -0.2, 0.1, 0.3
    ds = MetaDataset.from_studies([StudyRecord("one", positive=EffectEstimate(y, se))])
    model = bind(ModelKind.M1, ds)
    theta = np.array([y, t, y])  # d = delta = y
    expected = (
        stats.norm.logpdf(y, y, se)
        + stats.norm.logpdf(y, y, t)
        + stats.norm.logpdf(y, 0, 100)
        + stats.halfnorm.logpdf(t, scale=10)
    )
    assert log_joint(model, theta) == pytest.approx(expected, abs=1e-10)


def test_log_joint_out_of_support_is_minus_inf(os_main):
    model = bind(ModelKind.M3, os_main)
    rng = np.random.Generator(np.random.Philox(18))
    theta = random_theta(model, rng)
    names = model.flat_names()
    t = theta.copy()
    t[names.index("tau_pos")] = -0.1
    assert log_joint(model, t) == -math.inf
    t = theta.copy()
    t[names.index(next(n for n in names if n.startswith("p[")))] = 1.2
    assert log_joint(model, t) == -math.inf


def test_log_joint_additive_over_studies():
    prior = ProportionPrior(30.0, 40.0)
    singles = [
        StudyRecord(f"mix{i}", mixed=EffectEstimate(y, 0.1), proportion_prior=prior)
        for i, y in enumerate((-0.2, 0.0, 0.15))
    ]
    full_model = bind(ModelKind.M3, MetaDataset.from_studies(singles))
    rng = np.random.Generator(np.random.Philox(19))
    theta = random_theta(full_model, rng)
    names = full_model.flat_names()
    vals = dict(zip(names, theta))

    hyper = (
        stats.norm.logpdf(vals["d_pos"], 0, 100)
        + stats.halfnorm.logpdf(vals["tau_pos"], scale=10)
        + stats.norm.logpdf(vals["mu_beta"], 0, 100)
        + stats.halfnorm.logpdf(vals["tau_beta"], scale=10)
    )
    total_single = 0.0
    for rec in singles:
        m = bind(ModelKind.M3, MetaDataset.from_studies([rec]))
        sid = rec.study_id
        th = np.array(
            [
                vals["d_pos"],
                vals["tau_pos"],
                vals["mu_beta"],
                vals["tau_beta"],
                vals[f"delta_pos[{sid}]"],
                vals[f"beta[{sid}]"],
                vals[f"p[{sid}]"],
            ]
        )
        total_single += log_joint(m, th)
    expected = total_single - (len(singles) - 1) * hyper
    assert log_joint(full_model, theta) == pytest.approx(expected, abs=1e-9)


# --------------------------------------------------- reduction identities


def test_m3_with_p_zero_reduces_to_recoded_m2():
    ds = tiny_dataset()
    m3 = bind(ModelKind.M3, ds, fixed={"p": 0.0})
    recoded = MetaDataset.from_studies(
        [
            s if s.mixed is None else StudyRecord(s.study_id, positive=s.mixed)
            for s in ds.studies
        ]
    )
    m2 = bind(ModelKind.M2, recoded)
    rng = np.random.Generator(np.random.Philox(20))
    theta3 = random_theta(m3, rng)
    names3 = m3.flat_names()
    vals = dict(zip(names3, theta3))
    vals["p[delta]"] = 0.0
    theta3 = np.array([vals[n] for n in names3])
    theta2 = np.array([vals[n] for n in m2.flat_names()])
    extra_beta_prior = stats.norm.logpdf(vals["beta[delta]"], vals["mu_beta"], vals["tau_beta"])
    assert log_joint(m3, theta3) == pytest.approx(
        log_joint(m2, theta2) + extra_beta_prior, abs=1e-9
    )


def test_m3_with_p_one_reduces_to_recoded_m2neg():
    ds = tiny_dataset()
    m3 = bind(ModelKind.M3, ds, fixed={"p": 1.0})
    recoded = MetaDataset.from_studies(
        [
            s if s.mixed is None else StudyRecord(s.study_id, negative=s.mixed)
            for s in ds.studies
        ]
    )
    m2neg = bind(ModelKind.M2NEG, recoded)
    rng = np.random.Generator(np.random.Philox(21))
    theta3 = random_theta(m3, rng)
    names3 = m3.flat_names()
    vals = dict(zip(names3, theta3))
    vals["p[delta]"] = 1.0
    theta3 = np.array([vals[n] for n in names3])
    theta_neg = np.array([vals[n] for n in m2neg.flat_names()])
    assert log_joint(m3, theta3) == pytest.approx(log_joint(m2neg, theta_neg), abs=1e-9)


def test_m2neg_equals_m2_without_neg_only_block(os_main):
    m2 = bind(ModelKind.M2, os_main)
    m2neg = bind(ModelKind.M2NEG, os_main)
    assert m2.flat_names() == m2neg.flat_names()
    rng = np.random.Generator(np.random.Philox(22))
    theta = random_theta(m2, rng)
    assert log_joint(m2, theta) == pytest.approx(log_joint(m2neg, theta), abs=1e-12)


# ------------------------------------------------- conjugate conditionals


def _state_for(model, theta):
    return model.state_from_theta(theta)


def test_delta_conditional_matches_curvature_and_argmax(os_main):
    model = bind(ModelKind.M1, os_main)
    rng = np.random.Generator(np.random.Philox(23))
    theta = random_theta(model, rng)
    names = model.flat_names()
    blocks = conjugate_updates(model)
    mean, sd = blocks["delta_pos"].moments(_state_for(model, theta))

    j = names.index("delta_pos[Ciardiello 2016]")
    i = model.study_ids.index("Ciardiello 2016")

    def slice_fn(x):
        t = theta.copy()
        t[j] = x
        return log_joint(model, t)

    # curvature -> precision
    h = 1e-4
    x0 = theta[j]
    second = (slice_fn(x0 + h) - 2 * slice_fn(x0) + slice_fn(x0 - h)) / (h * h)
    assert -second == pytest.approx(1.0 / sd[0, i] ** 2, rel=1e-5)
    # argmax -> conditional mean
    best = optimize.minimize_scalar(lambda x: -slice_fn(x), bounds=(-5, 5), method="bounded")
    assert best.x == pytest.approx(mean[0, i], abs=1e-6)


def test_beta_conditional_mixed_only_precision():
    prior = ProportionPrior(28.0, 38.67)
    se_mix = 0.08
    ds = MetaDataset.from_studies(
        [
            StudyRecord("b", positive=EffectEstimate(-0.1, 0.1), negative=EffectEstimate(0.1, 0.1)),
            StudyRecord("m", mixed=EffectEstimate(-0.1, se_mix), proportion_prior=prior),
        ]
    )
    model = bind(ModelKind.M3, ds)
    rng = np.random.Generator(np.random.Philox(24))
    theta = random_theta(model, rng)
    state = _state_for(model, theta)
    names = model.flat_names()
    p = theta[names.index("p[m]")]
    taub = theta[names.index("tau_beta")]
    _, sd = conjugate_updates(model)["beta"].moments(state)
    jm = model.beta_ids.index("m")
    expected_precision = p * p / se_mix**2 + 1.0 / taub**2
    assert 1.0 / sd[0, jm] ** 2 == pytest.approx(expected_precision, rel=1e-12)

    # cross-check against numerical curvature of the joint
    j = names.index("beta[m]")

    def slice_fn(x):
        t = theta.copy()
        t[j] = x
        return log_joint(model, t)

    h = 1e-4
    second = (slice_fn(theta[j] + h) - 2 * slice_fn(theta[j]) + slice_fn(theta[j] - h)) / (h * h)
    assert -second == pytest.approx(expected_precision, rel=1e-5)


def test_d_conditional_with_no_observations_reverts_to_prior():
    ds = MetaDataset.from_studies([StudyRecord("a", positive=EffectEstimate(-0.2, 0.1))])
    model = bind(ModelKind.M1, ds, fixed={"tau_pos": 0.0}, prior_only=True)
    state = model.initial_state(1)
    mean, sd = conjugate_updates(model)["d_pos"].moments(state)
    assert mean[0, 0] == pytest.approx(0.0)
    assert sd[0, 0] == pytest.approx(100.0)


def test_fixed_tau_zero_single_study_matches_conjugate_posterior():
    y, se = -0.2, 0.1
    ds = MetaDataset.from_studies([StudyRecord("one", positive=EffectEstimate(y, se))])
    model = bind(ModelKind.M1, ds, fixed={"tau_pos": 0.0})
    cfg = SamplerConfig(n_chains=4, burn_in=500, samples=8000, seed=25)
    summary = summarize(run_sampler(model, cfg))
    post_prec = 1.0 / se**2 + 1.0 / 100.0**2
    post_mean = (y / se**2) / post_prec
    post_sd = math.sqrt(1.0 / post_prec)
    s = summary["d_pos"]
    assert abs(s.mean - post_mean) <= 3 * s.mcse
    assert s.sd == pytest.approx(post_sd, rel=0.05)
    # collapsed random effects mirror the pooled mean draw for draw
    assert summary["delta_pos[one]"].mean == s.mean
    assert summary["tau_pos"].sd == 0.0


def gaussian_posterior_oracle(model, p_fixed):
    """Exact linear-Gaussian posterior for fixed variance components."""
    ids = model.study_ids
    n, k = model.n, model.k
    has_beta = model.has_beta_block
    dim = 1 + (1 if has_beta else 0) + n + k
    idx_d = 0
    idx_mu = 1 if has_beta else None
    off_delta = 1 + (1 if has_beta else 0)
    off_beta = off_delta + n
    Q = np.zeros((dim, dim))
    b = np.zeros(dim)
    hp = model.hyperpriors
    Q[idx_d, idx_d] += 1.0 / hp.d_pos_sd**2
    b[idx_d] += hp.d_pos_mean / hp.d_pos_sd**2
    if has_beta:
        Q[idx_mu, idx_mu] += 1.0 / hp.mu_beta_sd**2
        b[idx_mu] += hp.mu_beta_mean / hp.mu_beta_sd**2
    tau, taub = model.tau_pos_fixed, model.tau_beta_fixed
    for i in range(n):
        di = off_delta + i
        Q[di, di] += 1.0 / tau**2
        Q[idx_d, idx_d] += 1.0 / tau**2
        Q[di, idx_d] -= 1.0 / tau**2
        Q[idx_d, di] -= 1.0 / tau**2
    for j in range(k):
        bj = off_beta + j
        Q[bj, bj] += 1.0 / taub**2
        Q[idx_mu, idx_mu] += 1.0 / taub**2
        Q[bj, idx_mu] -= 1.0 / taub**2
        Q[idx_mu, bj] -= 1.0 / taub**2
    record = {r.study_id: r for r in model.dataset.studies}
    bmap = {sid: off_beta + j for j, sid in enumerate(model.beta_ids)}
    for i, sid in enumerate(ids):
        r = record[sid]
        di = off_delta + i
        if r.positive is not None:
            w = 1.0 / r.positive.variance
            Q[di, di] += w
            b[di] += r.positive.y * w
        if r.negative is not None and has_beta:
            w = 1.0 / r.negative.variance
            bj = bmap[sid]
            Q[di, di] += w
            Q[bj, bj] += w
            Q[di, bj] += w
            Q[bj, di] += w
            b[di] += r.negative.y * w
            b[bj] += r.negative.y * w
        if r.mixed is not None and model.kind.uses_mixed:
            w = 1.0 / r.mixed.variance
            p = p_fixed[sid]
            bj = bmap[sid]
            Q[di, di] += w
            Q[bj, bj] += p * p * w
            Q[di, bj] += p * w
            Q[bj, di] += p * w
            b[di] += r.mixed.y * w
            b[bj] += p * r.mixed.y * w
    cov = np.linalg.inv(Q)
    mean = cov @ b
    names = (
        ["d_pos"]
        + (["mu_beta"] if has_beta else [])
        + [f"delta_pos[{sid}]" for sid in ids]
        + [f"beta[{sid}]" for sid in model.beta_ids]
    )
    return dict(zip(names, mean)), dict(zip(names, np.sqrt(np.diag(cov))))


def test_sampler_matches_gaussian_oracle_under_fixed_variances():
    ds = tiny_dataset()
    p_fixed = {"delta": 0.4}
    model = bind(
        ModelKind.M3,
        ds,
        fixed={"tau_pos": 0.15, "tau_beta": 0.2, "p": p_fixed},
    )
    mean_exact, sd_exact = gaussian_posterior_oracle(model, p_fixed)
    cfg = SamplerConfig(n_chains=4, burn_in=1000, samples=15_000, seed=26)
    summary = summarize(run_sampler(model, cfg))
    for name, m_exact in mean_exact.items():
        s = summary[name]
        assert abs(s.mean - m_exact) <= 3 * s.mcse, name
        sd_mcse = s.sd / math.sqrt(2.0 * s.ess)
        assert abs(s.sd - sd_exact[name]) <= 4 * sd_mcse, name


def test_prior_recovery_all_parameters():
    model = bind(ModelKind.M3, tiny_dataset(), prior_only=True)
    cfg = SamplerConfig(n_chains=4, burn_in=3000, samples=25_000, seed=27)
    summary = summarize(run_sampler(model, cfg))
    hn_mean = 10.0 * math.sqrt(2.0 / math.pi)
    hn_sd = 10.0 * math.sqrt(1.0 - 2.0 / math.pi)
    for name in ("d_pos", "mu_beta"):
        s = summary[name]
        assert abs(s.mean) <= 3 * s.mcse
        assert s.sd == pytest.approx(100.0, rel=0.1)
    for name in ("tau_pos", "tau_beta"):
        s = summary[name]
        assert abs(s.mean - hn_mean) <= 4 * s.mcse
        assert s.sd == pytest.approx(hn_sd, rel=0.15)
    prior = ProportionPrior(28.0, 38.67)
    s = summary["p[delta]"]
    assert abs(s.mean - prior.mean) <= 4 * s.mcse
    assert s.sd == pytest.approx(math.sqrt(prior.variance), rel=0.15)
    # hierarchical marginals: sd = sqrt(100^2 + E[tau^2]) with E[tau^2] = 100
    for name in ("delta_pos[alpha]", "beta[charlie]"):
        s = summary[name]
        assert abs(s.mean) <= 4 * s.mcse
        assert s.sd == pytest.approx(math.sqrt(100.0**2 + 100.0), rel=0.12)


# ----------------------------------------------------------- sampling fits


@pytest.fixture(scope="module")
def m3_os_desk(os_main):
    model = bind(ModelKind.M3, os_main)
    chains = run_sampler(model, SamplerConfig(n_chains=4, burn_in=2500, samples=8000, seed=28))
    return model, chains


def test_supports_respected(m3_os_desk):
    _, chains = m3_os_desk
    assert np.all(chains.draws_for("tau_pos") >= 0.0)
    assert np.all(chains.draws_for("tau_beta") >= 0.0)
    for name in chains.param_names:
        if name.startswith("p["):
            draws = chains.draws_for(name)
            assert np.all((draws > 0.0) & (draws < 1.0))
    assert np.all(np.isfinite(chains.draws))


def test_acceptance_rates_on_bundled_data(m3_os_desk):
    _, chains = m3_os_desk
    assert chains.acceptance_rates  # tau_pos, tau_beta, p[...]
    for name, rates in chains.acceptance_rates.items():
        assert np.all(rates >= 0.2) and np.all(rates <= 0.6), (name, rates)


def test_fit_returns_summary_with_variance_rows(os_main):
    summary = fit(ModelKind.M1, os_main, config=micro_config(seed=29))
    assert "tau_pos_sq" in summary.order
    assert summary["tau_pos_sq"].q2_5 >= 0.0
    d = summary["d_pos"]
    assert d.q2_5 <= d.median <= d.q97_5


def test_fit_accepts_custom_hyperpriors(os_main):
    tight = HyperPriors(d_pos_sd=0.01)
    summary = fit(ModelKind.M1, os_main, hyperpriors=tight, config=micro_config(seed=30))
    assert abs(summary["d_pos"].mean) < 0.05  # prior dominates
