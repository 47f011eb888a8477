"""Finite-difference verification of every gradient path.

Two layers:

* primitive checks: each reverse-mode op gets its own tiny graph and a
  central-difference sweep, reported under the op's name so a broken
  backward rule is identified directly;
* loss checks: every objective crossed with every valid estimator cell
  (formula x weighting x MC scheme x ratio mode) on a tiny model, using
  the detached-value pin so stop-gradient semantics are differenced
  correctly (detached coefficients are held at their base values during
  the sweep, which is exactly what the analytic gradient assumes).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import autodiff as ad
from . import likelihood as lk
from . import objectives as ob
from .flow import AnalyticGaussianField, build_learned_field
from .rngs import stream
from .samplers import SamplerConfig, sample_group

DEFAULT_THRESHOLD = 1e-3


@dataclass
class GradCheckReport:
    threshold: float
    primitive: dict = dataclass_field(default_factory=dict)  # op name -> max rel err
    losses: dict = dataclass_field(default_factory=dict)  # cell name -> max rel err

    @property
    def failures(self) -> list[str]:
        out = [f"op:{k}" for k, v in sorted(self.primitive.items()) if v > self.threshold]
        out += [f"loss:{k}" for k, v in sorted(self.losses.items()) if v > self.threshold]
        return out

    @property
    def passed(self) -> bool:
        return not self.failures

    def format_lines(self) -> list[str]:
        lines = []
        for name, err in sorted(self.primitive.items()):
            mark = "ok  " if err <= self.threshold else "FAIL"
            lines.append(f"[{mark}] op {name:<14s} max rel err {err:.3e}")
        for name, err in sorted(self.losses.items()):
            mark = "ok  " if err <= self.threshold else "FAIL"
            lines.append(f"[{mark}] loss {name:<58s} max rel err {err:.3e}")
        lines.append(f"gradcheck: {'PASS' if self.passed else 'FAIL'} "
                     f"({len(self.primitive) + len(self.losses)} checks, "
                     f"{len(self.failures)} failures, threshold {self.threshold:g})")
        return lines


def _fd_against_backward(build, params: list[ad.Tensor]) -> float:
    """Max relative FD error over the given parameters of build()'s loss."""
    pin = ad.DetachedPin()
    with ad.record_detached(pin):
        tape, loss = build()
    grads = ad.backward(tape, loss)

    def f_pinned() -> float:
        with ad.replay_detached(pin):
            return build()[1].item()

    worst = 0.0
    for p in params:
        analytic = grads.get(p, np.zeros_like(p.values))
        numeric = ad.finite_difference(f_pinned, p, step=1e-5)
        worst = max(worst, ad.max_relative_error(analytic, numeric))
    return worst


def check_primitive_ops(seed: int = 0) -> dict:
    """One named finite-difference check per reverse-mode op."""
    rng = stream(seed, "gradcheck-ops")

    def tensors(*shapes):
        return [ad.parameter(0.5 + 0.5 * rng.standard_normal(s), name=f"p{i}")
                for i, s in enumerate(shapes)]

    results: dict[str, float] = {}

    def run(name, params, make_out):
        w = ad.as_tensor(rng.standard_normal(()))  # scalar weight, shape-safe

        def build():
            with ad.Tape() as tape:
                out = make_out(*params)
                loss = ad.mul(ad.sum_all(out), w)
            return tape, loss

        results[name] = _fd_against_backward(build, params)

    a, b = tensors((3, 2), (3, 2))
    run("add", [a, b], lambda x, y: ad.add(x, y))
    run("sub", [a, b], lambda x, y: ad.sub(x, y))
    run("mul", [a, b], lambda x, y: ad.mul(x, y))
    run("minimum", [a, b], lambda x, y: ad.minimum(x, y))
    (c,) = tensors((3, 2))
    run("add-scalar", [c], lambda x: ad.add(x, 1.7))
    run("mul-scalar", [c], lambda x: ad.mul(x, -2.3))
    run("neg", [c], lambda x: ad.neg(x))
    run("tanh", [c], lambda x: ad.tanh(x))
    run("clip", [c], lambda x: ad.clip(x, -10.0, 10.0))  # interior: grad passes
    run("reshape", [c], lambda x: ad.reshape(x, (2, 3)))
    run("sum-axis0", [c], lambda x: ad.sum_axis(x, axis=0))
    run("sum-axis1", [c], lambda x: ad.sum_axis(x, axis=1))
    run("mean-all", [c], lambda x: ad.mul(ad.mean_all(x), 3.0))
    (pos,) = tensors((3, 2))
    pos.values = np.abs(pos.values) + 0.5
    run("exp", [pos], lambda x: ad.exp(ad.mul(x, 0.3)))
    run("log", [pos], lambda x: ad.log(x))
    m1, m2 = tensors((3, 4), (4, 2))
    run("matmul", [m1, m2], lambda x, y: ad.matmul(x, y))
    x2, bias = tensors((3, 2), (2,))
    run("add-bias", [x2, bias], lambda x, y: ad.add(x, y))
    (emb,) = tensors((5, 3))
    idx = np.array([0, 2, 2, 4])
    run("take-rows", [emb], lambda e: ad.take_rows(e, idx))
    h1, h2 = tensors((3, 2), (3, 3))
    run("hstack", [h1, h2], lambda x, y: ad.hstack([x, y]))
    return results


def _estimator_cells() -> list[lk.EstimatorConfig]:
    cells = []
    for weighting in lk.WEIGHTINGS:
        for mc in lk.MC_SCHEMES:
            for ratio in (lk.RATIO_EXP_OF_SUM, lk.RATIO_SINGLE_SIMPLE,
                          lk.RATIO_SINGLE_ADAPTIVE):
                cells.append(lk.EstimatorConfig(formula=lk.FORMULA_ELBO, weighting=weighting,
                                                mc_scheme=mc, ratio_mode=ratio))
    for ratio in (lk.RATIO_EXP_OF_SUM, lk.RATIO_SUM_OF_EXP):
        cells.append(lk.EstimatorConfig(formula=lk.FORMULA_TRAJECTORY, weighting=lk.WEIGHT_ADAPTIVE,
                                        mc_scheme=lk.MC_SINGLE, ratio_mode=ratio))
    return cells


def check_losses(seed: int = 0) -> dict:
    """FD-check each objective against every valid estimator cell."""
    base = AnalyticGaussianField(means=np.zeros((1, 1)), variances=np.ones((1, 1)))
    fld = build_learned_field(data_dim=1, n_conditions=1, hidden=[4], embed_dim=2,
                              rng=stream(seed, "gradcheck-net"), base=base,
                              zero_residual=False)
    for name, p in fld.named_parameters():
        p.values = p.values + 0.05 * stream(seed, "gradcheck-jitter", name).standard_normal(
            p.values.shape)
    old = fld.copy(trainable=False)
    params = [p for _, p in fld.named_parameters()]

    g = 4
    sde_cfg = SamplerConfig(mode="sde-euler", n_steps=5, noise_level=0.7,
                            record_trajectory=True)
    rollout = sample_group(old, sde_cfg, 0, [stream(seed, "gradcheck-roll", i)
                                             for i in range(g)])
    rewards = stream(seed, "gradcheck-rewards").standard_normal(g)

    results: dict[str, float] = {}
    for est in _estimator_cells():
        subjects = rollout.trajectories if est.formula == "trajectory" else list(rollout.terminal)
        ws = lk.prepare_workspace(subjects, np.zeros(g, dtype=np.intp), old, base, est,
                                  n_grid=5,
                                  member_rngs=[stream(seed, "gradcheck-est", i)
                                               for i in range(g)])
        for kind in ob.OBJECTIVE_KINDS:
            ocfg = ob.ObjectiveConfig(kind=kind, beta=0.7, eta=0.4)
            group = ob.RolloutGroup(condition=0, samples=rollout.terminal, rewards=rewards)
            ob.compute_advantages(group, ocfg)

            def build():
                with ad.Tape() as tape:
                    terms = lk.policy_terms(fld, ws)
                    loss = ob.objective_loss(group, terms, ocfg)
                return tape, loss

            cell = f"{kind}/{est.formula}/{est.weighting}/{est.mc_scheme}/{est.ratio_mode}"
            results[cell] = _fd_against_backward(build, params)
    return results


def run_gradcheck(seed: int = 0, threshold: float = DEFAULT_THRESHOLD) -> GradCheckReport:
    report = GradCheckReport(threshold=threshold)
    report.primitive = check_primitive_ops(seed)
    report.losses = check_losses(seed)
    return report
