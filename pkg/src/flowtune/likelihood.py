"""Policy log-likelihood estimators, policy ratios, and the KL estimate.

Two likelihood formulas exist, with the estimator axes layered on top:

* ``trajectory``: the exact discrete density of the stochastic reverse
  chain, a sum of Gaussian transition log-pdfs. Inside the estimator the
  diffusion coefficient is pinned to its a = 1 value sqrt(2t/(1-t)) so the
  additive constant is parameter-independent. Requires a stochastic
  trajectory; deterministic ones have degenerate transitions and are
  rejected.
* ``elbo``: a denoising bound, -E_{t,eps}[ w(t) ||v(x_t,t) - (eps-x0)||^2 ]
  up to an additive constant. Weightings: ``path-kl`` w = (1-t)/t (the
  bound is tight for the true field), ``simple`` w = 1, ``adaptive``
  w = t*d/stop_grad(||r||_1) (self-normalizing). Monte Carlo schemes:
  ``single-timestep`` (one grid time, one noise draw) and ``all-timestep``
  (average over the whole grid, fresh noise per grid point).

Policy ratios come in four modes; all satisfy ratio(theta, theta) = 1
exactly, and all pass their log through a +-bound guard that clips and
counts an overflow warning instead of silently saturating downstream.

Everything is implemented once, batched over samples; the per-sample
functions are thin wrappers. Old-policy and reference evaluations are
cached as plain arrays in a workspace so gradient steps only re-run the
new-policy side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation
from .flow import NoiseSchedule, velocity_tensor
from .samplers import Trajectory, require_sde_trajectory

FORMULA_TRAJECTORY = "trajectory"
FORMULA_ELBO = "elbo"
FORMULAS = (FORMULA_TRAJECTORY, FORMULA_ELBO)

WEIGHT_PATH_KL = "path-kl"
WEIGHT_SIMPLE = "simple"
WEIGHT_ADAPTIVE = "adaptive"
WEIGHTINGS = (WEIGHT_PATH_KL, WEIGHT_SIMPLE, WEIGHT_ADAPTIVE)

MC_SINGLE = "single-timestep"
MC_ALL = "all-timestep"
MC_SCHEMES = (MC_SINGLE, MC_ALL)

RATIO_EXP_OF_SUM = "exp-of-sum"
RATIO_SUM_OF_EXP = "sum-of-exp"
RATIO_SINGLE_SIMPLE = "single-sample-simple"
RATIO_SINGLE_ADAPTIVE = "single-sample-adaptive"
RATIO_MODES = (RATIO_EXP_OF_SUM, RATIO_SUM_OF_EXP, RATIO_SINGLE_SIMPLE, RATIO_SINGLE_ADAPTIVE)


@dataclass
class EstimatorConfig:
    formula: str = FORMULA_ELBO
    weighting: str = WEIGHT_ADAPTIVE
    mc_scheme: str = MC_SINGLE
    ratio_mode: str = RATIO_SINGLE_ADAPTIVE
    t_min: float = 1e-3  # ELBO time floor: grid times below this are excluded
    log_ratio_bound: float = 20.0
    kl_mc_count: int = 1

    def validate(self) -> None:
        if self.formula not in FORMULAS:
            raise ContractViolation(f"unknown likelihood formula {self.formula!r}")
        if self.weighting not in WEIGHTINGS:
            raise ContractViolation(f"unknown weighting {self.weighting!r}")
        if self.mc_scheme not in MC_SCHEMES:
            raise ContractViolation(f"unknown mc scheme {self.mc_scheme!r}")
        if self.ratio_mode not in RATIO_MODES:
            raise ContractViolation(f"unknown ratio mode {self.ratio_mode!r}")
        if self.ratio_mode == RATIO_SUM_OF_EXP and self.formula != FORMULA_TRAJECTORY:
            raise ContractViolation("sum-of-exp ratios are defined per transition; they need formula='trajectory'")
        if self.formula == FORMULA_TRAJECTORY and self.ratio_mode in (RATIO_SINGLE_SIMPLE, RATIO_SINGLE_ADAPTIVE):
            raise ContractViolation("single-sample ratios are denoising-bound terms; they need formula='elbo'")
        if not (0.0 < self.t_min < 1.0):
            raise ContractViolation(f"t_min must lie in (0, 1), got {self.t_min}")
        if self.log_ratio_bound <= 0.0:
            raise ContractViolation("log_ratio_bound must be positive")
        if self.kl_mc_count < 1:
            raise ContractViolation("kl_mc_count must be at least 1")


@dataclass
class RatioDiagnostics:
    """Counts numerical-guard events; distinct from algorithmic clipping."""

    warnings: int = 0
    max_abs_log_ratio: float = 0.0

    def observe(self, log_ratios: np.ndarray, bound: float) -> None:
        biggest = float(np.max(np.abs(log_ratios))) if log_ratios.size else 0.0
        self.max_abs_log_ratio = max(self.max_abs_log_ratio, biggest)
        self.warnings += int(np.sum(np.abs(log_ratios) > bound))


@dataclass
class ElboDraws:
    """Shared (t, eps) draws so both policies see identical randomness."""

    ts: np.ndarray  # [M]
    eps: np.ndarray  # [M, d]


def elbo_time_grid(n_grid: int, t_min: float, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Sampler grid restricted to t >= t_min; must stay non-empty."""
    schedule = schedule or NoiseSchedule()
    grid = schedule.grid(n_grid)
    kept = grid[grid >= t_min]
    if kept.size == 0:
        raise ContractViolation(f"time floor {t_min} excludes the whole grid of {n_grid} steps")
    return kept


def draw_elbo_times(cfg: EstimatorConfig, n_grid: int, data_dim: int,
                    rng: np.random.Generator, schedule: NoiseSchedule | None = None) -> ElboDraws:
    grid = elbo_time_grid(n_grid, cfg.t_min, schedule)
    if cfg.mc_scheme == MC_SINGLE:
        ts = np.array([grid[rng.integers(grid.size)]])
    else:
        ts = grid.copy()
    eps = rng.standard_normal((ts.size, data_dim))
    return ElboDraws(ts=ts, eps=eps)


# ---------------------------------------------------------------------------
# batched cores


def _weighted_terms(field, x0s: np.ndarray, ts: np.ndarray, eps: np.ndarray,
                    conds, weighting: str) -> Tensor:
    """Weighted squared-residual terms for rows (x0_i, t_i, eps_i) -> [B]."""
    x0s = np.atleast_2d(x0s)
    eps = np.atleast_2d(eps)
    ts = np.asarray(ts, dtype=np.float64)
    d = x0s.shape[1]
    x_t = (1.0 - ts)[:, None] * x0s + ts[:, None] * eps
    target = eps - x0s
    v = velocity_tensor(field, x_t, ts, conds)
    r = ad.sub(v, ad.as_tensor(target))
    sq = ad.sum_axis(ad.mul(r, r), axis=1)
    if weighting == WEIGHT_SIMPLE:
        return sq
    if weighting == WEIGHT_PATH_KL:
        return ad.mul(sq, ad.as_tensor((1.0 - ts) / ts))
    if weighting == WEIGHT_ADAPTIVE:
        # stop-gradient L1 norm in the denominator; zero residual -> zero term
        l1 = ad.pinned_value(np.abs(r.values).sum(axis=1))
        scale = ts * d / np.where(l1 > 0.0, l1, 1.0)
        return ad.mul(sq, ad.as_tensor(scale))
    raise ContractViolation(f"unknown weighting {weighting!r}")


def _elbo_loglik_batch(field, x0s: np.ndarray, conds, draws_list: list[ElboDraws],
                       weighting: str) -> Tensor:
    """-mean_j w(t_j)||r_j||^2 per sample, sharing one field evaluation."""
    x0s = np.atleast_2d(x0s)
    b, d = x0s.shape
    m = draws_list[0].ts.size
    if any(dr.ts.size != m for dr in draws_list):
        raise ContractViolation("all samples in a batch must carry equally many draws")
    rows_x0 = np.repeat(x0s, m, axis=0)
    rows_t = np.concatenate([dr.ts for dr in draws_list])
    rows_eps = np.concatenate([dr.eps for dr in draws_list], axis=0)
    rows_cond = np.repeat(_normalize_conds(conds, b), m)
    terms = _weighted_terms(field, rows_x0, rows_t, rows_eps, rows_cond, weighting)
    per_sample = ad.sum_axis(ad.reshape(terms, (b, m)), axis=1)
    return ad.mul(per_sample, -1.0 / m)


def _trajectory_step_terms(field, states: np.ndarray, timesteps: np.ndarray,
                           conds) -> list[Tensor]:
    """Per-transition Gaussian log-densities for a batch of trajectories.

    ``states`` is [B, K+1, d] along the shared descending ``timesteps``.
    The transition from node k to k+1 is evaluated at t_hi = timesteps[k]
    with the estimator-internal diffusion g^2 = 2 t_hi / (1 - t_hi): the
    unit noise scale is what keeps the terminal-conditioned remainder of
    the chain density independent of the parameters, so the estimator
    always prices transitions at that scale even when the rollout used a
    smaller noise_level.
    """
    b, n_nodes, d = states.shape
    a2 = 1.0
    terms: list[Tensor] = []
    for k in range(n_nodes - 1):
        t_hi = float(timesteps[k])
        t_lo = float(timesteps[k + 1])
        dt = t_hi - t_lo
        if dt <= 0.0:
            raise ContractViolation("trajectory timesteps must strictly decrease")
        x_hi = states[:, k]
        x_lo = states[:, k + 1]
        g2 = a2 * 2.0 * t_hi / (1.0 - t_hi)
        var = g2 * dt
        v = velocity_tensor(field, x_hi, t_hi, conds)
        drift = ad.add(ad.mul(v, 1.0 + a2), ad.as_tensor(a2 * x_hi / (1.0 - t_hi)))
        mean = ad.add(ad.mul(drift, -dt), ad.as_tensor(x_hi))
        resid = ad.sub(ad.as_tensor(x_lo), mean)
        sq = ad.sum_axis(ad.mul(resid, resid), axis=1)
        const = -0.5 * d * np.log(2.0 * np.pi * var)
        terms.append(ad.add(ad.mul(sq, -0.5 / var), const))
    return terms


def _stack_trajectories(trajectories: list[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    for traj in trajectories:
        require_sde_trajectory(traj)
    ts0 = trajectories[0].timesteps
    if any(not np.array_equal(t.timesteps, ts0) for t in trajectories):
        raise ContractViolation("batched trajectories must share one time grid")
    return np.stack([t.states for t in trajectories]), ts0


# ---------------------------------------------------------------------------
# public per-sample operations


def elbo_term(field, x0, t: float, eps, cond, weighting: str) -> Tensor:
    """One weighted squared-residual draw; scalar tensor."""
    if not (0.0 < t <= 1.0):
        raise ContractViolation(f"elbo_term: t must lie in (0, 1], got {t}")
    x0 = np.asarray(x0, dtype=np.float64)
    terms = _weighted_terms(field, x0[None, :], np.array([t]), np.asarray(eps)[None, :],
                            cond, weighting)
    return ad.reshape(terms, ())


@dataclass
class ElboEstimate:
    loglik: Tensor
    draws: ElboDraws


def log_likelihood_elbo(field, x0, cond, cfg: EstimatorConfig, n_grid: int,
                        rng: np.random.Generator | None = None,
                        draws: ElboDraws | None = None) -> ElboEstimate:
    """Denoising-bound log-likelihood of one data point, up to a constant.

    Pass ``draws`` to reuse the (t, eps) randomness of a previous call
    (common-random-number comparisons, old-policy evaluation); otherwise
    they are drawn from ``rng``.
    """
    cfg.validate()
    if draws is None:
        if rng is None:
            raise ContractViolation("log_likelihood_elbo needs either draws or an rng")
        draws = draw_elbo_times(cfg, n_grid, np.asarray(x0).shape[-1], rng)
    loglik = _elbo_loglik_batch(field, np.asarray(x0, dtype=np.float64)[None, :], cond,
                                [draws], cfg.weighting)
    return ElboEstimate(loglik=ad.reshape(loglik, ()), draws=draws)


def log_likelihood_trajectory(field, trajectory: Trajectory, cond=None) -> Tensor:
    """Exact log-density of a stochastic trajectory under the field's chain."""
    states, timesteps = _stack_trajectories([trajectory])
    cond = trajectory.condition if cond is None else cond
    terms = _trajectory_step_terms(field, states, timesteps, cond)
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.reshape(total, ())


@dataclass
class RatioResult:
    ratio: Tensor  # differentiable through the new policy
    log_ratio: Tensor
    value: float


def policy_ratio(field_new, field_old, subject, cond, cfg: EstimatorConfig,
                 n_grid: int = 10, rng: np.random.Generator | None = None,
                 draws: ElboDraws | None = None,
                 diagnostics: RatioDiagnostics | None = None) -> RatioResult:
    """Likelihood ratio of one sample under new vs old policy.

    ``subject`` is the data point x0 for the denoising-bound modes and a
    Trajectory for the trajectory modes. Both policies see identical
    randomness. The log ratio passes through the overflow guard, which
    clips at +-cfg.log_ratio_bound and counts a warning.
    """
    cfg.validate()
    diagnostics = diagnostics if diagnostics is not None else RatioDiagnostics()
    if cfg.formula == FORMULA_TRAJECTORY:
        if not isinstance(subject, Trajectory):
            raise ContractViolation("trajectory formula needs a Trajectory subject")
        ws = prepare_workspace([subject], None, field_old, None, cfg, n_grid=n_grid, rng=rng)
    else:
        x0 = np.asarray(subject, dtype=np.float64)
        if draws is not None:
            ws = _workspace_from_draws(x0[None, :], cond, field_old, cfg, [draws])
        else:
            if rng is None:
                raise ContractViolation("policy_ratio needs either draws or an rng")
            ws = prepare_workspace([x0], cond, field_old, None, cfg, n_grid=n_grid, rng=rng)
    terms = policy_terms(field_new, ws, diagnostics)
    return RatioResult(
        ratio=ad.reshape(terms.ratio, ()),
        log_ratio=ad.reshape(terms.log_ratio, ()),
        value=float(terms.ratio_values[0]),
    )


def estimate_kl(field, field_ref, x0, cond, cfg: EstimatorConfig, n_grid: int = 10,
                rng: np.random.Generator | None = None,
                draws: ElboDraws | None = None) -> Tensor:
    """Monte Carlo forward-noised velocity-gap KL term, w(t) = 1.

    Average of ||v(x_t, t) - v_ref(x_t, t)||^2 over kl_mc_count draws with
    x_t noised from x0. Zero exactly when both fields coincide.
    """
    cfg.validate()
    x0 = np.asarray(x0, dtype=np.float64)
    if draws is None:
        if rng is None:
            raise ContractViolation("estimate_kl needs either draws or an rng")
        kl_cfg = EstimatorConfig(mc_scheme=MC_SINGLE, t_min=cfg.t_min, kl_mc_count=cfg.kl_mc_count)
        pulls = [draw_elbo_times(kl_cfg, n_grid, x0.shape[-1], rng) for _ in range(cfg.kl_mc_count)]
        draws = ElboDraws(ts=np.concatenate([p.ts for p in pulls]),
                          eps=np.concatenate([p.eps for p in pulls], axis=0))
    total: Tensor | None = None
    m = draws.ts.size
    for j in range(m):
        t = float(draws.ts[j])
        x_t = (1.0 - t) * x0 + t * draws.eps[j]
        v = velocity_tensor(field, x_t[None, :], t, cond)
        v_ref = np.atleast_2d(np.asarray(
            field_ref.velocity(x_t[None, :], np.array([t]), cond), dtype=np.float64))
        gap = ad.sub(v, ad.as_tensor(v_ref))
        sq = ad.sum_axis(ad.mul(gap, gap), axis=1)
        total = sq if total is None else ad.add(total, sq)
    return ad.reshape(ad.mul(total, 1.0 / m), ())


# ---------------------------------------------------------------------------
# workspace: cached old/reference sides for a batch of samples


@dataclass
class LikelihoodWorkspace:
    cfg: EstimatorConfig
    x0s: np.ndarray  # [B, d]
    conds: np.ndarray  # [B]
    draws: list[ElboDraws] | None  # elbo formula only
    trajectories: list[Trajectory] | None  # trajectory formula only
    traj_states: np.ndarray | None
    traj_times: np.ndarray | None
    loglik_old: np.ndarray  # [B]
    old_step_terms: np.ndarray | None  # [B, K] trajectory transitions
    old_single_terms: np.ndarray | None  # [B] mode-specific single-draw terms
    kl_draws: list[ElboDraws]
    kl_ref_velocities: list[np.ndarray]  # per kl draw row-block [B, d]
    single_rows: np.ndarray | None = None  # [B] draw row used by single-sample ratios

    @property
    def batch(self) -> int:
        return self.x0s.shape[0]

    def to_record(self) -> dict:
        rec = {
            "formula": self.cfg.formula,
            "weighting": self.cfg.weighting,
            "mc_scheme": self.cfg.mc_scheme,
            "ratio_mode": self.cfg.ratio_mode,
            "x0": self.x0s.tolist(),
            "conditions": self.conds.tolist(),
            "loglik_old": self.loglik_old.tolist(),
        }
        if self.draws is not None:
            rec["draws"] = [{"t": d.ts.tolist(), "eps": d.eps.tolist()} for d in self.draws]
        if self.trajectories is not None:
            rec["trajectories"] = [t.to_record() for t in self.trajectories]
        return rec


def _workspace_from_draws(x0s: np.ndarray, conds, field_old, cfg: EstimatorConfig,
                          draws_list: list[ElboDraws]) -> LikelihoodWorkspace:
    b = x0s.shape[0]
    conds = _normalize_conds(conds, b)
    kl_count = min(cfg.kl_mc_count, draws_list[0].ts.size)
    kl_draws = [ElboDraws(ts=d.ts[:kl_count].copy(), eps=d.eps[:kl_count].copy())
                for d in draws_list]
    ws = LikelihoodWorkspace(
        cfg=cfg, x0s=x0s, conds=conds, draws=draws_list, trajectories=None,
        traj_states=None, traj_times=None,
        loglik_old=np.zeros(b), old_step_terms=None, old_single_terms=None,
        kl_draws=kl_draws, kl_ref_velocities=[],
    )
    _cache_old_side(ws, field_old)
    return ws


def _normalize_conds(conds, batch: int) -> np.ndarray:
    if conds is None:
        return np.zeros(batch, dtype=np.intp)
    arr = np.asarray(conds, dtype=np.intp).reshape(-1)
    if arr.size == 1 and batch > 1:
        arr = np.full(batch, arr[0], dtype=np.intp)
    if arr.shape != (batch,):
        raise ContractViolation(f"conditions: expected {batch} ids, got shape {arr.shape}")
    return arr


def prepare_workspace(subjects, conds, field_old, field_ref, cfg: EstimatorConfig,
                      n_grid: int, rng=None, member_rngs: list[np.random.Generator] | None = None,
                      kl_rng: np.random.Generator | None = None) -> LikelihoodWorkspace:
    """Cache everything the gradient steps will reuse for one sample batch.

    ``subjects`` is a list of x0 vectors (elbo) or Trajectory objects
    (trajectory formula). Per-member rngs keep estimator draws tied to the
    member identity; a single ``rng`` is accepted for convenience.
    """
    cfg.validate()
    if cfg.formula == FORMULA_TRAJECTORY:
        trajectories = list(subjects)
        states, times = _stack_trajectories(trajectories)
        x0s = states[:, -1].copy()
        b = x0s.shape[0]
        conds_arr = _normalize_conds(
            conds if conds is not None else [t.condition for t in trajectories], b)
        # the kl estimate still needs forward-noising randomness; skip the
        # draws when no rng is supplied (ratio-only use)
        source = member_rngs if member_rngs is not None else [kl_rng or rng] * b
        kl_draws = []
        if all(s is not None for s in source):
            kl_cfg = EstimatorConfig(mc_scheme=MC_SINGLE, t_min=cfg.t_min)
            for i in range(b):
                pulls = [draw_elbo_times(kl_cfg, n_grid, x0s.shape[1], source[i])
                         for _ in range(cfg.kl_mc_count)]
                kl_draws.append(ElboDraws(ts=np.concatenate([p.ts for p in pulls]),
                                          eps=np.concatenate([p.eps for p in pulls], axis=0)))
        ws = LikelihoodWorkspace(
            cfg=cfg, x0s=x0s, conds=conds_arr, draws=None, trajectories=trajectories,
            traj_states=states, traj_times=times,
            loglik_old=np.zeros(b), old_step_terms=None, old_single_terms=None,
            kl_draws=kl_draws, kl_ref_velocities=[],
        )
    else:
        x0s = np.atleast_2d(np.asarray(subjects, dtype=np.float64))
        b = x0s.shape[0]
        conds_arr = _normalize_conds(conds, b)
        source = member_rngs if member_rngs is not None else [rng] * b
        if any(s is None for s in source):
            raise ContractViolation("prepare_workspace needs rngs for estimator draws")
        draws_list = [draw_elbo_times(cfg, n_grid, x0s.shape[1], source[i]) for i in range(b)]
        kl_count = min(cfg.kl_mc_count, draws_list[0].ts.size)
        # the kl term must stay a random-time estimate: sharing rows of a
        # deterministic all-timestep grid head would pin the kl to one t,
        # which the field can satisfy pointwise while tilting elsewhere
        kl_draws = []
        for i, d in enumerate(draws_list):
            m = d.ts.size
            rows = np.arange(kl_count) if kl_count == m else source[i].integers(m, size=kl_count)
            kl_draws.append(ElboDraws(ts=d.ts[rows].copy(), eps=d.eps[rows].copy()))
        single_rows = None
        if cfg.ratio_mode in (RATIO_SINGLE_SIMPLE, RATIO_SINGLE_ADAPTIVE):
            single_rows = np.array([0 if d.ts.size == 1 else int(source[i].integers(d.ts.size))
                                    for i, d in enumerate(draws_list)], dtype=np.intp)
        ws = LikelihoodWorkspace(
            cfg=cfg, x0s=x0s, conds=conds_arr, draws=draws_list, trajectories=None,
            traj_states=None, traj_times=None,
            loglik_old=np.zeros(b), old_step_terms=None, old_single_terms=None,
            kl_draws=kl_draws, kl_ref_velocities=[], single_rows=single_rows,
        )
    _cache_old_side(ws, field_old)
    if field_ref is not None:
        _cache_ref_side(ws, field_ref)
    return ws


def _cache_old_side(ws: LikelihoodWorkspace, field_old) -> None:
    cfg = ws.cfg
    with ad.no_grad():
        if cfg.formula == FORMULA_TRAJECTORY:
            terms = _trajectory_step_terms(field_old, ws.traj_states, ws.traj_times, ws.conds)
            ws.old_step_terms = np.stack([t.values for t in terms], axis=1)
            # accumulate in the same left-to-right order as the live side so
            # that the log ratio at identical parameters is exactly zero
            acc = terms[0].values.copy()
            for term in terms[1:]:
                acc = acc + term.values
            ws.loglik_old = acc
        else:
            ws.loglik_old = _elbo_loglik_batch(field_old, ws.x0s, ws.conds, ws.draws,
                                               cfg.weighting).values.copy()
            if cfg.ratio_mode in (RATIO_SINGLE_SIMPLE, RATIO_SINGLE_ADAPTIVE):
                mode_w = WEIGHT_SIMPLE if cfg.ratio_mode == RATIO_SINGLE_SIMPLE else WEIGHT_ADAPTIVE
                ws.old_single_terms = _single_draw_terms(field_old, ws, mode_w).values.copy()


def _cache_ref_side(ws: LikelihoodWorkspace, field_ref) -> None:
    ws.kl_ref_velocities = []
    for j in range(ws.kl_draws[0].ts.size):
        ts = np.array([d.ts[j] for d in ws.kl_draws])
        eps = np.stack([d.eps[j] for d in ws.kl_draws])
        x_t = (1.0 - ts)[:, None] * ws.x0s + ts[:, None] * eps
        v_ref = np.asarray(field_ref.velocity(x_t, ts, ws.conds), dtype=np.float64)
        ws.kl_ref_velocities.append(v_ref)


def _single_draw_terms(field, ws: LikelihoodWorkspace, weighting: str) -> Tensor:
    """Weighted term on each sample's designated draw (single-sample ratios)."""
    rows = ws.single_rows if ws.single_rows is not None else np.zeros(len(ws.draws), dtype=np.intp)
    ts = np.array([d.ts[rows[i]] for i, d in enumerate(ws.draws)])
    eps = np.stack([d.eps[rows[i]] for i, d in enumerate(ws.draws)])
    return _weighted_terms(field, ws.x0s, ts, eps, ws.conds, weighting)


@dataclass
class PolicyTerms:
    """Differentiable per-sample quantities the objectives are built from."""

    loglik: Tensor  # [B]
    ratio: Tensor  # [B]
    log_ratio: Tensor  # [B]
    ratio_values: np.ndarray  # [B], detached
    kl: Tensor  # [B]


def _guarded_exp(log_ratio: Tensor, cfg: EstimatorConfig,
                 diagnostics: RatioDiagnostics | None) -> tuple[Tensor, Tensor]:
    if diagnostics is not None:
        diagnostics.observe(log_ratio.values, cfg.log_ratio_bound)
    clipped = ad.clip(log_ratio, -cfg.log_ratio_bound, cfg.log_ratio_bound)
    return ad.exp(clipped), clipped


def policy_terms(field_new, ws: LikelihoodWorkspace,
                 diagnostics: RatioDiagnostics | None = None,
                 field_ref=None) -> PolicyTerms:
    """Evaluate the new-policy side against the cached workspace."""
    cfg = ws.cfg
    if cfg.formula == FORMULA_TRAJECTORY:
        terms = _trajectory_step_terms(field_new, ws.traj_states, ws.traj_times, ws.conds)
        loglik = terms[0]
        for term in terms[1:]:
            loglik = ad.add(loglik, term)
        if cfg.ratio_mode == RATIO_SUM_OF_EXP:
            # mean of per-transition ratios; equals 1 at identical parameters
            n = len(terms)
            acc = None
            worst = np.zeros(ws.batch)
            for k, term in enumerate(terms):
                step_lr = ad.sub(term, ad.as_tensor(ws.old_step_terms[:, k]))
                worst = np.maximum(worst, np.abs(step_lr.values))
                step_ratio, _ = _guarded_exp(step_lr, cfg, None)
                acc = step_ratio if acc is None else ad.add(acc, step_ratio)
            if diagnostics is not None:
                diagnostics.observe(worst, cfg.log_ratio_bound)
            ratio = ad.mul(acc, 1.0 / n)
            log_ratio = ad.log(ratio)
        else:
            raw_lr = ad.sub(loglik, ad.as_tensor(ws.loglik_old))
            ratio, log_ratio = _guarded_exp(raw_lr, cfg, diagnostics)
    else:
        loglik = _elbo_loglik_batch(field_new, ws.x0s, ws.conds, ws.draws, cfg.weighting)
        if cfg.ratio_mode == RATIO_EXP_OF_SUM:
            raw_lr = ad.sub(loglik, ad.as_tensor(ws.loglik_old))
        else:
            mode_w = WEIGHT_SIMPLE if cfg.ratio_mode == RATIO_SINGLE_SIMPLE else WEIGHT_ADAPTIVE
            new_terms = _single_draw_terms(field_new, ws, mode_w)
            raw_lr = ad.sub(ad.as_tensor(ws.old_single_terms), new_terms)
        ratio, log_ratio = _guarded_exp(raw_lr, cfg, diagnostics)

    kl = _kl_terms(field_new, ws, field_ref)
    return PolicyTerms(loglik=loglik, ratio=ratio, log_ratio=log_ratio,
                       ratio_values=ratio.values.copy(), kl=kl)


def _kl_terms(field_new, ws: LikelihoodWorkspace, field_ref) -> Tensor:
    """Per-sample velocity-gap KL estimates on the cached kl draws."""
    if not ws.kl_draws:
        return ad.as_tensor(np.zeros(ws.batch))
    if not ws.kl_ref_velocities:
        if field_ref is None:
            return ad.as_tensor(np.zeros(ws.batch))
        _cache_ref_side(ws, field_ref)
    total: Tensor | None = None
    m = len(ws.kl_ref_velocities)
    for j in range(m):
        ts = np.array([d.ts[j] for d in ws.kl_draws])
        eps = np.stack([d.eps[j] for d in ws.kl_draws])
        x_t = (1.0 - ts)[:, None] * ws.x0s + ts[:, None] * eps
        v = velocity_tensor(field_new, x_t, ts, ws.conds)
        gap = ad.sub(v, ad.as_tensor(ws.kl_ref_velocities[j]))
        sq = ad.sum_axis(ad.mul(gap, gap), axis=1)
        total = sq if total is None else ad.add(total, sq)
    return ad.mul(total, 1.0 / m)
