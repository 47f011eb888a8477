"""Synthetic rewards and ground-truth oracles.

The tasks are built around rewards whose KL-regularized optimum is
computable two independent ways:

* closed form: a diagonal-Gaussian reference tilted by a quadratic (or
  linear) reward is again a diagonal Gaussian, by completing the square;
* brute force: any reward can be tilted bin-wise on a discrete grid, in
  log-space so that large rewards and empty bins stay finite.

The proximal recursion (the fixed-point iteration the proximal
objectives follow in distribution space) is implemented on both
substrates as well, so each can check the other.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .errors import ConfigError, ContractViolation, UnsupportedOracleError

REWARD_KINDS = ("quadratic", "ring", "indicator-region")

DEFAULT_BOX_HALF_WIDTH = 5.0
DEFAULT_BINS_PER_AXIS = 200


@dataclass
class RewardSpec:
    """Reward family plus per-condition parameters.

    quadratic: R(x) = -||x - mu_c||^2 / (2 s^2), one target row per
    condition. ring: R(x) = -(||x|| - r)^2. indicator-region: 1 on a
    closed axis-aligned box, 0 outside (binary, rule-like).
    """

    kind: str = "quadratic"
    means: list = dataclass_field(default_factory=lambda: [[0.0]])  # [C, d]
    scale: float = 1.0
    radius: float = 1.0
    region_low: list | None = None
    region_high: list | None = None
    beta: float = 1.0  # tilt temperature the oracles are built at

    def validate(self) -> None:
        if self.kind not in REWARD_KINDS:
            raise ConfigError(f"unknown reward kind {self.kind!r}", field="reward.kind")
        if self.beta <= 0.0:
            raise ConfigError("beta must be positive", field="reward.beta")
        if self.kind == "quadratic":
            arr = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
            if not np.all(np.isfinite(arr)):
                raise ConfigError("target means must be finite", field="reward.means")
            if self.scale <= 0.0:
                raise ConfigError("scale must be positive", field="reward.scale")
        if self.kind == "ring" and self.radius <= 0.0:
            raise ConfigError("radius must be positive", field="reward.radius")
        if self.kind == "indicator-region":
            if self.region_low is None or self.region_high is None:
                raise ConfigError("indicator-region needs region_low and region_high",
                                  field="reward.region_low")
            lo = np.asarray(self.region_low, dtype=np.float64)
            hi = np.asarray(self.region_high, dtype=np.float64)
            if lo.shape != hi.shape or np.any(lo >= hi):
                raise ConfigError("region bounds must satisfy low < high elementwise",
                                  field="reward.region_high")

    def mean_for(self, cond: int) -> np.ndarray:
        arr = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if not (0 <= cond < arr.shape[0]):
            raise ContractViolation(f"condition {cond} outside reward table of {arr.shape[0]}")
        return arr[cond]


def reward_batch(spec: RewardSpec, x: np.ndarray, cond: int = 0) -> np.ndarray:
    """Rewards for rows of x under one condition."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise ContractViolation("reward evaluated at non-finite points")
    if spec.kind == "quadratic":
        diff = x - spec.mean_for(cond)[None, :]
        return -(diff * diff).sum(axis=1) / (2.0 * spec.scale ** 2)
    if spec.kind == "ring":
        radii = np.sqrt((x * x).sum(axis=1))
        return -((radii - spec.radius) ** 2)
    if spec.kind == "indicator-region":
        lo = np.asarray(spec.region_low, dtype=np.float64)
        hi = np.asarray(spec.region_high, dtype=np.float64)
        inside = np.all((x >= lo) & (x <= hi), axis=1)  # closed region
        return inside.astype(np.float64)
    raise ConfigError(f"unknown reward kind {spec.kind!r}", field="reward.kind")


def reward(spec: RewardSpec, x, cond: int = 0) -> float:
    return float(reward_batch(spec, np.asarray(x, dtype=np.float64)[None, :], cond)[0])


# ---------------------------------------------------------------------------
# closed-form Gaussian tilts


def tilt_gaussian_canonical(ref_means: np.ndarray, ref_vars: np.ndarray,
                            q_diag: np.ndarray, b: np.ndarray,
                            beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Tilt a diagonal Gaussian by exp(R/beta), R = -x'Qx/2 + b'x, diagonal Q.

    Completing the square: posterior precision 1/v + Q/beta must stay
    positive; posterior mean solves the precision-weighted average.
    """
    ref_means = np.asarray(ref_means, dtype=np.float64)
    ref_vars = np.asarray(ref_vars, dtype=np.float64)
    q_diag = np.asarray(q_diag, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(ref_vars <= 0.0):
        raise ContractViolation("reference variances must be positive")
    precision = 1.0 / ref_vars + q_diag / beta
    if np.any(precision <= 0.0):
        raise UnsupportedOracleError("tilt is not normalizable: posterior precision <= 0")
    post_vars = 1.0 / precision
    post_means = post_vars * (ref_means / ref_vars + b / beta)
    return post_means, post_vars


def tilted_gaussian_oracle(ref_means: np.ndarray, ref_vars: np.ndarray,
                           spec: RewardSpec, cond: int = 0,
                           beta: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form optimum of the KL-regularized reward problem.

    Only the quadratic reward family admits one; other kinds raise and
    callers fall back to the grid oracle.
    """
    spec.validate()
    if spec.kind != "quadratic":
        raise UnsupportedOracleError(
            f"no closed-form tilt for reward kind {spec.kind!r}; use the grid oracle")
    beta = spec.beta if beta is None else beta
    mu = spec.mean_for(cond)
    q_diag = np.full(mu.shape, 1.0 / spec.scale ** 2)
    b = mu / spec.scale ** 2
    return tilt_gaussian_canonical(np.asarray(ref_means, dtype=np.float64),
                                   np.asarray(ref_vars, dtype=np.float64),
                                   q_diag, b, beta)


def gaussian_proximal_step(target_mean, target_var, k_mean, k_var,
                           eta: float) -> tuple[np.ndarray, np.ndarray]:
    """One proximal-recursion step in closed form for diagonal Gaussians.

    pi_{k+1} is the geometric mixture target^w * pi_k^(1-w) with
    w = eta / (1 + eta), so precisions average with weight w.
    """
    if eta <= 0.0:
        raise ContractViolation("proximal step size must be positive")
    w = eta / (1.0 + eta)
    target_mean = np.asarray(target_mean, dtype=np.float64)
    target_var = np.asarray(target_var, dtype=np.float64)
    k_mean = np.asarray(k_mean, dtype=np.float64)
    k_var = np.asarray(k_var, dtype=np.float64)
    precision = w / target_var + (1.0 - w) / k_var
    out_var = 1.0 / precision
    out_mean = out_var * (w * target_mean / target_var + (1.0 - w) * k_mean / k_var)
    return out_mean, out_var


# ---------------------------------------------------------------------------
# discrete grid oracle


@dataclass
class GridDistribution:
    """Probability masses on a uniform axis-aligned grid, d <= 2."""

    low: np.ndarray  # [d]
    high: np.ndarray  # [d]
    masses: np.ndarray  # [bins]*d, normalized

    def __post_init__(self) -> None:
        self.low = np.asarray(self.low, dtype=np.float64).reshape(-1)
        self.high = np.asarray(self.high, dtype=np.float64).reshape(-1)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if self.low.shape != self.high.shape or np.any(self.low >= self.high):
            raise ContractViolation("grid box must satisfy low < high per axis")
        if self.masses.ndim != self.low.size:
            raise ContractViolation(
                f"masses rank {self.masses.ndim} does not match box dimension {self.low.size}")
        if self.masses.ndim > 2:
            raise ContractViolation("grid oracles support at most 2 dimensions")

    def validate(self) -> None:
        if np.any(self.masses < 0.0):
            raise ContractViolation("grid masses must be non-negative")
        total = float(self.masses.sum())
        if abs(total - 1.0) > 1e-12:
            raise ContractViolation(f"grid masses sum to {total}, expected 1 within 1e-12")

    @property
    def dim(self) -> int:
        return self.low.size

    @property
    def bins(self) -> tuple[int, ...]:
        return self.masses.shape

    def axis_centers(self, axis: int) -> np.ndarray:
        n = self.masses.shape[axis]
        width = (self.high[axis] - self.low[axis]) / n
        return self.low[axis] + width * (np.arange(n) + 0.5)

    def axis_edges(self, axis: int) -> np.ndarray:
        return np.linspace(self.low[axis], self.high[axis], self.masses.shape[axis] + 1)

    def centers(self) -> np.ndarray:
        """All bin centers as rows, [prod(bins), d], C-order."""
        axes = [self.axis_centers(i) for i in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def mean(self) -> np.ndarray:
        flat = self.masses.reshape(-1)
        return (flat[:, None] * self.centers()).sum(axis=0)

    def variance(self) -> np.ndarray:
        flat = self.masses.reshape(-1)
        c = self.centers()
        m = (flat[:, None] * c).sum(axis=0)
        return (flat[:, None] * (c - m) ** 2).sum(axis=0)

    def copy(self) -> "GridDistribution":
        return GridDistribution(self.low.copy(), self.high.copy(), self.masses.copy())

    def to_csv(self, path: str) -> None:
        c = self.centers()
        flat = self.masses.reshape(-1)
        header = ",".join([f"x{i}" for i in range(self.dim)] + ["mass"])
        rows = [header]
        for i in range(flat.size):
            coords = ",".join(f"{v:.17g}" for v in c[i])
            rows.append(f"{coords},{flat[i]:.17g}")
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")


def grid_from_log_density(log_density_fn, dim: int,
                          half_width: float = DEFAULT_BOX_HALF_WIDTH,
                          bins: int = DEFAULT_BINS_PER_AXIS) -> GridDistribution:
    """Normalize exp(log density) over the default box, max-subtracted."""
    if dim not in (1, 2):
        raise ContractViolation("grid oracles support d in {1, 2}")
    low = np.full(dim, -half_width)
    high = np.full(dim, half_width)
    grid = GridDistribution(low, high, np.zeros((bins,) * dim))
    logs = np.asarray(log_density_fn(grid.centers()), dtype=np.float64).reshape((bins,) * dim)
    grid.masses = _normalize_log_masses(logs)
    return grid


def diag_gaussian_grid(means, variances, half_width: float = DEFAULT_BOX_HALF_WIDTH,
                       bins: int = DEFAULT_BINS_PER_AXIS) -> GridDistribution:
    means = np.asarray(means, dtype=np.float64).reshape(-1)
    variances = np.asarray(variances, dtype=np.float64).reshape(-1)

    def log_density(x: np.ndarray) -> np.ndarray:
        return -0.5 * ((x - means) ** 2 / variances).sum(axis=1)

    return grid_from_log_density(log_density, means.size, half_width, bins)


def _normalize_log_masses(logs: np.ndarray) -> np.ndarray:
    finite = logs[np.isfinite(logs)]
    if finite.size == 0:
        raise ContractViolation("grid tilt has no finite-mass bins")
    shifted = logs - finite.max()
    with np.errstate(under="ignore"):
        masses = np.exp(shifted)
    masses[~np.isfinite(logs)] = 0.0
    total = masses.sum()
    if total <= 0.0:
        raise ContractViolation("grid tilt normalization lost all mass")
    return masses / total


def grid_tilt(ref: GridDistribution, reward_values: np.ndarray, beta: float) -> GridDistribution:
    """Bin-wise ref * exp(R / beta), renormalized in log-space.

    Adding a constant to R cancels exactly in the max-subtraction, and
    zero-mass reference bins stay at zero mass.
    """
    if beta <= 0.0:
        raise ContractViolation("beta must be positive")
    reward_values = np.asarray(reward_values, dtype=np.float64).reshape(ref.masses.shape)
    with np.errstate(divide="ignore"):
        logs = np.log(ref.masses) + reward_values / beta
    out = ref.copy()
    out.masses = _normalize_log_masses(logs)
    return out


def proximal_recursion(ref: GridDistribution, target: GridDistribution,
                       pi_k: GridDistribution, eta: float) -> GridDistribution:
    """One step of the distribution-space proximal iteration on the grid.

    pi_{k+1} is proportional to target^w * pi_k^(1-w), w = eta/(1+eta);
    iterating from the reference converges to the target tilt. The
    reference argument pins the shared box and bin layout.
    """
    if eta <= 0.0:
        raise ContractViolation("proximal step size must be positive")
    for other in (target, pi_k):
        if other.masses.shape != ref.masses.shape or not (
                np.array_equal(other.low, ref.low) and np.array_equal(other.high, ref.high)):
            raise ContractViolation("proximal recursion needs matching grid layouts")
    w = eta / (1.0 + eta)
    with np.errstate(divide="ignore"):
        logs = w * np.log(target.masses) + (1.0 - w) * np.log(pi_k.masses)
    out = ref.copy()
    out.masses = _normalize_log_masses(logs)
    return out


def expected_reward(grid: GridDistribution, spec: RewardSpec, cond: int = 0) -> float:
    values = reward_batch(spec, grid.centers(), cond)
    return float((grid.masses.reshape(-1) * values).sum())


# ---------------------------------------------------------------------------
# distances


def histogram_samples(samples: np.ndarray, like: GridDistribution) -> tuple[np.ndarray, int]:
    """Histogram rows of samples onto the grid layout.

    Out-of-box samples are clipped into the nearest boundary bin; the
    count of clipped rows is returned alongside the masses.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[1] != like.dim:
        raise ContractViolation(f"samples have dimension {x.shape[1]}, grid has {like.dim}")
    outside = np.any((x < like.low) | (x > like.high), axis=1)
    clipped = int(outside.sum())
    span = like.high - like.low
    inner_low = like.low + 1e-12 * span
    inner_high = like.high - 1e-12 * span
    x = np.clip(x, inner_low, inner_high)
    edges = [like.axis_edges(i) for i in range(like.dim)]
    counts, _ = np.histogramdd(x, bins=edges)
    return counts / x.shape[0], clipped


def tv_grid(a: GridDistribution, b: GridDistribution) -> float:
    if a.masses.shape != b.masses.shape:
        raise ContractViolation("total-variation comparison needs matching grids")
    return 0.5 * float(np.abs(a.masses - b.masses).sum())


def tv_distance(samples: np.ndarray, oracle: GridDistribution,
                stats: dict | None = None) -> float:
    """Total variation between an empirical histogram and an oracle grid.

    ``stats`` (when given) receives the out-of-box sample count under
    key "clipped".
    """
    masses, clipped = histogram_samples(samples, oracle)
    if stats is not None:
        stats["clipped"] = stats.get("clipped", 0) + clipped
    return 0.5 * float(np.abs(masses - oracle.masses.reshape(masses.shape)).sum())
