"""Per-region instance optimization.

Each region label becomes an independent sub-problem: the masked moving and
fixed images plus their binary and distance masks, possibly cropped to a
bounding box. A stationary velocity field is optimized with Adam on the full
analytic gradient chain (loss -> warp -> integration -> velocity), coarse to
fine across a resolution pyramid. The result is one diffeomorphic
displacement per region, embedded back into the full grid for composition.

Everything is deterministic for a fixed config: region solves share no
state, and every reduction has a fixed evaluation order, so results do not
depend on how many regions run concurrently.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .edt import EdtMask
from .errors import EmptyRegion, NonFiniteLoss
from .fields import (
    DisplacementField,
    VelocityField,
    _squaring_adjoint,
    _squaring_forward,
    uncrop_displacement,
)
from .interp import downsample_mean, plan_for_displacement, upsample_vectors
from .losses import LossWeights, l2_diffusion, lncc_loss, mask_loss, mse_loss
from .volume import Box, Grid, LabelMap, Volume

_FACE = ndimage.generate_binary_structure(3, 1)

SIMILARITIES = ("mse", "lncc")
MASK_LOSSES = ("dice", "edt", "edt_and_dice")


@dataclass(frozen=True)
class OptimizerConfig:
    """All solver knobs; defaults solve the bundled phantoms in minutes."""

    iterations: int = 150
    learning_rate: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    similarity: str = "mse"
    mask_loss: str = "edt_and_dice"
    lncc_window: int = 9
    edt_loss_form: str = "mse"
    integration_steps: int = 7
    levels: tuple[int, ...] = (4, 2, 1)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(f) for f in self.levels))
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 < b < 1.0:
                raise ValueError("adam betas must lie in (0, 1)")
        if self.integration_steps < 1:
            raise ValueError("integration_steps must be positive")
        if not self.levels or self.levels[-1] != 1 or any(f < 1 for f in self.levels):
            raise ValueError("levels must be positive factors ending with 1")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"similarity must be one of {SIMILARITIES}")
        if self.mask_loss not in MASK_LOSSES:
            raise ValueError(f"mask_loss must be one of {MASK_LOSSES}")


@dataclass(frozen=True)
class RegionPair:
    """One masked moving/fixed sub-problem on a (possibly cropped) grid."""

    label: int
    moving: Volume
    fixed: Volume
    moving_mask: LabelMap
    fixed_mask: LabelMap
    moving_edt: EdtMask
    fixed_edt: EdtMask
    box: Box
    full_grid: Grid

    def __post_init__(self):
        grids = {
            self.moving.grid, self.fixed.grid, self.moving_mask.grid,
            self.fixed_mask.grid, self.moving_edt.grid, self.fixed_edt.grid,
        }
        if len(grids) != 1:
            raise ValueError("all RegionPair grids must be identical")
        if self.box.dims != self.moving.grid.dims:
            raise ValueError("box dims must match the solve grid")
        self.box.check_inside(self.full_grid)


@dataclass(frozen=True)
class RegionResult:
    """Solved region: velocity on the solve grid, displacement on the full
    grid, and the per-iteration (total, L_v, L_m, R) trace."""

    label: int
    velocity: VelocityField
    displacement: DisplacementField
    loss_trace: np.ndarray


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators plus the step count."""

    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def init(cls, params: np.ndarray) -> "AdamState":
        return cls(params, np.zeros_like(params), np.zeros_like(params), 0)


def adam_update(
    state: AdamState,
    grad: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Textbook bias-corrected Adam step; pure, returns a new state."""
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * (grad * grad)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    params = state.params - lr * mhat / (np.sqrt(vhat) + eps)
    return AdamState(params, m, v, t)


# ---------------------------------------------------------------------------
# pyramid levels

@dataclass
class _Level:
    dims: tuple[int, int, int]
    moving: np.ndarray
    fixed: np.ndarray
    moving_mask: np.ndarray
    fixed_mask: np.ndarray
    moving_edt: np.ndarray
    fixed_edt: np.ndarray
    roi: np.ndarray       # similarity domain: fixed support dilated 2 voxels
    reg_mask: np.ndarray  # regularizer domain: fixed support


def _build_level(pair: RegionPair, factor: int) -> _Level:
    mov = downsample_mean(pair.moving.astype64(), factor)
    fix = downsample_mean(pair.fixed.astype64(), factor)
    mmask = downsample_mean(pair.moving_mask.labels.astype(np.float64), factor)
    fmask = downsample_mean(pair.fixed_mask.labels.astype(np.float64), factor)
    medt = downsample_mean(np.asarray(pair.moving_edt.values), factor)
    fedt = downsample_mean(np.asarray(pair.fixed_edt.values), factor)
    support = fmask > 1e-12
    roi = ndimage.binary_dilation(support, structure=_FACE, iterations=2)
    return _Level(mov.shape, mov, fix, mmask, fmask, medt, fedt, roi, support)


def _loss_and_grad(v2: np.ndarray, lvl: _Level, cfg: OptimizerConfig):
    """Total loss, its three parts, and the exact gradient w.r.t. velocity."""
    w = cfg.weights
    steps = cfg.integration_steps
    u, cache = _squaring_forward(lvl.dims, v2, steps)
    plan = plan_for_displacement(lvl.dims, u)
    g_u = np.zeros_like(v2)

    corners = plan.gather_corners(lvl.moving)
    warped = plan.value_from_corners(corners).reshape(lvl.dims)
    if cfg.similarity == "mse":
        sim = mse_loss(warped, lvl.fixed, roi=lvl.roi)
    else:
        sim = lncc_loss(warped, lvl.fixed, cfg.lncc_window, roi=lvl.roi)
    if w.gamma0 != 0.0:
        g_u += (w.gamma0 * sim.grad.ravel())[:, None] * plan.point_gradient(corners)

    need_mask = cfg.mask_loss in ("dice", "edt_and_dice")
    need_edt = cfg.mask_loss in ("edt", "edt_and_dice")
    wmask = wedt = None
    c_mask = c_edt = None
    if need_mask:
        c_mask = plan.gather_corners(lvl.moving_mask)
        wmask = plan.value_from_corners(c_mask).reshape(lvl.dims)
    if need_edt:
        c_edt = plan.gather_corners(lvl.moving_edt)
        wedt = plan.value_from_corners(c_edt).reshape(lvl.dims)
    ml = mask_loss(
        cfg.mask_loss,
        warped_mask=wmask,
        fixed_mask=lvl.fixed_mask if need_mask else None,
        warped_edt=wedt,
        fixed_edt=lvl.fixed_edt if need_edt else None,
        edt_form=cfg.edt_loss_form,
    )
    if w.gamma1 != 0.0:
        if ml.wrt_mask is not None:
            g_u += (w.gamma1 * ml.wrt_mask.ravel())[:, None] * plan.point_gradient(c_mask)
        if ml.wrt_edt is not None:
            g_u += (w.gamma1 * ml.wrt_edt.ravel())[:, None] * plan.point_gradient(c_edt)

    reg = l2_diffusion(v2.reshape(lvl.dims + (3,)), region=lvl.reg_mask)

    g_v = _squaring_adjoint(lvl.dims, cache, g_u, steps)
    grad = g_v + w.gamma2 * reg.grad.reshape(-1, 3)
    total = w.gamma0 * sim.value + w.gamma1 * ml.value + w.gamma2 * reg.value
    return total, sim.value, ml.value, reg.value, grad


def register_region(pair: RegionPair, cfg: OptimizerConfig) -> RegionResult:
    """Solve one region coarse-to-fine; deterministic for fixed inputs."""
    if np.count_nonzero(pair.fixed_mask.labels) == 0:
        raise EmptyRegion(pair.label, "fixed")
    if np.count_nonzero(pair.moving_mask.labels) == 0:
        raise EmptyRegion(pair.label, "moving")

    trace: list[tuple[float, float, float, float]] = []
    v2: np.ndarray | None = None
    prev_dims: tuple[int, int, int] | None = None
    prev_factor = 0
    for level_index, factor in enumerate(cfg.levels):
        lvl = _build_level(pair, factor)
        n = lvl.dims[0] * lvl.dims[1] * lvl.dims[2]
        if v2 is None:
            v2 = np.zeros((n, 3))
        else:
            v2 = upsample_vectors(
                v2.reshape(prev_dims + (3,)), prev_dims, lvl.dims,
                ratio=prev_factor / factor,
            ).reshape(-1, 3)
        state = AdamState.init(v2)
        for it in range(cfg.iterations):
            total, lv, lm, r, grad = _loss_and_grad(state.params, lvl, cfg)
            if not np.isfinite(total):
                raise NonFiniteLoss(level_index, it)
            trace.append((total, lv, lm, r))
            state = adam_update(
                state, grad, cfg.learning_rate,
                cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
            )
        v2 = state.params
        prev_dims, prev_factor = lvl.dims, factor

    solve_grid = pair.moving.grid
    u, _ = _squaring_forward(solve_grid.dims, v2, cfg.integration_steps)
    velocity = VelocityField(solve_grid, v2.reshape(solve_grid.dims + (3,)))
    disp = DisplacementField(solve_grid, u.reshape(solve_grid.dims + (3,)))
    disp_full = uncrop_displacement(disp, pair.box, pair.full_grid)
    return RegionResult(pair.label, velocity, disp_full, np.asarray(trace))


def trace_csv(result: RegionResult) -> str:
    """Loss trace as CSV text: iteration, total, voxel, mask, reg."""
    buf = io.StringIO()
    buf.write("iteration,total,voxel_loss,mask_loss,regularization\n")
    for i, (total, lv, lm, r) in enumerate(result.loss_trace):
        buf.write(f"{i},{total:.9g},{lv:.9g},{lm:.9g},{r:.9g}\n")
    return buf.getvalue()
