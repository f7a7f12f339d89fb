"""Explicit monotone finite-difference solver for the issuance
quasi-variational system.

The value function is stored per bond-configuration class (number of
running bonds, 0..kappa), each class a dense array over
``(x1, x2, prior coordinates, per-bond (layer, coupon, elapsed))``.
One backward sweep per time slice resolves the obstacle pointwise:
every interior node takes the larger of the no-action (generator)
candidate and the best immediate-issuance candidate.

Scheme structure, per step of length ``h_time``:

* time and elapsed advance together, exactly one cell, with bonds at
  maturity settled by reading the class without them (boundary lift);
* cash and penalty drift enter through first-order upwind differences
  of the advanced field;
* claims enter through an intensity-weighted sum over severity atoms of
  multilinearly interpolated post-claim reads (cash down, penalty up,
  triggered bonds settled with their payoff credited, prior jumped);
* the prior coordinate needs no drift for the Gamma family (the shape
  parameter only jumps; the rate parameter is a known function of
  time); scenario weights advance semi-Lagrangian, survival-reweighted
  and renormalized, then interpolated barycentrically on the simplex.

Every interpolation weight is nonnegative and sums to one, so whenever
the CFL bound checked at build time holds, each update is a convex
combination of next-slice values plus nothing else: the scheme is
monotone, preserves constants, and keeps values inside the range of the
terminal gain.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .bonds import BondBook, canonicalize
from .filters import GammaPosterior, ScenarioWeights
from .market import GainSpec, LayerSpec, coupon_rate, gain_from_cash
from .models import (
    BernoulliIntensity,
    EconomicParams,
    GammaIntensity,
    SeverityModel,
    discretize_severity,
    season_integral,
)

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Raised on CFL violations or non-finite values during the sweep."""


# ---------------------------------------------------------------------------
# axes


@dataclass(frozen=True)
class AxisSpec:
    lo: float
    hi: float
    step: float


@dataclass(frozen=True)
class Axis:
    name: str
    lo: float
    step: float
    n: int

    @property
    def hi(self) -> float:
        return self.lo + self.step * (self.n - 1)

    def points(self) -> np.ndarray:
        return self.lo + self.step * np.arange(self.n)

    def locate(self, values):
        """Clamped linear-interpolation table: lower index and fraction."""
        v = np.asarray(values, dtype=float)
        if self.n == 1:
            return np.zeros(v.shape, dtype=np.intp), np.zeros(v.shape)
        pos = (v - self.lo) / self.step
        pos = np.clip(pos, 0.0, self.n - 1.0)
        idx = np.minimum(pos.astype(np.intp), self.n - 2)
        frac = pos - idx
        return idx, frac

    def nearest(self, value) -> int:
        pos = int(round((float(value) - self.lo) / self.step))
        return min(max(pos, 0), self.n - 1)

    def contains(self, value, tol: float = 1e-9) -> bool:
        return self.lo - tol <= float(value) <= self.hi + tol

    @classmethod
    def from_spec(cls, name: str, spec: AxisSpec) -> "Axis":
        n = int(round((spec.hi - spec.lo) / spec.step)) + 1
        if n < 1:
            raise SolverError(f"axis {name}: empty grid")
        hi = spec.lo + spec.step * (n - 1)
        if abs(hi - spec.hi) > 1e-9 * max(1.0, abs(spec.hi)):
            log.warning("axis %s: upper bound adjusted from %g to %g to fit the step", name, spec.hi, hi)
        return cls(name, spec.lo, spec.step, n)


@dataclass(frozen=True)
class GridSpec:
    """Discretization request: time step plus one spec per continuous
    axis.  ``p`` is the prior axis (shape parameter of the Gamma
    family); scenario priors instead discretize the weight simplex with
    mesh size ``p_step``.  ``r_count`` sets the per-bond coupon axis
    resolution."""

    h_time: float
    x1: AxisSpec
    x2: AxisSpec
    p: Optional[AxisSpec] = None
    p_step: Optional[float] = None
    r_count: int = 3


def take_linear(arr: np.ndarray, axis: int, idx, frac) -> np.ndarray:
    """Linear interpolation along one axis with a per-position table.

    ``idx``/``frac`` have one entry per index along ``axis`` (or are
    scalars); the result keeps the shape of ``arr``.
    """
    n = arr.shape[axis]
    if n == 1:
        return arr.copy()
    idx = np.asarray(idx)
    frac = np.asarray(frac)
    lo = np.take(arr, idx, axis=axis)
    hi = np.take(arr, np.minimum(idx + 1, n - 1), axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = -1
    w = frac.reshape(shape)
    return lo * (1.0 - w) + hi * w


# ---------------------------------------------------------------------------
# simplex grid (scenario prior)


@dataclass(frozen=True)
class SimplexGrid:
    """Triangular lattice on the 2-simplex of three normalized weights,
    stored on an (n+1) x (n+1) square whose corner i+j > n is unused."""

    n: int

    @property
    def side(self) -> int:
        return self.n + 1

    @property
    def step(self) -> float:
        return 1.0 / self.n

    def valid_mask(self) -> np.ndarray:
        i = np.arange(self.side)
        return (i[:, None] + i[None, :]) <= self.n

    def node_weights(self) -> np.ndarray:
        """(side, side, 3) array of (w1, w2, w3) at each lattice node."""
        w1 = np.repeat(np.arange(self.side)[:, None] * self.step, self.side, axis=1)
        w2 = np.repeat(np.arange(self.side)[None, :] * self.step, self.side, axis=0)
        w3 = np.maximum(1.0 - w1 - w2, 0.0)
        return np.stack([w1, w2, w3], axis=-1)

    def locate(self, w1, w2):
        """Barycentric table: three flat corner indices and three
        nonnegative weights summing to one per query point."""
        w1 = np.atleast_1d(np.asarray(w1, dtype=float))
        w2 = np.atleast_1d(np.asarray(w2, dtype=float))
        x = np.clip(w1, 0.0, 1.0) * self.n
        y = np.clip(w2, 0.0, 1.0) * self.n
        over = x + y - self.n
        shrink = np.maximum(over, 0.0) / 2.0  # project numeric drift back in
        x = np.clip(x - shrink, 0.0, self.n)
        y = np.clip(y - shrink, 0.0, self.n)
        i0 = np.minimum(x.astype(np.intp), self.n - 1)
        j0 = np.minimum(y.astype(np.intp), self.n - 1)
        fx = x - i0
        fy = y - j0
        lower = fx + fy <= 1.0 + 1e-12
        side = self.side
        idx = np.empty(w1.shape + (3,), dtype=np.intp)
        wts = np.empty(w1.shape + (3,))
        idx[..., 0] = np.where(lower, i0 * side + j0, (i0 + 1) * side + (j0 + 1))
        idx[..., 1] = np.where(lower, (i0 + 1) * side + j0, i0 * side + (j0 + 1))
        idx[..., 2] = np.where(lower, i0 * side + (j0 + 1), (i0 + 1) * side + j0)
        wts[..., 0] = np.where(lower, 1.0 - fx - fy, fx + fy - 1.0)
        wts[..., 1] = np.where(lower, fx, 1.0 - fy)
        wts[..., 2] = np.where(lower, fy, 1.0 - fx)
        wts = np.clip(wts, 0.0, 1.0)
        wts /= wts.sum(axis=-1, keepdims=True)
        return idx, wts


def take_simplex(arr: np.ndarray, p_axis: int, idx: np.ndarray, wts: np.ndarray) -> np.ndarray:
    """Barycentric gather along the two simplex axes at ``p_axis`` and
    ``p_axis + 1``; ``idx``/``wts`` are per-node (flat, 3) tables."""
    side = arr.shape[p_axis]
    flat = arr.reshape(arr.shape[:p_axis] + (side * side,) + arr.shape[p_axis + 2 :])
    out = None
    shape = [1] * flat.ndim
    shape[p_axis] = -1
    for c in range(3):
        piece = np.take(flat, idx[:, c], axis=p_axis) * wts[:, c].reshape(shape)
        out = piece if out is None else out + piece
    return out.reshape(arr.shape[:p_axis] + (side, side) + arr.shape[p_axis + 2 :])


# ---------------------------------------------------------------------------
# workspace


@dataclass
class Workspace:
    """Materialized grids, model tables and reports for one solve."""

    econ: EconomicParams
    severity: SeverityModel
    intensity_model: object
    layers: LayerSpec
    gain_spec: GainSpec
    prior_kind: str  # "gamma" | "scenario"
    beta0: float
    h_time: float
    n_steps: int
    times: np.ndarray
    x1: Axis
    x2: Axis
    p_axis: Optional[Axis]
    simplex: Optional[SimplexGrid]
    r_axis: Axis
    nl: int
    kappa: int
    atoms: np.ndarray
    atom_weights: np.ndarray
    atom_bumps: np.ndarray
    eps_atoms: np.ndarray
    eps_weights: np.ndarray
    class_shapes: list
    cfl_report: dict = field(default_factory=dict)
    coverage_report: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return self.layers.n_layers

    @property
    def pshape(self) -> tuple:
        if self.prior_kind == "gamma":
            return (self.p_axis.n,)
        return (self.simplex.side, self.simplex.side)

    @property
    def n_state_axes(self) -> int:
        return 2 + len(self.pshape)

    def bond_block(self, j: int) -> int:
        """Array position of bond j's (layer, coupon, elapsed) axes."""
        return self.n_state_axes + 3 * j

    def l_values(self) -> np.ndarray:
        return self.h_time * np.arange(self.nl)

    def beta_at(self, t: float) -> float:
        return self.beta0 + season_integral(self.intensity_model.seasonality, 0.0, t)

    def node_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.class_shapes)

    def memory_estimate(self) -> int:
        per_slice = self.node_count()
        return per_slice * 8 * 2 + per_slice * (self.n_steps + 1)


def _flatten_severity(severity: SeverityModel, severity_posterior=None):
    """Severity atoms (insurer scale) and weights, mixed over a finite
    posterior of severity hypotheses when one is given."""
    if severity_posterior is None or severity_posterior.is_degenerate:
        model = severity if severity_posterior is None else severity_posterior.support[0]
        atoms, weights = discretize_severity(model)
        return atoms, weights
    atoms_list, weights_list = [], []
    for hyp, w in zip(severity_posterior.support, severity_posterior.weight_array):
        a, wt = discretize_severity(hyp)
        atoms_list.append(a)
        weights_list.append(wt * w)
    return np.concatenate(atoms_list), np.concatenate(weights_list)


def build_workspace(
    grid: GridSpec,
    econ: EconomicParams,
    severity: SeverityModel,
    intensity_model,
    layers: LayerSpec,
    prior,
    severity_posterior=None,
    eps_atoms=(0.0,),
    eps_weights=(1.0,),
) -> Workspace:
    """Materialize axes and model tables; verify step integrality and the
    monotonicity (CFL) bound, raising with the worst term otherwise."""
    n_steps_f = econ.T / grid.h_time
    n_steps = int(round(n_steps_f))
    if abs(n_steps_f - n_steps) > 1e-9 or n_steps < 1:
        raise SolverError(f"T/h_time = {n_steps_f} must be a positive integer")
    nl_f = econ.ell / grid.h_time
    nl = int(round(nl_f))
    if abs(nl_f - nl) > 1e-9 or nl < 1:
        raise SolverError(f"ell/h_time = {nl_f} must be a positive integer")
    if econ.kappa > 2:
        raise SolverError(
            "the grid solver supports at most two simultaneous bonds; "
            "the configuration class count grows combinatorially beyond that"
        )

    x1 = Axis.from_spec("x1", grid.x1)
    x2 = Axis.from_spec("x2", grid.x2)

    if isinstance(prior, GammaPosterior):
        if not isinstance(intensity_model, GammaIntensity):
            raise SolverError("a Gamma prior requires the separable intensity form")
        if grid.p is None:
            raise SolverError("a Gamma prior requires the p axis spec")
        prior_kind = "gamma"
        p_axis = Axis.from_spec("p", grid.p)
        simplex = None
        beta0 = prior.beta
    elif isinstance(prior, ScenarioWeights):
        if not isinstance(intensity_model, BernoulliIntensity):
            raise SolverError("scenario weights require the scenario intensity form")
        if len(intensity_model.levels) != 3:
            raise SolverError("the simplex prior grid supports exactly three scenarios")
        prior_kind = "scenario"
        step = grid.p_step or 0.1
        n_cells = int(round(1.0 / step))
        if abs(1.0 / step - n_cells) > 1e-9:
            raise SolverError("simplex mesh size must divide 1")
        p_axis = None
        simplex = SimplexGrid(n_cells)
        beta0 = math.nan
    else:
        raise SolverError(f"unsupported prior type {type(prior)!r}")

    atoms, atom_weights = _flatten_severity(severity, severity_posterior)
    atom_bumps = econ.bump_scale / severity.survival(atoms / severity.market_share)

    eps_atoms = np.asarray(eps_atoms, dtype=float)
    eps_weights = np.asarray(eps_weights, dtype=float)
    if abs(eps_weights.sum() - 1.0) > 1e-9 or np.any(eps_weights < 0.0):
        raise SolverError("coupon noise weights must be a probability vector")

    if grid.r_count < 1:
        raise SolverError("r_count must be at least 1")
    r_hi = max(
        coupon_rate(k, x2.hi, float(eps_atoms.max()), t, layers)
        for k in range(1, layers.n_layers + 1)
        for t in (0.0, econ.T)
    )
    r_step = r_hi / max(grid.r_count - 1, 1) if r_hi > 0 else 1.0
    r_axis = Axis("r", 0.0, r_step, grid.r_count)

    pshape = (p_axis.n,) if prior_kind == "gamma" else (simplex.side, simplex.side)
    class_shapes = [
        (x1.n, x2.n) + pshape + (layers.n_layers, r_axis.n, nl) * m for m in range(econ.kappa + 1)
    ]

    ws = Workspace(
        econ=econ,
        severity=severity,
        intensity_model=intensity_model,
        layers=layers,
        gain_spec=GainSpec.from_econ(econ),
        prior_kind=prior_kind,
        beta0=beta0,
        h_time=grid.h_time,
        n_steps=n_steps,
        times=grid.h_time * np.arange(n_steps + 1),
        x1=x1,
        x2=x2,
        p_axis=p_axis,
        simplex=simplex,
        r_axis=r_axis,
        nl=nl,
        kappa=econ.kappa,
        atoms=atoms,
        atom_weights=atom_weights,
        atom_bumps=atom_bumps,
        eps_atoms=eps_atoms,
        eps_weights=eps_weights,
        class_shapes=class_shapes,
    )
    _check_cfl(ws)
    _coverage_report(ws)
    return ws


def lambda_bar_table(ws: Workspace, t: float) -> np.ndarray:
    """Window-averaged posterior arrival rate over the prior grid."""
    dt = ws.h_time
    if ws.prior_kind == "gamma":
        window = season_integral(ws.intensity_model.seasonality, t, t + dt)
        return ws.p_axis.points() / ws.beta_at(t) * (window / dt)
    integrals = np.array(
        [ws.intensity_model.integrated_rate(t, t + dt, lam) for lam in ws.intensity_model.levels]
    )
    table = ws.simplex.node_weights() @ integrals / dt
    table[~ws.simplex.valid_mask()] = 0.0
    return table


def _check_cfl(ws: Workspace) -> None:
    econ = ws.econ
    lam_max = max(
        (float(lambda_bar_table(ws, ws.times[i]).max()) for i in range(ws.n_steps)), default=0.0
    )
    worst = {"sum": -1.0}
    for m in range(ws.kappa + 1):
        v1 = max(
            abs(econ.premium_rate(tv) + econ.r * xv - c)
            for tv in (0.0, econ.T)
            for xv in (ws.x1.lo, ws.x1.hi)
            for c in (0.0, m * ws.r_axis.hi)
        )
        v2 = econ.rho * max(abs(ws.x2.lo), abs(ws.x2.hi))
        t1 = v1 / ws.x1.step if ws.x1.n > 1 else 0.0
        t2 = v2 / ws.x2.step if ws.x2.n > 1 else 0.0
        total = t1 + t2 + lam_max
        if total > worst["sum"]:
            worst = {"sum": total, "class": m, "x1_term": t1, "x2_term": t2, "jump_term": lam_max}
    bound = ws.h_time * worst["sum"]
    ws.cfl_report = {
        "h_time": ws.h_time,
        "worst": worst,
        "cfl": bound,
        "max_h_time": (1.0 / worst["sum"]) if worst["sum"] > 0 else float("inf"),
        "node_count": ws.node_count(),
        "memory_bytes": ws.memory_estimate(),
    }
    if bound > 1.0 + 1e-12:
        raise SolverError(
            "monotonicity bound violated: h_time * (|v1|/h1 + |v2|/h2 + lambda_bar) = "
            f"{bound:.4f} > 1 at class {worst['class']} "
            f"(x1 term {worst['x1_term']:.3f}, x2 term {worst['x2_term']:.3f}, "
            f"jump term {worst['jump_term']:.3f}); need h_time <= {ws.cfl_report['max_h_time']:.6g}"
        )


def _coverage_report(ws: Workspace) -> None:
    econ = ws.econ
    drift_up = (econ.premium_rate(econ.T) + econ.r * max(ws.x1.hi, 0.0)) * econ.T
    max_pay = (
        max(ws.layers.capacity(k, econ.T) for k in range(1, ws.n_layers + 1)) if ws.n_layers else 0.0
    )
    ws.coverage_report = {
        "x1_drift_reach": drift_up,
        "x1_jump_reach_down": float(ws.atoms.max()) if ws.atoms.size else 0.0,
        "x1_jump_reach_up": max_pay * ws.kappa,
        "x2_bump_max": float(ws.atom_bumps.max()) if ws.atom_bumps.size else 0.0,
        "x2_bump_clamped_mass": float(ws.atom_weights[ws.atom_bumps > (ws.x2.hi - ws.x2.lo)].sum()),
        "x1_edge_inflow": "top (positive cash drift reads the upper edge)",
        "x2_edge_inflow": "none (the penalty drifts toward zero from both sides)",
    }


# ---------------------------------------------------------------------------
# per-slice tables


@dataclass
class SliceContext:
    """Index/weight tables for one backward step; shared by the
    vectorized sweep and the scalar audit path."""

    t: float
    dt: float
    lam_bar: np.ndarray
    attach: np.ndarray  # (n_layers, nl) at issue time t - l
    cap: np.ndarray
    atom_i2: np.ndarray  # (n_atoms, nx2)
    atom_w2: np.ndarray
    p_jump: tuple
    p_adv: Optional[tuple]
    h0_i1: np.ndarray
    h0_w1: np.ndarray
    coupon_ir: np.ndarray  # (n_layers, n_eps, nx2)
    coupon_wr: np.ndarray


def build_slice_context(ws: Workspace, t: float) -> SliceContext:
    dt = ws.h_time
    lam_bar = lambda_bar_table(ws, t)
    l_vals = ws.l_values()
    attach = np.empty((ws.n_layers, ws.nl))
    cap = np.empty((ws.n_layers, ws.nl))
    for k in range(1, ws.n_layers + 1):
        for li, lv in enumerate(l_vals):
            attach[k - 1, li] = ws.layers.attachment(k, t - lv)
            cap[k - 1, li] = ws.layers.capacity(k, t - lv)

    x2_pts = ws.x2.points()
    na = ws.atoms.size
    atom_i2 = np.empty((na, ws.x2.n), dtype=np.intp)
    atom_w2 = np.empty((na, ws.x2.n))
    for a, bump in enumerate(ws.atom_bumps):
        atom_i2[a], atom_w2[a] = ws.x2.locate(x2_pts + bump)

    if ws.prior_kind == "gamma":
        p_jump = ws.p_axis.locate(ws.p_axis.points() + 1.0)
        p_adv = None
    else:
        model = ws.intensity_model
        integrals = np.array([model.integrated_rate(t, t + dt, lam) for lam in model.levels])
        node_w = ws.simplex.node_weights().reshape(-1, 3)
        jump_raw = node_w * integrals[None, :]
        tot = jump_raw.sum(axis=1, keepdims=True)
        jump_w = np.where(tot > 0.0, jump_raw / np.where(tot > 0.0, tot, 1.0), node_w)
        adv_raw = node_w * np.exp(-integrals)[None, :]
        adv_w = adv_raw / adv_raw.sum(axis=1, keepdims=True)
        p_jump = ws.simplex.locate(jump_w[:, 0], jump_w[:, 1])
        p_adv = ws.simplex.locate(adv_w[:, 0], adv_w[:, 1])

    h0_i1, h0_w1 = ws.x1.locate(ws.x1.points() - ws.econ.H0)

    n_eps = ws.eps_atoms.size
    coupon_ir = np.empty((ws.n_layers, n_eps, ws.x2.n), dtype=np.intp)
    coupon_wr = np.empty((ws.n_layers, n_eps, ws.x2.n))
    for k in range(1, ws.n_layers + 1):
        for e, eps in enumerate(ws.eps_atoms):
            rates = np.array([coupon_rate(k, xv, eps, t, ws.layers) for xv in x2_pts])
            coupon_ir[k - 1, e], coupon_wr[k - 1, e] = ws.r_axis.locate(rates)

    return SliceContext(
        t=t,
        dt=dt,
        lam_bar=lam_bar,
        attach=attach,
        cap=cap,
        atom_i2=atom_i2,
        atom_w2=atom_w2,
        p_jump=p_jump,
        p_adv=p_adv,
        h0_i1=h0_i1,
        h0_w1=h0_w1,
        coupon_ir=coupon_ir,
        coupon_wr=coupon_wr,
    )


# ---------------------------------------------------------------------------
# field construction


def advance_settle(ws: Workspace, values: list, m: int) -> np.ndarray:
    """Next-slice field with every bond aged one cell; bonds reaching
    maturity are settled by reading the class without them."""
    nl = ws.nl
    S = ws.n_state_axes
    F = slice(None)
    pre = (F,) * S
    if m == 0:
        return values[0]
    if m == 1:
        out = np.empty_like(values[1])
        out[..., : nl - 1] = values[1][..., 1:]
        out[..., nl - 1] = values[0][..., None, None]
        return out
    # m == 2
    v2 = values[2]
    adv1 = advance_settle(ws, values, 1)
    out = np.empty_like(v2)
    keep = slice(0, nl - 1)
    out[pre + (F, F, keep, F, F, keep)] = v2[pre + (F, F, slice(1, nl), F, F, slice(1, nl))]
    # bond 1 matures: survivor bond 2, already aged inside adv1
    out[pre + (F, F, nl - 1, F, F, F)] = np.expand_dims(adv1, axis=(S, S + 1))
    # bond 2 matures, bond 1 keeps running
    out[pre + (F, F, keep, F, F, nl - 1)] = adv1[pre + (F, F, keep)][..., None, None]
    return out


def _gather_xp(ws: Workspace, arr: np.ndarray, ctx: SliceContext, atom: int) -> np.ndarray:
    """Post-claim gather of the penalty bump and the prior jump (the
    x1 part varies with the payoff and is applied separately)."""
    out = take_linear(arr, 1, ctx.atom_i2[atom], ctx.atom_w2[atom])
    if ws.prior_kind == "gamma":
        out = take_linear(out, 2, *ctx.p_jump)
    else:
        out = take_simplex(out, 2, *ctx.p_jump)
    return out


def _trigger_tables(ws: Workspace, ctx: SliceContext, atom: int):
    u = ws.atoms[atom]
    mask = u >= ctx.attach
    pay = np.where(mask, np.minimum(np.maximum(u - ctx.attach, 0.0), ctx.cap), 0.0)
    return mask, pay


def jump_read(ws: Workspace, ctx: SliceContext, m: int, advanced: list) -> np.ndarray:
    """Severity-weighted expectation of the interpolated post-claim
    value for one class."""
    x1_pts = ws.x1.points()
    S = ws.n_state_axes
    F = slice(None)
    pre = (F,) * S
    out = np.zeros(ws.class_shapes[m])
    for a, (u, w_u) in enumerate(zip(ws.atoms, ws.atom_weights)):
        xp_m = _gather_xp(ws, advanced[m], ctx, a)
        i1, w1 = ws.x1.locate(x1_pts - u)
        read = take_linear(xp_m, 0, i1, w1)
        if m >= 1:
            mask, pay = _trigger_tables(ws, ctx, a)
            if mask.any():
                xp_low = _gather_xp(ws, advanced[m - 1], ctx, a)
                src_cache: dict = {}

                def low_read(shift):
                    key = round(shift, 12)
                    if key not in src_cache:
                        ip, wp = ws.x1.locate(x1_pts - u + shift)
                        src_cache[key] = take_linear(xp_low, 0, ip, wp)
                    return src_cache[key]

                if m == 1:
                    for k_idx in range(ws.n_layers):
                        for l_idx in np.flatnonzero(mask[k_idx]):
                            read[pre + (k_idx, F, l_idx)] = low_read(pay[k_idx, l_idx])[..., None]
                else:
                    xp0 = None
                    src0_cache: dict = {}
                    trig = np.argwhere(mask)
                    for k_idx, l_idx in trig:
                        src = low_read(pay[k_idx, l_idx])
                        # bond 1 triggered: survivor block (k2, r2, l2) maps
                        # onto the one-bond class axes of src
                        read[pre + (k_idx, F, l_idx, F, F, F)] = np.expand_dims(src, axis=S)
                        # bond 2 triggered, bond 1 survives
                        read[pre + (F, F, F, k_idx, F, l_idx)] = src[..., None]
                    if xp0 is None:
                        xp0 = _gather_xp(ws, advanced[m - 2], ctx, a)
                    for k1, l1 in trig:
                        for k2, l2 in trig:
                            shift = pay[k1, l1] + pay[k2, l2]
                            key = round(shift, 12)
                            if key not in src0_cache:
                                ip, wp = ws.x1.locate(x1_pts - u + shift)
                                src0_cache[key] = take_linear(xp0, 0, ip, wp)
                            read[pre + (k1, F, l1, k2, F, l2)] = src0_cache[key][..., None, None]
        out += w_u * read
    return out


def upwind(B: np.ndarray, axis: int, vel: np.ndarray, step: float) -> np.ndarray:
    """One-sided difference along the transported direction; zero on
    degenerate axes.  Edge rows fall back to the inside difference
    (those nodes are overwritten by the boundary condition)."""
    n = B.shape[axis]
    if n == 1:
        return np.zeros_like(B)

    def at(sel):
        s = [slice(None)] * B.ndim
        s[axis] = sel
        return tuple(s)

    diff = np.diff(B, axis=axis) / step
    fwd = np.empty_like(B)
    fwd[at(slice(None, -1))] = diff
    fwd[at(slice(-1, None))] = diff[at(slice(-1, None))]
    bwd = np.empty_like(B)
    bwd[at(slice(1, None))] = diff
    bwd[at(slice(None, 1))] = diff[at(slice(None, 1))]
    return np.where(vel >= 0.0, fwd, bwd)


def _velocities(ws: Workspace, ctx: SliceContext, m: int):
    shape = ws.class_shapes[m]
    nd = len(shape)
    b1 = [1] * nd
    b1[0] = ws.x1.n
    vel1 = np.broadcast_to(
        (ws.econ.premium_rate(ctx.t) + ws.econ.r * ws.x1.points()).reshape(b1), shape
    ).astype(float).copy()
    for j in range(m):
        rshape = [1] * nd
        rshape[ws.bond_block(j) + 1] = ws.r_axis.n
        vel1 -= ws.r_axis.points().reshape(rshape)
    b2 = [1] * nd
    b2[1] = ws.x2.n
    vel2 = np.broadcast_to((-ws.econ.rho * ws.x2.points()).reshape(b2), shape)
    return vel1, vel2


def intervention_candidate(
    ws: Workspace, ctx: SliceContext, m: int, next_values: list, k_new: int
) -> np.ndarray:
    """Expected next-slice value after issuing a bond on layer ``k_new``
    now: cash pays the fixed cost, the prior advances one step, the new
    bond enters at elapsed zero with the coupon drawn from the noise
    atoms and interpolated onto the coupon axis."""
    W = take_linear(next_values[m + 1], 0, ctx.h0_i1, ctx.h0_w1)
    if ws.prior_kind == "scenario":
        W = take_simplex(W, 2, *ctx.p_adv)
    nb = ws.bond_block(m)
    W = np.take(W, k_new - 1, axis=nb)
    W = np.take(W, 0, axis=nb + 1)  # elapsed axis (shifted left after the layer take)
    # W now carries the new bond's coupon axis last
    out = np.zeros(ws.class_shapes[m])
    for e, w_e in enumerate(ws.eps_weights):
        ir = ctx.coupon_ir[k_new - 1, e]
        wr = ctx.coupon_wr[k_new - 1, e]
        if ws.r_axis.n == 1:
            piece = W[..., 0]
        else:
            idx_shape = [1] * W.ndim
            idx_shape[1] = ws.x2.n
            idx = np.broadcast_to(ir.reshape(idx_shape), W.shape[:-1] + (1,))
            lo = np.take_along_axis(W, idx, axis=-1)[..., 0]
            hi = np.take_along_axis(W, np.minimum(idx + 1, ws.r_axis.n - 1), axis=-1)[..., 0]
            w = wr.reshape(idx_shape[:-1])
            piece = lo * (1.0 - w) + hi * w
        out += w_e * piece
    return out


def class_update(ws: Workspace, ctx: SliceContext, m: int, next_values: list, advanced: list):
    """Generator candidate and obstacle resolution for one class.

    Returns (values, policy codes): 0 = wait, k = issue layer k.
    """
    A = advanced[m]
    B = take_simplex(A, 2, *ctx.p_adv) if ws.prior_kind == "scenario" else A

    vel1, vel2 = _velocities(ws, ctx, m)
    cand = B + ctx.dt * (
        vel1 * upwind(B, 0, vel1, ws.x1.step) + vel2 * upwind(B, 1, vel2, ws.x2.step)
    )

    if float(ctx.lam_bar.max()) > 0.0:
        nd = len(ws.class_shapes[m])
        lshape = [1] * nd
        for ax in range(2, ws.n_state_axes):
            lshape[ax] = ws.class_shapes[m][ax]
        lam_b = ctx.lam_bar.reshape(lshape)
        cand = cand + ctx.dt * lam_b * (jump_read(ws, ctx, m, advanced) - B)

    policy = np.zeros(ws.class_shapes[m], dtype=np.int8)
    if m < ws.kappa:
        for k_new in range(1, ws.n_layers + 1):
            kc = intervention_candidate(ws, ctx, m, next_values, k_new)
            better = kc > cand
            policy[better] = np.int8(k_new)
            np.maximum(cand, kc, out=cand)
    return cand, policy


# ---------------------------------------------------------------------------
# terminal condition and boundary


def _credit_array(ws: Workspace, m: int, extra: float = 0.0) -> np.ndarray:
    """Issue-cost credit of the gain over a class's elapsed axes."""
    nd = 2 + len(ws.pshape) + 3 * m
    spec = ws.gain_spec
    credit = np.full([1] * nd, extra)
    for j in range(m):
        lshape = [1] * nd
        lshape[ws.bond_block(j) + 2] = ws.nl
        credit = credit + (spec.H0 / spec.ell) * (spec.ell - ws.l_values()).reshape(lshape)
    return credit


def gain_array(ws: Workspace, m: int, terminal: Optional[Callable] = None) -> np.ndarray:
    shape = ws.class_shapes[m]
    x1_col = ws.x1.points().reshape([-1] + [1] * (len(shape) - 1))
    credit = _credit_array(ws, m)
    fn = terminal if terminal is not None else (lambda x, c: gain_from_cash(x, c, ws.gain_spec))
    return np.broadcast_to(fn(x1_col, credit), shape).copy()


def _terminal_values(ws: Workspace, terminal: Optional[Callable]) -> list:
    vals = [gain_array(ws, m, terminal) for m in range(ws.kappa + 1)]
    fn = terminal if terminal is not None else (lambda x, c: gain_from_cash(x, c, ws.gain_spec))
    for m in range(ws.kappa):
        # immediate issuance at the horizon: the fresh bond's full cost
        # credit exactly offsets the cash paid, so waiting ties and wins
        shape = ws.class_shapes[m]
        x1_col = (ws.x1.points() - ws.econ.H0).reshape([-1] + [1] * (len(shape) - 1))
        kg = np.broadcast_to(fn(x1_col, _credit_array(ws, m, extra=ws.econ.H0)), shape)
        np.maximum(vals[m], kg, out=vals[m])
    return vals


def _apply_boundary(ws: Workspace, values: list, g_arrays: list) -> None:
    """Dirichlet gain values on the x1/x2 box edges; the prior axes keep
    the interior update (their stencils never leave the grid)."""
    for v, g in zip(values, g_arrays):
        if ws.x1.n > 1:
            v[0] = g[0]
            v[-1] = g[-1]
        if ws.x2.n > 1:
            v[:, 0] = g[:, 0]
            v[:, -1] = g[:, -1]


# ---------------------------------------------------------------------------
# solution


@dataclass
class Solution:
    """Solved value/policy tables with query access.

    ``policy[i][m]`` holds int8 action codes of class ``m`` at slice
    ``i``; ``values`` maps retained slice indices to per-class arrays
    (all slices under ``keep_values``, else slice 0 only).
    """

    workspace: Workspace
    policy: list
    values: dict
    cfl_report: dict
    coverage_report: dict

    @property
    def class_count(self) -> int:
        return len(self.workspace.class_shapes)

    def slice_index(self, t: float) -> int:
        i = int(round(t / self.workspace.h_time))
        return min(max(i, 0), self.workspace.n_steps)

    def _book_coords(self, book: BondBook):
        ws = self.workspace
        book = canonicalize(book)
        coords = []
        clamped = False
        for s in book.running:
            k_idx = s.layer - 1
            if not 0 <= k_idx < ws.n_layers:
                raise ValueError(f"layer {s.layer} outside the solved set")
            l_idx = int(round(s.elapsed / ws.h_time))
            if abs(s.elapsed - l_idx * ws.h_time) > 1e-6 * max(1.0, ws.h_time):
                clamped = True
            l_idx = min(max(l_idx, 0), ws.nl - 1)
            if s.coupon > ws.r_axis.hi + 1e-9:
                clamped = True
            coords.append((k_idx, l_idx, s.coupon))
        return coords, clamped

    def _posterior_coords(self, posterior):
        ws = self.workspace
        if ws.prior_kind == "gamma":
            if not isinstance(posterior, GammaPosterior):
                raise TypeError("this solve indexes the prior by a Gamma posterior")
            return ("axis", float(posterior.alpha))
        if not isinstance(posterior, ScenarioWeights):
            raise TypeError("this solve indexes the prior by scenario weights")
        w = posterior.array
        return ("simplex", (float(w[0]), float(w[1])))

    def query_value(self, t: float, x1: float, x2: float, posterior, book: BondBook):
        """Multilinear value read; returns ``(value, clamped)`` where
        ``clamped`` flags any out-of-box coordinate."""
        ws = self.workspace
        i = self.slice_index(t)
        if i not in self.values:
            raise ValueError(f"slice {i} not retained; solve with keep_values=True")
        coords, clamped = self._book_coords(book)
        m = len(coords)
        sub = self.values[i][m]

        kind, pq = self._posterior_coords(posterior)
        # discrete takes first, from the last bond block backward so axis
        # positions stay valid
        for j in range(m - 1, -1, -1):
            k_idx, l_idx, _coupon = coords[j]
            base = ws.n_state_axes + 3 * j
            sub = np.take(sub, l_idx, axis=base + 2)
            sub = np.take(sub, k_idx, axis=base)
        if kind == "simplex":
            idx3, w3 = ws.simplex.locate(pq[0], pq[1])
            side = ws.simplex.side
            flat = sub.reshape(sub.shape[:2] + (side * side,) + sub.shape[4:])
            sub = sum(w3[0, c] * np.take(flat, idx3[0, c], axis=2) for c in range(3))
            clamped |= pq[0] + pq[1] > 1.0 + 1e-9 or min(pq) < -1e-9
        # remaining linear axes in order: x1, x2, [alpha], r_1..r_m
        fracs = []
        i1, w1 = ws.x1.locate(x1)
        clamped |= not ws.x1.contains(x1)
        fracs.append((int(i1), float(w1)))
        i2, w2 = ws.x2.locate(x2)
        clamped |= not ws.x2.contains(x2)
        fracs.append((int(i2), float(w2)))
        if kind == "axis":
            ip, wp = ws.p_axis.locate(pq)
            clamped |= not ws.p_axis.contains(pq)
            fracs.append((int(ip), float(wp)))
        for _k_idx, _l_idx, coupon in coords:
            ir, wr = ws.r_axis.locate(coupon)
            fracs.append((int(ir), float(wr)))
        for idx, frac in fracs:
            n_ax = sub.shape[0]
            lo = sub[min(idx, n_ax - 1)]
            hi = sub[min(idx + 1, n_ax - 1)]
            sub = lo * (1.0 - frac) + hi * frac
        return float(sub), clamped

    def query_policy(self, t: float, x1: float, x2: float, posterior, book: BondBook):
        """Nearest-node action after canonicalizing the queried book;
        returns ``(action, clamped)`` with 0 = wait, k = issue layer k."""
        ws = self.workspace
        i = self.slice_index(t)
        coords, clamped = self._book_coords(book)
        m = len(coords)
        arr = self.policy[i][m]
        idx = [ws.x1.nearest(x1), ws.x2.nearest(x2)]
        clamped |= not ws.x1.contains(x1)
        clamped |= not ws.x2.contains(x2)
        kind, pq = self._posterior_coords(posterior)
        if kind == "axis":
            idx.append(ws.p_axis.nearest(pq))
            clamped |= not ws.p_axis.contains(pq)
        else:
            idx3, w3 = ws.simplex.locate(pq[0], pq[1])
            flat_idx = int(idx3[0, int(np.argmax(w3[0]))])
            idx.extend([flat_idx // ws.simplex.side, flat_idx % ws.simplex.side])
        for k_idx, l_idx, coupon in coords:
            idx.extend([k_idx, ws.r_axis.nearest(coupon), l_idx])
        return int(arr[tuple(idx)]), clamped


def solve(
    ws: Workspace,
    keep_values: bool = False,
    terminal: Optional[Callable] = None,
    slice_hook: Optional[Callable] = None,
) -> Solution:
    """Backward induction over all time slices.

    ``terminal`` optionally replaces the gain with ``f(x1, credit)``
    (used by comparison tests).  ``slice_hook(i, values, policy)`` is
    called for every solved slice in descending order.
    """
    g_arrays = [gain_array(ws, m, terminal) for m in range(ws.kappa + 1)]
    values = _terminal_values(ws, terminal)
    _apply_boundary(ws, values, g_arrays)

    policy_all = [None] * (ws.n_steps + 1)
    policy_all[ws.n_steps] = [np.zeros(s, dtype=np.int8) for s in ws.class_shapes]
    kept = {}
    if keep_values:
        kept[ws.n_steps] = [v.copy() for v in values]
    if slice_hook is not None:
        slice_hook(ws.n_steps, values, policy_all[ws.n_steps])

    for i in range(ws.n_steps - 1, -1, -1):
        ctx = build_slice_context(ws, float(ws.times[i]))
        advanced = [advance_settle(ws, values, m) for m in range(ws.kappa + 1)]
        new_values = []
        new_policy = []
        for m in range(ws.kappa + 1):
            v, pol = class_update(ws, ctx, m, values, advanced)
            new_values.append(v)
            new_policy.append(pol)
        _apply_boundary(ws, new_values, g_arrays)
        for m, v in enumerate(new_values):
            if not np.all(np.isfinite(v)):
                where = np.unravel_index(int(np.argmin(np.isfinite(v))), v.shape)
                raise SolverError(f"non-finite value at slice {i}, class {m}, node {where}")
        values = new_values
        policy_all[i] = new_policy
        if keep_values:
            kept[i] = [v.copy() for v in values]
        if slice_hook is not None:
            slice_hook(i, values, new_policy)

    if 0 not in kept:
        kept[0] = [v.copy() for v in values]
    return Solution(
        workspace=ws,
        policy=policy_all,
        values=kept,
        cfl_report=ws.cfl_report,
        coverage_report=ws.coverage_report,
    )


# ---------------------------------------------------------------------------
# scalar audit path (tests): one-node update as explicit stencil weights


def _read_advanced(ws: Workspace, values: list, i1: int, i2: int, p_idx: tuple, bonds) -> float:
    """Scalar read of the aged-and-settled next-slice field: every bond's
    elapsed index advances one cell, maturing bonds drop out."""
    survivors = []
    for (k_idx, r_idx, l_idx) in bonds:
        if l_idx + 1 < ws.nl:
            survivors.append((k_idx, r_idx, l_idx + 1))
    arr = values[len(survivors)]
    idx = [i1, i2]
    idx.extend(p_idx)
    for k_idx, r_idx, l_idx in survivors:
        idx.extend([k_idx, r_idx, l_idx])
    return float(arr[tuple(idx)])


def node_stencil(ws: Workspace, ctx: SliceContext, m: int, node: tuple, values: list):
    """Affine decomposition of one interior generator update.

    Returns ``(value, weights)`` where ``weights`` lists every
    next-slice read as ``(weight, read_value)``; the update equals
    ``sum(w * v)`` and monotonicity demands every ``w >= 0``.
    """
    econ = ws.econ
    dt = ws.h_time
    S = ws.n_state_axes
    i1, i2 = node[0], node[1]
    if ws.prior_kind == "gamma":
        p_here: tuple = (node[2],)
        lam = float(ctx.lam_bar[node[2]])
    else:
        p_here = (node[2], node[3])
        lam = float(ctx.lam_bar[node[2], node[3]])
    bonds = [
        (node[S + 3 * j], node[S + 3 * j + 1], node[S + 3 * j + 2]) for j in range(m)
    ]
    coupon_sum = sum(ws.r_axis.points()[r_idx] for _k, r_idx, _l in bonds)
    vel1 = econ.premium_rate(ctx.t) + econ.r * ws.x1.points()[i1] - coupon_sum
    vel2 = -econ.rho * ws.x2.points()[i2]

    def base_read(j1, j2):
        """p-advance-weighted read of the aged field at x-indices (j1, j2)."""
        if ws.prior_kind == "gamma":
            return [(1.0, _read_advanced(ws, values, j1, j2, p_here, bonds))]
        flat = p_here[0] * ws.simplex.side + p_here[1]
        idx3, w3 = ctx.p_adv
        side = ws.simplex.side
        return [
            (float(w3[flat, c]), _read_advanced(
                ws, values, j1, j2,
                (int(idx3[flat, c]) // side, int(idx3[flat, c]) % side), bonds))
            for c in range(3)
        ]

    w_x1 = abs(vel1) * dt / ws.x1.step if ws.x1.n > 1 else 0.0
    w_x2 = abs(vel2) * dt / ws.x2.step if ws.x2.n > 1 else 0.0
    diag = 1.0 - w_x1 - w_x2 - dt * lam
    weights = [(diag * w, v) for w, v in base_read(i1, i2)]
    if w_x1 > 0.0:
        j1 = i1 + (1 if vel1 >= 0.0 else -1)
        weights += [(w_x1 * w, v) for w, v in base_read(j1, i2)]
    if w_x2 > 0.0:
        j2 = i2 + (1 if vel2 >= 0.0 else -1)
        weights += [(w_x2 * w, v) for w, v in base_read(i1, j2)]

    if lam > 0.0:
        if ws.prior_kind == "gamma":
            pi, pw = ctx.p_jump
            p_corners = [(int(pi[p_here[0]]), 1.0 - float(pw[p_here[0]]))]
            if float(pw[p_here[0]]) > 0.0:
                p_corners.append((min(int(pi[p_here[0]]) + 1, ws.p_axis.n - 1), float(pw[p_here[0]])))
            p_corners = [((c,), w) for c, w in p_corners]
        else:
            flat = p_here[0] * ws.simplex.side + p_here[1]
            idx3, w3 = ctx.p_jump
            side = ws.simplex.side
            p_corners = [
                ((int(idx3[flat, c]) // side, int(idx3[flat, c]) % side), float(w3[flat, c]))
                for c in range(3)
            ]
        x1v = ws.x1.points()[i1]
        for a, (u, w_u) in enumerate(zip(ws.atoms, ws.atom_weights)):
            mask, pay = _trigger_tables(ws, ctx, a)
            survivors = []
            payoff = 0.0
            for (k_idx, r_idx, l_idx) in bonds:
                if mask[k_idx, l_idx]:
                    payoff += pay[k_idx, l_idx]
                else:
                    survivors.append((k_idx, r_idx, l_idx))
            ii, fx = ws.x1.locate(x1v - u + payoff)
            x_corners = [(int(ii), 1.0 - float(fx))]
            if float(fx) > 0.0 and ws.x1.n > 1:
                x_corners.append((min(int(ii) + 1, ws.x1.n - 1), float(fx)))
            if ws.x1.n == 1:
                x_corners = [(0, 1.0)]
            ij = int(ctx.atom_i2[a, i2])
            fy = float(ctx.atom_w2[a, i2])
            y_corners = [(ij, 1.0 - fy)]
            if fy > 0.0 and ws.x2.n > 1:
                y_corners.append((min(ij + 1, ws.x2.n - 1), fy))
            if ws.x2.n == 1:
                y_corners = [(0, 1.0)]
            for cx, wx in x_corners:
                for cy, wy in y_corners:
                    for cp, wp in p_corners:
                        wgt = dt * lam * w_u * wx * wy * wp
                        if wgt != 0.0:
                            weights.append((wgt, _read_advanced(ws, values, cx, cy, cp, survivors)))
    value = sum(w * v for w, v in weights)
    return value, weights
