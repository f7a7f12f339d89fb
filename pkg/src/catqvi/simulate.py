"""Forward Monte Carlo of the controlled cash process.

Claims arrive by thinning an inhomogeneous arrival rate under the true
intensity level; the posterior runs online alongside the path; bonds
follow the queried policy (a solved table, a scripted callable, or
none).  Drift between events integrates exactly (linear cash flow,
exponential penalty decay), so path statistics carry no stepping bias.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .bonds import BondBook, BondSlot, issue, settle_event, settle_maturity, total_payoff
from .config import ModelBundle
from .filters import (
    FiniteSupportPosterior,
    GammaPosterior,
    ScenarioWeights,
    gamma_advance,
    gamma_jump,
    mark_jump_update,
    scenario_advance,
    scenario_jump,
)
from .market import (
    GainSpec,
    LayerSpec,
    MarketState,
    coupon_rate,
    decay_penalty,
    gain,
    integrate_cash,
    penalty_bump,
)
from .models import BernoulliIntensity, discretize_severity, severity_quantile
from .solver import Axis, SimplexGrid


@dataclass(frozen=True)
class ScenarioTruth:
    """Ground truth of one experiment: the realized intensity level, the
    master seed, and the number of paths."""

    lambda0: float
    seed: int
    n_paths: int = 1
    severity_mode: str = "atoms"  # "atoms" matches a discretized solve

    def __post_init__(self):
        if self.lambda0 < 0.0:
            raise ValueError("the true intensity level must be nonnegative")
        if self.severity_mode not in ("atoms", "continuous"):
            raise ValueError("severity_mode must be atoms or continuous")


@dataclass
class PathEvent:
    t: float
    kind: str  # start | claim | issue | event_settlement | maturity_settlement | end
    loss_insurer: float = 0.0
    loss_industry: float = 0.0
    payoff: float = 0.0
    layer: int = 0
    coupon: float = 0.0
    x1: float = 0.0
    x2: float = 0.0
    coupon_total: float = 0.0  # running coupon flow right after the event


@dataclass
class PathRecord:
    """One simulated path: the event log, lattice samples, and terminal
    state."""

    events: list
    sample_t: np.ndarray
    sample_x1: np.ndarray
    sample_x2: np.ndarray
    sample_posterior: np.ndarray  # (n, 2) mean/sd or (n, k) weights
    sample_n_running: np.ndarray
    final_state: MarketState
    final_posterior: object
    final_book: BondBook
    n_issues: int
    clamped_queries: int

    def claims(self) -> list:
        return [e for e in self.events if e.kind == "claim"]


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Independent counter-based stream for one path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, path_index])))


def sample_claims(lambda0: float, model, horizon: float, rng: np.random.Generator) -> np.ndarray:
    """Claim times on [0, horizon] by thinning a constant majorant."""
    lam_max = model.max_rate(lambda0)
    if lam_max <= 0.0:
        return np.empty(0)
    out = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / lam_max)
        if t >= horizon:
            return np.asarray(out)
        if rng.random() * lam_max < model.rate(t, lambda0):
            out.append(t)


def sample_severity(
    bundle: ModelBundle, rng: np.random.Generator, mode: str = "atoms", atoms: Optional[np.ndarray] = None
) -> tuple[float, float]:
    """One severity draw: (industry, insurer).  Atom mode draws uniformly
    from the discretized insurer-scale atoms, matching a solve that used
    them; continuous mode inverts the capped distribution."""
    sev = bundle.severity
    if mode == "atoms":
        if atoms is None:
            atoms = discretize_severity(sev)[0]
        u_ins = float(atoms[rng.integers(0, len(atoms))])
        return u_ins / sev.market_share, u_ins
    p = rng.random()
    u_ind = severity_quantile(sev, p, scale="industry")
    return u_ind, u_ind * sev.market_share


class _Posterior:
    """Online filter state for one path (intensity level plus optional
    severity/coupon parameter posteriors)."""

    def __init__(self, bundle: ModelBundle, severity_posterior=None, upsilon_posterior=None):
        self.model = bundle.intensity
        self.lam = bundle.prior
        self.gamma_post = severity_posterior or bundle.severity_posterior
        self.upsilon_post = upsilon_posterior

    def advance(self, t: float, s: float) -> None:
        if s <= t:
            return
        if isinstance(self.lam, GammaPosterior):
            self.lam = gamma_advance(self.lam, t, s, self.model)
        else:
            self.lam = scenario_advance(self.lam, t, s, self.model)

    def jump(self, zeta: float) -> None:
        if isinstance(self.lam, GammaPosterior):
            self.lam = gamma_jump(self.lam)
        else:
            self.lam = scenario_jump(self.lam, zeta, self.model)

    def observe_mark(self, u_industry: float) -> None:
        if self.gamma_post is None or self.gamma_post.is_degenerate:
            return
        lik = [hyp.pdf(u_industry) for hyp in self.gamma_post.support]
        self.gamma_post = mark_jump_update(self.gamma_post, lik)

    def observe_coupon_noise(self, eps: float) -> None:
        if self.upsilon_post is None or self.upsilon_post.is_degenerate:
            return
        lik = []
        for atoms, weights in self.upsilon_post.support:
            match = [w for a, w in zip(atoms, weights) if abs(a - eps) < 1e-12]
            lik.append(sum(match))
        self.upsilon_post = mark_jump_update(self.upsilon_post, lik)

    def summary(self) -> np.ndarray:
        if isinstance(self.lam, GammaPosterior):
            return np.array([self.lam.mean, self.lam.sd])
        return self.lam.array.copy()


def _policy_action(policy, t, x1, x2, posterior, book) -> tuple[int, bool]:
    if policy is None:
        return 0, False
    if hasattr(policy, "query_policy"):
        return policy.query_policy(t, x1, x2, posterior, book)
    return int(policy(t, x1, x2, posterior, book)), False


def run_path(
    bundle: ModelBundle,
    layers: LayerSpec,
    truth: ScenarioTruth,
    path_index: int = 0,
    policy=None,
    x0: tuple[float, float] = (0.0, 0.0),
    h_report: Optional[float] = None,
    severity_posterior=None,
    upsilon_posterior=None,
    claim_times: Optional[np.ndarray] = None,
) -> PathRecord:
    """Simulate one path on [0, T] under the queried policy.

    Order at coincident instants: maturity settlements first, then any
    claim, then the policy action, so a settlement can be followed by an
    immediate re-issue at the same lattice time.
    """
    econ = bundle.econ
    rng = path_rng(truth.seed, path_index)
    if claim_times is None:
        claim_times = sample_claims(truth.lambda0, bundle.intensity, econ.T, rng)
    atoms = discretize_severity(bundle.severity)[0] if truth.severity_mode == "atoms" else None

    h_rep = h_report if h_report is not None else (bundle.grid.h_time if bundle.grid else econ.T / 64)
    n_rep = int(round(econ.T / h_rep))
    if abs(n_rep * h_rep - econ.T) > 1e-9:
        raise ValueError("the reporting step must divide the horizon")
    lattice = h_rep * np.arange(n_rep + 1)

    post = _Posterior(bundle, severity_posterior, upsilon_posterior)
    book = BondBook.empty(econ.kappa)
    x1, x2 = float(x0[0]), float(x0[1])
    t = 0.0
    n_issues = 0
    clamped = 0
    events: list[PathEvent] = [PathEvent(t=0.0, kind="start", x1=x1, x2=x2, coupon_total=0.0)]
    samples_t, samples_x1, samples_x2, samples_post, samples_run = [], [], [], [], []
    claim_iter = iter(np.sort(claim_times))
    next_claim = next(claim_iter, None)

    def flow_to(s: float):
        nonlocal x1, x2, t, book
        if s <= t:
            return
        x1 = integrate_cash(x1, t, s - t, book.coupon_total(), econ)
        x2 = decay_penalty(x2, s - t, econ)
        post.advance(t, s)
        book = BondBook(tuple(replace(b, elapsed=b.elapsed + (s - t)) if b else None for b in book.slots))
        t = s

    for i, t_lat in enumerate(lattice):
        # claims strictly inside the previous lattice interval
        while next_claim is not None and next_claim < t_lat:
            zeta = float(next_claim)
            flow_to(zeta)
            u_ind, u_ins = sample_severity(bundle, rng, truth.severity_mode, atoms)
            post.jump(zeta)
            post.observe_mark(u_ind)
            payoff = total_payoff(book, u_ins, zeta, layers)
            new_book, triggered = settle_event(book, u_ins, zeta, layers)
            x1 = x1 - u_ins + payoff
            x2 = x2 + penalty_bump(u_ind, bundle.severity, econ)
            book = new_book
            events.append(
                PathEvent(
                    t=zeta,
                    kind="claim",
                    loss_insurer=u_ins,
                    loss_industry=u_ind,
                    payoff=payoff,
                    layer=len(triggered),
                    x1=x1,
                    x2=x2,
                    coupon_total=book.coupon_total(),
                )
            )
            next_claim = next(claim_iter, None)
        flow_to(float(t_lat))
        # maturity settlements at the lattice instant
        matured = [b for b in book.running if b.elapsed >= econ.ell - 1e-9]
        if matured:
            book = settle_maturity(book, econ.ell)
            for b in matured:
                events.append(
                    PathEvent(
                        t=t,
                        kind="maturity_settlement",
                        layer=b.layer,
                        coupon=b.coupon,
                        x1=x1,
                        x2=x2,
                        coupon_total=book.coupon_total(),
                    )
                )
        # policy action (not at the horizon itself)
        if i < n_rep and policy is not None and not book.is_full:
            action, was_clamped = _policy_action(policy, t, x1, x2, post.lam, book)
            clamped += int(was_clamped)
            if action > 0:
                eps = float(rng.choice(bundle.eps_atoms, p=bundle.eps_weights))
                coup = coupon_rate(action, x2, eps, t, layers)
                x1 -= econ.H0
                book = issue(book, BondSlot(layer=action, coupon=coup))
                post.observe_coupon_noise(eps)
                n_issues += 1
                events.append(
                    PathEvent(
                        t=t,
                        kind="issue",
                        layer=action,
                        coupon=coup,
                        x1=x1,
                        x2=x2,
                        coupon_total=book.coupon_total(),
                    )
                )
        samples_t.append(t)
        samples_x1.append(x1)
        samples_x2.append(x2)
        samples_post.append(post.summary())
        samples_run.append(book.n_running)

    events.append(PathEvent(t=econ.T, kind="end", x1=x1, x2=x2, coupon_total=book.coupon_total()))
    return PathRecord(
        events=events,
        sample_t=np.asarray(samples_t),
        sample_x1=np.asarray(samples_x1),
        sample_x2=np.asarray(samples_x2),
        sample_posterior=np.asarray(samples_post),
        sample_n_running=np.asarray(samples_run, dtype=int),
        final_state=MarketState(x1, x2),
        final_posterior=post.lam,
        final_book=book,
        n_issues=n_issues,
        clamped_queries=clamped,
    )


def verify_cash_identity(record: PathRecord, bundle: ModelBundle) -> float:
    """Largest cash residual when the event log is replayed: premium,
    interest and coupons integrated between events, plus each event's own
    cash delta, must reproduce the logged balances."""
    econ = bundle.econ
    worst = 0.0
    prev = record.events[0]
    for ev in record.events[1:]:
        x1 = integrate_cash(prev.x1, prev.t, ev.t - prev.t, prev.coupon_total, econ)
        if ev.kind == "claim":
            x1 += -ev.loss_insurer + ev.payoff
        elif ev.kind == "issue":
            x1 -= econ.H0
        worst = max(worst, abs(x1 - ev.x1))
        prev = ev
    return worst


@dataclass
class MonteCarloSummary:
    """Cross-path statistics of the terminal state."""

    n_paths: int
    seed: int
    lambda0: float
    final_cash: np.ndarray
    final_utility: np.ndarray
    mean_cash: float
    sd_cash: float
    quantile_half_pct: float
    mean_utility: float
    terminal_posterior: np.ndarray
    total_issues: int
    clamped_queries: int
    paths: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "n_paths": self.n_paths,
            "seed": self.seed,
            "lambda0": self.lambda0,
            "mean_cash": self.mean_cash,
            "sd_cash": self.sd_cash,
            "quantile_0.5pct": self.quantile_half_pct,
            "mean_utility": self.mean_utility,
            "total_issues": self.total_issues,
            "clamped_queries": self.clamped_queries,
        }


def run_monte_carlo(
    bundle: ModelBundle,
    layers: LayerSpec,
    truth: ScenarioTruth,
    policy=None,
    x0: tuple[float, float] = (0.0, 0.0),
    h_report: Optional[float] = None,
    collect_paths: int = 0,
    workers: int = 1,
) -> MonteCarloSummary:
    """Independent seeded paths; aggregation is path-index keyed, so the
    summary is identical for any worker count."""
    args = dict(bundle=bundle, layers=layers, truth=truth, policy=policy, x0=x0, h_report=h_report)
    records: list[Optional[PathRecord]] = [None] * truth.n_paths

    def run_one(i: int) -> PathRecord:
        return run_path(path_index=i, **args)

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            for i, rec in enumerate(ex.map(run_one, range(truth.n_paths), chunksize=64)):
                records[i] = rec
    else:
        for i in range(truth.n_paths):
            records[i] = run_one(i)

    spec = GainSpec.from_econ(bundle.econ)
    cash = np.array([r.final_state.x1 for r in records])
    util = np.array([gain(r.final_state, r.final_book, spec) for r in records])
    post = np.stack([_terminal_posterior_row(r) for r in records])
    return MonteCarloSummary(
        n_paths=truth.n_paths,
        seed=truth.seed,
        lambda0=truth.lambda0,
        final_cash=cash,
        final_utility=util,
        mean_cash=float(cash.mean()),
        sd_cash=float(cash.std(ddof=1)) if truth.n_paths > 1 else 0.0,
        quantile_half_pct=float(np.quantile(cash, 0.005)),
        mean_utility=float(util.mean()),
        terminal_posterior=post,
        total_issues=sum(r.n_issues for r in records),
        clamped_queries=sum(r.clamped_queries for r in records),
        paths=[records[i] for i in range(min(collect_paths, truth.n_paths))],
    )


def _terminal_posterior_row(record: PathRecord) -> np.ndarray:
    p = record.final_posterior
    if isinstance(p, GammaPosterior):
        return np.array([p.mean, p.sd])
    return p.array


def silverman_bandwidth(samples: np.ndarray) -> float:
    n = len(samples)
    sd = float(samples.std(ddof=1)) if n > 1 else 1.0
    iqr = float(np.subtract(*np.percentile(samples, [75, 25])))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * max(spread, 1e-12) * n ** (-0.2)


def kernel_density(samples: np.ndarray, n_grid: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian kernel density with the Silverman bandwidth, for display
    export; quantiles always come from the raw sample."""
    bw = silverman_bandwidth(samples)
    xs = np.linspace(samples.min() - 3 * bw, samples.max() + 3 * bw, n_grid)
    dens = np.zeros(n_grid)
    chunk = 4096
    for start in range(0, len(samples), chunk):
        block = samples[start : start + chunk]
        z = (xs[:, None] - block[None, :]) / bw
        dens += np.exp(-0.5 * z * z).sum(axis=1)
    dens /= len(samples) * bw * math.sqrt(2.0 * math.pi)
    return xs, dens


# ---------------------------------------------------------------------------
# policy from a dump


@dataclass
class PolicyView:
    """Nearest-node policy lookup reconstructed from a CBQV1 dump; the
    query contract matches a live solution's."""

    h_time: float
    n_steps: int
    x1: Axis
    x2: Axis
    p_axis: Optional[Axis]
    simplex: Optional[SimplexGrid]
    r_axis: Axis
    nl: int
    n_layers: int
    prior_kind: str
    policy: list  # [slice][class] int8 arrays

    @classmethod
    def from_dump(cls, data) -> "PolicyView":
        h = data.header
        ax = {a["name"]: a for a in h["axes"]}
        p_axis = None
        simplex = None
        if h["prior_kind"] == "gamma":
            p_axis = Axis("p", ax["p"]["lo"], ax["p"]["step"], ax["p"]["n"])
        else:
            simplex = SimplexGrid(ax["simplex"]["cells"])
        return cls(
            h_time=h["h_time"],
            n_steps=h["n_steps"],
            x1=Axis("x1", ax["x1"]["lo"], ax["x1"]["step"], ax["x1"]["n"]),
            x2=Axis("x2", ax["x2"]["lo"], ax["x2"]["step"], ax["x2"]["n"]),
            p_axis=p_axis,
            simplex=simplex,
            r_axis=Axis("r", ax["r"]["lo"], ax["r"]["step"], ax["r"]["n"]),
            nl=h["nl"],
            n_layers=h["n_layers"],
            prior_kind=h["prior_kind"],
            policy=data.policy,
        )

    def query_policy(self, t: float, x1: float, x2: float, posterior, book: BondBook):
        from .bonds import canonicalize

        i = min(max(int(round(t / self.h_time)), 0), self.n_steps)
        book = canonicalize(book)
        clamped = not (self.x1.contains(x1) and self.x2.contains(x2))
        m = book.n_running
        arr = self.policy[i][m]
        idx = [self.x1.nearest(x1), self.x2.nearest(x2)]
        if self.prior_kind == "gamma":
            idx.append(self.p_axis.nearest(posterior.alpha))
            clamped |= not self.p_axis.contains(posterior.alpha)
        else:
            w = posterior.array
            idx3, w3 = self.simplex.locate(w[0], w[1])
            flat = int(idx3[0, int(np.argmax(w3[0]))])
            idx.extend([flat // self.simplex.side, flat % self.simplex.side])
        for s in book.running:
            l_idx = min(max(int(round(s.elapsed / self.h_time)), 0), self.nl - 1)
            idx.extend([s.layer - 1, self.r_axis.nearest(s.coupon), l_idx])
            clamped |= s.coupon > self.r_axis.hi + 1e-9
        return int(arr[tuple(idx)]), clamped


# ---------------------------------------------------------------------------
# CSV/JSON export helpers


def write_event_log(path, record: PathRecord) -> None:
    cols = [
        "t",
        "kind",
        "loss_insurer",
        "loss_industry",
        "payoff",
        "layer",
        "coupon",
        "x1",
        "x2",
        "coupon_total",
    ]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for e in record.events:
            w.writerow(
                [
                    repr(e.t),
                    e.kind,
                    repr(e.loss_insurer),
                    repr(e.loss_industry),
                    repr(e.payoff),
                    e.layer,
                    repr(e.coupon),
                    repr(e.x1),
                    repr(e.x2),
                    repr(e.coupon_total),
                ]
            )


def write_density_csv(path, samples: np.ndarray) -> None:
    xs, dens = kernel_density(samples)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "density"])
        for x, d in zip(xs, dens):
            w.writerow([repr(float(x)), repr(float(d))])


def write_summary_json(path, summary: MonteCarloSummary, extra: Optional[dict] = None) -> None:
    payload = summary.to_json_dict()
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
