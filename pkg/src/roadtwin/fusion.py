"""Hierarchical track-to-track fusion into the digital twin.

Level one runs at each measurement point: the confirmed tracks of its
sensors are folded together, in a fixed sensor order, into vehicle
tracklets.  Level two runs on the backend: tracklets from all
measurement points are folded the same way and matched against the
table of globally identified tracks, which are fused by covariance
intersection and keep their identifier for as long as they live.

Covariance intersection is used everywhere two estimates with unknown
cross-correlation meet.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.optimize import linear_sum_assignment

from .gaussians import Gaussian, det_inv_2x2, spd_inverse, symmetrize
from .tracker import TRACK_CONFIRMED, cv_process_noise, cv_transition

_UNGATED = 1e9

# typical half length per class: the camera anchor sits on the near face,
# so two views of one vehicle can disagree by its full length
HALF_LENGTH = {"car": 2.3, "truck": 6.0, "bus": 6.5, "motorcycle": 1.1}


def anchor_slack(vclass, cfg: "FusionConfig") -> tuple:
    # one view anchors anywhere on the near face, the other on the far
    # face, so the per-side spread grows with half the extra length
    scale = 0.5 + 0.5 * HALF_LENGTH.get(vclass, 2.3) / 2.3
    return (cfg.assoc_slack[0] * scale, cfg.assoc_slack[1])


@dataclass(frozen=True)
class FusionConfig:
    gate: float = 9.21  # squared Mahalanobis on the position block (chi^2 99%, 2 dof)
    omega_policy: str = "detmin"  # "detmin" | "fixed"
    fixed_omega: float = 0.5
    handover_persistence: int = 2  # consecutive frames before a new global id opens
    # a fused track coasts long enough to bridge the sensing gap under a
    # gantry (~16 m at highway speed) before its id expires
    miss_limit: int = 6
    sigma_accel: float = 2.0
    # per-axis std (m) added to both sides of the association metric only:
    # camera tracks are anchored to the vehicle's near face, so estimates of
    # one vehicle from opposite viewing directions disagree by up to a
    # vehicle length while their filtered covariances stay much tighter
    assoc_slack: tuple = (2.3, 0.3)
    velocity_gate: float = 15.0  # m/s; opposing traffic must never associate
    velocity_credible_std: float = 6.0  # gate only tracks with settled velocity

    def validate(self):
        if self.gate <= 0:
            raise ValueError("gate must be positive")
        if self.omega_policy not in ("detmin", "fixed"):
            raise ValueError(f"unknown omega policy {self.omega_policy!r}")
        if not 0.0 <= self.fixed_omega <= 1.0:
            raise ValueError("fixed_omega must be in [0, 1]")
        if self.handover_persistence < 1 or self.miss_limit < 1:
            raise ValueError("persistence and miss limit must be >= 1")
        if len(self.assoc_slack) != 2 or min(self.assoc_slack) < 0:
            raise ValueError("assoc_slack must be two non-negative stds")


def gci_fuse(a: Gaussian, b: Gaussian, omega: float) -> Gaussian:
    """Covariance intersection: convex combination of information matrices."""
    if not 0.0 <= omega <= 1.0:
        raise ValueError("omega must be in [0, 1]")
    info_a = spd_inverse(np.asarray(a.cov, dtype=float))
    info_b = spd_inverse(np.asarray(b.cov, dtype=float))
    info = omega * info_a + (1.0 - omega) * info_b
    cov = spd_inverse(info)
    mean = cov @ (omega * info_a @ np.asarray(a.mean, dtype=float)
                  + (1.0 - omega) * info_b @ np.asarray(b.mean, dtype=float))
    return Gaussian(mean, symmetrize(cov))


def optimize_omega(a: Gaussian, b: Gaussian) -> float:
    """Weight minimizing det of the fused covariance over [0, 1].

    With generalized eigenvalues I_a v = lam I_b v, the fused information
    determinant is det(I_b) * prod(omega*lam_i + 1 - omega), whose log is
    concave in omega, so the stationary point is found by bisection on
    the monotone derivative.  Symmetric inputs tie-break to 0.5.
    """
    info_a = spd_inverse(np.asarray(a.cov, dtype=float))
    info_b = spd_inverse(np.asarray(b.cov, dtype=float))
    lam = linalg.eigh(info_a, info_b, eigvals_only=True)
    delta = lam - 1.0
    if np.max(np.abs(delta)) < 1e-12:
        return 0.5  # identical information: any omega ties

    def slope(w: float) -> float:
        return float(np.sum(delta / (w * delta + 1.0)))

    if slope(0.0) <= 0.0:
        return 0.0
    if slope(1.0) >= 0.0:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if slope(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _pick_omega(a: Gaussian, b: Gaussian, cfg: FusionConfig) -> float:
    if cfg.omega_policy == "fixed":
        return cfg.fixed_omega
    return optimize_omega(a, b)


def associate_tracks(means_a, covs_a, means_b, covs_b, gate: float,
                     slack=(0.0, 0.0), velocity_gate: float | None = None,
                     velocity_credible_std: float = 6.0,
                     slack_a=None, slack_b=None):
    """Optimal one-to-one assignment under summed squared Mahalanobis
    distance on the position block; pairs beyond the gate are rejected
    after the assignment.

    `slack` adds per-axis variance to both sides of the metric without
    touching the estimates themselves; `slack_a`/`slack_b` override it
    with per-item values (longer vehicles carry a larger anchor spread).
    `velocity_gate` forbids pairs whose velocities differ by more than
    the given speed, but only between tracks whose own velocity
    estimates have settled (std below `velocity_credible_std`); fresh
    births carry meaningless finite-difference velocities and must stay
    associable.
    """
    na, nb = len(means_a), len(means_b)
    if na == 0 or nb == 0:
        return [], list(range(na)), list(range(nb))
    full_a = np.asarray(means_a, dtype=float)
    full_b = np.asarray(means_b, dtype=float)
    ca = np.asarray(covs_a, dtype=float)
    cb = np.asarray(covs_b, dtype=float)
    ma, mb = full_a[:, :2], full_b[:, :2]
    sa = np.broadcast_to(np.asarray(slack_a if slack_a is not None else slack,
                                    dtype=float), (na, 2))
    sb = np.broadcast_to(np.asarray(slack_b if slack_b is not None else slack,
                                    dtype=float), (nb, 2))
    slack_cov = np.zeros((na, nb, 2, 2))
    slack_cov[..., 0, 0] = sa[:, None, 0] ** 2 + sb[None, :, 0] ** 2
    slack_cov[..., 1, 1] = sa[:, None, 1] ** 2 + sb[None, :, 1] ** 2
    s = ca[:, None, :2, :2] + cb[None, :, :2, :2] + slack_cov
    _, s_inv = det_inv_2x2(s)
    diff = ma[:, None, :] - mb[None, :, :]
    cost = np.einsum("abc,abcd,abd->ab", diff, s_inv, diff)
    cost = np.where(cost <= gate, cost, _UNGATED)
    if (velocity_gate is not None and full_a.shape[1] >= 4
            and full_b.shape[1] >= 4 and ca.shape[1] >= 4):
        dv = np.linalg.norm(full_a[:, None, 2:4] - full_b[None, :, 2:4], axis=-1)
        credible_a = np.sqrt(ca[:, 2, 2] + ca[:, 3, 3]) < velocity_credible_std
        credible_b = np.sqrt(cb[:, 2, 2] + cb[:, 3, 3]) < velocity_credible_std
        enforce = credible_a[:, None] & credible_b[None, :]
        cost = np.where(~enforce | (dv <= velocity_gate), cost, _UNGATED)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if cost[r, c] < _UNGATED]
    matched_a = {r for r, _ in pairs}
    matched_b = {c for _, c in pairs}
    return (pairs,
            [i for i in range(na) if i not in matched_a],
            [i for i in range(nb) if i not in matched_b])


def extrapolate(state: np.ndarray, cov: np.ndarray, dt: float,
                sigma_accel: float) -> Gaussian:
    """Constant-velocity time alignment shared by both fusion levels."""
    if dt == 0.0:
        return Gaussian(state.copy(), cov.copy())
    f = cv_transition(dt)
    return Gaussian(f @ state,
                    symmetrize(f @ cov @ f.T + cv_process_noise(abs(dt), sigma_accel)))


@dataclass
class _Cluster:
    state: np.ndarray
    cov: np.ndarray
    votes: Counter
    members: int = 1


def _fold_groups(groups: list, cfg: FusionConfig) -> list:
    """Fold ordered groups of (state, cov, vclass) estimates into clusters:
    Hungarian association against the running clusters, then covariance
    intersection for the matched pairs."""
    clusters: list[_Cluster] = []
    for group in groups:
        if not group:
            continue
        if not clusters:
            for state, cov, vclass in group:
                clusters.append(_Cluster(state.copy(), cov.copy(),
                                         Counter() if vclass is None else Counter([vclass])))
            continue
        means_a = [c.state for c in clusters]
        covs_a = [c.cov for c in clusters]
        means_b = [e[0] for e in group]
        covs_b = [e[1] for e in group]
        pairs, _, unmatched_b = associate_tracks(
            means_a, covs_a, means_b, covs_b, cfg.gate, cfg.assoc_slack,
            cfg.velocity_gate, cfg.velocity_credible_std,
            slack_a=[anchor_slack(_majority(c.votes), cfg) for c in clusters],
            slack_b=[anchor_slack(e[2], cfg) for e in group])
        for r, c in pairs:
            cluster = clusters[r]
            a = Gaussian(cluster.state, cluster.cov)
            b = Gaussian(group[c][0], group[c][1])
            fused = gci_fuse(a, b, _pick_omega(a, b, cfg))
            cluster.state, cluster.cov = fused.mean, fused.cov
            cluster.members += 1
            if group[c][2] is not None:
                cluster.votes[group[c][2]] += 1
        for c in unmatched_b:
            state, cov, vclass = group[c]
            clusters.append(_Cluster(state.copy(), cov.copy(),
                                     Counter() if vclass is None else Counter([vclass])))
    return clusters


def _majority(votes: Counter) -> str | None:
    return votes.most_common(1)[0][0] if votes else None


@dataclass(frozen=True)
class Tracklet:
    """A locally fused, confirmed track produced by one measurement point."""

    mp_id: int
    state: np.ndarray
    cov: np.ndarray
    vclass: str | None
    t: float
    members: int = 1


def fuse_measurement_point(mp_id: int, sensor_tracks: dict, t: float,
                           cfg: FusionConfig) -> list:
    """Fold the confirmed tracks of one measurement point's sensors
    (visited in sensor-id order) into tracklets; singletons pass through."""
    groups = []
    for sensor_id in sorted(sensor_tracks):
        group = []
        for track in sensor_tracks[sensor_id]:
            if track.status != TRACK_CONFIRMED:
                continue
            est = extrapolate(track.state, track.cov, t - track.last_t, cfg.sigma_accel)
            group.append((est.mean, est.cov, track.vclass))
        groups.append(group)
    clusters = _fold_groups(groups, cfg)
    return [Tracklet(mp_id, c.state, c.cov, _majority(c.votes), t, c.members)
            for c in clusters]


@dataclass
class FusedTrack:
    gid: int
    state: np.ndarray
    cov: np.ndarray
    votes: Counter
    contributors: set
    last_t: float
    misses: int = 0

    @property
    def vclass(self) -> str | None:
        return _majority(self.votes)


@dataclass(frozen=True)
class TwinObject:
    gid: int
    state: np.ndarray
    cov: np.ndarray
    vclass: str | None


@dataclass(frozen=True)
class DigitalTwinFrame:
    t: float
    tracks: tuple

    def ids(self):
        return [tr.gid for tr in self.tracks]


@dataclass
class _Pending:
    state: np.ndarray
    cov: np.ndarray
    votes: Counter
    mp_ids: set
    count: int = 1


class BackendFuser:
    """Second-level fusion: keeps the global track table and produces one
    DigitalTwinFrame per tick.  Global ids are never reused."""

    def __init__(self, cfg: FusionConfig):
        cfg.validate()
        self.cfg = cfg
        self.tracks: dict[int, FusedTrack] = {}
        self.pending: list[_Pending] = []
        self._next_gid = 0
        self._last_t: float | None = None

    def step(self, t: float, tracklets: list) -> DigitalTwinFrame:
        cfg = self.cfg
        dt = 0.0 if self._last_t is None else t - self._last_t
        self._last_t = t

        for track in self.tracks.values():
            est = extrapolate(track.state, track.cov, dt, cfg.sigma_accel)
            track.state, track.cov = est.mean, est.cov

        # consolidate the batch so one vehicle seen by several measurement
        # points yields a single candidate for the table
        by_mp: dict[int, list] = {}
        for tr in tracklets:
            by_mp.setdefault(tr.mp_id, []).append(tr)
        groups = [[(tr.state, tr.cov, tr.vclass) for tr in by_mp[mp]]
                  for mp in sorted(by_mp)]
        mp_sets = []
        clusters = _fold_groups(groups, cfg)
        for cluster in clusters:
            mp_sets.append(set())
        # recover contributing measurement points per cluster by position
        for tr in tracklets:
            if not clusters:
                break
            dists = [float(np.linalg.norm(c.state[:2] - tr.state[:2])) for c in clusters]
            mp_sets[int(np.argmin(dists))].add(tr.mp_id)

        gids = sorted(self.tracks)
        means_a = [self.tracks[g].state for g in gids]
        covs_a = [self.tracks[g].cov for g in gids]
        means_b = [c.state for c in clusters]
        covs_b = [c.cov for c in clusters]
        pairs, unmatched_a, unmatched_b = associate_tracks(
            means_a, covs_a, means_b, covs_b, cfg.gate, cfg.assoc_slack,
            cfg.velocity_gate, cfg.velocity_credible_std,
            slack_a=[anchor_slack(self.tracks[g].vclass, cfg) for g in gids],
            slack_b=[anchor_slack(_majority(c.votes), cfg) for c in clusters])

        for r, c in pairs:
            track = self.tracks[gids[r]]
            a = Gaussian(track.state, track.cov)
            b = Gaussian(clusters[c].state, clusters[c].cov)
            fused = gci_fuse(a, b, _pick_omega(a, b, cfg))
            track.state, track.cov = fused.mean, fused.cov
            track.votes.update(clusters[c].votes)
            track.contributors |= mp_sets[c]
            track.misses = 0
            track.last_t = t

        for r in unmatched_a:
            track = self.tracks[gids[r]]
            track.misses += 1
            if track.misses >= cfg.miss_limit:
                del self.tracks[gids[r]]

        # unmatched clusters must persist before opening a global id
        leftovers = [clusters[c] for c in unmatched_b]
        mp_left = [mp_sets[c] for c in unmatched_b]
        new_pending: list[_Pending] = []
        if self.pending and leftovers:
            p_pairs, _, p_unmatched = associate_tracks(
                [p.state for p in self.pending], [p.cov for p in self.pending],
                [c.state for c in leftovers], [c.cov for c in leftovers],
                cfg.gate, cfg.assoc_slack, cfg.velocity_gate,
                cfg.velocity_credible_std,
                slack_a=[anchor_slack(_majority(p.votes), cfg) for p in self.pending],
                slack_b=[anchor_slack(_majority(c.votes), cfg) for c in leftovers])
            for r, c in p_pairs:
                pend = self.pending[r]
                pend.state, pend.cov = leftovers[c].state, leftovers[c].cov
                pend.votes.update(leftovers[c].votes)
                pend.mp_ids |= mp_left[c]
                pend.count += 1
                new_pending.append(pend)
            fresh = p_unmatched
        else:
            fresh = list(range(len(leftovers)))
        for c in fresh:
            new_pending.append(_Pending(leftovers[c].state, leftovers[c].cov,
                                        Counter(leftovers[c].votes), set(mp_left[c])))
        self.pending = []
        for pend in new_pending:
            if pend.count >= cfg.handover_persistence:
                gid = self._next_gid
                self._next_gid += 1
                self.tracks[gid] = FusedTrack(gid, pend.state.copy(), pend.cov.copy(),
                                              Counter(pend.votes), set(pend.mp_ids), t)
            else:
                self.pending.append(pend)

        objects = tuple(TwinObject(g, self.tracks[g].state.copy(),
                                   self.tracks[g].cov.copy(), self.tracks[g].vclass)
                        for g in sorted(self.tracks))
        return DigitalTwinFrame(t, objects)
