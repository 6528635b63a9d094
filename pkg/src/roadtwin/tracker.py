"""Labeled GM-PHD filter over a constant-velocity state (x, y, vx, vy).

One tracker instance runs per sensor and is strictly sequential in time;
instances share nothing.  The intensity is a weighted Gaussian mixture
whose components carry track labels; new labels are spawned only through
the two-consecutive-detection birth rule, and measurement-updated
components inherit their parent's label.

Per-frame processing order: predict, inject births built from the
previous frame's candidates, update against all measurements, prune and
merge, extract tracks.  Injecting births before the update lets the
second detection of a pair both initialize the component's velocity and
immediately raise its weight past the extraction threshold.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .gaussians import NonPositiveDefinite, det_inv_2x2, moment_match
from .sensing import MeasurementFrame, SensorSpec, clutter_density

STATE_DIM = 4
TRACK_TENTATIVE = "tentative"
TRACK_CONFIRMED = "confirmed"
TRACK_DEAD = "dead"


def cv_transition(dt: float) -> np.ndarray:
    f = np.eye(4)
    f[0, 2] = dt
    f[1, 3] = dt
    return f


def cv_process_noise(dt: float, sigma_a: float) -> np.ndarray:
    """Discrete white-noise-acceleration covariance, per axis."""
    q = np.zeros((4, 4))
    a, b, c = dt ** 4 / 4.0, dt ** 3 / 2.0, dt ** 2
    for pos, vel in ((0, 2), (1, 3)):
        q[pos, pos] = a
        q[pos, vel] = q[vel, pos] = b
        q[vel, vel] = c
    return q * sigma_a ** 2


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: np.ndarray
    cov: np.ndarray
    label: int
    age: int = 0

    def __post_init__(self):
        if not np.isfinite(self.weight):
            raise ValueError("non-finite weight")
        if np.max(np.abs(self.cov - self.cov.T)) > 1e-9:
            raise ValueError("covariance not symmetric")


@dataclass
class Intensity:
    """Mixture stored as parallel arrays for vectorized recursion."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    labels: np.ndarray
    ages: np.ndarray
    t: float = 0.0

    @classmethod
    def empty(cls, t: float = 0.0) -> "Intensity":
        return cls(np.zeros(0), np.zeros((0, STATE_DIM)),
                   np.zeros((0, STATE_DIM, STATE_DIM)),
                   np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), t)

    @classmethod
    def from_components(cls, comps, t: float = 0.0) -> "Intensity":
        if not comps:
            return cls.empty(t)
        return cls(np.array([c.weight for c in comps], dtype=float),
                   np.array([c.mean for c in comps], dtype=float),
                   np.array([c.cov for c in comps], dtype=float),
                   np.array([c.label for c in comps], dtype=np.int64),
                   np.array([c.age for c in comps], dtype=np.int64), t)

    def components(self) -> list:
        return [GaussianComponent(float(self.weights[j]), self.means[j].copy(),
                                  self.covs[j].copy(), int(self.labels[j]),
                                  int(self.ages[j]))
                for j in range(len(self.weights))]

    def total_mass(self) -> float:
        return float(self.weights.sum())

    def __len__(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class BirthCandidate:
    position: np.ndarray
    t: float
    vclass: str | None = None


@dataclass(frozen=True)
class TrackerConfig:
    p_survival: float = 0.99
    p_detect: float = 0.97
    kappa: float = 1e-6  # clutter intensity in measurement space
    sigma_accel: float = 2.0  # m/s^2
    prune_threshold: float = 1e-5
    merge_threshold: float = 4.0  # squared Mahalanobis
    max_components: int = 300
    extract_threshold: float = 0.5
    birth_weight: float = 0.25
    birth_pos_std: float = 0.75
    birth_vel_std: float = 10.0
    confirm_hits: int = 2
    miss_limit: int = 3
    birth_gate: float = 9.21  # chi^2 99%, 2 dof: measurement explained by a component
    birth_speed_max: float = 38.0  # candidate pairing reach is this * dt plus the margin
    birth_gate_margin: float = 5.0
    # traffic moves along x, so a candidate pair may stretch longitudinally
    # but barely laterally; this kills adjacent-lane pairings at startup
    birth_lateral_margin: float = 2.5
    update_gate: float = 25.0  # squared Mahalanobis beyond which children are dropped
    meas_noise_floor: tuple = (2.0, 0.35)
    range_dependent_noise: bool = True

    def validate(self):
        if not (0.0 < self.p_survival <= 1.0 and 0.0 < self.p_detect <= 1.0):
            raise ValueError("p_survival and p_detect must be in (0, 1]")
        for name in ("kappa", "prune_threshold", "merge_threshold",
                     "extract_threshold", "birth_weight", "update_gate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.max_components < 1 or self.confirm_hits < 1 or self.miss_limit < 1:
            raise ValueError("count thresholds must be >= 1")


class ObservationModel:
    """Linear observation z = H x + v with per-measurement covariance.

    Cameras observe position only (2x4 H); radars observe the full state.
    Camera noise grows quadratically with ground range along the viewing
    ray, reflecting how the box-bottom ray flattens against the road far
    from the sensor.
    """

    def __init__(self, h: np.ndarray, base_noise: np.ndarray,
                 origin: np.ndarray | None = None,
                 range_coeff: float = 0.0, lateral_coeff: float = 0.0):
        self.h = np.asarray(h, dtype=float)
        self.base_noise = np.asarray(base_noise, dtype=float)
        self.origin = None if origin is None else np.asarray(origin, dtype=float)
        self.range_coeff = range_coeff
        self.lateral_coeff = lateral_coeff

    @property
    def dim(self) -> int:
        return self.h.shape[0]

    def noise(self, z: np.ndarray) -> np.ndarray:
        if self.origin is None or self.range_coeff == 0.0:
            return self.base_noise
        rel = np.asarray(z)[:2] - self.origin
        dist = float(np.linalg.norm(rel))
        if dist < 1e-6:
            return self.base_noise
        e_r = rel / dist
        e_t = np.array([-e_r[1], e_r[0]])
        sig_long = self.range_coeff * dist ** 2
        sig_lat = self.lateral_coeff * dist
        geom = sig_long ** 2 * np.outer(e_r, e_r) + sig_lat ** 2 * np.outer(e_t, e_t)
        return self.base_noise + geom

    def noise_batch(self, zs: np.ndarray) -> np.ndarray:
        return np.array([self.noise(z) for z in zs])


def camera_observation_model(spec: SensorSpec, cfg: TrackerConfig) -> ObservationModel:
    h = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    base = np.diag(np.asarray(cfg.meas_noise_floor[:2], dtype=float) ** 2)
    if not cfg.range_dependent_noise:
        return ObservationModel(h, base)
    cam = spec.camera
    height = max(cam.pose.translation[2], 0.1)
    range_coeff = spec.pixel_noise / (height * cam.fy)
    lateral_coeff = spec.pixel_noise / cam.fx
    return ObservationModel(h, base, origin=spec.ground_position(),
                            range_coeff=range_coeff, lateral_coeff=lateral_coeff)


def radar_observation_model(spec: SensorSpec, cfg: TrackerConfig) -> ObservationModel:
    floor = np.asarray(cfg.meas_noise_floor, dtype=float)
    if floor.shape != (4,):
        floor = np.array([spec.pos_noise, spec.pos_noise_lateral,
                          spec.vel_noise, spec.vel_noise])
    return ObservationModel(np.eye(4), np.diag(floor ** 2))


def observation_model_for(spec: SensorSpec, cfg: TrackerConfig) -> ObservationModel:
    if spec.kind == "camera":
        return camera_observation_model(spec, cfg)
    return radar_observation_model(spec, cfg)


def tracker_config_for(spec: SensorSpec, base: TrackerConfig) -> TrackerConfig:
    """Bind the sensor's detection probability and clutter density."""
    return replace(base, p_detect=spec.p_detect, kappa=clutter_density(spec))


# -- recursion steps -----------------------------------------------------

def predict(intensity: Intensity, dt: float, cfg: TrackerConfig) -> Intensity:
    """Survival thinning plus constant-velocity displacement."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if len(intensity) == 0:
        return Intensity.empty(intensity.t + dt)
    f = cv_transition(dt)
    q = cv_process_noise(dt, cfg.sigma_accel)
    covs = np.einsum("ab,jbc,dc->jad", f, intensity.covs, f) + q
    return Intensity(intensity.weights * cfg.p_survival,
                     intensity.means @ f.T,
                     0.5 * (covs + covs.transpose(0, 2, 1)),
                     intensity.labels.copy(), intensity.ages + 1,
                     intensity.t + dt)


def update(intensity: Intensity, frame: MeasurementFrame,
           obs_model: ObservationModel, cfg: TrackerConfig) -> Intensity:
    """GM-PHD measurement update.

    Output holds a (1 - p_D)-weighted missed copy of every component plus
    Kalman-updated children for each gated component/measurement pair,
    normalized per measurement against the clutter intensity.
    """
    t = frame.t
    j = len(intensity)
    zs = np.asarray(frame.z, dtype=float).reshape(len(frame.z), obs_model.dim)
    missed = Intensity(intensity.weights * (1.0 - cfg.p_detect),
                       intensity.means.copy(), intensity.covs.copy(),
                       intensity.labels.copy(), intensity.ages.copy(), t)
    if j == 0 or len(zs) == 0:
        return missed

    h = obs_model.h
    d = obs_model.dim
    z_pred = intensity.means @ h.T  # (J, d)
    hph = np.einsum("ab,jbc,dc->jad", h, intensity.covs, h)  # (J, d, d)
    innov = zs[None, :, :] - z_pred[:, None, :]  # (J, Z, d)

    if d == 2:
        noise = obs_model.noise_batch(zs)  # (Z, 2, 2)
        s = hph[:, None] + noise[None]  # (J, Z, 2, 2)
        det, s_inv = det_inv_2x2(s)
        m2 = np.einsum("jza,jzab,jzb->jz", innov, s_inv, innov)
        log_norm = -0.5 * (m2 + np.log(det)) - math.log(2.0 * math.pi)
    else:
        noise = obs_model.noise(zs[0])
        s = hph + noise[None]  # (J, d, d)
        det = np.linalg.det(s)
        if np.any(det <= 0):
            raise NonPositiveDefinite("innovation covariance not positive definite")
        s_inv = np.linalg.inv(s)
        m2 = np.einsum("jza,jab,jzb->jz", innov, s_inv, innov)
        log_norm = -0.5 * (m2 + np.log(det)[:, None]) - 0.5 * d * math.log(2.0 * math.pi)

    likelihood = cfg.p_detect * intensity.weights[:, None] * np.exp(log_norm)
    gated = m2 <= cfg.update_gate
    likelihood = np.where(gated, likelihood, 0.0)
    denom = cfg.kappa + likelihood.sum(axis=0)  # (Z,)

    pairs = np.argwhere(gated)
    if len(pairs) == 0:
        return missed
    pj, pz = pairs[:, 0], pairs[:, 1]
    w_children = likelihood[pj, pz] / denom[pz]

    pht = np.einsum("jab,cb->jac", intensity.covs, h)  # (J, 4, d)
    if d == 2:
        gain = np.einsum("pac,pcb->pab", pht[pj], s_inv[pj, pz])  # (P, 4, 2)
    else:
        gain = np.einsum("pac,pcb->pab", pht[pj], s_inv[pj])
    means = intensity.means[pj] + np.einsum("pab,pb->pa", gain, innov[pj, pz])
    covs = intensity.covs[pj] - np.einsum("pab,pbc->pac", gain,
                                          np.einsum("ab,pbc->pac", h, intensity.covs[pj]))
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))

    return Intensity(np.concatenate([missed.weights, w_children]),
                     np.vstack([missed.means, means]),
                     np.concatenate([missed.covs, covs]),
                     np.concatenate([missed.labels, intensity.labels[pj]]),
                     np.concatenate([missed.ages, intensity.ages[pj]]), t)


def birth_step(candidates: list, frame: MeasurementFrame, intensity: Intensity,
               cfg: TrackerConfig, label_start: int,
               obs_model: ObservationModel | None = None):
    """Two-consecutive-detection births.

    Measurements not explained by the current intensity either pair with a
    previous-frame candidate (spawning a component at the new measurement
    with finite-difference velocity) or become candidates themselves.
    Candidates expire after one frame.  When the observation model is
    supplied, the birth covariance widens with the local measurement
    noise, since a velocity differenced from two noisy far-range fixes is
    itself noisy.
    """
    t = frame.t
    positions = [np.asarray(z, dtype=float)[:2] for z in frame.z]
    classes = list(frame.classes) if frame.classes else [None] * len(positions)

    explained = np.zeros(len(positions), dtype=bool)
    if len(intensity) > 0 and positions:
        if obs_model is not None:
            r_pos = np.array([obs_model.noise(z)[:2, :2] for z in frame.z])
        else:
            r_pos = np.broadcast_to((cfg.birth_pos_std ** 2) * np.eye(2),
                                    (len(positions), 2, 2))
        pos_cov = intensity.covs[:, None, :2, :2] + r_pos[None, :]
        det, inv = det_inv_2x2(pos_cov)
        diffs = np.asarray(positions)[None, :, :] - intensity.means[:, None, :2]
        m2 = np.einsum("jza,jzab,jzb->jz", diffs, inv, diffs)
        explained = m2.min(axis=0) <= cfg.birth_gate

    births = []
    new_candidates = []
    used = [False] * len(candidates)
    next_label = label_start
    for i, pos in enumerate(positions):
        if explained[i]:
            continue
        best, best_dist = None, np.inf
        for k, cand in enumerate(candidates):
            if used[k]:
                continue
            dt = t - cand.t
            if dt <= 0:
                continue
            delta = pos - cand.position
            if abs(delta[0]) > cfg.birth_speed_max * dt + cfg.birth_gate_margin:
                continue
            if abs(delta[1]) > cfg.birth_lateral_margin:
                continue
            dist = float(np.linalg.norm(delta))
            if dist < best_dist:
                best, best_dist = k, dist
        if best is None:
            new_candidates.append(BirthCandidate(pos.copy(), t, classes[i]))
            continue
        used[best] = True
        cand = candidates[best]
        dt = t - cand.t
        velocity = (pos - cand.position) / dt
        mean = np.concatenate([pos, velocity])
        pos_var = np.full(2, cfg.birth_pos_std ** 2)
        vel_var = np.full(2, cfg.birth_vel_std ** 2)
        if obs_model is not None:
            r_pos = np.diag(obs_model.noise(frame.z[i]))[:2]
            pos_var = np.maximum(pos_var, r_pos)
            vel_var = np.maximum(vel_var, 2.0 * r_pos / dt ** 2)
        cov = np.diag(np.concatenate([pos_var, vel_var]))
        births.append(GaussianComponent(cfg.birth_weight, mean, cov, next_label))
        next_label += 1
    return Intensity.from_components(births, t), new_candidates


def merge_intensities(a: Intensity, b: Intensity) -> Intensity:
    return Intensity(np.concatenate([a.weights, b.weights]),
                     np.vstack([a.means, b.means]) if len(a) + len(b) else a.means,
                     np.concatenate([a.covs, b.covs]),
                     np.concatenate([a.labels, b.labels]),
                     np.concatenate([a.ages, b.ages]), max(a.t, b.t))


def prune_and_merge(intensity: Intensity, cfg: TrackerConfig) -> Intensity:
    """Drop light components, greedily merge near-coincident ones
    (moment-preserving), and cap the component count."""
    keep = intensity.weights >= cfg.prune_threshold
    w, m = intensity.weights[keep], intensity.means[keep]
    p, lab, age = intensity.covs[keep], intensity.labels[keep], intensity.ages[keep]
    if len(w) == 0:
        return Intensity.empty(intensity.t)

    inv = np.linalg.inv(p)
    order_alive = np.ones(len(w), dtype=bool)
    out_w, out_m, out_p, out_lab, out_age = [], [], [], [], []
    while np.any(order_alive):
        alive_idx = np.flatnonzero(order_alive)
        pivot = alive_idx[np.argmax(w[alive_idx])]
        diff = m[alive_idx] - m[pivot]
        m2 = np.einsum("ka,kab,kb->k", diff, inv[alive_idx], diff)
        group = alive_idx[m2 <= cfg.merge_threshold]
        if len(group) == 1:
            out_w.append(w[pivot])
            out_m.append(m[pivot])
            out_p.append(p[pivot])
        else:
            merged = moment_match(w[group], m[group], p[group])
            out_w.append(w[group].sum())
            out_m.append(merged.mean)
            out_p.append(merged.cov)
        out_lab.append(lab[pivot])
        out_age.append(age[group].max() if len(group) > 1 else age[pivot])
        order_alive[group] = False

    out = Intensity(np.asarray(out_w), np.asarray(out_m), np.asarray(out_p),
                    np.asarray(out_lab, dtype=np.int64),
                    np.asarray(out_age, dtype=np.int64), intensity.t)
    if len(out) > cfg.max_components:
        top = np.argsort(out.weights)[::-1][:cfg.max_components]
        top = np.sort(top)  # preserve original ordering for determinism
        out = Intensity(out.weights[top], out.means[top], out.covs[top],
                        out.labels[top], out.ages[top], out.t)
    return out


# -- track management ----------------------------------------------------

@dataclass
class Track:
    label: int
    state: np.ndarray
    cov: np.ndarray
    status: str
    vclass: str | None
    last_t: float
    hits: int = 0
    misses: int = 0


class PhdTracker:
    """GM-PHD filter plus label-level track management for one sensor."""

    def __init__(self, sensor_id: str, obs_model: ObservationModel,
                 cfg: TrackerConfig):
        cfg.validate()
        self.sensor_id = sensor_id
        self.obs_model = obs_model
        self.cfg = cfg
        self.intensity = Intensity.empty()
        self.candidates: list[BirthCandidate] = []
        self.tracks: dict[int, Track] = {}
        self.class_votes: dict[int, Counter] = {}
        self.dead_labels: set[int] = set()
        self._next_label = 0
        self._started = False

    def _fresh_label(self) -> int:
        label = self._next_label
        self._next_label += 1
        return label

    def process(self, frame: MeasurementFrame) -> list:
        cfg = self.cfg
        if self._started and frame.t > self.intensity.t:
            self.intensity = predict(self.intensity, frame.t - self.intensity.t, cfg)
        else:
            self.intensity.t = frame.t
        self._started = True

        births, self.candidates = birth_step(
            self.candidates, frame, self.intensity, cfg, self._next_label,
            self.obs_model)
        self._next_label += len(births)
        self.intensity = merge_intensities(self.intensity, births)
        self.intensity = update(self.intensity, frame, self.obs_model, cfg)
        self.intensity = prune_and_merge(self.intensity, cfg)
        return self.extract_tracks(frame)

    def extract_tracks(self, frame: MeasurementFrame) -> list:
        """Threshold extraction per label plus hit/miss bookkeeping."""
        cfg = self.cfg
        t = frame.t
        best: dict[int, int] = {}
        for idx in range(len(self.intensity)):
            if self.intensity.weights[idx] < cfg.extract_threshold:
                continue
            label = int(self.intensity.labels[idx])
            if label not in best or self.intensity.weights[idx] > self.intensity.weights[best[label]]:
                best[label] = idx

        extracted = {}
        for label, idx in best.items():
            if label in self.dead_labels:
                label = self._relabel(label)
            extracted[label] = idx

        positions = [np.asarray(z, dtype=float)[:2] for z in frame.z]
        for label, idx in extracted.items():
            track = self.tracks.get(label)
            if track is None:
                track = Track(label, self.intensity.means[idx].copy(),
                              self.intensity.covs[idx].copy(),
                              TRACK_TENTATIVE, None, t)
                self.tracks[label] = track
                self.class_votes[label] = Counter()
            track.state = self.intensity.means[idx].copy()
            track.cov = self.intensity.covs[idx].copy()
            track.hits += 1
            track.misses = 0
            track.last_t = t
            if track.hits >= cfg.confirm_hits:
                track.status = TRACK_CONFIRMED
            self._vote_class(label, track, positions, frame.classes)

        for label in list(self.tracks):
            if label in extracted:
                continue
            track = self.tracks[label]
            track.misses += 1
            track.hits = 0
            if track.misses >= cfg.miss_limit:
                self.dead_labels.add(label)
                del self.tracks[label]
                self.class_votes.pop(label, None)
        return [replace_track(tr) for tr in self.tracks.values()]

    def _relabel(self, label: int) -> int:
        """A dead label re-crossed the extraction threshold: rename its
        components so the reappearance starts a fresh track identity."""
        fresh = self._fresh_label()
        self.intensity.labels[self.intensity.labels == label] = fresh
        return fresh

    def _vote_class(self, label: int, track: Track, positions, classes):
        if not positions:
            return
        diffs = np.asarray(positions) - track.state[:2]
        dist = np.linalg.norm(diffs, axis=1)
        nearest = int(np.argmin(dist))
        if dist[nearest] <= 10.0 and classes and classes[nearest] is not None:
            self.class_votes[label][classes[nearest]] += 1
        votes = self.class_votes[label]
        track.vclass = votes.most_common(1)[0][0] if votes else None


def replace_track(track: Track) -> Track:
    return Track(track.label, track.state.copy(), track.cov.copy(),
                 track.status, track.vclass, track.last_t,
                 track.hits, track.misses)
