"""2-D scalar shear-wave FDTD solver driven by a Gaussian ARF body force.

Solves ``rho * u_tt = div(mu * grad u) + f`` on a cell-centred grid with
second-order centred differences in space and time (leapfrog). Arrays are
indexed ``[z, x]``: rows run in depth, columns laterally. Lengths in the
public API are in mm, the solver itself works in SI units and displacements
are reported in micrometres.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from shearnet import binio

logger = logging.getLogger(__name__)

DEFAULT_DURATION_US = 200.0
DEFAULT_AMPLITUDE = 1e6
DEFAULT_SIGMA_MM = (0.21, 0.43)


class StabilityError(ValueError):
    """Time step violates the CFL bound."""


class SimulationError(RuntimeError):
    """The field became non-finite while stepping."""


@dataclass
class Inclusion:
    shape: str
    center_mm: tuple
    radii_mm: tuple
    modulus_pa: float

    def __post_init__(self):
        if self.shape not in ("circle", "ellipse"):
            raise ValueError(f"unknown inclusion shape {self.shape!r}")
        self.center_mm = tuple(float(c) for c in self.center_mm)
        r = self.radii_mm
        if np.isscalar(r):
            r = (r, r)
        self.radii_mm = tuple(float(v) for v in r)
        if min(self.radii_mm) <= 0:
            raise ValueError("inclusion radii must be positive")
        if self.shape == "circle" and self.radii_mm[0] != self.radii_mm[1]:
            raise ValueError("a circle needs equal radii")

    def contains(self, x_mm, z_mm):
        """Pixel-centre membership test; ``radii_mm`` are (lateral, axial) semi-axes."""
        rx, rz = self.radii_mm
        cx, cz = self.center_mm
        return ((x_mm - cx) / rx) ** 2 + ((z_mm - cz) / rz) ** 2 <= 1.0

    def inside(self, extent_mm):
        (cx, cz), (rx, rz) = self.center_mm, self.radii_mm
        return cx - rx >= 0 and cz - rz >= 0 and cx + rx <= extent_mm[0] and cz + rz <= extent_mm[1]

    def to_dict(self):
        return {"shape": self.shape, "center_mm": list(self.center_mm),
                "radii_mm": list(self.radii_mm), "modulus_pa": self.modulus_pa}


@dataclass
class ElasticPhantom:
    """Shear modulus map (Pa, indexed ``[z, x]``) on a square-cell grid."""

    mu_map: np.ndarray
    grid_spacing_mm: float
    rho: float = 1000.0
    nu: float = 0.499
    extent_mm: tuple | None = None
    inclusions: list = field(default_factory=list)

    def __post_init__(self):
        self.mu_map = np.asarray(self.mu_map, dtype=np.float64)
        if self.mu_map.ndim != 2:
            raise ValueError("mu_map must be 2-D")
        if not np.all(np.isfinite(self.mu_map)) or self.mu_map.min() <= 0:
            raise ValueError("mu_map must be finite and strictly positive")
        if self.grid_spacing_mm <= 0:
            raise ValueError("grid_spacing_mm must be positive")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        nz, nx = self.mu_map.shape
        natural = (nx * self.grid_spacing_mm, nz * self.grid_spacing_mm)
        if self.extent_mm is None:
            self.extent_mm = natural
        self.extent_mm = tuple(float(e) for e in self.extent_mm)
        for e, n in zip(self.extent_mm, natural):
            if abs(e - n) > 0.5 * self.grid_spacing_mm:
                raise ValueError(
                    f"extent {self.extent_mm} mm inconsistent with shape {self.mu_map.shape} "
                    f"x spacing {self.grid_spacing_mm} mm"
                )
        for inc in self.inclusions:
            if not inc.inside(self.extent_mm):
                raise ValueError(f"inclusion {inc} is not inside the domain {self.extent_mm}")

    @property
    def shape(self):
        return self.mu_map.shape

    def coords_mm(self):
        """Cell-centre coordinates ``(x, z)``, each 1-D."""
        nz, nx = self.mu_map.shape
        h = self.grid_spacing_mm
        return (np.arange(nx) + 0.5) * h, (np.arange(nz) + 0.5) * h

    @property
    def max_speed(self):
        return math.sqrt(self.mu_map.max() / self.rho)

    @classmethod
    def homogeneous(cls, mu_pa, extent_mm=(40.0, 40.0), grid_spacing_mm=0.2, rho=1000.0):
        nx = int(round(extent_mm[0] / grid_spacing_mm))
        nz = int(round(extent_mm[1] / grid_spacing_mm))
        return cls(np.full((nz, nx), float(mu_pa)), grid_spacing_mm, rho=rho, extent_mm=extent_mm)


@dataclass
class ARFPush:
    amplitude_A: float = DEFAULT_AMPLITUDE
    focus: tuple = (20.0, 20.0)
    sigma: tuple = DEFAULT_SIGMA_MM
    duration_us: float = DEFAULT_DURATION_US
    intensity_fraction: float = 1.0

    def __post_init__(self):
        # zero amplitude is allowed as the trivial no-force case
        if self.amplitude_A < 0:
            raise ValueError("amplitude_A must be >= 0")
        if min(self.sigma) <= 0:
            raise ValueError("sigma components must be positive")
        if self.duration_us <= 0:
            raise ValueError("duration_us must be positive")
        if not 0 < self.intensity_fraction <= 1:
            raise ValueError("intensity_fraction must lie in (0, 1]")

    def check_domain(self, phantom: ElasticPhantom):
        x0, z0 = self.focus
        ex, ez = phantom.extent_mm
        if not (0 <= x0 <= ex and 0 <= z0 <= ez):
            raise ValueError(f"ARF focus {self.focus} mm lies outside the domain {phantom.extent_mm} mm")

    def spatial_profile(self, phantom: ElasticPhantom):
        """Force density (N/m^3) while the push is on."""
        self.check_domain(phantom)
        x, z = phantom.coords_mm()
        (x0, z0), (sx, sz) = self.focus, self.sigma
        gx = np.exp(-((x - x0) ** 2) / (2 * sx ** 2))
        gz = np.exp(-((z - z0) ** 2) / (2 * sz ** 2))
        return self.intensity_fraction * self.amplitude_A * np.outer(gz, gx)


def arf_force(push: ARFPush, phantom: ElasticPhantom, t):
    """Gaussian ARF body force at time ``t`` (s); zero once the push window ends."""
    if t < 0:
        raise ValueError("t must be >= 0")
    prof = push.spatial_profile(phantom)
    if t >= push.duration_us * 1e-6:
        return np.zeros_like(prof)
    return prof


def cfl_limit(phantom: ElasticPhantom):
    """Largest stable time step (s) of the 5-point leapfrog scheme."""
    return phantom.grid_spacing_mm * 1e-3 / (phantom.max_speed * math.sqrt(2.0))


@dataclass
class WaveField:
    """Recorded displacement snapshots ``u[k, z, x]`` (um) at ``times_s[k]``."""

    u: np.ndarray
    times_s: np.ndarray
    dt_s: float
    phantom: ElasticPhantom
    push: ARFPush
    energy: np.ndarray | None = None
    energy_times_s: np.ndarray | None = None

    @property
    def push_end_s(self):
        return self.push.duration_us * 1e-6

    def export(self, path):
        """Raw float32 export with a JSON sidecar."""
        binio.write_array_with_sidecar(
            path, self.u,
            dt_us=float(np.diff(self.times_s[:2])[0] * 1e6) if len(self.times_s) > 1 else self.dt_s * 1e6,
            solver_dt_us=self.dt_s * 1e6,
            t0_us=float(self.times_s[0] * 1e6),
            grid_spacing_mm=self.phantom.grid_spacing_mm,
            units="um",
            axes=["t", "z", "x"],
        )


def _face_moduli(mu):
    # harmonic mean across each interior face
    mx = 2 * mu[:, 1:] * mu[:, :-1] / (mu[:, 1:] + mu[:, :-1])
    mz = 2 * mu[1:, :] * mu[:-1, :] / (mu[1:, :] + mu[:-1, :])
    return mx, mz


class _Operator:
    """``div(mu grad u)`` with free (zero-flux) or fixed (u = 0 at the wall) edges."""

    def __init__(self, mu, h, boundary):
        self.mx, self.mz = _face_moduli(mu)
        self.inv_h2 = 1.0 / (h * h)
        self.wall = None
        if boundary != "free":
            # wall half a cell outside the edge cell centre
            wall = np.zeros_like(mu)
            wall[:, 0] += 2 * mu[:, 0]
            wall[:, -1] += 2 * mu[:, -1]
            wall[0, :] += 2 * mu[0, :]
            wall[-1, :] += 2 * mu[-1, :]
            self.wall = wall

    def __call__(self, u):
        out = np.zeros_like(u)
        fx = self.mx * (u[:, 1:] - u[:, :-1])
        fz = self.mz * (u[1:, :] - u[:-1, :])
        out[:, :-1] += fx
        out[:, 1:] -= fx
        out[:-1, :] += fz
        out[1:, :] -= fz
        if self.wall is not None:
            out -= self.wall * u
        return out * self.inv_h2


def _sponge(shape, width, strength):
    nz, nx = shape
    def ramp(n):
        d = np.minimum(np.arange(n), np.arange(n)[::-1]).astype(float)
        return np.clip((width - d) / width, 0, None) ** 2
    return strength * np.maximum(ramp(nz)[:, None], ramp(nx)[None, :])


def simulate(phantom: ElasticPhantom, push: ARFPush, total_time_ms=18.0, dt_us=None,
             record_every_us=50.0, boundary="fixed", absorbing_cells=20,
             track_energy=False):
    """Step the wave equation and record snapshots every ``record_every_us``.

    ``dt_us`` defaults to 0.9 of the CFL bound; a larger value raises
    :class:`StabilityError`. ``boundary`` selects the outer walls:
    ``"fixed"`` (clamped, reflecting), ``"free"`` (traction-free, reflecting)
    or ``"absorbing"`` (clamped walls behind a damping sponge of
    ``absorbing_cells`` cells). Free walls let the net push impulse translate
    the whole domain, which shows up as a slow uniform drift.
    """
    if total_time_ms <= 0:
        raise ValueError("total_time_ms must be positive")
    if boundary not in ("fixed", "free", "absorbing"):
        raise ValueError(f"unknown boundary {boundary!r}")
    push.check_domain(phantom)
    limit = cfl_limit(phantom)
    dt = 0.9 * limit if dt_us is None else dt_us * 1e-6
    if dt > limit * (1 + 1e-12):
        raise StabilityError(
            f"dt = {dt * 1e6:.3f} us exceeds the CFL bound {limit * 1e6:.3f} us "
            f"(spacing {phantom.grid_spacing_mm} mm, c_max {phantom.max_speed:.3f} m/s)"
        )
    n_steps = int(math.ceil(total_time_ms * 1e-3 / dt - 1e-9))
    rec_stride = max(1, int(round(record_every_us * 1e-6 / dt)))
    h = phantom.grid_spacing_mm * 1e-3
    rho = phantom.rho
    op = _Operator(phantom.mu_map, h, boundary)
    force = push.spatial_profile(phantom)
    t_off = push.duration_us * 1e-6
    c2 = dt * dt / rho

    damping = None
    if boundary == "absorbing":
        eta = 1.5 * phantom.max_speed * math.log(1e3) / (absorbing_cells * h)
        damping = _sponge(phantom.shape, absorbing_cells, eta)
        a_plus = 1.0 / (1.0 + 0.5 * damping * dt)
        a_minus = 1.0 - 0.5 * damping * dt

    u_prev = np.zeros(phantom.shape)
    u = np.zeros(phantom.shape)
    snaps, times = [u.copy()], [0.0]
    energies, e_times = [], []
    for n in range(n_steps):
        t = n * dt
        lu = op(u)
        rhs = lu + force if t < t_off else lu
        if damping is None:
            u_next = 2 * u - u_prev + c2 * rhs
        else:
            u_next = a_plus * (2 * u - a_minus * u_prev + c2 * rhs)
        if track_energy:
            # leapfrog-conserved energy at the half step n + 1/2
            v = (u_next - u) / dt
            kinetic = 0.5 * rho * np.sum(v * v) * h * h
            strain = -0.5 * np.sum(u_next * lu) * h * h
            energies.append(kinetic + strain)
            e_times.append(t + 0.5 * dt)
        u_prev, u = u, u_next
        if (n + 1) % rec_stride == 0 or n + 1 == n_steps:
            if not np.all(np.isfinite(u)):
                raise SimulationError(
                    f"non-finite displacement at step {n + 1} (t = {(n + 1) * dt * 1e3:.3f} ms); "
                    f"dt = {dt * 1e6:.3f} us, max mu = {phantom.mu_map.max():.1f} Pa"
                )
            snaps.append(u.copy())
            times.append((n + 1) * dt)
    return WaveField(
        u=np.stack(snaps) * 1e6, times_s=np.asarray(times), dt_s=dt, phantom=phantom, push=push,
        energy=np.asarray(energies) if track_energy else None,
        energy_times_s=np.asarray(e_times) if track_energy else None,
    )


@dataclass
class DisplacementSequence:
    """``frames[t, z, x]`` axial displacement (um) sampled at ``frame_rate_hz``."""

    frames: np.ndarray
    frame_rate_hz: float
    pixel_spacing_mm: tuple
    t0_ms: float = 0.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be T x H x W with T >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")
        if self.frame_rate_hz <= 0:
            raise ValueError("frame_rate_hz must be positive")
        self.pixel_spacing_mm = tuple(float(p) for p in self.pixel_spacing_mm)

    @property
    def n_frames(self):
        return self.frames.shape[0]

    def times_ms(self):
        return self.t0_ms + np.arange(self.n_frames) * 1e3 / self.frame_rate_hz

    def replace(self, frames):
        return DisplacementSequence(frames, self.frame_rate_hz, self.pixel_spacing_mm, self.t0_ms)


def roi_pixel_centers(roi_mm, out_shape):
    """Lateral and axial pixel-centre coordinates (mm) of an ``H x W`` ROI image.

    ``roi_mm`` is ``(x0, z0, width, depth)``.
    """
    x0, z0, wx, dz = roi_mm
    h, w = out_shape
    return x0 + (np.arange(w) + 0.5) * wx / w, z0 + (np.arange(h) + 0.5) * dz / h


def resample_image(img, grid_spacing_mm, roi_mm, out_shape):
    """Bilinear resample of a cell-centred ``[z, x]`` image onto the ROI pixel grid."""
    xs, zs = roi_pixel_centers(roi_mm, out_shape)
    ci = xs / grid_spacing_mm - 0.5
    ri = zs / grid_spacing_mm - 0.5
    rr, cc = np.meshgrid(ri, ci, indexing="ij")
    return ndimage.map_coordinates(img, [rr, cc], order=1, mode="nearest")


def extract_roi_frames(wave: WaveField, roi_mm, out_shape=(96, 48), frame_rate_hz=6125.0,
                       n_frames=49) -> DisplacementSequence:
    """Sample ``n_frames`` ROI images starting when the push ends."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    x0, z0, wx, dz = roi_mm
    ex, ez = wave.phantom.extent_mm
    tol = 1e-9
    if wx <= 0 or dz <= 0 or x0 < -tol or z0 < -tol or x0 + wx > ex + tol or z0 + dz > ez + tol:
        raise ValueError(f"ROI {roi_mm} is not inside the domain {wave.phantom.extent_mm}")
    t_start = wave.push_end_s
    t_req = t_start + np.arange(n_frames) / frame_rate_hz
    t_avail = wave.times_s[-1]
    if t_req[-1] > t_avail + 1e-12:
        raise ValueError(
            f"requested frames span {t_start * 1e3:.3f}-{t_req[-1] * 1e3:.3f} ms but the "
            f"simulation covers 0-{t_avail * 1e3:.3f} ms"
        )
    frames = np.empty((n_frames,) + tuple(out_shape))
    for k, t in enumerate(t_req):
        j = int(np.searchsorted(wave.times_s, t, side="right")) - 1
        j = min(max(j, 0), len(wave.times_s) - 1)
        if j + 1 < len(wave.times_s):
            w = (t - wave.times_s[j]) / (wave.times_s[j + 1] - wave.times_s[j])
            snap = (1 - w) * wave.u[j] + w * wave.u[j + 1] if w > 0 else wave.u[j]
        else:
            snap = wave.u[j]
        frames[k] = resample_image(snap, wave.phantom.grid_spacing_mm, roi_mm, out_shape)
    spacing = (dz / out_shape[0], wx / out_shape[1])
    return DisplacementSequence(frames, frame_rate_hz, spacing, t0_ms=t_start * 1e3)


def calibrate_amplitude(seq: DisplacementSequence, push: ARFPush, target_peak_um=20.0):
    """Rescale a unit-force sequence so full force gives ``target_peak_um``.

    The solver is linear in the force, so scaling the output is equivalent to
    re-running with the scaled amplitude. Returns the rescaled sequence
    (honouring ``push.intensity_fraction``) and the calibrated full-force amplitude.
    """
    peak = float(np.max(np.abs(seq.frames)))
    if peak == 0:
        raise ValueError("cannot calibrate a zero-displacement sequence")
    gain = target_peak_um / (peak / push.intensity_fraction)
    return seq.replace(seq.frames * gain), push.amplitude_A * gain


def wavefront_speed(wave: WaveField, row_mm=None, start_mm=3.0, stop_mm=12.0, n_positions=10):
    """Front speed (m/s) from a linear fit of time-to-peak versus lateral distance.

    Time-to-peak uses three-point parabolic refinement on the recorded snapshots.
    """
    ph = wave.phantom
    x, z = ph.coords_mm()
    x0, z0 = wave.push.focus
    row = int(np.argmin(np.abs(z - (z0 if row_mm is None else row_mm))))
    targets = x0 + np.linspace(start_mm, stop_mm, n_positions)
    cols = np.unique([int(np.argmin(np.abs(x - t))) for t in targets])
    trace = wave.u[:, row, cols]
    k = np.argmax(trace, axis=0)
    k = np.clip(k, 1, len(wave.times_s) - 2)
    idx = np.arange(len(cols))
    y0, y1, y2 = trace[k - 1, idx], trace[k, idx], trace[k + 1, idx]
    denom = y0 - 2 * y1 + y2
    shift = np.where(denom != 0, 0.5 * (y0 - y2) / np.where(denom != 0, denom, 1), 0.0)
    dt_rec = wave.times_s[1] - wave.times_s[0]
    t_peak = wave.times_s[k] + shift * dt_rec
    slope = np.polyfit((x[cols] - x0) * 1e-3, t_peak, 1)[0]
    return 1.0 / slope
