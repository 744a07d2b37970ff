"""Linear transverse beam optics for a five-magnet tuning section.

The transverse state vector is (x, x', y, y') in SI units (m, rad).  All
elements act as affine maps on that vector, so a Gaussian beam stays
Gaussian and is carried exactly by its first and second moments: a
4-vector centroid and a 4x4 covariance matrix.  Centroids transform as
``mu -> M mu + kick`` and covariances as ``cov -> M cov M^T``.

The section layout is fixed: two focusing quadrupoles, a vertical
steerer, a third quadrupole, a horizontal steerer, and a diagnostic
screen at the end.  Quadrupole strengths and steering angles are looked
up from a :class:`MagnetSettings` by source key, so one lattice instance
serves every actuator configuration.  Transverse misalignments of the
quadrupoles enter as coordinate shifts into and out of the magnet frame,
which is what turns an off-centre quadrupole into an effective dipole.

The diagnostic screen is a camera with a finite field of view.  In
``finite`` mode the reported centroid and spot size are the moments of
the true Gaussian truncated to the field of view, which degrades
gracefully from an exact reading (beam well inside) to a clipped, wrong
but deterministic reading (beam at the edge or outside).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InvalidParameterError

# Physical actuator limits (hardware, not operational practice).
MAX_QUAD_STRENGTH = 72.0  # 1/m^2
MAX_STEERING_ANGLE = 6.2e-3  # rad

# Order of the actuator vector everywhere in the package.
SETTINGS_FIELDS = ("k_q1", "k_q2", "a_cv", "k_q3", "a_ch")

_TWO_PI = 2.0 * math.pi


def _require_finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise InvalidParameterError(f"{name} must be finite, got {value!r}")
    return value


# ── Domain types ──────────────────────────────────────────────────────


@dataclass(frozen=True)
class MagnetSettings:
    """Actuator vector: three quadrupole strengths (1/m^2) and two steering angles (rad)."""

    k_q1: float
    k_q2: float
    a_cv: float
    k_q3: float
    a_ch: float

    def __post_init__(self) -> None:
        for name in ("k_q1", "k_q2", "k_q3"):
            k = _require_finite(name, getattr(self, name))
            if abs(k) > MAX_QUAD_STRENGTH:
                raise InvalidParameterError(
                    f"{name}={k} exceeds the physical limit of ±{MAX_QUAD_STRENGTH} 1/m^2"
                )
        for name in ("a_cv", "a_ch"):
            a = _require_finite(name, getattr(self, name))
            if abs(a) > MAX_STEERING_ANGLE:
                raise InvalidParameterError(
                    f"{name}={a} exceeds the physical limit of ±{MAX_STEERING_ANGLE} rad"
                )

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in SETTINGS_FIELDS], dtype=float)

    @classmethod
    def from_array(cls, values) -> "MagnetSettings":
        values = np.asarray(values, dtype=float)
        if values.shape != (len(SETTINGS_FIELDS),):
            raise InvalidParameterError(
                f"settings vector must have shape (5,), got {values.shape}"
            )
        return cls(**dict(zip(SETTINGS_FIELDS, values)))


@dataclass(frozen=True)
class IncomingBeam:
    """Gaussian beam entering the section: energy plus transverse first and second moments.

    Position/size in m, angle/divergence in rad, energy in eV.  The beam
    is uncorrelated between planes and between position and angle at the
    entrance (waist at the entrance plane).
    """

    energy: float
    mu_x: float
    mu_xp: float
    mu_y: float
    mu_yp: float
    sigma_x: float
    sigma_xp: float
    sigma_y: float
    sigma_yp: float

    def __post_init__(self) -> None:
        if _require_finite("energy", self.energy) <= 0:
            raise InvalidParameterError(f"energy must be positive, got {self.energy}")
        for name in ("mu_x", "mu_xp", "mu_y", "mu_yp"):
            _require_finite(name, getattr(self, name))
        for name in ("sigma_x", "sigma_xp", "sigma_y", "sigma_yp"):
            if _require_finite(name, getattr(self, name)) <= 0:
                raise InvalidParameterError(
                    f"{name} must be positive, got {getattr(self, name)}"
                )

    def centroid(self) -> np.ndarray:
        return np.array([self.mu_x, self.mu_xp, self.mu_y, self.mu_yp], dtype=float)

    def covariance(self) -> np.ndarray:
        return np.diag(
            [
                self.sigma_x**2,
                self.sigma_xp**2,
                self.sigma_y**2,
                self.sigma_yp**2,
            ]
        )


@dataclass(frozen=True)
class Misalignments:
    """Transverse offsets (m) of the three quadrupoles and the screen."""

    q1_dx: float = 0.0
    q1_dy: float = 0.0
    q2_dx: float = 0.0
    q2_dy: float = 0.0
    q3_dx: float = 0.0
    q3_dy: float = 0.0
    screen_dx: float = 0.0
    screen_dy: float = 0.0

    def __post_init__(self) -> None:
        for name in self.__dataclass_fields__:
            _require_finite(name, getattr(self, name))

    def offset(self, source: str) -> tuple[float, float]:
        """Return (dx, dy) for a source key: 'q1', 'q2', 'q3' or 'screen'."""
        if source not in ("q1", "q2", "q3", "screen"):
            raise InvalidParameterError(f"unknown misalignment source {source!r}")
        return getattr(self, f"{source}_dx"), getattr(self, f"{source}_dy")


class BeamMoments:
    """First and second moments of the transverse beam at one plane.

    ``mu`` is the (x, x', y, y') centroid, ``cov`` the 4x4 covariance.
    Both are copied and frozen on construction.
    """

    __slots__ = ("mu", "cov")

    def __init__(self, mu, cov) -> None:
        mu = np.array(mu, dtype=float)
        cov = np.array(cov, dtype=float)
        if mu.shape != (4,) or cov.shape != (4, 4):
            raise InvalidParameterError(
                f"moments must have shapes (4,) and (4, 4), got {mu.shape} and {cov.shape}"
            )
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise InvalidParameterError("beam moments must be finite")
        # Symmetrize and check positive semi-definiteness up to roundoff.
        cov = 0.5 * (cov + cov.T)
        scale = float(np.max(np.abs(cov))) or 1.0
        if np.min(np.linalg.eigvalsh(cov)) < -1e-12 * scale:
            raise InvalidParameterError("covariance matrix is not positive semi-definite")
        mu.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "cov", cov)

    def __setattr__(self, name, value):  # pragma: no cover - immutability guard
        raise AttributeError("BeamMoments is immutable")

    @property
    def mu_x(self) -> float:
        return float(self.mu[0])

    @property
    def mu_xp(self) -> float:
        return float(self.mu[1])

    @property
    def mu_y(self) -> float:
        return float(self.mu[2])

    @property
    def mu_yp(self) -> float:
        return float(self.mu[3])

    @property
    def sigma_x(self) -> float:
        return math.sqrt(max(float(self.cov[0, 0]), 0.0))

    @property
    def sigma_xp(self) -> float:
        return math.sqrt(max(float(self.cov[1, 1]), 0.0))

    @property
    def sigma_y(self) -> float:
        return math.sqrt(max(float(self.cov[2, 2]), 0.0))

    @property
    def sigma_yp(self) -> float:
        return math.sqrt(max(float(self.cov[3, 3]), 0.0))

    @property
    def cov_x_xp(self) -> float:
        return float(self.cov[0, 1])

    @property
    def cov_y_yp(self) -> float:
        return float(self.cov[2, 3])

    def beam_vector(self) -> np.ndarray:
        """Observable 4-vector (mu_x, sigma_x, mu_y, sigma_y) in metres."""
        return np.array([self.mu_x, self.sigma_x, self.mu_y, self.sigma_y])


# ── Lattice elements ──────────────────────────────────────────────────


@dataclass(frozen=True)
class Drift:
    length: float

    def __post_init__(self) -> None:
        if _require_finite("length", self.length) < 0:
            raise InvalidParameterError(f"drift length must be >= 0, got {self.length}")


@dataclass(frozen=True)
class Quadrupole:
    length: float
    strength_source: str
    misalignment_source: str

    def __post_init__(self) -> None:
        if _require_finite("length", self.length) <= 0:
            raise InvalidParameterError(f"quadrupole length must be > 0, got {self.length}")
        if self.strength_source not in ("k_q1", "k_q2", "k_q3"):
            raise InvalidParameterError(
                f"unknown quadrupole strength source {self.strength_source!r}"
            )
        if self.misalignment_source not in ("q1", "q2", "q3"):
            raise InvalidParameterError(
                f"unknown quadrupole misalignment source {self.misalignment_source!r}"
            )


@dataclass(frozen=True)
class HorizontalCorrector:
    length: float
    angle_source: str = "a_ch"

    def __post_init__(self) -> None:
        if _require_finite("length", self.length) < 0:
            raise InvalidParameterError(f"corrector length must be >= 0, got {self.length}")


@dataclass(frozen=True)
class VerticalCorrector:
    length: float
    angle_source: str = "a_cv"

    def __post_init__(self) -> None:
        if _require_finite("length", self.length) < 0:
            raise InvalidParameterError(f"corrector length must be >= 0, got {self.length}")


@dataclass(frozen=True)
class Screen:
    """Diagnostic camera: field-of-view half extents and resolution, all in metres."""

    half_width: float
    half_height: float
    resolution: float
    misalignment_source: str = "screen"

    def __post_init__(self) -> None:
        for name in ("half_width", "half_height", "resolution"):
            if _require_finite(name, getattr(self, name)) <= 0:
                raise InvalidParameterError(f"screen {name} must be > 0")


Element = Drift | Quadrupole | HorizontalCorrector | VerticalCorrector | Screen


@dataclass(frozen=True)
class Lattice:
    """Ordered element sequence ending in the screen."""

    elements: tuple[Element, ...]

    def __post_init__(self) -> None:
        screens = [e for e in self.elements if isinstance(e, Screen)]
        if len(screens) != 1 or not isinstance(self.elements[-1], Screen):
            raise ConfigurationError("lattice must contain exactly one screen, placed last")
        order = [
            e.strength_source if isinstance(e, Quadrupole) else e.angle_source
            for e in self.elements
            if isinstance(e, (Quadrupole, HorizontalCorrector, VerticalCorrector))
        ]
        if order != ["k_q1", "k_q2", "a_cv", "k_q3", "a_ch"]:
            raise ConfigurationError(
                f"magnets must appear in order Q1, Q2, CV, Q3, CH, got {order}"
            )

    @property
    def screen(self) -> Screen:
        return self.elements[-1]  # type: ignore[return-value]

    @property
    def total_length(self) -> float:
        return sum(getattr(e, "length", 0.0) for e in self.elements)


# ── Transfer maps ─────────────────────────────────────────────────────


def drift_matrix(length: float) -> np.ndarray:
    m = np.eye(4)
    m[0, 1] = length
    m[2, 3] = length
    return m


def quadrupole_matrix(k: float, length: float) -> np.ndarray:
    """Thick-lens quadrupole map for strength k (1/m^2) over a given length.

    k > 0 focuses horizontally (cos/sin block in x, cosh/sinh in y);
    k < 0 is the mirror image; k = 0 degenerates to a drift.
    """
    if k == 0.0:
        return drift_matrix(length)
    omega = math.sqrt(abs(k))
    phi = omega * length
    focus = np.array(
        [[math.cos(phi), math.sin(phi) / omega], [-omega * math.sin(phi), math.cos(phi)]]
    )
    defocus = np.array(
        [[math.cosh(phi), math.sinh(phi) / omega], [omega * math.sinh(phi), math.cosh(phi)]]
    )
    m = np.eye(4)
    if k > 0:
        m[0:2, 0:2] = focus
        m[2:4, 2:4] = defocus
    else:
        m[0:2, 0:2] = defocus
        m[2:4, 2:4] = focus
    return m


def element_matrix(element: Element, settings: MagnetSettings) -> np.ndarray:
    """4x4 transfer matrix of a drift or quadrupole under the given settings."""
    if isinstance(element, Drift):
        return drift_matrix(element.length)
    if isinstance(element, Quadrupole):
        k = _require_finite(element.strength_source, getattr(settings, element.strength_source))
        return quadrupole_matrix(k, element.length)
    raise InvalidParameterError(
        f"element_matrix supports Drift and Quadrupole, got {type(element).__name__}"
    )


_QUAD_SHIFT = {"x": 0, "y": 2}


def track(
    incoming: IncomingBeam,
    settings: MagnetSettings,
    misalignments: Misalignments,
    lattice: Lattice,
) -> BeamMoments:
    """Propagate beam moments through the lattice to the screen plane.

    Returns moments in absolute beamline coordinates; converting to the
    camera frame (screen offset) is the measurement's job.  Quadrupole
    misalignments shift the centroid into and out of the magnet frame,
    steerers add their kick angle to the centroid.  Covariances see only
    the linear part, shifts and kicks leave them untouched.
    """
    mu = incoming.centroid()
    cov = incoming.covariance()
    for element in lattice.elements:
        if isinstance(element, Screen):
            continue
        if isinstance(element, Quadrupole):
            m = element_matrix(element, settings)
            dx, dy = misalignments.offset(element.misalignment_source)
            shift = np.array([dx, 0.0, dy, 0.0])
            mu = m @ (mu - shift) + shift
        elif isinstance(element, (HorizontalCorrector, VerticalCorrector)):
            m = drift_matrix(element.length)
            angle = _require_finite(element.angle_source, getattr(settings, element.angle_source))
            kick = np.zeros(4)
            kick[1 if isinstance(element, HorizontalCorrector) else 3] = angle
            mu = m @ mu + kick
        else:
            m = element_matrix(element, settings)
            mu = m @ mu
        cov = m @ cov @ m.T
    return BeamMoments(mu, cov)


# ── Screen measurement ────────────────────────────────────────────────


def _norm_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def _norm_pdf(z: float) -> float:
    return math.exp(-0.5 * z * z) / math.sqrt(_TWO_PI)


def truncated_gaussian_moments(
    mu: float, sigma: float, lo: float, hi: float
) -> tuple[float, float]:
    """Mean and standard deviation of N(mu, sigma^2) truncated to [lo, hi].

    Degrades deterministically when the interval carries essentially no
    probability mass: the reading collapses to the nearest edge with
    zero width, which is the stylised version of a camera fitting noise.
    """
    if hi <= lo:
        raise InvalidParameterError(f"empty truncation interval [{lo}, {hi}]")
    if sigma <= 0.0:
        return min(max(mu, lo), hi), 0.0
    alpha = (lo - mu) / sigma
    beta = (hi - mu) / sigma
    mass = _norm_cdf(beta) - _norm_cdf(alpha)
    if mass < 1e-15:
        return (hi if mu > hi else lo), 0.0
    pdf_lo = _norm_pdf(alpha)
    pdf_hi = _norm_pdf(beta)
    mean = mu + sigma * (pdf_lo - pdf_hi) / mass
    variance = sigma**2 * (
        1.0
        + (alpha * pdf_lo - beta * pdf_hi) / mass
        - ((pdf_lo - pdf_hi) / mass) ** 2
    )
    return mean, math.sqrt(max(variance, 0.0))


def measure_screen(
    true_moments: BeamMoments,
    screen: Screen,
    misalignments: Misalignments | None = None,
    *,
    mode: str = "infinite",
    noise_rms: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, bool]:
    """Camera reading of the beam: ((mu_x, sigma_x, mu_y, sigma_y), on_screen).

    The reported centroid is relative to the (possibly misaligned)
    screen centre.  ``mode`` selects an idealised camera with unlimited
    field of view (``infinite``) or the physical one (``finite``) whose
    reading is the true Gaussian truncated to the field of view.  With
    ``noise_rms`` > 0 Gaussian read noise is added and reported spot
    sizes are floored at the camera resolution; the exact mode reports
    true values untouched.
    """
    if mode not in ("infinite", "finite"):
        raise InvalidParameterError(f"unknown screen mode {mode!r}")
    dx, dy = (0.0, 0.0)
    if misalignments is not None:
        dx, dy = misalignments.offset(screen.misalignment_source)
    mu_x, sigma_x = true_moments.mu_x, true_moments.sigma_x
    mu_y, sigma_y = true_moments.mu_y, true_moments.sigma_y
    on_screen = abs(mu_x - dx) <= screen.half_width and abs(mu_y - dy) <= screen.half_height
    if mode == "infinite":
        measured = np.array([mu_x - dx, sigma_x, mu_y - dy, sigma_y])
        on_screen = True
    else:
        mean_x, trunc_sigma_x = truncated_gaussian_moments(
            mu_x, sigma_x, dx - screen.half_width, dx + screen.half_width
        )
        mean_y, trunc_sigma_y = truncated_gaussian_moments(
            mu_y, sigma_y, dy - screen.half_height, dy + screen.half_height
        )
        measured = np.array([mean_x - dx, trunc_sigma_x, mean_y - dy, trunc_sigma_y])
    if noise_rms > 0.0:
        if rng is None:
            raise InvalidParameterError("noise_rms > 0 requires an rng")
        measured = measured + rng.normal(0.0, noise_rms, size=4)
        # Camera resolution floor applies only in the noisy regime.
        measured[1] = max(measured[1], screen.resolution)
        measured[3] = max(measured[3], screen.resolution)
    return measured, bool(on_screen)


# ── Geometry configuration ────────────────────────────────────────────

GEOMETRY_SCHEMA_VERSION = 1

# Defaults: 2.0 m section, long final drift so the horizontal steerer
# has enough leverage at the screen to cover the target-centroid range.
DEFAULT_GEOMETRY: dict[str, float] = {
    "drift_entrance": 0.1,
    "quad_length": 0.122,
    "drift_q1_q2": 0.1,
    "drift_q2_cv": 0.1,
    "corrector_length": 0.02,
    "drift_cv_q3": 0.1,
    "drift_q3_ch": 0.194,
    "drift_ch_screen": 1.0,
    "screen_half_width": 0.004,
    "screen_half_height": 0.0025,
    "screen_resolution": 2e-5,
}


def build_lattice(geometry: dict[str, float] | None = None) -> Lattice:
    """Assemble the five-magnet section from a geometry mapping (SI units)."""
    geo = dict(DEFAULT_GEOMETRY)
    if geometry is not None:
        unknown = set(geometry) - set(DEFAULT_GEOMETRY)
        if unknown:
            raise ConfigurationError(f"unknown geometry keys: {sorted(unknown)}")
        geo.update({k: float(v) for k, v in geometry.items()})
    quad = geo["quad_length"]
    corr = geo["corrector_length"]
    return Lattice(
        elements=(
            Drift(geo["drift_entrance"]),
            Quadrupole(quad, "k_q1", "q1"),
            Drift(geo["drift_q1_q2"]),
            Quadrupole(quad, "k_q2", "q2"),
            Drift(geo["drift_q2_cv"]),
            VerticalCorrector(corr),
            Drift(geo["drift_cv_q3"]),
            Quadrupole(quad, "k_q3", "q3"),
            Drift(geo["drift_q3_ch"]),
            HorizontalCorrector(corr),
            Drift(geo["drift_ch_screen"]),
            Screen(geo["screen_half_width"], geo["screen_half_height"], geo["screen_resolution"]),
        )
    )


def default_lattice() -> Lattice:
    return build_lattice()


def load_geometry(path: str | Path) -> dict[str, float]:
    """Parse a ``key = value`` geometry file, rejecting unknown keys.

    Blank lines and ``#`` comments are allowed; every value is a float
    in SI units.  ``schema_version`` is mandatory and must match.
    """
    path = Path(path)
    values: dict[str, float] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, text = line.partition("=")
        key = key.strip()
        try:
            value = float(text.strip())
        except ValueError as exc:
            raise ConfigurationError(f"{path}:{lineno}: invalid number {text.strip()!r}") from exc
        if key in values:
            raise ConfigurationError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    version = values.pop("schema_version", None)
    if version != GEOMETRY_SCHEMA_VERSION:
        raise ConfigurationError(
            f"{path}: schema_version must be {GEOMETRY_SCHEMA_VERSION}, got {version}"
        )
    unknown = set(values) - set(DEFAULT_GEOMETRY)
    if unknown:
        raise ConfigurationError(f"{path}: unknown geometry keys: {sorted(unknown)}")
    missing = set(DEFAULT_GEOMETRY) - set(values)
    if missing:
        raise ConfigurationError(f"{path}: missing geometry keys: {sorted(missing)}")
    for key, value in values.items():
        if not math.isfinite(value) or value <= 0:
            raise ConfigurationError(f"{path}: {key} must be a positive finite number")
    return values


def load_lattice(path: str | Path) -> Lattice:
    return build_lattice(load_geometry(path))
