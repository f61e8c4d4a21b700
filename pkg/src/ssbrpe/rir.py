"""Shoebox room impulse responses and reverberation-time measurement.

Impulse responses come from the image-source method with windowed-sinc
fractional delays. Reverberation time is read from the Schroeder energy
decay curve with a T30 line fit (T20 fallback when the decay is too short).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import EnergyError, InsufficientDecayError, SamplingError, DomainError

SAMPLE_RATE = 16000
SPEED_OF_SOUND = 343.0
EDC_FLOOR_DB = -120.0
SINC_TAPS = 81
MAX_ORDER_CAP = 60

Position = Tuple[float, float, float]


@dataclass(frozen=True)
class ShoeboxRoom:
    dims: Tuple[float, float, float]
    # walls ordered (x=0, x=Lx, y=0, y=Ly, z=0, z=Lz)
    absorption: Tuple[float, float, float, float, float, float]
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise DomainError(f"room dimensions must be positive, got {self.dims}")
        if len(self.absorption) != 6 or any(not 0.0 < a < 1.0 for a in self.absorption):
            raise DomainError(f"absorption coefficients must lie in (0, 1), got {self.absorption}")

    @classmethod
    def uniform(cls, dims, alpha: float, speed_of_sound: float = SPEED_OF_SOUND) -> "ShoeboxRoom":
        return cls(tuple(float(d) for d in dims), (float(alpha),) * 6, speed_of_sound)

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dims
        return lx * ly * lz

    @property
    def wall_areas(self) -> np.ndarray:
        lx, ly, lz = self.dims
        return np.array([ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly])

    @property
    def surface_area(self) -> float:
        return float(self.wall_areas.sum())

    def contains(self, p: Sequence[float]) -> bool:
        return all(0.0 < c < d for c, d in zip(p, self.dims))


@dataclass
class RirRecord:
    samples: np.ndarray
    sample_rate: int
    volume_m3: float
    rt60_s: Optional[float] = None
    room_id: str = ""
    source_pos: Position = (0.0, 0.0, 0.0)
    receiver_pos: Position = (0.0, 0.0, 0.0)
    rt60_method: Optional[str] = None
    extra: dict = field(default_factory=dict)

    @property
    def direct_delay_samples(self) -> float:
        d = math.dist(self.source_pos, self.receiver_pos)
        c = self.extra.get("speed_of_sound", SPEED_OF_SOUND)
        return d / c * self.sample_rate


@dataclass
class EnergyDecayCurve:
    values_db: np.ndarray
    sample_rate: int

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.values_db)) / self.sample_rate


@dataclass(frozen=True)
class RoomSamplingConfig:
    volume_range: Tuple[float, float] = (12.0, 21000.0)
    # length/height and width/height ratios
    aspect_x_range: Tuple[float, float] = (1.0, 3.0)
    aspect_y_range: Tuple[float, float] = (1.0, 2.0)
    alpha_range: Tuple[float, float] = (0.1, 0.6)
    min_clearance: float = 0.5
    min_separation: float = 1.0
    max_retries: int = 100


def sample_room(rng: np.random.Generator, config: RoomSamplingConfig = RoomSamplingConfig()):
    """Draw ``(room, source, receiver)`` with log-uniform volume.

    Positions are uniform inside the room, at least ``min_clearance`` from
    every wall and ``min_separation`` apart. Raises :class:`SamplingError`
    when no feasible draw is found within ``max_retries`` attempts.
    """
    vmin, vmax = config.volume_range
    if not 0 < vmin <= vmax:
        raise SamplingError(f"bad volume range {config.volume_range}")
    for _ in range(config.max_retries):
        volume = 10.0 ** rng.uniform(math.log10(vmin), math.log10(vmax))
        rx = rng.uniform(*config.aspect_x_range)
        ry = rng.uniform(*config.aspect_y_range)
        lz = (volume / (rx * ry)) ** (1.0 / 3.0)
        dims = (rx * lz, ry * lz, lz)
        alpha = rng.uniform(*config.alpha_range)
        lo = config.min_clearance
        if any(d - 2 * lo <= 0 for d in dims):
            continue
        for _ in range(config.max_retries):
            src = tuple(float(rng.uniform(lo, d - lo)) for d in dims)
            rcv = tuple(float(rng.uniform(lo, d - lo)) for d in dims)
            if math.dist(src, rcv) >= config.min_separation:
                return ShoeboxRoom.uniform(dims, alpha), src, rcv
    raise SamplingError(f"no feasible room/position draw after {config.max_retries} retries")


def sabine_rt60(room: ShoeboxRoom) -> float:
    """Sabine reverberation time 0.161 V / (alpha S), area-weighted for mixed walls."""
    alpha = np.asarray(room.absorption)
    if np.any(alpha < 0.01):
        raise DomainError("Sabine estimate rejected for absorption below 0.01")
    return 0.161 * room.volume / float(np.dot(room.wall_areas, alpha))


def adaptive_max_order(room: ShoeboxRoom, cap: int = MAX_ORDER_CAP) -> int:
    rt_guess = sabine_rt60(room)
    order = math.ceil(room.speed_of_sound * rt_guess / min(room.dims)) + 2
    return int(min(order, cap))


def _axis_images(src: float, length: float, max_order: int):
    """Image coordinates along one axis with per-wall reflection counts."""
    n = np.arange(-max_order - 1, max_order + 2)
    coords, lo_hits, hi_hits = [], [], []
    for p in (0, 1):
        x = (1 - 2 * p) * src + 2 * n * length
        lo = np.abs(n - p)
        hi = np.abs(n)
        keep = lo + hi <= max_order
        coords.append(x[keep])
        lo_hits.append(lo[keep])
        hi_hits.append(hi[keep])
    return np.concatenate(coords), np.concatenate(lo_hits), np.concatenate(hi_hits)


def image_sources(room: ShoeboxRoom, src: Position, max_order: int):
    """Enumerate image positions and their amplitude gains (product of wall betas).

    Returns ``(positions[N, 3], gains[N], orders[N])``.
    """
    beta = np.sqrt(1.0 - np.asarray(room.absorption, dtype=np.float64))
    axes = [_axis_images(src[k], room.dims[k], max_order) for k in range(3)]
    (xs, xlo, xhi), (ys, ylo, yhi), (zs, zlo, zhi) = axes
    gx = beta[0] ** xlo * beta[1] ** xhi
    gy = beta[2] ** ylo * beta[3] ** yhi
    gz = beta[4] ** zlo * beta[5] ** zhi
    ox, oy, oz = xlo + xhi, ylo + yhi, zlo + zhi

    # y-z combinations shared by every x image
    oyz = oy[:, None] + oz[None, :]
    gyz = gy[:, None] * gz[None, :]
    yy = np.broadcast_to(ys[:, None], oyz.shape)
    zz = np.broadcast_to(zs[None, :], oyz.shape)
    order_yz = np.argsort(oyz, axis=None, kind="stable")
    oyz_f, gyz_f = oyz.ravel()[order_yz], gyz.ravel()[order_yz]
    yy_f, zz_f = yy.ravel()[order_yz], zz.ravel()[order_yz]

    pos, gains, orders = [], [], []
    for i in range(len(xs)):
        budget = max_order - ox[i]
        cut = np.searchsorted(oyz_f, budget, side="right")
        if cut == 0:
            continue
        p = np.empty((cut, 3))
        p[:, 0] = xs[i]
        p[:, 1] = yy_f[:cut]
        p[:, 2] = zz_f[:cut]
        pos.append(p)
        gains.append(gx[i] * gyz_f[:cut])
        orders.append(ox[i] + oyz_f[:cut])
    return np.concatenate(pos), np.concatenate(gains), np.concatenate(orders)


def _render_arrivals(delays: np.ndarray, amps: np.ndarray, n_samples: int, chunk: int = 20000) -> np.ndarray:
    half = SINC_TAPS // 2
    offsets = np.arange(-half, half + 1)
    out = np.zeros(n_samples, dtype=np.float64)
    for start in range(0, len(delays), chunk):
        d = delays[start:start + chunk]
        a = amps[start:start + chunk]
        centre = np.round(d).astype(np.int64)
        idx = centre[:, None] + offsets[None, :]
        u = idx - d[:, None]
        w = 0.5 * (1.0 + np.cos(2.0 * np.pi * u / SINC_TAPS))
        taps = a[:, None] * np.sinc(u) * w
        ok = (idx >= 0) & (idx < n_samples)
        out += np.bincount(idx[ok], weights=taps[ok], minlength=n_samples)
    return out


def image_source_rir(room: ShoeboxRoom, src: Position, rcv: Position,
                     max_order: Optional[int] = None, fs: int = SAMPLE_RATE,
                     n_samples: Optional[int] = None) -> RirRecord:
    """Render an impulse response by summing image-source arrivals.

    Each image contributes ``gain / (4 pi d)`` at delay ``d / c``. With
    ``max_order=None`` the order is picked from a Sabine guess and capped
    at 60. The result carries the room volume but no RT60 label yet.
    """
    if not (room.contains(src) and room.contains(rcv)):
        raise DomainError("source and receiver must lie strictly inside the room")
    if math.dist(src, rcv) == 0.0:
        raise DomainError("source and receiver coincide")
    if max_order is None:
        max_order = adaptive_max_order(room)
    if max_order < 0:
        raise DomainError("max_order must be >= 0")

    pos, gains, orders = image_sources(room, src, max_order)
    dist = np.linalg.norm(pos - np.asarray(rcv, dtype=np.float64)[None, :], axis=1)
    delays = dist / room.speed_of_sound * fs
    amps = gains / (4.0 * np.pi * dist)
    if n_samples is None:
        n_samples = int(math.ceil(delays.max())) + SINC_TAPS // 2 + 1
    h = _render_arrivals(delays, amps, n_samples)
    return RirRecord(
        samples=h.astype(np.float32), sample_rate=fs, volume_m3=room.volume,
        source_pos=tuple(src), receiver_pos=tuple(rcv),
        extra={"max_order": int(max_order), "n_images": int(len(delays)),
               "speed_of_sound": room.speed_of_sound},
    )


def schroeder_edc(samples: np.ndarray, fs: int = SAMPLE_RATE) -> EnergyDecayCurve:
    """Backward-integrated energy decay curve in dB, normalised to 0 dB at t=0."""
    h = np.asarray(samples, dtype=np.float64).ravel()
    if h.size == 0:
        raise EnergyError("empty impulse response")
    energy = np.cumsum((h * h)[::-1])[::-1]
    if energy[0] <= 0.0:
        raise EnergyError("impulse response has no energy")
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(energy / energy[0])
    db = np.maximum(db, EDC_FLOOR_DB)
    db[0] = 0.0
    return EnergyDecayCurve(db, fs)


def estimate_rt60(edc: EnergyDecayCurve, method: str = "T30") -> float:
    """Fit a line to the EDC between -5 dB and the method's lower bound; extrapolate to -60 dB."""
    lower = {"T30": -35.0, "T20": -25.0}[method]
    db = edc.values_db
    if db.min() > lower:
        raise InsufficientDecayError(f"decay never reaches {lower} dB (min {db.min():.1f} dB)")
    start = int(np.argmax(db <= -5.0))
    stop = int(np.argmax(db <= lower))
    seg = db[start:stop + 1]
    t = np.arange(start, stop + 1, dtype=np.float64) / edc.sample_rate
    if len(seg) < 2:
        raise InsufficientDecayError("too few samples in the fitting range")
    slope, _ = np.polyfit(t, seg, 1)
    if slope >= 0:
        raise InsufficientDecayError("non-negative decay slope")
    return float(-60.0 / slope)


def measure_rt60(samples: np.ndarray, fs: int = SAMPLE_RATE) -> Tuple[float, str]:
    """RT60 with T30, falling back to T20. Returns ``(seconds, method)``."""
    edc = schroeder_edc(samples, fs)
    try:
        return estimate_rt60(edc, "T30"), "T30"
    except InsufficientDecayError:
        return estimate_rt60(edc, "T20"), "T20"


def labeled_rir(room: ShoeboxRoom, src: Position, rcv: Position, room_id: str,
                max_order: Optional[int] = None, fs: int = SAMPLE_RATE) -> RirRecord:
    rec = image_source_rir(room, src, rcv, max_order=max_order, fs=fs)
    rec.rt60_s, rec.rt60_method = measure_rt60(rec.samples, fs)
    rec.room_id = room_id
    rec.extra["dims"] = list(room.dims)
    rec.extra["absorption"] = list(room.absorption)
    return rec


def exponential_rir(tau: float, fs: int = SAMPLE_RATE, n_samples: Optional[int] = None) -> np.ndarray:
    """Deterministic envelope ``exp(-n / (fs tau))``; long enough to reach -100 dB by default."""
    if n_samples is None:
        n_samples = int(math.ceil(15.0 * tau * fs))
    n = np.arange(n_samples, dtype=np.float64)
    return np.exp(-n / (fs * tau))
