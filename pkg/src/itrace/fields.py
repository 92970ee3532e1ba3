"""EM field evaluation along validated ray paths.

Hertzian-dipole source, geometrical-optics reflection off perfect electric
conductors, and Kouyoumjian-Pathak uniform wedge diffraction, composed with
free-space spreading and phase per segment. Time convention exp(+j w t),
propagation factor exp(-j k r).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.constants import c as C0, mu_0

from .geom import dot3, norm3
from scipy.special import modfresnelm

ETA0 = mu_0 * C0  # free-space impedance, ~376.7303 ohm

GRAZING_TOL = 1e-9


@dataclass(frozen=True)
class RadioConfig:
    frequency: float  # Hz
    radiated_power: float = 1.0  # W
    dipole_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        if self.frequency <= 0.0:
            raise ValueError("frequency must be positive")
        if self.radiated_power <= 0.0:
            raise ValueError("radiated power must be positive")
        a = np.asarray(self.dipole_axis, dtype=float)
        object.__setattr__(self, "dipole_axis", a / np.linalg.norm(a))

    @property
    def wavenumber(self) -> float:
        return 2.0 * math.pi * self.frequency / C0

    @property
    def field_constant(self) -> float:
        """Broadside |E| * r: sqrt(3 eta P / 4 pi), from the requirement that
        the integrated far-field Poynting flux equals the radiated power."""
        return math.sqrt(3.0 * ETA0 * self.radiated_power / (4.0 * math.pi))


@dataclass(frozen=True)
class FieldSample:
    fop_index: int
    E: np.ndarray  # complex 3-vector, V/m


def dipole_field(cfg: RadioConfig, tx: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Far-field of a Hertzian dipole at p: E along the polar unit vector of
    the dipole frame, magnitude ~ sin(theta)/r, phase exp(-j k r)."""
    E = dipole_field_batch(cfg, np.asarray(tx, float), np.asarray(p, float)[None, :])
    return E[0]


def dipole_field_batch(cfg: RadioConfig, tx: np.ndarray, pts: np.ndarray) -> np.ndarray:
    rv = pts - tx
    r = norm3(rv)
    if np.any(r <= 0.0):
        raise ValueError("observation point coincides with the source")
    rhat = rv / r[:, None]
    axis = cfg.dipole_axis
    cos_th = dot3(rhat, axis)
    sin_th = np.sqrt(np.maximum(0.0, 1.0 - cos_th**2))
    # theta_hat = (cos_th * rhat - axis) / sin_th; zero field on the axis
    safe = np.where(sin_th > 1e-300, sin_th, 1.0)
    theta_hat = (cos_th[:, None] * rhat - axis) / safe[:, None]
    amp = cfg.field_constant * sin_th / r * np.exp(-1j * cfg.wavenumber * r)
    return amp[:, None] * theta_hat


def go_reflect(E_in: np.ndarray, dir_in: np.ndarray, n: np.ndarray):
    """PEC reflection in the ray-fixed basis: the component perpendicular to
    the plane of incidence takes coefficient -1, the parallel one +1.
    Returns (E_out, dir_out); magnitude is preserved."""
    E_out, d_out = go_reflect_batch(
        np.asarray(E_in, complex)[None, :],
        np.asarray(dir_in, float)[None, :],
        np.asarray(n, float)[None, :],
    )
    return E_out[0], d_out[0]


def go_reflect_batch(E_in: np.ndarray, dir_in: np.ndarray, n: np.ndarray):
    cosi = dot3(dir_in, n)
    if np.any(np.abs(cosi) < GRAZING_TOL):
        raise ValueError("grazing incidence: reflection undefined")
    d_out = dir_in - 2.0 * cosi[:, None] * n
    ep = np.cross(dir_in, n)
    ep_n = norm3(ep)
    normal_inc = ep_n < 1e-12
    ep_safe = np.where(normal_inc[:, None], np.array([1.0, 0.0, 0.0]), ep)
    ep_hat = ep_safe / norm3(ep_safe)[:, None]
    epar_i = np.cross(ep_hat, dir_in)
    epar_o = np.cross(ep_hat, d_out)
    a_perp = dot3(E_in, ep_hat)
    a_par = dot3(E_in, epar_i)
    E_out = -a_perp[:, None] * ep_hat + a_par[:, None] * epar_o
    E_out = np.where(normal_inc[:, None], -E_in, E_out)
    return E_out, d_out


def transition_function(x):
    """Kouyoumjian-Pathak Fresnel transition function F(x) for x >= 0,
    F(0) = 0 and F -> 1 for large argument."""
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    sq = np.sqrt(x)
    fm = modfresnelm(sq)[0]
    return 2.0j * sq * np.exp(1j * x) * fm


def _n_int(beta, n, sign):
    """Integer N minimizing |2 pi n N - (beta + sign*pi)|."""
    return np.round((np.asarray(beta) + sign * math.pi) / (2.0 * math.pi * n))


def _a_param(beta, n, sign):
    return 2.0 * np.cos((2.0 * math.pi * n * _n_int(beta, n, sign) - beta) / 2.0) ** 2


def _cot_term(k, n, beta, L, sign):
    """One cotangent * transition-function term, with the small-argument
    limit substituted where the cotangent blows up at a shadow or
    reflection boundary."""
    beta = np.asarray(beta, dtype=float)
    L = np.asarray(L, dtype=float)
    N = _n_int(beta, n, sign)
    eps = beta - sign * (2.0 * math.pi * n * N - math.pi)
    out = np.empty(beta.shape, dtype=complex)
    near = np.abs(eps) <= 1e-7
    if np.any(near):
        # cot((pi + sign*beta)/(2n)) ~ sign * 2n/eps near the boundary, so
        # the whole limit carries the term's sign
        e = eps[near]
        sgn = np.where(e >= 0.0, 1.0, -1.0)
        lim = np.sqrt(2.0 * math.pi * k * L[near]) * sgn
        lim = lim - 2.0 * k * L[near] * e * np.exp(1j * math.pi / 4.0)
        out[near] = sign * n * np.exp(1j * math.pi / 4.0) * lim
    far = ~near
    if np.any(far):
        cot = 1.0 / np.tan((math.pi + sign * beta[far]) / (2.0 * n))
        out[far] = cot * transition_function(k * L[far] * _a_param(beta[far], n, sign))
    return out


def utd_coeffs(nwedge: float, phi_inc, phi_out, beta0, L, k: float):
    """Soft and hard PEC wedge diffraction coefficients (Kouyoumjian-Pathak
    four-term form), finite and continuous across shadow and reflection
    boundaries. Angles in the exterior sector [0, nwedge*pi], L > 0.

    Accepts scalars or broadcastable arrays; returns (D_soft, D_hard).
    """
    phi_inc, phi_out, beta0, L = np.broadcast_arrays(
        np.asarray(phi_inc, float),
        np.asarray(phi_out, float),
        np.asarray(beta0, float),
        np.asarray(L, float),
    )
    n = float(nwedge)
    bm = phi_out - phi_inc
    bp = phi_out + phi_inc
    d1 = _cot_term(k, n, bm, L, +1.0)
    d2 = _cot_term(k, n, bm, L, -1.0)
    d3 = _cot_term(k, n, bp, L, +1.0)
    d4 = _cot_term(k, n, bp, L, -1.0)
    common = -np.exp(-1j * math.pi / 4.0) / (
        2.0 * n * math.sqrt(2.0 * math.pi * k) * np.sin(beta0)
    )
    D_soft = common * (d1 + d2 - (d3 + d4))
    D_hard = common * (d1 + d2 + (d3 + d4))
    if D_soft.ndim == 0:
        return complex(D_soft), complex(D_hard)
    return D_soft, D_hard


def diffract_field(
    E_in: np.ndarray,
    dir_in: np.ndarray,
    dir_out: np.ndarray,
    edge_dir: np.ndarray,
    phi_inc,
    phi_out,
    nwedge: float,
    s_in,
    s_out,
    k: float,
):
    """Apply the edge-diffraction dyadic to the incident field at the
    diffraction point and propagate to distance s_out along the cone.

    Batched over leading axis. Spreading uses the spherical-wave divergence
    factor sqrt(s'/(s (s'+s))) and distance parameter
    L = s s' sin^2(beta0) / (s + s').
    """
    cosb = dot3(dir_in, np.broadcast_to(edge_dir, dir_in.shape))
    sinb = np.sqrt(np.maximum(1e-300, 1.0 - cosb**2))
    beta0 = np.arccos(np.clip(cosb, -1.0, 1.0))
    L = s_out * s_in * sinb**2 / (s_in + s_out)
    Ds, Dh = utd_coeffs(nwedge, phi_inc, phi_out, beta0, L, k)

    phi_i_hat = np.cross(dir_in, np.broadcast_to(edge_dir, dir_in.shape))
    phi_i_hat = phi_i_hat / norm3(phi_i_hat)[:, None]
    beta_i_hat = np.cross(phi_i_hat, dir_in)
    phi_o_hat = np.cross(np.broadcast_to(edge_dir, dir_out.shape), dir_out)
    phi_o_hat = phi_o_hat / norm3(phi_o_hat)[:, None]
    beta_o_hat = np.cross(phi_o_hat, dir_out)

    e_beta = dot3(E_in, beta_i_hat)
    e_phi = dot3(E_in, phi_i_hat)
    spread = np.sqrt(s_in / (s_out * (s_in + s_out)))
    phase = np.exp(-1j * k * s_out)
    Ed = -(
        (Ds * e_beta)[:, None] * beta_o_hat + (Dh * e_phi)[:, None] * phi_o_hat
    )
    return Ed * (spread * phase)[:, None]


def propagate_path(path, cfg: RadioConfig) -> np.ndarray:
    """Complex E at the observation point of a validated, shadow-tested
    path: dipole launch, one GO dyad per reflection, one uniform-diffraction
    dyad at the (single) edge hop, free-space spreading and phase on every
    segment. Pure reflections carry total unfolded-distance spreading."""
    k = cfg.wavenumber
    pts = [path.tx] + [h.point for h in path.hops] + [path.fop]

    if not path.hops:
        return dipole_field(cfg, path.tx, path.fop)

    E = dipole_field(cfg, path.tx, pts[1])
    s_acc = float(np.linalg.norm(pts[1] - pts[0]))
    for i, hop in enumerate(path.hops):
        d_in = (pts[i + 1] - pts[i]) / np.linalg.norm(pts[i + 1] - pts[i])
        seg_next = pts[i + 2] - pts[i + 1]
        s_next = float(np.linalg.norm(seg_next))
        d_out = seg_next / s_next
        if hop.kind == "reflect":
            E, _ = go_reflect(E, d_in, hop.normal)
            E = E * (s_acc / (s_acc + s_next)) * np.exp(-1j * k * s_next)
            s_acc += s_next
        else:  # diffract
            s_out_total = sum(
                float(np.linalg.norm(pts[j + 1] - pts[j]))
                for j in range(i + 1, len(pts) - 1)
            )
            E = diffract_field(
                E[None, :],
                d_in[None, :],
                d_out[None, :],
                hop.edge_dir,
                np.array([hop.phi_inc]),
                np.array([hop.phi_out]),
                hop.nwedge,
                np.array([s_acc]),
                np.array([s_out_total]),
                k,
            )[0]
            # downstream reflections rotate polarization only; spreading and
            # phase for the whole exit chain are in the diffraction term
            for j in range(i + 1, len(path.hops)):
                d2_in = (pts[j + 1] - pts[j]) / np.linalg.norm(pts[j + 1] - pts[j])
                E, _ = go_reflect(E, d2_in, path.hops[j].normal)
            break
    return E


def accumulate(contributions, n_fops: int):
    """Coherent per-FOP sum in a canonical order (sorted by the path's
    primitive sequence) for bit-reproducibility across batching, workers,
    and partitions.

    contributions: iterable of (fop_index, seq_key, complex E 3-vector).
    Returns (E array (n_fops, 3) complex, path_count array (n_fops,)).
    """
    per_fop: list[list] = [[] for _ in range(n_fops)]
    for fop_idx, key, E in contributions:
        per_fop[fop_idx].append((key, E))
    out = np.zeros((n_fops, 3), dtype=complex)
    counts = np.zeros(n_fops, dtype=np.int64)
    for i, items in enumerate(per_fop):
        items.sort(key=lambda kv: kv[0])
        acc = np.zeros(3, dtype=complex)
        for _, E in items:
            acc = acc + E
        out[i] = acc
        counts[i] = len(items)
    return out, counts


def rmspe(a, b) -> float:
    """Root-mean-square percentage error of |field| list a against
    reference b, on linear magnitudes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    if np.any(b == 0.0):
        raise ValueError("reference contains zero entries")
    return float(100.0 * np.sqrt(np.mean(((a - b) / b) ** 2)))
