"""Two-qubit polarization state mathematics for the XX-X photon cascade.

States are 4x4 density matrices in the product basis |HH>, |HV>, |VH>, |VV>,
with the first slot the biexciton (XX) photon and the second the exciton (X)
photon. Times are picoseconds, energies micro-electronvolts.

Phase convention: the cascade state is (|HH> + exp(+i w tau)|VV>)/sqrt(2),
with tau = t_X - t_XX >= 0 the emission delay and w = S / hbar.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import special

HBAR_EV_S = 6.582119569e-16

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-12
PSD_TOL = 1e-9

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))

_S2 = 1.0 / np.sqrt(2.0)
BASIS_KETS = {
    "H": np.array([1.0, 0.0], dtype=complex),
    "V": np.array([0.0, 1.0], dtype=complex),
    "D": np.array([_S2, _S2], dtype=complex),
    "A": np.array([_S2, -_S2], dtype=complex),
    "R": np.array([_S2, 1j * _S2], dtype=complex),
    "L": np.array([_S2, -1j * _S2], dtype=complex),
}
BASIS_LABELS = ("H", "V", "D", "A", "R", "L")
ORTHOGONAL = {"H": "V", "V": "H", "D": "A", "A": "D", "R": "L", "L": "R"}


class StateError(ValueError):
    """Raised when a matrix is not a valid two-qubit density matrix."""


@dataclass(frozen=True)
class BasisState:
    label: str
    ket: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.label not in BASIS_KETS:
            raise ValueError(f"unknown basis label {self.label!r}; expected one of {BASIS_LABELS}")
        object.__setattr__(self, "ket", BASIS_KETS[self.label].copy())

    @property
    def orthogonal(self) -> "BasisState":
        return BasisState(ORTHOGONAL[self.label])


def basis_state(label: str | BasisState) -> BasisState:
    return label if isinstance(label, BasisState) else BasisState(label)


@dataclass(frozen=True)
class CascadeModelParams:
    """Physical parameters of the cascade and its detection.

    Parameters
    ----------
    fss_energy : float
        Exciton fine-structure splitting S in ueV.
    t1_x, t1_xx : float
        Exciton and biexciton radiative lifetimes in ps.
    jitter_fwhm_2ph : float
        FWHM of the two-photon detection time jitter in ps.
    basis_rotation : float
        Angle in degrees between the lab H/V axes and the dot eigenbasis.
    """

    fss_energy: float = 2.54
    t1_x: float = 162.0
    t1_xx: float = 120.0
    jitter_fwhm_2ph: float = 50.0
    basis_rotation: float = 0.0

    def __post_init__(self):
        if not (self.t1_x > 0 and self.t1_xx > 0):
            raise ValueError("lifetimes must be positive")
        if self.jitter_fwhm_2ph < 0 or self.fss_energy < 0:
            raise ValueError("jitter and fine-structure splitting must be non-negative")
        for name in ("fss_energy", "t1_x", "t1_xx", "jitter_fwhm_2ph", "basis_rotation"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def omega(self) -> float:
        """Precession angular frequency in rad/ps."""
        return precession_frequency(self.fss_energy)

    @property
    def jitter_sigma(self) -> float:
        return self.jitter_fwhm_2ph * FWHM_TO_SIGMA


def precession_frequency(fss_energy_uev: float) -> float:
    """Angular frequency S/hbar in rad/ps for a splitting given in ueV."""
    return fss_energy_uev * 1e-6 / HBAR_EV_S * 1e-12


class DensityMatrix:
    """Validated 4x4 two-photon density matrix.

    Eigenvalues in [-1e-9, 0) are treated as round-off: they are clamped to
    zero and the matrix is renormalized. Anything more negative raises
    :class:`StateError`.
    """

    __slots__ = ("_m",)

    def __init__(self, matrix):
        m = np.array(matrix, dtype=complex)
        if m.shape != (4, 4):
            raise StateError(f"expected a 4x4 matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise StateError("density matrix has non-finite entries")
        if np.max(np.abs(m - m.conj().T)) > HERMITIAN_TOL:
            raise StateError("density matrix is not Hermitian")
        m = 0.5 * (m + m.conj().T)
        tr = np.trace(m).real
        if abs(tr - 1.0) > TRACE_TOL:
            raise StateError(f"trace is {tr!r}, expected 1")
        w, v = np.linalg.eigh(m)
        if w[0] < -PSD_TOL:
            raise StateError(f"not positive semidefinite (smallest eigenvalue {w[0]:.3e})")
        if w[0] < 0:
            w = np.clip(w, 0.0, None)
            m = (v * w) @ v.conj().T
            m = 0.5 * (m + m.conj().T)
            m /= np.trace(m).real
        m.flags.writeable = False
        self._m = m

    @classmethod
    def from_ket(cls, ket) -> "DensityMatrix":
        psi = np.asarray(ket, dtype=complex)
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()))

    @property
    def matrix(self) -> np.ndarray:
        return self._m

    def __array__(self, dtype=None, copy=None):
        return self._m.astype(dtype) if dtype is not None else self._m.copy()

    def __getitem__(self, idx):
        return self._m[idx]

    def __repr__(self):
        return f"DensityMatrix({np.array2string(self._m, precision=4)})"

    def purity(self) -> float:
        return float(np.trace(self._m @ self._m).real)

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self._m)


def _as_matrix(rho) -> np.ndarray:
    if isinstance(rho, DensityMatrix):
        return rho.matrix
    return np.asarray(rho, dtype=complex)


def _rotation(angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]], dtype=complex)


_BELL_KETS = {
    "phi+": np.array([1, 0, 0, 1], dtype=complex) * _S2,
    "phi-": np.array([1, 0, 0, -1], dtype=complex) * _S2,
    "psi+": np.array([0, 1, 1, 0], dtype=complex) * _S2,
    "psi-": np.array([0, 1, -1, 0], dtype=complex) * _S2,
}


def bell_state(kind: str) -> DensityMatrix:
    """Pure Bell state; ``kind`` is one of phi+, phi-, psi+, psi- (a unicode minus is accepted)."""
    key = kind.replace("−", "-").lower()
    if key not in _BELL_KETS:
        raise ValueError(f"unknown Bell state {kind!r}")
    return DensityMatrix.from_ket(_BELL_KETS[key])


def maximally_mixed() -> DensityMatrix:
    return DensityMatrix(np.eye(4) / 4.0)


def _coherent_cascade(coherence: complex, rotation_deg: float) -> np.ndarray:
    """Cascade state with HH/VV populations 1/2 and <VV|rho|HH> = coherence/2."""
    m = np.zeros((4, 4), dtype=complex)
    m[0, 0] = m[3, 3] = 0.5
    m[3, 0] = 0.5 * coherence
    m[0, 3] = 0.5 * np.conj(coherence)
    if rotation_deg:
        u = _rotation(rotation_deg)
        uu = np.kron(u, u)
        m = uu @ m @ uu.conj().T
    return m


def ideal_cascade_state(tau: float, params: CascadeModelParams) -> DensityMatrix:
    """Pure cascade state (|HH> + exp(i w tau)|VV>)/sqrt(2) at emission delay ``tau``."""
    if not np.isfinite(tau):
        raise ValueError("tau must be finite")
    phase = np.exp(1j * params.omega * tau)
    return DensityMatrix(_coherent_cascade(phase, params.basis_rotation))


def averaged_coherence(tau: float, params: CascadeModelParams) -> complex:
    """Jitter- and emission-weighted mean of exp(i w tau') at measured delay ``tau``.

    The weight K(tau - tau') exp(-tau'/T1) on tau' >= 0 is a Gaussian in tau'
    centred at mu = tau - sigma^2/T1 and truncated at zero, so the mean has the
    closed form

        exp(i w mu - w^2 sigma^2 / 2) erfc(z) / erfc(a),
        a = -mu / (sqrt2 sigma),  z = a - i w sigma / sqrt2.

    For mu <= 0 the equivalent Faddeeva form w(i z) / erfcx(a) avoids the
    underflow of both erfc factors.
    """
    if not np.isfinite(tau):
        raise ValueError("tau must be finite")
    sigma = params.jitter_sigma
    w = params.omega
    if sigma == 0.0:
        return complex(np.exp(1j * w * tau))
    mu = tau - sigma * sigma / params.t1_x
    a = -mu / (np.sqrt(2.0) * sigma)
    z = a - 1j * w * sigma / np.sqrt(2.0)
    if mu > 0:
        c = np.exp(1j * w * mu - 0.5 * (w * sigma) ** 2) * special.erfc(z) / special.erfc(a)
    else:
        c = special.wofz(1j * z) / special.erfcx(a)
    return complex(c)


def jitter_averaged_state(tau: float, params: CascadeModelParams) -> DensityMatrix:
    """Cascade state seen through Gaussian two-photon timing jitter.

    Averages the ideal state over true emission delays tau' >= 0 with weight
    K(tau - tau') exp(-tau'/T1). With zero jitter this is the ideal state at
    ``tau``.
    """
    c = averaged_coherence(tau, params)
    return DensityMatrix(_coherent_cascade(c, params.basis_rotation))


def partial_transpose(rho, subsystem: str = "second") -> np.ndarray:
    m = _as_matrix(rho).reshape(2, 2, 2, 2)
    if subsystem == "second":
        pt = m.transpose(0, 3, 2, 1)
    elif subsystem == "first":
        pt = m.transpose(2, 1, 0, 3)
    else:
        raise ValueError("subsystem must be 'first' or 'second'")
    return pt.reshape(4, 4)


def negativity_2n(rho) -> float:
    """Twice the entanglement negativity: 2 * sum of |negative eigenvalues| of the partial transpose."""
    ev = np.linalg.eigvalsh(partial_transpose(rho))
    return float(min(1.0, max(0.0, -2.0 * ev[ev < 0].sum())))


def fidelity_to(rho, target) -> float:
    """Overlap <phi|rho|phi> with a pure target state."""
    t = _as_matrix(target)
    w, v = np.linalg.eigh(t)
    if w[-2] > 1e-9:
        raise StateError("target must be a pure state")
    phi = v[:, -1]
    f = np.vdot(phi, _as_matrix(rho) @ phi).real
    return float(min(1.0, max(0.0, f)))


def product_ket(basis_xx: str | BasisState, basis_x: str | BasisState) -> np.ndarray:
    return np.kron(basis_state(basis_xx).ket, basis_state(basis_x).ket)


def projector_probability(rho, basis_xx, basis_x) -> float:
    psi = product_ket(basis_xx, basis_x)
    p = np.vdot(psi, _as_matrix(rho) @ psi).real
    return float(min(1.0, max(0.0, p)))


def jones_retarder(retardance: float, fast_axis_angle: float) -> np.ndarray:
    """Jones matrix of a linear retarder.

    The slow axis is delayed by ``retardance`` degrees, written as
    R(theta) diag(1, exp(-i delta)) R(-theta). With this sign a quarter-wave
    plate at 45 deg turns H into R = (H + iV)/sqrt(2).
    """
    d = np.deg2rad(retardance)
    return _rotation(fast_axis_angle) @ np.diag([1.0, np.exp(-1j * d)]) @ _rotation(-fast_axis_angle)


def hwp(angle: float) -> np.ndarray:
    return jones_retarder(180.0, angle)


def qwp(angle: float) -> np.ndarray:
    return jones_retarder(90.0, angle)


@dataclass(frozen=True)
class WaveplateSetting:
    """Analyzer setting: light passes the QWP, then the HWP, then the PBS (H port)."""

    hwp_angle: float
    qwp_angle: float

    def __post_init__(self):
        object.__setattr__(self, "hwp_angle", float(self.hwp_angle) % 180.0)
        object.__setattr__(self, "qwp_angle", float(self.qwp_angle) % 180.0)

    def jones(self) -> np.ndarray:
        return hwp(self.hwp_angle) @ qwp(self.qwp_angle)

    def transmission(self, ket) -> float:
        out = self.jones() @ np.asarray(ket, dtype=complex)
        return float(abs(out[0]) ** 2)


def basis_projection_settings(basis) -> WaveplateSetting:
    """Waveplate angles that route ``basis`` onto the PBS transmission port.

    Searches the 22.5 deg lattice, preferring the smallest QWP angle and then
    the smallest HWP angle, and verifies the result by applying the chain.
    """
    ket = basis_state(basis).ket
    steps = np.arange(8) * 22.5
    for q in steps:
        for h in steps:
            s = WaveplateSetting(h, q)
            if s.transmission(ket) >= 1.0 - 1e-12:
                return s
    raise RuntimeError(f"no waveplate setting found for {basis!r}")  # pragma: no cover


def model_negativity_curve(params: CascadeModelParams, tau_grid: Iterable[float]) -> list[tuple[float, float]]:
    """2n of the jitter-averaged cascade state at each delay of ``tau_grid``."""
    taus = np.asarray(list(tau_grid), dtype=float)
    if not np.all(np.isfinite(taus)):
        raise ValueError("tau grid must be finite")
    if taus.size > 1 and np.any(np.diff(taus) < 0):
        raise ValueError("tau grid must be ascending")
    out = []
    for t in taus:
        # for this state family 2n equals twice the coherence magnitude
        out.append((float(t), negativity_2n(jitter_averaged_state(t, params))))
    return out


def local_unitary(rho, u_first: np.ndarray, u_second: np.ndarray) -> np.ndarray:
    uu = np.kron(u_first, u_second)
    return uu @ _as_matrix(rho) @ uu.conj().T


def werner_state(p: float) -> DensityMatrix:
    return DensityMatrix(p * bell_state("phi+").matrix + (1.0 - p) * np.eye(4) / 4.0)


def projector_set(labels: Sequence[tuple[str, str]]) -> np.ndarray:
    """Stack of product kets, one row per (XX basis, X basis) pair."""
    return np.array([product_ket(a, b) for a, b in labels])
