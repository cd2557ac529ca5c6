"""Synthetic studies with two complementary view families.

Each study hides two bits ``a`` and ``b`` with label ``a + b``. PLAX slots
carry ``a`` on the first half of the feature vector, PSAX slots carry ``b`` on
the second half. Within each view pair one clip is good (quality drawn from
``quality_range``) and the other degraded (``degraded_range``), so an agent
has to pick one clip of each family and sometimes a second opinion.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import logsumexp

from .core import DEFAULT_VIEWS, FEATURE_DTYPE, AcquisitionState, StudyRecord, ViewSlot

# slot indices of each family in the fixed layout
PLAX_SLOTS = (0, 1)
PSAX_SLOTS = (2, 3)


@dataclass
class GeneratorSpec:
    n_studies: int = 2000
    d: int = 16
    noise_sigma: float = 0.3
    quality_range: tuple[float, float] = (0.8, 1.0)
    degraded_range: tuple[float, float] = (0.1, 0.4)
    seed: int = 0

    def __post_init__(self):
        self.quality_range = tuple(float(x) for x in self.quality_range)
        self.degraded_range = tuple(float(x) for x in self.degraded_range)
        self.validate()

    def validate(self):
        if self.n_studies < 0:
            raise ValueError("n_studies must be >= 0")
        if self.d < 4 or self.d % 2:
            raise ValueError(f"d must be even and >= 4, got {self.d}")
        if not self.noise_sigma >= 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        for name, (lo, hi) in (("quality_range", self.quality_range),
                               ("degraded_range", self.degraded_range)):
            if not 0 < lo <= hi <= 1:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["quality_range"] = list(self.quality_range)
        out["degraded_range"] = list(self.degraded_range)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Latent:
    a: int
    b: int
    qualities: tuple[float, ...]
    good_slots: tuple[int, int]  # the non-degraded clip of each family


def _draw_study(spec: GeneratorSpec, i: int):
    rng = np.random.default_rng([spec.seed, i])
    a, b = (int(x) for x in rng.integers(0, 2, size=2))
    good_plax = PLAX_SLOTS[int(rng.integers(0, 2))]
    good_psax = PSAX_SLOTS[int(rng.integers(0, 2))]
    qualities = []
    for slot in range(4):
        lo, hi = spec.quality_range if slot in (good_plax, good_psax) else spec.degraded_range
        qualities.append(float(rng.uniform(lo, hi)))
    noise = rng.standard_normal((4, spec.d))

    half = spec.d // 2
    mu_a = np.full(half, 2 * a - 1, dtype=float)
    mu_b = np.full(half, 2 * b - 1, dtype=float)
    feats = spec.noise_sigma * noise
    for slot in range(4):
        if slot in PLAX_SLOTS:
            feats[slot, :half] += qualities[slot] * mu_a
        else:
            feats[slot, half:] += qualities[slot] * mu_b
    feats = feats.astype(FEATURE_DTYPE)
    record = StudyRecord(
        study_id=f"syn{spec.seed}-{i:06d}",
        label=a + b,
        slots=tuple(ViewSlot(view=v, features=feats[k], cost=1.0) for k, v in enumerate(DEFAULT_VIEWS)),
    )
    return record, Latent(a, b, tuple(qualities), (good_plax, good_psax))


def generate_with_latents(spec: GeneratorSpec):
    spec.validate()
    pairs = [_draw_study(spec, i) for i in range(spec.n_studies)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def generate(spec: GeneratorSpec) -> list[StudyRecord]:
    return generate_with_latents(spec)[0]


def write_spec(spec: GeneratorSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_spec(path) -> GeneratorSpec:
    with open(path, encoding="utf-8") as fh:
        return GeneratorSpec.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Bayes oracle

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)


def _log_quality_evidence(s: int, total: float, k: int, sigma: float, qrange) -> float:
    """log E_q[exp(q*s*total/sigma^2 - q^2*k/(2 sigma^2))] for q ~ U(qrange)."""
    lo, hi = qrange
    if hi == lo:
        q = np.array([lo])
        w = np.array([1.0])
    else:
        q = 0.5 * (hi - lo) * _GL_NODES + 0.5 * (hi + lo)
        w = 0.5 * _GL_WEIGHTS  # integrates to 1 over [-1,1] -> mean over range
    expo = (q * s * total - 0.5 * q * q * k) / sigma**2
    return float(logsumexp(expo, b=w))


def _family_log_lik(state: AcquisitionState, slots, half_slice, spec: GeneratorSpec) -> np.ndarray:
    """log p(observed clips of one family | bit) for bit in (0, 1), up to a shared constant."""
    acquired = [i for i in slots if state.mask[i]]
    if not acquired:
        return np.zeros(2)
    k = spec.d // 2
    totals = {i: float(np.sum(state.features[i, half_slice], dtype=np.float64)) for i in acquired}
    out = np.empty(2)
    for bit in (0, 1):
        s = 2 * bit - 1
        # exactly one clip of the pair is the good one, each with prob 1/2
        roles = []
        for good in slots:
            ll = 0.0
            for i in acquired:
                qr = spec.quality_range if i == good else spec.degraded_range
                ll += _log_quality_evidence(s, totals[i], k, spec.noise_sigma, qr)
            roles.append(ll)
        out[bit] = logsumexp(roles) + np.log(0.5)
    return out


def _noiseless_family_post(state, slots, half_slice) -> np.ndarray:
    signs = {np.sign(np.sum(state.features[i, half_slice], dtype=np.float64))
             for i in slots if state.mask[i]}
    signs.discard(0.0)
    if len(signs) == 1:
        return np.array([0.0, 1.0]) if signs.pop() > 0 else np.array([1.0, 0.0])
    return np.array([0.5, 0.5])


def bayes_posterior(state: AcquisitionState, spec: GeneratorSpec) -> np.ndarray:
    """Posterior over labels {0,1,2} given the acquired clips."""
    half = spec.d // 2
    first, second = slice(0, half), slice(half, spec.d)
    if spec.noise_sigma == 0:
        pa = _noiseless_family_post(state, PLAX_SLOTS, first)
        pb = _noiseless_family_post(state, PSAX_SLOTS, second)
    else:
        la = _family_log_lik(state, PLAX_SLOTS, first, spec)
        lb = _family_log_lik(state, PSAX_SLOTS, second, spec)
        pa = np.exp(la - logsumexp(la))
        pb = np.exp(lb - logsumexp(lb))
    return np.array([pa[0] * pb[0], pa[0] * pb[1] + pa[1] * pb[0], pa[1] * pb[1]])


def bayes_oracle(state: AcquisitionState, spec: GeneratorSpec) -> int:
    # argmax returns the first maximum: ties go to the lower label
    return int(np.argmax(bayes_posterior(state, spec)))
