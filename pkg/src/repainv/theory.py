"""Alignment statistics, the two alignment bounds as numerical checks, feature
divergences between image sets, and the encoder robustness study.

Feature arrays are (..., N, D): N patch rows of dimension D per image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .degrade import gaussblur, superres
from .diffcore import Tape
from .nets import FeatureEncoder, ProjectionHead, encode_features, spectral_norm
from .schedule import InterpolantSchedule, LinearSchedule, corrupt

# ---------------------------------------------------------------------------
# per-image statistics


def _unit(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm feature row")
    return a / n


def mean_embedding(feats: np.ndarray) -> np.ndarray:
    return np.asarray(feats).mean(axis=-2)


def mis_repa(f_x: np.ndarray, g_h: np.ndarray) -> np.ndarray:
    """(1/N) sum_n ||f^n(x) - g(h^n)||^2 per image."""
    if f_x.shape != g_h.shape:
        raise ValueError(f"grid mismatch {f_x.shape} vs {g_h.shape}")
    d = f_x - g_h
    return (d * d).sum(axis=-1).mean(axis=-1)


def approx_err(f_x: np.ndarray, f_xbar: np.ndarray) -> np.ndarray:
    """(1/N) sum_n ||f^n(x) - f^n(xbar)||^2 per image."""
    if f_x.shape != f_xbar.shape:
        raise ValueError(f"shape mismatch {f_x.shape} vs {f_xbar.shape}")
    d = f_x - f_xbar
    return (d * d).sum(axis=-1).mean(axis=-1)


def mean_patch_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (_unit(a) * _unit(b)).sum(axis=-1).mean(axis=-1)


def repa_score(f_xbar: np.ndarray, g_h: np.ndarray) -> np.ndarray:
    """(1/N) sum_n cos(f^n(xbar), g(h^n)) per image."""
    return mean_patch_cosine(f_xbar, g_h)


def projected_tap(model, head: ProjectionHead, states: np.ndarray, t: float = 0.0,
                  schedule: InterpolantSchedule | None = None,
                  rng: np.random.Generator | None = None, normalize: bool = True) -> np.ndarray:
    """g(G2(state_t, t)) for clean states, noised to time t when t > 0."""
    schedule = schedule or LinearSchedule()
    states = np.asarray(states, dtype=np.float64)
    if t > 0:
        if rng is None:
            raise ValueError("t > 0 needs an rng for the corruption noise")
        states = corrupt(schedule, states, rng.standard_normal(states.shape), t)
    _, h = model.velocity_and_tap(states, np.full(len(states), float(t)))
    g = head(h)
    return _unit(g) if normalize else g


def mis_repa_batch(model, head, states, feats, t=0.0, schedule=None, rng=None,
                   normalize: bool = True) -> np.ndarray:
    """MisREPA per image; ``states`` are what the model sees (pixels or latents)
    and ``feats`` the encoder features of the matching clean images.

    With ``normalize`` the projected tap is put on the unit sphere like the
    encoder features, so the value equals 2 - 2 * mean patch cosine.
    """
    g = projected_tap(model, head, states, t, schedule, rng, normalize)
    return mis_repa(feats, g)


# ---------------------------------------------------------------------------
# set-level divergences


def mmd(feats_p: np.ndarray, feats_q: np.ndarray) -> float:
    """||mean_x mu_f(x) - mean_x' mu_f(x')||^2 with mu_f the patch-mean embedding."""
    if len(feats_p) == 0 or len(feats_q) == 0:
        raise ValueError("empty sample")
    d = mean_embedding(feats_p).mean(axis=0) - mean_embedding(feats_q).mean(axis=0)
    return float(d @ d)


def mmd_images(images_p, images_q, encoder: FeatureEncoder) -> float:
    if len(images_p) == 0 or len(images_q) == 0:
        raise ValueError("empty sample")
    return mmd(encode_features(encoder, images_p).values, encode_features(encoder, images_q).values)


def pair_feature_mmd(x: np.ndarray, xhat: np.ndarray, encoder: FeatureEncoder) -> np.ndarray:
    """Per-image ||mu_f(x) - mu_f(xhat)||^2 (the one-pair mean-embedding MMD)."""
    fa = mean_embedding(encode_features(encoder, np.asarray(x)).values)
    fb = mean_embedding(encode_features(encoder, np.asarray(xhat)).values)
    d = fa - fb
    return (d * d).sum(axis=-1)


def frechet_proxy(feats_p: np.ndarray, feats_q: np.ndarray) -> float:
    """Frechet distance between diagonal Gaussians fitted to pooled patch features."""
    if len(feats_p) < 2 or len(feats_q) < 2:
        raise ValueError("need at least 2 samples per set")
    a = np.asarray(feats_p).reshape(-1, feats_p.shape[-1])
    b = np.asarray(feats_q).reshape(-1, feats_q.shape[-1])
    mu = a.mean(axis=0) - b.mean(axis=0)
    s1, s2 = a.var(axis=0), b.var(axis=0)
    return float(mu @ mu + np.sum(s1 + s2 - 2 * np.sqrt(s1 * s2)))


def frechet_images(images_p, images_q, encoder: FeatureEncoder) -> float:
    return frechet_proxy(encode_features(encoder, images_p).values,
                         encode_features(encoder, images_q).values)


# ---------------------------------------------------------------------------
# pointwise alignment bound


@dataclass
class AlignmentReport:
    repa: np.ndarray
    misrepa: np.ndarray
    approx_err: np.ndarray
    mean_dist: np.ndarray
    rhs: np.ndarray
    residual: np.ndarray
    mmd: float
    expectation_rhs: float
    expectation_residual: float
    extra: dict = field(default_factory=dict)

    @property
    def min_residual(self) -> float:
        return float(min(self.residual.min(), self.expectation_residual))

    def to_dict(self) -> dict:
        return {
            "n": int(len(self.repa)),
            "mean_repa": float(self.repa.mean()),
            "mean_misrepa": float(self.misrepa.mean()),
            "mean_approx_err": float(self.approx_err.mean()),
            "mmd": self.mmd,
            "min_pointwise_residual": float(self.residual.min()),
            "expectation_residual": self.expectation_residual,
            **self.extra,
        }


def alignment_bound(f_x, f_xbar, f_xhat, g_xhat) -> AlignmentReport:
    """Evaluate REPA(xbar, xhat) <= 1 - |mu(x) - mu(xhat)|^2/8 + ApproxErr/2 + MisREPA/4.

    All four inputs are (B, N, D) with unit rows; ``g_xhat`` is the projected
    tap of xhat.  Also evaluates the set-level form with the mean-embedding MMD.
    """
    arrs = [np.asarray(a, dtype=np.float64) for a in (f_x, f_xbar, f_xhat, g_xhat)]
    for a in arrs:
        if np.max(np.abs(np.linalg.norm(a, axis=-1) - 1)) > 1e-9:
            raise ValueError("the bound needs l2-normalized feature rows")
    f_x, f_xbar, f_xhat, g_xhat = arrs
    repa = repa_score(f_xbar, g_xhat)
    mis = mis_repa(f_xhat, g_xhat)
    apx = approx_err(f_x, f_xbar)
    d = mean_embedding(f_x) - mean_embedding(f_xhat)
    mdist = (d * d).sum(axis=-1)
    rhs = 1 - mdist / 8 + apx / 2 + mis / 4
    set_mmd = mmd(f_x, f_xhat)
    e_rhs = 1 - set_mmd / 8 + apx.mean() / 2 + mis.mean() / 4
    return AlignmentReport(repa, mis, apx, mdist, rhs, rhs - repa, set_mmd,
                           float(e_rhs), float(e_rhs - repa.mean()))


def check_alignment_bound(x, xbar, xhat, model, head, encoder: FeatureEncoder,
                          to_state=None) -> AlignmentReport:
    """Bound on image triples; the model sees ``to_state(xhat)`` at t=0."""
    if not encoder.cfg.normalize:
        raise ValueError("the bound assumes l2-normalized encoder features")
    to_state = to_state or (lambda im: im)
    f = [encode_features(encoder, im).values for im in (x, xbar, xhat)]
    g = projected_tap(model, head, to_state(np.asarray(xhat)), 0.0, normalize=True)
    return alignment_bound(f[0], f[1], f[2], g)


def cosine_norm_identity_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |cos(a,b) - (1 - ||a-b||^2/2)| for unit rows."""
    a, b = _unit(a), _unit(b)
    cos = (a * b).sum(axis=-1)
    return float(np.max(np.abs(cos - (1 - 0.5 * ((a - b) ** 2).sum(axis=-1)))))


def jensen_gap(vectors: np.ndarray) -> float:
    """mean ||v||^2 - ||mean v||^2 over the leading axis (never negative)."""
    v = np.asarray(vectors, dtype=np.float64)
    m = v.mean(axis=0)
    return float((v * v).sum(axis=-1).mean() - m @ m)


# ---------------------------------------------------------------------------
# representation contraction under a linear tap


@dataclass
class LinearTapFixture:
    """G2(z) = reshape(J z, (N, D2)) with a linear head phi (D1 x D2)."""

    J: np.ndarray
    phi: np.ndarray
    n_tokens: int

    @property
    def d2(self) -> int:
        return self.phi.shape[1]

    @property
    def phi_tilde(self) -> np.ndarray:
        return np.kron(np.eye(self.n_tokens), self.phi)

    def tap(self, z: np.ndarray) -> np.ndarray:
        return (self.J @ z).reshape(self.n_tokens, self.d2)

    @classmethod
    def random(cls, rng: np.random.Generator, n_tokens=4, d2=3, d1=4, d=16) -> "LinearTapFixture":
        J = rng.standard_normal((n_tokens * d2, d)) / math.sqrt(d)
        phi = rng.standard_normal((d1, d2)) / math.sqrt(d2)
        return cls(J, phi, n_tokens)


def lambda_threshold(J: np.ndarray, phi: np.ndarray) -> float:
    """1 / (sigma_max(J)^2 sigma_max(phi)^2) using power iteration."""
    return 1.0 / (spectral_norm(J) ** 2 * spectral_norm(phi) ** 2)


def contraction_constants(fix: LinearTapFixture, lam: float) -> tuple[float, float]:
    A = fix.J @ fix.J.T
    pt = fix.phi_tilde
    c1 = np.linalg.norm(np.eye(A.shape[0]) - 2 * lam * A @ pt.T @ pt, 2)
    c2 = 2 * lam * math.sqrt(fix.n_tokens) * np.linalg.norm(A @ pt.T, 2)
    return float(c1), float(c2)


def sqdist_repa_step(fix: LinearTapFixture, z: np.ndarray, target: np.ndarray, lam: float) -> np.ndarray:
    """z - lam * grad_z ||target - phi G2(z)||^2 (target is (N, D1))."""
    tape = Tape()
    zv = tape.var(z)
    h = dc.reshape(dc.reshape(zv, (1, -1)) @ tape.const(fix.J.T), (fix.n_tokens, fix.d2))
    r = tape.const(target) - h @ tape.const(fix.phi.T)
    (g,) = tape.gradient(dc.dsum(r * r), [zv])
    return z - lam * g


@dataclass
class ContractionCheck:
    lam: float
    c1: float
    c2: float
    lhs: float
    rhs: float
    before: float
    approx_err: float
    misrepa: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs * (1 + 1e-12) + 1e-14

    @property
    def ratio(self) -> float:
        return self.lhs / self.before if self.before > 0 else float("nan")


def check_contraction(fix: LinearTapFixture, z_t, z_star, f_x, f_xbar, lam: float) -> ContractionCheck:
    """One squared-distance REPA step and the bound
    ||h' - h*|| <= C1 ||h_t - h*|| + C2 (sqrt(ApproxErr) + sqrt(MisREPA))."""
    h_star = fix.tap(z_star)
    h_t = fix.tap(z_t)
    h_new = fix.tap(sqdist_repa_step(fix, z_t, f_xbar, lam))
    c1, c2 = contraction_constants(fix, lam)
    apx = float(approx_err(f_x, f_xbar))
    mis = float(mis_repa(f_x, h_star @ fix.phi.T))
    before = float(np.linalg.norm(h_t - h_star))
    lhs = float(np.linalg.norm(h_new - h_star))
    rhs = c1 * before + c2 * (math.sqrt(apx) + math.sqrt(mis))
    return ContractionCheck(lam, c1, c2, lhs, rhs, before, apx, mis)


def random_contraction_instance(seed: int, n_tokens=4, d2=3, d1=4, d=16):
    rng = np.random.default_rng(seed)
    fix = LinearTapFixture.random(rng, n_tokens, d2, d1, d)
    z_t, z_star = rng.standard_normal((2, d))
    f_x = _unit(rng.standard_normal((n_tokens, d1)))
    f_xbar = _unit(f_x + 0.3 * rng.standard_normal((n_tokens, d1)))
    return fix, z_t, z_star, f_x, f_xbar


def fit_linear_head(h: np.ndarray, feats: np.ndarray) -> np.ndarray:
    """Least-squares phi with phi h^n ~ f^n over all tokens."""
    H = h.reshape(-1, h.shape[-1])
    F = feats.reshape(-1, feats.shape[-1])
    sol, *_ = np.linalg.lstsq(H, F, rcond=None)
    return sol.T


def empirical_contraction(model, phi: np.ndarray, z_t: np.ndarray, t: float, z_star: np.ndarray,
                          target: np.ndarray, lam: float) -> float:
    """||h' - h*|| / ||h_t - h*|| after one squared-distance step on a trained model.

    Reported only: the nonlinear tap carries an uncontrolled second-order term.
    """
    tape = Tape()
    zv = tape.var(z_t[None])
    _, h = model.forward(tape, zv, np.array([t]))
    r = tape.const(target[None]) - h @ tape.const(phi.T)
    (g,) = tape.gradient(dc.dsum(r * r), [zv])
    z_new = z_t - lam * g[0]
    _, h_star = model.velocity_and_tap(z_star, 0.0)
    _, h_t = model.velocity_and_tap(z_t, t)
    _, h_new = model.velocity_and_tap(z_new, t)
    before = np.linalg.norm(h_t - h_star)
    return float(np.linalg.norm(h_new - h_star) / before)


# ---------------------------------------------------------------------------
# encoder robustness to degradation

SR_LADDER = (4, 8, 16)
BLUR_LADDER = (1.5, 3.0, 4.5)
# similarity floor at the default task severities (SR x4, blur sigma 1.5),
# fixed from the first oracle run on held-out images
ROBUSTNESS_THRESHOLD = {"superres": 0.90, "gaussblur": 0.90}


def robustness_curve(images: np.ndarray, encoder: FeatureEncoder, sr_ladder=SR_LADDER,
                     blur_ladder=BLUR_LADDER, noise_std: float = 0.0, seed: int = 0) -> list[dict]:
    """Mean patch cosine between f(x) and f(degraded x) per severity."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("empty image set")
    size = images.shape[-1]
    f_clean = encode_features(encoder, images).values
    rows = [{"family": "identity", "severity": 0.0,
             "similarity": float(mean_patch_cosine(f_clean, f_clean).mean())}]
    ops = [("superres", s, superres(s, size, noise_std)) for s in sr_ladder]
    ops += [("gaussblur", s, gaussblur(s, image_size=size, noise_std=noise_std)) for s in blur_ladder]
    for k, (family, sev, op) in enumerate(ops):
        rng = np.random.default_rng([seed, k]) if noise_std > 0 else None
        y = op.apply(images, rng)
        f_deg = encode_features(encoder, op.proxy_image(y)).values
        sim = mean_patch_cosine(f_clean, f_deg)
        rows.append({"family": family, "severity": float(sev), "similarity": float(sim.mean()),
                     "similarity_std": float(sim.std())})
    return rows


def curve_is_monotone(rows: list[dict]) -> bool:
    for fam in ("superres", "gaussblur"):
        sims = [r["similarity"] for r in sorted((r for r in rows if r["family"] == fam),
                                                key=lambda r: r["severity"])]
        if any(b > a for a, b in zip(sims, sims[1:])):
            return False
    return True
