"""Posterior samplers guided by a measurement residual, with optional
representation-alignment guidance.

One loop covers every solver in the family:

* pixel DPS: the state is the image, decoder is the identity;
* latent DPS: the state is an autoencoder latent, x0 = D(z0_hat);
* ReSample: latent DPS plus, at steps in ``resample_steps``, a hard
  data-consistency solve from z0_hat and a stochastic renoising back onto
  the current time marginal.

Per step k = T..1 (t = k/T, t' = (k-1)/T), with gradients taken at the
incoming state z_t:

    z <- z_t - dt * v                              (probability-flow Euler)
    z <- resample(z)                               (ReSample, k in C)
    z <- z - eta_t * grad ||y - A D(z0_hat)||^2    (measurement)
    z <- z + lam * grad sum_n cos(c^n, g(h^n))     (alignment, tap mode)

In feature mode the alignment term is sum_n cos(f^n(y), f^n(D(z0_hat))),
which bypasses the model's internal tokens.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .degrade import DegradationOp
from .diffcore import NonFiniteError, Tape, Var
from .nets import FeatureEncoder, ProjectionHead, encode_features
from .schedule import T_CLAMP, clamp_t, denoised_estimate, get_schedule

SOLVER_KINDS = ("pixel_dps", "latent_dps", "resample")
STEP_SCHEDULES = ("snr", "inverse-norm")
PROXY_RULES = ("measurement", "denoised")
REPA_MODES = ("tap", "feature")
RESID_FLOOR = 1e-8


class SolverAbort(FloatingPointError):
    """Non-finite values during a solve; carries the step for diagnostics."""

    def __init__(self, msg, step=None, t=None):
        super().__init__(msg)
        self.step = step
        self.t = t


@dataclass
class SolverConfig:
    kind: str = "latent_dps"
    steps: int = 50
    step_schedule: str = "snr"
    kappa: float = 2.0
    lam: float = 0.01
    repa_mode: str = "tap"
    proxy: str = "measurement"
    resample_steps: tuple[int, ...] = ()
    gamma: float = 0.4
    inner_iters: int = 30
    inner_lr: float = 0.1
    reeval_repa: bool = False
    schedule: str = "linear"
    seed: int = 0

    def validate(self):
        if self.kind not in SOLVER_KINDS:
            raise ValueError(f"unknown solver {self.kind!r}; choose from {SOLVER_KINDS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_schedule not in STEP_SCHEDULES:
            raise ValueError(f"unknown step schedule {self.step_schedule!r}")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.repa_mode not in REPA_MODES:
            raise ValueError(f"unknown alignment mode {self.repa_mode!r}")
        if self.proxy not in PROXY_RULES:
            raise ValueError(f"unknown proxy rule {self.proxy!r}")
        if any(k < 1 or k > self.steps for k in self.resample_steps):
            raise ValueError("resample steps must lie in 1..steps")
        if self.resample_steps and self.kind != "resample":
            raise ValueError("resample_steps only apply to the resample solver")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.inner_iters < 0 or self.inner_lr <= 0:
            raise ValueError("bad inner solver settings")
        get_schedule(self.schedule)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resample_steps"] = list(self.resample_steps)
        return d


def default_resample_steps(steps: int, count: int = 5) -> tuple[int, ...]:
    """``count`` evenly spaced step indices in the second (low-noise) half."""
    half = steps // 2
    if half < 1:
        return ()
    idx = np.unique(np.linspace(1, half, min(count, half)).round().astype(int))
    return tuple(int(k) for k in idx[::-1])


def step_size(kind: str, kappa: float, t: float | None = None, residual=None):
    """Measurement step: kappa / ||r|| (inverse-norm) or kappa / max(t/(1-t), 1) (snr)."""
    if kind == "inverse-norm":
        r = np.asarray(residual, dtype=np.float64)
        if np.any(r < 0):
            raise ValueError("residual norm must be >= 0")
        return kappa / np.maximum(r, RESID_FLOOR)
    if kind == "snr":
        if t is None or not 0 < t < 1:
            raise ValueError("snr step needs t in (0, 1)")
        return kappa / max(t / (1 - t), 1.0)
    raise ValueError(f"unknown step schedule {kind!r}")


class IdentityDecoder:
    trained = True

    def decode(self, tape: Tape, z: Var, params=None) -> Var:
        return z


@dataclass
class SolverTrace:
    t: np.ndarray                 # (T,)
    state_hash: list[list[str]]   # T x B
    residual: np.ndarray          # (T, B) ||y - A x0_hat|| at the incoming state
    repa: np.ndarray              # (T, B) mean patch cosine of the alignment term
    eta: np.ndarray               # (T, B)
    reconstruction: np.ndarray    # (B, H, W), clamped to [0, 1]
    final_state: np.ndarray
    resample_improved: list = field(default_factory=list)

    def rows(self, b: int = 0) -> list[dict]:
        return [{"k": k, "t": float(self.t[k]), "state_hash": self.state_hash[k][b],
                 "residual": float(self.residual[k, b]), "repa": float(self.repa[k, b]),
                 "eta": float(self.eta[k, b])} for k in range(len(self.t))]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.t, self.residual, self.repa, self.eta, self.reconstruction, self.final_state):
            h.update(np.ascontiguousarray(arr).tobytes())
        for row in self.state_hash:
            h.update("".join(row).encode())
        return h.hexdigest()


def _hash_state(z: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(z).tobytes()).hexdigest()[:16]


@dataclass
class Problem:
    """Everything a solve needs besides the config."""

    model: object
    op: DegradationOp
    y: np.ndarray                          # (B, *measurement_shape)
    decoder: object = field(default_factory=IdentityDecoder)
    head: ProjectionHead | None = None
    encoder: FeatureEncoder | None = None
    indices: np.ndarray | None = None      # per-sample rng stream ids

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim == 2:
            self.y = self.y[None]
        if self.indices is None:
            self.indices = np.arange(len(self.y))


class Solver:
    def __init__(self, cfg: SolverConfig, problem: Problem):
        cfg.validate()
        self.cfg = cfg
        self.p = problem
        self.schedule = get_schedule(cfg.schedule)
        needs_ae = cfg.kind != "pixel_dps"
        if needs_ae and isinstance(problem.decoder, IdentityDecoder):
            raise ValueError(f"{cfg.kind} needs an autoencoder decoder")
        if not needs_ae and not isinstance(problem.decoder, IdentityDecoder):
            raise ValueError("pixel_dps runs without a decoder")
        if getattr(problem.decoder, "trained", True) is False:
            raise ValueError("decoder is untrained")
        if cfg.lam > 0:
            if problem.encoder is None:
                raise ValueError("alignment guidance needs a feature encoder")
            if cfg.repa_mode == "tap" and problem.head is None:
                raise ValueError("tap alignment needs a projection head")
        self._proxy_fixed = None
        if cfg.lam > 0 and cfg.proxy == "measurement":
            self._proxy_fixed = encode_features(problem.encoder, problem.op.proxy_image(problem.y)).values

    # -- objectives --------------------------------------------------------

    def _forward(self, tape: Tape, z: Var, t: float):
        v, h = self.p.model.forward(tape, z, np.full(z.shape[0], t))
        # the denoiser is undefined at pure noise; the first step uses t just below 1
        z0 = denoised_estimate(self.schedule, z, v, min(t, 1.0 - T_CLAMP))
        x0 = self.p.decoder.decode(tape, z0)
        return v, h, z0, x0

    def measurement_objective(self, tape: Tape, x0: Var) -> tuple[Var, np.ndarray]:
        r = tape.const(self.p.y) - self.p.op.forward(tape, x0)
        sq = r * r
        per = np.sqrt((sq.value).reshape(len(self.p.y), -1).sum(axis=1))
        return dc.dsum(sq), per

    def alignment_objective(self, tape: Tape, h: Var, x0: Var, proxy: np.ndarray) -> Var:
        """Sum over images and patches of the cosine alignment (per-image mean is traced)."""
        if self.cfg.repa_mode == "tap":
            pred = self.p.head.forward(tape, h)
        else:
            pred = self.p.encoder.forward(tape, x0)
        return dc.cosine_rows(pred, tape.const(proxy))

    def _proxy(self, x0_value: np.ndarray) -> np.ndarray:
        if self._proxy_fixed is not None:
            return self._proxy_fixed
        return encode_features(self.p.encoder, np.clip(x0_value, 0.0, 1.0)).values

    def guidance(self, z: np.ndarray, t: float, want_repa: bool):
        """Gradients at z: (v, z0_hat, x0_hat, grad L, residual norms, grad R, per-image cos)."""
        tape = Tape()
        zv = tape.var(z)
        v, h, z0, x0 = self._forward(tape, zv, t)
        loss, resid = self.measurement_objective(tape, x0)
        (g_meas,) = tape.gradient(loss, [zv])
        g_repa, cos_img = None, np.full(len(z), np.nan)
        if want_repa:
            cos = self.alignment_objective(tape, h, x0, self._proxy(x0.value))
            cos_img = cos.value.mean(axis=-1)
            (g_repa,) = tape.gradient(dc.dsum(cos), [zv])
        return v.value, z0.value, x0.value, g_meas, resid, g_repa, cos_img

    def repa_gradient(self, z: np.ndarray, t: float, x0_hint: np.ndarray):
        tape = Tape()
        zv = tape.var(z)
        _, h, _, x0 = self._forward(tape, zv, t)
        cos = self.alignment_objective(tape, h, x0, self._proxy(x0_hint))
        (g,) = tape.gradient(dc.dsum(cos), [zv])
        return g

    # -- hard consistency + renoise ------------------------------------------

    def consistency_solve(self, z0: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """GD on 0.5 ||y - A D(z)||^2 from z0, keeping each sample's best iterate."""
        best = z0.copy()
        best_r = None
        z = z0.copy()
        for it in range(self.cfg.inner_iters + 1):
            tape = Tape()
            zv = tape.var(z)
            loss, resid = self.measurement_objective(tape, self.p.decoder.decode(tape, zv))
            if best_r is None:
                best_r = resid.copy()
                start_r = resid.copy()
            else:
                better = resid < best_r
                best[better] = z[better]
                best_r = np.where(better, resid, best_r)
            if it == self.cfg.inner_iters:
                break
            (g,) = tape.gradient(loss * 0.5, [zv])
            z = z - self.cfg.inner_lr * g
            if not np.all(np.isfinite(z)):
                break
        return best, start_r, best_r

    def stochastic_resample(self, z_tilde, z_next, z0_hat, t_next, noise):
        a, s = float(self.schedule.alpha(t_next)), float(self.schedule.sigma(t_next))
        if s == 0.0:
            return z_tilde.copy()
        eps_hat = (z_next - a * z0_hat) / s
        g = self.cfg.gamma
        return a * z_tilde + s * (g * noise + (1 - g) * eps_hat)

    # -- main loop -----------------------------------------------------------

    def initial_state(self) -> tuple[np.ndarray, list[np.random.Generator]]:
        shape = tuple(self.p.model.state_shape)
        rngs = [np.random.default_rng([self.cfg.seed, int(i)]) for i in self.p.indices]
        z = np.stack([r.standard_normal(shape) for r in rngs])
        return z, rngs

    def run(self, z_init: np.ndarray | None = None) -> SolverTrace:
        # overflow is caught below as a non-finite state and reported as SolverAbort
        with np.errstate(over="ignore", invalid="ignore"):
            return self._run(z_init)

    def _run(self, z_init):
        cfg = self.cfg
        T = cfg.steps
        dt = 1.0 / T
        z, rngs = self.initial_state()
        if z_init is not None:
            z = np.array(z_init, dtype=np.float64)
        B = len(z)
        ts = np.arange(T, 0, -1) / T
        hashes, resid_tr = [], np.zeros((T, B))
        repa_tr = np.full((T, B), np.nan)
        eta_tr = np.zeros((T, B))
        improved = []
        use_repa = cfg.lam > 0
        C = set(cfg.resample_steps)
        for i, t in enumerate(ts):
            k = T - i
            t = float(t)
            t_next = (k - 1) / T
            try:
                v, z0, x0, g_meas, resid, g_repa, cos_img = self.guidance(z, t, use_repa)
            except NonFiniteError as e:
                raise SolverAbort(f"step {k} (t={t:.4f}): {e}", k, t) from e
            hashes.append([_hash_state(z[b]) for b in range(B)])
            resid_tr[i] = resid
            repa_tr[i] = cos_img
            if cfg.step_schedule == "snr":
                eta = np.full(B, step_size("snr", cfg.kappa, clamp_t(t)))
            else:
                eta = step_size("inverse-norm", cfg.kappa, residual=resid)
            eta_tr[i] = eta

            z_new = z - dt * v
            if k in C:
                z_tilde, r0, r1 = self.consistency_solve(z0)
                improved.append((k, r0, r1))
                noise = np.stack([r.standard_normal(z.shape[1:]) for r in rngs])
                z_new = self.stochastic_resample(z_tilde, z_new, z0, t_next, noise)
            z_new = z_new - eta.reshape(-1, *([1] * (z.ndim - 1))) * g_meas
            if use_repa:
                if cfg.reeval_repa:
                    try:
                        g_repa = self.repa_gradient(z_new, t, x0)
                    except NonFiniteError as e:
                        raise SolverAbort(f"step {k} (t={t:.4f}): {e}", k, t) from e
                z_new = z_new + cfg.lam * g_repa
            if not np.all(np.isfinite(z_new)):
                raise SolverAbort(f"non-finite state after step {k} (t={t:.4f})", k, t)
            z = z_new
        tape = Tape()
        x = self.p.decoder.decode(tape, tape.const(z)).value
        return SolverTrace(ts, hashes, resid_tr, repa_tr, eta_tr, np.clip(x, 0.0, 1.0), z, improved)


def solve(cfg: SolverConfig, problem: Problem, z_init=None) -> SolverTrace:
    return Solver(cfg, problem).run(z_init)


def guidance_objective_fn(solver: Solver, t: float, which: str = "measurement"):
    """Scalar function of the state Var, for finite-difference certification."""

    def fn(zv: Var) -> Var:
        tape = zv.tape
        _, h, _, x0 = solver._forward(tape, zv, t)
        if which == "measurement":
            return solver.measurement_objective(tape, x0)[0]
        proxy = solver._proxy(x0.value)
        return dc.dsum(solver.alignment_objective(tape, h, x0, proxy))

    return fn
