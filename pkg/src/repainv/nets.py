"""Parameterized maps: velocity model with an internal feature tap, projection
head, toy patch feature encoder, and a small MLP autoencoder.

All forward passes are written against :mod:`repainv.diffcore` so gradients
reach both parameters (training) and inputs (guidance).  Models hold plain
float64 numpy parameters and are treated as immutable once built.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Var
from .schedule import InterpolantSchedule, LinearSchedule

FORMAT_VERSION = 1


def bind(tape: Tape, params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Var]:
    if requires_grad:
        return {k: tape.var(v, name=k) for k, v in params.items()}
    return {k: tape.const(v) for k, v in params.items()}


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    return x, False


# ---------------------------------------------------------------------------
# velocity model


@dataclass(frozen=True)
class VelocityConfig:
    image_size: int = 32
    patch: int = 8
    dim: int = 64
    depth: int = 6
    tap: int = 3
    hidden: int = 128
    temb_dim: int = 32

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid**2

    def validate(self):
        if self.image_size % self.patch:
            raise ValueError("image_size must be a multiple of patch")
        if not 1 <= self.tap <= self.depth:
            raise ValueError(f"tap layer {self.tap} outside 1..{self.depth}")
        if self.temb_dim % 2:
            raise ValueError("temb_dim must be even")


def init_velocity_params(cfg: VelocityConfig, seed: int) -> dict[str, np.ndarray]:
    cfg.validate()
    rng = np.random.default_rng(seed)
    s2, d, n, hdim = cfg.patch**2, cfg.dim, cfg.n_tokens, cfg.hidden

    def w(fan_in, *shape, gain=1.0):
        return rng.standard_normal(shape) * gain / math.sqrt(fan_in)

    p = {
        "embed_w": w(s2, s2, d),
        "embed_b": np.zeros(d),
        "pos": 0.1 * rng.standard_normal((n, d)),
        "t_w1": w(cfg.temb_dim, cfg.temb_dim, d),
        "t_b1": np.zeros(d),
        "t_w2": w(d, d, d),
        "t_b2": np.zeros(d),
    }
    for b in range(cfg.depth):
        p[f"b{b}_mix"] = w(n, n, n, gain=0.2)
        p[f"b{b}_cond"] = w(d, d, d, gain=0.5)
        p[f"b{b}_w1"] = w(d, d, hdim)
        p[f"b{b}_b1"] = np.zeros(hdim)
        p[f"b{b}_w2"] = w(hdim, hdim, d, gain=0.2)
        p[f"b{b}_b2"] = np.zeros(d)
    # zero head: an untrained model predicts v = 0
    p["out_w"] = np.zeros((d, s2))
    p["out_b"] = np.zeros(s2)
    return p


def velocity_param_shapes(cfg: VelocityConfig) -> dict[str, tuple]:
    return {k: v.shape for k, v in init_velocity_params(cfg, 0).items()}


def time_features(t, temb_dim: int) -> np.ndarray:
    """Sinusoid arguments t * omega_k for geometric omega in [1, 200]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.exp(np.linspace(0.0, math.log(200.0), temb_dim // 2))
    return t[:, None] * freqs[None, :]


class VelocityModel:
    """u = G1(G2(x, t)): patch tokens -> L residual blocks -> unpatchify.

    ``G2`` is the stack up to and including block ``cfg.tap``; its output is
    the tap ``h`` of shape (B, N, dim).
    """

    kind = "velocity"

    def __init__(self, cfg: VelocityConfig, params: dict[str, np.ndarray]):
        cfg.validate()
        shapes = velocity_param_shapes(cfg)
        for k, s in shapes.items():
            if k not in params or params[k].shape != s:
                raise ValueError(f"parameter {k}: expected shape {s}")
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: VelocityConfig, seed: int) -> "VelocityModel":
        return cls(cfg, init_velocity_params(cfg, seed))

    @property
    def state_shape(self) -> tuple[int, int]:
        return (self.cfg.image_size, self.cfg.image_size)

    @property
    def n_tokens(self) -> int:
        return self.cfg.n_tokens

    def forward(self, tape: Tape, x: Var, t, params: dict[str, Var] | None = None):
        """Return (v, h) Vars for a batch x of shape (B, H, W)."""
        cfg = self.cfg
        if x.value.ndim != 3 or x.shape[1:] != self.state_shape:
            raise ValueError(f"expected (B, {cfg.image_size}, {cfg.image_size}), got {x.shape}")
        p = params if params is not None else bind(tape, self.params)
        bsz = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (bsz,))

        tok = dc.patchify(x, cfg.patch)
        h = dc.add_bias(dc.add_bias(tok @ p["embed_w"], p["embed_b"]), p["pos"])

        args = tape.const(time_features(t, cfg.temb_dim))
        temb = dc.concat([dc.dsin(args), dc.dcos(args)], axis=-1)
        temb = dc.gelu(dc.add_bias(temb @ p["t_w1"], p["t_b1"]))
        temb = dc.add_bias(temb @ p["t_w2"], p["t_b2"])

        tap = None
        for b in range(cfg.depth):
            h = h + dc.matmul(p[f"b{b}_mix"], h)
            u = h + dc.repeat_tokens(temb @ p[f"b{b}_cond"], cfg.n_tokens)
            u = dc.gelu(dc.add_bias(u @ p[f"b{b}_w1"], p[f"b{b}_b1"]))
            h = h + dc.add_bias(u @ p[f"b{b}_w2"], p[f"b{b}_b2"])
            if b + 1 == cfg.tap:
                tap = h
        out = dc.add_bias(h @ p["out_w"], p["out_b"])
        v = dc.unpatchify(out, cfg.patch, cfg.image_size, cfg.image_size)
        return v, tap

    def velocity_and_tap(self, x: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
        xb, single = _as_batch(x, 3)
        tape = Tape()
        v, h = self.forward(tape, tape.const(xb), t)
        if single:
            return v.value[0], h.value[0]
        return v.value, h.value

    def __call__(self, x: np.ndarray, t) -> np.ndarray:
        return self.velocity_and_tap(x, t)[0]


class GaussianVelocityField:
    """Exact velocity of the interpolant when x0 ~ N(mean, std^2) per pixel.

    A closed-form stand-in for a trained model (same ``forward`` contract);
    its tap is just the patchified input.
    """

    kind = "gaussian"

    def __init__(self, mean: np.ndarray, std, schedule: InterpolantSchedule | None = None,
                 patch: int = 1):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.broadcast_to(np.asarray(std, dtype=np.float64), self.mean.shape).copy()
        self.schedule = schedule or LinearSchedule()
        self.patch = patch

    @property
    def state_shape(self):
        return self.mean.shape

    @property
    def n_tokens(self):
        return (self.mean.shape[0] // self.patch) * (self.mean.shape[1] // self.patch)

    def coefficients(self, t: float):
        s = self.schedule
        a, sg, da, ds = (float(f(t)) for f in (s.alpha, s.sigma, s.dalpha, s.dsigma))
        var = a * a * self.std**2 + sg * sg
        k = (da * a * self.std**2 + ds * sg) / var
        return k, (da - k * a) * self.mean

    def forward(self, tape: Tape, x: Var, t, params=None):
        k, c = self.coefficients(float(np.asarray(t).reshape(-1)[0]))
        v = dc.add_bias(dc.apply_mask(x, k), c)
        return v, dc.patchify(x, self.patch)

    def score(self, x: np.ndarray, t: float) -> np.ndarray:
        s = self.schedule
        a, sg = float(s.alpha(t)), float(s.sigma(t))
        return -(x - a * self.mean) / (a * a * self.std**2 + sg * sg)

    def posterior_mean_x0(self, x: np.ndarray, t: float) -> np.ndarray:
        s = self.schedule
        a, sg = float(s.alpha(t)), float(s.sigma(t))
        return self.mean + a * self.std**2 / (a * a * self.std**2 + sg * sg) * (x - a * self.mean)

    def __call__(self, x, t):
        k, c = self.coefficients(float(t))
        return k * x + c


# ---------------------------------------------------------------------------
# projection head


@dataclass(frozen=True)
class HeadConfig:
    in_dim: int = 64
    out_dim: int = 32
    hidden: int = 128
    linear: bool = False


def init_head_params(cfg: HeadConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    if cfg.linear:
        return {"phi": rng.standard_normal((cfg.out_dim, cfg.in_dim)) / math.sqrt(cfg.in_dim)}
    return {
        "w1": rng.standard_normal((cfg.in_dim, cfg.hidden)) / math.sqrt(cfg.in_dim),
        "b1": np.zeros(cfg.hidden),
        "w2": rng.standard_normal((cfg.hidden, cfg.out_dim)) / math.sqrt(cfg.hidden),
        "b2": np.zeros(cfg.out_dim),
    }


class ProjectionHead:
    """g_phi: R^{D2} -> R^{D1}, applied token-wise.  Linear mode is h -> phi @ h."""

    kind = "head"

    def __init__(self, cfg: HeadConfig, params: dict[str, np.ndarray]):
        ref = init_head_params(cfg, 0)
        for k, v in ref.items():
            if k not in params or params[k].shape != v.shape:
                raise ValueError(f"head parameter {k}: expected shape {v.shape}")
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: HeadConfig, seed: int) -> "ProjectionHead":
        return cls(cfg, init_head_params(cfg, seed))

    @classmethod
    def linear(cls, phi: np.ndarray) -> "ProjectionHead":
        phi = np.asarray(phi, dtype=np.float64)
        cfg = HeadConfig(in_dim=phi.shape[1], out_dim=phi.shape[0], linear=True)
        return cls(cfg, {"phi": phi})

    @property
    def phi(self) -> np.ndarray:
        if not self.cfg.linear:
            raise ValueError("phi is only defined for a linear head")
        return self.params["phi"]

    def forward(self, tape: Tape, h: Var, params: dict[str, Var] | None = None) -> Var:
        if h.shape[-1] != self.cfg.in_dim:
            raise ValueError(f"head expects last dim {self.cfg.in_dim}, got {h.shape}")
        p = params if params is not None else bind(tape, self.params)
        if self.cfg.linear:
            return h @ dc.transpose(p["phi"])
        u = dc.gelu(dc.add_bias(h @ p["w1"], p["b1"]))
        return dc.add_bias(u @ p["w2"], p["b2"])

    def __call__(self, h: np.ndarray) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        tape = Tape()
        hv = h if h.ndim >= 2 else h[None]
        return self.forward(tape, tape.const(hv)).value.reshape(*h.shape[:-1], self.cfg.out_dim)


def project(head: ProjectionHead, h: np.ndarray) -> np.ndarray:
    return head(h)


def spectral_norm(mat: np.ndarray, iters: int = 20000, tol: float = 1e-10, seed: int = 0) -> float:
    """Largest singular value by power iteration on M^T M.

    Stops when the eigen-residual ||M^T M v - s^2 v|| drops below tol * s^2; the
    squared-singular-value error is then second order in the residual.
    """
    mat = np.asarray(mat, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(mat.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = mat.T @ (mat @ v)
        rq = float(v @ w)
        if rq == 0.0:
            return 0.0
        if np.linalg.norm(w - rq * v) <= tol * rq:
            break
        v = w / np.linalg.norm(w)
    return float(np.linalg.norm(mat @ v))


# ---------------------------------------------------------------------------
# toy patch encoder


@dataclass
class PatchFeatures:
    """Per-patch embeddings (…, N, D) plus a mask of degenerate patches."""

    values: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.degenerate is None:
            self.degenerate = np.zeros(self.values.shape[:-1], dtype=bool)

    @property
    def any_degenerate(self) -> bool:
        return bool(np.any(self.degenerate))


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch: int = 8
    pool: int = 2
    dim: int = 32
    seed: int = 1234
    normalize: bool = True
    center: float = 0.5

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2


class FeatureEncoder:
    """Low-pass + fixed random projection per patch position, l2-normalized.

    A stand-in for a pretrained self-supervised encoder: pixels are centred,
    average-pooled by ``pool``, split into patches, and each patch position n
    gets its own seeded Gaussian projection R_n.
    """

    kind = "encoder"

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        if cfg.image_size % cfg.patch or cfg.patch % cfg.pool:
            raise ValueError("image_size/patch/pool are not nested")
        self.cfg = cfg
        q = (cfg.patch // cfg.pool) ** 2
        rng = np.random.default_rng(cfg.seed)
        self.proj = rng.standard_normal((cfg.n_tokens, q, cfg.dim)) / math.sqrt(q)
        fb = self.proj.sum(axis=1)
        self.fallback = fb / np.linalg.norm(fb, axis=-1, keepdims=True)

    @property
    def n_tokens(self) -> int:
        return self.cfg.n_tokens

    def _raw(self, tape: Tape, x: Var) -> Var:
        cfg = self.cfg
        if x.value.ndim != 3 or x.shape[1:] != (cfg.image_size, cfg.image_size):
            raise ValueError(f"encoder expects (B, {cfg.image_size}, {cfg.image_size}), got {x.shape}")
        u = dc.avg_pool(x - cfg.center, cfg.pool)
        u = dc.patchify(u, cfg.patch // cfg.pool)                 # (B, N, q)
        u = dc.matmul(dc.transpose(u, (1, 0, 2)), tape.const(self.proj))  # (N, B, D)
        return dc.transpose(u, (1, 0, 2))

    def forward(self, tape: Tape, x: Var) -> Var:
        raw = self._raw(tape, x)
        if not self.cfg.normalize:
            return raw
        return dc.normalize_rows(raw, fallback=self.fallback)

    def __call__(self, x: np.ndarray) -> PatchFeatures:
        return encode_features(self, x)


def encode_features(encoder: FeatureEncoder, x: np.ndarray) -> PatchFeatures:
    xb, single = _as_batch(x, 3)
    tape = Tape()
    raw = encoder._raw(tape, tape.const(xb))
    degenerate = np.linalg.norm(raw.value, axis=-1) < 1e-12
    vals = encoder.forward(tape, tape.const(xb)).value if encoder.cfg.normalize else raw.value
    if single:
        return PatchFeatures(vals[0], degenerate[0])
    return PatchFeatures(vals, degenerate)


# ---------------------------------------------------------------------------
# autoencoder


@dataclass(frozen=True)
class AEConfig:
    image_size: int = 32
    latent: int = 64
    hidden: int = 512

    @property
    def latent_side(self) -> int:
        side = int(round(math.sqrt(self.latent)))
        if side * side != self.latent:
            raise ValueError("latent dim must be a perfect square")
        return side


def init_ae_params(cfg: AEConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    n = cfg.image_size**2

    def w(fan_in, *shape):
        return rng.standard_normal(shape) / math.sqrt(fan_in)

    return {
        "enc_w1": w(n, n, cfg.hidden),
        "enc_b1": np.zeros(cfg.hidden),
        "enc_w2": w(cfg.hidden, cfg.hidden, cfg.latent),
        "enc_b2": np.zeros(cfg.latent),
        "dec_w1": w(cfg.latent, cfg.latent, cfg.hidden),
        "dec_b1": np.zeros(cfg.hidden),
        "dec_w2": w(cfg.hidden, cfg.hidden, n),
        "dec_b2": np.zeros(n),
        "latent_shift": np.zeros(cfg.latent),
        "latent_scale": np.ones(cfg.latent),
    }


class UntrainedModelError(RuntimeError):
    pass


class Autoencoder:
    """MLP encoder E and decoder D; latents are standardized per dimension
    and laid out as (side, side) arrays for the latent velocity model."""

    kind = "autoencoder"

    def __init__(self, cfg: AEConfig, params: dict[str, np.ndarray], trained: bool = False):
        ref = init_ae_params(cfg, 0)
        for k, v in ref.items():
            if k not in params or params[k].shape != v.shape:
                raise ValueError(f"autoencoder parameter {k}: expected shape {v.shape}")
        self.cfg = cfg
        self.params = params
        self.trained = trained

    @classmethod
    def init(cls, cfg: AEConfig, seed: int) -> "Autoencoder":
        return cls(cfg, init_ae_params(cfg, seed), trained=False)

    def _require_trained(self):
        if not self.trained:
            raise UntrainedModelError("autoencoder has not been trained")

    def encode_raw(self, tape: Tape, x: Var, p: dict[str, Var]) -> Var:
        n = self.cfg.image_size**2
        u = dc.reshape(x, (x.shape[0], n))
        u = dc.gelu(dc.add_bias(u @ p["enc_w1"], p["enc_b1"]))
        return dc.add_bias(u @ p["enc_w2"], p["enc_b2"])

    def decode_raw(self, tape: Tape, z: Var, p: dict[str, Var]) -> Var:
        u = dc.gelu(dc.add_bias(z @ p["dec_w1"], p["dec_b1"]))
        u = dc.add_bias(u @ p["dec_w2"], p["dec_b2"])
        s = self.cfg.image_size
        return dc.reshape(u, (z.shape[0], s, s))

    def encode(self, tape: Tape, x: Var, params=None) -> Var:
        self._require_trained()
        p = params if params is not None else bind(tape, self.params)
        z = self.encode_raw(tape, x, p)
        z = dc.apply_mask(dc.add_bias(z, -self.params["latent_shift"]),
                          1.0 / self.params["latent_scale"])
        side = self.cfg.latent_side
        return dc.reshape(z, (x.shape[0], side, side))

    def decode(self, tape: Tape, z: Var, params=None) -> Var:
        self._require_trained()
        p = params if params is not None else bind(tape, self.params)
        flat = dc.reshape(z, (z.shape[0], self.cfg.latent))
        flat = dc.add_bias(dc.apply_mask(flat, self.params["latent_scale"]),
                           self.params["latent_shift"])
        return self.decode_raw(tape, flat, p)


def encode_latent(ae: Autoencoder, x: np.ndarray) -> np.ndarray:
    xb, single = _as_batch(x, 3)
    tape = Tape()
    z = ae.encode(tape, tape.const(xb)).value
    return z[0] if single else z


def decode_latent(ae: Autoencoder, z: np.ndarray) -> np.ndarray:
    zb, single = _as_batch(z, 3)
    tape = Tape()
    x = ae.decode(tape, tape.const(zb)).value
    return x[0] if single else x


class LinearAutoencoder:
    """Affine decoder D(z) = U vec(z) + c with E its least-squares inverse.

    Used by the linear-Gaussian solver oracles.
    """

    kind = "linear_autoencoder"
    trained = True

    def __init__(self, basis: np.ndarray, offset: np.ndarray, image_size: int):
        self.basis = np.asarray(basis, dtype=np.float64)       # (n_pixels, d)
        self.offset = np.asarray(offset, dtype=np.float64)     # (n_pixels,)
        self.image_size = image_size
        d = self.basis.shape[1]
        self.side = int(round(math.sqrt(d)))
        self.pinv = np.linalg.pinv(self.basis)

    def encode(self, tape: Tape, x: Var, params=None) -> Var:
        n = self.image_size**2
        u = dc.add_bias(dc.reshape(x, (x.shape[0], n)), -self.offset)
        z = u @ tape.const(self.pinv.T)
        return dc.reshape(z, (x.shape[0], self.side, self.side))

    def decode(self, tape: Tape, z: Var, params=None) -> Var:
        flat = dc.reshape(z, (z.shape[0], self.side * self.side))
        u = dc.add_bias(flat @ tape.const(self.basis.T), self.offset)
        return dc.reshape(u, (z.shape[0], self.image_size, self.image_size))


# ---------------------------------------------------------------------------
# checkpoint IO


def checkpoint_file(path: str | Path, ext: str) -> Path:
    """``path`` plus extension; names may contain dots (``flow_w0.5``)."""
    path = Path(path)
    return path.with_name(path.name + ext)


def save_checkpoint(path: str | Path, kind: str, config: dict, params: dict[str, np.ndarray],
                    meta: dict | None = None) -> str:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float32).

    Returns the checkpoint hash.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "params": entries,
        "meta": meta or {},
        "data_sha256": hashlib.sha256(blob).hexdigest(),
    }
    text = json.dumps(manifest, indent=1, sort_keys=True)
    checkpoint_file(path, ".bin").write_bytes(blob)
    checkpoint_file(path, ".json").write_text(text)
    return checkpoint_hash(path)


def checkpoint_hash(path: str | Path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    h.update(checkpoint_file(path, ".json").read_bytes())
    h.update(checkpoint_file(path, ".bin").read_bytes())
    return h.hexdigest()


def load_checkpoint(path: str | Path, kind: str | None = None):
    """Return (config dict, params dict (float64), meta dict)."""
    path = Path(path)
    manifest = json.loads(checkpoint_file(path, ".json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('format_version')}")
    if kind is not None and manifest.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {manifest.get('kind')!r}")
    blob = checkpoint_file(path, ".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["data_sha256"]:
        raise ValueError(f"{path}: data does not match manifest hash")
    flat = np.frombuffer(blob, dtype="<f4")
    total = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in manifest["params"])
    if total != flat.size:
        raise ValueError(f"{path}: manifest lists {total} values, sidecar holds {flat.size}")
    params = {}
    for e in manifest["params"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        params[e["name"]] = flat[e["offset"]: e["offset"] + size].astype(np.float64).reshape(e["shape"])
    return manifest["config"], params, manifest["meta"]


def save_velocity(path, model: VelocityModel, meta=None) -> str:
    return save_checkpoint(path, "velocity", asdict(model.cfg), model.params, meta)


def load_velocity(path) -> VelocityModel:
    cfg, params, _ = load_checkpoint(path, "velocity")
    return VelocityModel(VelocityConfig(**cfg), params)


def save_head(path, head: ProjectionHead, meta=None) -> str:
    return save_checkpoint(path, "head", asdict(head.cfg), head.params, meta)


def load_head(path) -> ProjectionHead:
    cfg, params, _ = load_checkpoint(path, "head")
    return ProjectionHead(HeadConfig(**cfg), params)


def save_autoencoder(path, ae: Autoencoder, meta=None) -> str:
    if not ae.trained:
        raise UntrainedModelError("refusing to checkpoint an untrained autoencoder")
    return save_checkpoint(path, "autoencoder", asdict(ae.cfg), ae.params, meta)


def load_autoencoder(path) -> Autoencoder:
    cfg, params, _ = load_checkpoint(path, "autoencoder")
    return Autoencoder(AEConfig(**cfg), params, trained=True)


def round_to_f32(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Params as they will read back from a checkpoint."""
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}
