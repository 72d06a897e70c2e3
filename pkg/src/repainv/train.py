"""Flow-matching training with an optional representation-alignment term,
plus plain MSE training of the autoencoder.

Total objective for the flow model: ``fm + w_repa * repa`` where ``repa`` is
minus the mean patch cosine between encoder features of the clean image and
the projected tap of the corrupted state.  With ``w_repa == 0`` the head is
still fitted, as a probe on the detached tap, so both runs produce a head
that can be scored the same way.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tape
from .nets import (AEConfig, Autoencoder, EncoderConfig, FeatureEncoder, HeadConfig,
                   ProjectionHead, VelocityConfig, VelocityModel, bind, encode_features,
                   round_to_f32)
from .schedule import InterpolantSchedule, corrupt, get_schedule, velocity_target

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            self.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# losses


def flow_matching_loss(tape: Tape, model, x0: np.ndarray, t: np.ndarray, eps: np.ndarray,
                       schedule: InterpolantSchedule, params=None):
    """Batch mean of ||v(x_t, t) - (dalpha x0 + dsigma eps)||^2.  Returns (loss, tap)."""
    if len(x0) == 0:
        raise ValueError("empty batch")
    xt = corrupt(schedule, x0, eps, t)
    target = velocity_target(schedule, x0, eps, t)
    v, h = model.forward(tape, tape.const(xt), t, params)
    r = v - tape.const(target)
    return dc.dsum(r * r) / len(x0), h


def repa_loss(tape: Tape, head: ProjectionHead, h, target_feats: np.ndarray, head_params=None):
    """-(1/N) sum_n cos(f^n(x*), g(h^n)), averaged over the batch."""
    if h.shape[:-1] != target_feats.shape[:-1]:
        raise ValueError(f"patch grids disagree: tap {h.shape} vs features {target_feats.shape}")
    proj = head.forward(tape, h, head_params)
    cos = dc.cosine_rows(proj, tape.const(target_feats))
    return -dc.dmean(cos)


# ---------------------------------------------------------------------------
# flow training


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 3000
    batch: int = 64
    lr: float = 1e-3
    w_repa: float = 0.5
    schedule: str = "linear"
    space: str = "latent"             # "latent" or "pixel"
    eval_every: int = 250
    eval_size: int = 256
    model: VelocityConfig = field(default_factory=VelocityConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    def validate(self):
        if min(self.steps, self.batch) < 1 or self.lr <= 0:
            raise ValueError("steps, batch and lr must be positive")
        if self.w_repa < 0:
            raise ValueError("w_repa must be >= 0")
        if self.space not in ("latent", "pixel"):
            raise ValueError(f"unknown training space {self.space!r}")
        if self.head.in_dim != self.model.dim:
            raise ValueError("head input dim must equal the model token dim")
        get_schedule(self.schedule)
        self.model.validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: VelocityModel
    head: ProjectionHead
    log: list[dict]
    seconds: float


def _param_grads(tape, loss, bound: dict) -> dict[str, np.ndarray]:
    names = list(bound)
    grads = tape.gradient(loss, [bound[k] for k in names], allow_unreachable=True)
    return dict(zip(names, grads))


def loss_and_grads(model: VelocityModel, head: ProjectionHead, x0, feats, t, eps,
                   schedule, w_repa: float):
    """One training evaluation.  Returns (fm, repa, model grads, head grads)."""
    tape = Tape()
    mp = bind(tape, model.params, requires_grad=True)
    fm, h = flow_matching_loss(tape, model, x0, t, eps, schedule, mp)
    if w_repa > 0:
        hp = bind(tape, head.params, requires_grad=True)
        rl = repa_loss(tape, head, h, feats, hp)
        total = fm + rl * w_repa
        grads = _param_grads(tape, total, {**{("m", k): v for k, v in mp.items()},
                                           **{("h", k): v for k, v in hp.items()}})
        g_model = {k: g for (owner, k), g in grads.items() if owner == "m"}
        g_head = {k: g for (owner, k), g in grads.items() if owner == "h"}
        return float(fm.value), float(rl.value), g_model, g_head
    g_model = _param_grads(tape, fm, mp)
    # probe: the head sees the tap as a constant so nothing flows back
    ptape = Tape()
    hp = bind(ptape, head.params, requires_grad=True)
    rl = repa_loss(ptape, head, ptape.const(h.value), feats, hp)
    g_head = _param_grads(ptape, rl, hp)
    return float(fm.value), float(rl.value), g_model, g_head


def held_out_metrics(model, head, x0, feats, schedule, seed: int,
                     t_values=(0.0, 0.25, 0.5, 0.75)) -> dict:
    """Flow loss (random t) and MisREPA averaged over a fixed t set."""
    from .theory import mis_repa_batch

    rng = np.random.default_rng([seed, 7])
    t = rng.uniform(size=len(x0))
    eps = rng.standard_normal(x0.shape)
    fm, _ = flow_matching_loss(Tape(), model, x0, t, eps, schedule)
    mis = [float(np.mean(mis_repa_batch(model, head, x0, feats, tv, schedule,
                                         rng=np.random.default_rng([seed, 8, k]))))
           for k, tv in enumerate(t_values)]
    return {"heldout_fm": float(fm.value), "heldout_misrepa": float(np.mean(mis))}


def train_flow(cfg: TrainConfig, x_train: np.ndarray, f_train: np.ndarray,
               x_val: np.ndarray | None = None, f_val: np.ndarray | None = None,
               log_path: str | Path | None = None) -> TrainResult:
    """Train a velocity model (and head) on states x_train with target features f_train."""
    cfg.validate()
    schedule = get_schedule(cfg.schedule)
    if x_train.shape[1:] != (cfg.model.image_size,) * 2:
        raise ValueError(f"training states {x_train.shape[1:]} do not match model size")
    model = VelocityModel.init(cfg.model, cfg.seed)
    head = ProjectionHead.init(cfg.head, cfg.seed + 1)
    opt_m = Adam(model.params, cfg.lr)
    opt_h = Adam(head.params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    rows: list[dict] = []
    start = time.perf_counter()
    n_val = min(cfg.eval_size, len(x_val)) if x_val is not None else 0

    def evaluate(step, fm, rl):
        row = {"step": step, "fm": fm, "repa": rl}
        if n_val:
            row.update(held_out_metrics(model, head, x_val[:n_val], f_val[:n_val], schedule, cfg.seed))
        rows.append(row)
        log.info("step %d %s", step, row)

    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(x_train), cfg.batch)
        t = rng.uniform(size=cfg.batch)
        eps = rng.standard_normal((cfg.batch,) + x_train.shape[1:])
        fm, rl, gm, gh = loss_and_grads(model, head, x_train[idx], f_train[idx], t, eps,
                                        schedule, cfg.w_repa)
        if not (math.isfinite(fm) and math.isfinite(rl)):
            raise DivergenceError(f"loss became non-finite at step {step} (fm={fm}, repa={rl})")
        opt_m.step(gm)
        opt_h.step(gh)
        if step == 1 or step % cfg.eval_every == 0 or step == cfg.steps:
            evaluate(step, fm, rl)

    # what downstream code will see after a checkpoint round trip
    model = VelocityModel(cfg.model, round_to_f32(model.params))
    head = ProjectionHead(cfg.head, round_to_f32(head.params))
    if log_path is not None:
        write_log(log_path, rows)
    return TrainResult(model, head, rows, time.perf_counter() - start)


def write_log(path, rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for r in rows for k in r}, key=lambda k: (k != "step", k))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# autoencoder


@dataclass
class AETrainConfig:
    seed: int = 0
    steps: int = 3000
    batch: int = 128
    lr: float = 2e-3
    ae: AEConfig = field(default_factory=AEConfig)

    def to_dict(self) -> dict:
        return asdict(self)


def ae_loss(tape: Tape, ae: Autoencoder, x: np.ndarray, p) -> "dc.Var":
    xv = tape.const(x)
    z = ae.encode_raw(tape, xv, p)
    r = ae.decode_raw(tape, z, p) - xv
    return dc.dmean(r * r)


def train_autoencoder(cfg: AETrainConfig, x_train: np.ndarray,
                      log_path: str | Path | None = None) -> tuple[Autoencoder, list[dict]]:
    ae = Autoencoder.init(cfg.ae, cfg.seed)
    opt = Adam(ae.params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 3])
    rows = []
    trainable = [k for k in ae.params if not k.startswith("latent_")]
    # cosine decay keeps the last steps from bouncing around the optimum
    for step in range(1, cfg.steps + 1):
        opt.lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * (step - 1) / cfg.steps))
        idx = rng.integers(0, len(x_train), cfg.batch)
        tape = Tape()
        p = {k: tape.var(ae.params[k], name=k) for k in trainable}
        loss = ae_loss(tape, ae, x_train[idx], p)
        if not math.isfinite(float(loss.value)):
            raise DivergenceError(f"autoencoder loss non-finite at step {step}")
        grads = dict(zip(trainable, tape.gradient(loss, [p[k] for k in trainable])))
        opt.step(grads)
        if step == 1 or step % 250 == 0 or step == cfg.steps:
            rows.append({"step": step, "mse": float(loss.value)})
            log.info("ae step %d mse %.3e", step, float(loss.value))
    # standardize latents over the training set
    params = round_to_f32(ae.params)
    tape = Tape()
    z = ae.encode_raw(tape, tape.const(x_train), bind(tape, params)).value
    params["latent_shift"] = z.mean(axis=0)
    params["latent_scale"] = z.std(axis=0) + 1e-6
    trained = Autoencoder(cfg.ae, round_to_f32(params), trained=True)
    if log_path is not None:
        write_log(log_path, rows)
    return trained, rows


def target_features(encoder: FeatureEncoder, images: np.ndarray) -> np.ndarray:
    return encode_features(encoder, images).values
