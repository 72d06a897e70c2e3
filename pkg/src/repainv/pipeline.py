"""Glue between a config dict and trained, checkpointed models.

A workspace directory holds checkpoints.  Each checkpoint records the hash
of the config sections (and upstream checkpoints) it was trained from;
``ensure_*`` reuses a checkpoint only when those hashes match, otherwise it
retrains and overwrites it.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import data
from .config import config_hash
from .degrade import DegradationOp, make_operator
from .nets import (AEConfig, Autoencoder, EncoderConfig, FeatureEncoder, HeadConfig,
                   ProjectionHead, VelocityConfig, VelocityModel, checkpoint_file, checkpoint_hash,
                   encode_latent, load_autoencoder, load_checkpoint, load_head,
                   load_velocity, save_autoencoder, save_head, save_velocity)
from .train import AETrainConfig, TrainConfig, target_features, train_autoencoder, train_flow

log = logging.getLogger(__name__)


@lru_cache(maxsize=8)
def _images(seed: int, count: int, size: int) -> np.ndarray:
    arr = data.make_images(seed, count, size)
    arr.setflags(write=False)
    return arr


def train_images(cfg) -> np.ndarray:
    d = cfg["data"]
    return _images(d["train_seed"], d["train_count"], d["image_size"])


def heldout_images(cfg) -> np.ndarray:
    d = cfg["data"]
    return _images(d["heldout_seed"], d["heldout_count"], d["image_size"])


def bench_images(cfg, count: int, seed: int | None = None) -> np.ndarray:
    d = cfg["data"]
    return _images(d["bench_seed"] if seed is None else seed, count, d["image_size"])


def make_encoder(cfg) -> FeatureEncoder:
    e = cfg["encoder"]
    return FeatureEncoder(EncoderConfig(image_size=cfg["data"]["image_size"], patch=e["patch"],
                                        pool=e["pool"], dim=e["dim"], seed=e["seed"]))


def make_task(cfg, name: str | None = None) -> DegradationOp:
    t = cfg["task"]
    name = name or t["name"]
    kw = {
        "superres": {"factor": t["sr_factor"]},
        "boxinpaint": {"size": t["box"]},
        "gaussblur": {"sigma": t["blur_sigma"]},
        "motionblur": {"seed": t["motion_seed"], "length": t["motion_length"],
                       "intensity": t["motion_intensity"]},
    }
    if name not in kw:
        raise ValueError(f"unknown task {name!r}")
    return make_operator(name, cfg["data"]["image_size"], t["noise_std"], **kw[name])


def ae_train_config(cfg) -> AETrainConfig:
    a = cfg["ae"]
    return AETrainConfig(seed=a["seed"], steps=a["steps"], batch=a["batch"], lr=a["lr"],
                         ae=AEConfig(image_size=cfg["data"]["image_size"], latent=a["latent"],
                                     hidden=a["hidden"]))


def flow_train_config(cfg, space: str, w_repa: float | None = None) -> TrainConfig:
    f = cfg["flow"]
    if space == "latent":
        side = AEConfig(latent=cfg["ae"]["latent"]).latent_side
        size, patch = side, f["latent_patch"]
    elif space == "pixel":
        size, patch = cfg["data"]["image_size"], f["pixel_patch"]
    else:
        raise ValueError(f"unknown space {space!r}")
    model = VelocityConfig(image_size=size, patch=patch, dim=f["dim"], depth=f["depth"],
                           tap=f["tap"], hidden=f["hidden"], temb_dim=f["temb_dim"])
    head = HeadConfig(in_dim=f["dim"], out_dim=cfg["encoder"]["dim"], hidden=f["head_hidden"])
    return TrainConfig(seed=f["seed"], steps=f["steps"], batch=f["batch"], lr=f["lr"],
                       w_repa=f["w_repa"] if w_repa is None else w_repa, schedule=f["schedule"],
                       space=space, eval_every=f["eval_every"], model=model, head=head)


@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)

    def ae(self) -> Path:
        return self.root / "ae"

    def flow(self, space: str, w_repa: float) -> Path:
        return self.root / f"flow_{space}_w{w_repa:g}"

    def head(self, space: str, w_repa: float) -> Path:
        return self.root / f"head_{space}_w{w_repa:g}"

    def log(self, name: str) -> Path:
        return self.root / f"{name}_loss.csv"

    def record_time(self, name: str, cpu_seconds: float, wall_seconds: float):
        """Training times live beside the checkpoints, outside the hashed manifests."""
        path = self.root / "timings.json"
        data = json.loads(path.read_text()) if path.exists() else {}
        data[name] = {"cpu_seconds": cpu_seconds, "wall_seconds": wall_seconds}
        path.write_text(json.dumps(data, indent=1, sort_keys=True))

    def timings(self) -> dict:
        path = self.root / "timings.json"
        return json.loads(path.read_text()) if path.exists() else {}


def _stored_key(path: Path) -> str | None:
    if not checkpoint_file(path, ".json").exists():
        return None
    try:
        _, _, meta = load_checkpoint(path)
    except (ValueError, KeyError):
        return None
    return meta.get("train_key")


def ae_key(cfg) -> str:
    return config_hash(cfg, ["data", "ae"])


def ensure_ae(ws: Workspace, cfg, retrain: bool = False) -> Autoencoder:
    key = ae_key(cfg)
    path = ws.ae()
    if not retrain and _stored_key(path) == key:
        return load_autoencoder(path)
    log.info("training autoencoder -> %s", path)
    c0, w0 = time.process_time(), time.perf_counter()
    ae, rows = train_autoencoder(ae_train_config(cfg), np.asarray(train_images(cfg)), ws.log("ae"))
    ws.record_time("ae", time.process_time() - c0, time.perf_counter() - w0)
    save_autoencoder(path, ae, {"train_key": key, "config": ae_train_config(cfg).to_dict(),
                                "data": data.manifest(cfg["data"]["train_seed"],
                                                      cfg["data"]["train_count"],
                                                      cfg["data"]["image_size"])})
    return load_autoencoder(path)


@lru_cache(maxsize=4)
def _latents(ae_hash: str, ae_path: str, seed: int, count: int, size: int) -> np.ndarray:
    z = encode_latent(load_autoencoder(ae_path), _images(seed, count, size))
    z.setflags(write=False)
    return z


def training_states(ws: Workspace, cfg, space: str):
    """(train states, train features, held-out states, held-out features)."""
    enc = make_encoder(cfg)
    d = cfg["data"]
    xt, xh = train_images(cfg), heldout_images(cfg)
    ft, fh = target_features(enc, xt), target_features(enc, xh)
    if space == "pixel":
        return np.asarray(xt), ft, np.asarray(xh), fh
    ensure_ae(ws, cfg)
    h = checkpoint_hash(ws.ae())
    zt = _latents(h, str(ws.ae()), d["train_seed"], d["train_count"], d["image_size"])
    zh = _latents(h, str(ws.ae()), d["heldout_seed"], d["heldout_count"], d["image_size"])
    return np.asarray(zt), ft, np.asarray(zh), fh


def flow_key(ws: Workspace, cfg, space: str, w_repa: float) -> str:
    tc = flow_train_config(cfg, space, w_repa)
    parts = [config_hash({"train": tc.to_dict(), "data": cfg["data"], "encoder": cfg["encoder"]})]
    if space == "latent":
        parts.append(checkpoint_hash(ws.ae()))
    return "|".join(parts)


def ensure_flow(ws: Workspace, cfg, space: str = "latent", w_repa: float | None = None,
                retrain: bool = False) -> tuple[VelocityModel, ProjectionHead]:
    w = cfg["flow"]["w_repa"] if w_repa is None else w_repa
    if space == "latent":
        ensure_ae(ws, cfg)
    key = flow_key(ws, cfg, space, w)
    mpath, hpath = ws.flow(space, w), ws.head(space, w)
    if not retrain and _stored_key(mpath) == key and _stored_key(hpath) == key:
        return load_velocity(mpath), load_head(hpath)
    tc = flow_train_config(cfg, space, w)
    log.info("training %s flow (w_repa=%g) -> %s", space, w, mpath)
    xs, fs, xv, fv = training_states(ws, cfg, space)
    c0 = time.process_time()
    res = train_flow(tc, xs, fs, xv, fv, ws.log(f"flow_{space}_w{w:g}"))
    ws.record_time(f"flow_{space}_w{w:g}", time.process_time() - c0, res.seconds)
    meta = {"train_key": key, "config": tc.to_dict(), "final": res.log[-1] if res.log else {}}
    save_velocity(mpath, res.model, meta)
    save_head(hpath, res.head, meta)
    return load_velocity(mpath), load_head(hpath)


def checkpoint_hashes(ws: Workspace, space: str, w_repa: float) -> dict:
    out = {"flow": checkpoint_hash(ws.flow(space, w_repa)),
           "head": checkpoint_hash(ws.head(space, w_repa))}
    if space == "latent":
        out["ae"] = checkpoint_hash(ws.ae())
    return out
